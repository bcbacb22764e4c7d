//! Direct (loop) convolution and 3x3 pooling kernels on NCHW data.
//!
//! All reductions run in a fixed loop order so results are bit-reproducible.

use super::{Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvConfig {
    /// Stride-1 convolution that keeps the spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvConfig {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Geometry shared by the forward and backward kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cfg: ConvConfig,
}

fn out_extent(size: usize, k: usize, cfg: &ConvConfig) -> Option<usize> {
    let span = cfg.dilation * (k - 1) + 1;
    let padded = size + 2 * cfg.padding;
    if padded < span || cfg.stride == 0 {
        return None;
    }
    Some((padded - span) / cfg.stride + 1)
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], cfg: ConvConfig) -> Result<ConvGeom> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "conv2d",
        lhs: x.to_vec(),
        rhs: w.to_vec(),
    };
    if x.len() != 4 || w.len() != 4 || cfg.groups == 0 || cfg.dilation == 0 {
        return Err(mismatch());
    }
    let (n, cin, h, wd) = (x[0], x[1], x[2], x[3]);
    let (cout, cpg, kh, kw) = (w[0], w[1], w[2], w[3]);
    if cin % cfg.groups != 0 || cout % cfg.groups != 0 || cin / cfg.groups != cpg {
        return Err(mismatch());
    }
    let oh = out_extent(h, kh, &cfg).ok_or_else(mismatch)?;
    let ow = out_extent(wd, kw, &cfg).ok_or_else(mismatch)?;
    Ok(ConvGeom {
        n,
        cin,
        h,
        w: wd,
        cout,
        kh,
        kw,
        oh,
        ow,
        cfg,
    })
}

/// Input coordinate hit by output coordinate `o` and kernel tap `k`, if in bounds.
#[inline]
fn src(o: usize, k: usize, cfg: &ConvConfig, size: usize) -> Option<usize> {
    let pos = (o * cfg.stride + k * cfg.dilation) as isize - cfg.padding as isize;
    if pos < 0 || pos as usize >= size {
        None
    } else {
        Some(pos as usize)
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let cfg = g.cfg;
    let cin_g = g.cin / cfg.groups;
    let cout_g = g.cout / cfg.groups;
    let mut out = vec![0.0; g.n * g.cout * g.oh * g.ow];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let obase = (n * g.cout + oc) * g.oh * g.ow;
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xbase = (n * g.cin + ic) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = w[((oc * cin_g + icl) * g.kh + ky) * g.kw + kx];
                        for oy in 0..g.oh {
                            let Some(iy) = src(oy, ky, &cfg, g.h) else {
                                continue;
                            };
                            let xrow = xbase + iy * g.w;
                            let orow = obase + oy * g.ow;
                            for ox in 0..g.ow {
                                if let Some(ix) = src(ox, kx, &cfg, g.w) {
                                    out[orow + ox] += wv * x[xrow + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (grad wrt input, grad wrt weight).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Vec<f64>, Vec<f64>) {
    let cfg = g.cfg;
    let cin_g = g.cin / cfg.groups;
    let cout_g = g.cout / cfg.groups;
    let mut gx = if need_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut gw = if need_w { vec![0.0; w.len()] } else { Vec::new() };
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let obase = (n * g.cout + oc) * g.oh * g.ow;
            for icl in 0..cin_g {
                let ic = grp * cin_g + icl;
                let xbase = (n * g.cin + ic) * g.h * g.w;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let widx = ((oc * cin_g + icl) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for oy in 0..g.oh {
                            let Some(iy) = src(oy, ky, &cfg, g.h) else {
                                continue;
                            };
                            let xrow = xbase + iy * g.w;
                            let orow = obase + oy * g.ow;
                            for ox in 0..g.ow {
                                if let Some(ix) = src(ox, kx, &cfg, g.w) {
                                    let go = gout[orow + ox];
                                    if need_x {
                                        gx[xrow + ix] += wv * go;
                                    }
                                    acc += x[xrow + ix] * go;
                                }
                            }
                        }
                        if need_w {
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// 3x3 pooling with padding 1. Average pooling divides by the number of
/// in-bounds taps. Returns the output and, for max pooling, the flat input
/// index that produced every output element.
pub(crate) fn pool3_forward(
    shape: &[usize],
    x: &[f64],
    kind: PoolKind,
    stride: usize,
) -> Result<(Vec<usize>, Vec<f64>, Vec<usize>)> {
    if shape.len() != 4 || stride == 0 {
        return Err(TensorError::Invalid {
            op: "pool3x3",
            msg: format!("expected NCHW input and positive stride, got {shape:?}"),
        });
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cfg = ConvConfig {
        stride,
        padding: 1,
        dilation: 1,
        groups: 1,
    };
    let oh = out_extent(h, 3, &cfg).unwrap_or(0);
    let ow = out_extent(w, 3, &cfg).unwrap_or(0);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut arg = if kind == PoolKind::Max {
        vec![0usize; out.len()]
    } else {
        Vec::new()
    };
    for plane in 0..n * c {
        let xbase = plane * h * w;
        let obase = plane * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                let mut sum = 0.0;
                let mut count = 0usize;
                for ky in 0..3 {
                    let Some(iy) = src(oy, ky, &cfg, h) else {
                        continue;
                    };
                    for kx in 0..3 {
                        let Some(ix) = src(ox, kx, &cfg, w) else {
                            continue;
                        };
                        let idx = xbase + iy * w + ix;
                        let v = x[idx];
                        sum += v;
                        count += 1;
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = obase + oy * ow + ox;
                match kind {
                    PoolKind::Max => {
                        out[o] = best;
                        arg[o] = best_idx;
                    }
                    PoolKind::Avg => out[o] = sum / count as f64,
                }
            }
        }
    }
    Ok((vec![n, c, oh, ow], out, arg))
}

/// Smallest gap between the largest and second-largest in-bounds tap over
/// every 3x3 max-pool window.
pub(crate) fn max_pool_gap(shape: &[usize], x: &[f64], stride: usize) -> f64 {
    let (h, w) = (shape[2], shape[3]);
    let cfg = ConvConfig {
        stride,
        padding: 1,
        dilation: 1,
        groups: 1,
    };
    let oh = out_extent(h, 3, &cfg).unwrap_or(0);
    let ow = out_extent(w, 3, &cfg).unwrap_or(0);
    let mut gap = f64::INFINITY;
    for plane in 0..shape[0] * shape[1] {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
                for ky in 0..3 {
                    let Some(iy) = src(oy, ky, &cfg, h) else { continue };
                    for kx in 0..3 {
                        let Some(ix) = src(ox, kx, &cfg, w) else { continue };
                        let v = x[base + iy * w + ix];
                        if v > first {
                            second = first;
                            first = v;
                        } else if v > second {
                            second = v;
                        }
                    }
                }
                gap = gap.min(first - second);
            }
        }
    }
    gap
}

pub(crate) fn pool3_backward(
    in_shape: &[usize],
    out_shape: &[usize],
    kind: PoolKind,
    stride: usize,
    argmax: &[usize],
    gout: &[f64],
) -> Vec<f64> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut gx = vec![0.0; n * c * h * w];
    match kind {
        PoolKind::Max => {
            for (o, &g) in gout.iter().enumerate() {
                gx[argmax[o]] += g;
            }
        }
        PoolKind::Avg => {
            let cfg = ConvConfig {
                stride,
                padding: 1,
                dilation: 1,
                groups: 1,
            };
            for plane in 0..n * c {
                let xbase = plane * h * w;
                let obase = plane * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let taps: Vec<usize> = (0..3)
                            .filter_map(|ky| src(oy, ky, &cfg, h))
                            .flat_map(|iy| {
                                (0..3).filter_map(move |kx| src(ox, kx, &cfg, w).map(|ix| iy * w + ix))
                            })
                            .collect();
                        let share = gout[obase + oy * ow + ox] / taps.len() as f64;
                        for t in taps {
                            gx[xbase + t] += share;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_for_strided_and_dilated() {
        let g = conv_geom(&[1, 2, 5, 5], &[4, 2, 3, 3], ConvConfig::default().with_stride(2)).unwrap();
        assert_eq!((g.oh, g.ow), (2, 2));
        let g = conv_geom(&[1, 2, 5, 5], &[2, 1, 3, 3], ConvConfig::same(3, 2).with_groups(2)).unwrap();
        assert_eq!((g.oh, g.ow), (5, 5));
        assert!(conv_geom(&[1, 3, 5, 5], &[2, 2, 3, 3], ConvConfig::default()).is_err());
    }

    #[test]
    fn avg_pool_excludes_padding() {
        let x = vec![1.0; 4];
        let (shape, out, _) = pool3_forward(&[1, 1, 2, 2], &x, PoolKind::Avg, 1).unwrap();
        assert_eq!(shape, vec![1, 1, 2, 2]);
        assert!(out.iter().all(|&v| v == 1.0));
    }
}
