//! Augmentation operations and the magnitude-to-parameter map.
//!
//! Magnitudes live in `[0, 10]`. Image operations follow the AutoAugment
//! conventions: rotation up to 30 degrees, posterize down to 4 bits,
//! solarize threshold down to 0, shear up to 0.3, translation up to a third
//! of the side, and enhancement factors `0.1 + 1.8 * m / 10`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::AugmentError;

pub const MAX_MAGNITUDE: f64 = 10.0;
/// Fill value for pixels that geometric transforms pull from outside the image.
const FILL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransformKind {
    AutoContrast,
    Equalize,
    Rotate,
    Posterize,
    Solarize,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Identity,
    GaussianNoise,
    Scale,
    Shift,
    FeatureDropout,
}

use TransformKind::*;

impl TransformKind {
    pub const IMAGE: [TransformKind; 14] = [
        AutoContrast,
        Equalize,
        Rotate,
        Posterize,
        Solarize,
        Color,
        Contrast,
        Brightness,
        Sharpness,
        ShearX,
        ShearY,
        TranslateX,
        TranslateY,
        Identity,
    ];

    /// Substitute catalog for feature-vector inputs.
    pub const VECTOR: [TransformKind; 5] = [Identity, GaussianNoise, Scale, Shift, FeatureDropout];

    pub fn name(self) -> &'static str {
        match self {
            AutoContrast => "AutoContrast",
            Equalize => "Equalize",
            Rotate => "Rotate",
            Posterize => "Posterize",
            Solarize => "Solarize",
            Color => "Color",
            Contrast => "Contrast",
            Brightness => "Brightness",
            Sharpness => "Sharpness",
            ShearX => "ShearX",
            ShearY => "ShearY",
            TranslateX => "TranslateX",
            TranslateY => "TranslateY",
            Identity => "Identity",
            GaussianNoise => "GaussianNoise",
            Scale => "Scale",
            Shift => "Shift",
            FeatureDropout => "FeatureDropout",
        }
    }

    pub fn applies_to_images(self) -> bool {
        Self::IMAGE.contains(&self)
    }

    pub fn applies_to_vectors(self) -> bool {
        Self::VECTOR.contains(&self)
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::IMAGE
            .iter()
            .chain(Self::VECTOR.iter())
            .copied()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AugmentError::UnknownOp(s.to_string()))
    }
}

/// An operation together with its magnitude.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformOp {
    kind: TransformKind,
    magnitude: f64,
}

impl TransformOp {
    pub fn new(kind: TransformKind, magnitude: f64) -> Result<Self, AugmentError> {
        if !(0.0..=MAX_MAGNITUDE).contains(&magnitude) {
            return Err(AugmentError::MagnitudeOutOfRange(magnitude));
        }
        Ok(TransformOp { kind, magnitude })
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn magnitude(&self) -> f64 {
        self.magnitude
    }

    fn level(&self) -> f64 {
        self.magnitude / MAX_MAGNITUDE
    }
}

/// Draws a magnitude uniformly from `[0, 10]`.
pub fn sample_magnitude<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random::<f64>() * MAX_MAGNITUDE
}

/// Applies `op` to one input of the given shape.
///
/// Images are `[C, H, W]` with values in `[0, 1]` and stay clamped to that
/// range; vectors are `[F]`. Only the vector operations consume randomness.
pub fn apply_transform<R: Rng + ?Sized>(
    x: &[f64],
    shape: &[usize],
    op: TransformOp,
    rng: &mut R,
) -> Result<Vec<f64>, AugmentError> {
    let kind = op.kind;
    if kind == Identity {
        return Ok(x.to_vec());
    }
    let is_image = shape.len() == 3;
    let compatible = if is_image {
        kind.applies_to_images()
    } else {
        kind.applies_to_vectors()
    };
    if !compatible || x.len() != shape.iter().product::<usize>() {
        return Err(AugmentError::IncompatibleOp {
            op: kind.name(),
            shape: shape.to_vec(),
        });
    }
    if !is_image {
        return Ok(apply_vector(x, op, rng));
    }
    let img = Image {
        c: shape[0],
        h: shape[1],
        w: shape[2],
        data: x,
    };
    let lv = op.level();
    let enhance = 0.1 + 1.8 * lv;
    let mut out = match kind {
        AutoContrast => img.per_channel(autocontrast),
        Equalize => img.per_channel(equalize),
        Rotate => {
            let (s, c) = (30.0 * lv).to_radians().sin_cos();
            img.warp(|x, y| (c * x + s * y, -s * x + c * y), true)
        }
        Posterize => {
            let shift = (4.0 * lv) as u32;
            let mask = !((1u32 << shift) - 1) & 0xff;
            x.iter().map(|&v| (quantize(v) & mask) as f64 / 255.0).collect()
        }
        Solarize => {
            let threshold = 256.0 * (1.0 - lv);
            x.iter()
                .map(|&v| if v * 255.0 >= threshold { 1.0 - v } else { v })
                .collect()
        }
        Color => {
            let gray = img.grayscale();
            let degenerate: Vec<f64> = if img.c == 3 {
                (0..3).flat_map(|_| gray.iter().copied()).collect()
            } else {
                x.to_vec()
            };
            blend(&degenerate, x, enhance)
        }
        Contrast => {
            let gray = img.grayscale();
            let mean = gray.iter().sum::<f64>() / gray.len() as f64;
            blend(&vec![mean; x.len()], x, enhance)
        }
        Brightness => blend(&vec![0.0; x.len()], x, enhance),
        Sharpness => blend(&img.per_channel(smooth), x, enhance),
        ShearX => {
            let s = 0.3 * lv;
            img.warp(|x, y| (x + s * y, y), false)
        }
        ShearY => {
            let s = 0.3 * lv;
            img.warp(|x, y| (x, y + s * x), false)
        }
        TranslateX => {
            let t = lv * img.w as f64 / 3.0;
            img.warp(|x, y| (x + t, y), false)
        }
        TranslateY => {
            let t = lv * img.h as f64 / 3.0;
            img.warp(|x, y| (x, y + t), false)
        }
        Identity | GaussianNoise | Scale | Shift | FeatureDropout => unreachable!(),
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

fn apply_vector<R: Rng + ?Sized>(x: &[f64], op: TransformOp, rng: &mut R) -> Vec<f64> {
    let lv = op.level();
    match op.kind {
        GaussianNoise => {
            let sigma = 0.1 * lv;
            if sigma == 0.0 {
                return x.to_vec();
            }
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            x.iter().map(|&v| v + normal.sample(rng)).collect()
        }
        Scale => x.iter().map(|&v| v * (1.0 + 0.3 * lv)).collect(),
        Shift => x.iter().map(|&v| v + 0.1 * lv).collect(),
        FeatureDropout => {
            let p = 0.3 * lv;
            x.iter()
                .map(|&v| if rng.random::<f64>() < p { 0.0 } else { v })
                .collect()
        }
        _ => x.to_vec(),
    }
}

fn quantize(v: f64) -> u32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u32
}

/// `degenerate + factor * (img - degenerate)`, the PIL enhancement blend.
fn blend(degenerate: &[f64], img: &[f64], factor: f64) -> Vec<f64> {
    degenerate
        .iter()
        .zip(img)
        .map(|(&d, &v)| d + factor * (v - d))
        .collect()
}

fn autocontrast(plane: &[f64], _h: usize, _w: usize) -> Vec<f64> {
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return plane.to_vec();
    }
    plane.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

fn equalize(plane: &[f64], _h: usize, _w: usize) -> Vec<f64> {
    let q: Vec<u32> = plane.iter().map(|&v| quantize(v)).collect();
    let mut hist = [0usize; 256];
    for &v in &q {
        hist[v as usize] += 1;
    }
    let nonzero: Vec<usize> = hist.iter().copied().filter(|&c| c > 0).collect();
    if nonzero.len() <= 1 {
        return plane.to_vec();
    }
    let step = (nonzero.iter().sum::<usize>() - nonzero[nonzero.len() - 1]) / 255;
    if step == 0 {
        return plane.to_vec();
    }
    let mut lut = [0u32; 256];
    let mut n = step / 2;
    for (i, &count) in hist.iter().enumerate() {
        lut[i] = (n / step).min(255) as u32;
        n += count;
    }
    q.iter().map(|&v| lut[v as usize] as f64 / 255.0).collect()
}

/// 3x3 smoothing with centre weight 5; border pixels are left untouched.
fn smooth(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = plane.to_vec();
    if h < 3 || w < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                    acc += wgt * plane[(y + dy - 1) * w + (x + dx - 1)];
                }
            }
            out[y * w + x] = acc / 13.0;
        }
    }
    out
}

struct Image<'a> {
    c: usize,
    h: usize,
    w: usize,
    data: &'a [f64],
}

impl Image<'_> {
    fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    fn per_channel(&self, f: fn(&[f64], usize, usize) -> Vec<f64>) -> Vec<f64> {
        (0..self.c).flat_map(|ch| f(self.plane(ch), self.h, self.w)).collect()
    }

    fn grayscale(&self) -> Vec<f64> {
        if self.c != 3 {
            return self.plane(0).to_vec();
        }
        let (r, g, b) = (self.plane(0), self.plane(1), self.plane(2));
        (0..self.h * self.w)
            .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
            .collect()
    }

    /// Nearest-neighbour resampling. `map` sends an output coordinate to its
    /// source coordinate, relative to the centre when `centred`.
    fn warp(&self, map: impl Fn(f64, f64) -> (f64, f64), centred: bool) -> Vec<f64> {
        let (cx, cy) = if centred {
            ((self.w as f64 - 1.0) / 2.0, (self.h as f64 - 1.0) / 2.0)
        } else {
            (0.0, 0.0)
        };
        let mut out = vec![FILL; self.data.len()];
        for y in 0..self.h {
            for x in 0..self.w {
                let (sx, sy) = map(x as f64 - cx, y as f64 - cy);
                let (sx, sy) = ((sx + cx).round(), (sy + cy).round());
                if sx < 0.0 || sy < 0.0 || sx >= self.w as f64 || sy >= self.h as f64 {
                    continue;
                }
                let src = sy as usize * self.w + sx as usize;
                for ch in 0..self.c {
                    out[ch * self.h * self.w + y * self.w + x] = self.plane(ch)[src];
                }
            }
        }
        out
    }
}
