//! Two-dimensional loss surfaces around a trained point along
//! filter-normalized random directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LandscapeError {
    #[error("grid resolution must be at least 1, got {0}")]
    Resolution(usize),
    #[error("grid range must be finite and positive, got {0}")]
    Range(f64),
    #[error("direction has {got} tensors, parameters have {expected}")]
    DirectionMismatch { expected: usize, got: usize },
    #[error("objective failed: {0}")]
    Objective(String),
}

/// Loss values on an `R×R` grid over `(a, b) ∈ [−r, r]²`.
#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub resolution: usize,
    pub range: f64,
    /// Shared coordinates of both axes.
    pub coords: Vec<f64>,
    /// Row-major by `a` then `b`; `None` where the loss was not finite.
    pub losses: Vec<Option<f64>>,
    pub seeds: (u64, u64),
}

impl LandscapeGrid {
    pub fn at(&self, i: usize, j: usize) -> Option<f64> {
        self.losses[i * self.resolution + j]
    }

    /// `a,b,loss` rows; missing values are left empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,loss\n");
        for (i, a) in self.coords.iter().enumerate() {
            for (j, b) in self.coords.iter().enumerate() {
                let l = self.at(i, j).map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!("{a},{b},{l}\n"));
            }
        }
        out
    }
}

/// `R` points evenly spaced over `[−r, r]`; the middle of an odd grid is
/// exactly zero.
pub fn grid_coords(resolution: usize, range: f64) -> Vec<f64> {
    if resolution == 1 {
        return vec![0.0];
    }
    let den = (resolution - 1) as f64;
    (0..resolution)
        .map(|i| range * (2.0 * i as f64 - den) / den)
        .collect()
}

/// A Gaussian direction with each filter (slice along the first axis)
/// rescaled to the norm of the matching filter of `center`. One-dimensional
/// tensors (biases, affine scales) get a zero direction.
pub fn filter_normalized_direction(center: &[Tensor], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    center
        .iter()
        .map(|t| {
            let mut d: Vec<f64> = (0..t.numel()).map(|_| StandardNormal.sample(&mut rng)).collect();
            if t.shape().len() < 2 {
                d.iter_mut().for_each(|v| *v = 0.0);
            } else {
                let per = t.numel() / t.shape()[0];
                for (df, tf) in d.chunks_mut(per).zip(t.data().chunks(per)) {
                    let dn = df.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let tn = tf.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let s = if dn > 0.0 { tn / dn } else { 0.0 };
                    df.iter_mut().for_each(|v| *v *= s);
                }
            }
            Tensor::new(t.shape().to_vec(), d).expect("same shape")
        })
        .collect()
}

/// `center + a·δ + b·η`, tensor by tensor.
pub fn perturb(center: &[Tensor], delta: &[Tensor], eta: &[Tensor], a: f64, b: f64) -> Vec<Tensor> {
    center
        .iter()
        .zip(delta.iter().zip(eta))
        .map(|(c, (d, e))| {
            let data = c
                .data()
                .iter()
                .zip(d.data().iter().zip(e.data()))
                .map(|(x, (dv, ev))| x + (a * dv + b * ev))
                .collect();
            Tensor::new(c.shape().to_vec(), data).expect("same shape")
        })
        .collect()
}

/// Evaluates `objective` over the grid spanned by two given directions.
pub fn landscape_with_directions<F>(
    center: &[Tensor],
    delta: &[Tensor],
    eta: &[Tensor],
    resolution: usize,
    range: f64,
    seeds: (u64, u64),
    mut objective: F,
) -> Result<LandscapeGrid, LandscapeError>
where
    F: FnMut(&[Tensor]) -> Result<f64, String>,
{
    if resolution == 0 {
        return Err(LandscapeError::Resolution(resolution));
    }
    if !(range.is_finite() && range > 0.0) {
        return Err(LandscapeError::Range(range));
    }
    for d in [delta, eta] {
        if d.len() != center.len() {
            return Err(LandscapeError::DirectionMismatch {
                expected: center.len(),
                got: d.len(),
            });
        }
    }
    let coords = grid_coords(resolution, range);
    let mut losses = Vec::with_capacity(resolution * resolution);
    for &a in &coords {
        for &b in &coords {
            let point = perturb(center, delta, eta, a, b);
            let l = objective(&point).map_err(LandscapeError::Objective)?;
            losses.push(l.is_finite().then_some(l));
        }
    }
    Ok(LandscapeGrid {
        resolution,
        range,
        coords,
        losses,
        seeds,
    })
}

/// Draws both directions from their seeds, then evaluates the grid.
/// Returns the grid and the two directions.
pub fn landscape<F>(
    center: &[Tensor],
    resolution: usize,
    range: f64,
    seeds: (u64, u64),
    objective: F,
) -> Result<(LandscapeGrid, Vec<Tensor>, Vec<Tensor>), LandscapeError>
where
    F: FnMut(&[Tensor]) -> Result<f64, String>,
{
    let delta = filter_normalized_direction(center, seeds.0);
    let eta = filter_normalized_direction(center, seeds.1);
    let grid = landscape_with_directions(center, &delta, &eta, resolution, range, seeds, objective)?;
    Ok((grid, delta, eta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad(p: &[Tensor]) -> Result<f64, String> {
        Ok(p.iter().flat_map(|t| t.data()).map(|v| (v - 0.5).powi(2)).sum())
    }

    #[test]
    fn coords_are_symmetric_with_exact_zero() {
        let c = grid_coords(51, 1.0);
        assert_eq!(c.len(), 51);
        assert_eq!(c[25], 0.0);
        assert_eq!(c[0], -1.0);
        assert_eq!(c[50], 1.0);
        assert_eq!(grid_coords(1, 2.0), vec![0.0]);
    }

    #[test]
    fn filters_match_center_norms() {
        let w = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64 - 4.0).collect()).unwrap();
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let d = filter_normalized_direction(&[w.clone(), b], 9);
        for (df, wf) in d[0].data().chunks(4).zip(w.data().chunks(4)) {
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n(df) - n(wf)).abs() < 1e-12);
        }
        assert!(d[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn center_and_symmetry() {
        let center = vec![Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.9, 1.2, 0.0, -2.0]).unwrap()];
        let (grid, _, _) = landscape(&center, 5, 0.5, (3, 3), quad).unwrap();
        assert_eq!(grid.at(2, 2), Some(quad(&center).unwrap()));
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(grid.at(i, j), grid.at(j, i));
            }
        }
    }

    #[test]
    fn non_finite_points_are_missing() {
        let center = vec![Tensor::new(vec![1, 1], vec![1.0]).unwrap()];
        let (grid, _, _) = landscape(&center, 3, 1.0, (1, 2), |p| {
            let v = p[0].data()[0];
            Ok(if v > 1.0 { f64::NAN } else { v })
        })
        .unwrap();
        assert!(grid.losses.iter().any(Option::is_none));
        assert_eq!(grid.at(1, 1), Some(1.0));
        assert!(landscape(&center, 0, 1.0, (1, 2), quad).is_err());
        assert!(landscape(&center, 3, -1.0, (1, 2), quad).is_err());
    }
}
