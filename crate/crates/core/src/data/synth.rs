//! Small two-dimensional benchmark generators.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, DataKind, Dataset, Sample};

/// Two interleaving half circles. Class 0 lies on the unit circle's upper
/// half, class 1 on the circle of radius 1 centred at `(1, 0.5)`, lower half.
pub fn synth_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::Empty(format!("moons need n >= 2, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_out = n / 2;
    let n_in = n - n_out;
    let lin = |count: usize, i: usize| {
        if count == 1 {
            0.0
        } else {
            PI * i as f64 / (count - 1) as f64
        }
    };
    let mut samples = Vec::with_capacity(n);
    for i in 0..n_out {
        let t = lin(n_out, i);
        samples.push(Sample {
            x: vec![t.cos(), t.sin()],
            y: 0,
        });
    }
    for i in 0..n_in {
        let t = lin(n_in, i);
        samples.push(Sample {
            x: vec![1.0 - t.cos(), 0.5 - t.sin()],
            y: 1,
        });
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        for s in &mut samples {
            for v in &mut s.x {
                *v += normal.sample(&mut rng);
            }
        }
    }
    samples.shuffle(&mut rng);
    Ok(Dataset {
        samples,
        shape: vec![2],
        num_classes: 2,
        kind: DataKind::Vector,
        provenance: format!("moons(n={n}, noise={noise}, seed={seed})"),
    })
}

/// `k` isotropic Gaussian clusters (std 0.5) centred on a circle of radius 4
/// with a seed-dependent rotation. Class sizes differ by at most one.
pub fn synth_blobs(n: usize, k: usize, seed: u64) -> Result<Dataset, DataError> {
    if n < 2 || k == 0 {
        return Err(DataError::Empty(format!("blobs need n >= 2 and k >= 1, got n={n}, k={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = rng.random::<f64>() * 2.0 * PI;
    let normal = Normal::new(0.0, 0.5).expect("valid std");
    let mut samples = Vec::with_capacity(n);
    for class in 0..k {
        let count = n / k + usize::from(class < n % k);
        let angle = phase + 2.0 * PI * class as f64 / k as f64;
        let (cx, cy) = (4.0 * angle.cos(), 4.0 * angle.sin());
        for _ in 0..count {
            samples.push(Sample {
                x: vec![cx + normal.sample(&mut rng), cy + normal.sample(&mut rng)],
                y: class,
            });
        }
    }
    samples.shuffle(&mut rng);
    Ok(Dataset {
        samples,
        shape: vec![2],
        num_classes: k,
        kind: DataKind::Vector,
        provenance: format!("blobs(n={n}, k={k}, seed={seed})"),
    })
}
