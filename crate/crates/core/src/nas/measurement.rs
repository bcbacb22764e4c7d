use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{NasError, Result};

/// Matrices whose mutual coherence reaches this value are redrawn.
pub const COHERENCE_LIMIT: f64 = 0.8;
const MAX_DRAWS: usize = 200;

/// Largest absolute inner product between two distinct columns.
pub fn mutual_coherence(a: &DMatrix<f64>) -> f64 {
    let gram = a.transpose() * a;
    let mut worst = 0.0f64;
    for i in 0..gram.nrows() {
        for j in 0..i {
            worst = worst.max(gram[(i, j)].abs());
        }
    }
    worst
}

fn draw<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> DMatrix<f64> {
    let normal = Normal::new(0.0, 1.0 / (m as f64).sqrt()).expect("positive std");
    // column-major fill keeps each column's draws contiguous in the stream
    let mut a = DMatrix::from_fn(m, n, |_, _| 0.0);
    for j in 0..n {
        for i in 0..m {
            a[(i, j)] = normal.sample(rng);
        }
    }
    for mut col in a.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    a
}

/// Gaussian `N(0, 1/m)` measurement matrix with unit-norm columns, redrawn
/// from the same stream until its coherence is below [`COHERENCE_LIMIT`].
pub fn init_measurement<R: Rng + ?Sized>(m: usize, n: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if m == 0 || m >= n {
        return Err(NasError::Dimension { m, n });
    }
    let mut coherence = f64::NAN;
    for _ in 0..MAX_DRAWS {
        let a = draw(m, n, rng);
        coherence = mutual_coherence(&a);
        if coherence < COHERENCE_LIMIT {
            return Ok(a);
        }
    }
    Err(NasError::Coherence {
        m,
        n,
        attempts: MAX_DRAWS,
        coherence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_columns_and_determinism() {
        let a = init_measurement(20, 56, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for c in a.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
        assert_eq!(a, init_measurement(20, 56, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
    }

    #[test]
    fn coherence_below_limit_over_seeds() {
        for seed in 0..100 {
            let a = init_measurement(20, 56, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            // independent pairwise loop
            let mut worst = 0.0f64;
            for i in 0..56 {
                for j in i + 1..56 {
                    worst = worst.max(a.column(i).dot(&a.column(j)).abs());
                }
            }
            assert!(worst < 0.8, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn rejects_square_or_tall() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(init_measurement(5, 5, &mut rng).unwrap_err(), NasError::Dimension { m: 5, n: 5 });
        assert!(init_measurement(0, 5, &mut rng).is_err());
    }
}
