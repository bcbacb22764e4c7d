//! LASSO recovery by iterative shrinkage-thresholding.

use nalgebra::{DMatrix, DVector};

use super::{NasError, Result};

/// `sign(x)·max(|x| − t, 0)` elementwise.
pub fn soft_threshold(x: &[f64], t: f64) -> Result<Vec<f64>> {
    if t < 0.0 || t.is_nan() {
        return Err(NasError::NegativeThreshold(t));
    }
    Ok(x.iter().map(|&v| shrink(v, t)).collect())
}

#[inline]
fn shrink(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `½‖Aα − b‖² + λ‖α‖₁`.
pub fn lasso_objective(a: &DMatrix<f64>, alpha: &[f64], b: &[f64], lambda: f64) -> f64 {
    let r = a * DVector::from_column_slice(alpha) - DVector::from_column_slice(b);
    0.5 * r.norm_squared() + lambda * alpha.iter().map(|v| v.abs()).sum::<f64>()
}

/// Step constant for ISTA: the largest eigenvalue of `AᵀA` by power
/// iteration (relative tolerance 1e-8), inflated slightly so the step never
/// exceeds `1/λ_max`.
pub fn lipschitz_constant(a: &DMatrix<f64>) -> f64 {
    let gram = a.transpose() * a;
    let n = gram.nrows();
    // deterministic start with mass on every coordinate
    let mut v = DVector::from_fn(n, |i, _| 1.0 + i as f64 / n as f64);
    v /= v.norm();
    let mut lam = 0.0;
    for _ in 0..10_000 {
        let w = &gram * &v;
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        v = w / norm;
        if (next - lam).abs() <= 1e-8 * next.abs() {
            lam = next;
            break;
        }
        lam = next;
    }
    lam * (1.0 + 1e-6)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IstaConfig {
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop when the largest coordinate change falls below this.
    pub tol: f64,
}

impl Default for IstaConfig {
    fn default() -> Self {
        IstaConfig {
            lambda: 1e-4,
            max_iters: 2000,
            tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IstaOutcome {
    pub alpha: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Objective before the first iteration and after each one, if requested.
    pub trace: Option<Vec<f64>>,
}

/// Solves the LASSO for `α` starting from `warm` (or zero).
pub fn ista_recover(
    a: &DMatrix<f64>,
    b: &[f64],
    lipschitz: f64,
    warm: Option<&[f64]>,
    cfg: &IstaConfig,
    record_trace: bool,
) -> Result<IstaOutcome> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(NasError::LengthMismatch {
            what: "compressed vector",
            expected: m,
            got: b.len(),
        });
    }
    let mut alpha = match warm {
        Some(w) if w.len() != n => {
            return Err(NasError::LengthMismatch {
                what: "warm start",
                expected: n,
                got: w.len(),
            })
        }
        Some(w) => DVector::from_column_slice(w),
        None => DVector::zeros(n),
    };
    let bv = DVector::from_column_slice(b);
    let mut trace = record_trace.then(|| vec![lasso_objective(a, alpha.as_slice(), b, cfg.lambda)]);
    if lipschitz <= 0.0 {
        // A = 0: every α has the same residual, so the ℓ1 term wins
        return Ok(IstaOutcome {
            alpha: vec![0.0; n],
            iterations: 0,
            converged: true,
            trace,
        });
    }
    let step = 1.0 / lipschitz;
    let thresh = cfg.lambda * step;
    let at = a.transpose();
    for it in 0..cfg.max_iters {
        let grad = &at * (a * &alpha - &bv);
        let mut delta = 0.0f64;
        for i in 0..n {
            let next = shrink(alpha[i] - step * grad[i], thresh);
            if !next.is_finite() {
                return Err(NasError::NonFinite { iteration: it });
            }
            delta = delta.max((next - alpha[i]).abs());
            alpha[i] = next;
        }
        if let Some(t) = trace.as_mut() {
            t.push(lasso_objective(a, alpha.as_slice(), b, cfg.lambda));
        }
        if delta < cfg.tol {
            return Ok(IstaOutcome {
                alpha: alpha.as_slice().to_vec(),
                iterations: it + 1,
                converged: true,
                trace,
            });
        }
    }
    Ok(IstaOutcome {
        alpha: alpha.as_slice().to_vec(),
        iterations: cfg.max_iters,
        converged: false,
        trace,
    })
}
