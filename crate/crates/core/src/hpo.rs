//! Differentiable learning rate and weight decay.
//!
//! The optimizer is plain SGD with weight decay, `θ′ = θ − lr·(g + wd·θ)`.
//! The one-step hypergradient differentiates the fresh-batch loss at `θ′`
//! through that step while holding `θ` and `g` fixed.

use thiserror::Error;

use crate::data::BatchId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HpoError {
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("length mismatch: saved step has {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("hyper-parameter update reuses batch {0}, which produced the parameter step")]
    SameBatch(BatchId),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub lr_min: f64,
    pub lr_max: f64,
    pub wd_min: f64,
    pub wd_max: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            lr_min: 1e-5,
            lr_max: 1.0,
            wd_min: 0.0,
            wd_max: 0.1,
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<(), HpoError> {
        let all = [self.lr_min, self.lr_max, self.wd_min, self.wd_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(HpoError::InvalidBounds(format!("{self:?} has a non-finite entry")));
        }
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(HpoError::InvalidBounds(format!(
                "need 0 < lr_min <= lr_max, got [{}, {}]",
                self.lr_min, self.lr_max
            )));
        }
        if !(self.wd_min >= 0.0 && self.wd_min <= self.wd_max) {
            return Err(HpoError::InvalidBounds(format!(
                "need 0 <= wd_min <= wd_max, got [{}, {}]",
                self.wd_min, self.wd_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperParams {
    pub lr: f64,
    pub wd: f64,
    pub bounds: Bounds,
    /// Step size for the hyper-parameter update.
    pub meta_lr: f64,
}

impl HyperParams {
    /// Builds clamped hyper-parameters after validating the bounds.
    pub fn new(lr: f64, wd: f64, bounds: Bounds, meta_lr: f64) -> Result<Self, HpoError> {
        bounds.validate()?;
        if !(meta_lr.is_finite() && meta_lr > 0.0) {
            return Err(HpoError::InvalidBounds(format!("meta learning rate must be positive, got {meta_lr}")));
        }
        if !lr.is_finite() || !wd.is_finite() {
            return Err(HpoError::NonFinite {
                what: "initial hyper-parameter",
                index: usize::from(lr.is_finite()),
            });
        }
        Ok(HyperParams {
            lr,
            wd,
            bounds,
            meta_lr,
        }
        .clamped())
    }

    pub fn clamped(self) -> Self {
        let b = self.bounds;
        HyperParams {
            lr: self.lr.clamp(b.lr_min, b.lr_max),
            wd: self.wd.clamp(b.wd_min, b.wd_max),
            ..self
        }
    }
}

/// What the hypergradient needs from the parameter step.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedStep {
    pub theta: Vec<f64>,
    pub grad: Vec<f64>,
    pub lr: f64,
    pub wd: f64,
    pub batch: BatchId,
}

fn check_finite(v: &[f64], what: &'static str) -> Result<(), HpoError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(HpoError::NonFinite { what, index }),
        None => Ok(()),
    }
}

/// One SGD step with weight decay. Returns `θ′` and the state the
/// hypergradient will need.
pub fn optimizer_step(theta: &[f64], grad: &[f64], hp: &HyperParams, batch: BatchId) -> Result<(Vec<f64>, SavedStep), HpoError> {
    if theta.len() != grad.len() {
        return Err(HpoError::LengthMismatch {
            expected: theta.len(),
            got: grad.len(),
        });
    }
    check_finite(grad, "gradient")?;
    let next = theta
        .iter()
        .zip(grad)
        .map(|(&t, &g)| t - hp.lr * (g + hp.wd * t))
        .collect();
    let saved = SavedStep {
        theta: theta.to_vec(),
        grad: grad.to_vec(),
        lr: hp.lr,
        wd: hp.wd,
        batch,
    };
    Ok((next, saved))
}

/// `(dL/dlr, dL/dwd)` of the fresh-batch loss, given its gradient `g′` at `θ′`.
pub fn hypergrad(saved: &SavedStep, fresh_grad: &[f64], fresh_batch: BatchId) -> Result<(f64, f64), HpoError> {
    if fresh_batch == saved.batch {
        return Err(HpoError::SameBatch(fresh_batch));
    }
    if fresh_grad.len() != saved.grad.len() {
        return Err(HpoError::LengthMismatch {
            expected: saved.grad.len(),
            got: fresh_grad.len(),
        });
    }
    check_finite(fresh_grad, "fresh gradient")?;
    let mut d_lr = 0.0;
    let mut gt = 0.0;
    for ((&gp, &g), &t) in fresh_grad.iter().zip(&saved.grad).zip(&saved.theta) {
        d_lr -= gp * (g + saved.wd * t);
        gt += gp * t;
    }
    Ok((d_lr, -saved.lr * gt))
}

/// `hp′ = clamp(hp − β·hypergrad)`.
pub fn update_hparams(hp: &HyperParams, hypergrad: (f64, f64)) -> Result<HyperParams, HpoError> {
    if !hypergrad.0.is_finite() || !hypergrad.1.is_finite() {
        return Err(HpoError::NonFinite {
            what: "hypergradient",
            index: usize::from(hypergrad.0.is_finite()),
        });
    }
    Ok(HyperParams {
        lr: hp.lr - hp.meta_lr * hypergrad.0,
        wd: hp.wd - hp.meta_lr * hypergrad.1,
        ..*hp
    }
    .clamped())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: BatchId = BatchId { stream: 0, seq: 0 };
    const B: BatchId = BatchId { stream: 1, seq: 0 };

    fn hp(lr: f64, wd: f64) -> HyperParams {
        HyperParams::new(lr, wd, Bounds::default(), 1e-3).unwrap()
    }

    #[test]
    fn plain_and_decay_steps() {
        let (t, _) = optimizer_step(&[1.0], &[1.0], &hp(0.1, 0.0), A).unwrap();
        assert!((t[0] - 0.9).abs() < 1e-15);
        let h = HyperParams::new(0.1, 0.5, Bounds { wd_max: 1.0, ..Bounds::default() }, 1e-3).unwrap();
        let (t, _) = optimizer_step(&[2.0], &[0.0], &h, A).unwrap();
        assert!((t[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn step_matches_independent_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let theta: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = hp(0.03, 0.07);
        let (next, _) = optimizer_step(&theta, &grad, &h, A).unwrap();
        for i in 0..10 {
            let decayed = theta[i] * (1.0 - h.lr * h.wd);
            assert!((next[i] - (decayed - h.lr * grad[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_rejected() {
        assert_eq!(
            optimizer_step(&[0.0, 0.0], &[0.0, f64::NAN], &hp(0.1, 0.0), A).unwrap_err(),
            HpoError::NonFinite {
                what: "gradient",
                index: 1
            }
        );
    }

    #[test]
    fn stationary_and_sign_cases() {
        let (_, saved) = optimizer_step(&[1.0, 2.0], &[0.5, -1.0], &hp(0.1, 0.0), A).unwrap();
        assert_eq!(hypergrad(&saved, &[0.0, 0.0], B).unwrap(), (0.0, 0.0));
        let (dlr, _) = hypergrad(&saved, &[0.5, -1.0], B).unwrap();
        assert!((dlr + 1.25).abs() < 1e-15);
    }

    #[test]
    fn same_batch_and_shape_errors() {
        let (_, saved) = optimizer_step(&[1.0], &[1.0], &hp(0.1, 0.0), A).unwrap();
        assert_eq!(hypergrad(&saved, &[1.0], A).unwrap_err(), HpoError::SameBatch(A));
        assert!(matches!(hypergrad(&saved, &[1.0, 2.0], B), Err(HpoError::LengthMismatch { .. })));
    }

    #[test]
    fn clamp_boundaries() {
        let h = hp(0.1, 0.01);
        assert_eq!(update_hparams(&h, (0.0, 0.0)).unwrap(), h);
        let pushed = update_hparams(&h, (0.0, 1e6)).unwrap();
        assert_eq!(pushed.wd, 0.0);
        let pushed = update_hparams(&h, (1e9, 0.0)).unwrap();
        assert_eq!(pushed.lr, 1e-5);
        assert!(Bounds { lr_min: 0.0, ..Bounds::default() }.validate().is_err());
        assert!(Bounds { wd_min: 0.2, ..Bounds::default() }.validate().is_err());
    }

    /// Unrolled step built in the autodiff graph: L = ½ θ′ᵀ Q θ′ with lr and
    /// wd as leaves and θ, g constant.
    #[test]
    fn analytic_equals_unrolled_autodiff() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 6;
        let q: Vec<f64> = {
            let m: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut q = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    q[i * n + j] = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum::<f64>() + if i == j { 0.5 } else { 0.0 };
                }
            }
            q
        };
        let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h = hp(0.05, 0.03);

        let mut g = Graph::new();
        let lr = g.param(Tensor::scalar(h.lr));
        let wd = g.param(Tensor::scalar(h.wd));
        let th = g.constant(Tensor::new(vec![n, 1], theta.clone()).unwrap());
        let gr = g.constant(Tensor::new(vec![n, 1], grad.clone()).unwrap());
        let qv = g.constant(Tensor::new(vec![n, n], q.clone()).unwrap());
        let decay = g.mul(wd, th).unwrap();
        let dir = g.add(gr, decay).unwrap();
        let stepv = g.mul(lr, dir).unwrap();
        let next = g.sub(th, stepv).unwrap();
        let qn = g.matmul(qv, next).unwrap();
        let quad = g.mul(next, qn).unwrap();
        let s = g.sum(quad);
        let loss = g.scale(s, 0.5);
        g.backward(loss).unwrap();
        let auto_lr = g.grad(lr).unwrap().item().unwrap();
        let auto_wd = g.grad(wd).unwrap().item().unwrap();

        let (next, saved) = optimizer_step(&theta, &grad, &h, A).unwrap();
        let fresh: Vec<f64> = (0..n).map(|i| (0..n).map(|j| q[i * n + j] * next[j]).sum()).collect();
        let (dlr, dwd) = hypergrad(&saved, &fresh, B).unwrap();
        assert!((dlr - auto_lr).abs() < 1e-10, "{dlr} vs {auto_lr}");
        assert!((dwd - auto_wd).abs() < 1e-10, "{dwd} vs {auto_wd}");
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent(lr in -10.0f64..10.0, wd in -10.0f64..10.0) {
            let h = HyperParams { lr, wd, bounds: Bounds::default(), meta_lr: 1e-3 };
            let once = h.clamped();
            prop_assert_eq!(once.clamped(), once);
            prop_assert!((1e-5..=1.0).contains(&once.lr));
            prop_assert!((0.0..=0.1).contains(&once.wd));
        }
    }
}
