use rand::Rng;

use super::transforms::{apply_transform, sample_magnitude, TransformKind, TransformOp};
use super::AugmentError;
use crate::tensor::{softmax_raw, Graph, Tensor, Var};

/// Which set of operations a policy ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Catalog {
    Image,
    Vector,
}

impl Catalog {
    pub fn ops(self) -> &'static [TransformKind] {
        match self {
            Catalog::Image => &TransformKind::IMAGE,
            Catalog::Vector => &TransformKind::VECTOR,
        }
    }

    pub fn len(self) -> usize {
        self.ops().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn num_pairs(self) -> usize {
        self.len() * self.len()
    }

    /// `(first, second)` operation of a pair index.
    pub fn pair(self, index: usize) -> (TransformKind, TransformKind) {
        let k = self.len();
        (self.ops()[index / k], self.ops()[index % k])
    }

    pub fn pair_name(self, index: usize) -> String {
        let (a, b) = self.pair(index);
        format!("{a}>{b}")
    }
}

/// How the importance weight `p_k` of a sampled pair is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// Plain softmax probability of the sampled index.
    Softmax,
    /// Gumbel-Softmax relaxed weight `softmax((tau + g) / temperature)[k]`.
    Relaxed,
}

/// Categorical distribution over ordered transform pairs, parameterized by
/// logits `tau` of length `K^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct DaPolicy {
    catalog: Catalog,
    tau: Vec<f64>,
    temperature: f64,
}

impl DaPolicy {
    pub fn uniform(catalog: Catalog, temperature: f64) -> Result<Self, AugmentError> {
        Self::from_logits(catalog, vec![0.0; catalog.num_pairs()], temperature)
    }

    pub fn from_logits(catalog: Catalog, tau: Vec<f64>, temperature: f64) -> Result<Self, AugmentError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(AugmentError::Temperature(temperature));
        }
        if tau.len() != catalog.num_pairs() {
            return Err(AugmentError::LengthMismatch {
                expected: catalog.num_pairs(),
                got: tau.len(),
            });
        }
        Ok(DaPolicy {
            catalog,
            tau,
            temperature,
        })
    }

    pub fn catalog(&self) -> Catalog {
        self.catalog
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax_raw(&self.tau)
    }

    /// The `n` most likely pairs, ties broken by lower index.
    pub fn top_pairs(&self, n: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.probabilities().into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(n);
        ranked
    }

    /// One `first_op,second_op,probability` line per pair, most likely first.
    pub fn export_text(&self) -> String {
        let mut out = String::new();
        for (idx, p) in self.top_pairs(self.catalog.num_pairs()) {
            let (a, b) = self.catalog.pair(idx);
            out.push_str(&format!("{a},{b},{p}\n"));
        }
        out
    }
}

/// One pair drawn for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDraw {
    pub index: usize,
    /// Softmax probability of `index` under the policy at sampling time.
    pub weight: f64,
    /// The Gumbel perturbation used for the draw, kept for the relaxed weight.
    pub noise: Vec<f64>,
}

/// Standard Gumbel(0, 1) sample.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // open interval keeps both logarithms finite
    let u: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Gumbel-max sampling of `n` pair indices from the policy.
pub fn sample_pairs<R: Rng + ?Sized>(policy: &DaPolicy, n: usize, rng: &mut R) -> Result<Vec<PairDraw>, AugmentError> {
    if n == 0 {
        return Err(AugmentError::EmptyBatch);
    }
    let probs = policy.probabilities();
    Ok((0..n)
        .map(|_| {
            let noise: Vec<f64> = (0..policy.tau.len()).map(|_| gumbel(rng)).collect();
            let index = policy
                .tau
                .iter()
                .zip(&noise)
                .map(|(t, g)| t + g)
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
                .0;
            PairDraw {
                index,
                weight: probs[index],
                noise,
            }
        })
        .collect())
}

/// Records `-sum_k p_k(tau) * l_k` on `g`. The losses enter as constants.
pub fn da_loss(
    g: &mut Graph,
    tau: Var,
    draws: &[PairDraw],
    losses: &[f64],
    mode: WeightMode,
    temperature: f64,
) -> Result<Var, AugmentError> {
    if draws.len() != losses.len() {
        return Err(AugmentError::LengthMismatch {
            expected: draws.len(),
            got: losses.len(),
        });
    }
    if draws.is_empty() {
        return Err(AugmentError::EmptyBatch);
    }
    let l = g.constant(Tensor::vector(losses.to_vec()));
    let weighted = match mode {
        WeightMode::Softmax => {
            let p = g.softmax(tau)?;
            let idx: Vec<usize> = draws.iter().map(|d| d.index).collect();
            let pk = g.gather(p, &idx)?;
            let prod = g.mul(pk, l)?;
            g.sum(prod)
        }
        WeightMode::Relaxed => {
            let mut picked = Vec::with_capacity(draws.len());
            for d in draws {
                let noise = g.constant(Tensor::vector(d.noise.clone()));
                let z = g.add(tau, noise)?;
                let z = g.scale(z, 1.0 / temperature);
                let p = g.softmax(z)?;
                picked.push(g.gather(p, &[d.index])?);
            }
            g.weighted_sum(l, &picked)?
        }
    };
    Ok(g.scale(weighted, -1.0))
}

/// Value and `tau`-gradient of the policy loss.
pub fn da_loss_and_grad(
    policy: &DaPolicy,
    draws: &[PairDraw],
    losses: &[f64],
    mode: WeightMode,
) -> Result<(f64, Vec<f64>), AugmentError> {
    let mut g = Graph::new();
    let tau = g.param(Tensor::vector(policy.tau.clone()));
    let loss = da_loss(&mut g, tau, draws, losses, mode, policy.temperature)?;
    g.backward(loss)?;
    Ok((g.value(loss).item()?, g.grad_or_zeros(tau).into_data()))
}

/// Gradient-descent step on the logits.
pub fn update_tau(policy: &DaPolicy, grad: &[f64], step: f64, iteration: u64) -> Result<DaPolicy, AugmentError> {
    if grad.len() != policy.tau.len() {
        return Err(AugmentError::LengthMismatch {
            expected: policy.tau.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(AugmentError::NonFiniteGradient { iteration });
    }
    let tau: Vec<f64> = policy.tau.iter().zip(grad).map(|(t, g)| t - step * g).collect();
    if tau.iter().any(|t| !t.is_finite()) {
        return Err(AugmentError::NonFiniteGradient { iteration });
    }
    Ok(DaPolicy { tau, ..policy.clone() })
}

/// A batch after per-sample augmentation.
#[derive(Clone, Debug)]
pub struct AugmentedBatch {
    pub inputs: Vec<Vec<f64>>,
    pub draws: Vec<PairDraw>,
}

/// Samples one pair per input from the policy and applies both operations in
/// order, each with an independently drawn magnitude.
pub fn augment_batch<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    policy: &DaPolicy,
    inputs: &[&[f64]],
    shape: &[usize],
    pair_rng: &mut R1,
    op_rng: &mut R2,
) -> Result<AugmentedBatch, AugmentError> {
    let draws = sample_pairs(policy, inputs.len(), pair_rng)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (x, d) in inputs.iter().zip(&draws) {
        let (first, second) = policy.catalog.pair(d.index);
        let op1 = TransformOp::new(first, sample_magnitude(op_rng))?;
        let op2 = TransformOp::new(second, sample_magnitude(op_rng))?;
        let y = apply_transform(x, shape, op1, op_rng)?;
        out.push(apply_transform(&y, shape, op2, op_rng)?);
    }
    Ok(AugmentedBatch { inputs: out, draws })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_policy_probabilities() {
        let p = DaPolicy::uniform(Catalog::Image, 1.0).unwrap();
        assert_eq!(p.tau().len(), 196);
        for v in p.probabilities() {
            assert!((v - 1.0 / 196.0).abs() < 1e-15);
        }
        assert!((p.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_temperature() {
        assert!(DaPolicy::uniform(Catalog::Image, 0.0).is_err());
        assert!(DaPolicy::uniform(Catalog::Image, f64::NAN).is_err());
    }

    #[test]
    fn degenerate_policy_always_samples_its_mode() {
        let mut tau = vec![0.0; 196];
        tau[42] = 1e6;
        let p = DaPolicy::from_logits(Catalog::Image, tau, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = sample_pairs(&p, 1000, &mut rng).unwrap();
        assert!(draws.iter().all(|d| d.index == 42 && d.weight == 1.0));
    }

    #[test]
    fn single_sample_loss() {
        let mut tau = vec![-1e3; 25];
        tau[0] = 0.0;
        let p = DaPolicy::from_logits(Catalog::Vector, tau, 1.0).unwrap();
        let draws = vec![PairDraw {
            index: 0,
            weight: 1.0,
            noise: vec![0.0; 25],
        }];
        let (v, _) = da_loss_and_grad(&p, &draws, &[2.0], WeightMode::Softmax).unwrap();
        assert_eq!(v, -2.0);
    }

    #[test]
    fn equal_losses_over_full_support_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tau: Vec<f64> = (0..196).map(|_| rng.random::<f64>() - 0.5).collect();
        let p = DaPolicy::from_logits(Catalog::Image, tau, 1.0).unwrap();
        let draws: Vec<PairDraw> = (0..196)
            .map(|i| PairDraw {
                index: i,
                weight: 0.0,
                noise: Vec::new(),
            })
            .collect();
        let (v, grad) = da_loss_and_grad(&p, &draws, &[1.7; 196], WeightMode::Softmax).unwrap();
        assert!((v + 1.7).abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-15), "{:?}", grad.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let p = DaPolicy::uniform(Catalog::Vector, 1.0).unwrap();
        let draws = sample_pairs(&p, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            da_loss_and_grad(&p, &draws, &[1.0], WeightMode::Softmax),
            Err(AugmentError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn update_tau_edge_cases() {
        let p = DaPolicy::uniform(Catalog::Vector, 1.0).unwrap();
        assert_eq!(update_tau(&p, &[0.0; 25], 0.5, 0).unwrap(), p);
        assert_eq!(update_tau(&p, &[1.0; 25], 0.0, 0).unwrap(), p);
        let mut bad = vec![0.0; 25];
        bad[3] = f64::NAN;
        assert!(matches!(
            update_tau(&p, &bad, 0.1, 17),
            Err(AugmentError::NonFiniteGradient { iteration: 17 })
        ));
    }

    #[test]
    fn relaxed_weights_are_differentiable() {
        let p = DaPolicy::uniform(Catalog::Vector, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = sample_pairs(&p, 4, &mut rng).unwrap();
        let (v, grad) = da_loss_and_grad(&p, &draws, &[1.0, 2.0, 3.0, 4.0], WeightMode::Relaxed).unwrap();
        assert!(v < 0.0);
        assert!(grad.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn export_is_sorted_by_probability() {
        let mut tau = vec![0.0; 25];
        tau[7] = 2.0;
        tau[3] = 1.0;
        let p = DaPolicy::from_logits(Catalog::Vector, tau, 1.0).unwrap();
        let text = p.export_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 25);
        assert!(lines[0].starts_with("GaussianNoise,Scale,"));
        assert!(lines[1].starts_with("Identity,Shift,"));
        let probs: Vec<f64> = lines.iter().map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
        assert!(probs.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn augment_batch_keeps_shapes() {
        let p = DaPolicy::uniform(Catalog::Image, 1.0).unwrap();
        let img: Vec<f64> = (0..48).map(|i| i as f64 / 48.0).collect();
        let inputs = vec![img.as_slice(); 5];
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        let b = augment_batch(&p, &inputs, &[3, 4, 4], &mut r1, &mut r2).unwrap();
        assert_eq!(b.inputs.len(), 5);
        assert!(b.inputs.iter().all(|x| x.len() == 48));
    }
}
