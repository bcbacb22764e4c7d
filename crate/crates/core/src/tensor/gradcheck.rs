use super::{Graph, Result, Tensor, Var};

/// Compares reverse-mode gradients of a scalar graph function against
/// central differences and returns the worst relative error
/// `|analytic - numeric| / (|numeric| + 1e-12)` over every coordinate of
/// every parameter.
///
/// `f` receives a fresh graph and one `Var` per entry of `params`; it must
/// be deterministic.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for j in 0..params[pi].numel() {
            let numeric = central_difference(&f, &mut work, pi, j, step)?;
            let err = (grad.data()[j] - numeric).abs() / (numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Central difference of `f` along coordinate `j` of parameter `pi`.
/// `work` is restored before returning.
pub fn central_difference<F>(f: &F, work: &mut [Tensor], pi: usize, j: usize, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let original = work[pi].data()[j];
    work[pi].data_mut()[j] = original + step;
    let plus = eval(f, work)?;
    work[pi].data_mut()[j] = original - step;
    let minus = eval(f, work)?;
    work[pi].data_mut()[j] = original;
    Ok((plus - minus) / (2.0 * step))
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}
