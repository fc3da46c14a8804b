//! Finite-difference verification of analytic gradients.

use super::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest relative error over every input element.
    pub max_rel_err: f64,
    /// Largest relative error per input tensor.
    pub per_input: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for relative errors of near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

/// Deterministic, non-uniform projection weights so that every output
/// element contributes distinctly to the scalar being differentiated.
fn projection(n: usize) -> Tensor<f64> {
    Tensor::vector(
        (0..n)
            .map(|k| 1.0 + 0.5 * (1.3 * k as f64 + 0.4).sin())
            .collect(),
    )
}

fn project(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let n = g.value(out).numel();
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(projection(n).reshape(shape)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn eval<F>(name: &str, f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).all_finite() {
        return Err(TensorError::NonFinite { op: name.into() });
    }
    let s = project(&mut g, out)?;
    Ok(g.value(s).item())
}

/// Compares the tape's gradients of `f` against central differences.
///
/// `f` may return a tensor of any shape; it is reduced to a scalar by a
/// fixed weighted sum before differentiation.
pub fn check_gradients<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).all_finite() {
        return Err(TensorError::NonFinite { op: name.into() });
    }
    let loss = project(&mut g, out)?;
    let grads = g.backward(loss)?;

    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut worst = 0.0f64;
        let mut probe = inputs.to_vec();
        for e in 0..input.numel() {
            let orig = input.data()[e];
            probe[k].data_mut()[e] = orig + eps;
            let plus = eval(name, &f, &probe)?;
            probe[k].data_mut()[e] = orig - eps;
            let minus = eval(name, &f, &probe)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[e];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: name.into() });
            }
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_err,
        per_input,
        tol,
        passed: max_rel_err <= tol,
    })
}

fn eval_params<F>(name: &str, f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    if !g.value(out).all_finite() {
        return Err(TensorError::NonFinite { op: name.into() });
    }
    let s = project(&mut g, out)?;
    Ok(g.value(s).item())
}

/// Like [`check_gradients`], but differentiates with respect to every
/// trainable parameter of `store` that `f` reads through [`Graph::param`].
///
/// Frozen parameters are perturbed too; their analytic gradient is taken as
/// zero, so a frozen parameter that influences the output fails the check.
/// `per_input` follows the store's parameter order.
pub fn check_param_gradients<F>(
    name: &str,
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    tol: f64,
) -> Result<GradReport>
where
    F: Fn(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    if !g.value(out).all_finite() {
        return Err(TensorError::NonFinite { op: name.into() });
    }
    let loss = project(&mut g, out)?;
    let grads = g.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for (id, t) in g.param_grads(&grads) {
        analytic[id.index()].add_assign(&t);
    }

    let mut probe = store.clone();
    let mut per_input = Vec::with_capacity(store.len());
    for (k, id) in store.ids().enumerate() {
        let mut worst = 0.0f64;
        for e in 0..store.get(id).value.numel() {
            let orig = store.get(id).value.data()[e];
            probe.get_mut(id).value.data_mut()[e] = orig + eps;
            let plus = eval_params(name, &f, &probe)?;
            probe.get_mut(id).value.data_mut()[e] = orig - eps;
            let minus = eval_params(name, &f, &probe)?;
            probe.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[e];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: name.into() });
            }
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradReport {
        max_rel_err,
        per_input,
        tol,
        passed: max_rel_err <= tol,
    })
}
