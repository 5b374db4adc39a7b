use super::{Graph, Tensor, Var};
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+εe) − f(x−εe)) / 2ε`, returning the max relative error
/// over every coordinate.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_inputs(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_inputs<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.item(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec)
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[t].data()[i];
            probe[t].data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe[t].data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe[t].data_mut()[i] = orig;
            worst = worst.max(relative_error(a, (plus - minus) / (2.0 * eps)));
        }
    }
    Ok(worst)
}
