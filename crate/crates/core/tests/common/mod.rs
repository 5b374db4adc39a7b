#![allow(dead_code)]

use lesionseg::nn::{ParamId, ParamStore};
use lesionseg::rng::RngStream;
use lesionseg::tensor::relative_error;
use lesionseg::{Graph, Result, Var};

/// Autodiff vs central differences on `count` random coordinates of the
/// given parameters. `loss` builds the scalar on a fresh graph.
pub fn param_grad_check(
    ps: &mut ParamStore,
    ids: &[ParamId],
    count: usize,
    seed: u64,
    loss: impl Fn(&mut Graph, &ParamStore) -> Result<Var>,
) -> f64 {
    let mut g = Graph::new();
    let out = loss(&mut g, ps).unwrap();
    g.backward(out).unwrap();
    ps.zero_grad();
    ps.accumulate_grads(&g);

    let mut coords: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..ps.param(id).numel()).map(move |i| (id, i)))
        .collect();
    RngStream::from_seed(seed).shuffle(&mut coords);
    coords.truncate(count);

    let eval = |ps: &ParamStore| {
        let mut g = Graph::new();
        let v = loss(&mut g, ps).unwrap();
        g.item(v)
    };
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for (id, i) in coords {
        let analytic = ps.param(id).grad().map_or(0.0, |g| g[i]);
        let orig = ps.param(id).data()[i];
        ps.param_mut(id).data_mut()[i] = orig + eps;
        let plus = eval(ps);
        ps.param_mut(id).data_mut()[i] = orig - eps;
        let minus = eval(ps);
        ps.param_mut(id).data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * eps)));
    }
    worst
}
