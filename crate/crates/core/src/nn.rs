//! Parameter storage and the small set of layers the model is built from.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Named {
    pub name: String,
    pub tensor: Tensor,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), both addressed by stable ids and unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Named>,
    buffers: Vec<Named>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param {name}"
        );
        self.params.push(Named { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> BufferId {
        let name = name.into();
        debug_assert!(
            self.buffers.iter().all(|p| p.name != name),
            "duplicate buffer {name}"
        );
        self.buffers.push(Named { name, tensor });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].tensor
    }

    pub fn params(&self) -> &[Named] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Named] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Named] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Named] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Adds the graph's leaf gradients into each enrolled parameter.
    pub fn accumulate_grads(&mut self, g: &Graph) {
        for (&idx, &var) in &g.param_vars {
            if let Some(grad) = g.grad(var) {
                self.params[idx].tensor.accumulate_grad(grad);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Applies the running-statistic updates a training forward recorded.
    pub fn apply_buffer_updates(&mut self, g: &mut Graph) {
        for (idx, values) in g.buffer_updates.drain(..) {
            self.buffers[idx].tensor.data_mut().copy_from_slice(&values);
        }
    }
}

impl Graph {
    /// Enrolls a parameter as a gradient-tracking leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.0) {
            return v;
        }
        let t = store.param(id);
        let v = self.leaf(t.shape().to_vec(), t.data().to_vec(), true);
        self.param_vars.insert(id.0, v);
        v
    }

    pub(crate) fn record_buffer_update(&mut self, id: BufferId, values: Vec<f64>) {
        self.buffer_updates.push((id.0, values));
    }
}

/// Forward-pass context: the tape, read-only parameters and the mode.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub ps: &'a ParamStore,
    pub training: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, ps: &'a ParamStore, training: bool) -> Self {
        Self { g, ps, training }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.ps, id)
    }
}

/// Builds parameters under a dotted name prefix.
pub struct Init<'a> {
    pub ps: &'a mut ParamStore,
    pub rng: &'a mut RngStream,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(ps: &'a mut ParamStore, rng: &'a mut RngStream) -> Self {
        Self {
            ps,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            ps: self.ps,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{}", self.prefix, leaf)
        }
    }

    pub fn param(&mut self, leaf: &str, t: Tensor) -> ParamId {
        let name = self.name(leaf);
        self.ps.add_param(name, t)
    }

    pub fn buffer(&mut self, leaf: &str, t: Tensor) -> BufferId {
        let name = self.name(leaf);
        self.ps.add_buffer(name, t)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    /// Kaiming-normal weights (fan-in), zero bias.
    pub fn new(
        init: &mut Init,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let w = Tensor::randn(
            &[cout, cin, kernel, kernel],
            (2.0 / fan_in).sqrt(),
            init.rng,
        );
        let weight = init.param("weight", w);
        let bias = bias.then(|| init.param("bias", Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            stride,
            pad,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let b = self.bias.map(|b| cx.p(b));
        cx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    /// `[in, out]`, so `y = x · W + b`.
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(init: &mut Init, din: usize, dout: usize, bias: bool) -> Self {
        let w = Tensor::randn(&[din, dout], (1.0 / din as f64).sqrt(), init.rng);
        let weight = init.param("weight", w);
        let bias = bias.then(|| init.param("bias", Tensor::zeros(&[dout])));
        Self { weight, bias }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        let y = cx.g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = cx.p(b);
                cx.g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        Self {
            gamma: init.param("gamma", Tensor::ones(&[channels])),
            beta: init.param("beta", Tensor::zeros(&[channels])),
            running_mean: init.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: init.buffer("running_var", Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.p(self.gamma);
        let beta = cx.p(self.beta);
        let rm = cx.ps.buffer(self.running_mean).data();
        let rv = cx.ps.buffer(self.running_var).data();
        let (y, stats) =
            cx.g.batch_norm2d(x, gamma, beta, rm, rv, cx.training, BN_MOMENTUM, BN_EPS)?;
        if let Some(stats) = stats {
            cx.g.record_buffer_update(self.running_mean, stats.mean);
            cx.g.record_buffer_update(self.running_var, stats.var);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, dim: usize) -> Self {
        Self {
            gamma: init.param("gamma", Tensor::ones(&[dim])),
            beta: init.param("beta", Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.p(self.gamma);
        let beta = cx.p(self.beta);
        cx.g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Conv (no bias) + batch norm, optionally followed by relu.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new(
        init: &mut Init,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        relu: bool,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                &mut init.sub("conv"),
                cin,
                cout,
                kernel,
                stride,
                kernel / 2,
                false,
            ),
            bn: BatchNorm2d::new(&mut init.sub("bn"), cout),
            relu,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(if self.relu { cx.g.relu(y) } else { y })
    }
}

pub(crate) fn expect_rank(g: &Graph, v: Var, rank: usize, what: &str) -> Result<Vec<usize>> {
    let s = g.shape(v).to_vec();
    if s.len() != rank {
        return Err(Error::dim(format!(
            "{what} expects rank {rank}, got {:?}",
            s
        )));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_prefixed() {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::from_seed(0);
        let mut init = Init::new(&mut ps, &mut rng);
        let _ = ConvBn::new(&mut init.sub("stem"), 3, 4, 3, 1, true);
        let names: Vec<_> = ps.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["stem.conv.weight", "stem.bn.gamma", "stem.bn.beta"]);
        assert_eq!(ps.buffers()[0].name, "stem.bn.running_mean");
    }

    #[test]
    fn params_enroll_once_and_collect_grads() {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::from_seed(0);
        let lin = Linear::new(&mut Init::new(&mut ps, &mut rng), 2, 3, true);
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &ps, true);
        let x = cx.g.constant(&Tensor::ones(&[4, 2]));
        let y = lin.forward(&mut cx, x).unwrap();
        let y2 = lin.forward(&mut cx, y).err(); // shape mismatch, [4,3] x [2,3]
        assert!(y2.is_some());
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.param_vars.len(), 2);
        ps.accumulate_grads(&g);
        assert_eq!(
            ps.param(lin.bias.unwrap()).grad().unwrap(),
            &[4.0, 4.0, 4.0]
        );
    }

    #[test]
    fn training_forward_updates_running_stats() {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::from_seed(0);
        let bn = BatchNorm2d::new(&mut Init::new(&mut ps, &mut rng), 1);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut Ctx::new(&mut g, &ps, true), x).unwrap();
        ps.apply_buffer_updates(&mut g);
        assert!((ps.buffer(bn.running_mean).data()[0] - 0.2).abs() < 1e-15);
        // unbiased batch var = 2, blended: 0.9 + 0.2
        assert!((ps.buffer(bn.running_var).data()[0] - 1.1).abs() < 1e-15);
    }
}
