//! Built-in numerical checks: finite-difference gradients, naive-loop
//! oracles and shape audits. Used by `lesionseg selftest` and the test suite.

use std::fmt;
use std::time::Instant;

use crate::error::Result;
use crate::loss::{total_loss, weighted_bce, weighted_iou};
use crate::metrics::{confusion, metric_suite, ConfusionMatrix};
use crate::model::{ModelConfig, SegModel};
use crate::nn::{Ctx, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{grad_check_inputs, relative_error, Graph, Tensor, Var};
use crate::transformer::attention;

/// Finite-difference step for the gradient suite.
pub const FD_EPS: f64 = 1e-6;
pub const ELEMENTWISE_TOL: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;
pub const CONV_TOL: f64 = 1e-10;
pub const ATTENTION_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed error (or mismatch count).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value < tolerance,
        }
    }

    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} {:.3e} (tol {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

/// Reduces `v` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(
        g.shape(v),
        1.0,
        &mut RngStream::from_seed(seed).split_str("project"),
    );
    let w = g.constant(&w);
    let prod = g.mul(v, w)?;
    Ok(g.sum(prod))
}

/// Values bounded away from zero, so kinks at 0 are not straddled.
fn away_from_zero(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::uniform(shape, 0.2, 1.5, rng);
    for v in t.data_mut() {
        if rng.bernoulli(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Distinct values spaced at least 0.05 apart, so max ops have no near ties.
fn distinct(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    rng.shuffle(&mut vals);
    Tensor::from_vec(shape, vals).expect("shape matches")
}

type OpFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    elementwise: bool,
    inputs: Vec<Tensor>,
    f: OpFn,
}

fn case(
    name: &'static str,
    elementwise: bool,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        elementwise,
        inputs,
        f: Box::new(f),
    }
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = RngStream::from_seed(seed).split_str("grad-ops");
    let r = &mut rng;
    let n = |shape: &[usize], r: &mut RngStream| Tensor::randn(shape, 1.0, r);
    let pos = |shape: &[usize], r: &mut RngStream| Tensor::uniform(shape, 0.5, 2.0, r);
    let s = 7u64;
    vec![
        case(
            "add (broadcast)",
            true,
            vec![n(&[2, 3, 4], r), n(&[3, 1], r)],
            move |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "sub",
            true,
            vec![n(&[2, 5], r), n(&[2, 5], r)],
            move |g, v| {
                let y = g.sub(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "mul (broadcast)",
            true,
            vec![n(&[2, 3, 4], r), n(&[1, 3, 1], r)],
            move |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "div",
            true,
            vec![n(&[2, 4], r), pos(&[2, 4], r)],
            move |g, v| {
                let y = g.div(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "hadamard",
            true,
            vec![n(&[2, 3, 3], r), n(&[2, 3, 3], r)],
            move |g, v| {
                let y = g.hadamard(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case("scale", true, vec![n(&[6], r)], move |g, v| {
            let y = g.scale(v[0], -2.5);
            project(g, y, s)
        }),
        case("add_scalar", true, vec![n(&[6], r)], move |g, v| {
            let y = g.add_scalar(v[0], 0.7);
            let y = g.mul(y, y)?;
            project(g, y, s)
        }),
        case("one_minus", true, vec![n(&[6], r)], move |g, v| {
            let y = g.one_minus(v[0]);
            let y = g.mul(y, y)?;
            project(g, y, s)
        }),
        case(
            "relu",
            true,
            vec![away_from_zero(&[3, 4], r)],
            move |g, v| {
                let y = g.relu(v[0]);
                project(g, y, s)
            },
        ),
        case("gelu", true, vec![n(&[3, 4], r)], move |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, s)
        }),
        case("sigmoid", true, vec![n(&[3, 4], r)], move |g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, s)
        }),
        case("exp", true, vec![n(&[3, 4], r)], move |g, v| {
            let y = g.exp(v[0]);
            project(g, y, s)
        }),
        case("ln", true, vec![pos(&[3, 4], r)], move |g, v| {
            let y = g.ln(v[0])?;
            project(g, y, s)
        }),
        case(
            "clamp",
            true,
            vec![away_from_zero(&[3, 4], r)],
            move |g, v| {
                let y = g.clamp(v[0], -0.1, 0.1);
                let z = g.add(y, v[0])?;
                project(g, z, s)
            },
        ),
        case(
            "softmax_last_dim",
            false,
            vec![n(&[2, 3, 5], r)],
            move |g, v| {
                let y = g.softmax_last_dim(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "matmul (batched)",
            false,
            vec![n(&[2, 3, 4], r), n(&[2, 4, 5], r)],
            move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "matmul (shared rhs)",
            false,
            vec![n(&[2, 3, 4], r), n(&[4, 2], r)],
            move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "transpose_last",
            false,
            vec![n(&[2, 3, 4], r)],
            move |g, v| {
                let y = g.transpose_last(v[0])?;
                project(g, y, s)
            },
        ),
        case("reshape", false, vec![n(&[2, 6], r)], move |g, v| {
            let y = g.reshape(v[0], &[3, 4])?;
            project(g, y, s)
        }),
        case("permute", false, vec![n(&[2, 3, 4], r)], move |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            project(g, y, s)
        }),
        case(
            "concat",
            false,
            vec![n(&[2, 3], r), n(&[2, 2], r)],
            move |g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                project(g, y, s)
            },
        ),
        case(
            "concat_channels",
            false,
            vec![n(&[1, 2, 3, 3], r), n(&[1, 1, 3, 3], r)],
            move |g, v| {
                let y = g.concat_channels(&[v[0], v[1]])?;
                project(g, y, s)
            },
        ),
        case("sum", false, vec![n(&[3, 4], r)], move |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        }),
        case("mean", false, vec![n(&[3, 4], r)], move |g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        }),
        case("mean_axis", false, vec![n(&[2, 3, 4], r)], move |g, v| {
            let y = g.mean_axis(v[0], 1)?;
            project(g, y, s)
        }),
        case(
            "max_axis",
            false,
            vec![distinct(&[2, 3, 4], r)],
            move |g, v| {
                let y = g.max_axis(v[0], 1)?;
                project(g, y, s)
            },
        ),
        case(
            "global_avg_pool",
            false,
            vec![n(&[2, 3, 3, 4], r)],
            move |g, v| {
                let y = g.global_avg_pool(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "conv2d 3x3 pad 1",
            false,
            vec![n(&[2, 2, 5, 5], r), n(&[3, 2, 3, 3], r), n(&[3], r)],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(g, y, s)
            },
        ),
        case(
            "conv2d 3x3 stride 2",
            false,
            vec![n(&[1, 2, 6, 5], r), n(&[2, 2, 3, 3], r)],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], None, 2, 1)?;
                project(g, y, s)
            },
        ),
        case(
            "conv2d 1x1",
            false,
            vec![n(&[2, 3, 4, 4], r), n(&[2, 3, 1, 1], r), n(&[2], r)],
            move |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 0)?;
                project(g, y, s)
            },
        ),
        case(
            "max_pool2d",
            false,
            vec![distinct(&[1, 2, 6, 6], r)],
            move |g, v| {
                let y = g.max_pool2d(v[0], 3, 2, 1)?;
                project(g, y, s)
            },
        ),
        case(
            "resize_bilinear",
            false,
            vec![n(&[1, 2, 3, 4], r)],
            move |g, v| {
                let y = g.resize_bilinear(v[0], 7, 5)?;
                project(g, y, s)
            },
        ),
        case(
            "bilinear_upsample2x",
            false,
            vec![n(&[1, 2, 3, 3], r)],
            move |g, v| {
                let y = g.bilinear_upsample2x(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "layer_norm",
            false,
            vec![n(&[2, 3, 6], r), pos(&[6], r), n(&[6], r)],
            move |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                project(g, y, s)
            },
        ),
        case(
            "batch_norm2d (train)",
            false,
            vec![n(&[3, 2, 3, 3], r), pos(&[2], r), n(&[2], r)],
            move |g, v| {
                let (y, _) =
                    g.batch_norm2d(v[0], v[1], v[2], &[0.0; 2], &[1.0; 2], true, 0.1, 1e-5)?;
                project(g, y, s)
            },
        ),
        case(
            "batch_norm2d (eval)",
            false,
            vec![n(&[2, 2, 3, 3], r), pos(&[2], r), n(&[2], r)],
            move |g, v| {
                let (y, _) = g.batch_norm2d(
                    v[0],
                    v[1],
                    v[2],
                    &[0.3, -0.2],
                    &[1.5, 0.7],
                    false,
                    0.1,
                    1e-5,
                )?;
                project(g, y, s)
            },
        ),
        case(
            "attention",
            false,
            vec![n(&[2, 3, 4], r), n(&[2, 5, 4], r), n(&[2, 5, 4], r)],
            move |g, v| {
                let y = attention(g, v[0], v[1], v[2])?;
                project(g, y, s)
            },
        ),
        {
            let gt = mask(&[1, 1, 4, 4], r);
            case(
                "weighted_bce",
                false,
                vec![
                    Tensor::uniform(&[1, 1, 4, 4], 0.1, 0.9, r),
                    pos(&[1, 1, 4, 4], r),
                ],
                move |g, v| {
                    let gt = g.constant(&gt);
                    weighted_bce(g, v[0], gt, v[1])
                },
            )
        },
        {
            let gt = mask(&[2, 1, 4, 4], r);
            case(
                "weighted_iou",
                false,
                vec![
                    Tensor::uniform(&[2, 1, 4, 4], 0.1, 0.9, r),
                    pos(&[2, 1, 4, 4], r),
                ],
                move |g, v| {
                    let gt = g.constant(&gt);
                    weighted_iou(g, v[0], gt, v[1])
                },
            )
        },
    ]
}

fn mask(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
    }
    t
}

/// Central-difference check of every differentiable graph operation.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckResult>> {
    op_cases(seed)
        .into_iter()
        .map(|c| {
            let err = grad_check_inputs(&c.f, &c.inputs, FD_EPS)?;
            let tol = if c.elementwise {
                ELEMENTWISE_TOL
            } else {
                GRAD_TOL
            };
            Ok(CheckResult::below(format!("grad {}", c.name), err, tol))
        })
        .collect()
}

/// Toy model at a small input size for whole-model checks.
pub fn small_toy_config() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.image_size = (32, 32);
    cfg
}

fn model_loss(model: &SegModel, ps: &ParamStore, images: &Tensor, masks: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(images);
    let out = model.forward(&mut Ctx::new(&mut g, ps, true), x)?;
    let terms = total_loss(&mut g, out.heads(), masks, &model.config.loss)?;
    Ok(g.item(terms.total))
}

/// Compares autodiff against central differences on `count` randomly chosen
/// parameter scalars of the whole model under the training loss.
pub fn model_gradient_check(cfg: &ModelConfig, count: usize, seed: u64) -> Result<CheckResult> {
    let root = RngStream::from_seed(seed);
    let (model, mut ps) = SegModel::new(cfg, &mut root.split_str("init"))?;
    let (h, w) = cfg.image_size;
    let data = crate::data::synth_dataset(2, seed, (h, w))?;
    let refs: Vec<_> = data.iter().collect();
    let (images, masks) = crate::data::stack_batch(&refs)?;

    let mut g = Graph::new();
    let x = g.constant(&images);
    let out = model.forward(&mut Ctx::new(&mut g, &ps, true), x)?;
    let terms = total_loss(&mut g, out.heads(), &masks, &cfg.loss)?;
    g.backward(terms.total)?;
    ps.zero_grad();
    ps.accumulate_grads(&g);

    let mut coords: Vec<(usize, usize)> = ps
        .params()
        .iter()
        .enumerate()
        .flat_map(|(p, n)| (0..n.tensor.numel()).map(move |i| (p, i)))
        .collect();
    let mut pick = root.split_str("subsample");
    pick.shuffle(&mut coords);
    coords.truncate(count);

    let mut worst = 0.0f64;
    for (p, i) in coords {
        let analytic = ps.params()[p].tensor.grad().map_or(0.0, |g| g[i]);
        let orig = ps.params()[p].tensor.data()[i];
        ps.params_mut()[p].tensor.data_mut()[i] = orig + FD_EPS;
        let plus = model_loss(&model, &ps, &images, &masks)?;
        ps.params_mut()[p].tensor.data_mut()[i] = orig - FD_EPS;
        let minus = model_loss(&model, &ps, &images, &masks)?;
        ps.params_mut()[p].tensor.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * FD_EPS)));
    }
    Ok(CheckResult::below(
        format!("grad full model ({count} params)"),
        worst,
        GRAD_TOL,
    ))
}

/// Direct seven-loop cross-correlation.
pub fn naive_conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (&[n, cin, h, wd], &[cout, _, kh, kw]) = (x.shape(), w.shape()) else {
        panic!("naive_conv2d expects rank-4 tensors");
    };
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let (xv, wv) = (x.data(), w.data());
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += xv[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                    * wv[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, ho, wo], out).expect("shape matches")
}

/// Graph conv2d against [`naive_conv2d`] over random configurations.
pub fn conv_oracle(configs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = RngStream::from_seed(seed).split_str("conv-oracle");
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let k = 1 + rng.below(5);
        let pad = rng.below(k.min(3));
        let stride = 1 + rng.below(3);
        let h = k + rng.below(8);
        let w = k + rng.below(8);
        let (n, cin, cout) = (1 + rng.below(2), 1 + rng.below(5), 1 + rng.below(5));
        let x = Tensor::randn(&[n, cin, h, w], 1.0, &mut rng);
        let wt = Tensor::randn(&[cout, cin, k, k], 1.0, &mut rng);
        let b = rng
            .bernoulli(0.5)
            .then(|| Tensor::randn(&[cout], 1.0, &mut rng));
        let expect = naive_conv2d(&x, &wt, b.as_ref(), stride, pad);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(&x), g.constant(&wt));
        let bv = b.as_ref().map(|b| g.constant(b));
        let y = g.conv2d(xv, wv, bv, stride, pad)?;
        worst = worst.max(g.to_tensor(y).max_abs_diff(&expect));
    }
    Ok(CheckResult::at_most(
        format!("conv2d vs naive loops ({configs} configs)"),
        worst,
        CONV_TOL,
    ))
}

/// `softmax(QKᵀ/√d)V` from scalar loops for one batch entry.
pub fn scalar_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| e.iter().zip(v).map(|(ej, vj)| ej / z * vj[c]).sum())
                .collect()
        })
        .collect()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = *t.shape().last().expect("rank >= 1");
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// Graph attention against [`scalar_attention`] on random 1×3×4 inputs.
pub fn attention_oracle(trials: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = RngStream::from_seed(seed).split_str("attention-oracle");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let [q, k, v] = [(); 3].map(|_| Tensor::randn(&[1, 3, 4], 1.0, &mut rng));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(&q), g.constant(&k), g.constant(&v));
        let out = attention(&mut g, qv, kv, vv)?;
        let expect: Vec<f64> = scalar_attention(&rows(&q), &rows(&k), &rows(&v)).concat();
        for (a, b) in g.value(out).iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(CheckResult::at_most(
        format!("attention vs scalar formula ({trials} trials)"),
        worst,
        ATTENTION_TOL,
    ))
}

/// Confusion counts by enumerating pixels one at a time.
pub fn brute_force_confusion(pred: &[bool], gt: &[bool]) -> ConfusionMatrix {
    let mut c = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(gt) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// `metric_suite` on random 8×8 mask pairs versus pixel enumeration.
/// Counts must match exactly; the value is the number of mismatching pairs.
pub fn metric_oracle(pairs: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = RngStream::from_seed(seed).split_str("metric-oracle");
    let mut mismatches = 0usize;
    for _ in 0..pairs {
        let density_p = rng.uniform();
        let density_g = rng.uniform();
        let pred: Vec<bool> = (0..64).map(|_| rng.bernoulli(density_p)).collect();
        let gt: Vec<bool> = (0..64).map(|_| rng.bernoulli(density_g)).collect();
        let as_f = |m: &[bool]| {
            m.iter()
                .map(|&b| if b { 0.9 } else { 0.1 })
                .collect::<Vec<f64>>()
        };
        let fast = confusion(&as_f(&pred), &as_f(&gt), 0.5)?;
        let slow = brute_force_confusion(&pred, &gt);
        let m = metric_suite(&fast);
        let (tp, fp, fn_, tn) = (
            slow.tp as f64,
            slow.fp as f64,
            slow.fn_ as f64,
            slow.tn as f64,
        );
        let expect_acc = (tp + tn) / 64.0;
        let expect_jac = if tp + fp + fn_ > 0.0 {
            tp / (tp + fp + fn_)
        } else {
            0.0
        };
        if fast != slow || m.accuracy != expect_acc || m.jaccard != expect_jac {
            mismatches += 1;
        }
    }
    Ok(CheckResult::at_most(
        format!("metric_suite vs enumeration ({pairs} pairs)"),
        mismatches as f64,
        0.0,
    ))
}

/// Shape contract of features, gates and heads for a model configuration.
/// Runs with batch statistics: an untrained model's running statistics are
/// the identity, which lets deep activations saturate the sigmoids.
pub fn shape_audit(cfg: &ModelConfig, seed: u64) -> Result<Vec<CheckResult>> {
    let (model, ps) = SegModel::new(cfg, &mut RngStream::from_seed(seed))?;
    let (h, w) = cfg.image_size;
    let image = Tensor::randn(
        &[1, 3, h, w],
        1.0,
        &mut RngStream::from_seed(seed).split_str("image"),
    );
    let mut g = Graph::new();
    let x = g.constant(&image);
    let out = model.forward(&mut Ctx::new(&mut g, &ps, true), x)?;
    let widths = cfg.cnn.feature_channels();
    let tag = format!("{h}x{w}");
    let mut results = Vec::new();
    let mut expect = |name: String, v: Var, shape: Vec<usize>| {
        let ok = g.shape(v) == shape.as_slice();
        results.push(CheckResult {
            name,
            value: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: ok,
        });
    };
    let scales = [16, 8, 4];
    for i in 0..3 {
        let s = vec![1, widths[i], h / scales[i], w / scales[i]];
        expect(
            format!("shape {tag} t{i}"),
            out.transformer.features()[i],
            s.clone(),
        );
        expect(
            format!("shape {tag} g{i}"),
            out.cnn.features()[i],
            s.clone(),
        );
        expect(
            format!("shape {tag} f{i}"),
            [out.fused.f0, out.fused.f1, out.fused.f2][i],
            s,
        );
    }
    for (k, head) in out.heads().into_iter().enumerate() {
        expect(format!("shape {tag} head {k}"), head, vec![1, 1, h, w]);
    }
    let mut unit = true;
    let heads = out.heads();
    let maps = out
        .transformer
        .attention_maps
        .iter()
        .chain(&out.fused.gate_maps)
        .chain(&out.fused.channel_gates)
        .chain(&out.fused.spatial_maps)
        .chain(heads.iter());
    for &m in maps {
        unit &= g.value(m).iter().all(|&p| p > 0.0 && p < 1.0);
    }
    results.push(CheckResult {
        name: format!("maps in (0,1) {tag}"),
        value: if unit { 0.0 } else { 1.0 },
        tolerance: 0.0,
        passed: unit,
    });
    Ok(results)
}

/// Every check, in the order printed by `lesionseg selftest`.
pub fn run_all(seed: u64, mut report: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let start = Instant::now();
    let mut all = Vec::new();
    let mut push = |r: CheckResult, all: &mut Vec<CheckResult>| {
        report(&r);
        all.push(r);
    };
    for r in gradient_suite(seed)? {
        push(r, &mut all);
    }
    push(
        model_gradient_check(&small_toy_config(), 200, seed)?,
        &mut all,
    );
    push(conv_oracle(50, seed)?, &mut all);
    push(attention_oracle(20, seed)?, &mut all);
    push(metric_oracle(100, seed)?, &mut all);
    for r in shape_audit(&small_toy_config(), seed)? {
        push(r, &mut all);
    }
    let mut large = ModelConfig::large();
    large.transformer.depth = 1;
    for r in shape_audit(&large, seed)? {
        push(r, &mut all);
    }
    let elapsed = start.elapsed().as_secs_f64();
    push(
        CheckResult::below("selftest runtime (s)", elapsed, 120.0),
        &mut all,
    );
    Ok(all)
}
