//! Finite-difference verification of every differentiable op and of the
//! whole model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_components, GradCheckReport, DEFAULT_STEP};
use crate::model::{ModelConfig, SmaFormer};
use crate::tape::{Tape, Var, DIFFERENTIABLE_OPS};
use crate::tensor::Tensor;

pub const OP_THRESHOLD: f64 = 1e-6;
pub const MODEL_THRESHOLD: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Result of checking one operand of one op for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub operand: &'static str,
    pub seed: u64,
    pub max_relative_error: f64,
}

type CheckFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

struct Case {
    op: &'static str,
    operand: &'static str,
    x: Tensor<f64>,
    f: CheckFn,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng)
}

/// Normal samples pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    randn(shape, rng).map(|v| v + gap.copysign(v))
}

/// `Σ w ⊙ y` for a fixed random `w`, turning any output into a scalar
/// whose gradient reaches every element of `y`.
fn readout(t: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = t.constant(w.clone());
    let m = t.mul(y, wv)?;
    t.sum(m)
}

macro_rules! case {
    ($op:expr, $operand:expr, $x:expr, |$t:ident, $v:ident| $body:expr) => {
        Case {
            op: $op,
            operand: $operand,
            x: $x,
            f: Box::new(move |$t: &mut Tape<f64>, $v: Var| -> Result<Var> { $body }),
        }
    };
}

/// Binary operations get one case per operand: the checked operand is the
/// variable and the other is held constant.
fn binary_cases(
    op: &'static str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    out_w: Tensor<f64>,
    apply: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Vec<Case> {
    let (a2, b2, w2) = (a.clone(), b.clone(), out_w.clone());
    vec![
        case!(op, "lhs", a, |t, x| {
            let other = t.constant(b.clone());
            let y = apply(t, x, other)?;
            readout(t, y, &out_w)
        }),
        case!(op, "rhs", b2, |t, x| {
            let other = t.constant(a2.clone());
            let y = apply(t, other, x)?;
            readout(t, y, &w2)
        }),
    ]
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let w = randn(&[6, 4], r);
    out.push(case!("reshape", "x", randn(&[2, 3, 4], r), |t, x| {
        let y = t.reshape(x, &[6, 4])?;
        readout(t, y, &w)
    }));
    let (a, b, w) = (randn(&[3, 4], r), randn(&[3, 4], r), randn(&[3, 4], r));
    out.extend(binary_cases("add", a, b, w, |t, a, b| t.add(a, b)));
    let (a, b, w) = (randn(&[3, 4], r), randn(&[3, 4], r), randn(&[3, 4], r));
    out.extend(binary_cases("mul", a, b, w, |t, a, b| t.mul(a, b)));
    let w = randn(&[5], r);
    out.push(case!("scale", "x", randn(&[5], r), |t, x| {
        let y = t.scale(x, -1.7)?;
        readout(t, y, &w)
    }));
    out.push(case!("sum", "x", randn(&[2, 5], r), |t, x| {
        let sq = t.mul(x, x)?;
        t.sum(sq)
    }));
    out.push(case!("mean", "x", randn(&[2, 5], r), |t, x| {
        let sq = t.mul(x, x)?;
        t.mean(sq)
    }));
    let (a, b, w) = (randn(&[3, 4], r), randn(&[4, 5], r), randn(&[3, 5], r));
    out.extend(binary_cases("matmul", a, b, w, |t, a, b| t.matmul(a, b)));

    // linear: x, weight and bias
    let (lx, lw, lb, ow) = (randn(&[5, 4], r), randn(&[4, 3], r), randn(&[3], r), randn(&[5, 3], r));
    for operand in ["x", "weight", "bias"] {
        let (lx, lw, lb, ow) = (lx.clone(), lw.clone(), lb.clone(), ow.clone());
        let x0 = match operand {
            "x" => lx.clone(),
            "weight" => lw.clone(),
            _ => lb.clone(),
        };
        out.push(case!("linear", operand, x0, |t, v| {
            let pick = |t: &mut Tape<f64>, name: &str, val: &Tensor<f64>| {
                if name == operand {
                    v
                } else {
                    t.constant(val.clone())
                }
            };
            let (x, w, b) = (pick(t, "x", &lx), pick(t, "weight", &lw), pick(t, "bias", &lb));
            let y = t.linear(x, w, Some(b))?;
            readout(t, y, &ow)
        }));
    }

    // conv2d at stride 1 and 2
    for (stride, operands) in [(1usize, &["x", "weight", "bias"][..]), (2, &["x", "weight"][..])] {
        let (cx, cw, cb) = (randn(&[2, 6, 6], r), randn(&[3, 2, 3, 3], r), randn(&[3], r));
        let side = (6 + 2 - 3) / stride + 1;
        let ow = randn(&[3, side, side], r);
        for &operand in operands {
            let (cx, cw, cb, ow) = (cx.clone(), cw.clone(), cb.clone(), ow.clone());
            let x0 = match operand {
                "x" => cx.clone(),
                "weight" => cw.clone(),
                _ => cb.clone(),
            };
            out.push(case!("conv2d", operand, x0, |t, v| {
                let pick = |t: &mut Tape<f64>, name: &str, val: &Tensor<f64>| {
                    if name == operand {
                        v
                    } else {
                        t.constant(val.clone())
                    }
                };
                let (x, w, b) = (pick(t, "x", &cx), pick(t, "weight", &cw), pick(t, "bias", &cb));
                let y = t.conv2d(x, w, Some(b), stride, 1)?;
                readout(t, y, &ow)
            }));
        }
    }

    let (tx, tw, tb, ow) = (randn(&[4, 3, 3], r), randn(&[4, 2, 2, 2], r), randn(&[2], r), randn(&[2, 6, 6], r));
    for operand in ["x", "weight", "bias"] {
        let (tx, tw, tb, ow) = (tx.clone(), tw.clone(), tb.clone(), ow.clone());
        let x0 = match operand {
            "x" => tx.clone(),
            "weight" => tw.clone(),
            _ => tb.clone(),
        };
        out.push(case!("conv_transpose2d", operand, x0, |t, v| {
            let pick = |t: &mut Tape<f64>, name: &str, val: &Tensor<f64>| {
                if name == operand {
                    v
                } else {
                    t.constant(val.clone())
                }
            };
            let (x, w, b) = (pick(t, "x", &tx), pick(t, "weight", &tw), pick(t, "bias", &tb));
            let y = t.conv_transpose2d(x, w, Some(b), 2)?;
            readout(t, y, &ow)
        }));
    }

    let (dx, dw, db, ow) = (randn(&[3, 5, 5], r), randn(&[3, 1, 3, 3], r), randn(&[3], r), randn(&[3, 5, 5], r));
    for operand in ["x", "weight", "bias"] {
        let (dx, dw, db, ow) = (dx.clone(), dw.clone(), db.clone(), ow.clone());
        let x0 = match operand {
            "x" => dx.clone(),
            "weight" => dw.clone(),
            _ => db.clone(),
        };
        out.push(case!("depthwise_conv2d", operand, x0, |t, v| {
            let pick = |t: &mut Tape<f64>, name: &str, val: &Tensor<f64>| {
                if name == operand {
                    v
                } else {
                    t.constant(val.clone())
                }
            };
            let (x, w, b) = (pick(t, "x", &dx), pick(t, "weight", &dw), pick(t, "bias", &db));
            let y = t.depthwise_conv2d(x, w, Some(b), 1)?;
            readout(t, y, &ow)
        }));
    }

    let (nx, ng, nb, ow) = (randn(&[5, 6], r), randn(&[6], r), randn(&[6], r), randn(&[5, 6], r));
    for operand in ["x", "gamma", "beta"] {
        let (nx, ng, nb, ow) = (nx.clone(), ng.clone(), nb.clone(), ow.clone());
        let x0 = match operand {
            "x" => nx.clone(),
            "gamma" => ng.clone(),
            _ => nb.clone(),
        };
        out.push(case!("layer_norm", operand, x0, |t, v| {
            let pick = |t: &mut Tape<f64>, name: &str, val: &Tensor<f64>| {
                if name == operand {
                    v
                } else {
                    t.constant(val.clone())
                }
            };
            let (x, g, b) = (pick(t, "x", &nx), pick(t, "gamma", &ng), pick(t, "beta", &nb));
            let y = t.layer_norm(x, g, b, 1e-5)?;
            readout(t, y, &ow)
        }));
    }

    let w = randn(&[3, 4], r);
    out.push(case!("relu", "x", away_from_zero(&[3, 4], 0.05, r), |t, x| {
        let y = t.relu(x)?;
        readout(t, y, &w)
    }));
    let w = randn(&[3, 4], r);
    out.push(case!("gelu", "x", randn(&[3, 4], r), |t, x| {
        let y = t.gelu(x)?;
        readout(t, y, &w)
    }));
    let w = randn(&[3, 4], r);
    out.push(case!("sigmoid", "x", randn(&[3, 4], r), |t, x| {
        let y = t.sigmoid(x)?;
        readout(t, y, &w)
    }));
    for axis in [0usize, 1] {
        let w = randn(&[3, 4], r);
        out.push(case!("softmax", if axis == 0 { "x/axis0" } else { "x/axis1" }, randn(&[3, 4], r), |t, x| {
            let y = t.softmax(x, axis)?;
            readout(t, y, &w)
        }));
    }
    let w = randn(&[3], r);
    out.push(case!("channel_mean", "x", randn(&[3, 4, 4], r), |t, x| {
        let y = t.channel_mean(x)?;
        readout(t, y, &w)
    }));
    let w = randn(&[1, 4, 4], r);
    out.push(case!("spatial_mean", "x", randn(&[3, 4, 4], r), |t, x| {
        let y = t.spatial_mean(x)?;
        readout(t, y, &w)
    }));
    let w = randn(&[1, 4, 4], r);
    out.push(case!("spatial_max", "x", separated_channels(&[3, 4, 4], r), |t, x| {
        let y = t.spatial_max(x)?;
        readout(t, y, &w)
    }));
    let (a, b, w) = (randn(&[3, 4, 4], r), randn(&[3], r), randn(&[3, 4, 4], r));
    out.extend(binary_cases("scale_channels", a, b, w, |t, a, b| t.scale_channels(a, b)));
    let (a, b, w) = (randn(&[3, 4, 4], r), randn(&[1, 4, 4], r), randn(&[3, 4, 4], r));
    out.extend(binary_cases("scale_spatial", a, b, w, |t, a, b| t.scale_spatial(a, b)));
    let (a, b, w) = (randn(&[2, 3, 3], r), randn(&[1, 3, 3], r), randn(&[3, 3, 3], r));
    out.extend(binary_cases("concat", a, b, w, |t, a, b| t.concat(&[a, b])));
    let w = randn(&[4, 8], r);
    out.push(case!("patchify", "x", randn(&[2, 4, 4], r), |t, x| {
        let y = t.patchify(x, 2)?;
        readout(t, y, &w)
    }));
    let w = randn(&[2, 4, 4], r);
    out.push(case!("unpatchify", "x", randn(&[4, 8], r), |t, x| {
        let y = t.unpatchify(x, [2, 4, 4], 2)?;
        readout(t, y, &w)
    }));

    let (q, k, v, ow) = (randn(&[5, 4], r), randn(&[5, 4], r), randn(&[5, 4], r), randn(&[5, 4], r));
    for operand in ["q", "k", "v"] {
        let (q, k, v, ow) = (q.clone(), k.clone(), v.clone(), ow.clone());
        let x0 = match operand {
            "q" => q.clone(),
            "k" => k.clone(),
            _ => v.clone(),
        };
        out.push(case!("attention", operand, x0, |t, var| {
            let pick = |t: &mut Tape<f64>, name: &str, val: &Tensor<f64>| {
                if name == operand {
                    var
                } else {
                    t.constant(val.clone())
                }
            };
            let (q, k, v) = (pick(t, "q", &q), pick(t, "k", &k), pick(t, "v", &v));
            let y = t.attention(q, k, v, 2)?;
            readout(t, y, &ow)
        }));
    }

    let p = Tensor::<f64>::uniform(&[2, 8], 0.05, 0.95, r);
    let y = Tensor::<f64>::from_fn(&[2, 8], |_| f64::from(u8::from(r.random_bool(0.5))));
    out.push(case!("bce_dice", "p", p, |t, x| t.bce_dice(x, &y, 1e-6)));
    out
}

/// Channels whose values differ by at least 0.1 at every position, so the
/// channel maximum is far from a tie.
fn separated_channels(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let (c, plane) = (shape[0], shape[1] * shape[2]);
    let mut data = vec![0.0; c * plane];
    for i in 0..plane {
        let mut order: Vec<usize> = (0..c).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], rng);
        let base: f64 = rng.random_range(-1.0..1.0);
        for (rank, ch) in order.into_iter().enumerate() {
            data[ch * plane + i] = base + 0.1 * rank as f64 + rng.random_range(0.0..0.05);
        }
    }
    Tensor::from_parts(shape.to_vec(), data)
}

/// Checks every operand of every op for each seed.
pub fn op_suite(seeds: &[u64]) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for case in cases(seed) {
            let err = grad_check(&case.f, &case.x, DEFAULT_STEP)?;
            out.push(OpCheck {
                op: case.op,
                operand: case.operand,
                seed,
                max_relative_error: err,
            });
        }
    }
    let missing: Vec<&str> = DIFFERENTIABLE_OPS
        .iter()
        .copied()
        .filter(|op| !out.iter().any(|c| c.op == *op))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Contract(format!("ops without a gradient check: {missing:?}")));
    }
    Ok(out)
}

/// Worst error per op, in the order of [`DIFFERENTIABLE_OPS`].
pub fn worst_per_op(checks: &[OpCheck]) -> Vec<(&'static str, f64)> {
    DIFFERENTIABLE_OPS
        .iter()
        .map(|&op| {
            let worst = checks
                .iter()
                .filter(|c| c.op == op)
                .map(|c| c.max_relative_error)
                .fold(0.0, f64::max);
            (op, worst)
        })
        .collect()
}

/// The configuration used for the model-level check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        blocks_per_stage: vec![1, 1, 1, 1],
        heads: 2,
        height: 16,
        width: 16,
        ..ModelConfig::default()
    }
}

/// Result of the model-level check.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheck {
    pub input_error: f64,
    /// Worst sampled coordinate of every parameter tensor, by name.
    pub param_errors: Vec<(String, GradCheckReport)>,
}

impl ModelCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.param_errors
            .iter()
            .map(|(_, r)| r.max_relative_error)
            .fold(self.input_error, f64::max)
    }
}

/// Full model plus BCE-Dice loss against finite differences: every input
/// component, and the `per_param` coordinates of each parameter tensor
/// with the largest analytic gradient. Deep attention weights have
/// gradients near 1e-8, where a central difference resolves little more
/// than rounding noise, so their smallest entries say nothing about
/// correctness.
///
/// Gate projections start at zero, which makes several gradients vanish
/// identically; the parameters are perturbed first so that every path
/// carries signal.
pub fn model_check(cfg: &ModelConfig, seed: u64, per_param: usize) -> Result<ModelCheck> {
    let mut model = SmaFormer::<f64>::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb(&mut model, 0.1, &mut rng);
    let img = Tensor::<f64>::uniform(&[cfg.in_channels, cfg.height, cfg.width], 0.0, 1.0, &mut rng);
    let mask: Vec<u8> = (0..cfg.height * cfg.width)
        .map(|_| rng.random_range(0..cfg.num_classes as u8))
        .collect();

    let m = &model;
    let input_error = {
        let mask = mask.clone();
        grad_check(
            move |t, x| {
                let p = m.params.bind_frozen(t);
                m.loss(t, &p, x, &mask)
            },
            &img,
            DEFAULT_STEP,
        )?
    };

    let grads = {
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let x = tape.constant(img.clone());
        let loss = model.loss(&mut tape, &p, x, &mask)?;
        tape.backward(loss)?;
        model.params.gradients(&tape, &p)
    };
    let mut param_errors = Vec::new();
    for ((id, name, value), g) in model.params.iter().zip(&grads) {
        let report = grad_check_components(
            |t, v| {
                let mut bound = m.params.bind_frozen(t);
                bound.replace(id, v);
                let x = t.constant(img.clone());
                m.loss(t, &bound, x, &mask)
            },
            value,
            DEFAULT_STEP,
            &largest(g, per_param),
        )?;
        param_errors.push((name.to_string(), report));
    }
    Ok(ModelCheck {
        input_error,
        param_errors,
    })
}

/// Indices of the `k` largest-magnitude entries, in index order.
fn largest(g: &Tensor<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.numel()).collect();
    idx.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Adds `N(0, σ²)` noise to every parameter.
pub fn perturb<R: Rng>(model: &mut SmaFormer<f64>, sigma: f64, rng: &mut R) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let t = model.params.get_mut(id);
        let noise = Tensor::<f64>::randn(t.shape(), rng);
        t.data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(w, n)| *w += sigma * n);
    }
}
