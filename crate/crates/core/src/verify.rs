//! Self-verification suites run by `soc verify`: finite-difference checks
//! of every tape operation, every loss and the full training objective;
//! the assignment solver against exhaustive enumeration; and the metrics
//! against direct pixel-loop and distance-search references.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use soc_tensor::gradcheck::{analytic_gradients, check_directional, check_gradients, REL_ERROR_FLOOR};
use soc_tensor::{Tape, Tensor, TensorError, Var};

use crate::config::Config;
use crate::error::Result;
use crate::loss::{box_losses, class_loss, contrastive_loss, dice_loss, focal_loss, total_loss, GroundTruth, LossTerms, LossWeights};
use crate::matching::hungarian;
use crate::metrics::{self, BinaryMask};
use crate::model::Model;
use crate::nn::Graph;
use crate::sim::VocStructure;
use crate::synth::{generate, sample_scene, Subset};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Random instances per operation and per loss.
pub const INSTANCES: u64 = 20;
/// Random cost matrices compared with enumeration.
pub const ASSIGNMENT_CASES: usize = 1000;
/// Random mask pairs compared with the reference metrics.
pub const METRIC_CASES: usize = 100;
/// Largest accepted metric discrepancy.
pub const METRIC_TOLERANCE: f64 = 1e-12;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:<34} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> soc_tensor::Result<Var>>;
type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Objective);

fn lift<T>(r: Result<T>) -> soc_tensor::Result<T> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

/// Contracts `y` with fixed weights so every element contributes distinctly.
fn weighted_sum(t: &mut Tape, y: Var) -> soc_tensor::Result<Var> {
    let w = Tensor::from_fn(t.shape(y), |i| ((i as f64 + 1.0) * 0.618).sin() + 0.3);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Values with magnitude in `[margin, 2)`, away from relu/abs kinks.
fn away_from_zero(shape: &[usize], margin: f64, r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(margin..2.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn unary(op: fn(&mut Tape, Var) -> soc_tensor::Result<Var>, input: Tensor) -> (Vec<Tensor>, Objective) {
    (
        vec![input],
        Box::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y)
        }),
    )
}

fn small(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r.random_range(1..=3), r.random_range(2..=4)]
}

fn cube(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r.random_range(1..=3), r.random_range(2..=3), r.random_range(1..=4)]
}

const OP_CASES: &[(&str, Case)] = &[
    ("matmul", |r| {
        let (m, k, n) = (r.random_range(1..=4), r.random_range(1..=4), r.random_range(1..=4));
        (vec![randn(&[m, k], r), randn(&[k, n], r)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        }))
    }),
    ("bmm", |r| {
        let (b, m, k, n) = (r.random_range(1..=3), r.random_range(1..=3), r.random_range(1..=4), r.random_range(1..=3));
        (vec![randn(&[b, m, k], r), randn(&[b, k, n], r)], Box::new(|t, v| {
            let y = t.bmm(v[0], v[1])?;
            weighted_sum(t, y)
        }))
    }),
    ("add/sub/mul (broadcast)", |r| {
        let (m, n) = (r.random_range(1..=4), r.random_range(2..=4));
        (vec![randn(&[m, n], r), randn(&[n], r), randn(&[m, 1], r)], Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[2])?;
            let c = t.mul(b, v[1])?;
            weighted_sum(t, c)
        }))
    }),
    ("div", |r| {
        let (m, n) = (r.random_range(1..=4), r.random_range(2..=4));
        (vec![randn(&[m, n], r), away_from_zero(&[n], 0.5, r)], Box::new(|t, v| {
            let y = t.div(v[0], v[1])?;
            weighted_sum(t, y)
        }))
    }),
    ("minimum/maximum", |r| {
        let n = r.random_range(2..=6);
        let a = randn(&[n], r);
        let b = Tensor::from_fn(&[n], |i| a.data()[i] + if r.random_bool(0.5) { 0.3 } else { -0.3 } * r.random_range(0.1..3.0));
        (vec![a, b], Box::new(|t, v| {
            let lo = t.minimum(v[0], v[1])?;
            let hi = t.maximum(v[0], v[1])?;
            let y = t.mul(lo, hi)?;
            weighted_sum(t, y)
        }))
    }),
    ("neg/scale/add_scalar", |r| {
        let s = small(r);
        let x = randn(&s, r);
        unary(|t, v| {
            let a = t.neg(v)?;
            let b = t.scale(a, -1.7)?;
            let c = t.add_scalar(b, 0.4)?;
            t.mul(c, c)
        }, x)
    }),
    ("exp", |r| {
        let s = small(r);
        let x = randn(&s, r);
        unary(|t, v| t.exp(v), x)
    }),
    ("log", |r| {
        let s = small(r);
        let x = Tensor::uniform(&s, 0.2, 3.0, r);
        unary(|t, v| t.log(v), x)
    }),
    ("sqrt", |r| {
        let s = small(r);
        let x = Tensor::uniform(&s, 0.2, 3.0, r);
        unary(|t, v| t.sqrt(v), x)
    }),
    ("square", |r| {
        let s = small(r);
        let x = randn(&s, r);
        unary(|t, v| t.square(v), x)
    }),
    ("abs", |r| {
        let s = small(r);
        let x = away_from_zero(&s, 1e-2, r);
        unary(|t, v| t.abs(v), x)
    }),
    ("relu", |r| {
        let s = small(r);
        let x = away_from_zero(&s, 1e-2, r);
        unary(|t, v| t.relu(v), x)
    }),
    ("tanh", |r| {
        let s = small(r);
        let x = randn(&s, r);
        unary(|t, v| t.tanh(v), x)
    }),
    ("sigmoid", |r| {
        let s = small(r);
        let x = randn(&s, r);
        unary(|t, v| t.sigmoid(v), x)
    }),
    ("softplus", |r| {
        let s = small(r);
        let x = randn(&s, r);
        unary(|t, v| t.softplus(v), x)
    }),
    ("reshape/permute/transpose", |r| {
        let s = cube(r);
        let x = randn(&s, r);
        unary(|t, v| {
            let n = t.value(v).numel();
            let p = t.permute(v, &[2, 0, 1])?;
            let q = t.transpose(p)?;
            let y = t.reshape(q, &[n])?;
            t.square(y)
        }, x)
    }),
    ("narrow/concat", |r| {
        let (a, c) = (r.random_range(1..=3), r.random_range(1..=3));
        (vec![randn(&[a, 2, c], r), randn(&[a, 3, c], r)], Box::new(|t, v| {
            let y = t.concat(&[v[0], v[1], v[0]], 1)?;
            let y = t.narrow(y, 1, 1, 4)?;
            let y = t.square(y)?;
            weighted_sum(t, y)
        }))
    }),
    ("index_select", |r| {
        let n = r.random_range(1..=4);
        (vec![randn(&[5, n], r)], Box::new(|t, v| {
            let y = t.index_select(v[0], &[4, 0, 4, 2])?;
            weighted_sum(t, y)
        }))
    }),
    ("embedding", |r| {
        let n = r.random_range(1..=4);
        (vec![randn(&[5, n], r)], Box::new(|t, v| {
            let y = t.embedding(v[0], &[1, 3, 3])?;
            weighted_sum(t, y)
        }))
    }),
    ("broadcast_to", |r| {
        let n = r.random_range(1..=4);
        (vec![randn(&[1, n], r)], Box::new(move |t, v| {
            let y = t.broadcast_to(v[0], &[3, 3, n])?;
            let y = t.square(y)?;
            weighted_sum(t, y)
        }))
    }),
    ("sum/mean", |r| {
        let s = cube(r);
        let x = randn(&s, r);
        (vec![x], Box::new(|t, v| {
            let y = t.square(v[0])?;
            let a = t.sum(y)?;
            let b = t.mean(y)?;
            let b = t.square(b)?;
            t.add(a, b)
        }))
    }),
    ("sum_axis/mean_axis", |r| {
        let s = cube(r);
        let axis = r.random_range(0..3);
        (vec![randn(&s, r)], Box::new(move |t, v| {
            let a = t.sum_axis(v[0], axis)?;
            let b = t.mean_axis(v[0], axis)?;
            let y = t.mul(a, b)?;
            weighted_sum(t, y)
        }))
    }),
    ("softmax/log_softmax", |r| {
        let s = cube(r);
        let axis = r.random_range(0..3);
        (vec![randn(&s, r)], Box::new(move |t, v| {
            let a = t.softmax(v[0], axis)?;
            let b = t.log_softmax(v[0], axis)?;
            let y = t.add(a, b)?;
            weighted_sum(t, y)
        }))
    }),
    ("layer_norm", |r| {
        let (m, d) = (r.random_range(1..=4), r.random_range(2..=6));
        (vec![randn(&[m, d], r), randn(&[d], r), randn(&[d], r)], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, y)
        }))
    }),
    ("conv2d", |r| {
        let (k, stride, pad) = [(1usize, 1usize, 0usize), (3, 1, 1), (3, 2, 1), (1, 2, 0)][r.random_range(0..4)];
        let (n, c, o, h) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3), r.random_range(3..=5));
        (vec![randn(&[n, c, h, h + 1], r), randn(&[o, c, k, k], r), randn(&[o], r)], Box::new(move |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad)?;
            weighted_sum(t, y)
        }))
    }),
    ("upsample_bilinear", |r| {
        let factor = [2usize, 4][r.random_range(0..2)];
        let s = [r.random_range(1..=2), r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3)];
        (vec![randn(&s, r)], Box::new(move |t, v| {
            let y = t.upsample_bilinear(v[0], factor)?;
            weighted_sum(t, y)
        }))
    }),
    ("avg_pool2d", |r| {
        let s = [r.random_range(1..=2), r.random_range(1..=2), 4, 2 * r.random_range(1..=3)];
        (vec![randn(&s, r)], Box::new(|t, v| {
            let y = t.avg_pool2d(v[0], 2)?;
            weighted_sum(t, y)
        }))
    }),
];

fn binary(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| f64::from(u8::from(r.random_bool(0.4))))
}

/// `rows` boxes `(cx, cy, w, h)` inside the unit square, paired with
/// another set whose coordinates and corners all differ by more than 1e-3
/// so no min/max or absolute-value kink lies within the difference stencil.
fn box_pair(rows: usize, r: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let boxes = |r: &mut ChaCha8Rng| -> Vec<f64> {
        (0..rows)
            .flat_map(|_| {
                let (w, h) = (r.random_range(0.1..0.5), r.random_range(0.1..0.5));
                [r.random_range(w / 2.0..1.0 - w / 2.0), r.random_range(h / 2.0..1.0 - h / 2.0), w, h]
            })
            .collect()
    };
    let corners = |v: &[f64]| [v[0] - v[2] / 2.0, v[1] - v[3] / 2.0, v[0] + v[2] / 2.0, v[1] + v[3] / 2.0];
    loop {
        let (p, g) = (boxes(r), boxes(r));
        let ok = p.chunks(4).zip(g.chunks(4)).all(|(a, b)| {
            let (ca, cb) = (corners(a), corners(b));
            let mut gaps: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            gaps.extend(ca.iter().zip(&cb).map(|(x, y)| x - y));
            gaps.extend([ca[0] - cb[2], ca[2] - cb[0], ca[1] - cb[3], ca[3] - cb[1]]);
            gaps.iter().all(|d| d.abs() > 1e-3)
        });
        if ok {
            return (Tensor::new(&[rows, 4], p).expect("box shape"), Tensor::new(&[rows, 4], g).expect("box shape"));
        }
    }
}

const LOSS_CASES: &[(&str, Case)] = &[
    ("dice loss", |r| {
        let (v, p) = (r.random_range(1..=3), r.random_range(2..=12));
        let gt = binary(&[v, p], r);
        (vec![Tensor::randn(&[v, p], 2.0, r)], Box::new(move |t, x| lift(dice_loss(t, x[0], &gt))))
    }),
    ("focal loss", |r| {
        let (v, p) = (r.random_range(1..=3), r.random_range(2..=12));
        let gt = binary(&[v, p], r);
        (vec![Tensor::randn(&[v, p], 2.0, r)], Box::new(move |t, x| lift(focal_loss(t, x[0], &gt))))
    }),
    ("L1 box loss", |r| {
        let rows = r.random_range(1..=4);
        let (p, g) = box_pair(rows, r);
        (vec![p], Box::new(move |t, x| Ok(lift(box_losses(t, x[0], &g))?.0)))
    }),
    ("GIoU loss", |r| {
        let rows = r.random_range(1..=4);
        let (p, g) = box_pair(rows, r);
        (vec![p], Box::new(move |t, x| Ok(lift(box_losses(t, x[0], &g))?.1)))
    }),
    ("class focal loss", |r| {
        let (frames, queries) = (r.random_range(1..=4), r.random_range(2..=6));
        let sigma = r.random_range(0..queries);
        let mut valid: Vec<bool> = (0..frames).map(|_| r.random_bool(0.7)).collect();
        valid[0] = true;
        (vec![Tensor::randn(&[frames, queries, 1], 2.0, r)], Box::new(move |t, x| lift(class_loss(t, x[0], sigma, &valid))))
    }),
    ("contrastive loss", |r| {
        let (n, d, l) = (r.random_range(2..=6), r.random_range(2..=8), r.random_range(1..=5));
        let sigma = r.random_range(0..n);
        (vec![randn(&[n, d], r), randn(&[l, d], r)], Box::new(move |t, x| lift(contrastive_loss(t, x[0], x[1], sigma))))
    }),
    ("total loss", |r| {
        let (frames, queries, pixels) = (r.random_range(1..=3), r.random_range(2..=4), 9);
        let sigma = r.random_range(0..queries);
        let gt_masks = binary(&[frames, pixels], r);
        let (pb, gb) = box_pair(frames, r);
        let w = LossWeights { cls: r.random_range(0.5..3.0), con: r.random_range(0.5..3.0), ..LossWeights::default() };
        let inputs = vec![Tensor::randn(&[frames, pixels], 2.0, r), pb, Tensor::randn(&[frames, queries, 1], 2.0, r), randn(&[queries, 4], r), randn(&[3, 4], r)];
        (inputs, Box::new(move |t, x| {
            let (l1, giou) = lift(box_losses(t, x[1], &gb))?;
            let terms = LossTerms {
                dice: lift(dice_loss(t, x[0], &gt_masks))?,
                focal: lift(focal_loss(t, x[0], &gt_masks))?,
                l1,
                giou,
                cls: lift(class_loss(t, x[2], sigma, &vec![true; frames]))?,
                con: lift(contrastive_loss(t, x[3], x[4], sigma))?,
            };
            lift(total_loss(t, &terms, &w))
        }))
    }),
];

fn run_cases(cases: &[(&str, Case)], seed_base: u64) -> Vec<CheckOutcome> {
    cases
        .iter()
        .enumerate()
        .map(|(c, &(name, case))| {
            let mut worst: f64 = 0.0;
            let mut failure = None;
            for i in 0..INSTANCES {
                let mut rng = ChaCha8Rng::seed_from_u64(seed_base + 1000 * c as u64 + i);
                let (inputs, f) = case(&mut rng);
                match check_gradients(f, &inputs, STEP) {
                    Ok(report) => worst = worst.max(report.max_rel_error()),
                    Err(e) => failure = Some(format!("instance {i}: {e}")),
                }
            }
            let passed = failure.is_none() && worst < GRAD_TOLERANCE;
            let detail = failure.unwrap_or_else(|| format!("{INSTANCES} instances, worst rel err {worst:.2e}"));
            CheckOutcome::new(format!("gradcheck {name}"), passed, detail)
        })
        .collect()
}

/// Finite-difference checks of every differentiable tape operation.
pub fn operation_gradients() -> Vec<CheckOutcome> {
    run_cases(OP_CASES, 0)
}

/// Finite-difference checks of every loss and of the weighted total.
pub fn loss_gradients() -> Vec<CheckOutcome> {
    run_cases(LOSS_CASES, 500_000)
}

/// Toy dimensions for the end-to-end check: 2 frames, 4 queries, width 8.
/// Frames are 32x32, the smallest size the backbone accepts.
pub fn toy_config(voc: VocStructure) -> Config {
    let mut cfg = Config::default();
    for (k, v) in [
        ("d_model", "8"),
        ("text_dim", "8"),
        ("heads", "2"),
        ("ffn_dim", "16"),
        ("text_layers", "1"),
        ("num_queries", "4"),
        ("frames", "2"),
        ("height", "32"),
        ("width", "32"),
        ("num_encoder_layers", "1"),
        ("num_decoder_layers", "1"),
        ("num_voc_layers", "1"),
    ] {
        cfg.set(k, v).expect("toy configuration is valid");
    }
    cfg.voc_structure = voc;
    cfg
}

/// Attention key biases add the same amount to every logit of a query, so
/// softmax invariance makes their gradient identically zero; their finite
/// differences are pure round-off and are bounded absolutely.
const ROUND_OFF: f64 = 1e-8;

/// Directional finite-difference check of the full training objective
/// (fixed matched query) with respect to every parameter tensor.
pub fn pipeline_gradients(voc: VocStructure, seed: u64) -> Result<CheckOutcome> {
    let cfg = toy_config(voc);
    let model = Model::new(&cfg)?;
    // Jitter parameters and pixels so no relu sits exactly on its kink
    // (zero biases over a flat background would put many there).
    let mut store = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in &names {
        let t = store.get_mut(n).expect("listed parameter");
        let noise = Tensor::randn(t.shape(), 0.05, &mut rng);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, e)| *v += e);
    }
    let store = store;
    let (scene, expr) = sample_scene(seed, Subset::Temporal, 2, cfg.frames, cfg.height, cfg.width)?;
    let mut sample = generate("gradcheck", &scene, &expr, cfg.frames, cfg.height, cfg.width)?;
    let grain = Tensor::randn(sample.clip.shape(), 0.05, &mut rng);
    sample.clip.data_mut().iter_mut().zip(grain.data()).for_each(|(v, e)| *v += e);
    let text = model.encode_text(&sample.expression)?;
    let gt = GroundTruth::from_masks(&sample.masks, 1)?;
    let weights = LossWeights::from_config(&cfg);
    let sigma = {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let x = g.constant(sample.clip.clone());
        let out = model.forward(&mut g, x, &text)?;
        model.clip_loss(&mut g, &out, &gt, &weights)?.matched.sigma
    };
    let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).expect("listed parameter").clone()).collect();
    let f = |tape: &mut Tape, vars: &[Var]| -> soc_tensor::Result<Var> {
        let bound: HashMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        lift((|| {
            let mut g = Graph::with_bindings(tape, &store, bound);
            let x = g.constant(sample.clip.clone());
            let out = model.forward(&mut g, x, &text)?;
            let terms = model.loss_terms(&mut g, &out, &gt, sigma)?;
            Ok(total_loss(&mut g, &terms, &weights)?)
        })())
    };
    let analytic = analytic_gradients(&f, &inputs)?;
    let report = check_directional(f, &inputs, STEP, &mut rng)?;
    let mut worst = (String::new(), 0.0);
    let mut bad = Vec::new();
    for ((n, &e), a) in names.iter().zip(&report.per_input).zip(&analytic) {
        if n.ends_with(".k.bias") {
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= 1e-12 || e * REL_ERROR_FLOOR >= ROUND_OFF {
                bad.push(n.clone());
            }
        } else {
            if e >= GRAD_TOLERANCE {
                bad.push(n.clone());
            }
            if e > worst.1 {
                worst = (n.clone(), e);
            }
        }
    }
    let detail = if bad.is_empty() {
        format!("{} tensors, worst {} {:.2e}", names.len(), worst.0, worst.1)
    } else {
        format!("mismatched: {}", bad.join(", "))
    };
    Ok(CheckOutcome::new(format!("gradcheck pipeline ({voc})"), bad.is_empty(), detail))
}

/// Every finite-difference suite: operations, losses and the pipeline with
/// the cluster on and off.
pub fn gradient_suite() -> Result<Vec<CheckOutcome>> {
    let mut out = operation_gradients();
    out.extend(loss_gradients());
    out.push(pipeline_gradients(VocStructure::Both, 11)?);
    out.push(pipeline_gradients(VocStructure::None, 14)?);
    Ok(out)
}

/// Smallest assignment cost by trying every injective map; each candidate
/// is summed over its pairs in row order.
fn enumerate_assignments(cost: &[f64], n: usize, m: usize) -> f64 {
    let (k, l) = (n.min(m), n.max(m));
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(k);
    let mut used = vec![false; l];
    fn go(k: usize, l: usize, n: usize, m: usize, cost: &[f64], chosen: &mut Vec<usize>, used: &mut [bool], best: &mut f64) {
        if chosen.len() == k {
            let mut pairs: Vec<(usize, usize)> =
                chosen.iter().enumerate().map(|(a, &b)| if n <= m { (a, b) } else { (b, a) }).collect();
            pairs.sort_unstable();
            *best = best.min(pairs.iter().map(|&(i, j)| cost[i * m + j]).sum());
            return;
        }
        for j in 0..l {
            if !used[j] {
                used[j] = true;
                chosen.push(j);
                go(k, l, n, m, cost, chosen, used, best);
                chosen.pop();
                used[j] = false;
            }
        }
    }
    go(k, l, n, m, cost, &mut chosen, &mut used, &mut best);
    best
}

/// The solver's optimal cost against exhaustive enumeration on random
/// matrices up to 7x7, alternating small-integer and real costs.
pub fn assignment_oracle() -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for case in 0..ASSIGNMENT_CASES {
        let (n, m) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let cost: Vec<f64> = if case % 2 == 0 {
            (0..n * m).map(|_| f64::from(rng.random_range(0..10u8))).collect()
        } else {
            (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        if hungarian(&cost, n, m)?.cost != enumerate_assignments(&cost, n, m) {
            mismatches += 1;
        }
    }
    Ok(CheckOutcome::new(
        "hungarian vs enumeration",
        mismatches == 0,
        format!("{ASSIGNMENT_CASES} matrices up to 7x7, {mismatches} mismatches"),
    ))
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let (cy, cx) = (r.random_range(0..h) as f64, r.random_range(0..w) as f64);
    let rad = r.random_range(1.0..h.min(w) as f64 / 2.5);
    let keep = r.random_bool(0.9);
    let mut m = BinaryMask::from_fn(h, w, |y, x| keep && (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= rad * rad);
    for _ in 0..r.random_range(0..(h * w / 8)) {
        let (y, x) = (r.random_range(0..h), r.random_range(0..w));
        m.set(y, x, !m.get(y, x));
    }
    m
}

fn reference_iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            inter += f64::from(u8::from(a.get(y, x) && b.get(y, x)));
            union += f64::from(u8::from(a.get(y, x) || b.get(y, x)));
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

fn edge_points(m: &BinaryMask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height() as i64, m.width() as i64);
    let fg = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.get(y as usize, x as usize);
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                pts.push((y, x));
            }
        }
    }
    pts
}

fn reference_boundary_f(a: &BinaryMask, b: &BinaryMask, tol: usize) -> f64 {
    let (pa, pb) = (edge_points(a), edge_points(b));
    if pa.is_empty() || pb.is_empty() {
        return if pa.is_empty() && pb.is_empty() { 1.0 } else { 0.0 };
    }
    let t2 = (tol * tol) as i64;
    let near = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter().filter(|p| to.iter().any(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2) <= t2)).count() as f64 / from.len() as f64
    };
    let (p, r) = (near(&pa, &pb), near(&pb, &pa));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// J, F, Precision@K, mAP and variance against direct references on
/// random 32x32 pairs, plus the exact edge cases.
pub fn metric_oracles() -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut j_err, mut f_err) = (0.0f64, 0.0f64);
    let mut ious = Vec::with_capacity(METRIC_CASES);
    for _ in 0..METRIC_CASES {
        let a = random_mask(&mut rng, 32, 32);
        let b = random_mask(&mut rng, 32, 32);
        let j = metrics::iou(&a, &b)?;
        j_err = j_err.max((j - reference_iou(&a, &b)).abs());
        for tol in [1, 2, 3] {
            f_err = f_err.max((metrics::boundary_f(&a, &b, tol)? - reference_boundary_f(&a, &b, tol)).abs());
        }
        ious.push(j);
    }
    let mut p_err = 0.0f64;
    for k in metrics::PRECISION_THRESHOLDS {
        let hits = ious.iter().filter(|&&v| v > k).count() as f64;
        p_err = p_err.max((metrics::precision_at(&ious, k)? - hits / ious.len() as f64).abs());
    }
    let mut map_ref = 0.0;
    for step in 0..10 {
        let k = 0.5 + 0.05 * f64::from(step);
        map_ref += ious.iter().filter(|&&v| v > k).count() as f64 / ious.len() as f64 / 10.0;
    }
    let map_err = (metrics::mean_average_precision(&ious)? - map_ref).abs();
    let n = ious.len() as f64;
    let mean = ious.iter().sum::<f64>() / n;
    let var_ref = ious.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
    let var_err = (metrics::stability_variance(&ious) - var_ref).abs();

    let empty = BinaryMask::empty(8, 8);
    let left = BinaryMask::from_fn(8, 8, |_, x| x < 3);
    let right = BinaryMask::from_fn(8, 8, |_, x| x > 4);
    let edges = metrics::iou(&empty, &empty)? == 1.0
        && metrics::boundary_f(&empty, &empty, 1)? == 1.0
        && metrics::iou(&left, &right)? == 0.0
        && metrics::mean_average_precision(&[0.72])? == 0.5;

    let within = |e: f64| e <= METRIC_TOLERANCE;
    Ok(vec![
        CheckOutcome::new("metric J", within(j_err), format!("{METRIC_CASES} pairs, max err {j_err:.1e}")),
        CheckOutcome::new("metric F", within(f_err), format!("{METRIC_CASES} pairs x 3 tolerances, max err {f_err:.1e}")),
        CheckOutcome::new("metric Precision@K", within(p_err), format!("max err {p_err:.1e}")),
        CheckOutcome::new("metric mAP", within(map_err), format!("err {map_err:.1e}")),
        CheckOutcome::new("metric variance", within(var_err), format!("err {var_err:.1e}")),
        CheckOutcome::new("metric edge cases", edges, "both-empty, disjoint, single-IoU mAP"),
    ])
}

/// Every suite in order.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    let mut out = gradient_suite()?;
    out.push(assignment_oracle()?);
    out.extend(metric_oracles()?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_finds_the_diagonal() {
        let cost = [0.0, 5.0, 5.0, 5.0, 0.0, 5.0, 5.0, 5.0, 0.0];
        assert_eq!(enumerate_assignments(&cost, 3, 3), 0.0);
        assert_eq!(enumerate_assignments(&[3.0, 1.0, 2.0], 1, 3), 1.0);
        assert_eq!(enumerate_assignments(&[3.0, 1.0, 2.0], 3, 1), 1.0);
    }

    #[test]
    fn reference_boundary_of_a_square() {
        let m = BinaryMask::from_fn(6, 6, |y, x| (1..5).contains(&y) && (1..5).contains(&x));
        assert_eq!(edge_points(&m).len(), 12);
        assert_eq!(reference_boundary_f(&m, &m, 1), 1.0);
    }

    #[test]
    fn a_broken_gradient_fails_its_check() {
        // An objective whose tape gradient is sign-flipped relative to its value.
        let f = |t: &mut Tape, v: &[Var]| -> soc_tensor::Result<Var> {
            let d = t.value(v[0]).clone();
            let stop = t.constant(d);
            let a = t.square(stop)?;
            let b = t.scale(v[0], -1.0)?;
            let y = t.add(a, b)?;
            let c = t.scale(stop, 2.0)?;
            let c = t.mul(c, v[0])?;
            let y = t.add(y, c)?;
            t.sum(y)
        };
        // Value: sum(x^2 - x + 2x^2) with stop-gradient terms; the tape sees
        // only d/dx(-x + 2 s x) = 2s - 1, while the true derivative is 6x - 1.
        let x = Tensor::new(&[3], vec![0.7, -0.4, 1.3]).unwrap();
        let report = check_gradients(f, &[x], STEP).unwrap();
        assert!(!report.passes(GRAD_TOLERANCE));
    }
}
