//! Central finite-difference checks of every backward pass.
//!
//! Each operator is wrapped as `L(inputs) = sum(r * f(inputs))` with a fixed
//! random `r`; the analytic gradient of `L` is `backward(r)`. Relative error
//! is `|a - n| / max(|a|, |n|, 1e-3)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{self, OpKind};
use crate::model::{build_adnet, BranchSpec, FilterScale, ModelConfig};
use crate::ops::{self, ConvAttrs, Mode, NormState, PoolAttrs, PoolMode};
use crate::optim::softmax_cross_entropy;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-3;

/// Every entry the suite can run, in report order.
pub const CHECK_NAMES: &[&str] = &[
    "conv2d",
    "avgpool2d",
    "maxpool2d",
    "batchnorm",
    "dense",
    "relu",
    "sigmoid",
    "softmax",
    "dropout",
    "flatten",
    "concat",
    "cross_entropy",
    "end_to_end",
    "reduced_model",
];

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Seeds per operator entry.
    pub seeds: usize,
    /// Seeds for the (slow) full reduced architecture.
    pub reduced_seeds: usize,
    /// Substring filter on entry names.
    pub filter: Option<String>,
    /// Entry whose analytic gradient is deliberately scaled by 1.01.
    pub perturb: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            seeds: 20,
            reduced_seeds: 2,
            filter: None,
            perturb: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst_rel: f64,
    pub tolerance: f64,
    pub seeds: usize,
    /// Coordinates compared.
    pub coords: usize,
    /// Coordinates dropped because a ReLU changed side within the stencil.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst_rel <= self.tolerance
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.as_str())
            .collect()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<15} {:>12} {:>9} {:>6} {:>7} {:>5}  result", "check", "worst_rel", "tol", "seeds", "coords", "skip")?;
        for r in &self.results {
            writeln!(
                f,
                "{:<15} {:>12.3e} {:>9.0e} {:>6} {:>7} {:>5}  {}",
                r.name,
                r.worst_rel,
                r.tolerance,
                r.seeds,
                r.coords,
                r.skipped,
                if r.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// Values bounded away from zero by at least `gap`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64) -> Tensor {
    let mut t = uniform(rng, shape, gap, 2.0);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

/// A shuffled grid of distinct values spaced `0.01` apart.
fn distinct(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    use rand::seq::SliceRandom;
    let len: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..len).map(|i| (i as f64 - len as f64 / 2.0) * 0.01).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).expect("valid shape")
}

type Forward<'a> = dyn Fn(&[Tensor]) -> Result<Tensor> + 'a;
type Backward<'a> = dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Option<Tensor>>> + 'a;

/// Checks every coordinate of every differentiable input. Returns
/// `(worst, coords)`.
fn check_op(inputs: &[Tensor], f: &Forward<'_>, b: &Backward<'_>, rng: &mut ChaCha8Rng, scale: f64) -> Result<(f64, usize)> {
    let out = f(inputs)?;
    let r = uniform(rng, out.shape().to_vec(), -1.0, 1.0);
    let loss = |xs: &[Tensor]| -> Result<f64> {
        Ok(f(xs)?.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    let grads = b(inputs, &r)?;
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut xs = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        if g.shape() != inputs[i].shape() {
            return Err(Error::Shape(format!("gradient {i} has shape {:?}, input {:?}", g.shape(), inputs[i].shape())));
        }
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            xs[i].data_mut()[j] = orig + STEP;
            let up = loss(&xs)?;
            xs[i].data_mut()[j] = orig - STEP;
            let down = loss(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(g.data()[j] * scale, numeric));
            coords += 1;
        }
    }
    Ok((worst, coords))
}

fn op_case(name: &str, rng: &mut ChaCha8Rng, scale: f64) -> Result<(f64, usize)> {
    let ex = Exec::Sequential;
    let n = rng.random_range(1..=3usize);
    let c = rng.random_range(1..=3usize);
    match name {
        "conv2d" => {
            let (h, w) = (rng.random_range(3..=7usize), rng.random_range(3..=7usize));
            let attrs = ConvAttrs {
                out_channels: rng.random_range(1..=3),
                kernel_h: rng.random_range(1..=h.min(3)),
                kernel_w: rng.random_range(1..=w.min(3)),
            };
            let ws = attrs.weight_shape(c).to_vec();
            let inputs = [
                uniform(rng, vec![n, c, h, w], -1.0, 1.0),
                uniform(rng, ws, -1.0, 1.0),
                uniform(rng, vec![attrs.out_channels], -1.0, 1.0),
            ];
            check_op(
                &inputs,
                &|x| ops::conv2d_forward(&x[0], &x[1], &x[2], &attrs, ex),
                &|x, g| {
                    let r = ops::conv2d_backward(g, &x[0], &x[1], ex)?;
                    Ok(vec![Some(r.x), Some(r.weights), Some(r.bias)])
                },
                rng,
                scale,
            )
        }
        "avgpool2d" | "maxpool2d" => {
            let mode = if name == "maxpool2d" { PoolMode::Max } else { PoolMode::Average };
            let win = rng.random_range(2..=3usize);
            let (h, w) = (rng.random_range(win..=7), rng.random_range(win..=7));
            let attrs = PoolAttrs::square(win, mode);
            let x = distinct(rng, vec![n, c, h, w]);
            check_op(
                &[x],
                &|x| ops::pool2d_forward(&x[0], &attrs, ex),
                &|x, g| Ok(vec![Some(ops::pool2d_backward(g, &x[0], &attrs, ex)?)]),
                rng,
                scale,
            )
        }
        "batchnorm" => {
            let n = n + 1;
            let (h, w) = (rng.random_range(1..=4usize), rng.random_range(1..=4usize));
            let inputs = [
                uniform(rng, vec![n, c, h, w], -2.0, 3.0),
                uniform(rng, vec![c], 0.5, 1.5),
                uniform(rng, vec![c], -0.5, 0.5),
            ];
            let state = |x: &[Tensor]| -> Result<NormState<f64>> {
                let mut s = NormState::new(c)?;
                s.gamma = x[1].clone();
                s.beta = x[2].clone();
                Ok(s)
            };
            check_op(
                &inputs,
                &|x| Ok(ops::batchnorm_forward(&x[0], &state(x)?, Mode::Train, ex)?.output),
                &|x, g| {
                    let r = ops::batchnorm_backward(g, &x[0], &state(x)?, ex)?;
                    Ok(vec![Some(r.x), Some(r.gamma), Some(r.beta)])
                },
                rng,
                scale,
            )
        }
        "dense" => {
            let (d_in, d_out) = (rng.random_range(1..=6usize), rng.random_range(1..=5usize));
            let inputs = [
                uniform(rng, vec![n, d_in], -1.0, 1.0),
                uniform(rng, vec![d_in, d_out], -1.0, 1.0),
                uniform(rng, vec![d_out], -1.0, 1.0),
            ];
            check_op(
                &inputs,
                &|x| ops::dense_forward(&x[0], &x[1], &x[2], ex),
                &|x, g| {
                    let r = ops::dense_backward(g, &x[0], &x[1], ex)?;
                    Ok(vec![Some(r.x), Some(r.weights), Some(r.bias)])
                },
                rng,
                scale,
            )
        }
        "relu" => check_op(
            &[away_from_zero(rng, vec![n, c, 3, 4], 0.01)],
            &|x| Ok(ops::relu(&x[0])),
            &|x, g| Ok(vec![Some(ops::relu_backward(g, &x[0])?)]),
            rng,
            scale,
        ),
        "sigmoid" => check_op(
            &[uniform(rng, vec![n, c, 2, 3], -4.0, 4.0)],
            &|x| Ok(ops::sigmoid(&x[0])),
            &|x, g| Ok(vec![Some(ops::sigmoid_backward(g, &ops::sigmoid(&x[0]))?)]),
            rng,
            scale,
        ),
        "softmax" => {
            let k = rng.random_range(2..=5usize);
            check_op(
                &[uniform(rng, vec![n, k], -3.0, 3.0)],
                &|x| ops::softmax(&x[0]),
                &|x, g| Ok(vec![Some(ops::softmax_backward(g, &ops::softmax(&x[0])?)?)]),
                rng,
                scale,
            )
        }
        "dropout" => {
            let rate = rng.random_range(0.1..0.7);
            let mask_seed: u64 = rng.random();
            let apply = move |x: &Tensor| {
                let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                ops::dropout(x, rate, Mode::Train, &mut r)
            };
            check_op(
                &[uniform(rng, vec![n, c * 7], -1.0, 1.0)],
                &|x| Ok(apply(&x[0])?.0),
                &|x, g| Ok(vec![Some(ops::dropout_backward(g, &apply(&x[0])?.1)?)]),
                rng,
                scale,
            )
        }
        "flatten" => {
            let shape = vec![n, c, 2, 3];
            check_op(
                &[uniform(rng, shape.clone(), -1.0, 1.0)],
                &|x| ops::flatten(&x[0]),
                &|_, g| Ok(vec![Some(ops::unflatten(g, &shape[1..])?)]),
                rng,
                scale,
            )
        }
        "concat" => {
            let widths: Vec<usize> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(1..=4)).collect();
            let inputs: Vec<Tensor> = widths.iter().map(|&w| uniform(rng, vec![n, w], -1.0, 1.0)).collect();
            check_op(
                &inputs,
                &|x| ops::concat(&x.iter().collect::<Vec<_>>()),
                &|_, g| Ok(ops::concat_backward(g, &widths)?.into_iter().map(Some).collect()),
                rng,
                scale,
            )
        }
        "cross_entropy" => {
            let k = rng.random_range(2..=4usize);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            // Scalar loss: the upstream value multiplies the mean loss.
            check_op(
                &[uniform(rng, vec![n, k], -3.0, 3.0)],
                &|x| Tensor::from_vec(vec![1], vec![softmax_cross_entropy(&x[0], &labels)?.mean_loss]),
                &|x, g| {
                    let l = softmax_cross_entropy(&x[0], &labels)?;
                    Ok(vec![Some(l.grad_logits.map(|v| v * g.data()[0]))])
                },
                rng,
                scale,
            )
        }
        other => Err(Error::Config(format!("unknown gradient check {other:?}"))),
    }
}

/// Small three-branch network with every layer kind of the full model.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        input: [3, 20, 20],
        branches: vec![
            BranchSpec::new(3, 2, vec![2, 3]),
            BranchSpec::new(5, 3, vec![2]),
            BranchSpec::new(7, 5, vec![2]),
        ],
        head_widths: vec![6, 5],
        num_classes: 3,
        dropout_rate: 0.5,
        filter_scale: FilterScale::ONE,
    }
}

struct ModelCheck {
    worst: f64,
    coords: usize,
    skipped: usize,
}

/// Loss of a train-mode forward with a fixed dropout stream. Also returns
/// the sign pattern of every ReLU input.
fn model_loss(
    g: &graph::Graph,
    params: &ParamStore<f64>,
    x: &Tensor,
    labels: &[usize],
    mask_seed: u64,
) -> Result<(f64, graph::Tape<f64>, Vec<bool>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
    let (_, tape) = graph::forward(g, params, x, Mode::Train, &mut rng, Exec::Sequential)?;
    let logits = tape.value(g.logits_id()).expect("train tape keeps values");
    let loss = softmax_cross_entropy(logits, labels)?.mean_loss;
    let mut signs = Vec::new();
    for node in g.nodes() {
        if matches!(node.kind, OpKind::Relu) {
            let input = tape.value(node.inputs[0]).expect("train tape keeps values");
            signs.extend(input.data().iter().map(|&v| v > 0.0));
        }
    }
    Ok((loss, tape, signs))
}

/// End-to-end check of parameter gradients. At most `per_tensor`
/// coordinates of each parameter tensor are compared.
fn model_case(cfg: &ModelConfig, batch: usize, per_tensor: usize, rng: &mut ChaCha8Rng, scale: f64) -> Result<ModelCheck> {
    let (g, mut params) = build_adnet::<f64, _>(cfg, rng)?;
    // Non-trivial scale/shift so normalization gradients are not degenerate.
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in &names {
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            let v = params.value_mut(name)?;
            for x in v.data_mut() {
                *x += rng.random_range(-0.3..0.3);
            }
        }
    }
    let [c, h, w] = cfg.input;
    let x = uniform(rng, vec![batch, c, h, w], 0.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..cfg.num_classes)).collect();
    let mask_seed: u64 = rng.random();

    let (_, tape, _) = model_loss(&g, &params, &x, &labels, mask_seed)?;
    let logits = tape.value(g.logits_id()).expect("train tape keeps values");
    let seed_grad = softmax_cross_entropy(logits, &labels)?.grad_logits;
    let grads = graph::backward_from(&g, &params, &tape, g.logits_id(), &seed_grad, Exec::Sequential)?;

    let mut out = ModelCheck {
        worst: 0.0,
        coords: 0,
        skipped: 0,
    };
    for (name, analytic) in &grads {
        let len = analytic.len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
        };
        for j in picks {
            let orig = params.value(name)?.data()[j];
            let mut numeric = None;
            let mut step = STEP;
            for _ in 0..3 {
                params.value_mut(name)?.data_mut()[j] = orig + step;
                let (up, _, s_up) = model_loss(&g, &params, &x, &labels, mask_seed)?;
                params.value_mut(name)?.data_mut()[j] = orig - step;
                let (down, _, s_down) = model_loss(&g, &params, &x, &labels, mask_seed)?;
                params.value_mut(name)?.data_mut()[j] = orig;
                if s_up == s_down {
                    numeric = Some((up - down) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            match numeric {
                Some(n) => {
                    out.worst = out.worst.max(rel_err(analytic.data()[j] * scale, n));
                    out.coords += 1;
                }
                None => out.skipped += 1,
            }
        }
    }
    Ok(out)
}

fn selected(name: &str, filter: &Option<String>) -> bool {
    filter.as_deref().map_or(true, |f| name.contains(f))
}

/// Runs the selected entries.
pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let names: Vec<&str> = CHECK_NAMES.iter().copied().filter(|n| selected(n, &opts.filter)).collect();
    if names.is_empty() {
        return Err(Error::Config(format!(
            "no gradient check matches {:?}; known: {}",
            opts.filter.as_deref().unwrap_or(""),
            CHECK_NAMES.join(", ")
        )));
    }
    let mut report = GradcheckReport::default();
    for name in names {
        let scale = if opts.perturb.as_deref() == Some(name) { 1.01 } else { 1.0 };
        let mut result = CheckResult {
            name: name.to_string(),
            worst_rel: 0.0,
            tolerance: OP_TOLERANCE,
            seeds: 0,
            coords: 0,
            skipped: 0,
        };
        let seeds = match name {
            "reduced_model" => opts.reduced_seeds,
            _ => opts.seeds,
        };
        for s in 0..seeds as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_mul(1_000_003).wrapping_add(s));
            let (worst, coords, skipped) = match name {
                "end_to_end" => {
                    result.tolerance = MODEL_TOLERANCE;
                    let m = model_case(&tiny_config(), 3, 12, &mut rng, scale)?;
                    (m.worst, m.coords, m.skipped)
                }
                "reduced_model" => {
                    result.tolerance = MODEL_TOLERANCE;
                    let cfg = ModelConfig::scaled(FilterScale::new(1, 8)?);
                    let m = model_case(&cfg, 2, 2, &mut rng, scale)?;
                    (m.worst, m.coords, m.skipped)
                }
                _ => {
                    let (w, c) = op_case(name, &mut rng, scale)?;
                    (w, c, 0)
                }
            };
            result.worst_rel = result.worst_rel.max(worst);
            result.coords += coords;
            result.skipped += skipped;
            result.seeds += 1;
        }
        report.results.push(result);
    }
    Ok(report)
}
