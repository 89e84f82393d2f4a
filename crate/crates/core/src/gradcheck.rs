//! Central finite-difference verification of every differentiable graph
//! operation.
//!
//! Each trial builds a random instance of one operation, reduces its output
//! with a fixed random projection `L = Σ r·y`, and compares the gradients
//! from [`Graph::backward`] against `(L(x + h) − L(x − h)) / 2h` evaluated
//! from forward values only. The projection is accumulated in `f64`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{BinaryKind, Graph, Result, Tensor, Var};

pub const DEFAULT_STEP: f32 = 1e-3;
pub const DEFAULT_TOLERANCE: f32 = 1e-3;
pub const DEFAULT_TRIALS: usize = 100;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub step: f32,
    /// Pass when `|analytic − numeric| < tolerance · (1 + |analytic|)` for every element.
    pub tolerance: f32,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            trials: DEFAULT_TRIALS,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

/// Deliberate corruption of an analytic gradient, used as a negative
/// control for the checker itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the autodiff gradient of every conv2d input by 1.1.
    ConvBackward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    pub max_error: f32,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f32,
    pub ops: Vec<OpReport>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.ops.iter().all(|r| r.passed)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<24} {:>7} {:>12}  result", "op", "trials", "max error")?;
        for r in &self.ops {
            writeln!(
                f,
                "{:<24} {:>7} {:>12.3e}  {}",
                r.op,
                r.trials,
                r.max_error,
                if r.passed { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Names of the operations covered by [`run_gradcheck`], in report order.
pub const CHECKED_OPS: [&str; 12] = [
    "elementwise_add",
    "elementwise_sub",
    "elementwise_mul",
    "scale",
    "sum",
    "conv2d",
    "relu",
    "bilinear_resize",
    "masked_global_pool",
    "tile_spatial",
    "concat_channels",
    "softmax_cross_entropy",
];

/// Normalised worst-case error of the analytic gradient of `L = Σ r·build(inputs)`
/// against central differences, over every element of every input.
///
/// `corrupt` may rewrite the analytic gradients before comparison.
pub fn max_gradient_error<F>(
    build: &F,
    inputs: &[Tensor],
    step: f32,
    rng: &mut ChaCha8Rng,
    corrupt: impl Fn(usize, &mut Tensor),
) -> Result<f32>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let out_shape = g.shape(out).to_vec();
    let n_out: usize = out_shape.iter().product();
    let proj: Vec<f32> = (0..n_out).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let r = g.constant(Tensor::new(out_shape, proj.clone())?);
    let weighted = g.mul(out, r)?;
    let loss = g.sum(weighted);
    let mut grads = g.backward(loss)?;
    let mut analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    for (i, a) in analytic.iter_mut().enumerate() {
        corrupt(i, a);
    }

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(&proj)
            .map(|(&y, &r)| y as f64 * r as f64)
            .sum())
    };

    let mut worst = 0.0f32;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            let (plus, minus) = (x + step, x - step);
            probe[i].data_mut()[j] = plus;
            let lp = eval(&probe)?;
            probe[i].data_mut()[j] = minus;
            let lm = eval(&probe)?;
            probe[i].data_mut()[j] = x;
            let numeric = ((lp - lm) / (plus as f64 - minus as f64)) as f32;
            let ana = a.data()[j];
            worst = worst.max((ana - numeric).abs() / (1.0 + ana.abs()));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("positive shape")
}

/// Uniform values kept at least `margin` away from zero, for kinked ops.
fn uniform_off_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f32) -> Tensor {
    uniform(rng, shape).map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

fn binary_mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_bool(0.5) as u8 as f32).collect()).expect("positive shape")
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn shape3(rng: &mut ChaCha8Rng, ranges: [(usize, usize); 3]) -> [usize; 3] {
    ranges.map(|(lo, hi)| dim(rng, lo, hi))
}

/// Runs `cfg.trials` random trials for each op in [`CHECKED_OPS`].
pub fn run_gradcheck(seed: u64, cfg: &GradcheckConfig, fault: Option<Fault>) -> Result<GradcheckReport> {
    let mut ops = Vec::with_capacity(CHECKED_OPS.len());
    for (k, &name) in CHECKED_OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(k as u64));
        let mut worst = 0.0f32;
        for trial in 0..cfg.trials {
            let err = run_trial(name, trial, &mut rng, cfg.step, fault)?;
            worst = worst.max(err);
        }
        ops.push(OpReport {
            op: name,
            trials: cfg.trials,
            max_error: worst,
            passed: worst < cfg.tolerance,
        });
    }
    Ok(GradcheckReport {
        seed,
        tolerance: cfg.tolerance,
        ops,
    })
}

fn no_fault(_: usize, _: &mut Tensor) {}

fn binary_trial(kind: BinaryKind, trial: usize, rng: &mut ChaCha8Rng, step: f32) -> Result<f32> {
    let shape = [dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)];
    let a = uniform(rng, &shape);
    if trial % 3 == 2 {
        // The same tensor feeds both operands; its gradient must be the sum of both partials.
        let build = move |g: &mut Graph, v: &[Var]| g.elementwise(v[0], v[0], kind);
        return max_gradient_error(&build, &[a], step, rng, no_fault);
    }
    let b_shape: Vec<usize> = if trial % 3 == 1 {
        shape.iter().map(|&d| if rng.gen_bool(0.5) { 1 } else { d }).collect()
    } else {
        shape.to_vec()
    };
    let b = uniform(rng, &b_shape);
    let build = move |g: &mut Graph, v: &[Var]| g.elementwise(v[0], v[1], kind);
    max_gradient_error(&build, &[a, b], step, rng, no_fault)
}

fn run_trial(op: &str, trial: usize, rng: &mut ChaCha8Rng, step: f32, fault: Option<Fault>) -> Result<f32> {
    match op {
        "elementwise_add" => binary_trial(BinaryKind::Add, trial, rng, step),
        "elementwise_sub" => binary_trial(BinaryKind::Sub, trial, rng, step),
        "elementwise_mul" => binary_trial(BinaryKind::Mul, trial, rng, step),
        "scale" => {
            let shape = shape3(rng, [(1, 3), (1, 5), (1, 5)]);
            let x = uniform(rng, &shape);
            let factor = rng.gen_range(-2.0f32..2.0);
            let build = move |g: &mut Graph, v: &[Var]| Ok(g.scale(v[0], factor));
            max_gradient_error(&build, &[x], step, rng, no_fault)
        }
        "sum" => {
            let shape = shape3(rng, [(1, 3), (1, 5), (1, 5)]);
            let x = uniform(rng, &shape);
            let build = |g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]));
            max_gradient_error(&build, &[x], step, rng, no_fault)
        }
        "conv2d" => {
            let c_in = dim(rng, 1, 3);
            let c_out = dim(rng, 1, 3);
            let k = if rng.gen_bool(0.7) { 3 } else { 1 };
            let stride = dim(rng, 1, 2);
            let pad = if k == 3 { dim(rng, 0, 1) } else { 0 };
            let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
            let inputs = [
                uniform(rng, &[c_in, h, w]),
                uniform(rng, &[c_out, c_in, k, k]),
                uniform(rng, &[c_out]),
            ];
            let build = move |g: &mut Graph, v: &[Var]| g.conv2d(v[0], v[1], v[2], stride, pad);
            let corrupt = |_: usize, t: &mut Tensor| {
                if fault == Some(Fault::ConvBackward) {
                    t.data_mut().iter_mut().for_each(|x| *x *= 1.1);
                }
            };
            max_gradient_error(&build, &inputs, step, rng, corrupt)
        }
        "relu" => {
            let shape = shape3(rng, [(1, 3), (1, 5), (1, 5)]);
            let x = uniform_off_zero(rng, &shape, 10.0 * step);
            let build = |g: &mut Graph, v: &[Var]| Ok(g.relu(v[0]));
            max_gradient_error(&build, &[x], step, rng, no_fault)
        }
        "bilinear_resize" => {
            let shape = shape3(rng, [(1, 2), (1, 5), (1, 5)]);
            let x = uniform(rng, &shape);
            let (oh, ow) = (dim(rng, 1, 9), dim(rng, 1, 9));
            let build = move |g: &mut Graph, v: &[Var]| g.bilinear_resize(v[0], oh, ow);
            max_gradient_error(&build, &[x], step, rng, no_fault)
        }
        "masked_global_pool" => {
            let (c, h, w) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 5));
            let feat = uniform(rng, &[c, h, w]);
            let mask = if trial.is_multiple_of(2) {
                binary_mask(rng, &[1, h, w])
            } else {
                uniform(rng, &[1, h, w]).map(|v| v.abs())
            };
            let build = move |g: &mut Graph, v: &[Var]| Ok(g.masked_global_pool(v[0], &mask)?.value);
            max_gradient_error(&build, &[feat], step, rng, no_fault)
        }
        "tile_spatial" => {
            let c = dim(rng, 1, 4);
            let v0 = uniform(rng, &[c, 1, 1]);
            let (h, w) = (dim(rng, 1, 5), dim(rng, 1, 5));
            let build = move |g: &mut Graph, v: &[Var]| g.tile_spatial(v[0], h, w);
            max_gradient_error(&build, &[v0], step, rng, no_fault)
        }
        "concat_channels" => {
            let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let (ca, cb) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let a = uniform(rng, &[ca, h, w]);
            let b = uniform(rng, &[cb, h, w]);
            if trial % 4 == 3 {
                let build = |g: &mut Graph, v: &[Var]| g.concat_channels(&[v[0], v[0]]);
                return max_gradient_error(&build, &[a], step, rng, no_fault);
            }
            let build = |g: &mut Graph, v: &[Var]| g.concat_channels(&[v[0], v[1]]);
            max_gradient_error(&build, &[a, b], step, rng, no_fault)
        }
        "softmax_cross_entropy" => {
            let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let logits = uniform(rng, &[2, h, w]).map(|v| 3.0 * v);
            let target = binary_mask(rng, &[1, h, w]);
            let build = move |g: &mut Graph, v: &[Var]| g.softmax_cross_entropy(v[0], &target);
            max_gradient_error(&build, &[logits], step, rng, no_fault)
        }
        other => unreachable!("unknown op {other}"),
    }
}
