//! Finite-difference checks of every layer's backward pass and of every
//! built-in model at toy scale.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check_many, finite_diff_check_sampled, Graph, Var, DEFAULT_FD_STEP};
use crate::error::{Error, Result};
use crate::linalg::sym_eig;
use crate::models::{builtin_names, from_name, Model, ModelSpec};
use crate::nn::{self, Padding};
use crate::optim::ParamVars;
use crate::solayers::{self, cov_stats, o2t_forward, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::tensor::Tensor;

pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Robust-layer seeds whose covariance has an eigengap below this are skipped.
pub const MIN_EIGENGAP: f64 = 1e-3;

pub const LAYERS: [&str; 10] =
    ["cov", "mean_augment", "o2t", "pv", "robust_rectify", "transition", "conv2d", "maxpool", "dense", "softmax_ce"];

/// Deliberate backward-pass bugs, used to confirm the checker catches them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the O2T gradients.
    O2tSign,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o2t" | "o2t-sign" => Ok(Fault::O2tSign),
            _ => Err(Error::Config(format!("unknown fault {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub worst: f64,
    pub worst_seed: Option<u64>,
    pub tolerance: f64,
    pub seeds_run: usize,
    pub seeds_skipped: usize,
    pub status: Status,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.status {
            Status::Skipped(why) => write!(f, "SKIP {:<22} {why}", self.name),
            s => {
                let tag = if *s == Status::Pass { "PASS" } else { "FAIL" };
                write!(
                    f,
                    "{tag} {:<22} worst {:.3e} (seed {}) tol {:.0e}, {} seeds",
                    self.name,
                    self.worst,
                    self.worst_seed.map_or("-".into(), |s| s.to_string()),
                    self.tolerance,
                    self.seeds_run
                )?;
                if self.seeds_skipped > 0 {
                    write!(f, ", {} skipped", self.seeds_skipped)?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub seeds: u64,
    pub layers: bool,
    pub models: bool,
    pub fault: Option<Fault>,
    /// Coordinates probed per parameter tensor in model checks.
    pub model_coords: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { seeds: 10, layers: true, models: true, fault: None, model_coords: 48 }
    }
}

fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output entry matters.
fn weighted_sum(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.hadamard(out, rv)?;
    g.sum(p)
}

fn faulty_o2t(g: &mut Graph, m: Var, w: Var) -> Result<Var> {
    let y = o2t_forward(g.val(m)?, g.val(w)?)?;
    g.record("o2t", &[m, w], y, |c| {
        let (m, w) = (c.inputs[0], c.inputs[1]);
        let dy = c.grad;
        let dm = w.transpose()?.matmul(dy)?.matmul(w)?.scale(-1.0);
        let a = dy.matmul(w)?.matmul(&m.transpose()?)?;
        let b = dy.transpose()?.matmul(w)?.matmul(m)?;
        Ok(vec![Some(dm), Some(a.add(&b)?.scale(-1.0))])
    })
}

/// Worst error for one seed of layer `name`, or `None` if the seed was skipped.
fn layer_seed(name: &str, seed: u64, fault: Option<Fault>) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(name.len() as u64));
    let h = DEFAULT_FD_STEP;
    let err = match name {
        "cov" => {
            let (n, d) = (rng.gen_range(3..=8), rng.gen_range(2..=6));
            let x = rand_tensor(&[n, d], &mut rng);
            let r = rand_tensor(&[d, d], &mut rng);
            finite_diff_check_many(|g, v| {
                let s = solayers::cov(g, v[0])?;
                weighted_sum(g, s, &r)
            }, &[x], h)?
        }
        "mean_augment" => {
            let d = rng.gen_range(2..=7);
            let sigma = rand_tensor(&[d, d], &mut rng).symmetrize()?;
            let mu = rand_tensor(&[d], &mut rng);
            let r = rand_tensor(&[d + 1, d + 1], &mut rng);
            finite_diff_check_many(|g, v| {
                let c = solayers::cov_augment_op(g, v[0], v[1], DEFAULT_BETA)?;
                weighted_sum(g, c, &r)
            }, &[sigma, mu], h)?
        }
        "o2t" => {
            let (din, dout) = (rng.gen_range(2..=8), rng.gen_range(1..=8));
            let a = rand_tensor(&[din, din], &mut rng);
            let m = a.matmul(&a.transpose()?)?;
            let w = rand_tensor(&[dout, din], &mut rng);
            let r = rand_tensor(&[dout, dout], &mut rng);
            finite_diff_check_many(|g, v| {
                let y = match fault {
                    Some(Fault::O2tSign) => faulty_o2t(g, v[0], v[1])?,
                    None => solayers::o2t(g, v[0], v[1])?,
                };
                weighted_sum(g, y, &r)
            }, &[m, w], h)?
        }
        "pv" => {
            let (d, p) = (rng.gen_range(2..=8), rng.gen_range(1..=8));
            let y = rand_tensor(&[d, d], &mut rng).symmetrize()?;
            let w = rand_tensor(&[d, p], &mut rng);
            let r = rand_tensor(&[p], &mut rng);
            finite_diff_check_many(|g, v| {
                let o = solayers::pv(g, v[0], v[1])?;
                weighted_sum(g, o, &r)
            }, &[y, w], h)?
        }
        "robust_rectify" => {
            let d = rng.gen_range(2..=6);
            let x = rand_tensor(&[rng.gen_range(d + 2..=8), d], &mut rng);
            return robust_check(&x, &rand_tensor(&[d, d], &mut rng));
        }
        "transition" => {
            let (n, d, dt) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
            let x = rand_tensor(&[n, d], &mut rng);
            let w = rand_tensor(&[dt, d], &mut rng);
            let b = rand_tensor(&[dt], &mut rng);
            let r = rand_tensor(&[n, dt], &mut rng);
            finite_diff_check_many(|g, v| {
                let y = solayers::transition(g, v[0], v[1], v[2])?;
                weighted_sum(g, y, &r)
            }, &[x, w, b], h)?
        }
        "conv2d" => {
            let (hh, ww) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
            let (cin, cout, k) = (rng.gen_range(1..=3), rng.gen_range(1..=3), [1, 3][rng.gen_range(0..2)]);
            let stride = rng.gen_range(1..=2);
            let padding = if rng.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
            let x = rand_tensor(&[hh, ww, cin], &mut rng);
            let w = rand_tensor(&[k, k, cin, cout], &mut rng);
            let b = rand_tensor(&[cout], &mut rng);
            let out_dims = nn::conv2d_forward(&x, &w, &b, stride, padding)?.dims().to_vec();
            let r = rand_tensor(&out_dims, &mut rng);
            finite_diff_check_many(|g, v| {
                let y = nn::conv2d(g, v[0], v[1], v[2], stride, padding)?;
                weighted_sum(g, y, &r)
            }, &[x, w, b], h)?
        }
        "maxpool" => {
            let (hh, ww, c) = (rng.gen_range(2..=8), rng.gen_range(2..=8), rng.gen_range(1..=3));
            let x = rand_tensor(&[hh, ww, c], &mut rng);
            let r = rand_tensor(&[hh.div_ceil(2), ww.div_ceil(2), c], &mut rng);
            finite_diff_check_many(|g, v| {
                let y = nn::maxpool2x2(g, v[0])?;
                weighted_sum(g, y, &r)
            }, &[x], h)?
        }
        "dense" => {
            let (din, dout) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
            let x = rand_tensor(&[din], &mut rng);
            let w = rand_tensor(&[din, dout], &mut rng);
            let b = rand_tensor(&[dout], &mut rng);
            let r = rand_tensor(&[dout], &mut rng);
            finite_diff_check_many(|g, v| {
                let y = nn::dense(g, v[0], v[1], v[2])?;
                weighted_sum(g, y, &r)
            }, &[x, w, b], h)?
        }
        "softmax_ce" => {
            let k = rng.gen_range(2..=8);
            let logits = rand_tensor(&[k], &mut rng).scale(3.0);
            let label = rng.gen_range(0..k);
            finite_diff_check_many(|g, v| nn::softmax_cross_entropy(g, v[0], label), &[logits], h)?
        }
        _ => return Err(Error::Config(format!("unknown layer {name:?}"))),
    };
    Ok(Some(err))
}

/// Checks `x ↦ Σ r ⊙ rectify(cov(x))`; `None` when the covariance spectrum
/// has a gap below [`MIN_EIGENGAP`], where central differences are unreliable.
pub fn robust_check(x: &Tensor, r: &Tensor) -> Result<Option<f64>> {
    let (sigma, _) = cov_stats(x)?;
    if sym_eig(&sigma)?.min_gap() < MIN_EIGENGAP {
        return Ok(None);
    }
    let err = finite_diff_check_many(
        |g, v| {
            let s = solayers::cov(g, v[0])?;
            let y = solayers::robust_rectify(g, s, DEFAULT_ALPHA)?;
            weighted_sum(g, y, r)
        },
        std::slice::from_ref(x),
        DEFAULT_FD_STEP,
    )?;
    Ok(Some(err))
}

fn summarize(name: &str, tolerance: f64, results: Vec<(u64, Option<f64>)>) -> CheckReport {
    let mut report = CheckReport {
        name: name.to_string(),
        worst: 0.0,
        worst_seed: None,
        tolerance,
        seeds_run: 0,
        seeds_skipped: 0,
        status: Status::Pass,
    };
    for (seed, r) in results {
        match r {
            None => report.seeds_skipped += 1,
            Some(e) => {
                report.seeds_run += 1;
                if report.worst_seed.is_none() || e > report.worst {
                    report.worst = e;
                    report.worst_seed = Some(seed);
                }
            }
        }
    }
    report.status = if report.seeds_run == 0 {
        Status::Skipped("degenerate spectrum on every seed".into())
    } else if report.worst < tolerance {
        Status::Pass
    } else {
        Status::Fail
    };
    report
}

pub fn check_layer(name: &str, seeds: u64, fault: Option<Fault>) -> Result<CheckReport> {
    let results = (0..seeds).map(|s| layer_seed(name, s, fault).map(|r| (s, r))).collect::<Result<Vec<_>>>()?;
    Ok(summarize(name, LAYER_TOLERANCE, results))
}

/// End-to-end check of `spec` (inputs and all parameters) through softmax
/// cross-entropy, probing up to `coords` entries per tensor.
pub fn check_model(spec: &ModelSpec, seed: u64, coords: usize) -> Result<f64> {
    let model: Model = Model::new(spec.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(&spec.input_dims(), &mut rng);
    let label = rng.gen_range(0..spec.classes);
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let mut inputs = vec![x];
    inputs.extend(model.params.iter().map(|p| p.value.clone()));
    finite_diff_check_sampled(
        |g, vs| {
            let vars = ParamVars::from_vars(names.iter().cloned().zip(vs[1..].iter().copied()));
            let logits = spec.forward(g, &vars, vs[0])?;
            nn::softmax_cross_entropy(g, logits, label)
        },
        &inputs,
        DEFAULT_FD_STEP,
        coords,
        seed,
    )
}

/// Runs the selected checks; the result is ordered layers first, then models.
pub fn run(opts: &GradcheckOptions) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    if opts.layers {
        for name in LAYERS {
            reports.push(check_layer(name, opts.seeds, opts.fault)?);
        }
    }
    if opts.models {
        for name in builtin_names() {
            let spec = from_name(&name)?.toy_scale();
            let err = check_model(&spec, 0, opts.model_coords)?;
            reports.push(summarize(&format!("model {name}"), MODEL_TOLERANCE, vec![(0, Some(err))]));
        }
    }
    Ok(reports)
}

pub fn all_passed(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.status != Status::Fail)
}
