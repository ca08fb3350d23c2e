//! Parameters, initialization and SGD, including Riemannian steps on the
//! Stiefel manifold and a reduce-on-plateau learning-rate schedule.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::qr_thin;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use crate::train::two_phase_train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Manifold {
    Euclidean,
    /// Orthonormal rows when `rows <= cols`, orthonormal columns otherwise.
    Stiefel,
}

/// Which side of the freeze boundary a parameter sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Backbone,
    Head,
}

#[derive(Clone, Debug)]
pub struct Param<T = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    pub manifold: Manifold,
    pub role: Role,
    velocity: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, manifold: Manifold, role: Role) -> Self {
        Param { name: name.into(), value, trainable: true, manifold, role, velocity: None }
    }

    /// Momentum buffer, present once a momentum step has run.
    pub fn velocity(&self) -> Option<&Tensor<T>> {
        self.velocity.as_ref()
    }

    pub fn set_velocity(&mut self, v: Option<Tensor<T>>) {
        self.velocity = v;
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f64> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, p: Param<T>) -> Result<()> {
        if self.index_of(&p.name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {}", p.name)));
        }
        self.params.push(p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn count_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Marks parameters of `role` trainable (or frozen).
    pub fn set_trainable(&mut self, role: Role, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.role == role) {
            p.trainable = trainable;
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn clear_momentum(&mut self) {
        self.params.iter_mut().for_each(|p| p.velocity = None);
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Zeros,
    Glorot { fan_in: usize, fan_out: usize },
    /// Glorot followed by projection onto the Stiefel manifold.
    GlorotOrthonormal { fan_in: usize, fan_out: usize },
}

/// Declarative description of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
    pub manifold: Manifold,
    pub role: Role,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

impl<T: Scalar> ParamStore<T> {
    /// Allocates and initializes parameters in order, drawing from `rng`.
    pub fn from_specs<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        for s in specs {
            let value = match s.init {
                Init::Zeros => Tensor::zeros(s.dims.clone()),
                Init::Glorot { fan_in, fan_out } => glorot_init(&s.dims, fan_in, fan_out, rng),
                Init::GlorotOrthonormal { fan_in, fan_out } => {
                    orthonormalize(&glorot_init::<f64, _>(&s.dims, fan_in, fan_out, rng))?.cast()
                }
            };
            store.push(Param::new(s.name.clone(), value, s.manifold, s.role))?;
        }
        Ok(store)
    }

    /// Registers every parameter on `g`: trainable ones as leaves, frozen ones
    /// as constants.
    pub fn bind(&self, g: &mut Graph<T>) -> ParamVars {
        self.bind_impl(g, false)
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> ParamVars {
        self.bind_impl(g, true)
    }

    fn bind_impl(&self, g: &mut Graph<T>, frozen: bool) -> ParamVars {
        let mut vars = ParamVars::default();
        for p in &self.params {
            let v = if p.trainable && !frozen { g.leaf(p.value.clone()) } else { g.constant(p.value.clone()) };
            vars.index.insert(p.name.clone(), vars.order.len());
            vars.order.push(v);
        }
        vars
    }
}

/// Graph handles for a [`ParamStore`], in store order.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    order: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    /// Builds a binding from explicit `(name, var)` pairs.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        let mut vars = ParamVars::default();
        for (name, v) in pairs {
            vars.index.insert(name, vars.order.len());
            vars.order.push(v);
        }
        vars
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.order[i])
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.order
    }

    /// Gradients of all parameters in store order.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.order.iter().map(|&v| g.grad(v)).collect()
    }
}

/// Uniform samples on `[−a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_init<T: Scalar, R: Rng + ?Sized>(dims: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    assert!(fan_in + fan_out > 0, "glorot_init needs positive fans");
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(dims, |_| T::of(rng.gen_range(-a..=a)))
}

/// Projects `w` onto the Stiefel manifold (orthonormal rows or columns,
/// whichever side is shorter) via QR.
pub fn orthonormalize<T: Scalar>(w: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = (w.rows(), w.cols());
    if r <= c {
        Ok(qr_thin(&w.transpose()?)?.0.transpose()?)
    } else {
        Ok(qr_thin(w)?.0)
    }
}

/// `‖W Wᵀ − I‖_max` (or `‖Wᵀ W − I‖_max` for tall `W`).
pub fn orthonormality_error<T: Scalar>(w: &Tensor<T>) -> f64 {
    let gram = if w.rows() <= w.cols() {
        w.matmul(&w.transpose().expect("matrix")).expect("gram")
    } else {
        w.transpose().expect("matrix").matmul(w).expect("gram")
    };
    gram.sub(&Tensor::eye(gram.rows())).expect("square").max_abs().f64()
}

/// One Riemannian SGD step for `W` with orthonormal rows (`W Wᵀ = I`).
///
/// The Euclidean gradient is projected onto the tangent space,
/// `G̃ = G − sym(G Wᵀ) W`, and the update `W − lr·G̃` is retracted back with
/// thin QR (positive-diagonal `R`). A tall `W` is handled through its
/// transpose, constraining the columns instead.
pub fn stiefel_step<T: Scalar>(w: &Tensor<T>, g: &Tensor<T>, lr: T) -> Result<Tensor<T>> {
    if w.shape() != g.shape() || w.dims().len() != 2 {
        return shape_err(format!("stiefel_step: W {:?} and G {:?}", w.shape(), g.shape()));
    }
    if w.rows() > w.cols() {
        return stiefel_step(&w.transpose()?, &g.transpose()?, lr)?.transpose();
    }
    let gwt = g.matmul(&w.transpose()?)?.symmetrize()?;
    let tangent = g.sub(&gwt.matmul(w)?)?;
    let step = tangent.scale(lr);
    if step.data().iter().all(|&v| v == T::zero()) {
        return Ok(w.clone());
    }
    let moved = w.sub(&step)?;
    let (q, _) = qr_thin(&moved.transpose()?)?;
    q.transpose()
}

/// In-place SGD update of every trainable parameter, with `grads` in store
/// order. Euclidean parameters use `v ← μ v + G; W ← W − lr·v` (plain
/// `W ← W − lr·G` when `μ = 0`); Stiefel parameters take [`stiefel_step`]
/// without momentum.
pub fn sgd_step<T: Scalar>(params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: T, momentum: T) -> Result<()> {
    if grads.len() != params.len() {
        return shape_err(format!("{} gradients for {} parameters", grads.len(), params.len()));
    }
    for (p, g) in params.params.iter_mut().zip(grads) {
        if !p.trainable {
            continue;
        }
        if p.value.shape() != g.shape() {
            return shape_err(format!("gradient {:?} for parameter {} {:?}", g.shape(), p.name, p.value.shape()));
        }
        match p.manifold {
            Manifold::Stiefel => p.value = stiefel_step(&p.value, g, lr)?,
            Manifold::Euclidean if momentum == T::zero() => {
                for (w, &d) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
            Manifold::Euclidean => {
                let v = p.velocity.get_or_insert_with(|| Tensor::zeros(g.shape().clone()));
                for ((vv, &d), w) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                    *vv = momentum * *vv + d;
                    *w -= lr * *vv;
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_threshold: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            initial_lr: 0.01,
            plateau_factor: 0.1,
            plateau_patience: 8,
            plateau_threshold: 1e-5,
            momentum: 0.0,
            batch_size: 32,
            max_epochs: 30,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) {
            return Err(Error::Config("initial_lr must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must lie in (0, 1)".into()));
        }
        if self.momentum < 0.0 {
            return Err(Error::Config("momentum must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve on its best value by more than `threshold` for
/// `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, threshold: f64) -> Self {
        PlateauScheduler { lr, factor, patience, threshold, best: f64::INFINITY, bad_epochs: 0 }
    }

    pub fn from_config(cfg: &SgdConfig) -> Self {
        Self::new(cfg.initial_lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold)
    }

    /// Records one epoch's loss; returns `true` if the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best - self.threshold {
            self.best = loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return true;
        }
        false
    }
}
