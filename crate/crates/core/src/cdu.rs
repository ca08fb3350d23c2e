//! Covariance descriptor units: `Cov → O2T* → PV` stacks, channel grouping
//! and fusion of several units.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::optim::{Init, Manifold, ParamSpec, ParamVars, Role};
use crate::scalar::Scalar;
use crate::solayers::{self, DEFAULT_BETA};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CduConfig {
    pub o2t_dims: Vec<usize>,
    pub pv_dim: usize,
    /// Mean augmentation weight `β`, if enabled.
    pub mean_augment: Option<f64>,
    /// Robust rectification `α`, if enabled.
    pub robust: Option<f64>,
    pub orthonormal_o2t: bool,
    /// ReLU flags by position: Cov, each O2T, PV.
    pub relu_after: Vec<bool>,
}

impl CduConfig {
    /// Augmented covariance, no robust rectification, ReLU after PV only.
    pub fn new(o2t_dims: Vec<usize>, pv_dim: usize) -> Self {
        let relu_after = default_relu(o2t_dims.len());
        CduConfig { o2t_dims, pv_dim, mean_augment: Some(DEFAULT_BETA), robust: None, orthonormal_o2t: false, relu_after }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pv_dim == 0 || self.o2t_dims.contains(&0) {
            return Err(Error::Config("CDU dimensions must be positive".into()));
        }
        if self.relu_after.len() != self.o2t_dims.len() + 2 {
            return Err(Error::Config(format!(
                "relu_after needs {} flags (Cov, each O2T, PV), got {}",
                self.o2t_dims.len() + 2,
                self.relu_after.len()
            )));
        }
        if let Some(a) = self.robust {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("robust alpha {a} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

pub fn default_relu(o2t_layers: usize) -> Vec<bool> {
    let mut v = vec![false; o2t_layers + 2];
    v[o2t_layers + 1] = true;
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionStage {
    Vector,
    Descriptor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMethod {
    Sum,
    Average,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionSpec {
    pub stage: FusionStage,
    pub method: FusionMethod,
}

impl FusionSpec {
    pub const V_CONCAT: FusionSpec = FusionSpec { stage: FusionStage::Vector, method: FusionMethod::Concat };
}

impl fmt::Display for FusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stage = match self.stage {
            FusionStage::Vector => "v",
            FusionStage::Descriptor => "d",
        };
        let method = match self.method {
            FusionMethod::Sum => "sum",
            FusionMethod::Average => "avg",
            FusionMethod::Concat => "concat",
        };
        write!(f, "{stage}-{method}")
    }
}

impl FromStr for FusionSpec {
    type Err = Error;

    /// Parses labels such as `v-concat` or `d-avg`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown fusion {s:?}; expected v|d-sum|avg|concat"));
        let (stage, method) = s.split_once('-').ok_or_else(bad)?;
        let stage = match stage.to_ascii_lowercase().as_str() {
            "v" => FusionStage::Vector,
            "d" => FusionStage::Descriptor,
            _ => return Err(bad()),
        };
        let method = match method.to_ascii_lowercase().as_str() {
            "sum" => FusionMethod::Sum,
            "avg" | "average" => FusionMethod::Average,
            "concat" => FusionMethod::Concat,
            _ => return Err(bad()),
        };
        Ok(FusionSpec { stage, method })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CduLayer {
    Cov { channels: usize, augment: Option<f64>, robust: Option<f64> },
    O2T { din: usize, dout: usize },
    PV { din: usize, dout: usize },
}

impl fmt::Display for CduLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CduLayer::Cov { channels, augment, robust } => {
                write!(f, "Cov({channels}")?;
                if augment.is_some() {
                    write!(f, "+mean")?;
                }
                if robust.is_some() {
                    write!(f, "+robust")?;
                }
                write!(f, ")")
            }
            CduLayer::O2T { dout, .. } => write!(f, "O2T({dout})"),
            CduLayer::PV { dout, .. } => write!(f, "PV({dout})"),
        }
    }
}

/// A validated unit: `Cov`, the O2T layers, then `PV`.
#[derive(Clone, Debug, PartialEq)]
pub struct CduChain {
    pub layers: Vec<CduLayer>,
    pub relu_after: Vec<bool>,
    pub orthonormal_o2t: bool,
}

pub fn build_cdu(cfg: &CduConfig, input_channels: usize) -> Result<CduChain> {
    cfg.validate()?;
    if input_channels == 0 {
        return Err(Error::Config("CDU input needs at least one channel".into()));
    }
    let mut layers = vec![CduLayer::Cov { channels: input_channels, augment: cfg.mean_augment, robust: cfg.robust }];
    let mut side = input_channels + usize::from(cfg.mean_augment.is_some());
    for &dout in &cfg.o2t_dims {
        layers.push(CduLayer::O2T { din: side, dout });
        side = dout;
    }
    layers.push(CduLayer::PV { din: side, dout: cfg.pv_dim });
    Ok(CduChain { layers, relu_after: cfg.relu_after.clone(), orthonormal_o2t: cfg.orthonormal_o2t })
}

impl CduChain {
    pub fn input_channels(&self) -> usize {
        match self.layers[0] {
            CduLayer::Cov { channels, .. } => channels,
            _ => unreachable!("chains start with Cov"),
        }
    }

    /// Side length of the matrix entering PV.
    pub fn descriptor_side(&self) -> usize {
        match self.layers.last() {
            Some(CduLayer::PV { din, .. }) => *din,
            _ => unreachable!("chains end with PV"),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.layers.last() {
            Some(CduLayer::PV { dout, .. }) => *dout,
            _ => unreachable!("chains end with PV"),
        }
    }

    pub fn o2t_count(&self) -> usize {
        self.layers.len() - 2
    }

    pub fn describe(&self) -> String {
        self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" - ")
    }

    fn o2t_spec(&self, prefix: &str, i: usize, din: usize, dout: usize) -> ParamSpec {
        let (init, manifold) = if self.orthonormal_o2t {
            (Init::GlorotOrthonormal { fan_in: din, fan_out: dout }, Manifold::Stiefel)
        } else {
            (Init::Glorot { fan_in: din, fan_out: dout }, Manifold::Euclidean)
        };
        ParamSpec { name: format!("{prefix}.o2t{}.w", i + 1), dims: vec![dout, din], init, manifold, role: Role::Head }
    }

    /// Parameters of the matrix stage (O2T weights only).
    pub fn descriptor_param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        self.layers
            .iter()
            .filter_map(|l| match *l {
                CduLayer::O2T { din, dout } => Some((din, dout)),
                _ => None,
            })
            .enumerate()
            .map(|(i, (din, dout))| self.o2t_spec(prefix, i, din, dout))
            .collect()
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let mut specs = self.descriptor_param_specs(prefix);
        specs.push(pv_spec(&format!("{prefix}.pv.w"), self.descriptor_side(), self.output_dim()));
        specs
    }

    /// `Cov → O2T*` on an `N × D` feature matrix, giving the descriptor
    /// matrix that PV would consume.
    pub fn forward_descriptor<T: Scalar>(&self, g: &mut Graph<T>, x: Var, vars: &ParamVars, prefix: &str) -> Result<Var> {
        let (augment, robust) = match self.layers[0] {
            CduLayer::Cov { augment, robust, .. } => (augment, robust),
            _ => unreachable!("chains start with Cov"),
        };
        let mut sigma = solayers::cov(g, x)?;
        if let Some(alpha) = robust {
            sigma = solayers::robust_rectify(g, sigma, T::of(alpha))?;
        }
        let mut m = match augment {
            Some(beta) => {
                let mu = g.mean_rows(x)?;
                solayers::cov_augment_op(g, sigma, mu, T::of(beta))?
            }
            None => sigma,
        };
        if self.relu_after[0] {
            m = g.relu(m)?;
        }
        for i in 0..self.o2t_count() {
            let w = vars.get(&format!("{prefix}.o2t{}.w", i + 1))?;
            m = solayers::o2t(g, m, w)?;
            if self.relu_after[i + 1] {
                m = g.relu(m)?;
            }
        }
        Ok(m)
    }

    /// Applies PV (and its ReLU flag) with the weight named `pv_name`.
    pub fn forward_pv<T: Scalar>(&self, g: &mut Graph<T>, m: Var, vars: &ParamVars, pv_name: &str) -> Result<Var> {
        let v = solayers::pv(g, m, vars.get(pv_name)?)?;
        if *self.relu_after.last().expect("nonempty") {
            g.relu(v)
        } else {
            Ok(v)
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, vars: &ParamVars, prefix: &str) -> Result<Var> {
        let m = self.forward_descriptor(g, x, vars, prefix)?;
        self.forward_pv(g, m, vars, &format!("{prefix}.pv.w"))
    }
}

fn pv_spec(name: &str, din: usize, dout: usize) -> ParamSpec {
    ParamSpec {
        name: name.to_string(),
        dims: vec![din, dout],
        init: Init::Glorot { fan_in: din, fan_out: dout },
        manifold: Manifold::Euclidean,
        role: Role::Head,
    }
}

/// One or more CDUs over contiguous channel groups, fused into one vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CduHeadSpec {
    pub cdu: CduConfig,
    pub groups: usize,
    pub fusion: FusionSpec,
}

impl CduHeadSpec {
    pub fn single(cdu: CduConfig) -> Self {
        CduHeadSpec { cdu, groups: 1, fusion: FusionSpec::V_CONCAT }
    }

    /// The per-group chain for `channels` input channels.
    pub fn chain(&self, channels: usize) -> Result<CduChain> {
        if self.groups == 0 || channels % self.groups != 0 {
            return Err(Error::Config(format!("{} channels cannot be split into {} equal groups", channels, self.groups)));
        }
        let chain = build_cdu(&self.cdu, channels / self.groups)?;
        if self.fusion.stage == FusionStage::Descriptor && self.groups > 1 && chain.output_dim() != chain.descriptor_side() {
            return Err(Error::Config(format!(
                "descriptor-space fusion uses a shared PV of the descriptor side {}, but pv_dim is {}",
                chain.descriptor_side(),
                chain.output_dim()
            )));
        }
        Ok(chain)
    }

    fn descriptor_fusion(&self) -> bool {
        self.fusion.stage == FusionStage::Descriptor && self.groups > 1
    }

    pub fn output_dim(&self, channels: usize) -> Result<usize> {
        let chain = self.chain(channels)?;
        Ok(match (self.descriptor_fusion(), self.fusion.method) {
            (false, FusionMethod::Concat) => self.groups * chain.output_dim(),
            _ => chain.output_dim(),
        })
    }

    fn group_prefix(g: usize) -> String {
        format!("cdu{g}")
    }

    pub fn param_specs(&self, channels: usize) -> Result<Vec<ParamSpec>> {
        let chain = self.chain(channels)?;
        let mut specs = Vec::new();
        if self.descriptor_fusion() {
            for gi in 0..self.groups {
                specs.extend(chain.descriptor_param_specs(&Self::group_prefix(gi)));
            }
            let side = chain.descriptor_side();
            let din = if self.fusion.method == FusionMethod::Concat { side * self.groups } else { side };
            specs.push(pv_spec("cdu.pv.w", din, side));
        } else {
            for gi in 0..self.groups {
                specs.extend(chain.param_specs(&Self::group_prefix(gi)));
            }
        }
        Ok(specs)
    }

    /// Human-readable layer list.
    pub fn describe(&self, channels: usize) -> Result<String> {
        let chain = self.chain(channels)?;
        Ok(if self.groups == 1 {
            chain.describe()
        } else {
            format!("{}x[{}] {}", self.groups, chain.describe(), self.fusion)
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, vars: &ParamVars) -> Result<Var> {
        let channels = g.val(x)?.cols();
        let chain = self.chain(channels)?;
        let parts = split_channels_op(g, x, self.groups)?;
        if self.descriptor_fusion() {
            let mut ms = Vec::with_capacity(parts.len());
            for (gi, &p) in parts.iter().enumerate() {
                ms.push(chain.forward_descriptor(g, p, vars, &Self::group_prefix(gi))?);
            }
            let fused = fuse_descriptors_op(g, &ms, self.fusion.method)?;
            chain.forward_pv(g, fused, vars, "cdu.pv.w")
        } else {
            let mut vs = Vec::with_capacity(parts.len());
            for (gi, &p) in parts.iter().enumerate() {
                vs.push(chain.forward(g, p, vars, &Self::group_prefix(gi))?);
            }
            fuse_vectors_op(g, &vs, self.fusion.method)
        }
    }
}

fn check_groups(d: usize, n: usize) -> Result<usize> {
    if n == 0 || d % n != 0 {
        return Err(Error::Config(format!("{d} channels cannot be split into {n} equal groups")));
    }
    Ok(d / n)
}

/// Splits the columns of `x` into `n` contiguous equal groups.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, n: usize) -> Result<Vec<Tensor<T>>> {
    if x.dims().len() != 2 {
        return shape_err(format!("split_channels expects a matrix, got {:?}", x.shape()));
    }
    let (rows, d) = (x.rows(), x.cols());
    let w = check_groups(d, n)?;
    Ok((0..n)
        .map(|g| Tensor::from_fn([rows, w], |i| x.data()[(i / w) * d + g * w + i % w]))
        .collect())
}

pub fn split_channels_op<T: Scalar>(g: &mut Graph<T>, x: Var, n: usize) -> Result<Vec<Var>> {
    let d = g.val(x)?.cols();
    let w = check_groups(d, n)?;
    if n == 1 {
        return Ok(vec![x]);
    }
    (0..n).map(|gi| g.slice_cols(x, gi * w, (gi + 1) * w)).collect()
}

fn check_same_shape<T: Scalar>(xs: &[&Tensor<T>], what: &str) -> Result<()> {
    let Some(first) = xs.first() else {
        return Err(Error::EmptyInput(format!("{what} of zero inputs")));
    };
    if let Some(bad) = xs.iter().find(|t| t.shape() != first.shape()) {
        return shape_err(format!("{what}: {:?} vs {:?}", first.shape(), bad.shape()));
    }
    Ok(())
}

pub fn fuse_vectors<T: Scalar>(vs: &[Tensor<T>], method: FusionMethod) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<T>> = vs.iter().collect();
    match method {
        FusionMethod::Concat => {
            if vs.is_empty() {
                return Err(Error::EmptyInput("fuse_vectors of zero inputs".into()));
            }
            Ok(Tensor::vector(vs.iter().flat_map(|v| v.data().iter().copied()).collect()))
        }
        FusionMethod::Sum | FusionMethod::Average => {
            check_same_shape(&refs, "fuse_vectors")?;
            let mut acc = vs[0].clone();
            for v in &vs[1..] {
                acc.accumulate(v)?;
            }
            if method == FusionMethod::Average && vs.len() > 1 {
                acc = acc.scale(T::one() / T::of(vs.len() as f64));
            }
            Ok(acc)
        }
    }
}

/// Block-diagonal matrix with the given square blocks in order.
pub fn block_diag<T: Scalar>(ms: &[Tensor<T>]) -> Result<Tensor<T>> {
    if ms.is_empty() {
        return Err(Error::EmptyInput("block_diag of zero blocks".into()));
    }
    for m in ms {
        if m.dims().len() != 2 || m.rows() != m.cols() {
            return shape_err(format!("block_diag expects square blocks, got {:?}", m.shape()));
        }
    }
    let n: usize = ms.iter().map(|m| m.rows()).sum();
    let mut out = Tensor::zeros([n, n]);
    let mut off = 0;
    for m in ms {
        let k = m.rows();
        for i in 0..k {
            for j in 0..k {
                out.set(off + i, off + j, m.at(i, j));
            }
        }
        off += k;
    }
    Ok(out)
}

pub fn fuse_descriptors<T: Scalar>(ms: &[Tensor<T>], method: FusionMethod) -> Result<Tensor<T>> {
    match method {
        FusionMethod::Concat => block_diag(ms),
        _ => fuse_vectors(ms, method),
    }
}

pub fn block_diag_op<T: Scalar>(g: &mut Graph<T>, ms: &[Var]) -> Result<Var> {
    let vals: Vec<Tensor<T>> = ms.iter().map(|&m| g.val(m).cloned()).collect::<Result<_>>()?;
    let out = block_diag(&vals)?;
    g.record("block_diag", ms, out, |c| {
        let mut off = 0;
        let mut grads = Vec::with_capacity(c.inputs.len());
        for inp in c.inputs {
            let k = inp.rows();
            grads.push(Some(Tensor::from_fn([k, k], |i| c.grad.at(off + i / k, off + i % k))));
            off += k;
        }
        Ok(grads)
    })
}

fn fuse_op<T: Scalar>(g: &mut Graph<T>, xs: &[Var], method: FusionMethod, concat: fn(&mut Graph<T>, &[Var]) -> Result<Var>) -> Result<Var> {
    if xs.len() == 1 {
        return Ok(xs[0]);
    }
    match method {
        FusionMethod::Concat => concat(g, xs),
        FusionMethod::Sum => g.add_n(xs),
        FusionMethod::Average => {
            let s = g.add_n(xs)?;
            g.scale(s, T::one() / T::of(xs.len() as f64))
        }
    }
}

/// Graph version of [`fuse_vectors`]; a single input is passed through.
pub fn fuse_vectors_op<T: Scalar>(g: &mut Graph<T>, vs: &[Var], method: FusionMethod) -> Result<Var> {
    fuse_op(g, vs, method, |g, xs| g.concat(xs))
}

/// Graph version of [`fuse_descriptors`]; a single input is passed through.
pub fn fuse_descriptors_op<T: Scalar>(g: &mut Graph<T>, ms: &[Var], method: FusionMethod) -> Result<Var> {
    fuse_op(g, ms, method, block_diag_op)
}
