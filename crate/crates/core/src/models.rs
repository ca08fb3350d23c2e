//! Declarative model specs: a convolutional backbone followed by either
//! fully-connected layers or a CDU head, and a final classifier.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Var};
use crate::cdu::{CduConfig, CduHeadSpec};
use crate::error::{Error, Result};
use crate::nn::{self, Padding};
use crate::optim::{Init, Manifold, ParamSpec, ParamStore, ParamVars, Role};
use crate::rng::SeedStream;
use crate::scalar::Scalar;
use crate::solayers;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSpec {
    Image { height: usize, width: usize, channels: usize },
    /// Pre-extracted `sites × dim` feature matrices.
    Features { sites: usize, dim: usize },
}

/// Blocks of same-padded `kernel × kernel` convolutions, each followed by
/// ReLU; every block ends in 2×2 max pooling (the last one only if
/// `pool_last`).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvPlan {
    pub blocks: Vec<Vec<usize>>,
    pub kernel: usize,
    pub pool_last: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadSpec {
    /// Flatten, then hidden FC + ReLU layers.
    Dense { hidden: Vec<usize> },
    /// Average over sites, then hidden FC + ReLU layers.
    MeanPoolDense { hidden: Vec<usize> },
    Cdu(CduHeadSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input: InputSpec,
    pub backbone: Option<ConvPlan>,
    /// Output width of a per-site linear map inserted before a CDU head.
    pub transition: Option<usize>,
    pub head: HeadSpec,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DimPlan {
    Same,
    Div2,
    Mul2,
}

impl fmt::Display for DimPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DimPlan::Same => "same",
            DimPlan::Div2 => "div2",
            DimPlan::Mul2 => "x2",
        })
    }
}

impl FromStr for DimPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "same" => Ok(DimPlan::Same),
            "div2" => Ok(DimPlan::Div2),
            "x2" | "mul2" => Ok(DimPlan::Mul2),
            _ => Err(Error::Config(format!("unknown dimension plan {s:?}; expected same, div2 or x2"))),
        }
    }
}

pub const FITNET_BLOCKS: [[usize; 3]; 3] = [[16, 16, 16], [32, 32, 32], [48, 48, 64]];
pub const CIFAR_INPUT: InputSpec = InputSpec::Image { height: 32, width: 32, channels: 3 };
/// Side length the O2T plans start from (×2) or end at (÷2).
pub const BASE_O2T_DIM: usize = 50;

fn fitnet_backbone() -> ConvPlan {
    ConvPlan { blocks: FITNET_BLOCKS.iter().map(|b| b.to_vec()).collect(), kernel: 3, pool_last: true }
}

pub fn build_fitnet_baseline() -> ModelSpec {
    ModelSpec {
        name: "fitnet".into(),
        input: CIFAR_INPUT,
        backbone: Some(fitnet_backbone()),
        transition: None,
        head: HeadSpec::Dense { hidden: vec![500] },
        classes: 10,
    }
}

/// O2T output sides for `k` layers under `plan`, given a covariance side of
/// `channels` (before augmentation).
pub fn o2t_plan(k: usize, plan: DimPlan, channels: usize) -> Vec<usize> {
    match plan {
        DimPlan::Same => vec![channels; k],
        DimPlan::Div2 => (0..k).map(|i| BASE_O2T_DIM << (k - 1 - i)).collect(),
        DimPlan::Mul2 => (0..k).map(|i| BASE_O2T_DIM << i).collect(),
    }
}

pub fn build_so_cnn(k: usize, plan: DimPlan) -> Result<ModelSpec> {
    if !(1..=5).contains(&k) {
        return Err(Error::Config(format!("SO-CNN needs 1 to 5 O2T layers, got {k}")));
    }
    let backbone = fitnet_backbone();
    let channels = *backbone.blocks.last().and_then(|b| b.last()).expect("nonempty plan");
    let dims = o2t_plan(k, plan, channels);
    let pv = *dims.last().expect("k >= 1");
    Ok(ModelSpec {
        name: format!("so-cnn-{k}-{plan}"),
        input: CIFAR_INPUT,
        backbone: Some(backbone),
        transition: None,
        head: HeadSpec::Cdu(CduHeadSpec::single(CduConfig::new(dims, pv))),
        classes: 10,
    })
}

/// Inserts a transition layer of width `out_dim` in front of the CDU head.
pub fn attach_transition(spec: &ModelSpec, out_dim: usize) -> Result<ModelSpec> {
    let HeadSpec::Cdu(head) = &spec.head else {
        return Err(Error::Config("a transition layer needs a CDU head".into()));
    };
    if out_dim == 0 {
        return Err(Error::Config("transition width must be positive".into()));
    }
    head.chain(out_dim)?;
    let mut out = spec.clone();
    out.transition = Some(out_dim);
    out.name = format!("{}+t{out_dim}", spec.name);
    Ok(out)
}

/// CDU head applied directly to feature matrices.
pub fn build_feature_cdu(sites: usize, dim: usize, classes: usize, cdu: CduHeadSpec) -> ModelSpec {
    ModelSpec {
        name: "cdu-head".into(),
        input: InputSpec::Features { sites, dim },
        backbone: None,
        transition: None,
        head: HeadSpec::Cdu(cdu),
        classes,
    }
}

/// Mean pooling over sites followed by FC layers.
pub fn build_feature_mean_pool(sites: usize, dim: usize, classes: usize, hidden: Vec<usize>) -> ModelSpec {
    ModelSpec {
        name: "mean-pool-head".into(),
        input: InputSpec::Features { sites, dim },
        backbone: None,
        transition: None,
        head: HeadSpec::MeanPoolDense { hidden },
        classes,
    }
}

/// Built-in names: `fitnet` and `so-cnn-<k>-<same|div2|x2>`.
pub fn from_name(name: &str) -> Result<ModelSpec> {
    if name == "fitnet" {
        return Ok(build_fitnet_baseline());
    }
    let bad = || Error::Config(format!("unknown model {name:?}; expected fitnet or so-cnn-<k>-<same|div2|x2>"));
    let rest = name.strip_prefix("so-cnn-").ok_or_else(bad)?;
    let (k, plan) = rest.split_once('-').ok_or_else(bad)?;
    build_so_cnn(k.parse().map_err(|_| bad())?, plan.parse()?)
}

pub fn builtin_names() -> Vec<String> {
    let mut names = vec!["fitnet".to_string()];
    for k in 1..=5 {
        for plan in [DimPlan::Same, DimPlan::Div2, DimPlan::Mul2] {
            names.push(format!("so-cnn-{k}-{plan}"));
        }
    }
    names
}

/// Shape of the backbone output: `(height, width, channels)` for images,
/// `(sites, 1, dim)` for feature input.
fn backbone_output(spec: &ModelSpec) -> Result<(usize, usize, usize)> {
    match (spec.input, &spec.backbone) {
        (InputSpec::Features { sites, dim }, None) => Ok((sites, 1, dim)),
        (InputSpec::Features { .. }, Some(_)) => Err(Error::Config("a conv backbone needs image input".into())),
        (InputSpec::Image { height, width, channels }, None) => Ok((height, width, channels)),
        (InputSpec::Image { height, width, channels }, Some(plan)) => {
            let (mut h, mut w, mut c) = (height, width, channels);
            for (bi, block) in plan.blocks.iter().enumerate() {
                if block.is_empty() || block.contains(&0) {
                    return Err(Error::Config(format!("conv block {} has an empty or zero-width layer", bi + 1)));
                }
                c = *block.last().expect("nonempty");
                if bi + 1 < plan.blocks.len() || plan.pool_last {
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
            }
            Ok((h, w, c))
        }
    }
}

fn glorot(name: String, dims: Vec<usize>, fan_in: usize, fan_out: usize, role: Role) -> ParamSpec {
    ParamSpec { name, dims, init: Init::Glorot { fan_in, fan_out }, manifold: Manifold::Euclidean, role }
}

fn zeros(name: String, dims: Vec<usize>, role: Role) -> ParamSpec {
    ParamSpec { name, dims, init: Init::Zeros, manifold: Manifold::Euclidean, role }
}

fn dense_specs(name: &str, din: usize, dout: usize) -> [ParamSpec; 2] {
    [glorot(format!("{name}.w"), vec![din, dout], din, dout, Role::Head), zeros(format!("{name}.b"), vec![dout], Role::Head)]
}

/// Named layer with its parameter tensors, in forward order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub layer: String,
    pub params: Vec<ParamSpec>,
}

impl LayerParams {
    pub fn count(&self) -> usize {
        self.params.iter().map(ParamSpec::numel).sum()
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.layers().map(|_| ())
    }

    /// Per-layer parameter breakdown; also validates the spec.
    pub fn layers(&self) -> Result<Vec<LayerParams>> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        let mut layers = Vec::new();
        if let (InputSpec::Image { channels, .. }, Some(plan)) = (self.input, &self.backbone) {
            if plan.kernel == 0 {
                return Err(Error::Config("kernel size must be positive".into()));
            }
            let k2 = plan.kernel * plan.kernel;
            let mut cin = channels;
            for (bi, block) in plan.blocks.iter().enumerate() {
                for (li, &cout) in block.iter().enumerate() {
                    let name = format!("conv{}_{}", bi + 1, li + 1);
                    let w = glorot(format!("{name}.w"), vec![plan.kernel, plan.kernel, cin, cout], k2 * cin, k2 * cout, Role::Backbone);
                    let b = zeros(format!("{name}.b"), vec![cout], Role::Backbone);
                    layers.push(LayerParams { layer: name, params: vec![w, b] });
                    cin = cout;
                }
            }
        }
        let (h, w, c) = backbone_output(self)?;
        let sites = h * w;
        let features = match &self.head {
            HeadSpec::Dense { hidden } | HeadSpec::MeanPoolDense { hidden } => {
                if self.transition.is_some() {
                    return Err(Error::Config("a transition layer needs a CDU head".into()));
                }
                let mut din = if matches!(self.head, HeadSpec::Dense { .. }) { sites * c } else { c };
                for (i, &dout) in hidden.iter().enumerate() {
                    if dout == 0 {
                        return Err(Error::Config("hidden widths must be positive".into()));
                    }
                    let name = format!("fc{}", i + 1);
                    layers.push(LayerParams { layer: name.clone(), params: dense_specs(&name, din, dout).to_vec() });
                    din = dout;
                }
                din
            }
            HeadSpec::Cdu(head) => {
                let mut channels = c;
                if let Some(dt) = self.transition {
                    let params = vec![
                        glorot("transition.w".into(), vec![dt, c], c, dt, Role::Head),
                        zeros("transition.b".into(), vec![dt], Role::Head),
                    ];
                    layers.push(LayerParams { layer: "transition".into(), params });
                    channels = dt;
                }
                let specs = head.param_specs(channels)?;
                let mut groups: Vec<LayerParams> = Vec::new();
                for s in specs {
                    let layer = s.name.rsplit_once('.').map_or(s.name.clone(), |(l, _)| l.to_string());
                    match groups.last_mut() {
                        Some(g) if g.layer == layer => g.params.push(s),
                        _ => groups.push(LayerParams { layer, params: vec![s] }),
                    }
                }
                layers.extend(groups);
                head.output_dim(channels)?
            }
        };
        layers.push(LayerParams { layer: "classifier".into(), params: dense_specs("classifier", features, self.classes).to_vec() });
        Ok(layers)
    }

    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        Ok(self.layers()?.into_iter().flat_map(|l| l.params).collect())
    }

    /// Shape of one input example.
    pub fn input_dims(&self) -> Vec<usize> {
        match self.input {
            InputSpec::Image { height, width, channels } => vec![height, width, channels],
            InputSpec::Features { sites, dim } => vec![sites, dim],
        }
    }

    /// A structurally identical model small enough for finite-difference
    /// checks: 8×8 input, widths divided by 8, no final pooling.
    pub fn toy_scale(&self) -> ModelSpec {
        let shrink = |d: usize| d.div_ceil(8).max(2);
        let mut spec = self.clone();
        spec.name = format!("{}@toy", self.name);
        if let InputSpec::Image { channels, .. } = spec.input {
            spec.input = InputSpec::Image { height: 8, width: 8, channels };
        }
        if let InputSpec::Features { sites, dim } = spec.input {
            spec.input = InputSpec::Features { sites: sites.min(8), dim: shrink(dim) };
        }
        if let Some(plan) = &mut spec.backbone {
            plan.blocks.iter_mut().for_each(|b| b.iter_mut().for_each(|c| *c = shrink(*c)));
            plan.pool_last = false;
        }
        spec.transition = spec.transition.map(shrink);
        match &mut spec.head {
            HeadSpec::Dense { hidden } | HeadSpec::MeanPoolDense { hidden } => hidden.iter_mut().for_each(|h| *h = shrink(*h)),
            HeadSpec::Cdu(head) => {
                head.cdu.o2t_dims.iter_mut().for_each(|d| *d = shrink(*d));
                head.cdu.pv_dim = shrink(head.cdu.pv_dim);
            }
        }
        spec
    }

    /// Logits for one example held in `x`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some(plan) = &self.backbone {
            for (bi, block) in plan.blocks.iter().enumerate() {
                for li in 0..block.len() {
                    let name = format!("conv{}_{}", bi + 1, li + 1);
                    let (w, b) = (vars.get(&format!("{name}.w"))?, vars.get(&format!("{name}.b"))?);
                    let y = nn::conv2d(g, h, w, b, 1, Padding::Same)?;
                    h = g.relu(y)?;
                }
                if bi + 1 < plan.blocks.len() || plan.pool_last {
                    h = nn::maxpool2x2(g, h)?;
                }
            }
        }
        let dims = g.val(h)?.dims().to_vec();
        let (sites, channels) = match dims[..] {
            [a, b, c] => (a * b, c),
            [n, d] => (n, d),
            _ => return Err(Error::Shape(format!("unexpected activation shape {dims:?}"))),
        };
        let mut features = match &self.head {
            HeadSpec::Dense { hidden } => {
                let mut v = g.reshape(h, &[sites * channels])?;
                for i in 0..hidden.len() {
                    v = dense_relu(g, vars, v, &format!("fc{}", i + 1))?;
                }
                v
            }
            HeadSpec::MeanPoolDense { hidden } => {
                let m = g.reshape(h, &[sites, channels])?;
                let mut v = g.mean_rows(m)?;
                for i in 0..hidden.len() {
                    v = dense_relu(g, vars, v, &format!("fc{}", i + 1))?;
                }
                v
            }
            HeadSpec::Cdu(head) => {
                let mut m = g.reshape(h, &[sites, channels])?;
                if self.transition.is_some() {
                    let (w, b) = (vars.get("transition.w")?, vars.get("transition.b")?);
                    m = solayers::transition(g, m, w, b)?;
                }
                head.forward(g, m, vars)?
            }
        };
        let (w, b) = (vars.get("classifier.w")?, vars.get("classifier.b")?);
        features = nn::dense(g, features, w, b)?;
        Ok(features)
    }
}

fn dense_relu<T: Scalar>(g: &mut Graph<T>, vars: &ParamVars, x: Var, name: &str) -> Result<Var> {
    let (w, b) = (vars.get(&format!("{name}.w"))?, vars.get(&format!("{name}.b"))?);
    let y = nn::dense(g, x, w, b)?;
    g.relu(y)
}

/// Total scalar count of a parameter list.
pub fn param_count(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}

pub fn count_params(spec: &ModelSpec) -> Result<usize> {
    Ok(param_count(&spec.param_specs()?))
}

/// A spec together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T = f64> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Initializes parameters from the `init` stream of `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let specs = spec.param_specs()?;
        let mut rng = SeedStream::new(seed).rng("init");
        let params = ParamStore::from_specs(&specs, &mut rng)?;
        Ok(Model { spec, params })
    }

    /// Pairs `spec` with loaded parameters, checking names and shapes and
    /// taking manifold and role flags from the spec.
    pub fn with_params(spec: ModelSpec, mut params: ParamStore<T>) -> Result<Self> {
        let specs = spec.param_specs()?;
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!("{} parameters for a model with {}", params.len(), specs.len())));
        }
        for (s, p) in specs.iter().zip(params.iter_mut()) {
            p.manifold = s.manifold;
            p.role = s.role;
            if s.name != p.name || s.dims != p.value.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name,
                    p.value.dims(),
                    s.name,
                    s.dims
                )));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let x = g.constant(input.clone());
        let out = self.spec.forward(&mut g, &vars, x)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, input: &Tensor<T>) -> Result<usize> {
        let logits = self.logits(input)?;
        Ok(argmax(logits.data()))
    }
}

/// Index of the largest value, first on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check_many;
    use crate::cdu::CduLayer;
    use crate::nn::softmax_cross_entropy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn within(x: usize, target: f64, tol: f64) -> bool {
        (x as f64 - target).abs() <= tol * target
    }

    #[test]
    fn fitnet_count() {
        let spec = build_fitnet_baseline();
        let layers = spec.layers().unwrap();
        let fc1 = layers.iter().find(|l| l.layer == "fc1").unwrap();
        assert_eq!(fc1.count(), 512_500);
        let conv: usize = layers.iter().filter(|l| l.layer.starts_with("conv")).map(LayerParams::count).sum();
        assert_eq!(conv, 90_592);
        let total = count_params(&spec).unwrap();
        assert_eq!(total, 608_102);
        assert!(within(total, 620_000.0, 0.05));
    }

    #[test]
    fn so_cnn_examples() {
        let spec = build_so_cnn(4, DimPlan::Mul2).unwrap();
        let HeadSpec::Cdu(head) = &spec.head else { panic!() };
        assert_eq!(head.cdu.o2t_dims, vec![50, 100, 200, 400]);
        assert_eq!(head.cdu.pv_dim, 400);
        let layers = spec.layers().unwrap();
        let o2t1 = layers.iter().find(|l| l.layer == "cdu0.o2t1").unwrap();
        assert_eq!(o2t1.count(), 3250);
        let total = count_params(&spec).unwrap();
        assert_eq!(total, 362_852);
        assert!(within(total, 362_000.0, 0.02));
        let fitnet = count_params(&build_fitnet_baseline()).unwrap();
        assert!(1.0 - total as f64 / fitnet as f64 >= 0.40);

        let chain = head.chain(64).unwrap();
        assert_eq!(chain.layers[1], CduLayer::O2T { din: 65, dout: 50 });

        let spec = build_so_cnn(3, DimPlan::Div2).unwrap();
        let HeadSpec::Cdu(head) = &spec.head else { panic!() };
        assert_eq!((head.cdu.o2t_dims.clone(), head.cdu.pv_dim), (vec![200, 100, 50], 50));
        let spec = build_so_cnn(2, DimPlan::Same).unwrap();
        let HeadSpec::Cdu(head) = &spec.head else { panic!() };
        assert_eq!((head.cdu.o2t_dims.clone(), head.cdu.pv_dim), (vec![64, 64], 64));

        assert!(build_so_cnn(0, DimPlan::Same).is_err());
        assert!(build_so_cnn(6, DimPlan::Same).is_err());
    }

    #[test]
    fn so_specs_have_only_the_classifier_fc() {
        for name in builtin_names().into_iter().filter(|n| n.starts_with("so-")) {
            let layers = from_name(&name).unwrap().layers().unwrap();
            assert!(!layers.iter().any(|l| l.layer.starts_with("fc")), "{name}");
            assert_eq!(layers.last().unwrap().layer, "classifier");
        }
    }

    #[test]
    fn counts_are_additive() {
        assert_eq!(param_count(&[]), 0);
        for name in builtin_names() {
            let spec = from_name(&name).unwrap();
            let by_layer: usize = spec.layers().unwrap().iter().map(LayerParams::count).sum();
            assert_eq!(by_layer, count_params(&spec).unwrap());
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!(from_name("so-cnn-4-x2").unwrap(), build_so_cnn(4, DimPlan::Mul2).unwrap());
        assert!(from_name("so-cnn-4").is_err());
        assert!(from_name("vgg16").is_err());
    }

    #[test]
    fn transition_attachment() {
        let spec = build_so_cnn(2, DimPlan::Same).unwrap();
        let t = attach_transition(&spec, 64).unwrap();
        let base = count_params(&spec).unwrap();
        assert_eq!(count_params(&t).unwrap(), base + 64 * 64 + 64);
        let t = attach_transition(&spec, 32).unwrap();
        let HeadSpec::Cdu(head) = &t.head else { panic!() };
        assert_eq!(head.chain(32).unwrap().layers[1], CduLayer::O2T { din: 33, dout: 64 });
        assert!(attach_transition(&build_fitnet_baseline(), 64).is_err());
        let mut grouped = spec.clone();
        if let HeadSpec::Cdu(h) = &mut grouped.head {
            h.groups = 4;
        }
        assert!(attach_transition(&grouped, 30).is_err());
    }

    #[test]
    fn full_size_forward_shapes() {
        let spec = build_fitnet_baseline();
        let model: Model = Model::new(spec, 1).unwrap();
        let logits = model.logits(&Tensor::zeros([32, 32, 3])).unwrap();
        assert_eq!(logits.dims(), [10]);
        assert!(logits.is_finite());
    }

    fn model_gradcheck(spec: &ModelSpec, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model: Model = Model::new(spec.clone(), seed).unwrap();
        let x = Tensor::from_fn(spec.input_dims(), |_| rng.gen_range(-1.0..1.0));
        let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
        let mut inputs = vec![x];
        inputs.extend(model.params.iter().map(|p| p.value.clone()));
        finite_diff_check_many(
            |g, vs| {
                let vars = ParamVars::from_vars(names.iter().cloned().zip(vs[1..].iter().copied()));
                let logits = spec.forward(g, &vars, vs[0])?;
                softmax_cross_entropy(g, logits, 3)
            },
            &inputs,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn toy_models_pass_gradient_check() {
        for name in ["fitnet", "so-cnn-2-same", "so-cnn-4-x2"] {
            let spec = from_name(name).unwrap().toy_scale();
            let err = model_gradcheck(&spec, 7);
            assert!(err < 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn toy_scale_shapes() {
        let toy = from_name("so-cnn-4-x2").unwrap().toy_scale();
        assert_eq!(toy.input_dims(), vec![8, 8, 3]);
        let HeadSpec::Cdu(head) = &toy.head else { panic!() };
        assert_eq!(head.cdu.o2t_dims, vec![7, 13, 25, 50]);
        let model: Model = Model::new(toy, 0).unwrap();
        assert_eq!(model.logits(&Tensor::zeros([8, 8, 3])).unwrap().dims(), [10]);
    }
}
