//! Run configuration: flat `key = value` text with `#` comments.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::cdu::{default_relu, CduConfig, CduHeadSpec, FusionSpec};
use crate::error::{Error, Result};
use crate::models::{self, ModelSpec};
use crate::optim::SgdConfig;
use crate::solayers::{DEFAULT_ALPHA, DEFAULT_BETA};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    /// Generated on the fly from the `synth.*` keys.
    Synth,
    /// A dataset file written by `gen-synth`.
    SynthFile,
    /// Directory of CIFAR-10 binary batches.
    Cifar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: String,
    pub model_scale_toy: bool,
    pub transition: usize,
    pub head_o2t_dims: Vec<usize>,
    pub head_pv_dim: usize,
    pub head_groups: usize,
    pub head_fusion: FusionSpec,
    pub head_mean_augment: bool,
    pub head_beta: f64,
    pub head_robust: bool,
    pub head_alpha: f64,
    pub head_orthonormal_o2t: bool,
    /// Empty means ReLU after PV only.
    pub head_relu_after: Vec<bool>,
    pub head_hidden: Vec<usize>,

    pub data_kind: DataKind,
    pub data_path: Option<PathBuf>,
    pub data_train_limit: usize,
    pub data_test_limit: usize,
    pub data_val_size: usize,
    pub data_augment: bool,

    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_sites: usize,
    pub synth_gain: f64,
    pub synth_antithetic: bool,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_test: usize,

    pub optim: SgdConfig,
    pub two_phase: bool,
    pub phase1_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub init_checkpoint: Option<PathBuf>,

    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    pub precision: Precision,
    pub wall_clock: bool,
    pub resume: bool,

    pub eval_checkpoint: Option<PathBuf>,
    pub eval_split: EvalSplit,
    pub eval_shuffle_labels: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: "so-cnn-2-same".into(),
            model_scale_toy: false,
            transition: 0,
            head_o2t_dims: vec![16],
            head_pv_dim: 16,
            head_groups: 1,
            head_fusion: FusionSpec::V_CONCAT,
            head_mean_augment: true,
            head_beta: DEFAULT_BETA,
            head_robust: false,
            head_alpha: DEFAULT_ALPHA,
            head_orthonormal_o2t: false,
            head_relu_after: Vec::new(),
            head_hidden: vec![24],
            data_kind: DataKind::Synth,
            data_path: None,
            data_train_limit: 0,
            data_test_limit: 0,
            data_val_size: 5000,
            data_augment: true,
            synth_classes: 4,
            synth_dim: 16,
            synth_sites: 64,
            synth_gain: 1.0,
            synth_antithetic: true,
            synth_train: 2000,
            synth_val: 250,
            synth_test: 500,
            optim: SgdConfig::default(),
            two_phase: false,
            phase1_epochs: 3,
            phase1_lr: 1e-3,
            phase2_lr: 1e-4,
            init_checkpoint: None,
            seed: 0,
            out: PathBuf::from("runs/default"),
            threads: 1,
            precision: Precision::F64,
            wall_clock: true,
            resume: false,
            eval_checkpoint: None,
            eval_split: EvalSplit::Test,
            eval_shuffle_labels: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse(key, s)).collect()
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => self.model = v.to_string(),
            "model.scale" => {
                self.model_scale_toy = match v {
                    "full" => false,
                    "toy" => true,
                    _ => return Err(Error::Config(format!("model.scale: expected full or toy, got {v:?}"))),
                }
            }
            "model.transition" => self.transition = parse(key, v)?,
            "head.o2t_dims" => self.head_o2t_dims = parse_list(key, v)?,
            "head.pv_dim" => self.head_pv_dim = parse(key, v)?,
            "head.groups" => self.head_groups = parse(key, v)?,
            "head.fusion" => self.head_fusion = v.parse()?,
            "head.mean_augment" => self.head_mean_augment = parse_bool(key, v)?,
            "head.beta" => self.head_beta = parse(key, v)?,
            "head.robust" => self.head_robust = parse_bool(key, v)?,
            "head.alpha" => self.head_alpha = parse(key, v)?,
            "head.orthonormal_o2t" => self.head_orthonormal_o2t = parse_bool(key, v)?,
            "head.relu_after" => {
                self.head_relu_after =
                    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_bool(key, s)).collect::<Result<_>>()?
            }
            "head.hidden" => self.head_hidden = parse_list(key, v)?,
            "data.kind" => {
                self.data_kind = match v {
                    "synth" => DataKind::Synth,
                    "synth-file" => DataKind::SynthFile,
                    "cifar" => DataKind::Cifar,
                    _ => return Err(Error::Config(format!("data.kind: expected synth, synth-file or cifar, got {v:?}"))),
                }
            }
            "data.path" => self.data_path = parse_path(v),
            "data.train_limit" => self.data_train_limit = parse(key, v)?,
            "data.test_limit" => self.data_test_limit = parse(key, v)?,
            "data.val_size" => self.data_val_size = parse(key, v)?,
            "data.augment" => self.data_augment = parse_bool(key, v)?,
            "synth.classes" => self.synth_classes = parse(key, v)?,
            "synth.dim" => self.synth_dim = parse(key, v)?,
            "synth.sites" => self.synth_sites = parse(key, v)?,
            "synth.gain" => self.synth_gain = parse(key, v)?,
            "synth.antithetic" => self.synth_antithetic = parse_bool(key, v)?,
            "synth.train" => self.synth_train = parse(key, v)?,
            "synth.val" => self.synth_val = parse(key, v)?,
            "synth.test" => self.synth_test = parse(key, v)?,
            "optim.initial_lr" => self.optim.initial_lr = parse(key, v)?,
            "optim.plateau_factor" => self.optim.plateau_factor = parse(key, v)?,
            "optim.plateau_patience" => self.optim.plateau_patience = parse(key, v)?,
            "optim.plateau_threshold" => self.optim.plateau_threshold = parse(key, v)?,
            "optim.momentum" => self.optim.momentum = parse(key, v)?,
            "optim.batch_size" => self.optim.batch_size = parse(key, v)?,
            "optim.epochs" => self.optim.max_epochs = parse(key, v)?,
            "optim.two_phase" => self.two_phase = parse_bool(key, v)?,
            "optim.phase1_epochs" => self.phase1_epochs = parse(key, v)?,
            "optim.phase1_lr" => self.phase1_lr = parse(key, v)?,
            "optim.phase2_lr" => self.phase2_lr = parse(key, v)?,
            "optim.init_checkpoint" => self.init_checkpoint = parse_path(v),
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "threads" => self.threads = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" | "32" => Precision::F32,
                    "f64" | "64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision: expected f32 or f64, got {v:?}"))),
                }
            }
            "metrics.wall_clock" => self.wall_clock = parse_bool(key, v)?,
            "resume" => self.resume = parse_bool(key, v)?,
            "eval.checkpoint" => self.eval_checkpoint = parse_path(v),
            "eval.split" => {
                self.eval_split = match v {
                    "train" => EvalSplit::Train,
                    "val" => EvalSplit::Val,
                    "test" => EvalSplit::Test,
                    _ => return Err(Error::Config(format!("eval.split: expected train, val or test, got {v:?}"))),
                }
            }
            "eval.shuffle_labels" => self.eval_shuffle_labels = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
            self.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let fusion = self.head_fusion.to_string();
        vec![
            ("model", self.model.clone()),
            ("model.scale", if self.model_scale_toy { "toy" } else { "full" }.into()),
            ("model.transition", self.transition.to_string()),
            ("head.o2t_dims", join(&self.head_o2t_dims)),
            ("head.pv_dim", self.head_pv_dim.to_string()),
            ("head.groups", self.head_groups.to_string()),
            ("head.fusion", fusion),
            ("head.mean_augment", self.head_mean_augment.to_string()),
            ("head.beta", self.head_beta.to_string()),
            ("head.robust", self.head_robust.to_string()),
            ("head.alpha", self.head_alpha.to_string()),
            ("head.orthonormal_o2t", self.head_orthonormal_o2t.to_string()),
            ("head.relu_after", join(&self.head_relu_after)),
            ("head.hidden", join(&self.head_hidden)),
            (
                "data.kind",
                match self.data_kind {
                    DataKind::Synth => "synth",
                    DataKind::SynthFile => "synth-file",
                    DataKind::Cifar => "cifar",
                }
                .into(),
            ),
            ("data.path", path_str(&self.data_path)),
            ("data.train_limit", self.data_train_limit.to_string()),
            ("data.test_limit", self.data_test_limit.to_string()),
            ("data.val_size", self.data_val_size.to_string()),
            ("data.augment", self.data_augment.to_string()),
            ("synth.classes", self.synth_classes.to_string()),
            ("synth.dim", self.synth_dim.to_string()),
            ("synth.sites", self.synth_sites.to_string()),
            ("synth.gain", self.synth_gain.to_string()),
            ("synth.antithetic", self.synth_antithetic.to_string()),
            ("synth.train", self.synth_train.to_string()),
            ("synth.val", self.synth_val.to_string()),
            ("synth.test", self.synth_test.to_string()),
            ("optim.initial_lr", self.optim.initial_lr.to_string()),
            ("optim.plateau_factor", self.optim.plateau_factor.to_string()),
            ("optim.plateau_patience", self.optim.plateau_patience.to_string()),
            ("optim.plateau_threshold", self.optim.plateau_threshold.to_string()),
            ("optim.momentum", self.optim.momentum.to_string()),
            ("optim.batch_size", self.optim.batch_size.to_string()),
            ("optim.epochs", self.optim.max_epochs.to_string()),
            ("optim.two_phase", self.two_phase.to_string()),
            ("optim.phase1_epochs", self.phase1_epochs.to_string()),
            ("optim.phase1_lr", self.phase1_lr.to_string()),
            ("optim.phase2_lr", self.phase2_lr.to_string()),
            ("optim.init_checkpoint", path_str(&self.init_checkpoint)),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("threads", self.threads.to_string()),
            ("precision", if self.precision == Precision::F32 { "f32" } else { "f64" }.into()),
            ("metrics.wall_clock", self.wall_clock.to_string()),
            ("resume", self.resume.to_string()),
            ("eval.checkpoint", path_str(&self.eval_checkpoint)),
            (
                "eval.split",
                match self.eval_split {
                    EvalSplit::Train => "train",
                    EvalSplit::Val => "val",
                    EvalSplit::Test => "test",
                }
                .into(),
            ),
            ("eval.shuffle_labels", self.eval_shuffle_labels.to_string()),
        ]
    }

    /// Text that [`from_text`](Self::from_text) parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v}").expect("write to string");
        }
        s
    }

    pub fn cdu_head(&self) -> CduHeadSpec {
        let relu_after =
            if self.head_relu_after.is_empty() { default_relu(self.head_o2t_dims.len()) } else { self.head_relu_after.clone() };
        let cdu = CduConfig {
            o2t_dims: self.head_o2t_dims.clone(),
            pv_dim: self.head_pv_dim,
            mean_augment: self.head_mean_augment.then_some(self.head_beta),
            robust: self.head_robust.then_some(self.head_alpha),
            orthonormal_o2t: self.head_orthonormal_o2t,
            relu_after,
        };
        CduHeadSpec { cdu, groups: self.head_groups, fusion: self.head_fusion }
    }

    /// Resolves the model. Feature heads (`cdu-head`, `mean-pool-head`) take
    /// their input shape and class count from the data.
    pub fn model_spec(&self, sites: usize, dim: usize, classes: usize) -> Result<ModelSpec> {
        let mut spec = match self.model.as_str() {
            "cdu-head" => models::build_feature_cdu(sites, dim, classes, self.cdu_head()),
            "mean-pool-head" => models::build_feature_mean_pool(sites, dim, classes, self.head_hidden.clone()),
            name => {
                let mut spec = models::from_name(name)?;
                if let (models::HeadSpec::Cdu(head), true) = (&mut spec.head, self.head_orthonormal_o2t) {
                    head.cdu.orthonormal_o2t = true;
                }
                spec
            }
        };
        if self.transition > 0 {
            spec = models::attach_transition(&spec, self.transition)?;
        }
        if self.model_scale_toy {
            spec = spec.toy_scale();
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.threads == 0 {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.two_phase && self.phase1_epochs > self.optim.max_epochs {
            return Err(Error::Config("phase1_epochs exceeds optim.epochs".into()));
        }
        if self.two_phase && !(self.phase1_lr > 0.0 && self.phase2_lr > 0.0) {
            return Err(Error::Config("phase learning rates must be positive".into()));
        }
        Ok(())
    }
}
