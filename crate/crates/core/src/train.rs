//! Minibatch training, evaluation, metrics and checkpoints.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::{Augment, FeatureSet, ImageSet, Normalizer};
use crate::error::{Error, Result};
use crate::models::{argmax, Model, ModelSpec};
use crate::nn::softmax_cross_entropy;
use crate::optim::{sgd_step, ParamStore, PlateauScheduler, Role, SgdConfig};
use crate::rng::{Rng, SeedStream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,val_acc,lr,wall_seconds";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// One fold of a dataset.
#[derive(Clone, Debug)]
pub enum Split {
    Images { set: ImageSet, norm: Normalizer, augment: Augment },
    Features(FeatureSet),
}

impl Split {
    pub fn len(&self) -> usize {
        match self {
            Split::Images { set, .. } => set.len(),
            Split::Features(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> &[usize] {
        match self {
            Split::Images { set, .. } => &set.labels,
            Split::Features(f) => &f.labels,
        }
    }

    pub fn labels_mut(&mut self) -> &mut Vec<usize> {
        match self {
            Split::Images { set, .. } => &mut set.labels,
            Split::Features(f) => &mut f.labels,
        }
    }

    /// Example `i`, augmented when `rng` is given and the split has augmentation.
    pub fn input<T: Scalar>(&self, i: usize, rng: Option<&mut Rng>) -> Result<Tensor<T>> {
        match self {
            Split::Images { set, norm, augment } => {
                let img = norm.apply(&set.image::<T>(i));
                match rng {
                    Some(rng) => augment.apply(&img, rng),
                    None => Ok(img),
                }
            }
            Split::Features(f) => Ok(f.sample(i)),
        }
    }

    /// Shape of one example as `(sites, dim)` for feature splits.
    pub fn feature_shape(&self) -> Option<(usize, usize)> {
        match self {
            Split::Features(f) => Some((f.sites, f.dim)),
            Split::Images { .. } => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub classes: usize,
}

impl TrainData {
    /// Train/validation/test folds of synthetic feature matrices.
    pub fn from_features(train: FeatureSet, val: FeatureSet, test: FeatureSet) -> Result<Self> {
        let classes = train.classes().max(val.classes()).max(test.classes());
        for f in [&val, &test] {
            if (f.sites, f.dim) != (train.sites, train.dim) {
                return Err(Error::Format("feature folds have different shapes".into()));
            }
        }
        Ok(TrainData { train: Split::Features(train), val: Split::Features(val), test: Split::Features(test), classes })
    }

    /// Holds out the last `val_size` training images for validation and
    /// normalizes with the remaining images' channel means. Limits of 0 keep
    /// everything.
    pub fn from_images(
        train: ImageSet,
        test: ImageSet,
        val_size: usize,
        train_limit: usize,
        test_limit: usize,
        augment: Augment,
        classes: usize,
    ) -> Result<Self> {
        let (mut fit, val) = train.split_tail(val_size)?;
        if train_limit > 0 && train_limit < fit.len() {
            fit = fit.slice(0, train_limit);
        }
        let test = if test_limit > 0 && test_limit < test.len() { test.slice(0, test_limit) } else { test };
        if fit.is_empty() {
            return Err(Error::Config("no training images left after the validation hold-out".into()));
        }
        let norm = Normalizer { mean: fit.channel_means() };
        Ok(TrainData {
            train: Split::Images { set: fit, norm: norm.clone(), augment },
            val: Split::Images { set: val, norm: norm.clone(), augment: Augment::NONE },
            test: Split::Images { set: test, norm, augment: Augment::NONE },
            classes,
        })
    }

    pub fn split(&self, which: crate::config::EvalSplit) -> &Split {
        match which {
            crate::config::EvalSplit::Train => &self.train,
            crate::config::EvalSplit::Val => &self.val,
            crate::config::EvalSplit::Test => &self.test,
        }
    }
}

fn features_to_checkpoint(ck: &mut Checkpoint, prefix: &str, f: &FeatureSet) -> Result<()> {
    ck.insert(format!("{prefix}/features"), Tensor::new([f.len(), f.sites, f.dim], f.features.clone())?);
    ck.insert(format!("{prefix}/labels"), Tensor::vector(f.labels.iter().map(|&l| l as f64).collect()));
    Ok(())
}

fn features_from_checkpoint(ck: &Checkpoint, prefix: &str) -> Result<FeatureSet> {
    let feats = ck.require(&format!("{prefix}/features"))?;
    let labels = ck.require(&format!("{prefix}/labels"))?;
    let &[count, sites, dim] = feats.dims() else {
        return Err(Error::Format(format!("{prefix}/features must be count × sites × dim")));
    };
    if labels.numel() != count {
        return Err(Error::Format(format!("{prefix}: {} labels for {count} samples", labels.numel())));
    }
    let labels = labels
        .data()
        .iter()
        .map(|&l| if l >= 0.0 && l.fract() == 0.0 { Ok(l as usize) } else { Err(Error::Format(format!("bad label {l}"))) })
        .collect::<Result<_>>()?;
    Ok(FeatureSet { sites, dim, features: feats.data().to_vec(), labels })
}

/// Writes feature-matrix folds to a container file.
pub fn save_feature_dataset(path: &Path, train: &FeatureSet, val: &FeatureSet, test: &FeatureSet) -> Result<()> {
    let mut ck = Checkpoint::new();
    features_to_checkpoint(&mut ck, "train", train)?;
    features_to_checkpoint(&mut ck, "val", val)?;
    features_to_checkpoint(&mut ck, "test", test)?;
    ck.save(path)
}

pub fn load_feature_dataset(path: &Path) -> Result<TrainData> {
    let ck = Checkpoint::load(path)?;
    TrainData::from_features(
        features_from_checkpoint(&ck, "train")?,
        features_from_checkpoint(&ck, "val")?,
        features_from_checkpoint(&ck, "test")?,
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TwoPhase {
    pub phase1_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    /// Freeze the backbone for the first epochs, then fine-tune everything.
    pub two_phase: Option<TwoPhase>,
    pub threads: usize,
    /// Record elapsed time in the metrics; off gives byte-stable files.
    pub wall_clock: bool,
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    pub verbose: bool,
}

impl TrainConfig {
    pub fn new(sgd: SgdConfig) -> Self {
        TrainConfig { sgd, two_phase: None, threads: 1, wall_clock: true, out_dir: None, resume: false, verbose: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.val_acc, self.lr, self.wall_seconds
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
}

struct ShardResult<T> {
    loss: f64,
    correct: usize,
    grads: Option<Vec<Tensor<T>>>,
    predictions: Vec<usize>,
}

/// Loss, predictions and (optionally) summed parameter gradients over
/// `items`, processed in order.
fn run_shard<T: Scalar>(
    model: &Model<T>,
    split: &Split,
    items: &[(usize, Option<u64>)],
    want_grads: bool,
) -> Result<ShardResult<T>> {
    let mut out = ShardResult { loss: 0.0, correct: 0, grads: None, predictions: Vec::with_capacity(items.len()) };
    for &(i, aug_seed) in items {
        let mut rng = aug_seed.map(<Rng as rand::SeedableRng>::seed_from_u64);
        let input = split.input::<T>(i, rng.as_mut())?;
        let label = split.labels()[i];
        let mut g = Graph::new();
        let vars = if want_grads { model.params.bind(&mut g) } else { model.params.bind_frozen(&mut g) };
        let x = g.constant(input);
        let logits = model.spec.forward(&mut g, &vars, x)?;
        let pred = argmax(g.value(logits).data());
        let loss = softmax_cross_entropy(&mut g, logits, label)?;
        let lv = g.value(loss).item()?.f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        out.loss += lv;
        out.correct += usize::from(pred == label);
        out.predictions.push(pred);
        if want_grads {
            g.backward(loss)?;
            let grads = vars.grads(&g);
            match &mut out.grads {
                None => out.grads = Some(grads),
                Some(acc) => {
                    for (a, gr) in acc.iter_mut().zip(&grads) {
                        a.accumulate(gr)?;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Splits `items` into at most `threads` contiguous shards, runs them
/// concurrently, and combines results in shard order.
fn run_sharded<T: Scalar>(
    model: &Model<T>,
    split: &Split,
    items: &[(usize, Option<u64>)],
    want_grads: bool,
    threads: usize,
) -> Result<ShardResult<T>> {
    let shards = threads.clamp(1, items.len().max(1));
    let results: Vec<Result<ShardResult<T>>> = if shards == 1 {
        vec![run_shard(model, split, items, want_grads)]
    } else {
        let size = items.len().div_ceil(shards);
        thread::scope(|s| {
            let handles: Vec<_> =
                items.chunks(size).map(|chunk| s.spawn(move || run_shard(model, split, chunk, want_grads))).collect();
            handles.into_iter().map(|h| h.join().expect("worker thread panicked")).collect()
        })
    };
    let mut total = ShardResult { loss: 0.0, correct: 0, grads: None, predictions: Vec::with_capacity(items.len()) };
    for r in results {
        let r = r?;
        total.loss += r.loss;
        total.correct += r.correct;
        total.predictions.extend(r.predictions);
        match (&mut total.grads, r.grads) {
            (None, g) => total.grads = g,
            (Some(acc), Some(g)) => {
                for (a, gr) in acc.iter_mut().zip(&g) {
                    a.accumulate(gr)?;
                }
            }
            (Some(_), None) => {}
        }
    }
    Ok(total)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, split: &Split, classes: usize, threads: usize) -> Result<EvalReport> {
    if split.is_empty() {
        return Err(Error::EmptyInput("evaluation split is empty".into()));
    }
    let items: Vec<(usize, Option<u64>)> = (0..split.len()).map(|i| (i, None)).collect();
    let r = run_sharded(model, split, &items, false, threads)?;
    let mut per_class = vec![(0, 0); classes];
    for (i, &pred) in r.predictions.iter().enumerate() {
        let label = split.labels()[i];
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        per_class[label].1 += 1;
        per_class[label].0 += usize::from(pred == label);
    }
    let n = split.len() as f64;
    Ok(EvalReport { loss: r.loss / n, accuracy: r.correct as f64 / n, per_class })
}

/// Serializes parameters, momentum buffers and `meta` scalars.
pub fn model_checkpoint<T: Scalar>(params: &ParamStore<T>, meta: &[(&str, f64)]) -> Checkpoint {
    let mut ck = Checkpoint::new();
    for (k, v) in meta {
        ck.insert(format!("meta/{k}"), Tensor::scalar(*v));
    }
    for p in params.iter() {
        ck.insert(format!("param/{}", p.name), p.value.cast());
    }
    for p in params.iter() {
        if let Some(v) = p.velocity() {
            ck.insert(format!("velocity/{}", p.name), v.cast());
        }
    }
    ck
}

/// Rebuilds a model for `spec` from the `param/` entries of `ck`.
pub fn model_from_checkpoint<T: Scalar>(spec: &ModelSpec, ck: &Checkpoint) -> Result<Model<T>> {
    let mut store = ParamStore::new();
    for s in spec.param_specs()? {
        let t = ck.require(&format!("param/{}", s.name))?;
        if t.dims() != s.dims.as_slice() {
            return Err(Error::Checkpoint(format!("param/{} has shape {:?}, model expects {:?}", s.name, t.dims(), s.dims)));
        }
        let mut p = crate::optim::Param::new(s.name.clone(), t.cast(), s.manifold, s.role);
        p.set_velocity(ck.get(&format!("velocity/{}", s.name)).map(Tensor::cast));
        store.push(p)?;
    }
    let expected = store.len();
    let found = ck.entries().iter().filter(|(n, _)| n.starts_with("param/")).count();
    if found != expected {
        return Err(Error::Checkpoint(format!("checkpoint has {found} parameters, model expects {expected}")));
    }
    Model::with_params(spec.clone(), store)
}

/// Copies every checkpoint parameter whose name and shape match into `model`
/// (e.g. a pretrained backbone); returns how many were copied.
pub fn load_matching_params<T: Scalar>(model: &mut Model<T>, ck: &Checkpoint) -> usize {
    let mut copied = 0;
    for p in model.params.iter_mut() {
        if let Some(t) = ck.get(&format!("param/{}", p.name)) {
            if t.dims() == p.value.dims() {
                p.value = t.cast();
                copied += 1;
            }
        }
    }
    copied
}

struct RunState {
    next_epoch: usize,
    scheduler: PlateauScheduler,
    phase: usize,
    best_val: f64,
}

fn phase_of(cfg: &TrainConfig, epoch: usize) -> usize {
    match cfg.two_phase {
        Some(tp) if epoch < tp.phase1_epochs => 1,
        Some(_) => 2,
        None => 0,
    }
}

fn scheduler_for(cfg: &TrainConfig, phase: usize) -> PlateauScheduler {
    let lr = match (phase, cfg.two_phase) {
        (1, Some(tp)) => tp.phase1_lr,
        (2, Some(tp)) => tp.phase2_lr,
        _ => cfg.sgd.initial_lr,
    };
    PlateauScheduler::new(lr, cfg.sgd.plateau_factor, cfg.sgd.plateau_patience, cfg.sgd.plateau_threshold)
}

fn resume_state<T: Scalar>(model: &mut Model<T>, cfg: &TrainConfig, dir: &Path) -> Result<RunState> {
    let ck = Checkpoint::load(&dir.join(LAST_CHECKPOINT))?;
    *model = model_from_checkpoint(&model.spec, &ck)?;
    let scheduler = PlateauScheduler {
        lr: ck.scalar("meta/lr")?,
        factor: cfg.sgd.plateau_factor,
        patience: cfg.sgd.plateau_patience,
        threshold: cfg.sgd.plateau_threshold,
        best: ck.scalar("meta/sched_best")?,
        bad_epochs: ck.scalar("meta/sched_bad_epochs")? as usize,
    };
    Ok(RunState {
        next_epoch: ck.scalar("meta/epoch")? as usize + 1,
        scheduler,
        phase: ck.scalar("meta/phase")? as usize,
        best_val: ck.scalar("meta/best_val_loss")?,
    })
}

/// Trains `model` on `data`, optionally in two phases: the backbone is
/// frozen for `phase1_epochs` at `phase1_lr`, then everything is trained at
/// `phase2_lr`. Each phase has its own plateau schedule. Without two phases
/// this is a plain SGD loop.
///
/// With an output directory, metrics rows are appended to `metrics.csv` and
/// `last.ckpt` / `best.ckpt` (lowest validation loss) are written every epoch.
pub fn two_phase_train<T: Scalar>(model: &mut Model<T>, data: &TrainData, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.sgd.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    if let Some(tp) = cfg.two_phase {
        if tp.phase1_epochs > cfg.sgd.max_epochs {
            return Err(Error::Config("phase 1 is longer than the whole run".into()));
        }
    }
    let start = Instant::now();
    let mut state = RunState { next_epoch: 0, scheduler: scheduler_for(cfg, phase_of(cfg, 0)), phase: phase_of(cfg, 0), best_val: f64::INFINITY };
    let metrics_path = cfg.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        if cfg.resume {
            state = resume_state(model, cfg, dir)?;
        } else {
            fs::write(metrics_path.as_ref().expect("set with out_dir"), format!("{METRICS_HEADER}\n"))?;
        }
    } else if cfg.resume {
        return Err(Error::Config("resume needs an output directory".into()));
    }

    let seeds = SeedStream::new(cfg.sgd.seed);
    let mut history = Vec::new();
    for epoch in state.next_epoch..cfg.sgd.max_epochs {
        let phase = phase_of(cfg, epoch);
        if phase != state.phase {
            state.phase = phase;
            state.scheduler = scheduler_for(cfg, phase);
            model.params.clear_momentum();
        }
        model.params.set_all_trainable(true);
        if phase == 1 {
            model.params.set_trainable(Role::Backbone, false);
        }
        if model.params.count_trainable() == 0 {
            return Err(Error::Config(format!("no trainable parameters in phase {phase}")));
        }

        let lr = state.scheduler.lr;
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut seeds.rng_indexed("shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.sgd.batch_size).enumerate() {
            let items: Vec<(usize, Option<u64>)> = batch
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let pos = (b * cfg.sgd.batch_size + k) as u64;
                    (i, Some(seeds.derive("augment", ((epoch as u64) << 32) | pos)))
                })
                .collect();
            let r = run_sharded(model, &data.train, &items, true, cfg.threads)?;
            loss_sum += r.loss;
            let inv = T::one() / T::of(batch.len() as f64);
            let grads: Vec<Tensor<T>> = r.grads.expect("non-empty batch").into_iter().map(|g| g.scale(inv)).collect();
            sgd_step(&mut model.params, &grads, T::of(lr), T::of(cfg.sgd.momentum))?;
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let val = evaluate(model, &data.val, data.classes, cfg.threads)?;
        state.scheduler.observe(val.loss);
        let improved = val.loss < state.best_val;
        if improved {
            state.best_val = val.loss;
        }
        let row = EpochMetrics {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_acc: val.accuracy,
            lr,
            wall_seconds: if cfg.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        if cfg.verbose {
            eprintln!(
                "epoch {epoch}: train_loss {:.4} val_loss {:.4} val_acc {:.4} lr {lr}",
                row.train_loss, row.val_loss, row.val_acc
            );
        }
        if let (Some(dir), Some(mp)) = (&cfg.out_dir, &metrics_path) {
            let mut f = OpenOptions::new().append(true).create(true).open(mp)?;
            writeln!(f, "{}", row.csv_row())?;
            let meta = [
                ("epoch", epoch as f64),
                ("lr", state.scheduler.lr),
                ("sched_best", state.scheduler.best),
                ("sched_bad_epochs", state.scheduler.bad_epochs as f64),
                ("phase", phase as f64),
                ("best_val_loss", state.best_val),
            ];
            let ck = model_checkpoint(&model.params, &meta);
            ck.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        history.push(row);
    }
    model.params.set_all_trainable(true);
    Ok(history)
}
