//! The two-phase training loop: regular contrastive steps on encoders and
//! heads, then meta steps on the feature generators through one-step
//! fast weights.

mod bank;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use bank::MemoryBank;
pub use optim::{Optimizer, OptimizerKind};

use crate::data::{batch_hash, gen_synthetic_multiview, load_manifest, EpochPlan, LoadOptions, SyntheticConfig, ViewBatch, ViewSource};
use crate::diff::{backward, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::losses::{
    column_values, compute_margins, margin_regularization, metaug_objective, similarity_unchecked, BankView, Criterion, FeatureSet,
    MarginVariant, Margins, OUCLConfig, Objective,
};
use crate::model::{
    fast_weights, save_checkpoint, substitute_fast_weights, Bound, Checkpoint, FastWeights, Forward, ModelConfig, ModelSpec, ParamGroup,
    Trainable,
};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Unified loss, feature generators and meta steps.
    Metaug,
    /// Unified loss only; no generators, no meta steps.
    MetaugOuclOnly,
    /// Contrastive (InfoNCE) loss with generators and meta steps.
    MetaugMagOnly,
    /// Contrastive (InfoNCE) loss only.
    Infonce,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Metaug, Method::MetaugOuclOnly, Method::MetaugMagOnly, Method::Infonce];

    pub fn uses_generators(self) -> bool {
        matches!(self, Method::Metaug | Method::MetaugMagOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Metaug => "metaug",
            Method::MetaugOuclOnly => "metaug_oucl_only",
            Method::MetaugMagOnly => "metaug_mag_only",
            Method::Infonce => "infonce",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// A full pass of regular steps, then a full pass of meta steps, per epoch.
    TwoPass,
    /// Regular step then meta step for each batch index.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SyntheticConfig),
    Manifest {
        path: PathBuf,
        #[serde(default)]
        options: LoadOptions,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticConfig::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Box<dyn ViewSource>> {
        match self {
            DatasetSpec::Synthetic(cfg) => Ok(Box::new(gen_synthetic_multiview(cfg)?)),
            DatasetSpec::Manifest { path, options } => Ok(load_manifest(path, options)?.into_source()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for encoders and heads, also used inside the fast weights.
    pub lr: f64,
    /// Step size for the generators.
    pub meta_lr: f64,
    pub alpha: f64,
    pub delta: f64,
    pub oucl: OUCLConfig,
    pub tau: f64,
    pub margin: MarginVariant,
    pub bank_capacity: usize,
    pub bank_k: usize,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub checkpoint_every: usize,
    /// Add augmented-augmented pairs to the augmented loss term.
    pub aug_aug: bool,
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            method: Method::Metaug,
            epochs: 30,
            batch_size: 64,
            lr: 0.05,
            meta_lr: 0.05,
            alpha: 1.0,
            delta: 1e-5,
            oucl: OUCLConfig::default(),
            tau: 0.07,
            margin: MarginVariant::Large,
            bank_capacity: 4096,
            bank_k: 512,
            optimizer: OptimizerKind::Sgd,
            schedule: Schedule::TwoPass,
            checkpoint_every: 10,
            aug_aug: false,
            model: ModelConfig::default(),
            dataset: DatasetSpec::default(),
        }
    }
}

fn config_error(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        reason: reason.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(config_error("alpha", "must be finite and >= 0"));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(config_error("delta", "must be finite and >= 0"));
        }
        for (key, v) in [("lr", self.lr), ("meta_lr", self.meta_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_error(key, "must be finite and >= 0"));
            }
        }
        if !(self.tau > 0.0) {
            return Err(config_error("tau", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(config_error("batch_size", "must be positive"));
        }
        if self.bank_k > self.bank_capacity {
            return Err(config_error("bank_k", "must not exceed bank_capacity"));
        }
        if self.checkpoint_every == 0 {
            return Err(config_error("checkpoint_every", "must be positive"));
        }
        self.oucl.validate().map_err(|e| config_error("oucl", e.to_string()))
    }

    pub fn criterion(&self) -> Criterion {
        match self.method {
            Method::Metaug | Method::MetaugOuclOnly => Criterion::Oucl(self.oucl),
            Method::MetaugMagOnly | Method::Infonce => Criterion::InfoNce { tau: self.tau },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Regular,
    Meta,
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub phase: Phase,
    pub batch: usize,
    pub batch_hash: String,
    /// `L_ori + δ L_aug` at the weights the step differentiates.
    pub loss: f64,
    pub loss_ori: f64,
    pub loss_aug: Option<f64>,
    pub r_sigma: Option<f64>,
    pub loss_meta: Option<f64>,
    pub sigma_plus: Option<f64>,
    pub sigma_minus: Option<f64>,
    pub mean_d_pos: Option<f64>,
    pub mean_d_neg: Option<f64>,
    /// Mean `d(z_i^j, ẑ_i^j)`.
    pub mean_d_self: Option<f64>,
}

/// Hooks called by [`Trainer::run`].
pub trait Observer {
    fn on_step(&mut self, _record: &StepRecord, _before: &ParamGroup, _after: &ParamGroup) -> Result<()> {
        Ok(())
    }

    /// Called with epoch 0 before training and after every finished epoch.
    fn on_epoch(&mut self, _epoch: usize, _params: &ParamGroup) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct NoObserver;

impl Observer for NoObserver {}

const DIVERGENCE_LIMIT: f64 = 1e6;

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean `d(z_i^j, ẑ_i^j)` over samples and views.
fn mean_self_similarity(fwd: &Forward<'_>) -> Option<f64> {
    let mut all = Vec::new();
    for (z, za) in fwd.z.iter().zip(&fwd.z_aug) {
        let (z, za) = (z.value(), za.value());
        for (a, b) in z.rows().into_iter().zip(za.rows()) {
            all.push(similarity_unchecked(
                a.as_slice().expect("row-major"),
                b.as_slice().expect("row-major"),
            ));
        }
    }
    mean(&all)
}

fn similarity_summary(obj: &Objective<'_>) -> String {
    let describe = |name: &str, v: Option<Var<'_>>| {
        let vals = column_values(v);
        let finite: Vec<f64> = vals.iter().copied().filter(|x| x.is_finite()).collect();
        format!(
            "{name}: n={} non-finite={} min={:?} max={:?} mean={:?}",
            vals.len(),
            vals.len() - finite.len(),
            finite.iter().copied().reduce(f64::min),
            finite.iter().copied().reduce(f64::max),
            mean(&finite)
        )
    };
    [
        describe("d_pos", obj.d_pos),
        describe("d_neg", obj.d_neg),
        describe("d_aug_pos", obj.d_aug_pos),
        describe("d_aug_neg", obj.d_aug_neg),
    ]
    .join("; ")
}

/// State of one training run.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub spec: ModelSpec,
    pub params: ParamGroup,
    pub bank: MemoryBank,
    source: &'a dyn ViewSource,
    main_opt: Optimizer,
    meta_opt: Optimizer,
    step: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, source: &'a dyn ViewSource) -> Result<Self> {
        config.validate()?;
        if source.split().train.len() < config.batch_size {
            return Err(config_error(
                "batch_size",
                format!("exceeds the train split size {}", source.split().train.len()),
            ));
        }
        let geometry = source.view_geometry();
        let spec = ModelSpec::build(
            &config.model,
            &source.view_dims(),
            geometry.as_deref(),
            seed::derive_seed(config.seed, "model", 0),
        )?;
        let params = spec.init();
        Ok(Trainer {
            bank: MemoryBank::new(spec.num_views(), config.bank_capacity),
            main_opt: Optimizer::new(config.optimizer, config.lr),
            meta_opt: Optimizer::new(config.optimizer, config.meta_lr),
            config,
            spec,
            params,
            source,
            step: 0,
        })
    }

    pub fn source(&self) -> &dyn ViewSource {
        self.source
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn bank_views(&self, ids: &[usize]) -> Vec<BankView> {
        if self.config.bank_k == 0 {
            return Vec::new();
        }
        let m = self.spec.num_views() as u64;
        (0..self.spec.num_views())
            .map(|j| {
                self.bank
                    .retrieve(j, ids, self.config.bank_k, self.config.seed, self.step * m + j as u64)
            })
            .collect()
    }

    /// Forward pass and combined objective under `params`.
    pub fn objective<'g>(&self, params: &Bound<'g>, batch: &ViewBatch, bank: &[BankView]) -> Result<(Forward<'g>, Objective<'g>)> {
        let with_aug = self.config.method.uses_generators();
        let fwd = self.spec.forward(params, &batch.views, with_aug)?;
        let features = FeatureSet {
            ids: batch.ids.clone(),
            z: fwd.z.clone(),
            z_aug: fwd.z_aug.clone(),
        };
        let delta = if with_aug { self.config.delta } else { 0.0 };
        let obj = metaug_objective(&features, bank, &self.config.criterion(), delta, self.config.aug_aug)?;
        Ok((fwd, obj))
    }

    fn guard(&self, value: f64, obj: &Objective<'_>) -> Result<()> {
        if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step: self.step as usize,
                detail: format!("loss {value}; {}", similarity_summary(obj)),
            });
        }
        Ok(())
    }

    fn guard_params(&self) -> Result<()> {
        let norm = self.params.max_block_norm();
        if !self.params.all_finite() || norm > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step: self.step as usize,
                detail: format!("parameter block norm {norm}"),
            });
        }
        Ok(())
    }

    /// Update encoders and heads on `batch` with the generators frozen, then
    /// push the batch's features into the bank.
    pub fn regular_step(&mut self, batch: &ViewBatch, epoch: usize, t: usize) -> Result<StepRecord> {
        let g = Graph::new();
        let bound = self.params.bind(
            &g,
            Trainable {
                theta: true,
                vartheta: true,
                omega: false,
            },
        );
        let bank = self.bank_views(&batch.ids);
        let (fwd, obj) = self.objective(&bound, batch, &bank)?;
        let loss = obj.total.item();
        self.guard(loss, &obj)?;

        let (d_pos, d_neg) = (column_values(obj.d_pos), column_values(obj.d_neg));
        let margins = compute_margins(&d_pos, &d_neg, self.config.margin).ok();
        let r_sigma =
            margins.map(|m| margin_regularization(&g, obj.d_aug_pos.map(|v| v.detach()), obj.d_aug_neg.map(|v| v.detach()), &m).item());
        let mut record = StepRecord {
            step: self.step,
            epoch,
            phase: Phase::Regular,
            batch: t,
            batch_hash: batch_hash(&batch.ids),
            loss,
            loss_ori: obj.ori.item(),
            loss_aug: obj.aug.map(|a| a.item()),
            r_sigma: r_sigma.filter(|_| self.config.method.uses_generators()),
            loss_meta: None,
            sigma_plus: margins.map(|m| m.sigma_plus),
            sigma_minus: margins.map(|m| m.sigma_minus),
            mean_d_pos: mean(&d_pos),
            mean_d_neg: mean(&d_neg),
            mean_d_self: mean_self_similarity(&fwd),
        };
        let z_values: Vec<Mat> = fwd.z.iter().map(|z| (*z.value()).clone()).collect();

        let vars: Vec<Var<'_>> = bound.theta.iter().chain(&bound.vartheta).flatten().copied().collect();
        let grads: Vec<Mat> = backward(obj.total, &vars, false)?
            .gradients
            .iter()
            .map(|v| (*v.value()).clone())
            .collect();
        let mut blocks: Vec<&mut Mat> = self
            .params
            .theta
            .iter_mut()
            .chain(self.params.vartheta.iter_mut())
            .flatten()
            .collect();
        self.main_opt.step(&mut blocks, &grads);
        self.guard_params()?;

        for (j, z) in z_values.iter().enumerate() {
            self.bank.push(j, &batch.ids, z);
        }
        record.step = self.step;
        self.step += 1;
        Ok(record)
    }

    /// Recorded one-step update of encoders and heads under the combined
    /// objective, with the generators live.
    pub fn compute_fast_weights<'g>(
        &self,
        bound: &Bound<'g>,
        batch: &ViewBatch,
        bank: &[BankView],
    ) -> Result<(FastWeights<'g>, Objective<'g>)> {
        let (_, inner) = self.objective(bound, batch, bank)?;
        let fw = fast_weights(bound, inner.total, self.config.lr)?;
        Ok((fw, inner))
    }

    /// The meta loss `L(θ̊, ϑ̊, ω) + α R_σ` and its pieces, built in `g`.
    pub fn meta_objective<'g>(&self, g: &'g Graph, batch: &ViewBatch, bank: &[BankView]) -> Result<Option<MetaObjective<'g>>> {
        let bound = self.params.bind(g, Trainable::ALL);
        let (fw, inner) = self.compute_fast_weights(&bound, batch, bank)?;
        let ctx = substitute_fast_weights(&bound, &fw)?;
        let (fwd, outer) = self.objective(&ctx, batch, bank)?;
        let margins = match compute_margins(&column_values(outer.d_pos), &column_values(outer.d_neg), self.config.margin) {
            Ok(m) => m,
            Err(e) => {
                log::info!("skipping meta step at step {}: {e}", self.step);
                return Ok(None);
            }
        };
        let r_sigma = margin_regularization(g, outer.d_aug_pos, outer.d_aug_neg, &margins);
        let total = if self.config.alpha == 0.0 {
            outer.total
        } else {
            outer.total.add(r_sigma.scale(self.config.alpha))?
        };
        Ok(Some(MetaObjective {
            bound,
            inner_loss: inner.total,
            forward: fwd,
            outer,
            margins,
            r_sigma,
            total,
        }))
    }

    /// Update the generators through the fast weights; encoders and heads are
    /// left untouched. Returns `None` when the batch has no negatives.
    pub fn meta_step(&mut self, batch: &ViewBatch, epoch: usize, t: usize) -> Result<Option<StepRecord>> {
        let g = Graph::new();
        let bank = self.bank_views(&batch.ids);
        let Some(meta) = self.meta_objective(&g, batch, &bank)? else {
            return Ok(None);
        };
        let loss_meta = meta.total.item();
        self.guard(loss_meta, &meta.outer)?;
        let (d_pos, d_neg) = (column_values(meta.outer.d_pos), column_values(meta.outer.d_neg));
        let record = StepRecord {
            step: self.step,
            epoch,
            phase: Phase::Meta,
            batch: t,
            batch_hash: batch_hash(&batch.ids),
            loss: meta.outer.total.item(),
            loss_ori: meta.outer.ori.item(),
            loss_aug: meta.outer.aug.map(|a| a.item()),
            r_sigma: Some(meta.r_sigma.item()),
            loss_meta: Some(loss_meta),
            sigma_plus: Some(meta.margins.sigma_plus),
            sigma_minus: Some(meta.margins.sigma_minus),
            mean_d_pos: mean(&d_pos),
            mean_d_neg: mean(&d_neg),
            mean_d_self: mean_self_similarity(&meta.forward),
        };
        let omega = meta.bound.omega_vars();
        let grads: Vec<Mat> = backward(meta.total, &omega, false)?
            .gradients
            .iter()
            .map(|v| (*v.value()).clone())
            .collect();
        let mut blocks: Vec<&mut Mat> = self.params.omega.iter_mut().flatten().collect();
        self.meta_opt.step(&mut blocks, &grads);
        self.guard_params()?;
        self.step += 1;
        Ok(Some(record))
    }

    /// Train for `config.epochs` epochs.
    pub fn run(&mut self, observer: &mut dyn Observer) -> Result<()> {
        observer.on_epoch(0, &self.params)?;
        let n = self.config.batch_size;
        let train = self.source.split().train.clone();
        let meta = self.config.method.uses_generators();
        for epoch in 1..=self.config.epochs {
            let plan = EpochPlan::new(&train, n, seed::derive_seed(self.config.seed, "epoch", epoch as u64))?;
            let meta_seed = seed::derive_seed(self.config.seed, "meta-epoch", epoch as u64);
            let meta_plan = EpochPlan::new(&train, n, meta_seed)?;
            let fetch = |plan: &EpochPlan, t: usize, seed: u64| -> Result<Option<ViewBatch>> {
                plan.batch_ids(t)
                    .map(|ids| self.source.views(ids, Some(seed::derive_seed(seed, "batch-augment", t as u64))))
                    .transpose()
            };
            let regular_seed = seed::derive_seed(self.config.seed, "epoch", epoch as u64);
            match self.config.schedule {
                Schedule::TwoPass => {
                    for t in 0..plan.num_batches() {
                        let batch = fetch(&plan, t, regular_seed)?.expect("t < num_batches");
                        self.observed_regular(&batch, epoch, t, observer)?;
                    }
                    if meta {
                        for t in 0..meta_plan.num_batches() {
                            let batch = fetch(&meta_plan, t, meta_seed)?.expect("t < num_batches");
                            self.observed_meta(&batch, epoch, t, observer)?;
                        }
                    }
                }
                Schedule::Interleaved => {
                    for t in 0..plan.num_batches() {
                        let batch = fetch(&plan, t, regular_seed)?.expect("t < num_batches");
                        self.observed_regular(&batch, epoch, t, observer)?;
                        if meta {
                            let batch = fetch(&meta_plan, t, meta_seed)?.expect("same batch count");
                            self.observed_meta(&batch, epoch, t, observer)?;
                        }
                    }
                }
            }
            observer.on_epoch(epoch, &self.params)?;
        }
        Ok(())
    }

    fn observed_regular(&mut self, batch: &ViewBatch, epoch: usize, t: usize, observer: &mut dyn Observer) -> Result<()> {
        let before = self.params.clone();
        let record = self.regular_step(batch, epoch, t)?;
        observer.on_step(&record, &before, &self.params)
    }

    fn observed_meta(&mut self, batch: &ViewBatch, epoch: usize, t: usize, observer: &mut dyn Observer) -> Result<()> {
        let before = self.params.clone();
        if let Some(record) = self.meta_step(batch, epoch, t)? {
            observer.on_step(&record, &before, &self.params)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, epoch: usize) -> Result<Checkpoint> {
        Checkpoint::new(self.spec.clone(), self.params.clone(), self.config.seed, self.step, epoch)
    }
}

/// Pieces of the meta loss for one batch.
pub struct MetaObjective<'g> {
    pub bound: Bound<'g>,
    pub inner_loss: Var<'g>,
    pub forward: Forward<'g>,
    pub outer: Objective<'g>,
    pub margins: Margins,
    pub r_sigma: Var<'g>,
    pub total: Var<'g>,
}

/// Encoder/head gradients of the regular objective on `batch` (generators frozen).
pub fn regular_gradients(trainer: &Trainer<'_>, batch: &ViewBatch) -> Result<Vec<Mat>> {
    let g = Graph::new();
    let bound = trainer.params.bind(
        &g,
        Trainable {
            theta: true,
            vartheta: true,
            omega: false,
        },
    );
    let bank = trainer.bank_views(&batch.ids);
    let (_, obj) = trainer.objective(&bound, batch, &bank)?;
    let vars: Vec<Var<'_>> = bound.theta.iter().chain(&bound.vartheta).flatten().copied().collect();
    Ok(backward(obj.total, &vars, false)?
        .gradients
        .iter()
        .map(|v| (*v.value()).clone())
        .collect())
}

/// Writes `metrics.jsonl` and epoch checkpoints into a run directory.
pub struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    spec: ModelSpec,
    seed: u64,
    every: usize,
    last_epoch: usize,
    steps: u64,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_{epoch:04}.ckpt"))
}

/// The highest-epoch checkpoint in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let entries = fs::read_dir(dir).map_err(|_| Error::MissingArtifact(dir.to_path_buf()))?;
    entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint_") && n.ends_with(".ckpt"))
        })
        .max()
        .ok_or_else(|| Error::MissingArtifact(dir.join("checkpoint_*.ckpt")))
}

impl RunWriter {
    pub fn new(dir: &Path, config: &TrainConfig, spec: &ModelSpec) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, serde_json::to_vec_pretty(config)?).map_err(|e| Error::io(&cfg_path, e))?;
        let mpath = dir.join(METRICS_FILE);
        let metrics = BufWriter::new(File::create(&mpath).map_err(|e| Error::io(&mpath, e))?);
        Ok(RunWriter {
            dir: dir.to_path_buf(),
            metrics,
            spec: spec.clone(),
            seed: config.seed,
            every: config.checkpoint_every,
            last_epoch: config.epochs,
            steps: 0,
        })
    }

    fn write_checkpoint(&self, epoch: usize, params: &ParamGroup) -> Result<()> {
        let ckpt = Checkpoint::new(self.spec.clone(), params.clone(), self.seed, self.steps, epoch)?;
        save_checkpoint(&checkpoint_path(&self.dir, epoch), &ckpt)
    }
}

impl Observer for RunWriter {
    fn on_step(&mut self, record: &StepRecord, _: &ParamGroup, _: &ParamGroup) -> Result<()> {
        self.steps = record.step + 1;
        let path = self.dir.join(METRICS_FILE);
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n").map_err(|e| Error::io(&path, e))
    }

    fn on_epoch(&mut self, epoch: usize, params: &ParamGroup) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        self.metrics.flush().map_err(|e| Error::io(&path, e))?;
        if epoch == 0 || epoch % self.every == 0 || epoch == self.last_epoch {
            self.write_checkpoint(epoch, params)?;
        }
        Ok(())
    }
}

/// Outcome of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub spec: ModelSpec,
    pub params: ParamGroup,
    pub records: Vec<StepRecord>,
}

struct Collect<'o> {
    records: Vec<StepRecord>,
    inner: Option<&'o mut dyn Observer>,
}

impl Observer for Collect<'_> {
    fn on_step(&mut self, record: &StepRecord, before: &ParamGroup, after: &ParamGroup) -> Result<()> {
        self.records.push(record.clone());
        match self.inner.as_deref_mut() {
            Some(o) => o.on_step(record, before, after),
            None => Ok(()),
        }
    }

    fn on_epoch(&mut self, epoch: usize, params: &ParamGroup) -> Result<()> {
        match self.inner.as_deref_mut() {
            Some(o) => o.on_epoch(epoch, params),
            None => Ok(()),
        }
    }
}

/// Train on `source`; when `run_dir` is given, write the resolved config,
/// metric log and checkpoints there.
pub fn train(config: &TrainConfig, source: &dyn ViewSource, run_dir: Option<&Path>) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(config.clone(), source)?;
    let mut writer = match run_dir {
        Some(dir) => Some(RunWriter::new(dir, config, &trainer.spec)?),
        None => None,
    };
    let mut collect = Collect {
        records: Vec::new(),
        inner: writer.as_mut().map(|w| w as &mut dyn Observer),
    };
    trainer.run(&mut collect)?;
    let records = collect.records;
    Ok(TrainOutput {
        spec: trainer.spec,
        params: trainer.params,
        records,
    })
}
