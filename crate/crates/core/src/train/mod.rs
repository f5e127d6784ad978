//! Training loop, evaluation and the metrics history.

mod history;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchGraph;
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, Model, ModelError, Optimizer, OptimizerKind, RngState};
use crate::tensor::TensorError;
use crate::tiles::{load_batches, DatasetManifest, Split, TilesError};

pub use history::{emit_history, EpochRecord, TrainHistory, HISTORY_HEADER};

/// Probability above which a tile counts as defective.
pub const DECISION_THRESHOLD: f32 = 0.5;
pub const LATEST_FILE: &str = "LATEST";
const META_FORMAT: &str = "edgefire-train/1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: u64, batch: usize, detail: String },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: u64,
        batch: usize,
        source: ModelError,
    },
    #[error("model input is {got:?}; tiles need [3, side, side]")]
    Shape { got: [usize; 3] },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("metrics history: {0}")]
    History(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tiles(#[from] TilesError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub dropout: f64,
    /// Root of every random stream: initialization, epoch order, dropout.
    pub seed: u64,
    /// Periodic checkpoint every this many epochs (0 disables).
    pub checkpoint_every: u64,
    /// Telemetry sample interval in seconds.
    pub telemetry_interval: f64,
    /// Batches decoded ahead of the step.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 60,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            dropout: 0.2,
            seed: 0,
            checkpoint_every: 5,
            telemetry_interval: 1.0,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.telemetry_interval >= 0.1) {
            return bad(format!("telemetry_interval {} below 0.1 s", self.telemetry_interval));
        }
        Ok(())
    }

    /// Reads `key = value` pairs, either top level or under `[train]`.
    pub fn from_toml(src: &str) -> Result<Self> {
        let table: toml::Table = src.parse().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        let section = match table.get("train") {
            Some(toml::Value::Table(t)) => t.clone(),
            Some(_) => return Err(TrainError::Config("`train` must be a table".into())),
            None => table,
        };
        let cfg: Self = section.try_into().map_err(|e: toml::de::Error| TrainError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn init_seed(&self) -> u64 {
        self.seed
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.seed ^ 0x5eed_0f_0bde_7a11
    }

    fn dropout_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        rng
    }

    /// Fields that must not change across a resume.
    fn trajectory(&self) -> (usize, OptimizerKind, u32, u64, u64) {
        (
            self.batch_size,
            self.optimizer,
            self.learning_rate.to_bits(),
            self.dropout.to_bits(),
            self.seed,
        )
    }
}

/// Hooks called from the training thread.
pub trait TrainObserver {
    fn epoch_started(&mut self, _epoch: u64) {}
    fn batch_finished(&mut self, _epoch: u64, _batch: usize, _loss: f32) {}
    fn epoch_finished(&mut self, _row: &EpochRecord) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

fn tile_side(model: &Model) -> Result<u32> {
    match model.input_dims() {
        [3, h, w] if h == w => Ok(h as u32),
        got => Err(TrainError::Shape { got }),
    }
}

/// Binary cross-entropy of one probability, clamped away from 0 and 1.
pub fn bce(p: f32, y: f32) -> f64 {
    let p = f64::from(p).clamp(1e-7, 1.0 - 1e-7);
    let y = f64::from(y);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Eval-mode loss and accuracy over `split`, in manifest order.
pub fn evaluate(model: &Model, root: &Path, manifest: &DatasetManifest, split: Split, batch_size: usize) -> Result<EvalResult> {
    let side = tile_side(model)?;
    let iter = load_batches(root, manifest, split, batch_size, 0, 0)?.in_order().with_side(side);
    let (mut loss, mut correct, mut count) = (0.0, 0usize, 0usize);
    for batch in iter {
        let batch = batch?;
        let probs = model.forward(&batch.images)?;
        for (&p, &y) in probs.data().iter().zip(&batch.labels) {
            loss += bce(p, y);
            correct += usize::from((p > DECISION_THRESHOLD) == (y > 0.5));
            count += 1;
        }
    }
    Ok(EvalResult {
        loss: loss / count as f64,
        accuracy: correct as f64 / count as f64,
        count,
    })
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    config: TrainConfig,
    history: TrainHistory,
    graph: String,
}

/// What a checkpoint carries besides tensors.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub config: TrainConfig,
    pub history: TrainHistory,
    pub epoch: u64,
}

/// Loads a trainer checkpoint; the architecture travels inside it.
pub fn load_trained(path: &Path) -> Result<TrainedModel> {
    let ckpt = load_checkpoint(path)?;
    let (graph, meta) = parse_meta(&ckpt)?;
    Ok(TrainedModel {
        model: Model::from_checkpoint(&graph, &ckpt)?,
        config: meta.config,
        history: meta.history,
        epoch: ckpt.epoch,
    })
}

fn parse_meta(ckpt: &Checkpoint) -> Result<(ArchGraph, Meta)> {
    let meta: Meta = serde_json::from_str(&ckpt.meta).map_err(|e| TrainError::Resume(format!("checkpoint meta: {e}")))?;
    if meta.format != META_FORMAT {
        return Err(TrainError::Resume(format!("unknown checkpoint meta format `{}`", meta.format)));
    }
    let graph = ArchGraph::from_text(&meta.graph).map_err(ModelError::from)?;
    Ok((graph, meta))
}

/// How a [`Trainer::run`] ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunEnd {
    Completed,
    /// Stopped by [`Trainer::halt_after`] without a final checkpoint, the
    /// way an interrupted process would.
    Halted { epoch: u64 },
}

pub struct Trainer {
    model: Model,
    optimizer: Optimizer,
    config: TrainConfig,
    history: TrainHistory,
    rng: ChaCha8Rng,
    checkpoints: Option<PathBuf>,
    halt_after: Option<u64>,
}

impl Trainer {
    /// Fresh run for `model` (compiled by the caller, typically with
    /// `config.init_seed()`).
    pub fn new(mut model: Model, config: TrainConfig) -> Result<Self> {
        config.check()?;
        tile_side(&model)?;
        model.set_dropout(config.dropout)?;
        Ok(Self {
            model,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
            rng: config.dropout_rng(),
            config,
            history: TrainHistory::default(),
            checkpoints: None,
            halt_after: None,
        })
    }

    /// Continues from `ckpt`. Only `epochs`, the checkpoint cadence, the
    /// telemetry interval and the prefetch depth may differ from the
    /// checkpointed config.
    pub fn resume(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.check()?;
        let (graph, meta) = parse_meta(ckpt)?;
        if meta.config.trajectory() != config.trajectory() {
            return Err(TrainError::Resume(format!(
                "config differs from the checkpointed run:\n{}\nvs\n{}",
                meta.config.to_toml(),
                config.to_toml()
            )));
        }
        if meta.history.len() as u64 != ckpt.epoch {
            return Err(TrainError::Resume(format!(
                "checkpoint records {} epochs but carries {} history rows",
                ckpt.epoch,
                meta.history.len()
            )));
        }
        let model = Model::from_checkpoint(&graph, ckpt)?;
        let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
        optimizer.restore(ckpt.optimizer.clone());
        Ok(Self {
            model,
            optimizer,
            rng: ckpt.rng.restore(),
            config,
            history: meta.history,
            checkpoints: None,
            halt_after: None,
        })
    }

    /// Resumes from the checkpoint named in `dir/LATEST`.
    pub fn resume_latest(dir: &Path, config: TrainConfig) -> Result<Self> {
        let path = latest_checkpoint(dir)?;
        let t = Self::resume(&load_checkpoint(&path)?, config)?;
        Ok(t.with_checkpoints(dir))
    }

    pub fn with_checkpoints(mut self, dir: &Path) -> Self {
        self.checkpoints = Some(dir.to_path_buf());
        self
    }

    /// Stops once `epochs` epochs are complete, skipping the final
    /// checkpoint.
    pub fn halt_after(mut self, epochs: u64) -> Self {
        self.halt_after = Some(epochs);
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u64 {
        self.history.len() as u64
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = Meta {
            format: META_FORMAT.into(),
            config: self.config.clone(),
            history: self.history.clone(),
            graph: self.model.graph().to_text(),
        };
        self.model.to_checkpoint(
            self.optimizer.state(),
            self.epoch(),
            RngState::capture(&self.rng),
            serde_json::to_string(&meta).expect("meta serializes"),
        )
    }

    fn save(&self, name: &str) -> Result<()> {
        let Some(dir) = &self.checkpoints else { return Ok(()) };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_checkpoint(&self.checkpoint(), &dir.join(name))?;
        let latest = dir.join(LATEST_FILE);
        fs::write(&latest, format!("{name}\n")).map_err(io_err(&latest))
    }

    /// One pass over the train split followed by validation.
    pub fn run_epoch(&mut self, root: &Path, manifest: &DatasetManifest, observer: &mut dyn TrainObserver) -> Result<EpochRecord> {
        let epoch = self.epoch() + 1;
        observer.epoch_started(epoch);
        let start = Instant::now();
        let side = tile_side(&self.model)?;
        let batches = load_batches(root, manifest, Split::Train, self.config.batch_size, self.config.shuffle_seed(), epoch - 1)?
            .with_side(side)
            .prefetch(self.config.prefetch);
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (b, batch) in batches.enumerate() {
            let batch = batch?;
            let (out, grads) = self.model.step(&batch.images, &batch.labels, &mut self.rng).map_err(|e| match e {
                ModelError::Tensor(TensorError::NonFinite { op }) => TrainError::NonFinite {
                    epoch,
                    batch: b + 1,
                    detail: format!("{op} produced a non-finite value"),
                },
                source => TrainError::Step {
                    epoch,
                    batch: b + 1,
                    source,
                },
            })?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: b + 1,
                    detail: format!("loss {}", out.loss),
                });
            }
            self.optimizer.step(self.model.params_mut(), &grads)?;
            let n = batch.labels.len();
            loss_sum += f64::from(out.loss) * n as f64;
            seen += n;
            correct += out
                .probs
                .iter()
                .zip(&batch.labels)
                .filter(|(&p, &y)| (p > DECISION_THRESHOLD) == (y > 0.5))
                .count();
            observer.batch_finished(epoch, b + 1, out.loss);
        }
        let val = evaluate(&self.model, root, manifest, Split::Val, self.config.batch_size)?;
        let row = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            seconds: start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE),
        };
        self.history.rows.push(row);

        if self.config.checkpoint_every > 0 && epoch % self.config.checkpoint_every == 0 {
            self.save(&format!("epoch_{epoch:04}.ckpt"))?;
        }
        if self.history.best().map(|b| b.epoch) == Some(epoch) {
            self.save("best.ckpt")?;
        }
        observer.epoch_finished(&row);
        Ok(row)
    }

    /// Trains until `config.epochs` epochs are complete, then writes
    /// `last.ckpt`.
    pub fn run(&mut self, root: &Path, manifest: &DatasetManifest, observer: &mut dyn TrainObserver) -> Result<RunEnd> {
        if manifest.split(Split::Val).next().is_none() {
            return Err(TilesError::EmptySplit(Split::Val).into());
        }
        while self.epoch() < self.config.epochs {
            self.run_epoch(root, manifest, observer)?;
            if self.halt_after == Some(self.epoch()) && self.epoch() < self.config.epochs {
                return Ok(RunEnd::Halted { epoch: self.epoch() });
            }
        }
        self.save("last.ckpt")?;
        Ok(RunEnd::Completed)
    }
}

/// The checkpoint named by `dir/LATEST`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    let pointer = dir.join(LATEST_FILE);
    let name = fs::read_to_string(&pointer).map_err(io_err(&pointer))?;
    let name = name.trim();
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(TrainError::Resume(format!("{} does not name a checkpoint", pointer.display())));
    }
    Ok(dir.join(name))
}

/// Compiles `graph` with the config's seed and trains it to completion.
pub fn train(graph: &ArchGraph, root: &Path, manifest: &DatasetManifest, config: &TrainConfig) -> Result<(Model, TrainHistory)> {
    let model = Model::compile(graph, config.init_seed())?;
    let mut t = Trainer::new(model, config.clone())?;
    t.run(root, manifest, &mut NoObserver)?;
    let history = t.history.clone();
    Ok((t.into_model(), history))
}
