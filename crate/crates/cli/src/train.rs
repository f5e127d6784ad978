use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use edgefire::arch::{build_proposed, build_xception_baseline, count_params, ArchGraph};
use edgefire::model::{Model, OptimizerKind};
use edgefire::telemetry::{aggregate, EpochSignal, ProbeRegistry, RunSummary, Sampler, TelemetryRun};
use edgefire::tiles::{read_manifest, DatasetManifest, Split, MANIFEST_FILE};
use edgefire::train::{emit_history, evaluate, load_trained, EpochRecord, RunEnd, TrainConfig, TrainError, TrainObserver, Trainer};
use serde::{Deserialize, Serialize};

use crate::usage;

pub const ECHO_FILE: &str = "config.echo";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const SPANS_FILE: &str = "epochs.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "run.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ArchChoice {
    Proposed,
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub data: PathBuf,
    pub manifest_digest: String,
    pub version: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: String::new(),
            data: PathBuf::new(),
            manifest_digest: String::new(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchChoice,
    /// Divides every channel width; 1 trains the full graph.
    pub width_div: usize,
    pub input_side: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: ArchChoice::Proposed,
            width_div: 1,
            input_side: 224,
        }
    }
}

impl ModelSection {
    pub fn graph(&self) -> Result<ArchGraph> {
        let mut g = match self.arch {
            ArchChoice::Proposed => build_proposed()?,
            ArchChoice::Baseline => build_xception_baseline(),
        };
        if self.width_div > 1 {
            g = g.width_scaled(self.width_div)?;
        }
        g.with_input_side(self.input_side).map_err(|e| usage(e.to_string()))
    }
}

/// Every effective setting of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&src).map_err(|e| usage(format!("{}: {e}", path.display())))
    }

    pub fn to_echo(&self) -> String {
        format!(
            "# effective configuration of this run; `edgefire train --resume --out <dir>` reads it back\n{}",
            toml::to_string(self).expect("config serializes")
        )
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory written by `dataset gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// TOML file with optional [run], [model] and [train] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue the run in --out from its latest checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, value_enum)]
    pub arch: Option<ArchChoice>,
    #[arg(long)]
    pub width_div: Option<usize>,
    #[arg(long)]
    pub input_side: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerChoice>,
    #[arg(long)]
    pub learning_rate: Option<f32>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub telemetry_interval: Option<f64>,
    #[arg(long)]
    pub prefetch: Option<usize>,
    /// Stop after this many epochs without the final checkpoint.
    #[arg(long)]
    pub halt_after: Option<u64>,
}

impl TrainArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($flag:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $dst = v; })*
            };
        }
        set! {
            name => cfg.run.name,
            data => cfg.run.data,
            arch => cfg.model.arch,
            width_div => cfg.model.width_div,
            input_side => cfg.model.input_side,
            epochs => cfg.train.epochs,
            batch_size => cfg.train.batch_size,
            learning_rate => cfg.train.learning_rate,
            dropout => cfg.train.dropout,
            seed => cfg.train.seed,
            checkpoint_every => cfg.train.checkpoint_every,
            telemetry_interval => cfg.train.telemetry_interval,
            prefetch => cfg.train.prefetch,
        }
        if let Some(o) = self.optimizer {
            cfg.train.optimizer = match o {
                OptimizerChoice::Adam => OptimizerKind::Adam,
                OptimizerChoice::Sgd => OptimizerKind::Sgd,
            };
        }
    }
}

/// Per-epoch progress line plus the telemetry epoch marker.
struct Progress {
    signal: EpochSignal,
    total: u64,
}

impl TrainObserver for Progress {
    fn epoch_started(&mut self, epoch: u64) {
        self.signal.begin_epoch(epoch);
    }

    fn epoch_finished(&mut self, r: &EpochRecord) {
        self.signal.end_epoch(r.epoch);
        println!(
            "epoch {}/{}  train_loss {:.4}  train_acc {:.4}  val_loss {:.4}  val_acc {:.4}  {:.1}s",
            r.epoch, self.total, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.seconds
        );
    }
}

fn train_error(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::Config(m) => usage(m),
        e => e.into(),
    }
}

fn load_dataset(data: &Path) -> Result<DatasetManifest> {
    let path = data.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(usage(format!("{} has no {MANIFEST_FILE}; run `dataset gen` first", data.display())));
    }
    Ok(read_manifest(&path)?)
}

fn previous_telemetry(out: &Path) -> Result<TelemetryRun> {
    let (samples, spans) = (out.join(TELEMETRY_FILE), out.join(SPANS_FILE));
    if !samples.is_file() {
        return Ok(TelemetryRun::default());
    }
    let mut run = TelemetryRun {
        samples: TelemetryRun::parse_samples_csv(&fs::read_to_string(&samples)?)?,
        ..TelemetryRun::default()
    };
    if spans.is_file() {
        run.spans = TelemetryRun::parse_spans_csv(&fs::read_to_string(&spans)?)?;
    }
    Ok(run)
}

pub fn run_train(args: TrainArgs) -> Result<()> {
    let out = args.out.clone();
    let echo = out.join(ECHO_FILE);
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let mut cfg = if args.resume {
        if !echo.is_file() {
            return Err(usage(format!("{} holds no run to resume", out.display())));
        }
        RunConfig::read(&echo)?
    } else {
        if ckpt_dir.exists() {
            return Err(usage(format!("{} already holds a run; pass --resume to continue it", out.display())));
        }
        match &args.config {
            Some(p) => RunConfig::read(p)?,
            None => RunConfig::default(),
        }
    };
    args.apply(&mut cfg);
    if cfg.run.data.as_os_str().is_empty() {
        return Err(usage("--data is required"));
    }
    if cfg.run.name.is_empty() {
        cfg.run.name = out.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned());
    }
    cfg.train.check().map_err(train_error)?;
    if cfg.model.width_div == 0 || cfg.model.input_side < 32 {
        return Err(usage("width_div must be at least 1 and input_side at least 32"));
    }

    let manifest = load_dataset(&cfg.run.data)?;
    cfg.run.data = fs::canonicalize(&cfg.run.data)?;
    let data = cfg.run.data.clone();
    let digest = manifest.digest();
    if args.resume && cfg.run.manifest_digest != digest {
        bail!("dataset manifest changed since the run started ({} vs {digest})", cfg.run.manifest_digest);
    }
    cfg.run.manifest_digest = digest;
    let graph = cfg.model.graph()?;
    let params = count_params(&graph)?.total;

    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    fs::write(&echo, cfg.to_echo())?;
    fs::write(out.join(MANIFEST_FILE), manifest.to_jsonl())?;

    let (mut trainer, mut telemetry) = if args.resume {
        let t = Trainer::resume_latest(&ckpt_dir, cfg.train.clone()).map_err(train_error)?;
        let mut prev = previous_telemetry(&out)?;
        prev.truncate_after(t.epoch());
        println!("resuming {} at epoch {}", cfg.run.name, t.epoch());
        (t, prev)
    } else {
        let model = Model::compile(&graph, cfg.train.init_seed())?;
        let t = Trainer::new(model, cfg.train.clone()).map_err(train_error)?.with_checkpoints(&ckpt_dir);
        (t, TelemetryRun::default())
    };
    if let Some(n) = args.halt_after {
        trainer = trainer.halt_after(n);
    }

    let mut sampler = Sampler::new(cfg.train.telemetry_interval, ProbeRegistry::default().build_all())?;
    let mut progress = Progress {
        signal: sampler.signal(),
        total: cfg.train.epochs,
    };
    sampler.start()?;
    let end = trainer.run(&data, &manifest, &mut progress);
    telemetry.append(sampler.stop()?);
    fs::write(out.join(TELEMETRY_FILE), telemetry.samples_csv())?;
    fs::write(out.join(SPANS_FILE), telemetry.spans_csv())?;
    if !trainer.history().is_empty() {
        emit_history(trainer.history(), &out.join(METRICS_FILE))?;
    }
    match end.map_err(train_error)? {
        RunEnd::Halted { epoch } => {
            println!("halted after epoch {epoch}; continue with --resume");
            return Ok(());
        }
        RunEnd::Completed => {}
    }

    let bs = cfg.train.batch_size;
    let train_acc = evaluate(trainer.model(), &data, &manifest, Split::Train, bs)?.accuracy;
    let test = match manifest.split(Split::Test).next() {
        Some(_) => Some(evaluate(trainer.model(), &data, &manifest, Split::Test, bs)?),
        None => None,
    };
    let agg = aggregate(&telemetry)?;
    let summary = RunSummary::new(&cfg.run.name, params, Some(train_acc), test.map(|t| t.accuracy), Some(&agg));
    summary.save(&out.join(SUMMARY_FILE))?;

    let mut report = String::new();
    let _ = writeln!(report, "run {}  ({} parameters)", cfg.run.name, params);
    let _ = writeln!(report, "epochs {}", trainer.history().len());
    if let Some(b) = trainer.history().best() {
        let _ = writeln!(report, "best epoch {} val_loss {:.4} val_acc {:.4}", b.epoch, b.val_loss, b.val_acc);
    }
    let _ = writeln!(report, "train accuracy {train_acc:.4}");
    match test {
        Some(t) => {
            let _ = writeln!(report, "test loss {:.4} accuracy {:.4}", t.loss, t.accuracy);
        }
        None => report.push_str("test split empty\n"),
    }
    let _ = writeln!(report, "\n{}", agg.to_table());
    fs::write(out.join(REPORT_FILE), &report)?;
    print!("{report}");
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory written by `dataset gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    if args.batch_size == 0 {
        return Err(usage("--batch-size must be at least 1"));
    }
    let manifest = load_dataset(&args.data)?;
    let trained = load_trained(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    let r = evaluate(&trained.model, &args.data, &manifest, args.split, args.batch_size)?;
    println!("{} loss {:.4} accuracy {:.4} ({} tiles)", args.split, r.loss, r.accuracy, r.count);
    Ok(())
}
