//! Resource sampling during training and table-style aggregation.

pub mod probes;
mod sampler;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::group_thousands;

pub use probes::{Probe, ProbeRegistry, Quantity};
pub use sampler::{EpochSignal, Sampler};

pub const MIN_INTERVAL: f64 = 0.1;
pub const DEFAULT_INTERVAL: f64 = 1.0;
pub const SAMPLES_HEADER: &str = "t,mem_gb,util_pct,power_w,epoch";
pub const SPANS_HEADER: &str = "epoch,start,end";

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("sample interval {0} s is below the 0.1 s minimum")]
    Interval(f64),
    #[error("a process_memory probe is required")]
    NoMemoryProbe,
    #[error("sampler already started")]
    AlreadyStarted,
    #[error("sampler was never started")]
    NotStarted,
    #[error("sampler thread panicked")]
    SamplerPanicked,
    #[error("no samples to aggregate")]
    Empty,
    #[error("samples line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("{path}: {detail}")]
    Summary { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TelemetryError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Seconds on the sampler clock.
    pub t: f64,
    pub mem_gb: f64,
    pub util_pct: Option<f64>,
    pub power_w: Option<f64>,
    /// Epoch in effect; 0 before the first one starts.
    pub epoch: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSpan {
    pub epoch: u64,
    pub start: f64,
    pub end: f64,
}

impl EpochSpan {
    pub fn seconds(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRun {
    pub interval: f64,
    /// Probe names, in read order.
    pub probes: Vec<String>,
    pub samples: Vec<Sample>,
    pub spans: Vec<EpochSpan>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TelemetryRun {
    /// Samples at full precision; absent values are empty cells.
    pub fn samples_csv(&self) -> String {
        let mut s = format!("{SAMPLES_HEADER}\n");
        for x in &self.samples {
            let _ = writeln!(s, "{},{},{},{},{}", x.t, x.mem_gb, opt(x.util_pct), opt(x.power_w), x.epoch);
        }
        s
    }

    pub fn spans_csv(&self) -> String {
        let mut s = format!("{SPANS_HEADER}\n");
        for x in &self.spans {
            let _ = writeln!(s, "{},{},{}", x.epoch, x.start, x.end);
        }
        s
    }

    pub fn parse_spans_csv(src: &str) -> Result<Vec<EpochSpan>> {
        let mut lines = src.lines().enumerate();
        if lines.next().map(|(_, h)| h.trim()) != Some(SPANS_HEADER) {
            return Err(TelemetryError::Parse {
                line: 1,
                detail: format!("expected header `{SPANS_HEADER}`"),
            });
        }
        lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let bad = || TelemetryError::Parse {
                    line: i + 1,
                    detail: format!("bad span `{l}`"),
                };
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 3 {
                    return Err(bad());
                }
                Ok(EpochSpan {
                    epoch: f[0].parse().map_err(|_| bad())?,
                    start: f[1].parse().map_err(|_| bad())?,
                    end: f[2].parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }

    /// Drops everything recorded after `epoch`, as when training resumes
    /// from that epoch's checkpoint.
    pub fn truncate_after(&mut self, epoch: u64) {
        self.samples.retain(|s| s.epoch <= epoch);
        self.spans.retain(|s| s.epoch <= epoch);
    }

    /// Appends a later run, shifting its clock to start where this one
    /// ends.
    pub fn append(&mut self, later: TelemetryRun) {
        let offset = self
            .samples
            .iter()
            .map(|s| s.t)
            .chain(self.spans.iter().map(|s| s.end))
            .fold(0.0, f64::max);
        self.samples.extend(later.samples.into_iter().map(|s| Sample { t: s.t + offset, ..s }));
        self.spans.extend(later.spans.into_iter().map(|s| EpochSpan {
            start: s.start + offset,
            end: s.end + offset,
            ..s
        }));
        self.interval = later.interval;
        self.probes = later.probes;
    }

    pub fn parse_samples_csv(src: &str) -> Result<Vec<Sample>> {
        let mut lines = src.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == SAMPLES_HEADER => {}
            _ => {
                return Err(TelemetryError::Parse {
                    line: 1,
                    detail: format!("expected header `{SAMPLES_HEADER}`"),
                })
            }
        }
        lines
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let bad = |d: &str| TelemetryError::Parse {
                    line: i + 1,
                    detail: format!("{d}: `{l}`"),
                };
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 5 {
                    return Err(bad("expected 5 fields"));
                }
                let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
                let optional = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
                Ok(Sample {
                    t: num(f[0])?,
                    mem_gb: num(f[1])?,
                    util_pct: optional(f[2])?,
                    power_w: optional(f[3])?,
                    epoch: f[4].parse().map_err(|_| bad("bad epoch"))?,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochAggregate {
    pub epoch: u64,
    pub samples: usize,
    pub avg_mem_gb: Option<f64>,
    pub max_mem_gb: Option<f64>,
    pub avg_util_pct: Option<f64>,
    pub avg_power_w: Option<f64>,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub epochs: Vec<EpochAggregate>,
    pub samples: usize,
    pub avg_mem_gb: f64,
    pub max_mem_gb: f64,
    pub avg_util_pct: Option<f64>,
    pub avg_power_w: Option<f64>,
    /// Sum of epoch durations.
    pub epoch_seconds: f64,
    /// First epoch start to last epoch end.
    pub wall_seconds: f64,
    pub avg_epoch_seconds: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-epoch and whole-run figures. Optional columns average only the
/// samples that have them and stay absent when none do.
pub fn aggregate(run: &TelemetryRun) -> Result<RunAggregate> {
    if run.samples.is_empty() {
        return Err(TelemetryError::Empty);
    }
    let mut by_epoch: BTreeMap<u64, Vec<&Sample>> = BTreeMap::new();
    for s in &run.samples {
        by_epoch.entry(s.epoch).or_default().push(s);
    }
    for span in &run.spans {
        by_epoch.entry(span.epoch).or_default();
    }
    let epochs = by_epoch
        .iter()
        .map(|(&epoch, ss)| EpochAggregate {
            epoch,
            samples: ss.len(),
            avg_mem_gb: mean(ss.iter().map(|s| s.mem_gb)),
            max_mem_gb: ss.iter().map(|s| s.mem_gb).reduce(f64::max),
            avg_util_pct: mean(ss.iter().filter_map(|s| s.util_pct)),
            avg_power_w: mean(ss.iter().filter_map(|s| s.power_w)),
            seconds: run.spans.iter().find(|s| s.epoch == epoch).map(EpochSpan::seconds),
        })
        .collect();
    let epoch_seconds: f64 = run.spans.iter().map(EpochSpan::seconds).sum();
    let wall_seconds = match (run.spans.first(), run.spans.last()) {
        (Some(a), Some(b)) => b.end - a.start,
        _ => 0.0,
    };
    Ok(RunAggregate {
        epochs,
        samples: run.samples.len(),
        avg_mem_gb: mean(run.samples.iter().map(|s| s.mem_gb)).expect("non-empty"),
        max_mem_gb: run.samples.iter().map(|s| s.mem_gb).fold(f64::MIN, f64::max),
        avg_util_pct: mean(run.samples.iter().filter_map(|s| s.util_pct)),
        avg_power_w: mean(run.samples.iter().filter_map(|s| s.power_w)),
        epoch_seconds,
        wall_seconds,
        avg_epoch_seconds: mean(run.spans.iter().map(EpochSpan::seconds)),
    })
}

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

fn dash(v: Option<f64>, decimals: usize, unit: &str) -> String {
    v.map(|x| format!("{x:.decimals$}{unit}")).unwrap_or_else(|| "-".into())
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    out += &line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>());
    for r in rows {
        out += &line(r);
    }
    out
}

impl RunAggregate {
    pub const CSV_HEADER: &'static str = "epoch,samples,avg_mem_gb,max_mem_gb,avg_util_pct,avg_power_w,seconds";

    fn rows(&self) -> Vec<[String; 7]> {
        let mut rows: Vec<[String; 7]> = self
            .epochs
            .iter()
            .map(|e| {
                [
                    e.epoch.to_string(),
                    e.samples.to_string(),
                    cell(e.avg_mem_gb, 4),
                    cell(e.max_mem_gb, 4),
                    cell(e.avg_util_pct, 2),
                    cell(e.avg_power_w, 2),
                    cell(e.seconds, 3),
                ]
            })
            .collect();
        rows.push([
            "all".into(),
            self.samples.to_string(),
            format!("{:.4}", self.avg_mem_gb),
            format!("{:.4}", self.max_mem_gb),
            cell(self.avg_util_pct, 2),
            cell(self.avg_power_w, 2),
            format!("{:.3}", self.epoch_seconds),
        ]);
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in self.rows() {
            s += &r.join(",");
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let header = ["Epoch", "Samples", "Avg Mem (GB)", "Max Mem (GB)", "Avg Util (%)", "Avg Power (W)", "Time (s)"];
        let rows: Vec<Vec<String>> = self
            .rows()
            .into_iter()
            .map(|r| r.into_iter().map(|c| if c.is_empty() { "-".into() } else { c }).collect())
            .collect();
        render_table(&header, &rows)
    }
}

/// One row of the cross-run comparison, stored as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub params: u64,
    pub epochs: usize,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub avg_epoch_seconds: Option<f64>,
    pub avg_mem_gb: Option<f64>,
    pub avg_util_pct: Option<f64>,
    pub avg_power_w: Option<f64>,
}

impl RunSummary {
    /// Copies the resource columns from `agg` unchanged.
    pub fn new(name: &str, params: u64, train_acc: Option<f64>, test_acc: Option<f64>, agg: Option<&RunAggregate>) -> Self {
        Self {
            name: name.to_string(),
            params,
            epochs: agg.map_or(0, |a| a.epochs.iter().filter(|e| e.seconds.is_some()).count()),
            train_acc,
            test_acc,
            avg_epoch_seconds: agg.and_then(|a| a.avg_epoch_seconds),
            avg_mem_gb: agg.map(|a| a.avg_mem_gb),
            avg_util_pct: agg.and_then(|a| a.avg_util_pct),
            avg_power_w: agg.and_then(|a| a.avg_power_w),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("summary serializes") + "\n";
        fs::write(path, json).map_err(|source| TelemetryError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = fs::read_to_string(path).map_err(|source| TelemetryError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&src).map_err(|e| TelemetryError::Summary {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }
}

/// Side-by-side runs ordered by name; missing figures become dashes.
pub struct Comparison {
    rows: Vec<Vec<String>>,
}

pub const COMPARISON_HEADER: [&str; 8] = [
    "Model",
    "Params",
    "Train Acc",
    "Test Acc",
    "Avg Time/epoch",
    "Avg Mem Used",
    "Avg GPU Used",
    "Avg Pow Cons",
];

pub fn compare_runs(runs: &[RunSummary]) -> Comparison {
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let rows = sorted
        .into_iter()
        .map(|r| {
            vec![
                r.name.clone(),
                group_thousands(r.params),
                dash(r.train_acc.map(|a| a * 100.0), 2, "%"),
                dash(r.test_acc.map(|a| a * 100.0), 2, "%"),
                dash(r.avg_epoch_seconds, 3, " s"),
                dash(r.avg_mem_gb, 4, " GB"),
                dash(r.avg_util_pct, 2, "%"),
                dash(r.avg_power_w, 2, " W"),
            ]
        })
        .collect();
    Comparison { rows }
}

impl Comparison {
    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn to_text(&self) -> String {
        render_table(&COMPARISON_HEADER, &self.rows)
    }

    pub fn to_csv(&self) -> String {
        let mut s = COMPARISON_HEADER.join(",") + "\n";
        for r in &self.rows {
            s += &r.iter().map(|c| c.replace(',', "")).collect::<Vec<_>>().join(",");
            s.push('\n');
        }
        s
    }
}
