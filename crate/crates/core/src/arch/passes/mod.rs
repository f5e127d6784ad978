//! Pure graph-to-graph rewrites. Each pass is also available as a [`Pass`]
//! trait object so pipelines can be assembled by name at runtime.

mod channels;
mod fire;
mod strategy1;

pub use channels::{apply_channel_reduction, ChannelReduction, ChannelReductionPass};
pub use fire::{rewrite_fire_modules, FirePass, SQUEEZE_RATIO};
pub use strategy1::{apply_strategy1, Strategy1Pass};

use super::{reinfer_channels, validate, ArchError, ArchGraph, PassRecord, Result};

pub trait Pass: Send + Sync {
    /// Registry key, also the name recorded in the graph's pass ledger.
    fn name(&self) -> &'static str;

    fn describe(&self) -> String;

    /// Returns a new graph; `graph` is never modified.
    fn apply(&self, graph: &ArchGraph) -> Result<ArchGraph>;
}

/// Name-keyed collection of passes.
#[derive(Default)]
pub struct PassRegistry {
    entries: Vec<Box<dyn Pass>>,
}

impl PassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `strategy1`, `channel-reduce` (with `reduction`) and `fire`.
    pub fn with_defaults(reduction: ChannelReduction) -> Self {
        let mut r = Self::new();
        r.register(Box::new(Strategy1Pass));
        r.register(Box::new(ChannelReductionPass(reduction)));
        r.register(Box::new(FirePass));
        r
    }

    /// Adds `pass`, replacing any pass registered under the same name.
    pub fn register(&mut self, pass: Box<dyn Pass>) {
        self.entries.retain(|p| p.name() != pass.name());
        self.entries.push(pass);
    }

    pub fn get(&self, name: &str) -> Option<&dyn Pass> {
        self.entries.iter().find(|p| p.name() == name).map(|p| p.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|p| p.name()).collect()
    }

    /// Applies the named passes in order, returning every intermediate
    /// graph tagged with the pass that produced it.
    pub fn run(&self, graph: &ArchGraph, names: &[&str]) -> Result<Vec<(String, ArchGraph)>> {
        let mut steps = Vec::with_capacity(names.len());
        let mut cur = graph.clone();
        for &name in names {
            let pass = self.get(name).ok_or_else(|| ArchError::UnknownPass(name.to_string()))?;
            cur = pass.apply(&cur)?;
            steps.push((name.to_string(), cur.clone()));
        }
        Ok(steps)
    }
}

/// Nearest multiple of eight.
pub fn round_to_eight(width: f64) -> usize {
    ((width / 8.0).round() as usize) * 8
}

fn refuse_repeat(graph: &ArchGraph, name: &str) -> Result<()> {
    match graph.passes.iter().find(|p| p.name == name) {
        Some(rec) => Err(ArchError::PassAlreadyApplied {
            pass: name.to_string(),
            fingerprint: rec.fingerprint.clone(),
        }),
        None => Ok(()),
    }
}

/// Re-infers channels, validates and appends the ledger entry. A rewrite
/// that changed nothing returns the input unchanged and records nothing.
fn seal(input: &ArchGraph, mut out: ArchGraph, name: &str) -> Result<ArchGraph> {
    reinfer_channels(&mut out)?;
    if out == *input {
        return Ok(out);
    }
    validate(&out)?;
    let fingerprint = out.content_hash()[..16].to_string();
    out.passes.push(PassRecord {
        name: name.to_string(),
        fingerprint,
    });
    Ok(out)
}
