use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Subcommand;
use edgefire::tiles::synth::{write_corpus, SynthConfig};
use edgefire::tiles::{generate_dataset, DatasetConfig, DefectClass, Grid, Ratio, Split, TilesError, MANIFEST_FILE};

use crate::usage;

#[derive(Subcommand)]
pub enum DatasetCmd {
    /// Write annotated synthetic boards (PNG + JSON).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1200)]
        boards: usize,
        #[arg(long, default_value_t = 400)]
        width: u32,
        #[arg(long, default_value_t = 400)]
        height: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tile annotated boards into a balanced, split dataset.
    Gen {
        /// Directory of annotations (JSON or VOC XML) and their images.
        src: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        count: usize,
        #[arg(long, default_value = "7:2:1")]
        ratio: Ratio,
        /// Comma-separated classes kept out of the dataset, or `none`.
        #[arg(long, default_value = "open_circuit,spur")]
        holdout: String,
        #[arg(long, default_value = "10x10")]
        grid: Grid,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 224)]
        tile_size: u32,
        /// Minimum fraction of a box inside a cell for a positive label.
        #[arg(long, default_value_t = 0.3)]
        overlap: f64,
        /// Write the manifest and holdout index but no tile images.
        #[arg(long)]
        manifest_only: bool,
    },
}

fn parse_holdout(s: &str) -> Result<Vec<DefectClass>> {
    if s.trim().eq_ignore_ascii_case("none") || s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|c| c.parse::<DefectClass>().map_err(|e| usage(e.to_string())))
        .collect()
}

/// Tiles errors that stem from the invocation rather than the data.
pub fn classify(e: TilesError) -> anyhow::Error {
    match e {
        TilesError::Config(_) | TilesError::BadRatio(_) | TilesError::UnknownClass(_) => usage(e.to_string()),
        e => e.into(),
    }
}

pub fn run(cmd: DatasetCmd) -> Result<()> {
    match cmd {
        DatasetCmd::Synth {
            out,
            boards,
            width,
            height,
            seed,
        } => {
            if boards == 0 || width < 32 || height < 32 {
                return Err(usage("need at least one board of at least 32x32 pixels"));
            }
            let cfg = SynthConfig {
                width,
                height,
                ..SynthConfig::default()
            };
            let written = write_corpus(&out, boards, &cfg, seed).context("writing synthetic boards")?;
            let defects: usize = written.iter().map(|b| b.boxes.len()).sum();
            println!("wrote {} boards ({defects} defects) to {}", written.len(), out.display());
            Ok(())
        }
        DatasetCmd::Gen {
            src,
            out,
            count,
            ratio,
            holdout,
            grid,
            seed,
            tile_size,
            overlap,
            manifest_only,
        } => {
            let cfg = DatasetConfig {
                target_count: count,
                ratio,
                holdout: parse_holdout(&holdout)?,
                grid,
                overlap_threshold: overlap,
                seed,
                tile_size,
                materialize: !manifest_only,
            };
            let m = generate_dataset(&src, &out, &cfg).map_err(classify)?;
            for split in Split::ALL {
                if let Some(c) = m.counts(split) {
                    println!(
                        "{:<5} {:>6} tiles ({} positive, {} negative) from {} boards",
                        split.as_str(),
                        c.total(),
                        c.positives,
                        c.negatives,
                        c.sources
                    );
                }
            }
            println!("holdout {} boards", m.header.holdout_sources);
            println!("manifest {} {}", out.join(MANIFEST_FILE).display(), m.digest());
            Ok(())
        }
    }
}
