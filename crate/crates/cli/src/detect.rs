use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{ArgGroup, Args};
use edgefire::detect::{detect, open_image, render, DetectError, DetectionScore, TileClassifier, DEFAULT_THRESHOLD};
use edgefire::tiles::{read_holdout_index, DefectBox, FormatRegistry, Grid, DEFAULT_OVERLAP_THRESHOLD, HOLDOUT_FILE};
use edgefire::train::load_trained;

use crate::usage;

#[derive(Args)]
#[command(group(ArgGroup::new("input").required(true).args(["image", "holdout"])))]
pub struct DetectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Board image to scan.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Annotation file (JSON or VOC XML) with the true boxes of --image.
    #[arg(long, requires = "image")]
    pub truth: Option<PathBuf>,
    /// Dataset directory; scans every board in its holdout index.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[arg(long, default_value = "10x10")]
    pub grid: Grid,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f32,
    #[arg(long)]
    pub out: PathBuf,
}

fn detect_error(e: DetectError) -> anyhow::Error {
    match e {
        DetectError::Threshold(_) => usage(e.to_string()),
        e => e.into(),
    }
}

fn score_line(s: &DetectionScore, boxes: usize) -> String {
    format!(
        "cells: {} true positive, {} false positive, {} false negative; boxes hit {}/{}",
        s.true_pos,
        s.false_pos,
        s.false_neg,
        s.boxes_hit(),
        boxes
    )
}

/// Scans one board, writes `<id>_detect.png` and `<id>_cells.txt`.
fn scan(
    model: &dyn TileClassifier,
    image: &Path,
    id: &str,
    truth: &[DefectBox],
    args: &DetectArgs,
) -> Result<(usize, DetectionScore)> {
    let img = open_image(image)?;
    let report = detect(model, &img, id, args.grid, args.threshold).map_err(detect_error)?;
    render(&img, &report, truth, &args.out.join(format!("{id}_detect.png")))?;
    fs::write(args.out.join(format!("{id}_cells.txt")), report.to_text())?;
    println!("{id}: {}", report.summary());
    Ok((report.positives(), edgefire::detect::score(&report, truth, DEFAULT_OVERLAP_THRESHOLD)))
}

pub fn run(args: DetectArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(usage(format!("threshold {} outside [0, 1]", args.threshold)));
    }
    let trained = load_trained(&args.ckpt).with_context(|| format!("loading {}", args.ckpt.display()))?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    if let Some(image) = &args.image {
        let truth = match &args.truth {
            Some(p) => FormatRegistry::default().parse_file(p)?.boxes,
            None => Vec::new(),
        };
        let id = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        let (_, s) = scan(&trained.model, image, &id, &truth, &args)?;
        if args.truth.is_some() {
            println!("{}", score_line(&s, truth.len()));
        }
        return Ok(());
    }

    let data = args.holdout.as_ref().expect("clap requires image or holdout");
    let index = read_holdout_index(&data.join(HOLDOUT_FILE))?;
    let (mut total, mut boxes, mut positives) = (DetectionScore::default(), 0, 0);
    for entry in &index {
        let (k, s) = scan(&trained.model, &entry.image, &entry.id, &entry.boxes, &args)?;
        total.merge(&s);
        boxes += entry.boxes.len();
        positives += k;
    }
    println!("holdout: {} boards, {positives} positive cells", index.len());
    println!("{}", score_line(&total, boxes));
    Ok(())
}
