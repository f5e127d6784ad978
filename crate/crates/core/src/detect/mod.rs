//! Whole-board detection by grid-cell classification. Each positive cell
//! becomes one pseudo box; nothing is merged.

mod render;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::tensor::Tensor;
use crate::tiles::{cell_windows, chw, crop_tile, label_cell, overlap_fraction, DefectBox, Grid, TilesError};

pub use render::{annotate, render, PRED_COLOR, STROKE, TRUTH_COLOR};

pub const DEFAULT_THRESHOLD: f32 = 0.5;
const CELL_BATCH: usize = 16;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Tiles(#[from] TilesError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f32),
    #[error("classifier `{name}` returned {got} probabilities for {cells} cells")]
    Classifier { name: String, cells: usize, got: usize },
    #[error("no classifier registered as `{0}`")]
    UnknownClassifier(String),
    #[error("report line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DetectError>;

/// Anything that maps a `[B, 3, side, side]` batch of tiles to `B`
/// defect probabilities.
pub trait TileClassifier: Send + Sync {
    fn name(&self) -> &str;

    fn input_side(&self) -> u32;

    fn classify(&self, tiles: &Tensor) -> Result<Vec<f32>>;
}

impl TileClassifier for Model {
    fn name(&self) -> &str {
        "model"
    }

    fn input_side(&self) -> u32 {
        self.input_dims()[1] as u32
    }

    fn classify(&self, tiles: &Tensor) -> Result<Vec<f32>> {
        Ok(self.forward(tiles)?.into_data())
    }
}

/// Fixed probability for every cell; a reference point for scoring.
pub struct ConstantClassifier {
    pub prob: f32,
    pub side: u32,
}

impl TileClassifier for ConstantClassifier {
    fn name(&self) -> &str {
        "constant"
    }

    fn input_side(&self) -> u32 {
        self.side
    }

    fn classify(&self, tiles: &Tensor) -> Result<Vec<f32>> {
        Ok(vec![self.prob; tiles.shape()[0]])
    }
}

/// Classifiers by name.
#[derive(Default)]
pub struct ClassifierRegistry {
    entries: Vec<Box<dyn TileClassifier>>,
}

impl ClassifierRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `c`, replacing one registered under the same name.
    pub fn register(&mut self, c: Box<dyn TileClassifier>) {
        self.entries.retain(|e| e.name() != c.name());
        self.entries.push(c);
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name()).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn TileClassifier> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|e| e.as_ref())
            .ok_or_else(|| DetectError::UnknownClassifier(name.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellPrediction {
    pub row: usize,
    pub col: usize,
    /// `[x0, y0, x1, y1]` in board pixels.
    pub window: [u32; 4],
    pub prob: f32,
    pub positive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionReport {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub grid: Grid,
    pub threshold: f32,
    /// Row-major.
    pub cells: Vec<CellPrediction>,
}

fn check_threshold(t: f32) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(DetectError::Threshold(t))
    }
}

impl DetectionReport {
    /// Windows of the positive cells, row-major.
    pub fn pseudo_boxes(&self) -> Vec<[u32; 4]> {
        self.cells.iter().filter(|c| c.positive).map(|c| c.window).collect()
    }

    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.positive).count()
    }

    /// The same probabilities under another threshold.
    pub fn rethreshold(&self, threshold: f32) -> Result<Self> {
        check_threshold(threshold)?;
        let mut r = self.clone();
        r.threshold = threshold;
        for c in &mut r.cells {
            c.positive = c.prob > threshold;
        }
        Ok(r)
    }

    pub fn summary(&self) -> String {
        format!("{} cells, {} positive", self.cells.len(), self.positives())
    }

    /// Comment header, then `row,col,prob,decision` per cell.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# image={} size={}x{} grid={} threshold={}\nrow,col,prob,decision\n",
            self.image, self.width, self.height, self.grid, self.threshold
        );
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{:.6},{}", c.row, c.col, c.prob, u8::from(c.positive));
        }
        s
    }

    pub fn from_text(src: &str) -> Result<Self> {
        let bad = |line: usize, detail: String| DetectError::Parse { line, detail };
        let mut lines = src.lines().enumerate();
        let (_, head) = lines.next().ok_or_else(|| bad(1, "empty report".into()))?;
        let field = |key: &str| -> Result<&str> {
            head.split_whitespace()
                .find_map(|f| f.strip_prefix(key).and_then(|v| v.strip_prefix('=')))
                .ok_or_else(|| bad(1, format!("header lacks `{key}=`")))
        };
        let image = field("image")?.to_string();
        let (w, h) = field("size")?.split_once('x').ok_or_else(|| bad(1, "bad size".into()))?;
        let width: u32 = w.parse().map_err(|_| bad(1, "bad width".into()))?;
        let height: u32 = h.parse().map_err(|_| bad(1, "bad height".into()))?;
        let grid: Grid = field("grid")?.parse().map_err(|e| bad(1, e))?;
        let threshold: f32 = field("threshold")?.parse().map_err(|_| bad(1, "bad threshold".into()))?;
        match lines.next() {
            Some((_, "row,col,prob,decision")) => {}
            _ => return Err(bad(2, "expected `row,col,prob,decision`".into())),
        }
        let windows = cell_windows(width, height, grid)?;
        let mut cells = Vec::with_capacity(windows.len());
        for (i, l) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = l.split(',').collect();
            let parsed = (f.len() == 4)
                .then(|| Some((f[0].parse::<usize>().ok()?, f[1].parse::<usize>().ok()?, f[2].parse::<f32>().ok()?, f[3])))
                .flatten();
            let Some((row, col, prob, decision)) = parsed else {
                return Err(bad(i + 1, format!("malformed cell `{l}`")));
            };
            let positive = match decision {
                "0" => false,
                "1" => true,
                _ => return Err(bad(i + 1, format!("decision `{decision}` is not 0 or 1"))),
            };
            let w = windows
                .get(cells.len())
                .filter(|w| (w.row, w.col) == (row, col))
                .ok_or_else(|| bad(i + 1, format!("cell ({row}, {col}) out of row-major order")))?;
            cells.push(CellPrediction {
                row,
                col,
                window: [w.x0, w.y0, w.x1, w.y1],
                prob,
                positive,
            });
        }
        if cells.len() != windows.len() {
            return Err(bad(src.lines().count(), format!("{} cells, grid has {}", cells.len(), windows.len())));
        }
        Ok(Self {
            image,
            width,
            height,
            grid,
            threshold,
            cells,
        })
    }
}

/// Classifies every grid cell of `image`: crop, resize to the classifier's
/// input side, then `prob > threshold`.
pub fn detect(classifier: &dyn TileClassifier, image: &RgbImage, id: &str, grid: Grid, threshold: f32) -> Result<DetectionReport> {
    check_threshold(threshold)?;
    let windows = cell_windows(image.width(), image.height(), grid)?;
    let side = classifier.input_side();
    let s = side as usize;
    let mut probs = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(CELL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * s * s);
        for w in chunk {
            data.extend(chw(&crop_tile(image, [w.x0, w.y0, w.x1, w.y1], side)));
        }
        let batch = Tensor::new([chunk.len(), 3, s, s], data).map_err(ModelError::from)?;
        let p = classifier.classify(&batch)?;
        if p.len() != chunk.len() {
            return Err(DetectError::Classifier {
                name: classifier.name().to_string(),
                cells: chunk.len(),
                got: p.len(),
            });
        }
        probs.extend(p);
    }
    let cells = windows
        .iter()
        .zip(probs)
        .map(|(w, prob)| CellPrediction {
            row: w.row,
            col: w.col,
            window: [w.x0, w.y0, w.x1, w.y1],
            prob,
            positive: prob > threshold,
        })
        .collect();
    Ok(DetectionReport {
        image: id.to_string(),
        width: image.width(),
        height: image.height(),
        grid,
        threshold,
        cells,
    })
}

pub fn open_image(path: &Path) -> Result<RgbImage> {
    image::open(path).map(|i| i.to_rgb8()).map_err(|source| DetectError::Image {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DetectionScore {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    /// Per truth box: some cell it marks positive was predicted positive.
    pub hits: Vec<bool>,
}

impl DetectionScore {
    pub fn truth_cells(&self) -> usize {
        self.true_pos + self.false_neg
    }

    pub fn boxes_hit(&self) -> usize {
        self.hits.iter().filter(|&&h| h).count()
    }

    /// Sums counts and concatenates hit flags.
    pub fn merge(&mut self, other: &DetectionScore) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.hits.extend_from_slice(&other.hits);
    }
}

/// Cell-level comparison against `truth` using the dataset overlap rule.
pub fn score(report: &DetectionReport, truth: &[DefectBox], overlap_threshold: f64) -> DetectionScore {
    let windows = cell_windows(report.width, report.height, report.grid).expect("report grid was valid when detected");
    let mut s = DetectionScore::default();
    for (w, c) in windows.iter().zip(&report.cells) {
        let (label, _) = label_cell(w, truth, overlap_threshold);
        match (label == 1, c.positive) {
            (true, true) => s.true_pos += 1,
            (false, true) => s.false_pos += 1,
            (true, false) => s.false_neg += 1,
            (false, false) => {}
        }
    }
    s.hits = truth
        .iter()
        .map(|b| {
            windows
                .iter()
                .zip(&report.cells)
                .any(|(w, c)| c.positive && overlap_fraction(w, b) >= overlap_threshold)
        })
        .collect();
    s
}
