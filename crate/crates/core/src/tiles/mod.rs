//! Annotated boards to binary-labeled tiles: annotation parsing, grid
//! geometry and the overlap label rule, synthetic boards, dataset
//! generation and batch loading.

pub mod annotations;
mod dataset;
mod geometry;
mod loader;
pub mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use annotations::{parse_annotations, AnnotatedImage, AnnotationFormat, FormatRegistry};
pub use dataset::{
    generate_dataset, read_holdout_index, read_manifest, split_sizes, DatasetConfig, DatasetManifest, HoldoutEntry,
    ManifestHeader, Ratio, SplitCounts, TileRecord, HOLDOUT_FILE, MANIFEST_FILE,
};
pub use geometry::{cell_windows, label_cell, overlap_fraction, tile_image, CellWindow, Grid, Tile, DEFAULT_OVERLAP_THRESHOLD};
pub use loader::{chw, crop_tile, decode_tile, load_batches, Batch, BatchIter, TILE_SIZE};

#[derive(Debug, Error)]
pub enum TilesError {
    #[error("{path}: {detail}")]
    Markup { path: PathBuf, detail: String },
    #[error("{path}: {detail}")]
    BadBox { path: PathBuf, detail: String },
    #[error("unknown defect class `{0}`")]
    UnknownClass(String),
    #[error("no annotation format handles {0}")]
    UnknownFormat(PathBuf),
    #[error("image is empty")]
    EmptyImage,
    #[error("grid {rows}x{cols} is larger than the {width}x{height} image")]
    GridTooLarge {
        rows: usize,
        cols: usize,
        width: u32,
        height: u32,
    },
    #[error("bad ratio `{0}`: expected three positive integers such as 7:2:1")]
    BadRatio(String),
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("only {available} tiles reachable under the balance and split rules (asked for {requested})")]
    Insufficient { requested: usize, available: usize },
    #[error("split `{0}` is empty or absent from the manifest")]
    EmptySplit(Split),
    #[error("missing tile file {0}")]
    MissingTile(PathBuf),
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, TilesError>;

/// Lossless PNG with fast compression.
pub fn save_png(img: &image::RgbImage, path: &std::path::Path) -> Result<()> {
    use image::codecs::png::{CompressionType, FilterType, PngEncoder};
    use image::ImageEncoder;
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let enc = PngEncoder::new_with_quality(std::io::BufWriter::new(file), CompressionType::Fast, FilterType::Sub);
    enc.write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|source| TilesError::Image {
            path: path.to_path_buf(),
            source,
        })
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> TilesError {
    let path = path.into();
    move |source| TilesError::Io { path, source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectClass {
    MissingHole,
    MouseBite,
    OpenCircuit,
    Short,
    Spur,
    SpuriousCopper,
}

impl DefectClass {
    pub const ALL: [DefectClass; 6] = [
        DefectClass::MissingHole,
        DefectClass::MouseBite,
        DefectClass::OpenCircuit,
        DefectClass::Short,
        DefectClass::Spur,
        DefectClass::SpuriousCopper,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefectClass::MissingHole => "missing_hole",
            DefectClass::MouseBite => "mouse_bite",
            DefectClass::OpenCircuit => "open_circuit",
            DefectClass::Short => "short",
            DefectClass::Spur => "spur",
            DefectClass::SpuriousCopper => "spurious_copper",
        }
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for DefectClass {
    type Err = TilesError;

    /// Accepts the snake_case names and, case-insensitively, the
    /// capitalized spellings used by the public PCB defect annotations
    /// (`Missing_hole`, `Spurious_copper`, ...).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == lower)
            .ok_or_else(|| TilesError::UnknownClass(s.to_string()))
    }
}

/// Axis-aligned defect box in pixel edge coordinates: it covers
/// `x0 <= x < x1`, `y0 <= y < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DefectBox {
    pub class: DefectClass,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl DefectBox {
    pub fn area(&self) -> u64 {
        u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
    }

    /// Checks ordering and containment in a `width` x `height` image.
    pub fn check(&self, width: u32, height: u32) -> std::result::Result<(), String> {
        if self.x0 >= self.x1 || self.y0 >= self.y1 {
            return Err(format!(
                "degenerate box ({}, {})-({}, {}): need x0 < x1 and y0 < y1",
                self.x0, self.y0, self.x1, self.y1
            ));
        }
        if self.x1 > width || self.y1 > height {
            return Err(format!(
                "box ({}, {})-({}, {}) exceeds the {width}x{height} image",
                self.x0, self.y0, self.x1, self.y1
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}` (expected train, val or test)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_names_round_trip() {
        for c in DefectClass::ALL {
            assert_eq!(c.as_str().parse::<DefectClass>().unwrap(), c);
        }
        assert_eq!("Spurious_copper".parse::<DefectClass>().unwrap(), DefectClass::SpuriousCopper);
        assert!("scratch".parse::<DefectClass>().is_err());
    }

    #[test]
    fn box_checks() {
        let b = DefectBox {
            class: DefectClass::Short,
            x0: 5,
            y0: 5,
            x1: 10,
            y1: 8,
        };
        assert_eq!(b.area(), 15);
        assert!(b.check(10, 8).is_ok());
        assert!(b.check(9, 8).is_err());
        assert!(DefectBox { x1: 5, ..b }.check(100, 100).is_err());
    }
}
