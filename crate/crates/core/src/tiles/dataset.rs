use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::{
    crop_tile, io_err, parse_annotations, save_png, tile_image, AnnotatedImage, DefectBox, DefectClass, Grid, Result, Split, Tile,
    TilesError, DEFAULT_OVERLAP_THRESHOLD,
};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const HOLDOUT_FILE: &str = "holdout.jsonl";
const MANIFEST_FORMAT: &str = "edgefire-manifest/1";

/// Train:val:test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ratio(pub [u32; 3]);

impl Default for Ratio {
    fn default() -> Self {
        Ratio([7, 2, 1])
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.0[0], self.0[1], self.0[2])
    }
}

impl FromStr for Ratio {
    type Err = TilesError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || TilesError::BadRatio(s.to_string());
        let parts: Vec<u32> = s
            .split(':')
            .map(|p| p.trim().parse::<u32>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match parts.as_slice() {
            &[a, b, c] if a > 0 && b > 0 && c > 0 => Ok(Ratio([a, b, c])),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Exact `[train, val, test]` sizes: val and test are rounded down, the
/// remainder goes to train.
pub fn split_sizes(total: usize, ratio: Ratio) -> [usize; 3] {
    let sum: u64 = ratio.0.iter().map(|&r| u64::from(r)).sum();
    let part = |r: u32| (total as u64 * u64::from(r) / sum) as usize;
    let (val, test) = (part(ratio.0[1]), part(ratio.0[2]));
    [total - val - test, val, test]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub target_count: usize,
    pub ratio: Ratio,
    pub holdout: Vec<DefectClass>,
    pub grid: Grid,
    pub overlap_threshold: f64,
    pub seed: u64,
    pub tile_size: u32,
    /// Write tile PNGs; without it only the manifest and holdout index are
    /// produced.
    pub materialize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            target_count: 20_000,
            ratio: Ratio::default(),
            holdout: vec![DefectClass::OpenCircuit, DefectClass::Spur],
            grid: Grid::default(),
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
            seed: 0,
            tile_size: super::TILE_SIZE,
            materialize: true,
        }
    }
}

impl DatasetConfig {
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    fn check(&self) -> Result<()> {
        if self.target_count < 2 {
            return Err(TilesError::Config("target_count must be at least 2".into()));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(TilesError::Config(format!(
                "overlap threshold {} outside (0, 1]",
                self.overlap_threshold
            )));
        }
        if self.tile_size == 0 {
            return Err(TilesError::Config("tile_size must be positive".into()));
        }
        if split_sizes(self.target_count, self.ratio).contains(&0) {
            return Err(TilesError::Config(format!(
                "target {} leaves a split of ratio {} empty",
                self.target_count, self.ratio
            )));
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub source: String,
    pub row: usize,
    pub col: usize,
    /// `[x0, y0, x1, y1]` in source pixels.
    pub window: [u32; 4],
    pub label: u8,
    pub overlap: f64,
    pub split: Split,
    /// Tile PNG, relative to the dataset root.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub split: Split,
    pub sources: usize,
    pub negatives: usize,
    pub positives: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.negatives + self.positives
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub seed: u64,
    pub config_digest: String,
    pub config: DatasetConfig,
    pub counts: Vec<SplitCounts>,
    pub holdout_sources: usize,
    pub unused_sources: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<TileRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TileRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn counts(&self, split: Split) -> Option<&SplitCounts> {
        self.header.counts.iter().find(|c| c.split == split)
    }

    /// Header line followed by one line per tile.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_jsonl().as_bytes()))
    }

    pub fn from_jsonl(src: &str) -> Result<Self> {
        let mut lines = src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let bad = |line: usize, e: serde_json::Error| TilesError::Manifest {
            line: line + 1,
            detail: e.to_string(),
        };
        let (i, first) = lines.next().ok_or(TilesError::Manifest {
            line: 1,
            detail: "empty manifest".into(),
        })?;
        let header: ManifestHeader = serde_json::from_str(first).map_err(|e| bad(i, e))?;
        if header.format != MANIFEST_FORMAT {
            return Err(TilesError::Manifest {
                line: 1,
                detail: format!("unsupported format `{}`", header.format),
            });
        }
        let records = lines
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(i, e)))
            .collect::<Result<_>>()?;
        Ok(Self { header, records })
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::from_jsonl(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// A board excluded because it carries a holdout-class defect.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutEntry {
    pub id: String,
    pub image: PathBuf,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<DefectBox>,
}

pub fn read_holdout_index(path: &Path) -> Result<Vec<HoldoutEntry>> {
    let src = fs::read_to_string(path).map_err(io_err(path))?;
    src.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| TilesError::Manifest {
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

struct Candidate<'a> {
    image: &'a AnnotatedImage,
    pos: Vec<Tile>,
    neg: Vec<Tile>,
}

/// Picks the split with the largest relative shortfall, first wins ties.
fn neediest(need: &[usize; 3], have: &[usize; 3]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for s in 0..3 {
        let short = need[s].saturating_sub(have[s]);
        if short == 0 {
            continue;
        }
        let frac = short as f64 / need[s] as f64;
        if best.is_none_or(|(_, f)| frac > f) {
            best = Some((s, frac));
        }
    }
    best.map(|(s, _)| s)
}

/// Builds the balanced, split tile dataset from the annotated boards under
/// `source`, writing `manifest.jsonl`, `holdout.jsonl` and (when
/// materializing) `dataset/{split}/{label}/*.png` under `out`.
///
/// Boards carrying any holdout-class box are excluded whole and listed in
/// the holdout index. The rest are shuffled with the seed and assigned one
/// at a time to the split furthest below its positive quota (then its
/// negative quota), so no board spans two splits. Each split keeps exactly
/// half its size in positives (trimming the overshoot of the last board)
/// and a seeded sample of negatives for the other half.
pub fn generate_dataset(source: &Path, out: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    cfg.check()?;
    let images = parse_annotations(source)?;
    let (held, usable): (Vec<&AnnotatedImage>, Vec<&AnnotatedImage>) = images
        .iter()
        .partition(|img| img.boxes.iter().any(|b| cfg.holdout.contains(&b.class)));

    let mut candidates = usable
        .iter()
        .map(|&image| {
            let tiles = tile_image(image.width, image.height, &image.boxes, cfg.grid, cfg.overlap_threshold)?;
            let (pos, neg) = tiles.into_iter().partition(|t| t.label == 1);
            Ok(Candidate { image, pos, neg })
        })
        .collect::<Result<Vec<_>>>()?;

    let sizes = split_sizes(cfg.target_count, cfg.ratio);
    let need_pos = sizes.map(|n| n / 2);
    let need_neg = sizes.map(|n| n - n / 2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    candidates.shuffle(&mut rng);

    let (mut have_pos, mut have_neg) = ([0usize; 3], [0usize; 3]);
    let mut assigned: [Vec<usize>; 3] = Default::default();
    let mut unused = 0;
    for (i, c) in candidates.iter().enumerate() {
        let pick = (!c.pos.is_empty())
            .then(|| neediest(&need_pos, &have_pos))
            .flatten()
            .or_else(|| (!c.neg.is_empty()).then(|| neediest(&need_neg, &have_neg)).flatten());
        match pick {
            Some(s) => {
                have_pos[s] += c.pos.len();
                have_neg[s] += c.neg.len();
                assigned[s].push(i);
            }
            None => unused += 1,
        }
    }
    if (0..3).any(|s| have_pos[s] < need_pos[s] || have_neg[s] < need_neg[s]) {
        let pos: usize = candidates.iter().map(|c| c.pos.len()).sum();
        let neg: usize = candidates.iter().map(|c| c.neg.len()).sum();
        let available = (2 * pos.min(neg)).min(cfg.target_count.saturating_sub(1));
        return Err(TilesError::Insufficient {
            requested: cfg.target_count,
            available,
        });
    }

    let mut records = Vec::with_capacity(cfg.target_count);
    let mut counts = Vec::with_capacity(3);
    for (s, split) in Split::ALL.into_iter().enumerate() {
        let mut chosen: Vec<(&AnnotatedImage, Tile)> = Vec::with_capacity(sizes[s]);
        let mut left = need_pos[s];
        for &i in &assigned[s] {
            let c = &candidates[i];
            let take = left.min(c.pos.len());
            chosen.extend(c.pos[..take].iter().map(|t| (c.image, *t)));
            left -= take;
        }
        let mut negs: Vec<(&AnnotatedImage, Tile)> = assigned[s]
            .iter()
            .flat_map(|&i| {
                let c = &candidates[i];
                c.neg.iter().map(move |t| (c.image, *t))
            })
            .collect();
        negs.shuffle(&mut rng);
        negs.truncate(need_neg[s]);
        chosen.extend(negs);
        chosen.sort_by(|a, b| (&a.0.id, a.1.window.row, a.1.window.col).cmp(&(&b.0.id, b.1.window.row, b.1.window.col)));
        counts.push(SplitCounts {
            split,
            sources: assigned[s].len(),
            negatives: need_neg[s],
            positives: need_pos[s],
        });
        records.extend(chosen.into_iter().map(|(img, t)| {
            let w = t.window;
            TileRecord {
                source: img.id.clone(),
                row: w.row,
                col: w.col,
                window: [w.x0, w.y0, w.x1, w.y1],
                label: t.label,
                overlap: t.overlap,
                split,
                path: format!("dataset/{split}/{}/{}_r{:02}_c{:02}.png", t.label, img.id, w.row, w.col),
            }
        }));
    }

    let manifest = DatasetManifest {
        header: ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            seed: cfg.seed,
            config_digest: cfg.digest(),
            config: cfg.clone(),
            counts,
            holdout_sources: held.len(),
            unused_sources: unused,
        },
        records,
    };

    fs::create_dir_all(out).map_err(io_err(out))?;
    if cfg.materialize {
        let sources: BTreeMap<&str, &AnnotatedImage> = usable.iter().map(|i| (i.id.as_str(), *i)).collect();
        materialize(out, &manifest.records, &sources, cfg.tile_size)?;
    }
    let mpath = out.join(MANIFEST_FILE);
    fs::write(&mpath, manifest.to_jsonl()).map_err(io_err(&mpath))?;
    let mut index = String::new();
    for img in &held {
        let entry = HoldoutEntry {
            id: img.id.clone(),
            image: img.image.clone(),
            width: img.width,
            height: img.height,
            boxes: img.boxes.clone(),
        };
        index.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
        index.push('\n');
    }
    let hpath = out.join(HOLDOUT_FILE);
    fs::write(&hpath, index).map_err(io_err(&hpath))?;
    Ok(manifest)
}

fn open_rgb(path: &Path) -> Result<image::RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| TilesError::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Crops, resizes and writes every record's tile. Boards are decoded once
/// and spread over the available cores; output bytes do not depend on the
/// worker count.
fn materialize(out: &Path, records: &[TileRecord], sources: &BTreeMap<&str, &AnnotatedImage>, size: u32) -> Result<()> {
    for split in Split::ALL {
        for label in ["0", "1"] {
            let d = out.join("dataset").join(split.as_str()).join(label);
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }
    }
    let mut by_source: BTreeMap<&str, Vec<&TileRecord>> = BTreeMap::new();
    for r in records {
        by_source.entry(r.source.as_str()).or_default().push(r);
    }
    let groups: Vec<(&str, Vec<&TileRecord>)> = by_source.into_iter().collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(groups.len().max(1));
    let work = |k: usize| -> Result<()> {
        for (id, recs) in groups.iter().skip(k).step_by(workers) {
            let board = open_rgb(&sources[id].image)?;
            for r in recs {
                save_png(&crop_tile(&board, r.window, size), &out.join(&r.path))?;
            }
        }
        Ok(())
    };
    if workers <= 1 {
        return work(0);
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers).map(|k| s.spawn(move || work(k))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("tile worker panicked"))
            .collect::<Result<Vec<()>>>()
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_are_exact() {
        assert_eq!(split_sizes(20_000, Ratio::default()), [14_000, 4_000, 2_000]);
        assert_eq!(split_sizes(33, Ratio::default()), [24, 6, 3]);
        for n in 0..500 {
            assert_eq!(split_sizes(n, Ratio([5, 3, 2])).iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("7:2:1".parse::<Ratio>().unwrap(), Ratio([7, 2, 1]));
        for bad in ["7:2", "7:2:0", "a:b:c", "7:2:1:1", ""] {
            assert!(bad.parse::<Ratio>().is_err(), "{bad}");
        }
    }

    #[test]
    fn neediest_prefers_relative_shortfall() {
        assert_eq!(neediest(&[70, 20, 10], &[0, 0, 0]), Some(0));
        assert_eq!(neediest(&[70, 20, 10], &[35, 0, 0]), Some(1));
        assert_eq!(neediest(&[70, 20, 10], &[70, 20, 10]), None);
    }
}
