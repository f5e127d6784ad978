use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use image::imageops::{self, FilterType};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, Result, Split, TilesError};
use crate::tensor::Tensor;

/// Side of the square classifier input.
pub const TILE_SIZE: u32 = 224;

/// Decodes a tile as CHW floats in `[0, 1]`, resizing to `side` if needed.
pub fn decode_tile(path: &Path, side: u32) -> Result<Vec<f32>> {
    if !path.is_file() {
        return Err(TilesError::MissingTile(path.to_path_buf()));
    }
    let mut img = image::open(path)
        .map_err(|source| TilesError::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    if img.dimensions() != (side, side) {
        img = imageops::resize(&img, side, side, FilterType::Triangle);
    }
    Ok(chw(&img))
}

/// Crops the `[x0, y0, x1, y1]` window of `board` and resizes it to a
/// `side` x `side` tile.
pub fn crop_tile(board: &image::RgbImage, window: [u32; 4], side: u32) -> image::RgbImage {
    let [x0, y0, x1, y1] = window;
    let cell = imageops::crop_imm(board, x0, y0, x1 - x0, y1 - y0).to_image();
    if cell.dimensions() == (side, side) {
        return cell;
    }
    imageops::resize(&cell, side, side, FilterType::Triangle)
}

/// Planar RGB floats in `[0, 1]`.
pub fn chw(img: &image::RgbImage) -> Vec<f32> {
    let plane = (img.width() * img.height()) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + i] = f32::from(p.0[c]) / 255.0;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, side, side]`.
    pub images: Tensor,
    pub labels: Vec<f32>,
    /// Positions of the batch's tiles within the split, in manifest order.
    pub indices: Vec<usize>,
}

#[derive(Clone)]
struct Plan {
    items: Vec<(PathBuf, u8)>,
    order: Vec<usize>,
    batch_size: usize,
    side: u32,
}

impl Plan {
    fn batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    fn load(&self, b: usize) -> Result<Batch> {
        let idx = &self.order[b * self.batch_size..((b + 1) * self.batch_size).min(self.order.len())];
        let side = self.side as usize;
        let mut data = Vec::with_capacity(idx.len() * 3 * side * side);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let (path, label) = &self.items[i];
            data.extend(decode_tile(path, self.side)?);
            labels.push(f32::from(*label));
        }
        Ok(Batch {
            images: Tensor::new([idx.len(), 3, side, side], data)?,
            labels,
            indices: idx.to_vec(),
        })
    }
}

enum Source {
    Inline,
    Prefetch {
        rx: Receiver<Result<Batch>>,
        worker: Option<JoinHandle<()>>,
    },
}

/// Batches of one split for one epoch. The order is a pure function of
/// `(seed, epoch)` and does not depend on the prefetch depth.
pub struct BatchIter {
    plan: Plan,
    next: usize,
    source: Source,
}

/// Iterates `split` of `manifest` (tile paths relative to `root`) in batches
/// of `batch_size`; the last batch may be short. The epoch order is a
/// permutation drawn from `seed` on stream `epoch`.
pub fn load_batches(
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter> {
    if batch_size == 0 {
        return Err(TilesError::Config("batch size must be at least 1".into()));
    }
    let items: Vec<(PathBuf, u8)> = manifest.split(split).map(|r| (root.join(&r.path), r.label)).collect();
    if items.is_empty() {
        return Err(TilesError::EmptySplit(split));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(BatchIter {
        plan: Plan {
            items,
            order,
            batch_size,
            side: TILE_SIZE,
        },
        next: 0,
        source: Source::Inline,
    })
}

impl BatchIter {
    /// Resize tiles to `side` instead of [`TILE_SIZE`].
    pub fn with_side(mut self, side: u32) -> Self {
        self.plan.side = side;
        self
    }

    /// Manifest order instead of the shuffled one.
    pub fn in_order(mut self) -> Self {
        self.plan.order.sort_unstable();
        self
    }

    /// Skips the first `n` batches.
    pub fn skip_batches(mut self, n: usize) -> Self {
        self.next = n.min(self.plan.batches());
        self
    }

    /// Decodes up to `depth` batches ahead on a background thread.
    pub fn prefetch(mut self, depth: usize) -> Self {
        if depth == 0 || matches!(self.source, Source::Prefetch { .. }) {
            return self;
        }
        let (tx, rx) = sync_channel(depth);
        let plan = self.plan.clone();
        let start = self.next;
        let worker = std::thread::spawn(move || {
            for b in start..plan.batches() {
                let r = plan.load(b);
                let failed = r.is_err();
                if tx.send(r).is_err() || failed {
                    break;
                }
            }
        });
        self.source = Source::Prefetch {
            rx,
            worker: Some(worker),
        };
        self
    }

    /// Total batches in the epoch.
    pub fn batches(&self) -> usize {
        self.plan.batches()
    }

    pub fn tiles(&self) -> usize {
        self.plan.order.len()
    }

    /// Split positions in delivery order.
    pub fn order(&self) -> &[usize] {
        &self.plan.order
    }
}

impl Iterator for BatchIter {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Result<Batch>> {
        if self.next >= self.plan.batches() {
            return None;
        }
        let b = self.next;
        self.next += 1;
        match &mut self.source {
            Source::Inline => Some(self.plan.load(b)),
            Source::Prefetch { rx, .. } => {
                let r = rx.recv().ok()?;
                if r.is_err() {
                    self.next = self.plan.batches();
                }
                Some(r)
            }
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.plan.batches() - self.next;
        (n, Some(n))
    }
}

impl Drop for BatchIter {
    fn drop(&mut self) {
        if let Source::Prefetch { rx, worker } = &mut self.source {
            // unblock a sender waiting on a full channel
            while rx.try_recv().is_ok() {}
            let (_, dead) = sync_channel(0);
            *rx = dead;
            if let Some(w) = worker.take() {
                let _ = w.join();
            }
        }
    }
}
