#![allow(dead_code)]

pub mod gradcheck;

use std::path::Path;

use edgefire::arch::{build_proposed, ArchGraph};
use edgefire::tiles::synth::{write_corpus, SynthConfig};
use edgefire::tiles::{
    crop_tile, generate_dataset, save_png, tile_image, DatasetConfig, DatasetManifest, DefectBox, Grid, ManifestHeader,
    Split, SplitCounts, TileRecord, DEFAULT_OVERLAP_THRESHOLD,
};
use image::RgbImage;

pub fn small_boards() -> SynthConfig {
    SynthConfig {
        width: 200,
        height: 200,
        defects: (4, 8),
        box_side: (6, 16),
        ..SynthConfig::default()
    }
}

/// Target 45 gives a 32-tile train split (16 + 16), 9 val and 4 test.
pub fn toy_dataset(root: &Path, side: u32, seed: u64) -> DatasetManifest {
    write_corpus(&root.join("src"), 12, &small_boards(), seed).unwrap();
    let cfg = DatasetConfig {
        target_count: 45,
        tile_size: side,
        seed,
        ..DatasetConfig::default()
    };
    generate_dataset(&root.join("src"), &root.join("ds"), &cfg).unwrap()
}

/// Proposed architecture at 1/8 width on `side` x `side` tiles.
pub fn toy_graph(side: usize) -> ArchGraph {
    build_proposed().unwrap().width_scaled(8).unwrap().with_input_side(side).unwrap()
}

/// Every cell of one board as both the train and the val split, tiles
/// written under `root`.
pub fn board_manifest(root: &Path, board: &RgbImage, boxes: &[DefectBox], side: u32) -> DatasetManifest {
    let grid = Grid::default();
    let tiles = tile_image(board.width(), board.height(), boxes, grid, DEFAULT_OVERLAP_THRESHOLD).unwrap();
    let mut records = Vec::new();
    for split in [Split::Train, Split::Val] {
        for t in &tiles {
            let w = t.window;
            let path = format!("dataset/{split}/{}/board_r{:02}_c{:02}.png", t.label, w.row, w.col);
            records.push(TileRecord {
                source: "board".into(),
                row: w.row,
                col: w.col,
                window: [w.x0, w.y0, w.x1, w.y1],
                label: t.label,
                overlap: t.overlap,
                split,
                path,
            });
        }
    }
    for r in records.iter().filter(|r| r.split == Split::Train) {
        let tile = crop_tile(board, r.window, side);
        for split in ["train", "val"] {
            let p = root.join(r.path.replacen("train", split, 1));
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            save_png(&tile, &p).unwrap();
        }
    }
    let config = DatasetConfig {
        target_count: 200,
        tile_size: side,
        ..DatasetConfig::default()
    };
    let count = |split: Split, label: u8| records.iter().filter(|r| r.split == split && r.label == label).count();
    let counts = [Split::Train, Split::Val]
        .into_iter()
        .map(|split| SplitCounts {
            split,
            sources: 1,
            negatives: count(split, 0),
            positives: count(split, 1),
        })
        .collect();
    DatasetManifest {
        header: ManifestHeader {
            format: "edgefire-manifest/1".into(),
            seed: 0,
            config_digest: config.digest(),
            config,
            counts,
            holdout_sources: 0,
            unused_sources: 0,
        },
        records,
    }
}
