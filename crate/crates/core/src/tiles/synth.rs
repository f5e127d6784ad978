//! Synthetic circuit boards with known defect boxes, used as the fixture
//! corpus for dataset generation and detection tests.
//!
//! Every board carries defects of a single class, like the public PCB
//! defect images, so holdout-class boards separate cleanly.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::annotations::to_json;
use super::{io_err, save_png, AnnotatedImage, DefectBox, DefectClass, Result};

const SUBSTRATE: [u8; 3] = [24, 92, 48];
const COPPER: [u8; 3] = [196, 158, 72];
const HOLE: [u8; 3] = [12, 14, 12];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    /// Inclusive range of defects per board.
    pub defects: (usize, usize),
    /// Inclusive range of box side lengths in pixels.
    pub box_side: (u32, u32),
    /// Boards cycle through these classes in order.
    pub classes: Vec<DefectClass>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 400,
            height: 400,
            defects: (8, 14),
            box_side: (8, 28),
            classes: DefectClass::ALL.to_vec(),
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: [u8; 3]) {
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
}

fn fill_disk(img: &mut RgbImage, cx: f64, cy: f64, r: f64, c: [u8; 3]) {
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    let (w, h) = (i64::from(img.width()), i64::from(img.height()));
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                img.put_pixel(x as u32, y as u32, Rgb(c));
            }
        }
    }
}

fn background(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> RgbImage {
    let mut img = RgbImage::from_fn(cfg.width, cfg.height, |_, _| {
        let j: i16 = rng.gen_range(-6..=6);
        Rgb(SUBSTRATE.map(|v| (i16::from(v) + j).clamp(0, 255) as u8))
    });
    let (w, h) = (i64::from(cfg.width), i64::from(cfg.height));
    for _ in 0..rng.gen_range(6..12) {
        let t = rng.gen_range(3..7);
        if rng.gen_bool(0.5) {
            let y = rng.gen_range(0..h);
            let (a, b) = (rng.gen_range(0..w / 2), rng.gen_range(w / 2..w));
            fill_rect(&mut img, a, y, b, y + t, COPPER);
        } else {
            let x = rng.gen_range(0..w);
            let (a, b) = (rng.gen_range(0..h / 2), rng.gen_range(h / 2..h));
            fill_rect(&mut img, x, a, x + t, b, COPPER);
        }
    }
    for _ in 0..rng.gen_range(10..24) {
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        fill_disk(&mut img, cx, cy, 6.0, COPPER);
        fill_disk(&mut img, cx, cy, 2.5, HOLE);
    }
    img
}

/// Draws a defect of `class` filling most of the box.
fn draw_defect(img: &mut RgbImage, rng: &mut ChaCha8Rng, b: &DefectBox) {
    let (x0, y0, x1, y1) = (i64::from(b.x0), i64::from(b.y0), i64::from(b.x1), i64::from(b.y1));
    let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
    let r = ((x1 - x0).min(y1 - y0)) as f64 / 2.0;
    match b.class {
        DefectClass::MissingHole => {
            fill_disk(img, cx, cy, r, COPPER);
            fill_disk(img, cx, cy, r * 0.45, [230, 214, 150]);
        }
        DefectClass::MouseBite => {
            fill_rect(img, x0, y0 + (y1 - y0) / 3, x1, y1 - (y1 - y0) / 3, COPPER);
            for _ in 0..3 {
                let bx = rng.gen_range(x0 as f64..x1 as f64);
                fill_disk(img, bx, y0 as f64 + (y1 - y0) as f64 / 3.0, r * 0.35, SUBSTRATE);
            }
        }
        DefectClass::OpenCircuit => {
            fill_rect(img, x0, cy as i64 - 2, x1, cy as i64 + 3, COPPER);
            fill_rect(img, cx as i64 - 2, y0, cx as i64 + 2, y1, [8, 40, 20]);
        }
        DefectClass::Short => {
            for i in 0..(x1 - x0) {
                let y = y0 + i * (y1 - y0) / (x1 - x0);
                fill_rect(img, x0 + i, y - 2, x0 + i + 1, y + 3, [238, 190, 90]);
            }
        }
        DefectClass::Spur => {
            for y in y0..y1 {
                let half = ((y - y0 + 1) * (x1 - x0) / (2 * (y1 - y0))).max(1);
                fill_rect(img, cx as i64 - half, y, cx as i64 + half, y + 1, [210, 170, 84]);
            }
        }
        DefectClass::SpuriousCopper => {
            for _ in 0..4 {
                let px = rng.gen_range(x0 as f64 + r * 0.5..x1 as f64 - r * 0.5 + 1.0);
                let py = rng.gen_range(y0 as f64 + r * 0.5..y1 as f64 - r * 0.5 + 1.0);
                fill_disk(img, px, py, r * 0.5, [222, 176, 80]);
            }
        }
    }
}

/// Random non-overlapping boxes (best effort) of one class.
fn place_boxes(rng: &mut ChaCha8Rng, cfg: &SynthConfig, class: DefectClass) -> Vec<DefectBox> {
    let n = rng.gen_range(cfg.defects.0..=cfg.defects.1);
    let mut boxes: Vec<DefectBox> = Vec::with_capacity(n);
    let mut tries = 0;
    while boxes.len() < n && tries < n * 40 {
        tries += 1;
        let w = rng.gen_range(cfg.box_side.0..=cfg.box_side.1).min(cfg.width);
        let h = rng.gen_range(cfg.box_side.0..=cfg.box_side.1).min(cfg.height);
        let x0 = rng.gen_range(0..=cfg.width - w);
        let y0 = rng.gen_range(0..=cfg.height - h);
        let b = DefectBox {
            class,
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        };
        let clear = boxes
            .iter()
            .all(|o| b.x1 + 2 <= o.x0 || o.x1 + 2 <= b.x0 || b.y1 + 2 <= o.y0 || o.y1 + 2 <= b.y0);
        if clear {
            boxes.push(b);
        }
    }
    boxes
}

/// One board of `class` with its boxes, deterministic in `seed`.
pub fn synth_board(cfg: &SynthConfig, class: DefectClass, seed: u64) -> (RgbImage, Vec<DefectBox>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = background(&mut rng, cfg);
    let boxes = place_boxes(&mut rng, cfg, class);
    for b in &boxes {
        draw_defect(&mut img, &mut rng, b);
    }
    (img, boxes)
}

/// Writes `boards` boards as `board_NNNNN.png` plus a JSON annotation each
/// into `dir`, returning the annotations in file order.
pub fn write_corpus(dir: &Path, boards: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<AnnotatedImage>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut out = Vec::with_capacity(boards);
    for i in 0..boards {
        let class = cfg.classes[i % cfg.classes.len()];
        let (img, boxes) = synth_board(cfg, class, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let id = format!("board_{i:05}");
        let image = dir.join(format!("{id}.png"));
        save_png(&img, &image)?;
        let ann = AnnotatedImage {
            id: id.clone(),
            image,
            width: cfg.width,
            height: cfg.height,
            boxes,
        };
        let path = dir.join(format!("{id}.json"));
        fs::write(&path, to_json(&ann)).map_err(io_err(&path))?;
        out.push(ann);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiles::parse_annotations;

    #[test]
    fn boards_are_deterministic_and_valid() {
        let cfg = SynthConfig::default();
        let (a, ba) = synth_board(&cfg, DefectClass::Spur, 4);
        let (b, bb) = synth_board(&cfg, DefectClass::Spur, 4);
        assert_eq!(a, b);
        assert_eq!(ba, bb);
        assert!(ba.len() >= cfg.defects.0);
        for x in &ba {
            x.check(cfg.width, cfg.height).unwrap();
            assert_eq!(x.class, DefectClass::Spur);
        }
    }

    #[test]
    fn corpus_round_trips_through_parser() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            width: 120,
            height: 100,
            defects: (2, 3),
            ..SynthConfig::default()
        };
        let written = write_corpus(dir.path(), 4, &cfg, 1).unwrap();
        let parsed = parse_annotations(dir.path()).unwrap();
        assert_eq!(parsed, written);
        let classes: Vec<_> = parsed.iter().map(|a| a.boxes[0].class).collect();
        assert_eq!(classes, &DefectClass::ALL[..4]);
    }
}
