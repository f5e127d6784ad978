use std::path::Path;

use image::{Rgb, RgbImage};

use super::{DetectError, DetectionReport, Result};
use crate::tiles::{save_png, DefectBox};

pub const TRUTH_COLOR: [u8; 3] = [255, 255, 0];
pub const PRED_COLOR: [u8; 3] = [255, 0, 0];
/// Stroke width in pixels, drawn inside the rectangle.
pub const STROKE: u32 = 3;

fn outline(img: &mut RgbImage, [x0, y0, x1, y1]: [u32; 4], color: [u8; 3]) {
    let (x1, y1) = (x1.min(img.width()), y1.min(img.height()));
    for y in y0..y1 {
        for x in x0..x1 {
            let edge = x < x0 + STROKE || x + STROKE >= x1 || y < y0 + STROKE || y + STROKE >= y1;
            if edge {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

/// Copy of `image` with truth boxes in yellow and then predicted cells in
/// red on top.
pub fn annotate(image: &RgbImage, report: &DetectionReport, truth: &[DefectBox]) -> RgbImage {
    let mut out = image.clone();
    for b in truth {
        outline(&mut out, [b.x0, b.y0, b.x1, b.y1], TRUTH_COLOR);
    }
    for w in report.pseudo_boxes() {
        outline(&mut out, w, PRED_COLOR);
    }
    out
}

/// [`annotate`] written as PNG to `path`.
pub fn render(image: &RgbImage, report: &DetectionReport, truth: &[DefectBox], path: &Path) -> Result<RgbImage> {
    let out = annotate(image, report, truth);
    save_png(&out, path).map_err(|e| match e {
        crate::tiles::TilesError::Io { path, source } => DetectError::Io { path, source },
        other => DetectError::Tiles(other),
    })?;
    Ok(out)
}
