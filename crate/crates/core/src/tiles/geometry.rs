use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DefectBox, Result, TilesError};

/// A tile is positive when it covers at least this fraction of some
/// defect box's area.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self { rows: 10, cols: 10 }
    }
}

impl Grid {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl FromStr for Grid {
    type Err = String;

    /// `ROWSxCOLS`, e.g. `10x10`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let bad = || format!("bad grid `{s}`: expected ROWSxCOLS such as 10x10");
        let (r, c) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let rows: usize = r.trim().parse().map_err(|_| bad())?;
        let cols: usize = c.trim().parse().map_err(|_| bad())?;
        if rows == 0 || cols == 0 {
            return Err(bad());
        }
        Ok(Self { rows, cols })
    }
}

/// Pixel window of one grid cell, edges `x0 <= x < x1`, `y0 <= y < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellWindow {
    pub row: usize,
    pub col: usize,
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl CellWindow {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

/// Row-major cell windows. Cells are `width / cols` by `height / rows`;
/// the last row and column absorb the remainder pixels.
pub fn cell_windows(width: u32, height: u32, grid: Grid) -> Result<Vec<CellWindow>> {
    if width == 0 || height == 0 {
        return Err(TilesError::EmptyImage);
    }
    if grid.rows == 0 || grid.cols == 0 || grid.rows > height as usize || grid.cols > width as usize {
        return Err(TilesError::GridTooLarge {
            rows: grid.rows,
            cols: grid.cols,
            width,
            height,
        });
    }
    let (cw, ch) = (width / grid.cols as u32, height / grid.rows as u32);
    let mut cells = Vec::with_capacity(grid.cells());
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let (r, c) = (row as u32, col as u32);
            cells.push(CellWindow {
                row,
                col,
                x0: c * cw,
                y0: r * ch,
                x1: if col + 1 == grid.cols { width } else { (c + 1) * cw },
                y1: if row + 1 == grid.rows { height } else { (r + 1) * ch },
            });
        }
    }
    Ok(cells)
}

/// Intersection area of `cell` and `b` divided by the area of `b`.
pub fn overlap_fraction(cell: &CellWindow, b: &DefectBox) -> f64 {
    let w = cell.x1.min(b.x1).saturating_sub(cell.x0.max(b.x0));
    let h = cell.y1.min(b.y1).saturating_sub(cell.y0.max(b.y0));
    (u64::from(w) * u64::from(h)) as f64 / b.area() as f64
}

/// `(label, max overlap)`: label 1 iff some box overlaps the cell by at
/// least `threshold` of its own area.
pub fn label_cell(cell: &CellWindow, boxes: &[DefectBox], threshold: f64) -> (u8, f64) {
    let best = boxes.iter().map(|b| overlap_fraction(cell, b)).fold(0.0, f64::max);
    (u8::from(!boxes.is_empty() && best >= threshold && best > 0.0), best)
}

/// One labeled grid cell of a board.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tile {
    pub window: CellWindow,
    pub label: u8,
    pub overlap: f64,
}

/// Labels every cell of a `width` x `height` image.
pub fn tile_image(width: u32, height: u32, boxes: &[DefectBox], grid: Grid, threshold: f64) -> Result<Vec<Tile>> {
    Ok(cell_windows(width, height, grid)?
        .into_iter()
        .map(|window| {
            let (label, overlap) = label_cell(&window, boxes, threshold);
            Tile { window, label, overlap }
        })
        .collect())
}
