//! Centre-cell target assignment with "opposite edge" distance targets.
//!
//! A ground truth goes to the first level whose cutoff `2 * stride` covers
//! `max(w, h)` (the last level takes everything larger) and to the cell that
//! contains its centre. Cells own the half-open span `(i s, (i + 1) s]`, so a
//! centre exactly on a boundary belongs to the lower-index cell. The four
//! targets measure from each box edge to the far edge of that cell:
//!
//! ```text
//! l = cell_right - x1    t = cell_bottom - y1
//! r = x2 - cell_left     b = y2 - cell_top
//! ```
//!
//! which are strictly positive because the centre lies inside the cell.

use std::collections::BTreeMap;

use super::data::GroundTruth;
use crate::losses::BBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGrid {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelGrid {
    /// Grids of a square input for the given strides.
    pub fn for_input(size: usize, strides: &[usize]) -> Vec<LevelGrid> {
        strides.iter().map(|&s| LevelGrid { stride: s, height: size.div_ceil(s), width: size.div_ceil(s) }).collect()
    }

    /// Pixel span `(left, top, right, bottom)` of cell `(y, x)`.
    pub fn cell_bounds(&self, y: usize, x: usize) -> [f64; 4] {
        let s = self.stride as f64;
        [x as f64 * s, y as f64 * s, (x + 1) as f64 * s, (y + 1) as f64 * s]
    }
}

/// Index of the cell owning coordinate `c`: `ceil(c / s) - 1`, clamped.
pub fn cell_index(c: f64, stride: usize, cells: usize) -> usize {
    let i = (c / stride as f64).ceil() as i64 - 1;
    i.clamp(0, cells as i64 - 1) as usize
}

/// Level for a box of the given extent.
pub fn level_for(extent: f64, grids: &[LevelGrid]) -> usize {
    grids.iter().position(|g| extent <= 2.0 * g.stride as f64).unwrap_or(grids.len() - 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositiveCell {
    pub image: usize,
    pub level: usize,
    pub y: usize,
    pub x: usize,
    /// Index of the ground truth within its image.
    pub gt: usize,
    pub class: usize,
    /// `(l, t, r, b)` distances in pixels.
    pub ltrb: [f64; 4],
    pub gt_box: BBox,
}

/// Encodes a box relative to cell `(y, x)`.
pub fn encode(grid: &LevelGrid, y: usize, x: usize, b: &BBox) -> [f64; 4] {
    let [left, top, right, bottom] = grid.cell_bounds(y, x);
    let [x1, y1, x2, y2] = b.corners();
    [right - x1, bottom - y1, x2 - left, y2 - top]
}

/// Corners `(x1, y1, x2, y2)` from distances relative to cell `(y, x)`.
pub fn decode(grid: &LevelGrid, y: usize, x: usize, ltrb: [f64; 4]) -> [f64; 4] {
    let [left, top, right, bottom] = grid.cell_bounds(y, x);
    [right - ltrb[0], bottom - ltrb[1], left + ltrb[2], top + ltrb[3]]
}

/// Positive cells of a batch, ordered by image, level, row, column. When two
/// boxes claim a cell the smaller area wins, ties to the lower index.
pub fn assign(labels: &[Vec<GroundTruth>], grids: &[LevelGrid]) -> Vec<PositiveCell> {
    let mut cells: BTreeMap<(usize, usize, usize, usize), PositiveCell> = BTreeMap::new();
    for (image, gts) in labels.iter().enumerate() {
        for (k, g) in gts.iter().enumerate() {
            let level = level_for(g.bbox.w.max(g.bbox.h), grids);
            let grid = &grids[level];
            let y = cell_index(g.bbox.cy, grid.stride, grid.height);
            let x = cell_index(g.bbox.cx, grid.stride, grid.width);
            let cand =
                PositiveCell { image, level, y, x, gt: k, class: g.class, ltrb: encode(grid, y, x, &g.bbox), gt_box: g.bbox };
            cells
                .entry((image, level, y, x))
                .and_modify(|cur| {
                    if g.bbox.area() < cur.gt_box.area() {
                        *cur = cand;
                    }
                })
                .or_insert(cand);
        }
    }
    cells.into_values().collect()
}
