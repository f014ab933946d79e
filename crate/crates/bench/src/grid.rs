//! Feature grids rendered as 8-bit grayscale images.

use nalgebra::DVector;
use tsc::{build_generators, Forest};

use crate::error::CliResult;

/// Separator pixel value between cells.
pub const SEPARATOR: u8 = 255;
/// Value of every pixel of a cell with zero intensity range.
pub const FLAT_CELL: u8 = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GridMode {
    /// One row per tree, one cell per leaf.
    Leaves,
    /// A single row of roots.
    Roots,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Maps a cell to `0..=255` using its own min and max.
pub fn quantize_cell(cell: &[f64]) -> Vec<u8> {
    let (lo, hi) = cell.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(lo.abs()).max(1.0)) {
        return vec![FLAT_CELL; cell.len()];
    }
    cell.iter().map(|&v| ((v - lo) / range * 255.0).round() as u8).collect()
}

/// Lays out rows of `side × side` cells with one-pixel separators.
/// Short rows are padded with separator pixels.
pub fn render_rows(side: usize, rows: &[Vec<DVector<f64>>]) -> GrayImage {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let width = (cols * (side + 1)).saturating_sub(1);
    let height = (rows.len() * (side + 1)).saturating_sub(1);
    let mut pixels = vec![SEPARATOR; width * height];
    for (r, row) in rows.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            let q = quantize_cell(cell.as_slice());
            let (top, left) = (r * (side + 1), c * (side + 1));
            for y in 0..side {
                for x in 0..side {
                    pixels[(top + y) * width + left + x] = q[y * side + x];
                }
            }
        }
    }
    GrayImage { width, height, pixels }
}

/// Cell `(row, col)` of a grid, as stored in the image.
pub fn cell_pixels(image: &GrayImage, side: usize, row: usize, col: usize) -> Vec<u8> {
    let (top, left) = (row * (side + 1), col * (side + 1));
    (0..side * side).map(|p| image.pixels[(top + p / side) * image.width + left + p % side]).collect()
}

pub fn feature_grid(forest: &Forest<f64>, mode: GridMode) -> CliResult<GrayImage> {
    let side = forest.side();
    let rows = match mode {
        GridMode::Roots => vec![forest.trees().iter().map(|t| t.root().clone()).collect()],
        GridMode::Leaves => {
            let gens = build_generators::<f64>(side)?;
            let leaves = forest.materialize_leaves(&gens)?;
            let mut offset = 0;
            forest
                .trees()
                .iter()
                .map(|t| {
                    let n = t.leaves().len();
                    let row = (offset..offset + n).map(|k| leaves.column(k).into_owned()).collect();
                    offset += n;
                    row
                })
                .collect()
        }
    };
    Ok(render_rows(side, &rows))
}
