//! Grayscale views of a pruned model, written as binary PGM (P5).
//!
//! * single matrix: retained entries shaded by magnitude, pruned entries blank
//! * neighbor count: how many 4-neighbors of each retained entry are retained
//! * layer-wise: the single-matrix view for every matrix matching a pattern

use std::fs;
use std::path::{Path, PathBuf};

use crate::mask::{NamedMask, SelectionMask};
use crate::tensor_store::{ModelSnapshot, WeightMatrix};

pub const BLANK: u8 = 255;

#[derive(Debug, thiserror::Error)]
pub enum VizError {
    #[error("matrix `{matrix}` is {}x{} but its mask is {}x{}", matrix_shape.0, matrix_shape.1, mask.0, mask.1)]
    ShapeMismatch {
        matrix: String,
        matrix_shape: (usize, usize),
        mask: (usize, usize),
    },
    #[error("pattern `{0}` matches no pruned matrix")]
    PatternMatchesNothing(String),
    #[error("invalid pattern: {0}")]
    BadPattern(#[from] glob::PatternError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<(), VizError> {
        fs::write(path, self.to_pgm())?;
        Ok(())
    }
}

/// Retained-neighbor counts (up, down, left, right) of each retained cell.
/// Cells that are not retained are 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGrid {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u8>,
}

impl NeighborGrid {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.counts[i * self.cols + j]
    }
}

fn shade(v: f32, maxabs: f64) -> u8 {
    if maxabs == 0.0 {
        return 0;
    }
    let level = 254.0 * (1.0 - f64::from(v).abs() / maxabs);
    (level + 0.5).floor().clamp(0.0, 254.0) as u8
}

pub fn single_matrix_image(
    matrix: &WeightMatrix,
    mask: &SelectionMask,
) -> Result<GrayImage, VizError> {
    if matrix.shape() != mask.shape() {
        return Err(VizError::ShapeMismatch {
            matrix: matrix.name().to_owned(),
            matrix_shape: matrix.shape(),
            mask: mask.shape(),
        });
    }
    let maxabs = mask
        .iter_ones()
        .map(|f| f64::from(matrix.data()[f]).abs())
        .fold(0.0, f64::max);
    let pixels = matrix
        .data()
        .iter()
        .enumerate()
        .map(|(f, &v)| {
            if mask.get_flat(f) {
                shade(v, maxabs)
            } else {
                BLANK
            }
        })
        .collect();
    Ok(GrayImage {
        width: matrix.cols(),
        height: matrix.rows(),
        pixels,
    })
}

pub fn render_single_matrix(
    matrix: &WeightMatrix,
    mask: &SelectionMask,
    path: impl AsRef<Path>,
) -> Result<(), VizError> {
    single_matrix_image(matrix, mask)?.save_pgm(path)
}

pub fn neighbor_counts(mask: &SelectionMask) -> NeighborGrid {
    let (rows, cols) = mask.shape();
    let mut counts = vec![0u8; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            if !mask.get(i, j) {
                continue;
            }
            let up = i > 0 && mask.get(i - 1, j);
            let down = i + 1 < rows && mask.get(i + 1, j);
            let left = j > 0 && mask.get(i, j - 1);
            let right = j + 1 < cols && mask.get(i, j + 1);
            counts[i * cols + j] = [up, down, left, right].iter().filter(|&&b| b).count() as u8;
        }
    }
    NeighborGrid { rows, cols, counts }
}

pub fn neighbor_image(grid: &NeighborGrid) -> GrayImage {
    GrayImage {
        width: grid.cols,
        height: grid.rows,
        pixels: grid.counts.iter().map(|&c| 255 - 51 * c.min(4)).collect(),
    }
}

pub fn render_neighbor_view(grid: &NeighborGrid, path: impl AsRef<Path>) -> Result<(), VizError> {
    neighbor_image(grid).save_pgm(path)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Renders the single-matrix view of every masked matrix whose name matches
/// `pattern`, in snapshot order. Files are named `NN_<name>.pgm` where `NN`
/// is the zero-padded position among the matches.
pub fn render_layerwise(
    snapshot: &ModelSnapshot,
    masks: &[NamedMask],
    pattern: &str,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>, VizError> {
    let glob = glob::Pattern::new(pattern)?;
    let selected: Vec<(&WeightMatrix, &SelectionMask)> = snapshot
        .iter()
        .filter(|m| glob.matches(m.name()))
        .filter_map(|m| {
            masks
                .iter()
                .find(|nm| nm.name == m.name())
                .map(|nm| (m, &nm.mask))
        })
        .collect();
    if selected.is_empty() {
        return Err(VizError::PatternMatchesNothing(pattern.to_owned()));
    }
    let width = selected.len().saturating_sub(1).to_string().len().max(2);
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    selected
        .into_iter()
        .enumerate()
        .map(|(i, (m, mask))| {
            let path = out_dir.join(format!("{i:0width$}_{}.pgm", file_stem(m.name())));
            render_single_matrix(m, mask, &path)?;
            Ok(path)
        })
        .collect()
}
