//! Builds the optimized matrix: per row, the selected columns keep their
//! fine-tuned value and every other column is reset to its pre-trained value.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::kde::select_top_k_row;
use crate::mask::{NamedMask, SelectionMask};
use crate::tensor_store::{validate_pair, ModelSnapshot, PairReport, StoreError, WeightMatrix};

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("row length mismatch: pre-trained {pre}, fine-tuned {fine}")]
    LengthMismatch { pre: usize, fine: usize },
    #[error("matrix `{name}`: pre-trained is {}x{}, fine-tuned is {}x{}", pre.0, pre.1, fine.0, fine.1)]
    ShapeMismatch {
        name: String,
        pre: (usize, usize),
        fine: (usize, usize),
    },
    #[error("incompatible snapshot pair: {0}")]
    IncompatiblePair(PairReport),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// How the retained columns of each row are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    /// Highest KDE likelihood within the fine-tuned row.
    Kde,
    /// Uniformly random columns without replacement. The stream for each row
    /// is derived from `(seed, matrix index, row index)`, so results do not
    /// depend on scheduling.
    Random { seed: u64 },
}

impl SelectionStrategy {
    fn select(self, fine_row: &[f32], k: usize, matrix: usize, row: usize) -> Vec<usize> {
        match self {
            SelectionStrategy::Kde => select_top_k_row(fine_row, k).indices,
            SelectionStrategy::Random { seed } => {
                let m = fine_row.len();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((matrix as u64) << 32) | row as u64);
                let mut idx = rand::seq::index::sample(&mut rng, m, k.min(m)).into_vec();
                idx.sort_unstable();
                idx
            }
        }
    }
}

/// Inclusive range over snapshot matrix positions, written `LO..HI`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerRange {
    lo: usize,
    hi: usize,
}

impl LayerRange {
    pub fn new(lo: usize, hi: usize) -> Option<Self> {
        (lo <= hi).then_some(Self { lo, hi })
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.lo..=self.hi).contains(&index)
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.lo, self.hi)
    }
}

impl FromStr for LayerRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lo, hi) = s
            .split_once("..")
            .ok_or_else(|| format!("expected LO..HI, got `{s}`"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad bound `{v}`: {e}"))
        };
        let (lo, hi) = (parse(lo)?, parse(hi)?);
        LayerRange::new(lo, hi).ok_or_else(|| format!("empty range: {lo} > {hi}"))
    }
}

#[derive(Debug, Clone)]
pub struct PruneConfig {
    /// Retained entries per row; clamped to the row length.
    pub k: usize,
    /// When non-empty, only matrices whose name matches one of these globs.
    pub matrix_filter: Vec<glob::Pattern>,
    pub layer_range: Option<LayerRange>,
}

impl PruneConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            matrix_filter: Vec::new(),
            layer_range: None,
        }
    }

    pub fn with_patterns<S: AsRef<str>>(
        mut self,
        patterns: &[S],
    ) -> Result<Self, glob::PatternError> {
        for p in patterns {
            self.matrix_filter.push(glob::Pattern::new(p.as_ref())?);
        }
        Ok(self)
    }

    pub fn with_layer_range(mut self, range: LayerRange) -> Self {
        self.layer_range = Some(range);
        self
    }

    pub fn selects(&self, index: usize, name: &str) -> bool {
        let in_range = self.layer_range.is_none_or(|r| r.contains(index));
        let matches =
            self.matrix_filter.is_empty() || self.matrix_filter.iter().any(|p| p.matches(name));
        in_range && matches
    }
}

/// Applies the binary reset rule to one row.
pub fn optimize_row(pre_row: &[f32], fine_row: &[f32], k: usize) -> Result<Vec<f32>, PruneError> {
    if pre_row.len() != fine_row.len() {
        return Err(PruneError::LengthMismatch {
            pre: pre_row.len(),
            fine: fine_row.len(),
        });
    }
    let keep = select_top_k_row(fine_row, k).indices;
    Ok(merge_row(pre_row, fine_row, &keep))
}

fn merge_row(pre_row: &[f32], fine_row: &[f32], keep: &[usize]) -> Vec<f32> {
    let mut out = pre_row.to_vec();
    for &j in keep {
        out[j] = fine_row[j];
    }
    out
}

pub fn optimize_matrix(
    pre: &WeightMatrix,
    fine: &WeightMatrix,
    k: usize,
) -> Result<(WeightMatrix, SelectionMask), PruneError> {
    optimize_matrix_with(pre, fine, k, SelectionStrategy::Kde, 0)
}

/// Row-parallel optimization of one matrix. `matrix_index` only feeds the
/// random strategy's stream derivation.
pub fn optimize_matrix_with(
    pre: &WeightMatrix,
    fine: &WeightMatrix,
    k: usize,
    strategy: SelectionStrategy,
    matrix_index: usize,
) -> Result<(WeightMatrix, SelectionMask), PruneError> {
    if pre.shape() != fine.shape() {
        return Err(PruneError::ShapeMismatch {
            name: fine.name().to_owned(),
            pre: pre.shape(),
            fine: fine.shape(),
        });
    }
    let (rows, cols) = fine.shape();
    let per_row: Vec<(Vec<usize>, Vec<f32>)> = pre
        .data()
        .par_chunks_exact(cols)
        .zip(fine.data().par_chunks_exact(cols))
        .enumerate()
        .map(|(i, (p, f))| {
            let keep = strategy.select(f, k, matrix_index, i);
            let row = merge_row(p, f, &keep);
            (keep, row)
        })
        .collect();

    let mut mask = SelectionMask::empty(rows, cols);
    let mut data = Vec::with_capacity(rows * cols);
    for (i, (keep, row)) in per_row.into_iter().enumerate() {
        for j in keep {
            mask.set(i, j);
        }
        data.extend_from_slice(&row);
    }
    Ok((fine.with_data(data)?, mask))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatrixStats {
    pub name: String,
    pub retained: usize,
    pub total: usize,
}

impl MatrixStats {
    pub fn reset_fraction(&self) -> f64 {
        reset_fraction(self.retained, self.total)
    }
}

fn reset_fraction(retained: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        1.0 - retained as f64 / total as f64
    }
}

/// Retained vs. reset accounting over the optimized matrices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneStats {
    pub matrices: Vec<MatrixStats>,
}

impl PruneStats {
    pub fn retained(&self) -> usize {
        self.matrices.iter().map(|m| m.retained).sum()
    }

    pub fn total(&self) -> usize {
        self.matrices.iter().map(|m| m.total).sum()
    }

    pub fn reset_fraction(&self) -> f64 {
        reset_fraction(self.retained(), self.total())
    }

    pub fn reset_percent(&self) -> f64 {
        100.0 * self.reset_fraction()
    }
}

/// Formats a fraction as a percentage with two decimals, e.g. `26.55`.
pub fn format_percent(fraction: f64) -> String {
    format!("{:.2}", 100.0 * fraction)
}

impl fmt::Display for PruneStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .matrices
            .iter()
            .map(|m| m.name.len())
            .chain(std::iter::once(6))
            .max()
            .unwrap_or(6);
        writeln!(
            f,
            "{:<width$}  {:>12}  {:>12}  {:>8}",
            "matrix", "retained", "total", "reset%"
        )?;
        for m in &self.matrices {
            writeln!(
                f,
                "{:<width$}  {:>12}  {:>12}  {:>8}",
                m.name,
                m.retained,
                m.total,
                format_percent(m.reset_fraction())
            )?;
        }
        write!(
            f,
            "{:<width$}  {:>12}  {:>12}  {:>8}",
            "TOTAL",
            self.retained(),
            self.total(),
            format_percent(self.reset_fraction())
        )
    }
}

pub fn reset_stats(masks: &[NamedMask]) -> PruneStats {
    PruneStats {
        matrices: masks
            .iter()
            .map(|m| MatrixStats {
                name: m.name.clone(),
                retained: m.mask.count_ones(),
                total: m.mask.len(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct PruneOutcome {
    /// Fine-tuned snapshot with every selected matrix replaced by its
    /// optimized version.
    pub snapshot: ModelSnapshot,
    /// One mask per optimized matrix, in snapshot order.
    pub masks: Vec<NamedMask>,
    pub stats: PruneStats,
}

pub fn prune_snapshot(
    pre: &ModelSnapshot,
    fine: &ModelSnapshot,
    cfg: &PruneConfig,
) -> Result<PruneOutcome, PruneError> {
    prune_snapshot_with(pre, fine, cfg, SelectionStrategy::Kde)
}

/// Optimizes every matrix selected by `cfg`; others are copied from `fine`.
pub fn prune_snapshot_with(
    pre: &ModelSnapshot,
    fine: &ModelSnapshot,
    cfg: &PruneConfig,
    strategy: SelectionStrategy,
) -> Result<PruneOutcome, PruneError> {
    let report = validate_pair(pre, fine);
    if !report.is_compatible() {
        return Err(PruneError::IncompatiblePair(report));
    }
    let mut matrices = Vec::with_capacity(fine.len());
    let mut masks = Vec::new();
    for (index, (p, f)) in pre.iter().zip(fine.iter()).enumerate() {
        if cfg.selects(index, f.name()) {
            let (optimized, mask) = optimize_matrix_with(p, f, cfg.k, strategy, index)?;
            masks.push(NamedMask {
                name: f.name().to_owned(),
                mask,
            });
            matrices.push(optimized);
        } else {
            matrices.push(f.clone());
        }
    }
    let stats = reset_stats(&masks);
    Ok(PruneOutcome {
        snapshot: ModelSnapshot::new(matrices)?,
        masks,
        stats,
    })
}
