//! Per-row Gaussian kernel density estimation and likelihood-ranked top-k
//! column selection.
//!
//! Every row element is scored by the density of the row's own KDE evaluated
//! at that element. The `k` highest-scoring columns are retained. Bandwidth
//! follows Scott's rule over the `m` samples of the row:
//!
//! ```text
//! h = 1.06 * sd * m^(-1/5)      (sd uses the m - 1 denominator)
//! ```
//!
//! Scores include the self-kernel; it adds the same `phi(0) / (m h)` to every
//! element, so it never changes the ranking. All arithmetic is done in `f64`
//! and in a fixed order, so scores are bit-reproducible.

use std::cmp::Ordering;
use std::f64::consts::PI;

/// Standard deviations below this are treated as zero spread.
pub const DEGENERATE_SD: f64 = 1e-12;

const SCOTT_FACTOR: f64 = 1.06;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KdeError {
    #[error("row of length {0} is too short to estimate a bandwidth (need at least 2)")]
    RowTooShort(usize),
    #[error("bandwidth must be positive and finite, got {0}")]
    InvalidBandwidth(f64),
}

/// Positive, finite kernel bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(h: f64) -> Result<Self, KdeError> {
        if h > 0.0 && h.is_finite() {
            Ok(Self(h))
        } else {
            Err(KdeError::InvalidBandwidth(h))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Result of Scott's rule on one row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScottBandwidth {
    Smooth(Bandwidth),
    /// The row has (numerically) zero spread; every element is equally likely.
    Degenerate,
}

impl ScottBandwidth {
    pub fn bandwidth(self) -> Option<Bandwidth> {
        match self {
            ScottBandwidth::Smooth(h) => Some(h),
            ScottBandwidth::Degenerate => None,
        }
    }
}

/// Sample standard deviation (denominator `m - 1`), two-pass.
pub fn sample_sd(row: &[f32]) -> f64 {
    let m = row.len() as f64;
    let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / m;
    let ss: f64 = row
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum();
    (ss / (m - 1.0)).sqrt()
}

pub fn bandwidth_scott(row: &[f32]) -> Result<ScottBandwidth, KdeError> {
    if row.len() < 2 {
        return Err(KdeError::RowTooShort(row.len()));
    }
    let sd = sample_sd(row);
    if sd.is_nan() || sd < DEGENERATE_SD {
        return Ok(ScottBandwidth::Degenerate);
    }
    let h = SCOTT_FACTOR * sd * (row.len() as f64).powf(-0.2);
    match Bandwidth::new(h) {
        Ok(h) => Ok(ScottBandwidth::Smooth(h)),
        // Only reachable through overflow of an extreme-range row.
        Err(_) => Ok(ScottBandwidth::Degenerate),
    }
}

#[inline]
fn kernel_sum(row: &[f32], x: f64, inv_h: f64) -> f64 {
    row.iter()
        .map(|&r| {
            let z = (x - f64::from(r)) * inv_h;
            (-0.5 * z * z).exp()
        })
        .sum()
}

/// Gaussian KDE of `row` with bandwidth `h`, evaluated at `x`.
pub fn kde_density(row: &[f32], h: Bandwidth, x: f64) -> f64 {
    if row.is_empty() {
        return 0.0;
    }
    let h = h.get();
    let norm = 1.0 / (row.len() as f64 * h * (2.0 * PI).sqrt());
    norm * kernel_sum(row, x, 1.0 / h)
}

/// Retained columns for one row plus the score of every column.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSelection {
    /// Strictly increasing column indices, `min(k, m)` of them.
    pub indices: Vec<usize>,
    /// KDE likelihood of each column's value. All zero for a degenerate row.
    pub densities: Vec<f64>,
}

/// Scores every element of `row` by its KDE likelihood.
///
/// Rows of length one and zero-spread rows have no usable bandwidth and
/// score every element `0.0`.
pub fn row_densities(row: &[f32]) -> Vec<f64> {
    let h = match bandwidth_scott(row) {
        Ok(ScottBandwidth::Smooth(h)) => h,
        Ok(ScottBandwidth::Degenerate) | Err(_) => return vec![0.0; row.len()],
    };
    row.iter()
        .map(|&x| kde_density(row, h, f64::from(x)))
        .collect()
}

/// Column order by descending density, ties by ascending index.
pub fn rank_columns(densities: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..densities.len()).collect();
    order.sort_by(|&a, &b| {
        densities[b]
            .partial_cmp(&densities[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// The `min(k, m)` columns of `row` with the highest KDE likelihood, in
/// ascending column order.
pub fn select_top_k_row(row: &[f32], k: usize) -> RowSelection {
    let densities = row_densities(row);
    let keep = k.min(row.len());
    let mut indices = if keep == row.len() {
        (0..keep).collect()
    } else {
        let mut order = rank_columns(&densities);
        order.truncate(keep);
        order
    };
    indices.sort_unstable();
    RowSelection { indices, densities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PHI0: f64 = 0.398_942_280_401_432_7;

    #[test]
    fn scott_on_32_samples_halves_the_factor() {
        // 16 copies of +a and -a with a^2 = 31/32 gives sd == 1.
        let a = (31.0f64 / 32.0).sqrt() as f32;
        let mut row = vec![a; 16];
        row.extend(vec![-a; 16]);
        let h = bandwidth_scott(&row).unwrap().bandwidth().unwrap().get();
        let sd = sample_sd(&row);
        assert!((sd - 1.0).abs() < 1e-7);
        assert_eq!(32f64.powf(-0.2), 0.5);
        assert_eq!(h, 0.53 * sd);
        assert!((h - 0.53).abs() < 1e-7);
    }

    #[test]
    fn scott_two_point_row() {
        // 1.06 * sqrt(2) * 2^(-1/5), evaluated independently in Python.
        let h = bandwidth_scott(&[0.0, 2.0])
            .unwrap()
            .bandwidth()
            .unwrap()
            .get();
        assert!((h - 1.305_013_078_145_611_5).abs() < 1e-12, "{h}");
    }

    #[test]
    fn scott_degenerate_and_short() {
        assert_eq!(
            bandwidth_scott(&[5.0; 4]).unwrap(),
            ScottBandwidth::Degenerate
        );
        assert_eq!(bandwidth_scott(&[1.0]), Err(KdeError::RowTooShort(1)));
        assert_eq!(bandwidth_scott(&[]), Err(KdeError::RowTooShort(0)));
    }

    #[test]
    fn bandwidth_rejects_non_positive() {
        assert!(Bandwidth::new(0.0).is_err());
        assert!(Bandwidth::new(-1.0).is_err());
        assert!(Bandwidth::new(f64::NAN).is_err());
        assert!(Bandwidth::new(f64::INFINITY).is_err());
    }

    #[test]
    fn single_kernel_peak() {
        let d = kde_density(&[0.0], Bandwidth::new(1.0).unwrap(), 0.0);
        assert!((d - PHI0).abs() < 1e-15);
    }

    #[test]
    fn three_point_example() {
        let row = [-1.0, -0.9, 5.0];
        let h = bandwidth_scott(&row).unwrap().bandwidth().unwrap();
        // Brute-force values from an independent Python evaluation.
        assert!((h.get() - 2.923_371_101_435_051).abs() < 1e-12);
        let d = row_densities(&row);
        let expected = [
            0.096_486_910_902_625_48,
            0.096_886_063_074_151_15,
            0.056_959_666_208_201_074,
        ];
        for (got, want) in d.iter().zip(expected) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
        assert!(kde_density(&row, h, -0.9) > kde_density(&row, h, 5.0));
        assert_eq!(select_top_k_row(&row, 1).indices, [1]);
        assert_eq!(select_top_k_row(&row, 2).indices, [0, 1]);
        assert_eq!(select_top_k_row(&row, 3).indices, [0, 1, 2]);
    }

    #[test]
    fn constant_row_breaks_ties_by_index() {
        let sel = select_top_k_row(&[7.0; 4], 2);
        assert_eq!(sel.indices, [0, 1]);
        assert!(sel.densities.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn k_bounds() {
        let row = [0.3, -1.2, 2.5, 0.0, 0.7];
        assert!(select_top_k_row(&row, 0).indices.is_empty());
        assert_eq!(select_top_k_row(&row, 5).indices, [0, 1, 2, 3, 4]);
        assert_eq!(select_top_k_row(&row, 99).indices, [0, 1, 2, 3, 4]);
        assert_eq!(select_top_k_row(&[4.0], 1).indices, [0]);
        assert!(select_top_k_row(&[4.0], 0).indices.is_empty());
    }

    #[test]
    fn self_term_does_not_change_ranking() {
        let row = [0.1f32, -0.4, 1.9, 0.35, -2.2, 0.0, 0.6];
        let h = bandwidth_scott(&row).unwrap().bandwidth().unwrap().get();
        let m = row.len() as f64;
        let loo: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                row.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &r)| {
                        let z = (f64::from(x) - f64::from(r)) / h;
                        (-0.5 * z * z).exp() * PHI0
                    })
                    .sum::<f64>()
                    / (m * h)
            })
            .collect();
        assert_eq!(rank_columns(&loo), rank_columns(&row_densities(&row)));
    }

    fn rows() -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-4.0f32..4.0, 2..40)
    }

    proptest! {
        #[test]
        fn density_is_symmetric(row in rows(), x in -5.0f64..5.0, h in 0.05f64..3.0) {
            let neg: Vec<f32> = row.iter().map(|v| -v).collect();
            let h = Bandwidth::new(h).unwrap();
            let a = kde_density(&row, h, x);
            let b = kde_density(&neg, h, -x);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
        }

        #[test]
        fn densities_are_finite_and_nonnegative(row in rows()) {
            prop_assert!(row_densities(&row).iter().all(|d| d.is_finite() && *d >= 0.0));
        }

        #[test]
        fn selections_nest_in_k(row in rows()) {
            let mut prev: Vec<usize> = Vec::new();
            for k in 0..=row.len() {
                let sel = select_top_k_row(&row, k);
                prop_assert_eq!(sel.indices.len(), k);
                prop_assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(prev.iter().all(|i| sel.indices.contains(i)));
                prev = sel.indices;
            }
        }
    }
}
