//! Per-matrix retention bitmask.

use std::fmt;

/// Row-major bitset over a `rows x cols` matrix. Flat index `f` lives in bit
/// `f % 8` of byte `f / 8` (LSB first), which is also its on-disk layout.
#[derive(Clone, PartialEq, Eq)]
pub struct SelectionMask {
    rows: usize,
    cols: usize,
    bytes: Vec<u8>,
}

impl fmt::Debug for SelectionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SelectionMask")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("retained", &self.count_ones())
            .finish()
    }
}

pub(crate) fn mask_byte_len(rows: usize, cols: usize) -> usize {
    (rows * cols).div_ceil(8)
}

impl SelectionMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bytes: vec![0; mask_byte_len(rows, cols)],
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        let mut mask = Self::empty(rows, cols);
        for f in 0..rows * cols {
            mask.set_flat(f);
        }
        mask
    }

    /// Builds a mask from per-row retained column lists.
    pub fn from_row_indices<I, R>(rows: usize, cols: usize, per_row: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[usize]>,
    {
        let mut mask = Self::empty(rows, cols);
        for (i, idx) in per_row.into_iter().enumerate() {
            for &j in idx.as_ref() {
                mask.set(i, j);
            }
        }
        mask
    }

    /// Wraps raw bytes. Returns `None` if the length is wrong or padding bits
    /// past the last entry are set.
    pub fn from_bytes(rows: usize, cols: usize, bytes: Vec<u8>) -> Option<Self> {
        if bytes.len() != mask_byte_len(rows, cols) {
            return None;
        }
        let used = (rows * cols) % 8;
        if used != 0 && bytes.last().is_some_and(|&b| b >> used != 0) {
            return None;
        }
        Some(Self { rows, cols, bytes })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    #[inline]
    pub fn get_flat(&self, f: usize) -> bool {
        self.bytes[f / 8] >> (f % 8) & 1 == 1
    }

    #[inline]
    pub fn set_flat(&mut self, f: usize) {
        self.bytes[f / 8] |= 1 << (f % 8);
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        debug_assert!(i < self.rows && j < self.cols);
        self.get_flat(i * self.cols + j)
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize) {
        assert!(i < self.rows && j < self.cols, "({i}, {j}) out of bounds");
        self.set_flat(i * self.cols + j);
    }

    pub fn count_ones(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn row_count(&self, i: usize) -> usize {
        (i * self.cols..(i + 1) * self.cols)
            .filter(|&f| self.get_flat(f))
            .count()
    }

    /// Retained flat indices in ascending order.
    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bytes.iter().enumerate().flat_map(|(byte_idx, &b)| {
            (0..8)
                .filter(move |bit| b >> bit & 1 == 1)
                .map(move |bit| byte_idx * 8 + bit)
        })
    }
}

/// A mask tagged with the matrix it belongs to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedMask {
    pub name: String,
    pub mask: SelectionMask,
}
