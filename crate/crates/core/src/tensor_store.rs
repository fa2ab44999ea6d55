//! KENW snapshot container: bit-exact reading, writing and validation of
//! named collections of 2-D `f32` matrices.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "KENW" | version u16 = 1 | tensor_count u32 |
//!   per tensor: name_len u16, name (UTF-8), rows u32, cols u32, dtype u8 = 0, payload rows*cols*4 |
//! crc32 u32 over every preceding byte
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::codec::{crc32, ByteReader};

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"KENW";
pub const SNAPSHOT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("bad magic: expected \"KENW\"")]
    BadMagic,
    #[error("unsupported snapshot version {0}")]
    UnsupportedVersion(u16),
    #[error("checksum mismatch: footer says {expected:#010x}, contents hash to {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("matrix `{matrix}` holds a non-finite value at flat index {index}")]
    NonFiniteValue { matrix: String, index: usize },
    #[error("file is truncated")]
    TruncatedFile,
    #[error("{0} trailing bytes after the last tensor")]
    TrailingBytes(usize),
    #[error("matrix `{matrix}` uses unsupported dtype {dtype}")]
    UnsupportedDtype { matrix: String, dtype: u8 },
    #[error("invalid matrix `{matrix}`: {reason}")]
    InvalidMatrix { matrix: String, reason: String },
    #[error("duplicate matrix name `{0}`")]
    DuplicateName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major `f32` matrix with a name.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl WeightMatrix {
    /// Builds a matrix, checking shape, name length and finiteness.
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        data: Vec<f32>,
    ) -> Result<Self, StoreError> {
        let name = name.into();
        let invalid = |reason: String| StoreError::InvalidMatrix {
            matrix: name.clone(),
            reason,
        };
        if rows == 0 || cols == 0 {
            return Err(invalid(format!("shape {rows}x{cols} has a zero dimension")));
        }
        if u32::try_from(rows).is_err() || u32::try_from(cols).is_err() {
            return Err(invalid(format!("shape {rows}x{cols} exceeds u32")));
        }
        if name.len() > usize::from(u16::MAX) {
            return Err(invalid(format!("name is {} bytes long", name.len())));
        }
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(invalid(format!(
                "{} values for shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue {
                matrix: name,
                index,
            });
        }
        Ok(Self {
            name,
            rows,
            cols,
            data,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
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
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows_iter(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.cols)
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Same name and shape, new values. Values are re-validated.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self, StoreError> {
        Self::new(self.name.clone(), self.rows, self.cols, data)
    }
}

/// Ordered collection of uniquely named matrices. The order is the layer
/// order used by layer-range filters and the layer-wise view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSnapshot {
    matrices: Vec<WeightMatrix>,
}

impl ModelSnapshot {
    pub fn new(matrices: Vec<WeightMatrix>) -> Result<Self, StoreError> {
        let mut seen = HashSet::with_capacity(matrices.len());
        for m in &matrices {
            if !seen.insert(m.name()) {
                return Err(StoreError::DuplicateName(m.name().to_owned()));
            }
        }
        if u32::try_from(matrices.len()).is_err() {
            return Err(StoreError::InvalidMatrix {
                matrix: String::new(),
                reason: "more than u32::MAX tensors".into(),
            });
        }
        Ok(Self { matrices })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn matrices(&self) -> &[WeightMatrix] {
        &self.matrices
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&WeightMatrix> {
        self.matrices.iter().find(|m| m.name() == name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.matrices.iter().position(|m| m.name() == name)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, WeightMatrix> {
        self.matrices.iter()
    }

    pub fn into_matrices(self) -> Vec<WeightMatrix> {
        self.matrices
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.matrices.iter().map(WeightMatrix::len).sum()
    }
}

impl<'a> IntoIterator for &'a ModelSnapshot {
    type Item = &'a WeightMatrix;
    type IntoIter = std::slice::Iter<'a, WeightMatrix>;

    fn into_iter(self) -> Self::IntoIter {
        self.matrices.iter()
    }
}

/// Canonical bytes of a snapshot, footer excluded.
fn encode_body(snapshot: &ModelSnapshot) -> Vec<u8> {
    let payload: usize = snapshot
        .iter()
        .map(|m| 2 + m.name().len() + 9 + 4 * m.len())
        .sum();
    let mut out = Vec::with_capacity(10 + payload + 4);
    out.extend_from_slice(&SNAPSHOT_MAGIC);
    out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    out.extend_from_slice(&(snapshot.len() as u32).to_le_bytes());
    for m in snapshot {
        out.extend_from_slice(&(m.name().len() as u16).to_le_bytes());
        out.extend_from_slice(m.name().as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        out.push(DTYPE_F32);
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serializes a snapshot to its KENW byte stream (including the CRC footer).
pub fn encode_snapshot(snapshot: &ModelSnapshot) -> Vec<u8> {
    let mut out = encode_body(snapshot);
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses a KENW byte stream. The CRC footer is checked before anything else
/// past the magic and version.
pub fn decode_snapshot(bytes: &[u8]) -> Result<ModelSnapshot, StoreError> {
    if bytes.len() < 4 {
        return Err(StoreError::TruncatedFile);
    }
    if bytes[..4] != SNAPSHOT_MAGIC {
        return Err(StoreError::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(StoreError::TruncatedFile);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != SNAPSHOT_VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    if bytes.len() < 14 {
        return Err(StoreError::TruncatedFile);
    }
    let (body, footer) = bytes.split_at(bytes.len() - 4);
    let expected = u32::from_le_bytes(footer.try_into().expect("4-byte footer"));
    let actual = crc32(body);
    if expected != actual {
        return Err(StoreError::ChecksumMismatch { expected, actual });
    }

    let mut r = ByteReader::new(&body[6..]);
    let trunc = |_| StoreError::TruncatedFile;
    let count = r.u32().map_err(trunc)? as usize;
    let mut matrices = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16().map_err(trunc)? as usize;
        let name_bytes = r.take(name_len).map_err(trunc)?;
        let name =
            String::from_utf8(name_bytes.to_vec()).map_err(|_| StoreError::InvalidMatrix {
                matrix: String::from_utf8_lossy(name_bytes).into_owned(),
                reason: "name is not valid UTF-8".into(),
            })?;
        let rows = r.u32().map_err(trunc)? as usize;
        let cols = r.u32().map_err(trunc)? as usize;
        let dtype = r.u8().map_err(trunc)?;
        if dtype != DTYPE_F32 {
            return Err(StoreError::UnsupportedDtype {
                matrix: name,
                dtype,
            });
        }
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or(StoreError::TruncatedFile)?;
        let payload = r.take(n).map_err(trunc)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        matrices.push(WeightMatrix::new(name, rows, cols, data)?);
    }
    if r.remaining() != 0 {
        return Err(StoreError::TrailingBytes(r.remaining()));
    }
    ModelSnapshot::new(matrices)
}

pub fn save_snapshot(snapshot: &ModelSnapshot, path: impl AsRef<Path>) -> Result<(), StoreError> {
    fs::write(path, encode_snapshot(snapshot))?;
    Ok(())
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<ModelSnapshot, StoreError> {
    decode_snapshot(&fs::read(path)?)
}

/// Loads a snapshot together with the checksum stored in its footer, which
/// is the value a delta container binds to.
pub fn load_snapshot_with_checksum(
    path: impl AsRef<Path>,
) -> Result<(ModelSnapshot, u32), StoreError> {
    let bytes = fs::read(path)?;
    let snapshot = decode_snapshot(&bytes)?;
    let tail = &bytes[bytes.len() - 4..];
    Ok((
        snapshot,
        u32::from_le_bytes(tail.try_into().expect("footer")),
    ))
}

/// CRC32 of the canonical serialization (every byte before the footer).
///
/// Serialization is canonical, so this equals the footer of any KENW file
/// holding `snapshot`.
pub fn snapshot_checksum(snapshot: &ModelSnapshot) -> u32 {
    crc32(&encode_body(snapshot))
}

/// Outcome of [`validate_pair`]: either compatible or the first mismatch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PairReport {
    Compatible,
    CountMismatch {
        pre: usize,
        fine: usize,
    },
    /// Same names present, different order. `index` is the first position
    /// where they disagree.
    OrderMismatch {
        index: usize,
        pre: String,
        fine: String,
    },
    NameMismatch {
        index: usize,
        pre: String,
        fine: String,
    },
    ShapeMismatch {
        name: String,
        pre: (usize, usize),
        fine: (usize, usize),
    },
}

impl PairReport {
    pub fn is_compatible(&self) -> bool {
        matches!(self, PairReport::Compatible)
    }
}

impl fmt::Display for PairReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairReport::Compatible => write!(f, "compatible"),
            PairReport::CountMismatch { pre, fine } => {
                write!(f, "pre-trained has {pre} matrices, fine-tuned has {fine}")
            }
            PairReport::OrderMismatch { index, pre, fine } => write!(
                f,
                "matrix order differs at position {index}: `{pre}` vs `{fine}`"
            ),
            PairReport::NameMismatch { index, pre, fine } => write!(
                f,
                "matrix name differs at position {index}: `{pre}` vs `{fine}`"
            ),
            PairReport::ShapeMismatch { name, pre, fine } => write!(
                f,
                "matrix `{name}` has shape {}x{} in pre-trained but {}x{} in fine-tuned",
                pre.0, pre.1, fine.0, fine.1
            ),
        }
    }
}

/// Checks that two snapshots have the same names, order and shapes.
pub fn validate_pair(pre: &ModelSnapshot, fine: &ModelSnapshot) -> PairReport {
    for (index, (a, b)) in pre.iter().zip(fine.iter()).enumerate() {
        if a.name() != b.name() {
            let reordered = fine.get(a.name()).is_some() && pre.get(b.name()).is_some();
            let (pre, fine) = (a.name().to_owned(), b.name().to_owned());
            return if reordered {
                PairReport::OrderMismatch { index, pre, fine }
            } else {
                PairReport::NameMismatch { index, pre, fine }
            };
        }
        if a.shape() != b.shape() {
            return PairReport::ShapeMismatch {
                name: a.name().to_owned(),
                pre: a.shape(),
                fine: b.shape(),
            };
        }
    }
    if pre.len() != fine.len() {
        return PairReport::CountMismatch {
            pre: pre.len(),
            fine: fine.len(),
        };
    }
    PairReport::Compatible
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(name: &str, rows: usize, cols: usize, data: Vec<f32>) -> WeightMatrix {
        WeightMatrix::new(name, rows, cols, data).unwrap()
    }

    fn three() -> ModelSnapshot {
        ModelSnapshot::new(vec![
            mat("L0.key", 2, 2, vec![1.0, 2.0, 3.0, 4.0]),
            mat("L0.value", 1, 3, vec![-0.5, 0.0, 0.25]),
            mat("L1.key", 2, 1, vec![7.0, -7.0]),
        ])
        .unwrap()
    }

    /// Re-seals a hand-edited body with a fresh footer.
    fn reseal(mut bytes: Vec<u8>) -> Vec<u8> {
        let n = bytes.len() - 4;
        bytes.truncate(n);
        let crc = crc32(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        bytes
    }

    #[test]
    fn single_matrix_round_trip() {
        let s = ModelSnapshot::new(vec![mat("L0.key", 2, 2, vec![1.0, 2.0, 3.0, 4.0])]).unwrap();
        let back = decode_snapshot(&encode_snapshot(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.matrices()[0].row(1), &[3.0, 4.0]);
    }

    #[test]
    fn empty_snapshot_layout() {
        let bytes = encode_snapshot(&ModelSnapshot::empty());
        assert_eq!(&bytes[..10], b"KENW\x01\x00\x00\x00\x00\x00");
        assert_eq!(bytes.len(), 14);
        // zlib.crc32(b"KENW\x01\x00\x00\x00\x00\x00") == 0x00ec062a
        assert_eq!(&bytes[10..], &0x00ec_062a_u32.to_le_bytes());
        assert_eq!(snapshot_checksum(&ModelSnapshot::empty()), 0x00ec_062a);
        assert!(decode_snapshot(&bytes).unwrap().is_empty());
    }

    #[test]
    fn order_is_preserved_and_bytes_are_deterministic() {
        let s = three();
        let a = encode_snapshot(&s);
        let b = encode_snapshot(&s.clone());
        assert_eq!(a, b);
        let names: Vec<_> = decode_snapshot(&a)
            .unwrap()
            .iter()
            .map(|m| m.name().to_owned())
            .collect();
        assert_eq!(names, ["L0.key", "L0.value", "L1.key"]);
    }

    #[test]
    fn flipped_crc_byte_is_rejected() {
        let mut bytes = encode_snapshot(&three());
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            decode_snapshot(&bytes),
            Err(StoreError::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn nan_payload_is_rejected() {
        let s = ModelSnapshot::new(vec![mat("L0.key", 2, 2, vec![1.0, 2.0, 3.0, 4.0])]).unwrap();
        let mut bytes = encode_snapshot(&s);
        // header 10 + name_len 2 + name 6 + rows 4 + cols 4 + dtype 1 = 27; third value at +8
        let at = 27 + 8;
        bytes[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = decode_snapshot(&reseal(bytes)).unwrap_err();
        assert!(
            matches!(err, StoreError::NonFiniteValue { ref matrix, index: 2 } if matrix == "L0.key"),
            "{err}"
        );
    }

    #[test]
    fn header_errors() {
        let good = encode_snapshot(&three());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_snapshot(&bad), Err(StoreError::BadMagic)));

        let mut v2 = good.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_snapshot(&v2),
            Err(StoreError::UnsupportedVersion(2))
        ));

        assert!(matches!(
            decode_snapshot(&good[..5]),
            Err(StoreError::TruncatedFile)
        ));
        // Cut the payload but keep a valid footer so parsing reaches the short read.
        let mut cut = good[..good.len() - 12].to_vec();
        cut.extend_from_slice(&[0; 4]);
        assert!(matches!(
            decode_snapshot(&reseal(cut)),
            Err(StoreError::TruncatedFile)
        ));
    }

    #[test]
    fn constructor_invariants() {
        assert!(WeightMatrix::new("a", 0, 3, vec![]).is_err());
        assert!(WeightMatrix::new("a", 2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            WeightMatrix::new("a", 1, 2, vec![0.0, f32::INFINITY]),
            Err(StoreError::NonFiniteValue { index: 1, .. })
        ));
        let dup = ModelSnapshot::new(vec![mat("a", 1, 1, vec![0.0]), mat("a", 1, 1, vec![1.0])]);
        assert!(matches!(dup, Err(StoreError::DuplicateName(_))));
    }

    #[test]
    fn file_round_trip_and_footer_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.kenw");
        let s = three();
        save_snapshot(&s, &path).unwrap();
        let (back, crc) = load_snapshot_with_checksum(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(crc, snapshot_checksum(&s));
    }

    #[test]
    fn validate_pair_reports() {
        let a = three();
        assert_eq!(validate_pair(&a, &a.clone()), PairReport::Compatible);

        let mut ms = a.clone().into_matrices();
        ms[1] = mat("L0.value", 1, 4, vec![0.0; 4]);
        let wider = ModelSnapshot::new(ms).unwrap();
        assert_eq!(
            validate_pair(&a, &wider),
            PairReport::ShapeMismatch {
                name: "L0.value".into(),
                pre: (1, 3),
                fine: (1, 4)
            }
        );

        let mut ms = a.clone().into_matrices();
        ms.swap(0, 2);
        let swapped = ModelSnapshot::new(ms).unwrap();
        assert!(matches!(
            validate_pair(&a, &swapped),
            PairReport::OrderMismatch { index: 0, .. }
        ));

        let mut ms = a.clone().into_matrices();
        ms[2] = mat("L2.key", 2, 1, vec![0.0; 2]);
        let renamed = ModelSnapshot::new(ms).unwrap();
        assert!(matches!(
            validate_pair(&a, &renamed),
            PairReport::NameMismatch { index: 2, .. }
        ));

        let mut ms = a.clone().into_matrices();
        ms.pop();
        let shorter = ModelSnapshot::new(ms).unwrap();
        assert_eq!(
            validate_pair(&a, &shorter),
            PairReport::CountMismatch { pre: 3, fine: 2 }
        );
        assert!(!validate_pair(&shorter, &a).is_compatible());
    }

    #[test]
    fn one_ulp_perturbations_change_the_checksum() {
        let base = three();
        let reference = snapshot_checksum(&base);
        let mut seen = HashSet::new();
        let mut state = 0x2545_f491_u32;
        for _ in 0..100 {
            state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
            let mut ms = base.clone().into_matrices();
            let which = (state as usize >> 4) % ms.len();
            let m = &ms[which];
            let idx = (state as usize >> 12) % m.len();
            let mut data = m.data().to_vec();
            data[idx] = f32::from_bits(data[idx].to_bits() ^ 1);
            ms[which] = m.with_data(data).unwrap();
            let c = snapshot_checksum(&ModelSnapshot::new(ms).unwrap());
            assert_ne!(c, reference);
            seen.insert(c);
        }
        assert!(seen.len() > 1);
    }
}
