//! KEND delta container: the retained fine-tuned values of a pruned model
//! plus the bitmask that places them, bound to the pre-trained base by CRC.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! "KEND" | version u16 = 1 | compress u8 (0 raw, 1 xz/LZMA2) | base_checksum u32 |
//! body, raw or compressed:
//!   matrix_count u32
//!   per matrix: name_len u16, name, rows u32, cols u32, k u32,
//!               mask ceil(rows*cols/8) bytes (LSB-first), values popcount*4 bytes f32
//! crc32 u32 over every preceding byte of the file
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::codec::{crc32, ByteReader};
use crate::mask::{mask_byte_len, NamedMask, SelectionMask};
use crate::tensor_store::{ModelSnapshot, WeightMatrix};

pub const DELTA_MAGIC: [u8; 4] = *b"KEND";
pub const DELTA_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 4;
const XZ_PRESET: u32 = 9;

#[derive(Debug, thiserror::Error)]
pub enum DeltaError {
    #[error("bad magic: expected \"KEND\"")]
    BadMagic,
    #[error("unsupported delta version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown compression flag {0}")]
    UnknownCompression(u8),
    #[error("checksum mismatch: footer says {expected:#010x}, contents hash to {actual:#010x}")]
    ChecksumMismatch { expected: u32, actual: u32 },
    #[error("corrupt mask for `{matrix}`: {reason}")]
    CorruptMask { matrix: String, reason: String },
    #[error("failed to decompress delta body: {0}")]
    DecompressError(std::io::Error),
    #[error("delta file is truncated")]
    TruncatedFile,
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("duplicate matrix `{0}` in delta")]
    DuplicateName(String),
    #[error("matrix `{matrix}` holds a non-finite value")]
    NonFiniteValue { matrix: String },
    #[error("mask for `{matrix}` is {}x{} but the matrix is {}x{}", mask.0, mask.1, matrix_shape.0, matrix_shape.1)]
    MaskShapeMismatch {
        matrix: String,
        mask: (usize, usize),
        matrix_shape: (usize, usize),
    },
    #[error("delta was built against base {expected:#010x}, got base {actual:#010x}")]
    BaseMismatch { expected: u32, actual: u32 },
    #[error("delta names matrix `{0}`, which the snapshot does not contain")]
    UnknownMatrix(String),
    #[error("matrix `{matrix}` is {}x{} in the snapshot but {}x{} in the delta", snapshot.0, snapshot.1, delta.0, delta.1)]
    ShapeMismatch {
        matrix: String,
        snapshot: (usize, usize),
        delta: (usize, usize),
    },
    #[error("field `{0}` does not fit the on-disk integer width")]
    Overflow(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Retained values of one matrix and where they go.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaEntry {
    name: String,
    k: usize,
    mask: SelectionMask,
    values: Vec<f32>,
}

impl DeltaEntry {
    /// Checks the per-row popcount and the value count against the mask.
    pub fn new(
        name: impl Into<String>,
        k: usize,
        mask: SelectionMask,
        values: Vec<f32>,
    ) -> Result<Self, DeltaError> {
        let name = name.into();
        let per_row = k.min(mask.cols());
        if let Some(i) = (0..mask.rows()).find(|&i| mask.row_count(i) != per_row) {
            return Err(DeltaError::CorruptMask {
                reason: format!(
                    "row {i} retains {} entries, expected {per_row}",
                    mask.row_count(i)
                ),
                matrix: name,
            });
        }
        if values.len() != mask.count_ones() {
            return Err(DeltaError::CorruptMask {
                reason: format!(
                    "{} values for {} retained positions",
                    values.len(),
                    mask.count_ones()
                ),
                matrix: name,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DeltaError::NonFiniteValue { matrix: name });
        }
        Ok(Self {
            name,
            k,
            mask,
            values,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn rows(&self) -> usize {
        self.mask.rows()
    }

    pub fn cols(&self) -> usize {
        self.mask.cols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mask(&self) -> &SelectionMask {
        &self.mask
    }

    /// Retained values in ascending flat-index order.
    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// The stored subnetwork: everything needed to rebuild the optimized model
/// from its pre-trained base.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaContainer {
    base_checksum: u32,
    entries: Vec<DeltaEntry>,
}

impl DeltaContainer {
    pub fn new(base_checksum: u32, entries: Vec<DeltaEntry>) -> Result<Self, DeltaError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(DeltaError::DuplicateName(e.name.clone()));
            }
        }
        Ok(Self {
            base_checksum,
            entries,
        })
    }

    pub fn base_checksum(&self) -> u32 {
        self.base_checksum
    }

    pub fn entries(&self) -> &[DeltaEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&DeltaEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Masks in entry order, e.g. for statistics or visualization.
    pub fn masks(&self) -> Vec<NamedMask> {
        self.entries
            .iter()
            .map(|e| NamedMask {
                name: e.name.clone(),
                mask: e.mask.clone(),
            })
            .collect()
    }

    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|e| e.values.len()).sum()
    }

    /// Byte accounting of the uncompressed body.
    pub fn sizes(&self) -> DeltaSizes {
        let values_bytes = 4 * self.value_count();
        let mask_bytes = self.entries.iter().map(|e| e.mask.as_bytes().len()).sum();
        let index_bytes = 4 + self
            .entries
            .iter()
            .map(|e| 2 + e.name.len() + 12)
            .sum::<usize>();
        DeltaSizes {
            values_bytes,
            mask_bytes,
            index_bytes,
        }
    }
}

/// Uncompressed body breakdown: model payload vs. the support mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeltaSizes {
    /// Retained `f32` values.
    pub values_bytes: usize,
    /// Position bitmasks.
    pub mask_bytes: usize,
    /// Matrix count, names, shapes and `k`.
    pub index_bytes: usize,
}

impl DeltaSizes {
    pub fn body_bytes(&self) -> usize {
        self.values_bytes + self.mask_bytes + self.index_bytes
    }

    /// Size of an uncompressed KEND file with this body.
    pub fn raw_file_bytes(&self) -> usize {
        HEADER_LEN + self.body_bytes() + 4
    }
}

/// Collects the masked fine-tuned values of each masked matrix.
pub fn extract_delta(
    base_checksum: u32,
    fine: &ModelSnapshot,
    masks: &[NamedMask],
    k: usize,
) -> Result<DeltaContainer, DeltaError> {
    let entries = masks
        .iter()
        .map(|nm| {
            let m = fine
                .get(&nm.name)
                .ok_or_else(|| DeltaError::UnknownMatrix(nm.name.clone()))?;
            if m.shape() != nm.mask.shape() {
                return Err(DeltaError::MaskShapeMismatch {
                    matrix: nm.name.clone(),
                    mask: nm.mask.shape(),
                    matrix_shape: m.shape(),
                });
            }
            let values = nm.mask.iter_ones().map(|f| m.data()[f]).collect();
            DeltaEntry::new(nm.name.clone(), k, nm.mask.clone(), values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    DeltaContainer::new(base_checksum, entries)
}

fn put_u32(out: &mut Vec<u8>, v: usize, field: &'static str) -> Result<(), DeltaError> {
    let v = u32::try_from(v).map_err(|_| DeltaError::Overflow(field))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn encode_body(delta: &DeltaContainer) -> Result<Vec<u8>, DeltaError> {
    let mut out = Vec::with_capacity(delta.sizes().body_bytes());
    put_u32(&mut out, delta.entries.len(), "matrix_count")?;
    for e in &delta.entries {
        let name_len = u16::try_from(e.name.len()).map_err(|_| DeltaError::Overflow("name_len"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        put_u32(&mut out, e.rows(), "rows")?;
        put_u32(&mut out, e.cols(), "cols")?;
        // k beyond the row length behaves like k = cols, so clamp to fit.
        put_u32(&mut out, e.k.min(u32::MAX as usize), "k")?;
        out.extend_from_slice(e.mask.as_bytes());
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn encode_delta(delta: &DeltaContainer, compress: bool) -> Result<Vec<u8>, DeltaError> {
    let body = encode_body(delta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + 4);
    out.extend_from_slice(&DELTA_MAGIC);
    out.extend_from_slice(&DELTA_VERSION.to_le_bytes());
    out.push(u8::from(compress));
    out.extend_from_slice(&delta.base_checksum.to_le_bytes());
    if compress {
        let mut enc = xz2::write::XzEncoder::new(out, XZ_PRESET);
        enc.write_all(&body)?;
        out = enc.finish()?;
    } else {
        out.extend_from_slice(&body);
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn decode_body(base_checksum: u32, body: &[u8]) -> Result<DeltaContainer, DeltaError> {
    let mut r = ByteReader::new(body);
    let trunc = |_| DeltaError::TruncatedFile;
    let count = r.u32().map_err(trunc)? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u16().map_err(trunc)? as usize;
        let name = String::from_utf8_lossy(r.take(name_len).map_err(trunc)?).into_owned();
        let rows = r.u32().map_err(trunc)? as usize;
        let cols = r.u32().map_err(trunc)? as usize;
        let k = r.u32().map_err(trunc)? as usize;
        if rows == 0 || cols == 0 {
            return Err(DeltaError::CorruptMask {
                matrix: name,
                reason: format!("shape {rows}x{cols} has a zero dimension"),
            });
        }
        let n_bytes = rows
            .checked_mul(cols)
            .map(|_| mask_byte_len(rows, cols))
            .ok_or(DeltaError::TruncatedFile)?;
        let raw = r.take(n_bytes).map_err(trunc)?.to_vec();
        let mask =
            SelectionMask::from_bytes(rows, cols, raw).ok_or_else(|| DeltaError::CorruptMask {
                matrix: name.clone(),
                reason: "padding bits past the last entry are set".into(),
            })?;
        let n_values = mask.count_ones();
        let values = r
            .take(4 * n_values)
            .map_err(trunc)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(DeltaEntry::new(name, k, mask, values)?);
    }
    if r.remaining() != 0 {
        return Err(DeltaError::TrailingBytes(r.remaining()));
    }
    DeltaContainer::new(base_checksum, entries)
}

pub fn decode_delta(bytes: &[u8]) -> Result<DeltaContainer, DeltaError> {
    if bytes.len() < 4 {
        return Err(DeltaError::TruncatedFile);
    }
    if bytes[..4] != DELTA_MAGIC {
        return Err(DeltaError::BadMagic);
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(DeltaError::TruncatedFile);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != DELTA_VERSION {
        return Err(DeltaError::UnsupportedVersion(version));
    }
    let (head, footer) = bytes.split_at(bytes.len() - 4);
    let expected = u32::from_le_bytes(footer.try_into().expect("4-byte footer"));
    let actual = crc32(head);
    if expected != actual {
        return Err(DeltaError::ChecksumMismatch { expected, actual });
    }
    let flag = bytes[6];
    let base_checksum = u32::from_le_bytes(bytes[7..11].try_into().expect("4 bytes"));
    let stored = &head[HEADER_LEN..];
    match flag {
        0 => decode_body(base_checksum, stored),
        1 => {
            let mut body = Vec::new();
            xz2::read::XzDecoder::new(stored)
                .read_to_end(&mut body)
                .map_err(DeltaError::DecompressError)?;
            decode_body(base_checksum, &body)
        }
        other => Err(DeltaError::UnknownCompression(other)),
    }
}

pub fn save_delta(
    delta: &DeltaContainer,
    path: impl AsRef<Path>,
    compress: bool,
) -> Result<(), DeltaError> {
    fs::write(path, encode_delta(delta, compress)?)?;
    Ok(())
}

pub fn load_delta(path: impl AsRef<Path>) -> Result<DeltaContainer, DeltaError> {
    decode_delta(&fs::read(path)?)
}

/// Rebuilds the optimized model: masked positions of each delta matrix are
/// overwritten with the stored values, everything else comes from `pre`.
pub fn inject(
    pre: &ModelSnapshot,
    pre_checksum: u32,
    delta: &DeltaContainer,
) -> Result<ModelSnapshot, DeltaError> {
    if delta.base_checksum != pre_checksum {
        return Err(DeltaError::BaseMismatch {
            expected: delta.base_checksum,
            actual: pre_checksum,
        });
    }
    for e in &delta.entries {
        let m = pre
            .get(&e.name)
            .ok_or_else(|| DeltaError::UnknownMatrix(e.name.clone()))?;
        if m.shape() != e.mask.shape() {
            return Err(DeltaError::ShapeMismatch {
                matrix: e.name.clone(),
                snapshot: m.shape(),
                delta: e.mask.shape(),
            });
        }
    }
    let matrices: Vec<WeightMatrix> = pre
        .matrices()
        .par_iter()
        .map(|m| match delta.get(m.name()) {
            None => m.clone(),
            Some(e) => {
                let mut data = m.data().to_vec();
                for (f, &v) in e.mask.iter_ones().zip(&e.values) {
                    data[f] = v;
                }
                m.with_data(data)
                    .expect("shape and values already validated")
            }
        })
        .collect();
    Ok(ModelSnapshot::new(matrices).expect("names come from a valid snapshot"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruner::{prune_snapshot, PruneConfig};
    use crate::tensor_store::snapshot_checksum;

    fn mat(name: &str, rows: usize, cols: usize, data: Vec<f32>) -> WeightMatrix {
        WeightMatrix::new(name, rows, cols, data).unwrap()
    }

    fn pair() -> (ModelSnapshot, ModelSnapshot) {
        let pre = ModelSnapshot::new(vec![
            mat("a", 2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5]),
            mat("b", 1, 3, vec![0.0; 3]),
            mat("c", 2, 2, vec![9.0; 4]),
        ])
        .unwrap();
        let fine = ModelSnapshot::new(vec![
            mat("a", 2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.1, -4.0]),
            mat("b", 1, 3, vec![-1.0, -0.9, 5.0]),
            mat("c", 2, 2, vec![1.0, 2.0, 3.0, 4.0]),
        ])
        .unwrap();
        (pre, fine)
    }

    #[test]
    fn extraction_examples() {
        let (_, fine) = pair();
        let empty = extract_delta(1, &fine, &[], 1).unwrap();
        assert!(empty.entries().is_empty());

        let mut mask = SelectionMask::empty(1, 3);
        mask.set(0, 1);
        let d = extract_delta(
            1,
            &fine,
            &[NamedMask {
                name: "b".into(),
                mask,
            }],
            1,
        )
        .unwrap();
        assert_eq!(d.entries()[0].values(), &[-0.9]);

        let full = NamedMask {
            name: "c".into(),
            mask: SelectionMask::full(2, 2),
        };
        let d = extract_delta(1, &fine, &[full], 2).unwrap();
        assert_eq!(d.entries()[0].values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn extraction_errors() {
        let (_, fine) = pair();
        let wrong = NamedMask {
            name: "c".into(),
            mask: SelectionMask::full(1, 4),
        };
        assert!(matches!(
            extract_delta(0, &fine, &[wrong], 4),
            Err(DeltaError::MaskShapeMismatch { .. })
        ));
        let ghost = NamedMask {
            name: "zz".into(),
            mask: SelectionMask::full(1, 1),
        };
        assert!(matches!(
            extract_delta(0, &fine, &[ghost], 1),
            Err(DeltaError::UnknownMatrix(_))
        ));
        // Row popcounts must all equal min(k, cols).
        let uneven = NamedMask {
            name: "c".into(),
            mask: SelectionMask::from_row_indices(2, 2, [vec![0], vec![0, 1]]),
        };
        assert!(matches!(
            extract_delta(0, &fine, &[uneven], 1),
            Err(DeltaError::CorruptMask { .. })
        ));
    }

    fn pruned_delta(k: usize) -> (ModelSnapshot, ModelSnapshot, DeltaContainer) {
        let (pre, fine) = pair();
        let out = prune_snapshot(&pre, &fine, &PruneConfig::new(k)).unwrap();
        let delta = extract_delta(snapshot_checksum(&pre), &fine, &out.masks, k).unwrap();
        (pre, out.snapshot, delta)
    }

    #[test]
    fn round_trip_raw_and_compressed() {
        let (_, _, delta) = pruned_delta(2);
        let raw = encode_delta(&delta, false).unwrap();
        let xz = encode_delta(&delta, true).unwrap();
        assert_eq!(raw.len(), delta.sizes().raw_file_bytes());
        assert_eq!(raw[6], 0);
        assert_eq!(xz[6], 1);
        assert_eq!(decode_delta(&raw).unwrap(), delta);
        assert_eq!(decode_delta(&xz).unwrap(), delta);
        assert_eq!(encode_delta(&delta, true).unwrap(), xz);
    }

    #[test]
    fn raw_layout_is_bit_exact() {
        let (_, fine) = pair();
        let mut mask = SelectionMask::empty(1, 3);
        mask.set(0, 1);
        let d = extract_delta(
            0xdead_beef,
            &fine,
            &[NamedMask {
                name: "b".into(),
                mask,
            }],
            1,
        )
        .unwrap();
        let bytes = encode_delta(&d, false).unwrap();
        let mut want = b"KEND\x01\x00\x00".to_vec();
        want.extend_from_slice(&0xdead_beef_u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&[1, 0, b'b']);
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&3u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.push(0b010);
        want.extend_from_slice(&(-0.9f32).to_le_bytes());
        let crc = crc32(&want);
        want.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn tampering_is_detected() {
        let (_, _, delta) = pruned_delta(1);
        let raw = encode_delta(&delta, false).unwrap();
        // First mask byte of entry "a": 11 header + 4 count + 2 + 1 name + 12 shape/k.
        let at = HEADER_LEN + 4 + 3 + 12;
        let mut bad = raw.clone();
        bad[at] ^= 0b0000_0100;
        assert!(matches!(
            decode_delta(&bad),
            Err(DeltaError::ChecksumMismatch { .. })
        ));
        let n = bad.len() - 4;
        let crc = crc32(&bad[..n]);
        bad[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_delta(&bad),
            Err(DeltaError::CorruptMask { .. }
                | DeltaError::TruncatedFile
                | DeltaError::TrailingBytes(_))
        ));

        let mut magic = raw.clone();
        magic[3] = b'W';
        assert!(matches!(decode_delta(&magic), Err(DeltaError::BadMagic)));

        // Garbage labelled as compressed, with a valid footer.
        let mut junk = raw[..HEADER_LEN].to_vec();
        junk[6] = 1;
        junk.extend_from_slice(&[0x42; 32]);
        let crc = crc32(&junk);
        junk.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            decode_delta(&junk),
            Err(DeltaError::DecompressError(_))
        ));
    }

    #[test]
    fn injection_cases() {
        let (pre, optimized, delta) = pruned_delta(2);
        let crc = snapshot_checksum(&pre);
        assert_eq!(inject(&pre, crc, &delta).unwrap(), optimized);

        let empty = DeltaContainer::new(crc, vec![]).unwrap();
        assert_eq!(inject(&pre, crc, &empty).unwrap(), pre);

        let (_, fine) = pair();
        let (_, _, full) = pruned_delta(3);
        assert_eq!(inject(&pre, crc, &full).unwrap(), fine);

        assert!(matches!(
            inject(&pre, crc ^ 1, &delta),
            Err(DeltaError::BaseMismatch { .. })
        ));

        let other = ModelSnapshot::new(vec![mat("a", 3, 2, vec![0.0; 6])]).unwrap();
        let d =
            DeltaContainer::new(snapshot_checksum(&other), delta.entries()[..1].to_vec()).unwrap();
        assert!(matches!(
            inject(&other, snapshot_checksum(&other), &d),
            Err(DeltaError::ShapeMismatch { .. })
        ));
        let d = DeltaContainer::new(crc, delta.entries()[1..2].to_vec()).unwrap();
        let only_a = ModelSnapshot::new(vec![pre.matrices()[0].clone()]).unwrap();
        assert!(matches!(
            inject(&only_a, crc, &d),
            Err(DeltaError::UnknownMatrix(_))
        ));
    }

    #[test]
    fn uncompressed_size_grows_with_k() {
        let mut last = 0;
        for k in 0..=3 {
            let (_, _, d) = pruned_delta(k);
            let n = encode_delta(&d, false).unwrap().len();
            assert!(n >= last);
            last = n;
        }
    }
}
