//! Binary dump format, little-endian throughout.
//!
//! ```text
//! header  magic "LWEB" | version u16 | source u8 | head_size u16 | h u32 | l u32 | record_count u64
//! record  occurrence_id u64 | word_id u32 | sense_label u32 | aux_label i32 | h·l × f32 (layer-major)
//! ```
//!
//! `source` is 0 for hidden states (head_size must be 0) and 1 for attention
//! outputs. `aux_label = -1` marks an absent auxiliary label. Trailing bytes
//! after the last record are rejected.

use std::fs;
use std::path::Path;

use super::{EmbeddingSet, LayerwiseEmbedding, Source};
use crate::error::{Error, Result};
use crate::numerics::LayerTensor;

pub const DUMP_MAGIC: &[u8; 4] = b"LWEB";
pub const DUMP_VERSION: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 1 + 2 + 4 + 4 + 8;
const RECORD_PREFIX_LEN: usize = 8 + 4 + 4 + 4;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice has length N"))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take::<1>(what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(what)?))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }
    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(what)?))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(what)?))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(what)?))
    }
}

/// Parse a dump from memory.
pub fn read_dump(bytes: &[u8]) -> Result<EmbeddingSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take::<4>("magic")?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r.u16("version")?;
    if version != DUMP_VERSION {
        return Err(Error::Version(version));
    }
    let source_tag = r.u8("source")?;
    let head_size = r.u16("head_size")? as usize;
    let dim = r.u32("h")? as usize;
    let layers = r.u32("l")? as usize;
    let count = r.u64("record_count")?;

    let source = match (source_tag, head_size) {
        (0, 0) => Source::Hidden,
        (0, hs) => return Err(Error::Format(format!("hidden dump with head_size {hs}"))),
        (1, hs) => Source::Attention { head_size: hs },
        (tag, _) => return Err(Error::Format(format!("unknown source tag {tag}"))),
    };
    if dim == 0 || layers == 0 {
        return Err(Error::Format(format!("degenerate shape h={dim} l={layers}")));
    }
    if let Source::Attention { head_size } = source {
        if head_size == 0 || !dim.is_multiple_of(head_size) {
            return Err(Error::Format(format!(
                "h={dim} not divisible by head size {head_size}"
            )));
        }
    }

    // Validate the total length up front so a corrupt count never drives
    // allocation.
    let floats = dim
        .checked_mul(layers)
        .ok_or_else(|| Error::Format("h·l overflows".into()))?;
    let record_len = floats
        .checked_mul(4)
        .and_then(|n| n.checked_add(RECORD_PREFIX_LEN))
        .ok_or_else(|| Error::Format("record size overflows".into()))?;
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(record_len))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format(format!("record count {count} overflows")))?;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "truncated: {} bytes, header promises {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            bytes.len() - expected
        )));
    }

    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let occurrence_id = r.u64("occurrence_id")?;
        let word_id = r.u32("word_id")?;
        let sense_label = r.u32("sense_label")?;
        let aux = r.i32("aux_label")?;
        let aux_label = match aux {
            -1 => None,
            a if a >= 0 => Some(a),
            a => {
                return Err(Error::Format(format!(
                    "occurrence {occurrence_id}: invalid aux label {a}"
                )))
            }
        };
        let mut data = Vec::with_capacity(floats);
        for _ in 0..floats {
            let v = r.f32("tensor")?;
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "occurrence {occurrence_id}: non-finite tensor entry"
                )));
            }
            data.push(f64::from(v));
        }
        records.push(LayerwiseEmbedding {
            occurrence_id,
            word_id,
            sense_label,
            aux_label,
            tensor: LayerTensor::new(dim, layers, data)?,
        });
    }
    EmbeddingSet::new(source, dim, layers, records).map_err(|e| match e {
        Error::Format(m) => Error::Format(m),
        other => Error::Format(other.to_string()),
    })
}

/// Serialize a dataset. Tensor entries are narrowed to `f32`.
pub fn write_dump(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let (tag, head_size) = match set.source() {
        Source::Hidden => (0u8, 0usize),
        Source::Attention { head_size } => (1u8, head_size),
    };
    let head_size = u16::try_from(head_size)
        .map_err(|_| Error::Format(format!("head size {head_size} exceeds u16")))?;
    let dim = u32::try_from(set.dim()).map_err(|_| Error::Format("h exceeds u32".into()))?;
    let layers = u32::try_from(set.layers()).map_err(|_| Error::Format("l exceeds u32".into()))?;

    let floats = set.dim() * set.layers();
    let mut out = Vec::with_capacity(HEADER_LEN + set.len() * (RECORD_PREFIX_LEN + 4 * floats));
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&DUMP_VERSION.to_le_bytes());
    out.push(tag);
    out.extend_from_slice(&head_size.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.extend_from_slice(&layers.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for r in set.records() {
        out.extend_from_slice(&r.occurrence_id.to_le_bytes());
        out.extend_from_slice(&r.word_id.to_le_bytes());
        out.extend_from_slice(&r.sense_label.to_le_bytes());
        out.extend_from_slice(&r.aux_label.unwrap_or(-1).to_le_bytes());
        for &v in r.tensor.as_slice() {
            let narrow = v as f32;
            if !narrow.is_finite() {
                return Err(Error::NonFinite);
            }
            out.extend_from_slice(&narrow.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn load_dump(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_dump(&bytes)
}

pub fn save_dump(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_dump(set)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> EmbeddingSet {
        let records = vec![
            LayerwiseEmbedding {
                occurrence_id: 7,
                word_id: 1,
                sense_label: 10,
                aux_label: None,
                tensor: LayerTensor::new(2, 3, vec![0.5, -1.25, 3.0, 0.0, -0.0, 1e-3_f32 as f64])
                    .unwrap(),
            },
            LayerwiseEmbedding {
                occurrence_id: 9,
                word_id: 1,
                sense_label: 11,
                aux_label: Some(2),
                tensor: LayerTensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            },
        ];
        EmbeddingSet::new(Source::Hidden, 2, 3, records).unwrap()
    }

    #[test]
    fn empty_dump_loads_as_empty_dataset() {
        let set = EmbeddingSet::new(Source::Attention { head_size: 4 }, 8, 2, vec![]).unwrap();
        let bytes = write_dump(&set).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = read_dump(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.source(), Source::Attention { head_size: 4 });
    }

    #[test]
    fn golden_two_record_fixture() {
        let set = fixture();
        let bytes = write_dump(&set).unwrap();
        assert_eq!(&bytes[..4], b"LWEB");
        assert_eq!(bytes.len(), HEADER_LEN + 2 * (RECORD_PREFIX_LEN + 6 * 4));
        let back = read_dump(&bytes).unwrap();
        assert_eq!(back, set);
        for (a, b) in back.records().iter().zip(set.records()) {
            let bits_a: Vec<u64> = a.tensor.as_slice().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.tensor.as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(write_dump(&back).unwrap(), bytes);
    }

    #[test]
    fn full_size_record_reads_all_floats() {
        let tensor = LayerTensor::from_fn(768, 12, |d, l| (d * 12 + l) as f64);
        let rec = LayerwiseEmbedding {
            occurrence_id: 0,
            word_id: 0,
            sense_label: 0,
            aux_label: None,
            tensor,
        };
        let set = EmbeddingSet::new(Source::Hidden, 768, 12, vec![rec]).unwrap();
        let bytes = write_dump(&set).unwrap();
        // 768 * 12 = 9,216 floats, i.e. 36,864 payload bytes
        assert_eq!(bytes.len(), HEADER_LEN + RECORD_PREFIX_LEN + 36_864);
        let back = read_dump(&bytes).unwrap();
        assert_eq!(back.records()[0].tensor.as_slice().len(), 9_216);
    }

    #[test]
    fn rejects_bad_headers() {
        let mut bytes = write_dump(&fixture()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(read_dump(&bytes), Err(Error::Format(_))));

        let mut bytes = write_dump(&fixture()).unwrap();
        bytes[4..6].copy_from_slice(&2u16.to_le_bytes());
        assert!(matches!(read_dump(&bytes), Err(Error::Version(2))));

        let mut bytes = write_dump(&fixture()).unwrap();
        bytes[6] = 7;
        assert!(matches!(read_dump(&bytes), Err(Error::Format(_))));

        let mut bytes = write_dump(&fixture()).unwrap();
        bytes.push(0);
        assert!(matches!(read_dump(&bytes), Err(Error::Format(_))));

        // record_count far beyond the payload
        let mut bytes = write_dump(&fixture()).unwrap();
        bytes[17..25].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(read_dump(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_non_finite_and_bad_aux() {
        let mut bytes = write_dump(&fixture()).unwrap();
        let first_float = HEADER_LEN + RECORD_PREFIX_LEN;
        bytes[first_float..first_float + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_dump(&bytes), Err(Error::Format(_))));

        let mut bytes = write_dump(&fixture()).unwrap();
        let aux = HEADER_LEN + 16;
        bytes[aux..aux + 4].copy_from_slice(&(-5i32).to_le_bytes());
        assert!(matches!(read_dump(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let mut bytes = write_dump(&fixture()).unwrap();
        let second = HEADER_LEN + RECORD_PREFIX_LEN + 24;
        bytes[second..second + 8].copy_from_slice(&7u64.to_le_bytes());
        assert!(matches!(read_dump(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let bytes = write_dump(&fixture()).unwrap();
        for cut in 0..bytes.len() {
            match read_dump(&bytes[..cut]) {
                Err(Error::Format(_)) => {}
                other => panic!("cut at {cut}: {other:?}"),
            }
        }
    }
}
