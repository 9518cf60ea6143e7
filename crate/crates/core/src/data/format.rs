//! `FSDS` binary layout, all integers and floats little-endian:
//!
//! ```text
//! "FSDS" | u32 version = 1 | u32 num_classes | u32 sample_dim
//! per class: u32 class_id | u32 super_category (0xFFFFFFFF = none)
//!            | u32 num_samples | num_samples × sample_dim × f32
//! ```

use std::path::Path;

use super::{ClassRecord, FewShotDataset};
use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSDS";
pub const FORMAT_VERSION: u32 = 1;
const NO_SUPER: u32 = u32::MAX;

pub fn write_dataset(ds: &FewShotDataset) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.len32(ds.num_classes(), "class count")?;
    w.len32(ds.sample_dim(), "sample_dim")?;
    for c in ds.classes() {
        w.u32(c.class_id);
        w.u32(c.super_category.unwrap_or(NO_SUPER));
        w.len32(c.num_samples(), "sample count")?;
        w.f32s(c.samples());
    }
    Ok(w.into_inner())
}

pub fn read_dataset(bytes: &[u8], name: &str) -> Result<FewShotDataset> {
    let mut r = ByteReader::new(bytes);
    r.magic(MAGIC)?;
    let at = r.offset() as usize;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(r.error_at(at, format!("unsupported version {version}")));
    }
    let num_classes = r.u32("class count")? as usize;
    let at = r.offset() as usize;
    let sample_dim = r.u32("sample_dim")? as usize;
    if sample_dim == 0 {
        return Err(r.error_at(at, "sample_dim is zero"));
    }
    let mut classes = Vec::with_capacity(num_classes.min(1 << 16));
    for i in 0..num_classes {
        let at = r.offset() as usize;
        let class_id = r.u32("class id")?;
        if class_id as usize != i {
            return Err(r.error_at(at, format!("class id {class_id} at position {i}; ids must be dense")));
        }
        let super_category = match r.u32("super category")? {
            NO_SUPER => None,
            s => Some(s),
        };
        let at = r.offset() as usize;
        let n = r.u32("sample count")? as usize;
        if n == 0 {
            return Err(r.error_at(at, format!("class {class_id} has no samples")));
        }
        let count = n
            .checked_mul(sample_dim)
            .ok_or_else(|| r.error_at(at, "sample count overflows"))?;
        let samples = r.f32s(count, "samples")?;
        classes.push(ClassRecord::new(class_id, super_category, samples, sample_dim)?);
    }
    r.finish()?;
    FewShotDataset::new(name, sample_dim, classes)
}

pub fn save_dataset(ds: &FewShotDataset, path: &Path) -> Result<()> {
    let bytes = write_dataset(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a dataset; its name is the file stem.
pub fn load_dataset(path: &Path) -> Result<FewShotDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_dataset(&bytes, &name)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FewShotDataset {
        FewShotDataset::new(
            "tiny",
            2,
            vec![
                ClassRecord::new(0, Some(3), vec![1.0, 2.0, -0.0, f32::MIN_POSITIVE], 2).unwrap(),
                ClassRecord::new(1, None, vec![0.5, 1e-30], 2).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = write_dataset(&tiny()).unwrap();
        let mut expected = b"FSDS".to_vec();
        for v in [1u32, 2, 2, 0, 3, 2] {
            expected.extend(v.to_le_bytes());
        }
        for v in [1.0f32, 2.0, -0.0, f32::MIN_POSITIVE] {
            expected.extend(v.to_le_bytes());
        }
        for v in [1u32, u32::MAX, 1] {
            expected.extend(v.to_le_bytes());
        }
        for v in [0.5f32, 1e-30] {
            expected.extend(v.to_le_bytes());
        }
        assert_eq!(bytes, expected);
        let back = read_dataset(&bytes, "tiny").unwrap();
        assert_eq!(back, tiny());
        assert_eq!(write_dataset(&back).unwrap(), bytes);
    }

    fn offset_of(err: Error) -> u64 {
        match err {
            Error::Format { offset, .. } => offset,
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let good = write_dataset(&tiny()).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(offset_of(read_dataset(&bad, "x").unwrap_err()), 0);

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(offset_of(read_dataset(&bad, "x").unwrap_err()), 4);

        let cut = &good[..good.len() - 3];
        let off = offset_of(read_dataset(cut, "x").unwrap_err());
        assert_eq!(off, (good.len() - 8) as u64);

        let mut long = good.clone();
        long.push(0);
        assert_eq!(offset_of(read_dataset(&long, "x").unwrap_err()), good.len() as u64);
    }

    #[test]
    fn rejects_sparse_class_ids() {
        let mut bytes = write_dataset(&tiny()).unwrap();
        bytes[16] = 5;
        assert_eq!(offset_of(read_dataset(&bytes, "x").unwrap_err()), 16);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.fsds");
        save_dataset(&tiny(), &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, tiny());
    }
}
