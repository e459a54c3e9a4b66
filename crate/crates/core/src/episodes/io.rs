//! Binary dataset container plus its split manifest.
//!
//! Layout, little-endian:
//!
//! ```text
//! "MRND" | version: u32 | class_count: u32
//! repeated until EOF:
//!   class_id: u32 | rank: u8 | extents: u32 * rank | payload: f32 * prod(extents)
//! ```
//!
//! The manifest sits next to the binary as `<file>.splits`, one
//! `class_id split` pair per line; `#` starts a comment.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Dataset, Item, Split};
use crate::binio::Reader;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MRND";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let classes: BTreeSet<u32> = ds.items().iter().map(|it| it.class_id).collect();
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(classes.len() as u32).to_le_bytes());
    for it in ds.items() {
        out.extend_from_slice(&it.class_id.to_le_bytes());
        out.push(it.shape.len() as u8);
        for &e in &it.shape {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in &it.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_items(buf: &[u8]) -> Result<Vec<Item>> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != DATASET_MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected MRND");
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let class_count = r.u32("class count")?;
    if class_count == 0 {
        r.pos -= 4;
        return r.fail("empty class list");
    }
    let mut items = Vec::new();
    let mut seen = BTreeSet::new();
    while !r.at_end() {
        let class_id = r.u32("class id")?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4, "payload")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        seen.insert(class_id);
        items.push(Item {
            class_id,
            shape,
            data,
        });
    }
    if seen.len() != class_count as usize {
        return r.fail(format!(
            "header declares {class_count} classes, found {}",
            seen.len()
        ));
    }
    Ok(items)
}

pub fn encode_manifest(ds: &Dataset) -> String {
    let mut out = String::from("# class split\n");
    for (c, s) in ds.split_map() {
        out.push_str(&format!("{c} {s}\n"));
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<BTreeMap<u32, Split>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || {
            Error::Dataset(format!(
                "manifest line {}: expected `class_id split`",
                n + 1
            ))
        };
        let mut parts = line.split_whitespace();
        let class: u32 = parts.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
        let split: Split = parts.next().ok_or_else(bad)?.parse()?;
        if parts.next().is_some() {
            return Err(bad());
        }
        if map.insert(class, split).is_some() {
            return Err(Error::Dataset(format!(
                "manifest line {}: class {class} listed twice",
                n + 1
            )));
        }
    }
    Ok(map)
}

pub fn read_dataset(binary: &[u8], manifest: &str) -> Result<Dataset> {
    Dataset::new(decode_items(binary)?, parse_manifest(manifest)?)
}

/// Sidecar manifest location for a dataset file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(".splits");
    PathBuf::from(s)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds))?;
    fs::write(manifest_path(path), encode_manifest(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let binary = fs::read(path)?;
    let manifest = fs::read_to_string(manifest_path(path))?;
    read_dataset(&binary, &manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{synth_dataset, SynthSpec};

    fn small() -> Dataset {
        synth_dataset(&SynthSpec {
            classes: 5,
            dim: 3,
            items_per_class: 4,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_in_memory() {
        let ds = small();
        let back = read_dataset(&encode_dataset(&ds), &encode_manifest(&ds)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.mrnd");
        let ds = small();
        write_dataset(&ds, &path).unwrap();
        assert!(dir.path().join("synth.mrnd.splits").exists());
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn image_items_round_trip() {
        let items = vec![Item {
            class_id: 3,
            shape: vec![1, 2, 2],
            data: vec![0.5, -1.0, 2.25, 1e-3],
        }];
        let ds = Dataset::new(items, BTreeMap::from([(3, Split::Val)])).unwrap();
        assert_eq!(
            read_dataset(&encode_dataset(&ds), &encode_manifest(&ds)).unwrap(),
            ds
        );
    }

    #[test]
    fn empty_class_list_is_a_format_error() {
        let mut buf = DATASET_MAGIC.to_vec();
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            decode_items(&buf),
            Err(Error::Format { offset: 8, .. })
        ));
    }

    #[test]
    fn header_errors_carry_offsets() {
        let bytes = encode_dataset(&small());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_items(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_items(&v2),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_dataset(&small());
        // header 12 bytes, then per item 4 + 1 + 4 + 3 * 4 = 21 bytes
        let cut = 12 + 21 + 10;
        match decode_items(&bytes[..cut]) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 12 + 21 + 9);
                assert!(msg.contains("payload"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn class_count_must_match() {
        let mut bytes = encode_dataset(&small());
        bytes[8] = 6;
        assert!(matches!(decode_items(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# header\n0 train\n1 val # note\n\n2 test\n").unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[&1], Split::Val);
        assert!(parse_manifest("0 train\n0 test\n").is_err());
        assert!(parse_manifest("x train\n").is_err());
        assert!(parse_manifest("0 holdout\n").is_err());
    }
}
