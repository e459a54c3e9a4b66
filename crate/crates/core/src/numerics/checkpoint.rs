//! Binary checkpoint container.
//!
//! Layout, little-endian:
//!
//! ```text
//! "MRNC" | version: u32 | config_len: u32 | config: utf-8 bytes
//! repeated until EOF:
//!   name_len: u32 | name: utf-8 | rank: u32 | extents: u32 * rank | payload: f64 * prod(extents)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::binio::Reader;
use crate::error::Result;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MRNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize an embedded config text and the parameter store.
pub fn encode_checkpoint(config: &str, params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<(String, ParamStore)> {
    let mut r = Reader::new(buf);
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.fail("bad magic, expected MRNC");
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        r.pos -= 4;
        return r.fail(format!("unsupported version {version}"));
    }
    let clen = r.u32("config length")? as usize;
    let config = r.utf8(clen, "config")?;
    let mut params = ParamStore::new();
    while !r.at_end() {
        let nlen = r.u32("name length")? as usize;
        let name = r.utf8(nlen, "name")?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n * 8, "payload")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((config, params))
}

/// Write via a temporary sibling file and rename, so readers never observe
/// a partial checkpoint.
pub fn save_checkpoint(path: &Path, config: &str, params: &ParamStore) -> Result<()> {
    let bytes = encode_checkpoint(config, params);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(String, ParamStore)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn sample() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(
            "enc.w",
            Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap(),
        );
        p.insert("enc.bn.running_var", Tensor::from_vec(vec![1.0, 2.0]));
        p.insert("s", Tensor::scalar(7.0));
        p
    }

    #[test]
    fn round_trips_config_and_params() {
        let bytes = encode_checkpoint("k = 20\n", &sample());
        assert_eq!(&bytes[..4], b"MRNC");
        let (cfg, p) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, "k = 20\n");
        assert_eq!(p, sample());
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_checkpoint("", &sample());
        let cut = bytes.len() - 3;
        match decode_checkpoint(&bytes[..cut]) {
            Err(Error::Format { offset, msg }) => {
                assert!(msg.contains("payload"), "{msg}");
                assert!(offset as usize <= cut);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(
            decode_checkpoint(b"MRND\x01\0\0\0"),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn atomic_save_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mrnc");
        save_checkpoint(&path, "x = 1\n", &sample()).unwrap();
        assert!(!path.with_extension("tmp").exists());
        assert_eq!(load_checkpoint(&path).unwrap().1, sample());
    }
}
