//! Versioned binary checkpoint container: a JSON header describing the
//! architecture followed by named row-major f64 arrays. Round-trips are
//! bit-exact (raw little-endian f64).

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GBXCKPT1";

pub fn write_checkpoint<H: Serialize>(
    path: &Path,
    header: &H,
    arrays: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| Error::Checkpoint(format!("header serialization: {e}")))?;
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    buf.extend_from_slice(&(arrays.len() as u64).to_le_bytes());
    for (name, data) in arrays {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<(String, Vec<f64>)>)> {
    let mut f = std::fs::File::open(path).map_err(|e| {
        Error::Missing(format!("checkpoint {}: {e}", path.display()))
    })?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint {}",
                path.display()
            )));
        }
        let s = &buf[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let read_u64 = |off: &mut usize| -> Result<u64> {
        let s = take(off, 8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()))
    };

    if take(&mut off, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let hlen = read_u64(&mut off)? as usize;
    let header: H = serde_json::from_slice(take(&mut off, hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header parse: {e}")))?;
    let count = read_u64(&mut off)? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = read_u64(&mut off)? as usize;
        let name = String::from_utf8(take(&mut off, nlen)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("array name: {e}")))?;
        let dlen = read_u64(&mut off)? as usize;
        let raw = take(&mut off, dlen * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, data));
    }
    Ok((header, arrays))
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// SHA-256 of a byte slice, hex-encoded.
pub fn bytes_sha256(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Header {
        version: u32,
        note: String,
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("greybox-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");
        let header = Header {
            version: 3,
            note: "abc".into(),
        };
        // Awkward values: subnormals, negative zero, extremes.
        let arrays = vec![
            (
                "w".to_string(),
                vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -3.141592653589793],
            ),
            ("b".to_string(), vec![0.1 + 0.2]),
        ];
        write_checkpoint(&path, &header, &arrays).unwrap();
        let (h2, a2): (Header, _) = read_checkpoint(&path).unwrap();
        assert_eq!(header, h2);
        assert_eq!(arrays.len(), a2.len());
        for ((n1, d1), (n2, d2)) in arrays.iter().zip(a2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(d1.len(), d2.len());
            for (x, y) in d1.iter().zip(d2.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = std::env::temp_dir().join("greybox-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(read_checkpoint::<Header>(&path).is_err());
    }
}
