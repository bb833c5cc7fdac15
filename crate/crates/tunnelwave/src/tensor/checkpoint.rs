//! `PRBW1` parameter checkpoints: an ordered list of named float32 tensors
//! plus a free-form JSON trailer (model config, RNG seed).
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "PRBPNW01" | u32 version | u32 n_params
//! per parameter: u32 name_len | name | u32 ndim | u32 dims[] | f32 data[]
//! u32 json_len | json
//! ```
//!
//! Values are stored as f32; loading widens back to f64, so
//! save -> load -> save reproduces identical bytes.

use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"PRBPNW01";
const VERSION: u32 = 1;

pub fn save_weights(
    path: &Path,
    params: &[(String, ArrayD<f64>)],
    meta: &serde_json::Value,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_weights(&mut w, params, meta)?;
    w.flush()?;
    Ok(())
}

pub fn write_weights<W: Write>(
    w: &mut W,
    params: &[(String, ArrayD<f64>)],
    meta: &serde_json::Value,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, value) in params {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(value.ndim() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in value.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    let json = serde_json::to_vec(meta)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<(Vec<(String, ArrayD<f64>)>, serde_json::Value)> {
    let mut r = BufReader::new(File::open(path)?);
    read_weights(&mut r)
}

pub fn read_weights<R: Read>(r: &mut R) -> Result<(Vec<(String, ArrayD<f64>)>, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Truncated("while reading magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "PRBPNW01",
            found: magic.to_vec(),
        });
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            format: "PRBW1",
            version,
        });
    }
    let n = read_u32(r, "parameter count")? as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = read_u32(r, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Truncated("while reading parameter name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Truncated("parameter name is not UTF-8".into()))?;
        let ndim = read_u32(r, "rank")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let d = read_u32(r, "dimension")? as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| Error::DimensionOverflow(format!("parameter {name}")))?;
            dims.push(d);
        }
        if len > (1 << 30) {
            return Err(Error::DimensionOverflow(format!(
                "parameter {name} claims {len} elements"
            )));
        }
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Truncated(format!("data of parameter {name}")))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let value = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::DimensionOverflow(format!("parameter {name}: {e}")))?;
        params.push((name, value));
    }
    let json_len = read_u32(r, "metadata length")? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Truncated("while reading metadata".into()))?;
    let meta = serde_json::from_slice(&json)?;
    Ok((params, meta))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Truncated(format!("while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Little-endian f64 tensor block, used by the trainer's resume files where
/// full precision matters.
pub fn write_f64_tensor<W: Write>(w: &mut W, value: &ArrayD<f64>) -> Result<()> {
    w.write_all(&(value.ndim() as u32).to_le_bytes())?;
    for &d in value.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in value.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64_tensor<R: Read>(r: &mut R) -> Result<ArrayD<f64>> {
    let ndim = read_u32(r, "rank")? as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut len = 1usize;
    for _ in 0..ndim {
        let d = read_u32(r, "dimension")? as usize;
        len = len
            .checked_mul(d)
            .ok_or_else(|| Error::DimensionOverflow("tensor block".into()))?;
        dims.push(d);
    }
    if len > (1 << 30) {
        return Err(Error::DimensionOverflow(format!("{len} elements")));
    }
    let mut raw = vec![0u8; len * 8];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Truncated("tensor data".into()))?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| Error::DimensionOverflow(format!("tensor block: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.prbw");
        let params = vec![
            (
                "net.w".to_string(),
                ArrayD::from_shape_fn(IxDyn(&[2, 1, 3, 3]), |i| (i[3] as f64) * 0.25 - 0.5),
            ),
            ("net.b".to_string(), ArrayD::zeros(IxDyn(&[2]))),
        ];
        let meta = serde_json::json!({"seed": 7, "channels": 2});
        save_weights(&path, &params, &meta).unwrap();
        let (loaded, meta2) = load_weights(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "net.w");
        assert_eq!(meta2["seed"], 7);
        let path2 = dir.path().join("w2.prbw");
        save_weights(&path2, &loaded, &meta2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn corrupt_weight_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.prbw");
        let params = vec![("p".to_string(), ArrayD::zeros(IxDyn(&[3])))];
        save_weights(&path, &params, &serde_json::json!({})).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[3] = b'x';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::BadMagic { .. })));

        let mut newer = bytes.clone();
        newer[8] = 9;
        std::fs::write(&path, &newer).unwrap();
        assert!(matches!(
            load_weights(&path),
            Err(Error::UnsupportedVersion { format: "PRBW1", version: 9 })
        ));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_weights(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn f64_block_roundtrip() {
        let t = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| i[0] as f64 + i[1] as f64 * 0.1);
        let mut buf = Vec::new();
        write_f64_tensor(&mut buf, &t).unwrap();
        let back = read_f64_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }
}
