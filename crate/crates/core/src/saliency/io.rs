//! Saliency map files: 16-bit PGM for viewing, a JSON sidecar with the
//! computation's identity, and an optional raw f32 blob for bit-exact
//! reuse.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::SaliencyMap;

pub const RAW_MAP_MAGIC: &[u8; 4] = b"CTSM";
pub const RAW_MAP_VERSION: u16 = 1;

/// Sidecar metadata stored next to each exported map.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MapSidecar {
    pub method: String,
    pub explained_class: usize,
    pub model_variant: String,
    pub seed: u64,
    pub config_hash: String,
}

/// 16-bit binary PGM (maxval 65535, big-endian samples as per netpbm),
/// with values round(65535 * v).
pub fn save_map_pgm16(map: &SaliencyMap, path: &Path) -> Result<()> {
    let s = map.values.shape();
    let (h, w) = (s[0], s[1]);
    let mut out = Vec::with_capacity(32 + h * w * 2);
    out.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
    for &v in map.values.data() {
        let q = (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn save_map_sidecar(sidecar: &MapSidecar, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}

pub fn load_map_sidecar(path: &Path) -> Result<MapSidecar> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Raw little-endian f32 map blob: magic, u16 version, u32 height,
/// u32 width, then the row-major values. Round-trips are bit-exact.
pub fn save_map_raw(values: &Tensor, path: &Path) -> Result<()> {
    let s = values.shape();
    if s.len() != 2 {
        return Err(Error::MapFormat(format!(
            "raw map must be 2-d, got shape {s:?}"
        )));
    }
    let mut out = Vec::with_capacity(14 + values.numel() * 4);
    out.extend_from_slice(RAW_MAP_MAGIC);
    out.extend_from_slice(&RAW_MAP_VERSION.to_le_bytes());
    out.extend_from_slice(&(s[0] as u32).to_le_bytes());
    out.extend_from_slice(&(s[1] as u32).to_le_bytes());
    for &v in values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_map_raw(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::MapFormat(format!("{}: {reason}", path.display()));
    if bytes.len() < 14 {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != RAW_MAP_MAGIC {
        return Err(bad("bad magic, expected \"CTSM\""));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != RAW_MAP_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let h = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let w = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
    let expected = 14 + h * w * 4;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "payload length {} != expected {expected}",
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes[14..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(vec![h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::VariantTag;
    use crate::saliency::Method;

    fn map_of(values: Tensor) -> SaliencyMap {
        SaliencyMap {
            values,
            explained_class: 1,
            method: Method::Rise,
            variant: VariantTag::Temperature,
        }
    }

    #[test]
    fn pgm16_quantizes_extremes_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let map = map_of(Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]).unwrap());
        save_map_pgm16(&map, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 1\n65535\n"));
        let raster = &bytes[bytes.len() - 6..];
        assert_eq!(u16::from_be_bytes([raster[0], raster[1]]), 0);
        assert_eq!(u16::from_be_bytes([raster[2], raster[3]]), 32768); // round(0.5*65535)
        assert_eq!(u16::from_be_bytes([raster[4], raster[5]]), 65535);
    }

    #[test]
    fn raw_blob_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ctsm");
        let values = Tensor::new(vec![3, 2], vec![0.0, 0.1, 0.999, 1.0, 1e-30, 0.25]).unwrap();
        save_map_raw(&values, &path).unwrap();
        let loaded = load_map_raw(&path).unwrap();
        assert_eq!(loaded.shape(), values.shape());
        for (a, b) in loaded.data().iter().zip(values.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn raw_blob_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ctsm");
        let values = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        save_map_raw(&values, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_map_raw(&path).is_err());
        save_map_raw(&values, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(load_map_raw(&path).is_err());
    }

    #[test]
    fn sidecar_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let sc = MapSidecar {
            method: "rise".into(),
            explained_class: 2,
            model_variant: "dirichlet".into(),
            seed: 99,
            config_hash: "sha256:f00".into(),
        };
        save_map_sidecar(&sc, &path).unwrap();
        assert_eq!(load_map_sidecar(&path).unwrap(), sc);
    }
}
