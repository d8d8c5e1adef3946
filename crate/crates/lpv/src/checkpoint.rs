//! Model checkpoint container: named parameter blocks behind a JSON
//! header.
//!
//! Layout: magic "LPVM", u32 version, u32 header length, the JSON header
//! (config hash, completed stages in order, parameter names and shapes,
//! free-form extras), then one little-endian f32 block per parameter in
//! header order. Values are stored in f32, so saving a just-loaded
//! checkpoint reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mat, ParamSet};

pub const MODEL_MAGIC: &[u8; 4] = b"LPVM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeaderParam {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config_hash: String,
    stages: Vec<String>,
    params: Vec<HeaderParam>,
    #[serde(default)]
    extra: BTreeMap<String, serde_json::Value>,
}

/// A loaded model checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Training stages this model has completed, in order.
    pub stages: Vec<String>,
    pub extra: BTreeMap<String, serde_json::Value>,
    pub params: ParamSet,
}

pub fn save_model(
    path: &Path,
    params: &ParamSet,
    config_hash: &str,
    stages: &[String],
    extra: &BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let header = Header {
        config_hash: config_hash.to_string(),
        stages: stages.to_vec(),
        params: params
            .iter()
            .map(|(name, m)| HeaderParam {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
            })
            .collect(),
        extra: extra.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let payload: usize = params.iter().map(|(_, m)| m.rows() * m.cols() * 4).sum();
    let mut buf = Vec::with_capacity(12 + header_bytes.len() + payload);
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, m) in params.iter() {
        for &v in m.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let err = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if buf.len() < 12 {
        return Err(err(buf.len(), "header truncated".into()));
    }
    if &buf[0..4] != MODEL_MAGIC {
        return Err(err(0, "bad magic, expected \"LPVM\"".into()));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(err(4, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    if buf.len() < 12 + header_len {
        return Err(err(buf.len(), "json header truncated".into()));
    }
    let header: Header = serde_json::from_slice(&buf[12..12 + header_len])
        .map_err(|e| err(12, format!("bad json header: {e}")))?;

    let payload: usize = header.params.iter().map(|p| p.rows * p.cols * 4).sum();
    let expected = 12 + header_len + payload;
    if buf.len() != expected {
        return Err(err(
            buf.len().min(expected),
            format!("file is {} bytes, header implies {expected}", buf.len()),
        ));
    }

    let mut params = ParamSet::new();
    let mut at = 12 + header_len;
    for p in &header.params {
        let len = p.rows * p.cols;
        let mut data = Vec::with_capacity(len);
        for k in 0..len {
            let o = at + 4 * k;
            data.push(f32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as f64);
        }
        at += 4 * len;
        params.insert(&p.name, Mat::from_vec(p.rows, p.cols, data));
    }
    Ok(Checkpoint {
        config_hash: header.config_hash,
        stages: header.stages,
        extra: header.extra,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn sample_params() -> ParamSet {
        let mut rng = substream(1, "test/ckpt");
        let mut p = ParamSet::new();
        p.insert("enc.w0", Mat::randn(4, 3, 1.0, &mut rng));
        p.insert("enc.b0", Mat::randn(1, 3, 1.0, &mut rng));
        p.insert("dec.w", Mat::randn(3, 5, 1.0, &mut rng));
        p
    }

    #[test]
    fn round_trip_preserves_names_shapes_stages_and_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lpvm");
        let params = sample_params();
        let mut extra = BTreeMap::new();
        extra.insert("step".to_string(), serde_json::json!(123));
        let stages = vec!["text_pretrain".to_string(), "audio_pretrain".to_string()];
        save_model(&path, &params, "abc123", &stages, &extra).unwrap();

        let ckpt = load_model(&path).unwrap();
        assert_eq!(ckpt.config_hash, "abc123");
        assert_eq!(ckpt.stages, stages);
        assert_eq!(ckpt.extra["step"], serde_json::json!(123));
        let names: Vec<&str> = ckpt.params.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["enc.w0", "enc.b0", "dec.w"]);
        for (name, m) in params.iter() {
            let loaded = ckpt.params.try_get(name).unwrap();
            assert_eq!((loaded.rows(), loaded.cols()), (m.rows(), m.cols()));
            for (a, b) in loaded.data().iter().zip(m.data()) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }

        // Save-after-load is byte-identical: state is already f32.
        let path2 = dir.path().join("m2.lpvm");
        save_model(&path2, &ckpt.params, &ckpt.config_hash, &ckpt.stages, &ckpt.extra).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_corruption_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lpvm");
        save_model(&path, &sample_params(), "h", &[], &BTreeMap::new()).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[1] = b'X';
        fs::write(&path, &bad).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::Format { offset: 0, .. })
        ));

        fs::write(&path, &good[..good.len() - 2]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 42;
        fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::Format { offset: 4, .. })
        ));
    }
}
