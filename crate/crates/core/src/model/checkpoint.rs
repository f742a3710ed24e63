//! Checkpoints: a text manifest (`name shape offset` per tensor) beside a
//! flat little-endian `f32` payload.
//!
//! ```text
//! EARCKPT v1
//! config num_layers=2 num_heads=4 model_dim=64 ...
//! token_embedding 64x64 0
//! class_embedding 4x64 16384
//! ...
//! ```
//! Offsets are in bytes into the payload.

use std::fs;
use std::path::Path;

use super::config::ModelConfig;
use super::params::ModelParameters;
use super::tensor::{Matrix, Real};
use crate::error::{EarError, Result};

const MAGIC: &str = "EARCKPT v1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PAYLOAD_FILE: &str = "weights.bin";

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(EarError::Format(msg.into()))
}

/// Serializes to `(manifest, payload)`. Values are rounded to `f32`.
pub fn encode_checkpoint<F: Real>(params: &ModelParameters<F>) -> (String, Vec<u8>) {
    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    let pairs: Vec<String> = params
        .config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect();
    manifest.push_str(&format!("config {}\n", pairs.join(" ")));
    let mut payload = Vec::with_capacity(params.num_parameters() * 4);
    for (name, t) in params.named_tensors() {
        manifest.push_str(&format!("{name} {}x{} {}\n", t.rows, t.cols, payload.len()));
        for v in &t.data {
            let v = v.to_f32().unwrap_or(f32::NAN);
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, payload)
}

pub fn decode_checkpoint(manifest: &str, payload: &[u8]) -> Result<ModelParameters<f32>> {
    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return format_err("missing EARCKPT v1 header");
    }
    let Some(config_line) = lines.next().and_then(|l| l.strip_prefix("config ")) else {
        return format_err("missing config line");
    };
    let mut config = ModelConfig::default();
    for pair in config_line.split(' ') {
        let Some((k, v)) = pair.split_once('=') else {
            return format_err(format!("bad config entry {pair:?}"));
        };
        if !config.set(k, v)? {
            return format_err(format!("unknown config key {k:?}"));
        }
    }
    config.validate()?;

    let mut params = ModelParameters::<f32>::zeros(&config);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut expected_offset = 0usize;
    for (name, tensor) in names.iter().zip(params.tensors_mut()) {
        let Some(line) = lines.next() else {
            return format_err(format!("manifest ends before tensor {name}"));
        };
        let fields: Vec<&str> = line.split(' ').collect();
        let [got_name, shape, offset] = fields[..] else {
            return format_err(format!("bad tensor line {line:?}"));
        };
        if got_name != name {
            return format_err(format!("expected tensor {name}, found {got_name}"));
        }
        let want_shape = format!("{}x{}", tensor.rows, tensor.cols);
        if shape != want_shape {
            return format_err(format!(
                "{name}: shape {shape} does not match config ({want_shape})"
            ));
        }
        let offset: usize = offset
            .parse()
            .map_err(|_| EarError::Format(format!("{name}: bad offset {offset:?}")))?;
        if offset != expected_offset {
            return format_err(format!(
                "{name}: offset {offset}, expected {expected_offset}"
            ));
        }
        let end = offset + tensor.len() * 4;
        let Some(bytes) = payload.get(offset..end) else {
            return format_err(format!("payload too short for {name}"));
        };
        *tensor = Matrix::from_vec(
            tensor.rows,
            tensor.cols,
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
        expected_offset = end;
    }
    if lines.any(|l| !l.is_empty()) {
        return format_err("trailing lines in manifest");
    }
    if payload.len() != expected_offset {
        return format_err(format!(
            "payload has {} bytes, manifest describes {expected_offset}",
            payload.len()
        ));
    }
    Ok(params)
}

/// Writes `manifest.txt` and `weights.bin` into `dir`, creating it if needed.
pub fn save_checkpoint<F: Real>(params: &ModelParameters<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (manifest, payload) = encode_checkpoint(params);
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(PAYLOAD_FILE), payload)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParameters<f32>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let payload = fs::read(dir.join(PAYLOAD_FILE))?;
    decode_checkpoint(&manifest, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            model_dim: 8,
            mlp_hidden_dim: 12,
            vocab_size: 5,
            num_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParameters::<f32>::init(&small(), &mut rng);
        let (manifest, payload) = encode_checkpoint(&params);
        let back = decode_checkpoint(&manifest, &payload).unwrap();
        for ((_, a), (_, b)) in params.named_tensors().iter().zip(back.named_tensors()) {
            let a: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let (m2, p2) = encode_checkpoint(&back);
        assert_eq!(manifest, m2);
        assert_eq!(payload, p2);
        assert!(manifest.contains("\ntoken_embedding 5x8 0\nclass_embedding 3x8 160\n"));
    }

    #[test]
    fn rejects_corruption() {
        let params = ModelParameters::<f32>::zeros(&small());
        let (manifest, payload) = encode_checkpoint(&params);
        assert!(decode_checkpoint(&manifest, &payload[..payload.len() - 4]).is_err());
        let mut longer = payload.clone();
        longer.push(0);
        assert!(decode_checkpoint(&manifest, &longer).is_err());
        let renamed = manifest.replace("head ", "tail ");
        assert!(decode_checkpoint(&renamed, &payload).is_err());
        assert!(
            decode_checkpoint(&manifest.replacen("EARCKPT v1", "EARCKPT v2", 1), &payload).is_err()
        );
    }
}
