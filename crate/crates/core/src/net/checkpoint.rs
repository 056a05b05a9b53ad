//! Network checkpoints.
//!
//! Layout: `{magic "SRNN", version u32, n_speakers u32, input kind u8}`
//! followed by the named parameter blob list (see [`crate::blob`]). Every
//! parameter lives on the f32 grid in memory, so save/load round-trips are
//! bit-exact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::model::{ClassifierKind, MtlNetwork, NetConfig};
use super::NetError;
use crate::blob::{append_blobs, read_blobs, Blob};

const MAGIC: &[u8; 4] = b"SRNN";
const VERSION: u32 = 1;
const CONFIG_BLOB: &str = "__config";

fn config_blob(cfg: &NetConfig) -> Blob {
    let classifier = match cfg.classifier {
        ClassifierKind::ASoftmax => 0.0,
        ClassifierKind::Plain => 1.0,
    };
    Blob::new(
        CONFIG_BLOB,
        vec![7],
        vec![
            cfg.input_rows as f64,
            cfg.input_cols as f64,
            cfg.dropout,
            cfg.lrelu_slope,
            cfg.bn_momentum,
            cfg.bn_epsilon,
            classifier,
        ],
    )
}

/// Structured blob dims for a named parameter array.
fn param_dims(net: &MtlNetwork, name: &str, len: usize) -> Vec<usize> {
    let cfg = &net.config;
    let parts: Vec<&str> = name.split('.').collect();
    if parts.len() == 3 && parts[0].starts_with("block") && parts[2] == "weight" {
        let i: usize = parts[0][5..].parse().unwrap_or(1) - 1;
        let spec = match parts[1] {
            "conv1" => cfg.entry_spec(i),
            "conv2" => cfg.inner_conv_spec(i),
            _ => cfg.nin_spec(i),
        };
        return vec![spec.kh, spec.kw, spec.in_ch, spec.out_ch];
    }
    if (parts.len() == 3 && (parts[0] == "sd" || parts[0] == "asv")) && parts[2] == "weight" {
        let out = out_dim_of(net, parts[0], parts[1]);
        return vec![len / out, out];
    }
    vec![len]
}

fn out_dim_of(net: &MtlNetwork, head: &str, layer: &str) -> usize {
    let h = if head == "sd" { &net.params.sd } else { &net.params.asv };
    if layer == "output" {
        h.output.bias.len()
    } else {
        let j: usize = layer[2..].parse().unwrap_or(1);
        h.hidden[j - 1].bias.len()
    }
}

pub fn save_checkpoint(
    net: &MtlNetwork,
    input_kind: u8,
    path: impl AsRef<Path>,
) -> Result<(), NetError> {
    let mut blobs = vec![config_blob(&net.config)];
    for (name, _, arr) in net.params.entries() {
        let dims = param_dims(net, &name, arr.len());
        blobs.push(Blob::new(name, dims, arr.clone()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(net.config.n_speakers as u32).to_le_bytes());
    out.push(input_kind);
    append_blobs(&mut out, &blobs);
    crate::feat::atomic_write_bytes(path.as_ref(), &out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MtlNetwork, u8), NetError> {
    let bytes = fs::read(path.as_ref())?;
    if bytes.len() < 13 || &bytes[0..4] != MAGIC {
        return Err(NetError::CorruptCheckpoint("missing SRNN magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(NetError::CorruptCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let n_speakers = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let input_kind = bytes[12];
    let blobs = read_blobs(&bytes, 13)
        .map_err(|e| NetError::CorruptCheckpoint(e.to_string()))?;
    let by_name: HashMap<&str, &Blob> = blobs.iter().map(|b| (b.name.as_str(), b)).collect();

    let cfg_blob = by_name
        .get(CONFIG_BLOB)
        .ok_or_else(|| NetError::CorruptCheckpoint("missing config blob".into()))?;
    if cfg_blob.data.len() != 7 {
        return Err(NetError::CorruptCheckpoint("bad config blob".into()));
    }

    // geometry comes from the blobs themselves
    let mut block_channels = Vec::new();
    for i in 1.. {
        match by_name.get(format!("block{i}.bn1.scale").as_str()) {
            Some(b) => block_channels.push(b.data.len()),
            None => break,
        }
    }
    let mut sd_hidden = Vec::new();
    for j in 1.. {
        match by_name.get(format!("sd.fc{j}.bias").as_str()) {
            Some(b) => sd_hidden.push(b.data.len()),
            None => break,
        }
    }
    let mut asv_hidden = Vec::new();
    for j in 1.. {
        match by_name.get(format!("asv.fc{j}.bias").as_str()) {
            Some(b) => asv_hidden.push(b.data.len()),
            None => break,
        }
    }
    if block_channels.is_empty() || sd_hidden.is_empty() || asv_hidden.is_empty() {
        return Err(NetError::CorruptCheckpoint("missing layer blobs".into()));
    }
    let out_speakers = by_name
        .get("asv.output.bias")
        .map(|b| b.data.len())
        .ok_or_else(|| NetError::CorruptCheckpoint("missing asv output".into()))?;
    if out_speakers != n_speakers {
        return Err(NetError::CorruptCheckpoint(format!(
            "speaker count mismatch: header {n_speakers}, blob {out_speakers}"
        )));
    }

    let config = NetConfig {
        input_rows: cfg_blob.data[0] as usize,
        input_cols: cfg_blob.data[1] as usize,
        block_channels,
        sd_hidden,
        asv_hidden,
        n_speakers,
        dropout: cfg_blob.data[2],
        lrelu_slope: cfg_blob.data[3],
        bn_momentum: cfg_blob.data[4],
        bn_epsilon: cfg_blob.data[5],
        classifier: if cfg_blob.data[6] == 0.0 {
            ClassifierKind::ASoftmax
        } else {
            ClassifierKind::Plain
        },
    };

    let mut net = MtlNetwork::init(config, 0);
    for (name, _, arr) in net.params.entries_mut() {
        let blob = by_name.get(name.as_str()).ok_or_else(|| {
            NetError::CorruptCheckpoint(format!("missing parameter blob {name}"))
        })?;
        if blob.data.len() != arr.len() {
            return Err(NetError::CorruptCheckpoint(format!(
                "shape mismatch in {name}: {} vs {}",
                blob.data.len(),
                arr.len()
            )));
        }
        arr.copy_from_slice(&blob.data);
    }

    Ok((net, input_kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::{ForwardMode, NetConfig};
    use crate::feat::{FeatureKind, Tfr, UnifiedFeature};

    fn mini_net(seed: u64) -> MtlNetwork {
        let cfg = NetConfig {
            input_rows: 16,
            input_cols: 16,
            block_channels: vec![4],
            sd_hidden: vec![8, 4],
            asv_hidden: vec![8, 4],
            n_speakers: 3,
            ..NetConfig::paper(3)
        };
        MtlNetwork::init(cfg, seed)
    }

    #[test]
    fn save_load_bitwise_equal() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = mini_net(11);
        save_checkpoint(&net, 0, &path).unwrap();
        let (back, kind) = load_checkpoint(&path).unwrap();
        assert_eq!(kind, 0);
        assert_eq!(back.params, net.params);
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = mini_net(11);
        save_checkpoint(&net, 1, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x10;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NetError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn eval_forward_identical_after_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let net = mini_net(42);
        save_checkpoint(&net, 0, &path).unwrap();
        let (back, _) = load_checkpoint(&path).unwrap();

        let mut m = Tfr::new(16, 16);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f64 - 50.0) / 25.0;
        }
        let feat = UnifiedFeature {
            matrix: m,
            kind: FeatureKind::Cqt,
        };
        let a = net.forward(&feat, ForwardMode::Eval);
        let b = back.forward(&feat, ForwardMode::Eval);
        assert_eq!(a.sd_logits.data, b.sd_logits.data);
        assert_eq!(a.asv_logits.data, b.asv_logits.data);
        assert_eq!(a.embeddings.data, b.embeddings.data);
    }
}
