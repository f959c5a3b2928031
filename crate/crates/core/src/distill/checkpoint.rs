//! On-disk checkpoints: `backbone.bin`, one `.cua` blob per adapter, and a
//! `manifest.toml` tying them together.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{CuaLayer, LayerManifest, Projection, Transform};
use crate::cayley::{params_from_bytes, params_to_bytes};
use crate::error::{CuaError, Result};

use super::model::{build_toy_lm, Projector, ToyLm, ToyLmConfig};

const BACKBONE_MAGIC: &[u8; 4] = b"TLM1";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const BACKBONE_FILE: &str = "backbone.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub backbone: String,
    pub backbone_checksum: String,
    pub model: ToyLmConfig,
    #[serde(default)]
    pub adapters: Vec<LayerManifest>,
}

pub fn backbone_to_bytes(model: &ToyLm) -> Vec<u8> {
    let c = &model.cfg;
    let mut out = BACKBONE_MAGIC.to_vec();
    for v in [c.num_layers, c.d_model, c.num_heads, c.vocab_size, c.context_length] {
        out.extend((v as u32).to_le_bytes());
    }
    for t in model.backbone_tensors() {
        for v in t {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

/// Rebuild an adapter-free model from a backbone blob.
pub fn backbone_from_bytes(bytes: &[u8]) -> Result<ToyLm> {
    if bytes.len() < 24 || &bytes[..4] != BACKBONE_MAGIC {
        return Err(CuaError::Parse("not a backbone blob".into()));
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let cfg = ToyLmConfig { num_layers: u(0), d_model: u(1), num_heads: u(2), vocab_size: u(3), context_length: u(4) };
    let mut model = build_toy_lm(cfg, 0)?;
    let body = &bytes[24..];
    let expected = model.num_backbone_params() * 8;
    if body.len() != expected {
        return Err(CuaError::Parse(format!("backbone body has {} bytes, expected {expected}", body.len())));
    }
    let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for s in model.backbone_slices_mut()? {
        for x in s.iter_mut() {
            *x = vals.next().expect("length checked");
        }
    }
    Ok(model)
}

fn parse_site(label: &str) -> Result<(usize, Projection)> {
    let (l, p) = label.split_once('.').ok_or_else(|| CuaError::Parse(format!("bad site `{label}`")))?;
    let layer = l.parse().map_err(|_| CuaError::Parse(format!("bad layer in `{label}`")))?;
    Ok((layer, p.parse()?))
}

pub fn save_checkpoint(model: &ToyLm, dir: &Path) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir.join("adapters"))?;
    fs::write(dir.join(BACKBONE_FILE), backbone_to_bytes(model))?;
    let mut adapters = Vec::new();
    for (site, layer) in model.adapters() {
        let Transform::Cayley { params, .. } = layer.transform() else {
            return Err(CuaError::InvalidConfig(format!("adapter {} is not a Cayley operator", site.label())));
        };
        let blob = format!("adapters/{}.cua", site.label());
        fs::write(dir.join(&blob), params_to_bytes(params))?;
        adapters.push(LayerManifest {
            site: site.label(),
            mode: site.mode,
            block_size: params.block_dim(),
            params_blob: blob,
        });
    }
    let manifest = CheckpointManifest {
        backbone: BACKBONE_FILE.into(),
        backbone_checksum: format!("{:016x}", model.backbone_checksum()),
        model: model.cfg,
        adapters,
    };
    let text = toml::to_string(&manifest).map_err(|e| CuaError::Parse(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<ToyLm> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest = toml::from_str(&text).map_err(|e| CuaError::Parse(e.to_string()))?;
    let mut model = backbone_from_bytes(&fs::read(dir.join(&manifest.backbone))?)?;
    if model.cfg != manifest.model {
        return Err(CuaError::Parse("manifest model config does not match backbone".into()));
    }
    if format!("{:016x}", model.backbone_checksum()) != manifest.backbone_checksum {
        return Err(CuaError::Parse("backbone checksum mismatch".into()));
    }
    for a in &manifest.adapters {
        let (layer, p) = parse_site(&a.site)?;
        let params = params_from_bytes(&fs::read(dir.join(&a.params_blob))?)?;
        if params.block_dim() != a.block_size {
            return Err(CuaError::Parse(format!("block size mismatch for {}", a.site)));
        }
        let w = model.projector(layer, p).weight().clone();
        let l = CuaLayer::new(a.mode, Transform::cayley(params)?, w)?;
        model.set_projector(layer, p, Projector::Adapted(l))?;
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterMode;
    use crate::distill::model::{all_sites, insert_adapters, set_adapter_params};

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ToyLmConfig { num_layers: 1, d_model: 8, num_heads: 2, vocab_size: 16, context_length: 4 };
        let m = build_toy_lm(cfg, 9).unwrap();
        let mut a = insert_adapters(&m, &all_sites(1, AdapterMode::SignConstrained), 4).unwrap();
        set_adapter_params(&mut a, 0, &(0..12).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&a, dir.path()).unwrap();
        let b = load_checkpoint(dir.path()).unwrap();
        assert_eq!(a, b);
        assert!(backbone_from_bytes(b"XXXX").is_err());
    }
}
