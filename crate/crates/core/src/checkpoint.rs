//! Checkpoint archives.
//!
//! Single-file container: an 8-byte magic, a format version, a JSON manifest
//! (tensor names, shapes, dtype, embedded config, kind) and raw little-endian
//! tensor payloads. Saving and re-loading a model reproduces its forward pass
//! bit-exactly when stored at f64.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lora::{LoRAAdapter, LoRAFactors};
use crate::miniflux::{MiniFluxConfig, MiniFluxParams, ProjName};

const MAGIC: &[u8; 8] = b"FLOWARC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn size(&self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

/// What the archive holds; erased checkpoints embed their erasure config in
/// `extra`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveKind {
    Model,
    Erased,
    Lora,
    Tensors,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: (usize, usize),
    pub offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub format_version: u32,
    pub kind: ArchiveKind,
    pub dtype: Dtype,
    /// Model config for model/erased kinds; null otherwise.
    pub config: Value,
    pub tensors: Vec<TensorEntry>,
    /// Kind-specific metadata (erasure config, adapter geometry, run id).
    pub extra: Value,
}

fn write_archive(
    path: &Path,
    kind: ArchiveKind,
    dtype: Dtype,
    config: Value,
    extra: Value,
    tensors: &[(String, &Array2<f64>)],
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let byte_len = (t.len() * dtype.size()) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: (t.nrows(), t.ncols()),
            offset,
            byte_len,
        });
        offset += byte_len;
    }
    let manifest = ArchiveManifest {
        format_version: FORMAT_VERSION,
        kind,
        dtype,
        config,
        tensors: entries,
        extra,
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    for (_, t) in tensors {
        match dtype {
            Dtype::F64 => {
                for &x in t.iter() {
                    f.write_all(&x.to_le_bytes())?;
                }
            }
            Dtype::F32 => {
                for &x in t.iter() {
                    f.write_all(&(x as f32).to_le_bytes())?;
                }
            }
        }
    }
    f.flush()?;
    Ok(())
}

fn read_archive(path: &Path) -> Result<(ArchiveManifest, Vec<(String, Array2<f64>)>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint archive (bad magic)",
            path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported archive version {version}"
        )));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)?;
    let manifest_len = u64::from_le_bytes(buf8) as usize;
    let mut manifest_json = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_json)?;
    let manifest: ArchiveManifest =
        serde_json::from_slice(&manifest_json).map_err(|e| Error::Format(e.to_string()))?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "tensor {} extends past payload",
                entry.name
            )));
        }
        let bytes = &payload[start..end];
        let n = entry.shape.0 * entry.shape.1;
        let mut data = Vec::with_capacity(n);
        match manifest.dtype {
            Dtype::F64 => {
                if bytes.len() != n * 8 {
                    return Err(Error::Format(format!("tensor {} size mismatch", entry.name)));
                }
                for c in bytes.chunks_exact(8) {
                    data.push(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
            Dtype::F32 => {
                if bytes.len() != n * 4 {
                    return Err(Error::Format(format!("tensor {} size mismatch", entry.name)));
                }
                for c in bytes.chunks_exact(4) {
                    data.push(f32::from_le_bytes(c.try_into().unwrap()) as f64);
                }
            }
        }
        let arr = Array2::from_shape_vec(entry.shape, data)
            .map_err(|e| Error::Format(e.to_string()))?;
        tensors.push((entry.name.clone(), arr));
    }
    Ok((manifest, tensors))
}

/// Save a model (or erased-model) checkpoint.
pub fn save_model(
    path: &Path,
    params: &MiniFluxParams,
    kind: ArchiveKind,
    extra: Value,
) -> Result<()> {
    let mut owned: Vec<(String, Array2<f64>)> = Vec::new();
    params.for_each_tensor(|name, t| owned.push((name.to_string(), t.clone())));
    let tensors: Vec<(String, &Array2<f64>)> =
        owned.iter().map(|(n, t)| (n.clone(), t)).collect();
    let config = serde_json::to_value(&params.config).map_err(|e| Error::Format(e.to_string()))?;
    write_archive(path, kind, Dtype::F64, config, extra, &tensors)
}

/// Load a model or erased-model checkpoint.
pub fn load_model(path: &Path) -> Result<(MiniFluxParams, ArchiveManifest)> {
    let (manifest, tensors) = read_archive(path)?;
    if !matches!(manifest.kind, ArchiveKind::Model | ArchiveKind::Erased) {
        return Err(Error::Format(format!(
            "{}: archive kind is not a model checkpoint",
            path.display()
        )));
    }
    let config: MiniFluxConfig = serde_json::from_value(manifest.config.clone())
        .map_err(|e| Error::Format(format!("bad embedded config: {e}")))?;
    let mut params = MiniFluxParams::init(&config, 0)?;
    let mut loaded: std::collections::BTreeMap<String, Array2<f64>> =
        tensors.into_iter().collect();
    let mut missing = Vec::new();
    params.for_each_tensor_mut(|name, t| match loaded.remove(name) {
        Some(arr) if arr.raw_dim() == t.raw_dim() => *t = arr,
        Some(_) => missing.push(format!("{name} (shape mismatch)")),
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !loaded.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint has unknown tensors: {}",
            loaded.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok((params, manifest))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdapterMeta {
    targets: Vec<String>,
    rank: usize,
    scaling: f64,
    n_blocks: usize,
}

/// Save an adapter archive (same container, kind = "lora").
pub fn save_adapter(path: &Path, adapter: &LoRAAdapter, dtype: Dtype, extra: Value) -> Result<()> {
    let meta = AdapterMeta {
        targets: adapter.targets.iter().map(|p| p.to_string()).collect(),
        rank: adapter.rank,
        scaling: adapter.scaling,
        n_blocks: adapter.n_blocks,
    };
    let mut extra_obj = serde_json::Map::new();
    extra_obj.insert(
        "adapter".to_string(),
        serde_json::to_value(&meta).map_err(|e| Error::Format(e.to_string()))?,
    );
    if let Value::Object(m) = extra {
        for (k, v) in m {
            extra_obj.insert(k, v);
        }
    }
    let mut tensors: Vec<(String, &Array2<f64>)> = Vec::new();
    for ((block, proj), f) in &adapter.factors {
        tensors.push((format!("lora.block{block}.{proj}.a"), &f.a));
        tensors.push((format!("lora.block{block}.{proj}.b"), &f.b));
    }
    write_archive(
        path,
        ArchiveKind::Lora,
        dtype,
        Value::Null,
        Value::Object(extra_obj),
        &tensors,
    )
}

pub fn load_adapter(path: &Path) -> Result<(LoRAAdapter, ArchiveManifest)> {
    let (manifest, tensors) = read_archive(path)?;
    if manifest.kind != ArchiveKind::Lora {
        return Err(Error::Format(format!(
            "{}: archive kind is not an adapter",
            path.display()
        )));
    }
    let meta: AdapterMeta = serde_json::from_value(
        manifest
            .extra
            .get("adapter")
            .cloned()
            .ok_or_else(|| Error::Format("adapter archive missing metadata".into()))?,
    )
    .map_err(|e| Error::Format(e.to_string()))?;
    let mut targets = BTreeSet::new();
    for t in &meta.targets {
        targets.insert(ProjName::parse(t)?);
    }
    let mut map: std::collections::BTreeMap<String, Array2<f64>> = tensors.into_iter().collect();
    let mut factors = std::collections::BTreeMap::new();
    for block in 0..meta.n_blocks {
        for &proj in &targets {
            let a = map
                .remove(&format!("lora.block{block}.{proj}.a"))
                .ok_or_else(|| Error::Format(format!("missing factor a for {block}/{proj}")))?;
            let b = map
                .remove(&format!("lora.block{block}.{proj}.b"))
                .ok_or_else(|| Error::Format(format!("missing factor b for {block}/{proj}")))?;
            factors.insert((block, proj), LoRAFactors { a, b });
        }
    }
    Ok((
        LoRAAdapter {
            targets,
            rank: meta.rank,
            scaling: meta.scaling,
            n_blocks: meta.n_blocks,
            factors,
        },
        manifest,
    ))
}

/// Save a bag of named tensors (images, logs of latents).
pub fn save_tensors(path: &Path, tensors: &[(String, Array2<f64>)], extra: Value) -> Result<()> {
    let refs: Vec<(String, &Array2<f64>)> =
        tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_archive(path, ArchiveKind::Tensors, Dtype::F64, Value::Null, extra, &refs)
}

pub fn load_tensors(path: &Path) -> Result<(Vec<(String, Array2<f64>)>, ArchiveManifest)> {
    let (manifest, tensors) = read_archive(path)?;
    Ok((tensors, manifest))
}

/// Payload byte count of an archive (everything after the manifest), used by
/// the footprint oracle.
pub fn payload_bytes(path: &Path) -> Result<u64> {
    let (manifest, _) = read_archive(path)?;
    Ok(manifest.tensors.iter().map(|t| t.byte_len).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::miniflux::{forward_velocity, MiniFluxConfig, Prompt};
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fxa");
        let cfg = MiniFluxConfig::default();
        let params = MiniFluxParams::init(&cfg, 31).unwrap();
        save_model(&path, &params, ArchiveKind::Model, Value::Null).unwrap();
        let (loaded, manifest) = load_model(&path).unwrap();
        assert_eq!(manifest.kind, ArchiveKind::Model);
        assert_eq!(params.max_abs_diff(&loaded).unwrap(), 0.0);

        let mut r = crate::rng::stream(1, "ckpt-test");
        let latent = Array2::from_shape_fn((cfg.n_pixel_tokens(), cfg.n_channels), |_| {
            r.gen_range(-1.0..1.0)
        });
        let prompt = Prompt::new(vec![2, 12]);
        let (v0, _) = forward_velocity(&params, None, None, &latent, &prompt, 0.5).unwrap();
        let (v1, _) = forward_velocity(&loaded, None, None, &latent, &prompt, 0.5).unwrap();
        assert_eq!(v0, v1, "forward after reload must be bit-exact");
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.fxa");
        let b = dir.path().join("b.fxa");
        let params = MiniFluxParams::init(&MiniFluxConfig::default(), 32).unwrap();
        save_model(&a, &params, ArchiveKind::Model, Value::Null).unwrap();
        save_model(&b, &params, ArchiveKind::Model, Value::Null).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn adapter_roundtrip_and_footprint_matches_payload() {
        let dir = tempfile::tempdir().unwrap();
        let params = MiniFluxParams::init(&MiniFluxConfig::default(), 33).unwrap();
        let mut adapter = crate::lora::LoRAAdapter::init_default(&params, 4, 1.0, 3).unwrap();
        let mut r = crate::rng::stream(4, "ckpt-adapter");
        adapter.for_each_factor_mut(|_, t| {
            *t = Array2::from_shape_fn(t.raw_dim(), |_| r.gen_range(-0.5..0.5));
        });
        for dtype in [Dtype::F64, Dtype::F32] {
            let path = dir.path().join(format!("adapter-{:?}.fxa", dtype));
            save_adapter(&path, &adapter, dtype, Value::Null).unwrap();
            assert_eq!(
                payload_bytes(&path).unwrap(),
                adapter.parameter_footprint(dtype),
                "payload must equal the computed footprint at {dtype:?}"
            );
        }
        let path = dir.path().join("adapter-F64.fxa");
        let (loaded, _) = load_adapter(&path).unwrap();
        assert_eq!(loaded, adapter);
    }

    #[test]
    fn rejects_wrong_kind_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fxa");
        save_tensors(&path, &[("x".into(), Array2::zeros((2, 2)))], Value::Null).unwrap();
        assert!(load_model(&path).is_err());
        assert!(load_adapter(&path).is_err());

        let garbage = dir.path().join("garbage.fxa");
        std::fs::write(&garbage, b"not an archive").unwrap();
        assert!(load_model(&garbage).is_err());
    }

    #[test]
    fn f32_roundtrip_loses_precision_but_keeps_shape() {
        let dir = tempfile::tempdir().unwrap();
        let params = MiniFluxParams::init(&MiniFluxConfig::default(), 34).unwrap();
        let adapter = crate::lora::LoRAAdapter::init_default(&params, 2, 1.0, 5).unwrap();
        let path = dir.path().join("a32.fxa");
        save_adapter(&path, &adapter, Dtype::F32, Value::Null).unwrap();
        let (loaded, manifest) = load_adapter(&path).unwrap();
        assert_eq!(manifest.dtype, Dtype::F32);
        assert_eq!(loaded.rank, adapter.rank);
    }
}
