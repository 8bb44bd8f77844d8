//! Model checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "NLSC" | version u32 = 1 | manifest_len u32 | manifest UTF-8 (key=value lines)
//! param_count u32
//! param_count × [ name_len u32 | name | rank u32 | rank × dim u32 | f32 payload ]
//! ```
//!
//! The manifest carries the model configuration and the prompt list; the
//! frozen prompt embeddings are stored as the parameter `text.embeddings`.

use std::fs;
use std::path::Path;

use crate::codec::{put_f32s, put_len, put_u32, Reader};
use crate::error::{Error, Result};
use crate::network::{ModelConfig, NaLSuper};
use crate::tensor::{Real, Tensor};
use crate::text::{EmbeddingSet, TextEmbedding};

const MAGIC: &[u8; 4] = b"NLSC";
const VERSION: u32 = 1;
const EMBEDDINGS: &str = "text.embeddings";

fn manifest(config: &ModelConfig, embeddings: &EmbeddingSet) -> Result<String> {
    let mut lines = vec![
        format!("channels={}", config.channels),
        format!("num_blocks={}", config.num_blocks),
        format!("attention_dim={}", config.attention_dim),
        format!("d_tau={}", config.d_tau),
        format!("reduction={}", config.reduction),
        format!("delta_mode={}", config.delta_mode.as_str()),
        format!("ssim_window={}", config.ssim_window.as_str()),
        format!("seed={}", config.seed),
        format!("prompts={}", embeddings.len()),
    ];
    for (i, p) in embeddings.prompts().enumerate() {
        if p.contains(['\n', '\r']) {
            return Err(Error::usage(format!("prompt {i} contains a line break")));
        }
        lines.push(format!("prompt.{i}={p}"));
    }
    Ok(lines.join("\n") + "\n")
}

fn parse_manifest(text: &str, at: usize) -> Result<(ModelConfig, Vec<String>)> {
    let err = |msg: String| Error::format(at, format!("manifest: {msg}"));
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("line {line:?} is not key=value")))?;
        if fields.insert(k, v).is_some() {
            return Err(err(format!("duplicate key {k:?}")));
        }
    }
    let mut take = |key: &str| fields.remove(key).ok_or_else(|| err(format!("missing key {key:?}")));
    let mut int = |key: &str| -> Result<u64> {
        let v = take(key)?;
        v.parse().map_err(|_| err(format!("{key} = {v:?} is not an integer")))
    };
    let config = ModelConfig {
        channels: int("channels")? as usize,
        num_blocks: int("num_blocks")? as usize,
        attention_dim: int("attention_dim")? as usize,
        d_tau: int("d_tau")? as usize,
        reduction: int("reduction")? as usize,
        seed: int("seed")?,
        ..ModelConfig::default()
    };
    let m = int("prompts")? as usize;
    let config = ModelConfig {
        delta_mode: take("delta_mode")?.parse().map_err(|e: Error| err(e.to_string()))?,
        ssim_window: take("ssim_window")?.parse().map_err(|e: Error| err(e.to_string()))?,
        ..config
    };
    let prompts = (0..m)
        .map(|i| take(&format!("prompt.{i}")).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    if let Some(k) = fields.keys().next() {
        return Err(err(format!("unknown key {k:?}")));
    }
    config.validate().map_err(|e| err(e.to_string()))?;
    Ok((config, prompts))
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: impl IntoIterator<Item = f32>) -> Result<()> {
    put_len(out, name.len(), "parameter name")?;
    out.extend_from_slice(name.as_bytes());
    put_len(out, shape.len(), "rank")?;
    for &d in shape {
        put_len(out, d, "dimension")?;
    }
    put_f32s(out, values);
    Ok(())
}

/// Serialises `model`; parameters are written as `f32`.
pub fn checkpoint_bytes<T: Real>(model: &NaLSuper<T>) -> Result<Vec<u8>> {
    let text = manifest(model.config(), model.embeddings())?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_len(&mut out, text.len(), "manifest")?;
    out.extend_from_slice(text.as_bytes());
    put_len(&mut out, model.params().len() + 1, "parameter count")?;
    for p in model.params().iter() {
        put_tensor(&mut out, &p.name, p.value.shape(), p.value.data().iter().map(|v| v.as_f64() as f32))?;
    }
    let e = model.embeddings();
    let flat = e.entries().iter().flat_map(|t| t.vector.iter().map(|&v| v as f32));
    put_tensor(&mut out, EMBEDDINGS, &[e.len(), e.d_tau()], flat)?;
    Ok(out)
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
    offset: usize,
}

fn read_tensor(r: &mut Reader<'_>, index: usize) -> Result<RawTensor> {
    let offset = r.offset();
    let len = r.u32("parameter name length")? as usize;
    let name = r.utf8(len, "parameter name")?.to_string();
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(8));
    for _ in 0..rank {
        shape.push(r.u32("dimension")? as usize);
    }
    if shape.contains(&0) || rank == 0 {
        return Err(Error::format(offset, format!("parameter {index} ({name}) has invalid shape {shape:?}")));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(offset, format!("parameter {name} is too large")))?;
    let data = r.f32s(numel, &format!("payload of {name}"))?;
    Ok(RawTensor { name, shape, data, offset })
}

/// Parses a checkpoint and rebuilds the model it describes.
pub fn model_from_bytes<T: Real>(buf: &[u8]) -> Result<NaLSuper<T>> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32("manifest length")? as usize;
    let at = r.offset();
    let (config, prompts) = parse_manifest(r.utf8(len, "manifest")?, at)?;
    let count_at = r.offset();
    let count = r.u32("parameter count")? as usize;
    let mut raw = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        raw.push(read_tensor(&mut r, i)?);
    }
    if !r.is_at_end() {
        return Err(Error::format(r.offset(), "trailing bytes after last parameter"));
    }

    let emb_pos = raw
        .iter()
        .position(|t| t.name == EMBEDDINGS)
        .ok_or_else(|| Error::format(count_at, format!("missing parameter {EMBEDDINGS}")))?;
    let emb = raw.remove(emb_pos);
    if emb.shape != [prompts.len(), config.d_tau] {
        return Err(Error::format(
            emb.offset,
            format!(
                "{EMBEDDINGS} has shape {:?}, manifest implies [{}, {}]",
                emb.shape,
                prompts.len(),
                config.d_tau
            ),
        ));
    }
    let entries = prompts
        .into_iter()
        .zip(emb.data.chunks(config.d_tau))
        .map(|(prompt, v)| TextEmbedding {
            prompt,
            vector: v.iter().map(|&x| f64::from(x)).collect(),
        })
        .collect();
    let embeddings = EmbeddingSet::new(entries).map_err(|e| Error::format(emb.offset, e.to_string()))?;

    let mut model = NaLSuper::<T>::init(config, &embeddings)?;
    if raw.len() != model.params().len() {
        return Err(Error::format(
            count_at,
            format!(
                "checkpoint holds {} parameters, manifest implies {}",
                raw.len(),
                model.params().len()
            ),
        ));
    }
    for (t, p) in raw.into_iter().zip(model.params_mut().iter_mut()) {
        if t.name != p.name {
            return Err(Error::format(t.offset, format!("expected parameter {}, found {}", p.name, t.name)));
        }
        if t.shape != p.value.shape() {
            return Err(Error::format(
                t.offset,
                format!("{} has shape {:?}, manifest implies {:?}", t.name, t.shape, p.value.shape()),
            ));
        }
        let data = t.data.into_iter().map(|v| T::lit(f64::from(v))).collect();
        p.value = Tensor::new(t.shape, data)?;
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &NaLSuper<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<NaLSuper<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

/// Loads a checkpoint and checks that its architecture matches `expected`.
pub fn load_checkpoint_for<T: Real>(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<NaLSuper<T>> {
    let model = load_checkpoint::<T>(path)?;
    check_architecture(model.config(), expected)?;
    Ok(model)
}

/// Fails with a shape mismatch if the two configurations imply different
/// parameter shapes.
pub fn check_architecture(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let pairs = [
        ("channels", found.channels, expected.channels),
        ("num_blocks", found.num_blocks, expected.num_blocks),
        ("attention_dim", found.attention_dim, expected.attention_dim),
        ("d_tau", found.d_tau, expected.d_tau),
        ("reduction", found.reduction, expected.reduction),
    ];
    for (key, f, e) in pairs {
        if f != e {
            return Err(Error::ShapeMismatch(format!("checkpoint has {key} = {f}, configuration expects {e}")));
        }
    }
    if found.delta_mode != expected.delta_mode {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has delta_mode = {}, configuration expects {}",
            found.delta_mode.as_str(),
            expected.delta_mode.as_str()
        )));
    }
    Ok(())
}
