//! Frozen prompt embeddings: the NLSE file format and a deterministic
//! stand-in embedder.
//!
//! NLSE layout (little-endian):
//!
//! ```text
//! "NLSE" | version u32 = 1 | M u32 | d_tau u32
//! M × [ prompt_len u32 | prompt UTF-8 bytes | d_tau × f32 ]
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{put_f32s, put_len, put_u32, Reader};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"NLSE";
const VERSION: u32 = 1;

/// Default prompt set used when none is supplied.
pub const DEFAULT_PROMPTS: [&str; 2] = ["normal light image", "low light image"];

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding {
    pub prompt: String,
    pub vector: Vec<f64>,
}

/// Ordered, immutable set of prompt embeddings sharing one width.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    entries: Vec<TextEmbedding>,
    d_tau: usize,
}

impl EmbeddingSet {
    pub fn new(entries: Vec<TextEmbedding>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::usage("an embedding set needs at least one prompt"))?;
        let d_tau = first.vector.len();
        if d_tau == 0 {
            return Err(Error::usage("embedding width must be positive"));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.vector.len() != d_tau {
                return Err(Error::dim(format!(
                    "embedding for {:?} has width {}, expected {d_tau}",
                    e.prompt,
                    e.vector.len()
                )));
            }
            if !seen.insert(e.prompt.as_str()) {
                return Err(Error::usage(format!("duplicate prompt {:?}", e.prompt)));
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("embedding for {:?} is not finite", e.prompt)));
            }
        }
        Ok(EmbeddingSet { entries, d_tau })
    }

    pub fn entries(&self) -> &[TextEmbedding] {
        &self.entries
    }

    /// Number of prompts (M).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn d_tau(&self) -> usize {
        self.d_tau
    }

    pub fn prompts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.prompt.as_str())
    }

    /// Stacked `[M, d_tau]` matrix of the vectors.
    pub fn matrix<T: Real>(&self) -> Tensor<T> {
        let data = self
            .entries
            .iter()
            .flat_map(|e| e.vector.iter().map(|&v| T::lit(v)))
            .collect();
        Tensor::new([self.entries.len(), self.d_tau], data).expect("validated at construction")
    }

    /// Rounds every vector to `f32`, the precision NLSE and checkpoint files
    /// store.
    pub fn to_storage_precision(&self) -> Self {
        EmbeddingSet {
            entries: self
                .entries
                .iter()
                .map(|e| TextEmbedding {
                    prompt: e.prompt.clone(),
                    vector: e.vector.iter().map(|&v| v as f32 as f64).collect(),
                })
                .collect(),
            d_tau: self.d_tau,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_len(&mut out, self.entries.len(), "prompt count")?;
        put_len(&mut out, self.d_tau, "embedding width")?;
        for e in &self.entries {
            put_len(&mut out, e.prompt.len(), "prompt")?;
            out.extend_from_slice(e.prompt.as_bytes());
            put_f32s(&mut out, e.vector.iter().map(|&v| v as f32));
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(at, format!("unsupported NLSE version {version}")));
        }
        let m = r.u32("prompt count")? as usize;
        let d_tau = r.u32("embedding width")? as usize;
        let mut entries = Vec::with_capacity(m.min(1 << 16));
        for i in 0..m {
            let len = r.u32("prompt length")? as usize;
            let prompt = r.utf8(len, &format!("prompt {i}"))?.to_string();
            let vector = r
                .f32s(d_tau, &format!("vector {i}"))?
                .into_iter()
                .map(f64::from)
                .collect();
            entries.push(TextEmbedding { prompt, vector });
        }
        if !r.is_at_end() {
            return Err(Error::format(r.offset(), "trailing bytes after last record"));
        }
        let at = r.offset();
        EmbeddingSet::new(entries).map_err(|e| Error::format(at, e.to_string()))
    }
}

pub fn write_embeddings(path: impl AsRef<Path>, set: &EmbeddingSet) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, set.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingSet::from_bytes(&buf)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic unit-norm pseudo-embedding of a prompt.
///
/// The generator is seeded with `fnv1a64(prompt) ^ seed`, draws `d_tau`
/// standard normals and normalises them.
pub fn test_embedder(prompt: &str, d_tau: usize, seed: u64) -> Result<TextEmbedding> {
    if prompt.is_empty() {
        return Err(Error::usage("cannot embed an empty prompt"));
    }
    if d_tau == 0 {
        return Err(Error::usage("embedding width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(prompt.as_bytes()) ^ seed);
    let raw: Vec<f64> = (0..d_tau).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(TextEmbedding {
        prompt: prompt.to_string(),
        vector: raw.into_iter().map(|v| v / norm).collect(),
    })
}

/// Embeds every prompt with [`test_embedder`].
pub fn embed_prompts<S: AsRef<str>>(prompts: &[S], d_tau: usize, seed: u64) -> Result<EmbeddingSet> {
    let entries = prompts
        .iter()
        .map(|p| test_embedder(p.as_ref(), d_tau, seed))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingSet::new(entries)
}

/// Reads one prompt per non-blank line.
pub fn read_prompt_file(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let prompts: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if prompts.is_empty() {
        return Err(Error::usage(format!("{} contains no prompts", path.display())));
    }
    Ok(prompts)
}
