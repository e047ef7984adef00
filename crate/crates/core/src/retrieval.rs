//! Asset retrieval by caption similarity.
//!
//! Embedding backends are interchangeable behind [`EmbeddingBackend`] and
//! selected by name through [`EmbeddingRegistry`]. The built-in backend is a
//! hashed bag of words; externally computed sentence vectors enter through
//! [`PrecomputedEmbeddings`] or the catalog file's optional vector column.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use base64::Engine;

use crate::error::{Error, Result};

pub const HASH_BUCKETS: usize = 1024;

pub trait EmbeddingBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Token counts hashed into a fixed number of buckets, L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagOfWords {
    pub buckets: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self {
            buckets: HASH_BUCKETS,
        }
    }
}

impl HashedBagOfWords {
    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.buckets as u64) as usize
    }
}

impl EmbeddingBackend for HashedBagOfWords {
    fn name(&self) -> &'static str {
        "hashed-bow"
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let mut v = vec![0.0; self.buckets];
        for t in tokenize(text) {
            v[self.bucket(&t)] += 1.0;
        }
        l2_normalize(&mut v);
        Ok(v)
    }
}

/// Looks up vectors computed elsewhere; they pass through unchanged.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedEmbeddings {
    table: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn insert(&mut self, text: impl Into<String>, vector: Vec<f64>) {
        self.table.insert(text.into(), vector);
    }
}

impl EmbeddingBackend for PrecomputedEmbeddings {
    fn name(&self) -> &'static str {
        "precomputed"
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Retrieval(format!("no precomputed embedding for {text:?}")))
    }
}

pub type EmbeddingFactory = fn() -> Box<dyn EmbeddingBackend>;

/// Named embedding backends.
pub struct EmbeddingRegistry {
    entries: BTreeMap<&'static str, EmbeddingFactory>,
}

impl EmbeddingRegistry {
    pub fn builtin() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register("hashed-bow", || Box::new(HashedBagOfWords::default()));
        r.register("precomputed", || Box::new(PrecomputedEmbeddings::default()));
        r
    }

    pub fn register(&mut self, name: &'static str, factory: EmbeddingFactory) {
        self.entries.insert(name, factory);
    }

    pub fn create(&self, name: &str) -> Result<Box<dyn EmbeddingBackend>> {
        self.entries.get(name).map(|f| f()).ok_or_else(|| {
            Error::config(format!(
                "unknown embedding backend {name:?} (known: {})",
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub asset_path: PathBuf,
    pub caption: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSource {
    /// Captions embedded with the built-in hashed bag of words.
    HashedBagOfWords,
    /// Vectors supplied with the catalog.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
    pub source: EmbeddingSource,
}

impl Catalog {
    pub fn from_captions<P: Into<PathBuf>>(items: impl IntoIterator<Item = (P, String)>) -> Result<Self> {
        let backend = HashedBagOfWords::default();
        let entries = items
            .into_iter()
            .map(|(p, caption)| {
                Ok(CatalogEntry {
                    asset_path: p.into(),
                    embedding: backend.embed(&caption)?,
                    caption,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cat = Self {
            entries,
            source: EmbeddingSource::HashedBagOfWords,
        };
        cat.validate()?;
        Ok(cat)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::config("catalog has no entries"))?;
        let dim = first.embedding.len();
        for (i, e) in self.entries.iter().enumerate() {
            if e.caption.trim().is_empty() {
                return Err(Error::config(format!("catalog entry {i} has an empty caption")));
            }
            if e.embedding.len() != dim {
                return Err(Error::config(format!(
                    "catalog entry {i} has embedding dimension {} (expected {dim})",
                    e.embedding.len()
                )));
            }
        }
        Ok(())
    }

    /// Parses the line format `path<TAB>caption[<TAB>base64 f32 LE vector]`.
    /// Blank lines and lines starting with `#` are skipped. Relative asset
    /// paths resolve against `base_dir`; `toy:` references are kept as is.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let backend = HashedBagOfWords::default();
        let mut entries = Vec::new();
        let mut with_vectors = 0usize;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::config(format!(
                    "catalog line {}: expected 2 or 3 tab-separated fields",
                    lineno + 1
                )));
            }
            let path = Path::new(fields[0].trim());
            let asset_path = if path.is_absolute() || fields[0].trim().starts_with(crate::io::TOY_PREFIX) {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            };
            let caption = fields[1].trim().to_string();
            if caption.is_empty() {
                return Err(Error::config(format!("catalog line {}: empty caption", lineno + 1)));
            }
            let embedding = match fields.get(2).map(|s| s.trim()).filter(|s| !s.is_empty()) {
                Some(b64) => {
                    with_vectors += 1;
                    let mut v = decode_vector(b64)
                        .map_err(|e| Error::config(format!("catalog line {}: {e}", lineno + 1)))?;
                    l2_normalize(&mut v);
                    v
                }
                None => backend.embed(&caption)?,
            };
            entries.push(CatalogEntry {
                asset_path,
                caption,
                embedding,
            });
        }
        let source = if with_vectors == 0 {
            EmbeddingSource::HashedBagOfWords
        } else if with_vectors == entries.len() {
            EmbeddingSource::Precomputed
        } else {
            return Err(Error::config("catalog mixes precomputed vectors with bare captions"));
        };
        let cat = Self { entries, source };
        cat.validate()?;
        Ok(cat)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&e.asset_path.display().to_string());
            out.push('\t');
            out.push_str(&e.caption);
            if self.source == EmbeddingSource::Precomputed {
                out.push('\t');
                out.push_str(&encode_vector(&e.embedding));
            }
            out.push('\n');
        }
        out
    }
}

pub fn encode_vector(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| (*x as f32).to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_vector(s: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| format!("bad base64 embedding: {e}"))?;
    if bytes.len() % 4 != 0 || bytes.is_empty() {
        return Err("embedding byte length is not a positive multiple of 4".into());
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    /// Index of the selected entry.
    pub best: usize,
    /// `(entry index, cosine similarity)` sorted by similarity, ties by index.
    pub ranking: Vec<(usize, f64)>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Ranks every catalog entry against a prompt vector.
pub fn retrieve_vector(query: &[f64], catalog: &Catalog) -> Result<Retrieval> {
    catalog.validate()?;
    let dim = catalog.entries[0].embedding.len();
    if query.len() != dim {
        return Err(Error::config(format!(
            "prompt embedding has dimension {} but the catalog uses {dim}",
            query.len()
        )));
    }
    let mut ranking: Vec<(usize, f64)> = catalog
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (i, cosine(query, &e.embedding)))
        .collect();
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(Retrieval {
        best: ranking[0].0,
        ranking,
    })
}

/// Embeds the prompt verbatim with `backend` and ranks the catalog.
pub fn retrieve_with(prompt: &str, catalog: &Catalog, backend: &dyn EmbeddingBackend) -> Result<Retrieval> {
    let q = backend.embed(prompt)?;
    retrieve_vector(&q, catalog)
}

/// Retrieval with the built-in hashed backend.
pub fn retrieve(prompt: &str, catalog: &Catalog) -> Result<Retrieval> {
    if catalog.source == EmbeddingSource::Precomputed {
        return Err(Error::config(
            "catalog carries precomputed vectors; supply a prompt vector from the same model",
        ));
    }
    retrieve_with(prompt, catalog, &HashedBagOfWords::default())
}
