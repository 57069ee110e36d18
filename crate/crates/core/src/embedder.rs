//! Sentence encoders: mean of subword vectors.
//!
//! Two backends ship with the crate:
//!
//! * [`FallbackEncoder`] hashes every lowercased word (and, by default,
//!   every adjacent word pair) with FNV-1a, seeds a SplitMix64 stream with
//!   `hash ^ seed`, and maps the first `dim` draws `u` to `(2u - 1) * sqrt(3)`
//!   so entries have unit variance. No files, no downloads.
//! * [`TableEncoder`] reads a pretrained subword embedding table exported
//!   as text (`token v1 .. vd` per line, optional `count dim` header) and
//!   splits unknown words greedily into `##`-continued pieces.
//!
//! Encoders are frozen: nothing downstream backpropagates into them.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::corpus::DialogHistory;
use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, SplitMix64};
use crate::text::words;

/// Joins history turns before encoding.
pub const HISTORY_SEPARATOR: &str = " | ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn mean_of(dim: usize, vectors: &[Vec<f64>]) -> Self {
        let mut out = vec![0.0; dim];
        if vectors.is_empty() {
            return Self(out);
        }
        for v in vectors {
            for (o, x) in out.iter_mut().zip(v) {
                *o += x;
            }
        }
        let n = vectors.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Self(out)
    }
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn identity(&self) -> String;

    /// One vector per subword of `text`, in order.
    fn subword_vectors(&self, text: &str) -> Result<Vec<Vec<f64>>>;

    /// Mean subword vector; the zero vector for text without subwords.
    fn encode(&self, text: &str) -> Result<Embedding> {
        Ok(Embedding::mean_of(self.dim(), &self.subword_vectors(text)?))
    }
}

pub fn encode_text(text: &str, enc: &dyn Encoder) -> Result<Embedding> {
    enc.encode(text)
}

/// Which turns feed the history embedding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryScope {
    #[default]
    All,
    LastTurn,
}

pub fn history_text(history: &DialogHistory, scope: HistoryScope) -> String {
    let turns = match scope {
        HistoryScope::All => &history.turns[..],
        HistoryScope::LastTurn => &history.turns[history.turns.len().saturating_sub(1)..],
    };
    turns.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(HISTORY_SEPARATOR)
}

pub fn encode_history(history: &DialogHistory, enc: &dyn Encoder, scope: HistoryScope) -> Result<Embedding> {
    enc.encode(&history_text(history, scope))
}

#[derive(Debug, Clone)]
pub struct FallbackEncoder {
    dim: usize,
    seed: u64,
    bigrams: bool,
}

impl FallbackEncoder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            bigrams: true,
        }
    }

    pub fn with_bigrams(mut self, on: bool) -> Self {
        self.bigrams = on;
        self
    }

    /// The hashed vector of one subword feature.
    pub fn feature_vector(&self, feature: &str) -> Vec<f64> {
        let mut rng = SplitMix64::new(fnv1a64(feature.as_bytes()) ^ self.seed);
        let scale = 3f64.sqrt();
        (0..self.dim).map(|_| (2.0 * rng.next_f64() - 1.0) * scale).collect()
    }

    /// Unigram features, then `a\u{1}b` pair features when enabled.
    pub fn features(&self, text: &str) -> Vec<String> {
        let w = words(text);
        let mut out = w.clone();
        if self.bigrams {
            out.extend(w.windows(2).map(|p| format!("{}\u{1}{}", p[0], p[1])));
        }
        out
    }
}

impl Default for FallbackEncoder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM, 0)
    }
}

impl Encoder for FallbackEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        format!("fallback:d{}:s{}:bigrams={}", self.dim, self.seed, self.bigrams)
    }

    fn subword_vectors(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        Ok(self.features(text).iter().map(|f| self.feature_vector(f)).collect())
    }
}

/// Static subword embedding table (e.g. an exported transformer input
/// embedding matrix).
#[derive(Debug, Clone)]
pub struct TableEncoder {
    name: String,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl TableEncoder {
    pub fn from_entries(name: &str, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = entries.first().map(|(_, v)| v.len()).unwrap_or(0);
        if dim == 0 {
            return Err(Error::Encoder(format!("{name}: empty embedding table")));
        }
        if let Some((t, v)) = entries.iter().find(|(_, v)| v.len() != dim) {
            return Err(Error::Encoder(format!("{name}: token {t:?} has dim {} not {dim}", v.len())));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            table: entries.into_iter().collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Encoder(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let values = values.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            // word2vec-style "count dim" header
            if i == 0 && values.len() == 1 && token.parse::<usize>().is_ok() {
                continue;
            }
            entries.push((token.to_string(), values));
        }
        Self::from_entries(&format!("pretrained:{}", path.display()), entries)
    }

    fn pieces(&self, word: &str) -> Vec<&Vec<f64>> {
        if let Some(v) = self.table.get(word) {
            return vec![v];
        }
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let piece: String = chars[start..end].iter().collect();
                let key = if start == 0 { piece } else { format!("##{piece}") };
                if let Some(v) = self.table.get(&key) {
                    found = Some((end, v));
                    break;
                }
            }
            match found {
                Some((end, v)) => {
                    out.push(v);
                    start = end;
                }
                None => start += 1,
            }
        }
        out
    }
}

impl Encoder for TableEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn identity(&self) -> String {
        self.name.clone()
    }

    fn subword_vectors(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        Ok(words(text)
            .iter()
            .flat_map(|w| self.pieces(w))
            .cloned()
            .collect())
    }
}

/// Memoizing wrapper. Safe under concurrent readers and inserters.
pub struct CachedEncoder {
    inner: Arc<dyn Encoder>,
    cache: RwLock<HashMap<String, Embedding>>,
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    identity: String,
    entries: Vec<(String, Embedding)>,
}

impl CachedEncoder {
    pub fn new(inner: Arc<dyn Encoder>) -> Self {
        Self {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Loads entries written by [`CachedEncoder::save`] for the same
    /// encoder identity; a cache for another encoder is ignored.
    pub fn load(&self, path: &Path) -> Result<usize> {
        if !path.exists() {
            return Ok(0);
        }
        let file: CacheFile = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if file.identity != self.inner.identity() {
            log::warn!("ignoring embedding cache {} built for {}", path.display(), file.identity);
            return Ok(0);
        }
        let n = file.entries.len();
        self.cache.write().extend(file.entries);
        Ok(n)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<_> = self.cache.read().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let file = CacheFile {
            identity: self.inner.identity(),
            entries,
        };
        serde_json::to_writer(std::io::BufWriter::new(File::create(path)?), &file)?;
        Ok(())
    }
}

impl Encoder for CachedEncoder {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn subword_vectors(&self, text: &str) -> Result<Vec<Vec<f64>>> {
        self.inner.subword_vectors(text)
    }

    fn encode(&self, text: &str) -> Result<Embedding> {
        if let Some(e) = self.cache.read().get(text) {
            return Ok(e.clone());
        }
        let e = self.inner.encode(text)?;
        self.cache.write().insert(text.to_string(), e.clone());
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// `fallback` or `pretrained:<path to embedding table>`
    pub kind: String,
    pub dim: usize,
    pub seed: u64,
    pub bigrams: bool,
    pub history_scope: HistoryScope,
    pub cache_path: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: "fallback".into(),
            dim: FallbackEncoder::DEFAULT_DIM,
            seed: 0,
            bigrams: true,
            history_scope: HistoryScope::All,
            cache_path: None,
        }
    }
}

pub fn build_encoder(cfg: &EncoderConfig) -> Result<Arc<dyn Encoder>> {
    let base: Arc<dyn Encoder> = if cfg.kind == "fallback" {
        Arc::new(FallbackEncoder::new(cfg.dim, cfg.seed).with_bigrams(cfg.bigrams))
    } else if let Some(path) = cfg.kind.strip_prefix("pretrained:") {
        Arc::new(TableEncoder::load(Path::new(path))?)
    } else {
        return Err(Error::Config(format!("unknown encoder kind {:?}", cfg.kind)));
    };
    let cached = CachedEncoder::new(base);
    if let Some(p) = &cfg.cache_path {
        cached.load(p)?;
    }
    Ok(Arc::new(cached))
}
