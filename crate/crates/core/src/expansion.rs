//! Persona expansion: relation and paraphrase backends, prefixing,
//! deduplication and candidate-set construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{PersonaSentence, PersonaSet};
use crate::error::{Error, Result};
use crate::hashing::{fnv1a64, SplitMix64};
use crate::text::{content_words, fold_key, normalize, words};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExpansionType {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "paraphrase")]
    Paraphrase,
    #[serde(rename = "null")]
    Null,
    #[serde(rename = "oEffect")]
    OEffect,
    #[serde(rename = "oReact")]
    OReact,
    #[serde(rename = "oWant")]
    OWant,
    #[serde(rename = "xAttr")]
    XAttr,
    #[serde(rename = "xEffect")]
    XEffect,
    #[serde(rename = "xIntent")]
    XIntent,
    #[serde(rename = "xNeed")]
    XNeed,
    #[serde(rename = "xReact")]
    XReact,
    #[serde(rename = "xWant")]
    XWant,
}

impl ExpansionType {
    pub const COUNT: usize = 12;

    pub const ALL: [ExpansionType; 12] = [
        Self::Original,
        Self::Paraphrase,
        Self::Null,
        Self::OEffect,
        Self::OReact,
        Self::OWant,
        Self::XAttr,
        Self::XEffect,
        Self::XIntent,
        Self::XNeed,
        Self::XReact,
        Self::XWant,
    ];

    /// The nine commonsense relations.
    pub const RELATIONS: [ExpansionType; 9] = [
        Self::OEffect,
        Self::OReact,
        Self::OWant,
        Self::XAttr,
        Self::XEffect,
        Self::XIntent,
        Self::XNeed,
        Self::XReact,
        Self::XWant,
    ];

    /// Row in the type-embedding table.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_relation(self) -> bool {
        Self::RELATIONS.contains(&self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::Paraphrase => "paraphrase",
            Self::Null => "null",
            Self::OEffect => "oEffect",
            Self::OReact => "oReact",
            Self::OWant => "oWant",
            Self::XAttr => "xAttr",
            Self::XEffect => "xEffect",
            Self::XIntent => "xIntent",
            Self::XNeed => "xNeed",
            Self::XReact => "xReact",
            Self::XWant => "xWant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for ExpansionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One candidate: an original sentence, a typed expansion of one, or the
/// null persona (`source_id == None`, empty text).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    pub source_id: Option<String>,
    #[serde(rename = "type")]
    pub kind: ExpansionType,
    pub text: String,
    pub beam_rank: usize,
}

impl Expansion {
    pub fn null() -> Self {
        Self {
            source_id: None,
            kind: ExpansionType::Null,
            text: String::new(),
            beam_rank: 0,
        }
    }

    pub fn original(sentence: &PersonaSentence) -> Self {
        Self {
            source_id: Some(sentence.id.clone()),
            kind: ExpansionType::Original,
            text: sentence.text.clone(),
            beam_rank: 0,
        }
    }
}

/// Sentence prefixes applied to relation tails. Overridable per relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixTable(pub BTreeMap<ExpansionType, String>);

impl Default for PrefixTable {
    fn default() -> Self {
        use ExpansionType::*;
        let table = [
            (XWant, "I want"),
            (XAttr, "I am"),
            (XEffect, "I"),
            (XIntent, "I intend"),
            (XNeed, "I need"),
            (XReact, "I feel"),
            (OEffect, "Others"),
            (OReact, "Others feel"),
            (OWant, "Others want"),
        ];
        Self(table.into_iter().map(|(k, v)| (k, v.to_string())).collect())
    }
}

impl PrefixTable {
    pub fn with_override(mut self, kind: ExpansionType, prefix: &str) -> Self {
        self.0.insert(kind, prefix.to_string());
        self
    }

    /// Prefixes `tail` for `relation`. Types without a prefix and tails that
    /// already start with the prefix come back normalized but unchanged.
    pub fn apply(&self, relation: ExpansionType, tail: &str) -> String {
        let tail = normalize(tail);
        let Some(prefix) = self.0.get(&relation) else {
            return tail;
        };
        let pw = words(prefix);
        let tw = words(&tail);
        if tw.len() >= pw.len() && tw[..pw.len()] == pw[..] {
            return tail;
        }
        format!("{prefix} {tail}")
    }
}

pub fn prefix_rule(relation: ExpansionType, tail: &str) -> String {
    PrefixTable::default().apply(relation, tail)
}

/// A source of raw expansion texts. Implementations must be deterministic
/// in `(sentence text, kind, n, seed)`.
pub trait ExpanderBackend: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> &[ExpansionType];

    /// Up to `n` raw texts in rank order (tails for relations, full
    /// sentences for paraphrases).
    fn generate(
        &self,
        sentence: &PersonaSentence,
        kind: ExpansionType,
        n: usize,
        seed: u64,
    ) -> std::result::Result<Vec<String>, String>;
}

fn run_backend(
    sentence: &PersonaSentence,
    kind: ExpansionType,
    n: usize,
    backend: &dyn ExpanderBackend,
    seed: u64,
    prefixes: &PrefixTable,
) -> Result<Vec<Expansion>> {
    if !backend.capabilities().contains(&kind) {
        return Err(Error::Capability {
            backend: backend.name().to_string(),
            kind,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let raw = backend
        .generate(sentence, kind, n, seed)
        .map_err(|msg| Error::Backend {
            sentence_id: sentence.id.clone(),
            msg,
        })?;
    Ok(raw
        .iter()
        .map(|t| normalize(t))
        .filter(|t| !t.is_empty())
        .take(n)
        .enumerate()
        .map(|(rank, tail)| Expansion {
            source_id: Some(sentence.id.clone()),
            kind,
            text: prefixes.apply(kind, &tail),
            beam_rank: rank,
        })
        .collect())
}

/// At most `n` prefixed expansions of `sentence` along one relation.
pub fn expand_relation(
    sentence: &PersonaSentence,
    relation: ExpansionType,
    n: usize,
    backend: &dyn ExpanderBackend,
    seed: u64,
    prefixes: &PrefixTable,
) -> Result<Vec<Expansion>> {
    if !relation.is_relation() {
        return Err(Error::Contract(format!("{relation} is not a relation type")));
    }
    run_backend(sentence, relation, n, backend, seed, prefixes)
}

/// At most `n` paraphrases of `sentence`, unprefixed.
pub fn paraphrase_expand(
    sentence: &PersonaSentence,
    n: usize,
    backend: &dyn ExpanderBackend,
    seed: u64,
) -> Result<Vec<Expansion>> {
    run_backend(sentence, ExpansionType::Paraphrase, n, backend, seed, &PrefixTable::default())
}

/// Runs every requested kind (relations and/or paraphrase) over every
/// sentence of `set`.
pub fn expand_persona_set(
    set: &PersonaSet,
    kinds: &[ExpansionType],
    n: usize,
    backend: &dyn ExpanderBackend,
    seed: u64,
    prefixes: &PrefixTable,
) -> Result<Vec<Expansion>> {
    let mut out = Vec::new();
    for s in &set.sentences {
        for &kind in kinds {
            let batch = match kind {
                ExpansionType::Paraphrase => paraphrase_expand(s, n, backend, seed)?,
                k => expand_relation(s, k, n, backend, seed, prefixes)?,
            };
            out.extend(batch);
        }
    }
    Ok(out)
}

/// Originals, then kept expansions, then exactly one null entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub persona_set_id: String,
    pub candidates: Vec<Expansion>,
    pub null_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sentence(String),
    Null,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn types(&self) -> Vec<ExpansionType> {
        self.candidates.iter().map(|c| c.kind).collect()
    }

    /// A candidate set holding only the null persona.
    pub fn null_only(persona_set_id: &str) -> Self {
        Self {
            persona_set_id: persona_set_id.to_string(),
            candidates: vec![Expansion::null()],
            null_index: 0,
        }
    }

    /// Number of candidates grounded in each source sentence.
    pub fn counts_by_source(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for c in &self.candidates {
            if let Some(s) = &c.source_id {
                *m.entry(s.clone()).or_insert(0) += 1;
            }
        }
        m
    }
}

pub fn resolve_provenance(index: usize, set: &CandidateSet) -> Option<Provenance> {
    let c = set.candidates.get(index)?;
    Some(match &c.source_id {
        Some(id) => Provenance::Sentence(id.clone()),
        None => Provenance::Null,
    })
}

/// Orders candidates as originals (in `persona` order), then expansions
/// grouped by source, type and beam rank, then the null entry. A candidate
/// whose case-folded text equals an earlier one is dropped.
pub fn build_candidate_set(persona: &PersonaSet, expansions: &[Expansion]) -> Result<CandidateSet> {
    let order: HashMap<&str, usize> = persona
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut sorted = Vec::with_capacity(expansions.len());
    for e in expansions {
        if e.kind == ExpansionType::Null {
            return Err(Error::Contract("null entries are added by build_candidate_set".into()));
        }
        let pos = e
            .source_id
            .as_deref()
            .and_then(|id| order.get(id))
            .ok_or_else(|| {
                Error::Integrity(format!(
                    "expansion {:?} has source {:?} outside persona set {}",
                    e.text, e.source_id, persona.id
                ))
            })?;
        sorted.push((*pos, e));
    }
    sorted.sort_by_key(|(pos, e)| (*pos, e.kind, e.beam_rank));

    let mut seen: HashMap<String, Option<String>> = HashMap::new();
    let mut candidates = Vec::with_capacity(persona.sentences.len() + sorted.len() + 1);
    let originals = persona.sentences.iter().map(Expansion::original);
    for cand in originals.chain(sorted.into_iter().map(|(_, e)| e.clone())) {
        if cand.text.trim().is_empty() {
            continue;
        }
        let key = fold_key(&cand.text);
        if let Some(first) = seen.get(&key) {
            if *first != cand.source_id {
                log::debug!(
                    "candidate {:?} from {:?} collides with one from {:?}; keeping the first",
                    cand.text,
                    cand.source_id,
                    first
                );
            }
            continue;
        }
        seen.insert(key, cand.source_id.clone());
        candidates.push(cand);
    }
    let null_index = candidates.len();
    candidates.push(Expansion::null());
    Ok(CandidateSet {
        persona_set_id: persona.id.clone(),
        candidates,
        null_index,
    })
}

/// Case-folded texts of every candidate.
pub fn distinct_texts(set: &CandidateSet) -> HashSet<String> {
    set.candidates.iter().map(|c| fold_key(&c.text)).collect()
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

fn mock_lexicon(kind: ExpansionType) -> &'static [&'static str] {
    use ExpansionType::*;
    match kind {
        XAttr => &[
            "fond of {}",
            "passionate about {}",
            "curious about {}",
            "devoted to {}",
            "an expert in {}",
            "a fan of {}",
            "enthusiastic about {}",
        ],
        XWant => &[
            "to talk about {}",
            "to learn more about {}",
            "to share {} with friends",
            "to spend more time on {}",
            "to find others who like {}",
            "to get better at {}",
            "to read about {}",
        ],
        XIntent => &[
            "to enjoy {}",
            "to relax with {}",
            "to be known for {}",
            "to keep up with {}",
            "to make time for {}",
            "to explore {}",
        ],
        XNeed => &[
            "to know about {}",
            "time for {}",
            "money for {}",
            "friends who like {}",
            "to plan for {}",
            "space for {}",
        ],
        XEffect => &[
            "think about {} a lot",
            "spend hours on {}",
            "talk about {} often",
            "get excited by {}",
            "save up for {}",
            "smile when {} comes up",
        ],
        XReact => &[
            "happy about {}",
            "proud of {}",
            "excited about {}",
            "calm around {}",
            "content with {}",
            "inspired by {}",
        ],
        OEffect => &[
            "ask me about {}",
            "learn about {}",
            "hear stories about {}",
            "get curious about {}",
            "join me for {}",
            "talk to me about {}",
        ],
        OReact => &[
            "impressed by {}",
            "interested in {}",
            "amused by {}",
            "curious about my {}",
            "glad about {}",
            "surprised by {}",
        ],
        OWant => &[
            "to hear about {}",
            "to try {}",
            "to join in on {}",
            "to see {}",
            "to ask about {}",
            "to learn {}",
        ],
        Paraphrase => &[
            "to be honest , {}",
            "{} , for sure",
            "i would say {}",
            "truly , {}",
            "it is true that {}",
            "{} , really",
        ],
        Original | Null => &[],
    }
}

/// Deterministic template expander for tests and offline demos.
///
/// Relation templates are filled with the sentence's last content word;
/// paraphrase templates wrap the whole sentence (lowercased). Templates are
/// ranked by `SplitMix64(fnv1a64(text) ^ seed ^ kind)` so the order is
/// reproducible per sentence and seed.
#[derive(Debug, Clone)]
pub struct MockBackend {
    caps: Vec<ExpansionType>,
}

impl Default for MockBackend {
    fn default() -> Self {
        let mut caps = ExpansionType::RELATIONS.to_vec();
        caps.push(ExpansionType::Paraphrase);
        Self { caps }
    }
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ExpanderBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn capabilities(&self) -> &[ExpansionType] {
        &self.caps
    }

    fn generate(
        &self,
        sentence: &PersonaSentence,
        kind: ExpansionType,
        n: usize,
        seed: u64,
    ) -> std::result::Result<Vec<String>, String> {
        let lexicon = mock_lexicon(kind);
        let key = fold_key(&sentence.text);
        let mut rng = SplitMix64::new(fnv1a64(key.as_bytes()) ^ seed ^ ((kind.index() as u64) << 56));
        let mut ranked: Vec<(u64, &str)> = lexicon.iter().map(|t| (rng.next_u64(), *t)).collect();
        ranked.sort();
        let fill = if kind == ExpansionType::Paraphrase {
            key.clone()
        } else {
            content_words(&key)
                .pop()
                .or_else(|| words(&key).pop())
                .unwrap_or_else(|| "it".to_string())
        };
        Ok(ranked
            .into_iter()
            .take(n)
            .map(|(_, t)| t.replace("{}", &fill))
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Precomputed expansion files
// ---------------------------------------------------------------------------

/// One line of an expansion file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionRecord {
    pub persona_set_id: String,
    pub source_id: String,
    #[serde(rename = "type")]
    pub kind: ExpansionType,
    pub text: String,
    pub beam_rank: usize,
}

pub fn load_expansion_records(path: &Path) -> Result<Vec<ExpansionRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExpansionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_expansion_records(path: &Path, records: &[ExpansionRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_records(persona_set_id: &str, expansions: &[Expansion]) -> Vec<ExpansionRecord> {
    expansions
        .iter()
        .filter_map(|e| {
            Some(ExpansionRecord {
                persona_set_id: persona_set_id.to_string(),
                source_id: e.source_id.clone()?,
                kind: e.kind,
                text: e.text.clone(),
                beam_rank: e.beam_rank,
            })
        })
        .collect()
}

/// Expansions grouped by persona set id.
pub fn group_by_persona_set(records: &[ExpansionRecord]) -> BTreeMap<String, Vec<Expansion>> {
    let mut m: BTreeMap<String, Vec<Expansion>> = BTreeMap::new();
    for r in records {
        m.entry(r.persona_set_id.clone()).or_default().push(Expansion {
            source_id: Some(r.source_id.clone()),
            kind: r.kind,
            text: r.text.clone(),
            beam_rank: r.beam_rank,
        });
    }
    m
}

/// Serves precomputed expansions (e.g. offline commonsense beams, back
/// translation output, or human-revised personas) keyed by sentence id.
#[derive(Debug, Clone, Default)]
pub struct FileBackend {
    name: String,
    caps: Vec<ExpansionType>,
    by_source: BTreeMap<(String, ExpansionType), Vec<(usize, String)>>,
}

impl FileBackend {
    pub fn from_records(name: &str, records: &[ExpansionRecord]) -> Self {
        let mut by_source: BTreeMap<(String, ExpansionType), Vec<(usize, String)>> = BTreeMap::new();
        let mut caps = Vec::new();
        for r in records {
            by_source
                .entry((r.source_id.clone(), r.kind))
                .or_default()
                .push((r.beam_rank, r.text.clone()));
            if !caps.contains(&r.kind) {
                caps.push(r.kind);
            }
        }
        for v in by_source.values_mut() {
            v.sort();
        }
        caps.sort();
        Self {
            name: name.to_string(),
            caps,
            by_source,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = load_expansion_records(path)?;
        Ok(Self::from_records(&format!("file:{}", path.display()), &records))
    }
}

impl ExpanderBackend for FileBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn capabilities(&self) -> &[ExpansionType] {
        &self.caps
    }

    fn generate(
        &self,
        sentence: &PersonaSentence,
        kind: ExpansionType,
        n: usize,
        _seed: u64,
    ) -> std::result::Result<Vec<String>, String> {
        Ok(self
            .by_source
            .get(&(sentence.id.clone(), kind))
            .map(|v| v.iter().take(n).map(|(_, t)| t.clone()).collect())
            .unwrap_or_default())
    }
}
