//! Persona-Chat style corpus ingestion, history windowing and DNLI joins.
//!
//! # File formats
//!
//! The corpus is line-delimited JSON. Every line is one record tagged by
//! `kind`:
//!
//! ```text
//! {"kind":"persona","id":"p17","sentences":["i love surfing .","my mom is a doctor ."]}
//! {"kind":"dialog","id":"d3","split":"train","persona_set_id":"p17",
//!  "partner_persona_set_id":"p4","turns":[{"speaker":"speaker1","text":"hi !"}, ...]}
//! ```
//!
//! `persona_set_id` is the persona of `speaker2`; the optional
//! `partner_persona_set_id` is the persona of `speaker1`. A speaker without
//! a persona never produces training targets.
//!
//! DNLI files are line-delimited `{"persona_text", "utterance", "label"}`
//! with `label` one of `entailment`, `neutral`, `contradiction`.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{fold_key, normalize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSentence {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaSet {
    pub id: String,
    pub sentences: Vec<PersonaSentence>,
}

impl PersonaSet {
    /// Builds a set from raw texts. Texts are normalized, empty texts are
    /// rejected and later duplicates of an earlier normalized text are
    /// dropped. Sentence ids are `{set_id}:{index}` over the kept texts.
    pub fn from_texts<S: AsRef<str>>(id: &str, texts: &[S]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut sentences = Vec::new();
        for raw in texts {
            let text = normalize(raw.as_ref());
            if text.is_empty() {
                return Err(Error::Integrity(format!("persona set {id} has an empty sentence")));
            }
            if !seen.insert(fold_key(&text)) {
                log::debug!("persona set {id}: dropping duplicate sentence {text:?}");
                continue;
            }
            sentences.push(PersonaSentence {
                id: format!("{id}:{}", sentences.len()),
                text,
            });
        }
        Ok(Self {
            id: id.to_string(),
            sentences,
        })
    }

    pub fn sentence(&self, id: &str) -> Option<&PersonaSentence> {
        self.sentences.iter().find(|s| s.id == id)
    }

    pub fn texts(&self) -> Vec<String> {
        self.sentences.iter().map(|s| s.text.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Speaker1,
    Speaker2,
}

impl Speaker {
    pub fn other(self) -> Self {
        match self {
            Speaker::Speaker1 => Speaker::Speaker2,
            Speaker::Speaker2 => Speaker::Speaker1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogTurn {
    pub speaker: Speaker,
    pub text: String,
}

impl DialogTurn {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self {
            speaker,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub id: String,
    pub split: Split,
    pub persona_set_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partner_persona_set_id: Option<String>,
    pub turns: Vec<DialogTurn>,
}

impl Dialog {
    pub fn persona_of(&self, speaker: Speaker) -> Option<&str> {
        match speaker {
            Speaker::Speaker2 => Some(&self.persona_set_id),
            Speaker::Speaker1 => self.partner_persona_set_id.as_deref(),
        }
    }
}

/// Preceding turns of a target utterance, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogHistory {
    pub turns: Vec<DialogTurn>,
}

impl DialogHistory {
    pub fn new(turns: Vec<DialogTurn>) -> Self {
        Self { turns }
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    /// `{dialog_id}#{turn_index}`
    pub id: String,
    pub history: DialogHistory,
    pub target: String,
    pub target_speaker: Speaker,
    pub persona_set_id: String,
}

/// Which speakers' turns become targets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetSide {
    #[default]
    Both,
    Speaker1,
    Speaker2,
}

impl TargetSide {
    fn admits(self, speaker: Speaker) -> bool {
        match self {
            TargetSide::Both => true,
            TargetSide::Speaker1 => speaker == Speaker::Speaker1,
            TargetSide::Speaker2 => speaker == Speaker::Speaker2,
        }
    }
}

/// One example per admitted turn whose speaker has a persona. Each history
/// holds at most `2 * history_size` preceding turns in order; short
/// prefixes give shorter histories.
pub fn window_history(dialog: &Dialog, history_size: usize, side: TargetSide) -> Vec<TrainingExample> {
    let window = 2 * history_size;
    dialog
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| side.admits(t.speaker))
        .filter_map(|(i, turn)| {
            let persona = dialog.persona_of(turn.speaker)?;
            let start = i.saturating_sub(window);
            Some(TrainingExample {
                id: format!("{}#{i}", dialog.id),
                history: DialogHistory::new(dialog.turns[start..i].to_vec()),
                target: turn.text.clone(),
                target_speaker: turn.speaker,
                persona_set_id: persona.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CorpusCounts {
    pub persona_sets: usize,
    pub dialogs: usize,
    pub by_split: BTreeMap<Split, usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub persona_sets: Vec<PersonaSet>,
    pub dialogs: Vec<Dialog>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Record {
    Persona {
        id: String,
        sentences: Vec<String>,
    },
    Dialog(Dialog),
}

impl Corpus {
    pub fn persona_set(&self, id: &str) -> Option<&PersonaSet> {
        self.persona_sets.iter().find(|p| p.id == id)
    }

    pub fn persona_index(&self) -> BTreeMap<String, PersonaSet> {
        self.persona_sets.iter().map(|p| (p.id.clone(), p.clone())).collect()
    }

    pub fn counts(&self) -> CorpusCounts {
        let mut by_split = BTreeMap::new();
        for d in &self.dialogs {
            *by_split.entry(d.split).or_insert(0) += 1;
        }
        CorpusCounts {
            persona_sets: self.persona_sets.len(),
            dialogs: self.dialogs.len(),
            by_split,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Dialog> {
        self.dialogs.iter().filter(move |d| d.split == split)
    }

    pub fn examples(&self, split: Split, history_size: usize, side: TargetSide) -> Vec<TrainingExample> {
        self.split(split)
            .flat_map(|d| window_history(d, history_size, side))
            .collect()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for p in &self.persona_sets {
            let rec = Record::Persona {
                id: p.id.clone(),
                sentences: p.texts(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        for d in &self.dialogs {
            serde_json::to_writer(&mut w, &Record::Dialog(d.clone()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads a corpus file keeping dialogs of `split` (all splits when `None`).
/// Persona sets are always loaded in full.
pub fn load_personachat(path: &Path, split: Option<Split>) -> Result<Corpus> {
    let reader = BufReader::new(File::open(path)?);
    let mut corpus = Corpus::default();
    let mut set_ids = HashSet::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        match rec {
            Record::Persona { id, sentences } => {
                let set = PersonaSet::from_texts(&id, &sentences)
                    .map_err(|e| parse_err(lineno, e.to_string()))?;
                if !set_ids.insert(id.clone()) {
                    return Err(parse_err(lineno, format!("duplicate persona set id {id}")));
                }
                corpus.persona_sets.push(set);
            }
            Record::Dialog(mut d) => {
                for t in &mut d.turns {
                    t.text = normalize(&t.text);
                    if t.text.is_empty() {
                        return Err(parse_err(lineno, format!("dialog {}: empty turn", d.id)));
                    }
                }
                if d.turns.windows(2).any(|w| w[0].speaker == w[1].speaker) {
                    return Err(parse_err(lineno, format!("dialog {}: speakers do not alternate", d.id)));
                }
                if split.is_none_or(|s| s == d.split) {
                    corpus.dialogs.push(d);
                }
            }
        }
    }
    for d in &corpus.dialogs {
        for id in std::iter::once(&d.persona_set_id).chain(d.partner_persona_set_id.iter()) {
            if !set_ids.contains(id) {
                return Err(Error::Integrity(format!(
                    "dialog {} references missing persona set {id}",
                    d.id
                )));
            }
        }
    }
    let c = corpus.counts();
    log::info!(
        "loaded {} persona sets, {} dialogs {:?} from {}",
        c.persona_sets,
        c.dialogs,
        c.by_split,
        path.display()
    );
    Ok(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

#[derive(Debug, Deserialize)]
struct DnliRecord {
    persona_text: String,
    utterance: String,
    label: String,
}

/// Where a DNLI utterance occurs in the local test split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentMatch {
    pub dialog_id: String,
    pub turn_index: usize,
    pub persona_set_id: String,
    pub persona_sentence_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntailmentPair {
    pub persona_text: String,
    pub utterance: String,
    /// Set when the utterance is spoken in the test corpus by a speaker
    /// whose persona contains `persona_text`.
    pub matched: Option<EntailmentMatch>,
}

/// Keeps entailment-labelled pairs and joins them against `test` by exact
/// normalized utterance text.
pub fn load_dnli_entailment(path: &Path, test: &Corpus) -> Result<Vec<EntailmentPair>> {
    let mut by_utterance: BTreeMap<String, Vec<(&Dialog, usize)>> = BTreeMap::new();
    for d in &test.dialogs {
        for (i, t) in d.turns.iter().enumerate() {
            by_utterance.entry(fold_key(&t.text)).or_default().push((d, i));
        }
    }
    let personas = test.persona_index();

    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let rec: DnliRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label = match rec.label.as_str() {
            "entailment" => NliLabel::Entailment,
            "neutral" => NliLabel::Neutral,
            "contradiction" => NliLabel::Contradiction,
            other => return Err(parse_err(format!("unknown label {other:?}"))),
        };
        if label != NliLabel::Entailment {
            continue;
        }
        let persona_key = fold_key(&rec.persona_text);
        let matched = by_utterance
            .get(&fold_key(&rec.utterance))
            .into_iter()
            .flatten()
            .find_map(|&(d, turn_index)| {
                let set_id = d.persona_of(d.turns[turn_index].speaker)?;
                let set = personas.get(set_id)?;
                let sentence = set.sentences.iter().find(|s| fold_key(&s.text) == persona_key)?;
                Some(EntailmentMatch {
                    dialog_id: d.id.clone(),
                    turn_index,
                    persona_set_id: set_id.to_string(),
                    persona_sentence_id: sentence.id.clone(),
                })
            });
        out.push(EntailmentPair {
            persona_text: normalize(&rec.persona_text),
            utterance: normalize(&rec.utterance),
            matched,
        });
    }
    Ok(out)
}

/// Number of distinct utterances with a test-split match.
pub fn matched_utterance_count(pairs: &[EntailmentPair]) -> usize {
    pairs
        .iter()
        .filter(|p| p.matched.is_some())
        .map(|p| fold_key(&p.utterance))
        .collect::<HashSet<_>>()
        .len()
}
