//! A copy-grounding corpus with known provenance.
//!
//! Every persona sentence reads `my favorite {topic} is {sentinel} .` where
//! the sentinel is a made-up word. Each dialog is one exchange: the first
//! speaker asks about one topic and the second answers with the matching
//! persona sentence verbatim, so the grounding sentence of every reply is
//! known. Candidate sets hold the originals, one mock expansion per
//! relation per sentence and the null entry.
//!
//! Fresh sentinels that never occur in any dialog are reserved for
//! regeneration probes; they are part of the tokenizer vocabulary but are
//! never trained on.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::corpus::{Corpus, Dialog, DialogTurn, PersonaSet, Speaker, Split, TargetSide, TrainingExample};
use crate::decoding::DecodeConfig;
use crate::embedder::EncoderConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    controllability_eval, entailment_accuracy, ControlResult, EditKind, EditedPersonaCase, EntailmentResult,
    GroundingCase, Which,
};
use crate::expansion::{build_candidate_set, expand_persona_set, CandidateSet, Expansion, ExpansionType, MockBackend, PrefixTable};
use crate::generator::{GeneratorConfig, Tokenizer};
use crate::model::{GroundingModel, LatentConfig, ModelConfig};
use crate::training::{prepare_examples, train, CheckpointSink, LrSchedule, TrainConfig, TrainReport};

pub const TOPICS: [&str; 12] = [
    "color", "food", "animal", "band", "city", "sport", "drink", "book", "movie", "season", "flower", "game",
];

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dialogs: usize,
    pub dialogs_per_persona: usize,
    pub sentences_per_persona: usize,
    /// Share of persona sets whose dialogs go to the validation split.
    pub valid_fraction: f64,
    pub fresh_sentinels: usize,
    pub beams: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dialogs: 2000,
            dialogs_per_persona: 4,
            sentences_per_persona: 3,
            valid_fraction: 0.1,
            fresh_sentinels: 100,
            beams: 1,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub sets: BTreeMap<String, Arc<CandidateSet>>,
    /// Example id → id of the persona sentence the reply copies.
    pub gold: BTreeMap<String, String>,
    pub fresh: Vec<String>,
}

pub fn persona_sentence(topic: &str, sentinel: &str) -> String {
    format!("my favorite {topic} is {sentinel} .")
}

pub fn question(topic: &str) -> String {
    format!("what is your favorite {topic} ?")
}

fn sentinel<R: Rng>(rng: &mut R, taken: &mut HashSet<String>) -> String {
    loop {
        let w: String = (0..3)
            .map(|_| format!("{}{}", ONSETS[rng.random_range(0..ONSETS.len())], VOWELS[rng.random_range(0..VOWELS.len())]))
            .collect();
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.sentences_per_persona == 0 || cfg.sentences_per_persona > TOPICS.len() || cfg.dialogs_per_persona == 0 {
        return Err(Error::Config("synthetic corpus needs 1..=12 sentences and ≥ 1 dialog per persona".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken: HashSet<String> = TOPICS.iter().map(|t| t.to_string()).collect();
    let n_sets = cfg.dialogs.div_ceil(cfg.dialogs_per_persona);
    let n_valid = ((n_sets as f64 * cfg.valid_fraction).round() as usize).min(n_sets);
    let backend = MockBackend::new();
    let prefixes = PrefixTable::default();

    let mut corpus = Corpus::default();
    let mut sets = BTreeMap::new();
    let mut gold = BTreeMap::new();
    for s in 0..n_sets {
        let set_id = format!("syn{s:04}");
        let mut topics: Vec<&str> = TOPICS.to_vec();
        topics.shuffle(&mut rng);
        topics.truncate(cfg.sentences_per_persona);
        let texts: Vec<String> = topics
            .iter()
            .map(|t| persona_sentence(t, &sentinel(&mut rng, &mut taken)))
            .collect();
        let persona = PersonaSet::from_texts(&set_id, &texts)?;
        let expansions =
            expand_persona_set(&persona, &ExpansionType::RELATIONS, cfg.beams, &backend, cfg.seed, &prefixes)?;
        sets.insert(set_id.clone(), Arc::new(build_candidate_set(&persona, &expansions)?));
        let split = if s >= n_sets - n_valid { Split::Valid } else { Split::Train };
        for d in 0..cfg.dialogs_per_persona {
            let idx = s * cfg.dialogs_per_persona + d;
            if idx >= cfg.dialogs {
                break;
            }
            let k = rng.random_range(0..topics.len());
            let dialog_id = format!("{set_id}-d{d}");
            gold.insert(format!("{dialog_id}#1"), persona.sentences[k].id.clone());
            corpus.dialogs.push(Dialog {
                id: dialog_id,
                split,
                persona_set_id: set_id.clone(),
                partner_persona_set_id: None,
                turns: vec![
                    DialogTurn::new(Speaker::Speaker1, question(topics[k])),
                    DialogTurn::new(Speaker::Speaker2, persona.sentences[k].text.clone()),
                ],
            });
        }
        corpus.persona_sets.push(persona);
    }
    let fresh = (0..cfg.fresh_sentinels).map(|_| sentinel(&mut rng, &mut taken)).collect();
    Ok(SyntheticCorpus {
        corpus,
        sets,
        gold,
        fresh,
    })
}

impl SyntheticCorpus {
    pub fn examples(&self, split: Split) -> Vec<TrainingExample> {
        self.corpus.examples(split, 1, TargetSide::Speaker2)
    }

    /// Every text the tokenizer should know, fresh sentinels included.
    pub fn vocabulary_texts(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .sets
            .values()
            .flat_map(|s| s.candidates.iter().map(|c| c.text.clone()))
            .collect();
        out.extend(self.corpus.dialogs.iter().flat_map(|d| d.turns.iter().map(|t| t.text.clone())));
        out.extend(self.fresh.iter().cloned());
        out
    }

    pub fn fit_tokenizer(&self) -> Tokenizer {
        Tokenizer::fit(&self.vocabulary_texts(), 1, usize::MAX)
    }

    pub fn grounding_cases(&self, split: Split) -> Vec<GroundingCase> {
        self.examples(split)
            .into_iter()
            .filter_map(|ex| {
                let gold = self.gold.get(&ex.id)?.clone();
                let set = self.sets.get(&ex.persona_set_id)?.clone();
                let persona_size = self.corpus.persona_set(&ex.persona_set_id)?.sentences.len();
                Some(GroundingCase {
                    id: ex.id,
                    history: ex.history,
                    utterance: ex.target,
                    set,
                    gold_sentence_id: gold,
                    persona_size,
                })
            })
            .collect()
    }

    /// Up to `n` entity swaps: the copied sentence of a `split` dialog with
    /// its sentinel replaced by a fresh one.
    pub fn edited_cases(&self, split: Split, n: usize) -> Result<Vec<EditedPersonaCase>> {
        let mut out = Vec::new();
        for (ex, fresh) in self.examples(split).into_iter().zip(self.fresh.iter().cycle()).take(n) {
            let sid = &self.gold[&ex.id];
            let persona = self
                .corpus
                .persona_set(&ex.persona_set_id)
                .and_then(|p| p.sentence(sid))
                .ok_or_else(|| Error::Integrity(format!("missing gold sentence {sid}")))?;
            let original = Expansion::original(persona);
            let old = original.text.split_whitespace().nth(4).unwrap_or_default().to_string();
            let mut edited = original.clone();
            edited.text = original.text.replacen(&old, fresh, 1);
            out.push(EditedPersonaCase::new(
                original,
                edited,
                EditKind::EntitySwap,
                Some(fresh.clone()),
                ex.history,
                ex.target_speaker,
            )?);
        }
        Ok(out)
    }
}

/// Small model used for the copy-grounding experiment.
pub fn desk_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::default(),
        latent: LatentConfig {
            seed,
            ..LatentConfig::default()
        },
        generator: GeneratorConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 48,
            copy_head: true,
            seed,
            ..GeneratorConfig::default()
        },
    }
}

/// Training settings for the copy-grounding experiment. The step size is
/// far above the full-scale default because the generator starts from
/// scratch.
pub fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        lr_schedule: LrSchedule::Multiplicative,
        lr_decay_per_epoch: 0.5,
        batch_size: 8,
        max_epochs: 3,
        patience: 1,
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskReport {
    pub train: TrainReport,
    pub prior: EntailmentResult,
    pub inference: EntailmentResult,
    pub control: ControlResult,
    pub train_seconds: f64,
    pub control_seconds: f64,
}

/// Generates the corpus, trains, then measures grounding accuracy on the
/// validation dialogs and regenerates `probes` entity swaps.
pub fn run_desk_experiment(
    synth: &SyntheticConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    probes: usize,
    out_dir: Option<&Path>,
) -> Result<(GroundingModel, DeskReport)> {
    let data = generate(synth)?;
    let mut model = GroundingModel::new(model_cfg.clone(), data.fit_tokenizer())?;
    let train_set = prepare_examples(&model, &data.examples(Split::Train), &data.sets)?;
    let valid_set = prepare_examples(&model, &data.examples(Split::Valid), &data.sets)?;
    let snapshot = AppConfig {
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        synthetic: synth.clone(),
        ..AppConfig::default()
    }
    .to_toml()?;
    let sink = out_dir.map(|d| CheckpointSink {
        dir: d.to_path_buf(),
        config_snapshot: snapshot,
    });
    let started = Instant::now();
    let report = train(&mut model, &train_set, &valid_set, train_cfg, sink.as_ref())?;
    let train_seconds = started.elapsed().as_secs_f64();
    let cases = data.grounding_cases(Split::Valid);
    let prior = entailment_accuracy(&model, &cases, Which::Prior)?;
    let inference = entailment_accuracy(&model, &cases, Which::Inference)?;
    let started = Instant::now();
    let edits = data.edited_cases(Split::Valid, probes)?;
    let decode = DecodeConfig {
        max_new_tokens: 12,
        ..DecodeConfig::default()
    };
    let control = controllability_eval(&model, &edits, &decode, train_cfg.seed)?;
    Ok((
        model,
        DeskReport {
            train: report,
            prior,
            inference,
            control,
            train_seconds,
            control_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expansion::resolve_provenance;
    use crate::expansion::Provenance;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            dialogs: 40,
            fresh_sentinels: 5,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn shape_of_the_corpus() {
        let data = generate(&small()).unwrap();
        assert_eq!(data.corpus.dialogs.len(), 40);
        assert_eq!(data.corpus.persona_sets.len(), 10);
        for set in data.sets.values() {
            assert_eq!(set.len(), 31);
            assert_eq!(set.null_index, 30);
        }
        let train = data.examples(Split::Train);
        let valid = data.examples(Split::Valid);
        assert_eq!(train.len() + valid.len(), 40);
        assert_eq!(valid.len(), 4);
    }

    #[test]
    fn replies_copy_their_gold_sentence() {
        let data = generate(&small()).unwrap();
        for ex in data.examples(Split::Train) {
            let sid = &data.gold[&ex.id];
            let p = data.corpus.persona_set(&ex.persona_set_id).unwrap();
            assert_eq!(p.sentence(sid).unwrap().text, ex.target);
            let set = &data.sets[&ex.persona_set_id];
            let k = set.candidates.iter().position(|c| c.text == ex.target).unwrap();
            assert_eq!(resolve_provenance(k, set), Some(Provenance::Sentence(sid.clone())));
        }
    }

    #[test]
    fn fresh_sentinels_never_occur_in_dialogs() {
        let data = generate(&small()).unwrap();
        let used: HashSet<String> = data
            .corpus
            .dialogs
            .iter()
            .flat_map(|d| d.turns.iter().flat_map(|t| crate::text::words(&t.text)))
            .collect();
        for f in &data.fresh {
            assert!(!used.contains(f));
        }
        let tok = data.fit_tokenizer();
        for f in &data.fresh {
            assert!(tok.id(f).is_some(), "{f} missing from vocabulary");
        }
    }

    #[test]
    fn edits_swap_the_sentinel() {
        let data = generate(&small()).unwrap();
        let edits = data.edited_cases(Split::Valid, 3).unwrap();
        assert_eq!(edits.len(), 3);
        for e in edits {
            let key = e.key_entity.clone().unwrap();
            assert!(e.edited_candidate.text.contains(&key));
            assert!(!e.original_candidate.text.contains(&key));
            assert_eq!(e.edited_candidate.source_id, e.original_candidate.source_id);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.fresh, b.fresh);
    }
}
