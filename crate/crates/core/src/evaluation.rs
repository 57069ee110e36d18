//! Dialog-quality and grounding metrics.
//!
//! Tokenization for BLEU, distinct-n and overlap is [`crate::text::words`]
//! (lowercased, punctuation split off). Overlap additionally drops the
//! bundled stopword list.
//!
//! BLEU is computed per sentence and averaged: unigram precision is the raw
//! clipped ratio, higher orders use `(matches + 0.1) / (total + 0.1)`, the
//! orders are combined by geometric mean and multiplied by the brevity
//! penalty `exp(1 − r/c)` when the hypothesis is shorter than the reference.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DialogHistory, EntailmentPair, Speaker};
use crate::decoding::{generate_for, DecodeConfig};
use crate::embedder::{Embedding, Encoder};
use crate::error::{Error, Result};
use crate::expansion::{resolve_provenance, CandidateSet, Expansion, Provenance};
use crate::latent::{argmax, kl_categorical, log_softmax, softmax, Categorical};
use crate::model::GroundingModel;
use crate::oracle::{elbo, log_marginal};
use crate::text::{content_words, words};
use crate::training::PreparedExample;

pub const BLEU_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PplMode {
    ExactMarginal,
    ElboBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub ppl: f64,
    pub mode: PplMode,
    pub total_nll: f64,
    pub tokens: usize,
    /// The ELBO mode reports an upper bound on the true perplexity.
    pub upper_bound: bool,
}

/// Per-example NLL under `mode`; `cap` limits exact marginalization.
pub fn example_nll(model: &GroundingModel, ex: &PreparedExample, mode: PplMode, cap: usize) -> Result<(f64, usize)> {
    if mode == PplMode::ExactMarginal && ex.set.len() > cap {
        return Err(Error::Budget(format!(
            "exact marginal over {} candidates exceeds the cap of {cap}",
            ex.set.len()
        )));
    }
    let mut lls = Vec::with_capacity(ex.set.len());
    let mut tokens = 0;
    for c in &ex.set.candidates {
        let (ll, n) = model.log_likelihood(c, &ex.history, &ex.target, ex.speaker)?;
        lls.push(ll);
        tokens = n;
    }
    let prior_lp = log_softmax(&model.prior_logits(&ex.feats));
    let nll = match mode {
        PplMode::ExactMarginal => -log_marginal(&prior_lp, &lls),
        PplMode::ElboBound => {
            let prior = Categorical::new(prior_lp.iter().map(|l| l.exp()).collect())?;
            let q = Categorical::new(softmax(&model.posterior_logits(&ex.feats, &ex.target_emb)))?;
            -elbo(&q, &prior, &lls)?
        }
    };
    Ok((nll, tokens))
}

/// `exp(Σ NLL / Σ target tokens)`. `cap` defaults to 32 candidates.
pub fn perplexity_prepared(
    model: &GroundingModel,
    examples: &[PreparedExample],
    mode: PplMode,
    cap: Option<usize>,
) -> Result<PplReport> {
    let cap = cap.unwrap_or(crate::oracle::OracleBudget::default().max_candidates);
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let (nll, n) = example_nll(model, ex, mode, cap)?;
        total += nll;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Contract("perplexity over zero target tokens".into()));
    }
    Ok(PplReport {
        ppl: (total / tokens as f64).exp(),
        mode,
        total_nll: total,
        tokens,
        upper_bound: mode == PplMode::ElboBound,
    })
}

fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).collect()
}

fn clipped_matches(hyp: &[String], reference: &[String], n: usize) -> (usize, usize) {
    let mut ref_counts: HashMap<&[String], usize> = HashMap::new();
    for g in ngrams(reference, n) {
        *ref_counts.entry(g).or_insert(0) += 1;
    }
    let hyp_grams = ngrams(hyp, n);
    let mut hyp_counts: HashMap<&[String], usize> = HashMap::new();
    for g in &hyp_grams {
        *hyp_counts.entry(g).or_insert(0) += 1;
    }
    let matched = hyp_counts
        .iter()
        .map(|(g, c)| (*c).min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, hyp_grams.len())
}

/// BLEU-`n` of one hypothesis against one reference.
pub fn sentence_bleu(hyp: &str, reference: &str, n: usize) -> f64 {
    let h = words(hyp);
    let r = words(reference);
    if h.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = clipped_matches(&h, &r, k);
        let p = if k == 1 {
            m as f64 / t as f64
        } else {
            (m as f64 + BLEU_EPSILON) / (t as f64 + BLEU_EPSILON)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (c, rl) = (h.len() as f64, r.len() as f64);
    let bp = if c >= rl { 1.0 } else { (1.0 - rl / c).exp() };
    bp * (log_sum / n as f64).exp()
}

/// Mean sentence BLEU-`n` over aligned pairs.
pub fn bleu_n(hypotheses: &[String], references: &[String], n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::Contract(format!("BLEU order {n} is not supported")));
    }
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = hypotheses.iter().zip(references).map(|(h, r)| sentence_bleu(h, r, n)).sum();
    Ok(sum / hypotheses.len() as f64)
}

/// Distinct n-grams over total n-grams across the whole corpus.
pub fn distinct_n(texts: &[String], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for t in texts {
        let toks = words(t);
        for g in ngrams(&toks, n) {
            total += 1;
            seen.insert(g.to_vec());
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// One side had no content words left.
    pub empty: bool,
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Set-level unigram overlap after stopword removal.
pub fn unigram_overlap(response: &str, persona: &str) -> Overlap {
    let resp: HashSet<String> = content_words(response).into_iter().collect();
    let pers: HashSet<String> = content_words(persona).into_iter().collect();
    overlap_of_sets(&resp, &pers)
}

fn overlap_of_sets(resp: &HashSet<String>, pers: &HashSet<String>) -> Overlap {
    if resp.is_empty() || pers.is_empty() {
        return Overlap {
            recall: 0.0,
            precision: 0.0,
            f1: 0.0,
            empty: true,
        };
    }
    let inter = resp.intersection(pers).count() as f64;
    let precision = inter / resp.len() as f64;
    let recall = inter / pers.len() as f64;
    Overlap {
        recall,
        precision,
        f1: f1(precision, recall),
        empty: false,
    }
}

pub fn cosine(a: &Embedding, b: &Embedding) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine of the two sentence encodings; 0 when either is the zero vector.
pub fn semantic_similarity(a: &str, b: &str, enc: &dyn Encoder) -> Result<f64> {
    Ok(cosine(&enc.encode(a)?, &enc.encode(b)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Prior,
    Inference,
}

/// One utterance with a known grounding persona sentence.
#[derive(Debug, Clone)]
pub struct GroundingCase {
    pub id: String,
    pub history: DialogHistory,
    pub utterance: String,
    pub set: Arc<CandidateSet>,
    pub gold_sentence_id: String,
    /// Number of original persona sentences, for the chance level.
    pub persona_size: usize,
}

/// Turns matched entailment pairs into grounding cases. Pairs without a
/// test-split match or without a candidate set are counted as skipped.
pub fn grounding_cases_from_pairs(
    pairs: &[EntailmentPair],
    corpus: &Corpus,
    sets: &BTreeMap<String, Arc<CandidateSet>>,
    history_size: usize,
) -> (Vec<GroundingCase>, usize) {
    let mut cases = Vec::new();
    let mut skipped = 0;
    for (i, pair) in pairs.iter().enumerate() {
        let found = pair.matched.as_ref().and_then(|m| {
            let dialog = corpus.dialogs.iter().find(|d| d.id == m.dialog_id)?;
            let set = sets.get(&m.persona_set_id)?.clone();
            let persona_size = corpus.persona_set(&m.persona_set_id)?.sentences.len();
            let start = m.turn_index.saturating_sub(2 * history_size);
            Some(GroundingCase {
                id: format!("dnli{i}"),
                history: DialogHistory::new(dialog.turns[start..m.turn_index].to_vec()),
                utterance: pair.utterance.clone(),
                set,
                gold_sentence_id: m.persona_sentence_id.clone(),
                persona_size,
            })
        });
        match found {
            Some(c) => cases.push(c),
            None => skipped += 1,
        }
    }
    (cases, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntailmentResult {
    pub accuracy: f64,
    pub evaluated: usize,
    pub skipped: usize,
    /// Mean of `1 / |S|` over evaluated cases.
    pub chance: f64,
}

/// Index the chosen network ranks first for `case`.
pub fn grounding_choice(model: &GroundingModel, case: &GroundingCase, which: Which) -> Result<usize> {
    let feats = model.features(&case.history, &case.set)?;
    let logits = match which {
        Which::Prior => model.prior_logits(&feats),
        Which::Inference => model.posterior_logits(&feats, &model.embed(&case.utterance)?),
    };
    Ok(argmax(&logits))
}

pub fn entailment_accuracy(model: &GroundingModel, cases: &[GroundingCase], which: Which) -> Result<EntailmentResult> {
    let mut hits = 0usize;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let mut chance = 0.0;
    for case in cases {
        if case.set.is_empty() || case.persona_size == 0 {
            skipped += 1;
            continue;
        }
        let k = grounding_choice(model, case, which)?;
        match resolve_provenance(k, &case.set) {
            Some(Provenance::Sentence(id)) => {
                hits += usize::from(id == case.gold_sentence_id);
            }
            Some(Provenance::Null) => {}
            None => {
                skipped += 1;
                continue;
            }
        }
        evaluated += 1;
        chance += 1.0 / case.persona_size as f64;
    }
    Ok(EntailmentResult {
        accuracy: if evaluated == 0 { 0.0 } else { hits as f64 / evaluated as f64 },
        evaluated,
        skipped,
        chance: if evaluated == 0 { 0.0 } else { chance / evaluated as f64 },
    })
}

/// Expected share of replies grounded on the null candidate: the mean prior
/// probability of the null entry.
pub fn null_rate(model: &GroundingModel, examples: &[PreparedExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let total: f64 = examples
        .iter()
        .map(|ex| softmax(&model.prior_logits(&ex.feats))[ex.set.null_index])
        .sum();
    total / examples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    EntitySwap,
    ExpansionSwap,
}

/// A persona candidate and an edited replacement to force as `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditedPersonaCase {
    pub original_candidate: Expansion,
    pub edited_candidate: Expansion,
    pub edit_kind: EditKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_entity: Option<String>,
    #[serde(default)]
    pub history: DialogHistory,
    #[serde(default = "default_speaker")]
    pub speaker: Speaker,
}

fn default_speaker() -> Speaker {
    Speaker::Speaker2
}

impl EditedPersonaCase {
    pub fn new(
        original: Expansion,
        edited: Expansion,
        edit_kind: EditKind,
        key_entity: Option<String>,
        history: DialogHistory,
        speaker: Speaker,
    ) -> Result<Self> {
        let c = Self {
            original_candidate: original,
            edited_candidate: edited,
            edit_kind,
            key_entity,
            history,
            speaker,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if crate::text::fold_key(&self.original_candidate.text) == crate::text::fold_key(&self.edited_candidate.text) {
            return Err(Error::Contract("edited candidate equals the original".into()));
        }
        if self.edit_kind == EditKind::EntitySwap && self.key_entity.as_deref().is_none_or(|e| e.trim().is_empty()) {
            return Err(Error::Contract("entity swaps need a key entity".into()));
        }
        Ok(())
    }
}

pub fn load_edited_cases(path: &Path) -> Result<Vec<EditedPersonaCase>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: EditedPersonaCase = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        c.validate().map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(c);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlResult {
    /// Over entity-swap cases.
    pub entity_rate: f64,
    /// Over all cases.
    pub sim_edited: f64,
    pub sim_unedited: f64,
    pub responses: Vec<String>,
}

/// Regenerates every case with `z` forced to the edited candidate. Case `i`
/// samples with seed `seed + i`.
pub fn controllability_eval(
    model: &GroundingModel,
    cases: &[EditedPersonaCase],
    cfg: &DecodeConfig,
    seed: u64,
) -> Result<ControlResult> {
    let mut hits = 0usize;
    let mut entity_cases = 0usize;
    let mut sim_e = 0.0;
    let mut sim_u = 0.0;
    let mut responses = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        c.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let (text, _) = generate_for(model, &c.edited_candidate, &c.history, c.speaker, cfg, &mut rng)?;
        if c.edit_kind == EditKind::EntitySwap {
            entity_cases += 1;
            let key = words(c.key_entity.as_deref().unwrap_or_default());
            let resp = words(&text);
            if !key.is_empty() && resp.windows(key.len()).any(|w| w == key.as_slice()) {
                hits += 1;
            }
        }
        sim_e += semantic_similarity(&text, &c.edited_candidate.text, model.encoder.as_ref())?;
        sim_u += semantic_similarity(&text, &c.original_candidate.text, model.encoder.as_ref())?;
        responses.push(text);
    }
    let n = cases.len().max(1) as f64;
    Ok(ControlResult {
        entity_rate: if entity_cases == 0 { 0.0 } else { hits as f64 / entity_cases as f64 },
        sim_edited: sim_e / n,
        sim_unedited: sim_u / n,
        responses,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Perplexity; `ppl_mode` says whether it is exact or an ELBO bound.
    pub ppl: f64,
    pub ppl_mode: Option<PplMode>,
    pub bleu1: f64,
    pub bleu2: f64,
    pub d1: f64,
    pub d2: f64,
    pub entail_prior: f64,
    pub entail_inf: f64,
    pub null_rate: f64,
    pub overlap_recall: f64,
    pub overlap_precision: f64,
    pub overlap_f1: f64,
    pub sem_sim: f64,
    pub ctrl_entity_rate: f64,
    pub ctrl_sim_edited: f64,
    pub ctrl_sim_unedited: f64,
    /// Counts and notes that qualify the numbers above.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.ppl_mode.is_some() && !(self.ppl >= 1.0) {
            return Err(Error::Domain(format!("perplexity {} below 1", self.ppl)));
        }
        let rates = [
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("d1", self.d1),
            ("d2", self.d2),
            ("entail_prior", self.entail_prior),
            ("entail_inf", self.entail_inf),
            ("null_rate", self.null_rate),
            ("overlap_recall", self.overlap_recall),
            ("overlap_precision", self.overlap_precision),
            ("overlap_f1", self.overlap_f1),
            ("ctrl_entity_rate", self.ctrl_entity_rate),
        ];
        for (name, v) in rates {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("sem_sim", self.sem_sim),
            ("ctrl_sim_edited", self.ctrl_sim_edited),
            ("ctrl_sim_unedited", self.ctrl_sim_unedited),
        ] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} = {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let ppl_label = match self.ppl_mode {
            Some(PplMode::ElboBound) => "ppl (elbo bound)",
            Some(PplMode::ExactMarginal) => "ppl (exact)",
            None => "ppl (not computed)",
        };
        let rows: [(&str, f64); 16] = [
            (ppl_label, self.ppl),
            ("bleu1", self.bleu1),
            ("bleu2", self.bleu2),
            ("distinct-1", self.d1),
            ("distinct-2", self.d2),
            ("entail prior", self.entail_prior),
            ("entail inference", self.entail_inf),
            ("null rate", self.null_rate),
            ("overlap recall", self.overlap_recall),
            ("overlap precision", self.overlap_precision),
            ("overlap f1", self.overlap_f1),
            ("semantic sim", self.sem_sim),
            ("ctrl entity rate", self.ctrl_entity_rate),
            ("ctrl sim edited", self.ctrl_sim_edited),
            ("ctrl sim unedited", self.ctrl_sim_unedited),
            ("", f64::NAN),
        ];
        for (k, v) in rows.iter().filter(|(k, _)| !k.is_empty()) {
            let _ = writeln!(s, "{k:<20} {v:>10.4}");
        }
        for (k, v) in &self.notes {
            let _ = writeln!(s, "{k:<20} {v:>10}");
        }
        s
    }
}

/// Mean KL(q‖p) over prepared examples; a training diagnostic.
pub fn mean_kl(model: &GroundingModel, examples: &[PreparedExample]) -> Result<f64> {
    let mut sum = 0.0;
    for ex in examples {
        let p = Categorical::new(softmax(&model.prior_logits(&ex.feats)))?;
        let q = Categorical::new(softmax(&model.posterior_logits(&ex.feats, &ex.target_emb)))?;
        sum += kl_categorical(&q, &p)?;
    }
    Ok(sum / examples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::FallbackEncoder;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn bleu_extremes() {
        let refs = v(&["the cat sat on the mat", "i like green tea"]);
        assert!((bleu_n(&refs, &refs, 1).unwrap() - 1.0).abs() < 1e-15);
        assert!((bleu_n(&refs, &refs, 2).unwrap() - 1.0).abs() < 1e-15);
        let disjoint = v(&["dogs bark loudly", "you hate coffee"]);
        assert_eq!(bleu_n(&disjoint, &refs, 1).unwrap(), 0.0);
        assert_eq!(bleu_n(&disjoint, &refs, 2).unwrap(), 0.0);
        assert!(bleu_n(&refs, &refs[..1], 1).is_err());
    }

    #[test]
    fn bleu_hand_corpus() {
        let hyps = v(&["the cat sat", "a dog ran fast", "hello world"]);
        let refs = v(&["the cat sat down", "a dog ran", "goodbye world"]);
        // 1: p1 = 3/3, p2 = (2+.1)/(2+.1) = 1, bp = exp(1 - 4/3)
        let s1_b1 = (1.0f64 - 4.0 / 3.0).exp();
        let s1_b2 = s1_b1;
        // 2: p1 = 3/4, p2 = (2+.1)/(3+.1), bp = 1
        let s2_b1 = 0.75;
        let s2_b2 = (0.75f64 * (2.1 / 3.1)).sqrt();
        // 3: p1 = 1/2, p2 = (0+.1)/(1+.1), bp = 1
        let s3_b1 = 0.5;
        let s3_b2 = (0.5f64 * (0.1 / 1.1)).sqrt();
        let b1 = bleu_n(&hyps, &refs, 1).unwrap();
        let b2 = bleu_n(&hyps, &refs, 2).unwrap();
        assert!((b1 - (s1_b1 + s2_b1 + s3_b1) / 3.0).abs() < 1e-15, "{b1}");
        assert!((b2 - (s1_b2 + s2_b2 + s3_b2) / 3.0).abs() < 1e-15, "{b2}");
    }

    #[test]
    fn bleu_clips_repeated_words() {
        // "the the the" vs "the cat": one clipped match out of three
        assert!((sentence_bleu("the the the", "the cat", 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn distinct_examples() {
        assert_eq!(distinct_n(&v(&["a a a a"]), 1), 0.25);
        assert_eq!(distinct_n(&v(&["one two three", "four five"]), 1), 1.0);
        // bigrams: (i like)(like cats) + (i like)(like dogs) → 3 distinct of 4
        assert_eq!(distinct_n(&v(&["i like cats", "i like dogs"]), 2), 0.75);
        assert_eq!(distinct_n(&v(&["i like cats", "i like dogs"]), 1), 4.0 / 6.0);
        // order of the corpus does not matter
        assert_eq!(
            distinct_n(&v(&["i like dogs", "i like cats"]), 2),
            distinct_n(&v(&["i like cats", "i like dogs"]), 2)
        );
    }

    #[test]
    fn overlap_examples() {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<HashSet<_>>();
        let o = overlap_of_sets(&set(&["a", "b", "c"]), &set(&["b", "c", "d"]));
        assert!((o.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((o.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((o.f1 - 2.0 / 3.0).abs() < 1e-15);
        // same arithmetic through the tokenizer with content words
        let o = unigram_overlap("cats dogs birds", "dogs birds fish");
        assert!((o.f1 - 2.0 / 3.0).abs() < 1e-15);
        let o = unigram_overlap("I love surfing waves", "surfing waves love");
        assert_eq!((o.recall, o.precision, o.f1), (1.0, 1.0, 1.0));
        let o = unigram_overlap("cats", "dogs");
        assert_eq!((o.recall, o.precision, o.f1), (0.0, 0.0, 0.0));
        assert!(!o.empty);
        let o = unigram_overlap("the and of", "dogs");
        assert!(o.empty);
    }

    #[test]
    fn f1_is_harmonic_mean() {
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert!((f1(0.5, 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn similarity_examples() {
        let enc = FallbackEncoder::default();
        assert!((semantic_similarity("i like tea", "i like tea", &enc).unwrap() - 1.0).abs() < 1e-12);
        let ab = semantic_similarity("i like tea", "dogs bark", &enc).unwrap();
        let ba = semantic_similarity("dogs bark", "i like tea", &enc).unwrap();
        assert_eq!(ab, ba);
        assert_eq!(semantic_similarity("", "dogs", &enc).unwrap(), 0.0);
        // constructed orthogonal inputs
        assert_eq!(cosine(&Embedding(vec![1.0, 0.0]), &Embedding(vec![0.0, 3.0])), 0.0);
    }

    #[test]
    fn similarity_orthogonal_hashed_features() {
        // Two single-word texts whose hashed vectors are made orthogonal by
        // projecting one onto the complement of the other.
        let enc = FallbackEncoder::default().with_bigrams(false);
        let a = Embedding(enc.feature_vector("alpha"));
        let b = Embedding(enc.feature_vector("beta"));
        let proj = a.dot(&b) / a.dot(&a);
        let b_perp = Embedding(b.0.iter().zip(&a.0).map(|(x, y)| x - proj * y).collect());
        assert!(cosine(&a, &b_perp).abs() < 1e-12);
    }

    #[test]
    fn edited_case_invariants() {
        let orig = Expansion {
            source_id: Some("p:0".into()),
            kind: crate::expansion::ExpansionType::Original,
            text: "my favorite color is red".into(),
            beam_rank: 0,
        };
        let same = orig.clone();
        assert!(EditedPersonaCase::new(
            orig.clone(),
            same,
            EditKind::ExpansionSwap,
            None,
            DialogHistory::default(),
            Speaker::Speaker2
        )
        .is_err());
        let mut green = orig.clone();
        green.text = "my favorite color is green".into();
        assert!(EditedPersonaCase::new(
            orig.clone(),
            green.clone(),
            EditKind::EntitySwap,
            None,
            DialogHistory::default(),
            Speaker::Speaker2
        )
        .is_err());
        assert!(EditedPersonaCase::new(
            orig,
            green,
            EditKind::EntitySwap,
            Some("green".into()),
            DialogHistory::default(),
            Speaker::Speaker2
        )
        .is_ok());
    }

    #[test]
    fn report_ranges_and_table() {
        let mut r = EvalReport {
            ppl: 12.5,
            ppl_mode: Some(PplMode::ElboBound),
            bleu1: 0.2,
            overlap_precision: 0.5,
            overlap_recall: 0.25,
            ..Default::default()
        };
        r.overlap_f1 = f1(r.overlap_precision, r.overlap_recall);
        assert!(r.validate().is_ok());
        assert!(r.to_table().contains("ppl (elbo bound)"));
        r.null_rate = 1.5;
        assert!(r.validate().is_err());
        let bad = EvalReport {
            ppl: 0.5,
            ppl_mode: Some(PplMode::ExactMarginal),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
