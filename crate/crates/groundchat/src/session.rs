//! Chat sessions: persona editing with live re-expansion, replies and
//! forced-candidate regeneration. Nothing here touches HTTP or storage.

use std::collections::BTreeMap;
use std::sync::Arc;

use groundchat_core::config::ExpansionConfig;
use groundchat_core::corpus::{DialogHistory, DialogTurn, PersonaSentence, PersonaSet, Speaker};
use groundchat_core::decoding::{respond, respond_with, DecodeConfig, Response};
use groundchat_core::expansion::{
    build_candidate_set, expand_persona_set, resolve_provenance, CandidateSet, ExpanderBackend, Expansion,
    ExpansionType, PrefixTable, Provenance,
};
use groundchat_core::model::GroundingModel;
use groundchat_core::text::{fold_key, normalize};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::api::{
    CandidateView, EditOp, EditSummary, GroundingView, LastGroundingView, ProvenanceView, Reply, SentenceRef,
    SentenceView, SessionView, TopEntry,
};
use crate::error::ServiceError;

pub const USER: Speaker = Speaker::Speaker1;
pub const BOT: Speaker = Speaker::Speaker2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastGrounding {
    pub prior_dist: Vec<f64>,
    pub chosen_index: usize,
    pub seed: u64,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub persona_set: PersonaSet,
    /// Raw expansions of the current sentences, before dedup.
    pub expansions: Vec<Expansion>,
    pub candidate_set: CandidateSet,
    pub expand: bool,
    pub transcript: Vec<DialogTurn>,
    pub last_grounding: Option<LastGrounding>,
    /// Sentence ids are never reused, so removals do not renumber.
    pub next_sentence: usize,
}

impl Session {
    /// Every candidate's provenance resolves into the current persona set.
    pub fn provenance_consistent(&self) -> bool {
        (0..self.candidate_set.len()).all(|i| match resolve_provenance(i, &self.candidate_set) {
            Some(Provenance::Null) => i == self.candidate_set.null_index,
            Some(Provenance::Sentence(id)) => self.persona_set.sentence(&id).is_some(),
            None => false,
        })
    }

    fn resolve(&self, target: &SentenceRef) -> Result<usize, ServiceError> {
        let sentences = &self.persona_set.sentences;
        let found = match target {
            SentenceRef::Index(i) => (*i < sentences.len()).then_some(*i),
            SentenceRef::Text(t) => sentences.iter().position(|s| s.id == *t).or_else(|| {
                let key = fold_key(t);
                sentences.iter().position(|s| fold_key(&s.text) == key)
            }),
        };
        found.ok_or_else(|| ServiceError::Validation(format!("no persona sentence matches {target}")))
    }
}

/// Everything a session operation needs besides the session itself. The
/// model is shared read-only.
pub struct Engine {
    pub model: Arc<GroundingModel>,
    pub backend: Arc<dyn ExpanderBackend>,
    pub expansion: ExpansionConfig,
    pub decode: DecodeConfig,
    /// Exchanges of history fed to the model.
    pub history_size: usize,
    pub topk: usize,
    prefixes: PrefixTable,
}

fn candidate_keys(set: &CandidateSet) -> BTreeMap<(ExpansionType, String), usize> {
    let mut m = BTreeMap::new();
    for c in set.candidates.iter().filter(|c| c.kind != ExpansionType::Null) {
        *m.entry((c.kind, fold_key(&c.text))).or_insert(0) += 1;
    }
    m
}

fn fresh_seed() -> u64 {
    rand::random()
}

impl Engine {
    pub fn new(
        model: Arc<GroundingModel>,
        backend: Arc<dyn ExpanderBackend>,
        expansion: ExpansionConfig,
        decode: DecodeConfig,
        history_size: usize,
        topk: usize,
    ) -> Self {
        let prefixes = expansion.prefix_table();
        Self {
            model,
            backend,
            expansion,
            decode,
            history_size,
            topk,
            prefixes,
        }
    }

    fn expand_sentence(&self, persona_id: &str, s: &PersonaSentence) -> Result<Vec<Expansion>, ServiceError> {
        let one = PersonaSet {
            id: persona_id.to_string(),
            sentences: vec![s.clone()],
        };
        Ok(expand_persona_set(
            &one,
            &self.expansion.kinds(),
            self.expansion.beams,
            self.backend.as_ref(),
            self.expansion.seed,
            &self.prefixes,
        )?)
    }

    pub fn create(&self, id: &str, sentences: &[String], expand: bool) -> Result<Session, ServiceError> {
        if sentences.is_empty() {
            return Err(ServiceError::Validation("a persona needs at least one sentence".into()));
        }
        let mut session = Session {
            id: id.to_string(),
            persona_set: PersonaSet {
                id: id.to_string(),
                sentences: Vec::new(),
            },
            expansions: Vec::new(),
            candidate_set: CandidateSet::null_only(id),
            expand,
            transcript: Vec::new(),
            last_grounding: None,
            next_sentence: 0,
        };
        for text in sentences {
            self.add_sentence(&mut session, text)?;
        }
        session.candidate_set = build_candidate_set(&session.persona_set, &session.expansions)?;
        Ok(session)
    }

    /// Appends one sentence and its expansions; returns how many raw
    /// candidates (original plus expansions) it contributed.
    fn add_sentence(&self, session: &mut Session, text: &str) -> Result<usize, ServiceError> {
        let text = normalize(text);
        if text.is_empty() {
            return Err(ServiceError::Validation("persona sentences must not be empty".into()));
        }
        let key = fold_key(&text);
        if session.persona_set.sentences.iter().any(|s| fold_key(&s.text) == key) {
            return Err(ServiceError::Validation(format!("persona already contains {text:?}")));
        }
        let sentence = PersonaSentence {
            id: format!("{}:{}", session.id, session.next_sentence),
            text,
        };
        let exps = if session.expand {
            self.expand_sentence(&session.persona_set.id, &sentence)?
        } else {
            Vec::new()
        };
        let raw = 1 + exps.len();
        session.next_sentence += 1;
        session.persona_set.sentences.push(sentence);
        session.expansions.extend(exps);
        Ok(raw)
    }

    /// Applies `ops` in order. Nothing changes unless every op succeeds and
    /// at least one sentence remains.
    pub fn edit(&self, session: &mut Session, ops: &[EditOp]) -> Result<EditSummary, ServiceError> {
        let mut next = session.clone();
        let mut raw_added = 0;
        for op in ops {
            match op {
                EditOp::Add { sentence } => raw_added += self.add_sentence(&mut next, sentence)?,
                EditOp::Remove { target } => {
                    let i = next.resolve(target)?;
                    let gone = next.persona_set.sentences.remove(i);
                    next.expansions.retain(|e| e.source_id.as_deref() != Some(gone.id.as_str()));
                }
                EditOp::Replace { target, sentence } => {
                    let i = next.resolve(target)?;
                    let text = normalize(sentence);
                    if text.is_empty() {
                        return Err(ServiceError::Validation("persona sentences must not be empty".into()));
                    }
                    let key = fold_key(&text);
                    if next
                        .persona_set
                        .sentences
                        .iter()
                        .enumerate()
                        .any(|(j, s)| j != i && fold_key(&s.text) == key)
                    {
                        return Err(ServiceError::Validation(format!("persona already contains {text:?}")));
                    }
                    let id = next.persona_set.sentences[i].id.clone();
                    next.expansions.retain(|e| e.source_id.as_deref() != Some(id.as_str()));
                    let updated = PersonaSentence { id, text };
                    if next.expand {
                        let exps = self.expand_sentence(&next.persona_set.id, &updated)?;
                        raw_added += 1 + exps.len();
                        next.expansions.extend(exps);
                    } else {
                        raw_added += 1;
                    }
                    next.persona_set.sentences[i] = updated;
                }
            }
        }
        if next.persona_set.sentences.is_empty() {
            return Err(ServiceError::Validation("an edit may not remove every persona sentence".into()));
        }
        next.candidate_set = build_candidate_set(&next.persona_set, &next.expansions)?;
        let before = candidate_keys(&session.candidate_set);
        let after = candidate_keys(&next.candidate_set);
        let diff = |a: &BTreeMap<_, usize>, b: &BTreeMap<_, usize>| -> usize {
            a.iter().map(|(k, n)| n.saturating_sub(*b.get(k).unwrap_or(&0))).sum()
        };
        let summary = EditSummary {
            added: diff(&after, &before),
            removed: diff(&before, &after),
            raw_added,
            candidate_count: next.candidate_set.len(),
            persona: sentence_views(&next),
        };
        // the old grounding indexes into a candidate set that no longer exists
        if summary.added + summary.removed > 0 {
            next.last_grounding = None;
        }
        *session = next;
        Ok(summary)
    }

    fn history(&self, turns: &[DialogTurn]) -> DialogHistory {
        let keep = 2 * self.history_size;
        DialogHistory::new(turns[turns.len().saturating_sub(keep)..].to_vec())
    }

    fn run(
        &self,
        session: &Session,
        turns: &[DialogTurn],
        forced: Option<usize>,
        seed: u64,
    ) -> Result<Response, ServiceError> {
        let history = self.history(turns);
        let set = &session.candidate_set;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = match forced {
            Some(k) => {
                if k >= set.len() {
                    return Err(ServiceError::Validation(format!(
                        "candidate index {k} out of range 0..{}",
                        set.len()
                    )));
                }
                respond_with(&self.model, &history, set, BOT, k, &self.decode, &mut rng)?
            }
            None => respond(&self.model, &history, set, BOT, &self.decode, &mut rng)?,
        };
        Ok(r)
    }

    fn reply(&self, session: &Session, r: &Response, seed: u64, forced: bool, previous: Option<String>) -> Reply {
        Reply {
            response: r.text.clone(),
            chosen_candidate: candidate_view(&session.candidate_set, r.chosen_index),
            provenance: provenance_view(session, r.chosen_index),
            prior_topk: top_entries(&session.candidate_set, &r.prior_dist, r.chosen_index, self.topk),
            truncated: r.truncated,
            seed,
            forced,
            previous,
        }
    }

    pub fn post_message(&self, session: &mut Session, text: &str, seed: Option<u64>) -> Result<Reply, ServiceError> {
        let text = normalize(text);
        if text.is_empty() {
            return Err(ServiceError::Validation("message text is empty".into()));
        }
        let seed = seed.unwrap_or_else(fresh_seed);
        let mut turns = session.transcript.clone();
        turns.push(DialogTurn::new(USER, text));
        let r = self.run(session, &turns, None, seed)?;
        turns.push(DialogTurn::new(BOT, r.text.clone()));
        session.transcript = turns;
        session.last_grounding = Some(LastGrounding {
            prior_dist: r.prior_dist.clone(),
            chosen_index: r.chosen_index,
            seed,
            forced: false,
        });
        Ok(self.reply(session, &r, seed, false, None))
    }

    /// Replaces the last bot turn. With `commit == false` the session is
    /// left untouched and the reply is a preview.
    pub fn regenerate(
        &self,
        session: &mut Session,
        forced: Option<usize>,
        seed: Option<u64>,
        commit: bool,
    ) -> Result<Reply, ServiceError> {
        let last = session
            .transcript
            .iter()
            .rposition(|t| t.speaker == BOT)
            .ok_or_else(|| ServiceError::Validation("there is no bot turn to regenerate".into()))?;
        let seed = seed.unwrap_or_else(fresh_seed);
        let r = self.run(session, &session.transcript[..last], forced, seed)?;
        let previous = session.transcript[last].text.clone();
        let reply = self.reply(session, &r, seed, forced.is_some(), Some(previous));
        if commit {
            session.transcript[last] = DialogTurn::new(BOT, r.text.clone());
            session.last_grounding = Some(LastGrounding {
                prior_dist: r.prior_dist,
                chosen_index: r.chosen_index,
                seed,
                forced: forced.is_some(),
            });
        }
        Ok(reply)
    }

    pub fn grounding(&self, session: &Session) -> GroundingView {
        let set = &session.candidate_set;
        GroundingView {
            session_id: session.id.clone(),
            persona: sentence_views(session),
            candidates: (0..set.len()).map(|i| candidate_view(set, i)).collect(),
            null_index: set.null_index,
            last: session.last_grounding.as_ref().map(|g| LastGroundingView {
                chosen_index: g.chosen_index,
                prior_topk: top_entries(set, &g.prior_dist, g.chosen_index, self.topk),
                seed: g.seed,
                forced: g.forced,
            }),
        }
    }
}

pub fn sentence_views(session: &Session) -> Vec<SentenceView> {
    let counts = session.candidate_set.counts_by_source();
    session
        .persona_set
        .sentences
        .iter()
        .map(|s| SentenceView {
            id: s.id.clone(),
            text: s.text.clone(),
            expansions: counts.get(&s.id).copied().unwrap_or(0).saturating_sub(1),
        })
        .collect()
}

pub fn session_view(session: &Session) -> SessionView {
    SessionView {
        id: session.id.clone(),
        persona: sentence_views(session),
        candidate_count: session.candidate_set.len(),
        expand: session.expand,
        transcript: session.transcript.clone(),
    }
}

fn candidate_view(set: &CandidateSet, index: usize) -> CandidateView {
    let c = &set.candidates[index];
    CandidateView {
        index,
        text: c.text.clone(),
        kind: c.kind,
        source_id: c.source_id.clone(),
        beam_rank: c.beam_rank,
    }
}

fn provenance_view(session: &Session, index: usize) -> ProvenanceView {
    match resolve_provenance(index, &session.candidate_set) {
        Some(Provenance::Sentence(id)) => ProvenanceView {
            sentence: session.persona_set.sentence(&id).map(|s| s.text.clone()),
            sentence_id: Some(id),
            null: false,
        },
        _ => ProvenanceView {
            sentence_id: None,
            sentence: None,
            null: true,
        },
    }
}

/// The `k` most probable candidates, highest first; ties keep index order.
/// A chosen candidate outside the top `k` is appended, which keeps the list
/// sorted.
pub fn top_entries(set: &CandidateSet, probs: &[f64], chosen: usize, k: usize) -> Vec<TopEntry> {
    let mut order: Vec<usize> = (0..probs.len().min(set.len())).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.iter().copied().take(k).collect();
    if chosen < order.len() && !keep.contains(&chosen) {
        keep.push(chosen);
    }
    keep.into_iter()
        .map(|i| {
            let c = &set.candidates[i];
            TopEntry {
                index: i,
                text: c.text.clone(),
                kind: c.kind,
                prob: probs[i],
                source_id: c.source_id.clone(),
                chosen: i == chosen,
            }
        })
        .collect()
}
