//! JSON bodies of the HTTP interface.

use std::fmt;

use groundchat_core::corpus::DialogTurn;
use groundchat_core::expansion::ExpansionType;
use serde::{Deserialize, Serialize};

/// Header carrying a per-request sampling seed.
pub const SEED_HEADER: &str = "x-seed";

fn yes() -> bool {
    true
}

/// `POST /sessions`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub persona: Vec<String>,
    /// Run the expansion backend over every sentence.
    #[serde(default = "yes")]
    pub expand: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceView {
    pub id: String,
    pub text: String,
    /// Candidates derived from this sentence, the original excluded.
    pub expansions: usize,
}

/// `GET /sessions/{id}` and the reply to `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub persona: Vec<SentenceView>,
    pub candidate_count: usize,
    pub expand: bool,
    pub transcript: Vec<DialogTurn>,
}

/// `POST /sessions/{id}/message`. A `seed` here wins over the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostMessage {
    pub text: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateView {
    pub index: usize,
    pub text: String,
    #[serde(rename = "type")]
    pub kind: ExpansionType,
    pub source_id: Option<String>,
    pub beam_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceView {
    pub sentence_id: Option<String>,
    pub sentence: Option<String>,
    pub null: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub index: usize,
    pub text: String,
    #[serde(rename = "type")]
    pub kind: ExpansionType,
    pub prob: f64,
    pub source_id: Option<String>,
    pub chosen: bool,
}

/// Reply to a message or a regeneration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub response: String,
    pub chosen_candidate: CandidateView,
    pub provenance: ProvenanceView,
    /// Prior probabilities, descending.
    pub prior_topk: Vec<TopEntry>,
    pub truncated: bool,
    /// Seed actually used; resend it to reproduce the reply.
    pub seed: u64,
    /// The candidate was forced rather than sampled from the prior.
    pub forced: bool,
    /// Bot turn this reply replaces (regeneration only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous: Option<String>,
}

/// A persona sentence by position, id or text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SentenceRef {
    Index(usize),
    Text(String),
}

impl fmt::Display for SentenceRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SentenceRef::Index(i) => write!(f, "index {i}"),
            SentenceRef::Text(t) => write!(f, "{t:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum EditOp {
    Add { sentence: String },
    Remove { target: SentenceRef },
    Replace { target: SentenceRef, sentence: String },
}

/// `PUT /sessions/{id}/persona`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPersona {
    pub ops: Vec<EditOp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    /// Candidates present after the edit and not before, after dedup.
    pub added: usize,
    pub removed: usize,
    /// Originals plus expansions produced by the edit, before dedup.
    pub raw_added: usize,
    pub candidate_count: usize,
    pub persona: Vec<SentenceView>,
}

/// `POST /sessions/{id}/regenerate`
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Regenerate {
    pub forced_index: Option<usize>,
    pub seed: Option<u64>,
    /// Preview only; the transcript is left as it is.
    pub dry_run: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastGroundingView {
    pub chosen_index: usize,
    pub prior_topk: Vec<TopEntry>,
    pub seed: u64,
    pub forced: bool,
}

/// `GET /sessions/{id}/grounding`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingView {
    pub session_id: String,
    pub persona: Vec<SentenceView>,
    pub candidates: Vec<CandidateView>,
    pub null_index: usize,
    pub last: Option<LastGroundingView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}
