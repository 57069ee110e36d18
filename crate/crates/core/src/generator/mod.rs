//! Conditional language model over (persona; history; target) sequences.
//!
//! Layout of an assembled sequence:
//!
//! ```text
//! [BOS] persona… ([SEP] turn…)* [SEP] target… [EOS]
//! ```
//!
//! Persona tokens carry the `Persona` segment, every `[SEP]` and turn carries
//! its speaker's segment, and `[BOS]` takes the segment of whatever follows
//! it. The target mask covers the target tokens and the closing `[EOS]`.

pub mod tokenizer;
pub mod transformer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogHistory, Speaker};
use crate::decoding::nucleus_filter;
use crate::error::{Error, Result};
use crate::expansion::{Expansion, ExpansionType};
use crate::latent::{sample, Categorical};

pub use tokenizer::Tokenizer;
pub use transformer::{Decoder, DecoderParams, GeneratorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentId {
    Persona,
    Speaker1,
    Speaker2,
}

impl SegmentId {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn of(speaker: Speaker) -> Self {
        match speaker {
            Speaker::Speaker1 => SegmentId::Speaker1,
            Speaker::Speaker2 => SegmentId::Speaker2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledInput {
    pub tokens: Vec<u32>,
    pub segments: Vec<SegmentId>,
    pub target_mask: Vec<bool>,
    /// Number of history turns dropped to fit the length limit.
    pub dropped_turns: usize,
}

impl AssembledInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn target_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.target_mask[i]).collect()
    }

    pub fn persona_len(&self) -> usize {
        self.segments.iter().skip(1).take_while(|s| **s == SegmentId::Persona).count()
    }
}

/// Builds the model input for persona candidate `persona`, `history` and an
/// optional target spoken by `speaker`. Oldest history turns are dropped
/// until the sequence fits in `max_len`; persona and target are never cut.
pub fn assemble(
    persona: &Expansion,
    history: &DialogHistory,
    target: Option<&str>,
    speaker: Speaker,
    tok: &Tokenizer,
    max_len: usize,
) -> Result<AssembledInput> {
    let persona_ids = if persona.kind == ExpansionType::Null {
        Vec::new()
    } else {
        tok.encode(&persona.text)
    };
    let turns: Vec<(SegmentId, Vec<u32>)> = history
        .turns
        .iter()
        .map(|t| (SegmentId::of(t.speaker), tok.encode(&t.text)))
        .collect();
    let target_ids = target.map(|t| tok.encode(t));
    let tail = 1 + target_ids.as_ref().map_or(0, |t| t.len() + 1);
    let fixed = 1 + persona_ids.len() + tail;
    let mut total = fixed + turns.iter().map(|(_, t)| t.len() + 1).sum::<usize>();
    let mut start = 0;
    while total > max_len && start < turns.len() {
        total -= turns[start].1.len() + 1;
        start += 1;
    }
    if total > max_len {
        return Err(Error::Length {
            needed: total,
            limit: max_len,
        });
    }

    let target_seg = SegmentId::of(speaker);
    let mut tokens = Vec::with_capacity(total);
    let mut segments = Vec::with_capacity(total);
    let mut mask = Vec::with_capacity(total);
    let mut push = |t: u32, s: SegmentId, m: bool| {
        tokens.push(t);
        segments.push(s);
        mask.push(m);
    };
    let first_seg = if !persona_ids.is_empty() {
        SegmentId::Persona
    } else {
        turns.get(start).map_or(target_seg, |(s, _)| *s)
    };
    push(tok.bos_id(), first_seg, false);
    for &t in &persona_ids {
        push(t, SegmentId::Persona, false);
    }
    for (seg, ids) in &turns[start..] {
        push(tok.sep_id(), *seg, false);
        for &t in ids {
            push(t, *seg, false);
        }
    }
    push(tok.sep_id(), target_seg, false);
    if let Some(ids) = &target_ids {
        for &t in ids {
            push(t, target_seg, true);
        }
        push(tok.eos_id(), target_seg, true);
    }
    Ok(AssembledInput {
        tokens,
        segments,
        target_mask: mask,
        dropped_turns: start,
    })
}

/// A next-token model over assembled sequences.
pub trait ConditionalLm {
    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;

    /// For each `end` in `ends` (1 <= end <= len), the log-distribution of the
    /// token following `tokens[..end]`.
    fn next_log_probs(&self, tokens: &[u32], segments: &[SegmentId], ends: &[usize]) -> Vec<Vec<f64>>;
}

/// `(Σ −ln p(token | prefix), count)` over the masked positions.
pub fn target_nll(input: &AssembledInput, lm: &dyn ConditionalLm) -> Result<(f64, usize)> {
    let positions = input.target_positions();
    if positions.is_empty() {
        return Err(Error::Contract("target_nll needs at least one target token".into()));
    }
    if positions[0] == 0 {
        return Err(Error::Contract("the first position has no prefix".into()));
    }
    let dists = lm.next_log_probs(&input.tokens, &input.segments, &positions);
    let total = positions
        .iter()
        .zip(&dists)
        .map(|(&i, d)| -d[input.tokens[i] as usize])
        .sum();
    Ok((total, positions.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub nucleus_p: f64,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Stopped by a length limit rather than the end token.
    pub truncated: bool,
}

/// Samples a continuation of `input` (assembled without a target) until the
/// end token, `max_new_tokens`, or the model's length limit.
pub fn generate<R: Rng + ?Sized>(
    input: &AssembledInput,
    lm: &dyn ConditionalLm,
    end_token: u32,
    cfg: &GenerateConfig,
    rng: &mut R,
) -> Result<Generation> {
    let mut tokens = input.tokens.clone();
    let mut segments = input.segments.clone();
    let seg = *segments.last().ok_or_else(|| Error::Contract("empty input".into()))?;
    let mut out = Vec::new();
    loop {
        if out.len() >= cfg.max_new_tokens || tokens.len() >= lm.max_len() {
            return Ok(Generation {
                tokens: out,
                truncated: true,
            });
        }
        let logp = lm.next_log_probs(&tokens, &segments, &[tokens.len()]).remove(0);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let sum: f64 = probs.iter().sum();
        let dist = Categorical::new(probs.iter().map(|p| p / sum).collect())?;
        let next = sample(&nucleus_filter(&dist, cfg.nucleus_p), rng) as u32;
        if next == end_token {
            return Ok(Generation {
                tokens: out,
                truncated: false,
            });
        }
        out.push(next);
        tokens.push(next);
        segments.push(seg);
    }
}
