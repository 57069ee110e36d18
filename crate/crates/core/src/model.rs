//! The three networks plus the frozen encoder and tokenizer they share.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogHistory, Speaker};
use crate::embedder::{build_encoder, Embedding, Encoder, EncoderConfig};
use crate::error::Result;
use crate::expansion::{CandidateSet, Expansion};
use crate::generator::{assemble, AssembledInput, Decoder, GeneratorConfig, Tokenizer};
use crate::latent::{posterior_logits, prior_logits, CandidateFeatures, LogLinearParams, Role};
use crate::params::Params;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentConfig {
    /// Learned `d x d` alignment in the history/candidate feature.
    pub bilinear: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for LatentConfig {
    fn default() -> Self {
        Self {
            bilinear: false,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub latent: LatentConfig,
    pub generator: GeneratorConfig,
}

#[derive(Clone)]
pub struct GroundingModel {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub encoder: Arc<dyn Encoder>,
    pub prior: LogLinearParams,
    pub inference: LogLinearParams,
    pub generator: Decoder,
}

impl std::fmt::Debug for GroundingModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroundingModel")
            .field("encoder", &self.encoder.identity())
            .field("vocab", &self.tokenizer.vocab_size())
            .field("params", &self.num_params())
            .finish()
    }
}

impl GroundingModel {
    pub fn new(mut config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        let encoder = build_encoder(&config.encoder)?;
        config.generator.vocab_size = tokenizer.vocab_size();
        let dim = encoder.dim();
        let l = &config.latent;
        let prior = LogLinearParams::init(Role::Prior, dim, l.bilinear, l.init_scale, l.seed);
        let inference = LogLinearParams::init(Role::Inference, dim, l.bilinear, l.init_scale, l.seed ^ 0x9e37_79b9);
        let generator = Decoder::new(config.generator.clone());
        Ok(Self {
            config,
            tokenizer,
            encoder,
            prior,
            inference,
            generator,
        })
    }

    pub fn features(&self, history: &DialogHistory, set: &CandidateSet) -> Result<CandidateFeatures> {
        CandidateFeatures::encode(history, set, self.encoder.as_ref(), self.config.encoder.history_scope)
    }

    pub fn embed(&self, text: &str) -> Result<Embedding> {
        self.encoder.encode(text)
    }

    pub fn prior_logits(&self, feats: &CandidateFeatures) -> Vec<f64> {
        prior_logits(&self.prior, feats)
    }

    pub fn posterior_logits(&self, feats: &CandidateFeatures, target: &Embedding) -> Vec<f64> {
        posterior_logits(&self.inference, feats, target)
    }

    pub fn assemble(
        &self,
        persona: &Expansion,
        history: &DialogHistory,
        target: Option<&str>,
        speaker: Speaker,
    ) -> Result<AssembledInput> {
        self.assemble_with_limit(persona, history, target, speaker, self.generator.cfg.max_len)
    }

    pub fn assemble_with_limit(
        &self,
        persona: &Expansion,
        history: &DialogHistory,
        target: Option<&str>,
        speaker: Speaker,
        limit: usize,
    ) -> Result<AssembledInput> {
        assemble(persona, history, target, speaker, &self.tokenizer, limit.min(self.generator.cfg.max_len))
    }

    /// `ln p(x | persona, H)` and the number of target tokens.
    pub fn log_likelihood(
        &self,
        persona: &Expansion,
        history: &DialogHistory,
        target: &str,
        speaker: Speaker,
    ) -> Result<(f64, usize)> {
        let input = self.assemble(persona, history, Some(target), speaker)?;
        let (nll, n) = crate::generator::target_nll(&input, &self.generator)?;
        Ok((-nll, n))
    }
}

impl Params for GroundingModel {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.prior.visit(f);
        self.inference.visit(f);
        self.generator.params.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.prior.visit_mut(f);
        self.inference.visit_mut(f);
        self.generator.params.visit_mut(f);
    }
}

/// Gradient buffers laid out like a [`GroundingModel`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub prior: LogLinearParams,
    pub inference: LogLinearParams,
    pub generator: crate::generator::DecoderParams,
}

impl ModelGrads {
    pub fn zeros_for(model: &GroundingModel) -> Self {
        Self {
            prior: model.prior.zeros_like(),
            inference: model.inference.zeros_like(),
            generator: model.generator.params.zeros_like(),
        }
    }
}

impl Params for ModelGrads {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.prior.visit(f);
        self.inference.visit(f);
        self.generator.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        self.prior.visit_mut(f);
        self.inference.visit_mut(f);
        self.generator.visit_mut(f);
    }
}
