#![allow(dead_code)]

use std::sync::Arc;

use groundchat_core::corpus::{DialogHistory, DialogTurn, PersonaSet, Speaker, TrainingExample};
use groundchat_core::embedder::EncoderConfig;
use groundchat_core::expansion::{build_candidate_set, expand_persona_set, CandidateSet, ExpansionType, MockBackend, PrefixTable};
use groundchat_core::generator::{GeneratorConfig, Tokenizer};
use groundchat_core::latent::{entropy, kl_categorical, softmax, Categorical};
use groundchat_core::model::{GroundingModel, LatentConfig, ModelConfig};
use groundchat_core::training::{LossWeights, PreparedExample};
use rand::seq::SliceRandom;
use rand::Rng;

pub const SENTENCES: [&str; 8] = [
    "i like green tea",
    "my dog is called rex",
    "i live near the sea",
    "i play the piano",
    "my favorite color is red",
    "i work at a bakery",
    "i have two sisters",
    "i run every morning",
];

pub const WORDS: [&str; 20] = [
    "i", "like", "tea", "dog", "sea", "piano", "red", "bakery", "run", "yes", "no", "you", "do", "what", "is",
    "my", "green", "rex", "morning", "sisters",
];

pub fn toy_tokenizer() -> Tokenizer {
    let mut texts: Vec<String> = SENTENCES.iter().map(|s| s.to_string()).collect();
    texts.extend(WORDS.iter().map(|w| w.to_string()));
    texts.push("do you like tea ? yes i like green tea".into());
    for kind in ExpansionType::RELATIONS {
        for s in SENTENCES {
            let p = PersonaSet::from_texts("v", &[s]).unwrap();
            let e = expand_persona_set(&p, &[kind], 5, &MockBackend::new(), 0, &PrefixTable::default()).unwrap();
            texts.extend(e.into_iter().map(|e| e.text));
        }
    }
    Tokenizer::fit(&texts, 1, usize::MAX)
}

pub fn toy_config(seed: u64, latent_scale: f64, gen_scale: f64) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig::default(),
        latent: LatentConfig {
            bilinear: false,
            init_scale: latent_scale,
            seed,
        },
        generator: GeneratorConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 96,
            copy_head: true,
            init_scale: gen_scale,
            seed,
            ..GeneratorConfig::default()
        },
    }
}

pub fn toy_model(seed: u64, latent_scale: f64, gen_scale: f64) -> GroundingModel {
    GroundingModel::new(toy_config(seed, latent_scale, gen_scale), toy_tokenizer()).unwrap()
}

/// A random persona with mock expansions such that `|C| ≤ max_c`, a short
/// history and a target of at most eight vocabulary words.
pub fn toy_example<R: Rng>(rng: &mut R, max_c: usize) -> (DialogHistory, CandidateSet, String) {
    let s = rng.random_range(1..=3usize);
    let mut pool = SENTENCES.to_vec();
    pool.shuffle(rng);
    let persona = PersonaSet::from_texts("toy", &pool[..s]).unwrap();
    let r_max = ((max_c - 1) / s).saturating_sub(1);
    let r = rng.random_range(0..=r_max);
    let mut rels = ExpansionType::RELATIONS.to_vec();
    rels.shuffle(rng);
    let exps = expand_persona_set(&persona, &rels[..r], 1, &MockBackend::new(), 0, &PrefixTable::default()).unwrap();
    let set = build_candidate_set(&persona, &exps).unwrap();
    let mut turns = Vec::new();
    for i in 0..rng.random_range(0..3) {
        let n = rng.random_range(1..5);
        let text: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
        let speaker = if i % 2 == 0 { Speaker::Speaker1 } else { Speaker::Speaker2 };
        turns.push(DialogTurn::new(speaker, text.join(" ")));
    }
    let n = rng.random_range(1..=8);
    let target: Vec<&str> = (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
    (DialogHistory::new(turns), set, target.join(" "))
}

/// Two persona sentences and the null entry.
pub fn prepared_three(model: &GroundingModel) -> PreparedExample {
    let persona = PersonaSet::from_texts("three", &SENTENCES[..2]).unwrap();
    let set = build_candidate_set(&persona, &[]).unwrap();
    assert_eq!(set.len(), 3);
    let ex = TrainingExample {
        id: "toy#1".into(),
        history: DialogHistory::new(vec![DialogTurn::new(Speaker::Speaker1, "do you like tea ?")]),
        target: "yes i like green tea".into(),
        target_speaker: Speaker::Speaker2,
        persona_set_id: "three".into(),
    };
    PreparedExample::new(model, &ex, Arc::new(set)).unwrap()
}

/// `lm·(−E_q[ln p(x|z)]) + β·KL(q‖p) − c_H·H(p)` by enumeration.
pub fn exact_loss(model: &GroundingModel, ex: &PreparedExample, w: &LossWeights) -> f64 {
    let p = Categorical::new(softmax(&model.prior_logits(&ex.feats))).unwrap();
    let q = Categorical::new(softmax(&model.posterior_logits(&ex.feats, &ex.target_emb))).unwrap();
    let recon: f64 = ex
        .set
        .candidates
        .iter()
        .zip(q.probs())
        .map(|(c, qk)| qk * model.log_likelihood(c, &ex.history, &ex.target, ex.speaker).unwrap().0)
        .sum();
    w.lm_coeff * -recon + w.beta * kl_categorical(&q, &p).unwrap() - w.entropy_coeff * entropy(&p)
}

/// Shrinks every λ so neither network starts out near one-hot.
pub fn soften(model: &mut GroundingModel, lambda: f64) {
    for p in [&mut model.prior, &mut model.inference] {
        p.lambda1 = lambda;
        p.lambda2 = lambda;
        p.lambda3 = lambda;
        if p.lambda4 != 0.0 {
            p.lambda4 = lambda;
        }
    }
}
