#![allow(dead_code)]

use std::sync::Arc;

use groundchat::session::Engine;
use groundchat_core::config::ExpansionConfig;
use groundchat_core::corpus::PersonaSet;
use groundchat_core::decoding::DecodeConfig;
use groundchat_core::expansion::{expand_persona_set, ExpanderBackend, MockBackend, PrefixTable};
use groundchat_core::generator::{GeneratorConfig, Tokenizer};
use groundchat_core::model::{GroundingModel, LatentConfig, ModelConfig};

pub const PERSONA: [&str; 3] = ["my favorite color is red", "i have a dog named rex", "i like to swim"];
pub const EXTRA: [&str; 3] = ["i work at a bakery", "my favorite color is green", "i play the piano"];

pub fn tokenizer() -> Tokenizer {
    let mut texts: Vec<String> = PERSONA.iter().chain(EXTRA.iter()).map(|s| s.to_string()).collect();
    let p = PersonaSet::from_texts("t", &texts.clone()).unwrap();
    let cfg = ExpansionConfig::default();
    let e = expand_persona_set(&p, &cfg.kinds(), cfg.beams, &MockBackend::new(), 0, &PrefixTable::default()).unwrap();
    texts.extend(e.into_iter().map(|e| e.text));
    texts.push("hi ! what do you like ? do you have pets ? i like dogs too".into());
    Tokenizer::fit(&texts, 1, usize::MAX)
}

pub fn model() -> GroundingModel {
    let cfg = ModelConfig {
        latent: LatentConfig {
            init_scale: 0.05,
            seed: 3,
            ..LatentConfig::default()
        },
        generator: GeneratorConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            max_len: 64,
            copy_head: true,
            seed: 3,
            ..GeneratorConfig::default()
        },
        ..ModelConfig::default()
    };
    GroundingModel::new(cfg, tokenizer()).unwrap()
}

pub fn engine_with(backend: Arc<dyn ExpanderBackend>) -> Engine {
    let decode = DecodeConfig {
        max_new_tokens: 8,
        ..DecodeConfig::default()
    };
    Engine::new(Arc::new(model()), backend, ExpansionConfig::default(), decode, 2, 10)
}

pub fn engine() -> Engine {
    engine_with(Arc::new(MockBackend::new()))
}

pub fn persona() -> Vec<String> {
    PERSONA.iter().map(|s| s.to_string()).collect()
}
