mod common;

use std::sync::Arc;

use groundchat_core::corpus::{DialogHistory, Speaker, Split, TrainingExample};
use groundchat_core::decoding::{respond, DecodeConfig};
use groundchat_core::evaluation::{entailment_accuracy, null_rate, perplexity_prepared, PplMode, Which};
use groundchat_core::expansion::{CandidateSet, ExpansionType};
use groundchat_core::model::GroundingModel;
use groundchat_core::params::Params;
use groundchat_core::synthetic::{desk_model_config, generate, SyntheticConfig};
use groundchat_core::training::{prepare_examples, PreparedExample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn uniform_generator_model() -> GroundingModel {
    let mut cfg = common::toy_config(0, 0.1, 0.1);
    cfg.generator.copy_head = false;
    let mut model = GroundingModel::new(cfg, common::toy_tokenizer()).unwrap();
    model.generator.params.zero();
    model
}

fn null_only_example(model: &GroundingModel, target: &str) -> PreparedExample {
    let ex = TrainingExample {
        id: "u#1".into(),
        history: DialogHistory::default(),
        target: target.into(),
        target_speaker: Speaker::Speaker2,
        persona_set_id: "none".into(),
    };
    PreparedExample::new(model, &ex, Arc::new(CandidateSet::null_only("none"))).unwrap()
}

#[test]
fn uniform_predictor_has_vocabulary_perplexity() {
    let model = uniform_generator_model();
    let v = model.tokenizer.vocab_size() as f64;
    let exs = vec![null_only_example(&model, "i like tea"), null_only_example(&model, "yes")];
    let exact = perplexity_prepared(&model, &exs, PplMode::ExactMarginal, None).unwrap();
    let bound = perplexity_prepared(&model, &exs, PplMode::ElboBound, None).unwrap();
    assert!((exact.ppl - v).abs() / v < 1e-12, "{} vs {v}", exact.ppl);
    assert!((bound.ppl - exact.ppl).abs() < 1e-9);
    assert_eq!(exact.tokens, 4 + 2);
    assert!(bound.upper_bound && !exact.upper_bound);
}

#[test]
fn bound_is_never_below_exact() {
    let mut model = common::toy_model(6, 0.05, 0.4);
    common::soften(&mut model, 0.3);
    let ex = common::prepared_three(&model);
    let exact = perplexity_prepared(&model, std::slice::from_ref(&ex), PplMode::ExactMarginal, None).unwrap();
    let bound = perplexity_prepared(&model, std::slice::from_ref(&ex), PplMode::ElboBound, None).unwrap();
    assert!(bound.ppl >= exact.ppl);
}

#[test]
fn exact_perplexity_has_a_cost_guard() {
    let model = common::toy_model(6, 0.05, 0.4);
    let ex = common::prepared_three(&model);
    let err = perplexity_prepared(&model, &[ex], PplMode::ExactMarginal, Some(2)).unwrap_err();
    assert!(matches!(err, groundchat_core::Error::Budget(_)));
}

#[test]
fn null_rate_extremes() {
    let data = generate(&SyntheticConfig {
        dialogs: 20,
        fresh_sentinels: 0,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut model = GroundingModel::new(desk_model_config(0), data.fit_tokenizer()).unwrap();
    model.prior.zero();
    let exs = prepare_examples(&model, &data.examples(Split::Train), &data.sets).unwrap();
    let n = exs[0].set.len() as f64;
    assert!((null_rate(&model, &exs) - 1.0 / n).abs() < 1e-12);
    model.prior.lambda2 = 1.0;
    model.prior.f2_head[0] = 1.0;
    model.prior.type_emb[[ExpansionType::Null.index(), 0]] = 1e3;
    assert!((null_rate(&model, &exs) - 1.0).abs() < 1e-12);
}

#[test]
fn uniform_prior_grounds_at_chance() {
    let data = generate(&SyntheticConfig {
        dialogs: 2000,
        fresh_sentinels: 0,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut model = GroundingModel::new(desk_model_config(0), data.fit_tokenizer()).unwrap();
    model.prior.zero();
    let cases = data.grounding_cases(Split::Train);
    let r = entailment_accuracy(&model, &cases, Which::Prior).unwrap();
    let p = 1.0 / 3.0;
    let sigma = (p * (1.0 - p) / r.evaluated as f64).sqrt();
    assert!((r.accuracy - p).abs() <= 3.0 * sigma, "{} not within 3σ of 1/3", r.accuracy);
    assert!((r.chance - p).abs() < 1e-12);
    assert_eq!(r.skipped, 0);
}

#[test]
fn null_only_set_responds_deterministically() {
    let model = common::toy_model(1, 0.1, 0.3);
    let set = CandidateSet::null_only("x");
    let cfg = DecodeConfig {
        max_new_tokens: 6,
        ..DecodeConfig::default()
    };
    let a = respond(&model, &DialogHistory::default(), &set, Speaker::Speaker2, &cfg, &mut ChaCha8Rng::seed_from_u64(4))
        .unwrap();
    let b = respond(&model, &DialogHistory::default(), &set, Speaker::Speaker2, &cfg, &mut ChaCha8Rng::seed_from_u64(4))
        .unwrap();
    assert_eq!(a.chosen_index, 0);
    assert_eq!(a.prior_dist, vec![1.0]);
    assert_eq!((a.chosen_index, a.text), (b.chosen_index, b.text));
}
