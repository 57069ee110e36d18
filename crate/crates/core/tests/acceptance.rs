//! Acceptance suite. Prints one PASS/FAIL line per criterion, then fails if
//! any criterion failed.
//!
//! Run with `cargo test -p groundchat-core --test acceptance -- --nocapture`.
//!
//! The expansion band check needs real precomputed expansions; point
//! `ACCEPTANCE_CORPUS` and `ACCEPTANCE_EXPANSIONS` at a corpus file and an
//! expansion file to enable it.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use groundchat_core::corpus::{PersonaSet, Speaker, Split};
use groundchat_core::decoding::{nucleus_filter, respond, DecodeConfig};
use groundchat_core::evaluation::{bleu_n, distinct_n, unigram_overlap};
use groundchat_core::expansion::{
    build_candidate_set, expand_persona_set, group_by_persona_set, load_expansion_records, ExpansionType, MockBackend,
    PrefixTable,
};
use groundchat_core::latent::{entropy, kl_categorical, softmax_temp, Categorical};
use groundchat_core::model::ModelGrads;
use groundchat_core::oracle::{elbo, enumerate, finite_diff_check, FdOptions, OracleBudget};
use groundchat_core::params::Params;
use groundchat_core::synthetic::{desk_model_config, desk_train_config, run_desk_experiment, SyntheticConfig};
use groundchat_core::training::{example_gradients, kl_anneal, BaselineState, Estimator, LossWeights, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{toy_example, toy_model};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn run(name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let started = Instant::now();
    let (mut pass, mut detail) = f();
    let elapsed = started.elapsed();
    if let Some(limit) = limit {
        if elapsed > limit {
            pass = false;
            detail.push_str(&format!("; over the {}s limit", limit.as_secs()));
        }
    }
    let o = Outcome {
        name,
        pass,
        detail,
        elapsed,
    };
    println!(
        "[{}] {} ({:.1}s): {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.name,
        o.elapsed.as_secs_f64(),
        o.detail
    );
    o
}

fn oracle_identity() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let budget = OracleBudget {
        max_candidates: 8,
        max_target_tokens: 12,
    };
    let mut worst = 0.0f64;
    let mut bound_ok = true;
    let mut cases = 0;
    while cases < 50 {
        let seed: u64 = rng.random();
        let model = toy_model(seed, 0.1, 0.3);
        let (history, set, target) = toy_example(&mut rng, 8);
        let en = match enumerate(&model, &history, &set, &target, Speaker::Speaker2, &budget) {
            Ok(e) => e,
            Err(_) => continue,
        };
        let prior = en.prior();
        let post = en.posterior();
        let log_z = en.log_marginal();
        // inference network q and a random q
        let feats = model.features(&history, &set).unwrap();
        let q_inf = Categorical::new(groundchat_core::latent::softmax(
            &model.posterior_logits(&feats, &model.embed(&target).unwrap()),
        ))
        .unwrap();
        let raw: Vec<f64> = (0..set.len()).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        let q_rand = Categorical::new(raw.iter().map(|v| v / s).collect()).unwrap();
        for q in [&q_inf, &q_rand] {
            let bound = elbo(q, &prior, &en.log_likelihoods).unwrap();
            let gap = log_z - bound;
            let kl = kl_categorical(q, &post).unwrap();
            worst = worst.max((gap - kl).abs());
            bound_ok &= bound <= log_z + 1e-12;
        }
        cases += 1;
    }
    (
        worst < 1e-8 && bound_ok,
        format!("{cases} cases, max |gap − KL(q‖posterior)| = {worst:.2e}, ELBO ≤ log marginal: {bound_ok}"),
    )
}

fn reinforce_correctness() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut model = toy_model(5, 0.02, 0.6);
    common::soften(&mut model, 0.1);
    let ex = common::prepared_three(&model);
    let w = LossWeights {
        lm_coeff: 1.0,
        reinforce_coeff: 1.0,
        entropy_coeff: 0.0,
        beta: 0.0,
        baseline_ratio: 0.99,
    };
    let mut exact = ModelGrads::zeros_for(&model);
    let mut b = BaselineState::default();
    example_gradients(&model, &ex, Estimator::Exact, 1, &w, &mut b, &mut rng, 1.0, &mut exact).unwrap();
    let exact = exact.inference.flat();

    let n = 100_000;
    let mut sum = vec![0.0; exact.len()];
    let mut baseline = BaselineState::default();
    let mut srng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..n {
        let mut g = ModelGrads::zeros_for(&model);
        example_gradients(&model, &ex, Estimator::Sampled, 1, &w, &mut baseline, &mut srng, 1.0, &mut g).unwrap();
        for (s, v) in sum.iter_mut().zip(g.inference.flat()) {
            *s += v;
        }
    }
    let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut zero_ok = true;
    for (s, e) in sum.iter().zip(&exact) {
        let est = s / n as f64;
        if e.abs() <= 1e-12 * scale {
            zero_ok &= est.abs() <= 1e-9 * scale;
        } else {
            checked += 1;
            worst = worst.max((est - e).abs() / e.abs());
        }
    }

    // paired seeds, 10⁴ draws, baseline on vs off
    let trace_var = |use_baseline: bool| {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut base = BaselineState::default();
        let mut m1 = vec![0.0; exact.len()];
        let mut m2 = vec![0.0; exact.len()];
        let draws = 10_000;
        for _ in 0..draws {
            if !use_baseline {
                base = BaselineState::default();
            }
            let mut g = ModelGrads::zeros_for(&model);
            example_gradients(&model, &ex, Estimator::Sampled, 1, &w, &mut base, &mut r, 1.0, &mut g).unwrap();
            for (i, v) in g.inference.flat().into_iter().enumerate() {
                m1[i] += v;
                m2[i] += v * v;
            }
        }
        m1.iter()
            .zip(&m2)
            .map(|(a, b)| b / draws as f64 - (a / draws as f64).powi(2))
            .sum::<f64>()
    };
    let var_on = trace_var(true);
    let var_off = trace_var(false);
    (
        worst < 0.05 && zero_ok && var_on < var_off,
        format!(
            "{checked} nonzero coordinates, max rel err {worst:.4} (tol 0.05), structural zeros held: {zero_ok}; \
             gradient variance with baseline {var_on:.3e} vs without {var_off:.3e}"
        ),
    )
}

fn gradient_checks() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = toy_model(3, 0.1, 0.4);
    let ex = common::prepared_three(&model);
    let w = LossWeights {
        lm_coeff: 1.0,
        reinforce_coeff: 1.0,
        entropy_coeff: 0.05,
        beta: 0.7,
        baseline_ratio: 0.99,
    };
    let mut grads = ModelGrads::zeros_for(&model);
    let mut b = BaselineState::default();
    example_gradients(&model, &ex, Estimator::Exact, 1, &w, &mut b, &mut rng, 1.0, &mut grads).unwrap();
    let analytic = grads.flat();
    let loss = |m: &groundchat_core::model::GroundingModel| common::exact_loss(m, &ex, &w);
    let row = model.tokenizer.id("tea").expect("toy vocabulary has tea") as usize;
    let d = model.generator.cfg.d_model;
    let select = |name: &str, off: usize| {
        let latent = name.ends_with("lambda1")
            || name.ends_with("lambda2")
            || name.ends_with("lambda3")
            || name.ends_with("lambda4")
            || name.ends_with("type_emb")
            || name.ends_with("f3_head")
            || name.ends_with("f3_bias");
        latent || (name == "gen.tok_emb" && off / d == row)
    };
    let report = finite_diff_check(&model, &analytic, loss, select, &FdOptions::default());
    (
        report.passed() && report.max_rel_err < 1e-3,
        format!(
            "{} coordinates at eps {:.0e}, max rel err {:.2e} (tol 1e-3), worst {:?}",
            report.checked,
            FdOptions::default().eps,
            report.max_rel_err,
            report.worst.as_ref().map(|w| (&w.tensor, w.offset))
        ),
    )
}

fn expansion_arithmetic() -> (bool, String) {
    let backend = MockBackend::new();
    let prefixes = PrefixTable::default();
    let pool = [
        "i love surfing",
        "my favorite color is red",
        "i have two dogs",
        "i work as a nurse",
        "i live in a big city",
    ];
    let mut ok = true;
    let mut sizes = Vec::new();
    for s in 3..=5 {
        let persona = PersonaSet::from_texts(&format!("arith{s}"), &pool[..s]).unwrap();
        let exps = expand_persona_set(&persona, &ExpansionType::RELATIONS, 5, &backend, 0, &prefixes).unwrap();
        let per_sentence = exps.len() / s;
        ok &= exps.len() == 45 * s && per_sentence == 45;
        let pre_dedup = s + exps.len() + 1;
        ok &= pre_dedup == s * 46 + 1;
        let set = build_candidate_set(&persona, &exps).unwrap();
        ok &= set.len() <= pre_dedup;
        sizes.push((s, pre_dedup, set.len()));
    }
    let band = match (std::env::var_os("ACCEPTANCE_CORPUS"), std::env::var_os("ACCEPTANCE_EXPANSIONS")) {
        (Some(c), Some(e)) => {
            let corpus = groundchat_core::corpus::load_personachat(Path::new(&c), None).unwrap();
            let by_set = group_by_persona_set(&load_expansion_records(Path::new(&e)).unwrap());
            let mut checked = 0;
            let mut in_band = true;
            for p in corpus.persona_sets.iter().filter(|p| (3..=5).contains(&p.sentences.len())) {
                let Some(exps) = by_set.get(&p.id) else { continue };
                let n = build_candidate_set(p, exps).unwrap().len();
                in_band &= (150..=250).contains(&n) || p.sentences.len() == 3 && n <= 139;
                checked += 1;
                if checked == 10 {
                    break;
                }
            }
            ok &= checked == 10 && in_band;
            format!("band 150–250 on {checked} provided sets: {in_band}")
        }
        _ => "band check skipped: no precomputed expansion files provided".to_string(),
    };
    (
        ok,
        format!("45 expansions per sentence; (|S|, pre-dedup, post-dedup) = {sizes:?}; {band}"),
    )
}

fn metric_suite() -> (bool, String) {
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
    // decoding
    let d = Categorical::new(vec![0.5, 0.3, 0.15, 0.05]).unwrap();
    let f = nucleus_filter(&d, 0.9);
    check(
        "nucleus prefix",
        f.probs().iter().zip([10.0 / 19.0, 6.0 / 19.0, 3.0 / 19.0, 0.0]).all(|(a, b)| close(*a, b)),
    );
    check("nucleus p=1", nucleus_filter(&d, 1.0) == d);
    let one = Categorical::one_hot(3, 1);
    check("nucleus one-hot", nucleus_filter(&one, 0.3) == one);
    // evaluation
    let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    check("distinct a a a a", distinct_n(&v(&["a a a a"]), 1) == 0.25);
    check("distinct unique", distinct_n(&v(&["one two three"]), 1) == 1.0);
    let o = unigram_overlap("cats dogs birds", "dogs birds fish");
    check(
        "overlap 2/3",
        close(o.recall, 2.0 / 3.0) && close(o.precision, 2.0 / 3.0) && close(o.f1, 2.0 / 3.0),
    );
    let o = unigram_overlap("cats dogs", "cats dogs");
    check("overlap identical", (o.recall, o.precision, o.f1) == (1.0, 1.0, 1.0));
    let refs = v(&["the cat sat on the mat", "i like tea"]);
    check("bleu identical", close(bleu_n(&refs, &refs, 2).unwrap(), 1.0));
    check("bleu disjoint", bleu_n(&v(&["dogs bark", "you run"]), &refs, 1).unwrap() == 0.0);
    // latent
    let q = Categorical::new(vec![0.5, 0.5]).unwrap();
    let p = Categorical::new(vec![0.9, 0.1]).unwrap();
    check(
        "kl closed form",
        close(kl_categorical(&q, &p).unwrap(), 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln()),
    );
    check("kl self", kl_categorical(&p, &p).unwrap() == 0.0);
    check("entropy uniform", close(entropy(&Categorical::uniform(7)), 7f64.ln()));
    check("entropy one-hot", entropy(&one) == 0.0);
    let t = softmax_temp(&[0.0, 1.0], 100.0).unwrap();
    check("temperature 100", t.probs().iter().all(|x| (x - 0.5).abs() < 0.01));
    check("temperature 0", softmax_temp(&[0.0, 1.0], 0.0).is_err());
    // training schedules
    check("anneal quarter", kl_anneal(25, 100) == 0.25);
    let cfg = TrainConfig::default();
    check("lr decay", close(cfg.lr_at(2, 0, 1), 6.25e-5 * 0.01));
    (failures.is_empty(), if failures.is_empty() { "all examples hold".into() } else { format!("failed: {failures:?}") })
}

fn reproducibility() -> (bool, String) {
    let synth = SyntheticConfig {
        dialogs: 160,
        fresh_sentinels: 4,
        ..SyntheticConfig::default()
    };
    let model_cfg = desk_model_config(11);
    let train_cfg = TrainConfig {
        max_epochs: 2,
        ..desk_train_config(11)
    };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut models = Vec::new();
    for d in &dirs {
        let (m, _) = run_desk_experiment(&synth, &model_cfg, &train_cfg, 4, Some(d.path())).unwrap();
        models.push(m);
    }
    let files = ["latest.safetensors", "best.safetensors", "tokenizer.json", "config.toml", "train_log.jsonl"];
    let mut same_files = true;
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        same_files &= a == b;
    }
    let loaded = groundchat_core::checkpoint::load_model(dirs[0].path(), "best.safetensors", &model_cfg).unwrap();
    let data = groundchat_core::synthetic::generate(&synth).unwrap();
    let ex = &data.examples(Split::Valid)[0];
    let set = &data.sets[&ex.persona_set_id];
    let cfg = DecodeConfig {
        seed: Some(5),
        ..DecodeConfig::default()
    };
    let outputs: Vec<_> = models
        .iter()
        .chain(std::iter::once(&loaded))
        .map(|m| {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            let resp = respond(m, &ex.history, set, Speaker::Speaker2, &cfg, &mut r).unwrap();
            (resp.chosen_index, resp.text)
        })
        .collect();
    let same_out = outputs.windows(2).all(|w| w[0] == w[1]);
    (
        same_files && same_out,
        format!("checkpoint files identical: {same_files}; respond() identical across runs and reload: {same_out}"),
    )
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    outcomes.push(run("oracle identity", Some(Duration::from_secs(60)), oracle_identity));
    outcomes.push(run("REINFORCE correctness", Some(Duration::from_secs(300)), reinforce_correctness));
    outcomes.push(run("gradient checks", Some(Duration::from_secs(60)), gradient_checks));

    let started = Instant::now();
    let desk = run_desk_experiment(
        &SyntheticConfig::default(),
        &desk_model_config(0),
        &desk_train_config(0),
        100,
        None,
    );
    let desk_elapsed = started.elapsed();
    let (desk_ok, desk_report) = match desk {
        Ok((_, r)) => (true, Some(r)),
        Err(e) => {
            println!("desk experiment failed: {e}");
            (false, None)
        }
    };
    outcomes.push(run("synthetic grounding recovery", None, || {
        let Some(r) = desk_report.as_ref() else {
            return (false, "experiment did not run".into());
        };
        let ppl: Vec<f64> = r.train.epochs.iter().map(|e| e.valid_ppl).collect();
        let decreasing = ppl.windows(2).all(|w| w[1] < w[0]);
        let chance = r.prior.chance;
        let within = desk_elapsed.as_secs_f64() - r.control_seconds < 20.0 * 60.0;
        let ok = desk_ok
            && r.train.epochs.len() <= 3
            && r.inference.accuracy >= 0.90
            && r.prior.accuracy >= chance + 0.15
            && r.inference.accuracy >= r.prior.accuracy
            && within;
        (
            ok,
            format!(
                "inference {:.3} (≥ 0.90), prior {:.3} (≥ {:.3}), {} epochs, valid ppl {:?} strictly decreasing: {decreasing}, \
                 training {:.0}s (< 1200s)",
                r.inference.accuracy,
                r.prior.accuracy,
                chance + 0.15,
                r.train.epochs.len(),
                ppl,
                r.train_seconds
            ),
        )
    }));
    outcomes.push(run("controllability", None, || {
        let Some(r) = desk_report.as_ref() else {
            return (false, "experiment did not run".into());
        };
        let c = &r.control;
        (
            c.responses.len() == 100 && c.entity_rate >= 0.8 && c.sim_edited > c.sim_unedited && r.control_seconds < 300.0,
            format!(
                "fresh entity in {:.2} of {} responses (≥ 0.80); similarity edited {:.3} vs unedited {:.3}; {:.1}s",
                c.entity_rate,
                c.responses.len(),
                c.sim_edited,
                c.sim_unedited,
                r.control_seconds
            ),
        )
    }));
    outcomes.push(run("expansion arithmetic", None, expansion_arithmetic));
    outcomes.push(run("metric unit suite", Some(Duration::from_secs(60)), metric_suite));
    outcomes.push(run("reproducibility", None, reproducibility));

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
