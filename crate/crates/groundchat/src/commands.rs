//! The subcommands behind the `groundchat` binary.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use groundchat_core::checkpoint::{load_model, BEST, CONFIG, LATEST};
use groundchat_core::config::AppConfig;
use groundchat_core::corpus::{load_dnli_entailment, load_personachat, Corpus, Split};
use groundchat_core::decoding::{respond, DecodeConfig};
use groundchat_core::evaluation::{
    bleu_n, controllability_eval, distinct_n, entailment_accuracy, grounding_cases_from_pairs, load_edited_cases,
    null_rate, perplexity_prepared, semantic_similarity, unigram_overlap, EvalReport, PplMode, Which,
};
use groundchat_core::expansion::{
    build_candidate_set, expand_persona_set, group_by_persona_set, load_expansion_records, to_records,
    write_expansion_records, CandidateSet, ExpanderBackend, ExpansionType, FileBackend, MockBackend,
};
use groundchat_core::generator::Tokenizer;
use groundchat_core::latent::{kl_categorical, softmax, Categorical};
use groundchat_core::model::GroundingModel;
use groundchat_core::oracle::{elbo, enumerate, OracleBudget};
use groundchat_core::synthetic::{desk_model_config, desk_train_config, generate, run_desk_experiment};
use groundchat_core::training::{prepare_examples, train as run_training, CheckpointSink, TrainReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::api::{EditOp, SentenceRef};
use crate::service::{router, AppState};
use crate::session::{Engine, Session};
use crate::store::SessionStore;

/// `mock` or `file:PATH`.
pub fn make_backend(spec: &str) -> Result<Arc<dyn ExpanderBackend>> {
    if spec == "mock" {
        return Ok(Arc::new(MockBackend::new()));
    }
    match spec.strip_prefix("file:") {
        Some(path) => Ok(Arc::new(FileBackend::load(Path::new(path))?)),
        None => bail!("unknown expansion backend {spec:?}; use `mock` or `file:PATH`"),
    }
}

/// Model plus the configuration it was trained with. Prefers the best
/// epoch's weights over the latest.
pub fn load_checkpoint(dir: &Path) -> Result<(GroundingModel, AppConfig)> {
    let text = std::fs::read_to_string(dir.join(CONFIG))
        .with_context(|| format!("reading {}", dir.join(CONFIG).display()))?;
    let trained = AppConfig::from_toml_with_env(&text, Vec::new())?;
    let which = if dir.join(BEST).exists() { BEST } else { LATEST };
    let model = load_model(dir, which, &trained.model)?;
    log::info!("loaded {} from {}: {model:?}", which, dir.display());
    Ok((model, trained))
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| anyhow!("set `{key}` in the config file or GROUNDCHAT_{}", key.to_uppercase().replace('.', "__")))
}

/// Candidate sets for every persona of `corpus`: from `data.expansions`
/// when set, otherwise by running the configured backend.
pub fn candidate_sets(cfg: &AppConfig, corpus: &Corpus) -> Result<BTreeMap<String, Arc<CandidateSet>>> {
    let from_file = match &cfg.data.expansions {
        Some(p) => Some(group_by_persona_set(&load_expansion_records(p)?)),
        None => None,
    };
    let backend = if from_file.is_none() {
        Some(make_backend(&cfg.expansion.backend)?)
    } else {
        None
    };
    let prefixes = cfg.expansion.prefix_table();
    let mut sets = BTreeMap::new();
    for p in &corpus.persona_sets {
        let exps = match (&from_file, &backend) {
            (Some(m), _) => m.get(&p.id).cloned().unwrap_or_default(),
            (None, Some(b)) => expand_persona_set(
                p,
                &cfg.expansion.kinds(),
                cfg.expansion.beams,
                b.as_ref(),
                cfg.expansion.seed,
                &prefixes,
            )?,
            (None, None) => unreachable!(),
        };
        let exps: Vec<_> = exps.into_iter().filter(|e| e.kind != ExpansionType::Original).collect();
        sets.insert(p.id.clone(), Arc::new(build_candidate_set(p, &exps)?));
    }
    Ok(sets)
}

#[derive(Debug, Clone)]
pub struct ExpandArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub backend: String,
    pub relations: Vec<ExpansionType>,
    pub paraphrase: bool,
    pub n: usize,
    pub seed: u64,
}

/// Writes one record per expansion of every persona set in `input`.
pub fn expand(args: &ExpandArgs, cfg: &AppConfig) -> Result<usize> {
    let corpus = load_personachat(&args.input, None)?;
    let backend = make_backend(&args.backend)?;
    let mut kinds = args.relations.clone();
    if args.paraphrase {
        kinds.push(ExpansionType::Paraphrase);
    }
    let prefixes = cfg.expansion.prefix_table();
    let mut records = Vec::new();
    for p in &corpus.persona_sets {
        let exps = expand_persona_set(p, &kinds, args.n, backend.as_ref(), args.seed, &prefixes)?;
        records.extend(to_records(&p.id, &exps));
    }
    write_expansion_records(&args.out, &records)?;
    Ok(records.len())
}

pub fn train(cfg: &AppConfig) -> Result<TrainReport> {
    let path = require(&cfg.data.corpus, "data.corpus")?;
    let corpus = load_personachat(path, None)?;
    let sets = candidate_sets(cfg, &corpus)?;
    let mut texts: Vec<String> = corpus
        .dialogs
        .iter()
        .flat_map(|d| d.turns.iter().map(|t| t.text.clone()))
        .collect();
    texts.extend(sets.values().flat_map(|s| s.candidates.iter().map(|c| c.text.clone())));
    let tokenizer = Tokenizer::fit(&texts, cfg.tokenizer.min_count, cfg.tokenizer.max_words);
    let mut model = GroundingModel::new(cfg.model.clone(), tokenizer)?;
    let (h, side) = (cfg.data.history_size, cfg.data.target_side);
    let tr = prepare_examples(&model, &corpus.examples(Split::Train, h, side), &sets)?;
    let va = prepare_examples(&model, &corpus.examples(Split::Valid, h, side), &sets)?;
    log::info!("{} training and {} validation examples; {model:?}", tr.len(), va.len());
    let sink = CheckpointSink {
        dir: cfg.checkpoint_dir.clone(),
        config_snapshot: cfg.to_toml()?,
    };
    Ok(run_training(&mut model, &tr, &va, &cfg.train, Some(&sink))?)
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub split: Split,
    /// Evaluate at most this many examples.
    pub limit: Option<usize>,
    pub ppl_mode: PplMode,
    pub out: Option<PathBuf>,
    /// Prior temperatures for the diversity sweep; D-1/D-2 per value go
    /// into the report notes.
    pub temperatures: Vec<f64>,
}

pub fn evaluate(cfg: &AppConfig, args: &EvalArgs) -> Result<EvalReport> {
    let (model, _) = load_checkpoint(&cfg.checkpoint_dir)?;
    let corpus = load_personachat(require(&cfg.data.corpus, "data.corpus")?, Some(args.split))?;
    let sets = candidate_sets(cfg, &corpus)?;
    let mut examples = corpus.examples(args.split, cfg.data.history_size, cfg.data.target_side);
    examples.truncate(args.limit.unwrap_or(usize::MAX));
    let prepared = prepare_examples(&model, &examples, &sets)?;
    if prepared.is_empty() {
        bail!("no {:?} examples to evaluate", args.split);
    }
    let mut report = EvalReport::default();
    let ppl = perplexity_prepared(&model, &prepared, args.ppl_mode, None)?;
    report.ppl = ppl.ppl;
    report.ppl_mode = Some(ppl.mode);

    let seed = cfg.decode.seed.unwrap_or(0);
    let mut hyps = Vec::with_capacity(prepared.len());
    let mut refs = Vec::with_capacity(prepared.len());
    let (mut r, mut p, mut f, mut grounded, mut sim) = (0.0, 0.0, 0.0, 0usize, 0.0);
    for (i, ex) in prepared.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let out = respond(&model, &ex.history, &ex.set, ex.speaker, &cfg.decode, &mut rng)?;
        let ov = unigram_overlap(&out.text, &ex.set.candidates[out.chosen_index].text);
        if !ov.empty {
            (r, p, f, grounded) = (r + ov.recall, p + ov.precision, f + ov.f1, grounded + 1);
        }
        sim += semantic_similarity(&out.text, &ex.target, model.encoder.as_ref())?;
        hyps.push(out.text);
        refs.push(ex.target.clone());
    }
    let n = prepared.len() as f64;
    let g = grounded.max(1) as f64;
    report.bleu1 = bleu_n(&hyps, &refs, 1)?;
    report.bleu2 = bleu_n(&hyps, &refs, 2)?;
    report.d1 = distinct_n(&hyps, 1);
    report.d2 = distinct_n(&hyps, 2);
    (report.overlap_recall, report.overlap_precision, report.overlap_f1) = (r / g, p / g, f / g);
    report.sem_sim = sim / n;
    report.null_rate = null_rate(&model, &prepared);
    report.notes.insert("examples".into(), prepared.len().to_string());
    report.notes.insert("overlap_examples".into(), grounded.to_string());

    for &tau in &args.temperatures {
        let decode = DecodeConfig {
            prior_temperature: tau,
            ..cfg.decode
        };
        let mut texts = Vec::with_capacity(prepared.len());
        for (i, ex) in prepared.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            texts.push(respond(&model, &ex.history, &ex.set, ex.speaker, &decode, &mut rng)?.text);
        }
        report.notes.insert(format!("d1@tau={tau}"), format!("{:.4}", distinct_n(&texts, 1)));
        report.notes.insert(format!("d2@tau={tau}"), format!("{:.4}", distinct_n(&texts, 2)));
    }

    if let Some(dnli) = &cfg.data.dnli {
        let pairs = load_dnli_entailment(dnli, &corpus)?;
        let (cases, skipped) = grounding_cases_from_pairs(&pairs, &corpus, &sets, cfg.data.history_size);
        let prior = entailment_accuracy(&model, &cases, Which::Prior)?;
        let inf = entailment_accuracy(&model, &cases, Which::Inference)?;
        report.entail_prior = prior.accuracy;
        report.entail_inf = inf.accuracy;
        report.notes.insert("entail_cases".into(), prior.evaluated.to_string());
        report.notes.insert("entail_skipped".into(), (skipped + prior.skipped).to_string());
        report.notes.insert("entail_chance".into(), format!("{:.4}", prior.chance));
    }
    if let Some(path) = &cfg.data.edited_cases {
        let cases = load_edited_cases(path)?;
        let c = controllability_eval(&model, &cases, &cfg.decode, seed)?;
        report.ctrl_entity_rate = c.entity_rate;
        report.ctrl_sim_edited = c.sim_edited;
        report.ctrl_sim_unedited = c.sim_unedited;
        report.notes.insert("ctrl_cases".into(), cases.len().to_string());
    }
    report.validate()?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.checkpoint_dir.join("eval_report.json"));
    std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
    log::info!("wrote {}", out.display());
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub checked: usize,
    /// Examples whose candidate set exceeds the enumeration budget.
    pub skipped: usize,
    /// Largest `|ln p(x) − ELBO(q) − KL(q ‖ posterior)|`.
    pub max_identity_gap: f64,
    /// Mean `KL(q ‖ posterior)` for the inference network's q.
    pub mean_posterior_kl: f64,
    /// How often q and the exact posterior share their argmax.
    pub argmax_agreement: f64,
    pub mean_log_marginal: f64,
}

/// Exact enumeration over the first `limit` validation examples whose
/// candidate sets fit `budget`.
pub fn diagnose(cfg: &AppConfig, limit: usize, budget: &OracleBudget) -> Result<DiagnoseReport> {
    let (model, _) = load_checkpoint(&cfg.checkpoint_dir)?;
    let corpus = load_personachat(require(&cfg.data.corpus, "data.corpus")?, Some(Split::Valid))?;
    let sets = candidate_sets(cfg, &corpus)?;
    let examples = corpus.examples(Split::Valid, cfg.data.history_size, cfg.data.target_side);
    let mut rep = DiagnoseReport::default();
    let (mut kl_sum, mut agree, mut lm_sum) = (0.0, 0usize, 0.0);
    for ex in prepare_examples(&model, &examples, &sets)? {
        if rep.checked >= limit {
            break;
        }
        if ex.set.len() > budget.max_candidates {
            rep.skipped += 1;
            continue;
        }
        let en = match enumerate(&model, &ex.history, &ex.set, &ex.target, ex.speaker, budget) {
            Ok(en) => en,
            Err(groundchat_core::Error::Budget(_)) => {
                rep.skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let q = Categorical::new(softmax(&model.posterior_logits(&ex.feats, &ex.target_emb)))?;
        let post = en.posterior();
        let lm = en.log_marginal();
        let kl = kl_categorical(&q, &post)?;
        let gap = (lm - elbo(&q, &en.prior(), &en.log_likelihoods)? - kl).abs();
        rep.max_identity_gap = rep.max_identity_gap.max(gap);
        kl_sum += kl;
        lm_sum += lm;
        agree += usize::from(argmax(q.probs()) == argmax(post.probs()));
        rep.checked += 1;
    }
    if rep.checked > 0 {
        let n = rep.checked as f64;
        rep.mean_posterior_kl = kl_sum / n;
        rep.argmax_agreement = agree as f64 / n;
        rep.mean_log_marginal = lm_sum / n;
    }
    Ok(rep)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Writes the synthetic copy corpus (`corpus.jsonl`), its expansions
/// (`expansions.jsonl`) and entity-swap cases (`edited.jsonl`) to `out`.
pub fn synth(cfg: &AppConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let data = generate(&cfg.synthetic)?;
    data.corpus.write_jsonl(&out.join("corpus.jsonl"))?;
    let mut records = Vec::new();
    for (id, set) in &data.sets {
        let exps: Vec<_> = set
            .candidates
            .iter()
            .filter(|c| c.kind.is_relation() || c.kind == ExpansionType::Paraphrase)
            .cloned()
            .collect();
        records.extend(to_records(id, &exps));
    }
    write_expansion_records(&out.join("expansions.jsonl"), &records)?;
    let edited = data.edited_cases(Split::Valid, cfg.synthetic.fresh_sentinels)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(out.join("edited.jsonl"))?);
    for c in &edited {
        serde_json::to_writer(&mut w, c)?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains the desk-scale copy model into `checkpoint_dir` and reports
/// grounding accuracy and controllability.
pub fn synth_run(cfg: &AppConfig, probes: usize) -> Result<serde_json::Value> {
    let seed = cfg.synthetic.seed;
    let (_, report) = run_desk_experiment(
        &cfg.synthetic,
        &desk_model_config(seed),
        &desk_train_config(seed),
        probes,
        Some(&cfg.checkpoint_dir),
    )?;
    let mut v = serde_json::to_value(&report)?;
    if let Some(c) = v.get_mut("control") {
        c.as_object_mut().map(|o| o.remove("responses"));
    }
    Ok(v)
}

pub fn engine_for(cfg: &AppConfig, model: GroundingModel) -> Result<Engine> {
    Ok(Engine::new(
        Arc::new(model),
        make_backend(&cfg.expansion.backend)?,
        cfg.expansion.clone(),
        cfg.decode,
        cfg.data.history_size,
        cfg.service.prior_topk,
    ))
}

const CHAT_HELP: &str = "commands: /regen [index]  /grounding  /persona  /add <sentence>  /remove <id|text>  /quit";

/// Line-oriented chat over `input`. Returns the final session.
pub fn chat<R: BufRead, W: Write>(
    engine: &Engine,
    mut session: Session,
    seed: Option<u64>,
    input: R,
    mut out: W,
) -> Result<Session> {
    writeln!(out, "{CHAT_HELP}")?;
    let mut turn = 0u64;
    let mut next_seed = || {
        turn += 1;
        seed.map(|s| s.wrapping_add(turn))
    };
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (cmd, rest) = line.split_once(' ').unwrap_or((line, ""));
        let rest = rest.trim();
        let result = match cmd {
            "/quit" | "/exit" => break,
            "/help" => {
                writeln!(out, "{CHAT_HELP}")?;
                continue;
            }
            "/persona" => {
                for s in crate::session::sentence_views(&session) {
                    writeln!(out, "  {} ({} expansions): {}", s.id, s.expansions, s.text)?;
                }
                continue;
            }
            "/grounding" => {
                let g = engine.grounding(&session);
                match g.last {
                    Some(last) => {
                        for e in last.prior_topk {
                            let mark = if e.chosen { "*" } else { " " };
                            writeln!(out, " {mark} #{:<4} {:.4} {:<10} {}", e.index, e.prob, e.kind, e.text)?;
                        }
                    }
                    None => writeln!(out, "  no reply yet")?,
                }
                continue;
            }
            "/add" => engine
                .edit(&mut session, &[EditOp::Add { sentence: rest.to_string() }])
                .map(|s| format!("+{} -{} candidates, {} total", s.added, s.removed, s.candidate_count)),
            "/remove" => {
                let target = rest
                    .parse()
                    .map(SentenceRef::Index)
                    .unwrap_or_else(|_| SentenceRef::Text(rest.to_string()));
                engine
                    .edit(&mut session, &[EditOp::Remove { target }])
                    .map(|s| format!("+{} -{} candidates, {} total", s.added, s.removed, s.candidate_count))
            }
            "/regen" => {
                let forced = if rest.is_empty() {
                    None
                } else {
                    Some(rest.parse().map_err(|_| anyhow!("/regen takes a candidate index"))?)
                };
                engine
                    .regenerate(&mut session, forced, next_seed(), true)
                    .map(|r| describe(&r))
            }
            _ => engine.post_message(&mut session, line, next_seed()).map(|r| describe(&r)),
        };
        match result {
            Ok(msg) => writeln!(out, "{msg}")?,
            Err(e) => writeln!(out, "error: {e}")?,
        }
    }
    Ok(session)
}

fn describe(r: &crate::api::Reply) -> String {
    let c = &r.chosen_candidate;
    let grounding = if r.provenance.null {
        "no persona".to_string()
    } else {
        format!("#{} {}: {}", c.index, c.kind, c.text)
    };
    format!("bot: {}\n     [{grounding}]", r.response)
}

pub async fn serve(cfg: &AppConfig) -> Result<()> {
    let (model, _) = load_checkpoint(&cfg.checkpoint_dir)?;
    let state = AppState::new(engine_for(cfg, model)?, SessionStore::open(&cfg.service.store)?);
    let app = router(state, cfg.service.static_dir.clone());
    let listener = tokio::net::TcpListener::bind(&cfg.service.bind)
        .await
        .with_context(|| format!("binding {}", cfg.service.bind))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
