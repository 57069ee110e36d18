//! Variational training of prior, generator and inference network.
//!
//! Per example, with `q = q(z|x,H)`, `p = p(z|H)` and `β` the KL weight:
//!
//! * prior and generator minimise `lm_coeff·(−ln p(x|z,H)) + β·KL(q‖p) − entropy_coeff·H(p)`
//!   with `z ~ q` (or the exact expectation over `z` in exact mode);
//! * the inference network follows the score-function estimate
//!   `−reinforce_coeff·(r − b)·∇ln q(z) + β·∇KL(q‖p)` with reward
//!   `r = ln p(x|z,H)` and a moving-average baseline `b`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_params, write_model_files, BEST, LATEST, TRAIN_LOG};
use crate::corpus::{DialogHistory, Speaker, TrainingExample};
use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::expansion::CandidateSet;
use crate::latent::{entropy, kl_categorical, sample, score, score_backward, softmax, Categorical, CandidateFeatures};
use crate::model::{GroundingModel, ModelGrads};
use crate::params::{AdamW, AdamWConfig, Params};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    /// `lr · decay^epoch`
    #[default]
    Multiplicative,
    /// Linear from `lr` to 0 over all planned steps.
    LinearToZero,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `samples_per_step` draws from q per example.
    #[default]
    Sampled,
    /// Full enumeration over z; requires `|C| <= exact_max_candidates`.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_per_epoch: f64,
    pub lr_schedule: LrSchedule,
    pub reinforce_coeff: f64,
    pub lm_coeff: f64,
    pub baseline_ratio: f64,
    pub entropy_coeff: f64,
    /// `None` means one epoch's worth of optimizer steps.
    pub kl_anneal_steps: Option<i64>,
    pub samples_per_step: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub estimator: Estimator,
    pub exact_max_candidates: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 6.25e-5,
            lr_decay_per_epoch: 0.1,
            lr_schedule: LrSchedule::Multiplicative,
            reinforce_coeff: 0.8,
            lm_coeff: 1.0,
            baseline_ratio: 0.99,
            entropy_coeff: 0.01,
            kl_anneal_steps: None,
            samples_per_step: 1,
            batch_size: 4,
            max_epochs: 3,
            patience: 1,
            estimator: Estimator::Sampled,
            exact_max_candidates: 10,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lr", self.lr),
            ("lr_decay_per_epoch", self.lr_decay_per_epoch),
            ("reinforce_coeff", self.reinforce_coeff),
            ("lm_coeff", self.lm_coeff),
            ("entropy_coeff", self.entropy_coeff),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.baseline_ratio) {
            return Err(Error::Config(format!("baseline_ratio must be in [0, 1), got {}", self.baseline_ratio)));
        }
        if self.samples_per_step == 0 || self.batch_size == 0 {
            return Err(Error::Config("samples_per_step and batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate at `epoch` (0-based) and global `step` out of `total`.
    pub fn lr_at(&self, epoch: usize, step: usize, total: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Multiplicative => self.lr * self.lr_decay_per_epoch.powi(epoch as i32),
            LrSchedule::LinearToZero => self.lr * (1.0 - step as f64 / total.max(1) as f64).max(0.0),
        }
    }
}

/// KL weight after `t` optimizer steps: `min(1, t / steps)`, or 1 when
/// `steps <= 0`.
pub fn kl_anneal(t: u64, steps: i64) -> f64 {
    if steps <= 0 {
        1.0
    } else {
        (t as f64 / steps as f64).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BaselineState {
    pub b: f64,
}

impl BaselineState {
    pub fn update(&mut self, reward: f64, ratio: f64) {
        self.b = ratio * self.b + (1.0 - ratio) * reward;
    }
}

/// A training example with its candidate set and frozen encodings.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: String,
    pub history: DialogHistory,
    pub target: String,
    pub speaker: Speaker,
    pub set: Arc<CandidateSet>,
    pub feats: CandidateFeatures,
    pub target_emb: Embedding,
}

impl PreparedExample {
    pub fn new(model: &GroundingModel, ex: &TrainingExample, set: Arc<CandidateSet>) -> Result<Self> {
        Ok(Self {
            id: ex.id.clone(),
            history: ex.history.clone(),
            target: ex.target.clone(),
            speaker: ex.target_speaker,
            feats: model.features(&ex.history, &set)?,
            target_emb: model.embed(&ex.target)?,
            set,
        })
    }
}

/// Pairs every example with its persona set's candidates.
pub fn prepare_examples(
    model: &GroundingModel,
    examples: &[TrainingExample],
    sets: &BTreeMap<String, Arc<CandidateSet>>,
) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .map(|ex| {
            let set = sets.get(&ex.persona_set_id).cloned().ok_or_else(|| {
                Error::Integrity(format!("example {} uses unknown persona set {}", ex.id, ex.persona_set_id))
            })?;
            PreparedExample::new(model, ex, set)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub prior_entropy: f64,
    pub reward: f64,
    pub null_chosen: f64,
    pub tokens: usize,
}

/// Static weights for one gradient evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lm_coeff: f64,
    pub reinforce_coeff: f64,
    pub entropy_coeff: f64,
    pub beta: f64,
    pub baseline_ratio: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &TrainConfig, beta: f64) -> Self {
        Self {
            lm_coeff: cfg.lm_coeff,
            reinforce_coeff: cfg.reinforce_coeff,
            entropy_coeff: cfg.entropy_coeff,
            beta,
            baseline_ratio: cfg.baseline_ratio,
        }
    }
}

/// Gradient of the prior terms `β·KL(q‖p) − c_H·H(p)` with respect to the
/// prior logits, and of `β·KL(q‖p)` with respect to the inference logits.
fn kl_entropy_logit_grads(q: &[f64], p: &[f64], kl: f64, h: f64, w: &LossWeights) -> (Vec<f64>, Vec<f64>) {
    let n = q.len();
    let mut dp = vec![0.0; n];
    let mut dq = vec![0.0; n];
    for k in 0..n {
        dp[k] = w.beta * (p[k] - q[k]);
        if p[k] > 0.0 {
            dp[k] += w.entropy_coeff * p[k] * (p[k].ln() + h);
        }
        if q[k] > 0.0 {
            dq[k] = w.beta * q[k] * (q[k].ln() - p[k].ln() - kl);
        }
    }
    (dp, dq)
}

/// Accumulates `scale ×` the gradient for one example into `grads`.
///
/// In sampled mode, draws `samples` latents from q using `rng` and updates
/// `baseline` after each reward. In exact mode, enumerates every latent.
#[allow(clippy::too_many_arguments)]
pub fn example_gradients<R: Rng + ?Sized>(
    model: &GroundingModel,
    ex: &PreparedExample,
    estimator: Estimator,
    samples: usize,
    w: &LossWeights,
    baseline: &mut BaselineState,
    rng: &mut R,
    scale: f64,
    grads: &mut ModelGrads,
) -> Result<ExampleStats> {
    let non_finite = || Error::NonFinite {
        example_id: ex.id.clone(),
    };
    let ptr = score(&model.prior, &ex.feats, None);
    let qtr = score(&model.inference, &ex.feats, Some(&ex.target_emb));
    let p = softmax(&ptr.logits);
    let q = softmax(&qtr.logits);
    let pc = Categorical::new(p.clone()).map_err(|_| non_finite())?;
    let qc = Categorical::new(q.clone()).map_err(|_| non_finite())?;
    let kl = kl_categorical(&qc, &pc).map_err(|_| non_finite())?;
    let h = entropy(&pc);
    let n = p.len();
    let (mut dp, mut dq) = kl_entropy_logit_grads(&q, &p, kl, h, w);
    let mut stats = ExampleStats {
        kl,
        prior_entropy: h,
        ..Default::default()
    };
    let gen = &model.generator;
    let run = |z: usize, weight: f64, grads: &mut ModelGrads| -> Result<(f64, usize)> {
        let input = model.assemble(&ex.set.candidates[z], &ex.history, Some(&ex.target), ex.speaker)?;
        let pos = input.target_positions();
        let nll = gen.nll_backward(&input.tokens, &input.segments, &pos, weight, &mut grads.generator);
        if !nll.is_finite() {
            return Err(non_finite());
        }
        Ok((-nll, pos.len()))
    };
    match estimator {
        Estimator::Sampled => {
            let s = samples as f64;
            for _ in 0..samples {
                let z = sample(&qc, rng);
                let (r, tokens) = run(z, scale * w.lm_coeff / s, grads)?;
                let adv = r - baseline.b;
                for k in 0..n {
                    let ind = if k == z { 1.0 } else { 0.0 };
                    dq[k] -= w.reinforce_coeff * adv * (ind - q[k]) / s;
                }
                baseline.update(r, w.baseline_ratio);
                stats.recon += r / s;
                stats.reward += r / s;
                stats.tokens = tokens;
                if z == ex.set.null_index {
                    stats.null_chosen += 1.0 / s;
                }
            }
        }
        Estimator::Exact => {
            let mut rewards = Vec::with_capacity(n);
            for z in 0..n {
                let (r, tokens) = run(z, scale * w.lm_coeff * q[z], grads)?;
                rewards.push(r);
                stats.tokens = tokens;
            }
            let mean: f64 = q.iter().zip(&rewards).map(|(a, b)| a * b).sum();
            for k in 0..n {
                dq[k] -= w.reinforce_coeff * q[k] * (rewards[k] - mean);
            }
            baseline.update(mean, w.baseline_ratio);
            stats.recon = mean;
            stats.reward = mean;
            stats.null_chosen = q[ex.set.null_index];
        }
    }
    stats.loss = w.lm_coeff * -stats.recon + w.beta * kl - w.entropy_coeff * h;
    if !stats.loss.is_finite() {
        return Err(non_finite());
    }
    for v in dp.iter_mut().chain(dq.iter_mut()) {
        *v *= scale;
    }
    score_backward(&model.prior, &ex.feats, None, &ptr, &dp, &mut grads.prior);
    score_backward(&model.inference, &ex.feats, Some(&ex.target_emb), &qtr, &dq, &mut grads.inference);
    Ok(stats)
}

/// Mutable state carried across steps.
pub struct TrainState {
    pub optimizer: AdamW,
    pub baseline: BaselineState,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            optimizer: AdamW::new(AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..Default::default()
            }),
            baseline: BaselineState::default(),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub prior_entropy: f64,
    pub reward: f64,
    pub baseline: f64,
    pub beta: f64,
    pub null_rate: f64,
}

/// One optimizer update over `batch`. On a non-finite loss nothing is
/// applied and the offending example is reported.
pub fn step(
    model: &mut GroundingModel,
    batch: &[&PreparedExample],
    cfg: &TrainConfig,
    state: &mut TrainState,
    beta: f64,
    lr: f64,
) -> Result<StepStats> {
    if cfg.estimator == Estimator::Exact {
        if let Some(ex) = batch.iter().find(|e| e.set.len() > cfg.exact_max_candidates) {
            return Err(Error::Budget(format!(
                "example {} has {} candidates; exact training allows {}",
                ex.id,
                ex.set.len(),
                cfg.exact_max_candidates
            )));
        }
    }
    let w = LossWeights::from_config(cfg, beta);
    let mut grads = ModelGrads::zeros_for(model);
    let scale = 1.0 / batch.len() as f64;
    let mut baseline = state.baseline;
    let mut out = StepStats {
        beta,
        ..Default::default()
    };
    for ex in batch {
        let s = example_gradients(
            model,
            ex,
            cfg.estimator,
            cfg.samples_per_step,
            &w,
            &mut baseline,
            &mut state.rng,
            scale,
            &mut grads,
        )?;
        out.loss += s.loss * scale;
        out.recon += s.recon * scale;
        out.kl += s.kl * scale;
        out.prior_entropy += s.prior_entropy * scale;
        out.reward += s.reward * scale;
        out.null_rate += s.null_chosen * scale;
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite {
            example_id: batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(","),
        });
    }
    state.optimizer.step(model, &grads, lr);
    state.baseline = baseline;
    state.step += 1;
    out.baseline = baseline.b;
    Ok(out)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta: f64,
    pub train_loss: f64,
    pub mean_reward: f64,
    pub baseline: f64,
    pub mean_kl: f64,
    pub prior_entropy: f64,
    pub null_rate: f64,
    pub valid_ppl: f64,
    pub best: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    pub stopped_early: bool,
}

/// Where `train` writes checkpoints and its log.
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub config_snapshot: String,
}

fn checkpoint_meta(epoch: usize, ppl: f64) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("epoch".to_string(), epoch.to_string()),
        ("valid_ppl".to_string(), format!("{ppl:e}")),
    ])
}

/// Epoch loop with learning-rate decay, KL annealing, validation
/// perplexity (ELBO bound) and early stopping. The model ends holding the
/// parameters of the best epoch.
pub fn train(
    model: &mut GroundingModel,
    train_set: &[PreparedExample],
    valid_set: &[PreparedExample],
    cfg: &TrainConfig,
    sink: Option<&CheckpointSink>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let mut state = TrainState::new(cfg);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let anneal = cfg.kl_anneal_steps.unwrap_or(steps_per_epoch as i64);
    let mut log = match sink {
        Some(s) => {
            write_model_files(&s.dir, model, &s.config_snapshot)?;
            Some(std::fs::File::create(s.dir.join(TRAIN_LOG))?)
        }
        None => None,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_ppl: f64::INFINITY,
        stopped_early: false,
    };
    let mut best_params = model.flat();
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut state.rng);
        let mut sums = StepStats::default();
        let mut lr = cfg.lr;
        let mut beta = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            beta = kl_anneal(state.step, anneal);
            lr = cfg.lr_at(epoch, state.step as usize, total_steps);
            let s = step(model, &batch, cfg, &mut state, beta, lr)?;
            let f = 1.0 / steps_per_epoch as f64;
            sums.loss += s.loss * f;
            sums.reward += s.reward * f;
            sums.kl += s.kl * f;
            sums.prior_entropy += s.prior_entropy * f;
            sums.null_rate += s.null_rate * f;
        }
        let ppl = if valid_set.is_empty() {
            f64::NAN
        } else {
            crate::evaluation::perplexity_prepared(model, valid_set, crate::evaluation::PplMode::ElboBound, None)?.ppl
        };
        if valid_set.len() > 0 && !ppl.is_finite() {
            return Err(Error::Domain(format!(
                "validation perplexity diverged at epoch {epoch} (lr {lr}, baseline {}, mean reward {})",
                state.baseline.b, sums.reward
            )));
        }
        let improved = valid_set.is_empty() || ppl < report.best_valid_ppl;
        if improved {
            report.best_valid_ppl = ppl;
            report.best_epoch = epoch;
            best_params = model.flat();
            since_best = 0;
        } else {
            since_best += 1;
        }
        let rec = EpochRecord {
            epoch,
            steps: state.step,
            lr,
            beta,
            train_loss: sums.loss,
            mean_reward: sums.reward,
            baseline: state.baseline.b,
            mean_kl: sums.kl,
            prior_entropy: sums.prior_entropy,
            null_rate: sums.null_rate,
            valid_ppl: ppl,
            best: improved,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: {}", serde_json::to_string(&rec)?);
        if let (Some(s), Some(f)) = (sink, log.as_mut()) {
            save_params(&s.dir.join(LATEST), model, &checkpoint_meta(epoch, ppl))?;
            if improved {
                save_params(&s.dir.join(BEST), model, &checkpoint_meta(epoch, ppl))?;
            }
            // wall-clock time is left out of the persisted log so reruns match
            let mut persisted = rec.clone();
            persisted.seconds = 0.0;
            writeln!(f, "{}", serde_json::to_string(&persisted)?)?;
        }
        report.epochs.push(rec);
        if since_best >= cfg.patience.max(1) {
            report.stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    model.set_flat(&best_params);
    Ok(report)
}

/// Reads a training log back.
pub fn read_train_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anneal_schedule() {
        assert_eq!(kl_anneal(0, 100), 0.0);
        assert_eq!(kl_anneal(50, 100), 0.5);
        assert_eq!(kl_anneal(25, 100), 0.25);
        assert_eq!(kl_anneal(100, 100), 1.0);
        assert_eq!(kl_anneal(1000, 100), 1.0);
        assert_eq!(kl_anneal(0, 0), 1.0);
        assert_eq!(kl_anneal(3, -5), 1.0);
    }

    #[test]
    fn lr_decay_per_epoch() {
        let cfg = TrainConfig::default();
        for e in 0..4 {
            let want = 6.25e-5 * 0.1f64.powi(e);
            assert!((cfg.lr_at(e as usize, 0, 10) - want).abs() < 1e-20);
        }
        let lin = TrainConfig {
            lr_schedule: LrSchedule::LinearToZero,
            ..Default::default()
        };
        assert_eq!(lin.lr_at(0, 0, 10), 6.25e-5);
        assert!((lin.lr_at(1, 5, 10) - 3.125e-5).abs() < 1e-20);
        assert_eq!(lin.lr_at(2, 10, 10), 0.0);
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.reinforce_coeff, c.lm_coeff, c.baseline_ratio), (0.8, 1.0, 0.99));
        assert_eq!((c.batch_size, c.samples_per_step), (4, 1));
        assert!(c.validate().is_ok());
        assert!(TrainConfig { baseline_ratio: 1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { entropy_coeff: -0.1, ..c.clone() }.validate().is_err());
    }

    #[test]
    fn baseline_moving_average() {
        let mut b = BaselineState::default();
        b.update(-10.0, 0.99);
        assert!((b.b - -0.1).abs() < 1e-15);
        b.update(-10.0, 0.99);
        assert!((b.b - (0.99 * -0.1 + 0.01 * -10.0)).abs() < 1e-15);
    }

    #[test]
    fn kl_and_entropy_logit_gradients() {
        // finite differences on β·KL(q‖p) − c·H(p) over both logit vectors
        let lp = [0.3, -0.2, 1.1];
        let lq = [-0.5, 0.4, 0.0];
        let w = LossWeights {
            lm_coeff: 1.0,
            reinforce_coeff: 0.0,
            entropy_coeff: 0.3,
            beta: 0.7,
            baseline_ratio: 0.9,
        };
        let f = |lp: &[f64], lq: &[f64]| {
            let p = Categorical::new(softmax(lp)).unwrap();
            let q = Categorical::new(softmax(lq)).unwrap();
            w.beta * kl_categorical(&q, &p).unwrap() - w.entropy_coeff * entropy(&p)
        };
        let p = softmax(&lp);
        let q = softmax(&lq);
        let kl = kl_categorical(&Categorical::new(q.clone()).unwrap(), &Categorical::new(p.clone()).unwrap()).unwrap();
        let h = entropy(&Categorical::new(p.clone()).unwrap());
        let (dp, dq) = kl_entropy_logit_grads(&q, &p, kl, h, &w);
        let eps = 1e-6;
        for i in 0..3 {
            let mut a = lp;
            let mut b = lp;
            a[i] += eps;
            b[i] -= eps;
            let num = (f(&a, &lq) - f(&b, &lq)) / (2.0 * eps);
            assert!((num - dp[i]).abs() < 1e-8, "prior {i}: {num} vs {}", dp[i]);
            let mut a = lq;
            let mut b = lq;
            a[i] += eps;
            b[i] -= eps;
            let num = (f(&lp, &a) - f(&lp, &b)) / (2.0 * eps);
            assert!((num - dq[i]).abs() < 1e-8, "inference {i}: {num} vs {}", dq[i]);
        }
    }
}
