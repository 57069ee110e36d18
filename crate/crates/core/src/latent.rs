//! The latent persona choice: categorical utilities and the two log-linear
//! networks over candidates.
//!
//! Both networks score candidate `k` as
//!
//! ```text
//! s_k = λ1·f1(H, C_k) + λ2·f2(t_k) + λ3·f3(t_k, H)          (prior)
//!     + λ4·<e(x), e(C_k)>                                  (inference only)
//! f1 = <e(H), e(C_k)>            (or e(H)ᵀ W e(C_k) with a learned W)
//! f2 = head2 · E[t_k]
//! f3 = head3 · [E[t_k]; e(H)] + b3
//! ```
//!
//! where `E` is a 12 x 5 type-embedding table. The null candidate has
//! `e(∅) = 0` and its own type row.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DialogHistory;
use crate::embedder::{encode_history, Embedding, Encoder, HistoryScope};
use crate::error::{Error, Result};
use crate::expansion::{CandidateSet, ExpansionType};
use crate::params::Params;

pub const TYPE_DIM: usize = 5;

// ---------------------------------------------------------------------------
// Categorical utilities
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates non-negativity and unit mass (within 1e-6).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Domain("empty categorical".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain(format!("invalid probabilities {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[k] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `probs ∝ exp(logit / temperature)`.
pub fn softmax_temp(logits: &[f64], temperature: f64) -> Result<Categorical> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(Error::Domain("empty logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    Ok(Categorical {
        probs: softmax(&scaled),
    })
}

/// `Σ q_k ln(q_k / p_k)` with `0 ln 0 = 0`. Fails when `q` puts mass where
/// `p` has none.
pub fn kl_categorical(q: &Categorical, p: &Categorical) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::Contract(format!("KL over {} vs {} outcomes", q.len(), p.len())));
    }
    let mut kl = 0.0;
    for (k, (&qk, &pk)) in q.probs.iter().zip(&p.probs).enumerate() {
        if qk == 0.0 {
            continue;
        }
        if pk == 0.0 {
            return Err(Error::Domain(format!("KL is infinite: q[{k}] = {qk} where p[{k}] = 0")));
        }
        kl += qk * (qk / pk).ln();
    }
    Ok(kl.max(0.0))
}

/// As [`kl_categorical`] but maps an infinite divergence to `overflow`.
pub fn kl_categorical_or(q: &Categorical, p: &Categorical, overflow: f64) -> f64 {
    kl_categorical(q, p).unwrap_or(overflow)
}

pub fn entropy(dist: &Categorical) -> f64 {
    -dist
        .probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// Inverse-CDF draw.
pub fn sample<R: Rng + ?Sized>(dist: &Categorical, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    last_positive
}

/// Index of the largest probability; the lowest index wins exact ties.
pub fn argmax_z(dist: &Categorical) -> usize {
    argmax(&dist.probs)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Log-linear networks
// ---------------------------------------------------------------------------

/// Which network a parameter block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prior,
    Inference,
}

impl Role {
    fn prefix(self) -> &'static str {
        match self {
            Role::Prior => "prior",
            Role::Inference => "inf",
        }
    }
}

/// Parameters of one log-linear network. The prior leaves `lambda4` unused.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLinearParams {
    pub role: Role,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    /// `ExpansionType::COUNT x TYPE_DIM`
    pub type_emb: Array2<f64>,
    pub f2_head: Array1<f64>,
    /// `TYPE_DIM + d`, type part first
    pub f3_head: Array1<f64>,
    pub f3_bias: f64,
    /// Learned `d x d` alignment for f1; `None` means the plain inner product.
    pub bilinear: Option<Array2<f64>>,
}

pub type PriorParams = LogLinearParams;
pub type InferenceParams = LogLinearParams;

impl LogLinearParams {
    /// λ's at 1, heads and type table uniform in ±`init_scale`, bilinear at
    /// identity when requested.
    pub fn init(role: Role, dim: usize, bilinear: bool, init_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-init_scale..init_scale)).collect() };
        let type_emb = Array2::from_shape_vec((ExpansionType::COUNT, TYPE_DIM), draw(ExpansionType::COUNT * TYPE_DIM))
            .expect("shape");
        let f2_head = Array1::from(draw(TYPE_DIM));
        let f3_head = Array1::from(draw(TYPE_DIM + dim));
        Self {
            role,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: if role == Role::Inference { 1.0 } else { 0.0 },
            type_emb,
            f2_head,
            f3_head,
            f3_bias: 0.0,
            bilinear: bilinear.then(|| Array2::eye(dim)),
        }
    }

    /// Every parameter zero; scores are then identically zero.
    pub fn zeros(role: Role, dim: usize, bilinear: bool) -> Self {
        let mut p = Self::init(role, dim, bilinear, 1.0, 0);
        p.zero();
        p
    }

    pub fn dim(&self) -> usize {
        self.f3_head.len() - TYPE_DIM
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

impl Params for LogLinearParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let p = self.role.prefix();
        f(&format!("{p}.lambda1"), &[], std::slice::from_ref(&self.lambda1));
        f(&format!("{p}.lambda2"), &[], std::slice::from_ref(&self.lambda2));
        f(&format!("{p}.lambda3"), &[], std::slice::from_ref(&self.lambda3));
        if self.role == Role::Inference {
            f(&format!("{p}.lambda4"), &[], std::slice::from_ref(&self.lambda4));
        }
        f(&format!("{p}.type_emb"), self.type_emb.shape(), self.type_emb.as_slice().unwrap());
        f(&format!("{p}.f2_head"), self.f2_head.shape(), self.f2_head.as_slice().unwrap());
        f(&format!("{p}.f3_head"), self.f3_head.shape(), self.f3_head.as_slice().unwrap());
        f(&format!("{p}.f3_bias"), &[], std::slice::from_ref(&self.f3_bias));
        if let Some(w) = &self.bilinear {
            f(&format!("{p}.bilinear"), w.shape(), w.as_slice().unwrap());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        let p = self.role.prefix();
        f(&format!("{p}.lambda1"), &[], std::slice::from_mut(&mut self.lambda1));
        f(&format!("{p}.lambda2"), &[], std::slice::from_mut(&mut self.lambda2));
        f(&format!("{p}.lambda3"), &[], std::slice::from_mut(&mut self.lambda3));
        if self.role == Role::Inference {
            f(&format!("{p}.lambda4"), &[], std::slice::from_mut(&mut self.lambda4));
        }
        let shape = self.type_emb.shape().to_vec();
        f(&format!("{p}.type_emb"), &shape, self.type_emb.as_slice_mut().unwrap());
        let shape = self.f2_head.shape().to_vec();
        f(&format!("{p}.f2_head"), &shape, self.f2_head.as_slice_mut().unwrap());
        let shape = self.f3_head.shape().to_vec();
        f(&format!("{p}.f3_head"), &shape, self.f3_head.as_slice_mut().unwrap());
        f(&format!("{p}.f3_bias"), &[], std::slice::from_mut(&mut self.f3_bias));
        if let Some(w) = &mut self.bilinear {
            let shape = w.shape().to_vec();
            f(&format!("{p}.bilinear"), &shape, w.as_slice_mut().unwrap());
        }
    }
}

/// Frozen encodings of one candidate set under one history.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFeatures {
    pub history: Embedding,
    pub candidates: Vec<Embedding>,
    pub types: Vec<ExpansionType>,
}

impl CandidateFeatures {
    pub fn encode(
        history: &DialogHistory,
        set: &CandidateSet,
        enc: &dyn Encoder,
        scope: HistoryScope,
    ) -> Result<Self> {
        let candidates = encode_candidates(set, enc)?;
        Ok(Self {
            history: encode_history(history, enc, scope)?,
            candidates,
            types: set.types(),
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// `e(C_k)` for every candidate, with `e(∅) = 0`.
pub fn encode_candidates(set: &CandidateSet, enc: &dyn Encoder) -> Result<Vec<Embedding>> {
    set.candidates
        .iter()
        .map(|c| {
            if c.kind == ExpansionType::Null {
                Ok(Embedding::zeros(enc.dim()))
            } else {
                enc.encode(&c.text)
            }
        })
        .collect()
}

fn type_row(params: &LogLinearParams, t: ExpansionType) -> ndarray::ArrayView1<'_, f64> {
    params.type_emb.row(t.index())
}

pub fn feature_f1(history: &Embedding, candidate: &Embedding, params: &LogLinearParams) -> f64 {
    match &params.bilinear {
        None => history.dot(candidate),
        Some(w) => {
            let h = ndarray::ArrayView1::from(history.as_slice());
            let c = ndarray::ArrayView1::from(candidate.as_slice());
            h.dot(&w.dot(&c))
        }
    }
}

pub fn feature_f2(t: ExpansionType, params: &LogLinearParams) -> f64 {
    params.f2_head.dot(&type_row(params, t))
}

pub fn feature_f3(t: ExpansionType, history: &Embedding, params: &LogLinearParams) -> f64 {
    let head_t = params.f3_head.slice(ndarray::s![..TYPE_DIM]);
    let head_h = params.f3_head.slice(ndarray::s![TYPE_DIM..]);
    head_t.dot(&type_row(params, t)) + head_h.dot(&ndarray::ArrayView1::from(history.as_slice())) + params.f3_bias
}

/// Per-candidate feature values, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrace {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub f3: Vec<f64>,
    pub f4: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Scores every candidate. `target` switches on the λ4 alignment feature and
/// must be given exactly for the inference network.
pub fn score(params: &LogLinearParams, feats: &CandidateFeatures, target: Option<&Embedding>) -> ScoreTrace {
    let n = feats.len();
    let mut tr = ScoreTrace {
        f1: Vec::with_capacity(n),
        f2: Vec::with_capacity(n),
        f3: Vec::with_capacity(n),
        f4: vec![0.0; n],
        logits: Vec::with_capacity(n),
    };
    // f3's history term is shared by every candidate
    for k in 0..n {
        let t = feats.types[k];
        let f1 = feature_f1(&feats.history, &feats.candidates[k], params);
        let f2 = feature_f2(t, params);
        let f3 = feature_f3(t, &feats.history, params);
        let mut s = params.lambda1 * f1 + params.lambda2 * f2 + params.lambda3 * f3;
        if let Some(x) = target {
            tr.f4[k] = x.dot(&feats.candidates[k]);
            s += params.lambda4 * tr.f4[k];
        }
        tr.f1.push(f1);
        tr.f2.push(f2);
        tr.f3.push(f3);
        tr.logits.push(s);
    }
    tr
}

pub fn prior_logits(params: &PriorParams, feats: &CandidateFeatures) -> Vec<f64> {
    score(params, feats, None).logits
}

pub fn posterior_logits(params: &InferenceParams, feats: &CandidateFeatures, target: &Embedding) -> Vec<f64> {
    score(params, feats, Some(target)).logits
}

/// Accumulates `dL/dparams` into `grads` given `dL/dlogits`.
pub fn score_backward(
    params: &LogLinearParams,
    feats: &CandidateFeatures,
    target: Option<&Embedding>,
    trace: &ScoreTrace,
    dlogits: &[f64],
    grads: &mut LogLinearParams,
) {
    let d = params.dim();
    let hist = ndarray::ArrayView1::from(feats.history.as_slice());
    let mut sum_g = 0.0;
    for (k, &g) in dlogits.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        sum_g += g;
        let t = feats.types[k].index();
        grads.lambda1 += g * trace.f1[k];
        grads.lambda2 += g * trace.f2[k];
        grads.lambda3 += g * trace.f3[k];
        if target.is_some() {
            grads.lambda4 += g * trace.f4[k];
        }
        // d s / d E[t] = λ2·head2 + λ3·head3[..5]
        for j in 0..TYPE_DIM {
            grads.type_emb[[t, j]] += g * (params.lambda2 * params.f2_head[j] + params.lambda3 * params.f3_head[j]);
            grads.f2_head[j] += g * params.lambda2 * params.type_emb[[t, j]];
            grads.f3_head[j] += g * params.lambda3 * params.type_emb[[t, j]];
        }
        if let (Some(w), Some(gw)) = (&params.bilinear, &mut grads.bilinear) {
            let c = ndarray::ArrayView1::from(feats.candidates[k].as_slice());
            let _ = w;
            for a in 0..d {
                let ha = g * params.lambda1 * hist[a];
                if ha == 0.0 {
                    continue;
                }
                for b in 0..d {
                    gw[[a, b]] += ha * c[b];
                }
            }
        }
    }
    for j in 0..d {
        grads.f3_head[TYPE_DIM + j] += sum_g * params.lambda3 * hist[j];
    }
    grads.f3_bias += sum_g * params.lambda3;
}
