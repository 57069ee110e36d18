//! Small decoder-only transformer in f64 with hand-written backprop.
//!
//! Pre-norm blocks (LayerNorm, causal multi-head attention, GELU MLP),
//! token + position + segment embeddings, and an untied output projection.
//! With `copy_head` on, the output mixes in a pointer distribution over the
//! tokens already in the sequence:
//!
//! ```text
//! p(w) = (1 - g)·softmax(h W_out + b)_w + g·Σ_{j <= t, tok_j = w} A_tj
//! A_t· = softmax_j((h_t Q)·(h_j K) / sqrt(d)),   g = σ(h_t·w_g + b_g)
//! ```
//!
//! Everything runs single-threaded so results are bit-reproducible.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConditionalLm, SegmentId};
use crate::params::Params;

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Filled from the tokenizer when 0.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub copy_head: bool,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            d_ff: 512,
            max_len: 128,
            copy_head: true,
            init_scale: 0.02,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub w_qkv: Array2<f64>,
    pub b_qkv: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w_1: Array2<f64>,
    pub b_1: Array1<f64>,
    pub w_2: Array2<f64>,
    pub b_2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopyParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_gate: Array1<f64>,
    pub b_gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub seg_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
    pub copy: Option<CopyParams>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Array2<f64> {
    // uniform on ±std·√3 has standard deviation `std`
    let a = std * 3f64.sqrt();
    Array2::from_shape_fn(shape, |_| rng.random_range(-a..=a))
}

impl DecoderParams {
    pub fn init(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let std = cfg.init_scale;
        let resid = std / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
        let tok_emb = uniform(&mut rng, (v, d), std);
        let pos_emb = uniform(&mut rng, (cfg.max_len, d), std);
        let seg_emb = uniform(&mut rng, (SegmentId::COUNT, d), std);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_qkv: uniform(&mut rng, (d, 3 * d), std),
                b_qkv: Array1::zeros(3 * d),
                w_o: uniform(&mut rng, (d, d), resid),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_1: uniform(&mut rng, (d, f), std),
                b_1: Array1::zeros(f),
                w_2: uniform(&mut rng, (f, d), resid),
                b_2: Array1::zeros(d),
            })
            .collect();
        let w_out = uniform(&mut rng, (d, v), std);
        let copy = cfg.copy_head.then(|| CopyParams {
            w_q: uniform(&mut rng, (d, d), std),
            w_k: uniform(&mut rng, (d, d), std),
            w_gate: uniform(&mut rng, (1, d), std).remove_axis(Axis(0)),
            b_gate: 0.0,
        });
        Self {
            tok_emb,
            pos_emb,
            seg_emb,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_out,
            b_out: Array1::zeros(v),
            copy,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        g.zero();
        g
    }
}

impl Params for DecoderParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        let mut t = |name: &str, shape: &[usize], v: &[f64]| f(name, shape, v);
        t("gen.tok_emb", self.tok_emb.shape(), self.tok_emb.as_slice().unwrap());
        t("gen.pos_emb", self.pos_emb.shape(), self.pos_emb.as_slice().unwrap());
        t("gen.seg_emb", self.seg_emb.shape(), self.seg_emb.as_slice().unwrap());
        for (i, l) in self.layers.iter().enumerate() {
            for (name, shape, v) in l.tensors() {
                t(&format!("gen.layers.{i}.{name}"), &shape, v);
            }
        }
        t("gen.lnf.g", self.lnf_g.shape(), self.lnf_g.as_slice().unwrap());
        t("gen.lnf.b", self.lnf_b.shape(), self.lnf_b.as_slice().unwrap());
        t("gen.out.w", self.w_out.shape(), self.w_out.as_slice().unwrap());
        t("gen.out.b", self.b_out.shape(), self.b_out.as_slice().unwrap());
        if let Some(c) = &self.copy {
            t("gen.copy.w_q", c.w_q.shape(), c.w_q.as_slice().unwrap());
            t("gen.copy.w_k", c.w_k.shape(), c.w_k.as_slice().unwrap());
            t("gen.copy.w_gate", c.w_gate.shape(), c.w_gate.as_slice().unwrap());
            t("gen.copy.b_gate", &[], std::slice::from_ref(&c.b_gate));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
        fn t2(f: &mut dyn FnMut(&str, &[usize], &mut [f64]), name: &str, a: &mut Array2<f64>) {
            let shape = a.shape().to_vec();
            f(name, &shape, a.as_slice_mut().unwrap());
        }
        fn t1(f: &mut dyn FnMut(&str, &[usize], &mut [f64]), name: &str, a: &mut Array1<f64>) {
            let shape = a.shape().to_vec();
            f(name, &shape, a.as_slice_mut().unwrap());
        }
        t2(f, "gen.tok_emb", &mut self.tok_emb);
        t2(f, "gen.pos_emb", &mut self.pos_emb);
        t2(f, "gen.seg_emb", &mut self.seg_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("gen.layers.{i}");
            t1(f, &format!("{p}.ln1.g"), &mut l.ln1_g);
            t1(f, &format!("{p}.ln1.b"), &mut l.ln1_b);
            t2(f, &format!("{p}.attn.w_qkv"), &mut l.w_qkv);
            t1(f, &format!("{p}.attn.b_qkv"), &mut l.b_qkv);
            t2(f, &format!("{p}.attn.w_o"), &mut l.w_o);
            t1(f, &format!("{p}.attn.b_o"), &mut l.b_o);
            t1(f, &format!("{p}.ln2.g"), &mut l.ln2_g);
            t1(f, &format!("{p}.ln2.b"), &mut l.ln2_b);
            t2(f, &format!("{p}.mlp.w_1"), &mut l.w_1);
            t1(f, &format!("{p}.mlp.b_1"), &mut l.b_1);
            t2(f, &format!("{p}.mlp.w_2"), &mut l.w_2);
            t1(f, &format!("{p}.mlp.b_2"), &mut l.b_2);
        }
        t1(f, "gen.lnf.g", &mut self.lnf_g);
        t1(f, "gen.lnf.b", &mut self.lnf_b);
        t2(f, "gen.out.w", &mut self.w_out);
        t1(f, "gen.out.b", &mut self.b_out);
        if let Some(c) = &mut self.copy {
            t2(f, "gen.copy.w_q", &mut c.w_q);
            t2(f, "gen.copy.w_k", &mut c.w_k);
            t1(f, "gen.copy.w_gate", &mut c.w_gate);
            f("gen.copy.b_gate", &[], std::slice::from_mut(&mut c.b_gate));
        }
    }
}

impl LayerParams {
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        fn e<'a, D: ndarray::Dimension>(n: &'static str, a: &'a ndarray::Array<f64, D>) -> (&'static str, Vec<usize>, &'a [f64]) {
            (n, a.shape().to_vec(), a.as_slice().unwrap())
        }
        vec![
            e("ln1.g", &self.ln1_g),
            e("ln1.b", &self.ln1_b),
            e("attn.w_qkv", &self.w_qkv),
            e("attn.b_qkv", &self.b_qkv),
            e("attn.w_o", &self.w_o),
            e("attn.b_o", &self.b_o),
            e("ln2.g", &self.ln2_g),
            e("ln2.b", &self.ln2_b),
            e("mlp.w_1", &self.w_1),
            e("mlp.b_1", &self.b_1),
            e("mlp.w_2", &self.w_2),
            e("mlp.b_2", &self.b_2),
        ]
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rr = *r;
        row.mapv_inplace(|v| v * rr);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Array2<f64>, c: &LnCache, g: &Array1<f64>, dg: &mut Array1<f64>, db: &mut Array1<f64>) -> Array2<f64> {
    *dg += &(dy * &c.xhat).sum_axis(Axis(0));
    *db += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = c.xhat.row(i);
        let m1 = dh.sum() / d;
        let m2 = dh.dot(&xh) / d;
        let r = c.rstd[i];
        dx.row_mut(i).assign(&((&dh - m1 - &(&xh * m2)) * r));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_K * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * 0.044715 * u * u)
}

fn softmax_row(row: ArrayView1<f64>) -> Array1<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = row.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    m: Array2<f64>,
    u: Array2<f64>,
    n: Array2<f64>,
}

struct CopyCache {
    q: Array2<f64>,
    k: Array2<f64>,
}

struct Trace {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    h: Array2<f64>,
    copy: Option<CopyCache>,
}

/// Output distribution pieces for one predicting row.
struct RowOut {
    pv: Array1<f64>,
    /// pointer weights over positions `0..=row`
    attn: Option<Array1<f64>>,
    gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub cfg: GeneratorConfig,
    pub params: DecoderParams,
}

impl Decoder {
    pub fn new(cfg: GeneratorConfig) -> Self {
        assert!(cfg.vocab_size > 0, "vocab_size must be set");
        assert_eq!(cfg.d_model % cfg.n_heads, 0, "d_model must divide into heads");
        let params = DecoderParams::init(&cfg);
        Self { cfg, params }
    }

    fn forward(&self, tokens: &[u32], segments: &[SegmentId]) -> Trace {
        let p = &self.params;
        let t_len = tokens.len();
        assert!(t_len <= self.cfg.max_len, "sequence of {t_len} exceeds max_len {}", self.cfg.max_len);
        let d = self.cfg.d_model;
        let nh = self.cfg.n_heads;
        let dh = d / nh;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut x = Array2::zeros((t_len, d));
        for i in 0..t_len {
            let mut row = x.row_mut(i);
            row += &p.tok_emb.row(tokens[i] as usize);
            row += &p.pos_emb.row(i);
            row += &p.seg_emb.row(segments[i].index());
        }
        let mut caches = Vec::with_capacity(p.layers.len());
        for l in &p.layers {
            let (a, ln1) = layer_norm(&x, &l.ln1_g, &l.ln1_b);
            let qkv = a.dot(&l.w_qkv) + &l.b_qkv;
            let mut attn = Array2::zeros((t_len, d));
            let mut probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut sc = q.dot(&k.t()) * inv;
                for i in 0..t_len {
                    for j in i + 1..t_len {
                        sc[[i, j]] = f64::NEG_INFINITY;
                    }
                }
                for i in 0..t_len {
                    let r = softmax_row(sc.row(i));
                    sc.row_mut(i).assign(&r);
                }
                attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&sc.dot(&v));
                probs.push(sc);
            }
            x = x + attn.dot(&l.w_o) + &l.b_o;
            let (m, ln2) = layer_norm(&x, &l.ln2_g, &l.ln2_b);
            let u = m.dot(&l.w_1) + &l.b_1;
            let n = u.mapv(gelu);
            x = x + n.dot(&l.w_2) + &l.b_2;
            caches.push(LayerCache {
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                m,
                u,
                n,
            });
        }
        let (h, lnf) = layer_norm(&x, &p.lnf_g, &p.lnf_b);
        let copy = p.copy.as_ref().map(|c| CopyCache {
            q: h.dot(&c.w_q),
            k: h.dot(&c.w_k),
        });
        Trace {
            layers: caches,
            lnf,
            h,
            copy,
        }
    }

    fn row_output(&self, tr: &Trace, row: usize) -> RowOut {
        let p = &self.params;
        let h = tr.h.row(row);
        let logits = h.dot(&p.w_out) + &p.b_out;
        let pv = softmax_row(logits.view());
        match (&p.copy, &tr.copy) {
            (Some(c), Some(cc)) => {
                let inv = 1.0 / (self.cfg.d_model as f64).sqrt();
                let scores = cc.k.slice(s![..=row, ..]).dot(&cc.q.row(row)) * inv;
                let attn = softmax_row(scores.view());
                let gate = 1.0 / (1.0 + (-(h.dot(&c.w_gate) + c.b_gate)).exp());
                RowOut {
                    pv,
                    attn: Some(attn),
                    gate,
                }
            }
            _ => RowOut {
                pv,
                attn: None,
                gate: 0.0,
            },
        }
    }

    fn row_log_probs(&self, out: &RowOut, tokens: &[u32]) -> Vec<f64> {
        match &out.attn {
            None => out.pv.iter().map(|p| p.ln()).collect(),
            Some(a) => {
                let mut mix: Vec<f64> = out.pv.iter().map(|p| (1.0 - out.gate) * p).collect();
                for (j, w) in a.iter().enumerate() {
                    mix[tokens[j] as usize] += out.gate * w;
                }
                mix.into_iter().map(f64::ln).collect()
            }
        }
    }

    /// Total target NLL over `positions` (each >= 1) and its gradient,
    /// scaled by `scale`, added into `grads`.
    pub fn nll_backward(
        &self,
        tokens: &[u32],
        segments: &[SegmentId],
        positions: &[usize],
        scale: f64,
        grads: &mut DecoderParams,
    ) -> f64 {
        let p = &self.params;
        let t_len = *positions.iter().max().expect("at least one position");
        let tokens = &tokens[..t_len + 1];
        let tr = self.forward(&tokens[..t_len], &segments[..t_len]);
        let d = self.cfg.d_model;
        let v = self.cfg.vocab_size;
        let rows: Vec<usize> = positions.iter().map(|&i| i - 1).collect();
        let mut dlogits = Array2::zeros((rows.len(), v));
        let mut dh = Array2::<f64>::zeros((t_len, d));
        let mut dq = Array2::<f64>::zeros((t_len, d));
        let mut dk = Array2::<f64>::zeros((t_len, d));
        let mut total = 0.0;
        let inv = 1.0 / (d as f64).sqrt();
        for (ri, (&row, &pos)) in rows.iter().zip(positions).enumerate() {
            let out = self.row_output(&tr, row);
            let y = tokens[pos] as usize;
            let mut dl = dlogits.row_mut(ri);
            match (&out.attn, &p.copy, &mut grads.copy, &tr.copy) {
                (Some(a), Some(c), Some(gc), Some(cc)) => {
                    let g = out.gate;
                    let cy: f64 = a.iter().enumerate().filter(|(j, _)| tokens[*j] as usize == y).map(|(_, w)| w).sum();
                    let pvy = out.pv[y];
                    let prob = (1.0 - g) * pvy + g * cy;
                    total -= prob.ln();
                    // d(-ln P) through the vocabulary softmax
                    let coef = -scale * (1.0 - g) * pvy / prob;
                    dl.assign(&(&out.pv * -coef));
                    dl[y] += coef;
                    // through the gate
                    let da = -scale * (cy - pvy) * g * (1.0 - g) / prob;
                    dh.row_mut(row).scaled_add(da, &c.w_gate);
                    gc.w_gate.scaled_add(da, &tr.h.row(row));
                    gc.b_gate += da;
                    // through the pointer scores
                    let mut ds = Array1::zeros(row + 1);
                    for j in 0..=row {
                        let hit = if tokens[j] as usize == y { 1.0 } else { 0.0 };
                        ds[j] = -scale * (g / prob) * a[j] * (hit - cy) * inv;
                    }
                    dq.row_mut(row).scaled_add(1.0, &ds.dot(&cc.k.slice(s![..=row, ..])));
                    for j in 0..=row {
                        if ds[j] != 0.0 {
                            dk.row_mut(j).scaled_add(ds[j], &cc.q.row(row));
                        }
                    }
                }
                _ => {
                    total -= out.pv[y].ln();
                    dl.assign(&(&out.pv * scale));
                    dl[y] -= scale;
                }
            }
        }
        let hr = tr.h.select(Axis(0), &rows);
        grads.w_out += &hr.t().dot(&dlogits);
        grads.b_out += &dlogits.sum_axis(Axis(0));
        let dhr = dlogits.dot(&p.w_out.t());
        for (ri, &row) in rows.iter().enumerate() {
            dh.row_mut(row).scaled_add(1.0, &dhr.row(ri));
        }
        if let (Some(c), Some(gc)) = (&p.copy, &mut grads.copy) {
            gc.w_q += &tr.h.t().dot(&dq);
            gc.w_k += &tr.h.t().dot(&dk);
            dh += &dq.dot(&c.w_q.t());
            dh += &dk.dot(&c.w_k.t());
        }
        let mut dx = layer_norm_backward(&dh, &tr.lnf, &p.lnf_g, &mut grads.lnf_g, &mut grads.lnf_b);

        let nh = self.cfg.n_heads;
        let dhd = d / nh;
        let ainv = 1.0 / (dhd as f64).sqrt();
        for (li, (l, c)) in p.layers.iter().zip(&tr.layers).enumerate().rev() {
            let gl = &mut grads.layers[li];
            // MLP
            gl.w_2 += &c.n.t().dot(&dx);
            gl.b_2 += &dx.sum_axis(Axis(0));
            let dn = dx.dot(&l.w_2.t());
            let du = &dn * &c.u.mapv(gelu_grad);
            gl.w_1 += &c.m.t().dot(&du);
            gl.b_1 += &du.sum_axis(Axis(0));
            let dm = du.dot(&l.w_1.t());
            dx += &layer_norm_backward(&dm, &c.ln2, &l.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
            // attention
            gl.w_o += &c.attn.t().dot(&dx);
            gl.b_o += &dx.sum_axis(Axis(0));
            let dattn = dx.dot(&l.w_o.t());
            let mut dqkv = Array2::zeros((t_len, 3 * d));
            for h in 0..nh {
                let q = c.qkv.slice(s![.., h * dhd..(h + 1) * dhd]);
                let k = c.qkv.slice(s![.., d + h * dhd..d + (h + 1) * dhd]);
                let vv = c.qkv.slice(s![.., 2 * d + h * dhd..2 * d + (h + 1) * dhd]);
                let pr = &c.probs[h];
                let dout = dattn.slice(s![.., h * dhd..(h + 1) * dhd]);
                let dp = dout.dot(&vv.t());
                let dv = pr.t().dot(&dout);
                let mut dsc = pr * &dp;
                for i in 0..t_len {
                    let rs = dsc.row(i).sum();
                    let pri = pr.row(i);
                    dsc.row_mut(i).scaled_add(-rs, &pri);
                }
                dsc *= ainv;
                dqkv.slice_mut(s![.., h * dhd..(h + 1) * dhd]).assign(&dsc.dot(&k));
                dqkv.slice_mut(s![.., d + h * dhd..d + (h + 1) * dhd]).assign(&dsc.t().dot(&q));
                dqkv.slice_mut(s![.., 2 * d + h * dhd..2 * d + (h + 1) * dhd]).assign(&dv);
            }
            gl.w_qkv += &c.a.t().dot(&dqkv);
            gl.b_qkv += &dqkv.sum_axis(Axis(0));
            let da = dqkv.dot(&l.w_qkv.t());
            dx += &layer_norm_backward(&da, &c.ln1, &l.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        }
        for i in 0..t_len {
            let r = dx.row(i);
            grads.tok_emb.row_mut(tokens[i] as usize).scaled_add(1.0, &r);
            grads.pos_emb.row_mut(i).scaled_add(1.0, &r);
            grads.seg_emb.row_mut(segments[i].index()).scaled_add(1.0, &r);
        }
        total
    }
}

impl ConditionalLm for Decoder {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    fn next_log_probs(&self, tokens: &[u32], segments: &[SegmentId], ends: &[usize]) -> Vec<Vec<f64>> {
        let Some(&t_len) = ends.iter().max() else {
            return Vec::new();
        };
        let tr = self.forward(&tokens[..t_len], &segments[..t_len]);
        ends.iter()
            .map(|&e| {
                let out = self.row_output(&tr, e - 1);
                self.row_log_probs(&out, &tokens[..e])
            })
            .collect()
    }
}
