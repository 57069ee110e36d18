//! Exact enumeration over small candidate sets and finite-difference checks.

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogHistory, Speaker};
use crate::error::{Error, Result};
use crate::expansion::CandidateSet;
use crate::latent::{kl_categorical, log_softmax, logsumexp, softmax, Categorical};
use crate::model::GroundingModel;
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleBudget {
    pub max_candidates: usize,
    pub max_target_tokens: usize,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            max_candidates: 32,
            max_target_tokens: 64,
        }
    }
}

impl OracleBudget {
    pub fn check(&self, candidates: usize, target_tokens: usize) -> Result<()> {
        if self.max_candidates == 0 || self.max_target_tokens == 0 {
            return Err(Error::Config("oracle budget limits must be positive".into()));
        }
        if candidates > self.max_candidates {
            return Err(Error::Budget(format!(
                "{candidates} candidates exceed the enumeration budget of {}",
                self.max_candidates
            )));
        }
        if target_tokens > self.max_target_tokens {
            return Err(Error::Budget(format!(
                "{target_tokens} target tokens exceed the enumeration budget of {}",
                self.max_target_tokens
            )));
        }
        Ok(())
    }
}

/// `ln Σ_k p(k) p(x|k)` from prior log-probabilities and log-likelihoods.
pub fn log_marginal(prior_log_probs: &[f64], log_likelihoods: &[f64]) -> f64 {
    let joint: Vec<f64> = prior_log_probs.iter().zip(log_likelihoods).map(|(a, b)| a + b).collect();
    logsumexp(&joint)
}

/// `p(k|x) ∝ p(k) p(x|k)`.
pub fn posterior(prior_log_probs: &[f64], log_likelihoods: &[f64]) -> Categorical {
    let joint: Vec<f64> = prior_log_probs.iter().zip(log_likelihoods).map(|(a, b)| a + b).collect();
    Categorical::new(softmax(&joint)).expect("softmax is a distribution")
}

/// `E_q[ln p(x|z)] − KL(q ‖ prior)`.
pub fn elbo(q: &Categorical, prior: &Categorical, log_likelihoods: &[f64]) -> Result<f64> {
    let recon: f64 = q
        .probs()
        .iter()
        .zip(log_likelihoods)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, l)| w * l)
        .sum();
    Ok(recon - kl_categorical(q, prior)?)
}

/// Everything the enumeration needs for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Enumeration {
    pub prior_log_probs: Vec<f64>,
    pub log_likelihoods: Vec<f64>,
    pub target_tokens: usize,
}

impl Enumeration {
    pub fn log_marginal(&self) -> f64 {
        log_marginal(&self.prior_log_probs, &self.log_likelihoods)
    }

    pub fn posterior(&self) -> Categorical {
        posterior(&self.prior_log_probs, &self.log_likelihoods)
    }

    pub fn prior(&self) -> Categorical {
        Categorical::new(self.prior_log_probs.iter().map(|l| l.exp()).collect()).expect("prior")
    }
}

/// Scores `target` under every candidate of `set`.
pub fn enumerate(
    model: &GroundingModel,
    history: &DialogHistory,
    set: &CandidateSet,
    target: &str,
    speaker: Speaker,
    budget: &OracleBudget,
) -> Result<Enumeration> {
    let feats = model.features(history, set)?;
    let prior_log_probs = log_softmax(&model.prior_logits(&feats));
    let mut log_likelihoods = Vec::with_capacity(set.len());
    let mut target_tokens = 0;
    for (k, cand) in set.candidates.iter().enumerate() {
        let (ll, n) = model.log_likelihood(cand, history, target, speaker)?;
        if k == 0 {
            budget.check(set.len(), n)?;
        }
        target_tokens = n;
        log_likelihoods.push(ll);
    }
    Ok(Enumeration {
        prior_log_probs,
        log_likelihoods,
        target_tokens,
    })
}

pub fn exact_log_marginal(
    model: &GroundingModel,
    history: &DialogHistory,
    set: &CandidateSet,
    target: &str,
    speaker: Speaker,
    budget: &OracleBudget,
) -> Result<f64> {
    budget.check(set.len(), 0)?;
    Ok(enumerate(model, history, set, target, speaker, budget)?.log_marginal())
}

pub fn exact_posterior(
    model: &GroundingModel,
    history: &DialogHistory,
    set: &CandidateSet,
    target: &str,
    speaker: Speaker,
    budget: &OracleBudget,
) -> Result<Categorical> {
    budget.check(set.len(), 0)?;
    Ok(enumerate(model, history, set, target, speaker, budget)?.posterior())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdOptions {
    pub eps: f64,
    /// Relative errors use `max(|numeric|, |analytic|, floor)` as denominator.
    pub floor: f64,
    pub tol: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            floor: 1e-6,
            tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdCoordinate {
    pub tensor: String,
    pub offset: usize,
    pub numeric: f64,
    pub analytic: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<FdCoordinate>,
    /// Coordinates where a perturbed loss was not finite.
    pub non_finite: Vec<(String, usize)>,
    pub tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.non_finite.is_empty() && self.max_rel_err < self.tol
    }
}

/// Central differences of `loss` against `analytic` (a flat gradient laid
/// out like `params.flat()`), over the coordinates `select(tensor, offset)`
/// admits.
pub fn finite_diff_check<P: Params + Clone>(
    params: &P,
    analytic: &[f64],
    loss: impl Fn(&P) -> f64,
    select: impl Fn(&str, usize) -> bool,
    opts: &FdOptions,
) -> FdReport {
    let mut coords = Vec::new();
    let mut base = 0;
    params.visit(&mut |name, _, v| {
        for i in 0..v.len() {
            if select(name, i) {
                coords.push((name.to_string(), i, base + i));
            }
        }
        base += v.len();
    });
    assert_eq!(base, analytic.len(), "analytic gradient has the wrong length");
    let flat = params.flat();
    let mut report = FdReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        non_finite: Vec::new(),
        tol: opts.tol,
    };
    let mut probe = params.clone();
    let mut buf = flat.clone();
    for (name, offset, at) in coords {
        buf[at] = flat[at] + opts.eps;
        probe.set_flat(&buf);
        let up = loss(&probe);
        buf[at] = flat[at] - opts.eps;
        probe.set_flat(&buf);
        let down = loss(&probe);
        buf[at] = flat[at];
        report.checked += 1;
        if !up.is_finite() || !down.is_finite() {
            report.non_finite.push((name, offset));
            continue;
        }
        let numeric = (up - down) / (2.0 * opts.eps);
        let a = analytic[at];
        let rel_err = (numeric - a).abs() / numeric.abs().max(a.abs()).max(opts.floor);
        if rel_err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(rel_err);
            report.worst = Some(FdCoordinate {
                tensor: name,
                offset,
                numeric,
                analytic: a,
                rel_err,
            });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_candidate_hand_case() {
        let prior = [0.3f64.ln(), 0.7f64.ln()];
        let ll = [-1.0, -2.0];
        let want = (0.3 * (-1.0f64).exp() + 0.7 * (-2.0f64).exp()).ln();
        assert!((log_marginal(&prior, &ll) - want).abs() < 1e-15);
        let post = posterior(&prior, &ll);
        let a = 0.3 * (-1.0f64).exp();
        let b = 0.7 * (-2.0f64).exp();
        assert!((post.probs()[0] - a / (a + b)).abs() < 1e-15);
        assert!((post.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_candidate_marginal_is_likelihood() {
        assert_eq!(log_marginal(&[0.0], &[-3.25]), -3.25);
    }

    #[test]
    fn flat_likelihood_posterior_is_prior() {
        let prior = log_softmax(&[0.2, -1.0, 0.7]);
        let post = posterior(&prior, &[-4.0; 3]);
        for (a, b) in post.probs().iter().zip(&prior) {
            assert!((a - b.exp()).abs() < 1e-15);
        }
        assert_eq!(crate::latent::argmax_z(&post), 2);
    }

    #[test]
    fn bound_and_gap_identity_over_random_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let n = rng.random_range(1..9);
            let pl: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ll: Vec<f64> = (0..n).map(|_| rng.random_range(-40.0..-1.0)).collect();
            let ql: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let prior_lp = log_softmax(&pl);
            let prior = Categorical::new(prior_lp.iter().map(|l| l.exp()).collect()).unwrap();
            let q = Categorical::new(softmax(&ql)).unwrap();
            let lm = log_marginal(&prior_lp, &ll);
            let e = elbo(&q, &prior, &ll).unwrap();
            let gap = kl_categorical(&q, &posterior(&prior_lp, &ll)).unwrap();
            assert!(e <= lm + 1e-12);
            assert!((lm - e - gap).abs() < 1e-9 * lm.abs().max(1.0));
        }
    }

    #[test]
    fn budget_refuses_large_sets() {
        let b = OracleBudget {
            max_candidates: 4,
            max_target_tokens: 10,
        };
        assert!(b.check(4, 10).is_ok());
        assert!(matches!(b.check(5, 1), Err(Error::Budget(_))));
        assert!(matches!(b.check(1, 11), Err(Error::Budget(_))));
    }

    #[derive(Clone)]
    struct V(Vec<f64>);

    impl Params for V {
        fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
            f("v", &[self.0.len()], &self.0);
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
            let n = self.0.len();
            f("v", &[n], &mut self.0);
        }
    }

    #[test]
    fn linear_loss_matches_exactly() {
        let w = [0.5, -2.0, 3.0];
        let p = V(vec![1.0, 2.0, 3.0]);
        let r = finite_diff_check(
            &p,
            &w,
            |p: &V| p.0.iter().zip(&w).map(|(a, b)| a * b).sum(),
            |_, _| true,
            &FdOptions::default(),
        );
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert!(r.passed());
    }

    #[test]
    fn wrong_gradient_is_caught_and_non_finite_reported() {
        let p = V(vec![1.0, 0.0]);
        let r = finite_diff_check(&p, &[2.0, 0.0], |p: &V| p.0[0] * p.0[0], |_, _| true, &FdOptions::default());
        assert!(r.passed());
        let r = finite_diff_check(&p, &[1.0, 0.0], |p: &V| p.0[0] * p.0[0], |_, _| true, &FdOptions::default());
        assert!(!r.passed());
        let r = finite_diff_check(&p, &[0.0, 0.0], |p: &V| p.0[1].ln(), |_, i| i == 1, &FdOptions::default());
        assert_eq!(r.non_finite, vec![("v".to_string(), 1)]);
    }
}
