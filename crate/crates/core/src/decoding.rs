//! Response production: pick a persona candidate from the prior, then
//! nucleus-sample the generator conditioned on it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogHistory, Speaker};
use crate::error::{Error, Result};
use crate::expansion::{CandidateSet, Expansion};
use crate::generator::{generate, GenerateConfig};
use crate::latent::{sample, softmax_temp, Categorical};
use crate::model::GroundingModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub nucleus_p: f64,
    pub prior_temperature: f64,
    pub max_new_tokens: usize,
    pub seed: Option<u64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            nucleus_p: 0.95,
            prior_temperature: 1.0,
            max_new_tokens: 32,
            seed: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(Error::Config(format!("nucleus_p must be in (0, 1], got {}", self.nucleus_p)));
        }
        if !(self.prior_temperature > 0.0) {
            return Err(Error::Config(format!(
                "prior_temperature must be > 0, got {}",
                self.prior_temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Keeps the smallest set of highest-probability outcomes whose mass reaches
/// `p` and renormalizes. Equal probabilities keep their original order.
pub fn nucleus_filter(dist: &Categorical, p: f64) -> Categorical {
    if p >= 1.0 {
        return dist.clone();
    }
    let probs = dist.probs();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    let mut kept = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        if probs[i] == 0.0 {
            break;
        }
        kept[i] = probs[i];
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    let out: Vec<f64> = kept.iter().map(|k| k / mass).collect();
    Categorical::new(out).expect("renormalized nucleus is a distribution")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub text: String,
    pub chosen_index: usize,
    pub prior_dist: Vec<f64>,
    /// Generation hit a length limit before the end token.
    pub truncated: bool,
}

/// Samples `z` from the temperature-scaled prior and generates a reply.
pub fn respond<R: Rng + ?Sized>(
    model: &GroundingModel,
    history: &DialogHistory,
    set: &CandidateSet,
    speaker: Speaker,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Response> {
    cfg.validate()?;
    let feats = model.features(history, set)?;
    let logits = model.prior_logits(&feats);
    let prior = softmax_temp(&logits, cfg.prior_temperature)?;
    let z = sample(&prior, rng);
    let mut r = respond_with(model, history, set, speaker, z, cfg, rng)?;
    r.prior_dist = prior.into_probs();
    Ok(r)
}

/// Generates with `z` fixed to `index`, bypassing the prior. `prior_dist`
/// still reports the (temperature-scaled) prior.
pub fn respond_with<R: Rng + ?Sized>(
    model: &GroundingModel,
    history: &DialogHistory,
    set: &CandidateSet,
    speaker: Speaker,
    index: usize,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Response> {
    cfg.validate()?;
    let cand = set
        .candidates
        .get(index)
        .ok_or_else(|| Error::Contract(format!("candidate index {index} out of range 0..{}", set.len())))?;
    let (text, truncated) = generate_for(model, cand, history, speaker, cfg, rng)?;
    let feats = model.features(history, set)?;
    let prior = softmax_temp(&model.prior_logits(&feats), cfg.prior_temperature)?;
    Ok(Response {
        text,
        chosen_index: index,
        prior_dist: prior.into_probs(),
        truncated,
    })
}

/// Generates a reply conditioned on one candidate that need not belong to
/// any candidate set. Returns the text and whether a length limit was hit.
pub fn generate_for<R: Rng + ?Sized>(
    model: &GroundingModel,
    cand: &Expansion,
    history: &DialogHistory,
    speaker: Speaker,
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<(String, bool)> {
    cfg.validate()?;
    let lm = &model.generator;
    let budget = lm.cfg.max_len.saturating_sub(cfg.max_new_tokens).max(1);
    let input = model.assemble_with_limit(cand, history, None, speaker, budget)?;
    let g = generate(
        &input,
        lm,
        model.tokenizer.eos_id(),
        &GenerateConfig {
            nucleus_p: cfg.nucleus_p,
            max_new_tokens: cfg.max_new_tokens,
        },
        rng,
    )?;
    Ok((model.tokenizer.decode(&g.tokens), g.truncated))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn nucleus_examples() {
        let d = Categorical::new(vec![0.5, 0.3, 0.15, 0.05]).unwrap();
        assert_eq!(nucleus_filter(&d, 1.0), d);
        let f = nucleus_filter(&d, 0.9);
        assert!(close(f.probs(), &[10.0 / 19.0, 6.0 / 19.0, 3.0 / 19.0, 0.0]), "{f:?}");
        let hot = Categorical::one_hot(4, 2);
        for p in [0.01, 0.5, 0.95, 1.0] {
            assert_eq!(nucleus_filter(&hot, p), hot);
        }
    }

    #[test]
    fn nucleus_boundary_element_is_kept() {
        // cumulative 0.5, 0.8: p = 0.8 stops exactly at the second element
        let d = Categorical::new(vec![0.5, 0.3, 0.2]).unwrap();
        let f = nucleus_filter(&d, 0.8);
        assert_eq!(f.probs()[2], 0.0);
        assert!(f.probs()[1] > 0.0);
    }

    #[test]
    fn nucleus_ties_keep_lower_index() {
        let d = Categorical::new(vec![0.25; 4]).unwrap();
        let f = nucleus_filter(&d, 0.5);
        assert!(close(f.probs(), &[0.5, 0.5, 0.0, 0.0]));
    }

    #[test]
    fn refiltering_is_stable_on_the_worked_example() {
        let d = Categorical::new(vec![0.5, 0.3, 0.15, 0.05]).unwrap();
        let f = nucleus_filter(&d, 0.9);
        assert_eq!(nucleus_filter(&f, 0.9), f);
        assert_eq!(nucleus_filter(&d, 1.0), nucleus_filter(&nucleus_filter(&d, 1.0), 1.0));
    }

    #[test]
    fn refiltering_can_shrink_the_nucleus() {
        // 0.4 < 0.5 so the first pass keeps two outcomes, but after
        // renormalizing the leader alone carries 0.4 / 0.75 > 0.5
        let d = Categorical::new(vec![0.4, 0.35, 0.25]).unwrap();
        let once = nucleus_filter(&d, 0.5);
        assert_eq!(once.probs().iter().filter(|p| **p > 0.0).count(), 2);
        let twice = nucleus_filter(&once, 0.5);
        assert_eq!(twice.probs(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn config_bounds() {
        assert!(DecodeConfig::default().validate().is_ok());
        let bad = DecodeConfig {
            nucleus_p: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecodeConfig {
            prior_temperature: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn nucleus_mass_and_prefix_support(
            raw in proptest::collection::vec(0.0f64..1.0, 1..12),
            p in 0.01f64..=1.0,
        ) {
            let s: f64 = raw.iter().sum();
            proptest::prop_assume!(s > 1e-6);
            let d = Categorical::new(raw.iter().map(|x| x / s).collect()).unwrap();
            let f = nucleus_filter(&d, p);
            let mass: f64 = f.probs().iter().sum();
            proptest::prop_assert!((mass - 1.0).abs() < 1e-9);
            // support is a prefix of the stable descending order
            let probs = d.probs();
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
            let kept: Vec<bool> = order.iter().map(|&i| f.probs()[i] > 0.0).collect();
            let first_dropped = kept.iter().position(|k| !k).unwrap_or(kept.len());
            proptest::prop_assert!(kept[first_dropped..].iter().all(|k| !k));
            // a second pass never widens the support
            let again = nucleus_filter(&f, p);
            for (a, b) in again.probs().iter().zip(f.probs()) {
                proptest::prop_assert!(*b > 0.0 || *a == 0.0);
            }
        }
    }
}
