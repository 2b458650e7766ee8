//! Token sampling: greedy argmax or seeded temperature / top-k / top-p.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ngram::TokenId;
use crate::rng::DetRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Greedy,
    Sample,
}

/// Sampler settings. The sampled defaults mirror common chat decoding
/// settings: temperature 0.7, top-p 0.8, top-k 20.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Sample,
            temperature: 0.7,
            top_p: 0.8,
            top_k: 20,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        SamplerConfig {
            kind: SamplerKind::Greedy,
            ..SamplerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Config(format!(
                "temperature must be a nonnegative finite real, got {}",
                self.temperature
            )));
        }
        if !(self.top_p.is_finite() && self.top_p > 0.0) {
            return Err(Error::Config(format!(
                "top-p must be positive, got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Stateful sampler; owns the RNG stream so a fixed seed reproduces the
/// exact same choices.
#[derive(Debug, Clone)]
pub struct Sampler {
    config: SamplerConfig,
    rng: DetRng,
}

impl Sampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let rng = DetRng::derive(config.seed, 0x5a3b1e);
        Ok(Sampler { config, rng })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn sample(&mut self, logits: &[f32]) -> TokenId {
        match self.config.kind {
            SamplerKind::Greedy => argmax(logits),
            SamplerKind::Sample => {
                if self.config.temperature == 0.0 {
                    argmax(logits)
                } else {
                    self.sample_filtered(logits)
                }
            }
        }
    }

    fn sample_filtered(&mut self, logits: &[f32]) -> TokenId {
        let temp = self.config.temperature;
        let mut scored: Vec<(usize, f64)> = logits
            .iter()
            .enumerate()
            .map(|(i, &l)| (i, l as f64 / temp))
            .collect();
        // Descending by logit; index breaks ties so the order is total.
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        if self.config.top_k > 0 {
            scored.truncate(self.config.top_k.min(scored.len()));
        }

        let max = scored[0].1;
        let mut probs: Vec<f64> = scored.iter().map(|&(_, l)| (l - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }

        // Nucleus cut: smallest prefix with cumulative mass >= top_p.
        let mut keep = probs.len();
        let mut cum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            cum += p;
            if cum >= self.config.top_p {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
        let mass: f64 = probs.iter().sum();

        let dart = self.rng.uniform_f64() * mass;
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if dart < acc {
                return scored[i].0 as TokenId;
            }
        }
        scored[keep - 1].0 as TokenId
    }
}

/// Argmax with lowest-index tie-breaking.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0usize;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
        assert_eq!(argmax(&[3.0]), 0);
    }

    #[test]
    fn fixed_seed_reproduces_choices() {
        let logits: Vec<f32> = (0..64).map(|i| ((i * 37 % 19) as f32) * 0.3).collect();
        let mut a = Sampler::new(SamplerConfig::default()).unwrap();
        let mut b = Sampler::new(SamplerConfig::default()).unwrap();
        for _ in 0..50 {
            assert_eq!(a.sample(&logits), b.sample(&logits));
        }
    }

    #[test]
    fn top_k_one_is_greedy() {
        let logits = vec![0.1f32, 2.0, 0.3, 1.9];
        let mut s = Sampler::new(SamplerConfig {
            top_k: 1,
            ..SamplerConfig::default()
        })
        .unwrap();
        for _ in 0..10 {
            assert_eq!(s.sample(&logits), 1);
        }
    }

    #[test]
    fn zero_temperature_is_greedy() {
        let logits = vec![0.1f32, 2.0, 0.3];
        let mut s = Sampler::new(SamplerConfig {
            temperature: 0.0,
            ..SamplerConfig::default()
        })
        .unwrap();
        assert_eq!(s.sample(&logits), 1);
    }

    #[test]
    fn tiny_top_p_keeps_the_mode() {
        let logits = vec![0.0f32, 5.0, 0.0];
        let mut s = Sampler::new(SamplerConfig {
            top_p: 1e-9,
            ..SamplerConfig::default()
        })
        .unwrap();
        for _ in 0..10 {
            assert_eq!(s.sample(&logits), 1);
        }
    }

    #[test]
    fn samples_spread_over_plausible_tokens() {
        let logits = vec![1.0f32, 1.0, 1.0, 1.0, -20.0];
        let mut s = Sampler::new(SamplerConfig {
            temperature: 1.0,
            top_p: 1.0,
            top_k: 0,
            seed: 3,
            kind: SamplerKind::Sample,
        })
        .unwrap();
        let mut seen = [0usize; 5];
        for _ in 0..400 {
            seen[s.sample(&logits) as usize] += 1;
        }
        for &count in &seen[..4] {
            assert!(count > 40, "counts {seen:?}");
        }
        assert_eq!(seen[4], 0);
    }

    #[test]
    fn invalid_settings_rejected() {
        assert!(Sampler::new(SamplerConfig {
            temperature: -1.0,
            ..SamplerConfig::default()
        })
        .is_err());
        assert!(Sampler::new(SamplerConfig {
            top_p: 0.0,
            ..SamplerConfig::default()
        })
        .is_err());
    }
}
