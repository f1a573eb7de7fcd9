//! Temperature + nucleus (top-p) sampling and autoregressive generation.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FusionLm;
use crate::adapters::AdapterOutput;
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.8,
            max_len: 512,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid("temperature must be > 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid("top_p must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Temperatures below this pick the argmax.
const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Draw one id from `logits` with temperature and nucleus truncation.
pub fn sample_next<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplingConfig, rng: &mut R) -> usize {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    if cfg.temperature < GREEDY_TEMPERATURE {
        return argmax();
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| (i, ((v - max) / cfg.temperature).exp()))
        .collect();
    let total: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= total);
    // Stable order: probability descending, id ascending.
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, p) in probs.iter().enumerate() {
        cum += p.1;
        if cum >= cfg.top_p {
            keep = i + 1;
            break;
        }
    }
    let nucleus = &probs[..keep.max(1)];
    let mass: f64 = nucleus.iter().map(|p| p.1).sum();
    let mut u = rng.random::<f64>() * mass;
    for &(id, p) in nucleus {
        if u < p {
            return id;
        }
        u -= p;
    }
    nucleus[nucleus.len() - 1].0
}

/// Test and harness controls applied on top of the model's logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationControl {
    /// After this many free tokens (or an earlier end-of-sequence), force
    /// `[AUD_0]..[AUD_{K-1}]` and stop. Audio ids and end-of-sequence are
    /// masked out of the free phase.
    pub force_audio_after: Option<usize>,
}

/// Autoregressive sampling from `prompt`. Returns the generated ids without
/// the prompt and without the end-of-sequence token. Stops at
/// end-of-sequence, `max_len` new tokens, or the positional limit.
pub fn generate<R: Rng + ?Sized>(
    lm: &FusionLm,
    store: &ParamStore,
    prompt: &[usize],
    feats: &BTreeMap<Modality, AdapterOutput>,
    sampling: &SamplingConfig,
    control: &GenerationControl,
    rng: &mut R,
) -> Result<Vec<usize>> {
    sampling.validate()?;
    lm.validate_tokens(prompt)?;
    let cfg = &lm.cfg;
    let k = cfg.n_audio_tokens;
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let mut forced: Option<usize> = None;
    let budget = match control.force_audio_after {
        // Leave room for the forced suffix.
        Some(_) => sampling.max_len.max(k),
        None => sampling.max_len,
    };
    while out.len() < budget && seq.len() < cfg.max_seq_len {
        if let (Some(n), None) = (control.force_audio_after, forced) {
            if out.len() >= n || out.len() + k >= budget || seq.len() + k >= cfg.max_seq_len {
                forced = Some(0);
            }
        }
        if let Some(i) = forced {
            if i == k {
                break;
            }
            let id = cfg.audio_id(i);
            seq.push(id);
            out.push(id);
            forced = Some(i + 1);
            continue;
        }
        let (logits, _) = lm.forward(store, &seq, feats)?;
        let mut last = logits.row(logits.rows() - 1).to_vec();
        if control.force_audio_after.is_some() {
            for (id, v) in last.iter_mut().enumerate() {
                if cfg.is_audio_id(id) || id == cfg.eos_id() {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        let next = sample_next(&last, sampling, rng);
        if next == cfg.eos_id() {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{detect_audio_tokens, FusionConfig};
    use crate::rng::stream;

    #[test]
    fn defaults_match_evaluation_settings() {
        let s = SamplingConfig::default();
        assert_eq!((s.temperature, s.top_p, s.max_len), (0.6, 0.8, 512));
    }

    #[test]
    fn invalid_sampling_rejected() {
        for (t, p) in [(0.0, 0.5), (-1.0, 0.5), (1.0, 0.0), (1.0, 1.5)] {
            let s = SamplingConfig {
                temperature: t,
                top_p: p,
                max_len: 4,
            };
            assert!(s.validate().is_err(), "{t} {p}");
        }
    }

    #[test]
    fn tiny_top_p_is_argmax() {
        let logits = [0.1, 2.0, 1.9, -3.0];
        let cfg = SamplingConfig {
            temperature: 1.0,
            top_p: 1e-9,
            max_len: 1,
        };
        let mut rng = stream(0, "s");
        for _ in 0..20 {
            assert_eq!(sample_next(&logits, &cfg, &mut rng), 1);
        }
    }

    #[test]
    fn nucleus_excludes_tail() {
        // Probabilities ~ (0.5, 0.3, 0.2): top_p 0.75 keeps only the first two.
        let logits = [0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()];
        let cfg = SamplingConfig {
            temperature: 1.0,
            top_p: 0.75,
            max_len: 1,
        };
        let mut rng = stream(1, "s");
        let mut seen = [0usize; 3];
        for _ in 0..2000 {
            seen[sample_next(&logits, &cfg, &mut rng)] += 1;
        }
        assert_eq!(seen[2], 0);
        assert!(seen[0] > seen[1] && seen[1] > 0);
    }

    #[test]
    fn forced_audio_suffix() {
        let lm = FusionLm::new(FusionConfig::default()).unwrap();
        let p = lm.init_params();
        let mut rng = stream(2, "g");
        let out = generate(
            &lm,
            &p,
            &[72, 105],
            &BTreeMap::new(),
            &SamplingConfig {
                max_len: 40,
                ..SamplingConfig::default()
            },
            &GenerationControl {
                force_audio_after: Some(5),
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 13);
        assert_eq!(detect_audio_tokens(&out, &lm.cfg), Some(5..13));
        assert_eq!(out.iter().filter(|&&t| lm.cfg.is_audio_id(t)).count(), 8);
    }
}
