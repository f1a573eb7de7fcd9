//! Low-rank adapters on the language model's attention projections.
//!
//! For a frozen `W` (`d_in × d_out`, applied as `x·W`) the adapted map is
//! `x·W + (alpha / r) · x·Aᵀ·Bᵀ` with `A: r × d_in`, `B: d_out × r`, and `B`
//! starting at zero so the adapted model equals the base model at init.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, xavier};
use crate::rng::stream;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("lora rank must be >= 1"));
        }
        if !self.alpha.is_finite() {
            return Err(Error::invalid("lora alpha must be finite"));
        }
        Ok(())
    }
}

/// Names of the factor pair adapting `target` (e.g. `lm.layers.0.wq`).
pub fn factor_names(target: &str) -> (String, String) {
    let rest = target.strip_prefix("lm.").unwrap_or(target);
    (format!("lora.{rest}.a"), format!("lora.{rest}.b"))
}

/// Insert zero-delta factors for every `target` into `store`. Returns the
/// number of scalars added.
pub fn add_factors(store: &mut ParamStore, targets: &[String], cfg: &LoraConfig, seed: u64) -> Result<usize> {
    cfg.validate()?;
    let mut added = 0;
    for target in targets {
        let (d_in, d_out) = store.require(target)?.shape();
        let (a_name, b_name) = factor_names(target);
        let mut rng = stream(seed, &a_name);
        let a = xavier(cfg.rank, d_in, &mut rng);
        let b = Matrix::zeros(d_out, cfg.rank);
        added += a.len() + b.len();
        store.insert(a_name, a);
        store.insert(b_name, b);
    }
    Ok(added)
}

/// `x·W`, plus the low-rank delta when factors for `target` are present.
pub fn adapted_matmul(g: &mut Graph, x: Var, target: &str, lora: Option<&LoraConfig>) -> Result<Var> {
    let w = g.param(target)?;
    let base = g.matmul(x, w)?;
    let Some(cfg) = lora else { return Ok(base) };
    let (a_name, b_name) = factor_names(target);
    if !g.has_param(&a_name) {
        return Ok(base);
    }
    let a = g.param(&a_name)?;
    let b = g.param(&b_name)?;
    let at = g.transpose(a);
    let bt = g.transpose(b);
    let xa = g.matmul(x, at)?;
    let delta = g.matmul(xa, bt)?;
    let delta = g.scale(delta, cfg.scaling());
    g.add(base, delta)
}
