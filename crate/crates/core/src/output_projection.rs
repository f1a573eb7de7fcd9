//! Music output transformer: audio-token hidden rows to a decoder
//! conditioning embedding, plus a deterministic decoder stub.
//!
//! `Z₀ = H·W_in`, one pre-norm single-head transformer block over the `K`
//! rows, then a reshape head `M·Z·W_out + b` producing the target shape.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::media::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::params::{xavier, ParamStore, TrainMask};
use crate::rng::stream;
use crate::tensor::Matrix;

pub const PREFIX: &str = "output_proj";

const NORM_EPS: f64 = 1e-6;

/// Which decoder the embedding conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "cols")]
pub enum CondTarget {
    Audioldm2,
    Musicgen,
    Toy(usize),
}

impl CondTarget {
    pub fn shape(self) -> (usize, usize) {
        match self {
            CondTarget::Audioldm2 => (1, 512),
            CondTarget::Musicgen => (512, 768),
            CondTarget::Toy(c) => (1, c),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            CondTarget::Audioldm2 => "audioldm2",
            CondTarget::Musicgen => "musicgen",
            CondTarget::Toy(_) => "toy",
        }
    }
}

impl fmt::Display for CondTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CondTarget::Toy(c) => write!(f, "toy:{c}"),
            other => f.write_str(other.tag()),
        }
    }
}

impl FromStr for CondTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audioldm2" => Ok(CondTarget::Audioldm2),
            "musicgen" => Ok(CondTarget::Musicgen),
            _ => match s.strip_prefix("toy:").map(str::parse::<usize>) {
                Some(Ok(c)) if c > 0 => Ok(CondTarget::Toy(c)),
                _ => Err(Error::invalid(format!("unknown conditioning target {s:?}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningEmbedding {
    pub target: CondTarget,
    pub data: Matrix,
}

impl ConditioningEmbedding {
    pub fn new(target: CondTarget, data: Matrix) -> Result<Self> {
        if data.shape() != target.shape() {
            return Err(Error::invalid(format!(
                "{target} embedding must be {:?}, got {:?}",
                target.shape(),
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::invalid("conditioning embedding is not finite"));
        }
        Ok(Self { target, data })
    }

    /// Write as a one-tensor archive named `conditioning`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = ParamStore::new();
        s.insert("conditioning", self.data.clone());
        let meta = BTreeMap::from([("target".to_string(), self.target.to_string())]);
        s.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (s, meta) = ParamStore::load(path)?;
        let target = meta
            .get("target")
            .ok_or_else(|| Error::format(path, "missing target metadata"))?
            .parse()?;
        Self::new(target, s.require("conditioning")?.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub d_model: usize,
    pub n_audio_tokens: usize,
    /// Width of the internal transformer block.
    pub width: usize,
    pub target: CondTarget,
    pub seed: u64,
}

impl ProjectionConfig {
    pub fn toy(d_model: usize, n_audio_tokens: usize, cols: usize, seed: u64) -> Self {
        Self {
            d_model,
            n_audio_tokens,
            width: d_model,
            target: CondTarget::Toy(cols),
            seed,
        }
    }

    pub fn full_scale(target: CondTarget, seed: u64) -> Self {
        Self {
            d_model: 4096,
            n_audio_tokens: 8,
            width: 1024,
            target,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputProjection {
    pub cfg: ProjectionConfig,
}

fn name(part: &str) -> String {
    format!("{PREFIX}.{part}")
}

impl OutputProjection {
    pub fn new(cfg: ProjectionConfig) -> Result<Self> {
        if cfg.d_model == 0 || cfg.width == 0 || cfg.n_audio_tokens == 0 {
            return Err(Error::invalid("output projection dims must be >= 1"));
        }
        if let CondTarget::Toy(0) = cfg.target {
            return Err(Error::invalid("toy target needs >= 1 column"));
        }
        Ok(Self { cfg })
    }

    fn head(&self, part: &str) -> String {
        name(&format!("head.{}.{part}", self.cfg.target.tag()))
    }

    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, w, k) = (self.cfg.d_model, self.cfg.width, self.cfg.n_audio_tokens);
        let (rows, cols) = self.cfg.target.shape();
        vec![
            (name("in"), (d, w)),
            (name("attn.wq"), (w, w)),
            (name("attn.wk"), (w, w)),
            (name("attn.wv"), (w, w)),
            (name("attn.wo"), (w, w)),
            (name("ffn.w1"), (w, 2 * w)),
            (name("ffn.w2"), (2 * w, w)),
            (self.head("m"), (rows, k)),
            (self.head("w"), (w, cols)),
            (self.head("b"), (1, cols)),
        ]
    }

    pub fn init_params(&self) -> ParamStore {
        let mut rng = stream(self.cfg.seed, PREFIX);
        let mut s = ParamStore::new();
        for (n, (r, c)) in self.param_shapes() {
            let m = if n.ends_with(".b") { Matrix::zeros(r, c) } else { xavier(r, c, &mut rng) };
            s.insert(n, m);
        }
        s
    }

    /// Differentiable projection of `hidden` (`K × d_model`).
    pub fn forward(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let (k, d) = g.value(hidden).shape();
        if k != self.cfg.n_audio_tokens || d != self.cfg.d_model {
            return Err(Error::invalid(format!(
                "audio-token hidden must be {}x{}, got {k}x{d}",
                self.cfg.n_audio_tokens, self.cfg.d_model
            )));
        }
        let w_in = g.param(&name("in"))?;
        let z = g.matmul(hidden, w_in)?;

        let h = g.rms_norm(z, NORM_EPS);
        let wq = g.param(&name("attn.wq"))?;
        let wk = g.param(&name("attn.wk"))?;
        let wv = g.param(&name("attn.wv"))?;
        let wo = g.param(&name("attn.wo"))?;
        let q = g.matmul(h, wq)?;
        let kk = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let kt = g.transpose(kk);
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (self.cfg.width as f64).sqrt());
        let p = g.softmax(s, false);
        let a = g.matmul(p, v)?;
        let a = g.matmul(a, wo)?;
        let z = g.add(z, a)?;

        let h = g.rms_norm(z, NORM_EPS);
        let w1 = g.param(&name("ffn.w1"))?;
        let w2 = g.param(&name("ffn.w2"))?;
        let h = g.matmul(h, w1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        let z = g.add(z, h)?;

        let m = g.param(&self.head("m"))?;
        let w = g.param(&self.head("w"))?;
        let b = g.param(&self.head("b"))?;
        let mz = g.matmul(m, z)?;
        let out = g.matmul(mz, w)?;
        g.add_row(out, b)
    }

    pub fn project(&self, store: &ParamStore, hidden: &Matrix) -> Result<ConditioningEmbedding> {
        let mut g = Graph::with_params(store, TrainMask::Nothing);
        let h = g.input(hidden, false);
        let out = self.forward(&mut g, h)?;
        ConditioningEmbedding::new(self.cfg.target, g.value(out).clone())
    }
}

/// Number of sinusoids in the stub's mixture.
const STUB_COMPONENTS: usize = 4;
/// Inclusive lower and exclusive upper frequency bounds (Hz).
const STUB_BAND: (u32, u32) = (110, 1760);

/// Frequencies (Hz) and amplitudes of the stub's mixture for `cond`. The
/// first component always dominates.
pub fn stub_components(cond: &ConditioningEmbedding, seed: u64) -> Vec<(f64, f64)> {
    let mut h = Sha256::new();
    h.update(cond.target.to_string().as_bytes());
    h.update(seed.to_le_bytes());
    for &v in cond.data.data() {
        h.update(((v * 1e6).round() as i64).to_le_bytes());
    }
    let digest = h.finalize();
    let span = STUB_BAND.1 - STUB_BAND.0;
    (0..STUB_COMPONENTS)
        .map(|i| {
            let b = &digest[4 * i..4 * i + 4];
            let word = u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            let freq = (STUB_BAND.0 + word % span) as f64;
            let amp = if i == 0 { 0.5 } else { 0.05 + 0.1 * (digest[16 + i] as f64 / 255.0) };
            (freq, amp)
        })
        .collect()
}

/// Deterministic stand-in for a music decoder.
pub fn decode_stub(cond: &ConditioningEmbedding, duration_s: f64, seed: u64) -> Result<Waveform> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid("duration must be > 0"));
    }
    let sr = DEFAULT_SAMPLE_RATE;
    let n = (duration_s * sr as f64).round() as usize;
    let comps = stub_components(cond, seed);
    let samples = (0..n)
        .map(|t| {
            let time = t as f64 / sr as f64;
            comps
                .iter()
                .map(|&(f, a)| a * (2.0 * PI * f * time).sin())
                .sum()
        })
        .collect();
    Ok(Waveform::new(samples, sr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_parse_round_trip() {
        for t in [CondTarget::Audioldm2, CondTarget::Musicgen, CondTarget::Toy(4)] {
            assert_eq!(t.to_string().parse::<CondTarget>().unwrap(), t);
        }
        assert!("toy:0".parse::<CondTarget>().is_err());
        assert!("mp3".parse::<CondTarget>().is_err());
    }

    #[test]
    fn toy_shape_and_row_check() {
        let p = OutputProjection::new(ProjectionConfig::toy(16, 8, 4, 1)).unwrap();
        let s = p.init_params();
        let h = Matrix::uniform(8, 16, 1.0, &mut stream(0, "h"));
        assert_eq!(p.project(&s, &h).unwrap().data.shape(), (1, 4));
        let bad = Matrix::zeros(7, 16);
        assert!(matches!(p.project(&s, &bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn stub_length_and_determinism() {
        let c = ConditioningEmbedding::new(CondTarget::Toy(3), Matrix::row_vector(vec![0.1, 0.2, 0.3])).unwrap();
        let a = decode_stub(&c, 2.0, 5).unwrap();
        let b = decode_stub(&c, 2.0, 5).unwrap();
        assert_eq!(a.samples.len(), 32000);
        assert_eq!(a.samples, b.samples);
        assert!(decode_stub(&c, 0.0, 5).is_err());
    }

    #[test]
    fn archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = ConditioningEmbedding::new(CondTarget::Audioldm2, Matrix::filled(1, 512, 0.25)).unwrap();
        let path = dir.path().join("cond.safetensors");
        c.save(&path).unwrap();
        assert_eq!(ConditioningEmbedding::load(&path).unwrap(), c);
    }
}
