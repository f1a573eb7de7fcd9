//! Decoder-only language model with modality injection.
//!
//! The last `3·L` layers form three injection blocks, fed in order by video,
//! image and music. Every layer of block `i` adds
//! `gate_i · (A_modality + P_query,i)` to each position of its input hidden
//! state, or `gate_i · P_query,i` when that modality is absent. Gates start
//! at zero, so a fresh model behaves exactly like the bare language model.

mod sampling;
mod tokenizer;

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterOutput;
use crate::autograd::{Graph, Var};
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::lora::{adapted_matmul, LoraConfig};
use crate::params::{xavier, ParamStore, TrainMask};
use crate::rng::stream;
use crate::tensor::Matrix;

pub use sampling::{generate, sample_next, GenerationControl, SamplingConfig};
pub use tokenizer::{audio_suffix, ByteTokenizer};

/// Which modality feeds each injection block, in layer order.
pub const INJECTION_ORDER: [Modality; 3] = [Modality::Video, Modality::Image, Modality::Music];

const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub n_layers: usize,
    /// Layers per injection block (`L`).
    pub block_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Base vocabulary, excluding audio tokens; the last id is end-of-sequence.
    pub vocab_size: usize,
    /// `K`.
    pub n_audio_tokens: usize,
    pub max_target_len: usize,
    /// Positional-embedding table length.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            block_len: 2,
            d_model: 32,
            n_heads: 4,
            vocab_size: 258,
            n_audio_tokens: 8,
            max_target_len: 512,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn full_scale(seed: u64) -> Self {
        Self {
            n_layers: 32,
            block_len: 6,
            d_model: 4096,
            n_heads: 32,
            vocab_size: 32_000,
            n_audio_tokens: 8,
            max_target_len: 512,
            max_seq_len: 4096,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_len == 0 || self.n_layers < 3 * self.block_len {
            return Err(Error::invalid(format!(
                "n_layers ({}) must be >= 3 * block_len ({})",
                self.n_layers, self.block_len
            )));
        }
        if self.n_audio_tokens == 0 {
            return Err(Error::invalid("n_audio_tokens must be >= 1"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid("d_model must be divisible by n_heads"));
        }
        if self.vocab_size < 2 || self.max_seq_len == 0 {
            return Err(Error::invalid("vocab_size >= 2 and max_seq_len >= 1 required"));
        }
        Ok(())
    }

    /// Base vocabulary plus audio tokens.
    pub fn total_vocab(&self) -> usize {
        self.vocab_size + self.n_audio_tokens
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn audio_id(&self, i: usize) -> usize {
        self.vocab_size + i
    }

    pub fn is_audio_id(&self, id: usize) -> bool {
        (self.vocab_size..self.total_vocab()).contains(&id)
    }

    /// The three injection blocks: the last `3·L` layers split in order.
    pub fn injection_blocks(&self) -> [(Modality, Range<usize>); 3] {
        let start = self.n_layers - 3 * self.block_len;
        let l = self.block_len;
        [0, 1, 2].map(|i| (INJECTION_ORDER[i], start + i * l..start + (i + 1) * l))
    }

    pub fn block_of_layer(&self, layer: usize) -> Option<usize> {
        self.injection_blocks()
            .iter()
            .position(|(_, r)| r.contains(&layer))
    }
}

/// Per-layer hidden states of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    /// Output of each layer, `seq_len × d_model`.
    pub layers: Vec<Matrix>,
    /// Normalized final state fed to the output head.
    pub final_hidden: Matrix,
}

/// Instrumentation of the injection path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardTrace {
    /// Vector added at each layer's input, `None` outside injection blocks.
    pub injections: Vec<Option<Vec<f64>>>,
    /// Hidden state entering each layer, before injection.
    pub layer_inputs: Vec<Matrix>,
}

/// Tape handles of one forward pass.
pub struct LmVars {
    pub logits: Var,
    pub final_hidden: Var,
    pub layer_outputs: Vec<Var>,
    /// Per-layer `(pre-injection input, injected vector)`.
    pub injections: Vec<(Var, Option<Var>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionLm {
    pub cfg: FusionConfig,
    pub lora: Option<LoraConfig>,
}

impl FusionLm {
    pub fn new(cfg: FusionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, lora: None })
    }

    pub fn tokenizer(&self) -> Result<ByteTokenizer> {
        ByteTokenizer::new(self.cfg.vocab_size, self.cfg.n_audio_tokens)
    }

    fn layer_name(l: usize, part: &str) -> String {
        format!("lm.layers.{l}.{part}")
    }

    pub fn prefix_name(block: usize) -> String {
        format!("fusion.prefix.{block}")
    }

    pub fn gate_name(block: usize) -> String {
        format!("fusion.gate.{block}")
    }

    /// Names of the matrices LoRA attaches to: every layer's query and value
    /// projection.
    pub fn lora_targets(&self) -> Vec<String> {
        (0..self.cfg.n_layers)
            .flat_map(|l| [Self::layer_name(l, "wq"), Self::layer_name(l, "wv")])
            .collect()
    }

    pub fn init_params(&self) -> ParamStore {
        let c = &self.cfg;
        let d = c.d_model;
        let mut store = ParamStore::new();
        let mut rng = stream(c.seed, "lm");
        store.insert("lm.tok_emb", Matrix::uniform(c.total_vocab(), d, 1.0, &mut rng));
        store.insert("lm.pos_emb", Matrix::uniform(c.max_seq_len, d, 0.5, &mut rng));
        for l in 0..c.n_layers {
            store.insert(Self::layer_name(l, "attn_norm"), Matrix::filled(1, d, 1.0));
            for m in ["wq", "wk", "wv", "wo"] {
                store.insert(Self::layer_name(l, m), xavier(d, d, &mut rng));
            }
            store.insert(Self::layer_name(l, "mlp_norm"), Matrix::filled(1, d, 1.0));
            store.insert(Self::layer_name(l, "w1"), xavier(d, 4 * d, &mut rng));
            store.insert(Self::layer_name(l, "w2"), xavier(4 * d, d, &mut rng));
        }
        store.insert("lm.final_norm", Matrix::filled(1, d, 1.0));
        store.insert("lm.head", xavier(d, c.total_vocab(), &mut rng));
        let mut frng = stream(c.seed, "fusion");
        for b in 0..3 {
            store.insert(Self::prefix_name(b), Matrix::uniform(1, d, 0.5, &mut frng));
            store.insert(Self::gate_name(b), Matrix::zeros(1, 1));
        }
        store
    }

    pub fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("token sequence is empty"));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence of {} exceeds max_seq_len {}",
                tokens.len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.cfg.total_vocab()) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    /// Differentiable forward. `feats` holds `1 × d_model` adapter outputs.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        feats: &BTreeMap<Modality, Var>,
    ) -> Result<LmVars> {
        self.validate_tokens(tokens)?;
        let d = self.cfg.d_model;
        for (kind, &v) in feats {
            if g.value(v).shape() != (1, d) {
                return Err(Error::invalid(format!(
                    "{kind} features must be 1x{d}, got {:?}",
                    g.value(v).shape()
                )));
            }
        }
        let tok = g.param("lm.tok_emb")?;
        let pos = g.param("lm.pos_emb")?;
        let x_tok = g.gather(tok, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let x_pos = g.gather(pos, &positions)?;
        let mut x = g.add(x_tok, x_pos)?;

        let mut block_vec = [None; 3];
        for (b, (kind, _)) in self.cfg.injection_blocks().iter().enumerate() {
            let prefix = g.param(&Self::prefix_name(b))?;
            let gate = g.param(&Self::gate_name(b))?;
            let signal = match feats.get(kind) {
                Some(&a) => g.add(a, prefix)?,
                None => prefix,
            };
            block_vec[b] = Some(g.mul_scalar(signal, gate)?);
        }

        let mut layer_outputs = Vec::with_capacity(self.cfg.n_layers);
        let mut injections = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let inj = self.cfg.block_of_layer(l).and_then(|b| block_vec[b]);
            injections.push((x, inj));
            if let Some(v) = inj {
                x = g.add_row(x, v)?;
            }
            x = self.layer(g, l, x)?;
            layer_outputs.push(x);
        }
        let norm = g.param("lm.final_norm")?;
        let h = g.rms_norm(x, NORM_EPS);
        let final_hidden = g.mul_row(h, norm)?;
        let head = g.param("lm.head")?;
        let logits = g.matmul(final_hidden, head)?;
        Ok(LmVars {
            logits,
            final_hidden,
            layer_outputs,
            injections,
        })
    }

    /// One pre-norm decoder layer: causal multi-head attention then a GELU MLP.
    fn layer(&self, g: &mut Graph, l: usize, x: Var) -> Result<Var> {
        let d = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let hd = d / heads;
        let lora = self.lora.as_ref();

        let an = g.param(&Self::layer_name(l, "attn_norm"))?;
        let h = g.rms_norm(x, NORM_EPS);
        let h = g.mul_row(h, an)?;
        let q = adapted_matmul(g, h, &Self::layer_name(l, "wq"), lora)?;
        let k = adapted_matmul(g, h, &Self::layer_name(l, "wk"), None)?;
        let v = adapted_matmul(g, h, &Self::layer_name(l, "wv"), lora)?;
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = g.slice_cols(q, i * hd, hd)?;
            let kh = g.slice_cols(k, i * hd, hd)?;
            let vh = g.slice_cols(v, i * hd, hd)?;
            let kt = g.transpose(kh);
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (hd as f64).sqrt());
            let p = g.softmax(s, true);
            outs.push(g.matmul(p, vh)?);
        }
        let att = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let wo = g.param(&Self::layer_name(l, "wo"))?;
        let att = g.matmul(att, wo)?;
        let x = g.add(x, att)?;

        let mn = g.param(&Self::layer_name(l, "mlp_norm"))?;
        let h = g.rms_norm(x, NORM_EPS);
        let h = g.mul_row(h, mn)?;
        let w1 = g.param(&Self::layer_name(l, "w1"))?;
        let w2 = g.param(&Self::layer_name(l, "w2"))?;
        let h = g.matmul(h, w1)?;
        let h = g.gelu(h);
        let h = g.matmul(h, w2)?;
        g.add(x, h)
    }

    /// Apply layer `l` alone to a hidden state (no injection).
    pub fn apply_layer(&self, store: &ParamStore, l: usize, x: &Matrix) -> Result<Matrix> {
        if l >= self.cfg.n_layers {
            return Err(Error::invalid(format!("layer {l} out of range")));
        }
        let mut g = Graph::with_params(store, TrainMask::Nothing);
        let xv = g.input(x, false);
        let out = self.layer(&mut g, l, xv)?;
        Ok(g.value(out).clone())
    }

    fn feat_vars<'a>(
        &self,
        g: &mut Graph<'a>,
        feats: &'a BTreeMap<Modality, AdapterOutput>,
    ) -> Result<BTreeMap<Modality, Var>> {
        let mut out = BTreeMap::new();
        for (kind, f) in feats {
            if f.kind != *kind {
                return Err(Error::invalid(format!(
                    "feature under key {kind} is a {} output",
                    f.kind
                )));
            }
            if f.vector.len() != self.cfg.d_model {
                return Err(Error::invalid(format!(
                    "{kind} features have length {}, expected {}",
                    f.vector.len(),
                    self.cfg.d_model
                )));
            }
            out.insert(*kind, g.constant(f.as_row()));
        }
        Ok(out)
    }

    /// Inference forward: `(logits, hidden states)`.
    pub fn forward(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        feats: &BTreeMap<Modality, AdapterOutput>,
    ) -> Result<(Matrix, HiddenStates)> {
        let (logits, hidden, _) = self.forward_traced(store, tokens, feats)?;
        Ok((logits, hidden))
    }

    pub fn forward_traced(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        feats: &BTreeMap<Modality, AdapterOutput>,
    ) -> Result<(Matrix, HiddenStates, ForwardTrace)> {
        let mut g = Graph::with_params(store, TrainMask::Nothing);
        let fv = self.feat_vars(&mut g, feats)?;
        let vars = self.forward_graph(&mut g, tokens, &fv)?;
        let hidden = HiddenStates {
            layers: vars.layer_outputs.iter().map(|&v| g.value(v).clone()).collect(),
            final_hidden: g.value(vars.final_hidden).clone(),
        };
        let trace = ForwardTrace {
            injections: vars
                .injections
                .iter()
                .map(|(_, inj)| inj.map(|v| g.value(v).data().to_vec()))
                .collect(),
            layer_inputs: vars.injections.iter().map(|(x, _)| g.value(*x).clone()).collect(),
        };
        Ok((g.value(vars.logits).clone(), hidden, trace))
    }

    /// Parse string-keyed features, rejecting unknown modality names.
    pub fn features_from_named(
        named: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<BTreeMap<Modality, AdapterOutput>> {
        named
            .into_iter()
            .map(|(k, vector)| {
                let kind: Modality = k.parse()?;
                Ok((kind, AdapterOutput { kind, vector }))
            })
            .collect()
    }
}

/// Positions of the trailing `[AUD_0]..[AUD_{K-1}]` run, if the sequence
/// ends with exactly that run in order.
pub fn detect_audio_tokens(seq: &[usize], cfg: &FusionConfig) -> Option<Range<usize>> {
    let k = cfg.n_audio_tokens;
    if seq.len() < k {
        return None;
    }
    let start = seq.len() - k;
    seq[start..]
        .iter()
        .enumerate()
        .all(|(i, &id)| id == cfg.audio_id(i))
        .then_some(start..seq.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (FusionLm, ParamStore) {
        let lm = FusionLm::new(FusionConfig::default()).unwrap();
        let p = lm.init_params();
        (lm, p)
    }

    #[test]
    fn blocks_are_the_trailing_layers() {
        let cfg = FusionConfig::full_scale(0);
        let blocks = cfg.injection_blocks();
        assert_eq!(blocks[0], (Modality::Video, 14..20));
        assert_eq!(blocks[1], (Modality::Image, 20..26));
        assert_eq!(blocks[2], (Modality::Music, 26..32));
        assert_eq!(cfg.block_of_layer(13), None);
    }

    #[test]
    fn config_validation() {
        let bad = FusionConfig {
            n_layers: 5,
            block_len: 2,
            ..FusionConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FusionConfig {
            n_audio_tokens: 0,
            ..FusionConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn detect_suffix_rules() {
        let cfg = FusionConfig::default();
        let text: Vec<usize> = b"hello".iter().map(|&b| b as usize).collect();
        assert_eq!(detect_audio_tokens(&text, &cfg), None);
        let mut seq = text.clone();
        seq.extend((0..8).map(|i| cfg.audio_id(i)));
        assert_eq!(detect_audio_tokens(&seq, &cfg), Some(5..13));
        let mut early = vec![cfg.audio_id(3)];
        early.extend(&text);
        assert_eq!(detect_audio_tokens(&early, &cfg), None);
        let mut shuffled = text.clone();
        shuffled.extend((0..8).rev().map(|i| cfg.audio_id(i)));
        assert_eq!(detect_audio_tokens(&shuffled, &cfg), None);
    }

    #[test]
    fn logits_shape_and_finiteness() {
        let (lm, p) = toy();
        let (logits, hidden) = lm.forward(&p, &[1, 2, 3, 4], &BTreeMap::new()).unwrap();
        assert_eq!(logits.shape(), (4, 266));
        assert_eq!(hidden.layers.len(), 6);
        assert!(logits.is_finite());
    }

    #[test]
    fn rejects_bad_tokens_and_features() {
        let (lm, p) = toy();
        assert!(lm.forward(&p, &[], &BTreeMap::new()).is_err());
        assert!(lm.forward(&p, &[9999], &BTreeMap::new()).is_err());
        let mut feats = BTreeMap::new();
        feats.insert(
            Modality::Music,
            AdapterOutput {
                kind: Modality::Image,
                vector: vec![0.0; 32],
            },
        );
        assert!(lm.forward(&p, &[1], &feats).is_err());
        let named = vec![("audio".to_string(), vec![0.0; 32])];
        assert!(matches!(
            FusionLm::features_from_named(named),
            Err(Error::InvalidInput(_))
        ));
    }
}
