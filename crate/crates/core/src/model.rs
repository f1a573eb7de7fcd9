//! Full model assembly: encoders, adapters, fusion LM, output projection,
//! and the shared parameter store.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::{Adapter, AdapterConfig, AdapterOutput, AdapterVariant};
use crate::autograd::Graph;
use crate::config::KvConfig;
use crate::encoders::{EncoderConfig, ModalityEmbedding, Modality, ModalityEncoder, RawModalityInput, StandInEncoder};
use crate::error::{Error, Result};
use crate::fusion::{detect_audio_tokens, generate, ByteTokenizer, FusionConfig, FusionLm, GenerationControl, SamplingConfig};
use crate::lora::{add_factors, LoraConfig};
use crate::output_projection::{CondTarget, ConditioningEmbedding, OutputProjection, ProjectionConfig};
use crate::params::{ParamStore, TrainMask};
use crate::rng::stream;

/// Keys understood by [`ModelConfig::apply`].
pub const MODEL_KEYS: &[&str] = &[
    "n_layers",
    "block_len",
    "d_model",
    "n_heads",
    "vocab_size",
    "n_audio_tokens",
    "max_seq_len",
    "seed",
    "adapter_variant",
    "lora_rank",
    "lora_alpha",
    "cond_cols",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub fusion: FusionConfig,
    pub projection: ProjectionConfig,
    pub lora: LoraConfig,
}

impl ModelConfig {
    pub fn toy(seed: u64) -> Self {
        let fusion = FusionConfig {
            seed,
            ..FusionConfig::default()
        };
        Self {
            encoder: EncoderConfig {
                seed,
                ..EncoderConfig::default()
            },
            adapter: AdapterConfig {
                d_model: fusion.d_model,
                seed,
                ..AdapterConfig::default()
            },
            projection: ProjectionConfig::toy(fusion.d_model, fusion.n_audio_tokens, 16, seed),
            fusion,
            lora: LoraConfig::default(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.fusion.seed
    }

    /// Override fields from `key=value` entries; keys outside [`MODEL_KEYS`]
    /// are left for the caller.
    pub fn apply(&mut self, kv: &KvConfig) -> Result<()> {
        let f = &mut self.fusion;
        if let Some(v) = kv.get("n_layers")? {
            f.n_layers = v;
        }
        if let Some(v) = kv.get("block_len")? {
            f.block_len = v;
        }
        if let Some(v) = kv.get("n_heads")? {
            f.n_heads = v;
        }
        if let Some(v) = kv.get("vocab_size")? {
            f.vocab_size = v;
        }
        if let Some(v) = kv.get("max_seq_len")? {
            f.max_seq_len = v;
        }
        if let Some(v) = kv.get::<usize>("n_audio_tokens")? {
            f.n_audio_tokens = v;
            self.projection.n_audio_tokens = v;
        }
        if let Some(v) = kv.get::<usize>("d_model")? {
            self.fusion.d_model = v;
            self.adapter.d_model = v;
            self.projection.d_model = v;
            self.projection.width = v;
        }
        if let Some(v) = kv.get::<u64>("seed")? {
            self.set_seed(v);
        }
        if let Some(v) = kv.get::<AdapterVariant>("adapter_variant")? {
            self.adapter.variant = v;
        }
        if let Some(v) = kv.get("lora_rank")? {
            self.lora.rank = v;
        }
        if let Some(v) = kv.get("lora_alpha")? {
            self.lora.alpha = v;
        }
        if let Some(v) = kv.get::<usize>("cond_cols")? {
            self.projection.target = CondTarget::Toy(v);
        }
        self.validate()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.encoder.seed = seed;
        self.adapter.seed = seed;
        self.fusion.seed = seed;
        self.projection.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate()?;
        self.lora.validate()?;
        let d = self.fusion.d_model;
        if self.adapter.d_model != d || self.projection.d_model != d {
            return Err(Error::invalid("adapter, fusion and projection d_model must agree"));
        }
        if self.projection.n_audio_tokens != self.fusion.n_audio_tokens {
            return Err(Error::invalid("projection and fusion disagree on the audio-token count"));
        }
        Ok(())
    }
}

/// Result of [`MuseModel::respond`].
#[derive(Clone, Debug, PartialEq)]
pub struct Response {
    /// Generated ids, without the prompt and end-of-sequence.
    pub tokens: Vec<usize>,
    /// Decoded text with audio markers.
    pub text: String,
    /// Audio-token positions within `tokens`, when they end the output.
    pub audio_tokens: Option<Range<usize>>,
    /// Projection of the audio-token hidden states, when present.
    pub conditioning: Option<ConditioningEmbedding>,
}

/// Checkpoint metadata keys.
const META_CONFIG: &str = "config";
const META_STAGE: &str = "stage";
const META_LORA: &str = "lora";

#[derive(Clone, Debug)]
pub struct MuseModel {
    pub cfg: ModelConfig,
    pub encoder: StandInEncoder,
    pub adapters: BTreeMap<Modality, Adapter>,
    pub lm: FusionLm,
    pub projection: OutputProjection,
    pub params: ParamStore,
}

impl MuseModel {
    /// Build a freshly initialized model.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let mut m = Self::skeleton(cfg)?;
        for a in m.adapters.values() {
            m.params.merge(a.init_params());
        }
        m.params.merge(m.lm.init_params());
        m.params.merge(m.projection.init_params());
        Ok(m)
    }

    fn skeleton(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = StandInEncoder::new(cfg.encoder.clone())?;
        let adapters = Modality::ALL
            .iter()
            .map(|&kind| {
                let (_, feat) = cfg.encoder.shape(kind);
                Ok((kind, Adapter::new(kind, feat, cfg.adapter.clone())?))
            })
            .collect::<Result<_>>()?;
        let lm = FusionLm::new(cfg.fusion.clone())?;
        let projection = OutputProjection::new(cfg.projection)?;
        Ok(Self {
            cfg,
            encoder,
            adapters,
            lm,
            projection,
            params: ParamStore::new(),
        })
    }

    pub fn tokenizer(&self) -> Result<ByteTokenizer> {
        self.lm.tokenizer()
    }

    pub fn has_lora(&self) -> bool {
        self.lm.lora.is_some()
    }

    /// Attach zero-delta LoRA factors to every query and value projection.
    /// Returns the number of added scalars; a second call adds nothing.
    pub fn apply_lora(&mut self) -> Result<usize> {
        if self.has_lora() {
            return Ok(0);
        }
        let targets = self.lm.lora_targets();
        let added = add_factors(&mut self.params, &targets, &self.cfg.lora, self.cfg.seed())?;
        self.lm.lora = Some(self.cfg.lora);
        Ok(added)
    }

    pub fn encode(&self, input: &RawModalityInput) -> Result<ModalityEmbedding> {
        self.encoder.encode(input)
    }

    pub fn adapt(&self, emb: &ModalityEmbedding) -> Result<AdapterOutput> {
        let adapter = &self.adapters[&emb.kind];
        let mut g = Graph::with_params(&self.params, TrainMask::Nothing);
        let x = g.input(&emb.data, false);
        let out = adapter.forward(&mut g, x)?;
        Ok(AdapterOutput {
            kind: emb.kind,
            vector: g.value(out).data().to_vec(),
        })
    }

    /// Encode and adapt each input; at most one input per modality.
    pub fn features(&self, inputs: &[RawModalityInput]) -> Result<BTreeMap<Modality, AdapterOutput>> {
        let mut out = BTreeMap::new();
        for input in inputs {
            let emb = self.encode(input)?;
            if out.insert(input.kind, self.adapt(&emb)?).is_some() {
                return Err(Error::invalid(format!("more than one {} input", input.kind)));
            }
        }
        Ok(out)
    }

    /// Generate a reply to `prompt`. When the output ends in the audio-token
    /// suffix, the final hidden states at those positions are projected to a
    /// decoder conditioning; otherwise the reply is text only.
    pub fn respond(
        &self,
        prompt: &str,
        media: &[RawModalityInput],
        sampling: &SamplingConfig,
        control: &GenerationControl,
        seed: u64,
    ) -> Result<Response> {
        let tok = self.tokenizer()?;
        let prompt_ids = tok.encode(prompt);
        if prompt_ids.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let feats = self.features(media)?;
        let mut rng = stream(seed, "generate");
        let tokens = generate(&self.lm, &self.params, &prompt_ids, &feats, sampling, control, &mut rng)?;
        let seq: Vec<usize> = prompt_ids.iter().chain(&tokens).copied().collect();
        let span = detect_audio_tokens(&seq, &self.lm.cfg).filter(|s| s.start >= prompt_ids.len());
        let conditioning = match &span {
            Some(s) => {
                let (_, hidden) = self.lm.forward(&self.params, &seq, &feats)?;
                let h = hidden.final_hidden.select_rows(&s.clone().collect::<Vec<_>>());
                Some(self.projection.project(&self.params, &h)?)
            }
            None => None,
        };
        Ok(Response {
            text: tok.decode(&tokens),
            audio_tokens: span.map(|s| s.start - prompt_ids.len()..s.end - prompt_ids.len()),
            tokens,
            conditioning,
        })
    }

    pub fn save(&self, path: &Path, stage: u8) -> Result<()> {
        let meta = BTreeMap::from([
            (META_CONFIG.to_string(), serde_json::to_string(&self.cfg)?),
            (META_STAGE.to_string(), stage.to_string()),
            (META_LORA.to_string(), self.has_lora().to_string()),
        ]);
        self.params.save(path, &meta)
    }

    /// Load a checkpoint; returns the model and its stage tag.
    pub fn load(path: &Path) -> Result<(Self, u8)> {
        let (params, meta) = ParamStore::load(path)?;
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::format(path, format!("missing {k} metadata")))
        };
        let cfg: ModelConfig = serde_json::from_str(field(META_CONFIG)?)?;
        let stage: u8 = field(META_STAGE)?
            .parse()
            .map_err(|_| Error::format(path, "bad stage tag"))?;
        let lora = field(META_LORA)? == "true";
        let mut m = Self::skeleton(cfg)?;
        if lora {
            m.lm.lora = Some(m.cfg.lora);
        }
        m.params = params;
        let expected = Self::new(m.cfg.clone())?;
        for (name, value) in expected.params.iter() {
            let got = m.params.require(name).map_err(|_| Error::format(path, format!("missing tensor {name}")))?;
            if got.shape() != value.shape() {
                return Err(Error::format(path, format!("tensor {name} has shape {:?}", got.shape())));
            }
        }
        Ok((m, stage))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn respond_dispatches_on_audio_tokens() {
        let m = MuseModel::new(ModelConfig::toy(1)).unwrap();
        let sampling = SamplingConfig {
            max_len: 12,
            ..SamplingConfig::default()
        };
        let forced = GenerationControl {
            force_audio_after: Some(3),
        };
        let r = m.respond("play", &[], &sampling, &forced, 5).unwrap();
        assert_eq!(r.audio_tokens, Some(3..11));
        assert_eq!(r.conditioning.unwrap().data.shape(), (1, 16));
        let again = m.respond("play", &[], &sampling, &forced, 5).unwrap();
        assert_eq!(again.tokens, r.tokens);
        let free = m.respond("play", &[], &sampling, &GenerationControl::default(), 5).unwrap();
        if free.audio_tokens.is_none() {
            assert!(free.conditioning.is_none());
        }
    }

    #[test]
    fn config_keys_apply() {
        let mut c = ModelConfig::toy(0);
        let kv = KvConfig::parse("d_model=16\nn_heads=2\nseed=9\nadapter_variant=dense\ncond_cols=4").unwrap();
        c.apply(&kv).unwrap();
        assert_eq!(c.adapter.d_model, 16);
        assert_eq!(c.projection.d_model, 16);
        assert_eq!(c.fusion.seed, 9);
        assert_eq!(c.adapter.variant, AdapterVariant::Dense);
        assert_eq!(c.projection.target, CondTarget::Toy(4));
        let bad = KvConfig::parse("n_heads=5").unwrap();
        assert!(ModelConfig::toy(0).apply(&bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MuseModel::new(ModelConfig::toy(3)).unwrap();
        m.apply_lora().unwrap();
        let path = dir.path().join("m.safetensors");
        m.save(&path, 2).unwrap();
        let (back, stage) = MuseModel::load(&path).unwrap();
        assert_eq!(stage, 2);
        assert!(back.has_lora());
        assert_eq!(back.cfg, m.cfg);
        // Archives hold f32.
        for (name, v) in m.params.iter() {
            let w = back.params.require(name).unwrap();
            assert!(v.max_abs_diff(w) < 1e-6, "{name}");
        }
    }
}
