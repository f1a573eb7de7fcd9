//! Three-stage training: per-stage freeze masks, the composite loss, Adam
//! with global-norm clipping, and conversion of dataset records into
//! token-level examples.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datasets::{strip_audio_markers, DatasetKind, DatasetRecord};
use crate::encoders::{load_input, ModalityEmbedding};
use crate::error::{Error, Result};
use crate::fusion::{detect_audio_tokens, ByteTokenizer};
use crate::model::MuseModel;
use crate::output_projection::CondTarget;
use crate::params::{ParamStore, TrainMask};
use crate::rng::{derive_seed, stream};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    One = 1,
    Two = 2,
    Three = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn number(self) -> u8 {
        self as u8
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Stage::One => 5,
            Stage::Two => 5,
            Stage::Three => 2,
        }
    }

    /// Parameter-name prefixes trained in this stage.
    pub fn mask(self) -> TrainMask {
        match self {
            Stage::One => TrainMask::prefixes(["adapter.", "fusion."]),
            Stage::Two => TrainMask::prefixes(["output_proj."]),
            Stage::Three => TrainMask::prefixes(["lora.", "adapter.", "fusion.", "output_proj."]),
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(Error::invalid(format!("stage must be 1, 2 or 3, got {n}"))),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse::<u8>()
            .map_err(|_| Error::invalid(format!("bad stage {s:?}")))?
            .try_into()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Names of the parameters a stage updates.
pub fn trainable_params_for_stage(stage: Stage, model: &MuseModel) -> Vec<String> {
    let mask = stage.mask();
    model
        .params
        .names()
        .filter(|n| mask.contains(n))
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub penalty_weight: f64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage, seed: u64) -> Self {
        Self {
            stage,
            epochs: stage.default_epochs(),
            lr: 1e-4,
            batch_size: 4,
            lora_rank: 8,
            lora_alpha: 16.0,
            penalty_weight: 1.0,
            max_steps: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid("lr must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.lora_rank == 0 {
            return Err(Error::invalid("lora_rank must be >= 1"));
        }
        if !(self.penalty_weight >= 0.0) {
            return Err(Error::invalid("penalty_weight must be >= 0"));
        }
        Ok(())
    }
}

/// One tokenized training example. The model reads `prompt ++ target` and is
/// scored on every `target` token.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub media: Vec<ModalityEmbedding>,
    /// Conditioning the audio-token hidden rows should project onto.
    pub y_embedding: Option<Matrix>,
    pub is_music_target: bool,
}

impl Example {
    /// Model input and per-position next-token targets.
    pub fn inputs_and_targets(&self) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        if self.prompt.is_empty() || self.target.is_empty() {
            return Err(Error::invalid("example needs a non-empty prompt and target"));
        }
        let seq: Vec<usize> = self.prompt.iter().chain(&self.target).copied().collect();
        let n = seq.len() - 1;
        let targets = (0..n)
            .map(|i| (i + 1 >= self.prompt.len()).then(|| seq[i + 1]))
            .collect();
        Ok((seq[..n].to_vec(), targets))
    }
}

/// A homogeneous group of examples.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub examples: Vec<&'a Example>,
    pub is_music_target: bool,
}

impl<'a> Batch<'a> {
    pub fn new(examples: Vec<&'a Example>) -> Result<Self> {
        let Some(first) = examples.first() else {
            return Err(Error::invalid("empty batch"));
        };
        let is_music_target = first.is_music_target;
        if examples.iter().any(|e| e.is_music_target != is_music_target) {
            return Err(Error::invalid("batch mixes music and text targets"));
        }
        Ok(Self {
            examples,
            is_music_target,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mse: f64,
    pub audio_penalty: f64,
    pub total: f64,
}

/// Loss terms on a tape.
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub mse: Option<Var>,
    pub penalty: Option<Var>,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).get(0, 0));
        LossBreakdown {
            ce: g.value(self.ce).get(0, 0),
            mse: v(self.mse),
            audio_penalty: v(self.penalty),
            total: g.value(self.total).get(0, 0),
        }
    }
}

/// Penalty weights: at positions with a text target, mass on audio ids; at
/// positions with an audio target, mass on every other id. Averaged over
/// target positions.
pub fn penalty_weights(targets: &[Option<usize>], vocab: usize, is_audio: impl Fn(usize) -> bool) -> Matrix {
    let n = targets.iter().flatten().count().max(1) as f64;
    let mut w = Matrix::zeros(targets.len(), vocab);
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let audio_target = is_audio(t);
            for (j, cell) in w.row_mut(i).iter_mut().enumerate() {
                if is_audio(j) != audio_target {
                    *cell = 1.0 / n;
                }
            }
        }
    }
    w
}

/// Build the loss of `batch` on `g`.
pub fn loss_graph(g: &mut Graph, model: &MuseModel, batch: &Batch, penalty_weight: f64) -> Result<LossVars> {
    let cfg = &model.lm.cfg;
    let mut logits = Vec::new();
    let mut all_targets = Vec::new();
    let mut sq_errors = Vec::new();
    for ex in &batch.examples {
        let (input, targets) = ex.inputs_and_targets()?;
        let mut feats = BTreeMap::new();
        for emb in &ex.media {
            let x = g.constant(emb.data.clone());
            let a = model.adapters[&emb.kind].forward(g, x)?;
            if feats.insert(emb.kind, a).is_some() {
                return Err(Error::invalid(format!("example carries two {} inputs", emb.kind)));
            }
        }
        let vars = model.lm.forward_graph(g, &input, &feats)?;
        logits.push(vars.logits);
        all_targets.extend(targets);
        if batch.is_music_target {
            let y = ex
                .y_embedding
                .as_ref()
                .ok_or_else(|| Error::invalid("music example without a target embedding"))?;
            let span = detect_audio_tokens(&input, cfg)
                .ok_or_else(|| Error::invalid("music example lacks the audio-token suffix"))?;
            let h = g.slice_rows(vars.final_hidden, span.start, span.len())?;
            let out = model.projection.forward(g, h)?;
            if g.value(out).shape() != y.shape() {
                return Err(Error::invalid(format!(
                    "target embedding is {:?}, projection gives {:?}",
                    y.shape(),
                    g.value(out).shape()
                )));
            }
            let yv = g.constant(y.clone());
            let d = g.sub(out, yv)?;
            let d2 = g.mul(d, d)?;
            sq_errors.push(g.mean_all(d2));
        }
    }
    let logits = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    let ce = g.cross_entropy(logits, &all_targets)?;
    if !batch.is_music_target {
        return Ok(LossVars {
            total: ce,
            ce,
            mse: None,
            penalty: None,
        });
    }
    let mse = {
        let parts = if sq_errors.len() == 1 { sq_errors[0] } else { g.concat_rows(&sq_errors)? };
        g.mean_all(parts)
    };
    let probs = g.softmax(logits, false);
    let w = penalty_weights(&all_targets, cfg.total_vocab(), |id| cfg.is_audio_id(id));
    let penalty = g.weighted_sum(probs, w)?;
    let total = g.add(ce, mse)?;
    let weighted = g.scale(penalty, penalty_weight);
    let total = g.add(total, weighted)?;
    Ok(LossVars {
        total,
        ce,
        mse: Some(mse),
        penalty: Some(penalty),
    })
}

/// Evaluate the loss without gradients.
pub fn compute_loss(model: &MuseModel, batch: &Batch, penalty_weight: f64) -> Result<LossBreakdown> {
    let mut g = Graph::with_params(&model.params, TrainMask::Nothing);
    let vars = loss_graph(&mut g, model, batch, penalty_weight)?;
    Ok(vars.breakdown(&g))
}

/// Adam with constant learning rate and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    t: u64,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Update every parameter in `mask` that has a gradient. Returns the
    /// pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Matrix>, mask: &TrainMask) -> f64 {
        let live: Vec<(&String, &Matrix)> = grads.iter().filter(|(n, _)| mask.contains(n)).collect();
        let norm = live
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in live {
            let Some(p) = store.get_mut(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(grad.rows(), grad.cols()));
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &g) in grad.data().iter().enumerate() {
                let g = g * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<LossRecord>,
}

impl TrainReport {
    /// Mean total loss over the first and last `window` steps.
    pub fn smoothed_ends(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.history.len();
        if n == 0 || window == 0 {
            return None;
        }
        let w = window.min(n);
        let mean = |s: &[LossRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
        Some((mean(&self.history[..w]), mean(&self.history[n - w..])))
    }
}

/// Shuffled homogeneous batches for one epoch.
pub fn epoch_batches<'a>(data: &'a [Example], batch_size: usize, rng: &mut impl rand::Rng) -> Result<Vec<Batch<'a>>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for music in [false, true] {
        let group: Vec<&Example> = order
            .iter()
            .map(|&i| &data[i])
            .filter(|e| e.is_music_target == music)
            .collect();
        for chunk in group.chunks(batch_size) {
            batches.push(Batch::new(chunk.to_vec())?);
        }
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Train `model` in place for one stage. Stage 3 attaches LoRA first.
pub fn train_stage(model: &mut MuseModel, data: &[Example], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.stage == Stage::Three {
        model.cfg.lora.rank = cfg.lora_rank;
        model.cfg.lora.alpha = cfg.lora_alpha;
        model.apply_lora()?;
    }
    let mask = cfg.stage.mask();
    let mut adam = Adam::new(cfg.lr);
    let mut rng = stream(cfg.seed, &format!("train.stage{}", cfg.stage));
    let mut report = TrainReport::default();
    'epochs: for _ in 0..cfg.epochs {
        for batch in epoch_batches(data, cfg.batch_size, &mut rng)? {
            if cfg.max_steps.is_some_and(|m| report.history.len() >= m) {
                break 'epochs;
            }
            let (loss, grads) = {
                let mut g = Graph::with_params(&model.params, mask.clone());
                let vars = loss_graph(&mut g, model, &batch, cfg.penalty_weight)?;
                let grads = g.backward(vars.total);
                (vars.breakdown(&g), g.param_grads(&grads))
            };
            if !loss.total.is_finite() {
                return Err(Error::invalid("loss diverged"));
            }
            adam.step(&mut model.params, &grads, &mask);
            report.history.push(LossRecord {
                step: report.history.len(),
                total: loss.total,
                ce: loss.ce,
                mse: loss.mse,
                penalty: loss.audio_penalty,
            });
        }
    }
    Ok(report)
}

/// Maps a caption to the conditioning a decoder's text encoder would give.
pub trait TargetEmbedder {
    fn embed(&self, caption: &str) -> Result<Matrix>;
}

/// Seeded random projection of a caption's byte counts, scaled to unit
/// Frobenius norm.
#[derive(Clone, Debug)]
pub struct BagOfBytesEmbedder {
    pub target: CondTarget,
    pub seed: u64,
}

impl TargetEmbedder for BagOfBytesEmbedder {
    fn embed(&self, caption: &str) -> Result<Matrix> {
        let (rows, cols) = self.target.shape();
        let mut counts = [0usize; 256];
        for &b in caption.as_bytes() {
            counts[b as usize] += 1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for (b, &c) in counts.iter().enumerate().filter(|(_, &c)| c > 0) {
            let basis = Matrix::uniform(rows, cols, 1.0, &mut stream(self.seed, &format!("target_embedder.{b}")));
            out.add_assign(&basis.scale(c as f64));
        }
        let norm = out.frobenius_norm();
        if norm == 0.0 {
            return Err(Error::invalid("cannot embed an empty caption"));
        }
        Ok(out.scale(1.0 / norm))
    }
}

/// Cut `prompt` and the free part of `body` so that
/// `prompt + body + suffix` is at most `limit` ids long.
fn fit(mut prompt: Vec<usize>, mut body: Vec<usize>, suffix: &[usize], limit: usize) -> Result<Vec<usize>> {
    if suffix.len() + 2 > limit {
        return Err(Error::invalid("max_seq_len too small for the audio-token suffix"));
    }
    let budget = limit - suffix.len();
    if prompt.len() + body.len() > budget {
        let keep_prompt = prompt.len().min((budget / 2).max(budget.saturating_sub(body.len())));
        prompt.truncate(keep_prompt.max(1));
        body.truncate(budget - prompt.len());
    }
    let mut target = body;
    target.extend_from_slice(suffix);
    Ok([vec![prompt.len()], prompt, target].concat())
}

/// Turns dataset records into stage-specific examples, encoding each media
/// file once.
pub struct ExampleBuilder<'a> {
    model: &'a MuseModel,
    embedder: &'a dyn TargetEmbedder,
    media_root: PathBuf,
    cache: HashMap<PathBuf, ModalityEmbedding>,
    tok: ByteTokenizer,
}

impl<'a> ExampleBuilder<'a> {
    pub fn new(model: &'a MuseModel, embedder: &'a dyn TargetEmbedder, media_root: &Path) -> Result<Self> {
        Ok(Self {
            model,
            embedder,
            media_root: media_root.to_path_buf(),
            cache: HashMap::new(),
            tok: model.tokenizer()?,
        })
    }

    fn media(&mut self, rel: &str) -> Result<ModalityEmbedding> {
        let path = self.media_root.join(rel);
        if let Some(e) = self.cache.get(&path) {
            return Ok(e.clone());
        }
        let emb = self.model.encode(&load_input(&path)?)?;
        self.cache.insert(path, emb.clone());
        Ok(emb)
    }

    /// `prompt`, `body`, then the optional audio suffix and end-of-sequence.
    fn example(
        &self,
        prompt: &str,
        body: &str,
        music: bool,
        media: Vec<ModalityEmbedding>,
        caption: &str,
    ) -> Result<Example> {
        let cfg = &self.model.lm.cfg;
        let mut suffix: Vec<usize> = if music {
            (0..cfg.n_audio_tokens).map(|i| cfg.audio_id(i)).collect()
        } else {
            Vec::new()
        };
        suffix.push(cfg.eos_id());
        let prompt_ids = self.tok.encode(prompt);
        if prompt_ids.is_empty() {
            return Err(Error::invalid("record with an empty instruction"));
        }
        let packed = fit(prompt_ids, self.tok.encode(body), &suffix, cfg.max_seq_len + 1)?;
        let split = packed[0] + 1;
        Ok(Example {
            prompt: packed[1..split].to_vec(),
            target: packed[split..].to_vec(),
            media,
            y_embedding: if music { Some(self.embedder.embed(caption)?) } else { None },
            is_music_target: music,
        })
    }

    /// Examples for `stage`:
    /// 1. media-bearing caption records, text target only;
    /// 2. music captions mapped to the audio-token suffix and its embedding;
    /// 3. every record as written.
    pub fn build(&mut self, stage: Stage, records: &[DatasetRecord]) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for r in records {
            let caption = strip_audio_markers(&r.response);
            match stage {
                Stage::One => {
                    let Some(rel) = &r.input_media else { continue };
                    if r.dataset == DatasetKind::Muedit || caption.is_empty() {
                        continue;
                    }
                    let media = vec![self.media(rel)?];
                    out.push(self.example(&r.instruction, &caption, false, media, &caption)?);
                }
                Stage::Two => {
                    if !(r.emits_music || r.dataset == DatasetKind::Mucaps) || caption.is_empty() {
                        continue;
                    }
                    out.push(self.example(&caption, "", true, Vec::new(), &caption)?);
                }
                Stage::Three => {
                    let media = match &r.input_media {
                        Some(rel) => vec![self.media(rel)?],
                        None => Vec::new(),
                    };
                    let body = if r.emits_music { caption.clone() } else { r.response.clone() };
                    out.push(self.example(&r.instruction, &body, r.emits_music, media, &caption)?);
                }
            }
        }
        Ok(out)
    }
}

/// Seed for a stage's training stream given a run seed.
pub fn stage_seed(seed: u64, stage: Stage) -> u64 {
    derive_seed(seed, &format!("stage{stage}"))
}
