//! Understanding adapters: map an encoder's token matrix to one
//! `d_model` vector per modality.
//!
//! Temporal modalities (music, video) run
//! `conv1d → GRU → self-attention → mean-pool → dense → projection`;
//! images run `conv1d → mean-pool → dense → projection`. Each
//! [`AdapterVariant`] switches stages off for ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{Modality, ModalityEmbedding};
use crate::error::{Error, Result};
use crate::params::{xavier, ParamStore, TrainMask};
use crate::rng::stream;
use crate::tensor::{softmax_rows, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterVariant {
    ProjectionOnly,
    Dense,
    Rnn,
    AttnRnn,
    #[default]
    Full,
}

impl AdapterVariant {
    pub const ALL: [AdapterVariant; 5] = [
        AdapterVariant::ProjectionOnly,
        AdapterVariant::Dense,
        AdapterVariant::Rnn,
        AdapterVariant::AttnRnn,
        AdapterVariant::Full,
    ];

    pub fn has_conv(self) -> bool {
        matches!(self, Self::Rnn | Self::AttnRnn | Self::Full)
    }

    pub fn has_rnn(self) -> bool {
        matches!(self, Self::Rnn | Self::AttnRnn | Self::Full)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Self::AttnRnn | Self::Full)
    }

    pub fn has_dense(self) -> bool {
        matches!(self, Self::Dense | Self::Full)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ProjectionOnly => "projection_only",
            Self::Dense => "dense",
            Self::Rnn => "rnn",
            Self::AttnRnn => "attn_rnn",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for AdapterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AdapterVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown adapter variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub d_model: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    /// Defaults to the encoder feature width.
    pub rnn_hidden: Option<usize>,
    /// Defaults to `2 * d_model`.
    pub dense_hidden: Option<usize>,
    pub variant: AdapterVariant,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            conv_kernel: 3,
            conv_stride: 2,
            rnn_hidden: None,
            dense_hidden: None,
            variant: AdapterVariant::Full,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn full_scale(seed: u64) -> Self {
        Self {
            d_model: 4096,
            seed,
            ..Self::default()
        }
    }

    pub fn dense_hidden(&self) -> usize {
        self.dense_hidden.unwrap_or(2 * self.d_model)
    }
}

/// One adapter vector, ready for injection.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterOutput {
    pub kind: Modality,
    pub vector: Vec<f64>,
}

impl AdapterOutput {
    pub fn as_row(&self) -> Matrix {
        Matrix::row_vector(self.vector.clone())
    }
}

/// Shape and parameter naming of one modality's adapter. Parameters live in
/// a [`ParamStore`] under `adapter.<modality>.`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adapter {
    pub kind: Modality,
    pub in_dim: usize,
    pub cfg: AdapterConfig,
    prefix: String,
}

impl Adapter {
    pub fn new(kind: Modality, in_dim: usize, cfg: AdapterConfig) -> Result<Self> {
        if cfg.d_model == 0 || in_dim == 0 {
            return Err(Error::invalid("adapter dims must be >= 1"));
        }
        if cfg.conv_kernel == 0 || cfg.conv_stride == 0 {
            return Err(Error::invalid("conv kernel and stride must be >= 1"));
        }
        if cfg.rnn_hidden == Some(0) || cfg.dense_hidden == Some(0) {
            return Err(Error::invalid("hidden sizes must be >= 1"));
        }
        Ok(Self {
            kind,
            in_dim,
            cfg,
            prefix: format!("adapter.{kind}"),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// Recurrent state width, which is also the attention width `d`.
    pub fn hidden_dim(&self) -> usize {
        self.cfg.rnn_hidden.unwrap_or(self.in_dim)
    }

    /// Width of the pooled vector entering the dense block.
    pub fn pooled_dim(&self) -> usize {
        if self.kind.is_temporal() && self.cfg.variant.has_rnn() {
            self.hidden_dim()
        } else {
            self.in_dim
        }
    }

    /// Every parameter of this adapter's variant. Image adapters carry the
    /// recurrent and attention tensors too but never read them.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let v = self.cfg.variant;
        let (c, h, p) = (self.in_dim, self.hidden_dim(), self.pooled_dim());
        let mut out = Vec::new();
        if v.has_conv() {
            out.push((self.name("conv.w"), (self.cfg.conv_kernel * c, c)));
            out.push((self.name("conv.b"), (1, c)));
        }
        if v.has_rnn() {
            for gate in ["z", "r", "n"] {
                out.push((self.name(&format!("gru.w{gate}")), (c, h)));
                out.push((self.name(&format!("gru.u{gate}")), (h, h)));
                out.push((self.name(&format!("gru.b{gate}")), (1, h)));
            }
        }
        if v.has_attention() {
            for m in ["wq", "wk", "wv"] {
                out.push((self.name(&format!("attn.{m}")), (h, h)));
            }
        }
        if v.has_dense() {
            let dh = self.cfg.dense_hidden();
            out.push((self.name("dense.l1.w"), (p, dh)));
            out.push((self.name("dense.l1.b"), (1, dh)));
            out.push((self.name("dense.l2.w"), (dh, p)));
            out.push((self.name("dense.l2.b"), (1, p)));
        }
        out.push((self.name("proj.w"), (p, self.cfg.d_model)));
        out.push((self.name("proj.b"), (1, self.cfg.d_model)));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().iter().map(|(_, (r, c))| r * c).sum()
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init_params(&self) -> ParamStore {
        let mut rng = stream(self.cfg.seed, &self.prefix);
        let mut store = ParamStore::new();
        for (name, (r, c)) in self.param_shapes() {
            let is_bias = name.ends_with(".b") || name.contains(".gru.b");
            let m = if is_bias { Matrix::zeros(r, c) } else { xavier(r, c, &mut rng) };
            store.insert(name, m);
        }
        store
    }

    /// Differentiable forward on a tape; dispatches on modality.
    pub fn forward(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        let (_, c) = g.value(emb).shape();
        if c != self.in_dim {
            return Err(Error::invalid(format!(
                "{} adapter expects {} features, got {c}",
                self.kind, self.in_dim
            )));
        }
        if g.value(emb).rows() == 0 {
            return Err(Error::invalid("empty embedding"));
        }
        let v = self.cfg.variant;
        let pooled = if self.kind.is_temporal() {
            let x = if v.has_conv() { self.conv(g, emb)? } else { emb };
            let x = if v.has_rnn() { self.gru(g, x)? } else { x };
            let x = if v.has_attention() { self.attend(g, x)? } else { x };
            g.mean_rows(x)
        } else {
            let x = if v.has_conv() { self.conv(g, emb)? } else { emb };
            g.mean_rows(x)
        };
        let x = if v.has_dense() { self.dense(g, pooled)? } else { pooled };
        g.linear(x, &self.name("proj"))
    }

    fn conv(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = self.cfg.conv_kernel;
        let cols = g.im2col(x, k, self.cfg.conv_stride, k / 2)?;
        g.linear(cols, &self.name("conv"))
    }

    /// Single-layer GRU from a zero state; returns all states `(L × h)`.
    fn gru(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let steps = g.value(x).rows();
        let h_dim = self.hidden_dim();
        let mut proj = Vec::with_capacity(3);
        for gate in ["z", "r", "n"] {
            let w = g.param(&self.name(&format!("gru.w{gate}")))?;
            let b = g.param(&self.name(&format!("gru.b{gate}")))?;
            let xw = g.matmul(x, w)?;
            proj.push(g.add_row(xw, b)?);
        }
        let uz = g.param(&self.name("gru.uz"))?;
        let ur = g.param(&self.name("gru.ur"))?;
        let un = g.param(&self.name("gru.un"))?;
        let mut h = g.constant(Matrix::zeros(1, h_dim));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xz = g.slice_rows(proj[0], t, 1)?;
            let xr = g.slice_rows(proj[1], t, 1)?;
            let xn = g.slice_rows(proj[2], t, 1)?;
            let hz = g.matmul(h, uz)?;
            let z = g.add(xz, hz)?;
            let z = g.sigmoid(z);
            let hr = g.matmul(h, ur)?;
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r);
            let rh = g.mul(r, h)?;
            let rhu = g.matmul(rh, un)?;
            let n = g.add(xn, rhu)?;
            let n = g.tanh(n);
            // h' = n + z ⊙ (h − n)
            let d = g.sub(h, n)?;
            let zd = g.mul(z, d)?;
            h = g.add(n, zd)?;
            states.push(h);
        }
        g.concat_rows(&states)
    }

    /// `Softmax(Q Kᵀ / √d) · V` with `Q, K, V = A·W_{Q,K,V}`.
    fn attend(&self, g: &mut Graph, a: Var) -> Result<Var> {
        let d = self.hidden_dim() as f64;
        let wq = g.param(&self.name("attn.wq"))?;
        let wk = g.param(&self.name("attn.wk"))?;
        let wv = g.param(&self.name("attn.wv"))?;
        let q = g.matmul(a, wq)?;
        let k = g.matmul(a, wk)?;
        let v = g.matmul(a, wv)?;
        let kt = g.transpose(k);
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / d.sqrt());
        let w = g.softmax(s, false);
        g.matmul(w, v)
    }

    fn dense(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.linear(x, &self.name("dense.l1"))?;
        let h = g.gelu(h);
        g.linear(h, &self.name("dense.l2"))
    }

    /// Attention weights for a recurrent-state matrix `a` (`L × d`).
    pub fn attention_weights(&self, params: &ParamStore, a: &Matrix) -> Result<Matrix> {
        attention_weights(
            a,
            params.require(&self.name("attn.wq"))?,
            params.require(&self.name("attn.wk"))?,
        )
    }

    fn run(&self, emb: &ModalityEmbedding, params: &ParamStore) -> Result<AdapterOutput> {
        if emb.kind != self.kind {
            return Err(Error::invalid(format!(
                "{} adapter given a {} embedding",
                self.kind, emb.kind
            )));
        }
        let mut g = Graph::with_params(params, TrainMask::Nothing);
        let x = g.input(&emb.data, false);
        let out = self.forward(&mut g, x)?;
        Ok(AdapterOutput {
            kind: self.kind,
            vector: g.value(out).data().to_vec(),
        })
    }
}

/// `Softmax(A·W_Q · (A·W_K)ᵀ / √d)` for `A` of shape `L × d`.
pub fn attention_weights(a: &Matrix, w_q: &Matrix, w_k: &Matrix) -> Result<Matrix> {
    let d = a.cols();
    if a.rows() == 0 {
        return Err(Error::invalid("attention over an empty sequence"));
    }
    if w_q.shape() != (d, d) || w_k.shape() != (d, d) {
        return Err(Error::invalid(format!(
            "attention weights must be {d}x{d}, got {:?} and {:?}",
            w_q.shape(),
            w_k.shape()
        )));
    }
    let q = a.matmul(w_q);
    let k = a.matmul(w_k);
    let s = q.matmul_t(&k).scale(1.0 / (d as f64).sqrt());
    Ok(softmax_rows(&s, false))
}

/// Music/video path.
pub fn adapt_temporal(
    emb: &ModalityEmbedding,
    params: &ParamStore,
    adapter: &Adapter,
) -> Result<AdapterOutput> {
    if !emb.kind.is_temporal() {
        return Err(Error::invalid(format!("{} is not a temporal modality", emb.kind)));
    }
    adapter.run(emb, params)
}

/// Image path: no recurrence, no attention.
pub fn adapt_static(
    emb: &ModalityEmbedding,
    params: &ParamStore,
    adapter: &Adapter,
) -> Result<AdapterOutput> {
    if emb.kind != Modality::Image {
        return Err(Error::invalid(format!("{} is not a static modality", emb.kind)));
    }
    adapter.run(emb, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Scale;

    fn emb(kind: Modality, rows: usize, cols: usize, seed: u64) -> ModalityEmbedding {
        let mut rng = stream(seed, "emb");
        ModalityEmbedding {
            kind,
            data: Matrix::uniform(rows, cols, 1.0, &mut rng),
            scale: Scale::Toy,
        }
    }

    fn toy_cfg(d_model: usize) -> AdapterConfig {
        AdapterConfig {
            d_model,
            ..AdapterConfig::default()
        }
    }

    #[test]
    fn single_row_attention_is_one() {
        let a = Matrix::from_rows(&[vec![0.3, -2.0]]).unwrap();
        let w = attention_weights(&a, &Matrix::identity(2), &Matrix::identity(2)).unwrap();
        assert_eq!(w.data(), &[1.0]);
    }

    #[test]
    fn identical_rows_give_identical_weights() {
        let mut rng = stream(5, "w");
        let a = Matrix::from_rows(&[vec![0.1, 0.7, -0.2], vec![0.1, 0.7, -0.2], vec![1.0, 0.0, 0.5]])
            .unwrap();
        let wq = Matrix::uniform(3, 3, 1.0, &mut rng);
        let wk = Matrix::uniform(3, 3, 1.0, &mut rng);
        let w = attention_weights(&a, &wq, &wk).unwrap();
        assert_eq!(w.row(0), w.row(1));
    }

    #[test]
    fn attention_dim_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(attention_weights(&a, &Matrix::identity(2), &Matrix::identity(2)).is_err());
    }

    #[test]
    fn toy_output_lengths() {
        let music = Adapter::new(Modality::Music, 8, toy_cfg(16)).unwrap();
        let p = music.init_params();
        let out = adapt_temporal(&emb(Modality::Music, 6, 8, 1), &p, &music).unwrap();
        assert_eq!(out.vector.len(), 16);
        let image = Adapter::new(Modality::Image, 8, toy_cfg(16)).unwrap();
        let p = image.init_params();
        let out = adapt_static(&emb(Modality::Image, 4, 8, 2), &p, &image).unwrap();
        assert_eq!(out.vector.len(), 16);
        assert!(out.vector.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn wrong_modality_is_rejected() {
        let music = Adapter::new(Modality::Music, 8, toy_cfg(16)).unwrap();
        let p = music.init_params();
        assert!(adapt_temporal(&emb(Modality::Image, 4, 8, 1), &p, &music).is_err());
        assert!(adapt_static(&emb(Modality::Music, 4, 8, 1), &p, &music).is_err());
    }

    #[test]
    fn zero_embedding_maps_to_zero() {
        let a = Adapter::new(Modality::Video, 8, toy_cfg(12)).unwrap();
        let p = a.init_params();
        let zero = ModalityEmbedding {
            kind: Modality::Video,
            data: Matrix::zeros(7, 8),
            scale: Scale::Toy,
        };
        let out = adapt_temporal(&zero, &p, &a).unwrap();
        assert!(out.vector.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn variants_are_nested_by_parameter_count() {
        let count = |v| {
            Adapter::new(
                Modality::Music,
                8,
                AdapterConfig {
                    variant: v,
                    ..toy_cfg(16)
                },
            )
            .unwrap()
            .num_params()
        };
        use AdapterVariant::*;
        let full = count(Full);
        assert!(count(ProjectionOnly) < count(Dense) && count(Dense) < full);
        assert!(count(ProjectionOnly) < count(Rnn));
        assert!(count(Rnn) < count(AttnRnn) && count(AttnRnn) < full);

        let names = |v| {
            Adapter::new(Modality::Music, 8, AdapterConfig { variant: v, ..toy_cfg(16) })
                .unwrap()
                .param_shapes()
                .into_iter()
                .map(|(n, _)| n)
                .collect::<std::collections::BTreeSet<_>>()
        };
        let all = names(Full);
        for v in [ProjectionOnly, Dense, Rnn, AttnRnn] {
            let sub = names(v);
            assert!(sub.is_subset(&all) && sub.len() < all.len(), "{v}");
        }
    }

    #[test]
    fn every_variant_runs_on_both_paths() {
        for v in AdapterVariant::ALL {
            let cfg = AdapterConfig { variant: v, ..toy_cfg(10) };
            for kind in Modality::ALL {
                let a = Adapter::new(kind, 6, cfg.clone()).unwrap();
                let p = a.init_params();
                let e = emb(kind, 5, 6, 3);
                let out = if kind.is_temporal() {
                    adapt_temporal(&e, &p, &a)
                } else {
                    adapt_static(&e, &p, &a)
                }
                .unwrap();
                assert_eq!(out.vector.len(), 10);
            }
        }
    }

    #[test]
    fn custom_rnn_width() {
        let cfg = AdapterConfig {
            rnn_hidden: Some(5),
            ..toy_cfg(7)
        };
        let a = Adapter::new(Modality::Music, 8, cfg).unwrap();
        let p = a.init_params();
        assert_eq!(p.get("adapter.music.attn.wq").unwrap().shape(), (5, 5));
        let out = adapt_temporal(&emb(Modality::Music, 9, 8, 4), &p, &a).unwrap();
        assert_eq!(out.vector.len(), 7);
    }
}
