//! Evaluation metrics: CLAP score, LSD, FAD, KL, IB rank, and the text
//! metrics in [`text`]. Embedders and classifiers are pluggable; [`toy`]
//! holds seeded stand-ins.

pub mod text;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Waveform;

pub use text::{bleu, rouge_l, text_metrics, Bleu, RougeL, TextMetric, TextScores};
pub use toy::{AudioClassifier, AudioEmbedder, TextEmbedder, ToyAudioClassifier, ToyAudioEmbedder, ToyTextEmbedder, ToyVisualEmbedder, VisualEmbedder};

/// STFT settings shared by LSD and the stand-in embedders.
pub const STFT_SIZE: usize = 1024;
pub const STFT_HOP: usize = 256;
/// Power and probability floor.
pub const FLOOR: f64 = 1e-10;

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::invalid(format!("vector dims {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 || !(na * nb).is_finite() {
        return Err(Error::invalid("cosine of a zero or non-finite vector"));
    }
    Ok(dot / (na * nb).sqrt())
}

/// `max(100 · cos(E_M, E_T), 0)`.
pub fn clap_score(music: &[f64], text: &[f64]) -> Result<f64> {
    Ok((100.0 * cosine(music, text)?.min(1.0)).max(0.0))
}

/// Periodic Hann window.
pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Power spectra (`n/2 + 1` bins) of Hann-windowed frames. Only full frames
/// are used; a signal shorter than one frame gives one zero-padded frame.
pub fn stft_power(x: &[f64], n: usize, hop: usize) -> Vec<Vec<f64>> {
    let win = hann_periodic(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let starts: Vec<usize> = if x.len() <= n { vec![0] } else { (0..=x.len() - n).step_by(hop).collect() };
    starts
        .into_iter()
        .map(|s| {
            let mut buf: Vec<Complex<f64>> = (0..n)
                .map(|i| Complex::new(x.get(s + i).copied().unwrap_or(0.0) * win[i], 0.0))
                .collect();
            fft.process(&mut buf);
            buf[..n / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
        })
        .collect()
}

/// Log spectral distance; unequal lengths are truncated to the shorter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lsd {
    pub value: f64,
    pub truncated: bool,
}

pub fn lsd(a: &Waveform, b: &Waveform) -> Result<Lsd> {
    if a.samples.is_empty() || b.samples.is_empty() {
        return Err(Error::invalid("LSD of an empty waveform"));
    }
    if a.sample_rate != b.sample_rate {
        return Err(Error::invalid("LSD inputs differ in sample rate"));
    }
    let n = a.samples.len().min(b.samples.len());
    let pa = stft_power(&a.samples[..n], STFT_SIZE, STFT_HOP);
    let pb = stft_power(&b.samples[..n], STFT_SIZE, STFT_HOP);
    let per_frame: Vec<f64> = pa
        .iter()
        .zip(&pb)
        .map(|(fa, fb)| {
            let ms = fa
                .iter()
                .zip(fb)
                .map(|(x, y)| (x.max(FLOOR).log10() - y.max(FLOOR).log10()).powi(2))
                .sum::<f64>()
                / fa.len() as f64;
            ms.sqrt()
        })
        .collect();
    Ok(Lsd {
        value: per_frame.iter().sum::<f64>() / per_frame.len() as f64,
        truncated: a.samples.len() != b.samples.len(),
    })
}

/// Row-per-sample embeddings from one source.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub rows: Vec<Vec<f64>>,
    pub source: String,
}

impl EmbeddingSet {
    pub fn new(rows: Vec<Vec<f64>>, source: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::invalid("embedding set is empty"));
        }
        if rows.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("embedding rows must be finite and of equal dim"));
        }
        Ok(Self {
            rows,
            source: source.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean and unbiased covariance.
    fn gaussian(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.len(), self.dim());
        let mut mu = DVector::zeros(d);
        for r in &self.rows {
            mu += DVector::from_column_slice(r);
        }
        mu /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in &self.rows {
            let c = DVector::from_column_slice(r) - &mu;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        (mu, cov)
    }
}

/// Square root of a symmetric PSD matrix, negative eigenvalues clipped.
fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits. `tr((Σ_r Σ_g)^{1/2})` is computed
/// as `tr((S Σ_g S)^{1/2})` with `S = Σ_r^{1/2}`, which keeps the argument
/// symmetric.
pub fn fad(reference: &EmbeddingSet, generated: &EmbeddingSet) -> Result<f64> {
    if reference.dim() != generated.dim() {
        return Err(Error::invalid(format!(
            "embedding dims {} and {}",
            reference.dim(),
            generated.dim()
        )));
    }
    if reference.len() < 2 || generated.len() < 2 {
        return Err(Error::invalid("FAD needs at least two embeddings per set"));
    }
    let (mr, cr) = reference.gaussian();
    let (mg, cg) = generated.gaussian();
    let s = sqrt_psd(cr.clone());
    let inner = &s * &cg * &s;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term = (&mr - &mg).norm_squared();
    Ok((mean_term + cr.trace() + cg.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// `Σ p ln(p/q)` with both distributions floored at [`FLOOR`].
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid("KL inputs differ in length"));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(FLOOR), b.max(FLOOR));
            a * (a / b).ln()
        })
        .sum())
}

/// Mean of `KL(p_ref ‖ p_gen)` over paired waves.
pub fn kl_metric(reference: &[Waveform], generated: &[Waveform], classifier: &dyn AudioClassifier) -> Result<f64> {
    if reference.len() != generated.len() || reference.is_empty() {
        return Err(Error::invalid(format!(
            "KL needs paired lists, got {} and {}",
            reference.len(),
            generated.len()
        )));
    }
    let mut total = 0.0;
    for (r, g) in reference.iter().zip(generated) {
        total += kl_divergence(&classifier.probabilities(r)?, &classifier.probabilities(g)?)?;
    }
    Ok(total / reference.len() as f64)
}

/// Ranks (1 = best) of `n_models` systems on each evaluation sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankingTable {
    rows: Vec<Vec<usize>>,
    n_models: usize,
}

impl RankingTable {
    pub fn new(rows: Vec<Vec<usize>>) -> Result<Self> {
        let n = rows.first().map(Vec::len).unwrap_or(0);
        if n < 2 {
            return Err(Error::invalid("ranking needs at least two models"));
        }
        for r in &rows {
            let mut s = r.clone();
            s.sort_unstable();
            if s != (1..=n).collect::<Vec<_>>() {
                return Err(Error::invalid(format!("ranks {r:?} are not a permutation of 1..={n}")));
            }
        }
        Ok(Self { rows, n_models: n })
    }

    /// Rank candidates by cosine similarity to `anchor`, highest first; ties
    /// go to the lower index.
    pub fn from_similarities(anchors: &[Vec<f64>], candidates: &[Vec<Vec<f64>>]) -> Result<Self> {
        if anchors.len() != candidates.len() {
            return Err(Error::invalid("one candidate list per anchor"));
        }
        let rows = anchors
            .iter()
            .zip(candidates)
            .map(|(a, cands)| {
                let sims = cands.iter().map(|c| cosine(a, c)).collect::<Result<Vec<_>>>()?;
                let mut order: Vec<usize> = (0..sims.len()).collect();
                order.sort_by(|&i, &j| sims[j].total_cmp(&sims[i]).then(i.cmp(&j)));
                let mut ranks = vec![0; sims.len()];
                for (pos, &m) in order.iter().enumerate() {
                    ranks[m] = pos + 1;
                }
                Ok(ranks)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows)
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Integer numerators `Σ_samples (N − rank)` per model.
    pub fn numerators(&self) -> Vec<usize> {
        (0..self.n_models)
            .map(|m| self.rows.iter().map(|r| self.n_models - r[m]).sum())
            .collect()
    }
}

/// Per-model score: mean over samples of `(N − rank)/(N − 1)`.
pub fn ib_rank(table: &RankingTable) -> Result<Vec<f64>> {
    if table.rows.is_empty() {
        return Err(Error::invalid("ranking table has no samples"));
    }
    let den = (table.rows.len() * (table.n_models - 1)) as f64;
    Ok(table.numerators().into_iter().map(|k| k as f64 / den).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Music understanding (captioning / question answering).
    Mu,
    T2m,
    Edit,
    I2m,
    V2m,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Mu, Task::T2m, Task::Edit, Task::I2m, Task::V2m];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mu => "mu",
            Task::T2m => "t2m",
            Task::Edit => "edit",
            Task::I2m => "i2m",
            Task::V2m => "v2m",
        }
    }

    /// Report keys for the task.
    pub fn metric_keys(self) -> &'static [&'static str] {
        match self {
            Task::Mu => &["bleu", "rouge_l"],
            Task::T2m => &["fad", "kl", "clap"],
            Task::Edit => &["fad", "kl", "lsd"],
            Task::I2m | Task::V2m => &["fad", "kl", "ib_rank"],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub metrics: BTreeMap<String, f64>,
    pub count: usize,
    /// Settings and caveats needed to interpret the values.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn new(task: Task, metrics: BTreeMap<String, f64>, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::invalid("metric report over zero samples"));
        }
        if let Some((k, v)) = metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!("metric {k} is {v}")));
        }
        Ok(Self {
            task,
            metrics,
            count,
            notes: BTreeMap::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clap_endpoints() {
        let x = [0.3, -1.2, 2.0];
        assert_eq!(clap_score(&x, &x).unwrap(), 100.0);
        assert_eq!(clap_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(clap_score(&x, &[-0.3, 1.2, -2.0]).unwrap(), 0.0);
        let half = clap_score(&[1.0, 0.0], &[0.5, 3f64.sqrt() / 2.0]).unwrap();
        assert!((half - 50.0).abs() < 1e-12);
        assert!(clap_score(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn lsd_identity_and_errors() {
        let w = Waveform::new((0..4000).map(|i| (i as f64 * 0.03).sin()).collect(), 16000);
        assert_eq!(lsd(&w, &w).unwrap().value, 0.0);
        assert!(lsd(&w, &Waveform::new(vec![], 16000)).is_err());
        let short = Waveform::new(w.samples[..3000].to_vec(), 16000);
        assert!(lsd(&w, &short).unwrap().truncated);
    }

    #[test]
    fn fad_scalar_case() {
        let r = EmbeddingSet::new(vec![vec![0.0], vec![2.0]], "r").unwrap();
        let g = EmbeddingSet::new(vec![vec![3.0], vec![7.0]], "g").unwrap();
        // means 1, 5; unbiased sd √2, √8
        let want = 16.0 + (2f64.sqrt() - 8f64.sqrt()).powi(2);
        assert!((fad(&r, &g).unwrap() - want).abs() < 1e-9);
        assert!(fad(&r, &EmbeddingSet::new(vec![vec![1.0, 2.0]; 2], "x").unwrap()).is_err());
    }

    #[test]
    fn kl_floor_case() {
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-8);
    }

    #[test]
    fn ib_rank_cases() {
        let t = RankingTable::new(vec![vec![1, 2], vec![1, 2]]).unwrap();
        assert_eq!(ib_rank(&t).unwrap(), vec![1.0, 0.0]);
        let t = RankingTable::new(vec![vec![1, 2, 3], vec![2, 3, 1], vec![3, 1, 2]]).unwrap();
        assert_eq!(ib_rank(&t).unwrap()[0], 0.5);
        assert!(RankingTable::new(vec![vec![1]]).is_err());
        assert!(RankingTable::new(vec![vec![1, 1]]).is_err());
    }

    #[test]
    fn ranks_from_similarity() {
        let t = RankingTable::from_similarities(&[vec![1.0, 0.0]], &[vec![vec![0.0, 1.0], vec![1.0, 0.1]]]).unwrap();
        assert_eq!(t.rows(), &[vec![2, 1]]);
    }

    #[test]
    fn task_keys() {
        assert_eq!(Task::Edit.metric_keys(), &["fad", "kl", "lsd"]);
        assert!("bogus".parse::<Task>().is_err());
        let mut m = BTreeMap::new();
        m.insert("fad".to_string(), f64::NAN);
        assert!(MetricReport::new(Task::T2m, m, 1).is_err());
    }
}
