//! Seeded stand-in embedders and classifier: random projections of
//! log band energies (audio), hashed words (text), and colour statistics
//! (images and videos).

use rand::Rng;

use super::{stft_power, STFT_HOP, STFT_SIZE};
use crate::encoders::{Payload, RawModalityInput};
use crate::error::{Error, Result};
use crate::media::{ImageTensor, Waveform};
use crate::rng::stream;
use crate::tensor::Matrix;

pub trait AudioEmbedder {
    fn embed(&self, wave: &Waveform) -> Result<Vec<f64>>;
}

pub trait AudioClassifier {
    /// A probability vector.
    fn probabilities(&self, wave: &Waveform) -> Result<Vec<f64>>;
}

pub trait TextEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

pub trait VisualEmbedder {
    fn embed_visual(&self, input: &RawModalityInput) -> Result<Vec<f64>>;
}

pub const N_BANDS: usize = 16;

/// `log10` of mean power in `N_BANDS` log-spaced bands between bin 1 and
/// Nyquist, averaged over STFT frames.
pub fn band_energies(wave: &Waveform) -> Result<Vec<f64>> {
    if wave.samples.is_empty() {
        return Err(Error::invalid("band energies of an empty waveform"));
    }
    let frames = stft_power(&wave.samples, STFT_SIZE, STFT_HOP);
    let bins = STFT_SIZE / 2 + 1;
    let mut mean = vec![0.0; bins];
    for f in &frames {
        for (m, p) in mean.iter_mut().zip(f) {
            *m += p / frames.len() as f64;
        }
    }
    let edge = |b: usize| ((bins - 1) as f64).powf(b as f64 / N_BANDS as f64).round() as usize;
    Ok((0..N_BANDS)
        .map(|b| {
            let (lo, hi) = (edge(b).max(1), edge(b + 1).max(edge(b).max(1) + 1).min(bins));
            let e = mean[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
            (e + super::FLOOR).log10()
        })
        .collect())
}

fn projection(seed: u64, label: &str, rows: usize, cols: usize) -> Matrix {
    Matrix::uniform(rows, cols, (3.0 / rows as f64).sqrt(), &mut stream(seed, label))
}

fn project(x: &[f64], w: &Matrix) -> Vec<f64> {
    Matrix::row_vector(x.to_vec()).matmul(w).into_vec()
}

pub struct ToyAudioEmbedder {
    w: Matrix,
}

impl ToyAudioEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            w: projection(seed, "toy-audio-embed", N_BANDS, dim),
        }
    }
}

impl AudioEmbedder for ToyAudioEmbedder {
    fn embed(&self, wave: &Waveform) -> Result<Vec<f64>> {
        Ok(project(&band_energies(wave)?, &self.w))
    }
}

pub struct ToyAudioClassifier {
    w: Matrix,
}

impl ToyAudioClassifier {
    pub fn new(n_classes: usize, seed: u64) -> Self {
        Self {
            w: projection(seed, "toy-audio-classes", N_BANDS, n_classes),
        }
    }
}

impl AudioClassifier for ToyAudioClassifier {
    fn probabilities(&self, wave: &Waveform) -> Result<Vec<f64>> {
        let z = project(&band_energies(wave)?, &self.w);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / s).collect())
    }
}

/// Sum of per-word seeded random vectors.
pub struct ToyTextEmbedder {
    dim: usize,
    seed: u64,
}

impl ToyTextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEmbedder for ToyTextEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let words = super::text::tokenize(text);
        if words.is_empty() {
            return Err(Error::invalid("cannot embed empty text"));
        }
        let mut out = vec![0.0; self.dim];
        for w in words {
            let mut rng = stream(self.seed, &format!("toy-word:{w}"));
            for o in out.iter_mut() {
                *o += rng.random_range(-1.0..1.0);
            }
        }
        Ok(out)
    }
}

pub struct ToyVisualEmbedder {
    w: Matrix,
}

/// Per-channel mean and standard deviation, and mean luminance of each
/// image quadrant.
const VISUAL_FEATURES: usize = 10;

fn image_stats(img: &ImageTensor) -> Vec<f64> {
    let n = (img.height * img.width) as f64;
    let mut f = vec![0.0; VISUAL_FEATURES];
    for c in 0..3 {
        let vals = img.data.iter().skip(c).step_by(3);
        let mean = vals.clone().sum::<f64>() / n;
        let var = vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        f[c] = mean;
        f[3 + c] = var.sqrt();
    }
    let mut counts = [0.0; 4];
    for y in 0..img.height {
        for x in 0..img.width {
            let q = 2 * usize::from(2 * y >= img.height) + usize::from(2 * x >= img.width);
            f[6 + q] += (img.at(y, x, 0) + img.at(y, x, 1) + img.at(y, x, 2)) / 3.0;
            counts[q] += 1.0;
        }
    }
    for q in 0..4 {
        if counts[q] > 0.0 {
            f[6 + q] /= counts[q];
        }
    }
    f
}

impl ToyVisualEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            w: projection(seed, "toy-visual-embed", VISUAL_FEATURES, dim),
        }
    }
}

impl VisualEmbedder for ToyVisualEmbedder {
    fn embed_visual(&self, input: &RawModalityInput) -> Result<Vec<f64>> {
        let stats = match &input.payload {
            Payload::Image(img) => image_stats(img),
            Payload::Video(v) => {
                let mut acc = vec![0.0; VISUAL_FEATURES];
                for fr in &v.frames {
                    for (a, s) in acc.iter_mut().zip(image_stats(fr)) {
                        *a += s / v.frames.len() as f64;
                    }
                }
                acc
            }
            Payload::Waveform(_) => return Err(Error::invalid("visual embedder given audio")),
        };
        Ok(project(&stats, &self.w))
    }
}
