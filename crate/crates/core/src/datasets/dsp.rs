//! WSOLA time stretching, resample-and-stretch pitch shifting, and an FFT
//! peak finder.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::media::Waveform;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WsolaParams {
    pub frame: usize,
    /// Synthesis hop.
    pub hop: usize,
    /// Maximum shift of each analysis frame, in samples, either way.
    pub tolerance: usize,
}

impl Default for WsolaParams {
    fn default() -> Self {
        Self {
            frame: 512,
            hop: 256,
            tolerance: 128,
        }
    }
}

/// Hann window sampled at half-integer points, strictly positive.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * (i as f64 + 0.5) / n as f64).cos())
        .collect()
}

fn sample(x: &[f64], i: isize) -> f64 {
    if i < 0 {
        0.0
    } else {
        x.get(i as usize).copied().unwrap_or(0.0)
    }
}

/// Normalized cross-correlation of `x[a..a+n]` and `x[b..b+n]`.
fn ncc(x: &[f64], a: isize, b: isize, n: usize) -> f64 {
    let (mut xy, mut xx, mut yy) = (0.0, 0.0, 0.0);
    for i in 0..n as isize {
        let u = sample(x, a + i);
        let v = sample(x, b + i);
        xy += u * v;
        xx += u * u;
        yy += v * v;
    }
    let d = (xx * yy).sqrt();
    if d < 1e-12 {
        0.0
    } else {
        xy / d
    }
}

/// Stretch `x` to exactly `out_len` samples without changing pitch.
pub fn wsola_to_length(x: &[f64], out_len: usize, p: WsolaParams) -> Result<Vec<f64>> {
    if p.hop == 0 || p.frame < p.hop {
        return Err(Error::invalid("WSOLA needs 0 < hop <= frame"));
    }
    if x.len() < 2 * p.frame {
        return Err(Error::invalid(format!(
            "waveform of {} samples is shorter than two frames",
            x.len()
        )));
    }
    if out_len == 0 {
        return Err(Error::invalid("WSOLA output length must be positive"));
    }
    let win = hann(p.frame);
    let analysis_hop = p.hop as f64 * x.len() as f64 / out_len as f64;
    let overlap = p.frame - p.hop;
    let tol = p.tolerance as isize;
    let mut out = vec![0.0; out_len + p.frame];
    let mut norm = vec![0.0; out_len + p.frame];
    let mut prev: isize = 0;
    let mut k = 0usize;
    while k * p.hop < out_len {
        let nominal = (k as f64 * analysis_hop).round() as isize;
        let pos = if k == 0 {
            0
        } else {
            let natural = prev + p.hop as isize;
            let mut best = nominal;
            let mut best_score = f64::NEG_INFINITY;
            for d in -tol..=tol {
                let cand = nominal + d;
                if cand < 0 {
                    continue;
                }
                let score = ncc(x, cand, natural, overlap.max(1));
                if score > best_score {
                    best_score = score;
                    best = cand;
                }
            }
            best
        };
        let at = k * p.hop;
        for i in 0..p.frame {
            out[at + i] += win[i] * sample(x, pos + i as isize);
            norm[at + i] += win[i];
        }
        prev = pos;
        k += 1;
    }
    out.truncate(out_len);
    for (o, &w) in out.iter_mut().zip(&norm) {
        if w > 1e-9 {
            *o /= w;
        }
    }
    Ok(out)
}

/// Change duration by `duration_factor` (output length
/// `round(len · factor)`), keeping pitch.
pub fn wsola_stretch(wave: &Waveform, duration_factor: f64) -> Result<Waveform> {
    if !(duration_factor > 0.0) || !duration_factor.is_finite() {
        return Err(Error::invalid("duration factor must be > 0"));
    }
    let out_len = (wave.samples.len() as f64 * duration_factor).round() as usize;
    let samples = wsola_to_length(&wave.samples, out_len, WsolaParams::default())?;
    Ok(Waveform::new(samples, wave.sample_rate))
}

/// Linear-interpolation resample to `out_len` samples spanning the input.
pub fn resample_linear(x: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || out_len == 0 {
        return Vec::new();
    }
    let ratio = x.len() as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let t = i as f64 * ratio;
            let j = t.floor() as usize;
            let f = t - j as f64;
            let a = x[j.min(x.len() - 1)];
            let b = x[(j + 1).min(x.len() - 1)];
            a + f * (b - a)
        })
        .collect()
}

/// Shift pitch by `cents`, keeping duration: resample by `2^(−cents/1200)`,
/// then WSOLA back to the original length.
pub fn pitch_shift(wave: &Waveform, cents: f64) -> Result<Waveform> {
    if !cents.is_finite() {
        return Err(Error::invalid("cents must be finite"));
    }
    let len = wave.samples.len();
    let ratio = 2f64.powf(-cents / 1200.0);
    let mid_len = ((len as f64 * ratio).round() as usize).max(1);
    let resampled = resample_linear(&wave.samples, mid_len);
    let samples = wsola_to_length(&resampled, len, WsolaParams::default())?;
    Ok(Waveform::new(samples, wave.sample_rate))
}

/// Magnitude spectrum of `x` (first `n/2 + 1` bins).
pub fn magnitude_spectrum(x: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.iter().take(x.len() / 2 + 1).map(|c| c.norm()).collect()
}

/// Frequency (Hz) of the largest non-DC FFT bin, refined by parabolic
/// interpolation of log magnitudes.
pub fn dominant_frequency(x: &[f64], sample_rate: u32) -> f64 {
    if x.len() < 4 {
        return 0.0;
    }
    let mag = magnitude_spectrum(x);
    let (k, _) = mag
        .iter()
        .enumerate()
        .skip(1)
        .fold((1, f64::NEG_INFINITY), |b, (i, &m)| if m > b.1 { (i, m) } else { b });
    let mut offset = 0.0;
    if k + 1 < mag.len() {
        let (a, b, c) = (
            mag[k - 1].max(1e-300).ln(),
            mag[k].max(1e-300).ln(),
            mag[k + 1].max(1e-300).ln(),
        );
        let den = a - 2.0 * b + c;
        if den.abs() > 1e-12 {
            offset = 0.5 * (a - c) / den;
        }
    }
    (k as f64 + offset) * sample_rate as f64 / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, n: usize) -> Waveform {
        let sr = 16000;
        Waveform::new(
            (0..n)
                .map(|i| 0.5 * (2.0 * PI * freq * i as f64 / sr as f64).sin())
                .collect(),
            sr,
        )
    }

    #[test]
    fn identity_factor_reproduces_input() {
        let w = tone(440.0, 16000);
        let out = wsola_stretch(&w, 1.0).unwrap();
        assert_eq!(out.samples.len(), w.samples.len());
        let diff = out
            .samples
            .iter()
            .zip(&w.samples)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-9, "{diff}");
    }

    #[test]
    fn bad_factor_and_short_input() {
        let w = tone(440.0, 16000);
        assert!(wsola_stretch(&w, 0.0).is_err());
        assert!(wsola_stretch(&w, -1.0).is_err());
        assert!(wsola_stretch(&tone(440.0, 1000), 1.5).is_err());
    }

    #[test]
    fn dominant_frequency_of_tone() {
        let f = dominant_frequency(&tone(440.0, 16000).samples, 16000);
        assert!((f - 440.0).abs() < 0.5, "{f}");
    }

    #[test]
    fn resample_endpoints() {
        let x = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(resample_linear(&x, 8), vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.0]);
    }
}
