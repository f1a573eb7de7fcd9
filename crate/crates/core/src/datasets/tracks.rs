//! Multi-track material: synthetic instruments and add/delete/replace pairs.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub instrument: String,
    pub samples: Vec<f64>,
}

/// Named mono tracks of equal length.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet {
    pub tracks: Vec<Track>,
    pub sample_rate: u32,
}

impl TrackSet {
    pub fn new(tracks: Vec<Track>, sample_rate: u32) -> Result<Self> {
        if tracks.len() < 2 {
            return Err(Error::invalid("a track set needs at least two tracks"));
        }
        let n = tracks[0].samples.len();
        if n == 0 || tracks.iter().any(|t| t.samples.len() != n) {
            return Err(Error::invalid("tracks must be non-empty and of equal length"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self { tracks, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.tracks[0].samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample-wise sum of the chosen tracks.
    pub fn mix(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for &i in idx {
            for (o, s) in out.iter_mut().zip(&self.tracks[i].samples) {
                *o += s;
            }
        }
        out
    }

    pub fn instruments(&self) -> Vec<String> {
        self.tracks.iter().map(|t| t.instrument.clone()).collect()
    }
}

/// Timbre recipe of a synthetic instrument.
struct Voice {
    name: &'static str,
    /// MIDI octave of the tonic.
    octave: i32,
    harmonics: &'static [f64],
    decay: f64,
    noise: f64,
}

const VOICES: [Voice; 8] = [
    Voice { name: "piano", octave: 4, harmonics: &[1.0, 0.5, 0.25, 0.12], decay: 4.0, noise: 0.0 },
    Voice { name: "bass", octave: 2, harmonics: &[1.0, 0.3], decay: 1.5, noise: 0.0 },
    Voice { name: "drums", octave: 1, harmonics: &[0.6], decay: 18.0, noise: 0.8 },
    Voice { name: "violin", octave: 5, harmonics: &[1.0, 0.7, 0.5, 0.35, 0.2], decay: 0.3, noise: 0.01 },
    Voice { name: "flute", octave: 5, harmonics: &[1.0, 0.1], decay: 0.2, noise: 0.02 },
    Voice { name: "guitar", octave: 3, harmonics: &[1.0, 0.6, 0.4, 0.2], decay: 3.0, noise: 0.0 },
    Voice { name: "organ", octave: 4, harmonics: &[1.0, 1.0, 0.6, 0.6], decay: 0.0, noise: 0.0 },
    Voice { name: "trumpet", octave: 4, harmonics: &[1.0, 0.8, 0.7, 0.5, 0.3], decay: 0.5, noise: 0.0 },
];

/// Names available to the synthetic generator.
pub fn instrument_names() -> Vec<&'static str> {
    VOICES.iter().map(|v| v.name).collect()
}

/// Scale degrees (semitones) of the major and natural-minor scales.
const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];

fn midi_hz(note: i32) -> f64 {
    440.0 * 2f64.powf((note - 69) as f64 / 12.0)
}

/// Musical facts behind a synthetic track set, used for captions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SongInfo {
    pub tonic: String,
    pub minor: bool,
    pub bpm: u32,
}

const NOTE_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];

/// Seeded multi-track song: every track plays random scale notes on a shared
/// beat grid. Peaks stay below 0.25 per track.
pub fn synthetic_trackset<R: Rng + ?Sized>(
    n_tracks: usize,
    seconds: f64,
    sample_rate: u32,
    rng: &mut R,
) -> Result<(TrackSet, SongInfo)> {
    if n_tracks < 2 || n_tracks > VOICES.len() {
        return Err(Error::invalid(format!("n_tracks must be in 2..={}", VOICES.len())));
    }
    if !(seconds > 0.0) {
        return Err(Error::invalid("duration must be > 0"));
    }
    let n = (seconds * sample_rate as f64).round() as usize;
    let tonic = rng.random_range(0..12);
    let minor = rng.random_bool(0.5);
    let bpm = rng.random_range(70..150u32);
    let scale = if minor { MINOR } else { MAJOR };
    let beat = (60.0 / bpm as f64 * sample_rate as f64) as usize;
    let mut voices: Vec<&Voice> = VOICES.iter().collect();
    voices.shuffle(rng);
    let tracks = voices[..n_tracks]
        .iter()
        .map(|v| {
            let mut s = vec![0.0; n];
            let mut start = 0;
            while start < n {
                let degree = scale[rng.random_range(0..scale.len())];
                let f0 = midi_hz(12 * (v.octave + 1) + tonic + degree);
                let len = beat.max(1) * rng.random_range(1..3usize);
                let amp = rng.random_range(0.5..1.0);
                for i in 0..len.min(n - start) {
                    let t = i as f64 / sample_rate as f64;
                    let env = (-v.decay * t).exp() * (1.0 - (-200.0 * t).exp());
                    let tone: f64 = v
                        .harmonics
                        .iter()
                        .enumerate()
                        .map(|(h, a)| a * (2.0 * PI * f0 * (h + 1) as f64 * t).sin())
                        .sum();
                    let noise = if v.noise > 0.0 { v.noise * rng.random_range(-1.0..1.0) } else { 0.0 };
                    s[start + i] = amp * env * (tone + noise);
                }
                start += len;
            }
            let peak = s.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if peak > 0.0 {
                s.iter_mut().for_each(|x| *x *= 0.24 / peak);
            }
            Track {
                instrument: v.name.to_string(),
                samples: s,
            }
        })
        .collect();
    let info = SongInfo {
        tonic: NOTE_NAMES[tonic as usize].to_string(),
        minor,
        bpm,
    };
    Ok((TrackSet::new(tracks, sample_rate)?, info))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdrMode {
    Add,
    Delete,
    Replace,
}

impl fmt::Display for AdrMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdrMode::Add => "add",
            AdrMode::Delete => "delete",
            AdrMode::Replace => "replace",
        })
    }
}

impl FromStr for AdrMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" => Ok(AdrMode::Add),
            "delete" => Ok(AdrMode::Delete),
            "replace" => Ok(AdrMode::Replace),
            _ => Err(Error::invalid(format!("unknown edit mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdrMeta {
    pub mode: AdrMode,
    pub input_tracks: Vec<usize>,
    pub target_tracks: Vec<usize>,
    /// Instrument added, kept, or replaced.
    pub instrument: String,
    /// Replacement instrument.
    pub new_instrument: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdrPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub meta: AdrMeta,
}

/// Build an edit pair from `ts`:
/// - add: one track in, that track mixed with another out;
/// - delete: the full mix in, one component track out;
/// - replace: track A in, track B of a different instrument out.
pub fn build_adr_pairs<R: Rng + ?Sized>(ts: &TrackSet, mode: AdrMode, rng: &mut R) -> Result<AdrPair> {
    let n = ts.tracks.len();
    if n < 2 {
        return Err(Error::invalid("edit pairs need at least two tracks"));
    }
    let name = |i: usize| ts.tracks[i].instrument.clone();
    let (input_tracks, target_tracks, instrument, new_instrument) = match mode {
        AdrMode::Add => {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            (vec![a], vec![a, b], name(b), None)
        }
        AdrMode::Delete => {
            let keep = rng.random_range(0..n);
            ((0..n).collect(), vec![keep], name(keep), None)
        }
        AdrMode::Replace => {
            let pairs: Vec<(usize, usize)> = (0..n)
                .flat_map(|a| (0..n).map(move |b| (a, b)))
                .filter(|&(a, b)| a != b && ts.tracks[a].instrument != ts.tracks[b].instrument)
                .collect();
            let &(a, b) = pairs
                .get(rng.random_range(0..pairs.len().max(1)))
                .ok_or_else(|| Error::invalid("replace needs two different instruments"))?;
            (vec![a], vec![b], name(a), Some(name(b)))
        }
    };
    Ok(AdrPair {
        input: ts.mix(&input_tracks),
        target: ts.mix(&target_tracks),
        meta: AdrMeta {
            mode,
            input_tracks,
            target_tracks,
            instrument,
            new_instrument,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn two(second: Vec<f64>) -> TrackSet {
        TrackSet::new(
            vec![
                Track {
                    instrument: "piano".into(),
                    samples: vec![0.1, -0.2, 0.3],
                },
                Track {
                    instrument: "bass".into(),
                    samples: second,
                },
            ],
            16000,
        )
        .unwrap()
    }

    #[test]
    fn delete_returns_a_stored_track() {
        let ts = two(vec![0.5, 0.5, -0.5]);
        let p = build_adr_pairs(&ts, AdrMode::Delete, &mut stream(0, "d")).unwrap();
        assert!(ts.tracks.iter().any(|t| t.samples == p.target));
        assert_eq!(p.input, ts.mix(&[0, 1]));
    }

    #[test]
    fn add_with_silence_is_identity() {
        let ts = two(vec![0.0; 3]);
        for seed in 0..8 {
            let p = build_adr_pairs(&ts, AdrMode::Add, &mut stream(seed, "a")).unwrap();
            if p.meta.input_tracks == [0] {
                assert_eq!(p.target, p.input);
            }
        }
    }

    #[test]
    fn replace_same_instrument_fails() {
        let mut ts = two(vec![0.0; 3]);
        ts.tracks[1].instrument = "piano".into();
        assert!(build_adr_pairs(&ts, AdrMode::Replace, &mut stream(0, "r")).is_err());
    }

    #[test]
    fn synthetic_set_is_seeded_and_bounded() {
        let (a, ia) = synthetic_trackset(3, 0.5, 16000, &mut stream(4, "s")).unwrap();
        let (b, ib) = synthetic_trackset(3, 0.5, 16000, &mut stream(4, "s")).unwrap();
        assert_eq!(a, b);
        assert_eq!(ia, ib);
        assert_eq!(a.len(), 8000);
        for t in &a.tracks {
            assert!(t.samples.iter().all(|x| x.abs() <= 0.2400001));
        }
        assert!(TrackSet::new(vec![a.tracks[0].clone()], 16000).is_err());
    }
}
