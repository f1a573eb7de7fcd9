//! Record builders for the four dataset kinds, from synthetic material or a
//! source directory, plus template-based captioners.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dsp::{dominant_frequency, pitch_shift, wsola_stretch};
use super::templates::{pitch_interval, speed_degree, Subtype, TemplatePool};
use super::tracks::{build_adr_pairs, synthetic_trackset, AdrMeta, AdrMode, SongInfo, Track, TrackSet};
use super::{DatasetKind, DatasetRecord, MediaSink, PITCH_CENTS, SPEED_FACTORS};
use crate::error::{Error, Result};
use crate::fusion::audio_suffix;
use crate::media::{ImageTensor, VideoTensor, Waveform, DEFAULT_SAMPLE_RATE};
use crate::rng::{derive_seed, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    /// Records per dataset kind.
    pub count: usize,
    pub seed: u64,
    pub n_audio_tokens: usize,
    pub sample_rate: u32,
    pub clip_seconds: f64,
    pub image_size: usize,
    pub video_frames: usize,
    pub video_size: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            count: 20,
            seed: 0,
            n_audio_tokens: 8,
            sample_rate: DEFAULT_SAMPLE_RATE,
            clip_seconds: 2.0,
            image_size: 32,
            video_frames: 4,
            video_size: 16,
        }
    }
}

/// Material and slot values for one record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RecordSource {
    pub input_media: Option<String>,
    pub target_audio: Option<String>,
    pub slots: BTreeMap<String, String>,
}

/// Fill one record per source from `pool`. Music-emitting subtypes get the
/// audio-token suffix appended to the response.
pub fn build_records<R: Rng + ?Sized>(
    sources: &[RecordSource],
    subtype: Subtype,
    pool: &TemplatePool,
    n_audio_tokens: usize,
    rng: &mut R,
) -> Result<Vec<DatasetRecord>> {
    if pool.subtype != subtype {
        return Err(Error::invalid(format!("{} pool used for {subtype} records", pool.subtype)));
    }
    let dataset = DatasetKind::of_subtype(subtype);
    let emits_music = subtype != Subtype::Caption;
    sources
        .iter()
        .map(|src| {
            let (instruction, mut response) = pool.sample(&src.slots, rng)?;
            if emits_music {
                response = format!("{response} {}", audio_suffix(n_audio_tokens));
            }
            let rec = DatasetRecord {
                dataset,
                instruction,
                response,
                input_media: src.input_media.clone(),
                target_audio: src.target_audio.clone(),
                emits_music,
            };
            rec.validate(n_audio_tokens)?;
            Ok(rec)
        })
        .collect()
}

/// Parameters of an edit, sufficient to regenerate its audio pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "edit", rename_all = "lowercase")]
pub enum EditSpec {
    Speed { factor: f64 },
    Pitch { cents: i32 },
    Tracks(AdrMeta),
}

/// Sidecar metadata written next to each record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub file_id: String,
    pub seed: u64,
    pub dataset: DatasetKind,
    pub subtype: Subtype,
    /// Source file or folder relative to the source directory; `None` for
    /// synthetic material.
    pub source: Option<String>,
    pub edit: Option<EditSpec>,
}

/// User-supplied material: top-level `*.wav` clips, top-level `*.png`
/// images and `*.npy` videos, and sub-folders of per-instrument `*.wav`
/// tracks (the file stem names the instrument).
#[derive(Clone, Debug, Default)]
pub struct SourceDir {
    pub root: PathBuf,
    pub clips: Vec<String>,
    pub images: Vec<String>,
    pub videos: Vec<String>,
    pub track_sets: Vec<String>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

fn ext_of(p: &Path) -> String {
    p.extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase()
}

fn rel_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

impl SourceDir {
    pub fn scan(root: &Path) -> Result<Self> {
        let mut s = SourceDir {
            root: root.to_path_buf(),
            ..Default::default()
        };
        for p in sorted_entries(root)? {
            if p.is_dir() {
                let wavs = sorted_entries(&p)?.into_iter().filter(|q| ext_of(q) == "wav").count();
                if wavs >= 2 {
                    s.track_sets.push(rel_name(&p));
                }
                continue;
            }
            match ext_of(&p).as_str() {
                "wav" => s.clips.push(rel_name(&p)),
                "png" => s.images.push(rel_name(&p)),
                "npy" => s.videos.push(rel_name(&p)),
                _ => {}
            }
        }
        Ok(s)
    }

    fn load_tracks(&self, rel: &str) -> Result<TrackSet> {
        let dir = self.root.join(rel);
        let mut tracks = Vec::new();
        let mut rate = None;
        for p in sorted_entries(&dir)?.into_iter().filter(|q| ext_of(q) == "wav") {
            let w = Waveform::read_wav(&p)?;
            if *rate.get_or_insert(w.sample_rate) != w.sample_rate {
                return Err(Error::format(&p, "tracks differ in sample rate"));
            }
            tracks.push(Track {
                instrument: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                samples: w.samples,
            });
        }
        TrackSet::new(tracks, rate.unwrap_or(DEFAULT_SAMPLE_RATE)).map_err(|e| Error::format(&dir, e))
    }
}

/// Audio an edit starts from.
enum Material {
    Tracks(TrackSet),
    Clip(Waveform),
}

impl Material {
    fn mixdown(&self) -> Waveform {
        match self {
            Material::Tracks(ts) => Waveform::new(ts.mix(&(0..ts.tracks.len()).collect::<Vec<_>>()), ts.sample_rate),
            Material::Clip(w) => w.clone(),
        }
    }
}

fn synthetic_song(seed: u64, cfg: &BuildConfig) -> Result<(TrackSet, SongInfo)> {
    let mut rng = stream(seed, "song");
    let n = rng.random_range(2..=3);
    synthetic_trackset(n, cfg.clip_seconds, cfg.sample_rate, &mut rng)
}

fn material(source: Option<&str>, seed: u64, cfg: &BuildConfig, dir: Option<&SourceDir>) -> Result<Material> {
    match (source, dir) {
        (None, _) => Ok(Material::Tracks(synthetic_song(seed, cfg)?.0)),
        (Some(rel), Some(d)) => {
            let path = d.root.join(rel);
            if path.is_dir() {
                Ok(Material::Tracks(d.load_tracks(rel)?))
            } else {
                Ok(Material::Clip(Waveform::read_wav(&path)?))
            }
        }
        (Some(rel), None) => Err(Error::invalid(format!("record refers to source {rel:?} but no source directory was given"))),
    }
}

fn realize(spec: &EditSpec, m: &Material) -> Result<(Waveform, Waveform)> {
    match spec {
        EditSpec::Speed { factor } => {
            let input = m.mixdown();
            let target = wsola_stretch(&input, *factor)?;
            Ok((input, target))
        }
        EditSpec::Pitch { cents } => {
            let input = m.mixdown();
            let target = pitch_shift(&input, *cents as f64)?;
            Ok((input, target))
        }
        EditSpec::Tracks(meta) => {
            let Material::Tracks(ts) = m else {
                return Err(Error::invalid("track edits need multi-track material"));
            };
            if meta.input_tracks.iter().chain(&meta.target_tracks).any(|&i| i >= ts.tracks.len()) {
                return Err(Error::invalid("edit metadata refers to a missing track"));
            }
            Ok((
                Waveform::new(ts.mix(&meta.input_tracks), ts.sample_rate),
                Waveform::new(ts.mix(&meta.target_tracks), ts.sample_rate),
            ))
        }
    }
}

/// Rebuild the `(input, target)` audio of an edit record from its metadata.
pub fn regenerate_edit(meta: &RecordMeta, cfg: &BuildConfig, dir: Option<&SourceDir>) -> Result<(Waveform, Waveform)> {
    let spec = meta
        .edit
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{} is not an edit record", meta.file_id)))?;
    let m = material(meta.source.as_deref(), meta.seed, cfg, dir)?;
    realize(spec, &m)
}

fn join_names(names: &[String]) -> String {
    match names {
        [] => String::new(),
        [a] => a.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

/// Caption of a synthetic song.
pub fn caption_song(info: &SongInfo, instruments: &[String]) -> String {
    let tempo = match info.bpm {
        0..=89 => "slow",
        90..=119 => "moderate",
        _ => "upbeat",
    };
    let (mood, mode) = if info.minor { ("melancholic", "minor") } else { ("cheerful", "major") };
    format!(
        "a {mood} {tempo} piece in {} {mode} featuring {} at {} BPM.",
        info.tonic,
        join_names(instruments),
        info.bpm
    )
}

/// Caption of an arbitrary clip from its loudness, brightness and pitch.
pub fn caption_audio(w: &Waveform) -> String {
    let n = w.samples.len().max(1) as f64;
    let rms = (w.samples.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let loud = match rms {
        r if r < 0.05 => "quiet",
        r if r < 0.2 => "moderately loud",
        _ => "loud",
    };
    let f = dominant_frequency(&w.samples, w.sample_rate);
    let color = match f {
        f if f < 200.0 => "dark",
        f if f < 800.0 => "warm",
        _ => "bright",
    };
    format!("a {loud} {color} music clip centred near {} Hz.", f.round())
}

/// Mood colours: warm and light for major keys, cool and dim for minor.
fn palette(info: &SongInfo) -> [f64; 3] {
    let energy = (info.bpm as f64 - 60.0) / 100.0;
    if info.minor {
        [0.15, 0.25 + 0.2 * energy, 0.55 + 0.3 * energy]
    } else {
        [0.6 + 0.3 * energy, 0.45 + 0.2 * energy, 0.15]
    }
}

fn draw_frame<R: Rng + ?Sized>(size: usize, base: [f64; 3], blobs: &[(f64, f64, f64)], rng: &mut R) -> Result<ImageTensor> {
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let shade = 0.6 + 0.4 * y as f64 / size as f64;
            let mut lift = 0.0;
            for &(cx, cy, r) in blobs {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if d < r {
                    lift += 0.3;
                }
            }
            for c in base {
                let grain = 0.02 * rng.random_range(-1.0..1.0);
                data.push((c * shade + lift + grain).clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor::new(size, size, data)
}

fn synthetic_image<R: Rng + ?Sized>(info: &SongInfo, size: usize, rng: &mut R) -> Result<ImageTensor> {
    let s = size as f64;
    let blobs: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(0.0..s), rng.random_range(0.0..s), rng.random_range(s / 10.0..s / 4.0)))
        .collect();
    draw_frame(size, palette(info), &blobs, rng)
}

/// A blob crossing the frame, faster for higher tempo.
fn synthetic_video<R: Rng + ?Sized>(info: &SongInfo, frames: usize, size: usize, rng: &mut R) -> Result<VideoTensor> {
    let s = size as f64;
    let y = rng.random_range(s / 4.0..3.0 * s / 4.0);
    let speed = s * info.bpm as f64 / 600.0;
    let out = (0..frames.max(1))
        .map(|f| {
            let x = (f as f64 * speed) % s;
            draw_frame(size, palette(info), &[(x, y, s / 5.0)], rng)
        })
        .collect::<Result<Vec<_>>>()?;
    VideoTensor::new(out)
}

fn put_wav(sink: &mut dyn MediaSink, w: &Waveform) -> Result<String> {
    sink.put("wav", w.to_wav_bytes()?)
}

fn slots(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn pick<'a>(list: &'a [String], i: usize, what: &str) -> Result<&'a String> {
    if list.is_empty() {
        return Err(Error::invalid(format!("source directory has no {what}")));
    }
    Ok(&list[i % list.len()])
}

/// Build `cfg.count` records of `kind`, writing media into `sink`. Record
/// `i` is seeded by `(cfg.seed, "<kind>-<i>")` alone.
pub fn build_dataset(
    kind: DatasetKind,
    cfg: &BuildConfig,
    pools: &BTreeMap<Subtype, TemplatePool>,
    dir: Option<&SourceDir>,
    sink: &mut dyn MediaSink,
) -> Result<Vec<(DatasetRecord, RecordMeta)>> {
    if cfg.n_audio_tokens == 0 {
        return Err(Error::invalid("n_audio_tokens must be >= 1"));
    }
    let pool = |s: Subtype| pools.get(&s).ok_or_else(|| Error::Template(format!("no {s} template pool")));
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let file_id = format!("{kind}-{i:05}");
        let seed = derive_seed(cfg.seed, &file_id);
        let mut rng = stream(seed, "record");
        let (subtype, source, edit, src) = match kind {
            DatasetKind::Mucaps => {
                let (source, wave, caption) = match dir {
                    Some(d) => {
                        let rel = pick(&d.clips, i, "wav clips")?;
                        let w = Waveform::read_wav(&d.root.join(rel))?;
                        let c = caption_audio(&w);
                        (Some(rel.clone()), w, c)
                    }
                    None => {
                        let (ts, info) = synthetic_song(seed, cfg)?;
                        let w = Material::Tracks(ts.clone()).mixdown();
                        (None, w, caption_song(&info, &ts.instruments()))
                    }
                };
                let src = RecordSource {
                    input_media: Some(put_wav(sink, &wave)?),
                    target_audio: None,
                    slots: slots(&[("caption", caption)]),
                };
                (Subtype::Caption, source, None, src)
            }
            DatasetKind::Muimage | DatasetKind::Muvideo => {
                let (ts, info) = synthetic_song(seed, cfg)?;
                let target = Material::Tracks(ts.clone()).mixdown();
                let caption = caption_song(&info, &ts.instruments());
                let (subtype, ext, bytes, source) = match (kind, dir) {
                    (DatasetKind::Muimage, Some(d)) => {
                        let rel = pick(&d.images, i, "png images")?;
                        (Subtype::ImageGen, "png", std::fs::read(d.root.join(rel))?, Some(rel.clone()))
                    }
                    (DatasetKind::Muimage, None) => {
                        let img = synthetic_image(&info, cfg.image_size, &mut rng)?;
                        (Subtype::ImageGen, "png", img.to_png_bytes()?, None)
                    }
                    (_, Some(d)) => {
                        let rel = pick(&d.videos, i, "npy videos")?;
                        (Subtype::VideoGen, "npy", std::fs::read(d.root.join(rel))?, Some(rel.clone()))
                    }
                    (_, None) => {
                        let v = synthetic_video(&info, cfg.video_frames, cfg.video_size, &mut rng)?;
                        (Subtype::VideoGen, "npy", v.to_npy_bytes()?, None)
                    }
                };
                let src = RecordSource {
                    input_media: Some(sink.put(ext, bytes)?),
                    target_audio: Some(put_wav(sink, &target)?),
                    slots: slots(&[("caption", caption)]),
                };
                (subtype, source, None, src)
            }
            DatasetKind::Muedit => {
                let subtype = Subtype::EDITS[i % Subtype::EDITS.len()];
                let is_tracks = !matches!(subtype, Subtype::Speed | Subtype::Pitch);
                let source = match dir {
                    None => None,
                    Some(d) if is_tracks || d.clips.is_empty() => Some(pick(&d.track_sets, i, "track folders")?.clone()),
                    Some(d) => Some(pick(&d.clips, i, "wav clips")?.clone()),
                };
                let m = material(source.as_deref(), seed, cfg, dir)?;
                let (spec, slot_values) = match subtype {
                    Subtype::Speed => {
                        let factor = SPEED_FACTORS[rng.random_range(0..SPEED_FACTORS.len())];
                        (
                            EditSpec::Speed { factor },
                            slots(&[("factor", format!("{factor}")), ("degree", speed_degree(factor)?.to_string())]),
                        )
                    }
                    Subtype::Pitch => {
                        let cents = PITCH_CENTS[rng.random_range(0..PITCH_CENTS.len())];
                        (
                            EditSpec::Pitch { cents },
                            slots(&[("cents", format!("{cents:+}")), ("interval", pitch_interval(cents)?.to_string())]),
                        )
                    }
                    _ => {
                        let mode = match subtype {
                            Subtype::Add => AdrMode::Add,
                            Subtype::Delete => AdrMode::Delete,
                            _ => AdrMode::Replace,
                        };
                        let Material::Tracks(ts) = &m else {
                            return Err(Error::invalid("track edits need multi-track material"));
                        };
                        let pair = build_adr_pairs(ts, mode, &mut rng)?;
                        let mut s = slots(&[("instrument", pair.meta.instrument.clone())]);
                        if let Some(n) = &pair.meta.new_instrument {
                            s.insert("new_instrument".into(), n.clone());
                        }
                        (EditSpec::Tracks(pair.meta), s)
                    }
                };
                let (input, target) = realize(&spec, &m)?;
                let src = RecordSource {
                    input_media: Some(put_wav(sink, &input)?),
                    target_audio: Some(put_wav(sink, &target)?),
                    slots: slot_values,
                };
                (subtype, source, Some(spec), src)
            }
        };
        let rec = build_records(std::slice::from_ref(&src), subtype, pool(subtype)?, cfg.n_audio_tokens, &mut rng)?
            .pop()
            .expect("one source gives one record");
        out.push((
            rec,
            RecordMeta {
                file_id,
                seed,
                dataset: kind,
                subtype,
                source,
                edit,
            },
        ));
    }
    Ok(out)
}
