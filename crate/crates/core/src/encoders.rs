//! Modality feature encoders.
//!
//! The pretrained music/image/video encoders are replaced by seeded stand-ins
//! with the same output shapes: the input is cut into a fixed number of
//! tokens (time windows, image patches, video tubelets), each token is
//! summarized by a fixed-length descriptor of binned means, and a frozen
//! random linear map followed by `tanh` lifts the descriptor to the feature
//! width. Real encoders plug in through [`ModalityEncoder`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{ImageTensor, VideoTensor, Waveform};
use crate::params::xavier;
use crate::rng::stream;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Music,
    Image,
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Music, Modality::Image, Modality::Video];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Music => "music",
            Modality::Image => "image",
            Modality::Video => "video",
        }
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, Modality::Music | Modality::Video)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "music" => Ok(Modality::Music),
            "image" => Ok(Modality::Image),
            "video" => Ok(Modality::Video),
            other => Err(Error::invalid(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    #[default]
    Toy,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Waveform(Waveform),
    Image(ImageTensor),
    Video(VideoTensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawModalityInput {
    pub kind: Modality,
    pub payload: Payload,
}

impl RawModalityInput {
    pub fn music(w: Waveform) -> Self {
        Self {
            kind: Modality::Music,
            payload: Payload::Waveform(w),
        }
    }

    pub fn image(i: ImageTensor) -> Self {
        Self {
            kind: Modality::Image,
            payload: Payload::Image(i),
        }
    }

    pub fn video(v: VideoTensor) -> Self {
        Self {
            kind: Modality::Video,
            payload: Payload::Video(v),
        }
    }

    /// Kind/payload agreement, positive dimensions, finite samples.
    pub fn validate(&self) -> Result<()> {
        let finite = |d: &[f64]| d.iter().all(|v| v.is_finite());
        match (&self.kind, &self.payload) {
            (Modality::Music, Payload::Waveform(w)) => {
                if w.sample_rate == 0 {
                    return Err(Error::invalid("sample rate must be positive"));
                }
                if w.samples.is_empty() {
                    return Err(Error::invalid("empty waveform"));
                }
                if !finite(&w.samples) {
                    return Err(Error::invalid("non-finite audio sample"));
                }
            }
            (Modality::Image, Payload::Image(img)) => {
                if img.height == 0 || img.width == 0 || img.data.len() != img.height * img.width * 3 {
                    return Err(Error::invalid("malformed image tensor"));
                }
                if !finite(&img.data) {
                    return Err(Error::invalid("non-finite pixel"));
                }
            }
            (Modality::Video, Payload::Video(v)) => {
                if v.frames.is_empty() {
                    return Err(Error::invalid("video without frames"));
                }
                let (h, w) = (v.frames[0].height, v.frames[0].width);
                for f in &v.frames {
                    if f.height != h || f.width != w || h == 0 || w == 0 || f.data.len() != h * w * 3 {
                        return Err(Error::invalid("malformed video frame"));
                    }
                    if !finite(&f.data) {
                        return Err(Error::invalid("non-finite pixel"));
                    }
                }
            }
            (kind, _) => {
                return Err(Error::invalid(format!("payload does not match modality {kind}")))
            }
        }
        Ok(())
    }
}

/// Encoder output: a `(tokens × features)` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityEmbedding {
    pub kind: Modality,
    pub data: Matrix,
    pub scale: Scale,
}

/// `(tokens, features)` per modality at full scale.
pub const MUSIC_FULL_SHAPE: (usize, usize) = (25, 1024);
pub const IMAGE_FULL_SHAPE: (usize, usize) = (197, 768);
pub const VIDEO_FULL_SHAPE: (usize, usize) = (3137, 768);

/// Full-scale image patch grid and video tubelet layout.
const FULL_GRID: (usize, usize) = (14, 14);
const FULL_VIDEO_GROUPS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub scale: Scale,
    /// Toy `(tokens, features)` for music, image and video.
    pub toy_music: (usize, usize),
    pub toy_image: (usize, usize),
    pub toy_video: (usize, usize),
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            scale: Scale::Toy,
            toy_music: (8, 16),
            toy_image: (5, 16),
            toy_video: (9, 16),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn full(seed: u64) -> Self {
        Self {
            scale: Scale::Full,
            seed,
            ..Self::default()
        }
    }

    /// The output shape contract for `kind`.
    pub fn shape(&self, kind: Modality) -> (usize, usize) {
        match (self.scale, kind) {
            (Scale::Full, Modality::Music) => MUSIC_FULL_SHAPE,
            (Scale::Full, Modality::Image) => IMAGE_FULL_SHAPE,
            (Scale::Full, Modality::Video) => VIDEO_FULL_SHAPE,
            (Scale::Toy, Modality::Music) => self.toy_music,
            (Scale::Toy, Modality::Image) => self.toy_image,
            (Scale::Toy, Modality::Video) => self.toy_video,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (s, f)) in [
            ("music", self.toy_music),
            ("image", self.toy_image),
            ("video", self.toy_video),
        ] {
            if s == 0 || f == 0 {
                return Err(Error::invalid(format!("toy {name} dims must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Anything mapping raw media to an embedding that honors the shape contract.
pub trait ModalityEncoder: Send + Sync {
    fn encode(&self, input: &RawModalityInput) -> Result<ModalityEmbedding>;
}

/// Bins per descriptor half (means, then mean absolute values).
const BINS: usize = 16;
const DESC: usize = 2 * BINS;

/// Seeded frozen stand-in encoder.
#[derive(Clone, Debug)]
pub struct StandInEncoder {
    cfg: EncoderConfig,
    weights: [(Matrix, Matrix); 3],
}

impl StandInEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let weights = Modality::ALL.map(|kind| {
            let (_, feat) = cfg.shape(kind);
            let mut rng = stream(cfg.seed, &format!("encoder.{kind}"));
            let w = xavier(DESC, feat, &mut rng).scale(2.0);
            let b = xavier(1, feat, &mut rng).scale(0.1);
            (w, b)
        });
        Ok(Self { cfg, weights })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    fn descriptors(&self, input: &RawModalityInput) -> Matrix {
        let (tokens, _) = self.cfg.shape(input.kind);
        let mut desc = Matrix::zeros(tokens, DESC);
        match &input.payload {
            Payload::Waveform(w) => {
                let n = w.samples.len();
                for t in 0..tokens {
                    let (a, b) = span(t, tokens, n);
                    write_desc(desc.row_mut(t), b - a, |i| w.samples[a + i]);
                }
            }
            Payload::Image(img) => {
                let frames = std::slice::from_ref(img);
                write_desc(desc.row_mut(0), region_len(frames, full(img)), |i| {
                    region_at(frames, full(img), i) - 0.5
                });
                let (gr, gc) = match self.cfg.scale {
                    Scale::Full => FULL_GRID,
                    Scale::Toy => grid(tokens - 1),
                };
                for p in 0..tokens - 1 {
                    let reg = patch(img, p / gc, gr, p % gc, gc);
                    write_desc(desc.row_mut(p + 1), region_len(frames, reg), |i| {
                        region_at(frames, reg, i) - 0.5
                    });
                }
            }
            Payload::Video(v) => {
                let frames = &v.frames[..];
                let first = &frames[0];
                write_desc(desc.row_mut(0), region_len(frames, full(first)), |i| {
                    region_at(frames, full(first), i) - 0.5
                });
                let patches = tokens - 1;
                let (groups, (gr, gc)) = match self.cfg.scale {
                    Scale::Full => (FULL_VIDEO_GROUPS, FULL_GRID),
                    Scale::Toy => (patches, (1, 1)),
                };
                let per_group = gr * gc;
                for p in 0..patches {
                    let g = p / per_group;
                    let s = p % per_group;
                    let (f0, f1) = span(g, groups, frames.len());
                    let reg = patch(first, s / gc, gr, s % gc, gc);
                    let sub = &frames[f0..f1];
                    write_desc(desc.row_mut(p + 1), region_len(sub, reg), |i| {
                        region_at(sub, reg, i) - 0.5
                    });
                }
            }
        }
        desc
    }
}

impl ModalityEncoder for StandInEncoder {
    fn encode(&self, input: &RawModalityInput) -> Result<ModalityEmbedding> {
        input.validate()?;
        let idx = Modality::ALL.iter().position(|k| *k == input.kind).expect("modality");
        let (w, b) = &self.weights[idx];
        let desc = self.descriptors(input);
        let mut data = desc.matmul(w);
        for r in 0..data.rows() {
            for (x, y) in data.row_mut(r).iter_mut().zip(b.data()) {
                *x = (*x + y).tanh();
            }
        }
        Ok(ModalityEmbedding {
            kind: input.kind,
            data,
            scale: self.cfg.scale,
        })
    }
}

/// Load a media file by extension: `.wav` is music, `.png` an image, and
/// `.npy` an image `(H, W, 3)` or a video `(F, H, W, 3)`.
pub fn load_input(path: &Path) -> Result<RawModalityInput> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    match ext.as_str() {
        "wav" => Ok(RawModalityInput::music(Waveform::read_wav(path)?)),
        "png" => Ok(RawModalityInput::image(ImageTensor::read(path)?)),
        "npy" => match ImageTensor::read(path) {
            Ok(img) => Ok(RawModalityInput::image(img)),
            Err(Error::Format { .. }) => Ok(RawModalityInput::video(VideoTensor::read(path)?)),
            Err(e) => Err(e),
        },
        _ => Err(Error::format(path, "unsupported media extension")),
    }
}

/// One-shot encode with a freshly built stand-in.
pub fn encode(input: &RawModalityInput, cfg: &EncoderConfig) -> Result<ModalityEmbedding> {
    StandInEncoder::new(cfg.clone())?.encode(input)
}

/// Half-open range of part `i` when `len` items are cut into `parts`; never
/// empty, clamped to the last item when `len < parts`.
fn span(i: usize, parts: usize, len: usize) -> (usize, usize) {
    let start = (i * len / parts).min(len - 1);
    let end = ((i + 1) * len / parts).clamp(start + 1, len);
    (start, end)
}

/// Near-square grid `(rows, cols)` with `rows * cols == n`.
fn grid(n: usize) -> (usize, usize) {
    if n == 0 {
        return (1, 1);
    }
    let mut rows = 1;
    let mut d = 1;
    while d * d <= n {
        if n % d == 0 {
            rows = d;
        }
        d += 1;
    }
    (rows, n / rows)
}

#[derive(Clone, Copy)]
struct Region {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

fn full(img: &ImageTensor) -> Region {
    Region {
        y0: 0,
        y1: img.height,
        x0: 0,
        x1: img.width,
    }
}

fn patch(img: &ImageTensor, r: usize, rows: usize, c: usize, cols: usize) -> Region {
    let (y0, y1) = span(r, rows, img.height);
    let (x0, x1) = span(c, cols, img.width);
    Region { y0, y1, x0, x1 }
}

fn region_len(frames: &[ImageTensor], r: Region) -> usize {
    frames.len() * (r.y1 - r.y0) * (r.x1 - r.x0) * 3
}

fn region_at(frames: &[ImageTensor], r: Region, i: usize) -> f64 {
    let w = r.x1 - r.x0;
    let per_frame = (r.y1 - r.y0) * w * 3;
    let f = i / per_frame;
    let rem = i % per_frame;
    let y = rem / (w * 3);
    let rem = rem % (w * 3);
    frames[f].at(r.y0 + y, r.x0 + rem / 3, rem % 3)
}

/// Binned means and mean absolute values of a sequence of length `n`.
fn write_desc(out: &mut [f64], n: usize, at: impl Fn(usize) -> f64) {
    for b in 0..BINS {
        let (s, e) = span(b, BINS, n);
        let (mut sum, mut abs) = (0.0, 0.0);
        for i in s..e {
            let v = at(i);
            sum += v;
            abs += v.abs();
        }
        let k = (e - s) as f64;
        out[b] = sum / k;
        out[BINS + b] = abs / k;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(n: usize) -> Waveform {
        Waveform::new(
            (0..n).map(|i| (i as f64 * 0.05).sin()).collect(),
            16_000,
        )
    }

    fn image(h: usize, w: usize, seed: f64) -> ImageTensor {
        let data = (0..h * w * 3)
            .map(|i| ((i as f64 * 0.37 + seed).sin() + 1.0) / 2.0)
            .collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    #[test]
    fn toy_image_shape_echoes_config() {
        let cfg = EncoderConfig {
            toy_image: (4, 8),
            ..EncoderConfig::default()
        };
        let e = encode(&RawModalityInput::image(image(6, 5, 0.0)), &cfg).unwrap();
        assert_eq!(e.data.shape(), (4, 8));
    }

    #[test]
    fn tiny_inputs_still_meet_the_contract() {
        let cfg = EncoderConfig::full(1);
        let e = encode(&RawModalityInput::music(sine(3)), &cfg).unwrap();
        assert_eq!(e.data.shape(), MUSIC_FULL_SHAPE);
        let e = encode(&RawModalityInput::image(image(1, 1, 0.0)), &cfg).unwrap();
        assert_eq!(e.data.shape(), IMAGE_FULL_SHAPE);
        assert!(e.data.is_finite());
    }

    #[test]
    fn kind_payload_mismatch_is_rejected() {
        let bad = RawModalityInput {
            kind: Modality::Image,
            payload: Payload::Waveform(sine(10)),
        };
        assert!(matches!(encode(&bad, &EncoderConfig::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn non_finite_and_zero_rate_are_rejected() {
        let mut w = sine(10);
        w.samples[3] = f64::NAN;
        assert!(encode(&RawModalityInput::music(w), &EncoderConfig::default()).is_err());
        let mut w = sine(10);
        w.sample_rate = 0;
        assert!(encode(&RawModalityInput::music(w), &EncoderConfig::default()).is_err());
    }

    #[test]
    fn seed_changes_weights() {
        let input = RawModalityInput::music(sine(400));
        let a = encode(&input, &EncoderConfig::default()).unwrap();
        let b = encode(&input, &EncoderConfig { seed: 9, ..EncoderConfig::default() }).unwrap();
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn span_and_grid_helpers() {
        assert_eq!(span(0, 25, 3), (0, 1));
        assert_eq!(span(24, 25, 3), (2, 3));
        assert_eq!(span(1, 2, 10), (5, 10));
        assert_eq!(grid(196), (14, 14));
        assert_eq!(grid(3), (1, 3));
        assert_eq!(grid(8), (2, 4));
    }
}
