//! In-memory media types and their file formats.
//!
//! * waveforms: mono PCM 16-bit WAV
//! * images: PNG (RGB) or `.npy` float arrays of shape `(H, W, 3)`
//! * videos: `.npy` float arrays of shape `(F, H, W, 3)`
//!
//! Pixel values are floats in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default sample rate for generated audio.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Encode as 16-bit PCM mono WAV. Samples are clamped to `[-1, 1]`.
    pub fn to_wav_bytes(&self) -> Result<Vec<u8>> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut buf = Cursor::new(Vec::new());
        {
            let mut w = hound::WavWriter::new(&mut buf, spec).map_err(wav_err)?;
            for &s in &self.samples {
                let q = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
                w.write_sample(q).map_err(wav_err)?;
            }
            w.finalize().map_err(wav_err)?;
        }
        Ok(buf.into_inner())
    }

    pub fn from_wav_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = hound::WavReader::new(Cursor::new(bytes)).map_err(wav_err)?;
        let spec = r.spec();
        let channels = spec.channels.max(1) as usize;
        let raw: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                r.samples::<i32>()
                    .map(|s| s.map(|v| v as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(wav_err)?
            }
            hound::SampleFormat::Float => r
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?,
        };
        // Downmix interleaved channels.
        let samples = raw
            .chunks(channels)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        Ok(Self::new(samples, spec.sample_rate))
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_wav_bytes()?)?;
        Ok(())
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_wav_bytes(&bytes).map_err(|e| Error::format(path, e))
    }

    /// Round-trip through 16-bit quantization, matching what a WAV file holds.
    pub fn quantized(&self) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|&s| {
                let q = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
                q as f64 / 32768.0
            })
            .collect();
        Self::new(samples, self.sample_rate)
    }
}

fn wav_err(e: hound::Error) -> Error {
    Error::invalid(format!("wav: {e}"))
}

/// An `H × W × 3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    /// Row-major `(y, x, channel)`.
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::invalid(format!(
                "image buffer of {} values for {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let pixels: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, pixels)
            .ok_or_else(|| Error::invalid("image buffer size"))?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)
            .map_err(|e| Error::invalid(format!("png: {e}")))?;
        Ok(buf.into_inner())
    }

    pub fn read(path: &Path) -> Result<Self> {
        match extension(path).as_str() {
            "npy" => {
                let (shape, data) = read_npy(path)?;
                match shape.as_slice() {
                    [h, w, 3] => Self::new(*h, *w, data),
                    _ => Err(Error::format(path, format!("image array shape {shape:?}"))),
                }
            }
            _ => {
                let img = image::open(path)
                    .map_err(|e| Error::format(path, e))?
                    .to_rgb8();
                let (w, h) = img.dimensions();
                let data = img.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
                Self::new(h as usize, w as usize, data)
            }
        }
    }
}

/// A sequence of equally-sized frames.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub frames: Vec<ImageTensor>,
}

impl VideoTensor {
    pub fn new(frames: Vec<ImageTensor>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("video needs at least one frame"))?;
        let (h, w) = (first.height, first.width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::invalid("video frames differ in size"));
        }
        Ok(Self { frames })
    }

    pub fn to_npy_bytes(&self) -> Result<Vec<u8>> {
        let f = &self.frames[0];
        let shape = [
            self.frames.len() as u64,
            f.height as u64,
            f.width as u64,
            3,
        ];
        let data: Vec<f32> = self
            .frames
            .iter()
            .flat_map(|fr| fr.data.iter().map(|&v| v as f32))
            .collect();
        let mut buf = Vec::new();
        use npyz::WriterBuilder;
        let mut w = npyz::WriteOptions::<f32>::new()
            .default_dtype()
            .shape(&shape)
            .writer(&mut buf)
            .begin_nd()?;
        w.extend(data)?;
        w.finish()?;
        Ok(buf)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let (shape, data) = read_npy(path)?;
        let [f, h, w, 3] = shape.as_slice() else {
            return Err(Error::format(path, format!("video array shape {shape:?}")));
        };
        let per = h * w * 3;
        let frames = (0..*f)
            .map(|i| ImageTensor::new(*h, *w, data[i * per..(i + 1) * per].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(frames)
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase()
}

fn read_npy(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| Error::format(path, e))?;
    let shape: Vec<usize> = npy.shape().iter().map(|&d| d as usize).collect();
    let data: Vec<f64> = match npy.dtype() {
        npyz::DType::Plain(t) if t.type_char() == npyz::TypeChar::Float && t.size_field() == 8 => {
            npy.into_vec::<f64>().map_err(|e| Error::format(path, e))?
        }
        _ => npy
            .into_vec::<f32>()
            .map_err(|e| Error::format(path, e))?
            .into_iter()
            .map(f64::from)
            .collect(),
    };
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_is_16_bit_exact() {
        let w = Waveform::new((0..100).map(|i| (i as f64 * 0.1).sin() * 0.8).collect(), 16_000);
        let back = Waveform::from_wav_bytes(&w.to_wav_bytes().unwrap()).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        assert_eq!(back.samples, w.quantized().samples);
    }

    #[test]
    fn video_npy_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frame = ImageTensor::new(2, 3, (0..18).map(|i| i as f64 / 32.0).collect()).unwrap();
        let v = VideoTensor::new(vec![frame.clone(), frame]).unwrap();
        let p = dir.path().join("v.npy");
        std::fs::write(&p, v.to_npy_bytes().unwrap()).unwrap();
        assert_eq!(VideoTensor::read(&p).unwrap(), v);
    }

    #[test]
    fn png_round_trip_quantizes_to_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(2, 2, vec![0.0, 0.5, 1.0, 1.0, 0.0, 0.2, 0.2, 0.2, 0.2, 1.0, 1.0, 1.0]).unwrap();
        let p = dir.path().join("i.png");
        std::fs::write(&p, img.to_png_bytes().unwrap()).unwrap();
        let back = ImageTensor::read(&p).unwrap();
        assert_eq!((back.height, back.width), (2, 2));
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1.0 / 255.0));
    }

    #[test]
    fn rejects_bad_image_dims() {
        assert!(ImageTensor::new(0, 2, vec![]).is_err());
        assert!(ImageTensor::new(1, 1, vec![0.0; 2]).is_err());
    }
}
