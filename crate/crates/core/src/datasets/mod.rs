//! Instruction-dataset construction: record format, media storage, template
//! pools, audio edits and the synthetic builders.

mod builder;
pub mod dsp;
pub mod templates;
pub mod tracks;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use builder::{
    build_dataset, build_records, caption_audio, caption_song, regenerate_edit, BuildConfig, EditSpec, RecordMeta,
    RecordSource, SourceDir,
};
pub use dsp::{dominant_frequency, pitch_shift, wsola_stretch, WsolaParams};
pub use templates::{builtin_pools, fill, Subtype, TemplatePool};
pub use tracks::{build_adr_pairs, synthetic_trackset, AdrMode, AdrPair, Track, TrackSet};

/// Duration factors allowed when building edit records.
pub const SPEED_FACTORS: [f64; 4] = [0.5, 0.7, 1.3, 1.5];
/// Pitch changes (cents) allowed when building edit records.
pub const PITCH_CENTS: [i32; 4] = [-200, -100, 100, 200];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mucaps,
    Muimage,
    Muvideo,
    Muedit,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Mucaps,
        DatasetKind::Muimage,
        DatasetKind::Muvideo,
        DatasetKind::Muedit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mucaps => "mucaps",
            DatasetKind::Muimage => "muimage",
            DatasetKind::Muvideo => "muvideo",
            DatasetKind::Muedit => "muedit",
        }
    }

    pub fn of_subtype(s: Subtype) -> Self {
        match s {
            Subtype::Caption => DatasetKind::Mucaps,
            Subtype::ImageGen => DatasetKind::Muimage,
            Subtype::VideoGen => DatasetKind::Muvideo,
            _ => DatasetKind::Muedit,
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DatasetKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown dataset kind {s:?}")))
    }
}

/// One instruction/response pair. Media paths are relative to the JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub dataset: DatasetKind,
    pub instruction: String,
    pub response: String,
    pub input_media: Option<String>,
    pub target_audio: Option<String>,
    pub emits_music: bool,
}

impl DatasetRecord {
    /// Music-emitting records end with the `K` audio markers; edit records
    /// carry both input and target audio.
    pub fn validate(&self, n_audio_tokens: usize) -> Result<()> {
        let suffix = crate::fusion::audio_suffix(n_audio_tokens);
        if self.emits_music && !self.response.ends_with(&suffix) {
            return Err(Error::invalid("music record without the audio-token suffix"));
        }
        if self.dataset == DatasetKind::Muedit && (self.input_media.is_none() || self.target_audio.is_none()) {
            return Err(Error::invalid("edit record needs input and target audio"));
        }
        Ok(())
    }
}

/// Remove every `[AUD_i]` marker and trim.
pub fn strip_audio_markers(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(i) = rest.find("[AUD_") {
        out.push_str(&rest[..i]);
        let tail = &rest[i + 5..];
        let digits = tail.bytes().take_while(u8::is_ascii_digit).count();
        if digits > 0 && tail.as_bytes().get(digits) == Some(&b']') {
            rest = &tail[digits + 1..];
        } else {
            out.push_str("[AUD_");
            rest = tail;
        }
    }
    out.push_str(rest);
    out.trim().to_string()
}

/// Serialize one value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Destination for media bytes; returns the reference stored in records.
pub trait MediaSink {
    fn put(&mut self, ext: &str, bytes: Vec<u8>) -> Result<String>;
}

fn content_name(ext: &str, bytes: &[u8]) -> String {
    format!("media/{}.{ext}", hex::encode(Sha256::digest(bytes)))
}

/// Content-addressed files under `<root>/media/`.
#[derive(Clone, Debug)]
pub struct DirSink {
    root: PathBuf,
}

impl DirSink {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("media"))?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }
}

impl MediaSink for DirSink {
    fn put(&mut self, ext: &str, bytes: Vec<u8>) -> Result<String> {
        let rel = content_name(ext, &bytes);
        let path = self.root.join(&rel);
        if !path.exists() {
            std::fs::write(path, bytes)?;
        }
        Ok(rel)
    }
}

/// In-memory sink, keyed by the same references a [`DirSink`] would use.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub files: BTreeMap<String, Vec<u8>>,
}

impl MediaSink for MemorySink {
    fn put(&mut self, ext: &str, bytes: Vec<u8>) -> Result<String> {
        let rel = content_name(ext, &bytes);
        self.files.insert(rel.clone(), bytes);
        Ok(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_markers() {
        assert_eq!(strip_audio_markers("Here it is. [AUD_0][AUD_1]"), "Here it is.");
        assert_eq!(strip_audio_markers("keep [AUD_x] text"), "keep [AUD_x] text");
    }

    #[test]
    fn jsonl_field_names() {
        let r = DatasetRecord {
            dataset: DatasetKind::Mucaps,
            instruction: "Describe.".into(),
            response: "calm".into(),
            input_media: Some("media/a.wav".into()),
            target_audio: None,
            emits_music: false,
        };
        let line = serde_json::to_string(&r).unwrap();
        assert_eq!(
            line,
            r#"{"dataset":"mucaps","instruction":"Describe.","response":"calm","input_media":"media/a.wav","target_audio":null,"emits_music":false}"#
        );
    }

    #[test]
    fn memory_sink_is_content_addressed() {
        let mut s = MemorySink::default();
        let a = s.put("wav", vec![1, 2, 3]).unwrap();
        let b = s.put("wav", vec![1, 2, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(s.files.len(), 1);
        assert!(a.starts_with("media/") && a.ends_with(".wav"));
    }
}
