//! Byte-level toy tokenizer with reserved audio-token ids.
//!
//! Ids `0..256` are raw bytes, `vocab_size - 1` is end-of-sequence, and the
//! `K` audio tokens occupy `vocab_size..vocab_size + K`. In text, audio
//! tokens are written `[AUD_i]`.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ByteTokenizer {
    vocab_size: usize,
    n_audio: usize,
}

impl ByteTokenizer {
    pub fn new(vocab_size: usize, n_audio: usize) -> Result<Self> {
        if vocab_size < 257 {
            return Err(Error::invalid("byte tokenizer needs vocab_size >= 257"));
        }
        Ok(Self {
            vocab_size,
            n_audio,
        })
    }

    pub fn eos(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn audio_id(&self, i: usize) -> usize {
        self.vocab_size + i
    }

    pub fn is_audio(&self, id: usize) -> bool {
        id >= self.vocab_size && id < self.vocab_size + self.n_audio
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let bytes = text.as_bytes();
        let mut ids = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if let Some((k, len)) = self.audio_marker(&bytes[i..]) {
                ids.push(self.audio_id(k));
                i += len;
            } else {
                ids.push(bytes[i] as usize);
                i += 1;
            }
        }
        ids
    }

    fn audio_marker(&self, s: &[u8]) -> Option<(usize, usize)> {
        let rest = s.strip_prefix(b"[AUD_")?;
        let digits = rest.iter().take_while(|b| b.is_ascii_digit()).count();
        if digits == 0 || rest.get(digits) != Some(&b']') {
            return None;
        }
        let k: usize = std::str::from_utf8(&rest[..digits]).ok()?.parse().ok()?;
        (k < self.n_audio).then_some((k, 5 + digits + 1))
    }

    /// Render ids as text; EOS is dropped, audio ids become `[AUD_i]`.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if self.is_audio(id) {
                bytes.extend_from_slice(format!("[AUD_{}]", id - self.vocab_size).as_bytes());
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// The `K` audio markers as text.
pub fn audio_suffix(k: usize) -> String {
    (0..k).map(|i| format!("[AUD_{i}]")).collect()
}
