//! Instruction/response template pools with `{name}` placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    Speed,
    Pitch,
    Add,
    Delete,
    Replace,
    ImageGen,
    VideoGen,
    Caption,
}

impl Subtype {
    pub const ALL: [Subtype; 8] = [
        Subtype::Speed,
        Subtype::Pitch,
        Subtype::Add,
        Subtype::Delete,
        Subtype::Replace,
        Subtype::ImageGen,
        Subtype::VideoGen,
        Subtype::Caption,
    ];

    /// Editing subtypes, in the order the builder cycles through them.
    pub const EDITS: [Subtype; 5] = [
        Subtype::Speed,
        Subtype::Pitch,
        Subtype::Add,
        Subtype::Delete,
        Subtype::Replace,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subtype::Speed => "speed",
            Subtype::Pitch => "pitch",
            Subtype::Add => "add",
            Subtype::Delete => "delete",
            Subtype::Replace => "replace",
            Subtype::ImageGen => "image_gen",
            Subtype::VideoGen => "video_gen",
            Subtype::Caption => "caption",
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Subtype::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown template subtype {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplatePool {
    pub subtype: Subtype,
    pub instructions: Vec<String>,
    pub responses: Vec<String>,
}

fn lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

macro_rules! builtin {
    ($name:literal) => {
        (
            include_str!(concat!("../../templates/", $name, ".instructions.txt")),
            include_str!(concat!("../../templates/", $name, ".responses.txt")),
        )
    };
}

fn builtin_text(s: Subtype) -> (&'static str, &'static str) {
    match s {
        Subtype::Speed => builtin!("speed"),
        Subtype::Pitch => builtin!("pitch"),
        Subtype::Add => builtin!("add"),
        Subtype::Delete => builtin!("delete"),
        Subtype::Replace => builtin!("replace"),
        Subtype::ImageGen => builtin!("image_gen"),
        Subtype::VideoGen => builtin!("video_gen"),
        Subtype::Caption => builtin!("caption"),
    }
}

impl TemplatePool {
    pub fn new(subtype: Subtype, instructions: Vec<String>, responses: Vec<String>) -> Result<Self> {
        if instructions.is_empty() || responses.is_empty() {
            return Err(Error::Template(format!("{subtype} pool has an empty list")));
        }
        Ok(Self {
            subtype,
            instructions,
            responses,
        })
    }

    /// The pool shipped with the library.
    pub fn builtin(subtype: Subtype) -> Self {
        let (i, r) = builtin_text(subtype);
        Self::new(subtype, lines(i), lines(r)).expect("shipped pools are non-empty")
    }

    /// Read `<subtype>.instructions.txt` and `<subtype>.responses.txt`
    /// (one template per line) from `dir`.
    pub fn from_dir(dir: &Path, subtype: Subtype) -> Result<Self> {
        let read = |suffix: &str| -> Result<Vec<String>> {
            let p = dir.join(format!("{subtype}.{suffix}.txt"));
            Ok(lines(&std::fs::read_to_string(p)?))
        };
        Self::new(subtype, read("instructions")?, read("responses")?)
    }

    /// Pick and fill one instruction and one response.
    pub fn sample<R: Rng + ?Sized>(&self, slots: &BTreeMap<String, String>, rng: &mut R) -> Result<(String, String)> {
        let i = &self.instructions[rng.random_range(0..self.instructions.len())];
        let r = &self.responses[rng.random_range(0..self.responses.len())];
        Ok((fill(i, slots)?, fill(r, slots)?))
    }
}

/// Every pool shipped with the library.
pub fn builtin_pools() -> BTreeMap<Subtype, TemplatePool> {
    Subtype::ALL.into_iter().map(|s| (s, TemplatePool::builtin(s))).collect()
}

/// Substitute `{name}` placeholders. A placeholder without a value, or an
/// unterminated brace, is a template error.
pub fn fill(template: &str, slots: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::Template(format!("unterminated placeholder in {template:?}")))?;
        let key = &after[..close];
        let value = slots
            .get(key)
            .ok_or_else(|| Error::Template(format!("no value for {{{key}}} in {template:?}")))?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Degree phrase for a duration factor: shorter output plays faster.
pub fn speed_degree(duration_factor: f64) -> Result<&'static str> {
    match duration_factor {
        f if f == 0.5 => Ok("much faster"),
        f if f == 0.7 => Ok("faster"),
        f if f == 1.3 => Ok("slower"),
        f if f == 1.5 => Ok("much slower"),
        f => Err(Error::invalid(format!("no degree word for duration factor {f}"))),
    }
}

/// Verbal interval for a pitch change.
pub fn pitch_interval(cents: i32) -> Result<&'static str> {
    match cents {
        100 => Ok("up a semitone"),
        200 => Ok("up a whole tone"),
        -100 => Ok("down a semitone"),
        -200 => Ok("down a whole tone"),
        c => Err(Error::invalid(format!("no interval name for {c} cents"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn slots(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn fill_substitutes_and_rejects_missing() {
        let s = slots(&[("factor", "1.5")]);
        assert_eq!(fill("by {factor}x", &s).unwrap(), "by 1.5x");
        assert!(matches!(fill("by {cents}", &s), Err(Error::Template(_))));
        assert!(matches!(fill("by {factor", &s), Err(Error::Template(_))));
    }

    #[test]
    fn builtin_pools_fill_with_their_slots() {
        let full = slots(&[
            ("factor", "1.3"),
            ("degree", "slower"),
            ("cents", "+100"),
            ("interval", "up a semitone"),
            ("instrument", "piano"),
            ("new_instrument", "flute"),
            ("caption", "a calm piece."),
        ]);
        for (s, pool) in builtin_pools() {
            for t in pool.instructions.iter().chain(&pool.responses) {
                fill(t, &full).unwrap_or_else(|e| panic!("{s}: {e}"));
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = TemplatePool::builtin(Subtype::Speed);
        let s = slots(&[("factor", "0.5"), ("degree", "much faster")]);
        let a = p.sample(&s, &mut stream(1, "t")).unwrap();
        let b = p.sample(&s, &mut stream(1, "t")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(TemplatePool::new(Subtype::Add, vec![], vec!["x".into()]).is_err());
        assert_eq!("image_gen".parse::<Subtype>().unwrap(), Subtype::ImageGen);
    }
}
