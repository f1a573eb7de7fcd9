//! Corpus BLEU and ROUGE-L behind a plug-in trait.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Add-ε smoothing of n-gram precisions.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Lowercase, split on whitespace, and split punctuation into its own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_pairs(c: &[String], r: &[String]) -> Result<()> {
    if c.is_empty() || c.len() != r.len() {
        return Err(Error::invalid(format!(
            "text metrics need non-empty paired lists, got {} and {}",
            c.len(),
            r.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU with uniform 1–4-gram weights and brevity penalty.
pub fn bleu(candidates: &[String], references: &[String]) -> Result<f64> {
    check_pairs(candidates, references)?;
    let (mut matched, mut total) = ([0usize; 4], [0usize; 4]);
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (ct, rt) = (tokenize(c), tokenize(r));
        c_len += ct.len();
        r_len += rt.len();
        for n in 1..=4 {
            let rc = ngrams(&rt, n);
            for (g, k) in ngrams(&ct, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| ((matched[i] as f64 + BLEU_EPSILON) / (total[i] as f64 + BLEU_EPSILON)).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    Ok(bp * log_p.exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F1 (β = 1), i.e. `2·LCS / (|c| + |r|)`.
pub fn rouge_l_sentence(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    2.0 * lcs(&c, &r) as f64 / (c.len() + r.len()) as f64
}

/// Mean sentence-level ROUGE-L F1.
pub fn rouge_l(candidates: &[String], references: &[String]) -> Result<f64> {
    check_pairs(candidates, references)?;
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_sentence(c, r))
        .sum::<f64>()
        / candidates.len() as f64)
}

/// A corpus-level text metric. Further metrics plug in here.
pub trait TextMetric {
    fn name(&self) -> &'static str;
    fn score(&self, candidates: &[String], references: &[String]) -> Result<f64>;
}

pub struct Bleu;
pub struct RougeL;

impl TextMetric for Bleu {
    fn name(&self) -> &'static str {
        "bleu"
    }

    fn score(&self, c: &[String], r: &[String]) -> Result<f64> {
        bleu(c, r)
    }
}

impl TextMetric for RougeL {
    fn name(&self) -> &'static str {
        "rouge_l"
    }

    fn score(&self, c: &[String], r: &[String]) -> Result<f64> {
        rouge_l(c, r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextScores {
    pub bleu: f64,
    pub rouge_l: f64,
}

pub fn text_metrics(candidates: &[String], references: &[String]) -> Result<TextScores> {
    Ok(TextScores {
        bleu: bleu(candidates, references)?,
        rouge_l: rouge_l(candidates, references)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn identical_and_disjoint() {
        let c = v(&["a calm piano piece with soft strings", "fast drums."]);
        let s = text_metrics(&c, &c).unwrap();
        assert_eq!((s.bleu, s.rouge_l), (1.0, 1.0));
        let d = text_metrics(&v(&["x y z w"]), &v(&["a b c d"])).unwrap();
        assert!(d.bleu < 1e-6);
        assert_eq!(d.rouge_l, 0.0);
    }

    #[test]
    fn rouge_hand_case() {
        assert_eq!(rouge_l_sentence("the cat sat", "the cat"), 0.8);
    }

    #[test]
    fn brevity_penalty() {
        let b = bleu(&v(&["the cat"]), &v(&["the cat sat on the mat"])).unwrap();
        assert!((b - (1.0f64 - 3.0).exp()).abs() < 1e-6, "{b}");
        assert!(bleu(&[], &[]).is_err());
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Hi, it's FAST!"), v(&["hi", ",", "it's", "fast", "!"]));
    }
}
