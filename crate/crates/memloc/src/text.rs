//! Byte-level tokenization and the string metrics used for collection and
//! de-duplication.

use std::collections::HashSet;

use crate::{Error, Result};

/// Token ids are bytes: vocabulary size 256, no specials, no BOS/EOS. Encoding
/// and decoding are exact inverses on arbitrary byte strings.
pub struct ByteTokenizer;

pub const VOCAB_SIZE: usize = 256;

impl ByteTokenizer {
    pub fn encode(bytes: &[u8]) -> Vec<u16> {
        bytes.iter().map(|&b| b as u16).collect()
    }

    pub fn encode_str(s: &str) -> Vec<u16> {
        Self::encode(s.as_bytes())
    }

    pub fn decode(tokens: &[u16]) -> Result<Vec<u8>> {
        tokens
            .iter()
            .map(|&t| {
                u8::try_from(t).map_err(|_| {
                    Error::Format(format!("token {t} outside byte vocabulary 0..256"))
                })
            })
            .collect()
    }

    /// Decode for display; invalid UTF-8 is replaced, never fails.
    pub fn decode_lossy(tokens: &[u16]) -> String {
        match Self::decode(tokens) {
            Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Err(_) => String::from("<invalid tokens>"),
        }
    }
}

/// Levenshtein edit distance (unit insert/delete/substitute costs) over byte
/// strings, rolling single-row DP.
pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, &ca) in a.iter().enumerate() {
        let mut prev_diag = prev[0];
        prev[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let cost = if ca == cb { 0 } else { 1 };
            let cur = (prev_diag + cost).min(prev[j] + 1).min(prev[j + 1] + 1);
            prev_diag = prev[j + 1];
            prev[j + 1] = cur;
        }
    }
    prev[b.len()]
}

/// Jaccard similarity of the n-gram sets of two token sequences. Sequences
/// shorter than n have an empty profile; two empty profiles count as identical
/// (similarity 1) so that near-trivial duplicates still collapse.
pub fn jaccard_ngrams(a: &[u16], b: &[u16], n: usize) -> f64 {
    assert!(n > 0, "n-gram size must be positive");
    let grams = |s: &[u16]| -> HashSet<Vec<u16>> {
        if s.len() < n {
            return HashSet::new();
        }
        s.windows(n).map(|w| w.to_vec()).collect()
    };
    let ga = grams(a);
    let gb = grams(b);
    if ga.is_empty() && gb.is_empty() {
        return 1.0;
    }
    let inter = ga.intersection(&gb).count();
    let union = ga.len() + gb.len() - inter;
    inter as f64 / union as f64
}
