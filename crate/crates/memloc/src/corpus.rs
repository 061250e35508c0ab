//! Synthetic corpus: random filler (alternating word soup, which teaches
//! generic next-byte statistics, and raw byte noise, which keeps the model
//! calibrated on unpredictable strings), high-entropy byte "factlets" the
//! model is pushed to memorize verbatim, and a held-out filler batch for
//! perplexity checks.
//!
//! Factlets are pairwise disjoint at the 5-gram level by rejection sampling, and
//! the held-out batch shares no 5-gram with any factlet and no exact sequence
//! with the training filler — so memorization of a factlet cannot leak into
//! either of them.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{greedy_suffix, score_sequence, TransformerLM};
use crate::rng::Rng;
use crate::text::{jaccard_ngrams, levenshtein};
use crate::{Error, Result};

const WORDS: [&str; 48] = [
    "the", "a", "of", "to", "and", "in", "is", "was", "for", "on", "with", "as", "at", "by",
    "from", "that", "this", "it", "an", "be", "are", "were", "or", "not", "but", "all", "can",
    "had", "has", "have", "one", "two", "time", "people", "water", "long", "little", "work",
    "place", "year", "back", "only", "round", "small", "sound", "great", "still", "night",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusParams {
    pub filler_sequences: usize,
    /// Inclusive token-length range for filler.
    pub filler_len: (usize, usize),
    pub factlets: usize,
    pub factlet_len: usize,
    /// Prefix length recorded on each factlet sample.
    pub factlet_prefix: usize,
    /// Copies of each factlet in the training stream.
    pub factlet_reps: usize,
    pub heldout_sequences: usize,
    pub heldout_len: usize,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            filler_sequences: 240,
            filler_len: (24, 80),
            factlets: 40,
            factlet_len: 80,
            factlet_prefix: 32,
            factlet_reps: 8,
            heldout_sequences: 32,
            heldout_len: 64,
            seed: 0,
        }
    }
}

impl CorpusParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.filler_len;
        if lo < 2 || hi < lo {
            return Err(Error::Config(format!("bad filler length range {lo}..={hi}")));
        }
        if self.factlet_len < 2 || self.heldout_len < 2 {
            return Err(Error::Config("sequences need at least 2 tokens".into()));
        }
        if self.factlet_prefix == 0 || self.factlet_prefix >= self.factlet_len {
            return Err(Error::Config(format!(
                "factlet prefix {} invalid for length {}",
                self.factlet_prefix, self.factlet_len
            )));
        }
        if self.factlets == 0 || self.filler_sequences == 0 {
            return Err(Error::Config("need at least one filler and one factlet".into()));
        }
        Ok(())
    }
}

/// One sequence with its scoring split point.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub tokens: Vec<u16>,
    pub prefix_len: usize,
    pub tags: Vec<String>,
}

impl Sample {
    pub fn suffix(&self) -> &[u16] {
        &self.tokens[self.prefix_len..]
    }

    pub fn prefix(&self) -> &[u16] {
        &self.tokens[..self.prefix_len]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    pub params: CorpusParams,
    pub fillers: Vec<Sample>,
    pub factlets: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

fn ngrams_of(tokens: &[u16], n: usize) -> HashSet<Vec<u16>> {
    if tokens.len() < n {
        return HashSet::new();
    }
    tokens.windows(n).map(|w| w.to_vec()).collect()
}

fn word_soup(rng: &mut Rng, len: usize) -> Vec<u16> {
    let mut s = String::new();
    while s.len() < len {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(WORDS[rng.below_usize(WORDS.len())]);
    }
    s.truncate(len);
    s.bytes().map(u16::from).collect()
}

fn random_bytes(rng: &mut Rng, len: usize) -> Vec<u16> {
    (0..len).map(|_| rng.below(256) as u16).collect()
}

/// Deterministic random byte sequence for external samplers (e.g. the injection
/// benchmark draws its sequences by index). Drawn from a derived stream so the
/// result never collides with corpus content, which comes from the undecorated
/// stream of the corpus seed — an injected sequence must be new to the model
/// even when the two seeds coincide.
pub fn random_byte_sequence(seed: u64, len: usize) -> Vec<u16> {
    let mut rng = Rng::new(seed).derive(0);
    random_bytes(&mut rng, len)
}

impl Corpus {
    pub fn generate(params: CorpusParams) -> Result<Corpus> {
        params.validate()?;
        let mut rng = Rng::new(params.seed);

        // Factlets first: pairwise-disjoint 5-grams via rejection.
        let mut factlets = Vec::with_capacity(params.factlets);
        let mut taken: HashSet<Vec<u16>> = HashSet::new();
        for i in 0..params.factlets {
            let (tokens, grams) = reject_sample(&mut rng, 1000, |r| {
                let cand = random_bytes(r, params.factlet_len);
                let grams = ngrams_of(&cand, 5);
                if grams.iter().any(|g| taken.contains(g)) {
                    None
                } else {
                    Some((cand, grams))
                }
            })?;
            taken.extend(grams);
            factlets.push(Sample {
                id: format!("factlet-{i:04}"),
                tokens,
                prefix_len: params.factlet_prefix,
                tags: vec!["factlet".to_string()],
            });
        }

        // Filler alternates word soup with raw byte noise. The soup teaches
        // generic text statistics; the noise teaches the model that novel
        // high-entropy byte strings are unpredictable, so it stays close to
        // uniform on them instead of projecting word statistics onto them.
        // Without that, the base model is so miscalibrated on fresh random
        // byte sequences that no small set of output columns can be tuned to
        // absorb one — the injection benchmark's fine-tuning stalls well above
        // its convergence threshold.
        let mut fillers = Vec::with_capacity(params.filler_sequences);
        let mut filler_seen: HashSet<Vec<u16>> = HashSet::new();
        let (lo, hi) = params.filler_len;
        for i in 0..params.filler_sequences {
            let tokens = reject_sample(&mut rng, 1000, |r| {
                let len = lo + r.below_usize(hi - lo + 1);
                let cand = if i % 2 == 0 { word_soup(r, len) } else { random_bytes(r, len) };
                let fresh = !filler_seen.contains(&cand)
                    && ngrams_of(&cand, 5).iter().all(|g| !taken.contains(g));
                if fresh {
                    Some(cand)
                } else {
                    None
                }
            })?;
            filler_seen.insert(tokens.clone());
            fillers.push(Sample {
                id: format!("filler-{i:04}"),
                tokens,
                prefix_len: 1,
                tags: vec!["filler".to_string()],
            });
        }

        // Held-out filler: same distribution, never an exact training sequence,
        // and no 5-gram in common with any factlet.
        let mut heldout = Vec::with_capacity(params.heldout_sequences);
        for i in 0..params.heldout_sequences {
            let tokens = reject_sample(&mut rng, 1000, |r| {
                let cand = word_soup(r, params.heldout_len);
                let fresh = !filler_seen.contains(&cand)
                    && ngrams_of(&cand, 5).iter().all(|g| !taken.contains(g));
                if fresh {
                    Some(cand)
                } else {
                    None
                }
            })?;
            filler_seen.insert(tokens.clone());
            heldout.push(Sample {
                id: format!("heldout-{i:04}"),
                tokens,
                prefix_len: 1,
                tags: vec!["heldout".to_string()],
            });
        }

        Ok(Corpus { params, fillers, factlets, heldout })
    }

    /// Sequences the base model trains on: all filler plus each factlet repeated.
    pub fn train_stream(&self) -> Vec<Vec<u16>> {
        let mut out: Vec<Vec<u16>> =
            self.fillers.iter().map(|s| s.tokens.clone()).collect();
        for f in &self.factlets {
            for _ in 0..self.params.factlet_reps {
                out.push(f.tokens.clone());
            }
        }
        out
    }

    pub fn heldout_tokens(&self) -> Vec<Vec<u16>> {
        self.heldout.iter().map(|s| s.tokens.clone()).collect()
    }

    /// Write `corpus.meta.json` and `corpus.jsonl` (one sample per line, fillers
    /// then factlets then held-out).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::report::write_json(&dir.join("corpus.meta.json"), &self.params)?;
        let mut buf = Vec::new();
        for s in self.fillers.iter().chain(&self.factlets).chain(&self.heldout) {
            serde_json::to_writer(&mut buf, s)?;
            buf.write_all(b"\n")?;
        }
        crate::report::atomic_write(&dir.join("corpus.jsonl"), &buf)
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let params: CorpusParams = crate::report::read_json(&dir.join("corpus.meta.json"))?;
        let file = std::fs::File::open(dir.join("corpus.jsonl"))?;
        let mut fillers = Vec::new();
        let mut factlets = Vec::new();
        let mut heldout = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("corpus.jsonl line {}: {e}", lineno + 1)))?;
            match s.tags.first().map(String::as_str) {
                Some("filler") => fillers.push(s),
                Some("factlet") => factlets.push(s),
                Some("heldout") => heldout.push(s),
                other => {
                    return Err(Error::Format(format!(
                        "corpus.jsonl line {}: unknown tag {other:?}",
                        lineno + 1
                    )))
                }
            }
        }
        if factlets.len() != params.factlets || fillers.len() != params.filler_sequences {
            return Err(Error::Format(format!(
                "corpus.jsonl holds {} fillers / {} factlets, meta says {} / {}",
                fillers.len(),
                factlets.len(),
                params.filler_sequences,
                params.factlets
            )));
        }
        Ok(Corpus { params, fillers, factlets, heldout })
    }
}

fn reject_sample<T>(
    rng: &mut Rng,
    max_tries: usize,
    mut gen: impl FnMut(&mut Rng) -> Option<T>,
) -> Result<T> {
    for _ in 0..max_tries {
        if let Some(v) = gen(rng) {
            return Ok(v);
        }
    }
    Err(Error::Config(format!(
        "rejection sampling failed after {max_tries} tries; constraints too tight"
    )))
}

/// Filters a memorized-sequence screen applies, with its dedup policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectionCriteria {
    pub prefix_len: usize,
    pub suffix_len: usize,
    /// Teacher-forced suffix accuracy floor.
    pub min_accuracy: f64,
    /// Ceiling on edit distance between the greedy continuation and the true
    /// suffix, in tokens (= bytes).
    pub max_greedy_distance: usize,
    /// Diversity floor: distinct token values in the true suffix.
    pub min_distinct_suffix_tokens: usize,
    /// n for the near-duplicate n-gram check.
    pub dedup_ngram: usize,
    /// Pairs with Jaccard similarity above this are duplicates.
    pub dedup_jaccard: f64,
}

impl Default for CollectionCriteria {
    fn default() -> Self {
        CollectionCriteria {
            prefix_len: 32,
            suffix_len: 48,
            min_accuracy: 0.9,
            max_greedy_distance: 20,
            min_distinct_suffix_tokens: 16,
            dedup_ngram: 5,
            dedup_jaccard: 0.5,
        }
    }
}

/// A sequence that passed the memorization screen.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CollectedSample {
    pub sample: Sample,
    /// Teacher-forced suffix accuracy at collection time.
    pub accuracy: f64,
    /// Edit distance between greedy continuation and true suffix.
    pub greedy_distance: usize,
}

/// Screen candidates for verbatim memorization: trim each to
/// prefix + suffix tokens, require high teacher-forced accuracy, a greedy
/// continuation close to the true suffix, and enough suffix diversity; then
/// drop near-duplicates, keeping each cluster's most memorized member.
pub fn collect_memorized(
    model: &TransformerLM,
    candidates: &[Sample],
    crit: &CollectionCriteria,
) -> Result<Vec<CollectedSample>> {
    let scored = crate::par::par_map(candidates, |s| -> Result<Option<(f64, usize)>> {
        let need = crit.prefix_len + crit.suffix_len;
        if s.tokens.len() < need {
            return Ok(None);
        }
        let tokens = &s.tokens[..need];
        let scores = score_sequence(model, tokens, crit.prefix_len, None)?;
        let greedy = greedy_suffix(model, &tokens[..crit.prefix_len], crit.suffix_len, None)?;
        let dist = levenshtein(
            &tokens_to_bytes(&greedy),
            &tokens_to_bytes(&tokens[crit.prefix_len..]),
        );
        Ok(Some((scores.token_accuracy, dist)))
    });
    let mut flat = Vec::with_capacity(candidates.len());
    for r in scored {
        flat.push(r?);
    }
    collect_from_scored(candidates, &flat, crit)
}

fn tokens_to_bytes(tokens: &[u16]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

/// Core of the screen, separated from model evaluation: `scores[i]` is
/// `(teacher-forced accuracy, greedy edit distance)` for candidate i, or None
/// if it was too short to score.
fn collect_from_scored(
    candidates: &[Sample],
    scores: &[Option<(f64, usize)>],
    crit: &CollectionCriteria,
) -> Result<Vec<CollectedSample>> {
    if candidates.len() != scores.len() {
        return Err(Error::Config("score list does not match candidates".into()));
    }
    let need = crit.prefix_len + crit.suffix_len;
    let mut kept: Vec<CollectedSample> = Vec::new();
    for (s, sc) in candidates.iter().zip(scores) {
        let Some((accuracy, greedy_distance)) = *sc else { continue };
        let tokens = &s.tokens[..need];
        let suffix = &tokens[crit.prefix_len..];
        let distinct: HashSet<u16> = suffix.iter().copied().collect();
        if accuracy >= crit.min_accuracy
            && greedy_distance <= crit.max_greedy_distance
            && distinct.len() >= crit.min_distinct_suffix_tokens
        {
            let mut sample = s.clone();
            sample.tokens = tokens.to_vec();
            sample.prefix_len = crit.prefix_len;
            kept.push(CollectedSample { sample, accuracy, greedy_distance });
        }
    }

    // Near-duplicate clusters under the transitive closure of "n-gram Jaccard
    // above threshold"; keep each cluster's lowest greedy distance (ties break
    // to the earlier candidate).
    let n = kept.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in i + 1..n {
            let sim = jaccard_ngrams(
                &kept[i].sample.tokens,
                &kept[j].sample.tokens,
                crit.dedup_ngram,
            );
            if sim > crit.dedup_jaccard {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri] = rj;
                }
            }
        }
    }
    let mut best_of: Vec<Option<usize>> = vec![None; n];
    for i in 0..n {
        let root = find(&mut parent, i);
        match best_of[root] {
            None => best_of[root] = Some(i),
            Some(b) if kept[i].greedy_distance < kept[b].greedy_distance => {
                best_of[root] = Some(i)
            }
            _ => {}
        }
    }
    let mut keep_idx: Vec<usize> = best_of.into_iter().flatten().collect();
    keep_idx.sort_unstable();
    Ok(keep_idx.into_iter().map(|i| kept[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_params() -> CorpusParams {
        CorpusParams {
            filler_sequences: 12,
            filler_len: (8, 20),
            factlets: 6,
            factlet_len: 24,
            factlet_prefix: 8,
            factlet_reps: 3,
            heldout_sequences: 4,
            heldout_len: 16,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = Corpus::generate(small_params()).unwrap();
        let b = Corpus::generate(small_params()).unwrap();
        assert_eq!(a.factlets, b.factlets);
        assert_eq!(a.fillers, b.fillers);
        assert_eq!(a.heldout, b.heldout);
        let mut other = small_params();
        other.seed = 12;
        let c = Corpus::generate(other).unwrap();
        assert_ne!(a.factlets, c.factlets);
    }

    #[test]
    fn factlets_have_disjoint_5grams() {
        let c = Corpus::generate(small_params()).unwrap();
        for i in 0..c.factlets.len() {
            for j in i + 1..c.factlets.len() {
                let a = ngrams_of(&c.factlets[i].tokens, 5);
                let b = ngrams_of(&c.factlets[j].tokens, 5);
                assert!(a.is_disjoint(&b), "factlets {i} and {j} share a 5-gram");
            }
        }
    }

    #[test]
    fn heldout_is_disjoint_from_memorization_targets() {
        let c = Corpus::generate(small_params()).unwrap();
        let fact_grams: HashSet<Vec<u16>> = c
            .factlets
            .iter()
            .flat_map(|f| ngrams_of(&f.tokens, 5))
            .collect();
        for h in &c.heldout {
            assert!(ngrams_of(&h.tokens, 5).is_disjoint(&fact_grams));
            assert!(c.fillers.iter().all(|f| f.tokens != h.tokens));
        }
    }

    #[test]
    fn lengths_and_token_ranges_hold() {
        let p = small_params();
        let c = Corpus::generate(p.clone()).unwrap();
        for f in &c.fillers {
            assert!(f.tokens.len() >= p.filler_len.0 && f.tokens.len() <= p.filler_len.1);
            assert!(f.tokens.iter().all(|&t| t < 256));
        }
        for f in &c.factlets {
            assert_eq!(f.tokens.len(), p.factlet_len);
            assert_eq!(f.prefix_len, p.factlet_prefix);
        }
        assert_eq!(c.heldout.len(), p.heldout_sequences);
    }

    #[test]
    fn train_stream_repeats_factlets() {
        let p = small_params();
        let c = Corpus::generate(p.clone()).unwrap();
        let stream = c.train_stream();
        assert_eq!(stream.len(), p.filler_sequences + p.factlets * p.factlet_reps);
        let count = stream.iter().filter(|t| **t == c.factlets[0].tokens).count();
        assert_eq!(count, p.factlet_reps);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Corpus::generate(small_params()).unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.fillers, c.fillers);
        assert_eq!(back.factlets, c.factlets);
        assert_eq!(back.heldout, c.heldout);
    }

    #[test]
    fn random_byte_sequence_is_seeded() {
        let a = random_byte_sequence(3, 10);
        let b = random_byte_sequence(3, 10);
        let c = random_byte_sequence(4, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|&t| t < 256));
    }

    fn crit() -> CollectionCriteria {
        CollectionCriteria {
            prefix_len: 2,
            suffix_len: 6,
            min_accuracy: 0.9,
            max_greedy_distance: 2,
            min_distinct_suffix_tokens: 3,
            dedup_ngram: 3,
            dedup_jaccard: 0.5,
        }
    }

    fn cand(id: &str, tokens: Vec<u16>) -> Sample {
        Sample { id: id.into(), tokens, prefix_len: 2, tags: vec!["factlet".into()] }
    }

    #[test]
    fn screen_applies_each_filter() {
        let good = cand("a", vec![1, 2, 10, 20, 30, 40, 50, 60]);
        let low_acc = cand("b", vec![1, 2, 11, 21, 31, 41, 51, 61]);
        let far_greedy = cand("c", vec![1, 2, 12, 22, 32, 42, 52, 62]);
        let repetitive = cand("d", vec![1, 2, 7, 7, 7, 7, 7, 7]); // 1 distinct suffix token
        let short = cand("e", vec![1, 2, 3]);
        let cands = [good, low_acc, far_greedy, repetitive, short];
        let scores = [
            Some((1.0, 0)),
            Some((0.5, 0)),  // fails accuracy
            Some((1.0, 10)), // fails greedy distance
            Some((1.0, 0)),  // fails diversity
            None,            // too short to score
        ];
        let out = collect_from_scored(&cands, &scores, &crit()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].sample.id, "a");
        assert_eq!(out[0].sample.tokens.len(), 8);
    }

    #[test]
    fn dedup_keeps_best_of_transitive_cluster() {
        // a ~ b (share most 3-grams), b ~ c, but a !~ c directly: one cluster by
        // transitivity; d is unrelated.
        let a = cand("a", vec![1, 2, 3, 4, 5, 6, 7, 8]);
        let b = cand("b", vec![1, 2, 3, 4, 5, 6, 7, 9]);
        let c = cand("c", vec![2, 3, 4, 5, 6, 7, 9, 9]);
        let d = cand("d", vec![100, 101, 102, 103, 104, 105, 106, 107]);
        let sab = jaccard_ngrams(&a.tokens, &b.tokens, 3);
        let sbc = jaccard_ngrams(&b.tokens, &c.tokens, 3);
        let sac = jaccard_ngrams(&a.tokens, &c.tokens, 3);
        assert!(sab > 0.5 && sbc > 0.5, "fixture drifted: {sab} {sbc}");
        assert!(sac <= 0.5, "fixture drifted: {sac}");
        let cands = [a, b, c, d];
        let scores = [Some((1.0, 2)), Some((1.0, 0)), Some((1.0, 1)), Some((1.0, 2))];
        let out = collect_from_scored(&cands, &scores, &crit()).unwrap();
        let ids: Vec<&str> = out.iter().map(|s| s.sample.id.as_str()).collect();
        assert_eq!(ids, vec!["b", "d"]); // b has the lowest greedy distance
    }

    #[test]
    fn untrained_model_collects_nothing() {
        let cfg = ModelConfig { layers: 1, d_model: 8, d_hidden: 8, heads: 1, vocab: 256, context: 16 };
        let model = TransformerLM::new_random(cfg, 1).unwrap();
        let corpus = Corpus::generate(CorpusParams {
            factlet_len: 12,
            factlet_prefix: 4,
            ..small_params()
        })
        .unwrap();
        let crit = CollectionCriteria {
            prefix_len: 4,
            suffix_len: 8,
            min_distinct_suffix_tokens: 2,
            max_greedy_distance: 1,
            ..CollectionCriteria::default()
        };
        let out = collect_memorized(&model, &corpus.factlets, &crit).unwrap();
        assert!(out.is_empty(), "random model should not pass a 0.9 accuracy screen");
    }
}
