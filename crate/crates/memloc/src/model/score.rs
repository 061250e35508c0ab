//! Sequence-level scores: memorization loss, LM loss, suffix accuracy, greedy
//! continuation, and batch perplexity.
//!
//! Position conventions (0-based): for tokens x_0..x_{N-1} with prefix length P,
//! the suffix is x_P..x_{N-1} (T = N - P tokens), and the prediction for suffix
//! token x_{P+t} is read from the logits at position P-1+t. The LM loss is the
//! same sum taken over every position, i.e. memorization loss with P = 1.

use crate::model::{NeuronMask, TransformerLM};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Negative log-likelihood of `target` under softmax(row), computed via a
/// max-shifted log-sum-exp.
pub fn nll_from_logits_row(row: &[f64], target: usize) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
    mx + z.ln() - row[target]
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_prefix(n: usize, prefix_len: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("sequence too short to score: {n} tokens")));
    }
    if prefix_len == 0 || prefix_len >= n {
        return Err(Error::Config(format!(
            "prefix length {prefix_len} invalid for {n}-token sequence"
        )));
    }
    Ok(())
}

/// Mean NLL of the suffix tokens given everything before them (teacher-forced).
pub fn memorization_loss(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
    mask: Option<&NeuronMask>,
) -> Result<f64> {
    check_prefix(tokens.len(), prefix_len)?;
    let logits = model.logits(tokens, mask)?;
    Ok(mem_loss_from_logits(&logits, tokens, prefix_len))
}

pub(crate) fn mem_loss_from_logits(logits: &Tensor, tokens: &[u16], prefix_len: usize) -> f64 {
    let t_count = tokens.len() - prefix_len;
    let mut total = 0.0;
    for t in 0..t_count {
        total += nll_from_logits_row(logits.row(prefix_len - 1 + t), tokens[prefix_len + t] as usize);
    }
    total / t_count as f64
}

/// Mean next-token NLL over the whole sequence (all N-1 predictions).
pub fn lm_loss(model: &TransformerLM, tokens: &[u16], mask: Option<&NeuronMask>) -> Result<f64> {
    memorization_loss(model, tokens, 1, mask)
}

/// Fraction of suffix positions where the teacher-forced argmax equals the true
/// token.
pub fn token_accuracy(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
    mask: Option<&NeuronMask>,
) -> Result<f64> {
    Ok(score_sequence(model, tokens, prefix_len, mask)?.token_accuracy)
}

/// Everything derivable from one teacher-forced forward pass.
#[derive(Clone, Debug)]
pub struct SeqScores {
    /// Mean suffix NLL.
    pub mem_loss: f64,
    /// Mean next-token NLL over all positions.
    pub lm_loss: f64,
    /// Teacher-forced suffix accuracy in [0, 1].
    pub token_accuracy: f64,
    /// Argmax prediction at each suffix position (teacher-forced).
    pub predicted_suffix: Vec<u16>,
}

pub fn score_sequence(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
    mask: Option<&NeuronMask>,
) -> Result<SeqScores> {
    check_prefix(tokens.len(), prefix_len)?;
    let logits = model.logits(tokens, mask)?;
    let t_count = tokens.len() - prefix_len;
    let mut predicted = Vec::with_capacity(t_count);
    let mut hits = 0usize;
    for t in 0..t_count {
        let pred = argmax_row(logits.row(prefix_len - 1 + t)) as u16;
        if pred == tokens[prefix_len + t] {
            hits += 1;
        }
        predicted.push(pred);
    }
    Ok(SeqScores {
        mem_loss: mem_loss_from_logits(&logits, tokens, prefix_len),
        lm_loss: mem_loss_from_logits(&logits, tokens, 1),
        token_accuracy: hits as f64 / t_count as f64,
        predicted_suffix: predicted,
    })
}

/// Generate `steps` tokens greedily from the prefix, feeding each prediction
/// back as input. Every step recomputes the full forward pass.
pub fn greedy_suffix(
    model: &TransformerLM,
    prefix: &[u16],
    steps: usize,
    mask: Option<&NeuronMask>,
) -> Result<Vec<u16>> {
    if prefix.is_empty() {
        return Err(Error::Config("greedy generation needs a non-empty prefix".into()));
    }
    if prefix.len() + steps > model.cfg.context {
        return Err(Error::Config(format!(
            "prefix {} + steps {} exceeds context {}",
            prefix.len(),
            steps,
            model.cfg.context
        )));
    }
    let mut seq = prefix.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let logits = model.logits(&seq, mask)?;
        let next = argmax_row(logits.row(seq.len() - 1)) as u16;
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Token-weighted perplexity over a batch: exp of (total NLL / total predicted
/// tokens), so long sequences count proportionally.
pub fn perplexity(
    model: &TransformerLM,
    batch: &[Vec<u16>],
    mask: Option<&NeuronMask>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("perplexity over an empty batch".into()));
    }
    let per_seq = crate::par::par_map(batch, |tokens| -> Result<(f64, usize)> {
        check_prefix(tokens.len(), 1)?;
        let logits = model.logits(tokens, mask)?;
        let n = tokens.len();
        Ok((mem_loss_from_logits(&logits, tokens, 1) * (n - 1) as f64, n - 1))
    });
    let mut nll = 0.0;
    let mut count = 0usize;
    for r in per_seq {
        let (l, c) = r?;
        nll += l;
        count += c;
    }
    Ok((nll / count as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> TransformerLM {
        let cfg = ModelConfig { layers: 2, d_model: 8, d_hidden: 12, heads: 2, vocab: 256, context: 24 };
        TransformerLM::new_random(cfg, 42).unwrap()
    }

    #[test]
    fn nll_matches_naive_softmax() {
        let row: [f64; 5] = [1.5, -0.3, 0.0, 2.2, -5.0];
        for target in 0..row.len() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let naive = -(row[target].exp() / z).ln();
            let got = nll_from_logits_row(&row, target);
            assert!((got - naive).abs() < 1e-12, "target {target}: {got} vs {naive}");
        }
    }

    #[test]
    fn nll_is_stable_at_extreme_logits() {
        let row = [700.0, 690.0, -700.0];
        let v = nll_from_logits_row(&row, 0);
        assert!(v.is_finite() && v > 0.0 && v < 1e-3);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax_row(&[0.0, 3.0, 3.0, 1.0]), 1);
        assert_eq!(argmax_row(&[5.0, 5.0, 5.0]), 0);
        assert_eq!(argmax_row(&[-1.0]), 0);
    }

    #[test]
    fn mem_loss_with_prefix_one_is_lm_loss() {
        let m = model();
        let tokens = [10u16, 20, 30, 40, 50, 60];
        let a = memorization_loss(&m, &tokens, 1, None).unwrap();
        let b = lm_loss(&m, &tokens, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mem_loss_matches_manual_readout() {
        let m = model();
        let tokens = [7u16, 90, 201, 3, 55, 128, 9];
        let prefix = 3;
        let logits = m.logits(&tokens, None).unwrap();
        let mut manual = 0.0;
        // predictions for x_3..x_6 come from logit rows 2..5
        for (row, tgt) in (2..6).zip(&tokens[3..]) {
            manual += nll_from_logits_row(logits.row(row), *tgt as usize);
        }
        manual /= 4.0;
        let got = memorization_loss(&m, &tokens, prefix, None).unwrap();
        assert!((got - manual).abs() < 1e-12);
    }

    #[test]
    fn prefix_bounds_are_enforced() {
        let m = model();
        let tokens = [1u16, 2, 3];
        assert!(memorization_loss(&m, &tokens, 0, None).is_err());
        assert!(memorization_loss(&m, &tokens, 3, None).is_err());
        assert!(memorization_loss(&m, &[5u16], 1, None).is_err());
        assert!(memorization_loss(&m, &tokens, 2, None).is_ok());
    }

    #[test]
    fn score_sequence_agrees_with_parts() {
        let m = model();
        let tokens = [4u16, 99, 31, 250, 17, 8, 77, 3];
        let s = score_sequence(&m, &tokens, 2, None).unwrap();
        assert_eq!(s.mem_loss, memorization_loss(&m, &tokens, 2, None).unwrap());
        assert_eq!(s.lm_loss, lm_loss(&m, &tokens, None).unwrap());
        assert_eq!(s.predicted_suffix.len(), 6);
        let logits = m.logits(&tokens, None).unwrap();
        let hits = (0..6)
            .filter(|&t| argmax_row(logits.row(1 + t)) as u16 == tokens[2 + t])
            .count();
        assert_eq!(s.token_accuracy, hits as f64 / 6.0);
    }

    #[test]
    fn greedy_feeds_predictions_back() {
        let m = model();
        let prefix = [11u16, 22, 33];
        let got = greedy_suffix(&m, &prefix, 4, None).unwrap();
        // manual replay
        let mut seq = prefix.to_vec();
        let mut manual = Vec::new();
        for _ in 0..4 {
            let logits = m.logits(&seq, None).unwrap();
            let next = argmax_row(logits.row(seq.len() - 1)) as u16;
            manual.push(next);
            seq.push(next);
        }
        assert_eq!(got, manual);
        assert!(greedy_suffix(&m, &[], 2, None).is_err());
        assert!(greedy_suffix(&m, &prefix, 100, None).is_err()); // exceeds context
    }

    #[test]
    fn perplexity_is_token_weighted() {
        let m = model();
        let a = vec![1u16, 2, 3, 4, 5, 6, 7, 8, 9]; // 8 predictions
        let b = vec![200u16, 201, 202]; // 2 predictions
        let la = lm_loss(&m, &a, None).unwrap();
        let lb = lm_loss(&m, &b, None).unwrap();
        let want = ((la * 8.0 + lb * 2.0) / 10.0).exp();
        let got = perplexity(&m, &[a.clone(), b], None).unwrap();
        assert!((got - want).abs() < 1e-12);
        // single sequence reduces to exp(lm loss)
        let solo = perplexity(&m, &[a], None).unwrap();
        assert!((solo - la.exp()).abs() < 1e-12);
        assert!(perplexity(&m, &[], None).is_err());
    }
}
