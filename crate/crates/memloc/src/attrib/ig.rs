//! Integrated gradients over FFN hidden states.
//!
//! For each suffix position and each layer, the hidden vector at the last
//! input position is interpolated from a zero baseline to its actual value z,
//! and the gradient of the true next token's probability is accumulated along
//! the path (right-endpoint Riemann sum, `steps` points):
//!
//!   score(l, i) = mean over suffix positions of  z_i · (1/K) Σ_k ∂p/∂h_i |_(k/K)·z
//!
//! Because attention is causal, the hidden states of the truncated input equal
//! those of the full sequence at the same positions, so z comes from one full
//! forward pass and each (position, layer, step) gets its own truncated
//! forward/backward with the replacement hook.

use crate::attrib::{AttributionMap, Method};
use crate::model::{MaskBind, ReplaceHidden, Trainable, TransformerLM};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Probability of `target` at the last position of `tokens`, with layer
/// `layer`'s post-activation hidden row at that position replaced by
/// `replacement`; optionally also its gradient with respect to the replacement.
fn replaced_prob(
    model: &TransformerLM,
    tokens: &[u16],
    layer: usize,
    replacement: Vec<f64>,
    target: usize,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let last = tokens.len() - 1;
    let mut g = crate::graph::Graph::new();
    let vars = model.bind(&mut g, Trainable::Nothing);
    let leaf = g.leaf(Tensor::vector(replacement));
    let hook = ReplaceHidden { layer, pos: last, var: leaf };
    let (logits, _) = model.build_forward(&mut g, &vars, tokens, &MaskBind::None, Some(hook))?;
    let row = g.slice_rows(logits, last, 1)?;
    let sm = g.softmax_rows(row)?;
    let picked = g.gather(sm, vec![(0, target)])?;
    let p = g.sum(picked);
    let p_val = g.value(p).item();
    if !want_grad {
        return Ok((p_val, None));
    }
    let grads = g.backward(p)?;
    let grad = grads
        .get(leaf)
        .ok_or_else(|| Error::Autodiff("no gradient reached the replaced hidden state".into()))?
        .to_vec();
    Ok((p_val, Some(grad)))
}

/// Full integrated-gradients attribution map for one sequence.
pub fn integrated_gradients(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
    steps: usize,
) -> Result<AttributionMap> {
    let n = tokens.len();
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    if prefix_len == 0 || prefix_len >= n {
        return Err(Error::Config(format!(
            "prefix length {prefix_len} invalid for {n}-token sequence"
        )));
    }
    let (_, hidden) = model.logits_and_hidden(tokens, None)?;
    let cfg = &model.cfg;
    let t_count = n - prefix_len;

    // Each suffix position contributes independently; sum their score grids in
    // position order so the result never depends on scheduling.
    let per_t = crate::par::par_map_range(t_count, |t| -> Result<Vec<Vec<f64>>> {
        let last = prefix_len + t - 1;
        let truncated = &tokens[..prefix_len + t];
        let target = tokens[prefix_len + t] as usize;
        let mut grid = vec![vec![0.0; cfg.d_hidden]; cfg.layers];
        for l0 in 0..cfg.layers {
            let z = hidden[l0].row(last).to_vec();
            let mut grad_sum = vec![0.0; cfg.d_hidden];
            for k in 1..=steps {
                let alpha = k as f64 / steps as f64;
                let scaled: Vec<f64> = z.iter().map(|v| v * alpha).collect();
                let (_, grad) =
                    replaced_prob(model, truncated, l0 + 1, scaled, target, true)?;
                let grad = grad.expect("gradient requested");
                for (gs, gv) in grad_sum.iter_mut().zip(&grad) {
                    *gs += gv;
                }
            }
            for i in 0..cfg.d_hidden {
                grid[l0][i] = z[i] * grad_sum[i] / steps as f64;
            }
        }
        Ok(grid)
    });

    let mut scores = vec![vec![0.0; cfg.d_hidden]; cfg.layers];
    for r in per_t {
        let grid = r?;
        for (acc_row, row) in scores.iter_mut().zip(grid) {
            for (acc, v) in acc_row.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    for row in &mut scores {
        for v in row.iter_mut() {
            *v /= t_count as f64;
        }
    }
    Ok(AttributionMap { method: Method::IntegratedGradients, scores })
}

/// Completeness diagnostic for one (suffix position, layer) pair: returns
/// (Σᵢ score_i, p at the true hidden state, p at the zero baseline). As steps
/// grow, the sum must approach the probability difference.
pub fn ig_completeness_gap(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
    t: usize,
    layer: usize,
    steps: usize,
) -> Result<(f64, f64, f64)> {
    let n = tokens.len();
    if prefix_len == 0 || prefix_len >= n || t >= n - prefix_len {
        return Err(Error::Config(format!(
            "(prefix {prefix_len}, position {t}) invalid for {n}-token sequence"
        )));
    }
    if layer == 0 || layer > model.cfg.layers {
        return Err(Error::Config(format!("layer {layer} out of range")));
    }
    if steps == 0 {
        return Err(Error::Config("need at least one step".into()));
    }
    let (_, hidden) = model.logits_and_hidden(tokens, None)?;
    let last = prefix_len + t - 1;
    let truncated = &tokens[..prefix_len + t];
    let target = tokens[prefix_len + t] as usize;
    let z = hidden[layer - 1].row(last).to_vec();

    let mut grad_sum = vec![0.0; model.cfg.d_hidden];
    let mut p_full = 0.0;
    for k in 1..=steps {
        let alpha = k as f64 / steps as f64;
        let scaled: Vec<f64> = z.iter().map(|v| v * alpha).collect();
        let (p, grad) = replaced_prob(model, truncated, layer, scaled, target, true)?;
        if k == steps {
            p_full = p; // α = 1 reproduces the unmodified forward pass
        }
        for (gs, gv) in grad_sum.iter_mut().zip(&grad.expect("gradient requested")) {
            *gs += gv;
        }
    }
    let (p_zero, _) =
        replaced_prob(model, truncated, layer, vec![0.0; model.cfg.d_hidden], target, false)?;
    let ig_sum: f64 =
        z.iter().zip(&grad_sum).map(|(zi, gi)| zi * gi / steps as f64).sum();
    Ok((ig_sum, p_full, p_zero))
}
