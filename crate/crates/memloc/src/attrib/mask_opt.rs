//! Learned-mask attributions.
//!
//! Both methods train a per-neuron gate on the frozen model so that the
//! sequence's suffix loss stays low while a sparsity penalty pushes gates shut;
//! gates that stay open mark the neurons the continuation depends on.
//!
//! * Slimming: the gate IS the mask value, projected to [0, 1] after every
//!   Adam step, with an L1 penalty. Score = final mask value.
//! * Hard concrete: the gate is a stretched, clamped sigmoid of
//!   (logit(u) + log α)/β with fresh uniform noise u each step, penalized by
//!   the expected number of open gates, sigmoid(log α − β·ln(−γ/ζ)).
//!   Score = sigmoid(final log α), the noise-free gate probability.

use crate::attrib::{AttribParams, AttributionMap, Method};
use crate::graph::{Graph, Var};
use crate::model::{mem_loss_node, Adam, AdamParams, MaskBind, Trainable, TransformerLM};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// β·ln(−γ/ζ): the location shift that turns a gate's log α into its
/// probability of being open under the stretched distribution.
pub(crate) fn l0_shift(beta: f64, gamma: f64, zeta: f64) -> f64 {
    beta * (-gamma / zeta).ln()
}

fn check_mask_params(params: &AttribParams) -> Result<()> {
    if params.mask_steps == 0 {
        return Err(Error::Config("mask training needs at least one step".into()));
    }
    if !(params.hc_beta > 0.0 && params.hc_gamma < 0.0 && params.hc_zeta > 1.0) {
        return Err(Error::Config(format!(
            "hard-concrete stretch (β={}, γ={}, ζ={}) must satisfy β>0, γ<0, ζ>1",
            params.hc_beta, params.hc_gamma, params.hc_zeta
        )));
    }
    Ok(())
}

fn sum_over_layers(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Config("no layers".into()))?;
    it.try_fold(first, |acc, t| g.add(acc, t))
}

/// L1-penalized mask training; scores are the final mask values in [0, 1].
pub fn slimming(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
    params: &AttribParams,
) -> Result<AttributionMap> {
    check_mask_params(params)?;
    let cfg = &model.cfg;
    let mut masks: Vec<Tensor> =
        (0..cfg.layers).map(|_| Tensor::full(vec![cfg.d_hidden], 1.0)).collect();
    let mut opt = Adam::new(AdamParams::with_lr(params.mask_lr), &masks);

    for step in 0..params.mask_steps {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, Trainable::Nothing);
        let mask_vars: Vec<Var> = masks.iter().map(|m| g.leaf(m.clone())).collect();
        let (logits, _) =
            model.build_forward(&mut g, &vars, tokens, &MaskBind::Vars(&mask_vars), None)?;
        let mem = mem_loss_node(&mut g, logits, tokens, prefix_len)?;
        let l1_terms: Vec<Var> = mask_vars
            .iter()
            .map(|&mv| {
                let a = g.abs(mv);
                g.sum(a)
            })
            .collect();
        let l1 = sum_over_layers(&mut g, l1_terms)?;
        let penalty = g.scale(l1, params.l1_weight);
        let loss = g.add(mem, penalty)?;
        let loss_val = g.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite slimming loss at step {step}"
            )));
        }
        let grads = g.backward(loss)?;
        let gvec: Vec<Option<Tensor>> =
            mask_vars.iter().map(|&v| grads.get(v).cloned()).collect();
        opt.step(&mut masks, &gvec)?;
        // project back to the box — the mask is a mask, not a free parameter
        for m in masks.iter_mut() {
            *m = m.map(|v| v.clamp(0.0, 1.0));
        }
    }
    let scores = masks.iter().map(|m| m.to_vec()).collect();
    Ok(AttributionMap { method: Method::Slimming, scores })
}

/// Stochastic-gate mask training; scores are each gate's noise-free open
/// probability sigmoid(log α).
pub fn hard_concrete(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
    params: &AttribParams,
    rng: &mut Rng,
) -> Result<AttributionMap> {
    check_mask_params(params)?;
    let cfg = &model.cfg;
    let shift = l0_shift(params.hc_beta, params.hc_gamma, params.hc_zeta);
    let mut log_alpha: Vec<Tensor> =
        (0..cfg.layers).map(|_| Tensor::full(vec![cfg.d_hidden], params.hc_init)).collect();
    let mut opt = Adam::new(AdamParams::with_lr(params.mask_lr), &log_alpha);

    for step in 0..params.mask_steps {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, Trainable::Nothing);
        let alpha_vars: Vec<Var> = log_alpha.iter().map(|t| g.leaf(t.clone())).collect();

        // fresh noise per step, drawn in (layer, neuron) order
        let mut mask_vars = Vec::with_capacity(cfg.layers);
        for &av in &alpha_vars {
            let noise: Vec<f64> = (0..cfg.d_hidden)
                .map(|_| crate::math::logit(rng.uniform().clamp(1e-12, 1.0 - 1e-12)))
                .collect();
            let nv = g.constant(Tensor::vector(noise));
            let pre = g.add(av, nv)?;
            let scaled = g.scale(pre, 1.0 / params.hc_beta);
            let s = g.sigmoid(scaled);
            let stretched = g.scale(s, params.hc_zeta - params.hc_gamma);
            let shifted = g.add_scalar(stretched, params.hc_gamma);
            mask_vars.push(g.clamp01(shifted));
        }

        let (logits, _) =
            model.build_forward(&mut g, &vars, tokens, &MaskBind::Vars(&mask_vars), None)?;
        let mem = mem_loss_node(&mut g, logits, tokens, prefix_len)?;
        let l0_terms: Vec<Var> = alpha_vars
            .iter()
            .map(|&av| {
                let moved = g.add_scalar(av, -shift);
                let p_open = g.sigmoid(moved);
                g.sum(p_open)
            })
            .collect();
        let l0 = sum_over_layers(&mut g, l0_terms)?;
        let penalty = g.scale(l0, params.l0_weight);
        let loss = g.add(mem, penalty)?;
        let loss_val = g.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite hard-concrete loss at step {step}"
            )));
        }
        let grads = g.backward(loss)?;
        let gvec: Vec<Option<Tensor>> =
            alpha_vars.iter().map(|&v| grads.get(v).cloned()).collect();
        opt.step(&mut log_alpha, &gvec)?;
    }
    let scores = log_alpha
        .iter()
        .map(|t| t.data().iter().map(|&v| crate::math::sigmoid(v)).collect())
        .collect();
    Ok(AttributionMap { method: Method::HardConcrete, scores })
}
