//! A small decoder-only transformer LM over the byte vocabulary.
//!
//! Architecture: learned token + position embeddings, pre-norm blocks
//! (self-attention, then a two-layer FFN), a final layer norm, and an output
//! head tied to the token embedding. The FFN computes h = GELU(W·x + b),
//! o = V·h + c; "neuron (l, i)" means hidden unit i of layer l's FFN, and its
//! output column v_i (column i of V) is the weight vector that writes that
//! neuron's activation into the residual stream. Neuron dropout multiplies h by
//! a per-layer mask between the activation and V, which is arithmetically
//! identical to zeroing the column.
//!
//! Layers are numbered 1..=L in every public interface (masks, attribution maps,
//! reports); internal storage is 0-based.

mod ckpt;
mod score;
mod train;

pub use ckpt::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use score::{
    greedy_suffix, lm_loss, memorization_loss, perplexity, score_sequence, token_accuracy,
    SeqScores,
};
pub use train::{
    finetune_columns, mem_loss_node, train_base, Adam, AdamParams, FinetuneOutcome,
    FinetuneParams, TrainLog, TrainParams,
};

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of transformer blocks (L).
    pub layers: usize,
    /// Residual stream width (d1).
    pub d_model: usize,
    /// FFN hidden width (d2); L·d2 is the total neuron count.
    pub d_hidden: usize,
    pub heads: usize,
    /// Fixed at 256 by the byte tokenizer.
    pub vocab: usize,
    /// Maximum sequence length.
    pub context: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_model: 64,
            d_hidden: 256,
            heads: 4,
            vocab: crate::text::VOCAB_SIZE,
            context: 96,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.d_hidden == 0 || self.heads == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab != crate::text::VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab must be {} (byte tokenizer), got {}",
                crate::text::VOCAB_SIZE,
                self.vocab
            )));
        }
        if self.context < 2 {
            return Err(Error::Config("context must be at least 2".into()));
        }
        Ok(())
    }

    pub fn total_neurons(&self) -> usize {
        self.layers * self.d_hidden
    }
}

/// One FFN hidden unit, identified by (layer, index). Layers are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, index: usize) -> NeuronId {
        NeuronId { layer, index }
    }

    /// 0-based layer for internal array access.
    pub fn layer0(&self) -> usize {
        self.layer - 1
    }

    /// Position in the canonical flat enumeration ordered by (layer, index).
    pub fn flat(&self, d_hidden: usize) -> usize {
        self.layer0() * d_hidden + self.index
    }

    pub fn from_flat(flat: usize, d_hidden: usize) -> NeuronId {
        NeuronId { layer: flat / d_hidden + 1, index: flat % d_hidden }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer == 0 || self.layer > cfg.layers || self.index >= cfg.d_hidden {
            return Err(Error::Config(format!(
                "neuron ({}, {}) out of range for {} layers × {} hidden",
                self.layer, self.index, cfg.layers, cfg.d_hidden
            )));
        }
        Ok(())
    }
}

/// Per-layer multiplicative mask on FFN hidden activations. 1.0 everywhere means
/// "no dropout"; setting an entry to 0.0 silences that neuron.
#[derive(Clone, Debug)]
pub struct NeuronMask {
    per_layer: Vec<Tensor>,
}

impl NeuronMask {
    pub fn ones(cfg: &ModelConfig) -> NeuronMask {
        NeuronMask {
            per_layer: (0..cfg.layers).map(|_| Tensor::full(vec![cfg.d_hidden], 1.0)).collect(),
        }
    }

    /// All-ones mask with zeros at the given neurons.
    pub fn dropping(cfg: &ModelConfig, neurons: &[NeuronId]) -> Result<NeuronMask> {
        let mut per_layer: Vec<Vec<f64>> =
            (0..cfg.layers).map(|_| vec![1.0; cfg.d_hidden]).collect();
        for n in neurons {
            n.validate(cfg)?;
            per_layer[n.layer0()][n.index] = 0.0;
        }
        Ok(NeuronMask {
            per_layer: per_layer.into_iter().map(Tensor::vector).collect(),
        })
    }

    pub fn from_values(per_layer: Vec<Tensor>) -> NeuronMask {
        NeuronMask { per_layer }
    }

    pub fn layer(&self, layer0: usize) -> &Tensor {
        &self.per_layer[layer0]
    }

    pub fn zeroed_count(&self) -> usize {
        self.per_layer
            .iter()
            .map(|t| t.data().iter().filter(|&&v| v == 0.0).count())
            .sum()
    }
}

/// Which parameters become trainable leaves when binding the model into a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Inference / pure evaluation: everything is constant.
    Nothing,
    /// Base-model training: every parameter.
    All,
    /// Fine-tuning that may only move FFN output columns (all w_out matrices
    /// become leaves; the optimizer masks gradients down to selected columns).
    OutColumns,
}

/// How the FFN mask enters the forward pass.
pub enum MaskBind<'a> {
    None,
    /// Fixed values (evaluation under dropout).
    Fixed(&'a NeuronMask),
    /// One graph variable per layer (mask training); each must be a [d_hidden]
    /// vector already inserted into the same graph.
    Vars(&'a [Var]),
}

/// Replace the post-activation FFN hidden vector of one (layer, position) with a
/// graph variable — the hook integrated gradients uses to differentiate with
/// respect to a hidden state.
#[derive(Clone, Copy)]
pub struct ReplaceHidden {
    /// 1-based layer.
    pub layer: usize,
    /// Sequence position whose hidden vector is replaced.
    pub pos: usize,
    pub var: Var,
}

// Per-layer parameter slots, in storage order.
const P_LN1_G: usize = 0;
const P_LN1_B: usize = 1;
const P_WQ: usize = 2;
const P_BQ: usize = 3;
const P_WK: usize = 4;
const P_BK: usize = 5;
const P_WV: usize = 6;
const P_BV: usize = 7;
const P_WO: usize = 8;
const P_BO: usize = 9;
const P_LN2_G: usize = 10;
const P_LN2_B: usize = 11;
const P_W_IN: usize = 12;
const P_B_IN: usize = 13;
const P_W_OUT: usize = 14;
const P_B_OUT: usize = 15;
const LAYER_PARAMS: usize = 16;
const LAYER_PART_NAMES: [&str; LAYER_PARAMS] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.g", "ln2.b", "ffn.w_in", "ffn.b_in", "ffn.w_out", "ffn.b_out",
];

/// The (name, shape) manifest a checkpoint for this config must carry, in
/// storage order.
pub(crate) fn manifest_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out = Vec::with_capacity(2 + cfg.layers * LAYER_PARAMS + 2);
    out.push(("tok_embed".to_string(), vec![cfg.vocab, d]));
    out.push(("pos_embed".to_string(), vec![cfg.context, d]));
    for l in 0..cfg.layers {
        let shapes: [Vec<usize>; LAYER_PARAMS] = [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![cfg.d_hidden, d],
            vec![cfg.d_hidden],
            vec![d, cfg.d_hidden],
            vec![d],
        ];
        for (part, shape) in LAYER_PART_NAMES.iter().zip(shapes) {
            out.push((format!("layer{}.{part}", l + 1), shape));
        }
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    out
}

/// The model: a flat, named parameter list plus the config that shapes it.
/// Weight matrices are stored (out × in) and applied as x @ Wᵀ, so the FFN input
/// weight is (d_hidden × d_model) and the FFN output weight V is
/// (d_model × d_hidden) — column i of V is neuron i's output vector.
#[derive(Clone)]
pub struct TransformerLM {
    pub cfg: ModelConfig,
    params: Vec<Tensor>,
}

impl TransformerLM {
    /// Fresh random initialization: N(0, 0.02²) weights and embeddings, zero
    /// biases, unit layer-norm gains. Draw order equals parameter order, so a
    /// seed pins every weight.
    pub fn new_random(cfg: ModelConfig, seed: u64) -> Result<TransformerLM> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = Vec::with_capacity(2 + cfg.layers * LAYER_PARAMS + 2);
        let gauss = |shape: Vec<usize>, rng: &mut Rng| -> Tensor {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.normal() * 0.02).collect())
                .expect("shape/data agree")
        };
        params.push(gauss(vec![cfg.vocab, cfg.d_model], &mut rng)); // tok_embed
        params.push(gauss(vec![cfg.context, cfg.d_model], &mut rng)); // pos_embed
        for _ in 0..cfg.layers {
            params.push(Tensor::full(vec![cfg.d_model], 1.0)); // ln1.g
            params.push(Tensor::zeros(vec![cfg.d_model])); // ln1.b
            for _ in 0..4 {
                params.push(gauss(vec![cfg.d_model, cfg.d_model], &mut rng)); // wq/wk/wv/wo
                params.push(Tensor::zeros(vec![cfg.d_model])); // bias
            }
            params.push(Tensor::full(vec![cfg.d_model], 1.0)); // ln2.g
            params.push(Tensor::zeros(vec![cfg.d_model])); // ln2.b
            params.push(gauss(vec![cfg.d_hidden, cfg.d_model], &mut rng)); // w_in
            params.push(Tensor::zeros(vec![cfg.d_hidden])); // b_in
            params.push(gauss(vec![cfg.d_model, cfg.d_hidden], &mut rng)); // w_out
            params.push(Tensor::zeros(vec![cfg.d_model])); // b_out
        }
        params.push(Tensor::full(vec![cfg.d_model], 1.0)); // ln_f.g
        params.push(Tensor::zeros(vec![cfg.d_model])); // ln_f.b
        Ok(TransformerLM { cfg, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn layer_base(&self, layer0: usize) -> usize {
        2 + layer0 * LAYER_PARAMS
    }

    fn lnf_base(&self) -> usize {
        2 + self.cfg.layers * LAYER_PARAMS
    }

    pub fn param(&self, idx: usize) -> &Tensor {
        &self.params[idx]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<Tensor> {
        &mut self.params
    }

    pub fn layer_param_index(&self, layer0: usize, slot: usize) -> usize {
        self.layer_base(layer0) + slot
    }

    pub fn w_out_index(&self, layer0: usize) -> usize {
        self.layer_base(layer0) + P_W_OUT
    }

    pub fn w_out(&self, layer0: usize) -> &Tensor {
        &self.params[self.w_out_index(layer0)]
    }

    /// Canonical (name, tensor) listing, the checkpoint manifest order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.params.len());
        out.push(("tok_embed".to_string(), &self.params[0]));
        out.push(("pos_embed".to_string(), &self.params[1]));
        for l in 0..self.cfg.layers {
            for (s, part) in LAYER_PART_NAMES.iter().enumerate() {
                out.push((format!("layer{}.{part}", l + 1), &self.params[self.layer_base(l) + s]));
            }
        }
        out.push(("ln_f.g".to_string(), &self.params[self.lnf_base()]));
        out.push(("ln_f.b".to_string(), &self.params[self.lnf_base() + 1]));
        out
    }

    /// Zero column `index` of layer `layer`'s FFN output weight — the weight-space
    /// twin of masking that neuron.
    pub fn zero_out_column(&mut self, n: NeuronId) -> Result<()> {
        n.validate(&self.cfg)?;
        let idx = self.w_out_index(n.layer0());
        let w = &self.params[idx];
        let (rows, cols) = (w.rows(), w.cols());
        let mut data = w.to_vec();
        for r in 0..rows {
            data[r * cols + n.index] = 0.0;
        }
        self.params[idx] = Tensor::new(vec![rows, cols], data)?;
        Ok(())
    }

    /// SHA-256 over the config and every parameter, hex-encoded. Identifies the
    /// weights independent of where they are stored.
    pub fn weights_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).expect("config serializes"));
        for (_, t) in self.named_params() {
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Insert every parameter into `g` as leaf or constant per the policy;
    /// returns vars parallel to the parameter list.
    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> Vec<Var> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let is_leaf = match trainable {
                    Trainable::Nothing => false,
                    Trainable::All => true,
                    Trainable::OutColumns => self.is_w_out_index(i),
                };
                if is_leaf {
                    g.leaf(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    pub fn is_w_out_index(&self, i: usize) -> bool {
        i >= 2 && i < self.lnf_base() && (i - 2) % LAYER_PARAMS == P_W_OUT
    }

    /// Build the forward computation for `tokens` on top of bound parameter vars.
    /// Returns the logits node (n × vocab) and each layer's post-activation,
    /// pre-mask FFN hidden node (n × d_hidden).
    pub fn build_forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        tokens: &[u16],
        mask: &MaskBind,
        replace: Option<ReplaceHidden>,
    ) -> Result<(Var, Vec<Var>)> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Config("forward on empty token sequence".into()));
        }
        if n > self.cfg.context {
            return Err(Error::Config(format!(
                "sequence length {n} exceeds context {}",
                self.cfg.context
            )));
        }
        if let MaskBind::Vars(vs) = mask {
            if vs.len() != self.cfg.layers {
                return Err(Error::Config(format!(
                    "mask vars: {} layers expected, got {}",
                    self.cfg.layers,
                    vs.len()
                )));
            }
        }
        if let Some(r) = replace {
            if r.layer == 0 || r.layer > self.cfg.layers || r.pos >= n {
                return Err(Error::Config(format!(
                    "replace hook (layer {}, pos {}) out of range",
                    r.layer, r.pos
                )));
            }
        }

        let dh = self.cfg.d_model / self.cfg.heads;
        let positions: Vec<u16> = (0..n as u16).collect();
        let tok = g.embed(vars[0], tokens)?;
        let pos = g.embed(vars[1], &positions)?;
        let mut x = g.add(tok, pos)?;

        let mut hiddens = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let base = self.layer_base(l);
            let p = |slot: usize| vars[base + slot];

            // attention
            let xn = g.layer_norm(x, p(P_LN1_G), p(P_LN1_B))?;
            let q = {
                let m = g.matmul_nt(xn, p(P_WQ))?;
                g.add_bias(m, p(P_BQ))?
            };
            let k = {
                let m = g.matmul_nt(xn, p(P_WK))?;
                g.add_bias(m, p(P_BK))?
            };
            let v = {
                let m = g.matmul_nt(xn, p(P_WV))?;
                g.add_bias(m, p(P_BV))?
            };
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for hh in 0..self.cfg.heads {
                let qh = g.slice_cols(q, hh * dh, dh)?;
                let kh = g.slice_cols(k, hh * dh, dh)?;
                let vh = g.slice_cols(v, hh * dh, dh)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
                let att = g.causal_softmax(scaled)?;
                heads.push(g.matmul(att, vh)?);
            }
            let cat = g.concat_cols(&heads)?;
            let proj = {
                let m = g.matmul_nt(cat, p(P_WO))?;
                g.add_bias(m, p(P_BO))?
            };
            x = g.add(x, proj)?;

            // FFN
            let xn2 = g.layer_norm(x, p(P_LN2_G), p(P_LN2_B))?;
            let pre = {
                let m = g.matmul_nt(xn2, p(P_W_IN))?;
                g.add_bias(m, p(P_B_IN))?
            };
            let mut h = g.gelu(pre);
            hiddens.push(h);
            if let Some(r) = replace {
                if r.layer == l + 1 {
                    h = g.row_replace(h, r.pos, r.var)?;
                }
            }
            let hm = match mask {
                MaskBind::None => h,
                MaskBind::Fixed(m) => {
                    let mv = g.constant(m.layer(l).clone());
                    g.mul_row(h, mv)?
                }
                MaskBind::Vars(vs) => g.mul_row(h, vs[l])?,
            };
            let o = {
                let m = g.matmul_nt(hm, p(P_W_OUT))?;
                g.add_bias(m, p(P_B_OUT))?
            };
            x = g.add(x, o)?;
        }

        let lnf = self.lnf_base();
        let xf = g.layer_norm(x, vars[lnf], vars[lnf + 1])?;
        let logits = g.matmul_nt(xf, vars[0])?; // tied output head
        Ok((logits, hiddens))
    }

    /// Plain inference: logits for a token sequence, optionally under a mask.
    pub fn logits(&self, tokens: &[u16], mask: Option<&NeuronMask>) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Trainable::Nothing);
        let bind = match mask {
            Some(m) => MaskBind::Fixed(m),
            None => MaskBind::None,
        };
        let (logits, _) = self.build_forward(&mut g, &vars, tokens, &bind, None)?;
        Ok(g.value(logits).clone())
    }

    /// Logits plus each layer's post-activation hidden states (pre-mask).
    pub fn logits_and_hidden(
        &self,
        tokens: &[u16],
        mask: Option<&NeuronMask>,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, Trainable::Nothing);
        let bind = match mask {
            Some(m) => MaskBind::Fixed(m),
            None => MaskBind::None,
        };
        let (logits, hidden) = self.build_forward(&mut g, &vars, tokens, &bind, None)?;
        let hv = hidden.iter().map(|&h| g.value(h).clone()).collect();
        Ok((g.value(logits).clone(), hv))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
