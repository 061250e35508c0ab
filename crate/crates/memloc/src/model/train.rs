//! Optimization: Adam, base-model training on a token corpus, and the
//! column-restricted fine-tuning used to graft a new sequence into a model.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::model::{MaskBind, NeuronId, Trainable, TransformerLM};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> AdamParams {
        AdamParams { lr, ..AdamParams::default() }
    }
}

/// Adam with bias correction. State tensors mirror the parameter list it was
/// created for; a parameter whose gradient is `None` in a step keeps both its
/// value and its moment state untouched. A gradient that is exactly zero at a
/// coordinate leaves that coordinate bitwise unchanged (the update term is
/// lr·0/(√0+ε) = 0), which is what freezes non-selected columns during
/// fine-tuning.
pub struct Adam {
    hp: AdamParams,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(hp: AdamParams, params: &[Tensor]) -> Adam {
        Adam {
            hp,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = (self.hp.beta1, self.hp.beta2);
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != params[i].shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            let gd = g.data();
            let mut m = self.m[i].to_vec();
            let mut v = self.v[i].to_vec();
            let mut p = params[i].to_vec();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * gd[j];
                v[j] = b2 * v[j] + (1.0 - b2) * gd[j] * gd[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.hp.lr * mh / (vh.sqrt() + self.hp.eps);
            }
            let shape = params[i].shape().to_vec();
            self.m[i] = Tensor::new(shape.clone(), m)?;
            self.v[i] = Tensor::new(shape.clone(), v)?;
            params[i] = Tensor::new(shape, p)?;
        }
        Ok(())
    }
}

/// Attach the teacher-forced suffix loss to already-built logits: the mean NLL
/// of tokens x_P..x_{N-1} read from logit rows P-1..N-2. With prefix_len 1 this
/// is the full LM loss.
pub fn mem_loss_node(
    g: &mut Graph,
    logits: Var,
    tokens: &[u16],
    prefix_len: usize,
) -> Result<Var> {
    let n = tokens.len();
    if n < 2 || prefix_len == 0 || prefix_len >= n {
        return Err(Error::Config(format!(
            "loss node: prefix {prefix_len} invalid for {n}-token sequence"
        )));
    }
    let lsm = g.log_softmax_rows(logits)?;
    let picks: Vec<(usize, usize)> =
        (0..n - prefix_len).map(|t| (prefix_len - 1 + t, tokens[prefix_len + t] as usize)).collect();
    let t_count = picks.len();
    let gathered = g.gather(lsm, picks)?;
    let total = g.sum(gathered);
    Ok(g.scale(total, -1.0 / t_count as f64))
}

#[derive(Clone, Debug)]
pub struct TrainParams {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamParams,
    /// Seeds both the weight init and the batch sampler.
    pub seed: u64,
    /// Record the running loss every this many steps (0 = only the last).
    pub log_every: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            steps: 2000,
            batch_size: 16,
            adam: AdamParams::default(),
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// (step, mean batch loss) samples.
    pub losses: Vec<(usize, f64)>,
    pub final_loss: f64,
}

/// Train a fresh model on the corpus by uniform with-replacement batch sampling.
/// Fully deterministic for a given (config, corpus, params) triple.
pub fn train_base(
    cfg: crate::model::ModelConfig,
    corpus: &[Vec<u16>],
    tp: &TrainParams,
) -> Result<(TransformerLM, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    for (i, seq) in corpus.iter().enumerate() {
        if seq.len() < 2 || seq.len() > cfg.context {
            return Err(Error::Config(format!(
                "corpus sequence {i} has length {} (need 2..={})",
                seq.len(),
                cfg.context
            )));
        }
    }
    if tp.batch_size == 0 || tp.steps == 0 {
        return Err(Error::Config("steps and batch_size must be positive".into()));
    }

    let mut model = TransformerLM::new_random(cfg, tp.seed)?;
    let mut batch_rng = Rng::new(tp.seed).derive(1);
    let mut opt = Adam::new(tp.adam, model.params());
    let mut log = TrainLog::default();

    for step in 0..tp.steps {
        let idx: Vec<usize> =
            (0..tp.batch_size).map(|_| batch_rng.below_usize(corpus.len())).collect();
        let results = crate::par::par_map(&idx, |&i| item_loss_and_grads(&model, &corpus[i]));

        let mut sum_loss = 0.0;
        let mut acc: Vec<Option<Tensor>> = vec![None; model.params().len()];
        for r in results {
            let (loss, grads) = r?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at step {step}"
                )));
            }
            sum_loss += loss;
            for (slot, g) in acc.iter_mut().zip(grads) {
                match (slot.as_mut(), g) {
                    (Some(a), Some(g)) => *a = a.add(&g)?,
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
        }
        let scale = 1.0 / tp.batch_size as f64;
        let mean: Vec<Option<Tensor>> =
            acc.into_iter().map(|o| o.map(|t| t.scale(scale))).collect();
        opt.step(model.params_mut(), &mean)?;

        let mean_loss = sum_loss * scale;
        let last = step + 1 == tp.steps;
        if last || (tp.log_every > 0 && step % tp.log_every == 0) {
            log.losses.push((step, mean_loss));
        }
        if last {
            log.final_loss = mean_loss;
        }
    }
    Ok((model, log))
}

fn item_loss_and_grads(
    model: &TransformerLM,
    tokens: &[u16],
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Trainable::All);
    let (logits, _) = model.build_forward(&mut g, &vars, tokens, &MaskBind::None, None)?;
    let loss = mem_loss_node(&mut g, logits, tokens, 1)?;
    let loss_val = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((loss_val, vars.iter().map(|&v| grads.get(v).cloned()).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneParams {
    pub adam: AdamParams,
    pub max_steps: usize,
    /// Stop once the full-sequence LM loss falls below this.
    pub loss_threshold: f64,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        FinetuneParams { adam: AdamParams::with_lr(0.1), max_steps: 2000, loss_threshold: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub steps_used: usize,
    pub final_loss: f64,
    pub converged: bool,
}

/// Drive the model's LM loss on one sequence below a threshold while changing
/// only the FFN output columns named in `targets`. Every other coordinate —
/// including other columns of the same matrices — stays bitwise identical.
pub fn finetune_columns(
    model: &mut TransformerLM,
    tokens: &[u16],
    targets: &[NeuronId],
    fp: &FinetuneParams,
) -> Result<FinetuneOutcome> {
    if targets.is_empty() {
        return Err(Error::Config("fine-tune target set is empty".into()));
    }
    let cfg = model.cfg.clone();
    let mut cols_by_layer: Vec<Vec<usize>> = vec![Vec::new(); cfg.layers];
    for t in targets {
        t.validate(&cfg)?;
        cols_by_layer[t.layer0()].push(t.index);
    }

    // Optimizer over the w_out list only, in layer order.
    let w_outs: Vec<Tensor> =
        (0..cfg.layers).map(|l| model.w_out(l).clone()).collect();
    let mut opt = Adam::new(fp.adam, &w_outs);

    let mut steps_used = 0;
    loop {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, Trainable::OutColumns);
        let (logits, _) = model.build_forward(&mut g, &vars, tokens, &MaskBind::None, None)?;
        let loss = mem_loss_node(&mut g, logits, tokens, 1)?;
        let loss_val = g.value(loss).item();
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite fine-tune loss after {steps_used} steps"
            )));
        }
        if loss_val < fp.loss_threshold {
            return Ok(FinetuneOutcome { steps_used, final_loss: loss_val, converged: true });
        }
        if steps_used == fp.max_steps {
            return Ok(FinetuneOutcome { steps_used, final_loss: loss_val, converged: false });
        }

        let grads = g.backward(loss)?;
        let mut masked: Vec<Option<Tensor>> = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let var = vars[model.w_out_index(l)];
            masked.push(match grads.get(var) {
                Some(grad) if !cols_by_layer[l].is_empty() => {
                    Some(keep_columns(grad, &cols_by_layer[l])?)
                }
                _ => None,
            });
        }
        let mut current: Vec<Tensor> =
            (0..cfg.layers).map(|l| model.w_out(l).clone()).collect();
        opt.step(&mut current, &masked)?;
        for (l, t) in current.into_iter().enumerate() {
            let idx = model.w_out_index(l);
            model.params_mut()[idx] = t;
        }
        steps_used += 1;
    }
}

/// Zero every column of `grad` not listed in `keep`.
fn keep_columns(grad: &Tensor, keep: &[usize]) -> Result<Tensor> {
    let (rows, cols) = (grad.rows(), grad.cols());
    let mut out = vec![0.0; rows * cols];
    let src = grad.data();
    for r in 0..rows {
        for &c in keep {
            out[r * cols + c] = src[r * cols + c];
        }
    }
    Tensor::new(vec![rows, cols], out)
}
