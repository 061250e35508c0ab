//! Neuron attribution: score every FFN hidden unit for its role in reproducing
//! one sequence's suffix, then select the top scorers.
//!
//! All methods produce an [`AttributionMap`] of layers × hidden units where
//! higher means "more responsible for this memorized continuation":
//!
//! * `zero_out` — ablate each neuron alone and record the loss increase.
//! * `activations` — mean |activation| at the predicting positions times the
//!   output-column norm.
//! * `integrated_gradients` — path-integrated gradient of the true-token
//!   probability with respect to each hidden state, zero baseline.
//! * `slimming` — learn a [0,1] mask under an L1 penalty that keeps the suffix
//!   loss low with as little mask as possible.
//! * `hard_concrete` — like slimming, but with a stochastic relaxed-Bernoulli
//!   mask and an expected-L0 penalty.
//! * `random` — uniform noise, the calibration floor.

mod ig;
mod mask_opt;

pub use ig::{ig_completeness_gap, integrated_gradients};
pub use mask_opt::{hard_concrete, slimming};

use serde::{Deserialize, Serialize};

use crate::model::{memorization_loss, NeuronId, NeuronMask, TransformerLM};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroOut,
    Activations,
    IntegratedGradients,
    Slimming,
    HardConcrete,
    Random,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::ZeroOut,
        Method::Activations,
        Method::IntegratedGradients,
        Method::Slimming,
        Method::HardConcrete,
        Method::Random,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::ZeroOut => "zero_out",
            Method::Activations => "activations",
            Method::IntegratedGradients => "integrated_gradients",
            Method::Slimming => "slimming",
            Method::HardConcrete => "hard_concrete",
            Method::Random => "random",
        }
    }

    pub fn from_name(name: &str) -> Result<Method> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown attribution method `{name}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Tunables for the gradient- and optimization-based methods.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttribParams {
    /// Riemann steps for integrated gradients.
    pub ig_steps: usize,
    /// Optimization steps for slimming / hard-concrete masks.
    pub mask_steps: usize,
    pub mask_lr: f64,
    /// L1 coefficient for slimming.
    pub l1_weight: f64,
    /// Expected-L0 coefficient for hard concrete.
    pub l0_weight: f64,
    /// Hard-concrete temperature β.
    pub hc_beta: f64,
    /// Stretch interval (γ, ζ) around [0, 1].
    pub hc_gamma: f64,
    pub hc_zeta: f64,
    /// Initial value of the hard-concrete location parameter.
    pub hc_init: f64,
}

impl Default for AttribParams {
    fn default() -> Self {
        AttribParams {
            ig_steps: 20,
            mask_steps: 80,
            mask_lr: 0.05,
            l1_weight: 0.01,
            l0_weight: 0.01,
            hc_beta: 2.0 / 3.0,
            hc_gamma: -0.1,
            hc_zeta: 1.1,
            hc_init: 2.2,
        }
    }
}

/// Per-neuron scores for one sequence: `scores[layer0][index]`, higher = more
/// implicated. Layers are 1-based in every serialized form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub method: Method,
    pub scores: Vec<Vec<f64>>,
}

impl AttributionMap {
    pub fn layers(&self) -> usize {
        self.scores.len()
    }

    pub fn d_hidden(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    pub fn score(&self, n: NeuronId) -> f64 {
        self.scores[n.layer0()][n.index]
    }

    fn check_finite(&self) -> Result<()> {
        for (l, row) in self.scores.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "{} produced a non-finite score at layer {}, neuron {i}",
                        self.method,
                        l + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Run one attribution method on one sequence. `rng` feeds the stochastic
/// methods (random scores, hard-concrete noise); deterministic methods ignore
/// it. Scores are validated finite.
pub fn attribute(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
    method: Method,
    params: &AttribParams,
    rng: &mut Rng,
) -> Result<AttributionMap> {
    let map = match method {
        Method::ZeroOut => zero_out(model, tokens, prefix_len)?,
        Method::Activations => activations(model, tokens, prefix_len)?,
        Method::IntegratedGradients => {
            integrated_gradients(model, tokens, prefix_len, params.ig_steps)?
        }
        Method::Slimming => slimming(model, tokens, prefix_len, params)?,
        Method::HardConcrete => hard_concrete(model, tokens, prefix_len, params, rng)?,
        Method::Random => random_scores(model, rng),
    };
    map.check_finite()?;
    Ok(map)
}

/// Loss increase from ablating each neuron alone: score(l, i) =
/// loss(mask with only (l, i) zeroed) − loss(no mask). One masked evaluation
/// per neuron, through the exact code path later used to apply deletions.
pub fn zero_out(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
) -> Result<AttributionMap> {
    let cfg = &model.cfg;
    let baseline = memorization_loss(model, tokens, prefix_len, None)?;
    let results = crate::par::par_map_range(cfg.total_neurons(), |flat| -> Result<f64> {
        let n = NeuronId::from_flat(flat, cfg.d_hidden);
        let mask = NeuronMask::dropping(cfg, &[n])?;
        Ok(memorization_loss(model, tokens, prefix_len, Some(&mask))? - baseline)
    });
    let mut scores = vec![vec![0.0; cfg.d_hidden]; cfg.layers];
    for (flat, r) in results.into_iter().enumerate() {
        let n = NeuronId::from_flat(flat, cfg.d_hidden);
        scores[n.layer0()][n.index] = r?;
    }
    Ok(AttributionMap { method: Method::ZeroOut, scores })
}

/// Activation–norm product: mean over predicting positions of
/// |h(l, i, pos)| · ‖output column i of layer l‖₂. One forward pass.
pub fn activations(
    model: &TransformerLM,
    tokens: &[u16],
    prefix_len: usize,
) -> Result<AttributionMap> {
    let n = tokens.len();
    if prefix_len == 0 || prefix_len >= n {
        return Err(Error::Config(format!(
            "prefix length {prefix_len} invalid for {n}-token sequence"
        )));
    }
    let (_, hidden) = model.logits_and_hidden(tokens, None)?;
    let t_count = n - prefix_len;
    let mut scores = Vec::with_capacity(model.cfg.layers);
    for (l, h) in hidden.iter().enumerate() {
        let norms = model.w_out(l).col_norms();
        let mut row = vec![0.0; model.cfg.d_hidden];
        // positions P-1 .. N-2 predict the suffix tokens
        for t in 0..t_count {
            let hr = h.row(prefix_len - 1 + t);
            for (i, item) in row.iter_mut().enumerate() {
                *item += hr[i].abs();
            }
        }
        for (i, item) in row.iter_mut().enumerate() {
            *item = *item / t_count as f64 * norms.data()[i];
        }
        scores.push(row);
    }
    Ok(AttributionMap { method: Method::Activations, scores })
}

/// Uniform noise in [0, 1): the floor any real method must beat.
pub fn random_scores(model: &TransformerLM, rng: &mut Rng) -> AttributionMap {
    let scores = (0..model.cfg.layers)
        .map(|_| (0..model.cfg.d_hidden).map(|_| rng.uniform()).collect())
        .collect();
    AttributionMap { method: Method::Random, scores }
}

/// Whether top-k counts are taken per layer or over the whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    PerLayer,
    Global,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SelectionSpec {
    /// Percentage of the eligible pool to take, e.g. 0.5 for 0.5%.
    pub k_percent: f64,
    pub scope: Scope,
    /// Exclude layer 1 from selection (and from the pool the percentage is
    /// taken of).
    pub skip_bottom_layer: bool,
}

impl SelectionSpec {
    pub fn per_layer(k_percent: f64) -> SelectionSpec {
        SelectionSpec { k_percent, scope: Scope::PerLayer, skip_bottom_layer: false }
    }

    pub fn global(k_percent: f64) -> SelectionSpec {
        SelectionSpec { k_percent, scope: Scope::Global, skip_bottom_layer: false }
    }

    /// Neurons taken from each eligible layer under per-layer scope.
    pub fn count_per_layer(&self, d_hidden: usize) -> usize {
        ((self.k_percent / 100.0 * d_hidden as f64).floor() as usize).max(1)
    }

    /// Total neurons taken under global scope, as a share of the eligible pool.
    pub fn count_global(&self, layers: usize, d_hidden: usize) -> usize {
        let eligible = if self.skip_bottom_layer { layers.saturating_sub(1) } else { layers };
        ((self.k_percent / 100.0 * (eligible * d_hidden) as f64).floor() as usize).max(1)
    }
}

/// Pick the highest-scoring neurons. Ties break toward lower layer, then lower
/// index. The result is sorted by (layer, index).
pub fn select_topk(map: &AttributionMap, spec: &SelectionSpec) -> Result<Vec<NeuronId>> {
    let layers = map.layers();
    let d_hidden = map.d_hidden();
    if layers == 0 || d_hidden == 0 {
        return Err(Error::Config("empty attribution map".into()));
    }
    if !(spec.k_percent > 0.0) || spec.k_percent > 100.0 {
        return Err(Error::Config(format!("k = {}% out of range", spec.k_percent)));
    }
    if spec.skip_bottom_layer && layers < 2 {
        return Err(Error::Config(
            "cannot skip the bottom layer of a single-layer map".into(),
        ));
    }
    let first_layer0 = if spec.skip_bottom_layer { 1 } else { 0 };

    let mut pool: Vec<(f64, NeuronId)> = Vec::new();
    for l0 in first_layer0..layers {
        for i in 0..d_hidden {
            let s = map.scores[l0][i];
            if s.is_nan() {
                return Err(Error::Numeric(format!(
                    "NaN score at layer {}, neuron {i}",
                    l0 + 1
                )));
            }
            pool.push((s, NeuronId::new(l0 + 1, i)));
        }
    }
    let by_rank = |a: &(f64, NeuronId), b: &(f64, NeuronId)| {
        b.0.partial_cmp(&a.0)
            .expect("NaN screened")
            .then_with(|| a.1.cmp(&b.1))
    };

    let mut picked: Vec<NeuronId> = match spec.scope {
        Scope::Global => {
            let count = spec.count_global(layers, d_hidden).min(pool.len());
            pool.sort_by(by_rank);
            pool.into_iter().take(count).map(|(_, n)| n).collect()
        }
        Scope::PerLayer => {
            let count = spec.count_per_layer(d_hidden).min(d_hidden);
            let mut out = Vec::with_capacity(count * (layers - first_layer0));
            for l0 in first_layer0..layers {
                let mut layer_pool: Vec<(f64, NeuronId)> =
                    pool.iter().copied().filter(|(_, n)| n.layer0() == l0).collect();
                layer_pool.sort_by(by_rank);
                out.extend(layer_pool.into_iter().take(count).map(|(_, n)| n));
            }
            out
        }
    };
    picked.sort_unstable();
    Ok(picked)
}

/// On-disk format: one JSON header line (method, shape, provenance), then one
/// `layer,neuron,score` CSV line per neuron in (layer, index) order. Scores are
/// printed in shortest-roundtrip form, so load returns bitwise-equal values.
#[derive(Serialize, Deserialize)]
struct MapHeader {
    method: Method,
    layers: usize,
    d_hidden: usize,
    stamp: crate::report::RunStamp,
}

pub fn save_attribution(
    map: &AttributionMap,
    stamp: &crate::report::RunStamp,
    path: &std::path::Path,
) -> Result<()> {
    let header = MapHeader {
        method: map.method,
        layers: map.layers(),
        d_hidden: map.d_hidden(),
        stamp: stamp.clone(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    out.push_str("layer,neuron,score\n");
    for (l0, row) in map.scores.iter().enumerate() {
        for (i, v) in row.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", l0 + 1, i, v));
        }
    }
    crate::report::atomic_write(path, out.as_bytes())
}

pub fn load_attribution(
    path: &std::path::Path,
) -> Result<(AttributionMap, crate::report::RunStamp)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: MapHeader = serde_json::from_str(
        lines.next().ok_or_else(|| Error::Format("empty attribution file".into()))?,
    )
    .map_err(|e| Error::Format(format!("attribution header: {e}")))?;
    match lines.next() {
        Some("layer,neuron,score") => {}
        other => {
            return Err(Error::Format(format!(
                "expected attribution column header, got {other:?}"
            )))
        }
    }
    let mut scores = vec![vec![f64::NAN; header.d_hidden]; header.layers];
    let mut seen = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        fn field<'a>(s: Option<&'a str>, lineno: usize) -> Result<&'a str> {
            s.ok_or_else(|| {
                Error::Format(format!("attribution line {lineno}: too few fields"))
            })
        }
        let mut parts = line.splitn(3, ',');
        let layer: usize = field(parts.next(), lineno + 3)?
            .parse()
            .map_err(|e| Error::Format(format!("attribution line {}: {e}", lineno + 3)))?;
        let neuron: usize = field(parts.next(), lineno + 3)?
            .parse()
            .map_err(|e| Error::Format(format!("attribution line {}: {e}", lineno + 3)))?;
        let score: f64 = field(parts.next(), lineno + 3)?
            .parse()
            .map_err(|e| Error::Format(format!("attribution line {}: {e}", lineno + 3)))?;
        if layer == 0 || layer > header.layers || neuron >= header.d_hidden {
            return Err(Error::Format(format!(
                "attribution line {}: neuron ({layer}, {neuron}) out of bounds",
                lineno + 3
            )));
        }
        scores[layer - 1][neuron] = score;
        seen += 1;
    }
    if seen != header.layers * header.d_hidden {
        return Err(Error::Format(format!(
            "attribution file holds {seen} scores, header promises {}",
            header.layers * header.d_hidden
        )));
    }
    Ok((AttributionMap { method: header.method, scores }, header.stamp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    pub(super) fn tiny_model() -> TransformerLM {
        let cfg = ModelConfig { layers: 2, d_model: 8, d_hidden: 6, heads: 2, vocab: 256, context: 16 };
        TransformerLM::new_random(cfg, 33).unwrap()
    }

    pub(super) const TOKENS: [u16; 8] = [5, 120, 33, 7, 99, 250, 14, 61];

    #[test]
    fn method_names_roundtrip() {
        for m in Method::ALL {
            assert_eq!(Method::from_name(m.name()).unwrap(), m);
        }
        assert!(Method::from_name("nope").is_err());
    }

    #[test]
    fn zero_out_matches_independent_ablation() {
        let m = tiny_model();
        let map = zero_out(&m, &TOKENS, 3).unwrap();
        let base = memorization_loss(&m, &TOKENS, 3, None).unwrap();
        for layer in 1..=2 {
            for i in 0..6 {
                let id = NeuronId::new(layer, i);
                let mask = NeuronMask::dropping(&m.cfg, &[id]).unwrap();
                let masked = memorization_loss(&m, &TOKENS, 3, Some(&mask)).unwrap();
                // same arithmetic path → exact agreement
                assert_eq!(map.score(id), masked - base, "neuron {id:?}");
            }
        }
    }

    #[test]
    fn activations_match_manual_formula() {
        let m = tiny_model();
        let prefix = 3;
        let map = activations(&m, &TOKENS, prefix).unwrap();
        let (_, hidden) = m.logits_and_hidden(&TOKENS, None).unwrap();
        let t_count = TOKENS.len() - prefix;
        for l0 in 0..2 {
            let norms = m.w_out(l0).col_norms();
            for i in 0..6 {
                let mut acc = 0.0;
                for t in 0..t_count {
                    acc += hidden[l0].row(prefix - 1 + t)[i].abs();
                }
                let want = acc / t_count as f64 * norms.data()[i];
                let got = map.scores[l0][i];
                assert!((got - want).abs() < 1e-15, "layer {l0} neuron {i}");
            }
        }
    }

    #[test]
    fn random_scores_are_seeded_uniform() {
        let m = tiny_model();
        let a = random_scores(&m, &mut Rng::new(1));
        let b = random_scores(&m, &mut Rng::new(1));
        let c = random_scores(&m, &mut Rng::new(2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        for row in &a.scores {
            assert!(row.iter().all(|v| (0.0..1.0).contains(v)));
        }
    }

    fn toy_map() -> AttributionMap {
        // 3 layers × 4 neurons with distinctive values
        AttributionMap {
            method: Method::Activations,
            scores: vec![
                vec![0.9, 0.1, 0.5, 0.5],
                vec![0.8, 0.2, 0.0, 0.6],
                vec![0.3, 0.95, 0.4, 0.05],
            ],
        }
    }

    #[test]
    fn per_layer_selection_counts_and_ties() {
        let map = toy_map();
        // floor(30% of 4) = 1 per layer
        let sel = select_topk(&map, &SelectionSpec::per_layer(30.0)).unwrap();
        assert_eq!(
            sel,
            vec![NeuronId::new(1, 0), NeuronId::new(2, 0), NeuronId::new(3, 1)]
        );
        // 50% of 4 = 2 per layer; layer 1 has a tie at 0.5 → lower index wins
        let sel = select_topk(&map, &SelectionSpec::per_layer(50.0)).unwrap();
        assert!(sel.contains(&NeuronId::new(1, 2)));
        assert!(!sel.contains(&NeuronId::new(1, 3)));
        assert_eq!(sel.len(), 6);
        // tiny k still takes one per layer
        let sel = select_topk(&map, &SelectionSpec::per_layer(0.1)).unwrap();
        assert_eq!(sel.len(), 3);
    }

    #[test]
    fn global_selection_counts_and_order() {
        let map = toy_map();
        // floor(25% of 12) = 3 globally: 0.95, 0.9, 0.8
        let sel = select_topk(&map, &SelectionSpec::global(25.0)).unwrap();
        assert_eq!(
            sel,
            vec![NeuronId::new(1, 0), NeuronId::new(2, 0), NeuronId::new(3, 1)]
        );
        // result is (layer, index)-sorted regardless of score order
        let sel = select_topk(&map, &SelectionSpec::global(50.0)).unwrap();
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sel, sorted);
    }

    #[test]
    fn skip_bottom_layer_shrinks_the_pool() {
        let map = toy_map();
        let spec = SelectionSpec {
            k_percent: 25.0,
            scope: Scope::Global,
            skip_bottom_layer: true,
        };
        // pool is layers 2..3 → 8 neurons → floor(2) = 2: 0.95 and 0.8
        let sel = select_topk(&map, &spec).unwrap();
        assert_eq!(sel, vec![NeuronId::new(2, 0), NeuronId::new(3, 1)]);
        assert!(sel.iter().all(|n| n.layer >= 2));

        let spec = SelectionSpec {
            k_percent: 30.0,
            scope: Scope::PerLayer,
            skip_bottom_layer: true,
        };
        let sel = select_topk(&map, &spec).unwrap();
        assert_eq!(sel, vec![NeuronId::new(2, 0), NeuronId::new(3, 1)]);
    }

    #[test]
    fn selection_rejects_bad_inputs() {
        let map = toy_map();
        assert!(select_topk(&map, &SelectionSpec::global(0.0)).is_err());
        assert!(select_topk(&map, &SelectionSpec::global(101.0)).is_err());
        let mut nan_map = map.clone();
        nan_map.scores[1][1] = f64::NAN;
        assert!(select_topk(&nan_map, &SelectionSpec::global(10.0)).is_err());
        let single = AttributionMap { method: Method::Random, scores: vec![vec![1.0, 2.0]] };
        let spec = SelectionSpec {
            k_percent: 50.0,
            scope: Scope::Global,
            skip_bottom_layer: true,
        };
        assert!(select_topk(&single, &spec).is_err());
    }

    #[test]
    fn attribution_file_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        let m = tiny_model();
        let map = activations(&m, &TOKENS, 2).unwrap();
        let stamp = crate::report::RunStamp::new("cafe", 9);
        save_attribution(&map, &stamp, &path).unwrap();
        let (back, got_stamp) = load_attribution(&path).unwrap();
        assert_eq!(got_stamp, stamp);
        assert_eq!(back.method, map.method);
        for (a, b) in back.scores.iter().flatten().zip(map.scores.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // identical rewrite → identical bytes
        let bytes1 = std::fs::read(&path).unwrap();
        save_attribution(&map, &stamp, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn attribution_file_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.csv");
        let m = tiny_model();
        let map = activations(&m, &TOKENS, 2).unwrap();
        save_attribution(&map, &crate::report::RunStamp::default(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();

        // drop last line → count mismatch
        let truncated: Vec<&str> = text.lines().collect();
        std::fs::write(&path, truncated[..truncated.len() - 1].join("\n")).unwrap();
        assert!(load_attribution(&path).is_err());

        // garbage header
        std::fs::write(&path, "not json\nlayer,neuron,score\n").unwrap();
        assert!(load_attribution(&path).is_err());
    }

    #[test]
    fn attribute_dispatch_covers_every_method() {
        let m = tiny_model();
        let params = AttribParams { ig_steps: 3, mask_steps: 4, ..AttribParams::default() };
        for method in Method::ALL {
            let mut rng = Rng::new(7);
            let map = attribute(&m, &TOKENS, 3, method, &params, &mut rng).unwrap();
            assert_eq!(map.method, method);
            assert_eq!(map.layers(), 2);
            assert_eq!(map.d_hidden(), 6);
        }
    }
}
