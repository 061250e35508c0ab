//! Deletion benchmark: drop the neurons an attribution method blames for a
//! memorized sequence and measure what breaks.
//!
//! For each target in the test split, each method's top-k neurons are masked
//! and five deltas are recorded against cached pre-deletion scores:
//!
//! * ΔSelf-Acc / ΔSelf-Dist — change in the target's teacher-forced suffix
//!   accuracy and in the byte edit distance of its teacher-forced argmax
//!   decode (a good deletion drives accuracy down and distance up);
//! * ΔNeg-Acc / ΔNeg-Dist — the same changes averaged over every other test
//!   sequence (collateral damage on other memorized content);
//! * ΔRand-PPL — perplexity change on the held-out batch (collateral damage on
//!   ordinary text).
//!
//! Summary = mean ± stderr over targets (the second stage of the two-stage
//! mean for the negative metrics). The first `dev_count` collected sequences
//! are held out of the run entirely as a tuning split.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attrib::{attribute, select_topk, AttribParams, AttributionMap, Method, Scope, SelectionSpec};
use crate::corpus::CollectedSample;
use crate::model::{perplexity, score_sequence, NeuronId, NeuronMask, SeqScores, TransformerLM};
use crate::report::{RunStamp, TimingLog};
use crate::rng::Rng;
use crate::stats::mean_stderr;
use crate::text::levenshtein;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeletionParams {
    pub k_values: Vec<f64>,
    pub scope: Scope,
    pub skip_bottom_layer: bool,
    /// Collected sequences reserved for tuning, taken from the front.
    pub dev_count: usize,
    pub attrib: AttribParams,
    /// Seeds the stochastic methods, one derived stream per (target, method).
    pub seed: u64,
}

impl Default for DeletionParams {
    fn default() -> Self {
        DeletionParams {
            k_values: vec![0.1, 0.5],
            scope: Scope::PerLayer,
            skip_bottom_layer: true,
            dev_count: 5,
            attrib: AttribParams::default(),
            seed: 0,
        }
    }
}

/// Pre-deletion scores for one test sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BeforeScore {
    pub id: String,
    pub accuracy: f64,
    /// Byte edit distance of the teacher-forced argmax decode of the suffix.
    pub distance: usize,
}

/// The five deltas for one (target, method, k).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetDeltas {
    pub target_id: String,
    pub method: Method,
    pub k_percent: f64,
    /// Neurons actually masked.
    pub selected: usize,
    pub self_acc: f64,
    pub self_dist: f64,
    pub neg_acc: f64,
    pub neg_dist: f64,
    pub rand_ppl: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DelSummary {
    pub method: Method,
    pub k_percent: f64,
    pub self_acc: SummaryStat,
    pub self_dist: SummaryStat,
    pub neg_acc: SummaryStat,
    pub neg_dist: SummaryStat,
    pub rand_ppl: SummaryStat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DelReport {
    pub stamp: RunStamp,
    pub dev_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub ppl_before: f64,
    pub before: Vec<BeforeScore>,
    pub summary: Vec<DelSummary>,
    pub per_target: Vec<TargetDeltas>,
}

impl DelReport {
    pub fn summary_for(&self, method: Method, k_percent: f64) -> Option<&DelSummary> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.k_percent == k_percent)
    }

    /// Per-target series of one metric for paired comparisons, in target order.
    pub fn series(
        &self,
        method: Method,
        k_percent: f64,
        metric: impl Fn(&TargetDeltas) -> f64,
    ) -> Vec<f64> {
        self.per_target
            .iter()
            .filter(|t| t.method == method && t.k_percent == k_percent)
            .map(metric)
            .collect()
    }
}

fn suffix_bytes(tokens: &[u16], prefix_len: usize) -> Vec<u8> {
    tokens[prefix_len..].iter().map(|&t| t as u8).collect()
}

/// Byte edit distance between the teacher-forced argmax decode of the suffix
/// (already computed in `scores`) and the true suffix. This is the Dist metric:
/// each position's prediction is conditioned on the true preceding tokens, so
/// one forward pass yields the whole decoded string.
fn predicted_distance(scores: &SeqScores, tokens: &[u16], prefix_len: usize) -> usize {
    let pred: Vec<u8> = scores.predicted_suffix.iter().map(|&t| t as u8).collect();
    levenshtein(&pred, &suffix_bytes(tokens, prefix_len))
}

/// Accuracy/distance deltas of masking `selection`, for the target and each
/// negative, plus the held-out perplexity delta. An empty selection is an
/// identity deletion: every delta is exactly zero and no model is evaluated.
pub fn eval_dropout_effect(
    model: &TransformerLM,
    selection: &[NeuronId],
    target: &CollectedSample,
    negatives: &[&CollectedSample],
    before: &BTreeMap<String, BeforeScore>,
    heldout: &[Vec<u16>],
    ppl_before: f64,
) -> Result<MaskEffect> {
    if selection.is_empty() {
        return Ok(MaskEffect {
            self_acc: 0.0,
            self_dist: 0.0,
            neg_acc: 0.0,
            neg_dist: 0.0,
            rand_ppl: 0.0,
        });
    }
    let mask = NeuronMask::dropping(&model.cfg, selection)?;
    let lookup = |id: &str| -> Result<&BeforeScore> {
        before
            .get(id)
            .ok_or_else(|| Error::Config(format!("no cached pre-deletion score for `{id}`")))
    };

    let t = &target.sample;
    let t_before = lookup(&t.id)?;
    let after = score_sequence(model, &t.tokens, t.prefix_len, Some(&mask))?;
    let dist_after = predicted_distance(&after, &t.tokens, t.prefix_len);
    let self_acc = after.token_accuracy - t_before.accuracy;
    let self_dist = dist_after as f64 - t_before.distance as f64;

    // first stage of the two-stage mean: average over this target's negatives
    let neg_results = crate::par::par_map(negatives, |n| -> Result<(f64, f64)> {
        let s = &n.sample;
        let nb = lookup(&s.id)?;
        let sc = score_sequence(model, &s.tokens, s.prefix_len, Some(&mask))?;
        let dist = predicted_distance(&sc, &s.tokens, s.prefix_len);
        Ok((sc.token_accuracy - nb.accuracy, dist as f64 - nb.distance as f64))
    });
    let mut neg_acc_sum = 0.0;
    let mut neg_dist_sum = 0.0;
    for r in &neg_results {
        let (a, d) = match r {
            Ok(v) => *v,
            Err(e) => return Err(Error::Config(e.to_string())),
        };
        neg_acc_sum += a;
        neg_dist_sum += d;
    }
    let count = negatives.len() as f64;

    let ppl_after = perplexity(model, heldout, Some(&mask))?;
    Ok(MaskEffect {
        self_acc,
        self_dist,
        neg_acc: neg_acc_sum / count,
        neg_dist: neg_dist_sum / count,
        rand_ppl: ppl_after - ppl_before,
    })
}

/// The five deltas of one mask application.
#[derive(Clone, Copy, Debug)]
pub struct MaskEffect {
    pub self_acc: f64,
    pub self_dist: f64,
    pub neg_acc: f64,
    pub neg_dist: f64,
    pub rand_ppl: f64,
}

/// Cache pre-deletion scores for every test sequence.
fn score_before(
    model: &TransformerLM,
    test: &[&CollectedSample],
) -> Result<BTreeMap<String, BeforeScore>> {
    let scored = crate::par::par_map(test, |c| -> Result<BeforeScore> {
        let s = &c.sample;
        let sc = score_sequence(model, &s.tokens, s.prefix_len, None)?;
        Ok(BeforeScore {
            id: s.id.clone(),
            accuracy: sc.token_accuracy,
            distance: predicted_distance(&sc, &s.tokens, s.prefix_len),
        })
    });
    let mut map = BTreeMap::new();
    for r in scored {
        let b = r?;
        map.insert(b.id.clone(), b);
    }
    Ok(map)
}

pub fn run_del_benchmark(
    model: &TransformerLM,
    collected: &[CollectedSample],
    heldout: &[Vec<u16>],
    methods: &[Method],
    params: &DeletionParams,
    stamp: RunStamp,
) -> Result<(DelReport, TimingLog)> {
    if methods.is_empty() || params.k_values.is_empty() {
        return Err(Error::Config("no methods or no k values requested".into()));
    }
    if collected.len() < params.dev_count + 2 {
        return Err(Error::Config(format!(
            "need at least {} collected sequences ({} dev + 2 test), have {}",
            params.dev_count + 2,
            params.dev_count,
            collected.len()
        )));
    }
    let (dev, test) = collected.split_at(params.dev_count);
    let test_refs: Vec<&CollectedSample> = test.iter().collect();

    let mut timing = TimingLog::new();
    let before = timing.time("score_before", || score_before(model, &test_refs))?;
    let ppl_before =
        timing.time("ppl_before", || perplexity(model, heldout, None))?;

    struct TargetOutcome {
        deltas: Vec<TargetDeltas>,
        method_seconds: Vec<(Method, f64)>,
    }

    let indices: Vec<usize> = (0..test_refs.len()).collect();
    let outcomes = crate::par::par_map(&indices, |&ti| -> Result<TargetOutcome> {
        let target = test_refs[ti];
        let negatives: Vec<&CollectedSample> = test_refs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != ti)
            .map(|(_, c)| *c)
            .collect();
        let mut deltas = Vec::new();
        let mut method_seconds = Vec::new();
        for (mi, &method) in methods.iter().enumerate() {
            let mut rng =
                Rng::new(params.seed).derive((ti * methods.len() + mi) as u64 + 1);
            let start = std::time::Instant::now();
            let map = attribute(
                model,
                &target.sample.tokens,
                target.sample.prefix_len,
                method,
                &params.attrib,
                &mut rng,
            )?;
            let attrib_seconds = start.elapsed().as_secs_f64();
            method_seconds.push((method, attrib_seconds));

            // identical selections at different k share one mask evaluation
            let mut cache: BTreeMap<Vec<NeuronId>, MaskEffect> = BTreeMap::new();
            for &k in &params.k_values {
                let spec = SelectionSpec {
                    k_percent: k,
                    scope: params.scope,
                    skip_bottom_layer: params.skip_bottom_layer,
                };
                let selection = select_topk(&map, &spec)?;
                let effect = match cache.get(&selection) {
                    Some(e) => *e,
                    None => {
                        let e = eval_dropout_effect(
                            model,
                            &selection,
                            target,
                            &negatives,
                            &before,
                            heldout,
                            ppl_before,
                        )?;
                        cache.insert(selection.clone(), e);
                        e
                    }
                };
                deltas.push(TargetDeltas {
                    target_id: target.sample.id.clone(),
                    method,
                    k_percent: k,
                    selected: selection.len(),
                    self_acc: effect.self_acc,
                    self_dist: effect.self_dist,
                    neg_acc: effect.neg_acc,
                    neg_dist: effect.neg_dist,
                    rand_ppl: effect.rand_ppl,
                });
            }
        }
        Ok(TargetOutcome { deltas, method_seconds })
    });

    let mut per_target = Vec::new();
    let mut seconds_by_method: Vec<(Method, f64)> = Vec::new();
    for o in outcomes {
        let o = o?;
        per_target.extend(o.deltas);
        for (m, s) in o.method_seconds {
            match seconds_by_method.iter_mut().find(|(mm, _)| *mm == m) {
                Some((_, acc)) => *acc += s,
                None => seconds_by_method.push((m, s)),
            }
        }
    }
    for (m, s) in &seconds_by_method {
        timing.record(format!("attribution.{m}"), *s);
    }

    // second stage: mean ± stderr over targets
    let mut summary = Vec::new();
    for &method in methods {
        for &k in &params.k_values {
            let rows: Vec<&TargetDeltas> = per_target
                .iter()
                .filter(|t| t.method == method && t.k_percent == k)
                .collect();
            let stat = |f: fn(&TargetDeltas) -> f64| -> Result<SummaryStat> {
                let vals: Vec<f64> = rows.iter().map(|t| f(t)).collect();
                let (mean, stderr) = mean_stderr(&vals)?;
                Ok(SummaryStat { mean, stderr })
            };
            summary.push(DelSummary {
                method,
                k_percent: k,
                self_acc: stat(|t| t.self_acc)?,
                self_dist: stat(|t| t.self_dist)?,
                neg_acc: stat(|t| t.neg_acc)?,
                neg_dist: stat(|t| t.neg_dist)?,
                rand_ppl: stat(|t| t.rand_ppl)?,
            });
        }
    }

    let report = DelReport {
        stamp,
        dev_ids: dev.iter().map(|c| c.sample.id.clone()).collect(),
        test_ids: test.iter().map(|c| c.sample.id.clone()).collect(),
        ppl_before,
        before: before.into_values().collect(),
        summary,
        per_target,
    };
    Ok((report, timing))
}

/// The summary as a CSV table: one row per (method, k), `mean±stderr` cells.
pub fn write_del_csv(report: &DelReport, path: &std::path::Path) -> Result<()> {
    let header: Vec<String> = [
        "method",
        "k_percent",
        "self_acc",
        "self_dist",
        "neg_acc",
        "neg_dist",
        "rand_ppl",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let pm = crate::report::mean_pm;
    let rows: Vec<Vec<String>> = report
        .summary
        .iter()
        .map(|s| {
            vec![
                s.method.name().to_string(),
                format!("{}", s.k_percent),
                pm(s.self_acc.mean, s.self_acc.stderr),
                pm(s.self_dist.mean, s.self_dist.stderr),
                pm(s.neg_acc.mean, s.neg_acc.stderr),
                pm(s.neg_dist.mean, s.neg_dist.stderr),
                pm(s.rand_ppl.mean, s.rand_ppl.stderr),
            ]
        })
        .collect();
    crate::report::write_csv(path, &header, &rows)
}

/// Accuracy-delta confusion matrix at one (method, k): entry (x, y) is the
/// change in test sequence y's suffix accuracy when x's selected neurons are
/// deleted. The diagonal is self-deletion.
pub fn confusion_matrix(
    model: &TransformerLM,
    collected: &[CollectedSample],
    method: Method,
    k_percent: f64,
    params: &DeletionParams,
) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if collected.len() < params.dev_count + 2 {
        return Err(Error::Config("not enough collected sequences".into()));
    }
    let (_, test) = collected.split_at(params.dev_count);
    let test_refs: Vec<&CollectedSample> = test.iter().collect();
    let before = score_before(model, &test_refs)?;

    let indices: Vec<usize> = (0..test_refs.len()).collect();
    let rows = crate::par::par_map(&indices, |&x| -> Result<Vec<f64>> {
        let target = test_refs[x];
        let mi = Method::ALL.iter().position(|m| *m == method).unwrap_or(0);
        let mut rng = Rng::new(params.seed).derive((x * Method::ALL.len() + mi) as u64 + 1);
        let map = attribute(
            model,
            &target.sample.tokens,
            target.sample.prefix_len,
            method,
            &params.attrib,
            &mut rng,
        )?;
        let spec = SelectionSpec {
            k_percent,
            scope: params.scope,
            skip_bottom_layer: params.skip_bottom_layer,
        };
        let selection = select_topk(&map, &spec)?;
        let mask = NeuronMask::dropping(&model.cfg, &selection)?;
        test_refs
            .iter()
            .map(|y| {
                let s = &y.sample;
                let acc =
                    score_sequence(model, &s.tokens, s.prefix_len, Some(&mask))?.token_accuracy;
                Ok(acc - before[&s.id].accuracy)
            })
            .collect()
    });
    let matrix = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let ids = test_refs.iter().map(|c| c.sample.id.clone()).collect();
    Ok((ids, matrix))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSweepRow {
    pub layer: usize,
    pub deleted: usize,
    pub self_acc: f64,
    pub self_dist: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerSweepReport {
    pub budget: usize,
    /// True when the budget exceeded one layer's width and was capped.
    pub capped: bool,
    pub rows: Vec<LayerSweepRow>,
}

/// Concentrate one deletion budget in a single layer at a time. The budget is
/// what per-layer selection at `k_percent` would have spread across the
/// non-bottom layers — count_per_layer(k) × (layers − 1) — capped at the layer
/// width; `budget_override` substitutes an explicit count (0 allowed: identity
/// deletion on every layer).
pub fn single_layer_sweep(
    model: &TransformerLM,
    target: &CollectedSample,
    map: &AttributionMap,
    k_percent: f64,
    budget_override: Option<usize>,
) -> Result<LayerSweepReport> {
    let cfg = &model.cfg;
    let d2 = cfg.d_hidden;
    let spec = SelectionSpec::per_layer(k_percent);
    let raw_budget = match budget_override {
        Some(n) => n,
        None => spec.count_per_layer(d2) * cfg.layers.saturating_sub(1).max(1),
    };
    let capped = raw_budget > d2;
    let budget = raw_budget.min(d2);

    let s = &target.sample;
    let sc_before = score_sequence(model, &s.tokens, s.prefix_len, None)?;
    let acc_before = sc_before.token_accuracy;
    let dist_before = predicted_distance(&sc_before, &s.tokens, s.prefix_len) as f64;

    let mut rows = Vec::with_capacity(cfg.layers);
    for layer in 1..=cfg.layers {
        if budget == 0 {
            rows.push(LayerSweepRow { layer, deleted: 0, self_acc: 0.0, self_dist: 0.0 });
            continue;
        }
        // top `budget` neurons of this layer only
        let mut ranked: Vec<(f64, usize)> = map.scores[layer - 1]
            .iter()
            .copied()
            .enumerate()
            .map(|(i, v)| (v, i))
            .collect();
        if ranked.iter().any(|(v, _)| v.is_nan()) {
            return Err(Error::Numeric(format!("NaN score in layer {layer}")));
        }
        ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("NaN screened").then(a.1.cmp(&b.1)));
        let selection: Vec<NeuronId> =
            ranked.iter().take(budget).map(|&(_, i)| NeuronId::new(layer, i)).collect();
        let mask = NeuronMask::dropping(cfg, &selection)?;
        let sc = score_sequence(model, &s.tokens, s.prefix_len, Some(&mask))?;
        let acc = sc.token_accuracy;
        let dist = predicted_distance(&sc, &s.tokens, s.prefix_len) as f64;
        rows.push(LayerSweepRow {
            layer,
            deleted: selection.len(),
            self_acc: acc - acc_before,
            self_dist: dist - dist_before,
        });
    }
    Ok(LayerSweepReport { budget, capped, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sample;
    use crate::model::ModelConfig;

    fn tiny_model() -> TransformerLM {
        let cfg = ModelConfig { layers: 2, d_model: 8, d_hidden: 8, heads: 2, vocab: 256, context: 16 };
        TransformerLM::new_random(cfg, 60).unwrap()
    }

    fn collected(n: usize) -> Vec<CollectedSample> {
        (0..n)
            .map(|i| {
                let tokens = crate::corpus::random_byte_sequence(100 + i as u64, 8);
                CollectedSample {
                    sample: Sample {
                        id: format!("seq-{i:02}"),
                        tokens,
                        prefix_len: 3,
                        tags: vec!["factlet".into()],
                    },
                    accuracy: 1.0,
                    greedy_distance: 0,
                }
            })
            .collect()
    }

    fn heldout() -> Vec<Vec<u16>> {
        vec![
            crate::corpus::random_byte_sequence(900, 10),
            crate::corpus::random_byte_sequence(901, 10),
        ]
    }

    fn fast_params() -> DeletionParams {
        DeletionParams {
            k_values: vec![10.0, 25.0],
            scope: Scope::PerLayer,
            skip_bottom_layer: false,
            dev_count: 1,
            attrib: AttribParams { ig_steps: 2, mask_steps: 2, ..AttribParams::default() },
            seed: 5,
        }
    }

    #[test]
    fn empty_selection_has_exactly_zero_effect() {
        let m = tiny_model();
        let all = collected(4);
        let test: Vec<&CollectedSample> = all[1..].iter().collect();
        let before = score_before(&m, &test).unwrap();
        let ppl0 = perplexity(&m, &heldout(), None).unwrap();
        let negatives: Vec<&CollectedSample> = test[1..].to_vec();
        let e = eval_dropout_effect(&m, &[], test[0], &negatives, &before, &heldout(), ppl0)
            .unwrap();
        assert_eq!(e.self_acc, 0.0);
        assert_eq!(e.self_dist, 0.0);
        assert_eq!(e.neg_acc, 0.0);
        assert_eq!(e.neg_dist, 0.0);
        assert_eq!(e.rand_ppl, 0.0);
    }

    #[test]
    fn effect_matches_direct_evaluation() {
        let m = tiny_model();
        let all = collected(4);
        let test: Vec<&CollectedSample> = all[1..].iter().collect();
        let before = score_before(&m, &test).unwrap();
        let ppl0 = perplexity(&m, &heldout(), None).unwrap();
        let selection = vec![NeuronId::new(1, 2), NeuronId::new(2, 5)];
        let negatives: Vec<&CollectedSample> = test[1..].to_vec();
        let e = eval_dropout_effect(
            &m, &selection, test[0], &negatives, &before, &heldout(), ppl0,
        )
        .unwrap();

        let mask = NeuronMask::dropping(&m.cfg, &selection).unwrap();
        let s = &test[0].sample;
        let want_acc = score_sequence(&m, &s.tokens, s.prefix_len, Some(&mask))
            .unwrap()
            .token_accuracy
            - before[&s.id].accuracy;
        assert_eq!(e.self_acc, want_acc);

        // two-stage mean, first stage: plain average over the two negatives
        let mut acc_sum = 0.0;
        for n in &negatives {
            let ns = &n.sample;
            let a = score_sequence(&m, &ns.tokens, ns.prefix_len, Some(&mask))
                .unwrap()
                .token_accuracy;
            acc_sum += a - before[&ns.id].accuracy;
        }
        assert!((e.neg_acc - acc_sum / 2.0).abs() < 1e-15);

        let ppl_after = perplexity(&m, &heldout(), Some(&mask)).unwrap();
        assert_eq!(e.rand_ppl, ppl_after - ppl0);
    }

    #[test]
    fn benchmark_report_is_deterministic_and_complete() {
        let m = tiny_model();
        let all = collected(5);
        let methods = [Method::Random, Method::Activations];
        let (r1, _) = run_del_benchmark(
            &m, &all, &heldout(), &methods, &fast_params(), RunStamp::new("x", 0),
        )
        .unwrap();
        let (r2, _) = run_del_benchmark(
            &m, &all, &heldout(), &methods, &fast_params(), RunStamp::new("x", 0),
        )
        .unwrap();
        assert_eq!(
            serde_json::to_string(&r1).unwrap(),
            serde_json::to_string(&r2).unwrap()
        );
        assert_eq!(r1.dev_ids, vec!["seq-00"]);
        assert_eq!(r1.test_ids.len(), 4);
        assert_eq!(r1.per_target.len(), 4 * 2 * 2); // targets × methods × k
        assert_eq!(r1.summary.len(), 2 * 2);
        for s in &r1.summary {
            assert!(s.self_acc.mean.is_finite());
            assert!(s.rand_ppl.stderr >= 0.0);
        }
        let series = r1.series(Method::Random, 10.0, |t| t.self_acc);
        assert_eq!(series.len(), 4);
    }

    #[test]
    fn benchmark_needs_enough_sequences() {
        let m = tiny_model();
        let err = run_del_benchmark(
            &m,
            &collected(2), // dev 1 + only 1 test
            &heldout(),
            &[Method::Random],
            &fast_params(),
            RunStamp::default(),
        );
        assert!(err.is_err());
    }

    #[test]
    fn confusion_diagonal_is_self_deletion() {
        let m = tiny_model();
        let all = collected(4);
        let p = fast_params();
        let (ids, matrix) = confusion_matrix(&m, &all, Method::Activations, 10.0, &p).unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(matrix.len(), 3);
        assert!(matrix.iter().all(|r| r.len() == 3));

        // row 0 must equal direct evaluation of target 0's mask on everyone
        let test: Vec<&CollectedSample> = all[1..].iter().collect();
        let before = score_before(&m, &test).unwrap();
        let mut rng = Rng::new(p.seed).derive(1); // x=0, method index 1
        let map = attribute(
            &m,
            &test[0].sample.tokens,
            test[0].sample.prefix_len,
            Method::Activations,
            &p.attrib,
            &mut rng,
        )
        .unwrap();
        let sel = select_topk(&map, &SelectionSpec::per_layer(10.0)).unwrap();
        let mask = NeuronMask::dropping(&m.cfg, &sel).unwrap();
        for (y, t) in test.iter().enumerate() {
            let s = &t.sample;
            let want = score_sequence(&m, &s.tokens, s.prefix_len, Some(&mask))
                .unwrap()
                .token_accuracy
                - before[&s.id].accuracy;
            assert_eq!(matrix[0][y], want, "column {y}");
        }
    }

    #[test]
    fn layer_sweep_covers_layers_and_caps() {
        let m = tiny_model();
        let all = collected(2);
        let map = attribute(
            &m,
            &all[0].sample.tokens,
            all[0].sample.prefix_len,
            Method::Activations,
            &fast_params().attrib,
            &mut Rng::new(1),
        )
        .unwrap();

        // 25% of 8 → 2 per layer × (2−1) layers = budget 2
        let r = single_layer_sweep(&m, &all[0], &map, 25.0, None).unwrap();
        assert_eq!(r.budget, 2);
        assert!(!r.capped);
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].layer, 1); // layer 1 included in the sweep
        assert!(r.rows.iter().all(|row| row.deleted == 2));

        // budget above the layer width gets capped
        let r = single_layer_sweep(&m, &all[0], &map, 25.0, Some(100)).unwrap();
        assert!(r.capped);
        assert_eq!(r.budget, 8);

        // zero budget → identity deletion everywhere
        let r = single_layer_sweep(&m, &all[0], &map, 25.0, Some(0)).unwrap();
        assert!(r.rows.iter().all(|row| row.self_acc == 0.0 && row.self_dist == 0.0));
        assert!(r.rows.iter().all(|row| row.deleted == 0));
    }
}
