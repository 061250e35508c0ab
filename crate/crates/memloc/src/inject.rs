//! Injection benchmark: plant a known set of neurons, then ask each attribution
//! method to find them.
//!
//! For sequence i, a fresh random byte string is grafted into a copy of the
//! base model by fine-tuning only a randomly drawn target set of neurons (just
//! their FFN output columns) until the sequence is memorized (LM loss below a
//! threshold). That target set is the ground truth: every attribution method
//! scores the fine-tuned model on the injected sequence, the top k% are
//! selected, and recall against the target set is recorded.
//! Sequences that fail to memorize within the step budget are reported but
//! excluded from the averages.

use serde::{Deserialize, Serialize};

use crate::attrib::{attribute, select_topk, AttribParams, Method, Scope, SelectionSpec};
use crate::corpus::random_byte_sequence;
use crate::model::{finetune_columns, FinetuneParams, NeuronId, TransformerLM};
use crate::report::{RunStamp, TimingLog};
use crate::rng::Rng;
use crate::stats::mean_stderr;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InjectParams {
    /// Number of sequences to inject.
    pub sequences: usize,
    /// Token length of each injected sequence (prefix is the first token).
    pub seq_len: usize,
    /// Size of the injected target set as a percentage of all neurons.
    pub gamma_percent: f64,
    /// Added to each sequence index to form its seed, so shifting it re-draws
    /// every sequence and its target set.
    pub seed_offset: u64,
    /// Recall is evaluated at each of these k percentages.
    pub k_values: Vec<f64>,
    pub finetune: FinetuneParams,
    pub attrib: AttribParams,
}

impl Default for InjectParams {
    fn default() -> Self {
        InjectParams {
            sequences: 20,
            seq_len: 48,
            gamma_percent: 1.0,
            seed_offset: 0,
            k_values: vec![0.5, 1.0, 2.0, 5.0],
            finetune: FinetuneParams::default(),
            attrib: AttribParams::default(),
        }
    }
}

impl InjectParams {
    pub fn gamma_size(&self, total_neurons: usize) -> usize {
        ((self.gamma_percent / 100.0 * total_neurons as f64).round() as usize).max(1)
    }

    pub fn validate(&self, total_neurons: usize) -> Result<()> {
        if self.sequences == 0 {
            return Err(Error::Config("need at least one injected sequence".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config("injected sequences need at least 2 tokens".into()));
        }
        if self.k_values.is_empty() {
            return Err(Error::Config("no k values to evaluate".into()));
        }
        if self.gamma_size(total_neurons) > total_neurons {
            return Err(Error::Config("injected target set larger than the network".into()));
        }
        Ok(())
    }
}

/// Draw the target set for sequence `seed`: uniform distinct neurons,
/// sorted (layer, index).
pub fn sample_injection_set(
    seed: u64,
    total_layers: usize,
    d_hidden: usize,
    size: usize,
) -> Result<Vec<NeuronId>> {
    let total = total_layers * d_hidden;
    if size == 0 || size > total {
        return Err(Error::Config(format!(
            "injection set size {size} out of range for {total} neurons"
        )));
    }
    // stream 1: the sequence bytes are stream 0 of the same seed
    let mut rng = Rng::new(seed).derive(1);
    let flats = rng.sample_subset(total, size);
    Ok(flats.into_iter().map(|f| NeuronId::from_flat(f, d_hidden)).collect())
}

/// |selected ∩ truth| / |truth| as a percentage.
pub fn recall_percent(selected: &[NeuronId], truth: &[NeuronId]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Config("recall against an empty ground-truth set".into()));
    }
    let set: std::collections::HashSet<&NeuronId> = truth.iter().collect();
    let hits = selected.iter().filter(|n| set.contains(n)).count();
    Ok(hits as f64 / truth.len() as f64 * 100.0)
}

/// One recall measurement.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecallEntry {
    pub method: Method,
    pub k_percent: f64,
    pub scope: Scope,
    pub recall: f64,
}

/// Everything recorded about one injected sequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeqRecord {
    pub index: usize,
    pub seed: u64,
    pub converged: bool,
    pub finetune_steps: usize,
    pub final_loss: f64,
    /// Empty when the sequence did not converge.
    pub recalls: Vec<RecallEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummaryCell {
    pub k_percent: f64,
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub cells: Vec<SummaryCell>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InjReport {
    pub stamp: RunStamp,
    pub gamma_size: usize,
    pub sequences: usize,
    pub converged: usize,
    pub non_converged_indices: Vec<usize>,
    pub k_values: Vec<f64>,
    /// Primary: per-layer top-k selection.
    pub per_layer: Vec<MethodSummary>,
    /// Secondary: network-wide top-k selection.
    pub global: Vec<MethodSummary>,
    pub per_sequence: Vec<SeqRecord>,
}

impl InjReport {
    /// Per-sequence recall vector for one (method, k, scope), converged
    /// sequences only, in sequence order — the paired-sample view.
    pub fn recall_series(&self, method: Method, k_percent: f64, scope: Scope) -> Vec<f64> {
        self.per_sequence
            .iter()
            .filter(|r| r.converged)
            .filter_map(|r| {
                r.recalls
                    .iter()
                    .find(|e| {
                        e.method == method && e.k_percent == k_percent && e.scope == scope
                    })
                    .map(|e| e.recall)
            })
            .collect()
    }

    pub fn summary_for(&self, method: Method, scope: Scope) -> Option<&MethodSummary> {
        let table = match scope {
            Scope::PerLayer => &self.per_layer,
            Scope::Global => &self.global,
        };
        table.iter().find(|m| m.method == method)
    }
}

/// Run the benchmark: returns the deterministic report and, separately, the
/// wall-clock attribution time per method.
pub fn run_inj_benchmark(
    base: &TransformerLM,
    methods: &[Method],
    params: &InjectParams,
    stamp: RunStamp,
) -> Result<(InjReport, TimingLog)> {
    params.validate(base.cfg.total_neurons())?;
    if methods.is_empty() {
        return Err(Error::Config("no attribution methods requested".into()));
    }
    let gamma_size = params.gamma_size(base.cfg.total_neurons());

    struct SeqOutcome {
        record: SeqRecord,
        method_seconds: Vec<(Method, f64)>,
    }

    let indices: Vec<usize> = (0..params.sequences).collect();
    let outcomes = crate::par::par_map(&indices, |&i| -> Result<SeqOutcome> {
        let seed = params.seed_offset + i as u64;
        let tokens = random_byte_sequence(seed, params.seq_len);
        let gamma =
            sample_injection_set(seed, base.cfg.layers, base.cfg.d_hidden, gamma_size)?;

        let mut model = base.clone();
        let outcome = finetune_columns(&mut model, &tokens, &gamma, &params.finetune)?;
        let mut record = SeqRecord {
            index: i,
            seed,
            converged: outcome.converged,
            finetune_steps: outcome.steps_used,
            final_loss: outcome.final_loss,
            recalls: Vec::new(),
        };
        let mut method_seconds = Vec::new();
        if outcome.converged {
            for &method in methods {
                // stream 2 of the sequence seed feeds stochastic methods
                let mut rng = Rng::new(seed).derive(2);
                let start = std::time::Instant::now();
                let map = attribute(&model, &tokens, 1, method, &params.attrib, &mut rng)?;
                method_seconds.push((method, start.elapsed().as_secs_f64()));
                for &k in &params.k_values {
                    for scope in [Scope::PerLayer, Scope::Global] {
                        let spec = SelectionSpec {
                            k_percent: k,
                            scope,
                            skip_bottom_layer: false,
                        };
                        let selected = select_topk(&map, &spec)?;
                        record.recalls.push(RecallEntry {
                            method,
                            k_percent: k,
                            scope,
                            recall: recall_percent(&selected, &gamma)?,
                        });
                    }
                }
            }
        }
        Ok(SeqOutcome { record, method_seconds })
    });

    let mut records = Vec::with_capacity(params.sequences);
    let mut timing = TimingLog::new();
    let mut seconds_by_method: Vec<(Method, f64)> = Vec::new();
    for o in outcomes {
        let o = o?;
        for (m, s) in o.method_seconds {
            match seconds_by_method.iter_mut().find(|(mm, _)| *mm == m) {
                Some((_, acc)) => *acc += s,
                None => seconds_by_method.push((m, s)),
            }
        }
        records.push(o.record);
    }
    for (m, s) in &seconds_by_method {
        timing.record(format!("attribution.{m}"), *s);
    }

    let converged = records.iter().filter(|r| r.converged).count();
    if converged == 0 {
        return Err(Error::Stats(
            "no injected sequence converged; recall averages are undefined".into(),
        ));
    }
    let non_converged_indices =
        records.iter().filter(|r| !r.converged).map(|r| r.index).collect();

    let summarize = |scope: Scope, records: &[SeqRecord]| -> Result<Vec<MethodSummary>> {
        methods
            .iter()
            .map(|&method| {
                let cells = params
                    .k_values
                    .iter()
                    .map(|&k| {
                        let series: Vec<f64> = records
                            .iter()
                            .filter(|r| r.converged)
                            .flat_map(|r| {
                                r.recalls.iter().filter(move |e| {
                                    e.method == method
                                        && e.k_percent == k
                                        && e.scope == scope
                                })
                            })
                            .map(|e| e.recall)
                            .collect();
                        let (mean, stderr) = mean_stderr(&series)?;
                        Ok(SummaryCell { k_percent: k, mean, stderr })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(MethodSummary { method, cells })
            })
            .collect()
    };

    let report = InjReport {
        stamp,
        gamma_size,
        sequences: params.sequences,
        converged,
        non_converged_indices,
        k_values: params.k_values.clone(),
        per_layer: summarize(Scope::PerLayer, &records)?,
        global: summarize(Scope::Global, &records)?,
        per_sequence: records,
    };
    Ok((report, timing))
}

/// The recall summary as a method × k CSV table of `mean±stderr` cells.
pub fn write_inj_csv(report: &InjReport, scope: Scope, path: &std::path::Path) -> Result<()> {
    let table = match scope {
        Scope::PerLayer => &report.per_layer,
        Scope::Global => &report.global,
    };
    let mut header = vec!["method".to_string()];
    header.extend(report.k_values.iter().map(|k| format!("recall@{k}%")));
    let rows: Vec<Vec<String>> = table
        .iter()
        .map(|m| {
            let mut row = vec![m.method.name().to_string()];
            row.extend(m.cells.iter().map(|c| crate::report::mean_pm(c.mean, c.stderr)));
            row
        })
        .collect();
    crate::report::write_csv(path, &header, &rows)
}
