//! Command-line driver for the localization benchmarks.
//!
//! A run lives in one directory (`--run-root`, or `$MEMLOC_RUN_ROOT`, default
//! `runs/`): `gen-corpus` puts the corpus there, `train` adds `model.ckpt`,
//! `collect` screens it for memorized sequences, and the benchmark commands
//! write their reports next to it. Every knob lives in one TOML file
//! (`--config`), and any field can be adjusted inline with repeated
//! `--set section.key=value` flags; the merged configuration is written back
//! as `effective_config.toml` so a run directory is self-describing.
//!
//! Exit codes: 0 success, 1 bad command line, 2 invalid configuration,
//! 3 runtime failure. Errors print as a single machine-parseable line,
//! `error[<kind>]: <message>`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use memloc::attrib::{
    attribute, select_topk, AttributionMap, Method, Scope, SelectionSpec,
};
use memloc::corpus::{
    collect_memorized, random_byte_sequence, CollectedSample, CollectionCriteria, Corpus, Sample,
};
use memloc::deletion::{
    confusion_matrix, run_del_benchmark, single_layer_sweep, write_del_csv, DelReport,
    LayerSweepReport,
};
use memloc::graph::grad_check;
use memloc::inject::{
    run_inj_benchmark, sample_injection_set, write_inj_csv, InjReport,
};
use memloc::model::{
    checkpoint_bytes, finetune_columns, load_checkpoint, perplexity, save_checkpoint,
    CheckpointMeta, NeuronId, NeuronMask, TrainLog, TransformerLM,
};
use memloc::report::{config_hash, read_json, write_csv, write_json, RunStamp};
use memloc::rng::Rng;
use memloc::runcfg::RunConfig;
use memloc::stats::{paired_t, Tail};
use memloc::tensor::Tensor;
use memloc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "memloc",
    version,
    about = "Locate the neurons a small language model uses to memorize sequences"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config field, e.g. --set train.steps=100 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Directory artifacts are read from and written to
    /// [env: MEMLOC_RUN_ROOT] [default: runs]
    #[arg(long, global = true, value_name = "DIR")]
    run_root: Option<PathBuf>,
    /// Run order-preserving maps sequentially even in a parallel build.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the training corpus and write it to the run root.
    GenCorpus,
    /// Train the base model on the corpus and save `model.ckpt`.
    Train,
    /// Screen the trained model for memorized sequences -> `collected.json`.
    Collect,
    /// Finetune one injected sequence into sampled columns and save it.
    Inject {
        /// Sequence index; tokens and target columns derive from it.
        #[arg(long)]
        index: usize,
    },
    /// Score one attribution method on one target and write the map.
    Localize {
        /// Attribution method name (e.g. zero_out, slimming).
        #[arg(long)]
        method: String,
        /// `collected:<id>` or `injected:<index>`.
        #[arg(long)]
        target: String,
        /// Checkpoint to attribute against; defaults to the target's own.
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
    /// Recall benchmark against injected ground-truth columns.
    BenchInj,
    /// Deletion benchmark over the collected sequences.
    BenchDel,
    /// Cross-deletion accuracy matrix at one method and selection size.
    Confusion {
        #[arg(long)]
        method: String,
        /// Selection size as a percentage of each layer.
        #[arg(long, default_value_t = 0.5)]
        k: f64,
    },
    /// Spend one target's deletion budget inside each layer in turn.
    SweepLayer {
        #[arg(long)]
        method: String,
        /// `collected:<id>` or `injected:<index>`.
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 0.5)]
        k: f64,
    },
    /// Paired t-tests of every method against a baseline, from a report file.
    Stats {
        /// An `inj_report.json` or `del_report.json`.
        #[arg(long, value_name = "FILE")]
        report: PathBuf,
        #[arg(long, default_value = "random")]
        baseline: String,
        /// Selection percentage to compare at; defaults per report kind.
        #[arg(long)]
        k: Option<f64>,
        /// per_layer or global (recall reports only).
        #[arg(long, default_value = "per_layer")]
        scope: String,
        /// Also write the table as JSON.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Verify core numerics against frozen known answers.
    Selfcheck,
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let line = e
                    .to_string()
                    .lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .trim_start_matches("error: ")
                    .to_string();
                eprintln!("error[usage]: {line}");
                return 1;
            }
            print!("{e}"); // --help / --version
            return 0;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (kind, code) = match e {
                Error::Config(_) => ("config", 2),
                _ => ("runtime", 3),
            };
            eprintln!("error[{kind}]: {e}");
            code
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    root: PathBuf,
    stamp: RunStamp,
}

impl Ctx {
    fn new(g: &GlobalArgs) -> Result<Ctx> {
        let mut cfg = match &g.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for assignment in &g.set {
            cfg = cfg.with_override(assignment)?;
        }
        cfg.validate()?;
        let root = g
            .run_root
            .clone()
            .or_else(|| std::env::var_os("MEMLOC_RUN_ROOT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        if g.sequential {
            memloc::par::force_sequential(true);
        }
        let stamp = RunStamp::new(config_hash(&cfg)?, cfg.run.seed);
        Ok(Ctx { cfg, root, stamp })
    }

    /// Record the merged configuration so the run directory is reproducible.
    fn write_effective(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        self.cfg.save(&self.root.join("effective_config.toml"))
    }

    fn load_model(&self, path: &Path) -> Result<TransformerLM> {
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} not found (run `memloc train` first)", path.display()),
            )));
        }
        let (model, _) = load_checkpoint(path)?;
        Ok(model)
    }

    fn load_corpus(&self) -> Result<Corpus> {
        if !self.root.join("corpus.jsonl").exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!(
                    "no corpus in {} (run `memloc gen-corpus` first)",
                    self.root.display()
                ),
            )));
        }
        Corpus::load(&self.root)
    }

    fn load_collected(&self) -> Result<CollectedArtifact> {
        let path = self.root.join("collected.json");
        if !path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{} not found (run `memloc collect` first)", path.display()),
            )));
        }
        read_json(&path)
    }
}

#[derive(Serialize, Deserialize)]
struct TrainArtifact {
    stamp: RunStamp,
    log: TrainLog,
    heldout_perplexity: f64,
}

#[derive(Serialize, Deserialize)]
struct CollectedArtifact {
    stamp: RunStamp,
    criteria: CollectionCriteria,
    samples: Vec<CollectedSample>,
}

#[derive(Serialize, Deserialize)]
struct InjectArtifact {
    stamp: RunStamp,
    index: usize,
    seed: u64,
    tokens: Vec<u16>,
    gamma: Vec<NeuronId>,
    converged: bool,
    steps_used: usize,
    final_loss: f64,
}

fn dispatch(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.global)?;
    match cli.cmd {
        Cmd::GenCorpus => gen_corpus(&ctx),
        Cmd::Train => train(&ctx),
        Cmd::Collect => collect(&ctx),
        Cmd::Inject { index } => inject(&ctx, index),
        Cmd::Localize { method, target, model } => localize(&ctx, &method, &target, model),
        Cmd::BenchInj => bench_inj(&ctx),
        Cmd::BenchDel => bench_del(&ctx),
        Cmd::Confusion { method, k } => confusion(&ctx, &method, k),
        Cmd::SweepLayer { method, target, k } => sweep_layer(&ctx, &method, &target, k),
        Cmd::Stats { report, baseline, k, scope, out } => {
            stats_cmd(&report, &baseline, k, &scope, out)
        }
        Cmd::Selfcheck => selfcheck(),
    }
}

fn gen_corpus(ctx: &Ctx) -> Result<()> {
    ctx.write_effective()?;
    let corpus = Corpus::generate(ctx.cfg.corpus.clone())?;
    corpus.save(&ctx.root)?;
    println!(
        "corpus: {} fillers, {} sequences to memorize, {} held out -> {}",
        corpus.fillers.len(),
        corpus.factlets.len(),
        corpus.heldout.len(),
        ctx.root.display()
    );
    Ok(())
}

fn train(ctx: &Ctx) -> Result<()> {
    ctx.write_effective()?;
    let corpus = ctx.load_corpus()?;
    let tp = ctx.cfg.to_train_params();
    let (model, log) = memloc::model::train_base(
        ctx.cfg.model.clone(),
        &corpus.train_stream(),
        &tp,
    )?;
    let ppl = perplexity(&model, &corpus.heldout_tokens(), None)?;
    let meta = CheckpointMeta {
        seed: ctx.cfg.run.seed,
        config_hash: ctx.stamp.config_hash.clone(),
    };
    save_checkpoint(&model, &meta, &ctx.root.join("model.ckpt"))?;
    write_json(
        &ctx.root.join("train_log.json"),
        &TrainArtifact { stamp: ctx.stamp.clone(), log: log.clone(), heldout_perplexity: ppl },
    )?;
    println!(
        "trained {} steps: final loss {:.4}, held-out perplexity {:.2} -> model.ckpt",
        tp.steps, log.final_loss, ppl
    );
    Ok(())
}

fn collect(ctx: &Ctx) -> Result<()> {
    ctx.write_effective()?;
    let corpus = ctx.load_corpus()?;
    let model = ctx.load_model(&ctx.root.join("model.ckpt"))?;
    let samples = collect_memorized(&model, &corpus.factlets, &ctx.cfg.collect)?;
    let artifact = CollectedArtifact {
        stamp: ctx.stamp.clone(),
        criteria: ctx.cfg.collect.clone(),
        samples,
    };
    write_json(&ctx.root.join("collected.json"), &artifact)?;
    println!(
        "collected {} of {} candidates -> collected.json",
        artifact.samples.len(),
        corpus.factlets.len()
    );
    Ok(())
}

fn inject(ctx: &Ctx, index: usize) -> Result<()> {
    ctx.write_effective()?;
    let mut model = ctx.load_model(&ctx.root.join("model.ckpt"))?;
    let params = ctx.cfg.to_inject_params();
    let seed = params.seed_offset + index as u64;
    let tokens = random_byte_sequence(seed, params.seq_len);
    let gamma = sample_injection_set(
        seed,
        model.cfg.layers,
        model.cfg.d_hidden,
        params.gamma_size(model.cfg.total_neurons()),
    )?;
    let outcome = finetune_columns(&mut model, &tokens, &gamma, &params.finetune)?;
    let meta = CheckpointMeta {
        seed: ctx.cfg.run.seed,
        config_hash: ctx.stamp.config_hash.clone(),
    };
    let name = format!("injected_{index:03}");
    save_checkpoint(&model, &meta, &ctx.root.join(format!("{name}.ckpt")))?;
    write_json(
        &ctx.root.join(format!("{name}.json")),
        &InjectArtifact {
            stamp: ctx.stamp.clone(),
            index,
            seed,
            tokens,
            gamma,
            converged: outcome.converged,
            steps_used: outcome.steps_used,
            final_loss: outcome.final_loss,
        },
    )?;
    println!(
        "injected sequence {index}: {} after {} steps (loss {:.4}) -> {name}.ckpt",
        if outcome.converged { "converged" } else { "did NOT converge" },
        outcome.steps_used,
        outcome.final_loss
    );
    Ok(())
}

/// A localization target: either a collected sequence or an injected one.
enum Target {
    Collected(CollectedSample),
    Injected { index: usize, tokens: Vec<u16> },
}

impl Target {
    fn parse(ctx: &Ctx, spec: &str) -> Result<Target> {
        let (kind, rest) = spec.split_once(':').ok_or_else(|| {
            Error::Config(format!(
                "target `{spec}` is not `collected:<id>` or `injected:<index>`"
            ))
        })?;
        match kind {
            "collected" => {
                let artifact = ctx.load_collected()?;
                let sample = artifact
                    .samples
                    .into_iter()
                    .find(|c| c.sample.id == rest)
                    .ok_or_else(|| {
                        Error::Config(format!("no collected sequence with id `{rest}`"))
                    })?;
                Ok(Target::Collected(sample))
            }
            "injected" => {
                let index: usize = rest
                    .parse()
                    .map_err(|_| Error::Config(format!("bad injected index `{rest}`")))?;
                let params = ctx.cfg.to_inject_params();
                let tokens =
                    random_byte_sequence(params.seed_offset + index as u64, params.seq_len);
                Ok(Target::Injected { index, tokens })
            }
            other => Err(Error::Config(format!("unknown target kind `{other}`"))),
        }
    }

    fn id(&self) -> String {
        match self {
            Target::Collected(c) => c.sample.id.clone(),
            Target::Injected { index, .. } => format!("injected-{index}"),
        }
    }

    fn tokens(&self) -> &[u16] {
        match self {
            Target::Collected(c) => &c.sample.tokens,
            Target::Injected { tokens, .. } => tokens,
        }
    }

    /// Injected sequences are scored from the first token on.
    fn prefix_len(&self) -> usize {
        match self {
            Target::Collected(c) => c.sample.prefix_len,
            Target::Injected { .. } => 1,
        }
    }

    fn default_model_path(&self, ctx: &Ctx) -> PathBuf {
        match self {
            Target::Collected(_) => ctx.root.join("model.ckpt"),
            Target::Injected { index, .. } => ctx.root.join(format!("injected_{index:03}.ckpt")),
        }
    }

    /// A deletion-benchmark view of the target.
    fn as_collected(&self) -> CollectedSample {
        match self {
            Target::Collected(c) => c.clone(),
            Target::Injected { tokens, .. } => CollectedSample {
                sample: Sample {
                    id: self.id(),
                    tokens: tokens.clone(),
                    prefix_len: 1,
                    tags: vec!["injected".into()],
                },
                accuracy: 1.0,
                greedy_distance: 0,
            },
        }
    }
}

fn localize(ctx: &Ctx, method: &str, target: &str, model_path: Option<PathBuf>) -> Result<()> {
    ctx.write_effective()?;
    let method = Method::from_name(method)?;
    let target = Target::parse(ctx, target)?;
    let path = model_path.unwrap_or_else(|| target.default_model_path(ctx));
    let model = ctx.load_model(&path)?;
    // stream 2 feeds the stochastic methods, as in the benchmarks
    let mut rng = Rng::new(ctx.cfg.run.seed).derive(2);
    let map = attribute(
        &model,
        target.tokens(),
        target.prefix_len(),
        method,
        &ctx.cfg.attrib,
        &mut rng,
    )?;
    let out = ctx
        .root
        .join(format!("attrib_{method}_{}.csv", target.id().replace([':', '/'], "_")));
    memloc::attrib::save_attribution(&map, &ctx.stamp, &out)?;

    let mut top: Vec<(f64, NeuronId)> = Vec::new();
    for (l0, layer) in map.scores.iter().enumerate() {
        for (i, &s) in layer.iter().enumerate() {
            top.push((s, NeuronId::new(l0 + 1, i)));
        }
    }
    top.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    println!("{method} scores for {} -> {}", target.id(), out.display());
    for (score, n) in top.iter().take(5) {
        println!("  layer {} neuron {:3}  {score:+.6}", n.layer, n.index);
    }
    Ok(())
}

fn bench_inj(ctx: &Ctx) -> Result<()> {
    ctx.write_effective()?;
    let model = ctx.load_model(&ctx.root.join("model.ckpt"))?;
    let methods = ctx.cfg.methods()?;
    let params = ctx.cfg.to_inject_params();
    let (report, timing) = run_inj_benchmark(&model, &methods, &params, ctx.stamp.clone())?;
    write_json(&ctx.root.join("inj_report.json"), &report)?;
    write_inj_csv(&report, Scope::PerLayer, &ctx.root.join("inj_per_layer.csv"))?;
    write_inj_csv(&report, Scope::Global, &ctx.root.join("inj_global.csv"))?;
    timing.write(&ctx.root, "inj_timing")?;
    println!(
        "recall benchmark: {}/{} sequences converged (target columns: {})",
        report.converged, report.sequences, report.gamma_size
    );
    let k = report.k_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!("per-layer recall@{k}%:");
    for summary in &report.per_layer {
        if let Some(cell) = summary.cells.iter().find(|c| c.k_percent == k) {
            println!(
                "  {:<12} {}",
                summary.method.to_string(),
                memloc::report::mean_pm(cell.mean, cell.stderr)
            );
        }
    }
    println!("-> inj_report.json, inj_per_layer.csv, inj_global.csv");
    Ok(())
}

fn bench_del(ctx: &Ctx) -> Result<()> {
    ctx.write_effective()?;
    let model = ctx.load_model(&ctx.root.join("model.ckpt"))?;
    let corpus = ctx.load_corpus()?;
    let collected = ctx.load_collected()?;
    let methods = ctx.cfg.methods()?;
    let params = ctx.cfg.to_deletion_params();
    let (report, timing) = run_del_benchmark(
        &model,
        &collected.samples,
        &corpus.heldout_tokens(),
        &methods,
        &params,
        ctx.stamp.clone(),
    )?;
    write_json(&ctx.root.join("del_report.json"), &report)?;
    write_del_csv(&report, &ctx.root.join("del_summary.csv"))?;
    timing.write(&ctx.root, "del_timing")?;
    let k = params.k_values.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "deletion benchmark: {} targets ({} dev sequences held out)",
        report.test_ids.len(),
        report.dev_ids.len()
    );
    println!("suffix-accuracy change after deleting top {k}% per layer:");
    for summary in report.summary.iter().filter(|s| s.k_percent == k) {
        println!(
            "  {:<12} self {}  others {}",
            summary.method.to_string(),
            memloc::report::mean_pm(summary.self_acc.mean, summary.self_acc.stderr),
            memloc::report::mean_pm(summary.neg_acc.mean, summary.neg_acc.stderr),
        );
    }
    println!("-> del_report.json, del_summary.csv");
    Ok(())
}

fn confusion(ctx: &Ctx, method: &str, k: f64) -> Result<()> {
    ctx.write_effective()?;
    let method = Method::from_name(method)?;
    let model = ctx.load_model(&ctx.root.join("model.ckpt"))?;
    let collected = ctx.load_collected()?;
    let params = ctx.cfg.to_deletion_params();
    let (ids, matrix) = confusion_matrix(&model, &collected.samples, method, k, &params)?;

    #[derive(Serialize)]
    struct ConfusionArtifact<'a> {
        stamp: &'a RunStamp,
        method: Method,
        k_percent: f64,
        ids: &'a [String],
        /// Row x: accuracy change of every sequence when x's neurons go.
        matrix: &'a [Vec<f64>],
    }
    write_json(
        &ctx.root.join("confusion.json"),
        &ConfusionArtifact { stamp: &ctx.stamp, method, k_percent: k, ids: &ids, matrix: &matrix },
    )?;
    let mut header = vec!["deleted".to_string()];
    header.extend(ids.iter().cloned());
    let rows: Vec<Vec<String>> = ids
        .iter()
        .zip(&matrix)
        .map(|(id, row)| {
            let mut r = vec![id.clone()];
            r.extend(row.iter().map(|v| format!("{v:.4}")));
            r
        })
        .collect();
    write_csv(&ctx.root.join("confusion.csv"), &header, &rows)?;
    let diag: f64 = matrix.iter().enumerate().map(|(i, r)| r[i]).sum::<f64>() / ids.len() as f64;
    let off: f64 = matrix
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().filter(move |(j, _)| *j != i))
        .map(|(_, v)| *v)
        .sum::<f64>()
        / (ids.len() * (ids.len() - 1)) as f64;
    println!(
        "{method} @ {k}%: mean self effect {diag:.4}, mean cross effect {off:.4} -> confusion.csv"
    );
    Ok(())
}

fn sweep_layer(ctx: &Ctx, method: &str, target: &str, k: f64) -> Result<()> {
    ctx.write_effective()?;
    let method = Method::from_name(method)?;
    let target = Target::parse(ctx, target)?;
    let model = ctx.load_model(&target.default_model_path(ctx))?;
    let mut rng = Rng::new(ctx.cfg.run.seed).derive(2);
    let map = attribute(
        &model,
        target.tokens(),
        target.prefix_len(),
        method,
        &ctx.cfg.attrib,
        &mut rng,
    )?;
    let report = single_layer_sweep(&model, &target.as_collected(), &map, k, None)?;

    #[derive(Serialize)]
    struct SweepArtifact<'a> {
        stamp: &'a RunStamp,
        method: Method,
        target: String,
        k_percent: f64,
        report: &'a LayerSweepReport,
    }
    let stem = format!("sweep_{method}_{}", target.id().replace([':', '/'], "_"));
    write_json(
        &ctx.root.join(format!("{stem}.json")),
        &SweepArtifact {
            stamp: &ctx.stamp,
            method,
            target: target.id(),
            k_percent: k,
            report: &report,
        },
    )?;
    let header: Vec<String> =
        ["layer", "deleted", "self_acc", "self_dist"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.layer.to_string(),
                r.deleted.to_string(),
                format!("{:.4}", r.self_acc),
                format!("{:.4}", r.self_dist),
            ]
        })
        .collect();
    write_csv(&ctx.root.join(format!("{stem}.csv")), &header, &rows)?;
    println!(
        "budget {} neurons in one layer at a time ({}{}):",
        report.budget,
        target.id(),
        if report.capped { ", capped at layer width" } else { "" }
    );
    for r in &report.rows {
        println!(
            "  layer {}: accuracy {:+.4}, decode distance {:+.1}",
            r.layer, r.self_acc, r.self_dist
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct StatsRow {
    method: Method,
    mean: f64,
    stderr: f64,
    /// Absent when the two series are identical (no variance to test).
    t: Option<f64>,
    p: Option<f64>,
    p_bonferroni: Option<f64>,
}

fn stats_cmd(
    report_path: &Path,
    baseline: &str,
    k: Option<f64>,
    scope: &str,
    out: Option<PathBuf>,
) -> Result<()> {
    let baseline = Method::from_name(baseline)?;
    let value: serde_json::Value = read_json(report_path)?;
    let is_recall = value.get("per_sequence").is_some();

    // per-method series of the headline metric, plus its mean ± stderr
    let (metric_name, tail, series): (String, Tail, Vec<(Method, Vec<f64>)>) = if is_recall {
        let report: InjReport = read_json(report_path)?;
        let scope = match scope {
            "per_layer" => Scope::PerLayer,
            "global" => Scope::Global,
            other => return Err(Error::Config(format!("unknown scope `{other}`"))),
        };
        let k = k.unwrap_or_else(|| {
            report.k_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        if !report.k_values.contains(&k) {
            return Err(Error::Config(format!("report has no k={k}")));
        }
        let methods: Vec<Method> = report.per_layer.iter().map(|s| s.method).collect();
        let series = methods
            .iter()
            .map(|&m| (m, report.recall_series(m, k, scope)))
            .collect();
        (format!("recall@{k}% ({scope:?}), higher is better"), Tail::Greater, series)
    } else {
        let report: DelReport = read_json(report_path)?;
        let ks: Vec<f64> = {
            let mut ks: Vec<f64> = report.per_target.iter().map(|t| t.k_percent).collect();
            ks.sort_by(|a, b| a.partial_cmp(b).expect("finite k"));
            ks.dedup();
            ks
        };
        let k = k.unwrap_or_else(|| ks.first().copied().unwrap_or(0.5));
        if !ks.contains(&k) {
            return Err(Error::Config(format!("report has no k={k}")));
        }
        let methods: Vec<Method> = {
            let mut ms = Vec::new();
            for t in &report.per_target {
                if !ms.contains(&t.method) {
                    ms.push(t.method);
                }
            }
            ms
        };
        let series = methods
            .iter()
            .map(|&m| (m, report.series(m, k, |t| t.self_acc)))
            .collect();
        (format!("suffix-accuracy change @ {k}%, lower is better"), Tail::Less, series)
    };

    let base_series = series
        .iter()
        .find(|(m, _)| *m == baseline)
        .map(|(_, s)| s.clone())
        .ok_or_else(|| Error::Config(format!("report has no `{baseline}` baseline")))?;

    let comparisons = series.iter().filter(|(m, _)| *m != baseline).count().max(1);
    let mut rows = Vec::new();
    for (method, vals) in &series {
        let (mean, stderr) = memloc::stats::mean_stderr(vals)?;
        let (t, p, p_adj) = if *method == baseline {
            (None, None, None)
        } else if vals.iter().zip(&base_series).all(|(a, b)| a == b) {
            (None, None, None) // identical series: nothing to test
        } else {
            let test = paired_t(vals, &base_series, tail)?;
            (
                Some(test.t),
                Some(test.p),
                Some(memloc::stats::bonferroni(test.p, comparisons)),
            )
        };
        rows.push(StatsRow { method: *method, mean, stderr, t, p, p_bonferroni: p_adj });
    }

    println!("{metric_name}; baseline {baseline}, {comparisons} comparisons");
    for r in &rows {
        let tail_txt = match (r.t, r.p, r.p_bonferroni) {
            (Some(t), Some(p), Some(padj)) => {
                format!("t={t:+.3} p={p:.4} p_adj={padj:.4}")
            }
            _ if r.method == baseline => "baseline".to_string(),
            _ => "identical to baseline".to_string(),
        };
        println!(
            "  {:<12} {}  {tail_txt}",
            r.method.to_string(),
            memloc::report::mean_pm(r.mean, r.stderr)
        );
    }
    if let Some(path) = out {
        write_json(&path, &rows)?;
        println!("-> {}", path.display());
    }
    Ok(())
}

fn selfcheck() -> Result<()> {
    let checks: &[(&str, fn() -> std::result::Result<(), String>)] = &[
        ("rng_reference_stream", check_rng_stream),
        ("gelu_known_answers", check_gelu),
        ("gradients_vs_finite_differences", check_gradients),
        ("mask_equals_zeroed_column", check_mask_duality),
        ("checkpoint_bytes_stable", check_checkpoint),
        ("paired_t_known_answer", check_paired_t),
        ("edit_distance_known_answers", check_levenshtein),
        ("selection_tie_break", check_selection),
    ];
    let mut failed = false;
    for (name, f) in checks {
        match f() {
            Ok(()) => println!("ok {name}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed = true;
            }
        }
    }
    if failed {
        return Err(Error::Numeric("selfcheck failed".into()));
    }
    Ok(())
}

fn check_rng_stream() -> std::result::Result<(), String> {
    let want: [u64; 6] = [
        13720838825685603483,
        2398916695208396998,
        17770384849984869256,
        891717726879801395,
        10241316046318454344,
        196975429884907396,
    ];
    let mut rng = Rng::new(12345);
    for (i, &w) in want.iter().enumerate() {
        let got = rng.next_u64();
        if got != w {
            return Err(format!("draw {i}: {got} != {w}"));
        }
    }
    Ok(())
}

fn check_gelu() -> std::result::Result<(), String> {
    let cases = [
        (1.0, 0.8411919906082767),
        (-0.5, -0.15428599017485608),
        (2.0, 1.954597694087775),
        (0.0, 0.0),
    ];
    for (x, want) in cases {
        let got = memloc::math::gelu(x);
        if (got - want).abs() > 1e-15 {
            return Err(format!("gelu({x}) = {got}, want {want}"));
        }
    }
    Ok(())
}

fn check_gradients() -> std::result::Result<(), String> {
    let x0 = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.7, 2.1, -0.4, 0.05])
        .map_err(|e| e.to_string())?;
    let err = grad_check(
        |g, x| {
            let y = g.gelu(x);
            let z = g.sigmoid(y);
            Ok(g.sum(z))
        },
        &x0,
        1e-5,
    )
    .map_err(|e| e.to_string())?;
    if err > 1e-6 {
        return Err(format!("worst relative error {err:.3e}"));
    }
    Ok(())
}

fn tiny_model() -> std::result::Result<TransformerLM, String> {
    let cfg = memloc::model::ModelConfig {
        layers: 2,
        d_model: 8,
        d_hidden: 8,
        heads: 2,
        vocab: 256,
        context: 16,
    };
    TransformerLM::new_random(cfg, 5).map_err(|e| e.to_string())
}

fn check_mask_duality() -> std::result::Result<(), String> {
    let model = tiny_model()?;
    let tokens: Vec<u16> = vec![10, 250, 3, 99, 7];
    let neuron = NeuronId::new(1, 2);
    let mask = NeuronMask::dropping(&model.cfg, &[neuron]).map_err(|e| e.to_string())?;
    let masked = model.logits(&tokens, Some(&mask)).map_err(|e| e.to_string())?;
    let mut zeroed = model.clone();
    zeroed.zero_out_column(neuron).map_err(|e| e.to_string())?;
    let direct = zeroed.logits(&tokens, None).map_err(|e| e.to_string())?;
    let worst = masked
        .data()
        .iter()
        .zip(direct.data().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if worst > 1e-12 {
        return Err(format!("worst logit gap {worst:.3e}"));
    }
    Ok(())
}

fn check_checkpoint() -> std::result::Result<(), String> {
    let model = tiny_model()?;
    let meta = CheckpointMeta { seed: 5, config_hash: "deadbeef".into() };
    let a = checkpoint_bytes(&model, &meta);
    let b = checkpoint_bytes(&model, &meta);
    if a != b {
        return Err("two serializations differ".into());
    }
    let (back, _) = memloc::model::checkpoint_from_bytes(&a).map_err(|e| e.to_string())?;
    for (i, (x, y)) in model.params().iter().zip(back.params().iter()).enumerate() {
        if x.data()
            .iter()
            .zip(y.data().iter())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(format!("tensor {i} not bit-identical after round trip"));
        }
    }
    Ok(())
}

fn check_paired_t() -> std::result::Result<(), String> {
    let a = [2.0, 3.0, 4.0, 5.0, 6.0];
    let b = [1.0, 1.0, 1.0, 1.0, 1.0];
    let test = paired_t(&a, &b, Tail::Greater).map_err(|e| e.to_string())?;
    let (want_t, want_p) = (4.242640687119285, 0.006617799781841345);
    if (test.t - want_t).abs() > 1e-12 {
        return Err(format!("t = {}, want {want_t}", test.t));
    }
    if (test.p - want_p).abs() > 1e-12 {
        return Err(format!("p = {}, want {want_p}", test.p));
    }
    Ok(())
}

fn check_levenshtein() -> std::result::Result<(), String> {
    let cases: [(&[u8], &[u8], usize); 4] = [
        (b"kitten", b"sitting", 3),
        (b"", b"abc", 3),
        (b"abc", b"abc", 0),
        (b"flaw", b"lawn", 2),
    ];
    for (a, b, want) in cases {
        let got = memloc::text::levenshtein(a, b);
        if got != want {
            return Err(format!("levenshtein({a:?}, {b:?}) = {got}, want {want}"));
        }
    }
    Ok(())
}

fn check_selection() -> std::result::Result<(), String> {
    let map = AttributionMap {
        method: Method::Random,
        scores: vec![vec![1.0, 1.0], vec![1.0, 0.0]],
    };
    let picked =
        select_topk(&map, &SelectionSpec::per_layer(50.0)).map_err(|e| e.to_string())?;
    let want = vec![NeuronId::new(1, 0), NeuronId::new(2, 0)];
    if picked != want {
        return Err(format!("picked {picked:?}, want {want:?}"));
    }
    Ok(())
}
