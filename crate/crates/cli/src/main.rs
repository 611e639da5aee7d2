//! `fewshot`: train, pre-train, evaluate and merge adapters on the toy
//! model, and print the cost table.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fewshot_core::costs::{full_context_scenario, render_bytes_decimal, render_gib, render_table, table1_scenarios};
use fewshot_core::harness::{
    evaluate_task, find_task, load_checkpoint, pretrain_adapter, run_few_shot, save_checkpoint, write_metrics_csv,
    Checkpoint, Precision, RunConfig, StepMetrics, TrainMode,
};
use fewshot_core::{init_adapter, merge, CostScenario, EvalReport, IA3Adapter, Model, Real};

#[derive(Parser)]
#[command(
    name = "fewshot",
    version,
    about = "Few-shot adapter fine-tuning on a toy encoder-decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune one adapter per few-shot seed and evaluate on held-out data.
    Train(TrainArgs),
    /// Train a shared adapter on the multitask mixture.
    Pretrain(CommonArgs),
    /// Evaluate the base model or saved adapters on held-out data.
    Eval(EvalArgs),
    /// Fold an adapter into the base weights and save the merged model.
    Merge(MergeArgs),
    /// Print inference, training and storage costs.
    Cost(CostArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train: run only this few-shot seed. Pretrain: the data-order seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Drop the unlikelihood loss.
    #[arg(long)]
    no_ul: bool,
    /// Drop the length-normalized loss.
    #[arg(long)]
    no_ln: bool,
    /// Start from the ones adapter instead of a mixture-pretrained one.
    #[arg(long)]
    no_pretrained_init: bool,
    /// Start from this pretrained adapter checkpoint. Without it, one is trained on the fly.
    #[arg(long, conflicts_with = "no_pretrained_init")]
    pretrained: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Adapter checkpoints, one per evaluation seed or one shared.
    #[arg(long)]
    adapter: Vec<PathBuf>,
    /// Full model checkpoint to use instead of the seeded base model.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    /// Run configuration JSON; selects the model shape and seed.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Adapter checkpoint to fold in.
    #[arg(long)]
    adapter: PathBuf,
    /// Full model checkpoint to use instead of the seeded base model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Merged model checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    /// The six-row comparison table.
    #[arg(long)]
    table1: bool,
    /// Also report the long-context in-context scenario.
    #[arg(long)]
    full_context: bool,
    /// JSON file with one scenario or a list of scenarios.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Write costs.json here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(a) => dispatch(&a.common, |cfg| match cfg.train.precision {
            Precision::F32 => cmd_train::<f32>(&a, cfg),
            Precision::F64 => cmd_train::<f64>(&a, cfg),
        }),
        Command::Pretrain(a) => dispatch(&a, |cfg| match cfg.pretrain.precision {
            Precision::F32 => cmd_pretrain::<f32>(&a, cfg),
            Precision::F64 => cmd_pretrain::<f64>(&a, cfg),
        }),
        Command::Eval(a) => dispatch(&a.common, |cfg| cmd_eval(&a, cfg)),
        Command::Merge(a) => cmd_merge(&a),
        Command::Cost(a) => cmd_cost(&a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn dispatch(common: &CommonArgs, run: impl FnOnce(RunConfig) -> Result<()>) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    run(cfg)
}

fn progress(label: &str, total: usize) -> impl FnMut(&StepMetrics) + '_ {
    move |m| {
        if m.step % 100 == 0 || m.step == total {
            eprintln!(
                "{label} step {:>5}/{total}  total {:.4}  lm {:.4}  ul {:.4}  ln {:.4}  lr {:.2e}",
                m.step, m.total, m.lm, m.ul, m.ln, m.lr
            );
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn write_metrics(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_metrics_csv(metrics, BufWriter::new(f))?;
    Ok(())
}

fn write_report(out: &Path, report: &EvalReport) -> Result<()> {
    fs::write(out.join("report.json"), report.to_json()?)?;
    report.write_csv(BufWriter::new(File::create(out.join("report.csv"))?))?;
    println!(
        "median accuracy {:.4}  IQR {:.4}  over {} cells",
        report.median,
        report.iqr,
        report.cells.len()
    );
    Ok(())
}

fn cmd_train<F: Real>(a: &TrainArgs, mut cfg: RunConfig) -> Result<()> {
    let out = &a.common.out;
    if let Some(s) = a.common.seed {
        cfg.eval.seeds = vec![s];
    }
    cfg.train.losses.ul &= !a.no_ul;
    cfg.train.losses.ln &= !a.no_ln;
    cfg.pretrained_init = (cfg.pretrained_init || a.pretrained.is_some()) && !a.no_pretrained_init;
    cfg.validate()?;
    write_json(&out.join("config.json"), &cfg)?;

    let mut model: Model<F> = cfg.build_model()?;
    let init: IA3Adapter<F> = if cfg.pretrained_init && cfg.train.mode == TrainMode::Adapter {
        match &a.pretrained {
            Some(p) => load_checkpoint(p)?.to_adapter()?,
            None => {
                let suite = cfg.suite();
                let (adapter, outcome) = pretrain_adapter(
                    &mut model,
                    &suite,
                    &cfg.pretrain,
                    progress("pretrain", cfg.pretrain.steps),
                )?;
                save_checkpoint(out.join("pretrained.ckpt"), &outcome.checkpoint)?;
                write_metrics(&out.join("pretrain-metrics.csv"), &outcome.metrics)?;
                adapter
            }
        }
    } else {
        init_adapter(model.spec())?
    };

    let steps = cfg.train.steps;
    let result = run_few_shot(&model, &init, &cfg, |seed, m| {
        if m.step % 100 == 0 || m.step == steps {
            eprintln!(
                "seed {seed} step {:>5}/{steps}  total {:.4}  lm {:.4}  ul {:.4}  ln {:.4}  lr {:.2e}",
                m.step, m.total, m.lm, m.ul, m.ln, m.lr
            );
        }
    })?;
    let name = if cfg.train.mode == TrainMode::FullFinetune {
        "model.ckpt"
    } else {
        "adapter.ckpt"
    };
    for run in &result.runs {
        let dir = out.join(format!("seed-{}", run.seed));
        fs::create_dir_all(&dir)?;
        write_metrics(&dir.join("metrics.csv"), &run.outcome.metrics)?;
        save_checkpoint(dir.join(name), &run.outcome.checkpoint)?;
    }
    write_report(out, &result.report)
}

fn cmd_pretrain<F: Real>(a: &CommonArgs, mut cfg: RunConfig) -> Result<()> {
    if let Some(s) = a.seed {
        cfg.pretrain.seed = s;
    }
    cfg.validate()?;
    let mut model: Model<F> = cfg.build_model()?;
    let suite = cfg.suite();
    let (_, outcome) = pretrain_adapter(
        &mut model,
        &suite,
        &cfg.pretrain,
        progress("pretrain", cfg.pretrain.steps),
    )?;
    save_checkpoint(a.out.join("pretrained.ckpt"), &outcome.checkpoint)?;
    write_metrics(&a.out.join("metrics.csv"), &outcome.metrics)?;
    println!("wrote {}", a.out.join("pretrained.ckpt").display());
    Ok(())
}

fn base_model(cfg: &RunConfig, path: Option<&Path>) -> Result<Model<f64>> {
    match path {
        Some(p) => Ok(load_checkpoint(p)?.to_model()?),
        None => Ok(cfg.build_model()?),
    }
}

fn cmd_eval(a: &EvalArgs, mut cfg: RunConfig) -> Result<()> {
    if let Some(s) = a.common.seed {
        cfg.eval.seeds = vec![s];
    }
    cfg.validate()?;
    let model = base_model(&cfg, a.model.as_deref())?;
    let adapters = a
        .adapter
        .iter()
        .map(|p| Ok(load_checkpoint(p)?.to_adapter::<f64>()?))
        .collect::<Result<Vec<_>>>()?;
    if !adapters.is_empty() && adapters.len() != 1 && adapters.len() != cfg.eval.seeds.len() {
        bail!(
            "{} adapters given for {} evaluation seeds",
            adapters.len(),
            cfg.eval.seeds.len()
        );
    }
    let slots: Vec<Option<&IA3Adapter<f64>>> = if adapters.is_empty() {
        vec![None]
    } else {
        adapters.iter().map(Some).collect()
    };
    let suite = cfg.suite();
    let task = find_task(&suite, &cfg.task)?;
    let report = evaluate_task(&model, &slots, task, &cfg)?;
    write_report(&a.common.out, &report)
}

fn cmd_merge(a: &MergeArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let model = base_model(&cfg, a.model.as_deref())?;
    let adapter: IA3Adapter<f64> = load_checkpoint(&a.adapter)?.to_adapter()?;
    let merged = merge(&model, &adapter)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(
        &a.out,
        &Checkpoint::from_tensors(merged.spec().clone(), merged.weights()),
    )?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_cost(a: &CostArgs) -> Result<()> {
    let mut scenarios = Vec::new();
    if a.table1 || (a.scenario.is_none() && !a.full_context) {
        scenarios.extend(table1_scenarios());
    }
    if a.full_context {
        scenarios.push(full_context_scenario());
    }
    if let Some(p) = &a.scenario {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.is_array() {
            scenarios.extend(serde_json::from_value::<Vec<CostScenario>>(value)?);
        } else {
            scenarios.push(serde_json::from_value(value)?);
        }
    }
    let reports = scenarios
        .iter()
        .map(CostScenario::report)
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", render_table(&reports));
    for r in &reports {
        if let Some(kv) = r.kv_cache_bytes {
            println!(
                "{}: key/value cache {} ({}), shots on disk {}",
                r.name,
                render_gib(kv),
                render_bytes_decimal(kv),
                render_bytes_decimal(r.disk_bytes)
            );
        }
    }
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_json(&dir.join("costs.json"), &reports)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&reports)?),
    }
    Ok(())
}
