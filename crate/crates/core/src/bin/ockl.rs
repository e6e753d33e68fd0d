use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ockl::config::{preset_by_name, RunConfig};
use ockl::datagen::{compute_stream_stats, read_jsonl, write_stream, Stream, StreamConfig, StreamMode};
use ockl::report::{
    comparison_table, load_run_config, read_metrics_csv, render_table, summarize_run, to_pretty_json, write_plotdata,
    SweepCell,
};
use ockl::scheduler::{execute, SchedulerError};
use ockl::types::KnowledgeItem;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Online continual knowledge learning simulator.
#[derive(Parser)]
#[command(name = "ockl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic knowledge/QA stream.
    Gen(GenArgs),
    /// Run one experiment from a JSON config (or a manifest.json).
    Run {
        /// Run config or manifest file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment preset over a base config.
    Sweep {
        /// Preset name (`ratio`).
        #[arg(long)]
        preset: String,
        /// Base run config.
        #[arg(long)]
        config: PathBuf,
        /// Output directory, one subdirectory per cell.
        #[arg(long, default_value = "sweep-out")]
        out: PathBuf,
    },
    /// Print statistics of a knowledge stream file (or a stream directory).
    Stats {
        #[arg(long)]
        stream: PathBuf,
    },
    /// Re-emit plot data and print a table for a finished run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = StreamConfig::default().seed)]
    seed: u64,
    /// Number of subject entities.
    #[arg(long, default_value_t = StreamConfig::default().n_entities)]
    entities: usize,
    /// Number of relations.
    #[arg(long, default_value_t = StreamConfig::default().n_relations)]
    relations: usize,
    /// Fraction of fact chains that change over time.
    #[arg(long, default_value_t = StreamConfig::default().variant_fraction)]
    variant_fraction: f64,
    #[arg(long, default_value_t = StreamConfig::default().n_steps)]
    steps: usize,
    /// Fill target per step in redundant mode.
    #[arg(long, default_value_t = StreamConfig::default().items_per_step)]
    items_per_step: usize,
    #[arg(long, default_value = "redundancy-free", value_parser = ["redundant", "redundancy-free"])]
    mode: String,
    /// Number of days covered by the stream.
    #[arg(long, default_value_t = StreamConfig::default().horizon)]
    horizon: u32,
    /// Value changes per time-variant chain.
    #[arg(long, default_value_t = StreamConfig::default().updates_per_variant)]
    updates_per_variant: u32,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            let step = e.downcast_ref::<SchedulerError>().and_then(SchedulerError::step);
            let code = error_code(&e);
            let obj = json!({ "error": { "code": code, "message": format!("{e:#}"), "step": step } });
            eprintln!("{obj}");
            ExitCode::FAILURE
        }
    }
}

fn error_code(e: &anyhow::Error) -> &'static str {
    use ockl::config::ConfigError;
    use ockl::report::ReportError;
    // The most specific cause wins, wherever it sits in the chain.
    if let Some(p) = e.chain().find_map(|c| c.downcast_ref::<ockl::extproto::ProtocolError>()) {
        return p.code();
    }
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some()
            || matches!(cause.downcast_ref::<ReportError>(), Some(ReportError::Config(_)))
        {
            return "config";
        }
    }
    match e.downcast_ref::<SchedulerError>() {
        Some(SchedulerError::Step { .. }) => "step_failed",
        Some(SchedulerError::Config(_)) => "config",
        Some(_) => "run_failed",
        None => "error",
    }
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::Gen(a) => gen(a),
        Cmd::Run { config, out } => run(&config, &out),
        Cmd::Sweep { preset, config, out } => sweep(&preset, &config, &out),
        Cmd::Stats { stream } => stats(&stream),
        Cmd::Report { run } => report(&run),
    }
}

fn gen(a: GenArgs) -> Result<ExitCode> {
    let cfg = StreamConfig {
        seed: a.seed,
        n_entities: a.entities,
        n_relations: a.relations,
        variant_fraction: a.variant_fraction,
        horizon: a.horizon,
        updates_per_variant: a.updates_per_variant,
        n_steps: a.steps,
        items_per_step: a.items_per_step,
        mode: a.mode.parse::<StreamMode>().map_err(anyhow::Error::msg)?,
    };
    let (_, stream) = cfg.generate()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_stream(&stream, &a.out)?;
    let stats = compute_stream_stats(&stream);
    std::fs::write(a.out.join("stats.json"), to_pretty_json(&stats))?;
    let manifest = json!({ "tool": "ockl", "tool_version": ockl::VERSION, "stream": cfg });
    std::fs::write(a.out.join("manifest.json"), to_pretty_json(&manifest))?;
    println!(
        "wrote {} steps, {} knowledge items, {} qa items to {}",
        stream.len(),
        stream.knowledge().count(),
        stream.qa().count(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_one(cfg: &RunConfig, out: &Path) -> Result<ockl::report::Summary> {
    let result = execute(cfg)?;
    Ok(summarize_run(&result, out)?)
}

fn run(config: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = load_run_config(config)?;
    let summary = run_one(&cfg, out)?;
    print!("{}", to_pretty_json(&summary));
    Ok(ExitCode::SUCCESS)
}

fn sweep(preset: &str, config: &Path, out: &Path) -> Result<ExitCode> {
    let base = load_run_config(config)?;
    let preset = preset_by_name(preset, &base)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cells: Vec<SweepCell> = std::thread::scope(|s| {
        let handles: Vec<_> = preset
            .cells
            .iter()
            .map(|(label, cfg)| {
                let dir = out.join(format!("{}-{label}", preset.name));
                s.spawn(move || SweepCell {
                    label: label.clone(),
                    outcome: run_one(cfg, &dir).map_err(|e| format!("{e:#}")),
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep cell panicked")).collect()
    });
    let table = comparison_table(&preset.axis, &cells);
    std::fs::write(out.join("comparison.csv"), &table)?;
    print!("{table}");
    if cells.iter().any(|c| c.outcome.is_err()) {
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn stats(path: &Path) -> Result<ExitCode> {
    let file = if path.is_dir() { path.join("knowledge.jsonl") } else { path.to_path_buf() };
    let knowledge: Vec<KnowledgeItem> = read_jsonl(&file)?;
    if knowledge.is_empty() {
        bail!("{} holds no knowledge items", file.display());
    }
    let stream = Stream::from_records(knowledge, Vec::new(), None)?;
    print!("{}", to_pretty_json(&compute_stream_stats(&stream)));
    Ok(ExitCode::SUCCESS)
}

fn report(dir: &Path) -> Result<ExitCode> {
    let records = read_metrics_csv(&dir.join("metrics.csv"))?;
    write_plotdata(&records, dir)?;
    print!("{}", render_table(&records));
    if let Ok(summary) = std::fs::read_to_string(dir.join("summary.json")) {
        print!("{summary}");
    }
    Ok(ExitCode::SUCCESS)
}
