//! Reference external learner: an in-memory fact store served over the
//! line protocol on stdin/stdout.

use anyhow::Result;
use clap::Parser;
use ockl::datagen::TemplateSet;
use ockl::extproto::serve;
use ockl::learners::{CostModel, Eviction, FactMemoryLearner};
use std::io::{stdin, stdout, BufWriter};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ockl-echo-learner", version, about)]
struct Args {
    /// Simulated seconds per trained token.
    #[arg(long, default_value_t = 0.001)]
    per_token_cost: f64,
    /// Strategy cost multiplier.
    #[arg(long, default_value_t = 1.0)]
    multiplier: f64,
    /// Number of built-in relation templates.
    #[arg(long, default_value_t = 12)]
    relations: usize,
    /// Maximum number of stored facts (unbounded when omitted).
    #[arg(long)]
    capacity: Option<usize>,
    /// Eviction policy when full.
    #[arg(long, default_value = "lru", value_parser = ["lru", "random"])]
    eviction: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = ockl::text::DEFAULT_EMBED_DIM)]
    embed_dim: usize,
}

fn main() -> Result<ExitCode> {
    let a = Args::parse();
    let eviction = if a.eviction == "random" { Eviction::Random } else { Eviction::Lru };
    let cost = CostModel {
        per_token_cost: a.per_token_cost,
        multiplier: a.multiplier,
    };
    let mut learner = FactMemoryLearner::new(TemplateSet::builtin(a.relations), a.capacity, eviction, a.seed, cost, a.embed_dim)?;
    let code = serve(&mut learner, stdin().lock(), BufWriter::new(stdout().lock()))?;
    Ok(ExitCode::from(code as u8))
}
