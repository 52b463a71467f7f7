use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use lrlb::checkpoint;
use lrlb::datasets::{
    emit_jsonl, gen_hashchain, gen_hashhop, mix_seed, validate, GenConfig, Sample,
};
use lrlb::harness::{self, ExperimentConfig, Recipe};
use lrlb::plot::bar_chart;
use lrlb::rank::{analyze_adapter, DEFAULT_TAU};

#[derive(Parser)]
#[command(
    name = "lrlb",
    version,
    about = "Low-rank adapter benchmarks on procedural hash tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate benchmark samples as JSONL.
    Gen {
        #[command(subcommand)]
        task: GenTask,
    },
    /// Run an experiment recipe: planning, reasoning or elora-compare.
    RunRecipe {
        recipe: String,
        /// TOML (or .json) file overlaid on the recipe's built-in settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated seeds, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effective-rank analysis of an adapter checkpoint.
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Directory for the CSV and SVG (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine recipe run directories into a markdown report.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 5)]
    hash_len: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GenTask {
    Hashhop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hops: usize,
        #[arg(long)]
        chain_length: usize,
    },
    Hashchain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        chains: usize,
        #[arg(long, default_value_t = 1)]
        min_length: usize,
        #[arg(long, default_value_t = 5)]
        max_length: usize,
    },
}

fn gen(task: GenTask) -> anyhow::Result<()> {
    let (common, label) = match &task {
        GenTask::Hashhop {
            common,
            hops,
            chain_length,
        } => (
            common,
            format!("hashhop hops={hops} chain_length={chain_length}"),
        ),
        GenTask::Hashchain {
            common,
            chains,
            min_length,
            max_length,
        } => (
            common,
            format!("hashchain chains={chains} lengths={min_length}..={max_length}"),
        ),
    };
    let cfg = GenConfig {
        hash_len: common.hash_len,
        ..Default::default()
    };
    let mut samples = Vec::with_capacity(common.count);
    for i in 0..common.count as u64 {
        let seed = mix_seed(common.seed, i);
        let s = match &task {
            GenTask::Hashhop {
                hops, chain_length, ..
            } => Sample::HashHop(gen_hashhop(seed, *chain_length, *hops, &cfg)?),
            GenTask::Hashchain {
                chains,
                min_length,
                max_length,
                ..
            } => Sample::HashChain(gen_hashchain(
                seed,
                *chains,
                (*min_length, *max_length),
                &cfg,
            )?),
        };
        if let Err(v) = validate(&s) {
            bail!("generated sample {i} failed validation: {v:?}");
        }
        samples.push(s);
    }
    let kind = if matches!(task, GenTask::Hashhop { .. }) {
        "hashhop"
    } else {
        "hashchain"
    };
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{kind}-seed{}.jsonl", common.seed)));
    emit_jsonl(&samples, &out)?;
    println!(
        "wrote {} {label} hash_len={} samples to {}",
        samples.len(),
        common.hash_len,
        out.display()
    );
    Ok(())
}

fn rank(path: &Path, tau: f64, out: Option<PathBuf>) -> anyhow::Result<()> {
    let adapters =
        checkpoint::load_adapter(path).with_context(|| format!("loading {}", path.display()))?;
    let analysis = analyze_adapter(&adapters, tau)?;
    let dir = out.unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("adapter");
    let csv = analysis.to_csv();
    let csv_path = dir.join(format!("{stem}_rank.csv"));
    std::fs::write(&csv_path, &csv).with_context(|| format!("writing {}", csv_path.display()))?;
    let bars: Vec<(String, f64)> = analysis
        .layers
        .iter()
        .map(|l| {
            (
                l.layer.clone(),
                l.report.as_ref().map_or(f64::NAN, |r| r.erank_shannon),
            )
        })
        .collect();
    let svg_path = dir.join(format!("{stem}_rank.svg"));
    std::fs::write(
        &svg_path,
        bar_chart(
            &format!("effective rank per layer (tau={tau})"),
            "erank (Shannon)",
            &bars,
        ),
    )
    .with_context(|| format!("writing {}", svg_path.display()))?;
    for l in &analysis.layers {
        if let Err(e) = &l.report {
            eprintln!("{}: {e}", l.layer);
        }
    }
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen { task } => gen(task),
        Command::RunRecipe {
            recipe,
            config,
            seeds,
            out,
        } => {
            let recipe: Recipe = recipe.parse()?;
            let mut cfg = match config {
                Some(path) => ExperimentConfig::load(&path, Some(recipe))?,
                None => ExperimentConfig::preset(recipe),
            };
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
            }
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            let summary = harness::run_recipe(&cfg)?;
            for row in &summary.median {
                let accs: Vec<String> = row
                    .accuracy
                    .iter()
                    .map(|(g, a)| format!("{g}:{a:.3}"))
                    .collect();
                println!("{:>12} {}", row.model, accs.join(" "));
            }
            println!("artifacts in {}", cfg.output_dir.display());
            Ok(())
        }
        Command::Rank {
            checkpoint,
            tau,
            out,
        } => rank(&checkpoint, tau, out),
        Command::Report { runs, out } => {
            let text = harness::report(&runs)?;
            match out {
                Some(p) => {
                    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{text}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
