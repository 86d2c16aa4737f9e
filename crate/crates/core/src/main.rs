use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use subasm::asp_graph::RewardMode;
use subasm::harness::{self, ExperimentSpec};
use subasm::world::{DEFAULT_INSTANCE_COUNTS, GENERATED_PART_COUNTS};

/// Assembly sequence planning with a graph Q-network over subassembly lattices.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Dataset seed for `generate`; replaces the experiment's seed list elsewhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment file (TOML) with ExperimentSpec keys and `[trainer]` / `[oracle]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; replaces the experiment's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate instance datasets under `<out>/data/m<M>`.
    Generate {
        /// Part counts to generate (default: 4 5 6 7).
        #[arg(long = "m", num_args = 1..)]
        sizes: Vec<usize>,
        /// Instances per size (default: 272, 301, 483, 728 for M = 4..7).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Resolve and cache every edge label of the given (or configured) datasets.
    Label {
        datasets: Vec<PathBuf>,
    },
    /// Train one model per dataset and seed.
    Train {
        #[arg(long)]
        dataset: Vec<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        reward_mode: Option<RewardMode>,
    },
    /// Evaluate every method, beam width and seed on held-out instances.
    Eval {
        #[arg(long)]
        dataset: Vec<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        reward_mode: Option<RewardMode>,
    },
    /// Train on each size, test on every other size with beam width 3.
    Generalize {
        #[arg(long)]
        dataset: Vec<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        reward_mode: Option<RewardMode>,
    },
    /// Plan one instance with a trained checkpoint.
    Plan {
        instance: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long, default_value_t = 3)]
        b: usize,
    },
}

fn parse_mode(s: &str) -> Result<RewardMode, String> {
    match s {
        "delayed" => Ok(RewardMode::Delayed),
        "immediate" => Ok(RewardMode::Immediate),
        other => Err(format!("unknown reward mode `{other}` (delayed, immediate)")),
    }
}

fn data_dir(out: &Path, m: usize) -> PathBuf {
    out.join("data").join(format!("m{m}"))
}

/// Experiment from `--config` (or defaults) with the command-line overrides applied.
fn load_spec(cli: &Cli, datasets: &[PathBuf], reward_mode: Option<RewardMode>) -> Result<ExperimentSpec> {
    let mut spec = match &cli.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    if let Some(out) = &cli.out {
        spec.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        spec.seeds = vec![seed];
    }
    if let Some(mode) = reward_mode {
        spec.reward_mode = mode;
    }
    if !datasets.is_empty() {
        spec.datasets = datasets.to_vec();
    }
    if spec.datasets.is_empty() {
        spec.datasets = GENERATED_PART_COUNTS
            .iter()
            .map(|&m| data_dir(&spec.out_dir, m))
            .filter(|d| d.join("manifest.json").is_file())
            .collect();
        if spec.datasets.is_empty() {
            bail!("no datasets configured and none found under {}/data; run `generate` first", spec.out_dir.display());
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Generate { sizes, count } => {
            let out = cli.out.clone().unwrap_or_else(|| ExperimentSpec::default().out_dir);
            let sizes = if sizes.is_empty() { GENERATED_PART_COUNTS.to_vec() } else { sizes.clone() };
            let seed = cli.seed.unwrap_or(0);
            for m in sizes {
                let k = match (count, GENERATED_PART_COUNTS.iter().position(|&g| g == m)) {
                    (Some(k), _) => *k,
                    (None, Some(i)) => DEFAULT_INSTANCE_COUNTS[i],
                    (None, None) => bail!("no default instance count for M={m}; pass --count"),
                };
                let dir = data_dir(&out, m);
                harness::generate_dataset(&dir, m, k, seed).with_context(|| format!("generating M={m}"))?;
                println!("M={m}: {k} instances in {}", dir.display());
            }
        }
        Command::Label { datasets } => {
            let spec = load_spec(&cli, datasets, None)?;
            for dir in &spec.datasets {
                let dataset = harness::load_dataset(dir)?;
                let report = harness::label_dataset(&dataset, &spec.oracle)?;
                println!(
                    "{}: M={} instances={} labels={} oracle_calls={} budget_exhausted={} solvable={}",
                    dir.display(),
                    report.m,
                    report.instances,
                    report.labels,
                    report.oracle_calls,
                    report.budget_exhausted,
                    report.solvable,
                );
            }
        }
        Command::Train { dataset, reward_mode } => {
            let spec = load_spec(&cli, dataset, *reward_mode)?;
            let records = harness::cmd_train(&spec, |m, seed, p| {
                if let Some(s) = p.eval_success {
                    println!(
                        "M={m} seed={seed} epoch={} steps={} eps={:.3} reward={:.3} loss={:.5} eval={:.3}",
                        p.epoch, p.steps, p.epsilon, p.mean_reward, p.mean_loss, s
                    );
                }
            })?;
            for r in records {
                println!(
                    "M={} seed={} {}: steps={} final_eval={} -> {}",
                    r.m,
                    r.seed,
                    r.reward_mode,
                    r.steps,
                    r.final_eval.map_or("-".into(), |x| format!("{x:.3}")),
                    r.checkpoint.display()
                );
            }
        }
        Command::Eval { dataset, reward_mode } => {
            let spec = load_spec(&cli, dataset, *reward_mode)?;
            let report = harness::cmd_eval(&spec)?;
            print!("{}", harness::format_summary(&report.summary));
        }
        Command::Generalize { dataset, reward_mode } => {
            let spec = load_spec(&cli, dataset, *reward_mode)?;
            let report = harness::cmd_generalize(&spec)?;
            print!("{}", report.format());
        }
        Command::Plan { instance, checkpoint, b } => {
            let oracle = match &cli.config {
                Some(path) => ExperimentSpec::load(path)?.oracle,
                None => ExperimentSpec::default().oracle,
            };
            let report = harness::cmd_plan(instance, checkpoint, *b, &oracle)?;
            let r = &report.record;
            for (k, &p) in r.sequence.iter().enumerate() {
                let score = r.scores.as_ref().map_or(String::new(), |s| format!(" q={:.4}", s[k]));
                let ok = if r.feasible[k] { "feasible" } else { "INFEASIBLE" };
                println!("step {k}: part {p}{score} {ok}");
            }
            if r.success {
                println!("success: {:?}", r.sequence);
            } else {
                println!(
                    "failure: no candidate of {} validated; best candidate breaks at step {}",
                    report.validated,
                    r.feasible.iter().position(|&f| !f).unwrap_or(r.sequence.len())
                );
            }
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out)?;
                let path = out.join("plan.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
