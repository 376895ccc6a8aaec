use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rrtl::envs::EnvParams;
use rrtl::harness::{self, BaselineMode, Preset, RunConfig};
use rrtl::relations::{Encoding, GameId};

#[derive(Parser)]
#[command(name = "rrtl", version, about = "Relational regression tree Q-learning on object-level games")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    game: Option<GameId>,
    #[arg(long)]
    encoding: Option<Encoding>,
    /// Run config (TOML). Overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// Base seed; runs use seed, seed+1, ...
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    iterations: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every run of a config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the best checkpoint of each run directory.
    SelectBest {
        /// Training output directory (or a single run directory).
        dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate one checkpoint.
    Test {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV of returns; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-tick object positions of the first episode.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Random-agent returns.
    Baseline {
        #[arg(long)]
        game: GameId,
        #[arg(long, default_value = "uniform")]
        mode: BaselineMode,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config whose simulator parameters are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the greedy policy of a checkpoint as rules.
    ExportRules {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Number of rows of a game's relational state table.
    EnumerateStates {
        #[arg(long)]
        game: GameId,
    },
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::from_toml(&text)?)
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => load_config(path)?,
        None => {
            let (Some(game), Some(encoding)) = (a.game, a.encoding) else {
                bail!("--game and --encoding are required without --config");
            };
            RunConfig::preset(a.preset, game, encoding, a.seed.unwrap_or(0))
        }
    };
    if a.config.is_some() {
        if let Some(g) = a.game {
            cfg.game = g;
        }
        if let Some(e) = a.encoding {
            cfg.encoding = e;
        }
    }
    if let Some(n) = a.runs {
        let base = a.seed.unwrap_or(cfg.seeds[0]);
        cfg.seeds = (base..base + n as u64).collect();
    } else if let (Some(base), Some(_)) = (a.seed, &a.config) {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (base..base + n).collect();
    }
    if let Some(it) = a.iterations {
        cfg.iterations = it;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { run, out } => {
            let cfg = run_config(&run)?;
            let results = harness::cmd_train(&cfg, &out)?;
            for r in results {
                let total: f64 = r.episodes.iter().map(|e| e.raw_return).sum();
                println!(
                    "run {:02} seed {}: {} episodes, total return {total}, {} checkpoints",
                    r.run,
                    r.seed,
                    r.episodes.len(),
                    r.checkpoints.len()
                );
            }
        }
        Cmd::SelectBest { dir, episodes, epsilon, seed } => {
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run_")))
                .collect();
            dirs.sort();
            if dirs.is_empty() {
                dirs.push(dir);
            }
            for d in dirs {
                let sel = harness::cmd_select_best(&d, episodes, epsilon, seed)?;
                println!("{}", sel.best.display());
            }
        }
        Cmd::Test { checkpoint, episodes, epsilon, seed, out, trace } => {
            let report = harness::cmd_test(&checkpoint, episodes, epsilon, seed, trace.as_deref())?;
            harness::emit(out.as_deref(), &report.to_csv()?)?;
            let s = report.summary;
            eprintln!("mean {:.3} ci95 [{:.3}, {:.3}] n {}{}", s.mean, s.ci_low, s.ci_high, s.n, if s.degenerate { " (degenerate)" } else { "" });
        }
        Cmd::Baseline { game, mode, episodes, seed, config, out } => {
            let params = match config {
                Some(p) => load_config(&p)?.env,
                None => EnvParams::default(),
            };
            let report = harness::cmd_baseline(game, mode, episodes, seed, &params)?;
            harness::emit(out.as_deref(), &report.to_csv()?)?;
            let s = report.summary;
            eprintln!("mean {:.3} ci95 [{:.3}, {:.3}] n {}{}", s.mean, s.ci_low, s.ci_high, s.n, if s.degenerate { " (degenerate)" } else { "" });
        }
        Cmd::ExportRules { checkpoint, out } => {
            harness::emit(out.as_deref(), &harness::cmd_export_rules(&checkpoint)?)?;
        }
        Cmd::EnumerateStates { game } => println!("{}", harness::cmd_enumerate_states(game)),
    }
    Ok(())
}
