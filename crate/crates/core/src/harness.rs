//! Experimental protocol: multi-run training, checkpoint selection, testing,
//! random baselines, rule export and state-space enumeration.
//!
//! Every artifact carries the format version and the full [`RunConfig`]:
//! checkpoints as JSON fields, CSV files as leading `#` lines.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_episode, run_training, Agent, AgentConfig, AgentError, EpisodeRecord};
use crate::envs::{make_env, Action, EnvParams, TraceWriter};
use crate::qtree::{export_rules, NodeDoc, QTree, SplitConfig, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use crate::relations::{Encoding, GameId, RelationError, Schema, StateBuilder};

pub const FORMAT_VERSION: u32 = 1;

/// Pong returns are shifted into [0, 21] for reporting.
pub const PONG_OFFSET: f64 = 21.0;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no checkpoints found in {0}")]
    NoCheckpoints(PathBuf),
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{0}")]
    Baseline(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub game: GameId,
    pub encoding: Encoding,
    pub iterations: u64,
    pub checkpoint_every: u64,
    /// One run per seed.
    pub seeds: Vec<u64>,
    pub agent: AgentConfig,
    pub split: SplitConfig,
    #[serde(default)]
    pub env: EnvParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Full-length schedule.
    Full,
    /// Shortened schedule for quick experiments.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            other => Err(format!("unknown preset `{other}` (expected full|desk)")),
        }
    }
}

fn full_iterations(game: GameId) -> u64 {
    match game {
        GameId::Breakout | GameId::Pong => 2_000_000,
        GameId::DemonAttack => 3_000_000,
    }
}

const DESK_ITERATIONS: u64 = 200_000;

impl RunConfig {
    /// Ten runs with seeds `base_seed..base_seed + 10`.
    pub fn preset(preset: Preset, game: GameId, encoding: Encoding, base_seed: u64) -> Self {
        let mut agent = AgentConfig::for_game(game);
        let full = full_iterations(game);
        let (iterations, checkpoint_every, min_sample) = match preset {
            Preset::Full => (full, 200_000, 100_000),
            Preset::Desk => {
                // same ε at the end of training as the full schedule
                agent.epsilon_decay = agent.epsilon_decay.powf(full as f64 / DESK_ITERATIONS as f64);
                (DESK_ITERATIONS, 20_000, 2_000)
            }
        };
        Self {
            game,
            encoding,
            iterations,
            checkpoint_every,
            seeds: (base_seed..base_seed + 10).collect(),
            agent,
            split: SplitConfig {
                min_sample,
                ..SplitConfig::default()
            },
            env: EnvParams::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.agent.validate()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        if !(self.split.significance > 0.0 && self.split.significance < 1.0) {
            return Err(HarnessError::Config("significance must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn header(&self) -> String {
        let json = serde_json::to_string(self).expect("run config serializes");
        format!("# rrtl format {FORMAT_VERSION}\n# config {json}\n")
    }

    fn builder(&self) -> Result<StateBuilder, HarnessError> {
        let env = make_env(self.game, &self.env);
        Ok(StateBuilder::new(&Schema::builtin(self.game), self.encoding, env.object_names())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionTree {
    pub action: Action,
    pub tree: NodeDoc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointDoc {
    pub format: String,
    pub version: u32,
    pub config: RunConfig,
    pub run: usize,
    pub seed: u64,
    pub iteration: u64,
    pub epsilon: f64,
    pub trees: Vec<ActionTree>,
}

/// Trees restored from a checkpoint, ready for evaluation.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub path: PathBuf,
    pub doc: CheckpointDoc,
    pub builder: StateBuilder,
    pub trees: Vec<QTree>,
}

impl LoadedCheckpoint {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let bad = |msg: String| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let doc: CheckpointDoc = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format {} v{}", doc.format, doc.version)));
        }
        let builder = doc.config.builder()?;
        let env = make_env(doc.config.game, &doc.config.env);
        let actions: Vec<Action> = doc.trees.iter().map(|t| t.action).collect();
        if actions != env.actions() {
            return Err(bad(format!("actions {actions:?} do not match {}", doc.config.game)));
        }
        let trees = doc
            .trees
            .iter()
            .map(|t| QTree::from_doc(&t.tree, Arc::clone(builder.space())))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            path: path.to_path_buf(),
            doc,
            builder,
            trees,
        })
    }
}

fn checkpoint_doc(cfg: &RunConfig, run: usize, seed: u64, iteration: u64, agent: &Agent) -> CheckpointDoc {
    CheckpointDoc {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        run,
        seed,
        iteration,
        epsilon: agent.epsilon,
        trees: agent
            .actions
            .iter()
            .zip(&agent.trees)
            .map(|(&action, t)| ActionTree { action, tree: t.to_doc() })
            .collect(),
    }
}

pub fn run_dir(out: &Path, run: usize) -> PathBuf {
    out.join(format!("run_{run:02}"))
}

fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:010}.json"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// CSV text with the provenance header followed by the records.
fn csv_text<F>(header: &str, columns: &[&str], fill: F) -> Result<String, HarnessError>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<(), csv::Error>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(columns)?;
        fill(&mut w)?;
        w.flush().map_err(csv::Error::from)?;
    }
    Ok(format!("{header}{}", String::from_utf8(buf).expect("csv is utf-8")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub episodes: Vec<EpisodeRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn train_one(cfg: &RunConfig, run: usize, out: &Path) -> Result<RunResult, HarnessError> {
    let seed = cfg.seeds[run];
    let dir = run_dir(out, run);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let builder = cfg.builder()?;
    let mut env = make_env(cfg.game, &cfg.env);
    let actions = env.actions().to_vec();
    let mut agent = Agent::new(cfg.agent.clone(), cfg.split, &actions, Arc::clone(builder.space()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checkpoints = Vec::new();
    let mut write_err = None;
    let episodes = run_training(env.as_mut(), &builder, &mut agent, cfg.iterations, cfg.checkpoint_every, &mut rng, |it, agent| {
        let path = checkpoint_path(&dir, it);
        let doc = checkpoint_doc(cfg, run, seed, it, agent);
        let json = serde_json::to_string(&doc).expect("checkpoint serializes");
        if let Err(e) = write_file(&path, json.as_bytes()) {
            write_err.get_or_insert(e);
        }
        checkpoints.push(path);
        Ok(())
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let text = csv_text(
        &cfg.header(),
        &["episode", "iteration", "raw_return", "epsilon", "steps", "truncated"],
        |w| {
            for e in &episodes {
                w.write_record([
                    e.episode.to_string(),
                    e.iteration.to_string(),
                    e.raw_return.to_string(),
                    e.epsilon.to_string(),
                    e.steps.to_string(),
                    e.truncated.to_string(),
                ])?;
            }
            Ok(())
        },
    )?;
    let path = dir.join("episodes.csv");
    write_file(&path, text.as_bytes())?;
    Ok(RunResult {
        run,
        seed,
        episodes,
        checkpoints,
    })
}

/// Train every run of `cfg` in parallel and write its artifacts under `out`.
///
/// Layout: `config.toml`, `curves.csv` (cumulative raw return per episode for
/// all runs) and one `run_NN/` directory per seed holding `episodes.csv` and
/// `checkpoint_<iteration>.json` files.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Vec<RunResult>, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let toml = format!("# rrtl format {FORMAT_VERSION}\n{}", cfg.to_toml());
    write_file(&out.join("config.toml"), toml.as_bytes())?;
    let results = (0..cfg.seeds.len())
        .into_par_iter()
        .map(|run| train_one(cfg, run, out))
        .collect::<Result<Vec<_>, _>>()?;
    let text = csv_text(
        &cfg.header(),
        &["run", "seed", "episode", "iteration", "raw_return", "cumulative_return"],
        |w| {
            for r in &results {
                let mut total = 0.0;
                for e in &r.episodes {
                    total += e.raw_return;
                    w.write_record([
                        r.run.to_string(),
                        r.seed.to_string(),
                        e.episode.to_string(),
                        e.iteration.to_string(),
                        e.raw_return.to_string(),
                        total.to_string(),
                    ])?;
                }
            }
            Ok(())
        },
    )?;
    write_file(&out.join("curves.csv"), text.as_bytes())?;
    Ok(results)
}

/// Mean with a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Fewer than two values: the interval collapses to the mean.
    pub degenerate: bool,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = if n == 0 { f64::NAN } else { xs.iter().sum::<f64>() / n as f64 };
        if n < 2 {
            return Self {
                n,
                mean,
                sd: 0.0,
                ci_low: mean,
                ci_high: mean,
                degenerate: true,
            };
        }
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let half = 1.96 * sd / (n as f64).sqrt();
        Self {
            n,
            mean,
            sd,
            ci_low: mean - half,
            ci_high: mean + half,
            degenerate: false,
        }
    }
}

fn report_offset(game: GameId) -> f64 {
    match game {
        GameId::Pong => PONG_OFFSET,
        _ => 0.0,
    }
}

fn episode_seeds(seed: u64, episodes: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..episodes).map(|_| rng.gen()).collect()
}

/// Raw returns of `episodes` episodes played with fixed trees.
///
/// Episodes run in parallel; each one owns an rng derived from `seed`.
pub fn evaluate(ckpt: &LoadedCheckpoint, epsilon: f64, episodes: usize, seed: u64) -> Result<Vec<f64>, HarnessError> {
    let cfg = &ckpt.doc.config;
    episode_seeds(seed, episodes)
        .into_par_iter()
        .map(|s| {
            let mut env = make_env(cfg.game, &cfg.env);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let env_seed = rng.gen();
            Ok(run_episode(env.as_mut(), &ckpt.builder, &ckpt.trees, &cfg.agent, epsilon, env_seed, &mut rng, None)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// `(checkpoint, iteration, mean raw return)` in iteration order.
    pub scores: Vec<(PathBuf, u64, f64)>,
    pub best: PathBuf,
}

pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("checkpoint_") && name.ends_with(".json") {
            found.push(path);
        }
    }
    found.sort();
    Ok(found)
}

/// Score every checkpoint in `dir` and pick the highest mean return; ties go
/// to the later iteration. Writes `selection.csv` into `dir`.
pub fn cmd_select_best(dir: &Path, episodes: usize, epsilon: f64, seed: u64) -> Result<Selection, HarnessError> {
    let paths = list_checkpoints(dir)?;
    if paths.is_empty() {
        return Err(HarnessError::NoCheckpoints(dir.to_path_buf()));
    }
    let mut scores = Vec::new();
    let mut header = String::new();
    for path in paths {
        let ckpt = LoadedCheckpoint::load(&path)?;
        let returns = evaluate(&ckpt, epsilon, episodes, seed)?;
        if header.is_empty() {
            header = ckpt.doc.config.header();
        }
        scores.push((path, ckpt.doc.iteration, Summary::of(&returns).mean));
    }
    scores.sort_by_key(|s| s.1);
    let best = scores
        .iter()
        .fold(None::<&(PathBuf, u64, f64)>, |best, s| match best {
            Some(b) if b.2 > s.2 => Some(b),
            _ => Some(s),
        })
        .map(|s| s.0.clone())
        .expect("at least one checkpoint");
    let text = csv_text(&header, &["checkpoint", "iteration", "mean_return", "best"], |w| {
        for (p, it, m) in &scores {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            w.write_record([name.to_string(), it.to_string(), m.to_string(), (*p == best).to_string()])?;
        }
        Ok(())
    })?;
    write_file(&dir.join("selection.csv"), text.as_bytes())?;
    Ok(Selection { scores, best })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestReport {
    /// Reported returns (Pong shifted by +21).
    pub returns: Vec<f64>,
    pub summary: Summary,
    pub header: String,
}

impl TestReport {
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let s = &self.summary;
        let header = format!(
            "{}# n {} mean {} sd {} ci95 {} {}{}\n",
            self.header,
            s.n,
            s.mean,
            s.sd,
            s.ci_low,
            s.ci_high,
            if s.degenerate { " degenerate" } else { "" }
        );
        csv_text(&header, &["episode", "return"], |w| {
            for (i, r) in self.returns.iter().enumerate() {
                w.write_record([i.to_string(), r.to_string()])?;
            }
            Ok(())
        })
    }
}

/// Test one checkpoint; optionally trace the first episode's objects.
pub fn cmd_test(
    checkpoint: &Path,
    episodes: usize,
    epsilon: f64,
    seed: u64,
    trace: Option<&Path>,
) -> Result<TestReport, HarnessError> {
    let ckpt = LoadedCheckpoint::load(checkpoint)?;
    let cfg = &ckpt.doc.config;
    let mut raw = evaluate(&ckpt, epsilon, episodes, seed)?;
    if let (Some(path), Some(&s)) = (trace, episode_seeds(seed, episodes).first()) {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut writer = TraceWriter::new(io::BufWriter::new(file))?;
        let mut env = make_env(cfg.game, &cfg.env);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let env_seed = rng.gen();
        let mut failed = None;
        let mut record = |obs: &crate::relations::Observation| {
            if let Err(e) = writer.record(obs) {
                failed.get_or_insert(e);
            }
        };
        raw[0] = run_episode(env.as_mut(), &ckpt.builder, &ckpt.trees, &cfg.agent, epsilon, env_seed, &mut rng, Some(&mut record))?;
        if let Some(e) = failed {
            return Err(e.into());
        }
        writer.flush().map_err(io_err(path))?;
    }
    let offset = report_offset(cfg.game);
    let returns: Vec<f64> = raw.iter().map(|r| r + offset).collect();
    Ok(TestReport {
        summary: Summary::of(&returns),
        returns,
        header: cfg.header(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMode {
    Uniform,
    /// Only the firing actions (FIRE, RIGHTFIRE, LEFTFIRE).
    FireOnly,
}

impl std::str::FromStr for BaselineMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(BaselineMode::Uniform),
            "fire-only" => Ok(BaselineMode::FireOnly),
            other => Err(format!("unknown baseline mode `{other}` (expected uniform|fire-only)")),
        }
    }
}

/// Returns of a random agent; Pong returns are shifted like test returns.
pub fn cmd_baseline(
    game: GameId,
    mode: BaselineMode,
    episodes: usize,
    seed: u64,
    params: &EnvParams,
) -> Result<TestReport, HarnessError> {
    let actions: Vec<Action> = {
        let env = make_env(game, params);
        match mode {
            BaselineMode::Uniform => env.actions().to_vec(),
            BaselineMode::FireOnly => {
                let fire: Vec<Action> = env.actions().iter().copied().filter(|a| a.fires()).collect();
                if fire.len() < 2 {
                    return Err(HarnessError::Baseline(format!("{game} has no fire variants beyond FIRE")));
                }
                fire
            }
        }
    };
    let raw = episode_seeds(seed, episodes)
        .into_par_iter()
        .map(|s| {
            let mut env = make_env(game, params);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            env.reset(rng.gen());
            let mut total = 0.0;
            loop {
                let step = env.step(actions[rng.gen_range(0..actions.len())]).map_err(AgentError::from)?;
                total += step.reward;
                if step.done {
                    return Ok(total);
                }
            }
        })
        .collect::<Result<Vec<f64>, HarnessError>>()?;
    let offset = report_offset(game);
    let returns: Vec<f64> = raw.iter().map(|r| r + offset).collect();
    let mode_name = match mode {
        BaselineMode::Uniform => "uniform",
        BaselineMode::FireOnly => "fire-only",
    };
    Ok(TestReport {
        summary: Summary::of(&returns),
        returns,
        header: format!("# rrtl format {FORMAT_VERSION}\n# baseline {game} {mode_name} seed {seed}\n"),
    })
}

/// The greedy policy of a checkpoint as an if/elif rule chain.
pub fn cmd_export_rules(checkpoint: &Path) -> Result<String, HarnessError> {
    let ckpt = LoadedCheckpoint::load(checkpoint)?;
    let named: Vec<(String, &QTree)> = ckpt
        .doc
        .trees
        .iter()
        .zip(&ckpt.trees)
        .map(|(t, tree)| (t.action.name().to_string(), tree))
        .collect();
    let mut text = String::new();
    writeln!(text, "# {} {} run {} iteration {}", ckpt.doc.config.game, ckpt.doc.config.encoding, ckpt.doc.run, ckpt.doc.iteration).unwrap();
    text.push_str(&export_rules(&named).render());
    Ok(text)
}

pub fn cmd_enumerate_states(game: GameId) -> u64 {
    Schema::builtin(game).state_space_size()
}

/// Write `text` to `path`, or to stdout when `path` is `None`.
pub fn emit(path: Option<&Path>, text: &str) -> Result<(), HarnessError> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            write_file(p, text.as_bytes())
        }
        None => io::stdout().write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>"))),
    }
}
