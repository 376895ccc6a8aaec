use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rrtl::agent::{greedy_action, run_training, Agent, AgentConfig, RewardTransform};
use rrtl::envs::{ChainWorld, Environment, CHAIN_SCHEMA};
use rrtl::harness::{self, BaselineMode, LoadedCheckpoint, Preset, RunConfig};
use rrtl::qtree::{LeafStatistic, QTree, SplitConfig};
use rrtl::relations::{Encoding, GameId, Outcome, RelationSpace, RelationalState, Schema, StateBuilder};
use rrtl::stats::{f_test_p_value, pooled_f_ratio, RunningStats};

type Verdict = Result<String, String>;

struct Gate {
    results: Vec<(String, bool)>,
}

impl Gate {
    fn run(&mut self, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let mut verdict = f();
        let took = start.elapsed();
        if let (Some(b), Ok(detail)) = (budget, &verdict) {
            if took > b {
                verdict = Err(format!("{detail}; took {took:.1?}, budget {b:?}"));
            }
        }
        let (ok, detail) = match verdict {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("{} {name}: {detail} [{took:.1?}]", if ok { "PASS" } else { "FAIL" });
        self.results.push((name.to_string(), ok));
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn statistics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=10_000);
        let centre = rng.gen_range(1.0..1000.0);
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let xs: Vec<f64> = (0..n).map(|_| centre + scale * (rng.gen::<f64>() - 0.5)).collect();
        let s = RunningStats::from_slice(&xs);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let j: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        if s.n != n as u64 {
            return Err(format!("count {} vs {n}", s.n));
        }
        worst.0 = worst.0.max(rel_err(s.mean, mean));
        worst.1 = worst.1.max(rel_err(s.j, j));
    }
    let detail = format!("max relative error mean {:.2e}, J {:.2e}", worst.0, worst.1);
    if worst.0 <= 1e-9 && worst.1 <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn f_ratio_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(2..=4);
        let groups: Vec<Vec<f64>> = (0..k)
            .map(|g| {
                let shift = g as f64 * rng.gen_range(0.0..3.0);
                (0..rng.gen_range(1..=200)).map(|_| shift + rng.gen::<f64>()).collect()
            })
            .collect();
        let all: Vec<f64> = groups.concat();
        let children: Vec<RunningStats> = groups.iter().map(|g| RunningStats::from_slice(g)).collect();
        let overall = RunningStats::from_slice(&all);
        let f = pooled_f_ratio(&children, &overall).map_err(|e| e.to_string())?;

        let ss = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        let within: f64 = groups.iter().map(|g| ss(g)).sum();
        worst = worst.max((f - within / ss(&all)).abs());
    }
    if worst > 1e-9 {
        return Err(format!("max |F - ANOVA| {worst:.2e}"));
    }

    let perfect = [RunningStats::from_slice(&[1.0; 7]), RunningStats::from_slice(&[4.0; 5]), RunningStats::from_slice(&[9.0; 3])];
    let pooled: Vec<f64> = [vec![1.0; 7], vec![4.0; 5], vec![9.0; 3]].concat();
    let f0 = pooled_f_ratio(&perfect, &RunningStats::from_slice(&pooled)).map_err(|e| e.to_string())?;
    let child = RunningStats::from_slice(&[1.0, 2.0, 3.0, 6.0]);
    let same = RunningStats {
        n: 3 * child.n,
        mean: child.mean,
        j: 3.0 * child.j,
    };
    let f1 = pooled_f_ratio(&[child; 3], &same).map_err(|e| e.to_string())?;
    let detail = format!("max |F - ANOVA| {worst:.2e}; perfect split F = {f0}; identical children F = {f1}");
    if f0 == 0.0 && f1 == 1.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn f_distribution() -> Verdict {
    let mut worst = 0.0f64;
    for k in [1u64, 5, 30, 100] {
        let p = f_test_p_value(1.0, k, k).map_err(|e| e.to_string())?;
        worst = worst.max((p - 0.5).abs());
    }
    if worst > 1e-8 {
        return Err(format!("max |p(1, k, k) - 0.5| {worst:.2e}"));
    }
    for (d1, d2) in [(1u64, 1u64), (2, 100), (3, 2_000), (4, 99_999)] {
        let mut prev = 0.0;
        for i in 0..1000 {
            let f = 5.0 * i as f64 / 999.0;
            let p = f_test_p_value(f, d1, d2).map_err(|e| e.to_string())?;
            if !(0.0..=1.0).contains(&p) || p < prev {
                return Err(format!("p({f}, {d1}, {d2}) = {p} after {prev}"));
            }
            prev = p;
        }
    }
    Ok(format!("max |p(1, k, k) - 0.5| {worst:.2e}; nondecreasing on 4 grids of 1000 points"))
}

fn stream_tree(encoding: Encoding) -> Result<QTree, String> {
    let space: Arc<RelationSpace> = Arc::new(Schema::builtin(GameId::Breakout).relation_space(encoding));
    let mut tree = QTree::new(Arc::clone(&space));
    let cfg = SplitConfig {
        min_sample: 200,
        significance: 0.001,
        max_depth: 10,
        statistic: LeafStatistic::Target,
    };
    let comparative = Schema::builtin(GameId::Breakout).relation_space(Encoding::Comparative);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20_000 {
        let values: Vec<Outcome> = (0..comparative.len()).map(|_| Outcome::COMPARATIVE[rng.gen_range(0..3)]).collect();
        // target depends only on x(player, ball), three ways
        let target = match values[0] {
            Outcome::More => -1.0,
            Outcome::Same => 0.5,
            _ => 2.0,
        };
        let state = match encoding {
            Encoding::Comparative => values,
            Encoding::Logical => values
                .iter()
                .flat_map(|&v| Outcome::COMPARATIVE.map(|ind| Outcome::from_bool(v == ind)))
                .collect(),
        };
        tree.learn(&RelationalState::Values(state), target, 0.1, &cfg).map_err(|e| e.to_string())?;
    }
    Ok(tree)
}

fn expressiveness() -> Verdict {
    let cmp = stream_tree(Encoding::Comparative)?;
    let log = stream_tree(Encoding::Logical)?;
    let residual: f64 = cmp.paths().iter().map(|(_, leaf)| leaf.overall.j).sum();
    let detail = format!(
        "comparative {} split(s), {} leaves, residual J {residual}; logical {} splits",
        cmp.split_count(),
        cmp.leaf_count(),
        log.split_count()
    );
    let root_is_x = cmp.tested_relations() == [0];
    if cmp.split_count() == 1 && cmp.leaf_count() == 3 && root_is_x && residual == 0.0 && log.split_count() >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn chain() -> Verdict {
    const GAMMA: f64 = 0.9;
    let mut oracle = [[0.0f64; 2]; 5];
    for _ in 0..1000 {
        let v: Vec<f64> = oracle.iter().map(|r| r[0].max(r[1])).collect();
        for s in 0..5 {
            oracle[s][0] = GAMMA * v[s.saturating_sub(1)];
            oracle[s][1] = if s == 4 { 1.0 } else { GAMMA * v[s + 1] };
        }
    }
    let schema = Schema::from_toml(CHAIN_SCHEMA).map_err(|e| e.to_string())?;
    let mut env = ChainWorld::new();
    let builder = StateBuilder::new(&schema, Encoding::Comparative, env.object_names()).map_err(|e| e.to_string())?;
    let config = AgentConfig {
        alpha: 0.1,
        gamma: GAMMA,
        epsilon0: 1.0,
        epsilon_decay: 1.0,
        epsilon_floor: 1.0,
        test_epsilon: 0.0,
        reward_transform: RewardTransform::Identity,
        action_buffer_len: 10,
        reward_buffer_len: None,
    };
    let split = SplitConfig {
        min_sample: 200,
        ..SplitConfig::default()
    };
    let mut agent = Agent::new(config, split, env.actions(), Arc::clone(builder.space())).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    run_training(&mut env, &builder, &mut agent, 100_000, 0, &mut rng, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for cell in 0..5 {
        let obs = env.reset_to(cell);
        let state = builder.build(&obs, &obs);
        for (a, tree) in agent.trees.iter().enumerate() {
            let q = tree.predict(&state).map_err(|e| e.to_string())?;
            worst = worst.max((q - oracle[cell as usize][a]).abs());
        }
        let best = usize::from(oracle[cell as usize][1] > oracle[cell as usize][0]);
        if greedy_action(&agent.trees, &state).map_err(|e| e.to_string())? != best {
            return Err(format!("greedy action differs from the optimum in cell {cell}"));
        }
    }
    let detail = format!("greedy policy optimal; max |Q - Q*| {worst:.2e}");
    if worst <= 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn state_counts() -> Verdict {
    let got: Vec<u64> = GameId::ALL.iter().map(|&g| harness::cmd_enumerate_states(g)).collect();
    let want = [81, 78_732, 824_633_720_832];
    let detail = format!("{got:?}");
    if got == want {
        Ok(detail)
    } else {
        Err(format!("{detail}, expected {want:?}"))
    }
}

struct Trained {
    best: Vec<PathBuf>,
    test_means: Vec<f64>,
}

fn train_select_test(game: GameId, encoding: Encoding, root: &Path) -> Result<Trained, String> {
    let cfg = RunConfig::preset(Preset::Desk, game, encoding, 0);
    let out = root.join(format!("{game}-{encoding}"));
    let runs = harness::cmd_train(&cfg, &out).map_err(|e| e.to_string())?;
    let mut best = Vec::new();
    let mut test_means = Vec::new();
    for r in &runs {
        let sel = harness::cmd_select_best(&harness::run_dir(&out, r.run), 10, 0.05, 0).map_err(|e| e.to_string())?;
        let report = harness::cmd_test(&sel.best, 100, 0.05, 0, None).map_err(|e| e.to_string())?;
        test_means.push(report.summary.mean);
        best.push(sel.best);
    }
    Ok(Trained { best, test_means })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn fmt_means(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join(" ")
}

fn breakout_learning(root: &Path, keep: &mut Option<Trained>) -> Verdict {
    let cmp = train_select_test(GameId::Breakout, Encoding::Comparative, root)?;
    let log = train_select_test(GameId::Breakout, Encoding::Logical, root)?;
    let params = RunConfig::preset(Preset::Desk, GameId::Breakout, Encoding::Comparative, 0).env;
    let baseline = harness::cmd_baseline(GameId::Breakout, BaselineMode::Uniform, 100, 0, &params)
        .map_err(|e| e.to_string())?
        .summary
        .mean;
    // five times the baseline's magnitude, which also covers a negative baseline
    let threshold = 5.0 * baseline.abs();
    let passing = cmp.test_means.iter().filter(|&&m| m >= threshold).count();
    let (mc, ml) = (median(&cmp.test_means), median(&log.test_means));
    let detail = format!(
        "baseline {baseline:.2}, threshold {threshold:.2}; {passing}/10 comparative runs pass; median comparative {mc:.2} vs logical {ml:.2}; comparative [{}] logical [{}]",
        fmt_means(&cmp.test_means),
        fmt_means(&log.test_means)
    );
    *keep = Some(cmp);
    if passing >= 7 && mc >= ml {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Greedy action for a partial assignment, ties to the lowest action index.
fn greedy_partial(trees: &[QTree], assignment: &BTreeMap<usize, Outcome>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (a, t) in trees.iter().enumerate() {
        let q = t.predict_partial(assignment)?;
        if best.is_none_or(|(_, bq)| q > bq) {
            best = Some((a, q));
        }
    }
    best.map(|(a, _)| a)
}

/// Greedy policy moves LEFT when the player is right of a descending ball and
/// RIGHT when it is left of it, with some tree testing player-ball x.
fn follows_the_ball(path: &Path) -> Result<bool, String> {
    let ckpt = LoadedCheckpoint::load(path).map_err(|e| e.to_string())?;
    let space = ckpt.builder.space();
    let idx = |n: &str| space.index_of(n).ok_or_else(|| format!("no relation {n}"));
    let (x, y, dy) = (idx("x(player_t, ball_t)")?, idx("y(player_t, ball_t)")?, idx("y(ball_t, ball_t-1)")?);
    if !ckpt.trees.iter().any(|t| t.tested_relations().contains(&x)) {
        return Ok(false);
    }
    let action = |name: &str| ckpt.doc.trees.iter().position(|t| t.action.name() == name);
    let (Some(left), Some(right)) = (action("LEFT"), action("RIGHT")) else {
        return Err("missing LEFT/RIGHT".into());
    };
    let mut tested: Vec<usize> = ckpt.trees.iter().flat_map(|t| t.tested_relations()).filter(|&r| r != x && r != y && r != dy).collect();
    tested.sort_unstable();
    tested.dedup();
    let domains: Vec<&[Outcome]> = tested.iter().map(|&r| space.get(r).outcomes()).collect();
    let mut combos: Vec<Vec<Outcome>> = vec![Vec::new()];
    for d in domains {
        combos = combos.iter().flat_map(|c| d.iter().map(move |&o| [c.clone(), vec![o]].concat())).collect();
    }
    for combo in combos {
        for (xo, want) in [(Outcome::More, left), (Outcome::Less, right)] {
            let mut a: BTreeMap<usize, Outcome> = tested.iter().copied().zip(combo.iter().copied()).collect();
            a.insert(x, xo);
            a.insert(y, Outcome::More);
            a.insert(dy, Outcome::More);
            if greedy_partial(&ckpt.trees, &a) != Some(want) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn splits_on(path: &Path, relation: &str) -> Result<bool, String> {
    let ckpt = LoadedCheckpoint::load(path).map_err(|e| e.to_string())?;
    let r = ckpt.builder.space().index_of(relation).ok_or_else(|| format!("no relation {relation}"))?;
    Ok(ckpt.trees.iter().any(|t| t.tested_relations().contains(&r)))
}

fn policy_structure(root: &Path, breakout: Option<&Trained>) -> Verdict {
    let owned;
    let breakout = match breakout {
        Some(t) => t,
        None => {
            owned = train_select_test(GameId::Breakout, Encoding::Comparative, root)?;
            &owned
        }
    };
    let mut follow = Vec::new();
    for (run, p) in breakout.best.iter().enumerate() {
        if follows_the_ball(p)? {
            follow.push(run);
        }
    }
    let pong = train_select_test(GameId::Pong, Encoding::Comparative, root)?;
    let mut ysplit = Vec::new();
    for (run, p) in pong.best.iter().enumerate() {
        if splits_on(p, "y(player_t, ball_t)")? {
            ysplit.push(run);
        }
    }
    let detail = format!(
        "Breakout follow-the-ball runs {follow:?}; Pong runs splitting on y(player, ball) {ysplit:?}; Pong test means [{}]",
        fmt_means(&pong.test_means)
    );
    if !follow.is_empty() && !ysplit.is_empty() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn demon_attack_baselines() -> Verdict {
    let params = RunConfig::preset(Preset::Desk, GameId::DemonAttack, Encoding::Comparative, 0).env;
    let mean = |mode| {
        harness::cmd_baseline(GameId::DemonAttack, mode, 100, 0, &params)
            .map(|r| r.summary.mean)
            .map_err(|e| e.to_string())
    };
    let (fire, uniform) = (mean(BaselineMode::FireOnly)?, mean(BaselineMode::Uniform)?);
    let detail = format!("fire-only {fire:.2} vs uniform {uniform:.2}");
    if fire > uniform {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tree_files(root: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| e.to_string())?;
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn determinism(root: &Path) -> Verdict {
    let mut total = 0;
    for game in [GameId::Breakout, GameId::DemonAttack] {
        let mut cfg = RunConfig::preset(Preset::Desk, game, Encoding::Comparative, 11);
        cfg.iterations = 40_000;
        cfg.seeds.truncate(3);
        let (a, b) = (root.join(format!("det-{game}-a")), root.join(format!("det-{game}-b")));
        harness::cmd_train(&cfg, &a).map_err(|e| e.to_string())?;
        harness::cmd_train(&cfg, &b).map_err(|e| e.to_string())?;
        let (fa, fb) = (tree_files(&a)?, tree_files(&b)?);
        if fa.keys().ne(fb.keys()) {
            return Err(format!("{game}: different file sets"));
        }
        if let Some((p, _)) = fa.iter().find(|(p, bytes)| fb[*p] != **bytes) {
            return Err(format!("{game}: {} differs", p.display()));
        }
        total += fa.len();
    }
    Ok(format!("{total} files byte-identical across two invocations"))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path();
    let mut gate = Gate { results: Vec::new() };
    gate.run("statistics oracle", Some(Duration::from_secs(10)), statistics_oracle);
    gate.run("F-ratio oracle", None, f_ratio_oracle);
    gate.run("F-distribution", None, f_distribution);
    gate.run("comparative expressiveness", Some(Duration::from_secs(60)), expressiveness);
    gate.run("chain Q-learning", Some(Duration::from_secs(30)), chain);
    gate.run("state-space counts", None, state_counts);
    let mut breakout = None;
    gate.run("scaled Breakout learning", Some(Duration::from_secs(30 * 60)), || breakout_learning(root, &mut breakout));
    gate.run("policy structure", None, || policy_structure(root, breakout.as_ref()));
    gate.run("Demon Attack baselines", None, demon_attack_baselines);
    gate.run("determinism", None, || determinism(root));

    let failed: Vec<&str> = gate.results.iter().filter(|(_, ok)| !ok).map(|(n, _)| n.as_str()).collect();
    println!("acceptance: {}/{} criteria pass", gate.results.len() - failed.len(), gate.results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
