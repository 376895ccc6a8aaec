//! Incrementally grown relational regression trees, one per action.
//!
//! A tree starts as a single leaf. Every leaf keeps running statistics of the
//! q-values it produces, overall and partitioned by each candidate relation.
//! Once a leaf has enough visits, each candidate is scored with the pooled
//! variance ratio and a lower-tail F-test; the leaf is replaced by a test on
//! the most significant candidate if its p-value clears the threshold.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relations::{Outcome, RelationKind, RelationSpace, RelationalState};
use crate::stats::{f_test_p_value, pooled_f_ratio, RunningStats};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TreeError {
    #[error("state is empty")]
    EmptyState,
    #[error("state has no value for relation `{0}`")]
    MissingValue(String),
    #[error("no branch for `{relation}` = {outcome}")]
    MissingOutcome { relation: String, outcome: Outcome },
    #[error("checkpoint does not match the relation space: {0}")]
    Mismatch(String),
}

/// Value recorded in the leaf statistics at every learn call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LeafStatistic {
    /// The target the leaf is moved toward.
    #[default]
    Target,
    /// The leaf q after the update.
    PostUpdateQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Visits a leaf needs before candidates are tested.
    pub min_sample: u64,
    pub significance: f64,
    pub max_depth: usize,
    #[serde(default)]
    pub statistic: LeafStatistic,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            min_sample: 100_000,
            significance: 0.001,
            max_depth: 10,
            statistic: LeafStatistic::Target,
        }
    }
}

/// Per-outcome statistics of one candidate relation at a leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub relation: usize,
    /// Aligned with the relation's outcome domain.
    pub stats: Vec<RunningStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub q: f64,
    pub visits: u64,
    pub depth: usize,
    pub overall: RunningStats,
    pub candidates: Vec<Candidate>,
}

impl Leaf {
    fn fresh(q: f64, depth: usize, tested: &[usize], space: &RelationSpace) -> Self {
        let candidates = (0..space.len())
            .filter(|id| !tested.contains(id))
            .map(|relation| Candidate {
                relation,
                stats: vec![RunningStats::new(); space.get(relation).outcomes().len()],
            })
            .collect();
        Self {
            q,
            visits: 0,
            depth,
            overall: RunningStats::new(),
            candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Inner {
        test: usize,
        /// One child per outcome of the tested relation, in domain order.
        children: Vec<(Outcome, Node)>,
    },
    Leaf(Leaf),
}

impl Node {
    fn child(&self, outcome: Outcome) -> Option<&Node> {
        match self {
            Node::Inner { children, .. } => children.iter().find(|(o, _)| *o == outcome).map(|(_, n)| n),
            Node::Leaf(_) => None,
        }
    }
}

/// The winning candidate of a split test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub relation: usize,
    pub f: f64,
    pub p: f64,
}

/// Q-value regression tree for a single action.
#[derive(Debug, Clone, PartialEq)]
pub struct QTree {
    space: Arc<RelationSpace>,
    root: Node,
}

impl QTree {
    /// Single leaf with `q = 0` and every relation as a candidate.
    pub fn new(space: Arc<RelationSpace>) -> Self {
        Self::with_initial_q(space, 0.0)
    }

    pub fn with_initial_q(space: Arc<RelationSpace>, q: f64) -> Self {
        let root = Node::Leaf(Leaf::fresh(q, 0, &[], &space));
        Self { space, root }
    }

    pub fn space(&self) -> &Arc<RelationSpace> {
        &self.space
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    fn outcome_at(&self, state: &RelationalState, relation: usize) -> Result<Outcome, TreeError> {
        match state {
            RelationalState::Empty => Err(TreeError::EmptyState),
            RelationalState::Values(v) => v
                .get(relation)
                .copied()
                .ok_or_else(|| TreeError::MissingValue(self.space.get(relation).name())),
        }
    }

    fn missing(&self, relation: usize, outcome: Outcome) -> TreeError {
        TreeError::MissingOutcome {
            relation: self.space.get(relation).name(),
            outcome,
        }
    }

    /// The leaf reached by `state`.
    pub fn leaf_for(&self, state: &RelationalState) -> Result<&Leaf, TreeError> {
        if state.is_empty() {
            return Err(TreeError::EmptyState);
        }
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(leaf) => return Ok(leaf),
                Node::Inner { test, .. } => {
                    let outcome = self.outcome_at(state, *test)?;
                    node = node.child(outcome).ok_or_else(|| self.missing(*test, outcome))?;
                }
            }
        }
    }

    pub fn predict(&self, state: &RelationalState) -> Result<f64, TreeError> {
        self.leaf_for(state).map(|leaf| leaf.q)
    }

    /// Move the reached leaf's q toward `target` by `alpha`, record
    /// `cfg.statistic` in the leaf statistics and test for a split.
    ///
    /// Returns the split that fired, if any.
    pub fn learn(
        &mut self,
        state: &RelationalState,
        target: f64,
        alpha: f64,
        cfg: &SplitConfig,
    ) -> Result<Option<SplitChoice>, TreeError> {
        let values = state.values().ok_or(TreeError::EmptyState)?;
        let space = Arc::clone(&self.space);
        let mut tested = Vec::new();
        let mut node = &mut self.root;
        loop {
            match node {
                Node::Leaf(_) => break,
                Node::Inner { test, children } => {
                    let relation = *test;
                    let outcome = *values
                        .get(relation)
                        .ok_or_else(|| TreeError::MissingValue(space.get(relation).name()))?;
                    tested.push(relation);
                    node = match children.iter_mut().find(|(o, _)| *o == outcome) {
                        Some((_, child)) => child,
                        None => {
                            return Err(TreeError::MissingOutcome {
                                relation: space.get(relation).name(),
                                outcome,
                            })
                        }
                    };
                }
            }
        }
        let Node::Leaf(leaf) = node else { unreachable!() };

        // Resolve every candidate's outcome index before mutating anything.
        let mut slots = Vec::with_capacity(leaf.candidates.len());
        for cand in &leaf.candidates {
            let outcome = *values
                .get(cand.relation)
                .ok_or_else(|| TreeError::MissingValue(space.get(cand.relation).name()))?;
            let slot = space
                .get(cand.relation)
                .outcomes()
                .iter()
                .position(|&o| o == outcome)
                .ok_or_else(|| TreeError::MissingOutcome {
                    relation: space.get(cand.relation).name(),
                    outcome,
                })?;
            slots.push(slot);
        }

        leaf.q += alpha * (target - leaf.q);
        leaf.visits += 1;
        let q = match cfg.statistic {
            LeafStatistic::Target => target,
            LeafStatistic::PostUpdateQ => leaf.q,
        };
        leaf.overall.push(q);
        for (cand, slot) in leaf.candidates.iter_mut().zip(slots) {
            cand.stats[slot].push(q);
        }

        let Some(choice) = best_split(leaf, cfg) else {
            return Ok(None);
        };
        tested.push(choice.relation);
        let replacement = split_leaf(leaf, choice.relation, &tested, &space);
        *node = replacement;
        Ok(Some(choice))
    }

    /// Apply the split test to the leaf reached by `state` without learning.
    pub fn try_split(&mut self, state: &RelationalState, cfg: &SplitConfig) -> Result<Option<SplitChoice>, TreeError> {
        let values = state.values().ok_or(TreeError::EmptyState)?;
        let space = Arc::clone(&self.space);
        let mut tested = Vec::new();
        let mut node = &mut self.root;
        while let Node::Inner { test, children } = node {
            let relation = *test;
            let outcome = values[relation];
            tested.push(relation);
            node = &mut children
                .iter_mut()
                .find(|(o, _)| *o == outcome)
                .ok_or_else(|| TreeError::MissingOutcome {
                    relation: space.get(relation).name(),
                    outcome,
                })?
                .1;
        }
        let Node::Leaf(leaf) = node else { unreachable!() };
        let Some(choice) = best_split(leaf, cfg) else {
            return Ok(None);
        };
        tested.push(choice.relation);
        let replacement = split_leaf(leaf, choice.relation, &tested, &space);
        *node = replacement;
        Ok(Some(choice))
    }

    pub fn node_count(&self) -> usize {
        fn count(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 1,
                Node::Inner { children, .. } => 1 + children.iter().map(|(_, c)| count(c)).sum::<usize>(),
            }
        }
        count(&self.root)
    }

    pub fn split_count(&self) -> usize {
        fn count(n: &Node) -> usize {
            match n {
                Node::Leaf(_) => 0,
                Node::Inner { children, .. } => 1 + children.iter().map(|(_, c)| count(c)).sum::<usize>(),
            }
        }
        count(&self.root)
    }

    pub fn leaf_count(&self) -> usize {
        self.node_count() - self.split_count()
    }

    /// Relation ids tested anywhere in the tree.
    pub fn tested_relations(&self) -> Vec<usize> {
        fn walk(n: &Node, out: &mut Vec<usize>) {
            if let Node::Inner { test, children } = n {
                if !out.contains(test) {
                    out.push(*test);
                }
                for (_, c) in children {
                    walk(c, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut out);
        out.sort_unstable();
        out
    }

    /// Every root-to-leaf path as `(relation, outcome)` conditions.
    pub fn paths(&self) -> Vec<(Vec<(usize, Outcome)>, &Leaf)> {
        fn walk<'a>(n: &'a Node, path: &mut Vec<(usize, Outcome)>, out: &mut Vec<(Vec<(usize, Outcome)>, &'a Leaf)>) {
            match n {
                Node::Leaf(leaf) => out.push((path.clone(), leaf)),
                Node::Inner { test, children } => {
                    for (o, c) in children {
                        path.push((*test, *o));
                        walk(c, path, out);
                        path.pop();
                    }
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, &mut Vec::new(), &mut out);
        out
    }

    /// Descend using a partial assignment; `None` if a tested relation is unassigned.
    pub fn predict_partial(&self, assignment: &BTreeMap<usize, Outcome>) -> Option<f64> {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(leaf) => return Some(leaf.q),
                Node::Inner { test, .. } => node = node.child(*assignment.get(test)?)?,
            }
        }
    }
}

/// Pick the candidate with the smallest p-value if it is significant.
///
/// Ties on p go to the smaller F, then to the earlier relation.
fn best_split(leaf: &Leaf, cfg: &SplitConfig) -> Option<SplitChoice> {
    let n = leaf.overall.n;
    if n < cfg.min_sample || leaf.depth >= cfg.max_depth || leaf.overall.j <= 0.0 {
        return None;
    }
    // For a fixed number of non-empty partitions the degrees of freedom are
    // shared, so the p-value is monotone in F: only the lowest F per partition
    // count needs a CDF evaluation.
    let mut per_arity: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    let mut nonempty = Vec::with_capacity(4);
    for cand in &leaf.candidates {
        nonempty.clear();
        nonempty.extend(cand.stats.iter().copied().filter(|s| s.n > 0));
        let arity = nonempty.len() as u64;
        if arity < 2 || n <= arity {
            continue;
        }
        let Ok(f) = pooled_f_ratio(&nonempty, &leaf.overall) else {
            continue;
        };
        match per_arity.get(&arity) {
            Some(&(best_f, _)) if best_f <= f => {}
            _ => {
                per_arity.insert(arity, (f, cand.relation));
            }
        }
    }
    let mut best: Option<SplitChoice> = None;
    for (arity, (f, relation)) in per_arity {
        let Ok(p) = f_test_p_value(f, n - arity, n - 1) else {
            continue;
        };
        let better = match best {
            None => true,
            Some(b) => (p, f, relation) < (b.p, b.f, b.relation),
        };
        if better {
            best = Some(SplitChoice { relation, f, p });
        }
    }
    best.filter(|b| b.p < cfg.significance)
}

fn split_leaf(leaf: &Leaf, relation: usize, tested: &[usize], space: &RelationSpace) -> Node {
    let cand = leaf
        .candidates
        .iter()
        .find(|c| c.relation == relation)
        .expect("split relation is a candidate");
    let children = space
        .get(relation)
        .outcomes()
        .iter()
        .zip(&cand.stats)
        .map(|(&outcome, stats)| {
            // an outcome never observed inherits the parent's estimate
            let q = if stats.n > 0 { stats.mean } else { leaf.q };
            (outcome, Node::Leaf(Leaf::fresh(q, leaf.depth + 1, tested, space)))
        })
        .collect();
    Node::Inner { test: relation, children }
}

// ---------------------------------------------------------------------------
// Checkpoint documents

pub const CHECKPOINT_FORMAT: &str = "rrtl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateDoc {
    pub relation: String,
    pub stats: BTreeMap<Outcome, RunningStats>,
}

/// Serialized tree node with relation names instead of ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase", deny_unknown_fields)]
pub enum NodeDoc {
    Inner {
        test: String,
        children: BTreeMap<Outcome, NodeDoc>,
    },
    Leaf {
        q: f64,
        visits: u64,
        depth: usize,
        overall: RunningStats,
        candidates: Vec<CandidateDoc>,
    },
}

impl QTree {
    pub fn to_doc(&self) -> NodeDoc {
        fn conv(n: &Node, space: &RelationSpace) -> NodeDoc {
            match n {
                Node::Inner { test, children } => NodeDoc::Inner {
                    test: space.get(*test).name(),
                    children: children.iter().map(|(o, c)| (*o, conv(c, space))).collect(),
                },
                Node::Leaf(l) => NodeDoc::Leaf {
                    q: l.q,
                    visits: l.visits,
                    depth: l.depth,
                    overall: l.overall,
                    candidates: l
                        .candidates
                        .iter()
                        .map(|c| CandidateDoc {
                            relation: space.get(c.relation).name(),
                            stats: space
                                .get(c.relation)
                                .outcomes()
                                .iter()
                                .copied()
                                .zip(c.stats.iter().copied())
                                .collect(),
                        })
                        .collect(),
                },
            }
        }
        conv(&self.root, &self.space)
    }

    pub fn from_doc(doc: &NodeDoc, space: Arc<RelationSpace>) -> Result<Self, TreeError> {
        fn id(space: &RelationSpace, name: &str) -> Result<usize, TreeError> {
            space
                .index_of(name)
                .ok_or_else(|| TreeError::Mismatch(format!("unknown relation `{name}`")))
        }
        fn conv(doc: &NodeDoc, space: &RelationSpace, tested: &mut Vec<usize>) -> Result<Node, TreeError> {
            match doc {
                NodeDoc::Inner { test, children } => {
                    let test = id(space, test)?;
                    let domain = space.get(test).outcomes();
                    if children.len() != domain.len() || domain.iter().any(|o| !children.contains_key(o)) {
                        return Err(TreeError::Mismatch(format!(
                            "children of `{}` do not cover its outcomes",
                            space.get(test).name()
                        )));
                    }
                    tested.push(test);
                    let children = domain
                        .iter()
                        .map(|o| Ok((*o, conv(&children[o], space, tested)?)))
                        .collect::<Result<_, TreeError>>();
                    tested.pop();
                    Ok(Node::Inner { test, children: children? })
                }
                NodeDoc::Leaf {
                    q,
                    visits,
                    depth,
                    overall,
                    candidates,
                } => {
                    let candidates: Vec<Candidate> = candidates
                        .iter()
                        .map(|c| {
                            let relation = id(space, &c.relation)?;
                            let stats = space
                                .get(relation)
                                .outcomes()
                                .iter()
                                .map(|o| c.stats.get(o).copied().unwrap_or_default())
                                .collect();
                            Ok(Candidate { relation, stats })
                        })
                        .collect::<Result<_, TreeError>>()?;
                    let expected = (0..space.len()).filter(|r| !tested.contains(r));
                    if !candidates.iter().map(|c| c.relation).eq(expected) || *depth != tested.len() {
                        return Err(TreeError::Mismatch("leaf candidates do not match the relation space".into()));
                    }
                    Ok(Node::Leaf(Leaf {
                        q: *q,
                        visits: *visits,
                        depth: *depth,
                        overall: *overall,
                        candidates,
                    }))
                }
            }
        }
        let root = conv(doc, &space, &mut Vec::new())?;
        Ok(Self { space, root })
    }
}

// ---------------------------------------------------------------------------
// Rule export

/// One branch of a greedy if/elif policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    /// Conjunction of `(relation name, outcome)` facts.
    pub conditions: Vec<(String, Outcome)>,
    pub literals: Vec<String>,
    pub action: String,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RulePolicy {
    /// Ordered by descending q; the first matching rule gives the greedy action.
    pub rules: Vec<Rule>,
    /// Action ranking when no tree has split.
    pub constant_ranking: Option<Vec<(String, f64)>>,
}

/// Above this many joint cells the export lists raw leaves instead of cells.
const MAX_CELLS: u64 = 1 << 14;

/// Translate per-action trees into an if/elif rule chain for the greedy policy.
///
/// All trees must share one relation space. When the relations tested across
/// trees span few enough joint values, the policy is computed per joint cell
/// and relations that never change the greedy action are dropped; otherwise
/// every leaf becomes a rule, which is still exact because rules are ordered by
/// descending q and each tree partitions the state space.
pub fn export_rules(trees: &[(String, &QTree)]) -> RulePolicy {
    assert!(!trees.is_empty(), "no trees to export");
    let space = trees[0].1.space();
    let mut tested: Vec<usize> = trees.iter().flat_map(|(_, t)| t.tested_relations()).collect();
    tested.sort_unstable();
    tested.dedup();

    if tested.is_empty() {
        let mut ranking: Vec<(String, f64)> = trees
            .iter()
            .map(|(a, t)| (a.clone(), t.predict_partial(&BTreeMap::new()).unwrap_or(0.0)))
            .collect();
        // stable sort keeps action order among equal q
        ranking.sort_by(|a, b| b.1.total_cmp(&a.1));
        return RulePolicy {
            rules: Vec::new(),
            constant_ranking: Some(ranking),
        };
    }

    let cells: u64 = tested.iter().map(|&r| space.get(r).outcomes().len() as u64).product();
    let mut rules = if cells <= MAX_CELLS {
        cell_rules(trees, space, &tested)
    } else {
        leaf_rules(trees, space)
    };
    rules.sort_by(|a, b| b.q.total_cmp(&a.q));
    RulePolicy {
        rules,
        constant_ranking: None,
    }
}

fn literal(space: &RelationSpace, relation: usize, outcome: Outcome) -> String {
    space.get(relation).literal(outcome)
}

fn leaf_rules(trees: &[(String, &QTree)], space: &RelationSpace) -> Vec<Rule> {
    trees
        .iter()
        .flat_map(|(action, tree)| {
            tree.paths().into_iter().map(move |(path, leaf)| Rule {
                conditions: path.iter().map(|&(r, o)| (space.get(r).name(), o)).collect(),
                literals: path.iter().map(|&(r, o)| literal(space, r, o)).collect(),
                action: action.clone(),
                q: leaf.q,
            })
        })
        .collect()
}

/// Logical indicators of one base relation are mutually exclusive and exhaustive.
fn consistent(space: &RelationSpace, relations: &[usize], values: &[Outcome]) -> bool {
    let mut groups: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&r, &v) in relations.iter().zip(values) {
        let d = space.get(r);
        if let RelationKind::Indicator(_) = d.kind {
            let entry = groups.entry(d.base).or_default();
            entry.0 += 1;
            if v == Outcome::True {
                entry.1 += 1;
            }
        }
    }
    groups.into_iter().all(|(base, (assigned, trues))| {
        let group_size = space
            .relations
            .iter()
            .filter(|d| d.base == base && matches!(d.kind, RelationKind::Indicator(_)))
            .count();
        trues <= 1 && (assigned < group_size || trues == 1)
    })
}

fn cell_rules(trees: &[(String, &QTree)], space: &RelationSpace, tested: &[usize]) -> Vec<Rule> {
    use crate::relations::Assignments;

    // (cell values, greedy action index, greedy q)
    let mut cells: Vec<(Vec<Outcome>, usize, f64)> = Vec::new();
    let domains = tested.iter().map(|&r| space.get(r).outcomes()).collect();
    for values in Assignments::new(domains) {
        if !consistent(space, tested, &values) {
            continue;
        }
        let assignment: BTreeMap<usize, Outcome> = tested.iter().copied().zip(values.iter().copied()).collect();
        let mut best = (0, f64::NEG_INFINITY);
        for (i, (_, tree)) in trees.iter().enumerate() {
            let q = tree.predict_partial(&assignment).expect("all tested relations assigned");
            if q > best.1 {
                best = (i, q);
            }
        }
        cells.push((values, best.0, best.1));
    }

    // Drop relations that never change the greedy action.
    let mut kept: Vec<usize> = (0..tested.len()).collect();
    loop {
        let droppable = kept.iter().copied().find(|&k| {
            let mut by_rest: BTreeMap<Vec<Outcome>, usize> = BTreeMap::new();
            cells.iter().all(|(vals, action, _)| {
                let rest: Vec<Outcome> = kept.iter().filter(|&&j| j != k).map(|&j| vals[j]).collect();
                *by_rest.entry(rest).or_insert(*action) == *action
            })
        });
        match droppable {
            Some(k) => kept.retain(|&j| j != k),
            None => break,
        }
    }

    let mut merged: Vec<(Vec<Outcome>, usize, f64)> = Vec::new();
    for (vals, action, q) in cells {
        let key: Vec<Outcome> = kept.iter().map(|&j| vals[j]).collect();
        match merged.iter_mut().find(|(k, _, _)| *k == key) {
            Some(entry) => entry.2 = entry.2.max(q),
            None => merged.push((key, action, q)),
        }
    }
    merged
        .into_iter()
        .map(|(key, action, q)| {
            let conds: Vec<(usize, Outcome)> = kept.iter().map(|&j| tested[j]).zip(key).collect();
            Rule {
                conditions: conds.iter().map(|&(r, o)| (space.get(r).name(), o)).collect(),
                literals: conds.iter().map(|&(r, o)| literal(space, r, o)).collect(),
                action: trees[action].0.clone(),
                q,
            }
        })
        .collect()
}

impl RulePolicy {
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(ranking) = &self.constant_ranking {
            let parts: Vec<String> = ranking.iter().map(|(a, q)| format!("{a}={q:.6}")).collect();
            out.push_str(&format!("# no splits; constant action values: {}\n", parts.join(" ")));
        }
        for (i, rule) in self.rules.iter().enumerate() {
            let keyword = if i == 0 { "if" } else { "elif" };
            let cond = if rule.literals.is_empty() {
                "true".to_string()
            } else {
                rule.literals.iter().map(|l| format!("{l} in state")).collect::<Vec<_>>().join(" and ")
            };
            out.push_str(&format!("{keyword} {cond}:  # q={:.6}\n    {}\n", rule.q, rule.action));
        }
        out.push_str("else:\n    sample_action_space()\n");
        out
    }
}
