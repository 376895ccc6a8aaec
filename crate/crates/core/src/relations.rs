//! Relational state construction.
//!
//! A [`Schema`] lists the ground relations used to describe one environment.
//! Each relation compares the centres of two objects along one axis (or tests
//! their bounding boxes for contact). Schemas are plain TOML so that a new
//! environment only needs a new file, see `schemas/*.toml`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RelationError {
    #[error("unknown schema `{0}`")]
    UnknownSchema(String),
    #[error("invalid schema: {0}")]
    Config(String),
    #[error("object `{0}` is not produced by this environment")]
    UnknownObject(String),
    #[error("object `{0}` is absent")]
    AbsentObject(String),
}

/// Value of a relation in a state, and the key of a tree branch.
///
/// Comparative relations take `More`, `Same`, `Less` (plus `Absent` for
/// optional participants); logical relations take `True` or `False`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    More,
    Same,
    Less,
    Absent,
    True,
    False,
}

impl Outcome {
    pub const COMPARATIVE: [Outcome; 3] = [Outcome::More, Outcome::Same, Outcome::Less];
    pub const COMPARATIVE_OPTIONAL: [Outcome; 4] =
        [Outcome::More, Outcome::Same, Outcome::Less, Outcome::Absent];
    pub const LOGICAL: [Outcome; 2] = [Outcome::True, Outcome::False];

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::More => "more",
            Outcome::Same => "same",
            Outcome::Less => "less",
            Outcome::Absent => "absent",
            Outcome::True => "true",
            Outcome::False => "false",
        }
    }

    pub fn from_bool(b: bool) -> Self {
        if b {
            Outcome::True
        } else {
            Outcome::False
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Categorise the signed difference `a - b` with a symmetric tolerance band.
pub fn compare(a: f64, b: f64, tolerance: f64) -> Outcome {
    let diff = a - b;
    if diff > tolerance {
        Outcome::More
    } else if diff < -tolerance {
        Outcome::Less
    } else {
        Outcome::Same
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    X,
    Y,
    Contact,
}

impl Dimension {
    fn as_str(self) -> &'static str {
        match self {
            Dimension::X => "x",
            Dimension::Y => "y",
            Dimension::Contact => "contact",
        }
    }
}

/// Whether a relation links two objects at time `t`, or one object at `t` and `t-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Temporal {
    #[default]
    Object,
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Logical,
    Comparative,
}

impl FromStr for Encoding {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "logical" => Ok(Encoding::Logical),
            "comparative" => Ok(Encoding::Comparative),
            other => Err(format!("unknown encoding `{other}` (expected logical|comparative)")),
        }
    }
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoding::Logical => "logical",
            Encoding::Comparative => "comparative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GameId {
    Breakout,
    Pong,
    DemonAttack,
}

impl GameId {
    pub const ALL: [GameId; 3] = [GameId::Breakout, GameId::Pong, GameId::DemonAttack];

    pub fn as_str(self) -> &'static str {
        match self {
            GameId::Breakout => "breakout",
            GameId::Pong => "pong",
            GameId::DemonAttack => "demon-attack",
        }
    }
}

impl FromStr for GameId {
    type Err = RelationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "breakout" => Ok(GameId::Breakout),
            "pong" => Ok(GameId::Pong),
            "demon-attack" | "demon_attack" | "demonattack" => Ok(GameId::DemonAttack),
            other => Err(RelationError::UnknownSchema(other.to_string())),
        }
    }
}

impl fmt::Display for GameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One base relation as written in a schema file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationSpec {
    pub dimension: Dimension,
    pub subject: String,
    /// Omitted for trajectory relations, whose object is the subject at `t-1`.
    #[serde(default)]
    pub object: Option<String>,
    #[serde(default)]
    pub temporal: Temporal,
    #[serde(default)]
    pub tolerance: f64,
    #[serde(default)]
    pub optional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub name: String,
    /// Object ranking; the subject of an object relation always outranks its object.
    pub hierarchy: Vec<String>,
    #[serde(rename = "relation")]
    pub relations: Vec<RelationSpec>,
    /// Overrides the reported tabular row count.
    #[serde(default)]
    pub state_space_rows: Option<u64>,
}

const BREAKOUT_SCHEMA: &str = include_str!("../schemas/breakout.toml");
const PONG_SCHEMA: &str = include_str!("../schemas/pong.toml");
const DEMON_ATTACK_SCHEMA: &str = include_str!("../schemas/demon_attack.toml");

impl Schema {
    pub fn from_toml(text: &str) -> Result<Self, RelationError> {
        let schema: Schema = toml::from_str(text).map_err(|e| RelationError::Config(e.to_string()))?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn builtin(game: GameId) -> Self {
        let text = match game {
            GameId::Breakout => BREAKOUT_SCHEMA,
            GameId::Pong => PONG_SCHEMA,
            GameId::DemonAttack => DEMON_ATTACK_SCHEMA,
        };
        Self::from_toml(text).expect("built-in schema is valid")
    }

    pub fn by_name(name: &str) -> Result<Self, RelationError> {
        Ok(Self::builtin(name.parse()?))
    }

    fn rank(&self, object: &str) -> Result<usize, RelationError> {
        self.hierarchy
            .iter()
            .position(|o| o == object)
            .ok_or_else(|| RelationError::Config(format!("object `{object}` is not in the hierarchy")))
    }

    fn validate(&self) -> Result<(), RelationError> {
        if self.relations.is_empty() {
            return Err(RelationError::Config("schema has no relations".into()));
        }
        for r in &self.relations {
            if !(r.tolerance >= 0.0) {
                return Err(RelationError::Config(format!("negative tolerance on {r:?}")));
            }
            let subject = self.rank(&r.subject)?;
            match (r.dimension, r.temporal) {
                (Dimension::Contact, Temporal::Trajectory) => {
                    return Err(RelationError::Config("contact relations cannot be trajectories".into()))
                }
                (_, Temporal::Trajectory) => {
                    if r.object.as_deref().is_some_and(|o| o != r.subject) {
                        return Err(RelationError::Config(format!(
                            "trajectory relation on `{}` must not name another object",
                            r.subject
                        )));
                    }
                }
                (_, Temporal::Object) => {
                    let object = r.object.as_deref().ok_or_else(|| {
                        RelationError::Config(format!("relation on `{}` has no object", r.subject))
                    })?;
                    if self.rank(object)? <= subject {
                        return Err(RelationError::Config(format!(
                            "`{}` must outrank `{object}` in the hierarchy",
                            r.subject
                        )));
                    }
                }
            }
            if r.dimension == Dimension::Contact && r.optional {
                return Err(RelationError::Config("contact relations cannot be optional".into()));
            }
        }
        Ok(())
    }

    /// Ground relations for one encoding, in a fixed schema order.
    pub fn relation_space(&self, encoding: Encoding) -> RelationSpace {
        let mut relations = Vec::new();
        for (base, spec) in self.relations.iter().enumerate() {
            let object = match spec.temporal {
                Temporal::Object => spec.object.clone().unwrap_or_default(),
                Temporal::Trajectory => spec.subject.clone(),
            };
            let make = |kind| RelationDescriptor {
                dimension: spec.dimension,
                subject: spec.subject.clone(),
                object: object.clone(),
                temporal: spec.temporal,
                kind,
                tolerance: spec.tolerance,
                optional: spec.optional,
                base,
            };
            match (spec.dimension, encoding) {
                (Dimension::Contact, _) => relations.push(make(RelationKind::Contact)),
                (_, Encoding::Comparative) => relations.push(make(RelationKind::Comparative)),
                (_, Encoding::Logical) => {
                    let values: &[Outcome] = if spec.optional {
                        &Outcome::COMPARATIVE_OPTIONAL
                    } else {
                        &Outcome::COMPARATIVE
                    };
                    relations.extend(values.iter().map(|&v| make(RelationKind::Indicator(v))));
                }
            }
        }
        RelationSpace {
            schema: self.name.clone(),
            encoding,
            relations,
        }
    }

    /// Row count of a table indexed by the comparative encoding of this schema.
    pub fn enumerated_rows(&self) -> u64 {
        self.relation_space(Encoding::Comparative)
            .relations
            .iter()
            .map(|r| r.outcomes().len() as u64)
            .product()
    }

    /// Reported tabular row count: the pinned override when present, else [`Schema::enumerated_rows`].
    pub fn state_space_size(&self) -> u64 {
        self.state_space_rows.unwrap_or_else(|| self.enumerated_rows())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelationKind {
    Comparative,
    /// Boolean indicator that the base relation has the given comparative value.
    Indicator(Outcome),
    Contact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationDescriptor {
    pub dimension: Dimension,
    pub subject: String,
    pub object: String,
    pub temporal: Temporal,
    pub kind: RelationKind,
    pub tolerance: f64,
    pub optional: bool,
    /// Index of the schema relation this descriptor was derived from.
    pub base: usize,
}

impl RelationDescriptor {
    pub fn outcomes(&self) -> &'static [Outcome] {
        match self.kind {
            RelationKind::Comparative if self.optional => &Outcome::COMPARATIVE_OPTIONAL,
            RelationKind::Comparative => &Outcome::COMPARATIVE,
            RelationKind::Indicator(_) | RelationKind::Contact => &Outcome::LOGICAL,
        }
    }

    pub fn is_logical(&self) -> bool {
        !matches!(self.kind, RelationKind::Comparative)
    }

    fn arguments(&self) -> String {
        match self.temporal {
            Temporal::Object => format!("{}_t, {}_t", self.subject, self.object),
            Temporal::Trajectory => format!("{}_t, {}_t-1", self.subject, self.object),
        }
    }

    /// Canonical name, e.g. `x(player_t, ball_t)` or `more-x(ball_t, ball_t-1)`.
    pub fn name(&self) -> String {
        match self.kind {
            RelationKind::Comparative => format!("{}({})", self.dimension.as_str(), self.arguments()),
            RelationKind::Indicator(v) => {
                format!("{}-{}({})", v.as_str(), self.dimension.as_str(), self.arguments())
            }
            RelationKind::Contact => format!("in-contact({})", self.arguments()),
        }
    }

    /// Name of the ground fact `relation = outcome`, as used in rules.
    pub fn literal(&self, outcome: Outcome) -> String {
        match (self.kind, outcome) {
            (RelationKind::Comparative, v) => format!("{}-{}({})", v.as_str(), self.dimension.as_str(), self.arguments()),
            (_, Outcome::True) => self.name(),
            (_, _) => format!("not {}", self.name()),
        }
    }
}

/// The ordered relations a tree may test; indices into it are relation ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSpace {
    pub schema: String,
    pub encoding: Encoding,
    pub relations: Vec<RelationDescriptor>,
}

impl RelationSpace {
    pub fn len(&self) -> usize {
        self.relations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn get(&self, id: usize) -> &RelationDescriptor {
        &self.relations[id]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name() == name)
    }

    /// Every full assignment of values to the relations, in odometer order.
    pub fn assignments(&self) -> Assignments {
        Assignments::new(self.relations.iter().map(|r| r.outcomes()).collect())
    }
}

/// Odometer over the cartesian product of outcome domains.
pub struct Assignments {
    domains: Vec<&'static [Outcome]>,
    digits: Option<Vec<usize>>,
}

impl Assignments {
    pub fn new(domains: Vec<&'static [Outcome]>) -> Self {
        let digits = if domains.iter().any(|d| d.is_empty()) {
            None
        } else {
            Some(vec![0; domains.len()])
        };
        Self { domains, digits }
    }
}

impl Iterator for Assignments {
    type Item = Vec<Outcome>;

    fn next(&mut self) -> Option<Vec<Outcome>> {
        let digits = self.digits.as_mut()?;
        let item = digits.iter().zip(&self.domains).map(|(&i, d)| d[i]).collect();
        let mut pos = digits.len();
        loop {
            if pos == 0 {
                self.digits = None;
                break;
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < self.domains[pos].len() {
                break;
            }
            digits[pos] = 0;
        }
        Some(item)
    }
}

/// Axis-aligned box; intervals are closed on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn touches(&self, other: &BoundingBox) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }
}

/// Object centre and half-extent in pixels, as seen at one time step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectObs {
    pub present: bool,
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

impl ObjectObs {
    pub fn at(cx: f64, cy: f64, half_w: f64, half_h: f64) -> Self {
        Self {
            present: true,
            cx,
            cy,
            half_w,
            half_h,
        }
    }

    pub fn absent() -> Self {
        Self::default()
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            x0: self.cx - self.half_w,
            x1: self.cx + self.half_w,
            y0: self.cy - self.half_h,
            y1: self.cy + self.half_h,
        }
    }

    fn coord(&self, dimension: Dimension) -> f64 {
        match dimension {
            Dimension::X => self.cx,
            Dimension::Y => self.cy,
            Dimension::Contact => unreachable!("contact has no coordinate"),
        }
    }
}

/// Whether the bounding boxes of two present objects overlap or touch.
pub fn contact(a: &ObjectObs, b: &ObjectObs) -> Result<bool, RelationError> {
    if !a.present || !b.present {
        return Err(RelationError::AbsentObject("contact participant".into()));
    }
    Ok(a.bbox().touches(&b.bbox()))
}

/// All objects of one environment at one time step, in the environment's fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub names: &'static [&'static str],
    pub objects: Vec<ObjectObs>,
}

impl Observation {
    pub fn new(names: &'static [&'static str]) -> Self {
        Self {
            names,
            objects: vec![ObjectObs::absent(); names.len()],
        }
    }

    pub fn get(&self, name: &str) -> Option<&ObjectObs> {
        self.names.iter().position(|n| *n == name).map(|i| &self.objects[i])
    }

    pub fn set(&mut self, name: &str, obj: ObjectObs) {
        let i = self
            .names
            .iter()
            .position(|n| *n == name)
            .unwrap_or_else(|| panic!("unknown object `{name}`"));
        self.objects[i] = obj;
    }
}

/// Relation values for one time step, aligned with a [`RelationSpace`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum RelationalState {
    /// Filtered out: a required object was missing.
    Empty,
    Values(Vec<Outcome>),
}

impl RelationalState {
    pub fn is_empty(&self) -> bool {
        matches!(self, RelationalState::Empty)
    }

    pub fn value(&self, relation: usize) -> Option<Outcome> {
        match self {
            RelationalState::Empty => None,
            RelationalState::Values(v) => v.get(relation).copied(),
        }
    }

    pub fn values(&self) -> Option<&[Outcome]> {
        match self {
            RelationalState::Empty => None,
            RelationalState::Values(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone)]
struct BoundRelation {
    dimension: Dimension,
    subject: usize,
    object: usize,
    temporal: Temporal,
    tolerance: f64,
    optional: bool,
}

/// A schema bound to an environment's object layout and an encoding.
#[derive(Debug, Clone)]
pub struct StateBuilder {
    space: Arc<RelationSpace>,
    bases: Vec<BoundRelation>,
    names: &'static [&'static str],
}

impl StateBuilder {
    pub fn new(schema: &Schema, encoding: Encoding, names: &'static [&'static str]) -> Result<Self, RelationError> {
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
        let lookup = |name: &str| index.get(name).copied().ok_or_else(|| RelationError::UnknownObject(name.into()));
        let bases = schema
            .relations
            .iter()
            .map(|r| {
                let subject = lookup(&r.subject)?;
                let object = match r.temporal {
                    Temporal::Trajectory => subject,
                    Temporal::Object => lookup(r.object.as_deref().unwrap_or_default())?,
                };
                Ok(BoundRelation {
                    dimension: r.dimension,
                    subject,
                    object,
                    temporal: r.temporal,
                    tolerance: r.tolerance,
                    optional: r.optional,
                })
            })
            .collect::<Result<Vec<_>, RelationError>>()?;
        Ok(Self {
            space: Arc::new(schema.relation_space(encoding)),
            bases,
            names,
        })
    }

    pub fn space(&self) -> &Arc<RelationSpace> {
        &self.space
    }

    /// Relational state at `obs`, with `prev` as the `t-1` snapshot for trajectories.
    ///
    /// Returns [`RelationalState::Empty`] if a participant of a non-optional
    /// relation is absent at either time step it is read from.
    pub fn build(&self, obs: &Observation, prev: &Observation) -> RelationalState {
        debug_assert_eq!(obs.names, self.names);
        let mut base_values = Vec::with_capacity(self.bases.len());
        for b in &self.bases {
            let subject = &obs.objects[b.subject];
            let object = match b.temporal {
                Temporal::Object => &obs.objects[b.object],
                Temporal::Trajectory => &prev.objects[b.object],
            };
            if !subject.present || !object.present {
                if b.optional {
                    base_values.push(Outcome::Absent);
                    continue;
                }
                return RelationalState::Empty;
            }
            let value = match b.dimension {
                Dimension::Contact => Outcome::from_bool(subject.bbox().touches(&object.bbox())),
                d => compare(subject.coord(d), object.coord(d), b.tolerance),
            };
            base_values.push(value);
        }
        let values = match self.space.encoding {
            Encoding::Comparative => base_values,
            Encoding::Logical => self
                .space
                .relations
                .iter()
                .map(|r| match r.kind {
                    RelationKind::Indicator(v) => Outcome::from_bool(base_values[r.base] == v),
                    _ => base_values[r.base],
                })
                .collect(),
        };
        RelationalState::Values(values)
    }
}
