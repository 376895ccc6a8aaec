use super::{check_action, Action, EnvError, Environment, Step};
use crate::relations::{ObjectObs, Observation};

const OBJECTS: &[&str] = &["agent", "m0", "m1", "m2", "m3"];
const ACTIONS: &[Action] = &[Action::Left, Action::Right];
const LENGTH: u32 = 5;

/// Schema for [`ChainWorld`]: the agent's x against four fixed markers
/// placed between neighbouring cells.
pub const CHAIN_SCHEMA: &str = r#"
name = "chain"
hierarchy = ["agent", "m0", "m1", "m2", "m3"]

[[relation]]
dimension = "x"
subject = "agent"
object = "m0"
tolerance = 0.0

[[relation]]
dimension = "x"
subject = "agent"
object = "m1"
tolerance = 0.0

[[relation]]
dimension = "x"
subject = "agent"
object = "m2"
tolerance = 0.0

[[relation]]
dimension = "x"
subject = "agent"
object = "m3"
tolerance = 0.0
"#;

/// Deterministic five-cell chain. LEFT and RIGHT move one cell; RIGHT from
/// the last cell pays 1 and ends the episode. Episodes start in cell 0.
#[derive(Debug, Clone, Default)]
pub struct ChainWorld {
    cell: u32,
    done: bool,
}

impl ChainWorld {
    pub const LENGTH: u32 = LENGTH;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn cell(&self) -> u32 {
        self.cell
    }

    /// Start an episode in an arbitrary cell.
    pub fn reset_to(&mut self, cell: u32) -> Observation {
        assert!(cell < LENGTH);
        self.cell = cell;
        self.done = false;
        self.observe()
    }

    fn observe(&self) -> Observation {
        let mut obs = Observation::new(OBJECTS);
        obs.set("agent", ObjectObs::at(self.cell as f64, 0.0, 0.1, 0.1));
        for (i, m) in OBJECTS[1..].iter().enumerate() {
            obs.set(m, ObjectObs::at(i as f64 + 0.5, 0.0, 0.1, 0.1));
        }
        obs
    }
}

impl Environment for ChainWorld {
    fn name(&self) -> &'static str {
        "chain"
    }

    fn object_names(&self) -> &'static [&'static str] {
        OBJECTS
    }

    fn actions(&self) -> &'static [Action] {
        ACTIONS
    }

    fn reset(&mut self, _seed: u64) -> Observation {
        self.reset_to(0)
    }

    fn step(&mut self, action: Action) -> Result<Step, EnvError> {
        check_action(ACTIONS, action, "chain")?;
        if self.done {
            return Err(EnvError::Finished);
        }
        let mut reward = 0.0;
        match action {
            Action::Left => self.cell = self.cell.saturating_sub(1),
            _ if self.cell + 1 == LENGTH => {
                reward = 1.0;
                self.done = true;
            }
            _ => self.cell += 1,
        }
        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.done,
        })
    }
}
