//! Object-level game simulators.
//!
//! Each simulator runs on a 160x210 pixel playfield and reports object
//! centres directly, so no pixel preprocessing is involved. One `step` is one
//! physics tick. Rewards are the raw game rewards.

mod breakout;
mod chain;
mod demon_attack;
mod pong;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use breakout::{Breakout, BreakoutParams};
pub use chain::{ChainWorld, CHAIN_SCHEMA};
pub use demon_attack::{DemonAttack, DemonAttackParams};
pub use pong::{Pong, PongParams};

use crate::relations::{GameId, Observation};

pub const WIDTH: f64 = 160.0;
pub const HEIGHT: f64 = 210.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("action {0} is not available in {1}")]
    InvalidAction(Action, &'static str),
    #[error("step called on a finished episode")]
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Noop,
    Fire,
    Right,
    Left,
    RightFire,
    LeftFire,
}

impl Action {
    pub fn name(self) -> &'static str {
        match self {
            Action::Noop => "NOOP",
            Action::Fire => "FIRE",
            Action::Right => "RIGHT",
            Action::Left => "LEFT",
            Action::RightFire => "RIGHTFIRE",
            Action::LeftFire => "LEFTFIRE",
        }
    }

    pub fn fires(self) -> bool {
        matches!(self, Action::Fire | Action::RightFire | Action::LeftFire)
    }

    /// Horizontal (or, in Pong, vertical) intent: +1, 0 or -1.
    pub fn direction(self) -> f64 {
        match self {
            Action::Right | Action::RightFire => 1.0,
            Action::Left | Action::LeftFire => -1.0,
            Action::Noop | Action::Fire => 0.0,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "NOOP" => Action::Noop,
            "FIRE" => Action::Fire,
            "RIGHT" => Action::Right,
            "LEFT" => Action::Left,
            "RIGHTFIRE" => Action::RightFire,
            "LEFTFIRE" => Action::LeftFire,
            other => return Err(format!("unknown action `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn object_names(&self) -> &'static [&'static str];
    fn actions(&self) -> &'static [Action];
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: Action) -> Result<Step, EnvError>;
}

/// Simulator parameters for all games, as stored in run configs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub breakout: BreakoutParams,
    pub pong: PongParams,
    pub demon_attack: DemonAttackParams,
}

/// Build the simulator for `game`.
pub fn make_env(game: GameId, params: &EnvParams) -> Box<dyn Environment> {
    match game {
        GameId::Breakout => Box::new(Breakout::new(params.breakout.clone())),
        GameId::Pong => Box::new(Pong::new(params.pong.clone())),
        GameId::DemonAttack => Box::new(DemonAttack::new(params.demon_attack.clone())),
    }
}

pub(crate) fn check_action(actions: &[Action], action: Action, game: &'static str) -> Result<(), EnvError> {
    if actions.contains(&action) {
        Ok(())
    } else {
        Err(EnvError::InvalidAction(action, game))
    }
}

/// Writes per-tick object positions as CSV rows `tick,object,present,cx,cy`.
pub struct TraceWriter<W: Write> {
    out: csv::Writer<W>,
    tick: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> csv::Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        out.write_record(["tick", "object", "present", "cx", "cy"])?;
        Ok(Self { out, tick: 0 })
    }

    pub fn record(&mut self, obs: &Observation) -> csv::Result<()> {
        for (name, o) in obs.names.iter().zip(&obs.objects) {
            let (cx, cy) = if o.present { (o.cx.to_string(), o.cy.to_string()) } else { (String::new(), String::new()) };
            self.out
                .write_record([self.tick.to_string(), name.to_string(), (o.present as u8).to_string(), cx, cy])?;
        }
        self.tick += 1;
        Ok(())
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rollout(env: &mut dyn Environment, seed: u64, steps: usize) -> Vec<(Observation, f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = vec![(env.reset(seed), 0.0, false)];
        for _ in 0..steps {
            let a = env.actions()[rng.gen_range(0..env.actions().len())];
            let s = env.step(a).unwrap();
            let done = s.done;
            out.push((s.obs, s.reward, done));
            if done {
                out.push((env.reset(rng.gen()), 0.0, false));
            }
        }
        out
    }

    #[test]
    fn simulators_are_deterministic_and_in_bounds() {
        for game in GameId::ALL {
            let params = EnvParams::default();
            let a = random_rollout(make_env(game, &params).as_mut(), 11, 3000);
            let b = random_rollout(make_env(game, &params).as_mut(), 11, 3000);
            assert_eq!(a, b, "{game}");
            for (obs, _, _) in &a {
                for o in obs.objects.iter().filter(|o| o.present) {
                    assert!((0.0..WIDTH).contains(&o.cx) && (0.0..HEIGHT).contains(&o.cy), "{game}: {o:?}");
                }
            }
        }
    }

    #[test]
    fn invalid_actions_are_rejected() {
        let mut env = make_env(GameId::Breakout, &EnvParams::default());
        env.reset(0);
        assert!(matches!(env.step(Action::RightFire), Err(EnvError::InvalidAction(..))));
        let mut env = make_env(GameId::Pong, &EnvParams::default());
        env.reset(0);
        assert!(env.step(Action::LeftFire).is_err());
    }

    #[test]
    fn trace_writer_emits_rows() {
        let mut env = make_env(GameId::Breakout, &EnvParams::default());
        let obs = env.reset(1);
        let mut buf = Vec::new();
        {
            let mut w = TraceWriter::new(&mut buf).unwrap();
            w.record(&obs).unwrap();
            w.flush().unwrap();
        }
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "tick,object,present,cx,cy");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("0,ball,0,"));
    }
}
