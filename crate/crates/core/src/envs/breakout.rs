use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, Action, EnvError, Environment, Step, WIDTH};
use crate::relations::{ObjectObs, Observation};

const OBJECTS: &[&str] = &["player", "ball"];
const ACTIONS: &[Action] = &[Action::Noop, Action::Fire, Action::Right, Action::Left];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreakoutParams {
    pub paddle_y: f64,
    pub paddle_half_width: f64,
    pub paddle_speed: f64,
    /// Balls reflect off the brick wall when their centre reaches this line.
    pub wall_y: f64,
    pub serve_y: f64,
    pub ball_vy: f64,
    /// Largest horizontal ball speed; paddle hits map offset to `-max..=max`.
    pub ball_max_vx: i32,
    pub lives: u32,
    pub max_steps: u64,
}

impl Default for BreakoutParams {
    fn default() -> Self {
        Self {
            paddle_y: 190.0,
            paddle_half_width: 8.0,
            paddle_speed: 6.0,
            wall_y: 160.0,
            serve_y: 160.0,
            ball_vy: 6.0,
            ball_max_vx: 2,
            lives: 5,
            max_steps: 10_000,
        }
    }
}

const BALL_HALF_W: f64 = 1.0;
const BALL_HALF_H: f64 = 2.0;
const PADDLE_HALF_H: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ball {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

/// Paddle at the bottom, an indestructible brick wall at the top.
///
/// The ball is served downward from the middle of the screen after FIRE.
/// Bouncing off the wall scores +1; letting the ball pass the paddle costs
/// -1 and a life.
#[derive(Debug, Clone)]
pub struct Breakout {
    params: BreakoutParams,
    rng: ChaCha8Rng,
    paddle_x: f64,
    ball: Option<Ball>,
    lives: u32,
    steps: u64,
    done: bool,
}

impl Breakout {
    pub fn new(params: BreakoutParams) -> Self {
        let lives = params.lives;
        Self {
            params,
            rng: ChaCha8Rng::seed_from_u64(0),
            paddle_x: WIDTH / 2.0,
            ball: None,
            lives,
            steps: 0,
            done: false,
        }
    }

    fn observe(&self) -> Observation {
        let mut obs = Observation::new(OBJECTS);
        obs.set(
            "player",
            ObjectObs::at(self.paddle_x, self.params.paddle_y, self.params.paddle_half_width, PADDLE_HALF_H),
        );
        if let Some(b) = self.ball {
            obs.set("ball", ObjectObs::at(b.x, b.y, BALL_HALF_W, BALL_HALF_H));
        }
        obs
    }

    fn serve(&mut self) -> Ball {
        let max = self.params.ball_max_vx;
        let mut vx = 0;
        while vx == 0 {
            vx = self.rng.gen_range(-max..=max);
        }
        Ball {
            x: self.rng.gen_range(40..=120) as f64,
            y: self.params.serve_y,
            vx: vx as f64,
            vy: self.params.ball_vy,
        }
    }

    pub fn lives(&self) -> u32 {
        self.lives
    }
}

impl Environment for Breakout {
    fn name(&self) -> &'static str {
        "breakout"
    }

    fn object_names(&self) -> &'static [&'static str] {
        OBJECTS
    }

    fn actions(&self) -> &'static [Action] {
        ACTIONS
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.paddle_x = self.rng.gen_range(20..=140) as f64;
        self.ball = None;
        self.lives = self.params.lives;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: Action) -> Result<Step, EnvError> {
        check_action(ACTIONS, action, "breakout")?;
        if self.done {
            return Err(EnvError::Finished);
        }
        let p = &self.params;
        let hw = p.paddle_half_width;
        self.paddle_x = (self.paddle_x + action.direction() * p.paddle_speed).clamp(hw, WIDTH - hw);

        let mut reward = 0.0;
        match self.ball {
            None => {
                if action == Action::Fire {
                    self.ball = Some(self.serve());
                }
            }
            Some(mut b) => {
                let p = &self.params;
                b.x += b.vx;
                b.y += b.vy;
                if b.x < BALL_HALF_W {
                    b.x = 2.0 * BALL_HALF_W - b.x;
                    b.vx = -b.vx;
                } else if b.x > WIDTH - BALL_HALF_W {
                    b.x = 2.0 * (WIDTH - BALL_HALF_W) - b.x;
                    b.vx = -b.vx;
                }
                if b.vy < 0.0 && b.y <= p.wall_y {
                    b.y = 2.0 * p.wall_y - b.y;
                    b.vy = -b.vy;
                    reward = 1.0;
                }
                let paddle_top = p.paddle_y - PADDLE_HALF_H;
                let mut lost = false;
                if b.vy > 0.0 && b.y + BALL_HALF_H >= paddle_top && b.y - b.vy + BALL_HALF_H < paddle_top {
                    let offset = b.x - self.paddle_x;
                    if offset.abs() <= hw + BALL_HALF_W {
                        // steeper angle the further from the paddle centre
                        let max = p.ball_max_vx as f64;
                        let mut vx = (offset / (hw + BALL_HALF_W) * max).round().clamp(-max, max);
                        if vx == 0.0 {
                            vx = b.vx.signum();
                        }
                        b.vx = vx;
                        b.vy = -b.vy;
                        b.y = paddle_top - BALL_HALF_H;
                    }
                }
                if b.vy > 0.0 && b.y - BALL_HALF_H > p.paddle_y + PADDLE_HALF_H {
                    lost = true;
                }
                if lost {
                    reward = -1.0;
                    self.lives -= 1;
                    self.ball = None;
                } else {
                    self.ball = Some(b);
                }
            }
        }

        self.steps += 1;
        self.done = self.lives == 0 || self.steps >= self.params.max_steps;
        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_is_deterministic_and_ball_waits_for_fire() {
        let mut env = Breakout::new(BreakoutParams::default());
        let a = env.reset(7);
        let b = env.reset(7);
        assert_eq!(a, b);
        let s = env.step(Action::Noop).unwrap();
        assert!(!s.obs.get("ball").unwrap().present);
        let s = env.step(Action::Fire).unwrap();
        assert!(s.obs.get("ball").unwrap().present);
    }

    #[test]
    fn missed_ball_costs_a_life() {
        let mut env = Breakout::new(BreakoutParams::default());
        env.reset(3);
        env.step(Action::Fire).unwrap();
        // park the paddle far from the ball
        let ball_x = env.ball.unwrap().x;
        let dir = if ball_x < 80.0 { Action::Right } else { Action::Left };
        let mut total = 0.0;
        for _ in 0..60 {
            let s = env.step(dir).unwrap();
            total += s.reward;
            if s.reward != 0.0 {
                break;
            }
        }
        assert_eq!(total, -1.0);
        assert_eq!(env.lives(), 4);
        assert!(env.ball.is_none());
    }

    #[test]
    fn following_the_ball_scores() {
        let mut env = Breakout::new(BreakoutParams::default());
        env.reset(5);
        env.step(Action::Fire).unwrap();
        let mut score = 0.0;
        for _ in 0..2000 {
            let action = match env.ball {
                None => Action::Fire,
                Some(b) if b.x > env.paddle_x + 2.0 => Action::Right,
                Some(b) if b.x < env.paddle_x - 2.0 => Action::Left,
                Some(_) => Action::Noop,
            };
            let s = env.step(action).unwrap();
            score += s.reward;
            assert!(s.reward >= 0.0, "follower never misses");
        }
        assert!(score >= 15.0, "score {score}");
    }

    #[test]
    fn ball_speed_is_constant_between_collisions() {
        let mut env = Breakout::new(BreakoutParams::default());
        env.reset(9);
        env.step(Action::Fire).unwrap();
        let mut prev = env.ball.unwrap();
        for _ in 0..30 {
            env.step(Action::Noop).unwrap();
            let Some(b) = env.ball else { break };
            if b.vx == prev.vx && b.vy == prev.vy {
                assert_eq!(b.x - prev.x, b.vx);
                assert_eq!(b.y - prev.y, b.vy);
            }
            prev = b;
        }
    }
}
