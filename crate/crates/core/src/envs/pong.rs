use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, Action, EnvError, Environment, Step, WIDTH};
use crate::relations::{ObjectObs, Observation};

const OBJECTS: &[&str] = &["player", "ball", "enemy"];
const ACTIONS: &[Action] = &[Action::Noop, Action::Fire, Action::Right, Action::Left];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PongParams {
    pub top_wall: f64,
    pub bottom_wall: f64,
    pub player_x: f64,
    pub enemy_x: f64,
    pub paddle_half_height: f64,
    pub paddle_speed: f64,
    /// Cap on how fast the enemy paddle chases the ball.
    pub enemy_speed: f64,
    pub ball_vx: f64,
    pub ball_max_vy: i32,
    /// Ticks the ball rests at the centre after a point.
    pub serve_delay: u32,
    pub points_to_win: u32,
    pub max_steps: u64,
}

impl Default for PongParams {
    fn default() -> Self {
        Self {
            top_wall: 34.0,
            bottom_wall: 194.0,
            player_x: 150.0,
            enemy_x: 60.0,
            paddle_half_height: 8.0,
            paddle_speed: 6.0,
            enemy_speed: 3.75,
            ball_vx: 6.0,
            ball_max_vy: 3,
            serve_delay: 20,
            points_to_win: 21,
            max_steps: 10_000,
        }
    }
}

const PADDLE_HALF_W: f64 = 2.0;
const BALL_HALF_W: f64 = 1.0;
const BALL_HALF_H: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Serve {
    /// Game start: the ball rests until the player presses FIRE.
    AwaitFire,
    Countdown(u32),
    InPlay,
}

/// Player paddle on the right, enemy paddle on the left; both move on y only.
///
/// RIGHT moves the player up and LEFT moves it down. The enemy follows the
/// ball at a capped speed. A point is +1 when the ball passes the enemy and
/// -1 when it passes the player; the game ends when either side has 21.
#[derive(Debug, Clone)]
pub struct Pong {
    params: PongParams,
    rng: ChaCha8Rng,
    player_y: f64,
    enemy_y: f64,
    ball: (f64, f64),
    vel: (f64, f64),
    serve: Serve,
    score: (u32, u32),
    steps: u64,
    done: bool,
}

impl Pong {
    pub fn new(params: PongParams) -> Self {
        let mid = (params.top_wall + params.bottom_wall) / 2.0;
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
            player_y: mid,
            enemy_y: mid,
            ball: (WIDTH / 2.0, mid),
            vel: (0.0, 0.0),
            serve: Serve::AwaitFire,
            score: (0, 0),
            steps: 0,
            done: false,
            params,
        }
    }

    fn mid(&self) -> f64 {
        (self.params.top_wall + self.params.bottom_wall) / 2.0
    }

    /// (player points, enemy points)
    pub fn score(&self) -> (u32, u32) {
        self.score
    }

    fn observe(&self) -> Observation {
        let hh = self.params.paddle_half_height;
        let mut obs = Observation::new(OBJECTS);
        obs.set("player", ObjectObs::at(self.params.player_x, self.player_y, PADDLE_HALF_W, hh));
        obs.set("enemy", ObjectObs::at(self.params.enemy_x, self.enemy_y, PADDLE_HALF_W, hh));
        obs.set("ball", ObjectObs::at(self.ball.0, self.ball.1, BALL_HALF_W, BALL_HALF_H));
        obs
    }

    fn launch(&mut self) {
        let dir = if self.rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let max = self.params.ball_max_vy;
        let mut vy = 0;
        while vy == 0 {
            vy = self.rng.gen_range(-max..=max);
        }
        self.vel = (dir * self.params.ball_vx, vy as f64);
        self.serve = Serve::InPlay;
    }

    fn deflect(&self, paddle_y: f64) -> f64 {
        let reach = self.params.paddle_half_height + BALL_HALF_H;
        let max = self.params.ball_max_vy as f64;
        ((self.ball.1 - paddle_y) / reach * max).round().clamp(-max, max)
    }
}

impl Environment for Pong {
    fn name(&self) -> &'static str {
        "pong"
    }

    fn object_names(&self) -> &'static [&'static str] {
        OBJECTS
    }

    fn actions(&self) -> &'static [Action] {
        ACTIONS
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let mid = self.mid();
        self.player_y = mid + self.rng.gen_range(-40..=40) as f64;
        self.enemy_y = mid;
        self.ball = (WIDTH / 2.0, mid);
        self.vel = (0.0, 0.0);
        self.serve = Serve::AwaitFire;
        self.score = (0, 0);
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: Action) -> Result<Step, EnvError> {
        check_action(ACTIONS, action, "pong")?;
        if self.done {
            return Err(EnvError::Finished);
        }
        let p = self.params.clone();
        let lo = p.top_wall + p.paddle_half_height;
        let hi = p.bottom_wall - p.paddle_half_height;
        // screen y grows downward; RIGHT is up
        self.player_y = (self.player_y - action.direction() * p.paddle_speed).clamp(lo, hi);
        let chase = (self.ball.1 - self.enemy_y).clamp(-p.enemy_speed, p.enemy_speed);
        self.enemy_y = (self.enemy_y + chase).clamp(lo, hi);

        let mut reward = 0.0;
        match self.serve {
            Serve::AwaitFire => {
                if action == Action::Fire {
                    self.launch();
                }
            }
            Serve::Countdown(0) => self.launch(),
            Serve::Countdown(n) => self.serve = Serve::Countdown(n - 1),
            Serve::InPlay => {
                let (x0, _) = self.ball;
                self.ball.0 += self.vel.0;
                self.ball.1 += self.vel.1;
                let (top, bottom) = (p.top_wall + BALL_HALF_H, p.bottom_wall - BALL_HALF_H);
                if self.ball.1 < top {
                    self.ball.1 = 2.0 * top - self.ball.1;
                    self.vel.1 = -self.vel.1;
                } else if self.ball.1 > bottom {
                    self.ball.1 = 2.0 * bottom - self.ball.1;
                    self.vel.1 = -self.vel.1;
                }
                let reach = p.paddle_half_height + BALL_HALF_H;
                let player_face = p.player_x - PADDLE_HALF_W - BALL_HALF_W;
                let enemy_face = p.enemy_x + PADDLE_HALF_W + BALL_HALF_W;
                if self.vel.0 > 0.0 && x0 < player_face && self.ball.0 >= player_face {
                    if (self.ball.1 - self.player_y).abs() <= reach {
                        self.vel = (-self.vel.0, self.deflect(self.player_y));
                        self.ball.0 = player_face;
                    }
                } else if self.vel.0 < 0.0 && x0 > enemy_face && self.ball.0 <= enemy_face {
                    if (self.ball.1 - self.enemy_y).abs() <= reach {
                        self.vel = (-self.vel.0, self.deflect(self.enemy_y));
                        self.ball.0 = enemy_face;
                    }
                }
                let scored = if self.ball.0 < BALL_HALF_W {
                    Some(1.0)
                } else if self.ball.0 > WIDTH - BALL_HALF_W {
                    Some(-1.0)
                } else {
                    None
                };
                if let Some(r) = scored {
                    reward = r;
                    if r > 0.0 {
                        self.score.0 += 1;
                    } else {
                        self.score.1 += 1;
                    }
                    self.ball = (WIDTH / 2.0, self.mid());
                    self.vel = (0.0, 0.0);
                    self.serve = Serve::Countdown(p.serve_delay);
                }
            }
        }

        self.steps += 1;
        self.done = self.score.0 >= p.points_to_win || self.score.1 >= p.points_to_win || self.steps >= p.max_steps;
        Ok(Step {
            obs: self.observe(),
            reward,
            done: self.done,
        })
    }
}
