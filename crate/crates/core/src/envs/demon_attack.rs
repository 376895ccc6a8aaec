use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_action, Action, EnvError, Environment, Step, HEIGHT, WIDTH};
use crate::relations::{BoundingBox, ObjectObs, Observation};

const OBJECTS: &[&str] = &[
    "player",
    "e_missile",
    "big_enemy_0",
    "big_enemy_1",
    "big_enemy_2",
    "small_enemy_0",
    "small_enemy_1",
    "small_enemy_2",
    "small_enemy_3",
    "small_enemy_4",
    "small_enemy_5",
];
const BIG_SLOTS: [&str; 3] = ["big_enemy_0", "big_enemy_1", "big_enemy_2"];
const SMALL_SLOTS: [&str; 6] = [
    "small_enemy_0",
    "small_enemy_1",
    "small_enemy_2",
    "small_enemy_3",
    "small_enemy_4",
    "small_enemy_5",
];
const ACTIONS: &[Action] = &[
    Action::Noop,
    Action::Fire,
    Action::Right,
    Action::Left,
    Action::RightFire,
    Action::LeftFire,
];

const MAX_BIG: usize = 3;
const MAX_SMALL: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemonAttackParams {
    pub player_y: f64,
    pub player_speed: f64,
    pub missile_speed: f64,
    pub projectile_speed: f64,
    /// Ticks between shots of the bottom-most big enemy in the first wave.
    pub fire_interval: u32,
    /// Reduction of the fire interval per wave, down to `min_fire_interval`.
    pub fire_interval_step: u32,
    pub min_fire_interval: u32,
    pub big_rows: [f64; 3],
    pub orbit_radius: f64,
    pub orbit_speed: f64,
    pub drift_speed: f64,
    pub respawn_delay: u32,
    /// Kills that complete a wave.
    pub wave_size: u32,
    /// First wave (0-based) in which big enemies split when shot.
    pub split_wave: u32,
    /// Ticks a small enemy hovers before diving at the player.
    pub dive_delay: u32,
    pub dive_speed: f64,
    pub big_reward: f64,
    pub small_reward: f64,
    pub hit_penalty: f64,
    pub lives: u32,
    pub max_steps: u64,
}

impl Default for DemonAttackParams {
    fn default() -> Self {
        Self {
            player_y: 185.0,
            player_speed: 3.0,
            missile_speed: 10.0,
            projectile_speed: 3.0,
            fire_interval: 40,
            fire_interval_step: 4,
            min_fire_interval: 16,
            big_rows: [50.0, 80.0, 110.0],
            orbit_radius: 5.0,
            orbit_speed: 0.15,
            drift_speed: 1.0,
            respawn_delay: 30,
            wave_size: 8,
            split_wave: 2,
            dive_delay: 150,
            dive_speed: 2.0,
            big_reward: 10.0,
            small_reward: 20.0,
            hit_penalty: 10.0,
            lives: 3,
            max_steps: 10_000,
        }
    }
}

const PLAYER_HALF: (f64, f64) = (4.0, 4.0);
const BIG_HALF: (f64, f64) = (8.0, 4.0);
const SMALL_HALF: (f64, f64) = (4.0, 3.0);
const PROJECTILE_HALF: (f64, f64) = (1.0, 3.0);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Big,
    Small,
}

#[derive(Debug, Clone, PartialEq)]
struct Enemy {
    kind: Kind,
    home_x: f64,
    home_y: f64,
    target_x: f64,
    phase: f64,
    age: u32,
    /// Set once a small enemy starts its descent.
    dive: Option<(f64, f64)>,
}

impl Enemy {
    fn pos(&self, radius: f64) -> (f64, f64) {
        if let Some(p) = self.dive {
            return p;
        }
        let r = match self.kind {
            Kind::Big => radius,
            Kind::Small => radius / 2.0,
        };
        (self.home_x + r * self.phase.cos(), self.home_y + r * self.phase.sin())
    }

    fn half(&self) -> (f64, f64) {
        match self.kind {
            Kind::Big => BIG_HALF,
            Kind::Small => SMALL_HALF,
        }
    }
}

fn bbox(pos: (f64, f64), half: (f64, f64)) -> BoundingBox {
    ObjectObs::at(pos.0, pos.1, half.0, half.1).bbox()
}

/// Ship at the bottom shooting at orbiting demons.
///
/// The bottom-most big enemy drops projectiles. From `split_wave` on, a big
/// enemy hit for the first time splits into two small enemies that later dive
/// at the ship. Being hit by a projectile or a diving enemy costs a life and
/// `hit_penalty`. Enemy projectiles are reported as one object, `e_missile`,
/// the projectile closest to the ship.
#[derive(Debug, Clone)]
pub struct DemonAttack {
    params: DemonAttackParams,
    rng: ChaCha8Rng,
    player_x: f64,
    missile: Option<(f64, f64)>,
    projectiles: Vec<(f64, f64)>,
    enemies: Vec<Enemy>,
    respawns: Vec<u32>,
    fire_timer: u32,
    wave: u32,
    wave_kills: u32,
    lives: u32,
    steps: u64,
    done: bool,
}

impl DemonAttack {
    pub fn new(params: DemonAttackParams) -> Self {
        let lives = params.lives;
        Self {
            params,
            rng: ChaCha8Rng::seed_from_u64(0),
            player_x: WIDTH / 2.0,
            missile: None,
            projectiles: Vec::new(),
            enemies: Vec::new(),
            respawns: Vec::new(),
            fire_timer: 0,
            wave: 0,
            wave_kills: 0,
            lives,
            steps: 0,
            done: false,
        }
    }

    pub fn wave(&self) -> u32 {
        self.wave
    }

    fn counts(&self) -> (usize, usize) {
        let big = self.enemies.iter().filter(|e| e.kind == Kind::Big).count();
        (big, self.enemies.len() - big)
    }

    /// Each pair of small enemies takes the place of one big enemy.
    fn big_capacity(&self) -> usize {
        let (big, small) = self.counts();
        MAX_BIG.saturating_sub(big + small.div_ceil(2))
    }

    fn spawn_big(&mut self) {
        let taken: Vec<f64> = self
            .enemies
            .iter()
            .filter(|e| e.kind == Kind::Big)
            .map(|e| e.home_y)
            .collect();
        let row = self
            .params
            .big_rows
            .iter()
            .copied()
            .find(|y| !taken.contains(y))
            .unwrap_or(self.params.big_rows[0]);
        let x = self.rng.gen_range(20..=140) as f64;
        self.enemies.push(Enemy {
            kind: Kind::Big,
            home_x: x,
            home_y: row,
            target_x: x,
            phase: self.rng.gen_range(0.0..std::f64::consts::TAU),
            age: 0,
            dive: None,
        });
    }

    fn fire_interval(&self) -> u32 {
        let p = &self.params;
        p.fire_interval
            .saturating_sub(self.wave * p.fire_interval_step)
            .max(p.min_fire_interval)
    }

    fn observe(&self) -> Observation {
        let radius = self.params.orbit_radius;
        let mut obs = Observation::new(OBJECTS);
        obs.set("player", ObjectObs::at(self.player_x, self.params.player_y, PLAYER_HALF.0, PLAYER_HALF.1));
        let player = (self.player_x, self.params.player_y);
        let nearest = self.projectiles.iter().min_by(|a, b| {
            let da = (a.0 - player.0).powi(2) + (a.1 - player.1).powi(2);
            let db = (b.0 - player.0).powi(2) + (b.1 - player.1).powi(2);
            da.partial_cmp(&db).unwrap_or(Ordering::Equal)
        });
        if let Some(&(x, y)) = nearest {
            obs.set("e_missile", ObjectObs::at(x, y, PROJECTILE_HALF.0, PROJECTILE_HALF.1));
        }
        for (kind, slots) in [(Kind::Big, &BIG_SLOTS[..]), (Kind::Small, &SMALL_SLOTS[..])] {
            let mut positions: Vec<(f64, f64)> = self
                .enemies
                .iter()
                .filter(|e| e.kind == kind)
                .map(|e| e.pos(radius))
                .collect();
            // slots are filled left to right, then top to bottom
            positions.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            let half = if kind == Kind::Big { BIG_HALF } else { SMALL_HALF };
            for (slot, (x, y)) in slots.iter().zip(positions) {
                obs.set(slot, ObjectObs::at(x, y, half.0, half.1));
            }
        }
        obs
    }

    fn lose_life(&mut self) -> f64 {
        self.lives = self.lives.saturating_sub(1);
        self.projectiles.clear();
        self.enemies.retain(|e| e.dive.is_none());
        -self.params.hit_penalty
    }
}

impl Environment for DemonAttack {
    fn name(&self) -> &'static str {
        "demon-attack"
    }

    fn object_names(&self) -> &'static [&'static str] {
        OBJECTS
    }

    fn actions(&self) -> &'static [Action] {
        ACTIONS
    }

    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.player_x = self.rng.gen_range(20..=140) as f64;
        self.missile = None;
        self.projectiles.clear();
        self.enemies.clear();
        self.respawns.clear();
        for _ in 0..MAX_BIG {
            self.spawn_big();
        }
        self.fire_timer = self.fire_interval();
        self.wave = 0;
        self.wave_kills = 0;
        self.lives = self.params.lives;
        self.steps = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: Action) -> Result<Step, EnvError> {
        check_action(ACTIONS, action, "demon-attack")?;
        if self.done {
            return Err(EnvError::Finished);
        }
        let p = self.params.clone();
        let mut reward = 0.0;

        self.player_x = (self.player_x + action.direction() * p.player_speed).clamp(PLAYER_HALF.0, WIDTH - PLAYER_HALF.0);
        if action.fires() && self.missile.is_none() {
            self.missile = Some((self.player_x, p.player_y - PLAYER_HALF.1 - p.missile_speed / 2.0));
        }

        // enemies orbit their home point while the home drifts sideways
        for i in 0..self.enemies.len() {
            let player_x = self.player_x;
            let retarget = self.rng.gen_range(0..60) == 0;
            let new_target = self.rng.gen_range(20..=140) as f64;
            let e = &mut self.enemies[i];
            e.age += 1;
            e.phase = (e.phase + p.orbit_speed) % std::f64::consts::TAU;
            if retarget {
                e.target_x = new_target;
            }
            let drift = (e.target_x - e.home_x).clamp(-p.drift_speed, p.drift_speed);
            e.home_x += drift;
            if e.kind == Kind::Small {
                if e.dive.is_none() && e.age >= p.dive_delay {
                    e.dive = Some(e.pos(p.orbit_radius));
                }
                if let Some((x, y)) = e.dive.as_mut() {
                    *x += (player_x - *x).clamp(-p.dive_speed / 2.0, p.dive_speed / 2.0);
                    *y += p.dive_speed;
                }
            }
        }
        self.enemies.retain(|e| e.dive.is_none_or(|(_, y)| y < HEIGHT - 5.0));

        // player missile, swept over its travel this tick
        if let Some((x, y)) = self.missile {
            let y = y - p.missile_speed;
            let sweep = bbox((x, y + p.missile_speed / 2.0), (0.5, p.missile_speed / 2.0 + 1.0));
            let hit = self
                .enemies
                .iter()
                .position(|e| bbox(e.pos(p.orbit_radius), e.half()).touches(&sweep));
            match hit {
                Some(i) => {
                    self.missile = None;
                    let enemy = self.enemies.swap_remove(i);
                    let (ex, ey) = enemy.pos(p.orbit_radius);
                    match enemy.kind {
                        Kind::Big => {
                            reward += p.big_reward;
                            let (_, small) = self.counts();
                            if self.wave >= p.split_wave && small + 2 <= MAX_SMALL {
                                for dx in [-6.0, 6.0] {
                                    self.enemies.push(Enemy {
                                        kind: Kind::Small,
                                        home_x: (ex + dx).clamp(10.0, WIDTH - 10.0),
                                        home_y: ey,
                                        target_x: ex + dx,
                                        phase: 0.0,
                                        age: 0,
                                        dive: None,
                                    });
                                }
                            } else {
                                self.respawns.push(p.respawn_delay);
                            }
                        }
                        Kind::Small => {
                            reward += p.small_reward;
                            let (_, small) = self.counts();
                            if small % 2 == 0 {
                                self.respawns.push(p.respawn_delay);
                            }
                        }
                    }
                    self.wave_kills += 1;
                    if self.wave_kills >= p.wave_size {
                        self.wave += 1;
                        self.wave_kills = 0;
                    }
                }
                None if y < 5.0 => self.missile = None,
                None => self.missile = Some((x, y)),
            }
        }

        for t in self.respawns.iter_mut() {
            *t = t.saturating_sub(1);
        }
        while let Some(i) = self.respawns.iter().position(|&t| t == 0) {
            if self.big_capacity() == 0 {
                break;
            }
            self.respawns.swap_remove(i);
            self.spawn_big();
        }
        // respawns that no longer fit are dropped
        let free = self.big_capacity();
        if self.respawns.len() > free {
            self.respawns.sort_unstable();
            self.respawns.truncate(free);
        }

        // the bottom-most big enemy shoots
        self.fire_timer = self.fire_timer.saturating_sub(1);
        if self.fire_timer == 0 {
            let shooter = self
                .enemies
                .iter()
                .filter(|e| e.kind == Kind::Big)
                .map(|e| e.pos(p.orbit_radius))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal));
            if let Some((x, y)) = shooter {
                self.projectiles.push((x, y + BIG_HALF.1 + PROJECTILE_HALF.1));
            }
            self.fire_timer = self.fire_interval();
        }
        for pr in self.projectiles.iter_mut() {
            pr.1 += p.projectile_speed;
        }
        self.projectiles.retain(|pr| pr.1 < HEIGHT - 5.0);

        let player = bbox((self.player_x, p.player_y), PLAYER_HALF);
        let shot = self.projectiles.iter().any(|&pr| bbox(pr, PROJECTILE_HALF).touches(&player));
        let rammed = self
            .enemies
            .iter()
            .any(|e| e.dive.is_some() && bbox(e.pos(p.orbit_radius), e.half()).touches(&player));
        if shot || rammed {
            reward += self.lose_life();
        }

        if self.enemies.is_empty() && self.respawns.is_empty() {
            self.respawns.push(p.respawn_delay);
        }

        self.steps += 1;
        self.done = self.lives == 0 || self.steps >= p.max_steps;
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
    fn starts_with_three_big_enemies_and_no_e_missile() {
        let mut env = DemonAttack::new(DemonAttackParams::default());
        let obs = env.reset(1);
        for slot in BIG_SLOTS {
            assert!(obs.get(slot).unwrap().present);
        }
        for slot in SMALL_SLOTS {
            assert!(!obs.get(slot).unwrap().present);
        }
        assert!(!obs.get("e_missile").unwrap().present);
    }

    #[test]
    fn big_enemy_slots_are_sorted_left_to_right() {
        let mut env = DemonAttack::new(DemonAttackParams::default());
        env.reset(5);
        for _ in 0..200 {
            let s = env.step(Action::Noop).unwrap();
            let xs: Vec<f64> = BIG_SLOTS
                .iter()
                .filter_map(|n| s.obs.get(n).filter(|o| o.present).map(|o| o.cx))
                .collect();
            assert!(xs.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn shooting_an_enemy_pays_and_it_is_replaced() {
        let mut env = DemonAttack::new(DemonAttackParams::default());
        env.reset(2);
        let target = env.enemies[0].pos(env.params.orbit_radius).0;
        env.player_x = target;
        let mut reward = 0.0;
        for _ in 0..40 {
            let s = env.step(Action::Fire).unwrap();
            if s.reward > 0.0 {
                reward = s.reward;
                break;
            }
        }
        assert_eq!(reward, env.params.big_reward);
        for _ in 0..=env.params.respawn_delay {
            env.step(Action::Noop).unwrap();
        }
        assert_eq!(env.counts().0, 3);
    }

    #[test]
    fn projectiles_hurt() {
        let mut env = DemonAttack::new(DemonAttackParams::default());
        env.reset(3);
        env.projectiles.push((env.player_x, env.params.player_y - 8.0));
        let s = env.step(Action::Noop).unwrap();
        assert_eq!(s.reward, -env.params.hit_penalty);
        assert_eq!(env.lives, env.params.lives - 1);
    }

    #[test]
    fn enemy_population_is_bounded() {
        let params = DemonAttackParams {
            split_wave: 0,
            ..DemonAttackParams::default()
        };
        let mut env = DemonAttack::new(params);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut saw_small = false;
        for episode in 0..5 {
            env.reset(episode);
            loop {
                let a = ACTIONS[rng.gen_range(0..ACTIONS.len())];
                let s = env.step(a).unwrap();
                let (big, small) = env.counts();
                saw_small |= small > 0;
                assert!(big <= MAX_BIG && small <= MAX_SMALL);
                assert!(big + small.div_ceil(2) <= MAX_BIG, "big {big} small {small}");
                if s.done {
                    break;
                }
            }
        }
        assert!(saw_small);
    }
}
