//! Simple-Spread and Push-Ball particle worlds with a variable population.
//!
//! Agents are point masses driven by one of five discrete forces. The team
//! shares a sparse reward: a bonus on the step where every landmark first
//! becomes covered, minus a penalty per colliding agent pair.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::teacher::TaskSpec;

pub const ACTION_COUNT: usize = 5;

/// Unit force directions for noop, +x, -x, +y, -y.
const ACTION_DIRS: [[f64; 2]; ACTION_COUNT] = [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvFamily {
    SimpleSpread,
    PushBall,
}

impl std::fmt::Display for EnvFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvFamily::SimpleSpread => "simple_spread",
            EnvFamily::PushBall => "push_ball",
        })
    }
}

impl std::str::FromStr for EnvFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple_spread" => Ok(EnvFamily::SimpleSpread),
            "push_ball" => Ok(EnvFamily::PushBall),
            other => Err(Error::Config(format!("unknown environment family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    pub damping: f64,
    pub max_speed: f64,
    /// Acceleration magnitude of a non-noop action.
    pub accel: f64,
    pub cover_radius: f64,
    /// Agents collide when their centers are closer than twice this.
    pub collision_radius: f64,
    /// Agent-to-ball center distance at which a push happens.
    pub contact_radius: f64,
    pub success_bonus: f64,
    pub collision_penalty: f64,
    /// Nearest-k entity slots per entity kind in an observation.
    pub slots: usize,
    /// Populations accepted by `Env::new`.
    pub populations: Vec<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            dt: 0.1,
            damping: 0.25,
            max_speed: 1.0,
            accel: 5.0,
            cover_radius: 0.15,
            collision_radius: 0.1,
            contact_radius: 0.2,
            success_bonus: 5.0,
            collision_penalty: 0.5,
            slots: 8,
            populations: vec![2, 4, 8, 16],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("max_speed", self.max_speed),
            ("cover_radius", self.cover_radius),
            ("collision_radius", self.collision_radius),
            ("contact_radius", self.contact_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("env.{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::Config(format!("env.damping must be in [0,1), got {}", self.damping)));
        }
        if self.accel < 0.0 || self.collision_penalty < 0.0 || self.success_bonus < 0.0 {
            return Err(Error::Config("env.accel, success_bonus and collision_penalty must be non-negative".into()));
        }
        if self.slots == 0 {
            return Err(Error::Config("env.slots must be at least 1".into()));
        }
        if self.populations.is_empty() || self.populations.contains(&0) {
            return Err(Error::Config("env.populations must be non-empty positive sizes".into()));
        }
        Ok(())
    }

    /// Observation width: own position and velocity, then `slots` entries of
    /// (dx, dy, valid) for landmarks, other agents and balls.
    pub fn obs_dim(&self) -> usize {
        4 + 9 * self.slots
    }

    fn spawn_separation(&self) -> f64 {
        2.0 * self.collision_radius
    }
}

pub type Vec2 = [f64; 2];

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub agent_positions: Vec<Vec2>,
    pub agent_velocities: Vec<Vec2>,
    pub landmark_positions: Vec<Vec2>,
    /// Empty outside Push-Ball.
    pub ball_positions: Vec<Vec2>,
    pub ball_velocities: Vec<Vec2>,
    pub step_counter: usize,
}

impl WorldState {
    pub fn population(&self) -> usize {
        self.agent_positions.len()
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.agent_velocities
            .iter()
            .chain(&self.ball_velocities)
            .map(|v| 0.5 * (v[0] * v[0] + v[1] * v[1]))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Vec<f64>>,
    pub shared_reward: f64,
    pub done: bool,
    pub coverage: f64,
}

#[derive(Debug, Clone)]
pub struct Env {
    config: EnvConfig,
    spec: TaskSpec,
    state: WorldState,
    completed: bool,
    done: bool,
}

impl Env {
    /// Spawns every entity uniformly in the arena with pairwise separation
    /// of at least twice the collision radius.
    pub fn new(spec: &TaskSpec, config: &EnvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !config.populations.contains(&spec.population) {
            return Err(Error::contract(format!(
                "population {} is not in the configured task space {:?}",
                spec.population, config.populations
            )));
        }
        if spec.max_steps == 0 {
            return Err(Error::contract("max_steps must be positive"));
        }
        let n = spec.population;
        let kinds = if spec.env_family == EnvFamily::PushBall { 3 } else { 2 };
        let mut rng = seeded(seed);
        let sep = config.spawn_separation();
        let mut placed: Vec<Vec2> = Vec::with_capacity(kinds * n);
        let mut attempts = 0usize;
        while placed.len() < kinds * n {
            attempts += 1;
            if attempts > 1_000_000 {
                return Err(Error::contract(format!("could not place {} separated entities", kinds * n)));
            }
            let p = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if placed.iter().all(|q| dist(p, *q) >= sep) {
                placed.push(p);
            }
        }
        let agent_positions = placed[..n].to_vec();
        let landmark_positions = placed[n..2 * n].to_vec();
        let ball_positions = if kinds == 3 { placed[2 * n..].to_vec() } else { Vec::new() };
        let state = WorldState {
            agent_velocities: vec![[0.0; 2]; n],
            ball_velocities: vec![[0.0; 2]; ball_positions.len()],
            agent_positions,
            landmark_positions,
            ball_positions,
            step_counter: 0,
        };
        Ok(Env {
            config: config.clone(),
            spec: spec.clone(),
            state,
            completed: false,
            done: false,
        })
    }

    /// Builds an environment around a hand-placed state.
    pub fn from_state(spec: &TaskSpec, config: &EnvConfig, state: WorldState) -> Result<Self> {
        config.validate()?;
        let n = state.agent_positions.len();
        let balls_expected = if spec.env_family == EnvFamily::PushBall { n } else { 0 };
        if n == 0
            || state.agent_velocities.len() != n
            || state.landmark_positions.len() != n
            || state.ball_positions.len() != balls_expected
            || state.ball_velocities.len() != balls_expected
        {
            return Err(Error::contract("world state entity counts are inconsistent"));
        }
        let spec = TaskSpec {
            population: n,
            ..spec.clone()
        };
        Ok(Env {
            config: config.clone(),
            spec,
            state,
            completed: false,
            done: false,
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn population(&self) -> usize {
        self.state.population()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    pub fn coverage(&self) -> f64 {
        coverage_rate(&self.state, self.spec.env_family, self.config.cover_radius)
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.population()).map(|i| self.observe(i)).collect()
    }

    fn observe(&self, i: usize) -> Vec<f64> {
        let s = &self.state;
        let k = self.config.slots;
        let me = s.agent_positions[i];
        let mut obs = Vec::with_capacity(self.obs_dim());
        obs.extend_from_slice(&me);
        obs.extend_from_slice(&s.agent_velocities[i]);
        let others: Vec<Vec2> = s
            .agent_positions
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| *p)
            .collect();
        for group in [&s.landmark_positions, &others, &s.ball_positions] {
            let mut order: Vec<usize> = (0..group.len()).collect();
            order.sort_by(|&a, &b| dist(me, group[a]).total_cmp(&dist(me, group[b])).then(a.cmp(&b)));
            for slot in 0..k {
                match order.get(slot) {
                    Some(&j) => obs.extend_from_slice(&[group[j][0] - me[0], group[j][1] - me[1], 1.0]),
                    None => obs.extend_from_slice(&[0.0, 0.0, 0.0]),
                }
            }
        }
        obs
    }

    /// Advances one tick. Stepping a finished episode is an error.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        let n = self.population();
        if actions.len() != n {
            return Err(Error::contract(format!("expected {n} actions, got {}", actions.len())));
        }
        if let Some(a) = actions.iter().find(|a| **a >= ACTION_COUNT) {
            return Err(Error::contract(format!("action {a} is not one of the {ACTION_COUNT} discrete forces")));
        }
        if self.done {
            return Err(Error::InvalidState("episode already finished".into()));
        }
        let c = &self.config;
        let s = &mut self.state;
        for (i, &a) in actions.iter().enumerate() {
            let dir = ACTION_DIRS[a];
            let v = &mut s.agent_velocities[i];
            for d in 0..2 {
                v[d] = v[d] * (1.0 - c.damping) + dir[d] * c.accel * c.dt;
            }
            limit_speed(v, c.max_speed);
            integrate(&mut s.agent_positions[i], v, c.dt);
        }
        if self.spec.env_family == EnvFamily::PushBall {
            for b in 0..s.ball_positions.len() {
                let bv = &mut s.ball_velocities[b];
                bv[0] *= 1.0 - c.damping;
                bv[1] *= 1.0 - c.damping;
            }
            for i in 0..n {
                for b in 0..s.ball_positions.len() {
                    push(
                        s.agent_positions[i],
                        &mut s.agent_velocities[i],
                        s.ball_positions[b],
                        &mut s.ball_velocities[b],
                        c.contact_radius,
                    );
                }
            }
            for b in 0..s.ball_positions.len() {
                let bv = &mut s.ball_velocities[b];
                limit_speed(bv, c.max_speed);
                integrate(&mut s.ball_positions[b], bv, c.dt);
            }
        }
        s.step_counter += 1;

        let collisions = colliding_pairs(&s.agent_positions, 2.0 * c.collision_radius);
        let coverage = coverage_rate(s, self.spec.env_family, c.cover_radius);
        let all_covered = coverage >= 1.0;
        let mut reward = -c.collision_penalty * collisions as f64;
        if all_covered && !self.completed {
            reward += c.success_bonus;
            self.completed = true;
        }
        self.done = all_covered || s.step_counter >= self.spec.max_steps;
        Ok(StepOutcome {
            observations: self.observations(),
            shared_reward: reward,
            done: self.done,
            coverage,
        })
    }
}

/// The stepping surface the hierarchical executor drives.
pub trait MultiAgentEnv {
    fn population(&self) -> usize;
    fn observations(&self) -> Vec<Vec<f64>>;
    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome>;
    fn is_done(&self) -> bool;
}

impl MultiAgentEnv for Env {
    fn population(&self) -> usize {
        Env::population(self)
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        Env::observations(self)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
        Env::step(self, actions)
    }

    fn is_done(&self) -> bool {
        Env::is_done(self)
    }
}

fn limit_speed(v: &mut Vec2, max_speed: f64) {
    let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if speed > max_speed {
        v[0] *= max_speed / speed;
        v[1] *= max_speed / speed;
    }
}

/// Moves `p` by `v * dt`, clamping to the arena and stopping motion into a wall.
fn integrate(p: &mut Vec2, v: &mut Vec2, dt: f64) {
    for d in 0..2 {
        p[d] += v[d] * dt;
        if p[d] > 1.0 {
            p[d] = 1.0;
            v[d] = 0.0;
        } else if p[d] < -1.0 {
            p[d] = -1.0;
            v[d] = 0.0;
        }
    }
}

/// Perfectly inelastic equal-mass exchange along the agent-ball line when the
/// agent is in contact and closing in.
fn push(agent: Vec2, av: &mut Vec2, ball: Vec2, bv: &mut Vec2, contact_radius: f64) {
    let d = dist(agent, ball);
    if d >= contact_radius || d == 0.0 {
        return;
    }
    let u = [(ball[0] - agent[0]) / d, (ball[1] - agent[1]) / d];
    let va = av[0] * u[0] + av[1] * u[1];
    let vb = bv[0] * u[0] + bv[1] * u[1];
    if va <= vb {
        return;
    }
    let common = 0.5 * (va + vb);
    for k in 0..2 {
        av[k] += (common - va) * u[k];
        bv[k] += (common - vb) * u[k];
    }
}

fn colliding_pairs(positions: &[Vec2], threshold: f64) -> usize {
    let mut count = 0;
    for i in 0..positions.len() {
        for j in i + 1..positions.len() {
            if dist(positions[i], positions[j]) < threshold {
                count += 1;
            }
        }
    }
    count
}

/// Fraction of landmarks within `cover_radius` of a covering entity (agents in
/// Simple-Spread, balls in Push-Ball).
pub fn coverage_rate(state: &WorldState, family: EnvFamily, cover_radius: f64) -> f64 {
    let coverers = match family {
        EnvFamily::SimpleSpread => &state.agent_positions,
        EnvFamily::PushBall => &state.ball_positions,
    };
    if state.landmark_positions.is_empty() {
        return 0.0;
    }
    let covered = state
        .landmark_positions
        .iter()
        .filter(|l| coverers.iter().any(|c| dist(**l, *c) <= cover_radius))
        .count();
    covered as f64 / state.landmark_positions.len() as f64
}

/// A scripted controller: agent `i` steers toward landmark `i` (or pushes
/// ball `i` toward it in Push-Ball), choosing the force whose predicted
/// stopping point lands closest to the goal.
pub fn scripted_oracle_actions(env: &Env) -> Vec<usize> {
    let s = env.state();
    let c = env.config();
    // Coasting distance multiplier: sum of (1-damping)^k for k >= 1.
    let coast = (1.0 - c.damping) / c.damping.max(1e-6);
    (0..env.population())
        .map(|i| {
            let goal = match env.spec().env_family {
                EnvFamily::SimpleSpread => s.landmark_positions[i],
                EnvFamily::PushBall => {
                    // Stand behind the ball on the far side from the landmark.
                    let b = s.ball_positions[i];
                    let l = s.landmark_positions[i];
                    let d = dist(b, l).max(1e-9);
                    let behind = [b[0] - (l[0] - b[0]) / d * 0.1, b[1] - (l[1] - b[1]) / d * 0.1];
                    if dist(s.agent_positions[i], behind) < 0.12 {
                        l
                    } else {
                        behind
                    }
                }
            };
            let p = s.agent_positions[i];
            let v = s.agent_velocities[i];
            (0..ACTION_COUNT)
                .min_by(|&a, &b| {
                    let stop = |act: usize| {
                        let mut nv = [0.0; 2];
                        for d in 0..2 {
                            nv[d] = v[d] * (1.0 - c.damping) + ACTION_DIRS[act][d] * c.accel * c.dt;
                        }
                        limit_speed(&mut nv, c.max_speed);
                        let q = [p[0] + nv[0] * c.dt * (1.0 + coast), p[1] + nv[1] * c.dt * (1.0 + coast)];
                        dist(q, goal)
                    };
                    stop(a).total_cmp(&stop(b))
                })
                .unwrap_or(0)
        })
        .collect()
}
