//! The flag-run environment: a car chasing goals that relocate on arrival,
//! rewarded by potential-based shaping on the distance to the current goal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::{Error, Result};
use crate::plant::{self, wrap_angle, Action, CarState, PlantConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub goal_radius: f64,
    /// Goals are drawn uniformly from `[-h, h]^2`.
    pub goal_square_half: f64,
    pub episode_seconds: f64,
    pub shaping_gamma: f64,
    pub rng_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            goal_radius: 0.2,
            goal_square_half: 5.0,
            episode_seconds: 10.0,
            shaping_gamma: 0.99,
            rng_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.goal_radius.is_finite() && self.goal_radius > 0.0) {
            return Err(Error::Config(format!("env.goal_radius must be > 0, got {}", self.goal_radius)));
        }
        if !(self.goal_square_half.is_finite() && self.goal_square_half > self.goal_radius) {
            return Err(Error::Config(format!(
                "env.goal_square_half must exceed goal_radius, got {}",
                self.goal_square_half
            )));
        }
        if !(self.episode_seconds.is_finite() && self.episode_seconds > 0.0) {
            return Err(Error::Config(format!(
                "env.episode_seconds must be > 0, got {}",
                self.episode_seconds
            )));
        }
        if !(self.shaping_gamma > 0.0 && self.shaping_gamma <= 1.0) {
            return Err(Error::Config(format!(
                "env.shaping_gamma must be in (0, 1], got {}",
                self.shaping_gamma
            )));
        }
        Ok(())
    }

    pub fn episode_len(&self, plant: &PlantConfig) -> usize {
        (self.episode_seconds / plant.dt).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub x: f64,
    pub y: f64,
}

impl Goal {
    pub fn distance_from(&self, s: &CarState) -> f64 {
        (s.x_b - self.x).hypot(s.y_b - self.y)
    }

    /// Heading that points from the car at the goal. Flag-run goals carry no
    /// orientation of their own.
    pub fn heading_from(&self, s: &CarState) -> f64 {
        (self.y - s.y_b).atan2(self.x - s.x_b)
    }
}

/// Shaping potential: negative Euclidean distance to the goal.
pub fn potential(s: &CarState, goal: &Goal) -> f64 {
    -goal.distance_from(s)
}

pub fn shaped_reward(before: &CarState, after: &CarState, goal: &Goal, gamma: f64) -> f64 {
    gamma * potential(after, goal) - potential(before, goal)
}

pub const OBS_DIM: usize = 7;

/// `[dist, bearing, theta_f, xdot, ydot, yaw_rate, steer_rate]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn build(s: &CarState, goal: &Goal, plant: &PlantConfig) -> Self {
        let (xdot, ydot) = s.velocity();
        Observation([
            goal.distance_from(s),
            wrap_angle(goal.heading_from(s) - s.theta_b),
            s.theta_f_act,
            xdot,
            ydot,
            s.yaw_rate(plant),
            s.steer_rate(plant),
        ])
    }

    pub fn dist_to_goal(&self) -> f64 {
        self.0[0]
    }

    pub fn bearing_to_goal(&self) -> f64 {
        self.0[1]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub goal_reached: bool,
}

/// One episode of the flag-run task. Cloning gives an independent copy.
#[derive(Debug, Clone)]
pub struct CarFlagRun {
    plant_cfg: PlantConfig,
    cfg: EnvConfig,
    state: CarState,
    goal: Goal,
    rng: ChaCha8Rng,
    steps: usize,
    episode_len: usize,
    goals_reached: usize,
}

impl CarFlagRun {
    /// Starts an episode with the car at rest at the origin.
    pub fn reset(plant_cfg: PlantConfig, cfg: EnvConfig, seed: u64) -> (Self, Observation) {
        let mut rng = crate::seeding::rng_for(crate::seeding::Domain::TrainEpisode, cfg.rng_seed, seed);
        let state = CarState::default();
        let goal = sample_goal(&mut rng, &cfg, &state);
        let env = Self {
            episode_len: cfg.episode_len(&plant_cfg),
            plant_cfg,
            cfg,
            state,
            goal,
            rng,
            steps: 0,
            goals_reached: 0,
        };
        let obs = env.observation();
        (env, obs)
    }

    /// Like [`reset`](Self::reset) but with a caller-supplied goal stream.
    pub fn reset_with_rng(plant_cfg: PlantConfig, cfg: EnvConfig, mut rng: ChaCha8Rng) -> (Self, Observation) {
        let state = CarState::default();
        let goal = sample_goal(&mut rng, &cfg, &state);
        let env = Self {
            episode_len: cfg.episode_len(&plant_cfg),
            plant_cfg,
            cfg,
            state,
            goal,
            rng,
            steps: 0,
            goals_reached: 0,
        };
        let obs = env.observation();
        (env, obs)
    }

    pub fn observation(&self) -> Observation {
        Observation::build(&self.state, &self.goal, &self.plant_cfg)
    }

    pub fn state(&self) -> &CarState {
        &self.state
    }

    pub fn goal(&self) -> &Goal {
        &self.goal
    }

    pub fn plant_config(&self) -> &PlantConfig {
        &self.plant_cfg
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn remaining_steps(&self) -> usize {
        self.episode_len.saturating_sub(self.steps)
    }

    pub fn is_done(&self) -> bool {
        self.steps >= self.episode_len
    }

    pub fn goals_reached(&self) -> usize {
        self.goals_reached
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.is_done() {
            return Err(Error::EpisodeDone);
        }
        let next = plant::step(&self.state, action, &self.plant_cfg)?;
        // The switching step is scored against the goal that was reached.
        let reward = shaped_reward(&self.state, &next, &self.goal, self.cfg.shaping_gamma);
        self.state = next;
        self.steps += 1;
        let goal_reached = self.goal.distance_from(&self.state) <= self.cfg.goal_radius;
        if goal_reached {
            self.goals_reached += 1;
            self.goal = sample_goal(&mut self.rng, &self.cfg, &self.state);
        }
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: self.is_done(),
            goal_reached,
        })
    }

    /// One-step shaped reward of `action` from the current state, without
    /// committing it. Goal logic is not run.
    pub fn peek_reward(&self, action: Action) -> Result<f64> {
        let saved = plant::snapshot(&self.state);
        let next = plant::step(&saved, action, &self.plant_cfg)?;
        Ok(shaped_reward(&saved, &next, &self.goal, self.cfg.shaping_gamma))
    }

    /// Detached copy for multi-step look-ahead. Look-ahead never consumes goals:
    /// use [`Lookahead::step`] on it.
    pub fn lookahead(&self) -> Lookahead {
        Lookahead {
            plant_cfg: self.plant_cfg,
            gamma: self.cfg.shaping_gamma,
            state: plant::snapshot(&self.state),
            goal: self.goal,
        }
    }
}

/// Simulated continuation of an environment with the goal frozen.
#[derive(Debug, Clone, Copy)]
pub struct Lookahead {
    plant_cfg: PlantConfig,
    gamma: f64,
    state: CarState,
    goal: Goal,
}

impl Lookahead {
    pub fn step(&mut self, action: Action) -> Result<f64> {
        let next = plant::step(&self.state, action, &self.plant_cfg)?;
        let r = shaped_reward(&self.state, &next, &self.goal, self.gamma);
        self.state = next;
        Ok(r)
    }

    pub fn state(&self) -> &CarState {
        &self.state
    }

    pub fn goal(&self) -> &Goal {
        &self.goal
    }

    pub fn observation(&self) -> Observation {
        Observation::build(&self.state, &self.goal, &self.plant_cfg)
    }
}

/// Uniform goal in the square, redrawn while it lands inside the capture radius.
pub fn sample_goal(rng: &mut ChaCha8Rng, cfg: &EnvConfig, car: &CarState) -> Goal {
    let h = cfg.goal_square_half;
    loop {
        let g = Goal {
            x: rng.random_range(-h..h),
            y: rng.random_range(-h..h),
        };
        if g.distance_from(car) > cfg.goal_radius {
            return g;
        }
    }
}

/// One row of the optional per-step trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub x_b: f64,
    pub y_b: f64,
    pub theta_b: f64,
    pub reward: f64,
    pub goal_x: f64,
    pub goal_y: f64,
    pub action_source: &'static str,
}

pub const TRACE_HEADER: &str = "step,x_b,y_b,theta_b,reward,goal_x,goal_y,action_source";

pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step, r.x_b, r.y_b, r.theta_b, r.reward, r.goal_x, r.goal_y, r.action_source
        )?;
    }
    Ok(())
}
