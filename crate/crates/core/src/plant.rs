//! Ground-truth car simulation.
//!
//! The plant realizes a commanded forward speed through a first-order lag and a
//! commanded steering angle through a rate-limited servo, then integrates the
//! kinematic bicycle (rolling without slip or skid) with semi-implicit Euler.
//! States are plain values, so snapshot/restore is a copy.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    // rem_euclid maps -pi to pi already; guard the other edge.
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub wheelbase: f64,
    pub v_limit: f64,
    pub steer_limit: f64,
    /// Time constant of the speed loop.
    pub tau_v: f64,
    pub steer_rate_limit: f64,
    /// Control timestep.
    pub dt: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            wheelbase: 0.325,
            v_limit: 2.0,
            steer_limit: 0.6,
            tau_v: 0.15,
            steer_rate_limit: 4.0,
            dt: 0.05,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("wheelbase", self.wheelbase),
            ("v_limit", self.v_limit),
            ("steer_limit", self.steer_limit),
            ("tau_v", self.tau_v),
            ("steer_rate_limit", self.steer_rate_limit),
            ("dt", self.dt),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("plant.{name} must be finite and > 0, got {v}")));
            }
        }
        if self.steer_limit >= PI / 2.0 {
            return Err(Error::Config(format!(
                "plant.steer_limit must be < pi/2, got {}",
                self.steer_limit
            )));
        }
        Ok(())
    }
}

/// Commanded speed and steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub v_cmd: f64,
    pub theta_f_cmd: f64,
}

impl Action {
    pub fn new(v_cmd: f64, theta_f_cmd: f64) -> Self {
        Self { v_cmd, theta_f_cmd }
    }

    pub fn clamped(self, cfg: &PlantConfig) -> Self {
        Self {
            v_cmd: self.v_cmd.clamp(-cfg.v_limit, cfg.v_limit),
            theta_f_cmd: self.theta_f_cmd.clamp(-cfg.steer_limit, cfg.steer_limit),
        }
    }
}

/// Pose of the car plus the internal state of its two actuators.
///
/// `theta_f` is the steering set-point last sent to the servo; `theta_f_act`
/// is where the wheels actually are.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CarState {
    pub x_b: f64,
    pub y_b: f64,
    pub theta_b: f64,
    pub theta_f: f64,
    pub v_act: f64,
    pub theta_f_act: f64,
}

impl CarState {
    pub fn at_rest(x_b: f64, y_b: f64, theta_b: f64) -> Self {
        Self {
            x_b,
            y_b,
            theta_b: wrap_angle(theta_b),
            ..Self::default()
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.x_b, self.y_b, self.theta_b, self.theta_f, self.v_act, self.theta_f_act]
            .iter()
            .all(|v| v.is_finite())
    }

    /// World-frame velocity of the body.
    pub fn velocity(&self) -> (f64, f64) {
        (self.v_act * self.theta_b.cos(), self.v_act * self.theta_b.sin())
    }

    pub fn yaw_rate(&self, cfg: &PlantConfig) -> f64 {
        self.v_act / cfg.wheelbase * self.theta_f_act.tan()
    }

    /// Rate the steering servo applies on the next step to chase its set-point.
    pub fn steer_rate(&self, cfg: &PlantConfig) -> f64 {
        ((self.theta_f - self.theta_f_act) / cfg.dt)
            .clamp(-cfg.steer_rate_limit, cfg.steer_rate_limit)
    }
}

pub fn snapshot(state: &CarState) -> CarState {
    *state
}

pub fn restore(saved: &CarState) -> CarState {
    *saved
}

/// Advances the plant by one control period.
pub fn step(state: &CarState, action: Action, cfg: &PlantConfig) -> Result<CarState> {
    if !state.is_finite() {
        return Err(Error::InvalidState(format!("non-finite car state {state:?}")));
    }
    if !(action.v_cmd.is_finite() && action.theta_f_cmd.is_finite()) {
        return Err(Error::InvalidState(format!("non-finite action {action:?}")));
    }
    let a = action.clamped(cfg);
    let dt = cfg.dt;

    // Actuators first: exact exponential speed lag, rate-limited steering.
    let decay = (-dt / cfg.tau_v).exp();
    let v_act = a.v_cmd + (state.v_act - a.v_cmd) * decay;
    let max_dsteer = cfg.steer_rate_limit * dt;
    let theta_f_act = (state.theta_f_act
        + (a.theta_f_cmd - state.theta_f_act).clamp(-max_dsteer, max_dsteer))
    .clamp(-cfg.steer_limit, cfg.steer_limit);

    // Then the pose, using the updated rates and heading. Displacement is along
    // the new heading, so the lateral body velocity is zero.
    let theta_b = state.theta_b + dt * v_act / cfg.wheelbase * theta_f_act.tan();
    let x_b = state.x_b + dt * v_act * theta_b.cos();
    let y_b = state.y_b + dt * v_act * theta_b.sin();

    Ok(CarState {
        x_b,
        y_b,
        theta_b: wrap_angle(theta_b),
        theta_f: a.theta_f_cmd,
        v_act,
        theta_f_act,
    })
}
