//! Receding-horizon trajectory optimization for the kinematic car.
//!
//! Decision variables are the knot states `q_0..q_N` with
//! `q = (x_b, y_b, theta_b, theta_f)` and the controls `u_1..u_N` with
//! `u = (v, steer_rate)`. The no-slip/no-skid constraints are eliminated
//! analytically, leaving `q' = f(q, u)`, and consecutive knots are tied by the
//! backward-Euler rule `q_{k+1} = q_k + h f(q_{k+1}, u_{k+1})`. The terminal
//! cost is a weighted squared error to the goal pose.
//!
//! The problem is condensed onto the controls: every iterate is rolled out
//! through the implicit map, so dynamics hold by construction and `q_0` is
//! pinned exactly. Bounds on speed, steering rate and steering angle are
//! enforced by projection. The optimizer is projected gradient descent with
//! heavy-ball momentum and Armijo backtracking; gradients come from an adjoint
//! sweep through the implicit map.

use serde::{Deserialize, Serialize};

use crate::env::Goal;
use crate::error::{Error, Result};
use crate::plant::{wrap_angle, Action, CarState, PlantConfig};

/// `(x_b, y_b, theta_b, theta_f)`.
pub type Knot = [f64; 4];
/// `(v, steer_rate)`.
pub type Control = [f64; 2];

const X: usize = 0;
const Y: usize = 1;
const TH: usize = 2;
const TF: usize = 3;

/// Constraint-reduced car kinematics used inside the optimizer. It has no
/// speed lag: commanded speed is realized instantly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TOModel {
    pub wheelbase: f64,
    pub v_limit: f64,
    pub steer_limit: f64,
    pub steer_rate_limit: f64,
}

impl TOModel {
    pub fn from_plant(p: &PlantConfig) -> Self {
        Self {
            wheelbase: p.wheelbase,
            v_limit: p.v_limit,
            steer_limit: p.steer_limit,
            steer_rate_limit: p.steer_rate_limit,
        }
    }

    /// `qdot = f(q, u)`; velocity is always along the heading.
    pub fn dynamics(&self, q: &Knot, u: &Control) -> Knot {
        [
            u[0] * q[TH].cos(),
            u[0] * q[TH].sin(),
            u[0] / self.wheelbase * q[TF].tan(),
            u[1],
        ]
    }

    /// Solves `q' = q + h f(q', u)` for `q'`.
    ///
    /// `f` is triangular in `q'` (steering depends on nothing, heading on
    /// steering, position on heading), so three fixed-point sweeps from `q`
    /// reach the exact root; this evaluates that root directly.
    pub fn implicit_step(&self, q: &Knot, u: &Control, h: f64) -> Knot {
        let tf = q[TF] + h * u[1];
        let th = q[TH] + h * u[0] / self.wheelbase * tf.tan();
        [
            q[X] + h * u[0] * th.cos(),
            q[Y] + h * u[0] * th.sin(),
            th,
            tf,
        ]
    }

    /// `|| q_next - q - h f(q_next, u) ||_inf`.
    pub fn residual(&self, q: &Knot, q_next: &Knot, u: &Control, h: f64) -> f64 {
        let f = self.dynamics(q_next, u);
        (0..4)
            .map(|i| (q_next[i] - q[i] - h * f[i]).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_theta: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, gamma_theta: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TOProblem {
    pub q0: Knot,
    pub goal: Goal,
    pub n_knots: usize,
    pub h: f64,
    pub weights: CostWeights,
}

impl TOProblem {
    /// Problem anchored at the car's current pose and actual steering angle.
    pub fn from_state(state: &CarState, goal: Goal, cfg: &SolverConfig) -> Self {
        Self {
            q0: [state.x_b, state.y_b, state.theta_b, state.theta_f_act],
            goal,
            n_knots: cfg.n_knots,
            h: cfg.h,
            weights: cfg.weights,
        }
    }

    /// Target heading: straight at the goal from the initial position.
    pub fn goal_heading(&self) -> f64 {
        (self.goal.y - self.q0[Y]).atan2(self.goal.x - self.q0[X])
    }

    fn validate(&self) -> Result<()> {
        let finite = self.q0.iter().all(|v| v.is_finite())
            && self.goal.x.is_finite()
            && self.goal.y.is_finite()
            && self.h.is_finite()
            && [self.weights.alpha, self.weights.beta, self.weights.gamma_theta]
                .iter()
                .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("trajectory optimization problem".into()));
        }
        if self.n_knots < 2 || self.h <= 0.0 {
            return Err(Error::Config(format!(
                "trajopt needs n_knots >= 2 and h > 0, got {} and {}",
                self.n_knots, self.h
            )));
        }
        Ok(())
    }

    /// Terminal cost of a final knot.
    pub fn cost(&self, q_n: &Knot) -> f64 {
        let w = &self.weights;
        let ex = self.goal.x - q_n[X];
        let ey = self.goal.y - q_n[Y];
        let et = wrap_angle(self.goal_heading() - q_n[TH]);
        w.alpha * ex * ex + w.beta * ey * ey + w.gamma_theta * et * et
    }
}

/// Knot sequence returned by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TOSolution {
    /// `q_0..q_N`.
    pub knots: Vec<Knot>,
    /// `u_1..u_N`; `controls[k]` drives `knots[k] -> knots[k + 1]`.
    pub controls: Vec<Control>,
    pub cost: f64,
    /// Max-norm backward-Euler residual over all knots.
    pub constraint_residual: f64,
    /// Residual per transition, `residuals[k]` for `knots[k] -> knots[k + 1]`.
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Best cost after each iteration, starting with the initial guess.
    pub cost_history: Vec<f64>,
}

impl TOSolution {
    pub fn n_knots(&self) -> usize {
        self.controls.len()
    }

    /// Command to send to the car: speed of the first control, steering angle
    /// of the first knot after `q_0`.
    pub fn first_action(&self) -> Action {
        first_action(self)
    }
}

pub fn first_action(sol: &TOSolution) -> Action {
    Action {
        v_cmd: sol.controls[0][0],
        theta_f_cmd: sol.knots[1][TF],
    }
}

/// First trial step of each backtracking line search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Always start from `initial_step`.
    Fixed,
    /// Barzilai-Borwein step from the last accepted move, `initial_step` on
    /// the first iteration.
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n_knots: usize,
    pub h: f64,
    pub weights: CostWeights,
    pub max_iters_cold: usize,
    pub max_iters_warm: usize,
    pub initial_step: f64,
    pub step_rule: StepRule,
    pub momentum: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// Converged when the projected-gradient step (unit length, normalized
    /// controls) is below this in max-norm.
    pub grad_tol: f64,
    /// Converged when the cost is below this.
    pub cost_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n_knots: 20,
            h: 0.1,
            weights: CostWeights::default(),
            max_iters_cold: 120,
            max_iters_warm: 40,
            initial_step: 0.5,
            step_rule: StepRule::Fixed,
            momentum: 0.8,
            armijo: 1e-4,
            max_backtracks: 30,
            grad_tol: 1e-5,
            cost_tol: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_knots < 2 {
            return Err(Error::Config(format!("trajopt.n_knots must be >= 2, got {}", self.n_knots)));
        }
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::Config(format!("trajopt.h must be > 0, got {}", self.h)));
        }
        if !(self.initial_step > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("trajopt.initial_step must be > 0 and momentum in [0, 1)".into()));
        }
        let w = &self.weights;
        if [w.alpha, w.beta, w.gamma_theta].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("trajopt weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Solver with private scratch buffers. One per trial.
#[derive(Debug, Clone)]
pub struct TrajectoryOptimizer {
    pub model: TOModel,
    pub cfg: SolverConfig,
    knots: Vec<Knot>,
    controls: Vec<Control>,
    saturated: Vec<bool>,
}

impl TrajectoryOptimizer {
    pub fn new(model: TOModel, cfg: SolverConfig) -> Self {
        Self { model, cfg, knots: Vec::new(), controls: Vec::new(), saturated: Vec::new() }
    }

    pub fn problem(&self, state: &CarState, goal: Goal) -> TOProblem {
        TOProblem::from_state(state, goal, &self.cfg)
    }

    /// Drops `q_0` and duplicates the last knot, holding it with a zero
    /// control so the appended transition is dynamically feasible.
    pub fn shift_warm_start(&self, prev: &TOSolution) -> TOSolution {
        let n = prev.controls.len();
        let mut knots = prev.knots[1..].to_vec();
        knots.push(prev.knots[n]);
        let mut controls = prev.controls[1..].to_vec();
        controls.push([0.0, 0.0]);
        let mut residuals = prev.residuals[1..].to_vec();
        residuals.push(self.model.residual(&knots[n - 1], &knots[n], &controls[n - 1], self.cfg.h));
        TOSolution {
            constraint_residual: residuals.iter().copied().fold(0.0, f64::max),
            residuals,
            knots,
            controls,
            cost: prev.cost,
            iterations: 0,
            converged: false,
            cost_history: Vec::new(),
        }
    }

    /// Optimizes the controls. Never fails on iteration cap: the best iterate
    /// is returned with `converged = false`.
    pub fn solve(&mut self, problem: &TOProblem, warm_start: Option<&TOSolution>) -> Result<TOSolution> {
        problem.validate()?;
        // Optimize in the body frame of q0; the result is mapped back below.
        let [x0, y0, th0, tf0] = problem.q0;
        let (sn, cs) = th0.sin_cos();
        let (gx, gy) = (problem.goal.x - x0, problem.goal.y - y0);
        let world = problem;
        let canonical = TOProblem {
            q0: [0.0, 0.0, 0.0, tf0],
            goal: Goal { x: snap(cs * gx + sn * gy), y: snap(-sn * gx + cs * gy) },
            ..*problem
        };
        let problem = &canonical;
        let n = problem.n_knots;
        let scale = [self.model.v_limit, self.model.steer_rate_limit];

        let warm = warm_start.filter(|w| w.controls.len() == n);
        let max_iters = if warm.is_some() { self.cfg.max_iters_warm } else { self.cfg.max_iters_cold };
        let mut z: Vec<f64> = match warm {
            Some(w) => w.controls.iter().flat_map(|u| [u[0] / scale[0], u[1] / scale[1]]).collect(),
            None => self.cold_guess(problem),
        };
        if z.iter().any(|v| !v.is_finite()) {
            z = self.cold_guess(problem);
        }
        self.project(problem, &mut z);

        let mut grad = vec![0.0; 2 * n];
        let mut cost = self.cost_and_grad(problem, &z, &mut grad);
        let mut history = vec![cost];
        let mut prev_step = vec![0.0; 2 * n];
        let mut trial = vec![0.0; 2 * n];
        let mut dir = vec![0.0; 2 * n];
        let mut iterations = 0;
        let mut converged = false;
        let mut t0 = self.cfg.initial_step;
        let mut prev_z = z.clone();
        let mut prev_grad = grad.clone();

        loop {
            if cost <= self.cfg.cost_tol || self.projected_grad_norm(problem, &z, &grad) <= self.cfg.grad_tol {
                converged = true;
                break;
            }
            if iterations >= max_iters {
                break;
            }
            iterations += 1;

            for i in 0..dir.len() {
                dir[i] = -grad[i] + self.cfg.momentum * prev_step[i];
            }
            if dot(&dir, &grad) >= 0.0 {
                for i in 0..dir.len() {
                    dir[i] = -grad[i];
                }
            }
            let accepted = self.line_search(problem, &z, &grad, &dir, cost, t0, &mut trial)
                .or_else(|| {
                    // Momentum direction failed; fall back to steepest descent.
                    for i in 0..dir.len() {
                        dir[i] = -grad[i];
                    }
                    self.line_search(problem, &z, &grad, &dir, cost, t0, &mut trial)
                });
            match accepted {
                Some((new_cost, t)) => {
                    for i in 0..z.len() {
                        prev_step[i] = (trial[i] - z[i]) / t;
                    }
                    prev_z.copy_from_slice(&z);
                    prev_grad.copy_from_slice(&grad);
                    z.copy_from_slice(&trial);
                    cost = self.cost_and_grad(problem, &z, &mut grad);
                    debug_assert!(cost == new_cost);
                    if self.cfg.step_rule == StepRule::Spectral {
                        let mut ss = 0.0;
                        let mut sy = 0.0;
                        for i in 0..z.len() {
                            let si = z[i] - prev_z[i];
                            ss += si * si;
                            sy += si * (grad[i] - prev_grad[i]);
                        }
                        t0 = if sy > 0.0 { (ss / sy).clamp(1e-6, 1e6) } else { self.cfg.initial_step };
                    }
                    history.push(cost);
                }
                None => {
                    // No decrease possible along the projected arc.
                    history.push(cost);
                    converged = self.projected_grad_norm(problem, &z, &grad) <= self.cfg.grad_tol.sqrt();
                    break;
                }
            }
        }

        // Final rollout of the best iterate, mapped back to the world frame.
        self.rollout(problem, &z);
        let controls = self.controls.clone();
        let mut knots: Vec<Knot> = self
            .knots
            .iter()
            .map(|q| [x0 + cs * q[X] - sn * q[Y], y0 + sn * q[X] + cs * q[Y], th0 + q[TH], q[TF]])
            .collect();
        knots[0] = world.q0;
        let residuals: Vec<f64> = (0..n)
            .map(|k| self.model.residual(&knots[k], &knots[k + 1], &controls[k], problem.h))
            .collect();
        Ok(TOSolution {
            cost: world.cost(&knots[n]),
            constraint_residual: residuals.iter().copied().fold(0.0, f64::max),
            residuals,
            knots,
            controls,
            iterations,
            converged,
            cost_history: history,
        })
    }

    fn line_search(
        &mut self,
        problem: &TOProblem,
        z: &[f64],
        grad: &[f64],
        dir: &[f64],
        cost: f64,
        t0: f64,
        trial: &mut [f64],
    ) -> Option<(f64, f64)> {
        let mut t = t0;
        for _ in 0..self.cfg.max_backtracks {
            for i in 0..z.len() {
                trial[i] = z[i] + t * dir[i];
            }
            self.project(problem, trial);
            let decrease: f64 = (0..z.len()).map(|i| grad[i] * (trial[i] - z[i])).sum();
            if decrease < 0.0 {
                let c = self.cost_only(problem, trial);
                if c <= cost + self.cfg.armijo * decrease && c < cost {
                    return Some((c, t));
                }
            }
            t *= 0.5;
        }
        None
    }

    fn projected_grad_norm(&mut self, problem: &TOProblem, z: &[f64], grad: &[f64]) -> f64 {
        let mut p: Vec<f64> = z.iter().zip(grad).map(|(a, g)| a - g).collect();
        self.project(problem, &mut p);
        p.iter().zip(z).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Euclidean projection onto the box of normalized commanded controls.
    fn project(&self, _problem: &TOProblem, z: &mut [f64]) {
        z.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    }

    fn controls_at(&self, z: &[f64], k: usize) -> Control {
        [z[2 * k] * self.model.v_limit, z[2 * k + 1] * self.model.steer_rate_limit]
    }

    /// Rolls the commanded controls through the implicit map. The steering
    /// angle saturates at its limit; `self.controls` receives the effective
    /// controls, which satisfy the dynamics and every bound exactly.
    fn rollout(&mut self, problem: &TOProblem, z: &[f64]) {
        let n = problem.n_knots;
        let h = problem.h;
        let lim = self.model.steer_limit;
        self.knots.clear();
        self.controls.clear();
        self.saturated.clear();
        self.knots.push(problem.q0);
        for k in 0..n {
            let cmd = self.controls_at(z, k);
            let q = self.knots[k];
            let tf = q[TF] + h * cmd[1];
            let bound = lim.max(q[TF].abs());
            let tf_sat = tf.clamp(-bound, bound);
            let sat = tf_sat != tf;
            let u = if sat { [cmd[0], (tf_sat - q[TF]) / h] } else { cmd };
            let mut next = self.model.implicit_step(&q, &u, h);
            if sat {
                next[TF] = tf_sat;
            }
            self.knots.push(next);
            self.controls.push(u);
            self.saturated.push(sat);
        }
    }

    fn cost_only(&mut self, problem: &TOProblem, z: &[f64]) -> f64 {
        self.rollout(problem, z);
        problem.cost(&self.knots[problem.n_knots])
    }

    /// Cost and its gradient with respect to the normalized controls.
    fn cost_and_grad(&mut self, problem: &TOProblem, z: &[f64], grad: &mut [f64]) -> f64 {
        self.rollout(problem, z);
        let n = problem.n_knots;
        let h = problem.h;
        let l = self.model.wheelbase;
        let w = &problem.weights;
        let qn = self.knots[n];
        let cost = problem.cost(&qn);

        // Adjoint of the terminal knot.
        let ax = -2.0 * w.alpha * (problem.goal.x - qn[X]);
        let ay = -2.0 * w.beta * (problem.goal.y - qn[Y]);
        let mut ath = -2.0 * w.gamma_theta * wrap_angle(problem.goal_heading() - qn[TH]);
        let mut atf = 0.0;

        for k in (0..n).rev() {
            let u = self.controls[k];
            let q1 = &self.knots[k + 1];
            let (s, c) = q1[TH].sin_cos();
            let t = q1[TF].tan();
            // heading adjoint picks up the position dependence on the new heading
            let ath_tot = ath + ax * (-h * u[0] * s) + ay * (h * u[0] * c);
            let g_v = ax * h * c + ay * h * s + ath_tot * h / l * t;
            let mut atf_tot = atf + ath_tot * h * u[0] / l * (1.0 + t * t);
            if self.saturated[k] {
                // pinned at the limit: insensitive to the command and to the
                // previous steering angle
                atf_tot = 0.0;
            }
            let g_r = atf_tot * h;
            grad[2 * k] = g_v * self.model.v_limit;
            grad[2 * k + 1] = g_r * self.model.steer_rate_limit;
            ath = ath_tot;
            atf = atf_tot;
        }
        cost
    }

    /// Cold-start guess: half speed toward the goal's side (forward if it is
    /// ahead, reverse if behind), steering held. Zero if already at the goal.
    /// Zero speed everywhere would be a stationary point for lateral goals.
    fn cold_guess(&self, problem: &TOProblem) -> Vec<f64> {
        let n = problem.n_knots;
        let dx = problem.goal.x - problem.q0[X];
        let dy = problem.goal.y - problem.q0[Y];
        let v = if dx.hypot(dy) < 1e-9 {
            0.0
        } else if wrap_angle(dy.atan2(dx) - problem.q0[TH]).abs() <= std::f64::consts::FRAC_PI_2 {
            0.5
        } else {
            -0.5
        };
        (0..n).flat_map(|_| [v, 0.0]).collect()
    }
}

/// Rounds to a 2^-32 m grid so that rotated copies of a problem, whose body
/// frame goals differ only by rounding, give the solver identical input.
fn snap(v: f64) -> f64 {
    const Q: f64 = 4_294_967_296.0;
    (v * Q).round() / Q
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
