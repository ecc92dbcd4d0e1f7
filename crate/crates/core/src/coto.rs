//! Per-step arbitration between the trajectory optimizer and the learned
//! policy, data routing, and the training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{CarFlagRun, EnvConfig, Goal, Observation, StepResult};
use crate::error::{Error, Result};
use crate::plant::{Action, CarState, PlantConfig};
use crate::policy::{ActionSample, CheckpointMeta, PolicyParams};
use crate::rl::{BcConfig, Learner, PpoBuffer, PpoConfig, SlPair, Source, Transition, UpdateRecord, UPDATE_HEADER};
use crate::seeding::{rng_for, Domain};
use crate::trajopt::{SolverConfig, TOModel, TOSolution, TrajectoryOptimizer};

/// Which action sources exist and how they are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CotoConfig {
    pub horizon_h: usize,
    pub gate_enabled: bool,
    pub to_enabled: bool,
    pub rl_enabled: bool,
    /// Sample RL actions; otherwise use the distribution mode.
    pub stochastic: bool,
}

impl Default for CotoConfig {
    fn default() -> Self {
        Self { horizon_h: 1, gate_enabled: true, to_enabled: true, rl_enabled: true, stochastic: true }
    }
}

impl CotoConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.to_enabled && !self.rl_enabled {
            return Err(Error::Config("coto: at least one of to_enabled and rl_enabled must be set".into()));
        }
        if self.horizon_h == 0 {
            return Err(Error::Config("coto.horizon_h must be at least 1".into()));
        }
        Ok(())
    }

    fn gated(&self) -> bool {
        self.gate_enabled && self.to_enabled && self.rl_enabled
    }
}

/// Receding-horizon TO with a warm start carried between steps.
#[derive(Debug, Clone)]
pub struct ToController {
    solver: TrajectoryOptimizer,
    warm: Option<TOSolution>,
}

impl ToController {
    pub fn new(plant: &PlantConfig, cfg: SolverConfig) -> Self {
        Self { solver: TrajectoryOptimizer::new(TOModel::from_plant(plant), cfg), warm: None }
    }

    /// Forgets the warm start (episode boundary).
    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn solve_at(&mut self, state: &CarState, goal: Goal) -> Result<TOSolution> {
        let problem = self.solver.problem(state, goal);
        let warm = self.warm.as_ref().map(|w| self.solver.shift_warm_start(w));
        let sol = self.solver.solve(&problem, warm.as_ref())?;
        self.warm = Some(sol.clone());
        Ok(sol)
    }

    pub fn act(&mut self, env: &CarFlagRun) -> Result<(Action, TOSolution)> {
        let sol = self.solve_at(env.state(), *env.goal())?;
        Ok((sol.first_action(), sol))
    }
}

/// Outcome of one arbitration. Rewards are one-step shaped rewards for
/// `horizon == 1`, cumulative over the horizon otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub a_rl: Option<ActionSample>,
    pub a_to: Option<Action>,
    pub r_rl: Option<f64>,
    pub r_to: Option<f64>,
    pub chosen: Source,
    /// `r_chosen - r_other`; zero when only one source was evaluated.
    pub margin: f64,
    pub horizon: usize,
    pub to_converged: Option<bool>,
}

impl GateDecision {
    pub fn action(&self) -> Action {
        match self.chosen {
            Source::Rl => self.a_rl.expect("rl action present").action_env,
            Source::To => self.a_to.expect("to action present"),
        }
    }

    pub fn chosen_reward(&self) -> Option<f64> {
        match self.chosen {
            Source::Rl => self.r_rl,
            Source::To => self.r_to,
        }
    }
}

fn rl_action<R: Rng>(policy: &PolicyParams, obs: &Observation, stochastic: bool, rng: &mut R) -> Result<ActionSample> {
    if stochastic {
        policy.act_stochastic(obs, rng)
    } else {
        policy.act_deterministic(obs)
    }
}

fn decide(a_rl: Option<ActionSample>, a_to: Option<(Action, bool)>, r_rl: Option<f64>, r_to: Option<f64>, horizon: usize) -> GateDecision {
    let (chosen, margin) = match (r_rl, r_to) {
        (Some(rl), Some(to)) if rl >= to => (Source::Rl, rl - to),
        (Some(rl), Some(to)) => (Source::To, to - rl),
        _ if a_rl.is_some() => (Source::Rl, 0.0),
        _ => (Source::To, 0.0),
    };
    GateDecision {
        a_rl,
        a_to: a_to.map(|a| a.0),
        r_rl,
        r_to,
        chosen,
        margin,
        horizon,
        to_converged: a_to.map(|a| a.1),
    }
}

/// One-step arbitration: both candidates are scored by peeking the shaped
/// reward; ties go to RL. With a single enabled source no peeking happens.
pub fn gate_decide<R: Rng>(
    env: &CarFlagRun,
    policy: Option<&PolicyParams>,
    to: Option<&mut ToController>,
    cfg: &CotoConfig,
    rng: &mut R,
) -> Result<GateDecision> {
    if env.is_done() {
        return Err(Error::EpisodeDone);
    }
    let obs = env.observation();
    let a_to = match (cfg.to_enabled, to) {
        (true, Some(c)) => {
            let (a, sol) = c.act(env)?;
            Some((a, sol.converged))
        }
        (true, None) => return Err(Error::InvalidState("TO enabled without a controller".into())),
        _ => None,
    };
    let a_rl = match (cfg.rl_enabled, policy) {
        (true, Some(p)) => Some(rl_action(p, &obs, cfg.stochastic, rng)?),
        (true, None) => return Err(Error::InvalidState("RL enabled without a policy".into())),
        _ => None,
    };
    if !cfg.gated() {
        return Ok(decide(a_rl, a_to, None, None, 1));
    }
    let r_rl = env.peek_reward(a_rl.unwrap().action_env)?;
    let r_to = env.peek_reward(a_to.unwrap().0)?;
    Ok(decide(a_rl, a_to, Some(r_rl), Some(r_to), 1))
}

/// Arbitration by cumulative shaped reward over `h` simulated steps from
/// each source, truncated to the episode remainder. Only the first action of
/// the winner is meant to be committed. `h = 1` reproduces [`gate_decide`].
pub fn select_action_horizon<R: Rng>(
    env: &CarFlagRun,
    policy: &PolicyParams,
    to: &mut ToController,
    h: usize,
    stochastic: bool,
    rng: &mut R,
) -> Result<GateDecision> {
    if h == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    if env.is_done() {
        return Err(Error::EpisodeDone);
    }
    let h = h.min(env.remaining_steps());
    let (first_to, sol) = to.act(env)?;
    let first_rl = rl_action(policy, &env.observation(), stochastic, rng)?;

    let mut sim = env.lookahead();
    let mut r_rl = sim.step(first_rl.action_env)?;
    for _ in 1..h {
        let a = rl_action(policy, &sim.observation(), stochastic, rng)?;
        r_rl += sim.step(a.action_env)?;
    }

    let mut sim = env.lookahead();
    let mut r_to = sim.step(first_to)?;
    if h > 1 {
        let mut planner = to.clone();
        for _ in 1..h {
            let sol = planner.solve_at(sim.state(), *sim.goal())?;
            r_to += sim.step(sol.first_action())?;
        }
    }
    Ok(decide(Some(first_rl), Some((first_to, sol.converged)), Some(r_rl), Some(r_to), h))
}

/// Data produced by one committed step.
#[derive(Debug, Clone, PartialEq)]
pub enum Routed {
    Ppo(Transition),
    Sl(SlPair),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateStep {
    pub decision: GateDecision,
    pub result: StepResult,
    pub routed: Routed,
}

/// Decides, commits the winner to the real environment and routes the
/// step: RL wins become PPO transitions, TO wins become supervised pairs.
///
/// For one-step gating the executed action's simulated reward is checked
/// against the TO action's, and the committed reward against the peeked one.
pub fn gate_step<R: Rng>(
    env: &mut CarFlagRun,
    policy: Option<&PolicyParams>,
    to: Option<&mut ToController>,
    cfg: &CotoConfig,
    rng: &mut R,
) -> Result<GateStep> {
    let obs = env.observation();
    let decision = if cfg.horizon_h > 1 && cfg.gated() {
        let p = policy.ok_or_else(|| Error::InvalidState("RL enabled without a policy".into()))?;
        let c = to.ok_or_else(|| Error::InvalidState("TO enabled without a controller".into()))?;
        select_action_horizon(env, p, c, cfg.horizon_h, cfg.stochastic, rng)?
    } else {
        gate_decide(env, policy, to, cfg, rng)?
    };
    let result = env.step(decision.action())?;
    if decision.horizon == 1 {
        if let (Some(chosen), Some(r_to)) = (decision.chosen_reward(), decision.r_to) {
            if chosen < r_to || result.reward != chosen {
                return Err(Error::InvalidState(format!(
                    "gate invariant violated: executed {} (peeked {chosen}) vs TO {r_to}",
                    result.reward
                )));
            }
        }
    }
    let routed = match decision.chosen {
        Source::Rl => {
            let s = decision.a_rl.unwrap();
            Routed::Ppo(Transition {
                obs,
                action_unit: s.action_unit,
                log_prob_old: s.log_prob,
                reward: result.reward,
                value_old: s.value,
                done: result.done,
                segment_id: 0,
                source: Source::Rl,
            })
        }
        Source::To => {
            let bounds = crate::policy::ActionBounds::from_plant(env.plant_config());
            Routed::Sl(SlPair::new(obs, bounds.to_unit(decision.a_to.unwrap())))
        }
    };
    Ok(GateStep { decision, result, routed })
}

/// Everything the training loop needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub run_id: String,
    pub seed: u64,
    pub total_timesteps: u64,
    /// Checkpoint every this many timesteps (rounded up to a rollout
    /// boundary); 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
    pub hidden: Vec<usize>,
    pub plant: PlantConfig,
    pub env: EnvConfig,
    pub solver: SolverConfig,
    pub ppo: PpoConfig,
    pub bc: BcConfig,
    pub coto: CotoConfig,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.env.validate()?;
        self.solver.validate()?;
        self.ppo.validate()?;
        self.bc.validate()?;
        self.coto.validate()?;
        if !self.coto.rl_enabled {
            return Err(Error::Config("training needs rl_enabled".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("policy.hidden must list positive layer widths".into()));
        }
        Ok(())
    }
}

/// One row of the training log, written after each rollout's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub timestep: u64,
    pub ep_reward_mean: f64,
    pub rl_fraction: f64,
    pub mean_gate_margin: f64,
    pub to_converged_rate: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub const TRAIN_HEADER: &str =
    "timestep,ep_reward_mean,rl_fraction,mean_gate_margin,to_converged_rate,surrogate,value_loss,entropy";

fn csv_f(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.timestep,
            csv_f(self.ep_reward_mean),
            csv_f(self.rl_fraction),
            csv_f(self.mean_gate_margin),
            csv_f(self.to_converged_rate),
            csv_f(self.surrogate),
            csv_f(self.value_loss),
            csv_f(self.entropy)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(Error::InvalidState(format!("training log row has {} fields", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            if s.is_empty() {
                Ok(f64::NAN)
            } else {
                s.parse().map_err(|_| Error::InvalidState(format!("bad number {s:?} in training log")))
            }
        };
        Ok(Self {
            timestep: f[0].parse().map_err(|_| Error::InvalidState(format!("bad timestep {:?}", f[0])))?,
            ep_reward_mean: num(f[1])?,
            rl_fraction: num(f[2])?,
            mean_gate_margin: num(f[3])?,
            to_converged_rate: num(f[4])?,
            surrogate: num(f[5])?,
            value_loss: num(f[6])?,
            entropy: num(f[7])?,
        })
    }
}

/// Reads a training log written by [`train`].
pub fn read_train_log(path: &Path) -> Result<Vec<LogRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRAIN_HEADER => {}
        _ => return Err(Error::InvalidState(format!("{}: missing training log header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(LogRow::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeRecord {
    pub index: u64,
    /// Timestep at which the episode ended.
    pub end_timestep: u64,
    pub reward: f64,
    pub goals: usize,
    pub rl_steps: usize,
    pub steps: usize,
}

pub const EPISODE_HEADER: &str = "episode,end_timestep,reward,goals,rl_steps,steps";

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub rows: Vec<LogRow>,
    pub updates: Vec<UpdateRecord>,
    pub episodes: Vec<EpisodeRecord>,
    /// Whether the RL action was executed, per timestep.
    pub rl_chosen: Vec<bool>,
    /// Steps where both candidates were scored and the worst-case check ran.
    pub gate_checks: u64,
    pub learner: Learner,
    pub checkpoints: Vec<PathBuf>,
}

struct Outputs {
    dir: PathBuf,
    train: BufWriter<File>,
    updates: BufWriter<File>,
    episodes: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str, header: &str| -> Result<BufWriter<File>> {
            let mut w = BufWriter::new(File::create(dir.join(name))?);
            writeln!(w, "{header}")?;
            Ok(w)
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            train: open("train.csv", TRAIN_HEADER)?,
            updates: open("updates.csv", UPDATE_HEADER)?,
            episodes: open("episodes.csv", EPISODE_HEADER)?,
        })
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Algorithm 1: alternate `rollout_len`-step collection through the gate
/// with PPO updates on RL-chosen steps and BC updates on TO-chosen steps.
/// When `out` is given, logs and checkpoints are written there.
pub fn train(settings: &TrainSettings, out: Option<&Path>) -> Result<TrainSummary> {
    settings.validate()?;
    train_inner(settings, out).map_err(|e| e.context(format!("run {} (seed {})", settings.run_id, settings.seed)))
}

fn train_inner(settings: &TrainSettings, out: Option<&Path>) -> Result<TrainSummary> {
    let s = settings;
    let mut outputs = out.map(Outputs::create).transpose()?;
    let params = PolicyParams::new(&s.plant, &s.hidden, &mut rng_for(Domain::PolicyInit, s.seed, 0))?;
    let mut learner = Learner::new(params, &s.ppo, &s.bc);
    let env_cfg = EnvConfig { rng_seed: s.seed, ..s.env };
    let mut to = s.coto.to_enabled.then(|| ToController::new(&s.plant, s.solver));
    let mut act_rng = rng_for(Domain::ActionSampling, s.seed, 0);

    let mut episode_index = 0u64;
    let (mut env, _) = CarFlagRun::reset(s.plant, env_cfg, episode_index);
    let mut ep_reward = 0.0;
    let mut ep_rl = 0usize;

    let mut buffer = PpoBuffer::default();
    let mut sl: Vec<SlPair> = Vec::new();
    let mut summary = TrainSummary {
        rows: Vec::new(),
        updates: Vec::new(),
        episodes: Vec::new(),
        rl_chosen: Vec::with_capacity(s.total_timesteps as usize),
        gate_checks: 0,
        learner: learner.clone(),
        checkpoints: Vec::new(),
    };
    let mut next_ckpt = if s.checkpoint_interval == 0 { u64::MAX } else { s.checkpoint_interval };

    let mut t = 0u64;
    while t < s.total_timesteps {
        let rollout_start = t;
        let ep_start = summary.episodes.len();
        let mut margins = Vec::new();
        let mut converged = Vec::new();
        let mut rl_count = 0usize;
        let steps = (s.ppo.rollout_len as u64).min(s.total_timesteps - t);
        for _ in 0..steps {
            let step = gate_step(&mut env, Some(&learner.params), to.as_mut(), &s.coto, &mut act_rng)?;
            t += 1;
            if step.decision.r_rl.is_some() && step.decision.r_to.is_some() {
                summary.gate_checks += 1;
                margins.push(step.decision.margin);
            }
            if let Some(c) = step.decision.to_converged {
                converged.push(if c { 1.0 } else { 0.0 });
            }
            ep_reward += step.result.reward;
            summary.rl_chosen.push(step.decision.chosen == Source::Rl);
            match step.routed {
                Routed::Ppo(tr) => {
                    rl_count += 1;
                    ep_rl += 1;
                    buffer.push(tr);
                    if tr.done {
                        buffer.close_segment(0.0);
                    }
                }
                Routed::Sl(pair) => {
                    // the RL segment, if any, was cut by this TO step
                    if buffer.is_open() {
                        buffer.close_segment(step.decision.a_rl.map_or(0.0, |a| a.value));
                    }
                    sl.push(pair);
                }
            }
            if step.result.done {
                let rec = EpisodeRecord {
                    index: episode_index,
                    end_timestep: t,
                    reward: ep_reward,
                    goals: env.goals_reached(),
                    rl_steps: ep_rl,
                    steps: env.steps(),
                };
                summary.episodes.push(rec);
                episode_index += 1;
                env = CarFlagRun::reset(s.plant, env_cfg, episode_index).0;
                if let Some(c) = to.as_mut() {
                    c.reset();
                }
                ep_reward = 0.0;
                ep_rl = 0;
            }
        }
        if buffer.is_open() {
            buffer.close_segment(learner.params.value(&env.observation())?);
        }

        let update = summary.updates.len();
        let mut rec = UpdateRecord { update, n_ppo: buffer.len(), n_sl: sl.len(), ..Default::default() };
        if !buffer.is_empty() {
            let mut rng = rng_for(Domain::Minibatch, s.seed, 2 * update as u64);
            rec.ppo = learner.ppo_update(&buffer, &s.ppo, &mut rng)?;
        }
        if !sl.is_empty() && s.coto.rl_enabled {
            let mut rng = rng_for(Domain::Minibatch, s.seed, 2 * update as u64 + 1);
            rec.bc = learner.bc_update(&sl, &s.bc, &mut rng)?;
        }
        buffer.clear();
        if !s.bc.accumulate {
            sl.clear();
        }

        let no_ppo = rec.n_ppo == 0;
        let pick = |v: f64| if no_ppo { f64::NAN } else { v };
        let row = LogRow {
            timestep: t,
            ep_reward_mean: mean(summary.episodes[ep_start..].iter().map(|e| e.reward)),
            rl_fraction: rl_count as f64 / (t - rollout_start) as f64,
            mean_gate_margin: mean(margins.into_iter()),
            to_converged_rate: mean(converged.into_iter()),
            surrogate: pick(rec.ppo.surrogate),
            value_loss: pick(rec.ppo.value_loss),
            entropy: pick(rec.ppo.entropy),
        };
        if let Some(o) = outputs.as_mut() {
            writeln!(o.train, "{}", row.to_csv())?;
            rec.write_row(&mut o.updates)?;
            for e in &summary.episodes[ep_start..] {
                writeln!(
                    o.episodes,
                    "{},{},{},{},{},{}",
                    e.index, e.end_timestep, e.reward, e.goals, e.rl_steps, e.steps
                )?;
            }
            if t >= next_ckpt || t == s.total_timesteps {
                let path = o.dir.join(format!("ckpt_{t}.json"));
                let meta = CheckpointMeta { run_id: s.run_id.clone(), timestep: t };
                learner.params.save(&path, meta, Some((&learner.actor_opt, &learner.critic_opt)))?;
                summary.checkpoints.push(path);
                while next_ckpt <= t {
                    next_ckpt = next_ckpt.saturating_add(s.checkpoint_interval.max(1));
                }
            }
        }
        summary.rows.push(row);
        summary.updates.push(rec);
    }
    if let Some(mut o) = outputs {
        o.train.flush()?;
        o.updates.flush()?;
        o.episodes.flush()?;
    }
    summary.learner = learner;
    Ok(summary)
}

/// Result of one evaluation episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub reward: f64,
    pub rl_steps: usize,
    pub steps: usize,
    pub goals: usize,
}

/// Runs one episode without learning.
pub fn run_episode(
    mut env: CarFlagRun,
    policy: Option<&PolicyParams>,
    mut to: Option<ToController>,
    cfg: &CotoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome> {
    let mut out = EpisodeOutcome { reward: 0.0, rl_steps: 0, steps: 0, goals: 0 };
    while !env.is_done() {
        let step = gate_step(&mut env, policy, to.as_mut(), cfg, rng)?;
        out.reward += step.result.reward;
        out.steps += 1;
        if step.decision.chosen == Source::Rl {
            out.rl_steps += 1;
        }
    }
    out.goals = env.goals_reached();
    Ok(out)
}
