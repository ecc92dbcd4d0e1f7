//! Experiment configuration, the five comparison arms, training and
//! evaluation runs, manifests and SVG plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coto::{read_train_log, run_episode, train, CotoConfig, LogRow, ToController, TrainSettings, TrainSummary};
use crate::env::{CarFlagRun, EnvConfig};
use crate::error::{Error, Result};
use crate::plant::PlantConfig;
use crate::policy::{ActionBounds, PolicyParams};
use crate::rl::{BcConfig, PpoConfig};
use crate::seeding::{rng_for, Domain};
use crate::trajopt::{SolverConfig, StepRule};

pub const VERSION: &str = env!("COTO_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    PurePpo,
    PureTo,
    CotoPpo,
    CotoPolicyOnly,
    CotoPurePpo,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::PurePpo, Arm::PureTo, Arm::CotoPpo, Arm::CotoPolicyOnly, Arm::CotoPurePpo];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::PurePpo => "pure_ppo",
            Arm::PureTo => "pure_to",
            Arm::CotoPpo => "coto_ppo",
            Arm::CotoPolicyOnly => "coto_policy_only",
            Arm::CotoPurePpo => "coto_pure_ppo",
        }
    }

    /// Gate configuration used when this arm acts.
    pub fn coto_config(self, stochastic: bool, horizon_h: usize) -> CotoConfig {
        let base = CotoConfig { horizon_h, stochastic, ..CotoConfig::default() };
        match self {
            Arm::PurePpo | Arm::CotoPolicyOnly => CotoConfig { to_enabled: false, gate_enabled: false, ..base },
            Arm::PureTo => CotoConfig { rl_enabled: false, gate_enabled: false, ..base },
            Arm::CotoPpo | Arm::CotoPurePpo => base,
        }
    }

    /// Arms with their own training loop.
    pub fn trains(self) -> bool {
        matches!(self, Arm::PurePpo | Arm::CotoPpo)
    }

    pub fn needs_policy(self) -> bool {
        self != Arm::PureTo
    }

    pub fn is_gated(self) -> bool {
        matches!(self, Arm::CotoPpo | Arm::CotoPurePpo)
    }
}

impl FromStr for Arm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}; expected one of pure_ppo, pure_to, coto_ppo, coto_policy_only, coto_pure_ppo")))
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Deterministic,
    Stochastic,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Deterministic => "det",
            EvalMode::Stochastic => "stoch",
        }
    }
}

impl FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "det" | "deterministic" => Ok(EvalMode::Deterministic),
            "stoch" | "stochastic" => Ok(EvalMode::Stochastic),
            _ => Err(Error::Config(format!("unknown eval mode {s:?}; expected det or stoch"))),
        }
    }
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub arm: Arm,
    pub total_timesteps: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub checkpoint_interval: u64,
    pub eval_trials: usize,
    pub eval_workers: usize,
    pub eval_seed: u64,
    pub hidden: Vec<usize>,
    pub horizon_h: usize,
    pub plant: PlantConfig,
    pub env: EnvConfig,
    pub solver: SolverConfig,
    pub ppo: PpoConfig,
    pub bc: BcConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arm: Arm::CotoPpo,
            total_timesteps: 300_000,
            seeds: vec![0],
            out_dir: PathBuf::from("runs/default"),
            checkpoint_interval: 100_000,
            eval_trials: 100,
            eval_workers: 1,
            eval_seed: 1000,
            hidden: vec![64, 64],
            horizon_h: 1,
            plant: PlantConfig::default(),
            env: EnvConfig::default(),
            solver: SolverConfig::default(),
            ppo: PpoConfig::default(),
            bc: BcConfig::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?} as {}", std::any::type_name::<T>())))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one `section.field` key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let k = key.trim();
        match k {
            "run.arm" => self.arm = v.parse()?,
            "run.total_timesteps" => self.total_timesteps = parse_num(k, v)?,
            "run.seeds" => self.seeds = parse_list(k, v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "run.checkpoint_interval" => self.checkpoint_interval = parse_num(k, v)?,
            "eval.trials" => self.eval_trials = parse_num(k, v)?,
            "eval.workers" => self.eval_workers = parse_num(k, v)?,
            "eval.seed" => self.eval_seed = parse_num(k, v)?,
            "policy.hidden" => self.hidden = parse_list(k, v)?,
            "coto.horizon_h" => self.horizon_h = parse_num(k, v)?,
            "plant.wheelbase" => self.plant.wheelbase = parse_num(k, v)?,
            "plant.v_limit" => self.plant.v_limit = parse_num(k, v)?,
            "plant.steer_limit" => self.plant.steer_limit = parse_num(k, v)?,
            "plant.tau_v" => self.plant.tau_v = parse_num(k, v)?,
            "plant.steer_rate_limit" => self.plant.steer_rate_limit = parse_num(k, v)?,
            "plant.dt" => self.plant.dt = parse_num(k, v)?,
            "env.goal_radius" => self.env.goal_radius = parse_num(k, v)?,
            "env.goal_square_half" => self.env.goal_square_half = parse_num(k, v)?,
            "env.episode_seconds" => self.env.episode_seconds = parse_num(k, v)?,
            "env.shaping_gamma" => self.env.shaping_gamma = parse_num(k, v)?,
            "trajopt.n_knots" => self.solver.n_knots = parse_num(k, v)?,
            "trajopt.h" => self.solver.h = parse_num(k, v)?,
            "trajopt.alpha" => self.solver.weights.alpha = parse_num(k, v)?,
            "trajopt.beta" => self.solver.weights.beta = parse_num(k, v)?,
            "trajopt.gamma_theta" => self.solver.weights.gamma_theta = parse_num(k, v)?,
            "trajopt.max_iters_cold" => self.solver.max_iters_cold = parse_num(k, v)?,
            "trajopt.max_iters_warm" => self.solver.max_iters_warm = parse_num(k, v)?,
            "trajopt.initial_step" => self.solver.initial_step = parse_num(k, v)?,
            "trajopt.step_rule" => {
                self.solver.step_rule = match v {
                    "fixed" => StepRule::Fixed,
                    "spectral" => StepRule::Spectral,
                    _ => return Err(Error::Config(format!("{k}: expected fixed or spectral, got {v:?}"))),
                }
            }
            "trajopt.momentum" => self.solver.momentum = parse_num(k, v)?,
            "trajopt.armijo" => self.solver.armijo = parse_num(k, v)?,
            "trajopt.max_backtracks" => self.solver.max_backtracks = parse_num(k, v)?,
            "trajopt.grad_tol" => self.solver.grad_tol = parse_num(k, v)?,
            "trajopt.cost_tol" => self.solver.cost_tol = parse_num(k, v)?,
            "ppo.gamma" => self.ppo.gamma = parse_num(k, v)?,
            "ppo.lambda_gae" => self.ppo.lambda_gae = parse_num(k, v)?,
            "ppo.clip_eps" => self.ppo.clip_eps = parse_num(k, v)?,
            "ppo.epochs" => self.ppo.epochs = parse_num(k, v)?,
            "ppo.minibatch" => self.ppo.minibatch = parse_num(k, v)?,
            "ppo.rollout_len" => self.ppo.rollout_len = parse_num(k, v)?,
            "ppo.value_coef" => self.ppo.value_coef = parse_num(k, v)?,
            "ppo.entropy_coef" => self.ppo.entropy_coef = parse_num(k, v)?,
            "ppo.lr" => self.ppo.lr = parse_num(k, v)?,
            "ppo.max_grad_norm" => self.ppo.max_grad_norm = parse_num(k, v)?,
            "bc.epochs" => self.bc.epochs = parse_num(k, v)?,
            "bc.minibatch" => self.bc.minibatch = parse_num(k, v)?,
            "bc.lr" => self.bc.lr = parse_num(k, v)?,
            "bc.max_grad_norm" => self.bc.max_grad_norm = parse_num(k, v)?,
            "bc.accumulate" => self.bc.accumulate = parse_bool(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {k:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_config(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config(e))))
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let s = &self.solver;
        let p = &self.ppo;
        let rows: Vec<(&str, String)> = vec![
            ("run.arm", self.arm.to_string()),
            ("run.total_timesteps", self.total_timesteps.to_string()),
            ("run.seeds", join(&self.seeds)),
            ("run.out_dir", self.out_dir.display().to_string()),
            ("run.checkpoint_interval", self.checkpoint_interval.to_string()),
            ("eval.trials", self.eval_trials.to_string()),
            ("eval.workers", self.eval_workers.to_string()),
            ("eval.seed", self.eval_seed.to_string()),
            ("policy.hidden", join(&self.hidden)),
            ("coto.horizon_h", self.horizon_h.to_string()),
            ("plant.wheelbase", self.plant.wheelbase.to_string()),
            ("plant.v_limit", self.plant.v_limit.to_string()),
            ("plant.steer_limit", self.plant.steer_limit.to_string()),
            ("plant.tau_v", self.plant.tau_v.to_string()),
            ("plant.steer_rate_limit", self.plant.steer_rate_limit.to_string()),
            ("plant.dt", self.plant.dt.to_string()),
            ("env.goal_radius", self.env.goal_radius.to_string()),
            ("env.goal_square_half", self.env.goal_square_half.to_string()),
            ("env.episode_seconds", self.env.episode_seconds.to_string()),
            ("env.shaping_gamma", self.env.shaping_gamma.to_string()),
            ("trajopt.n_knots", s.n_knots.to_string()),
            ("trajopt.h", s.h.to_string()),
            ("trajopt.alpha", s.weights.alpha.to_string()),
            ("trajopt.beta", s.weights.beta.to_string()),
            ("trajopt.gamma_theta", s.weights.gamma_theta.to_string()),
            ("trajopt.max_iters_cold", s.max_iters_cold.to_string()),
            ("trajopt.max_iters_warm", s.max_iters_warm.to_string()),
            ("trajopt.initial_step", s.initial_step.to_string()),
            ("trajopt.step_rule", match s.step_rule {
                StepRule::Fixed => "fixed".into(),
                StepRule::Spectral => "spectral".into(),
            }),
            ("trajopt.momentum", s.momentum.to_string()),
            ("trajopt.armijo", s.armijo.to_string()),
            ("trajopt.max_backtracks", s.max_backtracks.to_string()),
            ("trajopt.grad_tol", s.grad_tol.to_string()),
            ("trajopt.cost_tol", s.cost_tol.to_string()),
            ("ppo.gamma", p.gamma.to_string()),
            ("ppo.lambda_gae", p.lambda_gae.to_string()),
            ("ppo.clip_eps", p.clip_eps.to_string()),
            ("ppo.epochs", p.epochs.to_string()),
            ("ppo.minibatch", p.minibatch.to_string()),
            ("ppo.rollout_len", p.rollout_len.to_string()),
            ("ppo.value_coef", p.value_coef.to_string()),
            ("ppo.entropy_coef", p.entropy_coef.to_string()),
            ("ppo.lr", p.lr.to_string()),
            ("ppo.max_grad_norm", p.max_grad_norm.to_string()),
            ("bc.epochs", self.bc.epochs.to_string()),
            ("bc.minibatch", self.bc.minibatch.to_string()),
            ("bc.lr", self.bc.lr.to_string()),
            ("bc.max_grad_norm", self.bc.max_grad_norm.to_string()),
            ("bc.accumulate", self.bc.accumulate.to_string()),
        ];
        rows.into_iter().fold(String::new(), |mut out, (k, v)| {
            let _ = writeln!(out, "{k} = {v}");
            out
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.env.validate()?;
        self.solver.validate()?;
        self.ppo.validate()?;
        self.bc.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must list at least one seed".into()));
        }
        if self.eval_trials == 0 || self.eval_workers == 0 {
            return Err(Error::Config("eval.trials and eval.workers must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("policy.hidden must list positive widths".into()));
        }
        if self.horizon_h == 0 {
            return Err(Error::Config("coto.horizon_h must be at least 1".into()));
        }
        if self.arm.trains() && self.total_timesteps == 0 {
            return Err(Error::Config("run.total_timesteps must be positive for training arms".into()));
        }
        Ok(())
    }

    pub fn train_settings(&self, seed: u64, run_id: String) -> TrainSettings {
        TrainSettings {
            run_id,
            seed,
            total_timesteps: self.total_timesteps,
            checkpoint_interval: self.checkpoint_interval,
            hidden: self.hidden.clone(),
            plant: self.plant,
            env: self.env,
            solver: self.solver,
            ppo: self.ppo,
            bc: self.bc,
            coto: self.arm.coto_config(true, self.horizon_h),
        }
    }

    /// Directory of one seed's run.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        if self.seeds.len() == 1 {
            self.out_dir.clone()
        } else {
            self.out_dir.join(format!("seed_{seed}"))
        }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub arm: Arm,
    pub seed: u64,
    /// sha256 of `config.cfg` in the run directory.
    pub config_sha256: String,
    pub version: String,
    pub total_timesteps: u64,
    pub to_baseline_reward_mean: f64,
    pub checkpoints: Vec<String>,
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(run_dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arm: Arm,
    pub mode: EvalMode,
    pub trials: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Percent of steps where the RL action ran; only for gated arms.
    pub rl_percent: Option<f64>,
    pub rewards: Vec<f64>,
}

impl EvalReport {
    pub fn sem(&self) -> f64 {
        self.reward_std / (self.trials as f64).sqrt()
    }
}

/// What to evaluate.
#[derive(Debug, Clone)]
pub struct EvalRequest<'a> {
    pub arm: Arm,
    pub policy: Option<&'a PolicyParams>,
    pub trials: usize,
    pub mode: EvalMode,
    pub seed: u64,
    pub workers: usize,
    pub plant: PlantConfig,
    pub env: EnvConfig,
    pub solver: SolverConfig,
    pub horizon_h: usize,
}

impl<'a> EvalRequest<'a> {
    pub fn from_config(cfg: &RunConfig, arm: Arm, policy: Option<&'a PolicyParams>, mode: EvalMode) -> Self {
        Self {
            arm,
            policy,
            trials: cfg.eval_trials,
            mode,
            seed: cfg.eval_seed,
            workers: cfg.eval_workers,
            plant: cfg.plant,
            env: cfg.env,
            solver: cfg.solver,
            horizon_h: cfg.horizon_h,
        }
    }
}

/// Runs `trials` fresh episodes from the evaluation seed domains, in
/// parallel, merged by trial index.
pub fn run_eval(req: &EvalRequest) -> Result<EvalReport> {
    if req.trials == 0 || req.workers == 0 {
        return Err(Error::Config("eval needs at least one trial and one worker".into()));
    }
    if req.arm.needs_policy() {
        let p = req.policy.ok_or_else(|| Error::Config(format!("arm {} needs a policy checkpoint", req.arm)))?;
        if p.bounds != ActionBounds::from_plant(&req.plant) {
            return Err(Error::Checkpoint("checkpoint action bounds do not match the plant config".into()));
        }
    }
    let cfg = req.arm.coto_config(req.mode == EvalMode::Stochastic, req.horizon_h);
    let env_cfg = EnvConfig { rng_seed: req.seed, ..req.env };
    let trial = |i: usize| -> Result<(f64, usize, usize)> {
        let env = CarFlagRun::reset_with_rng(req.plant, env_cfg, rng_for(Domain::EvalEpisode, req.seed, i as u64)).0;
        let to = cfg.to_enabled.then(|| ToController::new(&req.plant, req.solver));
        let mut rng = rng_for(Domain::EvalSampling, req.seed, i as u64);
        let policy = if cfg.rl_enabled { req.policy } else { None };
        let o = run_episode(env, policy, to, &cfg, &mut rng)?;
        Ok((o.reward, o.rl_steps, o.steps))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(req.workers)
        .build()
        .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))?;
    let results: Vec<(f64, usize, usize)> =
        pool.install(|| (0..req.trials).into_par_iter().map(trial).collect::<Result<Vec<_>>>())?;
    let rewards: Vec<f64> = results.iter().map(|r| r.0).collect();
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = if rewards.len() > 1 {
        rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let rl_percent = req.arm.is_gated().then(|| {
        let rl: usize = results.iter().map(|r| r.1).sum();
        let steps: usize = results.iter().map(|r| r.2).sum();
        100.0 * rl as f64 / steps as f64
    });
    Ok(EvalReport { arm: req.arm, mode: req.mode, trials: req.trials, reward_mean: mean, reward_std: var.sqrt(), rl_percent, rewards })
}

/// Artifacts of one seed's training run.
#[derive(Debug)]
pub struct TrainArtifacts {
    pub run_dir: PathBuf,
    pub manifest: Manifest,
    pub summary: Option<TrainSummary>,
    pub baseline: EvalReport,
}

/// Trains every configured seed (or, for `pure_to`, only evaluates) and
/// writes `config.cfg`, `manifest.json`, logs and checkpoints per seed.
pub fn run_train(cfg: &RunConfig) -> Result<Vec<TrainArtifacts>> {
    cfg.validate()?;
    if !cfg.arm.trains() && cfg.arm != Arm::PureTo {
        return Err(Error::Config(format!(
            "arm {} is evaluation-only; train pure_ppo or coto_ppo and evaluate the checkpoint",
            cfg.arm
        )));
    }
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.run_dir(seed);
        std::fs::create_dir_all(&dir)?;
        let mut seed_cfg = cfg.clone();
        seed_cfg.seeds = vec![seed];
        seed_cfg.out_dir = dir.clone();
        let text = seed_cfg.to_text();
        std::fs::write(dir.join("config.cfg"), &text)?;
        let run_id = dir.file_name().map_or_else(|| format!("seed_{seed}"), |n| n.to_string_lossy().into_owned());

        let baseline = run_eval(&EvalRequest::from_config(cfg, Arm::PureTo, None, EvalMode::Deterministic))?;
        let summary = if cfg.arm.trains() {
            Some(train(&cfg.train_settings(seed, run_id.clone()), Some(&dir))?)
        } else {
            std::fs::write(dir.join("eval_det.json"), serde_json::to_string_pretty(&baseline)?)?;
            None
        };
        let manifest = Manifest {
            run_id,
            arm: cfg.arm,
            seed,
            config_sha256: sha256_hex(text.as_bytes()),
            version: VERSION.to_string(),
            total_timesteps: if cfg.arm.trains() { cfg.total_timesteps } else { 0 },
            to_baseline_reward_mean: baseline.reward_mean,
            checkpoints: summary
                .as_ref()
                .map(|s| s.checkpoints.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect())
                .unwrap_or_default(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        out.push(TrainArtifacts { run_dir: dir, manifest, summary, baseline });
    }
    Ok(out)
}

/// Deterministic RNG for one-off probes (CLI gate-probe).
pub fn probe_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(crate::seeding::derive_seed(Domain::Probe, seed, 0))
}

// ---- plots ----

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;

/// Linear map from data to pixel coordinates, recorded on the SVG root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axes {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Axes {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let (x_min, x_max) = min_max(xs);
        let (mut y_min, mut y_max) = min_max(ys);
        if y_max - y_min < 1e-12 {
            y_min -= 0.5;
            y_max += 0.5;
        }
        let pad = 0.05 * (y_max - y_min);
        Self { x_min: x_min.min(0.0), x_max: if x_max > x_min { x_max } else { x_min + 1.0 }, y_min: y_min - pad, y_max: y_max + pad }
    }

    pub fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (W - 2.0 * MARGIN)
    }

    pub fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (H - 2.0 * MARGIN)
    }

    pub fn inv_x(&self, px: f64) -> f64 {
        self.x_min + (px - MARGIN) / (W - 2.0 * MARGIN) * (self.x_max - self.x_min)
    }

    pub fn inv_y(&self, py: f64) -> f64 {
        self.y_min + (H - MARGIN - py) / (H - 2.0 * MARGIN) * (self.y_max - self.y_min)
    }
}

fn min_max(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    xs.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// One curve: per-timestep mean over seeds and the min/max band.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub seeds: usize,
}

fn series(label: String, runs: &[Vec<LogRow>], field: fn(&LogRow) -> f64) -> Series {
    let n = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    let mut s = Series { label, x: Vec::new(), mean: Vec::new(), lo: Vec::new(), hi: Vec::new(), seeds: runs.len() };
    for i in 0..n {
        let vals: Vec<f64> = runs.iter().map(|r| field(&r[i])).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            continue;
        }
        s.x.push(runs[0][i].timestep as f64);
        s.mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
        s.lo.push(vals.iter().cloned().fold(f64::INFINITY, f64::min));
        s.hi.push(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    s
}

const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Renders curves, optional min/max bands and an optional dashed baseline.
pub fn render_svg(title: &str, y_label: &str, curves: &[Series], baseline: Option<f64>) -> String {
    let xs = curves.iter().flat_map(|c| c.x.iter().copied()).collect::<Vec<_>>();
    let mut ys: Vec<f64> = curves.iter().flat_map(|c| c.lo.iter().chain(&c.hi).copied()).collect();
    ys.extend(baseline);
    let ax = Axes::fit(xs.iter().copied(), ys.iter().copied());
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" data-x-min="{}" data-x-max="{}" data-y-min="{}" data-y-max="{}">"#,
        ax.x_min, ax.x_max, ax.y_min, ax.y_max
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{title}</text>"#, W / 2.0);
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let fx = ax.x_min + (ax.x_max - ax.x_min) * i as f64 / 4.0;
        let fy = ax.y_min + (ax.y_max - ax.y_min) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{}" text-anchor="middle" font-size="11">{}</text>"#, ax.px(fx), y0 + 16.0, fx.round());
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="11">{:.2}</text>"#, x0 - 4.0, ax.py(fy) + 4.0, fy);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">timesteps</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (ci, c) in curves.iter().enumerate() {
        let color = COLORS[ci % COLORS.len()];
        if c.seeds > 1 && !c.x.is_empty() {
            let mut pts: Vec<String> = c.x.iter().zip(&c.hi).map(|(x, y)| format!("{:.6},{:.6}", ax.px(*x), ax.py(*y))).collect();
            pts.extend(c.x.iter().zip(&c.lo).rev().map(|(x, y)| format!("{:.6},{:.6}", ax.px(*x), ax.py(*y))));
            let _ = writeln!(
                svg,
                r#"<polygon class="band" data-label="{}" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                c.label,
                pts.join(" ")
            );
        }
        let pts: Vec<String> = c.x.iter().zip(&c.mean).map(|(x, y)| format!("{:.6},{:.6}", ax.px(*x), ax.py(*y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="curve" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            c.label,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            x1 - 120.0,
            y1 + 14.0 * (ci as f64 + 1.0),
            c.label
        );
    }
    if let Some(b) = baseline {
        let _ = writeln!(
            svg,
            r#"<line class="baseline" data-value="{b}" x1="{x0}" y1="{:.6}" x2="{x1}" y2="{:.6}" stroke="black" stroke-dasharray="6,4"/>"#,
            ax.py(b),
            ax.py(b)
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" font-size="11">pure TO</text>"#, x0 + 4.0, ax.py(b) - 4.0);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads the runs, groups them by arm and writes `reward.svg` and
/// `rl_fraction.svg` into `out`.
pub fn emit_plots(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::Config("no run directories given".into()));
    }
    let mut groups: std::collections::BTreeMap<String, Vec<Vec<LogRow>>> = Default::default();
    let mut baselines = Vec::new();
    for dir in run_dirs {
        let rows = read_train_log(&dir.join("train.csv"))?;
        if rows.is_empty() {
            return Err(Error::InvalidState(format!("{}: empty training log", dir.display())));
        }
        let label = match read_manifest(dir) {
            Ok(m) => {
                baselines.push(m.to_baseline_reward_mean);
                m.arm.to_string()
            }
            Err(_) => dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()),
        };
        groups.entry(label).or_default().push(rows);
    }
    let baseline = (!baselines.is_empty()).then(|| baselines.iter().sum::<f64>() / baselines.len() as f64);
    let reward: Vec<Series> = groups.iter().map(|(l, r)| series(l.clone(), r, |row| row.ep_reward_mean)).collect();
    let frac: Vec<Series> = groups.iter().map(|(l, r)| series(l.clone(), r, |row| row.rl_fraction)).collect();
    std::fs::create_dir_all(out)?;
    let a = out.join("reward.svg");
    let b = out.join("rl_fraction.svg");
    std::fs::write(&a, render_svg("Episode reward mean", "reward", &reward, baseline))?;
    std::fs::write(&b, render_svg("Fraction of RL actions chosen", "rl fraction", &frac, None))?;
    Ok(vec![a, b])
}
