use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coto_core::coto::{gate_step, CotoConfig, ToController};
use coto_core::harness::{self, probe_rng, Arm, EvalMode, EvalRequest, RunConfig};
use coto_core::seeding::rng_for;
use coto_core::{CarFlagRun, CarState, Domain, EnvConfig, Error, Goal, PolicyParams};

#[derive(Parser)]
#[command(name = "coto", version = harness::VERSION, about = "Cooperative trajectory optimization + PPO experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set ppo.lr=1e-4
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> coto_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Det,
    Stoch,
    Both,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one arm for every configured seed
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Seeds; replaces run.seeds
        #[arg(long, value_delimiter = ',')]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        arm: Option<String>,
    },
    /// Evaluate a checkpoint (or pure TO) over fresh episodes
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Arm to evaluate as; defaults to coto_ppo with a checkpoint, pure_to without
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long, value_enum, default_value = "det")]
        mode: ModeArg,
        #[arg(long)]
        workers: Option<usize>,
        /// Write the report JSON here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render reward and RL-fraction SVGs from run directories
    Plot {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "figs")]
        out: PathBuf,
    },
    /// Solve one trajectory optimization problem and print it as JSON
    ToSolve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        x: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        y: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        theta: f64,
        #[arg(long, allow_hyphen_values = true)]
        goal_x: f64,
        #[arg(long, allow_hyphen_values = true)]
        goal_y: f64,
    },
    /// Print a CSV trace of gate decisions for one episode
    GateProbe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn load_policy(path: &Path) -> coto_core::Result<PolicyParams> {
    Ok(PolicyParams::load(path)?.0)
}

fn run(cmd: Cmd) -> coto_core::Result<()> {
    match cmd {
        Cmd::Train { cfg, seed, out, arm } => {
            let mut c = cfg.load()?;
            if !seed.is_empty() {
                c.seeds = seed;
            }
            if let Some(o) = out {
                c.out_dir = o;
            }
            if let Some(a) = arm {
                c.arm = a.parse()?;
            }
            c.validate()?;
            for art in harness::run_train(&c)? {
                let last = art.summary.as_ref().and_then(|s| s.rows.last());
                match last {
                    Some(r) => println!(
                        "{}: seed {} reward {:.3} rl_fraction {:.3} (TO baseline {:.3})",
                        art.run_dir.display(),
                        art.manifest.seed,
                        r.ep_reward_mean,
                        r.rl_fraction,
                        art.baseline.reward_mean
                    ),
                    None => println!("{}: pure TO reward {:.3}", art.run_dir.display(), art.baseline.reward_mean),
                }
            }
            Ok(())
        }
        Cmd::Eval { cfg, ckpt, arm, trials, mode, workers, out } => {
            let mut c = cfg.load()?;
            if let Some(t) = trials {
                c.eval_trials = t;
            }
            if let Some(w) = workers {
                c.eval_workers = w;
            }
            c.validate()?;
            let arm: Arm = match (arm, &ckpt) {
                (Some(a), _) => a.parse()?,
                (None, Some(_)) => Arm::CotoPpo,
                (None, None) => Arm::PureTo,
            };
            let policy = match (&ckpt, arm.needs_policy()) {
                (Some(p), true) => Some(load_policy(p)?),
                (None, true) => return Err(Error::Config(format!("arm {arm} needs --ckpt"))),
                _ => None,
            };
            let modes: &[EvalMode] = match mode {
                ModeArg::Det => &[EvalMode::Deterministic],
                ModeArg::Stoch => &[EvalMode::Stochastic],
                ModeArg::Both => &[EvalMode::Deterministic, EvalMode::Stochastic],
            };
            let mut reports = Vec::new();
            for &m in modes {
                reports.push(harness::run_eval(&EvalRequest::from_config(&c, arm, policy.as_ref(), m))?);
            }
            let json = serde_json::to_string_pretty(&reports)?;
            match out {
                Some(p) => std::fs::write(p, json)?,
                None => println!("{json}"),
            }
            for r in &reports {
                let pct = r.rl_percent.map_or(String::new(), |p| format!(" rl {p:.1}%"));
                eprintln!("{} {}: reward {:.3} ± {:.3} over {} trials{pct}", r.arm, r.mode.as_str(), r.reward_mean, r.reward_std, r.trials);
            }
            Ok(())
        }
        Cmd::Plot { runs, out } => {
            for f in harness::emit_plots(&runs, &out)? {
                println!("{}", f.display());
            }
            Ok(())
        }
        Cmd::ToSolve { cfg, x, y, theta, goal_x, goal_y } => {
            let c = cfg.load()?;
            let mut to = ToController::new(&c.plant, c.solver);
            let sol = to.solve_at(&CarState::at_rest(x, y, theta), Goal { x: goal_x, y: goal_y })?;
            println!("{}", serde_json::to_string_pretty(&sol)?);
            Ok(())
        }
        Cmd::GateProbe { cfg, ckpt, seed, steps } => {
            let c = cfg.load()?;
            let policy = match &ckpt {
                Some(p) => load_policy(p)?,
                None => PolicyParams::new(&c.plant, &c.hidden, &mut rng_for(Domain::PolicyInit, seed, 0))?,
            };
            let env_cfg = EnvConfig { rng_seed: seed, ..c.env };
            let mut env = CarFlagRun::reset_with_rng(c.plant, env_cfg, rng_for(Domain::Probe, seed, 1)).0;
            let mut to = ToController::new(&c.plant, c.solver);
            let gate = CotoConfig { horizon_h: c.horizon_h, ..CotoConfig::default() };
            let mut rng = probe_rng(seed);
            println!("step,chosen,r_rl,r_to,margin,to_converged,reward,v_cmd,theta_f_cmd");
            for k in 0..steps.min(env.remaining_steps()) {
                let s = gate_step(&mut env, Some(&policy), Some(&mut to), &gate, &mut rng)?;
                let d = &s.decision;
                let a = d.action();
                println!(
                    "{k},{},{},{},{},{},{},{},{}",
                    d.chosen.as_str(),
                    d.r_rl.unwrap_or(f64::NAN),
                    d.r_to.unwrap_or(f64::NAN),
                    d.margin,
                    d.to_converged.unwrap_or(false),
                    s.result.reward,
                    a.v_cmd,
                    a.theta_f_cmd
                );
            }
            Ok(())
        }
    }
}
