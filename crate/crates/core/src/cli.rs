//! Command-line front end: configuration, subcommands and artifact writing.
//!
//! A run is described by a [`RunConfig`], loaded from an optional JSON file
//! and then overridden by flags. Every JSON artifact echoes the effective
//! config so the run can be repeated from the file alone.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cost::{combined, CostReport, CostWeights};
use crate::partition::{kuhn_partition, BoxDomain};
use crate::plant::{builtin, PlantModel};
use crate::pso::{tune_pid, PsoConfig, PsoError, TuneReport, TuningProblem};
use crate::pwl::{certify, default_sample_density, ApproxCertificate, PwlApprox};
use crate::sim::{
    converge_sweep, simulate_paper_model, simulate_state_space, ConvergenceReport, LoopPlant,
    SimConfig, SimError, Trajectory,
};
use crate::xfer::PidGains;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("simulation failed: {0}")]
    Simulation(SimError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Simulation(_) => 3,
            CliError::Io { .. } => 4,
        }
    }

    fn config(path: &str, message: impl ToString) -> Self {
        CliError::Config {
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(m) => CliError::config("sim", m),
            SimError::InvalidGains => CliError::config("gains", "1 + kd must be nonzero"),
            other => CliError::Simulation(other),
        }
    }
}

impl From<PsoError> for CliError {
    fn from(e: PsoError) -> Self {
        match e {
            PsoError::Sim(s) => s.into(),
            PsoError::InvalidConfig(m) => CliError::config("pso", m),
            PsoError::Cost(c) => CliError::config("alpha", c),
        }
    }
}

/// Effective settings of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Builtin plant name; ignored when `expr` is set.
    pub plant: String,
    /// First-order plant nonlinearity as an expression in `y`.
    pub expr: Option<String>,
    /// Lipschitz constant for expression plants; estimated when absent.
    pub lipschitz: Option<f64>,
    /// Hessian bound for expression plants, used by the certificate.
    pub hessian_bound: Option<f64>,
    pub domain: BoxDomain,
    pub cells: usize,
    pub sim: SimConfig,
    pub alpha: f64,
    pub gains: PidGains,
    pub pso: PsoConfig,
    pub h_list: Vec<usize>,
    pub paper_model: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plant: "example2".into(),
            expr: None,
            lipschitz: None,
            hessian_bound: None,
            domain: BoxDomain::interval(-3.0, 3.0).expect("valid interval"),
            cells: 6,
            sim: SimConfig::default(),
            alpha: 2000.0,
            gains: PidGains {
                kp: 4.65,
                ki: 10.0,
                kd: 0.0,
            },
            pso: PsoConfig::default(),
            h_list: vec![6, 12, 24, 48],
            paper_model: false,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::config("<config file>", e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Cross-field checks, reported with the offending field path.
    pub fn validate(&self) -> Result<(), CliError> {
        match &self.expr {
            Some(_) if self.domain.dim() != 1 => {
                return Err(CliError::config("domain", "expression plants need a 1-D domain"))
            }
            None => {
                let model = builtin(&self.plant).map_err(|e| CliError::config("plant", e))?;
                if model.order() != self.domain.dim() {
                    return Err(CliError::config(
                        "domain",
                        format!("plant has order {} but the domain has dimension {}", model.order(), self.domain.dim()),
                    ));
                }
            }
            _ => {}
        }
        if self.cells == 0 {
            return Err(CliError::config("cells", "must be at least 1"));
        }
        let s = &self.sim;
        if !(s.dt > 0.0) {
            return Err(CliError::config("sim.dt", "must be positive"));
        }
        if !(s.sigma > 0.0) {
            return Err(CliError::config("sim.sigma", "must be positive"));
        }
        if !(s.horizon > 0.0) {
            return Err(CliError::config("sim.horizon", "must be positive"));
        }
        if s.dt > s.sigma / 5.0 * (1.0 + 1e-12) {
            return Err(CliError::config(
                "sim.dt",
                format!("dt = {} exceeds sigma/5 = {}", s.dt, s.sigma / 5.0),
            ));
        }
        s.validate().map_err(|e| CliError::config("sim", e))?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(CliError::config("alpha", "must be finite and nonnegative"));
        }
        PidGains::new(self.gains.kp, self.gains.ki, self.gains.kd)
            .map_err(|e| CliError::config("gains", e))?;
        for (k, (lo, hi)) in self.pso.lower.iter().zip(&self.pso.upper).enumerate() {
            if !(lo < hi) {
                return Err(CliError::config(
                    &format!("pso.bounds[{k}]"),
                    format!("need lo < hi, got [{lo}, {hi}]"),
                ));
            }
        }
        self.pso.validate().map_err(|e| CliError::config("pso", e))?;
        if self.h_list.is_empty() || self.h_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CliError::config("h_list", "must be non-empty and strictly increasing"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<PlantModel, CliError> {
        match &self.expr {
            Some(text) => PlantModel::from_expression(text, &self.domain, self.lipschitz, self.hessian_bound)
                .map_err(|e| CliError::config("expr", e)),
            None => builtin(&self.plant).map_err(|e| CliError::config("plant", e)),
        }
    }

    pub fn weights(&self) -> Result<CostWeights, CliError> {
        CostWeights::new(self.alpha, self.sim.horizon).map_err(|e| CliError::config("alpha", e))
    }

    fn loop_plant(&self) -> Result<LoopPlant, CliError> {
        let model = self.model()?;
        let n = model.order();
        Ok(LoopPlant::pwl(model, &self.domain, &vec![self.cells; n])?)
    }
}

/// Flags shared by all subcommands; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Builtin plant (example1, example2).
    #[arg(long)]
    pub plant: Option<String>,
    /// Plant nonlinearity as an expression in y.
    #[arg(long, allow_hyphen_values = true)]
    pub expr: Option<String>,
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub domain: Option<Vec<f64>>,
    #[arg(long)]
    pub cells: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    /// Horizon in seconds.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, num_args = 3, value_names = ["KP", "KI", "KD"], allow_negative_numbers = true)]
    pub gains: Option<Vec<f64>>,
    #[arg(long)]
    pub swarm: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Same box for every gain.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub bounds: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also simulate the differentiated second-order model.
    #[arg(long)]
    pub paper_model: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<(), CliError> {
        if let Some(p) = &self.plant {
            cfg.plant.clone_from(p);
            cfg.expr = None;
        }
        if let Some(e) = &self.expr {
            cfg.expr = Some(e.clone());
        }
        if let Some(d) = &self.domain {
            cfg.domain = BoxDomain::interval(d[0], d[1]).map_err(|e| CliError::config("domain", e))?;
        }
        if let Some(c) = self.cells {
            cfg.cells = c;
        }
        if let Some(v) = self.dt {
            cfg.sim.dt = v;
        }
        if let Some(v) = self.horizon {
            cfg.sim.horizon = v;
        }
        if let Some(v) = self.sigma {
            cfg.sim.sigma = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(g) = &self.gains {
            cfg.gains = PidGains::new(g[0], g[1], g[2]).map_err(|e| CliError::config("gains", e))?;
        }
        if let Some(v) = self.swarm {
            cfg.pso.swarm_size = v;
        }
        if let Some(v) = self.iters {
            cfg.pso.iterations = v;
        }
        if let Some(b) = &self.bounds {
            let dim = cfg.pso.dim().max(1);
            cfg.pso.lower = vec![b[0]; dim];
            cfg.pso.upper = vec![b[1]; dim];
        }
        if let Some(v) = self.seed {
            cfg.pso.seed = v;
        }
        if let Some(o) = &self.out {
            cfg.out.clone_from(o);
        }
        if self.paper_model {
            cfg.paper_model = true;
        }
        Ok(())
    }

    /// Config file (if any) with flags applied, not yet validated.
    pub fn load(&self, base: RunConfig) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_json(&read(path)?)?,
            None => base,
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig, CliError> {
        let cfg = self.load(base)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "pwlpid", version, about = "PWL plant approximation, closed-loop simulation and PSO tuning of PID controllers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the PWL approximation and write its segment table and certificate.
    Approx(Overrides),
    /// Simulate the closed loop for fixed gains.
    Simulate(Overrides),
    /// Tune gains with PSO.
    Tune(Overrides),
    /// Refinement sweep against the exact plant.
    Converge {
        #[command(flatten)]
        flags: Overrides,
        /// Increasing list of simplex counts.
        #[arg(long = "h", num_args = 1..)]
        h_list: Option<Vec<usize>>,
    },
    /// Linear first-order example: baseline gains versus PSO.
    Example1(Overrides),
    /// Nonlinear first-order example: approximation, tuning and convergence.
    Example2(Overrides),
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct Echo<'a, T: Serialize> {
    run_config: &'a RunConfig,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxOutput {
    pub approx: PwlApprox,
    pub certificate: ApproxCertificate,
}

pub fn cmd_approx(cfg: &RunConfig) -> Result<ApproxOutput, CliError> {
    let model = cfg.model()?;
    let n = model.order();
    let partition = kuhn_partition(&cfg.domain, &vec![cfg.cells; n]).map_err(|e| CliError::config("domain", e))?;
    let approx = PwlApprox::build(|y| model.f(y), partition).map_err(|e| CliError::config("plant", e))?;
    let certificate = certify(&approx, |y| model.f(y), model.hessian_bound(), default_sample_density(n));
    let csv = approx.segments_csv().map_err(|e| CliError::config("plant", e))?;
    write(&cfg.out, "segments.csv", &csv)?;
    write(&cfg.out, "segments.json", &json(&approx.segments()))?;
    #[derive(Serialize)]
    struct Cert<'a> {
        certificate: &'a ApproxCertificate,
        lipschitz: f64,
        lipschitz_is_estimate: bool,
    }
    write(
        &cfg.out,
        "certificate.json",
        &json(&Echo {
            run_config: cfg,
            body: Cert {
                certificate: &certificate,
                lipschitz: model.lipschitz(),
                lipschitz_is_estimate: model.lipschitz_is_estimate(),
            },
        }),
    )?;
    write(&cfg.out, "config.json", &json(cfg))?;
    Ok(ApproxOutput { approx, certificate })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOutput {
    pub trajectory: Trajectory,
    pub cost: CostReport,
    pub paper_model: Option<(Trajectory, CostReport)>,
}

fn run_and_write(
    cfg: &RunConfig,
    plant: &LoopPlant,
    second_order: bool,
    stem: &str,
) -> Result<(Trajectory, CostReport), CliError> {
    let run = if second_order {
        simulate_paper_model(plant, &cfg.gains, &cfg.sim)
    } else {
        simulate_state_space(plant, &cfg.gains, &cfg.sim)
    };
    let traj = match run {
        Ok(t) => t,
        Err(e) => {
            if let Some(partial) = e.partial() {
                write(&cfg.out, &format!("{stem}.csv"), &partial.to_csv())?;
            }
            return Err(e.into());
        }
    };
    let cost = combined(&traj, &cfg.weights()?).map_err(|e| CliError::config("sim.horizon", e))?;
    write(&cfg.out, &format!("{stem}.csv"), &traj.to_csv())?;
    #[derive(Serialize)]
    struct Body<'a> {
        cost: &'a CostReport,
        domain_exits: &'a [crate::sim::DomainExit],
    }
    let cost_name = stem.replace("trajectory", "cost");
    write(
        &cfg.out,
        &format!("{cost_name}.json"),
        &json(&Echo {
            run_config: cfg,
            body: Body {
                cost: &cost,
                domain_exits: &traj.domain_exits,
            },
        }),
    )?;
    Ok((traj, cost))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutput, CliError> {
    let plant = cfg.loop_plant()?;
    write(&cfg.out, "config.json", &json(cfg))?;
    let (trajectory, cost) = run_and_write(cfg, &plant, false, "trajectory")?;
    let paper_model = if cfg.paper_model {
        Some(run_and_write(cfg, &plant, true, "trajectory_paper_model")?)
    } else {
        None
    };
    Ok(SimulateOutput {
        trajectory,
        cost,
        paper_model,
    })
}

pub fn cmd_tune(cfg: &RunConfig) -> Result<TuneReport, CliError> {
    let problem = TuningProblem::new(cfg.loop_plant()?, cfg.sim.clone(), cfg.weights()?)?
        .with_paper_model(cfg.paper_model);
    let report = tune_pid(&problem, &cfg.pso)?;
    write(&cfg.out, "config.json", &json(cfg))?;
    write(&cfg.out, "tune_report.json", &json(&Echo { run_config: cfg, body: &report }))?;
    write(&cfg.out, "tune_history.csv", &report.history_csv())?;
    let best = RunConfig {
        gains: report.best_gains,
        ..cfg.clone()
    };
    match run_and_write(&best, &problem.plant, cfg.paper_model, "best_trajectory") {
        // A diverging best candidate is still a valid tuning result.
        Ok(_) | Err(CliError::Simulation(_)) => {}
        Err(e) => return Err(e),
    }
    Ok(report)
}

pub fn cmd_converge(cfg: &RunConfig) -> Result<ConvergenceReport, CliError> {
    let model = cfg.model()?;
    let report = converge_sweep(&model, &cfg.domain, &cfg.gains, &cfg.h_list, &cfg.sim)?;
    write(&cfg.out, "config.json", &json(cfg))?;
    write(&cfg.out, "convergence.json", &json(&Echo { run_config: cfg, body: &report }))?;
    let mut csv = String::from("h,max_diam,eps_f,sup_error,gronwall_bound,window_sup_error\n");
    for i in 0..report.h_values.len() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            report.h_values[i],
            report.max_diams[i],
            report.eps_f[i],
            report.sup_errors[i],
            report.gronwall_bounds[i],
            report.window_sup_errors[i]
        ));
    }
    write(&cfg.out, "convergence.csv", &csv)?;
    Ok(report)
}

/// Settings for the linear example: `y' + 2y = u`, baseline gains `(2.4, 4, 0.25)`.
pub fn example1_config() -> RunConfig {
    RunConfig {
        plant: "example1".into(),
        gains: PidGains {
            kp: 2.4,
            ki: 4.0,
            kd: 0.25,
        },
        pso: PsoConfig {
            iterations: 5,
            ..PsoConfig::default()
        },
        out: PathBuf::from("out/example1"),
        ..RunConfig::default()
    }
}

/// Settings for the nonlinear example `y' + 0.5y + ln(1 + y^2) = u` with six pieces.
pub fn example2_config() -> RunConfig {
    RunConfig {
        plant: "example2".into(),
        pso: PsoConfig {
            iterations: 10,
            ..PsoConfig::default()
        },
        out: PathBuf::from("out/example2"),
        ..RunConfig::default()
    }
}

fn sub(cfg: &RunConfig, dir: &str) -> RunConfig {
    RunConfig {
        out: cfg.out.join(dir),
        ..cfg.clone()
    }
}

/// Run a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Approx(f) => {
            let out = cmd_approx(&f.resolve(RunConfig::default())?)?;
            log::info!("max interpolation error {}", out.certificate.sup_error_measured);
        }
        Command::Simulate(f) => {
            let out = cmd_simulate(&f.resolve(RunConfig::default())?)?;
            log::info!("J = {}", out.cost.j);
        }
        Command::Tune(f) => {
            let r = cmd_tune(&f.resolve(RunConfig::default())?)?;
            log::info!("best gains {:?}, J = {}", r.best_gains, r.best_cost);
        }
        Command::Converge { flags, h_list } => {
            let mut cfg = flags.load(RunConfig::default())?;
            if let Some(h) = h_list {
                cfg.h_list = h;
            }
            cfg.validate()?;
            let r = cmd_converge(&cfg)?;
            log::info!("log-log slope {:?}", r.loglog_slope);
        }
        Command::Example1(f) => {
            let cfg = f.resolve(example1_config())?;
            let base = cmd_simulate(&sub(&cfg, "baseline"))?;
            let tuned = cmd_tune(&sub(&cfg, "tune"))?;
            log::info!("baseline J = {}, tuned J = {}", base.cost.j, tuned.best_cost);
        }
        Command::Example2(f) => {
            let cfg = f.resolve(example2_config())?;
            cmd_approx(&sub(&cfg, "approx"))?;
            cmd_simulate(&sub(&cfg, "simulate"))?;
            let tuned = cmd_tune(&sub(&cfg, "tune"))?;
            cmd_converge(&sub(&cfg, "converge"))?;
            log::info!("tuned gains {:?}, J = {}", tuned.best_gains, tuned.best_cost);
        }
    }
    Ok(())
}
