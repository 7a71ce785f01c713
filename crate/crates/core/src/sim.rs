//! Fixed-step closed-loop simulation of PID-controlled plants.
//!
//! Two formulations are provided and are expected to agree:
//!
//! * [`simulate_state_space`] integrates the loop directly. With the
//!   controller integral `z` as an extra state and `e' = delta(t) - y'`, the
//!   derivative action reduces algebraically to
//!   `(1 + kd) y' = -f(y) + kp e + ki z + kd delta(t)` for first-order plants.
//! * [`simulate_paper_model`] integrates the differentiated second-order
//!   equation
//!   `(1 + kd) y'' + (a + kp) y' + ki y = (kp - b) delta(t) + ki eta(t) + kd delta'(t)`
//!   with the active region's slope `a` looked up at every stage.
//!
//! Impulses are replaced by a Gaussian of width `sigma` (and its derivative).
//! Because that Gaussian is centred on `t = 0`, integration starts a few
//! widths earlier, at rest; the recorded trajectory includes this pre-roll.

use std::borrow::Cow;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::partition::{kuhn_partition, BoxDomain, PartitionError};
use crate::plant::PlantModel;
use crate::pwl::{certify, default_sample_density, lifted_lipschitz, ApproxError, PwlApprox};
use crate::xfer::PidGains;

/// States whose magnitude exceeds this are treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e12;
/// Upper bound on consecutive domain expansions within one step.
const MAX_EXPANSIONS_PER_STEP: usize = 32;
/// Rebuilt partitions larger than this are treated as divergence.
pub const MAX_REBUILT_SIMPLICES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("state became non-finite or diverged at t = {time}")]
    NonFiniteState {
        time: f64,
        partial: Box<Trajectory>,
    },
    #[error("state {state:?} left the approximation domain at t = {time}")]
    DomainExit {
        time: f64,
        state: Vec<f64>,
        partial: Box<Trajectory>,
    },
    #[error("the second-order model supports first-order plants only (order {0})")]
    UnsupportedOrder(usize),
    #[error("the second-order model needs a PWL plant or an exact plant with an analytic gradient")]
    MissingGradient,
    #[error("invalid gains: 1 + kd must be nonzero and all gains finite")]
    InvalidGains,
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

impl SimError {
    /// Trajectory up to the failure, when the error carries one.
    pub fn partial(&self) -> Option<&Trajectory> {
        match self {
            SimError::NonFiniteState { partial, .. } | SimError::DomainExit { partial, .. } => {
                Some(partial)
            }
            _ => None,
        }
    }
}

/// What to do when the state leaves the domain of a PWL plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainPolicy {
    Reject,
    ExtrapolateAndFlag,
    #[default]
    ExpandAndRebuild,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    /// Horizon `T` in seconds.
    pub horizon: f64,
    pub sigma: f64,
    /// Initial interval excluded from convergence metrics.
    pub startup_window: f64,
    pub domain_policy: DomainPolicy,
    /// Pre-roll before `t = 0`, in multiples of `sigma`.
    pub pre_roll_sigmas: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 10.0,
            sigma: 0.01,
            startup_window: 0.1,
            domain_policy: DomainPolicy::default(),
            pre_roll_sigmas: 8.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.dt > self.sigma / 5.0 * (1.0 + 1e-12) {
            return bad(format!(
                "dt = {} must not exceed sigma/5 = {}",
                self.dt,
                self.sigma / 5.0
            ));
        }
        if !(self.startup_window >= 0.0 && self.startup_window < self.horizon) {
            return bad(format!(
                "startup_window must lie in [0, horizon), got {}",
                self.startup_window
            ));
        }
        if !(self.pre_roll_sigmas >= 0.0 && self.pre_roll_sigmas.is_finite()) {
            return bad("pre_roll_sigmas must be nonnegative".into());
        }
        Ok(())
    }

    fn pre_steps(&self) -> usize {
        (self.pre_roll_sigmas * self.sigma / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    fn main_steps(&self) -> usize {
        (self.horizon / self.dt).round().max(1.0) as usize
    }
}

/// `exp(-t^2 / (2 sigma^2)) / (sigma sqrt(2 pi))`.
pub fn gaussian_delta(t: f64, sigma: f64) -> f64 {
    (-(t * t) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * PI).sqrt())
}

/// Derivative of [`gaussian_delta`] in `t`.
pub fn gaussian_doublet(t: f64, sigma: f64) -> f64 {
    -t / (sigma * sigma) * gaussian_delta(t, sigma)
}

/// The plant seen by the loop: the exact nonlinearity or its PWL interpolant.
#[derive(Debug, Clone)]
pub enum LoopPlant {
    Exact(PlantModel),
    Pwl { model: PlantModel, approx: PwlApprox },
}

impl LoopPlant {
    pub fn model(&self) -> &PlantModel {
        match self {
            LoopPlant::Exact(m) | LoopPlant::Pwl { model: m, .. } => m,
        }
    }

    pub fn order(&self) -> usize {
        self.model().order()
    }

    /// PWL plant over a Kuhn grid of `domain`.
    pub fn pwl(model: PlantModel, domain: &BoxDomain, cells_per_axis: &[usize]) -> Result<Self, SimError> {
        let partition = kuhn_partition(domain, cells_per_axis)?;
        let approx = PwlApprox::build(|y| model.f(y), partition)?;
        Ok(LoopPlant::Pwl { model, approx })
    }
}

/// A domain-exit event. `rebuilt_domain` is set when the domain was expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainExit {
    pub time: f64,
    pub state: Vec<f64>,
    pub rebuilt_domain: Option<BoxDomain>,
}

/// Uniformly sampled closed-loop trajectory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub y: Vec<f64>,
    pub dy: Vec<f64>,
    pub u: Vec<f64>,
    pub e: Vec<f64>,
    pub domain_exits: Vec<DomainExit>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Index of the sample at `t = 0`.
    pub fn zero_index(&self) -> Option<usize> {
        self.times.iter().position(|&t| t >= 0.0)
    }

    pub fn end_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// Sample closest to `t`.
    pub fn sample_index(&self, t: f64) -> usize {
        let t0 = self.times.first().copied().unwrap_or(0.0);
        (((t - t0) / self.dt).round().max(0.0) as usize).min(self.len().saturating_sub(1))
    }

    /// CSV with header `t,y,dy,u,e`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "y", "dy", "u", "e"])
            .expect("in-memory write");
        for i in 0..self.len() {
            w.write_record(
                [self.times[i], self.y[i], self.dy[i], self.u[i], self.e[i]].map(|x| x.to_string()),
            )
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    fn push(&mut self, t: f64, y: f64, dy: f64, u: f64, r: f64) {
        self.times.push(t);
        self.y.push(y);
        self.dy.push(dy);
        self.u.push(u);
        self.e.push(r - y);
    }
}

/// Plant evaluation state for one run: owns the (possibly rebuilt) interpolant.
struct PlantEval<'a> {
    model: &'a PlantModel,
    approx: Option<Cow<'a, PwlApprox>>,
    policy: DomainPolicy,
    /// First out-of-domain point seen since the flag was last cleared.
    exit: Option<Vec<f64>>,
}

impl<'a> PlantEval<'a> {
    fn new(plant: &'a LoopPlant, policy: DomainPolicy) -> Self {
        match plant {
            LoopPlant::Exact(model) => Self {
                model,
                approx: None,
                policy,
                exit: None,
            },
            LoopPlant::Pwl { model, approx } => Self {
                model,
                approx: Some(Cow::Borrowed(approx)),
                policy,
                exit: None,
            },
        }
    }

    fn value(&mut self, y: &[f64]) -> f64 {
        match &self.approx {
            None => self.model.f(y),
            Some(a) => {
                let ev = a.evaluate_extrapolating(y);
                if ev.extrapolated && self.exit.is_none() {
                    self.exit = Some(y.to_vec());
                }
                ev.value
            }
        }
    }

    /// Slope of the active region (or the analytic derivative) at `y`.
    fn slope(&mut self, y: &[f64]) -> Result<f64, SimError> {
        match &self.approx {
            None => self
                .model
                .gradient(y)
                .map(|g| g[0])
                .ok_or(SimError::MissingGradient),
            Some(a) => {
                let ev = a.evaluate_extrapolating(y);
                if ev.extrapolated && self.exit.is_none() {
                    self.exit = Some(y.to_vec());
                }
                Ok(a.pieces()[ev.simplex_index].gradient[0])
            }
        }
    }

    /// Plant value at the origin, without raising a domain-exit notice.
    fn origin_value(&mut self) -> f64 {
        let saved = self.exit.take();
        let v = self.value(&vec![0.0; self.model.order()]);
        self.exit = saved;
        v
    }

    /// Intercept of the region holding the origin (`f(0)` for exact plants).
    fn origin_intercept(&mut self) -> f64 {
        let zero = vec![0.0; self.model.order()];
        match &self.approx {
            None => self.model.f(&zero),
            Some(a) => {
                let ev = a.evaluate_extrapolating(&zero);
                a.pieces()[ev.simplex_index].intercept
            }
        }
    }

    /// Grow the domain until it holds `point`, keeping the cell width, and
    /// rebuild. Returns `None` when the grid would exceed [`MAX_REBUILT_SIMPLICES`].
    fn expand_to(&mut self, point: &[f64]) -> Result<Option<BoxDomain>, SimError> {
        let a = self.approx.as_ref().expect("expansion requires a PWL plant");
        let d = a.partition().domain();
        let mut cells = a
            .partition()
            .cells_per_axis()
            .expect("PWL plants are built on Kuhn grids")
            .to_vec();
        let mut lower = d.lower().to_vec();
        let mut upper = d.upper().to_vec();
        for k in 0..d.dim() {
            let w = d.width(k) / cells[k] as f64;
            while point[k] < lower[k] {
                let m = cells[k].div_ceil(2).max(1);
                lower[k] -= m as f64 * w;
                cells[k] += m;
            }
            while point[k] > upper[k] {
                let m = cells[k].div_ceil(2).max(1);
                upper[k] += m as f64 * w;
                cells[k] += m;
            }
        }
        let fact: usize = (1..=d.dim()).product();
        let count = cells
            .iter()
            .try_fold(fact, |acc, &c| acc.checked_mul(c))
            .unwrap_or(usize::MAX);
        if count > MAX_REBUILT_SIMPLICES {
            return Ok(None);
        }
        let domain = BoxDomain::new(lower, upper)?;
        let partition = kuhn_partition(&domain, &cells)?;
        let model = self.model;
        let rebuilt = PwlApprox::build(|y| model.f(y), partition)?;
        log::info!(
            "expanded PWL domain to {:?}..{:?} ({} simplices)",
            domain.lower(),
            domain.upper(),
            rebuilt.partition().h()
        );
        self.approx = Some(Cow::Owned(rebuilt));
        Ok(Some(domain))
    }
}

fn rk4_step<F>(x: &[f64], t: f64, dt: f64, mut rhs: F) -> Result<Vec<f64>, SimError>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), SimError>,
{
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    rhs(t, x, &mut k1)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    rhs(t + 0.5 * dt, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    rhs(t + 0.5 * dt, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    rhs(t + dt, &tmp, &mut k4)?;
    Ok((0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Shared fixed-step driver. `rhs(t, eta, x, dx)` gets the unit-step value
/// for the current step (constant within a step, since `t = 0` is a grid point);
/// `record(t, eta, x)` returns `(y, dy, u)`.
fn drive<R, O>(
    plant: &LoopPlant,
    cfg: &SimConfig,
    state_len: usize,
    mut rhs: R,
    mut record: O,
) -> Result<Trajectory, SimError>
where
    R: FnMut(&mut PlantEval<'_>, f64, f64, &[f64], &mut [f64]) -> Result<(), SimError>,
    O: FnMut(&mut PlantEval<'_>, f64, f64, &[f64]) -> Result<(f64, f64, f64), SimError>,
{
    cfg.validate()?;
    let pre = cfg.pre_steps();
    let total = pre + cfg.main_steps();
    let time = |k: usize| (k as f64 - pre as f64) * cfg.dt;
    let mut eval = PlantEval::new(plant, cfg.domain_policy);
    let mut traj = Trajectory {
        dt: cfg.dt,
        ..Trajectory::default()
    };
    let mut x = vec![0.0; state_len];
    let mut outside = false;

    let eta_at = |k: usize| if k >= pre { 1.0 } else { 0.0 };
    let (y, dy, u) = record(&mut eval, time(0), eta_at(0), &x)?;
    traj.push(time(0), y, dy, u, eta_at(0));

    for k in 0..total {
        let t = time(k);
        let eta = eta_at(k);
        let mut expansions = 0;
        let next = loop {
            eval.exit = None;
            let next = rk4_step(&x, t, cfg.dt, |ts, xs, dx| rhs(&mut eval, ts, eta, xs, dx))?;
            let Some(point) = eval.exit.take() else {
                outside = false;
                break next;
            };
            match eval.policy {
                DomainPolicy::Reject => {
                    return Err(SimError::DomainExit {
                        time: t,
                        state: point,
                        partial: Box::new(traj),
                    })
                }
                DomainPolicy::ExtrapolateAndFlag => {
                    if !outside {
                        log::warn!("state left the PWL domain at t = {t}");
                        traj.domain_exits.push(DomainExit {
                            time: t,
                            state: point,
                            rebuilt_domain: None,
                        });
                    }
                    outside = true;
                    break next;
                }
                DomainPolicy::ExpandAndRebuild => {
                    expansions += 1;
                    if expansions > MAX_EXPANSIONS_PER_STEP {
                        return Err(SimError::NonFiniteState {
                            time: t,
                            partial: Box::new(traj),
                        });
                    }
                    if !point.iter().all(|p| p.is_finite() && p.abs() < DIVERGENCE_LIMIT) {
                        return Err(SimError::NonFiniteState {
                            time: t,
                            partial: Box::new(traj),
                        });
                    }
                    let Some(domain) = eval.expand_to(&point)? else {
                        log::warn!("domain growth past {MAX_REBUILT_SIMPLICES} simplices at t = {t}; treating as divergence");
                        return Err(SimError::NonFiniteState {
                            time: t,
                            partial: Box::new(traj),
                        });
                    };
                    traj.domain_exits.push(DomainExit {
                        time: t,
                        state: point,
                        rebuilt_domain: Some(domain),
                    });
                    // redo the step on the rebuilt interpolant
                }
            }
        };
        if !next.iter().all(|v| v.is_finite() && v.abs() < DIVERGENCE_LIMIT) {
            return Err(SimError::NonFiniteState {
                time: time(k + 1),
                partial: Box::new(traj),
            });
        }
        x = next;
        let eta_next = eta_at(k + 1);
        let (y, dy, u) = record(&mut eval, time(k + 1), eta_next, &x)?;
        traj.push(time(k + 1), y, dy, u, eta_next);
    }
    Ok(traj)
}

fn check_gains(gains: &PidGains) -> Result<(), SimError> {
    let finite = gains.as_array().iter().all(|g| g.is_finite());
    if !finite || 1.0 + gains.kd == 0.0 {
        return Err(SimError::InvalidGains);
    }
    Ok(())
}

/// Direct state-space simulation of the PID loop tracking a unit step.
///
/// State is `(y, y', ..., y^(n-1), z)` with `z' = e = eta(t) - y`, starting
/// at rest. The plant offset `f(0)` is switched on with the step so that the
/// pre-roll is an equilibrium.
pub fn simulate_state_space(
    plant: &LoopPlant,
    gains: &PidGains,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    check_gains(gains)?;
    let n = plant.order();
    let sigma = cfg.sigma;
    let g = *gains;
    let mut offset: Option<f64> = None;

    let mut origin = move |ev: &mut PlantEval<'_>| *offset.get_or_insert_with(|| ev.origin_value());
    let mut origin2 = origin;

    // Plant term with its constant part gated by the step.
    fn gated(ev: &mut PlantEval<'_>, y: &[f64], f0: f64, eta: f64) -> f64 {
        ev.value(y) - f0 + f0 * eta
    }

    let rhs = move |ev: &mut PlantEval<'_>, t: f64, eta: f64, x: &[f64], dx: &mut [f64]| {
        let f0 = origin(ev);
        let y = &x[..n];
        let z = x[n];
        let e = eta - y[0];
        let f = gated(ev, y, f0, eta);
        let impulse = g.kd * gaussian_delta(t, sigma);
        if n == 1 {
            dx[0] = (-f + g.kp * e + g.ki * z + impulse) / (1.0 + g.kd);
        } else {
            dx[..n - 1].copy_from_slice(&y[1..]);
            dx[n - 1] = -f + g.kp * e + g.ki * z + impulse - g.kd * y[1];
        }
        dx[n] = e;
        Ok(())
    };

    let record = move |ev: &mut PlantEval<'_>, t: f64, eta: f64, x: &[f64]| {
        let f0 = origin2(ev);
        let y = &x[..n];
        let z = x[n];
        let e = eta - y[0];
        let f = gated(ev, y, f0, eta);
        let impulse = g.kd * gaussian_delta(t, sigma);
        let (dy, u) = if n == 1 {
            let dy = (-f + g.kp * e + g.ki * z + impulse) / (1.0 + g.kd);
            (dy, g.kp * e + g.ki * z + impulse - g.kd * dy)
        } else {
            (y[1], g.kp * e + g.ki * z + impulse - g.kd * y[1])
        };
        Ok((y[0], dy, u))
    };

    drive(plant, cfg, n + 1, rhs, record)
}

/// Simulation of the differentiated second-order model for first-order plants.
///
/// State is `(y, y')` from rest. The impulse weight `kp - b` uses the
/// intercept `b` of the region containing the origin.
pub fn simulate_paper_model(
    plant: &LoopPlant,
    gains: &PidGains,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    check_gains(gains)?;
    if plant.order() != 1 {
        return Err(SimError::UnsupportedOrder(plant.order()));
    }
    if let LoopPlant::Exact(m) = plant {
        if m.gradient(&[0.0]).is_none() {
            return Err(SimError::MissingGradient);
        }
    }
    let sigma = cfg.sigma;
    let g = *gains;
    let mut b0: Option<f64> = None;
    let mut b0_rec = None::<f64>;

    let rhs = move |ev: &mut PlantEval<'_>, t: f64, eta: f64, x: &[f64], dx: &mut [f64]| {
        let b = *b0.get_or_insert_with(|| ev.origin_intercept());
        let a = ev.slope(&x[..1])?;
        let forcing = (g.kp - b) * gaussian_delta(t, sigma)
            + g.ki * eta
            + g.kd * gaussian_doublet(t, sigma);
        dx[0] = x[1];
        dx[1] = (forcing - (a + g.kp) * x[1] - g.ki * x[0]) / (1.0 + g.kd);
        Ok(())
    };

    let record = move |ev: &mut PlantEval<'_>, _t: f64, eta: f64, x: &[f64]| {
        let b = *b0_rec.get_or_insert_with(|| ev.origin_intercept());
        // Plant identity y' + f(y) = u, with the offset switched on by the step.
        let f = ev.value(&x[..1]) - b + b * eta;
        Ok((x[0], x[1], x[1] + f))
    };

    drive(plant, cfg, 2, rhs, record)
}

/// Outcome of an h-refinement sweep against the exact-plant reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub h_values: Vec<usize>,
    pub max_diams: Vec<f64>,
    /// Measured sup interpolation error per `h`.
    pub eps_f: Vec<f64>,
    /// `0.5 * hessian_bound * max_diam^2` per `h`, when a Hessian bound is known.
    pub eps_f_estimates: Option<Vec<f64>>,
    /// `sup_{t in [startup_window, T]} |y_h - y_ref|`.
    pub sup_errors: Vec<f64>,
    pub lifted_lipschitz: f64,
    pub gronwall_horizon: f64,
    /// `eps_f (e^{L~ t_g} - 1) / L~` at `t_g = gronwall_horizon`.
    pub gronwall_bounds: Vec<f64>,
    /// `sup |y_h - y_ref|` over `[0, t_g]`, truncated at the first domain exit of `y_h`.
    pub window_sup_errors: Vec<f64>,
    /// Least-squares slope of `log sup_error` against `log max_diam`.
    pub loglog_slope: Option<f64>,
}

/// Horizon (seconds) over which the Gronwall bound is compared.
pub const GRONWALL_HORIZON: f64 = 2.0;

/// Number of Kuhn cells per axis giving `h` simplices in dimension `n`.
pub fn cells_for_h(h: usize, n: usize) -> Option<usize> {
    let fact: usize = (1..=n).product();
    if h == 0 || !h.is_multiple_of(fact) {
        return None;
    }
    let per = h / fact;
    let c = (per as f64).powf(1.0 / n as f64).round() as usize;
    (c.checked_pow(n as u32) == Some(per)).then_some(c)
}

/// Run the PWL loop for each `h` and compare against the exact plant
/// simulated at `dt / 10`.
pub fn converge_sweep(
    model: &PlantModel,
    domain: &BoxDomain,
    gains: &PidGains,
    h_list: &[usize],
    cfg: &SimConfig,
) -> Result<ConvergenceReport, SimError> {
    cfg.validate()?;
    if h_list.windows(2).any(|w| w[0] >= w[1]) || h_list.is_empty() {
        return Err(SimError::InvalidConfig("h_list must be non-empty and increasing".into()));
    }
    let n = model.order();
    let ref_cfg = SimConfig {
        dt: cfg.dt / 10.0,
        ..cfg.clone()
    };
    let reference = simulate_state_space(&LoopPlant::Exact(model.clone()), gains, &ref_cfg)?;
    let ref_at = |t: f64| reference.y[reference.sample_index(t)];
    let lifted = lifted_lipschitz(model.lipschitz(), n);
    let t_g = GRONWALL_HORIZON.min(cfg.horizon);

    let mut report = ConvergenceReport {
        h_values: h_list.to_vec(),
        max_diams: Vec::new(),
        eps_f: Vec::new(),
        eps_f_estimates: model.hessian_bound().map(|_| Vec::new()),
        sup_errors: Vec::new(),
        lifted_lipschitz: lifted,
        gronwall_horizon: t_g,
        gronwall_bounds: Vec::new(),
        window_sup_errors: Vec::new(),
        loglog_slope: None,
    };

    for &h in h_list {
        let c = cells_for_h(h, n).ok_or_else(|| {
            SimError::InvalidConfig(format!("h = {h} is not n! * c^n for n = {n}"))
        })?;
        let plant = LoopPlant::pwl(model.clone(), domain, &vec![c; n])?;
        let LoopPlant::Pwl { approx, .. } = &plant else {
            unreachable!()
        };
        let cert = certify(approx, |y| model.f(y), model.hessian_bound(), default_sample_density(n));
        let traj = simulate_state_space(&plant, gains, cfg)?;

        let mut sup = 0.0_f64;
        let mut window = 0.0_f64;
        let mut in_window = true;
        for (i, &t) in traj.times.iter().enumerate() {
            if t < 0.0 {
                continue;
            }
            let err = (traj.y[i] - ref_at(t)).abs();
            if t >= cfg.startup_window - 1e-12 {
                sup = sup.max(err);
            }
            if in_window && (t > t_g + 1e-12 || !domain.contains(&[traj.y[i]], 0.0)) {
                in_window = false;
            }
            if in_window {
                window = window.max(err);
            }
        }
        report.max_diams.push(approx.partition().max_diam());
        report.eps_f.push(cert.sup_error_measured);
        if let (Some(v), Some(est)) = (report.eps_f_estimates.as_mut(), cert.sup_error_estimate) {
            v.push(est);
        }
        report.sup_errors.push(sup);
        report
            .gronwall_bounds
            .push(cert.sup_error_measured * ((lifted * t_g).exp() - 1.0) / lifted);
        report.window_sup_errors.push(window);
    }
    report.loglog_slope = loglog_slope(&report.max_diams, &report.sup_errors);
    Ok(report)
}

/// Least-squares slope of `log y` against `log x`; `None` if fewer than two usable points.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(a, b)| **a > 0.0 && **b > 0.0)
        .map(|(a, b)| (a.ln(), b.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::builtin;
    use crate::xfer::{analytic_step_example1, post_initial_values};
    use approx::assert_abs_diff_eq;

    const BASELINE: PidGains = PidGains {
        kp: 2.4,
        ki: 4.0,
        kd: 0.25,
    };

    fn example1() -> LoopPlant {
        LoopPlant::Exact(builtin("example1").unwrap())
    }

    #[test]
    fn gaussian_values() {
        assert_abs_diff_eq!(
            gaussian_delta(0.0, 0.01),
            1.0 / (0.01 * (2.0 * PI).sqrt()),
            epsilon = 1e-12
        );
        assert!((gaussian_delta(0.0, 0.01) - 39.894).abs() < 1e-3);
        assert_eq!(gaussian_delta(0.01, 0.01), gaussian_delta(-0.01, 0.01));
        assert_eq!(gaussian_doublet(0.0, 0.01), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        let bad = SimConfig {
            dt: 0.01,
            ..SimConfig::default()
        };
        assert!(matches!(bad.validate(), Err(SimError::InvalidConfig(_))));
        let bad = SimConfig {
            horizon: 0.0,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SimConfig {
            sigma: -1.0,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trajectory_grid_starts_at_rest_and_hits_zero() {
        let traj = simulate_state_space(&example1(), &BASELINE, &SimConfig::default()).unwrap();
        assert_eq!(traj.y[0], 0.0);
        assert!(traj.dy[0].abs() < 1e-12);
        let z = traj.zero_index().unwrap();
        assert_eq!(traj.times[z], 0.0);
        assert_eq!(traj.len(), 80 + 10_000 + 1);
        assert_abs_diff_eq!(traj.end_time(), 10.0, epsilon = 1e-9);
        for w in traj.times.windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], 1e-3, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_gains_zero_output() {
        let zero = PidGains::new(0.0, 0.0, 0.0).unwrap();
        for plant in [example1(), LoopPlant::Exact(builtin("example2").unwrap())] {
            let traj = simulate_state_space(&plant, &zero, &SimConfig::default()).unwrap();
            assert!(traj.y.iter().all(|&y| y == 0.0));
            let traj = simulate_paper_model(&plant, &zero, &SimConfig::default()).unwrap();
            assert!(traj.y.iter().all(|&y| y == 0.0));
        }
    }

    #[test]
    fn example1_matches_analytic_response() {
        let traj = simulate_state_space(&example1(), &BASELINE, &SimConfig::default()).unwrap();
        let mut sup = 0.0_f64;
        for (t, y) in traj.times.iter().zip(&traj.y) {
            if *t >= 0.05 {
                sup = sup.max((y - analytic_step_example1(*t)).abs());
            }
        }
        assert!(sup < 5e-3, "sup error {sup}");
    }

    #[test]
    fn paper_model_post_initial_state() {
        let cfg = SimConfig::default();
        let traj = simulate_paper_model(&example1(), &BASELINE, &cfg).unwrap();
        let (y0, dy0) = post_initial_values(&BASELINE, 2.0);
        // Continue the jump values along the exact solution to t = 10 sigma.
        let i = traj.sample_index(10.0 * cfg.sigma);
        let t = traj.times[i];
        let y_expected = analytic_step_example1(t);
        assert!((traj.y[i] - y_expected).abs() <= 0.02 * y_expected);
        assert!((traj.y[i] - (y0 + dy0 * t)).abs() < 0.02);
    }

    #[test]
    fn simulators_agree_on_example1() {
        let cfg = SimConfig::default();
        let a = simulate_state_space(&example1(), &BASELINE, &cfg).unwrap();
        let b = simulate_paper_model(&example1(), &BASELINE, &cfg).unwrap();
        let sup = a
            .times
            .iter()
            .zip(a.y.iter().zip(&b.y))
            .filter(|(t, _)| **t >= 25.0 * cfg.sigma)
            .map(|(_, (x, y))| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(sup <= 1e-2, "{sup}");
    }

    #[test]
    fn reject_policy_reports_exit() {
        let model = builtin("example2").unwrap();
        let plant = LoopPlant::pwl(model, &BoxDomain::interval(-0.5, 0.5).unwrap(), &[4]).unwrap();
        let cfg = SimConfig {
            domain_policy: DomainPolicy::Reject,
            ..SimConfig::default()
        };
        let gains = PidGains::new(4.65, 10.0, 0.0).unwrap();
        match simulate_state_space(&plant, &gains, &cfg) {
            Err(SimError::DomainExit { state, partial, .. }) => {
                assert!(state[0] > 0.5);
                assert!(!partial.is_empty());
            }
            other => panic!("expected a domain exit, got {other:?}"),
        }
    }

    #[test]
    fn expansion_rebuilds_and_matches_wide_domain() {
        let model = builtin("example2").unwrap();
        let gains = PidGains::new(4.65, 10.0, 0.0).unwrap();
        let small = LoopPlant::pwl(model.clone(), &BoxDomain::interval(-1.0, 0.5).unwrap(), &[3]).unwrap();
        let traj = simulate_state_space(&small, &gains, &SimConfig::default()).unwrap();
        assert!(!traj.domain_exits.is_empty());
        let last = traj.domain_exits.last().unwrap().rebuilt_domain.clone().unwrap();
        assert!(last.upper()[0] >= traj.y.iter().cloned().fold(f64::MIN, f64::max));
        // Same cell width (0.5) and knots as a grid on a wide domain.
        let wide = LoopPlant::pwl(model, &BoxDomain::interval(-1.0, 3.0).unwrap(), &[8]).unwrap();
        let reference = simulate_state_space(&wide, &gains, &SimConfig::default()).unwrap();
        let sup = traj
            .y
            .iter()
            .zip(&reference.y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(sup < 1e-9, "{sup}");

        let flag = SimConfig {
            domain_policy: DomainPolicy::ExtrapolateAndFlag,
            ..SimConfig::default()
        };
        let traj = simulate_state_space(&small, &gains, &flag).unwrap();
        assert!(!traj.domain_exits.is_empty());
        assert!(traj.domain_exits.iter().all(|e| e.rebuilt_domain.is_none()));
    }

    #[test]
    fn divergence_is_reported() {
        let unstable = PlantModel::new(
            "unstable",
            1,
            std::sync::Arc::new(|y: &[f64]| -50.0 * y[0]),
            None,
            50.0,
            None,
        );
        let gains = PidGains::new(0.0, 1.0, 0.0).unwrap();
        let err = simulate_state_space(&LoopPlant::Exact(unstable), &gains, &SimConfig::default())
            .unwrap_err();
        match err {
            SimError::NonFiniteState { time, partial } => {
                assert!(time > 0.0 && time < 10.0);
                assert!(!partial.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn runaway_expansion_is_divergence() {
        let d = BoxDomain::interval(-3.0, 3.0).unwrap();
        let model = PlantModel::from_expression("-50*y", &d, Some(50.0), None).unwrap();
        let plant = LoopPlant::pwl(model, &d, &[6]).unwrap();
        let gains = PidGains::new(0.0, 1.0, 0.0).unwrap();
        let err = simulate_state_space(&plant, &gains, &SimConfig::default()).unwrap_err();
        let SimError::NonFiniteState { partial, .. } = err else {
            panic!("{err:?}")
        };
        assert!(!partial.domain_exits.is_empty());
    }

    #[test]
    fn cells_for_h_inverts_kuhn_count() {
        assert_eq!(cells_for_h(6, 1), Some(6));
        assert_eq!(cells_for_h(8, 2), Some(2));
        assert_eq!(cells_for_h(7, 2), None);
        assert_eq!(cells_for_h(48, 3), Some(2));
    }

    #[test]
    fn second_order_plant_runs() {
        // y'' + 3y' + 4y = u, closed loop with PI action settles at 1.
        let plant = PlantModel::new(
            "mass-spring",
            2,
            std::sync::Arc::new(|x: &[f64]| 4.0 * x[0] + 3.0 * x[1]),
            None,
            5.0,
            None,
        );
        let gains = PidGains::new(2.0, 3.0, 0.5).unwrap();
        let cfg = SimConfig {
            horizon: 30.0,
            ..SimConfig::default()
        };
        let traj = simulate_state_space(&LoopPlant::Exact(plant), &gains, &cfg).unwrap();
        assert!((traj.y.last().unwrap() - 1.0).abs() < 1e-3);
    }
}
