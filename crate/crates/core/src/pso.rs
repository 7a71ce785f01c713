//! Global-best particle swarm optimisation over a box, and PID tuning on top of it.
//!
//! Random draws come from a separate stream per (particle, iteration), so the
//! result does not depend on whether the objective runs serially or on the
//! rayon pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{combined, CostError, CostReport, CostWeights, DEFAULT_PENALTY};
use crate::sim::{simulate_paper_model, simulate_state_space, LoopPlant, SimConfig, SimError};
use crate::xfer::PidGains;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PsoError {
    #[error("invalid PSO config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsoConfig {
    pub swarm_size: usize,
    pub iterations: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub seed: u64,
    pub omega: f64,
    pub c1: f64,
    pub c2: f64,
    /// Maximum speed as a fraction of each bound span.
    pub velocity_clamp: f64,
    /// Evaluate each iteration's particles on the rayon pool.
    pub parallel: bool,
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            swarm_size: 30,
            iterations: 5,
            lower: vec![0.0; 3],
            upper: vec![10.0; 3],
            seed: 1,
            omega: 0.5,
            c1: 0.5,
            c2: 0.5,
            velocity_clamp: 1.0,
            parallel: true,
        }
    }
}

impl PsoConfig {
    /// Constriction coefficients `(0.729, 1.49445, 1.49445)`.
    pub fn with_constriction(mut self) -> Self {
        self.omega = 0.729;
        self.c1 = 1.49445;
        self.c2 = 1.49445;
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<(), PsoError> {
        let bad = |m: String| Err(PsoError::InvalidConfig(m));
        if self.swarm_size < 2 {
            return bad(format!("swarm_size must be at least 2, got {}", self.swarm_size));
        }
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return bad("lower and upper bounds must be non-empty and of equal length".into());
        }
        for (k, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("bounds[{k}]: need lo < hi, got [{lo}, {hi}]"));
            }
        }
        if !(0.0..1.0).contains(&self.omega) {
            return bad(format!("omega must lie in [0, 1), got {}", self.omega));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.c1.is_finite() && self.c2.is_finite()) {
            return bad("c1 and c2 must be positive".into());
        }
        if !(self.velocity_clamp > 0.0 && self.velocity_clamp.is_finite()) {
            return bad("velocity_clamp must be positive".into());
        }
        Ok(())
    }
}

/// Result of [`optimize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsoResult {
    pub best_position: Vec<f64>,
    pub best_cost: f64,
    /// Global best after initialisation and after each iteration.
    pub history: Vec<f64>,
    pub evaluations: usize,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, particle: usize, iteration: usize) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ particle as u64) ^ iteration as u64);
    ChaCha8Rng::seed_from_u64(s)
}

fn evaluate_all<F>(objective: &F, xs: &[Vec<f64>], parallel: bool) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let sanitize = |c: f64| if c.is_nan() { f64::INFINITY } else { c };
    if parallel {
        xs.par_iter().map(|x| sanitize(objective(x))).collect()
    } else {
        xs.iter().map(|x| sanitize(objective(x))).collect()
    }
}

/// Index of the smallest cost; ties go to the lower index.
fn argmin(costs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    best
}

/// Minimise `objective` over the configured box. `NaN` costs count as `+inf`.
pub fn optimize<F>(objective: F, cfg: &PsoConfig) -> Result<PsoResult, PsoError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    cfg.validate()?;
    let d = cfg.dim();
    let span: Vec<f64> = (0..d).map(|k| cfg.upper[k] - cfg.lower[k]).collect();
    let vmax: Vec<f64> = span.iter().map(|s| s * cfg.velocity_clamp).collect();

    let mut x: Vec<Vec<f64>> = Vec::with_capacity(cfg.swarm_size);
    let mut v: Vec<Vec<f64>> = Vec::with_capacity(cfg.swarm_size);
    for p in 0..cfg.swarm_size {
        let mut rng = stream(cfg.seed, p, 0);
        let xp: Vec<f64> = (0..d)
            .map(|k| cfg.lower[k] + rng.gen::<f64>() * span[k])
            .collect();
        let vp: Vec<f64> = (0..d)
            .map(|k| (2.0 * rng.gen::<f64>() - 1.0) * vmax[k])
            .collect();
        x.push(xp);
        v.push(vp);
    }

    let mut costs = evaluate_all(&objective, &x, cfg.parallel);
    let mut evaluations = x.len();
    let mut pbest = x.clone();
    let mut pbest_cost = costs.clone();
    let g = argmin(&pbest_cost);
    let mut gbest = pbest[g].clone();
    let mut gbest_cost = pbest_cost[g];
    let mut history = vec![gbest_cost];

    for it in 1..=cfg.iterations {
        for p in 0..cfg.swarm_size {
            let mut rng = stream(cfg.seed, p, it);
            for k in 0..d {
                let r1: f64 = rng.gen();
                let r2: f64 = rng.gen();
                let vel = cfg.omega * v[p][k]
                    + cfg.c1 * r1 * (pbest[p][k] - x[p][k])
                    + cfg.c2 * r2 * (gbest[k] - x[p][k]);
                v[p][k] = vel.clamp(-vmax[k], vmax[k]);
                x[p][k] = (x[p][k] + v[p][k]).clamp(cfg.lower[k], cfg.upper[k]);
            }
        }
        costs = evaluate_all(&objective, &x, cfg.parallel);
        evaluations += x.len();
        for p in 0..cfg.swarm_size {
            if costs[p] < pbest_cost[p] {
                pbest_cost[p] = costs[p];
                pbest[p].clone_from(&x[p]);
            }
        }
        let g = argmin(&pbest_cost);
        if pbest_cost[g] < gbest_cost {
            gbest_cost = pbest_cost[g];
            gbest.clone_from(&pbest[g]);
        }
        log::debug!("pso iteration {it}: best {gbest_cost}");
        history.push(gbest_cost);
    }

    Ok(PsoResult {
        best_position: gbest,
        best_cost: gbest_cost,
        history,
        evaluations,
        seed: cfg.seed,
    })
}

/// Everything needed to score one gain triple.
#[derive(Debug, Clone)]
pub struct TuningProblem {
    pub plant: LoopPlant,
    pub sim: SimConfig,
    pub weights: CostWeights,
    /// Use the differentiated second-order model instead of the state-space loop.
    pub paper_model: bool,
    pub penalty: f64,
}

impl TuningProblem {
    pub fn new(plant: LoopPlant, sim: SimConfig, weights: CostWeights) -> Result<Self, PsoError> {
        sim.validate()?;
        if (weights.horizon - sim.horizon).abs() > 1e-9 * sim.horizon {
            return Err(CostError::HorizonMismatch {
                expected: weights.horizon,
                actual: sim.horizon,
            }
            .into());
        }
        Ok(Self {
            plant,
            sim,
            weights,
            paper_model: false,
            penalty: DEFAULT_PENALTY,
        })
    }

    pub fn with_paper_model(mut self, on: bool) -> Self {
        self.paper_model = on;
        self
    }
}

/// Single objective evaluation. Divergence maps to the penalty cost; other
/// simulation errors propagate.
pub fn pinned_eval(gains: &PidGains, problem: &TuningProblem) -> Result<CostReport, PsoError> {
    let run = if problem.paper_model {
        simulate_paper_model(&problem.plant, gains, &problem.sim)
    } else {
        simulate_state_space(&problem.plant, gains, &problem.sim)
    };
    match run {
        Ok(traj) => Ok(combined(&traj, &problem.weights)?),
        Err(SimError::NonFiniteState { .. }) => Ok(CostReport::penalty(
            &problem.weights,
            problem.sim.dt,
            problem.penalty,
        )),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub best_gains: PidGains,
    pub best_cost: f64,
    pub best_report: CostReport,
    pub history: Vec<f64>,
    pub evaluations: usize,
    pub seed: u64,
    pub config: PsoConfig,
}

impl TuneReport {
    /// CSV of `iteration,best_cost`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("iteration,best_cost\n");
        for (i, c) in self.history.iter().enumerate() {
            out.push_str(&format!("{i},{c}\n"));
        }
        out
    }
}

/// Tune PID gains for `problem` with PSO over `cfg`'s box (three dimensions).
pub fn tune_pid(problem: &TuningProblem, cfg: &PsoConfig) -> Result<TuneReport, PsoError> {
    if cfg.dim() != 3 {
        return Err(PsoError::InvalidConfig(format!(
            "PID tuning needs three bounds, got {}",
            cfg.dim()
        )));
    }
    if cfg.lower.iter().any(|&lo| lo < 0.0) {
        return Err(PsoError::InvalidConfig("PID gain bounds must be nonnegative".into()));
    }
    let objective = |x: &[f64]| match PidGains::from_slice(x) {
        Ok(g) => match pinned_eval(&g, problem) {
            Ok(r) => r.j,
            Err(e) => {
                log::warn!("candidate {x:?} failed: {e}");
                problem.penalty
            }
        },
        Err(_) => problem.penalty,
    };
    let res = optimize(objective, cfg)?;
    let best_gains = PidGains::from_slice(&res.best_position)
        .map_err(|e| PsoError::InvalidConfig(e.to_string()))?;
    let best_report = pinned_eval(&best_gains, problem)?;
    Ok(TuneReport {
        best_gains,
        best_cost: res.best_cost,
        best_report,
        history: res.history,
        evaluations: res.evaluations,
        seed: res.seed,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::builtin;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn bowl(x: &[f64]) -> f64 {
        (x[0] - 3.0).powi(2) + (x[1] - 5.0).powi(2) + (x[2] - 7.0).powi(2)
    }

    #[test]
    fn convex_bowl() {
        for seed in [1, 2, 3, 42] {
            let cfg = PsoConfig {
                iterations: 50,
                seed,
                ..PsoConfig::default()
            };
            let r = optimize(bowl, &cfg).unwrap();
            let dist = bowl(&r.best_position).sqrt();
            assert!(dist < 0.1, "seed {seed}: {:?}", r.best_position);
        }
    }

    #[test]
    fn evaluation_count_and_history() {
        let count = AtomicUsize::new(0);
        let cfg = PsoConfig {
            iterations: 7,
            swarm_size: 11,
            ..PsoConfig::default()
        };
        let r = optimize(
            |x| {
                count.fetch_add(1, Ordering::Relaxed);
                bowl(x)
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(count.load(Ordering::Relaxed), 11 * 8);
        assert_eq!(r.evaluations, 88);
        assert_eq!(r.history.len(), 8);
        assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*r.history.last().unwrap(), r.best_cost);
    }

    #[test]
    fn init_only() {
        let cfg = PsoConfig {
            swarm_size: 2,
            iterations: 0,
            ..PsoConfig::default()
        };
        let r = optimize(bowl, &cfg).unwrap();
        assert_eq!(r.evaluations, 2);
        assert_eq!(r.history.len(), 1);
    }

    #[test]
    fn serial_and_parallel_agree() {
        let mut cfg = PsoConfig {
            iterations: 20,
            seed: 9,
            ..PsoConfig::default()
        };
        let a = optimize(bowl, &cfg).unwrap();
        cfg.parallel = false;
        let b = optimize(bowl, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positions_stay_in_bounds() {
        let seen = Mutex::new(Vec::new());
        let cfg = PsoConfig {
            lower: vec![-1.0, 2.0],
            upper: vec![1.0, 2.5],
            iterations: 20,
            ..PsoConfig::default().with_constriction()
        };
        optimize(
            |x| {
                seen.lock().unwrap().push(x.to_vec());
                -(x[0] + x[1])
            },
            &cfg,
        )
        .unwrap();
        for x in seen.into_inner().unwrap() {
            assert!((-1.0..=1.0).contains(&x[0]) && (2.0..=2.5).contains(&x[1]));
        }
    }

    #[test]
    fn nan_costs_are_never_best() {
        let cfg = PsoConfig {
            lower: vec![0.0],
            upper: vec![1.0],
            iterations: 5,
            ..PsoConfig::default()
        };
        let r = optimize(|x| if x[0] < 0.5 { f64::NAN } else { x[0] }, &cfg).unwrap();
        assert!(r.best_cost.is_finite());
        assert!(r.best_position[0] >= 0.5);
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0, 3.0]), 1);
    }

    #[test]
    fn config_validation() {
        let bad = [
            PsoConfig {
                swarm_size: 1,
                ..PsoConfig::default()
            },
            PsoConfig {
                lower: vec![0.0, 5.0, 0.0],
                upper: vec![1.0, 5.0, 1.0],
                ..PsoConfig::default()
            },
            PsoConfig {
                omega: 1.0,
                ..PsoConfig::default()
            },
            PsoConfig {
                c2: 0.0,
                ..PsoConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(PsoError::InvalidConfig(_))));
        }
    }

    fn example1_problem() -> TuningProblem {
        TuningProblem::new(
            LoopPlant::Exact(builtin("example1").unwrap()),
            SimConfig::default(),
            CostWeights::new(2000.0, 10.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_gains_cost_half_horizon_squared() {
        let r = pinned_eval(&PidGains::new(0.0, 0.0, 0.0).unwrap(), &example1_problem()).unwrap();
        assert!((r.j - 50.0).abs() < 1e-9, "{}", r.j);
    }

    #[test]
    fn reported_pso_gains_against_baseline() {
        let p = example1_problem();
        let base = pinned_eval(&PidGains::new(2.4, 4.0, 0.25).unwrap(), &p).unwrap();
        let tuned = pinned_eval(&PidGains::new(3.72, 10.0, 0.0).unwrap(), &p).unwrap();
        // Faster tracking, but a small overshoot that alpha = 2000 amplifies.
        assert!(tuned.itae < base.itae / 4.0);
        assert!(base.iso < 1e-9 && tuned.iso > 1e-4);
        assert!(tuned.j > base.j);
    }

    #[test]
    fn pinned_baseline() {
        let base = pinned_eval(&PidGains::new(2.4, 4.0, 0.25).unwrap(), &example1_problem()).unwrap();
        assert!((base.j - 0.300003).abs() < 1e-5, "{}", base.j);
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let err = TuningProblem::new(
            LoopPlant::Exact(builtin("example1").unwrap()),
            SimConfig::default(),
            CostWeights::new(2000.0, 5.0).unwrap(),
        );
        assert!(err.is_err());
    }
}
