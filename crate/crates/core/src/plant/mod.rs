//! Plants of the form `y^(n) + f(y, y', ..., y^(n-1)) = u`.

mod expr;

use std::fmt;
use std::sync::Arc;

pub use expr::{parse_plant, BinOp, EvalError, Func, ParseError, PlantExpr};

use crate::partition::BoxDomain;
use crate::pwl::lifted_lipschitz;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("unknown builtin plant '{0}' (expected example1 or example2)")]
    UnknownBuiltin(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("expression plants are first order; domain has dimension {0}")]
    ExpressionOrder(usize),
    #[error("f could not be evaluated at y = {y}: {source}")]
    Eval { y: f64, source: EvalError },
}

/// Nonlinear plant `y^(n) + f(y, ..., y^(n-1)) = u`.
///
/// `f` must be pure. For expression plants an evaluation error shows up as
/// `NaN`, which the simulator reports as a non-finite state.
#[derive(Clone)]
pub struct PlantModel {
    order: usize,
    f: ScalarFn,
    grad: Option<GradientFn>,
    lipschitz: f64,
    lipschitz_is_estimate: bool,
    hessian_bound: Option<f64>,
    label: String,
}

impl fmt::Debug for PlantModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlantModel")
            .field("label", &self.label)
            .field("order", &self.order)
            .field("lipschitz", &self.lipschitz)
            .field("lipschitz_is_estimate", &self.lipschitz_is_estimate)
            .field("hessian_bound", &self.hessian_bound)
            .finish_non_exhaustive()
    }
}

impl PlantModel {
    pub fn new(
        label: impl Into<String>,
        order: usize,
        f: ScalarFn,
        grad: Option<GradientFn>,
        lipschitz: f64,
        hessian_bound: Option<f64>,
    ) -> Self {
        Self {
            order,
            f,
            grad,
            lipschitz,
            lipschitz_is_estimate: false,
            hessian_bound,
            label: label.into(),
        }
    }

    /// First-order plant `y' + expr(y) = u`.
    ///
    /// Without an explicit `lipschitz`, the constant is estimated from
    /// sampled slopes over `domain` plus a 10% margin and flagged as an
    /// estimate.
    pub fn from_expression(
        text: &str,
        domain: &BoxDomain,
        lipschitz: Option<f64>,
        hessian_bound: Option<f64>,
    ) -> Result<Self, PlantError> {
        if domain.dim() != 1 {
            return Err(PlantError::ExpressionOrder(domain.dim()));
        }
        let expr = Arc::new(parse_plant(text)?);
        let (lo, hi) = (domain.lower()[0], domain.upper()[0]);
        let (lipschitz, estimated) = match lipschitz {
            Some(l) => (l, false),
            None => (sampled_slope(&expr, lo, hi, 4001)? * 1.1, true),
        };
        let e = Arc::clone(&expr);
        let f: ScalarFn = Arc::new(move |y: &[f64]| e.eval(y[0]).unwrap_or(f64::NAN));
        Ok(Self {
            order: 1,
            f,
            grad: None,
            lipschitz,
            lipschitz_is_estimate: estimated,
            hessian_bound,
            label: text.to_string(),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn f(&self, y: &[f64]) -> f64 {
        (self.f)(y)
    }

    pub fn f_handle(&self) -> ScalarFn {
        Arc::clone(&self.f)
    }

    pub fn gradient(&self, y: &[f64]) -> Option<Vec<f64>> {
        self.grad.as_ref().map(|g| g(y))
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn lipschitz_is_estimate(&self) -> bool {
        self.lipschitz_is_estimate
    }

    pub fn hessian_bound(&self) -> Option<f64> {
        self.hessian_bound
    }

    /// Lipschitz constant of the companion field.
    pub fn lifted_lipschitz(&self) -> f64 {
        lifted_lipschitz(self.lipschitz, self.order)
    }

    /// Companion form `x' = f~(x) + u~(t)` of this plant.
    pub fn companion(&self) -> CompanionField<'_> {
        CompanionField { plant: self }
    }
}

fn sampled_slope(expr: &PlantExpr, lo: f64, hi: f64, samples: usize) -> Result<f64, PlantError> {
    let at = |i: usize| lo + (hi - lo) * i as f64 / (samples - 1) as f64;
    let eval = |y: f64| expr.eval(y).map_err(|source| PlantError::Eval { y, source });
    let mut prev = eval(at(0))?;
    let mut best = 0.0_f64;
    for i in 1..samples {
        let next = eval(at(i))?;
        best = best.max((next - prev).abs() / (at(i) - at(i - 1)));
        prev = next;
    }
    Ok(best)
}

/// `f~(x) = (x_2, ..., x_n, -f(x))`, the unforced part of the first-order system.
pub struct CompanionField<'a> {
    plant: &'a PlantModel,
}

impl CompanionField<'_> {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = x[1..].to_vec();
        out.push(-self.plant.f(x));
        out
    }
}

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 2] = ["example1", "example2"];

/// Built-in plants.
///
/// * `example1`: `y' + 2y = u`, i.e. `G(s) = 1/(s+2)` with unit input gain.
/// * `example2`: `y' + 0.5y + ln(1 + y^2) = u`, `|f'| <= 1.5`, `|f''| <= 2`.
pub fn builtin(name: &str) -> Result<PlantModel, PlantError> {
    match name {
        "example1" => Ok(PlantModel::new(
            "example1",
            1,
            Arc::new(|y: &[f64]| 2.0 * y[0]),
            Some(Arc::new(|_: &[f64]| vec![2.0])),
            2.0,
            Some(0.0),
        )),
        "example2" => Ok(PlantModel::new(
            "example2",
            1,
            Arc::new(|y: &[f64]| 0.5 * y[0] + (1.0 + y[0] * y[0]).ln()),
            Some(Arc::new(|y: &[f64]| {
                vec![0.5 + 2.0 * y[0] / (1.0 + y[0] * y[0])]
            })),
            1.5,
            Some(2.0),
        )),
        other => Err(PlantError::UnknownBuiltin(other.to_string())),
    }
}

/// Checks `max_t |y(t)| e^{-2 L~ |t|} <= K` over the samples.
pub fn existence_bound_check(times: &[f64], y: &[f64], lifted_lipschitz: f64, k: f64) -> bool {
    times
        .iter()
        .zip(y)
        .all(|(&t, &v)| v.is_finite() && v.abs() * (-2.0 * lifted_lipschitz * t.abs()).exp() <= k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn builtin_values() {
        let p2 = builtin("example2").unwrap();
        assert_abs_diff_eq!(p2.f(&[1.0]), 0.5 + 2f64.ln(), epsilon = 1e-15);
        assert!((p2.f(&[1.0]) - 1.19).abs() < 0.005);
        assert_eq!(builtin("example1").unwrap().f(&[0.0]), 0.0);
        assert!(matches!(builtin("example3"), Err(PlantError::UnknownBuiltin(_))));
    }

    #[test]
    fn example2_slope_bound_attained_at_one() {
        let p2 = builtin("example2").unwrap();
        let mut best = (0.0, 0.0);
        for i in 0..=20000 {
            let y = -10.0 + 20.0 * i as f64 / 20000.0;
            let g = p2.gradient(&[y]).unwrap()[0].abs();
            if g > best.0 {
                best = (g, y);
            }
        }
        assert_abs_diff_eq!(best.0, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(best.1, 1.0, epsilon = 1e-12);
        assert!(best.0 <= p2.lipschitz());
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for name in BUILTIN_NAMES {
            let p = builtin(name).unwrap();
            for _ in 0..100 {
                let y: f64 = rng.gen_range(-5.0..5.0);
                let h = 1e-6;
                let fd = (p.f(&[y + h]) - p.f(&[y - h])) / (2.0 * h);
                let g = p.gradient(&[y]).unwrap()[0];
                assert!((fd - g).abs() <= 1e-5 * g.abs().max(1.0), "{name} at {y}");
            }
        }
    }

    #[test]
    fn companion_shift_structure() {
        let p = PlantModel::new(
            "cubic",
            3,
            Arc::new(|x: &[f64]| x[0] * x[1] + x[2]),
            None,
            1.0,
            None,
        );
        let v = p.companion().eval(&[1.0, 2.0, 3.0]);
        assert_eq!(v, vec![2.0, 3.0, -5.0]);
    }

    #[test]
    fn companion_field_respects_lifted_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=3 {
            // |grad f| <= 2 everywhere for this f.
            let f: ScalarFn = Arc::new(move |x: &[f64]| {
                let s: f64 = x.iter().sum::<f64>() / (x.len() as f64).sqrt();
                2.0 * s.sin()
            });
            let p = PlantModel::new("sin", n, f, None, 2.0, None);
            let bound = p.lifted_lipschitz();
            for _ in 0..10_000 {
                let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let fx = p.companion().eval(&x);
                let fy = p.companion().eval(&y);
                let num: f64 = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let den: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(num <= bound * den + 1e-12);
            }
        }
    }

    #[test]
    fn expression_plant() {
        let d = BoxDomain::interval(-3.0, 3.0).unwrap();
        let p = PlantModel::from_expression("0.5*y + ln(1 + y^2)", &d, None, Some(2.0)).unwrap();
        assert!(p.lipschitz_is_estimate());
        assert!(p.lipschitz() >= 1.5 && p.lipschitz() <= 1.5 * 1.1 + 1e-9);
        assert_abs_diff_eq!(p.f(&[2.0]), 1.0 + 5f64.ln(), epsilon = 1e-15);

        let bad = PlantModel::from_expression("ln(y)", &d, Some(1.0), None).unwrap();
        assert!(bad.f(&[-1.0]).is_nan());
        assert!(PlantModel::from_expression("ln(y)", &d, None, None).is_err());
        let d2 = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            PlantModel::from_expression("y", &d2, None, None),
            Err(PlantError::ExpressionOrder(2))
        ));
    }

    #[test]
    fn existence_bound() {
        let t: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        assert!(existence_bound_check(&t, &vec![0.0; t.len()], 1.0, 0.0));
        let grow: Vec<f64> = t.iter().map(|&t| (3.0 * t).exp()).collect();
        assert!(!existence_bound_check(&t, &grow, 1.0, 1.0));
        assert!(existence_bound_check(&t, &grow, 1.6, 1.0));
    }
}
