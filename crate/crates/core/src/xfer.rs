//! Rational transfer functions in `s` and the PID loop algebra around them.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum XferError {
    #[error("denominator is the zero polynomial")]
    ZeroDenominator,
    #[error("improper rational function: deg num {num} >= deg den {den}")]
    Improper { num: usize, den: usize },
    #[error("analytic step response needs a denominator of degree 1 or 2 with nonzero constant term")]
    UnsupportedOrder,
    #[error("invalid PID gains ({kp}, {ki}, {kd}): gains must be finite and nonnegative")]
    InvalidGains { kp: f64, ki: f64, kd: f64 },
}

/// Real polynomial with coefficients in ascending powers of `s`.
///
/// Trailing zeros are trimmed, so the zero polynomial is the empty vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly(Vec<f64>);

impl Poly {
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        while coeffs.last() == Some(&0.0) {
            coeffs.pop();
        }
        Poly(coeffs)
    }

    pub fn zero() -> Self {
        Poly(Vec::new())
    }

    pub fn constant(c: f64) -> Self {
        Poly::new(vec![c])
    }

    /// `s^k`.
    pub fn monomial(k: usize) -> Self {
        let mut c = vec![0.0; k + 1];
        c[k] = 1.0;
        Poly(c)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    /// Degree; `None` for the zero polynomial.
    pub fn degree(&self) -> Option<usize> {
        self.0.len().checked_sub(1)
    }

    pub fn leading(&self) -> f64 {
        self.0.last().copied().unwrap_or(0.0)
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, &c| acc * s + c)
    }

    pub fn scale(&self, k: f64) -> Poly {
        Poly::new(self.0.iter().map(|c| c * k).collect())
    }

    /// Multiply by `s^k`.
    pub fn shift(&self, k: usize) -> Poly {
        if self.is_zero() {
            return Poly::zero();
        }
        let mut c = vec![0.0; k];
        c.extend_from_slice(&self.0);
        Poly(c)
    }

    /// Routh–Hurwitz test: all roots strictly in the open left half-plane.
    pub fn is_hurwitz(&self) -> bool {
        let Some(deg) = self.degree() else {
            return false;
        };
        if deg == 0 {
            return true;
        }
        let sign = self.leading().signum();
        // Descending powers, normalised to a positive leading coefficient.
        let desc: Vec<f64> = self.0.iter().rev().map(|c| c * sign).collect();
        let width = deg / 2 + 1;
        let row = |offset: usize| -> Vec<f64> {
            (0..width)
                .map(|j| desc.get(offset + 2 * j).copied().unwrap_or(0.0))
                .collect()
        };
        let mut rows = vec![row(0), row(1)];
        for k in 2..=deg {
            let (prev, cur) = (&rows[k - 2], &rows[k - 1]);
            let pivot = cur[0];
            if pivot <= 0.0 {
                return false;
            }
            let next = (0..width)
                .map(|j| {
                    let a = prev.get(j + 1).copied().unwrap_or(0.0);
                    let b = cur.get(j + 1).copied().unwrap_or(0.0);
                    (pivot * a - prev[0] * b) / pivot
                })
                .collect();
            rows.push(next);
        }
        rows.iter().all(|r| r[0] > 0.0)
    }
}

impl Add for &Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        let n = self.0.len().max(rhs.0.len());
        Poly::new(
            (0..n)
                .map(|i| self.0.get(i).unwrap_or(&0.0) + rhs.0.get(i).unwrap_or(&0.0))
                .collect(),
        )
    }
}

impl Neg for &Poly {
    type Output = Poly;
    fn neg(self) -> Poly {
        self.scale(-1.0)
    }
}

impl Sub for &Poly {
    type Output = Poly;
    fn sub(self, rhs: &Poly) -> Poly {
        self + &(-rhs)
    }
}

impl Mul for &Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        if self.is_zero() || rhs.is_zero() {
            return Poly::zero();
        }
        let mut c = vec![0.0; self.0.len() + rhs.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in rhs.0.iter().enumerate() {
                c[i + j] += a * b;
            }
        }
        Poly::new(c)
    }
}

/// `num(s) / den(s)`. No common factors are ever cancelled implicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalTF {
    pub num: Poly,
    pub den: Poly,
}

impl RationalTF {
    pub fn new(num: Poly, den: Poly) -> Result<Self, XferError> {
        if den.is_zero() {
            return Err(XferError::ZeroDenominator);
        }
        Ok(Self { num, den })
    }

    pub fn eval(&self, s: f64) -> f64 {
        self.num.eval(s) / self.den.eval(s)
    }

    /// Multiply by the unit step `1/s`.
    pub fn times_step(&self) -> RationalTF {
        RationalTF {
            num: self.num.clone(),
            den: self.den.shift(1),
        }
    }

    pub fn series(&self, other: &RationalTF) -> RationalTF {
        RationalTF {
            num: &self.num * &other.num,
            den: &self.den * &other.den,
        }
    }

    /// Unity negative feedback `L / (1 + L)`.
    pub fn feedback(&self) -> RationalTF {
        RationalTF {
            num: self.num.clone(),
            den: &self.den + &self.num,
        }
    }

    /// `lim_{s -> inf} s F(s)`: the post-initial value `f(0+)` of the
    /// time function whose transform is `self`.
    pub fn initial_value(&self) -> Result<f64, XferError> {
        let den_deg = self.den.degree().ok_or(XferError::ZeroDenominator)?;
        let Some(num_deg) = self.num.degree() else {
            return Ok(0.0);
        };
        if num_deg >= den_deg {
            return Err(XferError::Improper {
                num: num_deg,
                den: den_deg,
            });
        }
        Ok(if num_deg + 1 == den_deg {
            self.num.leading() / self.den.leading()
        } else {
            0.0
        })
    }

    pub fn is_stable(&self) -> bool {
        self.den.is_hurwitz()
    }

    /// Unit-step response `y(t)` for `t >= 0` by closed-form inversion of
    /// `self / s`, for denominators of degree 1 or 2 with a nonzero constant
    /// term. Returns 0 for `t < 0`.
    pub fn step_response(&self, t: f64) -> Result<f64, XferError> {
        let d = self.den.coeffs();
        let deg = self.den.degree().ok_or(XferError::ZeroDenominator)?;
        if !(1..=2).contains(&deg) || d[0] == 0.0 {
            return Err(XferError::UnsupportedOrder);
        }
        if let Some(nd) = self.num.degree() {
            if nd > deg {
                return Err(XferError::Improper { num: nd, den: deg });
            }
        }
        if t < 0.0 {
            return Ok(0.0);
        }
        let n = |k: usize| self.num.coeffs().get(k).copied().unwrap_or(0.0);
        // Split off the direct feedthrough: T = c + R with R strictly proper.
        let c = if self.num.degree() == Some(deg) {
            n(deg) / d[deg]
        } else {
            0.0
        };
        let r: Vec<f64> = (0..deg).map(|k| n(k) - c * d[k]).collect();
        // R/s = A/s + (B s + C)/den   (degree 2), or A/s + B/den (degree 1).
        let a = r[0] / d[0];
        let transient = if deg == 1 {
            // (r0 - A d0 - A d1 s)/(s den) -> B/(d1 s + d0) with B = -A d1.
            -a * (-d[0] / d[1] * t).exp()
        } else {
            let b = -a * d[2];
            let cc = r[1] - a * d[1];
            let p = d[1] / d[2];
            let q = d[0] / d[2];
            let (b, cc) = (b / d[2], cc / d[2]);
            let disc = p * p / 4.0 - q;
            let alpha = p / 2.0;
            if disc < 0.0 {
                let w = (-disc).sqrt();
                (-alpha * t).exp() * (b * (w * t).cos() + (cc - b * alpha) / w * (w * t).sin())
            } else if disc > 0.0 {
                let sq = disc.sqrt();
                let (r1, r2) = (-alpha + sq, -alpha - sq);
                // (b s + cc)/((s - r1)(s - r2))
                let k1 = (b * r1 + cc) / (r1 - r2);
                let k2 = (b * r2 + cc) / (r2 - r1);
                k1 * (r1 * t).exp() + k2 * (r2 * t).exp()
            } else {
                // (b s + cc)/(s + alpha)^2 = b/(s+alpha) + (cc - b alpha)/(s+alpha)^2
                (-alpha * t).exp() * (b + (cc - b * alpha) * t)
            }
        };
        Ok(c + a + transient)
    }
}

fn fmt_coeffs(p: &Poly) -> String {
    serde_json::to_string(p.coeffs()).expect("finite coefficients serialise")
}

/// `"[num...] / [den...]"` with ascending coefficients.
impl fmt::Display for RationalTF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {}", fmt_coeffs(&self.num), fmt_coeffs(&self.den))
    }
}

/// PID gains `C(s) = kp + ki/s + kd s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl PidGains {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Result<Self, XferError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if ok(kp) && ok(ki) && ok(kd) {
            Ok(Self { kp, ki, kd })
        } else {
            Err(XferError::InvalidGains { kp, ki, kd })
        }
    }

    pub fn from_slice(x: &[f64]) -> Result<Self, XferError> {
        Self::new(x[0], x[1], x[2])
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.kp, self.ki, self.kd]
    }

    /// Controller transfer function. With integral action the `1/s` is
    /// cleared into `(kd s^2 + kp s + ki) / s`; without it, `kp + kd s`.
    pub fn transfer_function(&self) -> RationalTF {
        if self.ki == 0.0 {
            RationalTF {
                num: Poly::new(vec![self.kp, self.kd]),
                den: Poly::constant(1.0),
            }
        } else {
            RationalTF {
                num: Poly::new(vec![self.ki, self.kp, self.kd]),
                den: Poly::monomial(1),
            }
        }
    }
}

/// `G(s) = 1 / (s^n + a . (1, s, ..., s^{n-1}))` for one affine region.
pub fn region_tf(gradient: &[f64]) -> RationalTF {
    let n = gradient.len();
    let mut den = gradient.to_vec();
    den.push(1.0);
    debug_assert_eq!(den.len(), n + 1);
    RationalTF {
        num: Poly::constant(1.0),
        den: Poly::new(den),
    }
}

/// Same construction with the plant gradient at an operating point.
pub fn limit_tf(gradient_at_point: &[f64]) -> RationalTF {
    region_tf(gradient_at_point)
}

/// `T = C G / (1 + C G)` by polynomial arithmetic.
pub fn closed_loop(plant: &RationalTF, gains: &PidGains) -> RationalTF {
    gains.transfer_function().series(plant).feedback()
}

/// Post-initial state of the first-order loop `y' + a y = u` under PID
/// action on a unit step: `(y(0+), y'(0+))`.
pub fn post_initial_values(gains: &PidGains, a: f64) -> (f64, f64) {
    let d = 1.0 + gains.kd;
    (gains.kd / d, (gains.kp - a * gains.kd) / (d * d))
}

/// Closed-form unit-step response of `y' + 2y = u` with `C = 2.4 + 4/s + 0.25 s`,
/// multiplied by the unit step (zero for `t < 0`).
pub fn analytic_step_example1(t: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let decay = (-44.0 * t / 25.0).exp();
    let w = 8.0 * t / 25.0;
    1.0 - 0.8 * decay * w.cos() - 0.6 * decay * w.sin()
}

/// Time derivative of [`analytic_step_example1`] for `t > 0`.
pub fn analytic_step_example1_rate(t: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let (a, w) = (44.0 / 25.0, 8.0 / 25.0);
    let decay = (-a * t).exp();
    // d/dt of -e^{-at}(0.8 cos wt + 0.6 sin wt)
    decay * ((0.8 * a - 0.6 * w) * (w * t).cos() + (0.6 * a + 0.8 * w) * (w * t).sin())
}
