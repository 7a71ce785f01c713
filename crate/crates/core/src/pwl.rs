//! Continuous piecewise-linear interpolation over a simplicial partition.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::partition::{affine_matrix, PartitionError, SimplicialPartition, TOL_BARY};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ApproxError {
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error("interpolation system of simplex {0} is singular")]
    Singular(usize),
    #[error("f is not finite at vertex {index} ({point:?})")]
    NonFiniteValue { index: usize, point: Vec<f64> },
    #[error("csv: {0}")]
    Csv(String),
}

/// `Lin_i(y) = gradient . y + intercept` on one simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePiece {
    pub gradient: Vec<f64>,
    pub intercept: f64,
}

impl AffinePiece {
    pub fn eval(&self, y: &[f64]) -> f64 {
        self.gradient.iter().zip(y).map(|(a, x)| a * x).sum::<f64>() + self.intercept
    }

    pub fn gradient_norm(&self) -> f64 {
        self.gradient.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// Result of evaluating the interpolant, possibly outside its domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub simplex_index: usize,
    /// The query point was outside the domain and the boundary piece was continued.
    pub extrapolated: bool,
}

/// Piecewise-linear interpolant of a scalar function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PwlApprox {
    partition: SimplicialPartition,
    vertex_values: Vec<f64>,
    pieces: Vec<AffinePiece>,
}

impl PwlApprox {
    /// Interpolate `f` at the partition vertices and solve every simplex's
    /// `(n+1) x (n+1)` system for its affine coefficients.
    pub fn build<F>(f: F, partition: SimplicialPartition) -> Result<Self, ApproxError>
    where
        F: Fn(&[f64]) -> f64,
    {
        let n = partition.dim();
        let mut vertex_values = Vec::with_capacity(partition.vertices().len());
        for (index, v) in partition.vertices().iter().enumerate() {
            let value = f(v);
            if !value.is_finite() {
                return Err(ApproxError::NonFiniteValue {
                    index,
                    point: v.clone(),
                });
            }
            vertex_values.push(value);
        }

        let mut pieces = Vec::with_capacity(partition.h());
        for (index, simplex) in partition.simplices().iter().enumerate() {
            // Rows [P_j^T, 1] . (a, b) = f(P_j).
            let system = affine_matrix(partition.simplex_vertices(index), n).transpose();
            let rhs = DVector::from_iterator(n + 1, simplex.iter().map(|&v| vertex_values[v]));
            let sol = system
                .lu()
                .solve(&rhs)
                .filter(|s| s.iter().all(|x| x.is_finite()))
                .ok_or(ApproxError::Singular(index))?;
            pieces.push(AffinePiece {
                gradient: sol.rows(0, n).iter().copied().collect(),
                intercept: sol[n],
            });
        }

        Ok(Self {
            partition,
            vertex_values,
            pieces,
        })
    }

    pub fn partition(&self) -> &SimplicialPartition {
        &self.partition
    }

    pub fn vertex_values(&self) -> &[f64] {
        &self.vertex_values
    }

    pub fn pieces(&self) -> &[AffinePiece] {
        &self.pieces
    }

    /// `L_pwl = max_i |a_i|`.
    pub fn lipschitz(&self) -> f64 {
        self.pieces
            .iter()
            .map(AffinePiece::gradient_norm)
            .fold(0.0, f64::max)
    }

    /// Index of the lowest-numbered simplex containing `y`, `None` outside the domain.
    pub fn piece_index(&self, y: &[f64]) -> Option<usize> {
        if let Some(index) = self.piece_index_1d(y) {
            return index;
        }
        self.partition.locate(y).ok().map(|b| b.simplex_index)
    }

    // Allocation-free lookup for one-dimensional grids; `None` means "not applicable".
    fn piece_index_1d(&self, y: &[f64]) -> Option<Option<usize>> {
        let cells = match self.partition.cells_per_axis() {
            Some([c]) => *c,
            _ => return None,
        };
        let d = self.partition.domain();
        let (lo, hi) = (d.lower()[0], d.upper()[0]);
        let x = y[0];
        let slack = (hi - lo) * TOL_BARY;
        if !(x >= lo - slack && x <= hi + slack) {
            return Some(None);
        }
        let s = (x - lo) / (hi - lo) * cells as f64;
        let mut k = (s - TOL_BARY).floor().max(0.0) as usize;
        k = k.min(cells - 1);
        // Guard against rounding in `s` near interior knots.
        let lambda = self.partition.barycentric_in(k, y);
        if lambda.iter().all(|&l| l >= -TOL_BARY) {
            return Some(Some(k));
        }
        Some(self.partition.locate(y).ok().map(|b| b.simplex_index))
    }

    /// `Lin_h(y)`; rejects points outside the domain.
    pub fn evaluate(&self, y: &[f64]) -> Result<f64, ApproxError> {
        match self.piece_index(y) {
            Some(i) => Ok(self.pieces[i].eval(y)),
            None => Err(PartitionError::PointOutsideDomain { point: y.to_vec() }.into()),
        }
    }

    /// Evaluate with extrapolation: outside the domain the affine piece of the
    /// simplex holding the nearest boundary point is continued.
    pub fn evaluate_extrapolating(&self, y: &[f64]) -> Evaluation {
        if let Some(i) = self.piece_index(y) {
            return Evaluation {
                value: self.pieces[i].eval(y),
                simplex_index: i,
                extrapolated: false,
            };
        }
        let clamped = self.partition.domain().clamp(y);
        let i = self
            .piece_index(&clamped)
            .expect("clamped point lies in the domain");
        Evaluation {
            value: self.pieces[i].eval(y),
            simplex_index: i,
            extrapolated: true,
        }
    }

    /// Interpolated value via barycentric weights, `sum_j lambda_j f(P_j)`.
    pub fn evaluate_barycentric(&self, y: &[f64]) -> Result<f64, ApproxError> {
        let b = self.partition.locate(y)?;
        Ok(self.partition.simplices()[b.simplex_index]
            .iter()
            .zip(&b.lambda)
            .map(|(&v, l)| l * self.vertex_values[v])
            .sum())
    }

    /// The segment table, one row per simplex.
    pub fn segments(&self) -> Vec<Segment> {
        let n = self.partition.dim();
        self.pieces
            .iter()
            .enumerate()
            .map(|(index, piece)| {
                let ids = self.partition.simplices()[index].clone();
                // For intervals also record the cell and its left knot value.
                let interval = (n == 1).then(|| {
                    let lo = self.partition.vertices()[ids[0]][0];
                    let hi = self.partition.vertices()[ids[1]][0];
                    (lo, hi, self.vertex_values[ids[0]])
                });
                Segment {
                    index,
                    vertex_ids: ids,
                    gradient: piece.gradient.clone(),
                    intercept: piece.intercept,
                    cell_lo: interval.map(|i| i.0),
                    cell_hi: interval.map(|i| i.1),
                    knot_value: interval.map(|i| i.2),
                }
            })
            .collect()
    }

    /// CSV segment table: `index, v0..vn, a0..a{n-1}, b` (plus `cell_lo, cell_hi, knot_value` for n = 1).
    pub fn segments_csv(&self) -> Result<String, ApproxError> {
        let n = self.partition.dim();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["index".to_string()];
        header.extend((0..=n).map(|j| format!("v{j}")));
        header.extend((0..n).map(|k| format!("a{k}")));
        header.push("b".into());
        if n == 1 {
            header.extend(["cell_lo", "cell_hi", "knot_value"].map(String::from));
        }
        let csv_err = |e: csv::Error| ApproxError::Csv(e.to_string());
        w.write_record(&header).map_err(csv_err)?;
        for s in self.segments() {
            let mut row = vec![s.index.to_string()];
            row.extend(s.vertex_ids.iter().map(|v| v.to_string()));
            row.extend(s.gradient.iter().map(|a| a.to_string()));
            row.push(s.intercept.to_string());
            if let (Some(lo), Some(hi), Some(k)) = (s.cell_lo, s.cell_hi, s.knot_value) {
                row.extend([lo, hi, k].map(|x| x.to_string()));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| ApproxError::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub vertex_ids: Vec<usize>,
    pub gradient: Vec<f64>,
    pub intercept: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_lo: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_hi: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knot_value: Option<f64>,
}

/// Interpolation error and Lipschitz certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxCertificate {
    /// `0.5 * hessian_bound * max_diam^2`, when a Hessian bound was supplied.
    pub sup_error_estimate: Option<f64>,
    pub sup_error_measured: f64,
    pub lipschitz_pwl: f64,
    pub hessian_bound_used: Option<f64>,
    pub max_diam: f64,
    pub samples: usize,
}

/// Default samples per axis for [`certify`].
pub fn default_sample_density(n: usize) -> usize {
    match n {
        1 => 1001,
        2 => 201,
        3 => 51,
        _ => 21,
    }
}

/// Measured sup error on a regular sample grid, the a-priori estimate, and `L_pwl`.
///
/// `hessian_bound` must bound the largest absolute Hessian eigenvalue of `f`
/// on the domain; it is not checked.
pub fn certify<F>(
    approx: &PwlApprox,
    f: F,
    hessian_bound: Option<f64>,
    samples_per_axis: usize,
) -> ApproxCertificate
where
    F: Fn(&[f64]) -> f64,
{
    let d = approx.partition().domain();
    let n = d.dim();
    let m = samples_per_axis.max(2);
    let total = m.pow(n as u32);
    let mut point = vec![0.0; n];
    let mut sup = 0.0_f64;
    for lin in 0..total {
        let mut rest = lin;
        for (k, p) in point.iter_mut().enumerate() {
            let i = rest % m;
            rest /= m;
            *p = if i == m - 1 {
                d.upper()[k]
            } else {
                d.lower()[k] + d.width(k) * i as f64 / (m - 1) as f64
            };
        }
        let lin_value = approx
            .evaluate(&point)
            .expect("sample points lie in the domain");
        sup = sup.max((f(&point) - lin_value).abs());
    }
    let max_diam = approx.partition().max_diam();
    ApproxCertificate {
        sup_error_estimate: hessian_bound.map(|hb| 0.5 * hb * max_diam * max_diam),
        sup_error_measured: sup,
        lipschitz_pwl: approx.lipschitz(),
        hessian_bound_used: hessian_bound,
        max_diam,
        samples: total,
    }
}

/// Lipschitz constant `sqrt(n - 1 + L^2)` of the companion field of an
/// order-`n` plant whose `f` is `L`-Lipschitz.
pub fn lifted_lipschitz(lipschitz: f64, n: usize) -> f64 {
    ((n.max(1) - 1) as f64 + lipschitz * lipschitz).sqrt()
}
