//! Simplicial partitions of axis-aligned boxes.
//!
//! The only constructor that ships with the crate is the Kuhn (Freudenthal)
//! triangulation of a regular grid: every grid cell is split into `n!`
//! simplices, one per ordering of the axes. For `n = 1` this is just the
//! sequence of consecutive intervals.

use itertools::Itertools;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Absolute tolerance on barycentric coordinates used by every containment test.
pub const TOL_BARY: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PartitionError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("domain must have at least one dimension")]
    EmptyDomain,
    #[error("invalid bounds on axis {axis}: lower {lower} is not below upper {upper}")]
    InvalidBounds { axis: usize, lower: f64, upper: f64 },
    #[error("cells_per_axis[{axis}] must be at least 1")]
    ZeroCells { axis: usize },
    #[error("point {point:?} lies outside the domain")]
    PointOutsideDomain { point: Vec<f64> },
    #[error("simplex {index} is degenerate")]
    DegenerateSimplex { index: usize },
    #[error("simplex {index} references vertex {vertex} out of range")]
    BadVertexIndex { index: usize, vertex: usize },
    #[error("simplex index {0} out of range")]
    BadSimplexIndex(usize),
}

/// Compact axis-aligned box `[lower_0, upper_0] x ... x [lower_{n-1}, upper_{n-1}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRecord", into = "BoxRecord")]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<BoxRecord> for BoxDomain {
    type Error = PartitionError;
    fn try_from(r: BoxRecord) -> Result<Self, Self::Error> {
        BoxDomain::new(r.lower, r.upper)
    }
}

impl From<BoxDomain> for BoxRecord {
    fn from(d: BoxDomain) -> Self {
        BoxRecord {
            lower: d.lower,
            upper: d.upper,
        }
    }
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, PartitionError> {
        if lower.is_empty() {
            return Err(PartitionError::EmptyDomain);
        }
        if lower.len() != upper.len() {
            return Err(PartitionError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (axis, (&lo, &hi)) in lower.iter().zip(&upper).enumerate() {
            // NaN fails this comparison too.
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(PartitionError::InvalidBounds {
                    axis,
                    lower: lo,
                    upper: hi,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// One-dimensional interval `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64) -> Result<Self, PartitionError> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.width(k)).product()
    }

    /// Containment with an absolute slack `tol` on every axis.
    pub fn contains(&self, point: &[f64], tol: f64) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&p, (&lo, &hi))| p >= lo - tol && p <= hi + tol)
    }

    /// Nearest point of the box.
    pub fn clamp(&self, point: &[f64]) -> Vec<f64> {
        point
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&p, (&lo, &hi))| p.clamp(lo, hi))
            .collect()
    }
}

/// Barycentric coordinates of a point with respect to one simplex of a partition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BarycentricCoords {
    pub lambda: Vec<f64>,
    pub simplex_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct GridInfo {
    cells_per_axis: Vec<usize>,
    /// Index of each axis permutation in the lexicographic ordering used for simplex ids.
    permutations: Vec<Vec<usize>>,
}

/// Simplicial partition of a box domain.
///
/// Immutable after construction. Per-simplex inverse affine matrices are
/// cached so that barycentric coordinates cost one small matrix-vector
/// product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRecord", into = "PartitionRecord")]
pub struct SimplicialPartition {
    domain: BoxDomain,
    vertices: Vec<Vec<f64>>,
    simplices: Vec<Vec<usize>>,
    max_diam: f64,
    grid: Option<GridInfo>,
    /// Row-major `(n+1) x (n+1)` inverse of `[vertices as columns; ones]` per simplex.
    inverses: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PartitionRecord {
    domain: BoxDomain,
    vertices: Vec<Vec<f64>>,
    simplices: Vec<Vec<usize>>,
    h: usize,
    max_diam: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cells_per_axis: Option<Vec<usize>>,
}

impl TryFrom<PartitionRecord> for SimplicialPartition {
    type Error = PartitionError;
    fn try_from(r: PartitionRecord) -> Result<Self, Self::Error> {
        if let Some(cells) = r.cells_per_axis {
            let grid = kuhn_partition(&r.domain, &cells)?;
            if grid.vertices == r.vertices && grid.simplices == r.simplices {
                return Ok(grid);
            }
        }
        SimplicialPartition::from_simplices(r.domain, r.vertices, r.simplices)
    }
}

impl From<SimplicialPartition> for PartitionRecord {
    fn from(p: SimplicialPartition) -> Self {
        PartitionRecord {
            h: p.simplices.len(),
            max_diam: p.max_diam,
            cells_per_axis: p.grid.map(|g| g.cells_per_axis),
            domain: p.domain,
            vertices: p.vertices,
            simplices: p.simplices,
        }
    }
}

/// Kuhn triangulation of the regular grid with `cells_per_axis[k]` cells along axis `k`.
///
/// Simplex ids are `cell * n! + permutation`, with cells linearised axis 0
/// fastest and permutations in lexicographic order.
pub fn kuhn_partition(
    domain: &BoxDomain,
    cells_per_axis: &[usize],
) -> Result<SimplicialPartition, PartitionError> {
    let n = domain.dim();
    if cells_per_axis.len() != n {
        return Err(PartitionError::DimensionMismatch {
            expected: n,
            got: cells_per_axis.len(),
        });
    }
    if let Some(axis) = cells_per_axis.iter().position(|&c| c == 0) {
        return Err(PartitionError::ZeroCells { axis });
    }

    let nodes: Vec<usize> = cells_per_axis.iter().map(|c| c + 1).collect();
    let step: Vec<f64> = (0..n)
        .map(|k| domain.width(k) / cells_per_axis[k] as f64)
        .collect();

    let vertex_count: usize = nodes.iter().product();
    let mut vertices = Vec::with_capacity(vertex_count);
    for lin in 0..vertex_count {
        let idx = unravel(lin, &nodes);
        let point = (0..n)
            .map(|k| {
                // Pin the last node exactly onto the upper bound.
                if idx[k] == cells_per_axis[k] {
                    domain.upper[k]
                } else {
                    domain.lower[k] + idx[k] as f64 * step[k]
                }
            })
            .collect();
        vertices.push(point);
    }

    let permutations: Vec<Vec<usize>> = (0..n).permutations(n).collect();
    let cell_count: usize = cells_per_axis.iter().product();
    let mut simplices = Vec::with_capacity(cell_count * permutations.len());
    for cell in 0..cell_count {
        let corner = unravel(cell, cells_per_axis);
        for perm in &permutations {
            let mut at = corner.clone();
            let mut simplex = Vec::with_capacity(n + 1);
            simplex.push(ravel(&at, &nodes));
            for &axis in perm {
                at[axis] += 1;
                simplex.push(ravel(&at, &nodes));
            }
            simplices.push(simplex);
        }
    }

    let mut partition = SimplicialPartition::assemble(domain.clone(), vertices, simplices)?;
    partition.grid = Some(GridInfo {
        cells_per_axis: cells_per_axis.to_vec(),
        permutations,
    });
    Ok(partition)
}

fn unravel(mut lin: usize, shape: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .map(|&s| {
            let i = lin % s;
            lin /= s;
            i
        })
        .collect()
}

fn ravel(idx: &[usize], shape: &[usize]) -> usize {
    idx.iter()
        .zip(shape)
        .rev()
        .fold(0, |acc, (&i, &s)| acc * s + i)
}

impl SimplicialPartition {
    /// Partition from explicit simplices. Coverage of the domain is the
    /// caller's responsibility; non-degeneracy is checked.
    pub fn from_simplices(
        domain: BoxDomain,
        vertices: Vec<Vec<f64>>,
        simplices: Vec<Vec<usize>>,
    ) -> Result<Self, PartitionError> {
        Self::assemble(domain, vertices, simplices)
    }

    fn assemble(
        domain: BoxDomain,
        vertices: Vec<Vec<f64>>,
        simplices: Vec<Vec<usize>>,
    ) -> Result<Self, PartitionError> {
        let n = domain.dim();
        for v in &vertices {
            if v.len() != n {
                return Err(PartitionError::DimensionMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        let mut inverses = Vec::with_capacity(simplices.len());
        let mut max_diam = 0.0_f64;
        for (index, simplex) in simplices.iter().enumerate() {
            if simplex.len() != n + 1 {
                return Err(PartitionError::DimensionMismatch {
                    expected: n + 1,
                    got: simplex.len(),
                });
            }
            if let Some(&vertex) = simplex.iter().find(|&&v| v >= vertices.len()) {
                return Err(PartitionError::BadVertexIndex { index, vertex });
            }
            let m = affine_matrix(simplex.iter().map(|&v| vertices[v].as_slice()), n);
            let inv = m
                .try_inverse()
                .filter(|inv| inv.iter().all(|x| x.is_finite()))
                .ok_or(PartitionError::DegenerateSimplex { index })?;
            inverses.push(inv.transpose().as_slice().to_vec());
            for (a, b) in simplex.iter().tuple_combinations() {
                max_diam = max_diam.max(distance(&vertices[*a], &vertices[*b]));
            }
        }
        Ok(Self {
            domain,
            vertices,
            simplices,
            max_diam,
            grid: None,
            inverses,
        })
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    pub fn simplices(&self) -> &[Vec<usize>] {
        &self.simplices
    }

    /// Number of simplices.
    pub fn h(&self) -> usize {
        self.simplices.len()
    }

    pub fn max_diam(&self) -> f64 {
        self.max_diam
    }

    /// Grid resolution, when the partition came from [`kuhn_partition`].
    pub fn cells_per_axis(&self) -> Option<&[usize]> {
        self.grid.as_ref().map(|g| g.cells_per_axis.as_slice())
    }

    pub fn simplex_vertices(&self, index: usize) -> impl Iterator<Item = &[f64]> + '_ {
        self.simplices[index]
            .iter()
            .map(move |&v| self.vertices[v].as_slice())
    }

    /// Barycentric coordinates of `point` in simplex `index`, without any containment check.
    pub fn barycentric_in(&self, index: usize, point: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let inv = &self.inverses[index];
        (0..=n)
            .map(|row| {
                let r = &inv[row * (n + 1)..(row + 1) * (n + 1)];
                r[..n].iter().zip(point).map(|(a, p)| a * p).sum::<f64>() + r[n]
            })
            .collect()
    }

    /// `|det(edge matrix)| / n!`.
    pub fn simplex_volume(&self, index: usize) -> Result<f64, PartitionError> {
        if index >= self.simplices.len() {
            return Err(PartitionError::BadSimplexIndex(index));
        }
        let pts: Vec<&[f64]> = self.simplex_vertices(index).collect();
        Ok(simplex_volume_of(&pts))
    }

    /// Lowest-index simplex containing `point`, with its barycentric coordinates.
    pub fn locate(&self, point: &[f64]) -> Result<BarycentricCoords, PartitionError> {
        let n = self.dim();
        if point.len() != n {
            return Err(PartitionError::DimensionMismatch {
                expected: n,
                got: point.len(),
            });
        }
        let outside = || PartitionError::PointOutsideDomain {
            point: point.to_vec(),
        };
        if !point.iter().all(|p| p.is_finite()) {
            return Err(outside());
        }
        let slack: f64 = (0..n)
            .map(|k| self.domain.width(k))
            .fold(0.0, f64::max)
            * TOL_BARY;
        if !self.domain.contains(point, slack) {
            return Err(outside());
        }
        match &self.grid {
            Some(grid) => self.locate_in_grid(grid, point),
            None => self.locate_scan(0..self.simplices.len(), point),
        }
        .ok_or_else(outside)
    }

    fn contains_coords(lambda: &[f64]) -> bool {
        lambda.iter().all(|&l| l >= -TOL_BARY) && (lambda.iter().sum::<f64>() - 1.0).abs() <= TOL_BARY
    }

    fn locate_scan(
        &self,
        candidates: impl IntoIterator<Item = usize>,
        point: &[f64],
    ) -> Option<BarycentricCoords> {
        candidates.into_iter().find_map(|index| {
            let lambda = self.barycentric_in(index, point);
            Self::contains_coords(&lambda).then_some(BarycentricCoords {
                lambda,
                simplex_index: index,
            })
        })
    }

    fn locate_in_grid(&self, grid: &GridInfo, point: &[f64]) -> Option<BarycentricCoords> {
        let n = self.dim();
        // Cells whose closure (inflated by the tolerance) holds the point, per axis.
        let per_axis: Vec<Vec<usize>> = (0..n)
            .map(|k| {
                let cells = grid.cells_per_axis[k];
                let s = (point[k] - self.domain.lower[k]) / self.domain.width(k) * cells as f64;
                let lo = (s - TOL_BARY).floor().max(0.0) as usize;
                let hi = ((s + TOL_BARY).floor().max(0.0) as usize).min(cells - 1);
                (lo.min(cells - 1)..=hi).collect()
            })
            .collect();
        let per_cell = grid.permutations.len();
        let mut candidates: Vec<usize> = per_axis
            .iter()
            .multi_cartesian_product()
            .flat_map(|idx| {
                let idx: Vec<usize> = idx.into_iter().copied().collect();
                let cell = ravel(&idx, &grid.cells_per_axis);
                (0..per_cell).map(move |p| cell * per_cell + p)
            })
            .collect();
        candidates.sort_unstable();
        self.locate_scan(candidates, point)
    }
}

/// `(n+1) x (n+1)` matrix whose columns are `[vertex; 1]`.
pub(crate) fn affine_matrix<'a>(points: impl Iterator<Item = &'a [f64]>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n + 1, n + 1);
    for (j, p) in points.enumerate() {
        for k in 0..n {
            m[(k, j)] = p[k];
        }
        m[(n, j)] = 1.0;
    }
    m
}

/// Volume of the simplex spanned by `points` (n+1 points in R^n).
pub fn simplex_volume_of(points: &[&[f64]]) -> f64 {
    let n = points.len() - 1;
    let edges = DMatrix::from_fn(n, n, |r, c| points[c + 1][r] - points[0][r]);
    let factorial: f64 = (1..=n).map(|k| k as f64).product();
    edges.determinant().abs() / factorial
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn example_two_intervals() {
        let d = BoxDomain::interval(-3.0, 3.0).unwrap();
        let p = kuhn_partition(&d, &[6]).unwrap();
        assert_eq!(p.h(), 6);
        assert_abs_diff_eq!(p.max_diam(), 1.0, epsilon = 1e-15);
        for (i, s) in p.simplices().iter().enumerate() {
            let lo = p.vertices()[s[0]][0];
            let hi = p.vertices()[s[1]][0];
            assert_abs_diff_eq!(lo, -3.0 + i as f64, epsilon = 1e-15);
            assert_abs_diff_eq!(hi, -2.0 + i as f64, epsilon = 1e-15);
            assert_abs_diff_eq!(p.simplex_volume(i).unwrap(), 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn unit_interval_single_cell() {
        let p = kuhn_partition(&BoxDomain::interval(0.0, 1.0).unwrap(), &[1]).unwrap();
        assert_eq!(p.h(), 1);
        assert_eq!(p.max_diam(), 1.0);
        assert_eq!(p.simplex_volume(0).unwrap(), 1.0);
        let b = p.locate(&[0.0]).unwrap();
        assert_eq!(b.simplex_index, 0);
        assert_abs_diff_eq!(b.lambda[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.lambda[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn unit_square_two_triangles() {
        let d = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let p = kuhn_partition(&d, &[1, 1]).unwrap();
        assert_eq!(p.h(), 2);
        assert_abs_diff_eq!(p.max_diam(), 2f64.sqrt(), epsilon = 1e-15);
        for i in 0..2 {
            assert_abs_diff_eq!(p.simplex_volume(i).unwrap(), 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn h_counts_factorial_times_cells() {
        let d = BoxDomain::new(vec![0.0; 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = kuhn_partition(&d, &[2, 3, 1]).unwrap();
        assert_eq!(p.h(), 6 * 6);
        let total: f64 = (0..p.h()).map(|i| p.simplex_volume(i).unwrap()).sum();
        assert_abs_diff_eq!(total, d.volume(), epsilon = 1e-12);
    }

    #[test]
    fn midpoint_of_second_interval() {
        let p = kuhn_partition(&BoxDomain::interval(-3.0, 3.0).unwrap(), &[6]).unwrap();
        let b = p.locate(&[-2.5]).unwrap();
        assert_eq!(b.simplex_index, 0);
        assert_abs_diff_eq!(b.lambda[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(b.lambda[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn knot_goes_to_lowest_index() {
        let p = kuhn_partition(&BoxDomain::interval(-3.0, 3.0).unwrap(), &[6]).unwrap();
        assert_eq!(p.locate(&[0.0]).unwrap().simplex_index, 2);
        assert_eq!(p.locate(&[3.0]).unwrap().simplex_index, 5);
        assert_eq!(p.locate(&[-3.0]).unwrap().simplex_index, 0);
    }

    #[test]
    fn centroid_of_unit_triangle() {
        let d = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let p = SimplicialPartition::from_simplices(
            d,
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0, 1, 2]],
        )
        .unwrap();
        let b = p.locate(&[1.0 / 3.0, 1.0 / 3.0]).unwrap();
        for l in b.lambda {
            assert_abs_diff_eq!(l, 1.0 / 3.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(p.simplex_volume(0).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn rejects_outside_points_and_bad_input() {
        let p = kuhn_partition(&BoxDomain::interval(0.0, 1.0).unwrap(), &[4]).unwrap();
        assert!(matches!(
            p.locate(&[1.1]),
            Err(PartitionError::PointOutsideDomain { .. })
        ));
        assert!(p.locate(&[1.0 + 1e-12]).is_ok());
        assert!(matches!(
            p.locate(&[0.5, 0.5]),
            Err(PartitionError::DimensionMismatch { .. })
        ));
        let d = BoxDomain::interval(0.0, 1.0).unwrap();
        assert!(matches!(
            kuhn_partition(&d, &[2, 2]),
            Err(PartitionError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            kuhn_partition(&d, &[0]),
            Err(PartitionError::ZeroCells { axis: 0 })
        ));
        assert!(BoxDomain::interval(1.0, 1.0).is_err());
        assert!(p.simplex_volume(4).is_err());
    }

    #[test]
    fn degenerate_simplex_rejected() {
        let d = BoxDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let err = SimplicialPartition::from_simplices(
            d,
            vec![vec![0.0, 0.0], vec![0.5, 0.5], vec![1.0, 1.0]],
            vec![vec![0, 1, 2]],
        )
        .unwrap_err();
        assert_eq!(err, PartitionError::DegenerateSimplex { index: 0 });
    }

    #[test]
    fn doubling_cells_halves_diameter() {
        let d = BoxDomain::new(vec![-1.0, 0.0], vec![1.0, 3.0]).unwrap();
        let mut prev = kuhn_partition(&d, &[2, 3]).unwrap().max_diam();
        for k in 1..4 {
            let c = 1 << k;
            let next = kuhn_partition(&d, &[2 * c, 3 * c]).unwrap().max_diam();
            assert_abs_diff_eq!(next, prev / 2.0, epsilon = 1e-14);
            prev = next;
        }
    }

    #[test]
    fn json_round_trip() {
        let d = BoxDomain::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap();
        let p = kuhn_partition(&d, &[2, 1]).unwrap();
        let text = serde_json::to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["domain", "vertices", "simplices", "h", "max_diam"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: SimplicialPartition = serde_json::from_str(&text).unwrap();
        assert_eq!(back, p);
    }
}
