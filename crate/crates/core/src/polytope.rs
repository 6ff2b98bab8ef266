//! Halfspace-represented polytopes with vertices and diameter cached at
//! construction.
//!
//! Vertex enumeration intersects every `n`-subset of the bounding
//! hyperplanes and keeps the feasible solutions, which is adequate for the
//! low dimensions (`n <= 4`) handled here. One-dimensional systems reduce to
//! an interval directly.

use microlp::OptimizationDirection;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{self, FEASIBILITY_TOL, LpOutcome};

/// Largest dimension for which vertices are enumerated.
pub const MAX_VERTEX_DIM: usize = 4;

/// Relative tolerance for point membership, scaled by the polytope diameter.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// `normal · x <= offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(Vec<f64>, f64)", into = "(Vec<f64>, f64)")]
pub struct Halfspace {
    pub normal: Vec<f64>,
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: Vec<f64>, offset: f64) -> Self {
        Self { normal, offset }
    }

    /// Signed violation `normal · x - offset`.
    pub fn violation(&self, x: &[f64]) -> f64 {
        dot(&self.normal, x) - self.offset
    }

    fn normal_norm(&self) -> f64 {
        self.normal.iter().map(|c| c * c).sum::<f64>().sqrt()
    }
}

impl From<(Vec<f64>, f64)> for Halfspace {
    fn from((normal, offset): (Vec<f64>, f64)) -> Self {
        Self { normal, offset }
    }
}

impl From<Halfspace> for (Vec<f64>, f64) {
    fn from(h: Halfspace) -> Self {
        (h.normal, h.offset)
    }
}

#[derive(Debug, Clone)]
enum Shape {
    Empty,
    Unbounded,
    Bounded {
        lower: Vec<f64>,
        upper: Vec<f64>,
        vertices: Option<Vec<Vec<f64>>>,
        diameter: Option<f64>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<Halfspace>", into = "Vec<Halfspace>")]
pub struct Polytope {
    dim: usize,
    halfspaces: Vec<Halfspace>,
    shape: Shape,
}

impl PartialEq for Polytope {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.halfspaces == other.halfspaces
    }
}

impl TryFrom<Vec<Halfspace>> for Polytope {
    type Error = Error;

    fn try_from(halfspaces: Vec<Halfspace>) -> Result<Self> {
        let dim = halfspaces
            .first()
            .map(|h| h.normal.len())
            .ok_or_else(|| Error::Format("polytope needs at least one halfspace".into()))?;
        Polytope::new(dim, halfspaces)
    }
}

impl From<Polytope> for Vec<Halfspace> {
    fn from(p: Polytope) -> Self {
        p.halfspaces
    }
}

impl Polytope {
    pub fn new(dim: usize, halfspaces: Vec<Halfspace>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("polytope dimension must be positive".into()));
        }
        for h in &halfspaces {
            if h.normal.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: h.normal.len(),
                });
            }
            if !h.offset.is_finite() || h.normal.iter().any(|c| !c.is_finite()) {
                return Err(Error::Input("halfspace coefficients must be finite".into()));
            }
        }
        let shape = if dim == 1 {
            interval_shape(&halfspaces)
        } else {
            general_shape(dim, &halfspaces)?
        };
        Ok(Self {
            dim,
            halfspaces,
            shape,
        })
    }

    /// The closed interval `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(
            1,
            vec![Halfspace::new(vec![1.0], hi), Halfspace::new(vec![-1.0], -lo)],
        )
    }

    /// Axis-aligned box with the given corners.
    pub fn from_box(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        let dim = lower.len();
        let mut hs = Vec::with_capacity(2 * dim);
        for d in 0..dim {
            let mut e = vec![0.0; dim];
            e[d] = 1.0;
            hs.push(Halfspace::new(e.clone(), upper[d]));
            e[d] = -1.0;
            hs.push(Halfspace::new(e, -lower[d]));
        }
        Self::new(dim, hs)
    }

    pub fn point(x: &[f64]) -> Result<Self> {
        Self::from_box(x, x)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn halfspaces(&self) -> &[Halfspace] {
        &self.halfspaces
    }

    pub fn is_feasible(&self) -> bool {
        !matches!(self.shape, Shape::Empty)
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self.shape, Shape::Bounded { .. } | Shape::Empty)
    }

    fn bounded(&self) -> Result<(&[f64], &[f64], Option<&Vec<Vec<f64>>>, Option<f64>)> {
        match &self.shape {
            Shape::Empty => Err(Error::EmptyRegion),
            Shape::Unbounded => Err(Error::UnboundedRegion),
            Shape::Bounded {
                lower,
                upper,
                vertices,
                diameter,
            } => Ok((lower, upper, vertices.as_ref(), *diameter)),
        }
    }

    /// Coordinate-wise bounds of the polytope.
    pub fn bounding_box(&self) -> Result<(&[f64], &[f64])> {
        let (lo, hi, _, _) = self.bounded()?;
        Ok((lo, hi))
    }

    pub fn vertices(&self) -> Result<&[Vec<f64>]> {
        match self.bounded()?.2 {
            Some(v) => Ok(v),
            None => Err(Error::Input(format!(
                "vertex enumeration supports dimension <= {MAX_VERTEX_DIM}, got {}",
                self.dim
            ))),
        }
    }

    /// Largest distance between two points of the polytope.
    pub fn diameter(&self) -> Result<f64> {
        match self.bounded()?.3 {
            Some(d) => Ok(d),
            None => Err(Error::Input(format!(
                "diameter supports dimension <= {MAX_VERTEX_DIM}, got {}",
                self.dim
            ))),
        }
    }

    /// `Some((lo, hi))` for a non-empty bounded interval.
    pub fn interval_bounds(&self) -> Option<(f64, f64)> {
        match (&self.shape, self.dim) {
            (Shape::Bounded { lower, upper, .. }, 1) => Some((lower[0], upper[0])),
            _ => None,
        }
    }

    fn membership_scale(&self) -> f64 {
        match &self.shape {
            Shape::Bounded {
                diameter: Some(d), ..
            } => d.max(1.0),
            _ => 1.0,
        }
    }

    /// Membership with the default relative tolerance.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.contains_with(x, MEMBERSHIP_TOL)
    }

    /// Membership where each halfspace may be violated by `rel_tol` times
    /// the diameter (at least 1) in normal-length units.
    pub fn contains_with(&self, x: &[f64], rel_tol: f64) -> bool {
        if x.len() != self.dim || !self.is_feasible() {
            return false;
        }
        let scale = rel_tol * self.membership_scale();
        self.halfspaces
            .iter()
            .all(|h| h.violation(x) <= scale * h.normal_norm().max(f64::MIN_POSITIVE))
    }

    /// Polytope with the halfspaces of both operands.
    pub fn intersection(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut hs = self.halfspaces.clone();
        hs.extend(other.halfspaces.iter().cloned());
        Polytope::new(self.dim, hs)
    }

    /// Closed-set intersection test; touching at a boundary counts.
    pub fn intersects(&self, other: &Polytope) -> Result<bool> {
        if !self.is_feasible() || !other.is_feasible() {
            if self.dim != other.dim {
                return Err(Error::DimensionMismatch {
                    expected: self.dim,
                    got: other.dim,
                });
            }
            return Ok(false);
        }
        Ok(self.intersection(other)?.is_feasible())
    }

    pub fn with_halfspace(&self, h: Halfspace) -> Result<Polytope> {
        let mut hs = self.halfspaces.clone();
        hs.push(h);
        Polytope::new(self.dim, hs)
    }

    /// Uniform grid over the bounding box with `resolution` points per
    /// axis. Degenerate axes contribute one coordinate.
    pub fn grid_spec(&self, resolution: usize) -> Result<Grid> {
        if resolution < 2 {
            return Err(Error::Input("grid resolution must be at least 2".into()));
        }
        let (lo, hi) = self.bounding_box()?;
        let axes = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| {
                if h - l <= 1e-12 * (1.0 + l.abs().max(h.abs())) {
                    vec![l]
                } else {
                    (0..resolution)
                        .map(|i| l + (h - l) * i as f64 / (resolution - 1) as f64)
                        .collect()
                }
            })
            .collect();
        Ok(Grid { axes })
    }

    /// Grid points inside the polytope, last axis fastest, with the spacing
    /// per axis.
    pub fn grid(&self, resolution: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let grid = self.grid_spec(resolution)?;
        let points = (0..grid.len())
            .map(|i| grid.point(i))
            .filter(|x| self.contains(x))
            .collect();
        Ok((points, grid.spacing()))
    }
}

/// Uniform tensor grid addressed by a flat index.
#[derive(Debug, Clone)]
pub struct Grid {
    axes: Vec<Vec<f64>>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, mut index: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.axes.len()];
        for (d, axis) in self.axes.iter().enumerate().rev() {
            x[d] = axis[index % axis.len()];
            index /= axis.len();
        }
        x
    }

    pub fn spacing(&self) -> Vec<f64> {
        self.axes
            .iter()
            .map(|a| if a.len() > 1 { a[1] - a[0] } else { 0.0 })
            .collect()
    }

    /// Length of one cell diagonal.
    pub fn cell_diagonal(&self) -> f64 {
        self.spacing().iter().map(|h| h * h).sum::<f64>().sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn interval_shape(halfspaces: &[Halfspace]) -> Shape {
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for h in halfspaces {
        let c = h.normal[0];
        if c > 0.0 {
            hi = hi.min(h.offset / c);
        } else if c < 0.0 {
            lo = lo.max(h.offset / c);
        } else if h.offset < -FEASIBILITY_TOL * (1.0 + h.offset.abs()) {
            return Shape::Empty;
        }
    }
    if lo.is_finite() && hi.is_finite() {
        let tol = FEASIBILITY_TOL * (1.0 + lo.abs().max(hi.abs()));
        if lo > hi + tol {
            return Shape::Empty;
        }
        if lo > hi {
            let mid = 0.5 * (lo + hi);
            lo = mid;
            hi = mid;
        }
        let vertices = if hi > lo { vec![vec![lo], vec![hi]] } else { vec![vec![lo]] };
        Shape::Bounded {
            lower: vec![lo],
            upper: vec![hi],
            vertices: Some(vertices),
            diameter: Some(hi - lo),
        }
    } else if lo > hi {
        Shape::Empty
    } else {
        Shape::Unbounded
    }
}

fn general_shape(dim: usize, halfspaces: &[Halfspace]) -> Result<Shape> {
    let Some(anchor) = lp::feasible_point(dim, halfspaces)? else {
        return Ok(Shape::Empty);
    };
    let mut lower = vec![0.0; dim];
    let mut upper = vec![0.0; dim];
    for d in 0..dim {
        let mut e = vec![0.0; dim];
        e[d] = 1.0;
        for (sense, slot) in [
            (OptimizationDirection::Minimize, &mut lower),
            (OptimizationDirection::Maximize, &mut upper),
        ] {
            // Exact offsets first; the relaxed system covers near-degenerate
            // polytopes that only pass the tolerant feasibility test.
            let mut outcome = lp::optimize(dim, halfspaces, &e, sense, 0.0)?;
            if matches!(outcome, LpOutcome::Infeasible) {
                outcome = lp::optimize(dim, halfspaces, &e, sense, FEASIBILITY_TOL)?;
            }
            match outcome {
                LpOutcome::Optimal { value, .. } => slot[d] = value,
                LpOutcome::Unbounded => return Ok(Shape::Unbounded),
                LpOutcome::Infeasible => return Ok(Shape::Empty),
            }
        }
    }
    let (vertices, diameter) = if dim <= MAX_VERTEX_DIM {
        let mut v = enumerate_vertices(dim, halfspaces);
        if v.is_empty() {
            v.push(anchor);
        }
        let d = max_pairwise_distance(&v);
        (Some(v), Some(d))
    } else {
        (None, None)
    };
    Ok(Shape::Bounded {
        lower,
        upper,
        vertices,
        diameter,
    })
}

fn enumerate_vertices(dim: usize, halfspaces: &[Halfspace]) -> Vec<Vec<f64>> {
    let active: Vec<&Halfspace> = halfspaces
        .iter()
        .filter(|h| h.normal.iter().any(|c| *c != 0.0))
        .collect();
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut subset: Vec<usize> = (0..dim).collect();
    if active.len() < dim {
        return found;
    }
    loop {
        let a = DMatrix::from_fn(dim, dim, |r, c| active[subset[r]].normal[c]);
        let b = DVector::from_fn(dim, |r, _| active[subset[r]].offset);
        if let Some(x) = a.lu().solve(&b) {
            let x: Vec<f64> = x.iter().copied().collect();
            let scale = 1.0 + x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let ok = x.iter().all(|v| v.is_finite())
                && halfspaces.iter().all(|h| {
                    h.violation(&x) <= FEASIBILITY_TOL * (scale * h.normal_norm() + h.offset.abs())
                });
            if ok && !found.iter().any(|y| distance(y, &x) <= 1e-9 * scale) {
                found.push(x);
            }
        }
        // next combination
        let mut i = dim;
        loop {
            if i == 0 {
                return found;
            }
            i -= 1;
            if subset[i] < active.len() - dim + i {
                subset[i] += 1;
                for j in i + 1..dim {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn max_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut best = 0.0f64;
    for (i, p) in points.iter().enumerate() {
        for q in &points[i + 1..] {
            best = best.max(distance(p, q));
        }
    }
    best
}
