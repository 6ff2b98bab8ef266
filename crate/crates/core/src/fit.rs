//! Fitting min-max-affine surrogates to sampled objectives.

use std::collections::HashSet;

use microlp::{ComparisonOp, OptimizationDirection, Problem, Variable};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ScalarField, grid_extremes};
use crate::lp::{free_vars, solve};
use crate::mmps::{AffineMap, ConvexSegment, MmpsFunction};
use crate::modulus::{
    CurveOptions, SensitivityReport, default_grid_resolution, lower_bound_modulus, modulus_curve_with,
    verify_bound,
};
use crate::polytope::{Halfspace, Polytope, distance};

pub const DEFAULT_MAX_ITERATIONS: usize = 50;
pub const DEFAULT_RESTARTS: usize = 5;
/// Smallest slope increase between neighbouring cells of a partitioned fit.
pub const DEFAULT_MIN_SLOPE_GAP: f64 = 0.01;
/// Relative slack on the minimax error while polishing with the L1 objective.
pub const MINIMAX_POLISH_SLACK: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FitObjective {
    #[default]
    #[serde(rename = "linf")]
    LInf,
    L1,
}

impl FitObjective {
    fn score(self, residuals: impl Iterator<Item = f64>) -> f64 {
        match self {
            Self::LInf => residuals.map(f64::abs).fold(0.0, f64::max),
            Self::L1 => residuals.map(f64::abs).sum(),
        }
    }
}

impl std::str::FromStr for FitObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(Self::LInf),
            "l1" => Ok(Self::L1),
            other => Err(Error::Input(format!("unknown objective {other:?}, expected linf or l1"))),
        }
    }
}

/// Objective values on a uniform grid over a polytope.
#[derive(Debug, Clone)]
pub struct SampleSet {
    points: Vec<Vec<f64>>,
    values: Vec<f64>,
    domain: Polytope,
    resolution: usize,
}

impl SampleSet {
    pub fn new(points: Vec<Vec<f64>>, values: Vec<f64>, domain: Polytope, resolution: usize) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::Input("points and values differ in length".into()));
        }
        if let Some(x) = points.iter().find(|x| !domain.contains(x)) {
            return Err(Error::DomainViolation { point: x.clone() });
        }
        Ok(Self {
            points,
            values,
            domain,
            resolution,
        })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn domain(&self) -> &Polytope {
        &self.domain
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Largest absolute residual of `model` over the samples.
    pub fn max_residual(&self, model: &dyn ScalarField) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (x, y) in self.points.iter().zip(&self.values) {
            worst = worst.max((model.eval(x)? - y).abs());
        }
        Ok(worst)
    }
}

/// Evaluates `f` on a uniform grid over the bounding box of `domain`,
/// keeping the points inside the polytope.
pub fn sample(f: &dyn ScalarField, domain: &Polytope, resolution: usize) -> Result<SampleSet> {
    if f.dim() != domain.dim() {
        return Err(Error::DimensionMismatch {
            expected: domain.dim(),
            got: f.dim(),
        });
    }
    let grid = domain.grid_spec(resolution)?;
    let evaluated: Vec<Option<(Vec<f64>, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let x = grid.point(i);
            if !domain.contains(&x) {
                return Ok(None);
            }
            let v = f.eval_finite(&x)?;
            Ok(Some((x, v)))
        })
        .collect::<Result<_>>()?;
    let (points, values) = evaluated.into_iter().flatten().unzip();
    Ok(SampleSet {
        points,
        values,
        domain: domain.clone(),
        resolution,
    })
}

/// Options for the alternating max-affine fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentFitOptions {
    pub objective: FitObjective,
    pub max_iterations: usize,
    /// Total starts: one grid split plus seeded random partitions.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SegmentFitOptions {
    fn default() -> Self {
        Self {
            objective: FitObjective::LInf,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
        }
    }
}

fn add_row(problem: &mut Problem, terms: &[(Variable, f64)], op: ComparisonOp, rhs: f64) {
    let terms: Vec<(Variable, f64)> = terms.iter().copied().filter(|(_, c)| *c != 0.0).collect();
    problem.add_constraint(terms.as_slice(), op, rhs);
}

fn affine_terms(a: &[Variable], b: Variable, x: &[f64]) -> Vec<(Variable, f64)> {
    a.iter().copied().zip(x.iter().copied()).chain([(b, 1.0)]).collect()
}

/// Best affine map over the given samples under `objective`.
fn fit_affine(points: &[&[f64]], values: &[f64], dim: usize, objective: FitObjective) -> Result<AffineMap> {
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let a = free_vars(&mut problem, dim);
    let b = free_vars(&mut problem, 1)[0];
    let shared = match objective {
        FitObjective::LInf => Some(problem.add_var(1.0, (0.0, f64::INFINITY))),
        FitObjective::L1 => None,
    };
    for (x, &y) in points.iter().zip(values) {
        let err = shared.unwrap_or_else(|| problem.add_var(1.0, (0.0, f64::INFINITY)));
        let mut terms = affine_terms(&a, b, x);
        terms.push((err, -1.0));
        add_row(&mut problem, &terms, ComparisonOp::Le, y);
        terms.last_mut().unwrap().1 = 1.0;
        add_row(&mut problem, &terms, ComparisonOp::Ge, y);
    }
    let sol = solve(&problem)?;
    Ok(AffineMap::new(a.iter().map(|v| sol.var_value(*v)).collect(), sol.var_value(b)))
}

fn argmax_piece(pieces: &[Option<AffineMap>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut value = f64::NEG_INFINITY;
    for (q, p) in pieces.iter().enumerate() {
        if let Some(p) = p {
            let v = p.eval(x);
            if v > value {
                value = v;
                best = q;
            }
        }
    }
    best
}

fn max_affine(pieces: &[Option<AffineMap>], x: &[f64]) -> f64 {
    pieces.iter().flatten().map(|p| p.eval(x)).fold(f64::NEG_INFINITY, f64::max)
}

/// Per-axis cell counts with product `cells` minimizing the cell diagonal
/// of the box with the given extents.
fn split_counts(extents: &[f64], cells: usize) -> Vec<usize> {
    fn search(extents: &[f64], rest: usize, prefix: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
        let d = prefix.len();
        if d + 1 == extents.len() {
            prefix.push(rest);
            let diag: f64 = extents.iter().zip(prefix.iter()).map(|(e, c)| (e / *c as f64).powi(2)).sum();
            if best.as_ref().is_none_or(|(b, _)| diag < *b * (1.0 - 1e-12)) {
                *best = Some((diag, prefix.clone()));
            }
            prefix.pop();
            return;
        }
        for c in (1..=rest).filter(|c| rest % c == 0) {
            prefix.push(c);
            search(extents, rest / c, prefix, best);
            prefix.pop();
        }
    }
    let mut best = None;
    search(extents, cells, &mut Vec::new(), &mut best);
    best.map(|(_, c)| c).unwrap_or_default()
}

fn grid_labels(samples: &SampleSet, pieces: usize) -> Result<Vec<usize>> {
    let (lo, hi) = samples.domain.bounding_box()?;
    let extents: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| h - l).collect();
    let counts = split_counts(&extents, pieces);
    Ok(samples
        .points
        .iter()
        .map(|x| {
            counts.iter().enumerate().fold(0, |flat, (d, &c)| {
                let cell = if extents[d] > 0.0 {
                    (((x[d] - lo[d]) / extents[d] * c as f64).floor().max(0.0) as usize).min(c - 1)
                } else {
                    0
                };
                flat * c + cell
            })
        })
        .collect())
}

fn voronoi_labels(samples: &SampleSet, pieces: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres = rand::seq::index::sample(&mut rng, samples.len(), pieces).into_vec();
    samples
        .points
        .iter()
        .map(|x| {
            let mut best = (f64::INFINITY, 0);
            for (q, &c) in centres.iter().enumerate() {
                let d = distance(x, &samples.points[c]);
                if d < best.0 {
                    best = (d, q);
                }
            }
            best.1
        })
        .collect()
}

struct Candidate {
    pieces: Vec<AffineMap>,
    score: f64,
}

fn fit_labelled(samples: &SampleSet, labels: &[usize], q: usize, objective: FitObjective) -> Result<AffineMap> {
    let (points, values): (Vec<&[f64]>, Vec<f64>) = samples
        .points
        .iter()
        .zip(&samples.values)
        .zip(labels)
        .filter(|(_, l)| **l == q)
        .map(|((x, y), _)| (x.as_slice(), *y))
        .unzip();
    fit_affine(&points, &values, samples.dim(), objective)
}

/// Gives every piece with too few samples the neighbourhood of the worst
/// residual of the current model.
fn reseed_dead(
    samples: &SampleSet,
    labels: &mut [usize],
    fitted: &mut [Option<AffineMap>],
    objective: FitObjective,
) -> Result<()> {
    let n = samples.dim();
    let k = fitted.len();
    let take = (2 * (n + 1)).max(samples.len() / (2 * k)).min(samples.len());
    for q in 0..k {
        if fitted[q].is_some() {
            continue;
        }
        let mut worst = (f64::NEG_INFINITY, 0);
        for (i, (x, y)) in samples.points.iter().zip(&samples.values).enumerate() {
            let r = if fitted.iter().any(Option::is_some) {
                (max_affine(fitted, x) - y).abs()
            } else {
                0.0
            };
            if r > worst.0 {
                worst = (r, i);
            }
        }
        let anchor = &samples.points[worst.1];
        let mut order: Vec<(f64, usize)> = samples
            .points
            .iter()
            .enumerate()
            .map(|(i, x)| (distance(x, anchor), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, i) in order.iter().take(take) {
            labels[i] = q;
        }
        fitted[q] = Some(fit_labelled(samples, labels, q, objective)?);
    }
    Ok(())
}

fn alternate(samples: &SampleSet, mut labels: Vec<usize>, k: usize, opts: &SegmentFitOptions) -> Result<Candidate> {
    let n = samples.dim();
    let mut best: Option<Candidate> = None;
    let mut seen = HashSet::new();
    for _ in 0..opts.max_iterations.max(1) {
        // Revisiting an assignment means the iteration has entered a cycle.
        if !seen.insert(labels.clone()) {
            break;
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        let mut fitted: Vec<Option<AffineMap>> = (0..k)
            .into_par_iter()
            .map(|q| {
                if counts[q] > n {
                    fit_labelled(samples, &labels, q, opts.objective).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;
        reseed_dead(samples, &mut labels, &mut fitted, opts.objective)?;
        let score = opts.objective.score(
            samples
                .points
                .iter()
                .zip(&samples.values)
                .map(|(x, y)| max_affine(&fitted, x) - y),
        );
        let pieces: Vec<AffineMap> = fitted.iter().flatten().cloned().collect();
        if best.as_ref().is_none_or(|b| score < b.score) {
            best = Some(Candidate { pieces, score });
        }
        let next: Vec<usize> = samples.points.iter().map(|x| argmax_piece(&fitted, x)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    best.ok_or_else(|| Error::Solver("no fit produced".into()))
}

/// Max-affine fit with default options.
pub fn fit_segment(samples: &SampleSet, pieces: usize, objective: FitObjective) -> Result<ConvexSegment> {
    fit_segment_with(
        samples,
        pieces,
        &SegmentFitOptions {
            objective,
            ..SegmentFitOptions::default()
        },
    )
}

/// Max-affine fit by alternating assignment: fit one affine map per group
/// of samples, regroup samples by the piece attaining the max, repeat.
/// The first start splits the bounding box into equal cells, the others
/// are seeded random partitions; the best start by the objective wins.
pub fn fit_segment_with(samples: &SampleSet, pieces: usize, opts: &SegmentFitOptions) -> Result<ConvexSegment> {
    if pieces == 0 {
        return Err(Error::Input("a segment needs at least one piece".into()));
    }
    let needed = pieces * (samples.dim() + 1);
    if samples.len() < needed {
        return Err(Error::InsufficientData {
            needed,
            got: samples.len(),
        });
    }
    let starts = if pieces == 1 { 1 } else { opts.restarts.max(1) };
    let mut initial = vec![grid_labels(samples, pieces)?];
    for s in 1..starts {
        initial.push(voronoi_labels(samples, pieces, opts.seed.wrapping_add(s as u64)));
    }
    let candidates: Vec<Candidate> = initial
        .into_par_iter()
        .map(|labels| alternate(samples, labels, pieces, opts))
        .collect::<Result<_>>()?;
    let best = candidates
        .into_iter()
        .reduce(|a, b| if b.score < a.score { b } else { a })
        .expect("at least one start");
    ConvexSegment::new(best.pieces, samples.domain.clone())
}

fn check_knots(knots: &[Vec<f64>], lo: &[f64], hi: &[f64]) -> Result<()> {
    if knots.len() != lo.len() {
        return Err(Error::DimensionMismatch {
            expected: lo.len(),
            got: knots.len(),
        });
    }
    for (d, axis) in knots.iter().enumerate() {
        let tol = 1e-9 * (1.0 + lo[d].abs().max(hi[d].abs()));
        if axis.len() < 2 || axis.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!("knots on axis {d} must be strictly increasing, at least two")));
        }
        if axis[0] > lo[d] + tol || axis[axis.len() - 1] < hi[d] - tol {
            return Err(Error::Input(format!("knots on axis {d} do not cover the domain")));
        }
    }
    Ok(())
}

// Interpolation weights of x within its knot interval.
fn hat_weights(axis: &[f64], x: f64) -> (usize, f64) {
    let k = (axis.partition_point(|t| *t <= x).max(1) - 1).min(axis.len() - 2);
    (k, (x - axis[k]) / (axis[k + 1] - axis[k]))
}

/// Separable convex fit on a fixed axis-aligned grid of cells: a sum over
/// axes of continuous piecewise-linear convex functions with kinks at the
/// knots, returned with one affine piece per cell.
///
/// Slopes increase by at least `min_slope_gap` at every interior knot, so
/// each piece's subregion is exactly its cell. With [`FitObjective::LInf`]
/// the minimax solution is polished with the L1 objective under an error
/// cap of `(1 + MINIMAX_POLISH_SLACK)` times the minimax error.
pub fn fit_partitioned(
    samples: &SampleSet,
    knots: &[Vec<f64>],
    objective: FitObjective,
    min_slope_gap: f64,
) -> Result<ConvexSegment> {
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    if !(min_slope_gap >= 0.0) {
        return Err(Error::Input("slope gap must be non-negative".into()));
    }
    let (lo, hi) = samples.domain.bounding_box()?;
    check_knots(knots, lo, hi)?;

    let rows: Vec<Vec<(usize, usize, f64)>> = samples
        .points
        .iter()
        .map(|x| {
            knots
                .iter()
                .enumerate()
                .map(|(d, axis)| {
                    let (k, l) = hat_weights(axis, x[d]);
                    (d, k, l)
                })
                .collect()
        })
        .collect();

    let build = |problem: &mut Problem| -> Vec<Vec<Variable>> {
        let vars: Vec<Vec<Variable>> = knots
            .iter()
            .enumerate()
            .map(|(d, axis)| {
                (0..axis.len())
                    .map(|k| {
                        // Pinning removes the constant shared between axes.
                        let bounds = if d > 0 && k == 0 { (0.0, 0.0) } else { (f64::NEG_INFINITY, f64::INFINITY) };
                        problem.add_var(0.0, bounds)
                    })
                    .collect()
            })
            .collect();
        for (axis, y) in knots.iter().zip(&vars) {
            for k in 1..axis.len() - 1 {
                let h0 = axis[k] - axis[k - 1];
                let h1 = axis[k + 1] - axis[k];
                let terms = [
                    (y[k + 1], 1.0 / h1),
                    (y[k], -1.0 / h1 - 1.0 / h0),
                    (y[k - 1], 1.0 / h0),
                ];
                add_row(problem, &terms, ComparisonOp::Ge, min_slope_gap);
            }
        }
        vars
    };
    let value_terms = |vars: &[Vec<Variable>], row: &[(usize, usize, f64)]| -> Vec<(Variable, f64)> {
        row.iter()
            .flat_map(|&(d, k, l)| [(vars[d][k], 1.0 - l), (vars[d][k + 1], l)])
            .collect()
    };
    let l1_stage = |cap: f64| -> Result<Vec<Vec<f64>>> {
        let mut problem = Problem::new(OptimizationDirection::Minimize);
        let vars = build(&mut problem);
        for (row, &y) in rows.iter().zip(&samples.values) {
            let e = problem.add_var(1.0, (0.0, cap));
            let mut terms = value_terms(&vars, row);
            terms.push((e, -1.0));
            add_row(&mut problem, &terms, ComparisonOp::Le, y);
            terms.last_mut().unwrap().1 = 1.0;
            add_row(&mut problem, &terms, ComparisonOp::Ge, y);
        }
        let sol = solve(&problem)?;
        Ok(vars.iter().map(|axis| axis.iter().map(|v| sol.var_value(*v)).collect()).collect())
    };

    let values = match objective {
        FitObjective::L1 => l1_stage(f64::INFINITY)?,
        FitObjective::LInf => {
            let mut problem = Problem::new(OptimizationDirection::Minimize);
            let vars = build(&mut problem);
            let t = problem.add_var(1.0, (0.0, f64::INFINITY));
            for (row, &y) in rows.iter().zip(&samples.values) {
                let mut terms = value_terms(&vars, row);
                terms.push((t, -1.0));
                add_row(&mut problem, &terms, ComparisonOp::Le, y);
                terms.last_mut().unwrap().1 = 1.0;
                add_row(&mut problem, &terms, ComparisonOp::Ge, y);
            }
            let minimax = solve(&problem)?.var_value(t);
            l1_stage(minimax * (1.0 + MINIMAX_POLISH_SLACK) + 1e-12)?
        }
    };

    // Per-axis (slope, intercept) of every cell.
    let axis_maps: Vec<Vec<(f64, f64)>> = knots
        .iter()
        .zip(&values)
        .map(|(axis, y)| {
            (0..axis.len() - 1)
                .map(|k| {
                    let s = (y[k + 1] - y[k]) / (axis[k + 1] - axis[k]);
                    (s, y[k] - s * axis[k])
                })
                .collect()
        })
        .collect();
    let total: usize = axis_maps.iter().map(Vec::len).product();
    let pieces = (0..total)
        .map(|mut flat| {
            let mut a = vec![0.0; axis_maps.len()];
            let mut b = 0.0;
            for (d, maps) in axis_maps.iter().enumerate().rev() {
                let (s, c) = maps[flat % maps.len()];
                flat /= maps.len();
                a[d] = s;
                b += c;
            }
            AffineMap::new(a, b)
        })
        .collect();
    ConvexSegment::new(pieces, samples.domain.clone())
}

/// Max of `|f - F|` on a grid, with the point where it occurs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    pub delta: f64,
    pub argmax_point: Vec<f64>,
    pub resolution: usize,
    /// Added to the grid maximum; zero unless a Lipschitz constant was given.
    pub padding: f64,
}

/// Grid estimate of the approximation error of `surrogate` over `region`.
pub fn estimate_delta(
    objective: &dyn ScalarField,
    surrogate: &dyn ScalarField,
    region: &Polytope,
    resolution: usize,
) -> Result<DeltaEstimate> {
    let grid = region.grid_spec(resolution)?;
    let ext = grid_extremes(&grid, region, objective, surrogate)?;
    let (delta, index) = ext.max_gap.ok_or(Error::EmptyRegion)?;
    Ok(DeltaEstimate {
        delta,
        argmax_point: grid.point(index),
        resolution,
        padding: 0.0,
    })
}

/// Grid estimate padded by `lipschitz` times half a cell diagonal, where
/// `lipschitz` bounds the Lipschitz constant of `surrogate - objective`.
pub fn estimate_delta_padded(
    objective: &dyn ScalarField,
    surrogate: &dyn ScalarField,
    region: &Polytope,
    resolution: usize,
    lipschitz: f64,
) -> Result<DeltaEstimate> {
    if !(lipschitz.is_finite() && lipschitz >= 0.0) {
        return Err(Error::Input("Lipschitz constant must be finite and non-negative".into()));
    }
    let mut est = estimate_delta(objective, surrogate, region, resolution)?;
    est.padding = lipschitz * region.grid_spec(resolution)?.cell_diagonal() / 2.0;
    est.delta += est.padding;
    Ok(est)
}

/// How the domain is split into segment regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    /// Explicit regions covering the domain with disjoint interiors.
    Regions(Vec<Polytope>),
    /// Equal slabs along the longest axis of the bounding box.
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PieceCount {
    Uniform(usize),
    PerRegion(Vec<usize>),
    /// Grows the piece count until the sampled error drops to `tolerance`.
    Adaptive { max_pieces: usize, tolerance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub partition: Partition,
    pub pieces: PieceCount,
    pub objective: FitObjective,
    /// Samples per axis in every region.
    pub resolution: usize,
    pub max_iterations: usize,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            partition: Partition::Count(1),
            pieces: PieceCount::Uniform(1),
            objective: FitObjective::LInf,
            resolution: 1501,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
        }
    }
}

impl FitConfig {
    fn segment_options(&self) -> SegmentFitOptions {
        SegmentFitOptions {
            objective: self.objective,
            max_iterations: self.max_iterations,
            restarts: self.restarts,
            seed: self.seed,
        }
    }

    fn regions(&self, domain: &Polytope) -> Result<Vec<Polytope>> {
        match &self.partition {
            Partition::Regions(regions) => {
                if regions.is_empty() {
                    return Err(Error::Input("partition has no regions".into()));
                }
                Ok(regions.clone())
            }
            Partition::Count(0) => Err(Error::Input("partition count must be positive".into())),
            Partition::Count(count) => {
                let (lo, hi) = domain.bounding_box()?;
                let axis = (0..lo.len())
                    .reduce(|a, b| if hi[b] - lo[b] > hi[a] - lo[a] { b } else { a })
                    .unwrap_or(0);
                let width = (hi[axis] - lo[axis]) / *count as f64;
                (0..*count)
                    .map(|i| {
                        let mut normal = vec![0.0; lo.len()];
                        normal[axis] = 1.0;
                        let upper = if i + 1 == *count { hi[axis] } else { lo[axis] + width * (i + 1) as f64 };
                        let lower = lo[axis] + width * i as f64;
                        domain
                            .with_halfspace(Halfspace::new(normal.clone(), upper))?
                            .with_halfspace(Halfspace::new(normal.iter().map(|c| -c).collect(), -lower))
                    })
                    .collect()
            }
        }
    }

    fn pieces_for(&self, region: usize, regions: usize) -> Result<Option<usize>> {
        match &self.pieces {
            PieceCount::Uniform(q) => Ok(Some(*q)),
            PieceCount::PerRegion(qs) if qs.len() == regions => Ok(Some(qs[region])),
            PieceCount::PerRegion(qs) => Err(Error::Input(format!(
                "{} piece counts for {regions} regions",
                qs.len()
            ))),
            PieceCount::Adaptive { .. } => Ok(None),
        }
    }
}

fn fit_region(samples: &SampleSet, pieces: Option<usize>, config: &FitConfig) -> Result<ConvexSegment> {
    let opts = config.segment_options();
    if let Some(q) = pieces {
        return fit_segment_with(samples, q, &opts);
    }
    let PieceCount::Adaptive { max_pieces, tolerance } = config.pieces else {
        unreachable!("fixed counts are handled above");
    };
    let mut best: Option<(f64, ConvexSegment)> = None;
    for q in 1..=max_pieces.max(1) {
        let seg = fit_segment_with(samples, q, &opts)?;
        let err = samples.max_residual(&seg)?;
        let done = err <= tolerance;
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, seg));
        }
        if done {
            break;
        }
    }
    Ok(best.expect("at least one piece count").1)
}

// Samples of `samples[p]` that also lie in another region.
fn shared_points(samples: &[SampleSet]) -> Vec<(usize, usize, Vec<f64>)> {
    let mut shared = Vec::new();
    for (p, own) in samples.iter().enumerate() {
        for (r, other) in samples.iter().enumerate().skip(p + 1) {
            for x in &own.points {
                if other.domain.contains(x) {
                    shared.push((p, r, x.clone()));
                }
            }
        }
    }
    shared
}

fn total_score(segments: &[ConvexSegment], samples: &[SampleSet], objective: FitObjective) -> f64 {
    segments
        .iter()
        .zip(samples)
        .map(|(seg, s)| objective.score(s.points.iter().zip(&s.values).map(|(x, y)| seg.eval(x) - y)))
        .sum()
}

/// Refits all segments jointly with the active piece of every sample
/// fixed, forcing adjacent segments to agree on their shared samples.
fn joint_pass(
    segments: &[ConvexSegment],
    samples: &[SampleSet],
    shared: &[(usize, usize, Vec<f64>)],
    objective: FitObjective,
) -> Result<Vec<ConvexSegment>> {
    let dim = samples[0].dim();
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<(Vec<Variable>, Variable)>> = segments
        .iter()
        .map(|seg| {
            (0..seg.pieces().len())
                .map(|_| (free_vars(&mut problem, dim), free_vars(&mut problem, 1)[0]))
                .collect()
        })
        .collect();
    let piece_terms = |p: usize, q: usize, x: &[f64]| affine_terms(&vars[p][q].0, vars[p][q].1, x);
    for (p, (seg, set)) in segments.iter().zip(samples).enumerate() {
        let t = match objective {
            FitObjective::LInf => Some(problem.add_var(1.0, (0.0, f64::INFINITY))),
            FitObjective::L1 => None,
        };
        for (x, &y) in set.points.iter().zip(&set.values) {
            let err = t.unwrap_or_else(|| problem.add_var(1.0, (0.0, f64::INFINITY)));
            let mut terms = piece_terms(p, seg.active_piece(x), x);
            terms.push((err, -1.0));
            add_row(&mut problem, &terms, ComparisonOp::Le, y);
            terms.last_mut().unwrap().1 = 1.0;
            add_row(&mut problem, &terms, ComparisonOp::Ge, y);
        }
    }
    for (p, r, x) in shared {
        let (qp, qr) = (segments[*p].active_piece(x), segments[*r].active_piece(x));
        for (seg_idx, active) in [(*p, qp), (*r, qr)] {
            for other in (0..segments[seg_idx].pieces().len()).filter(|&o| o != active) {
                let mut terms = piece_terms(seg_idx, active, x);
                terms.extend(piece_terms(seg_idx, other, x).into_iter().map(|(v, c)| (v, -c)));
                add_row(&mut problem, &terms, ComparisonOp::Ge, 0.0);
            }
        }
        let mut terms = piece_terms(*p, qp, x);
        terms.extend(piece_terms(*r, qr, x).into_iter().map(|(v, c)| (v, -c)));
        add_row(&mut problem, &terms, ComparisonOp::Eq, 0.0);
    }
    let sol = solve(&problem)?;
    segments
        .iter()
        .zip(&vars)
        .map(|(seg, pv)| {
            let pieces = pv
                .iter()
                .map(|(a, b)| AffineMap::new(a.iter().map(|v| sol.var_value(*v)).collect(), sol.var_value(*b)))
                .collect();
            ConvexSegment::new(pieces, seg.region().clone())
        })
        .collect()
}

/// Drops pieces that attain the max at no sample; the joint refit leaves
/// such pieces unconstrained.
fn prune_inactive(seg: &ConvexSegment, samples: &SampleSet) -> Result<ConvexSegment> {
    let mut active = vec![false; seg.pieces().len()];
    for x in &samples.points {
        active[seg.active_piece(x)] = true;
    }
    if active.iter().all(|a| *a) {
        return Ok(seg.clone());
    }
    let pieces = seg
        .pieces()
        .iter()
        .zip(&active)
        .filter(|(_, a)| **a)
        .map(|(p, _)| p.clone())
        .collect();
    ConvexSegment::new(pieces, seg.region().clone())
}

fn max_shared_jump(segments: &[ConvexSegment], shared: &[(usize, usize, Vec<f64>)]) -> f64 {
    shared
        .iter()
        .map(|(p, r, x)| (segments[*p].eval(x) - segments[*r].eval(x)).abs())
        .fold(0.0, f64::max)
}

/// Fits one convex segment per partition region and assembles the
/// min-of-segments surrogate. Adjacent segments are refitted jointly so
/// they agree on the samples of their shared boundary.
pub fn fit_mmps(
    objective: &dyn ScalarField,
    config: &FitConfig,
    domain: &Polytope,
) -> Result<(MmpsFunction, DeltaEstimate)> {
    let regions = config.regions(domain)?;
    let samples: Vec<SampleSet> = regions
        .iter()
        .map(|r| sample(objective, r, config.resolution))
        .collect::<Result<_>>()?;
    let counts: Vec<Option<usize>> = (0..regions.len())
        .map(|i| config.pieces_for(i, regions.len()))
        .collect::<Result<_>>()?;
    let mut segments: Vec<ConvexSegment> = samples
        .par_iter()
        .zip(&counts)
        .map(|(s, q)| fit_region(s, *q, config))
        .collect::<Result<_>>()?;

    let shared = shared_points(&samples);
    if !shared.is_empty() {
        segments = segments
            .iter()
            .zip(&samples)
            .map(|(seg, set)| prune_inactive(seg, set))
            .collect::<Result<_>>()?;
        let mut best: Option<(f64, Vec<ConvexSegment>)> = None;
        for _ in 0..config.max_iterations.max(1) {
            let next = joint_pass(&segments, &samples, &shared, config.objective)?;
            let stable = next.iter().zip(&samples).zip(&segments).all(|((n, s), old)| {
                s.points.iter().all(|x| n.active_piece(x) == old.active_piece(x))
            });
            let jump = max_shared_jump(&next, &shared);
            let score = total_score(&next, &samples, config.objective);
            if jump <= crate::mmps::CONTINUITY_TOL && best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, next.clone()));
            }
            segments = next;
            if stable {
                break;
            }
        }
        if let Some((_, segs)) = best {
            segments = segs;
        }
    }

    let surrogate = MmpsFunction::new(domain.clone(), segments)?;
    let delta = estimate_delta(objective, &surrogate, domain, config.resolution)?;
    Ok((surrogate, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub objective: FitObjective,
    /// Fitting samples per axis.
    pub resolution: usize,
    /// Grid for the error estimate driving the loop; by default the
    /// verification grid in one dimension and twice the fitting grid
    /// otherwise.
    pub delta_resolution: Option<usize>,
    /// Grid for the final oracle check; defaults by dimension.
    pub verify_resolution: Option<usize>,
    /// Cells per axis to start from; by default the fewest equal cells
    /// whose diagonal is below the target.
    pub initial_cells: Option<Vec<usize>>,
    pub max_iterations: usize,
    pub min_slope_gap: f64,
    pub curve: CurveOptions,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            objective: FitObjective::LInf,
            resolution: 1501,
            delta_resolution: None,
            verify_resolution: None,
            initial_cells: None,
            max_iterations: 100,
            min_slope_gap: DEFAULT_MIN_SLOPE_GAP,
            curve: CurveOptions::default(),
        }
    }
}

/// One iterate of the refinement loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub cells: Vec<usize>,
    pub max_subregion_diam: f64,
    pub delta: f64,
    pub c1: Option<f64>,
    pub chi_theorem_raw: Option<f64>,
    pub chi_theorem: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub surrogate: MmpsFunction,
    pub report: SensitivityReport,
    /// Theorem radius of the returned surrogate is within the target.
    pub success: bool,
    pub steps: Vec<RefineStep>,
}

fn uniform_knots(lo: f64, hi: f64, cells: usize) -> Vec<f64> {
    (0..=cells)
        .map(|i| if i == cells { hi } else { lo + (hi - lo) * i as f64 / cells as f64 })
        .collect()
}

/// Refines a separable partitioned fit until the theorem radius drops to
/// `target_chi`, bisecting the cell that limits the bound along its
/// longest axis each round.
pub fn refine_to_radius(
    objective: &dyn ScalarField,
    domain: &Polytope,
    target_chi: f64,
    config: &RefineConfig,
) -> Result<RefineOutcome> {
    if !(target_chi > 0.0 && target_chi.is_finite()) {
        return Err(Error::Input("target radius must be positive".into()));
    }
    let dim = domain.dim();
    let (lo, hi) = domain.bounding_box()?;
    let (lo, hi) = (lo.to_vec(), hi.to_vec());
    let verify_resolution = config.verify_resolution.unwrap_or_else(|| default_grid_resolution(dim));
    let delta_resolution = config.delta_resolution.unwrap_or(if dim == 1 {
        verify_resolution.max(2 * config.resolution)
    } else {
        2 * config.resolution
    });
    let samples = sample(objective, domain, config.resolution)?;
    let spacing = domain.grid_spec(config.resolution)?.spacing();

    let initial = match &config.initial_cells {
        Some(cells) if cells.len() == dim && cells.iter().all(|c| *c > 0) => cells.clone(),
        Some(_) => return Err(Error::Input("initial cells need one positive count per axis".into())),
        None => lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| ((h - l) * (dim as f64).sqrt() / target_chi).floor() as usize + 1)
            .collect(),
    };
    let mut knots: Vec<Vec<f64>> = (0..dim).map(|d| uniform_knots(lo[d], hi[d], initial[d])).collect();

    let mut steps = Vec::new();
    let mut best: Option<(f64, ConvexSegment)> = None;
    for _ in 0..config.max_iterations.max(1) {
        let seg = fit_partitioned(&samples, &knots, config.objective, config.min_slope_gap)?;
        let bound = lower_bound_modulus(&seg)?;
        let delta = estimate_delta(objective, &seg, domain, delta_resolution)?.delta;
        let raw = bound.raw_bound(delta).ok();
        let chi = raw.map_or(bound.diam, |r| r.min(bound.diam));
        steps.push(RefineStep {
            cells: knots.iter().map(|k| k.len() - 1).collect(),
            max_subregion_diam: bound.zero_radius,
            delta,
            c1: bound.c1,
            chi_theorem_raw: raw,
            chi_theorem: chi,
        });
        if best.as_ref().is_none_or(|(b, _)| chi < *b) {
            best = Some((chi, seg.clone()));
        }
        if chi <= target_chi {
            break;
        }
        // Cell of the limiting subregion, last axis fastest.
        let mut flat = bound.largest_subregion;
        let mut cell = vec![0; dim];
        for d in (0..dim).rev() {
            let n = knots[d].len() - 1;
            cell[d] = flat % n;
            flat /= n;
        }
        let width = |d: usize| knots[d][cell[d] + 1] - knots[d][cell[d]];
        let axis = (0..dim).reduce(|a, b| if width(b) > width(a) { b } else { a }).unwrap_or(0);
        if width(axis) < 2.0 * spacing[axis] {
            break;
        }
        let mid = 0.5 * (knots[axis][cell[axis]] + knots[axis][cell[axis] + 1]);
        knots[axis].insert(cell[axis] + 1, mid);
    }

    let (_, seg) = best.expect("at least one iterate");
    let curve = modulus_curve_with(&seg, &config.curve)?;
    let report = verify_bound(objective, &seg, 0.0, verify_resolution)?.with_curve(&curve)?;
    let chi = report.chi_theorem;
    let report = report.checked_against(chi);
    Ok(RefineOutcome {
        success: chi <= target_chi,
        surrogate: MmpsFunction::from_segment(seg).with_feasible_set(domain.clone())?,
        report,
        steps,
    })
}
