//! Convexity modulus of a convex segment and the confidence radii derived
//! from it.
//!
//! `h1(γ)` is the smallest midpoint gap `(f(v) + f(w)) / 2 - f((v + w) / 2)`
//! over pairs at distance `γ` inside the segment region. Along any line the
//! segment is a one-dimensional max-of-affine function, and for a fixed `γ`
//! the gap is piecewise affine in the anchor point, so its minimum sits at
//! an anchor where one of `v`, the midpoint or `w` crosses a kink. That
//! enumeration is exact in one dimension. In higher dimensions the curve is
//! the minimum over a finite family of lines, which over-estimates the
//! infimum.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ScalarField, grid_extremes};
use crate::mmps::ConvexSegment;
use crate::polytope::{Polytope, distance, dot};

pub const DEFAULT_GAMMA_STEPS: usize = 1500;
pub const DEFAULT_SAMPLE_PAIRS: usize = 4096;
pub const DEFAULT_REFINE_STEPS: usize = 20;

/// Cap on vertex pairs used as lines in the sampled mode.
const MAX_VERTEX_PAIRS: usize = 20_000;

/// Relative slack when comparing curve values against an inverse level.
const LEVEL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurveMode {
    Exact1d,
    SampledNd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveOptions {
    pub gamma_steps: usize,
    /// Random point pairs spanning extra lines (sampled mode).
    pub sample_pairs: usize,
    /// Local perturbation steps per gamma (sampled mode).
    pub refine_steps: usize,
    pub seed: u64,
}

impl Default for CurveOptions {
    fn default() -> Self {
        Self {
            gamma_steps: DEFAULT_GAMMA_STEPS,
            sample_pairs: DEFAULT_SAMPLE_PAIRS,
            refine_steps: DEFAULT_REFINE_STEPS,
            seed: 0,
        }
    }
}

/// Sampled `γ ↦ h1(γ)` on a uniform grid of `[0, diam)`. Non-decreasing,
/// starting at `(0, 0)`; `h1` is infinite beyond `diam`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusCurve {
    samples: Vec<(f64, f64)>,
    diam: f64,
    mode: CurveMode,
}

impl ModulusCurve {
    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn diam(&self) -> f64 {
        self.diam
    }

    pub fn mode(&self) -> CurveMode {
        self.mode
    }

    pub fn step(&self) -> f64 {
        if self.samples.len() > 1 {
            self.samples[1].0 - self.samples[0].0
        } else {
            self.diam
        }
    }

    /// Value of the last sample at or below `gamma`.
    pub fn value_at(&self, gamma: f64) -> f64 {
        if gamma > self.diam {
            return f64::INFINITY;
        }
        let i = self.samples.partition_point(|(g, _)| *g <= gamma);
        self.samples[i.saturating_sub(1)].1
    }

    /// Generalized inverse `sup { γ : h1(γ) <= y }`, resolved upward to the
    /// first sample exceeding `y`. Saturates at `diam`.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        if y.is_nan() || y < 0.0 {
            return Err(Error::Input(format!("inverse level must be non-negative, got {y}")));
        }
        let top = self.samples.iter().map(|s| s.1).fold(0.0, f64::max);
        let level = y + LEVEL_TOL * top.max(1.0);
        Ok(self
            .samples
            .iter()
            .find(|(_, h)| *h > level)
            .map_or(self.diam, |(g, _)| *g))
    }

    /// Two-column CSV with header `gamma,h1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma,h1\n");
        for (g, h) in &self.samples {
            out.push_str(&format!("{g},{h}\n"));
        }
        out
    }
}

/// `(f(v) + f(w)) / 2 - f((v + w) / 2)` for points of the segment region.
pub fn midpoint_gap(seg: &ConvexSegment, v: &[f64], w: &[f64]) -> Result<f64> {
    let fv = seg.value(v)?;
    let fw = seg.value(w)?;
    let m: Vec<f64> = v.iter().zip(w).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(0.5 * (fv + fw) - seg.eval(&m))
}

// Restriction of a segment to a chord `base + s * dir`, `s ∈ [0, len]`,
// stored as the pieces of its upper envelope.
struct Chord {
    len: f64,
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
    kinks: Vec<f64>,
}

impl Chord {
    fn from_pieces(pieces: &[(f64, f64)], len: f64) -> Self {
        let value = |q: usize, s: f64| pieces[q].0 * s + pieces[q].1;
        // active piece at s = 0, steepest among ties
        let mut cur = 0;
        for q in 1..pieces.len() {
            let (vq, vc) = (value(q, 0.0), value(cur, 0.0));
            if vq > vc || (vq == vc && pieces[q].0 > pieces[cur].0) {
                cur = q;
            }
        }
        let mut slopes = vec![pieces[cur].0];
        let mut intercepts = vec![pieces[cur].1];
        let mut kinks = Vec::new();
        let mut s = 0.0;
        loop {
            let mut next: Option<(f64, usize)> = None;
            for (r, &(a, b)) in pieces.iter().enumerate() {
                if a <= pieces[cur].0 {
                    continue;
                }
                let cross = ((pieces[cur].1 - b) / (a - pieces[cur].0)).max(s);
                let better = match next {
                    None => true,
                    Some((t, best)) => cross < t || (cross == t && a > pieces[best].0),
                };
                if better {
                    next = Some((cross, r));
                }
            }
            match next {
                Some((t, r)) if t < len => {
                    kinks.push(t);
                    slopes.push(pieces[r].0);
                    intercepts.push(pieces[r].1);
                    cur = r;
                    s = t;
                }
                _ => break,
            }
        }
        Self {
            len,
            slopes,
            intercepts,
            kinks,
        }
    }

    fn through(seg: &ConvexSegment, p: &[f64], q: &[f64]) -> Option<Self> {
        let span = distance(p, q);
        if span <= 0.0 {
            return None;
        }
        let dir: Vec<f64> = p.iter().zip(q).map(|(a, b)| (b - a) / span).collect();
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for h in seg.region().halfspaces() {
            let nd = dot(&h.normal, &dir);
            let slack = h.offset - dot(&h.normal, p);
            if nd > 1e-15 {
                hi = hi.min(slack / nd);
            } else if nd < -1e-15 {
                lo = lo.max(slack / nd);
            } else if slack < -1e-9 * (1.0 + h.offset.abs()) {
                return None;
            }
        }
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return None;
        }
        let base: Vec<f64> = p.iter().zip(&dir).map(|(a, d)| a + lo * d).collect();
        let pieces: Vec<(f64, f64)> = seg
            .pieces()
            .iter()
            .map(|m| (dot(&m.a, &dir), m.eval(&base)))
            .collect();
        Some(Self::from_pieces(&pieces, hi - lo))
    }

    fn eval(&self, s: f64) -> f64 {
        self.slopes
            .iter()
            .zip(&self.intercepts)
            .map(|(a, b)| a * s + b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Exact minimum gap over anchors on the chord; infinite when `gamma`
    /// exceeds the chord.
    fn min_gap(&self, gamma: f64) -> f64 {
        let room = self.len - gamma;
        if room < -1e-12 * self.len.max(1.0) {
            return f64::INFINITY;
        }
        let room = room.max(0.0);
        let gap = |v: f64| {
            let v = v.clamp(0.0, room);
            0.5 * (self.eval(v) + self.eval(v + gamma)) - self.eval(v + 0.5 * gamma)
        };
        let mut best = gap(0.0).min(gap(room));
        for &t in &self.kinks {
            for v in [t, t - 0.5 * gamma, t - gamma] {
                if (0.0..=room).contains(&v) {
                    best = best.min(gap(v));
                }
            }
        }
        best.max(0.0)
    }
}

fn gamma_grid(diam: f64, steps: usize) -> Vec<f64> {
    (0..steps).map(|k| diam * k as f64 / steps as f64).collect()
}

// Values may only decrease when made monotone, so the curve stays an
// over-estimate of nothing it did not already over-estimate.
fn suffix_min(values: &mut [f64]) {
    for k in (0..values.len().saturating_sub(1)).rev() {
        values[k] = values[k].min(values[k + 1]);
    }
}

/// Exact `h1(gamma)` of a one-dimensional segment.
pub fn exact_modulus_1d(seg: &ConvexSegment, gamma: f64) -> Result<f64> {
    let chord = interval_chord(seg)?;
    if gamma < 0.0 {
        return Err(Error::Input("gamma must be non-negative".into()));
    }
    Ok(chord.min_gap(gamma))
}

fn interval_chord(seg: &ConvexSegment) -> Result<Chord> {
    if seg.dim() != 1 {
        return Err(Error::Input("exact modulus needs a one-dimensional segment".into()));
    }
    let (lo, hi) = seg.region().interval_bounds().ok_or(if seg.region().is_feasible() {
        Error::UnboundedRegion
    } else {
        Error::EmptyRegion
    })?;
    let pieces: Vec<(f64, f64)> = seg.pieces().iter().map(|m| (m.a[0], m.a[0] * lo + m.b)).collect();
    Ok(Chord::from_pieces(&pieces, hi - lo))
}

pub fn modulus_curve(seg: &ConvexSegment, gamma_steps: usize) -> Result<ModulusCurve> {
    modulus_curve_with(
        seg,
        &CurveOptions {
            gamma_steps,
            ..CurveOptions::default()
        },
    )
}

pub fn modulus_curve_with(seg: &ConvexSegment, opts: &CurveOptions) -> Result<ModulusCurve> {
    if opts.gamma_steps < 2 {
        return Err(Error::Input("gamma_steps must be at least 2".into()));
    }
    let diam = seg.region().diameter()?;
    let gammas = gamma_grid(diam, opts.gamma_steps);
    let (mut values, mode) = if seg.dim() == 1 {
        let chord = interval_chord(seg)?;
        let v = gammas.par_iter().map(|&g| chord.min_gap(g)).collect();
        (v, CurveMode::Exact1d)
    } else {
        (sampled_values(seg, &gammas, opts)?, CurveMode::SampledNd)
    };
    values[0] = 0.0;
    suffix_min(&mut values);
    Ok(ModulusCurve {
        samples: gammas.into_iter().zip(values).collect(),
        diam,
        mode,
    })
}

fn random_point(region: &Polytope, vertices: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = region.bounding_box().expect("bounded region");
    for _ in 0..1000 {
        let x: Vec<f64> = lo
            .iter()
            .zip(hi)
            .map(|(l, h)| l + (h - l) * rng.random::<f64>())
            .collect();
        if region.contains(&x) {
            return x;
        }
    }
    // thin regions: convex combination of vertices
    let w: Vec<f64> = vertices.iter().map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    let mut x = vec![0.0; region.dim()];
    for (v, wi) in vertices.iter().zip(&w) {
        for (xi, vi) in x.iter_mut().zip(v) {
            *xi += wi / total * vi;
        }
    }
    x
}

fn sampled_values(seg: &ConvexSegment, gammas: &[f64], opts: &CurveOptions) -> Result<Vec<f64>> {
    let region = seg.region();
    let region_vertices = region.vertices()?.to_vec();
    let mut anchors: Vec<Vec<f64>> = region_vertices.clone();
    for sub in seg.subregions().iter().filter(|s| s.is_feasible()) {
        for v in sub.vertices()? {
            if !anchors.iter().any(|a| distance(a, v) <= 1e-9) {
                anchors.push(v.clone());
            }
        }
    }
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    'outer: for i in 0..anchors.len() {
        for j in i + 1..anchors.len() {
            if pairs.len() >= MAX_VERTEX_PAIRS {
                break 'outer;
            }
            pairs.push((anchors[i].clone(), anchors[j].clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.sample_pairs {
        let p = random_point(region, &region_vertices, &mut rng);
        let q = random_point(region, &region_vertices, &mut rng);
        pairs.push((p, q));
    }

    let steps = gammas.len();
    let init = || vec![(f64::INFINITY, usize::MAX); steps];
    let merge = |mut a: Vec<(f64, usize)>, b: Vec<(f64, usize)>| {
        for (x, y) in a.iter_mut().zip(b) {
            if y.0 < x.0 || (y.0 == x.0 && y.1 < x.1) {
                *x = y;
            }
        }
        a
    };
    let best = pairs
        .par_iter()
        .enumerate()
        .fold(init, |mut acc, (idx, (p, q))| {
            if let Some(chord) = Chord::through(seg, p, q) {
                for (slot, &g) in acc.iter_mut().zip(gammas) {
                    if g > chord.len {
                        break;
                    }
                    let v = chord.min_gap(g);
                    if v < slot.0 {
                        *slot = (v, idx);
                    }
                }
            }
            acc
        })
        .reduce(init, merge);

    // Local refinement around the best line of each gamma.
    let diam = region.diameter()?;
    let mut values = Vec::with_capacity(steps);
    for (k, &(mut value, idx)) in best.iter().enumerate() {
        if idx != usize::MAX && value > 0.0 {
            let (mut p, mut q) = pairs[idx].clone();
            let mut scale = 0.05 * diam;
            for _ in 0..opts.refine_steps {
                let jitter = |x: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
                    x.iter().map(|c| c + scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
                };
                let p2 = jitter(&p, &mut rng);
                let q2 = jitter(&q, &mut rng);
                if region.contains(&p2) && region.contains(&q2) {
                    if let Some(chord) = Chord::through(seg, &p2, &q2) {
                        let v = chord.min_gap(gammas[k]);
                        if v < value {
                            value = v;
                            p = p2;
                            q = q2;
                        }
                    }
                }
                scale *= 0.8;
            }
        }
        values.push(value);
    }
    Ok(values)
}

/// Closed-form piecewise-linear lower bound: zero up to the largest
/// subregion diameter, then slope `c1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundModulus {
    /// Smallest half slope gap between the largest subregion's piece and the
    /// pieces whose subregions touch it. `None` without such a neighbour.
    pub c1: Option<f64>,
    /// `c1` times the region diameter.
    pub c0: Option<f64>,
    pub zero_radius: f64,
    pub diam: f64,
    pub largest_subregion: usize,
    /// Smallest half slope gap over every pair of touching subregions.
    pub c1_all_adjacent: Option<f64>,
    /// Slope gaps are Euclidean norms of coefficient differences.
    pub norm_convention: bool,
}

impl LowerBoundModulus {
    fn ramp(&self, c1: Option<f64>, gamma: f64) -> f64 {
        if gamma > self.diam {
            return f64::INFINITY;
        }
        c1.map_or(0.0, |c| (c * (gamma - self.zero_radius)).max(0.0))
    }

    pub fn eval(&self, gamma: f64) -> f64 {
        self.ramp(self.c1, gamma)
    }

    /// Lower bound using `c1_all_adjacent`.
    pub fn eval_all_adjacent(&self, gamma: f64) -> f64 {
        self.ramp(self.c1_all_adjacent, gamma)
    }

    pub fn is_degenerate(&self) -> bool {
        !matches!(self.c1, Some(c) if c > 0.0)
    }

    /// `2Δ / c1 + zero_radius` without the cap at the region diameter.
    pub fn raw_bound(&self, delta: f64) -> Result<f64> {
        check_delta(delta)?;
        match self.c1 {
            Some(c) if c > 0.0 => Ok(2.0 * delta / c + self.zero_radius),
            _ => Err(Error::DegenerateBound {
                region_diameter: self.diam,
            }),
        }
    }
}

fn slope_gap(a: &[f64], b: &[f64]) -> f64 {
    0.5 * distance(a, b)
}

pub fn lower_bound_modulus(seg: &ConvexSegment) -> Result<LowerBoundModulus> {
    let diam = seg.region().diameter()?;
    let diams = seg.subregion_diameters()?;
    let zero_radius = diams.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    if zero_radius == f64::NEG_INFINITY {
        return Err(Error::EmptyRegion);
    }
    let subs = seg.subregions();
    let pieces = seg.pieces();
    let mut touching = vec![vec![false; subs.len()]; subs.len()];
    for i in 0..subs.len() {
        for j in i + 1..subs.len() {
            if diams[i].is_some() && diams[j].is_some() && subs[i].intersects(&subs[j])? {
                touching[i][j] = true;
                touching[j][i] = true;
            }
        }
    }
    let neighbour_gap = |i: usize| {
        (0..subs.len())
            .filter(|&j| touching[i][j])
            .map(|j| slope_gap(&pieces[i].a, &pieces[j].a))
            .reduce(f64::min)
    };
    // Ties for the largest subregion keep the worst slope gap.
    let tied: Vec<usize> = (0..subs.len())
        .filter(|&i| matches!(diams[i], Some(d) if d >= zero_radius * (1.0 - 1e-9)))
        .collect();
    let mut largest = tied[0];
    let mut c1 = neighbour_gap(largest);
    for &i in &tied[1..] {
        if let Some(c) = neighbour_gap(i) {
            if c1.is_none_or(|best| c < best) {
                c1 = Some(c);
                largest = i;
            }
        }
    }
    let c1_all_adjacent = (0..subs.len()).filter_map(neighbour_gap).reduce(f64::min);
    Ok(LowerBoundModulus {
        c1,
        c0: c1.map(|c| c * diam),
        zero_radius,
        diam,
        largest_subregion: largest,
        c1_all_adjacent,
        norm_convention: seg.dim() > 1,
    })
}

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() && delta >= 0.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("delta must be finite and non-negative, got {delta}")))
    }
}

pub fn inverse_modulus(curve: &ModulusCurve, y: f64) -> Result<f64> {
    curve.inverse(y)
}

#[derive(Debug, Clone, Copy)]
pub enum RadiusRoute<'a> {
    Curve(&'a ModulusCurve),
    Bound(&'a LowerBoundModulus),
}

/// `h1⁻¹(2Δ)` through the sampled curve or through the closed-form bound.
pub fn confidence_radius(route: RadiusRoute<'_>, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    match route {
        RadiusRoute::Curve(curve) => curve.inverse(2.0 * delta),
        RadiusRoute::Bound(bound) => match bound.raw_bound(delta) {
            Ok(r) => Ok(r.min(bound.diam)),
            Err(Error::DegenerateBound { region_diameter }) => Ok(region_diameter),
            Err(e) => Err(e),
        },
    }
}

/// `2Δ / c1 + max subregion diameter`, capped at the region diameter.
pub fn theorem_bound(bound: &LowerBoundModulus, delta: f64) -> Result<f64> {
    Ok(bound.raw_bound(delta)?.min(bound.diam))
}

pub fn default_grid_resolution(dim: usize) -> usize {
    match dim {
        0..=2 => 10_000,
        3 => 100,
        _ => 20,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub delta: f64,
    pub c1: Option<f64>,
    pub c1_all_adjacent: Option<f64>,
    pub max_subregion_diam: f64,
    pub region_diam: f64,
    /// Capped theorem radius; the region diameter when degenerate.
    pub chi_theorem: f64,
    pub chi_theorem_raw: Option<f64>,
    pub degenerate: bool,
    pub chi_curve: Option<f64>,
    /// Radius the oracle distance was checked against.
    pub radius: f64,
    pub verified: bool,
    pub oracle_distance: Option<f64>,
    /// Grid minimizer of the original objective.
    pub objective_minimizer: Option<Vec<f64>>,
    /// Grid minimizer of the surrogate segment.
    pub surrogate_minimizer: Option<Vec<f64>>,
    pub grid_resolution: usize,
    pub tolerance: f64,
    /// Slope gaps follow the Euclidean-norm convention (dimension > 1).
    pub convention_dependent: bool,
}

impl SensitivityReport {
    /// Adds the curve radius `h1⁻¹(2Δ)`.
    pub fn with_curve(mut self, curve: &ModulusCurve) -> Result<Self> {
        self.chi_curve = Some(curve.inverse(2.0 * self.delta)?);
        Ok(self)
    }

    /// Re-checks the oracle distance against `radius`.
    pub fn checked_against(mut self, radius: f64) -> Self {
        self.radius = radius;
        self.verified = self
            .oracle_distance
            .is_some_and(|d| d <= radius + self.tolerance);
        self
    }

    /// Smaller of the available radii.
    pub fn best_radius(&self) -> f64 {
        self.chi_curve.map_or(self.chi_theorem, |c| c.min(self.chi_theorem))
    }
}

/// Theorem radius for a given error bound, without an oracle check.
pub fn sensitivity_report(seg: &ConvexSegment, delta: f64) -> Result<SensitivityReport> {
    check_delta(delta)?;
    let bound = lower_bound_modulus(seg)?;
    let chi_theorem_raw = bound.raw_bound(delta).ok();
    Ok(SensitivityReport {
        delta,
        c1: bound.c1,
        c1_all_adjacent: bound.c1_all_adjacent,
        max_subregion_diam: bound.zero_radius,
        region_diam: bound.diam,
        chi_theorem: chi_theorem_raw.map_or(bound.diam, |r| r.min(bound.diam)),
        chi_theorem_raw,
        degenerate: bound.is_degenerate(),
        chi_curve: None,
        radius: 0.0,
        verified: false,
        oracle_distance: None,
        objective_minimizer: None,
        surrogate_minimizer: None,
        grid_resolution: 0,
        tolerance: 0.0,
        convention_dependent: bound.norm_convention,
    })
}

/// Brute-force grid minimization of the objective and of the segment over
/// the segment region. The distance between the two minimizers is checked
/// against `radius` with a tolerance of one grid-cell diagonal.
pub fn verify_bound(
    objective: &dyn ScalarField,
    seg: &ConvexSegment,
    radius: f64,
    grid_resolution: usize,
) -> Result<SensitivityReport> {
    if objective.dim() != seg.dim() {
        return Err(Error::DimensionMismatch {
            expected: seg.dim(),
            got: objective.dim(),
        });
    }
    let grid = seg.region().grid_spec(grid_resolution)?;
    let ext = grid_extremes(&grid, seg.region(), objective, seg)?;
    let delta = ext.max_gap.map_or(0.0, |(v, _)| v);
    let mut report = sensitivity_report(seg, delta)?;
    report.objective_minimizer = ext.min_a.map(|(_, i)| grid.point(i));
    report.surrogate_minimizer = ext.min_b.map(|(_, i)| grid.point(i));
    report.oracle_distance = match (&report.objective_minimizer, &report.surrogate_minimizer) {
        (Some(a), Some(b)) => Some(distance(a, b)),
        _ => None,
    };
    report.grid_resolution = grid_resolution;
    report.tolerance = grid.cell_diagonal();
    Ok(report.checked_against(radius))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;
    use crate::mmps::AffineMap;
    use proptest::prelude::*;

    fn segment_1d(pieces: &[(f64, f64)], lo: f64, hi: f64) -> ConvexSegment {
        ConvexSegment::new(
            pieces.iter().map(|&(a, b)| AffineMap::new(vec![a], b)).collect(),
            Polytope::interval(lo, hi).unwrap(),
        )
        .unwrap()
    }

    fn f31() -> ConvexSegment {
        segment_1d(&[(-7.8, -2365.7), (-0.9, -501.2), (6.1, 1176.1)], -330.0, -180.0)
    }

    fn f32() -> ConvexSegment {
        segment_1d(
            &[
                (-8.6, -2613.1),
                (-6.8, -2095.6),
                (-4.6, -1477.9),
                (-2.2, -829.8),
                (0.3, -191.6),
                (2.8, 412.5),
                (5.1, 944.0),
                (6.9, 1348.1),
            ],
            -330.0,
            -180.0,
        )
    }

    fn f31_oracle(x: f64) -> f64 {
        (-7.8 * x - 2365.7).max(-0.9 * x - 501.2).max(6.1 * x + 1176.1)
    }

    // Brute-force h1 over a dense anchor scan.
    fn h1_scan(f: impl Fn(f64) -> f64, lo: f64, hi: f64, gamma: f64, n: usize) -> f64 {
        (0..=n)
            .map(|i| {
                let v = lo + (hi - gamma - lo) * i as f64 / n as f64;
                0.5 * (f(v) + f(v + gamma)) - f(v + 0.5 * gamma)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn midpoint_gaps() {
        let seg = f31();
        assert_eq!(midpoint_gap(&seg, &[-250.0], &[-250.0]).unwrap(), 0.0);
        assert!(midpoint_gap(&seg, &[-320.0], &[-300.0]).unwrap().abs() < 1e-9);
        let oracle = 0.5 * (f31_oracle(-330.0) + f31_oracle(-180.0)) - f31_oracle(-255.0);
        assert!((oracle - 414.9).abs() < 0.05);
        assert!((midpoint_gap(&seg, &[-330.0], &[-180.0]).unwrap() - oracle).abs() < 1e-9);
        assert!(matches!(
            midpoint_gap(&seg, &[-400.0], &[-180.0]),
            Err(Error::DomainViolation { .. })
        ));
    }

    #[test]
    fn affine_segment_has_flat_curve() {
        let seg = segment_1d(&[(2.0, 1.0)], 0.0, 4.0);
        let curve = modulus_curve(&seg, 100).unwrap();
        assert!(curve.samples().iter().all(|(_, h)| *h == 0.0));
        assert_eq!(curve.inverse(0.0).unwrap(), 4.0);
        let bound = lower_bound_modulus(&seg).unwrap();
        assert_eq!(bound.c1, None);
        assert!(bound.is_degenerate());
        assert_eq!(bound.eval(3.0), 0.0);
        assert_eq!(
            theorem_bound(&bound, 1.0),
            Err(Error::DegenerateBound { region_diameter: 4.0 })
        );
        assert_eq!(confidence_radius(RadiusRoute::Bound(&bound), 1.0).unwrap(), 4.0);
    }

    #[test]
    fn exact_curve_matches_dense_scan() {
        for seg in [f31(), f32()] {
            let f = |x: f64| seg.eval(&[x]);
            for gamma in [5.0, 30.0, 59.0, 61.0, 70.0, 100.0, 140.0] {
                let exact = exact_modulus_1d(&seg, gamma).unwrap();
                let scan = h1_scan(f, -330.0, -180.0, gamma, 200_000);
                assert!(exact <= scan + 1e-9, "gamma {gamma}: {exact} > {scan}");
                assert!(scan - exact < 1e-3, "gamma {gamma}: {exact} vs {scan}");
            }
        }
    }

    #[test]
    fn printed_segment_zero_region_and_bound() {
        let seg = f31();
        let k12: f64 = (-501.2 + 2365.7) / (-7.8 + 0.9);
        let zero = k12 + 330.0;
        assert!((zero - 59.8).abs() < 0.05);
        let bound = lower_bound_modulus(&seg).unwrap();
        assert!((bound.zero_radius - zero).abs() < 1e-9);
        assert_eq!(bound.largest_subregion, 0);
        assert!((bound.c1.unwrap() - 3.45).abs() < 1e-9);
        assert!((bound.c0.unwrap() - 3.45 * 150.0).abs() < 1e-6);
        let curve = modulus_curve(&seg, 1500).unwrap();
        for &(g, h) in curve.samples() {
            if g <= zero {
                assert!(h <= 1e-9);
            }
        }
        assert!((curve.inverse(0.0).unwrap() - zero).abs() <= curve.step());
        assert_eq!(confidence_radius(RadiusRoute::Curve(&curve), 0.0).unwrap(), curve.inverse(0.0).unwrap());
    }

    #[test]
    fn inverse_saturates_and_rejects_negative_levels() {
        let curve = modulus_curve(&f31(), 300).unwrap();
        assert_eq!(curve.inverse(1e9).unwrap(), 150.0);
        assert!(curve.inverse(-1.0).is_err());
        assert_eq!(curve.value_at(151.0), f64::INFINITY);
    }

    #[test]
    fn theorem_bound_arithmetic() {
        let bound = LowerBoundModulus {
            c1: Some(1.03),
            c0: Some(1.03 * 150.0),
            zero_radius: 9.4,
            diam: 150.0,
            largest_subregion: 0,
            c1_all_adjacent: Some(1.03),
            norm_convention: false,
        };
        let direct = 2.0 * 2.47 / 1.03 + 9.4;
        assert!((theorem_bound(&bound, 2.47).unwrap() - direct).abs() < 1e-12);
        assert!((direct - 14.24).abs() < 0.05);
        assert_eq!(theorem_bound(&bound, 0.0).unwrap(), 9.4);
        assert_eq!(theorem_bound(&bound, 1e6).unwrap(), 150.0);
        assert!(theorem_bound(&bound, -1.0).is_err());
    }

    #[test]
    fn csv_export() {
        let curve = modulus_curve(&segment_1d(&[(-1.0, 0.0), (1.0, 0.0)], -1.0, 1.0), 4).unwrap();
        assert_eq!(curve.to_csv(), "gamma,h1\n0,0\n0.5,0\n1,0\n1.5,0.5\n");
    }

    #[test]
    fn verify_identical_objective() {
        let seg = f32();
        let report = verify_bound(&seg, &seg, 0.0, 10_000).unwrap();
        assert_eq!(report.oracle_distance, Some(0.0));
        assert_eq!(report.delta, 0.0);
        assert!(report.verified);
    }

    #[test]
    fn verify_reports_failures_as_data() {
        // Objective minimized at the right end, surrogate at the left.
        let seg = segment_1d(&[(1.0, 0.0)], 0.0, 10.0);
        let f = FnField::new(1, |x: &[f64]| -x[0]);
        let report = verify_bound(&f, &seg, 1.0, 101).unwrap();
        assert_eq!(report.oracle_distance, Some(10.0));
        assert!(!report.verified);
        assert!(report.degenerate);
        assert_eq!(report.chi_theorem, 10.0);
    }

    #[test]
    fn sampled_curve_on_square() {
        // f = |x| + |y| on the unit-radius square
        let seg = ConvexSegment::new(
            vec![
                AffineMap::new(vec![1.0, 1.0], 0.0),
                AffineMap::new(vec![1.0, -1.0], 0.0),
                AffineMap::new(vec![-1.0, 1.0], 0.0),
                AffineMap::new(vec![-1.0, -1.0], 0.0),
            ],
            Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let opts = CurveOptions {
            gamma_steps: 50,
            sample_pairs: 256,
            ..CurveOptions::default()
        };
        let curve = modulus_curve_with(&seg, &opts).unwrap();
        assert_eq!(curve.mode(), CurveMode::SampledNd);
        // quadrants have diameter sqrt 2
        let quadrant = 2f64.sqrt();
        for &(g, h) in curve.samples() {
            if g <= quadrant {
                assert!(h <= 1e-12, "h1({g}) = {h}");
            }
        }
        assert!(curve.samples().last().unwrap().1 > 0.0);
        assert!((curve.inverse(0.0).unwrap() - quadrant).abs() <= curve.step() + 1e-9);
        let again = modulus_curve_with(&seg, &opts).unwrap();
        assert_eq!(curve, again);
        let bound = lower_bound_modulus(&seg).unwrap();
        assert!(bound.norm_convention);
        assert!((bound.c1.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn largest_cell_gap_can_overshoot_the_modulus() {
        // Largest cell [0, 5] meets a steep kink, but the pair [6, 12] only
        // straddles the shallow kink at 9.
        let seg = segment_1d(
            &[(-10.0, 0.0), (0.0, -50.0), (0.1, -50.55), (0.2, -51.45)],
            0.0,
            12.0,
        );
        let bound = lower_bound_modulus(&seg).unwrap();
        assert!((bound.zero_radius - 5.0).abs() < 1e-9);
        assert!((bound.c1.unwrap() - 5.0).abs() < 1e-9);
        let gamma = 6.0;
        let h = exact_modulus_1d(&seg, gamma).unwrap();
        let pair = midpoint_gap(&seg, &[6.0], &[12.0]).unwrap();
        assert!(h <= pair + 1e-12);
        assert!((pair - 0.15).abs() < 1e-9);
        assert!(bound.eval(gamma) > h + 4.0);
        assert!(bound.eval_all_adjacent(gamma) <= h + 1e-9);
    }

    // Random convex PWA on [0, 10]: sorted slopes and knots.
    fn random_1d() -> impl Strategy<Value = ConvexSegment> {
        (1usize..=6).prop_flat_map(|q| {
            (
                prop::collection::vec(-6.0f64..6.0, q),
                prop::collection::vec(0.0f64..10.0, q - 1),
            )
                .prop_map(|(mut slopes, mut knots)| {
                    slopes.sort_by(f64::total_cmp);
                    knots.sort_by(f64::total_cmp);
                    let mut b = vec![0.0; slopes.len()];
                    for k in 1..slopes.len() {
                        b[k] = b[k - 1] + (slopes[k - 1] - slopes[k]) * knots[k - 1];
                    }
                    let pieces: Vec<(f64, f64)> = slopes.into_iter().zip(b).collect();
                    segment_1d(&pieces, 0.0, 10.0)
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn curve_is_monotone_with_zero_region(seg in random_1d()) {
            let curve = modulus_curve(&seg, 400).unwrap();
            let zero = seg.max_subregion_diameter().unwrap();
            let s = curve.samples();
            prop_assert_eq!(s[0], (0.0, 0.0));
            for w in s.windows(2) {
                prop_assert!(w[1].0 > w[0].0 && w[1].1 >= w[0].1);
            }
            for &(g, h) in s {
                if g <= zero {
                    prop_assert!(h <= 1e-9);
                }
            }
        }

        #[test]
        fn all_adjacent_bound_is_below_the_curve(seg in random_1d()) {
            let curve = modulus_curve(&seg, 400).unwrap();
            let bound = lower_bound_modulus(&seg).unwrap();
            for &(g, h) in curve.samples() {
                prop_assert!(bound.eval_all_adjacent(g) <= h + 1e-7);
            }
        }

        #[test]
        fn curve_radius_within_sound_theorem_radius(seg in random_1d(), delta in 0.0f64..3.0) {
            let curve = modulus_curve(&seg, 400).unwrap();
            let bound = lower_bound_modulus(&seg).unwrap();
            if let Some(c) = bound.c1_all_adjacent.filter(|c| *c > 0.0) {
                let sound = (2.0 * delta / c + bound.zero_radius).min(bound.diam);
                let r = confidence_radius(RadiusRoute::Curve(&curve), delta).unwrap();
                prop_assert!(r <= sound + curve.step() + 1e-9);
            }
        }

        #[test]
        fn star_shaped(seg in random_1d()) {
            // h1(g1) / g1 <= h1(g2) / g2 for g1 < g2
            let mut prev = 0.0;
            for k in 1..100 {
                let g = 0.1 * k as f64;
                let r = exact_modulus_1d(&seg, g).unwrap() / g;
                prop_assert!(r >= prev - 1e-9);
                prev = r;
            }
        }

        #[test]
        fn forward_difference_slopes_are_finite_in_number(seg in random_1d()) {
            let q = seg.pieces().len();
            let eps = 1e-6;
            let mut slopes: Vec<f64> = Vec::new();
            for k in 0..200 {
                let g = 0.05 * k as f64;
                let d = (exact_modulus_1d(&seg, g + eps).unwrap() - exact_modulus_1d(&seg, g).unwrap()) / eps;
                if !slopes.iter().any(|s| (s - d).abs() <= 1e-6f64.max(1e-4 * s.abs())) {
                    slopes.push(d);
                }
            }
            prop_assert!(slopes.len() <= q * (q - 1) / 2 + 1, "{} slopes for {} pieces", slopes.len(), q);
        }

        #[test]
        fn sampled_curve_dominates_exact(seg in random_1d()) {
            let lifted = ConvexSegment::new(
                seg.pieces().iter().map(|m| AffineMap::new(vec![m.a[0], 0.0], m.b)).collect(),
                Polytope::from_box(&[0.0, 0.0], &[10.0, 0.0]).unwrap(),
            ).unwrap();
            let opts = CurveOptions { gamma_steps: 100, sample_pairs: 64, ..CurveOptions::default() };
            let sampled = modulus_curve_with(&lifted, &opts).unwrap();
            let exact = modulus_curve(&seg, 100).unwrap();
            for (s, e) in sampled.samples().iter().zip(exact.samples()) {
                prop_assert!((s.0 - e.0).abs() < 1e-12);
                prop_assert!(s.1 >= e.1 - 1e-9);
            }
        }
    }
}
