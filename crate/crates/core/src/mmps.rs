//! Continuous piecewise-affine functions in min-of-max-of-affine form.
//!
//! A [`ConvexSegment`] is the pointwise maximum of affine maps over a
//! polytopic region, split into one subregion per map. An [`MmpsFunction`]
//! is the minimum over segments whose regions cover its domain.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polytope::{Halfspace, Polytope, distance, dot};

/// Document tag for serialized surrogates.
pub const MMPS_FORMAT: &str = "mmps-v1";

/// Largest admissible jump across shared boundaries.
pub const CONTINUITY_TOL: f64 = 1e-6;

pub const DEFAULT_BOUNDARY_SAMPLES: usize = 100;

const TIE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub a: Vec<f64>,
    pub b: f64,
}

impl AffineMap {
    pub fn new(a: Vec<f64>, b: f64) -> Self {
        Self { a, b }
    }

    pub fn constant(dim: usize, b: f64) -> Self {
        Self { a: vec![0.0; dim], b }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        dot(&self.a, x) + self.b
    }
}

fn ties(value: f64, best: f64) -> bool {
    (value - best).abs() <= TIE_TOL * best.abs().max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSegment {
    pieces: Vec<AffineMap>,
    region: Polytope,
    subregions: Vec<Polytope>,
}

impl ConvexSegment {
    pub fn new(pieces: Vec<AffineMap>, region: Polytope) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::Input("a convex segment needs at least one piece".into()));
        }
        for p in &pieces {
            if p.dim() != region.dim() {
                return Err(Error::DimensionMismatch {
                    expected: region.dim(),
                    got: p.dim(),
                });
            }
            if !p.b.is_finite() || p.a.iter().any(|c| !c.is_finite()) {
                return Err(Error::Input("affine coefficients must be finite".into()));
            }
        }
        let subregions = compute_subregions(&pieces, &region)?;
        Ok(Self {
            pieces,
            region,
            subregions,
        })
    }

    pub fn dim(&self) -> usize {
        self.region.dim()
    }

    pub fn pieces(&self) -> &[AffineMap] {
        &self.pieces
    }

    pub fn region(&self) -> &Polytope {
        &self.region
    }

    /// One polytope per piece; dominated pieces map to empty polytopes.
    pub fn subregions(&self) -> &[Polytope] {
        &self.subregions
    }

    /// Max of the affine pieces, without a region check.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.pieces
            .iter()
            .map(|p| p.eval(x))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        if !self.region.contains(x) {
            return Err(Error::DomainViolation { point: x.to_vec() });
        }
        Ok(self.eval(x))
    }

    /// Smallest index attaining the max within tolerance.
    pub fn active_piece(&self, x: &[f64]) -> usize {
        let best = self.eval(x);
        self.pieces
            .iter()
            .position(|p| ties(p.eval(x), best))
            .unwrap_or(0)
    }

    /// Diameter of each non-empty subregion, `None` for empty ones.
    pub fn subregion_diameters(&self) -> Result<Vec<Option<f64>>> {
        self.subregions
            .iter()
            .map(|s| {
                if s.is_feasible() {
                    s.diameter().map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    pub fn max_subregion_diameter(&self) -> Result<f64> {
        Ok(self
            .subregion_diameters()?
            .into_iter()
            .flatten()
            .fold(0.0, f64::max))
    }

    /// Sorted interior kinks of a one-dimensional segment.
    pub fn breakpoints(&self) -> Result<Vec<f64>> {
        let (lo, hi) = self
            .region
            .interval_bounds()
            .ok_or_else(|| Error::Input("breakpoints need a bounded 1-D region".into()))?;
        let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        let mut kinks: Vec<f64> = self
            .subregions
            .iter()
            .filter_map(Polytope::interval_bounds)
            .flat_map(|(a, b)| [a, b])
            .filter(|t| *t > lo + tol && *t < hi - tol)
            .collect();
        kinks.sort_by(f64::total_cmp);
        kinks.dedup_by(|a, b| (*a - *b).abs() <= tol);
        Ok(kinks)
    }
}

/// Activation region of every piece within `region`.
pub fn compute_subregions(pieces: &[AffineMap], region: &Polytope) -> Result<Vec<Polytope>> {
    if !region.is_feasible() {
        return Err(Error::EmptyRegion);
    }
    if !region.is_bounded() {
        return Err(Error::UnboundedRegion);
    }
    let dim = region.dim();
    pieces
        .iter()
        .enumerate()
        .map(|(q, own)| {
            let mut hs = region.halfspaces().to_vec();
            for (r, other) in pieces.iter().enumerate() {
                if r == q {
                    continue;
                }
                let normal: Vec<f64> = other.a.iter().zip(&own.a).map(|(x, y)| x - y).collect();
                hs.push(Halfspace::new(normal, own.b - other.b));
            }
            Polytope::new(dim, hs)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmpsFunction {
    domain: Polytope,
    feasible_set: Polytope,
    segments: Vec<ConvexSegment>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// Domain grid points covered by no segment region.
    pub coverage_gaps: Vec<Vec<f64>>,
    pub max_jump: f64,
    pub jump_location: Option<Vec<f64>>,
    pub samples_per_facet: usize,
    pub tolerance: f64,
    pub valid: bool,
}

impl MmpsFunction {
    pub fn new(domain: Polytope, segments: Vec<ConvexSegment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Input("an MMPS function needs at least one segment".into()));
        }
        for s in &segments {
            if s.dim() != domain.dim() {
                return Err(Error::DimensionMismatch {
                    expected: domain.dim(),
                    got: s.dim(),
                });
            }
        }
        Ok(Self {
            feasible_set: domain.clone(),
            domain,
            segments,
        })
    }

    /// Single convex segment over its own region.
    pub fn from_segment(segment: ConvexSegment) -> Self {
        Self {
            domain: segment.region().clone(),
            feasible_set: segment.region().clone(),
            segments: vec![segment],
        }
    }

    pub fn with_feasible_set(mut self, feasible: Polytope) -> Result<Self> {
        if feasible.dim() != self.domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.domain.dim(),
                got: feasible.dim(),
            });
        }
        self.feasible_set = feasible;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &Polytope {
        &self.domain
    }

    pub fn feasible_set(&self) -> &Polytope {
        &self.feasible_set
    }

    pub fn segments(&self) -> &[ConvexSegment] {
        &self.segments
    }

    // Segments whose region holds x; all of them if none does.
    fn candidates<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = (usize, &'a ConvexSegment)> {
        let any = self.segments.iter().any(|s| s.region().contains(x));
        self.segments
            .iter()
            .enumerate()
            .filter(move |(_, s)| !any || s.region().contains(x))
    }

    fn check_domain(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if !self.domain.contains(x) {
            return Err(Error::DomainViolation { point: x.to_vec() });
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.check_domain(x)?;
        Ok(self
            .candidates(x)
            .map(|(_, s)| s.eval(x))
            .fold(f64::INFINITY, f64::min))
    }

    /// Segment and piece attaining the value at `x`, smallest pair first.
    pub fn active_segment(&self, x: &[f64]) -> Result<(usize, usize)> {
        let value = self.evaluate(x)?;
        let (p, seg) = self
            .candidates(x)
            .find(|(_, s)| ties(s.eval(x), value))
            .expect("the minimizing segment is among the candidates");
        Ok((p, seg.active_piece(x)))
    }

    /// Checks region coverage on a domain grid and the jump of adjacent
    /// segments on their shared boundaries.
    pub fn validate(&self, boundary_samples: usize) -> ValidationReport {
        let coverage_gaps = self.coverage_gaps();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut max_jump = 0.0f64;
        let mut jump_location = None;
        for (p, a) in self.segments.iter().enumerate() {
            for b in &self.segments[p + 1..] {
                let Ok(shared) = a.region().intersection(b.region()) else {
                    continue;
                };
                if !shared.is_feasible() {
                    continue;
                }
                for x in boundary_points(&shared, boundary_samples, &mut rng) {
                    let jump = (a.eval(&x) - b.eval(&x)).abs();
                    if jump > max_jump || jump_location.is_none() {
                        max_jump = max_jump.max(jump);
                        jump_location = Some(x);
                    }
                }
            }
        }
        ValidationReport {
            valid: coverage_gaps.is_empty() && max_jump <= CONTINUITY_TOL,
            coverage_gaps,
            max_jump,
            jump_location,
            samples_per_facet: boundary_samples,
            tolerance: CONTINUITY_TOL,
        }
    }

    fn coverage_gaps(&self) -> Vec<Vec<f64>> {
        let resolution = match self.dim() {
            1 => 2001,
            2 => 129,
            _ => 33,
        };
        let Ok((points, _)) = self.domain.grid(resolution) else {
            return Vec::new();
        };
        points
            .into_iter()
            .filter(|x| !self.segments.iter().any(|s| s.region().contains(x)))
            .take(32)
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MmpsDocument::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: MmpsDocument = serde_json::from_str(text)?;
        doc.try_into()
    }
}

// Shared-boundary vertices plus random convex combinations of them.
fn boundary_points(shared: &Polytope, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let Ok(vertices) = shared.vertices() else {
        return Vec::new();
    };
    let mut out = vertices.to_vec();
    if vertices.len() > 1 {
        for _ in 0..count {
            let w: Vec<f64> = (0..vertices.len())
                .map(|_| -(1.0 - rng.random::<f64>()).ln())
                .collect();
            let total: f64 = w.iter().sum();
            let mut x = vec![0.0; shared.dim()];
            for (v, wi) in vertices.iter().zip(&w) {
                for (xi, vi) in x.iter_mut().zip(v) {
                    *xi += wi / total * vi;
                }
            }
            out.push(x);
        }
    }
    out.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    out.dedup_by(|a, b| distance(a, b) == 0.0);
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentDocument {
    pieces: Vec<AffineMap>,
    region: Polytope,
}

#[derive(Debug, Serialize, Deserialize)]
struct MmpsDocument {
    format: String,
    domain: Polytope,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feasible: Option<Polytope>,
    segments: Vec<SegmentDocument>,
}

impl From<&MmpsFunction> for MmpsDocument {
    fn from(f: &MmpsFunction) -> Self {
        Self {
            format: MMPS_FORMAT.to_string(),
            domain: f.domain.clone(),
            feasible: (f.feasible_set != f.domain).then(|| f.feasible_set.clone()),
            segments: f
                .segments
                .iter()
                .map(|s| SegmentDocument {
                    pieces: s.pieces.clone(),
                    region: s.region.clone(),
                })
                .collect(),
        }
    }
}

impl TryFrom<MmpsDocument> for MmpsFunction {
    type Error = Error;

    fn try_from(doc: MmpsDocument) -> Result<Self> {
        if doc.format != MMPS_FORMAT {
            return Err(Error::Format(format!(
                "expected format {MMPS_FORMAT:?}, found {:?}",
                doc.format
            )));
        }
        let segments = doc
            .segments
            .into_iter()
            .map(|s| ConvexSegment::new(s.pieces, s.region))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Format(e.to_string()))?;
        let f = MmpsFunction::new(doc.domain, segments).map_err(|e| Error::Format(e.to_string()))?;
        match doc.feasible {
            Some(x) => f.with_feasible_set(x).map_err(|e| Error::Format(e.to_string())),
            None => Ok(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f31() -> ConvexSegment {
        ConvexSegment::new(
            vec![
                AffineMap::new(vec![-7.8], -2365.7),
                AffineMap::new(vec![-0.9], -501.2),
                AffineMap::new(vec![6.1], 1176.1),
            ],
            Polytope::interval(-330.0, -180.0).unwrap(),
        )
        .unwrap()
    }

    // Independent arithmetic on the printed pieces.
    fn f31_oracle(x: f64) -> f64 {
        let v = [-7.8 * x - 2365.7, -0.9 * x - 501.2, 6.1 * x + 1176.1];
        v[0].max(v[1]).max(v[2])
    }

    #[test]
    fn evaluates_printed_pieces() {
        let f = MmpsFunction::from_segment(f31());
        assert!((f31_oracle(-300.0) - (-25.7)).abs() < 0.05);
        assert!((f.evaluate(&[-300.0]).unwrap() - f31_oracle(-300.0)).abs() < 1e-12);
        assert!((f31_oracle(-270.0) - (-258.2)).abs() < 0.05);
        assert!((f.evaluate(&[-270.0]).unwrap() - f31_oracle(-270.0)).abs() < 1e-12);
    }

    #[test]
    fn constant_function() {
        let seg = ConvexSegment::new(
            vec![AffineMap::constant(1, 5.0)],
            Polytope::interval(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let f = MmpsFunction::from_segment(seg);
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(f.evaluate(&[x]).unwrap(), 5.0);
            assert_eq!(f.active_segment(&[x]).unwrap(), (0, 0));
        }
    }

    #[test]
    fn outside_domain_is_rejected() {
        let f = MmpsFunction::from_segment(f31());
        assert!(matches!(
            f.evaluate(&[-100.0]),
            Err(Error::DomainViolation { .. })
        ));
        assert!(f.active_segment(&[-400.0]).is_err());
        assert!(f.evaluate(&[-300.0, 1.0]).is_err());
    }

    #[test]
    fn active_pieces_and_tie_break() {
        let f = MmpsFunction::from_segment(f31());
        assert_eq!(f.active_segment(&[-300.0]).unwrap(), (0, 0));
        // -7.8x - 2365.7 = -0.9x - 501.2
        let kink: f64 = (-501.2 + 2365.7) / (-7.8 + 0.9);
        assert!((kink - (-270.2)).abs() < 0.05);
        assert_eq!(f.active_segment(&[kink]).unwrap(), (0, 0));
        assert_eq!(f.active_segment(&[kink + 1e-3]).unwrap(), (0, 1));
    }

    #[test]
    fn subregions_of_printed_segment() {
        let seg = f31();
        let k12: f64 = (-501.2 + 2365.7) / (-7.8 + 0.9);
        let k23: f64 = (1176.1 + 501.2) / (-0.9 - 6.1);
        assert!((k23 - (-239.6)).abs() < 0.05);
        let bounds: Vec<(f64, f64)> = seg
            .subregions()
            .iter()
            .map(|s| s.interval_bounds().unwrap())
            .collect();
        let expect = [(-330.0, k12), (k12, k23), (k23, -180.0)];
        for (got, want) in bounds.iter().zip(expect) {
            assert!((got.0 - want.0).abs() < 1e-9 && (got.1 - want.1).abs() < 1e-9);
        }
        assert!(seg.subregions()[0].intersects(&seg.subregions()[1]).unwrap());
        let kinks = seg.breakpoints().unwrap();
        assert_eq!(kinks.len(), 2);
        assert!((seg.max_subregion_diameter().unwrap() - (k12 + 330.0)).abs() < 1e-9);
    }

    #[test]
    fn single_and_dominated_pieces() {
        let r = Polytope::interval(0.0, 2.0).unwrap();
        let one = compute_subregions(&[AffineMap::new(vec![1.0], 0.0)], &r).unwrap();
        assert_eq!(one[0].interval_bounds(), Some((0.0, 2.0)));
        let two = compute_subregions(
            &[AffineMap::new(vec![1.0], 0.0), AffineMap::new(vec![1.0], -3.0)],
            &r,
        )
        .unwrap();
        assert_eq!(two[0].interval_bounds(), Some((0.0, 2.0)));
        assert!(!two[1].is_feasible());
        let unbounded = Polytope::new(1, vec![Halfspace::new(vec![1.0], 0.0)]).unwrap();
        assert_eq!(
            compute_subregions(&[AffineMap::new(vec![1.0], 0.0)], &unbounded),
            Err(Error::UnboundedRegion)
        );
    }

    fn step_function(left: f64, right: f64) -> MmpsFunction {
        let segs = vec![
            ConvexSegment::new(
                vec![AffineMap::constant(1, left)],
                Polytope::interval(0.0, 1.0).unwrap(),
            )
            .unwrap(),
            ConvexSegment::new(
                vec![AffineMap::constant(1, right)],
                Polytope::interval(1.0, 2.0).unwrap(),
            )
            .unwrap(),
        ];
        MmpsFunction::new(Polytope::interval(0.0, 2.0).unwrap(), segs).unwrap()
    }

    #[test]
    fn validation_detects_jumps() {
        let bad = step_function(0.0, 1.0).validate(DEFAULT_BOUNDARY_SAMPLES);
        assert!(!bad.valid);
        assert_eq!(bad.max_jump, 1.0);
        assert_eq!(bad.jump_location, Some(vec![1.0]));
        let good = step_function(2.0, 2.0).validate(DEFAULT_BOUNDARY_SAMPLES);
        assert!(good.valid && good.max_jump == 0.0);
        let single = MmpsFunction::from_segment(f31()).validate(DEFAULT_BOUNDARY_SAMPLES);
        assert!(single.valid && single.coverage_gaps.is_empty());
    }

    #[test]
    fn validation_detects_gaps() {
        let segs = vec![
            ConvexSegment::new(
                vec![AffineMap::constant(1, 0.0)],
                Polytope::interval(0.0, 0.5).unwrap(),
            )
            .unwrap(),
            ConvexSegment::new(
                vec![AffineMap::constant(1, 0.0)],
                Polytope::interval(1.0, 2.0).unwrap(),
            )
            .unwrap(),
        ];
        let f = MmpsFunction::new(Polytope::interval(0.0, 2.0).unwrap(), segs).unwrap();
        let report = f.validate(10);
        assert!(!report.valid);
        assert!(!report.coverage_gaps.is_empty());
        assert!(report.coverage_gaps.iter().all(|x| x[0] > 0.5 && x[0] < 1.0));
    }

    #[test]
    fn evaluation_uses_covering_segment() {
        // Two regions whose affine extensions cross: the left piece would
        // undercut the right one for x > 1 without the region restriction.
        let segs = vec![
            ConvexSegment::new(
                vec![AffineMap::new(vec![-1.0], 1.0)],
                Polytope::interval(0.0, 1.0).unwrap(),
            )
            .unwrap(),
            ConvexSegment::new(
                vec![AffineMap::new(vec![1.0], -1.0)],
                Polytope::interval(1.0, 2.0).unwrap(),
            )
            .unwrap(),
        ];
        let f = MmpsFunction::new(Polytope::interval(0.0, 2.0).unwrap(), segs).unwrap();
        assert_eq!(f.evaluate(&[1.5]).unwrap(), 0.5);
        assert_eq!(f.active_segment(&[1.5]).unwrap(), (1, 0));
        assert_eq!(f.active_segment(&[1.0]).unwrap(), (0, 0));
        assert!(f.validate(DEFAULT_BOUNDARY_SAMPLES).valid);
    }

    #[test]
    fn json_round_trip() {
        let f = step_function(0.0, 0.0).with_feasible_set(Polytope::interval(0.5, 1.5).unwrap()).unwrap();
        let text = f.to_json().unwrap();
        assert!(text.contains("\"format\": \"mmps-v1\""));
        let back = MmpsFunction::from_json(&text).unwrap();
        assert_eq!(back, f);
        let wrong = text.replace("mmps-v1", "mmps-v0");
        assert!(matches!(MmpsFunction::from_json(&wrong), Err(Error::Format(_))));
        assert!(matches!(MmpsFunction::from_json("{"), Err(Error::Format(_))));
    }

    fn random_segment() -> impl Strategy<Value = ConvexSegment> {
        (1usize..=3, 1usize..=6).prop_flat_map(|(n, q)| {
            prop::collection::vec((prop::collection::vec(-5.0f64..5.0, n), -5.0f64..5.0), q).prop_map(
                move |pieces| {
                    let pieces = pieces.into_iter().map(|(a, b)| AffineMap::new(a, b)).collect();
                    let region = Polytope::from_box(&vec![-1.0; n], &vec![1.0; n]).unwrap();
                    ConvexSegment::new(pieces, region).unwrap()
                },
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn value_matches_active_piece(seg in random_segment()) {
            let f = MmpsFunction::from_segment(seg.clone());
            let (grid, _) = seg.region().grid(if seg.dim() == 1 { 201 } else { 11 }).unwrap();
            for x in grid {
                let v = f.evaluate(&x).unwrap();
                let (p, q) = f.active_segment(&x).unwrap();
                let piece = f.segments()[p].pieces()[q].eval(&x);
                prop_assert!((v - piece).abs() <= 1e-9 * v.abs().max(1.0));
            }
        }

        #[test]
        fn segments_are_midpoint_convex(seg in random_segment(), seed in 0u64..1000) {
            let n = seg.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let m: Vec<f64> = v.iter().zip(&w).map(|(a, b)| 0.5 * (a + b)).collect();
                prop_assert!(seg.eval(&m) <= 0.5 * (seg.eval(&v) + seg.eval(&w)) + 1e-9);
            }
        }

        #[test]
        fn subregion_interiors_are_disjoint(seg in random_segment()) {
            // Shrinking both sides by a margin tests the open interiors.
            let subs = seg.subregions();
            let margin = 1e-6;
            for i in 0..subs.len() {
                for j in i + 1..subs.len() {
                    if !subs[i].is_feasible() || !subs[j].is_feasible() {
                        continue;
                    }
                    let shrink = |p: &Polytope| {
                        let hs = p.halfspaces().iter().map(|h| {
                            let norm = h.normal.iter().map(|c| c * c).sum::<f64>().sqrt();
                            Halfspace::new(h.normal.clone(), h.offset - margin * norm)
                        }).collect();
                        Polytope::new(p.dim(), hs).unwrap()
                    };
                    let (a, b) = (&seg.pieces()[i], &seg.pieces()[j]);
                    prop_assume!(a != b);
                    prop_assert!(!shrink(&subs[i]).intersects(&shrink(&subs[j])).unwrap());
                }
            }
        }
    }
}
