//! Benchmark objectives and reference surrogates for them.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::mmps::{AffineMap, ConvexSegment};
use crate::polytope::Polytope;

pub const EGGHOLDER_BOUND: f64 = 512.0;
pub const NMPC_INPUT_BOUND: f64 = 20.0;

/// Boundaries of the five-region Eggholder partition.
pub const EGGHOLDER_BREAKS: [f64; 6] = [-512.0, -385.0, -330.0, -180.0, 180.0, 512.0];
/// Pieces per region of the five-region partition.
pub const EGGHOLDER_PIECE_COUNTS: [usize; 5] = [3, 1, 3, 3, 1];
/// Region of the Eggholder cut used by the reference surrogates.
pub const EGGHOLDER_REFERENCE: (f64, f64) = (-330.0, -180.0);

fn within(value: f64, bound: f64) -> bool {
    value.abs() <= bound * (1.0 + 1e-12)
}

/// Eggholder function cut at `x2 = 0`, angles in radians.
pub fn eggholder_1d(x: f64) -> Result<f64> {
    if !within(x, EGGHOLDER_BOUND) {
        return Err(Error::DomainViolation { point: vec![x] });
    }
    Ok(-47.0 * (x / 2.0 + 47.0).abs().sqrt().sin() - x * (x - 47.0).abs().sqrt().sin())
}

/// Two-step predictive-control cost for a pendulum starting upright at
/// rest, as a function of the two input forces.
pub fn nmpc_objective(u0: f64, u1: f64) -> Result<f64> {
    if !within(u0, NMPC_INPUT_BOUND) || !within(u1, NMPC_INPUT_BOUND) {
        return Err(Error::DomainViolation { point: vec![u0, u1] });
    }
    let angle = ((0.02 * u0 + PI).powi(2) + 2.0 * PI * PI).sqrt();
    Ok(angle + 0.02 * (u0 * u0 + (u0 + u1).powi(2)).sqrt() + 0.01 * u0.hypot(u1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Eggholder,
    Nmpc,
}

/// A named built-in objective with its domain.
#[derive(Debug, Clone)]
pub struct BenchFunction {
    name: &'static str,
    kind: Kind,
    domain: Polytope,
}

impl BenchFunction {
    pub const NAMES: [&'static str; 2] = ["eggholder1d", "nmpc-theta0"];

    pub fn eggholder() -> Self {
        Self {
            name: "eggholder1d",
            kind: Kind::Eggholder,
            domain: Polytope::interval(-EGGHOLDER_BOUND, EGGHOLDER_BOUND).expect("valid interval"),
        }
    }

    pub fn nmpc() -> Self {
        let b = NMPC_INPUT_BOUND;
        Self {
            name: "nmpc-theta0",
            kind: Kind::Nmpc,
            domain: Polytope::from_box(&[-b, -b], &[b, b]).expect("valid box"),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "eggholder1d" => Some(Self::eggholder()),
            "nmpc-theta0" => Some(Self::nmpc()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn domain(&self) -> &Polytope {
        &self.domain
    }
}

impl ScalarField for BenchFunction {
    fn dim(&self) -> usize {
        self.domain.dim()
    }

    fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        match self.kind {
            Kind::Eggholder => eggholder_1d(x[0]),
            Kind::Nmpc => nmpc_objective(x[0], x[1]),
        }
    }
}

fn reference_segment(pieces: &[(f64, f64)]) -> ConvexSegment {
    let (lo, hi) = EGGHOLDER_REFERENCE;
    ConvexSegment::new(
        pieces.iter().map(|&(a, b)| AffineMap::new(vec![a], b)).collect(),
        Polytope::interval(lo, hi).expect("valid interval"),
    )
    .expect("reference pieces are finite")
}

/// Published three-piece surrogate of the Eggholder cut on the reference
/// region, coefficients rounded to one decimal.
pub fn eggholder_coarse_surrogate() -> ConvexSegment {
    reference_segment(&[(-7.8, -2365.7), (-0.9, -501.2), (6.1, 1176.1)])
}

/// Published eight-piece surrogate on the reference region.
pub fn eggholder_fine_surrogate() -> ConvexSegment {
    reference_segment(&[
        (-8.6, -2613.1),
        (-6.8, -2095.6),
        (-4.6, -1477.9),
        (-2.2, -829.8),
        (0.3, -191.6),
        (2.8, 412.5),
        (5.1, 944.0),
        (6.9, 1348.1),
    ])
}

/// Regions of the five-region Eggholder partition.
pub fn eggholder_partition() -> Vec<Polytope> {
    EGGHOLDER_BREAKS
        .windows(2)
        .map(|w| Polytope::interval(w[0], w[1]).expect("valid interval"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn eggholder_values() {
        // Second term vanishes at 47.
        let expected = -47.0 * 70.5f64.sqrt().sin();
        assert_eq!(eggholder_1d(47.0).unwrap(), expected);
        assert!((expected + 40.253).abs() < 1e-3);
        assert!((eggholder_1d(-512.0).unwrap() + 554.93).abs() < 0.01);
        assert!((eggholder_1d(512.0).unwrap() + 165.56).abs() < 0.01);
        assert!(matches!(eggholder_1d(600.0), Err(Error::DomainViolation { .. })));
    }

    fn grid_argmin(lo: f64, hi: f64, n: usize) -> f64 {
        (0..=n)
            .map(|i| lo + (hi - lo) * i as f64 / n as f64)
            .min_by(|a, b| eggholder_1d(*a).unwrap().total_cmp(&eggholder_1d(*b).unwrap()))
            .unwrap()
    }

    #[test]
    fn eggholder_regional_minimizers() {
        // Interior minimum of the right region; the boundary value is higher.
        let right = grid_argmin(180.0, 512.0, 33_200);
        assert!((right - 466.28).abs() < 0.02, "{right}");
        assert!(eggholder_1d(right).unwrap() < eggholder_1d(512.0).unwrap() - 200.0);
        // Left region: minimum hugs the left boundary.
        assert!(grid_argmin(-512.0, -385.0, 12_700) < -511.0);
        assert_eq!(grid_argmin(-385.0, -330.0, 5_500), -330.0);
        assert!((grid_argmin(-330.0, -180.0, 15_000) + 250.98).abs() < 0.02);
    }

    // Square-root cusps where the radicands vanish.
    const CUSPS: [f64; 2] = [-94.0, 47.0];

    #[test]
    fn eggholder_is_continuous() {
        // Slopes reach about 13 near the ends, so the grid must be finer
        // than 1e-3 for jumps to stay below 0.01.
        let n = 10_000_000;
        let step = 2.0 * EGGHOLDER_BOUND / n as f64;
        let mut prev = eggholder_1d(-EGGHOLDER_BOUND).unwrap();
        let mut jump: f64 = 0.0;
        for i in 1..=n {
            let x = -EGGHOLDER_BOUND + step * i as f64;
            let v = eggholder_1d(x).unwrap();
            if CUSPS.iter().all(|c| (x - c).abs() > 0.5) {
                jump = jump.max((v - prev).abs());
            }
            prev = v;
        }
        assert!(jump < 0.01, "{jump}");
        for c in CUSPS {
            let at = eggholder_1d(c).unwrap();
            for h in [1e-8, 1e-12] {
                // Holder-1/2 modulus: |F(c + h) - F(c)| <= (47 + |c| + 1) sqrt(h)
                let bound = (48.0 + c.abs()) * f64::sqrt(h);
                assert!((eggholder_1d(c + h).unwrap() - at).abs() <= bound);
                assert!((eggholder_1d(c - h).unwrap() - at).abs() <= bound);
            }
        }
    }

    #[test]
    fn nmpc_values() {
        let origin = nmpc_objective(0.0, 0.0).unwrap();
        assert!((origin - PI * 3f64.sqrt()).abs() < 1e-12);
        assert!((origin - 5.441).abs() < 1e-3);
        let corner = ((PI - 0.4).powi(2) + 2.0 * PI * PI).sqrt() + 0.02 * 20.0 + 0.01 * 800f64.sqrt();
        assert!((nmpc_objective(-20.0, 20.0).unwrap() - corner).abs() < 1e-12);
        assert!((corner - 5.904).abs() < 1e-3);
        assert!((nmpc_objective(0.0, 7.0).unwrap() - (origin + 0.03 * 7.0)).abs() < 1e-12);
        assert!(matches!(nmpc_objective(21.0, 0.0), Err(Error::DomainViolation { .. })));
    }

    #[test]
    fn registry() {
        for name in BenchFunction::NAMES {
            let f = BenchFunction::by_name(name).unwrap();
            assert_eq!(f.name(), name);
            assert!(f.domain().is_bounded());
        }
        assert!(BenchFunction::by_name("rosenbrock").is_none());
        let egg = BenchFunction::eggholder();
        assert_eq!(egg.eval(&[47.0]).unwrap(), eggholder_1d(47.0).unwrap());
        assert!(matches!(egg.eval(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
        assert!((BenchFunction::nmpc().domain().diameter().unwrap() - 40.0 * 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn partition_layout() {
        let regions = eggholder_partition();
        assert_eq!(regions.len(), EGGHOLDER_PIECE_COUNTS.len());
        assert_eq!(regions[2].interval_bounds(), Some(EGGHOLDER_REFERENCE));
        assert_eq!(eggholder_coarse_surrogate().pieces().len(), 3);
        assert_eq!(eggholder_fine_surrogate().pieces().len(), 8);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn nmpc_is_midpoint_convex(
            a in -20.0f64..20.0, b in -20.0f64..20.0, c in -20.0f64..20.0, d in -20.0f64..20.0,
        ) {
            let mid = nmpc_objective(0.5 * (a + c), 0.5 * (b + d)).unwrap();
            let gap = 0.5 * (nmpc_objective(a, b).unwrap() + nmpc_objective(c, d).unwrap()) - mid;
            prop_assert!(gap >= -1e-9);
        }

        #[test]
        fn nmpc_symmetric_in_second_input(u in -20.0f64..20.0) {
            prop_assert_eq!(nmpc_objective(0.0, u).unwrap(), nmpc_objective(0.0, -u).unwrap());
        }
    }
}
