//! Piecewise-affine surrogates in min-max-affine form and certified bounds
//! on how far their minimizers can drift from those of the original
//! objective.

pub mod bench;
pub mod error;
pub mod field;
pub mod fit;
mod lp;
pub mod mmps;
pub mod modulus;
pub mod polytope;

pub use bench::{BenchFunction, eggholder_1d, nmpc_objective};
pub use error::{Error, Result};
pub use field::{FnField, ScalarField, TabulatedField};
pub use fit::{
    DeltaEstimate, FitConfig, FitObjective, Partition, PieceCount, RefineConfig, RefineOutcome, RefineStep,
    SampleSet, SegmentFitOptions, estimate_delta, estimate_delta_padded, fit_mmps, fit_partitioned, fit_segment,
    fit_segment_with, refine_to_radius, sample,
};
pub use mmps::{AffineMap, ConvexSegment, MmpsFunction, ValidationReport};
pub use modulus::{
    CurveMode, CurveOptions, LowerBoundModulus, ModulusCurve, RadiusRoute, SensitivityReport,
    confidence_radius, inverse_modulus, lower_bound_modulus, midpoint_gap, modulus_curve, sensitivity_report,
    modulus_curve_with, theorem_bound, verify_bound,
};
pub use polytope::{Halfspace, Polytope};
