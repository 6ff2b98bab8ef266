use pwa_sens::bench::{
    EGGHOLDER_PIECE_COUNTS, EGGHOLDER_REFERENCE, eggholder_1d, eggholder_coarse_surrogate, eggholder_fine_surrogate,
    eggholder_partition,
};
use pwa_sens::{
    BenchFunction, ConvexSegment, FitConfig, FitObjective, Partition, PieceCount, Polytope, estimate_delta,
    fit_mmps, fit_segment, sample,
};

fn reference() -> Polytope {
    let (lo, hi) = EGGHOLDER_REFERENCE;
    Polytope::interval(lo, hi).unwrap()
}

/// Brute-force max of `|F - f|` over a uniform grid, written out against
/// the raw formula and raw piece maxima.
fn brute_delta(seg: &ConvexSegment, n: usize) -> (f64, f64) {
    let (lo, hi) = EGGHOLDER_REFERENCE;
    (0..=n)
        .map(|i| {
            let x = lo + (hi - lo) * i as f64 / n as f64;
            let model = seg.pieces().iter().map(|p| p.eval(&[x])).fold(f64::NEG_INFINITY, f64::max);
            ((eggholder_1d(x).unwrap() - model).abs(), x)
        })
        .fold((0.0, lo), |best, cur| if cur.0 > best.0 { cur } else { best })
}

#[test]
fn reference_samples_span_expected_range() {
    let s = sample(&BenchFunction::eggholder(), &reference(), 1501).unwrap();
    let lo = s.values().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!((lo + 280.0).abs() < 5.0, "{lo}");
    assert!((hi - 225.0).abs() < 5.0, "{hi}");
}

#[test]
fn printed_surrogates_error_matches_brute_force() {
    let f = BenchFunction::eggholder();
    for (seg, expected, at) in [
        (eggholder_coarse_surrogate(), 23.79, -239.6),
        (eggholder_fine_surrogate(), 11.48, -209.9),
    ] {
        let est = estimate_delta(&f, &seg, &reference(), 15_001).unwrap();
        let (oracle, oracle_at) = brute_delta(&seg, 15_000);
        assert!((est.delta - oracle).abs() < 1e-9);
        assert!((est.argmax_point[0] - oracle_at).abs() < 1e-9);
        // Rounded coefficients put the error well above the printed bound.
        assert!((est.delta - expected).abs() < 0.01, "{}", est.delta);
        assert!((est.argmax_point[0] - at).abs() < 0.05, "{:?}", est.argmax_point);
    }
}

#[test]
fn fits_are_at_least_as_good_as_published() {
    let f = BenchFunction::eggholder();
    let s = sample(&f, &reference(), 1501).unwrap();
    for (pieces, published) in [(3, 19.9), (8, 2.6)] {
        let seg = fit_segment(&s, pieces, FitObjective::LInf).unwrap();
        let delta = estimate_delta(&f, &seg, &reference(), 15_001).unwrap().delta;
        assert!(delta <= published, "{pieces} pieces: {delta}");
        // Sampled residual cannot exceed the dense-grid error.
        assert!(s.max_residual(&seg).unwrap() <= delta + 1e-9);
    }
}

#[test]
fn five_region_fit_is_continuous_with_boundary_minimizers() {
    let f = BenchFunction::eggholder();
    let config = FitConfig {
        partition: Partition::Regions(eggholder_partition()),
        pieces: PieceCount::PerRegion(EGGHOLDER_PIECE_COUNTS.to_vec()),
        resolution: 501,
        ..FitConfig::default()
    };
    let (mmps, delta) = fit_mmps(&f, &config, f.domain()).unwrap();
    let report = mmps.validate(pwa_sens::mmps::DEFAULT_BOUNDARY_SAMPLES);
    assert!(report.valid, "{report:?}");
    assert!(delta.delta.is_finite());
    assert_eq!(mmps.segments().len(), 5);

    let minimizer = |seg: &ConvexSegment| {
        let (lo, hi) = seg.region().interval_bounds().unwrap();
        (0..=10_000)
            .map(|i| lo + (hi - lo) * i as f64 / 10_000.0)
            .min_by(|a, b| seg.eval(&[*a]).total_cmp(&seg.eval(&[*b])))
            .unwrap()
    };
    let segs = mmps.segments();
    assert!((minimizer(&segs[0]) + 512.0).abs() < 1e-6);
    assert!((minimizer(&segs[1]) + 330.0).abs() < 1e-6);
    assert!((minimizer(&segs[4]) - 512.0).abs() < 1e-6);
}
