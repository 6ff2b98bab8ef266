//! Pipelines behind the `pwa-sens` command: fitting, modulus curves,
//! confidence radii, oracle checks and the built-in case studies, each
//! producing a reproducible report bundle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pwa_sens::bench::{
    EGGHOLDER_PIECE_COUNTS, EGGHOLDER_REFERENCE, eggholder_coarse_surrogate, eggholder_fine_surrogate,
    eggholder_partition,
};
use pwa_sens::modulus::default_grid_resolution;
use pwa_sens::{
    BenchFunction, ConvexSegment, CurveOptions, DeltaEstimate, FitConfig, FitObjective, LowerBoundModulus,
    MmpsFunction, Partition, PieceCount, Polytope, RefineConfig, RefineStep, ScalarField, SegmentFitOptions,
    SensitivityReport, TabulatedField, ValidationReport, estimate_delta, fit_mmps, fit_segment_with,
    lower_bound_modulus, modulus_curve_with, refine_to_radius, sample, sensitivity_report, verify_bound,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REPORT_SCHEMA: &str = "pwa-sens-report-v1";
pub const TOOL_NAME: &str = "pwa-sens";

/// Printed error bounds of the published Eggholder surrogates.
const COARSE_DELTA: f64 = 19.9;
const FINE_DELTA: f64 = 2.6;
const FINE_WIDE_DELTA: f64 = 12.5;
const EGGHOLDER_TARGET: f64 = 15.0;
const EGGHOLDER_INITIAL_CELLS: usize = 15;
const NMPC_PIECES: [usize; 2] = [4, 24];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] pwa_sens::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use pwa_sens::Error as E;
        match self {
            Self::Usage(_) => 2,
            Self::Io { .. } => 1,
            Self::Core(E::Format(_)) => 3,
            Self::Core(E::Input(_) | E::DimensionMismatch { .. } | E::InsufficientData { .. }) => 2,
            Self::Core(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "io",
            2 => "usage",
            3 => "format",
            _ => "evaluation",
        }
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Fit,
    Modulus,
    Radius,
    Verify,
    CaseStudy,
}

/// Everything a run depends on. Echoed into the manifest, minus the
/// output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    /// Built-in function name or path to a CSV table.
    pub function: Option<String>,
    /// Surrogate in mmps-v1 JSON.
    pub surrogate: Option<PathBuf>,
    /// Oracle grid points per axis; defaults by dimension.
    pub grid_resolution: Option<usize>,
    /// Fitting samples per axis; defaults by dimension.
    pub fit_resolution: Option<usize>,
    pub gamma_steps: usize,
    pub target_chi: Option<f64>,
    /// Defaults to linf, except l1 for the predictive-control case study.
    pub objective: Option<FitObjective>,
    /// One count for every region or one per region.
    pub pieces: Vec<usize>,
    /// Interior cut points of a one-dimensional partition.
    pub breakpoints: Vec<f64>,
    /// Error bound used by `radius` instead of a grid estimate.
    pub delta: Option<f64>,
    pub initial_cells: Option<usize>,
    pub seed: u64,
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(command: Command) -> Self {
        Self {
            command,
            function: None,
            surrogate: None,
            grid_resolution: None,
            fit_resolution: None,
            gamma_steps: pwa_sens::modulus::DEFAULT_GAMMA_STEPS,
            target_chi: None,
            objective: None,
            pieces: Vec::new(),
            breakpoints: Vec::new(),
            delta: None,
            initial_cells: None,
            seed: 0,
            output_dir: None,
        }
    }

    fn validate(&self) -> CliResult<()> {
        let positive = [
            ("grid resolution", self.grid_resolution),
            ("fit resolution", self.fit_resolution),
            ("gamma steps", Some(self.gamma_steps)),
            ("initial cells", self.initial_cells),
        ];
        for (name, value) in positive {
            if value == Some(0) {
                return Err(CliError::Usage(format!("{name} must be positive")));
            }
        }
        if self.pieces.contains(&0) {
            return Err(CliError::Usage("piece counts must be positive".into()));
        }
        if let Some(path) = &self.surrogate {
            if !path.exists() {
                return Err(CliError::Usage(format!("surrogate {} does not exist", path.display())));
            }
        }
        if let Some(t) = self.target_chi {
            if !(t > 0.0 && t.is_finite()) {
                return Err(CliError::Usage("target radius must be positive".into()));
            }
        }
        Ok(())
    }

    fn curve_options(&self) -> CurveOptions {
        CurveOptions {
            gamma_steps: self.gamma_steps,
            seed: self.seed,
            ..CurveOptions::default()
        }
    }

    fn grid_for(&self, dim: usize) -> usize {
        self.grid_resolution.unwrap_or_else(|| default_grid_resolution(dim))
    }

    fn fit_resolution_for(&self, dim: usize) -> usize {
        self.fit_resolution.unwrap_or(match dim {
            1 => 1501,
            2 => 41,
            _ => 11,
        })
    }
}

/// Built-in or tabulated objective.
#[derive(Debug, Clone)]
pub enum Objective {
    Bench(BenchFunction),
    Table(TabulatedField),
}

impl Objective {
    pub fn resolve(spec: &str) -> CliResult<Self> {
        if let Some(f) = BenchFunction::by_name(spec) {
            return Ok(Self::Bench(f));
        }
        let path = Path::new(spec);
        if path.is_file() {
            return Ok(Self::Table(TabulatedField::from_path(path)?));
        }
        Err(CliError::Usage(format!(
            "unknown function {spec:?}: expected one of {:?} or a CSV path",
            BenchFunction::NAMES
        )))
    }

    pub fn domain(&self) -> CliResult<Polytope> {
        match self {
            Self::Bench(f) => Ok(f.domain().clone()),
            Self::Table(t) => Ok(t.domain()?),
        }
    }
}

impl ScalarField for Objective {
    fn dim(&self) -> usize {
        match self {
            Self::Bench(f) => f.dim(),
            Self::Table(t) => t.dim(),
        }
    }

    fn eval(&self, x: &[f64]) -> pwa_sens::Result<f64> {
        match self {
            Self::Bench(f) => f.eval(x),
            Self::Table(t) => t.eval(x),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RefinementSummary {
    pub target_chi: f64,
    pub success: bool,
    pub steps: Vec<RefineStep>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub command: Command,
    pub function: Option<String>,
    pub sensitivity: BTreeMap<String, SensitivityReport>,
    pub bounds: BTreeMap<String, LowerBoundModulus>,
    /// Curve label to CSV path relative to the bundle.
    pub curves: BTreeMap<String, String>,
    pub delta: Option<DeltaEstimate>,
    pub validation: Option<ValidationReport>,
    pub refinement: Option<RefinementSummary>,
    pub notes: Vec<String>,
}

impl Report {
    fn new(config: &RunConfig) -> Self {
        Self {
            schema: REPORT_SCHEMA,
            command: config.command,
            function: config.function.clone(),
            sensitivity: BTreeMap::new(),
            bounds: BTreeMap::new(),
            curves: BTreeMap::new(),
            delta: None,
            validation: None,
            refinement: None,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Manifest {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Core(e.into()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

/// Everything a run writes.
#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub report: Report,
    /// Curve label to CSV text.
    pub curves: BTreeMap<String, String>,
    /// Primary surrogate in mmps-v1 JSON.
    pub surrogate: Option<String>,
    pub manifest: Manifest,
}

fn pretty<T: Serialize>(value: &T) -> CliResult<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    text.push('\n');
    Ok(text)
}

impl ReportBundle {
    /// File name to contents, in write order.
    pub fn files(&self) -> CliResult<BTreeMap<String, String>> {
        let mut files = BTreeMap::new();
        files.insert("report.json".to_string(), pretty(&self.report)?);
        files.insert("manifest.json".to_string(), pretty(&self.manifest)?);
        if let Some(s) = &self.surrogate {
            files.insert("surrogate.json".to_string(), s.clone());
        }
        for (label, csv) in &self.curves {
            files.insert(curve_path(label), csv.clone());
        }
        Ok(files)
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        for (name, contents) in self.files()? {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(&path, contents).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

fn curve_path(label: &str) -> String {
    format!("curves/{label}.csv")
}

struct Builder<'a> {
    config: &'a RunConfig,
    report: Report,
    curves: BTreeMap<String, String>,
    surrogate: Option<String>,
}

impl<'a> Builder<'a> {
    fn new(config: &'a RunConfig) -> Self {
        Self {
            config,
            report: Report::new(config),
            curves: BTreeMap::new(),
            surrogate: None,
        }
    }

    fn curve(&mut self, label: &str, seg: &ConvexSegment) -> CliResult<pwa_sens::ModulusCurve> {
        let curve = modulus_curve_with(seg, &self.config.curve_options())?;
        self.curves.insert(label.to_string(), curve.to_csv());
        self.report.curves.insert(label.to_string(), curve_path(label));
        self.report.bounds.insert(label.to_string(), lower_bound_modulus(seg)?);
        Ok(curve)
    }

    /// Oracle check of one segment at the measured error, against the
    /// smaller of the two radii.
    fn verify(&mut self, label: &str, objective: &dyn ScalarField, seg: &ConvexSegment) -> CliResult<()> {
        let curve = self.curve(label, seg)?;
        let grid = self.config.grid_for(seg.dim());
        let report = verify_bound(objective, seg, 0.0, grid)?.with_curve(&curve)?;
        let radius = report.best_radius();
        self.report.sensitivity.insert(label.to_string(), report.checked_against(radius));
        Ok(())
    }

    /// Radii at a given error bound, optionally checked by the oracle.
    fn at_delta(
        &mut self,
        label: &str,
        objective: Option<&dyn ScalarField>,
        seg: &ConvexSegment,
        delta: f64,
    ) -> CliResult<()> {
        let curve = self.curve(label, seg)?;
        let mut report = sensitivity_report(seg, delta)?.with_curve(&curve)?;
        if let Some(objective) = objective {
            let oracle = verify_bound(objective, seg, 0.0, self.config.grid_for(seg.dim()))?;
            report.objective_minimizer = oracle.objective_minimizer;
            report.surrogate_minimizer = oracle.surrogate_minimizer;
            report.oracle_distance = oracle.oracle_distance;
            report.grid_resolution = oracle.grid_resolution;
            report.tolerance = oracle.tolerance;
        }
        let radius = report.best_radius();
        self.report.sensitivity.insert(label.to_string(), report.checked_against(radius));
        Ok(())
    }

    fn finish(self) -> CliResult<ReportBundle> {
        Ok(ReportBundle {
            report: self.report,
            curves: self.curves,
            surrogate: self.surrogate,
            manifest: Manifest {
                tool: TOOL_NAME.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                seed: self.config.seed,
                config: self.config.clone(),
            },
        })
    }
}

fn segment_label(p: usize) -> String {
    format!("segment-{p}")
}

fn require_function(config: &RunConfig) -> CliResult<Objective> {
    let spec = config
        .function
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{:?} needs --function", config.command)))?;
    Objective::resolve(spec)
}

fn require_surrogate(config: &RunConfig) -> CliResult<MmpsFunction> {
    let path = config
        .surrogate
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("{:?} needs --surrogate", config.command)))?;
    Ok(MmpsFunction::from_json(&fs::read_to_string(path).map_err(io_err(path))?)?)
}

fn check_dims(objective: &Objective, surrogate: &MmpsFunction) -> CliResult<()> {
    if objective.dim() != surrogate.dim() {
        return Err(CliError::Usage(format!(
            "function has dimension {} but the surrogate has {}",
            objective.dim(),
            surrogate.dim()
        )));
    }
    Ok(())
}

fn partition(config: &RunConfig, domain: &Polytope) -> CliResult<Partition> {
    if config.breakpoints.is_empty() {
        return Ok(Partition::Count(1));
    }
    let (lo, hi) = domain
        .interval_bounds()
        .ok_or_else(|| CliError::Usage("breakpoints need a one-dimensional function".into()))?;
    let mut cuts = vec![lo];
    cuts.extend(&config.breakpoints);
    cuts.push(hi);
    if cuts.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CliError::Usage(format!("breakpoints must increase strictly inside [{lo}, {hi}]")));
    }
    Ok(Partition::Regions(
        cuts.windows(2)
            .map(|w| Polytope::interval(w[0], w[1]))
            .collect::<pwa_sens::Result<_>>()?,
    ))
}

fn run_fit(config: &RunConfig) -> CliResult<ReportBundle> {
    let objective = require_function(config)?;
    let domain = objective.domain()?;
    let dim = domain.dim();
    let mut b = Builder::new(config);
    let fit_objective = config.objective.unwrap_or_default();
    if let Some(target) = config.target_chi {
        let outcome = refine_to_radius(
            &objective,
            &domain,
            target,
            &RefineConfig {
                objective: fit_objective,
                resolution: config.fit_resolution_for(dim),
                verify_resolution: Some(config.grid_for(dim)),
                initial_cells: config.initial_cells.map(|c| vec![c; dim]),
                curve: config.curve_options(),
                ..RefineConfig::default()
            },
        )?;
        let seg = &outcome.surrogate.segments()[0];
        b.curve(&segment_label(0), seg)?;
        b.report.sensitivity.insert(segment_label(0), outcome.report.clone());
        b.report.refinement = Some(RefinementSummary {
            target_chi: target,
            success: outcome.success,
            steps: outcome.steps.clone(),
        });
        b.surrogate = Some(outcome.surrogate.to_json()?);
        return b.finish();
    }
    let pieces = match config.pieces.as_slice() {
        [] => PieceCount::Uniform(3),
        [q] => PieceCount::Uniform(*q),
        qs => PieceCount::PerRegion(qs.to_vec()),
    };
    let fit_config = FitConfig {
        partition: partition(config, &domain)?,
        pieces,
        objective: fit_objective,
        resolution: config.fit_resolution_for(dim),
        seed: config.seed,
        ..FitConfig::default()
    };
    let (surrogate, delta) = fit_mmps(&objective, &fit_config, &domain)?;
    for (p, seg) in surrogate.segments().iter().enumerate() {
        b.verify(&segment_label(p), &objective, seg)?;
    }
    b.report.delta = Some(delta);
    b.report.validation = Some(surrogate.validate(pwa_sens::mmps::DEFAULT_BOUNDARY_SAMPLES));
    b.surrogate = Some(surrogate.to_json()?);
    b.finish()
}

fn run_modulus(config: &RunConfig) -> CliResult<ReportBundle> {
    let surrogate = require_surrogate(config)?;
    let mut b = Builder::new(config);
    for (p, seg) in surrogate.segments().iter().enumerate() {
        b.curve(&segment_label(p), seg)?;
    }
    b.finish()
}

fn run_radius(config: &RunConfig) -> CliResult<ReportBundle> {
    let surrogate = require_surrogate(config)?;
    let objective = config.function.as_deref().map(Objective::resolve).transpose()?;
    if let Some(f) = &objective {
        check_dims(f, &surrogate)?;
    }
    let mut b = Builder::new(config);
    for (p, seg) in surrogate.segments().iter().enumerate() {
        let delta = match (config.delta, &objective) {
            (Some(d), _) => d,
            (None, Some(f)) => estimate_delta(f, seg, seg.region(), config.grid_for(seg.dim()))?.delta,
            (None, None) => return Err(CliError::Usage("radius needs --delta or --function".into())),
        };
        b.at_delta(&segment_label(p), None, seg, delta)?;
    }
    b.finish()
}

fn run_verify(config: &RunConfig) -> CliResult<ReportBundle> {
    let surrogate = require_surrogate(config)?;
    let objective = require_function(config)?;
    check_dims(&objective, &surrogate)?;
    let mut b = Builder::new(config);
    for (p, seg) in surrogate.segments().iter().enumerate() {
        b.verify(&segment_label(p), &objective, seg)?;
    }
    b.finish()
}

fn eggholder_case_study(config: &RunConfig, f: &BenchFunction) -> CliResult<ReportBundle> {
    let mut b = Builder::new(config);
    let coarse = eggholder_coarse_surrogate();
    let fine = eggholder_fine_surrogate();
    b.at_delta("coarse-printed-delta", Some(f), &coarse, COARSE_DELTA)?;
    b.at_delta("fine-printed-delta", Some(f), &fine, FINE_DELTA)?;
    b.at_delta("fine-wide-delta", Some(f), &fine, FINE_WIDE_DELTA)?;
    b.verify("coarse-measured-delta", f, &coarse)?;
    b.verify("fine-measured-delta", f, &fine)?;

    let (lo, hi) = EGGHOLDER_REFERENCE;
    let reference = Polytope::interval(lo, hi)?;
    let target = config.target_chi.unwrap_or(EGGHOLDER_TARGET);
    let outcome = refine_to_radius(
        f,
        &reference,
        target,
        &RefineConfig {
            objective: config.objective.unwrap_or_default(),
            resolution: config.fit_resolution_for(1),
            verify_resolution: Some(config.grid_for(1)),
            initial_cells: Some(vec![config.initial_cells.unwrap_or(EGGHOLDER_INITIAL_CELLS)]),
            curve: config.curve_options(),
            ..RefineConfig::default()
        },
    )?;
    b.curve("refined", &outcome.surrogate.segments()[0])?;
    b.report.sensitivity.insert("refined".into(), outcome.report.clone());
    b.report.refinement = Some(RefinementSummary {
        target_chi: target,
        success: outcome.success,
        steps: outcome.steps.clone(),
    });
    b.surrogate = Some(outcome.surrogate.to_json()?);

    let (partitioned, delta) = fit_mmps(
        f,
        &FitConfig {
            partition: Partition::Regions(eggholder_partition()),
            pieces: PieceCount::PerRegion(EGGHOLDER_PIECE_COUNTS.to_vec()),
            objective: config.objective.unwrap_or_default(),
            resolution: config.fit_resolution_for(1),
            seed: config.seed,
            ..FitConfig::default()
        },
        f.domain(),
    )?;
    for (p, seg) in partitioned.segments().iter().enumerate() {
        b.verify(&format!("five-region-{p}"), f, seg)?;
    }
    b.report.delta = Some(delta);
    b.report.validation = Some(partitioned.validate(pwa_sens::mmps::DEFAULT_BOUNDARY_SAMPLES));
    b.report.notes.push(format!(
        "partition count rule: fewest equal cells with diameter below the target gives {} cells; the refinement starts from {} cells",
        (reference.diameter()? / target).floor() as usize + 1,
        config.initial_cells.unwrap_or(EGGHOLDER_INITIAL_CELLS)
    ));
    b.report.notes.push(
        "theorem radii use the slope gap of the largest subregion; c1_all_adjacent gives the conservative variant"
            .into(),
    );
    b.finish()
}

fn nmpc_case_study(config: &RunConfig, f: &BenchFunction) -> CliResult<ReportBundle> {
    let mut b = Builder::new(config);
    let samples = sample(f, f.domain(), config.fit_resolution_for(2))?;
    let opts = SegmentFitOptions {
        objective: config.objective.unwrap_or(FitObjective::L1),
        seed: config.seed,
        ..SegmentFitOptions::default()
    };
    let mut largest = None;
    for q in NMPC_PIECES {
        let seg = fit_segment_with(&samples, q, &opts)?;
        b.verify(&format!("pieces-{q}"), f, &seg)?;
        largest = Some(seg);
    }
    let seg = largest.expect("at least one fit");
    b.surrogate = Some(MmpsFunction::from_segment(seg).to_json()?);
    b.finish()
}

fn run_case_study(config: &RunConfig) -> CliResult<ReportBundle> {
    let name = config.function.as_deref().unwrap_or("eggholder1d");
    match BenchFunction::by_name(name) {
        Some(f) if f.name() == "eggholder1d" => eggholder_case_study(config, &f),
        Some(f) => nmpc_case_study(config, &f),
        None => Err(CliError::Usage(format!(
            "case studies exist for {:?}, not {name:?}",
            BenchFunction::NAMES
        ))),
    }
}

/// Runs the configured pipeline and writes the bundle when an output
/// directory is set.
pub fn run(config: &RunConfig) -> CliResult<ReportBundle> {
    config.validate()?;
    let bundle = match config.command {
        Command::Fit => run_fit(config),
        Command::Modulus => run_modulus(config),
        Command::Radius => run_radius(config),
        Command::Verify => run_verify(config),
        Command::CaseStudy => run_case_study(config),
    }?;
    if let Some(dir) = &config.output_dir {
        bundle.write(dir)?;
    }
    Ok(bundle)
}

/// Re-runs the configuration recorded in a manifest.
pub fn rerun(manifest: &Manifest, output_dir: Option<PathBuf>) -> CliResult<ReportBundle> {
    let config = RunConfig {
        output_dir,
        ..manifest.config.clone()
    };
    run(&config)
}
