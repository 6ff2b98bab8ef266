use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pwa_sens::FitObjective;
use pwa_sens_cli::{CliError, Command, Manifest, ReportBundle, RunConfig};

/// Certified minimizer-distance bounds for piecewise-affine surrogates.
#[derive(Debug, Parser)]
#[command(name = "pwa-sens", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Fit a surrogate to a function and check its confidence radii.
    Fit(Flags),
    /// Export convexity-modulus curves of a surrogate.
    Modulus(Flags),
    /// Confidence radii of a surrogate at a given or estimated error.
    Radius(Flags),
    /// Brute-force check of the radii against the original function.
    Verify(Flags),
    /// Reproduce a built-in case study (eggholder1d or nmpc-theta0).
    CaseStudy(Flags),
    /// Re-run the configuration recorded in a bundle manifest.
    Rerun {
        manifest: PathBuf,
        /// Output directory for the new bundle.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Flags {
    /// Built-in function (eggholder1d, nmpc-theta0) or CSV table with a
    /// header and columns x_1..x_n, value.
    #[arg(long)]
    function: Option<String>,
    /// Surrogate in mmps-v1 JSON.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Oracle grid points per axis [default: 10000 up to 2-D, 100 in 3-D, 20 above].
    #[arg(long)]
    grid_resolution: Option<usize>,
    /// Fitting samples per axis [default: 1501 in 1-D, 41 in 2-D, 11 above].
    #[arg(long)]
    fit_resolution: Option<usize>,
    /// Samples of each modulus curve.
    #[arg(long, default_value_t = pwa_sens::modulus::DEFAULT_GAMMA_STEPS)]
    gamma_steps: usize,
    /// Refine the fit until the theorem radius is at most this value.
    #[arg(long)]
    target_chi: Option<f64>,
    /// Fitting objective [default: linf; l1 for the nmpc-theta0 case study].
    #[arg(long, value_parser = ["linf", "l1"])]
    objective: Option<String>,
    /// Affine pieces per segment, one value or one per region.
    #[arg(long, value_delimiter = ',')]
    pieces: Vec<usize>,
    /// Interior cut points of a 1-D partition.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    breakpoints: Vec<f64>,
    /// Error bound for `radius` instead of a grid estimate.
    #[arg(long)]
    delta: Option<f64>,
    /// Equal cells per axis to start refinement from.
    #[arg(long)]
    initial_cells: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the report bundle.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Flags {
    fn into_config(self, command: Command) -> Result<RunConfig, CliError> {
        let objective = self
            .objective
            .map(|o| o.parse::<FitObjective>())
            .transpose()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(RunConfig {
            command,
            function: self.function,
            surrogate: self.surrogate,
            grid_resolution: self.grid_resolution,
            fit_resolution: self.fit_resolution,
            gamma_steps: self.gamma_steps,
            target_chi: self.target_chi,
            objective,
            pieces: self.pieces,
            breakpoints: self.breakpoints,
            delta: self.delta,
            initial_cells: self.initial_cells,
            seed: self.seed,
            output_dir: self.out,
        })
    }
}

fn summarize(bundle: &ReportBundle) {
    for (label, r) in &bundle.report.sensitivity {
        let curve = r.chi_curve.map_or("-".to_string(), |c| format!("{c:.4}"));
        let oracle = r.oracle_distance.map_or("-".to_string(), |d| format!("{d:.4}"));
        println!(
            "{label}: delta={:.4} chi_theorem={:.4} chi_curve={curve} oracle_distance={oracle} verified={}",
            r.delta, r.chi_theorem, r.verified
        );
    }
    if let Some(refine) = &bundle.report.refinement {
        println!(
            "refinement: target={} success={} iterations={}",
            refine.target_chi,
            refine.success,
            refine.steps.len()
        );
    }
    for label in bundle.report.curves.keys() {
        if !bundle.report.sensitivity.contains_key(label) {
            println!("{label}: curve exported");
        }
    }
}

fn execute(cli: Cli) -> Result<ReportBundle, CliError> {
    let config = match cli.command {
        Cmd::Fit(f) => f.into_config(Command::Fit)?,
        Cmd::Modulus(f) => f.into_config(Command::Modulus)?,
        Cmd::Radius(f) => f.into_config(Command::Radius)?,
        Cmd::Verify(f) => f.into_config(Command::Verify)?,
        Cmd::CaseStudy(f) => f.into_config(Command::CaseStudy)?,
        Cmd::Rerun { manifest, out } => return pwa_sens_cli::rerun(&Manifest::load(&manifest)?, out),
    };
    pwa_sens_cli::run(&config)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprintln!("{}", CliError::Usage(e.to_string()).to_json());
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match execute(cli) {
        Ok(bundle) => {
            summarize(&bundle);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
