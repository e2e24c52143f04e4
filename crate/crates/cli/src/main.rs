//! `bifactor` command-line tool.
//!
//! Exit codes: 0 identifiable (or success), 1 unreadable input or bad
//! usage, 2 invariant violation or refused construction, 3 non-identifiable,
//! 4 undetermined.

use bifactor::bench::{run_bench, BenchConfig};
use bifactor::estimate::{linear_fit, stem_fit, StemConfig};
use bifactor::ident::{
    check, construct_case2c_certificate, construct_extended_rho_perturbation, construct_main_scaling_certificate,
    construct_rotation_certificate, construct_scaling_certificate, construct_theorem10_certificate, CertError,
    Certificate, CheckError, CheckOptions, Status, Verdict,
};
use bifactor::io::{load_model, parse_data_csv, read_to_string, write_string, IoError};
use bifactor::moments::{observables, observables_rho, MomentError};
use bifactor::simulate::{simulate, simulate_rho, SimError};
use bifactor::{AnyParams, Link};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "bifactor", version, about = "Identifiability checks, certificates, simulation and fitting for bifactor models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ModelInput {
    /// JSON model spec, or a loading-matrix CSV when --sidecar is given.
    model: PathBuf,
    /// JSON sidecar with everything but the loadings.
    #[arg(long)]
    sidecar: Option<PathBuf>,
}

#[derive(Args)]
struct Output {
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstructionArg {
    Auto,
    Scaling,
    MainScaling,
    Case2c,
    Rotation,
    RhoPerturb,
    Theorem10,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct StemArgs {
    #[arg(long)]
    n_iter: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use the long protocol: 10000/5000 iterations and 500 replications.
    #[arg(long)]
    full_scale: bool,
}

impl StemArgs {
    fn config(&self) -> StemConfig {
        let base = if self.full_scale { StemConfig::full_scale() } else { StemConfig::default() };
        StemConfig {
            n_iter: self.n_iter.unwrap_or(base.n_iter),
            burn_in: self.burn_in.unwrap_or(base.burn_in),
            seed: self.seed,
            ..base
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Identifiability verdict with its evidence.
    Check {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        output: Output,
        /// Skip the numerical probe when no condition decides.
        #[arg(long)]
        no_probe: bool,
    },
    /// Build a second parameter set with the same observable moments.
    Certificate {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        output: Output,
        #[arg(long, value_enum, default_value = "auto")]
        construction: ConstructionArg,
        /// Testlet (1-based) for the scaling and case2c constructions.
        #[arg(long)]
        testlet: Option<usize>,
        /// Construction parameter (c, θ, δ or t); chosen automatically if omitted.
        #[arg(long, allow_hyphen_values = true)]
        knob: Option<f64>,
    },
    /// Implied means and covariances, or thresholds and tetrachorics.
    Moments {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        output: Output,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
    /// Draw a response dataset. With --out a JSON sidecar is written next to the CSV.
    Simulate {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Fit a model with the pattern of a spec to a response CSV.
    Fit {
        data: PathBuf,
        /// Model spec whose nonzero loadings give the pattern to estimate.
        pattern: PathBuf,
        #[command(flatten)]
        output: Output,
        #[command(flatten)]
        stem: StemArgs,
    },
    /// Simulate-and-fit grid reporting RMSE per sample size.
    Bench {
        #[arg(long)]
        case: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [1000, 2000, 4000])]
        n: Vec<usize>,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long, value_enum, default_value = "probit")]
        link: LinkArg,
        #[command(flatten)]
        stem: StemArgs,
        /// Stop starting new fits after this many minutes.
        #[arg(long)]
        max_minutes: Option<f64>,
        /// Also write the long-format RMSE table here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        output: Output,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LinkArg {
    Linear,
    Probit,
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl ToString) -> Failure {
    Failure { code: 1, message: message.to_string() }
}

fn invariant(message: impl ToString) -> Failure {
    Failure { code: 2, message: message.to_string() }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Invalid(_) => invariant(e),
            _ => usage(e),
        }
    }
}

impl From<CheckError> for Failure {
    fn from(e: CheckError) -> Self {
        invariant(e)
    }
}

impl From<MomentError> for Failure {
    fn from(e: MomentError) -> Self {
        invariant(e)
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Io(e) => e.into(),
            _ => invariant(e),
        }
    }
}

fn load(input: &ModelInput) -> Result<AnyParams, Failure> {
    Ok(load_model(&input.model, input.sidecar.as_deref())?.to_params()?)
}

fn emit<T: Serialize>(value: &T, output: &Output) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(invariant)? + "\n";
    emit_text(&text, output.out.as_deref())
}

fn emit_text(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(p) => Ok(write_string(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn status_code(s: Status) -> u8 {
    match s {
        Status::Identifiable => 0,
        Status::NonIdentifiable => 3,
        Status::Undetermined => 4,
    }
}

fn cmd_check(input: &ModelInput, output: &Output, no_probe: bool) -> Result<u8, Failure> {
    let p = load(input)?;
    let opts = CheckOptions { probe: !no_probe, ..CheckOptions::default() };
    let v = check(&p, &opts)?;
    emit(&v, output)?;
    eprintln!("{:?} ({})", v.status, v.rule);
    Ok(status_code(v.status))
}

fn cmd_certificate(
    input: &ModelInput,
    output: &Output,
    construction: ConstructionArg,
    testlet: Option<usize>,
    knob: Option<f64>,
) -> Result<u8, Failure> {
    let p = load(input)?;
    if testlet == Some(0) {
        return Err(usage("--testlet is 1-based"));
    }
    let refuse = |e: CertError| invariant(format!("construction refused: {e}"));
    let restricted = || match &p {
        AnyParams::Restricted(m) => Ok(m),
        AnyParams::Unrestricted(_) => Err(invariant("this construction needs a model without rho")),
    };
    let cert: Certificate = match construction {
        ConstructionArg::Auto => {
            let v: Verdict = check(&p, &CheckOptions::default())?;
            match v.certificate {
                Some(c) => c,
                None => {
                    eprintln!("no certificate: verdict {:?} ({})", v.status, v.rule);
                    for n in &v.notes {
                        eprintln!("  {n}");
                    }
                    return Ok(status_code(v.status));
                }
            }
        }
        ConstructionArg::Theorem10 => match &p {
            AnyParams::Unrestricted(u) => construct_theorem10_certificate(u, knob).map_err(refuse)?,
            AnyParams::Restricted(_) => return Err(invariant("theorem10 needs a spec with rho")),
        },
        ConstructionArg::Scaling => {
            let m = restricted()?;
            let ev = check(&p, &CheckOptions { probe: false, certificates: false, ..CheckOptions::default() })?.evidence;
            let g = testlet.map(|g| g - 1).or_else(|| ev.q_sizes.iter().position(|&q| q <= 2));
            let g = g.ok_or_else(|| invariant("construction refused: no testlet with |Q_g| <= 2"))?;
            construct_scaling_certificate(m, g, knob).map_err(refuse)?
        }
        ConstructionArg::Case2c => {
            let m = restricted()?;
            let ev = check(&p, &CheckOptions { probe: false, certificates: false, ..CheckOptions::default() })?.evidence;
            let g = testlet.map(|g| g - 1).or_else(|| ev.h6.as_ref().and_then(|l| l.first()).map(|g| g - 1));
            let g = g.ok_or_else(|| invariant("construction refused: H6 is empty"))?;
            construct_case2c_certificate(m, g, knob).map_err(refuse)?
        }
        ConstructionArg::MainScaling => construct_main_scaling_certificate(restricted()?, knob).map_err(refuse)?,
        ConstructionArg::Rotation => construct_rotation_certificate(restricted()?, knob).map_err(refuse)?,
        ConstructionArg::RhoPerturb => construct_extended_rho_perturbation(restricted()?, knob).map_err(refuse)?,
    };
    emit(&cert, output)?;
    eprintln!("{:?}: moment distance {:e}, parameter distance {:e}", cert.construction, cert.moment_distance, cert.param_distance);
    Ok(3)
}

#[derive(Serialize)]
#[serde(tag = "link", rename_all = "snake_case")]
enum MomentsOut {
    Linear { mean: Vec<f64>, covariance: Vec<Vec<f64>> },
    Probit { thresholds: Vec<f64>, marginals: Vec<f64>, tetrachoric: Vec<Vec<f64>> },
}

fn cmd_moments(input: &ModelInput, output: &Output, format: Format) -> Result<u8, Failure> {
    let p = load(input)?;
    let obs = match &p {
        AnyParams::Restricted(m) => observables(m)?,
        AnyParams::Unrestricted(u) => observables_rho(u)?,
    };
    let first: Vec<f64> = obs.first.iter().copied().collect();
    let second: Vec<Vec<f64>> = obs.second.row_iter().map(|r| r.iter().copied().collect()).collect();
    match format {
        Format::Json => {
            let out = match p.base().link {
                Link::Linear => MomentsOut::Linear { mean: first, covariance: second },
                Link::Probit => MomentsOut::Probit {
                    marginals: first.iter().map(|&t| bifactor::moments::norm_cdf(-t)).collect(),
                    thresholds: first,
                    tetrachoric: second,
                },
            };
            emit(&out, output)?;
        }
        Format::Csv => {
            let j = first.len();
            let lead = match p.base().link {
                Link::Linear => "mean",
                Link::Probit => "threshold",
            };
            let mut text = format!("item,{lead}");
            for c in 1..=j {
                text.push_str(&format!(",item{c}"));
            }
            text.push('\n');
            for (i, row) in second.iter().enumerate() {
                text.push_str(&format!("item{},{}", i + 1, first[i]));
                for v in row {
                    text.push_str(&format!(",{v}"));
                }
                text.push('\n');
            }
            emit_text(&text, output.out.as_deref())?;
        }
    }
    Ok(0)
}

fn cmd_simulate(input: &ModelInput, output: &Output, n: usize, seed: u64) -> Result<u8, Failure> {
    let p = load(input)?;
    let ds = match &p {
        AnyParams::Restricted(m) => simulate(m, n, seed)?,
        AnyParams::Unrestricted(u) => simulate_rho(u, n, seed)?,
    };
    match &output.out {
        Some(path) => ds.write(path, &path.with_extension("json"))?,
        None => {
            let header: Vec<String> = (1..=ds.values.ncols()).map(|j| format!("item{j}")).collect();
            print!("{}", bifactor::io::matrix_to_csv(&ds.values, Some(&header))?);
        }
    }
    Ok(0)
}

fn cmd_fit(data: &Path, pattern: &Path, output: &Output, stem: &StemArgs) -> Result<u8, Failure> {
    let y = parse_data_csv(&read_to_string(data)?)?;
    let spec = load_model(pattern, None)?;
    let p = match spec.to_params_unchecked()? {
        AnyParams::Restricted(m) => m,
        AnyParams::Unrestricted(_) => return Err(invariant("cannot fit a model with free rho")),
    };
    p.structure.check_shape().map_err(invariant)?;
    let fit = match p.link {
        Link::Probit => stem_fit(&y, &p.structure, p.kind, &stem.config()),
        Link::Linear => linear_fit(&y, &p.structure, p.kind, &Default::default()),
    }
    .map_err(invariant)?;
    emit(&fit, output)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    case: usize,
    n: &[usize],
    reps: Option<usize>,
    link: LinkArg,
    stem: &StemArgs,
    max_minutes: Option<f64>,
    csv: Option<&Path>,
    output: &Output,
) -> Result<u8, Failure> {
    let default_reps = if stem.full_scale { 500 } else { 100 };
    let cfg = BenchConfig {
        case,
        link: match link {
            LinkArg::Linear => Link::Linear,
            LinkArg::Probit => Link::Probit,
        },
        ns: n.to_vec(),
        reps: reps.unwrap_or(default_reps),
        seed: stem.seed,
        stem: stem.config(),
        max_minutes,
    };
    let report = run_bench(&cfg).map_err(|e| match e {
        bifactor::bench::BenchError::UnknownCase(_) | bifactor::bench::BenchError::Config(_) => usage(e),
        _ => invariant(e),
    })?;
    emit(&report, output)?;
    if let Some(path) = csv {
        write_string(path, &report.to_csv())?;
    }
    eprint!("{}", report.table());
    if report.partial {
        eprintln!("time budget reached; report is partial");
    }
    Ok(0)
}

fn run(cli: Cli) -> Result<u8, Failure> {
    match &cli.cmd {
        Cmd::Check { input, output, no_probe } => cmd_check(input, output, *no_probe),
        Cmd::Certificate { input, output, construction, testlet, knob } => {
            cmd_certificate(input, output, *construction, *testlet, *knob)
        }
        Cmd::Moments { input, output, format } => cmd_moments(input, output, *format),
        Cmd::Simulate { input, output, n, seed } => cmd_simulate(input, output, *n, *seed),
        Cmd::Fit { data, pattern, output, stem } => cmd_fit(data, pattern, output, stem),
        Cmd::Bench { case, n, reps, link, stem, max_minutes, csv, output } => {
            cmd_bench(*case, n, *reps, *link, stem, *max_minutes, csv.as_deref(), output)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
