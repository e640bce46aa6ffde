use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crt_infer::adjust::{adjusted_estimate, CovariateDesign, Feature};
use crt_infer::data::{build_sample, read_clusters, read_tau_table, write_unit_rows, TauSpec};
use crt_infer::dgp::{
    generate_sample, parse_configs, true_estimands, CarScheme, Design, DgpConfig, GenerateOptions, SamplingRule,
    SizeDistribution,
};
use crt_infer::montecarlo::{render_table, replication_rng, run_study, write_csv, write_json, StudyRow};
use crt_infer::oracle::{discrete_estimands, DiscretePopulation, PopulationAtom};
use crt_infer::randomization::MechanismKind;
use crt_infer::report::estimate;
use crt_infer::{EstimateReport, Target};

#[derive(Parser)]
#[command(
    name = "crt-infer",
    version,
    about = "Estimation and inference for cluster randomized experiments under stratified randomization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate treatment effects from an individual-level CSV.
    Analyze(AnalyzeArgs),
    /// Run the Monte Carlo study for one or more simulation designs.
    Simulate(SimulateArgs),
    /// Print the exact equally- and size-weighted effects of a design.
    Truth(TruthArgs),
    /// Print the estimands of a discrete cluster population.
    Example(ExampleArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mechanism {
    Sbr,
    Bernoulli,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV with columns cluster_id,unit_id,outcome,arm,stratum[,cluster_size][,covariates...].
    #[arg(long, short)]
    input: PathBuf,
    /// Target fraction of treated clusters.
    #[arg(long, default_value_t = 0.5)]
    pi: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Assignment mechanism; fixes tau(s) for every stratum.
    #[arg(long, value_enum, conflicts_with = "tau_file")]
    mechanism: Option<Mechanism>,
    /// CSV with columns stratum,tau.
    #[arg(long)]
    tau_file: Option<PathBuf>,
    /// Comma-separated subset of dim,theta1,theta2,theta2_sd.
    #[arg(long, value_delimiter = ',', default_value = "theta1,theta2")]
    targets: Vec<Target>,
    /// Cluster-level covariate columns used for linear adjustment.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Also regress on cluster size when adjusting.
    #[arg(long)]
    adjust_size: bool,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(Args, Default)]
struct DesignArgs {
    /// JSON file with one simulation design or an array of designs.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["design1", "design2"])]
    design: Option<String>,
    #[arg(long, value_parser = ["car1", "car2"])]
    car: Option<String>,
    #[arg(long, value_parser = ["full", "fixed10", "capped_fraction"])]
    sampling: Option<String>,
    /// Beta-Binomial shape a.
    #[arg(long)]
    size_a: Option<f64>,
    /// Beta-Binomial shape b.
    #[arg(long)]
    size_b: Option<f64>,
    /// Beta-Binomial support bound; sizes range over 10..=10(n_supp+1).
    #[arg(long)]
    n_supp: Option<u64>,
    /// Number of clusters.
    #[arg(long = "clusters")]
    g: Option<usize>,
    #[arg(long)]
    pi: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long, default_value_t = 2000)]
    reps: usize,
    /// Use 5000 replications.
    #[arg(long, conflicts_with = "reps")]
    full: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, env = "CRT_INFER_WORKERS")]
    workers: Option<usize>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Shorthand for --format table.
    #[arg(long)]
    table: bool,
    /// Write results here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the first replication's sample of the first design as individual rows.
    #[arg(long)]
    dump_csv: Option<PathBuf>,
}

#[derive(Args)]
struct TruthArgs {
    #[command(flatten)]
    design: DesignArgs,
}

#[derive(Args)]
struct ExampleArgs {
    /// JSON array of {probability, size, effect, sampled}; defaults to the two-school population.
    #[arg(long)]
    population: Option<PathBuf>,
}

enum Failure {
    Input(String),
    Estimation(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Estimation(_) => 3,
        }
    }
}

impl From<crt_infer::Error> for Failure {
    fn from(e: crt_infer::Error) -> Self {
        if e.is_input_error() {
            Failure::Input(e.to_string())
        } else {
            Failure::Estimation(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| io_failure(path, e))
}

fn output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_failure(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_failure(e: io::Error) -> Failure {
    Failure::Input(format!("write failed: {e}"))
}

fn load_designs(args: &DesignArgs) -> CliResult<Vec<DgpConfig>> {
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_failure(path, e))?;
        return Ok(parse_configs(&text)?);
    }
    let design = match args.design.as_deref() {
        Some("design2") => Design::Design2,
        _ => Design::Design1,
    };
    let car = match args.car.as_deref() {
        Some("car2") => CarScheme::Car2,
        _ => CarScheme::Car1,
    };
    let sampling_rule = match args.sampling.as_deref() {
        Some("fixed10") => SamplingRule::Fixed10,
        Some("capped_fraction") => SamplingRule::CappedFraction,
        _ => SamplingRule::Full,
    };
    let cfg = DgpConfig {
        size_dist: SizeDistribution {
            a: args.size_a.unwrap_or(1.0),
            b: args.size_b.unwrap_or(1.0),
            n_supp: args.n_supp.unwrap_or(49),
        },
        design,
        sampling_rule,
        car,
        g: args.g.unwrap_or(100),
        pi: args.pi.unwrap_or(0.5),
    };
    cfg.validate()?;
    Ok(vec![cfg])
}

fn cmd_analyze(args: AnalyzeArgs) -> CliResult {
    if args.targets.is_empty() {
        return Err(Failure::Input("no targets requested".into()));
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Failure::Input(format!("alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let loaded = read_clusters(open(&args.input)?, &args.covariates)?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let tau = match (&args.tau_file, args.mechanism) {
        (Some(path), _) => TauSpec::Table(read_tau_table(open(path)?)?),
        (None, Some(Mechanism::Bernoulli)) => TauSpec::Mechanism(MechanismKind::Bernoulli),
        (None, _) => TauSpec::Mechanism(MechanismKind::Sbr),
    };
    let sample = build_sample(loaded.clusters, args.pi, &tau)?;

    let mut reports: Vec<EstimateReport> = Vec::new();
    for &t in &args.targets {
        reports.push(estimate(&sample, t, args.alpha)?);
    }
    if !args.covariates.is_empty() || args.adjust_size {
        let mut features: Vec<Feature> = (0..args.covariates.len()).map(Feature::Covariate).collect();
        if args.adjust_size {
            features.push(Feature::Size);
        }
        let design = CovariateDesign::uniform(features);
        for &t in &args.targets {
            if matches!(t, Target::Theta1 | Target::Theta2) {
                reports.push(adjusted_estimate(&sample, t, &design, args.alpha)?);
            }
        }
    }
    render_reports(&reports, args.format).map_err(write_failure)
}

fn render_reports(reports: &[EstimateReport], format: Format) -> io::Result<()> {
    let mut out = BufWriter::new(io::stdout().lock());
    match format {
        Format::Json => {
            serde_json::to_writer_pretty(&mut out, reports).map_err(io::Error::other)?;
            writeln!(out)?;
        }
        Format::Csv => {
            writeln!(
                out,
                "target,variance_kind,estimate,variance,std_error,ci_lower,ci_upper,alpha,G,conventional_variance"
            )?;
            for r in reports {
                let conv = r.diagnostics.conventional_variance.map(|v| v.to_string()).unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{}",
                    r.target, r.variance_kind, r.estimate, r.variance, r.std_error, r.ci_lower, r.ci_upper, r.alpha, r.g, conv
                )?;
            }
        }
        Format::Table => {
            writeln!(
                out,
                "{:<10} {:<15} {:>12} {:>12} {:>12} {:>12} {:>14}",
                "target", "variance", "estimate", "std.error", "ci.lower", "ci.upper", "conv.std.error"
            )?;
            for r in reports {
                let conv = r
                    .diagnostics
                    .conventional_variance
                    .map(|v| format!("{:.6}", (v / r.g as f64).sqrt()))
                    .unwrap_or_else(|| "-".into());
                writeln!(
                    out,
                    "{:<10} {:<15} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>14}",
                    r.target.to_string(),
                    r.variance_kind.to_string(),
                    r.estimate,
                    r.std_error,
                    r.ci_lower,
                    r.ci_upper,
                    conv
                )?;
            }
            if let Some(r) = reports.first() {
                writeln!(
                    out,
                    "G = {}, alpha = {}, treated fraction = {:.4}",
                    r.g, r.alpha, r.diagnostics.realized_treated_fraction
                )?;
            }
        }
    }
    out.flush()
}

fn cmd_simulate(args: SimulateArgs) -> CliResult {
    let reps = if args.full { 5000 } else { args.reps };
    if reps == 0 {
        return Err(Failure::Input("--reps must be at least 1".into()));
    }
    let workers = match args.workers {
        Some(0) => return Err(Failure::Input("--workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let configs = load_designs(&args.design)?;

    if let Some(path) = &args.dump_csv {
        let generated = generate_sample(
            &configs[0],
            &mut replication_rng(args.seed, 0),
            GenerateOptions {
                keep_rows: true,
                oracle: false,
            },
        )?;
        let file = File::create(path).map_err(|e| io_failure(path, e))?;
        write_unit_rows(generated.rows.as_deref().unwrap_or_default(), BufWriter::new(file))?;
    }

    let mut rows: Vec<StudyRow> = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let row = run_study(cfg, reps, args.alpha, args.seed, workers)?;
        if row.excluded > 0 {
            eprintln!(
                "note: {}: {} of {} replications excluded (a stratum lacked one arm)",
                cfg.label(),
                row.excluded,
                reps
            );
        }
        rows.push(row);
    }
    let format = if args.table { Format::Table } else { args.format };
    let mut out = output(args.out.as_deref())?;
    match format {
        Format::Csv => write_csv(&rows, &mut out)?,
        Format::Json => write_json(&rows, &mut out)?,
        Format::Table => out.write_all(render_table(&rows).as_bytes()).map_err(write_failure)?,
    }
    out.flush().map_err(write_failure)
}

/// Six-decimal rendering without a negative zero.
fn fixed6(x: f64) -> String {
    let r = (x * 1e6).round() / 1e6;
    format!("{:.6}", if r == 0.0 { 0.0 } else { r })
}

fn cmd_truth(args: TruthArgs) -> CliResult {
    let configs = load_designs(&args.design)?;
    let mut out = output(None)?;
    for cfg in &configs {
        let t = true_estimands(cfg);
        writeln!(out, "{} {}", fixed6(t.theta1), fixed6(t.theta2)).map_err(write_failure)?;
    }
    out.flush().map_err(write_failure)
}

fn cmd_example(args: ExampleArgs) -> CliResult {
    let pop = match &args.population {
        None => DiscretePopulation::schools_example(),
        Some(path) => {
            let atoms: Vec<PopulationAtom> =
                serde_json::from_reader(open(path)?).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            DiscretePopulation::new(atoms)?
        }
    };
    let e = discrete_estimands(&pop);
    let mut out = output(None)?;
    let w = &mut out;
    (|| -> io::Result<()> {
        writeln!(w, "{:>12} {:>8} {:>10} {:>8}", "probability", "size", "effect", "sampled")?;
        for a in pop.atoms() {
            writeln!(w, "{:>12.4} {:>8} {:>10.4} {:>8}", a.probability, a.size, a.effect, a.sampled)?;
        }
        writeln!(w, "theta1   {:.6}", e.theta1)?;
        writeln!(w, "theta2   {:.6}", e.theta2)?;
        writeln!(w, "vartheta {:.6}", e.vartheta)?;
        w.flush()
    })()
    .map_err(write_failure)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Truth(a) => cmd_truth(a),
        Command::Example(a) => cmd_example(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Input(m) | Failure::Estimation(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
