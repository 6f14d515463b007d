//! `apci`: fit APC-I models to CSV micro data, simulate data with known
//! effects, and demonstrate accounting-model non-identifiability.

mod output;

use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use apci::apci::{extract_patterns, run_procedure, ApciConfig, ApciData, ApciError, PatternMode};
use apci::data::{read_records, write_records, DataError};
use apci::design::{Coding, DesignError};
use apci::glm::{Family, GlmError};
use apci::grid::{GridError, GridSpec};
use apci::report::render_report;
use apci::sim::{accounting_demo, generate, poly_demo, PolyDemoSpec, SimError, TrueEffects};

use output::{patterns_csv, Staged};

#[derive(Parser)]
#[command(name = "apci", version, about = "Age-period-cohort-interaction models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the APC-I model and run the three-step cohort procedure.
    Fit(FitArgs),
    /// Generate a CSV dataset from known effects.
    Simulate(SimulateArgs),
    /// Show that the additive age + period + cohort model is not identified.
    Demo(DemoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Logit,
    Gaussian,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Logit => Family::BinomialLogit,
            FamilyArg::Gaussian => Family::GaussianIdentity,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CodingArg {
    Effect,
    Dummy,
}

#[derive(Args)]
struct FitArgs {
    /// CSV with header `outcome,age,year[,weight][,covariates...]`.
    #[arg(long)]
    input: PathBuf,
    /// Grid JSON file, inline JSON, or `AxP` for a uniform grid. Defaults to
    /// ages 20-64 in 5-year groups by periods 1990-2017.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, value_enum, default_value = "logit")]
    family: FamilyArg,
    #[arg(long, value_enum, default_value = "effect")]
    coding: CodingArg,
    /// Comma-separated covariate column names.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Significance level for cohort classification.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Accepted for a uniform interface; fitting is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON (TrueEffects). Defaults to the built-in 9 x 6 scenario.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the scenario's records per cell.
    #[arg(long)]
    cell_size: Option<usize>,
    /// Family for the built-in scenario.
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    /// Output directory; receives `data.csv` and `data.meta.json`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    /// Grid JSON file, inline JSON, or `AxP`. Defaults to 5x5.
    #[arg(long)]
    grid: Option<String>,
    /// Also write `demo.json` to this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure with its exit status: 2 configuration, 3 data, 4 numerical.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }

    fn numerical(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::MissingColumn(_) | DataError::DuplicateColumn(_) => Failure::config(e.to_string()),
            DataError::Csv(_) => Failure::data(e.to_string()),
            DataError::Io(_) => Failure::config(e.to_string()),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        Failure::config(e.to_string())
    }
}

fn apci_failure(e: ApciError, spec: &GridSpec) -> Failure {
    match &e {
        ApciError::EmptyCells(cells) => {
            let named: Vec<String> = cells
                .iter()
                .map(|c| format!("{c} age {} period {}", spec.age_label(c.age), spec.period_label(c.period)))
                .collect();
            Failure::data(format!("grid cells with no weighted observations: {}", named.join("; ")))
        }
        ApciError::Glm(GlmError::InvalidInput(_)) => Failure::data(e.to_string()),
        ApciError::Glm(_) | ApciError::AugmentedRankDeficient { .. } => Failure::numerical(e.to_string()),
        ApciError::Grid(GridError::InvalidScheme(_)) | ApciError::InvalidTable(_) => Failure::config(e.to_string()),
        ApciError::Design(DesignError::BadReference { .. }) => Failure::config(e.to_string()),
        _ => Failure::data(e.to_string()),
    }
}

fn parse_grid(arg: Option<&str>, default: impl FnOnce() -> GridSpec) -> Result<GridSpec, Failure> {
    let Some(arg) = arg else { return Ok(default()) };
    let text = arg.trim();
    if let Some((a, p)) = text.split_once('x') {
        if let (Ok(a), Ok(p)) = (a.parse(), p.parse()) {
            return GridSpec::uniform(a, p).map_err(|e| Failure::config(format!("grid: {e}")));
        }
    }
    let json = if text.starts_with('{') {
        text.to_string()
    } else {
        std::fs::read_to_string(text).map_err(|e| Failure::config(format!("grid file {text}: {e}")))?
    };
    GridSpec::from_json(&json).map_err(|e| Failure::config(format!("grid: {e}")))
}

fn thread_pool() -> Result<rayon::ThreadPool, Failure> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("APCI_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Failure::config(format!("APCI_THREADS must be a positive integer, got '{v}'")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Failure::config(format!("thread pool: {e}")))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::config(format!("output directory {}: {e}", dir.display())))
}

fn cmd_fit(args: FitArgs) -> Result<(), Failure> {
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Failure::config(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let spec = parse_grid(args.grid.as_deref(), GridSpec::cps_1990_2017)?;
    let family: Family = args.family.into();
    let config = ApciConfig {
        family,
        coding: match args.coding {
            CodingArg::Effect => Coding::Effect,
            CodingArg::Dummy => Coding::dummy(),
        },
        alpha: args.alpha,
        ..ApciConfig::default()
    };
    let file =
        File::open(&args.input).map_err(|e| Failure::config(format!("input {}: {e}", args.input.display())))?;
    let loaded = read_records(file, &args.covariates)?;
    if loaded.dropped_total() > 0 {
        let detail: Vec<String> = loaded.dropped.iter().map(|(c, n)| format!("{n} missing/invalid {c}")).collect();
        eprintln!("dropped {} of {} rows ({})", loaded.dropped_total(), loaded.rows_read, detail.join(", "));
    }
    let data = ApciData::from_records(&loaded.records, &spec, &loaded.covariates, family)
        .map_err(|e| apci_failure(e, &spec))?;
    let pool = thread_pool()?;
    let results = pool.install(|| run_procedure(&data, &config)).map_err(|e| apci_failure(e, &spec))?;

    let mut age_points = extract_patterns(&results.model, PatternMode::AgeByPeriod);
    let mut period_points = extract_patterns(&results.model, PatternMode::PeriodByAge);
    let mains = extract_patterns(&results.model, PatternMode::MainsOnly);
    let (mains_age, mains_period): (Vec<_>, Vec<_>) =
        mains.into_iter().partition(|p| p.axis == apci::apci::Axis::Age);
    age_points.extend(mains_age);
    period_points.extend(mains_period);

    create_dir(&args.out)?;
    let json = serde_json::to_vec_pretty(&results).map_err(|e| Failure::numerical(format!("serializing: {e}")))?;
    let mut staged = Staged::new(&args.out);
    staged.add("fit.json", &json)?;
    staged.add("report.txt", render_report(&results).as_bytes())?;
    staged.add("patterns_age.csv", &patterns_csv(&age_points)?)?;
    staged.add("patterns_period.csv", &patterns_csv(&period_points)?)?;
    staged.commit()?;

    let g = &results.global_test;
    println!(
        "global interaction test: F = {:.3} on ({}, {}) df, p = {:.3e}",
        g.statistic,
        g.df1,
        g.df2.unwrap_or(f64::NAN),
        g.p_value
    );
    for c in &results.cohorts {
        let label = c.classification.map_or("NA", |k| k.label());
        println!("cohort {:<8} o = {}  {}", c.label, c.cells, label);
    }
    for w in &results.model.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote fit.json, report.txt, patterns_age.csv, patterns_period.csv to {}", args.out.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut effects = match &args.input {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::config(format!("scenario {}: {e}", path.display())))?;
            TrueEffects::from_json(&text)?
        }
        None => TrueEffects::default_scenario(0),
    };
    if let Some(seed) = args.seed {
        effects.seed = seed;
    }
    if let Some(n) = args.cell_size {
        effects.cell_size = n;
    }
    if let Some(f) = args.family {
        if args.input.is_some() {
            return Err(Failure::config("--family only applies to the built-in scenario"));
        }
        effects.family = f.into();
    }
    effects.validate()?;
    let pool = thread_pool()?;
    let sim = pool.install(|| generate(&effects))?;

    create_dir(&args.out)?;
    let mut csv = Vec::new();
    write_records(&mut csv, &sim.records, &sim.covariates)?;
    let meta = serde_json::json!({
        "seed": effects.seed,
        "rng": "ChaCha8, stream per cell = row-major cell offset",
        "records": sim.records.len(),
        "effects": effects,
    });
    let mut staged = Staged::new(&args.out);
    staged.add("data.csv", &csv)?;
    staged.add(
        "data.meta.json",
        &serde_json::to_vec_pretty(&meta).map_err(|e| Failure::config(e.to_string()))?,
    )?;
    staged.commit()?;
    println!(
        "wrote {} records ({}x{} grid, seed {}) to {}",
        sim.records.len(),
        effects.grid.age_groups(),
        effects.grid.periods(),
        effects.seed,
        args.out.join("data.csv").display()
    );
    Ok(())
}

fn cmd_demo(args: DemoArgs) -> Result<(), Failure> {
    let spec = parse_grid(args.grid.as_deref(), || GridSpec::uniform(5, 5).expect("5x5 grid"))?;
    let demo = accounting_demo(&spec)?;
    print!("{}", demo.render());
    let poly = poly_demo(&PolyDemoSpec::default())?;
    let [b0, b1, b2, b3, b4, b5, b6] = PolyDemoSpec::default().coefficients;
    let r = poly.reexpressed;
    println!();
    println!("polynomial model: {b0} + {b1} a + {b2} a^2 + {b3} p + {b4} p^2 + {b5} c + {b6} c^2, c = p - a");
    println!(
        "without cohort terms: {} + {} a + {} a^2 + {} p + {} p^2 + {} a p",
        r.intercept, r.age, r.age_sq, r.period, r.period_sq, r.age_period
    );
    println!("max difference over {} points {:.3e}", poly.rows.len(), poly.max_abs_diff);
    if let Some(dir) = &args.out {
        create_dir(dir)?;
        let json = serde_json::to_vec_pretty(&serde_json::json!({ "accounting": demo, "polynomial": poly }))
            .map_err(|e| Failure::config(e.to_string()))?;
        let mut staged = Staged::new(dir);
        staged.add("demo.json", &json)?;
        staged.commit()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Demo(a) => cmd_demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
