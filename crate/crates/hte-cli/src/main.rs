//! `hte-test`: command line front end for the homogeneous treatment effect
//! tests, the independence pre-tests, and the Monte Carlo harness.
//!
//! Exit codes: 0 success, 1 failed oracle, 2 bad request, 3 bad data,
//! 4 numerical degeneracy. Reports go to stdout, progress and human
//! summaries to stderr, so stdout stays machine readable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use hte_core::{
    chi_squared_independence, ks_two_sample, linear_test, load_columns, load_csv, np_test,
    oracle_checks, run_power_curve, run_size_table, BandwidthPolicy, BootstrapEngine, ColumnRole,
    ColumnSpec, Dataset, Dgp, Error, KernelFamily, KernelSpec, LambdaPolicy, LinearTestConfig,
    NpTestConfig, PValueMode, Result, SimScenario, TestReport,
};

#[derive(Parser)]
#[command(
    name = "hte-test",
    version,
    about = "Bootstrap tests of homogeneous treatment effects in IV models"
)]
struct Cli {
    /// Worker threads (default: all cores; HTE_TEST_THREADS works too).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-stage least squares test on a CSV dataset.
    TestLinear(TestLinearArgs),
    /// Nonparametric IV test (kernel smoothing, Tikhonov regularization).
    TestNp(TestNpArgs),
    /// Independence pre-test between the covariate and an instrument.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo size tables and power curves.
    Simulate(SimulateArgs),
    /// Closed-form oracle checks on the analytically solvable designs.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Outcome column.
    #[arg(long)]
    y: String,
    /// Treatment columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    z: Vec<String>,
    /// Instrument columns, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    w: Vec<String>,
    /// Covariate column.
    #[arg(long)]
    x: String,
    /// 1-based position of the tested coordinate among the --w columns.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Prepend a column of ones to the treatment block.
    #[arg(long)]
    z_intercept: bool,
    /// Prepend a column of ones to the instrument block.
    #[arg(long)]
    w_intercept: bool,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        let mut spec = vec![
            ColumnSpec::new(ColumnRole::Outcome, &self.y),
            ColumnSpec::new(ColumnRole::Covariate, &self.x),
        ];
        for (i, name) in self.z.iter().enumerate() {
            let s = ColumnSpec::new(ColumnRole::Treatment, name);
            spec.push(if i == 0 && self.z_intercept {
                s.with_intercept()
            } else {
                s
            });
        }
        for (i, name) in self.w.iter().enumerate() {
            let s = ColumnSpec::new(ColumnRole::Instrument, name);
            spec.push(if i == 0 && self.w_intercept {
                s.with_intercept()
            } else {
                s
            });
        }
        load_csv(&self.data, &spec, self.k)
    }
}

#[derive(Args)]
struct TestLinearArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Bootstrap resample count.
    #[arg(long = "B", default_value_t = 1000)]
    b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report the equal-tailed p-value and decide with it.
    #[arg(long)]
    equal_tailed: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TestNpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long = "B", default_value_t = 1000)]
    b: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    equal_tailed: bool,
    /// Fixed regularization parameter (skips cross-validation).
    #[arg(long)]
    lambda: Option<f64>,
    /// Multiplier on the cross-validated regularization.
    #[arg(long, default_value_t = 1.0, conflicts_with = "lambda")]
    lambda_scale: f64,
    /// Fixed treatment-side bandwidth (needs --h-w as well).
    #[arg(long, requires = "h_w")]
    h_z: Option<f64>,
    /// Fixed instrument-side bandwidth (needs --h-z as well).
    #[arg(long, requires = "h_z")]
    h_w: Option<f64>,
    /// Multiplier on the variance-rule bandwidths.
    #[arg(
        long,
        default_value_t = 1.0,
        conflicts_with_all = ["h_z", "h_w"]
    )]
    bandwidth_scale: f64,
    /// Smoothing kernel: gaussian or epanechnikov.
    #[arg(long, default_value = "gaussian")]
    kernel: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// CSV file with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Covariate column.
    #[arg(long)]
    x: String,
    /// Instrument column to test against.
    #[arg(long)]
    w: String,
    /// chi-squared (discrete pairs) or ks (binary covariate, continuous
    /// instrument).
    #[arg(long, default_value = "chi-squared")]
    method: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Design to simulate from.
    #[arg(long)]
    dgp: Dgp,
    /// Deviation from the homogeneous null (0 = null holds).
    #[arg(long, default_value_t = 0.0, visible_aliases = ["rho", "gamma", "alpha"])]
    deviation: f64,
    /// Sample sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    /// Monte Carlo iterations per cell.
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Full-bootstrap resample count.
    #[arg(long = "B", default_value_t = 1000, conflicts_with = "warp_speed")]
    b: usize,
    /// One bootstrap draw per iteration, pooled p-values (much faster).
    #[arg(long, visible_alias = "fast")]
    warp_speed: bool,
    /// Bandwidth multipliers to cross (size tables only).
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    c_h: Vec<f64>,
    /// Regularization multipliers to cross (size tables only).
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    c_lambda: Vec<f64>,
    /// Nominal levels.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.10])]
    levels: Vec<f64>,
    /// Deviation grid; switches from a size table to a power curve.
    #[arg(long, value_delimiter = ',', conflicts_with = "deviation")]
    power_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the CSV artifact.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct OracleArgs {
    /// One of the analytically solvable designs.
    #[arg(long)]
    dgp: Dgp,
    /// Design parameter (alpha or rho depending on the design).
    #[arg(long, default_value_t = 0.5, visible_aliases = ["rho", "alpha"])]
    deviation: f64,
    #[arg(long, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Schema(_) | Error::Parse { .. } | Error::Invalid(_) | Error::Io(_) => 3,
        Error::RankDeficient { .. }
        | Error::Degenerate(_)
        | Error::Numerical { .. }
        | Error::CvFailure(_)
        | Error::Identification(_) => 4,
        Error::OracleFailure(_) => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::TestLinear(args) => {
            let data = args.data.load()?;
            let report = linear_test(
                &data,
                &LinearTestConfig {
                    bootstrap_count: args.b,
                    seed: args.seed,
                    p_value_mode: p_mode(args.equal_tailed),
                },
            )?;
            emit_test_report(&report, args.equal_tailed, args.out.as_deref())
        }
        Command::TestNp(args) => {
            let data = args.data.load()?;
            let report = np_test(
                &data,
                &NpTestConfig {
                    bootstrap_count: args.b,
                    seed: args.seed,
                    lambda: match args.lambda {
                        Some(value) => LambdaPolicy::Fixed { value },
                        None => LambdaPolicy::Cv {
                            scale: args.lambda_scale,
                        },
                    },
                    bandwidths: match (args.h_z, args.h_w) {
                        (Some(h_z), Some(h_w)) => BandwidthPolicy::Fixed { h_z, h_w },
                        _ => BandwidthPolicy::Silverman {
                            scale: args.bandwidth_scale,
                        },
                    },
                    kernel: parse_kernel(&args.kernel)?,
                    p_value_mode: p_mode(args.equal_tailed),
                },
            )?;
            emit_test_report(&report, args.equal_tailed, args.out.as_deref())
        }
        Command::Diagnose(args) => {
            let cols = load_columns(&args.data, &[args.x.clone(), args.w.clone()])?;
            let report = match args.method.as_str() {
                "chi-squared" => chi_squared_independence(&cols[0], &cols[1])?,
                "ks" => ks_two_sample(&cols[0], &cols[1])?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown method '{other}', expected chi-squared or ks"
                    )))
                }
            };
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_out(args.out.as_deref(), &json)?;
            if let Some(note) = &report.note {
                eprintln!("note: {note}");
            }
            eprintln!(
                "{}: statistic = {:.6}, p-value = {:.4}",
                report.method, report.statistic, report.p_value
            );
            Ok(())
        }
        Command::Simulate(args) => simulate(args),
        Command::Oracle(args) => {
            let report = oracle_checks(args.dgp, args.deviation, args.n, args.seed)?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            println!("{json}");
            for c in &report.checks {
                eprintln!(
                    "{} {}: estimate {:.6}, target {:.6}, tolerance {:.2e}",
                    if c.passed { "pass" } else { "FAIL" },
                    c.name,
                    c.estimate,
                    c.target,
                    c.tolerance
                );
            }
            report.ensure_passed()
        }
    }
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var("HTE_TEST_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("HTE_TEST_THREADS must be a thread count, got '{v}'"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

fn p_mode(equal_tailed: bool) -> PValueMode {
    if equal_tailed {
        PValueMode::EqualTailed
    } else {
        PValueMode::Symmetric
    }
}

fn parse_kernel(name: &str) -> Result<KernelSpec> {
    let family = match name {
        "gaussian" => KernelFamily::Gaussian,
        "epanechnikov" => KernelFamily::Epanechnikov,
        other => {
            return Err(Error::Config(format!(
                "unknown kernel '{other}', expected gaussian or epanechnikov"
            )))
        }
    };
    KernelSpec::new(family, 2)
}

fn write_out(out: Option<&Path>, json: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, format!("{json}\n"))?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

fn emit_test_report(report: &TestReport, equal_tailed: bool, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(&report.to_json()).expect("report serializes");
    write_out(out, &json)?;
    let (p, label) = if equal_tailed {
        (
            report.p_equal_tailed.unwrap_or(report.p_symmetric),
            "equal-tailed",
        )
    } else {
        (report.p_symmetric, "symmetric")
    };
    let verdict = |level: f64| if p < level { "reject" } else { "keep" };
    eprintln!(
        "statistic = {:.6}, {label} p-value = {:.4}; homogeneity at 5%: {}, at 10%: {}",
        report.statistic,
        p,
        verdict(0.05),
        verdict(0.10)
    );
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let engine = if args.warp_speed {
        BootstrapEngine::WarpSpeed
    } else {
        BootstrapEngine::Full { b: args.b }
    };
    let multipliers_touched = args.c_h != [1.0] || args.c_lambda != [1.0];
    let (results, kind) = match &args.power_grid {
        Some(grid) => {
            if multipliers_touched {
                return Err(Error::Config(
                    "power curves run at the benchmark multipliers; drop --c-h/--c-lambda".into(),
                ));
            }
            let results = run_power_curve(
                args.dgp,
                grid,
                &args.n,
                args.reps,
                engine,
                &args.levels,
                args.seed,
            )?;
            (results, "power")
        }
        None => {
            let mut scenarios = Vec::new();
            for &n in &args.n {
                for &c_h in &args.c_h {
                    for &c_lambda in &args.c_lambda {
                        scenarios.push(SimScenario {
                            dgp: args.dgp,
                            deviation: args.deviation,
                            n,
                            mc_reps: args.reps,
                            engine,
                            c_h,
                            c_lambda,
                            levels: args.levels.clone(),
                            seed: args.seed,
                        });
                    }
                }
            }
            (run_size_table(&scenarios)?, "table")
        }
    };

    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock after 1970")
        .as_secs();
    let path = args
        .out_dir
        .join(format!("{}_{}_{}.csv", args.dgp, kind, stamp));
    let mut buffer = Vec::new();
    if kind == "power" {
        hte_core::sim::write_power_csv(&results, &mut buffer)?;
    } else {
        hte_core::sim::write_size_csv(&results, &mut buffer)?;
    }
    std::fs::write(&path, &buffer)?;

    println!(
        "{}",
        serde_json::to_string_pretty(&results).expect("results serialize")
    );
    let mut human = String::new();
    for r in &results {
        let _ = write!(
            human,
            "n={} deviation={}:",
            r.scenario.n, r.scenario.deviation
        );
        for rate in &r.rates {
            let _ = write!(
                human,
                " {:.0}% -> {:.4} (se {:.4})",
                100.0 * rate.level,
                rate.rejection_rate,
                rate.mc_se
            );
        }
        let _ = writeln!(human, "  [{:.1}s]", r.runtime_secs);
    }
    eprint!("{human}");
    eprintln!("wrote {}", path.display());
    Ok(())
}
