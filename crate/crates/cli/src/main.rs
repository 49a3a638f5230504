use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use ddro::datadriven::CvGrid;
use ddro::experiment::{
    read_csv, run_real_data, run_robustness, run_scale_sweep, run_timing, summarize_sign_tests, write_csv,
    InstanceFilter, RobustnessConfig, RobustnessRow, SkippedCell, SweepConfig,
};
use ddro::instancegen::{default_registry, ingest_sales_csv};
use ddro::lowerlevel::{check_assumptions, solve_lower_level};
use ddro::mechanism::{build_two_point, MechanismParams};
use ddro::model::{validate_problem, AmbiguityInfo, Instance, ScaleIndex};
use ddro::risk::RiskSpec;

#[derive(Parser)]
#[command(name = "ddro", version, about = "Two-point forecast mechanisms for two-stage distributionally robust planning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores); overrides the config file.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Structural checks on an instance file.
    Validate { instance: PathBuf },
    /// Writes the synthetic family as instance files.
    GenInstances {
        /// JSON instance filter.
        #[arg(long)]
        filter: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Solves the operations team's program under one mechanism.
    LowerLevel {
        instance: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, default_value_t = 1.0)]
        s: f64,
        /// `expectation`, `cvar:BETA` or `msd:LAMBDA`.
        #[arg(long, default_value = "expectation")]
        risk: String,
    },
    /// Mechanism versus rule-based benchmark across scales.
    ScaleSweep {
        /// JSON sweep config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Cross-validated mechanism versus SAA under correlation shift.
    Robustness {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Recomputes the sign-test summary from a robustness CSV.
    Signtest {
        csv: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Ingests a sales CSV, splits it, and optionally compares mechanism and SAA.
    IngestSales {
        csv: PathBuf,
        #[arg(long, default_value_t = 60)]
        n_select: usize,
        /// Percentage of days assigned to the test set.
        #[arg(long, default_value_t = 50.0)]
        r_test: f64,
        /// Run the out-of-sample comparison at budgets 0.5 and 2 times cᵀAμ̂.
        #[arg(long)]
        evaluate: bool,
        /// Restrict the cross-validation grid to {0, 0.25, …, 1}².
        #[arg(long)]
        coarse_grid: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Median wall time of the lower-level LP and the rule-based SOCP.
    Timing {
        #[arg(long, value_delimiter = ',', default_values_t = [100usize, 200])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        per_n: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[command(flatten)]
        common: Common,
    },
}

/// How a completed run ended.
enum Status {
    Ok,
    CapabilitySkips,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CapabilitySkips) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn parse_risk(s: &str) -> Result<RiskSpec> {
    let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
    let num = || arg.parse::<f64>().with_context(|| format!("risk `{s}` needs a numeric parameter"));
    Ok(match kind {
        "expectation" => RiskSpec::Expectation,
        "cvar" => RiskSpec::cvar(num()?)?,
        "var" => RiskSpec::var(num()?)?,
        "msd" => RiskSpec::mean_semideviation(num()?, 1.0)?,
        _ => bail!("unknown risk `{s}`"),
    })
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

/// Writes skipped cells and maps them to an exit status.
fn report_skips(dir: &Path, skipped: &[SkippedCell]) -> Result<Status> {
    fs::write(dir.join("skipped.json"), serde_json::to_string_pretty(skipped)?)?;
    let failures = skipped.iter().filter(|s| !s.capability).count();
    let caps = skipped.len() - failures;
    if failures > 0 {
        bail!("{failures} cells failed ({caps} capability skips); see skipped.json");
    }
    if caps > 0 {
        eprintln!("{caps} cells skipped as unsupported; see skipped.json");
        return Ok(Status::CapabilitySkips);
    }
    Ok(Status::Ok)
}

fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Validate { instance } => {
            let inst = Instance::load(&instance).with_context(|| format!("loading {}", instance.display()))?;
            let report = validate_problem(&inst.problem)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.ok() {
                bail!("instance failed validation");
            }
            if let AmbiguityInfo::Moment(m) = &inst.ambiguity {
                let a = check_assumptions(&inst.problem, m)?;
                println!("{}", serde_json::to_string_pretty(&a)?);
            }
            Ok(Status::Ok)
        }
        Command::GenInstances { filter, common } => {
            let filter: InstanceFilter = load_json(filter.as_deref())?;
            let dir = out_dir(&common)?.join("instances");
            fs::create_dir_all(&dir)?;
            let selected = filter.select(&default_registry())?;
            let mut index = Vec::new();
            for g in &selected {
                let name = format!("{}.json", g.id());
                g.to_instance().save(dir.join(&name))?;
                index.push(serde_json::json!({ "id": g.id(), "file": name, "descriptor": g.descriptor }));
            }
            fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
            println!("wrote {} instances to {}", selected.len(), dir.display());
            Ok(Status::Ok)
        }
        Command::LowerLevel { instance, kappa, eta, k, s, risk } => {
            let inst = Instance::load(&instance).with_context(|| format!("loading {}", instance.display()))?;
            let m = inst.ambiguity.moment_bounds();
            let idx = ScaleIndex::new(k, s)?;
            let params = MechanismParams::from_ratio(&m, kappa, eta)?;
            let d2 = build_two_point(&m.mu, &params, idx)?;
            let r = parse_risk(&risk)?;
            match solve_lower_level(&inst.problem, &d2, &r, idx) {
                Ok(sol) => {
                    println!("{}", serde_json::to_string_pretty(&sol)?);
                    Ok(Status::Ok)
                }
                Err(e) if e.is_capability() => {
                    eprintln!("{e}");
                    Ok(Status::CapabilitySkips)
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::ScaleSweep { config, common } => {
            let mut cfg: SweepConfig = load_json(config.as_deref())?;
            cfg.master_seed = common.seed.unwrap_or(cfg.master_seed);
            cfg.jobs = common.jobs.unwrap_or(cfg.jobs);
            let dir = out_dir(&common)?;
            let out = run_scale_sweep(&cfg)?;
            write_csv(dir.join("scale_sweep.csv"), &out.rows)?;
            write_csv(dir.join("wcr_summary.csv"), &out.summary)?;
            println!("{} rows, {} summary cells -> {}", out.rows.len(), out.summary.len(), dir.display());
            report_skips(dir, &out.skipped)
        }
        Command::Robustness { config, common } => {
            let mut cfg: RobustnessConfig = load_json(config.as_deref())?;
            cfg.master_seed = common.seed.unwrap_or(cfg.master_seed);
            cfg.jobs = common.jobs.unwrap_or(cfg.jobs);
            let dir = out_dir(&common)?;
            let out = run_robustness(&cfg)?;
            write_csv(dir.join("robustness.csv"), &out.rows)?;
            write_csv(dir.join("signtest.csv"), &out.summary)?;
            println!("{} rows, {} sign-test cells -> {}", out.rows.len(), out.summary.len(), dir.display());
            report_skips(dir, &out.skipped)
        }
        Command::Signtest { csv, common } => {
            let rows: Vec<RobustnessRow> = read_csv(&csv).with_context(|| format!("reading {}", csv.display()))?;
            let summary = summarize_sign_tests(&rows)?;
            let dir = out_dir(&common)?;
            write_csv(dir.join("signtest.csv"), &summary)?;
            for s in &summary {
                println!(
                    "n_tr={} budget={} shift={:+}: n={} k={} p_plus={:.6e} p_minus={:.6e}",
                    s.n_tr, s.budget_ratio, s.shift, s.n, s.k, s.p_plus, s.p_minus
                );
            }
            Ok(Status::Ok)
        }
        Command::IngestSales { csv, n_select, r_test, evaluate, coarse_grid, common } => {
            let seed = common.seed.unwrap_or(0);
            let split = ingest_sales_csv(&csv, n_select, r_test, seed)?;
            let dir = out_dir(&common)?;
            let inst = Instance {
                problem: split.problem.clone(),
                ambiguity: AmbiguityInfo::Moment(ddro::datadriven::empirical_moments(&split.train)),
                meta: serde_json::json!({
                    "source": csv.display().to_string(),
                    "seed": seed,
                    "entries": split.entries,
                    "products": split.products,
                    "train_dates": split.train_dates,
                    "test_dates": split.test_dates,
                }),
            };
            inst.save(dir.join("sales_instance.json"))?;
            let rows = |d: &ddro::datadriven::Dataset| -> Vec<Vec<f64>> {
                (0..d.n()).map(|i| d.sample(i).iter().copied().collect()).collect()
            };
            write_csv(dir.join("train.csv"), &rows(&split.train))?;
            write_csv(dir.join("test.csv"), &rows(&split.test))?;
            println!(
                "{} entries, {} products, {} train days, {} test days",
                split.entries.len(),
                split.products.len(),
                split.train.n(),
                split.test.n()
            );
            if evaluate {
                let grid = if coarse_grid {
                    let axis = vec![0.0, 0.25, 0.5, 0.75, 1.0];
                    CvGrid { kappas: axis.clone(), etas: axis }
                } else {
                    CvGrid::default()
                };
                let r = RiskSpec::cvar(0.05)?;
                let res = run_real_data(&split, &[0.5, 2.0], &r, 5, &grid, seed)?;
                write_csv(dir.join("real_data.csv"), &res)?;
                for row in &res {
                    println!(
                        "budget {}: J_mech={:.4} J_saa={:.4} improvement={:+.4}",
                        row.budget_ratio, row.j_mech, row.j_saa, row.improvement
                    );
                }
            }
            Ok(Status::Ok)
        }
        Command::Timing { n, per_n, reps, common } => {
            let dir = out_dir(&common)?;
            let rows = run_timing(&n, per_n, reps, (1.0, 0.5))?;
            write_csv(dir.join("timing.csv"), &rows)?;
            for r in &rows {
                println!("N={}: LP {:.2} ms, SOCP {:.2} ms, ratio {:.1}", r.n, r.median_ms_lp, r.median_ms_socp, r.ratio);
            }
            Ok(Status::Ok)
        }
    }
}
