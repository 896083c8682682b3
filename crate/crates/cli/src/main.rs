use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Serialize;

use lbsimex::datagen::replicate_cohort;
use lbsimex::harness::{render_report, with_workers, write_cohort_csv, Tabular};
use lbsimex::simex::zeta_grid;
use lbsimex::{
    calibrate_censoring, load_cohort_csv, run_simulation, sensitivity_analysis, simex_fit, ColumnMap, Error,
    KeyValueConfig, Method, ReportFormat, Result, SimScenario, SimexConfig, TransformationLink,
};

/// Length-biased survival regression with SIMEX measurement-error correction.
#[derive(Parser, Debug)]
#[command(name = "lbsimex", version)]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Monte Carlo study of bias, variance, MSE and coverage.
    Simulate(SimulateArgs),
    /// SIMEX fit of one dataset.
    Fit(FitArgs),
    /// Refits over a grid of assumed error variances.
    Sensitivity(SensitivityArgs),
    /// Draw one synthetic prevalent cohort.
    GenData(GenDataArgs),
}

#[derive(Args, Debug, Default)]
struct SimexArgs {
    /// Simulated remeasurements per ζ.
    #[arg(long = "B")]
    b: Option<usize>,
    #[arg(long)]
    zeta_max: Option<f64>,
    #[arg(long)]
    zeta_step: Option<f64>,
    /// Bootstrap replicates for standard errors.
    #[arg(long)]
    boot: Option<usize>,
    /// Remeasurements per ζ inside each bootstrap resample; defaults to B.
    #[arg(long)]
    boot_b: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// ph or po.
    #[arg(long)]
    model: Option<String>,
    /// Target censoring rate.
    #[arg(long)]
    censoring: Option<f64>,
    /// Measurement-error variance on each coordinate.
    #[arg(long)]
    sigma_eta: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    simex: SimexArgs,
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated subset of naive, simex, true.
    #[arg(long)]
    methods: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv, json or md.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Column roles, e.g. `whas` or `trunc_time=los,obs_time=lenfol,status=fstat,covariates=bmi;bp`.
    #[arg(long)]
    columns: Option<String>,
    /// ph or po.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    simex: SimexArgs,
    /// File holding the error covariance, one row per line.
    #[arg(long, conflicts_with = "sigma_eta")]
    sigma_eta_matrix: Option<PathBuf>,
    /// Error variance on each coordinate.
    #[arg(long)]
    sigma_eta: Option<f64>,
    /// JSON output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write `<prefix>_zeta.csv` and `<prefix>_h.csv`.
    #[arg(long)]
    plot_prefix: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    simex: SimexArgs,
    /// Comma-separated values in [0, 1].
    #[arg(long)]
    sigma_e: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Include the error-free covariates as x1..xp.
    #[arg(long)]
    with_truth: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

const DEFAULT_SEED: u64 = 20_250_101;

/// Flag values with fallback to the config file.
struct Settings {
    file: KeyValueConfig,
}

impl Settings {
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.file.get(key),
        }
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.pick(flag, key)?
            .ok_or_else(|| Error::Config(format!("--{} is required", key.replace('_', "-"))))
    }

    fn flag(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.file.get::<bool>(key)?.unwrap_or(false))
    }

    fn link(&self, flag: Option<String>) -> Result<TransformationLink> {
        self.required(flag, "model")?.parse()
    }

    fn format(&self, flag: Option<String>) -> Result<ReportFormat> {
        self.or(flag, "format", "csv".to_string())?.parse()
    }

    fn scenario(&self, a: ScenarioArgs) -> Result<SimScenario> {
        let mut s = SimScenario::standard(
            self.link(a.model)?,
            self.or(a.censoring, "censoring", 0.25)?,
            self.or(a.sigma_eta, "sigma_eta", 0.5)?,
        );
        s.n = self.or(a.n, "n", s.n)?;
        Ok(s)
    }

    fn simex(&self, a: SimexArgs, error_cov: DMatrix<f64>) -> Result<SimexConfig> {
        let mut c = SimexConfig::new(error_cov);
        c.b = self.or(a.b, "b", c.b)?;
        let max = self.or(a.zeta_max, "zeta_max", 2.0)?;
        let step = self.or(a.zeta_step, "zeta_step", 0.25)?;
        c.zeta_grid = zeta_grid(max, step)?;
        c.bootstrap_reps = self.or(a.boot, "boot", c.bootstrap_reps)?;
        c.bootstrap_b = self.pick(a.boot_b, "boot_b")?;
        c.seed = self.or(a.seed, "seed", DEFAULT_SEED)?;
        Ok(c)
    }

    fn cohort(&self, a: &DataArgs) -> Result<lbsimex::Cohort> {
        let path: PathBuf = self.required(a.data.clone(), "data")?;
        let map = match self.pick(a.columns.clone(), "columns")? {
            Some(spec) => ColumnMap::parse(&spec)?,
            None => ColumnMap::default(),
        };
        load_cohort_csv(&path, &map)
    }
}

fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>().map_err(|_| Error::Csv {
                        line: i + 1,
                        message: format!("non-numeric entry '{s}'"),
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let p = rows.len();
    if p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(Error::InvalidCovariance(format!("{} is not a square matrix", path.display())));
    }
    Ok(DMatrix::from_row_iterator(p, p, rows.into_iter().flatten()))
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn report<T: Tabular + Serialize>(rows: &[T], format: ReportFormat, out: Option<&Path>) -> Result<()> {
    write_output(out, &render_report(rows, format)?)
}

fn simulate(s: &Settings, a: SimulateArgs) -> Result<()> {
    let scenario = s.scenario(a.scenario)?;
    let config = s.simex(a.simex, scenario.error_cov())?;
    let reps = s.or(a.reps, "reps", 200)?;
    let methods = Method::parse_list(&s.or(a.methods, "methods", "naive,simex,true".to_string())?)?;
    let format = s.format(a.format)?;
    let out = s.pick(a.out, "out")?;
    let outcome = run_simulation(&scenario, &methods, reps, &config, config.seed)?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "censoring bound {:.4}, observed censoring {:.3}, regenerated {}",
        outcome.censoring_bound, outcome.mean_observed_censoring, outcome.regenerated
    );
    report(&outcome.rows, format, out.as_deref())
}

#[derive(Serialize)]
struct FitOutput<'a> {
    model: TransformationLink,
    n: usize,
    events: usize,
    b: usize,
    seed: u64,
    beta_naive: &'a [f64],
    beta_simex: &'a [f64],
    se: Option<&'a [f64]>,
    ci_lower: Option<&'a [f64]>,
    ci_upper: Option<&'a [f64]>,
    zeta: &'a [f64],
    beta_path: &'a [Vec<f64>],
    dropped_fits: usize,
    h: Vec<(f64, f64)>,
}

fn fit(s: &Settings, a: FitArgs) -> Result<()> {
    let cohort = s.cohort(&a.data)?;
    let link = s.link(a.data.model.clone())?;
    let p = cohort.dim();
    let cov = match s.pick(a.sigma_eta_matrix, "sigma_eta_matrix")? {
        Some(path) => read_matrix(&path)?,
        None => DMatrix::identity(p, p) * s.required(a.sigma_eta, "sigma_eta")?,
    };
    let config = s.simex(a.simex, cov)?;
    let out = s.pick(a.out, "out")?;
    let fit = simex_fit(&cohort, link, &config)?;
    let interval = fit.interval.as_ref();
    let doc = FitOutput {
        model: link,
        n: fit.n,
        events: fit.events,
        b: fit.b,
        seed: fit.seed,
        beta_naive: &fit.path.naive.beta,
        beta_simex: fit.beta(),
        se: interval.map(|i| i.se.as_slice()),
        ci_lower: interval.map(|i| i.lower.as_slice()),
        ci_upper: interval.map(|i| i.upper.as_slice()),
        zeta: &fit.path.zeta_grid,
        beta_path: &fit.path.mean_beta,
        dropped_fits: fit.path.dropped_fits + fit.transform.dropped_fits,
        h: fit.transform.h.points().collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    text.push('\n');
    if let Some(prefix) = s.pick(a.plot_prefix, "plot_prefix")? {
        let base = prefix.display().to_string();
        let mut zeta = String::from("zeta");
        for j in 1..=p {
            zeta.push_str(&format!(",beta_{j}"));
        }
        zeta.push('\n');
        for (z, b) in fit.path.zeta_grid.iter().zip(&fit.path.mean_beta) {
            let cells: Vec<String> = b.iter().map(f64::to_string).collect();
            zeta.push_str(&format!("{z},{}\n", cells.join(",")));
        }
        zeta.push_str(&format!(
            "-1,{}\n",
            fit.beta().iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        ));
        std::fs::write(format!("{base}_zeta.csv"), zeta)?;
        let mut h = String::from("t,h\n");
        for (t, v) in fit.transform.h.points() {
            h.push_str(&format!("{t},{v}\n"));
        }
        std::fs::write(format!("{base}_h.csv"), h)?;
    }
    write_output(out.as_deref(), &text)
}

fn sensitivity(s: &Settings, a: SensitivityArgs) -> Result<()> {
    let cohort = s.cohort(&a.data)?;
    let link = s.link(a.data.model.clone())?;
    let grid: Vec<f64> = match a.sigma_e {
        Some(list) => KeyValueConfig::parse(&format!("sigma_e = {list}"))?
            .get_list("sigma_e")?
            .unwrap_or_default(),
        None => s.file.get_list("sigma_e")?.unwrap_or_else(|| vec![0.15, 0.5, 0.75]),
    };
    let p = cohort.dim();
    let config = s.simex(a.simex, DMatrix::zeros(p, p))?;
    let format = s.format(a.format)?;
    let out = s.pick(a.out, "out")?;
    let rows = sensitivity_analysis(&cohort, link, &grid, &config)?;
    report(&rows, format, out.as_deref())
}

fn gen_data(s: &Settings, a: GenDataArgs) -> Result<()> {
    let scenario = s.scenario(a.scenario)?;
    let seed = s.or(a.seed, "seed", DEFAULT_SEED)?;
    let with_truth = s.flag(a.with_truth, "with_truth")?;
    let out = s.pick(a.out, "out")?;
    let c = calibrate_censoring(&scenario, scenario.target_censoring, seed)?;
    let cohort = replicate_cohort(&scenario, c, seed, 0)?;
    let mut buf = Vec::new();
    write_cohort_csv(&cohort, &mut buf, with_truth)?;
    write_output(out.as_deref(), std::str::from_utf8(&buf).expect("csv output is utf-8"))
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => KeyValueConfig::load(p)?,
        None => KeyValueConfig::default(),
    };
    let s = Settings { file };
    let workers = s.pick(cli.workers, "workers")?;
    with_workers(workers, move || match cli.command {
        Command::Simulate(a) => simulate(&s, a),
        Command::Fit(a) => fit(&s, a),
        Command::Sensitivity(a) => sensitivity(&s, a),
        Command::GenData(a) => gen_data(&s, a),
    })?
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        4
    } else if e.is_validation() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::NoEvents), 2);
        assert_eq!(exit_code(&Error::NonConvergence("x".into())), 3);
        assert_eq!(exit_code(&Error::BracketFailure { time: 1.0 }), 3);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 4);
    }

    #[test]
    fn config_file_fills_missing_flags() {
        let s = Settings {
            file: KeyValueConfig::parse("reps = 7\nmodel = po\n").unwrap(),
        };
        assert_eq!(s.or(None, "reps", 200).unwrap(), 7);
        assert_eq!(s.or(Some(3), "reps", 200).unwrap(), 3);
        assert_eq!(s.link(None).unwrap(), TransformationLink::Po);
        assert!(s.required::<PathBuf>(None, "data").is_err());
    }
}
