//! `iphfit`: fit, evaluate, simulate and approximate piecewise IPH models.
//!
//! Exit codes: 0 success, 2 EM stopped before converging (outputs are still
//! written), 1 error.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use iphfit::approx::{choose_m, min_valid_n, PhApproximation};
use iphfit::io::{fmt_f64, read_density_target, read_sample, write_paths, write_sample};
use iphfit::simulate::{sample_absorptions, sample_paths};
use iphfit::{fit, Error, FitConfig, FitResult, IphModel, ModelDocument, WeightedSample};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "iphfit", version, about = "Piecewise-constant inhomogeneous phase-type distributions")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to absorption times (CSV with `tau` and optional `weight`).
    Fit(FitArgs),
    /// Fit a model to a tabulated density (CSV with `x` and `density`).
    FitDensity(FitDensityArgs),
    /// Tabulate density, survival and hazard of a model.
    Eval(EvalArgs),
    /// Simulate absorption times (and optionally full paths).
    Sample(SampleArgs),
    /// Homogeneous phase-type approximation of a model.
    Approx(ApproxArgs),
}

#[derive(Args)]
struct FitCommon {
    /// JSON fit configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for model.json and report.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Observations CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    common: FitCommon,
}

#[derive(Args)]
struct FitDensityArgs {
    /// Density table CSV.
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    common: FitCommon,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Evaluation grid `x0:x1:step`; a zero start begins at `step`.
    #[arg(long)]
    grid: String,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    /// Number of draws.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV of absorption times (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write full paths as `path_id,time,from,to`.
    #[arg(long)]
    paths: Option<PathBuf>,
}

#[derive(Args)]
struct ApproxArgs {
    #[arg(long)]
    model: PathBuf,
    /// Uniformization rate; at least the largest absolute diagonal entry.
    #[arg(long)]
    n: f64,
    /// Number of Erlang stages (default: n times the 1 - 1e-8 quantile, rounded up).
    #[arg(long)]
    m: Option<usize>,
    /// Density grid `x0:x1:step` (default: 200 steps up to m/n).
    #[arg(long)]
    grid: Option<String>,
    /// Output directory for approx.json and approx_density.csv.
    #[arg(long)]
    out: PathBuf,
}

/// Outcome of a command that may finish with a soft failure.
enum Status {
    Done,
    NotConverged,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("warning: EM stopped at max_iter before reaching the tolerance; results written");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<Status> {
    match command {
        Command::Fit(a) => {
            let data = read_sample(open(&a.data)?).with_context(|| format!("reading {}", a.data.display()))?;
            fit_and_write(data, &a.common, false)
        }
        Command::FitDensity(a) => {
            let cfg = load_config(&a.common.config)?;
            let target =
                read_density_target(open(&a.target)?).with_context(|| format!("reading {}", a.target.display()))?;
            // scale first so that the mesh weights are taken on the fitting axis
            let data = cfg.prepare_target(&target)?.to_sample()?;
            fit_and_write(data, &a.common, true)
        }
        Command::Eval(a) => eval(&a).map(|_| Status::Done),
        Command::Sample(a) => sample(&a).map(|_| Status::Done),
        Command::Approx(a) => approx(&a).map(|_| Status::Done),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_config(path: &Path) -> Result<FitConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    FitConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn load_model(path: &Path) -> Result<IphModel> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    ModelDocument::from_json(&text)
        .and_then(|d| d.to_model())
        .with_context(|| format!("invalid model {}", path.display()))
}

/// `data` is already on the fitting axis when `prescaled` is set.
fn fit_and_write(data: WeightedSample, common: &FitCommon, prescaled: bool) -> Result<Status> {
    let cfg = load_config(&common.config)?;
    let data = if prescaled { data } else { cfg.prepare_sample(&data)? };
    let em = cfg.em_config_with_seed(common.seed)?;
    let result = fit(&data, &em)?;
    write_fit(&result, &cfg, em.seed, &common.out)?;
    Ok(if result.converged { Status::Done } else { Status::NotConverged })
}

fn write_fit(result: &FitResult, cfg: &FitConfig, seed: u64, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut doc = result.document()?;
    doc.meta.insert("scale".into(), cfg.scale.into());
    doc.meta.insert("seed".into(), seed.into());
    fs::write(out.join("model.json"), doc.to_json()? + "\n")?;
    let report = serde_json::to_string_pretty(&result.report())?;
    fs::write(out.join("report.json"), report + "\n")?;
    Ok(())
}

/// Parses `x0:x1:step` into grid points; a zero start begins at `step`.
fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [a, b, c] = parts.as_slice() else {
        bail!("grid must look like x0:x1:step, got {spec:?}");
    };
    let num = |s: &str| -> Result<f64> { s.trim().parse().map_err(|_| anyhow!("grid value {s:?} is not a number")) };
    let (x0, x1, step) = (num(a)?, num(b)?, num(c)?);
    if !(x0 >= 0.0 && x1 > x0 && step > 0.0 && x1.is_finite()) {
        bail!("grid needs 0 <= x0 < x1 and step > 0, got {spec:?}");
    }
    let first = if x0 == 0.0 { 1 } else { 0 };
    let count = ((x1 - x0) / step * (1.0 + 1e-12)).floor() as usize;
    if count > 10_000_000 {
        bail!("grid {spec:?} has more than 10^7 points");
    }
    Ok((first..=count).map(|i| x0 + i as f64 * step).collect())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let xs = parse_grid(&a.grid)?;
    let mut out = output(a.out.as_deref())?;
    writeln!(out, "x,density,survival,hazard")?;
    for x in xs {
        let hazard = match model.hazard(x) {
            Ok(h) => fmt_f64(h),
            Err(Error::Degenerate(_)) => String::new(),
            Err(e) => return Err(e.into()),
        };
        writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(x),
            fmt_f64(model.density(x)?),
            fmt_f64(model.survival(x)?),
            hazard
        )?;
    }
    out.flush()?;
    Ok(())
}

fn sample(a: &SampleArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    if let Some(path) = &a.paths {
        let paths = sample_paths(&model, a.n, a.seed)?;
        write_paths(create(path)?, &paths)?;
        let taus: Vec<f64> = paths.iter().map(|p| p.absorption_time).collect();
        write_sample(output(a.out.as_deref())?, &taus, None)?;
    } else {
        let taus = sample_absorptions(&model, a.n, a.seed)?;
        write_sample(output(a.out.as_deref())?, &taus, None)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ApproxDocument<'a> {
    n: f64,
    m: usize,
    /// Rate shared by every Erlang component.
    erlang_rate: f64,
    /// `coefficients[l]` weights the Erlang(l + 1, n) density.
    coefficients: &'a [f64],
}

fn approx(a: &ApproxArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let n_min = min_valid_n(&model);
    if !(a.n >= n_min) {
        bail!("n = {} is below min_valid_n = {n_min}; choose n >= {n_min}", a.n);
    }
    let m = match a.m {
        Some(m) => m,
        None => choose_m(a.n, model.quantile(1.0 - 1e-8)?),
    };
    let ph = PhApproximation::new(&model, a.n, m)?;
    let horizon = m as f64 / a.n;
    let xs = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => parse_grid(&format!("0:{horizon}:{}", horizon / 200.0))?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let doc = ApproxDocument {
        n: a.n,
        m,
        erlang_rate: a.n,
        coefficients: &ph.coefficients,
    };
    fs::write(a.out.join("approx.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    let mut out = create(&a.out.join("approx_density.csv"))?;
    writeln!(out, "x,density")?;
    for x in xs {
        writeln!(out, "{},{}", fmt_f64(x), fmt_f64(ph.density(x)?))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:1:0.5").unwrap(), vec![0.5, 1.0]);
        assert_eq!(parse_grid("1:2:0.25").unwrap().len(), 5);
        for bad in ["1:0:0.1", "0:1", "0:1:0", "a:1:0.1", "-1:1:0.5"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }
}
