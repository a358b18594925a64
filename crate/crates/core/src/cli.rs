//! The `mssmf` command line: `synth`, `unmix`, `eval`, `svd` and `render`.
//!
//! Exit codes: 0 success, 1 IO or format failure, 2 usage error,
//! 3 validation failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::io::{self, RunManifest, TraceRow};
use crate::metrics::{aligned_mse, singular_spectrum};
use crate::model::{compose_expanded, ModelDims, PixelMatrix};
use crate::solver::{fit, BetaMethod, FitConfig, StopReason};
use crate::synth::{assemble_ground_truth, builtin_bases, gen_dataset, DEFAULT_BANDS};

pub const THREADS_ENV: &str = "MSSMF_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mssmf", version, about = "Multilayer simplex-structured matrix factorization for hyperspectral unmixing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with endmember variability.
    Synth(SynthArgs),
    /// Fit the multilayer model to a pixel matrix.
    Unmix(UnmixArgs),
    /// Aligned endmember MSE, single or aggregated over a run tree.
    Eval(EvalArgs),
    /// Singular values of a matrix, one per line.
    Svd(SvdArgs),
    /// Render abundance maps as binary PGM images.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Raw64,
    Csv,
}

impl Format {
    fn file(self, dir: &Path, stem: &str) -> PathBuf {
        let ext = match self {
            Format::Raw64 => io::Encoding::Raw64.extension(),
            Format::Csv => io::Encoding::Csv.extension(),
        };
        dir.join(format!("{stem}.{ext}"))
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `builtin` or a matrix file of base spectra (bands × bases).
    #[arg(long, default_value = "builtin")]
    pub bases: String,
    /// Band count of the builtin bases.
    #[arg(long, default_value_t = DEFAULT_BANDS)]
    pub bands: usize,
    #[arg(long, default_value_t = 200)]
    pub variants: usize,
    #[arg(long, default_value_t = 10)]
    pub pick: usize,
    #[arg(long, default_value_t = 0.25)]
    pub gamma: f64,
    #[arg(long, default_value_t = 10)]
    pub knots: usize,
    #[arg(long, default_value_t = 2500)]
    pub pixels: usize,
    /// Target SNR in dB; `inf` gives noiseless data.
    #[arg(long, default_value_t = 20.0)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Raw64)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct UnmixArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Latent sizes K1,...,KP.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 10)]
    pub beta_steps: usize,
    #[arg(long, default_value_t = 1)]
    pub apg_passes: usize,
    /// Search direction of the Dirichlet parameter steps.
    #[arg(long, value_enum, default_value_t = BetaMethod::Gradient)]
    pub beta_method: BetaMethod,
    /// Relative ELBO tolerance; 0 runs exactly `--iters` iterations.
    #[arg(long, default_value_t = 0.0)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Raw64)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated expanded endmembers.
    #[arg(long, requires = "truth", conflicts_with = "runs_dir")]
    pub est: Option<PathBuf>,
    /// Ground-truth endmembers.
    #[arg(long, requires = "est")]
    pub truth: Option<PathBuf>,
    /// SNR to record; read from the truth directory's manifest when omitted.
    #[arg(long)]
    pub snr_db: Option<f64>,
    /// Aggregate every eval manifest found below this directory.
    #[arg(long, required_unless_present = "est")]
    pub runs_dir: Option<PathBuf>,
    /// JSON output.
    #[arg(long)]
    pub out: PathBuf,
    /// Plot-ready CSV (`snr_db,mean_mse,std_mse`).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SvdArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub abundances: PathBuf,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub height: usize,
    /// One group label per abundance row; maps are summed per group.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return 2;
    }
    let echoed: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let outcome = match &cli.command {
        Command::Synth(a) => synth(a, echoed),
        Command::Unmix(a) => unmix(a, echoed),
        Command::Eval(a) => eval(a, echoed),
        Command::Svd(a) => svd(a),
        Command::Render(a) => render(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Some(raw) = std::env::var_os(THREADS_ENV) else {
        return Ok(());
    };
    let threads = raw
        .to_str()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    // a pool configured earlier in the same process stays in effect
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

fn synth(a: &SynthArgs, args: Vec<String>) -> CliResult {
    let bases = if a.bases == "builtin" {
        if a.bands < 2 {
            return Err(Failure::Usage("--bands must be at least 2".into()));
        }
        builtin_bases(a.bands)
    } else {
        io::read_matrix(Path::new(&a.bases))?
    };
    let truth = assemble_ground_truth(&bases, a.variants, a.pick, a.gamma, a.knots, a.seed)?;
    let bundle = gen_dataset(&truth.endmembers, a.pixels, a.snr_db, a.seed)?;

    let mut manifest = RunManifest::new("synth", args);
    manifest.seed = Some(a.seed);
    let files = [
        ("A_star", &bundle.a_star),
        ("Z_star", &bundle.z_star),
        ("Y", bundle.y.data()),
    ];
    for (name, m) in files {
        let path = a.format.file(&a.out, name);
        io::write_matrix(&path, m)?;
        manifest.output(name, &path);
    }
    let labels = a.out.join("labels.csv");
    io::write_labels(&labels, &truth.labels)?;
    manifest.output("labels", &labels);
    manifest.metric("snr_db", bundle.snr_db);
    manifest.metric("sigma2", bundle.sigma2);
    manifest.metric("gamma", a.gamma);
    manifest.write(&a.out.join("manifest.json"))?;
    Ok(())
}

fn unmix(a: &UnmixArgs, args: Vec<String>) -> CliResult {
    let y = PixelMatrix::new(io::read_matrix(&a.input)?)?;
    let dims = ModelDims::new(y.bands(), a.dims.clone(), y.pixels())?;
    let config = FitConfig {
        max_outer_iters: a.iters,
        beta_steps_per_outer: a.beta_steps,
        apg_iters_per_factor: a.apg_passes,
        rel_elbo_tol: a.tol,
        seed: a.seed,
        beta_method: a.beta_method,
        ..FitConfig::default()
    };
    let result = fit(&y, &dims, &config)?;

    let mut manifest = RunManifest::new("unmix", args);
    manifest.seed = Some(a.seed);
    manifest.dims = Some(dims);
    manifest.config = Some(serde_json::to_value(&config).map_err(Error::from)?);
    let mut write = |name: &str, m: &DMatrix<f64>| -> Result<()> {
        let path = a.format.file(&a.out, name);
        io::write_matrix(&path, m)?;
        manifest.output(name, &path);
        Ok(())
    };
    write("A1", result.stack.a1())?;
    for (l, s) in result.stack.layers().iter().enumerate() {
        write(&format!("S_{}", l + 1), s)?;
    }
    write("B", &compose_expanded(&result.stack).into_inner())?;
    write("beta", result.betas.beta())?;
    write("abundances", &result.betas.means().into_inner())?;

    let mut trace = String::new();
    let mut timing = String::new();
    for (i, r) in result.trace.records.iter().enumerate() {
        trace.push_str(&format!("{},{:?},{:?}\n", i + 1, r.elbo, r.sigma2));
        timing.push_str(&format!("{},{:.3}\n", i + 1, r.elapsed_ms));
        manifest.trace.push(TraceRow {
            iteration: i + 1,
            elbo: r.elbo,
            sigma2: r.sigma2,
        });
    }
    let trace_path = a.out.join("trace.csv");
    io::write_text(&trace_path, &trace)?;
    manifest.output("trace", &trace_path);
    let timing_path = a.out.join("timing.csv");
    io::write_text(&timing_path, &timing)?;
    manifest.output("timing", &timing_path);

    manifest.stop_reason = Some(
        match result.trace.stop {
            StopReason::MaxIterations => "max_iterations",
            StopReason::Converged => "converged",
        }
        .to_string(),
    );
    manifest.metric("initial_elbo", result.trace.initial_elbo);
    if let Some(last) = result.trace.records.last() {
        manifest.metric("final_elbo", last.elbo);
        manifest.metric("final_sigma2", last.sigma2);
    }
    manifest.metric("iterations", result.trace.records.len() as f64);
    manifest.write(&a.out.join("manifest.json"))?;
    Ok(())
}

/// One row of the batch aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSummary {
    pub snr_db: f64,
    pub runs: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub tool_version: String,
    pub runs_dir: String,
    pub rows: Vec<SnrSummary>,
}

fn eval(a: &EvalArgs, args: Vec<String>) -> CliResult {
    match (&a.est, &a.truth, &a.runs_dir) {
        (Some(est), Some(truth), None) => eval_single(a, est, truth, args),
        (None, None, Some(dir)) => eval_batch(a, dir),
        _ => Err(Failure::Usage("give either --est and --truth, or --runs-dir".into())),
    }
}

fn truth_snr(truth: &Path) -> Option<f64> {
    let path = truth.parent()?.join("manifest.json");
    let manifest = RunManifest::read(&path).ok()?;
    (manifest.command == "synth")
        .then(|| manifest.metrics.get("snr_db").copied())
        .flatten()
}

fn eval_single(a: &EvalArgs, est: &Path, truth: &Path, args: Vec<String>) -> CliResult {
    let est_m = io::read_matrix(est)?;
    let truth_m = io::read_matrix(truth)?;
    let aligned = aligned_mse(&est_m, &truth_m)?;
    let snr = a.snr_db.or_else(|| truth_snr(truth));

    let mut manifest = RunManifest::new("eval", args);
    manifest.metric("mse", aligned.mse);
    if let Some(snr) = snr {
        manifest.metric("snr_db", snr);
    }
    for (j, e) in aligned.column_errors.iter().enumerate() {
        manifest.metric(&format!("column_error_{j:03}"), *e);
    }
    manifest.output("est", est);
    manifest.output("truth", truth);
    manifest.write(&a.out)?;
    if let Some(csv) = &a.csv {
        let snr_field = snr.map_or_else(|| "nan".to_string(), |s| format!("{s:?}"));
        io::write_text(csv, &format!("snr_db,mean_mse,std_mse\n{snr_field},{:?},0.0\n", aligned.mse))?;
    }
    Ok(())
}

/// Mean and sample standard deviation of MSE per SNR over eval manifests.
pub fn aggregate_runs(dir: &Path) -> Result<Vec<SnrSummary>> {
    let mut samples: Vec<(f64, f64)> = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        let path = entry.path();
        if !entry.file_type().is_file() || path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Ok(manifest) = RunManifest::read(path) else {
            continue;
        };
        if manifest.command != "eval" {
            continue;
        }
        if let (Some(&snr), Some(&mse)) = (manifest.metrics.get("snr_db"), manifest.metrics.get("mse")) {
            samples.push((snr, mse));
        }
    }
    samples.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut rows = Vec::new();
    for group in samples.chunk_by(|x, y| x.0 == y.0) {
        let n = group.len() as f64;
        let mean = group.iter().map(|g| g.1).sum::<f64>() / n;
        let std = if group.len() > 1 {
            (group.iter().map(|g| (g.1 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        rows.push(SnrSummary {
            snr_db: group[0].0,
            runs: group.len(),
            mean_mse: mean,
            std_mse: std,
        });
    }
    Ok(rows)
}

fn eval_batch(a: &EvalArgs, dir: &Path) -> CliResult {
    let rows = aggregate_runs(dir)?;
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no eval manifests with an SNR were found below {}",
            dir.display()
        ))
        .into());
    }
    let report = AggregateReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        runs_dir: dir.display().to_string(),
        rows,
    };
    let mut json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    json.push('\n');
    io::write_text(&a.out, &json)?;
    let csv_path = a.csv.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut csv = String::from("snr_db,mean_mse,std_mse\n");
    for r in &report.rows {
        csv.push_str(&format!("{:?},{:?},{:?}\n", r.snr_db, r.mean_mse, r.std_mse));
    }
    io::write_text(&csv_path, &csv)?;
    Ok(())
}

fn svd(a: &SvdArgs) -> CliResult {
    let m = io::read_matrix(&a.input)?;
    let text: String = singular_spectrum(&m).iter().map(|s| format!("{s:?}\n")).collect();
    io::write_text(&a.out, &text)?;
    Ok(())
}

fn render(a: &RenderArgs) -> CliResult {
    let abundances = io::read_matrix(&a.abundances)?;
    let (k, n) = abundances.shape();
    if a.width.checked_mul(a.height) != Some(n) {
        return Err(Error::Dimension(format!(
            "a {}x{} image needs {} pixels but the abundance matrix has {n}",
            a.width,
            a.height,
            a.width.saturating_mul(a.height)
        ))
        .into());
    }
    let maps: Vec<(String, Vec<f64>)> = match &a.groups {
        None => (0..k)
            .map(|r| (format!("em_{r:03}.pgm"), abundances.row(r).iter().copied().collect()))
            .collect(),
        Some(path) => {
            let labels = io::read_labels(path)?;
            if labels.len() != k {
                return Err(Error::Dimension(format!(
                    "{} group labels for {k} abundance rows",
                    labels.len()
                ))
                .into());
            }
            let mut groups: Vec<usize> = labels.clone();
            groups.sort_unstable();
            groups.dedup();
            groups
                .iter()
                .map(|&g| {
                    let mut sum = vec![0.0; n];
                    for (r, _) in labels.iter().enumerate().filter(|(_, &l)| l == g) {
                        for (s, v) in sum.iter_mut().zip(abundances.row(r).iter()) {
                            *s += v;
                        }
                    }
                    (format!("group_{g:03}.pgm"), sum)
                })
                .collect()
        }
    };
    for (name, values) in maps {
        io::write_pgm(&a.out.join(name), a.width, a.height, &io::to_gray(values))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_flag_is_comma_separated() {
        let cli = Cli::try_parse_from(["mssmf", "unmix", "--input", "y", "--dims", "6,18,30", "--out", "o"]).unwrap();
        let Command::Unmix(a) = cli.command else { panic!("wrong subcommand") };
        assert_eq!(a.dims, vec![6, 18, 30]);
        assert!(Cli::try_parse_from(["mssmf", "unmix", "--input", "y", "--dims", "6,x", "--out", "o"]).is_err());
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["mssmf", "unmix", "--input", "y.f64"]), 2);
        assert_eq!(run(["mssmf", "bogus"]), 2);
        assert_eq!(run(["mssmf", "synth", "--snr-db", "loud", "--out", "x"]), 2);
    }

    #[test]
    fn aggregate_statistics() {
        let dir = tempfile::tempdir().unwrap();
        for (i, (snr, mse)) in [(10.0, 0.3), (10.0, 0.5), (20.0, 0.1)].iter().enumerate() {
            let mut m = RunManifest::new("eval", vec![]);
            m.metric("snr_db", *snr);
            m.metric("mse", *mse);
            m.write(&dir.path().join(format!("run{i}/eval.json"))).unwrap();
        }
        RunManifest::new("unmix", vec![]).write(&dir.path().join("run0/manifest.json")).unwrap();
        let rows = aggregate_runs(dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].runs, 2);
        assert!((rows[0].mean_mse - 0.4).abs() < 1e-15);
        assert!((rows[0].std_mse - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(rows[1].std_mse, 0.0);
    }
}
