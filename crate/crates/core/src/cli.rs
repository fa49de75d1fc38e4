//! Command-line driver behind the `flowgp` binary.
//!
//! Exit codes: 0 on success, 2 for usage or validation errors, 3 for
//! failures while running. Results go to stdout, diagnostics to stderr.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::bench::{bench_iteration, bench_likelihood, BenchReport};
use crate::data::{
    format_f64, load_table, preprocess, simulate, write_table, Dataset, GammaConvention, Manifest, SimConfig,
};
use crate::error::Error;
use crate::model::{
    fit_mf, fit_ml, fit_nf, inclusion_summary, load_checkpoint, lpds, sample_posterior, save_checkpoint, FitResult,
    FitTrace, Method,
};
use crate::prior::{prior_model_size_study, sum_theta_draws, tau_prior_median, TripleGammaConfig};
use crate::vi::VIConfig;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
/// Environment variable holding the default grid worker count.
pub const WORKERS_ENV: &str = "FLOWGP_WORKERS";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Parser)]
#[command(
    name = "flowgp",
    version,
    about = "GP regression with shrinkage priors and normalizing-flow VI"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic train/test pair from the GP generator.
    Simulate(SimulateArgs),
    /// Fit a model to a training table and write a checkpoint.
    Fit(FitArgs),
    /// Score a checkpoint on a test table.
    Eval(EvalArgs),
    /// Run a grid of simulated configurations and methods.
    Grid(GridArgs),
    /// Draw prior samples of Σθ and of the induced model size.
    PriorStudy(PriorStudyArgs),
    /// Check that a run directory still matches its manifest.
    Verify(VerifyArgs),
    /// Time the likelihood and the VI iteration.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Nf,
    Mf,
    Ml,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Nf => Method::Nf,
            MethodArg::Mf => Method::Mf,
            MethodArg::Ml => Method::Ml,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConventionArg {
    Scale,
    Rate,
}

impl From<ConventionArg> for GammaConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Scale => GammaConvention::Scale,
            ConventionArg::Rate => GammaConvention::Rate,
        }
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long)]
    pub n_train: usize,
    #[arg(long, default_value_t = 300)]
    pub n_test: usize,
    #[arg(long)]
    pub sparsity: f64,
    #[arg(long)]
    pub rho: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2.0)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_var: f64,
    #[arg(long, value_enum, default_value_t = ConventionArg::Scale)]
    pub gamma_convention: ConventionArg,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub a: f64,
    #[arg(long, default_value_t = 0.1, allow_negative_numbers = true)]
    pub c: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub sigma2_rate: f64,
    #[arg(long, default_value_t = 10)]
    pub layers: usize,
    #[arg(long, default_value_t = 10)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 3000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5e-3, allow_negative_numbers = true)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    /// Posterior draws used for the inclusion summary.
    #[arg(long, default_value_t = 1000)]
    pub summary_draws: usize,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    /// Drop constant columns, standardize non-binary ones and center y.
    #[arg(long)]
    pub preprocess: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = crate::model::DEFAULT_PREDICTIVE_DRAWS)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// `key=value` file; list values are comma separated.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub replications: usize,
    /// Defaults to $FLOWGP_WORKERS, then 1.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PriorStudyArgs {
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub a: f64,
    #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
    pub c: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 50, 200])]
    pub d: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    /// Local-scale draws per estimate of π(τ).
    #[arg(long, default_value_t = 2000)]
    pub inner_draws: usize,
    /// Draw τ from its prior; `false` holds it fixed.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub hierarchical: bool,
    /// Fixed τ for the non-hierarchical prior; defaults to the prior median.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [200usize, 400, 800, 1600])]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 25)]
    pub d: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 500)]
    pub iteration_n: usize,
    #[arg(long, default_value_t = 10)]
    pub iteration_d: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 8])]
    pub s_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 10])]
    pub k_list: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub skip_iteration: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(Error::Io(e))
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let line = args.iter().map(|a| a.to_string_lossy()).collect::<Vec<_>>().join(" ");
    match dispatch(cli.command, &line) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, line: &str) -> CliResult<()> {
    match cmd {
        Command::Simulate(a) => cmd_simulate(&a, line),
        Command::Fit(a) => cmd_fit(&a, line),
        Command::Eval(a) => cmd_eval(&a, line),
        Command::Grid(a) => cmd_grid(&a, line),
        Command::PriorStudy(a) => cmd_prior_study(&a, line),
        Command::Verify(a) => cmd_verify(&a),
        Command::Bench(a) => cmd_bench(&a, line),
    }
}

fn unix_seconds() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Manifest of one command run: command line, resolved configuration,
/// version, timestamps and a digest of every output file.
pub struct RunManifest {
    manifest: Manifest,
    outputs: Vec<String>,
}

impl RunManifest {
    pub fn start(command: &str, line: &str) -> Self {
        let mut manifest = Manifest::new();
        manifest.set("command", command);
        manifest.set("command_line", line);
        manifest.set("version", env!("CARGO_PKG_VERSION"));
        manifest.set("started_at", unix_seconds());
        RunManifest {
            manifest,
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl ToString) {
        self.manifest.set(format!("config.{key}"), value);
    }

    /// Registers a file (relative to the output directory).
    pub fn output(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn finish(mut self, dir: &Path) -> CliResult<()> {
        self.manifest.set("finished_at", unix_seconds());
        self.manifest.set("outputs", self.outputs.join(","));
        for name in &self.outputs {
            let bytes = fs::read(dir.join(name))?;
            self.manifest.set(format!("bytes.{name}"), bytes.len());
            self.manifest.set(format!("sha256.{name}"), sha256_hex(&bytes));
        }
        self.manifest.write(dir.join(MANIFEST_FILE))?;
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn delimiter_byte(c: char) -> CliResult<u8> {
    if c.is_ascii() {
        Ok(c as u8)
    } else {
        Err(usage(format!("delimiter must be a single ASCII character, got {c:?}")))
    }
}

fn sim_config(a: &SimulateArgs) -> CliResult<SimConfig> {
    let mut cfg = SimConfig::new(a.d, a.n_train, a.sparsity, a.rho, a.seed);
    cfg.n_test = a.n_test;
    cfg.tau_true = a.tau;
    cfg.noise_var = a.noise_var;
    cfg.convention = a.gamma_convention.into();
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn write_truth(path: &Path, theta: &[f64], tau: f64, noise_var: f64) -> CliResult<()> {
    let mut s = String::from("parameter,value\n");
    for (j, t) in theta.iter().enumerate() {
        let _ = writeln!(s, "theta_{},{}", j + 1, format_f64(*t));
    }
    let _ = writeln!(s, "tau,{}", format_f64(tau));
    let _ = writeln!(s, "noise_var,{}", format_f64(noise_var));
    fs::write(path, s)?;
    Ok(())
}

fn record_sim_config(run: &mut RunManifest, cfg: &SimConfig) {
    run.config("d", cfg.d);
    run.config("n_train", cfg.n_train);
    run.config("n_test", cfg.n_test);
    run.config("sparsity", cfg.sparsity);
    run.config("rho", cfg.rho_corr);
    run.config("tau", cfg.tau_true);
    run.config("noise_var", cfg.noise_var);
    run.config("theta_shape", cfg.theta_shape);
    run.config("theta_scale", cfg.theta_scale);
    run.config("gamma_convention", cfg.convention.name());
    run.config("seed", cfg.seed);
}

pub fn cmd_simulate(a: &SimulateArgs, line: &str) -> CliResult<()> {
    let cfg = sim_config(a)?;
    ensure_dir(&a.out_dir)?;
    let mut run = RunManifest::start("simulate", line);
    record_sim_config(&mut run, &cfg);
    let sim = simulate(&cfg)?;
    write_table(&sim.train, a.out_dir.join("train.csv"), b',')?;
    write_table(&sim.test, a.out_dir.join("test.csv"), b',')?;
    write_truth(
        &a.out_dir.join("truth.csv"),
        &sim.truth.theta,
        sim.truth.tau,
        sim.truth.noise_var,
    )?;
    for f in ["train.csv", "test.csv", "truth.csv"] {
        run.output(f);
    }
    run.finish(&a.out_dir)?;
    println!("wrote {}", a.out_dir.display());
    Ok(())
}

fn vi_config(a: &FitArgs) -> VIConfig {
    VIConfig {
        n_layers: a.layers,
        n_mc_samples: a.mc_samples,
        n_iterations: a.iterations,
        learning_rate: a.learning_rate,
        seed: a.seed,
        ..VIConfig::default()
    }
}

fn trace_tables(fit: &FitResult) -> (String, Option<String>) {
    match &fit.trace {
        FitTrace::Elbo(t) => {
            let mut s = String::from("iteration,elbo,smoothed,rejected\n");
            let mut timing = String::from("iteration,seconds\n");
            for i in 0..t.len() {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    i + 1,
                    format_f64(t.elbo[i]),
                    format_f64(t.smoothed[i]),
                    t.rejected[i]
                );
                if let Some(sec) = t.seconds.get(i) {
                    let _ = writeln!(timing, "{},{}", i + 1, format_f64(*sec));
                }
            }
            (s, Some(timing))
        }
        FitTrace::Restarts(rs) => {
            let mut s = String::from("restart,log_lik,iterations,start\n");
            for (i, r) in rs.iter().enumerate() {
                let start = r.start.iter().map(|v| format_f64(*v)).collect::<Vec<_>>().join(";");
                let ll = r.log_lik.map_or("failed".to_string(), format_f64);
                let _ = writeln!(s, "{},{},{},{}", i + 1, ll, r.iterations, start);
            }
            (s, None)
        }
    }
}

/// Runs one fit from validated settings.
pub fn fit_method(
    method: Method,
    data: &Dataset,
    prior: &TripleGammaConfig,
    vi: &VIConfig,
    restarts: usize,
    seed: u64,
) -> crate::Result<FitResult> {
    match method {
        Method::Nf => fit_nf(data, prior, vi),
        Method::Mf => fit_mf(data, prior, vi),
        Method::Ml => fit_ml(data, restarts, seed),
    }
}

pub fn cmd_fit(a: &FitArgs, line: &str) -> CliResult<()> {
    let prior = TripleGammaConfig::new(a.a, a.c, a.sigma2_rate).map_err(usage)?;
    let vi = vi_config(a);
    vi.validate().map_err(usage)?;
    if a.restarts == 0 {
        return Err(usage("--restarts must be at least 1"));
    }
    if a.summary_draws == 0 {
        return Err(usage("--summary-draws must be at least 1"));
    }
    let delim = delimiter_byte(a.delimiter)?;
    ensure_dir(&a.out_dir)?;
    let method: Method = a.method.into();
    let mut run = RunManifest::start("fit", line);
    run.config("method", method.name());
    run.config("train", a.train.display());
    run.config("a", a.a);
    run.config("c", a.c);
    run.config("sigma2_rate", a.sigma2_rate);
    run.config("layers", a.layers);
    run.config("mc_samples", a.mc_samples);
    run.config("iterations", a.iterations);
    run.config("learning_rate", a.learning_rate);
    run.config("restarts", a.restarts);
    run.config("preprocess", a.preprocess);
    run.config("seed", a.seed);

    let raw = load_table(&a.train, &a.response, delim)?;
    let data = if a.preprocess { preprocess(&raw)? } else { raw };
    let fit = fit_method(method, &data, &prior, &vi, a.restarts, a.seed)?;
    fs::write(a.out_dir.join("checkpoint.bin"), save_checkpoint(&fit))?;
    run.output("checkpoint.bin");
    let (trace, timing) = trace_tables(&fit);
    fs::write(a.out_dir.join("trace.csv"), trace)?;
    run.output("trace.csv");
    if let Some(t) = timing {
        fs::write(a.out_dir.join("timing.csv"), t)?;
    }
    if fit.stack().is_some() {
        let draws = sample_posterior(&fit, a.summary_draws, a.seed)?;
        let rows = inclusion_summary(&draws, &prior)?;
        let mut s = String::from("rank,index,name,median,lower_05,upper_95,below_prior_median\n");
        for (r, row) in rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r + 1,
                row.index + 1,
                fit.train.feature_names[row.index],
                format_f64(row.median),
                format_f64(row.lower),
                format_f64(row.upper),
                format_f64(row.below_prior_median)
            );
        }
        fs::write(a.out_dir.join("inclusion.csv"), s)?;
        run.output("inclusion.csv");
    }
    run.finish(&a.out_dir)?;
    match fit.elbo_trace().and_then(|t| t.smoothed.last()) {
        Some(e) => println!("final smoothed elbo {}", format_f64(*e)),
        None => println!(
            "best log marginal likelihood {}",
            format_f64(crate::kernel::log_marginal_likelihood(
                &fit.train.y,
                &fit.train.x,
                fit.point().expect("ml")
            )?)
        ),
    }
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs, line: &str) -> CliResult<()> {
    if a.draws == 0 {
        return Err(usage("--draws must be at least 1"));
    }
    let delim = delimiter_byte(a.delimiter)?;
    ensure_dir(&a.out_dir)?;
    let mut run = RunManifest::start("eval", line);
    run.config("checkpoint", a.checkpoint.display());
    run.config("test", a.test.display());
    run.config("draws", a.draws);
    run.config("seed", a.seed);
    let fit = load_checkpoint(&fs::read(&a.checkpoint)?)?;
    let test = load_table(&a.test, &a.response, delim)?;
    let report = lpds(&fit, &test, a.draws, a.seed)?;
    let mut s = String::from("point,log_density\n");
    for (i, v) in report.per_point.iter().enumerate() {
        let _ = writeln!(s, "{},{}", i + 1, format_f64(*v));
    }
    fs::write(a.out_dir.join("lpds_points.csv"), s)?;
    fs::write(
        a.out_dir.join("lpds.csv"),
        format!(
            "method,lpds,n_test,draws_used\n{},{},{},{}\n",
            fit.method.name(),
            format_f64(report.mean),
            report.per_point.len(),
            report.draws_used
        ),
    )?;
    run.output("lpds_points.csv");
    run.output("lpds.csv");
    run.finish(&a.out_dir)?;
    println!("{}", format_f64(report.mean));
    Ok(())
}

/// Grid configuration read from a `key=value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub d: Vec<usize>,
    pub n_train: Vec<usize>,
    pub sparsity: Vec<f64>,
    pub rho: Vec<f64>,
    pub methods: Vec<Method>,
    pub n_test: usize,
    pub convention: GammaConvention,
    pub prior: TripleGammaConfig,
    pub vi: VIConfig,
    pub restarts: usize,
    pub draws: usize,
    pub seed: u64,
}

fn parse_list<T: std::str::FromStr>(m: &Manifest, key: &str, default: &str) -> CliResult<Vec<T>> {
    let raw = m.get(key).unwrap_or(default);
    let v = raw
        .split(',')
        .map(|t| t.trim().parse::<T>())
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|_| usage(format!("grid spec {key}={raw:?} is malformed")))?;
    if v.is_empty() {
        return Err(usage(format!("grid spec {key} is empty")));
    }
    Ok(v)
}

fn parse_one<T: std::str::FromStr>(m: &Manifest, key: &str, default: T) -> CliResult<T> {
    match m.get(key) {
        Some(raw) => raw
            .trim()
            .parse()
            .map_err(|_| usage(format!("grid spec {key}={raw:?} is malformed"))),
        None => Ok(default),
    }
}

impl GridSpec {
    pub fn from_text(text: &str) -> CliResult<Self> {
        let m = Manifest::from_text(text).map_err(usage)?;
        let known = [
            "d",
            "n_train",
            "sparsity",
            "rho",
            "methods",
            "n_test",
            "gamma_convention",
            "a",
            "c",
            "sigma2_rate",
            "layers",
            "mc_samples",
            "iterations",
            "learning_rate",
            "restarts",
            "draws",
            "seed",
        ];
        if let Some((k, _)) = m.entries().iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(usage(format!("unknown grid spec key {k:?}")));
        }
        let methods = m
            .get("methods")
            .unwrap_or("nf,ml")
            .split(',')
            .map(|s| Method::from_name(s.trim()).ok_or_else(|| usage(format!("unknown method {s:?}"))))
            .collect::<CliResult<Vec<_>>>()?;
        let conv = m.get("gamma_convention").unwrap_or("scale");
        let defaults = VIConfig::default();
        let spec = GridSpec {
            d: parse_list(&m, "d", "10")?,
            n_train: parse_list(&m, "n_train", "100")?,
            sparsity: parse_list(&m, "sparsity", "0.5")?,
            rho: parse_list(&m, "rho", "0.5")?,
            methods,
            n_test: parse_one(&m, "n_test", 300)?,
            convention: GammaConvention::from_name(conv)
                .ok_or_else(|| usage(format!("unknown gamma convention {conv:?}")))?,
            prior: TripleGammaConfig::new(
                parse_one(&m, "a", 0.1)?,
                parse_one(&m, "c", 0.1)?,
                parse_one(&m, "sigma2_rate", 10.0)?,
            )
            .map_err(usage)?,
            vi: VIConfig {
                n_layers: parse_one(&m, "layers", defaults.n_layers)?,
                n_mc_samples: parse_one(&m, "mc_samples", defaults.n_mc_samples)?,
                n_iterations: parse_one(&m, "iterations", defaults.n_iterations)?,
                learning_rate: parse_one(&m, "learning_rate", defaults.learning_rate)?,
                ..defaults
            },
            restarts: parse_one(&m, "restarts", crate::model::DEFAULT_RESTARTS)?,
            draws: parse_one(&m, "draws", crate::model::DEFAULT_PREDICTIVE_DRAWS)?,
            seed: parse_one(&m, "seed", 0)?,
        };
        spec.vi.validate().map_err(usage)?;
        if spec.restarts == 0 || spec.draws == 0 {
            return Err(usage("restarts and draws must be at least 1"));
        }
        Ok(spec)
    }
}

/// One cell of the grid: a simulated configuration, a method and a replication.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub d: usize,
    pub n_train: usize,
    pub sparsity: f64,
    pub rho: f64,
    pub method: Method,
    pub rep: usize,
}

impl GridRow {
    pub fn key(&self) -> String {
        format!(
            "d{}_n{}_s{}_r{}_{}_rep{}",
            self.d,
            self.n_train,
            self.sparsity,
            self.rho,
            self.method.name(),
            self.rep
        )
    }

    /// Data seed shared by every method of a configuration and replication.
    pub fn data_seed(&self, base: u64) -> u64 {
        let tag = format!(
            "{base}:{}:{}:{}:{}:{}",
            self.d, self.n_train, self.sparsity, self.rho, self.rep
        );
        let h = Sha256::digest(tag.as_bytes());
        u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
    }
}

pub const GRID_HEADER: &str = "key,d,n_train,sparsity,rho,method,rep,seed,status,lpds,seconds,message";

pub fn grid_rows(spec: &GridSpec, replications: usize) -> Vec<GridRow> {
    let mut rows = Vec::new();
    for &d in &spec.d {
        for &n_train in &spec.n_train {
            for &sparsity in &spec.sparsity {
                for &rho in &spec.rho {
                    for rep in 0..replications {
                        for &method in &spec.methods {
                            rows.push(GridRow {
                                d,
                                n_train,
                                sparsity,
                                rho,
                                method,
                                rep,
                            });
                        }
                    }
                }
            }
        }
    }
    rows
}

/// Fits and scores one grid cell; failures become a row with status `error`.
pub fn run_grid_row(spec: &GridSpec, row: &GridRow) -> String {
    let seed = row.data_seed(spec.seed);
    let start = Instant::now();
    let outcome = (|| -> crate::Result<f64> {
        let mut cfg = SimConfig::new(row.d, row.n_train, row.sparsity, row.rho, seed);
        cfg.n_test = spec.n_test;
        cfg.convention = spec.convention;
        let sim = simulate(&cfg)?;
        let vi = VIConfig {
            seed,
            ..spec.vi.clone()
        };
        let fit = fit_method(row.method, &sim.train, &spec.prior, &vi, spec.restarts, seed)?;
        Ok(lpds(&fit, &sim.test, spec.draws, seed)?.mean)
    })();
    let secs = format_f64(start.elapsed().as_secs_f64());
    let head = format!(
        "{},{},{},{},{},{},{},{}",
        row.key(),
        row.d,
        row.n_train,
        row.sparsity,
        row.rho,
        row.method.name(),
        row.rep,
        seed
    );
    match outcome {
        Ok(v) => format!("{head},ok,{},{secs},", format_f64(v)),
        Err(e) => format!("{head},error,,{secs},{}", e.to_string().replace([',', '\n'], ";")),
    }
}

fn grid_workers(arg: Option<usize>) -> CliResult<usize> {
    let w = match arg {
        Some(w) => w,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v
                .parse()
                .map_err(|_| usage(format!("{WORKERS_ENV}={v:?} is not a count")))?,
            Err(_) => 1,
        },
    };
    if w == 0 {
        return Err(usage("workers must be at least 1"));
    }
    Ok(w)
}

pub fn cmd_grid(a: &GridArgs, line: &str) -> CliResult<()> {
    let text = fs::read_to_string(&a.spec).map_err(|e| usage(format!("cannot read {}: {e}", a.spec.display())))?;
    let spec = GridSpec::from_text(&text)?;
    if a.replications == 0 {
        return Err(usage("--replications must be at least 1"));
    }
    let workers = grid_workers(a.workers)?;
    let rows_dir = a.out_dir.join("rows");
    ensure_dir(&rows_dir)?;
    let mut run = RunManifest::start("grid", line);
    run.config("spec", a.spec.display());
    for (k, v) in Manifest::from_text(&text)?.entries() {
        run.config(&format!("spec.{k}"), v);
    }
    run.config("replications", a.replications);
    run.config("workers", workers);

    let index_path = a.out_dir.join("results.csv");
    let mut done: Vec<String> = Vec::new();
    if index_path.exists() {
        for l in fs::read_to_string(&index_path)?.lines().skip(1) {
            if let Some(k) = l.split(',').next() {
                done.push(k.to_string());
            }
        }
    } else {
        fs::write(&index_path, format!("{GRID_HEADER}\n"))?;
    }
    let index = Mutex::new(OpenOptions::new().append(true).open(&index_path)?);
    let pending: Vec<GridRow> = grid_rows(&spec, a.replications)
        .into_iter()
        .filter(|r| !done.contains(&r.key()))
        .collect();
    let skipped = grid_rows(&spec, a.replications).len() - pending.len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Runtime(Error::Config(e.to_string())))?;
    let results: Vec<std::io::Result<()>> = pool.install(|| {
        pending
            .par_iter()
            .map(|row| {
                let path = rows_dir.join(format!("{}.csv", row.key()));
                // a row file without an index entry is a completed row from an
                // interrupted run
                let line = match fs::read_to_string(&path) {
                    Ok(s) if s.lines().count() == 2 => s.lines().nth(1).unwrap_or_default().to_string(),
                    _ => {
                        let l = run_grid_row(&spec, row);
                        fs::write(&path, format!("{GRID_HEADER}\n{l}\n"))?;
                        l
                    }
                };
                let mut f = index.lock().expect("index lock");
                writeln!(f, "{line}")?;
                f.flush()
            })
            .collect()
    });
    for r in results {
        r?;
    }
    run.output("results.csv");
    run.finish(&a.out_dir)?;
    println!("{} rows run, {} already complete", pending.len(), skipped);
    Ok(())
}

pub fn cmd_prior_study(a: &PriorStudyArgs, line: &str) -> CliResult<()> {
    let prior = TripleGammaConfig::new(a.a, a.c, 1.0).map_err(usage)?;
    if a.d.is_empty() || a.d.contains(&0) {
        return Err(usage("--d values must be positive"));
    }
    if a.draws < 1000 {
        return Err(usage("--draws must be at least 1000"));
    }
    if a.inner_draws == 0 {
        return Err(usage("--inner-draws must be at least 1"));
    }
    if a.hierarchical && a.tau.is_some() {
        return Err(usage("--tau only applies with --hierarchical false"));
    }
    if let Some(t) = a.tau {
        if !(t > 0.0) || !t.is_finite() {
            return Err(usage(format!("--tau must be positive, got {t}")));
        }
    }
    ensure_dir(&a.out_dir)?;
    let tau_fixed = if a.hierarchical {
        None
    } else {
        Some(match a.tau {
            Some(t) => t,
            None => tau_prior_median(&prior, 200_000, a.seed)?,
        })
    };
    let mut run = RunManifest::start("prior-study", line);
    run.config("a", a.a);
    run.config("c", a.c);
    run.config("d", a.d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(","));
    run.config("draws", a.draws);
    run.config("inner_draws", a.inner_draws);
    run.config("hierarchical", a.hierarchical);
    run.config("tau", tau_fixed.map_or("prior".to_string(), format_f64));
    run.config("seed", a.seed);
    for &d in &a.d {
        let sums = sum_theta_draws(d, &prior, tau_fixed, a.draws, a.seed)?;
        let mut s = String::from("draw,sum_theta\n");
        for (i, v) in sums.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, format_f64(*v));
        }
        let name = format!("sum_theta_d{d}.csv");
        fs::write(a.out_dir.join(&name), s)?;
        run.output(&name);

        let study = prior_model_size_study(d, &prior, a.draws, a.inner_draws, tau_fixed, a.seed)?;
        let mut s = String::from("draw,tau,pi,model_size\n");
        for i in 0..study.pi.len() {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                i + 1,
                format_f64(study.tau[i]),
                format_f64(study.pi[i]),
                study.model_size[i]
            );
        }
        let name = format!("model_size_d{d}.csv");
        fs::write(a.out_dir.join(&name), s)?;
        run.output(&name);

        let mut sorted = sums.clone();
        sorted.sort_by(f64::total_cmp);
        println!(
            "d={d} median_sum_theta={} mean_model_size={} ks_uniform={}",
            format_f64(crate::model::quantile_sorted(&sorted, 0.5)),
            format_f64(study.mean_model_size()),
            format_f64(study.ks_uniform())
        );
    }
    run.finish(&a.out_dir)?;
    Ok(())
}

/// Problems found by comparing a run directory with its manifest.
pub fn verify_dir(dir: &Path) -> CliResult<Vec<String>> {
    let m = Manifest::read(dir.join(MANIFEST_FILE))?;
    let mut problems = Vec::new();
    let outputs = m.get("outputs").unwrap_or("");
    for name in outputs.split(',').filter(|s| !s.is_empty()) {
        let bytes = match fs::read(dir.join(name)) {
            Ok(b) => b,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        if m.get(&format!("bytes.{name}")) != Some(bytes.len().to_string().as_str()) {
            problems.push(format!("{name}: size differs from manifest"));
        }
        if m.get(&format!("sha256.{name}")) != Some(sha256_hex(&bytes).as_str()) {
            problems.push(format!("{name}: digest differs from manifest"));
        }
    }
    Ok(problems)
}

pub fn cmd_verify(a: &VerifyArgs) -> CliResult<()> {
    let problems = verify_dir(&a.dir)?;
    if problems.is_empty() {
        println!("ok");
        Ok(())
    } else {
        for p in &problems {
            eprintln!("{p}");
        }
        Err(CliError::Runtime(Error::ManifestMismatch(format!(
            "{} output(s) differ",
            problems.len()
        ))))
    }
}

fn report_file(dir: &Path, name: &str, r: &BenchReport, run: &mut RunManifest) -> CliResult<()> {
    fs::write(dir.join(name), r.to_table())?;
    run.output(name);
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, line: &str) -> CliResult<()> {
    if a.reps < crate::bench::MIN_REPETITIONS {
        return Err(usage(format!(
            "--reps must be at least {}",
            crate::bench::MIN_REPETITIONS
        )));
    }
    if a.n_list.windows(2).any(|w| w[0] >= w[1]) || a.n_list.is_empty() {
        return Err(usage("--n-list must be strictly ascending"));
    }
    ensure_dir(&a.out_dir)?;
    let mut run = RunManifest::start("bench", line);
    run.config(
        "n_list",
        a.n_list.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
    );
    run.config("d", a.d);
    run.config("reps", a.reps);
    run.config("workers", a.workers);
    run.config("seed", a.seed);
    let lik = bench_likelihood(&a.n_list, a.d, a.reps, a.seed)?;
    let env = &lik.environment;
    run.config("env.os", env.os);
    run.config("env.arch", env.arch);
    run.config("env.cpus", env.available_cpus);
    run.config("env.cpu_model", &env.cpu_model);
    report_file(&a.out_dir, "bench_likelihood.csv", &lik, &mut run)?;
    if let Some(s) = lik.log_log_slope() {
        println!("likelihood log-log slope {}", format_f64(s));
    }
    if !a.skip_iteration {
        let settings: Vec<(usize, usize)> = a
            .s_list
            .iter()
            .flat_map(|&s| a.k_list.iter().map(move |&k| (s, k)))
            .collect();
        let it = bench_iteration(a.iteration_n, a.iteration_d, &settings, a.reps, a.workers, a.seed)?;
        report_file(&a.out_dir, "bench_iteration.csv", &it, &mut run)?;
        for c in &it.cases {
            println!("iteration S={} K={} median {}", c.s, c.k, format_f64(c.median()));
        }
    }
    run.finish(&a.out_dir)?;
    Ok(())
}
