use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use spectral_nj::bench::{self, BenchConfig, ConcentrationConfig, Estimator};
use spectral_nj::generate::{tight_example_tree, GenSpec, TreeKind};
use spectral_nj::markov::{model_from_affinities, simulate, CharacterMatrix, SiteRates};
use spectral_nj::properties::{self, BatteryConfig, Tolerances};
use spectral_nj::reconstruct::{max_quartet_nj, nj, snj, Method};
use spectral_nj::similarity::{affinity_to_distance, floor_similarity, jc_resolution_floor};
use spectral_nj::tree::{parse_newick, parse_newick_with_affinities, rf_distance, write_newick, write_newick_with_affinities};
use spectral_nj::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_COMPUTATION: u8 = 2;
const EXIT_PROPERTY: u8 = 3;

#[derive(Parser)]
#[command(name = "snj", version, about = "Spectral neighbor joining: generate, simulate, reconstruct, verify, benchmark")]
struct Cli {
    /// Base seed for every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output path; standard output when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, env = "SNJ_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a tree and write it as Newick with edge affinities.
    GenTree(GenTreeArgs),
    /// Simulate Jukes-Cantor characters on a tree.
    Simulate(SimulateArgs),
    /// Estimate similarities from characters and reconstruct a tree.
    Reconstruct(ReconstructArgs),
    /// Run the invariant battery.
    Verify(VerifyArgs),
    /// Run a benchmark grid and write one CSV row per reconstruction.
    Benchmark(BenchmarkArgs),
    /// Mean estimation error of the JC similarity as a function of n.
    Concentration(ConcentrationArgs),
}

#[derive(Args)]
struct GenTreeArgs {
    #[arg(long)]
    kind: TreeKind,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value_t = 0.9)]
    delta: f64,
    /// Central edge affinity of the tight example.
    #[arg(long)]
    xi: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Newick file with edge affinities.
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    /// Per-site Gamma rate heterogeneity with this shape.
    #[arg(long)]
    gamma_shape: Option<f64>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Character matrix file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "snj")]
    method: Method,
    #[arg(long, default_value = "jc")]
    estimator: Estimator,
    /// Merge trace path; defaults to the tree path with `.trace.jsonl` appended.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Reference tree; the RF distance to it is reported.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Relative tolerance of the tight-example closed form.
    #[arg(long, default_value_t = 1e-10)]
    sigma_tol: f64,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// TOML grid (schema = 1).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in grid: desk or paper.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct ConcentrationArgs {
    #[arg(long, default_value_t = 4)]
    m: usize,
    #[arg(long, default_value_t = 4)]
    d: usize,
    #[arg(long, default_value_t = 0.9)]
    delta: f64,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', default_value = "1000,4000,16000,64000")]
    n: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    trials: usize,
}

/// Exit status paired with a message.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Parameter(_)) => EXIT_USAGE,
            _ => EXIT_COMPUTATION,
        };
        Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenTree(a) => gen_tree(cli, a),
        Command::Simulate(a) => simulate_cmd(cli, a),
        Command::Reconstruct(a) => reconstruct(cli, a),
        Command::Verify(a) => verify(cli, a),
        Command::Benchmark(a) => benchmark(cli, a),
        Command::Concentration(a) => concentration(cli, a),
    }
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_tree(cli: &Cli, a: &GenTreeArgs) -> Result<(), Failure> {
    let spec = GenSpec { xi: a.xi, ..GenSpec::new(a.kind, a.m, cli.seed, a.delta) };
    let (t, aff) = spec.generate()?;
    let mut w = output(cli.out.as_deref())?;
    writeln!(w, "{}", write_newick_with_affinities(&t, &aff)).map_err(anyhow::Error::from)?;
    w.flush().map_err(anyhow::Error::from)?;
    if a.kind == TreeKind::TightExample {
        let tight = tight_example_tree(a.m, a.delta, a.xi.unwrap_or_default())?;
        let names = |s: &[usize]| s.iter().map(|&i| t.label(i).to_string()).collect::<Vec<_>>();
        let sidecar = serde_json::json!({
            "m": a.m, "delta": a.delta, "xi": a.xi,
            "clan_a": names(&tight.clan_a), "clan_c": names(&tight.clan_c),
        });
        let text = serde_json::to_string_pretty(&sidecar).map_err(anyhow::Error::from)?;
        match &cli.out {
            Some(p) => std::fs::write(with_suffix(p, ".clans.json"), text + "\n").map_err(anyhow::Error::from)?,
            None => eprintln!("{text}"),
        }
    }
    Ok(())
}

fn simulate_cmd(cli: &Cli, a: &SimulateArgs) -> Result<(), Failure> {
    let (t, aff) = parse_newick_with_affinities(&read_text(&a.tree)?)?;
    let aff = aff.ok_or_else(|| Error::Parameter(format!("{} has no edge affinities", a.tree.display())))?;
    let model = model_from_affinities(&t, &aff, a.d)?;
    let rates = a.gamma_shape.map(|shape| SiteRates::gamma(a.n, shape, cli.seed)).transpose()?;
    let x = simulate(&model, a.n, cli.seed, rates.as_ref())?;
    let mut w = output(cli.out.as_deref())?;
    x.write_to(&mut w)?;
    w.flush().map_err(anyhow::Error::from)?;
    Ok(())
}

fn reconstruct(cli: &Cli, a: &ReconstructArgs) -> Result<(), Failure> {
    let file = File::open(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let x = CharacterMatrix::read_from(BufReader::new(file))?;
    let (r, diag) = bench::estimate(&x, a.estimator)?;
    let start = std::time::Instant::now();
    let (t, trace) = match a.method {
        Method::Snj => snj(&r)?,
        Method::Maxq => max_quartet_nj(&r)?,
        Method::Nj => nj(&affinity_to_distance(&floor_similarity(&r, jc_resolution_floor(x.sites(), x.states())))?)?,
    };
    let ms = start.elapsed().as_secs_f64() * 1e3;
    eprintln!("{}: m={} n={} clamped={} runtime_ms={ms:.3}", a.method, x.rows(), x.sites(), diag.clamp_count);
    let mut w = output(cli.out.as_deref())?;
    writeln!(w, "{}", write_newick(&t)).map_err(anyhow::Error::from)?;
    w.flush().map_err(anyhow::Error::from)?;
    let trace_path = a.trace.clone().or_else(|| cli.out.as_ref().map(|p| with_suffix(p, ".trace.jsonl")));
    if let Some(p) = trace_path {
        let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
        let mut w = BufWriter::new(f);
        trace.write_jsonl(&mut w)?;
        w.flush().map_err(anyhow::Error::from)?;
    }
    if let Some(truth) = &a.truth {
        let reference = parse_newick(&read_text(truth)?)?;
        eprintln!("rf_distance={}", rf_distance(&reference, &t)?);
    }
    Ok(())
}

fn verify(cli: &Cli, a: &VerifyArgs) -> Result<(), Failure> {
    let cfg = BatteryConfig { seed: cli.seed, tolerances: Tolerances { tight: a.sigma_tol, ..Tolerances::default() } };
    let reports = properties::run_battery(&cfg);
    let mut failures = Vec::new();
    for r in &reports {
        println!("{}", r.status_line());
        if let Some(f) = &r.failure {
            failures.push(f.clone());
        }
    }
    if failures.is_empty() {
        println!("all {} properties passed", reports.len());
        return Ok(());
    }
    let text = serde_json::to_string_pretty(&failures).map_err(anyhow::Error::from)?;
    match &cli.out {
        Some(p) => {
            std::fs::write(p, text + "\n").map_err(anyhow::Error::from)?;
            eprintln!("failing instances written to {}", p.display());
        }
        None => eprintln!("{text}"),
    }
    Err(Failure { code: EXIT_PROPERTY, error: anyhow::anyhow!("{} of {} properties failed", failures.len(), reports.len()) })
}

fn benchmark(cli: &Cli, a: &BenchmarkArgs) -> Result<(), Failure> {
    let cfg = match (&a.config, &a.preset) {
        (Some(p), None) => BenchConfig::from_toml(&read_text(p)?)?,
        (None, Some(name)) => BenchConfig::preset(name)?,
        _ => return Err(Error::Parameter("pass exactly one of --config or --preset".into()).into()),
    };
    let rows = bench::run_benchmark(&cfg)?;
    let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
    let path = cli.out.clone().or_else(|| cfg.output.clone());
    bench::write_rows(&rows, output(path.as_deref())?)?;
    eprintln!("{} rows, {} failed", rows.len(), failed);
    Ok(())
}

fn concentration(cli: &Cli, a: &ConcentrationArgs) -> Result<(), Failure> {
    let cfg = ConcentrationConfig { m: a.m, d: a.d, delta: a.delta, n_list: a.n.clone(), trials: a.trials, seed: cli.seed };
    let rows = bench::concentration(&cfg)?;
    bench::write_concentration(&rows, output(cli.out.as_deref())?)?;
    if rows.len() >= 2 {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.mean_max_error)).collect();
        eprintln!("log-log slope of mean max-entry error: {:.4}", bench::log_log_slope(&pts)?);
    }
    Ok(())
}
