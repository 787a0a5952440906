//! `gridfactor` command-line pipeline.
//!
//! Settings resolve as flag, then the subcommand's table in the `--config`
//! TOML file (keys spelled like the flags), then the built-in default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use gridfactor::analysis::{
    bench_csv, detect, scaling_benchmark, BenchConfig, DetectConfig, SensorFlag,
};
use gridfactor::builder::{build_blueprint, quantities_of, ModelBlueprint, BLUEPRINT_VERSION};
use gridfactor::datagen::{
    generate, inject_anomaly, load_csv, mask_missing, save_csv, GridDataset, Kind,
};
use gridfactor::graph::GRAPH_VERSION;
use gridfactor::nlpca::MODEL_VERSION;
use gridfactor::partition::{partition, ConnectivityGraph, PartitionResult};
use gridfactor::trainer::{
    em_train, evaluate, infer_dataset, EmConfig, TrainedModel, TRAINED_VERSION,
};
use gridfactor::{fmt_f64, Error};

#[derive(Parser)]
#[command(
    name = "gridfactor",
    about = "Factor-graph state estimation for sensor-instrumented power grids"
)]
struct Cli {
    /// Worker threads for parallel stages [default: all cores]
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with one table per subcommand, e.g. `[train]` with `em-iters = 3`
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic grid dataset
    GenData(GenData),
    /// Partition a bus topology into sections by recursive spectral bisection
    Partition(PartitionArgs),
    /// Build and validate the factor-graph blueprint for a partition
    Build(Build),
    /// Train the joint-factor models by expectation-maximization
    Train(Train),
    /// Impute hidden readings and score them against ground truth
    Impute(Impute),
    /// Z-test sensor residuals for bad data
    Detect(Detect),
    /// Parameter-count and per-iteration timing table over system sizes
    Bench(Bench),
}

#[derive(Args)]
struct GenData {
    /// Number of buses [default: 20]
    #[arg(long)]
    buses: Option<usize>,
    /// Number of hourly samples [default: 432]
    #[arg(long)]
    hours: Option<usize>,
    /// Seed of all data, noise and mask streams [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fraction of readings to hide [default: 0]
    #[arg(long)]
    missing_ratio: Option<f64>,
    /// Bus whose solar generation is scaled without its sensor noticing
    #[arg(long)]
    anomaly_bus: Option<usize>,
    /// Scale of the injected solar generation [default: 2]
    #[arg(long)]
    anomaly_factor: Option<f64>,
    /// First hour of the injection [default: 0]
    #[arg(long)]
    anomaly_from: Option<usize>,
}

#[derive(Args)]
struct PartitionArgs {
    /// Topology CSV with `from,to` columns
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Bisection depth [default: 3]
    #[arg(long)]
    depth: Option<usize>,
    /// Smallest section that is still split [default: 3]
    #[arg(long)]
    min_size: Option<usize>,
    /// Output `node,section` CSV; adjacency goes to `<stem>.adjacency.csv`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Build {
    /// Partition CSV from `partition`
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Dataset directory (topology, series and noise levels)
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Output blueprint JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Train {
    /// Blueprint JSON from `build`
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// EM iterations [default: 5]
    #[arg(long)]
    em_iters: Option<usize>,
    /// Training seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// First training hour [default: 0]
    #[arg(long)]
    train_start: Option<usize>,
    /// End of the training hours, exclusive [default: all]
    #[arg(long)]
    train_end: Option<usize>,
    /// Gradient epochs per decoder fit [default: 1000]
    #[arg(long)]
    epochs: Option<usize>,
    /// Refinement rounds after the gradient phase [default: 20]
    #[arg(long)]
    refine_rounds: Option<usize>,
    /// Output trained-model JSON; report and timing go to
    /// `<stem>.report.json` and `<stem>.timing.json`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Impute {
    /// Trained-model JSON from `train`
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Fraction of readings to hide before imputing; 0 keeps the dataset's own mask [default: 0.1]
    #[arg(long)]
    missing_ratio: Option<f64>,
    /// Mask seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// First hour [default: 0]
    #[arg(long)]
    start: Option<usize>,
    /// End hour, exclusive [default: all]
    #[arg(long)]
    end: Option<usize>,
    /// Output estimates CSV; the summary goes to `<stem>.summary.json`
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Detect {
    /// Trained-model JSON from `train`
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Two-sided flag threshold on the z-test probability [default: 0.99]
    #[arg(long)]
    threshold: Option<f64>,
    /// Comma-separated sensor kinds to test [default: solar]
    #[arg(long)]
    kinds: Option<String>,
    /// First hour of the test window [default: 0]
    #[arg(long)]
    start: Option<usize>,
    /// End of the test window, exclusive [default: all]
    #[arg(long)]
    end: Option<usize>,
    /// Output CSV with one row per tested sensor
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Bench {
    /// Comma-separated section counts [default: 10,20,40]
    #[arg(long)]
    sizes: Option<String>,
    /// Seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Timed repeats per size; the fastest counts [default: 7]
    #[arg(long)]
    repeats: Option<usize>,
    /// Also train each size and score imputation at 10% missing [default: false]
    #[arg(long)]
    evaluate: Option<bool>,
    /// Output CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type Outcome<T> = std::result::Result<T, CliError>;

/// Subcommand table of the configuration file.
struct Settings {
    table: toml::Table,
    section: &'static str,
}

trait FromToml: Sized {
    fn from_toml(v: &toml::Value) -> Option<Self>;
}

impl FromToml for usize {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| usize::try_from(i).ok())
    }
}

impl FromToml for u64 {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    }
}

impl FromToml for f64 {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }
}

impl FromToml for bool {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_bool()
    }
}

impl FromToml for String {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_str().map(str::to_string)
    }
}

impl FromToml for PathBuf {
    fn from_toml(v: &toml::Value) -> Option<Self> {
        v.as_str().map(PathBuf::from)
    }
}

impl Settings {
    fn load(path: Option<&Path>, section: &'static str) -> Outcome<Self> {
        let mut table = toml::Table::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            let mut doc: toml::Table = toml::from_str(&text)
                .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
            if let Some(v) = doc.remove(section) {
                table = match v {
                    toml::Value::Table(t) => t,
                    _ => {
                        return Err(CliError::Usage(format!(
                            "config {}: `{section}` must be a table",
                            path.display()
                        )))
                    }
                };
            }
        }
        Ok(Self { table, section })
    }

    fn opt<T: FromToml>(&self, flag: Option<T>, key: &str) -> Outcome<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => T::from_toml(v).map(Some).ok_or_else(|| {
                CliError::Usage(format!(
                    "config [{}]: bad value for `{key}`: {v}",
                    self.section
                ))
            }),
        }
    }

    fn or<T: FromToml>(&self, flag: Option<T>, key: &str, default: T) -> Outcome<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn need<T: FromToml>(&self, flag: Option<T>, key: &str) -> Outcome<T> {
        self.opt(flag, key)?.ok_or_else(|| {
            CliError::Usage(format!(
                "{}: missing --{key} (flag or config key)",
                self.section
            ))
        })
    }
}

fn main() -> ExitCode {
    let version = format!(
        "{} (blueprint v{BLUEPRINT_VERSION}, trained model v{TRAINED_VERSION}, nlpca model v{MODEL_VERSION}, graph v{GRAPH_VERSION})",
        env!("CARGO_PKG_VERSION")
    );
    let matches = match Cli::command().version(&*version.leak()).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the thread pool: {e}")))?;
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => gen_data(a, Settings::load(config, "gen-data")?),
        Command::Partition(a) => run_partition(a, Settings::load(config, "partition")?),
        Command::Build(a) => build(a, Settings::load(config, "build")?),
        Command::Train(a) => train(a, Settings::load(config, "train")?),
        Command::Impute(a) => impute(a, Settings::load(config, "impute")?),
        Command::Detect(a) => run_detect(a, Settings::load(config, "detect")?),
        Command::Bench(a) => bench(a, Settings::load(config, "bench")?),
    }
}

/// `dir/stem.suffix` next to `path`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    std::fs::write(path, text + "\n").map_err(Error::from)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    std::fs::write(path, text).map_err(Error::from)?;
    Ok(())
}

fn window(ds: GridDataset, start: usize, end: Option<usize>) -> Outcome<GridDataset> {
    let end = end.unwrap_or(ds.hours());
    if start == 0 && end == ds.hours() {
        return Ok(ds);
    }
    Ok(ds.slice_hours(start, end)?)
}

fn gen_data(a: GenData, s: Settings) -> Outcome<()> {
    let buses = s.or(a.buses, "buses", 20)?;
    let hours = s.or(a.hours, "hours", 432)?;
    let seed = s.or(a.seed, "seed", 0)?;
    let out: PathBuf = s.need(a.out, "out")?;
    let ratio = s.or(a.missing_ratio, "missing-ratio", 0.0)?;
    let mut ds = generate(buses, hours, seed)?;
    if let Some(bus) = s.opt(a.anomaly_bus, "anomaly-bus")? {
        let factor = s.or(a.anomaly_factor, "anomaly-factor", 2.0)?;
        let from = s.or(a.anomaly_from, "anomaly-from", 0)?;
        ds = inject_anomaly(&ds, bus, Kind::Solar, factor, from)?;
    }
    if ratio > 0.0 {
        ds = mask_missing(&ds, ratio, seed)?;
    }
    save_csv(&ds, &out)?;
    println!(
        "wrote {} buses x {} hours ({} series, {:.1}% observed) to {}",
        ds.buses(),
        ds.hours(),
        ds.series.len(),
        100.0 * ds.observed_fraction(),
        out.display()
    );
    Ok(())
}

fn run_partition(a: PartitionArgs, s: Settings) -> Outcome<()> {
    let topology: PathBuf = s.need(a.topology, "topology")?;
    let depth = s.or(a.depth, "depth", 3)?;
    let min_size = s.or(a.min_size, "min-size", 3)?;
    let out: PathBuf = s.need(a.out, "out")?;
    let graph = ConnectivityGraph::load_csv(&topology, None)?;
    let part = partition(&graph, depth, min_size)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    part.save_csv(&out)?;
    let adjacency = sidecar(&out, "adjacency.csv");
    part.save_adjacency_csv(&adjacency)?;
    let sizes: Vec<String> = part.sections.iter().map(|s| s.len().to_string()).collect();
    println!(
        "{} sections (sizes {}), {} adjacent pairs; wrote {} and {}",
        part.sections.len(),
        sizes.join(","),
        part.section_adjacency.len(),
        out.display(),
        adjacency.display()
    );
    Ok(())
}

fn build(a: Build, s: Settings) -> Outcome<()> {
    let partition_path: PathBuf = s.need(a.partition, "partition")?;
    let dataset: PathBuf = s.need(a.dataset, "dataset")?;
    let out: PathBuf = s.need(a.out, "out")?;
    let ds = load_csv(&dataset)?;
    let part = PartitionResult::load_csv(&partition_path, &ds.topology)?;
    let bp = build_blueprint(&part, &quantities_of(&ds), &ds.noise)?;
    let report = bp.validation_report();
    println!(
        "{} variables (state dim {}), {} sensor factors, {} joint factors, {} decoder parameters",
        bp.variables.len(),
        bp.state_dim(),
        bp.conditionals.len(),
        bp.joints.len(),
        bp.parameter_count()?
    );
    for j in &bp.joints {
        println!(
            "  {}: {} + {} (d={}, q={}, m={}, crossing edges {})",
            j.name,
            bp.variables[j.vars[0]].name,
            bp.variables[j.vars[1]].name,
            j.d,
            j.q,
            j.m,
            j.weight
        );
    }
    if !report.is_valid() {
        return Err(Error::Validation(report.violations).into());
    }
    println!("validation: ok");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    bp.save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct Timing {
    seconds: f64,
    threads: usize,
}

fn train(a: Train, s: Settings) -> Outcome<()> {
    let model: PathBuf = s.need(a.model, "model")?;
    let dataset: PathBuf = s.need(a.dataset, "dataset")?;
    let out: PathBuf = s.need(a.out, "out")?;
    let mut config = EmConfig::default();
    config.em_iters = s.or(a.em_iters, "em-iters", config.em_iters)?;
    config.seed = s.or(a.seed, "seed", 0)?;
    config.nlpca.epochs = s.or(a.epochs, "epochs", config.nlpca.epochs)?;
    config.nlpca.refine_rounds =
        s.or(a.refine_rounds, "refine-rounds", config.nlpca.refine_rounds)?;
    let start = s.or(a.train_start, "train-start", 0)?;
    let end = s.opt(a.train_end, "train-end")?;
    let bp = ModelBlueprint::load(&model)?;
    let ds = window(load_csv(&dataset)?, start, end)?;
    let clock = Instant::now();
    let tm = em_train(&bp, &ds, &config)?;
    let seconds = clock.elapsed().as_secs_f64();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    tm.save(&out)?;
    let report = sidecar(&out, "report.json");
    write_json(&report, &tm.report)?;
    write_json(
        &sidecar(&out, "timing.json"),
        &Timing {
            seconds,
            threads: rayon::current_num_threads(),
        },
    )?;
    for it in &tm.report.iterations {
        println!(
            "iteration {}: training rmse {:.6e}{}",
            it.iteration,
            it.training_rmse,
            if it.accepted { "" } else { " (rejected)" }
        );
    }
    println!(
        "best iteration {}; wrote {} and {}",
        tm.report.best_iteration,
        out.display(),
        report.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ImputeSummary {
    missing_ratio: f64,
    seed: u64,
    hours: usize,
    rmse: Option<f64>,
    evaluated: Option<usize>,
    masked_only: Option<bool>,
    per_variable: Vec<gridfactor::trainer::VariableResidual>,
}

fn impute(a: Impute, s: Settings) -> Outcome<()> {
    let model: PathBuf = s.need(a.model, "model")?;
    let dataset: PathBuf = s.need(a.dataset, "dataset")?;
    let out: PathBuf = s.need(a.out, "out")?;
    let ratio = s.or(a.missing_ratio, "missing-ratio", 0.1)?;
    let seed = s.or(a.seed, "seed", 0)?;
    let start = s.or(a.start, "start", 0)?;
    let end = s.opt(a.end, "end")?;
    if !(0.0..1.0).contains(&ratio) {
        return Err(CliError::Usage(format!(
            "--missing-ratio {ratio} outside [0, 1)"
        )));
    }
    let tm = TrainedModel::load(&model)?;
    let mut ds = window(load_csv(&dataset)?, start, end)?;
    if ratio > 0.0 {
        ds = mask_missing(&ds, ratio, seed)?;
    }
    let columns = tm.blueprint.series_columns(&ds)?;
    let (estimates, variances, summary) = if ds.truth.is_some() {
        let ev = evaluate(&tm, &ds)?;
        let summary = ImputeSummary {
            missing_ratio: ratio,
            seed,
            hours: ds.hours(),
            rmse: Some(ev.rmse),
            evaluated: Some(ev.evaluated),
            masked_only: Some(ev.masked_only),
            per_variable: ev.per_variable,
        };
        (ev.estimates, ev.variances, summary)
    } else {
        let (_, results) = infer_dataset(&tm, &ds)?;
        let (rows, cols) = ds.measured.shape();
        let mut est = nalgebra::DMatrix::from_element(rows, cols, f64::NAN);
        let mut var = est.clone();
        for (t, r) in results.iter().enumerate() {
            for (c, &col) in tm.blueprint.conditionals.iter().zip(&columns) {
                est[(t, col)] = r.estimates[c.var][c.component];
                var[(t, col)] = r.covariances[c.var][(c.component, c.component)];
            }
        }
        let summary = ImputeSummary {
            missing_ratio: ratio,
            seed,
            hours: ds.hours(),
            rmse: None,
            evaluated: None,
            masked_only: None,
            per_variable: Vec::new(),
        };
        (est, var, summary)
    };
    let mut csv = String::from("hour,bus,kind,observed,measured,estimate,std,truth\n");
    for t in 0..ds.hours() {
        for &col in &columns {
            let key = ds.series[col];
            let observed = ds.observed[(t, col)];
            let truth = ds.truth.as_ref().map_or(f64::NAN, |m| m[(t, col)]);
            let _ = writeln!(
                csv,
                "{t},{},{},{},{},{},{},{}",
                key.bus,
                key.kind,
                observed as u8,
                if observed {
                    fmt_f64(ds.measured[(t, col)])
                } else {
                    "NA".into()
                },
                fmt_f64(estimates[(t, col)]),
                fmt_f64(variances[(t, col)].max(0.0).sqrt()),
                fmt_f64(truth)
            );
        }
    }
    write_text(&out, &csv)?;
    let summary_path = sidecar(&out, "summary.json");
    write_json(&summary_path, &summary)?;
    match (summary.rmse, summary.evaluated) {
        (Some(rmse), Some(n)) => println!(
            "rmse {} over {n} {}entries; wrote {} and {}",
            fmt_f64(rmse),
            if summary.masked_only == Some(true) {
                "masked "
            } else {
                ""
            },
            out.display(),
            summary_path.display()
        ),
        _ => println!(
            "no ground truth; wrote {} and {}",
            out.display(),
            summary_path.display()
        ),
    }
    Ok(())
}

fn parse_kinds(text: &str) -> Outcome<Vec<Kind>> {
    text.split(',')
        .map(|k| {
            k.trim()
                .parse::<Kind>()
                .map_err(|e| CliError::Usage(e.to_string()))
        })
        .collect()
}

fn run_detect(a: Detect, s: Settings) -> Outcome<()> {
    let model: PathBuf = s.need(a.model, "model")?;
    let dataset: PathBuf = s.need(a.dataset, "dataset")?;
    let out: PathBuf = s.need(a.out, "out")?;
    let threshold = s.or(a.threshold, "threshold", 0.99)?;
    let kinds = parse_kinds(&s.or(a.kinds, "kinds", "solar".to_string())?)?;
    let start = s.or(a.start, "start", 0)?;
    let end = s.opt(a.end, "end")?;
    if !(0.5..1.0).contains(&threshold) {
        return Err(CliError::Usage(format!(
            "--threshold {threshold} outside [0.5, 1)"
        )));
    }
    let tm = TrainedModel::load(&model)?;
    let ds = window(load_csv(&dataset)?, start, end)?;
    let config = DetectConfig {
        threshold,
        kinds,
        ..DetectConfig::default()
    };
    let flags = detect(&tm, &ds, &config)?;
    write_text(&out, &flags_csv(&flags))?;
    let hits: Vec<&SensorFlag> = flags.iter().filter(|f| f.test.flagged).collect();
    for f in &hits {
        println!(
            "flagged {}: z {:.3}, probability {}",
            f.series,
            f.test.z,
            fmt_f64(f.test.probability)
        );
    }
    println!(
        "{} of {} sensors flagged; wrote {}",
        hits.len(),
        flags.len(),
        out.display()
    );
    Ok(())
}

fn flags_csv(flags: &[SensorFlag]) -> String {
    let mut csv = String::from("bus,kind,n,mean_residual,sigma,z,probability,flagged\n");
    for f in flags {
        let t = &f.test;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            f.series.bus,
            f.series.kind,
            t.n,
            fmt_f64(t.mean_residual),
            fmt_f64(t.sigma),
            fmt_f64(t.z),
            fmt_f64(t.probability),
            t.flagged as u8
        );
    }
    csv
}

fn bench(a: Bench, s: Settings) -> Outcome<()> {
    let sizes_text = s.or(a.sizes, "sizes", "10,20,40".to_string())?;
    let sizes: Vec<usize> = sizes_text
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad size `{v}` in --sizes")))
        })
        .collect::<Outcome<_>>()?;
    let out: PathBuf = s.need(a.out, "out")?;
    let mut config = BenchConfig::default();
    config.seed = s.or(a.seed, "seed", 0)?;
    config.em.seed = config.seed;
    config.repeats = s.or(a.repeats, "repeats", config.repeats)?;
    config.evaluate = s.or(a.evaluate, "evaluate", false)?;
    let rows = scaling_benchmark(&sizes, &config)?;
    let csv = bench_csv(&rows);
    write_text(&out, &csv)?;
    print!("{csv}");
    Ok(())
}
