//! Command-line driver: `generate | ingest | attack | evaluate | heatmap`.
//!
//! Every subcommand accepts `--config FILE` pointing at a flat JSON object
//! keyed by flag name (`{"rows": 5, "cell-m": 200}`); flags given on the
//! command line win over the file. The effective configuration is echoed to
//! `config.json` in the output directory. Exit codes: 0 success, 1 runtime
//! failure, 2 usage or validation error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attack::{select_candidates, AttackReport};
use crate::error::Error;
use crate::eval::{self, SweepConfig, DEFAULT_EPSILON_BYTES};
use crate::ingest::{self, LogFormat, ProviderFilter};
use crate::knowledge_base::{KbManifest, KnowledgeBase, TimeFrame, UserDataset, MANIFEST_VERSION};
use crate::trace_model::{calibrated_model, TrafficModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DEFAULT_OUT_DIR: &str = "locsniff-out";
/// 2014-05-10T00:00:00Z
const DEFAULT_T_START: u64 = 1_399_680_000;
const WEEK_S: f64 = 7.0 * 86_400.0;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidGrid(_)
            | Error::InvalidParameter(_)
            | Error::EmptyTimeRange { .. }
            | Error::UnknownFormat(_)
            | Error::InvalidPrefix(_)
            | Error::EmptyFilter => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "locsniff", version, about = "Locate LBS users from encrypted session sizes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic knowledge base and the model behind it.
    Generate(GenerateArgs),
    /// Validate and prefilter a captured session log.
    Ingest(IngestArgs),
    /// Rank candidate locations for a user dataset.
    Attack(AttackArgs),
    /// Run the k/t and delta accuracy sweeps.
    Evaluate(EvaluateArgs),
    /// Build a heat matrix and detect indistinguishable regions.
    Heatmap(HeatmapArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct CommonArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out_dir: Option<PathBuf>,
    /// Worker threads (default: available cores). Never changes results.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    jobs: Option<usize>,
    /// JSON file of flag-named defaults.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct GenerateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rows: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    cols: Option<usize>,
    /// Cell edge length in meters.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    cell_m: Option<f64>,
    /// Collection period in weeks (fractions allowed).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weeks: Option<f64>,
    /// Seconds between probes of each location.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    interval_s: Option<u64>,
    /// Epoch second of the first probe.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    t_start: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct IngestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    /// jsonl or csv.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    format: Option<String>,
    /// Provider prefixes in CIDR notation; enables prefiltering.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    prefix: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct AttackArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kb: Option<PathBuf>,
    /// JSONL file of unlabeled user sessions.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    user: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    t0: Option<u64>,
    /// Window length in seconds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    t_s: Option<u64>,
    /// Window shift into the past in seconds.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_s: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct EvaluateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonArgs,
    /// Defaults to OUT_DIR/model.json.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<PathBuf>,
    /// Defaults to OUT_DIR/kb.jsonl.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kb: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    k_values: Option<Vec<usize>>,
    /// Minutes.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    t_values: Option<Vec<u64>>,
    /// Minutes.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_values: Option<Vec<u64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_k: Option<usize>,
    /// Minutes.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    delta_t: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    session_interval_s: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
struct HeatmapArgs {
    #[command(flatten)]
    #[serde(flatten)]
    common: CommonArgs,
    /// Defaults to OUT_DIR/kb.jsonl.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    kb: Option<PathBuf>,
    /// Grid metadata; defaults to the knowledge base's `.manifest.json` sidecar.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    manifest: Option<PathBuf>,
    /// End of the window; defaults to the last record.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    t0: Option<u64>,
    /// Window length in minutes; defaults to the whole knowledge base.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    window_min: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
}

/// Overlays explicitly given flags on the `--config` file.
fn merge_config<A>(flags: A, config: Option<&Path>) -> CliResult<A>
where
    A: Serialize + DeserializeOwned,
{
    let Some(path) = config else {
        return Ok(flags);
    };
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut merged: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    let serde_json::Value::Object(base) = &mut merged else {
        return Err(usage(format!("config {} must be a JSON object", path.display())));
    };
    let serde_json::Value::Object(overrides) =
        serde_json::to_value(&flags).map_err(|e| CliError::Runtime(e.to_string()))?
    else {
        unreachable!("argument structs serialize to objects");
    };
    base.extend(overrides);
    serde_json::from_value(merged).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn out_dir(common: &CommonArgs) -> PathBuf {
    common
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Paths inside the output directory are echoed relative to it, so configs
/// from runs in different directories compare equal.
fn echo_path(path: &Path, dir: &Path) -> PathBuf {
    path.strip_prefix(dir).unwrap_or(path).to_path_buf()
}

fn create_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn flush(mut w: BufWriter<File>, path: &Path) -> CliResult<()> {
    w.flush()
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn with_jobs<T>(jobs: Option<usize>, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T>
where
    T: Send,
{
    match jobs {
        Some(0) => Err(usage("--jobs must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .install(f),
        None => f(),
    }
}

/// Tracks files written by a command so a failure leaves nothing behind.
struct Outputs {
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new() -> Self {
        Outputs { written: Vec::new() }
    }

    fn path(&mut self, dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn discard(&self) {
        for p in &self.written {
            let _ = fs::remove_file(p);
        }
    }
}

#[derive(Serialize)]
struct GenerateConfig {
    command: &'static str,
    seed: u64,
    jobs: Option<usize>,
    rows: usize,
    cols: usize,
    cell_m: f64,
    weeks: f64,
    interval_s: u64,
    t_start: u64,
    t_end: u64,
}

fn cmd_generate(args: GenerateArgs) -> CliResult<()> {
    let args = merge_config(args.clone(), args.common.config.as_deref())?;
    let weeks = args.weeks.unwrap_or(3.0);
    if !(weeks.is_finite() && weeks >= 0.0) {
        return Err(usage("--weeks must be nonnegative"));
    }
    let interval_s = args.interval_s.unwrap_or(300);
    if interval_s == 0 {
        return Err(usage("--interval-s must be positive"));
    }
    let t_start = args.t_start.unwrap_or(DEFAULT_T_START);
    let config = GenerateConfig {
        command: "generate",
        seed: args.common.seed.unwrap_or(1),
        jobs: args.common.jobs,
        rows: args.rows.unwrap_or(5),
        cols: args.cols.unwrap_or(10),
        cell_m: args.cell_m.unwrap_or(200.0),
        weeks,
        interval_s,
        t_start,
        t_end: t_start + (weeks * WEEK_S).round() as u64,
    };
    let model = calibrated_model(config.rows, config.cols, config.cell_m, config.seed)?;

    let dir = out_dir(&args.common);
    create_out_dir(&dir)?;
    let mut outputs = Outputs::new();
    let result = (|| {
        let kb_path = outputs.path(&dir, "kb.jsonl");
        let mut kb_out = create_file(&kb_path)?;
        let mut count = 0usize;
        for record in model.generate_kb_traces(config.t_start, config.t_end, config.interval_s)? {
            writeln!(kb_out, "{}", record.to_json_line())
                .map_err(|e| CliError::Runtime(format!("{}: {e}", kb_path.display())))?;
            count += 1;
        }
        flush(kb_out, &kb_path)?;

        let manifest = KbManifest {
            version: MANIFEST_VERSION,
            grid: model.grid().clone(),
            probe_interval_s: config.interval_s,
            t_start: config.t_start,
            t_end: config.t_end,
            record_count: count,
        };
        manifest.save(&outputs.path(&dir, "kb.manifest.json"))?;
        let model_path = outputs.path(&dir, "model.json");
        fs::write(&model_path, model.to_json()? + "\n")
            .map_err(|e| CliError::Runtime(format!("{}: {e}", model_path.display())))?;
        write_json(&outputs.path(&dir, "config.json"), &config)?;
        eprintln!(
            "generated {count} records for {} locations over [{}, {}]",
            model.grid().len(),
            config.t_start,
            config.t_end
        );
        Ok(())
    })();
    if result.is_err() {
        outputs.discard();
    }
    result
}

#[derive(Serialize)]
struct IngestConfig {
    command: &'static str,
    input: PathBuf,
    format: LogFormat,
    prefix: Option<Vec<String>>,
}

#[derive(Serialize)]
struct IngestReport {
    records: usize,
    line_errors: Vec<ingest::LineError>,
    prefilter: Option<ingest::PrefilterReport>,
}

fn cmd_ingest(args: IngestArgs) -> CliResult<()> {
    let args = merge_config(args.clone(), args.common.config.as_deref())?;
    let input = args.input.clone().ok_or_else(|| usage("--input is required"))?;
    let format: LogFormat = match &args.format {
        Some(f) => f.parse()?,
        None if input.extension().is_some_and(|e| e == "csv") => LogFormat::Csv,
        None => LogFormat::Jsonl,
    };
    let filter = args.prefix.as_deref().map(ProviderFilter::new).transpose()?;
    let config = IngestConfig {
        command: "ingest",
        input: input.clone(),
        format,
        prefix: args.prefix.clone(),
    };

    let file = File::open(&input)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", input.display())))?;
    let parsed = ingest::parse_session_log(std::io::BufReader::new(file), format)?;
    let (records, prefilter) = match &filter {
        Some(f) => {
            let (kept, report) = ingest::prefilter(parsed.records, f);
            (kept, Some(report))
        }
        None => (parsed.records, None),
    };

    let dir = out_dir(&args.common);
    create_out_dir(&dir)?;
    let records_path = dir.join("records.jsonl");
    let mut out = create_file(&records_path)?;
    ingest::write_jsonl(&records, &mut out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", records_path.display())))?;
    flush(out, &records_path)?;
    let report = IngestReport {
        records: records.len(),
        line_errors: parsed.errors,
        prefilter,
    };
    write_json(&dir.join("ingest_report.json"), &report)?;
    write_json(&dir.join("config.json"), &config)?;
    eprintln!(
        "ingested {} records ({} malformed lines{})",
        report.records,
        report.line_errors.len(),
        report
            .prefilter
            .as_ref()
            .map(|p| format!(", {} dropped by prefilter", p.dropped()))
            .unwrap_or_default()
    );
    Ok(())
}

#[derive(Serialize)]
struct AttackConfig {
    command: &'static str,
    kb: PathBuf,
    user: PathBuf,
    t0: u64,
    t_s: u64,
    delta_s: u64,
    k: usize,
}

fn load_user(path: &Path) -> CliResult<UserDataset> {
    let file = File::open(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let parsed = ingest::parse_session_log(std::io::BufReader::new(file), LogFormat::Jsonl)?;
    if let Some(err) = parsed.errors.first() {
        return Err(CliError::Runtime(format!(
            "{}: line {}: {}",
            path.display(),
            err.line,
            err.message
        )));
    }
    UserDataset::new(parsed.records).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_attack(args: AttackArgs) -> CliResult<()> {
    let args = merge_config(args.clone(), args.common.config.as_deref())?;
    let required = |name: &str| usage(format!("--{name} is required"));
    let config = AttackConfig {
        command: "attack",
        kb: args.kb.clone().ok_or_else(|| required("kb"))?,
        user: args.user.clone().ok_or_else(|| required("user"))?,
        t0: args.t0.ok_or_else(|| required("t0"))?,
        t_s: args.t_s.ok_or_else(|| required("t-s"))?,
        delta_s: args.delta_s.unwrap_or(0),
        k: args.k.ok_or_else(|| required("k"))?,
    };
    let frame = TimeFrame::new(config.t0, config.t_s, config.delta_s)?;
    if config.k == 0 {
        return Err(usage("--k must be at least 1"));
    }

    let kb = KnowledgeBase::load_jsonl(&config.kb)?;
    let user = load_user(&config.user)?;
    let set = select_candidates(&user, &kb, &frame, config.k)?;
    let report = AttackReport::new(&frame, &set);
    let json = serde_json::to_string(&report).map_err(|e| CliError::Runtime(e.to_string()))?;

    let dir = out_dir(&args.common);
    create_out_dir(&dir)?;
    write_json(&dir.join("attack.json"), &report)?;
    write_json(&dir.join("config.json"), &config)?;
    println!("{json}");
    if set.truncated {
        eprintln!(
            "only {} of {} requested locations were scorable",
            set.entries.len(),
            config.k
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateConfig {
    command: &'static str,
    jobs: Option<usize>,
    model: PathBuf,
    kb: PathBuf,
    #[serde(flatten)]
    sweep: SweepConfig,
    delta_k: usize,
    delta_t: u64,
}

#[derive(Serialize, Deserialize)]
struct SweepOutputs {
    kt_sweep: Vec<eval::AccuracyCurve>,
    delta_sweep: eval::AccuracyCurve,
}

fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let args = merge_config(args.clone(), args.common.config.as_deref())?;
    let dir = out_dir(&args.common);
    let defaults = SweepConfig::default();
    let mut config = EvaluateConfig {
        command: "evaluate",
        jobs: args.common.jobs,
        model: args.model.clone().unwrap_or_else(|| dir.join("model.json")),
        kb: args.kb.clone().unwrap_or_else(|| dir.join("kb.jsonl")),
        sweep: SweepConfig {
            k_values: args.k_values.clone().unwrap_or(defaults.k_values),
            t_values: args.t_values.clone().unwrap_or(defaults.t_values),
            delta_values: args.delta_values.clone().unwrap_or(defaults.delta_values),
            trials: args.trials.unwrap_or(defaults.trials),
            seed: args.common.seed.unwrap_or(defaults.seed),
            session_interval_s: args.session_interval_s.unwrap_or(defaults.session_interval_s),
        },
        delta_k: args.delta_k.unwrap_or(4),
        delta_t: args.delta_t.unwrap_or(60),
    };
    config.sweep.validate()?;
    if config.delta_k == 0 || config.delta_t == 0 {
        return Err(usage("--delta-k and --delta-t must be positive"));
    }

    let model_text = fs::read_to_string(&config.model)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", config.model.display())))?;
    let model = TrafficModel::from_json(&model_text)?;
    let kb = KnowledgeBase::load_jsonl(&config.kb)?;

    let outputs = with_jobs(config.jobs, || {
        Ok(SweepOutputs {
            kt_sweep: eval::k_accuracy_sweep(&model, &kb, &config.sweep)?,
            delta_sweep: eval::delta_sweep(&model, &kb, config.delta_k, config.delta_t, &config.sweep)?,
        })
    })?;

    create_out_dir(&dir)?;
    config.model = echo_path(&config.model, &dir);
    config.kb = echo_path(&config.kb, &dir);
    let mut files = Outputs::new();
    let result = (|| {
        for curve in &outputs.kt_sweep {
            let k = curve.k.expect("k/t curves carry k");
            let path = files.path(&dir, &format!("kt_sweep_k{k}.csv"));
            let mut w = create_file(&path)?;
            curve.write_csv(&mut w)?;
            flush(w, &path)?;
        }
        let path = files.path(&dir, "delta_sweep.csv");
        let mut w = create_file(&path)?;
        outputs.delta_sweep.write_csv(&mut w)?;
        flush(w, &path)?;
        write_json(&files.path(&dir, "sweeps.json"), &outputs)?;
        write_json(&files.path(&dir, "config.json"), &config)
    })();
    if result.is_err() {
        files.discard();
        return result;
    }

    for curve in &outputs.kt_sweep {
        if let (Some(8), Some(acc)) = (curve.k, curve.accuracy_at(20)) {
            eprintln!("k-accuracy at k=8, t=20 min: {acc:.3}");
        }
    }
    for delta in [0, 720, 1_440, 2_880, 4_320] {
        if let Some(acc) = outputs.delta_sweep.accuracy_at(delta) {
            eprintln!(
                "k-accuracy at k={}, t={} min, delta={delta} min: {acc:.3}",
                config.delta_k, config.delta_t
            );
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct HeatmapConfig {
    command: &'static str,
    kb: PathBuf,
    manifest: PathBuf,
    window: TimeFrame,
    epsilon: f64,
}

fn cmd_heatmap(args: HeatmapArgs) -> CliResult<()> {
    let args = merge_config(args.clone(), args.common.config.as_deref())?;
    let dir = out_dir(&args.common);
    let kb_path = args.kb.clone().unwrap_or_else(|| dir.join("kb.jsonl"));
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| kb_path.with_extension("manifest.json"));
    let epsilon = args.epsilon.unwrap_or(DEFAULT_EPSILON_BYTES);
    if epsilon.is_nan() || epsilon < 0.0 {
        return Err(usage("--epsilon must be nonnegative"));
    }
    if args.window_min == Some(0) {
        return Err(usage("--window-min must be positive"));
    }

    let manifest = KbManifest::load(&manifest_path).map_err(|e| {
        CliError::Runtime(format!("missing or unreadable grid metadata: {e}"))
    })?;
    let kb = KnowledgeBase::load_jsonl(&kb_path)?;
    let (first, last) = kb.time_span().ok_or(Error::EmptyKnowledgeBase)?;
    let t0 = args.t0.unwrap_or(last);
    let t = match args.window_min {
        Some(m) => m * 60,
        None => t0.saturating_sub(first).max(1),
    };
    let window = TimeFrame::new(t0, t, 0)?;
    let hm = eval::heat_matrix(&kb, &manifest.grid, &window);
    let regions = eval::detect_regions(&hm, epsilon);

    create_out_dir(&dir)?;
    let csv_path = dir.join("heatmap.csv");
    let mut w = create_file(&csv_path)?;
    hm.write_csv(&mut w)?;
    flush(w, &csv_path)?;
    write_json(&dir.join("heatmap.json"), &hm)?;
    write_json(&dir.join("regions.json"), &regions)?;
    write_json(
        &dir.join("config.json"),
        &HeatmapConfig {
            command: "heatmap",
            kb: echo_path(&kb_path, &dir),
            manifest: echo_path(&manifest_path, &dir),
            window,
            epsilon,
        },
    )?;
    let absent = hm.absent_cells().len();
    eprintln!(
        "{} regions over {} cells ({absent} without data)",
        regions.len(),
        manifest.grid.len()
    );
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Heatmap(a) => cmd_heatmap(a),
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"rows": 2, "cols": 3, "cell-m": 25, "seed": 4}"#).unwrap();
        let flags = GenerateArgs {
            rows: Some(7),
            ..GenerateArgs::default()
        };
        let merged = merge_config(flags, Some(&path)).unwrap();
        assert_eq!(merged.rows, Some(7));
        assert_eq!(merged.cols, Some(3));
        assert_eq!(merged.cell_m, Some(25.0));
        assert_eq!(merged.common.seed, Some(4));
    }

    #[test]
    fn bad_config_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, "[1, 2]").unwrap();
        assert!(matches!(
            merge_config(GenerateArgs::default(), Some(&path)),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            merge_config(GenerateArgs::default(), Some(&dir.path().join("missing.json"))),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn unknown_subcommand_exits_2() {
        assert_eq!(run(["locsniff", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["locsniff", "generate", "--rows", "x"]), EXIT_USAGE);
    }
}
