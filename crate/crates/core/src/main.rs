use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use attnseg::bench::{run_bench, BenchSpec};
use attnseg::bundle::{self, BundleError};
use attnseg::config::{AggregationMode, EngineConfig, HeadMetric, LayerMetric};
use attnseg::correlation::{segment_traced, CorrelationError};
use attnseg::eval::compute_miou;
use attnseg::fixture::{generate_fixture, FixtureError, FixtureSpec};
use attnseg::mask::{self, MaskError};

/// Segment images from dumped diffusion attention activations.
#[derive(Parser)]
#[command(name = "attnseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment one bundle and write a PGM mask plus class sidecar.
    Segment(SegmentArgs),
    /// Score predicted masks against ground truth; prints a JSON report.
    Eval(EvalArgs),
    /// Write a planted synthetic bundle and its ground-truth mask.
    Fixture(FixtureArgs),
    /// Time auto aggregation against uniform averaging.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// JSON engine config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Write every intermediate score map here.
    #[arg(long)]
    dump_stages: Option<PathBuf>,
    #[arg(long)]
    aggregation: Option<AggregationMode>,
    #[arg(long)]
    head_metric: Option<HeadMetric>,
    #[arg(long)]
    layer_metric: Option<LayerMetric>,
    #[arg(long)]
    refinement_steps: Option<u32>,
    #[arg(long)]
    bg_threshold: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted `.pgm` masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth `.pgm` masks with matching file names.
    #[arg(long)]
    gt: PathBuf,
    /// JSON map of class index to name; every key is scored.
    #[arg(long)]
    classes: PathBuf,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_parser = parse_grid, default_value = "64x64")]
    grid: (usize, usize),
    #[arg(long, default_value_t = 16)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 3)]
    repeat: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("grid dimensions must be positive".into());
    }
    Ok((h, w))
}

/// Failure classes with their exit codes.
enum Failure {
    Validation(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Io(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Io(m) => m,
        }
    }
}

impl From<BundleError> for Failure {
    fn from(e: BundleError) -> Self {
        if e.is_io() {
            Failure::Io(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<MaskError> for Failure {
    fn from(e: MaskError) -> Self {
        match e {
            MaskError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<CorrelationError> for Failure {
    fn from(e: CorrelationError) -> Self {
        match e {
            CorrelationError::Mask(m) => m.into(),
            other => Failure::Validation(other.to_string()),
        }
    }
}

impl From<FixtureError> for Failure {
    fn from(e: FixtureError) -> Self {
        match e {
            FixtureError::Bundle(b) => b.into(),
            FixtureError::Mask(m) => m.into(),
            other => Failure::Validation(other.to_string()),
        }
    }
}

fn io_failure(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(io_failure(path))
}

#[derive(Serialize)]
struct StageIndexEntry {
    stage: &'static str,
    file: String,
    shape: Vec<usize>,
    height: usize,
    width: usize,
    /// Token indices for the raw stage, class ids afterwards.
    columns: Vec<u32>,
}

fn cmd_segment(args: SegmentArgs) -> Result<(), Failure> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_failure(path))?;
            EngineConfig::from_json(&text).map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?
        }
        None => EngineConfig::default(),
    };
    if let Some(v) = args.aggregation {
        config.aggregation = v;
    }
    if let Some(v) = args.head_metric {
        config.head_metric = v;
    }
    if let Some(v) = args.layer_metric {
        config.layer_metric = v;
    }
    if let Some(v) = args.refinement_steps {
        config.refinement_steps = v;
    }
    if let Some(v) = args.bg_threshold {
        config.bg_threshold = v;
    }
    config.validate().map_err(|e| Failure::Validation(e.to_string()))?;

    let bundle = bundle::load_bundle(&args.bundle)?;
    let trace = segment_traced(&bundle, &config)?;
    let names: BTreeMap<u32, String> = bundle.classes.iter().map(|c| (c.class_id, c.name.clone())).collect();
    mask::write_mask(&trace.mask, &args.out, &names)?;

    if let Some(dir) = &args.dump_stages {
        fs::create_dir_all(dir).map_err(io_failure(dir))?;
        let mut index = Vec::new();
        for stage in trace.stages() {
            let file = format!("{}.f32", stage.stage.name());
            let path = dir.join(&file);
            fs::write(&path, stage.scores.to_le_bytes()).map_err(io_failure(&path))?;
            index.push(StageIndexEntry {
                stage: stage.stage.name(),
                file,
                shape: stage.scores.shape().to_vec(),
                height: stage.height,
                width: stage.width,
                columns: stage.columns.clone(),
            });
        }
        write_json(&dir.join("stages.json"), &index)?;
    }
    Ok(())
}

fn pgm_names(dir: &Path) -> Result<Vec<String>, Failure> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_failure(dir))? {
        let entry = entry.map_err(io_failure(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let classes: Vec<u32> = mask::read_class_names(&args.classes)?.into_keys().collect();
    let gt_names = pgm_names(&args.gt)?;
    if gt_names.is_empty() {
        return Err(Failure::Validation(format!("no .pgm masks in {}", args.gt.display())));
    }
    let mut pairs = Vec::with_capacity(gt_names.len());
    for name in &gt_names {
        let pred_path = args.pred.join(name);
        if !pred_path.exists() {
            return Err(Failure::Validation(format!("no prediction for {name} in {}", args.pred.display())));
        }
        pairs.push((mask::read_mask(&pred_path)?, mask::read_mask(&args.gt.join(name))?));
    }
    let report = compute_miou(&pairs, &classes).map_err(|e| Failure::Validation(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_fixture(args: FixtureArgs) -> Result<(), Failure> {
    let defaults = FixtureSpec::default();
    let spec = FixtureSpec {
        seed: args.seed,
        grid: args.grid.unwrap_or(defaults.grid),
        layers: args.layers.unwrap_or(defaults.layers),
        heads: args.heads.unwrap_or(defaults.heads),
        tokens: args.tokens.unwrap_or(defaults.tokens),
        ..defaults
    };
    let fixture = generate_fixture(&spec)?;
    bundle::write_bundle(&fixture.bundle, &args.out)?;
    let names: BTreeMap<u32, String> =
        fixture.bundle.classes.iter().map(|c| (c.class_id, c.name.clone())).collect();
    mask::write_mask(&fixture.ground_truth, &args.out.join("gt_mask.pgm"), &names)?;
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let spec = BenchSpec { grid: args.grid, layers: args.layers, heads: args.heads, repeat: args.repeat, seed: args.seed };
    let report = run_bench(&spec).map_err(|e| Failure::Validation(e.to_string()))?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors map to the validation code; 2 is reserved for I/O.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Segment(a) => cmd_segment(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Fixture(a) => cmd_fixture(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("attnseg: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
