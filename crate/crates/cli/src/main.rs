//! `relroute`: compile schemas into atomic routes, generate planted-signal
//! datasets, and train or evaluate models on relational databases.
//!
//! Results go to stdout as JSON (or DOT); diagnostics go to stderr.
//! Exit codes: 0 success, 1 usage or syntax error, 2 data or validation
//! error, 3 training divergence.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use relroute::entity_graph::{build_entity_graph, load_database, EntityGraph, TimeEncoderConfig};
use relroute::model::{ModelConfig, ModelKind, RpeConfig};
use relroute::schema::{classify_tables, derive_atomic_routes, emit_routes, parse_schema, RouteFormat, SchemaDef, TableClass};
use relroute::synth::{generate, Motif, MotifConfig};
use relroute::train::{
    load_task, load_training_table, Checkpoint, RecommendationHead, Session, SplitName, TaskSpec, TrainConfig,
    TrainingTable,
};
use relroute::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "relroute", version, about = "Composite message passing over relational databases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify every table as entity, bridge or hub.
    Analyze {
        #[arg(long)]
        schema: PathBuf,
    },
    /// List the atomic routes of a schema.
    Routes {
        #[arg(long)]
        schema: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
    /// Write a synthetic bridge or hub dataset.
    Generate(GenerateArgs),
    /// Train a model; prints metrics and writes a checkpoint.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on every split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum MotifArg {
    Bridge,
    Hub,
}

#[derive(clap::Args)]
struct GenerateArgs {
    #[arg(long, value_enum)]
    motif: MotifArg,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Source rows (bridge) or rows of each of `b` and `c` (hub).
    #[arg(long)]
    n_src: Option<usize>,
    /// Labelled rows: `dst` (bridge) or `a` (hub).
    #[arg(long)]
    n_dst: Option<usize>,
    /// Connecting rows: `mid` (bridge) or `hub` (hub).
    #[arg(long)]
    n_mid: Option<usize>,
    #[arg(long)]
    d_attr: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    label_noise: Option<f64>,
}

#[derive(clap::Args)]
struct DataArgs {
    #[arg(long)]
    schema: PathBuf,
    /// Directory holding one `<table>.csv` per table.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    task: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TimeEnc {
    None,
    Time2vec,
    Fixedcos,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Idgnn,
    TwoTower,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "relgnn")]
    model: String,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add schema-graph positional encodings to every message.
    #[arg(long)]
    rpe: bool,
    #[arg(long, value_enum, default_value_t = TimeEnc::None)]
    time_enc: TimeEnc,
    #[arg(long, default_value_t = 8)]
    time_dim: usize,
    /// Fixed-cosine base; defaults to √time_dim.
    #[arg(long)]
    time_alpha: Option<f64>,
    /// Fixed-cosine spread; defaults to √time_dim.
    #[arg(long)]
    time_beta: Option<f64>,
    /// Scoring head for recommendation tasks.
    #[arg(long, value_enum, default_value_t = HeadArg::Idgnn)]
    head: HeadArg,
    #[arg(long, default_value_t = 0.005)]
    lr: f64,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 16)]
    fanout: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value = "checkpoint.json")]
    checkpoint: PathBuf,
    /// Also write the metrics JSON here.
    #[arg(long)]
    metrics: Option<PathBuf>,
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

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Lib(Error::Syntax { .. }) => 1,
            Failure::Lib(Error::Divergence(_)) => 3,
            Failure::Lib(_) => 2,
        }
    }
}

type Outcome = Result<String, Failure>;

fn threads() -> Result<usize, Failure> {
    match std::env::var("RELROUTE_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Failure::Usage(format!("RELROUTE_THREADS must be a positive integer, got `{v}`"))),
    }
}

fn read_schema(path: &Path) -> Result<SchemaDef, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
    })?;
    Ok(parse_schema(&text)?)
}

fn pretty(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn analyze(schema: &Path) -> Outcome {
    let schema = read_schema(schema)?;
    let classes = classify_tables(&schema);
    let names = |c: TableClass| -> Vec<&str> {
        classes.iter().filter(|(_, k)| *k == c).map(|(n, _)| n.as_str()).collect()
    };
    let tables: Vec<_> = schema
        .tables
        .iter()
        .zip(&classes)
        .map(|(t, (_, class))| {
            json!({
                "name": t.name,
                "foreign_keys": t.foreign_keys.len(),
                "class": format!("{class:?}").to_lowercase(),
            })
        })
        .collect();
    Ok(pretty(&json!({
        "tables": tables,
        "entity": names(TableClass::Entity),
        "bridge": names(TableClass::Bridge),
        "hub": names(TableClass::Hub),
    })))
}

fn routes(schema: &Path, format: Format) -> Outcome {
    let schema = read_schema(schema)?;
    let format = match format {
        Format::Json => RouteFormat::Json,
        Format::Dot => RouteFormat::Dot,
    };
    Ok(emit_routes(&derive_atomic_routes(&schema), format))
}

fn generate_dataset(a: &GenerateArgs) -> Outcome {
    let base = match a.motif {
        MotifArg::Bridge => MotifConfig::bridge(),
        MotifArg::Hub => MotifConfig::hub(),
    };
    let cfg = MotifConfig {
        n_src: a.n_src.unwrap_or(base.n_src),
        n_dst: a.n_dst.unwrap_or(base.n_dst),
        n_mid: a.n_mid.unwrap_or(base.n_mid),
        d_attr: a.d_attr.unwrap_or(base.d_attr),
        noise_std: a.noise_std.unwrap_or(base.noise_std),
        label_noise: a.label_noise.unwrap_or(base.label_noise),
        rng_seed: a.seed,
        ..base
    };
    let ds = generate(&cfg)?;
    ds.write(&a.out)?;
    let motif = match cfg.motif {
        Motif::Bridge => "bridge",
        Motif::Hub => "hub",
    };
    Ok(pretty(&json!({
        "motif": motif,
        "out": a.out.display().to_string(),
        "schema": "schema.json",
        "task": "task.json",
        "config": cfg,
    })))
}

struct Loaded {
    graph: EntityGraph,
    task: TaskSpec,
    table: TrainingTable,
}

fn load(d: &DataArgs) -> Result<Loaded, Failure> {
    let schema = read_schema(&d.schema)?;
    let graph = build_entity_graph(load_database(&schema, &d.data)?);
    let (task, table_path) = load_task(&d.task)?;
    let table = load_training_table(&graph, &task, &table_path)?;
    Ok(Loaded { graph, task, table })
}

fn time_encoding(a: &TrainArgs) -> TimeEncoderConfig {
    let root = (a.time_dim as f64).sqrt();
    match a.time_enc {
        TimeEnc::None => TimeEncoderConfig::None,
        TimeEnc::Time2vec => TimeEncoderConfig::Time2Vec { dim: a.time_dim },
        TimeEnc::Fixedcos => TimeEncoderConfig::FixedCos {
            dim: a.time_dim,
            alpha: a.time_alpha.unwrap_or(root),
            beta: a.time_beta.unwrap_or(root),
        },
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| {
        Failure::Lib(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn train(a: &TrainArgs) -> Outcome {
    let kind: ModelKind = a.model.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let threads = threads()?;
    let data = load(&a.data)?;
    let routes = derive_atomic_routes(data.graph.schema());
    let model = ModelConfig {
        kind,
        d_model: a.dim,
        layers: a.layers,
        heads: a.heads,
        rpe: a.rpe.then(RpeConfig::default),
        time_encoding: time_encoding(a),
    };
    let mut training = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        fanout: a.fanout,
        rng_seed: a.seed,
        patience: a.patience,
        head: match a.head {
            HeadArg::Idgnn => RecommendationHead::IdGnn,
            HeadArg::TwoTower => RecommendationHead::TwoTower,
        },
        ..TrainConfig::default()
    };
    training.optimizer.lr = a.lr;
    let mut session = Session::new(&data.graph, &routes, &data.task, data.table, &model, &training)?.with_threads(threads);
    let report = session.train()?;
    session.checkpoint().save(&a.checkpoint)?;
    eprintln!(
        "trained {} for {} epochs (best {}); checkpoint {}",
        a.model,
        report.train_loss.len(),
        report.best_epoch,
        a.checkpoint.display()
    );
    let out = pretty(&report);
    if let Some(path) = &a.metrics {
        write_file(path, &out)?;
    }
    Ok(out)
}

fn eval(checkpoint: &Path, d: &DataArgs) -> Outcome {
    let threads = threads()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = load(d)?;
    let hash = data.graph.schema().content_hash();
    if ckpt.schema_hash != hash {
        return Err(Error::Checkpoint(format!(
            "{} was trained on schema {}, but {} hashes to {hash}",
            checkpoint.display(),
            ckpt.schema_hash,
            d.schema.display()
        ))
        .into());
    }
    let routes = derive_atomic_routes(data.graph.schema());
    let mut session = Session::new(&data.graph, &routes, &data.task, data.table, &ckpt.model, &ckpt.training)?.with_threads(threads);
    session.load_checkpoint(&ckpt)?;
    let mut splits = serde_json::Map::new();
    for s in [SplitName::Train, SplitName::Val, SplitName::Test] {
        splits.insert(s.as_str().into(), json!({ session.metric_name(): session.evaluate(s)? }));
    }
    Ok(pretty(&json!({
        "task": data.task.kind,
        "model": ckpt.model.kind,
        "metric": session.metric_name(),
        "best_epoch": ckpt.best_epoch,
        "splits": splits,
    })))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Analyze { schema } => analyze(&schema),
        Command::Routes { schema, format } => routes(&schema, format),
        Command::Generate(a) => generate_dataset(&a),
        Command::Train(a) => train(&a),
        Command::Eval { checkpoint, data } => eval(&checkpoint, &data),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            if stdout.write_all(out.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}
