use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use layoutgen::bench::run_bench;
use layoutgen::dataset::{estimate_length_prior, generate_synthetic, load_corpus, LayoutCorpus, SyntheticStyle};
use layoutgen::decoder::{parse_group_order, DecodeConfig, Predictor};
use layoutgen::layout::{Layout, LayoutSchema};
use layoutgen::masking::MaskPolicy;
use layoutgen::metrics::{evaluate, train_fid_extractor, FidExtractor, FidTrainConfig, MetricKind};
use layoutgen::model::{init_params, CheckpointFile, ModelConfig};
use layoutgen::training::{TrainConfig, TrainState, Trainer};
use serde::Serialize;

use crate::engine::{generate, layout_to_string, DecodeOverrides, GenerateRequest, Mode, ModelMetadata, PartialLayoutJson, ServedModel};
use crate::error::{AppError, AppResult};
use crate::server::{serve, AppState};
use crate::svg::{render_svg, Palette};

/// Environment variable holding the default service port.
pub const PORT_ENV: &str = "LAYOUTGEN_PORT";

#[derive(Debug, Parser)]
#[command(name = "layoutgen", version, about = "Controllable layout generation: train, generate, evaluate, benchmark, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a JSONL layout corpus.
    Train(TrainArgs),
    /// Complete a partial layout or sample a new one.
    Generate(GenerateArgs),
    /// Score a JSONL corpus of layouts.
    Eval(EvalArgs),
    /// Compare refinement decoding speed with token-by-token decoding.
    Bench(BenchArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Write a synthetic corpus and its schema.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `hierarchical` or `random:<ratio>`.
    #[arg(long, default_value = "hierarchical")]
    pub policy: MaskPolicy,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 250)]
    pub eval_interval: u64,
    /// JSONL training log; defaults to the checkpoint path with `.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Total refinement iterations.
    #[arg(long = "T")]
    pub iterations: Option<usize>,
    /// Group order such as `CSP`.
    #[arg(long)]
    pub order: Option<String>,
    /// `greedy` or `topk:<k>`.
    #[arg(long)]
    pub predictor: Option<Predictor>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl DecodeArgs {
    fn overrides(&self) -> DecodeOverrides {
        DecodeOverrides {
            iterations: self.iterations,
            group_order: self.order.clone(),
            predictor: self.predictor,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Partial layout JSON; present fields are locked.
    #[arg(long, required_unless_present = "unconditional", conflicts_with = "unconditional")]
    pub input: Option<PathBuf>,
    /// Sample the element count from the training prior.
    #[arg(long)]
    pub unconditional: bool,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Write the refinement trace here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write an SVG rendering here.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Layout output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint supplying the schema; alternatively pass --schema.
    #[arg(long, required_unless_present = "schema")]
    pub model: Option<PathBuf>,
    #[arg(long, conflicts_with = "model")]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Reference corpus for docsim (paired line by line) and fid.
    #[arg(long)]
    pub references: Option<PathBuf>,
    #[arg(long, default_value = "iou,overlap,alignment")]
    pub metrics: String,
    /// Trained fid feature extractor; trained on the references when absent.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
    /// Where to save an extractor trained by this run.
    #[arg(long)]
    pub save_extractor: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "5,10,15,20,25", value_delimiter = ',')]
    pub objects: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    pub repeats: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Checkpoints to load; the first is the default model.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long, env = PORT_ENV, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Feature extractor enabling fid in the metrics endpoint.
    #[arg(long)]
    pub extractor: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Schema output; defaults to the corpus path with extension `schema.json`.
    #[arg(long)]
    pub schema_out: Option<PathBuf>,
    #[arg(long, default_value_t = SyntheticStyle::default().min_items)]
    pub min_items: usize,
    #[arg(long, default_value_t = SyntheticStyle::default().max_items)]
    pub max_items: usize,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_text(path: &Path) -> AppResult<String> {
    fs::read_to_string(path).map_err(|e| AppError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> AppResult<()> {
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> AppResult<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.write_all(b"\n"))
                .map_err(|e| AppError::io("<stdout>", e))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> AppResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| AppError::Core(e.into()))
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> AppResult<T> {
    serde_json::from_str(text).map_err(|e| AppError::Malformed(format!("{}: {e}", path.display())))
}

pub fn train(args: &TrainArgs) -> AppResult<()> {
    let schema = LayoutSchema::from_json(&read_text(&args.schema)?)?;
    let corpus = load_corpus(&args.data, &schema)?;
    let config = TrainConfig {
        lr: args.lr,
        batch_size: args.batch_size,
        steps: args.steps,
        eval_interval: args.eval_interval,
        seed: args.seed,
        policy: args.policy,
        ..TrainConfig::default()
    };
    let meta = ModelMetadata {
        schema: schema.clone(),
        length_prior: estimate_length_prior(&corpus)?,
        train_config: Some(config.clone()),
        provenance: corpus.provenance.clone(),
    };
    let params = init_params(&ModelConfig::desk(&schema), args.seed)?;
    let train: Vec<Layout> = corpus.train().into_iter().cloned().collect();
    let val: Vec<Layout> = corpus.val().into_iter().cloned().collect();
    let mut trainer = Trainer::new(TrainState::new(params), schema, train, config)?;

    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    let mut log = fs::File::create(&log_path).map_err(|e| AppError::io(&log_path, e))?;
    trainer.run(&val, |record| {
        let line = serde_json::to_string(record)?;
        eprintln!("{line}");
        writeln!(log, "{line}").map_err(|e| layoutgen::Error::Io {
            path: log_path.clone(),
            source: e,
        })
    })?;
    trainer.save(&args.out, meta.to_value()?)?;
    Ok(())
}

pub fn generate_cmd(args: &GenerateArgs) -> AppResult<()> {
    let model = ServedModel::load(&args.model)?;
    let mut request = GenerateRequest {
        config: args.decode.overrides(),
        trace: args.trace.is_some(),
        ..GenerateRequest::default()
    };
    match &args.input {
        Some(path) => {
            let partial: PartialLayoutJson = parse_json(&read_text(path)?, path)?;
            request.canvas = partial.canvas;
            request.coords = partial.coords;
            request.elements = partial.elements;
        }
        None => request.mode = Mode::Unconditional,
    }
    let response = generate(&model, &request)?;
    if let (Some(path), Some(trace)) = (&args.trace, &response.trace) {
        write_text(path, &to_json(trace)?)?;
    }
    if let Some(path) = &args.svg {
        write_text(path, &render_svg(&response.layout, model.schema(), &Palette::default()))?;
    }
    emit(args.out.as_deref(), &layout_to_string(&response.layout)?)
}

fn load_extractor(path: &Path) -> AppResult<FidExtractor> {
    Ok(FidExtractor::from_checkpoint(CheckpointFile::load(path)?)?)
}

pub fn eval(args: &EvalArgs) -> AppResult<()> {
    let schema = match (&args.model, &args.schema) {
        (Some(m), _) => ServedModel::load(m)?.meta.schema,
        (None, Some(s)) => LayoutSchema::from_json(&read_text(s)?)?,
        (None, None) => return Err(AppError::Usage("either --model or --schema is required".into())),
    };
    let metrics = MetricKind::parse_list(&args.metrics)?;
    let data = load_corpus(&args.data, &schema)?;
    let refs: Option<LayoutCorpus> = args.references.as_ref().map(|p| load_corpus(p, &schema)).transpose()?;
    let extractor = match (&args.extractor, metrics.contains(&MetricKind::Fid), &refs) {
        (Some(p), _, _) => Some(load_extractor(p)?),
        (None, true, Some(r)) => {
            let ex = train_fid_extractor(r, &FidTrainConfig::default())?;
            if let Some(p) = &args.save_extractor {
                ex.to_checkpoint()?.save(p)?;
            }
            Some(ex)
        }
        _ => None,
    };
    let report = evaluate(
        data.records(),
        refs.as_ref().map(LayoutCorpus::records),
        &metrics,
        extractor.as_ref(),
    )?;
    emit(args.out.as_deref(), &to_json(&report)?)
}

pub fn bench(args: &BenchArgs) -> AppResult<()> {
    let model = ServedModel::load(&args.model)?;
    let mut config = DecodeConfig::default();
    if let Some(t) = args.decode.iterations {
        config.iterations = t;
    }
    if let Some(order) = &args.decode.order {
        config.group_order = parse_group_order(order)?;
    }
    if let Some(p) = args.decode.predictor {
        config.predictor = p;
    }
    if let Some(s) = args.decode.seed {
        config.seed = s;
    }
    let report = run_bench(&model.params, model.schema(), &args.objects, args.repeats, &config)?;
    emit(args.out.as_deref(), &to_json(&report)?)
}

pub fn serve_cmd(args: &ServeArgs) -> AppResult<()> {
    let models = args.model.iter().map(ServedModel::load).collect::<AppResult<Vec<_>>>()?;
    let extractor = args.extractor.as_deref().map(load_extractor).transpose()?;
    let state = Arc::new(AppState::new(models, extractor)?);
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .map_err(|e| AppError::Usage(format!("bad listen address: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| AppError::Internal(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| AppError::io(addr.to_string(), e))?;
        eprintln!("listening on http://{}", listener.local_addr().map_err(|e| AppError::io(addr.to_string(), e))?);
        serve(listener, state).await
    })
}

pub fn synth(args: &SynthArgs) -> AppResult<()> {
    let style = SyntheticStyle {
        min_items: args.min_items,
        max_items: args.max_items,
        ..SyntheticStyle::default()
    };
    let corpus = generate_synthetic(args.n, args.seed, &style)?;
    corpus.write_jsonl(&args.out)?;
    let schema_path = args.schema_out.clone().unwrap_or_else(|| args.out.with_extension("schema.json"));
    write_text(&schema_path, &to_json(&corpus.schema)?)
}

pub fn run(cli: &Cli) -> AppResult<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Synth(a) => synth(a),
    }
}
