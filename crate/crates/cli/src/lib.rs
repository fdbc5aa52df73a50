//! `salience` command line: scene corpora, predictor training, query
//! selection, cost accounting, heatmaps, scale-bias reports and two-stage
//! query initialization.
//!
//! Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
//! run fails.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use salience_core::filtering::{analytic_cost, measured_keep_ratio, select_queries};
use salience_core::pipeline::{
    encode_scene, evaluate_selection_bias, generate_scene, predict_corpus, predictor_for,
    read_corpus_jsonl, salience_auc, scene_targets, train_salience, training_targets, two_stage_initialize,
    write_corpus_jsonl, BiasReport, EmbeddingChoice, PipelineConfig, ScaleClass, Supervision, SyntheticScene,
    TrainConfig,
};
use salience_core::supervision::heatmap_pgm;
use salience_core::tensor::ParamStore;
use salience_core::{FilterRatios, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const RUN_RECORD: &str = "run.json";
pub const COST_HEADER: &str = "dense_ops,filtered_ops,counted_keep_ratio,closed_form_keep_ratio";
pub const METRICS_HEADER: &str = "metric,scale_class,value";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] salience_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "salience",
    version,
    about = "Salience-guided query filtering on synthetic multi-scale scenes",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the scene corpus as JSON lines (corpus.jsonl)
    Gen(Common),
    /// Train the salience predictor; writes a checkpoint, loss.csv and metrics.csv
    Train(CorpusArgs),
    /// Write the filter plan for one scene as JSON (plan.json)
    Select(SceneArgs),
    /// Write analytic and counted encoder cost as CSV (cost.csv)
    Cost(Common),
    /// Write per-level predicted and target salience maps as PGM images
    Heatmap(SceneArgs),
    /// Train salience and discrete supervision identically and report per-scale coverage (bias.csv)
    BiasReport(CorpusArgs),
    /// Write the two-stage query list for one scene as JSON (init.json)
    Init(SceneArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Select(_) => "select",
            Command::Cost(_) => "cost",
            Command::Heatmap(_) => "heatmap",
            Command::BiasReport(_) => "bias-report",
            Command::Init(_) => "init",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Gen(c) | Command::Cost(c) => c,
            Command::Train(a) | Command::BiasReport(a) => &a.common,
            Command::Select(a) | Command::Heatmap(a) | Command::Init(a) => &a.common,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EmbeddingArg {
    Relative,
    Absolute,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SupervisionArg {
    Salience,
    Discrete,
}

#[derive(Debug, Args, Serialize)]
struct Common {
    /// JSON config; defaults apply to every key it omits
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; text outputs go to standard output when omitted
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// First scene seed; also seeds training
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Level and layer ratios
    #[arg(long, value_name = "v1,v2,v3,v4:w1,w2")]
    ratios: Option<String>,
    /// IoU threshold for redundancy removal
    #[arg(long, value_name = "X")]
    nms_threshold: Option<f64>,
    #[arg(long, value_enum)]
    embedding: Option<EmbeddingArg>,
    #[arg(long, value_enum)]
    supervision: Option<SupervisionArg>,
    #[arg(long, value_enum)]
    redundancy: Option<Switch>,
    #[arg(long, value_enum)]
    fusion: Option<Switch>,
    /// Gated blocks per cross-level fusion
    #[arg(long, value_name = "N")]
    fusion_blocks: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct CorpusArgs {
    #[command(flatten)]
    common: Common,
    /// Scene corpus (JSON lines); generated from the config when omitted
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SceneArgs {
    #[command(flatten)]
    common: Common,
    /// Predictor checkpoint written by `train` (the .bin file; its .json sidecar sits next to it)
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Scene index; the scene seed is `seed + index`
    #[arg(long, default_value_t = 0)]
    scene: u64,
}

/// Parses `args` (program name first) and runs, printing to the process's
/// standard streams.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{e}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(msg)) => {
            let usage = Cli::command().render_usage();
            let _ = writeln!(err, "error: {msg}\n\n{usage}");
            EXIT_USAGE
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn read_file(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// File config (if any) with flag overrides applied, validated.
fn resolve_config(common: &Common) -> CliResult<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Usage(format!("config file {} not found", path.display())));
            }
            let text = read_file(path)?;
            serde_json::from_str::<PipelineConfig>(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(r) = &common.ratios {
        cfg.ratios = FilterRatios::parse(r).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(x) = common.nms_threshold {
        cfg.nms_threshold = x;
    }
    if let Some(e) = common.embedding {
        cfg.embedding = match e {
            EmbeddingArg::Relative => EmbeddingChoice::Relative,
            EmbeddingArg::Absolute => EmbeddingChoice::Absolute,
            EmbeddingArg::None => EmbeddingChoice::None,
        };
    }
    if let Some(s) = common.supervision {
        cfg.train.supervision = match s {
            SupervisionArg::Salience => Supervision::Salience,
            SupervisionArg::Discrete => Supervision::Discrete,
        };
    }
    if let Some(r) = common.redundancy {
        cfg.redundancy = r.on();
    }
    if let Some(f) = common.fusion {
        cfg.fusion_enabled = f.on();
    }
    if let Some(n) = common.fusion_blocks {
        cfg.fusion.blocks = n;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

/// Where a run's outputs go: files under `dir`, or standard output for text
/// when no directory was given.
struct Sink<'a> {
    dir: Option<PathBuf>,
    stdout: &'a mut dyn Write,
}

impl Sink<'_> {
    fn file(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let Some(dir) = &self.dir else {
            return Err(CliError::Usage(format!("--out is required to write {name}")));
        };
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|source| CliError::Io { path, source })
    }

    /// Writes `name` under the output directory, or prints it.
    fn text(&mut self, name: &str, text: &str) -> CliResult<()> {
        if self.dir.is_some() {
            return self.file(name, text.as_bytes());
        }
        self.stdout
            .write_all(text.as_bytes())
            .map_err(|source| CliError::Io {
                path: PathBuf::from("<stdout>"),
                source,
            })
    }

    fn note(&mut self, line: &str) {
        if self.dir.is_some() {
            let _ = writeln!(self.stdout, "{line}");
        }
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    subcommand: &'a str,
    #[serde(flatten)]
    args: RunArgs<'a>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum RunArgs<'a> {
    Common(&'a Common),
    Corpus(&'a CorpusArgs),
    Scene(&'a SceneArgs),
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(salience_core::Error::from)?;
    s.push('\n');
    Ok(s)
}

fn execute(command: &Command, stdout: &mut dyn Write) -> CliResult<()> {
    let common = command.common();
    let cfg = resolve_config(common)?;
    let mut sink = Sink {
        dir: common.out.clone(),
        stdout,
    };
    if let Some(dir) = &sink.dir {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.clone(),
            source,
        })?;
        let args = match command {
            Command::Gen(c) | Command::Cost(c) => RunArgs::Common(c),
            Command::Train(a) | Command::BiasReport(a) => RunArgs::Corpus(a),
            Command::Select(a) | Command::Heatmap(a) | Command::Init(a) => RunArgs::Scene(a),
        };
        let record = RunRecord {
            subcommand: command.name(),
            args,
        };
        sink.file(RESOLVED_CONFIG, to_json(&cfg)?.as_bytes())?;
        sink.file(RUN_RECORD, to_json(&record)?.as_bytes())?;
    }
    match command {
        Command::Gen(_) => gen(&cfg, &mut sink),
        Command::Train(a) => train(&cfg, a, &mut sink),
        Command::Select(a) => select(&cfg, a, &mut sink),
        Command::Cost(_) => cost(&cfg, &mut sink),
        Command::Heatmap(a) => heatmap(&cfg, a, &mut sink),
        Command::BiasReport(a) => bias_report(&cfg, a, &mut sink),
        Command::Init(a) => init(&cfg, a, &mut sink),
    }
}

fn load_corpus(cfg: &PipelineConfig, path: Option<&Path>) -> CliResult<Vec<SyntheticScene>> {
    let Some(path) = path else {
        return Ok(cfg.corpus()?);
    };
    let records = read_corpus_jsonl(&read_file(path)?)?;
    if records.is_empty() {
        return Err(CliError::Run(salience_core::Error::Contract(format!(
            "corpus {} holds no scenes",
            path.display()
        ))));
    }
    Ok(records
        .iter()
        .map(|r| SyntheticScene::from_record(r, &cfg.pyramid, &cfg.scene))
        .collect::<salience_core::Result<_>>()?)
}

fn sidecar(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Model parameters: random from the run seed, with predictor weights from
/// `checkpoint` when given.
fn model_params(cfg: &PipelineConfig, checkpoint: Option<&Path>) -> CliResult<ParamStore> {
    let mut store = cfg.init_model_params()?;
    if let Some(bin) = checkpoint {
        let json = sidecar(bin);
        for path in [bin, json.as_path()] {
            if !path.is_file() {
                return Err(CliError::Usage(format!("checkpoint file {} not found", path.display())));
            }
        }
        let loaded = ParamStore::load(bin, &json)?;
        for (name, value) in loaded.iter() {
            let expected = store.get(name)?;
            if expected.shape() != value.shape() {
                return Err(CliError::Run(salience_core::Error::Shape {
                    op: "load checkpoint",
                    lhs: expected.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                }));
            }
            store.insert(name, value.clone());
        }
    }
    Ok(store)
}

fn scene_for(cfg: &PipelineConfig, index: u64) -> CliResult<SyntheticScene> {
    Ok(generate_scene(cfg.seed.wrapping_add(index), &cfg.pyramid, &cfg.scene)?)
}

fn gen(cfg: &PipelineConfig, sink: &mut Sink) -> CliResult<()> {
    let corpus = cfg.corpus()?;
    sink.text("corpus.jsonl", &write_corpus_jsonl(&corpus)?)?;
    sink.note(&format!("wrote {} scenes", corpus.len()));
    Ok(())
}

fn metrics_csv(rows: &[(String, &str, f64)]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for (metric, class, value) in rows {
        s.push_str(&format!("{metric},{class},{value}\n"));
    }
    s
}

fn train(cfg: &PipelineConfig, args: &CorpusArgs, sink: &mut Sink) -> CliResult<()> {
    if sink.dir.is_none() {
        return Err(CliError::Usage("train needs --out for its checkpoint".into()));
    }
    let corpus = load_corpus(cfg, args.corpus.as_deref())?;
    let outcome = train_salience(&corpus, &cfg.train)?;
    let dir = sink.dir.clone().expect("checked above");
    let bin = dir.join("predictor.bin");
    outcome.params.save(&bin, &sidecar(&bin))?;

    let mut loss = String::from("epoch,loss\n");
    loss.push_str(&format!("0,{}\n", outcome.initial_loss));
    for (e, l) in outcome.epoch_losses.iter().enumerate() {
        loss.push_str(&format!("{},{}\n", e + 1, l));
    }
    sink.file("loss.csv", loss.as_bytes())?;

    let predictor = predictor_for(&cfg.pyramid);
    let preds = predict_corpus(&predictor, &outcome.params, &corpus)?;
    let targets = training_targets(&corpus, &cfg.train)?;
    // undefined when the corpus has no foreground or no background
    let auc = salience_auc(&preds, &targets).unwrap_or(f64::NAN);
    let rows = vec![
        ("initial_loss".to_string(), "all", outcome.initial_loss),
        ("final_loss".to_string(), "all", outcome.final_loss()),
        ("roc_auc".to_string(), "all", auc),
    ];
    sink.file("metrics.csv", metrics_csv(&rows).as_bytes())?;
    sink.note(&format!(
        "initial_loss={} final_loss={} roc_auc={auc}",
        outcome.initial_loss,
        outcome.final_loss()
    ));
    Ok(())
}

fn select(cfg: &PipelineConfig, args: &SceneArgs, sink: &mut Sink) -> CliResult<()> {
    let scene = scene_for(cfg, args.scene)?;
    let params = model_params(cfg, args.checkpoint.as_deref())?;
    let maps = predictor_for(&cfg.pyramid).predict(&params, &scene.pyramid)?;
    let plan = select_queries(&maps, &cfg.ratios)?;
    sink.text("plan.json", &to_json(&plan)?)?;
    sink.note(&format!("selected {} query-layer slots", plan.total_selected()));
    Ok(())
}

fn cost(cfg: &PipelineConfig, sink: &mut Sink) -> CliResult<()> {
    let shapes = cfg.pyramid.shapes();
    let report = analytic_cost(
        &shapes,
        &cfg.ratios,
        cfg.encoder.channels,
        cfg.encoder.heads,
        cfg.sampling_points,
        cfg.encoder.layers,
    )?;
    // selection counts depend only on ratios and shapes
    let zeros: Vec<Tensor> = shapes.iter().map(|&(h, w)| Tensor::zeros([h, w])).collect();
    let plan = select_queries(&zeros, &cfg.ratios)?;
    let keep = measured_keep_ratio(&plan, &cfg.pyramid.strides)?;
    let csv = format!(
        "{COST_HEADER}\n{},{},{},{}\n",
        report.dense_ops, report.filtered_ops, keep.counted, keep.closed_form
    );
    sink.text("cost.csv", &csv)?;
    Ok(())
}

fn heatmap(cfg: &PipelineConfig, args: &SceneArgs, sink: &mut Sink) -> CliResult<()> {
    if sink.dir.is_none() {
        return Err(CliError::Usage("heatmap needs --out for its images".into()));
    }
    let scene = scene_for(cfg, args.scene)?;
    let params = model_params(cfg, args.checkpoint.as_deref())?;
    let maps = predictor_for(&cfg.pyramid).predict(&params, &scene.pyramid)?;
    let targets = scene_targets(&scene, &cfg.pyramid.strides, cfg.train.supervision)?;
    for (l, (pred, target)) in maps.iter().zip(&targets.maps).enumerate() {
        sink.file(&format!("salience_l{l}.pgm"), &heatmap_pgm(pred)?)?;
        sink.file(&format!("target_l{l}.pgm"), &heatmap_pgm(target)?)?;
    }
    sink.note(&format!("wrote {} levels", maps.len()));
    Ok(())
}

fn bias_rows(label: &str, report: &BiasReport, rows: &mut Vec<(String, &'static str, f64)>) {
    for c in &report.classes {
        rows.push((format!("{label}_coverage"), c.scale.as_str(), c.coverage));
        rows.push((format!("{label}_mean_selected"), c.scale.as_str(), c.mean_selected));
    }
}

fn bias_report(cfg: &PipelineConfig, args: &CorpusArgs, sink: &mut Sink) -> CliResult<()> {
    let corpus = load_corpus(cfg, args.corpus.as_deref())?;
    let predictor = predictor_for(&cfg.pyramid);
    let mut rows = Vec::new();
    let mut small = Vec::new();
    for (label, supervision) in [("salience", Supervision::Salience), ("discrete", Supervision::Discrete)] {
        let train_cfg = TrainConfig {
            supervision,
            ..cfg.train.clone()
        };
        let outcome = train_salience(&corpus, &train_cfg)?;
        let report = evaluate_selection_bias(&predictor, &outcome.params, &corpus, &cfg.ratios)?;
        bias_rows(label, &report, &mut rows);
        small.push(report.get(ScaleClass::Small).map_or(0.0, |c| c.coverage));
    }
    rows.push(("small_coverage_gap".to_string(), "small", small[0] - small[1]));
    sink.text("bias.csv", &metrics_csv(&rows))?;
    sink.note(&format!("small-object coverage gap {}", small[0] - small[1]));
    Ok(())
}

#[derive(Serialize)]
struct InitQuery {
    level: usize,
    i: usize,
    j: usize,
    score: f64,
}

#[derive(Serialize)]
struct InitReport {
    scene_seed: u64,
    k: usize,
    nms_threshold: f64,
    redundancy: bool,
    queries: Vec<InitQuery>,
}

fn init(cfg: &PipelineConfig, args: &SceneArgs, sink: &mut Sink) -> CliResult<()> {
    let scene = scene_for(cfg, args.scene)?;
    let params = model_params(cfg, args.checkpoint.as_deref())?;
    let encoded = encode_scene(&scene, &cfg.model(), &params, &cfg.ratios, &cfg.flags())?;
    let kept = two_stage_initialize(
        &encoded.salience,
        &cfg.pyramid.strides,
        cfg.two_stage_k,
        cfg.nms_threshold,
        cfg.redundancy,
    )?;
    let report = InitReport {
        scene_seed: scene.seed,
        k: cfg.two_stage_k,
        nms_threshold: cfg.nms_threshold,
        redundancy: cfg.redundancy,
        queries: kept
            .iter()
            .map(|(p, s)| InitQuery {
                level: p.level,
                i: p.i,
                j: p.j,
                score: *s,
            })
            .collect(),
    };
    sink.text("init.json", &to_json(&report)?)?;
    sink.note(&format!("kept {} of {} queries", report.queries.len(), cfg.two_stage_k));
    Ok(())
}
