//! Command-line front end. Every subcommand reads and writes files in a
//! fixed run-directory layout:
//!
//! ```text
//! <runs>/<config-hash>-s<seed>/
//!     config.json  split.json  metrics.jsonl  report.json  manifest.json
//!     checkpoints/step_XXXXXXXX.ckpt (+ .json sidecar)
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    export_embeddings, line_chart_svg, project_2d, write_novelty_csv, EmbeddingTable, NoveltyModel,
    ProjectionMethod, NOVELTY_PERCENTILE,
};
use crate::dataset::{
    open_corpus, stratified_split, synth_corpus_sized, write_cache, write_synth_raw, LabeledCorpus, LabeledSample,
    SplitSpec,
};
use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, Network};
use crate::preprocess::{binary_to_image_sized, ByteStream, IMAGE_SIZE};
use crate::trainer::{evaluate, latest_checkpoint, read_metrics, TrainConfig, TrainMode, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "malimg", version, about = "Malware family classification from byte images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert raw binaries into a cached image corpus.
    Convert(ConvertArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a run's checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Export eval-mode embeddings as CSV.
    Embed(EmbedArgs),
    /// Project an embedding table to 2D (CSV and SVG scatter).
    Project(ProjectArgs),
    /// Score query binaries for novelty against a reference embedding table.
    Detect(DetectArgs),
    /// Generate a synthetic corpus with family-specific byte textures.
    Synth(SynthArgs),
    /// Overlay the logged loss curves of several runs as SVG.
    PlotLoss(PlotLossArgs),
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Input files or directories (unlabeled; family "unlabeled").
    pub inputs: Vec<PathBuf>,
    /// `path,family` CSV; paths are relative to --root.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Base directory for manifest paths [default: the manifest's directory].
    #[arg(long)]
    pub root: Option<PathBuf>,
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = IMAGE_SIZE)]
    pub image_size: usize,
    /// Also dump every image as 8-bit PNG under `png/`.
    #[arg(long)]
    pub png: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 400×400 input, three same convs, six valid convs, 61 families.
    Default,
    /// 100×100 input, scaled-down conv plan.
    Desk,
    /// 32×32 input for smoke tests.
    Tiny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Composite,
    #[value(name = "ce_only", alias = "ce-only")]
    CeOnly,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Composite => TrainMode::Composite,
            ModeArg::CeOnly => TrainMode::CeOnly,
        }
    }
}

/// Flags override the config file, which overrides the preset.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Corpus directory (image cache or raw files with manifest.csv).
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON training config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Base model shape before config and flags.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Continue from the latest checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// composite = cross-entropy + λ·smooth-L1 regression with EMA teacher; ce_only = cross-entropy alone [default: composite]
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Seed for initialization, split, batches, masks and dropout [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 1000]
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// [default: 32]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adam step size [default: 1e-4]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// [default: 500]
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Per-family train share [default: 0.9]
    #[arg(long)]
    pub train_fraction: Option<f64>,
    /// Smooth-L1 knee β [default: 0.5]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Weight λ of the regression term [default: 1]
    #[arg(long)]
    pub lambda_weight: Option<f64>,
    /// Standardize teacher targets per sample [default: false]
    #[arg(long)]
    pub normalize_targets: Option<bool>,
    /// EMA decay τ of the teacher [default: 0.999]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Square mask block edge in pixels [default: 16]
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Share of blocks zeroed in the student's input [default: 0.5]
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    /// Dropout after every conv and residual block [default: 0.2]
    #[arg(long)]
    pub dropout_rate: Option<f64>,
    /// Leaky-ReLU negative slope [default: 0.01]
    #[arg(long)]
    pub leaky_slope: Option<f64>,
    /// Output classes [default: number of corpus families]
    #[arg(long)]
    pub families: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct RunSelect {
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint file [default: latest in the run]
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Corpus directory [default: the one the run trained on]
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub select: RunSelect,
    /// Report path [default: <run>/eval_<split>.json]
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub select: RunSelect,
    /// [default: <run>/embeddings_<split>.csv]
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Pca,
    External,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Embedding CSV.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Pca)]
    pub method: MethodArg,
    /// Shell command for --method external: embedding CSV on stdin, `source_id,family_id,x,y` on stdout.
    #[arg(long)]
    pub projector: Option<String>,
    /// Projection CSV [default: input with `.proj.csv`]
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Scatter plot [default: output with `.svg`]
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Run whose model embeds the queries.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reference embedding CSV (thresholds come only from this table).
    #[arg(long)]
    pub reference: PathBuf,
    /// Query binaries.
    #[arg(required = true)]
    pub queries: Vec<PathBuf>,
    /// Member-distance percentile for each family's threshold.
    #[arg(long, default_value_t = NOVELTY_PERCENTILE)]
    pub percentile: f64,
    /// CSV report [default: stdout]
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub families: usize,
    #[arg(long, default_value_t = 200)]
    pub per_family: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write raw binaries and manifest.csv instead of an image cache.
    #[arg(long)]
    pub raw: bool,
    #[arg(long, default_value_t = IMAGE_SIZE)]
    pub image_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Ce,
    D2v,
    Composite,
}

#[derive(Debug, Args)]
pub struct PlotLossArgs {
    /// Run directories to overlay.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = MetricArg::Composite)]
    pub metric: MetricArg,
    #[arg(long)]
    pub log_y: bool,
    #[arg(long, short)]
    pub output: PathBuf,
}

/// Record of one command's inputs and outputs, written last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<ArtifactEntry>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Convert(a) => cmd_convert(&a),
        Command::Train(a) => cmd_train(&a).map(|dir| println!("{}", dir.display())),
        Command::Eval(a) => cmd_eval(&a),
        Command::Embed(a) => cmd_embed(&a),
        Command::Project(a) => cmd_project(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::PlotLoss(a) => cmd_plot_loss(&a),
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> Result<ArtifactEntry> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(ArtifactEntry {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        bytes: bytes.len() as u64,
    })
}

/// Writes `contents` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct ManifestBuilder {
    command: String,
    config_hash: Option<String>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: f64,
    clock: Instant,
}

impl ManifestBuilder {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config_hash: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: unix_now(),
            clock: Instant::now(),
        }
    }

    fn write(self, path: &Path) -> Result<()> {
        let mut outputs = self.outputs;
        outputs.sort();
        outputs.dedup();
        let outputs = outputs.iter().map(|p| sha256_file(p)).collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            inputs: self.inputs,
            outputs,
            started_unix: self.started,
            finished_unix: unix_now(),
            elapsed_secs: self.clock.elapsed().as_secs_f64(),
        };
        write_atomic(path, &serde_json::to_vec_pretty(&manifest)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// convert

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut stack = vec![p.clone()];
            while let Some(dir) = stack.pop() {
                let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
                    .map_err(|e| Error::io(&dir, e))?
                    .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
                    .collect::<Result<_>>()?;
                entries.sort();
                for e in entries {
                    if e.is_dir() {
                        stack.push(e);
                    } else {
                        out.push(e);
                    }
                }
            }
        } else {
            out.push(p.clone());
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    family: String,
}

pub fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("convert");
    // (file on disk, source id, family)
    let mut items: Vec<(PathBuf, String, String)> = Vec::new();
    if let Some(manifest) = &a.manifest {
        let root = a
            .root
            .clone()
            .unwrap_or_else(|| manifest.parent().map(Path::to_path_buf).unwrap_or_default());
        let mut rd = csv::Reader::from_path(manifest).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::MissingFile(manifest.clone()),
            _ => Error::Csv(e),
        })?;
        for (i, row) in rd.deserialize::<ManifestRow>().enumerate() {
            let row = row?;
            let family = row.family.trim().to_string();
            if family.is_empty() {
                return Err(Error::UnknownFamily { row: i + 1, path: row.path });
            }
            items.push((root.join(&row.path), row.path, family));
        }
        mb.inputs.push(manifest.clone());
    }
    for p in collect_inputs(&a.inputs)? {
        let id = p.to_string_lossy().into_owned();
        items.push((p, id, "unlabeled".into()));
    }
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    mb.inputs.extend(items.iter().map(|(p, _, _)| p.clone()));

    let results: Vec<Result<crate::preprocess::GrayImage>> = items
        .par_iter()
        .map(|(path, id, _)| {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            binary_to_image_sized(&ByteStream::new(bytes, id.clone()), a.image_size)
        })
        .collect();

    let mut names: Vec<String> = items.iter().map(|(_, _, f)| f.clone()).collect();
    names.sort();
    names.dedup();
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    for ((path, id, family), r) in items.iter().zip(results) {
        match r {
            Ok(image) => samples.push(LabeledSample {
                image,
                family_id: names.binary_search(family).expect("family collected"),
                source_id: id.clone(),
            }),
            Err(e) => {
                eprintln!("error: {}: {e}", path.display());
                failures.push(e);
            }
        }
    }
    fs::create_dir_all(&a.output).map_err(|e| Error::io(&a.output, e))?;
    let corpus = LabeledCorpus {
        samples,
        family_names: names,
    };
    mb.outputs.extend(write_cache(&a.output, &corpus)?);
    if a.png {
        let dir = a.output.join("png");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, s) in corpus.samples.iter().enumerate() {
            let p = dir.join(format!("{i:06}.png"));
            s.image.save_png(&p)?;
            mb.outputs.push(p);
        }
    }
    mb.write(&a.output.join(MANIFEST_FILE))?;
    println!("converted {} of {} inputs into {}", corpus.len(), items.len(), a.output.display());
    match failures.into_iter().next() {
        None => Ok(()),
        Some(first) => {
            let n = items.len() - corpus.len();
            eprintln!("{n} input(s) failed");
            Err(first)
        }
    }
}

// ---------------------------------------------------------------------------
// train

fn base_model(preset: Preset, families: usize) -> ModelConfig {
    match preset {
        Preset::Default => ModelConfig {
            families,
            ..ModelConfig::default()
        },
        Preset::Desk => ModelConfig::desk(families),
        Preset::Tiny => ModelConfig::tiny(families),
    }
}

/// Merges `overlay` into `base` key by key (objects recursively).
fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge_json(b.entry(k).or_insert(serde_json::Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, then config file, then flags. `corpus_families` fills
/// `model.families` unless the file or a flag sets it.
pub fn resolve_train_config(a: &TrainArgs, corpus_families: usize) -> Result<TrainConfig> {
    let mut base = TrainConfig {
        model: base_model(a.preset, corpus_families),
        ..TrainConfig::default()
    };
    // keep the mask grid aligned with the smaller inputs
    match a.preset {
        Preset::Default => {}
        Preset::Desk => base.mask.block_size = 10,
        Preset::Tiny => base.mask.block_size = 8,
    }
    let mut value = serde_json::to_value(&base)?;
    if let Some(path) = &a.config {
        let file: serde_json::Value = read_json(path)?;
        if !file.is_object() {
            return Err(Error::config("config", "top level must be a JSON object"));
        }
        merge_json(&mut value, file);
    }
    let mut cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
    macro_rules! set {
        ($flag:expr => $($field:tt)+) => {
            if let Some(v) = $flag {
                cfg.$($field)+ = v.into();
            }
        };
    }
    set!(a.mode => mode);
    set!(a.seed => seed);
    set!(a.max_steps => max_steps);
    set!(a.batch_size => batch_size);
    set!(a.learning_rate => learning_rate);
    set!(a.checkpoint_every => checkpoint_every);
    set!(a.train_fraction => train_fraction);
    set!(a.beta => loss.beta);
    set!(a.lambda_weight => loss.lambda_weight);
    set!(a.normalize_targets => loss.normalize_targets);
    set!(a.tau => ema.tau);
    set!(a.block_size => mask.block_size);
    set!(a.mask_ratio => mask.mask_ratio);
    set!(a.dropout_rate => model.dropout_rate);
    set!(a.leaky_slope => model.leaky_slope);
    set!(a.families => model.families);
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(cfg)?)))
}

pub fn run_dir_name(cfg: &TrainConfig) -> Result<String> {
    Ok(format!("{}-s{}", &config_hash(cfg)?[..12], cfg.seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub corpus: PathBuf,
    pub train_fraction: f64,
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub seed: u64,
    pub steps: u64,
    pub final_ce: Option<f64>,
    pub final_d2v: Option<f64>,
    pub test: Option<crate::trainer::EvalReport>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<PathBuf> {
    let mut mb = ManifestBuilder::new("train");
    // image size is only known after the config resolves; a cache carries its own
    let probe = resolve_train_config(a, 1)?;
    let corpus = open_corpus(&a.corpus, probe.model.input_size)?;
    let cfg = resolve_train_config(a, corpus.families())?;
    let hash = config_hash(&cfg)?;
    let dir = a.runs.join(run_dir_name(&cfg)?);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    mb.config_hash = Some(hash);
    mb.seed = Some(cfg.seed);
    mb.inputs.push(a.corpus.clone());
    mb.inputs.extend(a.config.clone());

    let (train, test) = stratified_split(
        &corpus,
        &SplitSpec {
            train_fraction: cfg.train_fraction,
            seed: cfg.seed,
        },
    )?;
    let trainer = Trainer::new(cfg.clone())?;
    let ckpt_dir = dir.join("checkpoints");
    let resume = if a.resume {
        match latest_checkpoint(&ckpt_dir)? {
            Some(p) => {
                log::info!("resuming from {}", p.display());
                Some(trainer.load_state(&p)?)
            }
            None => None,
        }
    } else {
        if ckpt_dir.exists() {
            fs::remove_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        }
        let _ = fs::remove_file(dir.join(METRICS_FILE));
        None
    };

    let config_path = dir.join(CONFIG_FILE);
    write_json(&config_path, &cfg)?;
    let split_path = dir.join(SPLIT_FILE);
    let corpus_path = fs::canonicalize(&a.corpus).unwrap_or_else(|_| a.corpus.clone());
    write_json(
        &split_path,
        &SplitRecord {
            corpus: corpus_path,
            train_fraction: cfg.train_fraction,
            seed: cfg.seed,
            train: train.samples.iter().map(|s| s.source_id.clone()).collect(),
            test: test.samples.iter().map(|s| s.source_id.clone()).collect(),
        },
    )?;

    let outcome = trainer.train(&train, Some(&test), Some(&dir), resume)?;
    let metrics_path = dir.join(METRICS_FILE);
    let logged = if metrics_path.exists() { read_metrics(&metrics_path)? } else { Vec::new() };
    let report = TrainReport {
        mode: cfg.mode,
        seed: cfg.seed,
        steps: outcome.state.step,
        final_ce: logged.last().map(|m| m.ce),
        final_d2v: logged.last().map(|m| m.d2v),
        test: outcome.report,
    };
    if let Some(t) = &report.test {
        println!("test accuracy {:.4} ({}/{})", t.accuracy, t.correct, t.total);
    }
    let report_path = dir.join(REPORT_FILE);
    write_json(&report_path, &report)?;

    mb.outputs.extend([config_path, split_path, report_path]);
    if metrics_path.exists() {
        mb.outputs.push(metrics_path);
    }
    if let Ok(entries) = fs::read_dir(&ckpt_dir) {
        mb.outputs.extend(entries.filter_map(|e| e.ok().map(|e| e.path())));
    }
    mb.write(&dir.join(MANIFEST_FILE))?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// eval / embed

struct LoadedRun {
    trainer: Trainer,
    student: crate::model::ModelParams<f32>,
    corpus: LabeledCorpus,
    checkpoint: PathBuf,
    corpus_dir: PathBuf,
}

fn load_run(sel: &RunSelect) -> Result<LoadedRun> {
    let cfg: TrainConfig = read_json(&sel.run.join(CONFIG_FILE))?;
    let split: SplitRecord = read_json(&sel.run.join(SPLIT_FILE))?;
    let trainer = Trainer::new(cfg)?;
    let checkpoint = match &sel.checkpoint {
        Some(p) => p.clone(),
        None => {
            let dir = sel.run.join("checkpoints");
            latest_checkpoint(&dir)?.ok_or(Error::MissingFile(dir))?
        }
    };
    let student = trainer.load_state(&checkpoint)?.student;
    let corpus_dir = sel.corpus.clone().unwrap_or_else(|| split.corpus.clone());
    let full = open_corpus(&corpus_dir, trainer.config().model.input_size)?;
    let corpus = match sel.split {
        SplitArg::All => full,
        SplitArg::Train | SplitArg::Test => {
            let ids = if sel.split == SplitArg::Train { &split.train } else { &split.test };
            full.subset(&ids.iter().cloned().collect())
        }
    };
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(LoadedRun {
        trainer,
        student,
        corpus,
        checkpoint,
        corpus_dir,
    })
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("eval");
    let run = load_run(&a.select)?;
    let report = evaluate(run.trainer.network(), &run.student, &run.corpus)?;
    println!("accuracy {:.4} ({}/{})", report.accuracy, report.correct, report.total);
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| a.select.run.join(format!("eval_{}.json", split_name(a.select.split))));
    write_json(&out, &report)?;
    mb.inputs.extend([run.checkpoint, run.corpus_dir]);
    mb.outputs.push(out.clone());
    mb.write(&sidecar_manifest(&out))
}

fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn cmd_embed(a: &EmbedArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("embed");
    let run = load_run(&a.select)?;
    let table = export_embeddings(run.trainer.network(), &run.student, &run.corpus)?;
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| a.select.run.join(format!("embeddings_{}.csv", split_name(a.select.split))));
    table.save(&out)?;
    println!("{} rows × {} values → {}", table.len(), table.dim(), out.display());
    mb.inputs.extend([run.checkpoint, run.corpus_dir]);
    mb.outputs.push(out.clone());
    mb.write(&sidecar_manifest(&out))
}

// ---------------------------------------------------------------------------
// project / detect

pub fn cmd_project(a: &ProjectArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("project");
    let table = EmbeddingTable::load(&a.input)?;
    let method = match a.method {
        MethodArg::Pca => ProjectionMethod::Pca,
        MethodArg::External => ProjectionMethod::External,
    };
    let proj = project_2d(&table, method, a.projector.as_deref())?;
    let out = a.output.clone().unwrap_or_else(|| a.input.with_extension("proj.csv"));
    let svg = a.svg.clone().unwrap_or_else(|| out.with_extension("svg"));
    proj.save(&out)?;
    let title = match proj.explained_variance {
        Some(v) => format!("PCA of embeddings ({:.1}% variance)", 100.0 * v),
        None => "projected embeddings".to_string(),
    };
    write_atomic(&svg, proj.to_svg(&title).as_bytes())?;
    mb.inputs.push(a.input.clone());
    mb.outputs.extend([out.clone(), svg]);
    mb.write(&sidecar_manifest(&out))
}

pub fn cmd_detect(a: &DetectArgs) -> Result<()> {
    if !(a.percentile > 0.0 && a.percentile <= 100.0) {
        return Err(Error::config("percentile", "must lie in (0, 100]"));
    }
    let cfg: TrainConfig = read_json(&a.run.join(CONFIG_FILE))?;
    let trainer = Trainer::new(cfg)?;
    let checkpoint = match &a.checkpoint {
        Some(p) => p.clone(),
        None => {
            let dir = a.run.join("checkpoints");
            latest_checkpoint(&dir)?.ok_or(Error::MissingFile(dir))?
        }
    };
    let student = trainer.load_state(&checkpoint)?.student;
    let reference = EmbeddingTable::load(&a.reference)?;
    let model = NoveltyModel::fit(&reference, a.percentile)?;
    let net: &Network = trainer.network();
    let size = trainer.config().model.input_size;
    let reports = a
        .queries
        .iter()
        .map(|q| {
            let bytes = fs::read(q).map_err(|e| Error::io(q, e))?;
            let id = q.to_string_lossy().into_owned();
            let image = binary_to_image_sized(&ByteStream::new(bytes, id.clone()), size)?;
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            let emb = net.encoder_forward(&student, &image, Mode::Eval, &mut rng)?;
            let probs = net.head_forward(&student, &emb, Mode::Eval, &mut rng)?;
            model.score(&id, &emb.values, Some(probs.max_prob()))
        })
        .collect::<Result<Vec<_>>>()?;
    match &a.output {
        Some(path) => {
            let mut buf = Vec::new();
            write_novelty_csv(&reports, &mut buf)?;
            write_atomic(path, &buf)
        }
        None => write_novelty_csv(&reports, std::io::stdout().lock()),
    }
}

// ---------------------------------------------------------------------------
// synth / plot-loss

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut mb = ManifestBuilder::new("synth");
    mb.seed = Some(a.seed);
    if a.raw {
        mb.outputs.extend(write_synth_raw(&a.output, a.families, a.per_family, a.seed)?);
    } else {
        let corpus = synth_corpus_sized(a.families, a.per_family, a.seed, a.image_size)?;
        mb.outputs.extend(write_cache(&a.output, &corpus)?);
    }
    println!("{} samples → {}", a.families * a.per_family, a.output.display());
    mb.write(&a.output.join(MANIFEST_FILE))
}

pub fn cmd_plot_loss(a: &PlotLossArgs) -> Result<()> {
    let mut curves = Vec::new();
    for run in &a.runs {
        let metrics = read_metrics(&run.join(METRICS_FILE))?;
        let label = match read_json::<TrainConfig>(&run.join(CONFIG_FILE)) {
            Ok(c) => format!("{} (seed {})", c.mode.as_str(), c.seed),
            Err(_) => run.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        };
        let pts = metrics
            .iter()
            .map(|m| {
                let y = match a.metric {
                    MetricArg::Ce => m.ce,
                    MetricArg::D2v => m.d2v,
                    MetricArg::Composite => m.composite,
                };
                (m.step as f64, y)
            })
            .collect();
        curves.push((label, pts));
    }
    let title = match a.metric {
        MetricArg::Ce => "cross-entropy per step",
        MetricArg::D2v => "embedding regression loss per step",
        MetricArg::Composite => "training loss per step",
    };
    write_atomic(&a.output, line_chart_svg(title, &curves, a.log_y).as_bytes())
}
