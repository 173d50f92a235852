//! Command-line front end. Every command that writes files also writes a
//! manifest next to its primary output, and `replay` re-runs a manifest and
//! compares output hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::blocks::{diff, BlockedTensor, CoefficientSet, TaskVector};
use crate::data::{generate, kshot, load_idx, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::evalx::{self, accuracy, AccuracyRow, EvalReport};
use crate::intrinsic::{make_random_basis, make_tv_basis, run_subspace_experiment, write_points_csv, SubspacePoint};
use crate::learn::{self, FinetuneConfig, Learner, NegationSearch, ShuffleMode, TrainConfig};
use crate::lora::{finetune_lora, LoraConfig};
use crate::net::{Batch, ModelConfig, ToyModel};
use crate::optim::AdamWConfig;
use crate::select::{self, GradientMode, SelectionPlan, Strategy};
use crate::tta::{adapt_entropy, adapt_ufm, UfmConfig};
use crate::tvck::{self, Container, TvckObject};

#[derive(Debug, Parser)]
#[command(name = "tvkit", version, about = "Learn anisotropic task-vector compositions on toy models")]
pub struct Cli {
    /// Worker threads for batch evaluation.
    #[arg(long, env = "TVKIT_THREADS", global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write randomly initialised weights.
    Init(InitArgs),
    /// Generate (or ingest from IDX) a dataset and cache it as TVCK.
    Gen(GenArgs),
    /// Fine-tune weights on a task (full or LoRA).
    Finetune(FinetuneArgs),
    /// Task vector = fine-tuned − base.
    Diff(DiffArgs),
    /// Learn composition coefficients.
    #[command(subcommand)]
    Learn(LearnCmd),
    /// Evaluation reports.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Re-run a manifest and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct InitArgs {
    #[arg(long)]
    pub in_dim: usize,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 16)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub embedding_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    /// Task spec JSON.
    #[arg(long, conflicts_with_all = ["idx_images", "idx_labels"])]
    pub task: Option<PathBuf>,
    #[arg(long, requires = "idx_labels")]
    pub idx_images: Option<PathBuf>,
    #[arg(long, requires = "idx_images")]
    pub idx_labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Task spec JSON or cached dataset TVCK.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, allow_hyphen_values = true, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    pub wd: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fine-tune rank-r factors instead; the output is a factored task vector.
    #[arg(long)]
    pub lora_rank: Option<usize>,
    /// Fine-tune the linearised model around the base weights.
    #[arg(long)]
    pub linearized: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DiffArgs {
    #[arg(long)]
    pub ft: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    /// Task vector id (defaults to a fingerprint-derived id).
    #[arg(long)]
    pub id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CommonLearn {
    #[arg(long)]
    pub base: PathBuf,
    /// Task vector TVCK files.
    #[arg(long = "tv")]
    pub tvs: Vec<PathBuf>,
    #[arg(long, allow_hyphen_values = true, default_value_t = 1e-1)]
    pub lr: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 1e-1)]
    pub wd: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
    pub l1: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    /// Random partitions per block.
    #[arg(long = "K", default_value_t = 1)]
    pub partitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coefficient report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Composed weights (defaults to the report path with a `.tvck` extension).
    #[arg(long)]
    pub composed: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    Random,
    Features,
    GradientWhole,
    GradientBlockwise,
}

#[derive(Debug, Args, Serialize)]
pub struct Budget {
    /// Task-vector budget; without it every task vector is used.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_enum, default_value_t = StrategyArg::GradientBlockwise)]
    pub strategy: StrategyArg,
    /// Task vectors probed together by the gradient strategies (defaults to the budget).
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Per task vector, the dataset it was fine-tuned on (feature strategy).
    #[arg(long = "candidate")]
    pub candidates: Vec<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum LearnCmd {
    /// Task addition on the union of per-task data.
    Add {
        #[command(flatten)]
        common: CommonLearn,
        #[command(flatten)]
        budget: Budget,
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        #[arg(long)]
        linearized: bool,
        #[arg(long)]
        interleave: bool,
    },
    /// Task negation with a control dataset.
    Negate {
        #[command(flatten)]
        common: CommonLearn,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        control: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Search learning rates and epochs under the 95% control rule.
        #[arg(long)]
        tune: bool,
    },
    /// Few-shot adaptation on k examples per class.
    Fewshot {
        #[command(flatten)]
        common: CommonLearn,
        #[command(flatten)]
        budget: Budget,
        #[arg(long = "data")]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        /// Id of the target task; a task vector with this id is refused.
        #[arg(long)]
        target_id: String,
    },
    /// Unsupervised FixMatch test-time adaptation.
    TtaUfm {
        #[command(flatten)]
        common: CommonLearn,
        #[arg(long = "data")]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
    /// Entropy-minimisation test-time adaptation.
    TtaEntropy {
        #[command(flatten)]
        common: CommonLearn,
        #[arg(long = "data")]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisArg {
    Random,
    Taskvector,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Accuracy per dataset (and relative to fine-tuned weights).
    Acc {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        /// Fine-tuned reference weights, one per dataset.
        #[arg(long = "finetuned")]
        finetuned: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Relative accuracy from two numbers.
    Relacc {
        #[arg(long)]
        abs: f64,
        #[arg(long = "ref")]
        reference: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Target/control accuracy of edited weights.
    Negation {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        control: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise disentanglement error for every ordered pair.
    Disentangle {
        #[arg(long)]
        base: PathBuf,
        #[arg(long = "tv", required = true)]
        tvs: Vec<PathBuf>,
        /// One dataset per task vector.
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        /// Learned coefficient report covering all task vectors.
        #[arg(long, conflicts_with = "alpha")]
        coeffs: Option<PathBuf>,
        /// Isotropic coefficient instead of learned ones.
        #[arg(long)]
        alpha: Option<f32>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subspace training with random or task-vector bases.
    Intrinsic {
        #[arg(long)]
        base: PathBuf,
        #[arg(long = "tv")]
        tvs: Vec<PathBuf>,
        #[arg(long = "data")]
        data: PathBuf,
        #[arg(long, value_enum)]
        basis: BasisArg,
        /// Numbers of bases to evaluate.
        #[arg(long, num_args = 1.., required = true)]
        bases: Vec<usize>,
        #[arg(long, num_args = 1.., default_values_t = [0u64])]
        seeds: Vec<u64>,
        /// Fine-tuned reference accuracy.
        #[arg(long = "ref")]
        reference: f64,
        #[arg(long, default_value_t = 1e-1)]
        lr: f64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: String,
    /// Arguments after the program name.
    pub command: Vec<String>,
    pub threads: usize,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_clock_secs: f64,
}

impl ExperimentManifest {
    pub fn path_for(primary: &Path) -> PathBuf {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

/// What a command touched.
#[derive(Debug, Default)]
struct RunRecord {
    config: Value,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn hashes(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
    paths.iter().map(|p| Ok(FileHash { path: p.clone(), sha256: sha256_file(p)? })).collect()
}

/// Parses `argv` (including the program name), runs it, and returns the
/// process exit code. Errors are reported on stderr.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let command: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match run(cli, command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and writes its manifest.
pub fn run(cli: Cli, command: Vec<String>) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::config("--threads must be at least 1"));
    }
    if let Command::Replay(r) = &cli.command {
        return replay(&r.manifest, cli.threads);
    }
    let start = Instant::now();
    let record = dispatch(&cli)?;
    if let Some(primary) = record.outputs.first() {
        let manifest = ExperimentManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            command: strip_threads(&command),
            threads: cli.threads,
            config: record.config,
            seeds: record.seeds,
            inputs: hashes(&record.inputs)?,
            outputs: hashes(&record.outputs)?,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        let path = ExperimentManifest::path_for(primary);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    }
    Ok(())
}

fn strip_threads(command: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(command.len());
    let mut skip = false;
    for a in command {
        if skip {
            skip = false;
        } else if a == "--threads" {
            skip = true;
        } else if !a.starts_with("--threads=") {
            out.push(a.clone());
        }
    }
    out
}

fn replay(manifest_path: &Path, threads_override: usize) -> Result<()> {
    let manifest: ExperimentManifest = serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    let threads = if threads_override != 1 { threads_override } else { manifest.threads };
    let mut argv = vec!["tvkit".to_string(), "--threads".into(), threads.to_string()];
    argv.extend(manifest.command.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::config(format!("manifest command does not parse: {e}")))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Error::config("a manifest cannot replay another manifest"));
    }
    for input in &manifest.inputs {
        let now = sha256_file(&input.path)?;
        if now != input.sha256 {
            return Err(Error::Protocol(format!("input {} changed since the manifest was written", input.path.display())));
        }
    }
    dispatch(&cli)?;
    let mut mismatched = Vec::new();
    for out in &manifest.outputs {
        let now = sha256_file(&out.path)?;
        let same = now == out.sha256;
        println!("{} {}", if same { "identical" } else { "DIFFERS" }, out.path.display());
        if !same {
            mismatched.push(out.path.display().to_string());
        }
    }
    if mismatched.is_empty() {
        Ok(())
    } else {
        Err(Error::Protocol(format!("replay produced different outputs: {}", mismatched.join(", "))))
    }
}

fn dispatch(cli: &Cli) -> Result<RunRecord> {
    let threads = cli.threads;
    match &cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Gen(a) => cmd_gen(a),
        Command::Finetune(a) => cmd_finetune(a, threads),
        Command::Diff(a) => cmd_diff(a),
        Command::Learn(l) => cmd_learn(l, threads),
        Command::Eval(e) => cmd_eval(e, threads),
        Command::Replay(_) => unreachable!("handled by run"),
    }
}

/// Saves weights with the model configuration in the header metadata.
pub fn save_weights(path: &Path, model: &ModelConfig, theta: &BlockedTensor) -> Result<()> {
    let mut c = theta.to_container()?;
    c.header.meta = json!({ "model": model });
    c.write(path)
}

/// Loads weights saved by [`save_weights`] together with their model.
pub fn load_weights(path: &Path, threads: usize) -> Result<(ToyModel, BlockedTensor)> {
    let c = Container::read(path)?;
    if c.header.kind != BlockedTensor::KIND {
        return Err(Error::config(format!("{} holds `{}`, not weights", path.display(), c.header.kind)));
    }
    let cfg: ModelConfig = serde_json::from_value(
        c.header.meta.get("model").cloned().ok_or_else(|| Error::config(format!("{} carries no model configuration", path.display())))?,
    )?;
    let theta = BlockedTensor::from_container(c)?;
    let model = ToyModel::new(cfg)?.with_threads(threads);
    theta.check_same_specs(model.specs())?;
    Ok((model, theta))
}

/// A task spec JSON is generated on the fly; anything else is read as a
/// cached dataset TVCK.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.extension().is_some_and(|e| e == "json") {
        let spec: TaskSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        generate(&spec)
    } else {
        tvck::load::<Dataset>(path)
    }
}

fn split_of(d: &Dataset, split: Split) -> Batch {
    match split {
        Split::Train => d.train.clone(),
        Split::Val => d.val.clone(),
        Split::Test => d.test.clone(),
    }
}

fn load_tvs(paths: &[PathBuf]) -> Result<Vec<TaskVector>> {
    paths.iter().map(tvck::load::<TaskVector>).collect()
}

fn cmd_init(a: &InitArgs) -> Result<RunRecord> {
    let cfg = ModelConfig {
        depth: a.depth,
        width: a.width,
        emb_dim: a.emb_dim,
        embedding_seed: a.embedding_seed,
        ..ModelConfig::new(a.in_dim, a.classes)
    };
    let model = ToyModel::new(cfg.clone())?;
    let theta = model.init(a.seed);
    save_weights(&a.out, &cfg, &theta)?;
    println!("initialised {} blocks ({} parameters)", theta.num_blocks(), theta.num_elements());
    Ok(RunRecord {
        config: serde_json::to_value(a)?,
        seeds: BTreeMap::from([("init".into(), a.seed), ("embeddings".into(), a.embedding_seed)]),
        inputs: vec![],
        outputs: vec![a.out.clone()],
    })
}

fn cmd_gen(a: &GenArgs) -> Result<RunRecord> {
    let (data, inputs) = match (&a.task, &a.idx_images, &a.idx_labels) {
        (Some(t), _, _) => (load_dataset(t)?, vec![t.clone()]),
        (None, Some(i), Some(l)) => (load_idx(i, l)?, vec![i.clone(), l.clone()]),
        _ => return Err(Error::config("pass --task or both --idx-images and --idx-labels")),
    };
    tvck::save(&a.out, &data)?;
    println!("dataset `{}`: {} train, {} val, {} test", data.task_id, data.train.len(), data.val.len(), data.test.len());
    Ok(RunRecord { config: serde_json::to_value(a)?, seeds: BTreeMap::new(), inputs, outputs: vec![a.out.clone()] })
}

fn cmd_finetune(a: &FinetuneArgs, threads: usize) -> Result<RunRecord> {
    let (model, base) = load_weights(&a.base, threads)?;
    let data = load_dataset(&a.task)?;
    let optimizer = AdamWConfig { learning_rate: a.lr, weight_decay: a.wd, ..AdamWConfig::default() };
    match a.lora_rank {
        Some(rank) => {
            let cfg = LoraConfig { rank, epochs: a.epochs, batch_size: a.batch_size, optimizer, seed: a.seed, ..LoraConfig::default() };
            let tv = finetune_lora(&model, &base, &data.train, data.task_id.clone(), &cfg)?;
            tvck::save(&a.out, &tv)?;
            let theta = crate::blocks::apply_isotropic(&base, 1.0, std::slice::from_ref(&tv))?;
            println!("LoRA rank {rank}: test accuracy {:.2}%", accuracy(&model, &theta, &data.test)?);
        }
        None => {
            let cfg = FinetuneConfig { epochs: a.epochs, batch_size: a.batch_size, optimizer, seed: a.seed, linearized: a.linearized };
            let (ft, trace) = learn::finetune(&model, &base, &data.train, &cfg)?;
            save_weights(&a.out, model.config(), &ft)?;
            if let Some(l) = trace.last() {
                println!("final training loss {l:.6}");
            }
            let acc = if a.linearized {
                let tv = diff(&ft, &base)?;
                let logits = model.linearized_forward(&base, &CoefficientSet::uniform_for(std::slice::from_ref(&tv), &base, 1.0), std::slice::from_ref(&tv), &data.test)?;
                evalx::accuracy_from_logits(&logits, &data.test.labels)
            } else {
                accuracy(&model, &ft, &data.test)?
            };
            println!("test accuracy {acc:.2}%");
        }
    }
    Ok(RunRecord {
        config: serde_json::to_value(a)?,
        seeds: BTreeMap::from([("shuffle".into(), a.seed)]),
        inputs: vec![a.base.clone(), a.task.clone()],
        outputs: vec![a.out.clone()],
    })
}

fn cmd_diff(a: &DiffArgs) -> Result<RunRecord> {
    let ft = tvck::load::<BlockedTensor>(&a.ft)?;
    let base = tvck::load::<BlockedTensor>(&a.base)?;
    let mut tv = diff(&ft, &base)?;
    if let Some(id) = &a.id {
        tv = tv.with_id(id.clone());
    }
    tvck::save(&a.out, &tv)?;
    println!("task vector `{}`: L2 norm {:.6}", tv.id, tv.to_dense().l2_norm());
    Ok(RunRecord {
        config: serde_json::to_value(a)?,
        seeds: BTreeMap::new(),
        inputs: vec![a.ft.clone(), a.base.clone()],
        outputs: vec![a.out.clone()],
    })
}

fn train_config(c: &CommonLearn) -> TrainConfig {
    TrainConfig {
        learning_rate: c.lr,
        weight_decay: c.wd,
        epochs: c.epochs,
        batch_size: c.batch_size,
        l1_penalty: c.l1,
        seed: c.seed,
        partitions: c.partitions,
        ..TrainConfig::default()
    }
}

fn composed_path(c: &CommonLearn) -> PathBuf {
    c.composed.clone().unwrap_or_else(|| c.out.with_extension("tvck"))
}

fn plan_for(
    budget: &Budget,
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    target: &Batch,
    seed: u64,
) -> Result<Option<SelectionPlan>> {
    let Some(b) = budget.budget else { return Ok(None) };
    let group = budget.group_size.unwrap_or(b);
    let plan = match budget.strategy {
        StrategyArg::Random => select::select_random(tvs, b, seed)?,
        StrategyArg::GradientWhole => select::select_by_gradient(model, theta0, tvs, target, b, group, GradientMode::Whole)?,
        StrategyArg::GradientBlockwise => select::select_by_gradient(model, theta0, tvs, target, b, group, GradientMode::Blockwise)?,
        StrategyArg::Features => {
            if budget.candidates.len() != tvs.len() {
                return Err(Error::config("--strategy features needs one --candidate dataset per task vector"));
            }
            let sets = budget.candidates.iter().map(|p| load_dataset(p).map(|d| d.train)).collect::<Result<Vec<_>>>()?;
            let cands: Vec<(&str, &Batch)> = tvs.iter().zip(&sets).map(|(t, s)| (t.id.as_str(), s)).collect();
            select::select_by_features(model, theta0, &cands, target, b)?
        }
    };
    Ok(Some(plan))
}

fn learn_with_plan(
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    plan: Option<&SelectionPlan>,
    cfg: &TrainConfig,
    linearized: bool,
    sets: &[Batch],
) -> Result<learn::LearnReport> {
    let mut learner = Learner::new(model, theta0, tvs, cfg).linearized(linearized);
    if let Some(p) = plan {
        learner = learner.trainable(p.trainable_mask(tvs, &theta0.block_names(), cfg.partitions)?);
    }
    learner.fit(sets)
}

fn finish_learn(
    c: &CommonLearn,
    model: &ToyModel,
    theta0: &BlockedTensor,
    tvs: &[TaskVector],
    coeffs: &CoefficientSet,
    mut report: Value,
    plan: Option<&SelectionPlan>,
) -> Result<Vec<PathBuf>> {
    if let Some(p) = plan {
        report.as_object_mut().expect("report is an object").insert("selection".into(), serde_json::to_value(p)?);
    }
    std::fs::write(&c.out, serde_json::to_string_pretty(&report)? + "\n")?;
    let composed = learn::compose_with(theta0, coeffs, tvs)?;
    let path = composed_path(c);
    save_weights(&path, model.config(), &composed)?;
    Ok(vec![c.out.clone(), path])
}

fn learn_record(c: &CommonLearn, extra: Value, data: Vec<PathBuf>, outputs: Vec<PathBuf>) -> RunRecord {
    let cfg = train_config(c);
    let mut inputs = vec![c.base.clone()];
    inputs.extend(c.tvs.iter().cloned());
    inputs.extend(data);
    let mut seeds = BTreeMap::from([("train".into(), c.seed)]);
    if c.partitions > 1 {
        seeds.insert("masks".into(), cfg.mask_seed());
    }
    RunRecord { config: json!({ "train": cfg, "args": extra }), seeds, inputs, outputs }
}

fn cmd_learn(cmd: &LearnCmd, threads: usize) -> Result<RunRecord> {
    match cmd {
        LearnCmd::Add { common, budget, data, split, linearized, interleave } => {
            let (model, theta0) = load_weights(&common.base, threads)?;
            let tvs = load_tvs(&common.tvs)?;
            let sets = data.iter().map(|p| load_dataset(p).map(|d| split_of(&d, *split))).collect::<Result<Vec<_>>>()?;
            let mut cfg = train_config(common);
            if *interleave {
                cfg.shuffle = ShuffleMode::Interleave;
            }
            let union = Batch::concat(&sets.iter().collect::<Vec<_>>());
            let plan = plan_for(budget, &model, &theta0, &tvs, &union, common.seed)?;
            let report = learn_with_plan(&model, &theta0, &tvs, plan.as_ref(), &cfg, *linearized, &sets)?;
            println!("learned {} coefficients; final loss {:.6}", report.coeffs.values.len(), report.loss_trace.last().copied().unwrap_or(f64::NAN));
            let mut json = report.to_json_value();
            json["linearized"] = json!(linearized);
            let outputs = finish_learn(common, &model, &theta0, &tvs, &report.coeffs, json, plan.as_ref())?;
            let mut inputs = data.clone();
            inputs.extend(budget.candidates.iter().cloned());
            Ok(learn_record(common, json!({ "mode": "add", "split": split, "linearized": linearized, "budget": budget }), inputs, outputs))
        }
        LearnCmd::Negate { common, target, control, split, tune } => {
            let (model, theta0) = load_weights(&common.base, threads)?;
            let tvs = load_tvs(&common.tvs)?;
            if tvs.len() != 1 {
                return Err(Error::config("negation takes exactly one --tv"));
            }
            let t = split_of(&load_dataset(target)?, *split);
            let c = split_of(&load_dataset(control)?, *split);
            let cfg = train_config(common);
            let (report, choice) = if *tune {
                let (r, ch) = learn::tune_negation(&model, &theta0, &tvs[0], &t, &c, &cfg, &NegationSearch::default())?;
                (r, Some(ch))
            } else {
                (learn::learn_negation(&model, &theta0, &tvs[0], &t, &c, &cfg)?, None)
            };
            let mut json = report.to_json_value();
            if let Some(ch) = &choice {
                json["negation_choice"] = serde_json::to_value(ch)?;
            }
            let outputs = finish_learn(common, &model, &theta0, &tvs, &report.coeffs, json, None)?;
            let edited = tvck::load::<BlockedTensor>(&outputs[1])?;
            let n = evalx::negation_report(&model, &theta0, &edited, &t, &c)?;
            println!(
                "target {:.2}% -> {:.2}%, control {:.2}% -> {:.2}% ({})",
                n.target_pretrained,
                n.target,
                n.control_pretrained,
                n.control,
                if n.pass { "retained" } else { "below 95%" }
            );
            Ok(learn_record(common, json!({ "mode": "negate", "split": split, "tune": tune }), vec![target.clone(), control.clone()], outputs))
        }
        LearnCmd::Fewshot { common, budget, data, k, target_id } => {
            let (model, theta0) = load_weights(&common.base, threads)?;
            let tvs = load_tvs(&common.tvs)?;
            let ds = load_dataset(data)?;
            let sample = kshot(&ds, *k, common.seed)?;
            let shots = sample.batch(&ds);
            learn::check_fewshot(&tvs, &shots, target_id, model.num_classes())?;
            let cfg = train_config(common);
            let plan = plan_for(budget, &model, &theta0, &tvs, &shots, common.seed)?;
            let report = learn_with_plan(&model, &theta0, &tvs, plan.as_ref(), &cfg, false, std::slice::from_ref(&shots))?;
            let composed = learn::compose_with(&theta0, &report.coeffs, &tvs)?;
            println!(
                "{k}-shot: test accuracy {:.2}% (zero-shot {:.2}%)",
                accuracy(&model, &composed, &ds.test)?,
                accuracy(&model, &theta0, &ds.test)?
            );
            let mut json = report.to_json_value();
            json["kshot"] = serde_json::to_value(&sample)?;
            let outputs = finish_learn(common, &model, &theta0, &tvs, &report.coeffs, json, plan.as_ref())?;
            let mut inputs = vec![data.clone()];
            inputs.extend(budget.candidates.iter().cloned());
            let mut rec = learn_record(common, json!({ "mode": "fewshot", "k": k, "target_id": target_id, "budget": budget }), inputs, outputs);
            rec.seeds.insert("kshot".into(), common.seed);
            Ok(rec)
        }
        LearnCmd::TtaUfm { common, data, split } | LearnCmd::TtaEntropy { common, data, split } => {
            let ufm = matches!(cmd, LearnCmd::TtaUfm { .. });
            let (model, theta0) = load_weights(&common.base, threads)?;
            let tvs = load_tvs(&common.tvs)?;
            let batch = split_of(&load_dataset(data)?, *split);
            let cfg = train_config(common);
            let report = if ufm {
                adapt_ufm(&model, &theta0, &tvs, &batch, &cfg, &UfmConfig::default())?
            } else {
                adapt_entropy(&model, &theta0, &tvs, &batch, &cfg)?
            };
            for w in &report.warnings {
                println!("warning: {w}");
            }
            let composed = learn::compose_with(&theta0, &report.learn.coeffs, &tvs)?;
            println!(
                "accuracy {:.2}% (zero-shot {:.2}%)",
                accuracy(&model, &composed, &batch)?,
                accuracy(&model, &theta0, &batch)?
            );
            let outputs = finish_learn(common, &model, &theta0, &tvs, &report.learn.coeffs, report.to_json_value(), None)?;
            let mode = if ufm { "tta-ufm" } else { "tta-entropy" };
            let mut extra = json!({ "mode": mode, "split": split });
            if ufm {
                extra["ufm"] = serde_json::to_value(UfmConfig::default())?;
            }
            Ok(learn_record(common, extra, vec![data.clone()], outputs))
        }
    }
}

fn cmd_eval(cmd: &EvalCmd, threads: usize) -> Result<RunRecord> {
    match cmd {
        EvalCmd::Acc { weights, data, finetuned, split, out } => {
            if !finetuned.is_empty() && finetuned.len() != data.len() {
                return Err(Error::config("pass one --finetuned per --data or none"));
            }
            let (model, theta) = load_weights(weights, threads)?;
            let mut report = EvalReport::default();
            for (i, p) in data.iter().enumerate() {
                let ds = load_dataset(p)?;
                let batch = split_of(&ds, *split);
                let abs_acc = accuracy(&model, &theta, &batch)?;
                let rel_acc = match finetuned.get(i) {
                    Some(f) => {
                        let (_, ft) = load_weights(f, threads)?;
                        Some(evalx::relative_accuracy(abs_acc, accuracy(&model, &ft, &batch)?)?)
                    }
                    None => None,
                };
                println!("{}: {abs_acc:.2}%", ds.task_id);
                report.accuracies.push(AccuracyRow { dataset: ds.task_id, abs_acc, rel_acc });
            }
            report.write_accuracy_csv(std::fs::File::create(out)?)?;
            println!("mean {:.2}%", report.mean_abs());
            let mut inputs = vec![weights.clone()];
            inputs.extend(data.iter().cloned());
            inputs.extend(finetuned.iter().cloned());
            Ok(RunRecord { config: json!({ "eval": "acc", "split": split }), seeds: BTreeMap::new(), inputs, outputs: vec![out.clone()] })
        }
        EvalCmd::Relacc { abs, reference, out } => {
            let rel = evalx::relative_accuracy(*abs, *reference)?;
            println!("relative accuracy {rel:.2}%");
            std::fs::write(out, serde_json::to_string_pretty(&json!({ "abs_acc": abs, "ref_acc": reference, "rel_acc": rel }))? + "\n")?;
            Ok(RunRecord { config: json!({ "eval": "relacc" }), seeds: BTreeMap::new(), inputs: vec![], outputs: vec![out.clone()] })
        }
        EvalCmd::Negation { base, weights, target, control, split, out } => {
            let (model, theta0) = load_weights(base, threads)?;
            let (_, edited) = load_weights(weights, threads)?;
            let t = split_of(&load_dataset(target)?, *split);
            let c = split_of(&load_dataset(control)?, *split);
            let n = evalx::negation_report(&model, &theta0, &edited, &t, &c)?;
            println!("target {:.2}%, control {:.2}% ({:.1}% retained, pass = {})", n.target, n.control, 100.0 * n.retention, n.pass);
            std::fs::write(out, serde_json::to_string_pretty(&n)? + "\n")?;
            Ok(RunRecord {
                config: json!({ "eval": "negation", "split": split }),
                seeds: BTreeMap::new(),
                inputs: vec![base.clone(), weights.clone(), target.clone(), control.clone()],
                outputs: vec![out.clone()],
            })
        }
        EvalCmd::Disentangle { base, tvs, data, coeffs, alpha, split, out } => {
            if tvs.len() != data.len() {
                return Err(Error::config("pass one --data per --tv"));
            }
            let (model, theta0) = load_weights(base, threads)?;
            let tv = load_tvs(tvs)?;
            let sets = data.iter().map(|p| load_dataset(p).map(|d| split_of(&d, *split))).collect::<Result<Vec<_>>>()?;
            let all = match (coeffs, alpha) {
                (Some(p), None) => learn::LearnReport::from_json(&std::fs::read_to_string(p)?)?.coeffs,
                (None, Some(a)) => CoefficientSet::uniform_for(&tv, &theta0, *a),
                _ => return Err(Error::config("pass exactly one of --coeffs and --alpha")),
            };
            let members = per_tv_coefficients(&all, &tv)?;
            let matrix = evalx::disentanglement_matrix(&model, &theta0, &members, &sets)?;
            matrix.write_csv(std::fs::File::create(out)?)?;
            println!("mean disentanglement error {:.2}%", matrix.mean());
            let mut inputs = vec![base.clone()];
            inputs.extend(tvs.iter().cloned());
            inputs.extend(data.iter().cloned());
            inputs.extend(coeffs.iter().cloned());
            Ok(RunRecord { config: json!({ "eval": "disentangle", "split": split, "alpha": alpha }), seeds: BTreeMap::new(), inputs, outputs: vec![out.clone()] })
        }
        EvalCmd::Intrinsic { base, tvs, data, basis, bases, seeds, reference, lr, epochs, batch_size, out } => {
            let (model, theta0) = load_weights(base, threads)?;
            let tv = load_tvs(tvs)?;
            let ds = load_dataset(data)?;
            let mut points: Vec<SubspacePoint> = Vec::new();
            for &seed in seeds {
                for &d in bases {
                    let cfg = TrainConfig { learning_rate: *lr, epochs: *epochs, batch_size: *batch_size, seed, ..TrainConfig::default() };
                    let set = match basis {
                        BasisArg::Random => make_random_basis(&theta0, d, seed),
                        BasisArg::Taskvector if d == 0 => crate::intrinsic::BasisSet {
                            kind: crate::intrinsic::BasisKind::Taskvector,
                            d: 0,
                            vectors: vec![],
                            trainable: None,
                        },
                        BasisArg::Taskvector => {
                            let plan = select::select_by_gradient(&model, &theta0, &tv, &ds.train, d, d, GradientMode::Blockwise)?;
                            make_tv_basis(&tv, d, &plan)?
                        }
                    };
                    let p = run_subspace_experiment(&model, &theta0, &set, &ds.train, &ds.test, *reference, &cfg)?;
                    println!("{} d={d} seed={seed}: {:.2}% ({:.2}% relative)", p.basis_kind.as_str(), p.abs_acc, p.rel_acc);
                    points.push(p);
                }
            }
            write_points_csv(&points, std::fs::File::create(out)?)?;
            let mut inputs = vec![base.clone(), data.clone()];
            inputs.extend(tvs.iter().cloned());
            Ok(RunRecord {
                config: json!({ "eval": "intrinsic", "basis": basis, "bases": bases, "ref": reference, "lr": lr, "epochs": epochs, "batch_size": batch_size }),
                seeds: seeds.iter().map(|&s| (format!("basis-{s}"), s)).collect(),
                inputs,
                outputs: vec![out.clone()],
            })
        }
    }
}

/// Splits an `n`-task-vector coefficient set into single-vector sets in the
/// order of `tvs`.
pub fn per_tv_coefficients(all: &CoefficientSet, tvs: &[TaskVector]) -> Result<Vec<(CoefficientSet, TaskVector)>> {
    all.validate()?;
    if all.partitions != 1 {
        return Err(Error::config("disentanglement needs K = 1 coefficients"));
    }
    let m = all.num_blocks();
    tvs.iter()
        .map(|tv| {
            let i = all
                .tv_ids
                .iter()
                .position(|id| *id == tv.id)
                .ok_or_else(|| Error::config(format!("coefficients have no entry for `{}`", tv.id)))?;
            let set = CoefficientSet {
                tv_ids: vec![tv.id.clone()],
                block_names: all.block_names.clone(),
                partitions: 1,
                values: all.values[i * m..(i + 1) * m].to_vec(),
                partition_seed: None,
            };
            Ok((set, tv.clone()))
        })
        .collect()
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Features => Strategy::Features,
            StrategyArg::GradientWhole => Strategy::GradientWhole,
            StrategyArg::GradientBlockwise => Strategy::GradientBlockwise,
        }
    }
}
