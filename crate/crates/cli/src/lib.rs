//! Command implementations behind the `vaanet` binary.

pub mod config;
pub mod viz;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vaanet::data::synth::{synth_dataset, synth_taxonomy, SynthConfig};
use vaanet::data::{AudioConfig, Dataset, DatasetManifest, Split};
use vaanet::harness::{
    ablation_matrix, evaluate, load_dataset, run_protocol, stratified_split, train, EvalReport, Protocol,
    TrainConfig,
};
use vaanet::loss::LossKind;
use vaanet::model::{AttentionFlags, Vaanet};
use vaanet::numerics::Checkpoint;
use vaanet::{Error, Result};

use crate::config::Overrides;

#[derive(Debug, Parser)]
#[command(name = "vaanet", version, about = "Visual-audio attention networks for video emotion recognition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic audiovisual dataset.
    Synth(SynthArgs),
    /// Train a model on a manifest's training split.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Repeated-split (ve8) or fixed-split (e6) protocol.
    Protocol(ProtocolArgs),
    /// Train and evaluate every attention configuration under CE and PCCE.
    Ablate(TrainArgs),
    /// Export attention maps for one video.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 24)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generator settings (TOML or JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON-lines manifest.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Built-in taxonomy (ve8, e6) or a taxonomy JSON; defaults to the
    /// manifest's sibling `taxonomy.json`.
    #[arg(long)]
    pub taxonomy: Option<String>,
    /// Training config (TOML or JSON): a `preset` plus overrides.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// at, vs, vs+vcw, vs+vcw+vt or all.
    #[arg(long, value_parser = parse_attn)]
    pub attn: Option<AttentionFlags>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value = "ve8")]
    pub protocol: String,
    /// Number of random splits (ignored by e6).
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Writes `eval.json` and `eval.txt` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub taxonomy: Option<String>,
    /// Manifest `video_id` of the video to render.
    #[arg(long)]
    pub video: String,
    #[arg(long, default_value = "viz")]
    pub out: PathBuf,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_attn(s: &str) -> std::result::Result<AttentionFlags, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Process exit status for an error: 2 usage, 3 input, 4 divergence.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence(_) => 4,
        _ => 3,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Protocol(a) => cmd_protocol(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Visualize(a) => cmd_visualize(&a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg: SynthConfig = match &a.config {
        Some(p) => serde_json::from_value(config::read_value(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SynthConfig::default(),
    };
    let tax = synth_taxonomy(a.classes)?;
    let entries = synth_dataset(&a.out, &cfg, &tax, a.per_class, a.seed)?;
    println!("wrote {} videos to {}", entries.len(), a.out.join("manifest.jsonl").display());
    Ok(())
}

fn overrides(a: &TrainArgs) -> Overrides {
    Overrides {
        seed: a.seed,
        loss: a.loss,
        lambda: a.lambda,
        attn: a.attn,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
    }
}

/// Manifest, resolved config and loaded media.
fn prepare(a: &TrainArgs) -> Result<(TrainConfig, Dataset)> {
    let manifest = DatasetManifest::load(&a.dataset, a.taxonomy.as_deref())?;
    let mut cfg = config::resolve(a.config.as_deref(), manifest.taxonomy.len(), &overrides(a))?;
    // Media are loaded once for every configuration the command may train.
    let requested = cfg.model.attention;
    if manifest.entries.iter().all(|e| e.audio.is_some()) {
        cfg.model.attention = AttentionFlags::ALL;
    }
    let data = load_dataset(&cfg, manifest)?;
    cfg.model.attention = requested;
    Ok((cfg, data))
}

/// Tagged train/test split, or everything for training when untagged.
fn tagged_split(data: &Dataset) -> (Vec<usize>, Vec<usize>) {
    let train = data.manifest.split(Split::Train);
    if train.is_empty() {
        ((0..data.len()).collect(), Vec::new())
    } else {
        (train, data.manifest.split(Split::Test))
    }
}

#[derive(Serialize)]
struct TrainReport {
    best_epoch: usize,
    train: EvalReport,
    test: Option<EvalReport>,
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let (cfg, data) = prepare(a)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let (tr, te) = tagged_split(&data);
    let outcome = train(&cfg, &data, &tr, &te, Some(&a.out))?;
    let report = TrainReport {
        best_epoch: outcome.best_epoch,
        train: evaluate(&outcome.last, &data, &tr, cfg.batch_size)?,
        test: if te.is_empty() {
            None
        } else {
            Some(evaluate(&outcome.best, &data, &te, cfg.batch_size)?)
        },
    };
    write_json(&a.out.join("report.json"), &report)?;
    let last = outcome.history.last().expect("at least one epoch");
    println!(
        "{} epochs, final loss {:.4}, train accuracy {:.2}% (eval mode {:.2}%)",
        cfg.epochs,
        last.loss,
        100.0 * last.train_acc,
        100.0 * report.train.average
    );
    if let Some(t) = &report.test {
        println!("test accuracy {:.2}% (best epoch {})", 100.0 * t.average, outcome.best_epoch);
    }
    Ok(())
}

/// Model from a checkpoint, with the dataset loaded to match it.
fn load_model(checkpoint: &Path, dataset: &Path, taxonomy: Option<&str>) -> Result<(Vaanet, Dataset)> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, extra) = Vaanet::from_checkpoint(&ck)?;
    let audio: AudioConfig = match extra.get("audio") {
        Some(v) if !v.is_null() => serde_json::from_value(v.clone())?,
        _ => AudioConfig::default(),
    };
    let manifest = DatasetManifest::load(dataset, taxonomy)?;
    if manifest.taxonomy.len() != model.cfg.classes {
        return Err(Error::Contract(format!(
            "checkpoint predicts {} classes, dataset taxonomy has {}",
            model.cfg.classes,
            manifest.taxonomy.len()
        )));
    }
    let data = Dataset::load(manifest, &model.cfg, &audio)?;
    Ok((model, data))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalReport> {
    let (model, data) = load_model(&a.checkpoint, &a.dataset, a.taxonomy.as_deref())?;
    let idx = match a.split {
        SplitArg::Train => data.manifest.split(Split::Train),
        SplitArg::Test => data.manifest.split(Split::Test),
        SplitArg::All => (0..data.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::Input(format!("no entries in split {:?}", a.split)));
    }
    let report = evaluate(&model, &data, &idx, a.batch_size)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("eval.json"), &report)?;
        std::fs::write(out.join("eval.txt"), report.to_text())?;
    }
    Ok(report)
}

pub fn cmd_protocol(a: &ProtocolArgs) -> Result<()> {
    let protocol = Protocol::parse(&a.protocol, a.runs)?;
    let (cfg, data) = prepare(&a.train)?;
    std::fs::create_dir_all(&a.train.out)?;
    write_json(&a.train.out.join("config.json"), &cfg)?;
    let report = run_protocol(protocol, &cfg, &data, Some(&a.train.out))?;
    write_json(&a.train.out.join("protocol.json"), &report)?;
    std::fs::write(a.train.out.join("protocol.txt"), report.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn cmd_ablate(a: &TrainArgs) -> Result<()> {
    let (cfg, data) = prepare(a)?;
    let (tr, te) = match tagged_split(&data) {
        (tr, te) if !te.is_empty() => (tr, te),
        _ => stratified_split(&data.manifest.by_class(), cfg.seed, 0)?,
    };
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let table = ablation_matrix(&cfg, &data, &tr, &te, Some(&a.out))?;
    write_json(&a.out.join("ablation.json"), &table)?;
    std::fs::write(a.out.join("ablation.txt"), table.to_text())?;
    print!("{}", table.to_text());
    Ok(())
}

pub fn cmd_visualize(a: &VisualizeArgs) -> Result<()> {
    let (model, data) = load_model(&a.checkpoint, &a.dataset, a.taxonomy.as_deref())?;
    let index = data
        .manifest
        .entries
        .iter()
        .position(|e| e.video_id == a.video)
        .ok_or_else(|| Error::Input(format!("video {:?} is not in the manifest", a.video)))?;
    let meta = viz::visualize(&model, &data, index, &a.out)?;
    println!(
        "{}: label {}, predicted {}, temporal peak at segment {}; {} files in {}",
        meta.video_id,
        meta.label,
        meta.predicted,
        meta.temporal_argmax,
        meta.files.len(),
        a.out.display()
    );
    Ok(())
}
