//! Command-line front end. Each subcommand wraps one library operation.

pub mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};
use serde::Serialize;

use crate::conditioning::{make_identity, mix_identities, ConditionBundle};
use crate::data::{load_dataset, synthesize_walker_dataset, write_dataset, WalkerConfig};
use crate::error::{Error, Result};
use crate::eval::{self, Embedder, ExternalEmbedder, GeiEmbedder, Pairing};
use crate::experiments::{self, AugmentationMode};
use crate::plot::{self, Histogram};
use crate::sampler::{self, GeneratedClip, GenerationRequest};
use crate::trainer::{self, checkpoint};
use config::{load_run_config, RunConfig, CONFIG_ENV};

pub const EXIT_CODES: &str = "\
Exit codes:
   0  success
   1  unexpected internal failure
   2  config or usage error
   3  dataset or file could not be loaded
   4  manifest or sequence failed validation
   5  frame image could not be decoded
   6  sequence shorter than the clip length
   7  invalid parameter
   8  tensor shape mismatch
   9  unknown view or covariate label
  10  non-finite value during sampling
  11  training diverged
  12  synthetic identities missing from the real set
  13  checkpoint unreadable or incompatible
  14  external embedder failed
  15  tensor backend error
  16  i/o error

Errors are printed to stderr as one line: error[<kind>]: <message>";

#[derive(Debug, Parser)]
#[command(name = "gaitcraft", version, about = "Conditional video diffusion for gait silhouettes", after_help = EXIT_CODES)]
pub struct Cli {
    /// TOML run config (sections: dataset, [model], [train], [augment]).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    /// Override a config value, e.g. --set train.learning_rate=2e-3. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Threads used for dataset loading.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Force single-threaded loading.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural walker dataset.
    SynthData(SynthDataArgs),
    /// Train a denoiser, or resume training from a checkpoint.
    Train(TrainArgs),
    /// Sample clips from a checkpoint.
    Generate(GenerateArgs),
    /// Score identity preservation of synthetic clips against real ones.
    EvalGbs(EvalGbsArgs),
    /// Build an augmented dataset from real data plus generated clips.
    Augment(AugmentArgs),
    /// Write an embedding table for one or two datasets.
    ExportEmbeddings(ExportArgs),
    /// Split a dataset into train and test parts.
    Split(SplitArgs),
}

#[derive(Debug, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub ids: usize,
    /// Sequences per identity.
    #[arg(long, default_value_t = 2)]
    pub seqs: usize,
    #[arg(long, value_delimiter = ',', default_value = "090")]
    pub views: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "NM")]
    pub covariates: Vec<String>,
    #[arg(long, default_value_t = crate::data::DEFAULT_FRAME_SIZE)]
    pub frame_size: usize,
    /// Frames rendered per sequence.
    #[arg(long, default_value_t = crate::data::DEFAULT_CLIP_LENGTH)]
    pub frames: usize,
    /// Clip length the gait cycle is timed against. Defaults to --frames.
    #[arg(long)]
    pub clip_length: Option<usize>,
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root or manifest. Falls back to `dataset` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints, the loss log and the loss curve.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint (file or directory).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Total step count (train.total_steps).
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Identity to generate.
    #[arg(long, conflicts_with = "mix_ids", required_unless_present = "mix_ids")]
    pub id: Option<usize>,
    /// Comma-separated identities to mix into a novel identity.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub mix_ids: Vec<usize>,
    /// Defaults to the first view the model knows.
    #[arg(long)]
    pub view: Option<String>,
    /// Defaults to the first covariate the model knows.
    #[arg(long)]
    pub covariate: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub variations: usize,
    /// Write denoising snapshots and pixel histograms under trajectory/.
    #[arg(long)]
    pub export_trajectory: bool,
    /// Threshold the final frames to {0, 1}.
    #[arg(long)]
    pub binarize: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderKind {
    Gei,
}

#[derive(Debug, Args)]
pub struct EmbedderArgs {
    #[arg(long, value_enum, default_value = "gei")]
    pub embedder: EmbedderKind,
    /// External embedder command line; called with `--data DIR --out TABLE`
    /// appended. Overrides --embedder.
    #[arg(long)]
    pub embedder_cmd: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairingKind {
    /// Each synthetic identity against the same real identity.
    Same,
    /// Each synthetic identity against the next real identity.
    Shifted,
}

#[derive(Debug, Args)]
pub struct EvalGbsArgs {
    #[arg(long)]
    pub real: PathBuf,
    #[arg(long)]
    pub synthetic: PathBuf,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    #[arg(long, value_enum, default_value = "same")]
    pub pairing: PairingKind,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Real dataset. Falls back to `dataset` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// original_ids, novel_ids, combined or synthetic_only.
    #[arg(long)]
    pub mode: Option<String>,
    /// Clips per (identity, view, covariate) setting.
    #[arg(long)]
    pub variations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Synthetic dataset appended with is_synthetic = 1.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Writes `train/` and `test/` datasets here.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
    /// Hold out whole identities instead of sequences.
    #[arg(long)]
    pub open_set: bool,
    #[arg(long)]
    pub seed: u64,
}

impl Cli {
    fn workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.unwrap_or(1).max(1)
        }
    }

    fn run_config(&self, flags: Vec<String>) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        overrides.extend(flags);
        overrides.push(format!("train.workers={}", self.workers()));
        load_run_config(self.config.as_deref(), &overrides)
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return 2;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(cli, a),
        Command::Generate(a) => generate(a),
        Command::EvalGbs(a) => eval_gbs(cli, a),
        Command::Augment(a) => augment(cli, a),
        Command::ExportEmbeddings(a) => export_embeddings(cli, a),
        Command::Split(a) => split(a),
    }
}

fn synth_data(a: &SynthDataArgs) -> Result<()> {
    let cfg = WalkerConfig {
        frame_size: a.frame_size,
        frames_per_sequence: a.frames,
        clip_length: a.clip_length.unwrap_or(a.frames),
    };
    let manifest = synthesize_walker_dataset(&a.out, a.ids, a.seqs, &a.views, &a.covariates, a.seed, &cfg)?;
    info!("wrote {} sequences to {}", manifest.entries.len(), a.out.display());
    println!("{}", a.out.join(crate::data::MANIFEST_FILE).display());
    Ok(())
}

fn dataset_path(flag: Option<&PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.cloned()
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set `dataset` in the config".into()))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(v) = a.steps {
        flags.push(format!("train.total_steps={v}"));
    }
    if let Some(v) = a.lr {
        flags.push(format!("train.learning_rate={v:e}"));
    }
    if let Some(v) = a.batch_size {
        flags.push(format!("train.batch_size={v}"));
    }
    if let Some(v) = a.seed {
        flags.push(format!("train.seed={v}"));
    }
    let cfg = cli.run_config(flags)?;
    let manifest = load_dataset(dataset_path(a.data.as_ref(), &cfg)?)?;
    let last = match &a.resume {
        Some(ckpt) => trainer::resume(&checkpoint::resolve_checkpoint(ckpt)?, &manifest, &cfg.train, &a.out)?,
        None => trainer::train(&manifest, &cfg.train, &cfg.model_config(), &a.out)?,
    };
    let ckpt = checkpoint::load_checkpoint(&last)?;
    plot::loss_curve(&ckpt.loss_history, &a.out.join("loss_curve.png"))?;
    if let Some((step, loss)) = ckpt.loss_history.last() {
        info!("finished at step {step}, loss {loss:.5}");
    }
    println!("{}", last.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct HistogramRecord {
    level: usize,
    /// The clamped clip as written, rather than a raw snapshot.
    final_sample: bool,
    bins: usize,
    counts: Vec<usize>,
    below: usize,
    above: usize,
    bimodal_mass: f64,
}

const HISTOGRAM_BINS: usize = 20;

fn write_trajectory(dir: &Path, clip: &GeneratedClip) -> Result<()> {
    let Some(traj) = &clip.trajectory else {
        return Ok(());
    };
    plot::trajectory_images(traj, dir)?;
    let hists: Vec<Histogram> = traj.frames.iter().map(|f| Histogram::new(f.iter(), HISTOGRAM_BINS)).collect();
    plot::histogram_image(&hists, &dir.join("histogram.png"))?;
    let mut records: Vec<HistogramRecord> = traj
        .levels
        .iter()
        .zip(&traj.frames)
        .zip(hists)
        .map(|((&level, frames), h)| HistogramRecord {
            level,
            final_sample: false,
            bins: HISTOGRAM_BINS,
            bimodal_mass: plot::bimodal_mass(frames.iter()),
            counts: h.counts,
            below: h.below,
            above: h.above,
        })
        .collect();
    let finished: Vec<f64> = clip.sequence.frames.iter().map(|&v| f64::from(v)).collect();
    let h = Histogram::new(finished.iter(), HISTOGRAM_BINS);
    records.push(HistogramRecord {
        level: 0,
        final_sample: true,
        bins: HISTOGRAM_BINS,
        bimodal_mass: plot::bimodal_mass(finished.iter()),
        counts: h.counts,
        below: h.below,
        above: h.above,
    });
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::Io(e.into()))?;
    std::fs::write(dir.join("histogram.json"), text + "\n")?;
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let ckpt = checkpoint::load_checkpoint(&checkpoint::resolve_checkpoint(&a.checkpoint)?)?;
    let model = &ckpt.model;
    let schedule = ckpt.header.schedule.build()?;
    let vocab = &model.config().vocabulary;
    let n_ids = vocab.n_ids;
    let (identity, output_identity) = match a.id {
        Some(i) => (make_identity(i, n_ids)?, i),
        None => (mix_identities(&a.mix_ids, n_ids, false)?, n_ids),
    };
    let view = a.view.clone().unwrap_or_else(|| vocab.views[0].clone());
    let covariate = a.covariate.clone().unwrap_or_else(|| vocab.covariates[0].clone());
    let req = GenerationRequest {
        n_variations: a.variations,
        export_trajectory: a.export_trajectory,
        binarize_threshold: a.binarize,
        output_identity: Some(output_identity),
        ..GenerationRequest::new(ConditionBundle::new(identity, view, covariate), a.seed)
    };
    let mut clips = Vec::new();
    let mut first_err = None;
    for (v, r) in sampler::generate(model, &schedule, &req)?.into_iter().enumerate() {
        match r {
            Ok(c) => clips.push(c),
            Err(e) => {
                error!("variation {v} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    let seqs: Vec<_> = clips.iter().map(|c| c.sequence.clone()).collect();
    let manifest = write_dataset(&a.out, n_ids.max(output_identity + 1), &seqs)?;
    for clip in &clips {
        write_trajectory(&a.out.join("trajectory").join(&clip.sequence.sequence_id), clip)?;
    }
    info!("wrote {} clips to {}", clips.len(), a.out.display());
    if let Some(e) = first_err {
        return Err(e);
    }
    println!("{}", manifest.root_path.join(crate::data::MANIFEST_FILE).display());
    Ok(())
}

fn embedder(a: &EmbedderArgs, n_ids: usize) -> Result<Box<dyn Embedder>> {
    match &a.embedder_cmd {
        Some(cmd) => {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| Error::Config("--embedder-cmd is empty".into()))?;
            Ok(Box::new(ExternalEmbedder {
                program: program.into(),
                args: parts.collect(),
                n_ids,
            }))
        }
        None => match a.embedder {
            EmbedderKind::Gei => Ok(Box::new(GeiEmbedder)),
        },
    }
}

/// Load a real dataset at native size and an optional second one resized to match.
fn load_pair(
    real: &Path,
    other: Option<&Path>,
    workers: usize,
) -> Result<(Vec<crate::data::SilhouetteSequence>, Vec<crate::data::SilhouetteSequence>, usize)> {
    let n_ids = load_dataset(real)?.n_ids;
    let real = eval::load_all(real, None, workers)?;
    let size = real.first().map(|s| s.frame_size());
    let other = match other {
        Some(p) => eval::load_all(p, size, workers)?,
        None => Vec::new(),
    };
    Ok((real, other, n_ids))
}

fn eval_gbs(cli: &Cli, a: &EvalGbsArgs) -> Result<()> {
    let (real, synthetic, n_ids) = load_pair(&a.real, Some(&a.synthetic), cli.workers())?;
    let pairing = match a.pairing {
        PairingKind::Same => Pairing::SameIdentity,
        PairingKind::Shifted => {
            let ids: BTreeSet<usize> = real.iter().map(|s| s.identity_index).collect();
            Pairing::shifted(&ids)
        }
    };
    let emb = embedder(&a.embedder, n_ids)?;
    let report = eval::gbs(&real, &synthetic, emb.as_ref(), &pairing)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.into()))?;
    if let Some(path) = &a.out {
        std::fs::write(path, text.clone() + "\n")?;
    }
    println!("{text}");
    Ok(())
}

fn augment(cli: &Cli, a: &AugmentArgs) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(m) = &a.mode {
        flags.push(format!("augment.mode=\"{m}\""));
    }
    if let Some(v) = a.variations {
        flags.push(format!("augment.variations_per_setting={v}"));
    }
    let cfg = cli.run_config(flags)?;
    let source = load_dataset(dataset_path(a.data.as_ref(), &cfg)?)?;
    let mut plan = cfg.augment.clone();
    if plan.n_original == 0 {
        plan.n_original = source.n_ids;
    }
    if plan.mode == AugmentationMode::SyntheticOnly {
        warn!("synthetic_only: the real sequences are not copied");
    }
    let manifest = experiments::build_augmentation(&a.checkpoint, &source, &plan, a.seed, &a.out)?;
    info!(
        "augmented dataset: {} ids, {} sequences",
        manifest.n_ids,
        manifest.entries.len()
    );
    println!("{}", a.out.join(crate::data::MANIFEST_FILE).display());
    Ok(())
}

fn export_embeddings(cli: &Cli, a: &ExportArgs) -> Result<()> {
    let (real, synthetic, n_ids) = load_pair(&a.data, a.synthetic.as_deref(), cli.workers())?;
    let tagged: Vec<_> = real
        .into_iter()
        .map(|s| (s, false))
        .chain(synthetic.into_iter().map(|s| (s, true)))
        .collect();
    let emb = embedder(&a.embedder, n_ids)?;
    let rows = eval::export_embeddings(&tagged, emb.as_ref(), &a.out)?;
    info!("wrote {} embeddings to {}", rows.len(), a.out.display());
    println!("{}", a.out.display());
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let source = load_dataset(&a.data)?;
    let (train, test) = if a.open_set {
        experiments::open_set_split(&source, a.fraction, a.seed)?
    } else {
        experiments::closed_set_split(&source, a.fraction, a.seed)?
    };
    let train = experiments::materialize(&train, &a.out.join("train"))?;
    let test = experiments::materialize(&test, &a.out.join("test"))?;
    info!("split: {} train, {} test sequences", train.entries.len(), test.entries.len());
    println!("{}", a.out.display());
    Ok(())
}
