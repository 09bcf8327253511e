//! Noise-prediction training: sample a clip, noise it to a random step, and
//! regress the network output onto the injected noise with a mean squared
//! error, one Adam update per batch.

pub mod adam;
pub mod checkpoint;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use log::info;
use ndarray::{s, Array3, Array5, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::{make_identity, ConditionBundle, Vocabulary};
use crate::convert::to_tensor;
use crate::data::{
    load_sequence, parallel_map, random_crop_start, to_model_range, DatasetManifest, LoadOptions, SilhouetteSequence,
};
use crate::denoiser::{build_denoiser, DenoiserConfig, DenoiserModel, NoisePredictor};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use adam::{grad_norm, Adam, AdamConfig};
use checkpoint::{checkpoint_name, save_checkpoint, write_latest};

pub const LOSS_LOG: &str = "loss_log.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `learning_rate` to zero at `total_steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub clip_length: usize,
    pub schedule: ScheduleConfig,
    /// Max global gradient norm; off when `None`.
    pub grad_clip: Option<f64>,
    /// Loop sources shorter than the clip instead of rejecting them.
    pub loop_pad: bool,
    pub log_every: u64,
    /// Threads used to decode the dataset. Loading order, and so the result,
    /// does not depend on this.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_schedule: LrSchedule::Constant,
            batch_size: 4,
            total_steps: 100_000,
            seed: 0,
            checkpoint_every: 10_000,
            clip_length: crate::data::DEFAULT_CLIP_LENGTH,
            schedule: ScheduleConfig::default(),
            grad_clip: None,
            loop_pad: false,
            log_every: 100,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.clip_length == 0 {
            return Err(Error::Config(format!(
                "learning_rate, batch_size and clip_length must be positive: {self:?}"
            )));
        }
        if self.checkpoint_every == 0 || self.workers == 0 {
            return Err(Error::Config("checkpoint_every and workers must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.schedule.build().map(|_| ())
    }

    /// Learning rate for the update that produces step `step + 1`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let p = (step as f64 / self.total_steps.max(1) as f64).min(1.0);
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub sequence: SilhouetteSequence,
    pub bundle: ConditionBundle,
}

impl TrainingExample {
    pub fn new(sequence: SilhouetteSequence, vocab: &Vocabulary) -> Result<Self> {
        let bundle = ConditionBundle::new(
            make_identity(sequence.identity_index, vocab.n_ids)?,
            sequence.view_label.clone(),
            sequence.covariate_label.clone(),
        );
        Ok(Self { sequence, bundle })
    }
}

pub struct TrainState {
    pub model: DenoiserModel,
    pub optimizer: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub loss_history: Vec<(u64, f64)>,
}

impl TrainState {
    pub fn new(model: DenoiserModel, adam: AdamConfig, seed: u64) -> Self {
        Self {
            model,
            optimizer: Adam::new(adam),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss_history: Vec::new(),
        }
    }
}

pub struct LossOutput {
    pub loss: Tensor,
    pub timesteps: Vec<usize>,
}

fn normal_array<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize, usize, usize)) -> Array5<f64> {
    Array5::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

/// Mean squared error between injected and predicted noise for one batch,
/// drawing `t` uniformly over all steps and unit-normal noise from `rng`.
pub fn diffusion_loss<P: NoisePredictor, R: Rng + ?Sized>(
    predictor: &P,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    rng: &mut R,
    dtype: DType,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    let [c, f, h, w] = predictor.clip_shape().dims();
    let b = batch.len();
    let mut y0 = Array5::<f64>::zeros((b, c, f, h, w));
    for (i, ex) in batch.iter().enumerate() {
        let frames = &ex.sequence.frames;
        if frames.dim() != (f, h, w) || c != 1 {
            return Err(Error::shape(&[c, f, h, w], &[1, frames.dim().0, frames.dim().1, frames.dim().2]));
        }
        y0.slice_mut(s![i, 0, .., .., ..])
            .assign(&to_model_range(&frames.mapv(f64::from)));
    }
    let timesteps: Vec<usize> = (0..b).map(|_| rng.random_range(0..schedule.steps())).collect();
    let eps = normal_array(rng, (b, c, f, h, w));
    let mut y_t = Array5::<f64>::zeros((b, c, f, h, w));
    for (i, &t) in timesteps.iter().enumerate() {
        let noisy = schedule.forward_marginal(
            &y0.index_axis(Axis(0), i).to_owned(),
            t,
            &eps.index_axis(Axis(0), i).to_owned(),
        )?;
        y_t.index_axis_mut(Axis(0), i).assign(&noisy);
    }
    let bundles: Vec<ConditionBundle> = batch.iter().map(|e| e.bundle.clone()).collect();
    let conds = predictor.conditions(&bundles)?;
    let eps_hat = predictor.predict_noise(&to_tensor(&y_t, dtype)?, &timesteps, &conds)?;
    let loss = (to_tensor(&eps, dtype)? - eps_hat.to_dtype(dtype)?)?.sqr()?.mean_all()?;
    Ok(LossOutput { loss, timesteps })
}

/// One optimizer update. Returns the batch loss.
pub fn training_step(
    state: &mut TrainState,
    batch: &[TrainingExample],
    schedule: &NoiseSchedule,
    grad_clip: Option<f64>,
) -> Result<f64> {
    let dtype = state.model.dtype();
    let out = diffusion_loss(&state.model, batch, schedule, &mut state.rng, dtype)?;
    let loss = out.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let next_step = state.step + 1;
    if !loss.is_finite() {
        return Err(Error::Diverged {
            step: next_step,
            timesteps: out.timesteps,
            param_norm: state.model.params().global_norm()?,
            loss,
        });
    }
    let grads = out.loss.backward()?;
    let scale = match grad_clip {
        Some(max) => {
            let norm = grad_norm(state.model.params(), &grads)?;
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.optimizer.step(state.model.params(), &grads, scale)?;
    state.step = next_step;
    state.loss_history.push((next_step, loss));
    Ok(loss)
}

/// Source clips held in memory for cropping.
struct ClipSource {
    sequence: SilhouetteSequence,
}

pub struct ClipDataset {
    sources: Vec<ClipSource>,
    vocab: Vocabulary,
    clip_length: usize,
}

impl ClipDataset {
    /// Load every manifest entry in full at the model's frame size.
    pub fn load(
        manifest: &DatasetManifest,
        clip_length: usize,
        frame_size: (usize, usize),
        loop_pad: bool,
        workers: usize,
    ) -> Result<Self> {
        if manifest.entries.is_empty() {
            return Err(Error::Parameter("dataset has no sequences".into()));
        }
        let load = |entry: &crate::data::ManifestEntry| -> Result<ClipSource> {
            let length = if entry.frame_count < clip_length {
                if !loop_pad {
                    return Err(Error::Length {
                        sequence_id: entry.sequence_id.clone(),
                        available: entry.frame_count,
                        required: clip_length,
                    });
                }
                clip_length
            } else {
                entry.frame_count
            };
            let opts = LoadOptions {
                clip_length: length,
                frame_size,
                loop_pad,
            };
            Ok(ClipSource {
                sequence: load_sequence(manifest, &entry.sequence_id, &opts, 0)?,
            })
        };
        let sources = parallel_map(&manifest.entries, workers, load)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sources,
            vocab: Vocabulary::from_manifest(manifest),
            clip_length,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Uniform (sequence, crop start) pairs with replacement.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<TrainingExample>> {
        (0..batch_size)
            .map(|_| {
                let src = &self.sources[rng.random_range(0..self.sources.len())].sequence;
                let start = random_crop_start(src.clip_length(), self.clip_length, rng);
                let frames: Array3<f32> = src
                    .frames
                    .slice(s![start..start + self.clip_length, .., ..])
                    .to_owned();
                let seq = SilhouetteSequence {
                    frames,
                    ..src.clone()
                };
                TrainingExample::new(seq, &self.vocab)
            })
            .collect()
    }
}

fn append_loss_log(dir: &Path, step: u64, loss: f64, wall_time: f64) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(LOSS_LOG))?;
    let line = serde_json::json!({ "step": step, "loss": loss, "wall_time": wall_time });
    writeln!(f, "{line}")?;
    Ok(())
}

fn checkpoint_now(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<PathBuf> {
    let name = checkpoint_name(state.step);
    let path = dir.join(&name);
    save_checkpoint(&path, state, &cfg.schedule, Some(cfg))?;
    write_latest(dir, &name)?;
    Ok(path)
}

/// Continue training `state` until `cfg.total_steps`, checkpointing into `out_dir`.
pub fn run_training(
    state: &mut TrainState,
    data: &ClipDataset,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    if state.model.config().clip_length != cfg.clip_length {
        return Err(Error::Config(format!(
            "model clip length {} != training clip length {}",
            state.model.config().clip_length,
            cfg.clip_length
        )));
    }
    if &state.model.config().vocabulary != data.vocabulary() {
        return Err(Error::Config("model vocabulary does not match the dataset".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let schedule = cfg.schedule.build()?;
    state.model.attach_schedule(&schedule);
    let started = Instant::now();
    let mut last = None;
    while state.step < cfg.total_steps {
        let batch = data.sample_batch(cfg.batch_size, &mut state.rng)?;
        state.optimizer.config.learning_rate = cfg.learning_rate_at(state.step);
        let loss = training_step(state, &batch, &schedule, cfg.grad_clip)?;
        append_loss_log(out_dir, state.step, loss, started.elapsed().as_secs_f64())?;
        if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
            info!("step {} loss {loss:.5}", state.step);
        }
        if state.step % cfg.checkpoint_every == 0 {
            last = Some(checkpoint_now(out_dir, state, cfg)?);
        }
    }
    match last {
        Some(p) if state.step % cfg.checkpoint_every == 0 => Ok(p),
        _ => checkpoint_now(out_dir, state, cfg),
    }
}

/// Train a fresh model on `manifest`. The model's vocabulary is taken from the
/// manifest. Returns the final checkpoint path.
pub fn train(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    model_cfg: &DenoiserConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    cfg.validate()?;
    let model_cfg = DenoiserConfig {
        vocabulary: Vocabulary::from_manifest(manifest),
        clip_length: cfg.clip_length,
        ..model_cfg.clone()
    };
    let data = ClipDataset::load(manifest, cfg.clip_length, model_cfg.frame_size, cfg.loop_pad, cfg.workers)?;
    let model = build_denoiser(&model_cfg, cfg.seed)?;
    let mut state = TrainState::new(model, cfg.adam(), cfg.seed);
    run_training(&mut state, &data, cfg, out_dir)
}

/// Resume from a checkpoint and continue to `cfg.total_steps`.
pub fn resume(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<PathBuf> {
    let ckpt = checkpoint::load_checkpoint(checkpoint)?;
    let frame_size = ckpt.model.config().frame_size;
    let data = ClipDataset::load(manifest, cfg.clip_length, frame_size, cfg.loop_pad, cfg.workers)?;
    let mut state = ckpt.into_state();
    state.optimizer.config = cfg.adam();
    run_training(&mut state, &data, cfg, out_dir)
}
