//! Ancestral sampling: start from unit noise and walk the reverse chain down
//! to a clean clip, one network call per step.

use std::path::Path;

use candle_core::DType;
use ndarray::{Array3, Array5, Axis, Dimension, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::{mix_identities, BatchConditions, ConditionBundle};
use crate::convert::{to_array, to_tensor};
use crate::data::{from_model_range, write_frames, SilhouetteSequence};
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

pub const TRAJECTORY_SNAPSHOTS: usize = 8;

#[derive(Debug, Clone)]
pub struct GenerationRequest {
    pub bundle: ConditionBundle,
    pub seed: u64,
    pub n_variations: usize,
    pub export_trajectory: bool,
    pub binarize_threshold: Option<f64>,
    /// Identity index written on the output sequences. Defaults to the first
    /// active identity of the bundle.
    pub output_identity: Option<usize>,
}

impl GenerationRequest {
    pub fn new(bundle: ConditionBundle, seed: u64) -> Self {
        Self {
            bundle,
            seed,
            n_variations: 1,
            export_trajectory: false,
            binarize_threshold: None,
            output_identity: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_variations == 0 {
            return Err(Error::Parameter("n_variations must be >= 1".into()));
        }
        if let Some(th) = self.binarize_threshold {
            if !(th > 0.0 && th < 1.0) {
                return Err(Error::Parameter(format!("binarize threshold {th} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Snapshots of the running sample, mapped to `[0, 1]` but not clamped.
/// `levels[k]` is the noise level of `frames[k]`: `T` is the initial noise,
/// `0` the finished sample.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub levels: Vec<usize>,
    pub frames: Vec<Array3<f64>>,
}

#[derive(Debug, Clone)]
pub struct GeneratedClip {
    pub variation: usize,
    pub sequence: SilhouetteSequence,
    pub trajectory: Option<Trajectory>,
}

/// Posterior mean: `(y_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)`.
pub fn reverse_mean<D: Dimension>(
    schedule: &NoiseSchedule,
    y_t: &ndarray::Array<f64, D>,
    eps_hat: &ndarray::Array<f64, D>,
    t: usize,
) -> Result<ndarray::Array<f64, D>> {
    schedule.check_t(t)?;
    if y_t.shape() != eps_hat.shape() {
        return Err(Error::shape(y_t.shape(), eps_hat.shape()));
    }
    let a = schedule.alpha()[t];
    let ab = schedule.alpha_bar()[t];
    let k = (1.0 - a) / (1.0 - ab).sqrt();
    let inv = 1.0 / a.sqrt();
    Ok(Zip::from(y_t).and(eps_hat).map_collect(|&y, &e| inv * (y - k * e)))
}

/// One reverse step on a batch `(B, C, F, H, W)`. `z` must be `None` at `t = 0`
/// and unit normal otherwise.
pub fn reverse_step<P: NoisePredictor>(
    predictor: &P,
    y_t: &Array5<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    conds: &BatchConditions,
    z: Option<&Array5<f64>>,
) -> Result<Array5<f64>> {
    schedule.check_t(t)?;
    let b = y_t.dim().0;
    let eps_hat: Array5<f64> = to_array(&predictor.predict_noise(&to_tensor(y_t, DType::F64)?, &vec![t; b], conds)?)?;
    let mut out = reverse_mean(schedule, y_t, &eps_hat, t)?;
    match (t, z) {
        (0, Some(_)) => return Err(Error::Parameter("noise must be zero at t = 0".into())),
        (0, None) => {}
        (_, None) => return Err(Error::Parameter(format!("missing noise at t = {t}"))),
        (_, Some(z)) => {
            if z.shape() != out.shape() {
                return Err(Error::shape(out.shape(), z.shape()));
            }
            let sigma = schedule.beta()[t].sqrt();
            out.zip_mut_with(z, |o, &n| *o += sigma * n);
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            t,
            detail: "non-finite sample in reverse step".into(),
        });
    }
    Ok(out)
}

/// Noise levels recorded for a trajectory: `count` values evenly spaced from
/// `steps` down to 0.
pub fn snapshot_levels(steps: usize, count: usize) -> Vec<usize> {
    let count = count.max(2);
    let mut levels: Vec<usize> = (0..count)
        .map(|k| ((steps as f64) * (1.0 - k as f64 / (count - 1) as f64)).round() as usize)
        .collect();
    levels.dedup();
    levels
}

fn normal5<R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize, usize, usize, usize)) -> Array5<f64> {
    Array5::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn to_unit(y: &Array5<f64>) -> Array3<f64> {
    from_model_range(&y.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned())
}

/// Noise stream for variation `v` of `seed`.
pub fn variation_rng(seed: u64, variation: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(variation as u64);
    rng
}

fn sample_one<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    conds: &BatchConditions,
    req: &GenerationRequest,
    variation: usize,
) -> Result<GeneratedClip> {
    let [c, f, h, w] = predictor.clip_shape().dims();
    let mut rng = variation_rng(req.seed, variation);
    let steps = schedule.steps();
    let levels = if req.export_trajectory {
        snapshot_levels(steps, TRAJECTORY_SNAPSHOTS)
    } else {
        Vec::new()
    };
    let mut trajectory = Trajectory {
        levels: Vec::new(),
        frames: Vec::new(),
    };
    let mut y = normal5(&mut rng, (1, c, f, h, w));
    let mut record = |level: usize, y: &Array5<f64>| {
        if levels.contains(&level) {
            trajectory.levels.push(level);
            trajectory.frames.push(to_unit(y));
        }
    };
    record(steps, &y);
    for t in (0..steps).rev() {
        let z = (t > 0).then(|| normal5(&mut rng, (1, c, f, h, w)));
        y = reverse_step(predictor, &y, t, schedule, conds, z.as_ref())?;
        record(t, &y);
    }
    let mut frames = to_unit(&y).mapv(|v| v.clamp(0.0, 1.0));
    if let Some(th) = req.binarize_threshold {
        frames.mapv_inplace(|v| if v >= th { 1.0 } else { 0.0 });
    }
    let identity = req
        .output_identity
        .or_else(|| req.bundle.identity.active().first().copied())
        .unwrap_or(0);
    let sequence = SilhouetteSequence::new(
        frames.mapv(|v| v as f32),
        identity,
        req.bundle.view_label.clone(),
        req.bundle.covariate_label.clone(),
        format!("gen-{identity:03}-{}-{}-s{}-v{variation:02}", req.bundle.covariate_label, req.bundle.view_label, req.seed),
    )?;
    Ok(GeneratedClip {
        variation,
        sequence,
        trajectory: req.export_trajectory.then_some(trajectory),
    })
}

/// Run every variation of `req`. A failure in one variation does not stop
/// the others.
pub fn generate<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    req: &GenerationRequest,
) -> Result<Vec<Result<GeneratedClip>>> {
    req.validate()?;
    let conds = predictor.conditions(std::slice::from_ref(&req.bundle))?;
    Ok((0..req.n_variations)
        .map(|v| sample_one(predictor, schedule, &conds, req, v))
        .collect())
}

/// Generate one clip for a novel identity made by activating several ids.
pub fn generate_novel<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    id_indices: &[usize],
    n_ids: usize,
    view: &str,
    covariate: &str,
    seed: u64,
    output_identity: usize,
) -> Result<GeneratedClip> {
    let identity = mix_identities(id_indices, n_ids, false)?;
    let req = GenerationRequest {
        output_identity: Some(output_identity),
        ..GenerationRequest::new(ConditionBundle::new(identity, view, covariate), seed)
    };
    generate(predictor, schedule, &req)?
        .pop()
        .expect("one variation requested")
}

/// Write a clip's frames under `dir`.
pub fn write_clip(dir: &Path, clip: &GeneratedClip) -> Result<()> {
    write_frames(dir, &clip.sequence.frames)
}
