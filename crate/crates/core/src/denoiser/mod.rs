//! The noise-prediction network: a 3D U-Net over `(F, H, W)` volumes.
//!
//! Convolutions are spatial (3x3 per frame). Temporal structure is handled
//! by factorized attention, spatial self-attention over `H x W` within each
//! frame followed by temporal self-attention over `F` at each pixel, placed at
//! the coarsest resolution levels. The timestep and identity token are
//! projected inside every residual block and added to its feature maps.

mod im2col;
pub mod layers;
pub mod params;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::{BatchConditions, ClipShape, ConditionBundle, ConditionEncoders, Vocabulary};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use layers::{silu, sinusoidal_table, Conv2d, GroupNorm, Linear, SelfAttention};
use params::{Init, ParamBuilder, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// What the network's output head estimates. The model always returns a
/// noise estimate; for `Sample` and `Velocity` the head output is converted
/// with the schedule, so the noise estimate follows the input exactly at high
/// noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    /// The head output is the noise estimate.
    #[default]
    Noise,
    /// The head predicts the clean clip `x0`: `eps = (y - sqrt(abar) x0) / sqrt(1 - abar)`.
    Sample,
    /// The head predicts `v = sqrt(abar) eps - sqrt(1 - abar) x0`:
    /// `eps = sqrt(1 - abar) y + sqrt(abar) v`.
    Velocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_dim: usize,
    pub channel_mults: Vec<usize>,
    pub in_channels: usize,
    pub clip_length: usize,
    pub frame_size: (usize, usize),
    pub attention_heads: usize,
    /// Residual blocks per encoder level (decoder levels get one more).
    pub res_blocks: usize,
    /// Number of coarsest levels that carry spatial + temporal attention.
    pub attention_levels: usize,
    /// Width of the view/covariate label embeddings.
    pub label_embed_dim: usize,
    pub zero_init_output: bool,
    pub prediction: Prediction,
    pub precision: Precision,
    pub vocabulary: Vocabulary,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_dim: 64,
            channel_mults: vec![1, 2, 4, 8],
            in_channels: 1,
            clip_length: crate::data::DEFAULT_CLIP_LENGTH,
            frame_size: (crate::data::DEFAULT_FRAME_SIZE, crate::data::DEFAULT_FRAME_SIZE),
            attention_heads: 4,
            res_blocks: 2,
            attention_levels: 2,
            label_embed_dim: 64,
            zero_init_output: true,
            prediction: Prediction::Noise,
            precision: Precision::F32,
            vocabulary: Vocabulary::new(1, &["090"], &["NM"]),
        }
    }
}

impl DenoiserConfig {
    /// Width of the timestep embedding and the identity token.
    pub fn time_dim(&self) -> usize {
        4 * self.base_dim
    }

    pub fn n_ids(&self) -> usize {
        self.vocabulary.n_ids
    }

    pub fn n_views(&self) -> usize {
        self.vocabulary.views.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.vocabulary.covariates.len()
    }

    pub fn clip_shape(&self) -> ClipShape {
        ClipShape {
            channels: self.in_channels,
            frames: self.clip_length,
            height: self.frame_size.0,
            width: self.frame_size.1,
        }
    }

    fn level_channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_dim).collect()
    }

    fn has_attention(&self, level: usize) -> bool {
        level + self.attention_levels >= self.channel_mults.len()
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.base_dim,
            self.in_channels,
            self.clip_length,
            self.frame_size.0,
            self.frame_size.1,
            self.attention_heads,
            self.res_blocks,
            self.label_embed_dim,
        ];
        if sizes.contains(&0) || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::Config(format!("all sizes must be >= 1: {self:?}")));
        }
        let factor = 1usize << (self.channel_mults.len() - 1);
        let (h, w) = self.frame_size;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Config(format!(
                "frame size {h}x{w} not divisible by {factor} for {} levels",
                self.channel_mults.len()
            )));
        }
        for (level, ch) in self.level_channels().into_iter().enumerate() {
            if self.has_attention(level) && ch % self.attention_heads != 0 {
                return Err(Error::Config(format!(
                    "{ch} channels at level {level} not divisible by {} heads",
                    self.attention_heads
                )));
            }
        }
        self.vocabulary.validate()
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    id_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

/// Inputs shared by every block of one forward pass.
struct Context {
    batch: usize,
    frames: usize,
    /// `(B, time_dim)` after the activation.
    time: Tensor,
    /// `(B, time_dim)` identity tokens.
    id_tokens: Tensor,
}

/// `(B, C)` per-sample vector to `(B * F, C, 1, 1)`.
fn per_frame(v: &Tensor, frames: usize) -> Result<Tensor> {
    let (b, c) = v.dims2()?;
    Ok(v.unsqueeze(1)?
        .broadcast_as((b, frames, c))?
        .contiguous()?
        .reshape((b * frames, c, 1, 1))?)
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, cond_dim: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                norm1: GroupNorm::new(pb, "norm1", c_in)?,
                conv1: Conv2d::new(pb, "conv1", c_in, c_out, 3, 1)?,
                time_proj: Linear::new(pb, "time_proj", cond_dim, c_out)?,
                id_proj: Linear::new(pb, "id_proj", cond_dim, c_out)?,
                norm2: GroupNorm::new(pb, "norm2", c_out)?,
                conv2: Conv2d::new(pb, "conv2", c_out, c_out, 3, 1)?,
                skip: if c_in != c_out {
                    Some(Conv2d::new(pb, "skip", c_in, c_out, 1, 1)?)
                } else {
                    None
                },
            })
        })
    }

    /// Identity and timestep enter together here; this is the single place the
    /// identity token touches the feature maps.
    fn inject(&self, h: &Tensor, ctx: &Context) -> Result<Tensor> {
        let cond = (self.time_proj.forward(&ctx.time)? + self.id_proj.forward(&ctx.id_tokens)?)?;
        Ok(h.broadcast_add(&per_frame(&cond, ctx.frames)?)?)
    }

    fn forward(&self, x: &Tensor, ctx: &Context) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let h = self.inject(&h, ctx)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct FactorizedAttention {
    spatial: SelfAttention,
    temporal: SelfAttention,
    channels: usize,
}

impl FactorizedAttention {
    fn new(pb: &mut ParamBuilder, name: &str, channels: usize, heads: usize) -> Result<Self> {
        pb.scoped(name, |pb| {
            Ok(Self {
                spatial: SelfAttention::new(pb, "spatial", channels, heads)?,
                temporal: SelfAttention::new(pb, "temporal", channels, heads)?,
                channels,
            })
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Context) -> Result<Tensor> {
        let (bf, c, h, w) = x.dims4()?;
        let (b, f) = (ctx.batch, ctx.frames);
        // spatial: tokens are the H*W pixels of one frame
        let tokens = x.reshape((bf, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let x = self
            .spatial
            .forward(&tokens, None)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bf, c, h, w))?;
        // temporal: tokens are the F frames at one pixel
        let tokens = x
            .reshape((b, f, c, h * w))?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .reshape((b * h * w, f, c))?;
        let positions: Vec<f64> = (0..f).map(|i| i as f64).collect();
        let pos = sinusoidal_table(&positions, self.channels, x.dtype())?;
        let out = self
            .temporal
            .forward(&tokens, Some(&pos))?
            .reshape((b, h * w, f, c))?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((bf, c, h, w))?;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    res: ResBlock,
    attn: Option<FactorizedAttention>,
}

impl Stage {
    fn forward(&self, x: &Tensor, ctx: &Context) -> Result<Tensor> {
        let h = self.res.forward(x, ctx)?;
        match &self.attn {
            Some(a) => a.forward(&h, ctx),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
struct Level {
    stages: Vec<Stage>,
    resample: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UNet {
    base_dim: usize,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    mid: (ResBlock, FactorizedAttention, ResBlock),
    up: Vec<Level>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    fn new(pb: &mut ParamBuilder, cfg: &DenoiserConfig) -> Result<Self> {
        let td = cfg.time_dim();
        let chans = cfg.level_channels();
        let heads = cfg.attention_heads;
        let time_in = Linear::new(pb, "time.fc1", cfg.base_dim, td)?;
        let time_out = Linear::new(pb, "time.fc2", td, td)?;
        let conv_in = Conv2d::new(pb, "conv_in", cfg.in_channels, chans[0], 3, 1)?;

        let mut skips = vec![chans[0]];
        let mut ch = chans[0];
        let mut down = Vec::new();
        for (i, &out) in chans.iter().enumerate() {
            let mut stages = Vec::new();
            for r in 0..cfg.res_blocks {
                let name = format!("down.{i}.{r}");
                let res = ResBlock::new(pb, &format!("{name}.res"), ch, out, td)?;
                let attn = if cfg.has_attention(i) {
                    Some(FactorizedAttention::new(pb, &format!("{name}.attn"), out, heads)?)
                } else {
                    None
                };
                stages.push(Stage { res, attn });
                ch = out;
                skips.push(ch);
            }
            let resample = if i + 1 < chans.len() {
                skips.push(ch);
                Some(Conv2d::new(pb, &format!("down.{i}.downsample"), ch, ch, 3, 2)?)
            } else {
                None
            };
            down.push(Level { stages, resample });
        }

        let mid = (
            ResBlock::new(pb, "mid.res1", ch, ch, td)?,
            FactorizedAttention::new(pb, "mid.attn", ch, heads)?,
            ResBlock::new(pb, "mid.res2", ch, ch, td)?,
        );

        let mut up = Vec::new();
        for (i, &out) in chans.iter().enumerate().rev() {
            let mut stages = Vec::new();
            for r in 0..=cfg.res_blocks {
                let name = format!("up.{i}.{r}");
                let skip_ch = skips.pop().expect("skip bookkeeping");
                let res = ResBlock::new(pb, &format!("{name}.res"), ch + skip_ch, out, td)?;
                let attn = if cfg.has_attention(i) {
                    Some(FactorizedAttention::new(pb, &format!("{name}.attn"), out, heads)?)
                } else {
                    None
                };
                stages.push(Stage { res, attn });
                ch = out;
            }
            let resample = if i > 0 {
                Some(Conv2d::new(pb, &format!("up.{i}.upsample"), ch, ch, 3, 1)?)
            } else {
                None
            };
            up.push(Level { stages, resample });
        }

        let norm_out = GroupNorm::new(pb, "norm_out", ch)?;
        let out_init = if cfg.zero_init_output {
            Init::Zeros
        } else {
            Init::FanIn(ch * 9)
        };
        let conv_out = Conv2d::with_init(pb, "conv_out", ch, cfg.in_channels, 3, 1, out_init)?;
        Ok(Self {
            base_dim: cfg.base_dim,
            time_in,
            time_out,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    fn forward(&self, x: &Tensor, timesteps: &[usize], id_tokens: &Tensor) -> Result<Tensor> {
        let (b, c, f, h, w) = x.dims5()?;
        let positions: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let temb = sinusoidal_table(&positions, self.base_dim, x.dtype())?;
        let temb = self.time_out.forward(&silu(&self.time_in.forward(&temb)?)?)?;
        let ctx = Context {
            batch: b,
            frames: f,
            time: silu(&temb)?,
            id_tokens: id_tokens.clone(),
        };

        let frames = x.permute((0, 2, 1, 3, 4))?.contiguous()?.reshape((b * f, c, h, w))?;
        let mut hs = vec![self.conv_in.forward(&frames)?];
        for level in &self.down {
            for stage in &level.stages {
                let next = stage.forward(hs.last().unwrap(), &ctx)?;
                hs.push(next);
            }
            if let Some(down) = &level.resample {
                let next = down.forward(hs.last().unwrap())?;
                hs.push(next);
            }
        }
        let mut h_cur = hs.last().unwrap().clone();
        h_cur = self.mid.0.forward(&h_cur, &ctx)?;
        h_cur = self.mid.1.forward(&h_cur, &ctx)?;
        h_cur = self.mid.2.forward(&h_cur, &ctx)?;
        for level in &self.up {
            for stage in &level.stages {
                let skip = hs.pop().expect("skip bookkeeping");
                h_cur = stage.forward(&Tensor::cat(&[&h_cur, &skip], 1)?, &ctx)?;
            }
            if let Some(up) = &level.resample {
                let (_, _, hh, ww) = h_cur.dims4()?;
                h_cur = up.forward(&h_cur.upsample_nearest2d(2 * hh, 2 * ww)?)?;
            }
        }
        let out = self.conv_out.forward(&silu(&self.norm_out.forward(&h_cur)?)?)?;
        Ok(out.reshape((b, f, c, h, w))?.permute((0, 2, 1, 3, 4))?.contiguous()?)
    }
}

/// Anything that can play the role of the noise predictor: the real network
/// or a test double wired to a known answer.
pub trait NoisePredictor {
    /// Shape `(C, F, H, W)` of one clip.
    fn clip_shape(&self) -> ClipShape;

    fn conditions(&self, bundles: &[ConditionBundle]) -> Result<BatchConditions>;

    /// `y_t` is the noisy clip `(B, C, F, H, W)` without the condition bias.
    fn predict_noise(&self, y_t: &Tensor, timesteps: &[usize], conds: &BatchConditions) -> Result<Tensor>;
}

/// The noise predictor with its condition encoders and parameters.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    params: ParamStore,
    cond: ConditionEncoders,
    unet: UNet,
    alpha_bar: Option<Vec<f64>>,
}

/// Build a model with parameters drawn deterministically from `seed`.
pub fn build_denoiser(config: &DenoiserConfig, seed: u64) -> Result<DenoiserModel> {
    config.validate()?;
    let mut params = ParamStore::new(config.precision.dtype());
    let (cond, unet) = {
        let mut pb = ParamBuilder::new(&mut params, seed);
        let cond = ConditionEncoders::new(
            &mut pb,
            &config.vocabulary,
            config.label_embed_dim,
            config.time_dim(),
            config.in_channels,
            config.frame_size,
        )?;
        let unet = pb.scoped("unet", |pb| UNet::new(pb, config))?;
        (cond, unet)
    };
    Ok(DenoiserModel {
        config: config.clone(),
        params,
        cond,
        unet,
        alpha_bar: None,
    })
}

impl DenoiserModel {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoders(&self) -> &ConditionEncoders {
        &self.cond
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Encode conditions for a batch of bundles.
    pub fn conditions(&self, bundles: &[ConditionBundle]) -> Result<BatchConditions> {
        self.cond.build_batch(bundles, self.config.clip_shape())
    }

    /// Give the model the noise schedule. Needed unless the head predicts noise.
    pub fn attach_schedule(&mut self, schedule: &NoiseSchedule) {
        self.alpha_bar = Some(schedule.alpha_bar().to_vec());
    }

    /// Predict the noise in `y_t` of shape `(B, C, F, H, W)`.
    pub fn predict_noise(&self, y_t: &Tensor, timesteps: &[usize], conds: &BatchConditions) -> Result<Tensor> {
        let [c, f, h, w] = self.config.clip_shape().dims();
        let b = timesteps.len();
        if y_t.dims() != [b, c, f, h, w] {
            return Err(Error::shape(&[b, c, f, h, w], y_t.dims()));
        }
        if conds.input_bias.dims() != y_t.dims() {
            return Err(Error::shape(y_t.dims(), conds.input_bias.dims()));
        }
        let td = self.config.time_dim();
        if conds.id_tokens.dims() != [b, td] {
            return Err(Error::shape(&[b, td], conds.id_tokens.dims()));
        }
        let total = y_t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        if !total.is_finite() {
            return Err(Error::Numeric {
                t: timesteps.first().copied().unwrap_or(0),
                detail: "non-finite denoiser input".into(),
            });
        }
        let dtype = self.dtype();
        let y = y_t.to_dtype(dtype)?;
        let x = (&y + conds.input_bias.to_dtype(dtype)?)?;
        let ids = conds.id_tokens.to_dtype(dtype)?;
        let out = self.unet.forward(&x, timesteps, &ids)?;
        match self.config.prediction {
            Prediction::Noise => Ok(out),
            Prediction::Sample | Prediction::Velocity => {
                let abar = self
                    .alpha_bar
                    .as_ref()
                    .ok_or_else(|| Error::Config("this prediction target needs a noise schedule".into()))?;
                let mut signal = Vec::with_capacity(b);
                let mut noise = Vec::with_capacity(b);
                for &t in timesteps {
                    let a = *abar
                        .get(t)
                        .ok_or_else(|| Error::Parameter(format!("timestep {t} outside schedule of {}", abar.len())))?;
                    signal.push(a.sqrt());
                    noise.push((1.0 - a).sqrt());
                }
                let col = |v: Vec<f64>| -> Result<Tensor> {
                    Ok(Tensor::from_vec(v, (b, 1, 1, 1, 1), self.device())?.to_dtype(dtype)?)
                };
                let (signal, noise) = (col(signal)?, col(noise)?);
                if self.config.prediction == Prediction::Sample {
                    Ok(y.sub(&out.broadcast_mul(&signal)?)?.broadcast_div(&noise)?)
                } else {
                    Ok(y.broadcast_mul(&noise)?.add(&out.broadcast_mul(&signal)?)?)
                }
            }
        }
    }
}

impl NoisePredictor for DenoiserModel {
    fn clip_shape(&self) -> ClipShape {
        self.config.clip_shape()
    }

    fn conditions(&self, bundles: &[ConditionBundle]) -> Result<BatchConditions> {
        DenoiserModel::conditions(self, bundles)
    }

    fn predict_noise(&self, y_t: &Tensor, timesteps: &[usize], conds: &BatchConditions) -> Result<Tensor> {
        DenoiserModel::predict_noise(self, y_t, timesteps, conds)
    }
}
