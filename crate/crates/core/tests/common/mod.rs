#![allow(dead_code)]

use candle_core::{DType, Tensor};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gaitcraft::conditioning::Vocabulary;
use gaitcraft::data::SilhouetteSequence;
use gaitcraft::denoiser::{build_denoiser, DenoiserConfig, DenoiserModel, Precision};
use gaitcraft::schedule::ScheduleConfig;
use gaitcraft::trainer::{diffusion_loss, TrainingExample};

/// dim 8, mults (1, 2), F = 4, 8x8 frames, double precision, random output layer.
pub fn tiny_config() -> DenoiserConfig {
    DenoiserConfig {
        base_dim: 8,
        channel_mults: vec![1, 2],
        clip_length: 4,
        frame_size: (8, 8),
        attention_heads: 2,
        res_blocks: 1,
        attention_levels: 1,
        label_embed_dim: 8,
        zero_init_output: false,
        precision: Precision::F64,
        vocabulary: Vocabulary::new(2, &["090"], &["NM"]),
        ..DenoiserConfig::default()
    }
}

fn random_batch(cfg: &DenoiserConfig, seed: u64) -> Vec<TrainingExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = cfg.frame_size;
    (0..2)
        .map(|i| {
            let frames = Array3::from_shape_simple_fn((cfg.clip_length, h, w), || {
                if rng.random_bool(0.3) {
                    1.0f32
                } else {
                    0.0
                }
            });
            let seq = SilhouetteSequence::new(frames, i, "090", "NM", format!("s{i}")).unwrap();
            TrainingExample::new(seq, &cfg.vocabulary).unwrap()
        })
        .collect()
}

fn loss_of(model: &DenoiserModel, batch: &[TrainingExample], seed: u64) -> Tensor {
    let schedule = ScheduleConfig::scaled_linear(100).build().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    diffusion_loss(model, batch, &schedule, &mut rng, DType::F64).unwrap().loss
}

pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-7);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compare backprop gradients with central differences on `n` parameter
/// entries drawn from every tensor in turn.
pub fn gradient_check(n: usize, seed: u64) -> Vec<GradSample> {
    let cfg = tiny_config();
    let model = build_denoiser(&cfg, seed).unwrap();
    let batch = random_batch(&cfg, seed);
    let loss = loss_of(&model, &batch, seed);
    let grads = loss.backward().unwrap();
    let names: Vec<String> = model.params().iter().map(|(k, _)| k.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let h = 1e-5;
    let value = |m: &DenoiserModel| loss_of(m, &batch, seed).to_scalar::<f64>().unwrap();
    (0..n)
        .map(|k| {
            let name = &names[(k * 7919) % names.len()];
            let var = model.params().get(name).unwrap();
            let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let index = rng.random_range(0..original.len());
            let analytic = grads
                .get(var.as_tensor())
                .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[index])
                .unwrap_or(0.0);
            let shifted = |delta: f64| {
                let mut v = original.clone();
                v[index] += delta;
                let t = Tensor::from_vec(v, var.dims(), var.device()).unwrap();
                model.params().assign(name, &t).unwrap();
                value(&model)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let t = Tensor::from_vec(original, var.dims(), var.device()).unwrap();
            model.params().assign(name, &t).unwrap();
            GradSample {
                name: name.clone(),
                index,
                analytic,
                numeric,
            }
        })
        .collect()
}

pub const TINY_RUN_CONFIG: &str = r#"
[model]
base_dim = 8
channel_mults = [1, 2]
frame_size = [8, 8]
attention_heads = 2
res_blocks = 1
attention_levels = 1
label_embed_dim = 8

[train]
clip_length = 4
batch_size = 2
learning_rate = 1e-3
checkpoint_every = 1000
log_every = 0
schedule = { steps = 20, beta_start = 0.005, beta_end = 0.5 }
"#;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Run the CLI binary with `args` and extra environment variables.
pub fn gaitcraft(args: &[&str], envs: &[(&str, &str)]) -> Run {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_gaitcraft"));
    cmd.args(args).env_remove("GAITCRAFT_CONFIG").env("RUST_LOG", "warn");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn tree(dir: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut std::collections::BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
