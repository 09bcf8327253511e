//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use gaitcraft::conditioning::{make_identity, BatchConditions, ClipShape, ConditionBundle, Vocabulary};
use gaitcraft::convert::to_tensor;
use gaitcraft::data::{synthesize_walker_dataset, DatasetManifest, ManifestEntry, SilhouetteSequence, WalkerConfig};
use gaitcraft::denoiser::{DenoiserConfig, NoisePredictor, Precision, Prediction};
use gaitcraft::eval::{cosine, gbs, gbs_from_embeddings, load_all, Embedder, EmbeddingVector, GeiEmbedder, Pairing};
use gaitcraft::experiments::{plan_layout, AugmentationMode, AugmentationPlan};
use gaitcraft::plot::bimodal_mass;
use gaitcraft::sampler::{generate, generate_novel, reverse_step, GenerationRequest};
use gaitcraft::schedule::{NoiseSchedule, ScheduleConfig};
use gaitcraft::trainer::checkpoint::{load_checkpoint, save_checkpoint};
use gaitcraft::trainer::{self, ClipDataset, LrSchedule, TrainConfig, TrainState};
use gaitcraft::Result;

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn criterion_1() -> Outcome {
    let s = NoiseSchedule::linear(100, 1e-4, 0.02).map_err(err)?;
    let mut worst = 0.0f64;
    let mut prod = 1.0f64;
    for i in 0..100 {
        let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 99.0;
        prod *= 1.0 - beta;
        worst = worst.max((s.alpha_bar()[i] - prod).abs());
    }
    let decreasing = s.alpha_bar().windows(2).all(|w| w[1] < w[0]);
    check(worst <= 1e-12 && decreasing, format!("max |abar - oracle| = {worst:.2e}, strictly decreasing = {decreasing}"))
}

fn criterion_2() -> Outcome {
    let s = NoiseSchedule::linear(100, 1e-4, 0.02).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = Array1::from_shape_simple_fn(16, || rng.random_range(-1.0..1.0));
    let eps = Array1::from_shape_simple_fn(16, || rng.sample(StandardNormal));
    let zero = Array1::zeros(16);
    let mut exact = true;
    for t in [0, 1, 50, 99] {
        let a = s.alpha()[t];
        let ab = s.alpha_bar()[t];
        exact &= s.forward_step(&y, t, &zero).map_err(err)? == y.mapv(|v| a.sqrt() * v);
        exact &= s.forward_marginal(&y, t, &zero).map_err(err)? == y.mapv(|v| ab.sqrt() * v);
    }
    exact &= s.forward_marginal(&y, 0, &eps).map_err(err)? == s.forward_step(&y, 0, &eps).map_err(err)?;

    let n = 10_000;
    let mut worst = 0.0f64;
    for t in [0, 10, 50, 99] {
        let ab = s.alpha_bar()[t];
        let y0 = Array1::from(vec![-1.0, 0.3, 1.0]);
        for (k, &v0) in y0.iter().enumerate() {
            let draws: Vec<f64> = (0..n)
                .map(|_| {
                    let e = Array1::from_shape_simple_fn(3, || rng.sample(StandardNormal));
                    s.forward_marginal(&y0, t, &e).unwrap()[k]
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se_mean = ((1.0 - ab) / n as f64).sqrt();
            let se_var = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
            worst = worst
                .max((mean - ab.sqrt() * v0).abs() / se_mean)
                .max((var - (1.0 - ab)).abs() / se_var);
        }
    }
    check(exact && worst < 4.0, format!("identities exact = {exact}, worst moment deviation = {worst:.2} SE"))
}

/// Returns the true noise it was built with.
struct TrueNoise {
    eps: Array5<f64>,
}

impl NoisePredictor for TrueNoise {
    fn clip_shape(&self) -> ClipShape {
        let (_, c, f, h, w) = self.eps.dim();
        ClipShape {
            channels: c,
            frames: f,
            height: h,
            width: w,
        }
    }

    fn conditions(&self, bundles: &[ConditionBundle]) -> Result<BatchConditions> {
        let (_, c, f, h, w) = self.eps.dim();
        let dev = candle_core::Device::Cpu;
        Ok(BatchConditions {
            id_tokens: candle_core::Tensor::zeros((bundles.len(), 4), candle_core::DType::F64, &dev)?,
            input_bias: candle_core::Tensor::zeros((bundles.len(), c, f, h, w), candle_core::DType::F64, &dev)?,
        })
    }

    fn predict_noise(&self, _: &candle_core::Tensor, _: &[usize], _: &BatchConditions) -> Result<candle_core::Tensor> {
        to_tensor(&self.eps, candle_core::DType::F64)
    }
}

fn criterion_3() -> Outcome {
    let s = NoiseSchedule::linear(100, 1e-4, 0.02).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = (1, 1, 3, 4, 4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.random_range(0..100);
        let y0 = Array5::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0));
        let eps = Array5::from_shape_simple_fn(shape, || rng.sample(StandardNormal));
        let y_t = s.forward_marginal(&y0, t, &eps).map_err(err)?;
        let pred = TrueNoise { eps: eps.clone() };
        let conds = pred.conditions(&[ConditionBundle::new(make_identity(0, 1).unwrap(), "v", "c")]).map_err(err)?;
        let zeros = Array5::zeros(shape);
        let z = (t > 0).then_some(&zeros);
        let out = reverse_step(&pred, &y_t, t, &s, &conds, z).map_err(err)?;
        let beta: f64 = 1e-4 + (0.02 - 1e-4) * t as f64 / 99.0;
        let alpha = 1.0 - beta;
        let abar: f64 = (0..=t).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0)).product();
        let c_eps = (1.0 - abar).sqrt() - (1.0 - alpha) / (1.0 - abar).sqrt();
        for ((o, y), e) in out.iter().zip(&y0).zip(&eps) {
            let expected = (abar.sqrt() * y + c_eps * e) / alpha.sqrt();
            worst = worst.max((o - expected).abs());
        }
    }
    check(worst <= 1e-10, format!("100 cases, max deviation {worst:.2e}"))
}

fn criterion_4() -> Outcome {
    let samples = common::gradient_check(32, 3);
    let worst = samples.iter().map(|s| s.relative_error()).fold(0.0, f64::max);
    let nonzero = samples.iter().filter(|s| s.analytic.abs() > 1e-8).count();
    check(
        worst < 1e-3 && samples.len() >= 32,
        format!("{} parameters ({nonzero} with nonzero gradient), max relative error {worst:.2e}", samples.len()),
    )
}

const OVERFIT_STEPS: u64 = 1200;

fn overfit_model_config() -> DenoiserConfig {
    DenoiserConfig {
        base_dim: 8,
        channel_mults: vec![1, 2],
        clip_length: 8,
        frame_size: (16, 16),
        attention_heads: 2,
        res_blocks: 1,
        attention_levels: 1,
        label_embed_dim: 8,
        prediction: Prediction::Velocity,
        precision: Precision::F32,
        ..DenoiserConfig::default()
    }
}

fn overfit_train_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 2e-3,
        lr_schedule: LrSchedule::Cosine,
        batch_size: 4,
        total_steps: OVERFIT_STEPS,
        seed: 0,
        checkpoint_every: OVERFIT_STEPS,
        clip_length: 8,
        schedule: ScheduleConfig::scaled_linear(100),
        log_every: 0,
        ..TrainConfig::default()
    }
}

struct Overfit {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    checkpoint: std::path::PathBuf,
    seconds: f64,
}

fn train_overfit() -> std::result::Result<Overfit, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let data = dir.path().join("walkers");
    let walker = WalkerConfig {
        frame_size: 16,
        frames_per_sequence: 12,
        clip_length: 8,
    };
    let manifest = synthesize_walker_dataset(&data, 2, 4, &["090".into()], &["NM".into()], 1, &walker).map_err(err)?;
    let started = Instant::now();
    let checkpoint = trainer::train(&manifest, &overfit_train_config(), &overfit_model_config(), &dir.path().join("run"))
        .map_err(err)?;
    Ok(Overfit {
        _dir: dir,
        data,
        checkpoint,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn criterion_5(run: &Overfit) -> Outcome {
    let ckpt = load_checkpoint(&run.checkpoint).map_err(err)?;
    let losses: Vec<f64> = ckpt.loss_history.iter().map(|(_, l)| *l).collect();
    let w = (losses.len() / 20).max(1);
    let (first, last) = (window_mean(&losses[..w]), window_mean(&losses[losses.len() - w..]));
    let loss_ok = last < 0.25 * first;

    let schedule = ckpt.header.schedule.build().map_err(err)?;
    let real = load_all(&run.data, None, 1).map_err(err)?;
    let mut synthetic = Vec::new();
    let (mut start_mass, mut end_mass) = (Vec::new(), Vec::new());
    for id in 0..2 {
        let req = GenerationRequest {
            n_variations: 2,
            export_trajectory: true,
            ..GenerationRequest::new(ConditionBundle::new(make_identity(id, 2).unwrap(), "090", "NM"), 11)
        };
        for clip in generate(&ckpt.model, &schedule, &req).map_err(err)? {
            let clip = clip.map_err(err)?;
            let traj = clip.trajectory.as_ref().ok_or("no trajectory")?;
            start_mass.push(bimodal_mass(traj.frames[0].iter()));
            let finished: Vec<f64> = clip.sequence.frames.iter().map(|&v| f64::from(v)).collect();
            end_mass.push(bimodal_mass(finished.iter()));
            synthesize_check(&clip.sequence)?;
            synthetic.push(clip.sequence);
        }
    }
    let ids: BTreeSet<usize> = [0, 1].into();
    let same = gbs(&real, &synthetic, &GeiEmbedder, &Pairing::SameIdentity).map_err(err)?;
    let cross = gbs(&real, &synthetic, &GeiEmbedder, &Pairing::shifted(&ids)).map_err(err)?;
    let gbs_ok = same.overall_score > cross.overall_score;
    let start = start_mass.iter().cloned().fold(0.0, f64::max);
    let end = end_mass.iter().cloned().fold(1.0, f64::min);
    let hist_ok = end >= 0.8 && start < 0.4;
    check(
        loss_ok && gbs_ok && hist_ok && run.seconds <= 900.0,
        format!(
            "(a) loss {first:.4} -> {last:.4}; (b) GBS same {:.4} vs cross {:.4}; (c) bimodal mass t=T max {start:.3}, final min {end:.3}; {} steps in {:.0} s",
            same.overall_score, cross.overall_score, OVERFIT_STEPS, run.seconds
        ),
    )
}

fn synthesize_check(seq: &SilhouetteSequence) -> std::result::Result<(), String> {
    if seq.frames.iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(format!("{} has pixels outside [0, 1]", seq.sequence_id))
    }
}

fn centroid(vs: &[EmbeddingVector]) -> Vec<f64> {
    let mut c = vec![0.0; vs[0].values.len()];
    for v in vs {
        for (a, b) in c.iter_mut().zip(&v.values) {
            *a += b;
        }
    }
    c
}

fn criterion_6(run: &Overfit) -> Outcome {
    let started = Instant::now();
    let ckpt = load_checkpoint(&run.checkpoint).map_err(err)?;
    let schedule = ckpt.header.schedule.build().map_err(err)?;
    let seed = 21;
    let pure = |id: usize| -> std::result::Result<Vec<SilhouetteSequence>, String> {
        let req = GenerationRequest {
            n_variations: 2,
            ..GenerationRequest::new(ConditionBundle::new(make_identity(id, 2).unwrap(), "090", "NM"), seed)
        };
        generate(&ckpt.model, &schedule, &req)
            .map_err(err)?
            .into_iter()
            .map(|c| c.map(|c| c.sequence).map_err(err))
            .collect()
    };
    let mixed = || generate_novel(&ckpt.model, &schedule, &[0, 1], 2, "090", "NM", seed, 2).map(|c| c.sequence);
    let (p0, p1, m) = (pure(0)?, pure(1)?, mixed().map_err(err)?);
    let deterministic = pure(0)? == p0 && pure(1)? == p1 && mixed().map_err(err)? == m;
    let embed = |s: &[SilhouetteSequence]| GeiEmbedder.embed_all(s).map_err(err);
    let em = GeiEmbedder.embed(&m).map_err(err)?;
    let c0 = cosine(&em.values, &centroid(&embed(&p0)?)).ok_or("zero embedding")?;
    let c1 = cosine(&em.values, &centroid(&embed(&p1)?)).ok_or("zero embedding")?;
    let secs = started.elapsed().as_secs_f64();
    check(
        c0 < 0.999 && c1 < 0.999 && deterministic && secs < 120.0,
        format!("cos(mixed, pure-0) {c0:.5}, cos(mixed, pure-1) {c1:.5}, deterministic = {deterministic}, {secs:.0} s"),
    )
}

fn determinism_setup(dir: &Path) -> Result<(DatasetManifest, TrainConfig, DenoiserConfig)> {
    let walker = WalkerConfig {
        frame_size: 8,
        frames_per_sequence: 6,
        clip_length: 4,
    };
    let manifest = synthesize_walker_dataset(&dir.join("d"), 2, 2, &["090".into()], &["NM".into()], 5, &walker)?;
    let train = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        total_steps: 100,
        checkpoint_every: 1000,
        clip_length: 4,
        schedule: ScheduleConfig::scaled_linear(20),
        log_every: 0,
        workers: 1,
        ..TrainConfig::default()
    };
    let model = DenoiserConfig {
        precision: Precision::F32,
        zero_init_output: true,
        vocabulary: Vocabulary::from_manifest(&manifest),
        ..common::tiny_config()
    };
    Ok((manifest, train, model))
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let (manifest, cfg, model_cfg) = determinism_setup(dir.path()).map_err(err)?;
    let a = trainer::train(&manifest, &cfg, &model_cfg, &dir.path().join("a")).map_err(err)?;
    let b = trainer::train(&manifest, &cfg, &model_cfg, &dir.path().join("b")).map_err(err)?;
    let (ca, cb) = (load_checkpoint(&a).map_err(err)?, load_checkpoint(&b).map_err(err)?);
    let params_equal = ca.model.params().checksum().map_err(err)? == cb.model.params().checksum().map_err(err)?;
    let history_equal = ca.loss_history == cb.loss_history && ca.loss_history.len() == 100;

    let schedule = ca.header.schedule.build().map_err(err)?;
    let req = GenerationRequest {
        n_variations: 2,
        ..GenerationRequest::new(ConditionBundle::new(make_identity(1, 2).unwrap(), "090", "NM"), 3)
    };
    let gen = |m| -> std::result::Result<Vec<SilhouetteSequence>, String> {
        generate(m, &schedule, &req)
            .map_err(err)?
            .into_iter()
            .map(|c| c.map(|c| c.sequence).map_err(err))
            .collect()
    };
    let generate_equal = gen(&ca.model)? == gen(&cb.model)?;

    // checkpoint round trip: one more step from the live state vs from the reloaded file
    let data = ClipDataset::load(&manifest, cfg.clip_length, model_cfg.frame_size, false, 1).map_err(err)?;
    let mut live: TrainState = ca.into_state();
    let path = dir.path().join("mid.bin");
    save_checkpoint(&path, &live, &cfg.schedule, Some(&cfg)).map_err(err)?;
    let mut reloaded = load_checkpoint(&path).map_err(err)?.into_state();
    let next = |s: &mut TrainState| -> std::result::Result<f64, String> {
        let batch = data.sample_batch(cfg.batch_size, &mut s.rng).map_err(err)?;
        trainer::training_step(s, &batch, &schedule, None).map_err(err)
    };
    let (l1, l2) = (next(&mut live)?, next(&mut reloaded)?);
    let resume_ok = (l1 - l2).abs() <= 1e-6;
    check(
        params_equal && history_equal && generate_equal && resume_ok,
        format!(
            "params equal = {params_equal}, loss histories equal = {history_equal}, generations equal = {generate_equal}, next loss {l1:.8} vs {l2:.8}"
        ),
    )
}

fn source_manifest(n: usize) -> DatasetManifest {
    let mut m = DatasetManifest::new("/nonexistent", n);
    for id in 0..n {
        m.entries.push(ManifestEntry {
            sequence_id: format!("{id:03}-NM-090-s00"),
            identity_index: id,
            view_label: "090".into(),
            covariate_label: "NM".into(),
            frame_count: 30,
            relative_path: format!("{id:03}/NM/090/s00"),
        });
    }
    m.views = vec!["090".into()];
    m.covariates = vec!["NM".into()];
    m
}

fn criterion_8() -> Outcome {
    let mut lines = Vec::new();
    let mut all = true;
    for n in [2usize, 15, 74] {
        let src = source_manifest(n);
        let views = vec!["090".to_string()];
        let covs = vec!["NM".to_string()];
        let count = |mode| -> std::result::Result<(usize, usize, usize), String> {
            let plan = AugmentationPlan::new(mode, n);
            let layout = plan_layout(&plan, &src, &views, &covs, 30, Path::new("/nonexistent/out"), 0).map_err(err)?;
            let novel: BTreeSet<usize> = layout.jobs.iter().filter(|j| j.sources.len() > 1).map(|j| j.output_identity).collect();
            let present = layout.manifest.present_ids().len();
            if present != layout.manifest.n_ids {
                return Err(format!("manifest declares {} ids but holds {present}", layout.manifest.n_ids));
            }
            Ok((plan.n_novel(), novel.len(), present))
        };
        let (novel_plan, novel_jobs, _) = count(AugmentationMode::NovelIds)?;
        let (_, _, combined) = count(AugmentationMode::Combined)?;
        let ok = novel_plan == n - 1 && novel_jobs == n - 1 && combined == 2 * n - 1;
        all &= ok;
        lines.push(format!("n={n}: novel {novel_jobs}, combined {combined}"));
    }
    check(all, lines.join("; "))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seqs: Vec<SilhouetteSequence> = (0..4)
        .map(|id| {
            let frames = ndarray::Array3::from_shape_simple_fn((5, 8, 8), || if rng.random_bool(0.4) { 1.0f32 } else { 0.0 });
            SilhouetteSequence::new(frames, id, "090", "NM", format!("s{id}")).unwrap()
        })
        .collect();
    let self_score = gbs(&seqs, &seqs, &GeiEmbedder, &Pairing::SameIdentity).map_err(err)?.overall_score;
    let self_ok = (self_score - 1.0).abs() <= 1e-6;

    let vec_of = |rng: &mut ChaCha8Rng, id: usize, k: usize| EmbeddingVector {
        values: (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        source_sequence_id: format!("{id}-{k}"),
        identity_index: id,
    };
    let mut bounded = true;
    let mut worst_scale = 0.0f64;
    for trial in 0..50 {
        let real: Vec<_> = (0..3).flat_map(|id| (0..3).map(move |k| (id, k))).map(|(id, k)| vec_of(&mut rng, id, k)).collect();
        let syn: Vec<_> = (0..3).map(|id| vec_of(&mut rng, id, 9)).collect();
        let r = gbs_from_embeddings(&real, &syn, &Pairing::SameIdentity, "t").map_err(err)?;
        bounded &= (-1.0..=1.0).contains(&r.overall_score) && r.per_identity.values().all(|s| (-1.0..=1.0).contains(s));
        let c = 10f64.powi(trial % 7 - 3) * (1.0 + rng.random::<f64>());
        let scale = |vs: &[EmbeddingVector]| -> Vec<EmbeddingVector> {
            vs.iter()
                .map(|v| EmbeddingVector {
                    values: v.values.iter().map(|x| x * c).collect(),
                    ..v.clone()
                })
                .collect()
        };
        let scaled = gbs_from_embeddings(&scale(&real), &scale(&syn), &Pairing::SameIdentity, "t").map_err(err)?;
        worst_scale = worst_scale.max((scaled.overall_score - r.overall_score).abs());
    }
    check(
        self_ok && bounded && worst_scale <= 1e-12,
        format!("gbs(X, X) = {self_score:.9}, bounded = {bounded}, max scale drift {worst_scale:.1e}"),
    )
}

fn criterion_10() -> Outcome {
    use common::gaitcraft as cli;
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(err)?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, common::TINY_RUN_CONFIG).map_err(err)?;
    let c = cfg.to_string_lossy().into_owned();
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("synth-data", vec!["synth-data", "--out", &p("data"), "--ids", "2", "--seqs", "2", "--seed", "7", "--frame-size", "8", "--frames", "6", "--clip-length", "4"].into_iter().map(String::from).collect()),
        ("train", vec!["train", "--config", &c, "--data", &p("data"), "--out", &p("run"), "--steps", "200"].into_iter().map(String::from).collect()),
        ("generate", vec!["generate", "--checkpoint", &p("run"), "--out", &p("gen"), "--seed", "1", "--id", "0", "--variations", "2"].into_iter().map(String::from).collect()),
        ("generate --mix-ids", vec!["generate", "--checkpoint", &p("run"), "--out", &p("mix"), "--seed", "1", "--mix-ids", "0,1", "--export-trajectory"].into_iter().map(String::from).collect()),
        ("eval-gbs", vec!["eval-gbs", "--real", &p("data"), "--synthetic", &p("gen"), "--out", &p("gbs.json")].into_iter().map(String::from).collect()),
        ("export-embeddings", vec!["export-embeddings", "--data", &p("data"), "--synthetic", &p("mix"), "--out", &p("emb.csv")].into_iter().map(String::from).collect()),
    ];
    for (name, args) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let r = cli(&args, &[]);
        if r.code != 0 {
            return Err(format!("{name} exited {}: {}", r.code, r.stderr.trim()));
        }
    }
    let formats = (|| -> std::result::Result<String, String> {
        let data = gaitcraft::data::load_dataset(p("data")).map_err(err)?;
        let ckpt = load_checkpoint(Path::new(&p("run"))).map_err(err)?;
        if ckpt.header.step != 200 || !dir.path().join("run/loss_curve.png").is_file() {
            return Err("train outputs incomplete".into());
        }
        let gen = gaitcraft::data::load_dataset(p("gen")).map_err(err)?;
        let mix = gaitcraft::data::load_dataset(p("mix")).map_err(err)?;
        let traj = dir.path().join("mix/trajectory").join(&mix.entries[0].sequence_id);
        for f in ["strip.png", "histogram.png", "histogram.json"] {
            if !traj.join(f).is_file() {
                return Err(format!("missing trajectory/{f}"));
            }
        }
        let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("gbs.json")).map_err(err)?).map_err(err)?;
        let score = report["overall_score"].as_f64().ok_or("no overall_score")?;
        if !(-1.0..=1.0).contains(&score) {
            return Err(format!("score {score} out of range"));
        }
        let rows = gaitcraft::eval::read_embedding_table(Path::new(&p("emb.csv"))).map_err(err)?;
        if rows.len() != data.entries.len() + mix.entries.len() {
            return Err("embedding table row count".into());
        }
        Ok(format!("{} real, {} generated, {} mixed clips; overall_score {score:.4}", data.entries.len(), gen.entries.len(), mix.entries.len()))
    })()?;
    let secs = started.elapsed().as_secs_f64();
    check(secs <= 1200.0, format!("{formats}; {secs:.0} s"))
}

fn main() {
    let mut results: BTreeMap<usize, Outcome> = BTreeMap::new();
    let quick: [(usize, fn() -> Outcome); 4] = [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4)];
    for (n, f) in quick {
        results.insert(n, f());
    }
    match train_overfit() {
        Ok(run) => {
            results.insert(5, criterion_5(&run));
            results.insert(6, criterion_6(&run));
        }
        Err(e) => {
            results.insert(5, Err(format!("training failed: {e}")));
            results.insert(6, Err(format!("training failed: {e}")));
        }
    }
    let rest: [(usize, fn() -> Outcome); 4] = [(7, criterion_7), (8, criterion_8), (9, criterion_9), (10, criterion_10)];
    for (n, f) in rest {
        results.insert(n, f());
    }
    let mut failed = 0;
    for (n, r) in &results {
        match r {
            Ok(d) => println!("criterion {n:>2}: PASS  {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2}: FAIL  {d}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
