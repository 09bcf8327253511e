//! Dataset augmentation with generated clips, seed sweeps, and train/test
//! splits for downstream recognition experiments.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{make_identity, mix_identities, ConditionBundle};
use crate::data::{sequence_rel_path, write_frames, DatasetManifest, ManifestEntry, SilhouetteSequence};
use crate::denoiser::NoisePredictor;
use crate::error::{Error, Result};
use crate::eval::{gbs, Embedder, Pairing};
use crate::sampler::{generate, GenerationRequest};
use crate::schedule::NoiseSchedule;
use crate::trainer::checkpoint::{load_checkpoint, resolve_checkpoint};

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationMode {
    /// Real data plus generated clips for every original identity.
    OriginalIds,
    /// Real data plus novel identities mixed from pairs of originals.
    NovelIds,
    /// Real data, generated originals and novel identities.
    Combined,
    /// Generated originals and novel identities, no real data.
    SyntheticOnly,
}

impl AugmentationMode {
    fn keeps_real(self) -> bool {
        !matches!(self, AugmentationMode::SyntheticOnly)
    }

    fn generates_originals(self) -> bool {
        !matches!(self, AugmentationMode::NovelIds)
    }

    fn generates_novel(self) -> bool {
        !matches!(self, AugmentationMode::OriginalIds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPlan {
    pub mode: AugmentationMode,
    pub n_original: usize,
    pub variations_per_setting: usize,
    /// Pairs mixed into novel identities. Consecutive pairs when absent.
    pub id_mixing_pairs: Option<Vec<(usize, usize)>>,
    /// Views to generate; all model views when absent.
    pub views: Option<Vec<String>>,
    /// Covariates to generate; all model covariates when absent.
    pub covariates: Option<Vec<String>>,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        Self {
            mode: AugmentationMode::Combined,
            n_original: 0,
            variations_per_setting: 5,
            id_mixing_pairs: None,
            views: None,
            covariates: None,
        }
    }
}

impl AugmentationPlan {
    pub fn new(mode: AugmentationMode, n_original: usize) -> Self {
        Self {
            mode,
            n_original,
            ..Self::default()
        }
    }

    pub fn mixing_pairs(&self) -> Vec<(usize, usize)> {
        match &self.id_mixing_pairs {
            Some(p) => p.clone(),
            None => (1..self.n_original).map(|i| (i - 1, i)).collect(),
        }
    }

    pub fn n_novel(&self) -> usize {
        if self.mode.generates_novel() {
            self.mixing_pairs().len()
        } else {
            0
        }
    }

    /// Identities in the output manifest.
    pub fn total_ids(&self) -> usize {
        self.n_original + self.n_novel()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_original == 0 || self.variations_per_setting == 0 {
            return Err(Error::Config("n_original and variations_per_setting must be >= 1".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.mixing_pairs() {
            if a == b || a >= self.n_original || b >= self.n_original {
                return Err(Error::Config(format!("bad mixing pair ({a}, {b}) for {} ids", self.n_original)));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Config(format!("mixing pair ({a}, {b}) repeated")));
            }
        }
        Ok(())
    }
}

/// One generation setting in an augmentation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisJob {
    pub output_identity: usize,
    pub sources: Vec<usize>,
    pub view: String,
    pub covariate: String,
    pub seed: u64,
    pub sequence_ids: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct AugmentationLayout {
    /// Output manifest with every entry the run will write.
    pub manifest: DatasetManifest,
    /// Real entries copied from the source dataset.
    pub copied: Vec<ManifestEntry>,
    pub jobs: Vec<SynthesisJob>,
}

/// Seed for setting `k` of a run seeded with `seed`.
pub fn setting_seed(seed: u64, k: usize) -> u64 {
    seed ^ (k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Lay out an augmentation run without generating anything.
pub fn plan_layout(
    plan: &AugmentationPlan,
    source: &DatasetManifest,
    model_views: &[String],
    model_covariates: &[String],
    clip_length: usize,
    out_root: &Path,
    seed: u64,
) -> Result<AugmentationLayout> {
    plan.validate()?;
    if source.n_ids != plan.n_original {
        return Err(Error::Config(format!(
            "plan expects {} original ids, dataset has {}",
            plan.n_original, source.n_ids
        )));
    }
    let views = plan.views.clone().unwrap_or_else(|| model_views.to_vec());
    let covariates = plan.covariates.clone().unwrap_or_else(|| model_covariates.to_vec());
    for v in &views {
        if !model_views.contains(v) {
            return Err(Error::Vocabulary { kind: "view", label: v.clone() });
        }
    }
    for c in &covariates {
        if !model_covariates.contains(c) {
            return Err(Error::Vocabulary { kind: "covariate", label: c.clone() });
        }
    }
    let mut manifest = DatasetManifest::new(out_root, plan.total_ids());
    let copied = if plan.mode.keeps_real() {
        source.entries.clone()
    } else {
        Vec::new()
    };
    manifest.entries.extend(copied.iter().cloned());

    let mut settings: Vec<(usize, Vec<usize>)> = Vec::new();
    if plan.mode.generates_originals() {
        settings.extend((0..plan.n_original).map(|i| (i, vec![i])));
    }
    if plan.mode.generates_novel() {
        for (k, (a, b)) in plan.mixing_pairs().into_iter().enumerate() {
            settings.push((plan.n_original + k, vec![a, b]));
        }
    }
    let mut jobs = Vec::new();
    for (output_identity, sources) in settings {
        for covariate in &covariates {
            for view in &views {
                let sequence_ids: Vec<String> = (0..plan.variations_per_setting)
                    .map(|v| format!("syn-{output_identity:03}-{covariate}-{view}-v{v:02}"))
                    .collect();
                for id in &sequence_ids {
                    manifest.entries.push(ManifestEntry {
                        sequence_id: id.clone(),
                        identity_index: output_identity,
                        view_label: view.clone(),
                        covariate_label: covariate.clone(),
                        frame_count: clip_length,
                        relative_path: sequence_rel_path(output_identity, covariate, view, id),
                    });
                }
                jobs.push(SynthesisJob {
                    output_identity,
                    sources: sources.clone(),
                    view: view.clone(),
                    covariate: covariate.clone(),
                    seed: setting_seed(seed, jobs.len()),
                    sequence_ids,
                });
            }
        }
    }
    for e in &manifest.entries {
        manifest.views.push(e.view_label.clone());
        manifest.covariates.push(e.covariate_label.clone());
    }
    manifest.normalize_vocabularies();
    manifest.validate()?;
    Ok(AugmentationLayout {
        manifest,
        copied,
        jobs,
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: PathBuf,
    pub checkpoint_sha256: String,
    pub plan: AugmentationPlan,
    pub seed: u64,
    pub jobs: Vec<SynthesisJob>,
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn copy_dir(from: &Path, to: &Path) -> Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            fs::copy(entry.path(), to.join(entry.file_name()))?;
        }
    }
    Ok(())
}

/// Generate an augmented dataset under `out_root` from a trained checkpoint.
pub fn build_augmentation(
    checkpoint: &Path,
    source: &DatasetManifest,
    plan: &AugmentationPlan,
    seed: u64,
    out_root: &Path,
) -> Result<DatasetManifest> {
    let checkpoint = resolve_checkpoint(checkpoint)?;
    let ckpt = load_checkpoint(&checkpoint)?;
    let model = &ckpt.model;
    let schedule = ckpt.header.schedule.build()?;
    let vocab = &model.config().vocabulary;
    if vocab.n_ids != plan.n_original {
        return Err(Error::Config(format!(
            "checkpoint has {} ids, plan expects {}",
            vocab.n_ids, plan.n_original
        )));
    }
    let layout = plan_layout(
        plan,
        source,
        &vocab.views,
        &vocab.covariates,
        model.config().clip_length,
        out_root,
        seed,
    )?;
    for e in &layout.copied {
        copy_dir(&source.sequence_dir(e), &out_root.join(&e.relative_path))?;
    }
    for job in &layout.jobs {
        let identity = if job.sources.len() == 1 {
            make_identity(job.sources[0], vocab.n_ids)?
        } else {
            mix_identities(&job.sources, vocab.n_ids, false)?
        };
        let req = GenerationRequest {
            n_variations: plan.variations_per_setting,
            output_identity: Some(job.output_identity),
            ..GenerationRequest::new(ConditionBundle::new(identity, &job.view, &job.covariate), job.seed)
        };
        for (clip, id) in generate(model, &schedule, &req)?.into_iter().zip(&job.sequence_ids) {
            let clip = clip?;
            let entry = layout.manifest.entry(id).expect("laid out above");
            write_frames(&out_root.join(&entry.relative_path), &clip.sequence.frames)?;
        }
    }
    layout.manifest.save()?;
    let provenance = Provenance {
        checkpoint_sha256: file_sha256(&checkpoint)?,
        checkpoint,
        plan: plan.clone(),
        seed,
        jobs: layout.jobs,
    };
    let text = serde_json::to_string_pretty(&provenance).map_err(|e| Error::Io(e.into()))?;
    fs::write(out_root.join(PROVENANCE_FILE), text + "\n")?;
    Ok(layout.manifest)
}

#[derive(Debug, Clone)]
pub struct SeedSweep {
    pub seeds: Vec<u64>,
    pub clips: Vec<SilhouetteSequence>,
    /// `(i, j, mean absolute pixel difference)` for every `i < j`.
    pub pairwise: Vec<(usize, usize, f64)>,
    /// Same-identity score of each clip against the reference set.
    pub gbs: Option<Vec<f64>>,
}

pub fn mean_abs_diff(a: &SilhouetteSequence, b: &SilhouetteSequence) -> f64 {
    let n = a.frames.len().max(1) as f64;
    a.frames
        .iter()
        .zip(b.frames.iter())
        .map(|(x, y)| f64::from((x - y).abs()))
        .sum::<f64>()
        / n
}

/// One clip per seed, with pairwise differences and optional scores against
/// `reference`.
pub fn seed_sweep<P: NoisePredictor>(
    predictor: &P,
    schedule: &NoiseSchedule,
    bundle: &ConditionBundle,
    seeds: &[u64],
    reference: Option<(&[SilhouetteSequence], &dyn Embedder)>,
) -> Result<SeedSweep> {
    if seeds.len() < 2 {
        return Err(Error::Parameter("a seed sweep needs at least two seeds".into()));
    }
    let clips = seeds
        .iter()
        .map(|&s| {
            generate(predictor, schedule, &GenerationRequest::new(bundle.clone(), s))?
                .remove(0)
                .map(|c| c.sequence)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut pairwise = Vec::new();
    for i in 0..clips.len() {
        for j in i + 1..clips.len() {
            pairwise.push((i, j, mean_abs_diff(&clips[i], &clips[j])));
        }
    }
    let gbs = match reference {
        Some((real, embedder)) => Some(
            clips
                .iter()
                .map(|c| Ok(gbs(real, std::slice::from_ref(c), embedder, &Pairing::SameIdentity)?.overall_score))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(SeedSweep {
        seeds: seeds.to_vec(),
        clips,
        pairwise,
        gbs,
    })
}

fn sub_manifest(source: &DatasetManifest, keep: impl Fn(&ManifestEntry) -> bool) -> DatasetManifest {
    DatasetManifest {
        entries: source.entries.iter().filter(|e| keep(e)).cloned().collect(),
        ..source.clone()
    }
}

/// Hold out `fraction` of each identity's sequences (at least one when the
/// identity has two or more). Returns `(train, test)`.
pub fn closed_set_split(
    source: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    check_fraction(fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = BTreeSet::new();
    for id in source.present_ids() {
        let mut ids: Vec<&str> = source
            .entries
            .iter()
            .filter(|e| e.identity_index == id)
            .map(|e| e.sequence_id.as_str())
            .collect();
        ids.sort();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let k = if n >= 2 { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) } else { 0 };
        test.extend(ids[..k].iter().map(|s| s.to_string()));
    }
    Ok((
        sub_manifest(source, |e| !test.contains(&e.sequence_id)),
        sub_manifest(source, |e| test.contains(&e.sequence_id)),
    ))
}

/// Hold out `fraction` of the identities entirely. Returns `(train, test)`.
pub fn open_set_split(
    source: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    check_fraction(fraction)?;
    let mut ids: Vec<usize> = source.present_ids().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::Parameter("open-set split needs at least two identities".into()));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let test: BTreeSet<usize> = ids[..k].iter().copied().collect();
    Ok((
        sub_manifest(source, |e| !test.contains(&e.identity_index)),
        sub_manifest(source, |e| test.contains(&e.identity_index)),
    ))
}

/// Copy the sequences of `subset` (a manifest over the source dataset) into
/// a standalone dataset at `out_root`.
pub fn materialize(subset: &DatasetManifest, out_root: &Path) -> Result<DatasetManifest> {
    for e in &subset.entries {
        copy_dir(&subset.sequence_dir(e), &out_root.join(&e.relative_path))?;
    }
    let manifest = DatasetManifest {
        root_path: out_root.to_path_buf(),
        ..subset.clone()
    };
    manifest.save()?;
    Ok(manifest)
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("split fraction {f} outside (0, 1)")))
    }
}
