//! Procedural 2D walker used as a stand-in silhouette dataset.
//!
//! A walker is a torso ellipse with two leg segments hanging from the hip.
//! Leg tips swing sinusoidally with an identity-specific frequency, phase and
//! amplitude, so every identity has its own gait signature. Rendering is a
//! pure function of `(seed, identity, sequence index, labels)`.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sequence_rel_path, write_frames, DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WalkerParams {
    pub torso_height: f64,
    pub torso_width: f64,
    pub limb_length: f64,
    /// Full gait cycles per clip.
    pub stride_frequency: f64,
    pub phase_offset: f64,
    /// Horizontal swing of the leg tips, in pixels.
    pub amplitude: f64,
}

impl WalkerParams {
    /// Identity-specific parameters for a `frame_size` canvas.
    pub fn draw(seed: u64, identity: usize, frame_size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(identity as u64);
        let s = frame_size as f64;
        Self {
            torso_height: s * rng.random_range(0.26..0.38),
            torso_width: s * rng.random_range(0.10..0.18),
            limb_length: s * rng.random_range(0.30..0.40),
            stride_frequency: rng.random_range(1.0..2.0),
            phase_offset: rng.random_range(0.0..2.0 * PI),
            amplitude: s * rng.random_range(0.08..0.18),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.torso_height,
            self.torso_width,
            self.limb_length,
            self.amplitude,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.phase_offset < 0.0 {
            return Err(Error::Parameter(format!("walker params must be positive: {self:?}")));
        }
        if self.stride_frequency < 1.0 {
            return Err(Error::Parameter(format!(
                "stride_frequency {} < 1 cycle per clip",
                self.stride_frequency
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkerConfig {
    pub frame_size: usize,
    /// Frames rendered per sequence on disk.
    pub frames_per_sequence: usize,
    /// Clip length the stride frequency is expressed against.
    pub clip_length: usize,
}

impl Default for WalkerConfig {
    fn default() -> Self {
        Self {
            frame_size: super::DEFAULT_FRAME_SIZE,
            frames_per_sequence: super::DEFAULT_CLIP_LENGTH,
            clip_length: super::DEFAULT_CLIP_LENGTH,
        }
    }
}

/// Horizontal foreshortening for a view label. Numeric labels are read as
/// degrees (side view at 90 is widest); other labels use their vocabulary slot.
fn view_scale(view: &str, views: &[String]) -> f64 {
    let angle = match view.trim().parse::<f64>() {
        Ok(deg) => deg.to_radians(),
        Err(_) => {
            let idx = views.iter().position(|v| v == view).unwrap_or(0);
            PI * (idx as f64 + 0.5) / views.len().max(1) as f64
        }
    };
    0.45 + 0.55 * angle.sin().abs()
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Render one sequence. `start_phase` shifts the gait cycle for this sequence.
pub fn render_walker(
    params: &WalkerParams,
    covariate: &str,
    horizontal_scale: f64,
    start_phase: f64,
    cfg: &WalkerConfig,
) -> Array3<f32> {
    let n = cfg.frame_size;
    let s = n as f64;
    let (torso_w_mult, torso_h_mult) = if covariate == "CL" { (1.35, 1.1) } else { (1.0, 1.0) };
    let ground = 0.96 * s;
    let hip_y = ground - params.limb_length;
    let cx = 0.5 * s;
    let half_w = 0.5 * params.torso_width * torso_w_mult * horizontal_scale;
    let half_h = 0.5 * params.torso_height * torso_h_mult;
    let cy = hip_y - 0.5 * params.torso_height + 0.15 * params.torso_height;
    let thickness = (0.06 * s).max(1.2);
    let bag = (covariate == "BG").then(|| {
        let r = (0.08 * s).max(1.5);
        (cx + half_w + 0.5 * r, cy + 0.2 * params.torso_height, r)
    });

    let mut frames = Array3::<f32>::zeros((cfg.frames_per_sequence, n, n));
    for k in 0..cfg.frames_per_sequence {
        let phase = 2.0 * PI * params.stride_frequency * k as f64 / cfg.clip_length as f64
            + params.phase_offset
            + start_phase;
        let bob = 0.04 * params.amplitude * (2.0 * phase).cos();
        let hip = (cx, hip_y + bob);
        let tips: Vec<(f64, f64)> = [0.0, PI]
            .iter()
            .map(|off| {
                let dx = params.amplitude * horizontal_scale * (phase + off).sin();
                let dy = (params.limb_length.powi(2) - dx * dx).max(0.0).sqrt();
                (hip.0 + dx, hip.1 + dy)
            })
            .collect();
        for y in 0..n {
            for x in 0..n {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let ex = (p.0 - cx) / half_w;
                let ey = (p.1 - cy - bob) / half_h;
                let mut on = ex * ex + ey * ey <= 1.0;
                on |= tips
                    .iter()
                    .any(|&tip| dist_to_segment(p, hip, tip) <= 0.5 * thickness);
                if let Some((bx, by, r)) = bag {
                    on |= (p.0 - bx).powi(2) + (p.1 - by).powi(2) <= r * r;
                }
                if on {
                    frames[[k, y, x]] = 1.0;
                }
            }
        }
    }
    frames
}

fn sequence_phase(seed: u64, identity: usize, covariate: &str, view: &str, seq: usize) -> f64 {
    // stable across platforms: derive from the labels' bytes, not a hasher
    let mut key = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in covariate.bytes().chain([b'/']).chain(view.bytes()) {
        key = key.wrapping_mul(0x100_0000_01b3).wrapping_add(u64::from(b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(((identity as u64) << 20) | seq as u64);
    rng.random_range(0.0..2.0 * PI)
}

/// Render a walker dataset under `root` and write its manifest.
///
/// Produces `sequences_per_id` sequences for every identity, covariate and
/// view combination.
pub fn synthesize_walker_dataset(
    root: &Path,
    n_ids: usize,
    sequences_per_id: usize,
    views: &[String],
    covariates: &[String],
    seed: u64,
    cfg: &WalkerConfig,
) -> Result<DatasetManifest> {
    if n_ids == 0 || sequences_per_id == 0 {
        return Err(Error::Parameter("n_ids and sequences_per_id must be >= 1".into()));
    }
    if views.is_empty() || covariates.is_empty() {
        return Err(Error::Parameter("need at least one view and covariate".into()));
    }
    if cfg.frame_size < 4 || cfg.frames_per_sequence == 0 || cfg.clip_length == 0 {
        return Err(Error::Parameter(format!("invalid walker config {cfg:?}")));
    }
    let mut manifest = DatasetManifest::new(root, n_ids);
    manifest.views = views.to_vec();
    manifest.covariates = covariates.to_vec();
    manifest.normalize_vocabularies();

    for identity in 0..n_ids {
        let params = WalkerParams::draw(seed, identity, cfg.frame_size);
        params.validate()?;
        for covariate in &manifest.covariates {
            for view in &manifest.views {
                let scale = view_scale(view, &manifest.views);
                for seq in 0..sequences_per_id {
                    let phase = sequence_phase(seed, identity, covariate, view, seq);
                    let frames = render_walker(&params, covariate, scale, phase, cfg);
                    let seq_name = format!("s{seq:02}");
                    let rel = sequence_rel_path(identity, covariate, view, &seq_name);
                    write_frames(&root.join(&rel), &frames)?;
                    manifest.entries.push(ManifestEntry {
                        sequence_id: format!("{identity:03}-{covariate}-{view}-{seq_name}"),
                        identity_index: identity,
                        view_label: view.clone(),
                        covariate_label: covariate.clone(),
                        frame_count: cfg.frames_per_sequence,
                        relative_path: rel,
                    });
                }
            }
        }
    }
    manifest.validate()?;
    manifest.save()?;
    Ok(manifest)
}
