//! Silhouette sequences, dataset manifests and the procedural walker.

mod manifest;
pub mod walker;

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, Luma};
use ndarray::{s, Array, Array3, Dimension};
use num_traits::Float;
use rand::Rng;

pub use manifest::{load_dataset, DatasetManifest, ManifestEntry, MANIFEST_FILE};
pub use walker::{synthesize_walker_dataset, WalkerConfig, WalkerParams};

use crate::error::{Error, Result};

pub const DEFAULT_CLIP_LENGTH: usize = 30;
pub const DEFAULT_FRAME_SIZE: usize = 64;
pub const COVARIATES: [&str; 3] = ["BG", "CL", "NM"];

/// A fixed-length clip of silhouette probabilities, shape `(F, H, W)`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteSequence {
    pub frames: Array3<f32>,
    pub identity_index: usize,
    pub view_label: String,
    pub covariate_label: String,
    pub sequence_id: String,
}

impl SilhouetteSequence {
    pub fn new(
        frames: Array3<f32>,
        identity_index: usize,
        view_label: impl Into<String>,
        covariate_label: impl Into<String>,
        sequence_id: impl Into<String>,
    ) -> Result<Self> {
        let seq = Self {
            frames,
            identity_index,
            view_label: view_label.into(),
            covariate_label: covariate_label.into(),
            sequence_id: sequence_id.into(),
        };
        if let Some(v) = seq.frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation {
                entry: seq.sequence_id,
                reason: format!("frame value {v} outside [0, 1]"),
            });
        }
        Ok(seq)
    }

    pub fn clip_length(&self) -> usize {
        self.frames.dim().0
    }

    pub fn frame_size(&self) -> (usize, usize) {
        let (_, h, w) = self.frames.dim();
        (h, w)
    }

    /// Check the clip-length and identity invariants against a model/dataset.
    pub fn check(&self, clip_length: usize, n_ids: usize) -> Result<()> {
        if self.clip_length() != clip_length {
            return Err(Error::Length {
                sequence_id: self.sequence_id.clone(),
                available: self.clip_length(),
                required: clip_length,
            });
        }
        if self.identity_index >= n_ids {
            return Err(Error::Validation {
                entry: self.sequence_id.clone(),
                reason: format!("identity_index {} >= n_ids {n_ids}", self.identity_index),
            });
        }
        Ok(())
    }
}

/// Affine map `x -> 2x - 1` from silhouette probabilities to the model range.
pub fn to_model_range<A: Float, D: Dimension>(frames: &Array<A, D>) -> Array<A, D> {
    let two = A::one() + A::one();
    frames.mapv(|x| two * x - A::one())
}

/// Inverse of [`to_model_range`]. Does not clamp.
pub fn from_model_range<A: Float, D: Dimension>(frames: &Array<A, D>) -> Array<A, D> {
    let two = A::one() + A::one();
    frames.mapv(|x| (x + A::one()) / two)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    pub clip_length: usize,
    pub frame_size: (usize, usize),
    /// Wrap around the source when it is shorter than the clip. Off by default.
    pub loop_pad: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            clip_length: DEFAULT_CLIP_LENGTH,
            frame_size: (DEFAULT_FRAME_SIZE, DEFAULT_FRAME_SIZE),
            loop_pad: false,
        }
    }
}

/// Pick a uniformly random crop start for a source of `frame_count` frames.
pub fn random_crop_start<R: Rng + ?Sized>(
    frame_count: usize,
    clip_length: usize,
    rng: &mut R,
) -> usize {
    if frame_count <= clip_length {
        0
    } else {
        rng.random_range(0..=frame_count - clip_length)
    }
}

fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::load(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn decode_frame(path: &Path, (h, w): (usize, usize)) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let gray = img.to_luma8();
    if gray.dimensions() == (w as u32, h as u32) {
        Ok(gray)
    } else {
        Ok(image::imageops::resize(&gray, w as u32, h as u32, FilterType::Triangle))
    }
}

/// Load `clip_length` frames of a sequence starting at `start`, resized to
/// `frame_size` and scaled to `[0, 1]`.
pub fn load_sequence(
    manifest: &DatasetManifest,
    sequence_id: &str,
    opts: &LoadOptions,
    start: usize,
) -> Result<SilhouetteSequence> {
    let entry = manifest.entry(sequence_id).ok_or_else(|| Error::Validation {
        entry: sequence_id.into(),
        reason: "not in manifest".into(),
    })?;
    let dir = manifest.sequence_dir(entry);
    let files = frame_files(&dir)?;
    let n = files.len();
    let needed = start + opts.clip_length;
    if n == 0 || (!opts.loop_pad && needed > n) {
        return Err(Error::Length {
            sequence_id: sequence_id.into(),
            available: n.saturating_sub(start),
            required: opts.clip_length,
        });
    }
    let (h, w) = opts.frame_size;
    let mut frames = Array3::<f32>::zeros((opts.clip_length, h, w));
    for k in 0..opts.clip_length {
        let img = decode_frame(&files[(start + k) % n], opts.frame_size)?;
        let mut slot = frames.slice_mut(s![k, .., ..]);
        for (y, row) in img.rows().enumerate() {
            for (x, px) in row.enumerate() {
                slot[[y, x]] = f32::from(px.0[0]) / 255.0;
            }
        }
    }
    let seq = SilhouetteSequence::new(
        frames,
        entry.identity_index,
        &entry.view_label,
        &entry.covariate_label,
        sequence_id,
    )?;
    seq.check(opts.clip_length, manifest.n_ids)?;
    Ok(seq)
}

/// Load every frame of a sequence. Frames keep their stored size unless
/// `frame_size` is given.
pub fn load_full(
    manifest: &DatasetManifest,
    sequence_id: &str,
    frame_size: Option<(usize, usize)>,
) -> Result<SilhouetteSequence> {
    let entry = manifest.entry(sequence_id).ok_or_else(|| Error::Validation {
        entry: sequence_id.into(),
        reason: "not in manifest".into(),
    })?;
    let files = frame_files(&manifest.sequence_dir(entry))?;
    let first = files.first().ok_or_else(|| Error::Length {
        sequence_id: sequence_id.into(),
        available: 0,
        required: 1,
    })?;
    let frame_size = match frame_size {
        Some(fs) => fs,
        None => {
            let (w, h) = image::image_dimensions(first).map_err(|e| Error::Decode {
                path: first.clone(),
                reason: e.to_string(),
            })?;
            (h as usize, w as usize)
        }
    };
    let opts = LoadOptions {
        clip_length: files.len(),
        frame_size,
        loop_pad: false,
    };
    load_sequence(manifest, sequence_id, &opts, 0)
}

/// Write `sequences` under `root` in the standard layout, one directory per
/// sequence id, and save the manifest.
pub fn write_dataset(root: &Path, n_ids: usize, sequences: &[SilhouetteSequence]) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest::new(root, n_ids);
    for seq in sequences {
        let rel = sequence_rel_path(seq.identity_index, &seq.covariate_label, &seq.view_label, &seq.sequence_id);
        write_frames(&root.join(&rel), &seq.frames)?;
        manifest.entries.push(ManifestEntry {
            sequence_id: seq.sequence_id.clone(),
            identity_index: seq.identity_index,
            view_label: seq.view_label.clone(),
            covariate_label: seq.covariate_label.clone(),
            frame_count: seq.clip_length(),
            relative_path: rel,
        });
        manifest.views.push(seq.view_label.clone());
        manifest.covariates.push(seq.covariate_label.clone());
    }
    manifest.normalize_vocabularies();
    manifest.validate()?;
    manifest.save()?;
    Ok(manifest)
}

/// Encode one frame in `[0, 1]` as an 8-bit grayscale image.
pub fn frame_to_image(frame: ndarray::ArrayView2<f32>) -> GrayImage {
    let (h, w) = frame.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = frame[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

/// Write frames as zero-padded `NNNN.png` files into `dir`.
pub fn write_frames(dir: &Path, frames: &Array3<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, frame) in frames.outer_iter().enumerate() {
        let path = dir.join(format!("{k:04}.png"));
        frame_to_image(frame)
            .save(&path)
            .map_err(|e| Error::Decode {
                path: path.clone(),
                reason: e.to_string(),
            })?;
    }
    Ok(())
}

/// Relative directory for a sequence in the standard layout.
pub fn sequence_rel_path(identity: usize, covariate: &str, view: &str, seq: &str) -> String {
    format!("{identity:03}/{covariate}/{view}/{seq}")
}

/// Map `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("loader thread panicked"))
            .collect()
    })
}
