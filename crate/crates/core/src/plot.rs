//! Diagnostic images: training loss curve, denoising trajectory grids and
//! pixel histograms. Plain rasters, no text rendering.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::Trajectory;

fn save<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Fraction of values inside `[0, 0.1] ∪ [0.9, 1]`.
pub fn bimodal_mass<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (mut n, mut hit) = (0usize, 0usize);
    for &v in values {
        n += 1;
        if (0.0..=0.1).contains(&v) || (0.9..=1.0).contains(&v) {
            hit += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// Equal-width bins over `[0, 1]`; the last bin includes 1.
    pub counts: Vec<usize>,
    pub below: usize,
    pub above: usize,
}

impl Histogram {
    pub fn new<'a>(values: impl IntoIterator<Item = &'a f64>, bins: usize) -> Self {
        let mut h = Histogram {
            counts: vec![0; bins.max(1)],
            below: 0,
            above: 0,
        };
        let n = h.counts.len();
        for &v in values {
            if v < 0.0 {
                h.below += 1;
            } else if v > 1.0 {
                h.above += 1;
            } else {
                h.counts[((v * n as f64) as usize).min(n - 1)] += 1;
            }
        }
        h
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.below + self.above
    }
}

/// Line plot of `(step, loss)` on a log scale.
pub fn loss_curve(history: &[(u64, f64)], path: &Path) -> Result<()> {
    let (w, h, pad) = (640u32, 360u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    for x in pad..w - pad {
        img.put_pixel(x, h - pad, Rgb([0, 0, 0]));
    }
    for y in pad..h - pad {
        img.put_pixel(pad, y, Rgb([0, 0, 0]));
    }
    let pts: Vec<(f64, f64)> = history
        .iter()
        .filter(|(_, l)| *l > 0.0 && l.is_finite())
        .map(|&(s, l)| (s as f64, l.log10()))
        .collect();
    if pts.len() >= 2 {
        let (x0, x1) = (pts[0].0, pts[pts.len() - 1].0.max(pts[0].0 + 1.0));
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
        let (pw, ph) = (f64::from(w - 2 * pad - 1), f64::from(h - 2 * pad - 1));
        let to_px = |(x, y): (f64, f64)| {
            (
                pad as f64 + 1.0 + (x - x0) / (x1 - x0) * pw,
                f64::from(h - pad) - 1.0 - (y - lo) / (hi - lo) * ph,
            )
        };
        for seg in pts.windows(2) {
            let (a, b) = (to_px(seg[0]), to_px(seg[1]));
            let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
            for k in 0..=n {
                let f = k as f64 / n as f64;
                let (x, y) = (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
                img.put_pixel(x.round() as u32, y.round() as u32, Rgb([200, 30, 30]));
            }
        }
    }
    save(&img, path)
}

/// Frames side by side, clamped to `[0, 1]`, with a one-pixel gap.
fn frame_row(frames: &Array3<f64>) -> GrayImage {
    let (f, h, w) = frames.dim();
    let width = (f * (w + 1)).saturating_sub(1) as u32;
    let mut img = GrayImage::from_pixel(width.max(1), h as u32, Luma([128]));
    for k in 0..f {
        for y in 0..h {
            for x in 0..w {
                let v = frames[[k, y, x]].clamp(0.0, 1.0);
                img.put_pixel((k * (w + 1) + x) as u32, y as u32, Luma([(v * 255.0).round() as u8]));
            }
        }
    }
    img
}

/// One grid image per recorded level (`level_NNN.png`) plus `strip.png`
/// stacking all levels from noise (top) to the final sample (bottom).
pub fn trajectory_images(traj: &Trajectory, dir: &Path) -> Result<()> {
    let rows: Vec<GrayImage> = traj.frames.iter().map(frame_row).collect();
    for (level, row) in traj.levels.iter().zip(&rows) {
        save(row, &dir.join(format!("level_{level:03}.png")))?;
    }
    if let Some(first) = rows.first() {
        let (w, h) = first.dimensions();
        let mut strip = GrayImage::from_pixel(w, (h + 1) * rows.len() as u32 - 1, Luma([128]));
        for (r, row) in rows.iter().enumerate() {
            image::imageops::replace(&mut strip, row, 0, i64::from(r as u32 * (h + 1)));
        }
        save(&strip, &dir.join("strip.png"))?;
    }
    Ok(())
}

/// Bar charts of several histograms stacked vertically.
pub fn histogram_image(hists: &[Histogram], path: &Path) -> Result<()> {
    let (panel_h, bar_w) = (120u32, 12u32);
    let bins = hists.first().map_or(1, |h| h.counts.len()) as u32;
    let w = bins * bar_w + 2;
    let mut img = RgbImage::from_pixel(w, panel_h * hists.len().max(1) as u32, Rgb([255, 255, 255]));
    for (p, h) in hists.iter().enumerate() {
        let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let base = (p as u32 + 1) * panel_h - 1;
        for (b, &c) in h.counts.iter().enumerate() {
            let bar = ((c as f64 / max) * f64::from(panel_h - 10)).round() as u32;
            for x in 1 + b as u32 * bar_w..(b as u32 + 1) * bar_w {
                for y in 0..bar {
                    img.put_pixel(x, base - y, Rgb([40, 90, 180]));
                }
            }
        }
        for x in 0..w {
            img.put_pixel(x, base, Rgb([0, 0, 0]));
        }
    }
    save(&img, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_everything() {
        let v = [-0.5, 0.0, 0.05, 0.5, 0.95, 1.0, 1.5];
        let h = Histogram::new(&v, 10);
        assert_eq!(h.total(), 7);
        assert_eq!((h.below, h.above), (1, 1));
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[9], 2);
        assert!((bimodal_mass(&v) - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn images_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let hist: Vec<(u64, f64)> = (1..50).map(|s| (s, 1.0 / s as f64)).collect();
        loss_curve(&hist, &dir.path().join("loss.png")).unwrap();
        let traj = Trajectory {
            levels: vec![10, 0],
            frames: vec![Array3::from_elem((3, 4, 5), 0.5), Array3::zeros((3, 4, 5))],
        };
        trajectory_images(&traj, &dir.path().join("t")).unwrap();
        let strip = image::open(dir.path().join("t/strip.png")).unwrap();
        assert_eq!((strip.width(), strip.height()), (17, 9));
        assert!(dir.path().join("t/level_010.png").exists());
        histogram_image(&[Histogram::new(&[0.1, 0.2], 5)], &dir.path().join("h.png")).unwrap();
        assert!(dir.path().join("h.png").exists());
    }
}
