//! Synthetic four-view cases.
//!
//! Malignant cases carry one lesion that shows up in both views of a single
//! side at matching coordinates. Benign cases may carry unrelated single-view
//! blobs of the same contrast, so spotting a blob in one view is not enough
//! to tell the classes apart.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CaseRecord, GrayImage, Label, View};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, substream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub cases: usize,
    pub malignant_fraction: f64,
    /// Peak contrast of a planted blob, on the 0..255 scale.
    pub blob_intensity: f64,
    /// Blob radius in pixels; the Gaussian's sigma is half of it.
    pub blob_radius: f64,
    /// Per-view chance of a stray blob in a benign case.
    pub distractor_rate: f64,
    /// Std of per-pixel Gaussian noise, on the 0..255 scale.
    pub noise_scale: f64,
    /// Max offset in pixels between the two views of a planted pair.
    pub jitter: usize,
    pub bit_depth: u8,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            cases: 200,
            malignant_fraction: 0.5,
            blob_intensity: 110.0,
            blob_radius: 10.0,
            distractor_rate: 0.3,
            noise_scale: 4.0,
            jitter: 2,
            bit_depth: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.malignant_fraction) {
            return Err(Error::config(format!(
                "malignant_fraction {} outside [0, 1]",
                self.malignant_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::config(format!(
                "distractor_rate {} outside [0, 1]",
                self.distractor_rate
            )));
        }
        if !(self.blob_radius > 0.0) || (self.image_size as f64) < 4.0 * self.blob_radius {
            return Err(Error::config(format!(
                "image_size {} must be at least 4 x blob_radius {}",
                self.image_size, self.blob_radius
            )));
        }
        if !(self.blob_intensity >= 0.0) || !(self.noise_scale >= 0.0) {
            return Err(Error::config("blob_intensity and noise_scale must be non-negative"));
        }
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::config(format!("bit_depth {} outside 1..=16", self.bit_depth)));
        }
        if 2.0 * self.jitter as f64 >= self.image_size as f64 - 2.0 * self.blob_radius {
            return Err(Error::config("jitter too large for the image"));
        }
        Ok(())
    }

    pub fn malignant_count(&self) -> usize {
        (self.cases as f64 * self.malignant_fraction).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn views(self) -> [View; 2] {
        match self {
            Side::Left => [View::Lcc, View::Lmlo],
            Side::Right => [View::Rcc, View::Rmlo],
        }
    }
}

/// Where blobs were placed, for tests and diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Planted {
    /// Side carrying the lesion pair (malignant cases only).
    pub lesion_side: Option<Side>,
    /// Blob centres `(x, y)` per view, indexed by [`View::index`].
    pub blobs: [Option<(f64, f64)>; 4],
}

fn background<R: Rng>(rng: &mut R, cfg: &SynthConfig) -> Vec<f64> {
    // Coarse random grid, bilinearly upsampled: smooth tissue-like shading.
    const GRID: usize = 5;
    let level = rng.random_range(40.0..80.0);
    let knots: Vec<f64> = (0..GRID * GRID).map(|_| level + rng.random_range(-20.0..20.0)).collect();
    let s = cfg.image_size;
    super::resize_bilinear(&knots, GRID, GRID, s, s)
}

fn add_blob(plane: &mut [f64], size: usize, cx: f64, cy: f64, cfg: &SynthConfig) {
    let sigma = cfg.blob_radius / 2.0;
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..size {
        for x in 0..size {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            plane[y * size + x] += cfg.blob_intensity * (-d2 * inv).exp();
        }
    }
}

fn quantize(plane: &[f64], cfg: &SynthConfig) -> GrayImage {
    let max = ((1u32 << cfg.bit_depth) - 1) as f64;
    let pixels = plane
        .iter()
        .map(|v| (v / 255.0 * max).round().clamp(0.0, max) as u16)
        .collect();
    GrayImage::new(cfg.image_size, cfg.image_size, cfg.bit_depth, pixels)
        .expect("synthetic raster matches its own extents")
}

/// Generates one case and reports where its blobs went.
///
/// The random draws do not depend on `blob_intensity`, so a zero-contrast
/// config yields the same backgrounds and noise as a visible one.
pub fn synth_case_planted<R: Rng>(
    rng: &mut R,
    case_id: &str,
    label: Label,
    cfg: &SynthConfig,
) -> Result<(CaseRecord, Planted)> {
    cfg.validate()?;
    let s = cfg.image_size;
    let margin = cfg.blob_radius + cfg.jitter as f64;
    let lo = margin;
    let hi = s as f64 - 1.0 - margin;
    let mut planes: Vec<Vec<f64>> = (0..4).map(|_| background(rng, cfg)).collect();
    let mut planted = Planted::default();

    match label {
        Label::Malignant => {
            let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
            let (cx, cy) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
            let j = cfg.jitter as i64;
            for (k, v) in side.views().into_iter().enumerate() {
                let (dx, dy) = if k == 0 {
                    (0, 0)
                } else {
                    (rng.random_range(-j..=j), rng.random_range(-j..=j))
                };
                planted.blobs[v.index()] = Some((cx + dx as f64, cy + dy as f64));
            }
            planted.lesion_side = Some(side);
        }
        Label::Benign => {
            for slot in planted.blobs.iter_mut() {
                let hit = rng.random_bool(cfg.distractor_rate);
                let pos = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
                if hit {
                    *slot = Some(pos);
                }
            }
        }
    }
    for (plane, blob) in planes.iter_mut().zip(&planted.blobs) {
        if let Some((x, y)) = blob {
            add_blob(plane, s, *x, *y, cfg);
        }
    }
    if cfg.noise_scale > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_scale).expect("validated noise scale");
        for plane in planes.iter_mut() {
            for v in plane.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    let mut images = planes.iter().map(|p| quantize(p, cfg));
    let mut next = || images.next().unwrap();
    let case = CaseRecord {
        case_id: case_id.to_string(),
        views: [next(), next(), next(), next()],
        label,
    };
    Ok((case, planted))
}

pub fn synth_case<R: Rng>(rng: &mut R, case_id: &str, label: Label, cfg: &SynthConfig) -> Result<CaseRecord> {
    synth_case_planted(rng, case_id, label, cfg).map(|(c, _)| c)
}

/// Generates `cfg.cases` cases with exactly `round(cases * malignant_fraction)`
/// malignant labels in a seeded random order. Case `i` draws from its own
/// substream, so its content does not depend on any other case.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<CaseRecord>> {
    cfg.validate()?;
    let n_mal = cfg.malignant_count();
    let mut labels: Vec<Label> = (0..cfg.cases)
        .map(|i| if i < n_mal { Label::Malignant } else { Label::Benign })
        .collect();
    labels.shuffle(&mut substream(cfg.seed, "synth.labels"));
    let width = cfg.cases.max(1).to_string().len().max(4);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = indexed_substream(cfg.seed, "synth.case", i as u64);
            synth_case(&mut rng, &format!("case{i:0width$}"), label, cfg)
        })
        .collect()
}
