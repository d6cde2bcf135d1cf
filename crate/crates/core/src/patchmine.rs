//! High-quality patch selection, training-pair construction and a synthetic
//! vessel corpus for experiments that do not depend on licensed datasets.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphnoise::{simulate_noise, NoiseConfig, NoiseLog};
use crate::raster::{iou, vessel_ratio, Crop, LabelMap, PatchRect, RasterImage};
use crate::seeding::{derive_seed, rng_from_seed};

/// Draw budget per accepted patch before mining gives up on an image.
pub const RETRY_FACTOR: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MineConfig {
    pub patch_side: usize,
    pub patches_per_image: usize,
    /// Minimum vessel fraction; a patch must be strictly above it.
    pub ratio_min: f64,
    /// Minimum agreement between the two annotations; strictly above.
    pub iou_min: f64,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            patch_side: 256,
            patches_per_image: 300,
            ratio_min: 0.05,
            iou_min: 0.90,
            seed: 0,
        }
    }
}

impl MineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio_min) || !(0.0..=1.0).contains(&self.iou_min) {
            return Err(Error::InvalidConfig("ratio_min and iou_min must lie in [0, 1]".into()));
        }
        if self.patch_side == 0 {
            return Err(Error::InvalidConfig("patch_side must be positive".into()));
        }
        Ok(())
    }

    /// Both gates. A zero threshold disables its gate, so empty or disjoint
    /// patches still pass a gate-free configuration.
    pub fn accepts(&self, ratio: f64, agreement: f64) -> bool {
        let ratio_ok = self.ratio_min <= 0.0 || ratio > self.ratio_min;
        let iou_ok = self.iou_min <= 0.0 || agreement > self.iou_min;
        ratio_ok && iou_ok
    }
}

/// A clean (image, label) patch and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CleanSample {
    pub id: String,
    pub image: RasterImage,
    pub label: LabelMap,
    pub rect: Option<PatchRect>,
}

#[derive(Clone, Debug)]
pub struct MineOutcome {
    pub patches: Vec<CleanSample>,
    pub draws: usize,
    /// Patches missing from the quota when the retry budget ran out.
    pub shortfall: usize,
}

/// Rejection-samples square patches whose primary annotation is dense
/// enough and agrees with the verification annotation.
pub fn mine_patches(
    source_id: &str,
    image_index: u64,
    image: &RasterImage,
    annot1: &LabelMap,
    annot2: &LabelMap,
    cfg: &MineConfig,
) -> Result<MineOutcome> {
    cfg.validate()?;
    let (w, h) = (annot1.width(), annot1.height());
    if !annot1.same_dims(annot2) || image.width() != w || image.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "{source_id}: image and annotations must share dimensions"
        )));
    }
    if cfg.patch_side > w || cfg.patch_side > h {
        return Err(Error::InvalidConfig(format!(
            "{source_id}: patch side {} exceeds {w}x{h}",
            cfg.patch_side
        )));
    }
    let budget = RETRY_FACTOR * cfg.patches_per_image;
    let mut patches = Vec::with_capacity(cfg.patches_per_image);
    let mut draws = 0;
    while patches.len() < cfg.patches_per_image && draws < budget {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, &[image_index, draws as u64]));
        draws += 1;
        let rect = PatchRect::new(
            rng.random_range(0..=w - cfg.patch_side),
            rng.random_range(0..=h - cfg.patch_side),
            cfg.patch_side,
        );
        let a = annot1.crop(rect)?;
        let b = annot2.crop(rect)?;
        if cfg.accepts(vessel_ratio(&a), iou(&a, &b)?) {
            patches.push(CleanSample {
                id: format!("{source_id}_{:05}", patches.len()),
                image: image.crop(rect)?,
                label: a,
                rect: Some(rect),
            });
        }
    }
    Ok(MineOutcome {
        shortfall: cfg.patches_per_image - patches.len(),
        patches,
        draws,
    })
}

/// Where a training pair came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub source: String,
    pub rect: Option<PatchRect>,
    pub noise_seed: u64,
    pub noise_log: NoiseLog,
}

/// Training triple: image `x`, clean label `y`, simulated noisy label `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub image: RasterImage,
    pub clean: LabelMap,
    pub noisy: LabelMap,
    pub provenance: Provenance,
}

impl PatchPair {
    pub fn new(image: RasterImage, clean: LabelMap, noisy: LabelMap, provenance: Provenance) -> Result<Self> {
        if !clean.same_dims(&noisy) || image.width() != clean.width() || image.height() != clean.height() {
            return Err(Error::DimensionMismatch(format!(
                "pair {}: image, clean and noisy rasters differ in size",
                provenance.source
            )));
        }
        Ok(PatchPair {
            image,
            clean,
            noisy,
            provenance,
        })
    }
}

/// Seed used to corrupt patch `index` of a corpus.
pub fn pair_noise_seed(corpus_seed: u64, index: usize) -> u64 {
    derive_seed(corpus_seed, &[index as u64])
}

/// One noisy counterpart per clean sample, seeded from `(noise_cfg.seed, index)`.
pub fn build_training_set(mined: &[CleanSample], noise_cfg: &NoiseConfig) -> Result<Vec<PatchPair>> {
    noise_cfg.validate()?;
    mined
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = pair_noise_seed(noise_cfg.seed, i);
            let cfg = NoiseConfig {
                seed,
                ..noise_cfg.clone()
            };
            let (noisy, log) = simulate_noise(&s.label, &cfg)?;
            PatchPair::new(
                s.image.clone(),
                s.label.clone(),
                noisy,
                Provenance {
                    source: s.id.clone(),
                    rect: s.rect,
                    noise_seed: seed,
                    noise_log: log,
                },
            )
        })
        .collect()
}

/// Knobs of the procedural vessel generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthStyle {
    pub trunk_width: (usize, usize),
    pub branch_width: (usize, usize),
    pub branches_per_trunk: (usize, usize),
    /// Each label is grown until its vessel ratio reaches a target drawn from this range.
    pub target_ratio: (f64, f64),
    /// Max heading change per pixel step, radians.
    pub curvature: f64,
    pub blur_sigma: f64,
    /// Relative darkening of a fully covered vessel pixel, per RGB channel.
    pub contrast: [f64; 3],
    pub noise_sigma: f64,
}

impl Default for SynthStyle {
    fn default() -> Self {
        SynthStyle {
            trunk_width: (2, 4),
            branch_width: (1, 2),
            branches_per_trunk: (1, 3),
            target_ratio: (0.06, 0.14),
            curvature: 0.08,
            blur_sigma: 1.0,
            contrast: [0.25, 0.5, 0.3],
            noise_sigma: 0.02,
        }
    }
}

/// Smallest side accepted by [`synth_corpus`].
pub const MIN_SYNTH_SIDE: usize = 32;
const MIN_SYNTH_RATIO: f64 = 0.03;

struct Canvas {
    side: usize,
    label: LabelMap,
}

impl Canvas {
    fn stamp(&mut self, cx: f64, cy: f64, width: usize) {
        let lo = -((width as isize - 1) / 2);
        let hi = lo + width as isize - 1;
        let r2 = (width as f64 / 2.0).powi(2) + 0.5;
        let (px, py) = (cx.round() as isize, cy.round() as isize);
        for dy in lo..=hi {
            for dx in lo..=hi {
                if width > 2 && (dx * dx + dy * dy) as f64 > r2 {
                    continue;
                }
                let (x, y) = (px + dx, py + dy);
                if x >= 0 && y >= 0 && (x as usize) < self.side && (y as usize) < self.side {
                    self.label.set(x as usize, y as usize, true);
                }
            }
        }
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        x >= -0.5 && y >= -0.5 && x < self.side as f64 - 0.5 && y < self.side as f64 - 0.5
    }

    /// Random walk with smoothly varying heading; returns visited centers.
    fn walk(
        &mut self,
        rng: &mut crate::seeding::Rng,
        start: (f64, f64),
        heading: f64,
        width: usize,
        max_len: usize,
        curvature: f64,
    ) -> Vec<(f64, f64)> {
        let (mut x, mut y) = start;
        let mut theta = heading;
        let mut turn = 0.0f64;
        let mut path = Vec::new();
        for _ in 0..max_len {
            if !self.inside(x, y) {
                break;
            }
            self.stamp(x, y, width);
            path.push((x, y));
            turn = (turn + rng.random_range(-0.25..=0.25) * curvature).clamp(-curvature, curvature);
            theta += turn;
            x += theta.cos();
            y += theta.sin();
        }
        path
    }
}

fn gaussian_blur(src: &[f64], side: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |input: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; side * side];
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for (k, d) in (-radius..=radius).enumerate() {
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, side as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, side as isize - 1) as usize)
                    };
                    acc += kernel[k] * input[sy * side + sx];
                }
                out[y * side + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn synth_label(rng: &mut crate::seeding::Rng, side: usize, style: &SynthStyle) -> LabelMap {
    let mut canvas = Canvas {
        side,
        label: LabelMap::zeros(side, side),
    };
    let target = rng
        .random_range(style.target_ratio.0..=style.target_ratio.1)
        .max(MIN_SYNTH_RATIO + 0.005);
    let s = side as f64;
    let mut vessels = 0;
    while vessel_ratio(&canvas.label) < target && vessels < 200 {
        vessels += 1;
        // Enter from a random border point, heading roughly inward.
        let edge = rng.random_range(0..4);
        let t = rng.random_range(0.0..s - 1.0);
        let (start, inward) = match edge {
            0 => ((t, 0.0), std::f64::consts::FRAC_PI_2),
            1 => ((s - 1.0, t), std::f64::consts::PI),
            2 => ((t, s - 1.0), -std::f64::consts::FRAC_PI_2),
            _ => ((0.0, t), 0.0),
        };
        let heading = inward + rng.random_range(-0.7..=0.7);
        let width = rng.random_range(style.trunk_width.0..=style.trunk_width.1);
        let path = canvas.walk(rng, start, heading, width, 3 * side, style.curvature);
        if path.len() < 4 {
            continue;
        }
        let branches = rng.random_range(style.branches_per_trunk.0..=style.branches_per_trunk.1);
        for _ in 0..branches {
            let k = rng.random_range(1..path.len() - 1);
            let (x0, y0) = path[k];
            let (x1, y1) = path[k + 1];
            let along = (y1 - y0).atan2(x1 - x0);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let heading = along + sign * rng.random_range(0.5..=1.1);
            let bw = rng.random_range(style.branch_width.0..=style.branch_width.1);
            canvas.walk(rng, (x0, y0), heading, bw, side, style.curvature * 1.5);
        }
    }
    canvas.label
}

fn synth_image(rng: &mut crate::seeding::Rng, label: &LabelMap, style: &SynthStyle) -> RasterImage {
    let side = label.width();
    let base = [
        rng.random_range(0.65..0.85),
        rng.random_range(0.35..0.5),
        rng.random_range(0.15..0.25),
    ];
    // Low-frequency illumination plus blurred speckle texture.
    let (fx, fy, phase) = (
        rng.random_range(0.5..2.0) * std::f64::consts::PI / side as f64,
        rng.random_range(0.5..2.0) * std::f64::consts::PI / side as f64,
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let speckle: Vec<f64> = (0..side * side).map(|_| rng.random_range(-1.0..1.0)).collect();
    let texture = gaussian_blur(&speckle, side, 2.0);
    let soft = gaussian_blur(
        &label.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        side,
        style.blur_sigma,
    );
    let noise = Normal::new(0.0, style.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let i = y * side + x;
            let light = 0.85 + 0.15 * (fx * x as f64 + fy * y as f64 + phase).sin() + 0.15 * texture[i];
            for (b, k) in base.iter().zip(style.contrast) {
                let v = b * light * (1.0 - k * soft[i]) + noise.sample(rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    RasterImage::new(side, side, 3, data).expect("synthetic image is valid")
}

/// Procedurally generated (image, clean label) patches. Sample `i` depends
/// only on `(seed, i)`.
pub fn synth_corpus(count: usize, side: usize, seed: u64, style: &SynthStyle) -> Result<Vec<CleanSample>> {
    if side < MIN_SYNTH_SIDE {
        return Err(Error::InvalidConfig(format!(
            "synthetic patches need side >= {MIN_SYNTH_SIDE}, got {side}"
        )));
    }
    Ok((0..count)
        .map(|i| synth_sample(i, side, seed, style))
        .collect())
}

pub fn synth_sample(index: usize, side: usize, seed: u64, style: &SynthStyle) -> CleanSample {
    let mut rng = rng_from_seed(derive_seed(seed, &[index as u64]));
    let mut label = synth_label(&mut rng, side, style);
    while vessel_ratio(&label) < MIN_SYNTH_RATIO {
        label = synth_label(&mut rng, side, style);
    }
    let image = synth_image(&mut rng, &label, style);
    CleanSample {
        id: format!("synth_{index:05}"),
        image,
        label,
        rect: None,
    }
}
