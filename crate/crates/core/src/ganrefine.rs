//! Iterative conditional-GAN label refinement.
//!
//! The generator sees the image concatenated with the current label map and
//! predicts a refined map, which is fed back for the next iteration.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalmetrics::refinement_report;
use crate::patchmine::PatchPair;
use crate::postproc::{postprocess, PostprocConfig};
use crate::raster::{iou, LabelMap, ProbMap, RasterImage};
use crate::seeding::{derive_seed, rng_from_seed};
use crate::tensornet::{
    adam_step, bce_value, build_discriminator, build_generator, AdamConfig, AdamState, DiscriminatorConfig,
    GeneratorConfig, Network, Scalar, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// Weight of the pixel BCE term against the adversarial term.
    pub lambda: f64,
    pub n_iters: usize,
    pub iter_weights: Vec<f64>,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Backpropagate through the chain of iterations instead of detaching
    /// each intermediate map.
    pub through_iterations: bool,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lambda: 50.0,
            n_iters: 3,
            iter_weights: vec![1.0, 1.6, 2.2],
            adam: AdamConfig::default(),
            batch_size: 4,
            epochs: 20,
            seed: 0,
            through_iterations: false,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_iters == 0 {
            return bad("n_iters must be at least 1".into());
        }
        if self.iter_weights.len() != self.n_iters {
            return bad(format!(
                "iter_weights has {} entries for n_iters = {}",
                self.iter_weights.len(),
                self.n_iters
            ));
        }
        if self.iter_weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return bad("iteration weights must be positive".into());
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("invalid optimizer settings {a:?}"));
        }
        if self.generator.in_channels != 4 || self.discriminator.in_channels != 4 {
            return bad("both networks take the 4-channel image+label input".into());
        }
        Ok(())
    }
}

fn check_match(x: &RasterImage, z: &ProbMap) -> Result<()> {
    if (x.width(), x.height()) != (z.width(), z.height()) {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs label {}x{}",
            x.width(),
            x.height(),
            z.width(),
            z.height()
        )));
    }
    Ok(())
}

/// Appends the `[R, G, B]` planes of `x` (grayscale replicated) for one sample.
fn push_rgb<T: Scalar>(out: &mut Vec<T>, x: &RasterImage) {
    let c = x.channels();
    let data = x.data();
    for ch in 0..3 {
        let src = if c == 1 { 0 } else { ch };
        out.extend(data.iter().skip(src).step_by(c).map(|&v| T::lit(v as f64)));
    }
}

/// `[1, 4, h, w]` input: the image's RGB planes followed by the label plane.
pub fn concat_condition<T: Scalar>(x: &RasterImage, z: &ProbMap) -> Result<Tensor<T>> {
    check_match(x, z)?;
    let mut data = Vec::with_capacity(4 * z.data().len());
    push_rgb(&mut data, x);
    data.extend(z.data().iter().map(|&v| T::lit(v as f64)));
    Tensor::from_vec(&[1, 4, x.height(), x.width()], data)
}

fn image_batch<T: Scalar>(images: &[&RasterImage]) -> Result<Tensor<T>> {
    let (w, h) = (images[0].width(), images[0].height());
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for x in images {
        if (x.width(), x.height()) != (w, h) {
            return Err(Error::DimensionMismatch("batch images differ in size".into()));
        }
        push_rgb(&mut data, x);
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}

fn plane_batch<T: Scalar>(planes: &[&[f32]], w: usize, h: usize) -> Result<Tensor<T>> {
    let data = planes.iter().flat_map(|p| p.iter().map(|&v| T::lit(v as f64))).collect();
    Tensor::from_vec(&[planes.len(), 1, h, w], data)
}

fn label_plane(l: &LabelMap) -> Vec<f32> {
    l.data().iter().map(|&v| v as f32).collect()
}

fn to_prob_maps<T: Scalar>(t: &Tensor<T>) -> Result<Vec<ProbMap>> {
    let [n, _, h, w] = t.dims4()?;
    t.data()
        .chunks(h * w)
        .take(n)
        .map(|c| ProbMap::new(w, h, c.iter().map(|v| v.as_f64() as f32).collect()))
        .collect()
}

/// One refinement step `x ⊕ z → G(x ⊕ z)`.
pub trait LabelRefiner {
    fn refine_once(&self, x: &RasterImage, z: &ProbMap) -> Result<ProbMap>;

    fn refine_batch(&self, xs: &[&RasterImage], zs: &[&ProbMap]) -> Result<Vec<ProbMap>> {
        xs.iter().zip(zs).map(|(x, z)| self.refine_once(x, z)).collect()
    }
}

impl<T: Scalar> LabelRefiner for Network<T> {
    fn refine_once(&self, x: &RasterImage, z: &ProbMap) -> Result<ProbMap> {
        let y = self.forward(&concat_condition::<T>(x, z)?)?;
        Ok(to_prob_maps(&y)?.remove(0))
    }

    fn refine_batch(&self, xs: &[&RasterImage], zs: &[&ProbMap]) -> Result<Vec<ProbMap>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        for (x, z) in xs.iter().zip(zs) {
            check_match(x, z)?;
        }
        let (w, h) = (xs[0].width(), xs[0].height());
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let img = tape.constant(image_batch(xs)?);
        let planes: Vec<&[f32]> = zs.iter().map(|z| z.data()).collect();
        let lab = tape.constant(plane_batch(&planes, w, h)?);
        let input = tape.concat(img, lab)?;
        let y = self.forward_on(&mut tape, input, &params)?;
        to_prob_maps(tape.value(y))
    }
}

/// Maps `G¹..Gᴺ` for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct IterTrace {
    pub maps: Vec<ProbMap>,
}

impl IterTrace {
    pub fn last(&self) -> &ProbMap {
        self.maps.last().expect("at least one iteration")
    }
}

/// Feeds each refined map back as the next label input. `z` is usually a
/// binary label converted with [`LabelMap::to_prob`]; intermediate maps stay
/// continuous.
pub fn iterate_refine<R: LabelRefiner + ?Sized>(gen: &R, x: &RasterImage, z: &ProbMap, n_iters: usize) -> Result<IterTrace> {
    if n_iters == 0 {
        return Err(Error::InvalidConfig("n_iters must be at least 1".into()));
    }
    let mut maps: Vec<ProbMap> = Vec::with_capacity(n_iters);
    for _ in 0..n_iters {
        let next = gen.refine_once(x, maps.last().unwrap_or(z))?;
        maps.push(next);
    }
    Ok(IterTrace { maps })
}

/// Final maps of `n_iters` refinement rounds for a batch of inputs.
pub fn iterate_refine_batch<R: LabelRefiner + ?Sized>(
    gen: &R,
    xs: &[&RasterImage],
    zs: &[&ProbMap],
    n_iters: usize,
) -> Result<Vec<ProbMap>> {
    if n_iters == 0 {
        return Err(Error::InvalidConfig("n_iters must be at least 1".into()));
    }
    let mut cur = gen.refine_batch(xs, zs)?;
    for _ in 1..n_iters {
        let refs: Vec<&ProbMap> = cur.iter().collect();
        cur = gen.refine_batch(xs, &refs)?;
    }
    Ok(cur)
}

/// Loss components of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IterLosses {
    pub d_loss: f64,
    pub g_adv: f64,
    pub bce: f64,
}

/// `(d_loss, g_adv)` from the averaged real and fake patch scores:
/// `-(ln s_r + ln(1 - s_f))` and `-ln s_f`, with the BCE clamp.
pub fn adv_from_scores(s_real: f64, s_fake: f64) -> (f64, f64) {
    let d = bce_value(&[s_real], &[1.0]) + bce_value(&[s_fake], &[0.0]);
    (d, bce_value(&[s_fake], &[1.0]))
}

fn mean_score<T: Scalar>(disc: &Network<T>, x: &RasterImage, z: &ProbMap) -> Result<f64> {
    let s = disc.forward(&concat_condition::<T>(x, z)?)?;
    Ok(s.data().iter().map(|v| v.as_f64()).sum::<f64>() / s.numel() as f64)
}

/// Discriminator and generator adversarial losses for one fake map.
pub fn adv_losses<T: Scalar>(disc: &Network<T>, x: &RasterImage, y: &LabelMap, g_out: &ProbMap) -> Result<(f64, f64)> {
    let s_real = mean_score(disc, x, &y.to_prob())?;
    let s_fake = mean_score(disc, x, g_out)?;
    Ok(adv_from_scores(s_real, s_fake))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub g_total: f64,
    pub d_total: f64,
    pub per_iter: Vec<IterLosses>,
}

/// `g_total = Σ wᵢ (g_advᵢ + λ bceᵢ)` and `d_total = Σ wᵢ d_lossᵢ`.
pub fn objective_from_losses(losses: &[IterLosses], cfg: &RefineConfig) -> Result<Objective> {
    if losses.len() != cfg.n_iters || cfg.iter_weights.len() != cfg.n_iters {
        return Err(Error::InvalidConfig(format!(
            "{} iteration losses, n_iters = {}, {} weights",
            losses.len(),
            cfg.n_iters,
            cfg.iter_weights.len()
        )));
    }
    let mut g_total = 0.0;
    let mut d_total = 0.0;
    for (l, &w) in losses.iter().zip(&cfg.iter_weights) {
        g_total += w * (l.g_adv + cfg.lambda * l.bce);
        d_total += w * l.d_loss;
    }
    Ok(Objective {
        g_total,
        d_total,
        per_iter: losses.to_vec(),
    })
}

/// Evaluates the weighted objective of a trace against the clean label `y`.
pub fn total_objective<T: Scalar>(
    trace: &IterTrace,
    x: &RasterImage,
    y: &LabelMap,
    disc: &Network<T>,
    cfg: &RefineConfig,
) -> Result<Objective> {
    let target: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    let s_real = mean_score(disc, x, &y.to_prob())?;
    let losses = trace
        .maps
        .iter()
        .map(|g| {
            if (g.width(), g.height()) != (y.width(), y.height()) {
                return Err(Error::DimensionMismatch("trace map and label differ in size".into()));
            }
            let (d_loss, g_adv) = adv_from_scores(s_real, mean_score(disc, x, g)?);
            let pred: Vec<f64> = g.data().iter().map(|&v| v as f64).collect();
            Ok(IterLosses {
                d_loss,
                g_adv,
                bce: bce_value(&pred, &target),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    objective_from_losses(&losses, cfg)
}

/// Losses of one optimisation step. `bce` and `g_adv` are the final
/// iteration's components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub d_total: f64,
    pub g_total: f64,
    pub bce: f64,
    pub g_adv: f64,
}

/// Owner of both networks and their optimizer states.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: RefineConfig,
    pub gen: Network<f32>,
    pub disc: Network<f32>,
    pub gen_opt: AdamState<f32>,
    pub disc_opt: AdamState<f32>,
    pub steps: usize,
}

impl Trainer {
    /// Fresh networks initialised from `cfg.seed`.
    pub fn new(cfg: &RefineConfig) -> Result<Self> {
        cfg.validate()?;
        let mut gen = build_generator::<f32>(&cfg.generator)?;
        let mut disc = build_discriminator::<f32>(&cfg.discriminator)?;
        gen.init_weights(&mut rng_from_seed(derive_seed(cfg.seed, &[0])));
        disc.init_weights(&mut rng_from_seed(derive_seed(cfg.seed, &[1])));
        let gen_opt = AdamState::new(cfg.adam, gen.params());
        let disc_opt = AdamState::new(cfg.adam, disc.params());
        Ok(Trainer {
            cfg: cfg.clone(),
            gen,
            disc,
            gen_opt,
            disc_opt,
            steps: 0,
        })
    }

    /// One discriminator update followed by one generator update on `batch`.
    pub fn step(&mut self, batch: &[&PatchPair], epoch: usize) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        let cfg = &self.cfg;
        let (w, h) = (batch[0].clean.width(), batch[0].clean.height());
        let images: Vec<&RasterImage> = batch.iter().map(|p| &p.image).collect();
        let noisy: Vec<Vec<f32>> = batch.iter().map(|p| label_plane(&p.noisy)).collect();
        let clean: Vec<Vec<f32>> = batch.iter().map(|p| label_plane(&p.clean)).collect();
        let noisy_refs: Vec<&[f32]> = noisy.iter().map(Vec::as_slice).collect();
        let clean_refs: Vec<&[f32]> = clean.iter().map(Vec::as_slice).collect();
        let img_t = image_batch::<f32>(&images)?;
        let noisy_t = plane_batch::<f32>(&noisy_refs, w, h)?;
        let clean_t = plane_batch::<f32>(&clean_refs, w, h)?;
        let target: Vec<f32> = clean.concat();
        let n = batch.len();
        let ones = vec![1.0f32; n];
        let zeros = vec![0.0f32; n];

        // generator pass, kept on the tape for the G update
        let mut gt = Tape::new();
        let gp = self.gen.bind(&mut gt, true);
        let img = gt.constant(img_t.clone());
        let mut prev = gt.constant(noisy_t);
        let mut fakes = Vec::with_capacity(cfg.n_iters);
        for _ in 0..cfg.n_iters {
            let input = gt.concat(img, prev)?;
            let out = self.gen.forward_on(&mut gt, input, &gp)?;
            fakes.push(out);
            prev = if cfg.through_iterations { out } else { gt.detach(out) };
        }

        // D step: real pairs against every iteration's detached fake
        let mut dt = Tape::new();
        let dp = self.disc.bind(&mut dt, true);
        let d_img = dt.constant(img_t);
        let real_lab = dt.constant(clean_t.clone());
        let real_in = dt.concat(d_img, real_lab)?;
        let real_s = self.disc.forward_on(&mut dt, real_in, &dp)?;
        let real_m = dt.sample_mean(real_s)?;
        let real_loss = dt.bce(real_m, &ones)?;
        let mut d_terms: Vec<Var> = Vec::with_capacity(cfg.n_iters);
        for (&f, &wi) in fakes.iter().zip(&cfg.iter_weights) {
            let lab = dt.constant(gt.value(f).clone());
            let input = dt.concat(d_img, lab)?;
            let s = self.disc.forward_on(&mut dt, input, &dp)?;
            let m = dt.sample_mean(s)?;
            let fake_loss = dt.bce(m, &zeros)?;
            let d_i = dt.add(real_loss, fake_loss)?;
            d_terms.push(dt.scale(d_i, wi as f32));
        }
        let d_total = sum_vars(&mut dt, &d_terms)?;
        let d_value = dt.value(d_total).item()? as f64;
        if !d_value.is_finite() {
            return Err(Error::Divergence { epoch, step: self.steps });
        }
        dt.backward(d_total)?;
        self.disc.zero_grad();
        self.disc.accumulate_grads(&dt, &dp);
        adam_step(self.disc.params_mut(), &mut self.disc_opt)?;
        drop(dt);

        // G step against the updated, frozen discriminator
        let fp = self.disc.bind(&mut gt, false);
        let mut g_terms = Vec::with_capacity(cfg.n_iters);
        let mut last = (0.0, 0.0);
        for (&f, &wi) in fakes.iter().zip(&cfg.iter_weights) {
            let input = gt.concat(img, f)?;
            let s = self.disc.forward_on(&mut gt, input, &fp)?;
            let m = gt.sample_mean(s)?;
            let adv = gt.bce(m, &ones)?;
            let pix = gt.bce(f, &target)?;
            last = (gt.value(pix).item()? as f64, gt.value(adv).item()? as f64);
            let pix_w = gt.scale(pix, cfg.lambda as f32);
            let g_i = gt.add(adv, pix_w)?;
            g_terms.push(gt.scale(g_i, wi as f32));
        }
        let g_total = sum_vars(&mut gt, &g_terms)?;
        let g_value = gt.value(g_total).item()? as f64;
        if !g_value.is_finite() {
            return Err(Error::Divergence { epoch, step: self.steps });
        }
        gt.backward(g_total)?;
        self.gen.zero_grad();
        self.gen.accumulate_grads(&gt, &gp);
        adam_step(self.gen.params_mut(), &mut self.gen_opt)?;
        self.steps += 1;
        Ok(StepLosses {
            d_total: d_value,
            g_total: g_value,
            bce: last.0,
            g_adv: last.1,
        })
    }

    /// Final refined maps of `pairs` (noisy label as the starting point).
    pub fn refine_pairs(&self, pairs: &[PatchPair]) -> Result<Vec<ProbMap>> {
        refine_pairs(&self.gen, pairs, self.cfg.n_iters, self.cfg.batch_size)
    }
}

fn sum_vars<T: Scalar>(tape: &mut Tape<T>, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Refines the noisy label of every pair through `n_iters` rounds.
pub fn refine_pairs<R: LabelRefiner + ?Sized>(
    gen: &R,
    pairs: &[PatchPair],
    n_iters: usize,
    batch_size: usize,
) -> Result<Vec<ProbMap>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size.max(1)) {
        let xs: Vec<&RasterImage> = chunk.iter().map(|p| &p.image).collect();
        let zs: Vec<ProbMap> = chunk.iter().map(|p| p.noisy.to_prob()).collect();
        let zr: Vec<&ProbMap> = zs.iter().collect();
        out.extend(iterate_refine_batch(gen, &xs, &zr, n_iters)?);
    }
    Ok(out)
}

/// Mean IoU of the noisy and of the post-processed refined labels against
/// the clean labels. `None` for an empty set.
pub fn holdout_ious(
    pairs: &[PatchPair],
    refined: &[ProbMap],
    post: &PostprocConfig,
) -> Result<Option<(f64, f64)>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let (mut noisy, mut fixed) = (0.0, 0.0);
    for (p, r) in pairs.iter().zip(refined) {
        let (_, bin) = postprocess(r, post)?;
        let rep = refinement_report(&p.clean, &p.noisy, &bin)?;
        noisy += rep.iou_noisy;
        fixed += rep.iou_refined;
    }
    let n = pairs.len() as f64;
    Ok(Some((noisy / n, fixed / n)))
}

/// Per-epoch means of the step losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_total: f64,
    pub g_total: f64,
    pub bce: f64,
    pub g_adv: f64,
    pub holdout_iou: Option<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch\td_total\tg_total\tbce\tg_adv\tholdout_iou";

impl EpochRecord {
    pub fn tsv_row(&self) -> String {
        let iou = self.holdout_iou.map_or_else(|| crate::evalmetrics::UNDEFINED.to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{iou}",
            self.epoch, self.d_total, self.g_total, self.bce, self.g_adv
        )
    }
}

/// Batch order of `epoch`: a seeded shuffle of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, &[2, epoch as u64])));
    order
}

/// Trains from scratch for `cfg.epochs`; `on_epoch` runs after every epoch.
pub fn train_with(
    corpus: &[PatchPair],
    holdout: &[PatchPair],
    cfg: &RefineConfig,
    post: &PostprocConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
) -> Result<(Trainer, Vec<EpochRecord>)> {
    if corpus.is_empty() {
        return Err(Error::InvalidConfig("training corpus is empty".into()));
    }
    let dims = (corpus[0].clean.width(), corpus[0].clean.height());
    if corpus.iter().chain(holdout).any(|p| (p.clean.width(), p.clean.height()) != dims) {
        return Err(Error::DimensionMismatch("training pairs differ in size".into()));
    }
    let mut trainer = Trainer::new(cfg)?;
    trainer.gen.output_size(dims.1, dims.0)?;
    trainer.disc.output_size(dims.1, dims.0)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(corpus.len(), cfg.seed, epoch);
        let mut sums = [0.0f64; 4];
        let mut steps = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatchPair> = idx.iter().map(|&i| &corpus[i]).collect();
            let l = trainer.step(&batch, epoch)?;
            for (s, v) in sums.iter_mut().zip([l.d_total, l.g_total, l.bce, l.g_adv]) {
                *s += v;
            }
            steps += 1;
        }
        let refined = trainer.refine_pairs(holdout)?;
        let holdout_iou = holdout_ious(holdout, &refined, post)?.map(|(_, r)| r);
        let k = steps as f64;
        let rec = EpochRecord {
            epoch,
            d_total: sums[0] / k,
            g_total: sums[1] / k,
            bce: sums[2] / k,
            g_adv: sums[3] / k,
            holdout_iou,
        };
        on_epoch(&rec, &trainer)?;
        log.push(rec);
    }
    Ok((trainer, log))
}

pub fn train(
    corpus: &[PatchPair],
    holdout: &[PatchPair],
    cfg: &RefineConfig,
    post: &PostprocConfig,
) -> Result<(Trainer, Vec<EpochRecord>)> {
    train_with(corpus, holdout, cfg, post, |_, _| Ok(()))
}

/// Tile origins along one axis: stride `tile - overlap`, last tile flush
/// with the far edge.
fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Whole-image refinement: `tile × tile` windows with `overlap` pixels of
/// overlap, each refined for `n_iters` rounds; overlapping outputs are averaged.
pub fn refine_full_image<R: LabelRefiner + ?Sized>(
    gen: &R,
    x: &RasterImage,
    z: &LabelMap,
    n_iters: usize,
    tile: usize,
    overlap: usize,
) -> Result<ProbMap> {
    let (w, h) = (x.width(), x.height());
    if (w, h) != (z.width(), z.height()) {
        return Err(Error::DimensionMismatch(format!(
            "image {w}x{h} vs label {}x{}",
            z.width(),
            z.height()
        )));
    }
    if tile == 0 || tile > w || tile > h {
        return Err(Error::InvalidConfig(format!("tile {tile} does not fit a {w}x{h} image")));
    }
    if overlap >= tile {
        return Err(Error::InvalidConfig(format!("overlap {overlap} must be below tile {tile}")));
    }
    let zp = z.to_prob();
    let mut sum = vec![0f64; w * h];
    let mut count = vec![0u32; w * h];
    for &y0 in &tile_starts(h, tile, overlap) {
        for &x0 in &tile_starts(w, tile, overlap) {
            let rect = crate::raster::PatchRect::new(x0, y0, tile);
            let xt = crate::raster::crop(x, rect)?;
            let zt = crate::raster::crop(&zp, rect)?;
            let trace = iterate_refine(gen, &xt, &zt, n_iters)?;
            for (ty, row) in trace.last().data().chunks(tile).enumerate() {
                for (tx, &v) in row.iter().enumerate() {
                    let i = (y0 + ty) * w + x0 + tx;
                    sum[i] += v as f64;
                    count[i] += 1;
                }
            }
        }
    }
    ProbMap::new(w, h, sum.iter().zip(&count).map(|(&s, &c)| (s / c as f64) as f32).collect())
}

/// Mean IoU of Otsu-binarised refinements against `clean`; a convenience
/// for reporting.
pub fn mean_iou(refined: &[LabelMap], clean: &[LabelMap]) -> Result<f64> {
    if refined.is_empty() || refined.len() != clean.len() {
        return Err(Error::DimensionMismatch("mean_iou needs equal, nonempty lists".into()));
    }
    let mut s = 0.0;
    for (r, c) in refined.iter().zip(clean) {
        s += iou(r, c)?;
    }
    Ok(s / refined.len() as f64)
}
