//! Patch-based training of the weight predictor.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::color::{ColorSpace, Image, WbSetting};
use crate::error::{Error, Result};
use crate::image_io::load_image;
use crate::model::{AdamMoments, Checkpoint, Model, RngState};
use crate::nn::ops::{softmax_channels, softmax_channels_backward};
use crate::nn::{Architecture, GridNetConfig, Scalar, Tensor};
use crate::scene::{derive_seed, Manifest, ScenePair};
use crate::weights::stack_images;

/// Network size trained by [`train`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NetSize {
    /// Six columns by four rows, eight stem channels.
    #[default]
    Full,
    /// Two columns by two rows, four stem channels; for smoke runs.
    Tiny,
}

impl NetSize {
    pub fn config(self, k: usize) -> GridNetConfig {
        match self {
            NetSize::Full => GridNetConfig::new(k),
            NetSize::Tiny => GridNetConfig::tiny(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub net: NetSize,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub images_per_iter: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub presets: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetSize::Full,
            patch_size: 64,
            patches_per_image: 4,
            images_per_iter: 8,
            lambda: 100.0,
            epochs: 200,
            lr: 1e-4,
            lr_milestones: vec![50, 100, 150],
            lr_decay: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            presets: "tds".into(),
        }
    }
}

impl TrainConfig {
    /// Settings for desk-scale runs on a few dozen synthetic scenes: a
    /// higher constant learning rate in place of the long decayed schedule.
    pub fn desk() -> Self {
        TrainConfig { epochs: 30, lr: 1e-3, lr_milestones: vec![], ..Default::default() }
    }

    pub fn batch_size(&self) -> usize {
        self.images_per_iter * self.patches_per_image
    }

    pub fn preset_list(&self) -> Result<Vec<WbSetting>> {
        WbSetting::parse_list(&self.presets)
    }

    pub fn validate(&self) -> Result<()> {
        self.preset_list()?;
        let stride = GridNetConfig::new(2).stride();
        if self.patch_size == 0 || self.patch_size % stride != 0 {
            return Err(Error::Parameter(format!(
                "patch size {} is not a positive multiple of {stride}",
                self.patch_size
            )));
        }
        if self.patches_per_image == 0 || self.images_per_iter == 0 {
            return Err(Error::Parameter("batch dimensions must be positive".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Parameter(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Parameter(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Parameter("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Parameter("adam_eps and lr_decay must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

/// `sum over patch of |target - sum_i w_i P_i|^2` and its gradient w.r.t.
/// the weights. `presets` is `[3k, h, w]`, `target` is `[3, h, w]`.
pub fn reconstruction_loss<T: Scalar>(w: &Tensor<T>, presets: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    let k = w.c;
    assert_eq!(presets.c, 3 * k, "preset channels");
    assert_eq!(target.c, 3, "target channels");
    let n = w.plane_len();
    let mut loss = T::zero();
    let mut dw = Tensor::zeros(k, w.h, w.w);
    let mut resid = vec![T::zero(); 3 * n];
    for c in 0..3 {
        let r = &mut resid[c * n..(c + 1) * n];
        r.copy_from_slice(target.plane(c));
        for i in 0..k {
            let wi = w.plane(i);
            let pi = presets.plane(3 * i + c);
            for p in 0..n {
                r[p] -= wi[p] * pi[p];
            }
        }
        for &v in r.iter() {
            loss += v * v;
        }
    }
    let m2 = T::of(-2.0);
    for i in 0..k {
        let d = dw.plane_mut(i);
        for c in 0..3 {
            let pi = presets.plane(3 * i + c);
            let r = &resid[c * n..(c + 1) * n];
            for p in 0..n {
                d[p] += m2 * r[p] * pi[p];
            }
        }
    }
    (loss, dw)
}

/// `sum_i |W_i * Sobel_x|^2 + |W_i * Sobel_y|^2` over valid pixels, and its
/// gradient.
pub fn smoothness_loss<T: Scalar>(w: &Tensor<T>) -> (T, Tensor<T>) {
    let (h, wd) = (w.h, w.w);
    let mut dw = Tensor::zeros(w.c, h, wd);
    let mut loss = T::zero();
    if h < 3 || wd < 3 {
        return (loss, dw);
    }
    let two = T::of(2.0);
    // Sobel x taps as (dy, dx, coefficient); y taps are the transpose.
    const TAPS: [(isize, isize, f64); 6] =
        [(-1, 1, 1.0), (0, 1, 2.0), (1, 1, 1.0), (-1, -1, -1.0), (0, -1, -2.0), (1, -1, -1.0)];
    for i in 0..w.c {
        let p = w.plane(i);
        let mut gx = vec![T::zero(); h * wd];
        let mut gy = vec![T::zero(); h * wd];
        for y in 1..h - 1 {
            for x in 1..wd - 1 {
                let (mut sx, mut sy) = (T::zero(), T::zero());
                for &(a, b, c) in &TAPS {
                    let c = T::of(c);
                    sx += c * p[(y as isize + a) as usize * wd + (x as isize + b) as usize];
                    sy += c * p[(y as isize + b) as usize * wd + (x as isize + a) as usize];
                }
                loss += sx * sx + sy * sy;
                gx[y * wd + x] = two * sx;
                gy[y * wd + x] = two * sy;
            }
        }
        let d = dw.plane_mut(i);
        for y in 1..h - 1 {
            for x in 1..wd - 1 {
                let (ex, ey) = (gx[y * wd + x], gy[y * wd + x]);
                for &(a, b, c) in &TAPS {
                    let c = T::of(c);
                    d[(y as isize + a) as usize * wd + (x as isize + b) as usize] += c * ex;
                    d[(y as isize + b) as usize * wd + (x as isize + a) as usize] += c * ey;
                }
            }
        }
    }
    (loss, dw)
}

pub fn total_loss(l_r: f64, l_s: f64, lambda: f64) -> f64 {
    l_r + lambda * l_s
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub l_r: f64,
    pub l_s: f64,
}

impl LossParts {
    fn add(&mut self, o: LossParts) {
        self.loss += o.loss;
        self.l_r += o.l_r;
        self.l_s += o.l_s;
    }
}

/// Loss of one patch scaled by `scale`, with parameter gradients
/// accumulated into `grads`.
pub fn patch_loss_and_grad<T: Scalar>(
    arch: &Architecture,
    params: &[T],
    presets: &Tensor<T>,
    target: &Tensor<T>,
    lambda: f64,
    scale: f64,
    grads: &mut [T],
) -> Result<LossParts> {
    let (logits, trace) = arch.forward_trace(params, presets)?;
    let w = softmax_channels(&logits);
    let (l_r, mut dw) = reconstruction_loss(&w, presets, target);
    let (l_s, dws) = smoothness_loss(&w);
    let (lam, sc) = (T::of(lambda), T::of(scale));
    for (a, &b) in dw.data.iter_mut().zip(&dws.data) {
        *a = (*a + lam * b) * sc;
    }
    let dz = softmax_channels_backward(&w, &dw);
    arch.backward(params, &trace, &dz, grads);
    let (l_r, l_s) = (l_r.as_f64() * scale, l_s.as_f64() * scale);
    Ok(LossParts { loss: total_loss(l_r, l_s, lambda), l_r, l_s })
}

/// Loss only (no gradients) for one patch, unscaled.
pub fn patch_loss<T: Scalar>(
    arch: &Architecture,
    params: &[T],
    presets: &Tensor<T>,
    target: &Tensor<T>,
    lambda: f64,
) -> Result<LossParts> {
    let w = arch.forward(params, presets)?;
    let l_r = reconstruction_loss(&w, presets, target).0.as_f64();
    let l_s = smoothness_loss(&w).0.as_f64();
    Ok(LossParts { loss: total_loss(l_r, l_s, lambda), l_r, l_s })
}

/// One training image: the preset renders stacked in preset order and the
/// ground truth, both gamma-encoded.
#[derive(Clone, Debug)]
pub struct TrainingImage {
    pub id: String,
    pub presets: Tensor<f32>,
    pub target: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub presets: Vec<WbSetting>,
    pub images: Vec<TrainingImage>,
}

impl TrainingSet {
    pub fn from_images(presets: &[WbSetting], items: Vec<(String, Vec<Image>, Image)>) -> Result<Self> {
        let mut images = Vec::with_capacity(items.len());
        for (id, renders, gt) in items {
            if renders.len() != presets.len() {
                return Err(Error::Data(format!(
                    "{id}: {} preset images for {} presets",
                    renders.len(),
                    presets.len()
                )));
            }
            for r in &renders {
                r.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
                r.require_same_dims(&gt)?;
            }
            gt.require_space(&[ColorSpace::GammaSrgb], "gamma-srgb")?;
            images.push(TrainingImage {
                id,
                presets: stack_images(&renders)?,
                target: stack_images(std::slice::from_ref(&gt))?,
            });
        }
        Ok(TrainingSet { presets: presets.to_vec(), images })
    }

    /// Exact preset captures of synthetic scenes.
    pub fn from_pairs(presets: &[WbSetting], pairs: &[ScenePair]) -> Result<Self> {
        let items = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let renders = crate::scene::preset_captures(&p.raw, presets)?;
                Ok((crate::scene::scene_id(i), renders, p.ground_truth.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(presets, items)
    }

    /// Loads `preset_<n>.png` and `gt.png` for every manifest scene.
    pub fn load(dir: impl AsRef<Path>, presets: &[WbSetting]) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = Manifest::load(dir)?;
        let items = manifest
            .scenes
            .par_iter()
            .map(|e| {
                let renders = presets
                    .iter()
                    .map(|p| {
                        let rel = e
                            .presets
                            .get(p)
                            .ok_or_else(|| Error::Data(format!("{}: no capture for preset {p}", e.id)))?;
                        load_image(dir.join(rel), ColorSpace::GammaSrgb)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let gt = load_image(dir.join(&e.gt), ColorSpace::GammaSrgb)?;
                Ok((e.id.clone(), renders, gt))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(presets, items)
    }
}

/// Crop origin of one training patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRef {
    pub image: usize,
    pub y: usize,
    pub x: usize,
}

/// Per-epoch image order: a seeded permutation consumed in groups of
/// `images_per_iter`, wrapping around when the set is not a multiple.
pub fn epoch_groups(n_images: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n_images).collect();
    perm.shuffle(rng);
    let per = cfg.images_per_iter;
    let iters = n_images.div_ceil(per).max(1);
    (0..iters).map(|it| (0..per).map(|j| perm[(it * per + j) % n_images]).collect()).collect()
}

/// Random aligned crops, `patches_per_image` from each listed image.
pub fn sample_batch(
    set: &TrainingSet,
    images: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PatchRef>> {
    if set.images.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let p = cfg.patch_size;
    let mut out = Vec::with_capacity(images.len() * cfg.patches_per_image);
    for &i in images {
        let img = &set.images[i];
        let (h, w) = (img.target.h, img.target.w);
        if p > h || p > w {
            return Err(Error::Parameter(format!("patch size {p} exceeds training image {} ({w}x{h})", img.id)));
        }
        for _ in 0..cfg.patches_per_image {
            out.push(PatchRef { image: i, y: rng.gen_range(0..=h - p), x: rng.gen_range(0..=w - p) });
        }
    }
    Ok(out)
}

fn crop_patch(set: &TrainingSet, r: PatchRef, p: usize) -> (Tensor<f32>, Tensor<f32>) {
    let img = &set.images[r.image];
    (img.presets.crop(r.y, r.x, p, p), img.target.crop(r.y, r.x, p, p))
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = b1 * self.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * self.v[i] as f64 + (1.0 - b2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let upd = lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps);
            params[i] = (params[i] as f64 - upd) as f32;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_r: f64,
    pub l_s: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory receiving `checkpoint.tar` after every epoch.
    pub out_dir: Option<PathBuf>,
    pub config_digest: Option<String>,
    pub resume: Option<Checkpoint>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryEntry>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.tar";
pub const HISTORY_FILE: &str = "history.json";

/// Patch samples per parallel work item; fixed so gradient summation order
/// does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

/// Mean loss and summed gradient over a batch, each patch scaled by
/// `1 / batch`.
pub fn batch_gradient(
    arch: &Architecture,
    params: &[f32],
    set: &TrainingSet,
    batch: &[PatchRef],
    cfg: &TrainConfig,
) -> Result<(LossParts, Vec<f32>)> {
    let scale = 1.0 / batch.len() as f64;
    let p = cfg.patch_size;
    let partials: Vec<(LossParts, Vec<f32>)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0f32; arch.num_params];
            let mut parts = LossParts::default();
            for &r in chunk {
                let (x, t) = crop_patch(set, r, p);
                parts.add(patch_loss_and_grad(arch, params, &x, &t, cfg.lambda, scale, &mut g)?);
            }
            Ok((parts, g))
        })
        .collect::<Result<_>>()?;
    let mut total = LossParts::default();
    let mut grads = vec![0.0f32; arch.num_params];
    for (parts, g) in partials {
        total.add(parts);
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((total, grads))
}

fn snapshot(model: &Model, adam: &Adam, cfg: &TrainConfig, epoch: usize, opts: &TrainOptions) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        epoch,
        step: adam.step,
        rng: RngState { seed: cfg.seed, epoch },
        adam: Some(AdamMoments { m: adam.m.clone(), v: adam.v.clone() }),
        config_digest: opts.config_digest.clone(),
        train: serde_json::to_value(cfg).ok(),
    }
}

/// Runs Adam on `L_r + lambda L_s` for `cfg.epochs` epochs. Deterministic
/// for a given config and training set.
pub fn train(set: &TrainingSet, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let presets = cfg.preset_list()?;
    if presets != set.presets {
        return Err(Error::Parameter(format!(
            "training set holds presets {} but config asks for {}",
            WbSetting::list_name(&set.presets),
            cfg.presets
        )));
    }
    if set.images.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (mut model, mut adam, start_epoch) = match &opts.resume {
        Some(ck) => {
            if ck.model.presets != presets {
                return Err(Error::Parameter("resume checkpoint was trained on a different preset set".into()));
            }
            if ck.model.config() != cfg.net.config(presets.len()) {
                return Err(Error::Parameter("resume checkpoint has a different network size".into()));
            }
            let adam = match &ck.adam {
                Some(a) => Adam { m: a.m.clone(), v: a.v.clone(), step: ck.step },
                None => Adam::new(ck.model.arch.num_params),
            };
            (ck.model.clone(), adam, ck.rng.epoch)
        }
        None => {
            let model = Model::new(cfg.net.config(presets.len()), &presets, derive_seed(cfg.seed, u64::MAX))?;
            let n = model.arch.num_params;
            (model, Adam::new(n), 0)
        }
    };
    let ckpt_path = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let mut history = Vec::new();
    let mut iteration = adam.step as usize;
    let mut last_good = snapshot(&model, &adam, cfg, start_epoch, opts);
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64));
        for group in epoch_groups(set.images.len(), cfg, &mut rng) {
            let batch = sample_batch(set, &group, cfg, &mut rng)?;
            let (parts, grads) = batch_gradient(&model.arch, &model.params, set, &batch, cfg)?;
            if !parts.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                let where_ = match &ckpt_path {
                    Some(p) => {
                        last_good.save(p)?;
                        format!("; last good checkpoint (epoch {}) at {}", last_good.epoch, p.display())
                    }
                    None => String::new(),
                };
                return Err(Error::Numerical(format!(
                    "training diverged at iteration {iteration} (epoch {epoch}){where_}"
                )));
            }
            adam.update(&mut model.params, &grads, lr, cfg);
            history.push(HistoryEntry { iteration, epoch, lr, loss: parts.loss, l_r: parts.l_r, l_s: parts.l_s });
            log::debug!("epoch {epoch} iter {iteration}: L={:.4} Lr={:.4} Ls={:.6}", parts.loss, parts.l_r, parts.l_s);
            iteration += 1;
        }
        last_good = snapshot(&model, &adam, cfg, epoch + 1, opts);
        if let Some(p) = &ckpt_path {
            last_good.save(p)?;
        }
        if let Some(h) = history.last() {
            log::info!("epoch {}/{}: L={:.4} Lr={:.4} Ls={:.6}", epoch + 1, cfg.epochs, h.loss, h.l_r, h.l_s);
        }
    }
    if let Some(dir) = &opts.out_dir {
        write_history(dir.join(HISTORY_FILE), &history, opts.config_digest.as_deref())?;
    }
    Ok(TrainOutcome { checkpoint: last_good, history })
}

pub fn write_history(path: impl AsRef<Path>, history: &[HistoryEntry], digest: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let doc = serde_json::json!({ "config_digest": digest, "history": history });
    std::fs::write(path, serde_json::to_string_pretty(&doc)? + "\n").map_err(|e| Error::io(path, e))
}
