//! Training loops for the generator and the baseline regressor.
//!
//! The generator is fit by supervised reconstruction: sample a latent z,
//! render the scene that z describes, and minimize the mean L1 distance
//! between the synthesized image and the photograph. The loss sees RGB only.
//! To make that auditable the loop consumes an [`RgbView`], a view of the
//! dataset that holds scene latents and photograph paths and nothing else;
//! ground-truth intrinsics under `gt/` are unreachable from it.
//!
//! The baseline regressor is the opposite arrangement on purpose: it trains
//! directly on ground-truth normal maps with full supervision, giving the
//! robustness comparison a conventional dense predictor. It sees exactly the
//! records the dataset contains; there is no lighting augmentation on top.

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::codec;
use crate::error::{LilError, Result};
use crate::generator::{CheckpointMeta, GenArch, Generator, NoiseBundle, TrainMeta};
use crate::io;
use crate::nn::{self, cosine_lr, Adam, AdamParams, Dense};
use crate::procgen::DatasetManifest;
use crate::regressor::{Regressor, RegressorMeta};
use crate::rng;

/// Image-only view of a dataset: per scene, the latent that generated it and
/// the path of its photograph. Constructing one drops every ground-truth
/// path on the floor, so code that only receives an `RgbView` cannot read
/// intrinsic maps even by accident.
pub struct RgbView {
    items: Vec<(Array1<f32>, PathBuf)>,
    pub dz: usize,
}

impl RgbView {
    /// Native-light records only: one image per scene, lit by the light its
    /// own latent encodes, so lighting varies across scenes exactly as the
    /// latent prior says it should.
    pub fn native(dir: &Path, manifest: &DatasetManifest) -> RgbView {
        let items = manifest
            .native_records()
            .map(|r| {
                let z = crate::procgen::scene_latent(r.scene_seed, manifest.dz);
                (z, dir.join(&r.image))
            })
            .collect();
        RgbView {
            items,
            dz: manifest.dz,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn latent(&self, i: usize) -> &Array1<f32> {
        &self.items[i].0
    }

    pub fn load_image(&self, i: usize) -> Result<Array3<f32>> {
        io::read_png(&self.items[i].1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Expected dataset shape; checked against the manifest.
    pub n_scenes: usize,
    pub k_lights: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Scenes reserved for held-out evaluation, taken from the end.
    pub holdout: usize,
    pub eval_every: usize,
    /// Mean held-out L1 at or below this counts as converged.
    pub threshold: f32,
    /// Standard deviation of additive style-row noise during training.
    /// Zero disables it.
    pub style_jitter: f32,
    /// Experimental adversarial fine-tune steps after reconstruction
    /// training. Zero (the default) skips it; results are logged but nothing
    /// downstream depends on them.
    pub adversarial_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_scenes: 2000,
            k_lights: 1,
            steps: 6000,
            batch: 8,
            lr: 2e-3,
            seed: 7,
            holdout: 64,
            eval_every: 250,
            threshold: 0.05,
            style_jitter: 0.0,
            adversarial_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 || self.k_lights == 0 || self.steps == 0 || self.batch == 0 {
            return Err(LilError::Config("counts must be positive".into()));
        }
        if !(0.0 < self.threshold && self.threshold < 1.0) {
            return Err(LilError::Config(format!(
                "threshold must be in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.holdout == 0 || self.holdout >= self.n_scenes {
            return Err(LilError::Config(format!(
                "holdout must be in 1..{}, got {}",
                self.n_scenes, self.holdout
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(LilError::Config(format!("bad learning rate {}", self.lr)));
        }
        Ok(())
    }
}

fn check_manifest(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<()> {
    if manifest.n_scenes != cfg.n_scenes || manifest.k_lights != cfg.k_lights {
        return Err(LilError::Config(format!(
            "dataset has {} scenes x {} lights, config expects {} x {}",
            manifest.n_scenes, manifest.k_lights, cfg.n_scenes, cfg.k_lights
        )));
    }
    Ok(())
}

/// Mean absolute difference over all pixels and channels.
fn mean_l1(a: &Array3<f32>, b: &Array3<f32>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / n
}

/// d mean_l1 / d a, scaled by `scale`.
fn l1_grad(a: &Array3<f32>, b: &Array3<f32>, scale: f32) -> Array3<f32> {
    let n = a.len() as f32;
    let mut g = Array3::zeros(a.dim());
    for ((ga, &x), &y) in g.iter_mut().zip(a.iter()).zip(b.iter()) {
        // Subgradient 0 at exact equality.
        *ga = (x - y).signum() * f32::from(x != y) * scale / n;
    }
    g
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub generator: Generator,
    pub meta: CheckpointMeta,
    pub final_heldout_l1: f32,
    pub converged: bool,
}

/// Reconstruction training. Writes the checkpoint to `ckpt_path` (flagged
/// not-converged if the threshold was missed) and the step log to
/// `log_path` as CSV with columns step, loss, heldout.
pub fn train_generator(
    dataset_dir: &Path,
    cfg: &TrainConfig,
    ckpt_path: &Path,
    log_path: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = DatasetManifest::load(dataset_dir)?;
    check_manifest(&manifest, cfg)?;
    let view = RgbView::native(dataset_dir, &manifest);
    let manifest_sha = io::sha256_file(&dataset_dir.join(crate::procgen::MANIFEST_NAME)).ok();

    let n_train = view.len() - cfg.holdout;
    log::info!(
        "training generator on {n_train} scenes, {} held out, {} steps",
        cfg.holdout,
        cfg.steps
    );

    // Everything fits comfortably in memory at 64x64.
    let images: Vec<Array3<f32>> = (0..view.len())
        .map(|i| view.load_image(i))
        .collect::<Result<_>>()?;

    // The latent width follows the dataset so the trained prior is exactly
    // the one scenes are sampled from.
    let arch = GenArch {
        dz: manifest.dz,
        ..GenArch::default()
    };
    let mut gen = Generator::new(arch, rng::substream_seed(cfg.seed, "train/init"))?;
    let noise = NoiseBundle::from_seed(rng::substream_seed(cfg.seed, "train/noise"), &gen.arch);
    let sizes: Vec<usize> = gen.flat().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(
        AdamParams {
            lr: cfg.lr,
            ..AdamParams::default()
        },
        &sizes,
    );
    let mut batch_rng = rng::substream(cfg.seed, "train/batch");
    let mut jitter_rng = rng::substream(cfg.seed, "train/jitter");

    let heldout_l1 = |gen: &Generator, cap: usize| -> Result<f64> {
        let take = cfg.holdout.min(cap);
        let mut total = 0.0;
        for i in n_train..n_train + take {
            let w = gen.map_latent(view.latent(i).view())?;
            let img = gen.synthesize(&gen.broadcast(w.view()), &noise)?;
            total += mean_l1(&img, &images[i]);
        }
        Ok(total / take as f64)
    };

    let mut log_rows = vec!["step,loss,heldout".to_string()];
    for step in 0..cfg.steps {
        let mut grad = gen.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let i = rand::Rng::gen_range(&mut batch_rng, 0..n_train);
            let (w, mcache) = gen.map_latent_cached(view.latent(i).view())?;
            let mut sp = gen.broadcast(w.view());
            if cfg.style_jitter > 0.0 {
                let j = rng::standard_normal(&mut jitter_rng, sp.rows.len());
                let j = j.into_shape_with_order(sp.rows.dim()).unwrap();
                sp.rows = &sp.rows + &(&j * cfg.style_jitter);
            }
            let (img, cache) = gen.synthesize_cached(&sp, &noise)?;
            loss += mean_l1(&img, &images[i]);
            let d_img = l1_grad(&img, &images[i], 1.0 / cfg.batch as f32);
            let d_styles = gen.backward_synthesis(&cache, &d_img, &noise, Some(&mut grad));
            gen.backward_mapping(&mcache, d_styles.sum_axis(Axis(0)).view(), &mut grad);
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(LilError::Diverged { step, loss });
        }

        let lr = cosine_lr(cfg.lr, step, cfg.steps, 0.05);
        {
            let gslices = grad.flat();
            let mut pslices = gen.flat_mut();
            adam.step_with_lr(lr, &mut pslices, &gslices);
        }

        if step % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let h = heldout_l1(&gen, 64)?;
            log_rows.push(format!("{step},{loss:.6},{h:.6}"));
            log::info!("step {step}: loss {loss:.4}, heldout {h:.4}");
        } else {
            log_rows.push(format!("{step},{loss:.6},"));
        }
    }

    if cfg.adversarial_steps > 0 {
        let adv_log = log_path.with_file_name("train_adversarial.csv");
        adversarial_finetune(&mut gen, &noise, &images[..n_train], cfg, &adv_log)?;
    }

    let final_h = heldout_l1(&gen, usize::MAX)? as f32;
    let converged = final_h <= cfg.threshold;
    if !converged {
        log::warn!(
            "held-out L1 {final_h:.4} missed the threshold {}; checkpoint flagged",
            cfg.threshold
        );
    }
    let meta = gen.save_checkpoint(
        ckpt_path,
        &TrainMeta {
            seed: cfg.seed,
            steps: cfg.steps,
            final_heldout_l1: Some(final_h),
            converged: Some(converged),
            dataset_manifest_sha: manifest_sha,
        },
    )?;
    io::atomic_write(log_path, (log_rows.join("\n") + "\n").as_bytes())?;
    Ok(TrainOutcome {
        generator: gen,
        meta,
        final_heldout_l1: final_h,
        converged,
    })
}

// --- adversarial fine-tune (experimental, off by default) ---

/// Three stride-free conv stages with average pooling, global mean, one
/// score. Small on purpose; this exists to exercise the training path, not
/// to chase fidelity.
struct Discriminator {
    convs: Vec<(Array2<f32>, Array1<f32>)>,
    head: Dense,
}

impl Discriminator {
    fn new(seed: u64) -> Discriminator {
        let mut r = rng::rng_from_seed(seed);
        let plan = [(3usize, 16usize), (16, 24), (24, 32)];
        let convs = plan
            .iter()
            .map(|&(ci, co)| {
                (
                    nn::he_normal(&mut r, ci * 9, (co, ci * 9)),
                    Array1::zeros(co),
                )
            })
            .collect();
        Discriminator {
            convs,
            head: Dense::new(&mut r, 32, 1),
        }
    }

    fn flat(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for (w, b) in &self.convs {
            out.push(w.as_slice().unwrap());
            out.push(b.as_slice().unwrap());
        }
        out.push(self.head.w.as_slice().unwrap());
        out.push(self.head.b.as_slice().unwrap());
        out
    }

    fn flat_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for (w, b) in &mut self.convs {
            out.push(w.as_slice_mut().unwrap());
            out.push(b.as_slice_mut().unwrap());
        }
        out.push(self.head.w.as_slice_mut().unwrap());
        out.push(self.head.b.as_slice_mut().unwrap());
        out
    }

    fn zeros_like(&self) -> Discriminator {
        let mut d = Discriminator {
            convs: self.convs.clone(),
            head: self.head.zeros_like(),
        };
        for t in d.flat_mut() {
            t.fill(0.0);
        }
        d
    }

    /// Returns the raw score and a cache for backward.
    fn forward(&self, image: &Array3<f32>) -> (f32, DiscCache) {
        let (h, w, _) = image.dim();
        let mut x = Array3::zeros((3, h, w));
        for i in 0..h {
            for j in 0..w {
                for c in 0..3 {
                    x[(c, i, j)] = image[(i, j, c)];
                }
            }
        }
        let mut acts = Vec::new();
        let mut cols_all = Vec::new();
        for (cw, cb) in &self.convs {
            let (_, xh, xw) = x.dim();
            let cols = nn::im2col3(x.view());
            let mut y = nn::matmul(cw.view(), cols.view());
            for (o, mut row) in y.rows_mut().into_iter().enumerate() {
                let b = cb[o];
                row.mapv_inplace(|v| v + b);
            }
            nn::lrelu_inplace(y.as_slice_mut().unwrap());
            let y = y.into_shape_with_order((cw.nrows(), xh, xw)).unwrap();
            x = nn::avgpool2(y.view());
            acts.push(y);
            cols_all.push(cols);
        }
        let (c, fh, fw) = x.dim();
        let pooled = Array1::from_iter(
            (0..c).map(|ch| x.index_axis(Axis(0), ch).sum() / (fh * fw) as f32),
        );
        let score = self.head.forward(pooled.view())[0];
        (
            score,
            DiscCache {
                acts,
                cols: cols_all,
                pooled,
                final_dim: (c, fh, fw),
            },
        )
    }

    /// Backward from d(score); accumulates parameter gradients and returns
    /// the gradient on the input image in (H, W, 3).
    fn backward(&self, cache: &DiscCache, dscore: f32, grad: &mut Discriminator) -> Array3<f32> {
        let dpooled = self.head.backward(
            cache.pooled.view(),
            Array1::from_elem(1, dscore).view(),
            &mut grad.head,
        );
        let (c, fh, fw) = cache.final_dim;
        let mut dx = Array3::zeros((c, fh, fw));
        for ch in 0..c {
            dx.index_axis_mut(Axis(0), ch)
                .fill(dpooled[ch] / (fh * fw) as f32);
        }
        for i in (0..self.convs.len()).rev() {
            let mut dy = nn::avgpool2_backward(dx.view());
            let y = &cache.acts[i];
            let (co, yh, yw) = y.dim();
            nn::lrelu_backward_from_output(dy.as_slice_mut().unwrap(), y.as_slice().unwrap());
            let dy2 = dy.view().into_shape_with_order((co, yh * yw)).unwrap();
            nn::matmul_acc_wgrad(dy2, cache.cols[i].view(), &mut grad.convs[i].0);
            for (o, row) in dy2.rows().into_iter().enumerate() {
                grad.convs[i].1[o] += row.sum();
            }
            let dcols = nn::matmul_colgrad(self.convs[i].0.view(), dy2);
            let ci = if i == 0 { 3 } else { self.convs[i - 1].0.nrows() };
            dx = nn::col2im3(dcols.view(), ci, yh, yw);
        }
        let (_, h, w) = dx.dim();
        let mut out = Array3::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    out[(i, j, ch)] = dx[(ch, i, j)];
                }
            }
        }
        out
    }
}

struct DiscCache {
    acts: Vec<Array3<f32>>,
    cols: Vec<Array2<f32>>,
    pooled: Array1<f32>,
    final_dim: (usize, usize, usize),
}

fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Non-saturating GAN fine-tune. Logged to its own CSV; nothing reads the
/// result back.
fn adversarial_finetune(
    gen: &mut Generator,
    noise: &NoiseBundle,
    real: &[Array3<f32>],
    cfg: &TrainConfig,
    log_path: &Path,
) -> Result<()> {
    let mut disc = Discriminator::new(rng::substream_seed(cfg.seed, "adv/disc"));
    let dsizes: Vec<usize> = disc.flat().iter().map(|t| t.len()).collect();
    let gsizes: Vec<usize> = gen.flat().iter().map(|t| t.len()).collect();
    let mut d_adam = Adam::new(AdamParams { lr: 1e-4, ..AdamParams::default() }, &dsizes);
    let mut g_adam = Adam::new(AdamParams { lr: 5e-5, ..AdamParams::default() }, &gsizes);
    let mut r = rng::substream(cfg.seed, "adv/batch");
    let batch = cfg.batch.min(4).max(1);
    let mut rows = vec!["step,d_loss,g_loss".to_string()];

    for step in 0..cfg.adversarial_steps {
        // Discriminator update.
        let mut dgrad = disc.zeros_like();
        let mut d_loss = 0.0;
        let mut fakes = Vec::with_capacity(batch);
        for _ in 0..batch {
            let i = rand::Rng::gen_range(&mut r, 0..real.len());
            let (score, cache) = disc.forward(&real[i]);
            d_loss += softplus(-score as f64);
            let d = -(1.0 - sigmoid64(score as f64)) as f32 / batch as f32;
            disc.backward(&cache, d, &mut dgrad);

            let z = rng::standard_normal(&mut r, gen.arch.dz);
            let w = gen.map_latent(z.view())?;
            let fake = gen.synthesize(&gen.broadcast(w.view()), noise)?;
            let (score, cache) = disc.forward(&fake);
            d_loss += softplus(score as f64);
            let d = sigmoid64(score as f64) as f32 / batch as f32;
            disc.backward(&cache, d, &mut dgrad);
            fakes.push(z);
        }
        {
            let gs = dgrad.flat();
            let mut ps = disc.flat_mut();
            d_adam.step(&mut ps, &gs);
        }

        // Generator update on fresh latents.
        let mut ggrad = gen.zeros_like();
        let mut g_loss = 0.0;
        for z in &fakes {
            let (w, mcache) = gen.map_latent_cached(z.view())?;
            let sp = gen.broadcast(w.view());
            let (fake, cache) = gen.synthesize_cached(&sp, noise)?;
            let (score, dcache) = disc.forward(&fake);
            g_loss += softplus(-score as f64);
            let mut sink = disc.zeros_like();
            let d_img = disc.backward(
                &dcache,
                -(1.0 - sigmoid64(score as f64)) as f32 / batch as f32,
                &mut sink,
            );
            let d_styles = gen.backward_synthesis(&cache, &d_img, noise, Some(&mut ggrad));
            gen.backward_mapping(&mcache, d_styles.sum_axis(Axis(0)).view(), &mut ggrad);
        }
        {
            let gs = ggrad.flat();
            let mut ps = gen.flat_mut();
            g_adam.step(&mut ps, &gs);
        }
        let (dl, gl) = (d_loss / (2 * batch) as f64, g_loss / batch as f64);
        if !dl.is_finite() || !gl.is_finite() {
            return Err(LilError::Diverged { step, loss: dl + gl });
        }
        rows.push(format!("{step},{dl:.6},{gl:.6}"));
    }
    io::atomic_write(log_path, (rows.join("\n") + "\n").as_bytes())
}

// --- baseline regressor ---

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
    /// Scenes (not records) held out from the end of the id range.
    pub holdout: usize,
    pub eval_every: usize,
    /// Held-out mean angular error target, radians.
    pub threshold_angular: f32,
}

impl Default for RegTrainConfig {
    fn default() -> Self {
        RegTrainConfig {
            steps: 2500,
            batch: 8,
            lr: 1e-3,
            seed: 11,
            holdout: 64,
            eval_every: 250,
            threshold_angular: 0.15,
        }
    }
}

#[derive(Debug)]
pub struct RegOutcome {
    pub regressor: Regressor,
    pub meta: RegressorMeta,
    pub final_heldout_angular: f32,
}

/// Mean angle in radians between predicted and true normals, skipping
/// pixels where the prediction was too degenerate to decode.
fn mean_angular(pred_img: &Array3<f32>, gt_normal: &Array3<f32>) -> Result<f64> {
    let (dec, invalid) = codec::decode_normal(pred_img.view())?;
    let (h, w, _) = dec.dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            if invalid[(i, j)] {
                continue;
            }
            let dot: f64 = (0..3)
                .map(|c| dec[(i, j, c)] as f64 * gt_normal[(i, j, c)] as f64)
                .sum();
            total += dot.clamp(-1.0, 1.0).acos();
            count += 1;
        }
    }
    if count == 0 {
        return Err(LilError::Invalid("no decodable normals in image".into()));
    }
    Ok(total / count as f64)
}

/// Fully supervised training of the image -> normal regressor on every
/// record in the dataset (all light slots, nothing added).
pub fn train_baseline_regressor(
    dataset_dir: &Path,
    cfg: &RegTrainConfig,
    ckpt_path: &Path,
    log_path: &Path,
) -> Result<RegOutcome> {
    if cfg.steps == 0 || cfg.batch == 0 || cfg.holdout == 0 {
        return Err(LilError::Config("counts must be positive".into()));
    }
    let manifest = DatasetManifest::load(dataset_dir)?;
    if cfg.holdout >= manifest.n_scenes {
        return Err(LilError::Config(format!(
            "holdout {} swallows all {} scenes",
            cfg.holdout, manifest.n_scenes
        )));
    }
    let split = manifest.n_scenes - cfg.holdout;
    let mut train_items = Vec::new();
    let mut held_items = Vec::new();
    for rec in &manifest.records {
        let img = io::read_png(&dataset_dir.join(&rec.image))?;
        let gtn = io::read_f32_map(&dataset_dir.join(&rec.gt["normal"]))?;
        let target = codec::encode_normal(gtn.view())?;
        if rec.scene_id < split {
            train_items.push((img, target, gtn));
        } else {
            held_items.push((img, target, gtn));
        }
    }
    log::info!(
        "training regressor on {} records, {} held out",
        train_items.len(),
        held_items.len()
    );

    let mut reg = Regressor::new(rng::substream_seed(cfg.seed, "reg/init"));
    let sizes: Vec<usize> = reg.flat().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(
        AdamParams {
            lr: cfg.lr,
            ..AdamParams::default()
        },
        &sizes,
    );
    let mut batch_rng = rng::substream(cfg.seed, "reg/batch");

    let heldout_angular = |reg: &Regressor| -> Result<f64> {
        let mut total = 0.0;
        for (img, _, gtn) in &held_items {
            total += mean_angular(&reg.forward(img.view())?, gtn)?;
        }
        Ok(total / held_items.len() as f64)
    };

    let mut rows = vec!["step,loss,heldout_angular".to_string()];
    for step in 0..cfg.steps {
        let mut grad = reg.zeros_like();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let i = rand::Rng::gen_range(&mut batch_rng, 0..train_items.len());
            let (img, target, _) = &train_items[i];
            let (pred, cache) = reg.forward_cached(img.view())?;
            loss += mean_l1(&pred, target);
            let d = l1_grad(&pred, target, 1.0 / cfg.batch as f32);
            reg.backward(&cache, &d, &mut grad);
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(LilError::Diverged { step, loss });
        }
        let lr = cosine_lr(cfg.lr, step, cfg.steps, 0.05);
        {
            let gs = grad.flat();
            let mut ps = reg.flat_mut();
            adam.step_with_lr(lr, &mut ps, &gs);
        }
        if step % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let a = heldout_angular(&reg)?;
            rows.push(format!("{step},{loss:.6},{a:.6}"));
            log::info!("reg step {step}: loss {loss:.4}, heldout angular {a:.4}");
        } else {
            rows.push(format!("{step},{loss:.6},"));
        }
    }

    let final_angular = heldout_angular(&reg)? as f32;
    if final_angular > cfg.threshold_angular {
        log::warn!(
            "regressor heldout angular {final_angular:.4} above target {}",
            cfg.threshold_angular
        );
    }
    let meta = RegressorMeta {
        seed: cfg.seed,
        steps: cfg.steps,
        final_heldout_angular: Some(final_angular),
        dataset_manifest_sha: io::sha256_file(&dataset_dir.join(crate::procgen::MANIFEST_NAME))
            .ok(),
        ..Default::default()
    };
    reg.save_checkpoint(ckpt_path, &meta)?;
    io::atomic_write(log_path, (rows.join("\n") + "\n").as_bytes())?;
    let (_, meta) = Regressor::load_checkpoint(ckpt_path)?;
    Ok(RegOutcome {
        regressor: reg,
        meta,
        final_heldout_angular: final_angular,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.threshold = 1.5;
        assert!(cfg.validate().is_err());
        cfg.threshold = 0.05;
        cfg.holdout = cfg.n_scenes;
        assert!(cfg.validate().is_err());
        cfg.holdout = 4;
        cfg.batch = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn l1_grad_is_zero_at_equality() {
        let a = Array3::from_elem((2, 2, 3), 0.5);
        let g = l1_grad(&a, &a, 1.0);
        assert!(g.iter().all(|v| *v == 0.0));
        let mut b = a.clone();
        b[(0, 0, 0)] = 0.25;
        let g = l1_grad(&a, &b, 12.0);
        assert_eq!(g[(0, 0, 0)], 1.0);
        assert_eq!(g[(1, 1, 2)], 0.0);
    }

    #[test]
    fn mean_angular_matches_hand_case() {
        // Prediction encodes (1,0,0) everywhere, truth is (0,1,0): 90 deg.
        let mut pred = Array3::from_elem((2, 2, 3), 0.5);
        for i in 0..2 {
            for j in 0..2 {
                pred[(i, j, 0)] = 1.0;
            }
        }
        let mut gt = Array3::zeros((2, 2, 3));
        for i in 0..2 {
            for j in 0..2 {
                gt[(i, j, 1)] = 1.0;
            }
        }
        let a = mean_angular(&pred, &gt).unwrap();
        assert!((a - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }
}
