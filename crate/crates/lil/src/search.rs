//! Search for latent offsets that turn generated images into intrinsic maps.
//!
//! The working hypothesis is that one fixed style-space delta per intrinsic
//! kind serves every scene. The search therefore optimizes a single (L, Dw)
//! tensor `d` over a pool of training scenes: generate x_i = G(w+_i) once,
//! ask a teacher for the intrinsic target of each x_i, encode the targets
//! into image space, then descend the mean weighted L1 between G(w+_i + d)
//! and the cached targets. Generator weights and per-layer noise stay
//! frozen; the offset is the only free parameter.
//!
//! Two control kinds calibrate the protocol. The identity control targets
//! the unchanged image, so any drift of `d` away from zero is optimizer
//! noise. The swap control targets an image rearrangement (left and right
//! halves exchanged) that no latent offset should be able to express; its
//! loss reduction marks the floor of what "the generator knows" claims must
//! beat.

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{LilError, Result};
use crate::generator::{Generator, IntrinsicKind, NoiseBundle, Offset, StylePoint};
use crate::io;
use crate::nn::{self, Adam, AdamParams};
use crate::rng;
use crate::teachers::{BatchItem, SceneHandle, Teacher};

/// Scenes handed to a teacher per exchange. Only relevant for teachers with
/// per-call overhead; the math is invariant to the chunk size.
const TEACHER_CHUNK: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub n_train_scenes: usize,
    pub n_val_scenes: usize,
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    /// Loss weight on positive pixels for segmentation targets. Masks are
    /// mostly background, so unweighted L1 rewards predicting empty masks.
    pub seg_positive_weight: f32,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n_train_scenes: 200,
            n_val_scenes: 50,
            steps: 2000,
            lr: 0.01,
            batch: 8,
            seg_positive_weight: 10.0,
            seed: 7,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_train_scenes", self.n_train_scenes),
            ("n_val_scenes", self.n_val_scenes),
            ("steps", self.steps),
            ("batch", self.batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LilError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(LilError::Invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(self.seg_positive_weight >= 1.0) {
            return Err(LilError::Invalid(format!(
                "seg_positive_weight must be at least 1, got {}",
                self.seg_positive_weight
            )));
        }
        Ok(())
    }
}

/// A found offset with the loss record needed to judge it.
#[derive(Debug, Clone)]
pub struct SearchResult {
    pub offset: Offset,
    /// Mean training loss at d = 0, before any step.
    pub initial_loss: f32,
    /// Mean training loss at the final d, full pass.
    pub train_loss: f32,
    /// Mean held-out loss at the final d.
    pub val_loss: f32,
    /// Set when validation loss exceeds twice the training loss.
    pub overfit: bool,
    pub config: SearchConfig,
}

impl SearchResult {
    /// Fraction of the initial loss removed by the search, in [0, 1] when
    /// optimization helped at all.
    pub fn reduction(&self) -> f32 {
        if self.initial_loss <= 0.0 {
            return 0.0;
        }
        1.0 - self.train_loss / self.initial_loss
    }
}

fn positive_weight(kind: IntrinsicKind, cfg: &SearchConfig) -> f32 {
    match kind {
        IntrinsicKind::Segmentation(_) => cfg.seg_positive_weight,
        _ => 1.0,
    }
}

/// Weighted mean absolute error. Targets equal to one carry `wpos`, all
/// other pixels weight one; with `wpos` = 1 this is plain L1. The
/// denominator is the element count, not the weight sum, so losses stay
/// comparable across kinds.
fn weighted_l1(y: &Array3<f32>, t: &Array3<f32>, wpos: f32) -> f32 {
    let n = y.len() as f32;
    y.iter()
        .zip(t.iter())
        .map(|(a, b)| {
            let w = if *b == 1.0 { wpos } else { 1.0 };
            w * (a - b).abs()
        })
        .sum::<f32>()
        / n
}

/// Loss plus its gradient in the prediction. The subgradient of |x| at zero
/// is taken as zero, which keeps an already-perfect prediction (the identity
/// control at d = 0) exactly stationary.
fn weighted_l1_grad(y: &Array3<f32>, t: &Array3<f32>, wpos: f32) -> (f32, Array3<f32>) {
    let n = y.len() as f32;
    let mut grad = Array3::zeros(y.raw_dim());
    let mut loss = 0.0f32;
    for ((g, a), b) in grad.iter_mut().zip(y.iter()).zip(t.iter()) {
        let w = if *b == 1.0 { wpos } else { 1.0 };
        let diff = a - b;
        loss += w * diff.abs();
        *g = w * diff.signum() * f32::from(diff != 0.0) / n;
    }
    (loss / n, grad)
}

/// The swap-control target: left and right image halves exchanged.
pub fn swap_halves(img: &Array3<f32>) -> Result<Array3<f32>> {
    let (h, w, c) = img.dim();
    if w % 2 != 0 {
        return Err(LilError::Invalid(format!(
            "cannot swap halves of odd width {w}"
        )));
    }
    let half = w / 2;
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let src = (j + half) % w;
            for k in 0..c {
                out[(i, j, k)] = img[(i, src, k)];
            }
        }
    }
    Ok(out)
}

/// Encoded targets for every scene, in scene order. Control targets are
/// derived from the images themselves; everything else goes through the
/// teacher in chunks.
fn build_targets(
    kind: IntrinsicKind,
    teacher: &dyn Teacher,
    images: &[Array3<f32>],
    latents: &[Array1<f32>],
) -> Result<Vec<Array3<f32>>> {
    match kind {
        IntrinsicKind::IdentityControl => Ok(images.to_vec()),
        IntrinsicKind::SwapControl => images.iter().map(swap_halves).collect(),
        _ => {
            let mut targets = Vec::with_capacity(images.len());
            for chunk_start in (0..images.len()).step_by(TEACHER_CHUNK) {
                let end = (chunk_start + TEACHER_CHUNK).min(images.len());
                let items: Vec<BatchItem> = (chunk_start..end)
                    .map(|i| BatchItem {
                        image: images[i].clone(),
                        handle: Some(SceneHandle {
                            z: latents[i].clone(),
                        }),
                    })
                    .collect();
                for map in teacher.predict(kind, &items)? {
                    targets.push(map.encode()?);
                }
            }
            Ok(targets)
        }
    }
}

/// Mean loss of the offset generator over a scene slice, full pass.
fn mean_loss(
    gen: &Generator,
    styles: &[StylePoint],
    targets: &[Array3<f32>],
    delta: &Array2<f32>,
    noise: &NoiseBundle,
    wpos: f32,
) -> Result<f32> {
    let mut total = 0.0f64;
    for (sp, t) in styles.iter().zip(targets) {
        let point = StylePoint {
            rows: &sp.rows + delta,
        };
        let img = gen.synthesize(&point, noise)?;
        total += weighted_l1(&img, t, wpos) as f64;
    }
    Ok((total / styles.len() as f64) as f32)
}

/// The search's scene latents: training scenes first, then validation.
/// Exposed so downstream stages can score an offset on exactly the scenes
/// it was (or was not) fit to.
pub fn search_pool(cfg: &SearchConfig, dz: usize) -> Vec<Array1<f32>> {
    rng::latent_pool(
        cfg.seed,
        "search/scenes",
        cfg.n_train_scenes + cfg.n_val_scenes,
        dz,
    )
}

/// The frozen noise draw the search optimizes under.
pub fn search_noise(cfg: &SearchConfig, gen: &Generator) -> NoiseBundle {
    NoiseBundle::from_seed(rng::substream_seed(cfg.seed, "search/noise"), &gen.arch)
}

pub fn find_offset(
    kind: IntrinsicKind,
    gen: &Generator,
    teacher: &dyn Teacher,
    cfg: &SearchConfig,
) -> Result<SearchResult> {
    cfg.validate()?;
    if !kind.is_control() && !teacher.supports(kind) {
        return Err(LilError::UnsupportedKind {
            teacher: teacher.name().to_string(),
            kind: kind.token(),
        });
    }

    // One fixed scene pool and one frozen noise draw for the whole search.
    // The pool depends only on the seed, so every kind trains against the
    // same scenes and offsets stay comparable.
    let latents = search_pool(cfg, gen.arch.dz);
    let noise = search_noise(cfg, gen);
    let mut styles = Vec::with_capacity(latents.len());
    let mut images = Vec::with_capacity(latents.len());
    for z in &latents {
        let point = gen.broadcast(gen.map_latent(z.view())?.view());
        images.push(gen.synthesize(&point, &noise)?);
        styles.push(point);
    }
    let targets = build_targets(kind, teacher, &images, &latents)?;
    drop(images);

    let wpos = positive_weight(kind, cfg);
    let n_train = cfg.n_train_scenes;
    let (l, dw) = (gen.arch.n_layers(), gen.arch.dw);
    let mut delta = Array2::<f32>::zeros((l, dw));

    let initial_loss = mean_loss(gen, &styles[..n_train], &targets[..n_train], &delta, &noise, wpos)?;
    if !initial_loss.is_finite() {
        return Err(LilError::Diverged {
            step: 0,
            loss: initial_loss as f64,
        });
    }

    let mut adam = Adam::new(
        AdamParams {
            lr: cfg.lr,
            ..AdamParams::default()
        },
        &[l * dw],
    );
    let mut batch_rng = rng::substream(cfg.seed, "search/batch");
    for step in 0..cfg.steps {
        let mut grad = Array2::<f32>::zeros((l, dw));
        let mut batch_loss = 0.0f32;
        for _ in 0..cfg.batch {
            let i = rand::Rng::gen_range(&mut batch_rng, 0..n_train);
            let point = StylePoint {
                rows: &styles[i].rows + &delta,
            };
            let (img, cache) = gen.synthesize_cached(&point, &noise)?;
            let (loss, d_img) = weighted_l1_grad(&img, &targets[i], wpos);
            batch_loss += loss;
            grad += &gen.backward_synthesis(&cache, &d_img, &noise, None);
        }
        batch_loss /= cfg.batch as f32;
        if !batch_loss.is_finite() {
            return Err(LilError::Diverged {
                step,
                loss: batch_loss as f64,
            });
        }
        grad /= cfg.batch as f32;
        let lr = nn::cosine_lr(cfg.lr, step, cfg.steps, 0.05);
        adam.step_with_lr(
            lr,
            &mut [delta.as_slice_mut().unwrap()],
            &[grad.as_slice().unwrap()],
        );
        if (step + 1) % 200 == 0 {
            log::debug!(
                "{}: step {} batch loss {:.5} |d| {:.2}",
                kind.token(),
                step + 1,
                batch_loss,
                delta.mapv(|v| v * v).sum().sqrt()
            );
        }
    }

    let train_loss = mean_loss(gen, &styles[..n_train], &targets[..n_train], &delta, &noise, wpos)?;
    let val_loss = mean_loss(gen, &styles[n_train..], &targets[n_train..], &delta, &noise, wpos)?;
    if !train_loss.is_finite() || !val_loss.is_finite() {
        return Err(LilError::Diverged {
            step: cfg.steps,
            loss: (train_loss as f64).max(val_loss as f64),
        });
    }

    Ok(SearchResult {
        offset: Offset {
            kind,
            delta,
            checkpoint_id: gen.content_id(),
            final_loss: train_loss,
            train_scene_count: n_train,
        },
        initial_loss,
        train_loss,
        val_loss,
        overfit: val_loss > 2.0 * train_loss,
        config: cfg.clone(),
    })
}

/// One offset per lighting-table entry. The entry matching the canonical
/// training light should come out near zero; the rest encode a move to
/// their light.
pub fn find_relighting_offsets(
    gen: &Generator,
    teacher: &dyn Teacher,
    cfg: &SearchConfig,
    k: usize,
) -> Result<Vec<SearchResult>> {
    (0..k)
        .map(|j| find_offset(IntrinsicKind::Relighting(j), gen, teacher, cfg))
        .collect()
}

/// A random style-space direction with the same norm as the given offset,
/// for chance baselines. A zero offset yields a zero direction.
pub fn random_direction_like(offset: &Offset, seed: u64) -> Offset {
    let (l, dw) = offset.delta.dim();
    let mut r = rng::substream(seed, "search/random-direction");
    let flat = rng::standard_normal(&mut r, l * dw);
    let mut delta = flat.into_shape_with_order((l, dw)).unwrap();
    let raw_norm = delta.iter().map(|v| v * v).sum::<f32>().sqrt();
    let target = offset.norm();
    if raw_norm > 0.0 {
        delta.mapv_inplace(|v| v * target / raw_norm);
    }
    Offset {
        kind: offset.kind,
        delta,
        checkpoint_id: offset.checkpoint_id.clone(),
        final_loss: f32::NAN,
        train_scene_count: 0,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct OffsetManifest {
    kind: String,
    checkpoint: String,
    config: SearchConfig,
    initial_loss: f32,
    train_loss: f32,
    val_loss: f32,
    overfit: bool,
    norm: f32,
    rows: usize,
    cols: usize,
    delta_file: String,
}

/// Writes the offset as a JSON manifest beside a float container holding the
/// delta. The manifest records everything needed to audit the search:
/// config, losses, norm, and the checkpoint hash the offset belongs to.
pub fn save_offset(manifest_path: &Path, result: &SearchResult) -> Result<()> {
    let delta_name = manifest_path
        .file_stem()
        .and_then(|s| s.to_str())
        .map(|s| format!("{s}.bin"))
        .ok_or_else(|| LilError::Invalid(format!("bad offset path {manifest_path:?}")))?;
    let (rows, cols) = result.offset.delta.dim();
    let manifest = OffsetManifest {
        kind: result.offset.kind.token(),
        checkpoint: result.offset.checkpoint_id.clone(),
        config: result.config.clone(),
        initial_loss: result.initial_loss,
        train_loss: result.train_loss,
        val_loss: result.val_loss,
        overfit: result.overfit,
        norm: result.offset.norm(),
        rows,
        cols,
        delta_file: delta_name.clone(),
    };
    let bin_path = manifest_path.with_file_name(&delta_name);
    let as3 = result
        .offset
        .delta
        .clone()
        .insert_axis(ndarray::Axis(2));
    io::write_f32_map(&bin_path, as3.view())?;
    io::write_json_atomic(manifest_path, &manifest)
}

pub fn load_offset(manifest_path: &Path) -> Result<SearchResult> {
    let manifest: OffsetManifest = io::read_json(manifest_path)?;
    let kind = IntrinsicKind::parse(&manifest.kind)?;
    let bin_path = manifest_path.with_file_name(&manifest.delta_file);
    let raw = io::read_f32_map(&bin_path)?;
    let (h, w, c) = raw.dim();
    if c != 1 || h != manifest.rows || w != manifest.cols {
        return Err(LilError::Shape {
            expected: format!("({}, {}, 1)", manifest.rows, manifest.cols),
            got: format!("({h}, {w}, {c})"),
        });
    }
    let delta = raw.remove_axis(ndarray::Axis(2));
    let norm = delta.iter().map(|v| v * v).sum::<f32>().sqrt();
    if (norm - manifest.norm).abs() > 1e-4 * norm.max(1.0) {
        return Err(LilError::format(
            manifest_path,
            format!(
                "delta norm {norm} does not match manifest norm {}",
                manifest.norm
            ),
        ));
    }
    Ok(SearchResult {
        offset: Offset {
            kind,
            delta,
            checkpoint_id: manifest.checkpoint,
            final_loss: manifest.train_loss,
            train_scene_count: manifest.config.n_train_scenes,
        },
        initial_loss: manifest.initial_loss,
        train_loss: manifest.train_loss,
        val_loss: manifest.val_loss,
        overfit: manifest.overfit,
        config: manifest.config,
    })
}
