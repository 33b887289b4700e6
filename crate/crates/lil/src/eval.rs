//! Metrics and evaluation protocols.
//!
//! The pure metric functions at the top compare one predicted map against
//! one reference map. The protocol functions below them generate held-out
//! scenes, run the offset generator (or a baseline), and aggregate per-scene
//! rows into a [`MetricReport`]. Aggregates are always the plain mean of
//! the per-scene rows, computed in f64, so reports can be re-derived from
//! their own tables.
//!
//! Conventions fixed here and recorded in report headers:
//!
//! * angular errors are in radians (degrees only in the robustness summary),
//! * depth is compared in the shared [0, 1] unit space without alignment,
//! * mIoU averages the foreground and background IoU of a binary mask, with
//!   an empty class scoring 1 when empty in both maps and 0 when empty in
//!   exactly one,
//! * pixels whose decoded normal collapsed below the length floor are
//!   excluded from angular means and counted separately.

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::codec;
use crate::error::{LilError, Result};
use crate::generator::{Generator, IntrinsicKind, NoiseBundle, Offset};
use crate::procgen::{relight, render, scene_from_latent};
use crate::regressor::Regressor;
use crate::search::swap_halves;

fn expect_matching<T: PartialEq + std::fmt::Debug>(a: T, b: T) -> Result<()> {
    if a != b {
        return Err(LilError::Shape {
            expected: format!("{a:?}"),
            got: format!("{b:?}"),
        });
    }
    Ok(())
}

fn mean_abs3(a: ArrayView3<f32>, b: ArrayView3<f32>) -> f64 {
    let n = a.len() as f64;
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Copy)]
pub struct NormalScores {
    /// Mean absolute difference over the encoded 3-channel representation.
    pub l1: f64,
    /// Mean angle between decoded unit normals, radians, valid pixels only.
    pub angular: f64,
    /// Pixels excluded because either map decoded to a degenerate vector.
    pub invalid: usize,
}

pub fn eval_normals(pred: ArrayView3<f32>, gt: ArrayView3<f32>) -> Result<NormalScores> {
    expect_matching(pred.dim(), gt.dim())?;
    let l1 = mean_abs3(pred, gt);
    let (pn, p_bad) = codec::decode_normal(pred)?;
    let (gn, g_bad) = codec::decode_normal(gt)?;
    let (h, w) = p_bad.dim();
    let mut sum = 0.0f64;
    let mut valid = 0usize;
    let mut invalid = 0usize;
    for i in 0..h {
        for j in 0..w {
            if p_bad[(i, j)] || g_bad[(i, j)] {
                invalid += 1;
                continue;
            }
            let dot: f64 = (0..3)
                .map(|c| pn[(i, j, c)] as f64 * gn[(i, j, c)] as f64)
                .sum();
            sum += dot.clamp(-1.0, 1.0).acos();
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(LilError::Invalid(
            "no valid pixels for angular error".into(),
        ));
    }
    Ok(NormalScores {
        l1,
        angular: sum / valid as f64,
        invalid,
    })
}

/// Plain mean absolute difference between unit-space depth maps.
pub fn eval_depth(pred: ArrayView2<f32>, gt: ArrayView2<f32>) -> Result<f64> {
    expect_matching(pred.dim(), gt.dim())?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt.iter())
        .map(|(x, y)| (x - y).abs() as f64)
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy)]
pub struct SegScores {
    pub acc: f64,
    pub iou_fg: f64,
    pub iou_bg: f64,
    pub miou: f64,
}

pub fn eval_segmentation(pred: ArrayView2<f32>, gt: ArrayView2<f32>) -> Result<SegScores> {
    expect_matching(pred.dim(), gt.dim())?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (p, g) in pred.iter().zip(gt.iter()) {
        for v in [p, g] {
            if *v != 0.0 && *v != 1.0 {
                return Err(LilError::Invalid(format!("non-binary mask value {v}")));
            }
        }
        match (*p == 1.0, *g == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let n = (tp + fp + fn_ + tn) as f64;
    // IoU with the empty-class convention: a class absent from both maps is
    // a perfect (vacuous) match, absent from exactly one a total miss.
    let iou = |inter: u64, only_a: u64, only_b: u64| -> f64 {
        let a = inter + only_a;
        let b = inter + only_b;
        match (a == 0, b == 0) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => inter as f64 / (inter + only_a + only_b) as f64,
        }
    };
    let iou_fg = iou(tp, fp, fn_);
    let iou_bg = iou(tn, fn_, fp);
    Ok(SegScores {
        acc: (tp + tn) as f64 / n,
        iou_fg,
        iou_bg,
        miou: 0.5 * (iou_fg + iou_bg),
    })
}

/// Mean |I - A ⊙ S| plus the per-pixel residual map. The product is formed
/// in f32 exactly as the renderer forms it, so a matched oracle pair is
/// zero wherever the image did not saturate.
pub fn eval_albedo_shading(
    image: ArrayView3<f32>,
    albedo: ArrayView3<f32>,
    shading: ArrayView2<f32>,
) -> Result<(f64, Array3<f32>)> {
    expect_matching(image.dim(), albedo.dim())?;
    expect_matching((image.dim().0, image.dim().1), shading.dim())?;
    let (h, w, c) = image.dim();
    let mut residual = Array3::zeros((h, w, c));
    let mut sum = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let r = (image[(i, j, k)] - albedo[(i, j, k)] * shading[(i, j)]).abs();
                residual[(i, j, k)] = r;
                sum += r as f64;
            }
        }
    }
    Ok((sum / (h * w * c) as f64, residual))
}

// --- per-kind offset evaluation ---

/// Per-scene metric rows for one offset, plus their means. The invariant
/// `means[k] == mean(rows[..][k])` holds by construction; consumers can
/// re-derive every aggregate from the table.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub kind: IntrinsicKind,
    pub checkpoint: String,
    pub noise_seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub means: Vec<f64>,
}

impl MetricReport {
    pub fn mean(&self, column: &str) -> Option<f64> {
        self.columns
            .iter()
            .position(|c| c == column)
            .map(|i| self.means[i])
    }

    fn from_rows(
        kind: IntrinsicKind,
        checkpoint: String,
        noise_seed: u64,
        columns: Vec<&str>,
        rows: Vec<Vec<f64>>,
    ) -> MetricReport {
        let n = rows.len() as f64;
        let means = (0..columns.len())
            .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n)
            .collect();
        MetricReport {
            kind,
            checkpoint,
            noise_seed,
            columns: columns.into_iter().map(String::from).collect(),
            rows,
            means,
        }
    }
}

fn metric_columns(kind: IntrinsicKind) -> Vec<&'static str> {
    match kind {
        IntrinsicKind::Normal => vec!["l1", "angular", "invalid_px"],
        IntrinsicKind::Segmentation(_) => vec!["acc", "iou_fg", "iou_bg", "miou"],
        IntrinsicKind::Shading => vec!["l1_physical"],
        _ => vec!["l1"],
    }
}

/// Scores an offset against renderer ground truth on the given scenes.
///
/// For each latent the offset generator produces G(w+ + d), which is decoded
/// per the offset's kind and compared against the maps of the scene that
/// latent describes. Control kinds compare against the generator's own
/// unmodified (or half-swapped) output instead, since no renderer quantity
/// corresponds to them.
pub fn evaluate_offset(
    gen: &Generator,
    offset: &Offset,
    latents: &[Array1<f32>],
    noise_seed: u64,
) -> Result<MetricReport> {
    if latents.is_empty() {
        return Err(LilError::Invalid("no scenes to evaluate".into()));
    }
    let noise = NoiseBundle::from_seed(noise_seed, &gen.arch);
    let kind = offset.kind;
    let mut rows = Vec::with_capacity(latents.len());
    for z in latents {
        let base = gen.broadcast(gen.map_latent(z.view())?.view());
        let point = gen.apply_offset(&base, offset)?;
        let img = gen.synthesize(&point, &noise)?;
        let row = match kind {
            IntrinsicKind::Normal => {
                let bundle = render(&scene_from_latent(z.view())?);
                let gt = codec::encode_normal(bundle.normal.view())?;
                let s = eval_normals(img.view(), gt.view())?;
                vec![s.l1, s.angular, s.invalid as f64]
            }
            IntrinsicKind::Depth => {
                let bundle = render(&scene_from_latent(z.view())?);
                let pred = codec::decode_depth_unit(img.view())?;
                let gt = bundle.depth.mapv(codec::depth_to_unit);
                vec![eval_depth(pred.view(), gt.view())?]
            }
            IntrinsicKind::Albedo => {
                let bundle = render(&scene_from_latent(z.view())?);
                vec![mean_abs3(img.view(), bundle.albedo.view())]
            }
            IntrinsicKind::Shading => {
                let bundle = render(&scene_from_latent(z.view())?);
                let pred = codec::decode_shading(img.view())?;
                let n = pred.len() as f64;
                let l1 = pred
                    .iter()
                    .zip(bundle.shading.iter())
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum::<f64>()
                    / n;
                vec![l1]
            }
            IntrinsicKind::Segmentation(class) => {
                let bundle = render(&scene_from_latent(z.view())?);
                let pred = codec::decode_mask(img.view())?;
                let gt = bundle.masks.index_axis(Axis(2), class.index());
                let s = eval_segmentation(pred.view(), gt)?;
                vec![s.acc, s.iou_fg, s.iou_bg, s.miou]
            }
            IntrinsicKind::Relighting(j) => {
                let spec = scene_from_latent(z.view())?;
                let gt = render(&relight(&spec, j)?).image;
                vec![mean_abs3(img.view(), gt.view())]
            }
            IntrinsicKind::IdentityControl => {
                let plain = gen.synthesize(&base, &noise)?;
                vec![mean_abs3(img.view(), plain.view())]
            }
            IntrinsicKind::SwapControl => {
                let plain = gen.synthesize(&base, &noise)?;
                let target = swap_halves(&plain)?;
                vec![mean_abs3(img.view(), target.view())]
            }
        };
        rows.push(row);
    }
    Ok(MetricReport::from_rows(
        kind,
        gen.content_id(),
        noise_seed,
        metric_columns(kind),
        rows,
    ))
}

// --- relighting robustness ---

/// How normals under each lighting condition are produced.
pub enum RobustnessMethod<'a> {
    /// G(w+ + d_relight_j + d_normal), decoded.
    GeneratorOffset {
        normal: &'a Offset,
        relights: &'a [Offset],
    },
    /// The baseline regressor applied to renderer-relit images. Being
    /// image-conditioned, it sees every lighting change at full strength.
    BaselineRegressor {
        regressor: &'a Regressor,
        conditions: usize,
    },
    /// Renderer normals, identical across conditions by construction. Pins
    /// the top of the scale: inner products are exactly 1.
    Oracle { conditions: usize },
}

impl RobustnessMethod<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            RobustnessMethod::GeneratorOffset { .. } => "generator_offset",
            RobustnessMethod::BaselineRegressor { .. } => "baseline_regressor",
            RobustnessMethod::Oracle { .. } => "oracle",
        }
    }

    fn conditions(&self) -> usize {
        match self {
            RobustnessMethod::GeneratorOffset { relights, .. } => relights.len(),
            RobustnessMethod::BaselineRegressor { conditions, .. } => *conditions,
            RobustnessMethod::Oracle { conditions } => *conditions,
        }
    }
}

/// Five-number boxplot summary with 1.5 IQR whiskers. Quartiles use linear
/// interpolation on the sorted sample.
#[derive(Debug, Clone)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// Whisker ends: the extreme data points inside the 1.5 IQR fences.
    pub lo: f64,
    pub hi: f64,
    pub outliers: Vec<f64>,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(LilError::Invalid("no values for box statistics".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let lo_fence = q1 - 1.5 * iqr;
    let hi_fence = q3 + 1.5 * iqr;
    let lo = *sorted.iter().find(|v| **v >= lo_fence).unwrap();
    let hi = *sorted.iter().rev().find(|v| **v <= hi_fence).unwrap();
    let outliers = sorted
        .iter()
        .copied()
        .filter(|v| *v < lo_fence || *v > hi_fence)
        .collect();
    Ok(BoxStats {
        median,
        q1,
        q3,
        lo,
        hi,
        outliers,
    })
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub method: String,
    pub conditions: usize,
    pub scene_count: usize,
    /// Mean inner product per scene (row) and condition (column).
    pub inner: Vec<Vec<f64>>,
    pub mean_inner: f64,
    pub mean_angular_deg: f64,
    pub stats: BoxStats,
}

/// Cosine between a unit vector and an unnormalized one, as
/// sign(dot) * sqrt(dot^2 / (|a|^2 |b|^2)) in f64. Written this way so that
/// bitwise-identical inputs summed over a power-of-two condition count give
/// exactly 1.0: every intermediate then differs from its counterpart by a
/// power-of-two factor, which floating-point rounding commutes with.
fn sq_ratio_cos(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let daa = a[0] * a[0] + a[1] * a[1] + a[2] * a[2];
    let dbb = b[0] * b[0] + b[1] * b[1] + b[2] * b[2];
    if daa == 0.0 || dbb == 0.0 {
        return 0.0;
    }
    let r = (dot * dot / (daa * dbb)).min(1.0);
    dot.signum() * r.sqrt()
}

/// Measures how stable predicted normals are under the K relighting
/// conditions: per scene, the per-pixel mean direction over all conditions
/// is the reference, and each condition scores its mean inner product
/// against it. A method that is blind to lighting scores 1; a method whose
/// normals swing with the light scores lower.
pub fn eval_relighting_robustness(
    gen: &Generator,
    method: RobustnessMethod,
    latents: &[Array1<f32>],
    noise_seed: u64,
) -> Result<RobustnessReport> {
    let k = method.conditions();
    if k == 0 {
        return Err(LilError::Invalid("no relighting conditions".into()));
    }
    if latents.is_empty() {
        return Err(LilError::Invalid("no scenes to evaluate".into()));
    }
    let noise = NoiseBundle::from_seed(noise_seed, &gen.arch);

    let mut inner = Vec::with_capacity(latents.len());
    for z in latents {
        // One normal map and validity mask per condition.
        let mut per_cond: Vec<(Array3<f32>, Array2<bool>)> = Vec::with_capacity(k);
        match &method {
            RobustnessMethod::GeneratorOffset { normal, relights } => {
                let base = gen.broadcast(gen.map_latent(z.view())?.view());
                for rel in *relights {
                    let point = gen.apply_offset(&gen.apply_offset(&base, rel)?, normal)?;
                    let img = gen.synthesize(&point, &noise)?;
                    per_cond.push(codec::decode_normal(img.view())?);
                }
            }
            RobustnessMethod::BaselineRegressor { regressor, .. } => {
                let spec = scene_from_latent(z.view())?;
                for j in 0..k {
                    let img = render(&relight(&spec, j)?).image;
                    let pred = regressor.forward(img.view())?;
                    per_cond.push(codec::decode_normal(pred.view())?);
                }
            }
            RobustnessMethod::Oracle { .. } => {
                let bundle = render(&scene_from_latent(z.view())?);
                let all_valid = Array2::from_elem(
                    (bundle.normal.dim().0, bundle.normal.dim().1),
                    false,
                );
                for _ in 0..k {
                    per_cond.push((bundle.normal.clone(), all_valid.clone()));
                }
            }
        }

        let (h, w, _) = per_cond[0].0.dim();
        let mut mean_dir = Array3::<f64>::zeros((h, w, 3));
        for (n, _) in &per_cond {
            for i in 0..h {
                for j in 0..w {
                    for c in 0..3 {
                        mean_dir[(i, j, c)] += n[(i, j, c)] as f64;
                    }
                }
            }
        }

        let mut row = Vec::with_capacity(k);
        for (n, bad) in &per_cond {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for i in 0..h {
                for j in 0..w {
                    if bad[(i, j)] {
                        continue;
                    }
                    let a = [
                        n[(i, j, 0)] as f64,
                        n[(i, j, 1)] as f64,
                        n[(i, j, 2)] as f64,
                    ];
                    let b = [mean_dir[(i, j, 0)], mean_dir[(i, j, 1)], mean_dir[(i, j, 2)]];
                    sum += sq_ratio_cos(a, b);
                    count += 1;
                }
            }
            if count == 0 {
                return Err(LilError::Invalid(
                    "no valid pixels in a robustness condition".into(),
                ));
            }
            row.push(sum / count as f64);
        }
        inner.push(row);
    }

    let flat: Vec<f64> = inner.iter().flatten().copied().collect();
    let mean_inner = flat.iter().sum::<f64>() / flat.len() as f64;
    let mean_angular_deg = flat
        .iter()
        .map(|v| v.clamp(-1.0, 1.0).acos().to_degrees())
        .sum::<f64>()
        / flat.len() as f64;
    let stats = box_stats(&flat)?;
    Ok(RobustnessReport {
        method: method.name().to_string(),
        conditions: k,
        scene_count: latents.len(),
        inner,
        mean_inner,
        mean_angular_deg,
        stats,
    })
}
