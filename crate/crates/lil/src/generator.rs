//! The style-based generator: a mapping network z -> w and a synthesis
//! network that turns a stack of per-layer style vectors (the "w+" matrix)
//! plus fixed spatial noise into a 64x64 RGB image.
//!
//! Synthesis starts from a learned 4x4 constant and runs five
//! modulated-convolution blocks (4x4 up to 64x64). Each block scales its
//! input channels by an affine function of that layer's style row, convolves,
//! renormalizes per output channel (demodulation), then adds learned-scale
//! noise and applies a leaky ReLU. A style-modulated 1x1 layer maps the last
//! features to RGB and a sigmoid squashes the output into [0, 1]; the
//! squashing choice is recorded in checkpoint metadata.
//!
//! Editing happens in w+ space: an [`Offset`] is an (L x Dw) matrix added to
//! the style stack. Backward passes provide gradients with respect to both
//! the parameters (for training) and the style rows (for offset search).

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

use crate::error::{LilError, Result};
use crate::io;
use crate::nn::{
    self, im2col3, lrelu_backward_from_output, lrelu_inplace, matmul, matmul_acc_wgrad,
    matmul_colgrad, sigmoid_backward_from_output, sigmoid_inplace, upsample2, upsample2_backward,
    Dense,
};
use crate::procgen::{ClassLabel, RES};
use crate::rng;

/// Output squashing recorded in every checkpoint.
pub const SQUASHING: &str = "sigmoid";

const DEMOD_EPS: f32 = 1e-8;
const CKPT_MAGIC: &[u8; 4] = b"LILC";

// --- intrinsic kinds ---

/// What a latent offset is supposed to produce. Controls are negative probes:
/// `IdentityControl` targets the unchanged image, `SwapControl` targets an
/// impossible content permutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntrinsicKind {
    Normal,
    Depth,
    Albedo,
    Shading,
    Segmentation(ClassLabel),
    /// Index into the fixed relighting table.
    Relighting(usize),
    IdentityControl,
    SwapControl,
}

impl IntrinsicKind {
    /// Stable string form used in file names, manifests and on the CLI.
    pub fn token(&self) -> String {
        match self {
            IntrinsicKind::Normal => "normal".into(),
            IntrinsicKind::Depth => "depth".into(),
            IntrinsicKind::Albedo => "albedo".into(),
            IntrinsicKind::Shading => "shading".into(),
            IntrinsicKind::Segmentation(c) => format!("segmentation:{}", c.name()),
            IntrinsicKind::Relighting(j) => format!("relighting:{j}"),
            IntrinsicKind::IdentityControl => "identity".into(),
            IntrinsicKind::SwapControl => "swap".into(),
        }
    }

    pub fn parse(s: &str) -> Result<IntrinsicKind> {
        let kind = match s {
            "normal" => IntrinsicKind::Normal,
            "depth" => IntrinsicKind::Depth,
            "albedo" => IntrinsicKind::Albedo,
            "shading" => IntrinsicKind::Shading,
            "identity" => IntrinsicKind::IdentityControl,
            "swap" => IntrinsicKind::SwapControl,
            other => {
                if let Some(class) = other.strip_prefix("segmentation:") {
                    IntrinsicKind::Segmentation(ClassLabel::parse(class)?)
                } else if let Some(j) = other.strip_prefix("relighting:") {
                    let j: usize = j
                        .parse()
                        .map_err(|_| LilError::Invalid(format!("bad light index in '{other}'")))?;
                    IntrinsicKind::Relighting(j)
                } else {
                    return Err(LilError::Invalid(format!("unknown kind '{other}'")));
                }
            }
        };
        Ok(kind)
    }

    pub fn is_control(&self) -> bool {
        matches!(
            self,
            IntrinsicKind::IdentityControl | IntrinsicKind::SwapControl
        )
    }
}

impl fmt::Display for IntrinsicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.token())
    }
}

impl Serialize for IntrinsicKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.token())
    }
}

impl<'de> Deserialize<'de> for IntrinsicKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        IntrinsicKind::parse(&s).map_err(serde::de::Error::custom)
    }
}

// --- architecture ---

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenArch {
    pub dz: usize,
    pub dw: usize,
    /// Feature channels per synthesis block, lowest resolution first.
    pub channels: Vec<usize>,
}

impl Default for GenArch {
    fn default() -> Self {
        GenArch {
            dz: 64,
            dw: 128,
            channels: vec![64, 64, 48, 32, 20],
        }
    }
}

impl GenArch {
    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.channels.len()).map(|i| 4 << i).collect()
    }

    /// Style rows: one per synthesis block plus one for the to-RGB layer.
    pub fn n_layers(&self) -> usize {
        self.channels.len() + 1
    }

    fn validate(&self) -> Result<()> {
        if self.channels.len() != 5 || *self.resolutions().last().unwrap() != RES {
            return Err(LilError::Config(format!(
                "synthesis must have 5 blocks ending at {RES}x{RES}, got channels {:?}",
                self.channels
            )));
        }
        Ok(())
    }
}

/// A w+ point: one style row per synthesis layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StylePoint {
    pub rows: Array2<f32>,
}

impl StylePoint {
    pub fn mean_row_norm(&self) -> f32 {
        let l = self.rows.nrows() as f32;
        self.rows
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .sum::<f32>()
            / l
    }
}

/// A learned latent edit: added to a [`StylePoint`] it steers the generator
/// toward one intrinsic. Valid only for the checkpoint it was searched
/// against.
#[derive(Debug, Clone)]
pub struct Offset {
    pub kind: IntrinsicKind,
    pub delta: Array2<f32>,
    pub checkpoint_id: String,
    pub final_loss: f32,
    pub train_scene_count: usize,
}

impl Offset {
    pub fn norm(&self) -> f32 {
        self.delta.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

/// Per-layer spatial noise fields, one per synthesis block. Frozen during
/// offset search and evaluation so output differences are attributable to the
/// offsets alone.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub seed: u64,
    pub fields: Vec<Array2<f32>>,
}

impl NoiseBundle {
    pub fn from_seed(seed: u64, arch: &GenArch) -> NoiseBundle {
        let mut rng = rng::rng_from_seed(seed);
        let fields = arch
            .resolutions()
            .iter()
            .map(|&r| {
                let flat = rng::standard_normal(&mut rng, r * r);
                flat.into_shape_with_order((r, r)).unwrap()
            })
            .collect();
        NoiseBundle { seed, fields }
    }
}

// --- generator ---

#[derive(Debug, Clone)]
struct SynthBlock {
    affine: Dense,
    /// 3x3 kernel as (C_out, C_in*9).
    conv: Array2<f32>,
    bias: Array1<f32>,
    noise_scale: f32,
    upsample: bool,
}

#[derive(Debug, Clone)]
struct ToRgb {
    affine: Dense,
    /// 1x1 kernel as (3, C_last).
    conv: Array2<f32>,
    bias: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub arch: GenArch,
    mapping: Vec<Dense>,
    const_input: Array3<f32>,
    blocks: Vec<SynthBlock>,
    to_rgb: ToRgb,
}

impl Generator {
    pub fn new(arch: GenArch, seed: u64) -> Result<Generator> {
        arch.validate()?;
        let mut rng = rng::rng_from_seed(seed);
        let mut mapping = Vec::new();
        let mut fan_in = arch.dz;
        for _ in 0..4 {
            mapping.push(Dense::new(&mut rng, fan_in, arch.dw));
            fan_in = arch.dw;
        }
        let c0 = arch.channels[0];
        let const_input = {
            let flat = rng::standard_normal(&mut rng, c0 * 16);
            flat.into_shape_with_order((c0, 4, 4)).unwrap()
        };
        let mut blocks = Vec::new();
        let mut c_in = c0;
        for (i, &c_out) in arch.channels.iter().enumerate() {
            let mut affine = Dense::new(&mut rng, arch.dw, c_in);
            // Neutral modulation at init.
            affine.b.fill(1.0);
            blocks.push(SynthBlock {
                affine,
                conv: nn::he_normal(&mut rng, c_in * 9, (c_out, c_in * 9)),
                bias: Array1::zeros(c_out),
                noise_scale: 0.0,
                upsample: i > 0,
            });
            c_in = c_out;
        }
        let mut rgb_affine = Dense::new(&mut rng, arch.dw, c_in);
        rgb_affine.b.fill(1.0);
        let to_rgb = ToRgb {
            affine: rgb_affine,
            conv: nn::he_normal(&mut rng, c_in, (3, c_in)),
            bias: Array1::zeros(3),
        };
        Ok(Generator {
            arch,
            mapping,
            const_input,
            blocks,
            to_rgb,
        })
    }

    /// A gradient container: same tensors, all zero.
    pub fn zeros_like(&self) -> Generator {
        let mut g = self.clone();
        for t in g.flat_mut() {
            t.fill(0.0);
        }
        g
    }

    pub fn param_count(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }

    /// Content hash over architecture and all parameter bytes. Used as the
    /// checkpoint identity that offsets are pinned to.
    pub fn content_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.arch).unwrap());
        for t in self.flat() {
            for v in t {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Parameter tensors as flat slices, in a fixed documented order:
    /// mapping (w, b per layer), constant input, per block (affine w, affine
    /// b, conv, bias, noise scale), then to-RGB (affine w, affine b, conv,
    /// bias).
    pub fn flat(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for d in &self.mapping {
            out.push(d.w.as_slice().unwrap());
            out.push(d.b.as_slice().unwrap());
        }
        out.push(self.const_input.as_slice().unwrap());
        for b in &self.blocks {
            out.push(b.affine.w.as_slice().unwrap());
            out.push(b.affine.b.as_slice().unwrap());
            out.push(b.conv.as_slice().unwrap());
            out.push(b.bias.as_slice().unwrap());
            out.push(std::slice::from_ref(&b.noise_scale));
        }
        out.push(self.to_rgb.affine.w.as_slice().unwrap());
        out.push(self.to_rgb.affine.b.as_slice().unwrap());
        out.push(self.to_rgb.conv.as_slice().unwrap());
        out.push(self.to_rgb.bias.as_slice().unwrap());
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for d in &mut self.mapping {
            out.push(d.w.as_slice_mut().unwrap());
            out.push(d.b.as_slice_mut().unwrap());
        }
        out.push(self.const_input.as_slice_mut().unwrap());
        for b in &mut self.blocks {
            out.push(b.affine.w.as_slice_mut().unwrap());
            out.push(b.affine.b.as_slice_mut().unwrap());
            out.push(b.conv.as_slice_mut().unwrap());
            out.push(b.bias.as_slice_mut().unwrap());
            out.push(std::slice::from_mut(&mut b.noise_scale));
        }
        out.push(self.to_rgb.affine.w.as_slice_mut().unwrap());
        out.push(self.to_rgb.affine.b.as_slice_mut().unwrap());
        out.push(self.to_rgb.conv.as_slice_mut().unwrap());
        out.push(self.to_rgb.bias.as_slice_mut().unwrap());
        out
    }

    // --- mapping ---

    pub fn map_latent(&self, z: ArrayView1<f32>) -> Result<Array1<f32>> {
        Ok(self.map_latent_cached(z)?.0)
    }

    pub fn map_latent_cached(&self, z: ArrayView1<f32>) -> Result<(Array1<f32>, MapCache)> {
        if z.len() != self.arch.dz {
            return Err(LilError::Shape {
                expected: format!("latent of length {}", self.arch.dz),
                got: format!("length {}", z.len()),
            });
        }
        // Normalize to unit second moment so the mapping sees a consistent
        // input scale.
        let ms = z.dot(&z) / z.len() as f32;
        let zn = z.mapv(|v| v / (ms + 1e-8).sqrt());
        let mut acts = Vec::with_capacity(5);
        acts.push(zn);
        for layer in &self.mapping {
            let mut h = layer.forward(acts.last().unwrap().view());
            lrelu_inplace(h.as_slice_mut().unwrap());
            acts.push(h);
        }
        let w = acts.last().unwrap().clone();
        Ok((w, MapCache { acts }))
    }

    /// Backward through the mapping network, accumulating parameter
    /// gradients. The gradient with respect to z is not needed anywhere and
    /// is not computed.
    pub fn backward_mapping(&self, cache: &MapCache, dw: ArrayView1<f32>, grad: &mut Generator) {
        let mut d = dw.to_owned();
        for (i, layer) in self.mapping.iter().enumerate().rev() {
            lrelu_backward_from_output(
                d.as_slice_mut().unwrap(),
                cache.acts[i + 1].as_slice().unwrap(),
            );
            d = layer.backward(cache.acts[i].view(), d.view(), &mut grad.mapping[i]);
        }
    }

    /// Copies one w vector into every synthesis layer's style row.
    pub fn broadcast(&self, w: ArrayView1<f32>) -> StylePoint {
        let l = self.arch.n_layers();
        let mut rows = Array2::zeros((l, self.arch.dw));
        for mut row in rows.rows_mut() {
            row.assign(&w);
        }
        StylePoint { rows }
    }

    /// w+ + d. Fails if the offset was searched against another checkpoint or
    /// has the wrong shape.
    pub fn apply_offset(&self, point: &StylePoint, offset: &Offset) -> Result<StylePoint> {
        let own = self.content_id();
        if offset.checkpoint_id != own {
            return Err(LilError::CheckpointMismatch {
                offset_ckpt: offset.checkpoint_id.clone(),
                generator_ckpt: own,
            });
        }
        if offset.delta.dim() != point.rows.dim() {
            return Err(LilError::Shape {
                expected: format!("{:?}", point.rows.dim()),
                got: format!("{:?}", offset.delta.dim()),
            });
        }
        Ok(StylePoint {
            rows: &point.rows + &offset.delta,
        })
    }

    // --- synthesis ---

    pub fn synthesize(&self, point: &StylePoint, noise: &NoiseBundle) -> Result<Array3<f32>> {
        Ok(self.synthesize_cached(point, noise)?.0)
    }

    /// Forward pass that also returns the activation cache needed by
    /// [`Generator::backward_synthesis`]. The image is (H, W, 3) in [0, 1].
    pub fn synthesize_cached(
        &self,
        point: &StylePoint,
        noise: &NoiseBundle,
    ) -> Result<(Array3<f32>, SynthCache)> {
        let l = self.arch.n_layers();
        if point.rows.dim() != (l, self.arch.dw) {
            return Err(LilError::Shape {
                expected: format!("({l}, {})", self.arch.dw),
                got: format!("{:?}", point.rows.dim()),
            });
        }
        if noise.fields.len() != self.blocks.len() {
            return Err(LilError::Shape {
                expected: format!("{} noise fields", self.blocks.len()),
                got: format!("{}", noise.fields.len()),
            });
        }

        let mut x = self.const_input.clone();
        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let x_up = if block.upsample {
                upsample2(x.view())
            } else {
                x
            };
            let (c_in, h, w) = x_up.dim();
            let s = block.affine.forward(point.rows.row(i));
            let mut x_mod = x_up.clone();
            for (c, mut plane) in x_mod.axis_iter_mut(Axis(0)).enumerate() {
                plane.mapv_inplace(|v| v * s[c]);
            }
            let cols = im2col3(x_mod.view());
            let v = matmul(block.conv.view(), cols.view());
            // Demodulation: rescale each output channel so modulation changes
            // feature mixing, not activation magnitude.
            let mut dcoef = Array1::zeros(block.conv.nrows());
            for (o, row) in block.conv.rows().into_iter().enumerate() {
                let mut acc = DEMOD_EPS;
                for c in 0..c_in {
                    let sq: f32 = (0..9).map(|k| row[c * 9 + k] * row[c * 9 + k]).sum();
                    acc += sq * s[c] * s[c];
                }
                dcoef[o] = 1.0 / acc.sqrt();
            }
            let field = &noise.fields[i];
            let mut y = v.clone();
            for (o, mut row) in y.rows_mut().into_iter().enumerate() {
                let d = dcoef[o];
                let b = block.bias[o];
                for (p, val) in row.iter_mut().enumerate() {
                    let (py, px) = (p / w, p % w);
                    *val = *val * d + b + block.noise_scale * field[(py, px)];
                }
            }
            lrelu_inplace(y.as_slice_mut().unwrap());
            let y = y.into_shape_with_order((block.conv.nrows(), h, w)).unwrap();
            x = y.clone();
            block_caches.push(BlockCache {
                x_up,
                s,
                cols,
                v,
                dcoef,
                y,
            });
        }

        // to-RGB: modulated 1x1, no demodulation, sigmoid squash.
        let (c_last, h, w) = x.dim();
        let s = self.to_rgb.affine.forward(point.rows.row(l - 1));
        let mut x_mod = x.clone();
        for (c, mut plane) in x_mod.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| v * s[c]);
        }
        let x_mod_flat = x_mod.into_shape_with_order((c_last, h * w)).unwrap();
        let mut out = matmul(self.to_rgb.conv.view(), x_mod_flat.view());
        for (o, mut row) in out.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v + self.to_rgb.bias[o]);
        }
        sigmoid_inplace(out.as_slice_mut().unwrap());

        let mut image = Array3::zeros((h, w, 3));
        for o in 0..3 {
            for p in 0..h * w {
                image[(p / w, p % w, o)] = out[(o, p)];
            }
        }
        let cache = SynthCache {
            blocks: block_caches,
            rgb_s: s,
            rgb_x_mod: x_mod_flat,
            rgb_out: out,
            styles: point.rows.clone(),
            noise_seed: noise.seed,
        };
        Ok((image, cache))
    }

    /// Backward pass from an image gradient to the style rows. When `grad` is
    /// given, parameter gradients are accumulated into it as well (training);
    /// without it the heavy weight-gradient GEMMs are skipped (offset
    /// search).
    pub fn backward_synthesis(
        &self,
        cache: &SynthCache,
        d_image: &Array3<f32>,
        noise: &NoiseBundle,
        mut grad: Option<&mut Generator>,
    ) -> Array2<f32> {
        let l = self.arch.n_layers();
        let mut d_styles = Array2::zeros((l, self.arch.dw));

        // Image layout back to (3, H*W), then through the sigmoid.
        let (h, w, _) = d_image.dim();
        let mut dy = Array2::zeros((3, h * w));
        for o in 0..3 {
            for p in 0..h * w {
                dy[(o, p)] = d_image[(p / w, p % w, o)];
            }
        }
        sigmoid_backward_from_output(
            dy.as_slice_mut().unwrap(),
            cache.rgb_out.as_slice().unwrap(),
        );

        // to-RGB.
        let c_last = self.to_rgb.conv.ncols();
        let last_y = &cache.blocks.last().unwrap().y;
        let last_flat = last_y.view().into_shape_with_order((c_last, h * w)).unwrap();
        if let Some(g) = grad.as_deref_mut() {
            matmul_acc_wgrad(dy.view(), cache.rgb_x_mod.view(), &mut g.to_rgb.conv);
            for (o, row) in dy.rows().into_iter().enumerate() {
                g.to_rgb.bias[o] += row.sum();
            }
        }
        let dx_mod = matmul_colgrad(self.to_rgb.conv.view(), dy.view());
        let mut ds = Array1::zeros(c_last);
        let mut dx = dx_mod;
        for c in 0..c_last {
            ds[c] = dx.row(c).dot(&last_flat.row(c));
            let s = cache.rgb_s[c];
            dx.row_mut(c).mapv_inplace(|v| v * s);
        }
        let d_row = match grad.as_deref_mut() {
            Some(g) => self
                .to_rgb
                .affine
                .backward(cache.styles.row(l - 1), ds.view(), &mut g.to_rgb.affine),
            None => self.to_rgb.affine.backward_input(ds.view()),
        };
        d_styles.row_mut(l - 1).assign(&d_row);

        // Blocks, top resolution down.
        let mut dy_spatial = {
            let (_, bh, bw) = last_y.dim();
            dx.into_shape_with_order((c_last, bh, bw)).unwrap()
        };
        for (i, block) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[i];
            let y = &bc.y;
            let (c_out, bh, bw) = y.dim();
            let c_in = bc.x_up.dim().0;

            let mut dy_flat = dy_spatial
                .into_shape_with_order((c_out, bh * bw))
                .unwrap();
            lrelu_backward_from_output(dy_flat.as_slice_mut().unwrap(), y.as_slice().unwrap());

            if let Some(g) = grad.as_deref_mut() {
                let field = &noise.fields[i];
                let mut dn = 0.0;
                for row in dy_flat.rows() {
                    for (p, &v) in row.iter().enumerate() {
                        dn += v * field[(p / bw, p % bw)];
                    }
                }
                g.blocks[i].noise_scale += dn;
                for (o, row) in dy_flat.rows().into_iter().enumerate() {
                    g.blocks[i].bias[o] += row.sum();
                }
            }

            // Demodulation backward. dcoef depends on (conv, s) only.
            let mut dv = dy_flat;
            let mut dd = Array1::zeros(c_out);
            for o in 0..c_out {
                dd[o] = dv.row(o).dot(&bc.v.row(o));
                let d = bc.dcoef[o];
                dv.row_mut(o).mapv_inplace(|x| x * d);
            }
            let mut ds_demod = Array1::zeros(c_in);
            {
                // With dcoef = r^(-1/2), d(dcoef)/dr = -dcoef^3 / 2.
                let dr: Array1<f32> =
                    Array1::from_iter((0..c_out).map(|o| {
                        -0.5 * dd[o] * bc.dcoef[o] * bc.dcoef[o] * bc.dcoef[o]
                    }));
                for c in 0..c_in {
                    let mut acc = 0.0;
                    for o in 0..c_out {
                        let wsq: f32 =
                            (0..9).map(|k| block.conv[(o, c * 9 + k)].powi(2)).sum();
                        acc += dr[o] * wsq;
                    }
                    ds_demod[c] = 2.0 * bc.s[c] * acc;
                }
                if let Some(g) = grad.as_deref_mut() {
                    for o in 0..c_out {
                        let f = 2.0 * dr[o];
                        for c in 0..c_in {
                            let ss = bc.s[c] * bc.s[c];
                            for k in 0..9 {
                                g.blocks[i].conv[(o, c * 9 + k)] +=
                                    f * block.conv[(o, c * 9 + k)] * ss;
                            }
                        }
                    }
                }
            }

            if let Some(g) = grad.as_deref_mut() {
                matmul_acc_wgrad(dv.view(), bc.cols.view(), &mut g.blocks[i].conv);
            }
            let dcols = matmul_colgrad(block.conv.view(), dv.view());
            let mut dx_mod = nn::col2im3(dcols.view(), c_in, bh, bw);

            let mut ds = ds_demod;
            for c in 0..c_in {
                let mut plane = dx_mod.index_axis_mut(Axis(0), c);
                let x_plane = bc.x_up.index_axis(Axis(0), c);
                let mut acc = 0.0;
                for (d, &xv) in plane.iter().zip(x_plane.iter()) {
                    acc += *d * xv;
                }
                ds[c] += acc;
                let s = bc.s[c];
                plane.mapv_inplace(|v| v * s);
            }
            let d_row = match grad.as_deref_mut() {
                Some(g) => block.affine.backward(
                    cache.styles.row(i),
                    ds.view(),
                    &mut g.blocks[i].affine,
                ),
                None => block.affine.backward_input(ds.view()),
            };
            d_styles.row_mut(i).assign(&d_row);

            dy_spatial = if block.upsample {
                upsample2_backward(dx_mod.view())
            } else {
                if let Some(g) = grad.as_deref_mut() {
                    g.const_input += &dx_mod;
                }
                dx_mod
            };
        }

        d_styles
    }

    // --- checkpoints ---

    /// Writes the single-file checkpoint: magic, JSON manifest (architecture,
    /// squashing, metadata, content hash), then raw little-endian f32
    /// tensors in [`Generator::flat`] order.
    pub fn save_checkpoint(&self, path: &Path, meta: &TrainMeta) -> Result<CheckpointMeta> {
        let manifest = CheckpointMeta {
            version: 1,
            dz: self.arch.dz,
            dw: self.arch.dw,
            n_layers: self.arch.n_layers(),
            channels: self.arch.channels.clone(),
            resolutions: self.arch.resolutions(),
            squashing: SQUASHING.into(),
            param_count: self.param_count(),
            content_hash: self.content_id(),
            train: meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        for t in self.flat() {
            for v in t {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        io::atomic_write(path, &bytes)?;
        Ok(manifest)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Generator, CheckpointMeta)> {
        let bytes = std::fs::read(path).map_err(|e| LilError::io(path, e))?;
        if bytes.len() < 12 || &bytes[0..4] != CKPT_MAGIC {
            return Err(LilError::format(path, "missing checkpoint magic"));
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + json_len {
            return Err(LilError::format(path, "truncated manifest"));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&bytes[12..12 + json_len])
            .map_err(|e| LilError::format(path, e.to_string()))?;
        let arch = GenArch {
            dz: meta.dz,
            dw: meta.dw,
            channels: meta.channels.clone(),
        };
        if meta.squashing != SQUASHING {
            return Err(LilError::format(
                path,
                format!("unsupported squashing '{}'", meta.squashing),
            ));
        }
        let mut gen = Generator::new(arch, 0)?;
        let mut cursor = 12 + json_len;
        for t in gen.flat_mut() {
            let need = t.len() * 4;
            if bytes.len() < cursor + need {
                return Err(LilError::format(path, "truncated tensor data"));
            }
            for (i, v) in t.iter_mut().enumerate() {
                let off = cursor + i * 4;
                *v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            }
            cursor += need;
        }
        if cursor != bytes.len() {
            return Err(LilError::format(path, "trailing bytes after tensors"));
        }
        let got = gen.content_id();
        if got != meta.content_hash {
            return Err(LilError::format(
                path,
                format!(
                    "content hash mismatch: manifest {} vs tensors {got}",
                    meta.content_hash
                ),
            ));
        }
        Ok((gen, meta))
    }
}

/// Training provenance stored inside the checkpoint manifest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub steps: usize,
    pub final_heldout_l1: Option<f32>,
    pub converged: Option<bool>,
    pub dataset_manifest_sha: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub dz: usize,
    pub dw: usize,
    pub n_layers: usize,
    pub channels: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub squashing: String,
    pub param_count: usize,
    pub content_hash: String,
    pub train: TrainMeta,
}

/// Activation cache of one mapping forward pass.
pub struct MapCache {
    /// Normalized input followed by each layer's output.
    acts: Vec<Array1<f32>>,
}

struct BlockCache {
    x_up: Array3<f32>,
    s: Array1<f32>,
    cols: Array2<f32>,
    v: Array2<f32>,
    dcoef: Array1<f32>,
    y: Array3<f32>,
}

/// Activation cache of one synthesis forward pass.
pub struct SynthCache {
    blocks: Vec<BlockCache>,
    rgb_s: Array1<f32>,
    rgb_x_mod: Array2<f32>,
    rgb_out: Array2<f32>,
    styles: Array2<f32>,
    noise_seed: u64,
}

impl SynthCache {
    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }
}
