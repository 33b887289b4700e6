//! A small convolutional encoder-decoder trained with full supervision on
//! rendered ground truth. It predicts encoded normal maps directly from RGB
//! and serves as the comparison point for the latent-offset approach: same
//! data budget, same resolution, but roughly a quarter of the generator's
//! parameters and none of its structure.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{LilError, Result};
use crate::io;
use crate::nn::{
    self, avgpool2, avgpool2_backward, col2im3, im2col3, lrelu_backward_from_output,
    lrelu_inplace, matmul, matmul_acc_wgrad, matmul_colgrad, sigmoid_backward_from_output,
    sigmoid_inplace, upsample2, upsample2_backward,
};
use crate::rng;

const CKPT_MAGIC: &[u8; 4] = b"LILR";

/// Channel plan: 3 -> 24 -> 40 (half res) -> 52 (quarter res) -> 40 -> 24 -> 3.
const CHANNELS: [usize; 7] = [3, 24, 40, 52, 40, 24, 3];

/// What happens between conv i and conv i+1.
#[derive(Clone, Copy, PartialEq)]
enum Resample {
    None,
    Down,
    Up,
}

const RESAMPLE: [Resample; 6] = [
    Resample::Down,
    Resample::Down,
    Resample::Up,
    Resample::Up,
    Resample::None,
    Resample::None,
];

#[derive(Debug, Clone)]
struct Conv {
    w: Array2<f32>,
    b: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct Regressor {
    convs: Vec<Conv>,
}

pub struct RegCache {
    /// Post-activation output of each conv, in (C, H, W).
    acts: Vec<Array3<f32>>,
    /// im2col matrices of each conv input.
    cols: Vec<Array2<f32>>,
    input: Array3<f32>,
}

impl Regressor {
    pub fn new(seed: u64) -> Regressor {
        let mut r = rng::rng_from_seed(seed);
        let convs = (0..6)
            .map(|i| {
                let (c_in, c_out) = (CHANNELS[i], CHANNELS[i + 1]);
                Conv {
                    w: nn::he_normal(&mut r, c_in * 9, (c_out, c_in * 9)),
                    b: Array1::zeros(c_out),
                }
            })
            .collect();
        Regressor { convs }
    }

    pub fn param_count(&self) -> usize {
        self.flat().iter().map(|t| t.len()).sum()
    }

    pub fn flat(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.w.as_slice().unwrap());
            out.push(c.b.as_slice().unwrap());
        }
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(c.w.as_slice_mut().unwrap());
            out.push(c.b.as_slice_mut().unwrap());
        }
        out
    }

    pub fn zeros_like(&self) -> Regressor {
        let mut g = self.clone();
        for t in g.flat_mut() {
            t.fill(0.0);
        }
        g
    }

    pub fn content_id(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
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

    /// RGB (H, W, 3) in, encoded-normal image (H, W, 3) out.
    pub fn forward(&self, image: ArrayView3<f32>) -> Result<Array3<f32>> {
        Ok(self.forward_cached(image)?.0)
    }

    pub fn forward_cached(&self, image: ArrayView3<f32>) -> Result<(Array3<f32>, RegCache)> {
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(LilError::Shape {
                expected: "(H, W, 3)".into(),
                got: format!("{:?}", image.dim()),
            });
        }
        let mut x = Array3::zeros((3, h, w));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    x[(ch, i, j)] = image[(i, j, ch)];
                }
            }
        }
        let input = x.clone();
        let mut acts = Vec::with_capacity(6);
        let mut cols_all = Vec::with_capacity(6);
        for (i, conv) in self.convs.iter().enumerate() {
            let (_, ch_in, cw_in) = x.dim();
            let cols = im2col3(x.view());
            let mut y = matmul(conv.w.view(), cols.view());
            for (o, mut row) in y.rows_mut().into_iter().enumerate() {
                let b = conv.b[o];
                row.mapv_inplace(|v| v + b);
            }
            if i + 1 == self.convs.len() {
                sigmoid_inplace(y.as_slice_mut().unwrap());
            } else {
                lrelu_inplace(y.as_slice_mut().unwrap());
            }
            let y = y
                .into_shape_with_order((conv.w.nrows(), ch_in, cw_in))
                .unwrap();
            x = match RESAMPLE[i] {
                Resample::Down => avgpool2(y.view()),
                Resample::Up => upsample2(y.view()),
                Resample::None => y.clone(),
            };
            acts.push(y);
            cols_all.push(cols);
        }
        let mut out = Array3::zeros((h, w, 3));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    out[(i, j, ch)] = x[(ch, i, j)];
                }
            }
        }
        Ok((
            out,
            RegCache {
                acts,
                cols: cols_all,
                input,
            },
        ))
    }

    /// Gradient of a loss on the output image with respect to all
    /// parameters, accumulated into `grad`.
    pub fn backward(&self, cache: &RegCache, d_out: &Array3<f32>, grad: &mut Regressor) {
        let (h, w, _) = d_out.dim();
        let mut dx = Array3::zeros((3, h, w));
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    dx[(ch, i, j)] = d_out[(i, j, ch)];
                }
            }
        }
        for i in (0..self.convs.len()).rev() {
            let mut dy = match RESAMPLE[i] {
                Resample::Down => avgpool2_backward(dx.view()),
                Resample::Up => upsample2_backward(dx.view()),
                Resample::None => dx,
            };
            let y = &cache.acts[i];
            let (c_out, yh, yw) = y.dim();
            let dy_flat = dy.as_slice_mut().unwrap();
            if i + 1 == self.convs.len() {
                sigmoid_backward_from_output(dy_flat, y.as_slice().unwrap());
            } else {
                lrelu_backward_from_output(dy_flat, y.as_slice().unwrap());
            }
            let dy2 = dy
                .view()
                .into_shape_with_order((c_out, yh * yw))
                .unwrap();
            matmul_acc_wgrad(dy2, cache.cols[i].view(), &mut grad.convs[i].w);
            for (o, row) in dy2.rows().into_iter().enumerate() {
                grad.convs[i].b[o] += row.sum();
            }
            let dcols = matmul_colgrad(self.convs[i].w.view(), dy2);
            let c_in = if i == 0 {
                cache.input.dim().0
            } else {
                cache.acts[i - 1].dim().0
            };
            dx = col2im3(dcols.view(), c_in, yh, yw);
        }
    }

    pub fn save_checkpoint(&self, path: &Path, meta: &RegressorMeta) -> Result<()> {
        let mut meta = meta.clone();
        meta.content_hash = self.content_id();
        meta.param_count = self.param_count();
        let json = serde_json::to_vec(&meta).unwrap();
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
        io::atomic_write(path, &bytes)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Regressor, RegressorMeta)> {
        let bytes = std::fs::read(path).map_err(|e| LilError::io(path, e))?;
        if bytes.len() < 12 || &bytes[0..4] != CKPT_MAGIC {
            return Err(LilError::format(path, "missing regressor magic"));
        }
        let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + json_len {
            return Err(LilError::format(path, "truncated manifest"));
        }
        let meta: RegressorMeta = serde_json::from_slice(&bytes[12..12 + json_len])
            .map_err(|e| LilError::format(path, e.to_string()))?;
        let mut reg = Regressor::new(0);
        let mut cursor = 12 + json_len;
        for t in reg.flat_mut() {
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
        if reg.content_id() != meta.content_hash {
            return Err(LilError::format(path, "content hash mismatch"));
        }
        Ok((reg, meta))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegressorMeta {
    pub seed: u64,
    pub steps: usize,
    pub param_count: usize,
    pub final_heldout_angular: Option<f32>,
    pub dataset_manifest_sha: Option<String>,
    pub content_hash: String,
}
