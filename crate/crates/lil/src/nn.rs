//! Hand-rolled neural network primitives: dense layers, 3x3 same-padding
//! convolution via im2col, 2x nearest upsampling, 2x2 average pooling,
//! activations, and Adam. Forward and backward passes are explicit; there is
//! no autodiff. Activations use the (C, H, W) layout, f32 throughout, and
//! every operation is sequential and deterministic.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const LRELU_SLOPE: f32 = 0.2;

pub fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, shape: (usize, usize)) -> Array2<f32> {
    let std = (2.0 / fan_in as f32).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn(shape, |_| dist.sample(rng))
}

// --- dense ---

/// Fully connected layer, y = W x + b.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Array2<f32>,
    pub b: Array1<f32>,
}

impl Dense {
    pub fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            w: he_normal(rng, fan_in, (fan_out, fan_in)),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn zeros_like(&self) -> Dense {
        Dense {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView1<f32>) -> Array1<f32> {
        self.w.dot(&x) + &self.b
    }

    /// Returns dx and accumulates dW, db into `grad`.
    pub fn backward(
        &self,
        x: ArrayView1<f32>,
        dy: ArrayView1<f32>,
        grad: &mut Dense,
    ) -> Array1<f32> {
        for (o, &g) in dy.iter().enumerate() {
            grad.b[o] += g;
            let mut row = grad.w.row_mut(o);
            row.scaled_add(g, &x);
        }
        self.w.t().dot(&dy)
    }

    /// Gradient with respect to the input only.
    pub fn backward_input(&self, dy: ArrayView1<f32>) -> Array1<f32> {
        self.w.t().dot(&dy)
    }
}

// --- activations ---

pub fn lrelu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v *= LRELU_SLOPE;
        }
    }
}

/// Backward through leaky ReLU given the layer's *output* (the sign of the
/// output determines the branch because the slope is positive).
pub fn lrelu_backward_from_output(dy: &mut [f32], y: &[f32]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v < 0.0 {
            *d *= LRELU_SLOPE;
        }
    }
}

pub fn sigmoid_inplace(x: &mut [f32]) {
    for v in x {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

pub fn sigmoid_backward_from_output(dy: &mut [f32], y: &[f32]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        *d *= v * (1.0 - v);
    }
}

// --- conv3x3 (same padding) ---

/// Unfolds (C, H, W) into (C*9, H*W) patch columns for a 3x3 kernel with zero
/// padding. Kernel taps are ordered row-major: k = (dy+1)*3 + (dx+1).
pub fn im2col3(x: ArrayView3<f32>) -> Array2<f32> {
    let (c_in, h, w) = x.dim();
    let mut cols = Array2::zeros((c_in * 9, h * w));
    for c in 0..c_in {
        for (k, (dy, dx)) in taps().into_iter().enumerate() {
            let (y0, y1) = valid_range(h, dy);
            let (x0, x1) = valid_range(w, dx);
            let src = x.slice(s![
                c,
                (y0 as isize + dy) as usize..(y1 as isize + dy) as usize,
                (x0 as isize + dx) as usize..(x1 as isize + dx) as usize
            ]);
            let row = cols.row_mut(c * 9 + k);
            let mut dst2 = row.into_shape_with_order((h, w)).unwrap();
            dst2.slice_mut(s![y0..y1, x0..x1]).assign(&src);
        }
    }
    cols
}

/// Folds patch-column gradients back onto the input, the adjoint of
/// [`im2col3`].
pub fn col2im3(dcols: ArrayView2<f32>, c_in: usize, h: usize, w: usize) -> Array3<f32> {
    let mut dx = Array3::zeros((c_in, h, w));
    for c in 0..c_in {
        for (k, (dy, dx_off)) in taps().into_iter().enumerate() {
            let (y0, y1) = valid_range(h, dy);
            let (x0, x1) = valid_range(w, dx_off);
            let row = dcols.row(c * 9 + k);
            let src2 = row.into_shape_with_order((h, w)).unwrap();
            let src = src2.slice(s![y0..y1, x0..x1]);
            let mut dst = dx.slice_mut(s![
                c,
                (y0 as isize + dy) as usize..(y1 as isize + dy) as usize,
                (x0 as isize + dx_off) as usize..(x1 as isize + dx_off) as usize
            ]);
            dst += &src;
        }
    }
    dx
}

fn taps() -> [(isize, isize); 9] {
    [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 0),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ]
}

/// Output index range [y0, y1) for which the shifted source index stays in
/// bounds.
fn valid_range(n: usize, shift: isize) -> (usize, usize) {
    if shift < 0 {
        ((-shift) as usize, n)
    } else {
        (0, n - shift as usize)
    }
}

/// y = W * cols, where W is (C_out, C_in*9) and cols comes from [`im2col3`].
pub fn matmul(w: ArrayView2<f32>, cols: ArrayView2<f32>) -> Array2<f32> {
    let mut y = Array2::zeros((w.nrows(), cols.ncols()));
    general_mat_mul(1.0, &w, &cols, 0.0, &mut y);
    y
}

/// dW += dy * cols^T.
pub fn matmul_acc_wgrad(dy: ArrayView2<f32>, cols: ArrayView2<f32>, dw: &mut Array2<f32>) {
    general_mat_mul(1.0, &dy, &cols.t(), 1.0, dw);
}

/// dcols = W^T * dy.
pub fn matmul_colgrad(w: ArrayView2<f32>, dy: ArrayView2<f32>) -> Array2<f32> {
    let mut dcols = Array2::zeros((w.ncols(), dy.ncols()));
    general_mat_mul(1.0, &w.t(), &dy, 0.0, &mut dcols);
    dcols
}

// --- resampling ---

pub fn upsample2(x: ArrayView3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h * 2, w * 2));
    for ci in 0..c {
        for yi in 0..h {
            for xi in 0..w {
                let v = x[(ci, yi, xi)];
                y[(ci, 2 * yi, 2 * xi)] = v;
                y[(ci, 2 * yi, 2 * xi + 1)] = v;
                y[(ci, 2 * yi + 1, 2 * xi)] = v;
                y[(ci, 2 * yi + 1, 2 * xi + 1)] = v;
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: ArrayView3<f32>) -> Array3<f32> {
    let (c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for yi in 0..h {
            for xi in 0..w {
                dx[(ci, yi, xi)] = dy[(ci, 2 * yi, 2 * xi)]
                    + dy[(ci, 2 * yi, 2 * xi + 1)]
                    + dy[(ci, 2 * yi + 1, 2 * xi)]
                    + dy[(ci, 2 * yi + 1, 2 * xi + 1)];
            }
        }
    }
    dx
}

pub fn avgpool2(x: ArrayView3<f32>) -> Array3<f32> {
    let (c, h, w) = x.dim();
    let (h2, w2) = (h / 2, w / 2);
    let mut y = Array3::zeros((c, h2, w2));
    for ci in 0..c {
        for yi in 0..h2 {
            for xi in 0..w2 {
                y[(ci, yi, xi)] = 0.25
                    * (x[(ci, 2 * yi, 2 * xi)]
                        + x[(ci, 2 * yi, 2 * xi + 1)]
                        + x[(ci, 2 * yi + 1, 2 * xi)]
                        + x[(ci, 2 * yi + 1, 2 * xi + 1)]);
            }
        }
    }
    y
}

pub fn avgpool2_backward(dy: ArrayView3<f32>) -> Array3<f32> {
    let (c, h2, w2) = dy.dim();
    let mut dx = Array3::zeros((c, h2 * 2, w2 * 2));
    for ci in 0..c {
        for yi in 0..h2 {
            for xi in 0..w2 {
                let g = 0.25 * dy[(ci, yi, xi)];
                dx[(ci, 2 * yi, 2 * xi)] = g;
                dx[(ci, 2 * yi, 2 * xi + 1)] = g;
                dx[(ci, 2 * yi + 1, 2 * xi)] = g;
                dx[(ci, 2 * yi + 1, 2 * xi + 1)] = g;
            }
        }
    }
    dx
}

// --- optimizer ---

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed list of flat tensors. The caller passes parameters and
/// gradients in the same order on every step.
#[derive(Debug)]
pub struct Adam {
    pub cfg: AdamParams,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamParams, sizes: &[usize]) -> Adam {
        Adam {
            cfg,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update with an explicit learning rate (so callers can schedule it).
    pub fn step_with_lr(&mut self, lr: f32, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t);
        let bc2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            let (p, g) = (&mut *params[i], grads[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(p.len(), g.len());
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        let lr = self.cfg.lr;
        self.step_with_lr(lr, params, grads);
    }
}

/// Cosine decay from `lr` to `lr * floor_frac` across `total` steps.
pub fn cosine_lr(lr: f32, step: usize, total: usize, floor_frac: f32) -> f32 {
    if total <= 1 {
        return lr;
    }
    let progress = step as f32 / (total - 1) as f32;
    let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
    lr * (floor_frac + (1.0 - floor_frac) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use ndarray::{Array1, Array3};

    /// Naive direct 3x3 convolution, the oracle the im2col path is checked
    /// against.
    fn conv3x3_naive(x: &Array3<f32>, w: &Array2<f32>) -> Array3<f32> {
        let (c_in, h, wd) = x.dim();
        let c_out = w.nrows();
        assert_eq!(w.ncols(), c_in * 9);
        let mut y = Array3::zeros((c_out, h, wd));
        for o in 0..c_out {
            for yi in 0..h as isize {
                for xi in 0..wd as isize {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for (k, (dy, dx)) in taps().into_iter().enumerate() {
                            let (sy, sx) = (yi + dy, xi + dx);
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                acc += x[(c, sy as usize, sx as usize)] * w[(o, c * 9 + k)];
                            }
                        }
                    }
                    y[(o, yi as usize, xi as usize)] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_naive_oracle() {
        let mut rng = substream(11, "nn/conv");
        let x = Array3::from_shape_fn((3, 5, 6), |_| {
            rand_distr::StandardNormal.sample(&mut rng)
        });
        let w = he_normal(&mut rng, 27, (4, 27));
        let cols = im2col3(x.view());
        let y = matmul(w.view(), cols.view());
        let y = y.into_shape_with_order((4, 5, 6)).unwrap();
        let expect = conv3x3_naive(&x, &w);
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), u> == <x, col2im(u)> for all x, u; checked on random
        // draws. This pins the backward pass to the forward pass exactly.
        let mut rng = substream(12, "nn/adjoint");
        let x = Array3::from_shape_fn((2, 4, 5), |_| {
            rand_distr::StandardNormal.sample(&mut rng)
        });
        let u = Array2::from_shape_fn((18, 20), |_| {
            rand_distr::StandardNormal.sample(&mut rng)
        });
        let lhs: f32 = (&im2col3(x.view()) * &u).sum();
        let rhs: f32 = (&x * &col2im3(u.view(), 2, 4, 5)).sum();
        assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = substream(13, "nn/fd");
        let x = Array3::from_shape_fn((2, 4, 4), |_| {
            rand_distr::StandardNormal.sample(&mut rng)
        });
        let w = he_normal(&mut rng, 18, (3, 18));
        let proj = Array3::from_shape_fn((3, 4, 4), |_| {
            rand_distr::StandardNormal.sample(&mut rng)
        });
        // Loss = <proj, conv(x, w)>. Linear in both arguments, so central
        // differences are exact up to f32 rounding.
        let loss = |x: &Array3<f32>, w: &Array2<f32>| -> f32 {
            let y = matmul(w.view(), im2col3(x.view()).view());
            let y = y.into_shape_with_order((3, 4, 4)).unwrap();
            (&y * &proj).sum()
        };
        let dy = proj
            .view()
            .into_shape_with_order((3, 16))
            .unwrap()
            .to_owned();
        let cols = im2col3(x.view());
        let mut dw = Array2::zeros((3, 18));
        matmul_acc_wgrad(dy.view(), cols.view(), &mut dw);
        let dx = col2im3(matmul_colgrad(w.view(), dy.view()).view(), 2, 4, 4);

        let h = 1e-2;
        for idx in [(0usize, 0usize), (1, 7), (2, 17)] {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp[idx] += h;
            wm[idx] -= h;
            let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-2, "dW {fd} vs {}", dw[idx]);
        }
        for idx in [(0usize, 0usize, 0usize), (1, 2, 3), (1, 3, 0)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-2, "dx {fd} vs {}", dx[idx]);
        }
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = substream(14, "nn/dense");
        let layer = Dense::new(&mut rng, 5, 3);
        let x = crate::rng::standard_normal(&mut rng, 5);
        let proj = crate::rng::standard_normal(&mut rng, 3);
        let loss = |l: &Dense, x: &Array1<f32>| l.forward(x.view()).dot(&proj);

        let mut grad = layer.zeros_like();
        let dx = layer.backward(x.view(), proj.view(), &mut grad);

        let h = 1e-2;
        for i in 0..5 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-3);
        }
        let mut lp = layer.clone();
        let mut lm = layer.clone();
        lp.w[(1, 2)] += h;
        lm.w[(1, 2)] -= h;
        let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((fd - grad.w[(1, 2)]).abs() < 1e-3);
    }

    #[test]
    fn upsample_and_pool_backwards_are_adjoint() {
        let mut rng = substream(15, "nn/resample");
        let x = Array3::from_shape_fn((2, 3, 3), |_| {
            rand_distr::StandardNormal.sample(&mut rng)
        });
        let u = Array3::from_shape_fn((2, 6, 6), |_| {
            rand_distr::StandardNormal.sample(&mut rng)
        });
        let lhs: f32 = (&upsample2(x.view()) * &u).sum();
        let rhs: f32 = (&x * &upsample2_backward(u.view())).sum();
        assert!((lhs - rhs).abs() < 1e-4);

        let lhs: f32 = (&avgpool2(u.view()) * &x).sum();
        let rhs: f32 = (&u * &avgpool2_backward(x.view())).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn activations_backward_from_output() {
        let y_pre = [-1.5f32, -0.1, 0.0, 0.3, 2.0];
        let mut y = y_pre;
        lrelu_inplace(&mut y);
        let mut dy = [1.0f32; 5];
        lrelu_backward_from_output(&mut dy, &y);
        for (i, &x) in y_pre.iter().enumerate() {
            let expect = if x < 0.0 { LRELU_SLOPE } else { 1.0 };
            assert_eq!(dy[i], expect);
        }

        let mut s = [0.5f32, -0.5];
        sigmoid_inplace(&mut s);
        let mut ds = [1.0f32, 1.0];
        sigmoid_backward_from_output(&mut ds, &s);
        for i in 0..2 {
            assert!((ds[i] - s[i] * (1.0 - s[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let target = [3.0f32, -1.0, 0.5];
        let mut x = [0.0f32; 3];
        let mut adam = Adam::new(
            AdamParams {
                lr: 0.1,
                ..Default::default()
            },
            &[3],
        );
        for _ in 0..500 {
            let g: Vec<f32> = x.iter().zip(&target).map(|(a, t)| 2.0 * (a - t)).collect();
            adam.step(&mut [&mut x], &[&g]);
        }
        for i in 0..3 {
            assert!((x[i] - target[i]).abs() < 1e-3);
        }
    }

    #[test]
    fn cosine_schedule_hits_endpoints() {
        assert!((cosine_lr(1.0, 0, 100, 0.05) - 1.0).abs() < 1e-6);
        assert!((cosine_lr(1.0, 99, 100, 0.05) - 0.05).abs() < 1e-6);
    }
}
