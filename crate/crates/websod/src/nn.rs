//! Dense layer primitives with explicit forward caches and hand-written
//! backward passes, plus SGD-with-momentum. Everything is `f64` and
//! deterministic: fixed iteration orders, seeded init, no threading.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::Rng;

use crate::datamodel::BBox;

/// Probability clamp inside log losses.
pub const PROB_EPS: f64 = 1e-12;

/// 2-D convolution, weights `(out, in, kh, kw)`, zero bias at init.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub w: Array4<f64>,
    pub b: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-uniform weight init, zero bias.
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (6.0 / (in_ch * ksize * ksize) as f64).sqrt();
        let w = Array4::from_shape_fn((out_ch, in_ch, ksize, ksize), |_| {
            rng.random_range(-limit..limit)
        });
        Conv2d {
            w,
            b: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, ksize: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            w: Array4::zeros((out_ch, in_ch, ksize, ksize)),
            b: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            w: Array4::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.dim().2;
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn padded(&self, x: &Array3<f64>) -> Array3<f64> {
        if self.pad == 0 {
            return x.clone();
        }
        let (c, h, w) = x.dim();
        let mut xp = Array3::zeros((c, h + 2 * self.pad, w + 2 * self.pad));
        xp.slice_mut(ndarray::s![
            ..,
            self.pad..self.pad + h,
            self.pad..self.pad + w
        ])
        .assign(x);
        xp
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (cout, cin, kh, kw) = self.w.dim();
        let (oh, ow) = self.out_hw(h, w);
        let xp = self.padded(x);
        let mut y = Array3::zeros((cout, oh, ow));
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = self.b[oc];
                    let (by, bx) = (oy * self.stride, ox * self.stride);
                    for ic in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                acc += self.w[[oc, ic, ky, kx]] * xp[[ic, by + ky, bx + kx]];
                            }
                        }
                    }
                    y[[oc, oy, ox]] = acc;
                }
            }
        }
        y
    }

    /// Returns the input gradient and a gradient holder shaped like `self`.
    pub fn backward(&self, x: &Array3<f64>, gy: &Array3<f64>) -> (Array3<f64>, Conv2d) {
        let (c, h, w) = x.dim();
        let (cout, cin, kh, kw) = self.w.dim();
        let (_, goh, gow) = gy.dim();
        let xp = self.padded(x);
        let mut grad = self.zeros_like();
        let mut gxp = Array3::zeros((c, h + 2 * self.pad, w + 2 * self.pad));
        for oc in 0..cout {
            for oy in 0..goh {
                for ox in 0..gow {
                    let g = gy[[oc, oy, ox]];
                    if g == 0.0 {
                        continue;
                    }
                    grad.b[oc] += g;
                    let (by, bx) = (oy * self.stride, ox * self.stride);
                    for ic in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                grad.w[[oc, ic, ky, kx]] += g * xp[[ic, by + ky, bx + kx]];
                                gxp[[ic, by + ky, bx + kx]] += g * self.w[[oc, ic, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        let gx = if self.pad == 0 {
            gxp
        } else {
            gxp.slice(ndarray::s![
                ..,
                self.pad..self.pad + h,
                self.pad..self.pad + w
            ])
            .to_owned()
        };
        (gx, grad)
    }

    pub fn accumulate(&mut self, other: &Conv2d) {
        self.w += &other.w;
        self.b += &other.b;
    }

    pub fn scale(&mut self, s: f64) {
        self.w *= s;
        self.b *= s;
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().unwrap(), self.b.as_slice().unwrap()]
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().unwrap(),
            self.b.as_slice_mut().unwrap(),
        ]
    }
}

/// Fully connected layer, weights `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-limit..limit));
        Linear {
            w,
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }

    pub fn backward(&self, x: &Array1<f64>, gy: &Array1<f64>) -> (Array1<f64>, Linear) {
        let gx = self.w.t().dot(gy);
        let mut grad = self.zeros_like();
        for (o, &g) in gy.iter().enumerate() {
            grad.b[o] = g;
            if g != 0.0 {
                grad.w.row_mut(o).assign(&(x * g));
            }
        }
        (gx, grad)
    }

    pub fn accumulate(&mut self, other: &Linear) {
        self.w += &other.w;
        self.b += &other.b;
    }

    pub fn scale(&mut self, s: f64) {
        self.w *= s;
        self.b *= s;
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice().unwrap(), self.b.as_slice().unwrap()]
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w.as_slice_mut().unwrap(),
            self.b.as_slice_mut().unwrap(),
        ]
    }
}

pub fn relu3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of relu given the pre-activation; derivative at 0 is 0.
pub fn relu3_backward(pre: &Array3<f64>, gy: &Array3<f64>) -> Array3<f64> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn relu1(x: &Array1<f64>) -> Array1<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu1_backward(pre: &Array1<f64>, gy: &Array1<f64>) -> Array1<f64> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

/// Global average pool over the spatial axes: `(K, H, W)` -> `K`.
pub fn global_avg_pool(x: &Array3<f64>) -> Array1<f64> {
    let (k, h, w) = x.dim();
    let n = (h * w) as f64;
    Array1::from_shape_fn(k, |c| x.index_axis(ndarray::Axis(0), c).sum() / n)
}

pub fn global_avg_pool_backward(shape: (usize, usize, usize), gy: &Array1<f64>) -> Array3<f64> {
    let (k, h, w) = shape;
    let n = (h * w) as f64;
    let mut gx = Array3::zeros(shape);
    for c in 0..k {
        gx.index_axis_mut(ndarray::Axis(0), c).fill(gy[c] / n);
    }
    gx
}

/// Feature-grid cells covered by a box projected at `stride`, as
/// `(y0, y1, x0, x1)` with exclusive ends. A box projecting to zero cells is
/// snapped to the nearest single cell.
pub fn feature_cells(bbox: &BBox, stride: usize, fh: usize, fw: usize) -> (usize, usize, usize, usize) {
    let s = stride as f64;
    let x0 = ((bbox.x1 / s).floor() as i64).clamp(0, fw as i64 - 1);
    let y0 = ((bbox.y1 / s).floor() as i64).clamp(0, fh as i64 - 1);
    let x1 = ((bbox.x2 / s).ceil() as i64).clamp(x0 + 1, fw as i64);
    let y1 = ((bbox.y2 / s).ceil() as i64).clamp(y0 + 1, fh as i64);
    (y0 as usize, y1 as usize, x0 as usize, x1 as usize)
}

/// RoI max pooling to a fixed `size x size` grid, with argmax cache for the
/// backward pass.
pub struct RoiPoolCache {
    /// `(k, py, px)` -> (y, x) of the winning feature cell.
    pub argmax: Array3<[usize; 2]>,
}

pub fn roi_max_pool(
    fm: &Array3<f64>,
    bbox: &BBox,
    stride: usize,
    size: usize,
) -> (Array3<f64>, RoiPoolCache) {
    let (k, fh, fw) = fm.dim();
    let (y0, y1, x0, x1) = feature_cells(bbox, stride, fh, fw);
    let (rh, rw) = (y1 - y0, x1 - x0);
    let mut out = Array3::zeros((k, size, size));
    let mut argmax = Array3::from_elem((k, size, size), [0usize; 2]);
    for py in 0..size {
        let hs = y0 + (py * rh) / size;
        let he = (y0 + ((py + 1) * rh).div_ceil(size)).max(hs + 1);
        for px in 0..size {
            let ws = x0 + (px * rw) / size;
            let we = (x0 + ((px + 1) * rw).div_ceil(size)).max(ws + 1);
            for c in 0..k {
                let mut best = f64::NEG_INFINITY;
                let mut arg = [hs, ws];
                for y in hs..he {
                    for x in ws..we {
                        let v = fm[[c, y, x]];
                        if v > best {
                            best = v;
                            arg = [y, x];
                        }
                    }
                }
                out[[c, py, px]] = best;
                argmax[[c, py, px]] = arg;
            }
        }
    }
    (out, RoiPoolCache { argmax })
}

pub fn roi_max_pool_backward(
    gpooled: &Array3<f64>,
    cache: &RoiPoolCache,
    gfm: &mut Array3<f64>,
) {
    let (k, size, _) = gpooled.dim();
    for c in 0..k {
        for py in 0..size {
            for px in 0..size {
                let [y, x] = cache.argmax[[c, py, px]];
                gfm[[c, y, x]] += gpooled[[c, py, px]];
            }
        }
    }
}

/// Numerically stabilized softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Fused softmax + log loss. Returns `(loss, dloss/dlogits)`.
pub fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = softmax(logits);
    let loss = -(p[label].max(PROB_EPS)).ln();
    let mut grad = p;
    grad[label] -= 1.0;
    (loss, grad)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Stable binary cross-entropy on a logit. Returns `(loss, dloss/dlogit)`.
pub fn bce_with_logits(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (1.0 + (-logit.abs()).exp()).ln();
    (loss, sigmoid(logit) - target)
}

/// SGD with momentum: `v = mu * v + g; p -= lr * v`.
///
/// Velocity buffers are aligned with the caller's parameter-slice order, which
/// must stay fixed across steps.
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    vel: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, params: &[&[f64]]) -> Self {
        SgdMomentum {
            lr,
            momentum,
            vel: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), self.vel.len());
        assert_eq!(grads.len(), self.vel.len());
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.vel.iter_mut()) {
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i];
                p[i] -= self.lr * v[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv_shape_matches_ceil_division_for_stride2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv2d::new(3, 4, 3, 2, 1, &mut rng);
        for h in [7usize, 8, 9, 16, 25] {
            let x = Array3::zeros((3, h, h));
            let y = conv.forward(&x);
            assert_eq!(y.dim().1, h.div_ceil(2));
        }
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let x = Array3::from_shape_fn((2, 6, 6), |_| rng.random_range(-1.0..1.0));
        // scalar loss: weighted sum of outputs
        let wsum = Array3::from_shape_fn(conv.forward(&x).raw_dim(), |_| {
            rng.random_range(-1.0..1.0)
        });
        let loss = |c: &Conv2d, xin: &Array3<f64>| (c.forward(xin) * &wsum).sum();

        let (gx, gw) = conv.backward(&x, &wsum);
        let h = 1e-5;

        // a few weight entries
        for idx in [[0, 0, 0, 0], [2, 1, 2, 1], [1, 0, 1, 2]] {
            let orig = conv.w[idx];
            conv.w[idx] = orig + h;
            let up = loss(&conv, &x);
            conv.w[idx] = orig - h;
            let dn = loss(&conv, &x);
            conv.w[idx] = orig;
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(fd, gw.w[idx]) < 1e-6, "fd {fd} vs {}", gw.w[idx]);
        }
        // bias
        let orig = conv.b[1];
        conv.b[1] = orig + h;
        let up = loss(&conv, &x);
        conv.b[1] = orig - h;
        let dn = loss(&conv, &x);
        conv.b[1] = orig;
        assert!(rel_err((up - dn) / (2.0 * h), gw.b[1]) < 1e-6);
        // input
        let mut x2 = x.clone();
        for idx in [[0, 0, 0], [1, 3, 4], [0, 5, 5]] {
            let orig = x2[idx];
            x2[idx] = orig + h;
            let up = loss(&conv, &x2);
            x2[idx] = orig - h;
            let dn = loss(&conv, &x2);
            x2[idx] = orig;
            assert!(rel_err((up - dn) / (2.0 * h), gx[idx]) < 1e-6);
        }
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new(5, 3, &mut rng);
        let x = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let wsum = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let loss = |l: &Linear, xin: &Array1<f64>| (l.forward(xin) * &wsum).sum();
        let (gx, gl) = lin.backward(&x, &wsum);
        let h = 1e-5;
        let orig = lin.w[[1, 2]];
        lin.w[[1, 2]] = orig + h;
        let up = loss(&lin, &x);
        lin.w[[1, 2]] = orig - h;
        let dn = loss(&lin, &x);
        lin.w[[1, 2]] = orig;
        assert!(rel_err((up - dn) / (2.0 * h), gl.w[[1, 2]]) < 1e-6);

        let mut x2 = x.clone();
        let orig = x2[3];
        x2[3] = orig + h;
        let up = loss(&lin, &x2);
        x2[3] = orig - h;
        let dn = loss(&lin, &x2);
        assert!(rel_err((up - dn) / (2.0 * h), gx[3]) < 1e-6);
    }

    #[test]
    fn gap_is_mean_and_backward_spreads_evenly() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = global_avg_pool(&x);
        assert_eq!(y[0], 2.5);
        let gx = global_avg_pool_backward((1, 2, 2), &Array1::from_vec(vec![4.0]));
        assert!(gx.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn roi_pool_takes_max_and_routes_gradient_to_argmax() {
        let mut fm = Array3::zeros((1, 4, 4));
        fm[[0, 1, 1]] = 0.3;
        fm[[0, 2, 2]] = 0.9;
        let bbox = BBox::new(0.0, 0.0, 32.0, 32.0).unwrap(); // covers all cells at stride 8
        let (pooled, cache) = roi_max_pool(&fm, &bbox, 8, 1);
        assert_eq!(pooled[[0, 0, 0]], 0.9);
        let mut gfm = Array3::zeros((1, 4, 4));
        let mut g = Array3::zeros((1, 1, 1));
        g[[0, 0, 0]] = 2.0;
        roi_max_pool_backward(&g, &cache, &mut gfm);
        assert_eq!(gfm[[0, 2, 2]], 2.0);
        assert_eq!(gfm.sum(), 2.0);
    }

    #[test]
    fn feature_cells_snaps_degenerate_projection() {
        // box far outside the grid still yields one cell
        let bbox = BBox::new(100.0, 100.0, 101.0, 101.0).unwrap();
        let (y0, y1, x0, x1) = feature_cells(&bbox, 8, 4, 4);
        assert_eq!((y0, y1, x0, x1), (3, 4, 3, 4));
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, grad) = softmax_ce(&logits, 2);
        let h = 1e-4;
        for i in 0..6 {
            let mut up = logits.clone();
            up[i] += h;
            let mut dn = logits.clone();
            dn[i] -= h;
            let fd = (softmax_ce(&up, 2).0 - softmax_ce(&dn, 2).0) / (2.0 * h);
            assert!(rel_err(fd, grad[i]) < 1e-4, "fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn bce_matches_direct_formula() {
        for (z, t) in [(0.7, 1.0), (-1.3, 0.0), (2.0, 0.0), (0.0, 1.0)] {
            let (loss, _) = bce_with_logits(z, t);
            let p = sigmoid(z);
            let direct = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!((loss - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut p = vec![1.0f64];
        let mut opt = SgdMomentum::new(0.1, 0.9, &[&p]);
        opt.step(vec![&mut p], vec![&[1.0]]);
        assert!((p[0] - 0.9).abs() < 1e-12);
        opt.step(vec![&mut p], vec![&[1.0]]);
        // v = 0.9 * 1 + 1 = 1.9; p = 0.9 - 0.19
        assert!((p[0] - 0.71).abs() < 1e-12);
    }
}
