//! Convolution, transposed convolution and instance normalization with
//! hand-written backward passes.
//!
//! Every layer caches exactly what its backward pass needs. Gradient
//! containers are the layer types themselves, zero-filled, so optimizers and
//! serializers can walk parameters and gradients in lockstep.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), all row-major.
/// `op(a)` is `m`×`k`, `op(b)` is `k`×`n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents described above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Kernel geometry shared by `Conv2d` and `ConvTranspose2d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Geometry { in_ch, out_ch, kernel, stride, pad }
    }

    /// Output side of a forward convolution over a side of `n` pixels.
    pub fn conv_out(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output side of a transposed convolution over a side of `n` pixels.
    pub fn transposed_out(&self, n: usize) -> Option<usize> {
        ((n - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }
}

/// Unfolds one `c`×`h`×`w` sample into `c·k·k` rows of `oh·ow` columns.
/// Row `r` starts at `col[r * ld]`, so several samples can share one
/// column matrix side by side.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
    ld: usize,
) {
    let cols = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut col[row * ld..row * ld + cols];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        *o = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
    x: &mut [f32],
    ld: usize,
) {
    let cols = oh * ow;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &col[row * ld..row * ld + cols];
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, p]` to `[c, n·p]`.
fn to_channel_major(x: &[f32], n: usize, c: usize, p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

/// `[c, n·p]` to `[n, c, p]`.
fn from_channel_major(m: &[f32], n: usize, c: usize, p: usize, out: &mut [f32]) {
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(&m[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
}

fn normal_init<R: Rng>(len: usize, std: f32, rng: &mut R) -> Vec<f32> {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// 2-D convolution with weights laid out `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub geom: Geometry,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

/// Saved state for [`Conv2d::backward`].
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f32>,
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(geom: Geometry, bias: bool, std: f32, rng: &mut R) -> Self {
        let len = geom.out_ch * geom.in_ch * geom.kernel * geom.kernel;
        Conv2d {
            geom,
            weight: normal_init(len, std, rng),
            bias: bias.then(|| vec![0.0; geom.out_ch]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Conv2d {
            geom: self.geom,
            weight: vec![0.0; self.weight.len()],
            bias: self.bias.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    fn patch_len(&self) -> usize {
        self.geom.in_ch * self.geom.kernel * self.geom.kernel
    }

    pub fn output_shape(&self, in_shape: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = in_shape;
        ensure!(
            c == self.geom.in_ch,
            "conv expects {} input channels, got {}",
            self.geom.in_ch,
            c
        );
        let (oh, ow) = match (self.geom.conv_out(h), self.geom.conv_out(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(crate::Error::validation(format!(
                    "input {h}x{w} too small for kernel {}",
                    self.geom.kernel
                )))
            }
        };
        Ok([n, self.geom.out_ch, oh, ow])
    }

    /// Forward pass. With `keep_cache` the unfolded input is retained for
    /// [`Conv2d::backward`]. `with_bias = false` evaluates the linear part only.
    pub fn forward(
        &self,
        x: &Tensor,
        keep_cache: bool,
        with_bias: bool,
    ) -> Result<(Tensor, Option<ConvCache>)> {
        let out_shape = self.output_shape(x.shape())?;
        let [n, oc, oh, ow] = out_shape;
        let g = self.geom;
        let (h, w) = (x.height(), x.width());
        let kk = self.patch_len();
        let pix = oh * ow;
        let ld = n * pix;
        let mut cols = vec![0.0f32; kk * ld];
        for b in 0..n {
            im2col(x.sample(b), g.in_ch, h, w, g.kernel, g.stride, g.pad, oh, ow, &mut cols[b * pix..], ld);
        }
        let mut out_mat = vec![0.0f32; oc * ld];
        gemm(oc, kk, ld, &self.weight, false, &cols, false, &mut out_mat, false);
        if with_bias {
            if let Some(bias) = &self.bias {
                for (row, &bv) in out_mat.chunks_mut(ld).zip(bias) {
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let mut out = Tensor::zeros(out_shape);
        from_channel_major(&out_mat, n, oc, pix, out.data_mut());
        let cache = keep_cache.then(|| ConvCache { cols, in_shape: x.shape(), out_hw: (oh, ow) });
        Ok((out, cache))
    }

    /// Backward pass. Accumulates parameter gradients into `grads` (bias only
    /// when `bias_grad`) and returns the input gradient when `want_input`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        gout: &Tensor,
        grads: Option<&mut Conv2d>,
        bias_grad: bool,
        want_input: bool,
    ) -> Option<Tensor> {
        let g = self.geom;
        let [n, _, h, w] = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let kk = self.patch_len();
        let pix = oh * ow;
        let ld = n * pix;
        let oc = g.out_ch;
        let gout_mat = to_channel_major(gout.data(), n, oc, pix);
        if let Some(gr) = grads {
            gemm(oc, ld, kk, &gout_mat, false, &cache.cols, true, &mut gr.weight, true);
            if bias_grad {
                if let Some(gb) = gr.bias.as_mut() {
                    for (acc, row) in gb.iter_mut().zip(gout_mat.chunks(ld)) {
                        *acc += row.iter().sum::<f32>();
                    }
                }
            }
        }
        if !want_input {
            return None;
        }
        let mut gcol = vec![0.0f32; kk * ld];
        gemm(kk, oc, ld, &self.weight, true, &gout_mat, false, &mut gcol, false);
        let mut gx = Tensor::zeros(cache.in_shape);
        for b in 0..n {
            col2im(&gcol[b * pix..], g.in_ch, h, w, g.kernel, g.stride, g.pad, oh, ow, gx.sample_mut(b), ld);
        }
        Some(gx)
    }
}

/// Transposed 2-D convolution with weights laid out `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub geom: Geometry,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct ConvTransposeCache {
    /// Input in `[channels, batch·pixels]` layout.
    input_mat: Vec<f32>,
    in_shape: [usize; 4],
}

impl ConvTranspose2d {
    pub fn new<R: Rng>(geom: Geometry, bias: bool, std: f32, rng: &mut R) -> Self {
        let len = geom.out_ch * geom.in_ch * geom.kernel * geom.kernel;
        ConvTranspose2d {
            geom,
            weight: normal_init(len, std, rng),
            bias: bias.then(|| vec![0.0; geom.out_ch]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ConvTranspose2d {
            geom: self.geom,
            weight: vec![0.0; self.weight.len()],
            bias: self.bias.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    pub fn output_shape(&self, in_shape: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = in_shape;
        ensure!(
            c == self.geom.in_ch,
            "transposed conv expects {} input channels, got {}",
            self.geom.in_ch,
            c
        );
        ensure!(h > 0 && w > 0, "empty input to transposed conv");
        match (self.geom.transposed_out(h), self.geom.transposed_out(w)) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok([n, self.geom.out_ch, oh, ow]),
            _ => Err(crate::Error::validation("transposed conv output would be empty")),
        }
    }

    pub fn forward(&self, x: &Tensor, keep_cache: bool) -> Result<(Tensor, Option<ConvTransposeCache>)> {
        let out_shape = self.output_shape(x.shape())?;
        let [n, oc, oh, ow] = out_shape;
        let g = self.geom;
        let pix = x.height() * x.width();
        let ld = n * pix;
        let kk = oc * g.kernel * g.kernel;
        let x_mat = to_channel_major(x.data(), n, g.in_ch, pix);
        let mut col = vec![0.0f32; kk * ld];
        gemm(kk, g.in_ch, ld, &self.weight, true, &x_mat, false, &mut col, false);
        let mut out = Tensor::zeros(out_shape);
        for b in 0..n {
            let dst = out.sample_mut(b);
            col2im(&col[b * pix..], oc, oh, ow, g.kernel, g.stride, g.pad, x.height(), x.width(), dst, ld);
            if let Some(bias) = &self.bias {
                for (o, &bv) in dst.chunks_mut(oh * ow).zip(bias) {
                    o.iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        let cache = keep_cache.then(|| ConvTransposeCache { input_mat: x_mat, in_shape: x.shape() });
        Ok((out, cache))
    }

    pub fn backward(
        &self,
        cache: &ConvTransposeCache,
        gout: &Tensor,
        grads: Option<&mut ConvTranspose2d>,
        want_input: bool,
    ) -> Option<Tensor> {
        let g = self.geom;
        let [n, _, h, w] = cache.in_shape;
        let (oh, ow) = (gout.height(), gout.width());
        let pix = h * w;
        let ld = n * pix;
        let kk = g.out_ch * g.kernel * g.kernel;
        let mut gcol = vec![0.0f32; kk * ld];
        for b in 0..n {
            im2col(gout.sample(b), g.out_ch, oh, ow, g.kernel, g.stride, g.pad, h, w, &mut gcol[b * pix..], ld);
        }
        if let Some(gr) = grads {
            gemm(g.in_ch, ld, kk, &cache.input_mat, false, &gcol, true, &mut gr.weight, true);
            if let Some(gb) = gr.bias.as_mut() {
                for b in 0..n {
                    for (acc, plane) in gb.iter_mut().zip(gout.sample(b).chunks(oh * ow)) {
                        *acc += plane.iter().sum::<f32>();
                    }
                }
            }
        }
        if !want_input {
            return None;
        }
        let mut gx_mat = vec![0.0f32; g.in_ch * ld];
        gemm(g.in_ch, kk, ld, &self.weight, false, &gcol, false, &mut gx_mat, false);
        let mut gx = Tensor::zeros(cache.in_shape);
        from_channel_major(&gx_mat, n, g.in_ch, pix, gx.data_mut());
        Some(gx)
    }
}

/// Per-sample, per-channel normalization with an affine transform.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

const NORM_EPS: f32 = 1e-5;

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        InstanceNorm { gamma: vec![1.0; channels], beta: vec![0.0; channels] }
    }

    pub fn zeros_like(&self) -> Self {
        InstanceNorm { gamma: vec![0.0; self.gamma.len()], beta: vec![0.0; self.beta.len()] }
    }

    pub fn forward(&self, x: &Tensor, keep_cache: bool) -> Result<(Tensor, Option<NormCache>)> {
        let [n, c, h, w] = x.shape();
        ensure!(c == self.gamma.len(), "instance norm expects {} channels, got {c}", self.gamma.len());
        let pix = h * w;
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = keep_cache.then(|| Tensor::zeros(x.shape()));
        let mut inv_stds = Vec::with_capacity(n * c);
        for (i, (src, dst)) in x.data().chunks(pix).zip(out.data_mut().chunks_mut(pix)).enumerate() {
            let ch = i % c;
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / pix as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / pix as f64;
            let inv_std = 1.0 / (var as f32 + NORM_EPS).sqrt();
            let mean = mean as f32;
            let (gm, bt) = (self.gamma[ch], self.beta[ch]);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv_std;
            }
            if let Some(xh) = xhat.as_mut() {
                xh.data_mut()[i * pix..(i + 1) * pix].copy_from_slice(dst);
            }
            dst.iter_mut().for_each(|d| *d = *d * gm + bt);
            inv_stds.push(inv_std);
        }
        Ok((out, xhat.map(|xhat| NormCache { xhat, inv_std: inv_stds })))
    }

    pub fn backward(&self, cache: &NormCache, gout: &Tensor, grads: Option<&mut InstanceNorm>) -> Tensor {
        let [_, c, h, w] = gout.shape();
        let pix = h * w;
        let mut gx = Tensor::zeros(gout.shape());
        let mut grads = grads;
        let planes = gout.data().chunks(pix).zip(cache.xhat.data().chunks(pix));
        for (i, ((go, xh), gdst)) in planes.zip(gx.data_mut().chunks_mut(pix)).enumerate() {
            let ch = i % c;
            let gm = self.gamma[ch];
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for (&g, &xv) in go.iter().zip(xh) {
                sum_g += g as f64;
                sum_gx += (g * xv) as f64;
            }
            if let Some(gr) = grads.as_deref_mut() {
                gr.gamma[ch] += sum_gx as f32;
                gr.beta[ch] += sum_g as f32;
            }
            let mean_g = (sum_g / pix as f64) as f32;
            let mean_gx = (sum_gx / pix as f64) as f32;
            let scale = gm * cache.inv_std[i];
            for ((d, &g), &xv) in gdst.iter_mut().zip(go).zip(xh) {
                *d = scale * (g - mean_g - xv * mean_gx);
            }
        }
        gx
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward_inplace(output: &Tensor, grad: &mut Tensor) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

#[inline]
pub fn leaky(v: f32, slope: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        v * slope
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    /// Naive direct convolution used as an oracle.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let g = conv.geom;
        let shape = conv.output_shape(x.shape()).unwrap();
        let [n, oc, oh, ow] = shape;
        let mut out = Tensor::zeros(shape);
        for b in 0..n {
            for o in 0..oc {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |bb| bb[o] as f64);
                        for c in 0..g.in_ch {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.height() as isize || ix >= x.width() as isize {
                                        continue;
                                    }
                                    let xi = x.sample(b)[(c * x.height() + iy as usize) * x.width() + ix as usize];
                                    let wi = conv.weight[((o * g.in_ch + c) * g.kernel + ki) * g.kernel + kj];
                                    acc += xi as f64 * wi as f64;
                                }
                            }
                        }
                        out.sample_mut(b)[(o * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for geom in [Geometry::new(2, 3, 4, 2, 1), Geometry::new(3, 2, 3, 1, 1), Geometry::new(1, 4, 7, 1, 3)] {
            let mut conv = Conv2d::new(geom, true, 0.5, &mut rng);
            conv.bias = Some((0..geom.out_ch).map(|i| i as f32 * 0.1).collect());
            let x = rand_tensor([2, geom.in_ch, 8, 8], &mut rng);
            let (y, _) = conv.forward(&x, false, true).unwrap();
            let expect = naive_conv(&conv, &x);
            for (a, b) in y.data().iter().zip(expect.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new(Geometry::new(2, 3, 4, 2, 1), false, 0.5, &mut rng);
        let x = rand_tensor([2, 2, 8, 8], &mut rng);
        let (y, cache) = conv.forward(&x, true, false).unwrap();
        let gy = rand_tensor(y.shape(), &mut rng);
        let gx = conv.backward(&cache.unwrap(), &gy, None, false, true).unwrap();
        assert!((dot(&y, &gy) - dot(&x, &gx)).abs() < 1e-4);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geom = Geometry::new(3, 2, 4, 2, 1);
        let convt = ConvTranspose2d::new(geom, false, 0.5, &mut rng);
        // The adjoint conv maps 2 -> 3 channels and shares the [3, 2, k, k] layout.
        let conv = Conv2d { geom: Geometry::new(2, 3, 4, 2, 1), weight: convt.weight.clone(), bias: None };
        let x = rand_tensor([1, 3, 4, 4], &mut rng);
        let (y, _) = convt.forward(&x, false).unwrap();
        assert_eq!(y.shape(), [1, 2, 8, 8]);
        let z = rand_tensor([1, 2, 8, 8], &mut rng);
        let (cz, _) = conv.forward(&z, false, false).unwrap();
        assert!((dot(&y, &z) - dot(&x, &cz)).abs() < 1e-4);
    }

    fn finite_diff_check(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) {
        let eps = 1e-2f32;
        for i in (0..x.data().len()).step_by(7) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (f(&xp) - f(&xm)) / (2.0 * eps as f64);
            let an = analytic.data()[i] as f64;
            assert!((fd - an).abs() < 2e-3 * (1.0 + an.abs()), "index {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn instance_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut norm = InstanceNorm::new(2);
        norm.gamma = vec![1.3, 0.7];
        norm.beta = vec![0.1, -0.2];
        let x = rand_tensor([2, 2, 4, 4], &mut rng);
        let probe = rand_tensor([2, 2, 4, 4], &mut rng);
        let f = |x: &Tensor| {
            let (y, _) = norm.forward(x, false).unwrap();
            dot(&y, &probe)
        };
        let (_, cache) = norm.forward(&x, true).unwrap();
        let gx = norm.backward(&cache.unwrap(), &probe, None);
        finite_diff_check(&f, &x, &gx);
    }

    #[test]
    fn transposed_conv_weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let convt = ConvTranspose2d::new(Geometry::new(2, 3, 4, 2, 1), true, 0.5, &mut rng);
        let x = rand_tensor([2, 2, 3, 3], &mut rng);
        let probe = rand_tensor([2, 3, 6, 6], &mut rng);
        let (_, cache) = convt.forward(&x, true).unwrap();
        let mut grads = convt.zeros_like();
        convt.backward(&cache.unwrap(), &probe, Some(&mut grads), false);
        let eps = 1e-2f32;
        for i in 0..convt.weight.len() {
            let mut plus = convt.clone();
            plus.weight[i] += eps;
            let mut minus = convt.clone();
            minus.weight[i] -= eps;
            let fp = dot(&plus.forward(&x, false).unwrap().0, &probe);
            let fm = dot(&minus.forward(&x, false).unwrap().0, &probe);
            let fd = (fp - fm) / (2.0 * eps as f64);
            assert!((fd - grads.weight[i] as f64).abs() < 1e-3 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn output_sizes_follow_kernel_arithmetic() {
        let g = Geometry::new(1, 1, 4, 2, 1);
        assert_eq!(g.conv_out(64), Some(32));
        assert_eq!(g.transposed_out(32), Some(64));
        let g7 = Geometry::new(1, 1, 7, 1, 3);
        assert_eq!(g7.conv_out(64), Some(64));
        assert_eq!(g7.transposed_out(64), Some(64));
    }
}
