//! Dense rank-4 arrays and the numeric kernels every higher module composes.
//!
//! Layout is row-major `(batch, channel, height, width)`, double precision.
//! Coordinate convention throughout the crate: `x` is the column, `y` the
//! row, origin at the top-left pixel center.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, v: f64) -> Self {
        Tensor4 { n, c, h, w, data: vec![v; n * c * h * w] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor4 { n: 1, c: 1, h: 1, w: 1, data: vec![v] }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let i = self.idx(n, c, y, x);
        &mut self.data[i]
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(context.to_string()));
        }
        Ok(())
    }

    /// Rounds every value through f32, used by the single-precision mode.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PadMode {
    Zero,
    Reflect,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub pad_mode: PadMode,
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvSpec {
    pub fn new(k: usize, pad: usize, c_in: usize, c_out: usize) -> Self {
        ConvSpec { k_h: k, k_w: k, stride: 1, pad_mode: PadMode::Zero, pad, c_in, c_out }
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = h + 2 * self.pad;
        let ow = w + 2 * self.pad;
        if oh < self.k_h || ow < self.k_w {
            return Err(Error::Shape(format!("input {}x{} smaller than kernel", h, w)));
        }
        if (oh - self.k_h) % self.stride != 0 || (ow - self.k_w) % self.stride != 0 {
            return Err(Error::Shape(format!(
                "stride {} does not evenly divide padded input {}x{} with kernel {}x{}",
                self.stride, oh, ow, self.k_h, self.k_w
            )));
        }
        Ok(((oh - self.k_h) / self.stride + 1, (ow - self.k_w) / self.stride + 1))
    }
}

/// Spatial padding on both sides of both axes.
pub fn pad2d(x: &Tensor4, pad_h: usize, pad_w: usize, mode: PadMode) -> Tensor4 {
    pad2d_asym(x, pad_h, pad_h, pad_w, pad_w, mode)
}

/// Spatial padding with independent top/bottom/left/right amounts.
pub fn pad2d_asym(x: &Tensor4, top: usize, bottom: usize, left: usize, right: usize, mode: PadMode) -> Tensor4 {
    if top == 0 && bottom == 0 && left == 0 && right == 0 {
        return x.clone();
    }
    let (n, c, h, w) = x.shape();
    let mut out = Tensor4::zeros(n, c, h + top + bottom, w + left + right);
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..h + top + bottom {
                for ox in 0..w + left + right {
                    let sy = oy as isize - top as isize;
                    let sx = ox as isize - left as isize;
                    let v = match mode {
                        PadMode::Zero => {
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                0.0
                            } else {
                                x.at(ni, ci, sy as usize, sx as usize)
                            }
                        }
                        PadMode::Reflect => {
                            x.at(ni, ci, reflect_index(sy, h), reflect_index(sx, w))
                        }
                        PadMode::Replicate => x.at(
                            ni,
                            ci,
                            sy.clamp(0, h as isize - 1) as usize,
                            sx.clamp(0, w as isize - 1) as usize,
                        ),
                    };
                    *out.at_mut(ni, ci, oy, ox) = v;
                }
            }
        }
    }
    out
}

/// Reflection without repeating the border sample (`abcb a bcd c dcb`).
pub fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    debug_assert!(len > 0);
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut j = i.rem_euclid(period);
    if j >= len {
        j = period - j;
    }
    j as usize
}

/// Cross-correlation on an already padded input (valid convolution).
///
/// Per-output summation runs channel-major then kernel-row-major, which keeps
/// results bit-reproducible regardless of parallelism.
pub fn conv2d_valid(x: &Tensor4, weight: &Tensor4, bias: &[f64], stride: usize) -> Result<Tensor4> {
    let (n, c_in, h, w) = x.shape();
    let (c_out, wc_in, k_h, k_w) = weight.shape();
    if wc_in != c_in {
        return Err(Error::Shape(format!(
            "conv2d: input has {} channels, weight expects {}",
            c_in, wc_in
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Shape(format!("conv2d: bias length {} != c_out {}", bias.len(), c_out)));
    }
    if h < k_h || w < k_w {
        return Err(Error::Shape(format!("conv2d: input {}x{} smaller than kernel", h, w)));
    }
    if (h - k_h) % stride != 0 || (w - k_w) % stride != 0 {
        return Err(Error::Shape("conv2d: stride does not evenly divide input".into()));
    }
    let oh = (h - k_h) / stride + 1;
    let ow = (w - k_w) / stride + 1;
    let mut out = Tensor4::zeros(n, c_out, oh, ow);

    use rayon::prelude::*;
    let plane = oh * ow;
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(chunk, out_plane)| {
            let ni = chunk / c_out;
            let co = chunk % c_out;
            for v in out_plane.iter_mut() {
                *v = bias[co];
            }
            for ci in 0..c_in {
                for kh in 0..k_h {
                    for kw in 0..k_w {
                        let wv = weight.at(co, ci, kh, kw);
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let row = x.idx(ni, ci, oy * stride + kh, kw);
                            let src = &x.data[row..row + (ow - 1) * stride + 1];
                            let dst = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                for (d, s) in dst.iter_mut().zip(src.iter()) {
                                    *d += wv * *s;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += wv * src[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Standard cross-correlation with the padding described by `spec`.
pub fn conv2d(x: &Tensor4, weight: &Tensor4, bias: &[f64], spec: &ConvSpec) -> Result<Tensor4> {
    let (c_out, c_in, k_h, k_w) = weight.shape();
    if (c_out, c_in, k_h, k_w) != (spec.c_out, spec.c_in, spec.k_h, spec.k_w) {
        return Err(Error::Shape(format!(
            "conv2d: weight shape {:?} does not match spec ({},{},{},{})",
            weight.shape(),
            spec.c_out,
            spec.c_in,
            spec.k_h,
            spec.k_w
        )));
    }
    spec.out_size(x.h, x.w)?;
    let padded = pad2d(x, spec.pad, spec.pad, spec.pad_mode);
    conv2d_valid(&padded, weight, bias, spec.stride)
}

/// Per-pixel channel-mixing map: `out[n,:,y,x] = W x[n,:,y,x] + b`.
///
/// The weight is carried as a `(c_out, c_in, 1, 1)` tensor.
pub fn linear(x: &Tensor4, weight: &Tensor4, bias: &[f64]) -> Result<Tensor4> {
    let (n, c_in, h, w) = x.shape();
    let (c_out, wc_in, kh, kw) = weight.shape();
    if wc_in != c_in || kh != 1 || kw != 1 {
        return Err(Error::Shape(format!(
            "linear: weight {:?} incompatible with {} input channels",
            weight.shape(),
            c_in
        )));
    }
    if bias.len() != c_out {
        return Err(Error::Shape("linear: bias length mismatch".into()));
    }
    let plane = h * w;
    let mut out = Tensor4::zeros(n, c_out, h, w);
    for ni in 0..n {
        for co in 0..c_out {
            let dst_base = out.idx(ni, co, 0, 0);
            let dst = &mut out.data[dst_base..dst_base + plane];
            for v in dst.iter_mut() {
                *v = bias[co];
            }
            for ci in 0..c_in {
                let wv = weight.at(co, ci, 0, 0);
                if wv == 0.0 {
                    continue;
                }
                let src_base = ((ni * c_in + ci) * h) * w;
                let src = &x.data[src_base..src_base + plane];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += wv * *s;
                }
            }
        }
    }
    Ok(out)
}

/// Channel layer norm per spatial location, affine `gamma`/`beta`.
pub fn layer_norm(x: &Tensor4, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor4> {
    let (n, c, h, w) = x.shape();
    if c == 0 {
        return Err(Error::Shape("layer_norm: zero channels".into()));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape("layer_norm: gamma/beta length mismatch".into()));
    }
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for y in 0..h {
            for xi in 0..w {
                let mut mean = 0.0;
                for ci in 0..c {
                    mean += x.at(ni, ci, y, xi);
                }
                mean /= c as f64;
                let mut var = 0.0;
                for ci in 0..c {
                    let d = x.at(ni, ci, y, xi) - mean;
                    var += d * d;
                }
                var /= c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for ci in 0..c {
                    *out.at_mut(ni, ci, y, xi) =
                        gamma[ci] * (x.at(ni, ci, y, xi) - mean) * inv + beta[ci];
                }
            }
        }
    }
    Ok(out)
}

/// Numerically stable softmax of a score vector.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Shape("softmax: empty input".into()));
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

pub fn leaky_relu(x: &Tensor4, slope: f64) -> Tensor4 {
    let mut out = x.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    out
}

/// Bilinear read at a continuous coordinate, clamp-to-border outside.
#[inline]
pub fn bilinear_sample(x: &Tensor4, px: f64, py: f64, channel: usize, batch: usize) -> f64 {
    let max_x = (x.w - 1) as f64;
    let max_y = (x.h - 1) as f64;
    let cx = px.clamp(0.0, max_x);
    let cy = py.clamp(0.0, max_y);
    let x0 = cx.floor().min(max_x - 1.0).max(0.0);
    let y0 = cy.floor().min(max_y - 1.0).max(0.0);
    let fx = cx - x0;
    let fy = cy - y0;
    let (x0u, y0u) = (x0 as usize, y0 as usize);
    if x.w == 1 && x.h == 1 {
        return x.at(batch, channel, 0, 0);
    }
    let x1u = (x0u + 1).min(x.w - 1);
    let y1u = (y0u + 1).min(x.h - 1);
    let v00 = x.at(batch, channel, y0u, x0u);
    let v01 = x.at(batch, channel, y0u, x1u);
    let v10 = x.at(batch, channel, y1u, x0u);
    let v11 = x.at(batch, channel, y1u, x1u);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// `(n, c, h, w) -> (n, c/r^2, rh, rw)`; channel block `i*r + j` lands on
/// sub-pixel row `i`, column `j`.
pub fn pixel_shuffle(x: &Tensor4, r: usize) -> Result<Tensor4> {
    let (n, c, h, w) = x.shape();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Shape(format!("pixel_shuffle: {} channels not divisible by {}^2", c, r)));
    }
    let co = c / (r * r);
    let mut out = Tensor4::zeros(n, co, h * r, w * r);
    for ni in 0..n {
        for oc in 0..co {
            for i in 0..r {
                for j in 0..r {
                    let ic = oc * r * r + i * r + j;
                    for y in 0..h {
                        for xi in 0..w {
                            *out.at_mut(ni, oc, y * r + i, xi * r + j) = x.at(ni, ic, y, xi);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn pixel_unshuffle(x: &Tensor4, r: usize) -> Result<Tensor4> {
    let (n, c, h, w) = x.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("pixel_unshuffle: {}x{} not divisible by {}", h, w, r)));
    }
    let co = c * r * r;
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor4::zeros(n, co, oh, ow);
    for ni in 0..n {
        for ic in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let oc = ic * r * r + i * r + j;
                    for y in 0..oh {
                        for xi in 0..ow {
                            *out.at_mut(ni, oc, y, xi) = x.at(ni, ic, y * r + i, xi * r + j);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise helpers used across the crate.
pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!("add: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    for (o, v) in out.data.iter_mut().zip(b.data.iter()) {
        *o += *v;
    }
    Ok(out)
}

pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
    let first = parts.first().ok_or_else(|| Error::Shape("concat: empty".into()))?;
    let (n, _, h, w) = first.shape();
    let mut c_total = 0;
    for p in parts {
        if p.n != n || p.h != h || p.w != w {
            return Err(Error::Shape("concat: mismatched shapes".into()));
        }
        c_total += p.c;
    }
    let mut out = Tensor4::zeros(n, c_total, h, w);
    let plane = h * w;
    for ni in 0..n {
        let mut co = 0;
        for p in parts {
            for ci in 0..p.c {
                let src = p.idx(ni, ci, 0, 0);
                let dst = out.idx(ni, co, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&p.data[src..src + plane]);
                co += 1;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_close, rng_tensor};
    use proptest::prelude::*;

    /// Naive six-nested-loop convolution used as the independent oracle.
    fn conv2d_loop(x: &Tensor4, weight: &Tensor4, bias: &[f64], spec: &ConvSpec) -> Tensor4 {
        let padded = pad2d(x, spec.pad, spec.pad, spec.pad_mode);
        let (n, c_in, h, w) = padded.shape();
        let (c_out, _, k_h, k_w) = weight.shape();
        let oh = (h - k_h) / spec.stride + 1;
        let ow = (w - k_w) / spec.stride + 1;
        let mut out = Tensor4::zeros(n, c_out, oh, ow);
        for ni in 0..n {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for kh in 0..k_h {
                                for kw in 0..k_w {
                                    acc += weight.at(co, ci, kh, kw)
                                        * padded.at(ni, ci, oy * spec.stride + kh, ox * spec.stride + kw);
                                }
                            }
                        }
                        *out.at_mut(ni, co, oy, ox) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_counts_overlap() {
        let x = Tensor4::full(1, 1, 3, 3, 1.0);
        let w = Tensor4::full(1, 1, 3, 3, 1.0);
        let spec = ConvSpec::new(3, 1, 1, 1);
        let y = conv2d(&x, &w, &[0.0], &spec).unwrap();
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_eq!(y.at(0, 0, 2, 2), 4.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = rng_tensor(1, 2, 5, 4, 1);
        let mut w = Tensor4::zeros(2, 2, 1, 1);
        *w.at_mut(0, 0, 0, 0) = 1.0;
        *w.at_mut(1, 1, 0, 0) = 1.0;
        let spec = ConvSpec::new(1, 0, 2, 2);
        let y = conv2d(&x, &w, &[0.0, 0.0], &spec).unwrap();
        assert_eq!(y.data, x.data);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let x = rng_tensor(1, 2, 5, 5, 7);
        let w = rng_tensor(3, 2, 3, 3, 8);
        let bias = [0.11, -0.2, 0.05];
        let spec = ConvSpec::new(3, 1, 2, 3);
        let got = conv2d(&x, &w, &bias, &spec).unwrap();
        let want = conv2d_loop(&x, &w, &bias, &spec);
        assert_close(&got.data, &want.data, 1e-12);
    }

    #[test]
    fn conv_rejects_bad_stride() {
        let x = Tensor4::zeros(1, 1, 5, 5);
        let w = Tensor4::zeros(1, 1, 2, 2);
        let spec = ConvSpec { k_h: 2, k_w: 2, stride: 2, pad_mode: PadMode::Zero, pad: 0, c_in: 1, c_out: 1 };
        assert!(conv2d(&x, &w, &[0.0], &spec).is_err());
    }

    #[test]
    fn linear_identity_and_sum() {
        let x = rng_tensor(1, 2, 3, 3, 2);
        let mut w = Tensor4::zeros(2, 2, 1, 1);
        *w.at_mut(0, 0, 0, 0) = 1.0;
        *w.at_mut(1, 1, 0, 0) = 1.0;
        let y = linear(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(y.data, x.data);

        let x2 = Tensor4::from_vec(1, 2, 1, 1, vec![2.0, 3.0]).unwrap();
        let w2 = Tensor4::from_vec(1, 2, 1, 1, vec![1.0, 1.0]).unwrap();
        let y2 = linear(&x2, &w2, &[0.0]).unwrap();
        assert_eq!(y2.data, vec![5.0]);
    }

    #[test]
    fn linear_matches_loop_oracle() {
        let x = rng_tensor(2, 3, 4, 4, 3);
        let w = rng_tensor(5, 3, 1, 1, 4);
        let bias = [0.1, 0.2, 0.3, -0.1, 0.0];
        let got = linear(&x, &w, &bias).unwrap();
        let mut want = Tensor4::zeros(2, 5, 4, 4);
        for ni in 0..2 {
            for co in 0..5 {
                for y in 0..4 {
                    for xi in 0..4 {
                        let mut acc = bias[co];
                        for ci in 0..3 {
                            acc += w.at(co, ci, 0, 0) * x.at(ni, ci, y, xi);
                        }
                        *want.at_mut(ni, co, y, xi) = acc;
                    }
                }
            }
        }
        assert_close(&got.data, &want.data, 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        // Constant channels: zero variance, output all zero.
        let x = Tensor4::full(1, 3, 2, 2, 5.0);
        let y = layer_norm(&x, &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert!(y.data.iter().all(|v| v.abs() < 1e-12));

        // Two channels (1, 3): variance 1, eps-perturbed.
        let x = Tensor4::from_vec(1, 2, 1, 1, vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 2], &[0.0; 2], 1e-5).unwrap();
        assert!((y.data[0] + 1.0).abs() < 1e-4, "{:?}", y.data);
        assert!((y.data[1] - 1.0).abs() < 1e-4);

        // Beta only.
        let x = rng_tensor(1, 2, 2, 2, 5);
        let y = layer_norm(&x, &[0.0; 2], &[0.7, -0.3], 1e-5).unwrap();
        for yy in 0..2 {
            for xx in 0..2 {
                assert_eq!(y.at(0, 0, yy, xx), 0.7);
                assert_eq!(y.at(0, 1, yy, xx), -0.3);
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&[0.0, 0.0]).unwrap();
        assert_close(&s, &[0.5, 0.5], 1e-15);
        let s = softmax(&[2.0_f64.ln(), 0.0]).unwrap();
        assert_close(&s, &[2.0 / 3.0, 1.0 / 3.0], 1e-12);
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!(s[0] > 1.0 - 1e-9 && s[1] < 1e-9);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn leaky_relu_cases() {
        let x = Tensor4::from_vec(1, 1, 1, 3, vec![2.0, -2.0, 0.0]).unwrap();
        let y = leaky_relu(&x, 0.1);
        assert_eq!(y.data, vec![2.0, -0.2, 0.0]);
    }

    #[test]
    fn bilinear_cases() {
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(bilinear_sample(&x, 0.5, 0.5, 0, 0), 1.5);
        assert_eq!(bilinear_sample(&x, 1.0, 0.0, 0, 0), 1.0);
        assert_eq!(bilinear_sample(&x, -5.0, 0.0, 0, 0), 0.0);
        assert_eq!(bilinear_sample(&x, 10.0, 10.0, 0, 0), 3.0);
    }

    #[test]
    fn pixel_shuffle_layout() {
        let x = Tensor4::from_vec(1, 4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), (1, 1, 2, 2));
        assert_eq!(y.data, vec![1.0, 2.0, 3.0, 4.0]);

        let x = rng_tensor(2, 16, 3, 5, 9);
        let y = pixel_shuffle(&x, 4).unwrap();
        assert_eq!(y.shape(), (2, 1, 12, 20));

        assert!(pixel_shuffle(&Tensor4::zeros(1, 3, 2, 2), 2).is_err());
    }

    #[test]
    fn reflect_pad_matches_convention() {
        let x = Tensor4::from_vec(1, 1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pad2d(&x, 0, 2, PadMode::Reflect);
        assert_eq!(y.data, vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 2.0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in proptest::collection::vec(-50.0_f64..50.0, 1..20)) {
            let s = softmax(&v).unwrap();
            let sum: f64 = s.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(s.iter().all(|x| *x > 0.0));
        }

        #[test]
        fn shuffle_unshuffle_roundtrip(seed in 0u64..50, r in 1usize..4, h in 1usize..5, w in 1usize..5, c in 1usize..3) {
            let x = rng_tensor(1, c * r * r, h, w, seed);
            let y = pixel_shuffle(&x, r).unwrap();
            let back = pixel_unshuffle(&y, r).unwrap();
            prop_assert_eq!(back.data, x.data);
        }

        #[test]
        fn conv_agrees_with_oracle_randomized(seed in 0u64..20) {
            let x = rng_tensor(2, 3, 8, 8, seed);
            let w = rng_tensor(4, 3, 3, 3, seed + 1000);
            let bias = [0.3, -0.1, 0.0, 0.2];
            for mode in [PadMode::Zero, PadMode::Reflect, PadMode::Replicate] {
                let spec = ConvSpec { k_h: 3, k_w: 3, stride: 1, pad_mode: mode, pad: 1, c_in: 3, c_out: 4 };
                let got = conv2d(&x, &w, &bias, &spec).unwrap();
                let want = conv2d_loop(&x, &w, &bias, &spec);
                for (g, t) in got.data.iter().zip(want.data.iter()) {
                    prop_assert!((g - t).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn bilinear_linear_along_axes(fx in 0.0_f64..1.0) {
            let x = rng_tensor(1, 1, 3, 3, 11);
            let v0 = bilinear_sample(&x, 0.0, 1.0, 0, 0);
            let v1 = bilinear_sample(&x, 1.0, 1.0, 0, 0);
            let v = bilinear_sample(&x, fx, 1.0, 0, 0);
            prop_assert!((v - (v0 * (1.0 - fx) + v1 * fx)).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_mean_var_invariant() {
        let x = rng_tensor(1, 8, 4, 4, 21);
        let y = layer_norm(&x, &[1.0; 8], &[0.0; 8], 1e-5).unwrap();
        for yy in 0..4 {
            for xx in 0..4 {
                let mean: f64 = (0..8).map(|c| y.at(0, c, yy, xx)).sum::<f64>() / 8.0;
                let var: f64 = (0..8).map(|c| (y.at(0, c, yy, xx) - mean).powi(2)).sum::<f64>() / 8.0;
                assert!(mean.abs() < 1e-9);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }
}
