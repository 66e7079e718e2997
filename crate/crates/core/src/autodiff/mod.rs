//! Fixed-pipeline reverse-mode differentiation.
//!
//! Every forward operation records a node on a [`Tape`]; [`Tape::backward`]
//! replays the nodes in reverse and accumulates analytic gradients for every
//! leaf. Saved intermediates are kept by value on the tape, so a tape is
//! confined to one logical execution stream.

pub mod gradcheck;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvSpec, PadMode, Tensor4};

pub type NodeId = usize;

/// Kernel grid offsets for a k x k deformable window, row-major, centered.
pub fn kernel_grid(k: usize) -> Vec<(isize, isize)> {
    let half = (k / 2) as isize;
    let mut g = Vec::with_capacity(k * k);
    for r in 0..k as isize {
        for s in 0..k as isize {
            g.push((s - half, r - half)); // (gx, gy)
        }
    }
    g
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatC(Vec<NodeId>),
    SliceC { x: NodeId, start: usize, len: usize },
    Pad { x: NodeId, top: usize, bottom: usize, left: usize, right: usize, mode: PadMode },
    Crop { x: NodeId, y0: usize, x0: usize, oh: usize, ow: usize },
    ConvValid { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    SoftmaxC { x: NodeId },
    LeakyRelu { x: NodeId, slope: f64 },
    Sigmoid { x: NodeId },
    PixelShuffle { x: NodeId, r: usize },
    PixelUnshuffle { x: NodeId, r: usize },
    Roll { x: NodeId, dy: isize, dx: isize },
    WindowPartition { x: NodeId, ws: usize },
    WindowReverse { x: NodeId, ws: usize },
    Reshape { x: NodeId },
    WindowAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        attn: Vec<f64>,
    },
    DeformGather { x: NodeId, offsets: NodeId, k: usize, mask: Option<NodeId> },
    StdfaPair {
        q: NodeId,
        key: NodeId,
        val: NodeId,
        offsets: NodeId,
        k: usize,
        t_sel: usize,
        scale: f64,
        selection: Vec<u32>,
        weights: Vec<f64>,
    },
    TemporalCombine { scores: Vec<NodeId>, values: Vec<NodeId> },
    Charbonnier { a: NodeId, b: NodeId, eps: f64 },
    SumAll { x: NodeId },
    DotConst { x: NodeId, proj: Arc<Tensor4> },
}

struct Node {
    value: Tensor4,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor4>>,
    backward_done: bool,
    /// Single-precision emulation: round every node value through f32.
    pub round_f32: bool,
    /// Smallest observed gap between the last selected and best unselected
    /// relevance score (finite-difference safety diagnostic).
    pub min_select_gap: f64,
    /// Smallest observed distance from a bilinear sample coordinate to a
    /// kink of the sampling function (integer grid line or clamp boundary).
    pub min_coord_margin: f64,
    /// Smallest observed |pre-activation| at a LeakyReLU.
    pub min_activation_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            round_f32: false,
            min_select_gap: f64::INFINITY,
            min_coord_margin: f64::INFINITY,
            min_activation_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor4 {
        &self.nodes[id].value
    }

    fn push(&mut self, mut value: Tensor4, op: Op, context: &str) -> Result<NodeId> {
        if self.round_f32 {
            value.round_to_f32();
        }
        value.check_finite(context)?;
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Ok(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor4) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::add(self.value(a), self.value(b))?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let vb = self.value(b);
        if !va.same_shape(vb) {
            return Err(Error::Shape("sub: shape mismatch".into()));
        }
        let mut v = va.clone();
        for (o, x) in v.data.iter_mut().zip(vb.data.iter()) {
            *o -= *x;
        }
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        for x in &mut v.data {
            *x *= s;
        }
        self.push(v, Op::Scale(a, s), "scale")
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor4> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat_channels(&vals)?;
        self.push(v, Op::ConcatC(parts.to_vec()), "concat")
    }

    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.shape();
        if start + len > c {
            return Err(Error::Shape("slice: out of range".into()));
        }
        let mut v = Tensor4::zeros(n, len, h, w);
        let plane = h * w;
        for ni in 0..n {
            for ci in 0..len {
                let src = xv.idx(ni, start + ci, 0, 0);
                let dst = v.idx(ni, ci, 0, 0);
                v.data[dst..dst + plane].copy_from_slice(&xv.data[src..src + plane]);
            }
        }
        self.push(v, Op::SliceC { x, start, len }, "slice")
    }

    pub fn pad(&mut self, x: NodeId, pad: usize, mode: PadMode) -> Result<NodeId> {
        self.pad_asym(x, pad, pad, pad, pad, mode)
    }

    pub fn pad_asym(
        &mut self,
        x: NodeId,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
        mode: PadMode,
    ) -> Result<NodeId> {
        let v = tensor::pad2d_asym(self.value(x), top, bottom, left, right, mode);
        self.push(v, Op::Pad { x, top, bottom, left, right, mode }, "pad")
    }

    pub fn crop(&mut self, x: NodeId, y0: usize, x0: usize, oh: usize, ow: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.shape();
        if y0 + oh > h || x0 + ow > w {
            return Err(Error::Shape("crop: out of range".into()));
        }
        let mut v = Tensor4::zeros(n, c, oh, ow);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..oh {
                    let src = xv.idx(ni, ci, y0 + y, x0);
                    let dst = v.idx(ni, ci, y, 0);
                    v.data[dst..dst + ow].copy_from_slice(&xv.data[src..src + ow]);
                }
            }
        }
        self.push(v, Op::Crop { x, y0, x0, oh, ow }, "crop")
    }

    /// Padding + valid cross-correlation per `spec`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let px = if spec.pad > 0 { self.pad(x, spec.pad, spec.pad_mode)? } else { x };
        let v = tensor::conv2d_valid(self.value(px), self.value(w), &self.value(b).data, spec.stride)?;
        self.push(v, Op::ConvValid { x: px, w, b, stride: spec.stride }, "conv2d")
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::linear(self.value(x), self.value(w), &self.value(b).data)?;
        self.push(v, Op::Linear { x, w, b }, "linear")
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let v = tensor::layer_norm(self.value(x), &self.value(gamma).data, &self.value(beta).data, eps)?;
        self.push(v, Op::LayerNorm { x, gamma, beta, eps }, "layer_norm")
    }

    /// Softmax over the channel dimension at each spatial location.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, c, h, w) = xv.shape();
        if c == 0 {
            return Err(Error::Shape("softmax: zero channels".into()));
        }
        let mut v = Tensor4::zeros(n, c, h, w);
        let mut buf = vec![0.0; c];
        for ni in 0..n {
            for y in 0..h {
                for xi in 0..w {
                    for ci in 0..c {
                        buf[ci] = xv.at(ni, ci, y, xi);
                    }
                    let s = tensor::softmax(&buf)?;
                    for ci in 0..c {
                        *v.at_mut(ni, ci, y, xi) = s[ci];
                    }
                }
            }
        }
        self.push(v, Op::SoftmaxC { x }, "softmax")
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        let margin = self.value(x).data.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.min_activation_margin = self.min_activation_margin.min(margin);
        let v = tensor::leaky_relu(self.value(x), slope);
        self.push(v, Op::LeakyRelu { x, slope }, "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = 1.0 / (1.0 + (-*e).exp());
        }
        self.push(v, Op::Sigmoid { x }, "sigmoid")
    }

    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = tensor::pixel_shuffle(self.value(x), r)?;
        self.push(v, Op::PixelShuffle { x, r }, "pixel_shuffle")
    }

    pub fn pixel_unshuffle(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = tensor::pixel_unshuffle(self.value(x), r)?;
        self.push(v, Op::PixelUnshuffle { x, r }, "pixel_unshuffle")
    }

    /// Cyclic roll; positive shifts move content down/right.
    pub fn roll(&mut self, x: NodeId, dy: isize, dx: isize) -> Result<NodeId> {
        let v = roll_tensor(self.value(x), dy, dx);
        self.push(v, Op::Roll { x, dy, dx }, "roll")
    }

    /// `(n, c, h, w) -> (n*num_windows, c, ws, ws)`, windows row-major.
    pub fn window_partition(&mut self, x: NodeId, ws: usize) -> Result<NodeId> {
        let v = window_partition_tensor(self.value(x), ws)?;
        self.push(v, Op::WindowPartition { x, ws }, "window_partition")
    }

    pub fn window_reverse(&mut self, x: NodeId, ws: usize, n: usize, h: usize, w: usize) -> Result<NodeId> {
        let v = window_reverse_tensor(self.value(x), ws, n, h, w)?;
        let _ = (n, h, w);
        self.push(v, Op::WindowReverse { x, ws }, "window_reverse")
    }

    /// Reinterprets the buffer with a new shape of identical length.
    pub fn reshape(&mut self, x: NodeId, n: usize, c: usize, h: usize, w: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != n * c * h * w {
            return Err(Error::Shape("reshape: length mismatch".into()));
        }
        let v = Tensor4 { n, c, h, w, data: xv.data.clone() };
        self.push(v, Op::Reshape { x }, "reshape")
    }

    /// Multi-head self-attention over the `ws*ws` tokens of each window.
    ///
    /// `q`, `k`, `v` are `(n*nw, c, ws, ws)`; `mask` is an additive
    /// per-window `L*L` bias (the cyclic-shift mask), indexed by
    /// `batch % windows_per_image`.
    pub fn window_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: Option<Arc<Vec<f64>>>,
        windows_per_image: usize,
    ) -> Result<NodeId> {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        if !qv.same_shape(kv) || !qv.same_shape(vv) {
            return Err(Error::Shape("attention: q/k/v shape mismatch".into()));
        }
        let (bsz, c, wh, ww) = qv.shape();
        if heads == 0 || c % heads != 0 {
            return Err(Error::Shape(format!("attention: {} channels not divisible by {} heads", c, heads)));
        }
        let l = wh * ww;
        if let Some(m) = &mask {
            if m.len() != windows_per_image * l * l {
                return Err(Error::Shape("attention: mask size mismatch".into()));
            }
        }
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Tensor4::zeros(bsz, c, wh, ww);
        let mut attn = vec![0.0; bsz * heads * l * l];
        let mut row = vec![0.0; l];
        for b in 0..bsz {
            let wi = b % windows_per_image;
            for hd in 0..heads {
                for t1 in 0..l {
                    for (t2, r) in row.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for di in 0..d {
                            let ch = hd * d + di;
                            s += qv.data[qv.idx(b, ch, t1 / ww, t1 % ww)]
                                * kv.data[kv.idx(b, ch, t2 / ww, t2 % ww)];
                        }
                        s *= scale;
                        if let Some(m) = &mask {
                            s += m[(wi * l + t1) * l + t2];
                        }
                        *r = s;
                    }
                    let sm = tensor::softmax(&row)?;
                    let base = ((b * heads + hd) * l + t1) * l;
                    attn[base..base + l].copy_from_slice(&sm);
                    for di in 0..d {
                        let ch = hd * d + di;
                        let mut acc = 0.0;
                        for t2 in 0..l {
                            acc += sm[t2] * vv.data[vv.idx(b, ch, t2 / ww, t2 % ww)];
                        }
                        *out.at_mut(b, ch, t1 / ww, t1 % ww) = acc;
                    }
                }
            }
        }
        let _ = (mask, windows_per_image);
        self.push(out, Op::WindowAttention { q, k, v, heads, attn }, "attention")
    }

    /// Deformable sampling: for each position and each of the `k*k` grid
    /// locations, reads `x` bilinearly at `p + grid + offset`. Output packs
    /// channels as `ci * k^2 + xi`. `mask` (pre-sigmoid, `k^2` channels)
    /// modulates each sampled value when present.
    pub fn deform_gather(&mut self, x: NodeId, offsets: NodeId, k: usize, mask: Option<NodeId>) -> Result<NodeId> {
        let xv = self.value(x);
        let ov = self.value(offsets);
        let (n, c, h, w) = xv.shape();
        if ov.shape() != (n, 2 * k * k, h, w) {
            return Err(Error::Shape(format!(
                "deform_gather: offsets {:?}, expected ({}, {}, {}, {})",
                ov.shape(),
                n,
                2 * k * k,
                h,
                w
            )));
        }
        if let Some(m) = mask {
            let mv = self.value(m);
            if mv.shape() != (n, k * k, h, w) {
                return Err(Error::Shape("deform_gather: mask shape mismatch".into()));
            }
        }
        let grid = kernel_grid(k);
        let mut out = Tensor4::zeros(n, c * k * k, h, w);
        let mut coord_margin = f64::INFINITY;
        for ni in 0..n {
            for y in 0..h {
                for xi in 0..w {
                    for (g, &(gx, gy)) in grid.iter().enumerate() {
                        let px = xi as f64 + gx as f64 + ov.at(ni, 2 * g, y, xi);
                        let py = y as f64 + gy as f64 + ov.at(ni, 2 * g + 1, y, xi);
                        coord_margin = coord_margin.min(kink_margin(px, w)).min(kink_margin(py, h));
                        let mod_s = match mask {
                            Some(m) => {
                                let raw = self.value(m).at(ni, g, y, xi);
                                1.0 / (1.0 + (-raw).exp())
                            }
                            None => 1.0,
                        };
                        for ci in 0..c {
                            *out.at_mut(ni, ci * k * k + g, y, xi) =
                                mod_s * tensor::bilinear_sample(xv, px, py, ci, ni);
                        }
                    }
                }
            }
        }
        self.min_coord_margin = self.min_coord_margin.min(coord_margin);
        self.push(out, Op::DeformGather { x, offsets, k, mask }, "deform_gather")
    }

    /// One cross-frame deformable-attention pair: relevance-scored sampling
    /// of `key`/`val` around each query position, top-T selection, softmax
    /// weighting, and the updated relevance map.
    ///
    /// Output is `(n, c_e + 1, h, w)`: channels `0..c_e` hold the aggregated
    /// value vector, the last channel holds the relevance map entry.
    /// Selection is treated as a constant discrete choice during backward.
    pub fn stdfa_pair(
        &mut self,
        q: NodeId,
        key: NodeId,
        val: NodeId,
        offsets: NodeId,
        k: usize,
        t_sel: usize,
        scale_scores: bool,
    ) -> Result<NodeId> {
        let qv = self.value(q);
        let kv = self.value(key);
        let vv = self.value(val);
        let ov = self.value(offsets);
        if !qv.same_shape(kv) || !qv.same_shape(vv) {
            return Err(Error::Shape("stdfa_pair: q/k/v shape mismatch".into()));
        }
        let (n, ce, h, w) = qv.shape();
        if t_sel == 0 || t_sel > k * k {
            return Err(Error::Shape(format!("stdfa_pair: T={} invalid for k={}", t_sel, k)));
        }
        if ov.shape() != (n, 2 * k * k, h, w) {
            return Err(Error::Shape("stdfa_pair: offsets shape mismatch".into()));
        }
        let scale = if scale_scores { 1.0 / (ce as f64).sqrt() } else { 1.0 };
        let grid = kernel_grid(k);
        let mut out = Tensor4::zeros(n, ce + 1, h, w);
        let mut selection = Vec::with_capacity(n * h * w * t_sel);
        let mut weights = Vec::with_capacity(n * h * w * t_sel);
        let mut scores = vec![0.0; k * k];
        let mut clamped = vec![(0.0, 0.0); k * k];
        let mut coord_margin = f64::INFINITY;
        let mut select_gap = f64::INFINITY;
        for ni in 0..n {
            for y in 0..h {
                for xi in 0..w {
                    for (g, &(gx, gy)) in grid.iter().enumerate() {
                        let px = xi as f64 + gx as f64 + ov.at(ni, 2 * g, y, xi);
                        let py = y as f64 + gy as f64 + ov.at(ni, 2 * g + 1, y, xi);
                        coord_margin = coord_margin.min(kink_margin(px, w)).min(kink_margin(py, h));
                        clamped[g] = (px.clamp(0.0, (w - 1) as f64), py.clamp(0.0, (h - 1) as f64));
                        let mut s = 0.0;
                        for c in 0..ce {
                            s += qv.at(ni, c, y, xi) * tensor::bilinear_sample(kv, px, py, c, ni);
                        }
                        scores[g] = s * scale;
                    }
                    let sel = crate::stdfa::select_top_t(&scores, t_sel)?;
                    if t_sel < k * k {
                        // A dropped point that lands on the same clamped
                        // coordinate as a kept one has an identical score
                        // under any perturbation, so it cannot flip the
                        // selection; ignore it for the tie-gap diagnostic.
                        let worst_kept = scores[sel[t_sel - 1]];
                        let best_dropped = scores
                            .iter()
                            .enumerate()
                            .filter(|(g, _)| {
                                !sel.contains(g)
                                    && !sel.iter().any(|&s| clamped[s] == clamped[*g])
                            })
                            .map(|(_, s)| *s)
                            .fold(f64::NEG_INFINITY, f64::max);
                        if best_dropped > f64::NEG_INFINITY {
                            select_gap = select_gap.min(worst_kept - best_dropped);
                        }
                    }
                    let picked: Vec<f64> = sel.iter().map(|&g| scores[g]).collect();
                    let wsel = tensor::softmax(&picked)?;
                    let mut kagg = vec![0.0; ce];
                    for (slot, &g) in sel.iter().enumerate() {
                        let (gx, gy) = grid[g];
                        let px = xi as f64 + gx as f64 + ov.at(ni, 2 * g, y, xi);
                        let py = y as f64 + gy as f64 + ov.at(ni, 2 * g + 1, y, xi);
                        for c in 0..ce {
                            let ks = tensor::bilinear_sample(kv, px, py, c, ni);
                            let vs = tensor::bilinear_sample(vv, px, py, c, ni);
                            kagg[c] += wsel[slot] * ks;
                            *out.at_mut(ni, c, y, xi) += wsel[slot] * vs;
                        }
                        selection.push(g as u32);
                        weights.push(wsel[slot]);
                    }
                    let mut wmap = 0.0;
                    for c in 0..ce {
                        wmap += qv.at(ni, c, y, xi) * kagg[c];
                    }
                    *out.at_mut(ni, ce, y, xi) = wmap * scale;
                }
            }
        }
        self.min_coord_margin = self.min_coord_margin.min(coord_margin);
        self.min_select_gap = self.min_select_gap.min(select_gap);
        self.push(
            out,
            Op::StdfaPair { q, key, val, offsets, k, t_sel, scale, selection, weights },
            "stdfa_pair",
        )
    }

    /// Temporal aggregation: softmax over the per-source relevance maps,
    /// then the weighted sum of the per-source aggregated values.
    pub fn temporal_combine(&mut self, scores: &[NodeId], values: &[NodeId]) -> Result<NodeId> {
        if scores.is_empty() || scores.len() != values.len() {
            return Err(Error::Shape("temporal_combine: need at least one source".into()));
        }
        let (n, _, h, w) = self.value(scores[0]).shape();
        let (_, ce, _, _) = self.value(values[0]).shape();
        for (&s, &v) in scores.iter().zip(values.iter()) {
            if self.value(s).shape() != (n, 1, h, w) || self.value(v).shape() != (n, ce, h, w) {
                return Err(Error::Shape("temporal_combine: shape mismatch".into()));
            }
        }
        let j_count = scores.len();
        let mut out = Tensor4::zeros(n, ce, h, w);
        let mut buf = vec![0.0; j_count];
        for ni in 0..n {
            for y in 0..h {
                for xi in 0..w {
                    for (j, &s) in scores.iter().enumerate() {
                        buf[j] = self.value(s).at(ni, 0, y, xi);
                    }
                    let sm = tensor::softmax(&buf)?;
                    for (j, &v) in values.iter().enumerate() {
                        let vv = self.value(v);
                        for c in 0..ce {
                            *out.at_mut(ni, c, y, xi) += sm[j] * vv.at(ni, c, y, xi);
                        }
                    }
                }
            }
        }
        self.push(out, Op::TemporalCombine { scores: scores.to_vec(), values: values.to_vec() }, "temporal_combine")
    }

    /// Mean Charbonnier penalty `mean(sqrt((a-b)^2 + eps^2))` as a scalar node.
    pub fn charbonnier(&mut self, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        if !av.same_shape(bv) {
            return Err(Error::Shape("charbonnier: shape mismatch".into()));
        }
        let mut acc = 0.0;
        let mut first = f64::NAN;
        let mut uniform = true;
        for (i, (x, y)) in av.data.iter().zip(bv.data.iter()).enumerate() {
            let d = x - y;
            let term = (d * d + eps * eps).sqrt();
            if i == 0 {
                first = term;
            } else if term != first {
                uniform = false;
            }
            acc += term;
        }
        // The mean of identical terms is that term; take it directly so the
        // summation round-off cannot perturb it.
        let mean = if uniform { first } else { acc / av.len() as f64 };
        let v = Tensor4::scalar(mean);
        self.push(v, Op::Charbonnier { a, b, eps }, "charbonnier")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor4::scalar(self.value(x).data.iter().sum());
        self.push(v, Op::SumAll { x }, "sum")
    }

    /// Scalar projection against a fixed tensor; gradcheck-style loss head.
    pub fn dot_const(&mut self, x: NodeId, proj: Arc<Tensor4>) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.same_shape(&proj) {
            return Err(Error::Shape("dot_const: shape mismatch".into()));
        }
        let v = Tensor4::scalar(xv.data.iter().zip(proj.data.iter()).map(|(a, b)| a * b).sum());
        self.push(v, Op::DotConst { x, proj }, "dot_const")
    }

    /// Reverse pass from a scalar loss node. Each tape may run backward once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Autodiff("backward called on an empty tape".into()));
        }
        if self.backward_done {
            return Err(Error::Autodiff("tape replayed twice without reset".into()));
        }
        if self.value(loss).shape() != (1, 1, 1, 1) {
            return Err(Error::Autodiff("backward requires a scalar loss node".into()));
        }
        self.backward_done = true;
        self.grads[loss] = Some(Tensor4::scalar(1.0));
        for i in (0..=loss).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of a node after backward; zero tensor if never touched.
    pub fn grad(&self, id: NodeId) -> Tensor4 {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => {
                let (n, c, h, w) = self.value(id).shape();
                Tensor4::zeros(n, c, h, w)
            }
        }
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn accumulate(&mut self, id: NodeId, delta: &Tensor4) {
        match &mut self.grads[id] {
            Some(g) => {
                for (a, b) in g.data.iter_mut().zip(delta.data.iter()) {
                    *a += *b;
                }
            }
            None => self.grads[id] = Some(delta.clone()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&mut self, id: NodeId, g: &Tensor4) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g);
                let mut neg = g.clone();
                for v in &mut neg.data {
                    *v = -*v;
                }
                self.accumulate(b, &neg);
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                for v in &mut d.data {
                    *v *= s;
                }
                self.accumulate(a, &d);
            }
            Op::ConcatC(parts) => {
                let (n, _, h, w) = g.shape();
                let plane = h * w;
                let mut start = 0;
                for p in parts {
                    let pc = self.value(p).c;
                    let mut d = Tensor4::zeros(n, pc, h, w);
                    for ni in 0..n {
                        for ci in 0..pc {
                            let src = g.idx(ni, start + ci, 0, 0);
                            let dst = d.idx(ni, ci, 0, 0);
                            d.data[dst..dst + plane].copy_from_slice(&g.data[src..src + plane]);
                        }
                    }
                    self.accumulate(p, &d);
                    start += pc;
                }
            }
            Op::SliceC { x, start, len } => {
                let (n, c, h, w) = self.value(x).shape();
                let plane = h * w;
                let mut d = Tensor4::zeros(n, c, h, w);
                for ni in 0..n {
                    for ci in 0..len {
                        let src = g.idx(ni, ci, 0, 0);
                        let dst = d.idx(ni, start + ci, 0, 0);
                        d.data[dst..dst + plane].copy_from_slice(&g.data[src..src + plane]);
                    }
                }
                self.accumulate(x, &d);
            }
            Op::Pad { x, top, bottom, left, right, mode } => {
                let (n, c, h, w) = self.value(x).shape();
                let mut d = Tensor4::zeros(n, c, h, w);
                for ni in 0..n {
                    for ci in 0..c {
                        for oy in 0..h + top + bottom {
                            for ox in 0..w + left + right {
                                let gv = g.at(ni, ci, oy, ox);
                                if gv == 0.0 {
                                    continue;
                                }
                                let sy = oy as isize - top as isize;
                                let sx = ox as isize - left as isize;
                                match mode {
                                    PadMode::Zero => {
                                        if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                            *d.at_mut(ni, ci, sy as usize, sx as usize) += gv;
                                        }
                                    }
                                    PadMode::Reflect => {
                                        *d.at_mut(ni, ci, tensor::reflect_index(sy, h), tensor::reflect_index(sx, w)) += gv;
                                    }
                                    PadMode::Replicate => {
                                        *d.at_mut(
                                            ni,
                                            ci,
                                            sy.clamp(0, h as isize - 1) as usize,
                                            sx.clamp(0, w as isize - 1) as usize,
                                        ) += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &d);
            }
            Op::Crop { x, y0, x0, oh, ow } => {
                let (n, c, h, w) = self.value(x).shape();
                let mut d = Tensor4::zeros(n, c, h, w);
                for ni in 0..n {
                    for ci in 0..c {
                        for y in 0..oh {
                            let src = g.idx(ni, ci, y, 0);
                            let dst = d.idx(ni, ci, y0 + y, x0);
                            d.data[dst..dst + ow].copy_from_slice(&g.data[src..src + ow]);
                        }
                    }
                }
                self.accumulate(x, &d);
            }
            Op::ConvValid { x, w, b, stride } => {
                let xv = self.value(x).clone();
                let wv = self.value(w).clone();
                let (n, c_in, _, _) = xv.shape();
                let (c_out, _, k_h, k_w) = wv.shape();
                let (_, _, oh, ow) = g.shape();
                let mut dx = Tensor4::zeros(xv.n, xv.c, xv.h, xv.w);
                let mut dw = Tensor4::zeros(wv.n, wv.c, wv.h, wv.w);
                let mut db = Tensor4::zeros(c_out, 1, 1, 1);
                for ni in 0..n {
                    for co in 0..c_out {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.at(ni, co, oy, ox);
                                if gv == 0.0 {
                                    continue;
                                }
                                db.data[co] += gv;
                                for ci in 0..c_in {
                                    for kh in 0..k_h {
                                        let iy = oy * stride + kh;
                                        let xrow = xv.idx(ni, ci, iy, ox * stride);
                                        let drow = dx.idx(ni, ci, iy, ox * stride);
                                        let wrow = wv.idx(co, ci, kh, 0);
                                        for kw in 0..k_w {
                                            dw.data[wrow + kw] += gv * xv.data[xrow + kw];
                                            dx.data[drow + kw] += gv * wv.data[wrow + kw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(x).clone();
                let wv = self.value(w).clone();
                let (n, c_in, h, wd) = xv.shape();
                let c_out = wv.n;
                let plane = h * wd;
                let mut dx = Tensor4::zeros(n, c_in, h, wd);
                let mut dw = Tensor4::zeros(c_out, c_in, 1, 1);
                let mut db = Tensor4::zeros(c_out, 1, 1, 1);
                for ni in 0..n {
                    for co in 0..c_out {
                        let gbase = g.idx(ni, co, 0, 0);
                        let grow = &g.data[gbase..gbase + plane];
                        db.data[co] += grow.iter().sum::<f64>();
                        for ci in 0..c_in {
                            let wvv = wv.at(co, ci, 0, 0);
                            let xbase = xv.idx(ni, ci, 0, 0);
                            let xrow = &xv.data[xbase..xbase + plane];
                            let mut dwacc = 0.0;
                            let dxbase = dx.idx(ni, ci, 0, 0);
                            for (p, gv) in grow.iter().enumerate() {
                                dwacc += gv * xrow[p];
                                dx.data[dxbase + p] += gv * wvv;
                            }
                            dw.data[co * c_in + ci] += dwacc;
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(x).clone();
                let gv_ = self.value(gamma).clone();
                let (n, c, h, w) = xv.shape();
                let cf = c as f64;
                let mut dx = Tensor4::zeros(n, c, h, w);
                let mut dgamma = Tensor4::zeros(c, 1, 1, 1);
                let mut dbeta = Tensor4::zeros(c, 1, 1, 1);
                for ni in 0..n {
                    for y in 0..h {
                        for xi in 0..w {
                            let mut mean = 0.0;
                            for ci in 0..c {
                                mean += xv.at(ni, ci, y, xi);
                            }
                            mean /= cf;
                            let mut var = 0.0;
                            for ci in 0..c {
                                let d = xv.at(ni, ci, y, xi) - mean;
                                var += d * d;
                            }
                            var /= cf;
                            let inv = 1.0 / (var + eps).sqrt();
                            // dL/dxhat, then the standard layer-norm chain.
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for ci in 0..c {
                                let xhat = (xv.at(ni, ci, y, xi) - mean) * inv;
                                let go = g.at(ni, ci, y, xi);
                                dgamma.data[ci] += go * xhat;
                                dbeta.data[ci] += go;
                                let dxhat = go * gv_.data[ci];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            for ci in 0..c {
                                let xhat = (xv.at(ni, ci, y, xi) - mean) * inv;
                                let dxhat = g.at(ni, ci, y, xi) * gv_.data[ci];
                                *dx.at_mut(ni, ci, y, xi) +=
                                    inv * (dxhat - sum_dxhat / cf - xhat * sum_dxhat_xhat / cf);
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            Op::SoftmaxC { x } => {
                let sv = self.nodes[id].value.clone();
                let (n, c, h, w) = sv.shape();
                let mut dx = Tensor4::zeros(n, c, h, w);
                for ni in 0..n {
                    for y in 0..h {
                        for xi in 0..w {
                            let mut dot = 0.0;
                            for ci in 0..c {
                                dot += g.at(ni, ci, y, xi) * sv.at(ni, ci, y, xi);
                            }
                            for ci in 0..c {
                                *dx.at_mut(ni, ci, y, xi) =
                                    sv.at(ni, ci, y, xi) * (g.at(ni, ci, y, xi) - dot);
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(x).clone();
                let mut d = g.clone();
                for (dv, xvv) in d.data.iter_mut().zip(xv.data.iter()) {
                    if *xvv < 0.0 {
                        *dv *= slope;
                    }
                }
                self.accumulate(x, &d);
            }
            Op::Sigmoid { x } => {
                let sv = self.nodes[id].value.clone();
                let mut d = g.clone();
                for (dv, s) in d.data.iter_mut().zip(sv.data.iter()) {
                    *dv *= s * (1.0 - s);
                }
                self.accumulate(x, &d);
            }
            Op::PixelShuffle { x, r } => {
                let d = tensor::pixel_unshuffle(g, r)?;
                self.accumulate(x, &d);
            }
            Op::PixelUnshuffle { x, r } => {
                let d = tensor::pixel_shuffle(g, r)?;
                self.accumulate(x, &d);
            }
            Op::Roll { x, dy, dx } => {
                let d = roll_tensor(g, -dy, -dx);
                self.accumulate(x, &d);
            }
            Op::WindowPartition { x, ws } => {
                let (n, _, h, w) = self.value(x).shape();
                let d = window_reverse_tensor(g, ws, n, h, w)?;
                self.accumulate(x, &d);
            }
            Op::WindowReverse { x, ws, .. } => {
                let d = window_partition_tensor(g, ws)?;
                self.accumulate(x, &d);
            }
            Op::Reshape { x } => {
                let xv = self.value(x);
                let d = Tensor4 { n: xv.n, c: xv.c, h: xv.h, w: xv.w, data: g.data.clone() };
                self.accumulate(x, &d);
            }
            Op::WindowAttention { q, k, v, heads, attn, .. } => {
                let qv = self.value(q).clone();
                let kv = self.value(k).clone();
                let vv = self.value(v).clone();
                let (bsz, c, wh, ww) = qv.shape();
                let l = wh * ww;
                let d = c / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = Tensor4::zeros(bsz, c, wh, ww);
                let mut dk = dq.clone();
                let mut dv = dq.clone();
                let mut da = vec![0.0; l];
                let mut ds = vec![0.0; l];
                for b in 0..bsz {
                    for hd in 0..heads {
                        for t1 in 0..l {
                            let abase = ((b * heads + hd) * l + t1) * l;
                            let arow = &attn[abase..abase + l];
                            // dV and dA.
                            for t2 in 0..l {
                                let mut acc = 0.0;
                                for di in 0..d {
                                    let ch = hd * d + di;
                                    let go = g.data[g.idx(b, ch, t1 / ww, t1 % ww)];
                                    acc += go * vv.data[vv.idx(b, ch, t2 / ww, t2 % ww)];
                                    let dvi = dv.idx(b, ch, t2 / ww, t2 % ww);
                                    dv.data[dvi] += arow[t2] * go;
                                }
                                da[t2] = acc;
                            }
                            let dot: f64 = da.iter().zip(arow.iter()).map(|(x, a)| x * a).sum();
                            for t2 in 0..l {
                                ds[t2] = arow[t2] * (da[t2] - dot);
                            }
                            for t2 in 0..l {
                                let dsv = ds[t2] * scale;
                                if dsv == 0.0 {
                                    continue;
                                }
                                for di in 0..d {
                                    let ch = hd * d + di;
                                    let dqi = dq.idx(b, ch, t1 / ww, t1 % ww);
                                    dq.data[dqi] += dsv * kv.data[kv.idx(b, ch, t2 / ww, t2 % ww)];
                                    let dki = dk.idx(b, ch, t2 / ww, t2 % ww);
                                    dk.data[dki] += dsv * qv.data[qv.idx(b, ch, t1 / ww, t1 % ww)];
                                }
                            }
                        }
                    }
                }
                self.accumulate(q, &dq);
                self.accumulate(k, &dk);
                self.accumulate(v, &dv);
            }
            Op::DeformGather { x, offsets, k, mask } => {
                let xv = self.value(x).clone();
                let ov = self.value(offsets).clone();
                let (n, c, h, w) = xv.shape();
                let grid = kernel_grid(k);
                let mut dxp = Tensor4::zeros(n, c, h, w);
                let mut doff = Tensor4::zeros(n, 2 * k * k, h, w);
                let mut dmask = mask.map(|m| {
                    let mv = self.value(m);
                    (m, Tensor4::zeros(mv.n, mv.c, mv.h, mv.w))
                });
                for ni in 0..n {
                    for y in 0..h {
                        for xi in 0..w {
                            for (gi, &(gx, gy)) in grid.iter().enumerate() {
                                let px = xi as f64 + gx as f64 + ov.at(ni, 2 * gi, y, xi);
                                let py = y as f64 + gy as f64 + ov.at(ni, 2 * gi + 1, y, xi);
                                let mod_s = match &dmask {
                                    Some((m, _)) => {
                                        let raw = self.value(*m).at(ni, gi, y, xi);
                                        1.0 / (1.0 + (-raw).exp())
                                    }
                                    None => 1.0,
                                };
                                let mut gpx = 0.0;
                                let mut gpy = 0.0;
                                let mut graw = 0.0;
                                for ci in 0..c {
                                    let go = g.at(ni, ci * k * k + gi, y, xi);
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let bg = bilinear_backward(&xv, px, py, ci, ni, go * mod_s, &mut dxp);
                                    gpx += bg.0;
                                    gpy += bg.1;
                                    if dmask.is_some() {
                                        graw += go * tensor::bilinear_sample(&xv, px, py, ci, ni);
                                    }
                                }
                                *doff.at_mut(ni, 2 * gi, y, xi) += gpx;
                                *doff.at_mut(ni, 2 * gi + 1, y, xi) += gpy;
                                if let Some((_, dm)) = &mut dmask {
                                    *dm.at_mut(ni, gi, y, xi) += graw * mod_s * (1.0 - mod_s);
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dxp);
                self.accumulate(offsets, &doff);
                if let Some((m, dm)) = dmask {
                    self.accumulate(m, &dm);
                }
            }
            Op::StdfaPair { q, key, val, offsets, k, t_sel, scale, selection, weights } => {
                let qv = self.value(q).clone();
                let kv = self.value(key).clone();
                let vv = self.value(val).clone();
                let ov = self.value(offsets).clone();
                let (n, ce, h, w) = qv.shape();
                let grid = kernel_grid(k);
                let mut dq = Tensor4::zeros(n, ce, h, w);
                let mut dk = dq.clone();
                let mut dv = dq.clone();
                let mut doff = Tensor4::zeros(n, 2 * k * k, h, w);
                let mut pos = 0;
                for ni in 0..n {
                    for y in 0..h {
                        for xi in 0..w {
                            let sel = &selection[pos..pos + t_sel];
                            let wsel = &weights[pos..pos + t_sel];
                            pos += t_sel;
                            let gw = g.at(ni, ce, y, xi);
                            // Per-slot sampled vectors, recomputed from the tape.
                            let mut ks = vec![0.0; t_sel * ce];
                            let mut vs = vec![0.0; t_sel * ce];
                            let mut coords = vec![(0.0, 0.0); t_sel];
                            for (slot, &gsel) in sel.iter().enumerate() {
                                let gi = gsel as usize;
                                let (gx, gy) = grid[gi];
                                let px = xi as f64 + gx as f64 + ov.at(ni, 2 * gi, y, xi);
                                let py = y as f64 + gy as f64 + ov.at(ni, 2 * gi + 1, y, xi);
                                coords[slot] = (px, py);
                                for c in 0..ce {
                                    ks[slot * ce + c] = tensor::bilinear_sample(&kv, px, py, c, ni);
                                    vs[slot * ce + c] = tensor::bilinear_sample(&vv, px, py, c, ni);
                                }
                            }
                            // Kagg and upstream grads on the two heads.
                            let mut kagg = vec![0.0; ce];
                            for slot in 0..t_sel {
                                for c in 0..ce {
                                    kagg[c] += wsel[slot] * ks[slot * ce + c];
                                }
                            }
                            // W = scale * q . kagg
                            let mut dkagg = vec![0.0; ce];
                            for c in 0..ce {
                                let dqi = dq.idx(ni, c, y, xi);
                                dq.data[dqi] += gw * scale * kagg[c];
                                dkagg[c] = gw * scale * qv.at(ni, c, y, xi);
                            }
                            // Vagg channels.
                            let mut dw_slot = vec![0.0; t_sel];
                            let mut dks = vec![0.0; t_sel * ce];
                            let mut dvs = vec![0.0; t_sel * ce];
                            for slot in 0..t_sel {
                                let mut acc = 0.0;
                                for c in 0..ce {
                                    let gv_c = g.at(ni, c, y, xi);
                                    acc += gv_c * vs[slot * ce + c];
                                    dvs[slot * ce + c] += wsel[slot] * gv_c;
                                }
                                for c in 0..ce {
                                    acc += dkagg[c] * ks[slot * ce + c];
                                    dks[slot * ce + c] += wsel[slot] * dkagg[c];
                                }
                                dw_slot[slot] = acc;
                            }
                            // Softmax backward over the selected scores.
                            let dot: f64 = dw_slot.iter().zip(wsel.iter()).map(|(a, b)| a * b).sum();
                            for slot in 0..t_sel {
                                let dscore = wsel[slot] * (dw_slot[slot] - dot);
                                // score = scale * q . ks
                                for c in 0..ce {
                                    let dqi = dq.idx(ni, c, y, xi);
                                    dq.data[dqi] += dscore * scale * ks[slot * ce + c];
                                    dks[slot * ce + c] += dscore * scale * qv.at(ni, c, y, xi);
                                }
                            }
                            // Sampled K/V back to the maps and the offsets.
                            for (slot, &gsel) in sel.iter().enumerate() {
                                let gi = gsel as usize;
                                let (px, py) = coords[slot];
                                let mut gpx = 0.0;
                                let mut gpy = 0.0;
                                for c in 0..ce {
                                    let dk_c = dks[slot * ce + c];
                                    if dk_c != 0.0 {
                                        let bg = bilinear_backward(&kv, px, py, c, ni, dk_c, &mut dk);
                                        gpx += bg.0;
                                        gpy += bg.1;
                                    }
                                    let dv_c = dvs[slot * ce + c];
                                    if dv_c != 0.0 {
                                        let bg = bilinear_backward(&vv, px, py, c, ni, dv_c, &mut dv);
                                        gpx += bg.0;
                                        gpy += bg.1;
                                    }
                                }
                                *doff.at_mut(ni, 2 * gi, y, xi) += gpx;
                                *doff.at_mut(ni, 2 * gi + 1, y, xi) += gpy;
                            }
                        }
                    }
                }
                self.accumulate(q, &dq);
                self.accumulate(key, &dk);
                self.accumulate(val, &dv);
                self.accumulate(offsets, &doff);
            }
            Op::TemporalCombine { scores, values } => {
                let j_count = scores.len();
                let (n, ce, h, w) = g.shape();
                let mut buf = vec![0.0; j_count];
                let mut dscores: Vec<Tensor4> = (0..j_count).map(|_| Tensor4::zeros(n, 1, h, w)).collect();
                let mut dvalues: Vec<Tensor4> = (0..j_count).map(|_| Tensor4::zeros(n, ce, h, w)).collect();
                for ni in 0..n {
                    for y in 0..h {
                        for xi in 0..w {
                            for (j, &s) in scores.iter().enumerate() {
                                buf[j] = self.value(s).at(ni, 0, y, xi);
                            }
                            let sm = tensor::softmax(&buf)?;
                            let mut dsm = vec![0.0; j_count];
                            for (j, &v) in values.iter().enumerate() {
                                let vv = self.value(v);
                                let mut acc = 0.0;
                                for c in 0..ce {
                                    let gv_c = g.at(ni, c, y, xi);
                                    acc += gv_c * vv.at(ni, c, y, xi);
                                    *dvalues[j].at_mut(ni, c, y, xi) += sm[j] * gv_c;
                                }
                                dsm[j] = acc;
                            }
                            let dot: f64 = dsm.iter().zip(sm.iter()).map(|(a, b)| a * b).sum();
                            for j in 0..j_count {
                                *dscores[j].at_mut(ni, 0, y, xi) += sm[j] * (dsm[j] - dot);
                            }
                        }
                    }
                }
                for (j, &s) in scores.iter().enumerate() {
                    self.accumulate(s, &dscores[j]);
                }
                for (j, &v) in values.iter().enumerate() {
                    self.accumulate(v, &dvalues[j]);
                }
            }
            Op::Charbonnier { a, b, eps } => {
                let av = self.value(a).clone();
                let bv = self.value(b).clone();
                let gs = g.data[0] / av.len() as f64;
                let mut da = Tensor4::zeros(av.n, av.c, av.h, av.w);
                let mut db = da.clone();
                for i in 0..av.len() {
                    let d = av.data[i] - bv.data[i];
                    let dd = gs * d / (d * d + eps * eps).sqrt();
                    da.data[i] = dd;
                    db.data[i] = -dd;
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::SumAll { x } => {
                let xv = self.value(x);
                let d = Tensor4::full(xv.n, xv.c, xv.h, xv.w, g.data[0]);
                self.accumulate(x, &d);
            }
            Op::DotConst { x, proj } => {
                let mut d = (*proj).clone();
                for v in &mut d.data {
                    *v *= g.data[0];
                }
                self.accumulate(x, &d);
            }
        }
        Ok(())
    }
}

/// Scatter-add the bilinear footprint of one sample; returns the gradient of
/// the sample value with respect to (px, py). Clamped axes get zero
/// coordinate gradient.
fn bilinear_backward(
    x: &Tensor4,
    px: f64,
    py: f64,
    channel: usize,
    batch: usize,
    g: f64,
    dx: &mut Tensor4,
) -> (f64, f64) {
    let max_x = (x.w - 1) as f64;
    let max_y = (x.h - 1) as f64;
    let clamped_x = px < 0.0 || px > max_x;
    let clamped_y = py < 0.0 || py > max_y;
    let cx = px.clamp(0.0, max_x);
    let cy = py.clamp(0.0, max_y);
    if x.w == 1 && x.h == 1 {
        *dx.at_mut(batch, channel, 0, 0) += g;
        return (0.0, 0.0);
    }
    let x0 = cx.floor().min(max_x - 1.0).max(0.0);
    let y0 = cy.floor().min(max_y - 1.0).max(0.0);
    let fx = cx - x0;
    let fy = cy - y0;
    let (x0u, y0u) = (x0 as usize, y0 as usize);
    let x1u = (x0u + 1).min(x.w - 1);
    let y1u = (y0u + 1).min(x.h - 1);
    let v00 = x.at(batch, channel, y0u, x0u);
    let v01 = x.at(batch, channel, y0u, x1u);
    let v10 = x.at(batch, channel, y1u, x0u);
    let v11 = x.at(batch, channel, y1u, x1u);
    *dx.at_mut(batch, channel, y0u, x0u) += g * (1.0 - fy) * (1.0 - fx);
    *dx.at_mut(batch, channel, y0u, x1u) += g * (1.0 - fy) * fx;
    *dx.at_mut(batch, channel, y1u, x0u) += g * fy * (1.0 - fx);
    *dx.at_mut(batch, channel, y1u, x1u) += g * fy * fx;
    let gx = if clamped_x { 0.0 } else { g * ((v01 - v00) * (1.0 - fy) + (v11 - v10) * fy) };
    let gy = if clamped_y { 0.0 } else { g * ((v10 - v00) * (1.0 - fx) + (v11 - v01) * fx) };
    (gx, gy)
}

/// Distance from a sample coordinate to the nearest non-smooth point of
/// clamped bilinear sampling: integer grid lines inside the image and the
/// clamp thresholds at 0 and len-1. Outside the image the function is
/// constant, so the only kink is the boundary itself.
pub fn kink_margin(c: f64, len: usize) -> f64 {
    let max = (len - 1) as f64;
    if len <= 1 {
        return f64::INFINITY;
    }
    if c < 0.0 {
        -c
    } else if c > max {
        c - max
    } else {
        (c - c.round()).abs()
    }
}

pub fn roll_tensor(x: &Tensor4, dy: isize, dx: isize) -> Tensor4 {
    let (n, c, h, w) = x.shape();
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
                for xi in 0..w {
                    let sx = (xi as isize - dx).rem_euclid(w as isize) as usize;
                    *out.at_mut(ni, ci, y, xi) = x.at(ni, ci, sy, sx);
                }
            }
        }
    }
    out
}

pub fn window_partition_tensor(x: &Tensor4, ws: usize) -> Result<Tensor4> {
    let (n, c, h, w) = x.shape();
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(Error::Shape(format!("window_partition: {}x{} not divisible by {}", h, w, ws)));
    }
    let (nwy, nwx) = (h / ws, w / ws);
    let mut out = Tensor4::zeros(n * nwy * nwx, c, ws, ws);
    for ni in 0..n {
        for wy in 0..nwy {
            for wx in 0..nwx {
                let b = (ni * nwy + wy) * nwx + wx;
                for ci in 0..c {
                    for y in 0..ws {
                        let src = x.idx(ni, ci, wy * ws + y, wx * ws);
                        let dst = out.idx(b, ci, y, 0);
                        out.data[dst..dst + ws].copy_from_slice(&x.data[src..src + ws]);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn window_reverse_tensor(x: &Tensor4, ws: usize, n: usize, h: usize, w: usize) -> Result<Tensor4> {
    let (nwy, nwx) = (h / ws, w / ws);
    let (bsz, c, _, _) = x.shape();
    if bsz != n * nwy * nwx {
        return Err(Error::Shape("window_reverse: batch mismatch".into()));
    }
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for wy in 0..nwy {
            for wx in 0..nwx {
                let b = (ni * nwy + wy) * nwx + wx;
                for ci in 0..c {
                    for y in 0..ws {
                        let dst = out.idx(ni, ci, wy * ws + y, wx * ws);
                        let src = x.idx(b, ci, y, 0);
                        out.data[dst..dst + ws].copy_from_slice(&x.data[src..src + ws]);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_tensor;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at 3 via charbonnier-free primitives: x*x = sum(x . x)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::scalar(3.0));
        let proj = Arc::new(Tensor4::scalar(3.0));
        // d(sum(x * 3))/dx won't give x^2; build x^2 as dot(x, x is const?) --
        // simplest honest route: loss = charbonnier-less product via two nodes.
        let y = tape.dot_const(x, proj).unwrap(); // 3x, d/dx = 3 -- then scale by x? not a node op.
        // Instead check the chain rule with scale: d(2 * 3x)/dx = 6.
        let z = tape.scale(y, 2.0).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).data[0], 6.0);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::scalar(1.0));
        let l = tape.sum_all(x).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.backward(l).is_err());
        tape.reset_grads();
        assert!(tape.backward(l).is_ok());
    }

    #[test]
    fn backward_on_empty_tape_errors() {
        let mut tape = Tape::new();
        assert!(tape.backward(0).is_err());
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(rng_tensor(1, 2, 3, 3, 3));
        let l = tape.sum_all(x).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn untouched_leaf_gets_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor4::scalar(1.0));
        let y = tape.leaf(Tensor4::scalar(2.0));
        let l = tape.sum_all(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(y).data, vec![0.0]);
    }

    #[test]
    fn branch_gradient_linearity() {
        // grad of (f + g) equals grad f + grad g.
        let x0 = rng_tensor(1, 2, 4, 4, 10);
        let p1 = Arc::new(rng_tensor(1, 2, 4, 4, 11));
        let p2 = Arc::new(rng_tensor(1, 2, 4, 4, 12));
        let run = |projs: &[Arc<Tensor4>]| -> Tensor4 {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let mut losses = Vec::new();
            for p in projs {
                losses.push(tape.dot_const(x, p.clone()).unwrap());
            }
            let mut total = losses[0];
            for l in &losses[1..] {
                total = tape.add(total, *l).unwrap();
            }
            tape.backward(total).unwrap();
            tape.grad(x)
        };
        let g1 = run(&[p1.clone()]);
        let g2 = run(&[p2.clone()]);
        let g12 = run(&[p1, p2]);
        for i in 0..g12.len() {
            assert!((g12.data[i] - g1.data[i] - g2.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_interior_gradient_is_kernel_sum() {
        // f(x) = sum(conv2d(x, ones 3x3, zero pad)): interior dx = 9.
        let mut tape = Tape::new();
        let x = tape.leaf(rng_tensor(1, 1, 5, 5, 4));
        let w = tape.leaf(Tensor4::full(1, 1, 3, 3, 1.0));
        let b = tape.leaf(Tensor4::zeros(1, 1, 1, 1));
        let spec = ConvSpec::new(3, 1, 1, 1);
        let y = tape.conv2d(x, w, b, &spec).unwrap();
        let l = tape.sum_all(y).unwrap();
        tape.backward(l).unwrap();
        let gx = tape.grad(x);
        assert_eq!(gx.at(0, 0, 2, 2), 9.0);
        assert_eq!(gx.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn window_partition_roundtrip_and_shapes() {
        let x = rng_tensor(2, 3, 8, 8, 5);
        let wins = window_partition_tensor(&x, 4).unwrap();
        assert_eq!(wins.shape(), (2 * 4, 3, 4, 4));
        let back = window_reverse_tensor(&wins, 4, 2, 8, 8).unwrap();
        assert_eq!(back.data, x.data);
    }

    #[test]
    fn roll_roundtrip() {
        let x = rng_tensor(1, 2, 5, 7, 6);
        let r = roll_tensor(&x, 2, -3);
        let back = roll_tensor(&r, -2, 3);
        assert_eq!(back.data, x.data);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(rng_tensor(1, 1, 3, 3, 8));
        let proj = Arc::new(Tensor4::zeros(1, 1, 3, 3));
        let l = tape.dot_const(x, proj).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(x).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nan_is_surfaced() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor4::scalar(f64::MAX));
        let b = tape.leaf(Tensor4::scalar(f64::MAX));
        // overflow to inf must error, not propagate
        let r = tape.scale(a, f64::MAX);
        assert!(r.is_err());
        let _ = b;
    }
}
