//! Cross-frame deformable feature aggregation: every frame gathers the most
//! relevant sampled points from every other frame, fuses them with spatial and
//! temporal softmax weights, and adds the result back as a residual.

use crate::autodiff::{kernel_grid, NodeId, Tape};
use crate::config::{Aggregation, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamNodes};
use crate::tensor::{self, ConvSpec, Tensor4};

/// Indices of the `t` largest scores, descending, ties broken by the smaller
/// index. Single pass with an insertion-sorted running top list.
pub fn select_top_t(scores: &[f64], t: usize) -> Result<Vec<usize>> {
    if t == 0 || t > scores.len() {
        return Err(Error::Shape(format!("select_top_t: T={} out of 1..={}", t, scores.len())));
    }
    let mut top: Vec<usize> = Vec::with_capacity(t + 1);
    for i in 0..scores.len() {
        let pos = top.iter().position(|&j| scores[j] < scores[i]).unwrap_or(top.len());
        if pos < t {
            top.insert(pos, i);
            top.truncate(t);
        }
    }
    Ok(top)
}

/// Offset head shared by the aggregation stage and the deformable
/// interpolation blocks: conv3x3 on the channel-stacked pair, LeakyReLU,
/// then a zero-initialized conv3x3 producing `2k^2` displacement channels.
pub fn predict_offsets(
    tape: &mut Tape,
    a: NodeId,
    b: NodeId,
    p: &ParamNodes,
    prefix: &str,
    k: usize,
) -> Result<NodeId> {
    let (_, ca, _, _) = tape.value(a).shape();
    let (_, cb, _, _) = tape.value(b).shape();
    let cat = tape.concat_channels(&[a, b])?;
    let (_, cmid, _, _) = tape.value(p.get(&format!("{}.og0.w", prefix))?).shape();
    let h0 = tape.conv2d(
        cat,
        p.get(&format!("{}.og0.w", prefix))?,
        p.get(&format!("{}.og0.b", prefix))?,
        &ConvSpec::new(3, 1, ca + cb, cmid),
    )?;
    let act = tape.leaky_relu(h0, 0.1)?;
    tape.conv2d(
        act,
        p.get(&format!("{}.og1.w", prefix))?,
        p.get(&format!("{}.og1.b", prefix))?,
        &ConvSpec::new(3, 1, cmid, 2 * k * k),
    )
}

/// Residual deformable aggregation over the whole sequence. Each frame `i`
/// attends to every other frame `j`: sample `k^2` displaced points from
/// `K_j`/`V_j`, keep the T highest-scoring ones, softmax-weight them, then
/// softmax-fuse the per-source aggregates over `j` and add a linear residual.
pub fn stdfa_forward(
    tape: &mut Tape,
    feats: &[NodeId],
    p: &ParamNodes,
    cfg: &ModelConfig,
) -> Result<Vec<NodeId>> {
    let agg = cfg.variant.aggregation();
    if agg == Aggregation::None {
        return Ok(feats.to_vec());
    }
    if feats.len() < 2 {
        return Err(Error::Shape("stdfa_forward: need at least two frames".into()));
    }
    let (k, t_sel) = cfg.agg_kernel();
    let deformable = agg == Aggregation::Deformable;
    let (n, _, h, w) = tape.value(feats[0]).shape();

    let qw = p.get("stdfa.q.w")?;
    let qb = p.get("stdfa.q.b")?;
    let kw = p.get("stdfa.k.w")?;
    let kb = p.get("stdfa.k.b")?;
    let vw = p.get("stdfa.v.w")?;
    let vb = p.get("stdfa.v.b")?;
    let qs: Vec<NodeId> = feats.iter().map(|&f| tape.linear(f, qw, qb)).collect::<Result<_>>()?;
    let ks: Vec<NodeId> = feats.iter().map(|&f| tape.linear(f, kw, kb)).collect::<Result<_>>()?;
    let vs: Vec<NodeId> = feats.iter().map(|&f| tape.linear(f, vw, vb)).collect::<Result<_>>()?;
    let (_, ce, _, _) = tape.value(qs[0]).shape();

    let zero_offsets =
        if deformable { None } else { Some(tape.leaf(Tensor4::zeros(n, 2 * k * k, h, w))) };

    let mut out = Vec::with_capacity(feats.len());
    for i in 0..feats.len() {
        let mut wmaps = Vec::new();
        let mut vals = Vec::new();
        for j in 0..feats.len() {
            if j == i {
                continue;
            }
            let offsets = match zero_offsets {
                Some(z) => z,
                None => predict_offsets(tape, qs[i], ks[j], p, "stdfa", k)?,
            };
            let pair = tape.stdfa_pair(qs[i], ks[j], vs[j], offsets, k, t_sel, cfg.qk_scale)?;
            vals.push(tape.slice_channels(pair, 0, ce)?);
            wmaps.push(tape.slice_channels(pair, ce, 1)?);
        }
        let vstar = tape.temporal_combine(&wmaps, &vals)?;
        let res = tape.linear(vstar, p.get("stdfa.out.w")?, p.get("stdfa.out.b")?)?;
        out.push(tape.add(feats[i], res)?);
    }
    Ok(out)
}

/// One sampling record from the aggregation stage, for diagnostics dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub frame_i: usize,
    pub frame_j: usize,
    pub y: usize,
    pub x: usize,
    /// Grid index of the selected point, row-major over the k x k grid.
    pub grid_index: usize,
    pub sample_x: f64,
    pub sample_y: f64,
    pub weight: f64,
}

/// Recompute the per-pair top-T selection without a tape, for the CSV dump.
/// Rows are ordered by (i, j, y, x, selection rank).
pub fn selection_dump(
    feats: &[Tensor4],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Vec<SelectionRow>> {
    let agg = cfg.variant.aggregation();
    if agg == Aggregation::None {
        return Ok(Vec::new());
    }
    if feats.len() < 2 {
        return Err(Error::Shape("selection_dump: need at least two frames".into()));
    }
    let (k, t_sel) = cfg.agg_kernel();
    let deformable = agg == Aggregation::Deformable;
    let lin = |x: &Tensor4, name: &str| -> Result<Tensor4> {
        tensor::linear(x, params.get(&format!("{}.w", name))?, &params.get(&format!("{}.b", name))?.data)
    };
    let qs: Vec<Tensor4> = feats.iter().map(|f| lin(f, "stdfa.q")).collect::<Result<_>>()?;
    let ks: Vec<Tensor4> = feats.iter().map(|f| lin(f, "stdfa.k")).collect::<Result<_>>()?;
    let (n, ce, h, w) = qs[0].shape();
    let scale = if cfg.qk_scale { 1.0 / (ce as f64).sqrt() } else { 1.0 };
    let grid = kernel_grid(k);

    let mut rows = Vec::new();
    for i in 0..feats.len() {
        for j in 0..feats.len() {
            if j == i {
                continue;
            }
            let offsets = if deformable {
                let cat = tensor::concat_channels(&[&qs[i], &ks[j]])?;
                let h0 = tensor::conv2d(
                    &cat,
                    params.get("stdfa.og0.w")?,
                    &params.get("stdfa.og0.b")?.data,
                    &ConvSpec::new(3, 1, 2 * ce, ce),
                )?;
                let act = tensor::leaky_relu(&h0, 0.1);
                Some(tensor::conv2d(
                    &act,
                    params.get("stdfa.og1.w")?,
                    &params.get("stdfa.og1.b")?.data,
                    &ConvSpec::new(3, 1, ce, 2 * k * k),
                )?)
            } else {
                None
            };
            for ni in 0..n {
                for y in 0..h {
                    for x in 0..w {
                        let mut scores = vec![0.0; k * k];
                        let mut coords = vec![(0.0, 0.0); k * k];
                        for (g, &(gx, gy)) in grid.iter().enumerate() {
                            let (ox, oy) = match &offsets {
                                Some(o) => (o.at(ni, 2 * g, y, x), o.at(ni, 2 * g + 1, y, x)),
                                None => (0.0, 0.0),
                            };
                            let px = x as f64 + gx as f64 + ox;
                            let py = y as f64 + gy as f64 + oy;
                            coords[g] = (px, py);
                            let mut s = 0.0;
                            for c in 0..ce {
                                s += qs[i].at(ni, c, y, x) * tensor::bilinear_sample(&ks[j], px, py, c, ni);
                            }
                            scores[g] = s * scale;
                        }
                        let sel = select_top_t(&scores, t_sel)?;
                        let picked: Vec<f64> = sel.iter().map(|&g| scores[g]).collect();
                        let wsel = tensor::softmax(&picked)?;
                        for (slot, &g) in sel.iter().enumerate() {
                            rows.push(SelectionRow {
                                frame_i: i,
                                frame_j: j,
                                y,
                                x,
                                grid_index: g,
                                sample_x: coords[g].0,
                                sample_y: coords[g].1,
                                weight: wsel[slot],
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::rng::{rng_tensor, seeded};
    use crate::testutil::assert_close;
    use rand::Rng;

    #[test]
    fn top_t_tie_breaks_to_lower_index() {
        assert_eq!(select_top_t(&[5.0, 1.0, 5.0, 2.0], 2).unwrap(), vec![0, 2]);
    }

    #[test]
    fn top_t_full_selection_and_errors() {
        let s = [3.0, 1.0, 2.0, 0.5];
        assert_eq!(select_top_t(&s, 4).unwrap(), vec![0, 2, 1, 3]);
        assert!(select_top_t(&s, 0).is_err());
        assert!(select_top_t(&s, 5).is_err());
    }

    #[test]
    fn top_t_matches_sort_oracle() {
        let mut rng = seeded(77);
        for case in 0..2000 {
            let len = rng.gen_range(1..=16);
            let t = rng.gen_range(1..=len);
            // Quantize to force frequent ties.
            let scores: Vec<f64> =
                (0..len).map(|_| (rng.gen_range(-4.0..4.0_f64) * 2.0).round() / 2.0).collect();
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| {
                scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
            });
            order.truncate(t);
            assert_eq!(select_top_t(&scores, t).unwrap(), order, "case {}", case);
        }
    }

    #[test]
    fn constant_shift_leaves_selection_and_weights_unchanged() {
        let mut rng = seeded(5);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..9).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + 123.5).collect();
            let s1 = select_top_t(&scores, 3).unwrap();
            let s2 = select_top_t(&shifted, 3).unwrap();
            assert_eq!(s1, s2);
            let w1 = tensor::softmax(&s1.iter().map(|&g| scores[g]).collect::<Vec<_>>()).unwrap();
            let w2 = tensor::softmax(&s2.iter().map(|&g| shifted[g]).collect::<Vec<_>>()).unwrap();
            assert_close(&w1, &w2, 1e-12);
        }
    }

    fn agg_cfg(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::micro();
        cfg.variant = variant;
        cfg
    }

    fn run_forward(cfg: &ModelConfig, frames: usize, seed: u64) -> (Vec<Tensor4>, Vec<Tensor4>) {
        let params = ModelParams::init(cfg).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        let feats: Vec<NodeId> =
            (0..frames).map(|i| tape.leaf(rng_tensor(1, cfg.channels, 4, 4, seed + i as u64))).collect();
        let out = stdfa_forward(&mut tape, &feats, &nodes, cfg).unwrap();
        (
            feats.iter().map(|&f| tape.value(f).clone()).collect(),
            out.iter().map(|&o| tape.value(o).clone()).collect(),
        )
    }

    #[test]
    fn zero_output_map_gives_residual_identity() {
        for variant in [Variant::Omega2, Variant::Omega3, Variant::Full] {
            let cfg = agg_cfg(variant);
            let (input, output) = run_forward(&cfg, 3, 900);
            for (i, o) in input.iter().zip(output.iter()) {
                assert_eq!(i.data, o.data, "variant {:?}", variant);
            }
        }
    }

    #[test]
    fn omega1_passes_features_through() {
        let cfg = agg_cfg(Variant::Omega1);
        let (input, output) = run_forward(&cfg, 3, 30);
        for (i, o) in input.iter().zip(output.iter()) {
            assert_eq!(i.data, o.data);
        }
    }

    #[test]
    fn single_frame_is_rejected_when_aggregating() {
        let cfg = agg_cfg(Variant::Full);
        let params = ModelParams::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        let f = tape.leaf(rng_tensor(1, cfg.channels, 4, 4, 1));
        assert!(stdfa_forward(&mut tape, &[f], &nodes, &cfg).is_err());
    }

    #[test]
    fn fresh_offset_head_predicts_zero_field() {
        let cfg = agg_cfg(Variant::Full);
        let params = ModelParams::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        let a = tape.leaf(rng_tensor(1, cfg.embed_channels, 4, 4, 2));
        let b = tape.leaf(rng_tensor(1, cfg.embed_channels, 4, 4, 3));
        let off = predict_offsets(&mut tape, a, b, &nodes, "stdfa", cfg.kernel_size).unwrap();
        let v = tape.value(off);
        assert_eq!(v.shape(), (1, 2 * 9, 4, 4));
        assert!(v.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn fixed_window_1x1_equals_same_position_attention() {
        // k=1, T=1, zero offsets: the only candidate is the co-located pixel,
        // so the result is plain cross-frame attention at each position.
        let cfg = agg_cfg(Variant::Omega2);
        let params = ModelParams::init(&cfg).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        let feats: Vec<NodeId> = (0..3).map(|i| tape.leaf(rng_tensor(1, 8, 3, 3, 60 + i))).collect();
        let out = stdfa_forward(&mut tape, &feats, &nodes, &cfg).unwrap();

        let lin = |x: &Tensor4, n: &str| {
            tensor::linear(x, params.get(&format!("{}.w", n)).unwrap(), &params.get(&format!("{}.b", n)).unwrap().data)
                .unwrap()
        };
        let fv: Vec<Tensor4> = feats.iter().map(|&f| tape.value(f).clone()).collect();
        let qs: Vec<Tensor4> = fv.iter().map(|f| lin(f, "stdfa.q")).collect();
        let ks: Vec<Tensor4> = fv.iter().map(|f| lin(f, "stdfa.k")).collect();
        let vs: Vec<Tensor4> = fv.iter().map(|f| lin(f, "stdfa.v")).collect();
        let ce = 8;
        for i in 0..3 {
            let mut vstar = Tensor4::zeros(1, ce, 3, 3);
            for y in 0..3 {
                for x in 0..3 {
                    let js: Vec<usize> = (0..3).filter(|&j| j != i).collect();
                    let wj: Vec<f64> = js
                        .iter()
                        .map(|&j| (0..ce).map(|c| qs[i].at(0, c, y, x) * ks[j].at(0, c, y, x)).sum())
                        .collect();
                    let sm = tensor::softmax(&wj).unwrap();
                    for (slot, &j) in js.iter().enumerate() {
                        for c in 0..ce {
                            *vstar.at_mut(0, c, y, x) += sm[slot] * vs[j].at(0, c, y, x);
                        }
                    }
                }
            }
            let res = lin(&vstar, "stdfa.out");
            let want = tensor::add(&fv[i], &res).unwrap();
            assert_close(&tape.value(out[i]).data, &want.data, 1e-10);
        }
    }

    #[test]
    fn source_permutation_leaves_result_unchanged() {
        // Reversing the whole sequence maps frame i to position 2-i; the set
        // of sources for the (former) middle frame is the same, so its output
        // must match bit-for-bit up to summation order. Compare middle frame.
        let cfg = agg_cfg(Variant::Omega3);
        let params = ModelParams::init(&cfg).unwrap();
        let frames: Vec<Tensor4> = (0..3).map(|i| rng_tensor(1, 8, 3, 3, 70 + i)).collect();

        let run = |order: &[usize]| -> Tensor4 {
            let mut tape = Tape::new();
            let nodes = ParamNodes::new(&mut tape, &params);
            let feats: Vec<NodeId> = order.iter().map(|&i| tape.leaf(frames[i].clone())).collect();
            let out = stdfa_forward(&mut tape, &feats, &nodes, &cfg).unwrap();
            let mid = order.iter().position(|&i| i == 1).unwrap();
            tape.value(out[mid]).clone()
        };
        let a = run(&[0, 1, 2]);
        let b = run(&[2, 1, 0]);
        assert_close(&a.data, &b.data, 1e-12);
    }

    #[test]
    fn selection_dump_weights_sum_to_one_per_position() {
        let cfg = agg_cfg(Variant::Full);
        let params = ModelParams::init(&cfg).unwrap();
        let frames: Vec<Tensor4> = (0..3).map(|i| rng_tensor(1, 8, 3, 3, 80 + i)).collect();
        let rows = selection_dump(&frames, &params, &cfg).unwrap();
        let (k, t) = cfg.agg_kernel();
        assert_eq!(rows.len(), 3 * 2 * 9 * t);
        assert!(rows.iter().all(|r| r.grid_index < k * k));
        let mut sums = std::collections::HashMap::new();
        for r in &rows {
            *sums.entry((r.frame_i, r.frame_j, r.y, r.x)).or_insert(0.0) += r.weight;
        }
        for (_, s) in sums {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
