//! Feature interpolation for the missing frames: short-term deformable
//! alignment of the two neighbors, an optional long-term recurrent hidden
//! path, run in both temporal directions and fused.

use crate::autodiff::{NodeId, Tape};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamNodes;
use crate::stdfa::predict_offsets;
use crate::tensor::{ConvSpec, Tensor4};

pub const HIDDEN_SLOPE: f64 = 0.1;

/// Deformable feature interpolation block: predict per-position offsets from
/// `[src, reference]`, then apply a deformable 3x3 convolution to `src` —
/// bilinear samples at grid + offset, contracted with the conv weights.
/// With a fresh (zero-offset) head this is exactly a plain convolution.
pub fn dfi_block(
    tape: &mut Tape,
    src: NodeId,
    reference: NodeId,
    p: &ParamNodes,
    prefix: &str,
    modulation: bool,
) -> Result<NodeId> {
    let (_, c, _, _) = tape.value(src).shape();
    if tape.value(src).shape() != tape.value(reference).shape() {
        return Err(Error::Shape("dfi_block: src/reference shape mismatch".into()));
    }
    let k = 3;
    let offsets = predict_offsets(tape, src, reference, p, prefix, k)?;
    let mask = if modulation {
        Some(tape.conv2d(
            src,
            p.get(&format!("{}.mask.w", prefix))?,
            p.get(&format!("{}.mask.b", prefix))?,
            &ConvSpec::new(3, 1, c, k * k),
        )?)
    } else {
        None
    };
    let gathered = tape.deform_gather(src, offsets, k, mask)?;
    let w = p.get(&format!("{}.dconv.w", prefix))?;
    let wr = tape.reshape(w, c, c * k * k, 1, 1)?;
    tape.linear(gathered, wr, p.get(&format!("{}.dconv.b", prefix))?)
}

/// One directional interpolation step between two consecutive input frames.
/// Returns the synthesized directional mid-frame feature and, in long-short
/// mode, the updated hidden state.
pub fn lstc_step(
    tape: &mut Tape,
    f_prev: NodeId,
    f_next: NodeId,
    hidden: Option<NodeId>,
    p: &ParamNodes,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<(NodeId, Option<NodeId>)> {
    let modulation = cfg.modulation_mask;
    let a = dfi_block(tape, f_prev, f_next, p, &format!("{}.dfi_n", prefix), modulation)?;
    let b = dfi_block(tape, f_next, f_prev, p, &format!("{}.dfi_n", prefix), modulation)?;
    let pa = tape.linear(a, p.get(&format!("{}.blend_a.w", prefix))?, p.get(&format!("{}.blend_a.b", prefix))?)?;
    let pb = tape.linear(b, p.get(&format!("{}.blend_b.w", prefix))?, p.get(&format!("{}.blend_b.b", prefix))?)?;
    let fp = tape.add(pa, pb)?;

    if !cfg.variant.long_short_interpolation() {
        return Ok((fp, None));
    }
    let h = hidden.ok_or_else(|| Error::Shape("lstc_step: missing hidden state".into()))?;
    if tape.value(h).shape() != tape.value(fp).shape() {
        return Err(Error::Shape("lstc_step: hidden state shape mismatch".into()));
    }
    let h_aligned = dfi_block(tape, h, fp, p, &format!("{}.dfi_h", prefix), modulation)?;
    let d_p = tape.linear(fp, p.get(&format!("{}.fs_p.w", prefix))?, p.get(&format!("{}.fs_p.b", prefix))?)?;
    let d_h = tape.linear(h_aligned, p.get(&format!("{}.fs_h.w", prefix))?, p.get(&format!("{}.fs_h.b", prefix))?)?;
    let dir_feat = tape.add(d_p, d_h)?;
    let (_, c, _, _) = tape.value(dir_feat).shape();
    let hc = tape.conv2d(
        dir_feat,
        p.get(&format!("{}.hid.w", prefix))?,
        p.get(&format!("{}.hid.b", prefix))?,
        &ConvSpec::new(3, 1, c, c),
    )?;
    let new_h = tape.leaky_relu(hc, HIDDEN_SLOPE)?;
    Ok((dir_feat, Some(new_h)))
}

/// Scan one direction over consecutive frame pairs, threading the hidden
/// state; `pairs` lists (prev, next) in scan order.
fn scan_direction(
    tape: &mut Tape,
    pairs: &[(NodeId, NodeId)],
    p: &ParamNodes,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<Vec<NodeId>> {
    let mut hidden = if cfg.variant.long_short_interpolation() {
        let (n, c, h, w) = tape.value(pairs[0].0).shape();
        Some(tape.leaf(Tensor4::zeros(n, c, h, w)))
    } else {
        None
    };
    let mut out = Vec::with_capacity(pairs.len());
    for &(prev, next) in pairs {
        let (feat, new_h) = lstc_step(tape, prev, next, hidden, p, prefix, cfg)?;
        out.push(feat);
        hidden = new_h;
    }
    Ok(out)
}

/// Interpolate the full sequence: N input features in, 2N-1 out. Outputs at
/// even indices are the inputs unchanged; odd indices are the fused
/// forward/backward directional features for that gap.
pub fn interpolate_sequence(
    tape: &mut Tape,
    feats: &[NodeId],
    p: &ParamNodes,
    cfg: &ModelConfig,
) -> Result<Vec<NodeId>> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::Shape(format!("interpolate_sequence: need at least 2 frames, got {}", n)));
    }
    let fwd_pairs: Vec<(NodeId, NodeId)> = (0..n - 1).map(|t| (feats[t], feats[t + 1])).collect();
    let bwd_pairs: Vec<(NodeId, NodeId)> = (0..n - 1).rev().map(|t| (feats[t + 1], feats[t])).collect();
    let fwd = scan_direction(tape, &fwd_pairs, p, "lstfi.fwd", cfg)?;
    let bwd = scan_direction(tape, &bwd_pairs, p, "lstfi.bwd", cfg)?;

    let mut out = Vec::with_capacity(2 * n - 1);
    for t in 0..n - 1 {
        out.push(feats[t]);
        let f = tape.linear(fwd[t], p.get("lstfi.fuse_f.w")?, p.get("lstfi.fuse_f.b")?)?;
        let b = tape.linear(bwd[n - 2 - t], p.get("lstfi.fuse_b.w")?, p.get("lstfi.fuse_b.b")?)?;
        out.push(tape.add(f, b)?);
    }
    out.push(feats[n - 1]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::params::{ModelParams, ParamNodes};
    use crate::rng::{rng_tensor, rng_tensor_range};
    use crate::tensor::{self, PadMode};
    use crate::testutil::assert_close;

    fn cfg_with(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::micro();
        cfg.variant = variant;
        cfg
    }

    fn setup(cfg: &ModelConfig) -> (Tape, ParamNodes, ModelParams) {
        let params = ModelParams::init(cfg).unwrap();
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        (tape, nodes, params)
    }

    #[test]
    fn fresh_dfi_block_is_a_plain_convolution() {
        let cfg = cfg_with(Variant::Full);
        let (mut tape, nodes, params) = setup(&cfg);
        let src = tape.leaf(rng_tensor(1, 8, 6, 6, 101));
        let reference = tape.leaf(rng_tensor(1, 8, 6, 6, 102));
        let out = dfi_block(&mut tape, src, reference, &nodes, "lstfi.fwd.dfi_n", false).unwrap();

        // Zero offsets sample with clamp-to-border, which matches a
        // convolution over a replicate-padded input.
        let mut spec = ConvSpec::new(3, 1, 8, 8);
        spec.pad_mode = PadMode::Replicate;
        let want = tensor::conv2d(
            tape.value(src),
            params.get("lstfi.fwd.dfi_n.dconv.w").unwrap(),
            &params.get("lstfi.fwd.dfi_n.dconv.b").unwrap().data,
            &spec,
        )
        .unwrap();
        assert_close(&tape.value(out).data, &want.data, 1e-12);
    }

    #[test]
    fn constant_source_gives_constant_output_for_any_offsets() {
        let cfg = cfg_with(Variant::Full);
        let mut params = ModelParams::init(&cfg).unwrap();
        // Randomize the zero-init offset layer so offsets are nonzero.
        *params.get_mut("lstfi.fwd.dfi_n.og1.w").unwrap() =
            rng_tensor_range(18, 8, 3, 3, 7, -0.3, 0.3);
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        let src = tape.leaf(Tensor4::full(1, 8, 5, 5, 0.75));
        let reference = tape.leaf(rng_tensor(1, 8, 5, 5, 103));
        let out = dfi_block(&mut tape, src, reference, &nodes, "lstfi.fwd.dfi_n", false).unwrap();
        let v = tape.value(out);
        for c in 0..8 {
            let first = v.at(0, c, 0, 0);
            for y in 0..5 {
                for x in 0..5 {
                    assert!((v.at(0, c, y, x) - first).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dfi_matches_gather_loop_oracle() {
        let cfg = cfg_with(Variant::Full);
        let mut params = ModelParams::init(&cfg).unwrap();
        *params.get_mut("lstfi.fwd.dfi_n.og1.w").unwrap() =
            rng_tensor_range(18, 8, 3, 3, 8, -0.2, 0.2);
        *params.get_mut("lstfi.fwd.dfi_n.og1.b").unwrap() =
            rng_tensor_range(18, 1, 1, 1, 9, 0.1, 0.4);
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        let src = tape.leaf(rng_tensor(1, 8, 5, 5, 104));
        let reference = tape.leaf(rng_tensor(1, 8, 5, 5, 105));
        let out = dfi_block(&mut tape, src, reference, &nodes, "lstfi.fwd.dfi_n", false).unwrap();

        // Recompute offsets with plain tensor ops, then gather per pixel.
        let g = |n: &str| params.get(n).unwrap();
        let cat = tensor::concat_channels(&[tape.value(src), tape.value(reference)]).unwrap();
        let h0 = tensor::conv2d(&cat, g("lstfi.fwd.dfi_n.og0.w"), &g("lstfi.fwd.dfi_n.og0.b").data, &ConvSpec::new(3, 1, 16, 8)).unwrap();
        let act = tensor::leaky_relu(&h0, 0.1);
        let off = tensor::conv2d(&act, g("lstfi.fwd.dfi_n.og1.w"), &g("lstfi.fwd.dfi_n.og1.b").data, &ConvSpec::new(3, 1, 8, 18)).unwrap();
        let wts = g("lstfi.fwd.dfi_n.dconv.w");
        let bias = &g("lstfi.fwd.dfi_n.dconv.b").data;
        let grid = crate::autodiff::kernel_grid(3);
        let sv = tape.value(src);
        let mut want = Tensor4::zeros(1, 8, 5, 5);
        for co in 0..8 {
            for y in 0..5 {
                for x in 0..5 {
                    let mut acc = bias[co];
                    for ci in 0..8 {
                        for (gi, &(gx, gy)) in grid.iter().enumerate() {
                            let px = x as f64 + gx as f64 + off.at(0, 2 * gi, y, x);
                            let py = y as f64 + gy as f64 + off.at(0, 2 * gi + 1, y, x);
                            acc += wts.at(co, ci, gi / 3, gi % 3)
                                * tensor::bilinear_sample(sv, px, py, ci, 0);
                        }
                    }
                    *want.at_mut(0, co, y, x) = acc;
                }
            }
        }
        assert_close(&tape.value(out).data, &want.data, 1e-10);
    }

    #[test]
    fn step_shapes_and_fresh_fusion_identity() {
        let cfg = cfg_with(Variant::Full);
        let (mut tape, nodes, _) = setup(&cfg);
        let f_prev = tape.leaf(rng_tensor(1, 8, 8, 8, 110));
        let f_next = tape.leaf(rng_tensor(1, 8, 8, 8, 111));
        let h0 = tape.leaf(Tensor4::zeros(1, 8, 8, 8));
        let (feat, new_h) = lstc_step(&mut tape, f_prev, f_next, Some(h0), &nodes, "lstfi.fwd", &cfg).unwrap();
        assert_eq!(tape.value(feat).shape(), (1, 8, 8, 8));
        assert_eq!(tape.value(new_h.unwrap()).shape(), (1, 8, 8, 8));

        // Fresh fusion: hidden-path map is zero and the direct map is the
        // identity, so the directional feature equals the blended neighbors.
        let a = dfi_block(&mut tape, f_prev, f_next, &nodes, "lstfi.fwd.dfi_n", false).unwrap();
        let b = dfi_block(&mut tape, f_next, f_prev, &nodes, "lstfi.fwd.dfi_n", false).unwrap();
        let pa = tape.linear(a, nodes.get("lstfi.fwd.blend_a.w").unwrap(), nodes.get("lstfi.fwd.blend_a.b").unwrap()).unwrap();
        let pb = tape.linear(b, nodes.get("lstfi.fwd.blend_b.w").unwrap(), nodes.get("lstfi.fwd.blend_b.b").unwrap()).unwrap();
        let fp = tape.add(pa, pb).unwrap();
        assert_close(&tape.value(feat).data, &tape.value(fp).data, 1e-12);
    }

    #[test]
    fn equal_neighbors_fresh_params_reduce_to_blended_convolution() {
        let cfg = cfg_with(Variant::Full);
        let (mut tape, nodes, params) = setup(&cfg);
        let f = tape.leaf(rng_tensor(1, 8, 6, 6, 112));
        let h0 = tape.leaf(Tensor4::zeros(1, 8, 6, 6));
        let (feat, _) = lstc_step(&mut tape, f, f, Some(h0), &nodes, "lstfi.fwd", &cfg).unwrap();

        let mut spec = ConvSpec::new(3, 1, 8, 8);
        spec.pad_mode = PadMode::Replicate;
        let conv = tensor::conv2d(
            tape.value(f),
            params.get("lstfi.fwd.dfi_n.dconv.w").unwrap(),
            &params.get("lstfi.fwd.dfi_n.dconv.b").unwrap().data,
            &spec,
        )
        .unwrap();
        // blend_a and blend_b are each 0.5 * identity at init.
        let want: Vec<f64> = conv.data.iter().map(|v| 0.5 * v + 0.5 * v).collect();
        assert_close(&tape.value(feat).data, &want, 1e-12);
    }

    #[test]
    fn outputs_pass_inputs_through_at_even_indices() {
        for n in [2usize, 3, 4] {
            let cfg = cfg_with(Variant::Full);
            let (mut tape, nodes, _) = setup(&cfg);
            let feats: Vec<NodeId> =
                (0..n).map(|i| tape.leaf(rng_tensor(1, 8, 4, 4, 120 + i as u64))).collect();
            let out = interpolate_sequence(&mut tape, &feats, &nodes, &cfg).unwrap();
            assert_eq!(out.len(), 2 * n - 1);
            for t in 0..n {
                assert_eq!(tape.value(out[2 * t]).data, tape.value(feats[t]).data);
            }
        }
    }

    #[test]
    fn too_short_sequence_is_rejected() {
        let cfg = cfg_with(Variant::Full);
        let (mut tape, nodes, _) = setup(&cfg);
        let f = tape.leaf(rng_tensor(1, 8, 4, 4, 130));
        assert!(interpolate_sequence(&mut tape, &[f], &nodes, &cfg).is_err());
    }

    #[test]
    fn short_term_variant_ignores_hidden_path() {
        // Omega variants drop the recurrent path: each gap depends only on
        // its two neighbors, so recomputing a gap in isolation matches.
        let cfg = cfg_with(Variant::Omega4);
        let (mut tape, nodes, _) = setup(&cfg);
        let feats: Vec<NodeId> =
            (0..3).map(|i| tape.leaf(rng_tensor(1, 8, 4, 4, 140 + i))).collect();
        let out = interpolate_sequence(&mut tape, &feats, &nodes, &cfg).unwrap();

        for t in 0..2 {
            let (fwd, h1) = lstc_step(&mut tape, feats[t], feats[t + 1], None, &nodes, "lstfi.fwd", &cfg).unwrap();
            let (bwd, h2) = lstc_step(&mut tape, feats[t + 1], feats[t], None, &nodes, "lstfi.bwd", &cfg).unwrap();
            assert!(h1.is_none() && h2.is_none());
            let f = tape.linear(fwd, nodes.get("lstfi.fuse_f.w").unwrap(), nodes.get("lstfi.fuse_f.b").unwrap()).unwrap();
            let b = tape.linear(bwd, nodes.get("lstfi.fuse_b.w").unwrap(), nodes.get("lstfi.fuse_b.b").unwrap()).unwrap();
            let want = tape.add(f, b).unwrap();
            assert_eq!(tape.value(out[2 * t + 1]).data, tape.value(want).data);
        }
    }

    #[test]
    fn reversing_inputs_and_swapping_directions_reverses_outputs() {
        let cfg = cfg_with(Variant::Full);
        let mut params = ModelParams::init(&cfg).unwrap();
        // Make the two directions genuinely different.
        for (name, t) in params.iter_mut() {
            if name.contains("og1") || name.contains("fs_h") {
                let seed = name.len() as u64;
                *t = {
                    let (n, c, h, w) = t.shape();
                    rng_tensor_range(n, c, h, w, seed, -0.2, 0.2)
                };
            }
        }
        let frames: Vec<Tensor4> = (0..4).map(|i| rng_tensor(1, 8, 4, 4, 150 + i)).collect();

        let mut swapped = params.clone();
        for name in params.names().to_vec() {
            let counterpart = if let Some(rest) = name.strip_prefix("lstfi.fwd.") {
                format!("lstfi.bwd.{}", rest)
            } else if let Some(rest) = name.strip_prefix("lstfi.fuse_f") {
                format!("lstfi.fuse_b{}", rest)
            } else {
                continue;
            };
            let v = params.get(&counterpart).unwrap().clone();
            *swapped.get_mut(&name).unwrap() = v;
            let v = params.get(&name).unwrap().clone();
            *swapped.get_mut(&counterpart).unwrap() = v;
        }

        let run = |p: &ModelParams, order: &[usize]| -> Vec<Tensor4> {
            let mut tape = Tape::new();
            let nodes = ParamNodes::new(&mut tape, p);
            let feats: Vec<NodeId> = order.iter().map(|&i| tape.leaf(frames[i].clone())).collect();
            let out = interpolate_sequence(&mut tape, &feats, &nodes, &cfg).unwrap();
            out.iter().map(|&o| tape.value(o).clone()).collect()
        };
        let straight = run(&params, &[0, 1, 2, 3]);
        let reversed = run(&swapped, &[3, 2, 1, 0]);
        for (i, s) in straight.iter().enumerate() {
            assert_eq!(s.data, reversed[reversed.len() - 1 - i].data, "index {}", i);
        }
    }
}
