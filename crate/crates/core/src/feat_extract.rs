//! Shallow convolution plus residual windowed-attention blocks producing
//! long-range-aware frame features.

use std::sync::Arc;

use crate::autodiff::{NodeId, Tape};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamNodes;
use crate::tensor::{ConvSpec, PadMode};

pub const LN_EPS: f64 = 1e-5;
pub const MLP_SLOPE: f64 = 0.1;

/// Additive attention mask for cyclically shifted windows. Entries are 0 for
/// token pairs from the same spatial region and a large negative value
/// otherwise. Flattened as `[window][t1][t2]`.
pub fn shift_mask(h: usize, w: usize, ws: usize, shift: usize) -> Arc<Vec<f64>> {
    const NEG: f64 = -1e9;
    let l = ws * ws;
    let (nwy, nwx) = (h / ws, w / ws);
    // Region labels after the cyclic roll.
    let region = |coord: usize, len: usize| -> usize {
        // slices on the rolled image: [0, len-ws), [len-ws, len-shift), [len-shift, len)
        if coord < len - ws {
            0
        } else if coord < len - shift {
            1
        } else {
            2
        }
    };
    let mut ids = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            // labels computed on pre-roll coordinates, then rolled by -shift
            let sy = (y + shift) % h;
            let sx = (x + shift) % w;
            ids[sy * w + sx] = region(y, h) * 3 + region(x, w);
        }
    }
    // After rolling by -shift the window grid is aligned; label per rolled pixel.
    let mut rolled = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = (y + shift) % h;
            let sx = (x + shift) % w;
            rolled[y * w + x] = ids[sy * w + sx];
        }
    }
    let mut mask = vec![0.0; nwy * nwx * l * l];
    for wy in 0..nwy {
        for wx in 0..nwx {
            let wi = wy * nwx + wx;
            for t1 in 0..l {
                let p1 = rolled[(wy * ws + t1 / ws) * w + wx * ws + t1 % ws];
                for t2 in 0..l {
                    let p2 = rolled[(wy * ws + t2 / ws) * w + wx * ws + t2 % ws];
                    if p1 != p2 {
                        mask[(wi * l + t1) * l + t2] = NEG;
                    }
                }
            }
        }
    }
    Arc::new(mask)
}

/// One Swin-style transformer block:
/// `X = MSA(LN(X_in)) + X_in; X_out = MLP(LN(X)) + X`.
pub fn stb_forward(
    tape: &mut Tape,
    x: NodeId,
    p: &ParamNodes,
    prefix: &str,
    ws: usize,
    heads: usize,
    shift: bool,
) -> Result<NodeId> {
    let (n, c, h, w) = tape.value(x).shape();
    if c % heads != 0 {
        return Err(Error::Shape(format!("stb: {} channels, {} heads", c, heads)));
    }
    if h % ws != 0 || w % ws != 0 {
        return Err(Error::Shape(format!("stb: {}x{} not a multiple of window {}", h, w, ws)));
    }
    let shift_px = if shift && ws > 1 && h > ws { ws / 2 } else { 0 };
    let nw = (h / ws) * (w / ws);

    let normed = {
        let gamma = p.get(&format!("{}.ln1.gamma", prefix))?;
        let beta = p.get(&format!("{}.ln1.beta", prefix))?;
        tape.layer_norm(x, gamma, beta, LN_EPS)?
    };
    let rolled = if shift_px > 0 {
        tape.roll(normed, -(shift_px as isize), -(shift_px as isize))?
    } else {
        normed
    };
    let wins = tape.window_partition(rolled, ws)?;
    let q = tape.linear(wins, p.get(&format!("{}.q.w", prefix))?, p.get(&format!("{}.q.b", prefix))?)?;
    let k = tape.linear(wins, p.get(&format!("{}.k.w", prefix))?, p.get(&format!("{}.k.b", prefix))?)?;
    let v = tape.linear(wins, p.get(&format!("{}.v.w", prefix))?, p.get(&format!("{}.v.b", prefix))?)?;
    let mask = if shift_px > 0 { Some(shift_mask(h, w, ws, shift_px)) } else { None };
    let att = tape.window_attention(q, k, v, heads, mask, nw)?;
    let proj =
        tape.linear(att, p.get(&format!("{}.proj.w", prefix))?, p.get(&format!("{}.proj.b", prefix))?)?;
    let merged = tape.window_reverse(proj, ws, n, h, w)?;
    let unrolled = if shift_px > 0 {
        tape.roll(merged, shift_px as isize, shift_px as isize)?
    } else {
        merged
    };
    let x1 = tape.add(x, unrolled)?;

    let normed2 = {
        let gamma = p.get(&format!("{}.ln2.gamma", prefix))?;
        let beta = p.get(&format!("{}.ln2.beta", prefix))?;
        tape.layer_norm(x1, gamma, beta, LN_EPS)?
    };
    let m1 = tape.linear(
        normed2,
        p.get(&format!("{}.mlp1.w", prefix))?,
        p.get(&format!("{}.mlp1.b", prefix))?,
    )?;
    let act = tape.leaky_relu(m1, MLP_SLOPE)?;
    let m2 =
        tape.linear(act, p.get(&format!("{}.mlp2.w", prefix))?, p.get(&format!("{}.mlp2.b", prefix))?)?;
    tape.add(x1, m2)
}

/// Residual block of `stbs_per_rstb` STBs (alternating shift) and a trailing
/// 3x3 convolution: `out = conv(STB_s(...STB_1(in))) + in`.
pub fn rstb_forward(
    tape: &mut Tape,
    x: NodeId,
    p: &ParamNodes,
    prefix: &str,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let mut cur = x;
    for j in 0..cfg.stbs_per_rstb {
        cur = stb_forward(
            tape,
            cur,
            p,
            &format!("{}.stb{}", prefix, j),
            cfg.window_size,
            cfg.heads,
            j % 2 == 1,
        )?;
    }
    let spec = ConvSpec::new(3, 1, cfg.channels, cfg.channels);
    let conv = tape.conv2d(
        cur,
        p.get(&format!("{}.conv.w", prefix))?,
        p.get(&format!("{}.conv.b", prefix))?,
        &spec,
    )?;
    tape.add(conv, x)
}

/// 3x3 shallow feature extraction, one feature map per input frame.
pub fn extract_shallow(tape: &mut Tape, frames: &[NodeId], p: &ParamNodes, cfg: &ModelConfig) -> Result<Vec<NodeId>> {
    if frames.is_empty() {
        return Err(Error::Shape("extract_shallow: empty sequence".into()));
    }
    let spec = ConvSpec::new(3, 1, 3, cfg.channels);
    frames
        .iter()
        .map(|&f| tape.conv2d(f, p.get("feat.shallow.w")?, p.get("feat.shallow.b")?, &spec))
        .collect()
}

/// `m_f` RSTBs applied to each frame independently.
pub fn extract_features(tape: &mut Tape, shallow: &[NodeId], p: &ParamNodes, cfg: &ModelConfig) -> Result<Vec<NodeId>> {
    shallow
        .iter()
        .map(|&f| {
            let mut cur = f;
            for i in 0..cfg.m_f {
                cur = rstb_forward(tape, cur, p, &format!("feat.rstb{}", i), cfg)?;
            }
            Ok(cur)
        })
        .collect()
}

/// Pad spatial dims up (reflect) to multiples of `m`; returns pad amounts.
pub fn pad_to_multiple(tape: &mut Tape, x: NodeId, m: usize) -> Result<(NodeId, usize, usize)> {
    let (_, _, h, w) = tape.value(x).shape();
    let ph = (m - h % m) % m;
    let pw = (m - w % m) % m;
    if ph == 0 && pw == 0 {
        return Ok((x, 0, 0));
    }
    let padded = tape.pad_asym(x, 0, ph, 0, pw, PadMode::Reflect)?;
    Ok((padded, ph, pw))
}
