//! Finite-difference verification of the reverse-mode gradients. Each
//! registered case builds a scalar loss from a set of checked input tensors;
//! the analytic gradient from one backward pass is compared element-wise
//! against central differences of the rebuilt forward pass.

use std::sync::Arc;

use crate::autodiff::{NodeId, Tape};
use crate::config::{ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamNodes};
use crate::rng::{rng_tensor_range, seeded};
use crate::tensor::{ConvSpec, Tensor4};
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const PASS_TOL: f64 = 1e-4;

/// Guard thresholds: finite differencing must not step across a top-T
/// selection boundary or a sampling/activation kink.
const MIN_SELECT_GAP: f64 = 1e-3;
const MIN_COORD_MARGIN: f64 = 0.02;
const MIN_ACTIVATION_MARGIN: f64 = 1e-4;

type Builder = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;

/// One gradient-check problem: checked inputs plus a loss builder. Any
/// parameters or constants the loss needs are captured inside the builder.
pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor4>,
    pub build: Builder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_values: usize,
    pub pass: bool,
}

fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

fn eval_loss(case: &GradCase, inputs: &[Tensor4]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = (case.build)(&mut tape, &ids)?;
    Ok(tape.value(loss).at(0, 0, 0, 0))
}

/// Check one case: analytic gradients of every checked input against central
/// finite differences with step `FD_STEP`.
pub fn check_case(case: &GradCase) -> Result<GradReport> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = (case.build)(&mut tape, &ids)?;
    if tape.min_select_gap < MIN_SELECT_GAP {
        return Err(Error::Autodiff(format!(
            "{}: selection gap {:.2e} too small for finite differences",
            case.name, tape.min_select_gap
        )));
    }
    if tape.min_coord_margin < MIN_COORD_MARGIN {
        return Err(Error::Autodiff(format!(
            "{}: sample coordinate margin {:.2e} too small for finite differences",
            case.name, tape.min_coord_margin
        )));
    }
    if tape.min_activation_margin < MIN_ACTIVATION_MARGIN {
        return Err(Error::Autodiff(format!(
            "{}: activation margin {:.2e} too small for finite differences",
            case.name, tape.min_activation_margin
        )));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor4> = ids.iter().map(|&id| tape.grad(id)).collect();
    drop(tape);

    let mut max_rel = 0.0_f64;
    let mut checked = 0usize;
    let mut work = case.inputs.to_vec();
    for (i, input) in case.inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data[j];
            work[i].data[j] = orig + FD_STEP;
            let up = eval_loss(case, &work)?;
            work[i].data[j] = orig - FD_STEP;
            let down = eval_loss(case, &work)?;
            work[i].data[j] = orig;
            let fd = (up - down) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic[i].data[j], fd));
            checked += 1;
        }
    }
    Ok(GradReport { name: case.name.clone(), max_rel_err: max_rel, checked_values: checked, pass: max_rel <= PASS_TOL })
}

/// Names of all registered cases, in execution order.
pub fn registered_ops() -> Vec<&'static str> {
    vec![
        "conv2d",
        "linear",
        "layer_norm",
        "softmax",
        "bilinear_sample",
        "leaky_relu",
        "pixel_shuffle",
        "dfi_block",
        "stdfa_forward",
        "stb_forward",
        "upsample_x4",
        "charbonnier_loss",
        "micro_model",
    ]
}

// A fixed projection turns a tensor-valued op into a scalar loss with dense,
// non-degenerate upstream gradients.
fn proj_for(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Arc<Tensor4> {
    Arc::new(rng_tensor_range(n, c, h, w, seed ^ 0x9e37_79b9, -1.0, 1.0))
}

/// Values bounded away from zero, for kinked activations.
fn kink_safe_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor4 {
    let mut t = rng_tensor_range(n, c, h, w, seed, -1.0, 1.0);
    for v in &mut t.data {
        if v.abs() < 0.1 {
            *v = 0.1_f64.copysign(*v);
        }
    }
    t
}

fn case_conv2d(seed: u64) -> GradCase {
    let spec = ConvSpec::new(3, 1, 3, 4);
    GradCase {
        name: "conv2d".into(),
        inputs: vec![
            rng_tensor_range(2, 3, 5, 5, seed, -1.0, 1.0),
            rng_tensor_range(4, 3, 3, 3, seed + 1, -0.5, 0.5),
            rng_tensor_range(4, 1, 1, 1, seed + 2, -0.5, 0.5),
        ],
        build: Box::new(move |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], &spec)?;
            tape.dot_const(y, proj_for(2, 4, 5, 5, seed))
        }),
    }
}

fn case_linear(seed: u64) -> GradCase {
    GradCase {
        name: "linear".into(),
        inputs: vec![
            rng_tensor_range(1, 4, 3, 3, seed, -1.0, 1.0),
            rng_tensor_range(5, 4, 1, 1, seed + 1, -0.5, 0.5),
            rng_tensor_range(5, 1, 1, 1, seed + 2, -0.5, 0.5),
        ],
        build: Box::new(move |tape, ids| {
            let y = tape.linear(ids[0], ids[1], ids[2])?;
            tape.dot_const(y, proj_for(1, 5, 3, 3, seed))
        }),
    }
}

fn case_layer_norm(seed: u64) -> GradCase {
    GradCase {
        name: "layer_norm".into(),
        inputs: vec![
            rng_tensor_range(1, 6, 2, 2, seed, -1.0, 1.0),
            rng_tensor_range(6, 1, 1, 1, seed + 1, 0.5, 1.5),
            rng_tensor_range(6, 1, 1, 1, seed + 2, -0.5, 0.5),
        ],
        build: Box::new(move |tape, ids| {
            let y = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            tape.dot_const(y, proj_for(1, 6, 2, 2, seed))
        }),
    }
}

fn case_softmax(seed: u64) -> GradCase {
    GradCase {
        name: "softmax".into(),
        inputs: vec![rng_tensor_range(1, 7, 3, 3, seed, -2.0, 2.0)],
        build: Box::new(move |tape, ids| {
            let y = tape.softmax_channels(ids[0])?;
            tape.dot_const(y, proj_for(1, 7, 3, 3, seed))
        }),
    }
}

fn case_bilinear_sample(seed: u64) -> GradCase {
    // k=1 deformable gather: one bilinear read per position at a fractional,
    // interior-safe offset. Checks image and coordinate gradients.
    let mut rng = seeded(seed + 7);
    let mut offsets = Tensor4::zeros(1, 2, 4, 4);
    for v in &mut offsets.data {
        *v = rng.gen_range(0.15..0.45) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    }
    // Keep samples strictly inside the image: pull border pixels inward.
    for y in 0..4 {
        for x in 0..4 {
            if x == 0 {
                *offsets.at_mut(0, 0, y, x) = offsets.at(0, 0, y, x).abs();
            }
            if x == 3 {
                *offsets.at_mut(0, 0, y, x) = -offsets.at(0, 0, y, x).abs();
            }
            if y == 0 {
                *offsets.at_mut(0, 1, y, x) = offsets.at(0, 1, y, x).abs();
            }
            if y == 3 {
                *offsets.at_mut(0, 1, y, x) = -offsets.at(0, 1, y, x).abs();
            }
        }
    }
    GradCase {
        name: "bilinear_sample".into(),
        inputs: vec![rng_tensor_range(1, 3, 4, 4, seed, -1.0, 1.0), offsets],
        build: Box::new(move |tape, ids| {
            let y = tape.deform_gather(ids[0], ids[1], 1, None)?;
            tape.dot_const(y, proj_for(1, 3, 4, 4, seed))
        }),
    }
}

fn case_leaky_relu(seed: u64) -> GradCase {
    GradCase {
        name: "leaky_relu".into(),
        inputs: vec![kink_safe_tensor(1, 4, 4, 4, seed)],
        build: Box::new(move |tape, ids| {
            let y = tape.leaky_relu(ids[0], 0.1)?;
            tape.dot_const(y, proj_for(1, 4, 4, 4, seed))
        }),
    }
}

fn case_pixel_shuffle(seed: u64) -> GradCase {
    GradCase {
        name: "pixel_shuffle".into(),
        inputs: vec![rng_tensor_range(1, 8, 3, 3, seed, -1.0, 1.0)],
        build: Box::new(move |tape, ids| {
            let y = tape.pixel_shuffle(ids[0], 2)?;
            tape.dot_const(y, proj_for(1, 2, 6, 6, seed))
        }),
    }
}

/// Standalone DFI parameter set with a live (non-zero) offset head whose
/// biases force fractional sample coordinates.
fn dfi_params(prefix: &str, c: usize, seed: u64) -> ModelParams {
    let mut p = ModelParams::empty();
    let reg = |p: &mut ModelParams, name: String, t: Tensor4| p.register(&name, t).expect("unique");
    reg(&mut p, format!("{}.og0.w", prefix), rng_tensor_range(c, 2 * c, 3, 3, seed, -0.2, 0.2));
    reg(&mut p, format!("{}.og0.b", prefix), kink_safe_tensor(c, 1, 1, 1, seed + 1));
    reg(&mut p, format!("{}.og1.w", prefix), rng_tensor_range(18, c, 3, 3, seed + 2, -0.05, 0.05));
    reg(&mut p, format!("{}.og1.b", prefix), rng_tensor_range(18, 1, 1, 1, seed + 3, 0.2, 0.4));
    reg(&mut p, format!("{}.dconv.w", prefix), rng_tensor_range(c, c, 3, 3, seed + 4, -0.3, 0.3));
    reg(&mut p, format!("{}.dconv.b", prefix), rng_tensor_range(c, 1, 1, 1, seed + 5, -0.1, 0.1));
    p
}

fn case_dfi_block(seed: u64) -> GradCase {
    let c = 4;
    let params = dfi_params("d", c, seed + 100);
    GradCase {
        name: "dfi_block".into(),
        inputs: vec![
            rng_tensor_range(1, c, 5, 5, seed, -1.0, 1.0),
            rng_tensor_range(1, c, 5, 5, seed + 1, -1.0, 1.0),
        ],
        build: Box::new(move |tape, ids| {
            let nodes = ParamNodes::new(tape, &params);
            let y = crate::lstfi::dfi_block(tape, ids[0], ids[1], &nodes, "d", false)?;
            tape.dot_const(y, proj_for(1, 4, 5, 5, seed))
        }),
    }
}

/// Aggregation parameters with randomized output map and offset head so the
/// whole path carries gradient and coordinates stay fractional.
fn stdfa_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::init(cfg).expect("valid config");
    let c = cfg.channels;
    let ce = cfg.embed_channels;
    let k = cfg.kernel_size;
    *params.get_mut("stdfa.out.w").unwrap() = rng_tensor_range(c, ce, 1, 1, seed, -0.3, 0.3);
    *params.get_mut("stdfa.og1.w").unwrap() = rng_tensor_range(2 * k * k, ce, 3, 3, seed + 1, -0.03, 0.03);
    *params.get_mut("stdfa.og1.b").unwrap() = rng_tensor_range(2 * k * k, 1, 1, 1, seed + 2, 0.2, 0.4);
    // Spread the relevance scores out so top-T selections are tie-free.
    *params.get_mut("stdfa.q.w").unwrap() = rng_tensor_range(ce, c, 1, 1, seed + 3, -1.5, 1.5);
    *params.get_mut("stdfa.k.w").unwrap() = rng_tensor_range(ce, c, 1, 1, seed + 4, -1.5, 1.5);
    params
}

fn stdfa_micro_config() -> ModelConfig {
    let mut cfg = ModelConfig::micro();
    cfg.channels = 4;
    cfg.embed_channels = 4;
    cfg.heads = 2;
    cfg.variant = Variant::Full;
    cfg
}

fn case_stdfa_forward(seed: u64) -> GradCase {
    let cfg = stdfa_micro_config();
    let params = stdfa_params(&cfg, seed + 300);
    let inputs: Vec<Tensor4> =
        (0..3).map(|i| rng_tensor_range(1, 4, 2, 2, seed + i, -1.0, 1.0)).collect();
    GradCase {
        name: "stdfa_forward".into(),
        inputs,
        build: Box::new(move |tape, ids| {
            let nodes = ParamNodes::new(tape, &params);
            let out = crate::stdfa::stdfa_forward(tape, ids, &nodes, &cfg)?;
            let cat = tape.concat_channels(&out)?;
            tape.dot_const(cat, proj_for(1, 12, 2, 2, seed))
        }),
    }
}

fn case_stb_forward(seed: u64) -> GradCase {
    let mut cfg = ModelConfig::micro();
    cfg.channels = 4;
    cfg.embed_channels = 4;
    cfg.heads = 2;
    cfg.window_size = 2;
    let params = ModelParams::init(&cfg).expect("valid config");
    GradCase {
        name: "stb_forward".into(),
        inputs: vec![rng_tensor_range(1, 4, 4, 4, seed, -1.0, 1.0)],
        build: Box::new(move |tape, ids| {
            let nodes = ParamNodes::new(tape, &params);
            let y = crate::feat_extract::stb_forward(tape, ids[0], &nodes, "feat.rstb0.stb0", 2, 2, true)?;
            tape.dot_const(y, proj_for(1, 4, 4, 4, seed))
        }),
    }
}

fn case_upsample(seed: u64) -> GradCase {
    let cfg = ModelConfig::micro();
    let params = ModelParams::init(&cfg).expect("valid config");
    GradCase {
        name: "upsample_x4".into(),
        inputs: vec![rng_tensor_range(1, 8, 3, 3, seed, -1.0, 1.0)],
        build: Box::new(move |tape, ids| {
            let nodes = ParamNodes::new(tape, &params);
            let y = crate::reconstruct::upsample_x4(tape, ids[0], &nodes, &cfg)?;
            tape.dot_const(y, proj_for(1, 3, 12, 12, seed))
        }),
    }
}

fn case_charbonnier(seed: u64) -> GradCase {
    GradCase {
        name: "charbonnier_loss".into(),
        inputs: vec![
            rng_tensor_range(1, 3, 3, 3, seed, 0.0, 1.0),
            rng_tensor_range(1, 3, 3, 3, seed + 1, 0.0, 1.0),
        ],
        build: Box::new(move |tape, ids| tape.charbonnier(ids[0], ids[1], 1e-3)),
    }
}

fn case_micro_model(seed: u64) -> GradCase {
    let mut cfg = stdfa_micro_config();
    cfg.window_size = 2;
    let mut params = stdfa_params(&cfg, seed + 500);
    // Put the deformable interpolation offsets at fractional positions too;
    // fresh zero offsets sit exactly on the integer-grid kinks.
    for dir in ["fwd", "bwd"] {
        for blk in ["dfi_n", "dfi_h"] {
            let name = format!("lstfi.{}.{}.og1", dir, blk);
            let wseed = seed + 600 + name.len() as u64;
            *params.get_mut(&format!("{}.w", name)).unwrap() =
                rng_tensor_range(18, 4, 3, 3, wseed, -0.03, 0.03);
            *params.get_mut(&format!("{}.b", name)).unwrap() =
                rng_tensor_range(18, 1, 1, 1, wseed + 1, 0.2, 0.4);
        }
    }
    let inputs: Vec<Tensor4> =
        (0..2).map(|i| rng_tensor_range(1, 3, 2, 2, seed + i, 0.0, 1.0)).collect();
    let targets: Vec<Tensor4> =
        (0..3).map(|i| rng_tensor_range(1, 3, 8, 8, seed + 10 + i, 0.0, 1.0)).collect();
    GradCase {
        name: "micro_model".into(),
        inputs,
        build: Box::new(move |tape, ids| {
            let nodes = ParamNodes::new(tape, &params);
            let pred = crate::reconstruct::stdan_forward(tape, ids, &nodes, &cfg)?;
            let tgt: Vec<NodeId> = targets.iter().map(|t| tape.leaf(t.clone())).collect();
            crate::reconstruct::charbonnier_loss(tape, &pred, &tgt, 1e-3)
        }),
    }
}

fn build_case(op: &str, seed: u64) -> Result<GradCase> {
    match op {
        "conv2d" => Ok(case_conv2d(seed)),
        "linear" => Ok(case_linear(seed)),
        "layer_norm" => Ok(case_layer_norm(seed)),
        "softmax" => Ok(case_softmax(seed)),
        "bilinear_sample" => Ok(case_bilinear_sample(seed)),
        "leaky_relu" => Ok(case_leaky_relu(seed)),
        "pixel_shuffle" => Ok(case_pixel_shuffle(seed)),
        "dfi_block" => Ok(case_dfi_block(seed)),
        "stdfa_forward" => Ok(case_stdfa_forward(seed)),
        "stb_forward" => Ok(case_stb_forward(seed)),
        "upsample_x4" => Ok(case_upsample(seed)),
        "charbonnier_loss" => Ok(case_charbonnier(seed)),
        "micro_model" => Ok(case_micro_model(seed)),
        _ => Err(Error::Config(format!("unknown gradcheck op '{}'", op))),
    }
}

/// Build a finite-difference-safe case for one op: probe a forward pass and
/// resample the seed until no sampling kink, activation kink, or selection
/// tie sits within reach of the difference step.
pub fn case_for(op: &str, seed: u64) -> Result<GradCase> {
    for attempt in 0..50u64 {
        let case = build_case(op, seed + attempt * 1009)?;
        let mut probe = Tape::new();
        let ids: Vec<NodeId> = case.inputs.iter().map(|t| probe.leaf(t.clone())).collect();
        (case.build)(&mut probe, &ids)?;
        if probe.min_select_gap >= MIN_SELECT_GAP
            && probe.min_coord_margin >= MIN_COORD_MARGIN
            && probe.min_activation_margin >= MIN_ACTIVATION_MARGIN
        {
            return Ok(case);
        }
    }
    Err(Error::Autodiff(format!("{}: no difference-safe input found in 50 attempts", op)))
}

pub fn run_op(op: &str, seed: u64) -> Result<GradReport> {
    check_case(&case_for(op, seed)?)
}

pub fn run_all(seed: u64) -> Result<Vec<GradReport>> {
    registered_ops().iter().map(|op| run_op(op, seed)).collect()
}
