//! Adam with cosine learning-rate annealing and the deterministic training
//! loop: seeded crops, flip/rotation augmentation, forward, backward, update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamNodes};
use crate::reconstruct::{charbonnier_loss, stdan_forward, CHARBONNIER_EPS};
use crate::rng::seeded;
use crate::tensor::Tensor4;

/// Cosine annealing from `lr_max` (step 0) down to `lr_min` (step = total).
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine_lr: total steps must be positive".into()));
    }
    if step > total {
        return Err(Error::Config(format!("cosine_lr: step {} beyond total {}", step, total)));
    }
    let t = step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// First/second moment accumulators, one pair per parameter tensor in
/// registration order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Tensor4>,
    pub v: Vec<Tensor4>,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor4> = params
            .iter()
            .map(|(_, t)| {
                let (n, c, h, w) = t.shape();
                Tensor4::zeros(n, c, h, w)
            })
            .collect();
        OptimState { m: zeros.clone(), v: zeros, step: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam update. `grads` must line up with the parameter
/// registration order.
pub fn adam_step(params: &mut ModelParams, grads: &[Tensor4], state: &mut OptimState, lr: f64) -> Result<()> {
    if grads.len() != params.tensor_count() {
        return Err(Error::Shape(format!(
            "adam_step: {} gradients for {} parameters",
            grads.len(),
            params.tensor_count()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        if !p.same_shape(&grads[i]) {
            return Err(Error::Shape(format!("adam_step: gradient {} shape mismatch", i)));
        }
        for j in 0..p.data.len() {
            let g = grads[i].data[j];
            let m = state.beta1 * state.m[i].data[j] + (1.0 - state.beta1) * g;
            let v = state.beta2 * state.v[i].data[j] + (1.0 - state.beta2) * g * g;
            state.m[i].data[j] = m;
            state.v[i].data[j] = v;
            p.data[j] -= lr * (m / bc1) / ((v / bc2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// `step,lr,loss` per training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e}\n", r.step, r.lr, r.loss));
    }
    s
}

fn flip_h(t: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = t.shape();
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, y, w - 1 - x);
                }
            }
        }
    }
    out
}

/// Quarter-turn counterclockwise; requires a square image.
fn rot90(t: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = t.shape();
    debug_assert_eq!(h, w);
    let mut out = Tensor4::zeros(n, c, w, h);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, w - 1 - x, y) = t.at(ni, ci, y, x);
                }
            }
        }
    }
    out
}

fn crop(t: &Tensor4, y0: usize, x0: usize, size: usize) -> Tensor4 {
    let (n, c, _, _) = t.shape();
    let mut out = Tensor4::zeros(n, c, size, size);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..size {
                for x in 0..size {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, y0 + y, x0 + x);
                }
            }
        }
    }
    out
}

fn augment(t: &Tensor4, flip: bool, quarter_turns: usize) -> Tensor4 {
    let mut cur = if flip { flip_h(t) } else { t.clone() };
    for _ in 0..quarter_turns {
        cur = rot90(&cur);
    }
    cur
}

/// One training sample: aligned LR and GT crops plus shared augmentation.
fn sample_step(
    rng: &mut ChaCha8Rng,
    lr_frames: &[Tensor4],
    gt_frames: &[Tensor4],
    crop_size: usize,
    scale: usize,
    augment_on: bool,
) -> (Vec<Tensor4>, Vec<Tensor4>) {
    let (_, _, h, w) = lr_frames[0].shape();
    let y0 = rng.gen_range(0..=h - crop_size);
    let x0 = rng.gen_range(0..=w - crop_size);
    let flip = augment_on && rng.gen_bool(0.5);
    let quarter_turns = if augment_on { rng.gen_range(0..4usize) } else { 0 };
    let lr: Vec<Tensor4> =
        lr_frames.iter().map(|f| augment(&crop(f, y0, x0, crop_size), flip, quarter_turns)).collect();
    let gt: Vec<Tensor4> = gt_frames
        .iter()
        .map(|f| augment(&crop(f, scale * y0, scale * x0, scale * crop_size), flip, quarter_turns))
        .collect();
    (lr, gt)
}

/// Overfit/training loop on one sequence pair. Returns updated parameters
/// plus the loss history (one record per step, loss measured before the
/// update, so `history[0].loss` is the initialization loss).
pub fn train_loop(
    lr_frames: &[Tensor4],
    gt_frames: &[Tensor4],
    cfg: &RunConfig,
    seed: u64,
) -> Result<(ModelParams, Vec<LossRecord>)> {
    if lr_frames.is_empty() || gt_frames.len() != 2 * lr_frames.len() - 1 {
        return Err(Error::Data(format!(
            "train_loop: {} LR frames need {} GT frames, got {}",
            lr_frames.len(),
            2 * lr_frames.len().max(1) - 1,
            gt_frames.len()
        )));
    }
    let scale = cfg.model.scale;
    let (_, _, h, w) = lr_frames[0].shape();
    let cs = cfg.crop_size;
    if cs == 0 || cs > h || cs > w {
        return Err(Error::Data(format!("crop size {} does not fit {}x{} LR frames", cs, h, w)));
    }
    let (_, _, gh, gw) = gt_frames[0].shape();
    if gh != scale * h || gw != scale * w {
        return Err(Error::Data(format!(
            "train_loop: GT {}x{} is not {}x the LR {}x{}",
            gh, gw, scale, h, w
        )));
    }

    let mut params = ModelParams::init(&cfg.model)?;
    let mut state = OptimState::new(&params, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut rng = seeded(seed);
    let mut history = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let (lr_crop, gt_crop) = sample_step(&mut rng, lr_frames, gt_frames, cs, scale, cfg.augment);
        let lr = cosine_lr(step, cfg.steps, cfg.lr_max, cfg.lr_min)?;

        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        let inputs: Vec<NodeId> = lr_crop.into_iter().map(|f| tape.leaf(f)).collect();
        let targets: Vec<NodeId> = gt_crop.into_iter().map(|f| tape.leaf(f)).collect();
        let pred = stdan_forward(&mut tape, &inputs, &nodes, &cfg.model)?;
        let loss_node = charbonnier_loss(&mut tape, &pred, &targets, CHARBONNIER_EPS)?;
        let loss = tape.value(loss_node).at(0, 0, 0, 0);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        tape.backward(loss_node)?;

        let grads: Vec<Tensor4> =
            params.names().iter().map(|n| nodes.get(n).map(|id| tape.grad(id))).collect::<Result<_>>()?;
        drop(tape);
        adam_step(&mut params, &grads, &mut state, lr)?;
        history.push(LossRecord { step, lr, loss });
    }
    Ok((params, history))
}
