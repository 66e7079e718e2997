//! Command-line front end: synthetic data generation, training, inference,
//! gradient checking, and quality evaluation.
//!
//! Exit codes: 0 on success, 1 for usage/configuration errors, 2 for runtime
//! failures. `STDAN_SEED` overrides `--seed` when set.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::autodiff::gradcheck;
use crate::config::RunConfig;
use crate::data_io::{self, Motion};
use crate::error::{Error, Result};
use crate::metrics::QualityReport;
use crate::params::ParamNodes;
use crate::reconstruct;
use crate::stdfa;
use crate::tensor::Tensor4;
use crate::train;

#[derive(Parser, Debug)]
#[command(name = "stdan", version, about = "Space-time video super-resolution (x4, 2N-1 frames out)")]
struct Cli {
    /// RNG seed. The STDAN_SEED environment variable takes precedence.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker thread cap; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a synthetic moving-shapes sequence: full-rate ground truth
    /// under gt/, decimated and x4-downscaled input under lr/.
    Synth {
        /// Output directory; gt/ and lr/ are created inside it.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth frame count (odd).
        #[arg(long, default_value_t = 7)]
        frames: usize,
        /// Ground-truth frame edge in pixels (multiple of 4).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Per-frame shape motion "dx,dy[,spin]" in pixels/frame.
        #[arg(long, default_value = "2,1")]
        motion: String,
    },
    /// Train on one sequence pair (DIR/lr + DIR/gt) and write weights.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
        /// Output weight file.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-step loss log (CSV: step,lr,loss).
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Upsample a low-resolution sequence with trained weights.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        /// Input directory of low-resolution frames.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output directory for the 2N-1 upsampled frames.
        #[arg(long)]
        out: PathBuf,
        /// JSON run configuration matching the weights; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model variant override (omega1..omega5, full).
        #[arg(long)]
        variant: Option<String>,
        /// Write the aggregation sampling positions to this CSV.
        #[arg(long)]
        dump_offsets: Option<PathBuf>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        /// Operation name, or "all".
        #[arg(long, default_value = "all")]
        op: String,
    },
    /// Y-channel PSNR/SSIM of a predicted sequence against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Pixels to trim from every border before measuring.
        #[arg(long, default_value_t = 0)]
        crop_border: usize,
        /// Optional per-frame CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

/// Parse arguments, run one command, and return the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let seed = match std::env::var("STDAN_SEED") {
        Ok(s) => match s.parse::<u64>() {
            Ok(v) => v,
            Err(_) => {
                eprintln!("error: STDAN_SEED must be an unsigned integer, got '{}'", s);
                return 1;
            }
        },
        Err(_) => cli.seed,
    };
    if cli.threads > 0 {
        // Ignore the error if a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match dispatch(cli.cmd, seed) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cmd: Cmd, seed: u64) -> Result<()> {
    match cmd {
        Cmd::Synth { out, frames, size, motion } => cmd_synth(&out, frames, size, &motion, seed),
        Cmd::Train { data, config, steps, out, loss_csv } => {
            cmd_train(&data, config.as_deref(), steps, &out, loss_csv.as_deref(), seed)
        }
        Cmd::Infer { weights, input, out, config, variant, dump_offsets } => cmd_infer(
            &weights,
            &input,
            &out,
            config.as_deref(),
            variant.as_deref(),
            dump_offsets.as_deref(),
        ),
        Cmd::Gradcheck { op } => cmd_gradcheck(&op, seed),
        Cmd::Eval { pred, gt, crop_border, csv } => {
            cmd_eval(&pred, &gt, crop_border, csv.as_deref())
        }
    }
}

fn cmd_synth(out: &Path, frames: usize, size: usize, motion: &str, seed: u64) -> Result<()> {
    let motion = Motion::parse(motion).map_err(|e| Error::Config(e.to_string()))?;
    if size % 4 != 0 || size == 0 {
        return Err(Error::Config(format!("--size must be a positive multiple of 4, got {}", size)));
    }
    if frames % 2 == 0 || frames < 3 {
        return Err(Error::Config(format!("--frames must be odd and at least 3, got {}", frames)));
    }
    let gt = data_io::synth_sequence(seed, frames, size, motion)?;
    let lr = data_io::degrade(&gt, 4)?;
    data_io::write_sequence(&out.join("gt"), &gt)?;
    data_io::write_sequence(&out.join("lr"), &lr)?;
    println!(
        "synth: {} gt frames at {}x{} -> {} lr frames at {}x{} in {}",
        frames,
        size,
        size,
        lr.len(),
        size / 4,
        size / 4,
        out.display()
    );
    Ok(())
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_json(&std::fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    steps: Option<usize>,
    out: &Path,
    loss_csv: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    let lr = data_io::read_sequence(&data.join("lr"))?;
    let gt = data_io::read_sequence(&data.join("gt"))?;
    let (params, history) = train::train_loop(&lr, &gt, &cfg, seed)?;
    data_io::save_weights(out, &params)?;
    if let Some(p) = loss_csv {
        std::fs::write(p, train::history_csv(&history))?;
    }
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!("train: {} steps, loss {:.6} -> {:.6}, weights in {}", history.len(), first.loss, last.loss, out.display());
    } else {
        println!("train: 0 steps, initial weights in {}", out.display());
    }
    Ok(())
}

fn cmd_infer(
    weights: &Path,
    input: &Path,
    out: &Path,
    config: Option<&Path>,
    variant: Option<&str>,
    dump_offsets: Option<&Path>,
) -> Result<()> {
    let mut cfg = load_run_config(config)?;
    if let Some(v) = variant {
        cfg.model.variant = v.parse()?;
    }
    cfg.model.validate()?;
    let params = data_io::load_weights(weights, &cfg.model)?;
    let lr = data_io::read_sequence(input)?;
    let sr = reconstruct::infer(&lr, &params, &cfg.model)?;
    data_io::write_sequence(out, &sr)?;
    if let Some(csv) = dump_offsets {
        let rows = selection_rows(&lr, &params, &cfg)?;
        let mut s = String::from("frame_i,frame_j,x,y,xi,sample_x,sample_y,weight\n");
        for r in rows {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
                r.frame_i, r.frame_j, r.x, r.y, r.grid_index, r.sample_x, r.sample_y, r.weight
            ));
        }
        std::fs::write(csv, s)?;
    }
    println!("infer: {} frames -> {} frames in {}", lr.len(), sr.len(), out.display());
    Ok(())
}

/// Recompute the aggregation-stage inputs (padded shallow features, RSTBs,
/// interpolation) without gradients and dump the sampling records.
fn selection_rows(
    lr: &[Tensor4],
    params: &crate::params::ModelParams,
    cfg: &RunConfig,
) -> Result<Vec<stdfa::SelectionRow>> {
    use crate::autodiff::{NodeId, Tape};
    let mut feats = Vec::with_capacity(lr.len());
    for frame in lr {
        let mut tape = Tape::new();
        let p = ParamNodes::new(&mut tape, params);
        let f = tape.leaf(frame.clone());
        let (padded, _, _) = crate::feat_extract::pad_to_multiple(&mut tape, f, cfg.model.window_size)?;
        let shallow = crate::feat_extract::extract_shallow(&mut tape, &[padded], &p, &cfg.model)?;
        let deep = crate::feat_extract::extract_features(&mut tape, &shallow, &p, &cfg.model)?;
        feats.push(tape.value(deep[0]).clone());
    }
    let interp: Vec<Tensor4> = {
        let mut tape = Tape::new();
        let p = ParamNodes::new(&mut tape, params);
        let nodes: Vec<NodeId> = feats.iter().map(|f| tape.leaf(f.clone())).collect();
        let seq = crate::lstfi::interpolate_sequence(&mut tape, &nodes, &p, &cfg.model)?;
        seq.iter().map(|&f| tape.value(f).clone()).collect()
    };
    stdfa::selection_dump(&interp, params, &cfg.model)
}

fn cmd_gradcheck(op: &str, seed: u64) -> Result<()> {
    let reports = if op == "all" {
        gradcheck::run_all(seed)?
    } else {
        vec![gradcheck::run_op(op, seed)?]
    };
    let mut all_pass = true;
    for r in &reports {
        println!(
            "gradcheck {}: max_rel_err={:.3e} over {} values ... {}",
            r.name,
            r.max_rel_err,
            r.checked_values,
            if r.pass { "PASS" } else { "FAIL" }
        );
        all_pass &= r.pass;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Error::Autodiff("gradient check failed".into()))
    }
}

fn cmd_eval(pred: &Path, gt: &Path, crop_border: usize, csv: Option<&Path>) -> Result<()> {
    let pred = data_io::read_sequence(pred)?;
    let gt = data_io::read_sequence(gt)?;
    let report = QualityReport::compute(&pred, &gt, crop_border)?;
    if let Some(p) = csv {
        std::fs::write(p, report.to_csv())?;
    }
    println!("eval: mean_psnr_db={:.4} mean_ssim={:.5} ({} frames)", report.mean_psnr_db, report.mean_ssim, pred.len());
    Ok(())
}
