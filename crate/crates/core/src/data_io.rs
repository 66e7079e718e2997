//! Synthetic sequence generation, bicubic degradation with temporal
//! decimation, PNG frame I/O, and the binary weight-file format.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::rng::seeded;
use crate::tensor::Tensor4;

pub const WEIGHT_MAGIC: &[u8; 4] = b"STDW";
pub const WEIGHT_VERSION: u16 = 1;

/// Per-frame rigid motion applied to every shape in a synthetic scene,
/// in pixels (and radians for the optional square rotation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Motion {
    pub dx: f64,
    pub dy: f64,
    pub spin: f64,
}

impl Motion {
    pub const STILL: Motion = Motion { dx: 0.0, dy: 0.0, spin: 0.0 };

    /// Parse "dx,dy" or "dx,dy,spin".
    pub fn parse(s: &str) -> Result<Motion> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 2 && parts.len() != 3 {
            return Err(Error::Config(format!("motion '{}': expected dx,dy[,spin]", s)));
        }
        let num = |p: &str| -> Result<f64> {
            p.trim().parse::<f64>().map_err(|_| Error::Config(format!("motion '{}': bad number '{}'", s, p)))
        };
        Ok(Motion {
            dx: num(parts[0])?,
            dy: num(parts[1])?,
            spin: if parts.len() == 3 { num(parts[2])? } else { 0.0 },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Disk,
    Square,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub angle: f64,
    pub color: [f64; 3],
}

/// A deterministic scene: gradient background plus moving shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub shapes: Vec<Shape>,
    pub motion: Motion,
    /// Gradient endpoint colors, top-left to bottom-right.
    pub bg: [[f64; 3]; 2],
}

impl Scene {
    /// 2-4 shapes placed so they stay in frame over `frames` steps of motion.
    pub fn generate(seed: u64, size: usize, frames: usize, motion: Motion) -> Scene {
        let mut rng = seeded(seed);
        let bg = [
            [rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)],
            [rng.gen_range(0.5..0.9), rng.gen_range(0.5..0.9), rng.gen_range(0.5..0.9)],
        ];
        let count = rng.gen_range(2..=4);
        let travel_x = motion.dx * (frames.max(1) - 1) as f64;
        let travel_y = motion.dy * (frames.max(1) - 1) as f64;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let radius = rng.gen_range(0.06..0.14) * size as f64;
            let margin = radius + 1.0;
            let lo_x = margin + (-travel_x).max(0.0);
            let hi_x = size as f64 - margin - travel_x.max(0.0);
            let lo_y = margin + (-travel_y).max(0.0);
            let hi_y = size as f64 - margin - travel_y.max(0.0);
            shapes.push(Shape {
                kind: if rng.gen_bool(0.5) { ShapeKind::Disk } else { ShapeKind::Square },
                cx: if lo_x < hi_x { rng.gen_range(lo_x..hi_x) } else { size as f64 / 2.0 },
                cy: if lo_y < hi_y { rng.gen_range(lo_y..hi_y) } else { size as f64 / 2.0 },
                radius,
                angle: rng.gen_range(0.0..std::f64::consts::FRAC_PI_2),
                color: [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)],
            });
        }
        Scene { size, shapes, motion, bg }
    }

    pub fn background(&self) -> Tensor4 {
        let s = self.size;
        let mut img = Tensor4::zeros(1, 3, s, s);
        for y in 0..s {
            for x in 0..s {
                let t = (x + y) as f64 / (2 * (s - 1).max(1)) as f64;
                for c in 0..3 {
                    *img.at_mut(0, c, y, x) = self.bg[0][c] + t * (self.bg[1][c] - self.bg[0][c]);
                }
            }
        }
        img
    }

    /// Render the scene at (fractional) time `t`; shapes are alpha-blended
    /// over the background with a one-pixel smooth edge.
    pub fn render(&self, t: f64) -> Tensor4 {
        let s = self.size;
        let mut img = self.background();
        for shape in &self.shapes {
            let cx = shape.cx + t * self.motion.dx;
            let cy = shape.cy + t * self.motion.dy;
            let angle = shape.angle + t * self.motion.spin;
            let (sin, cos) = angle.sin_cos();
            for y in 0..s {
                for x in 0..s {
                    let px = x as f64 - cx;
                    let py = y as f64 - cy;
                    // Signed distance to the shape edge, positive outside.
                    let dist = match shape.kind {
                        ShapeKind::Disk => (px * px + py * py).sqrt() - shape.radius,
                        ShapeKind::Square => {
                            let rx = (cos * px + sin * py).abs();
                            let ry = (-sin * px + cos * py).abs();
                            rx.max(ry) - shape.radius
                        }
                    };
                    let alpha = (0.5 - dist).clamp(0.0, 1.0);
                    if alpha > 0.0 {
                        for c in 0..3 {
                            let v = img.at(0, c, y, x);
                            *img.at_mut(0, c, y, x) = v + alpha * (shape.color[c] - v);
                        }
                    }
                }
            }
        }
        for v in &mut img.data {
            *v = v.clamp(0.0, 1.0);
        }
        img
    }
}

/// Generate an odd-length ground-truth sequence; same seed, same frames.
pub fn synth_sequence(seed: u64, frames: usize, size: usize, motion: Motion) -> Result<Vec<Tensor4>> {
    if frames % 2 == 0 || frames == 0 {
        return Err(Error::Data(format!("frame count must be odd, got {}", frames)));
    }
    if size < 2 {
        return Err(Error::Data(format!("frame size must be at least 2, got {}", size)));
    }
    let scene = Scene::generate(seed, size, frames, motion);
    Ok((0..frames).map(|t| scene.render(t as f64)).collect())
}

fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

/// Separable anti-aliased bicubic downscale by an integer factor: the kernel
/// is widened by the factor and the weights renormalized per output pixel.
pub fn bicubic_downscale(img: &Tensor4, scale: usize) -> Result<Tensor4> {
    let (n, c, h, w) = img.shape();
    if scale == 0 || h % scale != 0 || w % scale != 0 {
        return Err(Error::Data(format!("resolution {}x{} not divisible by scale {}", h, w, scale)));
    }
    let fs = scale as f64;
    // Non-repeating mirror for out-of-range taps: -1 -> 1, len -> len-2.
    let reflect = |mut j: isize, len: isize| -> usize {
        loop {
            if j < 0 {
                j = -j;
            } else if j >= len {
                j = 2 * (len - 1) - j;
            } else {
                return j as usize;
            }
        }
    };
    let taps = |out_len: usize, in_len: usize| -> Vec<Vec<(usize, f64)>> {
        (0..out_len)
            .map(|i| {
                let center = (i as f64 + 0.5) * fs - 0.5;
                let lo = (center - 2.0 * fs).ceil() as isize;
                let hi = (center + 2.0 * fs).floor() as isize;
                let mut row: Vec<(usize, f64)> = (lo..=hi)
                    .map(|j| {
                        let wgt = cubic_kernel((j as f64 - center) / fs);
                        (reflect(j, in_len as isize), wgt)
                    })
                    .collect();
                let sum: f64 = row.iter().map(|(_, w)| w).sum();
                row.iter_mut().for_each(|(_, w)| *w /= sum);
                row
            })
            .collect()
    };
    let (oh, ow) = (h / scale, w / scale);
    let col_taps = taps(ow, w);
    let row_taps = taps(oh, h);

    // Horizontal pass, then vertical.
    let mut mid = Tensor4::zeros(n, c, h, ow);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for (x, tap) in col_taps.iter().enumerate() {
                    *mid.at_mut(ni, ci, y, x) = tap.iter().map(|&(j, wgt)| wgt * img.at(ni, ci, y, j)).sum();
                }
            }
        }
    }
    let mut out = Tensor4::zeros(n, c, oh, ow);
    for ni in 0..n {
        for ci in 0..c {
            for (y, tap) in row_taps.iter().enumerate() {
                for x in 0..ow {
                    *out.at_mut(ni, ci, y, x) = tap.iter().map(|&(j, wgt)| wgt * mid.at(ni, ci, j, x)).sum();
                }
            }
        }
    }
    Ok(out)
}

/// Degradation pipeline: keep 1-based odd-index frames (temporal decimation)
/// and bicubic-downscale each by `scale`.
pub fn degrade(gt: &[Tensor4], scale: usize) -> Result<Vec<Tensor4>> {
    if gt.is_empty() || gt.len() % 2 == 0 {
        return Err(Error::Data(format!("degrade: expected an odd frame count, got {}", gt.len())));
    }
    gt.iter().step_by(2).map(|f| bicubic_downscale(f, scale)).collect()
}

/// Clip to [0,1], quantize round-half-up to 8 bits, write RGB PNG.
pub fn write_png(path: &Path, frame: &Tensor4) -> Result<()> {
    let (n, c, h, w) = frame.shape();
    if n != 1 || c != 3 {
        return Err(Error::Data(format!("write_png: expected (1,3,h,w), got {:?}", frame.shape())));
    }
    let mut buf = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..3 {
                buf[(y * w + x) * 3 + ci] = (frame.at(0, ci, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ColorType::Rgb8)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Tensor4> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Tensor4::zeros(1, 3, h, w);
    for (x, y, px) in img.enumerate_pixels() {
        for ci in 0..3 {
            *out.at_mut(0, ci, y as usize, x as usize) = px[ci] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Frame files are `frame_%03d.png`, 1-based and contiguous.
pub fn frame_path(dir: &Path, index_1based: usize) -> PathBuf {
    dir.join(format!("frame_{:03}.png", index_1based))
}

pub fn write_sequence(dir: &Path, frames: &[Tensor4]) -> Result<()> {
    for (i, f) in frames.iter().enumerate() {
        write_png(&frame_path(dir, i + 1), f)?;
    }
    Ok(())
}

/// Read `frame_001.png`, `frame_002.png`, ... until the numbering stops.
pub fn read_sequence(dir: &Path) -> Result<Vec<Tensor4>> {
    let mut frames = Vec::new();
    loop {
        let p = frame_path(dir, frames.len() + 1);
        if !p.exists() {
            break;
        }
        frames.push(read_png(&p)?);
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("no frame_###.png files found in {}", dir.display())));
    }
    let first = frames[0].shape();
    if frames.iter().any(|f| f.shape() != first) {
        return Err(Error::Data(format!("frames in {} differ in resolution", dir.display())));
    }
    Ok(frames)
}

pub fn save_weights(path: &Path, params: &ModelParams) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(WEIGHT_MAGIC);
    buf.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.tensor_count() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        let (n, c, h, w) = t.shape();
        buf.push(4u8);
        for d in [n, c, h, w] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load weights and validate the tensor inventory against `cfg`: every
/// expected tensor must be present with its exact shape, nothing extra.
pub fn load_weights(path: &Path, cfg: &ModelConfig) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    fn take<'a>(bytes: &'a [u8], pos: &mut usize, len: usize) -> Result<&'a [u8]> {
        if *pos + len > bytes.len() {
            return Err(Error::WeightFile("unexpected end of file".into()));
        }
        let s = &bytes[*pos..*pos + len];
        *pos += len;
        Ok(s)
    }
    if take(&bytes, &mut pos, 4)? != WEIGHT_MAGIC {
        return Err(Error::WeightFile("bad magic (not a weight file)".into()));
    }
    let version = u16::from_le_bytes(take(&bytes, &mut pos, 2)?.try_into().unwrap());
    if version != WEIGHT_VERSION {
        return Err(Error::WeightFile(format!("unsupported version {}", version)));
    }
    let count = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;

    let mut params = ModelParams::init(cfg)?;
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&bytes, &mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&bytes, &mut pos, name_len)?.to_vec())
            .map_err(|_| Error::WeightFile("tensor name is not UTF-8".into()))?;
        let rank = take(&bytes, &mut pos, 1)?[0] as usize;
        if rank != 4 {
            return Err(Error::WeightFile(format!("tensor '{}': unsupported rank {}", name, rank)));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let len = dims.iter().product::<usize>();
        let raw = take(&bytes, &mut pos, len * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let target = params
            .get_mut(&name)
            .map_err(|_| Error::WeightFile(format!("unexpected tensor '{}' for this configuration", name)))?;
        if target.shape() != (dims[0], dims[1], dims[2], dims[3]) {
            return Err(Error::WeightFile(format!(
                "tensor '{}': file shape {:?} does not match expected {:?}",
                name,
                dims,
                target.shape()
            )));
        }
        target.data = data;
        seen.insert(name);
    }
    if pos != bytes.len() {
        return Err(Error::WeightFile("trailing bytes after last tensor".into()));
    }
    for name in params.names() {
        if !seen.contains(name) {
            return Err(Error::WeightFile(format!("missing tensor '{}'", name)));
        }
    }
    Ok(params)
}
