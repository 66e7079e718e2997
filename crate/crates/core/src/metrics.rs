//! Luma-channel PSNR and SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// PSNR reported for bit-identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Studio-swing BT.601 luma: Y = (65.481 R + 128.553 G + 24.966 B + 16)/255,
/// inputs and output in [0, 1].
pub fn rgb_to_y(img: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = img.shape();
    if c != 3 {
        return Err(Error::Shape(format!("rgb_to_y: expected 3 channels, got {}", c)));
    }
    let mut out = Tensor4::zeros(n, 1, h, w);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let r = img.at(ni, 0, y, x);
                let g = img.at(ni, 1, y, x);
                let b = img.at(ni, 2, y, x);
                *out.at_mut(ni, 0, y, x) = (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0;
            }
        }
    }
    Ok(out)
}

/// 10*log10(peak^2 / MSE), capped at 99 dB when MSE is zero.
pub fn psnr(a: &Tensor4, b: &Tensor4, peak: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("psnr: shape mismatch".into()));
    }
    let mse: f64 =
        a.data.iter().zip(b.data.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean local SSIM over valid (fully interior) window positions, single
/// channel, 11x11 Gaussian weighting, standard constants, peak 1.
pub fn ssim(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("ssim: shape mismatch".into()));
    }
    let (n, c, h, w) = a.shape();
    if c != 1 {
        return Err(Error::Shape(format!("ssim: expected 1 channel, got {}", c)));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim: image {}x{} smaller than the {}-tap window", h, w, SSIM_WINDOW)));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);

    let mut acc = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = win[dy] * win[dx];
                        let va = a.at(ni, 0, y0 + dy, x0 + dx);
                        let vb = b.at(ni, 0, y0 + dy, x0 + dx);
                        mu_a += wgt * va;
                        mu_b += wgt * vb;
                        aa += wgt * va * va;
                        bb += wgt * vb * vb;
                        ab += wgt * va * vb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                    / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                count += 1;
            }
        }
    }
    Ok(acc / count as f64)
}

/// Per-frame Y-channel quality plus sequence means.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
}

impl QualityReport {
    /// Compare RGB frame sequences on the Y channel, optionally dropping a
    /// border of `crop_border` pixels on every side first.
    pub fn compute(pred: &[Tensor4], gt: &[Tensor4], crop_border: usize) -> Result<QualityReport> {
        if pred.is_empty() || pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "quality report: {} predictions vs {} references",
                pred.len(),
                gt.len()
            )));
        }
        let mut psnr_db = Vec::with_capacity(pred.len());
        let mut ssim_v = Vec::with_capacity(pred.len());
        for (p, g) in pred.iter().zip(gt.iter()) {
            if !p.same_shape(g) {
                return Err(Error::Shape("quality report: frame shape mismatch".into()));
            }
            let yp = crop(&rgb_to_y(p)?, crop_border)?;
            let yg = crop(&rgb_to_y(g)?, crop_border)?;
            psnr_db.push(psnr(&yp, &yg, 1.0)?);
            ssim_v.push(ssim(&yp, &yg)?);
        }
        let mean_psnr_db = psnr_db.iter().sum::<f64>() / psnr_db.len() as f64;
        let mean_ssim = ssim_v.iter().sum::<f64>() / ssim_v.len() as f64;
        Ok(QualityReport { psnr_db, ssim: ssim_v, mean_psnr_db, mean_ssim })
    }

    /// One CSV row per frame: `frame_index,psnr_db,ssim`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame_index,psnr_db,ssim\n");
        for (i, (p, m)) in self.psnr_db.iter().zip(self.ssim.iter()).enumerate() {
            s.push_str(&format!("{},{:.6},{:.6}\n", i + 1, p, m));
        }
        s
    }
}

fn crop(img: &Tensor4, border: usize) -> Result<Tensor4> {
    if border == 0 {
        return Ok(img.clone());
    }
    let (n, c, h, w) = img.shape();
    if 2 * border >= h || 2 * border >= w {
        return Err(Error::Shape(format!("crop border {} too large for {}x{}", border, h, w)));
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let mut out = Tensor4::zeros(n, c, oh, ow);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    *out.at_mut(ni, ci, y, x) = img.at(ni, ci, y + border, x + border);
                }
            }
        }
    }
    Ok(out)
}
