//! Full-reference quality metrics: PSNR and SSIM.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::image_io::ImageRGB;

/// Value reported when two images are identical.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &ImageRGB, b: &ImageRGB) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::Input(format!(
            "image sizes differ: {}×{} vs {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// PSNR over equal-length value slices on a [0,1] scale.
pub fn psnr_values(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "psnr length");
    let mse = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len().max(1) as f64;
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// `10·log10(1/MSE)` over all pixels and channels, capped at 99 dB.
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_same(a, b)?;
    Ok(psnr_values(a.pixels(), b.pixels()))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-region filter of an `h`×`w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for (i, kv) in k.iter().enumerate() {
            let src = &rows[(y + i) * ow..(y + i + 1) * ow];
            for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), computed per channel
/// over the valid region and averaged.
pub fn ssim(a: &ImageRGB, b: &ImageRGB) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.pixels().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let y: Vec<f64> = b.pixels().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|p| filter_valid(p, h, w, &k));
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Per-image scores plus their arithmetic means.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricEntry {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, pred: &ImageRGB, target: &ImageRGB) -> Result<()> {
        self.entries.push(MetricEntry {
            name: name.into(),
            psnr: psnr(pred, target)?,
            ssim: ssim(pred, target)?,
        });
        Ok(())
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.entries.iter().map(|e| e.ssim))
    }

    /// CSV with a header, one row per image and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,psnr,ssim\n");
        for e in &self.entries {
            s.push_str(&format!("{},{:.6},{:.6}\n", e.name, e.psnr, e.ssim));
        }
        s.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_psnr(), self.mean_ssim()));
        s
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return f64::NAN;
    }
    it.sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize) -> ImageRGB {
        ImageRGB::from_fn(h, w, |y, x, c| {
            0.5 + 0.3 * ((y as f32 * 0.7 + c as f32).sin() * (x as f32 * 0.4).cos())
        })
    }

    fn offset(img: &ImageRGB, d: f32) -> ImageRGB {
        let mut out = img.clone();
        out.pixels_mut().iter_mut().for_each(|v| *v += d);
        out
    }

    #[test]
    fn psnr_closed_forms() {
        let a = ImageRGB::from_fn(8, 8, |_, _, _| 0.4);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        assert!((psnr(&a, &offset(&a, 0.1)).unwrap() - 20.0).abs() < 1e-5);
        assert!((psnr(&a, &offset(&a, 0.01)).unwrap() - 40.0).abs() < 1e-3);
        assert!(psnr(&a, &ImageRGB::from_fn(8, 7, |_, _, _| 0.0)).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_negative() {
        let a = pattern(24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let b = offset(&pattern(24, 20).flip_horizontal(), 0.05);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let neg = ImageRGB::from_fn(24, 20, |y, x, c| 1.0 - a.get(y, x, c));
        let s = ssim(&a, &neg).unwrap();
        assert!(s < 0.5 && s >= -1.0, "ssim vs negative = {s}");
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = pattern(10, 30);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn metrics_invariant_to_joint_flip() {
        let a = pattern(16, 16);
        let b = offset(&pattern(16, 16), 0.02);
        let (fa, fb) = (a.flip_vertical(), b.flip_vertical());
        assert!((ssim(&a, &b).unwrap() - ssim(&fa, &fb).unwrap()).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&fa, &fb).unwrap());
    }

    #[test]
    fn report_csv_rows() {
        let a = pattern(12, 12);
        let mut r = MetricReport::default();
        r.push("x", &a, &a).unwrap();
        r.push("y", &a, &offset(&a, 0.1)).unwrap();
        assert_eq!(r.to_csv().lines().count(), 4);
        assert!((r.mean_psnr() - (99.0 + 20.0) / 2.0).abs() < 1e-4);
    }
}
