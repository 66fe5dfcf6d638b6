//! Full-reference quality metrics: PSNR, SSIM and CIEDE2000.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Serialize, Serializer};

use crate::domain::Image;
use crate::error::{Error, Result};

fn check_same(a: &Image, b: &Image) -> Result<()> {
    a.validate()?;
    b.validate()?;
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit-range images. Identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable "valid" Gaussian filter of a single plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over valid 11×11 Gaussian windows (σ = 1.5) and the three
/// channels, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::SmallerThanWindow {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let x = plane(a, c);
        let y = plane(b, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mu_x = filter_valid(&x, h, w, &k);
        let mu_y = filter_valid(&y, h, w, &k);
        let e_xx = filter_valid(&xx, h, w, &k);
        let e_yy = filter_valid(&yy, h, w, &k);
        let e_xy = filter_valid(&xy, h, w, &k);
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = e_xx[i] - mx * mx;
            let vy = e_yy[i] - my * my;
            let cov = e_xy[i] - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// CIELAB colour, D65 white.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lab {
    pub l: f64,
    pub a: f64,
    pub b: f64,
}

impl Lab {
    pub fn new(l: f64, a: f64, b: f64) -> Self {
        Self { l, a, b }
    }
}

/// Per-pixel Lab values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Lab>,
}

// IEC 61966-2-1 linear sRGB → XYZ.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124, 0.3576, 0.1805],
    [0.2126, 0.7152, 0.0722],
    [0.0193, 0.1192, 0.9505],
];

/// D65 white as the image of linear (1, 1, 1).
fn white() -> [f64; 3] {
    [
        RGB_TO_XYZ[0].iter().sum(),
        RGB_TO_XYZ[1].iter().sum(),
        RGB_TO_XYZ[2].iter().sum(),
    ]
}

const LAB_EPSILON: f64 = 216.0 / 24389.0;
const LAB_KAPPA: f64 = 24389.0 / 27.0;

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > LAB_EPSILON {
        t.cbrt()
    } else {
        (LAB_KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let t = f * f * f;
    if t > LAB_EPSILON {
        t
    } else {
        (116.0 * f - 16.0) / LAB_KAPPA
    }
}

pub fn srgb_pixel_to_lab(rgb: [f64; 3]) -> Lab {
    let lin = rgb.map(srgb_to_linear);
    let wp = white();
    let xyz: [f64; 3] = std::array::from_fn(|r| {
        RGB_TO_XYZ[r].iter().zip(&lin).map(|(m, v)| m * v).sum::<f64>() / wp[r]
    });
    let (fx, fy, fz) = (lab_f(xyz[0]), lab_f(xyz[1]), lab_f(xyz[2]));
    Lab {
        l: 116.0 * fy - 16.0,
        a: 500.0 * (fx - fy),
        b: 200.0 * (fy - fz),
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, row) in inv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

/// Inverse of [`srgb_pixel_to_lab`].
pub fn lab_to_srgb_pixel(lab: Lab) -> [f64; 3] {
    let fy = (lab.l + 16.0) / 116.0;
    let fx = fy + lab.a / 500.0;
    let fz = fy - lab.b / 200.0;
    let wp = white();
    let xyz = [lab_f_inv(fx) * wp[0], lab_f_inv(fy) * wp[1], lab_f_inv(fz) * wp[2]];
    let inv = invert3(&RGB_TO_XYZ);
    std::array::from_fn(|r| linear_to_srgb(inv[r].iter().zip(&xyz).map(|(m, v)| m * v).sum()))
}

pub fn srgb_to_lab(img: &Image) -> Result<LabImage> {
    img.validate()?;
    let pixels = img
        .data()
        .chunks_exact(3)
        .map(|p| srgb_pixel_to_lab([p[0], p[1], p[2]]))
        .collect();
    Ok(LabImage {
        height: img.height(),
        width: img.width(),
        pixels,
    })
}

/// CIEDE2000 colour difference with `k_L = k_C = k_H = 1`.
pub fn ciede2000(p: Lab, q: Lab) -> f64 {
    let deg = |r: f64| r.to_degrees();
    let rad = |d: f64| d.to_radians();

    let c1 = p.a.hypot(p.b);
    let c2 = q.a.hypot(q.b);
    let c_bar = (c1 + c2) / 2.0;
    let c_bar7 = c_bar.powi(7);
    let g = 0.5 * (1.0 - (c_bar7 / (c_bar7 + 25f64.powi(7))).sqrt());
    let a1 = (1.0 + g) * p.a;
    let a2 = (1.0 + g) * q.a;
    let c1p = a1.hypot(p.b);
    let c2p = a2.hypot(q.b);
    let hue = |b: f64, a: f64| {
        if b == 0.0 && a == 0.0 {
            0.0
        } else {
            let h = deg(b.atan2(a));
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(p.b, a1);
    let h2p = hue(q.b, a2);

    let dl = q.l - p.l;
    let dc = c2p - c1p;
    let product = c1p * c2p;
    let dh_angle = if product == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dh = 2.0 * product.sqrt() * (rad(dh_angle) / 2.0).sin();

    let l_bar = (p.l + q.l) / 2.0;
    let cp_bar = (c1p + c2p) / 2.0;
    let hp_bar = if product == 0.0 {
        h1p + h2p
    } else if (h1p - h2p).abs() <= 180.0 {
        (h1p + h2p) / 2.0
    } else if h1p + h2p < 360.0 {
        (h1p + h2p + 360.0) / 2.0
    } else {
        (h1p + h2p - 360.0) / 2.0
    };

    let t = 1.0 - 0.17 * rad(hp_bar - 30.0).cos() + 0.24 * rad(2.0 * hp_bar).cos()
        + 0.32 * rad(3.0 * hp_bar + 6.0).cos()
        - 0.20 * rad(4.0 * hp_bar - 63.0).cos();
    let d_theta = 30.0 * (-((hp_bar - 275.0) / 25.0).powi(2)).exp();
    let cp_bar7 = cp_bar.powi(7);
    let r_c = 2.0 * (cp_bar7 / (cp_bar7 + 25f64.powi(7))).sqrt();
    let l50 = (l_bar - 50.0).powi(2);
    let s_l = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let s_c = 1.0 + 0.045 * cp_bar;
    let s_h = 1.0 + 0.015 * cp_bar * t;
    let r_t = -(2.0 * rad(d_theta)).sin() * r_c;

    let tl = dl / s_l;
    let tc = dc / s_c;
    let th = dh / s_h;
    (tl * tl + tc * tc + th * th + r_t * tc * th).max(0.0).sqrt()
}

/// Mean per-pixel CIEDE2000 between two sRGB images.
pub fn mean_ciede2000(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let la = srgb_to_lab(a)?;
    let lb = srgb_to_lab(b)?;
    let sum: f64 = la.pixels.iter().zip(&lb.pixels).map(|(p, q)| ciede2000(*p, *q)).sum();
    Ok(sum / la.pixels.len() as f64)
}

fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    /// `"inf"` in serialized form when the images are identical.
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub ciede2000: f64,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, pred: &Image, gt: &Image) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            psnr: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
            ciede2000: mean_ciede2000(pred, gt)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub count: usize,
    #[serde(serialize_with = "serialize_db")]
    pub psnr: f64,
    pub ssim: f64,
    pub ciede2000: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    /// Filenames that had no counterpart.
    pub skipped: Vec<String>,
}

impl MetricsReport {
    pub fn summary(&self) -> MetricsSummary {
        let n = self.images.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                self.images.iter().map(f).sum::<f64>() / n as f64
            }
        };
        MetricsSummary {
            count: n,
            psnr: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            ciede2000: mean(|m| m.ciede2000),
        }
    }

    /// One JSON record per image, then skipped entries, then the summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.images {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        for s in &self.skipped {
            out.push_str(&serde_json::to_string(&serde_json::json!({ "skipped": s }))?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({ "summary": self.summary() }))?);
        out.push('\n');
        Ok(out)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "| image | PSNR (dB) | SSIM | CIEDE2000 |");
        let _ = writeln!(out, "|---|---:|---:|---:|");
        for m in &self.images {
            let _ = writeln!(out, "| {} | {:.4} | {:.4} | {:.4} |", m.id, m.psnr, m.ssim, m.ciede2000);
        }
        let s = self.summary();
        let _ = writeln!(out, "| **mean ({})** | {:.4} | {:.4} | {:.4} |", s.count, s.psnr, s.ssim, s.ciede2000);
        for skipped in &self.skipped {
            let _ = writeln!(out, "\nskipped: {skipped}");
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let jsonl = dir.join(format!("{stem}.jsonl"));
        let table = dir.join(format!("{stem}.md"));
        fs::write(&jsonl, self.to_jsonl()?).map_err(|e| Error::output(&jsonl, e))?;
        fs::write(&table, self.to_table()).map_err(|e| Error::output(&table, e))?;
        Ok((jsonl, table))
    }
}

pub(crate) fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            .unwrap_or(false)
}

pub(crate) fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if is_image_file(&path) {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Scores every prediction against the ground-truth file of the same name.
/// Images are compared as stored (8-bit).
pub fn evaluate_pairs(pred_dir: &Path, gt_dir: &Path) -> Result<MetricsReport> {
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    let mut report = MetricsReport::default();
    for (name, pred_path) in &preds {
        match gts.get(name) {
            Some(gt_path) => {
                let pred = Image::load(pred_path)?;
                let gt = Image::load(gt_path)?;
                report.images.push(ImageMetrics::compute(name.clone(), &pred, &gt)?);
            }
            None => {
                log::warn!("no ground truth for {name}; skipped");
                report.skipped.push(name.clone());
            }
        }
    }
    for name in gts.keys().filter(|n| !preds.contains_key(*n)) {
        log::warn!("no prediction for {name}; skipped");
        report.skipped.push(name.clone());
    }
    if report.images.is_empty() {
        return Err(Error::NoPairs(pred_dir.to_path_buf()));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn psnr_cases() {
        let a = Image::filled(8, 8, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(8, 8, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let zero = Image::filled(8, 8, 0.0);
        let one = Image::filled(8, 8, 1.0);
        assert_eq!(psnr(&zero, &one).unwrap(), 0.0);
        assert!(psnr(&a, &Image::filled(8, 9, 0.3)).is_err());
    }

    #[test]
    fn ssim_cases() {
        let x = noise_image(1, 24, 20);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let c = Image::filled(16, 16, 0.6);
        assert_eq!(ssim(&c, &c.map(|v| v + 0.0)).unwrap(), 1.0);
        let y = noise_image(2, 24, 20);
        let s = ssim(&x, &y).unwrap();
        assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-9);
        assert!((-1.0..1.0).contains(&s));
        let err = ssim(&Image::filled(10, 30, 0.1), &Image::filled(10, 30, 0.1)).unwrap_err();
        assert!(matches!(err, Error::SmallerThanWindow { .. }));
    }

    #[test]
    fn ssim_drops_with_noise() {
        let x = noise_image(3, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = x.map(|v| v + rng.random_range(-0.2..0.2));
        assert!(ssim(&x, &y).unwrap() < 0.95);
    }

    #[test]
    fn lab_reference_points() {
        let white = srgb_pixel_to_lab([1.0, 1.0, 1.0]);
        assert!((white.l - 100.0).abs() < 1e-9 && white.a.abs() < 0.01 && white.b.abs() < 0.01);
        let black = srgb_pixel_to_lab([0.0, 0.0, 0.0]);
        assert_eq!((black.l, black.a, black.b), (0.0, 0.0, 0.0));
        let gray = srgb_pixel_to_lab([0.5, 0.5, 0.5]);
        assert!(gray.l > 50.0 && gray.l < 56.0, "{gray:?}");
        assert!(gray.a.abs() < 0.01 && gray.b.abs() < 0.01);
    }

    #[test]
    fn ciede2000_basics() {
        let p = Lab::new(50.0, 2.5, 0.0);
        let q = Lab::new(73.0, 25.0, -18.0);
        assert_eq!(ciede2000(p, p), 0.0);
        assert!((ciede2000(p, q) - ciede2000(q, p)).abs() < 1e-12);
        assert!(ciede2000(p, Lab::new(50.0, 2.5, 1e-9)) > 0.0);
    }

    #[test]
    fn report_means_and_json() {
        let report = MetricsReport {
            images: vec![
                ImageMetrics { id: "a".into(), psnr: 20.0, ssim: 0.5, ciede2000: 1.0 },
                ImageMetrics { id: "b".into(), psnr: 30.0, ssim: 0.7, ciede2000: 3.0 },
            ],
            skipped: vec!["c.png".into()],
        };
        let s = report.summary();
        assert_eq!(s.psnr, 25.0);
        assert!((s.ssim - 0.6).abs() < 1e-15);
        assert_eq!(s.ciede2000, 2.0);
        let jsonl = report.to_jsonl().unwrap();
        assert_eq!(jsonl.lines().count(), 4);
        let inf = MetricsReport {
            images: vec![ImageMetrics { id: "x".into(), psnr: f64::INFINITY, ssim: 1.0, ciede2000: 0.0 }],
            skipped: vec![],
        };
        assert!(inf.to_jsonl().unwrap().contains("\"psnr\":\"inf\""));
    }
}
