//! Image-quality metrics on `[H, W, B]` cubes: PSNR, SSIM, SAM, CC, RMSE, ERGAS.

use log::warn;

use crate::error::{CstError, Result};
use crate::tensor::Tensor;

/// How PSNR aggregates over bands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PsnrMode {
    /// One MSE over the whole cube.
    #[default]
    Global,
    /// Mean of per-band PSNR values.
    BandMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct MetricOptions {
    pub psnr_mode: PsnrMode,
    /// Pixels removed from every spatial border before scoring.
    pub border: usize,
}

fn dims(sr: &Tensor, hr: &Tensor) -> Result<(usize, usize, usize)> {
    if sr.shape() != hr.shape() || sr.shape().len() != 3 {
        return Err(CstError::DimMismatch(format!(
            "metric operands {:?} vs {:?}",
            sr.shape(),
            hr.shape()
        )));
    }
    let s = sr.shape();
    Ok((s[0], s[1], s[2]))
}

fn mse(sr: &Tensor, hr: &Tensor) -> f64 {
    let n = sr.len() as f64;
    sr.data()
        .iter()
        .zip(hr.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n
}

fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (range * range / mse).log10()
    }
}

/// Cube-global PSNR in dB; `+inf` for identical inputs.
pub fn psnr(sr: &Tensor, hr: &Tensor, data_range: f64) -> Result<f64> {
    dims(sr, hr)?;
    Ok(psnr_from_mse(mse(sr, hr), data_range))
}

/// Mean of per-band PSNR values.
pub fn psnr_band_mean(sr: &Tensor, hr: &Tensor, data_range: f64) -> Result<f64> {
    let (h, w, b) = dims(sr, hr)?;
    let mut total = 0.0;
    for c in 0..b {
        let mut e = 0.0;
        for p in 0..h * w {
            let d = sr.data()[p * b + c] - hr.data()[p * b + c];
            e += d * d;
        }
        total += psnr_from_mse(e / (h * w) as f64, data_range);
    }
    Ok(total / b as f64)
}

pub fn rmse(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    dims(sr, hr)?;
    Ok(mse(sr, hr).sqrt())
}

fn gaussian_window() -> [f64; 11] {
    let mut g = [0.0; 11];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable valid-region filtering of an `h x w` plane with the 11-tap window.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; 11]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h - 10, w - 10);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..11).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..11).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean over bands of single-scale SSIM (11x11 Gaussian, sigma 1.5, range 1).
pub fn ssim(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    let (h, w, b) = dims(sr, hr)?;
    if h < 11 || w < 11 {
        return Err(CstError::Validation(format!(
            "SSIM needs at least 11x11 pixels, got {}x{}",
            h, w
        )));
    }
    let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..b {
        let x: Vec<f64> = (0..h * w).map(|p| sr.data()[p * b + c]).collect();
        let y: Vec<f64> = (0..h * w).map(|p| hr.data()[p * b + c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, _, _) = filter_valid(&x, h, w, &g);
        let (my, _, _) = filter_valid(&y, h, w, &g);
        let (sxx, _, _) = filter_valid(&xx, h, w, &g);
        let (syy, _, _) = filter_valid(&yy, h, w, &g);
        let (sxy, oh, ow) = filter_valid(&xy, h, w, &g);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / b as f64)
}

/// Mean per-pixel spectral angle in degrees; zero spectra are skipped.
pub fn sam_metric(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    let (h, w, b) = dims(sr, hr)?;
    let (mut total, mut used) = (0.0, 0usize);
    for p in 0..h * w {
        let s = &sr.data()[p * b..(p + 1) * b];
        let t = &hr.data()[p * b..(p + 1) * b];
        let st: f64 = s.iter().zip(t).map(|(a, b)| a * b).sum();
        let ns = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ns == 0.0 || nt == 0.0 {
            continue;
        }
        total += (st / (ns * nt)).clamp(-1.0, 1.0).acos().to_degrees();
        used += 1;
    }
    if used < h * w {
        warn!("SAM: skipped {} zero spectra", h * w - used);
    }
    if used == 0 {
        return Err(CstError::Validation("SAM undefined: every spectrum is zero".into()));
    }
    Ok(total / used as f64)
}

/// Mean over bands of the Pearson correlation; constant reference bands are skipped.
pub fn cc(sr: &Tensor, hr: &Tensor) -> Result<f64> {
    let (h, w, b) = dims(sr, hr)?;
    let n = (h * w) as f64;
    let (mut total, mut used) = (0.0, 0usize);
    for c in 0..b {
        let x = (0..h * w).map(|p| sr.data()[p * b + c]);
        let y = (0..h * w).map(|p| hr.data()[p * b + c]);
        let mx = x.clone().sum::<f64>() / n;
        let my = y.clone().sum::<f64>() / n;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in x.zip(y) {
            sxy += (a - mx) * (b - my);
            sxx += (a - mx) * (a - mx);
            syy += (b - my) * (b - my);
        }
        if syy == 0.0 {
            continue;
        }
        // a constant prediction against a varying reference carries no correlation
        total += if sxx == 0.0 { 0.0 } else { sxy / (sxx * syy).sqrt() };
        used += 1;
    }
    if used < b {
        warn!("CC: skipped {} constant bands", b - used);
    }
    if used == 0 {
        return Err(CstError::Validation(
            "CC undefined: every reference band is constant".into(),
        ));
    }
    Ok(total / used as f64)
}

/// `100 / scale * sqrt(mean_b (RMSE_b / mu_b)^2)`; zero-mean reference bands are skipped.
pub fn ergas(sr: &Tensor, hr: &Tensor, scale: usize) -> Result<f64> {
    let (h, w, b) = dims(sr, hr)?;
    let n = (h * w) as f64;
    let (mut total, mut used) = (0.0, 0usize);
    for c in 0..b {
        let (mut e, mut mu) = (0.0, 0.0);
        for p in 0..h * w {
            let d = sr.data()[p * b + c] - hr.data()[p * b + c];
            e += d * d;
            mu += hr.data()[p * b + c];
        }
        mu /= n;
        if mu == 0.0 {
            continue;
        }
        total += e / n / (mu * mu);
        used += 1;
    }
    if used < b {
        warn!("ERGAS: skipped {} zero-mean bands", b - used);
    }
    if used == 0 {
        return Err(CstError::Validation(
            "ERGAS undefined: every reference band has zero mean".into(),
        ));
    }
    Ok(100.0 / scale as f64 * (total / used as f64).sqrt())
}

/// The six metrics of one (SR, HR) pair plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub cc: f64,
    pub rmse: f64,
    pub ergas: f64,
    pub scale: usize,
    pub config_hash: String,
    pub resampler: String,
}

/// CSV column order of [`MetricReport::csv_row`].
pub const CSV_COLUMNS: [&str; 9] = [
    "psnr",
    "ssim",
    "sam",
    "cc",
    "rmse",
    "ergas",
    "scale",
    "config_hash",
    "resampler",
];

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{:.6}", v)
    }
}

impl MetricReport {
    pub fn csv_header() -> String {
        CSV_COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},\"{}\"",
            fmt_num(self.psnr),
            fmt_num(self.ssim),
            fmt_num(self.sam),
            fmt_num(self.cc),
            fmt_num(self.rmse),
            fmt_num(self.ergas),
            self.scale,
            self.config_hash,
            self.resampler
        )
    }

    /// Flat `key=value` block, one metric per line.
    pub fn to_kv(&self) -> String {
        format!(
            "psnr={}\nssim={}\nsam={}\ncc={}\nrmse={}\nergas={}\nscale={}\nconfig_hash={}\nresampler={}\n",
            fmt_num(self.psnr),
            fmt_num(self.ssim),
            fmt_num(self.sam),
            fmt_num(self.cc),
            fmt_num(self.rmse),
            fmt_num(self.ergas),
            self.scale,
            self.config_hash,
            self.resampler
        )
    }

    /// Arithmetic mean of each metric; provenance is taken from the first report.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricReport {
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            sam: avg(|r| r.sam),
            cc: avg(|r| r.cc),
            rmse: avg(|r| r.rmse),
            ergas: avg(|r| r.ergas),
            ..first.clone()
        })
    }
}

fn crop(t: &Tensor, border: usize) -> Result<Tensor> {
    if border == 0 {
        return Ok(t.clone());
    }
    let s = t.shape();
    let (h, w, b) = (s[0], s[1], s[2]);
    if 2 * border >= h || 2 * border >= w {
        return Err(CstError::Geometry(format!(
            "border {} too large for {}x{}",
            border, h, w
        )));
    }
    let (oh, ow) = (h - 2 * border, w - 2 * border);
    let mut out = Vec::with_capacity(oh * ow * b);
    for y in border..h - border {
        let row = ((y * w) + border) * b;
        out.extend_from_slice(&t.data()[row..row + ow * b]);
    }
    Ok(Tensor::new(vec![oh, ow, b], out))
}

/// All six metrics on the (optionally border-cropped) pair.
pub fn evaluate_all(sr: &Tensor, hr: &Tensor, scale: usize, opts: &MetricOptions) -> Result<MetricReport> {
    dims(sr, hr)?;
    let (sr, hr) = (crop(sr, opts.border)?, crop(hr, opts.border)?);
    let psnr = match opts.psnr_mode {
        PsnrMode::Global => psnr(&sr, &hr, 1.0)?,
        PsnrMode::BandMean => psnr_band_mean(&sr, &hr, 1.0)?,
    };
    Ok(MetricReport {
        psnr,
        ssim: ssim(&sr, &hr)?,
        sam: sam_metric(&sr, &hr)?,
        cc: cc(&sr, &hr)?,
        rmse: rmse(&sr, &hr)?,
        ergas: ergas(&sr, &hr, scale)?,
        scale,
        config_hash: String::new(),
        resampler: crate::hsi::RESAMPLER_TAG.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(0.05..0.95))
    }

    #[test]
    fn closed_forms() {
        let hr = rnd(&[12, 12, 3], 1);
        let sr = Tensor::from_fn(hr.shape(), |i| hr.data()[i] + if i % 2 == 0 { 0.1 } else { -0.1 });
        assert!((psnr(&sr, &hr, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!((rmse(&sr, &hr).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(psnr(&hr, &hr, 1.0).unwrap(), f64::INFINITY);
        let a = Tensor::from_fn(&[2, 2, 2], |i| if i % 2 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::from_fn(&[2, 2, 2], |i| if i % 2 == 0 { 0.0 } else { 1.0 });
        assert!((sam_metric(&a, &b).unwrap() - 90.0).abs() < 1e-9);
        let one = Tensor::full(&[4, 4, 1], 1.0);
        let off = Tensor::from_fn(&[4, 4, 1], |i| if i % 2 == 0 { 1.1 } else { 0.9 });
        assert!((ergas(&off, &one, 4).unwrap() - 2.5).abs() < 1e-9);
    }

    #[test]
    fn identical_cubes() {
        let hr = rnd(&[12, 13, 4], 2);
        let r = evaluate_all(&hr, &hr, 4, &MetricOptions::default()).unwrap();
        assert_eq!(r.psnr, f64::INFINITY);
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert!(r.sam.abs() < 1e-6);
        assert!((r.cc - 1.0).abs() < 1e-12);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.ergas, 0.0);
        assert_eq!(r, evaluate_all(&hr, &hr, 4, &MetricOptions::default()).unwrap());
    }

    #[test]
    fn negated_band_correlates_minus_one() {
        let hr = Tensor::from_fn(&[4, 4, 2], |i| (i as f64 * 0.7).sin());
        let sr = Tensor::from_fn(hr.shape(), |i| -hr.data()[i]);
        assert!((cc(&sr, &hr).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let hr = rnd(&[13, 12, 1], 3);
        let sr = rnd(&[13, 12, 1], 4);
        let g = gaussian_window();
        let (mut acc, mut n) = (0.0, 0);
        for y0 in 0..3 {
            for x0 in 0..2 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = g[i] * g[j];
                        let (a, b) = (sr.data()[(y0 + i) * 12 + x0 + j], hr.data()[(y0 + i) * 12 + x0 + j]);
                        mx += wgt * a;
                        my += wgt * b;
                        sxx += wgt * a * a;
                        syy += wgt * b * b;
                        sxy += wgt * a * b;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                acc += ((2.0 * mx * my + c1) * (2.0 * (sxy - mx * my) + c2))
                    / ((mx * mx + my * my + c1) * (sxx - mx * mx + syy - my * my + c2));
                n += 1;
            }
        }
        assert!((ssim(&sr, &hr).unwrap() - acc / n as f64).abs() < 1e-12);
        let inv = Tensor::from_fn(hr.shape(), |i| 1.0 - hr.data()[i]);
        assert!(ssim(&inv, &hr).unwrap() < 0.5);
        assert!(ssim(&Tensor::zeros(&[10, 12, 1]), &Tensor::zeros(&[10, 12, 1])).is_err());
    }

    #[test]
    fn invariances() {
        let hr = rnd(&[12, 12, 4], 5);
        let sr = rnd(&[12, 12, 4], 6);
        let scaled = Tensor::from_fn(sr.shape(), |i| sr.data()[i] * (1.0 + (i / 4) as f64 * 0.01));
        assert!((sam_metric(&scaled, &hr).unwrap() - sam_metric(&sr, &hr).unwrap()).abs() < 1e-9);
        let k = |t: &Tensor| Tensor::from_fn(t.shape(), |i| 3.0 * t.data()[i]);
        assert!((ergas(&k(&sr), &k(&hr), 2).unwrap() - ergas(&sr, &hr, 2).unwrap()).abs() < 1e-9);
        let r = rmse(&sr, &hr).unwrap();
        assert!((psnr(&sr, &hr, 1.0).unwrap() - 10.0 * (1.0 / (r * r)).log10()).abs() < 1e-9);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1] {
            let noisy = Tensor::from_fn(hr.shape(), |i| hr.data()[i] + if i % 3 == 0 { amp } else { -amp });
            let p = psnr(&noisy, &hr, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn report_formats() {
        let hr = rnd(&[12, 12, 2], 7);
        let sr = rnd(&[12, 12, 2], 8);
        let r = evaluate_all(&sr, &hr, 2, &MetricOptions::default()).unwrap();
        assert_eq!(
            r.csv_row().split(',').count(),
            CSV_COLUMNS.len() + r.resampler.matches(',').count()
        );
        assert!(r.to_kv().starts_with("psnr="));
        let m = MetricReport::mean(&[r.clone(), r.clone()]).unwrap();
        assert!((m.psnr - r.psnr).abs() < 1e-12);
        let cropped = evaluate_all(
            &rnd(&[16, 16, 2], 1),
            &rnd(&[16, 16, 2], 2),
            2,
            &MetricOptions {
                psnr_mode: PsnrMode::BandMean,
                border: 2,
            },
        )
        .unwrap();
        assert!(cropped.psnr.is_finite());
    }
}
