//! Image-quality metrics, singular-value spectra and cohort statistics.
//!
//! FID here is computed on deterministic random-projection features, so its
//! absolute values only compare runs that use the same extractor seed.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::localization::LesionReport;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const FEATURE_DIM: usize = 64;
pub const PATCH: usize = 8;
pub const PATCH_STRIDE: usize = 4;
pub const DEFAULT_FEATURE_SEED: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRecord {
    pub ssim: f64,
    pub fid: f64,
    pub psnr_db: f64,
    pub rmse: f64,
}

fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b, "metric")?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn rmse(a: &Image, b: &Image) -> Result<f64> {
    Ok(mse(a, b)?.sqrt())
}

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Weighted local means over every full window (separable Gaussian).
fn window_means(data: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|k| win[k] * data[r * w + c + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|k| win[k] * rows[(r + k) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over all full 11×11 Gaussian windows (σ = 1.5).
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let win = gaussian_window();
    let (c1, c2) = ((0.01 * peak).powi(2), (0.03 * peak).powi(2));
    let prod =
        |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = window_means(a.data(), w, h, &win);
    let mu_b = window_means(b.data(), w, h, &win);
    let e_aa = window_means(&prod(&|x, _| x * x), w, h, &win);
    let e_bb = window_means(&prod(&|_, y| y * y), w, h, &win);
    let e_ab = window_means(&prod(&|x, y| x * y), w, h, &win);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

fn mean_and_cov(set: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = set[0].len();
    let n = set.len() as f64;
    let mut mu = DVector::zeros(d);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(d, d);
    for v in set {
        let x = DVector::from_column_slice(v) - &mu;
        cov.ger(1.0, &x, &x, 1.0);
    }
    (mu, cov / (n - 1.0))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    if features_a.len() < 2 || features_b.len() < 2 {
        return Err(Error::InvalidArgument("fid needs at least 2 vectors per set".into()));
    }
    let d = features_a[0].len();
    if d == 0 || features_a.iter().chain(features_b).any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch("fid feature dimensions differ".into()));
    }
    let (mu1, s1) = mean_and_cov(features_a);
    let (mu2, s2) = mean_and_cov(features_b);
    let r1 = sym_sqrt(&s1);
    let cross = sym_sqrt(&(&r1 * &s2 * &r1));
    let value = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Random-projection feature vector: every 8×8 patch on a stride-4 grid is
/// projected by a seeded Gaussian matrix with unit expected row norm, rectified and averaged.
pub fn extract_features(img: &Image, seed: u64) -> Result<Vec<f64>> {
    let (w, h) = (img.width(), img.height());
    if w < PATCH || h < PATCH {
        return Err(Error::InvalidArgument(format!("feature extraction needs at least {PATCH}x{PATCH}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / PATCH as f64;
    let proj: Vec<f64> = (0..FEATURE_DIM * PATCH * PATCH)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
        .collect();
    let mut feat = vec![0.0; FEATURE_DIM];
    let mut patch = [0.0; PATCH * PATCH];
    let mut count = 0usize;
    for r in (0..=h - PATCH).step_by(PATCH_STRIDE) {
        for c in (0..=w - PATCH).step_by(PATCH_STRIDE) {
            for i in 0..PATCH {
                for j in 0..PATCH {
                    patch[i * PATCH + j] = img.get(r + i, c + j);
                }
            }
            for (k, f) in feat.iter_mut().enumerate() {
                let row = &proj[k * PATCH * PATCH..(k + 1) * PATCH * PATCH];
                *f += row.iter().zip(&patch).map(|(a, b)| a * b).sum::<f64>().max(0.0);
            }
            count += 1;
        }
    }
    Ok(feat.into_iter().map(|v| v / count as f64).collect())
}

/// Singular values of the `H×W` pixel matrix in descending order.
pub fn singular_values(img: &Image) -> Vec<f64> {
    let m = DMatrix::from_row_slice(img.height(), img.width(), img.data());
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Index-wise mean of per-image singular-value spectra; length `min(H, W)`.
pub fn sv_spectrum(images: &[Image]) -> Result<Vec<f64>> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("sv_spectrum of an empty set".into()))?;
    let mut acc = vec![0.0; first.width().min(first.height())];
    for img in images {
        first.ensure_same_shape(img, "sv_spectrum")?;
        for (a, s) in acc.iter_mut().zip(singular_values(img)) {
            *a += s;
        }
    }
    Ok(acc.into_iter().map(|v| v / images.len() as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CohortStats {
    pub n_patients: usize,
    pub n_detected: usize,
    pub n_correct_region: usize,
    pub detection_rate: f64,
    /// NaN when nothing was detected.
    pub localization_accuracy: f64,
}

pub fn cohort_stats(reports: &[LesionReport], truths: &[u8]) -> Result<CohortStats> {
    if reports.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!("{} reports for {} truths", reports.len(), truths.len())));
    }
    let n_detected = reports.iter().filter(|r| r.detected).count();
    let n_correct_region =
        reports.iter().zip(truths).filter(|(r, &t)| r.detected && r.predicted_region == Some(t)).count();
    let n = reports.len();
    Ok(CohortStats {
        n_patients: n,
        n_detected,
        n_correct_region,
        detection_rate: if n == 0 { 0.0 } else { n_detected as f64 / n as f64 },
        localization_accuracy: if n_detected == 0 { f64::NAN } else { n_correct_region as f64 / n_detected as f64 },
    })
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v}")
    }
}

pub const METRICS_CSV_HEADER: &str = "subject,ssim,psnr_db,rmse,fid";

/// Per-pair rows followed by a `cohort` row with means and the set FID.
pub fn metrics_csv(rows: &[(String, MetricsRecord)], fid_value: f64) -> String {
    let mut out = format!("{METRICS_CSV_HEADER}\n");
    for (id, m) in rows {
        writeln!(out, "{id},{},{},{},", fmt_value(m.ssim), fmt_value(m.psnr_db), fmt_value(m.rmse)).unwrap();
    }
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&MetricsRecord) -> f64| rows.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
    writeln!(
        out,
        "cohort,{},{},{},{}",
        fmt_value(mean(|m| m.ssim)),
        fmt_value(mean(|m| m.psnr_db)),
        fmt_value(mean(|m| m.rmse)),
        fmt_value(fid_value)
    )
    .unwrap();
    out
}

pub fn spectrum_csv(curve: &[f64]) -> String {
    let mut out = String::from("index,mean_singular_value\n");
    for (i, v) in curve.iter().enumerate() {
        writeln!(out, "{i},{v}").unwrap();
    }
    out
}

pub const COHORT_CSV_HEADER: &str = "subject,detected,predicted_region,true_region,correct";

/// One row per subject plus a `summary` row carrying the two rates.
pub fn cohort_csv(reports: &[LesionReport], truths: &[u8], stats: &CohortStats) -> String {
    let mut out = format!("{COHORT_CSV_HEADER}\n");
    for (r, t) in reports.iter().zip(truths) {
        let pred = r.predicted_region.map_or("none".to_string(), |p| p.to_string());
        let correct = r.detected && r.predicted_region == Some(*t);
        writeln!(out, "{},{},{pred},{t},{correct}", r.subject_id, r.detected).unwrap();
    }
    writeln!(
        out,
        "summary,detection_rate={},localization_accuracy={},n_detected={},n_correct={}",
        fmt_value(stats.detection_rate),
        fmt_value(stats.localization_accuracy),
        stats.n_detected,
        stats.n_correct_region
    )
    .unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noise(seed: u64, w: usize, h: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h).map(|_| rand::Rng::random::<f64>(&mut rng)).collect()).unwrap()
    }

    #[test]
    fn rmse_cases() {
        let a = noise(1, 16, 16);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&Image::filled(4, 4, 0.0), &Image::filled(4, 4, 0.5)).unwrap(), 0.5);
        assert!(rmse(&a, &Image::filled(4, 4, 0.0)).is_err());
    }

    #[test]
    fn rmse_matches_two_pass_oracle() {
        let (a, b) = (noise(2, 20, 12), noise(3, 20, 12));
        // pairwise-tree summation of squared residuals as the independent order
        let mut sq: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).collect();
        while sq.len() > 1 {
            sq = sq.chunks(2).map(|c| c.iter().sum()).collect();
        }
        let oracle = (sq[0] / a.len() as f64).sqrt();
        assert!((rmse(&a, &b).unwrap() - oracle).abs() < 1e-7);
    }

    #[test]
    fn psnr_cases() {
        let a = noise(4, 16, 16);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        let (ha, hb) = (a.map(|v| 0.5 * v), noise(5, 16, 16).map(|v| 0.5 * v));
        let full = psnr(&a, &noise(5, 16, 16), 1.0).unwrap();
        assert!((psnr(&ha, &hb, 0.5).unwrap() - full).abs() < 1e-9);
    }

    #[test]
    fn rmse_and_psnr_agree() {
        let (a, b) = (noise(6, 16, 16), noise(7, 16, 16));
        let r = rmse(&a, &b).unwrap();
        let p = psnr(&a, &b, 1.0).unwrap();
        assert!((10f64.powf(-p / 10.0) - r * r).abs() < 1e-9);
    }

    #[test]
    fn ssim_cases() {
        let a = noise(8, 24, 20);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let c = ssim(&Image::filled(16, 16, 0.0), &Image::filled(16, 16, 1.0), 1.0).unwrap();
        assert!((c - 1e-4 / (1.0 + 1e-4)).abs() < 1e-8);
        let b = noise(9, 24, 20);
        assert_eq!(ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
        assert!(ssim(&Image::filled(10, 10, 0.0), &Image::filled(10, 10, 0.0), 1.0).is_err());
    }

    #[test]
    fn fid_cases() {
        let set: Vec<Vec<f64>> = (0..20).map(|i| noise(i, 4, 1).into_data()).collect();
        assert!(fid(&set, &set).unwrap() <= 1e-6);
        let a = vec![vec![1.0, 2.0]; 5];
        let b = vec![vec![4.0, -2.0]; 5];
        assert!((fid(&a, &b).unwrap() - 25.0).abs() < 1e-9);
        assert!(fid(&a[..1], &b).is_err());
        assert!(fid(&a, &[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn feature_contract() {
        let img = noise(10, 32, 32);
        let f = extract_features(&img, 3).unwrap();
        assert_eq!(f.len(), FEATURE_DIM);
        assert_eq!(f, extract_features(&img, 3).unwrap());
        assert_ne!(f, extract_features(&img, 4).unwrap());
        assert!(extract_features(&Image::filled(16, 16, 0.0), 3).unwrap().iter().all(|&v| v == 0.0));
        assert!(extract_features(&Image::filled(7, 16, 0.0), 3).is_err());
    }

    #[test]
    fn spectrum_cases() {
        let eye = Image::from_fn(6, 6, |r, c| if r == c { 1.0 } else { 0.0 });
        for v in sv_spectrum(&[eye]).unwrap() {
            assert!((v - 1.0).abs() < 1e-10);
        }
        let u = [2.0, 0.0, 0.0];
        let v = [0.0, 3.0 / 2f64.sqrt(), 3.0 / 2f64.sqrt(), 0.0];
        let rank1 = Image::from_fn(4, 3, |r, c| u[r] * v[c]);
        let s = sv_spectrum(&[rank1]).unwrap();
        assert_eq!(s.len(), 3);
        assert!((s[0] - 6.0).abs() < 1e-10 && s[1].abs() < 1e-10 && s[2].abs() < 1e-10);
        assert!(sv_spectrum(&[]).is_err());
    }

    #[test]
    fn cohort_examples() {
        let mk = |det: bool, pred: Option<u8>| LesionReport {
            detected: det,
            predicted_region: pred,
            ..LesionReport::empty("s")
        };
        let reports = vec![mk(true, Some(1)), mk(true, Some(2)), mk(true, Some(5)), mk(false, None)];
        let s = cohort_stats(&reports, &[1, 2, 3, 4]).unwrap();
        assert_eq!((s.n_detected, s.n_correct_region), (3, 2));
        assert_eq!(s.detection_rate, 0.75);
        assert!((s.localization_accuracy - 2.0 / 3.0).abs() < 1e-15);
        let none = cohort_stats(&[mk(false, None)], &[1]).unwrap();
        assert_eq!(none.detection_rate, 0.0);
        assert!(none.localization_accuracy.is_nan());
        let all = cohort_stats(&reports[..2], &[1, 2]).unwrap();
        assert_eq!((all.detection_rate, all.localization_accuracy), (1.0, 1.0));
        assert!(cohort_stats(&reports, &[1]).is_err());
        let csv = cohort_csv(&reports, &[1, 2, 3, 4], &s);
        assert_eq!(csv.lines().count(), 1 + 4 + 1);
    }

    #[test]
    fn metrics_csv_layout() {
        let m = MetricsRecord { ssim: 1.0, fid: 0.0, psnr_db: f64::INFINITY, rmse: 0.0 };
        let csv = metrics_csv(&[("a".into(), m)], 2.5);
        assert_eq!(csv, "subject,ssim,psnr_db,rmse,fid\na,1,inf,0,\ncohort,1,inf,0,2.5\n");
        assert_eq!(spectrum_csv(&[3.0, 1.0]), "index,mean_singular_value\n0,3\n1,1\n");
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..1000) {
            let (a, b) = (noise(seed, 12, 12), noise(seed + 5000, 12, 12));
            prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            let (s1, s2) = (ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-15 && (-1.0..=1.0).contains(&s1));
        }

        #[test]
        fn spectra_are_sorted_and_match_frobenius(seed in 0u64..1000) {
            let imgs = [noise(seed, 9, 7), noise(seed + 1, 9, 7)];
            let s = sv_spectrum(&imgs).unwrap();
            prop_assert!(s.windows(2).all(|w| w[0] >= w[1]) && s.iter().all(|&v| v >= 0.0));
            let sv = singular_values(&imgs[0]);
            let fro: f64 = imgs[0].data().iter().map(|v| v * v).sum();
            let ss: f64 = sv.iter().map(|v| v * v).sum();
            prop_assert!((ss - fro).abs() / fro < 1e-6);
        }
    }
}
