//! Image quality metrics: PSNR and windowed SSIM, plus aggregation over
//! evaluation sets.
//!
//! SSIM uses the reference configuration: an 11x11 Gaussian window with
//! sigma 1.5, stabilizers `C1 = (0.01 L)^2`, `C2 = (0.03 L)^2` at dynamic
//! range `L = 1`, computed per channel over valid window positions and
//! averaged.

use thiserror::Error;

use crate::types::ImageTensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
    #[error("max_value must be > 0, got {0}")]
    BadMaxValue(f64),
    #[error("image {0}x{1} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")]
    TooSmallForWindow(usize, usize),
    #[error("empty record list")]
    Empty,
}

/// A PSNR value; identical images get the explicit noiseless sentinel
/// instead of a floating-point infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(*v),
            Psnr::Infinite => None,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Psnr::Infinite)
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Infinite => write!(f, "inf"),
        }
    }
}

/// Quality of one reconstruction against its reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityRecord {
    pub psnr_db: Psnr,
    pub ssim: f64,
}

/// Aggregated quality over a set of records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateQuality {
    /// Mean over finite PSNR values; `Infinite` if every record was the
    /// identical-image sentinel.
    pub mean_psnr_db: Psnr,
    pub mean_ssim: f64,
    /// How many sentinel PSNR values were excluded from the mean.
    pub psnr_excluded: usize,
    pub n: usize,
}

/// Peak signal-to-noise ratio in dB: `10 log10(max^2 / MSE)` with MSE the
/// pixel-mean squared error. Identical images return [`Psnr::Infinite`].
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_value: f64) -> Result<Psnr, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape(), b.shape()));
    }
    if !(max_value > 0.0) {
        return Err(MetricsError::BadMaxValue(max_value));
    }
    let sse = a.squared_error(b).expect("shapes checked");
    if sse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    let mse = sse / a.len() as f64;
    Ok(Psnr::Finite(10.0 * (max_value * max_value / mse).log10()))
}

/// Separable Gaussian window weights, normalized to sum 1.
fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-mode separable filtering of one channel plane.
fn filter_plane(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    // rows first
    let mut tmp = vec![0.0f64; oh * w];
    for i in 0..oh {
        for j in 0..w {
            let mut acc = 0.0;
            for (u, wu) in win.iter().enumerate() {
                acc += wu * plane[(i + u) * w + j];
            }
            tmp[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for (v, wv) in win.iter().enumerate() {
                acc += wv * tmp[i * w + j + v];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// Mean structural similarity between two images in `[0, 1]`.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape(), b.shape()));
    }
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmallForWindow(h, w));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for k in 0..c {
        let mut xa = vec![0.0f64; h * w];
        let mut xb = vec![0.0f64; h * w];
        let mut xa2 = vec![0.0f64; h * w];
        let mut xb2 = vec![0.0f64; h * w];
        let mut xab = vec![0.0f64; h * w];
        for i in 0..h {
            for j in 0..w {
                let va = a.pixels()[(i, j, k)];
                let vb = b.pixels()[(i, j, k)];
                xa[i * w + j] = va;
                xb[i * w + j] = vb;
                xa2[i * w + j] = va * va;
                xb2[i * w + j] = vb * vb;
                xab[i * w + j] = va * vb;
            }
        }
        let mu_a = filter_plane(&xa, h, w, &win);
        let mu_b = filter_plane(&xb, h, w, &win);
        let ea2 = filter_plane(&xa2, h, w, &win);
        let eb2 = filter_plane(&xb2, h, w, &win);
        let eab = filter_plane(&xab, h, w, &win);
        let mut acc = 0.0;
        for p in 0..mu_a.len() {
            let ma = mu_a[p];
            let mb = mu_b[p];
            let va = ea2[p] - ma * ma;
            let vb = eb2[p] - mb * mb;
            let cov = eab[p] - ma * mb;
            let num = (2.0 * ma * mb + C1) * (2.0 * cov + C2);
            let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

/// PSNR and SSIM of one pair.
pub fn quality(reference: &ImageTensor, candidate: &ImageTensor) -> Result<QualityRecord, MetricsError> {
    Ok(QualityRecord {
        psnr_db: psnr(reference, candidate, 1.0)?,
        ssim: ssim(reference, candidate)?,
    })
}

/// Arithmetic means over a non-empty record list; sentinel PSNR values are
/// excluded from the PSNR mean and counted.
pub fn aggregate(records: &[QualityRecord]) -> Result<AggregateQuality, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut psnr_sum = 0.0;
    let mut psnr_n = 0usize;
    let mut ssim_sum = 0.0;
    for r in records {
        if let Psnr::Finite(v) = r.psnr_db {
            psnr_sum += v;
            psnr_n += 1;
        }
        ssim_sum += r.ssim;
    }
    let mean_psnr_db = if psnr_n == 0 {
        Psnr::Infinite
    } else {
        Psnr::Finite(psnr_sum / psnr_n as f64)
    };
    Ok(AggregateQuality {
        mean_psnr_db,
        mean_ssim: ssim_sum / records.len() as f64,
        psnr_excluded: records.len() - psnr_n,
        n: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_image(shape: (usize, usize, usize), seed: u64) -> ImageTensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ImageTensor::new(Array3::from_shape_fn(shape, |_| rng.gen::<f64>())).unwrap()
    }

    #[test]
    fn psnr_identical_is_sentinel() {
        let a = random_image((12, 12, 3), 1);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_derived_values() {
        let a = ImageTensor::constant((8, 8, 1), 0.0).unwrap();
        let b = ImageTensor::constant((8, 8, 1), 0.1).unwrap();
        let v = psnr(&a, &b, 1.0).unwrap().as_f64().unwrap();
        assert!((v - 20.0).abs() < 1e-9);

        let c = ImageTensor::constant((8, 8, 1), 0.5).unwrap();
        let v = psnr(&a, &c, 1.0).unwrap().as_f64().unwrap();
        assert!((v - 10.0 * 4.0f64.log10()).abs() < 1e-9);
        assert!((v - 6.0206).abs() < 1e-3);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = random_image((12, 12, 1), 2);
        let b = random_image((12, 13, 1), 3);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn ssim_self_is_one_and_symmetric() {
        let a = random_image((16, 16, 3), 4);
        let b = random_image((16, 16, 3), 5);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_zero_vs_one_closed_form() {
        let a = ImageTensor::constant((16, 16, 1), 0.0).unwrap();
        let b = ImageTensor::constant((16, 16, 1), 1.0).unwrap();
        let expected = C1 / (1.0 + C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_window_size_guard() {
        let a = random_image((8, 8, 1), 6);
        assert!(matches!(
            ssim(&a, &a),
            Err(MetricsError::TooSmallForWindow(8, 8))
        ));
    }

    #[test]
    fn ssim_bounded_on_fuzz_inputs() {
        for t in 0..20 {
            let a = random_image((14, 14, 2), 100 + t);
            let b = random_image((14, 14, 2), 200 + t);
            let v = ssim(&a, &b).unwrap();
            assert!((-1.0..=1.0).contains(&v), "ssim {v} out of bounds");
        }
    }

    #[test]
    fn psnr_decreases_with_growing_noise() {
        let a = random_image((16, 16, 1), 7);
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let noise: Vec<f64> = (0..a.len()).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut prev = f64::INFINITY;
        for &sigma in &[0.01, 0.03, 0.1, 0.3] {
            let mut p = a.pixels().clone();
            for (v, n) in p.iter_mut().zip(&noise) {
                *v = (*v + sigma * n).clamp(0.0, 1.0);
            }
            let b = ImageTensor::new(p).unwrap();
            let v = psnr(&a, &b, 1.0).unwrap().as_f64().unwrap();
            assert!(v < prev, "psnr {v} not below {prev} at sigma {sigma}");
            prev = v;
        }
    }

    #[test]
    fn aggregate_examples() {
        let single = QualityRecord {
            psnr_db: Psnr::Finite(20.0),
            ssim: 0.4,
        };
        let agg = aggregate(&[single]).unwrap();
        assert_eq!(agg.mean_psnr_db, Psnr::Finite(20.0));
        assert_eq!(agg.mean_ssim, 0.4);

        let two = [
            QualityRecord {
                psnr_db: Psnr::Finite(20.0),
                ssim: 0.4,
            },
            QualityRecord {
                psnr_db: Psnr::Finite(24.0),
                ssim: 0.6,
            },
        ];
        let agg = aggregate(&two).unwrap();
        assert_eq!(agg.mean_psnr_db, Psnr::Finite(22.0));
        assert!((agg.mean_ssim - 0.5).abs() < 1e-12);
        assert_eq!(agg.psnr_excluded, 0);

        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn aggregate_excludes_sentinels_and_matches_recompute() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut records = Vec::new();
        for i in 0..100 {
            let psnr_db = if i % 10 == 0 {
                Psnr::Infinite
            } else {
                Psnr::Finite(rng.gen::<f64>() * 30.0)
            };
            records.push(QualityRecord {
                psnr_db,
                ssim: rng.gen::<f64>(),
            });
        }
        let agg = aggregate(&records).unwrap();
        let finite: Vec<f64> = records.iter().filter_map(|r| r.psnr_db.as_f64()).collect();
        let mean: f64 = finite.iter().sum::<f64>() / finite.len() as f64;
        assert!((agg.mean_psnr_db.as_f64().unwrap() - mean).abs() < 1e-12);
        assert_eq!(agg.psnr_excluded, 10);
        let mean_ssim: f64 = records.iter().map(|r| r.ssim).sum::<f64>() / 100.0;
        assert!((agg.mean_ssim - mean_ssim).abs() < 1e-12);
    }
}
