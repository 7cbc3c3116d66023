//! Image quality metrics on magnitude images: SNR, high-frequency error
//! norm, and a global-statistics structural similarity index. All three
//! accept an optional region-of-interest mask and reduce to full-image
//! metrics when it is absent.

use ndarray::Array2;

use crate::error::CoreError;
use crate::tensor::RealImage;

/// Side length of the Laplacian-of-Gaussian filter used by [`hfen`].
pub const LOG_KERNEL_SIZE: usize = 15;
/// Standard deviation (pixels) of the Laplacian-of-Gaussian filter.
pub const LOG_SIGMA: f64 = 1.5;

/// Structural-similarity constant convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimForm {
    /// `c1` appears in both denominator factors (the convention followed
    /// by the rest of this crate's evaluation).
    Reference,
    /// `c2` in the variance factor, as in the common SSIM definition;
    /// provided for cross-tool comparison.
    Standard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub snr_db: f64,
    pub hfen: f64,
    pub ssim: f64,
}

/// Evaluate all three metrics at once.
pub fn evaluate(
    reference: &RealImage,
    reconstruction: &RealImage,
    roi: Option<&Array2<bool>>,
    ssim_form: SsimForm,
) -> Result<MetricReport, CoreError> {
    Ok(MetricReport {
        snr_db: snr(reference, reconstruction, roi)?,
        hfen: hfen(reference, reconstruction, roi)?,
        ssim: ssim(reference, reconstruction, roi, ssim_form)?,
    })
}

fn check_shapes(
    reference: &RealImage,
    reconstruction: &RealImage,
    roi: Option<&Array2<bool>>,
) -> Result<(), CoreError> {
    if reference.shape() != reconstruction.shape() {
        return Err(CoreError::ShapeMismatch {
            expected: reference.shape(),
            got: reconstruction.shape(),
        });
    }
    if let Some(roi) = roi {
        if roi.dim() != reference.shape() {
            return Err(CoreError::ShapeMismatch {
                expected: reference.shape(),
                got: roi.dim(),
            });
        }
        if !roi.iter().any(|&k| k) {
            return Err(CoreError::InvalidParameter("empty ROI".into()));
        }
    }
    Ok(())
}

fn roi_values<'a>(
    img: &'a RealImage,
    roi: Option<&'a Array2<bool>>,
) -> Box<dyn Iterator<Item = f64> + 'a> {
    match roi {
        Some(roi) => Box::new(
            img.data
                .iter()
                .zip(roi.iter())
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v),
        ),
        None => Box::new(img.data.iter().copied()),
    }
}

fn mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v;
        count += 1;
    }
    (sum / count as f64, count)
}

/// `10 log10(Var(reference) / MSE)` over the ROI, in decibels. A perfect
/// reconstruction reports positive infinity.
pub fn snr(
    reference: &RealImage,
    reconstruction: &RealImage,
    roi: Option<&Array2<bool>>,
) -> Result<f64, CoreError> {
    check_shapes(reference, reconstruction, roi)?;
    let (mu, count) = mean(roi_values(reference, roi));
    let var = roi_values(reference, roi)
        .map(|v| (v - mu) * (v - mu))
        .sum::<f64>()
        / count as f64;
    let mse = roi_values(reference, roi)
        .zip(roi_values(reconstruction, roi))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (var / mse).log10())
}

/// The Laplacian-of-Gaussian tap matrix: a unit-sum Gaussian pushed through
/// the scaled Laplacian, then shifted to zero total response.
pub fn log_kernel(size: usize, sigma: f64) -> Array2<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let s2 = sigma * sigma;
    let mut gauss = Array2::<f64>::zeros((size, size));
    for ((r, c), v) in gauss.indexed_iter_mut() {
        let y = r as f64 - half;
        let x = c as f64 - half;
        *v = (-(x * x + y * y) / (2.0 * s2)).exp();
    }
    let total: f64 = gauss.iter().sum();
    gauss.mapv_inplace(|v| v / total);
    let mut kernel = Array2::<f64>::zeros((size, size));
    for ((r, c), v) in kernel.indexed_iter_mut() {
        let y = r as f64 - half;
        let x = c as f64 - half;
        *v = gauss[(r, c)] * (x * x + y * y - 2.0 * s2) / (s2 * s2);
    }
    let mean: f64 = kernel.iter().sum::<f64>() / (size * size) as f64;
    kernel.mapv_inplace(|v| v - mean);
    kernel
}

/// Same-size 2D correlation with symmetric (mirror) boundary handling.
fn filter_same(img: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (nx, ny) = img.dim();
    let (kx, ky) = kernel.dim();
    let (hx, hy) = (kx / 2, ky / 2);
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // Reflect without repeating the edge sample; cycle covers any depth.
        let period = 2 * n - 2;
        if period > 0 {
            i = i.rem_euclid(period);
            if i >= n {
                i = period - i;
            }
        } else {
            i = 0;
        }
        i as usize
    };
    let mut out = Array2::<f64>::zeros((nx, ny));
    for r in 0..nx {
        for c in 0..ny {
            let mut acc = 0.0;
            for kr in 0..kx {
                for kc in 0..ky {
                    let rr = mirror(r as isize + kr as isize - hx as isize, nx);
                    let cc = mirror(c as isize + kc as isize - hy as isize, ny);
                    acc += kernel[(kr, kc)] * img[(rr, cc)];
                }
            }
            out[(r, c)] = acc;
        }
    }
    out
}

/// High-frequency error norm: relative L2 distance of the two images after
/// Laplacian-of-Gaussian filtering, over the ROI.
pub fn hfen(
    reference: &RealImage,
    reconstruction: &RealImage,
    roi: Option<&Array2<bool>>,
) -> Result<f64, CoreError> {
    check_shapes(reference, reconstruction, roi)?;
    let kernel = log_kernel(LOG_KERNEL_SIZE, LOG_SIGMA);
    let f_ref = RealImage {
        data: filter_same(&reference.data, &kernel),
    };
    let f_rec = RealImage {
        data: filter_same(&reconstruction.data, &kernel),
    };
    let denom: f64 = roi_values(&f_ref, roi).map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(CoreError::ZeroDenominator(
            "filtered reference has zero norm".into(),
        ));
    }
    let num: f64 = roi_values(&f_rec, roi)
        .zip(roi_values(&f_ref, roi))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// Global-statistics structural similarity. Both images are rescaled by
/// the reference maximum over the ROI before evaluation; constants are
/// `c1 = 0.01`, `c2 = 0.03`.
pub fn ssim(
    reference: &RealImage,
    reconstruction: &RealImage,
    roi: Option<&Array2<bool>>,
    form: SsimForm,
) -> Result<f64, CoreError> {
    check_shapes(reference, reconstruction, roi)?;
    let c1 = 0.01;
    let c2 = 0.03;
    let peak = roi_values(reference, roi).fold(0.0f64, f64::max);
    let scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };

    let (mu_x, count) = mean(roi_values(reference, roi).map(|v| v * scale));
    let (mu_y, _) = mean(roi_values(reconstruction, roi).map(|v| v * scale));
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov = 0.0;
    for (a, b) in roi_values(reference, roi).zip(roi_values(reconstruction, roi)) {
        let dx = a * scale - mu_x;
        let dy = b * scale - mu_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov += dx * dy;
    }
    var_x /= count as f64;
    var_y /= count as f64;
    cov /= count as f64;

    let var_const = match form {
        SsimForm::Reference => c1,
        SsimForm::Standard => c2,
    };
    Ok(((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
        / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + var_const)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(nx: usize, ny: usize, seed: u64) -> RealImage {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        RealImage {
            data: Array2::from_shape_fn((nx, ny), |_| rng.random::<f64>() * 10.0),
        }
    }

    #[test]
    fn snr_zero_db_when_mse_equals_variance() {
        let x = random_image(16, 16, 1);
        let (mu, count) = mean(x.data.iter().copied());
        let var = x.data.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
        // Constant offset of sqrt(var) makes MSE exactly Var.
        let shifted = RealImage {
            data: x.data.mapv(|v| v + var.sqrt()),
        };
        let db = snr(&x, &shifted, None).unwrap();
        assert!(db.abs() < 1e-12, "snr {db}");
    }

    #[test]
    fn snr_twenty_db_at_hundredth_variance() {
        let x = random_image(16, 16, 2);
        let (mu, count) = mean(x.data.iter().copied());
        let var = x.data.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count as f64;
        let shifted = RealImage {
            data: x.data.mapv(|v| v + (var / 100.0).sqrt()),
        };
        let db = snr(&x, &shifted, None).unwrap();
        assert!((db - 20.0).abs() < 1e-12, "snr {db}");
    }

    #[test]
    fn snr_perfect_match_is_infinite() {
        let x = random_image(8, 8, 3);
        assert!(snr(&x, &x, None).unwrap().is_infinite());
    }

    #[test]
    fn snr_invariant_under_joint_scaling() {
        let x = random_image(12, 12, 4);
        let y = random_image(12, 12, 5);
        let a = snr(&x, &y, None).unwrap();
        let xs = RealImage { data: x.data.mapv(|v| v * 7.5) };
        let ys = RealImage { data: y.data.mapv(|v| v * 7.5) };
        let b = snr(&xs, &ys, None).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn hfen_unit_cases() {
        let x = random_image(20, 20, 6);
        assert_eq!(hfen(&x, &x, None).unwrap(), 0.0);
        let doubled = RealImage { data: x.data.mapv(|v| v * 2.0) };
        let h = hfen(&x, &doubled, None).unwrap();
        assert!((h - 1.0).abs() < 1e-12, "hfen {h}");
    }

    #[test]
    fn ssim_identity_is_one() {
        let x = random_image(20, 20, 7);
        let s = ssim(&x, &x, None, SsimForm::Reference).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "ssim {s}");
    }

    #[test]
    fn ssim_constant_reconstruction_scores_below_one() {
        let x = random_image(20, 20, 8);
        let flat = RealImage {
            data: Array2::from_elem((20, 20), 3.0),
        };
        let s = ssim(&x, &flat, None, SsimForm::Reference).unwrap();
        assert!(s < 1.0);
    }

    #[test]
    fn roi_everywhere_matches_no_roi() {
        let x = random_image(16, 16, 9);
        let y = random_image(16, 16, 10);
        let all = Array2::from_elem((16, 16), true);
        assert_eq!(snr(&x, &y, None).unwrap(), snr(&x, &y, Some(&all)).unwrap());
        assert_eq!(
            hfen(&x, &y, None).unwrap(),
            hfen(&x, &y, Some(&all)).unwrap()
        );
        assert_eq!(
            ssim(&x, &y, None, SsimForm::Reference).unwrap(),
            ssim(&x, &y, Some(&all), SsimForm::Reference).unwrap()
        );
    }

    #[test]
    fn log_kernel_sums_to_zero() {
        let k = log_kernel(LOG_KERNEL_SIZE, LOG_SIGMA);
        assert!(k.sum().abs() < 1e-12);
        assert_eq!(k.dim(), (15, 15));
    }
}
