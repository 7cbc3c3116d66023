//! Singular-value shrinkage of patch-group matrices: the weighted nuclear
//! norm proximal step, plus a plain nuclear-norm baseline under the same
//! threshold scale.
//!
//! Weighted mode estimates each component's signal strength as
//! `sqrt(max(sigma_j^2 - m delta^2, 0))` and assigns the inverse weight
//! `b0 sqrt(m) / (sigma_hat_j + eps)`, so strong components are barely
//! touched while components indistinguishable from the noise floor receive
//! an effectively infinite threshold and are annihilated.

use ndarray::{s, Array2};
use ndarray_linalg::SVD;
use num_complex::Complex64;

use crate::error::CoreError;
use crate::patches::PatchGroupMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShrinkMode {
    /// Adaptive per-component weights (the default).
    Weighted,
    /// Constant threshold `delta^2 / 2`, the standard nuclear-norm baseline.
    Nuclear,
}

#[derive(Debug, Clone, Copy)]
pub struct ShrinkageParams {
    /// Threshold scale; the rank penalty weight is `delta^2 / 2`.
    pub delta: f64,
    /// Weight constant for the adaptive mode.
    pub b0: f64,
    /// Guard against division by zero in the weight formula.
    pub epsilon: f64,
    pub mode: ShrinkMode,
}

impl ShrinkageParams {
    pub fn new(delta: f64, b0: f64, mode: ShrinkMode) -> Result<Self, CoreError> {
        if delta <= 0.0 {
            return Err(CoreError::InvalidParameter(format!(
                "delta must be positive, got {delta}"
            )));
        }
        if b0 <= 0.0 {
            return Err(CoreError::InvalidParameter(format!(
                "b0 must be positive, got {b0}"
            )));
        }
        Ok(Self {
            delta,
            b0,
            epsilon: 1e-16,
            mode,
        })
    }
}

/// `max(sigma - w, 0)`.
pub fn soft_threshold(sigma: f64, w: f64) -> f64 {
    (sigma - w).max(0.0)
}

/// Per-component thresholds for a group of `m` members from its singular
/// values (sorted descending). Larger singular values get smaller weights.
pub fn wnn_weights(singular_values: &[f64], m: usize, params: &ShrinkageParams) -> Vec<f64> {
    let m = m as f64;
    singular_values
        .iter()
        .map(|&sigma| {
            let sigma_hat = (sigma * sigma - m * params.delta * params.delta).max(0.0).sqrt();
            params.b0 * m.sqrt() / (sigma_hat + params.epsilon)
        })
        .collect()
}

/// Shrink a patch-group matrix by soft-thresholding its singular values,
/// keeping the singular subspaces. Weighted mode draws the thresholds from
/// [`wnn_weights`]; nuclear mode uses the constant `delta^2 / 2`.
pub fn shrink_group(
    v: &PatchGroupMatrix,
    params: &ShrinkageParams,
) -> Result<PatchGroupMatrix, CoreError> {
    if v.data.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
        return Err(CoreError::NonFinite("patch group matrix".into()));
    }
    let (n, m) = v.data.dim();
    if v.data.iter().all(|x| x.norm_sqr() == 0.0) {
        return Ok(PatchGroupMatrix {
            data: Array2::zeros((n, m)),
        });
    }

    let (u, sigma, vh) = v.data.svd(true, true)?;
    let u = u.expect("left singular vectors requested");
    let vh = vh.expect("right singular vectors requested");
    let j = n.min(m);

    let sigmas: Vec<f64> = sigma.iter().copied().collect();
    let gammas: Vec<f64> = match params.mode {
        ShrinkMode::Weighted => {
            let weights = wnn_weights(&sigmas, m, params);
            sigmas
                .iter()
                .zip(&weights)
                .map(|(&s, &w)| soft_threshold(s, w))
                .collect()
        }
        ShrinkMode::Nuclear => {
            let tau = params.delta * params.delta / 2.0;
            sigmas.iter().map(|&s| soft_threshold(s, tau)).collect()
        }
    };

    // D = U_j * diag(gamma) * Vh_j, skipping fully annihilated components.
    let rank = gammas.iter().take_while(|&&g| g > 0.0).count();
    if rank == 0 {
        return Ok(PatchGroupMatrix {
            data: Array2::zeros((n, m)),
        });
    }
    let u_j = u.slice(s![.., ..rank]);
    let mut scaled_vh = vh.slice(s![..rank.min(j), ..]).to_owned();
    for (mut row, &g) in scaled_vh.rows_mut().into_iter().zip(&gammas) {
        row.mapv_inplace(|x| x * g);
    }
    Ok(PatchGroupMatrix {
        data: u_j.dot(&scaled_vh),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn params(delta: f64, b0: f64, mode: ShrinkMode) -> ShrinkageParams {
        ShrinkageParams::new(delta, b0, mode).unwrap()
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(5.0, 2.0), 3.0);
        assert_eq!(soft_threshold(1.0, 2.0), 0.0);
        assert_eq!(soft_threshold(2.0, 2.0), 0.0);
    }

    #[test]
    fn weights_match_direct_arithmetic() {
        // b0 = 0.4, m = 43, delta = 3, sigma = 30:
        // sigma_hat = sqrt(900 - 387), w = 0.4 sqrt(43) / (sigma_hat + 1e-16).
        let p = params(3.0, 0.4, ShrinkMode::Weighted);
        let w = wnn_weights(&[30.0], 43, &p);
        let sigma_hat = (900.0f64 - 387.0).sqrt();
        let expected = 0.4 * 43.0f64.sqrt() / (sigma_hat + 1e-16);
        assert!((w[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn annihilated_component_gets_huge_weight() {
        let p = params(3.0, 0.4, ShrinkMode::Weighted);
        // sigma^2 <= m delta^2 so sigma_hat = 0 and w = b0 sqrt(m) / eps.
        let w = wnn_weights(&[10.0], 43, &p);
        let expected = 0.4 * 43.0f64.sqrt() / 1e-16;
        assert!((w[0] - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn weights_scale_linearly_in_b0() {
        let p1 = params(2.0, 0.4, ShrinkMode::Weighted);
        let p2 = params(2.0, 0.8, ShrinkMode::Weighted);
        let sigmas = [50.0, 20.0, 9.0];
        let w1 = wnn_weights(&sigmas, 10, &p1);
        let w2 = wnn_weights(&sigmas, 10, &p2);
        for (a, b) in w1.iter().zip(&w2) {
            assert!((2.0 * a - b).abs() < 1e-12 * b.abs());
        }
    }

    #[test]
    fn weights_nondecreasing_for_sorted_input() {
        let p = params(3.0, 0.4, ShrinkMode::Weighted);
        let sigmas = [100.0, 50.0, 25.0, 21.0, 19.0, 3.0];
        let w = wnn_weights(&sigmas, 43, &p);
        for pair in w.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }

    #[test]
    fn small_matrix_is_fully_annihilated() {
        // All singular values far below the noise floor.
        let v = PatchGroupMatrix {
            data: Array2::from_elem((4, 6), Complex64::new(1e-3, 0.0)),
        };
        let p = params(3.0, 0.4, ShrinkMode::Weighted);
        let d = shrink_group(&v, &p).unwrap();
        assert!(d.data.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn zero_matrix_passes_through() {
        let v = PatchGroupMatrix {
            data: Array2::zeros((4, 6)),
        };
        let p = params(3.0, 0.4, ShrinkMode::Weighted);
        let d = shrink_group(&v, &p).unwrap();
        assert!(d.data.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn rank_one_matrix_matches_scalar_pipeline() {
        let n = 5;
        let m = 8;
        let sigma = 500.0;
        let u: Vec<Complex64> = (0..n)
            .map(|i| Complex64::from_polar(1.0 / (n as f64).sqrt(), 0.3 * i as f64))
            .collect();
        let v: Vec<Complex64> = (0..m)
            .map(|i| Complex64::from_polar(1.0 / (m as f64).sqrt(), -0.11 * i as f64))
            .collect();
        let data = Array2::from_shape_fn((n, m), |(i, j)| u[i] * sigma * v[j].conj());
        let p = params(3.0, 0.4, ShrinkMode::Weighted);
        let d = shrink_group(&PatchGroupMatrix { data: data.clone() }, &p).unwrap();

        let sigma_hat = (sigma * sigma - m as f64 * 9.0).max(0.0).sqrt();
        let w1 = 0.4 * (m as f64).sqrt() / (sigma_hat + 1e-16);
        let gamma = soft_threshold(sigma, w1);
        let expected = data.mapv(|x| x * (gamma / sigma));
        let err = (&d.data - &expected)
            .iter()
            .map(|x| x.norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-10 * sigma, "error {err}");
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut data = Array2::from_elem((2, 3), Complex64::new(1.0, 0.0));
        data[(0, 0)] = Complex64::new(f64::NAN, 0.0);
        let p = params(3.0, 0.4, ShrinkMode::Weighted);
        assert!(matches!(
            shrink_group(&PatchGroupMatrix { data }, &p),
            Err(CoreError::NonFinite(_))
        ));
    }
}
