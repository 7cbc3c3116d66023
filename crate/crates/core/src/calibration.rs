//! Self-calibration: fit the k-space prediction kernel on the ACS block,
//! realize it as a per-pixel image-domain operator, and precompute the
//! block inverse used by the consistency update.
//!
//! The kernel predicts each k-space sample of a target coil as a linear
//! combination of its `ks x ks` neighborhood across all coils, with the
//! target coil's own center tap excluded. Because that prediction is a
//! (circular) k-space convolution, it acts in the image domain as an
//! independent `C x C` matrix multiply at every pixel.

use ndarray::{Array1, Array2, Array4};
use ndarray_linalg::{Inverse, Solve};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::CoreError;
use crate::tensor::{fft2_centered, ComplexImage, KSpaceData, MultiCoilImage};

/// Fitted k-space kernel: `weights[(dr, dc, source, target)]` with offsets
/// indexed from 0 so the center tap sits at `(ks/2, ks/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibKernel {
    pub weights: Array4<Complex64>,
    pub ks: usize,
    pub center_excluded: bool,
}

impl CalibKernel {
    pub fn n_coils(&self) -> usize {
        self.weights.dim().3
    }
}

/// Calibration output: the kernel plus per-target-coil fit diagnostics.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub kernel: CalibKernel,
    /// Relative residual `||Mw - b|| / ||b||` per target coil.
    pub residuals: Vec<f64>,
    pub equations: usize,
    pub unknowns: usize,
    /// Set when the system has fewer than two equations per unknown; small
    /// ACS regions degrade kernel quality well before the fit becomes
    /// outright infeasible.
    pub ill_conditioned: bool,
}

/// Fit the calibration kernel on the fully sampled ACS block.
///
/// `lambda` is the Tikhonov weight; `None` picks `1e-6 * ||M||_F^2 / rows`,
/// which stabilizes near-rank-deficient systems without biasing healthy
/// ones.
pub fn calibrate(
    acs_kspace: &KSpaceData,
    acs_rows: std::ops::Range<usize>,
    acs_cols: std::ops::Range<usize>,
    ks: usize,
    lambda: Option<f64>,
) -> Result<CalibrationReport, CoreError> {
    if ks % 2 == 0 || ks == 0 {
        return Err(CoreError::InvalidParameter(format!(
            "kernel size must be odd and positive, got {ks}"
        )));
    }
    let (nx, ny) = acs_kspace.shape();
    let n_coils = acs_kspace.n_coils();
    if acs_rows.end > nx || acs_cols.end > ny {
        return Err(CoreError::AcsOutOfBounds(format!(
            "rows {:?}, cols {:?} on {}x{} grid",
            acs_rows, acs_cols, nx, ny
        )));
    }
    let half = ks / 2;
    if acs_rows.len() < ks || acs_cols.len() < ks {
        return Err(CoreError::UnderdeterminedCalibration {
            equations: 0,
            unknowns: ks * ks * n_coils - 1,
        });
    }
    let fit_rows: Vec<usize> = (acs_rows.start + half..acs_rows.end - half).collect();
    let fit_cols: Vec<usize> = (acs_cols.start + half..acs_cols.end - half).collect();
    let equations = fit_rows.len() * fit_cols.len();
    let unknowns = ks * ks * n_coils - 1;
    if equations < unknowns {
        return Err(CoreError::UnderdeterminedCalibration {
            equations,
            unknowns,
        });
    }

    // One source matrix serves every target coil; the excluded column is
    // dropped per target below. Column order: source coil major, then the
    // kernel offset in row-major order.
    let total_cols = ks * ks * n_coils;
    let mut source = Array2::<Complex64>::zeros((equations, total_cols));
    for (row, (&r, &c)) in fit_rows
        .iter()
        .flat_map(|r| fit_cols.iter().map(move |c| (r, c)))
        .enumerate()
    {
        for s in 0..n_coils {
            let plane = &acs_kspace.coils[s].data;
            for dr in 0..ks {
                for dc in 0..ks {
                    let col = s * ks * ks + dr * ks + dc;
                    source[(row, col)] = plane[(r + dr - half, c + dc - half)];
                }
            }
        }
    }

    let frob_sq: f64 = source.iter().map(|v| v.norm_sqr()).sum();
    let lambda = lambda.unwrap_or(1e-6 * frob_sq / equations as f64);
    let center_offset = half * ks + half;

    let per_target: Vec<Result<(Array1<Complex64>, f64), CoreError>> = (0..n_coils)
        .into_par_iter()
        .map(|t| {
            let excluded = t * ks * ks + center_offset;
            let cols: Vec<usize> = (0..total_cols).filter(|&c| c != excluded).collect();
            let a = source.select(ndarray::Axis(1), &cols);
            let b = Array1::from_iter(
                fit_rows
                    .iter()
                    .flat_map(|&r| fit_cols.iter().map(move |&c| (r, c)))
                    .map(|(r, c)| acs_kspace.coils[t].data[(r, c)]),
            );
            // Ridge-regularized normal equations; the system is small
            // (at most ks^2 * C - 1 unknowns).
            let ah = a.t().mapv(|v| v.conj());
            let mut gram = ah.dot(&a);
            for i in 0..gram.nrows() {
                gram[(i, i)] += Complex64::new(lambda, 0.0);
            }
            let rhs = ah.dot(&b);
            let w = gram.solve(&rhs).map_err(CoreError::from)?;
            let fit = a.dot(&w);
            let b_norm = b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let res = (&fit - &b).iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let residual = if b_norm > 0.0 { res / b_norm } else { res };
            Ok((w, residual))
        })
        .collect();

    let mut weights = Array4::<Complex64>::zeros((ks, ks, n_coils, n_coils));
    let mut residuals = Vec::with_capacity(n_coils);
    for (t, result) in per_target.into_iter().enumerate() {
        let (w, residual) = result?;
        residuals.push(residual);
        let excluded = t * ks * ks + center_offset;
        let mut dense = 0usize;
        for col in 0..total_cols {
            if col == excluded {
                continue;
            }
            let s = col / (ks * ks);
            let offset = col % (ks * ks);
            weights[(offset / ks, offset % ks, s, t)] = w[dense];
            dense += 1;
        }
    }

    Ok(CalibrationReport {
        kernel: CalibKernel {
            weights,
            ks,
            center_excluded: true,
        },
        residuals,
        equations,
        unknowns,
        ill_conditioned: equations < 2 * unknowns,
    })
}

/// Predict k-space values of each target coil from its neighborhood using
/// the kernel, with circular wraparound. This is the k-space route that
/// [`kernel_to_image_operator`] must reproduce pointwise in image space.
pub fn predict_kspace(kernel: &CalibKernel, y: &KSpaceData) -> KSpaceData {
    let (nx, ny) = y.shape();
    let n_coils = y.n_coils();
    let ks = kernel.ks;
    let half = ks / 2;
    let coils: Vec<ComplexImage> = (0..n_coils)
        .into_par_iter()
        .map(|t| {
            let mut out = Array2::<Complex64>::zeros((nx, ny));
            for r in 0..nx {
                for c in 0..ny {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for s in 0..n_coils {
                        let plane = &y.coils[s].data;
                        for dr in 0..ks {
                            for dc in 0..ks {
                                let w = kernel.weights[(dr, dc, s, t)];
                                if w == Complex64::new(0.0, 0.0) {
                                    continue;
                                }
                                let rr = (r + nx + dr - half) % nx;
                                let cc = (c + ny + dc - half) % ny;
                                acc += w * plane[(rr, cc)];
                            }
                        }
                    }
                    out[(r, c)] = acc;
                }
            }
            ComplexImage { data: out }
        })
        .collect();
    KSpaceData { coils }
}

/// Per-pixel `C x C` operator: `blocks[(r, c, target, source)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePointwiseOperator {
    pub blocks: Array4<Complex64>,
}

impl ImagePointwiseOperator {
    pub fn shape(&self) -> (usize, usize) {
        let d = self.blocks.dim();
        (d.0, d.1)
    }

    pub fn n_coils(&self) -> usize {
        self.blocks.dim().2
    }
}

/// Realize the k-space kernel as an image-domain pointwise operator: each
/// kernel slice is zero-padded onto the grid at centered offsets and
/// transformed so that pointwise multiplication in image space equals the
/// circular k-space prediction.
pub fn kernel_to_image_operator(
    kernel: &CalibKernel,
    nx: usize,
    ny: usize,
) -> Result<ImagePointwiseOperator, CoreError> {
    let ks = kernel.ks;
    if ks > nx || ks > ny {
        return Err(CoreError::InvalidParameter(format!(
            "kernel size {ks} exceeds grid {nx}x{ny}"
        )));
    }
    let n_coils = kernel.n_coils();
    let half = ks / 2;
    let (cx, cy) = (nx / 2, ny / 2);
    let scale = ((nx * ny) as f64).sqrt();
    let mut blocks = Array4::<Complex64>::zeros((nx, ny, n_coils, n_coils));
    for t in 0..n_coils {
        for s in 0..n_coils {
            let mut padded = ComplexImage::zeros(nx, ny);
            for dr in 0..ks {
                for dc in 0..ks {
                    padded.data[(cx + dr - half, cy + dc - half)] =
                        kernel.weights[(dr, dc, s, t)];
                }
            }
            let g = fft2_centered(&padded);
            for r in 0..nx {
                for c in 0..ny {
                    blocks[(r, c, t, s)] = g.data[(r, c)] * scale;
                }
            }
        }
    }
    Ok(ImagePointwiseOperator { blocks })
}

/// Apply the pointwise operator: at each pixel the output coil vector is
/// the block times the input coil vector.
pub fn apply_pointwise(
    op: &ImagePointwiseOperator,
    x: &MultiCoilImage,
) -> Result<MultiCoilImage, CoreError> {
    let (nx, ny) = op.shape();
    if x.shape() != (nx, ny) {
        return Err(CoreError::ShapeMismatch {
            expected: (nx, ny),
            got: x.shape(),
        });
    }
    let n_coils = op.n_coils();
    if x.n_coils() != n_coils {
        return Err(CoreError::CoilShapeMismatch {
            index: 0,
            expected: (n_coils, n_coils),
            got: (x.n_coils(), x.n_coils()),
        });
    }
    let mut out = MultiCoilImage::zeros(n_coils, nx, ny);
    for r in 0..nx {
        for c in 0..ny {
            for t in 0..n_coils {
                let mut acc = Complex64::new(0.0, 0.0);
                for s in 0..n_coils {
                    acc += op.blocks[(r, c, t, s)] * x.coils[s].data[(r, c)];
                }
                out.coils[t].data[(r, c)] = acc;
            }
        }
    }
    Ok(out)
}

/// Precompute the pixelwise inverse of `mu1 (G - I)^H (G - I) + beta I`.
/// Every block is Hermitian positive definite for `beta > 0`, so the exact
/// inverse always exists.
pub fn build_delta_inverse(
    op_g: &ImagePointwiseOperator,
    mu1: f64,
    beta: f64,
) -> Result<ImagePointwiseOperator, CoreError> {
    if beta <= 0.0 {
        return Err(CoreError::InvalidParameter(format!(
            "beta must be positive, got {beta}"
        )));
    }
    if mu1 < 0.0 {
        return Err(CoreError::InvalidParameter(format!(
            "mu1 must be nonnegative, got {mu1}"
        )));
    }
    let (nx, ny) = op_g.shape();
    let n_coils = op_g.n_coils();
    let pixels: Vec<(usize, usize)> = (0..nx)
        .flat_map(|r| (0..ny).map(move |c| (r, c)))
        .collect();
    let inverted: Vec<Array2<Complex64>> = pixels
        .par_iter()
        .map(|&(r, c)| {
            let mut e = Array2::<Complex64>::zeros((n_coils, n_coils));
            for t in 0..n_coils {
                for s in 0..n_coils {
                    e[(t, s)] = op_g.blocks[(r, c, t, s)];
                }
                e[(t, t)] -= Complex64::new(1.0, 0.0);
            }
            let eh = e.t().mapv(|v| v.conj());
            let mut delta = eh.dot(&e).mapv(|v| v * mu1);
            for i in 0..n_coils {
                delta[(i, i)] += Complex64::new(beta, 0.0);
            }
            delta.inv().map_err(CoreError::from)
        })
        .collect::<Result<_, _>>()?;

    let mut blocks = Array4::<Complex64>::zeros((nx, ny, n_coils, n_coils));
    for (&(r, c), inv) in pixels.iter().zip(&inverted) {
        for t in 0..n_coils {
            for s in 0..n_coils {
                blocks[(r, c, t, s)] = inv[(t, s)];
            }
        }
    }
    Ok(ImagePointwiseOperator { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_kspace(n_coils: usize, nx: usize, ny: usize, seed: u64) -> KSpaceData {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let coils = (0..n_coils)
            .map(|_| ComplexImage {
                data: Array2::from_shape_fn((nx, ny), |_| {
                    Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
                }),
            })
            .collect();
        KSpaceData::new(coils).unwrap()
    }

    #[test]
    fn scaled_coil_pair_calibrates_exactly() {
        let base = random_kspace(1, 32, 32, 1);
        let coil2 = ComplexImage {
            data: base.coils[0].data.mapv(|v| v * 0.5),
        };
        let y = KSpaceData::new(vec![base.coils[0].clone(), coil2]).unwrap();
        let report = calibrate(&y, 10..22, 10..22, 5, Some(1e-9)).unwrap();
        for (t, res) in report.residuals.iter().enumerate() {
            assert!(*res < 1e-8, "coil {t} residual {res}");
        }
        // Center tap of the same coil stays exactly zero.
        let half = 2;
        for t in 0..2 {
            assert_eq!(
                report.kernel.weights[(half, half, t, t)],
                Complex64::new(0.0, 0.0)
            );
        }
    }

    #[test]
    fn ridge_limit_shrinks_weights_to_zero() {
        let y = random_kspace(2, 24, 24, 2);
        let report = calibrate(&y, 4..20, 4..20, 3, Some(1e12)).unwrap();
        let max_w = report
            .kernel
            .weights
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max);
        assert!(max_w < 1e-6, "weights should vanish, max {max_w}");
        for res in &report.residuals {
            assert!((res - 1.0).abs() < 1e-6, "residual should reach ||b||");
        }
    }

    #[test]
    fn residual_monotone_in_lambda() {
        let y = random_kspace(3, 24, 24, 3);
        let lambdas = [1e-9, 1e-3, 1e0, 1e3, 1e6];
        let mut prev = vec![0.0; 3];
        for (i, l) in lambdas.iter().enumerate() {
            let report = calibrate(&y, 2..22, 2..22, 3, Some(*l)).unwrap();
            if i > 0 {
                for (t, res) in report.residuals.iter().enumerate() {
                    assert!(
                        *res >= prev[t] - 1e-12,
                        "residual decreased with lambda at coil {t}"
                    );
                }
            }
            prev = report.residuals.clone();
        }
    }

    #[test]
    fn underdetermined_acs_is_an_error() {
        let y = random_kspace(4, 16, 16, 4);
        // 8x8 ACS with ks 7: (8-7+1)^2 = 4 equations < 7*7*4 - 1 unknowns.
        let err = calibrate(&y, 4..12, 4..12, 7, None).unwrap_err();
        assert!(matches!(err, CoreError::UnderdeterminedCalibration { .. }));
    }

    #[test]
    fn zero_kernel_realizes_zero_operator() {
        let kernel = CalibKernel {
            weights: Array4::zeros((3, 3, 2, 2)),
            ks: 3,
            center_excluded: true,
        };
        let op = kernel_to_image_operator(&kernel, 8, 8).unwrap();
        assert!(op.blocks.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn identity_blocks_pass_input_through() {
        let mut blocks = Array4::<Complex64>::zeros((4, 4, 2, 2));
        for r in 0..4 {
            for c in 0..4 {
                for t in 0..2 {
                    blocks[(r, c, t, t)] = Complex64::new(1.0, 0.0);
                }
            }
        }
        let op = ImagePointwiseOperator { blocks };
        let x = MultiCoilImage::new(
            random_kspace(2, 4, 4, 5)
                .coils,
        )
        .unwrap();
        let out = apply_pointwise(&op, &x).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn single_tap_kernel_gives_linear_phase_ramp() {
        // One unit tap one row below center: prediction shifts k-space by
        // one row, whose image-domain diagonal is a known phase ramp.
        let mut weights = Array4::<Complex64>::zeros((3, 3, 1, 1));
        weights[(2, 1, 0, 0)] = Complex64::new(1.0, 0.0);
        let kernel = CalibKernel {
            weights,
            ks: 3,
            center_excluded: true,
        };
        let (nx, ny) = (8usize, 8usize);
        let op = kernel_to_image_operator(&kernel, nx, ny).unwrap();
        for r in 0..nx {
            for c in 0..ny {
                let p = r as f64 - (nx / 2) as f64;
                let expected = Complex64::from_polar(
                    1.0,
                    -2.0 * std::f64::consts::PI * p / nx as f64,
                );
                let got = op.blocks[(r, c, 0, 0)];
                assert!(
                    (got - expected).norm() < 1e-10,
                    "pixel ({r},{c}): {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn delta_inverse_special_cases() {
        let n_coils = 3;
        let (nx, ny) = (4usize, 4usize);
        let zero_g = ImagePointwiseOperator {
            blocks: Array4::zeros((nx, ny, n_coils, n_coils)),
        };
        // G = 0: delta = (mu1 + beta) I.
        let inv = build_delta_inverse(&zero_g, 1.0, 0.3).unwrap();
        for r in 0..nx {
            for c in 0..ny {
                for t in 0..n_coils {
                    for s in 0..n_coils {
                        let expected = if t == s { 1.0 / 1.3 } else { 0.0 };
                        assert!((inv.blocks[(r, c, t, s)].re - expected).abs() < 1e-12);
                        assert!(inv.blocks[(r, c, t, s)].im.abs() < 1e-12);
                    }
                }
            }
        }
        // mu1 = 0: delta = beta I.
        let inv = build_delta_inverse(&zero_g, 0.0, 0.5).unwrap();
        for v in inv.blocks.iter().zip(zero_g.blocks.iter()) {
            let _ = v;
        }
        for r in 0..nx {
            for t in 0..n_coils {
                assert!((inv.blocks[(r, 0, t, t)].re - 2.0).abs() < 1e-12);
            }
        }
        assert!(build_delta_inverse(&zero_g, 1.0, 0.0).is_err());
    }
}
