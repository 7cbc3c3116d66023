//! Complex 2D arrays, centered unitary Fourier transforms, and the
//! sampling/encoding operators shared by the rest of the crate.
//!
//! Conventions, fixed once here:
//! - arrays are row-major, `(nx, ny)` = (rows, cols);
//! - multicoil data is coil-major: a stacked vector is coil 0's rows, then
//!   coil 1's, ...;
//! - `fft2_centered` is unitary (scaled by `1/sqrt(nx*ny)`) with the zero
//!   frequency at `(nx/2, ny/2)`, so norms are preserved in both domains;
//! - k-space arrays live on the full grid with exact zeros at unsampled
//!   locations, which doubles as the zero-filled adjoint of the sampling
//!   projection.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use std::ops::Range;

use crate::error::CoreError;

/// A complex-valued 2D image (or one k-space plane) of shape `nx x ny`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    pub data: Array2<Complex64>,
}

impl ComplexImage {
    pub fn new(data: Array2<Complex64>) -> Result<Self, CoreError> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(CoreError::EmptyImage);
        }
        Ok(Self { data })
    }

    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            data: Array2::zeros((nx, ny)),
        }
    }

    pub fn nx(&self) -> usize {
        self.data.nrows()
    }

    pub fn ny(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data
            .iter()
            .all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

/// An ordered stack of coil images sharing one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoilImage {
    pub coils: Vec<ComplexImage>,
}

impl MultiCoilImage {
    pub fn new(coils: Vec<ComplexImage>) -> Result<Self, CoreError> {
        if coils.is_empty() {
            return Err(CoreError::NoCoils);
        }
        let expected = coils[0].shape();
        for (index, coil) in coils.iter().enumerate() {
            if coil.shape() != expected {
                return Err(CoreError::CoilShapeMismatch {
                    index,
                    expected,
                    got: coil.shape(),
                });
            }
        }
        Ok(Self { coils })
    }

    pub fn zeros(n_coils: usize, nx: usize, ny: usize) -> Self {
        Self {
            coils: (0..n_coils).map(|_| ComplexImage::zeros(nx, ny)).collect(),
        }
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coils[0].shape()
    }

    pub fn norm(&self) -> f64 {
        self.coils
            .iter()
            .map(|c| c.data.iter().map(|v| v.norm_sqr()).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.coils.iter().all(|c| c.is_finite())
    }

    /// `self + scale * other`, elementwise over all coils.
    pub fn add_scaled(&self, other: &Self, scale: f64) -> Self {
        let coils = self
            .coils
            .iter()
            .zip(&other.coils)
            .map(|(a, b)| ComplexImage {
                data: &a.data + &b.data.mapv(|v| v * scale),
            })
            .collect();
        Self { coils }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add_scaled(other, -1.0)
    }

    pub fn scale(&self, scale: f64) -> Self {
        let coils = self
            .coils
            .iter()
            .map(|c| ComplexImage {
                data: c.data.mapv(|v| v * scale),
            })
            .collect();
        Self { coils }
    }

    /// Complex inner product `<self, other>` with conjugation on `self`.
    pub fn dot(&self, other: &Self) -> Complex64 {
        self.coils
            .iter()
            .zip(&other.coils)
            .map(|(a, b)| {
                a.data
                    .iter()
                    .zip(b.data.iter())
                    .map(|(x, y)| x.conj() * y)
                    .sum::<Complex64>()
            })
            .sum()
    }
}

/// Multicoil k-space on the full grid; unsampled entries hold exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    pub coils: Vec<ComplexImage>,
}

impl KSpaceData {
    pub fn new(coils: Vec<ComplexImage>) -> Result<Self, CoreError> {
        let mc = MultiCoilImage::new(coils)?;
        Ok(Self { coils: mc.coils })
    }

    pub fn zeros(n_coils: usize, nx: usize, ny: usize) -> Self {
        Self {
            coils: (0..n_coils).map(|_| ComplexImage::zeros(nx, ny)).collect(),
        }
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.coils[0].shape()
    }

    /// Zero out entries outside the mask (the sampling projection).
    pub fn project(&self, mask: &SamplingMask) -> Result<Self, CoreError> {
        check_shape(self.shape(), mask.shape())?;
        let coils = self
            .coils
            .iter()
            .map(|c| {
                let mut data = c.data.clone();
                Zip::from(&mut data).and(&mask.keep).for_each(|v, &k| {
                    if !k {
                        *v = Complex64::new(0.0, 0.0);
                    }
                });
                ComplexImage { data }
            })
            .collect();
        Ok(Self { coils })
    }
}

/// A real, nonnegative magnitude image (SOS output, references, metrics input).
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    pub data: Array2<f64>,
}

impl RealImage {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            data: Array2::zeros((nx, ny)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Binary k-space sampling pattern with a fully sampled calibration block.
///
/// `acs_rows`/`acs_cols` are half-open ranges; every location inside the
/// block is guaranteed sampled.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub keep: Array2<bool>,
    pub acs_rows: Range<usize>,
    pub acs_cols: Range<usize>,
}

impl SamplingMask {
    pub fn new(
        keep: Array2<bool>,
        acs_rows: Range<usize>,
        acs_cols: Range<usize>,
    ) -> Result<Self, CoreError> {
        let (nx, ny) = keep.dim();
        if nx == 0 || ny == 0 {
            return Err(CoreError::EmptyImage);
        }
        if acs_rows.end > nx || acs_cols.end > ny {
            return Err(CoreError::AcsOutOfBounds(format!(
                "rows {:?}, cols {:?} on {}x{} grid",
                acs_rows, acs_cols, nx, ny
            )));
        }
        for r in acs_rows.clone() {
            for c in acs_cols.clone() {
                if !keep[(r, c)] {
                    return Err(CoreError::AcsNotSampled(r, c));
                }
            }
        }
        Ok(Self {
            keep,
            acs_rows,
            acs_cols,
        })
    }

    /// All-true mask; the ACS block spans the whole grid.
    pub fn full(nx: usize, ny: usize) -> Self {
        Self {
            keep: Array2::from_elem((nx, ny), true),
            acs_rows: 0..nx,
            acs_cols: 0..ny,
        }
    }

    /// Recover a mask from a bare keep array by taking the ACS block as the
    /// maximal centered rectangle of sampled entries. Useful when the array
    /// was serialized without its ACS annotation.
    pub fn from_keep_inferring_acs(keep: Array2<bool>) -> Result<Self, CoreError> {
        let (nx, ny) = keep.dim();
        if nx == 0 || ny == 0 {
            return Err(CoreError::EmptyImage);
        }
        let (cx, cy) = (nx / 2, ny / 2);
        if !keep[(cx, cy)] {
            // No sampled center: fall back to an empty ACS at the center.
            return Self::new(keep, cx..cx, cy..cy);
        }
        // Grow a centered rectangle while every entry stays sampled.
        let all_true = |keep: &Array2<bool>, rows: &Range<usize>, cols: &Range<usize>| {
            rows.clone().all(|r| cols.clone().all(|c| keep[(r, c)]))
        };
        let mut rows = cx..cx + 1;
        let mut cols = cy..cy + 1;
        loop {
            let mut grew = false;
            for (dr_lo, dr_hi, dc_lo, dc_hi) in
                [(1usize, 0usize, 0usize, 0usize), (0, 1, 0, 0), (0, 0, 1, 0), (0, 0, 0, 1)]
            {
                let cand_rows = rows.start.saturating_sub(dr_lo)..(rows.end + dr_hi).min(nx);
                let cand_cols = cols.start.saturating_sub(dc_lo)..(cols.end + dc_hi).min(ny);
                if (cand_rows != rows || cand_cols != cols)
                    && all_true(&keep, &cand_rows, &cand_cols)
                {
                    rows = cand_rows;
                    cols = cand_cols;
                    grew = true;
                }
            }
            if !grew {
                break;
            }
        }
        Self::new(keep, rows, cols)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.keep.dim()
    }

    /// Number of sampled locations.
    pub fn sample_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Acceleration factor `nx * ny / M`.
    pub fn acceleration_factor(&self) -> f64 {
        let (nx, ny) = self.shape();
        (nx * ny) as f64 / self.sample_count() as f64
    }

    pub fn is_full(&self) -> bool {
        self.keep.iter().all(|&k| k)
    }
}

fn check_shape(expected: (usize, usize), got: (usize, usize)) -> Result<(), CoreError> {
    if expected != got {
        return Err(CoreError::ShapeMismatch { expected, got });
    }
    Ok(())
}

/// Roll indices so position 0 moves to `n/2` (forward shift to center).
fn fftshift2(data: &Array2<Complex64>) -> Array2<Complex64> {
    roll2(data, data.nrows() / 2, data.ncols() / 2)
}

/// Inverse of [`fftshift2`]: position `n/2` moves back to 0.
fn ifftshift2(data: &Array2<Complex64>) -> Array2<Complex64> {
    let (nx, ny) = data.dim();
    roll2(data, nx - nx / 2, ny - ny / 2)
}

fn roll2(data: &Array2<Complex64>, by_r: usize, by_c: usize) -> Array2<Complex64> {
    let (nx, ny) = data.dim();
    let mut out = Array2::zeros((nx, ny));
    for r in 0..nx {
        let rr = (r + by_r) % nx;
        for c in 0..ny {
            out[(rr, (c + by_c) % ny)] = data[(r, c)];
        }
    }
    out
}

fn fft2_raw(data: &Array2<Complex64>, forward: bool) -> Array2<Complex64> {
    let (nx, ny) = data.dim();
    let mut planner = FftPlanner::new();
    let row_fft = if forward {
        planner.plan_fft_forward(ny)
    } else {
        planner.plan_fft_inverse(ny)
    };
    let col_fft = if forward {
        planner.plan_fft_forward(nx)
    } else {
        planner.plan_fft_inverse(nx)
    };

    let mut work = data.clone();
    for mut row in work.rows_mut() {
        let slice = row.as_slice_mut().expect("row-major layout");
        row_fft.process(slice);
    }
    // Columns via transpose so each 1D transform runs on contiguous memory.
    let mut transposed = work.t().as_standard_layout().into_owned();
    for mut row in transposed.rows_mut() {
        let slice = row.as_slice_mut().expect("row-major layout");
        col_fft.process(slice);
    }
    transposed.t().as_standard_layout().into_owned()
}

/// Unitary centered 2D DFT: zero frequency at `(nx/2, ny/2)`, norm preserved.
pub fn fft2_centered(img: &ComplexImage) -> ComplexImage {
    let scale = 1.0 / ((img.nx() * img.ny()) as f64).sqrt();
    let shifted = ifftshift2(&img.data);
    let transformed = fft2_raw(&shifted, true);
    ComplexImage {
        data: fftshift2(&transformed).mapv(|v| v * scale),
    }
}

/// Inverse of [`fft2_centered`]; also unitary.
pub fn ifft2_centered(img: &ComplexImage) -> ComplexImage {
    let scale = 1.0 / ((img.nx() * img.ny()) as f64).sqrt();
    let shifted = ifftshift2(&img.data);
    let transformed = fft2_raw(&shifted, false);
    ComplexImage {
        data: fftshift2(&transformed).mapv(|v| v * scale),
    }
}

/// Per-coil centered FFT of an image stack.
pub fn fft2_multicoil(x: &MultiCoilImage) -> KSpaceData {
    let coils: Vec<ComplexImage> = x.coils.par_iter().map(fft2_centered).collect();
    KSpaceData { coils }
}

/// Per-coil centered inverse FFT of a k-space stack.
pub fn ifft2_multicoil(y: &KSpaceData) -> MultiCoilImage {
    let coils: Vec<ComplexImage> = y.coils.par_iter().map(ifft2_centered).collect();
    MultiCoilImage { coils }
}

/// The undersampled encoding operator: per-coil centered FFT followed by
/// zeroing of unsampled locations.
pub fn apply_encoding(x: &MultiCoilImage, mask: &SamplingMask) -> Result<KSpaceData, CoreError> {
    check_shape(x.shape(), mask.shape())?;
    let coils: Vec<ComplexImage> = x
        .coils
        .par_iter()
        .map(|coil| {
            let mut k = fft2_centered(coil);
            Zip::from(&mut k.data).and(&mask.keep).for_each(|v, &keep| {
                if !keep {
                    *v = Complex64::new(0.0, 0.0);
                }
            });
            k
        })
        .collect();
    Ok(KSpaceData { coils })
}

/// Adjoint of [`apply_encoding`]: zero unsampled entries, then per-coil
/// centered inverse FFT.
pub fn apply_encoding_adjoint(
    y: &KSpaceData,
    mask: &SamplingMask,
) -> Result<MultiCoilImage, CoreError> {
    check_shape(y.shape(), mask.shape())?;
    let coils: Vec<ComplexImage> = y
        .coils
        .par_iter()
        .map(|coil| {
            let mut masked = coil.clone();
            Zip::from(&mut masked.data)
                .and(&mask.keep)
                .for_each(|v, &keep| {
                    if !keep {
                        *v = Complex64::new(0.0, 0.0);
                    }
                });
            ifft2_centered(&masked)
        })
        .collect();
    Ok(MultiCoilImage { coils })
}

/// Square root of the coilwise sum of squared magnitudes.
pub fn sos_combine(x: &MultiCoilImage) -> RealImage {
    let (nx, ny) = x.shape();
    let mut out = Array2::<f64>::zeros((nx, ny));
    for coil in &x.coils {
        Zip::from(&mut out).and(&coil.data).for_each(|acc, v| {
            *acc += v.norm_sqr();
        });
    }
    RealImage {
        data: out.mapv(f64::sqrt),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_image(nx: usize, ny: usize, value: Complex64) -> ComplexImage {
        ComplexImage {
            data: Array2::from_elem((nx, ny), value),
        }
    }

    #[test]
    fn constant_image_concentrates_at_center() {
        let img = constant_image(4, 4, Complex64::new(1.0, 0.0));
        let k = fft2_centered(&img);
        for ((r, c), v) in k.data.indexed_iter() {
            if (r, c) == (2, 2) {
                assert!((v - Complex64::new(4.0, 0.0)).norm() < 1e-12);
            } else {
                assert!(v.norm() < 1e-12, "leakage at ({r}, {c}): {v}");
            }
        }
    }

    #[test]
    fn delta_at_center_transforms_to_constant() {
        let mut img = ComplexImage::zeros(6, 6);
        img.data[(3, 3)] = Complex64::new(1.0, 0.0);
        let x = ifft2_centered(&img);
        let expected = Complex64::new(1.0 / 6.0, 0.0);
        for v in x.data.iter() {
            assert!((v - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn round_trips_are_identity() {
        let img = ComplexImage {
            data: Array2::from_shape_fn((5, 7), |(r, c)| {
                Complex64::new((r * 7 + c) as f64 * 0.3 - 1.0, (c as f64) - 2.5)
            }),
        };
        let back = ifft2_centered(&fft2_centered(&img));
        let err = (&back.data - &img.data).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-12 * img.norm().max(1.0));

        let fwd = fft2_centered(&ifft2_centered(&img));
        let err = (&fwd.data - &img.data).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-12 * img.norm().max(1.0));
    }

    #[test]
    fn sos_three_four_five() {
        let a = constant_image(2, 2, Complex64::new(3.0, 0.0));
        let b = constant_image(2, 2, Complex64::new(0.0, 4.0));
        let x = MultiCoilImage::new(vec![a, b]).unwrap();
        let sos = sos_combine(&x);
        for v in sos.data.iter() {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sos_single_coil_is_magnitude() {
        let a = ComplexImage {
            data: Array2::from_shape_fn((3, 3), |(r, c)| Complex64::new(r as f64, -(c as f64))),
        };
        let expected: Vec<f64> = a.data.iter().map(|v| v.norm()).collect();
        let sos = sos_combine(&MultiCoilImage::new(vec![a]).unwrap());
        for (got, want) in sos.data.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn full_mask_encoding_is_plain_fft() {
        let x = MultiCoilImage::new(vec![ComplexImage {
            data: Array2::from_shape_fn((4, 4), |(r, c)| Complex64::new(r as f64, c as f64)),
        }])
        .unwrap();
        let mask = SamplingMask::full(4, 4);
        let y = apply_encoding(&x, &mask).unwrap();
        let direct = fft2_centered(&x.coils[0]);
        let err = (&y.coils[0].data - &direct.data)
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-14);
    }

    #[test]
    fn single_point_mask_leaves_one_sample() {
        let mut keep = Array2::from_elem((4, 4), false);
        keep[(2, 2)] = true;
        let mask = SamplingMask::new(keep, 2..3, 2..3).unwrap();
        let x = MultiCoilImage::new(vec![constant_image(4, 4, Complex64::new(1.0, 1.0))]).unwrap();
        let y = apply_encoding(&x, &mask).unwrap();
        let nonzero = y.coils[0].data.iter().filter(|v| v.norm() > 0.0).count();
        assert!(nonzero <= 1);
    }

    #[test]
    fn adjoint_of_zero_is_zero() {
        let y = KSpaceData::zeros(2, 4, 4);
        let mask = SamplingMask::full(4, 4);
        let x = apply_encoding_adjoint(&y, &mask).unwrap();
        assert!(x.norm() < 1e-15);
    }

    #[test]
    fn projection_is_idempotent() {
        let mut keep = Array2::from_elem((6, 6), false);
        for r in 0..6 {
            keep[(r, 3)] = true;
            keep[(3, r)] = true;
        }
        let mask = SamplingMask::new(keep, 3..4, 3..4).unwrap();
        let y = KSpaceData::new(vec![ComplexImage {
            data: Array2::from_shape_fn((6, 6), |(r, c)| Complex64::new(r as f64, c as f64)),
        }])
        .unwrap();
        let once = y.project(&mask).unwrap();
        let twice = once.project(&mask).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn mask_rejects_unsampled_acs() {
        let mut keep = Array2::from_elem((4, 4), true);
        keep[(1, 1)] = false;
        let err = SamplingMask::new(keep, 0..4, 0..4).unwrap_err();
        assert!(matches!(err, CoreError::AcsNotSampled(1, 1)));
    }

    #[test]
    fn infer_acs_recovers_centered_block() {
        let mut keep = Array2::from_elem((8, 8), false);
        for r in 2..6 {
            for c in 3..5 {
                keep[(r, c)] = true;
            }
        }
        let mask = SamplingMask::from_keep_inferring_acs(keep).unwrap();
        assert_eq!(mask.acs_rows, 2..6);
        assert_eq!(mask.acs_cols, 3..5);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let x = MultiCoilImage::zeros(1, 4, 4);
        let mask = SamplingMask::full(4, 5);
        assert!(matches!(
            apply_encoding(&x, &mask),
            Err(CoreError::ShapeMismatch { .. })
        ));
    }
}
