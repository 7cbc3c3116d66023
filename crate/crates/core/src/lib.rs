//! Parallel-MRI reconstruction from undersampled multicoil k-space.
//!
//! The solver combines two priors: self-calibrated SPIRiT consistency
//! (every k-space point is predicted by its multicoil neighborhood through
//! a kernel fitted on the autocalibration region) and nonlocal low-rank
//! regularization (matrices of grouped similar image patches are driven
//! toward low rank by weighted singular-value shrinkage).
//!
//! Pipeline: [`masks`] generates undersampling patterns and synthetic
//! multicoil phantoms, [`calibration`] fits the k-space kernel and realizes
//! it as a per-pixel image-domain operator, [`patches`] runs block matching
//! and patch-group assembly, [`shrinkage`] applies the weighted nuclear
//! norm proximal step, [`solver`] runs the outer reconstruction loops, and
//! [`metrics`] scores results against a reference.

pub mod calibration;
pub mod error;
pub mod masks;
pub mod metrics;
pub mod patches;
pub mod shrinkage;
pub mod solver;
pub mod tensor;

pub use error::CoreError;
