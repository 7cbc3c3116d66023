//! Patch extraction, block matching, similar-patch group matrices, the
//! adjoint scatter placement, and the count-normalized aggregation.
//!
//! Matching runs per coil on complex patch values. Reference patches sit on
//! a stride lattice augmented with a final boundary-touching row and column
//! so every pixel is covered by at least one reference patch footprint,
//! which keeps the aggregation's diagonal normalizer invertible.

use ndarray::Array2;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::CoreError;
use crate::tensor::MultiCoilImage;

/// One matched group: the reference plus the `m` closest member patches
/// (reference included), all given by patch top-left coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGroup {
    pub reference: (usize, usize),
    pub members: Vec<(usize, usize)>,
}

/// Block-matching result for a full multicoil image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrouping {
    pub patch_side: usize,
    pub group_size: usize,
    /// Groups per coil, in reference-lattice order.
    pub per_coil: Vec<Vec<PatchGroup>>,
}

impl PatchGrouping {
    pub fn groups_per_coil(&self) -> usize {
        self.per_coil.first().map_or(0, |g| g.len())
    }
}

/// An `n x m` matrix of vectorized member patches; column `j` is member `j`
/// in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGroupMatrix {
    pub data: Array2<Complex64>,
}

/// Per-coil map counting how many group members cover each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationWeights {
    pub counts: Vec<Array2<f64>>,
}

/// Reference lattice along one dimension: stride steps plus a final
/// boundary-touching position.
fn reference_lattice(extent: usize, patch_side: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch_side;
    let mut positions: Vec<usize> = (0..=last).step_by(stride.max(1)).collect();
    if *positions.last().expect("nonempty lattice") != last {
        positions.push(last);
    }
    positions
}

fn patch_distance(
    img: &Array2<Complex64>,
    a: (usize, usize),
    b: (usize, usize),
    patch_side: usize,
) -> f64 {
    let mut acc = 0.0;
    for dr in 0..patch_side {
        for dc in 0..patch_side {
            let diff = img[(a.0 + dr, a.1 + dc)] - img[(b.0 + dr, b.1 + dc)];
            acc += diff.norm_sqr();
        }
    }
    acc
}

/// Exhaustive windowed block matching, independently per coil.
///
/// Candidates are every patch whose top-left lies within the window of side
/// `window` centered on the reference. The `m` smallest squared Euclidean
/// distances win; ties break by row-major candidate order with the
/// reference itself ranked first among its ties, so the reference is always
/// a member and the result is deterministic.
pub fn block_match(
    x: &MultiCoilImage,
    patch_side: usize,
    stride: usize,
    window: usize,
    m: usize,
) -> Result<PatchGrouping, CoreError> {
    let (nx, ny) = x.shape();
    if patch_side == 0 || patch_side > nx.min(ny) {
        return Err(CoreError::InvalidParameter(format!(
            "patch side {patch_side} does not fit a {nx}x{ny} image"
        )));
    }
    if m == 0 {
        return Err(CoreError::InvalidParameter("group size must be >= 1".into()));
    }
    if window < patch_side {
        return Err(CoreError::InvalidParameter(format!(
            "window {window} smaller than patch side {patch_side}"
        )));
    }
    if stride == 0 {
        return Err(CoreError::InvalidParameter("stride must be >= 1".into()));
    }

    let rows = reference_lattice(nx, patch_side, stride);
    let cols = reference_lattice(ny, patch_side, stride);
    let refs: Vec<(usize, usize)> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    let half = window / 2;
    let max_r = nx - patch_side;
    let max_c = ny - patch_side;

    let per_coil: Result<Vec<Vec<PatchGroup>>, CoreError> = x
        .coils
        .iter()
        .map(|coil| {
            let img = &coil.data;
            refs.par_iter()
                .map(|&(r0, c0)| {
                    let r_lo = r0.saturating_sub(half);
                    let r_hi = (r0 + half).min(max_r);
                    let c_lo = c0.saturating_sub(half);
                    let c_hi = (c0 + half).min(max_c);
                    let mut ranked: Vec<(f64, u8, usize, (usize, usize))> = Vec::new();
                    for r in r_lo..=r_hi {
                        for c in c_lo..=c_hi {
                            let d = patch_distance(img, (r0, c0), (r, c), patch_side);
                            let is_ref = u8::from((r, c) != (r0, c0));
                            ranked.push((d, is_ref, r * ny + c, (r, c)));
                        }
                    }
                    if ranked.len() < m {
                        return Err(CoreError::WindowTooSmall {
                            found: ranked.len(),
                            needed: m,
                        });
                    }
                    ranked.sort_by(|a, b| {
                        a.0.partial_cmp(&b.0)
                            .expect("finite distances")
                            .then(a.1.cmp(&b.1))
                            .then(a.2.cmp(&b.2))
                    });
                    Ok(PatchGroup {
                        reference: (r0, c0),
                        members: ranked[..m].iter().map(|e| e.3).collect(),
                    })
                })
                .collect()
        })
        .collect();

    Ok(PatchGrouping {
        patch_side,
        group_size: m,
        per_coil: per_coil?,
    })
}

fn check_grouping(x: &MultiCoilImage, grouping: &PatchGrouping) -> Result<(), CoreError> {
    if grouping.per_coil.len() != x.n_coils() {
        return Err(CoreError::GroupMismatch(format!(
            "grouping has {} coils, image has {}",
            grouping.per_coil.len(),
            x.n_coils()
        )));
    }
    let (nx, ny) = x.shape();
    let ps = grouping.patch_side;
    if ps > nx.min(ny) {
        return Err(CoreError::GroupMismatch(format!(
            "patch side {ps} does not fit a {nx}x{ny} image"
        )));
    }
    Ok(())
}

/// Materialize every similar-patch group matrix, coil-major then group
/// order; linear in the image.
pub fn extract_groups(
    x: &MultiCoilImage,
    grouping: &PatchGrouping,
) -> Result<Vec<PatchGroupMatrix>, CoreError> {
    check_grouping(x, grouping)?;
    let ps = grouping.patch_side;
    let n = ps * ps;
    let mut out = Vec::new();
    for (coil, groups) in x.coils.iter().zip(&grouping.per_coil) {
        let img = &coil.data;
        out.extend(groups.iter().map(|group| {
            let mut data = Array2::<Complex64>::zeros((n, group.members.len()));
            for (j, &(r, c)) in group.members.iter().enumerate() {
                for dr in 0..ps {
                    for dc in 0..ps {
                        data[(dr * ps + dc, j)] = img[(r + dr, c + dc)];
                    }
                }
            }
            PatchGroupMatrix { data }
        }));
    }
    Ok(out)
}

/// Adjoint of [`extract_groups`]: scatter every column back onto its member
/// footprint, summing overlaps and counting coverage.
pub fn place_groups_adjoint(
    groups: &[PatchGroupMatrix],
    grouping: &PatchGrouping,
    shape: (usize, usize),
) -> Result<(MultiCoilImage, AggregationWeights), CoreError> {
    let n_coils = grouping.per_coil.len();
    let total: usize = grouping.per_coil.iter().map(Vec::len).sum();
    if groups.len() != total {
        return Err(CoreError::GroupMismatch(format!(
            "{} matrices for {} groups",
            groups.len(),
            total
        )));
    }
    let (nx, ny) = shape;
    let ps = grouping.patch_side;
    let n = ps * ps;
    let mut image = MultiCoilImage::zeros(n_coils, nx, ny);
    let mut counts = vec![Array2::<f64>::zeros((nx, ny)); n_coils];
    let mut idx = 0;
    for (ci, coil_groups) in grouping.per_coil.iter().enumerate() {
        for group in coil_groups {
            let matrix = &groups[idx];
            idx += 1;
            if matrix.data.nrows() != n || matrix.data.ncols() != group.members.len() {
                return Err(CoreError::GroupMismatch(format!(
                    "matrix {}x{} for patch side {} and {} members",
                    matrix.data.nrows(),
                    matrix.data.ncols(),
                    ps,
                    group.members.len()
                )));
            }
            for (j, &(r, c)) in group.members.iter().enumerate() {
                if r + ps > nx || c + ps > ny {
                    return Err(CoreError::GroupMismatch(format!(
                        "member ({r}, {c}) out of bounds for {nx}x{ny}"
                    )));
                }
                for dr in 0..ps {
                    for dc in 0..ps {
                        image.coils[ci].data[(r + dr, c + dc)] += matrix.data[(dr * ps + dc, j)];
                        counts[ci][(r + dr, c + dc)] += 1.0;
                    }
                }
            }
        }
    }
    Ok((image, AggregationWeights { counts }))
}

/// Count-normalized aggregation: scatter the groups back and divide by the
/// per-pixel coverage, the exact solve of the diagonal placement system.
pub fn aggregate_groups(
    groups: &[PatchGroupMatrix],
    grouping: &PatchGrouping,
    shape: (usize, usize),
) -> Result<MultiCoilImage, CoreError> {
    let (mut image, weights) = place_groups_adjoint(groups, grouping, shape)?;
    for (coil, counts) in image.coils.iter_mut().zip(&weights.counts) {
        for ((r, c), v) in coil.data.indexed_iter_mut() {
            let count = counts[(r, c)];
            if count == 0.0 {
                return Err(CoreError::CoverageHole(r, c));
            }
            *v /= count;
        }
    }
    Ok(image)
}
