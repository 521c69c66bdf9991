//! Sparse stain normalization for H&E patches.
//!
//! Pipeline: RGB -> optical density (Beer-Lambert) -> 2-atom nonnegative
//! sparse dictionary fit (hematoxylin + eosin basis, per-pixel densities)
//! -> recolor source densities with a target basis. Structure lives in the
//! density maps and is preserved; only the color basis and per-stain scale
//! change.
//!
//! The dictionary fit alternates two exact convex substeps, so the objective
//! `||OD - B*D||^2 + sparsity_weight * ||D||_1` never increases:
//! - density step: per-pixel 2-variable nonnegative lasso, solved in closed
//!   form (interior solution or best edge);
//! - basis step: per-column least squares projected onto the nonnegative
//!   unit ball (the quadratic is isotropic in one column, so projection of
//!   the unconstrained minimizer is the exact constrained minimizer).

use ndarray::Array3;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::raster::RgbImage;

/// Offset added to 8-bit intensities before the log transform, avoiding log(0).
pub const OD_EPSILON: f64 = 1.0;
/// Pixels with OD vector norm at or below this are treated as background.
pub const TISSUE_OD_THRESHOLD: f64 = 0.15;
/// Minimum tissue pixels required to fit a basis.
pub const MIN_TISSUE_PIXELS: usize = 100;
/// Cap on tissue pixels used in the alternating fit (seeded subsample above
/// this); the final density pass always covers every pixel.
const MAX_FIT_PIXELS: usize = 100_000;

/// Optical-density image: per-pixel 3-vector, `[y, x, channel]`, all >= 0.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    pub od: Array3<f64>,
    pub background_intensity: f64,
}

impl OdImage {
    pub fn height(&self) -> usize {
        self.od.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.od.shape()[1]
    }
}

/// Two unit-norm stain vectors in OD space plus their 99th-percentile
/// density scales. Hematoxylin (larger blue-channel OD) is listed first.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StainBasis {
    pub columns: [[f64; 3]; 2],
    pub density_percentiles: [f64; 2],
}

/// Per-pixel nonnegative stain concentrations, `[y, x, stain]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMaps {
    pub maps: Array3<f64>,
}

impl DensityMaps {
    pub fn height(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.maps.shape()[1]
    }
}

/// Fit output: basis, full-image densities, and the objective value after
/// every alternation (used to check monotone descent).
#[derive(Debug, Clone)]
pub struct StainFit {
    pub basis: StainBasis,
    pub densities: DensityMaps,
    pub objective_trace: Vec<f64>,
}

/// Beer-Lambert transform: `od = -log10((pixel + 1) / background)`, clamped
/// to be nonnegative.
pub fn to_optical_density(img: &RgbImage, background_intensity: f64) -> Result<OdImage> {
    if background_intensity <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "background_intensity must be positive, got {background_intensity}"
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut od = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let p = img.pixels[[y, x, c]] as f64;
                let v = -((p + OD_EPSILON) / background_intensity).log10();
                od[[y, x, c]] = v.max(0.0);
            }
        }
    }
    Ok(OdImage { od, background_intensity })
}

/// Inverse transform: `pixel = background * 10^(-od) - 1`, clamped to [0, 255].
pub fn from_optical_density(od: &OdImage) -> RgbImage {
    let (h, w) = (od.height(), od.width());
    let mut img = RgbImage::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let p = od.background_intensity * 10f64.powf(-od.od[[y, x, c]]) - OD_EPSILON;
                img.pixels[[y, x, c]] = p.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    img
}

fn od_norm(od: &OdImage, y: usize, x: usize) -> f64 {
    let v = [od.od[[y, x, 0]], od.od[[y, x, 1]], od.od[[y, x, 2]]];
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Indices of non-background pixels.
fn tissue_pixels(od: &OdImage) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..od.height() {
        for x in 0..od.width() {
            if od_norm(od, y, x) > TISSUE_OD_THRESHOLD {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact solution of `min_{d >= 0} ||x - B d||^2 + 2h (d1 + d2)` for two
/// unit-norm atoms. `m1, m2` are the atom/pixel inner products, `rho` the
/// inter-atom inner product. Ties prefer the first atom so that duplicated
/// atoms drain deterministically into one density map.
fn solve_pixel_densities(m1: f64, m2: f64, rho: f64, h: f64) -> (f64, f64) {
    let det = 1.0 - rho * rho;
    if det > 1e-12 {
        let d1 = ((m1 - h) - rho * (m2 - h)) / det;
        let d2 = ((m2 - h) - rho * (m1 - h)) / det;
        if d1 >= 0.0 && d2 >= 0.0 {
            return (d1, d2);
        }
    }
    // Edge candidates: only one active atom. Objective without the constant
    // ||x||^2 term: f(d) = d^2 - 2 m d + 2 h d for a single unit atom.
    let c1 = (m1 - h).max(0.0);
    let c2 = (m2 - h).max(0.0);
    let f1 = c1 * c1 - 2.0 * m1 * c1 + 2.0 * h * c1;
    let f2 = c2 * c2 - 2.0 * m2 * c2 + 2.0 * h * c2;
    if f1 <= f2 {
        (c1, 0.0)
    } else {
        (0.0, c2)
    }
}

/// Sparse solve for the support, then unpenalized nonnegative least squares
/// restricted to that support. Removes the soft-threshold shrinkage bias
/// from the returned densities while keeping the sparsity pattern.
fn debiased_pixel_densities(m1: f64, m2: f64, rho: f64, h: f64) -> (f64, f64) {
    let (s1, s2) = solve_pixel_densities(m1, m2, rho, h);
    match (s1 > 0.0, s2 > 0.0) {
        (false, false) => (0.0, 0.0),
        (true, false) => (m1.max(0.0), 0.0),
        (false, true) => (0.0, m2.max(0.0)),
        (true, true) => {
            let det = 1.0 - rho * rho;
            if det > 1e-12 {
                let d1 = (m1 - rho * m2) / det;
                let d2 = (m2 - rho * m1) / det;
                if d1 >= 0.0 && d2 >= 0.0 {
                    return (d1, d2);
                }
            }
            solve_pixel_densities(m1, m2, rho, 0.0)
        }
    }
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

/// Alternating nonnegative sparse dictionary learning with 2 atoms.
///
/// Returns the basis (unit columns, hematoxylin first), full-image density
/// maps, and the per-iteration objective trace. Deterministic for a fixed
/// seed.
pub fn fit_stain_model(
    od: &OdImage,
    sparsity_weight: f64,
    max_iters: usize,
    seed: u64,
) -> Result<StainFit> {
    let tissue = tissue_pixels(od);
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::InsufficientTissue { found: tissue.len(), required: MIN_TISSUE_PIXELS });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fit_set: Vec<(usize, usize)> = if tissue.len() > MAX_FIT_PIXELS {
        let mut subsample = tissue.clone();
        subsample.shuffle(&mut rng);
        subsample.truncate(MAX_FIT_PIXELS);
        subsample
    } else {
        tissue.clone()
    };
    let n = fit_set.len();
    let xs: Vec<[f64; 3]> = fit_set
        .iter()
        .map(|&(y, x)| [od.od[[y, x, 0]], od.od[[y, x, 1]], od.od[[y, x, 2]]])
        .collect();

    // Initialize atoms from two random tissue pixel directions.
    let mut basis: [[f64; 3]; 2] = [[0.0; 3]; 2];
    for b in basis.iter_mut() {
        // rejection-free: any tissue pixel has norm > threshold
        let &(y, x) = fit_set.choose(&mut rng).expect("non-empty fit set");
        let v = [od.od[[y, x, 0]], od.od[[y, x, 1]], od.od[[y, x, 2]]];
        let norm = norm3(&v);
        *b = [v[0] / norm, v[1] / norm, v[2] / norm];
    }

    let half_sparsity = sparsity_weight / 2.0;
    let mut densities = vec![[0.0f64; 2]; n];
    let mut trace = Vec::with_capacity(max_iters);
    for _ in 0..max_iters {
        // Density step: exact per-pixel nonnegative lasso.
        let rho = dot3(&basis[0], &basis[1]);
        for (d, x) in densities.iter_mut().zip(&xs) {
            let m1 = dot3(&basis[0], x);
            let m2 = dot3(&basis[1], x);
            *d = solve_pixel_densities(m1, m2, rho, half_sparsity).into();
        }

        // Basis step: per-column projected least squares.
        for k in 0..2 {
            let o = 1 - k;
            let mut num = [0.0f64; 3];
            let mut dd = 0.0f64;
            for (d, x) in densities.iter().zip(&xs) {
                let r = [
                    x[0] - basis[o][0] * d[o],
                    x[1] - basis[o][1] * d[o],
                    x[2] - basis[o][2] * d[o],
                ];
                num[0] += r[0] * d[k];
                num[1] += r[1] * d[k];
                num[2] += r[2] * d[k];
                dd += d[k] * d[k];
            }
            if dd < 1e-12 {
                continue; // dead atom keeps its previous direction
            }
            let mut col = [num[0] / dd, num[1] / dd, num[2] / dd];
            for c in col.iter_mut() {
                *c = c.max(0.0);
            }
            let norm = norm3(&col);
            if norm < 1e-12 {
                continue;
            }
            if norm > 1.0 {
                for c in col.iter_mut() {
                    *c /= norm;
                }
            }
            basis[k] = col;
        }

        // Objective after the full alternation.
        let mut obj = 0.0;
        for (d, x) in densities.iter().zip(&xs) {
            for c in 0..3 {
                let r = x[c] - basis[0][c] * d[0] - basis[1][c] * d[1];
                obj += r * r;
            }
            obj += sparsity_weight * (d[0] + d[1]);
        }
        if !obj.is_finite() {
            return Err(Error::Numeric("stain dictionary objective became non-finite".into()));
        }
        trace.push(obj);
    }

    // Normalize columns to exactly unit norm; densities rescale inversely so
    // the product B*D is unchanged.
    let mut scale = [1.0f64; 2];
    for k in 0..2 {
        let norm = norm3(&basis[k]);
        if norm > 1e-12 {
            for c in basis[k].iter_mut() {
                *c /= norm;
            }
            scale[k] = norm;
        }
    }

    // Atoms that converged onto one direction describe a single stain; any
    // per-pixel assignment between them would be noise. Collapse onto the
    // atom carrying more density mass.
    let collapsed = angular_error_degrees(&basis[0], &basis[1]) < 1.0;
    let keep = if collapsed {
        let mass: [f64; 2] = [
            densities.iter().map(|d| d[0]).sum::<f64>(),
            densities.iter().map(|d| d[1]).sum::<f64>(),
        ];
        if mass[0] >= mass[1] {
            0
        } else {
            1
        }
    } else {
        0 // unused
    };

    // Full-image density pass with the final basis, debiased on the sparse
    // support.
    let (h, w) = (od.height(), od.width());
    let rho = dot3(&basis[0], &basis[1]);
    let mut maps = Array3::zeros((h, w, 2));
    for y in 0..h {
        for x in 0..w {
            let px = [od.od[[y, x, 0]], od.od[[y, x, 1]], od.od[[y, x, 2]]];
            let m1 = dot3(&basis[0], &px);
            let m2 = dot3(&basis[1], &px);
            let (d1, d2) = if collapsed {
                let m = if keep == 0 { m1 } else { m2 };
                let d = if m > half_sparsity { m.max(0.0) } else { 0.0 };
                if keep == 0 {
                    (d, 0.0)
                } else {
                    (0.0, d)
                }
            } else {
                debiased_pixel_densities(m1, m2, rho, half_sparsity)
            };
            maps[[y, x, 0]] = d1;
            maps[[y, x, 1]] = d2;
        }
    }

    // Hematoxylin convention: larger blue-channel OD first. Near-identical
    // blue components (duplicated atoms) order by total density mass.
    let blue_gap = basis[0][2] - basis[1][2];
    let mass = |k: usize| -> f64 {
        let mut s = 0.0;
        for y in 0..h {
            for x in 0..w {
                s += maps[[y, x, k]];
            }
        }
        s
    };
    let swap = if !collapsed && blue_gap.abs() > 1e-6 { blue_gap < 0.0 } else { mass(0) < mass(1) };
    if swap {
        basis.swap(0, 1);
        for y in 0..h {
            for x in 0..w {
                let tmp = maps[[y, x, 0]];
                maps[[y, x, 0]] = maps[[y, x, 1]];
                maps[[y, x, 1]] = tmp;
            }
        }
        scale.swap(0, 1);
    }
    let _ = scale; // scales folded into the full-image pass already

    let tissue_set: std::collections::HashSet<(usize, usize)> = tissue.into_iter().collect();
    let percentiles = [
        density_percentile(&maps, 0, &tissue_set),
        density_percentile(&maps, 1, &tissue_set),
    ];

    Ok(StainFit {
        basis: StainBasis { columns: basis, density_percentiles: percentiles },
        densities: DensityMaps { maps },
        objective_trace: trace,
    })
}

/// 99th percentile of one density map over tissue pixels.
fn density_percentile(
    maps: &Array3<f64>,
    stain: usize,
    tissue: &std::collections::HashSet<(usize, usize)>,
) -> f64 {
    let mut vals: Vec<f64> =
        tissue.iter().map(|&(y, x)| maps[[y, x, stain]]).filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((vals.len() - 1) as f64 * 0.99).round() as usize;
    vals[idx]
}

/// Fit wrapper matching the basis-estimation contract.
pub fn estimate_stain_basis(
    od: &OdImage,
    sparsity_weight: f64,
    max_iters: usize,
    seed: u64,
) -> Result<(StainBasis, DensityMaps)> {
    let fit = fit_stain_model(od, sparsity_weight, max_iters, seed)?;
    Ok((fit.basis, fit.densities))
}

/// Recolor a source image with a target basis.
///
/// Source densities are rescaled per stain by the ratio of 99th-percentile
/// densities (skipped when the source percentile is zero), recombined with
/// the target columns, and converted back to RGB. Output dimensions equal
/// the source dimensions.
pub fn normalize_to_target(
    src: &RgbImage,
    src_fit: &(StainBasis, DensityMaps),
    target_basis: &StainBasis,
) -> Result<RgbImage> {
    let (src_basis, densities) = src_fit;
    let (h, w) = (src.height(), src.width());
    if densities.height() != h || densities.width() != w {
        return Err(Error::ShapeMismatch {
            expected: format!("{h}x{w}"),
            got: format!("{}x{}", densities.height(), densities.width()),
        });
    }
    let mut scale = [1.0f64; 2];
    for k in 0..2 {
        let src_p = src_basis.density_percentiles[k];
        if src_p > 0.0 {
            scale[k] = target_basis.density_percentiles[k] / src_p;
        }
    }
    let mut od = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let d = [densities.maps[[y, x, 0]] * scale[0], densities.maps[[y, x, 1]] * scale[1]];
            for c in 0..3 {
                od[[y, x, c]] =
                    target_basis.columns[0][c] * d[0] + target_basis.columns[1][c] * d[1];
            }
        }
    }
    Ok(from_optical_density(&OdImage { od, background_intensity: 255.0 }))
}

/// Angle between two unit vectors, in degrees. Test helper for basis
/// comparisons, exposed because the CLI reports it too.
pub fn angular_error_degrees(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let cos = (dot3(a, b) / (norm3(a) * norm3(b))).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}
