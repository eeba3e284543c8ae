//! Occlusion detection by comparing reprojected depth with the depth the
//! other view actually observes.
//!
//! A source pixel inside the overlap is occluded in the target view when its
//! reprojected depth exceeds the target's observed depth by more than
//!
//! ```text
//! τ = max(α · med(D_other), med(ΔD) + κ · MAD(ΔD))
//! ```
//!
//! where ΔD ranges over the overlap only.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::geometry::{nearest_index, CorrespondenceField};
use crate::stats::{median, median_and_mad};

pub const DEFAULT_ALPHA: f32 = 0.03;
pub const DEFAULT_KAPPA: f32 = 2.5;

#[derive(Debug, thiserror::Error)]
pub enum OcclusionError {
    #[error("sample point ({0}, {1}) lies outside the depth map")]
    OutOfBounds(f32, f32),
    #[error("no overlap; occlusion undefined")]
    NoOverlap,
    #[error("the other view has no positive depth")]
    NoDepth,
    #[error("alpha and kappa must be positive (alpha={alpha}, kappa={kappa})")]
    InvalidParams { alpha: f32, kappa: f32 },
    #[error("target depth map is {found:?} but the field targets {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionParams {
    pub alpha: f32,
    pub kappa: f32,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            kappa: DEFAULT_KAPPA,
        }
    }
}

impl OcclusionParams {
    fn check(&self) -> Result<(), OcclusionError> {
        if self.alpha > 0.0 && self.kappa > 0.0 {
            Ok(())
        } else {
            Err(OcclusionError::InvalidParams {
                alpha: self.alpha,
                kappa: self.kappa,
            })
        }
    }
}

/// Median and MAD of the depth differences over the overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub median: f32,
    pub mad: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask {
    /// True where the pixel is hidden in the other view.
    pub mask: Array2<bool>,
    pub tau: f32,
    pub delta_stats: DeltaStats,
    /// Median of the other view's positive depths.
    pub depth_median: f32,
}

impl OcclusionMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Nearest-neighbour depth lookup at continuous `(u, v)`.
pub fn sample_depth(depth: &Array2<f32>, p: [f32; 2]) -> Result<f32, OcclusionError> {
    nearest_index(p, depth.dim())
        .map(|idx| depth[idx])
        .ok_or(OcclusionError::OutOfBounds(p[0], p[1]))
}

struct Tau {
    value: f32,
    delta: DeltaStats,
    depth_median: f32,
}

fn compute_tau(
    depth_other: &Array2<f32>,
    delta: &[f32],
    params: OcclusionParams,
) -> Result<Tau, OcclusionError> {
    params.check()?;
    let delta: Vec<f64> = delta.iter().map(|&d| d as f64).collect();
    let (delta_med, delta_mad) = median_and_mad(&delta).ok_or(OcclusionError::NoOverlap)?;
    // Missing depth (zero) carries no scene-scale information.
    let depths: Vec<f64> = depth_other
        .iter()
        .filter(|&&d| d > 0.0)
        .map(|&d| d as f64)
        .collect();
    let depth_med = median(&depths).ok_or(OcclusionError::NoDepth)?;
    let geometric = params.alpha as f64 * depth_med;
    let statistical = delta_med + params.kappa as f64 * delta_mad;
    Ok(Tau {
        value: geometric.max(statistical) as f32,
        delta: DeltaStats {
            median: delta_med as f32,
            mad: delta_mad as f32,
        },
        depth_median: depth_med as f32,
    })
}

/// Adaptive depth-consistency threshold.
pub fn adaptive_tau(
    depth_other: &Array2<f32>,
    delta: &[f32],
    params: OcclusionParams,
) -> Result<f32, OcclusionError> {
    compute_tau(depth_other, delta, params).map(|t| t.value)
}

/// Marks source pixels whose reprojection is hidden behind nearer geometry in
/// the other view. Pixels outside the overlap are never occluded.
pub fn occlusion_mask(
    field: &CorrespondenceField,
    depth_other: &Array2<f32>,
    params: OcclusionParams,
) -> Result<OcclusionMask, OcclusionError> {
    if depth_other.dim() != field.target_dims {
        return Err(OcclusionError::ShapeMismatch {
            expected: field.target_dims,
            found: depth_other.dim(),
        });
    }
    let dims = field.dims();
    let mut delta_map = Array2::from_elem(dims, f32::NAN);
    let mut deltas = Vec::with_capacity(field.overlap_count());
    for ((row, col), &valid) in field.valid.indexed_iter() {
        if !valid {
            continue;
        }
        let target = field.target_at(row, col).expect("valid pixel has a target");
        let observed = sample_depth(depth_other, target)?;
        let d = field.depth_in_target[(row, col)] - observed;
        delta_map[(row, col)] = d;
        deltas.push(d);
    }

    let tau = compute_tau(depth_other, &deltas, params)?;
    let mask = delta_map.mapv(|d| d > tau.value);
    Ok(OcclusionMask {
        mask,
        tau: tau.value,
        delta_stats: tau.delta,
        depth_median: tau.depth_median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{correspondence_field, Camera};
    use nalgebra::{Matrix3, Matrix4};

    #[test]
    fn sample_depth_rounds_to_nearest() {
        let depth = Array2::from_shape_fn((10, 10), |(r, c)| (r * 10 + c) as f32);
        assert_eq!(sample_depth(&depth, [3.4, 7.6]).unwrap(), 83.0);
        assert_eq!(sample_depth(&depth, [3.5, 7.5]).unwrap(), 84.0);
        assert!(matches!(
            sample_depth(&depth, [-0.2, 0.0]),
            Err(OcclusionError::OutOfBounds(..))
        ));
    }

    #[test]
    fn tau_falls_back_to_geometric_term() {
        let depth = Array2::from_elem((4, 4), 10.0);
        let tau = adaptive_tau(&depth, &[0.0; 16], OcclusionParams::default()).unwrap();
        assert_eq!(tau, (DEFAULT_ALPHA as f64 * 10.0) as f32);
    }

    #[test]
    fn tau_uses_mad_term_when_larger() {
        let depth = Array2::from_elem((4, 4), 1.0);
        let delta = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let tau = adaptive_tau(&depth, &delta, OcclusionParams::default()).unwrap();
        assert_eq!(tau, 1.0);
    }

    #[test]
    fn tau_requires_overlap() {
        let depth = Array2::from_elem((4, 4), 1.0);
        let err = adaptive_tau(&depth, &[], OcclusionParams::default()).unwrap_err();
        assert_eq!(err.to_string(), "no overlap; occlusion undefined");
    }

    #[test]
    fn non_positive_params_rejected() {
        let depth = Array2::from_elem((2, 2), 1.0);
        let params = OcclusionParams {
            alpha: 0.0,
            kappa: 2.5,
        };
        assert!(matches!(
            adaptive_tau(&depth, &[0.0], params),
            Err(OcclusionError::InvalidParams { .. })
        ));
    }

    #[test]
    fn identical_views_have_no_occlusion() {
        let k = Matrix3::new(50.0, 0.0, 16.0, 0.0, 50.0, 16.0, 0.0, 0.0, 1.0);
        let cam = Camera::new(k, Matrix4::identity(), 32, 32).unwrap();
        let depth = Array2::from_shape_fn((32, 32), |(r, c)| 2.0 + ((r + c) % 3) as f32);
        let field = correspondence_field(&depth, &cam, &cam).unwrap();
        let occ = occlusion_mask(&field, &depth, OcclusionParams::default()).unwrap();
        assert_eq!(occ.count(), 0);
        assert_eq!(occ.delta_stats.median, 0.0);
        assert!(occ.tau >= 0.03 * occ.depth_median);
    }

    #[test]
    fn occlusion_only_inside_overlap() {
        let k = Matrix3::new(50.0, 0.0, 16.0, 0.0, 50.0, 16.0, 0.0, 0.0, 1.0);
        let cam = Camera::new(k, Matrix4::identity(), 32, 32).unwrap();
        let mut depth = Array2::from_elem((32, 32), 4.0);
        depth.slice_mut(ndarray::s![.., ..4]).fill(0.0);
        let field = correspondence_field(&depth, &cam, &cam).unwrap();
        // The other view sees something much closer on its right side.
        let mut other = Array2::from_elem((32, 32), 4.0);
        other.slice_mut(ndarray::s![.., 20..]).fill(1.0);
        let occ = occlusion_mask(&field, &other, OcclusionParams::default()).unwrap();
        for ((r, c), &m) in occ.mask.indexed_iter() {
            assert_eq!(m, c >= 20, "({r}, {c})");
            assert!(!m || field.valid[(r, c)]);
        }
    }
}
