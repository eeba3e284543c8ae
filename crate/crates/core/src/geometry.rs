//! Cross-view correspondence by depth reprojection, and the visual overlap it
//! induces.
//!
//! A pixel `p1 = (u, v)` of the source view with depth `d` is lifted with the
//! source intrinsics, moved by the relative pose and projected with the target
//! intrinsics:
//!
//! ```text
//! x2 = R · d · K1⁻¹ · [u, v, 1]ᵀ + t
//! p2 = (fx2 · x2.x / x2.z + cx2,  fy2 · x2.y / x2.z + cy2)
//! ```
//!
//! Pixel centers sit on integer coordinates; `u` indexes columns and `v` rows.

use nalgebra::{Matrix3, Matrix4, Vector3};
use ndarray::{Array2, Array3};

/// Points with target-camera depth at or below this are behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;
/// Pixels this close outside the image domain are snapped onto its border.
pub const DOMAIN_TOLERANCE: f64 = 1e-6;
/// Rotation blocks further than this from orthonormal are rejected outright.
const ROTATION_TOL: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),
    #[error("depth map is {found:?} (rows, cols) but the camera expects {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Pinhole camera with a world→camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    intrinsics: Matrix3<f64>,
    world_to_camera: Matrix4<f64>,
    width: usize,
    height: usize,
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        world_to_camera: Matrix4<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = &intrinsics;
        if !(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(
                "focal lengths must be positive".into(),
            ));
        }
        if k[(0, 1)] != 0.0 || k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(GeometryError::InvalidIntrinsics(
                "expected zero skew and a (0, 0, 1) bottom row".into(),
            ));
        }
        if k[(2, 2)] != 1.0 {
            return Err(GeometryError::InvalidIntrinsics("K[2][2] must be 1".into()));
        }
        check_rigid(&world_to_camera)?;
        Ok(Self {
            intrinsics,
            world_to_camera,
            width,
            height,
        })
    }

    /// Camera with principal point at the image center and square pixels.
    pub fn centered(
        focal: f64,
        width: usize,
        height: usize,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self, GeometryError> {
        let k = Matrix3::new(
            focal,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            focal,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self::new(k, world_to_camera, width, height)
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Back-projects pixel `(u, v)` to the camera-frame point at depth `depth`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new(
            (u - k[(0, 2)]) / k[(0, 0)] * depth,
            (v - k[(1, 2)]) / k[(1, 1)] * depth,
            depth,
        )
    }

    /// Perspective projection of a camera-frame point.
    pub fn project(&self, x: &Vector3<f64>) -> [f64; 2] {
        let k = &self.intrinsics;
        let h = k * x;
        [h.x / h.z, h.y / h.z]
    }

    /// Closed-interval domain test `[0, W−1] × [0, H−1]`.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0
            && p[1] >= 0.0
            && p[0] <= (self.width as f64 - 1.0)
            && p[1] <= (self.height as f64 - 1.0)
    }

    /// `p` clamped into the domain if it lies within [`DOMAIN_TOLERANCE`] of it.
    pub fn snap(&self, p: [f64; 2]) -> Option<[f64; 2]> {
        let (w, h) = (self.width as f64 - 1.0, self.height as f64 - 1.0);
        let t = DOMAIN_TOLERANCE;
        let inside = p[0] >= -t && p[1] >= -t && p[0] <= w + t && p[1] <= h + t;
        inside.then(|| [p[0].clamp(0.0, w), p[1].clamp(0.0, h)])
    }
}

fn rotation_block(t: &Matrix4<f64>) -> Matrix3<f64> {
    t.fixed_view::<3, 3>(0, 0).into_owned()
}

fn check_rigid(t: &Matrix4<f64>) -> Result<(), GeometryError> {
    if t.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::DegeneratePose("non-finite entries".into()));
    }
    let bottom_off = t[(3, 0)].abs() + t[(3, 1)].abs() + t[(3, 2)].abs() + (t[(3, 3)] - 1.0).abs();
    if bottom_off > 1e-6 {
        return Err(GeometryError::DegeneratePose(
            "bottom row must be (0, 0, 0, 1)".into(),
        ));
    }
    let r = rotation_block(t);
    let ortho_err = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if ortho_err > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
        return Err(GeometryError::DegeneratePose(format!(
            "rotation block is not a rotation (orthonormality error {ortho_err:.2e}, det {det:.6})"
        )));
    }
    Ok(())
}

/// Nearest rotation in the Frobenius sense.
fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut fixed = u * v_t;
    if fixed.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        fixed = u * v_t;
    }
    fixed
}

/// Rigid transform taking points from camera `i` to camera `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// `T_j · T_i⁻¹` for world→camera poses `T_i`, `T_j`.
pub fn relative_pose(
    pose_i: &Matrix4<f64>,
    pose_j: &Matrix4<f64>,
) -> Result<RelativePose, GeometryError> {
    check_rigid(pose_i)?;
    check_rigid(pose_j)?;
    let r_i = rotation_block(pose_i);
    let r_j = rotation_block(pose_j);
    let t_i = pose_i.fixed_view::<3, 1>(0, 3).into_owned();
    let t_j = pose_j.fixed_view::<3, 1>(0, 3).into_owned();
    // Inverse of [R|t] is [Rᵀ | −Rᵀt].
    let rotation = orthonormalize(&(r_j * r_i.transpose()));
    let translation = t_j - r_j * (r_i.transpose() * t_i);
    Ok(RelativePose {
        rotation,
        translation,
    })
}

/// A reprojected pixel and its depth in the target camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    pub pixel: [f64; 2],
    pub depth: f64,
}

impl Reprojection {
    /// False when the point lies behind (or on) the target image plane.
    pub fn in_front(&self) -> bool {
        self.depth > BEHIND_CAMERA_EPS
    }
}

/// Reprojects source pixel `p1` with depth `depth` into the target view.
pub fn reproject_pixel(
    p1: [f64; 2],
    depth: f64,
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
    rel: &RelativePose,
) -> Reprojection {
    let ray = Vector3::new(
        (p1[0] - k1[(0, 2)]) / k1[(0, 0)],
        (p1[1] - k1[(1, 2)]) / k1[(1, 1)],
        1.0,
    );
    let x2 = rel.rotation * (ray * depth) + rel.translation;
    let h = k2 * x2;
    Reprojection {
        pixel: [h.x / h.z, h.y / h.z],
        depth: x2.z,
    }
}

/// Dense per-pixel correspondence from a source view into a target view.
///
/// `valid` is exactly the visual overlap of the source view with the target.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceField {
    /// rows×cols×2 continuous `(u, v)` in the target view; NaN where invalid.
    pub target: Array3<f32>,
    /// Depth of the reprojected point in the target camera; NaN where invalid.
    pub depth_in_target: Array2<f32>,
    pub valid: Array2<bool>,
    /// (rows, cols) of the target view.
    pub target_dims: (usize, usize),
}

impl CorrespondenceField {
    pub fn dims(&self) -> (usize, usize) {
        self.valid.dim()
    }

    pub fn target_at(&self, row: usize, col: usize) -> Option<[f32; 2]> {
        self.valid[(row, col)].then(|| [self.target[(row, col, 0)], self.target[(row, col, 1)]])
    }

    /// Integer (row, col) of the nearest target pixel, for valid source pixels.
    pub fn nearest_target(&self, row: usize, col: usize) -> Option<(usize, usize)> {
        let p = self.target_at(row, col)?;
        nearest_index(p, self.target_dims)
    }

    pub fn overlap_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Rounds a continuous `(u, v)` half away from zero to an in-bounds
/// `(row, col)` index.
pub fn nearest_index(p: [f32; 2], dims: (usize, usize)) -> Option<(usize, usize)> {
    let (rows, cols) = dims;
    if !(p[0] >= 0.0 && p[1] >= 0.0) || rows == 0 || cols == 0 {
        return None;
    }
    if p[0] > (cols - 1) as f32 || p[1] > (rows - 1) as f32 {
        return None;
    }
    let col = (p[0].round() as usize).min(cols - 1);
    let row = (p[1].round() as usize).min(rows - 1);
    Some((row, col))
}

/// Reprojects every pixel of `depth` (seen by `src`) into `dst`.
pub fn correspondence_field(
    depth: &Array2<f32>,
    src: &Camera,
    dst: &Camera,
) -> Result<CorrespondenceField, GeometryError> {
    let (rows, cols) = depth.dim();
    if (rows, cols) != (src.height(), src.width()) {
        return Err(GeometryError::ShapeMismatch {
            expected: (src.height(), src.width()),
            found: (rows, cols),
        });
    }
    let rel = relative_pose(src.world_to_camera(), dst.world_to_camera())?;
    let (k1, k2) = (src.intrinsics(), dst.intrinsics());

    let mut target = Array3::from_elem((rows, cols, 2), f32::NAN);
    let mut depth_in_target = Array2::from_elem((rows, cols), f32::NAN);
    let mut valid = Array2::from_elem((rows, cols), false);
    for ((row, col), &d) in depth.indexed_iter() {
        if !(d > 0.0) {
            continue;
        }
        let r = reproject_pixel([col as f64, row as f64], d as f64, k1, k2, &rel);
        if !r.in_front() {
            continue;
        }
        let Some(pixel) = dst.snap(r.pixel) else {
            continue;
        };
        target[(row, col, 0)] = pixel[0] as f32;
        target[(row, col, 1)] = pixel[1] as f32;
        depth_in_target[(row, col)] = r.depth as f32;
        valid[(row, col)] = true;
    }
    Ok(CorrespondenceField {
        target,
        depth_in_target,
        valid,
        target_dims: (dst.height(), dst.width()),
    })
}

/// Rotation about the camera y axis (yaw), angle in radians.
pub fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rotation_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// World→camera matrix for a camera centered at `center` whose axes are given
/// by the camera→world rotation `orientation`.
pub fn world_to_camera(orientation: &Matrix3<f64>, center: &Vector3<f64>) -> Matrix4<f64> {
    let r = orientation.transpose();
    RelativePose {
        rotation: r,
        translation: -(r * center),
    }
    .to_matrix()
}
