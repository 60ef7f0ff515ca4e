//! Small 3×3 rotation helpers shared by the skeleton, synthesis and metrics code.

use nalgebra::{Matrix3, Unit, Vector3};

pub type Rot3 = Matrix3<f64>;
pub type Vec3 = Vector3<f64>;

/// Max-norm of `RᵀR − I` and `|det R − 1|`, whichever is larger.
pub fn rotation_defect(r: &Rot3) -> f64 {
    let ortho = (r.transpose() * r - Rot3::identity()).abs().max();
    ortho.max((r.determinant() - 1.0).abs())
}

pub fn is_rotation(r: &Rot3, tol: f64) -> bool {
    r.iter().all(|v| v.is_finite()) && rotation_defect(r) <= tol
}

/// Rotation by `angle` radians about `axis` (normalized internally).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Rot3 {
    let axis = Unit::new_normalize(*axis);
    *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix()
}

/// `M R M` with `M = diag(-1, 1, 1)`: entry `(i, j)` changes sign iff exactly one of
/// `i, j` is the lateral axis. Implemented as sign flips so it is exactly involutive.
pub fn reflect_rotation(r: &Rot3) -> Rot3 {
    let mut out = *r;
    for k in 1..3 {
        out[(0, k)] = -out[(0, k)];
        out[(k, 0)] = -out[(k, 0)];
    }
    out
}

/// `M a` with `M = diag(-1, 1, 1)`.
pub fn reflect_vector(v: &Vec3) -> Vec3 {
    Vec3::new(-v.x, v.y, v.z)
}

/// Rotation angle of `R` in radians, in `[0, π]`.
pub fn rotation_angle(r: &Rot3) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Row-major flattening.
pub fn to_row_major(r: &Rot3) -> [f64; 9] {
    [
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
    ]
}

pub fn from_row_major(v: &[f64]) -> Rot3 {
    Rot3::from_row_slice(&v[..9])
}
