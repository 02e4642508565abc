//! Small SO(3)/O(3) toolkit: hat map, exponential map, quaternion conversion and
//! projection onto the orthogonal group.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] applied to the skew part of `m`.
pub fn vee_skew(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Rodrigues exponential of a rotation vector.
pub fn exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::new(*phi).into_inner()
}

/// Rotation vector of `r` (principal branch).
pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Rotation angle of `r` in radians.
pub fn angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    c.acos()
}

/// Rotation matrix from a Hamilton quaternion given as `(qx, qy, qz, qw)`.
/// The quaternion is normalized first.
pub fn from_quaternion(qx: f64, qy: f64, qz: f64, qw: f64) -> Matrix3<f64> {
    let q = UnitQuaternion::from_quaternion(Quaternion::new(qw, qx, qy, qz));
    q.to_rotation_matrix().into_inner()
}

/// Hamilton quaternion `(qx, qy, qz, qw)` of a rotation matrix, with `qw >= 0`.
pub fn to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let mut c = q.into_inner().coords; // (x, y, z, w)
    if c.w < 0.0 {
        c = -c;
    }
    [c.x, c.y, c.z, c.w]
}

/// Nearest orthogonal matrix in Frobenius norm (polar factor `U V^T`).
pub fn project_orthogonal(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    u * v_t
}

/// Nearest rotation (determinant +1).
pub fn project_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// `‖R Rᵀ − I‖_F`.
pub fn orthogonality_residual(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).norm()
}

/// Uniformly distributed rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-6 {
            return UnitQuaternion::from_quaternion(q)
                .to_rotation_matrix()
                .into_inner();
        }
    }
}

/// Standard normal 3-vector scaled by `std`.
pub fn gaussian_vector<R: Rng + ?Sized>(rng: &mut R, std: f64) -> Vector3<f64> {
    Vector3::new(
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
        rng.sample::<f64, _>(StandardNormal),
    ) * std
}
