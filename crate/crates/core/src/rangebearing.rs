//! Range-bearing measurement model shared by mapping and localization.
//!
//! h(pose, m) = ( ‖m − p‖, wrap(atan2(m_y − p_y, m_x − p_x) − ψ) )

use nalgebra::{Matrix2, Matrix2x3, Vector2};

use crate::geometry::{wrap, Point2, Pose2};

pub fn predict(pose: &Pose2, landmark: &Point2) -> Vector2<f64> {
    let dx = landmark.x - pose.x;
    let dy = landmark.y - pose.y;
    Vector2::new(dx.hypot(dy), wrap(dy.atan2(dx) - pose.psi))
}

/// ∂h/∂m, the Jacobian with respect to the landmark position.
pub fn jacobian_landmark(pose: &Pose2, landmark: &Point2) -> Matrix2<f64> {
    let dx = landmark.x - pose.x;
    let dy = landmark.y - pose.y;
    let q = dx * dx + dy * dy;
    let d = q.sqrt();
    Matrix2::new(dx / d, dy / d, -dy / q, dx / q)
}

/// ∂h/∂(x, y, ψ), the Jacobian with respect to the observing pose.
pub fn jacobian_pose(pose: &Pose2, landmark: &Point2) -> Matrix2x3<f64> {
    let dx = landmark.x - pose.x;
    let dy = landmark.y - pose.y;
    let q = dx * dx + dy * dy;
    let d = q.sqrt();
    Matrix2x3::new(-dx / d, -dy / d, 0.0, dy / q, -dx / q, -1.0)
}

/// World position of a (range, bearing) observation taken from `pose`.
pub fn backproject(pose: &Pose2, range: f64, bearing: f64) -> Point2 {
    let a = pose.psi + bearing;
    Point2::new(pose.x + range * a.cos(), pose.y + range * a.sin())
}

/// ∂backproject/∂(range, bearing).
pub fn backproject_jacobian(pose: &Pose2, range: f64, bearing: f64) -> Matrix2<f64> {
    let (s, c) = (pose.psi + bearing).sin_cos();
    Matrix2::new(c, -range * s, s, range * c)
}

/// z − ẑ with the bearing component wrapped.
pub fn innovation(z: &Vector2<f64>, z_hat: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(z.x - z_hat.x, wrap(z.y - z_hat.y))
}

/// Gaussian log-density of an innovation with covariance `s`.
/// Returns `None` when `s` is not invertible.
pub fn gaussian_log_likelihood(nu: &Vector2<f64>, s: &Matrix2<f64>) -> Option<(f64, f64)> {
    let det = s.determinant();
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let s_inv = s.try_inverse()?;
    let d2 = (nu.transpose() * s_inv * nu)[(0, 0)];
    let ll = -0.5 * d2 - (2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
    Some((d2, ll))
}
