//! Planar rigid-body primitives.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector2;

use crate::error::{Error, Result};

/// A point or displacement in the plane, in meters.
pub type Point2 = Vector2<f64>;

/// Wraps an angle into the canonical interval (−π, π].
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(wrap(theta))
}

/// Infallible wrap for values already known to be finite.
#[inline]
pub fn wrap(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let mut a = theta.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

/// Planar pose: position in meters, heading in radians within (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 { x: 0.0, y: 0.0, psi: 0.0 };

    /// Builds a pose, wrapping the heading. Non-finite headings are kept as-is
    /// so that callers validating inputs can still see them.
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        let psi = if psi.is_finite() { wrap(psi) } else { psi };
        Pose2 { x, y, psi }
    }

    pub fn position(&self) -> Point2 {
        Point2::new(self.x, self.y)
    }

    /// `self ⊕ other`: `other` expressed in this pose's frame, mapped to world.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.psi.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.psi + other.psi,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.psi.sin_cos();
        Pose2::new(
            -c * self.x - s * self.y,
            s * self.x - c * self.y,
            -self.psi,
        )
    }

    /// Maps a point from this frame into world coordinates.
    pub fn transform_point(&self, p: &Point2) -> Point2 {
        let (s, c) = self.psi.sin_cos();
        Point2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Maps a world point into this frame.
    pub fn inverse_transform_point(&self, p: &Point2) -> Point2 {
        let (s, c) = self.psi.sin_cos();
        let dx = p.x - self.x;
        let dy = p.y - self.y;
        Point2::new(c * dx + s * dy, -s * dx + c * dy)
    }
}

pub fn pose_compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn pose_inverse(a: &Pose2) -> Pose2 {
    a.inverse()
}

pub fn transform_point(frame: &Pose2, p: &Point2) -> Point2 {
    frame.transform_point(p)
}
