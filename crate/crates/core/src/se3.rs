//! Rigid-body transforms, the SE(3) exponential and logarithm, and the pinhole
//! camera model.
//!
//! Camera frames follow the usual vision convention: z forward, x right,
//! y down. A camera pose `T_wc` maps camera-frame points into the world, so
//! projection goes through its inverse.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};

const SMALL_ANGLE: f64 = 1e-8;
const NEAR_PI: f64 = 1e-6;

/// Skew-symmetric matrix such that `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Element of se(3): translational part `rho`, rotational part `phi`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    /// Stacked as `[rho; phi]`.
    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rho: self.rho * s,
            phi: self.phi * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rho
            .iter()
            .chain(self.phi.iter())
            .all(|x| x.is_finite())
    }
}

/// Rigid transform stored as a rotation matrix plus translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Right-multiplied perturbation `self * exp(delta)`.
    pub fn retract(&self, delta: &Twist) -> Pose {
        self.compose(&se3_exp(delta))
    }

    /// Checks `RᵀR = I` and `det R = +1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).abs().max() < tol
            && (self.rotation.determinant() - 1.0).abs() < tol
            && self.translation.iter().all(|x| x.is_finite())
    }

    /// Unit quaternion with non-negative `w`.
    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        let q =
            UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        if q.w < 0.0 {
            UnitQuaternion::new_unchecked(-q.into_inner())
        } else {
            q
        }
    }

    /// Wire format `[qx, qy, qz, qw, tx, ty, tz]`.
    pub fn to_wire(&self) -> [f64; 7] {
        let q = self.quaternion();
        let t = self.translation;
        [q.i, q.j, q.k, q.w, t.x, t.y, t.z]
    }

    /// Parses the wire format; the quaternion must be unit within `1e-6`.
    pub fn from_wire(v: &[f64]) -> std::result::Result<Pose, String> {
        if v.len() != 7 {
            return Err(format!("pose needs 7 numbers, got {}", v.len()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err("pose has non-finite entries".into());
        }
        let q = nalgebra::Quaternion::new(v[3], v[0], v[1], v[2]);
        let n = q.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(format!("quaternion norm {n} is not 1 within 1e-6"));
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Ok(Pose {
            rotation: uq.to_rotation_matrix().into_inner(),
            translation: Vector3::new(v[4], v[5], v[6]),
        })
    }

    /// Camera pose at `eye` looking at `target`, with `up` pointing against the
    /// image y axis.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Pose {
        let fwd = (target - eye).normalize();
        let right = fwd.cross(up).normalize();
        let down = fwd.cross(&right);
        Pose {
            rotation: Matrix3::from_columns(&[right, down, fwd]),
            translation: *eye,
        }
    }
}

/// Rotation about a unit axis, from a rotation vector.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, half_versine_ratio(theta))
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation vector of `r`. Fails within `1e-6` rad of pi.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let w = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let s = 0.5 * w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if std::f64::consts::PI - theta < NEAR_PI {
        return Err(Error::AngleNearPi);
    }
    let factor = if theta < SMALL_ANGLE {
        0.5 * (1.0 + theta * theta / 6.0)
    } else {
        0.5 * theta / s
    };
    Ok(w * factor)
}

/// `(1 - cos θ) / θ²` without cancellation.
fn half_versine_ratio(theta: f64) -> f64 {
    let s = (0.5 * theta).sin();
    2.0 * s * s / (theta * theta)
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (b, c) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else if theta < 1e-2 {
        // θ - sin θ cancels badly here
        (
            half_versine_ratio(theta),
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            half_versine_ratio(theta),
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * d
}

pub fn se3_exp(x: &Twist) -> Pose {
    Pose {
        rotation: so3_exp(&x.phi),
        translation: so3_left_jacobian(&x.phi) * x.rho,
    }
}

pub fn se3_log(p: &Pose) -> Result<Twist> {
    let phi = so3_log(&p.rotation)?;
    Ok(Twist {
        rho: so3_left_jacobian_inv(&phi) * p.translation,
        phi,
    })
}

/// `log(a⁻¹ b)`, the right-hand difference `b ⊟ a`.
pub fn pose_between(a: &Pose, b: &Pose) -> Result<Twist> {
    se3_log(&a.inverse().compose(b))
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }
}

pub const MIN_DEPTH: f64 = 1e-6;

pub fn project(k: &Intrinsics, p_cam: &Vector3<f64>) -> Result<Vector2<f64>> {
    if p_cam.z <= MIN_DEPTH {
        return Err(Error::BehindCamera(p_cam.z));
    }
    Ok(Vector2::new(
        k.fx * p_cam.x / p_cam.z + k.cx,
        k.fy * p_cam.y / p_cam.z + k.cy,
    ))
}

/// Jacobian of `project` with respect to the camera-frame point.
pub fn project_jacobian(k: &Intrinsics, p_cam: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / p_cam.z;
    let iz2 = iz * iz;
    nalgebra::Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p_cam.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * p_cam.y * iz2,
    )
}

pub fn back_project(k: &Intrinsics, u: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) {
        return Err(Error::NonPositiveDepth(depth));
    }
    Ok(Vector3::new(
        (u.x - k.cx) / k.fx * depth,
        (u.y - k.cy) / k.fy * depth,
        depth,
    ))
}

/// Roll and pitch of a rotation under the Z-Y-X (yaw-pitch-roll) convention.
pub fn roll_pitch(r: &Matrix3<f64>) -> (f64, f64) {
    let roll = r[(2, 1)].atan2(r[(2, 2)]);
    let pitch = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    (roll, pitch)
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    so3_exp(&Vector3::new(a, 0.0, 0.0))
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    so3_exp(&Vector3::new(0.0, a, 0.0))
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    so3_exp(&Vector3::new(0.0, 0.0, a))
}
