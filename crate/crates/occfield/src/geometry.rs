//! SE(3) poses, twist increments, rays, and the Jacobians that let loss
//! gradients flow back into pose parameters.
//!
//! Poses are refined by a left-multiplicative update `T = exp(delta) * T_init`
//! where `delta` is a 6-vector twist (rotation part first, in radians, then
//! translation in meters). All operations are pure functions on immutable
//! values.
//!
//! # Example
//!
//! ```
//! use nalgebra::{Vector3, Vector6};
//! use occfield::geometry::{apply_delta, transform_point, PoseDelta, PoseSE3};
//!
//! let initial = PoseSE3::identity();
//! // Half a radian about z plus a small translation.
//! let delta = PoseDelta { twist: Vector6::new(0.0, 0.0, 0.5, 0.1, 0.0, 0.0) };
//! let pose = apply_delta(&initial, &delta)?;
//! assert!(pose.orthonormality_error() < 1e-12);
//! assert!((initial.rotation_angle_to(&pose) - 0.5).abs() < 1e-12);
//! let p = transform_point(&pose, &Vector3::new(1.0, 0.0, 0.0));
//! assert!((p.fixed_rows::<2>(0).norm() - 1.0).abs() < 0.2);
//! # Ok::<(), occfield::Error>(())
//! ```

use nalgebra::{Matrix3, Vector3, Vector6};

use crate::error::{Error, Result};

/// Threshold below which the exponential map switches to its Taylor branch.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Rigid transform: `p_world = R * p_local + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3 {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        PoseSE3 {
            rotation,
            translation,
        }
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Max-norm deviation of `R^T R` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let e = self.rotation.transpose() * self.rotation - Matrix3::identity();
        e.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Geodesic rotation angle between two poses, in radians.
    pub fn rotation_angle_to(&self, other: &PoseSE3) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        // atan2 of the axis magnitude against the trace stays accurate for
        // tiny angles, where acos((tr-1)/2) loses half the mantissa.
        let s = 0.5
            * Vector3::new(
                r[(2, 1)] - r[(1, 2)],
                r[(0, 2)] - r[(2, 0)],
                r[(1, 0)] - r[(0, 1)],
            )
            .norm();
        let c = (r.trace() - 1.0) / 2.0;
        s.atan2(c)
    }
}

/// 6-DoF twist increment: `[omega, v]` with `omega` in radians (axis-angle)
/// and `v` in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseDelta {
    pub twist: Vector6<f64>,
}

impl PoseDelta {
    pub fn zero() -> Self {
        PoseDelta {
            twist: Vector6::zeros(),
        }
    }

    pub fn from_parts(omega: Vector3<f64>, v: Vector3<f64>) -> Self {
        PoseDelta {
            twist: Vector6::new(omega.x, omega.y, omega.z, v.x, v.y, v.z),
        }
    }

    pub fn omega(&self) -> Vector3<f64> {
        Vector3::new(self.twist[0], self.twist[1], self.twist[2])
    }

    pub fn v(&self) -> Vector3<f64> {
        Vector3::new(self.twist[3], self.twist[4], self.twist[5])
    }
}

/// One LiDAR return viewed as a ray: `p(z) = origin + z * direction`,
/// with the measured surface at `z = range`.
#[derive(Clone, Debug)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub range: f64,
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues coefficients A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3
/// with Taylor branches near zero.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            s / theta,
            (1.0 - c) / (theta * theta),
            (theta - s) / (theta * theta * theta),
        )
    }
}

/// Derivatives of the Rodrigues coefficients divided by theta:
/// `(A'/t, B'/t, C'/t)`, finite at zero.
fn rodrigues_coeff_derivs_over_theta(theta: f64) -> (f64, f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (
            -1.0 / 3.0 + t2 / 30.0,
            -1.0 / 12.0 + t2 / 180.0,
            -1.0 / 60.0 + t2 / 1260.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let da = (theta * c - s) / t2;
        let db = (theta * s - 2.0 * (1.0 - c)) / (t2 * theta);
        let dc = ((1.0 - c) * theta - 3.0 * (theta - s)) / (t2 * t2);
        (da / theta, db / theta, dc / theta)
    }
}

/// Exponential map from a twist to a rigid transform.
///
/// `R = I + A [w]x + B [w]x^2` and `t = V(w) v` with
/// `V = I + B [w]x + C [w]x^2`.
pub fn se3_exp(delta: &PoseDelta) -> Result<PoseSE3> {
    if !delta.twist.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput("non-finite twist".into()));
    }
    let omega = delta.omega();
    let v = delta.v();
    let theta = omega.norm();
    let k = skew(&omega);
    let k2 = k * k;
    let (a, b, c) = rodrigues_coeffs(theta);
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let vmat = Matrix3::identity() + k * b + k2 * c;
    Ok(PoseSE3::new(rotation, vmat * v))
}

/// Logarithm map, inverse of [`se3_exp`].
pub fn se3_log(pose: &PoseSE3) -> PoseDelta {
    let r = &pose.rotation;
    let cos_theta = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let omega = if theta < SMALL_ANGLE {
        Vector3::new(
            (r[(2, 1)] - r[(1, 2)]) / 2.0,
            (r[(0, 2)] - r[(2, 0)]) / 2.0,
            (r[(1, 0)] - r[(0, 1)]) / 2.0,
        )
    } else {
        Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        ) * (theta / (2.0 * theta.sin()))
    };
    let k = skew(&omega);
    let k2 = k * k;
    // V^{-1} = I - K/2 + coeff * K^2
    let coeff = if theta < 1e-4 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (a, b, _) = rodrigues_coeffs(theta);
        (1.0 - a / (2.0 * b)) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k2 * coeff;
    PoseDelta::from_parts(omega, v_inv * pose.translation)
}

/// Left-multiplicative pose update: `exp(delta) * initial`.
pub fn apply_delta(initial: &PoseSE3, delta: &PoseDelta) -> Result<PoseSE3> {
    Ok(se3_exp(delta)?.compose(initial))
}

pub fn transform_point(pose: &PoseSE3, p_local: &Vector3<f64>) -> Vector3<f64> {
    pose.rotation * p_local + pose.translation
}

/// Jacobian of the world point w.r.t. a twist perturbation at zero:
/// `d/d(xi) [exp(xi) * (pose . p)]` at `xi = 0`.
///
/// Columns 0..3 (rotation part) form `-[p_world]x`; columns 3..6 are the
/// identity.
pub fn pose_point_jacobian(pose: &PoseSE3, p_local: &Vector3<f64>) -> [Vector3<f64>; 6] {
    let p_world = transform_point(pose, p_local);
    let m = skew(&p_world);
    [
        -m.column(0).into_owned(),
        -m.column(1).into_owned(),
        -m.column(2).into_owned(),
        Vector3::x(),
        Vector3::y(),
        Vector3::z(),
    ]
}

/// Jacobian of `exp(delta) . q` w.r.t. the twist components, evaluated at the
/// given (not necessarily zero) twist. Used when refining a persistent
/// per-frame twist with a gradient method.
pub struct TwistPointJacobian {
    /// `dR/d(omega_k)` for k = 0, 1, 2.
    drot: [Matrix3<f64>; 3],
    /// `dV/d(omega_k) * v` for k = 0, 1, 2.
    dvv: [Vector3<f64>; 3],
    /// `V(omega)`, whose columns are `d t / d v_k`.
    vmat: Matrix3<f64>,
}

impl TwistPointJacobian {
    pub fn new(delta: &PoseDelta) -> Self {
        let omega = delta.omega();
        let v = delta.v();
        let theta = omega.norm();
        let k = skew(&omega);
        let k2 = k * k;
        let (a, b, c) = rodrigues_coeffs(theta);
        let (dat, dbt, dct) = rodrigues_coeff_derivs_over_theta(theta);
        let vmat = Matrix3::identity() + k * b + k2 * c;
        let mut drot = [Matrix3::zeros(); 3];
        let mut dvv = [Vector3::zeros(); 3];
        let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
        for kidx in 0..3 {
            let ek = skew(&basis[kidx]);
            let ek_k = ek * k + k * ek;
            // d(coef)/d(omega_k) = (coef'/theta) * omega_k
            let ak = dat * omega[kidx];
            let bk = dbt * omega[kidx];
            let ck = dct * omega[kidx];
            drot[kidx] = k * ak + ek * a + k2 * bk + ek_k * b;
            let dv = k * bk + ek * b + k2 * ck + ek_k * c;
            dvv[kidx] = dv * v;
        }
        TwistPointJacobian { drot, dvv, vmat }
    }

    /// Columns of `d p_world / d twist` for `p_world = exp(delta) . q`.
    pub fn columns(&self, q: &Vector3<f64>) -> [Vector3<f64>; 6] {
        [
            self.drot[0] * q + self.dvv[0],
            self.drot[1] * q + self.dvv[1],
            self.drot[2] * q + self.dvv[2],
            self.vmat.column(0).into_owned(),
            self.vmat.column(1).into_owned(),
            self.vmat.column(2).into_owned(),
        ]
    }

    /// Chain an upstream d(loss)/d(p_world) into d(loss)/d(twist).
    pub fn chain(&self, q: &Vector3<f64>, upstream: &Vector3<f64>) -> Vector6<f64> {
        let cols = self.columns(q);
        Vector6::from_fn(|i, _| cols[i].dot(upstream))
    }
}

/// Treat a sensor-frame point as a ray from the sensor origin through the
/// measured point, in world coordinates.
pub fn make_ray(pose: &PoseSE3, p_local: &Vector3<f64>) -> Result<Ray> {
    let range = p_local.norm();
    if range <= 0.0 {
        return Err(Error::DegenerateRay);
    }
    let origin = pose.translation;
    let world = transform_point(pose, p_local);
    Ok(Ray {
        origin,
        direction: (world - origin) / range,
        range,
    })
}
