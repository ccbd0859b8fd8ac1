//! SE(3) / so(3) algebra for extrinsic matrices.
//!
//! Twists are ordered `(rot, tsl)`: the first three components are the
//! axis-angle rotation `omega`, the last three the translational part `rho`
//! with `exp(xi) = [R(omega), V(omega) rho; 0, 1]`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use rand::Rng;

use crate::error::{CalibError, Result};
use crate::rng;

/// Below this rotation angle the Rodrigues coefficients switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Closest admissible distance to pi for the log map.
pub const NEAR_PI_GUARD: f64 = 1e-6;

/// Closest admissible distance of |pitch| to pi/2 for Euler extraction.
pub const GIMBAL_GUARD: f64 = 1e-6;

const RIGID_TOL: f64 = 1e-9;

/// Rigid-body transform `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking orthonormality and `det R = 1`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(CalibError::NotRigid("non-finite entry".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if ortho >= RIGID_TOL {
            return Err(CalibError::NotRigid(format!(
                "|R^T R - I|_inf = {ortho:e}"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() >= RIGID_TOL {
            return Err(CalibError::NotRigid(format!("det R = {det}")));
        }
        Ok(())
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the upper 3x4 block; the last row must be `0 0 0 1`.
    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let last = m.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(CalibError::NotRigid("last row must be 0 0 0 1".into()));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`, i.e. apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// Free-function form of [`RigidTransform::compose`].
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Element of se(3): rotational and translational twist components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Se3Tangent {
    pub rot: Vector3<f64>,
    pub tsl: Vector3<f64>,
}

impl Se3Tangent {
    pub fn new(rot: Vector3<f64>, tsl: Vector3<f64>) -> Self {
        Self { rot, tsl }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            rot: Vector3::new(v[0], v[1], v[2]),
            tsl: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rot.x, self.rot.y, self.rot.z, self.tsl.x, self.tsl.y, self.tsl.z,
        ]
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::from_row_slice(&self.to_array())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rot: self.rot * s,
            tsl: self.tsl * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rot.iter().chain(self.tsl.iter()).all(|v| v.is_finite())
    }

    pub fn norm_inf(&self) -> f64 {
        self.rot.amax().max(self.tsl.amax())
    }
}

/// Skew-symmetric matrix with `hat(w) v = w x v`.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`] on the antisymmetric part.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Rodrigues coefficients `A = sin t / t`, `B = (1 - cos t) / t^2`,
/// `C = (t - sin t) / t^3`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

/// Exponential map so(3) -> SO(3).
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = rodrigues_coeffs(w.norm());
    let k = hat(w);
    Matrix3::identity() + k * a + k * k * b
}

/// Exponential map se(3) -> SE(3).
pub fn exp_se3(xi: &Se3Tangent) -> RigidTransform {
    let (a, b, c) = rodrigues_coeffs(xi.rot.norm());
    let k = hat(&xi.rot);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    RigidTransform {
        rotation,
        translation: v * xi.tsl,
    }
}

/// Logarithm SO(3) -> so(3) for angles below `pi - NEAR_PI_GUARD`.
pub fn log_so3(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let theta = rotation_angle(r);
    if theta > std::f64::consts::PI - NEAR_PI_GUARD {
        return Err(CalibError::AngleNearPi { angle: theta });
    }
    let axis_scaled = vee(&(r - r.transpose()));
    let factor = if theta < SMALL_ANGLE {
        0.5 * (1.0 + theta * theta / 6.0)
    } else {
        theta / (2.0 * theta.sin())
    };
    Ok(axis_scaled * factor)
}

/// Logarithm SE(3) -> se(3); inverse of [`exp_se3`] away from pi.
pub fn log_se3(t: &RigidTransform) -> Result<Se3Tangent> {
    let w = log_so3(&t.rotation)?;
    let theta = w.norm();
    let k = hat(&w);
    // V^-1 = I - K/2 + D K^2 with D = (1 - A / (2B)) / theta^2
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (a, b, _) = rodrigues_coeffs(theta);
        (1.0 - a / (2.0 * b)) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * d;
    Ok(Se3Tangent {
        rot: w,
        tsl: v_inv * t.translation,
    })
}

pub fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Roll/pitch/yaw in radians under `R = Rz(yaw) Ry(pitch) Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EulerZyx {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerZyx {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.roll, self.pitch, self.yaw]
    }

    pub fn to_rotation(self) -> Matrix3<f64> {
        rot_z(self.yaw) * rot_y(self.pitch) * rot_x(self.roll)
    }
}

pub fn euler_zyx_of(r: &Matrix3<f64>) -> Result<EulerZyx> {
    let sp = (-r[(2, 0)]).clamp(-1.0, 1.0);
    let cp = r[(2, 1)].hypot(r[(2, 2)]);
    let pitch = sp.atan2(cp);
    if pitch.abs() >= std::f64::consts::FRAC_PI_2 - GIMBAL_GUARD {
        return Err(CalibError::GimbalLock { pitch });
    }
    Ok(EulerZyx {
        roll: r[(2, 1)].atan2(r[(2, 2)]),
        pitch,
        yaw: r[(1, 0)].atan2(r[(0, 0)]),
    })
}

pub fn euler_zyx(t: &RigidTransform) -> Result<EulerZyx> {
    euler_zyx_of(&t.rotation)
}

/// Per-axis perturbation budget: degrees for each Euler angle, centimeters for
/// each translation component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbRange {
    pub max_rot_deg: f64,
    pub max_tsl_cm: f64,
}

impl PerturbRange {
    pub const DEG15_CM15: PerturbRange = PerturbRange {
        max_rot_deg: 15.0,
        max_tsl_cm: 15.0,
    };
    pub const DEG10_CM25: PerturbRange = PerturbRange {
        max_rot_deg: 10.0,
        max_tsl_cm: 25.0,
    };
    pub const DEG10_CM50: PerturbRange = PerturbRange {
        max_rot_deg: 10.0,
        max_tsl_cm: 50.0,
    };

    pub fn new(max_rot_deg: f64, max_tsl_cm: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(max_rot_deg) || !ok(max_tsl_cm) {
            return Err(CalibError::InvalidArgument(format!(
                "perturbation range must be finite and non-negative, got {max_rot_deg} deg / {max_tsl_cm} cm"
            )));
        }
        Ok(Self {
            max_rot_deg,
            max_tsl_cm,
        })
    }
}

/// Raw draws of one perturbation, in the units of the budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbDraw {
    pub euler_deg: [f64; 3],
    pub tsl_cm: [f64; 3],
}

impl PerturbDraw {
    pub fn to_transform(&self) -> RigidTransform {
        let [r, p, y] = self.euler_deg.map(f64::to_radians);
        RigidTransform {
            rotation: EulerZyx::new(r, p, y).to_rotation(),
            translation: Vector3::from(self.tsl_cm.map(|c| c / 100.0)),
        }
    }
}

fn symmetric_uniform<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.random_range(-bound..=bound)
    }
}

/// Draws per-axis uniform Euler angles and translation components.
pub fn draw_perturbation<R: Rng>(range: &PerturbRange, rng: &mut R) -> PerturbDraw {
    let euler_deg = [(); 3].map(|_| symmetric_uniform(rng, range.max_rot_deg));
    let tsl_cm = [(); 3].map(|_| symmetric_uniform(rng, range.max_tsl_cm));
    PerturbDraw { euler_deg, tsl_cm }
}

/// Seeded perturbation `T_r`; identical seeds give identical transforms.
pub fn sample_perturbation(range: &PerturbRange, seed: u64) -> RigidTransform {
    let mut g = rng::stream(seed, rng::streams::PERTURBATION);
    draw_perturbation(range, &mut g).to_transform()
}
