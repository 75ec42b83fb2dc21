//! Scaled rigid transforms parameterized by the continuous 6D rotation
//! representation, plus interpolation and parameter-space gradients.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::aabb::Vec3;
use crate::error::{Error, Result};
use crate::mesh::RegionFrame;

/// `p ↦ s · R(e1, e2) · (p − pivot) + pivot + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaledRigidTransform {
    pub e1: Vec3,
    pub e2: Vec3,
    pub translation: Vec3,
    pub scale: f64,
}

/// Number of optimizer parameters: e1, e2, t and log s.
pub const PARAM_COUNT: usize = 10;

/// Gram–Schmidt on two 3-vectors; the result has columns `(r1, r2, r1 × r2)`.
pub fn rotation_from_6d(e1: &Vec3, e2: &Vec3) -> Result<Matrix3<f64>> {
    let n1 = e1.norm();
    if !(n1 > 1e-9) {
        return Err(Error::DegenerateRotation(format!("|e1| = {n1:e}")));
    }
    let r1 = e1 / n1;
    let u2 = e2 - r1 * r1.dot(e2);
    let n2 = u2.norm();
    if !(n2 > 1e-9 * e2.norm().max(1e-300)) || !(n2 > 1e-300) {
        return Err(Error::DegenerateRotation("e2 is parallel to e1".into()));
    }
    let r2 = u2 / n2;
    let r3 = r1.cross(&r2);
    Ok(Matrix3::from_columns(&[r1, r2, r3]))
}

/// First two columns, the canonical 6D encoding of a rotation matrix.
pub fn rotation_to_6d(r: &Matrix3<f64>) -> (Vec3, Vec3) {
    (r.column(0).into_owned(), r.column(1).into_owned())
}

/// Pulls a gradient with respect to the rotation matrix back to `(e1, e2)`.
pub fn rotation_6d_backward(e1: &Vec3, e2: &Vec3, d_rot: &Matrix3<f64>) -> (Vec3, Vec3) {
    let n1 = e1.norm();
    let r1 = e1 / n1;
    let u2 = e2 - r1 * r1.dot(e2);
    let n2 = u2.norm();
    let r2 = u2 / n2;
    let g3: Vec3 = d_rot.column(2).into_owned();
    let mut g1: Vec3 = d_rot.column(0).into_owned() + r2.cross(&g3);
    let g2: Vec3 = d_rot.column(1).into_owned() + g3.cross(&r1);
    // r2 = u2 / |u2|
    let gu2 = (g2 - r2 * r2.dot(&g2)) / n2;
    // u2 = e2 − (r1·e2) r1
    let r1e2 = r1.dot(e2);
    let r1gu2 = r1.dot(&gu2);
    let de2 = gu2 - r1 * r1gu2;
    g1 -= gu2 * r1e2 + e2 * r1gu2;
    // r1 = e1 / |e1|
    let de1 = (g1 - r1 * r1.dot(&g1)) / n1;
    (de1, de2)
}

fn quat_of(r: &Matrix3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r))
}

/// Shortest-arc spherical interpolation, falling back to normalized linear
/// interpolation when the endpoints (nearly) coincide.
pub fn slerp_rotation(a: &Matrix3<f64>, b: &Matrix3<f64>, u: f64) -> Matrix3<f64> {
    let qa = quat_of(a).into_inner();
    let mut qb = quat_of(b).into_inner();
    let mut dot = qa.coords.dot(&qb.coords);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > 1.0 - 1e-12 {
        (qa.coords * (1.0 - u) + qb.coords * u).normalize()
    } else {
        let theta = dot.min(1.0).acos();
        let sin = theta.sin();
        qa.coords * (((1.0 - u) * theta).sin() / sin) + qb.coords * ((u * theta).sin() / sin)
    };
    UnitQuaternion::from_quaternion(Quaternion::from(coords))
        .to_rotation_matrix()
        .into_inner()
}

/// Geodesic angle between two rotations.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

impl ScaledRigidTransform {
    pub fn identity() -> Self {
        ScaledRigidTransform {
            e1: Vec3::x(),
            e2: Vec3::y(),
            translation: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn from_rotation(r: &Matrix3<f64>, translation: Vec3, scale: f64) -> Self {
        let (e1, e2) = rotation_to_6d(r);
        ScaledRigidTransform {
            e1,
            e2,
            translation,
            scale,
        }
    }

    pub fn try_rotation(&self) -> Result<Matrix3<f64>> {
        rotation_from_6d(&self.e1, &self.e2)
    }

    /// Rotation matrix. The optimizers keep `(e1, e2)` well conditioned, so
    /// a degenerate pair here is a logic error.
    pub fn rotation(&self) -> Matrix3<f64> {
        self.try_rotation()
            .expect("degenerate 6D rotation parameters")
    }

    pub fn validate(&self) -> Result<()> {
        self.try_rotation()?;
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("non-finite translation".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn apply_with(&self, rot: &Matrix3<f64>, p: &Vec3, pivot: &Vec3) -> Vec3 {
        rot * (p - pivot) * self.scale + pivot + self.translation
    }

    pub fn apply(&self, p: &Vec3, pivot: &Vec3) -> Vec3 {
        self.apply_with(&self.rotation(), p, pivot)
    }

    pub fn apply_all(&self, points: &[Vec3], pivot: &Vec3) -> Vec<Vec3> {
        let rot = self.rotation();
        points.iter().map(|p| self.apply_with(&rot, p, pivot)).collect()
    }

    /// `self ∘ other` about a shared pivot: applying the result equals
    /// applying `other` first, then `self`.
    pub fn compose(&self, other: &ScaledRigidTransform) -> ScaledRigidTransform {
        let ra = self.rotation();
        let rb = other.rotation();
        ScaledRigidTransform::from_rotation(
            &(ra * rb),
            ra * other.translation * self.scale + self.translation,
            self.scale * other.scale,
        )
    }

    /// `[e1, e2, t, ln s]`.
    pub fn to_params(&self) -> [f64; PARAM_COUNT] {
        [
            self.e1.x,
            self.e1.y,
            self.e1.z,
            self.e2.x,
            self.e2.y,
            self.e2.z,
            self.translation.x,
            self.translation.y,
            self.translation.z,
            self.scale.ln(),
        ]
    }

    pub fn from_params(p: &[f64; PARAM_COUNT]) -> Self {
        ScaledRigidTransform {
            e1: Vec3::new(p[0], p[1], p[2]),
            e2: Vec3::new(p[3], p[4], p[5]),
            translation: Vec3::new(p[6], p[7], p[8]),
            scale: p[9].exp(),
        }
    }

    /// Same transform with `(e1, e2)` replaced by the orthonormal columns.
    pub fn normalized(&self) -> Self {
        ScaledRigidTransform::from_rotation(&self.rotation(), self.translation, self.scale)
    }

    /// Chain rule from per-point gradients `∂L/∂p_i` (points given in the
    /// rest pose) to `∂L/∂[e1, e2, t, ln s]`.
    pub fn backprop_points(&self, rest: &[Vec3], pivot: &Vec3, grads: &[Vec3]) -> [f64; PARAM_COUNT] {
        let rot = self.rotation();
        let s = self.scale;
        let mut d_rot = Matrix3::zeros();
        let mut dt = Vec3::zeros();
        let mut dlog_s = 0.0;
        for (p, g) in rest.iter().zip(grads) {
            if g.x == 0.0 && g.y == 0.0 && g.z == 0.0 {
                continue;
            }
            let local = p - pivot;
            dt += g;
            d_rot += g * local.transpose() * s;
            dlog_s += g.dot(&(rot * local)) * s;
        }
        let (de1, de2) = rotation_6d_backward(&self.e1, &self.e2, &d_rot);
        [
            de1.x, de1.y, de1.z, de2.x, de2.y, de2.z, dt.x, dt.y, dt.z, dlog_s,
        ]
    }

    /// Rotation as 9 row-major numbers, then translation, scale and pivot.
    pub fn to_record(&self, pivot: &Vec3) -> TransformRecord {
        let r = self.rotation();
        TransformRecord {
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            scale: self.scale,
            pivot: [pivot.x, pivot.y, pivot.z],
        }
    }
}

/// Serialized form of a transform in reports and run configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub scale: f64,
    #[serde(default)]
    pub pivot: [f64; 3],
}

impl TransformRecord {
    pub fn to_transform(&self) -> Result<ScaledRigidTransform> {
        let r = Matrix3::from_row_slice(&self.rotation);
        let t = ScaledRigidTransform::from_rotation(
            &r,
            Vec3::new(self.translation[0], self.translation[1], self.translation[2]),
            self.scale,
        );
        t.validate()?;
        Ok(t.normalized())
    }
}

/// Rotation by quaternion SLERP, translation linear, scale log-linear.
/// `u = 0` and `u = 1` return the endpoints unchanged.
pub fn slerp_transform(
    a: &ScaledRigidTransform,
    b: &ScaledRigidTransform,
    u: f64,
) -> ScaledRigidTransform {
    if u <= 0.0 {
        return *a;
    }
    if u >= 1.0 {
        return *b;
    }
    let r = slerp_rotation(&a.rotation(), &b.rotation(), u);
    ScaledRigidTransform::from_rotation(
        &r,
        a.translation * (1.0 - u) + b.translation * u,
        a.scale.powf(1.0 - u) * b.scale.powf(u),
    )
}

/// Splits `t` into components orthogonal and parallel to the region normal.
pub fn decompose_translation(t: &Vec3, frame: &RegionFrame) -> (Vec3, Vec3) {
    let n = frame.average_normal;
    let par = n * t.dot(&n);
    (t - par, par)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn identity_and_scale_invariance() {
        assert_relative_eq!(rotation_from_6d(&Vec3::x(), &Vec3::y()).unwrap(), Matrix3::identity());
        assert_relative_eq!(
            rotation_from_6d(&Vec3::new(2.0, 0.0, 0.0), &Vec3::new(0.0, 3.0, 0.0)).unwrap(),
            Matrix3::identity()
        );
    }

    /// Classical Gram–Schmidt written out by components, as a second route.
    fn gram_schmidt_oracle(a: [f64; 3], b: [f64; 3]) -> [[f64; 3]; 3] {
        let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        let q1 = [a[0] / na, a[1] / na, a[2] / na];
        let proj = q1[0] * b[0] + q1[1] * b[1] + q1[2] * b[2];
        let w = [b[0] - proj * q1[0], b[1] - proj * q1[1], b[2] - proj * q1[2]];
        let nw = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
        let q2 = [w[0] / nw, w[1] / nw, w[2] / nw];
        let q3 = [
            q1[1] * q2[2] - q1[2] * q2[1],
            q1[2] * q2[0] - q1[0] * q2[2],
            q1[0] * q2[1] - q1[1] * q2[0],
        ];
        [q1, q2, q3]
    }

    #[test]
    fn matches_second_gram_schmidt() {
        let r = rotation_from_6d(&Vec3::new(1.0, 1.0, 0.0), &Vec3::new(0.0, 1.0, 0.0)).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_relative_eq!(r.column(0).into_owned(), Vec3::new(h, h, 0.0), epsilon = 1e-15);
        let cols = gram_schmidt_oracle([1.0, 1.0, 0.0], [0.0, 1.0, 0.0]);
        for (c, col) in cols.iter().enumerate() {
            for k in 0..3 {
                assert!((r[(k, c)] - col[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_6d_inputs() {
        assert!(rotation_from_6d(&Vec3::zeros(), &Vec3::y()).is_err());
        assert!(rotation_from_6d(&Vec3::x(), &(Vec3::x() * 3.0)).is_err());
    }

    #[test]
    fn apply_identity_and_scale() {
        let pivot = Vec3::new(1.0, 2.0, 3.0);
        let p = Vec3::new(-0.5, 4.0, 0.25);
        assert_eq!(ScaledRigidTransform::identity().apply(&p, &pivot), p);
        let s2 = ScaledRigidTransform { scale: 2.0, ..ScaledRigidTransform::identity() };
        assert_relative_eq!(s2.apply(&p, &pivot), pivot + (p - pivot) * 2.0, epsilon = 1e-14);
    }

    fn arb_transform() -> impl Strategy<Value = ScaledRigidTransform> {
        (
            prop::array::uniform3(-1.0..1.0f64),
            -3.0..3.0f64,
            prop::array::uniform3(-2.0..2.0f64),
            -1.0..1.0f64,
        )
            .prop_map(|(axis, angle, t, ls)| {
                let axis = Vec3::new(axis[0], axis[1], axis[2] + 1.5);
                let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
                ScaledRigidTransform::from_rotation(r.matrix(), Vec3::new(t[0], t[1], t[2]), ls.exp())
            })
    }

    proptest! {
        #[test]
        fn composition_matches_matrix_product(a in arb_transform(), b in arb_transform(), p in prop::array::uniform3(-2.0..2.0f64)) {
            let pivot = Vec3::new(0.3, -0.2, 0.1);
            let p = Vec3::new(p[0], p[1], p[2]);
            let two_step = a.apply(&b.apply(&p, &pivot), &pivot);
            // Independent route: 4x4 homogeneous matrices.
            let h = |t: &ScaledRigidTransform| {
                let m = t.rotation() * t.scale;
                let off = pivot + t.translation - m * pivot;
                nalgebra::Matrix4::new(
                    m[(0, 0)], m[(0, 1)], m[(0, 2)], off.x,
                    m[(1, 0)], m[(1, 1)], m[(1, 2)], off.y,
                    m[(2, 0)], m[(2, 1)], m[(2, 2)], off.z,
                    0.0, 0.0, 0.0, 1.0,
                )
            };
            let hp = h(&a) * h(&b) * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            prop_assert!((two_step - hp.xyz()).norm() < 1e-9);
            prop_assert!((a.compose(&b).apply(&p, &pivot) - two_step).norm() < 1e-9);
        }

        #[test]
        fn six_d_round_trip_and_invariances(t in arb_transform(), k in 0.1..5.0f64, c in -3.0..3.0f64) {
            let r = t.rotation();
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            let (a, b) = rotation_to_6d(&r);
            prop_assert!((rotation_from_6d(&a, &b).unwrap() - r).norm() < 1e-9);
            let e1 = t.e1 * 1.3 + Vec3::new(0.01, 0.0, 0.0);
            let e2 = t.e2;
            let base = rotation_from_6d(&e1, &e2).unwrap();
            prop_assert!((rotation_from_6d(&(e1 * k), &e2).unwrap() - base).norm() < 1e-9);
            prop_assert!((rotation_from_6d(&e1, &(e2 + e1 * c)).unwrap() - base).norm() < 1e-9);
        }

        #[test]
        fn rigid_apply_preserves_distances(t in arb_transform(), p in prop::array::uniform3(-2.0..2.0f64), q in prop::array::uniform3(-2.0..2.0f64)) {
            let t = ScaledRigidTransform { scale: 1.0, ..t };
            let pivot = Vec3::new(0.5, 0.5, 0.5);
            let (p, q) = (Vec3::new(p[0], p[1], p[2]), Vec3::new(q[0], q[1], q[2]));
            prop_assert!(((t.apply(&p, &pivot) - t.apply(&q, &pivot)).norm() - (p - q).norm()).abs() < 1e-9);
        }

        #[test]
        fn slerp_midpoint_is_geodesic(a in arb_transform(), b in arb_transform()) {
            let (ra, rb) = (a.rotation(), b.rotation());
            prop_assume!(rotation_angle_between(&ra, &rb) < 3.1);
            let mid = slerp_transform(&a, &b, 0.5).rotation();
            // Oracle: log map of the relative quaternion, halved.
            let rel = quat_of(&(ra.transpose() * rb));
            let half = UnitQuaternion::from_scaled_axis(rel.scaled_axis() * 0.5);
            let expected = ra * half.to_rotation_matrix().into_inner();
            prop_assert!((mid - expected).norm() < 1e-6);
            prop_assert!((rotation_angle_between(&ra, &mid) - rotation_angle_between(&mid, &rb)).abs() < 1e-6);
        }

        #[test]
        fn slerp_angle_is_monotone(a in arb_transform(), b in arb_transform()) {
            let ra = a.rotation();
            let mut last = 0.0;
            for k in 1..=20 {
                let u = k as f64 / 20.0;
                let ang = rotation_angle_between(&ra, &slerp_transform(&a, &b, u).rotation());
                prop_assert!(ang >= last - 1e-9);
                last = ang;
            }
        }
    }

    #[test]
    fn slerp_endpoints_and_quarter_turn() {
        let a = ScaledRigidTransform::identity();
        let rz = Rotation3::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2);
        let b = ScaledRigidTransform::from_rotation(rz.matrix(), Vec3::new(1.0, 0.0, 0.0), 4.0);
        assert_eq!(slerp_transform(&a, &b, 0.0), a);
        assert_eq!(slerp_transform(&a, &b, 1.0), b);
        let mid = slerp_transform(&a, &b, 0.5);
        let expected = Rotation3::from_axis_angle(&Vec3::z_axis(), FRAC_PI_4);
        assert_relative_eq!(mid.rotation(), *expected.matrix(), epsilon = 1e-12);
        assert_relative_eq!(mid.translation, Vec3::new(0.5, 0.0, 0.0));
        assert_relative_eq!(mid.scale, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn slerp_of_equal_rotations_falls_back() {
        let a = ScaledRigidTransform::identity();
        let b = ScaledRigidTransform { translation: Vec3::x(), ..a };
        assert_relative_eq!(slerp_transform(&a, &b, 0.3).rotation(), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn translation_decomposition() {
        let frame = RegionFrame {
            centroid: Vec3::zeros(),
            average_normal: Vec3::z(),
            bbox_diag: 1.0,
        };
        assert_eq!(decompose_translation(&Vec3::z(), &frame), (Vec3::zeros(), Vec3::z()));
        assert_eq!(decompose_translation(&Vec3::x(), &frame), (Vec3::x(), Vec3::zeros()));
        let (perp, par) = decompose_translation(&Vec3::new(1.0, 2.0, 3.0), &frame);
        assert_eq!(perp, Vec3::new(1.0, 2.0, 0.0));
        assert_eq!(par, Vec3::new(0.0, 0.0, 3.0));
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let rest: Vec<Vec3> = (0..7)
            .map(|i| {
                let f = i as f64;
                Vec3::new((f * 0.7).sin(), (f * 1.3).cos(), f * 0.1 - 0.3)
            })
            .collect();
        let targets: Vec<Vec3> = rest.iter().map(|p| p * 0.8 + Vec3::new(0.2, -0.1, 0.4)).collect();
        let pivot = Vec3::new(0.1, 0.2, -0.1);
        let loss = |t: &ScaledRigidTransform| -> f64 {
            rest.iter()
                .zip(&targets)
                .map(|(p, q)| (t.apply(p, &pivot) - q).norm_squared())
                .sum()
        };
        let t = ScaledRigidTransform {
            e1: Vec3::new(0.9, 0.2, -0.1),
            e2: Vec3::new(0.3, 1.1, 0.2),
            translation: Vec3::new(0.05, 0.1, -0.2),
            scale: 1.2,
        };
        let grads: Vec<Vec3> = rest
            .iter()
            .zip(&targets)
            .map(|(p, q)| (t.apply(p, &pivot) - q) * 2.0)
            .collect();
        let analytic = t.backprop_points(&rest, &pivot, &grads);
        let params = t.to_params();
        for k in 0..PARAM_COUNT {
            let h = 1e-6;
            let mut hi = params;
            hi[k] += h;
            let mut lo = params;
            lo[k] -= h;
            let fd = (loss(&ScaledRigidTransform::from_params(&hi)) - loss(&ScaledRigidTransform::from_params(&lo))) / (2.0 * h);
            assert!((fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: fd {fd} analytic {}", analytic[k]);
        }
    }
}
