//! 7-joint remote-center-of-motion tool chain: yaw, pitch, insertion,
//! shaft roll, two wrist joints, jaw. The jaw joint carries no kinematic
//! effect (zero Jacobian column).

use crate::data::NUM_JOINTS;
use crate::error::{Error, Result};
use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};

pub type Jacobian = nalgebra::SMatrix<f64, 6, 7>;

/// Chain geometry; wrist links are short but nonzero so the full wrench
/// Jacobian keeps rank 6.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ChainParams {
    /// Remote center of motion, world frame (m).
    pub rcm: [f64; 3],
    /// First wrist link length (m).
    pub l5: f64,
    /// Second wrist link length (m).
    pub l6: f64,
    /// Insertion depth limits (m).
    pub q3_range: [f64; 2],
}

impl Default for ChainParams {
    fn default() -> Self {
        ChainParams {
            rcm: [0.0, 0.0, 0.12],
            l5: 0.009,
            l6: 0.007,
            q3_range: [0.02, 0.25],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TipPose {
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

#[derive(Debug, Clone, Copy)]
enum JointKind {
    Revolute,
    Prismatic,
}

impl ChainParams {
    /// Forward kinematics; also records per-joint axis/origin for the
    /// geometric Jacobian.
    fn chain(
        &self,
        q: &[f64; NUM_JOINTS],
    ) -> ([(JointKind, Vector3<f64>, Vector3<f64>); 6], TipPose) {
        let rcm = Vector3::new(self.rcm[0], self.rcm[1], self.rcm[2]);
        let rot1 = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q[0]);
        let rot12 = rot1 * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), q[1]);
        let shaft_dir = rot12 * Vector3::new(0.0, 0.0, -1.0);
        let roll = rot12 * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), q[3]);
        let wrist1 = roll * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), q[4]);
        let wrist2 = wrist1 * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), q[5]);

        let p_shaft_end = rcm + shaft_dir * q[2];
        let p_w2 = p_shaft_end + wrist1 * Vector3::new(0.0, 0.0, -self.l5);
        let tip = p_w2 + wrist2 * Vector3::new(0.0, 0.0, -self.l6);

        let joints = [
            (JointKind::Revolute, Vector3::z(), rcm),
            (JointKind::Revolute, rot1 * Vector3::y(), rcm),
            (JointKind::Prismatic, shaft_dir, rcm),
            (JointKind::Revolute, rot12 * Vector3::z(), rcm),
            (JointKind::Revolute, roll * Vector3::x(), p_shaft_end),
            (JointKind::Revolute, wrist1 * Vector3::y(), p_w2),
        ];
        (
            joints,
            TipPose {
                position: tip,
                rotation: wrist2,
            },
        )
    }

    pub fn fk(&self, q: &[f64; NUM_JOINTS]) -> TipPose {
        self.chain(q).1
    }

    /// Geometric Jacobian mapping joint rates to tip twist [v; ω].
    pub fn jacobian(&self, q: &[f64; NUM_JOINTS]) -> Jacobian {
        let (joints, tip) = self.chain(q);
        let mut j = Jacobian::zeros();
        for (i, (kind, axis, origin)) in joints.iter().enumerate() {
            match kind {
                JointKind::Revolute => {
                    let v = axis.cross(&(tip.position - origin));
                    j.fixed_view_mut::<3, 1>(0, i).copy_from(&v);
                    j.fixed_view_mut::<3, 1>(3, i).copy_from(axis);
                }
                JointKind::Prismatic => {
                    j.fixed_view_mut::<3, 1>(0, i).copy_from(axis);
                }
            }
        }
        // column 6 (jaw) stays zero
        j
    }

    /// Inverse kinematics for a tip position with a prescribed wrist
    /// posture (q4, q5, q6 given). Fixed-point iteration over the small
    /// wrist offset; errors if the target cannot be reached.
    pub fn ik(
        &self,
        target: &Vector3<f64>,
        wrist: &[f64; 3],
        jaw: f64,
        tick: usize,
    ) -> Result<[f64; NUM_JOINTS]> {
        let rcm = Vector3::new(self.rcm[0], self.rcm[1], self.rcm[2]);
        let mut q = [0.0; NUM_JOINTS];
        q[3] = wrist[0];
        q[4] = wrist[1];
        q[5] = wrist[2];
        q[6] = jaw;
        // analytic estimate ignoring the wrist links
        {
            let u = target - rcm;
            if -u.z <= 1e-9 {
                return Err(Error::UnreachablePose {
                    tick,
                    what: format!("target {:?} not below the RCM", target),
                });
            }
            let h = (u.x * u.x + u.y * u.y).sqrt();
            if h > 1e-12 {
                q[0] = u.y.atan2(u.x);
            }
            q[1] = (-h).atan2(-u.z);
            q[2] = u.norm();
        }
        // Damped least-squares refinement over (q1, q2, q3, q4) against the
        // tip position. Roll must participate: with the wrist bent, its
        // lateral offset makes targets close to the vertical through the RCM
        // unreachable at a fixed roll angle. The damping keeps the step
        // well-posed near the yaw singularity, and the minimum-norm solve
        // keeps roll near its commanded value.
        let mut lambda = 1e-10;
        for _ in 0..200 {
            let pose = self.fk(&q);
            let err = target - pose.position;
            let err_norm = err.norm();
            if err_norm < 1e-12 {
                break;
            }
            let j = self.jacobian(&q);
            let jp = nalgebra::Matrix3x4::from_columns(&[
                j.fixed_view::<3, 1>(0, 0).into_owned(),
                j.fixed_view::<3, 1>(0, 1).into_owned(),
                j.fixed_view::<3, 1>(0, 2).into_owned(),
                j.fixed_view::<3, 1>(0, 3).into_owned(),
            ]);
            let jjt = jp * jp.transpose();
            let mut accepted = false;
            for _ in 0..12 {
                let damped = jjt + nalgebra::Matrix3::identity() * lambda;
                let Some(y) = damped.lu().solve(&err) else {
                    lambda *= 10.0;
                    continue;
                };
                let dq = jp.transpose() * y;
                let trial = [
                    q[0] + dq.x,
                    q[1] + dq.y,
                    q[2] + dq.z,
                    q[3] + dq.w,
                    q[4],
                    q[5],
                    q[6],
                ];
                if (self.fk(&trial).position - target).norm() < err_norm {
                    q = trial;
                    lambda = (lambda * 0.25).max(1e-12);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        let pose = self.fk(&q);
        let err = (pose.position - target).norm();
        if err > 1e-9 {
            return Err(Error::UnreachablePose {
                tick,
                what: format!("residual {err:.3e} m"),
            });
        }
        if q[2] < self.q3_range[0] || q[2] > self.q3_range[1] {
            return Err(Error::UnreachablePose {
                tick,
                what: format!("insertion {:.4} m outside {:?}", q[2], self.q3_range),
            });
        }
        Ok(q)
    }

    pub fn tip_isometry(&self, q: &[f64; NUM_JOINTS]) -> Isometry3<f64> {
        let pose = self.fk(q);
        Isometry3::from_parts(Translation3::from(pose.position), pose.rotation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fk_straight_down() {
        let ch = ChainParams::default();
        let q = [0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.0];
        let pose = ch.fk(&q);
        let expect_z = 0.12 - 0.1 - ch.l5 - ch.l6;
        assert!((pose.position - Vector3::new(0.0, 0.0, expect_z)).norm() < 1e-12);
    }

    #[test]
    fn ik_fk_roundtrip() {
        let ch = ChainParams::default();
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for tick in 0..50 {
            let target = Vector3::new(
                r.gen_range(-0.04..0.04),
                r.gen_range(-0.03..0.03),
                r.gen_range(-0.01..0.03),
            );
            let wrist = [
                r.gen_range(-0.4..0.4),
                r.gen_range(-0.3..0.3),
                r.gen_range(-0.3..0.3),
            ];
            let q = ch.ik(&target, &wrist, 0.1, tick).unwrap();
            let pose = ch.fk(&q);
            assert!(
                (pose.position - target).norm() < 1e-9,
                "tick {tick}: residual {}",
                (pose.position - target).norm()
            );
        }
    }

    #[test]
    fn ik_rejects_target_above_rcm() {
        let ch = ChainParams::default();
        let res = ch.ik(&Vector3::new(0.0, 0.0, 0.2), &[0.0; 3], 0.0, 3);
        assert!(matches!(res, Err(Error::UnreachablePose { tick: 3, .. })));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let ch = ChainParams::default();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let q = [
                r.gen_range(-0.5..0.5),
                r.gen_range(-1.2..-0.1),
                r.gen_range(0.08..0.15),
                r.gen_range(-0.5..0.5),
                r.gen_range(-0.4..0.4),
                r.gen_range(-0.4..0.4),
                r.gen_range(0.0..0.5),
            ];
            let j = ch.jacobian(&q);
            let h = 1e-7;
            for col in 0..7 {
                let mut qp = q;
                let mut qm = q;
                qp[col] += h;
                qm[col] -= h;
                let fd = (ch.fk(&qp).position - ch.fk(&qm).position) / (2.0 * h);
                for row in 0..3 {
                    assert!(
                        (j[(row, col)] - fd[row]).abs() < 1e-5,
                        "J[{row},{col}] {} vs fd {}",
                        j[(row, col)],
                        fd[row]
                    );
                }
            }
        }
    }

    #[test]
    fn wrench_roundtrip_through_jacobian_transpose() {
        // τ = Jᵀ w with zero tip torque; pinv(Jᵀ) must recover the force
        let ch = ChainParams::default();
        let mut r = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let target = Vector3::new(
                r.gen_range(-0.03..0.03),
                r.gen_range(-0.02..0.02),
                r.gen_range(-0.005..0.02),
            );
            let q = ch.ik(&target, &[0.1, 0.2, -0.1], 0.1, 0).unwrap();
            let j = ch.jacobian(&q);
            let f = Vector3::new(
                r.gen_range(-3.0..3.0),
                r.gen_range(-3.0..3.0),
                r.gen_range(-5.0..0.0),
            );
            let mut w = nalgebra::SVector::<f64, 6>::zeros();
            w.fixed_rows_mut::<3>(0).copy_from(&f);
            let tau = j.transpose() * w;
            let jt_pinv = j.transpose().svd(true, true).pseudo_inverse(1e-12).unwrap();
            let w_rec = jt_pinv * tau;
            for i in 0..3 {
                assert!((w_rec[i] - f[i]).abs() < 1e-9, "axis {i}");
            }
        }
    }
}
