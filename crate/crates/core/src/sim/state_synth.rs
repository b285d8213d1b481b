//! Turn a tip trajectory plus contact forces into full robot state
//! samples: joint positions, servo commands, EE wrench readings, and
//! joint torques with cable friction and sensor noise.

use super::contact::ContactTick;
use super::kinematics::ChainParams;
use super::trajectory::Trajectory;
use crate::data::{ForceState, KinematicState, RobotState, NUM_JOINTS};
use crate::error::Result;
use nalgebra::{SVector, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ToolModel {
    pub name: String,
    /// Coulomb cable friction per joint (N·m, or N for the insertion).
    pub coulomb: [f64; NUM_JOINTS],
    /// Viscous cable friction per joint.
    pub viscous: [f64; NUM_JOINTS],
    /// Jaw footprint half-width when rendered (m).
    pub jaw_half_width: f64,
    /// Jaw length when rendered (m).
    pub jaw_length: f64,
}

impl ToolModel {
    pub fn cadiere() -> Self {
        ToolModel {
            name: "cadiere".into(),
            coulomb: [0.045, 0.045, 0.9, 0.012, 0.008, 0.008, 0.004],
            viscous: [0.030, 0.030, 0.5, 0.008, 0.005, 0.005, 0.002],
            jaw_half_width: 0.004,
            jaw_length: 0.016,
        }
    }

    /// Held-out grasper with a visibly wider, shorter jaw and its own
    /// cable friction signature.
    pub fn maryland() -> Self {
        ToolModel {
            name: "maryland".into(),
            coulomb: [0.070, 0.070, 1.4, 0.020, 0.013, 0.013, 0.007],
            viscous: [0.048, 0.048, 0.8, 0.013, 0.009, 0.009, 0.004],
            jaw_half_width: 0.009,
            jaw_length: 0.010,
        }
    }
}

/// Sensor/actuation noise, standard deviations. All zeros gives the
/// noise-free ideal channel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseModel {
    pub torque: f64,
    pub wrench_force: f64,
    pub wrench_torque: f64,
}

impl NoiseModel {
    pub fn nominal() -> Self {
        NoiseModel {
            torque: 0.012,
            wrench_force: 0.03,
            wrench_torque: 0.002,
        }
    }

    pub fn none() -> Self {
        NoiseModel {
            torque: 0.0,
            wrench_force: 0.0,
            wrench_torque: 0.0,
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    sigma * (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Servo command lead applied on top of the measured position (s).
pub const SERVO_LAG: f64 = 0.06;

/// Joint torques for a tip wrench plus cable friction and noise.
pub fn joint_torques(
    chain: &ChainParams,
    tool: &ToolModel,
    q: &[f64; NUM_JOINTS],
    q_dot: &[f64; NUM_JOINTS],
    tip_force_world: &Vector3<f64>,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> ([f64; NUM_JOINTS], [f64; NUM_JOINTS]) {
    let j = chain.jacobian(q);
    let mut w = SVector::<f64, 6>::zeros();
    w.fixed_rows_mut::<3>(0).copy_from(tip_force_world);
    let tau_w = j.transpose() * w;
    let mut tau = [0.0; NUM_JOINTS];
    let mut tau_des = [0.0; NUM_JOINTS];
    for i in 0..NUM_JOINTS {
        let coulomb = if q_dot[i].abs() > 1e-9 {
            tool.coulomb[i] * q_dot[i].signum()
        } else {
            0.0
        };
        let fric = coulomb + tool.viscous[i] * q_dot[i];
        tau[i] = tau_w[i] + fric + gauss(rng, noise.torque);
        tau_des[i] = tau_w[i] + gauss(rng, 0.25 * noise.torque);
    }
    (tau, tau_des)
}

/// Full state/label stream for one simulated clip.
pub fn synthesize_robot_state(
    chain: &ChainParams,
    tool: &ToolModel,
    traj: &Trajectory,
    contact: &[ContactTick],
    noise: &NoiseModel,
    rate_hz: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<RobotState>, Vec<[f64; 3]>)> {
    assert_eq!(traj.pos.len(), contact.len());
    let dt = 1.0 / rate_hz;
    let n = traj.pos.len();

    let mut qs: Vec<[f64; NUM_JOINTS]> = Vec::with_capacity(n);
    for tick in 0..n {
        let target = Vector3::from(traj.pos[tick]);
        qs.push(chain.ik(&target, &traj.wrist[tick], traj.jaw[tick], tick)?);
    }

    let mut states = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut prev_rot: Option<UnitQuaternion<f64>> = None;
    for tick in 0..n {
        let q = qs[tick];
        let mut q_dot = [0.0; NUM_JOINTS];
        if tick > 0 {
            for i in 0..NUM_JOINTS {
                q_dot[i] = (q[i] - qs[tick - 1][i]) / dt;
            }
        }
        let mut q_des = [0.0; NUM_JOINTS];
        for i in 0..NUM_JOINTS {
            q_des[i] = q[i] + SERVO_LAG * q_dot[i];
        }

        let pose = chain.fk(&q);
        let rot = pose.rotation;
        let p = pose.position;
        let v_world = if tick > 0 {
            (Vector3::from(traj.pos[tick]) - Vector3::from(traj.pos[tick - 1])) / dt
        } else {
            Vector3::zeros()
        };
        let w_world = match prev_rot {
            Some(prev) => {
                let dq = rot * prev.inverse();
                dq.scaled_axis() / dt
            }
            None => Vector3::zeros(),
        };
        prev_rot = Some(rot);

        // reaction of the tissue on the tool, expressed in the EE frame
        let f_tool_world = -Vector3::from(contact[tick].force);
        let f_ee = rot.inverse() * f_tool_world;
        let t_ee = Vector3::new(
            gauss(rng, noise.wrench_torque),
            gauss(rng, noise.wrench_torque),
            gauss(rng, noise.wrench_torque),
        );

        let (tau, tau_des) = joint_torques(chain, tool, &q, &q_dot, &f_tool_world, noise, rng);

        let quat = rot.quaternion();
        let v_ee = rot.inverse() * v_world;
        let w_ee = rot.inverse() * w_world;
        let kin = KinematicState {
            p: [p.x, p.y, p.z],
            o: [quat.i, quat.j, quat.k, quat.w],
            v: [v_ee.x, v_ee.y, v_ee.z],
            w: [w_ee.x, w_ee.y, w_ee.z],
            q,
            q_dot,
            q_des,
        };
        let force = ForceState {
            f: [
                f_ee.x + gauss(rng, noise.wrench_force),
                f_ee.y + gauss(rng, noise.wrench_force),
                f_ee.z + gauss(rng, noise.wrench_force),
            ],
            t: [t_ee.x, t_ee.y, t_ee.z],
            tau,
            tau_des,
        };
        states.push(RobotState { kin, force });
        labels.push(contact[tick].force);
    }
    Ok((states, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::contact::{simulate_contact, MaterialModel};
    use crate::sim::trajectory::{generate_trajectory, MotionKind};
    use rand::SeedableRng;

    fn make_clip(seed: u64, noise: NoiseModel) -> (Vec<RobotState>, Vec<[f64; 3]>) {
        let chain = ChainParams::default();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let traj = generate_trajectory(
            &[MotionKind::Palpate, MotionKind::Pull],
            5.0,
            30.0,
            0.0,
            (0.002, 0.008),
            &mut r,
        );
        let contact = simulate_contact(&traj, &MaterialModel::seen(), 0.0, 1.0 / 30.0);
        synthesize_robot_state(
            &chain,
            &ToolModel::cadiere(),
            &traj,
            &contact,
            &noise,
            30.0,
            &mut r,
        )
        .unwrap()
    }

    #[test]
    fn quaternions_stay_unit() {
        let (states, _) = make_clip(1, NoiseModel::nominal());
        for s in &states {
            let o = s.kin.o;
            let n = (o[0] * o[0] + o[1] * o[1] + o[2] * o[2] + o[3] * o[3]).sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_free_torques_invert_exactly() {
        // pinv(Jᵀ)·τ must recover the applied tip force when the cable
        // friction and noise channels are switched off
        let chain = ChainParams::default();
        let quiet = ToolModel {
            coulomb: [0.0; NUM_JOINTS],
            viscous: [0.0; NUM_JOINTS],
            ..ToolModel::cadiere()
        };
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let q = chain
            .ik(
                &Vector3::new(0.01, -0.01, -0.003),
                &[0.1, -0.2, 0.15],
                0.2,
                0,
            )
            .unwrap();
        let f = Vector3::new(0.8, -0.4, 2.5);
        let (tau, _) = joint_torques(
            &chain,
            &quiet,
            &q,
            &[0.0; NUM_JOINTS],
            &f,
            &NoiseModel::none(),
            &mut r,
        );
        let jt = chain.jacobian(&q).transpose();
        let pinv = jt.svd(true, true).pseudo_inverse(1e-12).unwrap();
        let w = pinv * SVector::<f64, 7>::from_row_slice(&tau);
        for i in 0..3 {
            assert!((w[i] - f[i]).abs() < 1e-9, "axis {i}: {} vs {}", w[i], f[i]);
        }
    }

    #[test]
    fn friction_corrupts_measured_torque_but_not_command() {
        let (states, _) = make_clip(3, NoiseModel::none());
        let mut gap = 0.0f64;
        for s in &states {
            for i in 0..NUM_JOINTS {
                gap = gap.max((s.force.tau[i] - s.force.tau_des[i]).abs());
            }
        }
        assert!(gap > 0.005, "cable friction never showed up: {gap}");
    }

    #[test]
    fn ee_force_reading_matches_label_when_noise_free() {
        let (states, labels) = make_clip(4, NoiseModel::none());
        for (s, lab) in states.iter().zip(&labels) {
            let o = s.kin.o;
            let rot =
                UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(o[3], o[0], o[1], o[2]));
            let back = rot * Vector3::from(s.force.f);
            for axis in 0..3 {
                assert!((back[axis] + lab[axis]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn desired_position_leads_motion() {
        let (states, _) = make_clip(5, NoiseModel::none());
        let mut lead = 0.0f64;
        for s in &states {
            for i in 0..NUM_JOINTS {
                let d = s.kin.q_des[i] - s.kin.q[i];
                lead = lead.max(d.abs());
                assert!((d - SERVO_LAG * s.kin.q_dot[i]).abs() < 1e-12);
            }
        }
        assert!(lead > 1e-4);
    }
}
