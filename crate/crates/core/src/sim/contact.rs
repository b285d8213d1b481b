//! Spring-damper tissue contact. Forces are reported as the load on the
//! platform sensor under the tissue, world frame, z up.

use super::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MaterialModel {
    pub name: String,
    /// Normal stiffness (N/m).
    pub stiffness: f64,
    /// Normal damping (N·s/m).
    pub damping: f64,
    /// Tangential friction ratio against the normal load.
    pub friction: f64,
    /// Tether stiffness while grasped (N/m).
    pub grasp_stiffness: f64,
    /// Surface colour, sRGB.
    pub color: [u8; 3],
}

impl MaterialModel {
    pub fn seen() -> Self {
        MaterialModel {
            name: "silicone".into(),
            stiffness: 600.0,
            damping: 9.0,
            friction: 0.35,
            grasp_stiffness: 220.0,
            color: [226, 178, 166],
        }
    }

    /// Stiffer, dyed sample held out of every training split.
    pub fn unseen() -> Self {
        MaterialModel {
            name: "silicone-stiff".into(),
            stiffness: 1800.0,
            damping: 16.0,
            friction: 0.35,
            grasp_stiffness: 520.0,
            color: [196, 62, 58],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ContactTick {
    /// Indentation below the surface (m), negative in free space.
    pub delta: f64,
    /// Ground-truth force on the sensor (N).
    pub force: [f64; 3],
    pub in_contact: bool,
}

pub const FORCE_CAP: f64 = 10.0;

/// Quasi-static contact force for an indentation and rate.
pub fn normal_force(material: &MaterialModel, delta: f64, delta_dot: f64) -> f64 {
    if delta <= 0.0 {
        0.0
    } else {
        (material.stiffness * delta + material.damping * delta_dot).max(0.0)
    }
}

/// Roll the trajectory through the contact model. `z_surface` is the
/// resting tissue plane.
pub fn simulate_contact(
    traj: &Trajectory,
    material: &MaterialModel,
    z_surface: f64,
    dt: f64,
) -> Vec<ContactTick> {
    let mut out = Vec::with_capacity(traj.pos.len());
    let mut anchor: Option<[f64; 3]> = None;
    for (i, p) in traj.pos.iter().enumerate() {
        let delta = z_surface - p[2];
        let prev = if i == 0 { p } else { &traj.pos[i - 1] };
        let delta_dot = if i == 0 { 0.0 } else { (prev[2] - p[2]) / dt };
        let grasped = traj.grasp[i];
        if grasped && anchor.is_none() {
            anchor = Some(*p);
        }
        if !grasped {
            anchor = None;
        }

        let mut f = [0.0; 3];
        let mut in_contact = false;
        if delta > 0.0 {
            in_contact = true;
            let n = normal_force(material, delta, delta_dot);
            // tool pushes the sensor down; sliding drags the surface along
            let vx = (p[0] - prev[0]) / dt.max(1e-9);
            let vy = (p[1] - prev[1]) / dt.max(1e-9);
            let sp = (vx * vx + vy * vy).sqrt();
            if sp > 1e-6 {
                f[0] += material.friction * n * vx / sp;
                f[1] += material.friction * n * vy / sp;
            }
            f[2] -= n;
        }
        if let Some(a) = anchor {
            // grasped tissue acts as a spring back to the grab point
            let k = material.grasp_stiffness;
            f[0] += k * (p[0] - a[0]);
            f[1] += k * (p[1] - a[1]);
            f[2] += k * (p[2] - a[2]).max(0.0);
            in_contact = true;
        }

        let mag = (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt();
        if mag > FORCE_CAP {
            let s = FORCE_CAP / mag;
            for c in &mut f {
                *c *= s;
            }
        }
        out.push(ContactTick {
            delta,
            force: f,
            in_contact,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::trajectory::{generate_trajectory, MotionKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn static_indentation_is_hookean() {
        // 2 mm at 500 N/m must read exactly 1.0 N
        let m = MaterialModel {
            stiffness: 500.0,
            ..MaterialModel::seen()
        };
        let n = normal_force(&m, 0.002, 0.0);
        assert_eq!(n, 1.0);
    }

    #[test]
    fn no_force_in_free_space() {
        let m = MaterialModel::seen();
        assert_eq!(normal_force(&m, -0.004, 0.1), 0.0);
        assert_eq!(normal_force(&m, 0.0, 0.5), 0.0);
    }

    #[test]
    fn damping_adds_on_approach_only() {
        let m = MaterialModel::seen();
        let still = normal_force(&m, 0.003, 0.0);
        let moving = normal_force(&m, 0.003, 0.02);
        assert!(moving > still);
    }

    #[test]
    fn unseen_material_is_stiffer() {
        let a = MaterialModel::seen();
        let b = MaterialModel::unseen();
        assert!(b.stiffness / a.stiffness >= 2.5);
        assert_ne!(a.color, b.color);
    }

    #[test]
    fn force_magnitude_capped() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let t = generate_trajectory(
            &[MotionKind::Palpate, MotionKind::Pull],
            5.0,
            30.0,
            0.0,
            (0.004, 0.008),
            &mut r,
        );
        let ticks = simulate_contact(&t, &MaterialModel::unseen(), 0.0, 1.0 / 30.0);
        for c in &ticks {
            let mag = (c.force[0].powi(2) + c.force[1].powi(2) + c.force[2].powi(2)).sqrt();
            assert!(mag <= FORCE_CAP + 1e-9);
        }
    }

    #[test]
    fn clip_produces_three_axis_signal() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let t = generate_trajectory(
            &[MotionKind::Pull, MotionKind::Palpate],
            5.0,
            30.0,
            0.0,
            (0.002, 0.008),
            &mut r,
        );
        let ticks = simulate_contact(&t, &MaterialModel::seen(), 0.0, 1.0 / 30.0);
        for axis in 0..3 {
            let peak = ticks
                .iter()
                .map(|c| c.force[axis].abs())
                .fold(0.0, f64::max);
            assert!(peak > 0.01, "axis {axis} stayed flat");
        }
        assert!(ticks.iter().take(25).all(|c| !c.in_contact));
    }
}
