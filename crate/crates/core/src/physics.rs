//! Model-based force estimation from joint torques: fit a per-joint
//! friction/offset model on free-space motion, subtract it, and map the
//! residual torques through the manipulator Jacobian.

use crate::data::{Episode, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::sim::ChainParams;
use nalgebra::{Matrix3, SVector, Vector3};

/// Per-joint τ ≈ g + c·sign(q̇) + d·q̇ friction/offset model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrictionFit {
    pub offset: [f64; NUM_JOINTS],
    pub coulomb: [f64; NUM_JOINTS],
    pub viscous: [f64; NUM_JOINTS],
}

fn sgn(v: f64) -> f64 {
    if v.abs() > 1e-9 {
        v.signum()
    } else {
        0.0
    }
}

/// Least-squares fit over samples believed to be contact-free. Errors
/// with the offending joint list if any joint's normal equations are
/// singular (for example a joint that never moved).
pub fn fit_friction(
    samples: &[([f64; NUM_JOINTS], [f64; NUM_JOINTS])], // (q_dot, tau)
    _chain: &ChainParams,
) -> Result<FrictionFit> {
    if samples.is_empty() {
        return Err(Error::Config(
            "friction fit: no contact-free samples".into(),
        ));
    }
    let mut fit = FrictionFit {
        offset: [0.0; NUM_JOINTS],
        coulomb: [0.0; NUM_JOINTS],
        viscous: [0.0; NUM_JOINTS],
    };
    let mut bad = Vec::new();
    for j in 0..NUM_JOINTS {
        // regressors: [1, sign(q̇), q̇]
        let mut ata = Matrix3::<f64>::zeros();
        let mut atb = Vector3::<f64>::zeros();
        for (q_dot, tau) in samples {
            let r = Vector3::new(1.0, sgn(q_dot[j]), q_dot[j]);
            ata += r * r.transpose();
            atb += r * tau[j];
        }
        match ata.lu().solve(&atb) {
            Some(x) if ata.determinant().abs() > 1e-12 => {
                fit.offset[j] = x.x;
                fit.coulomb[j] = x.y;
                fit.viscous[j] = x.z;
            }
            _ => bad.push(j),
        }
    }
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }
    Ok(fit)
}

impl FrictionFit {
    pub fn predict(&self, q_dot: &[f64; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
        std::array::from_fn(|j| {
            self.offset[j] + self.coulomb[j] * sgn(q_dot[j]) + self.viscous[j] * q_dot[j]
        })
    }
}

/// Second-order low-pass biquad (Butterworth via bilinear transform).
#[derive(Debug, Clone)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl Biquad {
    pub fn lowpass(cutoff_hz: f64, sample_hz: f64) -> Result<Self> {
        if !(cutoff_hz > 0.0 && cutoff_hz < sample_hz / 2.0) {
            return Err(Error::Config(format!(
                "cutoff {cutoff_hz} Hz outside (0, {}) for fs {sample_hz}",
                sample_hz / 2.0
            )));
        }
        let k = (std::f64::consts::PI * cutoff_hz / sample_hz).tan();
        let q = std::f64::consts::FRAC_1_SQRT_2;
        let norm = 1.0 / (1.0 + k / q + k * k);
        Ok(Biquad {
            b: [k * k * norm, 2.0 * k * k * norm, k * k * norm],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
            x: [0.0; 2],
            y: [0.0; 2],
        })
    }

    pub fn step(&mut self, input: f64) -> f64 {
        let out = self.b[0] * input + self.b[1] * self.x[0] + self.b[2] * self.x[1]
            - self.a[0] * self.y[0]
            - self.a[1] * self.y[1];
        self.x = [input, self.x[0]];
        self.y = [out, self.y[0]];
        out
    }
}

/// Condition-number threshold above which a tick's estimate is flagged.
pub const CONDITION_LIMIT: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct PhysicsEstimate {
    pub force: [f64; 3],
    /// True when the Jacobian was too ill-conditioned to trust this tick.
    pub ill_conditioned: bool,
}

#[derive(Debug, Clone)]
pub struct PhysicsBaseline {
    pub chain: ChainParams,
    pub fit: FrictionFit,
    /// Optional 3 Hz output smoothing; disabled keeps the raw estimate.
    pub filter_cutoff_hz: Option<f64>,
}

impl PhysicsBaseline {
    /// Fit the friction model on one or more episodes, using ticks whose
    /// label magnitude is below `free_eps` as contact-free motion.
    pub fn fit(chain: ChainParams, episodes: &[Episode], free_eps: f64) -> Result<Self> {
        let mut samples = Vec::new();
        for ep in episodes {
            for (s, l) in ep.states.iter().zip(&ep.labels) {
                let mag = (l.f_gt[0].powi(2) + l.f_gt[1].powi(2) + l.f_gt[2].powi(2)).sqrt();
                if mag < free_eps {
                    samples.push((s.kin.q_dot, s.force.tau));
                }
            }
        }
        let fit = fit_friction(&samples, &chain)?;
        Ok(PhysicsBaseline {
            chain,
            fit,
            filter_cutoff_hz: None,
        })
    }

    /// Estimate the sensor force for every tick of an episode. Reads only
    /// the state stream, never the frames.
    pub fn estimate(&self, ep: &Episode) -> Result<Vec<PhysicsEstimate>> {
        let mut filters = match self.filter_cutoff_hz {
            Some(hz) => Some([
                Biquad::lowpass(hz, ep.rate_hz)?,
                Biquad::lowpass(hz, ep.rate_hz)?,
                Biquad::lowpass(hz, ep.rate_hz)?,
            ]),
            None => None,
        };
        let mut out = Vec::with_capacity(ep.len());
        for s in &ep.states {
            let friction = self.fit.predict(&s.kin.q_dot);
            let mut tau_ext = SVector::<f64, 7>::zeros();
            for j in 0..NUM_JOINTS {
                tau_ext[j] = s.force.tau[j] - friction[j];
            }
            let jt = self.chain.jacobian(&s.kin.q).transpose();
            let svd = jt.svd(true, true);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            let ill_conditioned = smin <= 0.0 || smax / smin > CONDITION_LIMIT;
            let pinv = svd
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::Other(format!("jacobian pseudo-inverse: {e}")))?;
            let w = pinv * tau_ext;
            // wrench on the tool; the sensor under the tissue reads the
            // reaction
            let mut force = [-w[0], -w[1], -w[2]];
            if let Some(fs) = &mut filters {
                for axis in 0..3 {
                    force[axis] = fs[axis].step(force[axis]);
                }
            }
            out.push(PhysicsEstimate {
                force,
                ill_conditioned,
            });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ConfigTag, ForceSample};
    use crate::sim::{
        generate_trajectory, simulate_contact, synthesize_robot_state, MaterialModel, MotionKind,
        NoiseModel, ToolModel,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ideal_episode(seed: u64) -> Episode {
        // frictionless, noise-free clip
        let chain = ChainParams::default();
        let quiet = ToolModel {
            coulomb: [0.0; NUM_JOINTS],
            viscous: [0.0; NUM_JOINTS],
            ..ToolModel::cadiere()
        };
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
        let (states, labels) = synthesize_robot_state(
            &chain,
            &quiet,
            &traj,
            &contact,
            &NoiseModel::none(),
            30.0,
            &mut r,
        )
        .unwrap();
        Episode {
            config: ConfigTag::C,
            dir: "ideal".into(),
            timestamps: (0..states.len()).map(|i| i as f64 / 30.0).collect(),
            labels: labels
                .iter()
                .enumerate()
                .map(|(i, f)| ForceSample {
                    f_gt: *f,
                    timestamp: i as f64 / 30.0,
                })
                .collect(),
            states,
            rate_hz: 30.0,
        }
    }

    #[test]
    fn ideal_loop_recovers_labels() {
        let ep = ideal_episode(3);
        let base = PhysicsBaseline::fit(ChainParams::default(), &[ep.clone()], 1e-9).unwrap();
        let est = base.estimate(&ep).unwrap();
        let mut se = 0.0;
        for (e, l) in est.iter().zip(&ep.labels) {
            for axis in 0..3 {
                se += (e.force[axis] - l.f_gt[axis]).powi(2);
            }
            assert!(!e.ill_conditioned);
        }
        let rmse = (se / (3.0 * ep.len() as f64)).sqrt();
        assert!(rmse < 1e-6, "rmse {rmse}");
    }

    #[test]
    fn friction_fit_recovers_known_coefficients() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let truth = FrictionFit {
            offset: [0.01, -0.02, 0.1, 0.0, 0.005, -0.004, 0.002],
            coulomb: [0.05, 0.04, 0.9, 0.012, 0.008, 0.007, 0.003],
            viscous: [0.03, 0.025, 0.5, 0.01, 0.006, 0.005, 0.002],
        };
        let mut samples = Vec::new();
        for _ in 0..500 {
            let q_dot: [f64; NUM_JOINTS] = std::array::from_fn(|_| r.gen_range(-0.8..0.8));
            let tau = truth.predict(&q_dot);
            samples.push((q_dot, tau));
        }
        let fit = fit_friction(&samples, &ChainParams::default()).unwrap();
        for j in 0..NUM_JOINTS {
            assert!((fit.offset[j] - truth.offset[j]).abs() < 1e-9);
            assert!((fit.coulomb[j] - truth.coulomb[j]).abs() < 1e-9);
            assert!((fit.viscous[j] - truth.viscous[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn motionless_joint_is_reported() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut samples = Vec::new();
        for _ in 0..100 {
            let mut q_dot: [f64; NUM_JOINTS] = std::array::from_fn(|_| r.gen_range(-0.5..0.5));
            q_dot[2] = 0.0; // insertion never moves
            q_dot[5] = 0.0;
            samples.push((q_dot, [0.1; NUM_JOINTS]));
        }
        match fit_friction(&samples, &ChainParams::default()) {
            Err(Error::RankDeficient(joints)) => assert_eq!(joints, vec![2, 5]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn estimator_never_reads_frames() {
        // episode with no frames directory at all must still evaluate
        let ep = ideal_episode(7);
        assert!(!ep.dir.join("frames").exists());
        let base = PhysicsBaseline::fit(ChainParams::default(), &[ep.clone()], 1e-9).unwrap();
        assert!(base.estimate(&ep).is_ok());
    }

    #[test]
    fn butterworth_dc_and_stopband() {
        let mut f = Biquad::lowpass(3.0, 30.0).unwrap();
        let mut last = 0.0;
        for _ in 0..200 {
            last = f.step(1.0);
        }
        assert!((last - 1.0).abs() < 1e-6, "unit DC gain, got {last}");

        // 12 Hz tone at fs=30 must be strongly attenuated
        let mut f = Biquad::lowpass(3.0, 30.0).unwrap();
        let mut peak: f64 = 0.0;
        for n in 0..300 {
            let x = (2.0 * std::f64::consts::PI * 12.0 * n as f64 / 30.0).sin();
            let y = f.step(x);
            if n > 100 {
                peak = peak.max(y.abs());
            }
        }
        assert!(peak < 0.1, "stopband leak {peak}");

        // roughly -3 dB at the cutoff
        let mut f = Biquad::lowpass(3.0, 30.0).unwrap();
        let mut peak: f64 = 0.0;
        for n in 0..600 {
            let x = (2.0 * std::f64::consts::PI * 3.0 * n as f64 / 30.0).sin();
            let y = f.step(x);
            if n > 300 {
                peak = peak.max(y.abs());
            }
        }
        assert!(
            (peak - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.05,
            "cutoff gain {peak}"
        );

        assert!(Biquad::lowpass(20.0, 30.0).is_err());
    }

    #[test]
    fn smoothing_changes_output_only_when_enabled() {
        let ep = ideal_episode(9);
        let mut base = PhysicsBaseline::fit(ChainParams::default(), &[ep.clone()], 1e-9).unwrap();
        let raw = base.estimate(&ep).unwrap();
        base.filter_cutoff_hz = Some(3.0);
        let smooth = base.estimate(&ep).unwrap();
        let diff: f64 = raw
            .iter()
            .zip(&smooth)
            .map(|(a, b)| (a.force[2] - b.force[2]).abs())
            .fold(0.0, f64::max);
        assert!(diff > 1e-3, "filter had no effect");
    }
}
