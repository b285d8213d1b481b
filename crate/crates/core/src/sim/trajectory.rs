//! Keypoint trajectories for the tool tip. Segments interpolate between
//! keypoints with a quintic easing so position, velocity and acceleration
//! stay continuous across the whole clip.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionKind {
    Palpate,
    Pull,
}

/// Tip-space schedule for one clip, sampled at the control rate.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Tip position per tick, world frame (m).
    pub pos: Vec<[f64; 3]>,
    /// Wrist posture (q4, q5, q6) per tick.
    pub wrist: Vec<[f64; 3]>,
    /// Jaw opening per tick (rad).
    pub jaw: Vec<f64>,
    /// True while the jaws are closed on tissue.
    pub grasp: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
struct Keypoint {
    t: f64,
    pos: [f64; 3],
    jaw: f64,
    grasp: bool,
}

/// 10t^3 - 15t^4 + 6t^5: zero first and second derivative at both ends.
fn quintic(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
}

fn lerp3(a: &[f64; 3], b: &[f64; 3], s: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * s,
        a[1] + (b[1] - a[1]) * s,
        a[2] + (b[2] - a[2]) * s,
    ]
}

pub const MAX_PALPATION_DEPTH: f64 = 0.008;

/// Keypoints for one palpation or pull primitive starting from `from`.
/// `z_surface` is the tissue plane; depths indent below it.
fn motion_keypoints(
    kind: MotionKind,
    from: [f64; 3],
    t0: f64,
    duration: f64,
    z_surface: f64,
    depth_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<Keypoint> {
    let tx = rng.gen_range(-0.035..0.035);
    let ty = rng.gen_range(-0.022..0.022);
    let depth = rng
        .gen_range(depth_range.0..depth_range.1)
        .min(MAX_PALPATION_DEPTH);
    let hover = [tx, ty, z_surface + 0.015];
    let open = 0.5;
    match kind {
        MotionKind::Palpate => {
            let pressed = [tx, ty, z_surface - depth];
            vec![
                Keypoint {
                    t: t0,
                    pos: from,
                    jaw: open,
                    grasp: false,
                },
                Keypoint {
                    t: t0 + duration * 0.25,
                    pos: hover,
                    jaw: open,
                    grasp: false,
                },
                Keypoint {
                    t: t0 + duration * 0.55,
                    pos: pressed,
                    jaw: open,
                    grasp: false,
                },
                Keypoint {
                    t: t0 + duration * 0.75,
                    pos: pressed,
                    jaw: open,
                    grasp: false,
                },
                Keypoint {
                    t: t0 + duration,
                    pos: hover,
                    jaw: open,
                    grasp: false,
                },
            ]
        }
        MotionKind::Pull => {
            let pinch = [tx, ty, z_surface - 0.0015];
            let lift = [
                tx + rng.gen_range(-0.012..0.012),
                ty + rng.gen_range(-0.012..0.012),
                z_surface + rng.gen_range(0.006..0.014),
            ];
            let closed = 0.04;
            vec![
                Keypoint {
                    t: t0,
                    pos: from,
                    jaw: open,
                    grasp: false,
                },
                Keypoint {
                    t: t0 + duration * 0.2,
                    pos: pinch,
                    jaw: open,
                    grasp: false,
                },
                Keypoint {
                    t: t0 + duration * 0.3,
                    pos: pinch,
                    jaw: closed,
                    grasp: true,
                },
                Keypoint {
                    t: t0 + duration * 0.55,
                    pos: lift,
                    jaw: closed,
                    grasp: true,
                },
                Keypoint {
                    t: t0 + duration * 0.75,
                    pos: pinch,
                    jaw: closed,
                    grasp: true,
                },
                Keypoint {
                    t: t0 + duration * 0.85,
                    pos: pinch,
                    jaw: open,
                    grasp: false,
                },
                Keypoint {
                    t: t0 + duration,
                    pos: hover,
                    jaw: open,
                    grasp: false,
                },
            ]
        }
    }
}

/// Sample a full clip: a free-space settling phase followed by alternating
/// contact primitives, at `rate_hz` for `seconds`.
pub fn generate_trajectory(
    kinds: &[MotionKind],
    seconds: f64,
    rate_hz: f64,
    z_surface: f64,
    depth_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Trajectory {
    let start = [
        rng.gen_range(-0.02..0.02),
        rng.gen_range(-0.015..0.015),
        z_surface + rng.gen_range(0.018..0.028),
    ];
    let drift = [
        start[0] + rng.gen_range(-0.008..0.008),
        start[1] + rng.gen_range(-0.008..0.008),
        start[2] + rng.gen_range(-0.004..0.004),
    ];
    let free = 1.0;
    let mut keys = vec![
        Keypoint {
            t: 0.0,
            pos: start,
            jaw: 0.5,
            grasp: false,
        },
        Keypoint {
            t: free,
            pos: drift,
            jaw: 0.5,
            grasp: false,
        },
    ];
    let per = (seconds - free) / kinds.len().max(1) as f64;
    let mut t0 = free;
    for kind in kinds {
        let from = keys.last().unwrap().pos;
        let mut seg = motion_keypoints(*kind, from, t0, per, z_surface, depth_range, rng);
        seg.remove(0); // the previous keypoint already covers the start
        keys.extend(seg);
        t0 += per;
    }

    let n = (seconds * rate_hz).round() as usize;
    let dt = 1.0 / rate_hz;
    let mut out = Trajectory {
        pos: Vec::with_capacity(n),
        wrist: Vec::with_capacity(n),
        jaw: Vec::with_capacity(n),
        grasp: Vec::with_capacity(n),
    };
    // slow wrist weave so joint 4..6 traces are informative but smooth
    let wp: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let mut seg_i = 0usize;
    for tick in 0..n {
        let t = tick as f64 * dt;
        while seg_i + 2 < keys.len() && t >= keys[seg_i + 1].t {
            seg_i += 1;
        }
        let (a, b) = (&keys[seg_i], &keys[seg_i + 1]);
        let span = (b.t - a.t).max(1e-9);
        let s = quintic((t - a.t) / span);
        out.pos.push(lerp3(&a.pos, &b.pos, s));
        // small operator jitter keeps the jaw joint exercised everywhere
        out.jaw
            .push(a.jaw + (b.jaw - a.jaw) * s + 0.03 * (1.3 * t + wp[5] * 3.0).sin());
        out.grasp.push(if s < 0.5 { a.grasp } else { b.grasp });
        out.wrist.push([
            0.35 * wp[0] * (0.7 * t + wp[1] * 2.0).sin(),
            0.25 * wp[2] * (0.9 * t + wp[3] * 2.0).sin(),
            0.25 * wp[4] * (0.6 * t + wp[5] * 2.0).sin(),
        ]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn clip(kinds: &[MotionKind], seed: u64) -> Trajectory {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        generate_trajectory(kinds, 5.0, 30.0, 0.0, (0.002, 0.008), &mut r)
    }

    #[test]
    fn length_and_free_space_lead_in() {
        let t = clip(&[MotionKind::Palpate, MotionKind::Pull], 1);
        assert_eq!(t.pos.len(), 150);
        for tick in 0..30 {
            assert!(
                t.pos[tick][2] > 0.005,
                "tick {tick} should be in free space"
            );
            assert!(!t.grasp[tick]);
        }
    }

    #[test]
    fn palpation_depth_capped() {
        for seed in 0..20 {
            let t = clip(&[MotionKind::Palpate, MotionKind::Palpate], seed);
            let min_z = t.pos.iter().map(|p| p[2]).fold(f64::INFINITY, f64::min);
            assert!(-min_z <= MAX_PALPATION_DEPTH + 1e-9, "seed {seed}: {min_z}");
            assert!(-min_z > 0.001, "seed {seed}: no indentation reached");
        }
    }

    #[test]
    fn pull_lifts_tissue_while_grasped() {
        let t = clip(&[MotionKind::Pull], 7);
        let lifted = t.pos.iter().zip(&t.grasp).any(|(p, g)| *g && p[2] > 0.003);
        assert!(lifted);
    }

    #[test]
    fn velocity_and_acceleration_are_continuous() {
        let t = clip(&[MotionKind::Palpate, MotionKind::Pull], 3);
        let dt = 1.0 / 30.0;
        let v: Vec<f64> = t
            .pos
            .windows(2)
            .map(|w| {
                ((w[1][0] - w[0][0]).powi(2)
                    + (w[1][1] - w[0][1]).powi(2)
                    + (w[1][2] - w[0][2]).powi(2))
                .sqrt()
                    / dt
            })
            .collect();
        for w in v.windows(2) {
            assert!((w[1] - w[0]).abs() < 0.5, "speed jump {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = clip(&[MotionKind::Pull, MotionKind::Palpate], 11);
        let b = clip(&[MotionKind::Pull, MotionKind::Palpate], 11);
        assert_eq!(a.pos, b.pos);
        assert_eq!(a.jaw, b.jaw);
    }
}
