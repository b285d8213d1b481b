//! Bench dataset generation: scene configuration per mounting condition,
//! clip synthesis, and the on-disk split layout.

use super::contact::{simulate_contact, MaterialModel};
use super::kinematics::ChainParams;
use super::render::{render_frame, RenderScene, RenderSpec};
use super::state_synth::{synthesize_robot_state, NoiseModel, ToolModel};
use super::trajectory::{generate_trajectory, MotionKind};
use crate::data::{write_episode, ConfigTag, Episode, ForceSample};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Everything the simulator needs to know about one mounting condition.
#[derive(Debug, Clone)]
pub struct SceneCfg {
    pub tag: ConfigTag,
    /// Lateral camera slide (m). Positive is to the robot's right.
    pub camera_offset_x: f64,
    /// Platform height change (m). Negative lowers the sample.
    pub platform_offset_z: f64,
    pub material: MaterialModel,
    pub tool: ToolModel,
    /// Palpation depth draw range (m).
    pub depth_range: (f64, f64),
}

impl SceneCfg {
    pub fn for_tag(tag: ConfigTag) -> Self {
        use ConfigTag::*;
        let camera_offset_x = match tag {
            R1 => 0.015,
            R2 => 0.030,
            R3 => 0.040,
            L1 => -0.015,
            L2 => -0.030,
            L3 => -0.040,
            _ => 0.0,
        };
        let platform_offset_z = match tag {
            Z1 => -0.00635,
            Z2 => -0.0127,
            Z3 => -0.01905,
            _ => 0.0,
        };
        let depth_range = match tag {
            Z1 | Z2 | Z3 => (0.004, 0.008),
            _ => (0.002, 0.008),
        };
        SceneCfg {
            tag,
            camera_offset_x,
            platform_offset_z,
            material: if tag == UnseenMaterial {
                MaterialModel::unseen()
            } else {
                MaterialModel::seen()
            },
            tool: if tag == UnseenTool {
                ToolModel::maryland()
            } else {
                ToolModel::cadiere()
            },
            depth_range,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetPreset {
    pub name: String,
    pub clip_seconds: f64,
    pub rate_hz: f64,
    pub render: RenderSpec,
}

impl DatasetPreset {
    pub fn paper() -> Self {
        DatasetPreset {
            name: "paper".into(),
            clip_seconds: 120.0,
            rate_hz: 30.0,
            render: RenderSpec::paper(),
        }
    }

    pub fn desk() -> Self {
        DatasetPreset {
            name: "desk".into(),
            clip_seconds: 5.0,
            rate_hz: 30.0,
            render: RenderSpec::desk(),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }

    pub fn ticks_per_clip(&self) -> usize {
        (self.clip_seconds * self.rate_hz).round() as usize
    }
}

pub const SPLITS: [&str; 4] = ["train", "val", "test_seen", "test_unseen"];

/// Clip counts per split, in on-disk order.
pub fn split_plan(split: &str) -> Result<Vec<(ConfigTag, usize)>> {
    use ConfigTag::*;
    match split {
        "train" => Ok(vec![(C, 4), (R2, 4), (L2, 4), (Z2, 2)]),
        "val" | "test_seen" => Ok(vec![(C, 2), (R2, 2), (L2, 2), (Z2, 1)]),
        "test_unseen" => Ok(vec![
            (R1, 2),
            (R3, 2),
            (L1, 2),
            (L3, 2),
            (UnseenMaterial, 2),
            (UnseenTool, 2),
            (Z1, 1),
            (Z3, 1),
        ]),
        other => Err(Error::Config(format!("unknown split '{other}'"))),
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn clip_seed(run_seed: u64, split: &str, tag: ConfigTag, idx: usize) -> u64 {
    run_seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(fnv1a(format!("{split}/{}/{idx}", tag.name()).as_bytes()))
}

/// Synthesize one clip and write its episode directory plus frames.
pub fn generate_clip(
    cfg: &SceneCfg,
    preset: &DatasetPreset,
    dir: &Path,
    seed: u64,
) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = ChainParams::default();
    let n_seg = (((preset.clip_seconds - 1.0) / 2.0).round() as usize).max(2);
    let kinds: Vec<MotionKind> = (0..n_seg)
        .map(|_| {
            if rng.gen_bool(0.5) {
                MotionKind::Palpate
            } else {
                MotionKind::Pull
            }
        })
        .collect();
    let z_surface = cfg.platform_offset_z;
    let traj = generate_trajectory(
        &kinds,
        preset.clip_seconds,
        preset.rate_hz,
        z_surface,
        cfg.depth_range,
        &mut rng,
    );
    let contact = simulate_contact(&traj, &cfg.material, z_surface, 1.0 / preset.rate_hz);
    let (states, labels) = synthesize_robot_state(
        &chain,
        &cfg.tool,
        &traj,
        &contact,
        &NoiseModel::nominal(),
        preset.rate_hz,
        &mut rng,
    )?;

    let dt = 1.0 / preset.rate_hz;
    let ep = Episode {
        config: cfg.tag,
        dir: dir.to_path_buf(),
        timestamps: (0..states.len()).map(|i| i as f64 * dt).collect(),
        labels: labels
            .iter()
            .enumerate()
            .map(|(i, f)| ForceSample {
                f_gt: *f,
                timestamp: i as f64 * dt,
            })
            .collect(),
        states,
        rate_hz: preset.rate_hz,
    };
    write_episode(dir, &ep)?;

    let scene = RenderScene {
        camera_offset_x: cfg.camera_offset_x,
        z_surface,
        material: &cfg.material,
        tool: &cfg.tool,
        rcm: chain.rcm,
    };
    for tick in 0..ep.len() {
        let q = ep.states[tick].kin.q;
        let pose = chain.fk(&q);
        let img = render_frame(
            &scene,
            &preset.render,
            &pose,
            contact[tick].delta,
            traj.jaw[tick],
        );
        img.save_png(&ep.frame_path(tick))?;
    }
    Ok(ep)
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub preset: DatasetPreset,
    pub splits: std::collections::BTreeMap<String, Vec<String>>,
}

/// Generate every split under `out`. Returns the manifest that was also
/// written to `out/manifest.json`.
pub fn generate_dataset(out: &Path, preset: &DatasetPreset, seed: u64) -> Result<DatasetManifest> {
    let mut manifest = DatasetManifest {
        seed,
        preset: preset.clone(),
        splits: Default::default(),
    };
    for split in SPLITS {
        let mut dirs = Vec::new();
        for (tag, count) in split_plan(split)? {
            for idx in 0..count {
                let rel = format!("{split}/{}_{idx}", tag.name());
                let dir = out.join(&rel);
                let cfg = SceneCfg::for_tag(tag);
                generate_clip(&cfg, preset, &dir, clip_seed(seed, split, tag, idx))?;
                dirs.push(rel);
            }
        }
        manifest.splits.insert(split.to_string(), dirs);
    }
    let path = out.join("manifest.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Read a split back, ordered by directory name.
pub fn load_split(out: &Path, split: &str) -> Result<Vec<Episode>> {
    let dir = out.join(split);
    if !dir.is_dir() {
        return Err(Error::io(
            &dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing split directory"),
        ));
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    subdirs
        .iter()
        .map(|d| crate::data::read_episode(d))
        .collect()
}
