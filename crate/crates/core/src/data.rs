//! Robot-state feature layout, force labels, normalization statistics, and
//! the feature-removal masks.
//!
//! The flattened state vector is frozen as
//! `[p(3), o(4), v(3), w(3), q(7), q_dot(7), q_des(7), f(3), t(3), tau(7), tau_des(7)]`
//! — kinematic block first (34 entries), force block second (20 entries).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const STATE_DIM: usize = 54;
pub const KINEMATIC_DIM: usize = 34;
pub const FORCE_DIM: usize = 20;
pub const NUM_JOINTS: usize = 7;

/// Index range of the desired-joint-position block inside the flat vector.
pub const Q_DES_RANGE: std::ops::Range<usize> = 27..34;

/// Scene configuration tag; the grid the networks are trained and tested on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum ConfigTag {
    C,
    L1,
    L2,
    L3,
    R1,
    R2,
    R3,
    Z1,
    Z2,
    Z3,
    UnseenMaterial,
    UnseenTool,
}

impl ConfigTag {
    pub const ALL: [ConfigTag; 12] = [
        ConfigTag::L3,
        ConfigTag::L2,
        ConfigTag::L1,
        ConfigTag::C,
        ConfigTag::R1,
        ConfigTag::R2,
        ConfigTag::R3,
        ConfigTag::Z1,
        ConfigTag::Z2,
        ConfigTag::Z3,
        ConfigTag::UnseenMaterial,
        ConfigTag::UnseenTool,
    ];

    /// The ten workspace/viewpoint configuration columns (unseen material
    /// and tool excluded).
    pub const CONFIGS: [ConfigTag; 10] = [
        ConfigTag::L3,
        ConfigTag::L2,
        ConfigTag::L1,
        ConfigTag::C,
        ConfigTag::R1,
        ConfigTag::R2,
        ConfigTag::R3,
        ConfigTag::Z1,
        ConfigTag::Z2,
        ConfigTag::Z3,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ConfigTag::C => "C",
            ConfigTag::L1 => "L1",
            ConfigTag::L2 => "L2",
            ConfigTag::L3 => "L3",
            ConfigTag::R1 => "R1",
            ConfigTag::R2 => "R2",
            ConfigTag::R3 => "R3",
            ConfigTag::Z1 => "Z1",
            ConfigTag::Z2 => "Z2",
            ConfigTag::Z3 => "Z3",
            ConfigTag::UnseenMaterial => "unseen_material",
            ConfigTag::UnseenTool => "unseen_tool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ConfigTag::ALL
            .iter()
            .find(|t| t.name() == s)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown config tag '{s}'")))
    }
}

/// Kinematic feature block: 34 numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    /// Cartesian world position (m).
    pub p: [f64; 3],
    /// World orientation quaternion (x, y, z, w).
    pub o: [f64; 4],
    /// Cartesian velocity, end-effector frame (m/s).
    pub v: [f64; 3],
    /// Angular velocity, end-effector frame (rad/s).
    pub w: [f64; 3],
    /// Joint positions (rad or m).
    pub q: [f64; NUM_JOINTS],
    /// Joint velocities.
    pub q_dot: [f64; NUM_JOINTS],
    /// Desired joint positions.
    pub q_des: [f64; NUM_JOINTS],
}

/// Force-torque feature block: 20 numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceState {
    /// Cartesian force, end-effector frame (N).
    pub f: [f64; 3],
    /// Torque, end-effector frame (N·m).
    pub t: [f64; 3],
    /// Joint torques (N·m).
    pub tau: [f64; NUM_JOINTS],
    /// Desired joint torques (N·m).
    pub tau_des: [f64; NUM_JOINTS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub kin: KinematicState,
    pub force: ForceState,
}

impl RobotState {
    pub fn zeros() -> Self {
        RobotState {
            kin: KinematicState {
                p: [0.0; 3],
                o: [0.0; 4],
                v: [0.0; 3],
                w: [0.0; 3],
                q: [0.0; NUM_JOINTS],
                q_dot: [0.0; NUM_JOINTS],
                q_des: [0.0; NUM_JOINTS],
            },
            force: ForceState {
                f: [0.0; 3],
                t: [0.0; 3],
                tau: [0.0; NUM_JOINTS],
                tau_des: [0.0; NUM_JOINTS],
            },
        }
    }
}

/// Ground-truth interaction force sample, sensor frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceSample {
    pub f_gt: [f64; 3],
    pub timestamp: f64,
}

pub fn flatten_state(s: &RobotState) -> [f64; STATE_DIM] {
    let mut out = [0.0; STATE_DIM];
    let mut i = 0;
    let mut push = |vals: &[f64]| {
        out[i..i + vals.len()].copy_from_slice(vals);
        i += vals.len();
    };
    push(&s.kin.p);
    push(&s.kin.o);
    push(&s.kin.v);
    push(&s.kin.w);
    push(&s.kin.q);
    push(&s.kin.q_dot);
    push(&s.kin.q_des);
    push(&s.force.f);
    push(&s.force.t);
    push(&s.force.tau);
    push(&s.force.tau_des);
    out
}

pub fn unflatten_state(x: &[f64; STATE_DIM]) -> RobotState {
    let mut s = RobotState::zeros();
    let mut i = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&x[i..i + dst.len()]);
        i += dst.len();
    };
    take(&mut s.kin.p);
    take(&mut s.kin.o);
    take(&mut s.kin.v);
    take(&mut s.kin.w);
    take(&mut s.kin.q);
    take(&mut s.kin.q_dot);
    take(&mut s.kin.q_des);
    take(&mut s.force.f);
    take(&mut s.force.t);
    take(&mut s.force.tau);
    take(&mut s.force.tau_des);
    s
}

/// Column names matching the flattening order exactly.
pub fn state_column_names() -> Vec<String> {
    let mut names = Vec::with_capacity(STATE_DIM);
    for a in ["p_x", "p_y", "p_z", "o_x", "o_y", "o_z", "o_w"] {
        names.push(a.to_string());
    }
    for a in ["v_x", "v_y", "v_z", "w_x", "w_y", "w_z"] {
        names.push(a.to_string());
    }
    for prefix in ["q", "q_dot", "q_des"] {
        for k in 1..=NUM_JOINTS {
            names.push(format!("{prefix}_{k}"));
        }
    }
    for a in ["f_x", "f_y", "f_z", "t_x", "t_y", "t_z"] {
        names.push(a.to_string());
    }
    for prefix in ["tau", "tau_des"] {
        for k in 1..=NUM_JOINTS {
            names.push(format!("{prefix}_{k}"));
        }
    }
    names
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureGroup {
    Kinematic,
    Force,
}

/// Explicit zeroed-index lists; the q_des overlap between the two masks is
/// deliberate and kept visible here.
pub fn removal_indices(group: FeatureGroup) -> Vec<usize> {
    match group {
        FeatureGroup::Kinematic => (0..KINEMATIC_DIM).collect(),
        FeatureGroup::Force => Q_DES_RANGE.chain(KINEMATIC_DIM..STATE_DIM).collect(),
    }
}

pub fn remove_features(x: &[f64; STATE_DIM], group: FeatureGroup) -> [f64; STATE_DIM] {
    let mut out = *x;
    for i in removal_indices(group) {
        out[i] = 0.0;
    }
    out
}

/// Per-element mean/std, computed over the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::Config("stats mean/std length mismatch".into()));
        }
        if std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("stats std must be positive".into()));
        }
        Ok(NormStats { mean, std })
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Population mean/std over rows; std floored at 1e-8 with a warning on
/// degenerate columns.
pub fn stats_from_rows<'a>(
    rows: impl Iterator<Item = &'a [f64]> + Clone,
    dim: usize,
) -> Result<NormStats> {
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    for row in rows.clone() {
        if row.len() != dim {
            return Err(Error::Shape(format!(
                "stats row length {} expected {dim}",
                row.len()
            )));
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("stats over empty split".into()));
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for row in rows {
        for (vv, (v, m)) in var.iter_mut().zip(row.iter().zip(&mean)) {
            let d = v - m;
            *vv += d * d;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = (v / n as f64).sqrt();
            if s < 1e-8 {
                eprintln!("warning: degenerate std at column {i}, flooring to 1e-8");
                1e-8
            } else {
                s
            }
        })
        .collect();
    NormStats::new(mean, std)
}

/// Time-aligned clip: frames on disk, states and labels in memory.
#[derive(Debug, Clone)]
pub struct Episode {
    pub config: ConfigTag,
    pub dir: PathBuf,
    pub states: Vec<RobotState>,
    pub labels: Vec<ForceSample>,
    pub timestamps: Vec<f64>,
    pub rate_hz: f64,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn frame_path(&self, tick: usize) -> PathBuf {
        self.dir.join("frames").join(format!("{tick:06}.png"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.len() != self.labels.len() || self.states.len() != self.timestamps.len() {
            return Err(Error::Shape(format!(
                "episode {}: {} states, {} labels, {} timestamps",
                self.dir.display(),
                self.states.len(),
                self.labels.len(),
                self.timestamps.len()
            )));
        }
        for w in self.timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Config(format!(
                    "episode {}: non-increasing timestamps",
                    self.dir.display()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeMeta {
    config: String,
    length: usize,
    frame_rate_hz: f64,
    state_rate_hz: f64,
}

/// Compute per-timestep state and label statistics over a training split.
pub fn compute_stats(train: &[Episode]) -> Result<(NormStats, NormStats)> {
    if train.is_empty() || train.iter().all(|e| e.is_empty()) {
        return Err(Error::Config("compute_stats: empty training split".into()));
    }
    let state_rows: Vec<Vec<f64>> = train
        .iter()
        .flat_map(|e| e.states.iter().map(|s| flatten_state(s).to_vec()))
        .collect();
    let label_rows: Vec<Vec<f64>> = train
        .iter()
        .flat_map(|e| e.labels.iter().map(|l| l.f_gt.to_vec()))
        .collect();
    let state_stats = stats_from_rows(state_rows.iter().map(|r| r.as_slice()), STATE_DIM)?;
    let label_stats = stats_from_rows(label_rows.iter().map(|r| r.as_slice()), 3)?;
    Ok((state_stats, label_stats))
}

/// Write an episode directory: `episode.json`, `states.csv`, `frames/`.
/// Frames are written separately by the renderer.
pub fn write_episode(dir: &Path, ep: &Episode) -> Result<()> {
    ep.validate()?;
    std::fs::create_dir_all(dir.join("frames")).map_err(|e| Error::io(dir, e))?;
    let meta = EpisodeMeta {
        config: ep.config.name().to_string(),
        length: ep.len(),
        frame_rate_hz: ep.rate_hz,
        state_rate_hz: ep.rate_hz,
    };
    let meta_path = dir.join("episode.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )
    .map_err(|e| Error::io(&meta_path, e))?;

    let csv_path = dir.join("states.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Other(e.to_string()))?;
    let mut header = vec!["t".to_string()];
    header.extend(state_column_names());
    header.extend(["fgt_x", "fgt_y", "fgt_z"].map(String::from));
    w.write_record(&header)
        .map_err(|e| Error::Other(e.to_string()))?;
    for i in 0..ep.len() {
        let mut row = vec![format!("{}", ep.timestamps[i])];
        for v in flatten_state(&ep.states[i]) {
            row.push(format!("{v}"));
        }
        for v in ep.labels[i].f_gt {
            row.push(format!("{v}"));
        }
        w.write_record(&row)
            .map_err(|e| Error::Other(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let meta_path = dir.join("episode.json");
    let meta: EpisodeMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?,
    )
    .map_err(|e| Error::Other(format!("{}: {e}", meta_path.display())))?;
    let config = ConfigTag::parse(&meta.config)?;
    let csv_path = dir.join("states.csv");
    let mut r = csv::Reader::from_path(&csv_path).map_err(|e| Error::Other(e.to_string()))?;
    let mut states = Vec::new();
    let mut labels = Vec::new();
    let mut timestamps = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Other(e.to_string()))?;
        if rec.len() != 1 + STATE_DIM + 3 {
            return Err(Error::Shape(format!(
                "{}: row has {} fields",
                csv_path.display(),
                rec.len()
            )));
        }
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::Other(format!("{}: {e}", csv_path.display())))
        };
        let t = parse(0)?;
        let mut flat = [0.0; STATE_DIM];
        for (i, slot) in flat.iter_mut().enumerate() {
            *slot = parse(1 + i)?;
        }
        let f_gt = [
            parse(1 + STATE_DIM)?,
            parse(2 + STATE_DIM)?,
            parse(3 + STATE_DIM)?,
        ];
        timestamps.push(t);
        states.push(unflatten_state(&flat));
        labels.push(ForceSample { f_gt, timestamp: t });
    }
    let ep = Episode {
        config,
        dir: dir.to_path_buf(),
        states,
        labels,
        timestamps,
        rate_hz: meta.frame_rate_hz,
    };
    ep.validate()?;
    Ok(ep)
}
