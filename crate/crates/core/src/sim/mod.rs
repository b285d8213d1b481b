//! Bench-top scene simulator: tool kinematics, tip trajectories, tissue
//! contact, robot-state synthesis, rendering, and dataset assembly.

pub mod contact;
pub mod dataset;
pub mod kinematics;
pub mod render;
pub mod state_synth;
pub mod trajectory;

pub use contact::{normal_force, simulate_contact, ContactTick, MaterialModel};
pub use dataset::{
    clip_seed, generate_clip, generate_dataset, load_split, split_plan, DatasetManifest,
    DatasetPreset, SceneCfg, SPLITS,
};
pub use kinematics::{ChainParams, Jacobian, TipPose};
pub use render::{render_frame, Camera, RenderScene, RenderSpec};
pub use state_synth::{joint_torques, synthesize_robot_state, NoiseModel, ToolModel};
pub use trajectory::{generate_trajectory, MotionKind, Trajectory, MAX_PALPATION_DEPTH};
