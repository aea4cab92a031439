//! Deterministic 2-D tabletop world: physics, rendering, scripted expert,
//! trajectory datasets and closed-loop evaluation.

mod dataset;
mod eval;
mod expert;
mod render;
mod world;

pub use dataset::{
    expert_episode, generate_datasets, DataCounts, DataOptions, DataPyramid, Dataset, Episode,
    Source, Step, ACTION_DIM, DATASET_MAGIC, DATASET_VERSION, OBS_BYTES, PROPRIO_DIM,
};
pub use eval::{
    append_eval_csv, eval_layouts, evaluate, evaluate_expert, ChunkPolicy, EvalResult, Observation,
    RandomPolicy,
};
pub use expert::scripted_expert;
pub use render::{in_effector_window, quantize, render, Sprite, EFFECTOR_EXTENT};
pub use world::{
    Difficulty, Goal, Gripper, LayoutRanges, Object, Shape, TaskSpec, WorldState, DISC_RADIUS,
    EASY_BACKGROUND, EASY_GOAL, EPISODE_STEPS, GOAL_RADIUS, GRASP_MARGIN, MAX_OBJECTS, MOVE_SCALE,
    ROBOT_TASKS, VOCAB, WEB_TASKS,
};
