//! Synthetic wheelchair navigation: unicycle kinematics in three wall
//! maps, a ray-cast rangefinder, scripted behaviour modes, the window
//! labelling routine and the on-disk dataset.

pub mod dataset;
pub mod episode;
pub mod geometry;
pub mod labels;

pub use dataset::{generate_dataset, window_dataset, Dataset, DatasetConfig, Frames, NormStats, SequenceBatch};
pub use episode::{generate_episode, BehaviourMode, Episode, EpisodeConfig};
pub use geometry::{raycast, unicycle_step, Pose, WorldMap};
pub use labels::{label_window, threat_score, Manoeuvre, WindowLabel};
