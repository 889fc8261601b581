//! Alignment and augmentation of multirate robot demonstrations.
//!
//! High-rate joint streams from a leader/follower pair are paired with
//! low-rate camera frames under three strategies (see [`Method`]). A
//! bilateral-control simulator in [`sim`] produces synthetic episodes and
//! [`io`] persists episodes and datasets in a checksummed columnar layout.

pub mod augment;
pub mod io;
pub mod model;
pub mod sim;

pub use augment::{
    augment, compute_ratio, evenness_report, make_offsets, slice_episode, AugmentError,
    CoverageReport,
};
pub use model::{
    clamp_index, frame_anchor_index, AlignedEpisode, AlignedStep, AugmentedDataset,
    DatasetManifest, Episode, FrameRecord, FrameStream, JointSample, Method, ModelError, OffsetSet,
    Provenance, RobotStream,
};
