//! Shared domain types for multirate demonstration data.
//!
//! A demonstration is recorded as two high-rate robot streams (leader and
//! follower) plus one or more low-rate camera streams. Timestamps are implicit:
//! sample `k` of a stream with rate `r` sits at `k / r` seconds, and camera
//! frame `k` is synchronized with robot sample `k * R` where `R` is the integer
//! ratio of the two rates.
//!
//! All types validate on construction and are immutable afterwards.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Violations of the structural invariants of streams and episodes.
#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("rate must be a positive integer")]
    ZeroRate,

    #[error("stream must have at least one joint")]
    ZeroJoints,

    #[error("stream must contain at least one sample")]
    EmptyStream,

    #[error("sample {index} has {found} joint entries, expected {expected}")]
    JointCountMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in sample {index}, joint {joint}")]
    NonFinite { index: usize, joint: usize },

    #[error("frame stream '{camera}' is empty")]
    EmptyFrameStream { camera: String },

    #[error("frame stream '{camera}' has seq {found} at position {position}")]
    NonContiguousSeq {
        camera: String,
        position: usize,
        found: u64,
    },

    #[error("camera id must be non-empty")]
    EmptyCameraId,

    #[error("duplicate camera id '{0}'")]
    DuplicateCamera(String),

    #[error("episode id must be non-empty")]
    EmptyEpisodeId,

    #[error("leader and follower disagree on {what}: {leader} vs {follower}")]
    LeaderFollowerMismatch {
        what: &'static str,
        leader: usize,
        follower: usize,
    },

    #[error("episode has no frame streams")]
    NoFrameStreams,

    #[error("frame streams disagree on {what}: {expected} vs {found} ('{camera}')")]
    FrameStreamMismatch {
        what: &'static str,
        camera: String,
        expected: usize,
        found: usize,
    },

    #[error("robot rate {robot_hz} Hz is not an integer multiple of frame rate {frame_hz} Hz")]
    NonIntegerRatio { robot_hz: u32, frame_hz: u32 },

    #[error(
        "{frames} frames at ratio {ratio} need at least {needed} robot samples, found {found}"
    )]
    TooFewSamples {
        frames: usize,
        ratio: usize,
        needed: usize,
        found: usize,
    },

    #[error("aligned step {index} has {found} values, expected {expected}")]
    StepWidthMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },

    #[error("dataset: {0}")]
    Dataset(String),
}

/// One joint's state at one high-rate tick.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct JointSample {
    /// rad
    pub angle: f64,
    /// rad/s
    pub velocity: f64,
    /// N·m
    pub torque: f64,
}

impl JointSample {
    pub const fn new(angle: f64, velocity: f64, torque: f64) -> Self {
        Self {
            angle,
            velocity,
            torque,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.angle.is_finite() && self.velocity.is_finite() && self.torque.is_finite()
    }
}

/// A fixed-rate stream of `J`-joint samples, stored tick-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotStream {
    rate_hz: u32,
    joints: usize,
    samples: Vec<JointSample>,
}

impl RobotStream {
    /// Builds a stream from per-tick joint vectors.
    pub fn new(rate_hz: u32, ticks: Vec<Vec<JointSample>>) -> Result<Self, ModelError> {
        let joints = ticks.first().map(Vec::len).ok_or(ModelError::EmptyStream)?;
        let mut samples = Vec::with_capacity(joints * ticks.len());
        for (index, tick) in ticks.into_iter().enumerate() {
            if tick.len() != joints {
                return Err(ModelError::JointCountMismatch {
                    index,
                    expected: joints,
                    found: tick.len(),
                });
            }
            samples.extend(tick);
        }
        Self::from_flat(rate_hz, joints, samples)
    }

    /// Builds a stream from a flat tick-major buffer of `T * joints` samples.
    pub fn from_flat(
        rate_hz: u32,
        joints: usize,
        samples: Vec<JointSample>,
    ) -> Result<Self, ModelError> {
        if rate_hz == 0 {
            return Err(ModelError::ZeroRate);
        }
        if joints == 0 {
            return Err(ModelError::ZeroJoints);
        }
        if samples.is_empty() {
            return Err(ModelError::EmptyStream);
        }
        if !samples.len().is_multiple_of(joints) {
            return Err(ModelError::JointCountMismatch {
                index: samples.len() / joints,
                expected: joints,
                found: samples.len() % joints,
            });
        }
        if let Some(pos) = samples.iter().position(|s| !s.is_finite()) {
            return Err(ModelError::NonFinite {
                index: pos / joints,
                joint: pos % joints,
            });
        }
        Ok(Self {
            rate_hz,
            joints,
            samples,
        })
    }

    pub fn rate_hz(&self) -> u32 {
        self.rate_hz
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Number of ticks `T`.
    pub fn len(&self) -> usize {
        self.samples.len() / self.joints
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Joint vector at tick `index`. Panics if out of range.
    pub fn tick(&self, index: usize) -> &[JointSample] {
        &self.samples[index * self.joints..(index + 1) * self.joints]
    }

    pub fn ticks(&self) -> impl ExactSizeIterator<Item = &[JointSample]> {
        self.samples.chunks_exact(self.joints)
    }

    pub fn as_flat(&self) -> &[JointSample] {
        &self.samples
    }

    /// Flattens tick `index` joint-major: `[θ0, θ̇0, τ0, θ1, θ̇1, τ1, …]`.
    pub fn state_vector(&self, index: usize) -> Vec<f64> {
        self.tick(index)
            .iter()
            .flat_map(|s| [s.angle, s.velocity, s.torque])
            .collect()
    }
}

/// Opaque camera frame. `payload` stands in for image bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub seq: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStream {
    rate_hz: u32,
    camera_id: String,
    frames: Vec<FrameRecord>,
}

impl FrameStream {
    pub fn new(
        rate_hz: u32,
        camera_id: impl Into<String>,
        frames: Vec<FrameRecord>,
    ) -> Result<Self, ModelError> {
        let camera_id = camera_id.into();
        if rate_hz == 0 {
            return Err(ModelError::ZeroRate);
        }
        if camera_id.is_empty() {
            return Err(ModelError::EmptyCameraId);
        }
        if frames.is_empty() {
            return Err(ModelError::EmptyFrameStream { camera: camera_id });
        }
        if let Some((position, frame)) = frames.iter().enumerate().find(|(i, f)| f.seq != *i as u64)
        {
            return Err(ModelError::NonContiguousSeq {
                camera: camera_id,
                position,
                found: frame.seq,
            });
        }
        Ok(Self {
            rate_hz,
            camera_id,
            frames,
        })
    }

    /// Frames with sequential seqs and the given payloads.
    pub fn from_payloads(
        rate_hz: u32,
        camera_id: impl Into<String>,
        payloads: impl IntoIterator<Item = Vec<u8>>,
    ) -> Result<Self, ModelError> {
        let frames = payloads
            .into_iter()
            .enumerate()
            .map(|(i, payload)| FrameRecord {
                seq: i as u64,
                payload,
            })
            .collect();
        Self::new(rate_hz, camera_id, frames)
    }

    pub fn rate_hz(&self) -> u32 {
        self.rate_hz
    }

    pub fn camera_id(&self) -> &str {
        &self.camera_id
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Integer robot-to-frame rate ratio `R`, or `NonIntegerRatio`.
pub fn rate_ratio(robot_hz: u32, frame_hz: u32) -> Result<usize, ModelError> {
    if robot_hz == 0 || frame_hz == 0 {
        return Err(ModelError::ZeroRate);
    }
    if !robot_hz.is_multiple_of(frame_hz) {
        return Err(ModelError::NonIntegerRatio { robot_hz, frame_hz });
    }
    Ok((robot_hz / frame_hz) as usize)
}

/// A synchronized leader/follower recording with its camera streams.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    id: String,
    leader: RobotStream,
    follower: RobotStream,
    frame_streams: Vec<FrameStream>,
    meta: BTreeMap<String, String>,
    ratio: usize,
}

impl Episode {
    pub fn new(
        id: impl Into<String>,
        leader: RobotStream,
        follower: RobotStream,
        frame_streams: Vec<FrameStream>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        if id.is_empty() {
            return Err(ModelError::EmptyEpisodeId);
        }
        let pairs = [
            (
                "rate_hz",
                leader.rate_hz() as usize,
                follower.rate_hz() as usize,
            ),
            ("joints", leader.joints(), follower.joints()),
            ("sample count", leader.len(), follower.len()),
        ];
        for (what, l, f) in pairs {
            if l != f {
                return Err(ModelError::LeaderFollowerMismatch {
                    what,
                    leader: l,
                    follower: f,
                });
            }
        }

        let first = frame_streams.first().ok_or(ModelError::NoFrameStreams)?;
        let (frame_hz, frame_count) = (first.rate_hz(), first.len());
        let mut seen = std::collections::BTreeSet::new();
        for fs in &frame_streams {
            if !seen.insert(fs.camera_id()) {
                return Err(ModelError::DuplicateCamera(fs.camera_id().to_owned()));
            }
            if fs.rate_hz() != frame_hz {
                return Err(ModelError::FrameStreamMismatch {
                    what: "rate_hz",
                    camera: fs.camera_id().to_owned(),
                    expected: frame_hz as usize,
                    found: fs.rate_hz() as usize,
                });
            }
            if fs.len() != frame_count {
                return Err(ModelError::FrameStreamMismatch {
                    what: "frame count",
                    camera: fs.camera_id().to_owned(),
                    expected: frame_count,
                    found: fs.len(),
                });
            }
        }

        let ratio = rate_ratio(leader.rate_hz(), frame_hz)?;
        let needed = (frame_count - 1) * ratio + 1;
        if leader.len() < needed {
            return Err(ModelError::TooFewSamples {
                frames: frame_count,
                ratio,
                needed,
                found: leader.len(),
            });
        }

        Ok(Self {
            id,
            leader,
            follower,
            frame_streams,
            meta,
            ratio,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn leader(&self) -> &RobotStream {
        &self.leader
    }

    pub fn follower(&self) -> &RobotStream {
        &self.follower
    }

    pub fn frame_streams(&self) -> &[FrameStream] {
        &self.frame_streams
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn joints(&self) -> usize {
        self.leader.joints()
    }

    pub fn robot_rate_hz(&self) -> u32 {
        self.leader.rate_hz()
    }

    pub fn frame_rate_hz(&self) -> u32 {
        self.frame_streams[0].rate_hz()
    }

    /// Robot sample count `T`.
    pub fn sample_count(&self) -> usize {
        self.leader.len()
    }

    /// Frame count `F`, shared by every camera.
    pub fn frame_count(&self) -> usize {
        self.frame_streams[0].len()
    }

    /// Robot samples per frame interval, `R`.
    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn camera_ids(&self) -> impl Iterator<Item = &str> {
        self.frame_streams.iter().map(FrameStream::camera_id)
    }
}

/// Dataset construction strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// One anchor-aligned robot sample per frame.
    Downsample,
    /// Window `[0, N]` after each frame's anchor.
    Forward,
    /// Window `[-⌊N/2⌋, +⌈N/2⌉]` around each frame's anchor.
    Dabi,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Downsample, Method::Forward, Method::Dabi];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Downsample => "downsample",
            Method::Forward => "forward",
            Method::Dabi => "dabi",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(thiserror::Error, Debug, Clone, PartialEq, Eq)]
#[error("unknown method '{0}' (expected downsample, forward or dabi)")]
pub struct UnknownMethod(pub String);

impl FromStr for Method {
    type Err = UnknownMethod;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "downsample" => Ok(Method::Downsample),
            "forward" => Ok(Method::Forward),
            "dabi" => Ok(Method::Dabi),
            _ => Err(UnknownMethod(s.to_owned())),
        }
    }
}

/// Ordered sample offsets that define one augmentation strategy.
///
/// Only [`crate::augment::make_offsets`] constructs these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OffsetSet {
    pub(crate) method: Method,
    pub(crate) ratio: usize,
    pub(crate) offsets: Vec<i64>,
}

impl OffsetSet {
    pub fn method(&self) -> Method {
        self.method
    }

    pub fn ratio(&self) -> usize {
        self.ratio
    }

    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// One training tuple drawn from a single high-rate index.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedStep {
    /// One frame seq per camera, in the episode's camera order.
    pub frame_seqs: Vec<u64>,
    /// Follower `[θ, θ̇, τ]` per joint, joint-major.
    pub observation: Vec<f64>,
    /// Leader `[θ, θ̇, τ]` per joint, joint-major.
    pub action: Vec<f64>,
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    pub offset: i64,
    pub source_episode_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedEpisode {
    pub steps: Vec<AlignedStep>,
    pub provenance: Provenance,
}

impl AlignedEpisode {
    /// Joints per step, derived from the observation width.
    pub fn joints(&self) -> usize {
        self.steps.first().map_or(0, |s| s.observation.len() / 3)
    }

    pub fn cameras(&self) -> usize {
        self.steps.first().map_or(0, |s| s.frame_seqs.len())
    }

    /// Checks uniform step width (`3·J` observation/action, `C` frame refs).
    pub fn check_shape(&self, joints: usize, cameras: usize) -> Result<(), ModelError> {
        for (index, step) in self.steps.iter().enumerate() {
            for found in [step.observation.len(), step.action.len()] {
                if found != 3 * joints {
                    return Err(ModelError::StepWidthMismatch {
                        index,
                        expected: 3 * joints,
                        found,
                    });
                }
            }
            if step.frame_seqs.len() != cameras {
                return Err(ModelError::StepWidthMismatch {
                    index,
                    expected: cameras,
                    found: step.frame_seqs.len(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub method: Method,
    pub ratio: usize,
    pub source_ids: Vec<String>,
}

impl DatasetManifest {
    /// Sub-episodes produced per source episode.
    pub fn expansion(&self) -> usize {
        match self.method {
            Method::Downsample => 1,
            Method::Forward | Method::Dabi => self.ratio,
        }
    }

    pub fn expected_episodes(&self) -> usize {
        self.expansion() * self.source_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    episodes: Vec<AlignedEpisode>,
    manifest: DatasetManifest,
}

impl AugmentedDataset {
    /// Checks the cardinality contract and that every sub-episode's
    /// provenance agrees with the manifest.
    pub fn new(
        episodes: Vec<AlignedEpisode>,
        manifest: DatasetManifest,
    ) -> Result<Self, ModelError> {
        if manifest.ratio == 0 {
            return Err(ModelError::ZeroRate);
        }
        if manifest.source_ids.is_empty() {
            return Err(ModelError::Dataset("no source episodes".into()));
        }
        let expected = manifest.expected_episodes();
        if episodes.len() != expected {
            return Err(ModelError::Dataset(format!(
                "{} with ratio {} over {} sources needs {} episodes, found {}",
                manifest.method,
                manifest.ratio,
                manifest.source_ids.len(),
                expected,
                episodes.len()
            )));
        }
        for ep in &episodes {
            if ep.provenance.method != manifest.method {
                return Err(ModelError::Dataset(format!(
                    "sub-episode method {} differs from dataset method {}",
                    ep.provenance.method, manifest.method
                )));
            }
            if !manifest
                .source_ids
                .contains(&ep.provenance.source_episode_id)
            {
                return Err(ModelError::Dataset(format!(
                    "sub-episode references unknown source '{}'",
                    ep.provenance.source_episode_id
                )));
            }
            if ep.steps.is_empty() {
                return Err(ModelError::Dataset("sub-episode has no steps".into()));
            }
        }
        Ok(Self { episodes, manifest })
    }

    pub fn episodes(&self) -> &[AlignedEpisode] {
        &self.episodes
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Sub-episodes derived from `source_id`, in stored order.
    pub fn from_source<'a>(
        &'a self,
        source_id: &'a str,
    ) -> impl Iterator<Item = &'a AlignedEpisode> + 'a {
        self.episodes
            .iter()
            .filter(move |e| e.provenance.source_episode_id == source_id)
    }
}

/// High-rate index synchronized with frame `frame_seq`.
pub fn frame_anchor_index(frame_seq: usize, ratio: usize) -> usize {
    frame_seq * ratio
}

/// Clamps a possibly out-of-range index into `[0, t_len - 1]`.
pub fn clamp_index(i: i64, t_len: usize) -> usize {
    debug_assert!(t_len >= 1);
    let last = t_len.saturating_sub(1);
    if i <= 0 {
        0
    } else {
        (i as u64).min(last as u64) as usize
    }
}
