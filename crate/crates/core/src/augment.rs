//! Dataset construction from synchronized episodes.
//!
//! Each strategy is a list of integer offsets relative to a frame's anchor
//! sample `k·R`. Every offset produces one sub-episode that pairs frame `k`
//! with the robot sample at `k·R + offset` (clamped into the stream), so a
//! strategy with `n` offsets turns one demonstration into `n`.

use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::model::{
    clamp_index, frame_anchor_index, rate_ratio, AlignedEpisode, AlignedStep, AugmentedDataset,
    DatasetManifest, Episode, Method, ModelError, OffsetSet, Provenance,
};

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum AugmentError {
    #[error("robot rate {robot_hz} Hz is not an integer multiple of frame rate {frame_hz} Hz")]
    NonIntegerRatio { robot_hz: u32, frame_hz: u32 },

    #[error("mixed ratios in one batch: '{first_id}' has R={first}, '{episode_id}' has R={found}")]
    MixedRatio {
        first_id: String,
        first: usize,
        episode_id: String,
        found: usize,
    },

    #[error("no episodes given")]
    EmptyInput,

    #[error("duplicate source episode id '{0}'")]
    DuplicateSource(String),

    #[error("dataset was not derived from episode '{episode_id}': {reason}")]
    ProvenanceMismatch { episode_id: String, reason: String },

    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Robot samples per frame interval, `R = N + 1`.
pub fn compute_ratio(episode: &Episode) -> Result<usize, AugmentError> {
    let (robot_hz, frame_hz) = (episode.robot_rate_hz(), episode.frame_rate_hz());
    rate_ratio(robot_hz, frame_hz).map_err(|e| match e {
        ModelError::NonIntegerRatio { robot_hz, frame_hz } => {
            AugmentError::NonIntegerRatio { robot_hz, frame_hz }
        }
        other => other.into(),
    })
}

/// Offsets for `method` at ratio `ratio`. Panics if `ratio == 0`.
///
/// With `N = ratio - 1`: downsampling keeps `[0]`, forward uses `[0, N]`, and
/// the symmetric window is `[-⌊N/2⌋, ⌈N/2⌉]`, putting the extra sample on the
/// future side when `N` is odd.
pub fn make_offsets(method: Method, ratio: usize) -> OffsetSet {
    assert!(ratio >= 1, "ratio must be at least 1");
    let n = (ratio - 1) as i64;
    let offsets = match method {
        Method::Downsample => vec![0],
        Method::Forward => (0..=n).collect(),
        Method::Dabi => {
            let before = n / 2;
            let after = n - before;
            (-before..=after).collect()
        }
    };
    OffsetSet {
        method,
        ratio,
        offsets,
    }
}

/// Pairs every frame of `episode` with the robot sample `offset` ticks from
/// its anchor.
pub fn slice_episode(episode: &Episode, offset: i64, method: Method) -> AlignedEpisode {
    let ratio = episode.ratio();
    let t_len = episode.sample_count();
    let steps = (0..episode.frame_count())
        .map(|k| {
            let raw = frame_anchor_index(k, ratio) as i64 + offset;
            let source_index = clamp_index(raw, t_len);
            AlignedStep {
                frame_seqs: episode
                    .frame_streams()
                    .iter()
                    .map(|fs| fs.frames()[k].seq)
                    .collect(),
                observation: episode.follower().state_vector(source_index),
                action: episode.leader().state_vector(source_index),
                source_index,
            }
        })
        .collect();
    AlignedEpisode {
        steps,
        provenance: Provenance {
            method,
            offset,
            source_episode_id: episode.id().to_owned(),
        },
    }
}

/// Common ratio of a batch, rejecting empty or heterogeneous input.
pub fn batch_ratio(episodes: &[Episode]) -> Result<usize, AugmentError> {
    let first = episodes.first().ok_or(AugmentError::EmptyInput)?;
    let ratio = compute_ratio(first)?;
    for ep in &episodes[1..] {
        let found = compute_ratio(ep)?;
        if found != ratio {
            return Err(AugmentError::MixedRatio {
                first_id: first.id().to_owned(),
                first: ratio,
                episode_id: ep.id().to_owned(),
                found,
            });
        }
    }
    Ok(ratio)
}

/// Applies `method` to every episode. Output is episode-major, then
/// offset-ascending.
pub fn augment(episodes: &[Episode], method: Method) -> Result<AugmentedDataset, AugmentError> {
    let ratio = batch_ratio(episodes)?;
    let mut ids = BTreeSet::new();
    for ep in episodes {
        if !ids.insert(ep.id()) {
            return Err(AugmentError::DuplicateSource(ep.id().to_owned()));
        }
    }

    let offsets = make_offsets(method, ratio);
    let sub_episodes: Vec<AlignedEpisode> = episodes
        .par_iter()
        .flat_map_iter(|ep| {
            offsets
                .offsets()
                .iter()
                .map(move |&o| slice_episode(ep, o, method))
        })
        .collect();

    let manifest = DatasetManifest {
        method,
        ratio,
        source_ids: episodes.iter().map(|e| e.id().to_owned()).collect(),
    };
    Ok(AugmentedDataset::new(sub_episodes, manifest)?)
}

/// How often each high-rate index of one source episode is referenced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageReport {
    pub method: Method,
    pub ratio: usize,
    /// `counts[i]` = number of (sub-episode, step) pairs drawn from index `i`.
    pub counts: Vec<usize>,
    /// Steps whose unclamped index fell outside the stream.
    pub clamped_refs: usize,
    /// Indices that received at least one clamped reference.
    pub clamp_targets: BTreeSet<usize>,
    /// Inclusive range of indices touched by the unclamped windows.
    pub span: (usize, usize),
}

impl CoverageReport {
    /// Indices inside the window span that never received a clamped reference.
    pub fn interior(&self) -> impl Iterator<Item = usize> + '_ {
        (self.span.0..=self.span.1).filter(|i| !self.clamp_targets.contains(i))
    }

    /// Every interior index is referenced exactly once.
    pub fn is_even(&self) -> bool {
        self.interior().all(|i| self.counts[i] == 1)
    }
}

/// Counts index references of the sub-episodes `dataset` derived from
/// `episode`, after checking they really came from it.
pub fn evenness_report(
    dataset: &AugmentedDataset,
    episode: &Episode,
) -> Result<CoverageReport, AugmentError> {
    let mismatch = |reason: String| AugmentError::ProvenanceMismatch {
        episode_id: episode.id().to_owned(),
        reason,
    };
    let manifest = dataset.manifest();
    let ratio = episode.ratio();
    if manifest.ratio != ratio {
        return Err(mismatch(format!(
            "dataset ratio {} differs from episode ratio {}",
            manifest.ratio, ratio
        )));
    }

    let subs: Vec<&AlignedEpisode> = dataset.from_source(episode.id()).collect();
    if subs.is_empty() {
        return Err(mismatch("no sub-episodes reference this episode".into()));
    }
    let expected = make_offsets(manifest.method, ratio);
    let found: Vec<i64> = subs.iter().map(|s| s.provenance.offset).collect();
    if found != expected.offsets() {
        return Err(mismatch(format!(
            "offsets {found:?} differ from {:?}",
            expected.offsets()
        )));
    }

    let t_len = episode.sample_count();
    let mut counts = vec![0usize; t_len];
    let mut clamped_refs = 0;
    let mut clamp_targets = BTreeSet::new();
    let (mut lo, mut hi) = (i64::MAX, i64::MIN);

    for sub in &subs {
        if sub.steps.len() != episode.frame_count() {
            return Err(mismatch(format!(
                "sub-episode at offset {} has {} steps, episode has {} frames",
                sub.provenance.offset,
                sub.steps.len(),
                episode.frame_count()
            )));
        }
        for (k, step) in sub.steps.iter().enumerate() {
            let raw = frame_anchor_index(k, ratio) as i64 + sub.provenance.offset;
            let index = clamp_index(raw, t_len);
            if step.source_index != index
                || step.observation != episode.follower().state_vector(index)
                || step.action != episode.leader().state_vector(index)
            {
                return Err(mismatch(format!(
                    "step {k} at offset {} does not match sample {index}",
                    sub.provenance.offset
                )));
            }
            counts[index] += 1;
            if raw != index as i64 {
                clamped_refs += 1;
                clamp_targets.insert(index);
            }
            lo = lo.min(raw);
            hi = hi.max(raw);
        }
    }

    Ok(CoverageReport {
        method: manifest.method,
        ratio,
        counts,
        clamped_refs,
        clamp_targets,
        span: (clamp_index(lo, t_len), clamp_index(hi, t_len)),
    })
}
