use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use mraug_core::augment::{self, AugmentError};
use mraug_core::io::{self, DirKind, IoError, WriteOptions};
use mraug_core::sim::{self, SimConfig, TrajectoryName};
use mraug_core::{Episode, Method, ModelError};

fn write_report<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    if let Some(path) = path {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulatedEpisode {
    id: String,
    dir: String,
    seed: u64,
    sample_count: usize,
    frame_count: usize,
    ratio: usize,
    max_tracking_error_rad: f64,
}

pub fn simulate(
    config: Option<&Path>,
    trajectory: TrajectoryName,
    out: &Path,
    count: u64,
    base_seed: u64,
    force: bool,
    report: Option<&Path>,
) -> Result<bool> {
    if count == 0 {
        bail!("--count must be at least 1");
    }
    let mut cfg = match config {
        Some(path) => SimConfig::load(path)?,
        None => SimConfig::reference(),
    };
    let schedule = sim::scripted_trajectories(trajectory, cfg.num_joints());
    let options = WriteOptions {
        overwrite: force,
        ..WriteOptions::default()
    };

    let mut summary = Vec::new();
    for i in 0..count {
        let seed = base_seed
            .checked_add(i)
            .context("seed range overflows u64")?;
        cfg.seed = seed;
        let (episode, sim_summary) = sim::simulate_episode(&cfg, &schedule)
            .with_context(|| format!("simulating seed {seed}"))?;
        let dir = out.join(episode.id());
        io::write_episode(&episode, &dir, &options)?;
        let worst = sim_summary
            .max_tracking_error
            .iter()
            .copied()
            .fold(0.0, f64::max);
        println!(
            "{}: T={} F={} R={} max tracking error {:.3e} rad",
            episode.id(),
            episode.sample_count(),
            episode.frame_count(),
            episode.ratio(),
            worst
        );
        summary.push(SimulatedEpisode {
            id: episode.id().to_owned(),
            dir: dir.display().to_string(),
            seed,
            sample_count: episode.sample_count(),
            frame_count: episode.frame_count(),
            ratio: episode.ratio(),
            max_tracking_error_rad: worst,
        });
    }
    write_report(report, &summary)?;
    Ok(true)
}

/// Expands directories that hold episode directories into those episodes,
/// sorted by name.
fn episode_dirs(in_dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for dir in in_dirs {
        if io::detect(dir) == Some(DirKind::Episode) {
            out.push(dir.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| io::detect(p) == Some(DirKind::Episode))
            .collect();
        children.sort();
        out.extend(children);
    }
    if out.is_empty() {
        bail!("EmptyInput: no episode directories under {in_dirs:?}");
    }
    Ok(out)
}

fn load_episode(dir: &Path) -> Result<Episode> {
    io::read_episode(dir).map_err(|e| match e.model_cause() {
        Some(ModelError::NonIntegerRatio { .. }) => {
            anyhow::anyhow!("NonIntegerRatio: {e}")
        }
        _ => anyhow::Error::new(e),
    })
}

fn name_augment_error(e: AugmentError) -> anyhow::Error {
    let class = match &e {
        AugmentError::NonIntegerRatio { .. } => "NonIntegerRatio",
        AugmentError::MixedRatio { .. } => "MixedRatio",
        AugmentError::EmptyInput => "EmptyInput",
        AugmentError::DuplicateSource(_) => "DuplicateSource",
        AugmentError::ProvenanceMismatch { .. } => "ProvenanceMismatch",
        AugmentError::Model(_) => "InvalidEpisode",
    };
    anyhow::anyhow!("{class}: {e}")
}

#[derive(Serialize)]
struct AugmentSummary {
    method: Method,
    ratio: usize,
    source_episodes: usize,
    sub_episodes: usize,
    source_ids: Vec<String>,
    out: String,
}

pub fn augment(
    in_dirs: &[PathBuf],
    method: Method,
    out: &Path,
    force: bool,
    report: Option<&Path>,
) -> Result<bool> {
    let dirs = episode_dirs(in_dirs)?;
    let episodes = dirs
        .iter()
        .map(|d| load_episode(d))
        .collect::<Result<Vec<_>>>()?;
    let dataset = augment::augment(&episodes, method).map_err(name_augment_error)?;

    let options = WriteOptions {
        overwrite: force,
        source_dirs: episodes
            .iter()
            .zip(&dirs)
            .map(|(e, d)| (e.id().to_owned(), d.clone()))
            .collect(),
    };
    io::write_dataset(&dataset, out, &options)?;

    println!(
        "augment: {} → {} sub-episodes (method {}, R={})",
        episodes.len(),
        dataset.len(),
        method,
        dataset.manifest().ratio
    );
    write_report(
        report,
        &AugmentSummary {
            method,
            ratio: dataset.manifest().ratio,
            source_episodes: episodes.len(),
            sub_episodes: dataset.len(),
            source_ids: dataset.manifest().source_ids.clone(),
            out: out.display().to_string(),
        },
    )?;
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    status: Status,
    detail: String,
}

#[derive(Default, Serialize)]
struct CheckList {
    kind: &'static str,
    checks: Vec<Check>,
}

impl CheckList {
    fn push(&mut self, name: &'static str, status: Status, detail: impl Into<String>) {
        self.checks.push(Check {
            name,
            status,
            detail: detail.into(),
        });
    }

    fn result<T>(
        &mut self,
        name: &'static str,
        r: std::result::Result<T, impl std::fmt::Display>,
        ok: &str,
    ) -> Option<T> {
        match r {
            Ok(v) => {
                self.push(name, Status::Pass, ok);
                Some(v)
            }
            Err(e) => {
                self.push(name, Status::Fail, e.to_string());
                None
            }
        }
    }

    fn skip_rest(&mut self, names: &[&'static str]) {
        for name in names {
            self.push(name, Status::Skip, "skipped after earlier failure");
        }
    }

    fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    fn print(&self) {
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Skip => "SKIP",
            };
            println!("[{tag}] {}: {}", c.name, c.detail);
        }
    }
}

fn validate_episode(dir: &Path, list: &mut CheckList) {
    list.kind = "episode";
    if list
        .result("manifest", io::read_episode_manifest(dir), "parsed")
        .is_none()
    {
        list.skip_rest(&["checksums", "invariants"]);
        return;
    }
    match io::read_episode(dir) {
        Ok(ep) => {
            list.push("checksums", Status::Pass, "all data files match");
            list.push(
                "invariants",
                Status::Pass,
                format!(
                    "T={} F={} R={} J={}",
                    ep.sample_count(),
                    ep.frame_count(),
                    ep.ratio(),
                    ep.joints()
                ),
            );
        }
        Err(e @ IoError::ChecksumMismatch { .. }) => {
            list.push("checksums", Status::Fail, e.to_string());
            list.skip_rest(&["invariants"]);
        }
        Err(e) => {
            list.push("checksums", Status::Pass, "all data files match");
            list.push("invariants", Status::Fail, e.to_string());
        }
    }
}

fn validate_dataset(dir: &Path, list: &mut CheckList) {
    list.kind = "dataset";
    const LATER: [&str; 7] = [
        "cardinality",
        "offsets",
        "checksums",
        "step counts",
        "sources",
        "method-1 embedding",
        "evenness",
    ];
    let Some(m) = list.result("manifest", io::read_dataset_manifest(dir), "parsed") else {
        list.skip_rest(&LATER);
        return;
    };

    let present = m
        .episodes
        .iter()
        .filter(|e| dir.join(&e.path).is_file())
        .count();
    let expected = m.dataset_manifest().expected_episodes();
    match io::check_cardinality(dir, &m) {
        Err(e) => list.push("cardinality", Status::Fail, e.to_string()),
        Ok(()) if present != expected => list.push(
            "cardinality",
            Status::Fail,
            format!(
                "{} at R={} needs {expected} sub-episode files, {present} present",
                m.method, m.ratio
            ),
        ),
        Ok(()) => list.push(
            "cardinality",
            Status::Pass,
            format!(
                "{} sources × {} = {expected} sub-episodes",
                m.source_ids.len(),
                m.expansion
            ),
        ),
    }
    list.result(
        "offsets",
        io::check_offsets(dir, &m),
        "offsets match the method window",
    );

    let mut loaded = Vec::new();
    let mut failures = Vec::new();
    for entry in &m.episodes {
        if !dir.join(&entry.path).is_file() {
            continue;
        }
        match io::read_sub_episode(dir, &m, entry) {
            Ok(sub) => loaded.push(sub),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if failures.is_empty() {
        list.push(
            "checksums",
            Status::Pass,
            format!("{} files verified", loaded.len()),
        );
    } else {
        list.push("checksums", Status::Fail, failures.join("; "));
    }

    let mut steps_by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for sub in &loaded {
        steps_by_source
            .entry(sub.provenance.source_episode_id.as_str())
            .or_default()
            .push(sub.steps.len());
    }
    let ragged: Vec<_> = steps_by_source
        .iter()
        .filter(|(_, v)| v.windows(2).any(|w| w[0] != w[1]))
        .map(|(k, _)| *k)
        .collect();
    if ragged.is_empty() {
        list.push("step counts", Status::Pass, "uniform per source");
    } else {
        list.push(
            "step counts",
            Status::Fail,
            format!("ragged sources: {ragged:?}"),
        );
    }

    let source_dirs = io::read_dataset_sources(dir).unwrap_or_default();
    let mut sources = Vec::new();
    let mut missing = Vec::new();
    for id in &m.source_ids {
        match source_dirs.get(id).map(|d| io::read_episode(d)) {
            Some(Ok(ep)) => sources.push(ep),
            Some(Err(e)) => missing.push(format!("{id}: {e}")),
            None => missing.push(format!("{id}: location not recorded")),
        }
    }
    if !missing.is_empty() {
        list.push(
            "sources",
            Status::Skip,
            format!("not co-located: {}", missing.join("; ")),
        );
        list.push("method-1 embedding", Status::Skip, "needs source episodes");
        list.push("evenness", Status::Skip, "needs source episodes");
        return;
    }
    list.push(
        "sources",
        Status::Pass,
        format!("{} source episodes loaded", sources.len()),
    );

    let mut mismatches = Vec::new();
    for src in &sources {
        let down = augment::slice_episode(src, 0, Method::Downsample);
        for sub in loaded
            .iter()
            .filter(|s| s.provenance.source_episode_id == src.id())
        {
            if sub.provenance.offset == 0 && sub.steps != down.steps {
                mismatches.push(format!("{} offset 0 differs from downsampling", src.id()));
            }
            let expect = augment::slice_episode(src, sub.provenance.offset, sub.provenance.method);
            if *sub != expect {
                mismatches.push(format!(
                    "{} offset {} differs from its source",
                    src.id(),
                    sub.provenance.offset
                ));
            }
        }
    }
    if mismatches.is_empty() {
        list.push(
            "method-1 embedding",
            Status::Pass,
            "offset-0 sub-episodes equal the downsampled sources",
        );
    } else {
        list.push("method-1 embedding", Status::Fail, mismatches.join("; "));
    }

    if m.method == Method::Downsample {
        list.push(
            "evenness",
            Status::Skip,
            "downsampling uses anchor samples only",
        );
        return;
    }
    let Ok(dataset) = mraug_core::AugmentedDataset::new(loaded, m.dataset_manifest()) else {
        list.push("evenness", Status::Skip, "dataset incomplete");
        return;
    };
    let mut uneven = Vec::new();
    let mut clamped = 0;
    for src in &sources {
        match augment::evenness_report(&dataset, src) {
            Ok(r) if r.is_even() => clamped += r.clamped_refs,
            Ok(_) => uneven.push(format!(
                "{}: interior index referenced more than once or never",
                src.id()
            )),
            Err(e) => uneven.push(e.to_string()),
        }
    }
    if uneven.is_empty() {
        list.push(
            "evenness",
            Status::Pass,
            format!("every interior sample referenced exactly once ({clamped} clamped references)"),
        );
    } else {
        list.push("evenness", Status::Fail, uneven.join("; "));
    }
}

pub fn validate(dir: &Path, report: Option<&Path>) -> Result<bool> {
    let mut list = CheckList::default();
    match io::detect(dir) {
        Some(DirKind::Episode) => validate_episode(dir, &mut list),
        Some(DirKind::Dataset) => validate_dataset(dir, &mut list),
        None => bail!(
            "{} holds neither {} nor {}",
            dir.display(),
            io::EPISODE_MANIFEST,
            io::DATASET_MANIFEST
        ),
    }
    list.print();
    let ok = list.passed();
    println!("{}", if ok { "valid" } else { "INVALID" });
    write_report(report, &list)?;
    Ok(ok)
}

#[derive(Debug, Clone, Copy, Serialize)]
struct Range {
    min: f64,
    max: f64,
    mean: f64,
}

impl Range {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        Self {
            min,
            max,
            mean: if n == 0 { f64::NAN } else { sum / n as f64 },
        }
    }
}

#[derive(Serialize)]
struct JointStats {
    joint: usize,
    angle: Range,
    velocity: Range,
    torque: Range,
}

/// Per-joint ranges over rows of joint-major `[θ, θ̇, τ]` vectors.
fn joint_stats<'a>(
    rows: impl Iterator<Item = &'a [f64]> + Clone,
    joints: usize,
) -> Vec<JointStats> {
    (0..joints)
        .map(|j| JointStats {
            joint: j,
            angle: Range::of(rows.clone().map(|r| r[3 * j])),
            velocity: Range::of(rows.clone().map(|r| r[3 * j + 1])),
            torque: Range::of(rows.clone().map(|r| r[3 * j + 2])),
        })
        .collect()
}

fn print_joint_stats(label: &str, stats: &[JointStats]) {
    println!("{label}:");
    for s in stats {
        for (name, r) in [
            ("angle", s.angle),
            ("velocity", s.velocity),
            ("torque", s.torque),
        ] {
            println!(
                "  joint {} {:<8} min {:>12.5e} max {:>12.5e} mean {:>12.5e}",
                s.joint, name, r.min, r.max, r.mean
            );
        }
    }
}

#[derive(Serialize)]
struct EpisodeStats {
    kind: &'static str,
    id: String,
    sample_count: usize,
    frame_count: usize,
    ratio: usize,
    joints: usize,
    cameras: Vec<String>,
    leader: Vec<JointStats>,
    follower: Vec<JointStats>,
}

#[derive(Serialize)]
struct DatasetStats {
    kind: &'static str,
    method: Method,
    ratio: usize,
    source_episodes: usize,
    sub_episodes: usize,
    total_steps: usize,
    offsets: BTreeMap<i64, usize>,
    clamped_steps: usize,
    observation: Vec<JointStats>,
    action: Vec<JointStats>,
}

pub fn stats(dir: &Path, report: Option<&Path>) -> Result<bool> {
    match io::detect(dir) {
        Some(DirKind::Episode) => {
            let ep = io::read_episode(dir)?;
            let j = ep.joints();
            let leader: Vec<Vec<f64>> = (0..ep.sample_count())
                .map(|k| ep.leader().state_vector(k))
                .collect();
            let follower: Vec<Vec<f64>> = (0..ep.sample_count())
                .map(|k| ep.follower().state_vector(k))
                .collect();
            let s = EpisodeStats {
                kind: "episode",
                id: ep.id().to_owned(),
                sample_count: ep.sample_count(),
                frame_count: ep.frame_count(),
                ratio: ep.ratio(),
                joints: j,
                cameras: ep.camera_ids().map(str::to_owned).collect(),
                leader: joint_stats(leader.iter().map(Vec::as_slice), j),
                follower: joint_stats(follower.iter().map(Vec::as_slice), j),
            };
            println!("episode {}", s.id);
            println!(
                "samples T={} frames F={} ratio R={} joints J={} cameras {}",
                s.sample_count,
                s.frame_count,
                s.ratio,
                s.joints,
                s.cameras.join(",")
            );
            print_joint_stats("leader", &s.leader);
            print_joint_stats("follower", &s.follower);
            write_report(report, &s)?;
        }
        Some(DirKind::Dataset) => {
            let ds = io::read_dataset(dir)?;
            let m = ds.manifest();
            let joints = ds.episodes()[0].joints();
            let mut offsets = BTreeMap::new();
            let mut clamped = 0;
            for sub in ds.episodes() {
                *offsets.entry(sub.provenance.offset).or_insert(0) += 1;
                for (k, step) in sub.steps.iter().enumerate() {
                    let raw = (k * m.ratio) as i64 + sub.provenance.offset;
                    if raw != step.source_index as i64 {
                        clamped += 1;
                    }
                }
            }
            let steps = || ds.episodes().iter().flat_map(|e| e.steps.iter());
            let s = DatasetStats {
                kind: "dataset",
                method: m.method,
                ratio: m.ratio,
                source_episodes: m.source_ids.len(),
                sub_episodes: ds.len(),
                total_steps: steps().count(),
                offsets,
                clamped_steps: clamped,
                observation: joint_stats(steps().map(|s| s.observation.as_slice()), joints),
                action: joint_stats(steps().map(|s| s.action.as_slice()), joints),
            };
            println!("dataset method {} ratio R={}", s.method, s.ratio);
            println!(
                "{} source episodes, {} sub-episodes, {} steps",
                s.source_episodes, s.sub_episodes, s.total_steps
            );
            println!("offsets:");
            for (o, n) in &s.offsets {
                println!("  {o:+}: {n} sub-episodes");
            }
            println!("clamped steps: {}", s.clamped_steps);
            print_joint_stats("observation (follower)", &s.observation);
            print_joint_stats("action (leader)", &s.action);
            write_report(report, &s)?;
        }
        None => bail!(
            "{} holds neither {} nor {}",
            dir.display(),
            io::EPISODE_MANIFEST,
            io::DATASET_MANIFEST
        ),
    }
    Ok(true)
}
