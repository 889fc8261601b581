//! On-disk layout for episodes and augmented datasets.
//!
//! Both layouts are a directory holding a TOML manifest plus raw binary data
//! files. All numbers in data files are little-endian; floats are IEEE-754
//! binary64 and round-trip bit-exactly. Every data file is covered by a
//! CRC-32 (IEEE polynomial, as in zlib/PNG), stored in the manifest as
//! 8 lowercase hex digits.
//!
//! # Episode directory (format_version 1)
//!
//! ```text
//! episode.toml     manifest
//! leader.f64       T rows × 3·J f64: θ0 θ̇0 τ0 θ1 θ̇1 τ1 …
//! follower.f64     same layout as leader.f64
//! frames.bin       C·F records, camera-major in camera_ids order:
//!                    seq: u64, payload_len: u64, payload: [u8; payload_len]
//! ```
//!
//! # Dataset directory (format_version 1)
//!
//! ```text
//! dataset.toml     manifest: method, ratio, expansion, joints, cameras,
//!                  source_ids, optional source locations, one entry per
//!                  sub-episode (path, source, offset, steps, crc32)
//! steps/NNNNNN.bin one file per sub-episode, one row per step:
//!                    source_index: u64, frame_seq: [u64; C],
//!                    observation: [f64; 3·J], action: [f64; 3·J]
//! ```
//!
//! Writers build the directory under a hidden staging name next to the
//! target and rename it into place, holding a `.<name>.lock` file in the
//! parent for the duration. A failed write leaves nothing behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::make_offsets;
use crate::model::{
    rate_ratio, AlignedEpisode, AlignedStep, AugmentedDataset, DatasetManifest, Episode,
    FrameRecord, FrameStream, JointSample, Method, ModelError, Provenance, RobotStream,
};

pub const FORMAT_VERSION: u32 = 1;
pub const EPISODE_MANIFEST: &str = "episode.toml";
pub const DATASET_MANIFEST: &str = "dataset.toml";
pub const CHECKSUM_ALGORITHM: &str = "crc32";

const LEADER_FILE: &str = "leader.f64";
const FOLLOWER_FILE: &str = "follower.f64";
const FRAMES_FILE: &str = "frames.bin";
const STEPS_DIR: &str = "steps";

#[derive(thiserror::Error, Debug)]
pub enum IoError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("checksum mismatch in {path}: manifest says {expected}, file has {actual}")]
    ChecksumMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },

    #[error("validation failed for {path}: {message}")]
    Validation {
        path: PathBuf,
        message: String,
        #[source]
        cause: Option<ModelError>,
    },

    #[error("{0} already exists (pass overwrite to replace it)")]
    AlreadyExists(PathBuf),

    #[error("{0} is locked by another writer")]
    Locked(PathBuf),

    #[error("refusing to write an empty dataset")]
    EmptyDataset,
}

impl IoError {
    fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.into(),
            source,
        }
    }

    fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    fn invalid(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        IoError::Validation {
            path: path.into(),
            message: message.into(),
            cause: None,
        }
    }

    fn model(path: impl Into<PathBuf>, cause: ModelError) -> Self {
        IoError::Validation {
            path: path.into(),
            message: cause.to_string(),
            cause: Some(cause),
        }
    }

    /// The model-level cause of a validation failure, if any.
    pub fn model_cause(&self) -> Option<&ModelError> {
        match self {
            IoError::Validation { cause, .. } => cause.as_ref(),
            _ => None,
        }
    }
}

/// `crc32` of `bytes` as 8 lowercase hex digits.
pub fn checksum(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub crc32: String,
}

impl FileEntry {
    fn of(path: &str, data: &[u8]) -> Self {
        Self {
            path: path.to_owned(),
            bytes: data.len() as u64,
            crc32: checksum(data),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFiles {
    pub leader: FileEntry,
    pub follower: FileEntry,
    pub frames: FileEntry,
}

/// Contents of `episode.toml`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeManifest {
    pub format_version: u32,
    pub episode_id: String,
    pub robot_rate_hz: u32,
    pub frame_rate_hz: u32,
    pub joints: usize,
    pub sample_count: usize,
    pub frame_count: usize,
    pub camera_ids: Vec<String>,
    pub checksum_algorithm: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub files: EpisodeFiles,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubEpisodeEntry {
    pub path: String,
    pub source_episode_id: String,
    pub method: Method,
    pub offset: i64,
    pub steps: usize,
    pub bytes: u64,
    pub crc32: String,
}

/// Contents of `dataset.toml`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifestFile {
    pub format_version: u32,
    pub method: Method,
    pub ratio: usize,
    pub expansion: usize,
    pub joints: usize,
    pub cameras: usize,
    pub checksum_algorithm: String,
    pub source_ids: Vec<String>,
    /// Source episode directories relative to the dataset directory.
    #[serde(default)]
    pub sources: BTreeMap<String, String>,
    pub episodes: Vec<SubEpisodeEntry>,
}

impl DatasetManifestFile {
    pub fn dataset_manifest(&self) -> DatasetManifest {
        DatasetManifest {
            method: self.method,
            ratio: self.ratio,
            source_ids: self.source_ids.clone(),
        }
    }

    /// Bytes per step row.
    pub fn row_bytes(&self) -> usize {
        8 * (1 + self.cameras + 6 * self.joints)
    }
}

#[derive(Debug, Clone, Default)]
pub struct WriteOptions {
    /// Replace an existing non-empty target directory.
    pub overwrite: bool,
    /// Source episode directories to record in a dataset manifest.
    pub source_dirs: BTreeMap<String, PathBuf>,
}

impl WriteOptions {
    pub fn overwrite() -> Self {
        Self {
            overwrite: true,
            ..Self::default()
        }
    }
}

fn encode_stream(stream: &RobotStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(stream.as_flat().len() * 24);
    for s in stream.as_flat() {
        for v in [s.angle, s.velocity, s.torque] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn encode_frames(streams: &[FrameStream]) -> Vec<u8> {
    let mut out = Vec::new();
    for fs in streams {
        for f in fs.frames() {
            out.extend_from_slice(&f.seq.to_le_bytes());
            out.extend_from_slice(&(f.payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&f.payload);
        }
    }
    out
}

fn encode_steps(ep: &AlignedEpisode) -> Vec<u8> {
    let mut out = Vec::new();
    for s in &ep.steps {
        out.extend_from_slice(&(s.source_index as u64).to_le_bytes());
        for seq in &s.frame_seqs {
            out.extend_from_slice(&seq.to_le_bytes());
        }
        for v in s.observation.iter().chain(&s.action) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Little-endian reader over a byte slice.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.u64().map(f64::from_bits)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn manifest_for(episode: &Episode, files: EpisodeFiles) -> EpisodeManifest {
    EpisodeManifest {
        format_version: FORMAT_VERSION,
        episode_id: episode.id().to_owned(),
        robot_rate_hz: episode.robot_rate_hz(),
        frame_rate_hz: episode.frame_rate_hz(),
        joints: episode.joints(),
        sample_count: episode.sample_count(),
        frame_count: episode.frame_count(),
        camera_ids: episode.camera_ids().map(str::to_owned).collect(),
        checksum_algorithm: CHECKSUM_ALGORITHM.to_owned(),
        meta: episode.meta().clone(),
        files,
    }
}

/// Writes `episode` into `dir` and returns the manifest path.
pub fn write_episode(
    episode: &Episode,
    dir: &Path,
    options: &WriteOptions,
) -> Result<PathBuf, IoError> {
    let leader = encode_stream(episode.leader());
    let follower = encode_stream(episode.follower());
    let frames = encode_frames(episode.frame_streams());
    let manifest = manifest_for(
        episode,
        EpisodeFiles {
            leader: FileEntry::of(LEADER_FILE, &leader),
            follower: FileEntry::of(FOLLOWER_FILE, &follower),
            frames: FileEntry::of(FRAMES_FILE, &frames),
        },
    );
    let text = toml::to_string(&manifest).expect("manifest serializes");

    write_atomically(dir, options.overwrite, |staging| {
        write_file(&staging.join(LEADER_FILE), &leader)?;
        write_file(&staging.join(FOLLOWER_FILE), &follower)?;
        write_file(&staging.join(FRAMES_FILE), &frames)?;
        write_file(&staging.join(EPISODE_MANIFEST), text.as_bytes())
    })?;
    Ok(dir.join(EPISODE_MANIFEST))
}

fn check_version(path: &Path, text: &str) -> Result<(), IoError> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| IoError::parse(path, e.to_string()))?;
    match table.get("format_version") {
        Some(toml::Value::Integer(v)) if *v == i64::from(FORMAT_VERSION) => Ok(()),
        Some(toml::Value::Integer(v)) => Err(IoError::parse(
            path,
            format!("unsupported format_version {v} (this reader understands {FORMAT_VERSION})"),
        )),
        Some(other) => Err(IoError::parse(
            path,
            format!("format_version must be an integer, found {other}"),
        )),
        None => Err(IoError::parse(path, "missing format_version")),
    }
}

fn parse_manifest<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    check_version(path, &text)?;
    let value: T = toml::from_str(&text).map_err(|e| IoError::parse(path, e.to_string()))?;
    Ok(value)
}

fn check_algorithm(path: &Path, algorithm: &str) -> Result<(), IoError> {
    if algorithm != CHECKSUM_ALGORITHM {
        return Err(IoError::parse(
            path,
            format!("unsupported checksum_algorithm '{algorithm}'"),
        ));
    }
    Ok(())
}

/// Rejects paths that could escape the data directory.
fn data_path(dir: &Path, manifest: &Path, relative: &str) -> Result<PathBuf, IoError> {
    let rel = Path::new(relative);
    if relative.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(IoError::parse(
            manifest,
            format!("illegal data file path '{relative}'"),
        ));
    }
    Ok(dir.join(rel))
}

/// Reads a data file and verifies its checksum.
fn read_checked(
    dir: &Path,
    manifest: &Path,
    entry_path: &str,
    crc: &str,
) -> Result<Vec<u8>, IoError> {
    let path = data_path(dir, manifest, entry_path)?;
    let bytes = fs::read(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            IoError::invalid(&path, "data file listed in manifest is missing")
        } else {
            IoError::io(&path, e)
        }
    })?;
    let actual = checksum(&bytes);
    if actual != crc {
        return Err(IoError::ChecksumMismatch {
            path,
            expected: crc.to_owned(),
            actual,
        });
    }
    Ok(bytes)
}

pub fn read_episode_manifest(dir: &Path) -> Result<EpisodeManifest, IoError> {
    let path = dir.join(EPISODE_MANIFEST);
    let m: EpisodeManifest = parse_manifest(&path)?;
    check_algorithm(&path, &m.checksum_algorithm)?;
    Ok(m)
}

fn decode_stream(
    path: &Path,
    bytes: &[u8],
    rate: u32,
    joints: usize,
    rows: usize,
) -> Result<RobotStream, IoError> {
    let row = 24 * joints;
    if !bytes.len().is_multiple_of(row.max(1)) || bytes.len() / row.max(1) != rows {
        return Err(IoError::invalid(
            path,
            format!(
                "manifest declares {rows} rows of {joints} joints ({} bytes), file has {} bytes",
                rows * row,
                bytes.len()
            ),
        ));
    }
    let mut c = Cursor::new(bytes);
    let mut samples = Vec::with_capacity(rows * joints);
    while c.remaining() > 0 {
        let (a, v, t) = (c.f64().unwrap(), c.f64().unwrap(), c.f64().unwrap());
        samples.push(JointSample::new(a, v, t));
    }
    RobotStream::from_flat(rate, joints, samples).map_err(|e| IoError::model(path, e))
}

fn decode_frames(
    path: &Path,
    bytes: &[u8],
    m: &EpisodeManifest,
) -> Result<Vec<FrameStream>, IoError> {
    let mut c = Cursor::new(bytes);
    let mut streams = Vec::with_capacity(m.camera_ids.len());
    for camera in &m.camera_ids {
        let mut frames = Vec::with_capacity(m.frame_count);
        for k in 0..m.frame_count {
            let truncated =
                || IoError::invalid(path, format!("truncated at frame {k} of camera '{camera}'"));
            let seq = c.u64().ok_or_else(truncated)?;
            let len = c.u64().ok_or_else(truncated)?;
            let payload = usize::try_from(len)
                .ok()
                .and_then(|n| c.take(n))
                .ok_or_else(truncated)?;
            frames.push(FrameRecord {
                seq,
                payload: payload.to_vec(),
            });
        }
        streams.push(
            FrameStream::new(m.frame_rate_hz, camera.clone(), frames)
                .map_err(|e| IoError::model(path, e))?,
        );
    }
    if c.remaining() != 0 {
        return Err(IoError::invalid(
            path,
            format!(
                "{} trailing bytes after {} frames per camera",
                c.remaining(),
                m.frame_count
            ),
        ));
    }
    Ok(streams)
}

/// Reads and fully validates the episode stored in `dir`.
pub fn read_episode(dir: &Path) -> Result<Episode, IoError> {
    let manifest_path = dir.join(EPISODE_MANIFEST);
    let m = read_episode_manifest(dir)?;
    rate_ratio(m.robot_rate_hz, m.frame_rate_hz).map_err(|e| IoError::model(&manifest_path, e))?;
    if m.joints == 0 {
        return Err(IoError::model(&manifest_path, ModelError::ZeroJoints));
    }

    let leader_bytes = read_checked(
        dir,
        &manifest_path,
        &m.files.leader.path,
        &m.files.leader.crc32,
    )?;
    let follower_bytes = read_checked(
        dir,
        &manifest_path,
        &m.files.follower.path,
        &m.files.follower.crc32,
    )?;
    let frame_bytes = read_checked(
        dir,
        &manifest_path,
        &m.files.frames.path,
        &m.files.frames.crc32,
    )?;

    let leader = decode_stream(
        &dir.join(&m.files.leader.path),
        &leader_bytes,
        m.robot_rate_hz,
        m.joints,
        m.sample_count,
    )?;
    let follower = decode_stream(
        &dir.join(&m.files.follower.path),
        &follower_bytes,
        m.robot_rate_hz,
        m.joints,
        m.sample_count,
    )?;
    let frames = decode_frames(&dir.join(&m.files.frames.path), &frame_bytes, &m)?;

    Episode::new(m.episode_id, leader, follower, frames, m.meta)
        .map_err(|e| IoError::model(&manifest_path, e))
}

/// Path of `target` relative to `base`; both must be absolute.
fn relative_path(base: &Path, target: &Path) -> PathBuf {
    let base: Vec<_> = base.components().collect();
    let target: Vec<_> = target.components().collect();
    let common = base.iter().zip(&target).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in common..base.len() {
        out.push("..");
    }
    for c in &target[common..] {
        out.push(c.as_os_str());
    }
    out
}

fn absolute(path: &Path) -> Result<PathBuf, IoError> {
    if let Ok(p) = fs::canonicalize(path) {
        return Ok(p);
    }
    // not created yet: resolve the nearest existing ancestor
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| IoError::invalid(path, "path has no final component"))?;
    Ok(absolute(&parent)?.join(name))
}

/// Writes `dataset` into `dir` and returns the manifest path.
pub fn write_dataset(
    dataset: &AugmentedDataset,
    dir: &Path,
    options: &WriteOptions,
) -> Result<PathBuf, IoError> {
    if dataset.is_empty() {
        return Err(IoError::EmptyDataset);
    }
    let first = &dataset.episodes()[0];
    let (joints, cameras) = (first.joints(), first.cameras());
    let mut files = Vec::with_capacity(dataset.len());
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, ep) in dataset.episodes().iter().enumerate() {
        ep.check_shape(joints, cameras)
            .map_err(|e| IoError::model(dir, e))?;
        let bytes = encode_steps(ep);
        let path = format!("{STEPS_DIR}/{i:06}.bin");
        entries.push(SubEpisodeEntry {
            path: path.clone(),
            source_episode_id: ep.provenance.source_episode_id.clone(),
            method: ep.provenance.method,
            offset: ep.provenance.offset,
            steps: ep.steps.len(),
            bytes: bytes.len() as u64,
            crc32: checksum(&bytes),
        });
        files.push((path, bytes));
    }

    let mut sources = BTreeMap::new();
    if !options.source_dirs.is_empty() {
        let base = absolute(dir)?;
        for (id, src) in &options.source_dirs {
            let rel = relative_path(&base, &absolute(src)?);
            sources.insert(id.clone(), rel.to_string_lossy().replace('\\', "/"));
        }
    }

    let m = dataset.manifest();
    let manifest = DatasetManifestFile {
        format_version: FORMAT_VERSION,
        method: m.method,
        ratio: m.ratio,
        expansion: m.expansion(),
        joints,
        cameras,
        checksum_algorithm: CHECKSUM_ALGORITHM.to_owned(),
        source_ids: m.source_ids.clone(),
        sources,
        episodes: entries,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");

    write_atomically(dir, options.overwrite, |staging| {
        let steps = staging.join(STEPS_DIR);
        fs::create_dir(&steps).map_err(|e| IoError::io(&steps, e))?;
        for (path, bytes) in &files {
            write_file(&staging.join(path), bytes)?;
        }
        write_file(&staging.join(DATASET_MANIFEST), text.as_bytes())
    })?;
    Ok(dir.join(DATASET_MANIFEST))
}

pub fn read_dataset_manifest(dir: &Path) -> Result<DatasetManifestFile, IoError> {
    let path = dir.join(DATASET_MANIFEST);
    let m: DatasetManifestFile = parse_manifest(&path)?;
    check_algorithm(&path, &m.checksum_algorithm)?;
    if m.ratio == 0 {
        return Err(IoError::model(&path, ModelError::ZeroRate));
    }
    Ok(m)
}

/// Checks the declared expansion and that the manifest lists exactly
/// `expansion × sources` sub-episodes.
pub fn check_cardinality(dir: &Path, m: &DatasetManifestFile) -> Result<(), IoError> {
    let path = dir.join(DATASET_MANIFEST);
    let declared = m.dataset_manifest();
    if m.expansion != declared.expansion() {
        return Err(IoError::invalid(
            &path,
            format!(
                "method {} at ratio {} expands {}x, manifest declares {}",
                m.method,
                m.ratio,
                declared.expansion(),
                m.expansion
            ),
        ));
    }
    let expected = declared.expected_episodes();
    if m.episodes.len() != expected {
        return Err(IoError::invalid(
            &path,
            format!(
                "{} at ratio {} over {} sources needs {expected} sub-episodes, manifest lists {}",
                m.method,
                m.ratio,
                m.source_ids.len(),
                m.episodes.len()
            ),
        ));
    }
    Ok(())
}

/// Checks that each source's sub-episodes carry exactly the offsets of the
/// declared method, in ascending order.
pub fn check_offsets(dir: &Path, m: &DatasetManifestFile) -> Result<(), IoError> {
    let path = dir.join(DATASET_MANIFEST);
    let expected = make_offsets(m.method, m.ratio);
    for id in &m.source_ids {
        let found: Vec<i64> = m
            .episodes
            .iter()
            .filter(|e| &e.source_episode_id == id)
            .map(|e| e.offset)
            .collect();
        if found != expected.offsets() {
            return Err(IoError::invalid(
                &path,
                format!(
                    "source '{id}' has offsets {found:?}, {} at ratio {} needs {:?}",
                    m.method,
                    m.ratio,
                    expected.offsets()
                ),
            ));
        }
    }
    Ok(())
}

/// Loads one sub-episode listed in the manifest.
pub fn read_sub_episode(
    dir: &Path,
    m: &DatasetManifestFile,
    entry: &SubEpisodeEntry,
) -> Result<AlignedEpisode, IoError> {
    let manifest_path = dir.join(DATASET_MANIFEST);
    let bytes = read_checked(dir, &manifest_path, &entry.path, &entry.crc32)?;
    let path = dir.join(&entry.path);
    let row = m.row_bytes();
    if bytes.len() != entry.steps * row {
        return Err(IoError::invalid(
            &path,
            format!(
                "manifest declares {} steps of {row} bytes, file has {} bytes",
                entry.steps,
                bytes.len()
            ),
        ));
    }
    let mut c = Cursor::new(&bytes);
    let width = 3 * m.joints;
    let mut steps = Vec::with_capacity(entry.steps);
    for _ in 0..entry.steps {
        let source_index = c.u64().unwrap();
        let source_index = usize::try_from(source_index)
            .map_err(|_| IoError::invalid(&path, "source_index out of range"))?;
        let frame_seqs = (0..m.cameras).map(|_| c.u64().unwrap()).collect();
        let observation = (0..width).map(|_| c.f64().unwrap()).collect();
        let action = (0..width).map(|_| c.f64().unwrap()).collect();
        steps.push(AlignedStep {
            frame_seqs,
            observation,
            action,
            source_index,
        });
    }
    Ok(AlignedEpisode {
        steps,
        provenance: Provenance {
            method: entry.method,
            offset: entry.offset,
            source_episode_id: entry.source_episode_id.clone(),
        },
    })
}

/// Reads and fully validates the dataset stored in `dir`.
pub fn read_dataset(dir: &Path) -> Result<AugmentedDataset, IoError> {
    let m = read_dataset_manifest(dir)?;
    check_cardinality(dir, &m)?;
    check_offsets(dir, &m)?;
    let episodes = m
        .episodes
        .iter()
        .map(|entry| read_sub_episode(dir, &m, entry))
        .collect::<Result<Vec<_>, _>>()?;
    AugmentedDataset::new(episodes, m.dataset_manifest())
        .map_err(|e| IoError::model(dir.join(DATASET_MANIFEST), e))
}

/// Source episode directories recorded in the dataset manifest, resolved
/// against `dir`.
pub fn read_dataset_sources(dir: &Path) -> Result<BTreeMap<String, PathBuf>, IoError> {
    let m = read_dataset_manifest(dir)?;
    Ok(m.sources
        .into_iter()
        .map(|(id, rel)| (id, dir.join(rel)))
        .collect())
}

/// What a directory holds, judged by its manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirKind {
    Episode,
    Dataset,
}

pub fn detect(dir: &Path) -> Option<DirKind> {
    if dir.join(DATASET_MANIFEST).is_file() {
        Some(DirKind::Dataset)
    } else if dir.join(EPISODE_MANIFEST).is_file() {
        Some(DirKind::Episode)
    } else {
        None
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn sibling(parent: &Path, name: &std::ffi::OsStr, suffix: &str) -> PathBuf {
    let mut s = std::ffi::OsString::from(".");
    s.push(name);
    s.push(suffix);
    parent.join(s)
}

/// Builds `dir` under a staging name via `fill`, then renames it into place.
fn write_atomically(
    dir: &Path,
    overwrite: bool,
    fill: impl FnOnce(&Path) -> Result<(), IoError>,
) -> Result<(), IoError> {
    let name = dir
        .file_name()
        .ok_or_else(|| IoError::invalid(dir, "target directory has no name"))?;
    let parent = match dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| IoError::io(&parent, e))?;

    let lock = sibling(&parent, name, ".lock");
    match fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(&lock)
    {
        Ok(_) => {}
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
            return Err(IoError::Locked(dir.to_path_buf()))
        }
        Err(e) => return Err(IoError::io(&lock, e)),
    }
    let _guard = LockGuard(lock);

    let existing = match fs::read_dir(dir) {
        Ok(mut entries) => Some(entries.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(IoError::io(dir, e)),
    };
    if existing == Some(true) && !overwrite {
        return Err(IoError::AlreadyExists(dir.to_path_buf()));
    }

    let pid = std::process::id();
    let staging = sibling(&parent, name, &format!(".staging-{pid}"));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| IoError::io(&staging, e))?;
    }
    fs::create_dir(&staging).map_err(|e| IoError::io(&staging, e))?;
    if let Err(e) = fill(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }

    let retired = sibling(&parent, name, &format!(".old-{pid}"));
    if existing.is_some() {
        if let Err(e) = fs::rename(dir, &retired) {
            let _ = fs::remove_dir_all(&staging);
            return Err(IoError::io(dir, e));
        }
    }
    if let Err(e) = fs::rename(&staging, dir) {
        if existing.is_some() {
            let _ = fs::rename(&retired, dir);
        }
        let _ = fs::remove_dir_all(&staging);
        return Err(IoError::io(dir, e));
    }
    if existing.is_some() {
        fs::remove_dir_all(&retired).map_err(|e| IoError::io(&retired, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::augment;
    use crate::model::fixtures::indexed_episode;

    fn small_episode() -> Episode {
        let ticks = (0..10)
            .map(|k| {
                (0..2)
                    .map(|j| {
                        JointSample::new(
                            k as f64 * 0.1 + j as f64,
                            -(k as f64),
                            1.0 / (k as f64 + 1.0),
                        )
                    })
                    .collect()
            })
            .collect::<Vec<_>>();
        let leader = RobotStream::new(500, ticks.clone()).unwrap();
        let follower = RobotStream::new(500, ticks).unwrap();
        let frames = FrameStream::from_payloads(100, "cam", vec![vec![1, 2, 3], vec![]]).unwrap();
        Episode::new(
            "small",
            leader,
            follower,
            vec![frames],
            BTreeMap::from([("task".into(), "t".into())]),
        )
        .unwrap()
    }

    #[test]
    fn episode_layout_sizes() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ep");
        let manifest = write_episode(&small_episode(), &dir, &WriteOptions::default()).unwrap();
        assert_eq!(manifest, dir.join(EPISODE_MANIFEST));
        assert_eq!(
            fs::metadata(dir.join(LEADER_FILE)).unwrap().len(),
            10 * 6 * 8
        );
        assert_eq!(
            fs::metadata(dir.join(FOLLOWER_FILE)).unwrap().len(),
            10 * 6 * 8
        );
        // two records: 16-byte header each plus 3 + 0 payload bytes
        assert_eq!(
            fs::metadata(dir.join(FRAMES_FILE)).unwrap().len(),
            2 * 16 + 3
        );
        let names: Vec<_> = fs::read_dir(&dir)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 4);
        // nothing left next to the target
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
    }

    #[test]
    fn episode_round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let ep = small_episode();
        write_episode(&ep, &tmp.path().join("e"), &WriteOptions::default()).unwrap();
        assert_eq!(read_episode(&tmp.path().join("e")).unwrap(), ep);
    }

    #[test]
    fn unwritable_target_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let blocker = tmp.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let err = write_episode(
            &small_episode(),
            &blocker.join("ep"),
            &WriteOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IoError::Io { .. }), "{err}");
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
    }

    #[test]
    fn existing_target_requires_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("e");
        write_episode(&small_episode(), &dir, &WriteOptions::default()).unwrap();
        assert!(matches!(
            write_episode(&small_episode(), &dir, &WriteOptions::default()),
            Err(IoError::AlreadyExists(_))
        ));
        let other = indexed_episode("other", 20, 2, 10, 1);
        write_episode(&other, &dir, &WriteOptions::overwrite()).unwrap();
        assert_eq!(read_episode(&dir).unwrap(), other);
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
    }

    #[test]
    fn held_lock_blocks_writers() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join(".e.lock"), b"").unwrap();
        assert!(matches!(
            write_episode(
                &small_episode(),
                &tmp.path().join("e"),
                &WriteOptions::default()
            ),
            Err(IoError::Locked(_))
        ));
        assert!(!tmp.path().join("e").exists());
    }

    fn edit_manifest(dir: &Path, name: &str, f: impl FnOnce(String) -> String) {
        let p = dir.join(name);
        let text = fs::read_to_string(&p).unwrap();
        fs::write(&p, f(text)).unwrap();
    }

    #[test]
    fn count_mismatch_is_a_validation_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("e");
        write_episode(&small_episode(), &dir, &WriteOptions::default()).unwrap();
        edit_manifest(&dir, EPISODE_MANIFEST, |t| {
            t.replace("sample_count = 10", "sample_count = 11")
        });
        assert!(matches!(
            read_episode(&dir).unwrap_err(),
            IoError::Validation { .. }
        ));
    }

    #[test]
    fn non_integer_ratio_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("e");
        write_episode(&small_episode(), &dir, &WriteOptions::default()).unwrap();
        edit_manifest(&dir, EPISODE_MANIFEST, |t| {
            t.replace("robot_rate_hz = 500", "robot_rate_hz = 1000")
                .replace("frame_rate_hz = 100", "frame_rate_hz = 300")
        });
        let err = read_episode(&dir).unwrap_err();
        assert_eq!(
            err.model_cause(),
            Some(&ModelError::NonIntegerRatio {
                robot_hz: 1000,
                frame_hz: 300
            })
        );
    }

    #[test]
    fn corrupted_bytes_fail_checksum() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("e");
        write_episode(&small_episode(), &dir, &WriteOptions::default()).unwrap();
        let p = dir.join(FOLLOWER_FILE);
        let mut bytes = fs::read(&p).unwrap();
        bytes[17] ^= 0x40;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_episode(&dir).unwrap_err(),
            IoError::ChecksumMismatch { .. }
        ));
    }

    #[test]
    fn unknown_version_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("e");
        write_episode(&small_episode(), &dir, &WriteOptions::default()).unwrap();
        edit_manifest(&dir, EPISODE_MANIFEST, |t| {
            t.replace("format_version = 1", "format_version = 7")
        });
        match read_episode(&dir).unwrap_err() {
            IoError::Parse { message, .. } => assert!(message.contains('7'), "{message}"),
            other => panic!("{other:?}"),
        }
        edit_manifest(&dir, EPISODE_MANIFEST, |t| {
            t.replace("format_version = 7", "format_version = 1\n[[[")
        });
        assert!(matches!(
            read_episode(&dir).unwrap_err(),
            IoError::Parse { .. }
        ));
    }

    #[test]
    fn data_paths_cannot_escape() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("e");
        write_episode(&small_episode(), &dir, &WriteOptions::default()).unwrap();
        edit_manifest(&dir, EPISODE_MANIFEST, |t| {
            t.replace("\"leader.f64\"", "\"../leader.f64\"")
        });
        assert!(matches!(
            read_episode(&dir).unwrap_err(),
            IoError::Parse { .. }
        ));
    }

    fn dataset(method: Method) -> (Vec<Episode>, AugmentedDataset) {
        let eps: Vec<_> = (0..3)
            .map(|i| indexed_episode(&format!("e{i}"), 100, 10, 10, 2))
            .collect();
        let ds = augment(&eps, method).unwrap();
        (eps, ds)
    }

    #[test]
    fn dataset_round_trip_and_sources() {
        let tmp = tempfile::tempdir().unwrap();
        let (eps, ds) = dataset(Method::Dabi);
        let mut opts = WriteOptions::default();
        for ep in &eps {
            let d = tmp.path().join("episodes").join(ep.id());
            write_episode(ep, &d, &WriteOptions::default()).unwrap();
            opts.source_dirs.insert(ep.id().to_owned(), d);
        }
        let dir = tmp.path().join("out").join("ds");
        write_dataset(&ds, &dir, &opts).unwrap();
        assert_eq!(fs::read_dir(dir.join(STEPS_DIR)).unwrap().count(), 30);
        assert_eq!(read_dataset(&dir).unwrap(), ds);

        let m = read_dataset_manifest(&dir).unwrap();
        assert_eq!(m.sources["e1"], "../../episodes/e1");
        assert_eq!(m.expansion, 10);
        let sources = read_dataset_sources(&dir).unwrap();
        assert_eq!(read_episode(&sources["e2"]).unwrap(), eps[2]);
    }

    #[test]
    fn dataset_cardinality_is_enforced() {
        let tmp = tempfile::tempdir().unwrap();
        let (_, ds) = dataset(Method::Forward);
        let dir = tmp.path().join("ds");
        write_dataset(&ds, &dir, &WriteOptions::default()).unwrap();
        let mut m = read_dataset_manifest(&dir).unwrap();
        m.episodes.pop();
        fs::write(dir.join(DATASET_MANIFEST), toml::to_string(&m).unwrap()).unwrap();
        assert!(matches!(
            read_dataset(&dir).unwrap_err(),
            IoError::Validation { .. }
        ));
    }

    #[test]
    fn dataset_missing_file_and_checksum() {
        let tmp = tempfile::tempdir().unwrap();
        let (_, ds) = dataset(Method::Dabi);
        let dir = tmp.path().join("ds");
        write_dataset(&ds, &dir, &WriteOptions::default()).unwrap();
        let victim = dir.join(STEPS_DIR).join("000004.bin");
        let mut bytes = fs::read(&victim).unwrap();
        bytes[40] ^= 1;
        fs::write(&victim, &bytes).unwrap();
        assert!(matches!(
            read_dataset(&dir).unwrap_err(),
            IoError::ChecksumMismatch { .. }
        ));
        fs::remove_file(&victim).unwrap();
        assert!(matches!(
            read_dataset(&dir).unwrap_err(),
            IoError::Validation { .. }
        ));
    }

    #[test]
    fn dataset_offsets_must_match_method() {
        let tmp = tempfile::tempdir().unwrap();
        let (_, ds) = dataset(Method::Forward);
        let dir = tmp.path().join("ds");
        write_dataset(&ds, &dir, &WriteOptions::default()).unwrap();
        edit_manifest(&dir, DATASET_MANIFEST, |t| {
            t.replace("method = \"forward\"", "method = \"dabi\"")
        });
        assert!(matches!(
            read_dataset(&dir).unwrap_err(),
            IoError::Validation { .. }
        ));
    }

    #[test]
    fn dataset_unknown_version() {
        let tmp = tempfile::tempdir().unwrap();
        let (_, ds) = dataset(Method::Downsample);
        let dir = tmp.path().join("ds");
        write_dataset(&ds, &dir, &WriteOptions::default()).unwrap();
        edit_manifest(&dir, DATASET_MANIFEST, |t| {
            t.replacen("format_version = 1", "format_version = 2", 1)
        });
        match read_dataset(&dir).unwrap_err() {
            IoError::Parse { message, .. } => assert!(message.contains("format_version 2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn relative_paths() {
        assert_eq!(
            relative_path(Path::new("/a/b/c"), Path::new("/a/x")),
            PathBuf::from("../../x")
        );
        assert_eq!(
            relative_path(Path::new("/a"), Path::new("/a/b")),
            PathBuf::from("b")
        );
    }

    #[test]
    fn detect_kind() {
        let tmp = tempfile::tempdir().unwrap();
        assert_eq!(detect(tmp.path()), None);
        write_episode(
            &small_episode(),
            &tmp.path().join("e"),
            &WriteOptions::default(),
        )
        .unwrap();
        assert_eq!(detect(&tmp.path().join("e")), Some(DirKind::Episode));
    }
}
