//! Skeleton sequences and the `skelseq v1` file format.
//!
//! A sequence is a `T x J x 3` array of joint positions in meters, world
//! coordinates with gravity along `+z`. Values are held as `f64` in memory and
//! stored as little-endian `f32` on disk.
//!
//! Two encodings share one header object `{version, fps, joints, frames}`:
//!
//! * binary (`.skel`): the header as a single JSON line terminated by `\n`,
//!   followed by `frames * joints * 3` little-endian `f32` values in
//!   frame-major, joint-minor, `(x, y, z)` order;
//! * text (`.json`): the same object with an extra `data` key holding a
//!   `[frames][joints][3]` nested array.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_EXTENSION: &str = "skel";
pub const TEXT_EXTENSION: &str = "json";
pub const LABEL_FILE: &str = "labels.json";

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("invalid sequence shape: {0}")]
    InvalidShape(String),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("dimension mismatch in {path}: header declares {declared} values, payload holds {found}")]
    DimensionMismatch {
        path: PathBuf,
        declared: usize,
        found: usize,
    },
    #[error("unsupported sequence file extension for {0} (expected .skel or .json)")]
    UnknownExtension(PathBuf),
    #[error("corpus error: {0}")]
    Corpus(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MotionError + '_ {
    move |source| MotionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A `T x J x 3` skeleton sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    frames: usize,
    joints: usize,
    fps: f64,
    data: Vec<f64>,
}

impl SkeletonSequence {
    pub fn new(frames: usize, joints: usize, fps: f64, data: Vec<f64>) -> Result<Self, MotionError> {
        if frames == 0 || joints == 0 {
            return Err(MotionError::InvalidShape(format!(
                "frames and joints must be >= 1 (got {frames} x {joints})"
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(MotionError::InvalidShape(format!("fps must be > 0 (got {fps})")));
        }
        if data.len() != frames * joints * 3 {
            return Err(MotionError::InvalidShape(format!(
                "expected {} values for {frames} x {joints} x 3, got {}",
                frames * joints * 3,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(MotionError::NonFinite { index });
        }
        Ok(Self {
            frames,
            joints,
            fps,
            data,
        })
    }

    /// Builds a sequence from per-frame joint lists.
    pub fn from_frames(fps: f64, frames: &[Vec<[f64; 3]>]) -> Result<Self, MotionError> {
        let joints = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != joints) {
            return Err(MotionError::InvalidShape("ragged joint counts".into()));
        }
        let data = frames.iter().flatten().flatten().copied().collect();
        Self::new(frames.len(), joints, fps, data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Width of one flattened frame, `3 * J`.
    pub fn frame_dim(&self) -> usize {
        self.joints * 3
    }

    /// Flattened `3J` vector of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.frame_dim();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn joint(&self, t: usize, j: usize) -> [f64; 3] {
        let o = (t * self.joints + j) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Frames `[start, end)` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, MotionError> {
        if start >= end || end > self.frames {
            return Err(MotionError::InvalidShape(format!(
                "slice {start}..{end} out of range for {} frames",
                self.frames
            )));
        }
        let w = self.frame_dim();
        Self::new(
            end - start,
            self.joints,
            self.fps,
            self.data[start * w..end * w].to_vec(),
        )
    }

    /// Moves the per-frame mean of all joints to the origin.
    pub fn center_normalize(&self) -> Self {
        let mut data = self.data.clone();
        for frame in data.chunks_exact_mut(self.joints * 3) {
            center_frame(frame);
        }
        Self { data, ..self.clone() }
    }

    /// Values rounded to the on-disk precision.
    pub fn to_storage_precision(&self) -> Self {
        let data = self.data.iter().map(|&v| f64::from(v as f32)).collect();
        Self { data, ..self.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<(), MotionError> {
        self.save_with_meta(path, &BTreeMap::new())
    }

    /// Writes the sequence, choosing the encoding from the file extension.
    /// `meta` is stored in the header and ignored by readers.
    pub fn save_with_meta(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<(), MotionError> {
        let header = Header {
            version: FORMAT_VERSION,
            fps: self.fps,
            joints: self.joints,
            frames: self.frames,
            meta: meta.clone(),
        };
        match Encoding::from_path(path)? {
            Encoding::Binary => {
                let mut buf = serde_json::to_vec(&header).expect("header serializes");
                buf.push(b'\n');
                buf.reserve(self.data.len() * 4);
                for &v in &self.data {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
                fs::write(path, buf).map_err(io_err(path))
            }
            Encoding::Text => {
                let nested: Vec<Vec<[f32; 3]>> = (0..self.frames)
                    .map(|t| {
                        (0..self.joints)
                            .map(|j| {
                                let p = self.joint(t, j);
                                [p[0] as f32, p[1] as f32, p[2] as f32]
                            })
                            .collect()
                    })
                    .collect();
                let doc = TextDocument { header, data: nested };
                let mut f = fs::File::create(path).map_err(io_err(path))?;
                serde_json::to_writer(&mut f, &doc).expect("document serializes");
                f.write_all(b"\n").map_err(io_err(path))
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self, MotionError> {
        let malformed = |reason: String| MotionError::MalformedHeader {
            path: path.to_path_buf(),
            reason,
        };
        match Encoding::from_path(path)? {
            Encoding::Binary => {
                let file = fs::File::open(path).map_err(io_err(path))?;
                let mut reader = BufReader::new(file);
                let mut line = Vec::new();
                reader.read_until(b'\n', &mut line).map_err(io_err(path))?;
                if line.last() != Some(&b'\n') {
                    return Err(malformed("missing header terminator".into()));
                }
                let header: Header =
                    serde_json::from_slice(&line).map_err(|e| malformed(e.to_string()))?;
                header.validate().map_err(malformed)?;
                let mut payload = Vec::new();
                reader.read_to_end(&mut payload).map_err(io_err(path))?;
                let declared = header.frames * header.joints * 3;
                if payload.len() % 4 != 0 || payload.len() / 4 != declared {
                    return Err(MotionError::DimensionMismatch {
                        path: path.to_path_buf(),
                        declared,
                        found: payload.len() / 4,
                    });
                }
                let data = payload
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                    .collect();
                Self::new(header.frames, header.joints, header.fps, data)
            }
            Encoding::Text => {
                let text = fs::read_to_string(path).map_err(io_err(path))?;
                let raw: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
                let doc: TextDocument =
                    serde_json::from_value(raw).map_err(|e| malformed(e.to_string()))?;
                doc.header.validate().map_err(malformed)?;
                let declared = doc.header.frames * doc.header.joints * 3;
                let found: usize = doc.data.iter().map(|f| f.len() * 3).sum();
                if doc.data.len() != doc.header.frames
                    || doc.data.iter().any(|f| f.len() != doc.header.joints)
                {
                    return Err(MotionError::DimensionMismatch {
                        path: path.to_path_buf(),
                        declared,
                        found,
                    });
                }
                let data = doc.data.iter().flatten().flatten().map(|&v| f64::from(v)).collect();
                Self::new(doc.header.frames, doc.header.joints, doc.header.fps, data)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Encoding {
    Binary,
    Text,
}

impl Encoding {
    fn from_path(path: &Path) -> Result<Self, MotionError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(BINARY_EXTENSION) => Ok(Self::Binary),
            Some(TEXT_EXTENSION) => Ok(Self::Text),
            _ => Err(MotionError::UnknownExtension(path.to_path_buf())),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    fps: f64,
    joints: usize,
    frames: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
}

impl Header {
    fn validate(&self) -> Result<(), String> {
        if self.version != FORMAT_VERSION {
            return Err(format!("unsupported version {}", self.version));
        }
        if self.frames == 0 || self.joints == 0 {
            return Err("frames and joints must be >= 1".into());
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(format!("fps must be > 0 (got {})", self.fps));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TextDocument {
    #[serde(flatten)]
    header: Header,
    data: Vec<Vec<[f32; 3]>>,
}

/// Sequences with per-frame ground-truth primitive ids.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    sequences: Vec<SkeletonSequence>,
    frame_labels: Vec<Vec<usize>>,
    primitive_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelFile {
    primitive_count: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, String>,
    labels: BTreeMap<String, Vec<usize>>,
}

impl LabeledCorpus {
    pub fn new(
        sequences: Vec<SkeletonSequence>,
        frame_labels: Vec<Vec<usize>>,
        primitive_count: usize,
    ) -> Result<Self, MotionError> {
        if sequences.len() != frame_labels.len() {
            return Err(MotionError::Corpus(format!(
                "{} sequences but {} label arrays",
                sequences.len(),
                frame_labels.len()
            )));
        }
        for (s, (seq, labels)) in sequences.iter().zip(&frame_labels).enumerate() {
            if labels.len() != seq.frames() {
                return Err(MotionError::Corpus(format!(
                    "sequence {s}: {} frames but {} labels",
                    seq.frames(),
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= primitive_count) {
                return Err(MotionError::Corpus(format!(
                    "sequence {s}: label {bad} outside [0, {primitive_count})"
                )));
            }
        }
        Ok(Self {
            sequences,
            frame_labels,
            primitive_count,
        })
    }

    pub fn sequences(&self) -> &[SkeletonSequence] {
        &self.sequences
    }

    pub fn frame_labels(&self) -> &[Vec<usize>] {
        &self.frame_labels
    }

    pub fn primitive_count(&self) -> usize {
        self.primitive_count
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Splits into the first `n` sequences and the rest.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head = Self {
            sequences: self.sequences[..n].to_vec(),
            frame_labels: self.frame_labels[..n].to_vec(),
            primitive_count: self.primitive_count,
        };
        let tail = Self {
            sequences: self.sequences[n..].to_vec(),
            frame_labels: self.frame_labels[n..].to_vec(),
            primitive_count: self.primitive_count,
        };
        (head, tail)
    }

    /// File name used for sequence `index` when saved.
    pub fn file_name(index: usize) -> String {
        format!("seq_{index:05}.{BINARY_EXTENSION}")
    }

    /// Writes one binary sequence file per sequence plus [`LABEL_FILE`].
    /// Refuses to write into a directory that already holds a label file.
    pub fn save_dir(&self, dir: &Path, meta: &BTreeMap<String, String>) -> Result<(), MotionError> {
        let label_path = dir.join(LABEL_FILE);
        if label_path.exists() {
            return Err(MotionError::Corpus(format!(
                "{} already exists; refusing to overwrite",
                label_path.display()
            )));
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut labels = BTreeMap::new();
        for (i, (seq, l)) in self.sequences.iter().zip(&self.frame_labels).enumerate() {
            let name = Self::file_name(i);
            seq.save_with_meta(&dir.join(&name), meta)?;
            labels.insert(name, l.clone());
        }
        let file = LabelFile {
            primitive_count: self.primitive_count,
            meta: meta.clone(),
            labels,
        };
        let text = serde_json::to_string_pretty(&file).expect("labels serialize");
        fs::write(&label_path, text).map_err(io_err(&label_path))
    }

    /// Loads a corpus written by [`LabeledCorpus::save_dir`]. Sequences are
    /// ordered by file name.
    pub fn load_dir(dir: &Path) -> Result<Self, MotionError> {
        let label_path = dir.join(LABEL_FILE);
        let text = fs::read_to_string(&label_path).map_err(io_err(&label_path))?;
        let file: LabelFile = serde_json::from_str(&text).map_err(|e| MotionError::MalformedHeader {
            path: label_path.clone(),
            reason: e.to_string(),
        })?;
        let mut sequences = Vec::with_capacity(file.labels.len());
        let mut frame_labels = Vec::with_capacity(file.labels.len());
        for (name, labels) in file.labels {
            if name.contains('/') || name.contains("..") {
                return Err(MotionError::Corpus(format!("invalid sequence file name {name:?}")));
            }
            sequences.push(SkeletonSequence::load(&dir.join(&name))?);
            frame_labels.push(labels);
        }
        Self::new(sequences, frame_labels, file.primitive_count)
    }
}

/// Subtracts the joint mean from one flattened `J x 3` frame.
pub fn center_frame(frame: &mut [f64]) {
    let j = frame.len() / 3;
    let mut center = [0.0; 3];
    for p in frame.chunks_exact(3) {
        for a in 0..3 {
            center[a] += p[a];
        }
    }
    for c in &mut center {
        *c /= j as f64;
    }
    for p in frame.chunks_exact_mut(3) {
        for a in 0..3 {
            p[a] -= center[a];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_joint_seq() -> SkeletonSequence {
        let data: Vec<f64> = (0..24).map(|v| v as f64 * 0.25 - 1.0).collect();
        SkeletonSequence::new(4, 2, 30.0, data).unwrap()
    }

    #[test]
    fn binary_file_with_declared_shape_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.skel");
        two_joint_seq().save(&path).unwrap();
        let back = SkeletonSequence::load(&path).unwrap();
        assert_eq!(back.frames(), 4);
        assert_eq!(back.joints(), 2);
        assert_eq!(back, two_joint_seq());
    }

    #[test]
    fn short_payload_is_dimension_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.skel");
        let mut buf = br#"{"version":1,"fps":30.0,"joints":2,"frames":4}"#.to_vec();
        buf.push(b'\n');
        for v in 0..23 {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(&path, buf).unwrap();
        match SkeletonSequence::load(&path) {
            Err(MotionError::DimensionMismatch { declared, found, .. }) => {
                assert_eq!((declared, found), (24, 23));
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn text_variant_dimension_mismatch_and_header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(
            &path,
            r#"{"version":1,"fps":30.0,"joints":2,"frames":2,"data":[[[0,0,0],[1,1,1]]]}"#,
        )
        .unwrap();
        assert!(matches!(
            SkeletonSequence::load(&path),
            Err(MotionError::DimensionMismatch { .. })
        ));
        fs::write(&path, r#"{"version":2,"fps":30.0,"joints":1,"frames":1,"data":[[[0,0,0]]]}"#).unwrap();
        assert!(matches!(
            SkeletonSequence::load(&path),
            Err(MotionError::MalformedHeader { .. })
        ));
        fs::write(&path, r#"{"fps":30.0,"joints":1,"frames":1,"data":[[[0,0,0]]]}"#).unwrap();
        assert!(matches!(
            SkeletonSequence::load(&path),
            Err(MotionError::MalformedHeader { .. })
        ));
    }

    #[test]
    fn non_finite_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.skel");
        let mut buf = br#"{"version":1,"fps":30.0,"joints":1,"frames":1}"#.to_vec();
        buf.push(b'\n');
        for v in [0.0f32, f32::NAN, 1.0] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, buf).unwrap();
        assert!(matches!(
            SkeletonSequence::load(&path),
            Err(MotionError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.json");
        let seq = SkeletonSequence::new(2, 1, 60.0, vec![0.1, 0.2, 0.3, -1.5, 2.25, 1e-3]).unwrap();
        seq.save(&path).unwrap();
        assert_eq!(SkeletonSequence::load(&path).unwrap(), seq.to_storage_precision());
    }

    #[test]
    fn unknown_extension() {
        let seq = two_joint_seq();
        assert!(matches!(
            seq.save(Path::new("/tmp/x.bin")),
            Err(MotionError::UnknownExtension(_))
        ));
    }

    #[test]
    fn constructor_invariants() {
        assert!(SkeletonSequence::new(0, 1, 30.0, vec![]).is_err());
        assert!(SkeletonSequence::new(1, 1, 0.0, vec![0.0; 3]).is_err());
        assert!(SkeletonSequence::new(1, 1, 30.0, vec![0.0; 2]).is_err());
        assert!(matches!(
            SkeletonSequence::new(1, 1, 30.0, vec![0.0, f64::INFINITY, 0.0]),
            Err(MotionError::NonFinite { index: 1 })
        ));
    }

    #[test]
    fn center_normalize_cases() {
        let seq = SkeletonSequence::from_frames(30.0, &[vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]]).unwrap();
        let c = seq.center_normalize();
        assert_eq!(c.data(), &[-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(c.center_normalize(), c);

        let seq = SkeletonSequence::from_frames(
            30.0,
            &[
                vec![[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]],
                vec![[10.0, -4.0, 3.0], [10.0, -4.0, 6.0]],
            ],
        )
        .unwrap();
        let c = seq.center_normalize();
        for t in 0..2 {
            let mean: f64 = (0..2).map(|j| c.joint(t, j)[0] + c.joint(t, j)[1] + c.joint(t, j)[2]).sum();
            assert!(mean.abs() < 1e-9);
            let d = |s: &SkeletonSequence| {
                let a = s.joint(t, 0);
                let b = s.joint(t, 1);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
            };
            assert!((d(&seq) - d(&c)).abs() < 1e-12);
        }
    }

    #[test]
    fn corpus_rejects_bad_labels() {
        let seq = two_joint_seq();
        assert!(LabeledCorpus::new(vec![seq.clone()], vec![vec![0; 3]], 1).is_err());
        assert!(LabeledCorpus::new(vec![seq.clone()], vec![vec![0, 0, 0, 2]], 2).is_err());
        assert!(LabeledCorpus::new(vec![seq], vec![vec![0, 1, 1, 0]], 2).is_ok());
    }

    #[test]
    fn corpus_directory_round_trip_and_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let seq = two_joint_seq().to_storage_precision();
        let corpus = LabeledCorpus::new(vec![seq.clone(), seq], vec![vec![0, 0, 1, 1], vec![1; 4]], 2).unwrap();
        corpus.save_dir(dir.path(), &BTreeMap::new()).unwrap();
        assert_eq!(LabeledCorpus::load_dir(dir.path()).unwrap(), corpus);
        assert!(corpus.save_dir(dir.path(), &BTreeMap::new()).is_err());
    }
}
