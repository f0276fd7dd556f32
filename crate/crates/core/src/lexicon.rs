//! Acton lexicon: k-means over frame features, nearest-centroid assignment,
//! and run-length segmentation into token streams.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::motion::SkeletonSequence;
use crate::tan::{TanError, TanWeights};

pub const LEXICON_VERSION: u32 = 1;
const LEXICON_FORMAT: &str = "acton-lexicon";
pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("k-means needs at least K = {k} points, got {points}")]
    TooFewPoints { k: usize, points: usize },
    #[error("K must be at least 1")]
    ZeroClusters,
    #[error("feature dimension {found} does not match the lexicon dimension {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("non-finite feature at point {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] TanError),
    #[error("lexicon {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which per-frame vectors are clustered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Unit-sphere projections `v`.
    #[default]
    Projection,
    /// Encoder outputs `z`.
    Hidden,
    /// Center-normalized joint coordinates, no model.
    RawSkeleton,
}

impl std::str::FromStr for FeatureSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "projection" | "v" => Ok(Self::Projection),
            "hidden" | "z" => Ok(Self::Hidden),
            "raw" | "raw_skeleton" => Ok(Self::RawSkeleton),
            other => Err(format!("unknown feature space {other:?} (expected projection, hidden or raw)")),
        }
    }
}

/// Produces per-frame feature rows for a sequence.
#[derive(Clone, Copy, Debug)]
pub enum Featurizer<'a> {
    Tan(&'a TanWeights, FeatureSpace),
    RawSkeleton,
}

impl Featurizer<'_> {
    pub fn space(&self) -> FeatureSpace {
        match self {
            Self::Tan(_, s) => *s,
            Self::RawSkeleton => FeatureSpace::RawSkeleton,
        }
    }

    pub fn features(&self, seq: &SkeletonSequence) -> Result<Tensor, LexiconError> {
        match *self {
            Self::RawSkeleton | Self::Tan(_, FeatureSpace::RawSkeleton) => {
                let c = seq.center_normalize();
                Ok(Tensor::new(vec![c.frames(), c.frame_dim()], c.data().to_vec()).expect("frame matrix"))
            }
            Self::Tan(w, FeatureSpace::Projection) => Ok(w.embed(seq)?.v),
            Self::Tan(w, FeatureSpace::Hidden) => Ok(w.embed(seq)?.z),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconMeta {
    pub seed: u64,
    pub inertia: f64,
    pub iterations: usize,
    pub space: FeatureSpace,
    /// Digest of the checkpoint whose features were clustered.
    pub checkpoint_digest: String,
    pub corpus_id: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// K centroids of dimension `dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    pub meta: LexiconMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansOutcome {
    pub lexicon: Lexicon,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid, lowest index on ties.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(points: &[f64], centroids: &[f64], dim: usize) -> Vec<(usize, f64)> {
    points
        .par_chunks(dim * 256)
        .flat_map_iter(|block| block.chunks_exact(dim).map(|p| nearest(p, centroids, dim)).collect::<Vec<_>>())
        .collect()
}

/// Lloyd's algorithm with k-means++ seeding over `points` (`m x dim`,
/// row-major). Stops when no centroid moves by `tol` or more, or after
/// `max_iters` iterations. A cluster left empty is re-seeded with the point
/// farthest from its centroid.
pub fn kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansOutcome, LexiconError> {
    if k == 0 {
        return Err(LexiconError::ZeroClusters);
    }
    if dim == 0 || points.len() % dim != 0 {
        return Err(LexiconError::DimMismatch {
            expected: dim,
            found: points.len(),
        });
    }
    let m = points.len() / dim;
    if m < k {
        return Err(LexiconError::TooFewPoints { k, points: m });
    }
    if let Some(i) = points.iter().position(|v| !v.is_finite()) {
        return Err(LexiconError::NonFinite(i / dim));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..m);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        centroids.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), row(pick)));
        }
    }

    let mut history = Vec::new();
    let mut iterations = 0;
    let mut assignment = assign_all(points, &centroids, dim);
    loop {
        history.push(assignment.iter().map(|&(_, d)| d).sum());
        if iterations == max_iters {
            break;
        }
        iterations += 1;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; m];
        for c in 0..k {
            if counts[c] > 0 {
                for (n, s) in next[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *n = s / counts[c] as f64;
                }
            } else {
                let far = (0..m)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| assignment[a].1.total_cmp(&assignment[b].1).then(b.cmp(&a)))
                    .expect("m >= k");
                taken[far] = true;
                next[c * dim..(c + 1) * dim].copy_from_slice(row(far));
            }
        }
        let shift = next
            .chunks_exact(dim)
            .zip(centroids.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        assignment = assign_all(points, &centroids, dim);
        if shift < tol {
            history.push(assignment.iter().map(|&(_, d)| d).sum());
            break;
        }
    }
    let inertia = *history.last().expect("at least one assignment");
    Ok(KMeansOutcome {
        lexicon: Lexicon {
            k,
            dim,
            centroids,
            meta: LexiconMeta {
                seed,
                inertia,
                iterations,
                space: FeatureSpace::Projection,
                checkpoint_digest: String::new(),
                corpus_id: String::new(),
                extra: BTreeMap::new(),
            },
        },
        inertia_history: history,
    })
}

#[derive(Serialize, Deserialize)]
struct LexiconHeader {
    format: String,
    version: u32,
    k: usize,
    dim: usize,
    #[serde(flatten)]
    meta: LexiconMeta,
}

impl Lexicon {
    pub fn new(k: usize, dim: usize, centroids: Vec<f64>, meta: LexiconMeta) -> Result<Self, LexiconError> {
        if k == 0 {
            return Err(LexiconError::ZeroClusters);
        }
        if centroids.len() != k * dim {
            return Err(LexiconError::DimMismatch {
                expected: k * dim,
                found: centroids.len(),
            });
        }
        if let Some(i) = centroids.iter().position(|v| !v.is_finite()) {
            return Err(LexiconError::NonFinite(i / dim.max(1)));
        }
        Ok(Self { k, dim, centroids, meta })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroids(&self) -> &[f64] {
        &self.centroids
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    /// Writes the lexicon; refuses to overwrite an existing file.
    pub fn save(&self, path: &Path) -> Result<(), LexiconError> {
        let io = |source| LexiconError::Io {
            path: path.to_path_buf(),
            source,
        };
        let header = LexiconHeader {
            format: LEXICON_FORMAT.into(),
            version: LEXICON_VERSION,
            k: self.k,
            dim: self.dim,
            meta: self.meta.clone(),
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        for v in &self.centroids {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = File::options().write(true).create_new(true).open(path).map_err(io)?;
        f.write_all(&bytes).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let bad = |reason: String| LexiconError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let f = File::open(path).map_err(|source| LexiconError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        let h: LexiconHeader = serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("malformed header: {e}")))?;
        if h.format != LEXICON_FORMAT || h.version != LEXICON_VERSION {
            return Err(bad(format!("unsupported format {} v{}", h.format, h.version)));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| bad(e.to_string()))?;
        if payload.len() != h.k * h.dim * 8 {
            return Err(bad(format!(
                "payload holds {} bytes, expected {}",
                payload.len(),
                h.k * h.dim * 8
            )));
        }
        let centroids = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::new(h.k, h.dim, centroids, h.meta).map_err(|e| bad(e.to_string()))
    }
}

/// Nearest-centroid label per frame row, lowest index on ties.
pub fn assign(frames: &Tensor, lexicon: &Lexicon) -> Result<Vec<usize>, LexiconError> {
    if frames.cols() != lexicon.dim {
        return Err(LexiconError::DimMismatch {
            expected: lexicon.dim,
            found: frames.cols(),
        });
    }
    Ok(frames
        .data()
        .chunks_exact(lexicon.dim)
        .map(|f| nearest(f, &lexicon.centroids, lexicon.dim).0)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub acton: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Maximal runs of one acton id tiling `[0, T)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenStream {
    pub segments: Vec<Segment>,
}

impl TokenStream {
    pub fn frames(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end)
    }

    /// One acton id per segment.
    pub fn tokens(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.acton).collect()
    }

    /// Expands back to one label per frame.
    pub fn frame_labels(&self) -> Vec<usize> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat(s.acton).take(s.len()))
            .collect()
    }

    /// Checks exact tiling of `[0, frames)` and maximality of runs.
    pub fn check(&self, frames: usize) -> Result<(), String> {
        let mut at = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if s.start != at || s.end <= s.start {
                return Err(format!("segment {i} {:?} does not continue at frame {at}", (s.start, s.end)));
            }
            if i > 0 && self.segments[i - 1].acton == s.acton {
                return Err(format!("segments {} and {i} share acton {}", i - 1, s.acton));
            }
            at = s.end;
        }
        if at != frames {
            return Err(format!("segments cover {at} of {frames} frames"));
        }
        Ok(())
    }
}

pub fn segment(labels: &[usize]) -> TokenStream {
    let mut segments: Vec<Segment> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match segments.last_mut() {
            Some(s) if s.acton == l => s.end = t + 1,
            _ => segments.push(Segment {
                start: t,
                end: t + 1,
                acton: l,
            }),
        }
    }
    TokenStream { segments }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenized {
    pub stream: TokenStream,
    pub labels: Vec<usize>,
}

/// Features, labels and token stream of every sequence, in input order.
pub fn tokenize_corpus(
    sequences: &[SkeletonSequence],
    featurizer: Featurizer<'_>,
    lexicon: &Lexicon,
) -> Result<Vec<Tokenized>, LexiconError> {
    sequences
        .par_iter()
        .map(|seq| {
            let f = featurizer.features(seq)?;
            let labels = assign(&f, lexicon)?;
            Ok(Tokenized {
                stream: segment(&labels),
                labels,
            })
        })
        .collect()
}

/// Stacks the features of every sequence into one `M x dim` buffer.
pub fn corpus_features(sequences: &[SkeletonSequence], featurizer: Featurizer<'_>) -> Result<(Vec<f64>, usize), LexiconError> {
    let per_seq: Vec<Tensor> = sequences
        .par_iter()
        .map(|s| featurizer.features(s))
        .collect::<Result<_, _>>()?;
    let dim = per_seq.first().map_or(0, Tensor::cols);
    let mut out = Vec::with_capacity(per_seq.iter().map(Tensor::numel).sum());
    for t in per_seq {
        out.extend(t.into_data());
    }
    Ok((out, dim))
}

/// Rows `sequence,start,end,acton` under a header line.
pub fn tokens_csv(streams: &[TokenStream]) -> String {
    let mut s = String::from("sequence,start,end,acton\n");
    for (i, stream) in streams.iter().enumerate() {
        for seg in &stream.segments {
            let _ = writeln!(s, "{i},{},{},{}", seg.start, seg.end, seg.acton);
        }
    }
    s
}
