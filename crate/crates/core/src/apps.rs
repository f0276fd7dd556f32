//! Downstream applications over acton token streams: sliding-window action
//! detection through a max-agreement acton-to-class map, and motion
//! composition by splicing stored acton instances.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{assign, Featurizer, Lexicon, LexiconError, Tokenized};
use crate::metrics::{temporal_iou, Detection};
use crate::motion::{MotionError, SkeletonSequence};

#[derive(Debug, Error)]
pub enum AppsError {
    #[error("sequence {sequence}: {tokens} token labels but {annotations} annotations")]
    LengthMismatch {
        sequence: usize,
        tokens: usize,
        annotations: usize,
    },
    #[error("acton {acton} outside the lexicon of size {k}")]
    ActonOutOfRange { acton: usize, k: usize },
    #[error("acton {0} has no stored instance")]
    EmptyCluster(usize),
    #[error("invalid option: {0}")]
    Config(String),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Motion(#[from] MotionError),
}

/// Acton id to action class, learned by maximum frame agreement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActonClassMap {
    pub classes: Vec<usize>,
    /// Fraction of the acton's training frames carrying its mapped class.
    pub agreement: Vec<f64>,
    pub background: usize,
}

impl ActonClassMap {
    pub fn k(&self) -> usize {
        self.classes.len()
    }

    pub fn class_of(&self, acton: usize) -> usize {
        self.classes.get(acton).copied().unwrap_or(self.background)
    }

    /// Per-frame class predictions for a sequence of acton labels.
    pub fn classify(&self, actons: &[usize]) -> Vec<usize> {
        actons.iter().map(|&a| self.class_of(a)).collect()
    }

    /// Rows `acton,class,agreement` under a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("acton,class,agreement\n");
        for (k, (c, a)) in self.classes.iter().zip(&self.agreement).enumerate() {
            s.push_str(&format!("{k},{c},{a}\n"));
        }
        s
    }
}

/// Maps every acton to the action class most frequent among its training
/// frames. Ties go to the lower class; unseen actons map to `background`.
pub fn learn_acton_class_map(
    tokens: &[Vec<usize>],
    annotations: &[Vec<usize>],
    k: usize,
    background: usize,
) -> Result<ActonClassMap, AppsError> {
    if tokens.len() != annotations.len() {
        return Err(AppsError::LengthMismatch {
            sequence: tokens.len().min(annotations.len()),
            tokens: tokens.len(),
            annotations: annotations.len(),
        });
    }
    let classes = annotations.iter().flatten().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; classes]; k];
    for (i, (t, a)) in tokens.iter().zip(annotations).enumerate() {
        if t.len() != a.len() {
            return Err(AppsError::LengthMismatch {
                sequence: i,
                tokens: t.len(),
                annotations: a.len(),
            });
        }
        for (&acton, &class) in t.iter().zip(a) {
            if acton >= k {
                return Err(AppsError::ActonOutOfRange { acton, k });
            }
            counts[acton][class] += 1;
        }
    }
    let mut map = Vec::with_capacity(k);
    let mut agreement = Vec::with_capacity(k);
    for row in &counts {
        let total: usize = row.iter().sum();
        if total == 0 {
            map.push(background);
            agreement.push(0.0);
            continue;
        }
        let mut best = 0;
        for (c, &n) in row.iter().enumerate() {
            if n > row[best] {
                best = c;
            }
        }
        map.push(best);
        agreement.push(row[best] as f64 / total as f64);
    }
    Ok(ActonClassMap {
        classes: map,
        agreement,
        background,
    })
}

/// How a window's score for its argmax class is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowScore {
    /// Fraction of window frames mapped to the class.
    Agreement,
    /// Agreement inside the window times one minus the agreement in the two
    /// flanking context regions of a quarter window each.
    #[default]
    ContextContrast,
}

impl std::str::FromStr for WindowScore {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "agreement" => Ok(Self::Agreement),
            "context_contrast" | "contrast" => Ok(Self::ContextContrast),
            _ => Err(format!("unknown window score {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Window lengths in seconds.
    pub scales_seconds: Vec<f64>,
    /// Stride as a fraction of the window length.
    pub stride_fraction: f64,
    pub nms_iou: f64,
    pub score: WindowScore,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            scales_seconds: vec![0.5, 1.0, 2.0, 4.0],
            stride_fraction: 0.25,
            nms_iou: 0.5,
            score: WindowScore::default(),
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<(), AppsError> {
        if self.scales_seconds.is_empty() {
            return Err(AppsError::Config("at least one window scale is required".into()));
        }
        if self.scales_seconds.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(AppsError::Config("window scales must be positive".into()));
        }
        if !(self.stride_fraction > 0.0 && self.stride_fraction.is_finite()) {
            return Err(AppsError::Config("stride_fraction must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(AppsError::Config("nms_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Window lengths in frames at `fps`, at least one frame each.
    pub fn scales_frames(&self, fps: f64) -> Vec<usize> {
        self.scales_seconds
            .iter()
            .map(|s| ((s * fps).round() as usize).max(1))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectOutcome {
    pub detections: Vec<Detection>,
    /// Window lengths longer than the sequence.
    pub skipped_scales: Vec<usize>,
}

fn window_starts(frames: usize, scale: usize, stride: usize) -> Vec<usize> {
    let last = frames - scale;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Orders detections by confidence, then longer windows, then position.
pub fn rank_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then((b.end - b.start).cmp(&(a.end - a.start)))
            .then(a.sequence.cmp(&b.sequence))
            .then(a.start.cmp(&b.start))
            .then(a.class.cmp(&b.class))
    });
}

/// Greedy per-class non-maximum suppression on ranked detections.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    rank_detections(&mut dets);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let clash = kept.iter().any(|k| {
            k.class == d.class && k.sequence == d.sequence && temporal_iou(k.start, k.end, d.start, d.end) >= iou
        });
        if !clash {
            kept.push(d);
        }
    }
    kept
}

/// Sliding-window detection over per-frame acton labels of one sequence.
pub fn detect_labels(
    sequence: usize,
    actons: &[usize],
    fps: f64,
    map: &ActonClassMap,
    cfg: &DetectConfig,
) -> Result<DetectOutcome, AppsError> {
    cfg.validate()?;
    let frames = actons.len();
    let classes = map.classify(actons);
    let n_class = classes.iter().copied().filter(|&c| c != map.background).max().map_or(0, |m| m + 1);
    // prefix[c][t] = frames of class c in [0, t)
    let mut prefix = vec![vec![0usize; frames + 1]; n_class];
    for (t, &c) in classes.iter().enumerate() {
        for (k, p) in prefix.iter_mut().enumerate() {
            p[t + 1] = p[t] + usize::from(k == c);
        }
    }
    let count = |c: usize, s: usize, e: usize| prefix[c][e] - prefix[c][s];

    let mut outcome = DetectOutcome::default();
    let mut raw = Vec::new();
    for scale in cfg.scales_frames(fps) {
        if scale > frames {
            outcome.skipped_scales.push(scale);
            continue;
        }
        let stride = ((scale as f64 * cfg.stride_fraction).round() as usize).max(1);
        let flank = (scale / 4).max(1);
        let found: Vec<Detection> = window_starts(frames, scale, stride)
            .par_iter()
            .filter_map(|&start| {
                let end = start + scale;
                let (mut best, mut best_n) = (None, 0);
                for c in (0..n_class).filter(|&c| c != map.background) {
                    let n = count(c, start, end);
                    if n > best_n {
                        best = Some(c);
                        best_n = n;
                    }
                }
                let class = best?;
                let others: usize = (0..n_class).filter(|&c| c != map.background).map(|c| count(c, start, end)).sum();
                if scale - others > best_n {
                    return None;
                }
                let inside = best_n as f64 / scale as f64;
                let confidence = match cfg.score {
                    WindowScore::Agreement => inside,
                    WindowScore::ContextContrast => {
                        let (ls, re) = (start.saturating_sub(flank), (end + flank).min(frames));
                        let context = (start - ls) + (re - end);
                        let outside = if context == 0 {
                            0.0
                        } else {
                            (count(class, ls, start) + count(class, end, re)) as f64 / context as f64
                        };
                        inside * (1.0 - outside)
                    }
                };
                Some(Detection {
                    sequence,
                    class,
                    start,
                    end,
                    confidence,
                })
            })
            .collect();
        raw.extend(found);
    }
    outcome.detections = nms(raw, cfg.nms_iou);
    Ok(outcome)
}

/// Tokenizes `seq` and runs [`detect_labels`] on the acton labels.
pub fn detect(
    sequence: usize,
    seq: &SkeletonSequence,
    featurizer: Featurizer<'_>,
    lexicon: &Lexicon,
    map: &ActonClassMap,
    cfg: &DetectConfig,
) -> Result<DetectOutcome, AppsError> {
    let labels = assign(&featurizer.features(seq)?, lexicon)?;
    detect_labels(sequence, &labels, seq.fps(), map, cfg)
}

/// Rows `sequence,class,start,end,confidence` under a header line.
pub fn detections_csv(dets: &[Detection]) -> String {
    let mut s = String::from("sequence,class,start,end,confidence\n");
    for d in dets {
        s.push_str(&format!("{},{},{},{},{}\n", d.sequence, d.class, d.start, d.end, d.confidence));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeConfig {
    pub words: usize,
    /// Largest accepted L2 distance between center-normalized boundary frames.
    pub boundary_threshold: f64,
    pub blend_frames: usize,
    /// Candidates drawn per word before falling back to the nearest one seen.
    pub retry_budget: usize,
}

impl Default for ComposeConfig {
    fn default() -> Self {
        Self {
            words: 8,
            boundary_threshold: 1.0,
            blend_frames: 5,
            retry_budget: 64,
        }
    }
}

impl ComposeConfig {
    pub fn validate(&self) -> Result<(), AppsError> {
        if self.words == 0 {
            return Err(AppsError::Config("word count must be at least 1".into()));
        }
        if !(self.boundary_threshold > 0.0 && self.boundary_threshold.is_finite()) {
            return Err(AppsError::Config("boundary_threshold must be positive".into()));
        }
        if self.blend_frames == 0 {
            return Err(AppsError::Config("blend_frames must be at least 1".into()));
        }
        if self.retry_budget == 0 {
            return Err(AppsError::Config("retry_budget must be at least 1".into()));
        }
        Ok(())
    }
}

/// A stored acton occurrence: frames `[start, end)` of corpus sequence `sequence`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub sequence: usize,
    pub start: usize,
    pub end: usize,
}

/// The blend inserted between two consecutive words.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splice {
    /// Output frames `[start, end)` are interpolated.
    pub start: usize,
    pub end: usize,
    /// Boundary distance of the two joined instances.
    pub distance: f64,
    /// The candidate was the nearest fallback rather than an accepted draw.
    pub relaxed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComposedMotion {
    pub words: Vec<usize>,
    pub instances: Vec<Instance>,
    pub sequence: SkeletonSequence,
    pub splices: Vec<Splice>,
}

/// Every token segment of the corpus, grouped by acton id.
pub fn instance_table(tokenized: &[Tokenized], k: usize) -> Result<Vec<Vec<Instance>>, AppsError> {
    let mut table = vec![Vec::new(); k];
    for (i, t) in tokenized.iter().enumerate() {
        for seg in &t.stream.segments {
            if seg.acton >= k {
                return Err(AppsError::ActonOutOfRange { acton: seg.acton, k });
            }
            table[seg.acton].push(Instance {
                sequence: i,
                start: seg.start,
                end: seg.end,
            });
        }
    }
    Ok(table)
}

fn centered(frame: &[f64]) -> Vec<f64> {
    let j = frame.len() / 3;
    let mut c = [0.0; 3];
    for p in frame.chunks_exact(3) {
        for a in 0..3 {
            c[a] += p[a] / j as f64;
        }
    }
    frame.chunks_exact(3).flat_map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect()
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_joint(frame: &[f64]) -> [f64; 3] {
    let j = frame.len() / 3;
    let mut c = [0.0; 3];
    for p in frame.chunks_exact(3) {
        for a in 0..3 {
            c[a] += p[a] / j as f64;
        }
    }
    c
}

/// Builds a random motion of `cfg.words` acton instances.
///
/// `words` fixes the acton sequence; otherwise actons are drawn uniformly
/// among those with stored instances. Each next instance is accepted when its
/// first frame lies within `boundary_threshold` of the previous last frame
/// (both center-normalized); after `retry_budget` rejections the nearest draw
/// is used and the blend is lengthened so no blended step moves a joint
/// further than `boundary_threshold / blend_frames`. Every instance after the
/// first is translated so the splice frames share their joint mean.
pub fn compose<R: Rng + ?Sized>(
    sequences: &[SkeletonSequence],
    tokenized: &[Tokenized],
    lexicon: &Lexicon,
    words: Option<&[usize]>,
    cfg: &ComposeConfig,
    rng: &mut R,
) -> Result<ComposedMotion, AppsError> {
    cfg.validate()?;
    let table = instance_table(tokenized, lexicon.k())?;
    if let Some(w) = words {
        if w.is_empty() {
            return Err(AppsError::Config("word list is empty".into()));
        }
        for &a in w {
            if a >= lexicon.k() {
                return Err(AppsError::ActonOutOfRange { acton: a, k: lexicon.k() });
            }
            if table[a].is_empty() {
                return Err(AppsError::EmptyCluster(a));
            }
        }
    }
    let available: Vec<usize> = (0..lexicon.k()).filter(|&a| !table[a].is_empty()).collect();
    if available.is_empty() {
        return Err(AppsError::EmptyCluster(0));
    }
    let count = words.map_or(cfg.words, <[usize]>::len);
    let draw = |rng: &mut R, w: usize| -> (usize, Instance) {
        let acton = match words {
            Some(ws) => ws[w],
            None => available[rng.gen_range(0..available.len())],
        };
        let list = &table[acton];
        (acton, list[rng.gen_range(0..list.len())])
    };

    let (first_acton, first) = draw(rng, 0);
    let mut chosen = vec![(first_acton, first, 0.0, false)];
    for w in 1..count {
        let prev = chosen[w - 1].1;
        let tail = centered(sequences[prev.sequence].frame(prev.end - 1));
        let mut nearest: Option<(usize, Instance, f64)> = None;
        let mut accepted = None;
        for _ in 0..cfg.retry_budget {
            let (acton, inst) = draw(rng, w);
            let d = l2(&tail, &centered(sequences[inst.sequence].frame(inst.start)));
            if d <= cfg.boundary_threshold {
                accepted = Some((acton, inst, d, false));
                break;
            }
            if nearest.map_or(true, |(_, _, best)| d < best) {
                nearest = Some((acton, inst, d));
            }
        }
        let pick = accepted.unwrap_or_else(|| {
            let (a, i, d) = nearest.expect("retry budget is at least 1");
            (a, i, d, true)
        });
        chosen.push(pick);
    }

    let src = &sequences[first.sequence];
    let width = src.frame_dim();
    let mut data: Vec<f64> = src.data()[first.start * width..first.end * width].to_vec();
    let mut splices = Vec::new();
    let step_bound = cfg.boundary_threshold / cfg.blend_frames as f64;
    for &(_, inst, _, relaxed) in &chosen[1..] {
        let seq = &sequences[inst.sequence];
        if seq.frame_dim() != width {
            return Err(AppsError::Config("corpus sequences differ in joint count".into()));
        }
        let prev = data[data.len() - width..].to_vec();
        let head = seq.frame(inst.start);
        let (mp, mh) = (mean_joint(&prev), mean_joint(head));
        let shift = [mp[0] - mh[0], mp[1] - mh[1], mp[2] - mh[2]];
        let mut body: Vec<f64> = seq.data()[inst.start * width..inst.end * width].to_vec();
        for p in body.chunks_exact_mut(3) {
            for a in 0..3 {
                p[a] += shift[a];
            }
        }
        let distance = l2(&prev, &body[..width]);
        let mut blend = cfg.blend_frames;
        while distance / (blend + 1) as f64 > step_bound {
            blend += 1;
        }
        let start = data.len() / width;
        for t in 0..blend {
            let w = (t + 1) as f64 / (blend + 1) as f64;
            data.extend(prev.iter().zip(&body[..width]).map(|(a, b)| a + (b - a) * w));
        }
        splices.push(Splice {
            start,
            end: start + blend,
            distance,
            relaxed,
        });
        data.extend_from_slice(&body);
    }
    let frames = data.len() / width;
    let sequence = SkeletonSequence::new(frames, src.joints(), src.fps(), data)?;
    Ok(ComposedMotion {
        words: chosen.iter().map(|c| c.0).collect(),
        instances: chosen.iter().map(|c| c.1).collect(),
        sequence,
        splices,
    })
}

/// Largest per-joint displacement between consecutive frames `t-1, t` for
/// `t` in `range`.
pub fn max_joint_step(seq: &SkeletonSequence, range: std::ops::Range<usize>) -> f64 {
    let mut best: f64 = 0.0;
    for t in range.start.max(1)..range.end.min(seq.frames()) {
        for j in 0..seq.joints() {
            let (a, b) = (seq.joint(t - 1, j), seq.joint(t, j));
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
            best = best.max(d);
        }
    }
    best
}

#[cfg(test)]
mod tests;
