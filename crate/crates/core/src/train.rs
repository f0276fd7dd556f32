//! Frame-wise contrastive training of the alignment network, plus the
//! time-contrastive triplet and cycle-consistency baselines.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{make_view_pair, AugmentRanges};
use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::motion::LabeledCorpus;
use crate::tan::{encode, frames_tensor, project, Bound, TanConfig, TanError, TanWeights};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Added under the square root of triplet distances.
pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] TanError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("exclude_same_clip needs batch_size >= 2: clip {clip} has no negatives")]
    NoNegatives { clip: usize },
    #[error("no sequence has at least {frames} frames")]
    NoEligibleSequences { frames: usize },
    #[error("view of {frames} frames cannot host {what}")]
    ViewTooShort { frames: usize, what: String },
    #[error("non-finite loss at step {step} (lr {lr:e}, grad norm {grad_norm:e})")]
    NonFiniteLoss { step: usize, lr: f64, grad_norm: f64 },
    #[error("non-finite weights after step {step}: {source}")]
    NonFiniteWeights { step: usize, source: TanError },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// Every frame of the other view except the positive.
    AllFrames,
    /// Only frames of other clips.
    ExcludeSameClip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Tan,
    Tcn,
    Tcc,
}

impl std::str::FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tan" => Ok(Self::Tan),
            "tcn" => Ok(Self::Tcn),
            "tcc" => Ok(Self::Tcc),
            other => Err(format!("unknown loss {other:?} (expected tan, tcn or tcc)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcnConfig {
    pub anchors: usize,
    pub pos_window: usize,
    pub neg_multiplier: usize,
    pub margin: f64,
}

impl Default for TcnConfig {
    fn default() -> Self {
        Self {
            anchors: 16,
            pos_window: 2,
            neg_multiplier: 4,
            margin: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Crop length; must equal the model's `sequence_length`.
    pub frames: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub temperature: f64,
    pub negative_mode: NegativeMode,
    pub seed: u64,
    pub loss: LossKind,
    pub augment: AugmentRanges,
    pub tcn: TcnConfig,
    pub tcc_temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            frames: 64,
            peak_lr: 2.5e-5,
            weight_decay: 1e-6,
            grad_clip_norm: 0.5,
            epochs: 500,
            warmup_epochs: 50,
            temperature: 0.1,
            negative_mode: NegativeMode::ExcludeSameClip,
            seed: 0,
            loss: LossKind::Tan,
            augment: AugmentRanges::default(),
            tcn: TcnConfig::default(),
            tcc_temperature: 0.1,
        }
    }
}

impl TrainConfig {
    /// Schedule sized for laptop-scale runs of the desk model.
    pub fn desk() -> Self {
        Self {
            peak_lr: 1e-3,
            epochs: 30,
            warmup_epochs: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.frames == 0 {
            return bad("batch_size and frames must be at least 1".into());
        }
        for (name, v) in [
            ("peak_lr", self.peak_lr),
            ("grad_clip_norm", self.grad_clip_norm),
            ("temperature", self.temperature),
            ("tcc_temperature", self.tcc_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.loss == LossKind::Tan && self.negative_mode == NegativeMode::ExcludeSameClip && self.batch_size < 2 {
            return Err(TrainError::NoNegatives { clip: 0 });
        }
        self.augment.validate().map_err(TrainError::Config)
    }
}

/// Negative `(clip, frame)` indices of the other view for reference frame
/// `(n, i)` in a batch of `clips` clips of `frames` frames each.
pub fn negative_set(n: usize, i: usize, mode: NegativeMode, clips: usize, frames: usize) -> Vec<(usize, usize)> {
    (0..clips)
        .flat_map(|k| (0..frames).map(move |j| (k, j)))
        .filter(|&(k, j)| match mode {
            NegativeMode::AllFrames => k != n || j != i,
            NegativeMode::ExcludeSameClip => k != n,
        })
        .collect()
}

/// Stacked projected frames of a batch of clips.
#[derive(Clone, Debug)]
pub struct ViewBatch {
    pub v: Var,
    pub ranges: Vec<Range<usize>>,
}

fn rows_of(ranges: &[Range<usize>]) -> usize {
    ranges.last().map_or(0, |r| r.end)
}

/// Column mask over the other view: the allowed negatives of every row.
fn negative_mask(
    rows: &[Range<usize>],
    cols: &[Range<usize>],
    mode: NegativeMode,
) -> Option<Vec<bool>> {
    match mode {
        NegativeMode::AllFrames => None,
        NegativeMode::ExcludeSameClip => {
            let (m, n) = (rows_of(rows), rows_of(cols));
            let mut mask = vec![true; m * n];
            for (clip, r) in rows.iter().enumerate() {
                let c = &cols[clip];
                for row in r.clone() {
                    mask[row * n + c.start..row * n + c.end].fill(false);
                }
            }
            Some(mask)
        }
    }
}

/// Symmetric frame-level NT-Xent.
///
/// `pairs[n]` lists the corresponding `(i_a, i_b)` frames of clip `n`. Each
/// pair contributes one cross-entropy term per direction over the positive
/// and the negatives drawn from the opposite view; the total is divided by
/// twice the number of pairs.
pub fn frame_nt_xent(
    g: &mut Graph,
    a: &ViewBatch,
    b: &ViewBatch,
    pairs: &[Vec<(usize, usize)>],
    mode: NegativeMode,
    temperature: f64,
) -> Result<Var, TrainError> {
    let clips = a.ranges.len();
    if b.ranges.len() != clips || pairs.len() != clips {
        return Err(TrainError::Config("views and correspondences disagree on the clip count".into()));
    }
    if mode == NegativeMode::ExcludeSameClip && clips < 2 {
        return Err(TrainError::NoNegatives { clip: 0 });
    }
    let mut ab = Vec::new();
    let mut ba = Vec::new();
    for (n, p) in pairs.iter().enumerate() {
        for &(ia, ib) in p {
            let (ra, rb) = (a.ranges[n].start + ia, b.ranges[n].start + ib);
            ab.push((ra, rb));
            ba.push((rb, ra));
        }
    }
    if ab.is_empty() {
        return Err(TrainError::Config("no corresponding frames in the batch".into()));
    }
    let bt = g.transpose(b.v)?;
    let s = g.matmul(a.v, bt)?;
    let s = g.scale(s, 1.0 / temperature);
    let st = g.transpose(s)?;
    let mask_ab = negative_mask(&a.ranges, &b.ranges, mode);
    let mask_ba = negative_mask(&b.ranges, &a.ranges, mode);
    let l_ab = g.cross_entropy(s, &ab, mask_ab.as_deref())?;
    let l_ba = g.cross_entropy(st, &ba, mask_ba.as_deref())?;
    let s_ab = g.sum(l_ab);
    let s_ba = g.sum(l_ba);
    let total = g.add(s_ab, s_ba)?;
    Ok(g.scale(total, 1.0 / (2 * ab.len()) as f64))
}

/// Triplet margin loss with anchors and positives from view `a` and
/// negatives from view `b`.
///
/// Anchor `i` maps to `j* = round(i * T_b / T_a)` in the other view;
/// negatives lie more than `2 * pos_window` frames away from `j*`.
pub fn tcn_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    va: Var,
    vb: Var,
    cfg: &TcnConfig,
    rng: &mut R,
) -> Result<Var, TrainError> {
    let (ta, tb) = (g.shape(va)[0], g.shape(vb)[0]);
    if cfg.anchors == 0 || cfg.anchors > ta {
        return Err(TrainError::ViewTooShort {
            frames: ta,
            what: format!("{} anchors", cfg.anchors),
        });
    }
    if ta < 2 || cfg.pos_window == 0 {
        return Err(TrainError::ViewTooShort {
            frames: ta,
            what: format!("a positive window of {}", cfg.pos_window),
        });
    }
    let exclusion = 2 * cfg.pos_window;
    let anchors = rand::seq::index::sample(rng, ta, cfg.anchors).into_vec();
    let (mut ia, mut ip, mut ineg) = (Vec::new(), Vec::new(), Vec::new());
    for &i in &anchors {
        let lo = i.saturating_sub(cfg.pos_window);
        let hi = (i + cfg.pos_window).min(ta - 1);
        let p = loop {
            let p = rng.gen_range(lo..=hi);
            if p != i {
                break p;
            }
        };
        let center = ((i * tb) as f64 / ta as f64).round() as i64;
        let candidates: Vec<usize> = (0..tb)
            .filter(|&j| (j as i64 - center).unsigned_abs() as usize > exclusion)
            .collect();
        if candidates.is_empty() {
            return Err(TrainError::ViewTooShort {
                frames: tb,
                what: format!("negatives outside +-{exclusion} frames"),
            });
        }
        for _ in 0..cfg.neg_multiplier {
            ia.push(i);
            ip.push(p);
            ineg.push(candidates[rng.gen_range(0..candidates.len())]);
        }
    }
    let a = g.gather_rows(va, &ia)?;
    let p = g.gather_rows(va, &ip)?;
    let n = g.gather_rows(vb, &ineg)?;
    let d_ap = row_distance(g, a, p)?;
    let d_an = row_distance(g, a, n)?;
    triplet_terms(g, d_ap, d_an, cfg.margin)
}

fn row_distance(g: &mut Graph, x: Var, y: Var) -> Result<Var, AutodiffError> {
    let d = g.sub(x, y)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_last(sq)?;
    let s = g.add_scalar(s, DISTANCE_EPS);
    Ok(g.sqrt(s))
}

/// Mean of `max(0, d_ap - d_an + margin)`.
pub fn triplet_terms(g: &mut Graph, d_ap: Var, d_an: Var, margin: f64) -> Result<Var, TrainError> {
    let diff = g.sub(d_ap, d_an)?;
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

/// Cycle-back cross-entropy through a soft nearest neighbour in view `b`.
pub fn tcc_loss(g: &mut Graph, va: Var, vb: Var, temperature: f64) -> Result<Var, TrainError> {
    let ta = g.shape(va)[0];
    if ta == 0 || g.shape(vb)[0] == 0 {
        return Err(TrainError::ViewTooShort {
            frames: 0,
            what: "a cycle".into(),
        });
    }
    let d = g.sq_dist(va, vb)?;
    let logits = g.scale(d, -1.0 / temperature);
    let alpha = g.softmax(logits, 1)?;
    let soft = g.matmul(alpha, vb)?;
    let back = g.sq_dist(soft, va)?;
    let back = g.scale(back, -1.0 / temperature);
    let rows: Vec<(usize, usize)> = (0..ta).map(|i| (i, i)).collect();
    let ce = g.cross_entropy(back, &rows, None)?;
    Ok(g.mean(ce))
}

/// Linear warmup to `peak` over `warmup_steps`, then half-cosine decay to 0
/// at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, peak: f64) -> f64 {
    let step = step.min(total_steps);
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    let span = total_steps - warmup_steps;
    if span == 0 {
        return peak;
    }
    let progress = (step - warmup_steps) as f64 / span as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(shapes: impl IntoIterator<Item = usize>, weight_decay: f64) -> Self {
        let (m, v) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self {
            m,
            v,
            t: 0,
            weight_decay,
        }
    }

    pub fn step<'a>(&mut self, params: impl Iterator<Item = &'a mut Tensor>, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: TanWeights,
    pub history: Vec<EpochStats>,
    /// Sequences shorter than the crop length.
    pub skipped: usize,
    pub steps: usize,
}

/// Per-epoch metrics as comma-separated text with a header row.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_loss,lr,grad_norm_mean,grad_norm_max\n");
    for e in history {
        let _ = writeln!(
            s,
            "{},{:.9},{:.6e},{:.6},{:.6}",
            e.epoch, e.mean_loss, e.lr, e.grad_norm_mean, e.grad_norm_max
        );
    }
    s
}

/// Gradient-descent updates per epoch for `eligible` sequences.
pub fn steps_per_epoch(eligible: usize, batch_size: usize) -> usize {
    eligible.div_ceil(batch_size)
}

/// Trains from a fresh initialization seeded by `train.seed`.
pub fn train_tan(corpus: &LabeledCorpus, tan: &TanConfig, train: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let weights = TanWeights::init(tan, train.seed)?;
    train_from(corpus, weights, train)
}

/// Continues training from `weights`.
pub fn train_from(
    corpus: &LabeledCorpus,
    mut weights: TanWeights,
    train: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train.validate()?;
    let tan = weights.config().clone();
    if train.frames != tan.sequence_length {
        return Err(TrainError::Config(format!(
            "crop length {} differs from the model sequence_length {}",
            train.frames, tan.sequence_length
        )));
    }
    let eligible: Vec<usize> = (0..corpus.len())
        .filter(|&s| corpus.sequences()[s].frames() >= train.frames)
        .collect();
    let skipped = corpus.len() - eligible.len();
    if train.epochs == 0 {
        return Ok(TrainOutcome {
            weights,
            history: Vec::new(),
            skipped,
            steps: 0,
        });
    }
    if eligible.is_empty() {
        return Err(TrainError::NoEligibleSequences { frames: train.frames });
    }
    let per_epoch = steps_per_epoch(eligible.len(), train.batch_size);
    let total = per_epoch * train.epochs;
    let warmup = per_epoch * train.warmup_epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x7261_696e);
    let mut adam = AdamW::new(weights.params().iter().map(|(_, t)| t.numel()), train.weight_decay);
    let mut history = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        let mut order = eligible.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut norm_max, mut lr) = (0.0, 0.0, 0.0f64, 0.0);
        for b in 0..per_epoch {
            let batch: Vec<usize> = (0..train.batch_size)
                .map(|k| order[(b * train.batch_size + k) % order.len()])
                .collect();
            lr = lr_at(step + 1, total, warmup, train.peak_lr);
            let (loss, mut grads) = batch_gradients(corpus, &weights, train, &batch, &mut rng)?;
            let norm = clip_global_norm(&mut grads, train.grad_clip_norm);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    lr,
                    grad_norm: norm,
                });
            }
            adam.step(weights.params_mut(), &grads, lr);
            weights
                .check_finite()
                .map_err(|source| TrainError::NonFiniteWeights { step, source })?;
            loss_sum += loss;
            norm_sum += norm;
            norm_max = norm_max.max(norm);
            step += 1;
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / per_epoch as f64,
            lr,
            grad_norm_mean: norm_sum / per_epoch as f64,
            grad_norm_max: norm_max,
        });
    }
    Ok(TrainOutcome {
        weights,
        history,
        skipped,
        steps: step,
    })
}

/// Loss and parameter gradients for one batch of sequence indices.
fn batch_gradients(
    corpus: &LabeledCorpus,
    weights: &TanWeights,
    train: &TrainConfig,
    batch: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
    let mut items_a = Vec::with_capacity(batch.len());
    let mut items_b = Vec::with_capacity(batch.len());
    let mut pairs = Vec::with_capacity(batch.len());
    for &s in batch {
        let seq = &corpus.sequences()[s];
        let start = rng.gen_range(0..=seq.frames() - train.frames);
        let crop = seq.slice(start, start + train.frames).expect("crop within sequence");
        let vp = make_view_pair(&crop, rng, &train.augment);
        items_a.push(frames_tensor(&vp.view_a, 0, vp.view_a.frames()));
        items_b.push(frames_tensor(&vp.view_b, 0, vp.view_b.frames()));
        pairs.push(vp.correspondences);
    }
    let mut g = Graph::new();
    let bound = weights.bind(&mut g, true);
    let loss = batch_loss(&mut g, &bound, weights.config(), train, &items_a, &items_b, &pairs, rng)?;
    g.backward(loss)?;
    let grads = bound
        .vars
        .iter()
        .map(|&v| g.grad(v).expect("trainable").into_data())
        .collect();
    Ok((g.value(loss).item(), grads))
}

/// Builds the configured loss for paired view batches on `g`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    bound: &Bound,
    tan: &TanConfig,
    train: &TrainConfig,
    items_a: &[Tensor],
    items_b: &[Tensor],
    pairs: &[Vec<(usize, usize)>],
    rng: &mut R,
) -> Result<Var, TrainError> {
    let items: Vec<Tensor> = items_a.iter().chain(items_b).cloned().collect();
    let (z, ranges) = encode(g, bound, tan, &items)?;
    let v = project(g, bound, z)?;
    let split = ranges[items_a.len()].start;
    let va = g.slice(v, 0, 0..split)?;
    let vb = g.slice(v, 0, split..rows_of(&ranges))?;
    let ra: Vec<Range<usize>> = ranges[..items_a.len()].to_vec();
    let rb: Vec<Range<usize>> = ranges[items_a.len()..]
        .iter()
        .map(|r| r.start - split..r.end - split)
        .collect();
    match train.loss {
        LossKind::Tan => frame_nt_xent(
            g,
            &ViewBatch { v: va, ranges: ra },
            &ViewBatch { v: vb, ranges: rb },
            pairs,
            train.negative_mode,
            train.temperature,
        ),
        LossKind::Tcn | LossKind::Tcc => {
            let mut terms = Vec::with_capacity(ra.len());
            for (r_a, r_b) in ra.iter().zip(&rb) {
                let a = g.slice(va, 0, r_a.clone())?;
                let b = g.slice(vb, 0, r_b.clone())?;
                terms.push(match train.loss {
                    LossKind::Tcn => tcn_loss(g, a, b, &train.tcn, rng)?,
                    _ => tcc_loss(g, a, b, train.tcc_temperature)?,
                });
            }
            let mut total = terms[0];
            for &t in &terms[1..] {
                total = g.add(total, t)?;
            }
            Ok(g.scale(total, 1.0 / terms.len() as f64))
        }
    }
}
