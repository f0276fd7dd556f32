//! Alignment, clustering, token-entropy and detection metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{what}: lengths differ ({left} vs {right})")]
    LengthMismatch { what: &'static str, left: usize, right: usize },
    #[error("{what}: needs at least {need} items, got {got}")]
    TooShort { what: &'static str, need: usize, got: usize },
    #[error("{0}: zero variance")]
    ZeroVariance(&'static str),
    #[error("invalid source: {0}")]
    InvalidSource(String),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the row of `b` closest to `x`, lowest index on ties.
fn nearest_row(x: &[f64], b: &Tensor) -> usize {
    let mut best = (0, f64::INFINITY);
    for j in 0..b.rows() {
        let d = sq_dist(x, b.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Alignment score between two embedded sequences.
///
/// Every frame of `a` retrieves its nearest frame in `b`. Over all pairs
/// `i < j` the score counts concordant (`p_i < p_j`) minus discordant
/// (`p_i > p_j`) retrievals and divides by `T_a (T_a - 1) / 2`; pairs that
/// retrieve the same frame count in the denominator only.
pub fn kendalls_tau(a: &Tensor, b: &Tensor) -> Result<f64, MetricsError> {
    let ta = a.rows();
    if ta < 2 || b.rows() < 1 {
        return Err(MetricsError::TooShort {
            what: "kendalls_tau",
            need: 2,
            got: ta,
        });
    }
    if a.cols() != b.cols() {
        return Err(MetricsError::LengthMismatch {
            what: "kendalls_tau feature dims",
            left: a.cols(),
            right: b.cols(),
        });
    }
    let p: Vec<usize> = (0..ta).map(|i| nearest_row(a.row(i), b)).collect();
    Ok(retrieval_tau(&p))
}

/// The score of [`kendalls_tau`] from precomputed retrieval indices.
pub fn retrieval_tau(p: &[usize]) -> f64 {
    let n = p.len();
    let mut score: i64 = 0;
    for i in 0..n {
        for j in i + 1..n {
            score += match p[i].cmp(&p[j]) {
                std::cmp::Ordering::Less => 1,
                std::cmp::Ordering::Greater => -1,
                std::cmp::Ordering::Equal => 0,
            };
        }
    }
    score as f64 / (n * (n - 1) / 2) as f64
}

fn entropy_bits<I: IntoIterator<Item = usize>>(counts: I, total: usize) -> f64 {
    let n = total as f64;
    -counts
        .into_iter()
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Normalized mutual information `2 I(Y;C) / (H(Y) + H(C))` in bits.
pub fn nmi(truth: &[usize], clusters: &[usize]) -> Result<f64, MetricsError> {
    if truth.len() != clusters.len() {
        return Err(MetricsError::LengthMismatch {
            what: "nmi",
            left: truth.len(),
            right: clusters.len(),
        });
    }
    if truth.is_empty() {
        return Err(MetricsError::TooShort {
            what: "nmi",
            need: 1,
            got: 0,
        });
    }
    let n = truth.len();
    let mut cy: HashMap<usize, usize> = HashMap::new();
    let mut cc: HashMap<usize, usize> = HashMap::new();
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (&y, &c) in truth.iter().zip(clusters) {
        *cy.entry(y).or_default() += 1;
        *cc.entry(c).or_default() += 1;
        *joint.entry((y, c)).or_default() += 1;
    }
    let sorted = |m: HashMap<usize, usize>| {
        let mut v: Vec<usize> = m.into_values().collect();
        v.sort_unstable();
        v
    };
    let hy = entropy_bits(sorted(cy), n);
    let hc = entropy_bits(sorted(cc), n);
    if hy == 0.0 && hc == 0.0 {
        return Ok(1.0);
    }
    if hy == 0.0 || hc == 0.0 {
        return Ok(0.0);
    }
    let mut jv: Vec<usize> = joint.into_values().collect();
    jv.sort_unstable();
    let hyc = entropy_bits(jv, n);
    let mi = hy + hc - hyc;
    Ok((2.0 * mi / (hy + hc)).clamp(0.0, 1.0))
}

/// Block entropy `K_N` in bits over all length-`n` windows inside each
/// stream.
pub fn block_entropy(streams: &[Vec<usize>], n: usize) -> Result<f64, MetricsError> {
    if n == 0 {
        return Ok(0.0);
    }
    let mut counts: HashMap<&[usize], usize> = HashMap::new();
    let mut total = 0;
    for s in streams {
        for w in s.windows(n) {
            *counts.entry(w).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(MetricsError::TooShort {
            what: "ngram_entropy",
            need: n,
            got: streams.iter().map(Vec::len).max().unwrap_or(0),
        });
    }
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    Ok(entropy_bits(c, total))
}

/// `(K_N, F_N)` with `F_N = K_N - K_{N-1}` and `K_0 = 0`.
pub fn ngram_entropy(streams: &[Vec<usize>], n: usize) -> Result<(f64, f64), MetricsError> {
    if n == 0 {
        return Err(MetricsError::TooShort {
            what: "ngram_entropy order",
            need: 1,
            got: 0,
        });
    }
    let k = block_entropy(streams, n)?;
    let prev = block_entropy(streams, n - 1)?;
    Ok((k, k - prev))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub n: usize,
    pub k: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyTable {
    pub rows: Vec<EntropyRow>,
    /// `F_{N+1} <= F_N + tol` held for every listed `N`.
    pub monotone: bool,
}

fn table_from(ks: Vec<f64>, tol: f64) -> EntropyTable {
    let mut rows = Vec::with_capacity(ks.len());
    let mut prev = 0.0;
    for (i, &k) in ks.iter().enumerate() {
        rows.push(EntropyRow { n: i + 1, k, f: k - prev });
        prev = k;
    }
    let monotone = rows.windows(2).all(|w| w[1].f <= w[0].f + tol);
    EntropyTable { rows, monotone }
}

/// Empirical `K_N`, `F_N` for `N = 1..=n_max`. The monotonicity flag is
/// descriptive only: finite samples can violate it.
pub fn entropy_table(streams: &[Vec<usize>], n_max: usize, tol: f64) -> Result<EntropyTable, MetricsError> {
    let ks = (1..=n_max).map(|n| block_entropy(streams, n)).collect::<Result<_, _>>()?;
    Ok(table_from(ks, tol))
}

/// A stationary first-order Markov chain over `0..states`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovSource {
    initial: Vec<f64>,
    transition: Vec<Vec<f64>>,
}

impl MarkovSource {
    /// `transition[i][j]` is `P(next = j | current = i)`; `initial` is the
    /// distribution of the first symbol.
    pub fn new(initial: Vec<f64>, transition: Vec<Vec<f64>>) -> Result<Self, MetricsError> {
        let s = initial.len();
        let stochastic = |row: &[f64]| row.iter().all(|&p| p >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() < 1e-12;
        if s == 0 || transition.len() != s || transition.iter().any(|r| r.len() != s || !stochastic(r)) || !stochastic(&initial) {
            return Err(MetricsError::InvalidSource("rows must be probability vectors of equal length".into()));
        }
        Ok(Self { initial, transition })
    }

    /// Independent draws from `p`.
    pub fn iid(p: Vec<f64>) -> Result<Self, MetricsError> {
        let rows = vec![p.clone(); p.len()];
        Self::new(p, rows)
    }

    /// `0 -> 1 -> ... -> states-1 -> 0` from a uniform start.
    pub fn cycle(states: usize) -> Result<Self, MetricsError> {
        let t = (0..states)
            .map(|i| (0..states).map(|j| f64::from(u8::from(j == (i + 1) % states))).collect())
            .collect();
        Self::new(vec![1.0 / states as f64; states], t)
    }

    pub fn states(&self) -> usize {
        self.initial.len()
    }

    /// Exact block entropy of the first `n` symbols.
    pub fn block_entropy(&self, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let s = self.states();
        // probability of each length-k prefix, grown one symbol at a time
        let mut probs: Vec<(usize, f64)> = self.initial.iter().copied().enumerate().filter(|&(_, p)| p > 0.0).collect();
        for _ in 1..n {
            let mut next = Vec::with_capacity(probs.len() * s);
            for &(last, p) in &probs {
                for (j, &t) in self.transition[last].iter().enumerate() {
                    if t > 0.0 {
                        next.push((j, p * t));
                    }
                }
            }
            probs = next;
        }
        -probs.iter().map(|&(_, p)| p * p.log2()).sum::<f64>()
    }

    /// Exact `K_N`, `F_N` for `N = 1..=n_max` and the monotonicity verdict.
    pub fn entropy_table(&self, n_max: usize, tol: f64) -> EntropyTable {
        table_from((1..=n_max).map(|n| self.block_entropy(n)).collect(), tol)
    }
}

/// A scored temporal interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub sequence: usize,
    pub class: usize,
    pub start: usize,
    pub end: usize,
    pub confidence: f64,
}

/// A labeled ground-truth interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub sequence: usize,
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

/// Intersection over union of `[s1, e1)` and `[s2, e2)`.
pub fn temporal_iou(s1: usize, e1: usize, s2: usize, e2: usize) -> f64 {
    let inter = e1.min(e2).saturating_sub(s1.max(s2));
    let union = (e1 - s1) + (e2 - s2) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// All-point interpolated average precision of one class.
fn average_precision(dets: &[&Detection], truth: &[&Interval], theta: f64) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let mut used = vec![false; truth.len()];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(dets.len());
    for (rank, &d) in order.iter().enumerate() {
        let det = dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (t, gt) in truth.iter().enumerate() {
            if used[t] || gt.sequence != det.sequence {
                continue;
            }
            let iou = temporal_iou(det.start, det.end, gt.start, gt.end);
            if best.map_or(true, |(_, b)| iou > b) {
                best = Some((t, iou));
            }
        }
        if let Some((t, iou)) = best {
            if iou >= theta {
                used[t] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / truth.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let envelope = points[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (r - prev_recall) * envelope;
            prev_recall = r;
        }
    }
    ap
}

/// Mean over classes present in `truth` of the per-class AP at IoU `theta`.
pub fn detection_map(detections: &[Detection], truth: &[Interval], theta: f64) -> f64 {
    let mut classes: Vec<usize> = truth.iter().map(|t| t.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let d: Vec<&Detection> = detections.iter().filter(|d| d.class == c).collect();
            let t: Vec<&Interval> = truth.iter().filter(|t| t.class == c).collect();
            average_precision(&d, &t, theta)
        })
        .sum();
    total / classes.len() as f64
}

/// Ground-truth intervals: maximal runs of equal frame labels, skipping
/// `background` when given.
pub fn label_intervals(sequence: usize, labels: &[usize], background: Option<usize>) -> Vec<Interval> {
    let mut out: Vec<Interval> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(iv) if iv.class == l && iv.end == t => iv.end = t + 1,
            _ => out.push(Interval {
                sequence,
                class: l,
                start: t,
                end: t + 1,
            }),
        }
    }
    out.retain(|iv| Some(iv.class) != background);
    out
}

fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

fn kendall_tau_b(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].total_cmp(&a[j]) as i64;
            let db = b[i].total_cmp(&b[j]) as i64;
            if da == 0 && db == 0 {
                continue;
            }
            if da == 0 {
                ties_a += 1;
            } else if db == 0 {
                ties_b += 1;
            } else if da == db {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    let denom = (((conc + disc + ties_a) * (conc + disc + ties_b)) as f64).sqrt();
    (conc - disc) as f64 / denom
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub abs_pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
}

/// `|r|`, Spearman's rho on average ranks, and Kendall's tau-b.
pub fn metric_correlation(a: &[f64], b: &[f64]) -> Result<Correlation, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            what: "metric_correlation",
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 3 {
        return Err(MetricsError::TooShort {
            what: "metric_correlation",
            need: 3,
            got: a.len(),
        });
    }
    let r = pearson(a, b).ok_or(MetricsError::ZeroVariance("metric_correlation"))?;
    let rho = pearson(&average_ranks(a), &average_ranks(b)).ok_or(MetricsError::ZeroVariance("metric_correlation"))?;
    Ok(Correlation {
        abs_pearson: r.abs(),
        spearman: rho,
        kendall: kendall_tau_b(a, b),
    })
}

/// Evaluation summary with the ids of the artifacts that produced it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub kendalls_tau: Option<f64>,
    pub nmi: Option<f64>,
    pub f2: Option<f64>,
    pub entropy: Option<EntropyTable>,
    pub map: Option<f64>,
    pub provenance: BTreeMap<String, String>,
}

impl MetricsReport {
    /// `key=value` lines, one per scalar and provenance entry.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.provenance {
            let _ = writeln!(s, "{k}={v}");
        }
        let scalars = [
            ("kendalls_tau", self.kendalls_tau),
            ("nmi", self.nmi),
            ("f2", self.f2),
            ("map", self.map),
        ];
        for (k, v) in scalars {
            if let Some(v) = v {
                let _ = writeln!(s, "{k}={v:.9}");
            }
        }
        if let Some(t) = &self.entropy {
            for row in &t.rows {
                let _ = writeln!(s, "entropy_k{}={:.9}", row.n, row.k);
                let _ = writeln!(s, "entropy_f{}={:.9}", row.n, row.f);
            }
        }
        s
    }

    pub fn check(&self) -> Result<(), String> {
        let within = |name: &str, v: Option<f64>, lo: f64, hi: f64| match v {
            Some(x) if !(lo..=hi).contains(&x) => Err(format!("{name} = {x} outside [{lo}, {hi}]")),
            _ => Ok(()),
        };
        within("kendalls_tau", self.kendalls_tau, -1.0, 1.0)?;
        within("nmi", self.nmi, 0.0, 1.0)?;
        within("map", self.map, 0.0, 1.0)
    }
}
