//! Sequence-consistent augmentations and correspondence-annotated view pairs.
//!
//! One parameter draw (ground translation, rotation about `+z`, speed) is
//! applied to every frame of a sequence. Speed change resamples the time axis
//! with linear interpolation: output frame `t'` reads source time
//! `u = t' * speed`, clamped to the last frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::motion::SkeletonSequence;

/// Sampling ranges for [`sample_params`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    /// Half-width of the uniform translation range per axis, meters.
    pub translation_range: f64,
    /// Half-width of the uniform rotation range about `+z`, degrees.
    pub rotation_range: f64,
    /// Highest speed factor; speeds are drawn from `[1/speed_max, speed_max]`.
    pub speed_max: f64,
    /// Also translate along the gravity axis.
    pub vertical_translation: bool,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            translation_range: 0.2,
            rotation_range: 18.0,
            speed_max: 2.0,
            vertical_translation: false,
        }
    }
}

impl AugmentRanges {
    pub fn identity() -> Self {
        Self {
            translation_range: 0.0,
            rotation_range: 0.0,
            speed_max: 1.0,
            vertical_translation: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.speed_max.is_finite() && self.speed_max >= 1.0) {
            return Err(format!("speed_max must be >= 1 (got {})", self.speed_max));
        }
        if !(self.translation_range >= 0.0 && self.rotation_range >= 0.0) {
            return Err("augmentation ranges must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub translation: [f64; 3],
    /// Radians about `+z`.
    pub rotation: f64,
    pub speed: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        translation: [0.0; 3],
        rotation: 0.0,
        speed: 1.0,
    };
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.gen_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Draws one augmentation. Speed: `s ~ U[1, speed_max]`, then `s` or `1/s`
/// with equal probability.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R, ranges: &AugmentRanges) -> AugmentParams {
    let tx = symmetric(rng, ranges.translation_range);
    let ty = symmetric(rng, ranges.translation_range);
    let tz = if ranges.vertical_translation {
        symmetric(rng, ranges.translation_range)
    } else {
        0.0
    };
    let rotation = symmetric(rng, ranges.rotation_range.to_radians());
    let s = if ranges.speed_max > 1.0 {
        rng.gen_range(1.0..=ranges.speed_max)
    } else {
        1.0
    };
    let speed = if rng.gen_bool(0.5) { 1.0 / s } else { s };
    AugmentParams {
        translation: [tx, ty, tz],
        rotation,
        speed,
    }
}

/// Output length for a sequence of `frames` played at `speed`.
pub fn resampled_len(frames: usize, speed: f64) -> usize {
    ((frames as f64 / speed).round() as usize).max(1)
}

/// Resample in time, rotate about `+z`, then translate.
pub fn apply(seq: &SkeletonSequence, p: &AugmentParams) -> SkeletonSequence {
    let t_src = seq.frames();
    let t_out = resampled_len(t_src, p.speed);
    let w = seq.frame_dim();
    let last = (t_src - 1) as f64;
    let (sin, cos) = p.rotation.sin_cos();
    let mut data = Vec::with_capacity(t_out * w);
    let mut frame = vec![0.0; w];
    for t in 0..t_out {
        let u = (t as f64 * p.speed).min(last);
        let lo = u.floor() as usize;
        let frac = u - lo as f64;
        if frac == 0.0 {
            frame.copy_from_slice(seq.frame(lo));
        } else {
            let (a, b) = (seq.frame(lo), seq.frame(lo + 1));
            for k in 0..w {
                frame[k] = a[k] + (b[k] - a[k]) * frac;
            }
        }
        for q in frame.chunks_exact(3) {
            let (x, y, z) = (q[0], q[1], q[2]);
            data.push(cos * x - sin * y + p.translation[0]);
            data.push(sin * x + cos * y + p.translation[1]);
            data.push(z + p.translation[2]);
        }
    }
    SkeletonSequence::new(t_out, seq.joints(), seq.fps(), data).expect("augmentation preserves invariants")
}

/// Two augmented views of one sequence with their frame correspondences.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub view_a: SkeletonSequence,
    pub view_b: SkeletonSequence,
    pub params_a: AugmentParams,
    pub params_b: AugmentParams,
    /// `(i_a, i_b)` pairs, sorted by `i_a`.
    pub correspondences: Vec<(usize, usize)>,
}

/// Matches frames of two views by source time.
///
/// Frame `i_a` sits at source time `i_a * speed_a` and pairs with
/// `i_b = round(i_a * speed_a / speed_b)` when that frame exists and lies
/// within half a source frame. When several `i_a` claim the same `i_b` the
/// smallest source-time gap wins, then the lowest `i_a`.
pub fn correspondences(len_a: usize, speed_a: f64, len_b: usize, speed_b: f64) -> Vec<(usize, usize)> {
    // best claim per i_b: (gap, i_a)
    let mut claims: Vec<Option<(f64, usize)>> = vec![None; len_b];
    for i_a in 0..len_a {
        let u = i_a as f64 * speed_a;
        let i_b = (u / speed_b).round();
        if i_b < 0.0 || i_b >= len_b as f64 {
            continue;
        }
        let i_b = i_b as usize;
        let gap = (i_b as f64 * speed_b - u).abs();
        if gap > 0.5 {
            continue;
        }
        match claims[i_b] {
            Some((g, _)) if g <= gap => {}
            _ => claims[i_b] = Some((gap, i_a)),
        }
    }
    let mut pairs: Vec<_> = claims
        .iter()
        .enumerate()
        .filter_map(|(i_b, c)| c.map(|(_, i_a)| (i_a, i_b)))
        .collect();
    pairs.sort_unstable();
    pairs
}

pub fn make_view_pair<R: Rng + ?Sized>(seq: &SkeletonSequence, rng: &mut R, ranges: &AugmentRanges) -> ViewPair {
    let params_a = sample_params(rng, ranges);
    let params_b = sample_params(rng, ranges);
    let view_a = apply(seq, &params_a);
    let view_b = apply(seq, &params_b);
    let correspondences = correspondences(view_a.frames(), params_a.speed, view_b.frames(), params_b.speed);
    ViewPair {
        view_a,
        view_b,
        params_a,
        params_b,
        correspondences,
    }
}
