//! Synthetic labeled corpora built from procedural motion primitives.
//!
//! A bank shares a small set of random key poses. Each primitive is a cyclic
//! route through three of them with cosine easing between keys, plus one
//! primitive-specific sinusoidal flourish, played over one normalized phase
//! period. A sequence is a random chain of primitive
//! instances; every instance gets its own speed factor, heading and ground
//! translation, and consecutive instances are joined with a short linear
//! blend so the sequence is C0-continuous. Ground-truth frame labels are the
//! source primitive of every frame, so acton boundaries are known exactly.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::motion::{LabeledCorpus, MotionError, SkeletonSequence};

/// Frames per second of generated sequences.
pub const SYNTH_FPS: f64 = 30.0;

/// Rest pose of the 16-joint synthetic skeleton (meters, `+z` up).
pub const REST_POSE: [[f64; 3]; 16] = [
    [0.0, 0.0, 1.00],   // pelvis
    [0.0, 0.0, 1.30],   // chest
    [0.0, 0.0, 1.50],   // neck
    [0.0, 0.0, 1.68],   // head
    [0.18, 0.0, 1.45],  // left shoulder
    [0.20, 0.0, 1.17],  // left elbow
    [0.21, 0.0, 0.92],  // left wrist
    [-0.18, 0.0, 1.45], // right shoulder
    [-0.20, 0.0, 1.17], // right elbow
    [-0.21, 0.0, 0.92], // right wrist
    [0.10, 0.0, 0.95],  // left hip
    [0.11, 0.0, 0.52],  // left knee
    [0.11, 0.0, 0.10],  // left ankle
    [-0.10, 0.0, 0.95], // right hip
    [-0.11, 0.0, 0.52], // right knee
    [-0.11, 0.0, 0.10], // right ankle
];

pub const SYNTH_JOINTS: usize = REST_POSE.len();

// Per-joint motion scale: extremities move most.
const JOINT_SCALE: [f64; SYNTH_JOINTS] = [
    0.05, 0.06, 0.07, 0.09, 0.08, 0.16, 0.26, 0.08, 0.16, 0.26, 0.04, 0.12, 0.18, 0.04, 0.12, 0.18,
];

/// Rendering options shared by corpus generation and chain rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOptions {
    /// Instance speeds are drawn from `[1/speed_max, speed_max]`.
    pub speed_max: f64,
    /// Per-instance heading drawn uniformly from `±heading_range` radians.
    pub heading_range: f64,
    /// Per-instance ground translation drawn uniformly from `±translation_range` meters.
    pub translation_range: f64,
    /// Frames at the start of every non-initial instance replaced by a linear blend.
    pub blend_frames: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            speed_max: 2.0,
            heading_range: 30f64.to_radians(),
            translation_range: 0.5,
            blend_frames: 4,
        }
    }
}

#[derive(Clone, Debug)]
struct Harmonic {
    cycles: f64,
    amplitude: [[f64; 3]; SYNTH_JOINTS],
    phase: [[f64; 3]; SYNTH_JOINTS],
}

type Pose = [[f64; 3]; SYNTH_JOINTS];

#[derive(Clone, Debug)]
struct Primitive {
    /// Cyclic route through the shared key poses.
    route: Vec<usize>,
    flourish: Harmonic,
}

/// A seeded set of motion primitives.
#[derive(Clone, Debug)]
pub struct PrimitiveBank {
    keys: Vec<Pose>,
    primitives: Vec<Primitive>,
    frames_per_primitive: usize,
}

/// How one primitive instance is placed in a chain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceSpec {
    pub primitive: usize,
    pub speed: f64,
    pub heading: f64,
    pub translation: [f64; 2],
}

const KEY_POSES: usize = 6;
const ROUTE_LEN: usize = 3;
const KEY_GAIN: f64 = 1.2;
const FLOURISH_GAIN: f64 = 0.25;

impl PrimitiveBank {
    pub fn new(primitive_count: usize, frames_per_primitive: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba4c);
        let (key_count, route_len) = (KEY_POSES, ROUTE_LEN);
        let keys: Vec<Pose> = (0..key_count)
            .map(|_| {
                let mut pose = REST_POSE;
                for j in 0..SYNTH_JOINTS {
                    for a in 0..3 {
                        pose[j][a] += KEY_GAIN * JOINT_SCALE[j] * rng.gen_range(-1.0..1.0);
                    }
                }
                pose
            })
            .collect();
        let mut routes: Vec<Vec<usize>> = Vec::new();
        while routes.len() < primitive_count {
            let mut route: Vec<usize> = Vec::with_capacity(route_len);
            while route.len() < route_len {
                let k = rng.gen_range(0..key_count);
                if route.last() != Some(&k) && !(route.len() + 1 == route_len && route[0] == k) {
                    route.push(k);
                }
            }
            let same = |r: &Vec<usize>| (0..route_len).any(|s| (0..route_len).all(|i| r[(i + s) % route_len] == route[i]));
            if routes.len() < key_count * (key_count - 1) && routes.iter().any(same) {
                continue;
            }
            routes.push(route);
        }
        let primitives = routes
            .into_iter()
            .map(|route| {
                let mut amplitude = [[0.0; 3]; SYNTH_JOINTS];
                let mut phase = [[0.0; 3]; SYNTH_JOINTS];
                for j in 0..SYNTH_JOINTS {
                    for a in 0..3 {
                        amplitude[j][a] = FLOURISH_GAIN * JOINT_SCALE[j] * rng.gen_range(-1.0..1.0);
                        phase[j][a] = rng.gen_range(0.0..2.0 * PI);
                    }
                }
                let cycles = f64::from(rng.gen_range(1..=2u8)) * route.len() as f64;
                Primitive {
                    route,
                    flourish: Harmonic {
                        cycles,
                        amplitude,
                        phase,
                    },
                }
            })
            .collect();
        Self {
            keys,
            primitives,
            frames_per_primitive,
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn frames_per_primitive(&self) -> usize {
        self.frames_per_primitive
    }

    /// Body-frame pose of `primitive` at normalized phase `phase ∈ [0, 1)`.
    pub fn pose(&self, primitive: usize, phase: f64) -> Pose {
        let p = &self.primitives[primitive];
        let n = p.route.len();
        let s = phase.rem_euclid(1.0) * n as f64;
        let i = (s.floor() as usize).min(n - 1);
        let w = 0.5 - 0.5 * (PI * (s - i as f64)).cos();
        let (from, to) = (&self.keys[p.route[i]], &self.keys[p.route[(i + 1) % n]]);
        let mut pose = REST_POSE;
        for j in 0..SYNTH_JOINTS {
            for a in 0..3 {
                pose[j][a] = from[j][a] + (to[j][a] - from[j][a]) * w;
            }
        }
        let h = &p.flourish;
        let w = 2.0 * PI * h.cycles * phase;
        for j in 0..SYNTH_JOINTS {
            for a in 0..3 {
                pose[j][a] += h.amplitude[j][a] * (w + h.phase[j][a]).sin();
            }
        }
        pose
    }

    /// Frame count of an instance played at `speed`.
    pub fn instance_len(&self, speed: f64) -> usize {
        ((self.frames_per_primitive as f64 / speed).round() as usize).max(2)
    }

    /// Draws placement parameters for one instance.
    pub fn sample_instance<R: Rng>(&self, rng: &mut R, primitive: usize, opts: &SynthOptions) -> InstanceSpec {
        let s = if opts.speed_max > 1.0 {
            rng.gen_range(1.0..=opts.speed_max)
        } else {
            1.0
        };
        let speed = if rng.gen_bool(0.5) { 1.0 / s } else { s };
        let sym = |rng: &mut R, r: f64| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let heading = sym(rng, opts.heading_range);
        let translation = [sym(rng, opts.translation_range), sym(rng, opts.translation_range)];
        InstanceSpec {
            primitive,
            speed,
            heading,
            translation,
        }
    }

    /// Renders a chain of instances into one sequence plus per-frame labels.
    pub fn render_chain(
        &self,
        chain: &[InstanceSpec],
        blend_frames: usize,
    ) -> Result<(SkeletonSequence, Vec<usize>), MotionError> {
        let mut frames: Vec<[[f64; 3]; SYNTH_JOINTS]> = Vec::new();
        let mut labels = Vec::new();
        for (k, spec) in chain.iter().enumerate() {
            if spec.primitive >= self.len() {
                return Err(MotionError::Corpus(format!("unknown primitive {}", spec.primitive)));
            }
            let len = self.instance_len(spec.speed);
            let (sin, cos) = spec.heading.sin_cos();
            let place = |pose: [[f64; 3]; SYNTH_JOINTS]| {
                pose.map(|[x, y, z]| {
                    [
                        cos * x - sin * y + spec.translation[0],
                        sin * x + cos * y + spec.translation[1],
                        z,
                    ]
                })
            };
            let instance: Vec<_> = (0..len)
                .map(|t| place(self.pose(spec.primitive, t as f64 / len as f64)))
                .collect();
            let blend = if k == 0 { 0 } else { blend_frames.min(len / 4) };
            if blend > 0 {
                let from = *frames.last().expect("previous instance rendered");
                let to = instance[blend];
                for t in 0..blend {
                    let w = (t + 1) as f64 / (blend + 1) as f64;
                    let mut f = from;
                    for j in 0..SYNTH_JOINTS {
                        for a in 0..3 {
                            f[j][a] = from[j][a] + (to[j][a] - from[j][a]) * w;
                        }
                    }
                    frames.push(f);
                }
            }
            frames.extend_from_slice(&instance[blend..]);
            labels.extend(std::iter::repeat(spec.primitive).take(len));
        }
        let data = frames.iter().flatten().flatten().copied().collect();
        let seq = SkeletonSequence::new(frames.len(), SYNTH_JOINTS, SYNTH_FPS, data)?;
        Ok((seq, labels))
    }
}

/// Generates a labeled corpus of random primitive chains.
pub fn generate_synthetic_corpus(
    primitive_count: usize,
    sequences: usize,
    primitives_per_sequence: usize,
    frames_per_primitive: usize,
    seed: u64,
) -> Result<LabeledCorpus, MotionError> {
    generate_with_options(
        primitive_count,
        sequences,
        primitives_per_sequence,
        frames_per_primitive,
        seed,
        &SynthOptions::default(),
    )
}

pub fn generate_with_options(
    primitive_count: usize,
    sequences: usize,
    primitives_per_sequence: usize,
    frames_per_primitive: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<LabeledCorpus, MotionError> {
    if primitive_count == 0 || sequences == 0 || primitives_per_sequence == 0 || frames_per_primitive == 0 {
        return Err(MotionError::Corpus("all synthetic corpus counts must be >= 1".into()));
    }
    let bank = PrimitiveBank::new(primitive_count, frames_per_primitive, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs = Vec::with_capacity(sequences);
    let mut labels = Vec::with_capacity(sequences);
    for _ in 0..sequences {
        let chain: Vec<_> = (0..primitives_per_sequence)
            .map(|_| {
                let p = rng.gen_range(0..primitive_count);
                bank.sample_instance(&mut rng, p, opts)
            })
            .collect();
        let (seq, l) = bank.render_chain(&chain, opts.blend_frames)?;
        seqs.push(seq);
        labels.push(l);
    }
    LabeledCorpus::new(seqs, labels, primitive_count)
}

/// Two independent renditions of one primitive chain.
#[derive(Clone, Debug, PartialEq)]
pub struct RenditionPair {
    pub chain: Vec<usize>,
    pub a: SkeletonSequence,
    pub b: SkeletonSequence,
}

/// Renders `pairs` chains of `chain_len` primitives twice each, drawing fresh
/// speed, heading and translation for every instance of every rendition.
///
/// Uses the same primitive bank as [`generate_with_options`] with the same
/// seed, so the renditions show the primitives a corpus was built from.
/// Chains use distinct primitives when `chain_len <= primitive_count`.
pub fn rendition_pairs(
    primitive_count: usize,
    frames_per_primitive: usize,
    seed: u64,
    pairs: usize,
    chain_len: usize,
    opts: &SynthOptions,
) -> Result<Vec<RenditionPair>, MotionError> {
    if primitive_count == 0 || frames_per_primitive == 0 || chain_len == 0 {
        return Err(MotionError::Corpus("rendition pair counts must be >= 1".into()));
    }
    let bank = PrimitiveBank::new(primitive_count, frames_per_primitive, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11e_0000_0000_0001);
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let chain: Vec<usize> = if chain_len <= primitive_count {
            rand::seq::index::sample(&mut rng, primitive_count, chain_len).into_vec()
        } else {
            (0..chain_len).map(|_| rng.gen_range(0..primitive_count)).collect()
        };
        let render = |rng: &mut ChaCha8Rng| {
            let specs: Vec<_> = chain.iter().map(|&p| bank.sample_instance(rng, p, opts)).collect();
            bank.render_chain(&specs, opts.blend_frames).map(|(s, _)| s)
        };
        let a = render(&mut rng)?;
        let b = render(&mut rng)?;
        out.push(RenditionPair { chain, a, b });
    }
    Ok(out)
}
