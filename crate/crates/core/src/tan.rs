//! Temporal alignment network: a per-frame embedding MLP, sinusoidal
//! positional encoding, post-norm transformer encoder layers, and a
//! projection head onto the unit sphere.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::motion::SkeletonSequence;

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_FORMAT: &str = "acton-tan";

#[derive(Debug, Error)]
pub enum TanError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("positional encoding needs an even dimension, got {0}")]
    OddDimension(usize),
    #[error("input frames have {found} values, the embedding expects {expected}")]
    InputDim { expected: usize, found: usize },
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite weights in {0}")]
    NonFinite(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TanConfig {
    pub joints: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub attention_heads: usize,
    pub ffn_dim: usize,
    pub projection_dim: usize,
    pub temperature: f64,
    pub sequence_length: usize,
    pub positional_encoding: bool,
    /// Subtract the per-frame joint mean from every input frame.
    pub center_input: bool,
    /// Inference window stride; 0 means the window length. Every frame takes
    /// its features from the window in which it sits closest to the center.
    pub window_stride: usize,
}

impl Default for TanConfig {
    fn default() -> Self {
        Self {
            joints: crate::synth::SYNTH_JOINTS,
            hidden_dim: 512,
            encoder_layers: 3,
            attention_heads: 8,
            ffn_dim: 1024,
            projection_dim: 128,
            temperature: 0.1,
            sequence_length: 64,
            positional_encoding: true,
            center_input: false,
            window_stride: 0,
        }
    }
}

impl TanConfig {
    /// Small model used for laptop-scale runs.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 64,
            encoder_layers: 2,
            attention_heads: 4,
            ffn_dim: 128,
            projection_dim: 32,
            positional_encoding: false,
            center_input: true,
            window_stride: 8,
            ..Self::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        3 * self.joints
    }

    pub fn validate(&self) -> Result<(), TanError> {
        let dims = [
            ("joints", self.joints),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("attention_heads", self.attention_heads),
            ("ffn_dim", self.ffn_dim),
            ("projection_dim", self.projection_dim),
            ("sequence_length", self.sequence_length),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(TanError::Config(format!("{name} must be at least 1")));
        }
        if self.hidden_dim % self.attention_heads != 0 {
            return Err(TanError::Config(format!(
                "hidden_dim {} is not divisible by attention_heads {}",
                self.hidden_dim, self.attention_heads
            )));
        }
        if self.positional_encoding && self.hidden_dim % 2 != 0 {
            return Err(TanError::OddDimension(self.hidden_dim));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TanError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

/// Sinusoidal table: `(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor, TanError> {
    if dim % 2 != 0 {
        return Err(TanError::OddDimension(dim));
    }
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![len, dim], data)?)
}

/// Learnable tensors in a fixed order, plus the seed that initialized them.
#[derive(Clone, Debug, PartialEq)]
pub struct TanWeights {
    config: TanConfig,
    seed: u64,
    params: Vec<(String, Tensor)>,
}

fn linear_shapes(out: &mut Vec<(String, Vec<usize>)>, name: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{name}.weight"), vec![fan_in, fan_out]));
    out.push((format!("{name}.bias"), vec![fan_out]));
}

fn norm_shapes(out: &mut Vec<(String, Vec<usize>)>, name: &str, dim: usize) {
    out.push((format!("{name}.gamma"), vec![dim]));
    out.push((format!("{name}.beta"), vec![dim]));
}

/// Parameter names and shapes in binding order.
fn param_layout(cfg: &TanConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.hidden_dim;
    let mut out = Vec::new();
    linear_shapes(&mut out, "embed.0", cfg.input_dim(), h);
    linear_shapes(&mut out, "embed.1", h, h);
    for l in 0..cfg.encoder_layers {
        for proj in ["query", "key", "value", "out"] {
            linear_shapes(&mut out, &format!("layers.{l}.attn.{proj}"), h, h);
        }
        norm_shapes(&mut out, &format!("layers.{l}.norm1"), h);
        linear_shapes(&mut out, &format!("layers.{l}.ffn.0"), h, cfg.ffn_dim);
        linear_shapes(&mut out, &format!("layers.{l}.ffn.1"), cfg.ffn_dim, h);
        norm_shapes(&mut out, &format!("layers.{l}.norm2"), h);
    }
    linear_shapes(&mut out, "head.0", h, h);
    linear_shapes(&mut out, "head.1", h, cfg.projection_dim);
    out
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: TanConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl TanWeights {
    /// Linear layers draw from `U(-sqrt(1/fan_in), sqrt(1/fan_in))`; norm
    /// gains start at 1 and shifts at 0.
    pub fn init(config: &TanConfig, seed: u64) -> Result<Self, TanError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let layout = param_layout(config);
        let mut fan_in = 0;
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".beta") {
                vec![0.0; n]
            } else {
                if name.ends_with(".weight") {
                    fan_in = shape[0];
                }
                let bound = (1.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            };
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            config: config.clone(),
            seed,
            params,
        })
    }

    pub fn config(&self) -> &TanConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn check_finite(&self) -> Result<(), TanError> {
        match self.params.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(TanError::NonFinite(name.clone())),
            None => Ok(()),
        }
    }

    /// Registers every tensor in `g` and returns the typed handles.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self.params.iter().map(|(_, t)| g.leaf(t.clone(), trainable)).collect();
        Bound::from_vars(&self.config, vars)
    }

    /// Writes the checkpoint; refuses to overwrite an existing file.
    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<(), TanError> {
        let io = |source| TanError::Io {
            path: path.to_path_buf(),
            source,
        };
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: meta.clone(),
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        for (_, t) in &self.params {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = File::options().write(true).create_new(true).open(path).map_err(io)?;
        file.write_all(&bytes).map_err(io)
    }

    /// Loads a checkpoint together with its metadata.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>), TanError> {
        let bad = |reason: String| TanError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let file = File::open(path).map_err(|source| TanError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        reader
            .read_line(&mut line)
            .map_err(|e| bad(format!("unreadable header: {e}")))?;
        let header: CheckpointHeader =
            serde_json::from_str(line.trim_end()).map_err(|e| bad(format!("malformed header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
        }
        header.config.validate().map_err(|e| bad(e.to_string()))?;
        let layout = param_layout(&header.config);
        let listed: Vec<(String, Vec<usize>)> =
            header.tensors.iter().map(|e| (e.name.clone(), e.shape.clone())).collect();
        if listed != layout {
            return Err(bad("tensor list does not match the config".into()));
        }
        let mut payload = Vec::new();
        reader
            .read_to_end(&mut payload)
            .map_err(|e| bad(format!("unreadable payload: {e}")))?;
        let total: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(bad(format!("payload holds {} bytes, expected {}", payload.len(), total * 8)));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in layout {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        let weights = Self {
            config: header.config,
            seed: header.seed,
            params,
        };
        weights.check_finite().map_err(|e| bad(e.to_string()))?;
        Ok((weights, header.meta))
    }

    /// Hidden features `z` and unit vectors `v` for a whole sequence.
    ///
    /// Sequences longer than `sequence_length` are processed in windows of
    /// that length (see [`TanConfig::window_stride`]); the last window is
    /// aligned to the end of the sequence.
    pub fn embed(&self, seq: &SkeletonSequence) -> Result<Embeddings, TanError> {
        let t = seq.frames();
        let w = self.config.sequence_length.min(t);
        let step = match self.config.window_stride {
            0 => w,
            s => s,
        };
        let mut starts = Vec::new();
        let mut start = 0;
        loop {
            let s = start.min(t.saturating_sub(w));
            starts.push(s);
            if s + w >= t {
                break;
            }
            start += step;
        }
        // Window index whose center is nearest to each frame; earlier windows win ties.
        let mut source = vec![(usize::MAX, 0usize); t];
        for (k, &s) in starts.iter().enumerate() {
            for i in 0..w {
                let d = (2 * i).abs_diff(w);
                if source[s + i].0 == usize::MAX || d < source[s + i].1 {
                    source[s + i] = (k, d);
                }
            }
        }
        let items: Vec<Tensor> = starts.iter().map(|&s| frames_tensor(seq, s, s + w)).collect();
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let (z, ranges) = encode(&mut g, &bound, &self.config, &items)?;
        let v = project(&mut g, &bound, z)?;
        let (h, f) = (self.config.hidden_dim, self.config.projection_dim);
        let mut zs = Vec::with_capacity(t * h);
        let mut vs = Vec::with_capacity(t * f);
        for (frame, &(k, _)) in source.iter().enumerate() {
            let row = ranges[k].start + frame - starts[k];
            zs.extend_from_slice(&g.value(z).data()[row * h..(row + 1) * h]);
            vs.extend_from_slice(&g.value(v).data()[row * f..(row + 1) * f]);
        }
        Ok(Embeddings {
            z: Tensor::new(vec![t, h], zs)?,
            v: Tensor::new(vec![t, f], vs)?,
        })
    }
}

/// Frames `start..end` of `seq` as a `(end - start) x 3J` matrix.
pub fn frames_tensor(seq: &SkeletonSequence, start: usize, end: usize) -> Tensor {
    let d = seq.frame_dim();
    Tensor::new(vec![end - start, d], seq.data()[start * d..end * d].to_vec()).expect("frame slice")
}

/// Per-frame features of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub z: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
        let y = g.matmul(x, self.weight)?;
        g.add_row(y, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: (Var, Var),
    pub ffn: [Linear; 2],
    pub norm2: (Var, Var),
}

/// Graph handles of every weight, in checkpoint order in `vars`.
#[derive(Clone, Debug)]
pub struct Bound {
    pub embed: [Linear; 2],
    pub layers: Vec<EncoderLayer>,
    pub head: [Linear; 2],
    pub vars: Vec<Var>,
}

impl Bound {
    /// Types a list of graph vars laid out in checkpoint order.
    pub fn from_vars(cfg: &TanConfig, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), param_layout(cfg).len(), "one var per weight tensor");
        let mut it = vars.iter().copied();
        let mut pair = || (it.next().expect("layout"), it.next().expect("layout"));
        let mut lin = || {
            let (weight, bias) = pair();
            Linear { weight, bias }
        };
        let embed = [lin(), lin()];
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for _ in 0..cfg.encoder_layers {
            let (query, key, value, out) = (lin(), lin(), lin(), lin());
            let n1 = lin();
            let ffn = [lin(), lin()];
            let n2 = lin();
            layers.push(EncoderLayer {
                query,
                key,
                value,
                out,
                norm1: (n1.weight, n1.bias),
                ffn,
                norm2: (n2.weight, n2.bias),
            });
        }
        let head = [lin(), lin()];
        Self {
            embed,
            layers,
            head,
            vars,
        }
    }
}

/// Runs the encoder over a ragged batch of `T_i x 3J` items.
///
/// Items are stacked row-wise; attention only mixes rows of the same item.
/// Returns the stacked hidden features and each item's row range.
pub fn encode(
    g: &mut Graph,
    w: &Bound,
    cfg: &TanConfig,
    items: &[Tensor],
) -> Result<(Var, Vec<Range<usize>>), TanError> {
    encode_traced(g, w, cfg, items, None)
}

/// [`encode`], additionally collecting every attention matrix as
/// `(layer, item, head, probabilities)`.
pub fn encode_traced(
    g: &mut Graph,
    w: &Bound,
    cfg: &TanConfig,
    items: &[Tensor],
    mut trace: Option<&mut Vec<(usize, usize, usize, Var)>>,
) -> Result<(Var, Vec<Range<usize>>), TanError> {
    if items.is_empty() {
        return Err(TanError::EmptyInput);
    }
    let d_in = cfg.input_dim();
    let mut ranges = Vec::with_capacity(items.len());
    let mut rows = 0;
    for item in items {
        if item.rank() != 2 || item.cols() != d_in {
            return Err(TanError::InputDim {
                expected: d_in,
                found: item.cols(),
            });
        }
        if item.rows() == 0 {
            return Err(TanError::EmptyInput);
        }
        ranges.push(rows..rows + item.rows());
        rows += item.rows();
    }
    let mut stacked = Vec::with_capacity(rows * d_in);
    for item in items {
        stacked.extend_from_slice(item.data());
    }
    if cfg.center_input {
        stacked.chunks_exact_mut(d_in).for_each(crate::motion::center_frame);
    }
    let x = g.constant(Tensor::new(vec![rows, d_in], stacked)?);

    let h = w.embed[0].forward(g, x)?;
    let h = g.relu(h);
    let mut h = w.embed[1].forward(g, h)?;
    if cfg.positional_encoding {
        let mut pe = Vec::with_capacity(rows * cfg.hidden_dim);
        let longest = ranges.iter().map(|r| r.len()).max().unwrap_or(0);
        let table = positional_encoding(longest, cfg.hidden_dim)?;
        for r in &ranges {
            pe.extend_from_slice(&table.data()[..r.len() * cfg.hidden_dim]);
        }
        let pe = g.constant(Tensor::new(vec![rows, cfg.hidden_dim], pe)?);
        h = g.add(h, pe)?;
    }

    let heads = cfg.attention_heads;
    let dh = cfg.hidden_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for (l, layer) in w.layers.iter().enumerate() {
        let q = layer.query.forward(g, h)?;
        let k = layer.key.forward(g, h)?;
        let v = layer.value.forward(g, h)?;
        let mut item_out = Vec::with_capacity(ranges.len());
        for (n, r) in ranges.iter().enumerate() {
            let (qi, ki, vi) = if ranges.len() == 1 {
                (q, k, v)
            } else {
                (g.slice(q, 0, r.clone())?, g.slice(k, 0, r.clone())?, g.slice(v, 0, r.clone())?)
            };
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                let (qh, kh, vh) = if heads == 1 {
                    (qi, ki, vi)
                } else {
                    (
                        g.slice(qi, 1, cols.clone())?,
                        g.slice(ki, 1, cols.clone())?,
                        g.slice(vi, 1, cols)?,
                    )
                };
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let attn = g.softmax(scores, 1)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.push((l, n, hd, attn));
                }
                head_out.push(g.matmul(attn, vh)?);
            }
            item_out.push(if heads == 1 { head_out[0] } else { g.concat(&head_out, 1)? });
        }
        let a = if item_out.len() == 1 {
            item_out[0]
        } else {
            g.concat(&item_out, 0)?
        };
        let a = layer.out.forward(g, a)?;
        let r1 = g.add(h, a)?;
        let h1 = g.layer_norm(r1, layer.norm1.0, layer.norm1.1)?;
        let f = layer.ffn[0].forward(g, h1)?;
        let f = g.relu(f);
        let f = layer.ffn[1].forward(g, f)?;
        let r2 = g.add(h1, f)?;
        h = g.layer_norm(r2, layer.norm2.0, layer.norm2.1)?;
    }
    Ok((h, ranges))
}

/// Projection head followed by row-wise L2 normalization.
pub fn project(g: &mut Graph, w: &Bound, z: Var) -> Result<Var, TanError> {
    let p = w.head[0].forward(g, z)?;
    let p = g.relu(p);
    let p = w.head[1].forward(g, p)?;
    match g.l2_normalize(p) {
        Err(AutodiffError::DegenerateNorm { row, .. }) => Err(TanError::Config(format!(
            "degenerate projection: frame {row} has norm below 1e-12"
        ))),
        other => Ok(other?),
    }
}
