//! Pipeline configuration, run provenance and the evaluation protocol shared
//! by the command-line tool and the test suites.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::apps::{AppsError, ComposeConfig, DetectConfig};
use crate::lexicon::{corpus_features, kmeans, tokenize_corpus, FeatureSpace, Featurizer, KMeansOutcome, LexiconError};
use crate::metrics::{kendalls_tau, ngram_entropy, nmi, entropy_table, MetricsError, MetricsReport};
use crate::motion::{LabeledCorpus, MotionError, SkeletonSequence};
use crate::synth::{generate_with_options, rendition_pairs, RenditionPair, SynthOptions};
use crate::tan::{TanConfig, TanError};
use crate::train::{TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{0} already exists; outputs are write-once")]
    Exists(PathBuf),
    #[error("lexicon was built from checkpoint {lexicon} but checkpoint {checkpoint} was given")]
    DigestMismatch { lexicon: String, checkpoint: String },
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Model(#[from] TanError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Apps(#[from] AppsError),
}

impl PipelineError {
    /// Stable machine-readable category.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Exists(_) => "exists",
            Self::DigestMismatch { .. } => "digest_mismatch",
            Self::Motion(_) => "motion",
            Self::Model(_) => "model",
            Self::Train(_) => "train",
            Self::Lexicon(_) => "lexicon",
            Self::Metrics(_) => "metrics",
            Self::Apps(_) => "apps",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small model and short schedule for laptop CPUs.
    #[default]
    Desk,
    /// Full-size model and schedule.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(format!("unknown profile {other:?} (expected desk or paper)")),
        }
    }
}

/// Synthetic corpus and alignment-pair generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub primitives: usize,
    pub sequences: usize,
    pub primitives_per_sequence: usize,
    pub frames_per_primitive: usize,
    pub speed_max: f64,
    pub heading_degrees: f64,
    pub translation_range: f64,
    pub blend_frames: usize,
    /// Rendition pairs written next to the corpus for alignment scoring.
    pub pairs: usize,
    pub chain_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let o = SynthOptions::default();
        Self {
            primitives: 8,
            sequences: 60,
            primitives_per_sequence: 6,
            frames_per_primitive: 64,
            speed_max: o.speed_max,
            heading_degrees: o.heading_range.to_degrees(),
            translation_range: o.translation_range,
            blend_frames: o.blend_frames,
            pairs: 10,
            chain_len: 4,
        }
    }
}

impl SynthConfig {
    pub fn options(&self) -> SynthOptions {
        SynthOptions {
            speed_max: self.speed_max,
            heading_range: self.heading_degrees.to_radians(),
            translation_range: self.translation_range,
            blend_frames: self.blend_frames,
        }
    }

    pub fn corpus(&self, seed: u64) -> Result<LabeledCorpus, PipelineError> {
        Ok(generate_with_options(
            self.primitives,
            self.sequences,
            self.primitives_per_sequence,
            self.frames_per_primitive,
            seed,
            &self.options(),
        )?)
    }

    pub fn rendition_pairs(&self, seed: u64) -> Result<Vec<RenditionPair>, PipelineError> {
        Ok(rendition_pairs(
            self.primitives,
            self.frames_per_primitive,
            seed,
            self.pairs,
            self.chain_len,
            &self.options(),
        )?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexiconConfig {
    pub k: usize,
    pub space: FeatureSpace,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        Self {
            k: 16,
            space: FeatureSpace::Projection,
            max_iters: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Largest block length of the entropy table.
    pub n_max: usize,
    pub sweep_k: Vec<usize>,
    /// IoU threshold of the detection mAP.
    pub map_iou: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            n_max: 5,
            sweep_k: (1..=15).map(|i| 10 * i).collect(),
            map_iou: 0.3,
        }
    }
}

/// Default artifact locations; command-line path flags override them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub lexicon: PathBuf,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            checkpoint: "model.ckpt".into(),
            lexicon: "lexicon.lex".into(),
            output: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub tan: TanConfig,
    pub train: TrainConfig,
    pub lexicon: LexiconConfig,
    pub metrics: MetricsConfig,
    pub detect: DetectConfig,
    pub compose: ComposeConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

impl PipelineConfig {
    pub fn profile(profile: Profile) -> Self {
        let (tan, train) = match profile {
            Profile::Desk => (TanConfig::desk(), TrainConfig::desk()),
            Profile::Paper => (TanConfig::default(), TrainConfig::default()),
        };
        Self {
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            tan,
            train,
            lexicon: LexiconConfig::default(),
            metrics: MetricsConfig::default(),
            detect: DetectConfig::default(),
            compose: ComposeConfig::default(),
        }
    }

    /// Parses a JSON config on top of `profile`: sections present in the file
    /// replace the profile's, field by field.
    pub fn from_json(text: &str, profile: Profile) -> Result<Self, PipelineError> {
        let mut base = serde_json::to_value(Self::profile(profile)).expect("config serializes");
        let patch: serde_json::Value =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text, profile)
    }

    /// Applies the master seed and crop length to the sections that use them,
    /// then validates every section.
    pub fn resolve(mut self) -> Result<Self, PipelineError> {
        self.train.seed = self.seed;
        self.train.frames = self.tan.sequence_length;
        self.tan.temperature = self.train.temperature;
        self.tan.validate()?;
        self.train.validate()?;
        self.detect.validate()?;
        self.compose.validate()?;
        if self.lexicon.k == 0 {
            return Err(PipelineError::Config("lexicon.k must be at least 1".into()));
        }
        if self.metrics.n_max == 0 {
            return Err(PipelineError::Config("metrics.n_max must be at least 1".into()));
        }
        Ok(self)
    }

    /// SHA-256 over the canonical JSON of every section except `paths`.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(m) = &mut v {
            m.remove("paths");
        }
        sha256_hex(v.to_string().as_bytes())
    }

    /// Provenance entries stamped on every artifact of a run.
    pub fn stamp(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_digest".to_string(), self.digest()),
            ("seed".to_string(), self.seed.to_string()),
        ])
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, PipelineError> {
    Ok(sha256_hex(&fs::read(path).map_err(io_err(path))?))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Fails when `path` exists.
pub fn ensure_fresh(path: &Path) -> Result<(), PipelineError> {
    if path.exists() {
        return Err(PipelineError::Exists(path.to_path_buf()));
    }
    Ok(())
}

/// Writes `body` under a `# key=value ...` provenance line. Refuses to
/// replace an existing file.
pub fn write_stamped(path: &Path, stamp: &BTreeMap<String, String>, body: &str) -> Result<(), PipelineError> {
    let mut text = String::from("#");
    for (k, v) in stamp {
        text.push_str(&format!(" {k}={v}"));
    }
    text.push('\n');
    text.push_str(body);
    write_new(path, text.as_bytes())
}

/// Fails when `path` exists; otherwise creates its parent directory.
pub fn prepare_output(path: &Path) -> Result<(), PipelineError> {
    ensure_fresh(path)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn write_new(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    prepare_output(path)?;
    let mut f = fs::OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => PipelineError::Exists(path.to_path_buf()),
            _ => io_err(path)(e),
        })?;
    f.write_all(bytes).map_err(io_err(path))
}

/// Rendition pair files inside a corpus directory.
pub const PAIRS_DIR: &str = "pairs";

pub fn save_pairs(dir: &Path, pairs: &[RenditionPair], meta: &BTreeMap<String, String>) -> Result<(), PipelineError> {
    let dir = dir.join(PAIRS_DIR);
    ensure_fresh(&dir)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (i, p) in pairs.iter().enumerate() {
        let mut m = meta.clone();
        m.insert("chain".into(), format!("{:?}", p.chain));
        p.a.save_with_meta(&dir.join(format!("pair_{i:05}_a.skel")), &m)?;
        p.b.save_with_meta(&dir.join(format!("pair_{i:05}_b.skel")), &m)?;
    }
    Ok(())
}

/// Loads rendition pairs written by [`save_pairs`]; an absent directory
/// yields no pairs.
pub fn load_pairs(dir: &Path) -> Result<Vec<(SkeletonSequence, SkeletonSequence)>, PipelineError> {
    let dir = dir.join(PAIRS_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut names: Vec<String> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
        .filter(|n| n.ends_with("_a.skel"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|a| {
            let b = a.replace("_a.skel", "_b.skel");
            Ok((SkeletonSequence::load(&dir.join(a))?, SkeletonSequence::load(&dir.join(b))?))
        })
        .collect()
}

/// Kendall's Tau between the two renditions of every pair, averaged.
pub fn mean_alignment_tau<'p>(
    pairs: impl IntoIterator<Item = (&'p SkeletonSequence, &'p SkeletonSequence)>,
    featurizer: Featurizer<'_>,
) -> Result<f64, PipelineError> {
    let mut sum = 0.0;
    let mut n = 0;
    for (a, b) in pairs {
        sum += kendalls_tau(&featurizer.features(a)?, &featurizer.features(b)?)?;
        n += 1;
    }
    if n == 0 {
        return Err(PipelineError::Config("no alignment pairs to score".into()));
    }
    Ok(sum / n as f64)
}

/// K-means over the features of every frame of `sequences`.
pub fn build_lexicon(
    sequences: &[SkeletonSequence],
    featurizer: Featurizer<'_>,
    cfg: &LexiconConfig,
    k: usize,
    seed: u64,
) -> Result<KMeansOutcome, PipelineError> {
    let (points, dim) = corpus_features(sequences, featurizer)?;
    let mut out = kmeans(&points, dim, k, seed, cfg.max_iters, cfg.tol)?;
    out.lexicon.meta.space = featurizer.space();
    Ok(out)
}

/// Frame-label NMI of a K-means lexicon built on the corpus itself.
pub fn clustering_nmi(
    corpus: &LabeledCorpus,
    featurizer: Featurizer<'_>,
    cfg: &LexiconConfig,
    k: usize,
    seed: u64,
) -> Result<f64, PipelineError> {
    let lex = build_lexicon(corpus.sequences(), featurizer, cfg, k, seed)?.lexicon;
    let tok = tokenize_corpus(corpus.sequences(), featurizer, &lex)?;
    let clusters: Vec<usize> = tok.iter().flat_map(|t| t.labels.iter().copied()).collect();
    let truth: Vec<usize> = corpus.frame_labels().iter().flatten().copied().collect();
    Ok(nmi(&truth, &clusters)?)
}

/// Alignment, clustering and token-stream metrics of one lexicon.
pub fn evaluate(
    corpus: &LabeledCorpus,
    pairs: &[(SkeletonSequence, SkeletonSequence)],
    featurizer: Featurizer<'_>,
    lexicon: &crate::lexicon::Lexicon,
    n_max: usize,
) -> Result<MetricsReport, PipelineError> {
    let tok = tokenize_corpus(corpus.sequences(), featurizer, lexicon)?;
    let clusters: Vec<usize> = tok.iter().flat_map(|t| t.labels.iter().copied()).collect();
    let truth: Vec<usize> = corpus.frame_labels().iter().flatten().copied().collect();
    let streams: Vec<Vec<usize>> = tok.iter().map(|t| t.stream.tokens()).collect();
    let kendalls_tau = if pairs.is_empty() {
        None
    } else {
        Some(mean_alignment_tau(pairs.iter().map(|(a, b)| (a, b)), featurizer)?)
    };
    Ok(MetricsReport {
        kendalls_tau,
        nmi: Some(nmi(&truth, &clusters)?),
        f2: Some(ngram_entropy(&streams, 2)?.1),
        entropy: Some(entropy_table(&streams, n_max, 1e-9)?),
        map: None,
        provenance: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_layers_over_the_profile() {
        let cfg = PipelineConfig::from_json(r#"{"tan": {"hidden_dim": 32}, "seed": 9}"#, Profile::Desk).unwrap();
        assert_eq!(cfg.tan.hidden_dim, 32);
        assert_eq!(cfg.tan.encoder_layers, TanConfig::desk().encoder_layers);
        assert_eq!(cfg.seed, 9);
        let paper = PipelineConfig::from_json("{}", Profile::Paper).unwrap();
        assert_eq!(paper.tan, TanConfig::default());
        assert!(PipelineConfig::from_json(r#"{"tan": {"hidden": 32}}"#, Profile::Desk).is_err());
        assert!(PipelineConfig::from_json("[", Profile::Desk).is_err());
    }

    #[test]
    fn resolve_propagates_seed_and_crop_length() {
        let mut cfg = PipelineConfig::profile(Profile::Desk);
        cfg.seed = 5;
        cfg.tan.sequence_length = 48;
        let r = cfg.resolve().unwrap();
        assert_eq!((r.train.seed, r.train.frames), (5, 48));
        let mut bad = PipelineConfig::default();
        bad.lexicon.k = 0;
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn digest_tracks_settings_but_not_paths() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.paths.corpus = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        assert_eq!(a.stamp()["seed"], "0");
    }

    #[test]
    fn outputs_are_write_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/table.csv");
        write_stamped(&p, &PipelineConfig::default().stamp(), "a,b\n1,2\n").unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# config_digest="));
        assert!(text.ends_with("a,b\n1,2\n"));
        assert!(matches!(write_new(&p, b"x"), Err(PipelineError::Exists(_))));
        assert_eq!(fs::read_to_string(&p).unwrap(), text);
    }

    #[test]
    fn rendition_pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SynthConfig {
            pairs: 3,
            frames_per_primitive: 16,
            ..SynthConfig::default()
        };
        let pairs = synth.rendition_pairs(2).unwrap();
        save_pairs(dir.path(), &pairs, &BTreeMap::new()).unwrap();
        let back = load_pairs(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (p, (a, b)) in pairs.iter().zip(&back) {
            assert_eq!(&p.a.to_storage_precision(), a);
            assert_eq!(&p.b.to_storage_precision(), b);
        }
        assert!(save_pairs(dir.path(), &pairs, &BTreeMap::new()).is_err());
        assert!(load_pairs(&dir.path().join("none")).unwrap().is_empty());
    }

    #[test]
    fn alignment_tau_of_identical_renditions_is_one() {
        let synth = SynthConfig {
            pairs: 2,
            frames_per_primitive: 16,
            ..SynthConfig::default()
        };
        let pairs = synth.rendition_pairs(4).unwrap();
        let same = pairs.iter().map(|p| (&p.a, &p.a));
        assert_eq!(mean_alignment_tau(same, Featurizer::RawSkeleton).unwrap(), 1.0);
        assert!(mean_alignment_tau(std::iter::empty(), Featurizer::RawSkeleton).is_err());
    }
}
