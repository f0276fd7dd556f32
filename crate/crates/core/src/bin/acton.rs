use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use acton::apps::{self, learn_acton_class_map, rank_detections};
use acton::lexicon::{tokenize_corpus, tokens_csv, FeatureSpace, Featurizer, Lexicon};
use acton::metrics::{detection_map, label_intervals, ngram_entropy, nmi};
use acton::motion::{LabeledCorpus, LABEL_FILE};
use acton::pipeline::{
    build_lexicon, evaluate, file_digest, load_pairs, prepare_output, save_pairs, write_new, write_stamped,
    PipelineConfig, PipelineError, Profile,
};
use acton::tan::TanWeights;
use acton::train::{history_csv, train_tan, LossKind};

#[derive(Parser)]
#[command(name = "acton", version, about = "Discover, score and apply motion tokens (actons)")]
struct Cli {
    /// JSON pipeline config layered over the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 makes every command bit-deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic corpus plus alignment rendition pairs.
    GenSynth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train an embedding network on a corpus.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        loss: Option<LossKind>,
    },
    /// Cluster corpus frame features into an acton lexicon.
    BuildLexicon {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        space: Option<FeatureSpace>,
    },
    /// Write the token stream of every corpus sequence.
    Tokenize {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alignment, clustering and entropy metrics.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        /// Key-value report; a JSON copy is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window action detection with a max-agreement class map.
    Detect {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chain stored acton instances into a new motion.
    Compose {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        words: Option<usize>,
        /// Comma-separated acton ids instead of a sampled word list.
        #[arg(long, value_delimiter = ',')]
        word_list: Option<Vec<usize>>,
    },
    /// NMI and F2 of lexicons over a range of K.
    SweepK {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
}

#[derive(clap::Args)]
struct Inputs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": e.code(), "message": e.to_string() });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

fn config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p, cli.profile)?,
        None => PipelineConfig::profile(cli.profile),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.resolve()
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
    }
    let mut cfg = config(&cli)?;
    let stamp = cfg.stamp();
    let or = |p: &Option<PathBuf>, d: &Path| p.clone().unwrap_or_else(|| d.to_path_buf());
    match &cli.command {
        Command::GenSynth { out } => {
            let out = or(out, &cfg.paths.corpus);
            let corpus = cfg.synth.corpus(cfg.seed)?;
            let pairs = cfg.synth.rendition_pairs(cfg.seed)?;
            corpus.save_dir(&out, &stamp)?;
            save_pairs(&out, &pairs, &stamp)?;
            Ok(format!(
                "wrote {} sequences and {} pairs to {}",
                corpus.len(),
                pairs.len(),
                out.display()
            ))
        }
        Command::Train { corpus, out, loss } => {
            if let Some(l) = loss {
                cfg.train.loss = *l;
            }
            let stamp = cfg.stamp();
            let out = or(out, &cfg.paths.checkpoint);
            let history = PathBuf::from(format!("{}.history.csv", out.display()));
            prepare_output(&out)?;
            prepare_output(&history)?;
            let (corpus, corpus_id) = load_corpus(&or(corpus, &cfg.paths.corpus))?;
            let outcome = train_tan(&corpus, &cfg.tan, &cfg.train)?;
            let mut meta = stamp.clone();
            meta.insert("corpus_id".into(), corpus_id);
            meta.insert("loss".into(), format!("{:?}", cfg.train.loss).to_lowercase());
            meta.insert("config".into(), serde_json::to_string(&cfg).expect("config serializes"));
            outcome.weights.save(&out, &meta)?;
            write_stamped(&history, &stamp, &history_csv(&outcome.history))?;
            let last = outcome.history.last().map_or(f64::NAN, |h| h.mean_loss);
            Ok(format!(
                "wrote {} after {} updates (final epoch loss {last:.6}, {} short sequences skipped)",
                out.display(),
                outcome.steps,
                outcome.skipped
            ))
        }
        Command::BuildLexicon {
            corpus,
            checkpoint,
            out,
            k,
            space,
        } => {
            let space = space.unwrap_or(cfg.lexicon.space);
            let k = k.unwrap_or(cfg.lexicon.k);
            let out = or(out, &cfg.paths.lexicon);
            prepare_output(&out)?;
            let (corpus, corpus_id) = load_corpus(&or(corpus, &cfg.paths.corpus))?;
            let model = Model::open(space, &or(checkpoint, &cfg.paths.checkpoint))?;
            let built = build_lexicon(corpus.sequences(), model.featurizer(), &cfg.lexicon, k, cfg.seed)?;
            let mut lexicon = built.lexicon;
            lexicon.meta.checkpoint_digest = model.digest.clone();
            lexicon.meta.corpus_id = corpus_id;
            lexicon.meta.extra = stamp.clone();
            lexicon.meta.extra.insert("config".into(), serde_json::to_string(&cfg).expect("config serializes"));
            lexicon.save(&out)?;
            Ok(format!(
                "wrote {} (K {k}, inertia {:.6}, {} iterations)",
                out.display(),
                lexicon.meta.inertia,
                lexicon.meta.iterations
            ))
        }
        Command::Tokenize { inputs, out } => {
            prepare_output(out)?;
            let (corpus, lexicon, model) = open_inputs(inputs, &cfg)?;
            let tok = tokenize_corpus(corpus.sequences(), model.featurizer(), &lexicon)?;
            let streams: Vec<_> = tok.into_iter().map(|t| t.stream).collect();
            write_stamped(out, &stamp, &tokens_csv(&streams))?;
            Ok(format!("wrote {}", out.display()))
        }
        Command::Eval { inputs, out } => {
            let json = out.with_extension("json");
            prepare_output(out)?;
            prepare_output(&json)?;
            let corpus_dir = or(&inputs.corpus, &cfg.paths.corpus);
            let (corpus, lexicon, model) = open_inputs(inputs, &cfg)?;
            let pairs = load_pairs(&corpus_dir)?;
            let mut report = evaluate(&corpus, &pairs, model.featurizer(), &lexicon, cfg.metrics.n_max)?;
            report.provenance = stamp.clone();
            report.provenance.insert("checkpoint".into(), model.digest.clone());
            report.provenance.insert("corpus".into(), lexicon.meta.corpus_id.clone());
            report.provenance.insert("lexicon".into(), file_digest(&or(&inputs.lexicon, &cfg.paths.lexicon))?);
            report.check().map_err(PipelineError::Config)?;
            write_new(out, report.to_kv().as_bytes())?;
            let mut j = serde_json::to_string_pretty(&report).expect("report serializes");
            j.push('\n');
            write_new(&json, j.as_bytes())?;
            Ok(format!("wrote {}", out.display()))
        }
        Command::Detect { inputs, out } => {
            prepare_output(out)?;
            let (corpus, lexicon, model) = open_inputs(inputs, &cfg)?;
            let tok = tokenize_corpus(corpus.sequences(), model.featurizer(), &lexicon)?;
            let tokens: Vec<Vec<usize>> = tok.iter().map(|t| t.labels.clone()).collect();
            let background = corpus.primitive_count();
            let map = learn_acton_class_map(&tokens, corpus.frame_labels(), lexicon.k(), background)?;
            let mut dets = Vec::new();
            let mut truth = Vec::new();
            for (i, (labels, seq)) in tokens.iter().zip(corpus.sequences()).enumerate() {
                dets.extend(apps::detect_labels(i, labels, seq.fps(), &map, &cfg.detect)?.detections);
                truth.extend(label_intervals(i, &corpus.frame_labels()[i], None));
            }
            rank_detections(&mut dets);
            let m = detection_map(&dets, &truth, cfg.metrics.map_iou);
            let mut s = stamp.clone();
            s.insert("map".into(), format!("{m:.9}"));
            s.insert("map_iou".into(), cfg.metrics.map_iou.to_string());
            write_stamped(out, &s, &apps::detections_csv(&dets))?;
            Ok(format!("wrote {} detections to {} (mAP {m:.4})", dets.len(), out.display()))
        }
        Command::Compose {
            inputs,
            out,
            words,
            word_list,
        } => {
            prepare_output(out)?;
            if let Some(w) = words {
                cfg.compose.words = *w;
            }
            let (corpus, lexicon, model) = open_inputs(inputs, &cfg)?;
            let tok = tokenize_corpus(corpus.sequences(), model.featurizer(), &lexicon)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let composed = apps::compose(
                corpus.sequences(),
                &tok,
                &lexicon,
                word_list.as_deref(),
                &cfg.compose,
                &mut rng,
            )?;
            let mut meta = cfg.stamp();
            meta.insert("words".into(), format!("{:?}", composed.words));
            let relaxed = composed.splices.iter().filter(|s| s.relaxed).count();
            composed.sequence.save_with_meta(out, &meta)?;
            Ok(format!(
                "wrote {} ({} frames, {} words, {relaxed} relaxed splices)",
                out.display(),
                composed.sequence.frames(),
                composed.words.len()
            ))
        }
        Command::SweepK {
            corpus,
            checkpoint,
            out,
            ks,
        } => {
            prepare_output(out)?;
            let ks = ks.clone().unwrap_or_else(|| cfg.metrics.sweep_k.clone());
            let (corpus, _) = load_corpus(&or(corpus, &cfg.paths.corpus))?;
            let model = Model::open(cfg.lexicon.space, &or(checkpoint, &cfg.paths.checkpoint))?;
            let f = model.featurizer();
            let truth: Vec<usize> = corpus.frame_labels().iter().flatten().copied().collect();
            let mut table = String::from("k,nmi,f2\n");
            for &k in &ks {
                let lex = build_lexicon(corpus.sequences(), f, &cfg.lexicon, k, cfg.seed)?.lexicon;
                let tok = tokenize_corpus(corpus.sequences(), f, &lex)?;
                let clusters: Vec<usize> = tok.iter().flat_map(|t| t.labels.iter().copied()).collect();
                let streams: Vec<Vec<usize>> = tok.iter().map(|t| t.stream.tokens()).collect();
                let _ = writeln!(
                    table,
                    "{k},{:.9},{:.9}",
                    nmi(&truth, &clusters)?,
                    ngram_entropy(&streams, 2)?.1
                );
            }
            write_stamped(out, &stamp, &table)?;
            Ok(format!("wrote {} rows to {}", ks.len(), out.display()))
        }
    }
}

/// Feature extractor plus the digest that lexicons record for it.
struct Model {
    weights: Option<TanWeights>,
    space: FeatureSpace,
    digest: String,
}

const RAW_DIGEST: &str = "raw-skeleton";

impl Model {
    fn open(space: FeatureSpace, checkpoint: &Path) -> Result<Self, PipelineError> {
        if space == FeatureSpace::RawSkeleton {
            return Ok(Self {
                weights: None,
                space,
                digest: RAW_DIGEST.into(),
            });
        }
        let (weights, _) = TanWeights::load(checkpoint)?;
        Ok(Self {
            weights: Some(weights),
            space,
            digest: file_digest(checkpoint)?,
        })
    }

    fn featurizer(&self) -> Featurizer<'_> {
        match &self.weights {
            Some(w) => Featurizer::Tan(w, self.space),
            None => Featurizer::RawSkeleton,
        }
    }
}

fn load_corpus(dir: &Path) -> Result<(LabeledCorpus, String), PipelineError> {
    let corpus = LabeledCorpus::load_dir(dir)?;
    Ok((corpus, file_digest(&dir.join(LABEL_FILE))?))
}

/// Corpus, lexicon and the model the lexicon was built from. Refuses a
/// checkpoint other than the one recorded in the lexicon.
fn open_inputs(inputs: &Inputs, cfg: &PipelineConfig) -> Result<(LabeledCorpus, Lexicon, Model), PipelineError> {
    let corpus_dir = inputs.corpus.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
    let lexicon_path = inputs.lexicon.clone().unwrap_or_else(|| cfg.paths.lexicon.clone());
    let checkpoint = inputs.checkpoint.clone().unwrap_or_else(|| cfg.paths.checkpoint.clone());
    let lexicon = Lexicon::load(&lexicon_path)?;
    let model = Model::open(lexicon.meta.space, &checkpoint)?;
    if model.digest != lexicon.meta.checkpoint_digest {
        return Err(PipelineError::DigestMismatch {
            lexicon: lexicon.meta.checkpoint_digest.clone(),
            checkpoint: model.digest,
        });
    }
    let (corpus, _) = load_corpus(&corpus_dir)?;
    Ok((corpus, lexicon, model))
}
