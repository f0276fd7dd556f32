use super::*;
use crate::lexicon::{segment, LexiconMeta};
use crate::metrics::{detection_map, label_intervals};
use crate::synth::generate_synthetic_corpus;
use proptest::prelude::{prop, prop_assert, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn class_map_plurality_ties_and_unseen() {
    let tokens = vec![vec![0, 0, 0, 0, 0, 1, 1]];
    let ann = vec![vec![5, 5, 5, 5, 2, 7, 2]];
    let m = learn_acton_class_map(&tokens, &ann, 3, 99).unwrap();
    assert_eq!(m.classes, vec![5, 2, 99]);
    assert_eq!(m.agreement[0], 0.8);
    assert_eq!(m.agreement[1], 0.5);
    assert_eq!(m.agreement[2], 0.0);
    assert!(learn_acton_class_map(&[vec![0]], &[vec![1, 2]], 1, 0).is_err());
    assert!(learn_acton_class_map(&[vec![4]], &[vec![1]], 2, 0).is_err());
}

proptest! {
    #[test]
    fn plurality_map_beats_any_constant_map(
        pairs in prop::collection::vec((0usize..6, 0usize..4), 1..200),
    ) {
        let t: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let a: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let m = learn_acton_class_map(&[t.clone()], &[a.clone()], 6, 0).unwrap();
        let hits = |pred: &[usize]| pred.iter().zip(&a).filter(|(p, y)| p == y).count();
        let ours = hits(&m.classify(&t));
        for c in 0..4 {
            prop_assert!(ours >= hits(&vec![c; a.len()]));
        }
    }
}

fn identity_map(k: usize) -> ActonClassMap {
    ActonClassMap {
        classes: (0..k).collect(),
        agreement: vec![1.0; k],
        background: usize::MAX,
    }
}

#[test]
fn uniform_sequence_is_one_full_detection() {
    let map = ActonClassMap {
        classes: vec![3, 3],
        agreement: vec![1.0; 2],
        background: 0,
    };
    let labels = [0, 1, 1, 0, 1, 0, 0, 1, 1, 1];
    for score in [WindowScore::Agreement, WindowScore::ContextContrast] {
        let cfg = DetectConfig {
            scales_seconds: vec![1.0],
            score,
            ..DetectConfig::default()
        };
        let out = detect_labels(4, &labels, 10.0, &map, &cfg).unwrap();
        assert_eq!(
            out.detections,
            vec![Detection {
                sequence: 4,
                class: 3,
                start: 0,
                end: 10,
                confidence: 1.0
            }]
        );
    }
}

#[test]
fn oversized_scales_are_skipped() {
    let cfg = DetectConfig {
        scales_seconds: vec![1.0, 5.0],
        ..DetectConfig::default()
    };
    let out = detect_labels(0, &[0; 20], 10.0, &identity_map(1), &cfg).unwrap();
    assert_eq!(out.skipped_scales, vec![50]);
    assert!(!out.detections.is_empty());
    assert!(DetectConfig {
        scales_seconds: vec![],
        ..DetectConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn background_windows_are_not_reported() {
    let map = ActonClassMap {
        classes: vec![0, 1],
        agreement: vec![1.0; 2],
        background: 0,
    };
    let labels: Vec<usize> = [vec![0; 20], vec![1; 20]].concat();
    let cfg = DetectConfig {
        scales_seconds: vec![2.0],
        ..DetectConfig::default()
    };
    let out = detect_labels(0, &labels, 10.0, &map, &cfg).unwrap();
    assert!(out.detections.iter().all(|d| d.class == 1 && d.end > 20));
    assert_eq!(out.detections[0], d(1, 20, 40, 1.0));
    assert!(out.detections[1..].iter().all(|x| x.confidence < 0.5));
}

fn d(class: usize, start: usize, end: usize, confidence: f64) -> Detection {
    Detection {
        sequence: 0,
        class,
        start,
        end,
        confidence,
    }
}

#[test]
fn nms_definition_cases() {
    assert_eq!(nms(vec![d(0, 0, 10, 0.4), d(0, 0, 10, 0.9)], 0.5), vec![d(0, 0, 10, 0.9)]);
    assert_eq!(nms(vec![d(0, 0, 10, 0.4), d(0, 10, 20, 0.9)], 0.5).len(), 2);
    assert_eq!(nms(vec![d(0, 0, 10, 0.4), d(1, 0, 10, 0.9)], 0.5).len(), 2);
}

proptest! {
    #[test]
    fn nms_output_overlaps_stay_below_threshold(
        raw in prop::collection::vec((0usize..3, 0usize..60, 1usize..30, 0.0f64..1.0), 0..40),
        theta in 0.1f64..0.9,
    ) {
        let dets = raw.iter().map(|&(c, s, l, conf)| d(c, s, s + l, conf)).collect();
        let kept = nms(dets, theta);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                if a.class == b.class {
                    prop_assert!(temporal_iou(a.start, a.end, b.start, b.end) < theta);
                }
            }
        }
    }
}

#[test]
fn detect_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..300).map(|t| (t / 37 + rng.gen_range(0..2)) % 4).collect();
    let cfg = DetectConfig::default();
    let a = detect_labels(0, &labels, 30.0, &identity_map(4), &cfg).unwrap();
    let b = detect_labels(0, &labels, 30.0, &identity_map(4), &cfg).unwrap();
    assert_eq!(a, b);
}

/// mAP@0.3 of both window scores on ground-truth frame labels.
fn oracle_map(score: WindowScore) -> f64 {
    let corpus = generate_synthetic_corpus(8, 30, 6, 64, 5).unwrap();
    let cfg = DetectConfig {
        score,
        ..DetectConfig::default()
    };
    let mut dets = Vec::new();
    let mut truth = Vec::new();
    for (i, labels) in corpus.frame_labels().iter().enumerate() {
        dets.extend(detect_labels(i, labels, 30.0, &identity_map(8), &cfg).unwrap().detections);
        truth.extend(label_intervals(i, labels, None));
    }
    rank_detections(&mut dets);
    detection_map(&dets, &truth, 0.3)
}

#[test]
fn context_contrast_recovers_oracle_segments() {
    let contrast = oracle_map(WindowScore::ContextContrast);
    let agreement = oracle_map(WindowScore::Agreement);
    assert!(contrast > 0.9, "{contrast}");
    assert!(contrast > agreement, "{contrast} vs {agreement}");
}

fn toy_corpus() -> (Vec<SkeletonSequence>, Vec<Tokenized>, Lexicon) {
    let corpus = generate_synthetic_corpus(4, 6, 5, 30, 9).unwrap();
    let seqs = corpus.sequences().to_vec();
    let tok = corpus
        .frame_labels()
        .iter()
        .map(|l| Tokenized {
            stream: segment(l),
            labels: l.clone(),
        })
        .collect();
    let meta = LexiconMeta {
        seed: 0,
        inertia: 0.0,
        iterations: 0,
        space: Default::default(),
        checkpoint_digest: String::new(),
        corpus_id: String::new(),
        extra: Default::default(),
    };
    let lex = Lexicon::new(4, 1, vec![0.0; 4], meta).unwrap();
    (seqs, tok, lex)
}

#[test]
fn single_word_is_the_instance_bit_exact() {
    let (seqs, tok, lex) = toy_corpus();
    let cfg = ComposeConfig {
        words: 1,
        ..ComposeConfig::default()
    };
    for seed in 0..10 {
        let out = compose(&seqs, &tok, &lex, None, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let i = out.instances[0];
        assert_eq!(out.sequence, seqs[i.sequence].slice(i.start, i.end).unwrap());
        assert!(out.splices.is_empty());
    }
}

#[test]
fn equal_boundary_frames_blend_to_a_constant() {
    let frame = vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6];
    let a = SkeletonSequence::new(2, 2, 30.0, [frame.clone(), frame.clone()].concat()).unwrap();
    let tok = vec![Tokenized {
        stream: segment(&[0, 0]),
        labels: vec![0, 0],
    }];
    let (_, _, mut lex) = toy_corpus();
    lex = Lexicon::new(1, 1, vec![0.0], lex.meta.clone()).unwrap();
    let cfg = ComposeConfig {
        words: 3,
        ..ComposeConfig::default()
    };
    let out = compose(&[a], &tok, &lex, None, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(out.sequence.frames(), 2 * 3 + 2 * cfg.blend_frames);
    for t in 0..out.sequence.frames() {
        for (x, y) in out.sequence.frame(t).iter().zip(&frame) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn splice_steps_respect_the_continuity_bound() {
    let (seqs, tok, lex) = toy_corpus();
    for (thr, budget) in [(0.3, 4), (2.0, 64), (0.05, 1)] {
        let cfg = ComposeConfig {
            words: 6,
            boundary_threshold: thr,
            blend_frames: 5,
            retry_budget: budget,
        };
        for seed in 0..20 {
            let out = compose(&seqs, &tok, &lex, None, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(out.sequence.data().iter().all(|v| v.is_finite()));
            let intra = out
                .instances
                .iter()
                .map(|i| max_joint_step(&seqs[i.sequence], i.start..i.end))
                .fold(0.0, f64::max);
            let bound = (thr / cfg.blend_frames as f64).max(intra);
            for s in &out.splices {
                assert!(max_joint_step(&out.sequence, s.start..s.end + 1) <= bound + 1e-12);
            }
        }
    }
}

#[test]
fn compose_is_seed_deterministic_and_checks_words() {
    let (seqs, tok, lex) = toy_corpus();
    let cfg = ComposeConfig::default();
    let a = compose(&seqs, &tok, &lex, None, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = compose(&seqs, &tok, &lex, None, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a, b);
    let fixed = compose(&seqs, &tok, &lex, Some(&[2, 0, 2]), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(fixed.words, vec![2, 0, 2]);
    assert!(compose(&seqs, &tok, &lex, Some(&[9]), &cfg, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    let bigger = Lexicon::new(5, 1, vec![0.0; 5], lex.meta.clone()).unwrap();
    assert!(matches!(
        compose(&seqs, &tok, &bigger, Some(&[4]), &cfg, &mut ChaCha8Rng::seed_from_u64(1)),
        Err(AppsError::EmptyCluster(4))
    ));
}
