use std::collections::HashSet;
use std::path::PathBuf;

use mmnet_core::data::augment::{apply, augment, eval_view, AugmentParams, CENTER, CROP};
use mmnet_core::data::dataset::{load_index, loso_folds, write_index, Dataset, SamplePair};
use mmnet_core::data::synth::{synth_dataset, SynthSpec, SIZE};
use mmnet_core::{Error, Rng, Tensor};

fn tiny_pair(id: &str, subject: &str, label: usize) -> SamplePair {
    let img = || Tensor::zeros(vec![3, 4, 4]).unwrap();
    SamplePair {
        id: id.into(),
        subject: subject.into(),
        label,
        canonical_onset: img(),
        canonical_apex: img(),
        onset_candidates: vec![img()],
        apex_candidates: vec![img()],
        regions: vec![],
    }
}

fn random_dataset(rng: &mut Rng, subjects: usize, samples: usize) -> Dataset {
    let pairs = (0..samples)
        .map(|i| {
            let s = if i < subjects { i } else { rng.below(subjects) };
            let label = rng.below(3);
            tiny_pair(&format!("x{i}"), &format!("sub{s}"), label)
        })
        .collect();
    Dataset::new(vec!["a".into(), "b".into(), "c".into()], pairs).unwrap()
}

#[test]
fn loso_folds_partition_exhaustively() {
    let mut rng = Rng::new(1);
    for trial in 0..50 {
        let subjects = 2 + trial % 7;
        let extra = rng.below(30);
        let ds = random_dataset(&mut rng, subjects, subjects + extra);
        let folds = loso_folds(&ds).unwrap();
        assert_eq!(folds.len(), subjects);
        let mut seen = vec![0usize; ds.len()];
        for f in &folds {
            let train: HashSet<&str> = f.train.samples.iter().map(|s| s.subject.as_str()).collect();
            assert!(f.test.samples.iter().all(|s| s.subject == f.subject));
            assert!(!train.contains(f.subject.as_str()));
            assert_eq!(f.train.len() + f.test.len(), ds.len());
            for &i in &f.test_indices {
                seen[i] += 1;
                assert_eq!(ds.samples[i].subject, f.subject);
            }
            for &i in &f.train_indices {
                assert_ne!(ds.samples[i].subject, f.subject);
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
    }
}

#[test]
fn casme_shaped_metadata_gives_26_folds() {
    let ds = random_dataset(&mut Rng::new(2), 26, 255);
    assert_eq!(loso_folds(&ds).unwrap().len(), 26);
}

#[test]
fn single_subject_is_a_protocol_error() {
    let ds = random_dataset(&mut Rng::new(3), 1, 4);
    assert!(matches!(loso_folds(&ds), Err(Error::Protocol(_))));
}

fn small_synth(subjects: usize, classes: usize, seed: u64) -> Dataset {
    synth_dataset(SynthSpec { subjects, classes, samples_per: 1 }, seed).unwrap()
}

#[test]
fn eval_view_is_deterministic_and_matches_the_identity_draw() {
    let ds = small_synth(1, 2, 4);
    let pair = &ds.samples[1];
    let (a, b) = eval_view(pair).unwrap();
    let (c, d) = eval_view(pair).unwrap();
    assert!(a.bit_eq(&c) && b.bit_eq(&d));
    assert_eq!(a.shape(), [3, CROP, CROP]);
    let apex_pick = pair.apex_candidates.iter().position(|t| t.bit_eq(&pair.canonical_apex)).unwrap();
    let onset_pick = pair.onset_candidates.iter().position(|t| t.bit_eq(&pair.canonical_onset)).unwrap();
    let identity = AugmentParams {
        onset_pick,
        apex_pick,
        flip: false,
        crop_y: CENTER,
        crop_x: CENTER,
        brightness: 0.0,
        contrast: 1.0,
    };
    let (e, f) = apply(pair, &identity).unwrap();
    assert!(e.bit_eq(&a) && f.bit_eq(&b));
}

#[test]
fn training_augmentation_replays_from_its_seed() {
    let ds = small_synth(1, 2, 5);
    let pair = &ds.samples[0];
    for seed in 0..5 {
        let (a, b) = augment(pair, &mut Rng::new(seed), true).unwrap();
        let (c, d) = augment(pair, &mut Rng::new(seed), true).unwrap();
        assert!(a.bit_eq(&c) && b.bit_eq(&d));
        assert!(a.data().iter().chain(b.data()).all(|v| (0.0..=1.0).contains(v)));
    }
    let (a, _) = augment(pair, &mut Rng::new(0), true).unwrap();
    let (b, _) = augment(pair, &mut Rng::new(1), true).unwrap();
    assert!(!a.bit_eq(&b));
}

#[test]
fn onset_and_apex_share_every_transform() {
    let img = Tensor::rand_uniform(vec![3, 240, 250], 0.0, 1.0, &mut Rng::new(6)).unwrap();
    let pair = SamplePair {
        id: "same".into(),
        subject: "s".into(),
        label: 0,
        canonical_onset: img.clone(),
        canonical_apex: img.clone(),
        onset_candidates: vec![img.clone(); 4],
        apex_candidates: vec![img.clone(); 4],
        regions: vec![],
    };
    for seed in 0..20 {
        let (a, b) = augment(&pair, &mut Rng::new(seed), true).unwrap();
        assert!(a.bit_eq(&b));
    }
}

#[test]
fn undersized_frames_are_geometry_errors() {
    let img = Tensor::zeros(vec![3, 200, 240]).unwrap();
    let pair = SamplePair {
        id: "small".into(),
        subject: "s".into(),
        label: 0,
        canonical_onset: img.clone(),
        canonical_apex: img.clone(),
        onset_candidates: vec![img.clone()],
        apex_candidates: vec![img],
        regions: vec![],
    };
    assert!(matches!(augment(&pair, &mut Rng::new(0), true), Err(Error::Geometry(_))));
    assert!(matches!(eval_view(&pair), Err(Error::Geometry(_))));
}

#[test]
fn synthetic_data_is_reproducible() {
    let a = small_synth(2, 3, 7);
    let b = small_synth(2, 3, 7);
    assert_eq!(a.samples, b.samples);
    assert_ne!(small_synth(2, 3, 8).samples[0].canonical_onset, a.samples[0].canonical_onset);
}

#[test]
fn frames_differ_only_inside_the_deformation_boxes() {
    let ds = small_synth(3, 5, 9);
    for pair in &ds.samples {
        assert!(!pair.regions.is_empty());
        let frames = pair.apex_candidates.iter().chain(&pair.onset_candidates).chain([&pair.canonical_apex]);
        for frame in frames {
            for (i, (a, b)) in frame.data().iter().zip(pair.canonical_onset.data()).enumerate() {
                if a != b {
                    let (y, x) = ((i % (SIZE * SIZE)) / SIZE, i % SIZE);
                    assert!(pair.regions.iter().any(|r| r.contains(x, y)), "{} differs at ({x},{y})", pair.id);
                }
            }
        }
        let moved = pair.canonical_apex.data().iter().zip(pair.canonical_onset.data()).filter(|(a, b)| a != b).count();
        assert!(moved > 0, "{} has no deformation", pair.id);
        assert!(pair.canonical_onset.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn subjects_vary_identity_not_the_deformation_rule() {
    let ds = small_synth(4, 5, 10);
    let by = |s: &str, c: usize| ds.samples.iter().find(|p| p.subject == s && p.label == c).unwrap();
    for c in 0..5 {
        let a = by("s00", c);
        let b = by("s01", c);
        assert_ne!(a.canonical_onset, b.canonical_onset);
        assert_eq!(a.regions.len(), b.regions.len());
    }
}

/// L2-normalized apex-minus-onset pixels of the evaluation view.
fn diff_features(pair: &SamplePair) -> Vec<f64> {
    let (onset, apex) = eval_view(pair).unwrap();
    let d: Vec<f64> = apex.data().iter().zip(onset.data()).map(|(a, b)| a - b).collect();
    let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    d.into_iter().map(|v| v / n).collect()
}

#[test]
fn raw_diff_linear_classifier_separates_two_classes() {
    for seed in [11, 12] {
        let ds = synth_dataset(SynthSpec { subjects: 6, classes: 2, samples_per: 2 }, seed).unwrap();
        let feats: Vec<Vec<f64>> = ds.samples.iter().map(diff_features).collect();
        let mut correct = 0;
        for fold in loso_folds(&ds).unwrap() {
            // class templates; the score is linear in the features
            let mut templates = vec![vec![0.0; feats[0].len()]; 2];
            for &i in &fold.train_indices {
                let t = &mut templates[ds.samples[i].label];
                t.iter_mut().zip(&feats[i]).for_each(|(a, b)| *a += b);
            }
            for &i in &fold.test_indices {
                let score: Vec<f64> = templates
                    .iter()
                    .map(|t| {
                        let n = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                        t.iter().zip(&feats[i]).map(|(a, b)| a * b).sum::<f64>() / n
                    })
                    .collect();
                correct += usize::from(usize::from(score[1] > score[0]) == ds.samples[i].label);
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.9, "seed {seed}: LOSO accuracy {acc}");
    }
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mmnet-data-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

#[test]
fn index_roundtrip_is_lossless() {
    let ds = small_synth(2, 2, 12);
    let dir = scratch("index");
    write_index(&dir, &ds).unwrap();
    let back = load_index(&dir.join("index.txt")).unwrap();
    assert_eq!(back.class_names, ds.class_names);
    assert_eq!(back.samples, ds.samples);
    std::fs::remove_dir_all(&dir).unwrap();
}

#[test]
fn malformed_index_is_a_format_error() {
    let dir = scratch("bad");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("index.txt");
    std::fs::write(&path, "mmnet-index 2\n").unwrap();
    assert!(matches!(load_index(&path), Err(Error::Format(_))));
    std::fs::write(&path, "mmnet-index 1\nclass 0 a\nsample id=x subject=s label=zero\n").unwrap();
    assert!(matches!(load_index(&path), Err(Error::Format(_))));
    std::fs::remove_dir_all(&dir).unwrap();
}
