//! Training loop, cross-validation and ablation harness.

use mmbt::autograd::Graph;
use mmbt::config::ExperimentConfig;
use mmbt::error::Error;
use mmbt::model::{init_model, loss, predict, StudyInput};
use mmbt::synth::{generate_dataset, SynthConfig};
use mmbt::train::{
    adam_step, fold_hash, run_ablation_matrix, run_jobs, stratified_folds, train_fold, AdamHyper,
    AdamState, ABLATION_MATRIX,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quick_config() -> ExperimentConfig {
    ExperimentConfig {
        epochs: 1,
        frames: 4,
        k: 2,
        seeds: vec![1],
        ..ExperimentConfig::default()
    }
}

/// Twenty studies whose static images carry a bright or dark corner square.
fn toy_set() -> (Vec<StudyInput>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut noise = |bright: Option<bool>| -> Vec<f32> {
        (0..32 * 32)
            .map(|i| {
                let (r, c) = (i / 32, i % 32);
                match bright {
                    Some(b) if r < 8 && c < 8 => {
                        if b {
                            0.9
                        } else {
                            0.1
                        }
                    }
                    _ => rng.random_range(0.3..0.7),
                }
            })
            .collect()
    };
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..20 {
        let y = (i % 2) as u8;
        inputs.push(StudyInput {
            images: vec![noise(Some(y == 1))],
            frames: (0..4).map(|_| noise(None)).collect(),
        });
        labels.push(y);
    }
    (inputs, labels)
}

#[test]
fn separable_toy_set_is_fit_within_200_steps() {
    let cfg = ExperimentConfig::default().model;
    let (inputs, labels) = toy_set();
    let mut params = init_model(&cfg, 1).unwrap();
    let hyper = AdamHyper::with_lr(1e-3);
    let mut state = AdamState::new(&params);
    let accuracy = |p: &mmbt::params::ParamStore<f32>| {
        let scores = predict(p, &cfg, &inputs).unwrap();
        let correct = scores
            .iter()
            .zip(&labels)
            .filter(|(s, &y)| u8::from(s.logit >= 0.0) == y)
            .count();
        correct as f64 / labels.len() as f64
    };
    let mut reached = None;
    for step in 1..=200 {
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let (l, _) = loss(&mut g, &b, &cfg, &inputs, &labels).unwrap();
        g.backward(l).unwrap();
        let grads = b.grads(&g);
        drop(b);
        adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        if accuracy(&params) == 1.0 {
            reached = Some(step);
            break;
        }
    }
    assert!(
        reached.is_some(),
        "train accuracy below 1.0 after 200 steps"
    );
}

#[test]
fn train_fold_is_deterministic_and_checks_splits() {
    let data = generate_dataset(3, 12, &SynthConfig::default()).unwrap();
    let (train, val): (Vec<_>, Vec<_>) = data.iter().partition(|s| s.study_id < 8);
    let cfg = quick_config();
    let a = train_fold(&train, &val, &cfg, 0, 1).unwrap();
    let b = train_fold(&train, &val, &cfg, 0, 1).unwrap();
    assert_eq!(a.result, b.result);
    assert_eq!(a.params, b.params);
    for m in [a.result.auc, a.result.acc, a.result.f1] {
        assert!((0.0..=1.0).contains(&m));
    }

    assert!(matches!(
        train_fold(&train, &[], &cfg, 0, 1),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train_fold(&train, &train[..2], &cfg, 0, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn zero_epochs_scores_the_initial_model() {
    let data = generate_dataset(3, 12, &SynthConfig::default()).unwrap();
    let (train, val): (Vec<_>, Vec<_>) = data.iter().partition(|s| s.study_id < 8);
    let cfg = ExperimentConfig {
        epochs: 0,
        ..quick_config()
    };
    let out = train_fold(&train, &val, &cfg, 2, 9).unwrap();
    assert_eq!(out.result.best_epoch, 0);
    let run_seed = mmbt::synth::derive_seed(9, 0x1000 + 2);
    assert_eq!(out.params, init_model(&cfg.model, run_seed).unwrap());
}

#[test]
fn desk_folds_are_forty_studies_split_evenly() {
    let labels: Vec<u8> = generate_dataset(7, 200, &SynthConfig::default())
        .unwrap()
        .iter()
        .map(|s| s.label)
        .collect();
    let folds = stratified_folds(&labels, 5, 1).unwrap();
    for f in &folds {
        assert_eq!(f.len(), 40);
        assert_eq!(f.iter().filter(|&&i| labels[i] == 1).count(), 20);
    }
    assert_eq!(
        fold_hash(&folds),
        fold_hash(&stratified_folds(&labels, 5, 1).unwrap())
    );
    assert_ne!(
        fold_hash(&folds),
        fold_hash(&stratified_folds(&labels, 5, 2).unwrap())
    );
    assert!(matches!(
        stratified_folds(&[0, 0, 0, 1], 2, 1),
        Err(Error::Stratification(_))
    ));
}

#[test]
fn matrix_rows_share_folds_and_thread_count_is_irrelevant() {
    let data = generate_dataset(5, 16, &SynthConfig::default()).unwrap();
    let rows = run_ablation_matrix(&data, &quick_config(), &[], 1).unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows.len(), ABLATION_MATRIX.len());
    let hash = &rows[0].runs[0].fold_hash;
    assert!(rows.iter().all(|r| &r.runs[0].fold_hash == hash));

    let cfgs = vec![quick_config()];
    let one = run_jobs(&data, &cfgs, 1).unwrap();
    let two = run_jobs(&data, &cfgs, 2).unwrap();
    assert_eq!(one[0][0].summary, two[0][0].summary);
    assert_eq!(one[0][0].checkpoints, two[0][0].checkpoints);
}
