//! Adam, the per-fold training loop, stratified k-fold cross-validation and
//! the ablation matrix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::aggregation::AttnVariant;
use crate::autograd::Graph;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::{FeatureMode, Prediction};
use crate::metrics::{compute_auc, compute_f1_acc, mean_std, median, threshold};
use crate::model::{init_model, loss, predict, ModelConfig, StudyInput};
use crate::params::ParamStore;
use crate::synth::{derive_seed, sample_frames, AugmentFlags, Augmentation, SampleMode, Study};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub t: usize,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<S>> = params
            .tensors()
            .iter()
            .map(|t| vec![S::zero(); t.len()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort with the
/// step index.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &[Vec<S>],
    state: &mut AdamState<S>,
    hyper: &AdamHyper,
) -> Result<()> {
    let step = state.t + 1;
    if grads.len() != params.len() {
        return Err(Error::Training {
            step,
            msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
        });
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Training {
            step,
            msg: "non-finite gradient".into(),
        });
    }
    state.t = step;
    let b1 = S::from_f64(hyper.beta1);
    let b2 = S::from_f64(hyper.beta2);
    let one = S::one();
    let c1 = S::from_f64(1.0 - hyper.beta1.powi(step as i32));
    let c2 = S::from_f64(1.0 - hyper.beta2.powi(step as i32));
    let lr = S::from_f64(hyper.lr);
    let eps = S::from_f64(hyper.eps);
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads[i]);
        for (j, w) in t.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Evaluation input: evenly spaced frames, no augmentation.
pub fn eval_input(study: &Study, frames: usize) -> Result<StudyInput> {
    let idx = sample_frames(study.video.len(), frames, SampleMode::EvalUniform, 0)?;
    Ok(StudyInput {
        images: study.images.clone(),
        frames: idx.iter().map(|&i| study.video[i].clone()).collect(),
    })
}

/// Training input: random sorted frame sample, per-image augmentation and
/// one augmentation draw shared by the whole clip.
pub fn train_input(study: &Study, frames: usize, augment: bool, seed: u64) -> Result<StudyInput> {
    let idx = sample_frames(study.video.len(), frames, SampleMode::TrainRandom, seed)?;
    let flags = if augment {
        AugmentFlags::ALL
    } else {
        AugmentFlags::NONE
    };
    let images = study
        .images
        .iter()
        .enumerate()
        .map(|(k, img)| {
            Augmentation::draw(derive_seed(seed, 1 + k as u64), flags).apply(img, study.size)
        })
        .collect();
    let clip = Augmentation::draw(derive_seed(seed, 0), flags);
    Ok(StudyInput {
        images,
        frames: idx
            .iter()
            .map(|&i| clip.apply(&study.video[i], study.size))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyPrediction {
    pub study_id: u64,
    pub label: u8,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub seed: u64,
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
    /// Epoch whose checkpoint was selected; 0 means the initial model.
    pub best_epoch: usize,
    pub predictions: Vec<StudyPrediction>,
}

pub struct FoldOutcome {
    pub result: FoldResult,
    pub params: ParamStore<f32>,
}

const EVAL_CHUNK: usize = 8;

fn evaluate(
    params: &ParamStore<f32>,
    cfg: &ModelConfig,
    studies: &[&Study],
    inputs: &[StudyInput],
) -> Result<(f64, f64, f64, Vec<StudyPrediction>)> {
    let mut predictions = Vec::with_capacity(studies.len());
    for (chunk_s, chunk_i) in studies.chunks(EVAL_CHUNK).zip(inputs.chunks(EVAL_CHUNK)) {
        for (s, score) in chunk_s.iter().zip(predict(params, cfg, chunk_i)?) {
            if !score.logit.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite logit for study {}",
                    s.study_id
                )));
            }
            predictions.push(StudyPrediction {
                study_id: s.study_id,
                label: s.label,
                probability: Prediction::from_logit(score.logit).probability,
            });
        }
    }
    let probs: Vec<f64> = predictions.iter().map(|p| p.probability).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let auc = compute_auc(&probs, &labels)?;
    let (f1, acc) = compute_f1_acc(&threshold(&probs), &labels);
    Ok((auc, acc, f1, predictions))
}

/// Train one fold and return the metrics of the best-validation-AUC epoch.
///
/// Ties keep the earlier epoch, so once validation AUC reaches 1.0 the
/// selection is final and the remaining epochs are skipped.
pub fn train_fold(
    train: &[&Study],
    val: &[&Study],
    cfg: &ExperimentConfig,
    fold: usize,
    seed: u64,
) -> Result<FoldOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "train and validation splits must be non-empty".into(),
        ));
    }
    if let Some(s) = train
        .iter()
        .find(|t| val.iter().any(|v| v.study_id == t.study_id))
    {
        return Err(Error::Config(format!(
            "study {} appears in both train and validation",
            s.study_id
        )));
    }
    cfg.validate()?;
    let run_seed = derive_seed(seed, 0x1000 + fold as u64);
    let mut params = init_model(&cfg.model, run_seed)?;
    let val_inputs = val
        .iter()
        .map(|s| eval_input(s, cfg.frames))
        .collect::<Result<Vec<_>>>()?;

    let (auc, acc, f1, predictions) = evaluate(&params, &cfg.model, val, &val_inputs)?;
    let mut best = FoldResult {
        fold,
        seed,
        auc,
        acc,
        f1,
        best_epoch: 0,
        predictions,
    };
    if cfg.epochs == 0 {
        return Ok(FoldOutcome {
            result: best,
            params,
        });
    }
    best.auc = f64::NEG_INFINITY;
    let mut best_params = params.clone();

    let hyper = AdamHyper::with_lr(cfg.lr);
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(run_seed, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        for batch in order.chunks(cfg.batch_size) {
            let inputs = batch
                .iter()
                .map(|&i| {
                    let s = train[i];
                    train_input(
                        s,
                        cfg.frames,
                        cfg.augment,
                        derive_seed(epoch_seed, s.study_id),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<u8> = batch.iter().map(|&i| train[i].label).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let (l, _) = loss(&mut g, &bound, &cfg.model, &inputs, &labels)?;
            let value = g.value(l).data()[0];
            if !value.is_finite() {
                return Err(Error::Training {
                    step: state.t + 1,
                    msg: format!("loss is {value}"),
                });
            }
            g.backward(l)?;
            let grads = bound.grads(&g);
            drop(bound);
            adam_step(&mut params, &grads, &mut state, &hyper)?;
        }
        let (auc, acc, f1, predictions) = evaluate(&params, &cfg.model, val, &val_inputs)?;
        if auc > best.auc {
            best = FoldResult {
                fold,
                seed,
                auc,
                acc,
                f1,
                best_epoch: epoch,
                predictions,
            };
            best_params = params.clone();
        }
        if best.auc >= 1.0 {
            break;
        }
    }
    Ok(FoldOutcome {
        result: best,
        params: best_params,
    })
}

/// Stratified fold assignment: study positions per validation fold.
///
/// Each class is shuffled with `seed` and dealt round-robin; the second
/// class continues where the first stopped, keeping fold sizes within one.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("k must be at least 2, got {k}")));
    }
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF01D));
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Stratification(format!(
                "class {class} has {} studies, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for m in members {
            folds[next % k].push(m);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Short digest of a fold assignment, for checking controlled comparisons.
pub fn fold_hash(folds: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for f in folds {
        for &i in f {
            h.update((i as u64).to_le_bytes());
        }
        h.update(u64::MAX.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KfoldSummary {
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub fold_hash: String,
    pub auc: MetricSummary,
    pub f1: MetricSummary,
    pub acc: MetricSummary,
}

impl KfoldSummary {
    fn from_folds(seed: u64, folds: Vec<FoldResult>, fold_hash: String) -> Self {
        let stat = |f: fn(&FoldResult) -> f64| {
            let xs: Vec<f64> = folds.iter().map(f).collect();
            let (mean, std) = mean_std(&xs);
            MetricSummary { mean, std }
        };
        KfoldSummary {
            seed,
            auc: stat(|r| r.auc),
            f1: stat(|r| r.f1),
            acc: stat(|r| r.acc),
            folds,
            fold_hash,
        }
    }
}

/// A unit of work for [`run_jobs`].
#[derive(Clone, Debug)]
struct FoldJob {
    cfg_index: usize,
    seed: u64,
    fold: usize,
}

/// Trained folds of one configuration and seed, with their best checkpoints.
pub struct SeedRun {
    pub summary: KfoldSummary,
    pub checkpoints: Vec<ParamStore<f32>>,
}

/// Cross-validate every `(config, seed)` pair on `dataset`. Folds run on up to
/// `jobs` threads; results are identical for any `jobs`.
pub fn run_jobs(
    dataset: &[Study],
    configs: &[ExperimentConfig],
    jobs: usize,
) -> Result<Vec<Vec<SeedRun>>> {
    let labels: Vec<u8> = dataset.iter().map(|s| s.label).collect();
    let mut work = Vec::new();
    let mut assignments = std::collections::HashMap::new();
    for (ci, cfg) in configs.iter().enumerate() {
        cfg.validate()?;
        for &seed in &cfg.seeds {
            if let std::collections::hash_map::Entry::Vacant(e) = assignments.entry((seed, cfg.k)) {
                e.insert(stratified_folds(&labels, cfg.k, seed)?);
            }
            for fold in 0..cfg.k {
                work.push(FoldJob {
                    cfg_index: ci,
                    seed,
                    fold,
                });
            }
        }
    }
    let run = |job: &FoldJob| -> Result<FoldOutcome> {
        let cfg = &configs[job.cfg_index];
        let folds = &assignments[&(job.seed, cfg.k)];
        let val_set = &folds[job.fold];
        let val: Vec<&Study> = val_set.iter().map(|&i| &dataset[i]).collect();
        let train: Vec<&Study> = (0..dataset.len())
            .filter(|i| val_set.binary_search(i).is_err())
            .map(|i| &dataset[i])
            .collect();
        train_fold(&train, &val, cfg, job.fold, job.seed)
    };
    let outcomes: Vec<Result<FoldOutcome>> = if jobs <= 1 {
        work.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| work.par_iter().map(run).collect())
    };

    let mut outcomes = outcomes.into_iter();
    let mut all = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut per_seed = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            let mut folds = Vec::with_capacity(cfg.k);
            let mut checkpoints = Vec::with_capacity(cfg.k);
            for _ in 0..cfg.k {
                let o = outcomes.next().expect("one outcome per job")?;
                folds.push(o.result);
                checkpoints.push(o.params);
            }
            let hash = fold_hash(&assignments[&(seed, cfg.k)]);
            per_seed.push(SeedRun {
                summary: KfoldSummary::from_folds(seed, folds, hash),
                checkpoints,
            });
        }
        all.push(per_seed);
    }
    Ok(all)
}

/// k-fold cross-validation of one configuration for one seed.
pub fn kfold_run(dataset: &[Study], cfg: &ExperimentConfig, seed: u64) -> Result<KfoldSummary> {
    let cfg = ExperimentConfig {
        seeds: vec![seed],
        ..cfg.clone()
    };
    let mut runs = run_jobs(dataset, std::slice::from_ref(&cfg), 1)?;
    Ok(runs.remove(0).remove(0).summary)
}

/// One row of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationSpec {
    pub name: &'static str,
    pub feature_mode: FeatureMode,
    pub attn_variant: AttnVariant,
    /// Feature-modality column label.
    pub modality: &'static str,
    /// Attention-token column label.
    pub attn_label: &'static str,
}

pub const ABLATION_MATRIX: [AblationSpec; 7] = [
    AblationSpec {
        name: "video_cls",
        feature_mode: FeatureMode::VideoOnly,
        attn_variant: AttnVariant::ClsToken,
        modality: "Video",
        attn_label: "[cls]",
    },
    AblationSpec {
        name: "video_attn",
        feature_mode: FeatureMode::VideoOnly,
        attn_variant: AttnVariant::AttnToken,
        modality: "Video",
        attn_label: "[Attn]",
    },
    AblationSpec {
        name: "multi_uniform",
        feature_mode: FeatureMode::Multi,
        attn_variant: AttnVariant::Uniform,
        modality: "Multi",
        attn_label: "-",
    },
    AblationSpec {
        name: "multi_cls",
        feature_mode: FeatureMode::Multi,
        attn_variant: AttnVariant::ClsToken,
        modality: "Multi",
        attn_label: "[cls]",
    },
    AblationSpec {
        name: "multi_attn",
        feature_mode: FeatureMode::Multi,
        attn_variant: AttnVariant::AttnToken,
        modality: "Multi",
        attn_label: "[Attn]",
    },
    AblationSpec {
        name: "image_only",
        feature_mode: FeatureMode::ImageOnly,
        attn_variant: AttnVariant::Uniform,
        modality: "Image",
        attn_label: "single-modality",
    },
    AblationSpec {
        name: "video_mean",
        feature_mode: FeatureMode::VideoOnly,
        attn_variant: AttnVariant::Uniform,
        modality: "Video",
        attn_label: "single-modality",
    },
];

pub fn ablation_spec(name: &str) -> Option<AblationSpec> {
    ABLATION_MATRIX.iter().copied().find(|s| s.name == name)
}

impl AblationSpec {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        cfg.model.feature_mode = self.feature_mode;
        cfg.model.attn_variant = self.attn_variant;
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub runs: Vec<KfoldSummary>,
}

impl AblationRow {
    /// Median over seeds of the per-seed fold mean (and fold std).
    pub fn median_of(&self, pick: fn(&KfoldSummary) -> &MetricSummary) -> MetricSummary {
        let means: Vec<f64> = self.runs.iter().map(|r| pick(r).mean).collect();
        let stds: Vec<f64> = self.runs.iter().map(|r| pick(r).std).collect();
        MetricSummary {
            mean: median(&means),
            std: median(&stds),
        }
    }
}

/// Run the selected ablation rows (all seven when `names` is empty) under
/// identical folds and seeds.
pub fn run_ablation_matrix(
    dataset: &[Study],
    base: &ExperimentConfig,
    names: &[&str],
    jobs: usize,
) -> Result<Vec<AblationRow>> {
    let specs: Vec<AblationSpec> = if names.is_empty() {
        ABLATION_MATRIX.to_vec()
    } else {
        names
            .iter()
            .map(|n| {
                ablation_spec(n).ok_or_else(|| Error::Config(format!("unknown ablation row {n}")))
            })
            .collect::<Result<_>>()?
    };
    let configs: Vec<ExperimentConfig> = specs.iter().map(|s| s.apply(base)).collect();
    let runs = run_jobs(dataset, &configs, jobs)?;
    Ok(specs
        .into_iter()
        .zip(runs)
        .map(|(spec, seeds)| AblationRow {
            spec,
            runs: seeds.into_iter().map(|r| r.summary).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = ParamStore::<f64>::new();
        p.insert("w", Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap())
            .unwrap();
        let mut st = AdamState::new(&p);
        let h = AdamHyper::with_lr(0.001);
        adam_step(&mut p, &[vec![1.0, -3.0]], &mut st, &h).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - (0.5 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-1.0 + 0.001 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Tensor::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adam_step(&mut p, &[vec![0.0; 3]], &mut st, &AdamHyper::with_lr(0.1)).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = ParamStore::<f32>::new();
        p.insert("w", Tensor::zeros(&[1])).unwrap();
        let mut st = AdamState::new(&p);
        st.t = 6;
        let err =
            adam_step(&mut p, &[vec![f32::NAN]], &mut st, &AdamHyper::with_lr(0.1)).unwrap_err();
        assert!(matches!(err, Error::Training { step: 7, .. }));
    }

    #[test]
    fn folds_are_stratified_disjoint_cover() {
        let labels: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
        let folds = stratified_folds(&labels, 5, 3).unwrap();
        let mut seen = vec![0; 200];
        for f in &folds {
            assert_eq!(f.len(), 40);
            assert_eq!(f.iter().filter(|&&i| labels[i] == 1).count(), 20);
            for &i in f {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(
            fold_hash(&folds),
            fold_hash(&stratified_folds(&labels, 5, 3).unwrap())
        );
    }

    #[test]
    fn stratification_needs_enough_per_class() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1];
        assert!(matches!(
            stratified_folds(&labels, 3, 0),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn matrix_has_seven_distinct_rows() {
        let mut pairs: Vec<_> = ABLATION_MATRIX
            .iter()
            .map(|s| (s.feature_mode, s.attn_variant))
            .collect();
        pairs.sort_by_key(|p| format!("{p:?}"));
        pairs.dedup();
        assert_eq!(pairs.len(), 7);
    }
}
