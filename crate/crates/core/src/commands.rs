//! Command implementations behind the `mmbt` binary: dataset generation,
//! cross-validated training, the ablation matrix, attention export and the
//! gradient self-check.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::AttnVariant;
use crate::autograd::Graph;
use crate::checkpoint::{checkpoint_container, params_from_container, Container};
use crate::config::ExperimentConfig;
use crate::dataset::{
    create_dir, pgm_bytes, write_dataset, Dataset, DatasetManifest, GenerateOptions,
};
use crate::error::{Error, Result};
use crate::fusion::FeatureMode;
use crate::gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
use crate::metrics::format_pct;
use crate::model::{init_model, loss, predict, ModelConfig, StudyInput};
use crate::params::ParamStore;
use crate::synth::{sample_frames, SampleMode, SynthConfig};
use crate::train::{run_jobs, AblationSpec, KfoldSummary, MetricSummary, SeedRun, ABLATION_MATRIX};

/// Prefix of checkpoint meta keys that hold the experiment config.
pub const CONFIG_META_PREFIX: &str = "config.";

pub const RESULTS_HEADER: [&str; 6] = ["config_name", "seed", "fold", "auc", "f1", "acc"];
pub const PREDICTIONS_HEADER: [&str; 6] = [
    "config_name",
    "seed",
    "fold",
    "study_id",
    "label",
    "probability",
];
pub const AGGREGATE_HEADER: [&str; 9] = [
    "config_name",
    "seed",
    "auc_mean",
    "auc_std",
    "f1_mean",
    "f1_std",
    "acc_mean",
    "acc_std",
    "fold_hash",
];
pub const TABLE_HEADER: [&str; 9] = [
    "config_name",
    "modality",
    "attention",
    "auc",
    "f1",
    "acc",
    "auc_median",
    "f1_median",
    "acc_median",
];
pub const ATTENTION_HEADER: [&str; 6] = [
    "study_id",
    "frame_index",
    "logit",
    "weight",
    "rank_by_weight",
    "keyframe",
];

fn num(x: f64) -> String {
    format!("{x:.6}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Append `rows` to the CSV at `path`, writing `header` first if the file is
/// new or empty. An existing file with a different header is an error.
pub fn append_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let fresh = match fs::File::open(path) {
        Ok(f) => {
            let mut first = String::new();
            BufReader::new(f)
                .read_line(&mut first)
                .map_err(|e| Error::io(path, e))?;
            let first = first.trim_end();
            if !first.is_empty() && first != header.join(",") {
                return Err(Error::Data(format!(
                    "{} has header {first:?}, expected {:?}",
                    path.display(),
                    header.join(",")
                )));
            }
            first.is_empty()
        }
        Err(_) => true,
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if fresh {
        w.write_record(header).map_err(|e| csv_err(path, e))?;
    }
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_gen(
    out: &Path,
    seed: u64,
    n: usize,
    difficulty: f64,
    force: bool,
    previews: bool,
) -> Result<(DatasetManifest, String)> {
    let opts = GenerateOptions {
        seed,
        n,
        synth: SynthConfig {
            difficulty,
            ..SynthConfig::default()
        },
        force,
        previews,
    };
    write_dataset(out, &opts)
}

/// Ablation row name for a config, or `custom` when it matches none.
pub fn config_name(cfg: &ModelConfig) -> &'static str {
    ABLATION_MATRIX
        .iter()
        .find(|s| s.feature_mode == cfg.feature_mode && s.attn_variant == cfg.attn_variant)
        .map_or("custom", |s| s.name)
}

pub fn checkpoint_meta(
    cfg: &ExperimentConfig,
    name: &str,
    seed: u64,
    fold: usize,
    val_auc: f64,
) -> Vec<(String, String)> {
    let mut meta = vec![
        ("config_name".to_string(), name.to_string()),
        ("seed".to_string(), seed.to_string()),
        ("fold".to_string(), fold.to_string()),
        ("val_auc".to_string(), num(val_auc)),
    ];
    meta.extend(
        cfg.pairs()
            .into_iter()
            .map(|(k, v)| (format!("{CONFIG_META_PREFIX}{k}"), v)),
    );
    meta
}

/// Experiment config recorded in a checkpoint.
pub fn config_from_checkpoint(c: &Container) -> Result<ExperimentConfig> {
    ExperimentConfig::from_pairs(
        c.meta
            .iter()
            .filter_map(|(k, v)| Some((k.strip_prefix(CONFIG_META_PREFIX)?, v.as_str()))),
    )
}

pub fn checkpoint_path(out: &Path, name: &str, seed: u64, fold: usize) -> PathBuf {
    out.join("checkpoints")
        .join(format!("{name}_seed{seed}_fold{fold}.ckpt"))
}

/// A finished configuration: its name, the config it ran with and one run
/// per seed.
pub struct ConfigRuns {
    pub name: String,
    pub spec: Option<AblationSpec>,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

impl ConfigRuns {
    pub fn summaries(&self) -> impl Iterator<Item = &KfoldSummary> {
        self.runs.iter().map(|r| &r.summary)
    }

    /// Median over seeds of the per-seed fold mean and fold std.
    pub fn median_of(&self, pick: fn(&KfoldSummary) -> &MetricSummary) -> MetricSummary {
        let means: Vec<f64> = self.summaries().map(|s| pick(s).mean).collect();
        let stds: Vec<f64> = self.summaries().map(|s| pick(s).std).collect();
        MetricSummary {
            mean: crate::metrics::median(&means),
            std: crate::metrics::median(&stds),
        }
    }
}

/// Train every config under cross-validation and write results, predictions,
/// per-seed aggregates and best-epoch checkpoints into `out`.
pub fn run_and_write(
    dataset: &Dataset,
    named: Vec<(String, Option<AblationSpec>, ExperimentConfig)>,
    out: &Path,
    jobs: usize,
) -> Result<Vec<ConfigRuns>> {
    let configs: Vec<ExperimentConfig> = named.iter().map(|(_, _, c)| c.clone()).collect();
    let runs = run_jobs(&dataset.studies, &configs, jobs)?;
    create_dir(&out.join("checkpoints"))?;
    let mut done = Vec::with_capacity(named.len());
    let (mut results, mut preds, mut aggregate) = (Vec::new(), Vec::new(), Vec::new());
    for ((name, spec, config), seeds) in named.into_iter().zip(runs) {
        for run in &seeds {
            let s = &run.summary;
            for (f, ckpt) in s.folds.iter().zip(&run.checkpoints) {
                results.push(vec![
                    name.clone(),
                    s.seed.to_string(),
                    f.fold.to_string(),
                    num(f.auc),
                    num(f.f1),
                    num(f.acc),
                ]);
                for p in &f.predictions {
                    preds.push(vec![
                        name.clone(),
                        s.seed.to_string(),
                        f.fold.to_string(),
                        p.study_id.to_string(),
                        p.label.to_string(),
                        num(p.probability),
                    ]);
                }
                let meta = checkpoint_meta(&config, &name, s.seed, f.fold, f.auc);
                checkpoint_container(ckpt, meta)
                    .write(&checkpoint_path(out, &name, s.seed, f.fold))?;
            }
            aggregate.push(vec![
                name.clone(),
                s.seed.to_string(),
                num(s.auc.mean),
                num(s.auc.std),
                num(s.f1.mean),
                num(s.f1.std),
                num(s.acc.mean),
                num(s.acc.std),
                s.fold_hash.clone(),
            ]);
        }
        done.push(ConfigRuns {
            name,
            spec,
            config,
            runs: seeds,
        });
    }
    append_csv(&out.join("results.csv"), &RESULTS_HEADER, &results)?;
    append_csv(&out.join("predictions.csv"), &PREDICTIONS_HEADER, &preds)?;
    append_csv(&out.join("aggregate.csv"), &AGGREGATE_HEADER, &aggregate)?;
    Ok(done)
}

fn prepare_out(out: &Path, data: &Path) -> Result<()> {
    create_dir(out)?;
    let (a, b) = (out.canonicalize(), data.canonicalize());
    if let (Ok(a), Ok(b)) = (a, b) {
        if a.starts_with(&b) {
            return Err(Error::Config(format!(
                "output {} lies inside the dataset directory",
                out.display()
            )));
        }
    }
    Ok(())
}

/// Cross-validate the configuration in `cfg` as is.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    jobs: usize,
) -> Result<ConfigRuns> {
    cfg.validate()?;
    let dataset = Dataset::load(data)?;
    prepare_out(out, data)?;
    let name = config_name(&cfg.model);
    let spec = ABLATION_MATRIX.iter().copied().find(|s| s.name == name);
    let mut runs = run_and_write(
        &dataset,
        vec![(name.to_string(), spec, cfg.clone())],
        out,
        jobs,
    )?;
    Ok(runs.remove(0))
}

/// Run the ablation rows `names` (all seven when empty) on top of `base`
/// under identical folds and seeds; also writes `table1.csv`.
pub fn cmd_ablate(
    base: &ExperimentConfig,
    names: &[String],
    data: &Path,
    out: &Path,
    jobs: usize,
) -> Result<Vec<ConfigRuns>> {
    base.validate()?;
    let specs: Vec<AblationSpec> = if names.is_empty() {
        ABLATION_MATRIX.to_vec()
    } else {
        names
            .iter()
            .map(|n| {
                crate::train::ablation_spec(n)
                    .ok_or_else(|| Error::Config(format!("unknown ablation row {n:?}")))
            })
            .collect::<Result<_>>()?
    };
    let dataset = Dataset::load(data)?;
    prepare_out(out, data)?;
    let named = specs
        .iter()
        .map(|s| (s.name.to_string(), Some(*s), s.apply(base)))
        .collect();
    let runs = run_and_write(&dataset, named, out, jobs)?;
    let table: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let spec = r.spec.expect("ablation rows carry their spec");
            let (auc, f1, acc) = (
                r.median_of(|s| &s.auc),
                r.median_of(|s| &s.f1),
                r.median_of(|s| &s.acc),
            );
            vec![
                r.name.clone(),
                spec.modality.to_string(),
                spec.attn_label.to_string(),
                format_pct(auc.mean, auc.std),
                format_pct(f1.mean, f1.std),
                format_pct(acc.mean, acc.std),
                num(auc.mean),
                num(f1.mean),
                num(acc.mean),
            ]
        })
        .collect();
    let table_path = out.join("table1.csv");
    if table_path.exists() {
        fs::remove_file(&table_path).map_err(|e| Error::io(&table_path, e))?;
    }
    append_csv(&table_path, &TABLE_HEADER, &table)?;
    Ok(runs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameAttention {
    pub frame_index: usize,
    pub logit: f64,
    pub weight: f64,
    /// 0 for the most attended frame; ties go to the earlier frame.
    pub rank: usize,
    pub keyframe: bool,
}

/// Ranks by descending weight, ties broken by ascending position.
pub fn rank_by_weight(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut rank = vec![0; weights.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Frame attention of one study under a checkpoint. Writes
/// `attention.csv` in temporal order and `frames/rank<r>_frame<i>.pgm`.
pub fn cmd_export_attention(
    ckpt: &Path,
    data: &Path,
    study_id: u64,
    out: &Path,
) -> Result<Vec<FrameAttention>> {
    let container = Container::read(ckpt)?;
    let cfg = config_from_checkpoint(&container)?;
    let params = params_from_container(&container)?;
    if !cfg.model.needs_frames() {
        return Err(Error::Config(format!(
            "{} is an image-only model and has no frame attention",
            ckpt.display()
        )));
    }
    let dataset = Dataset::load(data)?;
    let study = dataset.study(study_id)?;
    let idx = sample_frames(study.video.len(), cfg.frames, SampleMode::EvalUniform, 0)?;
    let input = crate::train::eval_input(study, cfg.frames)?;
    let score = predict(&params, &cfg.model, std::slice::from_ref(&input))?.remove(0);
    let ranks = rank_by_weight(&score.weights);
    let frames: Vec<FrameAttention> = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| FrameAttention {
            frame_index: i,
            logit: score.frame_logits.get(k).copied().unwrap_or(0.0),
            weight: score.weights[k],
            rank: ranks[k],
            keyframe: study.keyframe_indices().contains(&i),
        })
        .collect();

    prepare_out(out, data)?;
    let frame_dir = out.join("frames");
    create_dir(&frame_dir)?;
    for (f, &i) in frames.iter().zip(&idx) {
        let name = format!("rank{:02}_frame{:03}.pgm", f.rank, f.frame_index);
        crate::dataset::write_file(
            &frame_dir.join(name),
            &pgm_bytes(&study.video[i], study.size, study.size),
        )?;
    }
    let rows: Vec<Vec<String>> = frames
        .iter()
        .map(|f| {
            vec![
                study_id.to_string(),
                f.frame_index.to_string(),
                format!("{:.9}", f.logit),
                format!("{:.9}", f.weight),
                f.rank.to_string(),
                u8::from(f.keyframe).to_string(),
            ]
        })
        .collect();
    let path = out.join("attention.csv");
    if path.exists() {
        fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
    }
    append_csv(&path, &ATTENTION_HEADER, &rows)?;
    Ok(frames)
}

/// Small model used by the gradient self-check: 8x8 inputs, 2x2 patches
/// of size 4, width 8, two heads, two layers.
pub fn gradcheck_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let e = &mut cfg.model.encoder;
    e.height = 8;
    e.width = 8;
    e.patch = 4;
    e.d_model = 8;
    e.n_heads = 2;
    e.n_layers = 2;
    e.d_out = 6;
    cfg
}

/// Two random studies (2 images and 3 frames, 1 image and 2 frames) with
/// labels 1 and 0.
pub fn gradcheck_batch(cfg: &ModelConfig, seed: u64) -> (Vec<StudyInput>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.encoder.pixels();
    let mut img = || (0..n).map(|_| rng.random::<f32>()).collect::<Vec<f32>>();
    let studies = vec![
        StudyInput {
            images: vec![img(), img()],
            frames: vec![img(), img(), img()],
        },
        StudyInput {
            images: vec![img()],
            frames: vec![img(), img()],
        },
    ];
    (studies, vec![1, 0])
}

/// Model variants covered by the gradient self-check: the seven ablation
/// rows plus separate encoders and the scaled and distribution-averaging
/// attention modes.
pub fn gradcheck_variants() -> Vec<(String, ModelConfig)> {
    let base = gradcheck_config();
    let mut out: Vec<(String, ModelConfig)> = ABLATION_MATRIX
        .iter()
        .map(|s| (s.name.to_string(), s.apply(&base).model))
        .collect();
    let mut split = base.model.clone();
    split.share_encoder = false;
    out.push(("multi_attn_split_encoders".into(), split));
    let mut scaled = base.model.clone();
    scaled.scale_mode = crate::aggregation::ScaleMode::Scaled;
    out.push(("multi_attn_scaled".into(), scaled));
    let mut dist = base.model.clone();
    dist.image_average_mode = crate::aggregation::ImageAverageMode::Distributions;
    out.push(("multi_attn_avg_distributions".into(), dist));
    let mut hidden = base.model.clone();
    hidden.head_hidden = 5;
    out.push(("multi_attn_hidden_head".into(), hidden));
    debug_assert!(out
        .iter()
        .any(|(_, m)| m.attn_variant == AttnVariant::ClsToken));
    debug_assert!(out
        .iter()
        .any(|(_, m)| m.feature_mode == FeatureMode::ImageOnly));
    out
}

/// Full-model finite-difference check of the training loss in 64-bit mode.
pub fn model_gradcheck_f64(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let (studies, labels) = gradcheck_batch(cfg, seed);
    let theta = init_model(cfg, seed)?.cast::<f64>();
    check_gradients(
        |g, b| Ok(loss(g, b, cfg, &studies, &labels)?.0),
        &theta,
        &GradCheckOptions::default(),
    )
}

/// 32-bit autograd gradients against 64-bit central differences, probing
/// at most 16 coordinates per tensor.
pub fn model_gradcheck_f32(cfg: &ModelConfig, seed: u64) -> Result<GradCheckReport> {
    let (studies, labels) = gradcheck_batch(cfg, seed);
    let theta32 = init_model(cfg, seed)?;
    let mut g = Graph::<f32>::new();
    let bound = theta32.bind(&mut g);
    let (l, _) = loss(&mut g, &bound, cfg, &studies, &labels)?;
    g.backward(l)?;
    let auto = bound.grads(&g);
    drop(bound);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::verifying();
        let b = store.bind(&mut g);
        let (l, _) = loss(&mut g, &b, cfg, &studies, &labels)?;
        Ok(g.value(l).data()[0])
    };
    let h = 1e-6;
    let mut work = theta32.cast::<f64>();
    let mut report = GradCheckReport::default();
    for (p, grad) in auto.iter().enumerate() {
        let n = work.tensors()[p].len();
        for i in (0..n).step_by(n.div_ceil(16).max(1)) {
            let orig = work.tensors()[p].data()[i];
            work.tensors_mut()[p].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.tensors_mut()[p].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.tensors_mut()[p].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let err = (grad[i] as f64 - fd).abs() / fd.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_param.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst_param = Some(work.names()[p].clone());
            }
        }
    }
    Ok(report)
}

/// Tolerances of the gradient self-check in 64-bit and 32-bit mode.
pub const GRADCHECK_TOL_F64: f64 = 1e-5;
pub const GRADCHECK_TOL_F32: f64 = 1e-2;

pub struct GradCheckLine {
    pub variant: String,
    pub seed: u64,
    pub report: GradCheckReport,
    pub passed: bool,
}

/// Check every variant for every seed. `verify` selects 64-bit mode.
pub fn cmd_check_gradients(seeds: &[u64], verify: bool) -> Result<Vec<GradCheckLine>> {
    let tol = if verify {
        GRADCHECK_TOL_F64
    } else {
        GRADCHECK_TOL_F32
    };
    let mut lines = Vec::new();
    for (variant, cfg) in gradcheck_variants() {
        for &seed in seeds {
            let report = if verify {
                model_gradcheck_f64(&cfg, seed)?
            } else {
                model_gradcheck_f32(&cfg, seed)?
            };
            let passed = report.max_rel_error < tol;
            lines.push(GradCheckLine {
                variant: variant.clone(),
                seed,
                report,
                passed,
            });
        }
    }
    Ok(lines)
}
