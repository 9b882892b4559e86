//! Config-driven continual-learning pipeline: per task, statistics,
//! decomposition, anchoring, training, recalibration and integration, then
//! evaluation over every seen test set.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{DualLoRALayer, DEFAULT_GENERAL_WEIGHT};
use crate::error::{LodaError, Result};
use crate::model::{ClassId, CosineClassifier, FeatureExtractor, DEFAULT_TEMPERATURE};
use crate::recalib::{self, RescaleResult, DEFAULT_LAMBDA};
use crate::stats::{Retention, SecondMoment, SecondMomentStore};
use crate::stream::{self, derive_seed, StreamConfig, TaskDataset};
use crate::subspace::{self, SubspaceBases, SubspaceKind, DEFAULT_JITTER_SCALE};
use crate::trainer::{self, OptimizerKind, TrainConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const PRESETS: [&str; 5] = ["baseline_single_lora", "general_only", "isolated_only", "dual_no_gao", "full_loda"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsolationMethod {
    LodaIsolated,
    NullBaseline,
    /// Random orthonormal down-projection, active from the first task.
    RandomOrthonormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    ClosedForm,
    Identity,
    RunningAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Branches {
    pub general: bool,
    pub isolated: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            general: true,
            isolated: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Master seed. Replaces `stream.seed` and derives every other seed.
    pub seed: u64,
    pub stream: StreamConfig,
    /// Ingest this CSV instead of generating a stream.
    pub data_path: Option<PathBuf>,
    pub feature_dim: usize,
    pub out_dim: usize,
    pub extractor_scale: f64,
    pub rank: usize,
    pub general_weight: f64,
    pub lambda: f64,
    pub temperature: f64,
    pub jitter_scale: f64,
    pub branches: Branches,
    pub isolation: IsolationMethod,
    pub merge: MergeMethod,
    /// Also train the isolated down-projection.
    pub train_down: bool,
    pub retention: Retention,
    pub train: TrainConfig,
    pub preset: Option<String>,
    /// Interpolation points along the general update after task 2 (0 disables).
    pub interp_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            stream: StreamConfig::default(),
            data_path: None,
            feature_dim: 64,
            out_dim: 64,
            extractor_scale: 1.0,
            rank: 4,
            general_weight: DEFAULT_GENERAL_WEIGHT,
            lambda: DEFAULT_LAMBDA,
            temperature: DEFAULT_TEMPERATURE,
            jitter_scale: DEFAULT_JITTER_SCALE,
            branches: Branches::default(),
            isolation: IsolationMethod::LodaIsolated,
            merge: MergeMethod::ClosedForm,
            train_down: false,
            retention: Retention::CumulativeOnly,
            train: TrainConfig::default(),
            preset: None,
            interp_steps: 0,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LodaError::Config(e.to_string()))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(LodaError::Config(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LodaError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the named preset's deltas and records its name.
    pub fn with_preset(mut self, name: &str) -> Result<Self> {
        apply_preset(&mut self, name)?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LodaError::Config(m));
        if self.data_path.is_none() {
            self.stream.validate()?;
        }
        self.train.validate()?;
        if self.feature_dim == 0 || self.out_dim == 0 {
            return bad("feature_dim and out_dim must be positive".into());
        }
        if self.rank == 0 || self.rank > self.feature_dim {
            return bad(format!("rank {} must lie in 1..={}", self.rank, self.feature_dim));
        }
        if !(self.lambda > 0.0) || !(self.temperature > 0.0) || !(self.extractor_scale > 0.0) {
            return bad("lambda, temperature and extractor_scale must be > 0".into());
        }
        if !(self.jitter_scale >= 0.0) || !self.general_weight.is_finite() {
            return bad("jitter_scale must be >= 0 and general_weight finite".into());
        }
        if let Some(p) = &self.preset {
            if !PRESETS.contains(&p.as_str()) {
                return Err(unknown_preset(p));
            }
        }
        Ok(())
    }

    /// Echo used in reports: everything except the output directory.
    pub fn echo(&self) -> ExperimentConfig {
        ExperimentConfig {
            output_dir: None,
            ..self.clone()
        }
    }

    /// SHA-256 of the echoed flag combination (the preset label excluded).
    pub fn fingerprint(&self) -> String {
        let canonical = ExperimentConfig {
            preset: None,
            ..self.echo()
        };
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn unknown_preset(name: &str) -> LodaError {
    LodaError::Config(format!("unknown preset {name:?}; valid presets: {}", PRESETS.join(", ")))
}

/// Overwrites the fields a preset controls.
pub fn apply_preset(cfg: &mut ExperimentConfig, name: &str) -> Result<()> {
    let (general, isolated, isolation, merge, optimizer, train_down) = match name {
        "baseline_single_lora" => (
            false,
            true,
            IsolationMethod::RandomOrthonormal,
            MergeMethod::Identity,
            OptimizerKind::Sgd,
            true,
        ),
        "general_only" => (
            true,
            false,
            IsolationMethod::LodaIsolated,
            MergeMethod::ClosedForm,
            OptimizerKind::Sgd,
            false,
        ),
        "isolated_only" => (
            false,
            true,
            IsolationMethod::LodaIsolated,
            MergeMethod::Identity,
            OptimizerKind::Sgd,
            false,
        ),
        "dual_no_gao" => (
            true,
            true,
            IsolationMethod::LodaIsolated,
            MergeMethod::ClosedForm,
            OptimizerKind::Sgd,
            false,
        ),
        "full_loda" => (
            true,
            true,
            IsolationMethod::LodaIsolated,
            MergeMethod::ClosedForm,
            OptimizerKind::Gao,
            false,
        ),
        other => return Err(unknown_preset(other)),
    };
    cfg.branches = Branches { general, isolated };
    cfg.isolation = isolation;
    cfg.merge = merge;
    cfg.train.optimizer = optimizer;
    cfg.train_down = train_down;
    cfg.preset = Some(name.to_string());
    Ok(())
}

pub fn ablation_preset(name: &str) -> Result<ExperimentConfig> {
    ExperimentConfig::default().with_preset(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    /// 1-based session index.
    pub task: usize,
    pub kind: String,
    pub rank: usize,
    pub projection_magnitude: f64,
    /// Absent on the first task, where no past statistics exist.
    pub relative_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub task: usize,
    pub unit: usize,
    pub e_new: f64,
    pub e_past: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub session: usize,
    pub task: usize,
    pub sample: usize,
    pub label: ClassId,
    pub predicted: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub task: usize,
    pub final_loss: Option<f64>,
    pub final_grad_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpPoint {
    pub alpha: f64,
    pub old_task_loss: f64,
    pub new_task_loss: f64,
    pub old_task_accuracy: f64,
    pub new_task_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub fingerprint: String,
    pub config: ExperimentConfig,
    /// `accuracy_matrix[t][i]`: accuracy (percent) on task `i` after session `t`.
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub correct_matrix: Vec<Vec<usize>>,
    pub total_matrix: Vec<Vec<usize>>,
    /// All-seen-classes accuracy after each session.
    pub session_accuracy: Vec<f64>,
    pub a_last: f64,
    pub a_avg: f64,
    pub diagnostics: Vec<DiagnosticRow>,
    pub gammas: Vec<GammaRow>,
    pub training: Vec<TrainSummary>,
    pub interpolation: Vec<InterpPoint>,
    #[serde(skip)]
    pub predictions: Vec<PredictionRow>,
    /// Written to a separate timing file so that reports stay reproducible.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    fn empty(cfg: &ExperimentConfig) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            fingerprint: cfg.fingerprint(),
            config: cfg.echo(),
            accuracy_matrix: Vec::new(),
            correct_matrix: Vec::new(),
            total_matrix: Vec::new(),
            session_accuracy: Vec::new(),
            a_last: f64::NAN,
            a_avg: f64::NAN,
            diagnostics: Vec::new(),
            gammas: Vec::new(),
            training: Vec::new(),
            interpolation: Vec::new(),
            predictions: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }
}

/// Frozen model after integration: extractor, merged weight, classifier.
pub struct FrozenModel<'a> {
    pub extractor: &'a FeatureExtractor,
    pub weight: ArrayView2<'a, f64>,
    pub classifier: &'a CosineClassifier,
}

impl FrozenModel<'_> {
    pub fn outputs(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        let x = self.extractor.extract(raw)?;
        Ok(x.dot(&self.weight.t()))
    }

    /// Arg-max over every registered class.
    pub fn predict(&self, raw: ArrayView2<f64>) -> Result<Vec<ClassId>> {
        let rows: Vec<usize> = (0..self.classifier.num_classes()).collect();
        self.classifier.predict(self.outputs(raw)?.view(), &rows)
    }
}

/// One session's evaluation over the seen tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionEval {
    pub accuracy: Vec<f64>,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
    pub all_seen: f64,
    /// Per task, per test sample.
    pub predictions: Vec<Vec<ClassId>>,
}

/// Scores `predict` on each test set; accuracies are percentages.
pub fn evaluate<F>(tests: &[&TaskDataset], mut predict: F) -> Result<SessionEval>
where
    F: FnMut(&TaskDataset) -> Result<Vec<ClassId>>,
{
    let mut out = SessionEval {
        accuracy: Vec::new(),
        correct: Vec::new(),
        total: Vec::new(),
        all_seen: f64::NAN,
        predictions: Vec::new(),
    };
    for t in tests {
        if t.test_labels.is_empty() {
            return Err(LodaError::InvalidArgument(format!("task {} has an empty test set", t.task)));
        }
        let pred = predict(t)?;
        if pred.len() != t.test_labels.len() {
            return Err(LodaError::DimensionMismatch {
                context: "predictions vs test labels",
                expected: t.test_labels.len(),
                found: pred.len(),
            });
        }
        let correct = pred.iter().zip(&t.test_labels).filter(|(p, l)| p == l).count();
        out.accuracy.push(100.0 * correct as f64 / pred.len() as f64);
        out.correct.push(correct);
        out.total.push(pred.len());
        out.predictions.push(pred);
    }
    let correct: usize = out.correct.iter().sum();
    let total: usize = out.total.iter().sum();
    if total == 0 {
        return Err(LodaError::InvalidArgument("nothing to evaluate".into()));
    }
    out.all_seen = 100.0 * correct as f64 / total as f64;
    Ok(out)
}

/// Loads or generates the task stream named by the config.
pub fn load_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskDataset>> {
    match &cfg.data_path {
        Some(path) => stream::ingest_csv(path),
        None => stream::generate(&StreamConfig {
            seed: cfg.seed,
            ..cfg.stream.clone()
        }),
    }
}

fn initial_weight(cfg: &ExperimentConfig) -> Array2<f64> {
    if cfg.out_dim == cfg.feature_dim {
        Array2::eye(cfg.feature_dim)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5745));
        let norm = 1.0 / (cfg.feature_dim as f64).sqrt();
        Array2::from_shape_simple_fn((cfg.out_dim, cfg.feature_dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * norm
        })
    }
}

fn build_extractor(cfg: &ExperimentConfig, raw_dim: usize) -> FeatureExtractor {
    FeatureExtractor::new(raw_dim, cfg.feature_dim, cfg.extractor_scale, derive_seed(cfg.seed, 0x4645))
}

/// Bases for every diagnostic kind at one task (`past` nonzero).
struct TaskBases {
    general: SubspaceBases,
    isolated: SubspaceBases,
    null: SubspaceBases,
}

fn task_bases(cfg: &ExperimentConfig, past: &SecondMoment, new: &SecondMoment) -> Result<TaskBases> {
    let jitter = cfg.jitter_scale * past.trace_energy() / past.dim() as f64;
    Ok(TaskBases {
        general: subspace::general_bases(past, new, cfg.rank)?,
        isolated: subspace::isolated_bases(past, new, cfg.rank, jitter)?,
        null: subspace::null_space_baseline(past, cfg.rank)?,
    })
}

fn diagnostics_for(
    task: usize,
    bases: &TaskBases,
    past: &SecondMoment,
    new: &SecondMoment,
) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    for b in [&bases.general, &bases.isolated, &bases.null] {
        // the isolated branch trains on the orthonormalized span
        let u = match b.kind {
            SubspaceKind::Isolated => crate::numerics::thin_qr_rows(b.basis.t())?.t().to_owned(),
            _ => b.basis.clone(),
        };
        rows.push(DiagnosticRow {
            task,
            kind: b.kind.as_str().to_string(),
            rank: b.rank(),
            projection_magnitude: subspace::projection_magnitude(new, u.view())?,
            relative_energy: Some(subspace::relative_energy(new, past, u.view())?),
        });
    }
    Ok(rows)
}

/// Energy-only pass: statistics and bases per task, no training.
pub fn diagnose(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<Vec<DiagnosticRow>> {
    cfg.validate()?;
    let Some(first) = tasks.first() else {
        return Ok(Vec::new());
    };
    let extractor = build_extractor(cfg, first.train.ncols());
    let mut store = SecondMomentStore::new(cfg.feature_dim, cfg.retention);
    let mut rows = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let session = t + 1;
        let x = extractor.extract(task.train.view()).map_err(|e| e.at_stage(session, "features"))?;
        let new = SecondMoment::from_features(x.view()).map_err(|e| e.at_stage(session, "statistics"))?;
        if t > 0 {
            let past = store.cumulative_past();
            let bases = task_bases(cfg, past, &new).map_err(|e| e.at_stage(session, "decomposition"))?;
            rows.extend(diagnostics_for(session, &bases, past, &new).map_err(|e| e.at_stage(session, "diagnostics"))?);
        }
        store.finish_task(new).map_err(|e| e.at_stage(session, "statistics"))?;
    }
    Ok(rows)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let tasks = load_tasks(cfg)?;
    run_on_tasks(cfg, &tasks)
}

pub fn run_on_tasks(cfg: &ExperimentConfig, tasks: &[TaskDataset]) -> Result<MetricsReport> {
    run_with_predictor(cfg, tasks, |model, task| model.predict(task.test.view()))
}

/// Runs the pipeline with a custom scoring function (used to plug in stubs).
pub fn run_with_predictor<P>(cfg: &ExperimentConfig, tasks: &[TaskDataset], mut predictor: P) -> Result<MetricsReport>
where
    P: FnMut(&FrozenModel, &TaskDataset) -> Result<Vec<ClassId>>,
{
    cfg.validate()?;
    let started = Instant::now();
    let mut report = MetricsReport::empty(cfg);
    let Some(first) = tasks.first() else {
        return Err(LodaError::Config("the task stream is empty".into()));
    };
    let raw_dim = first.train.ncols();
    let extractor = build_extractor(cfg, raw_dim);
    let mut weight = initial_weight(cfg);
    let mut clf = CosineClassifier::new(cfg.out_dim, cfg.temperature);
    let mut clf_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x434c));
    let mut store = SecondMomentStore::new(cfg.feature_dim, cfg.retention);

    for (t, task) in tasks.iter().enumerate() {
        let session = t + 1;
        let stage = |stage: &'static str| move |e: LodaError| e.at_stage(session, stage);

        let x = extractor.extract(task.train.view()).map_err(stage("features"))?;
        let new = SecondMoment::from_features(x.view()).map_err(stage("statistics"))?;
        let past = store.cumulative_past().clone();

        let bases = if t > 0 {
            let bases = task_bases(cfg, &past, &new).map_err(stage("decomposition"))?;
            report
                .diagnostics
                .extend(diagnostics_for(session, &bases, &past, &new).map_err(stage("diagnostics"))?);
            Some(bases)
        } else {
            None
        };

        let mut layer = DualLoRALayer::new(weight.clone(), cfg.rank, cfg.general_weight).map_err(stage("anchoring"))?;
        let general = if cfg.branches.general {
            Some(match &bases {
                Some(b) => b.general.clone(),
                None => subspace::general_bases(&past, &new, cfg.rank).map_err(stage("decomposition"))?,
            })
        } else {
            None
        };
        let isolated = match (cfg.branches.isolated, cfg.isolation, &bases) {
            (true, IsolationMethod::LodaIsolated, Some(b)) => Some(b.isolated.clone()),
            (true, IsolationMethod::NullBaseline, Some(b)) => Some(b.null.clone()),
            _ => None,
        };
        layer.anchor(general.as_ref(), isolated.as_ref()).map_err(stage("anchoring"))?;
        if cfg.branches.isolated && cfg.isolation == IsolationMethod::RandomOrthonormal {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5200 + t as u64));
            let down = Array2::from_shape_simple_fn((cfg.rank, cfg.feature_dim), || StandardNormal.sample(&mut rng));
            layer.set_isolated_down(down.view()).map_err(stage("anchoring"))?;
        }

        clf.add_classes(&task.classes, &mut clf_rng).map_err(stage("classifier"))?;
        let mask = clf.rows_for(&task.classes).map_err(stage("classifier"))?;
        let train_cfg = TrainConfig {
            seed: derive_seed(cfg.train.seed ^ cfg.seed, 0x5400 + t as u64),
            ..cfg.train.clone()
        };
        let log = trainer::train_task(
            &mut layer,
            &mut clf,
            x.view(),
            &task.train_labels,
            &mask,
            &train_cfg,
            cfg.train_down,
        )
        .map_err(stage("training"))?;
        report.training.push(TrainSummary {
            task: session,
            final_loss: log.final_loss(),
            final_grad_cosine: log.final_grad_cosine(),
        });

        if t == 1 && cfg.interp_steps >= 2 && layer.general.is_some() {
            report.interpolation = interpolate(cfg, &extractor, &layer, &clf, &tasks[0], task)
                .map_err(stage("interpolation"))?;
        }

        let rescale = match (cfg.merge, layer.general.as_ref()) {
            (MergeMethod::ClosedForm, Some(g)) => {
                recalib::rescale_factors(g.down.view(), &new, &past, cfg.lambda).map_err(stage("recalibration"))?
            }
            _ => RescaleResult::identity(cfg.rank),
        };
        for (j, (e, g)) in rescale.energies.iter().zip(&rescale.gammas).enumerate() {
            report.gammas.push(GammaRow {
                task: session,
                unit: j,
                e_new: e.e_new,
                e_past: e.e_past,
                gamma: *g,
            });
        }
        let candidate = recalib::integrate(&layer, &rescale);
        weight = match cfg.merge {
            MergeMethod::RunningAverage => recalib::naive_merge_running_average(weight.view(), candidate.view(), session)
                .map_err(stage("integration"))?,
            _ => candidate,
        };
        crate::numerics::ensure_finite(weight.view(), "integrated weight").map_err(stage("integration"))?;
        drop(layer);
        store.finish_task(new).map_err(stage("statistics"))?;

        let model = FrozenModel {
            extractor: &extractor,
            weight: weight.view(),
            classifier: &clf,
        };
        let seen: Vec<&TaskDataset> = tasks[..=t].iter().collect();
        let eval = evaluate(&seen, |d| predictor(&model, d)).map_err(stage("evaluation"))?;
        for (i, preds) in eval.predictions.iter().enumerate() {
            for (k, (&p, &l)) in preds.iter().zip(&tasks[i].test_labels).enumerate() {
                report.predictions.push(PredictionRow {
                    session,
                    task: i + 1,
                    sample: k,
                    label: l,
                    predicted: p,
                });
            }
        }
        report.accuracy_matrix.push(eval.accuracy);
        report.correct_matrix.push(eval.correct);
        report.total_matrix.push(eval.total);
        report.session_accuracy.push(eval.all_seen);
    }

    report.a_last = *report.session_accuracy.last().expect("at least one session");
    report.a_avg = report.session_accuracy.iter().sum::<f64>() / report.session_accuracy.len() as f64;
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Loss and accuracy of both tasks along `W + α·w_G·B_G·A_G`, `α ∈ [0, 1]`.
fn interpolate(
    cfg: &ExperimentConfig,
    extractor: &FeatureExtractor,
    layer: &DualLoRALayer,
    clf: &CosineClassifier,
    old: &TaskDataset,
    new: &TaskDataset,
) -> Result<Vec<InterpPoint>> {
    let general = layer.general.as_ref().expect("general branch");
    let direction = general.product() * layer.general_weight;
    let rows: Vec<usize> = (0..clf.num_classes()).collect();
    let score = |w: &Array2<f64>, d: &TaskDataset| -> Result<(f64, f64)> {
        let y = extractor.extract(d.test.view())?.dot(&w.t());
        let loss = clf.ce_loss_and_grads(y.view(), &d.test_labels, &rows)?.loss;
        let pred = clf.predict(y.view(), &rows)?;
        let correct = pred.iter().zip(&d.test_labels).filter(|(p, l)| p == l).count();
        Ok((loss, 100.0 * correct as f64 / pred.len().max(1) as f64))
    };
    (0..cfg.interp_steps)
        .map(|k| {
            let alpha = k as f64 / (cfg.interp_steps - 1) as f64;
            let w = &layer.base + &(&direction * alpha);
            let (old_task_loss, old_task_accuracy) = score(&w, old)?;
            let (new_task_loss, new_task_accuracy) = score(&w, new)?;
            Ok(InterpPoint {
                alpha,
                old_task_loss,
                new_task_loss,
                old_task_accuracy,
                new_task_accuracy,
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn accuracy_csv(report: &MetricsReport) -> String {
    let mut out = String::from("session,task,accuracy,correct,total\n");
    for (t, row) in report.accuracy_matrix.iter().enumerate() {
        for (i, acc) in row.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                t + 1,
                i + 1,
                acc,
                report.correct_matrix[t][i],
                report.total_matrix[t][i]
            );
        }
        let correct: usize = report.correct_matrix[t].iter().sum();
        let total: usize = report.total_matrix[t].iter().sum();
        let _ = writeln!(out, "{},all,{},{},{}", t + 1, report.session_accuracy[t], correct, total);
    }
    out
}

pub fn diagnostics_csv(rows: &[DiagnosticRow]) -> String {
    let mut out = String::from("task,kind,rank,projection_magnitude,relative_energy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.task,
            r.kind,
            r.rank,
            r.projection_magnitude,
            opt(r.relative_energy)
        );
    }
    out
}

pub fn gammas_csv(rows: &[GammaRow]) -> String {
    let mut out = String::from("task,unit,e_new,e_past,gamma\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.task, r.unit, r.e_new, r.e_past, r.gamma);
    }
    out
}

pub fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("session,task,sample,label,predicted\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.session, r.task, r.sample, r.label, r.predicted);
    }
    out
}

pub fn interpolation_csv(rows: &[InterpPoint]) -> String {
    let mut out = String::from("alpha,old_task_loss,new_task_loss,old_task_accuracy,new_task_accuracy\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.alpha, r.old_task_loss, r.new_task_loss, r.old_task_accuracy, r.new_task_accuracy
        );
    }
    out
}

pub const REPORT_FILES: [&str; 6] = [
    "report.json",
    "accuracy.csv",
    "diagnostics.csv",
    "gammas.csv",
    "predictions.csv",
    "interpolation.csv",
];

/// Writes the report files plus `timing.json` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LodaError::io(dir, e))?;
    let mut json = serde_json::to_string_pretty(report).expect("report serializes");
    json.push('\n');
    let contents = [
        json,
        accuracy_csv(report),
        diagnostics_csv(&report.diagnostics),
        gammas_csv(&report.gammas),
        predictions_csv(&report.predictions),
        interpolation_csv(&report.interpolation),
    ];
    for (name, body) in REPORT_FILES.iter().zip(contents) {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| LodaError::io(&path, e))?;
    }
    let path = dir.join("timing.json");
    let timing = format!("{{\"wall_clock_seconds\": {}}}\n", report.wall_clock_seconds);
    std::fs::write(&path, timing).map_err(|e| LodaError::io(&path, e))
}
