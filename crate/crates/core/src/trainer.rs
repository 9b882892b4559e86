//! Per-task optimization of the up-projections and classifier prototypes.
//!
//! Gradient-aligned optimization (GAO) splits every batch into two
//! label-disjoint halves. Each half takes its descent step at a point
//! perturbed along the other half's normalized gradient, first `B1` under
//! `B2`'s perturbation and then `B2` under `B1`'s.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::DualLoRALayer;
use crate::error::{LodaError, Result};
use crate::model::{ClassId, CosineClassifier};

/// Gradients with squared norm at or below this skip the GAO perturbation.
pub const PERTURBATION_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    CosineAnnealing,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gao,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub rho_max: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    /// Draw a fresh ρ for the second GAO phase instead of sharing one per step.
    pub resample_rho: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.2,
            epochs: 10,
            batch_size: 48,
            rho_max: 0.3,
            seed: 0,
            schedule: Schedule::CosineAnnealing,
            optimizer: OptimizerKind::Gao,
            resample_rho: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(LodaError::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.rho_max >= 0.0) || !self.rho_max.is_finite() {
            return Err(LodaError::Config(format!("rho_max must be >= 0, got {}", self.rho_max)));
        }
        if self.batch_size == 0 || (self.optimizer == OptimizerKind::Gao && self.batch_size < 2) {
            return Err(LodaError::Config("batch_size must be >= 2 for GAO (>= 1 otherwise)".into()));
        }
        Ok(())
    }

    /// Learning rate at schedule tick `step` of `total`.
    pub fn eta_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.eta,
            Schedule::CosineAnnealing => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * self.eta * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// A batch split into two label-disjoint subsets, as indices into the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    /// The batch held a single class; `second` is empty.
    pub degenerate: bool,
}

/// Partitions the batch's classes by a seeded shuffle into halves of sizes
/// `⌈K/2⌉` and `⌊K/2⌋`, routing samples by label.
pub fn split_label_disjoint(labels: &[ClassId], rng: &mut impl Rng) -> Result<Split> {
    if labels.is_empty() {
        return Err(LodaError::InvalidArgument("cannot split an empty batch".into()));
    }
    let mut classes: Vec<ClassId> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    classes.shuffle(rng);
    let cut = classes.len().div_ceil(2);
    let first_classes = &classes[..cut];
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (i, c) in labels.iter().enumerate() {
        if first_classes.contains(c) {
            first.push(i);
        } else {
            second.push(i);
        }
    }
    let degenerate = second.is_empty();
    Ok(Split {
        first,
        second,
        degenerate,
    })
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = (norm_sq(a) * norm_sq(b)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / denom
}

fn check_grad(g: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
        return Err(LodaError::NonFinite(format!(
            "{what}: entry {pos} of {} is {}, squared norm {}",
            g.len(),
            g[pos],
            norm_sq(g)
        )));
    }
    Ok(())
}

/// `θ − η·g`.
pub fn sgd_step(theta: &[f64], grad: &[f64], eta: f64) -> Vec<f64> {
    theta.iter().zip(grad).map(|(t, g)| t - eta * g).collect()
}

fn perturbed(theta: &[f64], grad: &[f64], rho: f64) -> Vec<f64> {
    let n2 = norm_sq(grad);
    if rho == 0.0 || n2 <= PERTURBATION_GUARD {
        return theta.to_vec();
    }
    let scale = rho / n2;
    theta.iter().zip(grad).map(|(t, g)| t - scale * g).collect()
}

/// One GAO step. `rho` is used for the first phase and `rho_second` for the
/// second; pass the same value to share it.
pub fn gao_step_with<B: ?Sized, F>(
    theta: &[f64],
    first: &B,
    second: &B,
    eta: f64,
    rho: f64,
    rho_second: f64,
    mut grad_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &B) -> Result<Vec<f64>>,
{
    let g2 = grad_fn(theta, second)?;
    check_grad(&g2, "GAO phase 1 perturbation gradient")?;
    let probe = perturbed(theta, &g2, rho);
    let g1 = grad_fn(&probe, first)?;
    check_grad(&g1, "GAO phase 1 descent gradient")?;
    let plus = sgd_step(theta, &g1, eta);

    let h1 = grad_fn(&plus, first)?;
    check_grad(&h1, "GAO phase 2 perturbation gradient")?;
    let probe = perturbed(&plus, &h1, rho_second);
    let h2 = grad_fn(&probe, second)?;
    check_grad(&h2, "GAO phase 2 descent gradient")?;
    Ok(sgd_step(&plus, &h2, eta))
}

/// One GAO step with a single shared `rho`.
pub fn gao_step<B: ?Sized, F>(theta: &[f64], first: &B, second: &B, eta: f64, rho: f64, grad_fn: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64], &B) -> Result<Vec<f64>>,
{
    gao_step_with(theta, first, second, eta, rho, rho, grad_fn)
}

/// All trainable tensors of one task, flattened in the order
/// `B_G, B_I, A_I (if trainable), prototypes`, each row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub up_general: Option<Array2<f64>>,
    pub up_isolated: Option<Array2<f64>>,
    pub down_isolated: Option<Array2<f64>>,
    pub prototypes: Array2<f64>,
}

impl ParamSet {
    pub fn from_model(layer: &DualLoRALayer, clf: &CosineClassifier, train_down: bool) -> Self {
        Self {
            up_general: layer.general.as_ref().map(|b| b.up.clone()),
            up_isolated: layer.isolated.as_ref().map(|b| b.up.clone()),
            down_isolated: if train_down {
                layer.isolated.as_ref().map(|b| b.down.clone())
            } else {
                None
            },
            prototypes: clf.prototypes.clone(),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.up_general
            .iter()
            .chain(self.up_isolated.iter())
            .chain(self.down_isolated.iter())
            .chain(std::iter::once(&self.prototypes))
    }

    pub fn len(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for t in self.tensors() {
            out.extend(t.iter().copied());
        }
        out
    }

    /// Rebuilds a parameter set with this one's layout.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.len() {
            return Err(LodaError::DimensionMismatch {
                context: "flattened parameter length",
                expected: self.len(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        let mut take = |t: &Array2<f64>| {
            let n = t.len();
            let m = Array2::from_shape_vec(t.dim(), flat[offset..offset + n].to_vec()).expect("layout");
            offset += n;
            m
        };
        let up_general = self.up_general.as_ref().map(&mut take);
        let up_isolated = self.up_isolated.as_ref().map(&mut take);
        let down_isolated = self.down_isolated.as_ref().map(&mut take);
        let prototypes = take(&self.prototypes);
        Ok(ParamSet {
            up_general,
            up_isolated,
            down_isolated,
            prototypes,
        })
    }

    pub fn apply_to(&self, layer: &mut DualLoRALayer, clf: &mut CosineClassifier) {
        if let (Some(b), Some(up)) = (layer.general.as_mut(), &self.up_general) {
            b.up.assign(up);
        }
        if let (Some(b), Some(up)) = (layer.isolated.as_mut(), &self.up_isolated) {
            b.up.assign(up);
        }
        if let (Some(b), Some(down)) = (layer.isolated.as_mut(), &self.down_isolated) {
            b.down.assign(down);
        }
        clf.prototypes.assign(&self.prototypes);
    }
}

/// Masked cross-entropy of the adapted model as a function of a flat `θ`.
pub struct TaskObjective<'a> {
    layer: &'a DualLoRALayer,
    clf: &'a CosineClassifier,
    features: ArrayView2<'a, f64>,
    labels: &'a [ClassId],
    mask: &'a [usize],
    template: ParamSet,
}

impl<'a> TaskObjective<'a> {
    pub fn new(
        layer: &'a DualLoRALayer,
        clf: &'a CosineClassifier,
        features: ArrayView2<'a, f64>,
        labels: &'a [ClassId],
        mask: &'a [usize],
        train_down: bool,
    ) -> Self {
        Self {
            template: ParamSet::from_model(layer, clf, train_down),
            layer,
            clf,
            features,
            labels,
            mask,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.template
    }

    /// Mean loss over the samples `rows` and its gradient in flat layout.
    pub fn loss_and_grad(&self, theta: &[f64], rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        let params = self.template.unflatten(theta)?;
        let mut layer = self.layer.clone();
        if let (Some(b), Some(up)) = (layer.general.as_mut(), &params.up_general) {
            b.up.assign(up);
        }
        if let (Some(b), Some(up)) = (layer.isolated.as_mut(), &params.up_isolated) {
            b.up.assign(up);
        }
        if let (Some(b), Some(down)) = (layer.isolated.as_mut(), &params.down_isolated) {
            b.down.assign(down);
        }
        let x = self.features.select(Axis(0), rows);
        let labels: Vec<ClassId> = rows.iter().map(|&i| self.labels[i]).collect();
        let y = layer.forward(x.view())?;
        let out = self.clf.ce_with(params.prototypes.view(), y.view(), &labels, self.mask)?;
        let up = layer.grad_up(x.view(), out.d_features.view())?;
        let mut grad = Vec::with_capacity(theta.len());
        if params.up_general.is_some() {
            grad.extend(up.general.expect("general branch").iter().copied());
        }
        if params.up_isolated.is_some() {
            grad.extend(up.isolated.expect("isolated branch").iter().copied());
        }
        if params.down_isolated.is_some() {
            let g = layer
                .grad_isolated_down(x.view(), out.d_features.view())?
                .expect("isolated branch");
            grad.extend(g.iter().copied());
        }
        grad.extend(out.d_prototypes.iter().copied());
        Ok((out.loss, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    /// Cosine between the two subset gradients at the pre-step parameters;
    /// `None` for single-class batches.
    pub grad_cosine: Option<f64>,
    pub eta: f64,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_grad_cosine: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainLog {
    /// Mean inter-subset gradient cosine of the last epoch.
    pub fn final_grad_cosine(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_grad_cosine)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// One line per step: `epoch step loss grad_cosine eta rho`.
    pub fn to_lines(&self) -> String {
        let mut out = String::from("epoch step loss grad_cosine eta rho\n");
        for r in &self.steps {
            let cos = r.grad_cosine.map_or_else(|| "nan".to_string(), |c| c.to_string());
            let _ = writeln!(out, "{} {} {} {} {} {}", r.epoch, r.step, r.loss, cos, r.eta, r.rho);
        }
        out
    }
}

/// Trains the up-projections (and, if `train_down`, the isolated
/// down-projection) together with the classifier prototypes on one task.
/// The loss is restricted to the prototype rows in `mask`.
pub fn train_task(
    layer: &mut DualLoRALayer,
    clf: &mut CosineClassifier,
    features: ArrayView2<f64>,
    labels: &[ClassId],
    mask: &[usize],
    cfg: &TrainConfig,
    train_down: bool,
) -> Result<TrainLog> {
    cfg.validate()?;
    if features.nrows() != labels.len() {
        return Err(LodaError::DimensionMismatch {
            context: "training labels vs features",
            expected: features.nrows(),
            found: labels.len(),
        });
    }
    let mut log = TrainLog::default();
    let n = features.nrows();
    if cfg.epochs == 0 || n == 0 {
        return Ok(log);
    }

    let objective = TaskObjective::new(layer, clf, features, labels, mask, train_down);
    let template = objective.params().clone();
    let mut theta = template.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut cos_sum = 0.0;
        let mut cos_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let eta = cfg.eta_at(step, total_steps);
            let batch_labels: Vec<ClassId> = chunk.iter().map(|&i| labels[i]).collect();
            let split = split_label_disjoint(&batch_labels, &mut rng)?;
            let first: Vec<usize> = split.first.iter().map(|&i| chunk[i]).collect();
            let second: Vec<usize> = split.second.iter().map(|&i| chunk[i]).collect();

            let (loss1, g1) = objective.loss_and_grad(&theta, &first)?;
            check_grad(&g1, "subset gradient")?;
            let mut rho = 0.0;
            let (loss, cos) = if split.degenerate {
                theta = sgd_step(&theta, &g1, eta);
                (loss1, None)
            } else {
                let (loss2, g2) = objective.loss_and_grad(&theta, &second)?;
                check_grad(&g2, "subset gradient")?;
                let (n1, n2) = (first.len() as f64, second.len() as f64);
                let loss = (n1 * loss1 + n2 * loss2) / (n1 + n2);
                let cos = cosine(&g1, &g2);
                match cfg.optimizer {
                    OptimizerKind::Sgd => {
                        let full: Vec<f64> = g1
                            .iter()
                            .zip(&g2)
                            .map(|(a, b)| (n1 * a + n2 * b) / (n1 + n2))
                            .collect();
                        theta = sgd_step(&theta, &full, eta);
                    }
                    OptimizerKind::Gao => {
                        rho = cfg.rho_max * rng.random::<f64>();
                        let rho_second = if cfg.resample_rho {
                            cfg.rho_max * rng.random::<f64>()
                        } else {
                            rho
                        };
                        theta = gao_step_with(&theta, &first[..], &second[..], eta, rho, rho_second, |t, rows| {
                            objective.loss_and_grad(t, rows).map(|(_, g)| g)
                        })?;
                    }
                }
                (loss, Some(cos))
            };
            loss_sum += loss;
            if let Some(c) = cos {
                cos_sum += c;
                cos_count += 1;
            }
            log.steps.push(StepRecord {
                epoch,
                step,
                loss,
                grad_cosine: cos,
                eta,
                rho,
            });
            step += 1;
        }
        log.epochs.push(EpochSummary {
            epoch,
            mean_loss: loss_sum / batches_per_epoch as f64,
            mean_grad_cosine: if cos_count > 0 { cos_sum / cos_count as f64 } else { f64::NAN },
        });
    }

    let trained = template.unflatten(&theta)?;
    trained.apply_to(layer, clf);
    Ok(log)
}
