//! Desk-scale classification model around the adapted layer: a frozen
//! random-projection feature extractor in front, a cosine classifier behind.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LodaError, Result};

/// Default cosine-classifier temperature.
pub const DEFAULT_TEMPERATURE: f64 = 16.0;

/// Feature rows with norm at or below this produce all-zero logits.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub type ClassId = usize;

/// `X = relu(raw · Pᵀ) · scale` with a seeded Gaussian `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    projection: Array2<f64>,
    scale: f64,
}

impl FeatureExtractor {
    pub fn new(raw_dim: usize, feature_dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = 1.0 / (raw_dim as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((feature_dim, raw_dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * norm
        });
        Self { projection, scale }
    }

    pub fn from_projection(projection: Array2<f64>, scale: f64) -> Self {
        Self { projection, scale }
    }

    pub fn raw_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn extract(&self, raw: ArrayView2<f64>) -> Result<Array2<f64>> {
        if raw.ncols() != self.raw_dim() {
            return Err(LodaError::DimensionMismatch {
                context: "raw feature width",
                expected: self.raw_dim(),
                found: raw.ncols(),
            });
        }
        let scale = self.scale;
        Ok(raw.dot(&self.projection.t()).mapv(|v| v.max(0.0) * scale))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineClassifier {
    /// K×D' prototype rows.
    pub prototypes: Array2<f64>,
    pub temperature: f64,
    classes: Vec<ClassId>,
    index: BTreeMap<ClassId, usize>,
}

/// Mean cross-entropy over a batch and its gradients.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub loss: f64,
    /// N×D'.
    pub d_features: Array2<f64>,
    /// K×D'; rows outside the class mask are exactly zero.
    pub d_prototypes: Array2<f64>,
}

impl CosineClassifier {
    pub fn new(dim: usize, temperature: f64) -> Self {
        Self {
            prototypes: Array2::zeros((0, dim)),
            temperature,
            classes: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn row_of(&self, class: ClassId) -> Option<usize> {
        self.index.get(&class).copied()
    }

    /// Registers new classes with random unit prototypes drawn from `rng`.
    pub fn add_classes(&mut self, classes: &[ClassId], rng: &mut impl rand::Rng) -> Result<()> {
        let mut rows = Vec::with_capacity(classes.len());
        for &c in classes {
            if self.index.contains_key(&c) || rows.iter().any(|(id, _)| *id == c) {
                return Err(LodaError::InvalidArgument(format!("class {c} already registered")));
            }
            let mut v = Array1::from_shape_simple_fn(self.dim(), || {
                let z: f64 = StandardNormal.sample(rng);
                z
            });
            let n = v.dot(&v).sqrt();
            v /= n;
            rows.push((c, v));
        }
        for (c, v) in rows {
            self.index.insert(c, self.classes.len());
            self.classes.push(c);
            self.prototypes.push_row(v.view()).expect("prototype width");
        }
        Ok(())
    }

    /// Rows in `prototypes` belonging to `classes`.
    pub fn rows_for(&self, classes: &[ClassId]) -> Result<Vec<usize>> {
        classes
            .iter()
            .map(|c| {
                self.row_of(*c)
                    .ok_or_else(|| LodaError::InvalidArgument(format!("unknown class {c}")))
            })
            .collect()
    }

    /// `s · cos(y_n, c_k)` for every sample and prototype.
    pub fn logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.logits_with(self.prototypes.view(), features)
    }

    pub(crate) fn logits_with(&self, prototypes: ArrayView2<f64>, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(LodaError::DimensionMismatch {
                context: "classifier feature width",
                expected: self.dim(),
                found: features.ncols(),
            });
        }
        let y_hat = normalize_rows(features);
        let c_hat = normalize_rows(prototypes);
        Ok(y_hat.dot(&c_hat.t()) * self.temperature)
    }

    /// Arg-max over the given prototype rows; returns class ids.
    pub fn predict(&self, features: ArrayView2<f64>, rows: &[usize]) -> Result<Vec<ClassId>> {
        let logits = self.logits(features)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|l| {
                let mut best = rows[0];
                for &k in rows {
                    if l[k] > l[best] {
                        best = k;
                    }
                }
                self.classes[best]
            })
            .collect())
    }

    /// Softmax cross-entropy over the masked prototype rows, averaged over the batch.
    pub fn ce_loss_and_grads(&self, features: ArrayView2<f64>, labels: &[ClassId], mask: &[usize]) -> Result<LossGrads> {
        self.ce_with(self.prototypes.view(), features, labels, mask)
    }

    pub(crate) fn ce_with(
        &self,
        prototypes: ArrayView2<f64>,
        features: ArrayView2<f64>,
        labels: &[ClassId],
        mask: &[usize],
    ) -> Result<LossGrads> {
        let n = features.nrows();
        if labels.len() != n {
            return Err(LodaError::DimensionMismatch {
                context: "labels vs feature rows",
                expected: n,
                found: labels.len(),
            });
        }
        if n == 0 || mask.is_empty() {
            return Err(LodaError::InvalidArgument("empty batch or class mask".into()));
        }
        let targets: Vec<usize> = labels
            .iter()
            .map(|&c| match self.row_of(c) {
                Some(row) if mask.contains(&row) => Ok(row),
                _ => Err(LodaError::InvalidArgument(format!("label {c} is outside the class mask"))),
            })
            .collect::<Result<_>>()?;

        let s = self.temperature;
        let y_norms: Vec<f64> = features.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let c_norms: Vec<f64> = prototypes.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let y_hat = normalize_rows(features);
        let c_hat = normalize_rows(prototypes);
        let cos = y_hat.dot(&c_hat.t());

        let mut loss = 0.0;
        // dL/dlogit restricted to masked columns
        let mut d_logits = Array2::<f64>::zeros((n, prototypes.nrows()));
        for i in 0..n {
            let max = mask.iter().map(|&k| s * cos[[i, k]]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &k in mask {
                denom += (s * cos[[i, k]] - max).exp();
            }
            loss += max + denom.ln() - s * cos[[i, targets[i]]];
            for &k in mask {
                d_logits[[i, k]] = (s * cos[[i, k]] - max).exp() / denom / n as f64;
            }
            d_logits[[i, targets[i]]] -= 1.0 / n as f64;
        }
        loss /= n as f64;

        // logit = s·ŷ·ĉ ; ∂/∂y = s/‖y‖ (ĉ − (ŷ·ĉ) ŷ) ; ∂/∂c = s/‖c‖ (ŷ − (ŷ·ĉ) ĉ)
        let mut d_features = Array2::<f64>::zeros(features.dim());
        let mut d_prototypes = Array2::<f64>::zeros(prototypes.dim());
        for i in 0..n {
            if y_norms[i] <= DEGENERATE_NORM {
                continue;
            }
            for &k in mask {
                let w = d_logits[[i, k]] * s;
                if w == 0.0 || c_norms[k] <= DEGENERATE_NORM {
                    continue;
                }
                let c = cos[[i, k]];
                let yi = y_hat.row(i);
                let ck = c_hat.row(k);
                let mut dy = d_features.row_mut(i);
                dy.scaled_add(w / y_norms[i], &ck);
                dy.scaled_add(-w * c / y_norms[i], &yi);
                let mut dc = d_prototypes.row_mut(k);
                dc.scaled_add(w / c_norms[k], &yi);
                dc.scaled_add(-w * c / c_norms[k], &ck);
            }
        }
        Ok(LossGrads {
            loss,
            d_features,
            d_prototypes,
        })
    }
}

/// Rows scaled to unit norm; rows at or below [`DEGENERATE_NORM`] become zero.
pub fn normalize_rows(m: ArrayView2<f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n <= DEGENERATE_NORM {
            row.fill(0.0);
        } else {
            row /= n;
        }
    }
    out
}
