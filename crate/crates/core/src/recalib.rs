//! Closed-form recalibration of the general branch and weight integration.
//!
//! Each rank-1 unit `(column j of B_G, row j of A_G)` is rescaled by
//! `γ_j = λ e_new / (λ e_new + e_past)` with `e = a_j S a_jᵀ`, which is the
//! exact minimizer of the feature-level error
//! `λ ‖X^t (γB a)ᵀ − X^t (B a)ᵀ‖² + Σ_past ‖X^i (γB a)ᵀ‖²`.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::adapter::DualLoRALayer;
use crate::error::{LodaError, Result};
use crate::stats::SecondMoment;

/// Default balance between new-task fidelity and past-task drift.
pub const DEFAULT_LAMBDA: f64 = 3.0;

/// Units whose weighted energy falls at or below this are inert and get γ = 0.
pub const INERT_ENERGY: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitEnergy {
    pub e_new: f64,
    pub e_past: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleResult {
    pub gammas: Vec<f64>,
    pub lambda_used: f64,
    pub energies: Vec<UnitEnergy>,
}

impl RescaleResult {
    /// All-ones factors (plain merge).
    pub fn identity(rank: usize) -> Self {
        Self {
            gammas: vec![1.0; rank],
            lambda_used: f64::NAN,
            energies: Vec::new(),
        }
    }

    /// `Λ_G = diag(γ)`.
    pub fn lambda_matrix(&self) -> Array2<f64> {
        crate::numerics::diag(&self.gammas)
    }
}

pub fn gamma(e_new: f64, e_past: f64, lambda: f64) -> f64 {
    let denom = lambda * e_new + e_past;
    if denom <= INERT_ENERGY {
        0.0
    } else {
        lambda * e_new / denom
    }
}

pub fn rescale_factors(
    down_general: ArrayView2<f64>,
    new: &SecondMoment,
    past: &SecondMoment,
    lambda: f64,
) -> Result<RescaleResult> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(LodaError::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
    }
    if down_general.ncols() != new.dim() || past.dim() != new.dim() {
        return Err(LodaError::DimensionMismatch {
            context: "down-projection width vs statistics",
            expected: new.dim(),
            found: down_general.ncols(),
        });
    }
    let mut gammas = Vec::with_capacity(down_general.nrows());
    let mut energies = Vec::with_capacity(down_general.nrows());
    for a in down_general.rows() {
        let e_new = a.dot(&new.gram().dot(&a));
        let e_past = a.dot(&past.gram().dot(&a));
        gammas.push(gamma(e_new, e_past, lambda));
        energies.push(UnitEnergy { e_new, e_past });
    }
    Ok(RescaleResult {
        gammas,
        lambda_used: lambda,
        energies,
    })
}

/// Recalibration objective of one rank-1 unit at scale `γ`, through the
/// statistics: `λ e_new (γ−1)² ‖b‖² + e_past γ² ‖b‖²`.
pub fn objective_value(
    gamma: f64,
    a: ArrayView1<f64>,
    b_col: ArrayView1<f64>,
    new: &SecondMoment,
    past: &SecondMoment,
    lambda: f64,
) -> f64 {
    let e_new = a.dot(&new.gram().dot(&a));
    let e_past = a.dot(&past.gram().dot(&a));
    let b2 = b_col.dot(&b_col);
    lambda * e_new * (gamma - 1.0).powi(2) * b2 + e_past * gamma * gamma * b2
}

/// `W + w_G B_G Λ_G A_G + B_I A_I`.
pub fn integrate(layer: &DualLoRALayer, result: &RescaleResult) -> Array2<f64> {
    let lambda = layer.general.as_ref().map(|_| result.gammas.as_slice());
    &layer.base + &layer.effective_update(lambda)
}

/// `((t−1)·W_prev + W_candidate)/t`.
pub fn naive_merge_running_average(prev: ArrayView2<f64>, candidate: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
    if t < 1 {
        return Err(LodaError::InvalidArgument("running average needs t >= 1".into()));
    }
    if prev.dim() != candidate.dim() {
        return Err(LodaError::DimensionMismatch {
            context: "running-average operands",
            expected: prev.len(),
            found: candidate.len(),
        });
    }
    let t = t as f64;
    Ok((&prev * (t - 1.0) + &candidate) / t)
}

/// CSV rows `task,unit,e_new,e_past,gamma` for one task (header not included).
pub fn recalibration_rows(task: usize, result: &RescaleResult) -> String {
    let mut out = String::new();
    for (j, (e, g)) in result.energies.iter().zip(&result.gammas).enumerate() {
        let _ = writeln!(out, "{task},{j},{},{},{}", e.e_new, e.e_past, g);
    }
    out
}
