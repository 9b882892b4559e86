//! Task-driven decomposition of the low-rank update space.
//!
//! * general bases maximize the joint projection energy of old and new
//!   features, i.e. the top eigenvectors of `S_past + S_new`;
//! * isolated bases maximize the new-to-old energy ratio, solved as a
//!   generalized eigenproblem by Cholesky whitening of `S_past`;
//! * the null-space baseline takes the directions least activated by past
//!   features, ignoring the new task entirely.
//!
//! Energies are evaluated from the stored statistics through
//! `‖X U‖_F² = tr(Uᵀ S U)`, so no raw features need to be retained.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{LodaError, Result};
use crate::numerics::{
    cholesky_lower, frobenius, quadratic_trace, solve_lower, solve_lower_transpose, sym_eig_full,
    sym_eig_topr, symmetrized,
};
use crate::stats::SecondMoment;

/// Relative jitter added to the diagonal of `S_past` before Cholesky,
/// as a multiple of `tr(S_past)/D`.
pub const DEFAULT_JITTER_SCALE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceKind {
    General,
    Isolated,
    NullBaseline,
}

impl SubspaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SubspaceKind::General => "general",
            SubspaceKind::Isolated => "isolated",
            SubspaceKind::NullBaseline => "null_baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBases {
    /// D×r direction matrix. Orthonormal columns except for the isolated kind,
    /// whose columns are `S_past`-orthogonal.
    pub basis: Array2<f64>,
    pub kind: SubspaceKind,
    /// Descending.
    pub spectrum: Vec<f64>,
    pub jitter_used: f64,
}

impl SubspaceBases {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }
}

fn check_pair(past: &SecondMoment, new: &SecondMoment, rank: usize) -> Result<usize> {
    let d = past.dim();
    if new.dim() != d {
        return Err(LodaError::DimensionMismatch {
            context: "past/new statistics",
            expected: d,
            found: new.dim(),
        });
    }
    check_rank(d, rank)?;
    Ok(d)
}

fn check_rank(d: usize, rank: usize) -> Result<()> {
    if rank == 0 {
        return Err(LodaError::InvalidArgument("rank must be at least 1".into()));
    }
    if rank > d {
        return Err(LodaError::RankTooLarge { rank, dim: d });
    }
    Ok(())
}

/// `tr(S_past)/D · DEFAULT_JITTER_SCALE`.
pub fn default_jitter(past: &SecondMoment) -> f64 {
    DEFAULT_JITTER_SCALE * past.trace_energy() / past.dim() as f64
}

pub fn general_bases(past: &SecondMoment, new: &SecondMoment, rank: usize) -> Result<SubspaceBases> {
    check_pair(past, new, rank)?;
    let joint = &past.gram() + &new.gram();
    let eig = sym_eig_topr(joint.view(), rank)?;
    Ok(SubspaceBases {
        basis: eig.vectors,
        kind: SubspaceKind::General,
        spectrum: eig.values,
        jitter_used: 0.0,
    })
}

/// Maximizes `tr(Uᵀ S_new U) / tr(Uᵀ S_past U)`.
///
/// With `S_past + jitter·I = L Lᵀ` and `S̃ = L⁻¹ S_new L⁻ᵀ`, returns
/// `U_I = L⁻ᵀ Ũ` where `Ũ` are the top eigenvectors of `S̃`. The spectrum
/// holds the generalized eigenvalues.
pub fn isolated_bases(
    past: &SecondMoment,
    new: &SecondMoment,
    rank: usize,
    jitter: f64,
) -> Result<SubspaceBases> {
    let d = check_pair(past, new, rank)?;
    if !(jitter >= 0.0) || !jitter.is_finite() {
        return Err(LodaError::InvalidArgument(format!("jitter must be >= 0, got {jitter}")));
    }
    let regularized = &past.gram() + &(Array2::<f64>::eye(d) * jitter);
    let l = cholesky_lower(regularized.view()).map_err(|e| LodaError::JitterTooSmall {
        jitter,
        source: Box::new(e),
    })?;
    // S̃ = L⁻¹ S_new L⁻ᵀ = (L⁻¹ (L⁻¹ S_new)ᵀ)ᵀ, using symmetry of S_new
    let left = solve_lower(l.view(), new.gram())?;
    let whitened = solve_lower(l.view(), left.t())?;
    let whitened = symmetrized(((&whitened + &whitened.t()) * 0.5).view())?;
    let eig = sym_eig_topr(whitened.view(), rank)?;
    let basis = solve_lower_transpose(l.view(), eig.vectors.view())?;
    Ok(SubspaceBases {
        basis,
        kind: SubspaceKind::Isolated,
        spectrum: eig.values,
        jitter_used: jitter,
    })
}

/// Bottom-`r` eigenvectors of `S_past`. Columns are ordered so that the
/// spectrum stays descending (the smallest eigenvalue comes last).
pub fn null_space_baseline(past: &SecondMoment, rank: usize) -> Result<SubspaceBases> {
    let d = past.dim();
    check_rank(d, rank)?;
    let eig = sym_eig_full(past.gram())?;
    Ok(SubspaceBases {
        basis: eig.vectors.slice(s![.., d - rank..]).to_owned(),
        kind: SubspaceKind::NullBaseline,
        spectrum: eig.values[d - rank..].to_vec(),
        jitter_used: 0.0,
    })
}

fn check_basis(stat: &SecondMoment, u: ArrayView2<f64>) -> Result<()> {
    if u.nrows() != stat.dim() {
        return Err(LodaError::DimensionMismatch {
            context: "basis rows vs statistic dimension",
            expected: stat.dim(),
            found: u.nrows(),
        });
    }
    Ok(())
}

/// `tr(Uᵀ S U) = ‖X U‖_F²`.
pub fn projection_energy(stat: &SecondMoment, u: ArrayView2<f64>) -> Result<f64> {
    check_basis(stat, u)?;
    Ok(quadratic_trace(stat.gram(), u))
}

/// `(tr(UᵀS_new U)/tr(S_new)) / (tr(UᵀS_past U)/tr(S_past))`.
pub fn relative_energy(new: &SecondMoment, past: &SecondMoment, u: ArrayView2<f64>) -> Result<f64> {
    let new_total = new.trace_energy();
    let past_total = past.trace_energy();
    if !(new_total > 0.0) {
        return Err(LodaError::UndefinedRelativeEnergy("new-task statistic has zero energy"));
    }
    if !(past_total > 0.0) {
        return Err(LodaError::UndefinedRelativeEnergy("past statistic has zero energy"));
    }
    let past_proj = projection_energy(past, u)?;
    if !(past_proj > 0.0) {
        return Err(LodaError::UndefinedRelativeEnergy("basis carries no past energy"));
    }
    let new_proj = projection_energy(new, u)?;
    Ok((new_proj / new_total) / (past_proj / past_total))
}

/// `sqrt(tr(UᵀS_new U) / tr(S_new))`.
pub fn projection_magnitude(new: &SecondMoment, u: ArrayView2<f64>) -> Result<f64> {
    let total = new.trace_energy();
    if !(total > 0.0) {
        return Err(LodaError::UndefinedRelativeEnergy("new-task statistic has zero energy"));
    }
    Ok((projection_energy(new, u)?.max(0.0) / total).sqrt())
}

/// Per-column residual `‖S_new u_j − λ_j (S_past + jitter·I) u_j‖`.
pub fn generalized_residuals(past: &SecondMoment, new: &SecondMoment, bases: &SubspaceBases) -> Vec<f64> {
    let d = past.dim();
    let regularized = &past.gram() + &(Array2::<f64>::eye(d) * bases.jitter_used);
    bases
        .spectrum
        .iter()
        .enumerate()
        .map(|(j, &lambda)| {
            let u = bases.basis.column(j);
            let r = new.gram().dot(&u) - regularized.dot(&u) * lambda;
            r.dot(&r).sqrt()
        })
        .collect()
}

/// Residual tolerance for [`generalized_residuals`].
pub fn generalized_residual_tol(new: &SecondMoment) -> f64 {
    1e-7 * (frobenius(new.gram()) + 1.0)
}
