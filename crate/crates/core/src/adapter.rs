//! Dual-branch low-rank adapter around a frozen linear weight.
//!
//! `Y = X (W + w_G·B_G A_G + B_I A_I)ᵀ`. Down-projections `A` are anchored
//! on subspace bases and frozen; only the up-projections `B` train.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{LodaError, Result};
use crate::numerics::{ensure_finite, thin_qr_rows};
use crate::subspace::{SubspaceBases, SubspaceKind};

/// Default weight of the general branch in the forward mix.
pub const DEFAULT_GENERAL_WEIGHT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct LoRABranch {
    /// r×D down-projection.
    pub down: Array2<f64>,
    /// D'×r up-projection.
    pub up: Array2<f64>,
}

impl LoRABranch {
    /// Branch with the given down-projection and a zero up-projection.
    pub fn zero_up(down: Array2<f64>, out_dim: usize) -> Self {
        let r = down.nrows();
        Self {
            down,
            up: Array2::zeros((out_dim, r)),
        }
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    /// `B·A`.
    pub fn product(&self) -> Array2<f64> {
        self.up.dot(&self.down)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualLoRALayer {
    /// D'×D frozen backbone weight.
    pub base: Array2<f64>,
    pub general: Option<LoRABranch>,
    pub isolated: Option<LoRABranch>,
    pub general_weight: f64,
    rank: usize,
}

/// Gradients of the loss with respect to each up-projection.
#[derive(Debug, Clone, PartialEq)]
pub struct UpGradients {
    pub general: Option<Array2<f64>>,
    pub isolated: Option<Array2<f64>>,
}

impl DualLoRALayer {
    pub fn new(base: Array2<f64>, rank: usize, general_weight: f64) -> Result<Self> {
        ensure_finite(base.view(), "backbone weight")?;
        if rank == 0 || rank > base.ncols() {
            return Err(LodaError::RankTooLarge {
                rank,
                dim: base.ncols(),
            });
        }
        Ok(Self {
            base,
            general: None,
            isolated: None,
            general_weight,
            rank,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.base.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.base.nrows()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Sets `A_G = U_Gᵀ` and `A_I = QR(U_Iᵀ)`, resetting both `B` to zero.
    /// Passing `None` disables that branch.
    pub fn anchor(&mut self, general: Option<&SubspaceBases>, isolated: Option<&SubspaceBases>) -> Result<()> {
        let general = match general {
            Some(bases) => {
                self.check_bases(bases)?;
                if bases.kind == SubspaceKind::Isolated {
                    return Err(LodaError::InvalidArgument(
                        "general branch needs orthonormal (general or null) bases".into(),
                    ));
                }
                Some(LoRABranch::zero_up(bases.basis.t().to_owned(), self.out_dim()))
            }
            None => None,
        };
        let isolated = match isolated {
            Some(bases) => {
                self.check_bases(bases)?;
                let down = thin_qr_rows(bases.basis.t())?;
                Some(LoRABranch::zero_up(down, self.out_dim()))
            }
            None => None,
        };
        self.general = general;
        self.isolated = isolated;
        Ok(())
    }

    /// Installs a branch with an explicit down-projection (used for randomly
    /// initialized baselines). Rows are orthonormalized.
    pub fn set_isolated_down(&mut self, down: ArrayView2<f64>) -> Result<()> {
        if down.nrows() != self.rank || down.ncols() != self.in_dim() {
            return Err(LodaError::DimensionMismatch {
                context: "isolated down-projection",
                expected: self.rank,
                found: down.nrows(),
            });
        }
        self.isolated = Some(LoRABranch::zero_up(thin_qr_rows(down)?, self.out_dim()));
        Ok(())
    }

    fn check_bases(&self, bases: &SubspaceBases) -> Result<()> {
        if bases.dim() != self.in_dim() {
            return Err(LodaError::DimensionMismatch {
                context: "subspace dimension vs layer input",
                expected: self.in_dim(),
                found: bases.dim(),
            });
        }
        if bases.rank() != self.rank {
            return Err(LodaError::DimensionMismatch {
                context: "subspace rank vs branch rank",
                expected: self.rank,
                found: bases.rank(),
            });
        }
        Ok(())
    }

    pub fn clear_branches(&mut self) {
        self.general = None;
        self.isolated = None;
    }

    /// `W + w_G·B_G A_G + B_I A_I`.
    pub fn effective_weight(&self) -> Array2<f64> {
        &self.base + &self.effective_update(None)
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(LodaError::DimensionMismatch {
                context: "layer input width",
                expected: self.in_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut y = x.dot(&self.base.t());
        if let Some(g) = &self.general {
            let z = x.dot(&g.down.t());
            y.scaled_add(self.general_weight, &z.dot(&g.up.t()));
        }
        if let Some(i) = &self.isolated {
            let z = x.dot(&i.down.t());
            y += &z.dot(&i.up.t());
        }
        Ok(y)
    }

    /// `∂L/∂B_G = w_G·Gᵀ(X A_Gᵀ)`, `∂L/∂B_I = Gᵀ(X A_Iᵀ)` for upstream `G = ∂L/∂Y`.
    pub fn grad_up(&self, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<UpGradients> {
        self.check_input(x)?;
        if upstream.nrows() != x.nrows() || upstream.ncols() != self.out_dim() {
            return Err(LodaError::DimensionMismatch {
                context: "upstream gradient shape",
                expected: self.out_dim(),
                found: upstream.ncols(),
            });
        }
        let general = self
            .general
            .as_ref()
            .map(|g| upstream.t().dot(&x.dot(&g.down.t())) * self.general_weight);
        let isolated = self.isolated.as_ref().map(|i| upstream.t().dot(&x.dot(&i.down.t())));
        Ok(UpGradients { general, isolated })
    }

    /// `∂L/∂A_I = B_Iᵀ Gᵀ X`. Only meaningful for baselines that train the
    /// down-projection.
    pub fn grad_isolated_down(&self, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Option<Array2<f64>>> {
        self.check_input(x)?;
        Ok(self
            .isolated
            .as_ref()
            .map(|i| i.up.t().dot(&upstream.t()).dot(&x)))
    }

    /// `w_G·B_G Λ_G A_G + B_I A_I`; `None` means `Λ_G = I`.
    pub fn effective_update(&self, lambda_g: Option<&[f64]>) -> Array2<f64> {
        let mut delta = Array2::zeros(self.base.dim());
        if let Some(g) = &self.general {
            let up = match lambda_g {
                Some(scale) => crate::numerics::scale_columns(g.up.view(), scale),
                None => g.up.clone(),
            };
            delta.scaled_add(self.general_weight, &up.dot(&g.down));
        }
        if let Some(i) = &self.isolated {
            delta += &i.product();
        }
        delta
    }

    /// Order-sensitive digest of the frozen tensors (`W`, `A_G`, `A_I`).
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for v in self.base.iter() {
            h.write(v.to_bits());
        }
        for branch in [&self.general, &self.isolated].into_iter().flatten() {
            for v in branch.down.iter() {
                h.write(v.to_bits());
            }
        }
        h.0
    }

    /// Textual matrix bundle:
    ///
    /// ```text
    /// loda-layer v1
    /// rank <r>
    /// general_weight <w_G>
    /// matrix <name> <rows> <cols>
    /// <row-major values, one row per line, space separated>
    /// ...
    /// ```
    ///
    /// Matrices appear in the order `W, A_G, B_G, A_I, B_I`; disabled
    /// branches are omitted.
    pub fn to_bundle(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "loda-layer v1");
        let _ = writeln!(out, "rank {}", self.rank);
        let _ = writeln!(out, "general_weight {}", self.general_weight);
        write_matrix(&mut out, "W", self.base.view());
        if let Some(g) = &self.general {
            write_matrix(&mut out, "A_G", g.down.view());
            write_matrix(&mut out, "B_G", g.up.view());
        }
        if let Some(i) = &self.isolated {
            write_matrix(&mut out, "A_I", i.down.view());
            write_matrix(&mut out, "B_I", i.up.view());
        }
        out
    }

    pub fn from_bundle(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some("loda-layer v1") {
            return Err("missing header".into());
        }
        let rank = parse_kv(lines.next(), "rank")?
            .parse::<usize>()
            .map_err(|e| e.to_string())?;
        let general_weight = parse_kv(lines.next(), "general_weight")?
            .parse::<f64>()
            .map_err(|e| e.to_string())?;
        let mut matrices = std::collections::BTreeMap::new();
        while let Some(line) = lines.next() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "matrix" {
                return Err(format!("bad matrix header: {line}"));
            }
            let rows: usize = parts[2].parse().map_err(|_| "bad row count")?;
            let cols: usize = parts[3].parse().map_err(|_| "bad col count")?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row = lines.next().ok_or("truncated matrix")?;
                for tok in row.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|e| e.to_string())?);
                }
            }
            let m = Array2::from_shape_vec((rows, cols), data).map_err(|e| e.to_string())?;
            matrices.insert(parts[1].to_string(), m);
        }
        let base = matrices.remove("W").ok_or("missing W")?;
        let mut branch = |a: &str, b: &str| -> std::result::Result<Option<LoRABranch>, String> {
            match (matrices.remove(a), matrices.remove(b)) {
                (Some(down), Some(up)) => Ok(Some(LoRABranch { down, up })),
                (None, None) => Ok(None),
                _ => Err(format!("incomplete branch {a}/{b}")),
            }
        };
        let general = branch("A_G", "B_G")?;
        let isolated = branch("A_I", "B_I")?;
        Ok(Self {
            base,
            general,
            isolated,
            general_weight,
            rank,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bundle()).map_err(|e| LodaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LodaError::io(path, e))?;
        Self::from_bundle(&text).map_err(|message| LodaError::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

fn parse_kv<'a>(line: Option<&'a str>, key: &str) -> std::result::Result<&'a str, String> {
    let line = line.ok_or_else(|| format!("missing {key}"))?;
    line.strip_prefix(key)
        .map(str::trim)
        .ok_or_else(|| format!("expected {key}, got {line}"))
}

pub(crate) fn write_matrix(out: &mut String, name: &str, m: ArrayView2<f64>) {
    let _ = writeln!(out, "matrix {name} {} {}", m.nrows(), m.ncols());
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
}

#[derive(Default)]
struct Fnv(u64);

impl Fnv {
    fn write(&mut self, word: u64) {
        if self.0 == 0 {
            self.0 = 0xcbf2_9ce4_8422_2325;
        }
        for byte in word.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Output change predicted for one gradient step on `B` (single sample,
/// `A` fixed): `ΔY = −η ‖A xᵀ‖² g`.
pub fn predicted_output_change(x: ArrayView1<f64>, down: ArrayView2<f64>, grad_y: ArrayView1<f64>, eta: f64) -> Array1<f64> {
    let ax = down.dot(&x);
    let energy = ax.dot(&ax);
    grad_y.mapv(|g| -eta * energy * g)
}

/// Realized output change: applies `B' = B − η gᵀ(x Aᵀ)` explicitly and
/// recomputes `x (W + B A)ᵀ`.
pub fn realized_output_change(
    x: ArrayView1<f64>,
    base: ArrayView2<f64>,
    down: ArrayView2<f64>,
    up: ArrayView2<f64>,
    grad_y: ArrayView1<f64>,
    eta: f64,
) -> Array1<f64> {
    let ax = down.dot(&x);
    let mut up_new = up.to_owned();
    for i in 0..up.nrows() {
        for j in 0..up.ncols() {
            up_new[[i, j]] -= eta * grad_y[i] * ax[j];
        }
    }
    let before = (&base + &up.dot(&down)).dot(&x);
    let after = (&base + &up_new.dot(&down)).dot(&x);
    after - before
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::frobenius;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    fn bases(basis: Array2<f64>, kind: SubspaceKind) -> SubspaceBases {
        let r = basis.ncols();
        SubspaceBases {
            basis,
            kind,
            spectrum: vec![1.0; r],
            jitter_used: 0.0,
        }
    }

    fn anchored(rng: &mut ChaCha8Rng, d: usize, dout: usize, r: usize) -> DualLoRALayer {
        let mut layer = DualLoRALayer::new(random(dout, d, rng), r, DEFAULT_GENERAL_WEIGHT).unwrap();
        let ug = thin_qr_rows(random(r, d, rng).view()).unwrap().t().to_owned();
        let ui = random(d, r, rng);
        layer
            .anchor(
                Some(&bases(ug, SubspaceKind::General)),
                Some(&bases(ui, SubspaceKind::Isolated)),
            )
            .unwrap();
        layer
    }

    #[test]
    fn anchoring_orthonormalizes_and_preserves_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ug = thin_qr_rows(random(2, 5, &mut rng).view()).unwrap().t().to_owned();
        let ui = random(5, 2, &mut rng);
        let mut layer = DualLoRALayer::new(random(3, 5, &mut rng), 2, 0.5).unwrap();
        layer
            .anchor(
                Some(&bases(ug.clone(), SubspaceKind::General)),
                Some(&bases(ui.clone(), SubspaceKind::Isolated)),
            )
            .unwrap();
        let ag = &layer.general.as_ref().unwrap().down;
        assert_eq!(ag, &ug.t());
        let ai = &layer.isolated.as_ref().unwrap().down;
        assert!(frobenius((&ai.dot(&ai.t()) - &Array2::<f64>::eye(2)).view()) < 1e-10);
        let back = ui.t().dot(&ai.t()).dot(ai);
        assert!(frobenius((&back - &ui.t()).view()) <= 1e-8 * frobenius(ui.view()));
    }

    #[test]
    fn anchoring_rejects_rank_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = DualLoRALayer::new(random(3, 5, &mut rng), 2, 0.5).unwrap();
        let wrong = bases(random(5, 3, &mut rng), SubspaceKind::General);
        assert!(matches!(
            layer.anchor(Some(&wrong), None),
            Err(LodaError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_init_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = anchored(&mut rng, 6, 4, 2);
        let x = random(5, 6, &mut rng);
        assert_eq!(layer.forward(x.view()).unwrap(), x.dot(&layer.base.t()));
    }

    #[test]
    fn forward_hand_arithmetic() {
        let mut layer = DualLoRALayer::new(array![[1.0, 0.0], [0.0, 2.0]], 1, DEFAULT_GENERAL_WEIGHT).unwrap();
        layer.general = Some(LoRABranch {
            down: array![[1.0, 0.0]],
            up: array![[2.0], [1.0]],
        });
        layer.isolated = Some(LoRABranch {
            down: array![[0.0, 1.0]],
            up: array![[1.0], [3.0]],
        });
        // W + 0.5·[[2,0],[1,0]] + [[0,1],[0,3]] = [[2,1],[0.5,5]]
        let y = layer.forward(array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(y, array![[4.0, 10.5]]);
    }

    #[test]
    fn isolated_branch_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = anchored(&mut rng, 5, 3, 2);
        let x = random(4, 5, &mut rng);
        let frozen = x.dot(&layer.base.t());
        layer.isolated.as_mut().unwrap().up = random(3, 2, &mut rng);
        let once = &layer.forward(x.view()).unwrap() - &frozen;
        layer.isolated.as_mut().unwrap().up *= 2.0;
        let twice = &layer.forward(x.view()).unwrap() - &frozen;
        assert!(frobenius((&twice - &(&once * 2.0)).view()) < 1e-12);
    }

    #[test]
    fn gradients_zero_and_gated() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = anchored(&mut rng, 5, 3, 2);
        let x = random(4, 5, &mut rng);
        let g = layer.grad_up(x.view(), Array2::zeros((4, 3)).view()).unwrap();
        assert!(g.general.unwrap().iter().all(|&v| v == 0.0));
        assert!(g.isolated.unwrap().iter().all(|&v| v == 0.0));

        // inputs orthogonal to the isolated rows close the gate
        let ai = layer.isolated.as_ref().unwrap().down.clone();
        let raw = random(4, 5, &mut rng);
        let x_perp = &raw - &raw.dot(&ai.t()).dot(&ai);
        let g = layer.grad_up(x_perp.view(), random(4, 3, &mut rng).view()).unwrap();
        assert!(g.isolated.unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn effective_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut layer = anchored(&mut rng, 4, 3, 2);
        layer.general.as_mut().unwrap().up = random(3, 2, &mut rng);
        let g = layer.general.clone().unwrap();
        let plain = layer.effective_update(Some(&[1.0, 1.0]));
        assert!(frobenius((&plain - &(g.product() * 0.5)).view()) < 1e-14);
        assert!(layer.effective_update(Some(&[0.0, 0.0])).iter().all(|&v| v == 0.0));
        let half = layer.effective_update(Some(&[0.5, 0.0]));
        let expected = g.up.column(0).to_owned().insert_axis(ndarray::Axis(1))
            .dot(&g.down.row(0).to_owned().insert_axis(ndarray::Axis(0)))
            * 0.25;
        assert!(frobenius((&half - &expected).view()) < 1e-14);
    }

    #[test]
    fn output_change_explicit_cases() {
        let down = Array2::<f64>::eye(2);
        let x = array![1.0, 0.0];
        let g = array![0.3, -2.0, 1.0];
        let predicted = predicted_output_change(x.view(), down.view(), g.view(), 0.1);
        assert_eq!(predicted, array![-0.1 * 0.3, 0.2, -0.1]);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = random(3, 2, &mut rng);
        let up = random(3, 2, &mut rng);
        let realized = realized_output_change(x.view(), base.view(), down.view(), up.view(), g.view(), 0.1);
        assert!((&realized - &predicted).iter().all(|v| v.abs() < 1e-12));

        let closed = array![[0.0, 1.0]];
        let p = predicted_output_change(x.view(), closed.view(), g.view(), 0.1);
        assert!(p.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bundle_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = anchored(&mut rng, 4, 3, 2);
        layer.general.as_mut().unwrap().up = random(3, 2, &mut rng);
        let text = layer.to_bundle();
        assert_eq!(DualLoRALayer::from_bundle(&text).unwrap(), layer);
        layer.general = None;
        assert_eq!(DualLoRALayer::from_bundle(&layer.to_bundle()).unwrap(), layer);
        assert!(DualLoRALayer::from_bundle("garbage").is_err());
    }
}
