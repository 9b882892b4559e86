//! Uncentered second-moment statistics `S = XᵀX` of layer-input features.
//!
//! Accumulation is additive, so statistics from disjoint batches (or
//! workers) combine by [`SecondMoment::merge`].

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{LodaError, Result};
use crate::numerics::ensure_finite;

#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    gram: Array2<f64>,
    rows: u64,
}

impl SecondMoment {
    pub fn zeros(dim: usize) -> Self {
        Self {
            gram: Array2::zeros((dim, dim)),
            rows: 0,
        }
    }

    pub fn from_features(x: ArrayView2<f64>) -> Result<Self> {
        let mut m = Self::zeros(x.ncols());
        m.accumulate(x)?;
        Ok(m)
    }

    /// Builds a statistic from a Gram matrix directly. Used by tests and
    /// by callers that already hold `XᵀX`.
    pub fn from_gram(gram: Array2<f64>, rows: u64) -> Result<Self> {
        let sym = crate::numerics::symmetrized(gram.view())?;
        Ok(Self { gram: sym, rows })
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn gram(&self) -> ArrayView2<'_, f64> {
        self.gram.view()
    }

    /// `S += XᵀX`, `rows += N`.
    pub fn accumulate(&mut self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(LodaError::DimensionMismatch {
                context: "second-moment accumulation",
                expected: self.dim(),
                found: x.ncols(),
            });
        }
        ensure_finite(x, "feature batch")?;
        let update = x.t().dot(&x);
        self.gram += &update;
        symmetrize_in_place(&mut self.gram);
        self.rows += x.nrows() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &SecondMoment) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(LodaError::DimensionMismatch {
                context: "second-moment merge",
                expected: self.dim(),
                found: other.dim(),
            });
        }
        self.gram += &other.gram;
        symmetrize_in_place(&mut self.gram);
        self.rows += other.rows;
        Ok(())
    }

    /// `tr(S) = ‖X‖_F²`.
    pub fn trace_energy(&self) -> f64 {
        self.gram.diag().sum()
    }
}

fn symmetrize_in_place(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    /// Only the running sum over finished tasks is kept.
    #[default]
    CumulativeOnly,
    /// Every finished task's statistic is also kept.
    PerTask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecondMomentStore {
    retention: Retention,
    per_task: Vec<SecondMoment>,
    cumulative_past: SecondMoment,
    tasks_finished: u64,
}

const STORE_MAGIC: &[u8; 8] = b"LODASTAT";
const STORE_VERSION: u32 = 1;

impl SecondMomentStore {
    pub fn new(dim: usize, retention: Retention) -> Self {
        Self {
            retention,
            per_task: Vec::new(),
            cumulative_past: SecondMoment::zeros(dim),
            tasks_finished: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.cumulative_past.dim()
    }

    pub fn retention(&self) -> Retention {
        self.retention
    }

    pub fn tasks_finished(&self) -> u64 {
        self.tasks_finished
    }

    /// `S^{1:t-1}`: the sum over all finished tasks.
    pub fn cumulative_past(&self) -> &SecondMoment {
        &self.cumulative_past
    }

    /// Retained per-task statistics; empty in cumulative-only mode.
    pub fn per_task(&self) -> &[SecondMoment] {
        &self.per_task
    }

    pub fn finish_task(&mut self, task: SecondMoment) -> Result<()> {
        self.cumulative_past.merge(&task)?;
        self.tasks_finished += 1;
        if self.retention == Retention::PerTask {
            self.per_task.push(task);
        }
        Ok(())
    }

    /// Serialized layout (little endian):
    ///
    /// ```text
    /// magic "LODASTAT" | u32 version | u64 D | u64 task count | u8 retention (0 cumulative, 1 per-task)
    /// u64 cumulative row count | D*D f64 cumulative entries, row-major
    /// per retained task: u64 row count | D*D f64 entries, row-major
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.byte_size());
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        out.extend_from_slice(&(d as u64).to_le_bytes());
        out.extend_from_slice(&self.tasks_finished.to_le_bytes());
        out.push(match self.retention {
            Retention::CumulativeOnly => 0,
            Retention::PerTask => 1,
        });
        for m in std::iter::once(&self.cumulative_past).chain(self.per_task.iter()) {
            out.extend_from_slice(&m.rows.to_le_bytes());
            for v in m.gram.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Exact length of [`Self::to_bytes`].
    pub fn byte_size(&self) -> usize {
        let d = self.dim();
        let matrices = 1 + self.per_task.len();
        8 + 4 + 8 + 8 + 1 + matrices * (8 + d * d * 8)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != STORE_MAGIC {
            return Err("bad magic".into());
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != STORE_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let d = cur.u64()? as usize;
        let tasks_finished = cur.u64()?;
        let retention = match cur.take(1)?[0] {
            0 => Retention::CumulativeOnly,
            1 => Retention::PerTask,
            other => return Err(format!("unknown retention tag {other}")),
        };
        let read_matrix = |cur: &mut Cursor| -> std::result::Result<SecondMoment, String> {
            let rows = cur.u64()?;
            let mut gram = Array2::zeros((d, d));
            for v in gram.iter_mut() {
                *v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            }
            Ok(SecondMoment { gram, rows })
        };
        let cumulative_past = read_matrix(&mut cur)?;
        let mut per_task = Vec::new();
        if retention == Retention::PerTask {
            for _ in 0..tasks_finished {
                per_task.push(read_matrix(&mut cur)?);
            }
        }
        if cur.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self {
            retention,
            per_task,
            cumulative_past,
            tasks_finished,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| LodaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LodaError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|message| LodaError::Format {
            path: path.to_path_buf(),
            message,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err("unexpected end of data".into());
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::diag;
    use ndarray::{array, concatenate, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_batch_counts_rows() {
        let mut m = SecondMoment::zeros(3);
        m.accumulate(Array2::zeros((4, 3)).view()).unwrap();
        assert_eq!(m.gram(), Array2::<f64>::zeros((3, 3)));
        assert_eq!(m.rows(), 4);
    }

    #[test]
    fn rank_one_row() {
        let m = SecondMoment::from_features(array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(m.gram(), array![[1.0, 2.0], [2.0, 4.0]]);
    }

    #[test]
    fn dimension_mismatch() {
        let mut m = SecondMoment::zeros(3);
        assert!(matches!(
            m.accumulate(Array2::zeros((2, 2)).view()),
            Err(LodaError::DimensionMismatch { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn additive_over_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = random(7, 4, &mut rng);
        let x2 = random(5, 4, &mut rng);
        let mut split = SecondMoment::zeros(4);
        split.accumulate(x1.view()).unwrap();
        split.accumulate(x2.view()).unwrap();
        let joined = SecondMoment::from_features(concatenate![Axis(0), x1, x2].view()).unwrap();
        for (a, b) in split.gram().iter().zip(joined.gram().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(split.rows(), 12);
    }

    #[test]
    fn finish_tasks_accumulates() {
        let mut store = SecondMomentStore::new(2, Retention::PerTask);
        store.finish_task(SecondMoment::from_gram(diag(&[1.0, 2.0]), 1).unwrap()).unwrap();
        assert_eq!(store.cumulative_past().gram(), diag(&[1.0, 2.0]));
        store.finish_task(SecondMoment::from_gram(diag(&[3.0, 1.0]), 1).unwrap()).unwrap();
        assert_eq!(store.cumulative_past().gram(), diag(&[4.0, 3.0]));
        assert_eq!(store.per_task().len(), 2);
    }

    #[test]
    fn ten_tasks_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = SecondMomentStore::new(5, Retention::PerTask);
        let mut direct = Array2::<f64>::zeros((5, 5));
        for _ in 0..10 {
            let x = random(6, 5, &mut rng);
            direct += &x.t().dot(&x);
            store.finish_task(SecondMoment::from_features(x.view()).unwrap()).unwrap();
        }
        let diff = crate::numerics::frobenius((&store.cumulative_past().gram() - &direct).view());
        assert!(diff <= 1e-9 * crate::numerics::frobenius(direct.view()));
    }

    #[test]
    fn trace_energy_matches_elementwise_sum() {
        assert_eq!(SecondMoment::zeros(2).trace_energy(), 0.0);
        assert_eq!(SecondMoment::from_gram(diag(&[4.0, 1.0]), 1).unwrap().trace_energy(), 5.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(9, 4, &mut rng);
        let direct: f64 = x.iter().map(|v| v * v).sum();
        let m = SecondMoment::from_features(x.view()).unwrap();
        assert!((m.trace_energy() - direct).abs() <= 1e-12 * direct);
    }

    #[test]
    fn psd_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(3, 6, &mut rng);
        let m = SecondMoment::from_features(x.view()).unwrap();
        for _ in 0..100 {
            let p = ndarray::Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
            assert!(p.dot(&m.gram().dot(&p)) >= -1e-8);
        }
    }

    #[test]
    fn store_bytes_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for retention in [Retention::CumulativeOnly, Retention::PerTask] {
            let mut store = SecondMomentStore::new(3, retention);
            for _ in 0..3 {
                store
                    .finish_task(SecondMoment::from_features(random(4, 3, &mut rng).view()).unwrap())
                    .unwrap();
            }
            let bytes = store.to_bytes();
            assert_eq!(bytes.len(), store.byte_size());
            assert_eq!(SecondMomentStore::from_bytes(&bytes).unwrap(), store);
        }
        assert!(SecondMomentStore::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn cumulative_size_is_task_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut sizes = Vec::new();
        for tasks in [2, 50] {
            let mut store = SecondMomentStore::new(4, Retention::CumulativeOnly);
            for _ in 0..tasks {
                store
                    .finish_task(SecondMoment::from_features(random(3, 4, &mut rng).view()).unwrap())
                    .unwrap();
            }
            sizes.push(store.to_bytes().len());
        }
        assert_eq!(sizes[0], sizes[1]);
    }
}
