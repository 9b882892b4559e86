//! Synthetic task streams with a tunable amount of cross-task correlation,
//! plus CSV export/ingestion of labeled raw features.
//!
//! Class means mix a component in a subspace shared by all tasks with a
//! component in a task-private subspace:
//! `μ_c = m · normalize(κ·G z_c + (1−κ)·P_t w_c)`, and samples are
//! `μ_c + σ·ε` with isotropic Gaussian `ε`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LodaError, Result};
use crate::model::ClassId;
use crate::numerics::thin_qr_rows;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub raw_dim: usize,
    pub shared_dim: usize,
    pub private_dim: usize,
    pub kappa: f64,
    pub noise_sigma: f64,
    pub mean_norm: f64,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 4,
            train_per_class: 100,
            test_per_class: 50,
            raw_dim: 32,
            shared_dim: 8,
            private_dim: 4,
            kappa: 0.75,
            noise_sigma: 0.3,
            mean_norm: 0.7,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let budget = self.shared_dim + self.tasks * self.private_dim;
        if budget > self.raw_dim {
            return Err(LodaError::Config(format!(
                "dimension budget exceeded: shared {} + {} tasks x private {} = {budget} > raw {}",
                self.shared_dim, self.tasks, self.private_dim, self.raw_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(LodaError::Config(format!("kappa must lie in [0, 1], got {}", self.kappa)));
        }
        if self.tasks == 0 || self.classes_per_task == 0 || self.train_per_class == 0 {
            return Err(LodaError::Config("need at least one task, class and training sample".into()));
        }
        if (self.kappa > 0.0 && self.shared_dim == 0) || (self.kappa < 1.0 && self.private_dim == 0) {
            return Err(LodaError::Config("kappa mixes a subspace of dimension zero".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.mean_norm > 0.0) {
            return Err(LodaError::Config("noise_sigma must be >= 0 and mean_norm > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: usize,
    /// Ascending.
    pub classes: Vec<ClassId>,
    pub train: Array2<f64>,
    pub train_labels: Vec<ClassId>,
    pub test: Array2<f64>,
    pub test_labels: Vec<ClassId>,
}

/// Generated stream together with the class means it was sampled from.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedStream {
    pub tasks: Vec<TaskDataset>,
    /// `class_means[t][k]` belongs to `tasks[t].classes[k]`.
    pub class_means: Vec<Vec<Array1<f64>>>,
}

pub(crate) fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || StandardNormal.sample(rng))
}

fn unit_vec(n: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    loop {
        let v = gaussian_vec(n, rng);
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

pub fn generate(cfg: &StreamConfig) -> Result<Vec<TaskDataset>> {
    Ok(generate_with_means(cfg)?.tasks)
}

pub fn generate_with_means(cfg: &StreamConfig) -> Result<GeneratedStream> {
    cfg.validate()?;
    let d = cfg.raw_dim;
    let mut basis_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let used = cfg.shared_dim + cfg.tasks * cfg.private_dim;
    let raw = Array2::from_shape_simple_fn((used.max(1), d), || StandardNormal.sample(&mut basis_rng));
    // rows are mutually orthonormal: first the shared block, then one block per task
    let frame = thin_qr_rows(raw.view())?;
    let shared = frame.slice(ndarray::s![..cfg.shared_dim, ..]).to_owned();

    let mut tasks = Vec::with_capacity(cfg.tasks);
    let mut class_means = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let lo = cfg.shared_dim + t * cfg.private_dim;
        let private = frame.slice(ndarray::s![lo..lo + cfg.private_dim, ..]).to_owned();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, t as u64 + 1));
        let classes: Vec<ClassId> = (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).collect();
        let means: Vec<Array1<f64>> = classes
            .iter()
            .map(|_| {
                let mut mu = Array1::<f64>::zeros(d);
                if cfg.shared_dim > 0 {
                    let z = unit_vec(cfg.shared_dim, &mut rng);
                    mu.scaled_add(cfg.kappa, &shared.t().dot(&z));
                }
                if cfg.private_dim > 0 {
                    let w = unit_vec(cfg.private_dim, &mut rng);
                    mu.scaled_add(1.0 - cfg.kappa, &private.t().dot(&w));
                }
                let norm = mu.dot(&mu).sqrt();
                mu * (cfg.mean_norm / norm)
            })
            .collect();
        let sample = |count: usize, rng: &mut ChaCha8Rng| {
            let mut x = Array2::<f64>::zeros((count * classes.len(), d));
            let mut labels = Vec::with_capacity(count * classes.len());
            for (k, (&c, mu)) in classes.iter().zip(&means).enumerate() {
                for s in 0..count {
                    let noise = gaussian_vec(d, rng);
                    x.row_mut(k * count + s).assign(&(mu + &(noise * cfg.noise_sigma)));
                    labels.push(c);
                }
            }
            (x, labels)
        };
        let (train, train_labels) = sample(cfg.train_per_class, &mut rng);
        let (test, test_labels) = sample(cfg.test_per_class, &mut rng);
        tasks.push(TaskDataset {
            task: t,
            classes,
            train,
            train_labels,
            test,
            test_labels,
        });
        class_means.push(means);
    }
    Ok(GeneratedStream { tasks, class_means })
}

fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b) / (a.dot(&a) * b.dot(&b)).sqrt()
}

/// Median absolute cosine between class means of different tasks.
pub fn median_cross_task_mean_cosine(stream: &GeneratedStream) -> f64 {
    let mut values = Vec::new();
    for (t, a) in stream.class_means.iter().enumerate() {
        for b in &stream.class_means[t + 1..] {
            for ma in a {
                for mb in b {
                    values.push(cosine(ma.view(), mb.view()).abs());
                }
            }
        }
    }
    median(&mut values)
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Writes `task_id,class_id,split,f0..f{D-1}`, train rows before test rows
/// within each task.
pub fn export_csv(tasks: &[TaskDataset], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LodaError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let width = tasks.first().map_or(0, |t| t.train.ncols());
    let mut header = vec!["task_id".to_string(), "class_id".into(), "split".into()];
    header.extend((0..width).map(|i| format!("f{i}")));
    writeln!(w, "{}", header.join(",")).map_err(|e| LodaError::io(path, e))?;
    for t in tasks {
        for (split, x, labels) in [("train", &t.train, &t.train_labels), ("test", &t.test, &t.test_labels)] {
            for (row, label) in x.rows().into_iter().zip(labels) {
                let mut line = format!("{},{},{}", t.task, label, split);
                for v in row {
                    line.push(',');
                    line.push_str(&v.to_string());
                }
                writeln!(w, "{line}").map_err(|e| LodaError::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| LodaError::io(path, e))
}

#[derive(Default)]
struct TaskRows {
    train: Vec<f64>,
    train_labels: Vec<ClassId>,
    test: Vec<f64>,
    test_labels: Vec<ClassId>,
}

/// Reads the CSV layout written by [`export_csv`]. Task ids are sorted
/// ascending and renumbered from zero.
pub fn ingest_csv(path: &Path) -> Result<Vec<TaskDataset>> {
    let parse_err = |row: usize, message: String| LodaError::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| LodaError::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header_width = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .len();
    if header_width < 4 {
        return Err(parse_err(1, "header needs task_id, class_id, split and at least one feature".into()));
    }
    let width = header_width - 3;
    let mut by_task: BTreeMap<u64, TaskRows> = BTreeMap::new();
    let mut owner: BTreeMap<ClassId, u64> = BTreeMap::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        if record.len() != header_width {
            return Err(parse_err(row, format!("expected {header_width} fields, found {}", record.len())));
        }
        let task: u64 = record[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(row, format!("bad task id {:?}", &record[0])))?;
        let class: ClassId = record[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(row, format!("bad class id {:?}", &record[1])))?;
        match owner.get(&class) {
            Some(&t) if t != task => {
                return Err(parse_err(row, format!("class {class} appears in tasks {t} and {task}")));
            }
            _ => {
                owner.insert(class, task);
            }
        }
        let mut features = Vec::with_capacity(width);
        for field in record.iter().skip(3) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(row, format!("bad feature value {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, "non-finite feature value".into()));
            }
            features.push(v);
        }
        let entry = by_task.entry(task).or_default();
        match record[2].trim() {
            "train" => {
                entry.train.extend(features);
                entry.train_labels.push(class);
            }
            "test" => {
                entry.test.extend(features);
                entry.test_labels.push(class);
            }
            other => return Err(parse_err(row, format!("unknown split tag {other:?}"))),
        }
    }

    by_task
        .into_values()
        .enumerate()
        .map(|(index, rows)| {
            let classes: BTreeSet<ClassId> = rows.train_labels.iter().chain(&rows.test_labels).copied().collect();
            let train = Array2::from_shape_vec((rows.train_labels.len(), width), rows.train)
                .map_err(|e| parse_err(0, e.to_string()))?;
            let test = Array2::from_shape_vec((rows.test_labels.len(), width), rows.test)
                .map_err(|e| parse_err(0, e.to_string()))?;
            Ok(TaskDataset {
                task: index,
                classes: classes.into_iter().collect(),
                train,
                train_labels: rows.train_labels,
                test,
                test_labels: rows.test_labels,
            })
        })
        .collect()
}
