//! Datasets and the class-incremental task protocol.
//!
//! Classes are shuffled once with a seeded permutation, then cut into a first
//! task of `init_cls` classes followed by tasks of `increment` classes each.
//! Labels are re-indexed to the position of their class in the shuffled
//! order, so the classes seen after stage `b` are exactly `0..|Y_1 ∪ … ∪ Y_b|`.

use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CilError, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Default seed for the class-order shuffle.
pub const DEFAULT_SEED: u64 = 1993;

/// Labeled instances `(x_i, y_i)` with `x_i` in R^D.
///
/// Reads of instance data are counted so callers can audit which datasets a
/// component touched.
#[derive(Debug, Clone)]
pub struct Dataset {
    instances: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    class_names: Option<Vec<String>>,
    reads: Arc<AtomicUsize>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.instances == other.instances
            && self.labels == other.labels
            && self.num_classes == other.num_classes
            && self.class_names == other.class_names
    }
}

impl Dataset {
    pub fn new(instances: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if instances.shape().len() != 2 || instances.rows() != labels.len() {
            return Err(CilError::Shape {
                op: "dataset",
                lhs: instances.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(CilError::invalid(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            instances,
            labels,
            num_classes,
            class_names: None,
            reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Builds a dataset from a flat row-major buffer.
    pub fn from_rows(dim: usize, data: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        Dataset::new(Tensor::matrix(n, dim, data)?, labels, num_classes)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        self.class_names = Some(names);
        self
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.instances.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn touch(&self) {
        self.reads.fetch_add(1, Ordering::Relaxed);
    }

    /// Number of instance-data reads so far (shared between clones).
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn instances(&self) -> &Tensor {
        self.touch();
        &self.instances
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.touch();
        self.instances.row(i)
    }

    /// Instances and labels at `indices`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        self.touch();
        let x = self.instances.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (x, y) = self.gather(indices)?;
        let mut d = Dataset::new(x, y, self.num_classes)?;
        d.class_names = self.class_names.clone();
        Ok(d)
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Stacks datasets of equal dimension; `num_classes` is the maximum.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| CilError::invalid("concat: no datasets"))?;
        let dim = first.dim();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut num_classes = 0;
        for p in parts {
            if p.dim() != dim {
                return Err(CilError::Shape {
                    op: "concat",
                    lhs: vec![dim],
                    rhs: vec![p.dim()],
                });
            }
            p.touch();
            data.extend_from_slice(p.instances.data());
            labels.extend_from_slice(&p.labels);
            num_classes = num_classes.max(p.num_classes);
        }
        Dataset::from_rows(dim, data, labels, num_classes)
    }

    fn with_instances(&self, data: Vec<f64>) -> Dataset {
        Dataset {
            instances: Tensor::from_parts(self.instances.shape().to_vec(), data),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
            reads: Arc::new(AtomicUsize::new(0)),
        }
    }

    fn relabeled(&self, indices: &[usize], map: &[usize], num_classes: usize) -> Result<Dataset> {
        let x = self.instances.gather_rows(indices)?;
        let y = indices.iter().map(|&i| map[self.labels[i]]).collect();
        Dataset::new(x, y, num_classes)
    }
}

/// Per-feature standardization using statistics of `train` only.
pub fn standardize(train: &Dataset, test: &Dataset) -> Result<(Dataset, Dataset)> {
    if train.dim() != test.dim() {
        return Err(CilError::Shape {
            op: "standardize",
            lhs: vec![train.dim()],
            rhs: vec![test.dim()],
        });
    }
    let d = train.dim();
    let n = train.len() as f64;
    let x = train.instances.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for j in 0..d {
            mean[j] += row[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let apply = |ds: &Dataset| {
        let data: Vec<f64> = ds
            .instances
            .data()
            .chunks(d)
            .flat_map(|row| (0..d).map(|j| (row[j] - mean[j]) / std[j]).collect::<Vec<_>>())
            .collect();
        ds.with_instances(data)
    };
    Ok((apply(train), apply(test)))
}

/// Gaussian clusters: class `c` has mean `separation * u_c` for a seeded random
/// unit direction `u_c`, and isotropic noise with standard deviation `std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    pub means: Vec<Vec<f64>>,
}

/// Draws the raw (unstandardized) synthetic train/test split.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.num_classes == 0 || spec.dim == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(CilError::invalid("synthetic spec needs positive sizes"));
    }
    if !(spec.std >= 0.0 && spec.separation >= 0.0) {
        return Err(CilError::invalid("synthetic spec needs non-negative std and separation"));
    }
    let mut r = rng::rng(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let u: Vec<f64> = (0..spec.dim).map(|_| r.sample(StandardNormal)).collect();
            let n = crate::linalg::norm(&u).max(1e-12);
            u.iter().map(|v| spec.separation * v / n).collect()
        })
        .collect();
    let mut draw = |per_class: usize| -> Result<Dataset> {
        let mut data = Vec::with_capacity(spec.num_classes * per_class * spec.dim);
        let mut labels = Vec::with_capacity(spec.num_classes * per_class);
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for &m in mean {
                    let z: f64 = r.sample(StandardNormal);
                    data.push(m + spec.std * z);
                }
                labels.push(c);
            }
        }
        Dataset::from_rows(spec.dim, data, labels, spec.num_classes)
    };
    let train = draw(spec.train_per_class)?;
    let test = draw(spec.test_per_class)?;
    Ok(SyntheticData { train, test, means })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv {
        train: PathBuf,
        test: PathBuf,
        header: bool,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// Loads a train/test pair and standardizes it with train statistics.
pub fn load_dataset(source: &DataSource) -> Result<(Dataset, Dataset)> {
    let (train, test) = match source {
        DataSource::Synthetic(spec) => {
            let s = generate_synthetic(spec)?;
            (s.train, s.test)
        }
        DataSource::Csv {
            train,
            test,
            header,
        } => {
            let (xtr, ytr, dim) = read_csv(train, *header)?;
            let (xte, yte, dim_te) = read_csv(test, *header)?;
            if dim != dim_te {
                return Err(CilError::Parse {
                    path: test.display().to_string(),
                    location: "row 1".into(),
                    msg: format!("expected {dim} feature columns, found {dim_te}"),
                });
            }
            let skip = usize::from(*header);
            assemble(test, xtr, ytr, xte, yte, dim, |i| format!("row {}", i + 1 + skip))?
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let (xtr, dim) = read_idx_images(train_images)?;
            let ytr = read_idx_labels(train_labels)?;
            let (xte, dim_te) = read_idx_images(test_images)?;
            let yte = read_idx_labels(test_labels)?;
            if dim != dim_te {
                return Err(CilError::Parse {
                    path: test_images.display().to_string(),
                    location: "byte offset 8".into(),
                    msg: format!("image size {dim_te} differs from train size {dim}"),
                });
            }
            check_label_count(train_labels, ytr.len(), xtr.len() / dim)?;
            check_label_count(test_labels, yte.len(), xte.len() / dim)?;
            assemble(test_labels, xtr, ytr, xte, yte, dim, |i| {
                format!("byte offset {}", 8 + i)
            })?
        }
    };
    standardize(&train, &test)
}

fn check_label_count(path: &Path, labels: usize, images: usize) -> Result<()> {
    if labels != images {
        return Err(CilError::Parse {
            path: path.display().to_string(),
            location: "byte offset 4".into(),
            msg: format!("{labels} labels for {images} images"),
        });
    }
    Ok(())
}

fn assemble(
    test_path: &Path,
    xtr: Vec<f64>,
    ytr: Vec<usize>,
    xte: Vec<f64>,
    yte: Vec<usize>,
    dim: usize,
    location: impl Fn(usize) -> String,
) -> Result<(Dataset, Dataset)> {
    let num_classes = ytr.iter().max().map_or(0, |m| m + 1);
    let mut known = vec![false; num_classes];
    for &y in &ytr {
        known[y] = true;
    }
    if let Some((i, &y)) = yte
        .iter()
        .enumerate()
        .find(|(_, &y)| y >= num_classes || !known[y])
    {
        return Err(CilError::Parse {
            path: test_path.display().to_string(),
            location: location(i),
            msg: format!("test label {y} does not occur in the training set"),
        });
    }
    Ok((
        Dataset::from_rows(dim, xtr, ytr, num_classes)?,
        Dataset::from_rows(dim, xte, yte, num_classes)?,
    ))
}

fn io_err(path: &Path, source: std::io::Error) -> CilError {
    CilError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Comma-separated rows: feature columns followed by an integer label.
pub fn read_csv(path: &Path, header: bool) -> Result<(Vec<f64>, Vec<usize>, usize)> {
    let perr = |row: usize, msg: String| CilError::Parse {
        path: path.display().to_string(),
        location: format!("row {row}"),
        msg,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path, io),
            other => perr(0, format!("{other:?}")),
        })?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (i, record) in reader.records().enumerate() {
        let row = i + 1 + usize::from(header);
        let record = record.map_err(|e| perr(row, e.to_string()))?;
        if record.len() < 2 {
            return Err(perr(row, "need at least one feature and a label".into()));
        }
        let d = record.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(perr(row, format!("expected {} columns, found {}", dim.unwrap() + 1, d + 1)));
        }
        for field in record.iter().take(d) {
            let v: f64 = field
                .parse()
                .map_err(|_| perr(row, format!("invalid feature '{field}'")))?;
            if !v.is_finite() {
                return Err(perr(row, format!("non-finite feature '{field}'")));
            }
            data.push(v);
        }
        let label = &record[d];
        labels.push(
            label
                .parse::<usize>()
                .map_err(|_| perr(row, format!("invalid label '{label}'")))?,
        );
    }
    let dim = dim.ok_or_else(|| perr(0, "no data rows".into()))?;
    Ok((data, labels, dim))
}

pub const IDX_IMAGES_MAGIC: [u8; 4] = [0x00, 0x00, 0x08, 0x03];
pub const IDX_LABELS_MAGIC: [u8; 4] = [0x00, 0x00, 0x08, 0x01];

fn idx_header(bytes: &[u8], path: &Path, magic: [u8; 4]) -> Result<Vec<usize>> {
    let perr = |offset: usize, msg: String| CilError::Parse {
        path: path.display().to_string(),
        location: format!("byte offset {offset}"),
        msg,
    };
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(perr(
            0,
            format!(
                "bad magic number {:02x?}, expected {:02x?}",
                &bytes[..bytes.len().min(4)],
                magic
            ),
        ));
    }
    let ndims = magic[3] as usize;
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(perr(bytes.len(), "truncated header".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let expected = header_len + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(perr(
            bytes.len().min(expected),
            format!("payload length {} does not match header (expected {expected} bytes)", bytes.len()),
        ));
    }
    Ok(dims)
}

/// IDX image file (magic 0x00000803); pixels scaled to [0, 1].
pub fn read_idx_images(path: &Path) -> Result<(Vec<f64>, usize)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    parse_idx_images(&bytes, path)
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, usize)> {
    let dims = idx_header(bytes, path, IDX_IMAGES_MAGIC)?;
    let dim = dims[1] * dims[2];
    if dim == 0 || dims[0] == 0 {
        return Err(CilError::Parse {
            path: path.display().to_string(),
            location: "byte offset 4".into(),
            msg: "empty image set".into(),
        });
    }
    let data = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((data, dim))
}

/// IDX label file (magic 0x00000801).
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    parse_idx_labels(&bytes, path)
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    idx_header(bytes, path, IDX_LABELS_MAGIC)?;
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub init_cls: usize,
    pub increment: usize,
    pub seed: u64,
    pub total_classes: usize,
}

impl StreamConfig {
    pub fn new(init_cls: usize, increment: usize, total_classes: usize) -> Self {
        StreamConfig {
            init_cls,
            increment,
            seed: DEFAULT_SEED,
            total_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.init_cls == 0 || self.increment == 0 || self.total_classes == 0 {
            return Err(CilError::invalid(
                "init_cls, increment and total_classes must be positive",
            ));
        }
        if self.init_cls > self.total_classes {
            return Err(CilError::invalid(format!(
                "init_cls {} exceeds total classes {}",
                self.init_cls, self.total_classes
            )));
        }
        if !(self.total_classes - self.init_cls).is_multiple_of(self.increment) {
            return Err(CilError::invalid(format!(
                "total classes {} minus init_cls {} is not divisible by increment {}",
                self.total_classes, self.init_cls, self.increment
            )));
        }
        Ok(())
    }

    /// Number of tasks `B`.
    pub fn num_tasks(&self) -> usize {
        1 + (self.total_classes - self.init_cls) / self.increment
    }

    /// Classes introduced by each task.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.init_cls];
        sizes.extend(std::iter::repeat_n(self.increment, self.num_tasks() - 1));
        sizes
    }
}

/// Seeded permutation of the class ids `0..total_classes`.
pub fn shuffle_class_order(total_classes: usize, seed: u64) -> Vec<usize> {
    rng::permutation(total_classes, seed)
}

/// One incremental step: the new classes and their train/test instances.
/// Labels are already re-indexed into the stream's contiguous label space.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub index: usize,
    /// Original class ids, in shuffled order.
    pub classes: Vec<usize>,
    /// Re-indexed labels introduced by this task.
    pub label_range: Range<usize>,
    pub train: Dataset,
    /// Test instances of this task's classes only.
    pub test: Dataset,
}

impl Task {
    pub fn num_new_classes(&self) -> usize {
        self.label_range.len()
    }

    /// Number of classes seen before this task.
    pub fn num_old_classes(&self) -> usize {
        self.label_range.start
    }

    pub fn num_seen_classes(&self) -> usize {
        self.label_range.end
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<Task>,
    class_order: Vec<usize>,
    config: StreamConfig,
}

impl TaskStream {
    pub fn build(train: &Dataset, test: &Dataset, cfg: &StreamConfig) -> Result<TaskStream> {
        cfg.validate()?;
        if train.num_classes() != cfg.total_classes || test.num_classes() > cfg.total_classes {
            return Err(CilError::invalid(format!(
                "dataset has {} classes but the stream expects {}",
                train.num_classes(),
                cfg.total_classes
            )));
        }
        let train_counts = train.class_counts();
        let test_counts = test.class_counts();
        for c in 0..cfg.total_classes {
            if train_counts[c] == 0 || test_counts.get(c).copied().unwrap_or(0) == 0 {
                return Err(CilError::invalid(format!(
                    "class {c} has no {} instances",
                    if train_counts[c] == 0 { "training" } else { "test" }
                )));
            }
        }
        let order = shuffle_class_order(cfg.total_classes, cfg.seed);
        let mut position = vec![0; cfg.total_classes];
        for (pos, &c) in order.iter().enumerate() {
            position[c] = pos;
        }
        train.touch();
        test.touch();

        let mut tasks = Vec::with_capacity(cfg.num_tasks());
        let mut start = 0;
        for (index, size) in cfg.stage_sizes().into_iter().enumerate() {
            let range = start..start + size;
            let pick = |ds: &Dataset| -> Vec<usize> {
                (0..ds.len())
                    .filter(|&i| range.contains(&position[ds.labels[i]]))
                    .collect()
            };
            let train_idx = pick(train);
            let test_idx = pick(test);
            tasks.push(Task {
                index,
                classes: order[range.clone()].to_vec(),
                label_range: range.clone(),
                train: train.relabeled(&train_idx, &position, range.end)?,
                test: test.relabeled(&test_idx, &position, range.end)?,
            });
            start = range.end;
        }
        Ok(TaskStream {
            tasks,
            class_order: order,
            config: *cfg,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    /// `|Y_1 ∪ … ∪ Y_b|` for the 0-based stage index.
    pub fn seen_classes(&self, stage: usize) -> usize {
        self.tasks[stage].label_range.end
    }

    /// Test instances of every class seen up to and including `stage`.
    pub fn eval_pool(&self, stage: usize) -> Result<Dataset> {
        let parts: Vec<&Dataset> = self.tasks[..=stage].iter().map(|t| &t.test).collect();
        let mut pool = Dataset::concat(&parts)?;
        pool.num_classes = self.seen_classes(stage);
        Ok(pool)
    }
}
