//! Datasets, task views and the task sequences of the benchmark experiments.
//!
//! Images are stored once per split as `[N x 784]` matrices with pixels in
//! `[0, 1]`; tasks reference them through index lists, a label mapping and an
//! optional pixel permutation, so building ten permuted tasks does not copy
//! the underlying data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2};

/// Flattened input width shared by every experiment (28 x 28).
pub const INPUT_DIM: usize = 784;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Fixed seed of the synthetic-task embedding, shared by all blob tasks so
/// that rotation alone controls how related two tasks are.
const BLOB_EMBED_SEED: u64 = 0x5EED_B10B;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    images: Tensor2,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor2, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::dim(
                "Dataset::new",
                format!("{} images but {} labels", images.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!("label {bad} outside 0..{num_classes}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor2 {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

/// A loaded train/test pair.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Arc<Dataset>,
    pub test: Arc<Dataset>,
}

/// A subset of a shared dataset.
#[derive(Debug, Clone)]
pub struct DatasetView {
    data: Arc<Dataset>,
    indices: Vec<usize>,
}

impl DatasetView {
    pub fn new(data: Arc<Dataset>, indices: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::arg(format!("index {bad} outside dataset of {}", data.len())));
        }
        Ok(Self { data, indices })
    }

    pub fn all(data: Arc<Dataset>) -> Self {
        let indices = (0..data.len()).collect();
        Self { data, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.data
    }
}

/// One task of a continual-learning sequence.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub train: DatasetView,
    pub test: DatasetView,
    /// Original label to task label in `0..k`.
    label_map: BTreeMap<usize, usize>,
    pub head_index: usize,
    /// Pixel `j` of a task input is pixel `perm[j]` of the stored image.
    input_permutation: Option<Arc<Vec<usize>>>,
}

impl TaskSpec {
    pub fn new(
        name: impl Into<String>,
        train: DatasetView,
        test: DatasetView,
        label_map: BTreeMap<usize, usize>,
        head_index: usize,
        input_permutation: Option<Arc<Vec<usize>>>,
    ) -> Result<Self> {
        let k = label_map.len();
        let mut targets: Vec<usize> = label_map.values().copied().collect();
        targets.sort_unstable();
        if k == 0 || targets != (0..k).collect::<Vec<_>>() {
            return Err(Error::arg("label map must be a bijection onto 0..k"));
        }
        for view in [&train, &test] {
            if view.data.dim() != train.data.dim() {
                return Err(Error::dim("TaskSpec::new", "train and test widths differ"));
            }
            if let Some(&i) = view
                .indices
                .iter()
                .find(|&&i| !label_map.contains_key(&view.data.labels[i]))
            {
                return Err(Error::arg(format!(
                    "example {i} has label {} outside the task's label map",
                    view.data.labels[i]
                )));
            }
        }
        if let Some(p) = &input_permutation {
            let d = train.data.dim();
            let mut seen = vec![false; d];
            let ok = p.len() == d
                && p.iter().all(|&j| j < d && !std::mem::replace(&mut seen[j], true));
            if !ok {
                return Err(Error::arg("input permutation is not a bijection"));
            }
        }
        Ok(Self {
            name: name.into(),
            train,
            test,
            label_map,
            head_index,
            input_permutation,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    /// Random-guess accuracy `1 / k`.
    pub fn chance_accuracy(&self) -> f64 {
        1.0 / self.num_classes() as f64
    }

    pub fn label_map(&self) -> &BTreeMap<usize, usize> {
        &self.label_map
    }

    pub fn input_permutation(&self) -> Option<&[usize]> {
        self.input_permutation.as_deref().map(Vec::as_slice)
    }

    pub fn input_dim(&self) -> usize {
        self.train.data.dim()
    }

    pub fn view(&self, split: Split) -> &DatasetView {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Same task with a different head.
    pub fn with_head(mut self, head_index: usize) -> Self {
        self.head_index = head_index;
        self
    }

    /// Same data under a different label mapping (e.g. flipped binary labels).
    pub fn with_label_map(self, label_map: BTreeMap<usize, usize>, name: impl Into<String>) -> Result<Self> {
        TaskSpec::new(
            name,
            self.train,
            self.test,
            label_map,
            self.head_index,
            self.input_permutation,
        )
    }

    /// Materialises inputs and task labels for positions within a split view.
    pub fn batch(&self, split: Split, positions: &[usize]) -> (Tensor2, Vec<usize>) {
        let view = self.view(split);
        let d = view.data.dim();
        let mut x = Tensor2::zeros(positions.len(), d);
        let mut y = Vec::with_capacity(positions.len());
        for (r, &pos) in positions.iter().enumerate() {
            let idx = view.indices[pos];
            let src = view.data.images.row(idx);
            let dst = x.row_mut(r);
            match &self.input_permutation {
                Some(p) => {
                    for (o, &j) in dst.iter_mut().zip(p.iter()) {
                        *o = src[j];
                    }
                }
                None => dst.copy_from_slice(src),
            }
            y.push(self.label_map[&view.data.labels[idx]]);
        }
        (x, y)
    }
}

fn open_any(dir: &Path, candidates: &[&str]) -> Result<(PathBuf, Vec<u8>)> {
    for name in candidates {
        for path in [dir.join(name), dir.join(format!("{name}.gz"))] {
            if !path.is_file() {
                continue;
            }
            let io = |source| Error::Io {
                path: path.clone(),
                source,
            };
            let mut bytes = Vec::new();
            let file = File::open(&path).map_err(io)?;
            if path.extension().is_some_and(|e| e == "gz") {
                GzDecoder::new(file).read_to_end(&mut bytes).map_err(io)?;
            } else {
                std::io::BufReader::new(file).read_to_end(&mut bytes).map_err(io)?;
            }
            return Ok((path, bytes));
        }
    }
    Err(Error::Io {
        path: dir.join(candidates[0]),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: at as u64,
            detail: "header truncated".into(),
        })
}

/// Parses an IDX3 image file into `[N x rows*cols]` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor2> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad image magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() != need {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (16 + body.len().min(need)) as u64,
            detail: format!("expected {need} pixel bytes, found {}", body.len()),
        });
    }
    let data = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor2::new(n, rows * cols, data)
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("bad label magic {magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (8 + body.len().min(n)) as u64,
            detail: format!("expected {n} label bytes, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn load_idx_pair(dir: &Path, prefix: &str, split: Split) -> Result<Dataset> {
    let img_names = [
        format!("{prefix}-images-idx3-ubyte"),
        format!("{prefix}-images.idx3-ubyte"),
    ];
    let lbl_names = [
        format!("{prefix}-labels-idx1-ubyte"),
        format!("{prefix}-labels.idx1-ubyte"),
    ];
    let (ipath, ibytes) = open_any(dir, &[&img_names[0], &img_names[1]])?;
    let images = parse_idx_images(&ibytes, &ipath)?;
    let (lpath, lbytes) = open_any(dir, &[&lbl_names[0], &lbl_names[1]])?;
    let labels = parse_idx_labels(&lbytes, &lpath)?;
    if labels.len() != images.rows() {
        return Err(Error::Format {
            path: lpath,
            offset: 4,
            detail: format!("{} labels for {} images", labels.len(), images.rows()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Format {
            path: lpath,
            offset: 8,
            detail: format!("label {bad} is not a digit"),
        });
    }
    Dataset::new(images, labels, 10, split)
}

/// Loads the MNIST IDX files (plain or `.gz`) from `dir`.
pub fn load_mnist(dir: &Path) -> Result<DataSplits> {
    Ok(DataSplits {
        train: Arc::new(load_idx_pair(dir, "train", Split::Train)?),
        test: Arc::new(load_idx_pair(dir, "t10k", Split::Test)?),
    })
}

/// Bilinear resampling with half-pixel centres; preserves constant images.
pub fn resize_bilinear(src: &[f64], src_w: usize, src_h: usize, dst_w: usize, dst_h: usize) -> Vec<f64> {
    let sx = src_w as f64 / dst_w as f64;
    let sy = src_h as f64 / dst_h as f64;
    let coord = |d: usize, scale: f64, len: usize| {
        let c = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, c - lo as f64)
    };
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for y in 0..dst_h {
        let (y0, y1, fy) = coord(y, sy, src_h);
        for x in 0..dst_w {
            let (x0, x1, fx) = coord(x, sx, src_w);
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bot = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Converts one 3072-byte CIFAR RGB image to 28x28 luma in `[0, 1]`.
pub fn cifar_to_gray28(rgb: &[u8]) -> Vec<f64> {
    const PLANE: usize = 32 * 32;
    let gray: Vec<f64> = (0..PLANE)
        .map(|i| {
            0.299 * f64::from(rgb[i]) + 0.587 * f64::from(rgb[PLANE + i]) + 0.114 * f64::from(rgb[2 * PLANE + i])
        })
        .collect();
    resize_bilinear(&gray, 32, 32, 28, 28)
        .into_iter()
        .map(|v| (v / 255.0).clamp(0.0, 1.0))
        .collect()
}

fn parse_cifar_batches(files: &[(PathBuf, Vec<u8>)], split: Split) -> Result<Dataset> {
    let total: usize = files.iter().map(|(_, b)| b.len() / CIFAR_RECORD).sum();
    let mut images = Tensor2::zeros(total, INPUT_DIM);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (path, bytes) in files {
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format {
                path: path.clone(),
                offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
                detail: format!("file size {} is not a multiple of {CIFAR_RECORD}-byte records", bytes.len()),
            });
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = rec[0] as usize;
            if label >= 10 {
                return Err(Error::Format {
                    path: path.clone(),
                    offset: (r * CIFAR_RECORD) as u64,
                    detail: format!("label byte {label} out of range"),
                });
            }
            images.row_mut(row).copy_from_slice(&cifar_to_gray28(&rec[1..]));
            labels.push(label);
            row += 1;
        }
    }
    Dataset::new(images, labels, 10, split)
}

/// Loads CIFAR-10 binary batches, converted to 28x28 grayscale.
/// Looks in `dir` and in `dir/cifar-10-batches-bin`.
pub fn load_cifar10_gray28(dir: &Path) -> Result<DataSplits> {
    let nested = dir.join("cifar-10-batches-bin");
    let base = if nested.join("test_batch.bin").is_file() {
        nested
    } else {
        dir.to_path_buf()
    };
    let read = |name: String| open_any(&base, &[&name]);
    let train_files = (1..=5)
        .map(|i| read(format!("data_batch_{i}.bin")))
        .collect::<Result<Vec<_>>>()?;
    let test_files = vec![read("test_batch.bin".to_string())?];
    Ok(DataSplits {
        train: Arc::new(parse_cifar_batches(&train_files, Split::Train)?),
        test: Arc::new(parse_cifar_batches(&test_files, Split::Test)?),
    })
}

fn indices_with_labels(ds: &Dataset, wanted: &[usize]) -> Vec<usize> {
    ds.labels
        .iter()
        .enumerate()
        .filter(|(_, l)| wanted.contains(l))
        .map(|(i, _)| i)
        .collect()
}

/// One binary task per `(a, b)` pair with `a -> 0`, `b -> 1` and heads
/// numbered from `first_head`.
pub fn make_split_tasks(
    data: &DataSplits,
    pairs: &[(usize, usize)],
    name_prefix: &str,
    first_head: usize,
) -> Result<Vec<TaskSpec>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| {
            if a == b {
                return Err(Error::arg(format!("split pair ({a}, {b}) repeats a label")));
            }
            let train = indices_with_labels(&data.train, &[a, b]);
            let test = indices_with_labels(&data.test, &[a, b]);
            if train.is_empty() || test.is_empty() {
                return Err(Error::arg(format!("labels {a}/{b} not present in dataset")));
            }
            TaskSpec::new(
                format!("{name_prefix}{a}/{b}"),
                DatasetView::new(data.train.clone(), train)?,
                DatasetView::new(data.test.clone(), test)?,
                BTreeMap::from([(a, 0), (b, 1)]),
                first_head + i,
                None,
            )
        })
        .collect()
}

/// The custom Split-MNIST order.
pub const CUSTOM_SPLIT_PAIRS: [(usize, usize); 5] = [(0, 1), (8, 7), (9, 4), (6, 2), (3, 5)];

/// The standard Split-MNIST / Split-CIFAR order.
pub const STANDARD_SPLIT_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

/// `n_tasks` full 10-class tasks, each under its own random pixel
/// permutation (including the first), all sharing head 0.
pub fn make_permuted_tasks(data: &DataSplits, n_tasks: usize, rng: &mut Rng) -> Result<Vec<TaskSpec>> {
    if n_tasks == 0 {
        return Err(Error::arg("n_tasks must be at least 1"));
    }
    let k = data.train.num_classes();
    let label_map: BTreeMap<usize, usize> = (0..k).map(|c| (c, c)).collect();
    (0..n_tasks)
        .map(|t| {
            let perm = Arc::new(rng.permutation(data.train.dim()));
            TaskSpec::new(
                format!("perm-{}", t + 1),
                DatasetView::all(data.train.clone()),
                DatasetView::all(data.test.clone()),
                label_map.clone(),
                0,
                Some(perm),
            )
        })
        .collect()
}

/// Alternating MNIST / CIFAR-10 binary tasks over the standard pairs,
/// MNIST first, with ten distinct heads.
pub fn make_mixed_sequence(mnist: &DataSplits, cifar: &DataSplits) -> Result<Vec<TaskSpec>> {
    if mnist.train.dim() != cifar.train.dim() {
        return Err(Error::dim(
            "make_mixed_sequence",
            format!("MNIST width {} vs CIFAR width {}", mnist.train.dim(), cifar.train.dim()),
        ));
    }
    let mut m = make_split_tasks(mnist, &STANDARD_SPLIT_PAIRS, "mnist-", 0)?.into_iter();
    let mut c = make_split_tasks(cifar, &STANDARD_SPLIT_PAIRS, "cifar-", 0)?.into_iter();
    let mut out = Vec::with_capacity(10);
    while let (Some(mt), Some(ct)) = (m.next(), c.next()) {
        let h = out.len();
        out.push(mt.with_head(h));
        out.push(ct.with_head(h + 1));
    }
    Ok(out)
}

fn blob_embedding() -> Vec<[f64; 2]> {
    let mut rng = Rng::seed_from(BLOB_EMBED_SEED);
    (0..INPUT_DIM)
        .map(|_| {
            let mut sign = || if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            [sign(), sign()]
        })
        .collect()
}

fn blob_dataset(separation: f64, rotation: f64, n: usize, split: Split, rng: &mut Rng) -> Result<Dataset> {
    let embed = blob_embedding();
    let dir = [rotation.cos(), rotation.sin()];
    let mut images = Tensor2::zeros(n, INPUT_DIM);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let sign = if class == 0 { -1.0 } else { 1.0 };
        let p = [
            sign * 0.5 * separation * dir[0] + rng.normal(),
            sign * 0.5 * separation * dir[1] + rng.normal(),
        ];
        for (px, e) in images.row_mut(i).iter_mut().zip(&embed) {
            let v = 0.5 + 0.04 * (e[0] * p[0] + e[1] * p[1]) + 0.05 * rng.normal();
            *px = v.clamp(0.0, 1.0);
        }
        labels.push(class);
    }
    Dataset::new(images, labels, 2, split)
}

/// Two Gaussian clusters in a fixed 2-d subspace of the 784 pixel space.
/// Cluster centres sit at `±separation/2` along the direction `rotation`, with
/// unit isotropic spread in the subspace plus small per-pixel noise.
/// Produces `n` balanced training examples and `max(n / 4, 2)` test examples.
pub fn make_synthetic_blobs(separation: f64, rotation: f64, n: usize, rng: &mut Rng) -> Result<TaskSpec> {
    if n < 4 {
        return Err(Error::arg(format!("synthetic task needs n >= 4, got {n}")));
    }
    if !(separation >= 0.0) || !separation.is_finite() || !rotation.is_finite() {
        return Err(Error::arg("separation must be finite and non-negative"));
    }
    let train = Arc::new(blob_dataset(separation, rotation, n, Split::Train, rng)?);
    let test = Arc::new(blob_dataset(separation, rotation, (n / 4).max(2), Split::Test, rng)?);
    TaskSpec::new(
        format!("blobs(sep={separation},rot={rotation:.3})"),
        DatasetView::all(train),
        DatasetView::all(test),
        BTreeMap::from([(0, 0), (1, 1)]),
        0,
        None,
    )
}
