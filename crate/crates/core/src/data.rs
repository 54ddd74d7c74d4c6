//! Datasets: Gaussian blobs, MNIST IDX ingestion, global normalization.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Target;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Global (single scalar) mean and standard deviation used to normalize inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };

    pub fn of(values: &Array2<f64>) -> NormStats {
        let n = values.len() as f64;
        let mean = values.sum() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        NormStats {
            mean,
            std: var.sqrt(),
        }
    }

    pub fn apply(&self, values: &mut Array2<f64>) {
        let (mean, std) = (self.mean, if self.std > 0.0 { self.std } else { 1.0 });
        values.mapv_inplace(|v| (v - mean) / std);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Blobs,
    Mnist,
    Custom,
}

/// Training targets: class indices, or real-valued rows for regression.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Values(Array2<f64>),
}

#[derive(Debug, Clone, Copy)]
pub enum LabelsRef<'a> {
    Classes(&'a [usize]),
    Values(ArrayView2<'a, f64>),
}

impl Labels {
    pub fn as_ref(&self) -> LabelsRef<'_> {
        match self {
            Labels::Classes(c) => LabelsRef::Classes(c),
            Labels::Values(v) => LabelsRef::Values(v.view()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Values(v) => v.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(indices.iter().map(|&i| c[i]).collect()),
            Labels::Values(v) => Labels::Values(v.select(Axis(0), indices)),
        }
    }
}

/// A borrowed set of examples: inputs one per row, with their targets.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub labels: LabelsRef<'a>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: ArrayView2<'a, f64>, labels: LabelsRef<'a>) -> Self {
        Batch { inputs, labels }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn target(&self, i: usize) -> Target<'a> {
        match self.labels {
            LabelsRef::Classes(c) => Target::Class(c[i]),
            LabelsRef::Values(v) => Target::Values(v.index_axis_move(Axis(0), i)),
        }
    }

    /// Rows `range` of this batch.
    pub fn slice(&self, start: usize, end: usize) -> Batch<'a> {
        let inputs = self.inputs.slice_move(ndarray::s![start..end, ..]);
        let labels = match self.labels {
            LabelsRef::Classes(c) => LabelsRef::Classes(&c[start..end]),
            LabelsRef::Values(v) => LabelsRef::Values(v.slice_move(ndarray::s![start..end, ..])),
        };
        Batch { inputs, labels }
    }
}

/// Owned examples plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One example per row (`N x d`).
    pub inputs: Array2<f64>,
    pub labels: Labels,
    pub k: usize,
    pub norm_stats: NormStats,
    pub seed: u64,
    pub source: Source,
}

impl Dataset {
    /// Wraps raw examples without normalizing them.
    pub fn custom(inputs: Array2<f64>, labels: Labels, k: usize) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != inputs.nrows() {
            return Err(Error::DimensionMismatch {
                expected: inputs.nrows(),
                actual: labels.len(),
                context: "label count",
            });
        }
        if let Labels::Classes(c) = &labels {
            if let Some(&bad) = c.iter().find(|&&c| c >= k) {
                return Err(Error::LabelOutOfRange { label: bad, classes: k });
            }
        }
        Ok(Dataset {
            inputs,
            labels,
            k,
            norm_stats: NormStats::IDENTITY,
            seed: 0,
            source: Source::Custom,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch::new(self.inputs.view(), self.labels.as_ref())
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes(c) => Some(c),
            Labels::Values(_) => None,
        }
    }

    /// Normalizes all entries with one global mean and standard deviation,
    /// composing the new statistics into `norm_stats`.
    pub fn normalize(&mut self) {
        let stats = NormStats::of(&self.inputs);
        stats.apply(&mut self.inputs);
        let std = if stats.std > 0.0 { stats.std } else { 1.0 };
        self.norm_stats = NormStats {
            mean: self.norm_stats.mean + self.norm_stats.std * stats.mean,
            std: self.norm_stats.std * std,
        };
    }

    /// New dataset holding the given rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select(Axis(0), indices),
            labels: self.labels.select(indices),
            k: self.k,
            norm_stats: self.norm_stats,
            seed: self.seed,
            source: self.source,
        }
    }

    /// First `n` examples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let head: Vec<usize> = (0..n.min(self.len())).collect();
        let tail: Vec<usize> = (n.min(self.len())..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }

    /// Number of examples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.k];
        if let Labels::Classes(c) = &self.labels {
            for &y in c {
                hist[y] += 1;
            }
        }
        hist
    }

    /// Writes one CSV row per example: label, then the d features.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(File::create(path)?);
        for i in 0..self.len() {
            match &self.labels {
                Labels::Classes(c) => write!(w, "{}", c[i])?,
                Labels::Values(v) => {
                    let row: Vec<String> = v.row(i).iter().map(|x| x.to_string()).collect();
                    write!(w, "{}", row.join(","))?
                }
            }
            for x in self.inputs.row(i) {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Averages non-overlapping `factor x factor` pixel blocks of square
    /// images of side `side`, then renormalizes globally.
    pub fn downsample_images(&self, side: usize, factor: usize) -> Result<Dataset> {
        if factor == 0 || side * side != self.dim() || side % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot pool {}-pixel images of side {side} by {factor}",
                self.dim()
            )));
        }
        let out_side = side / factor;
        let scale = 1.0 / (factor * factor) as f64;
        let mut pooled = Array2::zeros((self.len(), out_side * out_side));
        for (src, mut dst) in self.inputs.rows().into_iter().zip(pooled.rows_mut()) {
            for r in 0..side {
                for c in 0..side {
                    dst[(r / factor) * out_side + c / factor] += src[r * side + c] * scale;
                }
            }
        }
        let mut out = Dataset {
            inputs: pooled,
            labels: self.labels.clone(),
            k: self.k,
            norm_stats: NormStats::IDENTITY,
            seed: self.seed,
            source: self.source,
        };
        out.normalize();
        Ok(out)
    }
}

/// Samples `k` Gaussian clusters in R^d and normalizes the result globally.
///
/// Centers are standard normal; samples are `center + sqrt(cov_scale) * z`.
/// Examples are stored cluster by cluster.
pub fn gen_blobs(k: usize, d: usize, n_per_cluster: usize, cov_scale: f64, seed: u64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::InvalidArgument("blobs need at least two clusters".into()));
    }
    if d == 0 || n_per_cluster == 0 {
        return Err(Error::InvalidArgument("blob dimension and cluster size must be positive".into()));
    }
    if !(cov_scale > 0.0 && cov_scale.is_finite()) {
        return Err(Error::InvalidArgument("cov_scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Array2<f64> = Array2::from_shape_simple_fn((k, d), || StandardNormal.sample(&mut rng));
    let spread = cov_scale.sqrt();
    let n = k * n_per_cluster;
    let mut inputs = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for i in 0..n_per_cluster {
            let mut row = inputs.row_mut(c * n_per_cluster + i);
            for (x, &mu) in row.iter_mut().zip(centers.row(c)) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = mu + spread * z;
            }
            labels.push(c);
        }
    }
    let mut ds = Dataset {
        inputs,
        labels: Labels::Classes(labels),
        k,
        norm_stats: NormStats::IDENTITY,
        seed,
        source: Source::Blobs,
    };
    ds.normalize();
    Ok(ds)
}

/// One standard normal cloud in R^d with labels alternating between two classes.
///
/// The labels carry no signal; the set exists for curvature studies where only
/// the input distribution matters.
pub fn gen_single_blob(d: usize, n: usize, seed: u64) -> Result<Dataset> {
    if d == 0 || n == 0 {
        return Err(Error::InvalidArgument("blob dimension and size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Array2<f64> = Array2::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
    let mut ds = Dataset {
        inputs,
        labels: Labels::Classes((0..n).map(|i| i % 2).collect()),
        k: 2,
        norm_stats: NormStats::IDENTITY,
        seed,
        source: Source::Blobs,
    };
    ds.normalize();
    Ok(ds)
}

/// Raw contents of a pair of IDX image/label files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl IdxImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Builds a dataset from the given examples: pixels scaled to [0, 1],
    /// then normalized globally.
    pub fn to_dataset(&self, indices: &[usize], seed: u64) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = self.rows * self.cols;
        let mut inputs = Array2::zeros((indices.len(), d));
        for (mut row, &i) in inputs.rows_mut().into_iter().zip(indices) {
            let px = &self.pixels[i * d..(i + 1) * d];
            row.iter_mut().zip(px).for_each(|(x, &p)| *x = p as f64 / 255.0);
        }
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i] as usize).collect();
        if let Some(&bad) = labels.iter().find(|&&y| y >= 10) {
            return Err(Error::LabelOutOfRange { label: bad, classes: 10 });
        }
        let mut ds = Dataset {
            inputs,
            labels: Labels::Classes(labels),
            k: 10,
            norm_stats: NormStats::IDENTITY,
            seed,
            source: Source::Mnist,
        };
        ds.normalize();
        Ok(ds)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: 0,
                message: format!("gzip: {e}"),
            })?;
        return Ok(out);
    }
    Ok(raw)
}

struct IdxCursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl IdxCursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err("unexpected end of file in header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            let e = self.err(format!("truncated payload: need {n} bytes, {available} available"));
            return Err(e);
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Parses big-endian IDX image and label files (optionally gzip-compressed).
pub fn read_idx(images_path: &Path, labels_path: &Path) -> Result<IdxImages> {
    let img_bytes = read_maybe_gz(images_path)?;
    let mut cur = IdxCursor {
        path: images_path,
        bytes: &img_bytes,
        pos: 0,
    };
    let magic = cur.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        cur.pos = 0;
        return Err(cur.err(format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let count = cur.u32()? as usize;
    let rows = cur.u32()? as usize;
    let cols = cur.u32()? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let pixels = cur.take(len)?.to_vec();

    let lbl_bytes = read_maybe_gz(labels_path)?;
    let mut cur = IdxCursor {
        path: labels_path,
        bytes: &lbl_bytes,
        pos: 0,
    };
    let magic = cur.u32()?;
    if magic != IDX_LABELS_MAGIC {
        cur.pos = 0;
        return Err(cur.err(format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let label_count = cur.u32()? as usize;
    if label_count != count {
        return Err(Error::InvalidArgument(format!(
            "image file holds {count} examples but label file holds {label_count}"
        )));
    }
    let labels = cur.take(count)?.to_vec();
    Ok(IdxImages {
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Writes IDX image and label files (uncompressed).
pub fn write_idx(images_path: &Path, labels_path: &Path, images: &IdxImages) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(images_path)?);
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&(images.len() as u32).to_be_bytes())?;
    f.write_all(&(images.rows as u32).to_be_bytes())?;
    f.write_all(&(images.cols as u32).to_be_bytes())?;
    f.write_all(&images.pixels)?;
    f.flush()?;
    let mut f = std::io::BufWriter::new(File::create(labels_path)?);
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(images.len() as u32).to_be_bytes())?;
    f.write_all(&images.labels)?;
    f.flush()?;
    Ok(())
}

/// Seeded subsample without replacement. Asking for every example returns
/// them in file order.
pub fn subsample_indices(total: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "subsample of {n} exceeds the {total} available examples"
        )));
    }
    if n == total {
        return Ok((0..total).collect());
    }
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    Ok(idx)
}

/// Loads MNIST from IDX files and keeps a seeded subsample of `subsample_n`
/// examples.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path, subsample_n: usize, seed: u64) -> Result<Dataset> {
    let raw = read_idx(images_path, labels_path)?;
    let idx = subsample_indices(raw.len(), subsample_n, seed)?;
    raw.to_dataset(&idx, seed)
}

/// Loads disjoint seeded train and test subsamples, normalized together with
/// one set of global statistics.
pub fn load_mnist_split(
    images_path: &Path,
    labels_path: &Path,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let raw = read_idx(images_path, labels_path)?;
    let idx = subsample_indices(raw.len(), n_train + n_test, seed)?;
    let all = raw.to_dataset(&idx, seed)?;
    Ok(all.split_at(n_train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn global_moments(x: &Array2<f64>) -> (f64, f64) {
        let s = NormStats::of(x);
        (s.mean, s.std)
    }

    fn tiny_idx(count: usize) -> IdxImages {
        IdxImages {
            rows: 4,
            cols: 4,
            pixels: (0..count * 16).map(|i| (i * 37 % 256) as u8).collect(),
            labels: (0..count).map(|i| (i % 10) as u8).collect(),
        }
    }

    #[test]
    fn blobs_shape_and_normalization() {
        let ds = gen_blobs(2, 100, 500, 1.0, 7).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.k), (1000, 100, 2));
        let (mean, std) = global_moments(&ds.inputs);
        assert!(mean.abs() <= 1e-8);
        assert!((std - 1.0).abs() <= 1e-6);
        assert_eq!(ds.class_histogram(), vec![500, 500]);
        assert_eq!(ds.source, Source::Blobs);
    }

    #[test]
    fn blobs_are_reproducible() {
        assert_eq!(gen_blobs(3, 5, 20, 10.0, 1).unwrap(), gen_blobs(3, 5, 20, 10.0, 1).unwrap());
        assert_ne!(gen_blobs(3, 5, 20, 10.0, 1).unwrap(), gen_blobs(3, 5, 20, 10.0, 2).unwrap());
    }

    #[test]
    fn blob_arguments_are_checked() {
        assert!(gen_blobs(1, 5, 10, 1.0, 0).is_err());
        assert!(gen_blobs(2, 0, 10, 1.0, 0).is_err());
        assert!(gen_blobs(2, 5, 10, 0.0, 0).is_err());
        assert!(gen_blobs(10, 100, 50, 10.0, 0).is_ok());
    }

    #[test]
    fn single_blob_is_balanced_and_normalized() {
        let ds = gen_single_blob(10, 101, 3).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.k), (101, 10, 2));
        assert_eq!(ds.class_histogram(), vec![51, 50]);
        let (mean, std) = global_moments(&ds.inputs);
        assert!(mean.abs() <= 1e-8 && (std - 1.0).abs() <= 1e-6);
        assert!(gen_single_blob(0, 5, 0).is_err());
    }

    #[test]
    fn idx_roundtrip_preserves_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let raw = tiny_idx(12);
        write_idx(&img, &lbl, &raw).unwrap();
        assert_eq!(read_idx(&img, &lbl).unwrap(), raw);
    }

    #[test]
    fn gzip_files_are_accepted() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        let raw = tiny_idx(5);
        write_idx(&img, &lbl, &raw).unwrap();
        let gz = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(File::create(&gz).unwrap(), flate2::Compression::default());
        enc.write_all(&std::fs::read(&img).unwrap()).unwrap();
        enc.finish().unwrap();
        assert_eq!(read_idx(&gz, &lbl).unwrap(), raw);
    }

    #[test]
    fn truncated_and_malformed_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx(&img, &lbl, &tiny_idx(3)).unwrap();
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..30]).unwrap();
        match read_idx(&img, &lbl) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 16),
            other => panic!("{other:?}"),
        }
        std::fs::write(&img, &bytes[..6]).unwrap();
        assert!(matches!(read_idx(&img, &lbl), Err(Error::Parse { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[3] = 0x01;
        std::fs::write(&img, &bad).unwrap();
        assert!(matches!(read_idx(&img, &lbl), Err(Error::Parse { offset: 0, .. })));
        std::fs::write(&img, &bytes).unwrap();
        write_idx(&dir.path().join("x"), &lbl, &tiny_idx(4)).unwrap();
        assert!(read_idx(&img, &lbl).is_err());
    }

    #[test]
    fn subsampling() {
        assert_eq!(subsample_indices(6, 6, 3).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        let idx = subsample_indices(100, 10, 3).unwrap();
        assert_eq!(idx, subsample_indices(100, 10, 3).unwrap());
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        assert!(subsample_indices(5, 6, 0).is_err());
    }

    #[test]
    fn mnist_style_loading() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("img"), dir.path().join("lbl"));
        write_idx(&img, &lbl, &tiny_idx(30)).unwrap();
        let ds = load_mnist_idx(&img, &lbl, 20, 1).unwrap();
        assert_eq!((ds.len(), ds.dim(), ds.k, ds.source), (20, 16, 10, Source::Mnist));
        assert!(ds.classes().unwrap().iter().all(|&y| y < 10));
        let (mean, std) = global_moments(&ds.inputs);
        assert!(mean.abs() <= 1e-8 && (std - 1.0).abs() <= 1e-6);
        let (train, test) = load_mnist_split(&img, &lbl, 18, 12, 2).unwrap();
        assert_eq!((train.len(), test.len()), (18, 12));
        assert_eq!(train.norm_stats, test.norm_stats);
        assert!(load_mnist_idx(&img, &lbl, 31, 1).is_err());
    }

    #[test]
    fn pooling_averages_blocks() {
        let raw = tiny_idx(3);
        let ds = raw.to_dataset(&[0, 1, 2], 0).unwrap();
        let pooled = ds.downsample_images(4, 2).unwrap();
        assert_eq!(pooled.dim(), 4);
        let (mean, std) = global_moments(&pooled.inputs);
        assert!(mean.abs() <= 1e-8 && (std - 1.0).abs() <= 1e-6);
        assert!(ds.downsample_images(4, 3).is_err());
    }

    #[test]
    fn csv_rows_hold_label_then_features() {
        let ds = gen_blobs(2, 3, 2, 1.0, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("blobs.csv");
        ds.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let first: Vec<f64> = text.lines().next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first.len(), 4);
        assert_eq!(first[0], 0.0);
        assert_eq!(first[1], ds.inputs[[0, 0]]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn normalization_is_idempotent(k in 2usize..5, d in 1usize..8, n in 1usize..20, seed in 0u64..1000) {
            let ds = gen_blobs(k, d, n, 2.0, seed).unwrap();
            let mut again = ds.clone();
            again.normalize();
            let worst = ds.inputs.iter().zip(again.inputs.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(worst <= 1e-10);
            prop_assert_eq!(ds.class_histogram(), vec![n; k]);
        }
    }
}
