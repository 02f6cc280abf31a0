//! Datasets (MNIST IDX files, synthetic Gaussian blobs) and federated
//! client partitioning.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::error::{FlashError, Result};
use crate::mask::apportion;
use crate::tensor::{Scalar, Tensor};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Split {
    Train,
    Test,
}

/// Labelled images stored as `N × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(FlashError::Shape(format!("images must be N×C×H×W, got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(FlashError::Shape(format!(
                "{} images but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(FlashError::Config(format!("label {bad} outside [0, {num_classes})")));
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

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copies the selected samples into a batch tensor.
    pub fn gather<T: Scalar>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let per = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend(src[i * per..(i + 1) * per].iter().map(|&v| T::from_f64(v as f64)));
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::from_vec(&[idx.len(), c, h, w], data).expect("gathered shape is consistent"),
            labels,
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let io_err = |source| FlashError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    let file = File::open(path).map_err(io_err)?;
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(file).read_to_end(&mut bytes).map_err(io_err)?;
    } else {
        let mut file = file;
        file.read_to_end(&mut bytes).map_err(io_err)?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| FlashError::Format {
            offset: offset as u64,
            msg: "file ends inside the header".into(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(bytes, 0)?;
    if magic != expected {
        return Err(FlashError::Format {
            offset: 0,
            msg: format!("magic {magic:#010x}, expected {expected:#010x}"),
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    bytes.get(start..start + len).ok_or_else(|| FlashError::Format {
        offset: bytes.len() as u64,
        msg: format!("truncated: header announces {len} payload bytes from offset {start}"),
    })
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, n * rows * cols)?;
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    check_magic(bytes, LABEL_MAGIC)?;
    let n = be_u32(bytes, 4)? as usize;
    payload(bytes, 8, n)
}

/// Loads an MNIST image/label file pair (optionally gzip-compressed, chosen
/// by a `.gz` extension). Pixels are scaled by 1/255.
pub fn load_mnist_idx(image_path: &Path, label_path: &Path, split: Split) -> Result<Dataset> {
    let image_bytes = read_all(image_path)?;
    let label_bytes = read_all(label_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes)?;
    let raw_labels = parse_idx_labels(&label_bytes)?;
    if raw_labels.len() != n {
        return Err(FlashError::Format {
            offset: 4,
            msg: format!("{} labels for {n} images", raw_labels.len()),
        });
    }
    if let Some(pos) = raw_labels.iter().position(|&y| y > 9) {
        return Err(FlashError::Format {
            offset: 8 + pos as u64,
            msg: format!("label {} is not a digit", raw_labels[pos]),
        });
    }
    let images = Tensor::from_vec(&[n, 1, rows, cols], pixels.iter().map(|&p| p as f32 / 255.0).collect())?;
    Dataset::new(images, raw_labels.iter().map(|&y| y as usize).collect(), 10, split)
}

fn find_idx_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(FlashError::Io {
        path: dir.join(stem),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (plain or .gz)"),
    })
}

/// Loads the standard train and test files from a directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_mnist_idx(
        &find_idx_file(dir, "train-images-idx3-ubyte")?,
        &find_idx_file(dir, "train-labels-idx1-ubyte")?,
        Split::Train,
    )?;
    let test = load_mnist_idx(
        &find_idx_file(dir, "t10k-images-idx3-ubyte")?,
        &find_idx_file(dir, "t10k-labels-idx1-ubyte")?,
        Split::Test,
    )?;
    Ok((train, test))
}

/// Encodes images as an IDX3 byte stream.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|source| FlashError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Gaussian blobs in `dim` dimensions, stored as `N × 1 × 1 × dim`.
///
/// With `num_classes <= dim` the class means sit on scaled coordinate axes at
/// pairwise distance `separation`; otherwise they lie on random directions at
/// the same radius. Noise is unit-variance per coordinate.
pub fn synth_dataset<R: Rng + ?Sized>(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    split: Split,
    rng: &mut R,
) -> Result<Dataset> {
    if num_classes == 0 || per_class == 0 || dim == 0 {
        return Err(FlashError::EmptyData(format!(
            "synthetic dataset with {num_classes} classes × {per_class} samples × {dim} dims"
        )));
    }
    if !(separation > 0.0) {
        return Err(FlashError::Config(format!("separation must be positive, got {separation}")));
    }
    let radius = separation / std::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            if num_classes <= dim {
                let mut m = vec![0.0; dim];
                m[c] = radius;
                m
            } else {
                let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm * radius).collect()
            }
        })
        .collect();
    let n = num_classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(mean.iter().map(|&m| (m + rng.sample::<f64, _>(StandardNormal)) as f32));
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_vec(&[n, 1, 1, dim], data)?, labels, num_classes, split)
}

/// Disjoint per-client index lists into a training set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(clients: Vec<Vec<usize>>) -> Self {
        Self { clients }
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, i: usize) -> &[usize] {
        &self.clients[i]
    }

    pub fn clients(&self) -> &[Vec<usize>] {
        &self.clients
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(Vec::len).collect()
    }
}

fn client_sizes(n: usize, clients: usize) -> Result<Vec<usize>> {
    if clients == 0 {
        return Err(FlashError::Config("need at least one client".into()));
    }
    if n < clients {
        return Err(FlashError::EmptyData(format!("{n} samples cannot cover {clients} clients")));
    }
    Ok((0..clients).map(|i| n / clients + usize::from(i < n % clients)).collect())
}

fn dirichlet<R: Rng + ?Sized>(concentration: &[f64], rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = concentration
        .iter()
        .map(|&a| {
            if a > 0.0 {
                Gamma::new(a, 1.0).expect("positive shape").sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        return draws.into_iter().map(|g| g / sum).collect();
    }
    // every gamma draw underflowed: put all mass on one class, weighted by concentration
    let total: f64 = concentration.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut out = vec![0.0; concentration.len()];
    for (j, &a) in concentration.iter().enumerate() {
        if a > 0.0 && (u < a || j == concentration.len() - 1) {
            out[j] = 1.0;
            return out;
        }
        u -= a;
    }
    out
}

/// Name of the label-split scheme used by [`lda_partition`], for run metadata.
pub const LDA_SCHEME: &str = "per-client Dirichlet(alpha * C * q), equal shard sizes";

/// Latent-Dirichlet-allocation split of `labels` over `clients` clients.
///
/// Every client gets ⌊N/C⌋ samples (the remainder goes round-robin to the
/// first clients) and draws its class mix from a Dirichlet whose per-class
/// concentration is `alpha · num_classes · q_j`, `q` being the global label
/// distribution; for balanced labels that is the symmetric Dirichlet(alpha).
/// Classes requested beyond their supply are scaled back proportionally over
/// clients, and the freed slots are refilled from the globally most abundant
/// remaining class.
pub fn lda_partition<R: Rng + ?Sized>(
    labels: &[usize],
    num_classes: usize,
    clients: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Partition> {
    if !(alpha > 0.0) {
        return Err(FlashError::Config(format!("alpha must be positive, got {alpha}")));
    }
    let sizes = client_sizes(labels.len(), clients)?;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(FlashError::Config(format!("label {y} outside [0, {num_classes})")));
        }
        pools[y].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(rng);
    }
    let supply: Vec<usize> = pools.iter().map(Vec::len).collect();
    let n = labels.len() as f64;
    let concentration: Vec<f64> = supply
        .iter()
        .map(|&s| alpha * num_classes as f64 * s as f64 / n)
        .collect();

    let mut counts: Vec<Vec<usize>> = sizes
        .iter()
        .map(|&size| apportion(size, &dirichlet(&concentration, rng)))
        .collect();

    for j in 0..num_classes {
        let demand: usize = counts.iter().map(|c| c[j]).sum();
        if demand > supply[j] {
            let weights: Vec<f64> = counts.iter().map(|c| c[j] as f64 / demand as f64).collect();
            for (c, v) in counts.iter_mut().zip(apportion(supply[j], &weights)) {
                c[j] = v;
            }
        }
    }
    let mut remaining: Vec<usize> = (0..num_classes)
        .map(|j| supply[j] - counts.iter().map(|c| c[j]).sum::<usize>())
        .collect();
    let mut reassigned = 0;
    for (c, &size) in counts.iter_mut().zip(&sizes) {
        let mut deficit = size - c.iter().sum::<usize>();
        while deficit > 0 {
            let j = (0..num_classes)
                .max_by(|&a, &b| remaining[a].cmp(&remaining[b]).then(b.cmp(&a)))
                .expect("at least one class");
            let take = deficit.min(remaining[j]);
            debug_assert!(take > 0, "total supply covers total demand");
            c[j] += take;
            remaining[j] -= take;
            deficit -= take;
            reassigned += take;
        }
    }
    if reassigned > 0 {
        log::info!("lda partition: {reassigned} samples reassigned from exhausted classes");
    }

    let mut cursor = vec![0; num_classes];
    let parts = counts
        .iter()
        .map(|c| {
            let mut idx = Vec::with_capacity(c.iter().sum());
            for (j, &cnt) in c.iter().enumerate() {
                idx.extend_from_slice(&pools[j][cursor[j]..cursor[j] + cnt]);
                cursor[j] += cnt;
            }
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(Partition::new(parts))
}

/// Uniformly shuffled equal-size split.
pub fn iid_partition<R: Rng + ?Sized>(n: usize, clients: usize, rng: &mut R) -> Result<Partition> {
    let sizes = client_sizes(n, clients)?;
    let mut all: Vec<usize> = (0..n).collect();
    all.shuffle(rng);
    let mut start = 0;
    let parts = sizes
        .iter()
        .map(|&s| {
            let mut idx = all[start..start + s].to_vec();
            start += s;
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(Partition::new(parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    #[test]
    fn idx_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 37 % 256) as u8).collect();
        let labels = vec![3u8, 0, 9];
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        write_bytes(&ip, &encode_idx_images(4, 5, &pixels)).unwrap();
        write_bytes(&lp, &encode_idx_labels(&labels)).unwrap();
        let ds = load_mnist_idx(&ip, &lp, Split::Test).unwrap();
        assert_eq!(ds.images().shape(), &[3, 1, 4, 5]);
        assert_eq!(ds.labels(), &[3, 0, 9]);
        for (&v, &p) in ds.images().data().iter().zip(&pixels) {
            assert_eq!(v.to_bits(), (p as f32 / 255.0).to_bits());
        }
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::write::GzEncoder;
        let dir = tempfile::tempdir().unwrap();
        let gz = |bytes: &[u8]| {
            let mut e = GzEncoder::new(Vec::new(), flate2::Compression::fast());
            e.write_all(bytes).unwrap();
            e.finish().unwrap()
        };
        let ip = dir.path().join("img.gz");
        let lp = dir.path().join("lbl.gz");
        write_bytes(&ip, &gz(&encode_idx_images(2, 2, &[0, 255, 10, 20]))).unwrap();
        write_bytes(&lp, &gz(&encode_idx_labels(&[7]))).unwrap();
        let ds = load_mnist_idx(&ip, &lp, Split::Train).unwrap();
        assert_eq!(ds.labels(), &[7]);
        assert_eq!(ds.images().data()[1], 1.0);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let mut bytes = encode_idx_images(2, 2, &[1, 2, 3, 4, 5, 6, 7, 8]);
        bytes.truncate(bytes.len() - 3);
        match parse_idx_images(&bytes) {
            Err(FlashError::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_images(&bytes[..10]), Err(FlashError::Format { offset: 8, .. })));
        let labels = encode_idx_labels(&[1, 2]);
        assert!(matches!(parse_idx_images(&labels), Err(FlashError::Format { offset: 0, .. })));
    }

    #[test]
    fn synth_errors_and_determinism() {
        assert!(matches!(
            synth_dataset(2, 0, 4, 1.0, Split::Train, &mut seeded_rng(0)),
            Err(FlashError::EmptyData(_))
        ));
        let a = synth_dataset(3, 5, 4, 2.0, Split::Train, &mut seeded_rng(5)).unwrap();
        let b = synth_dataset(3, 5, 4, 2.0, Split::Train, &mut seeded_rng(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![5, 5, 5]);
        let c = synth_dataset(5, 2, 2, 2.0, Split::Train, &mut seeded_rng(5)).unwrap();
        assert_eq!(c.sample_shape(), [1, 1, 2]);
    }

    #[test]
    fn partition_covers_disjointly() {
        let labels: Vec<usize> = (0..1003).map(|i| (i * 7 + i / 13) % 10).collect();
        for alpha in [0.1, 1.0, 1000.0] {
            let p = lda_partition(&labels, 10, 17, alpha, &mut seeded_rng(11)).unwrap();
            let mut seen = vec![false; labels.len()];
            for c in p.clients() {
                assert!(!c.is_empty());
                for &i in c {
                    assert!(!seen[i], "sample {i} assigned twice");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
            let sizes = p.sizes();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn partition_errors() {
        assert!(lda_partition(&[0, 1], 2, 3, 1.0, &mut seeded_rng(0)).is_err());
        assert!(lda_partition(&[0, 1], 2, 1, 0.0, &mut seeded_rng(0)).is_err());
        assert!(lda_partition(&[0, 1], 2, 0, 1.0, &mut seeded_rng(0)).is_err());
    }

    #[test]
    fn iid_partition_sizes() {
        let p = iid_partition(10, 3, &mut seeded_rng(1)).unwrap();
        assert_eq!(p.sizes(), vec![4, 3, 3]);
    }
}
