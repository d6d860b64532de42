//! Datasets: a synthetic fine-grained generator, IDX file I/O, and seeded
//! epoch batching.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngState};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Coarse group of each fine class, indexed by class.
    pub meta_category: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.meta_category.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.input(i));
        }
        Batch {
            inputs: Matrix::from_vec(indices.len(), d, data).expect("consistent widths"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// An owned mini-batch, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.input(i));
        }
        Batch {
            inputs: Matrix::from_vec(indices.len(), d, data).expect("consistent widths"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub meta_categories: usize,
    pub subclasses_per_meta: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub meta_separation: f64,
    pub sub_separation: f64,
    pub pose_states: usize,
    pub pose_noise_scale: f64,
    pub base_noise_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            meta_categories: 4,
            subclasses_per_meta: 5,
            input_dim: 32,
            train_per_class: 30,
            test_per_class: 100,
            meta_separation: 4.0,
            sub_separation: 2.0,
            pose_states: 2,
            pose_noise_scale: 2.5,
            base_noise_scale: 0.3,
        }
    }
}

impl SynthConfig {
    pub fn num_classes(&self) -> usize {
        self.meta_categories * self.subclasses_per_meta
    }

    /// Coordinates per pose subspace.
    pub fn pose_rank(&self) -> usize {
        (self.input_dim / 4).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.meta_categories,
            self.subclasses_per_meta,
            self.input_dim,
            self.train_per_class,
            self.test_per_class,
            self.pose_states,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "synthetic counts must be at least 1: {self:?}"
            )));
        }
        if !(self.meta_separation > 0.0 && self.sub_separation > 0.0) {
            return Err(Error::InvalidArgument(
                "separations must be positive".into(),
            ));
        }
        if !(self.pose_noise_scale >= 0.0 && self.base_noise_scale >= 0.0) {
            return Err(Error::InvalidArgument(
                "noise scales must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Ground truth of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub class_means: Vec<Vec<f64>>,
    /// `pose_axes[class][pose]` lists the coordinates that pose perturbs.
    pub pose_axes: Vec<Vec<Vec<usize>>>,
}

pub fn gen_synthetic(cfg: &SynthConfig, rng: &mut RngState) -> Result<(Dataset, Dataset)> {
    let (train, test, _) = gen_synthetic_with_truth(cfg, rng)?;
    Ok((train, test))
}

/// Every class mean is a meta-category centre plus a subclass offset. Each
/// sample picks a latent pose whose noise lives on a class- and
/// pose-specific coordinate subset, on top of isotropic noise. Train and
/// test draws come from separate substreams.
pub fn gen_synthetic_with_truth(
    cfg: &SynthConfig,
    rng: &mut RngState,
) -> Result<(Dataset, Dataset, SynthTruth)> {
    cfg.validate()?;
    let d = cfg.input_dim;
    let mut structure = rng.fork(0);
    let mut class_means = Vec::with_capacity(cfg.num_classes());
    let mut pose_axes = Vec::with_capacity(cfg.num_classes());
    let mut meta_category = Vec::with_capacity(cfg.num_classes());
    for m in 0..cfg.meta_categories {
        let centre: Vec<f64> = structure
            .unit_vector(d)
            .into_iter()
            .map(|v| v * cfg.meta_separation)
            .collect();
        for _ in 0..cfg.subclasses_per_meta {
            let offset = structure.unit_vector(d);
            class_means.push(
                centre
                    .iter()
                    .zip(&offset)
                    .map(|(c, o)| c + cfg.sub_separation * o)
                    .collect::<Vec<f64>>(),
            );
            let poses = (0..cfg.pose_states)
                .map(|_| {
                    let mut coords: Vec<usize> = (0..d).collect();
                    structure.shuffle(&mut coords);
                    let mut axes = coords[..cfg.pose_rank()].to_vec();
                    axes.sort_unstable();
                    axes
                })
                .collect();
            pose_axes.push(poses);
            meta_category.push(m);
        }
    }
    let truth = SynthTruth {
        class_means,
        pose_axes,
    };
    let draw = |stream: &mut RngState, per_class: usize, name: &str| {
        let n = per_class * cfg.num_classes();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (class, mean) in truth.class_means.iter().enumerate() {
            for _ in 0..per_class {
                let pose = stream.below(cfg.pose_states);
                let mut x = mean.clone();
                for &axis in &truth.pose_axes[class][pose] {
                    x[axis] += cfg.pose_noise_scale * stream.standard_normal();
                }
                for v in x.iter_mut() {
                    *v += cfg.base_noise_scale * stream.standard_normal();
                }
                data.extend_from_slice(&x);
                labels.push(class);
            }
        }
        Dataset {
            inputs: Matrix::from_vec(n, d, data).expect("row-major fill"),
            labels,
            meta_category: meta_category.clone(),
            name: name.to_string(),
        }
    };
    let train = draw(&mut rng.fork(1), cfg.train_per_class, "synthetic-train");
    let test = draw(&mut rng.fork(2), cfg.test_per_class, "synthetic-test");
    Ok((train, test, truth))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    what: String,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::IdxTruncated(self.what.clone()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::IdxMagic { expected, found });
        }
        Ok(())
    }
}

/// Parses an unsigned-byte image tensor (`N × rows × cols`) and its label
/// vector. Pixels are scaled to `[0, 1]` by `1/255`; each label becomes its
/// own meta-category.
pub fn parse_idx(images: &[u8], labels: &[u8], name: &str) -> Result<Dataset> {
    let mut ir = IdxReader {
        what: "images".into(),
        bytes: images,
        pos: 0,
    };
    ir.magic(IDX_IMAGES_MAGIC)?;
    let n = ir.u32()? as usize;
    let rows = ir.u32()? as usize;
    let cols = ir.u32()? as usize;
    let mut lr = IdxReader {
        what: "labels".into(),
        bytes: labels,
        pos: 0,
    };
    lr.magic(IDX_LABELS_MAGIC)?;
    let n_labels = lr.u32()? as usize;
    if n != n_labels {
        return Err(Error::IdxCountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let pixels = ir.take(n * rows * cols)?;
    let label_bytes = lr.take(n)?;
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        inputs: Matrix::from_vec(n, rows * cols, data)?,
        labels,
        meta_category: (0..classes).collect(),
        name: name.to_string(),
    })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_idx(&images, &labels, &name)
}

/// Encodes a dataset whose inputs lie in `[0, 1]` as IDX image and label
/// byte streams with the given image geometry.
pub fn encode_idx(ds: &Dataset, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.input_dim() {
        return Err(Error::DimensionMismatch(format!(
            "{rows}x{cols} images cannot hold inputs of width {}",
            ds.input_dim()
        )));
    }
    let n =
        u32::try_from(ds.len()).map_err(|_| Error::InvalidArgument("too many samples".into()))?;
    let mut images = Vec::with_capacity(16 + ds.inputs.data().len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&n.to_be_bytes());
    images.extend_from_slice(&(rows as u32).to_be_bytes());
    images.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in ds.inputs.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        images.push((v * 255.0).round() as u8);
    }
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&n.to_be_bytes());
    for &l in &ds.labels {
        labels.push(
            u8::try_from(l)
                .map_err(|_| Error::InvalidArgument(format!("label {l} exceeds 255")))?,
        );
    }
    Ok((images, labels))
}

pub fn write_idx(
    ds: &Dataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let (images, labels) = encode_idx(ds, rows, cols)?;
    fs::write(images_path, images)?;
    fs::write(labels_path, labels)?;
    Ok(())
}

/// Index chunks of one seeded epoch. With `drop_last`, a trailing chunk
/// shorter than `batch_size` is discarded.
pub fn epoch_indices(
    n: usize,
    batch_size: usize,
    drop_last: bool,
    rng: &mut RngState,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size {batch_size} exceeds dataset size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

pub fn batch_iter<'a>(
    ds: &'a Dataset,
    batch_size: usize,
    drop_last: bool,
    rng: &mut RngState,
) -> Result<impl Iterator<Item = Batch> + 'a> {
    let chunks = epoch_indices(ds.len(), batch_size, drop_last, rng)?;
    Ok(chunks.into_iter().map(move |c| ds.batch(&c)))
}
