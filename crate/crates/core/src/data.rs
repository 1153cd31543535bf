//! Seeded synthetic classification datasets and their file format.
//!
//! Dataset file layout (little-endian):
//!
//! ```text
//! b"VRMDATA1"
//! u64 samples, u64 input dim, u64 classes
//! u64 train count, u64 train indices...
//! u64 val count, u64 val indices...
//! f64 inputs, row-major [samples, dim]
//! u32 labels [samples]
//! ```

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{read_f64s, read_u32, read_u64};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"VRMDATA1";

/// Fraction of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Isotropic Gaussian clusters around seeded centers.
    Blobs,
    /// Interleaved 2-D spiral arms lifted linearly into the input space.
    Spirals,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "spirals" => Ok(DatasetKind::Spirals),
            other => Err(Error::Parameter(format!("unknown dataset kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::Spirals => "spirals",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, train: Vec<usize>, val: Vec<usize>) -> Result<Self> {
        let n = match inputs.shape() {
            [n, _] => *n,
            s => return Err(Error::shape("dataset", format!("inputs must be [N, D], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::Input(format!("{} labels for {n} samples", labels.len())));
        }
        if classes < 2 {
            return Err(Error::Parameter("need ≥ 2 classes".into()));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Input(format!("label {l} outside [0, {classes})")));
        }
        let mut seen = vec![false; n];
        for &i in train.iter().chain(&val) {
            if i >= n {
                return Err(Error::Input(format!("split index {i} outside [0, {n})")));
            }
            if seen[i] {
                return Err(Error::Input(format!("sample {i} appears twice across splits")));
            }
            seen[i] = true;
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            train,
            val,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val
    }

    /// Inputs and labels for a subset of rows.
    pub fn subset(&self, rows: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.inputs.select_rows(rows)?, rows.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        for v in [self.len(), self.dim(), self.classes] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for split in [&self.train, &self.val] {
            w.write_all(&(split.len() as u64).to_le_bytes())?;
            for &i in split.iter() {
                w.write_all(&(i as u64).to_le_bytes())?;
            }
        }
        for v in self.inputs.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &l in &self.labels {
            w.write_all(&(l as u32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a VRMDATA1 dataset".into()));
        }
        let n = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let classes = read_u64(&mut r)? as usize;
        let mut splits = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = read_u64(&mut r)? as usize;
            if count > n {
                return Err(Error::Format(format!("split of {count} exceeds {n} samples")));
            }
            splits.push((0..count).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
        }
        let inputs = Tensor::new(vec![n, dim], read_f64s(&mut r, n * dim)?)?;
        let labels = (0..n).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after dataset body".into()));
        }
        let val = splits.pop().expect("two splits");
        let train = splits.pop().expect("two splits");
        Dataset::new(inputs, labels, classes, train, val).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn make_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Parameter("need ≥ 2 classes".into()));
    }
    if spec.per_class < 10 {
        return Err(Error::Parameter(format!("need ≥ 10 samples per class, got {}", spec.per_class)));
    }
    if spec.dim == 0 {
        return Err(Error::Parameter("input dimension must be positive".into()));
    }
    if spec.kind == DatasetKind::Spirals && spec.dim < 2 {
        return Err(Error::Parameter("spirals need an input dimension of at least 2".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Parameter(format!("noise must be a finite non-negative number, got {}", spec.noise)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    match spec.kind {
        DatasetKind::Blobs => {
            let centers = Tensor::randn(&[spec.classes, spec.dim], &mut rng).map(|v| 3.0 * v);
            for class in 0..spec.classes {
                for _ in 0..spec.per_class {
                    for &c in centers.row(class) {
                        let e: f64 = rng.sample(StandardNormal);
                        data.push(c + spec.noise * e);
                    }
                    labels.push(class);
                }
            }
        }
        DatasetKind::Spirals => {
            let lift = Tensor::randn(&[2, spec.dim], &mut rng);
            for class in 0..spec.classes {
                let phase = 2.0 * PI * class as f64 / spec.classes as f64;
                for _ in 0..spec.per_class {
                    let t: f64 = rng.random();
                    let radius = 0.2 + t;
                    let angle = phase + PI * t;
                    let ex: f64 = rng.sample(StandardNormal);
                    let ey: f64 = rng.sample(StandardNormal);
                    let p = [
                        radius * angle.cos() + spec.noise * ex,
                        radius * angle.sin() + spec.noise * ey,
                    ];
                    for d in 0..spec.dim {
                        data.push(p[0] * lift.at(&[0, d]) + p[1] * lift.at(&[1, d]));
                    }
                    labels.push(class);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (TRAIN_FRACTION * n as f64).floor() as usize;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Dataset::new(Tensor::new(vec![n, spec.dim], data)?, labels, spec.classes, train, val)
}
