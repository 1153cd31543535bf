//! Affinity edge tensors over a batch of predictions.
//!
//! Every edge is the unit-normalized difference between two prediction
//! vectors. Inter-sample edges compare rows (samples) and keep the class axis
//! as the edge feature; inter-class edges compare columns (classes) and keep
//! the batch axis. The cross-view variants only ever connect a real-view
//! vertex to a virtual-view vertex:
//!
//! * `ISV[i, j, :] = normalize(real[j, :] - virtual[i, :])`, shape `[B, B, C]`
//! * `ICV[p, q, :] = normalize(real[:, q] - virtual[:, p])`, shape `[C, C, B]`
//!
//! Real-real and virtual-virtual edges are never materialized, and the
//! same-index real/virtual edge is kept.

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fibers with a norm below this map to the zero vector.
pub const NORM_EPS: f64 = 1e-12;

const MAX_ORACLE_DIM: usize = 16;
const SOFTENED_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EdgeKind {
    /// Inter-sample, single view: `[B, B, C]`.
    InterSample,
    /// Inter-class, single view: `[C, C, B]`.
    InterClass,
    /// Inter-sample real-to-virtual: `[B, B, C]`.
    InterSampleVirtual,
    /// Inter-class real-to-virtual: `[C, C, B]`.
    InterClassVirtual,
}

impl EdgeKind {
    pub fn is_class_wise(self) -> bool {
        matches!(self, EdgeKind::InterClass | EdgeKind::InterClassVirtual)
    }

    pub fn short_name(self) -> &'static str {
        match self {
            EdgeKind::InterSample => "IS",
            EdgeKind::InterClass => "IC",
            EdgeKind::InterSampleVirtual => "ISV",
            EdgeKind::InterClassVirtual => "ICV",
        }
    }
}

/// Real-view and virtual-view predictions of one model on one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    real: Tensor,
    virtual_view: Tensor,
    softened: bool,
}

impl LogitBatch {
    /// Wraps raw logits.
    pub fn new(real: Tensor, virtual_view: Tensor) -> Result<Self> {
        if real.rank() != 2 || real.shape() != virtual_view.shape() {
            return Err(Error::shape(
                "logit_batch",
                format!("real {:?} vs virtual {:?}", real.shape(), virtual_view.shape()),
            ));
        }
        Ok(LogitBatch {
            real,
            virtual_view,
            softened: false,
        })
    }

    /// Wraps probability rows, checking that each row sums to one.
    pub fn from_probabilities(real: Tensor, virtual_view: Tensor) -> Result<Self> {
        let mut batch = Self::new(real, virtual_view)?;
        for t in [&batch.real, &batch.virtual_view] {
            for r in 0..t.shape()[0] {
                let s: f64 = t.row(r).iter().sum();
                if (s - 1.0).abs() > SOFTENED_TOL || t.row(r).iter().any(|&v| v < -SOFTENED_TOL) {
                    return Err(Error::Input(format!("row {r} is not a distribution (sum {s})")));
                }
            }
        }
        batch.softened = true;
        Ok(batch)
    }

    /// Row-wise `softmax(z / tau)` of both views.
    pub fn soften(&self, tau: f64) -> Result<Self> {
        if self.softened {
            return Err(Error::Usage("batch is already softened".into()));
        }
        Ok(LogitBatch {
            real: autodiff::softmax(&self.real, 1, tau)?,
            virtual_view: autodiff::softmax(&self.virtual_view, 1, tau)?,
            softened: true,
        })
    }

    pub fn real(&self) -> &Tensor {
        &self.real
    }

    pub fn virtual_view(&self) -> &Tensor {
        &self.virtual_view
    }

    pub fn is_softened(&self) -> bool {
        self.softened
    }

    pub fn batch_size(&self) -> usize {
        self.real.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.real.shape()[1]
    }
}

/// A materialized edge tensor; fibers run along `norm_axis` (always the last).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeTensor {
    pub kind: EdgeKind,
    pub values: Tensor,
    pub norm_axis: usize,
}

impl EdgeTensor {
    fn new(kind: EdgeKind, values: Tensor) -> Self {
        EdgeTensor {
            kind,
            values,
            norm_axis: 2,
        }
    }

    /// The fiber at leading index `(i, j)`.
    pub fn fiber(&self, i: usize, j: usize) -> &[f64] {
        let s = self.values.shape();
        let start = (i * s[1] + j) * s[2];
        &self.values.data()[start..start + s[2]]
    }
}

fn rank2(op: &'static str, tape: &Tape, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected [B,C], got {s:?}"))),
    }
}

/// Differentiable inter-sample edges of a `[B, C]` prediction matrix.
pub fn inter_sample_edges(tape: &mut Tape, z: Var) -> Result<Var> {
    let (b, _) = rank2("inter_sample_edges", tape, z)?;
    if b < 2 {
        return Err(Error::Input("inter-sample edges need at least 2 samples".into()));
    }
    let diff = tape.pairwise_sub(z, z)?;
    tape.l2_normalize(diff, 2, NORM_EPS)
}

/// Differentiable inter-class edges of a `[B, C]` prediction matrix.
pub fn inter_class_edges(tape: &mut Tape, z: Var) -> Result<Var> {
    let (_, c) = rank2("inter_class_edges", tape, z)?;
    if c < 2 {
        return Err(Error::Input("inter-class edges need at least 2 classes".into()));
    }
    let cols = tape.transpose(z)?;
    let diff = tape.pairwise_sub(cols, cols)?;
    tape.l2_normalize(diff, 2, NORM_EPS)
}

/// Differentiable real-to-virtual inter-sample edges.
pub fn isv_edges(tape: &mut Tape, real: Var, virtual_view: Var) -> Result<Var> {
    rank2("isv_edges", tape, real)?;
    if tape.shape(real) != tape.shape(virtual_view) {
        return Err(Error::shape("isv_edges", "real and virtual views differ in shape"));
    }
    // pairwise_sub(real, virtual)[j, i] = real[j] - virtual[i]
    let diff = tape.pairwise_sub(real, virtual_view)?;
    let diff = tape.permute(diff, &[1, 0, 2])?;
    tape.l2_normalize(diff, 2, NORM_EPS)
}

/// Differentiable real-to-virtual inter-class edges, canonical `[C, C, B]`.
pub fn icv_edges(tape: &mut Tape, real: Var, virtual_view: Var) -> Result<Var> {
    let (_, c) = rank2("icv_edges", tape, real)?;
    if tape.shape(real) != tape.shape(virtual_view) {
        return Err(Error::shape("icv_edges", "real and virtual views differ in shape"));
    }
    if c < 2 {
        return Err(Error::Input("inter-class edges need at least 2 classes".into()));
    }
    let rc = tape.transpose(real)?;
    let vc = tape.transpose(virtual_view)?;
    let diff = tape.pairwise_sub(rc, vc)?;
    let diff = tape.permute(diff, &[1, 0, 2])?;
    tape.l2_normalize(diff, 2, NORM_EPS)
}

fn materialize(kind: EdgeKind, build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<EdgeTensor> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(EdgeTensor::new(kind, tape.value(v).clone()))
}

pub fn build_inter_sample_edges(z: &Tensor) -> Result<EdgeTensor> {
    materialize(EdgeKind::InterSample, |t| {
        let v = t.constant(z.clone());
        inter_sample_edges(t, v)
    })
}

pub fn build_inter_class_edges(z: &Tensor) -> Result<EdgeTensor> {
    materialize(EdgeKind::InterClass, |t| {
        let v = t.constant(z.clone());
        inter_class_edges(t, v)
    })
}

pub fn build_isv_edges(batch: &LogitBatch) -> Result<EdgeTensor> {
    materialize(EdgeKind::InterSampleVirtual, |t| {
        let r = t.constant(batch.real.clone());
        let v = t.constant(batch.virtual_view.clone());
        isv_edges(t, r, v)
    })
}

pub fn build_icv_edges(batch: &LogitBatch) -> Result<EdgeTensor> {
    materialize(EdgeKind::InterClassVirtual, |t| {
        let r = t.constant(batch.real.clone());
        let v = t.constant(batch.virtual_view.clone());
        icv_edges(t, r, v)
    })
}

/// Builds any edge kind from a batch; single-view kinds use the real view.
pub fn build_edges(batch: &LogitBatch, kind: EdgeKind) -> Result<EdgeTensor> {
    match kind {
        EdgeKind::InterSample => build_inter_sample_edges(&batch.real),
        EdgeKind::InterClass => build_inter_class_edges(&batch.real),
        EdgeKind::InterSampleVirtual => build_isv_edges(batch),
        EdgeKind::InterClassVirtual => build_icv_edges(batch),
    }
}

/// Reference edge construction by explicit scalar loops, for oracle testing.
///
/// Single-view kinds read the real view. Limited to `B, C <= 16`.
pub fn brute_force_edges(batch: &LogitBatch, kind: EdgeKind) -> Result<EdgeTensor> {
    let (b, c) = (batch.batch_size(), batch.classes());
    if b > MAX_ORACLE_DIM || c > MAX_ORACLE_DIM {
        return Err(Error::Usage(format!(
            "oracle limited to B, C <= {MAX_ORACLE_DIM}, got B={b}, C={c}"
        )));
    }
    let real = &batch.real;
    let virt = &batch.virtual_view;
    match kind {
        EdgeKind::InterSample if b < 2 => return Err(Error::Input("need at least 2 samples".into())),
        EdgeKind::InterClass | EdgeKind::InterClassVirtual if c < 2 => {
            return Err(Error::Input("need at least 2 classes".into()))
        }
        _ => {}
    }
    // (vertex count, fiber length, fiber(i, j, k) before normalization)
    let (n, len): (usize, usize) = if kind.is_class_wise() { (c, b) } else { (b, c) };
    let diff = |i: usize, j: usize, k: usize| -> f64 {
        match kind {
            EdgeKind::InterSample => real.at(&[i, k]) - real.at(&[j, k]),
            EdgeKind::InterClass => real.at(&[k, i]) - real.at(&[k, j]),
            EdgeKind::InterSampleVirtual => real.at(&[j, k]) - virt.at(&[i, k]),
            EdgeKind::InterClassVirtual => real.at(&[k, j]) - virt.at(&[k, i]),
        }
    };
    let mut out = Tensor::zeros(&[n, n, len]);
    for i in 0..n {
        for j in 0..n {
            let mut sq = 0.0;
            for k in 0..len {
                let d = diff(i, j, k);
                sq += d * d;
            }
            let norm = sq.sqrt();
            if norm < NORM_EPS {
                continue;
            }
            for k in 0..len {
                out.set(&[i, j, k], diff(i, j, k) / norm);
            }
        }
    }
    Ok(EdgeTensor::new(kind, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const S: f64 = std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn two_sample_inter_sample_example() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = build_inter_sample_edges(&z).unwrap();
        assert_eq!(e.values.shape(), &[2, 2, 2]);
        assert!((e.fiber(0, 1)[0] - S).abs() < 1e-15 && (e.fiber(0, 1)[1] + S).abs() < 1e-15);
        assert_eq!(e.fiber(1, 0), &[-e.fiber(0, 1)[0], -e.fiber(0, 1)[1]]);
        assert_eq!(e.fiber(0, 0), &[0.0, 0.0]);
        assert_eq!(e.fiber(1, 1), &[0.0, 0.0]);
    }

    #[test]
    fn identical_rows_give_zero_fiber() {
        let z = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.5, 0.5], vec![0.2, 0.8]]).unwrap();
        let e = build_inter_sample_edges(&z).unwrap();
        assert_eq!(e.fiber(0, 2), &[0.0, 0.0]);
    }

    #[test]
    fn inter_class_is_transposed_inter_sample() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let is = build_inter_sample_edges(&z).unwrap();
        let ic = build_inter_class_edges(&z.transpose().unwrap()).unwrap();
        assert_eq!(is.values, ic.values);
    }

    #[test]
    fn size_errors() {
        let one = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(build_inter_sample_edges(&one), Err(Error::Input(_))));
        let col = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(build_inter_class_edges(&col), Err(Error::Input(_))));
        let b = LogitBatch::new(col.clone(), col).unwrap();
        assert!(matches!(build_icv_edges(&b), Err(Error::Input(_))));
    }

    #[test]
    fn single_sample_isv() {
        let b = LogitBatch::new(
            Tensor::from_rows(&[vec![3.0, 1.0]]).unwrap(),
            Tensor::from_rows(&[vec![0.0, 5.0]]).unwrap(),
        )
        .unwrap();
        let e = build_isv_edges(&b).unwrap();
        assert_eq!(e.values.shape(), &[1, 1, 2]);
        assert!((e.fiber(0, 0)[0] - 0.6).abs() < 1e-15);
        assert!((e.fiber(0, 0)[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn coinciding_views() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::randn(&[4, 3], &mut rng);
        let b = LogitBatch::new(z.clone(), z.clone()).unwrap();
        let isv = build_isv_edges(&b).unwrap();
        let is = build_inter_sample_edges(&z).unwrap();
        for i in 0..4 {
            assert!(isv.fiber(i, i).iter().all(|&v| v == 0.0));
            for j in 0..4 {
                assert_eq!(isv.fiber(i, j), is.fiber(j, i));
            }
        }
        let icv = build_icv_edges(&b).unwrap();
        for p in 0..3 {
            assert!(icv.fiber(p, p).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn icv_two_by_two_hand_instance() {
        // real columns r0=[1,0], r1=[0,2]; virtual columns v0=[0,0], v1=[1,1]
        let real = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let virt = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let b = LogitBatch::new(real, virt).unwrap();
        let e = build_icv_edges(&b).unwrap();
        // [p=0,q=1] = r1 - v0 = [0,2] -> [0,1]
        assert_eq!(e.fiber(0, 1), &[0.0, 1.0]);
        // [p=1,q=0] = r0 - v1 = [0,-1] -> [0,-1]
        assert_eq!(e.fiber(1, 0), &[0.0, -1.0]);
        // [p=1,q=1] = r1 - v1 = [-1,1]
        assert!((e.fiber(1, 1)[0] + S).abs() < 1e-15 && (e.fiber(1, 1)[1] - S).abs() < 1e-15);
        // [p=0,q=0] = r0 - v0 = [1,0]
        assert_eq!(e.fiber(0, 0), &[1.0, 0.0]);
        let oracle = brute_force_edges(&b, EdgeKind::InterClassVirtual).unwrap();
        assert!(oracle.values.max_abs_diff(&e.values).unwrap() < 1e-15);
    }

    #[test]
    fn oracle_rejects_large_batches() {
        let z = Tensor::zeros(&[17, 3]);
        let b = LogitBatch::new(z.clone(), z).unwrap();
        assert!(matches!(
            brute_force_edges(&b, EdgeKind::InterSample),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn softened_batch_validation() {
        let p = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
        assert!(LogitBatch::from_probabilities(p.clone(), p.clone()).is_ok());
        let bad = Tensor::from_rows(&[vec![0.5, 0.6], vec![0.9, 0.1]]).unwrap();
        assert!(LogitBatch::from_probabilities(bad, p).is_err());
    }
}
