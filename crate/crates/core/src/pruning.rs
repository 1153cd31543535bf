//! Unreliable edge pruning.
//!
//! Each edge is scored by the joint entropy of its two endpoint predictions,
//! taken as the entropy of their equal-weight mixture `H((p + q) / 2)`. That
//! score equals the shared entropy when the two predictions agree and grows
//! with their discrepancy. Edges scoring above the `m`-th percentile of the
//! batch are dropped. Masks are plain booleans: they are rebuilt from student
//! predictions every step and never carry gradient.

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::relations::{EdgeKind, EdgeTensor, LogitBatch};
use crate::tensor::Tensor;

/// Boolean retention matrix over the leading two axes of an edge tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    pub kind: EdgeKind,
    side: usize,
    keep: Vec<bool>,
    /// The percentile `m` in `(0, 100]` the mask was cut at.
    pub percentile_m: f64,
    /// The realized cutoff `P_m`; edges with a score above it were pruned.
    pub threshold_value: f64,
}

impl EdgeMask {
    /// A mask that keeps every edge of an `side x side` edge grid.
    pub fn keep_all(kind: EdgeKind, side: usize) -> Self {
        EdgeMask {
            kind,
            side,
            keep: vec![true; side * side],
            percentile_m: 100.0,
            threshold_value: f64::INFINITY,
        }
    }

    /// A mask built from explicit row-major retention flags.
    pub fn from_flags(kind: EdgeKind, side: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != side * side {
            return Err(Error::shape(
                "edge_mask",
                format!("{} flags for a {side}x{side} grid", keep.len()),
            ));
        }
        Ok(EdgeMask {
            kind,
            side,
            keep,
            percentile_m: f64::NAN,
            threshold_value: f64::NAN,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn keep(&self, i: usize, j: usize) -> bool {
        self.keep[i * self.side + j]
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn total(&self) -> usize {
        self.keep.len()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept_count() as f64 / self.total() as f64
    }

    /// `[side, side]` tensor of ones (kept) and zeros (pruned).
    pub fn to_tensor(&self) -> Tensor {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.side, self.side], data).expect("mask shape")
    }

    /// Ones and zeros broadcast over a trailing fiber axis of length `len`.
    pub(crate) fn expanded(&self, len: usize) -> Tensor {
        let data = self
            .keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, len))
            .collect();
        Tensor::new(vec![self.side, self.side, len], data).expect("mask shape")
    }
}

/// Pairwise mixture entropies between virtual-view and real-view vertices,
/// laid out like the matching edge tensor: `[B, B]` for ISV (`[i, j]` pairs
/// virtual sample `i` with real sample `j`) and `[C, C]` for ICV.
///
/// For ICV the class columns are first turned into distributions with a
/// softmax over the batch axis.
pub fn joint_entropy_matrix(batch: &LogitBatch, kind: EdgeKind) -> Result<Tensor> {
    if !batch.is_softened() {
        return Err(Error::Input(
            "joint entropy needs softened (probability) predictions".into(),
        ));
    }
    let (real, virt) = match kind {
        EdgeKind::InterSampleVirtual => (batch.real().clone(), batch.virtual_view().clone()),
        EdgeKind::InterClassVirtual => (
            autodiff::softmax(&batch.real().transpose()?, 1, 1.0)?,
            autodiff::softmax(&batch.virtual_view().transpose()?, 1, 1.0)?,
        ),
        other => {
            return Err(Error::Usage(format!(
                "joint entropy is defined for cross-view edges, not {}",
                other.short_name()
            )))
        }
    };
    let (n, k) = (real.shape()[0], real.shape()[1]);
    let mut mix = Vec::with_capacity(n * n * k);
    for i in 0..n {
        let v = virt.row(i);
        for j in 0..n {
            mix.extend(real.row(j).iter().zip(v).map(|(a, b)| 0.5 * (a + b)));
        }
    }
    autodiff::entropy(&Tensor::new(vec![n, n, k], mix)?, 2)
}

fn check_percentile(m: f64) -> Result<()> {
    if !(m > 0.0 && m <= 100.0) {
        return Err(Error::Parameter(format!("percentile must lie in (0, 100], got {m}")));
    }
    Ok(())
}

/// Nearest-rank percentile: the `ceil(m/100 * N)`-th smallest value (1-based).
pub fn nearest_rank_percentile(values: &[f64], m: f64) -> Result<f64> {
    check_percentile(m)?;
    if values.is_empty() {
        return Err(Error::Input("percentile of an empty set".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((m * n as f64) / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Keeps every edge whose joint entropy is at most the `m`-th percentile.
/// Ties at the cutoff are all kept.
pub fn uep_mask(je: &Tensor, kind: EdgeKind, m: f64) -> Result<EdgeMask> {
    check_percentile(m)?;
    let side = match je.shape() {
        [a, b] if a == b => *a,
        s => return Err(Error::shape("uep_mask", format!("expected square matrix, got {s:?}"))),
    };
    let threshold = nearest_rank_percentile(je.data(), m)?;
    let keep = je.data().iter().map(|&v| v <= threshold).collect();
    Ok(EdgeMask {
        kind,
        side,
        keep,
        percentile_m: m,
        threshold_value: threshold,
    })
}

fn check_mask(kind: EdgeKind, shape: &[usize], mask: &EdgeMask) -> Result<usize> {
    if kind != mask.kind {
        return Err(Error::Usage(format!(
            "mask for {} applied to {} edges",
            mask.kind.short_name(),
            kind.short_name()
        )));
    }
    match shape {
        [a, b, len] if *a == mask.side && *b == mask.side => Ok(*len),
        s => Err(Error::shape(
            "apply_mask",
            format!("edges {s:?} vs mask side {}", mask.side),
        )),
    }
}

/// Zeroes every pruned fiber of a materialized edge tensor.
pub fn apply_mask(edges: &EdgeTensor, mask: &EdgeMask) -> Result<EdgeTensor> {
    let len = check_mask(edges.kind, edges.values.shape(), mask)?;
    let m = mask.expanded(len);
    let data = edges.values.data().iter().zip(m.data()).map(|(v, k)| v * k).collect();
    Ok(EdgeTensor {
        kind: edges.kind,
        values: Tensor::new(edges.values.shape().to_vec(), data)?,
        norm_axis: edges.norm_axis,
    })
}

/// Tape version of [`apply_mask`]: pruned fibers are multiplied by a constant
/// zero, so they pass no gradient.
pub fn mask_edges(tape: &mut Tape, edges: Var, kind: EdgeKind, mask: &EdgeMask) -> Result<Var> {
    let len = check_mask(kind, tape.shape(edges), mask)?;
    let m = tape.constant(mask.expanded(len));
    tape.mul(edges, m)
}
