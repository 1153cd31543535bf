//! Reference relation encoders: Gram matrices and third-order angles.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::pruning::EdgeMask;
use crate::relations::{icv_edges, isv_edges, EdgeKind, LogitBatch, NORM_EPS};
use crate::tensor::Tensor;
use crate::vrm_loss::{edge_matching_loss, EdgeMetric, Reduction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelationKind {
    /// Cosine similarity between samples, `[B, B]`.
    GramInterSample,
    /// Cosine similarity between classes, `[C, C]`.
    GramInterClass,
    /// Cosine of the angle at each vertex, `[B, B, B]`.
    Angular,
    /// Unpruned ISV and ICV edges.
    VrmIsvIcv,
}

impl RelationKind {
    pub const ALL: [RelationKind; 4] = [
        RelationKind::GramInterSample,
        RelationKind::GramInterClass,
        RelationKind::Angular,
        RelationKind::VrmIsvIcv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::GramInterSample => "gram_inter_sample",
            RelationKind::GramInterClass => "gram_inter_class",
            RelationKind::Angular => "angular",
            RelationKind::VrmIsvIcv => "vrm_isv_icv",
        }
    }
}

fn dims(tape: &Tape, z: Var) -> Result<(usize, usize)> {
    match tape.shape(z) {
        [b, c] => Ok((*b, *c)),
        s => Err(Error::Usage(format!("relation encoders take [B,C] input, got {s:?}"))),
    }
}

/// Row-normalized `Z Z^T`. Zero rows stay zero.
pub fn gram_inter_sample_on(tape: &mut Tape, z: Var) -> Result<Var> {
    let (b, _) = dims(tape, z)?;
    if b < 2 {
        return Err(Error::Input("inter-sample Gram matrix needs at least 2 samples".into()));
    }
    let n = tape.l2_normalize(z, 1, NORM_EPS)?;
    let nt = tape.transpose(n)?;
    tape.matmul(n, nt)
}

/// Column-normalized `Z^T Z`.
pub fn gram_inter_class_on(tape: &mut Tape, z: Var) -> Result<Var> {
    let (_, c) = dims(tape, z)?;
    if c < 2 {
        return Err(Error::Input("inter-class Gram matrix needs at least 2 classes".into()));
    }
    let n = tape.l2_normalize(z, 0, NORM_EPS)?;
    let nt = tape.transpose(n)?;
    tape.matmul(nt, n)
}

/// `A[i, j, k] = cos` of the angle at vertex `j` between `Z_i - Z_j` and
/// `Z_k - Z_j`; a zero-length side gives 0.
pub fn angular_relations_on(tape: &mut Tape, z: Var) -> Result<Var> {
    let (b, _) = dims(tape, z)?;
    if b < 3 {
        return Err(Error::Input("angular relations need at least 3 samples".into()));
    }
    // u[i, j] = normalize(Z_i - Z_j)
    let diff = tape.pairwise_sub(z, z)?;
    let u = tape.l2_normalize(diff, 2, NORM_EPS)?;
    // v[j, i] = u[i, j]; g[j, i, k] = <v[j, i], v[j, k]>
    let v = tape.permute(u, &[1, 0, 2])?;
    let vt = tape.permute(v, &[0, 2, 1])?;
    let g = tape.matmul(v, vt)?;
    tape.permute(g, &[1, 0, 2])
}

fn encode(z: &Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

pub fn gram_inter_sample(z: &Tensor) -> Result<Tensor> {
    encode(z, gram_inter_sample_on)
}

pub fn gram_inter_class(z: &Tensor) -> Result<Tensor> {
    encode(z, gram_inter_class_on)
}

pub fn angular_relations(z: &Tensor) -> Result<Tensor> {
    encode(z, angular_relations_on)
}

fn huber_mean(tape: &mut Tape, a: Var, b: Var, delta: f64) -> Result<Var> {
    let h = tape.huber(a, b, delta)?;
    tape.mean_all(h)
}

/// Relation-matching loss on the tape between student views and (constant)
/// teacher views.
///
/// Gram and angular encoders are applied to each view separately and the two
/// mean Huber distances are averaged. `VrmIsvIcv` sums the unpruned,
/// mean-reduced ISV and ICV matching losses.
pub fn relation_loss_on(
    tape: &mut Tape,
    kind: RelationKind,
    student: (Var, Var),
    teacher: (Var, Var),
    delta: f64,
) -> Result<Var> {
    let encoder: fn(&mut Tape, Var) -> Result<Var> = match kind {
        RelationKind::GramInterSample => gram_inter_sample_on,
        RelationKind::GramInterClass => gram_inter_class_on,
        RelationKind::Angular => angular_relations_on,
        RelationKind::VrmIsvIcv => {
            let (b, c) = dims(tape, student.0)?;
            let es = isv_edges(tape, student.0, student.1)?;
            let et = isv_edges(tape, teacher.0, teacher.1)?;
            let m = EdgeMask::keep_all(EdgeKind::InterSampleVirtual, b);
            let isv = edge_matching_loss(tape, es, et, EdgeKind::InterSampleVirtual, &m, delta, Reduction::MeanOverKept, EdgeMetric::Huber)?;
            let es = icv_edges(tape, student.0, student.1)?;
            let et = icv_edges(tape, teacher.0, teacher.1)?;
            let m = EdgeMask::keep_all(EdgeKind::InterClassVirtual, c);
            let icv = edge_matching_loss(tape, es, et, EdgeKind::InterClassVirtual, &m, delta, Reduction::MeanOverKept, EdgeMetric::Huber)?;
            return tape.add(isv.value, icv.value);
        }
    };
    let sr = encoder(tape, student.0)?;
    let tr = encoder(tape, teacher.0)?;
    let real = huber_mean(tape, sr, tr, delta)?;
    let sv = encoder(tape, student.1)?;
    let tv = encoder(tape, teacher.1)?;
    let virt = huber_mean(tape, sv, tv, delta)?;
    let both = tape.add(real, virt)?;
    Ok(tape.scale(both, 0.5))
}

/// Value of [`relation_loss_on`] for two prediction batches, used as given
/// (soften them first for the controlled comparison with VRM edges).
pub fn baseline_relation_loss(
    kind: RelationKind,
    student: &LogitBatch,
    teacher: &LogitBatch,
    delta: f64,
) -> Result<f64> {
    if student.real().shape() != teacher.real().shape() {
        return Err(Error::shape(
            "baseline_relation_loss",
            format!("{:?} vs {:?}", student.real().shape(), teacher.real().shape()),
        ));
    }
    let mut tape = Tape::new();
    let s = (
        tape.constant(student.real().clone()),
        tape.constant(student.virtual_view().clone()),
    );
    let t = (
        tape.constant(teacher.real().clone()),
        tape.constant(teacher.virtual_view().clone()),
    );
    let out = relation_loss_on(&mut tape, kind, s, t, delta)?;
    tape.value(out).item()
}
