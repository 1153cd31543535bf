//! The virtual relation matching objective.
//!
//! `total = ce_real + ce_virtual + alpha * isv + beta * icv`, where `isv` and
//! `icv` match student edges against detached teacher edges with a Huber
//! penalty over the fibers kept by unreliable edge pruning.

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::pruning::{joint_entropy_matrix, mask_edges, uep_mask, EdgeMask};
use crate::relations::{icv_edges, isv_edges, EdgeKind, EdgeTensor, LogitBatch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Divide the masked sum by `kept_fibers * fiber_len`.
    MeanOverKept,
    Sum,
}

/// Per-element discrepancy between student and teacher edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeMetric {
    Huber,
    /// Squared error, kept for ablations.
    Mse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VrmWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub huber_delta: f64,
    pub uep_percentile: f64,
    pub reduction: Reduction,
    pub metric: EdgeMetric,
    /// Supervise the student's virtual-view predictions with labels too.
    pub ce_on_virtual: bool,
    /// Build edges from `softmax(z / tau)` rather than raw logits.
    pub soften: bool,
    /// Weight of an optional vertex (prediction) matching term; 0 disables it.
    pub vertex_weight: f64,
}

impl Default for VrmWeights {
    fn default() -> Self {
        VrmWeights {
            alpha: 128.0,
            beta: 32.0,
            tau: 4.0,
            huber_delta: 1.0,
            uep_percentile: 95.0,
            reduction: Reduction::MeanOverKept,
            metric: EdgeMetric::Huber,
            ce_on_virtual: true,
            soften: true,
            vertex_weight: 0.0,
        }
    }
}

impl VrmWeights {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Parameter(format!("{what} = {v}")));
        if !(self.alpha >= 0.0) {
            return bad("alpha", self.alpha);
        }
        if !(self.beta >= 0.0) {
            return bad("beta", self.beta);
        }
        if !(self.tau > 0.0) {
            return bad("tau", self.tau);
        }
        if !(self.huber_delta > 0.0) {
            return bad("huber_delta", self.huber_delta);
        }
        if !(self.uep_percentile > 0.0 && self.uep_percentile <= 100.0) {
            return bad("uep_percentile", self.uep_percentile);
        }
        if !(self.vertex_weight >= 0.0) {
            return bad("vertex_weight", self.vertex_weight);
        }
        Ok(())
    }
}

/// Scalar components of one objective evaluation.
///
/// For non-VRM objectives the two relation slots hold that objective's
/// relation terms (weighted by `alpha` and `beta` respectively) and the `kd`
/// slot holds an instance-matching KLD term, so [`LossBreakdown::weighted_sum`]
/// reproduces `total` for every objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce_real: f64,
    pub ce_virtual: f64,
    pub isv: f64,
    pub icv: f64,
    pub vertex: f64,
    pub alpha: f64,
    pub beta: f64,
    pub vertex_weight: f64,
    pub kd: f64,
    pub kd_weight: f64,
    pub kept_isv: usize,
    pub total_isv: usize,
    pub kept_icv: usize,
    pub total_icv: usize,
}

impl LossBreakdown {
    /// Recomputes the total from its components in the same order the
    /// objective sums them.
    pub fn weighted_sum(&self) -> f64 {
        self.ce_real + self.ce_virtual + self.alpha * self.isv + self.beta * self.icv
            + self.vertex_weight * self.vertex
            + self.kd_weight * self.kd
    }

    pub fn kept_isv_fraction(&self) -> f64 {
        ratio(self.kept_isv, self.total_isv)
    }

    pub fn kept_icv_fraction(&self) -> f64 {
        ratio(self.kept_icv, self.total_icv)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Result of matching one edge kind.
#[derive(Debug, Clone, Copy)]
pub struct EdgeLoss {
    pub value: Var,
    pub kept: usize,
    /// Set when every fiber was pruned; `value` is then an exact zero.
    pub empty: bool,
}

/// Masked edge-matching loss on the tape. `teacher` should be a constant.
#[allow(clippy::too_many_arguments)]
pub fn edge_matching_loss(
    tape: &mut Tape,
    student: Var,
    teacher: Var,
    kind: EdgeKind,
    mask: &EdgeMask,
    delta: f64,
    reduction: Reduction,
    metric: EdgeMetric,
) -> Result<EdgeLoss> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::shape(
            "edge_matching_loss",
            format!("{:?} vs {:?}", tape.shape(student), tape.shape(teacher)),
        ));
    }
    let fiber_len = *tape
        .shape(student)
        .last()
        .ok_or_else(|| Error::shape("edge_matching_loss", "scalar edges"))?;
    let kept = mask.kept_count();
    // Validates kind and shape even when nothing survives.
    let masked_s = mask_edges(tape, student, kind, mask)?;
    if kept == 0 {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(EdgeLoss {
            value: zero,
            kept,
            empty: true,
        });
    }
    let masked_t = mask_edges(tape, teacher, kind, mask)?;
    let elem = match metric {
        EdgeMetric::Huber => tape.huber(masked_s, masked_t, delta)?,
        EdgeMetric::Mse => {
            let r = tape.sub(masked_s, masked_t)?;
            tape.mul(r, r)?
        }
    };
    let total = tape.sum_all(elem)?;
    let value = match reduction {
        Reduction::Sum => total,
        Reduction::MeanOverKept => tape.scale(total, 1.0 / (kept * fiber_len) as f64),
    };
    Ok(EdgeLoss {
        value,
        kept,
        empty: false,
    })
}

/// Plain-value result of [`loss_isv`] / [`loss_icv`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeLossValue {
    pub value: f64,
    pub kept: usize,
    pub empty: bool,
}

fn edge_loss_value(
    kind: EdgeKind,
    student: &EdgeTensor,
    teacher: &EdgeTensor,
    mask: &EdgeMask,
    delta: f64,
    reduction: Reduction,
) -> Result<EdgeLossValue> {
    if student.kind != kind || teacher.kind != kind {
        return Err(Error::Usage(format!(
            "expected {} edges, got {} and {}",
            kind.short_name(),
            student.kind.short_name(),
            teacher.kind.short_name()
        )));
    }
    let mut tape = Tape::new();
    let s = tape.constant(student.values.clone());
    let t = tape.constant(teacher.values.clone());
    let out = edge_matching_loss(&mut tape, s, t, kind, mask, delta, reduction, EdgeMetric::Huber)?;
    Ok(EdgeLossValue {
        value: tape.value(out.value).item()?,
        kept: out.kept,
        empty: out.empty,
    })
}

/// Masked Huber matching of inter-sample virtual edges.
pub fn loss_isv(
    student: &EdgeTensor,
    teacher: &EdgeTensor,
    mask: &EdgeMask,
    delta: f64,
    reduction: Reduction,
) -> Result<EdgeLossValue> {
    edge_loss_value(EdgeKind::InterSampleVirtual, student, teacher, mask, delta, reduction)
}

/// Masked Huber matching of inter-class virtual edges.
pub fn loss_icv(
    student: &EdgeTensor,
    teacher: &EdgeTensor,
    mask: &EdgeMask,
    delta: f64,
    reduction: Reduction,
) -> Result<EdgeLossValue> {
    edge_loss_value(EdgeKind::InterClassVirtual, student, teacher, mask, delta, reduction)
}

/// Where the pruning masks come from.
#[derive(Debug, Clone)]
pub enum MaskSource {
    /// Rebuild both masks from the student's current predictions.
    FromStudent,
    /// Use fixed masks (ISV, ICV), e.g. for gradient checks.
    Frozen(EdgeMask, EdgeMask),
}

/// Tape handles and bookkeeping of a VRM objective evaluation.
#[derive(Debug, Clone)]
pub struct VrmTerms {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub isv_mask: EdgeMask,
    pub icv_mask: EdgeMask,
}

/// Builds the student-side masks from raw student logits.
pub fn student_masks(student_real: &Tensor, student_virtual: &Tensor, weights: &VrmWeights) -> Result<(EdgeMask, EdgeMask)> {
    let soft = LogitBatch::new(student_real.clone(), student_virtual.clone())?.soften(weights.tau)?;
    let isv = uep_mask(
        &joint_entropy_matrix(&soft, EdgeKind::InterSampleVirtual)?,
        EdgeKind::InterSampleVirtual,
        weights.uep_percentile,
    )?;
    let icv = uep_mask(
        &joint_entropy_matrix(&soft, EdgeKind::InterClassVirtual)?,
        EdgeKind::InterClassVirtual,
        weights.uep_percentile,
    )?;
    Ok((isv, icv))
}

/// Full objective on the tape. Student logits are tape variables; teacher
/// logits are plain tensors and never receive gradient.
#[allow(clippy::too_many_arguments)]
pub fn vrm_objective(
    tape: &mut Tape,
    student_real: Var,
    student_virtual: Var,
    teacher_real: &Tensor,
    teacher_virtual: &Tensor,
    labels: &[usize],
    weights: &VrmWeights,
    masks: MaskSource,
) -> Result<VrmTerms> {
    weights.validate()?;
    let s_shape = tape.shape(student_real).to_vec();
    if tape.shape(student_virtual) != s_shape.as_slice()
        || teacher_real.shape() != s_shape.as_slice()
        || teacher_virtual.shape() != s_shape.as_slice()
    {
        return Err(Error::Input(format!(
            "student {s_shape:?} and teacher {:?} logits disagree",
            teacher_real.shape()
        )));
    }

    let ce_real = tape.cross_entropy(student_real, labels)?;
    let ce_virtual = if weights.ce_on_virtual {
        tape.cross_entropy(student_virtual, labels)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };

    let (sr, sv, tr, tv) = if weights.soften {
        (
            tape.softmax(student_real, 1, weights.tau)?,
            tape.softmax(student_virtual, 1, weights.tau)?,
            autodiff::softmax(teacher_real, 1, weights.tau)?,
            autodiff::softmax(teacher_virtual, 1, weights.tau)?,
        )
    } else {
        (student_real, student_virtual, teacher_real.clone(), teacher_virtual.clone())
    };
    let tr = tape.constant(tr);
    let tv = tape.constant(tv);

    let (isv_mask, icv_mask) = match masks {
        MaskSource::FromStudent => {
            student_masks(tape.value(student_real), tape.value(student_virtual), weights)?
        }
        MaskSource::Frozen(a, b) => (a, b),
    };

    let es_isv = isv_edges(tape, sr, sv)?;
    let et_isv = isv_edges(tape, tr, tv)?;
    let es_icv = icv_edges(tape, sr, sv)?;
    let et_icv = icv_edges(tape, tr, tv)?;
    let (delta, red, metric) = (weights.huber_delta, weights.reduction, weights.metric);
    let isv = edge_matching_loss(tape, es_isv, et_isv, EdgeKind::InterSampleVirtual, &isv_mask, delta, red, metric)?;
    let icv = edge_matching_loss(tape, es_icv, et_icv, EdgeKind::InterClassVirtual, &icv_mask, delta, red, metric)?;

    let vertex = if weights.vertex_weight > 0.0 {
        let a = tape.huber(sr, tr, delta)?;
        let b = tape.huber(sv, tv, delta)?;
        let s = tape.add(a, b)?;
        let m = tape.mean_all(s)?;
        Some(m)
    } else {
        None
    };

    let ce = tape.add(ce_real, ce_virtual)?;
    let wi = tape.scale(isv.value, weights.alpha);
    let acc = tape.add(ce, wi)?;
    let wc = tape.scale(icv.value, weights.beta);
    let mut total = tape.add(acc, wc)?;
    if let Some(v) = vertex {
        let wv = tape.scale(v, weights.vertex_weight);
        total = tape.add(total, wv)?;
    }

    let item = |t: &Tape, v: Var| t.value(v).item();
    let breakdown = LossBreakdown {
        total: item(tape, total)?,
        ce_real: item(tape, ce_real)?,
        ce_virtual: item(tape, ce_virtual)?,
        isv: item(tape, isv.value)?,
        icv: item(tape, icv.value)?,
        vertex: match vertex {
            Some(v) => item(tape, v)?,
            None => 0.0,
        },
        alpha: weights.alpha,
        beta: weights.beta,
        vertex_weight: if vertex.is_some() { weights.vertex_weight } else { 0.0 },
        kd: 0.0,
        kd_weight: 0.0,
        kept_isv: isv.kept,
        total_isv: isv_mask.total(),
        kept_icv: icv.kept,
        total_icv: icv_mask.total(),
    };
    Ok(VrmTerms {
        total,
        breakdown,
        isv_mask,
        icv_mask,
    })
}

/// Evaluates the full objective on raw logits and returns its breakdown.
pub fn total_loss(
    student: &LogitBatch,
    teacher: &LogitBatch,
    labels: &[usize],
    weights: &VrmWeights,
) -> Result<LossBreakdown> {
    if student.is_softened() || teacher.is_softened() {
        return Err(Error::Input("total_loss expects raw logits".into()));
    }
    let mut tape = Tape::new();
    let sr = tape.param(student.real().clone());
    let sv = tape.param(student.virtual_view().clone());
    let terms = vrm_objective(
        &mut tape,
        sr,
        sv,
        teacher.real(),
        teacher.virtual_view(),
        labels,
        weights,
        MaskSource::FromStudent,
    )?;
    Ok(terms.breakdown)
}

/// Instance-matching objective: `CE + weight * KLD` on one view.
pub fn im_kd_objective(
    tape: &mut Tape,
    student: Var,
    teacher: &Tensor,
    labels: &[usize],
    tau: f64,
    weight: f64,
) -> Result<(Var, Var, Var)> {
    let ce = tape.cross_entropy(student, labels)?;
    let t = tape.constant(teacher.clone());
    let kd = tape.kld(t, student, tau)?;
    let wk = tape.scale(kd, weight);
    let total = tape.add(ce, wk)?;
    Ok((total, ce, kd))
}

/// Value of the instance-matching objective.
pub fn im_kd_loss(student: &Tensor, teacher: &Tensor, labels: &[usize], tau: f64, weight: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let (total, _, _) = im_kd_objective(&mut tape, s, teacher, labels, tau, weight)?;
    tape.value(total).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relations::build_isv_edges;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, c: usize) -> LogitBatch {
        LogitBatch::new(Tensor::randn(&[b, c], rng), Tensor::randn(&[b, c], rng)).unwrap()
    }

    #[test]
    fn single_fiber_residual_half() {
        let s = EdgeTensor {
            kind: EdgeKind::InterSampleVirtual,
            values: Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap(),
            norm_axis: 2,
        };
        let t = EdgeTensor {
            values: Tensor::zeros(&[1, 1, 2]),
            ..s.clone()
        };
        let m = EdgeMask::keep_all(EdgeKind::InterSampleVirtual, 1);
        let l = loss_isv(&s, &t, &m, 1.0, Reduction::MeanOverKept).unwrap();
        assert!((l.value - 0.125).abs() < 1e-15);
        assert_eq!(l.kept, 1);
    }

    #[test]
    fn identical_edges_and_empty_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = build_isv_edges(&random_batch(&mut rng, 4, 3)).unwrap();
        let all = EdgeMask::keep_all(EdgeKind::InterSampleVirtual, 4);
        assert_eq!(loss_isv(&e, &e, &all, 1.0, Reduction::MeanOverKept).unwrap().value, 0.0);
        let none = EdgeMask::from_flags(EdgeKind::InterSampleVirtual, 4, vec![false; 16]).unwrap();
        let other = build_isv_edges(&random_batch(&mut rng, 4, 3)).unwrap();
        let l = loss_isv(&e, &other, &none, 1.0, Reduction::Sum).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.empty);
    }

    #[test]
    fn wrong_edge_kind_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = build_isv_edges(&random_batch(&mut rng, 3, 3)).unwrap();
        let m = EdgeMask::keep_all(EdgeKind::InterClassVirtual, 3);
        assert!(loss_icv(&e, &e, &m, 1.0, Reduction::Sum).is_err());
    }

    #[test]
    fn clone_student_has_zero_relation_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_batch(&mut rng, 8, 10);
        let labels: Vec<usize> = (0..8).map(|i| i % 10).collect();
        let b = total_loss(&t, &t, &labels, &VrmWeights::default()).unwrap();
        assert!(b.isv.abs() < 1e-12 && b.icv.abs() < 1e-12);
        assert!(b.ce_real > 0.0 && b.ce_virtual > 0.0);
    }

    #[test]
    fn zero_weights_reduce_to_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = random_batch(&mut rng, 6, 4);
        let t = random_batch(&mut rng, 6, 4);
        let labels = [0, 1, 2, 3, 0, 1];
        let w = VrmWeights {
            alpha: 0.0,
            beta: 0.0,
            ..VrmWeights::default()
        };
        let b = total_loss(&s, &t, &labels, &w).unwrap();
        assert_eq!(b.total, b.ce_real + b.ce_virtual);
    }

    #[test]
    fn breakdown_identity_with_defaults() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_batch(&mut rng, 8, 10);
        let t = random_batch(&mut rng, 8, 10);
        let labels: Vec<usize> = (0..8).collect();
        let b = total_loss(&s, &t, &labels, &VrmWeights::default()).unwrap();
        assert!((b.total - b.weighted_sum()).abs() <= 1e-12);
        assert!(b.isv > 0.0 && b.icv > 0.0);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_batch(&mut rng, 4, 3);
        let t = random_batch(&mut rng, 5, 3);
        assert!(matches!(
            total_loss(&s, &t, &[0, 1, 2, 0], &VrmWeights::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn invalid_weights_rejected() {
        let w = VrmWeights {
            tau: 0.0,
            ..VrmWeights::default()
        };
        assert!(w.validate().is_err());
        let w = VrmWeights {
            uep_percentile: 0.0,
            ..VrmWeights::default()
        };
        assert!(w.validate().is_err());
    }

    #[test]
    fn im_kd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = Tensor::randn(&[3, 4], &mut rng);
        let labels = [1, 2, 3];
        let ce = autodiff::cross_entropy(&z, &labels).unwrap();
        assert_eq!(im_kd_loss(&z, &z, &labels, 4.0, 1.0).unwrap(), ce);
        let t = Tensor::randn(&[3, 4], &mut rng);
        assert_eq!(im_kd_loss(&z, &t, &labels, 4.0, 0.0).unwrap(), ce);
        // per-sample scalar oracle
        let tau: f64 = 4.0;
        let mut kl = 0.0;
        for r in 0..3 {
            let soft = |row: &[f64]| {
                let e: Vec<f64> = row.iter().map(|v| (v / tau).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect::<Vec<_>>()
            };
            let (pt, ps) = (soft(t.row(r)), soft(z.row(r)));
            kl += pt.iter().zip(&ps).map(|(a, b)| a * (a / b).ln()).sum::<f64>();
        }
        let expected = ce + 0.7 * tau * tau * kl / 3.0;
        assert!((im_kd_loss(&z, &t, &labels, tau, 0.7).unwrap() - expected).abs() < 1e-12);
    }
}
