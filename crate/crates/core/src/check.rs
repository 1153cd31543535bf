//! Self-verification suite: finite-difference gradient checks on every tape
//! op, brute-force oracles for the edge builders and masked losses, and the
//! structural invariants of edges and pruning masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::mix_seed;
use crate::autodiff::{Fault, Tape, Var};
use crate::baselines::{angular_relations_on, gram_inter_class_on, gram_inter_sample_on};
use crate::error::Result;
use crate::gradcheck::finite_diff_check_on;
use crate::pruning::{joint_entropy_matrix, nearest_rank_percentile, uep_mask, EdgeMask};
use crate::relations::{
    brute_force_edges, build_edges, icv_edges, inter_class_edges, inter_sample_edges, isv_edges, EdgeKind,
    EdgeTensor, LogitBatch,
};
use crate::tensor::Tensor;
use crate::vrm_loss::{im_kd_objective, loss_icv, loss_isv, student_masks, vrm_objective, MaskSource, Reduction, VrmWeights};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckOptions {
    /// Fewer instances per property.
    pub quick: bool,
    /// Fault injected into every tape used by gradient checks.
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckReport {
    pub results: Vec<PropertyResult>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    fn record(&mut self, name: &str, outcome: Result<(bool, String)>) {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.results.push(PropertyResult {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

fn rng_for(property: u64, instance: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(property, &[instance as u64]))
}

/// Shapes cycled through by gradient checks.
pub fn fd_shape(instance: usize) -> (usize, usize) {
    ([2, 4, 8][instance % 3], [3, 5, 10][(instance / 3) % 3])
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::randn(shape, rng).map(|v| scale * v)
}

/// Contracts `v` with a fixed random tensor so every output entry matters.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(randn(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0));
    let p = tape.mul(v, w)?;
    tape.sum_all(p)
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

/// One gradient-check case: an input tensor and a scalar function of it.
fn fd_case(name: &str, rng: &mut ChaCha8Rng, b: usize, c: usize) -> (Tensor, OpFn) {
    let seed: u64 = rng.random();
    let x = randn(rng, &[b, c], 1.5);
    let other = randn(rng, &[b, c], 1.5);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let f: OpFn = match name {
        "softmax" => Box::new(move |t, v| {
            let s = t.softmax(v, 1, 2.0)?;
            project(t, s, seed)
        }),
        "l2_normalize" => Box::new(move |t, v| {
            let s = t.l2_normalize(v, 1, 1e-12)?;
            project(t, s, seed)
        }),
        "huber" => Box::new(move |t, v| {
            let o = t.constant(other.clone());
            let h = t.huber(v, o, 1.0)?;
            project(t, h, seed)
        }),
        "entropy" => Box::new(move |t, v| {
            let p = t.softmax(v, 1, 1.0)?;
            let h = t.entropy(p, 1)?;
            project(t, h, seed)
        }),
        "cross_entropy" => Box::new(move |t, v| t.cross_entropy(v, &labels)),
        "kld_student" => Box::new(move |t, v| {
            let o = t.constant(other.clone());
            t.kld(o, v, 4.0)
        }),
        "kld_teacher" => Box::new(move |t, v| {
            let o = t.constant(other.clone());
            t.kld(v, o, 4.0)
        }),
        "matmul" => Box::new(move |t, v| {
            let w = t.constant(other.transpose()?);
            let m = t.matmul(v, w)?;
            let l = t.constant(other.clone());
            let m2 = t.matmul(m, l)?;
            project(t, m2, seed)
        }),
        "mlp" => Box::new(move |t, v| {
            let c = t.shape(v)[1];
            let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let w1 = t.constant(randn(&mut r, &[c, 6], 0.7));
            let b1 = t.constant(randn(&mut r, &[6], 0.3));
            let w2 = t.constant(randn(&mut r, &[6, 3], 0.7));
            let h = t.matmul(v, w1)?;
            let h = t.add_bias(h, b1)?;
            let h = t.relu(h);
            let h2 = t.matmul(h, w2)?;
            let h2 = t.tanh(h2);
            project(t, h2, seed)
        }),
        "add_bias" => Box::new(move |t, v| {
            let c = t.shape(v)[1];
            let x = t.constant(randn(&mut ChaCha8Rng::seed_from_u64(seed ^ 2), &[3, c], 1.0));
            let flat = t.sum_axis(v, 0)?;
            let y = t.add_bias(x, flat)?;
            project(t, y, seed)
        }),
        "pairwise_sub" => Box::new(move |t, v| {
            let o = t.constant(other.clone());
            let d = t.pairwise_sub(v, o)?;
            let d = t.permute(d, &[2, 0, 1])?;
            project(t, d, seed)
        }),
        "inter_sample_edges" => Box::new(move |t, v| {
            let e = inter_sample_edges(t, v)?;
            project(t, e, seed)
        }),
        "inter_class_edges" => Box::new(move |t, v| {
            let e = inter_class_edges(t, v)?;
            project(t, e, seed)
        }),
        "isv_edges" => Box::new(move |t, v| {
            let o = t.constant(other.clone());
            let e = isv_edges(t, v, o)?;
            project(t, e, seed)
        }),
        "icv_edges" => Box::new(move |t, v| {
            let o = t.constant(other.clone());
            let e = icv_edges(t, o, v)?;
            project(t, e, seed)
        }),
        "gram" => Box::new(move |t, v| {
            let a = gram_inter_sample_on(t, v)?;
            let pa = project(t, a, seed)?;
            let g = gram_inter_class_on(t, v)?;
            let pg = project(t, g, seed ^ 3)?;
            t.add(pa, pg)
        }),
        "angular" => Box::new(move |t, v| {
            let a = angular_relations_on(t, v)?;
            project(t, a, seed)
        }),
        "im_kd" => Box::new(move |t, v| Ok(im_kd_objective(t, v, &other, &labels, 4.0, 1.0)?.0)),
        other_name => unreachable!("no gradient case {other_name}"),
    };
    (x, f)
}

const FD_OPS: &[&str] = &[
    "softmax",
    "l2_normalize",
    "huber",
    "entropy",
    "cross_entropy",
    "kld_student",
    "kld_teacher",
    "matmul",
    "mlp",
    "add_bias",
    "pairwise_sub",
    "inter_sample_edges",
    "inter_class_edges",
    "isv_edges",
    "icv_edges",
    "gram",
    "angular",
    "im_kd",
];

/// A seeded instance of the full objective with masks frozen at the
/// starting point. Returns the worst relative error over both student views.
pub fn total_loss_fd_instance(instance: usize, fault: Option<Fault>) -> Result<f64> {
    let (b, c) = fd_shape(instance);
    let mut rng = rng_for(0x7071, instance);
    let sr = randn(&mut rng, &[b, c], 1.5);
    let sv = randn(&mut rng, &[b, c], 1.5);
    let tr = randn(&mut rng, &[b, c], 1.5);
    let tv = randn(&mut rng, &[b, c], 1.5);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
    let weights = VrmWeights {
        uep_percentile: [50.0, 75.0, 95.0, 100.0][instance % 4],
        ..VrmWeights::default()
    };
    let (mi, mc) = student_masks(&sr, &sv, &weights)?;
    let make = || fault.map_or_else(Tape::new, Tape::with_fault);
    let masks = MaskSource::Frozen(mi, mc);
    let real_arm = {
        let (sv, tr, tv, labels, weights, masks) = (sv.clone(), tr.clone(), tv.clone(), labels.clone(), weights.clone(), masks.clone());
        finite_diff_check_on(
            make,
            move |t, v| {
                let s = t.constant(sv.clone());
                Ok(vrm_objective(t, v, s, &tr, &tv, &labels, &weights, masks.clone())?.total)
            },
            &sr,
            FD_STEP,
        )?
    };
    let virtual_arm = finite_diff_check_on(
        make,
        move |t, v| {
            let s = t.constant(sr.clone());
            Ok(vrm_objective(t, s, v, &tr, &tv, &labels, &weights, masks.clone())?.total)
        },
        &sv,
        FD_STEP,
    )?;
    Ok(real_arm.max(virtual_arm))
}

fn fd_op(name: &str, instances: usize, fault: Option<Fault>) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let (b, c) = fd_shape(k);
        let b = if name == "angular" { b.max(3) } else { b };
        let mut rng = rng_for(name.bytes().fold(17u64, |h, x| h.wrapping_mul(31).wrapping_add(u64::from(x))), k);
        let (x, f) = fd_case(name, &mut rng, b, c);
        let make = || fault.map_or_else(Tape::new, Tape::with_fault);
        worst = worst.max(finite_diff_check_on(make, f, &x, FD_STEP)?);
    }
    Ok((worst < FD_TOLERANCE, format!("max relative error {worst:.3e} over {instances} instances")))
}

/// Random batch with `B <= 8`, `C <= 5`.
pub fn oracle_batch(rng: &mut ChaCha8Rng) -> LogitBatch {
    let b = rng.random_range(2..=8);
    let c = rng.random_range(2..=5);
    LogitBatch::new(randn(rng, &[b, c], 2.0), randn(rng, &[b, c], 2.0)).expect("valid batch")
}

const ALL_KINDS: [EdgeKind; 4] = [
    EdgeKind::InterSample,
    EdgeKind::InterClass,
    EdgeKind::InterSampleVirtual,
    EdgeKind::InterClassVirtual,
];

fn oracle_edges(kind: EdgeKind, instances: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let batch = oracle_batch(&mut rng_for(0xed6e + kind as u64, k));
        let fast = build_edges(&batch, kind)?;
        let slow = brute_force_edges(&batch, kind)?;
        worst = worst.max(fast.values.max_abs_diff(&slow.values)?);
    }
    Ok((worst <= ORACLE_TOLERANCE, format!("max abs diff {worst:.3e} over {instances} instances")))
}

/// Masked Huber loss by explicit loops over kept fibers.
pub fn scalar_masked_loss(student: &EdgeTensor, teacher: &EdgeTensor, mask: &EdgeMask, delta: f64, reduction: Reduction) -> f64 {
    let side = mask.side();
    let mut sum = 0.0;
    let mut kept = 0usize;
    let mut len = 0usize;
    for i in 0..side {
        for j in 0..side {
            if !mask.keep(i, j) {
                continue;
            }
            kept += 1;
            let (s, t) = (student.fiber(i, j), teacher.fiber(i, j));
            len = s.len();
            for (a, b) in s.iter().zip(t) {
                let r = (a - b).abs();
                sum += if r <= delta { 0.5 * r * r } else { delta * (r - 0.5 * delta) };
            }
        }
    }
    match reduction {
        _ if kept == 0 => 0.0,
        Reduction::Sum => sum,
        Reduction::MeanOverKept => sum / (kept * len) as f64,
    }
}

fn oracle_masked_loss(kind: EdgeKind, instances: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = rng_for(0x1055 + kind as u64, k);
        let s = oracle_batch(&mut rng);
        let t = LogitBatch::new(
            randn(&mut rng, s.real().shape(), 2.0),
            randn(&mut rng, s.real().shape(), 2.0),
        )?;
        let (es, et) = (build_edges(&s, kind)?, build_edges(&t, kind)?);
        let side = es.values.shape()[0];
        let flags = (0..side * side).map(|_| rng.random_bool(0.7)).collect();
        let mask = EdgeMask::from_flags(kind, side, flags)?;
        let delta = rng.random_range(0.05..2.0);
        for reduction in [Reduction::MeanOverKept, Reduction::Sum] {
            let fast = match kind {
                EdgeKind::InterSampleVirtual => loss_isv(&es, &et, &mask, delta, reduction)?,
                _ => loss_icv(&es, &et, &mask, delta, reduction)?,
            };
            worst = worst.max((fast.value - scalar_masked_loss(&es, &et, &mask, delta, reduction)).abs());
        }
    }
    Ok((worst <= ORACLE_TOLERANCE, format!("max abs diff {worst:.3e} over {instances} instances")))
}

fn unit_norm_or_zero(instances: usize) -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let batch = oracle_batch(&mut rng_for(0x0417, k));
        for kind in ALL_KINDS {
            let e = build_edges(&batch, kind)?;
            let (a, b) = (e.values.shape()[0], e.values.shape()[1]);
            for i in 0..a {
                for j in 0..b {
                    let n = e.fiber(i, j).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n != 0.0 {
                        worst = worst.max((n - 1.0).abs());
                    }
                }
            }
        }
    }
    Ok((worst <= ORACLE_TOLERANCE, format!("max |norm - 1| {worst:.3e}")))
}

fn antisymmetry(instances: usize) -> Result<(bool, String)> {
    for k in 0..instances {
        let batch = oracle_batch(&mut rng_for(0xa5a5, k));
        for kind in [EdgeKind::InterSample, EdgeKind::InterClass] {
            let e = build_edges(&batch, kind)?;
            let n = e.values.shape()[0];
            for i in 0..n {
                for j in 0..n {
                    let (f, g) = (e.fiber(i, j), e.fiber(j, i));
                    if f.iter().zip(g).any(|(a, b)| *a != -*b) {
                        return Ok((false, format!("{} edge ({i},{j}) is not the negation of ({j},{i})", kind.short_name())));
                    }
                }
            }
        }
    }
    Ok((true, format!("{instances} instances exact")))
}

fn retention_counts(instances: usize) -> Result<(bool, String)> {
    for k in 0..instances {
        let batch = oracle_batch(&mut rng_for(0x4e7a, k)).soften(4.0)?;
        for kind in [EdgeKind::InterSampleVirtual, EdgeKind::InterClassVirtual] {
            let je = joint_entropy_matrix(&batch, kind)?;
            for m in [50.0, 75.0, 90.0, 95.0, 100.0] {
                let mask = uep_mask(&je, kind, m)?;
                let p = nearest_rank_percentile(je.data(), m)?;
                let expected = je.data().iter().filter(|&&v| v <= p).count();
                let n = je.numel();
                let rank = ((m * n as f64) / 100.0).ceil() as usize;
                if mask.kept_count() != expected || expected < rank {
                    return Ok((false, format!("{} m={m}: kept {} expected {expected}", kind.short_name(), mask.kept_count())));
                }
            }
        }
    }
    Ok((true, format!("{instances} instances x 5 percentiles")))
}

fn joint_entropy_properties(instances: usize) -> Result<(bool, String)> {
    let h = |p: &[f64]| -> f64 { p.iter().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum() };
    let mut worst_sym = 0.0f64;
    let mut worst_jsd = 0.0f64;
    for k in 0..instances {
        let batch = oracle_batch(&mut rng_for(0x1e1e, k)).soften(4.0)?;
        let swapped = LogitBatch::from_probabilities(batch.virtual_view().clone(), batch.real().clone())?;
        let je = joint_entropy_matrix(&batch, EdgeKind::InterSampleVirtual)?;
        let je_swapped = joint_entropy_matrix(&swapped, EdgeKind::InterSampleVirtual)?;
        worst_sym = worst_sym.max(je.transpose()?.max_abs_diff(&je_swapped)?);
        let n = batch.batch_size();
        for i in 0..n {
            for j in 0..n {
                let jsd = je.at(&[i, j]) - 0.5 * (h(batch.real().row(j)) + h(batch.virtual_view().row(i)));
                worst_jsd = worst_jsd.max(-jsd);
            }
        }
    }
    Ok((
        worst_sym <= ORACLE_TOLERANCE && worst_jsd <= ORACLE_TOLERANCE,
        format!("symmetry {worst_sym:.3e}, most negative JSD {:.3e}", -worst_jsd),
    ))
}

/// Runs every property and collects the results in a fixed order.
pub fn run_checks(options: CheckOptions) -> CheckReport {
    let fd_n = if options.quick { 5 } else { 20 };
    let oracle_n = if options.quick { 10 } else { 50 };
    let mut report = CheckReport::default();
    for op in FD_OPS {
        report.record(&format!("grad/{op}"), fd_op(op, fd_n, options.fault));
    }
    let total = (0..fd_n)
        .map(|k| total_loss_fd_instance(k, options.fault))
        .try_fold(0.0f64, |acc, r| r.map(|e| acc.max(e)))
        .map(|worst| (worst < FD_TOLERANCE, format!("max relative error {worst:.3e} over {fd_n} instances")));
    report.record("grad/total_loss", total);
    for kind in ALL_KINDS {
        report.record(&format!("oracle/edges_{}", kind.short_name()), oracle_edges(kind, oracle_n));
    }
    report.record("oracle/masked_loss_ISV", oracle_masked_loss(EdgeKind::InterSampleVirtual, oracle_n));
    report.record("oracle/masked_loss_ICV", oracle_masked_loss(EdgeKind::InterClassVirtual, oracle_n));
    report.record("invariant/unit_norm_or_zero", unit_norm_or_zero(oracle_n));
    report.record("invariant/antisymmetry", antisymmetry(oracle_n));
    report.record("invariant/uep_retention", retention_counts(oracle_n));
    report.record("invariant/joint_entropy", joint_entropy_properties(oracle_n));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let r = run_checks(CheckOptions {
            quick: true,
            fault: None,
        });
        let failed: Vec<_> = r.failures().collect();
        assert!(failed.is_empty(), "{failed:#?}");
    }

    #[test]
    fn huber_fault_is_named() {
        let r = run_checks(CheckOptions {
            quick: true,
            fault: Some(Fault::HuberGradSign),
        });
        let failed: Vec<&str> = r.failures().map(|p| p.name.as_str()).collect();
        assert!(failed.contains(&"grad/huber"), "{failed:?}");
        assert!(!failed.contains(&"grad/softmax"));
    }
}
