//! Teacher pre-training and student distillation loops.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{mix_seed, virtual_view, AugmentSpec};
use crate::autodiff::{self, Tape, Var};
use crate::baselines::{relation_loss_on, RelationKind};
use crate::data::Dataset;
use crate::diagnostics::{DynamicsLog, EpochRecord};
use crate::error::{Error, Result};
use crate::model::{Mlp, MlpParams, MlpSpec};
use crate::optim::{MultiStepLr, Sgd};
use crate::tensor::Tensor;
use crate::vrm_loss::{im_kd_objective, vrm_objective, LossBreakdown, MaskSource, VrmWeights};

/// Batches smaller than this are skipped: the angular encoder needs triplets.
pub const MIN_BATCH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Cross-entropy plus pruned ISV and ICV edge matching.
    Vrm,
    /// Cross-entropy plus KLD on the real view.
    ImKd,
    /// Cross-entropy on the real view only.
    CeOnly,
    /// Cross-entropy plus inter-sample (`alpha`) and inter-class (`beta`)
    /// Gram matching on both views.
    Gram,
    /// Cross-entropy plus angle matching (`alpha`) on both views.
    Angular,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::Vrm,
        Objective::ImKd,
        Objective::CeOnly,
        Objective::Gram,
        Objective::Angular,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vrm" => Ok(Objective::Vrm),
            "im_kd" => Ok(Objective::ImKd),
            "ce_only" => Ok(Objective::CeOnly),
            "gram" => Ok(Objective::Gram),
            "angular" => Ok(Objective::Angular),
            other => Err(Error::Parameter(format!("unknown objective {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::Vrm => "vrm",
            Objective::ImKd => "im_kd",
            Objective::CeOnly => "ce_only",
            Objective::Gram => "gram",
            Objective::Angular => "angular",
        }
    }

    pub fn uses_teacher(self) -> bool {
        self != Objective::CeOnly
    }

    pub fn uses_virtual_view(self) -> bool {
        matches!(self, Objective::Vrm | Objective::Gram | Objective::Angular)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weights: VrmWeights,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: AugmentSpec,
    /// Weight of the KLD term under [`Objective::ImKd`].
    pub kd_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            weights: VrmWeights::default(),
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: vec![30, 40, 50],
            gamma: 0.1,
            batch_size: 64,
            epochs: 60,
            seed: 0,
            augment: AugmentSpec::default(),
            kd_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr {
            base: self.lr,
            milestones: self.milestones.clone(),
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < MIN_BATCH {
            return Err(Error::Parameter(format!(
                "batch size must be at least {MIN_BATCH}, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be positive".into()));
        }
        if !(self.kd_weight >= 0.0) {
            return Err(Error::Parameter(format!("kd_weight {} must be non-negative", self.kd_weight)));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        self.schedule().validate()?;
        Sgd::new(self.momentum, self.weight_decay)?;
        Ok(())
    }
}

/// Breakdown of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub breakdown: LossBreakdown,
}

pub fn breakdown_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from(
        "step,epoch,total,ce_real,ce_virtual,isv,icv,vertex,kd,alpha,beta,vertex_weight,kd_weight,kept_isv,total_isv,kept_icv,total_icv\n",
    );
    for s in steps {
        let b = &s.breakdown;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.step,
            s.epoch,
            b.total,
            b.ce_real,
            b.ce_virtual,
            b.isv,
            b.icv,
            b.vertex,
            b.kd,
            b.alpha,
            b.beta,
            b.vertex_weight,
            b.kd_weight,
            b.kept_isv,
            b.total_isv,
            b.kept_icv,
            b.total_icv
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub log: DynamicsLog,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn final_val_acc(&self) -> f64 {
        self.log.last().map_or(0.0, |r| r.val_acc)
    }

    pub fn final_gap(&self) -> f64 {
        self.log.last().map_or(0.0, |r| r.gap())
    }
}

/// Fraction of rows whose arg-max logit equals the label.
pub fn accuracy(model: &Mlp, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = model.predict(inputs)?;
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn split_accuracy(model: &Mlp, data: &Dataset, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Ok(0.0);
    }
    let (x, y) = data.subset(rows)?;
    accuracy(model, &x, &y)
}

/// Virtual views of the given dataset rows for one epoch.
pub fn virtual_batch(data: &Dataset, rows: &[usize], augment: &AugmentSpec, seed: u64, epoch: usize) -> Result<Tensor> {
    let mut out = Vec::with_capacity(rows.len() * data.dim());
    for &i in rows {
        let s = mix_seed(seed, &[epoch as u64, i as u64]);
        out.extend(virtual_view(data.inputs().row(i), augment, s)?);
    }
    Tensor::new(vec![rows.len(), data.dim()], out)
}

fn check_compatible(model: &MlpSpec, data: &Dataset) -> Result<()> {
    if model.input_dim() != data.dim() || model.classes() != data.classes() {
        return Err(Error::Parameter(format!(
            "model maps {} -> {} but data has dim {} and {} classes",
            model.input_dim(),
            model.classes(),
            data.dim(),
            data.classes()
        )));
    }
    Ok(())
}

/// Builds the chosen objective on the tape for one batch.
#[allow(clippy::too_many_arguments)]
pub fn objective_on(
    tape: &mut Tape,
    student: &Mlp,
    params: &MlpParams,
    teacher: Option<&Mlp>,
    real: &Tensor,
    virt: Option<&Tensor>,
    labels: &[usize],
    config: &TrainConfig,
    objective: Objective,
) -> Result<(Var, LossBreakdown)> {
    let w = &config.weights;
    let xr = tape.constant(real.clone());
    let sr = student.forward(tape, params, xr)?;
    let zero = LossBreakdown {
        total: 0.0,
        ce_real: 0.0,
        ce_virtual: 0.0,
        isv: 0.0,
        icv: 0.0,
        vertex: 0.0,
        alpha: 0.0,
        beta: 0.0,
        vertex_weight: 0.0,
        kd: 0.0,
        kd_weight: 0.0,
        kept_isv: 0,
        total_isv: 0,
        kept_icv: 0,
        total_icv: 0,
    };
    let item = |t: &Tape, v: Var| t.value(v).item();

    if objective == Objective::CeOnly {
        let ce = tape.cross_entropy(sr, labels)?;
        let v = item(tape, ce)?;
        return Ok((ce, LossBreakdown { total: v, ce_real: v, ..zero }));
    }

    let teacher = teacher.ok_or_else(|| Error::Parameter(format!("objective {} needs a teacher", objective.name())))?;
    let tr = teacher.predict(real)?;

    if objective == Objective::ImKd {
        let (total, ce, kd) = im_kd_objective(tape, sr, &tr, labels, w.tau, config.kd_weight)?;
        let b = LossBreakdown {
            total: item(tape, total)?,
            ce_real: item(tape, ce)?,
            kd: item(tape, kd)?,
            kd_weight: config.kd_weight,
            ..zero
        };
        return Ok((total, b));
    }

    let virt = virt.ok_or_else(|| Error::Usage(format!("objective {} needs virtual views", objective.name())))?;
    let xv = tape.constant(virt.clone());
    let sv = student.forward(tape, params, xv)?;
    let tv = teacher.predict(virt)?;

    if objective == Objective::Vrm {
        let terms = vrm_objective(tape, sr, sv, &tr, &tv, labels, w, MaskSource::FromStudent)?;
        return Ok((terms.total, terms.breakdown));
    }

    let ce_real = tape.cross_entropy(sr, labels)?;
    let ce_virtual = if w.ce_on_virtual {
        tape.cross_entropy(sv, labels)?
    } else {
        tape.constant(Tensor::scalar(0.0))
    };
    let (ps_r, ps_v, pt_r, pt_v) = if w.soften {
        (
            tape.softmax(sr, 1, w.tau)?,
            tape.softmax(sv, 1, w.tau)?,
            autodiff::softmax(&tr, 1, w.tau)?,
            autodiff::softmax(&tv, 1, w.tau)?,
        )
    } else {
        (sr, sv, tr, tv)
    };
    let pt_r = tape.constant(pt_r);
    let pt_v = tape.constant(pt_v);
    let (first_kind, second_kind, beta) = match objective {
        Objective::Gram => (RelationKind::GramInterSample, Some(RelationKind::GramInterClass), w.beta),
        _ => (RelationKind::Angular, None, 0.0),
    };
    let first = relation_loss_on(tape, first_kind, (ps_r, ps_v), (pt_r, pt_v), w.huber_delta)?;
    let second = match second_kind {
        Some(k) => relation_loss_on(tape, k, (ps_r, ps_v), (pt_r, pt_v), w.huber_delta)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let ce = tape.add(ce_real, ce_virtual)?;
    let wf = tape.scale(first, w.alpha);
    let acc = tape.add(ce, wf)?;
    let ws = tape.scale(second, beta);
    let total = tape.add(acc, ws)?;
    let b = LossBreakdown {
        total: item(tape, total)?,
        ce_real: item(tape, ce_real)?,
        ce_virtual: item(tape, ce_virtual)?,
        isv: item(tape, first)?,
        icv: item(tape, second)?,
        alpha: w.alpha,
        beta,
        ..zero
    };
    Ok((total, b))
}

/// Objective value for one batch without updating anything.
pub fn evaluate_objective(
    student: &Mlp,
    teacher: Option<&Mlp>,
    real: &Tensor,
    virt: Option<&Tensor>,
    labels: &[usize],
    config: &TrainConfig,
    objective: Objective,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let params = student.register(&mut tape);
    Ok(objective_on(&mut tape, student, &params, teacher, real, virt, labels, config, objective)?.1)
}

fn run(
    mut model: Mlp,
    teacher: Option<&Mlp>,
    data: &Dataset,
    config: &TrainConfig,
    objective: Objective,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(model.spec(), data)?;
    if let Some(t) = teacher {
        check_compatible(t.spec(), data)?;
    }
    if objective.uses_teacher() && teacher.is_none() {
        return Err(Error::Parameter(format!("objective {} needs a teacher", objective.name())));
    }
    let schedule = config.schedule();
    let mut opt = Sgd::new(config.momentum, config.weight_decay)?;
    let mut log = DynamicsLog::default();
    let mut steps = Vec::new();

    for epoch in 0..config.epochs {
        let lr = schedule.lr_at(epoch);
        let mut order = data.train_indices().to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[epoch as u64])));
        let mut sums = [0.0f64; 8];
        let mut n_steps = 0usize;

        for rows in order.chunks(config.batch_size) {
            if rows.len() < MIN_BATCH {
                continue;
            }
            let (xr, labels) = data.subset(rows)?;
            let xv = if objective.uses_virtual_view() {
                Some(virtual_batch(data, rows, &config.augment, config.seed, epoch)?)
            } else {
                None
            };
            let mut tape = Tape::new();
            let params = model.register(&mut tape);
            let (total, b) =
                match objective_on(&mut tape, &model, &params, teacher, &xr, xv.as_ref(), &labels, config, objective) {
                    Ok(v) => v,
                    // overflowing logits surface as invalid probabilities downstream
                    Err(e) if !model.predict(&xr).is_ok_and(|z| z.is_finite()) => {
                        return Err(Error::Divergence {
                            epoch,
                            detail: format!("logits became non-finite at step {} ({e})", steps.len()),
                        })
                    }
                    Err(e) => return Err(e),
                };
            if !b.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("loss became {} at step {}", b.total, steps.len()),
                });
            }
            let grads = tape.backward(total)?;
            let g: Vec<Tensor> = params
                .0
                .iter()
                .zip(model.layers())
                .flat_map(|(&(w, bias), layer)| {
                    [grads.get_or_zeros(w, &layer.weight), grads.get_or_zeros(bias, &layer.bias)]
                })
                .collect();
            let mut p: Vec<&mut Tensor> = model
                .layers_mut()
                .iter_mut()
                .flat_map(|l| [&mut l.weight, &mut l.bias])
                .collect();
            opt.step(&mut p, &g, lr)?;
            if model.layers().iter().any(|l| !l.weight.is_finite() || !l.bias.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("parameters became non-finite at step {}", steps.len()),
                });
            }

            for (s, v) in sums.iter_mut().zip([
                b.total,
                b.ce_real,
                b.ce_virtual,
                b.isv,
                b.icv,
                b.kd,
                b.kept_isv_fraction(),
                b.kept_icv_fraction(),
            ]) {
                *s += v;
            }
            n_steps += 1;
            steps.push(StepRecord {
                step: steps.len(),
                epoch,
                breakdown: b,
            });
        }

        model.epoch += 1;
        let mean = |k: usize| if n_steps == 0 { 0.0 } else { sums[k] / n_steps as f64 };
        log.push(EpochRecord {
            epoch,
            lr,
            train_acc: split_accuracy(&model, data, data.train_indices())?,
            val_acc: split_accuracy(&model, data, data.val_indices())?,
            loss: mean(0),
            ce_real: mean(1),
            ce_virtual: mean(2),
            isv: mean(3),
            icv: mean(4),
            kd: mean(5),
            kept_isv_fraction: mean(6),
            kept_icv_fraction: mean(7),
        });
    }
    Ok(TrainOutcome { model, log, steps })
}

/// Cross-entropy training from a fresh initialization of `spec`.
pub fn train_teacher(spec: MlpSpec, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    run(Mlp::new(spec)?, None, data, config, Objective::CeOnly)
}

/// Distills a freshly initialized student. The teacher is only read.
pub fn distill_student(
    student_spec: MlpSpec,
    teacher: &Mlp,
    data: &Dataset,
    config: &TrainConfig,
    objective: Objective,
) -> Result<TrainOutcome> {
    distill_from(Mlp::new(student_spec)?, teacher, data, config, objective)
}

/// Distills starting from existing student weights.
pub fn distill_from(
    student: Mlp,
    teacher: &Mlp,
    data: &Dataset,
    config: &TrainConfig,
    objective: Objective,
) -> Result<TrainOutcome> {
    run(student, Some(teacher), data, config, objective)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, DatasetKind, SyntheticSpec};
    use crate::model::Activation;

    fn blobs() -> Dataset {
        make_synthetic_dataset(&SyntheticSpec {
            kind: DatasetKind::Blobs,
            classes: 3,
            dim: 4,
            per_class: 30,
            noise: 0.3,
            seed: 1,
        })
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            milestones: vec![2],
            batch_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn teacher_learns_blobs() {
        let d = blobs();
        let out = train_teacher(MlpSpec::new(4, &[16], 3, Activation::Relu, 2), &d, &quick()).unwrap();
        assert_eq!(out.log.len(), 4);
        assert!(out.final_val_acc() > 0.9);
        assert_eq!(out.model.epoch, 4);
    }

    #[test]
    fn every_objective_runs_and_keeps_identity() {
        let d = blobs();
        let teacher = train_teacher(MlpSpec::new(4, &[16], 3, Activation::Relu, 2), &d, &quick()).unwrap().model;
        let sum = teacher.checksum();
        for obj in Objective::ALL {
            let out = distill_student(MlpSpec::new(4, &[8], 3, Activation::Relu, 3), &teacher, &d, &quick(), obj).unwrap();
            for s in &out.steps {
                assert!((s.breakdown.total - s.breakdown.weighted_sum()).abs() < 1e-12, "{obj:?}");
            }
        }
        assert_eq!(teacher.checksum(), sum);
    }

    #[test]
    fn mismatched_student_rejected() {
        let d = blobs();
        let teacher = Mlp::new(MlpSpec::new(4, &[8], 3, Activation::Relu, 0)).unwrap();
        let r = distill_student(MlpSpec::new(5, &[8], 3, Activation::Relu, 0), &teacher, &d, &quick(), Objective::Vrm);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let d = blobs();
        let cfg = TrainConfig {
            lr: 1e200,
            ..quick()
        };
        let r = train_teacher(MlpSpec::new(4, &[16], 3, Activation::Relu, 2), &d, &cfg);
        assert!(matches!(r, Err(Error::Divergence { epoch: 0, .. })), "{r:?}");
    }

    #[test]
    fn breakdown_csv_shape() {
        let csv = breakdown_csv(&[]);
        assert_eq!(csv.lines().count(), 1);
    }
}
