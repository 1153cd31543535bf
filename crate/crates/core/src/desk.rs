//! The desk-scale experiment: ten-arm spirals, a two-hidden-layer teacher
//! and a one-hidden-layer student, plus seed sweeps over objectives and
//! hyperparameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{make_synthetic_dataset, Dataset, DatasetKind, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{Activation, Mlp, MlpSpec};
use crate::train::{distill_student, train_teacher, Objective, TrainConfig, TrainOutcome};

pub const CLASSES: usize = 10;
pub const DIM: usize = 16;
pub const PER_CLASS: usize = 100;
/// Puts a cross-entropy-only student at roughly 70-85% validation accuracy.
pub const NOISE: f64 = 0.05;
pub const TEACHER_HIDDEN: &[usize] = &[128, 128];
pub const STUDENT_HIDDEN: &[usize] = &[32];

pub fn dataset_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        kind: DatasetKind::Spirals,
        classes: CLASSES,
        dim: DIM,
        per_class: PER_CLASS,
        noise: NOISE,
        seed,
    }
}

pub fn teacher_spec(dim: usize, classes: usize, seed: u64) -> MlpSpec {
    MlpSpec::new(dim, TEACHER_HIDDEN, classes, Activation::Relu, 1000 + seed)
}

pub fn student_spec(dim: usize, classes: usize, seed: u64) -> MlpSpec {
    MlpSpec::new(dim, STUDENT_HIDDEN, classes, Activation::Relu, 2000 + seed)
}

/// Dataset and trained teacher for one seed.
pub fn prepare(seed: u64, data: &SyntheticSpec, config: &TrainConfig) -> Result<(Dataset, TrainOutcome)> {
    let d = make_synthetic_dataset(&SyntheticSpec { seed, ..data.clone() })?;
    let cfg = TrainConfig { seed, ..config.clone() };
    let t = train_teacher(teacher_spec(d.dim(), d.classes(), seed), &d, &cfg)?;
    Ok((d, t))
}

pub fn distill(seed: u64, data: &Dataset, teacher: &Mlp, config: &TrainConfig, objective: Objective) -> Result<TrainOutcome> {
    let cfg = TrainConfig { seed, ..config.clone() };
    distill_student(student_spec(data.dim(), data.classes(), seed), teacher, data, &cfg, objective)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub objectives: Vec<Objective>,
    pub seeds: Vec<u64>,
    /// Optional config key swept over the listed values.
    pub grid: Option<(String, Vec<String>)>,
    pub base: TrainConfig,
    pub data: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub objective: Objective,
    pub param: String,
    pub value: String,
    pub seed: u64,
    pub teacher_val_acc: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl CellResult {
    pub fn gap(&self) -> f64 {
        self.train_acc - self.val_acc
    }
}

pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<CellResult>> {
    if spec.objectives.is_empty() || spec.seeds.is_empty() {
        return Err(Error::Usage("empty sweep: need at least one objective and one seed".into()));
    }
    let (param, values) = match &spec.grid {
        Some((k, vs)) if vs.is_empty() => return Err(Error::Usage(format!("empty grid for {k}"))),
        Some((k, vs)) => (k.clone(), vs.clone()),
        None => (String::new(), vec![String::new()]),
    };
    let mut configs = Vec::new();
    for v in &values {
        let mut c = spec.base.clone();
        if !param.is_empty() {
            c.set(&param, v)?;
        }
        c.validate()?;
        configs.push(c);
    }
    let mut out = Vec::new();
    for &seed in &spec.seeds {
        let (data, teacher) = prepare(seed, &spec.data, &spec.base)?;
        for &objective in &spec.objectives {
            for (v, cfg) in values.iter().zip(&configs) {
                let run = distill(seed, &data, &teacher.model, cfg, objective)?;
                let last = run.log.last().expect("at least one epoch");
                out.push(CellResult {
                    objective,
                    param: param.clone(),
                    value: v.clone(),
                    seed,
                    teacher_val_acc: teacher.final_val_acc(),
                    train_acc: last.train_acc,
                    val_acc: last.val_acc,
                });
            }
        }
    }
    Ok(out)
}

pub fn cells_csv(cells: &[CellResult]) -> String {
    let mut out = String::from("objective,param,value,seed,teacher_val_acc,train_acc,val_acc,gap\n");
    for c in cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            c.objective.name(),
            c.param,
            c.value,
            c.seed,
            c.teacher_val_acc,
            c.train_acc,
            c.val_acc,
            c.gap()
        );
    }
    out
}

/// Seed-averaged rows, one per (objective, value), in first-seen order.
pub fn summary_csv(cells: &[CellResult]) -> String {
    let mut order: Vec<(String, String)> = Vec::new();
    let mut acc: BTreeMap<(String, String), (f64, f64, usize)> = BTreeMap::new();
    for c in cells {
        let key = (c.objective.name().to_string(), c.value.clone());
        if !acc.contains_key(&key) {
            order.push(key.clone());
        }
        let e = acc.entry(key).or_insert((0.0, 0.0, 0));
        e.0 += c.val_acc;
        e.1 += c.gap();
        e.2 += 1;
    }
    let param = cells.first().map_or("", |c| c.param.as_str());
    let mut out = String::from("objective,param,value,seeds,mean_val_acc,mean_gap\n");
    for key in order {
        let (v, g, n) = acc[&key];
        let _ = writeln!(out, "{},{param},{},{n},{},{}", key.0, key.1, v / n as f64, g / n as f64);
    }
    out
}
