use vrm_core::data::{make_synthetic_dataset, Dataset, DatasetKind, SyntheticSpec};
use vrm_core::desk;
use vrm_core::diagnostics::gradient_conflict;
use vrm_core::model::{Activation, MlpSpec};
use vrm_core::train::{breakdown_csv, distill_from, distill_student, train_teacher, Objective, TrainConfig};
use vrm_core::Error;

fn blobs(noise: f64) -> Dataset {
    make_synthetic_dataset(&SyntheticSpec {
        kind: DatasetKind::Blobs,
        classes: 4,
        dim: 6,
        per_class: 40,
        noise,
        seed: 3,
    })
    .unwrap()
}

fn short() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        milestones: vec![3, 5],
        batch_size: 32,
        ..Default::default()
    }
}

#[test]
fn noiseless_blobs_are_linearly_separable() {
    let d = blobs(0.0);
    let (c, dim) = (d.classes(), d.dim());
    let mut centroids = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for &i in d.train_indices() {
        let l = d.labels()[i];
        counts[l] += 1;
        for (acc, v) in centroids[l].iter_mut().zip(d.inputs().row(i)) {
            *acc += v;
        }
    }
    for (cent, n) in centroids.iter_mut().zip(&counts) {
        cent.iter_mut().for_each(|v| *v /= *n as f64);
    }
    // nearest centroid is a linear rule: argmax_k <w_k, x> + b_k
    let hits = d
        .val_indices()
        .iter()
        .filter(|&&i| {
            let x = d.inputs().row(i);
            let score = |k: usize| -> f64 {
                let w = &centroids[k];
                2.0 * w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - w.iter().map(|a| a * a).sum::<f64>()
            };
            let best = (0..c).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
            best == d.labels()[i]
        })
        .count();
    assert_eq!(hits, d.val_indices().len());
}

#[test]
fn teacher_fits_noiseless_blobs() {
    let d = blobs(0.0);
    let out = train_teacher(MlpSpec::new(6, &[32], 4, Activation::Relu, 1), &d, &short()).unwrap();
    assert!(out.final_val_acc() >= 0.99);
}

#[test]
fn same_seed_same_dataset() {
    let spec = desk::dataset_spec(4);
    let (a, b) = (make_synthetic_dataset(&spec).unwrap(), make_synthetic_dataset(&spec).unwrap());
    let (mut x, mut y) = (Vec::new(), Vec::new());
    a.write_to(&mut x).unwrap();
    b.write_to(&mut y).unwrap();
    assert_eq!(x, y);
}

#[test]
fn teacher_runs_are_reproducible() {
    let d = blobs(0.5);
    let spec = MlpSpec::new(6, &[16], 4, Activation::Tanh, 8);
    let a = train_teacher(spec.clone(), &d, &short()).unwrap();
    let b = train_teacher(spec, &d, &short()).unwrap();
    assert_eq!(a.log.to_csv(), b.log.to_csv());
    assert_eq!(a.model, b.model);
}

#[test]
fn ce_only_distillation_is_plain_training() {
    let d = blobs(0.5);
    let teacher = train_teacher(MlpSpec::new(6, &[32], 4, Activation::Relu, 1), &d, &short()).unwrap().model;
    let student = MlpSpec::new(6, &[8], 4, Activation::Relu, 2);
    let plain = train_teacher(student.clone(), &d, &short()).unwrap();
    let distilled = distill_student(student, &teacher, &d, &short(), Objective::CeOnly).unwrap();
    assert_eq!(plain.log.to_csv(), distilled.log.to_csv());
    assert!(distilled.steps.iter().all(|s| s.breakdown.isv == 0.0 && s.breakdown.icv == 0.0));
}

#[test]
fn clone_start_has_no_relation_loss() {
    let d = blobs(0.5);
    let teacher = train_teacher(MlpSpec::new(6, &[16], 4, Activation::Relu, 1), &d, &short()).unwrap().model;
    let cfg = TrainConfig {
        epochs: 1,
        milestones: vec![],
        ..short()
    };
    let out = distill_from(teacher.clone(), &teacher, &d, &cfg, Objective::Vrm).unwrap();
    let first = &out.steps[0].breakdown;
    assert!(first.isv + first.icv < 1e-10, "{first:?}");
}

#[test]
fn distillation_logs_every_epoch_and_leaves_teacher_alone() {
    let d = blobs(0.8);
    let teacher = train_teacher(MlpSpec::new(6, &[32], 4, Activation::Relu, 1), &d, &short()).unwrap().model;
    let sum = teacher.checksum();
    for obj in [Objective::Vrm, Objective::Gram, Objective::ImKd] {
        let out = distill_student(MlpSpec::new(6, &[8], 4, Activation::Relu, 2), &teacher, &d, &short(), obj).unwrap();
        assert_eq!(out.log.len(), 6);
        for r in out.log.records() {
            assert!((0.0..=1.0).contains(&r.train_acc) && (0.0..=1.0).contains(&r.val_acc));
        }
        let csv = breakdown_csv(&out.steps);
        assert_eq!(csv.lines().count(), out.steps.len() + 1);
        if obj == Objective::Vrm {
            assert!(out.log.records().iter().all(|r| r.kept_isv_fraction > 0.0 && r.kept_isv_fraction <= 1.0));
        }
    }
    assert_eq!(teacher.checksum(), sum);
}

#[test]
fn divergence_reports_epoch() {
    let d = blobs(0.5);
    let teacher = train_teacher(MlpSpec::new(6, &[16], 4, Activation::Relu, 1), &d, &short()).unwrap().model;
    let cfg = TrainConfig {
        lr: 1e300,
        ..short()
    };
    let r = distill_student(MlpSpec::new(6, &[8], 4, Activation::Relu, 2), &teacher, &d, &cfg, Objective::Vrm);
    match r {
        Err(Error::Divergence { epoch, .. }) => assert!(epoch < 6),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn conflict_matches_reference() {
    let v = vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 2.0], vec![0.3, -0.7, 0.1]];
    let r = gradient_conflict(&v).unwrap();
    assert!((r.mean_cosine.unwrap() - 0.05527088886362188).abs() < 1e-12);
    assert_eq!(r.pairs, 3);
}

#[test]
fn desk_teachers_land_in_pinned_band() {
    let cfg = TrainConfig::default();
    let mean = (0..5)
        .map(|seed| desk::prepare(seed, &desk::dataset_spec(seed), &cfg).unwrap().1.final_val_acc())
        .sum::<f64>()
        / 5.0;
    // first seeded run gave 0.901
    assert!((0.88..=0.92).contains(&mean), "mean teacher val acc {mean}");
}
