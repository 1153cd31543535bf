//! Values frozen from independent reference computations (NumPy scripts kept
//! out of tree) and seeded regression constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vrm_core::augment::{virtual_view, AugmentOp, AugmentSpec};
use vrm_core::autodiff::{entropy, huber, kld, softmax};
use vrm_core::diagnostics::logit_stats;
use vrm_core::model::{Activation, Mlp, MlpSpec};
use vrm_core::relations::LogitBatch;
use vrm_core::vrm_loss::{total_loss, VrmWeights};
use vrm_core::Tensor;

fn close(a: f64, b: f64, tol: f64) {
    assert!((a - b).abs() <= tol, "{a} vs {b}");
}

#[test]
fn elementwise_reference_values() {
    let p = softmax(&Tensor::vector(&[2.0, 0.0, 0.0]).reshape(&[1, 3]).unwrap(), 1, 2.0).unwrap();
    for (a, b) in p.data().iter().zip([0.5761168847658291, 0.21194155761708547, 0.21194155761708547]) {
        close(*a, b, 1e-15);
    }
    let h = entropy(&Tensor::from_rows(&[vec![0.75, 0.25]]).unwrap(), 1).unwrap();
    close(h.data()[0], 0.5623351446188083, 1e-15);
    let k = kld(
        &Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        &Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap(),
        1.0,
    )
    .unwrap();
    close(k, 0.46211715726000974, 1e-15);
    let a = Tensor::vector(&[0.5, 3.0]);
    let b = Tensor::vector(&[0.0, 0.0]);
    assert_eq!(huber(&a, &b, 1.0).unwrap().data(), &[0.125, 2.5]);
    assert_eq!(huber(&Tensor::vector(&[-2.0]), &Tensor::vector(&[0.0]), 0.5).unwrap().data(), &[0.875]);
}

fn reference_batches() -> (LogitBatch, LogitBatch) {
    let s = LogitBatch::new(
        Tensor::from_rows(&[vec![1.0, -0.5, 0.3], vec![0.2, 0.8, -1.0], vec![-0.7, 0.1, 0.9]]).unwrap(),
        Tensor::from_rows(&[vec![0.9, -0.2, 0.1], vec![0.5, 0.4, -0.6], vec![-1.1, 0.3, 1.2]]).unwrap(),
    )
    .unwrap();
    let t = LogitBatch::new(
        Tensor::from_rows(&[vec![2.0, -1.0, 0.0], vec![0.0, 1.5, -0.5], vec![-1.0, 0.0, 2.5]]).unwrap(),
        Tensor::from_rows(&[vec![1.5, -0.5, 0.2], vec![0.3, 1.0, -0.2], vec![-0.8, 0.4, 2.0]]).unwrap(),
    )
    .unwrap();
    (s, t)
}

#[test]
fn full_objective_matches_reference_at_m95() {
    let (s, t) = reference_batches();
    let b = total_loss(&s, &t, &[0, 1, 2], &VrmWeights::default()).unwrap();
    close(b.ce_real, 0.5275236264088509, 1e-14);
    close(b.ce_virtual, 0.631102682731505, 1e-14);
    close(b.isv, 0.0875173547972116, 1e-14);
    close(b.icv, 0.0967431494518754, 1e-14);
    close(b.total, 15.456628505643453, 1e-12);
    assert_eq!((b.kept_isv, b.kept_icv), (9, 9));
}

#[test]
fn full_objective_matches_reference_at_m50() {
    let (s, t) = reference_batches();
    let w = VrmWeights {
        uep_percentile: 50.0,
        ..VrmWeights::default()
    };
    let b = total_loss(&s, &t, &[0, 1, 2], &w).unwrap();
    close(b.isv, 0.1489350126285175, 1e-14);
    close(b.icv, 0.15401639811744333, 1e-14);
    close(b.total, 25.15083266534878, 1e-12);
    assert_eq!((b.kept_isv, b.kept_icv), (5, 5));
}

#[test]
fn seeded_virtual_views() {
    let x = [1.0, -0.5, 2.0, 0.25];
    let spec = AugmentSpec {
        n_ops: 2,
        magnitude: 0.5,
        op_pool: AugmentOp::ALL.to_vec(),
        seed: 42,
    };
    let pinned: [(u64, [f64; 4]); 3] = [
        (0, [0.04304566969324229, -0.7868303461618518, 2.1431040877272225, 0.4781382451610603]),
        (1, [0.8733365299171527, -0.5542963372782443, 1.7373352978365522, 0.19312590097180493]),
        (7, [1.291069759597443, -0.5683071320212925, 2.891529470094341, 0.3326571918395399]),
    ];
    for (seed, expected) in pinned {
        assert_eq!(virtual_view(&x, &spec, seed).unwrap(), expected, "seed {seed}");
    }
}

#[test]
fn seeded_logit_histogram() {
    let m = Mlp::new(MlpSpec::new(4, &[8], 3, Activation::Tanh, 5)).unwrap();
    let inputs = Tensor::randn(&[200, 4], &mut ChaCha8Rng::seed_from_u64(9));
    let stats = logit_stats(&m, &inputs).unwrap();
    assert_eq!(stats.histogram.total(), 200);
    assert_eq!(stats.histogram.to_csv(), include_str!("data/logit_hist.csv"));
}
