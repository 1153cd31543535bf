//! Stochastic, label-preserving transformations of input vectors.
//!
//! Every operation perturbs its input by at most `magnitude * (|x| + 1)` in
//! Euclidean norm, so the distance between a sample and its virtual view is
//! controlled by `magnitude` and `n_ops`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentOp {
    GaussianNoise,
    FeatureDropout,
    RandomScale,
    RandomShift,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 4] = [
        AugmentOp::GaussianNoise,
        AugmentOp::FeatureDropout,
        AugmentOp::RandomScale,
        AugmentOp::RandomShift,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(AugmentOp::GaussianNoise),
            "feature_dropout" => Ok(AugmentOp::FeatureDropout),
            "random_scale" => Ok(AugmentOp::RandomScale),
            "random_shift" => Ok(AugmentOp::RandomShift),
            other => Err(Error::Parameter(format!("unknown augmentation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::GaussianNoise => "gaussian_noise",
            AugmentOp::FeatureDropout => "feature_dropout",
            AugmentOp::RandomScale => "random_scale",
            AugmentOp::RandomShift => "random_shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub n_ops: usize,
    /// In `[0, 1]`.
    pub magnitude: f64,
    pub op_pool: Vec<AugmentOp>,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            n_ops: 2,
            magnitude: 0.3,
            op_pool: AugmentOp::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(Error::Parameter(format!("augmentation magnitude {} outside [0, 1]", self.magnitude)));
        }
        if self.n_ops > self.op_pool.len() {
            return Err(Error::Parameter(format!(
                "cannot draw {} distinct ops from a pool of {}",
                self.n_ops,
                self.op_pool.len()
            )));
        }
        for (i, op) in self.op_pool.iter().enumerate() {
            if self.op_pool[..i].contains(op) {
                return Err(Error::Parameter(format!("{} listed twice in op pool", op.name())));
            }
        }
        Ok(())
    }
}

/// Mixes a base seed with stream coordinates (e.g. epoch and sample index).
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base;
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p));
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d1_049b_b133_111b);
    z ^ (z >> 31)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `delta` if needed so that `|delta| <= budget`.
fn clip(delta: &mut [f64], budget: f64) {
    let n = norm(delta);
    if n > budget {
        let s = budget / n;
        delta.iter_mut().for_each(|d| *d *= s);
    }
}

fn apply(op: AugmentOp, x: &mut [f64], magnitude: f64, rng: &mut ChaCha8Rng) {
    let budget = magnitude * (norm(x) + 1.0);
    let d = x.len() as f64;
    let mut delta: Vec<f64> = match op {
        AugmentOp::GaussianNoise => (0..x.len())
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                magnitude * e / d.sqrt()
            })
            .collect(),
        AugmentOp::FeatureDropout => x
            .iter()
            .map(|&v| if rng.random::<f64>() < 0.5 * magnitude { -v } else { 0.0 })
            .collect(),
        AugmentOp::RandomScale => {
            let s = rng.random_range(-1.0..=1.0) * magnitude;
            x.iter().map(|&v| s * v).collect()
        }
        AugmentOp::RandomShift => {
            let mut dir: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
            let n = norm(&dir);
            let len = rng.random::<f64>() * magnitude;
            if n > 0.0 {
                dir.iter_mut().for_each(|v| *v *= len / n);
            }
            dir
        }
    };
    clip(&mut delta, budget);
    x.iter_mut().zip(&delta).for_each(|(v, d)| *v += d);
}

/// A virtual view of `x`: `n_ops` distinct operations drawn from the pool and
/// applied in draw order. Deterministic in `(spec.seed, per_sample_seed)`.
pub fn virtual_view(x: &[f64], spec: &AugmentSpec, per_sample_seed: u64) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut out = x.to_vec();
    if spec.n_ops == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, &[per_sample_seed]));
    for k in sample(&mut rng, spec.op_pool.len(), spec.n_ops).into_vec() {
        apply(spec.op_pool[k], &mut out, spec.magnitude, &mut rng);
    }
    Ok(out)
}
