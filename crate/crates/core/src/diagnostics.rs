//! Numerical probes of training behaviour: gradient diffusion from a spurious
//! sample, gradient conflict, logit statistics and per-epoch dynamics logs.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::baselines::gram_inter_sample_on;
use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::relations::inter_sample_edges;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PilotLoss {
    /// Row-to-row mean squared error.
    Im,
    /// Huber matching of normalized pairwise-difference edges.
    Rm,
    /// Huber matching of inter-sample Gram matrices.
    RmGram,
}

impl PilotLoss {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "im" => Ok(PilotLoss::Im),
            "rm" => Ok(PilotLoss::Rm),
            "rm_gram" => Ok(PilotLoss::RmGram),
            other => Err(Error::Parameter(format!("unknown pilot loss {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PilotLoss::Im => "im",
            PilotLoss::Rm => "rm",
            PilotLoss::RmGram => "rm_gram",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PilotSpec {
    pub batch: usize,
    pub dim: usize,
    /// Row that receives the perturbation.
    pub spurious_index: usize,
    /// Scale of the perturbation.
    pub noise_scale: f64,
    pub seed: u64,
    pub loss: PilotLoss,
}

impl PilotSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 || self.dim == 0 {
            return Err(Error::Parameter(format!(
                "pilot needs batch ≥ 2 and dim ≥ 1, got {}x{}",
                self.batch, self.dim
            )));
        }
        if self.spurious_index >= self.batch {
            return Err(Error::Parameter(format!(
                "spurious index {} outside [0, {})",
                self.spurious_index, self.batch
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Parameter(format!("noise scale {} must be non-negative", self.noise_scale)));
        }
        Ok(())
    }
}

fn row_gradient_norms(x: &Tensor, y: &Tensor, loss: PilotLoss) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let yv = tape.constant(y.clone());
    let l = match loss {
        PilotLoss::Im => {
            let d = tape.sub(xv, yv)?;
            let sq = tape.mul(d, d)?;
            tape.mean_all(sq)?
        }
        PilotLoss::Rm | PilotLoss::RmGram => {
            let encode = if loss == PilotLoss::Rm { inter_sample_edges } else { gram_inter_sample_on };
            let ex = encode(&mut tape, xv)?;
            let ey = encode(&mut tape, yv)?;
            let h = tape.huber(ex, ey, 1.0)?;
            tape.mean_all(h)?
        }
    };
    let grads = tape.backward(l)?;
    let g = grads.get_or_zeros(xv, x);
    Ok((0..x.shape()[0])
        .map(|i| g.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Per-sample change in gradient norm, `|dL/dx'_i| - |dL/dx_i|`, caused by
/// adding `noise_scale * z` to one row of the student batch.
pub fn gradient_diffusion_pilot(spec: &PilotSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x = Tensor::randn(&[spec.batch, spec.dim], &mut rng);
    let y = Tensor::randn(&[spec.batch, spec.dim], &mut rng);
    let z = Tensor::randn(&[spec.dim], &mut rng);
    let mut perturbed = x.clone();
    let off = spec.spurious_index * spec.dim;
    for (k, e) in z.data().iter().enumerate() {
        perturbed.data_mut()[off + k] += spec.noise_scale * e;
    }
    let before = row_gradient_norms(&x, &y, spec.loss)?;
    let after = row_gradient_norms(&perturbed, &y, spec.loss)?;
    Ok(after.iter().zip(&before).map(|(a, b)| a - b).collect())
}

/// CSV with columns `index,delta_g,is_spurious`.
pub fn pilot_csv(delta_g: &[f64], spurious_index: usize) -> String {
    let mut out = String::from("index,delta_g,is_spurious\n");
    for (i, d) in delta_g.iter().enumerate() {
        let _ = writeln!(out, "{i},{d},{}", u8::from(i == spurious_index));
    }
    out
}

/// Median of `|delta_g|` over every index except the spurious one.
pub fn median_off_target(delta_g: &[f64], spurious_index: usize) -> f64 {
    let mut v: Vec<f64> = delta_g
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != spurious_index)
        .map(|(_, d)| d.abs())
        .collect();
    median(&mut v)
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(v: &mut [f64]) -> f64 {
    assert!(!v.is_empty(), "median of an empty slice");
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientConflict {
    /// `None` when fewer than two nonzero vectors remain.
    pub mean_cosine: Option<f64>,
    pub pairs: usize,
    pub excluded_zero: usize,
}

/// Mean pairwise cosine similarity over unordered pairs of nonzero vectors.
pub fn gradient_conflict(vectors: &[Vec<f64>]) -> Result<GradientConflict> {
    if let Some(first) = vectors.first() {
        if vectors.iter().any(|v| v.len() != first.len()) {
            return Err(Error::Input("gradient vectors differ in length".into()));
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let kept: Vec<(&Vec<f64>, f64)> = vectors
        .iter()
        .map(|v| (v, norm(v)))
        .filter(|&(_, n)| n > 0.0)
        .collect();
    let excluded_zero = vectors.len() - kept.len();
    if kept.len() < 2 {
        return Ok(GradientConflict {
            mean_cosine: None,
            pairs: 0,
            excluded_zero,
        });
    }
    let mut sum = 0.0;
    let mut pairs = 0;
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            let dot: f64 = kept[i].0.iter().zip(kept[j].0).map(|(a, b)| a * b).sum();
            sum += (dot / (kept[i].1 * kept[j].1)).clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    Ok(GradientConflict {
        mean_cosine: Some(sum / pairs as f64),
        pairs,
        excluded_zero,
    })
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2d {
    /// `(low, high)` over per-sample logit means.
    pub mean_range: (f64, f64),
    /// `(low, high)` over per-sample logit standard deviations.
    pub std_range: (f64, f64),
    /// Row-major `[mean_bin][std_bin]`.
    pub counts: Vec<u64>,
}

impl Histogram2d {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, mean_bin: usize, std_bin: usize) -> u64 {
        self.counts[mean_bin * HISTOGRAM_BINS + std_bin]
    }

    /// One row per bin, with the bin edges spelled out.
    pub fn to_csv(&self) -> String {
        let edge = |(lo, hi): (f64, f64), k: usize| lo + (hi - lo) * k as f64 / HISTOGRAM_BINS as f64;
        let mut out = String::from("mean_bin,std_bin,mean_lo,mean_hi,std_lo,std_hi,count\n");
        for a in 0..HISTOGRAM_BINS {
            for b in 0..HISTOGRAM_BINS {
                let _ = writeln!(
                    out,
                    "{a},{b},{},{},{},{},{}",
                    edge(self.mean_range, a),
                    edge(self.mean_range, a + 1),
                    edge(self.std_range, b),
                    edge(self.std_range, b + 1),
                    self.count(a, b)
                );
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitStats {
    /// Per-sample `(mean, population std)` of the logit vector.
    pub per_sample: Vec<(f64, f64)>,
    pub histogram: Histogram2d,
}

impl LogitStats {
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("index,mean,std\n");
        for (i, (m, s)) in self.per_sample.iter().enumerate() {
            let _ = writeln!(out, "{i},{m},{s}");
        }
        out
    }
}

fn data_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn bin(v: f64, (lo, hi): (f64, f64)) -> usize {
    let k = ((v - lo) / (hi - lo) * HISTOGRAM_BINS as f64).floor();
    (k.max(0.0) as usize).min(HISTOGRAM_BINS - 1)
}

/// Statistics of a `[N, C]` logit matrix.
pub fn logit_stats_of(logits: &Tensor) -> Result<LogitStats> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::shape("logit_stats", format!("expected [N, C], got {s:?}"))),
    };
    if !logits.is_finite() {
        return Err(Error::Input("non-finite logits".into()));
    }
    let per_sample: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let row = logits.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            (mean, var.sqrt())
        })
        .collect();
    let mean_range = data_range(per_sample.iter().map(|p| p.0));
    let std_range = data_range(per_sample.iter().map(|p| p.1));
    let mut counts = vec![0u64; HISTOGRAM_BINS * HISTOGRAM_BINS];
    for &(m, s) in &per_sample {
        counts[bin(m, mean_range) * HISTOGRAM_BINS + bin(s, std_range)] += 1;
    }
    Ok(LogitStats {
        per_sample,
        histogram: Histogram2d {
            mean_range,
            std_range,
            counts,
        },
    })
}

pub fn logit_stats(model: &Mlp, inputs: &Tensor) -> Result<LogitStats> {
    logit_stats_of(&model.predict(inputs)?)
}

/// Epoch-level summary of a training run; losses are means over the
/// epoch's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub loss: f64,
    pub ce_real: f64,
    pub ce_virtual: f64,
    pub isv: f64,
    pub icv: f64,
    pub kd: f64,
    pub kept_isv_fraction: f64,
    pub kept_icv_fraction: f64,
}

impl EpochRecord {
    pub fn gap(&self) -> f64 {
        self.train_acc - self.val_acc
    }
}

/// Append-only per-epoch log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DynamicsLog {
    records: Vec<EpochRecord>,
}

impl DynamicsLog {
    pub fn push(&mut self, record: EpochRecord) {
        self.records.push(record);
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,lr,train_acc,val_acc,loss,ce_real,ce_virtual,isv,icv,kd,kept_isv_fraction,kept_icv_fraction\n",
        );
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.train_acc,
                r.val_acc,
                r.loss,
                r.ce_real,
                r.ce_virtual,
                r.isv,
                r.icv,
                r.kd,
                r.kept_isv_fraction,
                r.kept_icv_fraction
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pilot(loss: PilotLoss, c: f64, seed: u64) -> Vec<f64> {
        gradient_diffusion_pilot(&PilotSpec {
            batch: 8,
            dim: 4,
            spurious_index: 3,
            noise_scale: c,
            seed,
            loss,
        })
        .unwrap()
    }

    #[test]
    fn no_perturbation_no_change() {
        for loss in [PilotLoss::Im, PilotLoss::Rm, PilotLoss::RmGram] {
            assert!(pilot(loss, 0.0, 1).iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn instance_matching_is_separable() {
        let d = pilot(PilotLoss::Im, 1.0, 2);
        for (i, v) in d.iter().enumerate() {
            if i != 3 {
                assert!(v.abs() < 1e-9);
            }
        }
        assert!(d[3] != 0.0);
    }

    #[test]
    fn relation_matching_diffuses() {
        let d = pilot(PilotLoss::Rm, 1.0, 2);
        assert!(median_off_target(&d, 3) > 1e-6);
    }

    #[test]
    fn spurious_index_checked() {
        let spec = PilotSpec {
            batch: 4,
            dim: 2,
            spurious_index: 4,
            noise_scale: 1.0,
            seed: 0,
            loss: PilotLoss::Im,
        };
        assert!(gradient_diffusion_pilot(&spec).is_err());
    }

    #[test]
    fn conflict_extremes() {
        let same = vec![vec![1.0, 2.0], vec![1.0, 2.0]];
        assert!((gradient_conflict(&same).unwrap().mean_cosine.unwrap() - 1.0).abs() < 1e-15);
        let opposite = vec![vec![1.0, 2.0], vec![-1.0, -2.0]];
        assert!((gradient_conflict(&opposite).unwrap().mean_cosine.unwrap() + 1.0).abs() < 1e-15);
        let r = gradient_conflict(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(r.mean_cosine, None);
        assert_eq!(r.excluded_zero, 1);
    }

    #[test]
    fn constant_logits_stats() {
        let s = logit_stats_of(&Tensor::full(&[5, 3], 2.0)).unwrap();
        assert!(s.per_sample.iter().all(|&(m, sd)| m == 2.0 && sd == 0.0));
        assert_eq!(s.histogram.total(), 5);
        assert_eq!(s.histogram.to_csv().lines().count(), 1 + HISTOGRAM_BINS * HISTOGRAM_BINS);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
