//! Flat `key = value` configuration text for [`TrainConfig`].
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, which is how command-line flags are layered over
//! a file.

use std::fmt::Write as _;

use crate::augment::AugmentOp;
use crate::error::{Error, Result};
use crate::train::TrainConfig;
use crate::vrm_loss::{EdgeMetric, Reduction};

/// Parses `key = value` lines in order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("config line {}: expected key=value, got {line:?}", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Usage(format!("config line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parameter(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parameter(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

pub const KEYS: &[&str] = &[
    "alpha",
    "beta",
    "tau",
    "huber_delta",
    "uep",
    "metric",
    "reduction",
    "ce_on_virtual",
    "soften",
    "vertex_weight",
    "kd_weight",
    "lr",
    "momentum",
    "weight_decay",
    "milestones",
    "gamma",
    "batch_size",
    "epochs",
    "seed",
    "aug_n_ops",
    "aug_magnitude",
    "aug_ops",
    "aug_seed",
];

impl TrainConfig {
    /// Assigns one configuration key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let w = &mut self.weights;
        match key {
            "alpha" => w.alpha = num(key, v)?,
            "beta" => w.beta = num(key, v)?,
            "tau" => w.tau = num(key, v)?,
            "huber_delta" => w.huber_delta = num(key, v)?,
            "uep" => w.uep_percentile = num(key, v)?,
            "metric" => {
                w.metric = match v {
                    "huber" => EdgeMetric::Huber,
                    "mse" => EdgeMetric::Mse,
                    _ => return Err(Error::Parameter(format!("metric: expected huber or mse, got {v:?}"))),
                }
            }
            "reduction" => {
                w.reduction = match v {
                    "mean" => Reduction::MeanOverKept,
                    "sum" => Reduction::Sum,
                    _ => return Err(Error::Parameter(format!("reduction: expected mean or sum, got {v:?}"))),
                }
            }
            "ce_on_virtual" => w.ce_on_virtual = flag(key, v)?,
            "soften" => w.soften = flag(key, v)?,
            "vertex_weight" => w.vertex_weight = num(key, v)?,
            "kd_weight" => self.kd_weight = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "weight_decay" => self.weight_decay = num(key, v)?,
            "milestones" => self.milestones = list(key, v)?,
            "gamma" => self.gamma = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "aug_n_ops" => self.augment.n_ops = num(key, v)?,
            "aug_magnitude" => self.augment.magnitude = num(key, v)?,
            "aug_ops" => {
                self.augment.op_pool = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| AugmentOp::parse(s.trim())).collect::<Result<_>>()?
                }
            }
            "aug_seed" => self.augment.seed = num(key, v)?,
            _ => return Err(Error::Parameter(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        let join = |xs: Vec<String>| xs.join(",");
        let values = [
            w.alpha.to_string(),
            w.beta.to_string(),
            w.tau.to_string(),
            w.huber_delta.to_string(),
            w.uep_percentile.to_string(),
            match w.metric {
                EdgeMetric::Huber => "huber".into(),
                EdgeMetric::Mse => "mse".into(),
            },
            match w.reduction {
                Reduction::MeanOverKept => "mean".into(),
                Reduction::Sum => "sum".into(),
            },
            w.ce_on_virtual.to_string(),
            w.soften.to_string(),
            w.vertex_weight.to_string(),
            self.kd_weight.to_string(),
            self.lr.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            join(self.milestones.iter().map(|m| m.to_string()).collect()),
            self.gamma.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.seed.to_string(),
            self.augment.n_ops.to_string(),
            self.augment.magnitude.to_string(),
            join(self.augment.op_pool.iter().map(|o| o.name().to_string()).collect()),
            self.augment.seed.to_string(),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(values).collect()
    }

    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn later_values_win() {
        let pairs = parse_kv("# comment\nalpha = 64\n\nalpha=256\nmilestones = 5, 8\n").unwrap();
        let mut c = TrainConfig::default();
        c.apply(&pairs).unwrap();
        assert_eq!(c.weights.alpha, 256.0);
        assert_eq!(c.milestones, vec![5, 8]);
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = TrainConfig::default();
        c.set("aug_ops", "random_scale,gaussian_noise").unwrap();
        c.set("metric", "mse").unwrap();
        c.set("lr", "0.125").unwrap();
        let mut d = TrainConfig::default();
        d.apply(&parse_kv(&c.to_kv_text()).unwrap()).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_kv("alpha").is_err());
        let mut c = TrainConfig::default();
        assert!(c.set("alpah", "1").is_err());
        assert!(c.set("alpha", "lots").is_err());
        assert!(c.set("soften", "maybe").is_err());
    }
}
