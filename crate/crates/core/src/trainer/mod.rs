//! Mini-batch training of both experts on the seen-class samples.

mod checkpoint;
mod rmsprop;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, BlobInfo, FORMAT_VERSION, MAGIC,
};
pub use rmsprop::{Rmsprop, RmspropState, RMSPROP_EPS};

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dan::check_lambda;
use crate::data::DatasetBundle;
use crate::dedn::{ClusterPartition, DednModel, ModelDims};
use crate::error::{Error, Result};
use crate::objectives::{total_loss_on, Batch, LossBreakdown, LossWeights};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub smoothing_alpha: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub lambda_rc: f64,
    pub lambda_e: f64,
    /// Scale every sample's feature tensor to unit norm before use.
    pub unit_norm_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 50,
            momentum: 0.9,
            smoothing_alpha: 0.99,
            weight_decay: 1e-4,
            epochs: 200,
            seed: 0,
            weights: LossWeights::default(),
            lambda_rc: 0.8,
            lambda_e: 0.9,
            unit_norm_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        for (name, v) in [("momentum", self.momentum), ("smoothing_alpha", self.smoothing_alpha)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        self.weights.validate()?;
        check_lambda("lambda_rc", self.lambda_rc)?;
        check_lambda("lambda_e", self.lambda_e)?;
        Ok(())
    }

    pub fn optimizer(&self) -> Rmsprop {
        Rmsprop {
            lr: self.lr,
            alpha: self.smoothing_alpha,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            eps: RMSPROP_EPS,
        }
    }

    /// Reads a JSON config; absent fields take their defaults.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_mal_ec: f64,
    pub mean_mal_ef: f64,
    /// cExp plus mean fExp alignment loss, unweighted.
    pub mean_align: f64,
    pub mean_distill: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: DednModel,
    pub log: Vec<EpochLog>,
}

/// Deterministic generator for the sample order of `epoch`.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

pub fn init_model(bundle: &DatasetBundle, partition: &ClusterPartition, seed: u64) -> Result<DednModel> {
    let dims = ModelDims {
        c: bundle.c(),
        r: bundle.r(),
        g: bundle.g(),
        d: bundle.d(),
    };
    DednModel::init_uniform(dims, partition.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn train(bundle: &DatasetBundle, partition: &ClusterPartition, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(bundle, partition, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    bundle: &DatasetBundle,
    partition: &ClusterPartition,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    bundle.validate()?;
    let normalized;
    let bundle = if cfg.unit_norm_features {
        normalized = {
            let mut b = bundle.clone();
            b.unit_normalize_features();
            b
        };
        &normalized
    } else {
        bundle
    };
    if partition.d() != bundle.d() {
        return Err(Error::contract(format!(
            "partition covers {} attributes, bundle has {}",
            partition.d(),
            bundle.d()
        )));
    }
    let mut model = init_model(bundle, partition, cfg.seed)?;
    let optimizer = cfg.optimizer();
    let mut state = RmspropState::new(model.matrices());
    let train_ids = &bundle.splits.train_indices;
    if train_ids.is_empty() {
        return Err(Error::contract("no training samples"));
    }
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order = train_ids.clone();
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        let mut sums = [0.0f64; 5];
        for (batch_no, ids) in order.chunks(cfg.batch_size).enumerate() {
            let features: Vec<_> = ids.iter().map(|&i| bundle.feature(i)).collect();
            let labels: Vec<usize> = ids.iter().map(|&i| bundle.label(i)).collect();
            let batch = Batch {
                v: &bundle.attr_vectors,
                attributes: &bundle.attributes,
                features: &features,
                labels: &labels,
                splits: &bundle.splits,
            };

            let mut tape = Tape::new();
            let vars = model.to_tape(&mut tape);
            let terms = total_loss_on(&mut tape, &vars, &model.partition, &batch, &cfg.weights, cfg.lambda_rc)?;
            let values = LossBreakdown::read(&tape, &terms)?;
            if let Some(term) = values.first_non_finite() {
                return Err(Error::NonFinite {
                    term,
                    epoch,
                    batch: batch_no,
                });
            }
            let mut grads = tape.backward(terms.total)?;
            let grads: Vec<_> = vars.all().into_iter().map(|v| grads.take(v)).collect();
            optimizer.step(&mut model.matrices_mut(), &grads, &mut state)?;

            let n = ids.len() as f64;
            let parts = [
                values.total,
                values.mal_ec,
                values.mal_ef,
                values.align_ec + values.align_ef,
                values.distill,
            ];
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p * n;
            }
        }
        let n = train_ids.len() as f64;
        let entry = EpochLog {
            epoch,
            mean_total: sums[0] / n,
            mean_mal_ec: sums[1] / n,
            mean_mal_ef: sums[2] / n,
            mean_align: sums[3] / n,
            mean_distill: sums[4] / n,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { model, log })
}

/// Writes the log as one JSON object per line.
pub fn write_log(log: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).expect("log entry serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SynthConfig};

    fn tiny() -> (DatasetBundle, ClusterPartition) {
        let b = gen_synthetic(&SynthConfig {
            n_per_class: 6,
            k_seen: 3,
            k_unseen: 2,
            c: 3,
            h: 2,
            w: 2,
            d: 5,
            g: 3,
            noise_sigma: 0.1,
            seed: 4,
        })
        .unwrap();
        let p = ClusterPartition::contiguous(&[2, 3]).unwrap();
        (b, p)
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let (b, p) = tiny();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&b, &p, &cfg).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.model, init_model(&b, &p, cfg.seed).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (b, p) = tiny();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let a = train(&b, &p, &cfg).unwrap();
        let c = train(&b, &p, &cfg).unwrap();
        assert_eq!(checkpoint_bytes(&a.model, &cfg).unwrap(), checkpoint_bytes(&c.model, &cfg).unwrap());
        assert_eq!(a.log, c.log);
    }

    #[test]
    fn logged_terms_sum_to_total() {
        let (b, p) = tiny();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 5,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let w = cfg.weights;
        for e in train(&b, &p, &cfg).unwrap().log {
            let sum = e.mean_mal_ec + e.mean_mal_ef + w.beta * e.mean_align + w.gamma * e.mean_distill;
            assert!((sum - e.mean_total).abs() < 1e-5, "{e:?}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { momentum: 1.0, ..TrainConfig::default() },
            TrainConfig { lambda_e: 1.2, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn config_file_uses_defaults_for_absent_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"epochs": 7, "weights": {"epsilon": 0.5}}"#).unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.weights.epsilon, 0.5);
        assert_eq!(cfg.weights.beta, 0.001);
        assert_eq!(cfg.batch_size, 50);
        fs::write(&path, r#"{"epoch": 7}"#).unwrap();
        assert!(matches!(TrainConfig::from_file(&path), Err(Error::Config(_))));
    }
}
