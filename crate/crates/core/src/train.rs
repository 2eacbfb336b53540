//! Run configuration, the training loop and its line-delimited JSON log.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::afr::{AfrConfig, FeatureSequence};
use crate::checkpoint;
use crate::data::Pair;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Rmarn};
use crate::numcore::{AdamConfig, AdamState};
use crate::objective::contrastive_loss_value;
use crate::retrieval::{self, RetrievalReport, DEFAULT_KS};
use crate::rls::RlsConfig;

pub const LOG_FORMAT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.rmck";
pub const FINAL_CHECKPOINT: &str = "final.rmck";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Directory holding `manifest.json` (or the manifest itself).
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 100,
            batch_size: 64,
            seed: 0,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    /// Named starting points: `large` (full size), `fast` (reduced width and
    /// depth) and `small` (the desk-scale synthetic profile).
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "large" => Ok(base),
            "fast" => Ok(Self {
                model: ModelConfig {
                    afr: AfrConfig {
                        d_model: 256,
                        nhead: 16,
                        layers: 4,
                        ffn_width: 256,
                        ..AfrConfig::default()
                    },
                    rls: RlsConfig {
                        manifolds: 8,
                        rank: 64,
                        ..RlsConfig::default()
                    },
                    ..ModelConfig::default()
                },
                epochs: 50,
                batch_size: 32,
                ..base
            }),
            "small" => Ok(Self {
                model: ModelConfig {
                    afr: AfrConfig {
                        d_model: 64,
                        nhead: 4,
                        layers: 2,
                        ffn_width: 64,
                        ..AfrConfig::default()
                    },
                    rls: RlsConfig {
                        manifolds: 4,
                        rank: 16,
                        ..RlsConfig::default()
                    },
                    ..ModelConfig::default()
                },
                optimizer: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                epochs: 30,
                batch_size: 16,
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected large, fast or small)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }

    /// Short hash identifying everything that influences results (the
    /// output directory is excluded).
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub rsum: f64,
}

impl From<&RetrievalReport> for SplitMetrics {
    fn from(r: &RetrievalReport) -> Self {
        Self {
            r1: r.at(1).unwrap_or(0.0),
            r5: r.at(5).unwrap_or(0.0),
            r10: r.at(10).unwrap_or(0.0),
            rsum: r.rsum,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub epoch: usize,
    /// Mean training-mode batch loss over the epoch (absent at epoch 0).
    pub train_loss: Option<f64>,
    /// Evaluation-mode loss over the training batches in file order.
    pub eval_loss: f64,
    pub val_text_to_point: Option<SplitMetrics>,
    pub val_point_to_text: Option<SplitMetrics>,
    pub val_mean_rsum: Option<f64>,
    /// Evaluation-mode loss of the whole validation split as one batch.
    pub val_loss: Option<f64>,
}

pub struct TrainResult {
    pub final_model: Rmarn<f32>,
    pub best_model: Rmarn<f32>,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
}

fn split_pairs(pairs: &[Pair]) -> (Vec<FeatureSequence>, Vec<FeatureSequence>) {
    pairs
        .iter()
        .map(|p| (p.text.clone(), p.point.clone()))
        .unzip()
}

/// Evaluation-mode score matrix for a list of pairs (rows: texts).
pub fn score_pairs(model: &Rmarn<f32>, pairs: &[Pair]) -> Result<crate::numcore::Tensor<f32>> {
    let (t, p) = split_pairs(pairs);
    model.score_matrix(&t, &p)
}

/// Both-direction retrieval reports over `pairs`.
pub fn evaluate_pairs(model: &Rmarn<f32>, pairs: &[Pair]) -> Result<[RetrievalReport; 2]> {
    if pairs.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty split".into()));
    }
    let s = score_pairs(model, pairs)?;
    retrieval::evaluate(&s, &DEFAULT_KS)
}

/// Consecutive batches; a trailing batch of one pair is dropped since the
/// contrastive loss needs at least two.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    order
        .chunks(size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn gather(pairs: &[Pair], idx: &[usize]) -> (Vec<FeatureSequence>, Vec<FeatureSequence>) {
    idx.iter()
        .map(|&i| (pairs[i].text.clone(), pairs[i].point.clone()))
        .unzip()
}

fn eval_loss(model: &Rmarn<f32>, pairs: &[Pair], size: usize) -> Result<f64> {
    let order: Vec<usize> = (0..pairs.len()).collect();
    let bs = batches(&order, size);
    let mut total = 0.0;
    for b in &bs {
        let (t, p) = gather(pairs, b);
        total += f64::from(model.eval_loss(&t, &p)?);
    }
    Ok(total / bs.len() as f64)
}

/// Trains from a fresh initialization; `on_epoch` sees each record as soon
/// as it is produced.
pub fn train(
    cfg: &RunConfig,
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    on_epoch: &mut dyn FnMut(&EpochRecord, &Rmarn<f32>, bool) -> Result<()>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_pairs.len() < 2 {
        return Err(Error::Config(format!(
            "training split needs at least 2 pairs, got {}",
            train_pairs.len()
        )));
    }
    let mut model = Rmarn::<f32>::new(cfg.model, cfg.seed)?;
    let mut adam = AdamState::new(cfg.optimizer, &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let hash = cfg.config_hash();

    let record = |epoch, train_loss, model: &Rmarn<f32>| -> Result<EpochRecord> {
        let eval_loss = eval_loss(model, train_pairs, cfg.batch_size)?;
        let (tp, pt, mean, val_loss) = if val_pairs.is_empty() {
            (None, None, None, None)
        } else {
            let sim = score_pairs(model, val_pairs)?;
            let r = retrieval::evaluate(&sim, &DEFAULT_KS)?;
            let loss = if val_pairs.len() >= 2 {
                Some(f64::from(contrastive_loss_value(&sim, &model.config.loss)?))
            } else {
                None
            };
            (
                Some(SplitMetrics::from(&r[0])),
                Some(SplitMetrics::from(&r[1])),
                Some(retrieval::mean_rsum(&r)),
                loss,
            )
        };
        Ok(EpochRecord {
            format_version: LOG_FORMAT_VERSION,
            seed: cfg.seed,
            config_hash: hash.clone(),
            epoch,
            train_loss,
            eval_loss,
            val_text_to_point: tp,
            val_point_to_text: pt,
            val_mean_rsum: mean,
            val_loss,
        })
    };

    // higher validation Rsum wins; a saturated Rsum falls back to lower loss
    let key = |r: &EpochRecord| {
        (
            r.val_mean_rsum.unwrap_or(f64::NEG_INFINITY),
            -r.val_loss.unwrap_or(f64::INFINITY),
        )
    };
    let first = record(0, None, &model)?;
    let mut best_key = key(&first);
    let mut best_model = model.clone();
    let mut best_epoch = 0;
    on_epoch(&first, &model, true)?;
    let mut records = vec![first];

    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let bs = batches(&order, cfg.batch_size);
        for (step, b) in bs.iter().enumerate() {
            let (t, p) = gather(train_pairs, b);
            let (loss, grads) = model
                .loss_and_gradients(&t, &p, Some(&mut rng))
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!(
                        "epoch {epoch}, step {}: {msg}",
                        step + 1
                    )),
                    other => other,
                })?;
            adam.step(&mut model.params, &grads).map_err(|e| match e {
                Error::Training { param, reason } => Error::Training {
                    param,
                    reason: format!("{reason} at epoch {epoch}, step {}", step + 1),
                },
                other => other,
            })?;
            total += f64::from(loss);
        }
        let rec = record(epoch, Some(total / bs.len() as f64), &model)?;
        let improved = !val_pairs.is_empty() && key(&rec) > best_key;
        if improved {
            best_key = key(&rec);
            best_model = model.clone();
            best_epoch = epoch;
        }
        on_epoch(&rec, &model, improved)?;
        records.push(rec);
    }
    Ok(TrainResult {
        final_model: model,
        best_model,
        best_epoch,
        records,
    })
}

/// Trains and writes `metrics.jsonl`, `best.rmck`, `final.rmck` and
/// `config.json` into `out`.
pub fn train_to_dir(
    cfg: &RunConfig,
    train_pairs: &[Pair],
    val_pairs: &[Pair],
    out: &Path,
) -> Result<TrainResult> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg)? + "\n")
        .map_err(|e| Error::io(format!("writing {}", cfg_path.display()), e))?;
    let log_path = out.join(METRICS_FILE);
    let mut log = fs::File::create(&log_path)
        .map_err(|e| Error::io(format!("creating {}", log_path.display()), e))?;
    let mut sink = |rec: &EpochRecord, model: &Rmarn<f32>, improved: bool| -> Result<()> {
        let line = serde_json::to_string(rec)?;
        writeln!(log, "{line}").map_err(|e| Error::io(format!("writing {}", log_path.display()), e))?;
        if improved {
            let meta = serde_json::json!({ "epoch": rec.epoch, "seed": cfg.seed,
                "config_hash": rec.config_hash });
            checkpoint::save(&out.join(BEST_CHECKPOINT), model, meta)?;
        }
        log::info!(
            "epoch {} eval_loss {:.4} val_mean_rsum {}",
            rec.epoch,
            rec.eval_loss,
            rec.val_mean_rsum.map_or("-".into(), |v| format!("{v:.1}"))
        );
        Ok(())
    };
    let result = train(cfg, train_pairs, val_pairs, &mut sink)?;
    let meta = serde_json::json!({ "epoch": cfg.epochs, "seed": cfg.seed,
        "config_hash": cfg.config_hash() });
    checkpoint::save(&out.join(FINAL_CHECKPOINT), &result.final_model, meta)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in ["large", "fast", "small"] {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            out: Some("/tmp/x".into()),
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = RunConfig { seed: 1, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn batching_drops_singletons() {
        let order: Vec<usize> = (0..9).collect();
        assert_eq!(batches(&order, 4).len(), 2);
        assert_eq!(batches(&order, 3).len(), 3);
    }

    #[test]
    fn large_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.optimizer.lr, 0.008);
        assert_eq!((c.optimizer.beta1, c.optimizer.beta2), (0.91, 0.9993));
        assert_eq!((c.epochs, c.batch_size), (100, 64));
        assert_eq!(c.model.afr.nhead, 32);
        assert_eq!(c.model.rls.rank, 256);
    }
}
