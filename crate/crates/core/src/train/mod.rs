//! Contrastive training with positive/negative sampling, Adam, validation
//! based early stopping and per-epoch checkpoints, plus the self-supervised
//! pretraining used for the initialisation experiments.
//!
//! One epoch walks every training spoken word once as an anchor. Anchors are
//! processed in *pools*: each step draws `per_class_per_step` words and
//! scenes from each of `classes_per_step` familiar classes, encodes each of
//! them once, and scores all pool pairs in one similarity matrix. Every word in the pool is an
//! anchor paired with a scene of its class; its positives and negatives are
//! other pool items, so the per-anchor loss is exactly the one defined in
//! [`crate::losses`] while the encoders run once per item instead of once per
//! anchor term.

mod log;
mod pretrain;
mod sampler;
mod validate;

pub use log::{EpochRecord, TrainLog};
pub use pretrain::{pretrain_audio, pretrain_vision, PretrainConfig, PretrainReport};
pub use sampler::{sample_contrastive_batch, ClassIndex, StepPool};
pub use validate::{validate, DevSet, ValidationResult};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{loss_graph, LossConfig, LossError, LossKind};
use crate::model::{
    audio_branch, image_batch, init_params, similarity_graph, vision_branch, AudioBatch,
    Checkpoint, InitStrategy, ModelConfig, ModelError, ModelParams, ParamNodes, PretrainArtifacts,
    RngState,
};
use crate::parallel::Execution;
use crate::synthgen::{Dataset, SynthError};
use crate::tensor::{adam_update, Adam, AdamState, Bindings, Graph, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("not enough data: {0}")]
    Insufficient(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub n_pos: usize,
    pub n_neg: usize,
    pub max_epochs: usize,
    /// Words (and scenes) drawn from each participating class per step.
    pub per_class_per_step: usize,
    /// Familiar classes per step (0 = all of them).
    pub classes_per_step: usize,
    pub adam: Adam,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub init: InitStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            n_pos: 5,
            n_neg: 11,
            max_epochs: 100,
            per_class_per_step: 6,
            classes_per_step: 3,
            adam: Adam {
                lr: 3e-3,
                ..Adam::default()
            },
            patience: 10,
            seed: 0,
            init: InitStrategy {
                audio_pretrained: true,
                vision_pretrained: true,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.n_neg == 0 {
            return Err(TrainError::Config("n_neg must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        if self.per_class_per_step < self.n_pos + 1 {
            return Err(TrainError::Config(format!(
                "per_class_per_step {} cannot hold an anchor and {} positives",
                self.per_class_per_step, self.n_pos
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of this config and the model config.
    pub fn fingerprint(&self, model: &ModelConfig) -> String {
        let text = serde_json::to_string(&(self, model)).expect("config serialises");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Where and how a training run writes its outputs.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub run_dir: PathBuf,
    pub exec: Execution,
    pub artifacts: PretrainArtifacts,
    /// Continue from this checkpoint (epoch numbering continues).
    pub resume: Option<PathBuf>,
    /// Recorded in checkpoints and logs; defaults to the config fingerprint.
    pub config_hash: Option<String>,
    /// Collect every item id the training loop reads.
    pub record_touched: bool,
    /// Write a checkpoint file for every epoch.
    pub keep_epoch_checkpoints: bool,
    /// Also write per-epoch wall-clock times (not reproducible).
    pub write_timing: bool,
}

impl TrainOptions {
    pub fn new(run_dir: impl Into<PathBuf>) -> Self {
        Self {
            run_dir: run_dir.into(),
            exec: Execution::default(),
            artifacts: PretrainArtifacts::default(),
            resume: None,
            config_hash: None,
            record_touched: false,
            keep_epoch_checkpoints: true,
            write_timing: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: TrainLog,
    /// Item ids read by the loop (empty unless requested).
    pub touched: BTreeSet<String>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("{CHECKPOINT_DIR}/epoch-{epoch:03}.ckpt")
}

/// One optimisation step over a pool; returns the mean anchor loss.
fn train_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    data: &Dataset,
    pool: &StepPool,
    loss: &LossConfig,
) -> Result<f64> {
    let cfg = params.config;
    let mels: Vec<_> = pool.audio.iter().map(|&i| &data.audio[i].mel).collect();
    let imgs: Vec<_> = pool.images.iter().map(|&i| &data.images[i]).collect();
    let batch = AudioBatch::new(&cfg, &mels)?;
    let pixels = image_batch(&cfg, &imgs)?;
    let mut g = Graph::new();
    let pn = ParamNodes::declare(&mut g, params)?;
    let (x_audio, words) = audio_branch(&mut g, &pn, &cfg, &batch)?;
    let x_img = g.input(pixels.shape())?;
    let cells = vision_branch(&mut g, &pn, &cfg, x_img)?;
    let s = similarity_graph(&mut g, cells, words)?;
    let (root, _) = loss_graph(&mut g, s, &pool.anchors, loss)?;
    let mut b = Bindings::new();
    pn.bind(&mut b, params);
    b.bind(x_audio, &batch.input);
    b.bind(x_img, &pixels);
    let (value, grads) = g.value_and_gradient(&b, root, &pn.ids)?;
    drop(b);
    let mut tensors = params.tensors();
    adam_update(&mut tensors, &grads, opt)?;
    params.set_tensors(tensors);
    Ok(value)
}

fn early_stop_state(log: &TrainLog) -> (f64, usize, usize) {
    // (best accuracy, best epoch, epochs since improvement)
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for r in &log.epochs {
        if r.val_acc > best.0 {
            best = (r.val_acc, r.epoch, 0);
        } else {
            best.2 += 1;
        }
    }
    best
}

/// Trains a model from the training split of `data`, validating on the dev
/// split after every epoch. Writes checkpoints and the log to
/// `opts.run_dir`.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.image_size != data.image_size() {
        return Err(TrainError::Config(format!(
            "model expects {}px images, dataset has {}px",
            model_cfg.image_size,
            data.image_size()
        )));
    }
    let index = ClassIndex::from_dataset(data)?;
    index.check_capacity(cfg)?;
    let dev = DevSet::from_dataset(data)?;
    let hash = opts
        .config_hash
        .clone()
        .unwrap_or_else(|| cfg.fingerprint(model_cfg));
    fs::create_dir_all(opts.run_dir.join(CHECKPOINT_DIR)).map_err(io_err(&opts.run_dir))?;

    let (mut params, mut opt, mut rng, mut log, start) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.params.config != *model_cfg {
                return Err(TrainError::Config("resume checkpoint has a different model config".into()));
            }
            let mut log = TrainLog::load(&opts.run_dir).unwrap_or_else(|_| TrainLog::new(&hash, cfg.seed));
            log.epochs.retain(|r| r.epoch <= ck.epoch);
            let rng = ck.rng.restore()?;
            (ck.params, ck.optimizer, rng, log, ck.epoch + 1)
        }
        None => {
            let params = init_params(*model_cfg, cfg.init, cfg.seed, &opts.artifacts)?;
            let opt = AdamState::new(cfg.adam, &params.tensors());
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A11_5EED);
            (params, opt, rng, TrainLog::new(&hash, cfg.seed), 0)
        }
    };
    log.config_hash = hash.clone();
    log.seed = cfg.seed;
    let mut touched = BTreeSet::new();

    let save_epoch = |params: &ModelParams,
                      opt: &AdamState,
                      rng: &ChaCha8Rng,
                      epoch: usize,
                      loss: f64,
                      val: &ValidationResult|
     -> Result<(Checkpoint, String)> {
        let ck = Checkpoint {
            params: params.clone(),
            optimizer: opt.clone(),
            epoch,
            config_hash: hash.clone(),
            rng: RngState::capture(rng),
            extra: serde_json::json!({
                "loss": loss,
                "val_acc": val.accuracy,
                "val_ties": val.ties,
                "seed": cfg.seed,
            }),
        };
        let rel = epoch_checkpoint_name(epoch);
        if opts.keep_epoch_checkpoints {
            ck.save(&opts.run_dir.join(&rel))?;
        }
        Ok((ck, rel))
    };

    let mut best: Option<Checkpoint> = None;
    if start == 0 {
        let t0 = std::time::Instant::now();
        let val = validate(&params, &dev, opts.exec)?;
        let (ck, rel) = save_epoch(&params, &opt, &rng, 0, f64::NAN, &val)?;
        log.push(EpochRecord {
            epoch: 0,
            loss: None,
            val_acc: val.accuracy,
            ckpt_path: rel,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
        best = Some(ck);
    } else if let Ok(ck) = Checkpoint::load(&opts.run_dir.join(BEST_CHECKPOINT)) {
        best = Some(ck);
    }

    let (mut best_acc, _, mut since) = early_stop_state(&log);
    for epoch in start..=cfg.max_epochs {
        if epoch == 0 {
            continue;
        }
        if since > cfg.patience {
            break;
        }
        let t0 = std::time::Instant::now();
        let pools = index.epoch_pools(cfg, &mut rng);
        let mut total = 0.0;
        for (step, pool) in pools.iter().enumerate() {
            if opts.record_touched {
                for &i in &pool.audio {
                    touched.insert(data.audio[i].id.clone());
                }
                for &i in &pool.images {
                    touched.insert(data.images[i].id.clone());
                }
            }
            let v = train_step(&mut params, &mut opt, data, pool, &cfg.loss).map_err(|e| match e {
                TrainError::Tensor(TensorError::NonFiniteNode { node, op }) => TrainError::Divergence {
                    epoch,
                    step,
                    detail: format!("non-finite value at node {node} ({op})"),
                },
                other => other,
            })?;
            if !v.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    step,
                    detail: format!("loss {v}"),
                });
            }
            total += v;
        }
        let mean_loss = total / pools.len() as f64;
        let val = validate(&params, &dev, opts.exec)?;
        if opts.record_touched {
            for a in &dev.audio {
                touched.insert(a.clone());
            }
            for i in &dev.images {
                touched.insert(i.clone());
            }
        }
        let (ck, rel) = save_epoch(&params, &opt, &rng, epoch, mean_loss, &val)?;
        log.push(EpochRecord {
            epoch,
            loss: Some(mean_loss),
            val_acc: val.accuracy,
            ckpt_path: rel,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
        if val.accuracy > best_acc {
            best_acc = val.accuracy;
            since = 0;
            best = Some(ck);
            best.as_ref()
                .expect("just set")
                .save(&opts.run_dir.join(BEST_CHECKPOINT))?;
        } else {
            since += 1;
        }
        log.write(&opts.run_dir, opts.write_timing)?;
    }
    let best = best.ok_or_else(|| TrainError::Config("no epoch was run".into()))?;
    best.save(&opts.run_dir.join(BEST_CHECKPOINT))?;
    log.best_epoch = best.epoch;
    log.best_val_acc = best_acc;
    log.write(&opts.run_dir, opts.write_timing)?;
    Ok(TrainOutcome { best, log, touched })
}

/// Convenience used by tests and the CLI: loss kind from its name.
pub fn parse_loss(name: &str) -> Option<LossKind> {
    LossKind::ALL.into_iter().find(|k| k.name() == name)
}
