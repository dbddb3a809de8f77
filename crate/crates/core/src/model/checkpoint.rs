use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams, Result};
use crate::container::Container;
use crate::tensor::{Adam, AdamState, Tensor};

pub const CHECKPOINT_KIND: &str = "checkpoint";

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position, as decimal text.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || ModelError::Checkpoint("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    adam: Adam,
    adam_step: u64,
    epoch: usize,
    config_hash: String,
    rng: RngState,
    extra: serde_json::Value,
}

/// Everything needed to resume training or evaluate a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub config_hash: String,
    pub rng: RngState,
    /// Free-form annotations (validation accuracy, loss, ...).
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let meta = Meta {
            model: self.params.config,
            adam: self.optimizer.hyper,
            adam_step: self.optimizer.step,
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
            rng: self.rng.clone(),
            extra: self.extra.clone(),
        };
        let mut c = Container::new(CHECKPOINT_KIND, serde_json::to_value(meta).expect("meta serialises"));
        for (name, t) in self.params.iter() {
            c.push(format!("param/{name}"), t.shape().to_vec(), t.data().to_vec());
        }
        for (k, (name, _)) in self.params.iter().enumerate() {
            let m = &self.optimizer.first[k];
            c.push(format!("adam_m/{name}"), m.shape().to_vec(), m.data().to_vec());
        }
        for (k, (name, _)) in self.params.iter().enumerate() {
            let v = &self.optimizer.second[k];
            c.push(format!("adam_v/{name}"), v.shape().to_vec(), v.data().to_vec());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != CHECKPOINT_KIND {
            return Err(ModelError::Checkpoint(format!("container kind {}", c.kind)));
        }
        let meta: Meta = serde_json::from_value(c.meta.clone())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let take = |prefix: &str| -> Result<Vec<(String, Tensor)>> {
            c.entries
                .iter()
                .filter_map(|(e, d)| e.name.strip_prefix(prefix).map(|n| (n, e, d)))
                .map(|(n, e, d)| {
                    Tensor::new(e.shape.clone(), d.clone())
                        .map(|t| (n.to_string(), t))
                        .map_err(|err| ModelError::Checkpoint(format!("{}: {err}", e.name)))
                })
                .collect()
        };
        let params = ModelParams::from_named(meta.model, take("param/")?)?;
        let first: Vec<Tensor> = take("adam_m/")?.into_iter().map(|(_, t)| t).collect();
        let second: Vec<Tensor> = take("adam_v/")?.into_iter().map(|(_, t)| t).collect();
        if first.len() != params.len() || second.len() != params.len() {
            return Err(ModelError::Checkpoint("optimizer state incomplete".into()));
        }
        Ok(Self {
            params,
            optimizer: AdamState {
                hyper: meta.adam,
                step: meta.adam_step,
                first,
                second,
            },
            epoch: meta.epoch,
            config_hash: meta.config_hash,
            rng: meta.rng,
            extra: meta.extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let params = ModelParams::random(ModelConfig::tiny(), 7).unwrap();
        let mut opt = AdamState::new(Adam::default(), &params.tensors());
        opt.step = 3;
        opt.first[0].data_mut()[0] = 0.1 + 0.2;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.random();
        let ck = Checkpoint {
            params,
            optimizer: opt,
            epoch: 4,
            config_hash: "abc".into(),
            rng: RngState::capture(&rng),
            extra: serde_json::json!({"val_acc": 0.75}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.rng.restore().unwrap();
        assert_eq!(restored.random::<u64>(), rng.random::<u64>());
        back.save(&dir.path().join("d.bin")).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(dir.path().join("d.bin")).unwrap()
        );
    }
}
