use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError, Result};
use crate::container::Container;
use crate::tensor::Tensor;

/// Which branches start from proxy-pretrained weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitStrategy {
    pub audio_pretrained: bool,
    pub vision_pretrained: bool,
}

impl InitStrategy {
    pub fn label(&self) -> &'static str {
        match (self.audio_pretrained, self.vision_pretrained) {
            (false, false) => "scratch",
            (true, false) => "audio-pretrained",
            (false, true) => "vision-pretrained",
            (true, true) => "both-pretrained",
        }
    }
}

/// Weight containers produced by the proxy pretraining runs.
#[derive(Debug, Clone, Default)]
pub struct PretrainArtifacts {
    pub audio: Option<Container>,
    pub vision: Option<Container>,
}

/// Every trainable tensor of both branches, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    entries: Vec<(String, Tensor)>,
}

/// (name, shape, fan_in) for every parameter.
fn layout(c: &ModelConfig) -> Vec<(String, Vec<usize>, usize)> {
    let h = c.hidden;
    let mut v = Vec::new();
    let mut lstm = |prefix: &str, input: usize| {
        v.push((format!("{prefix}.w_ih"), vec![input, 4 * h], h));
        v.push((format!("{prefix}.w_hh"), vec![h, 4 * h], h));
        v.push((format!("{prefix}.b"), vec![4 * h], h));
    };
    lstm("audio.l1", c.n_mels);
    lstm("audio.l2f", h);
    lstm("audio.l2b", h);
    let (hh, d) = (c.head_hidden, c.embed_dim);
    v.push(("audio.head.w1".into(), vec![2 * h, hh], 2 * h));
    v.push(("audio.head.b1".into(), vec![hh], 2 * h));
    v.push(("audio.head.w2".into(), vec![hh, d], hh));
    v.push(("audio.head.b2".into(), vec![d], hh));
    v.push(("audio.head.w_att".into(), vec![hh, 1], hh));
    let (c1, c2) = (c.conv1_channels, c.conv2_channels);
    v.push(("vision.conv1.w".into(), vec![c1, 3, 3, 3], 27));
    v.push(("vision.conv1.b".into(), vec![c1, 1, 1], 27));
    v.push(("vision.conv2.w".into(), vec![c2, c1, 3, 3], c1 * 9));
    v.push(("vision.conv2.b".into(), vec![c2, 1, 1], c1 * 9));
    v.push(("vision.conv3.w".into(), vec![d, c2, 1, 1], c2));
    v.push(("vision.conv3.b".into(), vec![d, 1, 1], c2));
    v
}

impl ModelParams {
    /// Scaled-uniform initialisation: every weight in `±1/sqrt(fan_in)`.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = layout(&config)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                (name, Tensor::new(shape, data).expect("finite init"))
            })
            .collect();
        Ok(Self { config, entries })
    }

    /// Rebuilds parameters from named tensors, checking the layout.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expect = layout(&config);
        if expect.len() != named.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                expect.len(),
                named.len()
            )));
        }
        for ((name, shape, _), (n, t)) in expect.iter().zip(&named) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "expected {name} {shape:?}, found {n} {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            entries: named,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        assert_eq!(tensors.len(), self.entries.len());
        for ((_, slot), t) in self.entries.iter_mut().zip(tensors) {
            assert_eq!(slot.shape(), t.shape());
            *slot = t;
        }
    }

    /// Indices of the parameters whose name starts with `prefix`.
    pub fn indices_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].0.starts_with(prefix))
            .collect()
    }

    /// SHA-256 over names, shapes and the exact bits of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Container holding the tensors whose name starts with `prefix`.
    pub fn export_branch(&self, prefix: &str, kind: &str) -> Container {
        let mut c = Container::new(kind, serde_json::json!({ "config": self.config }));
        for (name, t) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            c.push(name.clone(), t.shape().to_vec(), t.data().to_vec());
        }
        c
    }

    fn import_branch(&mut self, prefix: &str, artifact: &Container) -> Result<()> {
        for (name, slot) in self.entries.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            let (entry, data) = artifact
                .get(name)
                .ok_or_else(|| ModelError::Artifact(format!("{name} absent")))?;
            if entry.shape != slot.shape() {
                return Err(ModelError::Artifact(format!(
                    "{name}: artifact {:?}, model {:?}",
                    entry.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(entry.shape.clone(), data.clone())
                .map_err(|e| ModelError::Artifact(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

/// Random initialisation, with flagged branches copied from the pretraining
/// artifacts.
pub fn init_params(
    config: ModelConfig,
    strategy: InitStrategy,
    seed: u64,
    artifacts: &PretrainArtifacts,
) -> Result<ModelParams> {
    let mut p = ModelParams::random(config, seed)?;
    if strategy.audio_pretrained {
        let a = artifacts.audio.as_ref().ok_or(ModelError::MissingArtifact("audio"))?;
        p.import_branch("audio.", a)?;
    }
    if strategy.vision_pretrained {
        let v = artifacts.vision.as_ref().ok_or(ModelError::MissingArtifact("vision"))?;
        p.import_branch("vision.", v)?;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn artifacts() -> PretrainArtifacts {
        let donor = ModelParams::random(ModelConfig::tiny(), 99).unwrap();
        PretrainArtifacts {
            audio: Some(donor.export_branch("audio.", "pretrain-audio")),
            vision: Some(donor.export_branch("vision.", "pretrain-vision")),
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(ModelConfig::tiny(), InitStrategy::default(), 1, &PretrainArtifacts::default()).unwrap();
        let b = init_params(ModelConfig::tiny(), InitStrategy::default(), 1, &PretrainArtifacts::default()).unwrap();
        assert_eq!(a, b);
        let w = a.get("audio.head.w1").unwrap();
        let bound = 1.0 / (2.0f64 * 2.0).sqrt();
        assert!(w.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn pretrained_branch_is_copied_exactly() {
        let art = artifacts();
        let s = InitStrategy {
            audio_pretrained: true,
            vision_pretrained: false,
        };
        let p = init_params(ModelConfig::tiny(), s, 1, &art).unwrap();
        let scratch = ModelParams::random(ModelConfig::tiny(), 1).unwrap();
        for (name, t) in p.iter() {
            if name.starts_with("audio.") {
                assert_eq!(art.audio.as_ref().unwrap().get(name).unwrap().1, t.data());
            } else {
                assert_eq!(scratch.get(name).unwrap(), t);
            }
        }
    }

    #[test]
    fn four_strategies_have_distinct_fingerprints() {
        let art = artifacts();
        let mut prints = std::collections::HashSet::new();
        for (a, v) in [(false, false), (true, false), (false, true), (true, true)] {
            let s = InitStrategy {
                audio_pretrained: a,
                vision_pretrained: v,
            };
            prints.insert(init_params(ModelConfig::tiny(), s, 1, &art).unwrap().fingerprint());
        }
        assert_eq!(prints.len(), 4);
    }

    #[test]
    fn missing_artifact_is_an_error() {
        let s = InitStrategy {
            audio_pretrained: false,
            vision_pretrained: true,
        };
        assert!(matches!(
            init_params(ModelConfig::tiny(), s, 1, &PretrainArtifacts::default()),
            Err(ModelError::MissingArtifact("vision"))
        ));
    }
}
