//! The word–image scorer: a recurrent audio branch pooled to one word
//! embedding, a convolutional vision branch producing one embedding per
//! spatial cell, and a max-over-cells dot-product similarity.
//!
//! Encoders are expressed as [`Graph`] builders so the same code serves
//! training (with gradients) and inference. [`embed_audio`] and
//! [`embed_images`] are the inference entry points.

mod audio;
mod checkpoint;
mod params;
mod vision;

pub use audio::{audio_branch, AudioBatch};
pub(crate) use audio::audio_layer1 as audio_layer1_public;
pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_KIND};
pub use params::{init_params, InitStrategy, ModelParams, PretrainArtifacts};
pub use vision::{image_batch, vision_branch};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::ContainerError;
use crate::featurize::MelSpectrogram;
use crate::parallel::Execution;
use crate::synthgen::ImageSample;
use crate::tensor::{Bindings, Graph, NodeId, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("input mismatch: {0}")]
    Input(String),
    #[error("missing pretrain artifact for the {0} branch")]
    MissingArtifact(&'static str),
    #[error("artifact does not fit the model: {0}")]
    Artifact(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Layer sizes and input geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub n_frames: usize,
    /// Hidden size of each recurrent layer (per direction).
    pub hidden: usize,
    /// Width of the pooling head's first layer.
    pub head_hidden: usize,
    pub embed_dim: usize,
    pub image_size: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    /// Pool only over frames that carry signal (packed-sequence semantics).
    pub mask_padding: bool,
    /// Log-mel inputs are mapped to `(x - mel_shift) / mel_scale`.
    pub mel_shift: f64,
    pub mel_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            n_frames: 256,
            hidden: 64,
            head_hidden: 64,
            embed_dim: 32,
            image_size: 64,
            conv1_channels: 16,
            conv2_channels: 32,
            mask_padding: true,
            mel_shift: -5.0,
            mel_scale: 3.0,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            n_mels: 3,
            n_frames: 4,
            hidden: 2,
            head_hidden: 3,
            embed_dim: 2,
            image_size: 16,
            conv1_channels: 2,
            conv2_channels: 2,
            mask_padding: true,
            mel_shift: 0.0,
            mel_scale: 1.0,
        }
    }

    /// Side of the cell grid produced by the vision branch.
    pub fn grid_side(&self) -> usize {
        // two stride-2 same-padded convolutions, then a 2x2 max pool
        let s = self.image_size.div_ceil(2).div_ceil(2);
        s / 2
    }

    pub fn n_cells(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_mels,
            self.n_frames,
            self.hidden,
            self.head_hidden,
            self.embed_dim,
            self.conv1_channels,
            self.conv2_channels,
        ];
        if dims.contains(&0) || self.grid_side() == 0 {
            return Err(ModelError::Input(format!("degenerate model config {self:?}")));
        }
        if !(self.mel_scale > 0.0 && self.mel_shift.is_finite()) {
            return Err(ModelError::Input("mel_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter leaves of one graph, in [`ModelParams`] order.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub ids: Vec<NodeId>,
    names: Vec<String>,
}

impl ParamNodes {
    pub fn declare(g: &mut Graph, params: &ModelParams) -> Result<Self> {
        let mut ids = Vec::with_capacity(params.len());
        for (_, t) in params.iter() {
            ids.push(g.param(t.shape())?);
        }
        Ok(Self {
            ids,
            names: params.iter().map(|(n, _)| n.to_string()).collect(),
        })
    }

    pub fn node(&self, name: &str) -> NodeId {
        let k = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.ids[k]
    }

    pub fn bind<'a>(&self, b: &mut Bindings<'a>, params: &'a ModelParams) {
        for (&id, (_, t)) in self.ids.iter().zip(params.iter()) {
            b.bind(id, t);
        }
    }
}

/// Max-over-cells dot product, with the winning cell (lowest index on ties).
pub fn similarity(a: &[f64], cells: &[Vec<f64>]) -> Result<(f64, usize)> {
    let mut best = (f64::NEG_INFINITY, 0);
    if cells.is_empty() {
        return Err(ModelError::Input("no cells".into()));
    }
    for (i, c) in cells.iter().enumerate() {
        if c.len() != a.len() {
            return Err(ModelError::Input(format!(
                "embedding has {} values, cell {i} has {}",
                a.len(),
                c.len()
            )));
        }
        let s: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
        if s > best.0 {
            best = (s, i);
        }
    }
    Ok(best)
}

/// Similarity matrix node `[n_images, n_audio]` from image cells
/// `[n_images, cells, D]` and word embeddings `[n_audio, D]`.
pub fn similarity_graph(g: &mut Graph, cells: NodeId, words: NodeId) -> Result<NodeId> {
    let (bv, n, d) = {
        let s = g.shape(cells);
        if s.len() != 3 {
            return Err(ModelError::Input(format!("cells shape {s:?}")));
        }
        (s[0], s[1], s[2])
    };
    let ba = g.shape(words)[0];
    let flat = g.reshape(cells, &[bv * n, d])?;
    let wt = g.t(words)?;
    let dots = g.matmul(flat, wt)?;
    let grid = g.reshape(dots, &[bv, n, ba])?;
    Ok(g.max_axis(grid, 1)?)
}

const CHUNK: usize = 32;

/// Word embeddings for a list of spectrograms, one `D`-vector each.
pub fn embed_audio(
    params: &ModelParams,
    mels: &[&MelSpectrogram],
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<&[&MelSpectrogram]> = mels.chunks(CHUNK).collect();
    let out = exec.map(&chunks, |chunk| -> Result<Vec<Vec<f64>>> {
        let batch = AudioBatch::new(&params.config, chunk)?;
        let mut g = Graph::new();
        let pn = ParamNodes::declare(&mut g, params)?;
        let (x, emb) = audio_branch(&mut g, &pn, &params.config, &batch)?;
        let mut b = Bindings::new();
        pn.bind(&mut b, params);
        b.bind(x, &batch.input);
        let eval = g.evaluate(&b)?;
        let d = params.config.embed_dim;
        Ok(eval.value(emb).data().chunks(d).map(|r| r.to_vec()).collect())
    });
    let mut all = Vec::with_capacity(mels.len());
    for r in out {
        all.extend(r?);
    }
    Ok(all)
}

/// Cell embeddings for a list of images: `cells x D` per image.
pub fn embed_images(
    params: &ModelParams,
    images: &[&ImageSample],
    exec: Execution,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let chunks: Vec<&[&ImageSample]> = images.chunks(CHUNK).collect();
    let out = exec.map(&chunks, |chunk| -> Result<Vec<Vec<Vec<f64>>>> {
        let input = image_batch(&params.config, chunk)?;
        let mut g = Graph::new();
        let pn = ParamNodes::declare(&mut g, params)?;
        let x = g.input(input.shape())?;
        let cells = vision_branch(&mut g, &pn, &params.config, x)?;
        let mut b = Bindings::new();
        pn.bind(&mut b, params);
        b.bind(x, &input);
        let eval = g.evaluate(&b)?;
        let d = params.config.embed_dim;
        let n = params.config.n_cells();
        Ok(eval
            .value(cells)
            .data()
            .chunks(n * d)
            .map(|img| img.chunks(d).map(|c| c.to_vec()).collect())
            .collect())
    });
    let mut all = Vec::with_capacity(images.len());
    for r in out {
        all.extend(r?);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn similarity_hand_example() {
        let (s, i) = similarity(&[1.0, 0.0], &[vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!((s, i), (2.0, 1));
        let (s, _) = similarity(&[0.0, 0.0], &[vec![3.0, -1.0], vec![2.0, 7.0]]).unwrap();
        assert_eq!(s, 0.0);
        assert!(similarity(&[1.0], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn similarity_matches_brute_force_and_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cells: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..8).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (s, i) = similarity(&a, &cells).unwrap();
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (k, c) in cells.iter().enumerate() {
            let mut dot = 0.0;
            for j in 0..8 {
                dot += a[j] * c[j];
            }
            if dot > best {
                best = dot;
                arg = k;
            }
        }
        assert_eq!((s, i), (best, arg));
        let mut rev = cells.clone();
        rev.reverse();
        assert_eq!(similarity(&a, &rev).unwrap().0, s);
        let scaled: Vec<f64> = a.iter().map(|x| x * 2.5).collect();
        assert!((similarity(&scaled, &cells).unwrap().0 - 2.5 * s).abs() < 1e-12);
    }

    #[test]
    fn similarity_graph_agrees_with_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (bv, n, d, ba) = (3, 5, 4, 2);
        let cells = Tensor::new(vec![bv, n, d], (0..bv * n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let words = Tensor::new(vec![ba, d], (0..ba * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut g = Graph::new();
        let c = g.param(&[bv, n, d]).unwrap();
        let w = g.param(&[ba, d]).unwrap();
        let s = similarity_graph(&mut g, c, w).unwrap();
        let total = g.sum(s);
        let mut b = Bindings::new();
        b.bind(c, &cells).bind(w, &words);
        let eval = g.evaluate(&b).unwrap();
        for v in 0..bv {
            let cv: Vec<Vec<f64>> = (0..n).map(|i| cells.data()[(v * n + i) * d..(v * n + i + 1) * d].to_vec()).collect();
            for a in 0..ba {
                let (expect, _) = similarity(&words.data()[a * d..(a + 1) * d], &cv).unwrap();
                assert_eq!(eval.value(s).data()[v * ba + a], expect);
            }
        }
        assert!(grad_check(&g, total, &b, &[c, w], 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn default_grid_is_eight_by_eight() {
        assert_eq!(ModelConfig::default().n_cells(), 64);
        assert_eq!(ModelConfig::tiny().n_cells(), 4);
    }
}
