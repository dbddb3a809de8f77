//! Self-supervised warm starts for each branch.
//!
//! * Vision: instance discrimination. Two random augmentations (crop, flip,
//!   hue rotation) of the same training scene should embed closer to each
//!   other than to any other scene in the batch.
//! * Audio: contrastive future prediction on the first recurrent layer. The
//!   hidden state at frame `t` should pick out the true upcoming frame
//!   window among the windows of the whole batch.
//!
//! Only training-split items are used, and a held-out share of them is kept
//! aside for the post-hoc probes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassIndex, Result, TrainError};
use crate::container::Container;
use crate::featurize::{IMAGENET_MEAN, IMAGENET_STD};
use crate::model::{vision_branch, AudioBatch, ModelConfig, ModelParams, ParamNodes};
use crate::synthgen::Dataset;
use crate::tensor::{adam_update, Adam, AdamState, Bindings, Graph, NodeId, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: Adam,
    pub temperature: f64,
    /// Share of the training items kept for the probe.
    pub holdout: f64,
    /// Future frames per prediction target (audio).
    pub window: usize,
    /// Predictions per utterance (audio).
    pub positions: usize,
    /// Caps the items used per epoch (0 = all).
    pub max_items: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch: 16,
            adam: Adam {
                lr: 2e-3,
                ..Adam::default()
            },
            temperature: 0.2,
            holdout: 0.2,
            window: 3,
            positions: 4,
            max_items: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean loss on the probe batches before any update.
    pub initial_loss: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss on the probe batches after training.
    pub final_loss: f64,
    /// Held-out probe accuracy and its chance level.
    pub probe_accuracy: f64,
    pub probe_chance: f64,
}

fn split_holdout(mut items: Vec<usize>, holdout: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    items.shuffle(rng);
    let n_hold = ((items.len() as f64 * holdout).round() as usize).clamp(1, items.len().saturating_sub(2));
    let train = items.split_off(n_hold);
    (train, items)
}

fn check_cfg(cfg: &PretrainConfig) -> Result<()> {
    if cfg.batch < 2 || cfg.epochs == 0 || !(cfg.temperature > 0.0) || !(0.0..1.0).contains(&cfg.holdout) {
        return Err(TrainError::Config(format!("invalid pretraining config {cfg:?}")));
    }
    Ok(())
}

// ---------------------------------------------------------------- vision

/// Random crop (rescaled back bilinearly), horizontal flip and hue
/// rotation of one normalised image.
pub(crate) fn augment(pixels: &[f64], size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let plane = size * size;
    let raw: Vec<f64> = (0..3 * plane)
        .map(|i| pixels[i] * IMAGENET_STD[i / plane] + IMAGENET_MEAN[i / plane])
        .collect();
    let scale = rng.random_range(0.7..=1.0);
    let crop = scale * (size as f64 - 1.0);
    let x0 = rng.random_range(0.0..=(size as f64 - 1.0 - crop));
    let y0 = rng.random_range(0.0..=(size as f64 - 1.0 - crop));
    let flip = rng.random::<bool>();
    let theta: f64 = rng.random_range(-0.6..0.6);
    // rotation about the grey axis (1,1,1)/sqrt(3)
    let (c, s) = (theta.cos(), theta.sin());
    let k = (1.0 - c) / 3.0;
    let r3 = s / 3f64.sqrt();
    let rot = [
        [c + k, k - r3, k + r3],
        [k + r3, c + k, k - r3],
        [k - r3, k + r3, c + k],
    ];
    let step = crop / (size as f64 - 1.0);
    let mut out = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let xs = if flip { size - 1 - x } else { x };
            let fx = x0 + xs as f64 * step;
            let fy = y0 + y as f64 * step;
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let (ix1, iy1) = ((ix + 1).min(size - 1), (iy + 1).min(size - 1));
            let mut rgb = [0.0; 3];
            for (ch, v) in rgb.iter_mut().enumerate() {
                let p = |yy: usize, xx: usize| raw[ch * plane + yy * size + xx];
                *v = (1.0 - ty) * ((1.0 - tx) * p(iy, ix) + tx * p(iy, ix1))
                    + ty * ((1.0 - tx) * p(iy1, ix) + tx * p(iy1, ix1));
            }
            for ch in 0..3 {
                let v: f64 = (0..3).map(|j| rot[ch][j] * rgb[j]).sum();
                out[ch * plane + y * size + x] = (v.clamp(0.0, 1.0) - IMAGENET_MEAN[ch]) / IMAGENET_STD[ch];
            }
        }
    }
    out
}

/// L2-normalised mean-pooled embedding `[batch, D]` of an image batch.
fn pooled_normalised(g: &mut Graph, pn: &ParamNodes, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
    let cells = vision_branch(g, pn, cfg, x)?;
    let mean = g.sum_axis(cells, 1)?;
    let mean = g.scale(mean, 1.0 / cfg.n_cells() as f64);
    normalise_rows(g, mean)
}

fn normalise_rows(g: &mut Graph, z: NodeId) -> Result<NodeId> {
    let b = g.shape(z)[0];
    let sq = g.mul(z, z)?;
    let ss = g.sum_axis(sq, 1)?;
    let ss = g.offset(ss, 1e-8);
    let log = g.log(ss);
    let half = g.scale(log, 0.5);
    let norm = g.exp(half);
    let norm = g.reshape(norm, &[b, 1])?;
    Ok(g.div(z, norm)?)
}

/// Symmetric cross-entropy with matching rows/columns as positives.
fn diagonal_infonce(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    let b = g.shape(logits)[0];
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let pos = g.gather(logits, &diag)?;
    let rows = g.logsumexp(logits, 1)?;
    let cols = g.logsumexp(logits, 0)?;
    let r = g.sub(rows, pos)?;
    let c = g.sub(cols, pos)?;
    let both = g.add(r, c)?;
    let total = g.sum(both);
    Ok(g.scale(total, 0.5 / b as f64))
}

struct VisionStep {
    loss: f64,
    grads: Vec<Tensor>,
    correct: usize,
    trials: usize,
}

fn vision_step(
    params: &ModelParams,
    data: &Dataset,
    items: &[usize],
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    wrt: &[usize],
    want_grads: bool,
) -> Result<VisionStep> {
    let mc = params.config;
    let s = mc.image_size;
    let mut views = [Vec::new(), Vec::new()];
    for &i in items {
        for v in views.iter_mut() {
            v.extend(augment(&data.images[i].pixels, s, rng));
        }
    }
    let b = items.len();
    let [v1, v2] = views.map(|v| Tensor::new(vec![b, 3, s, s], v).expect("finite augmentations"));
    let mut g = Graph::new();
    let pn = ParamNodes::declare(&mut g, params)?;
    let x1 = g.input(&[b, 3, s, s])?;
    let x2 = g.input(&[b, 3, s, s])?;
    let z1 = pooled_normalised(&mut g, &pn, &mc, x1)?;
    let z2 = pooled_normalised(&mut g, &pn, &mc, x2)?;
    let z2t = g.t(z2)?;
    let logits = g.matmul(z1, z2t)?;
    let logits = g.scale(logits, 1.0 / cfg.temperature);
    let loss = diagonal_infonce(&mut g, logits)?;
    let mut bind = Bindings::new();
    pn.bind(&mut bind, params);
    bind.bind(x1, &v1).bind(x2, &v2);
    let eval = g.evaluate(&bind)?;
    let lv = eval.value(logits).data().to_vec();
    let mut correct = 0;
    for i in 0..b {
        let row = &lv[i * b..(i + 1) * b];
        correct += (0..b).filter(|&j| j != i && row[i] > row[j]).count();
    }
    let grads = if want_grads {
        let ids: Vec<NodeId> = wrt.iter().map(|&k| pn.ids[k]).collect();
        g.gradient(&eval, loss, &ids)?
    } else {
        Vec::new()
    };
    Ok(VisionStep {
        loss: eval.value(loss).item(),
        grads,
        correct,
        trials: b * (b - 1),
    })
}

fn batches(items: &[usize], size: usize) -> Vec<Vec<usize>> {
    items
        .chunks(size)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn update_subset(params: &mut ModelParams, idx: &[usize], grads: &[Tensor], opt: &mut AdamState) -> Result<()> {
    let all = params.tensors();
    let mut subset: Vec<Tensor> = idx.iter().map(|&k| all[k].clone()).collect();
    adam_update(&mut subset, grads, opt)?;
    let mut all = all;
    for (&k, t) in idx.iter().zip(subset) {
        all[k] = t;
    }
    params.set_tensors(all);
    Ok(())
}

/// Pretrains the vision branch; returns the weight artifact and a report.
pub fn pretrain_vision(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<(Container, PretrainReport)> {
    check_cfg(cfg)?;
    let index = ClassIndex::from_dataset(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EE_1A6E);
    let all: Vec<usize> = index.images.concat();
    let (mut train_items, probe) = split_holdout(all, cfg.holdout, &mut rng);
    let mut params = ModelParams::random(*model_cfg, cfg.seed)?;
    let wrt = params.indices_with_prefix("vision.");
    let tensors = params.tensors();
    let mut opt = AdamState::new(cfg.adam, &wrt.iter().map(|&k| tensors[k].clone()).collect::<Vec<_>>());
    let probe_batches = batches(&probe, cfg.batch);
    let probe_eval = |params: &ModelParams| -> Result<(f64, f64)> {
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9B0BE);
        let (mut loss, mut correct, mut trials) = (0.0, 0, 0);
        for b in &probe_batches {
            let st = vision_step(params, data, b, cfg, &mut prng, &wrt, false)?;
            loss += st.loss;
            correct += st.correct;
            trials += st.trials;
        }
        Ok((loss / probe_batches.len() as f64, correct as f64 / trials.max(1) as f64))
    };
    let (initial_loss, _) = probe_eval(&params)?;
    let mut epoch_losses = Vec::new();
    for _ in 0..cfg.epochs {
        train_items.shuffle(&mut rng);
        let used = if cfg.max_items > 0 {
            &train_items[..cfg.max_items.min(train_items.len())]
        } else {
            &train_items[..]
        };
        let bs = batches(used, cfg.batch);
        let mut total = 0.0;
        for b in &bs {
            let st = vision_step(&params, data, b, cfg, &mut rng, &wrt, true)?;
            total += st.loss;
            update_subset(&mut params, &wrt, &st.grads, &mut opt)?;
        }
        epoch_losses.push(total / bs.len().max(1) as f64);
    }
    let (final_loss, probe_accuracy) = probe_eval(&params)?;
    Ok((
        params.export_branch("vision.", "pretrain-vision"),
        PretrainReport {
            initial_loss,
            epoch_losses,
            final_loss,
            probe_accuracy,
            probe_chance: 0.5,
        },
    ))
}

// ---------------------------------------------------------------- audio

struct AudioStep {
    loss: f64,
    grads: Vec<Tensor>,
    correct: usize,
    trials: usize,
}

fn audio_step(
    params: &ModelParams,
    w_z: &Tensor,
    data: &Dataset,
    items: &[usize],
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
    wrt: &[usize],
    want_grads: bool,
) -> Result<AudioStep> {
    let mc = params.config;
    let mels: Vec<_> = items.iter().map(|&i| &data.audio[i].mel).collect();
    let batch = AudioBatch::new(&mc, &mels)?;
    let (b, h, k, nm) = (batch.batch, mc.hidden, cfg.window, mc.n_mels);
    // prediction positions and their target windows
    let mut ctx_idx = Vec::new();
    let mut windows = Vec::new();
    for (item, &len) in batch.lengths.iter().enumerate() {
        if len < k + 2 {
            return Err(TrainError::Insufficient(format!("utterance of {len} frames is too short")));
        }
        for _ in 0..cfg.positions {
            let t = rng.random_range(0..len - k - 1);
            let row = t * b + item;
            ctx_idx.extend((0..h).map(|j| row * h + j));
            for f in t + 1..=t + k {
                let r = f * b + item;
                windows.extend_from_slice(&batch.input.data()[r * nm..(r + 1) * nm]);
            }
        }
    }
    let n = b * cfg.positions;
    let windows = Tensor::new(vec![n, k * nm], windows)?;
    let mut g = Graph::new();
    let pn = ParamNodes::declare(&mut g, params)?;
    let x = g.input(batch.input.shape())?;
    let wz = g.param(w_z.shape())?;
    let hs = crate::model::audio_layer1_public(&mut g, &pn, &mc, &batch, x)?;
    let all = if hs.len() == 1 { hs[0] } else { g.concat(&hs, 0)? };
    let ctx = g.gather(all, &ctx_idx)?;
    let ctx = g.reshape(ctx, &[n, h])?;
    let win = g.constant(windows);
    let z = g.matmul(win, wz)?;
    let zt = g.t(z)?;
    let logits = g.matmul(ctx, zt)?;
    let loss = diagonal_infonce(&mut g, logits)?;
    let mut bind = Bindings::new();
    pn.bind(&mut bind, params);
    bind.bind(x, &batch.input).bind(wz, w_z);
    let eval = g.evaluate(&bind)?;
    let lv = eval.value(logits).data();
    let mut correct = 0;
    for i in 0..n {
        let row = &lv[i * n..(i + 1) * n];
        if (0..n).all(|j| j == i || row[i] > row[j]) {
            correct += 1;
        }
    }
    let grads = if want_grads {
        let mut ids: Vec<NodeId> = wrt.iter().map(|&q| pn.ids[q]).collect();
        ids.push(wz);
        g.gradient(&eval, loss, &ids)?
    } else {
        Vec::new()
    };
    Ok(AudioStep {
        loss: eval.value(loss).item(),
        grads,
        correct,
        trials: n,
    })
}

/// Pretrains the first recurrent layer; the artifact holds the whole audio
/// branch (later layers keep their initial values).
pub fn pretrain_audio(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<(Container, PretrainReport)> {
    check_cfg(cfg)?;
    if cfg.window == 0 || cfg.positions == 0 {
        return Err(TrainError::Config("window and positions must be positive".into()));
    }
    let index = ClassIndex::from_dataset(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA0D10);
    let all: Vec<usize> = index.audio.concat();
    let (mut train_items, probe) = split_holdout(all, cfg.holdout, &mut rng);
    let mut params = ModelParams::random(*model_cfg, cfg.seed)?;
    let wrt = params.indices_with_prefix("audio.l1.");
    let (kn, h) = (cfg.window * model_cfg.n_mels, model_cfg.hidden);
    let bound = 1.0 / (kn as f64).sqrt();
    let mut w_z = Tensor::new(vec![kn, h], (0..kn * h).map(|_| rng.random_range(-bound..bound)).collect())?;
    let tensors = params.tensors();
    let mut init: Vec<Tensor> = wrt.iter().map(|&k| tensors[k].clone()).collect();
    init.push(w_z.clone());
    let mut opt = AdamState::new(cfg.adam, &init);
    let probe_batches = batches(&probe, cfg.batch);
    let probe_eval = |params: &ModelParams, w_z: &Tensor| -> Result<(f64, f64, f64)> {
        let mut prng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9B0BE);
        let (mut loss, mut correct, mut trials, mut chance) = (0.0, 0, 0, 0.0);
        for b in &probe_batches {
            let st = audio_step(params, w_z, data, b, cfg, &mut prng, &wrt, false)?;
            loss += st.loss;
            correct += st.correct;
            trials += st.trials;
            chance += 1.0 / st.trials as f64;
        }
        let nb = probe_batches.len() as f64;
        Ok((loss / nb, correct as f64 / trials.max(1) as f64, chance / nb))
    };
    let (initial_loss, _, _) = probe_eval(&params, &w_z)?;
    let mut epoch_losses = Vec::new();
    for _ in 0..cfg.epochs {
        train_items.shuffle(&mut rng);
        let used = if cfg.max_items > 0 {
            &train_items[..cfg.max_items.min(train_items.len())]
        } else {
            &train_items[..]
        };
        let bs = batches(used, cfg.batch);
        let mut total = 0.0;
        for b in &bs {
            let st = audio_step(&params, &w_z, data, b, cfg, &mut rng, &wrt, true)?;
            total += st.loss;
            let all = params.tensors();
            let mut subset: Vec<Tensor> = wrt.iter().map(|&k| all[k].clone()).collect();
            subset.push(w_z.clone());
            adam_update(&mut subset, &st.grads, &mut opt)?;
            w_z = subset.pop().expect("w_z present");
            let mut all = all;
            for (&k, t) in wrt.iter().zip(subset) {
                all[k] = t;
            }
            params.set_tensors(all);
        }
        epoch_losses.push(total / bs.len().max(1) as f64);
    }
    let (final_loss, probe_accuracy, probe_chance) = probe_eval(&params, &w_z)?;
    Ok((
        params.export_branch("audio.", "pretrain-audio"),
        PretrainReport {
            initial_loss,
            epoch_losses,
            final_loss,
            probe_accuracy,
            probe_chance,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_like_augmentation_stays_in_range() {
        let size = 8;
        let pixels: Vec<f64> = (0..3 * 64)
            .map(|i| ((i % 64) as f64 / 64.0 - IMAGENET_MEAN[i / 64]) / IMAGENET_STD[i / 64])
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = augment(&pixels, size, &mut rng);
        assert_eq!(out.len(), pixels.len());
        for (i, v) in out.iter().enumerate() {
            let raw = v * IMAGENET_STD[i / 64] + IMAGENET_MEAN[i / 64];
            assert!((-1e-9..=1.0 + 1e-9).contains(&raw));
        }
    }
}
