use super::{ModelConfig, ModelError, ParamNodes, Result};
use crate::featurize::MelSpectrogram;
use crate::tensor::{Graph, NodeId, Tensor};

/// A batch of spectrograms laid out time-major for the recurrent layers.
#[derive(Debug, Clone)]
pub struct AudioBatch {
    /// `[steps * batch, n_mels]`, normalised; row `t * batch + b`.
    pub input: Tensor,
    pub batch: usize,
    pub steps: usize,
    /// Number of frames each item contributes.
    pub lengths: Vec<usize>,
}

impl AudioBatch {
    /// With `mask_padding` only the valid frames take part and the batch
    /// runs for the longest valid length; otherwise every frame counts.
    pub fn new(cfg: &ModelConfig, mels: &[&MelSpectrogram]) -> Result<Self> {
        if mels.is_empty() {
            return Err(ModelError::Input("empty audio batch".into()));
        }
        for m in mels {
            if m.n_mels != cfg.n_mels || m.n_frames != cfg.n_frames {
                return Err(ModelError::Input(format!(
                    "spectrogram is {}x{}, model expects {}x{}",
                    m.n_mels, m.n_frames, cfg.n_mels, cfg.n_frames
                )));
            }
        }
        let lengths: Vec<usize> = mels
            .iter()
            .map(|m| {
                if cfg.mask_padding {
                    m.valid_frames.clamp(1, cfg.n_frames)
                } else {
                    cfg.n_frames
                }
            })
            .collect();
        let steps = *lengths.iter().max().expect("non-empty");
        let batch = mels.len();
        let mut data = vec![0.0; steps * batch * cfg.n_mels];
        for (b, m) in mels.iter().enumerate() {
            for t in 0..steps.min(m.n_frames) {
                let row = &mut data[(t * batch + b) * cfg.n_mels..(t * batch + b + 1) * cfg.n_mels];
                for (k, slot) in row.iter_mut().enumerate() {
                    *slot = (m.get(k, t) - cfg.mel_shift) / cfg.mel_scale;
                }
            }
        }
        Ok(Self {
            input: Tensor::new(vec![steps * batch, cfg.n_mels], data)?,
            batch,
            steps,
            lengths,
        })
    }

    fn mask(&self, t: usize) -> Option<Vec<f64>> {
        if self.lengths.iter().all(|&l| t < l) {
            return None;
        }
        Some(self.lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect())
    }
}

/// `out = m * new + (1 - m) * old`, exact for `m` in {0, 1}.
fn select(g: &mut Graph, mask: Option<&(NodeId, NodeId)>, new: NodeId, old: NodeId) -> Result<NodeId> {
    match mask {
        None => Ok(new),
        Some(&(m, inv)) => {
            let a = g.mul(m, new)?;
            let b = g.mul(inv, old)?;
            Ok(g.add(a, b)?)
        }
    }
}

/// Runs one LSTM layer over `proj` (the precomputed input projection,
/// `[steps * batch, 4H]`), forwards or backwards in time. Returns the
/// hidden state at each step, in time order.
fn lstm(
    g: &mut Graph,
    batch: &AudioBatch,
    proj: NodeId,
    w_hh: NodeId,
    hidden: usize,
    reverse: bool,
) -> Result<Vec<NodeId>> {
    let b = batch.batch;
    let zero = g.constant(Tensor::zeros(&[b, hidden]));
    let (mut h, mut c) = (zero, zero);
    let mut out = vec![zero; batch.steps];
    let order: Vec<usize> = if reverse {
        (0..batch.steps).rev().collect()
    } else {
        (0..batch.steps).collect()
    };
    for t in order {
        let x = g.slice(proj, 0, t * b, (t + 1) * b)?;
        let rec = g.matmul(h, w_hh)?;
        let z = g.add(x, rec)?;
        let zi = g.slice(z, 1, 0, hidden)?;
        let zf = g.slice(z, 1, hidden, 2 * hidden)?;
        let zg = g.slice(z, 1, 2 * hidden, 3 * hidden)?;
        let zo = g.slice(z, 1, 3 * hidden, 4 * hidden)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let gg = g.tanh(zg);
        let o = g.sigmoid(zo);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, gg)?;
        let c_new = g.add(keep, write)?;
        let tc = g.tanh(c_new);
        let h_new = g.mul(o, tc)?;
        let mask = batch.mask(t).map(|m| {
            let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
            (
                g.constant(Tensor::new(vec![b, 1], m).expect("finite")),
                g.constant(Tensor::new(vec![b, 1], inv).expect("finite")),
            )
        });
        c = select(g, mask.as_ref(), c_new, c)?;
        h = select(g, mask.as_ref(), h_new, h)?;
        out[t] = h;
    }
    Ok(out)
}

fn project(g: &mut Graph, x: NodeId, w_ih: NodeId, bias: NodeId) -> Result<NodeId> {
    let p = g.matmul(x, w_ih)?;
    Ok(g.add(p, bias)?)
}

/// First (unidirectional) recurrent layer; hidden state per step.
pub(crate) fn audio_layer1(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    batch: &AudioBatch,
    x: NodeId,
) -> Result<Vec<NodeId>> {
    let proj = project(g, x, pn.node("audio.l1.w_ih"), pn.node("audio.l1.b"))?;
    lstm(g, batch, proj, pn.node("audio.l1.w_hh"), cfg.hidden, false)
}

/// Builds the audio branch. Returns the input leaf (bind `batch.input`)
/// and the `[batch, D]` word embeddings.
pub fn audio_branch(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    batch: &AudioBatch,
) -> Result<(NodeId, NodeId)> {
    let x = g.input(batch.input.shape())?;
    let emb = audio_from_input(g, pn, cfg, batch, x)?;
    Ok((x, emb))
}

pub(crate) fn audio_from_input(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    batch: &AudioBatch,
    x: NodeId,
) -> Result<NodeId> {
    let (b, steps, h) = (batch.batch, batch.steps, cfg.hidden);
    let h1 = audio_layer1(g, pn, cfg, batch, x)?;
    let h1_all = if steps == 1 { h1[0] } else { g.concat(&h1, 0)? };
    let fwd_proj = project(g, h1_all, pn.node("audio.l2f.w_ih"), pn.node("audio.l2f.b"))?;
    let bwd_proj = project(g, h1_all, pn.node("audio.l2b.w_ih"), pn.node("audio.l2b.b"))?;
    let fwd = lstm(g, batch, fwd_proj, pn.node("audio.l2f.w_hh"), h, false)?;
    let bwd = lstm(g, batch, bwd_proj, pn.node("audio.l2b.w_hh"), h, true)?;
    let mut rows = Vec::with_capacity(steps);
    for t in 0..steps {
        rows.push(g.concat(&[fwd[t], bwd[t]], 1)?);
    }
    let states = if steps == 1 { rows[0] } else { g.concat(&rows, 0)? };

    // attention-pooling head over time
    let u0 = g.matmul(states, pn.node("audio.head.w1"))?;
    let u1 = g.add(u0, pn.node("audio.head.b1"))?;
    let u = g.relu(u1);
    let f0 = g.matmul(u, pn.node("audio.head.w2"))?;
    let f = g.add(f0, pn.node("audio.head.b2"))?;
    let logit = g.matmul(u, pn.node("audio.head.w_att"))?;
    let mut logit = g.reshape(logit, &[steps, b])?;
    if batch.lengths.iter().any(|&l| l < steps) {
        let mut bias = vec![0.0; steps * b];
        for (k, &l) in batch.lengths.iter().enumerate() {
            for t in l..steps {
                bias[t * b + k] = -1e9;
            }
        }
        let bias = g.constant(Tensor::new(vec![steps, b], bias)?);
        logit = g.add(logit, bias)?;
    }
    let lse = g.logsumexp(logit, 0)?;
    let centred = g.sub(logit, lse)?;
    let alpha = g.exp(centred);
    let alpha = g.reshape(alpha, &[steps, b, 1])?;
    let f = g.reshape(f, &[steps, b, cfg.embed_dim])?;
    let weighted = g.mul(alpha, f)?;
    Ok(g.sum_axis(weighted, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{embed_audio, ModelParams};
    use crate::parallel::Execution;
    use crate::tensor::{grad_check, Bindings};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mel(cfg: &ModelConfig, valid: usize, seed: u64) -> MelSpectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![-23.0; cfg.n_mels * cfg.n_frames];
        for m in 0..cfg.n_mels {
            for t in 0..valid {
                values[m * cfg.n_frames + t] = rng.random_range(-3.0..3.0);
            }
        }
        MelSpectrogram {
            values,
            n_mels: cfg.n_mels,
            n_frames: cfg.n_frames,
            valid_frames: valid,
        }
    }

    #[test]
    fn trailing_padding_is_ignored_when_masked() {
        let cfg = ModelConfig {
            n_frames: 12,
            ..ModelConfig::tiny()
        };
        let p = ModelParams::random(cfg, 4).unwrap();
        let a = mel(&cfg, 5, 1);
        let mut b = a.clone();
        for m in 0..cfg.n_mels {
            for t in 5..12 {
                b.values[m * 12 + t] = 1.5 * (t as f64).sin();
            }
        }
        let ea = embed_audio(&p, &[&a], Execution::Sequential).unwrap();
        let eb = embed_audio(&p, &[&b], Execution::Sequential).unwrap();
        for (x, y) in ea[0].iter().zip(&eb[0]) {
            assert!((x - y).abs() < 1e-6);
        }
        let unmasked = ModelParams::from_named(
            ModelConfig {
                mask_padding: false,
                ..cfg
            },
            p.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        )
        .unwrap();
        let ua = embed_audio(&unmasked, &[&a], Execution::Sequential).unwrap();
        let ub = embed_audio(&unmasked, &[&b], Execution::Sequential).unwrap();
        assert!(ua[0].iter().zip(&ub[0]).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn embedding_is_batch_independent() {
        let cfg = ModelConfig {
            n_frames: 10,
            ..ModelConfig::tiny()
        };
        let p = ModelParams::random(cfg, 2).unwrap();
        let (a, b) = (mel(&cfg, 4, 1), mel(&cfg, 9, 2));
        let solo = embed_audio(&p, &[&a], Execution::Sequential).unwrap();
        let pair = embed_audio(&p, &[&b, &a], Execution::Sequential).unwrap();
        assert_eq!(solo[0], pair[1]);
    }

    #[test]
    fn sum_of_embedding_passes_grad_check() {
        let cfg = ModelConfig::tiny();
        let p = ModelParams::random(cfg, 5).unwrap();
        let (m1, m2) = (mel(&cfg, 3, 1), mel(&cfg, 4, 2));
        let batch = AudioBatch::new(&cfg, &[&m1, &m2]).unwrap();
        let mut g = Graph::new();
        let pn = ParamNodes::declare(&mut g, &p).unwrap();
        let (x, emb) = audio_branch(&mut g, &pn, &cfg, &batch).unwrap();
        let root = g.sum(emb);
        let mut b = Bindings::new();
        pn.bind(&mut b, &p);
        b.bind(x, &batch.input);
        let audio: Vec<NodeId> = p.indices_with_prefix("audio.").iter().map(|&i| pn.ids[i]).collect();
        assert!(grad_check(&g, root, &b, &audio, 1e-5).unwrap() < 1e-5);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let cfg = ModelConfig::tiny();
        let other = ModelConfig {
            n_mels: 5,
            ..cfg
        };
        let m = mel(&other, 2, 1);
        assert!(AudioBatch::new(&cfg, &[&m]).is_err());
    }
}
