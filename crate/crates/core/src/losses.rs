//! Training objectives over audio–image similarity scores.
//!
//! Each loss exists twice: as a plain function of precomputed scores (used
//! for reference values and diagnostics) and as a [`Graph`] builder over a
//! similarity matrix (used for training). The two routes are tested
//! against each other.
//!
//! * [`LossKind::Mattnet`] pushes positive-pair scores to 100 and negative
//!   pairs to 0 with squared error.
//! * [`LossKind::Hinge`] asks the positive pair to beat every negative by a
//!   margin.
//! * [`LossKind::Infonce`] is the cross-entropy of picking the positive
//!   among the negatives, in each direction. The minimised quantity is the
//!   negative log-probability.
//!
//! Hinge and InfoNCE divide raw scores by a temperature first, because the
//! raw scores live on the 0–100 scale the squared-error loss targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, NodeId, Tensor, TensorError};

pub const POSITIVE_TARGET: f64 = 100.0;
pub const NEGATIVE_TARGET: f64 = 0.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid contrastive batch: {0}")]
    Batch(String),
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mattnet,
    Hinge,
    Infonce,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mattnet, LossKind::Hinge, LossKind::Infonce];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mattnet => "mattnet",
            LossKind::Hinge => "hinge",
            LossKind::Infonce => "infonce",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub margin: f64,
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Mattnet,
            margin: 1.0,
            temperature: 100.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.temperature > 0.0) {
            return Err(LossError::Config(format!(
                "margin {} and temperature {} must be positive",
                self.margin, self.temperature
            )));
        }
        Ok(())
    }
}

/// Item ids taking part in one anchor's loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastiveBatch {
    pub anchor_audio: String,
    pub anchor_image: String,
    pub pos_audio: Vec<String>,
    pub pos_images: Vec<String>,
    pub neg_audio: Vec<String>,
    pub neg_images: Vec<String>,
}

impl ContrastiveBatch {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        [&self.anchor_audio, &self.anchor_image]
            .into_iter()
            .chain(&self.pos_audio)
            .chain(&self.pos_images)
            .chain(&self.neg_audio)
            .chain(&self.neg_images)
            .map(String::as_str)
    }

    /// Checks the class structure. `lookup` maps an id to its class and
    /// whether that class is novel.
    pub fn check<'c>(&self, lookup: impl Fn(&str) -> Option<(&'c str, bool)>) -> Result<()> {
        let info = |id: &str| lookup(id).ok_or_else(|| LossError::Batch(format!("unknown id {id}")));
        let (class, novel) = info(&self.anchor_audio)?;
        if novel {
            return Err(LossError::Batch(format!("anchor class {class} is novel")));
        }
        if info(&self.anchor_image)?.0 != class {
            return Err(LossError::Batch("anchor image class differs from anchor audio".into()));
        }
        for id in self.pos_audio.iter().chain(&self.pos_images) {
            if info(id)?.0 != class {
                return Err(LossError::Batch(format!("positive {id} is not of class {class}")));
            }
        }
        if self.pos_audio.contains(&self.anchor_audio) || self.pos_images.contains(&self.anchor_image) {
            return Err(LossError::Batch("anchor repeated among positives".into()));
        }
        if self.neg_audio.is_empty() || self.neg_images.is_empty() {
            return Err(LossError::Batch("at least one negative per direction".into()));
        }
        for id in self.neg_audio.iter().chain(&self.neg_images) {
            let (c, n) = info(id)?;
            if n {
                return Err(LossError::Batch(format!("negative {id} is from novel class {c}")));
            }
            if c == class {
                return Err(LossError::Batch(format!("negative {id} shares the anchor class")));
            }
        }
        Ok(())
    }
}

/// Scores entering one anchor's loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContrastiveScores {
    /// `S(a, v)` for the anchor pair.
    pub anchor: f64,
    /// `S(a⁻, v)`: negative audio against the anchor image.
    pub neg_audio: Vec<f64>,
    /// `S(a, v⁻)`: anchor audio against negative images.
    pub neg_images: Vec<f64>,
    /// `S(a, v⁺)`.
    pub pos_images: Vec<f64>,
    /// `S(a⁺, v)`.
    pub pos_audio: Vec<f64>,
}

fn sq(x: f64, t: f64) -> f64 {
    (x - t) * (x - t)
}

/// Squared-error contrastive loss and the number of terms it summed.
pub fn mattnet_loss(s: &ContrastiveScores) -> (f64, usize) {
    let mut total = sq(s.anchor, POSITIVE_TARGET);
    let mut terms = 1;
    for &x in s.neg_audio.iter().chain(&s.neg_images) {
        total += sq(x, NEGATIVE_TARGET);
        terms += 1;
    }
    for &x in s.pos_images.iter().chain(&s.pos_audio) {
        total += sq(x, POSITIVE_TARGET);
        terms += 1;
    }
    (total, terms)
}

pub fn hinge_loss(anchor: f64, neg_audio: &[f64], neg_images: &[f64], margin: f64) -> f64 {
    neg_audio
        .iter()
        .chain(neg_images)
        .map(|&n| (n - anchor + margin).max(0.0))
        .sum()
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Negative log-probability of the positive in each direction, summed.
pub fn infonce_loss(anchor: f64, neg_audio: &[f64], neg_images: &[f64]) -> Result<f64> {
    if neg_audio.is_empty() || neg_images.is_empty() {
        return Err(LossError::Batch("at least one negative per direction".into()));
    }
    let dir = |negs: &[f64]| {
        let mut all = Vec::with_capacity(negs.len() + 1);
        all.push(anchor);
        all.extend_from_slice(negs);
        logsumexp(&all) - anchor
    };
    Ok(dir(neg_images) + dir(neg_audio))
}

/// Loss of one anchor from scores, per the configured kind.
pub fn loss_from_scores(cfg: &LossConfig, s: &ContrastiveScores) -> Result<f64> {
    let t = cfg.temperature;
    let scaled = |xs: &[f64]| xs.iter().map(|x| x / t).collect::<Vec<_>>();
    match cfg.kind {
        LossKind::Mattnet => Ok(mattnet_loss(s).0),
        LossKind::Hinge => Ok(hinge_loss(
            s.anchor / t,
            &scaled(&s.neg_audio),
            &scaled(&s.neg_images),
            cfg.margin,
        )),
        LossKind::Infonce => infonce_loss(s.anchor / t, &scaled(&s.neg_audio), &scaled(&s.neg_images)),
    }
}

/// One anchor's terms as positions in a similarity matrix laid out
/// `[n_images, n_audio]`: `image` indexes rows, `audio` columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorTerms {
    pub audio: usize,
    pub image: usize,
    /// Audio columns paired with the anchor image.
    pub pos_audio: Vec<usize>,
    /// Image rows paired with the anchor audio.
    pub pos_images: Vec<usize>,
    pub neg_audio: Vec<usize>,
    pub neg_images: Vec<usize>,
}

impl AnchorTerms {
    /// Reads this anchor's scores out of a row-major `[n_images, n_audio]`
    /// matrix.
    pub fn scores(&self, s: &[f64], n_audio: usize) -> ContrastiveScores {
        let at = |img: usize, aud: usize| s[img * n_audio + aud];
        ContrastiveScores {
            anchor: at(self.image, self.audio),
            neg_audio: self.neg_audio.iter().map(|&a| at(self.image, a)).collect(),
            neg_images: self.neg_images.iter().map(|&v| at(v, self.audio)).collect(),
            pos_images: self.pos_images.iter().map(|&v| at(v, self.audio)).collect(),
            pos_audio: self.pos_audio.iter().map(|&a| at(self.image, a)).collect(),
        }
    }
}

/// Mean loss over `anchors`, built on the similarity-matrix node `s`.
/// Returns the scalar loss node and the total number of summed terms.
pub fn loss_graph(
    g: &mut Graph,
    s: NodeId,
    anchors: &[AnchorTerms],
    cfg: &LossConfig,
) -> Result<(NodeId, usize)> {
    cfg.validate()?;
    let shape = g.shape(s).to_vec();
    if shape.len() != 2 {
        return Err(LossError::Batch(format!("similarity matrix shape {shape:?}")));
    }
    if anchors.is_empty() {
        return Err(LossError::Batch("no anchors".into()));
    }
    let n_audio = shape[1];
    let idx = |img: usize, aud: usize| img * n_audio + aud;
    let inv_anchors = 1.0 / anchors.len() as f64;
    match cfg.kind {
        LossKind::Mattnet => {
            let mut flat = Vec::new();
            let mut targets = Vec::new();
            for a in anchors {
                flat.push(idx(a.image, a.audio));
                targets.push(POSITIVE_TARGET);
                for &n in &a.neg_audio {
                    flat.push(idx(a.image, n));
                    targets.push(NEGATIVE_TARGET);
                }
                for &n in &a.neg_images {
                    flat.push(idx(n, a.audio));
                    targets.push(NEGATIVE_TARGET);
                }
                for &p in &a.pos_images {
                    flat.push(idx(p, a.audio));
                    targets.push(POSITIVE_TARGET);
                }
                for &p in &a.pos_audio {
                    flat.push(idx(a.image, p));
                    targets.push(POSITIVE_TARGET);
                }
            }
            let terms = flat.len();
            let picked = g.gather(s, &flat)?;
            let t = g.constant(Tensor::vector(targets)?);
            let d = g.squared_difference(picked, t)?;
            let total = g.sum(d);
            Ok((g.scale(total, inv_anchors), terms))
        }
        LossKind::Hinge => {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for a in anchors {
                for &n in &a.neg_audio {
                    pos.push(idx(a.image, a.audio));
                    neg.push(idx(a.image, n));
                }
                for &n in &a.neg_images {
                    pos.push(idx(a.image, a.audio));
                    neg.push(idx(n, a.audio));
                }
            }
            if neg.is_empty() {
                return Err(LossError::Batch("hinge needs negatives".into()));
            }
            let terms = neg.len();
            let p = g.gather(s, &pos)?;
            let n = g.gather(s, &neg)?;
            let diff = g.sub(n, p)?;
            let diff = g.scale(diff, 1.0 / cfg.temperature);
            let shifted = g.offset(diff, cfg.margin);
            let r = g.relu(shifted);
            let total = g.sum(r);
            Ok((g.scale(total, inv_anchors), terms))
        }
        LossKind::Infonce => {
            let mut parts = Vec::new();
            let mut terms = 0;
            for by_audio in [false, true] {
                let width = if by_audio {
                    anchors[0].neg_audio.len()
                } else {
                    anchors[0].neg_images.len()
                } + 1;
                let mut flat = Vec::with_capacity(anchors.len() * width);
                for a in anchors {
                    let negs = if by_audio { &a.neg_audio } else { &a.neg_images };
                    if negs.len() + 1 != width || width == 1 {
                        return Err(LossError::Batch(
                            "InfoNCE needs the same non-zero number of negatives for every anchor".into(),
                        ));
                    }
                    flat.push(idx(a.image, a.audio));
                    for &n in negs {
                        flat.push(if by_audio { idx(a.image, n) } else { idx(n, a.audio) });
                    }
                }
                terms += flat.len();
                let picked = g.gather(s, &flat)?;
                let logits = g.reshape(picked, &[anchors.len(), width])?;
                let logits = g.scale(logits, 1.0 / cfg.temperature);
                let lse = g.logsumexp(logits, 1)?;
                let pos = g.slice(logits, 1, 0, 1)?;
                let pos = g.reshape(pos, &[anchors.len()])?;
                let nll = g.sub(lse, pos)?;
                parts.push(g.sum(nll));
            }
            let total = g.add(parts[0], parts[1])?;
            Ok((g.scale(total, inv_anchors), terms))
        }
    }
}
