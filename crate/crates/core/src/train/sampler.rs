use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::{Result, TrainConfig, TrainError};
use crate::losses::{AnchorTerms, ContrastiveBatch, LossKind};
use crate::synthgen::{Dataset, DatasetManifest, PairRecord, SplitKind};

/// Training-split items grouped by familiar class.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    pub classes: Vec<String>,
    /// Dataset audio indices per class.
    pub audio: Vec<Vec<usize>>,
    /// Dataset image indices per class.
    pub images: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let classes: Vec<String> = data
            .manifest
            .familiar_classes()
            .into_iter()
            .map(String::from)
            .collect();
        let mut audio = vec![Vec::new(); classes.len()];
        let mut images = vec![Vec::new(); classes.len()];
        for rec in &data.manifest.train {
            let c = classes
                .iter()
                .position(|c| *c == rec.class)
                .ok_or_else(|| TrainError::Insufficient(format!("{} is not familiar", rec.class)))?;
            audio[c].push(data.audio_index(&rec.audio).expect("validated manifest"));
            images[c].push(data.image_index(&rec.image).expect("validated manifest"));
        }
        Ok(Self {
            classes,
            audio,
            images,
        })
    }

    pub fn check_capacity(&self, cfg: &TrainConfig) -> Result<()> {
        let k = cfg.per_class_per_step;
        if self.classes.len() < 2 {
            return Err(TrainError::Insufficient("need at least two familiar classes".into()));
        }
        for (c, name) in self.classes.iter().enumerate() {
            if self.audio[c].len() < k || self.images[c].len() < k {
                return Err(TrainError::Insufficient(format!(
                    "class {name} has fewer than {k} training items"
                )));
            }
        }
        let others = (self.classes_per_pool(cfg) - 1) * k;
        if cfg.loss.kind == LossKind::Mattnet && others < cfg.n_neg {
            return Err(TrainError::Insufficient(format!(
                "a pool offers {others} negatives, {} requested",
                cfg.n_neg
            )));
        }
        Ok(())
    }

    /// Splits one pass over all training words into step pools.
    ///
    /// Each class's words are shuffled and cut into chunks of
    /// `per_class_per_step`; every pool takes one chunk from each of
    /// `classes_per_step` distinct classes, preferring classes with the most
    /// chunks left. Classes without a chunk still supply (non-anchor) items
    /// when a pool would otherwise hold too few classes.
    pub fn epoch_pools<R: Rng>(&self, cfg: &TrainConfig, rng: &mut R) -> Vec<StepPool> {
        let k = cfg.per_class_per_step;
        let n_class = self.classes.len();
        let per_pool = self.classes_per_pool(cfg);
        let mut chunks: Vec<Vec<Vec<usize>>> = self
            .audio
            .iter()
            .map(|a| {
                let mut a = a.clone();
                a.shuffle(rng);
                a.chunks(k).rev().map(|c| c.to_vec()).collect()
            })
            .collect();
        let mut pools = Vec::new();
        while chunks.iter().any(|c| !c.is_empty()) {
            let mut order: Vec<usize> = (0..n_class).collect();
            order.shuffle(rng);
            // stable sort keeps the random order among equals
            order.sort_by_key(|&c| std::cmp::Reverse(chunks[c].len()));
            let chosen: Vec<usize> = order.into_iter().take(per_pool).collect();
            let mut members = vec![None; n_class];
            for &c in &chosen {
                members[c] = Some(chunks[c].pop().unwrap_or_default());
            }
            pools.push(self.pool(cfg, &members, rng));
        }
        pools
    }

    fn classes_per_pool(&self, cfg: &TrainConfig) -> usize {
        match cfg.classes_per_step {
            0 => self.classes.len(),
            n => n.clamp(2, self.classes.len()),
        }
    }

    /// Builds a pool from the classes present in `members`; each present
    /// class contributes `per_class_per_step` words and scenes, of which the
    /// listed words are anchors. Short chunks are topped up with non-anchor
    /// words of the same class.
    fn pool<R: Rng>(&self, cfg: &TrainConfig, members: &[Option<Vec<usize>>], rng: &mut R) -> StepPool {
        let k = cfg.per_class_per_step;
        let mut audio = Vec::new();
        let mut images = Vec::new();
        let mut is_anchor = Vec::new();
        let mut slot_class = Vec::new();
        for (c, m) in members.iter().enumerate() {
            let Some(anchors) = m else { continue };
            let mut words = anchors.clone();
            is_anchor.extend(std::iter::repeat_n(true, words.len()));
            let spare: Vec<usize> = self.audio[c].iter().copied().filter(|i| !words.contains(i)).collect();
            let fill = k - words.len();
            words.extend(spare.choose_multiple(rng, fill).copied());
            is_anchor.extend(std::iter::repeat_n(false, fill));
            audio.extend(words);
            images.extend(self.images[c].choose_multiple(rng, k).copied());
            slot_class.extend(std::iter::repeat_n(c, k));
        }
        let mut anchors = Vec::new();
        for slot in 0..audio.len() {
            if !is_anchor[slot] {
                continue;
            }
            let c = slot_class[slot];
            let same: Vec<usize> = (0..audio.len()).filter(|&s| s != slot && slot_class[s] == c).collect();
            let other: Vec<usize> = (0..audio.len()).filter(|&s| slot_class[s] != c).collect();
            let (neg_audio, neg_images) = match cfg.loss.kind {
                LossKind::Mattnet => (
                    sorted(other.choose_multiple(rng, cfg.n_neg).copied().collect()),
                    sorted(other.choose_multiple(rng, cfg.n_neg).copied().collect()),
                ),
                _ => (other.clone(), other),
            };
            anchors.push(AnchorTerms {
                audio: slot,
                image: slot,
                pos_audio: sorted(same.choose_multiple(rng, cfg.n_pos).copied().collect()),
                pos_images: sorted(same.choose_multiple(rng, cfg.n_pos).copied().collect()),
                neg_audio,
                neg_images,
            });
        }
        StepPool {
            audio,
            images,
            anchors,
        }
    }
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Items encoded in one optimisation step and the loss terms over them.
/// Slot `s` of `audio`/`images` is row/column `s` of the similarity matrix.
#[derive(Debug, Clone)]
pub struct StepPool {
    pub audio: Vec<usize>,
    pub images: Vec<usize>,
    pub anchors: Vec<AnchorTerms>,
}

impl StepPool {
    /// The pool's anchors expressed as id-level batches.
    pub fn batches(&self, data: &Dataset) -> Vec<ContrastiveBatch> {
        let a = |slot: &usize| data.audio[self.audio[*slot]].id.clone();
        let v = |slot: &usize| data.images[self.images[*slot]].id.clone();
        self.anchors
            .iter()
            .map(|t| ContrastiveBatch {
                anchor_audio: a(&t.audio),
                anchor_image: v(&t.image),
                pos_audio: t.pos_audio.iter().map(a).collect(),
                pos_images: t.pos_images.iter().map(v).collect(),
                neg_audio: t.neg_audio.iter().map(a).collect(),
                neg_images: t.neg_images.iter().map(v).collect(),
            })
            .collect()
    }
}

/// Draws positives and negatives for one training pair straight from the
/// manifest: `n_pos` same-class words and scenes (excluding the anchor's
/// own) and `n_neg` words and scenes of other familiar classes.
pub fn sample_contrastive_batch<R: Rng>(
    manifest: &DatasetManifest,
    anchor: &PairRecord,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ContrastiveBatch> {
    if manifest.is_novel(&anchor.class) {
        return Err(TrainError::Config(format!("anchor class {} is novel", anchor.class)));
    }
    let train = manifest.split(SplitKind::Train);
    let pick = |pred: &dyn Fn(&PairRecord) -> bool, audio: bool| -> Vec<String> {
        train
            .iter()
            .filter(|r| pred(r))
            .map(|r| if audio { r.audio.clone() } else { r.image.clone() })
            .collect()
    };
    let same_audio = pick(&|r| r.class == anchor.class && r.audio != anchor.audio, true);
    let same_images = pick(&|r| r.class == anchor.class && r.image != anchor.image, false);
    let other = |r: &PairRecord| r.class != anchor.class && !manifest.is_novel(&r.class);
    let other_audio = pick(&other, true);
    let other_images = pick(&other, false);
    if same_audio.len() < cfg.n_pos || same_images.len() < cfg.n_pos {
        return Err(TrainError::Insufficient(format!("class {} lacks positives", anchor.class)));
    }
    if other_audio.len() < cfg.n_neg || other_images.len() < cfg.n_neg {
        return Err(TrainError::Insufficient("not enough negatives".into()));
    }
    let mut draw = |v: &[String], n: usize| v.choose_multiple(rng, n).cloned().collect::<Vec<_>>();
    Ok(ContrastiveBatch {
        anchor_audio: anchor.audio.clone(),
        anchor_image: anchor.image.clone(),
        pos_audio: draw(&same_audio, cfg.n_pos),
        pos_images: draw(&same_images, cfg.n_pos),
        neg_audio: draw(&other_audio, cfg.n_neg),
        neg_images: draw(&other_images, cfg.n_neg),
    })
}
