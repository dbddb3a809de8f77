use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::featurize::MelSpectrogram;
use crate::model::{embed_audio, embed_images, similarity, ModelParams};
use crate::parallel::Execution;
use crate::synthgen::{Dataset, ImageSample, SplitKind};

/// Familiar-class words and isolated images held out for model selection.
#[derive(Debug, Clone)]
pub struct DevSet {
    pub audio: Vec<String>,
    pub audio_class: Vec<String>,
    pub mels: Vec<MelSpectrogram>,
    pub images: Vec<String>,
    pub image_class: Vec<String>,
    pub samples: Vec<ImageSample>,
}

impl DevSet {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let recs = data.manifest.split(SplitKind::Dev);
        if recs.is_empty() {
            return Err(TrainError::Insufficient("empty dev split".into()));
        }
        if recs.iter().any(|r| data.manifest.is_novel(&r.class)) {
            return Err(TrainError::Config("dev split contains a novel class".into()));
        }
        let mut dev = DevSet {
            audio: Vec::new(),
            audio_class: Vec::new(),
            mels: Vec::new(),
            images: Vec::new(),
            image_class: Vec::new(),
            samples: Vec::new(),
        };
        for r in recs {
            let a = data.audio_by_id(&r.audio).expect("validated manifest");
            let i = data.image_by_id(&r.image).expect("validated manifest");
            dev.audio.push(r.audio.clone());
            dev.audio_class.push(r.class.clone());
            dev.mels.push(a.mel.clone());
            dev.images.push(r.image.clone());
            dev.image_class.push(r.class.clone());
            dev.samples.push(i.clone());
        }
        Ok(dev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub accuracy: f64,
    pub trials: usize,
    pub ties: usize,
}

/// Accuracy over every two-way trial (query word, image of its class,
/// image of another class) given a word × image similarity table. A tie
/// counts as an error.
pub fn two_way_accuracy(
    sims: &[Vec<f64>],
    audio_class: &[String],
    image_class: &[String],
) -> Result<ValidationResult> {
    let (mut correct, mut trials, mut ties) = (0usize, 0usize, 0usize);
    for (q, row) in sims.iter().enumerate() {
        for (t, st) in row.iter().enumerate() {
            if image_class[t] != audio_class[q] {
                continue;
            }
            for (o, so) in row.iter().enumerate() {
                if image_class[o] == audio_class[q] {
                    continue;
                }
                trials += 1;
                if st > so {
                    correct += 1;
                } else if st == so {
                    ties += 1;
                }
            }
        }
    }
    if trials == 0 {
        return Err(TrainError::Insufficient("no validation trials".into()));
    }
    Ok(ValidationResult {
        accuracy: correct as f64 / trials as f64,
        trials,
        ties,
    })
}

/// Similarity of every dev word with every dev image.
pub fn dev_similarities(params: &ModelParams, dev: &DevSet, exec: Execution) -> Result<Vec<Vec<f64>>> {
    let mels: Vec<&MelSpectrogram> = dev.mels.iter().collect();
    let imgs: Vec<&ImageSample> = dev.samples.iter().collect();
    let words = embed_audio(params, &mels, exec)?;
    let cells = embed_images(params, &imgs, exec)?;
    words
        .iter()
        .map(|w| {
            cells
                .iter()
                .map(|c| similarity(w, c).map(|(s, _)| s).map_err(TrainError::from))
                .collect()
        })
        .collect()
}

/// Two-way familiar matching accuracy on the dev set.
pub fn validate(params: &ModelParams, dev: &DevSet, exec: Execution) -> Result<ValidationResult> {
    let sims = dev_similarities(params, dev, exec)?;
    two_way_accuracy(&sims, &dev.audio_class, &dev.image_class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes() -> (Vec<String>, Vec<String>) {
        let c: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        (c.clone(), c)
    }

    #[test]
    fn perfect_scorer_gets_one() {
        let (ac, ic) = classes();
        let sims: Vec<Vec<f64>> = (0..4)
            .map(|q| (0..4).map(|i| if ac[q] == ic[i] { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = two_way_accuracy(&sims, &ac, &ic).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.trials, 4 * 2 * 2);
    }

    #[test]
    fn constant_scorer_gets_zero_under_tie_rule() {
        let (ac, ic) = classes();
        let sims = vec![vec![3.0; 4]; 4];
        let r = two_way_accuracy(&sims, &ac, &ic).unwrap();
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.ties, r.trials);
    }

    #[test]
    fn no_trials_is_an_error() {
        let ac = vec!["a".to_string()];
        assert!(two_way_accuracy(&[vec![1.0]], &ac, &ac).is_err());
    }
}
