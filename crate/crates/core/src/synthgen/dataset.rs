use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::audio::synth_word_audio;
use super::image::{read_image_file, render_scene, synth_image, write_image_file, RenderMode};
use super::vocab::{generate_vocabulary, ClassSpec, Split};
use super::{mix_seed, SynthError};
use crate::container::Container;
use crate::featurize::{
    featurize_audio, normalize_image, MelConfig, MelSpectrogram, Waveform, IMAGENET_MEAN,
    IMAGENET_STD,
};
use crate::parallel::Execution;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const FEATURE_CACHE: &str = "features.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_familiar: usize,
    pub n_novel: usize,
    pub onset_overlap_pairs: usize,
    /// Spoken words and scenes per familiar class in the training split.
    pub train_per_class: usize,
    pub min_train_per_class: usize,
    /// Words and isolated images per familiar class in the dev split.
    pub dev_per_class: usize,
    /// Words and isolated images per class (familiar and novel) for testing.
    pub test_per_class: usize,
    pub image_size: usize,
    /// Chance that a training scene also shows a novel-class object.
    pub leakage_prob: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_familiar: 8,
            n_novel: 6,
            onset_overlap_pairs: 0,
            train_per_class: 60,
            min_train_per_class: 20,
            dev_per_class: 2,
            test_per_class: 10,
            image_size: 64,
            leakage_prob: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioItem {
    pub id: String,
    pub class: String,
    pub split: SplitKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageItem {
    pub id: String,
    pub class: String,
    pub split: SplitKind,
    pub source_bucket: u8,
    pub is_isolated: bool,
    /// Every class drawn into the image, target first.
    pub shapes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub audio: String,
    pub image: String,
    pub class: String,
    pub source_bucket: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub config: DatasetConfig,
    pub vocabulary: Vec<ClassSpec>,
    pub audio: Vec<AudioItem>,
    pub images: Vec<ImageItem>,
    pub train: Vec<PairRecord>,
    pub dev: Vec<PairRecord>,
    pub test: Vec<PairRecord>,
}

impl DatasetManifest {
    pub fn class(&self, name: &str) -> Option<&ClassSpec> {
        self.vocabulary.iter().find(|c| c.name == name)
    }

    pub fn is_novel(&self, class: &str) -> bool {
        self.class(class).is_some_and(|c| c.is_novel())
    }

    pub fn familiar_classes(&self) -> Vec<&str> {
        self.vocabulary
            .iter()
            .filter(|c| c.split == Split::Familiar)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn novel_classes(&self) -> Vec<&str> {
        self.vocabulary
            .iter()
            .filter(|c| c.split == Split::Novel)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn split(&self, kind: SplitKind) -> &[PairRecord] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Dev => &self.dev,
            SplitKind::Test => &self.test,
        }
    }

    /// Checks every structural invariant of the corpus.
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Invariant(m));
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return fail(format!("schema version {}", self.schema_version));
        }
        let mut names = HashSet::new();
        for c in &self.vocabulary {
            if !names.insert(c.name.as_str()) {
                return fail(format!("duplicate class {}", c.name));
            }
        }
        let audio: HashMap<&str, &AudioItem> =
            self.audio.iter().map(|a| (a.id.as_str(), a)).collect();
        let images: HashMap<&str, &ImageItem> =
            self.images.iter().map(|i| (i.id.as_str(), i)).collect();
        if audio.len() != self.audio.len() || images.len() != self.images.len() {
            return fail("duplicate item ids".into());
        }
        let mut seen_split: HashMap<&str, SplitKind> = HashMap::new();
        for kind in [SplitKind::Train, SplitKind::Dev, SplitKind::Test] {
            for rec in self.split(kind) {
                let Some(class) = self.class(&rec.class) else {
                    return fail(format!("unknown class {}", rec.class));
                };
                if kind != SplitKind::Test && class.is_novel() {
                    return fail(format!("novel class {} in {kind:?}", rec.class));
                }
                let (Some(a), Some(i)) = (audio.get(rec.audio.as_str()), images.get(rec.image.as_str()))
                else {
                    return fail(format!("dangling ids {} / {}", rec.audio, rec.image));
                };
                if a.class != rec.class || i.class != rec.class || a.split != kind || i.split != kind {
                    return fail(format!("record {}/{} disagrees with items", rec.audio, rec.image));
                }
                for id in [rec.audio.as_str(), rec.image.as_str()] {
                    if let Some(prev) = seen_split.insert(id, kind) {
                        if prev != kind {
                            return fail(format!("{id} appears in {prev:?} and {kind:?}"));
                        }
                    }
                }
                match kind {
                    SplitKind::Train => {
                        if i.is_isolated {
                            return fail(format!("training image {} is isolated", i.id));
                        }
                        if self.config.leakage_prob == 0.0
                            && i.shapes.iter().any(|s| self.is_novel(s))
                        {
                            return fail(format!("training scene {} shows a novel class", i.id));
                        }
                    }
                    _ => {
                        if !i.is_isolated {
                            return fail(format!("{kind:?} image {} is not isolated", i.id));
                        }
                    }
                }
            }
        }
        for class in self.familiar_classes() {
            let n = self.train.iter().filter(|r| r.class == class).count();
            if n < self.config.min_train_per_class {
                return fail(format!("class {class} has {n} training pairs"));
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let path = dir.join("manifest.json");
        let text = fs::read(&path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_slice(&text).map_err(|e| SynthError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }
}

enum Job {
    Audio { class: usize, id: String, seed: u64 },
    Image { class: usize, id: String, mode: RenderMode, bucket: u8, seed: u64, leak: bool },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Generates the corpus under `dir` (manifest, waveforms, images and a
/// feature cache) and returns the manifest.
pub fn build_dataset(
    cfg: &DatasetConfig,
    mel: &MelConfig,
    dir: &Path,
    exec: Execution,
) -> Result<DatasetManifest, SynthError> {
    if cfg.n_novel == 0 {
        return Err(SynthError::TooFewClasses {
            what: "novel",
            min: 2,
            got: 0,
        });
    }
    if cfg.train_per_class < cfg.min_train_per_class.max(1) {
        return Err(SynthError::Insufficient(format!(
            "{} training pairs per class, minimum {}",
            cfg.train_per_class,
            cfg.min_train_per_class.max(1)
        )));
    }
    if cfg.dev_per_class == 0 || cfg.test_per_class == 0 {
        return Err(SynthError::Insufficient(
            "dev and test need at least one instance per class".into(),
        ));
    }
    let vocab = generate_vocabulary(cfg.n_familiar, cfg.n_novel, cfg.onset_overlap_pairs, cfg.seed)?;
    let familiar: Vec<usize> = (0..vocab.len()).filter(|&i| !vocab[i].is_novel()).collect();

    let mut manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed: cfg.seed,
        config_hash: None,
        config: cfg.clone(),
        vocabulary: vocab.clone(),
        audio: Vec::new(),
        images: Vec::new(),
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    let mut jobs = Vec::new();
    let mut counter = 0u64;
    let mut add_pair = |m: &mut DatasetManifest, jobs: &mut Vec<Job>, class: usize, split: SplitKind| {
        let n = counter;
        counter += 1;
        let aid = format!("a{n:06}");
        let iid = format!("i{n:06}");
        let bucket = (mix_seed(cfg.seed ^ 0xB0C4, n) & 1) as u8;
        let isolated = split != SplitKind::Train;
        let leak = split == SplitKind::Train
            && cfg.leakage_prob > 0.0
            && (mix_seed(cfg.seed ^ 0x1EA4, n) as f64 / u64::MAX as f64) < cfg.leakage_prob;
        let name = vocab[class].name.clone();
        m.audio.push(AudioItem {
            id: aid.clone(),
            class: name.clone(),
            split,
        });
        m.images.push(ImageItem {
            id: iid.clone(),
            class: name.clone(),
            split,
            source_bucket: bucket,
            is_isolated: isolated,
            shapes: Vec::new(),
        });
        let rec = PairRecord {
            audio: aid.clone(),
            image: iid.clone(),
            class: name,
            source_bucket: bucket,
        };
        match split {
            SplitKind::Train => m.train.push(rec),
            SplitKind::Dev => m.dev.push(rec),
            SplitKind::Test => m.test.push(rec),
        }
        jobs.push(Job::Audio {
            class,
            id: aid,
            seed: mix_seed(cfg.seed, 2 * n),
        });
        jobs.push(Job::Image {
            class,
            id: iid,
            mode: if isolated {
                RenderMode::Isolated
            } else {
                RenderMode::Scene
            },
            bucket,
            seed: mix_seed(cfg.seed, 2 * n + 1),
            leak,
        });
    };
    for &c in &familiar {
        for _ in 0..cfg.train_per_class {
            add_pair(&mut manifest, &mut jobs, c, SplitKind::Train);
        }
    }
    for &c in &familiar {
        for _ in 0..cfg.dev_per_class {
            add_pair(&mut manifest, &mut jobs, c, SplitKind::Dev);
        }
    }
    for c in 0..vocab.len() {
        for _ in 0..cfg.test_per_class {
            add_pair(&mut manifest, &mut jobs, c, SplitKind::Test);
        }
    }

    fs::create_dir_all(dir.join("audio")).map_err(io_err(dir))?;
    fs::create_dir_all(dir.join("images")).map_err(io_err(dir))?;
    let familiar_specs: Vec<&ClassSpec> = familiar.iter().map(|&i| &vocab[i]).collect();
    let novel_specs: Vec<&ClassSpec> = vocab.iter().filter(|c| c.is_novel()).collect();

    let results = exec.map(&jobs, |job| -> Result<Option<(String, Vec<String>)>, SynthError> {
        match job {
            Job::Audio { class, id, seed } => {
                let w = synth_word_audio(&vocab[*class], *seed);
                w.save(&dir.join("audio").join(format!("{id}.f32")))?;
                Ok(None)
            }
            Job::Image {
                class,
                id,
                mode,
                bucket,
                seed,
                leak,
            } => {
                let spec = &vocab[*class];
                let img = if *leak {
                    let extra = novel_specs[(*seed % novel_specs.len() as u64) as usize];
                    render_scene(spec, &[extra], cfg.image_size, true, *seed)?
                } else {
                    synth_image(spec, *mode, &familiar_specs, cfg.image_size, *bucket, *seed)?
                };
                write_image_file(&dir.join("images").join(format!("{id}.img")), &img)?;
                Ok(Some((id.clone(), img.placements)))
            }
        }
    });
    let mut shapes: HashMap<String, Vec<String>> = HashMap::new();
    for r in results {
        if let Some((id, placed)) = r? {
            shapes.insert(id, placed);
        }
    }
    for item in manifest.images.iter_mut() {
        item.shapes = shapes.remove(&item.id).unwrap_or_default();
    }
    manifest.validate()?;
    let path = dir.join("manifest.json");
    fs::write(&path, manifest.to_json()).map_err(io_err(&path))?;
    let data = Dataset::featurize(dir, manifest.clone(), mel, exec)?;
    data.write_cache(mel)?;
    Ok(manifest)
}

/// A featurised spoken word.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSample {
    pub id: String,
    pub class: String,
    pub mel: MelSpectrogram,
}

/// A normalised image with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub class: String,
    /// Channel-major `3 x size x size`, ImageNet-normalised.
    pub pixels: Vec<f64>,
    pub size: usize,
    pub source_bucket: u8,
    pub is_isolated: bool,
}

/// Manifest plus in-memory features for every item.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub audio: Vec<AudioSample>,
    pub images: Vec<ImageSample>,
    audio_index: HashMap<String, usize>,
    image_index: HashMap<String, usize>,
}

impl Dataset {
    /// Loads a dataset directory, reading the feature cache when it matches
    /// `mel` and featurising from the raw files otherwise.
    pub fn load(dir: &Path, mel: &MelConfig, exec: Execution) -> Result<Self, SynthError> {
        let manifest = DatasetManifest::load(dir)?;
        manifest.validate()?;
        if let Some(ds) = Self::read_cache(dir, &manifest, mel)? {
            return Ok(ds);
        }
        Self::featurize(dir, manifest, mel, exec)
    }

    fn featurize(
        dir: &Path,
        manifest: DatasetManifest,
        mel: &MelConfig,
        exec: Execution,
    ) -> Result<Self, SynthError> {
        let audio = exec
            .map(&manifest.audio, |a| -> Result<AudioSample, SynthError> {
                let w = Waveform::load(&dir.join("audio").join(format!("{}.f32", a.id)))?;
                Ok(AudioSample {
                    id: a.id.clone(),
                    class: a.class.clone(),
                    mel: featurize_audio(&w, mel)?,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let images = exec
            .map(&manifest.images, |i| -> Result<ImageSample, SynthError> {
                let path = dir.join("images").join(format!("{}.img", i.id));
                let (h, w, raw) = read_image_file(&path)?;
                if h != w {
                    return Err(SynthError::Format {
                        path: path.display().to_string(),
                        detail: "image is not square".into(),
                    });
                }
                Ok(ImageSample {
                    id: i.id.clone(),
                    class: i.class.clone(),
                    pixels: normalize_image(&raw, h, IMAGENET_MEAN, IMAGENET_STD)?,
                    size: h,
                    source_bucket: i.source_bucket,
                    is_isolated: i.is_isolated,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::from_parts(dir, manifest, audio, images))
    }

    fn from_parts(
        dir: &Path,
        manifest: DatasetManifest,
        audio: Vec<AudioSample>,
        images: Vec<ImageSample>,
    ) -> Self {
        let audio_index = audio.iter().enumerate().map(|(k, a)| (a.id.clone(), k)).collect();
        let image_index = images.iter().enumerate().map(|(k, a)| (a.id.clone(), k)).collect();
        Self {
            dir: dir.to_path_buf(),
            manifest,
            audio,
            images,
            audio_index,
            image_index,
        }
    }

    fn write_cache(&self, mel: &MelConfig) -> Result<(), SynthError> {
        let meta = serde_json::json!({
            "mel": mel,
            "valid_frames": self.audio.iter().map(|a| a.mel.valid_frames).collect::<Vec<_>>(),
        });
        let mut c = Container::new("features", meta);
        for a in &self.audio {
            c.push(a.id.clone(), vec![a.mel.n_mels, a.mel.n_frames], a.mel.values.clone());
        }
        for i in &self.images {
            c.push(i.id.clone(), vec![3, i.size, i.size], i.pixels.clone());
        }
        let path = self.dir.join(FEATURE_CACHE);
        c.save(&path).map_err(|e| SynthError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    fn read_cache(
        dir: &Path,
        manifest: &DatasetManifest,
        mel: &MelConfig,
    ) -> Result<Option<Self>, SynthError> {
        let path = dir.join(FEATURE_CACHE);
        if !path.exists() {
            return Ok(None);
        }
        let Ok(c) = Container::load(&path) else {
            return Ok(None);
        };
        let cached_mel: Option<MelConfig> = serde_json::from_value(c.meta["mel"].clone()).ok();
        let valid: Vec<usize> = serde_json::from_value(c.meta["valid_frames"].clone()).unwrap_or_default();
        if c.kind != "features"
            || cached_mel.as_ref() != Some(mel)
            || valid.len() != manifest.audio.len()
            || c.entries.len() != manifest.audio.len() + manifest.images.len()
        {
            return Ok(None);
        }
        let mut entries = c.entries.into_iter();
        let mut audio = Vec::with_capacity(manifest.audio.len());
        for (item, &valid_frames) in manifest.audio.iter().zip(&valid) {
            let (e, values) = entries.next().expect("length checked");
            if e.name != item.id || e.shape.len() != 2 {
                return Ok(None);
            }
            audio.push(AudioSample {
                id: item.id.clone(),
                class: item.class.clone(),
                mel: MelSpectrogram {
                    values,
                    n_mels: e.shape[0],
                    n_frames: e.shape[1],
                    valid_frames,
                },
            });
        }
        let mut images = Vec::with_capacity(manifest.images.len());
        for item in &manifest.images {
            let (e, pixels) = entries.next().expect("length checked");
            if e.name != item.id || e.shape.len() != 3 {
                return Ok(None);
            }
            images.push(ImageSample {
                id: item.id.clone(),
                class: item.class.clone(),
                pixels,
                size: e.shape[1],
                source_bucket: item.source_bucket,
                is_isolated: item.is_isolated,
            });
        }
        Ok(Some(Self::from_parts(dir, manifest.clone(), audio, images)))
    }

    pub fn audio_by_id(&self, id: &str) -> Option<&AudioSample> {
        self.audio_index.get(id).map(|&k| &self.audio[k])
    }

    pub fn image_by_id(&self, id: &str) -> Option<&ImageSample> {
        self.image_index.get(id).map(|&k| &self.images[k])
    }

    pub fn audio_index(&self, id: &str) -> Option<usize> {
        self.audio_index.get(id).copied()
    }

    pub fn image_index(&self, id: &str) -> Option<usize> {
        self.image_index.get(id).copied()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.config.image_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            n_familiar: 3,
            n_novel: 2,
            train_per_class: 4,
            min_train_per_class: 2,
            dev_per_class: 1,
            test_per_class: 2,
            image_size: 32,
            seed: 5,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn builds_valid_manifest_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&small(), &MelConfig::default(), dir.path(), Execution::Sequential).unwrap();
        m.validate().unwrap();
        assert_eq!(m.train.len(), 12);
        assert_eq!(m.dev.len(), 3);
        assert_eq!(m.test.len(), 10);
        let ds = Dataset::load(dir.path(), &MelConfig::default(), Execution::Parallel).unwrap();
        assert_eq!(ds.audio.len(), 25);
        // cache and raw featurisation agree
        let fresh = Dataset::featurize(dir.path(), m, &MelConfig::default(), Execution::Sequential).unwrap();
        assert_eq!(fresh.audio, ds.audio);
        assert_eq!(fresh.images, ds.images);
    }

    #[test]
    fn rebuild_is_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        build_dataset(&small(), &MelConfig::default(), a.path(), Execution::Parallel).unwrap();
        build_dataset(&small(), &MelConfig::default(), b.path(), Execution::Sequential).unwrap();
        for rel in ["manifest.json", "features.bin", "audio/a000003.f32", "images/i000007.img"] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
        }
    }

    #[test]
    fn no_novel_classes_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_novel: 0,
            ..small()
        };
        assert!(build_dataset(&cfg, &MelConfig::default(), dir.path(), Execution::Sequential).is_err());
    }

    #[test]
    fn validator_catches_split_overlap() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_dataset(&small(), &MelConfig::default(), dir.path(), Execution::Sequential).unwrap();
        let leaked = m.train[0].clone();
        m.dev.push(leaked);
        assert!(m.validate().is_err());
    }
}
