use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Familiar,
    Novel,
}

/// One vowel-like segment: three formant frequencies and a base duration
/// range in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhonemeUnit {
    pub formants: [f64; 3],
    pub duration: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
    Ring,
    Star,
    Hexagon,
    Pentagon,
    Ellipse,
    Crescent,
    Arrow,
    Trapezoid,
    Semicircle,
    Chevron,
    Bar,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 16] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Diamond,
        ShapeFamily::Cross,
        ShapeFamily::Ring,
        ShapeFamily::Star,
        ShapeFamily::Hexagon,
        ShapeFamily::Pentagon,
        ShapeFamily::Ellipse,
        ShapeFamily::Crescent,
        ShapeFamily::Arrow,
        ShapeFamily::Trapezoid,
        ShapeFamily::Semicircle,
        ShapeFamily::Chevron,
        ShapeFamily::Bar,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualRecipe {
    pub shape: ShapeFamily,
    /// Hue in `[0, 1)`.
    pub hue: f64,
    /// Stripe cycles across the shape diameter; zero means solid.
    pub texture_freq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub audio: Vec<PhonemeUnit>,
    pub visual: VisualRecipe,
    pub split: Split,
}

impl ClassSpec {
    pub fn is_novel(&self) -> bool {
        self.split == Split::Novel
    }
}

const TEXTURES: [f64; 3] = [0.0, 1.5, 3.0];

fn random_unit(rng: &mut ChaCha8Rng) -> PhonemeUnit {
    let base = rng.random_range(0.12..0.22);
    PhonemeUnit {
        formants: [
            rng.random_range(250.0..900.0),
            rng.random_range(900.0..2500.0),
            rng.random_range(2500.0..3800.0),
        ],
        duration: (base * 0.9, base * 1.1),
    }
}

/// Builds `n_familiar + n_novel` classes. For each of `onset_overlap_pairs`
/// distinct (familiar, novel) pairs, the novel word starts with exactly the
/// familiar word's first unit.
pub fn generate_vocabulary(
    n_familiar: usize,
    n_novel: usize,
    onset_overlap_pairs: usize,
    seed: u64,
) -> Result<Vec<ClassSpec>, SynthError> {
    if n_familiar < 2 {
        return Err(SynthError::TooFewClasses {
            what: "familiar",
            min: 2,
            got: n_familiar,
        });
    }
    if n_novel < 2 {
        return Err(SynthError::TooFewClasses {
            what: "novel",
            min: 2,
            got: n_novel,
        });
    }
    let available = n_familiar.min(n_novel);
    if onset_overlap_pairs > available {
        return Err(SynthError::TooManyOverlaps {
            pairs: onset_overlap_pairs,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_familiar + n_novel;

    // Familiar and novel classes occupy separate visual regions: distinct
    // shape families while they last, and two disjoint hue arcs. Novel
    // objects should look unlike anything seen in training, not like a
    // recoloured familiar object.
    let mut families = ShapeFamily::ALL.to_vec();
    families.shuffle(&mut rng);
    let shapes: Vec<ShapeFamily> = (0..total).map(|i| families[i % families.len()]).collect();
    let hue0: f64 = rng.random();
    let arc = |count: usize, start: f64| -> Vec<f64> {
        (0..count)
            .map(|i| (hue0 + start + 0.5 * (i as f64 + 0.5) / count as f64).fract())
            .collect()
    };
    let mut fam_hues = arc(n_familiar, 0.0);
    let mut nov_hues = arc(n_novel, 0.5);
    fam_hues.shuffle(&mut rng);
    nov_hues.shuffle(&mut rng);
    let hues: Vec<f64> = fam_hues.into_iter().chain(nov_hues).collect();

    let mut classes = Vec::with_capacity(total);
    for i in 0..total {
        let split = if i < n_familiar {
            Split::Familiar
        } else {
            Split::Novel
        };
        let n_units = rng.random_range(2..=4);
        let audio = (0..n_units).map(|_| random_unit(&mut rng)).collect();
        let visual = VisualRecipe {
            shape: shapes[i],
            hue: hues[i],
            texture_freq: TEXTURES[rng.random_range(0..TEXTURES.len())],
        };
        let name = match split {
            Split::Familiar => format!("fam{i:02}"),
            Split::Novel => format!("nov{:02}", i - n_familiar),
        };
        classes.push(ClassSpec {
            name,
            audio,
            visual,
            split,
        });
    }

    let mut fam: Vec<usize> = (0..n_familiar).collect();
    let mut nov: Vec<usize> = (n_familiar..total).collect();
    fam.shuffle(&mut rng);
    nov.shuffle(&mut rng);
    for (&f, &n) in fam.iter().zip(&nov).take(onset_overlap_pairs) {
        let onset = classes[f].audio[0];
        classes[n].audio[0] = onset;
    }
    Ok(classes)
}
