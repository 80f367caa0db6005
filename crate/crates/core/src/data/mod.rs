//! Synthetic referring-expression data: scene generation, preprocessing and
//! the on-disk dataset format.

mod io;
mod preprocess;
pub mod scene;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

pub use io::{load_dataset, read_ppm, save_dataset, write_ppm, CAPTIONS_FILE, MANIFEST_FILE};
pub use preprocess::{preprocess_image, Letterbox};
pub use scene::{Expression, SceneObject, SceneSpec, Shape, Size};
pub use vocab::Vocab;

use crate::error::{Error, Result};
use crate::kv::{parse_value, KvConfig};
use crate::model::BoundingBox;
use crate::numcore::Tensor;
use crate::rng::{stream_rng, Stream};

/// Attempts allowed per sample before a scene is abandoned.
pub const ATTEMPTS_PER_SAMPLE: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    /// 90/10 split keyed on a hash of the sample id.
    pub fn of(id: u64) -> Self {
        if splitmix64(id).is_multiple_of(10) {
            Split::Val
        } else {
            Split::Train
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Data(format!("unknown split tag {other:?}"))),
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f64>,
    pub expression: String,
    pub gt_box: BoundingBox<f64>,
    pub split: Split,
    /// Whole-scene description used for teacher pretraining.
    pub caption: String,
    /// Present for freshly generated samples, absent after loading.
    pub scene: Option<SceneSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrammarConfig {
    pub image_size: usize,
    pub min_distractors: usize,
    pub max_distractors: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_distractors: 1,
            max_distractors: 4,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < scene::GRID {
            return Err(Error::Config(format!(
                "image_size {} is smaller than the {}x{} grid",
                self.image_size,
                scene::GRID,
                scene::GRID
            )));
        }
        if self.min_distractors > self.max_distractors || self.max_distractors + 1 > scene::GRID * scene::GRID {
            return Err(Error::Config(format!(
                "distractor range {}..={} does not fit the grid",
                self.min_distractors, self.max_distractors
            )));
        }
        Ok(())
    }
}

impl KvConfig for GrammarConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "image_size" => self.image_size = parse_value(key, value)?,
            "min_distractors" => self.min_distractors = parse_value(key, value)?,
            "max_distractors" => self.max_distractors = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(String, String)> {
        vec![
            ("image_size".into(), self.image_size.to_string()),
            ("min_distractors".into(), self.min_distractors.to_string()),
            ("max_distractors".into(), self.max_distractors.to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Canonical manifest text, one line per sample.
    pub fn manifest(&self) -> String {
        self.samples.iter().map(io::manifest_line).collect()
    }
}

/// Rounds to the manifest's 6-decimal fixed point so generated and loaded
/// boxes are identical.
fn fixed6(v: f64) -> f64 {
    format!("{v:.6}").parse().expect("formatted float parses")
}

/// Generates `n` samples; a pure function of `(n, seed, cfg)`.
pub fn generate_dataset(n: usize, seed: u64, cfg: &GrammarConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Parameter("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let mut rng = stream_rng(seed, Stream::Generation, 0);
    let budget = ATTEMPTS_PER_SAMPLE * n;
    let mut attempts = 0;
    let mut samples = Vec::with_capacity(n);
    while samples.len() < n {
        let mut produced = None;
        for _ in 0..ATTEMPTS_PER_SAMPLE {
            if attempts == budget {
                break;
            }
            attempts += 1;
            let spec = scene::sample_scene(&mut rng, cfg.min_distractors, cfg.max_distractors);
            let options = Expression::unique_candidates(&spec);
            if options.is_empty() {
                continue;
            }
            let expr = options[rand::Rng::gen_range(&mut rng, 0..options.len())];
            produced = Some((spec, expr));
            break;
        }
        let Some((spec, expr)) = produced else {
            if attempts >= budget {
                return Err(Error::Data(format!(
                    "only {} of {n} samples had a unique referent after {budget} attempts",
                    samples.len()
                )));
            }
            continue;
        };
        let id = samples.len() as u64;
        let s = cfg.image_size;
        let b = spec.target_object().bounding_box(s);
        let gt_box = BoundingBox::new(fixed6(b.x), fixed6(b.y), fixed6(b.w), fixed6(b.h));
        samples.push(Sample {
            id,
            image: Tensor::new(vec![3, s, s], scene::render(&spec.objects, s))?,
            expression: expr.text(),
            gt_box,
            split: Split::of(id),
            caption: spec.caption(),
            scene: Some(spec),
        });
    }
    Ok(Dataset { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_roughly_ninety_ten() {
        let val = (0..10_000u64).filter(|&i| Split::of(i) == Split::Val).count();
        assert!((900..1100).contains(&val), "{val}");
    }

    #[test]
    fn small_dataset_is_valid() {
        let ds = generate_dataset(20, 3, &GrammarConfig::default()).unwrap();
        let vocab = Vocab::standard();
        for s in &ds.samples {
            assert!(s.gt_box.is_inside_image());
            let ids = vocab.tokenize(&s.expression, 20);
            assert!(ids.iter().all(|&i| i != vocab::UNK_ID));
            assert!(!s.expression.is_empty());
            assert!(vocab.tokenize(&s.caption, 20).iter().all(|&i| i != vocab::UNK_ID));
        }
    }

    #[test]
    fn rejects_empty_request() {
        assert!(matches!(
            generate_dataset(0, 1, &GrammarConfig::default()),
            Err(Error::Parameter(_))
        ));
    }
}
