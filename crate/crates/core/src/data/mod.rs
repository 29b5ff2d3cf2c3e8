//! Procedural classification data with exact per-concept ground truth.
//!
//! Every sample is a glyph creature whose class is a unique tuple of part
//! styles. Part instances and masks are captured while rendering, and the
//! `shape` concept is the Laplacian contour of the clean creature.

mod image;
mod io;
mod render;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use image::{derive_shape_instance, fill_masked, Image, Mask};
pub use io::{encode_pbm, encode_ppm, load_dataset, save_dataset};
pub use render::PART_STYLES;

/// Version written to and required from `manifest.json`.
pub const FORMAT_VERSION: u32 = 1;

/// Base colour of every background; also the fill used to remove a concept.
pub const BACKGROUND: [u8; 3] = [64, 64, 64];

/// Background clutter: low-contrast grey dots, drawn before the creature.
const CLUTTER_DOTS: usize = 10;
const CLUTTER_LEVELS: std::ops::Range<u8> = 40..100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: missing file for concept `{concept}`")]
    MissingConceptFile { path: PathBuf, concept: String },
    #[error("{path}: missing file")]
    MissingFile { path: PathBuf },
    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConceptKind {
    Part,
    ShapeDerived,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSpec {
    pub name: String,
    pub kind: ConceptKind,
    #[serde(default)]
    pub styles: Vec<String>,
}

impl ConceptSpec {
    pub fn part(name: &str, styles: &[&str]) -> Self {
        ConceptSpec {
            name: name.into(),
            kind: ConceptKind::Part,
            styles: styles.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn shape(name: &str) -> Self {
        ConceptSpec {
            name: name.into(),
            kind: ConceptKind::ShapeDerived,
            styles: Vec::new(),
        }
    }

    pub fn is_part(&self) -> bool {
        self.kind == ConceptKind::Part
    }
}

/// A class is one style per part concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDef {
    pub name: String,
    pub parts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: Vec<ClassDef>,
    pub concepts: Vec<ConceptSpec>,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Probability that each part is independently left out of a sample.
    pub dropout: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let class = |name: &str, head: &str, torso: &str, leg: &str| ClassDef {
            name: name.into(),
            parts: [("head", head), ("torso", torso), ("leg", leg)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        };
        DatasetConfig {
            classes: vec![
                class("cat", "round", "oval", "quad"),
                class("dog", "square", "oval", "straight"),
                class("cow", "square", "box", "quad"),
                class("horse", "triangle", "box", "splayed"),
            ],
            concepts: vec![
                ConceptSpec::part("head", &["round", "square", "triangle"]),
                ConceptSpec::part("torso", &["oval", "box", "diamond"]),
                ConceptSpec::part("leg", &["straight", "quad", "splayed"]),
                ConceptSpec::shape("shape"),
            ],
            image_size: 64,
            n_train: 400,
            n_test: 200,
            dropout: 0.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.classes.len() < 2 {
            return err(format!("need at least 2 classes, got {}", self.classes.len()));
        }
        if self.image_size < 32 {
            return err(format!("image_size must be at least 32, got {}", self.image_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let mut names = HashSet::new();
        for c in &self.concepts {
            if !names.insert(c.name.as_str()) {
                return err(format!("duplicate concept `{}`", c.name));
            }
            match c.kind {
                ConceptKind::ShapeDerived if !c.styles.is_empty() => {
                    return err(format!("shape-derived concept `{}` cannot carry styles", c.name))
                }
                ConceptKind::Part => {
                    let Some(known) = render::known_styles(&c.name) else {
                        return err(format!(
                            "unknown part `{}` (renderable parts: head, torso, leg)",
                            c.name
                        ));
                    };
                    if c.styles.is_empty() {
                        return err(format!("part `{}` has an empty style vocabulary", c.name));
                    }
                    if let Some(s) = c.styles.iter().find(|s| !known.contains(&s.as_str())) {
                        return err(format!("part `{}` has no renderable style `{s}`", c.name));
                    }
                }
                _ => {}
            }
        }
        let parts: Vec<&ConceptSpec> = self.concepts.iter().filter(|c| c.is_part()).collect();
        if parts.is_empty() {
            return err("concept list needs at least one part concept".into());
        }
        let mut tuples = HashSet::new();
        for class in &self.classes {
            for key in class.parts.keys() {
                if !parts.iter().any(|p| &p.name == key) {
                    return err(format!("class `{}` names unknown part `{key}`", class.name));
                }
            }
            let mut tuple = Vec::new();
            for p in &parts {
                let style = class.parts.get(&p.name).ok_or_else(|| {
                    DataError::Config(format!("class `{}` has no style for part `{}`", class.name, p.name))
                })?;
                if !p.styles.contains(style) {
                    return err(format!(
                        "class `{}` uses style `{style}` outside the `{}` vocabulary",
                        class.name, p.name
                    ));
                }
                tuple.push(style.clone());
            }
            if !tuples.insert(tuple) {
                return err(format!("class `{}` duplicates another class's style tuple", class.name));
            }
        }
        for (split, n) in [("n_train", self.n_train), ("n_test", self.n_test)] {
            if n == 0 || n % self.classes.len() != 0 {
                return err(format!(
                    "{split} = {n} must be a positive multiple of the class count {}",
                    self.classes.len()
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub background: [u8; 3],
    pub config: DatasetConfig,
}

impl DatasetManifest {
    pub fn concept_names(&self) -> Vec<String> {
        self.config.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.config.classes.iter().map(|c| c.name.clone()).collect()
    }
}

/// One example. `instances` and `masks` follow the manifest's concept order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSample {
    pub image: Image,
    pub label: usize,
    pub instances: Vec<Image>,
    pub masks: Vec<Mask>,
}

impl ConceptSample {
    pub fn present(&self, concept: usize) -> bool {
        self.masks[concept].any()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<ConceptSample>,
    pub test: Vec<ConceptSample>,
}

impl Dataset {
    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.manifest.config.concepts.iter().position(|c| c.name == name)
    }
}

/// SplitMix64 finaliser; derives independent per-sample seeds.
pub fn mix_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn background_fill() -> [f32; 3] {
    BACKGROUND.map(image::byte_to_unit)
}

/// Replace the masked region with the dataset background colour.
pub fn remove_concept(image: &Image, mask: &Mask) -> Result<Image, DataError> {
    fill_masked(image, mask, background_fill())
}

pub fn generate_dataset(seed: u64, config: &DatasetConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let gen_split = |tag: u64, n: usize| -> Vec<ConceptSample> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, (tag << 32) | i as u64));
                render_sample(config, i % config.classes.len(), &mut rng)
            })
            .collect()
    };
    Ok(Dataset {
        manifest: DatasetManifest {
            format_version: FORMAT_VERSION,
            seed,
            background: BACKGROUND,
            config: config.clone(),
        },
        train: gen_split(1, config.n_train),
        test: gen_split(2, config.n_test),
    })
}

fn render_sample(config: &DatasetConfig, label: usize, rng: &mut ChaCha8Rng) -> ConceptSample {
    let size = config.image_size;
    let class = &config.classes[label];
    let mut drawn = Vec::new();
    for (ci, c) in config.concepts.iter().enumerate() {
        if !c.is_part() {
            continue;
        }
        let keep = config.dropout == 0.0 || !rng.gen_bool(config.dropout);
        if keep {
            drawn.push((ci, c.name.as_str(), class.parts[&c.name].as_str()));
        }
    }

    let mut image = Image::filled(size, size, BACKGROUND);
    for _ in 0..CLUTTER_DOTS {
        let v = rng.gen_range(CLUTTER_LEVELS);
        let color = [v, v, v];
        let (x0, y0) = (rng.gen_range(0..size - 1), rng.gen_range(0..size - 1));
        for (x, y) in [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)] {
            image.set_pixel(x, y, color.map(image::byte_to_unit));
        }
    }

    let (shapes, owner) = if drawn.is_empty() {
        (Vec::new(), vec![None; size * size])
    } else {
        render::layout(rng, size, &drawn)
    };

    let k = config.concepts.len();
    let mut instances = vec![Image::new(size, size); k];
    let mut masks = vec![Mask::empty(size, size); k];
    let mut clean = Image::new(size, size);
    for (p, o) in owner.iter().enumerate() {
        if let Some(idx) = *o {
            let shape = &shapes[idx];
            let rgb = shape.color.map(image::byte_to_unit);
            let (x, y) = (p % size, p / size);
            image.set_pixel(x, y, rgb);
            clean.set_pixel(x, y, rgb);
            instances[shape.concept].set_pixel(x, y, rgb);
            masks[shape.concept].bits[p] = true;
        }
    }
    for (ci, c) in config.concepts.iter().enumerate() {
        if c.kind == ConceptKind::ShapeDerived {
            let contour = derive_shape_instance(&clean).quantized();
            masks[ci] = Mask {
                width: size,
                height: size,
                bits: contour.data.chunks(3).map(|px| px[0] > 0.0).collect(),
            };
            instances[ci] = contour;
        }
    }
    ConceptSample {
        image,
        label,
        instances,
        masks,
    }
}
