//! Expert pool description and the synthetic feature generators that stand
//! in for frozen vision encoders.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MovaError, Result};
use crate::numerics::{FeatureMap, Tensor};
use crate::seed;

const BASE_STREAM: u64 = 0xB45E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    fn is_valid(&self) -> bool {
        self.channels >= 1 && self.height >= 1 && self.width >= 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub letter: char,
    pub name: String,
    pub description: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl ExpertSpec {
    pub fn geometry(&self) -> Geometry {
        Geometry::new(self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertRegistry {
    pub base: Geometry,
    pub experts: Vec<ExpertSpec>,
}

/// Expert pool used throughout the desk-scale configuration.
const DEFAULT_POOL: [(&str, &str); 7] = [
    (
        "dinov2",
        "Self-supervised visual features; strong at visual grounding and locating objects.",
    ),
    (
        "codetr",
        "Object detector; strong at finding, counting and boxing objects.",
    ),
    (
        "sam",
        "Segmentation model; strong at object masks and region boundaries.",
    ),
    (
        "pix2struct",
        "Screenshot parser; strong at reading text in natural and document images.",
    ),
    (
        "deplot",
        "Plot-to-table translator; strong at reading chart values and trends.",
    ),
    (
        "vary",
        "Dense document reader; strong at parsing documents, tables and charts.",
    ),
    (
        "biomedclip",
        "Biomedical image-text model; strong at medical imagery such as scans and slides.",
    ),
];

impl ExpertRegistry {
    /// Build a registry, assigning letters from `A` in order, and validate it.
    pub fn from_entries(base: Geometry, entries: Vec<(String, String, Geometry, u64)>) -> Result<Self> {
        let experts = entries
            .into_iter()
            .enumerate()
            .map(|(i, (name, description, g, seed))| ExpertSpec {
                letter: letter_for(i),
                name,
                description,
                channels: g.channels,
                height: g.height,
                width: g.width,
                seed,
            })
            .collect();
        let reg = Self { base, experts };
        reg.validate()?;
        Ok(reg)
    }

    /// Seven experts with 16×4×4 features over an 8×8×8 base.
    pub fn desk_default() -> Self {
        Self::with_geometry(Geometry::new(8, 8, 8), Geometry::new(16, 4, 4))
    }

    /// The default pool with caller-chosen base and expert geometry.
    pub fn with_geometry(base: Geometry, expert: Geometry) -> Self {
        let entries = DEFAULT_POOL
            .iter()
            .enumerate()
            .map(|(i, (n, d))| (n.to_string(), d.to_string(), expert, 1000 + i as u64))
            .collect();
        Self::from_entries(base, entries).expect("default pool is valid")
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.experts.iter().position(|e| e.name == name)
    }

    pub fn index_of_letter(&self, letter: char) -> Option<usize> {
        let i = (letter as u32).checked_sub('A' as u32)? as usize;
        (i < self.len()).then_some(i)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base.is_valid() {
            return Err(MovaError::Validation(format!(
                "base geometry {:?} has a zero extent",
                self.base
            )));
        }
        if self.experts.is_empty() {
            return Err(MovaError::Validation("expert list is empty".into()));
        }
        if self.experts.len() > 26 {
            return Err(MovaError::Validation(format!(
                "{} experts exceed the 26-letter limit",
                self.experts.len()
            )));
        }
        let mut names = HashSet::new();
        for (i, e) in self.experts.iter().enumerate() {
            let label = if e.name.is_empty() {
                format!("#{i}")
            } else {
                format!("`{}`", e.name)
            };
            if e.letter != letter_for(i) {
                return Err(MovaError::Validation(format!(
                    "expert {label} has letter {} but position {i} requires {}",
                    e.letter,
                    letter_for(i)
                )));
            }
            if e.name.is_empty() {
                return Err(MovaError::Validation(format!("expert {label} has an empty name")));
            }
            if e.description.trim().is_empty() {
                return Err(MovaError::Validation(format!(
                    "expert {label} has an empty description"
                )));
            }
            if !e.geometry().is_valid() {
                return Err(MovaError::Validation(format!(
                    "expert {label} has a zero extent in {:?}",
                    e.geometry()
                )));
            }
            if !names.insert(e.name.as_str()) {
                return Err(MovaError::Validation(format!("expert {label} is duplicated")));
            }
        }
        Ok(())
    }
}

pub fn letter_for(index: usize) -> char {
    char::from(b'A' + index as u8)
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<ExpertRegistry> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MovaError::io(path, e))?;
    let reg: ExpertRegistry =
        serde_json::from_str(&text).map_err(|e| MovaError::json(path.display().to_string(), e))?;
    reg.validate()?;
    Ok(reg)
}

pub fn save_registry(registry: &ExpertRegistry, path: impl AsRef<Path>) -> Result<()> {
    registry.validate()?;
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(registry)
        .map_err(|e| MovaError::json("serializing registry", e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| MovaError::io(path, e))
}

/// One multimodal training example. The image is represented by the seed of
/// its synthetic features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub image_seed: u64,
    pub question: String,
    pub answer_vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_expert: Option<String>,
}

/// Standard-normal map of the registry's base geometry.
pub fn generate_base_feature(registry: &ExpertRegistry, image_seed: u64) -> FeatureMap {
    let g = registry.base;
    let mut rng = seed::rng(&[BASE_STREAM, image_seed]);
    let t = Tensor::randn(&[g.channels, g.height, g.width], 1.0, &mut rng);
    FeatureMap::from_tensor(t).expect("rank 3")
}

/// Seeded noise map for one expert. When `planted`, the spatial mean of the
/// first `answer_vector.len()` channels is set to the answer vector.
pub fn generate_expert_feature(
    spec: &ExpertSpec,
    image_seed: u64,
    planted: bool,
    answer_vector: &[f64],
) -> Result<FeatureMap> {
    if planted && answer_vector.len() > spec.channels {
        return Err(MovaError::Capacity {
            expert: spec.name.clone(),
            len: answer_vector.len(),
            channels: spec.channels,
        });
    }
    let mut rng = seed::rng(&[spec.seed, image_seed]);
    let t = Tensor::randn(&[spec.channels, spec.height, spec.width], 1.0, &mut rng);
    let mut f = FeatureMap::from_tensor(t).expect("rank 3");
    if planted {
        let n = f.positions() as f64;
        for (c, &target) in answer_vector.iter().enumerate() {
            let ch = f.channel_mut(c);
            let mean = ch.iter().fold(0.0, |a, v| a + v) / n;
            for v in ch.iter_mut() {
                *v += target - mean;
            }
        }
    }
    Ok(f)
}
