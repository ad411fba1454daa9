//! Offline routing-annotation construction from per-model losses, and the
//! synthetic planted-signal corpus that gives it a ground truth.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{MovaError, Result};
use crate::experts::{generate_base_feature, generate_expert_feature, ExpertRegistry, Sample};
use crate::numerics::global_avg_pool;
use crate::seed;

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const LOSSES_FILE: &str = "losses.jsonl";
pub const TRUTH_FILE: &str = "ground_truth.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub sample_id: String,
    pub base_loss: f64,
    pub expert_losses: Vec<f64>,
}

impl LossRecord {
    pub fn validate(&self, pool_size: usize) -> Result<()> {
        if self.expert_losses.len() != pool_size {
            return Err(MovaError::Validation(format!(
                "sample `{}` has {} expert losses, pool has {pool_size}",
                self.sample_id,
                self.expert_losses.len()
            )));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.base_loss) || !self.expert_losses.iter().all(|&v| ok(v)) {
            return Err(MovaError::Validation(format!(
                "sample `{}` has a negative or non-finite loss",
                self.sample_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingAnnotation {
    pub sample_id: String,
    pub experts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub sample_id: String,
    pub planted: String,
}

/// Indices of the experts that strictly beat the base loss, lowest loss
/// first (ties by index), truncated to `cap`.
pub fn select_useful_experts(record: &LossRecord, cap: usize) -> Vec<usize> {
    let mut useful: Vec<usize> = (0..record.expert_losses.len())
        .filter(|&j| record.expert_losses[j] < record.base_loss)
        .collect();
    useful.sort_by(|&a, &b| {
        record.expert_losses[a]
            .total_cmp(&record.expert_losses[b])
            .then(a.cmp(&b))
    });
    useful.truncate(cap);
    useful
}

pub fn construct_routing_set(
    record: &LossRecord,
    registry: &ExpertRegistry,
    cap: usize,
) -> Result<RoutingAnnotation> {
    if cap == 0 {
        return Err(MovaError::Validation("routing cap must be at least 1".into()));
    }
    record.validate(registry.len())?;
    let experts = select_useful_experts(record, cap)
        .into_iter()
        .map(|j| registry.experts[j].name.clone())
        .collect();
    Ok(RoutingAnnotation {
        sample_id: record.sample_id.clone(),
        experts,
    })
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MovaError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| MovaError::json(format!("{} line {}", path.display(), i + 1), e))
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| MovaError::json("serializing", e))?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| MovaError::io(path, e))?;
    f.write_all(&buf).map_err(|e| MovaError::io(path, e))
}

/// Read a loss file, checking record lengths and id uniqueness; errors
/// name the offending line.
pub fn read_losses(path: impl AsRef<Path>, registry: &ExpertRegistry) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let records: Vec<LossRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        r.validate(registry.len())
            .map_err(|e| MovaError::Validation(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if !seen.insert(r.sample_id.as_str()) {
            return Err(MovaError::Validation(format!(
                "{} line {}: duplicate sample id `{}`",
                path.display(),
                i + 1,
                r.sample_id
            )));
        }
    }
    Ok(records)
}

pub fn build_annotations(
    losses_path: impl AsRef<Path>,
    registry: &ExpertRegistry,
    cap: usize,
    out_path: impl AsRef<Path>,
) -> Result<usize> {
    let records = read_losses(losses_path, registry)?;
    let annotations = records
        .iter()
        .map(|r| construct_routing_set(r, registry, cap))
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(out_path, &annotations)?;
    Ok(annotations.len())
}

pub fn score_routing_accuracy(
    annotations: &[RoutingAnnotation],
    ground_truth: &[GroundTruth],
) -> Result<f64> {
    let by_id: HashMap<&str, &RoutingAnnotation> = annotations
        .iter()
        .map(|a| (a.sample_id.as_str(), a))
        .collect();
    if by_id.len() != annotations.len() || annotations.len() != ground_truth.len() {
        return Err(MovaError::Validation(format!(
            "{} annotations do not pair with {} ground-truth rows",
            annotations.len(),
            ground_truth.len()
        )));
    }
    if ground_truth.is_empty() {
        return Err(MovaError::Validation("no samples to score".into()));
    }
    let mut hits = 0usize;
    for gt in ground_truth {
        let ann = by_id.get(gt.sample_id.as_str()).ok_or_else(|| {
            MovaError::Validation(format!("sample `{}` has no annotation", gt.sample_id))
        })?;
        if ann.experts.contains(&gt.planted) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ground_truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub seed: u64,
    /// Scale of the absolute Gaussian noise added to every loss.
    pub noise: f64,
    pub answer_dim: usize,
    /// Plant every sample in this expert instead of a random one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<String>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_samples: 200,
            seed: 42,
            noise: 0.0,
            answer_dim: 4,
            plant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub config: SyntheticConfig,
    pub samples: String,
    pub losses: String,
    pub ground_truth: String,
}

/// A loaded synthetic corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub losses: Vec<LossRecord>,
    pub truth: Vec<GroundTruth>,
}

const QUESTION_BANK: [[&str; 3]; 7] = [
    [
        "Where is the red sign located?",
        "Which object is closest to the camera?",
        "Point to the person on the left.",
    ],
    [
        "How many cars are in the picture?",
        "Detect every bicycle in the image.",
        "Count the people standing near the door.",
    ],
    [
        "Outline the boundary of the dog.",
        "Segment the road from the sidewalk.",
        "Which region belongs to the sky?",
    ],
    [
        "What does the text on the sign say?",
        "Read the title printed on the page.",
        "What is written on the screen?",
    ],
    [
        "What is the highest value in the chart?",
        "Read the chart values for the last year.",
        "Which bar in the plot is tallest?",
    ],
    [
        "Parse the table in this document.",
        "Summarize the scanned document page.",
        "Extract the rows of the invoice table.",
    ],
    [
        "Is there a lesion in this scan?",
        "What tissue type does this slide show?",
        "Describe the abnormality in the x-ray.",
    ],
];

const SAMPLE_STREAM: u64 = 0x5A;
const NOISE_STREAM: u64 = 0x401;
const CALIBRATION_STREAM: u64 = 0xCA1;

/// Least-squares affine probe from pooled features to answer vectors.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// (features + 1) × answer_dim, bias in the last row.
    weights: DMatrix<f64>,
}

impl LinearProbe {
    pub fn fit(features: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Self> {
        let rows = features.len();
        let (fdim, adim) = (features[0].len(), targets[0].len());
        let x = DMatrix::from_fn(rows, fdim + 1, |r, c| {
            if c < fdim {
                features[r][c]
            } else {
                1.0
            }
        });
        let y = DMatrix::from_fn(rows, adim, |r, c| targets[r][c]);
        let weights = x
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| MovaError::Validation(format!("probe fit failed: {e}")))?;
        Ok(Self { weights })
    }

    /// Mean squared residual of the probe on one example.
    pub fn residual(&self, features: &[f64], target: &[f64]) -> f64 {
        let fdim = features.len();
        let mut total = 0.0;
        for (k, &t) in target.iter().enumerate() {
            let mut pred = self.weights[(fdim, k)];
            for (i, &f) in features.iter().enumerate() {
                pred += f * self.weights[(i, k)];
            }
            total += (pred - t) * (pred - t);
        }
        total / target.len() as f64
    }
}

fn random_answer<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Fit the probe that scores one model: `None` is the base encoder, `Some(j)`
/// an expert calibrated on images where it carries the answer.
fn calibrate_probe(
    registry: &ExpertRegistry,
    model: Option<usize>,
    config: &SyntheticConfig,
) -> Result<LinearProbe> {
    let channels = match model {
        None => registry.base.channels,
        Some(j) => registry.experts[j].channels,
    };
    let count = (4 * (channels + 1)).max(64);
    let tag = model.map_or(0, |j| j as u64 + 1);
    let mut rng = seed::rng(&[config.seed, CALIBRATION_STREAM, tag]);
    let mut feats = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for _ in 0..count {
        let image_seed: u64 = rng.random();
        let answer = random_answer(&mut rng, config.answer_dim);
        let pooled = match model {
            None => global_avg_pool(&generate_base_feature(registry, image_seed)),
            Some(j) => global_avg_pool(&generate_expert_feature(
                &registry.experts[j],
                image_seed,
                true,
                &answer,
            )?),
        };
        feats.push(pooled);
        targets.push(answer);
    }
    LinearProbe::fit(&feats, &targets)
}

/// Build samples, losses and ground truth in memory.
pub fn synthesize_corpus(registry: &ExpertRegistry, config: &SyntheticConfig) -> Result<Corpus> {
    registry.validate()?;
    if config.num_samples == 0 {
        return Err(MovaError::Validation("corpus needs at least one sample".into()));
    }
    if config.answer_dim == 0 {
        return Err(MovaError::Validation("answer dimension must be positive".into()));
    }
    if !(config.noise >= 0.0 && config.noise.is_finite()) {
        return Err(MovaError::Validation(format!("noise scale {} is invalid", config.noise)));
    }
    let forced = match &config.plant {
        Some(name) => Some(
            registry
                .index_of(name)
                .ok_or_else(|| MovaError::UnknownExpertName(name.clone()))?,
        ),
        None => None,
    };
    let base_probe = calibrate_probe(registry, None, config)?;
    let expert_probes = (0..registry.len())
        .map(|j| calibrate_probe(registry, Some(j), config))
        .collect::<Result<Vec<_>>>()?;

    let width = config.num_samples.to_string().len().max(4);
    let mut corpus = Corpus {
        samples: Vec::with_capacity(config.num_samples),
        losses: Vec::with_capacity(config.num_samples),
        truth: Vec::with_capacity(config.num_samples),
    };
    for i in 0..config.num_samples {
        let mut rng = seed::rng(&[config.seed, SAMPLE_STREAM, i as u64]);
        let planted = match forced {
            Some(j) => j,
            None => rng.random_range(0..registry.len()),
        };
        let image_seed: u64 = rng.random();
        let answer = random_answer(&mut rng, config.answer_dim);
        let bank = &QUESTION_BANK[planted % QUESTION_BANK.len()];
        let question = bank[rng.random_range(0..bank.len())].to_string();
        let sample_id = format!("s{i:0width$}");

        let mut noise_rng = seed::rng(&[config.seed, NOISE_STREAM, i as u64]);
        let mut noisy = |loss: f64| {
            let z: f64 = noise_rng.sample(StandardNormal);
            loss + config.noise * z.abs()
        };
        let base_pooled = global_avg_pool(&generate_base_feature(registry, image_seed));
        let base_loss = noisy(base_probe.residual(&base_pooled, &answer));
        let mut expert_losses = Vec::with_capacity(registry.len());
        for (j, spec) in registry.experts.iter().enumerate() {
            let f = generate_expert_feature(spec, image_seed, j == planted, &answer)?;
            expert_losses.push(noisy(expert_probes[j].residual(&global_avg_pool(&f), &answer)));
        }

        let planted_name = registry.experts[planted].name.clone();
        corpus.losses.push(LossRecord {
            sample_id: sample_id.clone(),
            base_loss,
            expert_losses,
        });
        corpus.truth.push(GroundTruth {
            sample_id: sample_id.clone(),
            planted: planted_name.clone(),
        });
        corpus.samples.push(Sample {
            sample_id,
            image_seed,
            question,
            answer_vector: answer,
            planted_expert: Some(planted_name),
        });
    }
    Ok(corpus)
}

pub fn generate_synthetic_corpus(
    registry: &ExpertRegistry,
    config: &SyntheticConfig,
    out_dir: impl AsRef<Path>,
) -> Result<CorpusManifest> {
    let out_dir = out_dir.as_ref();
    let corpus = synthesize_corpus(registry, config)?;
    fs::create_dir_all(out_dir).map_err(|e| MovaError::io(out_dir, e))?;
    write_jsonl(out_dir.join(SAMPLES_FILE), &corpus.samples)?;
    write_jsonl(out_dir.join(LOSSES_FILE), &corpus.losses)?;
    write_jsonl(out_dir.join(TRUTH_FILE), &corpus.truth)?;
    let manifest = CorpusManifest {
        config: config.clone(),
        samples: SAMPLES_FILE.into(),
        losses: LOSSES_FILE.into(),
        ground_truth: TRUTH_FILE.into(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| MovaError::json("serializing manifest", e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| MovaError::io(&path, e))?;
    Ok(manifest)
}

pub fn load_corpus(dir: impl AsRef<Path>, registry: &ExpertRegistry) -> Result<Corpus> {
    let dir: PathBuf = dir.as_ref().to_path_buf();
    let samples: Vec<Sample> = read_jsonl(dir.join(SAMPLES_FILE))?;
    let losses = read_losses(dir.join(LOSSES_FILE), registry)?;
    let truth: Vec<GroundTruth> = read_jsonl(dir.join(TRUTH_FILE))?;
    if samples.len() != losses.len() || samples.len() != truth.len() {
        return Err(MovaError::Validation(format!(
            "corpus files disagree on length: {} samples, {} losses, {} truth rows",
            samples.len(),
            losses.len(),
            truth.len()
        )));
    }
    for ((s, l), t) in samples.iter().zip(&losses).zip(&truth) {
        if s.sample_id != l.sample_id || s.sample_id != t.sample_id {
            return Err(MovaError::Validation(format!(
                "corpus files out of order at sample `{}`",
                s.sample_id
            )));
        }
    }
    Ok(Corpus {
        samples,
        losses,
        truth,
    })
}
