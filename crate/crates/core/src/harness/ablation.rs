//! Ablation arms over routing and gating, trained on shared seeds and sample
//! streams so their eval losses are directly comparable.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapter::GatingMode;
use crate::error::{MovaError, Result};
use crate::experts::ExpertRegistry;
use crate::harness::train::{
    prepare_corpus, resolve_selections, train_prepared, ExpertWeight, ToyTrainConfig,
};
use crate::routing::{ExpertSelection, Strategy};
use crate::routing_data::{load_corpus, Corpus};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// The configured routing (fixed selection or strategy) with dynamic gating.
    Dynamic,
    RandomRouting,
    AllExperts,
    /// The configured routing with every selected expert weighted 1/K.
    UniformGating,
    /// The k lowest-loss experts of each sample, in registry order.
    FixedK(usize),
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AblationMode::Dynamic => f.write_str("dynamic"),
            AblationMode::RandomRouting => f.write_str("random-routing"),
            AblationMode::AllExperts => f.write_str("all-experts"),
            AblationMode::UniformGating => f.write_str("uniform-gating"),
            AblationMode::FixedK(k) => write!(f, "fixed-K:{k}"),
        }
    }
}

impl FromStr for AblationMode {
    type Err = MovaError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "dynamic" => return Ok(AblationMode::Dynamic),
            "random-routing" => return Ok(AblationMode::RandomRouting),
            "all-experts" => return Ok(AblationMode::AllExperts),
            "uniform-gating" => return Ok(AblationMode::UniformGating),
            _ => {}
        }
        let k = s
            .strip_prefix("fixed-K:")
            .or_else(|| s.strip_prefix("fixed-k:"))
            .ok_or_else(|| MovaError::Usage(format!("unknown ablation mode `{s}`")))?;
        match k.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(AblationMode::FixedK(k)),
            _ => Err(MovaError::Usage(format!("fixed-K needs a positive count, got `{k}`"))),
        }
    }
}

/// Parse a comma-separated mode list.
pub fn parse_modes(list: &str) -> Result<Vec<AblationMode>> {
    let modes = list
        .split(',')
        .filter(|m| !m.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()?;
    if modes.is_empty() {
        return Err(MovaError::Usage("no ablation modes given".into()));
    }
    Ok(modes)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationEntry {
    pub mode: String,
    pub routing: String,
    pub gating: GatingMode,
    /// Mean number of routed experts per sample.
    pub mean_experts: f64,
    pub final_loss: f64,
    pub eval_loss: f64,
    pub mean_gate_weight: Vec<ExpertWeight>,
    /// Digest of the sample ids in consumption order.
    pub sample_stream: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub entries: Vec<AblationEntry>,
}

impl AblationReport {
    pub fn entry(&self, mode: &str) -> Option<&AblationEntry> {
        self.entries.iter().find(|e| e.mode == mode)
    }
}

/// The `k` lowest-loss experts of each sample (ties by index), re-sorted
/// into registry order.
pub fn lowest_loss_selections(
    registry: &ExpertRegistry,
    corpus: &Corpus,
    k: usize,
) -> Result<Vec<ExpertSelection>> {
    let n = registry.len();
    if k == 0 || k > n {
        return Err(MovaError::Usage(format!(
            "fixed-K count {k} outside 1..={n} for this pool"
        )));
    }
    corpus
        .losses
        .iter()
        .map(|rec| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                rec.expert_losses[a]
                    .total_cmp(&rec.expert_losses[b])
                    .then(a.cmp(&b))
            });
            let mut picked = order[..k].to_vec();
            picked.sort_unstable();
            ExpertSelection::new(picked, n)
        })
        .collect()
}

fn stream_digest(ids: impl Iterator<Item = String>) -> String {
    let joined: Vec<String> = ids.collect();
    format!("{:016x}", seed::hash_str(&joined.join("\n")))
}

pub fn run_ablation_on(
    modes: &[AblationMode],
    config: &ToyTrainConfig,
    registry: &ExpertRegistry,
    corpus: &Corpus,
) -> Result<AblationReport> {
    config.validate()?;
    let mut entries = Vec::with_capacity(modes.len());
    for &mode in modes {
        let mut arm = config.clone();
        let (selections, routing) = match mode {
            AblationMode::Dynamic | AblationMode::UniformGating => {
                let label = match &config.selection {
                    Some(names) => format!("fixed:{}", names.join("+")),
                    None => config.routing.to_string(),
                };
                let sel = resolve_selections(
                    registry,
                    corpus,
                    config.selection.as_deref(),
                    config.routing,
                    config.seed,
                    config.cap,
                )?;
                (sel, label)
            }
            AblationMode::RandomRouting => (
                resolve_selections(registry, corpus, None, Strategy::Random, config.seed, config.cap)?,
                Strategy::Random.to_string(),
            ),
            AblationMode::AllExperts => (
                resolve_selections(registry, corpus, None, Strategy::All, config.seed, config.cap)?,
                Strategy::All.to_string(),
            ),
            AblationMode::FixedK(k) => (
                lowest_loss_selections(registry, corpus, k)?,
                format!("lowest-loss:{k}"),
            ),
        };
        arm.adapter.gating_mode = match mode {
            AblationMode::UniformGating => GatingMode::Uniform,
            _ => GatingMode::Dynamic,
        };
        let mean_experts =
            selections.iter().map(|s| s.len()).sum::<usize>() as f64 / selections.len() as f64;
        let (train, eval) = prepare_corpus(registry, corpus, selections, arm.adapter.text_dim)?;
        let used = train.len().min(arm.batch_size);
        let sample_stream = stream_digest(
            train[..used]
                .iter()
                .chain(&eval)
                .map(|s| s.sample_id.clone()),
        );
        let (report, _) = train_prepared(&arm, registry, &train, &eval)?;
        entries.push(AblationEntry {
            mode: mode.to_string(),
            routing,
            gating: arm.adapter.gating_mode,
            mean_experts,
            final_loss: report.final_loss,
            eval_loss: report.eval_loss,
            mean_gate_weight: report.mean_gate_weight,
            sample_stream,
        });
    }
    Ok(AblationReport {
        seed: config.seed,
        steps: config.steps,
        learning_rate: config.learning_rate,
        entries,
    })
}

pub fn run_ablation(modes: &[AblationMode], config: &ToyTrainConfig) -> Result<AblationReport> {
    let registry = config.registry()?;
    let corpus = load_corpus(&config.corpus, &registry)?;
    run_ablation_on(modes, config, &registry, &corpus)
}
