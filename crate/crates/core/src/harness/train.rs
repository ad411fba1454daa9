//! Toy trainer: plain gradient descent on the pooled-token regression
//! objective, with the expert generators frozen.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::adapter::model::{backward, forward, ExpertFeatures};
use crate::adapter::{encode_text, init_params, AdapterConfig, AdapterParams, TextToken};
use crate::error::{MovaError, Result};
use crate::experts::{
    generate_base_feature, generate_expert_feature, load_registry, ExpertRegistry, Sample,
};
use crate::harness::gradcheck::{pooled_mse, summarize, GradCheckSummary, GradInstance, Scope};
use crate::numerics::FeatureMap;
use crate::routing::{route, ExpertSelection, RoutingContext, Strategy, DEFAULT_CAP};
use crate::routing_data::{load_corpus, Corpus};

fn default_scope() -> Scope {
    Scope::GatingExtractor
}

fn default_routing() -> Strategy {
    Strategy::Oracle
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

fn default_adapter() -> AdapterConfig {
    AdapterConfig::desk()
}

fn default_eps() -> f64 {
    1e-5
}

fn default_tol() -> f64 {
    1e-4
}

fn default_probes() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Size of the fixed training batch drawn from the head of the training
    /// split; every step is a full gradient step on that batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Corpus directory; relative paths resolve against the config file.
    #[serde(default)]
    pub corpus: PathBuf,
    /// Registry file; the desk default pool when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experts: Option<PathBuf>,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    /// Fixed expert names routed for every sample. Overrides `routing`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Vec<String>>,
    #[serde(default = "default_routing")]
    pub routing: Strategy,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_adapter")]
    pub adapter: AdapterConfig,
    #[serde(default = "default_eps")]
    pub gradcheck_eps: f64,
    #[serde(default = "default_tol")]
    pub gradcheck_tol: f64,
    /// Entries probed per tensor by the step-0 gradient check.
    #[serde(default = "default_probes")]
    pub gradcheck_probes: usize,
}

impl ToyTrainConfig {
    pub fn new(corpus: impl Into<PathBuf>) -> Self {
        Self {
            steps: 500,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 42,
            corpus: corpus.into(),
            experts: None,
            scope: default_scope(),
            selection: None,
            routing: default_routing(),
            cap: DEFAULT_CAP,
            adapter: AdapterConfig::desk(),
            gradcheck_eps: default_eps(),
            gradcheck_tol: default_tol(),
            gradcheck_probes: default_probes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(MovaError::Validation("steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(MovaError::Validation(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(MovaError::Validation("batch size must be at least 1".into()));
        }
        if self.cap == 0 {
            return Err(MovaError::Validation("routing cap must be at least 1".into()));
        }
        if self.routing == Strategy::Scripted && self.selection.is_none() {
            return Err(MovaError::Usage(
                "the trainer cannot use scripted routing; give a fixed selection instead".into(),
            ));
        }
        self.adapter.validate()
    }

    /// Parameter-initialization config: the trainer seed wins over the
    /// adapter's own.
    pub fn adapter_config(&self) -> AdapterConfig {
        AdapterConfig {
            seed: self.seed,
            ..self.adapter.clone()
        }
    }

    /// Read a config file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MovaError::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| MovaError::json(path.display().to_string(), e))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        if cfg.corpus.is_relative() {
            cfg.corpus = dir.join(&cfg.corpus);
        }
        if let Some(e) = cfg.experts.as_mut() {
            if e.is_relative() {
                *e = dir.join(&*e);
            }
        }
        Ok(cfg)
    }

    pub fn registry(&self) -> Result<ExpertRegistry> {
        match &self.experts {
            Some(p) => load_registry(p),
            None => Ok(ExpertRegistry::desk_default()),
        }
    }
}

/// Mean gate weight one expert received.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeight {
    pub expert: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Training-batch loss before each update.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    pub eval_loss: f64,
    /// Averaged over eval samples and blocks; unselected experts count as 0.
    pub mean_gate_weight: Vec<ExpertWeight>,
    pub gradcheck: GradCheckSummary,
    /// Excluded from the JSON form so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock: Duration,
}

impl TrainReport {
    pub fn gate_weight(&self, expert: &str) -> Option<f64> {
        self.mean_gate_weight
            .iter()
            .find(|w| w.expert == expert)
            .map(|w| w.weight)
    }
}

/// One corpus sample with its features generated and routing resolved.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub sample_id: String,
    pub base: FeatureMap,
    pub features: ExpertFeatures,
    pub selection: ExpertSelection,
    pub text: TextToken,
    pub answer: Vec<f64>,
}

pub fn prepare_sample(
    registry: &ExpertRegistry,
    sample: &Sample,
    selection: ExpertSelection,
    text_dim: usize,
) -> Result<PreparedSample> {
    let mut features = ExpertFeatures::new();
    for &j in selection.indices() {
        let spec = &registry.experts[j];
        let planted = sample.planted_expert.as_deref() == Some(spec.name.as_str());
        features.insert(
            j,
            generate_expert_feature(spec, sample.image_seed, planted, &sample.answer_vector)?,
        );
    }
    Ok(PreparedSample {
        sample_id: sample.sample_id.clone(),
        base: generate_base_feature(registry, sample.image_seed),
        features,
        selection,
        text: encode_text(&sample.question, text_dim),
        answer: sample.answer_vector.clone(),
    })
}

/// Per-sample selections under a fixed expert list or a routing strategy.
pub fn resolve_selections(
    registry: &ExpertRegistry,
    corpus: &Corpus,
    fixed: Option<&[String]>,
    strategy: Strategy,
    seed: u64,
    cap: usize,
) -> Result<Vec<ExpertSelection>> {
    if let Some(names) = fixed {
        let sel = ExpertSelection::from_names(names, registry)?;
        return Ok(vec![sel; corpus.samples.len()]);
    }
    let context = RoutingContext {
        annotations: HashMap::new(),
        losses: corpus
            .losses
            .iter()
            .map(|l| (l.sample_id.clone(), l.clone()))
            .collect(),
        seed,
        cap,
        response: None,
    };
    // offline annotations are the constructed routing sets, so both
    // strategies resolve through the loss table here
    let strategy = match strategy {
        Strategy::Annotation => Strategy::Oracle,
        s => s,
    };
    corpus
        .samples
        .iter()
        .map(|s| route(strategy, registry, s, &context).map(|d| d.selection))
        .collect()
}

/// Number of held-out samples: the last quarter, at least one.
pub fn eval_count(total: usize) -> usize {
    (total / 4).max(1)
}

fn sample_loss(
    s: &PreparedSample,
    params: &AdapterParams,
    config: &AdapterConfig,
) -> Result<f64> {
    let (out, _) = forward(&s.base, &s.features, &s.selection, &s.text, params, config, false)?;
    Ok(pooled_mse(&out.tokens, &s.answer).0)
}

fn batch_loss_and_grad(
    batch: &[PreparedSample],
    params: &AdapterParams,
    config: &AdapterConfig,
) -> Result<(f64, AdapterParams)> {
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for s in batch {
        let (out, trace) =
            forward(&s.base, &s.features, &s.selection, &s.text, params, config, true)?;
        let (l, dtokens) = pooled_mse(&out.tokens, &s.answer);
        let g = backward(&trace.expect("trace requested"), &dtokens, params)?;
        total.scaled_add(scale, &g);
        loss += l * scale;
    }
    Ok((loss, total))
}

/// Mean loss and per-expert mean gate weight over `samples`.
pub fn evaluate(
    samples: &[PreparedSample],
    params: &AdapterParams,
    config: &AdapterConfig,
) -> Result<(f64, Vec<ExpertWeight>)> {
    let n = params.num_experts();
    let mut weights = vec![0.0; n];
    let mut loss = 0.0;
    for s in samples {
        let (out, _) = forward(&s.base, &s.features, &s.selection, &s.text, params, config, false)?;
        loss += pooled_mse(&out.tokens, &s.answer).0;
        for gate in out.gates.iter().flatten() {
            for (&j, &w) in s.selection.indices().iter().zip(gate.values()) {
                weights[j] += w;
            }
        }
    }
    let denom = (samples.len() * config.num_blocks) as f64;
    let mean_gate_weight = params
        .expert_names
        .iter()
        .zip(weights)
        .map(|(name, w)| ExpertWeight {
            expert: name.clone(),
            weight: w / denom,
        })
        .collect();
    Ok((loss / samples.len() as f64, mean_gate_weight))
}

fn as_divergence(err: MovaError, step: usize) -> MovaError {
    match err {
        MovaError::Numeric { .. } => MovaError::Diverged { step },
        other => other,
    }
}

/// Train on prepared samples. The head of `train` (up to `batch_size`) is the
/// fixed batch; `eval` scores the final parameters.
pub fn train_prepared(
    config: &ToyTrainConfig,
    registry: &ExpertRegistry,
    train: &[PreparedSample],
    eval: &[PreparedSample],
) -> Result<(TrainReport, AdapterParams)> {
    config.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(MovaError::Validation(
            "training needs at least one training and one eval sample".into(),
        ));
    }
    let started = Instant::now();
    let adapter = config.adapter_config();
    let mut params = init_params(&adapter, registry, config.seed)?;
    let batch = &train[..config.batch_size.min(train.len())];

    let first = &batch[0];
    let instance = GradInstance {
        config: adapter.clone(),
        params: params.clone(),
        base: first.base.clone(),
        features: first.features.clone(),
        selection: first.selection.clone(),
        text: first.text.clone(),
        answer: first.answer.clone(),
    };
    let reports = instance.check(config.scope, config.gradcheck_eps, Some(config.gradcheck_probes))?;
    let gradcheck = summarize(reports, config.gradcheck_eps, config.gradcheck_tol);
    crate::harness::gradcheck::require_pass(&gradcheck)?;

    let mut loss_trace = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (loss, grad) =
            batch_loss_and_grad(batch, &params, &adapter).map_err(|e| as_divergence(e, step))?;
        if !loss.is_finite() {
            return Err(MovaError::Diverged { step });
        }
        loss_trace.push(loss);
        let grads = grad.named();
        for ((name, p), (_, g)) in params.named_mut().into_iter().zip(grads) {
            if config.scope.includes(&name) {
                p.scaled_add(-config.learning_rate, g);
            }
        }
    }
    let final_loss = batch
        .iter()
        .map(|s| sample_loss(s, &params, &adapter))
        .sum::<Result<f64>>()
        .map_err(|e| as_divergence(e, config.steps))?
        / batch.len() as f64;
    if !final_loss.is_finite() {
        return Err(MovaError::Diverged { step: config.steps });
    }
    let (eval_loss, mean_gate_weight) =
        evaluate(eval, &params, &adapter).map_err(|e| as_divergence(e, config.steps))?;
    let report = TrainReport {
        steps: config.steps,
        learning_rate: config.learning_rate,
        seed: config.seed,
        train_samples: batch.len(),
        eval_samples: eval.len(),
        loss_trace,
        final_loss,
        eval_loss,
        mean_gate_weight,
        gradcheck,
        wall_clock: started.elapsed(),
    };
    Ok((report, params))
}

/// Split a corpus, resolve its routing and prepare every sample.
pub fn prepare_corpus(
    registry: &ExpertRegistry,
    corpus: &Corpus,
    selections: Vec<ExpertSelection>,
    text_dim: usize,
) -> Result<(Vec<PreparedSample>, Vec<PreparedSample>)> {
    let total = corpus.samples.len();
    if total < 2 {
        return Err(MovaError::Validation(
            "corpus needs at least two samples to hold one out".into(),
        ));
    }
    let split = total - eval_count(total);
    let mut prepared = corpus
        .samples
        .iter()
        .zip(selections)
        .map(|(s, sel)| prepare_sample(registry, s, sel, text_dim))
        .collect::<Result<Vec<_>>>()?;
    let eval = prepared.split_off(split);
    Ok((prepared, eval))
}

/// Train on an in-memory corpus.
pub fn train_on_corpus(
    config: &ToyTrainConfig,
    registry: &ExpertRegistry,
    corpus: &Corpus,
) -> Result<(TrainReport, AdapterParams)> {
    config.validate()?;
    let selections = resolve_selections(
        registry,
        corpus,
        config.selection.as_deref(),
        config.routing,
        config.seed,
        config.cap,
    )?;
    let (train, eval) = prepare_corpus(registry, corpus, selections, config.adapter.text_dim)?;
    train_prepared(config, registry, &train, &eval)
}

/// Load the corpus named by `config` and train on it.
pub fn train_toy(config: &ToyTrainConfig) -> Result<TrainReport> {
    let registry = config.registry()?;
    let corpus = load_corpus(&config.corpus, &registry)?;
    train_on_corpus(config, &registry, &corpus).map(|(r, _)| r)
}
