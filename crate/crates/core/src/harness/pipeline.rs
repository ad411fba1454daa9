//! End-to-end run: route a question over the expert pool, generate the
//! features, fuse them through the adapter and write the output tokens.

use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::adapter::model::ExpertFeatures;
use crate::adapter::{adapter_forward_detailed, init_params, AdapterConfig, AdapterParams};
use crate::error::{MovaError, Result};
use crate::experts::{generate_base_feature, generate_expert_feature, ExpertRegistry, Sample};
use crate::numerics::{movt, Tensor};
use crate::routing::{
    coarse_image_tokens, route, DecisionJson, ExpertSelection, RoutingContext, RoutingDecision,
    Strategy,
};

/// What to do when a routing response names no expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyFallback {
    /// Continue with the empty selection (base-only adapter path).
    BaseOnly,
    Error,
}

impl FromStr for EmptyFallback {
    type Err = MovaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base-only" => Ok(EmptyFallback::BaseOnly),
            "error" => Ok(EmptyFallback::Error),
            other => Err(MovaError::Usage(format!(
                "unknown empty-response policy `{other}` (expected base-only or error)"
            ))),
        }
    }
}

/// Route one sample, applying `fallback` to an empty response.
pub fn route_with_fallback(
    strategy: Strategy,
    registry: &ExpertRegistry,
    sample: &Sample,
    context: &RoutingContext,
    fallback: EmptyFallback,
) -> Result<RoutingDecision> {
    match route(strategy, registry, sample, context) {
        Err(MovaError::EmptyResponse) if fallback == EmptyFallback::BaseOnly => Ok(RoutingDecision {
            selection: ExpertSelection::empty(),
            raw_response: context.response.clone().unwrap_or_default(),
            strategy,
        }),
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRequest {
    pub registry: ExpertRegistry,
    pub question: String,
    pub sample_id: String,
    pub image_seed: u64,
    pub strategy: Strategy,
    pub context: RoutingContext,
    pub fallback: EmptyFallback,
    pub adapter: AdapterConfig,
    /// Trained parameters; seeded initialization from `adapter.seed` when absent.
    pub params: Option<AdapterParams>,
    pub grid: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GateEntry {
    pub expert: String,
    pub letter: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockGates {
    pub block: usize,
    pub gates: Vec<GateEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary<'a> {
    pub decision: DecisionJson<'a>,
    pub raw_response: String,
    pub coarse_tokens: usize,
    pub blocks: Vec<BlockGates>,
    pub output_dims: Vec<usize>,
}

/// Run the pipeline in memory. Errors carry the stage that raised them.
pub fn run_pipeline_tokens(req: &PipelineRequest) -> Result<(Tensor, PipelineSummary<'_>)> {
    let registry = &req.registry;
    registry.validate().map_err(|e| e.at_stage("registry"))?;
    let sample = Sample {
        sample_id: req.sample_id.clone(),
        image_seed: req.image_seed,
        question: req.question.clone(),
        answer_vector: Vec::new(),
        planted_expert: None,
    };
    let base = generate_base_feature(registry, req.image_seed);
    let coarse = coarse_image_tokens(&base, req.grid).map_err(|e| e.at_stage("routing"))?;
    let decision = route_with_fallback(req.strategy, registry, &sample, &req.context, req.fallback)
        .map_err(|e| e.at_stage("routing"))?;

    let mut features = ExpertFeatures::new();
    for &j in decision.selection.indices() {
        let f = generate_expert_feature(&registry.experts[j], req.image_seed, false, &[])
            .map_err(|e| e.at_stage("features"))?;
        features.insert(j, f);
    }

    let params = match &req.params {
        Some(p) => p.clone(),
        None => init_params(&req.adapter, registry, req.adapter.seed)
            .map_err(|e| e.at_stage("adapter"))?,
    };
    let out = adapter_forward_detailed(
        &base,
        &features,
        &decision.selection,
        &req.question,
        &params,
        &req.adapter,
    )
    .map_err(|e| e.at_stage("adapter"))?;

    let blocks = out
        .gates
        .iter()
        .enumerate()
        .map(|(block, g)| BlockGates {
            block,
            gates: g
                .as_ref()
                .map(|w| {
                    decision
                        .selection
                        .indices()
                        .iter()
                        .zip(w.values())
                        .map(|(&j, &weight)| GateEntry {
                            expert: registry.experts[j].name.clone(),
                            letter: registry.experts[j].letter.to_string(),
                            weight,
                        })
                        .collect()
                })
                .unwrap_or_default(),
        })
        .collect();
    let summary = PipelineSummary {
        decision: decision.to_json(registry),
        raw_response: decision.raw_response.clone(),
        coarse_tokens: coarse.rows(),
        blocks,
        output_dims: out.tokens.dims().to_vec(),
    };
    Ok((out.tokens, summary))
}

/// Run the pipeline and write the output tokens to `out_path` as MOVT.
pub fn run_pipeline<'a>(req: &'a PipelineRequest, out_path: &Path) -> Result<PipelineSummary<'a>> {
    let (tokens, summary) = run_pipeline_tokens(req)?;
    movt::save(&tokens, out_path).map_err(|e| e.at_stage("output"))?;
    Ok(summary)
}
