//! The full adapter stack: L blocks of (extract → gate → fuse → transformer),
//! token reduction, and the projector into the language-model width.

use std::collections::BTreeMap;

use crate::adapter::config::AdapterConfig;
use crate::adapter::layers::{
    aligned_expert_tokens, cross_attention_backward, cross_attention_forward, fuse_tokens,
    gate_backward, gate_forward, projector_backward, projector_forward, residual_mlp_backward,
    residual_mlp_forward, token_mean, transformer_backward, transformer_forward,
    CrossAttentionCache, GateCache, GateWeights, MlpCache, TransformerCache,
};
use crate::adapter::params::AdapterParams;
use crate::adapter::text::{encode_text, TextToken};
use crate::error::{MovaError, Result};
use crate::numerics::ops::avg_pool_2x_backward;
use crate::numerics::{avg_pool_2x, FeatureMap, Tensor};
use crate::routing::ExpertSelection;

/// Expert features keyed by registry index.
pub type ExpertFeatures = BTreeMap<usize, FeatureMap>;

#[derive(Debug, Clone)]
pub struct AdapterOutput {
    /// (H/2·W/2) × llm_dim.
    pub tokens: Tensor,
    /// Gate weights of each block, `None` when the selection was empty.
    pub gates: Vec<Option<GateWeights>>,
}

struct ExpertTrace {
    index: usize,
    cache: CrossAttentionCache,
    output: Tensor,
}

struct BlockTrace {
    experts: Vec<ExpertTrace>,
    weights: Option<GateWeights>,
    gate: Option<GateCache>,
    transformer: TransformerCache,
}

/// Activations retained by a traced forward pass for backpropagation.
pub struct ForwardTrace {
    blocks: Vec<BlockTrace>,
    reduction: Vec<MlpCache>,
    height: usize,
    width: usize,
    projector: MlpCache,
}

fn validate_inputs(
    base: &FeatureMap,
    features: &ExpertFeatures,
    selection: &ExpertSelection,
    text: &TextToken,
    params: &AdapterParams,
    config: &AdapterConfig,
) -> Result<()> {
    config.validate()?;
    if base.channels() != config.hidden_dim {
        return Err(MovaError::Shape(format!(
            "base feature has {} channels, adapter expects {}",
            base.channels(),
            config.hidden_dim
        )));
    }
    if !base.height().is_multiple_of(2) || !base.width().is_multiple_of(2) {
        return Err(MovaError::Shape(format!(
            "base grid {}×{} must have even extents for token reduction",
            base.height(),
            base.width()
        )));
    }
    if text.dim() != config.text_dim {
        return Err(MovaError::Shape(format!(
            "text token has width {}, adapter expects {}",
            text.dim(),
            config.text_dim
        )));
    }
    if params.blocks.len() != config.num_blocks {
        return Err(MovaError::Validation(format!(
            "parameters hold {} blocks, config asks for {}",
            params.blocks.len(),
            config.num_blocks
        )));
    }
    for &j in selection.indices() {
        let name = params
            .expert_names
            .get(j)
            .ok_or_else(|| MovaError::Validation(format!("selected expert {j} outside pool")))?;
        let f = features
            .get(&j)
            .ok_or_else(|| MovaError::MissingFeature(name.clone()))?;
        let want = params.blocks[0].extractors[j].key.fan_in();
        if f.channels() != want {
            return Err(MovaError::Shape(format!(
                "feature for `{name}` has {} channels, extractor expects {want}",
                f.channels()
            )));
        }
    }
    Ok(())
}

/// Forward pass with an explicit text token. When `keep_trace` is set the
/// activations needed by [`backward`] are returned as well.
pub fn forward(
    base: &FeatureMap,
    features: &ExpertFeatures,
    selection: &ExpertSelection,
    text: &TextToken,
    params: &AdapterParams,
    config: &AdapterConfig,
    keep_trace: bool,
) -> Result<(AdapterOutput, Option<ForwardTrace>)> {
    validate_inputs(base, features, selection, text, params, config)?;
    let (h, w) = (base.height(), base.width());
    let aligned = selection
        .indices()
        .iter()
        .map(|j| aligned_expert_tokens(&features[j], h, w))
        .collect::<Result<Vec<_>>>()?;

    let mut x = base.to_tokens();
    let mut gates = Vec::with_capacity(params.blocks.len());
    let mut block_traces = Vec::new();
    for block in &params.blocks {
        let (fused, experts, weights, gate) = if selection.is_empty() {
            (x.clone(), Vec::new(), None, None)
        } else {
            let mut gate_input = token_mean(&x);
            gate_input.extend_from_slice(text.values());
            let (weights, gate) =
                gate_forward(&gate_input, selection, &block.gating, config.gating_mode)?;
            let mut outputs = Vec::with_capacity(selection.len());
            let mut traces = Vec::new();
            for (&j, e) in selection.indices().iter().zip(&aligned) {
                let (y, cache) = cross_attention_forward(&x, e, &block.extractors[j], config.heads)?;
                if keep_trace {
                    traces.push(ExpertTrace {
                        index: j,
                        cache,
                        output: y.clone(),
                    });
                }
                outputs.push(y);
            }
            let fused = fuse_tokens(&outputs, weights.values())?;
            (fused, traces, Some(weights), gate)
        };
        let (out, tcache) = transformer_forward(&fused, &block.transformer, config.heads)?;
        gates.push(weights.clone());
        if keep_trace {
            block_traces.push(BlockTrace {
                experts,
                weights,
                gate,
                transformer: tcache,
            });
        }
        x = out;
    }

    let mut reduction = Vec::new();
    for r in &params.reduction {
        let (out, cache) = residual_mlp_forward(&x, r)?;
        if keep_trace {
            reduction.push(cache);
        }
        x = out;
    }
    let pooled = avg_pool_2x(&FeatureMap::from_tokens(&x, h, w)?)?.to_tokens();
    let (tokens, pcache) = projector_forward(&pooled, &params.projector)?;
    if !tokens.is_finite() {
        return Err(MovaError::Numeric {
            context: "adapter output".into(),
            index: tokens.data().iter().position(|v| !v.is_finite()).unwrap_or(0),
        });
    }
    let trace = keep_trace.then_some(ForwardTrace {
        blocks: block_traces,
        reduction,
        height: h,
        width: w,
        projector: pcache,
    });
    Ok((AdapterOutput { tokens, gates }, trace))
}

/// Gradients of `Σ grad_tokens ⊙ output` w.r.t. every adapter parameter.
pub fn backward(
    trace: &ForwardTrace,
    grad_tokens: &Tensor,
    params: &AdapterParams,
) -> Result<AdapterParams> {
    let mut grad = params.zeros_like();
    let dpooled = projector_backward(grad_tokens, &trace.projector, &params.projector, &mut grad.projector)?;
    let dmap = FeatureMap::from_tokens(&dpooled, trace.height / 2, trace.width / 2)?;
    let mut dx = avg_pool_2x_backward(&dmap).to_tokens();
    for (i, cache) in trace.reduction.iter().enumerate().rev() {
        dx = residual_mlp_backward(&dx, cache, &params.reduction[i], &mut grad.reduction[i])?;
    }
    for (i, bt) in trace.blocks.iter().enumerate().rev() {
        let bp = &params.blocks[i];
        let gb = &mut grad.blocks[i];
        let dfused = transformer_backward(&dx, &bt.transformer, &bp.transformer, &mut gb.transformer)?;
        let Some(weights) = &bt.weights else {
            dx = dfused;
            continue;
        };
        let mut dnext = Tensor::zeros(dfused.dims());
        let mut dweights = Vec::with_capacity(weights.len());
        for (et, &p) in bt.experts.iter().zip(weights.values()) {
            dweights.push(
                et.output
                    .data()
                    .iter()
                    .zip(dfused.data())
                    .fold(0.0, |acc, (y, d)| acc + y * d),
            );
            let mut dy = dfused.clone();
            dy.data_mut().iter_mut().for_each(|v| *v *= p);
            let j = et.index;
            let dxj = cross_attention_backward(&dy, &et.cache, &bp.extractors[j], &mut gb.extractors[j])?;
            dnext.add_assign(&dxj);
        }
        if let Some(gc) = &bt.gate {
            let dinput = gate_backward(&dweights, gc, &bp.gating, &mut gb.gating)?;
            let c = dnext.cols();
            let n = dnext.rows() as f64;
            for row in dnext.data_mut().chunks_mut(c) {
                for (v, g) in row.iter_mut().zip(&dinput[..c]) {
                    *v += g / n;
                }
            }
        }
        dx = dnext;
    }
    Ok(grad)
}

/// Run the adapter on a question, encoding it with the hash text encoder.
pub fn adapter_forward(
    base: &FeatureMap,
    features: &ExpertFeatures,
    selection: &ExpertSelection,
    question: &str,
    params: &AdapterParams,
    config: &AdapterConfig,
) -> Result<Tensor> {
    adapter_forward_detailed(base, features, selection, question, params, config).map(|o| o.tokens)
}

pub fn adapter_forward_detailed(
    base: &FeatureMap,
    features: &ExpertFeatures,
    selection: &ExpertSelection,
    question: &str,
    params: &AdapterParams,
    config: &AdapterConfig,
) -> Result<AdapterOutput> {
    let text = encode_text(question, config.text_dim);
    forward(base, features, selection, &text, params, config, false).map(|(o, _)| o)
}
