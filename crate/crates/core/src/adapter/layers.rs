//! Forward and backward passes of the adapter's building blocks, all on
//! token matrices (positions × channels).

use crate::adapter::config::GatingMode;
use crate::adapter::params::{
    CrossAttention, GatingNet, LayerNormParams, Linear, NormMode, Projector, ResidualMlp,
    TransformerParams,
};
use crate::adapter::text::TextToken;
use crate::error::{MovaError, Result};
use crate::numerics::ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn,
    multi_head_attention, multi_head_attention_backward, softmax, softmax_backward,
};
use crate::numerics::{bilinear_interpolate, global_avg_pool, FeatureMap, Tensor};
use crate::routing::ExpertSelection;

pub(crate) fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.dims().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn mul_elementwise(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_parts(
        a.dims().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
}

pub(crate) fn linear_forward(x: &Tensor, l: &Linear) -> Result<Tensor> {
    let mut y = matmul(x, &l.weight)?;
    if let Some(bias) = &l.bias {
        let n = y.cols();
        for row in y.data_mut().chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
    }
    Ok(y)
}

/// Accumulate weight/bias gradients into `grad` and return dx.
pub(crate) fn linear_backward(dy: &Tensor, x: &Tensor, l: &Linear, grad: &mut Linear) -> Result<Tensor> {
    grad.weight.add_assign(&matmul_tn(x, dy)?);
    if let Some(gb) = &mut grad.bias {
        let n = dy.cols();
        for row in dy.data().chunks(n) {
            for (g, d) in gb.data_mut().iter_mut().zip(row) {
                *g += d;
            }
        }
    }
    matmul_nt(dy, &l.weight)
}

fn column_sum(t: &Tensor) -> Vec<f64> {
    let n = t.cols();
    let mut out = vec![0.0; n];
    for row in t.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Column means of a token matrix: global average pooling in token layout.
pub(crate) fn token_mean(t: &Tensor) -> Vec<f64> {
    let rows = t.rows() as f64;
    column_sum(t).into_iter().map(|v| v / rows).collect()
}

// ---------------------------------------------------------------- extractor

#[derive(Debug, Clone)]
pub struct CrossAttentionCache {
    x: Tensor,
    e: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    mixed: Tensor,
}

/// `x + output(attention(query(x), key(e), value(e)))`.
pub fn cross_attention_forward(
    x: &Tensor,
    e: &Tensor,
    p: &CrossAttention,
    heads: usize,
) -> Result<(Tensor, CrossAttentionCache)> {
    let q = linear_forward(x, &p.query)?;
    let k = linear_forward(e, &p.key)?;
    let v = linear_forward(e, &p.value)?;
    let (mixed, probs) = multi_head_attention(&q, &k, &v, heads)?;
    let o = linear_forward(&mixed, &p.output)?;
    let y = add(x, &o);
    Ok((
        y,
        CrossAttentionCache {
            x: x.clone(),
            e: e.clone(),
            q,
            k,
            v,
            probs,
            mixed,
        },
    ))
}

pub fn cross_attention_backward(
    dy: &Tensor,
    cache: &CrossAttentionCache,
    p: &CrossAttention,
    grad: &mut CrossAttention,
) -> Result<Tensor> {
    let dmixed = linear_backward(dy, &cache.mixed, &p.output, &mut grad.output)?;
    let (dq, dk, dv) =
        multi_head_attention_backward(&dmixed, &cache.q, &cache.k, &cache.v, &cache.probs)?;
    // expert features are frozen inputs; their gradients are discarded
    linear_backward(&dk, &cache.e, &p.key, &mut grad.key)?;
    linear_backward(&dv, &cache.e, &p.value, &mut grad.value)?;
    let dx_query = linear_backward(&dq, &cache.x, &p.query, &mut grad.query)?;
    Ok(add(dy, &dx_query))
}

fn check_extractor(x_channels: usize, expert_channels: usize, p: &CrossAttention) -> Result<()> {
    if x_channels != p.query.fan_in() {
        return Err(MovaError::Shape(format!(
            "adapter feature has {x_channels} channels, extractor expects {}",
            p.query.fan_in()
        )));
    }
    if expert_channels != p.key.fan_in() {
        return Err(MovaError::Shape(format!(
            "expert feature has {expert_channels} channels, extractor expects {}",
            p.key.fan_in()
        )));
    }
    Ok(())
}

/// Expert tokens resampled onto the adapter grid.
pub(crate) fn aligned_expert_tokens(expert: &FeatureMap, h: usize, w: usize) -> Result<Tensor> {
    Ok(bilinear_interpolate(expert, h, w)?.to_tokens())
}

/// Conditional representation of one expert: resample the expert feature to
/// the adapter grid, cross-attend from `x`, add the residual.
pub fn extract_expert_knowledge(
    x: &FeatureMap,
    expert_feature: &FeatureMap,
    params: &CrossAttention,
    heads: usize,
) -> Result<FeatureMap> {
    check_extractor(x.channels(), expert_feature.channels(), params)?;
    let e = aligned_expert_tokens(expert_feature, x.height(), x.width())?;
    let (y, _) = cross_attention_forward(&x.to_tokens(), &e, params, heads)?;
    FeatureMap::from_tokens(&y, x.height(), x.width())
}

// ------------------------------------------------------------------ gating

#[derive(Debug, Clone, PartialEq)]
pub struct GatingInput {
    pub visual_token: Vec<f64>,
    pub text_token: TextToken,
}

impl GatingInput {
    pub fn from_feature(x: &FeatureMap, text_token: TextToken) -> Self {
        Self {
            visual_token: global_avg_pool(x),
            text_token,
        }
    }

    fn concat(&self) -> Vec<f64> {
        let mut v = self.visual_token.clone();
        v.extend_from_slice(self.text_token.values());
        v
    }
}

/// Soft weights over the selected experts, in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights(Vec<f64>);

impl GateWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(MovaError::RoutedEmpty);
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(MovaError::Validation(format!(
                "gate weights {weights:?} are not on the simplex"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(MovaError::RoutedEmpty);
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GateCache {
    input: Tensor,
    pre: Tensor,
    act: Tensor,
    /// Masked softmax over the full pool.
    probs: Vec<f64>,
    selection: Vec<usize>,
}

/// Raw pool logits of the gating MLP.
pub fn gate_logits(input: &[f64], p: &GatingNet) -> Result<(Vec<f64>, Tensor, Tensor, Tensor)> {
    let x = Tensor::new(vec![1, input.len()], input.to_vec())?;
    let pre = linear_forward(&x, &p.hidden)?;
    let act = map(&pre, gelu);
    let logits = linear_forward(&act, &p.logits)?;
    Ok((logits.into_data(), x, pre, act))
}

pub(crate) fn gate_forward(
    input: &[f64],
    selection: &ExpertSelection,
    p: &GatingNet,
    mode: GatingMode,
) -> Result<(GateWeights, Option<GateCache>)> {
    if selection.is_empty() {
        return Err(MovaError::RoutedEmpty);
    }
    let n = p.logits.fan_out();
    if selection.indices().iter().any(|&j| j >= n) {
        return Err(MovaError::Validation(format!(
            "selection {:?} exceeds gating pool of {n}",
            selection.indices()
        )));
    }
    if input.len() != p.hidden.fan_in() {
        return Err(MovaError::Shape(format!(
            "gating input has width {}, network expects {}",
            input.len(),
            p.hidden.fan_in()
        )));
    }
    match mode {
        GatingMode::Uniform => Ok((GateWeights::uniform(selection.len())?, None)),
        GatingMode::Dynamic => {
            let (logits, x, pre, act) = gate_logits(input, p)?;
            let mut mask = vec![false; n];
            for &j in selection.indices() {
                mask[j] = true;
            }
            let probs = softmax(&logits, Some(&mask))?;
            let weights = selection.indices().iter().map(|&j| probs[j]).collect();
            Ok((
                GateWeights(weights),
                Some(GateCache {
                    input: x,
                    pre,
                    act,
                    probs,
                    selection: selection.indices().to_vec(),
                }),
            ))
        }
    }
}

/// Gradient of the gate weights back to the gating network. Returns the
/// gradient w.r.t. the concatenated gating input.
pub(crate) fn gate_backward(
    dweights: &[f64],
    cache: &GateCache,
    p: &GatingNet,
    grad: &mut GatingNet,
) -> Result<Vec<f64>> {
    let sel_p: Vec<f64> = cache.selection.iter().map(|&j| cache.probs[j]).collect();
    let dsel = softmax_backward(&sel_p, dweights);
    let mut dlogits = vec![0.0; cache.probs.len()];
    for (&j, d) in cache.selection.iter().zip(dsel) {
        dlogits[j] = d;
    }
    let dlogits = Tensor::from_parts(vec![1, dlogits.len()], dlogits);
    let dact = linear_backward(&dlogits, &cache.act, &p.logits, &mut grad.logits)?;
    let dpre = mul_elementwise(&dact, &map(&cache.pre, gelu_grad));
    let dx = linear_backward(&dpre, &cache.input, &p.hidden, &mut grad.hidden)?;
    Ok(dx.into_data())
}

pub fn gate_weights(
    input: &GatingInput,
    selection: &ExpertSelection,
    params: &GatingNet,
    mode: GatingMode,
) -> Result<GateWeights> {
    gate_forward(&input.concat(), selection, params, mode).map(|(w, _)| w)
}

// -------------------------------------------------------------------- fuse

pub(crate) fn fuse_tokens(conditional: &[Tensor], weights: &[f64]) -> Result<Tensor> {
    if conditional.len() != weights.len() || conditional.is_empty() {
        return Err(MovaError::Shape(format!(
            "{} conditional maps for {} weights",
            conditional.len(),
            weights.len()
        )));
    }
    let dims = conditional[0].dims();
    if conditional.iter().any(|c| c.dims() != dims) {
        return Err(MovaError::Shape("conditional maps differ in dims".into()));
    }
    let mut out = map(&conditional[0], |v| v * weights[0]);
    for (c, &w) in conditional.iter().zip(weights).skip(1) {
        out.scaled_add(w, c);
    }
    Ok(out)
}

/// Weighted sum of conditional representations.
pub fn fuse(conditional: &[FeatureMap], weights: &GateWeights) -> Result<FeatureMap> {
    let tensors: Vec<Tensor> = conditional.iter().map(|f| f.tensor().clone()).collect();
    let out = fuse_tokens(&tensors, weights.values())?;
    FeatureMap::from_tensor(out)
}

// ------------------------------------------------------------- transformer

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

fn norm_forward(x: &Tensor, p: &LayerNormParams, mode: NormMode) -> (Tensor, Option<NormCache>) {
    match mode {
        NormMode::Identity => (x.clone(), None),
        NormMode::Layer => {
            let (y, xhat, inv_std) = layer_norm(x, p.gamma.data(), p.beta.data());
            (y, Some(NormCache { xhat, inv_std }))
        }
    }
}

fn norm_backward(
    dy: &Tensor,
    cache: &Option<NormCache>,
    p: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Tensor {
    match cache {
        None => dy.clone(),
        Some(c) => layer_norm_backward(
            dy,
            &c.xhat,
            &c.inv_std,
            p.gamma.data(),
            grad.gamma.data_mut(),
            grad.beta.data_mut(),
        ),
    }
}

#[derive(Debug, Clone)]
pub struct TransformerCache {
    z: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    probs: Vec<Tensor>,
    mixed: Tensor,
    norm1: Option<NormCache>,
    u: Tensor,
    ffn_pre: Tensor,
    ffn_act: Tensor,
    norm2: Option<NormCache>,
}

/// Post-norm encoder block: `u = norm1(z + attn(z))`, `out = norm2(u + ffn(u))`.
pub fn transformer_forward(
    z: &Tensor,
    p: &TransformerParams,
    heads: usize,
) -> Result<(Tensor, TransformerCache)> {
    let q = linear_forward(z, &p.attn_query)?;
    let k = linear_forward(z, &p.attn_key)?;
    let v = linear_forward(z, &p.attn_value)?;
    let (mixed, probs) = multi_head_attention(&q, &k, &v, heads)?;
    let attn = linear_forward(&mixed, &p.attn_output)?;
    let (u, norm1) = norm_forward(&add(z, &attn), &p.norm1, p.norm_mode);
    let ffn_pre = linear_forward(&u, &p.ffn_in)?;
    let ffn_act = map(&ffn_pre, gelu);
    let ffn = linear_forward(&ffn_act, &p.ffn_out)?;
    let (out, norm2) = norm_forward(&add(&u, &ffn), &p.norm2, p.norm_mode);
    Ok((
        out,
        TransformerCache {
            z: z.clone(),
            q,
            k,
            v,
            probs,
            mixed,
            norm1,
            u,
            ffn_pre,
            ffn_act,
            norm2,
        },
    ))
}

pub fn transformer_backward(
    dout: &Tensor,
    cache: &TransformerCache,
    p: &TransformerParams,
    grad: &mut TransformerParams,
) -> Result<Tensor> {
    let ds2 = norm_backward(dout, &cache.norm2, &p.norm2, &mut grad.norm2);
    let dact = linear_backward(&ds2, &cache.ffn_act, &p.ffn_out, &mut grad.ffn_out)?;
    let dpre = mul_elementwise(&dact, &map(&cache.ffn_pre, gelu_grad));
    let du_ffn = linear_backward(&dpre, &cache.u, &p.ffn_in, &mut grad.ffn_in)?;
    let du = add(&ds2, &du_ffn);
    let ds1 = norm_backward(&du, &cache.norm1, &p.norm1, &mut grad.norm1);
    let dmixed = linear_backward(&ds1, &cache.mixed, &p.attn_output, &mut grad.attn_output)?;
    let (dq, dk, dv) =
        multi_head_attention_backward(&dmixed, &cache.q, &cache.k, &cache.v, &cache.probs)?;
    let mut dz = ds1;
    dz.add_assign(&linear_backward(&dq, &cache.z, &p.attn_query, &mut grad.attn_query)?);
    dz.add_assign(&linear_backward(&dk, &cache.z, &p.attn_key, &mut grad.attn_key)?);
    dz.add_assign(&linear_backward(&dv, &cache.z, &p.attn_value, &mut grad.attn_value)?);
    Ok(dz)
}

pub fn transformer_block(x: &FeatureMap, params: &TransformerParams, heads: usize) -> Result<FeatureMap> {
    if x.channels() != params.attn_query.fan_in() {
        return Err(MovaError::Shape(format!(
            "transformer expects {} channels, got {}",
            params.attn_query.fan_in(),
            x.channels()
        )));
    }
    let (out, _) = transformer_forward(&x.to_tokens(), params, heads)?;
    FeatureMap::from_tokens(&out, x.height(), x.width())
}

// -------------------------------------------------------- reduction & head

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

pub(crate) fn residual_mlp_forward(x: &Tensor, p: &ResidualMlp) -> Result<(Tensor, MlpCache)> {
    let pre = linear_forward(x, &p.fc1)?;
    let act = map(&pre, gelu);
    let out = add(x, &linear_forward(&act, &p.fc2)?);
    Ok((
        out,
        MlpCache {
            x: x.clone(),
            pre,
            act,
        },
    ))
}

pub(crate) fn residual_mlp_backward(
    dy: &Tensor,
    cache: &MlpCache,
    p: &ResidualMlp,
    grad: &mut ResidualMlp,
) -> Result<Tensor> {
    let dact = linear_backward(dy, &cache.act, &p.fc2, &mut grad.fc2)?;
    let dpre = mul_elementwise(&dact, &map(&cache.pre, gelu_grad));
    let dx = linear_backward(&dpre, &cache.x, &p.fc1, &mut grad.fc1)?;
    Ok(add(dy, &dx))
}

pub(crate) fn projector_forward(x: &Tensor, p: &Projector) -> Result<(Tensor, MlpCache)> {
    let pre = linear_forward(x, &p.fc1)?;
    let act = map(&pre, gelu);
    let out = linear_forward(&act, &p.fc2)?;
    Ok((
        out,
        MlpCache {
            x: x.clone(),
            pre,
            act,
        },
    ))
}

pub(crate) fn projector_backward(
    dy: &Tensor,
    cache: &MlpCache,
    p: &Projector,
    grad: &mut Projector,
) -> Result<Tensor> {
    let dact = linear_backward(dy, &cache.act, &p.fc2, &mut grad.fc2)?;
    let dpre = mul_elementwise(&dact, &map(&cache.pre, gelu_grad));
    linear_backward(&dpre, &cache.x, &p.fc1, &mut grad.fc1)
}
