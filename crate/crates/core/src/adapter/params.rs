//! Adapter parameter containers, seeded initialization and on-disk storage.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::config::AdapterConfig;
use crate::error::{MovaError, Result};
use crate::experts::ExpertRegistry;
use crate::numerics::{movt, Tensor};
use crate::seed;

/// Uniform access to every tensor of a parameter tree under a dotted name.
pub trait ParamTree {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x·W + b` with `W` stored as in×out.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Weights ~ N(0, 1/fan_in), zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Some(Tensor::zeros(&[fan_out])),
        }
    }

    /// Linear map without bias. Used for attention keys, where a bias only
    /// shifts each score row by a constant and so never changes the output.
    pub fn init_unbiased<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            bias: None,
            ..Self::init(fan_in, fan_out, rng)
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

impl ParamTree for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    #[default]
    Layer,
    /// Pass-through; used to isolate the residual wiring in tests.
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(width: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[width], 1.0),
            beta: Tensor::zeros(&[width]),
        }
    }
}

impl ParamTree for LayerNormParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// One expert's cross-attention layer: queries from the adapter feature,
/// keys and values from the expert feature.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl CrossAttention {
    fn init<R: Rng + ?Sized>(hidden: usize, expert_channels: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::init(hidden, hidden, rng),
            key: Linear::init_unbiased(expert_channels, hidden, rng),
            value: Linear::init(expert_channels, hidden, rng),
            output: Linear::init(hidden, hidden, rng),
        }
    }
}

impl ParamTree for CrossAttention {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.query.visit(&join(prefix, "query"), out);
        self.key.visit(&join(prefix, "key"), out);
        self.value.visit(&join(prefix, "value"), out);
        self.output.visit(&join(prefix, "output"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.query.visit_mut(&join(prefix, "query"), out);
        self.key.visit_mut(&join(prefix, "key"), out);
        self.value.visit_mut(&join(prefix, "value"), out);
        self.output.visit_mut(&join(prefix, "output"), out);
    }
}

/// Two-layer gating MLP emitting one logit per pool expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingNet {
    pub hidden: Linear,
    pub logits: Linear,
}

impl ParamTree for GatingNet {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.hidden.visit(&join(prefix, "hidden"), out);
        self.logits.visit(&join(prefix, "logits"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.hidden.visit_mut(&join(prefix, "hidden"), out);
        self.logits.visit_mut(&join(prefix, "logits"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub attn_query: Linear,
    pub attn_key: Linear,
    pub attn_value: Linear,
    pub attn_output: Linear,
    pub norm1: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNormParams,
    pub norm_mode: NormMode,
}

impl ParamTree for TransformerParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.attn_query.visit(&join(prefix, "attn_query"), out);
        self.attn_key.visit(&join(prefix, "attn_key"), out);
        self.attn_value.visit(&join(prefix, "attn_value"), out);
        self.attn_output.visit(&join(prefix, "attn_output"), out);
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.ffn_in.visit(&join(prefix, "ffn_in"), out);
        self.ffn_out.visit(&join(prefix, "ffn_out"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.attn_query.visit_mut(&join(prefix, "attn_query"), out);
        self.attn_key.visit_mut(&join(prefix, "attn_key"), out);
        self.attn_value.visit_mut(&join(prefix, "attn_value"), out);
        self.attn_output.visit_mut(&join(prefix, "attn_output"), out);
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.ffn_in.visit_mut(&join(prefix, "ffn_in"), out);
        self.ffn_out.visit_mut(&join(prefix, "ffn_out"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
    }
}

/// `x + fc2(gelu(fc1(x)))`, applied per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ParamTree for ResidualMlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
    }
}

/// `fc2(gelu(fc1(x)))` into the language-model width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ParamTree for Projector {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    /// One cross-attention layer per pool expert, in registry order.
    pub extractors: Vec<CrossAttention>,
    pub gating: GatingNet,
    pub transformer: TransformerParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub expert_names: Vec<String>,
    pub blocks: Vec<BlockParams>,
    pub reduction: Vec<ResidualMlp>,
    pub projector: Projector,
}

impl ParamTree for AdapterParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            let bp = join(prefix, &format!("block{i}"));
            for (name, x) in self.expert_names.iter().zip(&b.extractors) {
                x.visit(&join(&bp, &format!("extract.{name}")), out);
            }
            b.gating.visit(&join(&bp, "gating"), out);
            b.transformer.visit(&join(&bp, "transformer"), out);
        }
        for (i, r) in self.reduction.iter().enumerate() {
            r.visit(&join(prefix, &format!("reduce{i}")), out);
        }
        self.projector.visit(&join(prefix, "projector"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        let names = &self.expert_names;
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let bp = join(prefix, &format!("block{i}"));
            for (name, x) in names.iter().zip(b.extractors.iter_mut()) {
                x.visit_mut(&join(&bp, &format!("extract.{name}")), out);
            }
            b.gating.visit_mut(&join(&bp, "gating"), out);
            b.transformer.visit_mut(&join(&bp, "transformer"), out);
        }
        for (i, r) in self.reduction.iter_mut().enumerate() {
            r.visit_mut(&join(prefix, &format!("reduce{i}")), out);
        }
        self.projector.visit_mut(&join(prefix, "projector"), out);
    }
}

/// Number of residual blocks ahead of the single 2× pooling.
pub const REDUCTION_BLOCKS: usize = 2;

impl AdapterParams {
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same structure with every tensor zeroed, for gradient accumulation.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += alpha · other`, tensor by tensor.
    pub fn scaled_add(&mut self, alpha: f64, other: &AdapterParams) {
        let src = other.named();
        for ((_, dst), (_, s)) in self.named_mut().into_iter().zip(src) {
            dst.scaled_add(alpha, s);
        }
    }

    pub fn num_experts(&self) -> usize {
        self.expert_names.len()
    }
}

/// Seeded initialization: weights ~ N(0, 1/fan_in), biases 0, norms (1, 0).
pub fn init_params(
    config: &AdapterConfig,
    registry: &ExpertRegistry,
    seed: u64,
) -> Result<AdapterParams> {
    config.check_registry(registry)?;
    let mut rng = seed::rng(&[seed, 0xADA9]);
    let c = config.hidden_dim;
    let n = registry.len();
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for _ in 0..config.num_blocks {
        let extractors = registry
            .experts
            .iter()
            .map(|e| CrossAttention::init(c, e.channels, &mut rng))
            .collect();
        let gating = GatingNet {
            hidden: Linear::init(c + config.text_dim, config.gating_hidden, &mut rng),
            logits: Linear::init(config.gating_hidden, n, &mut rng),
        };
        let ffn = c * config.ffn_expansion;
        let transformer = TransformerParams {
            attn_query: Linear::init(c, c, &mut rng),
            attn_key: Linear::init_unbiased(c, c, &mut rng),
            attn_value: Linear::init(c, c, &mut rng),
            attn_output: Linear::init(c, c, &mut rng),
            norm1: LayerNormParams::new(c),
            ffn_in: Linear::init(c, ffn, &mut rng),
            ffn_out: Linear::init(ffn, c, &mut rng),
            norm2: LayerNormParams::new(c),
            norm_mode: NormMode::Layer,
        };
        blocks.push(BlockParams {
            extractors,
            gating,
            transformer,
        });
    }
    let reduction = (0..REDUCTION_BLOCKS)
        .map(|_| ResidualMlp {
            fc1: Linear::init(c, c, &mut rng),
            fc2: Linear::init(c, c, &mut rng),
        })
        .collect();
    let projector = Projector {
        fc1: Linear::init(c, config.llm_dim, &mut rng),
        fc2: Linear::init(config.llm_dim, config.llm_dim, &mut rng),
    };
    Ok(AdapterParams {
        expert_names: registry.experts.iter().map(|e| e.name.clone()).collect(),
        blocks,
        reduction,
        projector,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamsManifest {
    experts: Vec<String>,
    tensors: Vec<ManifestEntry>,
}

pub const PARAMS_MANIFEST: &str = "manifest.json";

/// Write every tensor as `<name>.movt` plus a name→file manifest. Values are
/// narrowed to f32.
pub fn save_params(params: &AdapterParams, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| MovaError::io(dir, e))?;
    let mut tensors = Vec::new();
    for (name, t) in params.named() {
        let file = format!("{name}.movt");
        movt::save(t, dir.join(&file))?;
        tensors.push(ManifestEntry { name, file });
    }
    let manifest = ParamsManifest {
        experts: params.expert_names.clone(),
        tensors,
    };
    let path = dir.join(PARAMS_MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| MovaError::json("params manifest", e))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| MovaError::io(&path, e))
}

/// Load parameters saved by [`save_params`] into the structure implied by
/// `config` and `registry`.
pub fn load_params(
    dir: impl AsRef<Path>,
    config: &AdapterConfig,
    registry: &ExpertRegistry,
) -> Result<AdapterParams> {
    let dir = dir.as_ref();
    let path = dir.join(PARAMS_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| MovaError::io(&path, e))?;
    let manifest: ParamsManifest =
        serde_json::from_str(&text).map_err(|e| MovaError::json(path.display().to_string(), e))?;
    let mut params = init_params(config, registry, 0)?;
    if manifest.experts != params.expert_names {
        return Err(MovaError::Validation(format!(
            "saved parameters cover experts {:?}, registry has {:?}",
            manifest.experts, params.expert_names
        )));
    }
    let mut slots = params.named_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(MovaError::Validation(format!(
            "manifest lists {} tensors, configuration needs {}",
            manifest.tensors.len(),
            slots.len()
        )));
    }
    for entry in &manifest.tensors {
        let (_, slot) = slots
            .iter_mut()
            .find(|(n, _)| *n == entry.name)
            .ok_or_else(|| MovaError::Validation(format!("unexpected tensor `{}`", entry.name)))?;
        let t = movt::load(dir.join(&entry.file))?;
        if t.dims() != slot.dims() {
            return Err(MovaError::Shape(format!(
                "tensor `{}` has dims {:?}, expected {:?}",
                entry.name,
                t.dims(),
                slot.dims()
            )));
        }
        **slot = t;
    }
    drop(slots);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let reg = ExpertRegistry::desk_default();
        let cfg = AdapterConfig::desk();
        let a = init_params(&cfg, &reg, 7).unwrap();
        assert_eq!(a, init_params(&cfg, &reg, 7).unwrap());
        assert_ne!(a, init_params(&cfg, &reg, 8).unwrap());
        for (name, t) in a.named() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
        assert_eq!(a.blocks.len(), 3);
        assert!(a.blocks.iter().all(|b| b.extractors.len() == 7));
    }

    #[test]
    fn fan_in_scaling() {
        let mut rng = seed::rng(&[1]);
        let l = Linear::init(1024, 64, &mut rng);
        let d = l.weight.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
        let sd = var.sqrt();
        assert!((sd - 1.0 / 32.0).abs() < 0.2 / 32.0, "sd {sd}");
    }

    #[test]
    fn names_are_unique_and_stable() {
        let p = init_params(&AdapterConfig::desk(), &ExpertRegistry::desk_default(), 1).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.contains(&"block0.extract.pix2struct.key.weight".to_string()));
        assert!(names.contains(&"block2.gating.logits.bias".to_string()));
        assert!(names.contains(&"projector.fc2.weight".to_string()));
        assert_eq!(p.get("reduce1.fc1.weight").unwrap().dims(), &[8, 8]);
    }

    #[test]
    fn save_load_round_trip_of_f32_values() {
        let reg = ExpertRegistry::desk_default();
        let cfg = AdapterConfig::desk();
        let mut p = init_params(&cfg, &reg, 3).unwrap();
        for (_, t) in p.named_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        save_params(&p, dir.path()).unwrap();
        assert_eq!(load_params(dir.path(), &cfg, &reg).unwrap(), p);
    }

    #[test]
    fn mismatch_is_rejected() {
        let reg = ExpertRegistry::desk_default();
        let mut cfg = AdapterConfig::desk();
        cfg.hidden_dim = 4;
        assert!(init_params(&cfg, &reg, 0).is_err());
    }
}
