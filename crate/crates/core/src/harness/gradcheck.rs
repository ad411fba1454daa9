//! Finite-difference verification of the adapter's analytic gradients.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::adapter::model::{backward, forward, ExpertFeatures};
use crate::adapter::{encode_text, init_params, AdapterConfig, AdapterParams, TextToken};
use crate::error::{MovaError, Result};
use crate::experts::{generate_base_feature, generate_expert_feature, ExpertRegistry};
use crate::numerics::gradcheck::{finite_diff_check_at, GradCheckReport};
use crate::numerics::{FeatureMap, Tensor};
use crate::routing::ExpertSelection;
use crate::seed;

/// Mean squared error between the token-averaged output and `answer`, over
/// the first `answer.len()` output channels. Returns the loss and its
/// gradient w.r.t. the output tokens.
pub fn pooled_mse(tokens: &Tensor, answer: &[f64]) -> (f64, Tensor) {
    let (t, d) = (tokens.rows(), tokens.cols());
    let a = answer.len().min(d);
    let mut pooled = vec![0.0; a];
    for row in tokens.data().chunks(d) {
        for (p, v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    let mut loss = 0.0;
    let mut diff = vec![0.0; a];
    for k in 0..a {
        pooled[k] /= t as f64;
        diff[k] = pooled[k] - answer[k];
        loss += diff[k] * diff[k];
    }
    loss /= a as f64;
    let mut grad = Tensor::zeros(&[t, d]);
    let scale = 2.0 / (a as f64 * t as f64);
    for row in grad.data_mut().chunks_mut(d) {
        for k in 0..a {
            row[k] = scale * diff[k];
        }
    }
    (loss, grad)
}

/// Which parameter groups a check or an optimizer touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    Gating,
    GatingExtractor,
    FullAdapter,
    /// Gating, extractor projections and projector.
    Checked,
}

impl Scope {
    pub fn includes(&self, name: &str) -> bool {
        let gating = name.contains(".gating.");
        let extract = name.contains(".extract.");
        let projector = name.starts_with("projector.");
        match self {
            Scope::Gating => gating,
            Scope::GatingExtractor => gating || extract,
            Scope::FullAdapter => true,
            Scope::Checked => gating || extract || projector,
        }
    }
}

/// A seeded adapter instance with fixed inputs and a scalar objective.
#[derive(Debug, Clone)]
pub struct GradInstance {
    pub config: AdapterConfig,
    pub params: AdapterParams,
    pub base: FeatureMap,
    pub features: ExpertFeatures,
    pub selection: ExpertSelection,
    pub text: TextToken,
    pub answer: Vec<f64>,
}

impl GradInstance {
    /// Desk-scale instance: default registry, experts A and D routed, the
    /// second one planted with the answer.
    pub fn desk(seed_value: u64) -> Result<Self> {
        let registry = ExpertRegistry::desk_default();
        let config = AdapterConfig {
            seed: seed_value,
            ..AdapterConfig::desk()
        };
        let params = init_params(&config, &registry, seed_value)?;
        let image_seed = seed::derive(&[seed_value, 17]);
        let answer = vec![0.8, -0.4, 1.2, -1.0];
        let selection = ExpertSelection::new(vec![0, 3], registry.len())?;
        let mut features = ExpertFeatures::new();
        for &j in selection.indices() {
            features.insert(
                j,
                generate_expert_feature(&registry.experts[j], image_seed, j == 3, &answer)?,
            );
        }
        Ok(Self {
            base: generate_base_feature(&registry, image_seed),
            text: encode_text("What does the text on the sign say?", config.text_dim),
            config,
            params,
            features,
            selection,
            answer,
        })
    }

    pub fn loss_with(&self, params: &AdapterParams) -> Result<f64> {
        let (out, _) = forward(
            &self.base,
            &self.features,
            &self.selection,
            &self.text,
            params,
            &self.config,
            false,
        )?;
        Ok(pooled_mse(&out.tokens, &self.answer).0)
    }

    pub fn loss_and_grad(&self) -> Result<(f64, AdapterParams)> {
        let (out, trace) = forward(
            &self.base,
            &self.features,
            &self.selection,
            &self.text,
            &self.params,
            &self.config,
            true,
        )?;
        let (loss, dtokens) = pooled_mse(&out.tokens, &self.answer);
        let grad = backward(&trace.expect("trace requested"), &dtokens, &self.params)?;
        Ok((loss, grad))
    }

    /// Check every tensor in `scope`, probing at most `max_per_tensor`
    /// seeded entries of each (all entries when `None`). Tensors that do not
    /// influence the objective (routed-out extractors) are skipped.
    pub fn check(
        &self,
        scope: Scope,
        eps: f64,
        max_per_tensor: Option<usize>,
    ) -> Result<Vec<GradCheckReport>> {
        let (_, grad) = self.loss_and_grad()?;
        let routed: Vec<&str> = self
            .selection
            .indices()
            .iter()
            .map(|&j| self.params.expert_names[j].as_str())
            .collect();
        let mut reports = Vec::new();
        for ((name, value), (_, analytic)) in self.params.named().into_iter().zip(grad.named()) {
            if !scope.includes(&name) {
                continue;
            }
            if let Some(rest) = name.split(".extract.").nth(1) {
                let expert = rest.split('.').next().unwrap_or_default();
                if !routed.contains(&expert) {
                    continue;
                }
            }
            let indices: Vec<usize> = match max_per_tensor {
                Some(m) if m < value.len() => {
                    let mut rng = seed::rng(&[self.config.seed, seed::hash_str(&name)]);
                    let mut v = index::sample(&mut rng, value.len(), m).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..value.len()).collect(),
            };
            let mut failure = None;
            let report = finite_diff_check_at(
                &name,
                value,
                |probe| {
                    let mut p = self.params.clone();
                    *p.get_mut(&name).expect("known tensor") = probe.clone();
                    match self.loss_with(&p) {
                        Ok(l) => l,
                        Err(e) => {
                            failure = Some(e);
                            f64::NAN
                        }
                    }
                },
                analytic,
                eps,
                &indices,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            reports.push(report?);
        }
        Ok(reports)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub eps: f64,
    pub tol: f64,
    pub max_rel_error: f64,
    pub compared: usize,
    pub worst: String,
    pub passed: bool,
    pub groups: Vec<GradCheckReport>,
}

pub fn summarize(reports: Vec<GradCheckReport>, eps: f64, tol: f64) -> GradCheckSummary {
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|r| r.op.clone())
        .unwrap_or_default();
    let merged = GradCheckReport::merge("all", &reports);
    GradCheckSummary {
        eps,
        tol,
        max_rel_error: merged.max_rel_error,
        compared: merged.compared,
        worst,
        passed: merged.max_rel_error < tol,
        groups: reports,
    }
}

/// Fail with a gradient-check error naming the worst tensor.
pub fn require_pass(summary: &GradCheckSummary) -> Result<()> {
    if summary.passed {
        Ok(())
    } else {
        Err(MovaError::GradCheck {
            param: summary.worst.clone(),
            max_rel_error: summary.max_rel_error,
            tol: summary.tol,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooled_mse_gradient() {
        let tokens = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 3.0, 0.0, 1.0]).unwrap();
        let (loss, g) = pooled_mse(&tokens, &[1.0, 0.0]);
        // pooled = [2, 1]; diffs [1, 1]
        assert!((loss - 1.0).abs() < 1e-15);
        assert_eq!(g.data(), &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn scopes() {
        assert!(Scope::Gating.includes("block0.gating.hidden.weight"));
        assert!(!Scope::Gating.includes("block0.extract.sam.key.weight"));
        assert!(Scope::Checked.includes("projector.fc1.bias"));
        assert!(!Scope::Checked.includes("block1.transformer.ffn_in.weight"));
        assert!(Scope::FullAdapter.includes("reduce0.fc1.weight"));
    }

    #[test]
    fn sampled_full_adapter_gradients_agree() {
        let inst = GradInstance::desk(5).unwrap();
        let reports = inst.check(Scope::FullAdapter, 1e-5, Some(6)).unwrap();
        let s = summarize(reports, 1e-5, 1e-4);
        assert!(s.passed, "worst {} at {:e}", s.worst, s.max_rel_error);
    }
}
