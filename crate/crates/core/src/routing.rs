//! Coarse-grained routing: the text protocol spoken with a router model,
//! coarse image tokens, and the pluggable strategies that stand in for it.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MovaError, Result};
use crate::experts::{letter_for, ExpertRegistry, Sample};
use crate::numerics::{FeatureMap, Tensor};
use crate::routing_data::{construct_routing_set, LossRecord, RoutingAnnotation};
use crate::seed;

pub const PROMPT_OPENING: &str = "As a router, your task is to choose several models from a model pool to assist you. Below is a brief overview of the expertise of each model in the pool:";
pub const PROMPT_QUESTION_HEADER: &str = "Here is user question:";
pub const PROMPT_FENCE: &str = "###";
pub const PROMPT_CLOSING: &str = "Identify and select models that will best enable you to accurately answer questions. Please consider the image contents, questions, and expertise of these models when you perform selection. Answer with the model's letter from the given choices directly.";

/// Default expert cap for routing sets.
pub const DEFAULT_CAP: usize = 3;
/// Default side of the coarse token grid (64 tokens).
pub const DEFAULT_COARSE_GRID: usize = 8;

/// Ordered, duplicate-free expert indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ExpertSelection(Vec<usize>);

impl ExpertSelection {
    pub fn new(indices: Vec<usize>, pool_size: usize) -> Result<Self> {
        let mut seen = vec![false; pool_size];
        for &i in &indices {
            if i >= pool_size {
                return Err(MovaError::Validation(format!(
                    "expert index {i} outside pool of {pool_size}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(MovaError::Validation(format!("expert index {i} selected twice")));
            }
        }
        Ok(Self(indices))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(pool_size: usize) -> Self {
        Self((0..pool_size).collect())
    }

    pub fn from_names<S: AsRef<str>>(names: &[S], registry: &ExpertRegistry) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                registry
                    .index_of(n.as_ref())
                    .ok_or_else(|| MovaError::UnknownExpertName(n.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(idx, registry.len())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.contains(&index)
    }

    pub fn names<'a>(&self, registry: &'a ExpertRegistry) -> Vec<&'a str> {
        self.0.iter().map(|&i| registry.experts[i].name.as_str()).collect()
    }

    pub fn letters(&self) -> Vec<String> {
        self.0.iter().map(|&i| letter_for(i).to_string()).collect()
    }

    /// Canonical response rendering, e.g. `A, D`.
    pub fn render(&self) -> String {
        self.letters().join(", ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Annotation,
    Oracle,
    Random,
    All,
    Scripted,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Annotation => "annotation",
            Strategy::Oracle => "oracle",
            Strategy::Random => "random",
            Strategy::All => "all",
            Strategy::Scripted => "scripted",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = MovaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "annotation" => Ok(Strategy::Annotation),
            "oracle" => Ok(Strategy::Oracle),
            "random" => Ok(Strategy::Random),
            "all" => Ok(Strategy::All),
            "scripted" | "scripted-response" => Ok(Strategy::Scripted),
            other => Err(MovaError::Usage(format!("unknown routing strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub selection: ExpertSelection,
    pub raw_response: String,
    pub strategy: Strategy,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecisionJson<'a> {
    pub experts: Vec<&'a str>,
    pub letters: Vec<String>,
    pub strategy: &'static str,
}

impl RoutingDecision {
    pub fn to_json<'a>(&self, registry: &'a ExpertRegistry) -> DecisionJson<'a> {
        DecisionJson {
            experts: self.selection.names(registry),
            letters: self.selection.letters(),
            strategy: self.strategy.name(),
        }
    }
}

/// Everything a strategy may consult besides the sample itself.
#[derive(Debug, Clone)]
pub struct RoutingContext {
    pub annotations: HashMap<String, RoutingAnnotation>,
    pub losses: HashMap<String, LossRecord>,
    pub seed: u64,
    pub cap: usize,
    pub response: Option<String>,
}

impl Default for RoutingContext {
    fn default() -> Self {
        Self {
            annotations: HashMap::new(),
            losses: HashMap::new(),
            seed: 0,
            cap: DEFAULT_CAP,
            response: None,
        }
    }
}

pub fn build_routing_prompt(registry: &ExpertRegistry, question: &str) -> Result<String> {
    if question.trim().is_empty() {
        return Err(MovaError::Validation("routing question is empty".into()));
    }
    let mut lines = vec![PROMPT_OPENING.to_string(), String::new()];
    for e in &registry.experts {
        lines.push(format!("{}. {}", e.letter, e.description));
    }
    lines.extend([
        String::new(),
        PROMPT_QUESTION_HEADER.to_string(),
        PROMPT_FENCE.to_string(),
        question.to_string(),
        PROMPT_FENCE.to_string(),
        String::new(),
        PROMPT_CLOSING.to_string(),
    ]);
    Ok(lines.join("\n"))
}

/// Recover the question between the `###` fences of a routing prompt. The
/// opening fence is the first `###` line after the question header, the
/// closing fence the last `###` line.
pub fn extract_prompt_question(prompt: &str) -> Option<String> {
    let lines: Vec<&str> = prompt.lines().collect();
    let header = lines.iter().position(|l| *l == PROMPT_QUESTION_HEADER)?;
    let open = header + 1;
    if lines.get(open) != Some(&PROMPT_FENCE) {
        return None;
    }
    let close = lines.iter().rposition(|l| *l == PROMPT_FENCE)?;
    (close > open).then(|| lines[open + 1..close].join("\n"))
}

/// Parse a router response such as `A, D` into a selection.
///
/// Tokens are split on commas and whitespace with trailing periods removed;
/// each must be a single uppercase letter. First occurrences win.
pub fn parse_routing_response(response: &str, registry: &ExpertRegistry) -> Result<ExpertSelection> {
    let mut out = Vec::new();
    for raw in response.split(|c: char| c == ',' || c.is_whitespace()) {
        let token = raw.trim_end_matches('.');
        if token.is_empty() {
            continue;
        }
        let mut chars = token.chars();
        let letter = match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_uppercase() => c,
            _ => return Err(MovaError::UnrecognizedToken(raw.to_string())),
        };
        let idx = registry
            .index_of_letter(letter)
            .ok_or_else(|| MovaError::UnknownExpert(letter.to_string()))?;
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    if out.is_empty() {
        return Err(MovaError::EmptyResponse);
    }
    ExpertSelection::new(out, registry.len())
}

fn tile_bounds(i: usize, extent: usize, grid: usize) -> (usize, usize) {
    (i * extent / grid, (i + 1) * extent / grid)
}

/// Adaptive average pooling to a `grid`×`grid` partition of the map,
/// flattened row-major into `grid²` tokens of C channels.
pub fn coarse_image_tokens(base: &FeatureMap, grid: usize) -> Result<Tensor> {
    let (c, h, w) = (base.channels(), base.height(), base.width());
    if grid == 0 || grid > h || grid > w {
        return Err(MovaError::Shape(format!(
            "coarse grid {grid} does not fit a {h}×{w} map"
        )));
    }
    let mut out = vec![0.0; grid * grid * c];
    for gy in 0..grid {
        let (y0, y1) = tile_bounds(gy, h, grid);
        for gx in 0..grid {
            let (x0, x1) = tile_bounds(gx, w, grid);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let token = gy * grid + gx;
            for ch in 0..c {
                let src = base.channel(ch);
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += src[y * w + x];
                    }
                }
                out[token * c + ch] = sum / count;
            }
        }
    }
    Tensor::new(vec![grid * grid, c], out)
}

pub fn route(
    strategy: Strategy,
    registry: &ExpertRegistry,
    sample: &Sample,
    context: &RoutingContext,
) -> Result<RoutingDecision> {
    let n = registry.len();
    let selection = match strategy {
        Strategy::Annotation => {
            let ann = context.annotations.get(&sample.sample_id).ok_or_else(|| {
                MovaError::MissingContext(format!("no annotation for sample `{}`", sample.sample_id))
            })?;
            ExpertSelection::from_names(&ann.experts, registry)?
        }
        Strategy::Oracle => {
            let rec = context.losses.get(&sample.sample_id).ok_or_else(|| {
                MovaError::MissingContext(format!("no losses for sample `{}`", sample.sample_id))
            })?;
            let ann = construct_routing_set(rec, registry, context.cap)?;
            ExpertSelection::from_names(&ann.experts, registry)?
        }
        Strategy::Random => {
            let cap = context.cap.clamp(1, n);
            let mut rng = seed::rng(&[context.seed, seed::hash_str(&sample.sample_id)]);
            let k = rng.random_range(1..=cap);
            let mut picked = index::sample(&mut rng, n, k).into_vec();
            picked.sort_unstable();
            ExpertSelection::new(picked, n)?
        }
        Strategy::All => ExpertSelection::all(n),
        Strategy::Scripted => {
            let response = context.response.as_deref().ok_or_else(|| {
                MovaError::MissingContext("scripted strategy needs a response".into())
            })?;
            let selection = parse_routing_response(response, registry)?;
            return Ok(RoutingDecision {
                selection,
                raw_response: response.to_string(),
                strategy,
            });
        }
    };
    Ok(RoutingDecision {
        raw_response: selection.render(),
        selection,
        strategy,
    })
}
