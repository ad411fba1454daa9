//! Executable invariants of every module, run with fixed seeds.

use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::adapter::params::{CrossAttention, GatingNet};
use crate::adapter::{
    adapter_forward, encode_text, extract_expert_knowledge, fuse, gate_weights, init_params,
    AdapterConfig, ExpertFeatures, GateWeights, GatingInput, GatingMode, TextToken,
};
use crate::error::Result;
use crate::experts::{generate_base_feature, generate_expert_feature, ExpertRegistry};
use crate::harness::ablation::{run_ablation_on, AblationMode};
use crate::harness::gradcheck::{summarize, GradInstance, Scope};
use crate::harness::train::{train_on_corpus, ToyTrainConfig};
use crate::numerics::{
    bilinear_interpolate, global_avg_pool, matmul, scaled_dot_attention, softmax, FeatureMap,
    Tensor,
};
use crate::routing::{
    build_routing_prompt, coarse_image_tokens, extract_prompt_question, parse_routing_response,
    route, ExpertSelection, RoutingContext, Strategy,
};
use crate::routing_data::{select_useful_experts, synthesize_corpus, LinearProbe, LossRecord, SyntheticConfig};
use crate::seed;

/// Gate evaluation under test: raw weights for the selected experts.
pub type GateFn =
    fn(&GatingInput, &ExpertSelection, &GatingNet, GatingMode) -> Result<Vec<f64>>;

pub fn library_gate(
    input: &GatingInput,
    selection: &ExpertSelection,
    net: &GatingNet,
    mode: GatingMode,
) -> Result<Vec<f64>> {
    gate_weights(input, selection, net, mode).map(|w| w.values().to_vec())
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupResult {
    pub group: String,
    pub passed: usize,
    pub failed: usize,
    /// First few failure descriptions.
    pub failures: Vec<String>,
}

impl GroupResult {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

impl fmt::Display for GroupResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {} {}/{} checks",
            self.group,
            if self.ok() { "pass" } else { "FAIL" },
            self.passed,
            self.passed + self.failed
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub groups: Vec<GroupResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupResult::ok)
    }

    pub fn group(&self, name: &str) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.group == name)
    }
}

const MAX_REPORTED: usize = 5;

struct Group {
    result: GroupResult,
}

impl Group {
    fn new(name: &str) -> Self {
        Self {
            result: GroupResult {
                group: name.to_string(),
                passed: 0,
                failed: 0,
                failures: Vec::new(),
            },
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if ok {
            self.result.passed += 1;
        } else {
            self.result.failed += 1;
            if self.result.failures.len() < MAX_REPORTED {
                self.result.failures.push(what());
            }
        }
    }

    /// Record an error from the code under test as a failure.
    fn check_result<T>(&mut self, r: Result<T>, what: &str) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.check(false, || format!("{what}: {e}"));
                None
            }
        }
    }

    fn finish(self) -> GroupResult {
        self.result
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(c, h, w, normal_vec(rng, c * h * w, 1.0)).expect("valid extents")
}

fn random_selection(rng: &mut ChaCha8Rng, n: usize) -> ExpertSelection {
    let k = rng.random_range(1..=n);
    let picked = index::sample(rng, n, k).into_vec();
    ExpertSelection::new(picked, n).expect("distinct indices")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// The suite with an injectable gate for mutation testing.
#[derive(Clone, Copy)]
pub struct PropertySuite {
    pub seed: u64,
    pub gate: GateFn,
}

impl Default for PropertySuite {
    fn default() -> Self {
        Self {
            seed: 2024,
            gate: library_gate,
        }
    }
}

impl PropertySuite {
    fn rng(&self, group: &str) -> ChaCha8Rng {
        seed::rng(&[self.seed, seed::hash_str(group)])
    }

    pub fn run(&self) -> SuiteReport {
        SuiteReport {
            groups: vec![
                self.numerics(),
                self.experts(),
                self.gate_simplex(),
                self.adapter(),
                self.routing(),
                self.routing_data(),
                self.harness(),
            ],
        }
    }

    fn numerics(&self) -> GroupResult {
        let mut g = Group::new("numerics");
        let mut rng = self.rng("numerics");

        for case in 0..200 {
            let n = rng.random_range(1..12);
            let v = normal_vec(&mut rng, n, 5.0);
            let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
            let keep = rng.random_range(0..n);
            mask[keep] = true;
            if let Some(p) = g.check_result(softmax(&v, Some(&mask)), "softmax") {
                let sum: f64 = p.iter().sum();
                let in_range = p.iter().all(|x| (0.0..=1.0).contains(x));
                let masked_zero = p.iter().zip(&mask).all(|(x, &m)| m || *x == 0.0);
                g.check((sum - 1.0).abs() <= 1e-12 && in_range && masked_zero, || {
                    format!("softmax case {case}: sum {sum}")
                });
            }
        }

        for case in 0..50 {
            let (c, h, w) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
            let f = random_map(&mut rng, c, h, w);
            if let Some(same) = g.check_result(bilinear_interpolate(&f, h, w), "interpolate") {
                g.check(bitwise_eq(same.data(), f.data()), || {
                    format!("interpolation case {case} is not an exact copy")
                });
            }
            let (oh, ow) = (rng.random_range(1..9), rng.random_range(1..9));
            if let Some(out) = g.check_result(bilinear_interpolate(&f, oh, ow), "interpolate") {
                g.check(interpolation_within_neighbours(&f, &out), || {
                    format!("interpolation case {case} leaves its source cell range")
                });
            }
        }

        for case in 0..50 {
            let (nq, nk, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5));
            let q = Tensor::new(vec![nq, d], normal_vec(&mut rng, nq * d, 2.0)).unwrap();
            let k = Tensor::new(vec![nk, d], normal_vec(&mut rng, nk * d, 2.0)).unwrap();
            let v = Tensor::new(vec![nk, d], normal_vec(&mut rng, nk * d, 2.0)).unwrap();
            if let Some(out) = g.check_result(scaled_dot_attention(&q, &k, &v), "attention") {
                let hull = (0..nq).all(|r| {
                    (0..d).all(|c| {
                        let col = (0..nk).map(|t| v.at2(t, c));
                        let lo = col.clone().fold(f64::INFINITY, f64::min);
                        let hi = col.fold(f64::NEG_INFINITY, f64::max);
                        let x = out.at2(r, c);
                        x >= lo - 1e-12 && x <= hi + 1e-12
                    })
                });
                g.check(hull, || format!("attention case {case} leaves the value hull"));
                let again = scaled_dot_attention(&q, &k, &v).unwrap();
                g.check(bitwise_eq(out.data(), again.data()), || {
                    format!("attention case {case} is not reproducible")
                });
            }
        }

        for case in 0..100 {
            let (m, k, n) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
            let a = Tensor::new(vec![m, k], normal_vec(&mut rng, m * k, 1.0)).unwrap();
            let b = Tensor::new(vec![k, n], normal_vec(&mut rng, k * n, 1.0)).unwrap();
            let mut naive = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for t in 0..k {
                        naive[i * n + j] += a.at2(i, t) * b.at2(t, j);
                    }
                }
            }
            if let Some(c) = g.check_result(matmul(&a, &b), "matmul") {
                g.check(max_abs_diff(c.data(), &naive) < 1e-12, || {
                    format!("matmul case {case} differs from the triple loop")
                });
                let again = matmul(&a, &b).unwrap();
                g.check(bitwise_eq(c.data(), again.data()), || {
                    format!("matmul case {case} is not reproducible")
                });
            }
        }
        g.finish()
    }

    fn experts(&self) -> GroupResult {
        let mut g = Group::new("experts");
        let registry = ExpertRegistry::desk_default();

        for image_seed in 0..10u64 {
            let a = generate_base_feature(&registry, image_seed);
            let b = generate_base_feature(&registry, image_seed);
            g.check(bitwise_eq(a.data(), b.data()), || {
                format!("base feature for seed {image_seed} not reproducible")
            });
            for spec in &registry.experts {
                let x = generate_expert_feature(spec, image_seed, true, &[0.5, -1.0]);
                let y = generate_expert_feature(spec, image_seed, true, &[0.5, -1.0]);
                let same = matches!((&x, &y), (Ok(x), Ok(y)) if bitwise_eq(x.data(), y.data()));
                g.check(same, || format!("feature of `{}` not reproducible", spec.name));
            }
        }

        let spec = &registry.experts[3];
        let mut rng = self.rng("experts");
        let answer_dim = 4;
        let mut planted = Vec::new();
        let mut unplanted = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..80 {
            let image_seed: u64 = rng.random();
            let answer = normal_vec(&mut rng, answer_dim, 1.0);
            let p = generate_expert_feature(spec, image_seed, true, &answer).expect("fits");
            let u = generate_expert_feature(spec, image_seed, false, &answer).expect("fits");
            planted.push(global_avg_pool(&p)[..answer_dim].to_vec());
            unplanted.push(global_avg_pool(&u)[..answer_dim].to_vec());
            targets.push(answer);
        }
        if let Some(probe) =
            g.check_result(LinearProbe::fit(&planted[..64], &targets[..64]), "probe fit")
        {
            let held = 64..80;
            let planted_res: f64 = held
                .clone()
                .map(|i| probe.residual(&planted[i], &targets[i]))
                .sum::<f64>()
                / 16.0;
            let unplanted_res: f64 = held
                .map(|i| probe.residual(&unplanted[i], &targets[i]))
                .sum::<f64>()
                / 16.0;
            g.check(planted_res < 1e-6, || {
                format!("planted probe residual {planted_res:e} is not below 1e-6")
            });
            g.check(unplanted_res >= 10.0 * planted_res.max(f64::MIN_POSITIVE), || {
                format!("unplanted residual {unplanted_res:e} vs planted {planted_res:e}")
            });
        }

        let json = serde_json::to_string(&registry).expect("registry serializes");
        let back: std::result::Result<ExpertRegistry, _> = serde_json::from_str(&json);
        g.check(back.ok().as_ref() == Some(&registry), || {
            "registry JSON round trip changed the registry".into()
        });
        g.finish()
    }

    fn gate_simplex(&self) -> GroupResult {
        let mut g = Group::new("gate-simplex");
        let mut rng = self.rng("gate-simplex");
        let registry = ExpertRegistry::desk_default();
        let config = AdapterConfig::desk();
        let params = init_params(&config, &registry, self.seed).expect("desk config is valid");
        let n = registry.len();

        for case in 0..1000 {
            let net = &params.blocks[case % config.num_blocks].gating;
            let input = GatingInput {
                visual_token: normal_vec(&mut rng, config.hidden_dim, 2.0),
                text_token: TextToken::new(normal_vec(&mut rng, config.text_dim, 1.0)).unwrap(),
            };
            let selection = random_selection(&mut rng, n);
            let Some(w) = g.check_result(
                (self.gate)(&input, &selection, net, GatingMode::Dynamic),
                "gate",
            ) else {
                continue;
            };
            let sum: f64 = w.iter().sum();
            let k = selection.len();
            let interior = if k == 1 {
                w == [1.0]
            } else {
                w.iter().all(|&x| x > 0.0 && x < 1.0)
            };
            g.check(w.len() == k && (sum - 1.0).abs() <= 1e-9 && interior, || {
                format!("gate case {case}: K={k} weights {w:?} sum {sum}")
            });
        }

        let logits = normal_vec(&mut rng, n, 3.0);
        for bits in 1u32..(1 << n) {
            let subset: Vec<usize> = (0..n).filter(|j| bits & (1 << j) != 0).collect();
            let mask: Vec<bool> = (0..n).map(|j| bits & (1 << j) != 0).collect();
            let sub: Vec<f64> = subset.iter().map(|&j| logits[j]).collect();
            match (softmax(&logits, Some(&mask)), softmax(&sub, None)) {
                (Ok(full), Ok(direct)) => {
                    let picked: Vec<f64> = subset.iter().map(|&j| full[j]).collect();
                    g.check(max_abs_diff(&picked, &direct) <= 1e-12, || {
                        format!("subset {subset:?}: masked and direct softmax differ")
                    });
                }
                _ => g.check(false, || format!("subset {subset:?}: softmax failed")),
            }
        }
        g.finish()
    }

    fn adapter(&self) -> GroupResult {
        let mut g = Group::new("adapter");
        let mut rng = self.rng("adapter");
        let registry = ExpertRegistry::desk_default();
        let config = AdapterConfig::desk();
        let params = init_params(&config, &registry, self.seed).expect("desk config is valid");
        let n = registry.len();
        let block = &params.blocks[0];

        for case in 0..20 {
            let image_seed: u64 = rng.random();
            let x = generate_base_feature(&registry, image_seed);
            let selection = random_selection(&mut rng, n);
            if selection.len() < 2 {
                continue;
            }
            let mut perm = selection.indices().to_vec();
            perm.reverse();
            let permuted = ExpertSelection::new(perm, n).unwrap();
            let input = GatingInput::from_feature(&x, encode_text("read the chart values", config.text_dim));
            let run = |sel: &ExpertSelection| -> Result<(Vec<FeatureMap>, GateWeights, FeatureMap)> {
                let maps = sel
                    .indices()
                    .iter()
                    .map(|&j| {
                        let f = generate_expert_feature(&registry.experts[j], image_seed, false, &[])?;
                        extract_expert_knowledge(&x, &f, &block.extractors[j], config.heads)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let w = gate_weights(&input, sel, &block.gating, GatingMode::Dynamic)?;
                let fused = fuse(&maps, &w)?;
                Ok((maps, w, fused))
            };
            match (run(&selection), run(&permuted)) {
                (Ok((m1, w1, f1)), Ok((m2, w2, f2))) => {
                    let k = m1.len();
                    let maps_ok = (0..k).all(|i| bitwise_eq(m1[i].data(), m2[k - 1 - i].data()));
                    let weights_ok = (0..k)
                        .all(|i| (w1.values()[i] - w2.values()[k - 1 - i]).abs() <= 1e-12);
                    g.check(maps_ok && weights_ok, || {
                        format!("case {case}: permuted selection does not permute outputs")
                    });
                    g.check(max_abs_diff(f1.data(), f2.data()) <= 1e-12, || {
                        format!("case {case}: fused map depends on selection order")
                    });
                }
                _ => g.check(false, || format!("case {case}: adapter step failed")),
            }
        }

        for case in 0..6 {
            let image_seed: u64 = rng.random();
            let base = generate_base_feature(&registry, image_seed);
            let selection = ExpertSelection::new(vec![case % n, (case + 2) % n], n).unwrap();
            let mut features = ExpertFeatures::new();
            for (j, spec) in registry.experts.iter().enumerate() {
                features.insert(j, generate_expert_feature(spec, image_seed, false, &[]).unwrap());
            }
            let question = "What does the text on the sign say?";
            let before = adapter_forward(&base, &features, &selection, question, &params, &config);
            let outsider = (case + 4) % n;
            let spec = &registry.experts[outsider];
            features.insert(
                outsider,
                random_map(&mut rng, spec.channels, spec.height, spec.width),
            );
            let after = adapter_forward(&base, &features, &selection, question, &params, &config);
            let same = matches!((&before, &after), (Ok(a), Ok(b)) if bitwise_eq(a.data(), b.data()));
            g.check(same, || format!("case {case}: routed-out expert changed the output"));
        }

        let base = generate_base_feature(&registry, 11);
        let none = ExpertSelection::empty();
        let empty = ExpertFeatures::new();
        let a = adapter_forward(&base, &empty, &none, "locate the red sign", &params, &config);
        let b = adapter_forward(&base, &empty, &none, "read the chart values", &params, &config);
        let same = matches!((&a, &b), (Ok(a), Ok(b)) if bitwise_eq(a.data(), b.data()));
        g.check(same, || "empty-selection output depends on the question".into());

        for (j, spec) in registry.experts.iter().enumerate() {
            let mut ext: CrossAttention = block.extractors[j].clone();
            ext.output.weight.fill(0.0);
            if let Some(b) = ext.output.bias.as_mut() {
                b.fill(0.0);
            }
            let x = random_map(&mut rng, config.hidden_dim, 8, 8);
            let f = generate_expert_feature(spec, 3, false, &[]).unwrap();
            if let Some(y) = g.check_result(extract_expert_knowledge(&x, &f, &ext, config.heads), "extract") {
                g.check(bitwise_eq(y.data(), x.data()), || {
                    format!("zeroed output projection of `{}` is not the identity", spec.name)
                });
            }
        }

        if let Some(inst) = g.check_result(GradInstance::desk(self.seed), "gradient instance") {
            if let Some(reports) = g.check_result(inst.check(Scope::Checked, 1e-5, Some(3)), "gradcheck") {
                let s = summarize(reports, 1e-5, 1e-4);
                g.check(s.passed, || {
                    format!("gradient check: {} at {:e}", s.worst, s.max_rel_error)
                });
            }
        }
        g.finish()
    }

    fn routing(&self) -> GroupResult {
        let mut g = Group::new("routing");
        let mut rng = self.rng("routing");
        let registry = ExpertRegistry::desk_default();
        let n = registry.len();

        for bits in 1u32..(1 << n) {
            let subset: Vec<usize> = (0..n).filter(|j| bits & (1 << j) != 0).collect();
            let text = subset
                .iter()
                .map(|&j| registry.experts[j].letter.to_string())
                .collect::<Vec<_>>()
                .join(", ");
            let parsed = parse_routing_response(&text, &registry);
            g.check(parsed.as_ref().ok().map(|s| s.indices()) == Some(&subset[..]), || {
                format!("`{text}` did not parse back to {subset:?}")
            });
        }

        let seps = [", ", " ", ",", ". ", " ,  "];
        for case in 0..200 {
            let len = rng.random_range(1..6);
            let mut text = String::new();
            for i in 0..len {
                if i > 0 {
                    text.push_str(seps[rng.random_range(0..seps.len())]);
                }
                text.push(registry.experts[rng.random_range(0..n)].letter);
            }
            if rng.random_bool(0.5) {
                text.push('.');
            }
            let once = parse_routing_response(&text, &registry).map(|s| s.render());
            let twice = once
                .as_ref()
                .map_err(|_| ())
                .and_then(|r| parse_routing_response(r, &registry).map(|s| s.render()).map_err(|_| ()));
            g.check(once.is_ok() && once.as_ref().ok() == twice.as_ref().ok(), || {
                format!("case {case}: `{text}` does not render idempotently")
            });
        }

        let q = "Which ### line\n###\nis the question?";
        let recovered = build_routing_prompt(&registry, q)
            .ok()
            .and_then(|p| extract_prompt_question(&p));
        g.check(recovered.as_deref() == Some(q), || {
            "question with fences did not survive the prompt".into()
        });

        for case in 0..20 {
            let grid = [1, 2, 4, 8][case % 4];
            let mult = rng.random_range(1..4);
            let wmult = rng.random_range(1..4);
            let f = random_map(&mut rng, 3, grid * mult, grid * wmult);
            if let Some(t) = g.check_result(coarse_image_tokens(&f, grid), "coarse tokens") {
                let tok_mean = t.data().iter().sum::<f64>() / t.len() as f64;
                let map_mean = f.data().iter().sum::<f64>() / f.data().len() as f64;
                g.check((tok_mean - map_mean).abs() <= 1e-9 && t.rows() == grid * grid, || {
                    format!("case {case}: coarse tokens change the global mean")
                });
            }
        }

        let context = RoutingContext {
            seed: self.seed,
            cap: 3,
            ..RoutingContext::default()
        };
        let mut over_cap = 0usize;
        for i in 0..10_000 {
            let sample = crate::experts::Sample {
                sample_id: format!("r{i}"),
                image_seed: i as u64,
                question: "q".into(),
                answer_vector: Vec::new(),
                planted_expert: None,
            };
            match route(Strategy::Random, &registry, &sample, &context) {
                Ok(d) if (1..=3).contains(&d.selection.len()) => {}
                _ => over_cap += 1,
            }
        }
        g.check(over_cap == 0, || format!("{over_cap} random draws broke the cap"));
        g.finish()
    }

    fn routing_data(&self) -> GroupResult {
        let mut g = Group::new("routing-data");
        let mut rng = self.rng("routing-data");
        let n = 7;
        let grid = [0.5, 1.0, 1.5, 2.0, 2.5];
        for case in 0..10_000 {
            let discrete = rng.random_bool(0.3);
            let draw = |rng: &mut ChaCha8Rng| {
                if discrete {
                    grid[rng.random_range(0..grid.len())]
                } else {
                    rng.random_range(0.0..3.0)
                }
            };
            let record = LossRecord {
                sample_id: format!("c{case}"),
                base_loss: draw(&mut rng),
                expert_losses: (0..n).map(|_| draw(&mut rng)).collect(),
            };
            let cap = rng.random_range(1..=4);
            let got = select_useful_experts(&record, cap);

            let mut oracle: Vec<(f64, usize)> = Vec::new();
            for j in 0..n {
                if record.expert_losses[j] < record.base_loss {
                    oracle.push((record.expert_losses[j], j));
                }
            }
            oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = oracle.iter().take(cap).map(|&(_, j)| j).collect();
            g.check(got == want, || format!("record {case}: {got:?} != {want:?}"));

            let c = rng.random_range(0.1..10.0);
            let scaled = LossRecord {
                base_loss: record.base_loss * c,
                expert_losses: record.expert_losses.iter().map(|l| l * c).collect(),
                ..record.clone()
            };
            let mut a = got.clone();
            let mut b = select_useful_experts(&scaled, cap);
            a.sort_unstable();
            b.sort_unstable();
            g.check(a == b, || format!("record {case}: membership changed under scaling by {c}"));

            if let Some(&j) = got.first() {
                let pick = got[rng.random_range(0..got.len())];
                let mut lowered = record.clone();
                lowered.expert_losses[pick] *= rng.random_range(0.0..1.0);
                g.check(select_useful_experts(&lowered, cap).contains(&pick), || {
                    format!("record {case}: lowering expert {pick} removed it (first {j})")
                });
            }
        }
        g.finish()
    }

    fn harness(&self) -> GroupResult {
        let mut g = Group::new("harness");
        let registry = ExpertRegistry::desk_default();
        let cfg = SyntheticConfig {
            num_samples: 8,
            seed: self.seed,
            noise: 0.1,
            ..SyntheticConfig::default()
        };
        let dump = |c: &crate::routing_data::Corpus| {
            serde_json::to_string(&(&c.samples, &c.losses, &c.truth)).unwrap_or_default()
        };
        let corpus = g.check_result(synthesize_corpus(&registry, &cfg), "corpus");
        let again = g.check_result(synthesize_corpus(&registry, &cfg), "corpus");
        if let (Some(a), Some(b)) = (&corpus, &again) {
            g.check(dump(a) == dump(b), || "corpus generation is not reproducible".into());
        }
        let Some(corpus) = corpus else {
            return g.finish();
        };

        let registry_before = serde_json::to_string(&registry).unwrap_or_default();
        let features_before: Vec<FeatureMap> = registry
            .experts
            .iter()
            .map(|s| generate_expert_feature(s, 5, false, &[]).unwrap())
            .collect();
        let train = ToyTrainConfig {
            steps: 2,
            batch_size: 2,
            seed: self.seed,
            ..ToyTrainConfig::new("")
        };
        g.check_result(train_on_corpus(&train, &registry, &corpus), "toy training");
        g.check(serde_json::to_string(&registry).unwrap_or_default() == registry_before, || {
            "training changed the registry".into()
        });
        let unchanged = registry.experts.iter().zip(&features_before).all(|(s, f)| {
            bitwise_eq(generate_expert_feature(s, 5, false, &[]).unwrap().data(), f.data())
        });
        g.check(unchanged, || "training changed an expert generator".into());

        let modes = [AblationMode::Dynamic, AblationMode::UniformGating, AblationMode::RandomRouting];
        if let Some(report) = g.check_result(run_ablation_on(&modes, &train, &registry, &corpus), "ablation") {
            let first = &report.entries[0].sample_stream;
            g.check(report.entries.iter().all(|e| &e.sample_stream == first), || {
                "ablation arms consumed different sample streams".into()
            });
        }
        g.finish()
    }
}

/// Check that each interpolated value lies within the range of the source
/// cell it was sampled from.
fn interpolation_within_neighbours(src: &FeatureMap, out: &FeatureMap) -> bool {
    let (h, w) = (src.height(), src.width());
    let (oh, ow) = (out.height(), out.width());
    let bracket = |p: usize, n_in: usize, n_out: usize| -> (usize, usize) {
        if n_out == 1 || n_in == 1 {
            return (0, 0);
        }
        let s = p as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (s.floor() as usize).min(n_in - 1);
        (lo, (lo + 1).min(n_in - 1))
    };
    for c in 0..src.channels() {
        for y in 0..oh {
            let (y0, y1) = bracket(y, h, oh);
            for x in 0..ow {
                let (x0, x1) = bracket(x, w, ow);
                let vals = [src.get(c, y0, x0), src.get(c, y0, x1), src.get(c, y1, x0), src.get(c, y1, x1)];
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = out.get(c, y, x);
                if v < lo || v > hi {
                    return false;
                }
            }
        }
    }
    true
}

pub fn run_property_suite() -> SuiteReport {
    PropertySuite::default().run()
}
