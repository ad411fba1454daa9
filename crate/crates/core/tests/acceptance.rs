//! Acceptance criteria. Each criterion runs in isolation and prints one
//! PASS/FAIL line; the test fails if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use mova::adapter::{
    adapter_forward, encode_text, extract_expert_knowledge, fuse, gate_weights, init_params,
    AdapterConfig, ExpertFeatures, GateWeights, GatingInput, GatingMode, TextToken,
};
use mova::experts::{generate_base_feature, generate_expert_feature, ExpertRegistry, Geometry};
use mova::harness::ablation::{run_ablation_on, AblationMode};
use mova::harness::gradcheck::{summarize, GradInstance, Scope};
use mova::harness::train::ToyTrainConfig;
use mova::numerics::{bilinear_interpolate, movt, softmax, FeatureMap, Tensor};
use mova::routing::{build_routing_prompt, coarse_image_tokens, parse_routing_response, ExpertSelection};
use mova::routing_data::{
    construct_routing_set, read_jsonl, score_routing_accuracy, synthesize_corpus, write_jsonl,
    GroundTruth, LossRecord, RoutingAnnotation, SyntheticConfig,
};

/// Noise scale at which routing recovery must stay at or above 0.9.
const RECOVERY_NOISE: f64 = 0.2;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xACCE_0000 + tag)
}

fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    use rand_distr::StandardNormal;
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap::new(c, h, w, normal(rng, c * h * w, 1.0)).unwrap()
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn desk() -> (ExpertRegistry, AdapterConfig) {
    (ExpertRegistry::desk_default(), AdapterConfig::desk())
}

fn all_features(registry: &ExpertRegistry, image_seed: u64) -> ExpertFeatures {
    registry
        .experts
        .iter()
        .enumerate()
        .map(|(j, s)| (j, generate_expert_feature(s, image_seed, false, &[]).unwrap()))
        .collect()
}

fn structural_constants() -> String {
    let started = Instant::now();
    let registry =
        ExpertRegistry::with_geometry(Geometry::new(8, 48, 48), Geometry::new(16, 12, 12));
    let config = AdapterConfig::desk();
    let params = init_params(&config, &registry, 42).unwrap();
    let base = generate_base_feature(&registry, 1);
    assert_eq!(base.positions(), 2304);
    let selection = ExpertSelection::new(vec![0, 3], 7).unwrap();
    let out = adapter_forward(
        &base,
        &all_features(&registry, 1),
        &selection,
        "Where is the red sign and what does it say?",
        &params,
        &config,
    )
    .unwrap();
    assert_eq!(out.dims(), &[576, config.llm_dim]);
    let coarse = coarse_image_tokens(&base, 8).unwrap();
    assert_eq!(coarse.dims(), &[64, 8]);
    assert_eq!(AdapterConfig::desk().num_blocks, 3);
    assert_eq!(AdapterConfig::reference().num_blocks, 3);
    assert_eq!(AdapterConfig::reference().hidden_dim, 1024);
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    format!("2304 positions -> 576 tokens, 64 coarse tokens, 3 blocks in {elapsed:.2?}")
}

fn routing_protocol() -> String {
    let registry = ExpertRegistry::desk_default();
    let prompt =
        build_routing_prompt(&registry, "Where is the red sign and what does it say?").unwrap();
    let lines: Vec<&str> = prompt.lines().collect();
    let opening = "As a router, your task is to choose several models from a model pool to assist you. Below is a brief overview of the expertise of each model in the pool:";
    let closing = "Identify and select models that will best enable you to accurately answer questions. Please consider the image contents, questions, and expertise of these models when you perform selection. Answer with the model's letter from the given choices directly.";
    assert_eq!(lines[0], opening);
    assert_eq!(*lines.last().unwrap(), closing);
    for letter in 'A'..='G' {
        let prefix = format!("{letter}. ");
        assert_eq!(lines.iter().filter(|l| l.starts_with(&prefix)).count(), 1, "{letter}");
    }
    let header = lines.iter().position(|l| *l == "Here is user question:").unwrap();
    assert_eq!(
        &lines[header + 1..header + 4],
        ["###", "Where is the red sign and what does it say?", "###"]
    );
    let selection = parse_routing_response("A, D", &registry).unwrap();
    assert_eq!(selection.names(&registry), ["dinov2", "pix2struct"]);
    "prompt skeleton verbatim, `A, D` -> dinov2 + pix2struct".into()
}

fn operator_oracles() -> String {
    let (registry, config) = desk();
    let mut r = rng(3);
    let mut worst = [0.0f64; 3];
    for case in 0..100u64 {
        let params = init_params(&config, &registry, case).unwrap();
        let block = &params.blocks[(case % 3) as usize];
        let x = random_map(&mut r, 8, 8, 8);
        let k = r.random_range(1..=3);
        let selection = index::sample(&mut r, 7, k).into_vec();
        let feats: Vec<FeatureMap> = selection
            .iter()
            .map(|&j| {
                let s = &registry.experts[j];
                random_map(&mut r, s.channels, s.height, s.width)
            })
            .collect();

        let mut maps = Vec::new();
        for (&j, f) in selection.iter().zip(&feats) {
            let got = extract_expert_knowledge(&x, f, &block.extractors[j], config.heads).unwrap();
            let want = common::extract(&x, f, &block.extractors[j], config.heads);
            worst[0] = worst[0].max(common::max_abs_diff(got.data(), want.data()));
            maps.push(got);
        }

        let text = TextToken::new(normal(&mut r, 8, 0.5)).unwrap();
        let input = GatingInput::from_feature(&x, text.clone());
        let sel = ExpertSelection::new(selection.clone(), 7).unwrap();
        let w = gate_weights(&input, &sel, &block.gating, GatingMode::Dynamic).unwrap();
        let visual: Vec<f64> = (0..8)
            .map(|c| x.channel(c).iter().sum::<f64>() / 64.0)
            .collect();
        let want_w = common::gate(&visual, text.values(), &selection, &block.gating);
        worst[1] = worst[1].max(common::max_abs_diff(w.values(), &want_w));

        let fused = fuse(&maps, &w).unwrap();
        worst[2] = worst[2].max(common::max_abs_diff(fused.data(), &common::fuse(&maps, w.values())));
    }
    assert!(worst.iter().all(|&e| e <= 1e-10), "max errors {worst:?}");

    // degenerate cases hold exactly
    let f = random_map(&mut r, 16, 8, 8);
    assert!(bits_eq(bilinear_interpolate(&f, 8, 8).unwrap().data(), f.data()));
    let params = init_params(&config, &registry, 7).unwrap();
    let x = random_map(&mut r, 8, 8, 8);
    let input = GatingInput::from_feature(&x, encode_text("what is this", 8));
    for j in 0..7 {
        let one = ExpertSelection::new(vec![j], 7).unwrap();
        let w = gate_weights(&input, &one, &params.blocks[0].gating, GatingMode::Dynamic).unwrap();
        assert_eq!(w.values(), [1.0]);
        assert!(bits_eq(fuse(std::slice::from_ref(&x), &w).unwrap().data(), x.data()));
        let mut ext = params.blocks[0].extractors[j].clone();
        ext.output.weight.fill(0.0);
        if let Some(b) = ext.output.bias.as_mut() {
            b.fill(0.0);
        }
        let e = generate_expert_feature(&registry.experts[j], 2, false, &[]).unwrap();
        let y = extract_expert_knowledge(&x, &e, &ext, config.heads).unwrap();
        assert!(bits_eq(y.data(), x.data()));
    }
    format!(
        "100 instances, max errors extract {:.1e} gate {:.1e} fuse {:.1e}; identities exact",
        worst[0], worst[1], worst[2]
    )
}

fn gate_simplex() -> String {
    let (registry, config) = desk();
    let params = init_params(&config, &registry, 11).unwrap();
    let mut r = rng(4);
    let mut worst_sum = 0.0f64;
    for case in 0..1000 {
        let input = GatingInput {
            visual_token: normal(&mut r, 8, 3.0),
            text_token: TextToken::new(normal(&mut r, 8, 1.0)).unwrap(),
        };
        let k = r.random_range(1..=7);
        let sel = ExpertSelection::new(index::sample(&mut r, 7, k).into_vec(), 7).unwrap();
        let w = gate_weights(&input, &sel, &params.blocks[case % 3].gating, GatingMode::Dynamic)
            .unwrap();
        let sum: f64 = w.values().iter().sum();
        worst_sum = worst_sum.max((sum - 1.0).abs());
        assert!(worst_sum <= 1e-9, "case {case} sums to {sum}");
        if k >= 2 {
            assert!(w.values().iter().all(|&p| p > 0.0 && p < 1.0), "case {case}: {w:?}");
        }
    }
    let logits = normal(&mut r, 7, 4.0);
    let mut worst_subset = 0.0f64;
    for bits in 1u32..128 {
        let subset: Vec<usize> = (0..7).filter(|j| bits >> j & 1 == 1).collect();
        let mask: Vec<bool> = (0..7).map(|j| bits >> j & 1 == 1).collect();
        let masked = softmax(&logits, Some(&mask)).unwrap();
        let picked: Vec<f64> = subset.iter().map(|&j| masked[j]).collect();
        let err = common::max_abs_diff(&picked, &common::subset_softmax(&logits, &subset));
        worst_subset = worst_subset.max(err);
        assert!(mask.iter().zip(&masked).all(|(&m, &p)| m || p == 0.0));
    }
    assert!(worst_subset <= 1e-12, "subset error {worst_subset:e}");
    format!("1000 gates, sum error {worst_sum:.1e}; 127 subsets, error {worst_subset:.1e}")
}

fn routing_data_constructor() -> String {
    let started = Instant::now();
    let registry = ExpertRegistry::desk_default();
    let mut r = rng(5);
    let grid = [0.25, 0.5, 0.75, 1.0, 1.25];
    for case in 0..10_000 {
        let ties = case % 3 == 0;
        let draw = |r: &mut ChaCha8Rng| {
            if ties {
                grid[r.random_range(0..grid.len())]
            } else {
                r.random_range(0.0..2.0)
            }
        };
        let base = draw(&mut r);
        let losses: Vec<f64> = (0..7).map(|_| draw(&mut r)).collect();
        let cap = r.random_range(1..=5);
        let record = LossRecord {
            sample_id: format!("r{case}"),
            base_loss: base,
            expert_losses: losses.clone(),
        };
        let got = construct_routing_set(&record, &registry, cap).unwrap();
        let want: Vec<&str> = common::routing_set(base, &losses, cap)
            .into_iter()
            .map(|j| registry.experts[j].name.as_str())
            .collect();
        assert_eq!(got.experts, want, "record {case}");

        let c = r.random_range(0.01..100.0);
        let scaled = LossRecord {
            base_loss: base * c,
            expert_losses: losses.iter().map(|l| l * c).collect(),
            ..record.clone()
        };
        let mut a = got.experts.clone();
        let mut b = construct_routing_set(&scaled, &registry, cap).unwrap().experts;
        a.sort();
        b.sort();
        assert_eq!(a, b, "record {case} changed under scaling by {c}");

        for name in &got.experts {
            let j = registry.index_of(name).unwrap();
            let mut lowered = record.clone();
            lowered.expert_losses[j] *= r.random_range(0.0..1.0);
            let again = construct_routing_set(&lowered, &registry, cap).unwrap();
            assert!(again.experts.contains(name), "record {case}: lowering {name} dropped it");
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    format!("10000 records match brute force, scale and monotonicity hold, {elapsed:.2?}")
}

fn recovery_accuracy(noise: f64) -> f64 {
    let registry = ExpertRegistry::desk_default();
    let corpus = synthesize_corpus(
        &registry,
        &SyntheticConfig {
            num_samples: 200,
            seed: 42,
            noise,
            ..SyntheticConfig::default()
        },
    )
    .unwrap();
    let annotations: Vec<RoutingAnnotation> = corpus
        .losses
        .iter()
        .map(|rec| construct_routing_set(rec, &registry, 3).unwrap())
        .collect();
    score_routing_accuracy(&annotations, &corpus.truth).unwrap()
}

fn routing_recovery() -> String {
    let exact = recovery_accuracy(0.0);
    assert_eq!(exact, 1.0);
    let noisy = recovery_accuracy(RECOVERY_NOISE);
    assert!(noisy >= 0.9, "accuracy {noisy} at noise {RECOVERY_NOISE}");
    format!("accuracy {exact} at noise 0, {noisy} at noise {RECOVERY_NOISE}")
}

fn gradient_correctness() -> String {
    let started = Instant::now();
    let instance = GradInstance::desk(42).unwrap();
    let reports = instance.check(Scope::Checked, 1e-5, None).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.op.as_str()).collect();
    for part in [".gating.", ".extract.", "projector."] {
        assert!(names.iter().any(|n| n.contains(part)), "nothing checked for {part}");
    }
    let summary = summarize(reports, 1e-5, 1e-4);
    let elapsed = started.elapsed();
    assert!(summary.passed, "{} at {:e}", summary.worst, summary.max_rel_error);
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    format!(
        "{} entries, max relative error {:.2e}, {elapsed:.2?}",
        summary.compared, summary.max_rel_error
    )
}

fn gating_concentration() -> String {
    let registry = ExpertRegistry::desk_default();
    let corpus = synthesize_corpus(
        &registry,
        &SyntheticConfig {
            num_samples: 64,
            seed: 42,
            noise: 0.0,
            plant: Some("pix2struct".into()),
            ..SyntheticConfig::default()
        },
    )
    .unwrap();
    let base = ToyTrainConfig::new("");
    assert_eq!((base.steps, base.seed), (500, 42));

    let fixed = ToyTrainConfig {
        selection: Some(vec!["dinov2".into(), "pix2struct".into()]),
        ..base.clone()
    };
    let gating = run_ablation_on(
        &[AblationMode::Dynamic, AblationMode::UniformGating],
        &fixed,
        &registry,
        &corpus,
    )
    .unwrap();
    let dynamic = gating.entry("dynamic").unwrap();
    let uniform = gating.entry("uniform-gating").unwrap();
    let weight = |name: &str| {
        dynamic
            .mean_gate_weight
            .iter()
            .find(|w| w.expert == name)
            .map_or(0.0, |w| w.weight)
    };
    let (planted, other) = (weight("pix2struct"), weight("dinov2"));
    assert!(planted > other && planted > 0.5, "pix2struct {planted}, dinov2 {other}");
    assert!(
        dynamic.eval_loss <= uniform.eval_loss,
        "dynamic {} vs uniform {}",
        dynamic.eval_loss,
        uniform.eval_loss
    );

    let routed = run_ablation_on(
        &[AblationMode::Dynamic, AblationMode::RandomRouting],
        &base,
        &registry,
        &corpus,
    )
    .unwrap();
    let oracle = routed.entry("dynamic").unwrap();
    let random = routed.entry("random-routing").unwrap();
    assert_eq!(oracle.routing, "oracle");
    assert!(
        oracle.eval_loss <= random.eval_loss,
        "oracle {} vs random {}",
        oracle.eval_loss,
        random.eval_loss
    );
    format!(
        "pix2struct gate {planted:.3} vs dinov2 {other:.3}; eval dynamic {:.4} <= uniform {:.4}; oracle {:.4} <= random {:.4}",
        dynamic.eval_loss, uniform.eval_loss, oracle.eval_loss, random.eval_loss
    )
}

fn irrelevance_exclusion() -> String {
    let (registry, config) = desk();
    let params = init_params(&config, &registry, 42).unwrap();
    let mut r = rng(9);
    let mut perturbations = 0;
    for case in 0..10u64 {
        let base = generate_base_feature(&registry, case);
        let k = r.random_range(1..=3);
        let mut picked = index::sample(&mut r, 7, k).into_vec();
        picked.sort_unstable();
        let selection = ExpertSelection::new(picked, 7).unwrap();
        let features = all_features(&registry, case);
        let question = "How many people are in the picture?";
        let reference = adapter_forward(&base, &features, &selection, question, &params, &config)
            .unwrap();
        for j in (0..7).filter(|j| !selection.contains(*j)) {
            let mut perturbed = features.clone();
            let s = &registry.experts[j];
            perturbed.insert(j, random_map(&mut r, s.channels, s.height, s.width));
            let out = adapter_forward(&base, &perturbed, &selection, question, &params, &config)
                .unwrap();
            assert!(bits_eq(out.data(), reference.data()), "case {case}, expert {j}");
            let mut missing = features.clone();
            missing.remove(&j);
            let out = adapter_forward(&base, &missing, &selection, question, &params, &config)
                .unwrap();
            assert!(bits_eq(out.data(), reference.data()), "case {case}, expert {j} removed");
            perturbations += 2;
        }
        let empty = ExpertSelection::empty();
        let a = adapter_forward(&base, &features, &empty, "read the chart", &params, &config)
            .unwrap();
        let b = adapter_forward(&base, &ExpertFeatures::new(), &empty, "", &params, &config)
            .unwrap();
        assert!(bits_eq(a.data(), b.data()), "case {case}: empty selection saw the question");
    }
    format!("{perturbations} routed-out perturbations bitwise inert; empty path question-free")
}

fn mova(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_mova"))
        .args(args)
        .current_dir(dir)
        .env_remove("MOVA_SEED")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "mova {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// Every file below `dir`, sorted by path, with its bytes.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn cli_session(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut stdout = Vec::new();
    let mut run = |label: &str, args: &[&str]| stdout.push((label.to_string(), mova(dir, args)));
    run("gen", &["gen-synthetic", "--samples", "24", "--seed", "5", "--noise", "0.1", "--out", "corpus"]);
    run("gen-planted", &[
        "gen-synthetic", "--samples", "16", "--seed", "42", "--noise", "0",
        "--plant", "pix2struct", "--out", "planted",
    ]);
    run("build", &["build-routing-data", "--losses", "corpus/losses.jsonl", "--out", "routing.jsonl"]);
    run("score", &["score-routing", "--annotations", "routing.jsonl", "--truth", "corpus/ground_truth.jsonl"]);
    run("route-scripted", &["route", "--question", "Where is the red sign?", "--response", "A, D"]);
    run("route-random", &["route", "--question", "q", "--strategy", "random", "--seed", "3"]);
    run("route-oracle", &[
        "route", "--question", "q", "--strategy", "oracle",
        "--losses", "corpus/losses.jsonl", "--sample-id", "s0003",
    ]);
    run("route-annotation", &[
        "route", "--question", "q", "--strategy", "annotation",
        "--annotations", "routing.jsonl", "--sample-id", "s0004",
    ]);
    run("fuse", &[
        "fuse", "--question", "Where is the red sign and what does it say?",
        "--response", "A, D", "--image-seed", "7", "--out", "tokens.movt",
    ]);
    fs::write(
        dir.join("toy.json"),
        r#"{"steps": 3, "learning_rate": 0.05, "batch_size": 4, "seed": 42, "corpus": "planted",
            "selection": ["dinov2", "pix2struct"], "gradcheck_probes": 2}"#,
    )
    .unwrap();
    run("train", &["train-toy", "--config", "toy.json", "--report", "report.json", "--params-out", "params"]);
    run("fuse-trained", &[
        "fuse", "--question", "q", "--response", "D", "--params", "params", "--out", "trained.movt",
    ]);
    run("ablate", &[
        "ablate", "--config", "toy.json", "--modes", "dynamic,uniform-gating,fixed-K:2",
        "--report", "ablation.json",
    ]);
    run("gradcheck", &["gradcheck", "--probes", "3", "--report", "grad.json"]);
    run("check", &["check", "--report", "suite.json"]);
    let mut files = snapshot(dir);
    files.extend(stdout);
    files
}

fn determinism_and_formats() -> String {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = cli_session(a.path());
    let second = cli_session(b.path());
    assert_eq!(first.len(), second.len());
    for ((na, ba), (nb, bb)) in first.iter().zip(&second) {
        assert_eq!(na, nb);
        assert!(ba == bb, "`{na}` differs between identical runs");
    }

    let tokens = movt::load(a.path().join("tokens.movt")).unwrap();
    assert_eq!(tokens.dims(), &[16, 32]);
    let scratch = a.path().join("copy.movt");
    movt::save(&tokens, &scratch).unwrap();
    assert_eq!(fs::read(&scratch).unwrap(), fs::read(a.path().join("tokens.movt")).unwrap());
    let mut r = rng(10);
    for case in 0..20 {
        let dims: Vec<usize> = (0..r.random_range(1..4)).map(|_| r.random_range(1..5)).collect();
        let n = dims.iter().product();
        // the format stores f32, so draw values it can represent
        let mut data: Vec<f64> = normal(&mut r, n, 1e3).iter().map(|&v| v as f32 as f64).collect();
        data[0] = if case % 2 == 0 { -0.0 } else { f64::from(f32::MIN_POSITIVE) / 2.0 };
        let t = Tensor::new(dims, data).unwrap();
        let bytes = movt::encode(&t).unwrap();
        let back = movt::decode(&bytes).unwrap();
        assert_eq!(back.dims(), t.dims());
        assert!(bits_eq(back.data(), t.data()));
        assert_eq!(movt::encode(&back).unwrap(), bytes);
    }

    let losses: Vec<LossRecord> = read_jsonl(a.path().join("corpus/losses.jsonl")).unwrap();
    let routing: Vec<RoutingAnnotation> = read_jsonl(a.path().join("routing.jsonl")).unwrap();
    let truth: Vec<GroundTruth> = read_jsonl(a.path().join("corpus/ground_truth.jsonl")).unwrap();
    fn round_trip<T: serde::Serialize + serde::de::DeserializeOwned + PartialEq + std::fmt::Debug>(
        dir: &Path,
        name: &str,
        rows: &[T],
    ) {
        let path = dir.join(name);
        write_jsonl(&path, rows).unwrap();
        let back: Vec<T> = read_jsonl(&path).unwrap();
        assert_eq!(back, rows);
        let bytes = fs::read(&path).unwrap();
        write_jsonl(&path, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes, "{name} not byte-stable");
    }
    round_trip(a.path(), "l.jsonl", &losses);
    round_trip(a.path(), "r.jsonl", &routing);
    round_trip(a.path(), "t.jsonl", &truth);
    for rec in &losses {
        let back: LossRecord = serde_json::from_str(&serde_json::to_string(rec).unwrap()).unwrap();
        assert!(bits_eq(&back.expert_losses, &rec.expert_losses) && back.base_loss.to_bits() == rec.base_loss.to_bits());
    }
    format!("{} artifacts and outputs byte-identical across runs; MOVT and JSONL round-trip", first.len())
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> String); 10] = [
        ("structural constants", structural_constants),
        ("routing protocol fidelity", routing_protocol),
        ("extraction, gating and fusion oracles", operator_oracles),
        ("gate simplex and subset consistency", gate_simplex),
        ("routing-data constructor equivalence", routing_data_constructor),
        ("synthetic routing recovery", routing_recovery),
        ("gradient correctness", gradient_correctness),
        ("gating concentration and ablation order", gating_concentration),
        ("irrelevance exclusion", irrelevance_exclusion),
        ("determinism and formats", determinism_and_formats),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("criterion {:>2} FAIL  {name} ({secs:.1}s): {msg}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

#[test]
fn gate_weights_reject_broken_simplex() {
    assert!(GateWeights::new(vec![0.6, 0.6]).is_err());
    assert!(GateWeights::new(vec![0.5, 0.5]).is_ok());
}
