//! Acceptance suite: one test per release criterion, each printing a
//! PASS line with the measured values. Criterion 11 needs a live model
//! sidecar and skips (with a SKIP line) when none is configured.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use tome_core::adapter::{DenoiserAdapter, Latent, StubDenoiser};
use tome_core::embed::{
    apply_surgery, merge_group, substitute_eot, EmbeddingMatrix,
    StubTextEncoder, TextEncoder,
};
use tome_core::eval::benchmark::{build_benchmark, default_pairs, render_template};
use tome_core::eval::rubric::{build_rubric_prompt, default_rubric};
use tome_core::eval::scorer::{score_images, RetryPolicy, ScorerClient, ScoringJob};
use tome_core::optim::{
    evaluate_losses, optimized_step_count, total_loss, update_step, BindingState,
    OptimizerConfig, StepContext, SupervisionMode,
};
use tome_core::pipeline::{
    generate_with, resolve_model, Ablation, GenerationConfig,
};
use tome_core::probe::{
    entropy_grad_logits, normalize, softmax, token_entropy, AttentionMap, LayerId, MapMeta,
};
use tome_core::prompt::{
    clean_prompt, parse_prompt, EntityGroup, HeuristicProvider, ParsedPrompt, TokenSpan,
};
use tome_core::token::WordTokenizer;
use tome_core::DEFAULT_SEQ_LEN;

fn pass(criterion: usize, detail: &str) {
    println!("acceptance criterion {criterion:>2}: PASS — {detail}");
}

fn skip(criterion: usize, detail: &str) {
    println!("acceptance criterion {criterion:>2}: SKIP — {detail}");
}

fn parse(prompt: &str, seq_len: usize) -> ParsedPrompt {
    parse_prompt(prompt, &HeuristicProvider, &WordTokenizer, seq_len).expect("parse")
}

#[test]
fn criterion_01_parser_fidelity() {
    let start = Instant::now();
    let parsed = parse("a cat wearing glasses and a dog with a hat", DEFAULT_SEQ_LEN);
    let elapsed = start.elapsed();

    assert_eq!(parsed.groups.len(), 2);
    let g1 = &parsed.groups[0];
    assert_eq!(g1.noun.text, "cat");
    let a1: Vec<&str> = g1.attributes.iter().map(|s| s.text.as_str()).collect();
    assert_eq!(a1, vec!["wearing", "glasses"]);
    let g2 = &parsed.groups[1];
    assert_eq!(g2.noun.text, "dog");
    let a2: Vec<&str> = g2.attributes.iter().map(|s| s.text.as_str()).collect();
    assert_eq!(a2, vec!["with", "a", "hat"]);
    assert!(elapsed.as_secs_f64() < 1.0, "parse took {elapsed:?}");
    pass(
        1,
        &format!(
            "groups cat+{{wearing,glasses}} / dog+{{with,a,hat}} in {:.1} ms",
            elapsed.as_secs_f64() * 1e3
        ),
    );
}

/// Independent oracle: same rows summed in reversed span order.
fn reversed_sum_oracle(matrix: &EmbeddingMatrix, group: &EntityGroup) -> Array1<f64> {
    let mut spans: Vec<&TokenSpan> = group.spans().collect();
    spans.sort_by_key(|s| std::cmp::Reverse(s.start));
    let mut acc = Array1::zeros(matrix.width());
    for span in spans {
        for p in (span.start..span.end).rev() {
            acc += &matrix.row(p);
        }
    }
    acc
}

#[test]
fn criterion_02_merge_exactness_and_surgery_shape() {
    let encoder = StubTextEncoder::default();
    let mut rng = ChaCha12Rng::seed_from_u64(0x5ca1e);
    let words = ["dog", "cat", "hat", "red", "ball", "cube", "glasses", "box", "boy", "scarf"];
    let mut worst_rel: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(2..10);
        let prompt: Vec<&str> = (0..n).map(|_| words[rng.random_range(0..words.len())]).collect();
        let prompt = prompt.join(" ");
        let matrix = encoder.encode(&prompt).expect("encode");

        // random disjoint spans: noun first, then 0..3 attribute spans
        let mut cursor = 1usize;
        let noun_len = rng.random_range(1..=n);
        let noun = TokenSpan { start: cursor, end: cursor + noun_len, text: String::new() };
        cursor += noun_len;
        let mut attributes = Vec::new();
        while cursor <= n && rng.random::<f64>() < 0.7 {
            let len = rng.random_range(1..=(n + 1 - cursor));
            attributes.push(TokenSpan { start: cursor, end: cursor + len, text: String::new() });
            cursor += len;
        }
        let group = EntityGroup { noun, attributes, index: 1 };
        let composite = merge_group(&matrix, &group).expect("merge");
        let oracle = reversed_sum_oracle(&matrix, &group);
        let num = (&composite.embedding - &oracle)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let den = oracle.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let rel = num / den;
        worst_rel = worst_rel.max(rel);
        assert!(rel <= 1e-5, "case {case}: relative error {rel}");
    }

    // surgery shape + compaction arithmetic on real parses
    for prompt in [
        "a cat wearing glasses and a dog with a hat",
        "a red ball and a blue cube",
        "a boy wearing hat and a dog wearing sunglasses",
        "a dog",
    ] {
        let matrix = encoder.encode(prompt).expect("encode");
        let parsed = parse(prompt, DEFAULT_SEQ_LEN);
        let result = apply_surgery(&matrix, &parsed, false, &encoder).expect("surgery");
        assert_eq!(result.matrix.seq_len(), 77, "always 77 rows");
        assert_eq!(result.matrix.width(), encoder.width());
        let merged: usize = parsed.groups.iter().map(|g| g.token_count() - 1).sum();
        assert_eq!(result.matrix.eot_start(), matrix.eot_start() - merged);
    }
    pass(
        2,
        &format!("100 randomized merges within 1e-5 (worst {worst_rel:.2e}); 77xD shape and compaction arithmetic hold"),
    );
}

#[test]
fn criterion_03_ets_correctness() {
    let encoder = StubTextEncoder::default();
    let prompt = "a cat wearing hat and a dog wearing sunglasses";
    let matrix = encoder.encode(prompt).expect("encode");
    let parsed = parse(prompt, DEFAULT_SEQ_LEN);
    assert_eq!(clean_prompt(&parsed), "a cat and a dog");

    let result = apply_surgery(&matrix, &parsed, true, &encoder).expect("surgery");
    let clean = encoder.encode("a cat and a dog").expect("encode clean");
    assert_eq!(result.matrix.eot_start(), clean.eot_start());
    for p in result.matrix.eot_start()..result.matrix.seq_len() {
        assert_eq!(result.matrix.row(p), clean.row(p), "EOT row {p}");
    }

    let once = substitute_eot(&matrix, &clean, true).expect("ets");
    let twice = substitute_eot(&once, &clean, true).expect("ets twice");
    let bits = |m: &EmbeddingMatrix| m.rows().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    assert_eq!(bits(&once), bits(&twice), "bit-for-bit idempotent");
    pass(3, "ETS block row-identical to the clean encode and bit-idempotent");
}

#[test]
fn criterion_04_entropy_math() {
    let meta = MapMeta {
        layer: LayerId::new("dec.attn.0"),
        token_position: 1,
        timestep: 999,
        head_averaged: true,
    };

    let uniform = normalize(
        &AttentionMap::new(Array2::from_elem((32, 32), 1.0), meta.clone(), false).unwrap(),
    )
    .unwrap();
    let h_uniform = token_entropy(&uniform).unwrap();
    assert!((h_uniform - 1024f64.ln()).abs() <= 1e-4);

    let mut one_hot = Array2::zeros((32, 32));
    one_hot[(5, 9)] = 1.0;
    let one_hot = AttentionMap::new(one_hot, meta.clone(), true).unwrap();
    let h_one_hot = token_entropy(&one_hot).unwrap();
    assert!(h_one_hot.abs() <= 1e-6 && h_one_hot >= 0.0);

    let hand = AttentionMap::new(
        ndarray::array![[0.5, 0.25], [0.25, 0.0]],
        meta.clone(),
        true,
    )
    .unwrap();
    let h_hand = token_entropy(&hand).unwrap();
    assert!((h_hand - 1.0397207708399179).abs() <= 1e-6);

    let mut rng = ChaCha12Rng::seed_from_u64(0xf22);
    for _ in 0..1000 {
        let h = rng.random_range(2..=32usize);
        let w = rng.random_range(2..=32usize);
        let raw = Array2::from_shape_fn((h, w), |_| {
            // spiky distributions exercise the bounds harder
            rng.random::<f64>().powi(rng.random_range(1..6)) * 10.0
        });
        let map = AttentionMap::new(raw, meta.clone(), false).unwrap();
        let entropy = token_entropy(&normalize(&map).unwrap()).unwrap();
        let bound = ((h * w) as f64).ln();
        assert!(
            (0.0..=bound + 1e-9).contains(&entropy),
            "entropy {entropy} outside [0, {bound}]"
        );
    }
    pass(
        4,
        &format!(
            "uniform {h_uniform:.4} = ln(1024), one-hot {h_one_hot:.1e}, hand case {h_hand:.6}; 1000 fuzzed maps in bounds"
        ),
    );
}

#[test]
fn criterion_05_gradient_checks() {
    let start = Instant::now();

    // entropy gradient wrt pre-softmax logits on an 8x8 instance
    let mut rng = ChaCha12Rng::seed_from_u64(0x96ad);
    let logits = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>() * 2.0 - 1.0);
    let meta = MapMeta {
        layer: LayerId::new("dec.attn.0"),
        token_position: 1,
        timestep: 1,
        head_averaged: true,
    };
    let map = AttentionMap::new(softmax(&logits), meta.clone(), true).unwrap();
    let analytic = entropy_grad_logits(&map).unwrap();
    let entropy_of = |l: &Array2<f64>| {
        token_entropy(&AttentionMap::new(softmax(l), meta.clone(), true).unwrap()).unwrap()
    };
    let eps = 1e-6;
    for (i, j) in [(0, 0), (3, 4), (7, 7), (5, 2), (1, 6)] {
        let mut plus = logits.clone();
        plus[(i, j)] += eps;
        let mut minus = logits.clone();
        minus[(i, j)] -= eps;
        let numeric = (entropy_of(&plus) - entropy_of(&minus)) / (2.0 * eps);
        let rel = (analytic[(i, j)] - numeric).abs() / numeric.abs().max(1e-8);
        assert!(rel <= 1e-3, "logit ({i},{j}): rel {rel}");
    }

    // total-loss gradient wrt a composite row on the stub denoiser
    let dim = 12;
    let adapter = StubDenoiser::small(dim, 33);
    let encoder = StubTextEncoder::new(dim, 14, 5);
    let config = OptimizerConfig {
        probed_layers: vec![LayerId::new("dec.attn.0"), LayerId::new("dec.attn.1")],
        lambda: 1.0,
        ..OptimizerConfig::default()
    };
    let prompt = "a dog with a hat";
    let parsed = parse(prompt, encoder.seq_len());
    let matrix = encoder.encode(prompt).unwrap();
    let surgery = apply_surgery(&matrix, &parsed, true, &encoder).unwrap();
    let state = BindingState::prepare(&parsed, surgery, &encoder, &config).unwrap();
    let latent = Latent::seeded_normal(9, adapter.latent_shape());
    let position = state.surgery.composites[0].position.unwrap();

    let loss_at = |s: &BindingState| {
        let (l_ent, l_sem) = evaluate_losses(s, &latent, 700, &adapter, &config).unwrap();
        total_loss(l_ent, l_sem, &config).unwrap()
    };
    // analytic gradient via one zero-learning-rate probe step is not
    // observable; recompute through the public pieces instead:
    // d total/d row = d l_ent/d row + lambda * d l_sem/d row, both checked
    // against central differences of the public loss evaluation.
    let eps = 1e-5;
    let mut checked = 0;
    for d in [0usize, 3, 7, 11] {
        let perturbed = |delta: f64| {
            let mut row = state.surgery.matrix.row(position).to_owned();
            row[d] += delta;
            let mut s = state.clone();
            s.surgery.matrix = state.surgery.matrix.with_row_replaced(position, &row).unwrap();
            s
        };
        let (plus, minus) = (perturbed(eps), perturbed(-eps));
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);

        // analytic value: run one update step with a tiny step size on a
        // fresh clone and recover the applied gradient component
        let mut probe = state.clone();
        let step = 1e-6;
        let probe_config = OptimizerConfig {
            step_size: step,
            ..config.clone()
        };
        let before = probe.surgery.matrix.row(position)[d];
        update_step(
            &mut probe,
            &latent,
            StepContext {
                step_index: 0,
                total_steps: 10,
                timestep: 700,
            },
            &adapter,
            &probe_config,
        )
        .unwrap();
        let after = probe.surgery.matrix.row(position)[d];
        let analytic = (before - after) / step;
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-8);
        assert!(rel <= 1e-3, "composite dim {d}: rel {rel} ({analytic} vs {numeric})");
        checked += 1;
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "gradient checks took {elapsed:?}");
    pass(
        5,
        &format!(
            "entropy-logit and total-loss gradients match finite differences ({checked} composite dims) in {:.2} s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_06_optimizer_behavior_on_stub() {
    let dim = 16;
    let adapter = StubDenoiser::small(dim, 21);
    let encoder = StubTextEncoder::new(dim, 16, 5);
    let config = OptimizerConfig {
        probed_layers: vec![LayerId::new("dec.attn.0"), LayerId::new("dec.attn.1")],
        lambda: 0.0,
        step_size: 0.05,
        ..OptimizerConfig::default()
    };
    let prompt = "a cat wearing hat and a dog wearing glasses";
    let parsed = parse(prompt, encoder.seq_len());
    let matrix = encoder.encode(prompt).unwrap();
    let surgery = apply_surgery(&matrix, &parsed, true, &encoder).unwrap();
    let mut state = BindingState::prepare(&parsed, surgery, &encoder, &config).unwrap();
    let before = state.surgery.matrix.clone();
    let positions: Vec<usize> = state
        .surgery
        .composites
        .iter()
        .map(|c| c.position.unwrap())
        .collect();
    let latent = Latent::seeded_normal(3, adapter.latent_shape());

    let mut trace = Vec::new();
    for _ in 0..10 {
        let (l_ent, _) = evaluate_losses(&state, &latent, 999, &adapter, &config).unwrap();
        trace.push(l_ent);
        update_step(
            &mut state,
            &latent,
            StepContext { step_index: 0, total_steps: 50, timestep: 999 },
            &adapter,
            &config,
        )
        .unwrap();
    }
    assert!(
        trace.windows(2).all(|w| w[1] < w[0]),
        "L_ent not monotone: {trace:?}"
    );

    // parameter isolation across those 10 steps
    for p in 0..before.seq_len() {
        let identical = state
            .surgery
            .matrix
            .row(p)
            .iter()
            .zip(before.row(p).iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if positions.contains(&p) {
            assert!(!identical, "composite row {p} should have moved");
        } else {
            assert!(identical, "non-composite row {p} changed");
        }
    }

    // zero step size leaves everything bit-identical
    let zero_config = OptimizerConfig { step_size: 0.0, ..config.clone() };
    let frozen = state.surgery.matrix.clone();
    update_step(
        &mut state,
        &latent,
        StepContext { step_index: 0, total_steps: 50, timestep: 999 },
        &adapter,
        &zero_config,
    )
    .unwrap();
    for p in 0..frozen.seq_len() {
        assert!(state
            .surgery
            .matrix
            .row(p)
            .iter()
            .zip(frozen.row(p).iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    pass(
        6,
        &format!(
            "L_ent monotone over 10 steps ({:.3} -> {:.3}); zero-step bitwise frozen; isolation holds",
            trace[0],
            trace.last().unwrap()
        ),
    );
}

#[test]
fn criterion_07_ablation_reachability_and_baseline_equivalence() {
    let dir = tempfile::tempdir().unwrap();
    let base = GenerationConfig {
        prompt: "a cat wearing hat and a dog wearing glasses".into(),
        seed: 11,
        sampling_steps: 2,
        model_ref: "stub-small:16".into(),
        output_dir: dir.path().to_path_buf(),
        optimizer: OptimizerConfig {
            probed_layers: vec![LayerId::new("dec.attn.0"), LayerId::new("dec.attn.1")],
            ..OptimizerConfig::default()
        },
        ..GenerationConfig::default()
    };

    // all six rows are constructible and runnable
    for (i, ablation) in [
        Ablation::A,
        Ablation::B,
        Ablation::C,
        Ablation::D,
        Ablation::E,
        Ablation::F,
    ]
    .into_iter()
    .enumerate()
    {
        let mut config = base.clone().with_ablation(ablation);
        config.run_label = Some(format!("ab-{i}"));
        assert_eq!(config.ablation_signature(), Some(ablation));
        let record = tome_core::pipeline::generate(&config).unwrap();
        assert!(record.image_paths[0].exists(), "{ablation:?} produced no image");
    }

    // Config A output is bit-identical to a raw adapter loop
    let mut config_a = base.clone().with_ablation(Ablation::A);
    config_a.run_label = Some("config-a".into());
    let record = tome_core::pipeline::generate(&config_a).unwrap();
    let pipeline_pixels = image::open(&record.image_paths[0]).unwrap().to_rgb8();

    let (adapter, encoder) = resolve_model(&config_a.model_ref).unwrap();
    let cond = encoder.encode(&config_a.prompt).unwrap();
    let uncond = encoder.encode_unconditional().unwrap();
    let mut latent = Latent::seeded_normal(config_a.seed, adapter.latent_shape());
    let timesteps = adapter.timesteps(config_a.sampling_steps);
    for (s, &t) in timesteps.iter().enumerate() {
        let c = adapter.predict(&latent, t, &cond).unwrap();
        let u = adapter.predict(&latent, t, &uncond).unwrap();
        let guided = Latent(&u.0 + &((&c.0 - &u.0) * config_a.guidance_scale));
        latent = adapter
            .scheduler_step(&latent, s, config_a.sampling_steps, &guided)
            .unwrap();
    }
    let raw_pixels = adapter.decode(&latent).unwrap();
    assert_eq!(pipeline_pixels.as_raw(), raw_pixels.as_raw());
    pass(7, "configs A-F all run; config A pixels bit-identical to the raw adapter loop");
}

#[test]
fn criterion_08_window_arithmetic() {
    let cases = [(1usize, 1usize), (5, 1), (20, 4), (50, 10)];
    for (total, expected) in cases {
        assert_eq!(optimized_step_count(0.2, total), expected, "T = {total}");
    }
    pass(8, "optimized steps = ceil(0.2 T) for T in {1, 5, 20, 50} -> {1, 1, 4, 10}");
}

#[test]
fn criterion_09_additivity_analogy() {
    let start = Instant::now();
    // a real encoder sidecar takes precedence; offline the deterministic
    // stub encoder carries the additive-offset structure
    let (encoder, source): (Box<dyn TextEncoder>, &str) =
        match std::env::var("TOME_ENCODER_URL") {
            Ok(url) => (
                Box::new(
                    tome_core::remote::HttpTextEncoder::connect(&url, None)
                        .expect("encoder sidecar configured but unreachable"),
                ),
                "remote encoder",
            ),
            Err(_) => (Box::new(StubTextEncoder::default()), "stub encoder"),
        };

    let row = |word: &str| {
        tome_core::eval::additivity::word_embedding(encoder.as_ref(), word).unwrap()
    };
    let d1 = row("queen") - row("king");
    let d2 = row("woman") - row("man");
    let cosine = tome_core::eval::additivity::cosine(&d1, &d2).expect("non-degenerate offsets");
    let elapsed = start.elapsed();
    assert!(cosine >= 0.99, "cosine {cosine}");
    assert!(elapsed.as_secs_f64() < 120.0);
    pass(
        9,
        &format!("cosine(queen-king, woman-man) = {cosine:.4} >= 0.99 on {source} in {:.2} s", elapsed.as_secs_f64()),
    );
}

/// Mock scorer: the -002 image fails once then succeeds, the -003 image
/// replies with prose carrying no number, everything else scores 88.
struct FlakyScorer {
    attempts: std::sync::Mutex<std::collections::HashMap<String, u32>>,
}

impl ScorerClient for FlakyScorer {
    fn score_image(&self, image: &std::path::Path, _instruction: &str) -> Result<String, String> {
        let name = image
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("")
            .to_string();
        let mut attempts = self.attempts.lock().unwrap();
        let n = attempts.entry(name.clone()).or_insert(0);
        *n += 1;
        if name.ends_with("002") && *n == 1 {
            return Err("transient 503".into());
        }
        if name.ends_with("003") {
            return Ok("no idea, sorry".into());
        }
        Ok("Score: 88".into())
    }
}

#[test]
fn criterion_10_benchmark_rubric_and_offline_scoring() {
    // template verbatim
    assert_eq!(
        render_template("cat", "hat", "dog", "glasses"),
        "a cat with a hat and a dog with a glasses"
    );
    let prompts = build_benchmark(&default_pairs()).unwrap();
    assert_eq!(prompts.len(), 50);
    for p in &prompts {
        assert_eq!(
            p.rendered,
            format!(
                "a {} with a {} and a {} with a {}",
                p.object_a, p.item_a, p.object_b, p.item_b
            )
        );
    }

    // rubric validation
    let rubric = default_rubric();
    rubric.validate().unwrap();
    let mut eight = rubric.clone();
    eight.levels.pop();
    assert!(eight.validate().is_err(), "8 levels must be rejected");
    let mut swapped = rubric.clone();
    swapped.levels[2].score = 99;
    assert!(swapped.validate().is_err(), "non-monotone scores rejected");
    let instruction = build_rubric_prompt(&prompts[0], &rubric).unwrap();
    assert!(instruction.contains(&prompts[0].rendered));
    assert_eq!(rubric.levels.len(), 9);

    // offline scoring with injected failures: complete records, none dropped
    let dir = tempfile::tempdir().unwrap();
    let jobs: Vec<ScoringJob> = (1..=4)
        .map(|i| {
            let image = dir.path().join(format!("gpt4o-{i:03}.png"));
            image::RgbImage::new(4, 4).save(&image).unwrap();
            ScoringJob {
                prompt_id: format!("gpt4o-{i:03}"),
                image,
                instruction: instruction.clone(),
            }
        })
        .collect();
    let scorer = FlakyScorer { attempts: Default::default() };
    let records = score_images(
        &jobs,
        &scorer,
        2,
        RetryPolicy { max_attempts: 3, base_delay: std::time::Duration::from_millis(0) },
    );
    assert_eq!(records.len(), jobs.len(), "one record per image");
    let malformed = records.iter().find(|r| r.prompt_id == "gpt4o-003").unwrap();
    assert!(malformed.score.is_none());
    assert_eq!(malformed.raw_response, "no idea, sorry");
    assert_eq!(malformed.error.as_deref(), Some("malformed score"));
    let retried = records.iter().find(|r| r.prompt_id == "gpt4o-002").unwrap();
    assert_eq!(retried.attempts, 2, "transient failure then success");
    assert_eq!(retried.score, Some(88.0));
    let scored = records.iter().filter(|r| r.score.is_some()).count();
    assert_eq!(scored, 3);
    pass(
        10,
        &format!(
            "template verbatim on 50 pairs; rubric validation enforced; {scored}/4 mock scores with failures recorded"
        ),
    );
}

#[test]
fn criterion_11_real_model_smoke_gated() {
    let Ok(url) = std::env::var("TOME_ADAPTER_URL") else {
        skip(
            11,
            "no TOME_ADAPTER_URL set; run a model sidecar and re-run for the real-model smoke test",
        );
        return;
    };

    let dir = tempfile::tempdir().unwrap();
    let (adapter, encoder) = resolve_model(&url).expect("sidecar reachable");
    let probed: Vec<LayerId> = adapter.layers().iter().take(3).map(|l| l.id.clone()).collect();
    assert_eq!(probed.len(), 3, "sidecar must expose >= 3 cross-attention layers");

    let config = GenerationConfig {
        prompt: "a cat wearing hat and a dog wearing glasses".into(),
        seed: 1,
        sampling_steps: 20,
        model_ref: url.clone(),
        output_dir: dir.path().to_path_buf(),
        run_label: Some("smoke-full".into()),
        optimizer: OptimizerConfig {
            probed_layers: probed.clone(),
            supervision_mode: SupervisionMode::NounPhrase,
            ..OptimizerConfig::default()
        },
        ..GenerationConfig::default()
    };

    // captured maps come from the configured decoder layers at 32x32
    let cond = encoder.encode(&config.prompt).unwrap();
    let latent = Latent::seeded_normal(1, adapter.latent_shape());
    let maps = tome_core::probe::capture(
        adapter.as_ref(),
        &latent,
        adapter.timesteps(20)[0],
        &cond,
        tome_core::probe::CaptureRequest::new(probed.clone(), vec![1]),
    )
    .unwrap();
    for m in &maps {
        assert_eq!(m.shape(), (32, 32), "layer {} resolution", m.layer);
    }

    let full_start = Instant::now();
    let record =
        generate_with(&config, adapter.as_ref(), encoder.as_ref(), None).expect("full run");
    let full_secs = full_start.elapsed().as_secs_f64();
    assert_eq!(record.loss_trace.len(), 4, "ceil(0.2 * 20) optimized steps");

    let mut baseline = config.clone().with_ablation(Ablation::A);
    baseline.run_label = Some("smoke-baseline".into());
    let base_start = Instant::now();
    generate_with(&baseline, adapter.as_ref(), encoder.as_ref(), None).unwrap();
    let base_secs = base_start.elapsed().as_secs_f64();

    assert!(
        full_secs > base_secs,
        "full run ({full_secs:.1}s) should cost more than baseline ({base_secs:.1}s)"
    );
    pass(
        11,
        &format!(
            "sidecar smoke test: 32x32 maps on 3 layers, 4 optimized steps, overhead x{:.2} ({base_secs:.1}s -> {full_secs:.1}s)",
            full_secs / base_secs
        ),
    );
}
