//! Command-line interface: generation, embedding analyses and the
//! benchmark/scoring harness.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tome_core::eval::{
    additivity::{additivity_report, default_quadruples, AnalogyQuadruple},
    benchmark::{build_benchmark, default_pairs, load_pairs},
    coupling_analysis,
    detector::{HttpDetector, DEFAULT_DETECTOR_THRESHOLD},
    entropy_position_analysis,
    rubric::{build_rubric_prompt, default_rubric, load_rubric},
    scorer::{score_images, HttpScorer, RetryPolicy, ScorerClient, ScoringJob, SCORER_TOKEN_ENV},
};
use tome_core::optim::SupervisionMode;
use tome_core::pipeline::{
    generate, resolve_model, timing_report, Ablation, GenerationConfig, RunRecord,
};
use tome_core::probe::LayerId;

#[derive(Parser)]
#[command(
    name = "tome",
    version,
    about = "Token merging for semantic binding in text-to-image diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one generation with token merging, end-token substitution and
    /// composite-token optimization.
    Generate(Box<GenerateArgs>),
    /// Embedding and attention analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Benchmark construction and image scoring.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Aggregate per-phase timings over saved run records.
    Timings {
        /// run.json files to aggregate.
        records: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sampling steps T.
    #[arg(long)]
    steps: Option<usize>,
    /// Trade-off weight on the semantic binding loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Optimized fraction of sampling steps.
    #[arg(long = "t-opt")]
    t_opt: Option<f64>,
    #[arg(long = "step-size")]
    step_size: Option<f64>,
    #[arg(long)]
    guidance: Option<f64>,
    /// Disable token merging surgery.
    #[arg(long = "no-tome")]
    no_tome: bool,
    /// Disable end-token substitution.
    #[arg(long = "no-ets")]
    no_ets: bool,
    /// Disable the composite-token optimizer.
    #[arg(long = "no-optimizer")]
    no_optimizer: bool,
    /// Apply one ablation row (a, b, c, d, e, f, full) on top of flags.
    #[arg(long)]
    ablation: Option<String>,
    /// Supervision mode: noun-phrase or full-prompt.
    #[arg(long)]
    supervision: Option<String>,
    /// Also optimize the substituted EOT rows.
    #[arg(long = "update-ets")]
    update_ets: bool,
    #[arg(long = "dump-attention")]
    dump_attention: bool,
    /// Output directory (per-run subdirectories are created inside).
    #[arg(long = "out")]
    out: Option<PathBuf>,
    #[arg(long = "run-label")]
    run_label: Option<String>,
    /// TOML config file mirroring these flags; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model reference: stub, stub:<dim>, stub-small:<dim> or a sidecar URL.
    #[arg(long)]
    model: Option<String>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Analogy offsets and a 2-component projection of token embeddings.
    Additivity {
        #[arg(long, default_value = "stub")]
        model: String,
        /// Quadruple "a,b,c,d" checking cosine(a-b, c-d); repeatable.
        #[arg(long = "quadruple")]
        quadruples: Vec<String>,
        #[arg(long = "out", default_value = "reports")]
        out: PathBuf,
    },
    /// Mean cross-attention entropy by token position over a short run.
    Entropy {
        #[arg(long, default_value = "stub")]
        model: String,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "layer")]
        layers: Vec<String>,
        #[arg(long = "out", default_value = "reports")]
        out: PathBuf,
    },
    /// Full vs single-token vs EOT-only conditioning comparison.
    Coupling {
        #[arg(long, default_value = "stub")]
        model: String,
        #[arg(long)]
        prompt: String,
        /// Content word whose single-token conditioning is generated.
        #[arg(long)]
        token: String,
        #[arg(long, default_value_t = 4)]
        images: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Object-detector endpoint for DetScore (optional).
        #[arg(long)]
        detector: Option<String>,
        /// Object name whose detection rate is measured.
        #[arg(long)]
        object: Option<String>,
        #[arg(long, default_value_t = DEFAULT_DETECTOR_THRESHOLD)]
        threshold: f64,
        #[arg(long = "out", default_value = "reports")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Render the object-binding benchmark prompts.
    Benchmark {
        /// Pair file (TOML); the bundled 50-pair set when absent.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Write the rendered prompts as JSON here.
        #[arg(long = "out")]
        out: Option<PathBuf>,
        /// Also generate one image per prompt with this model.
        #[arg(long)]
        generate_with: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long = "image-dir", default_value = "benchmark-images")]
        image_dir: PathBuf,
    },
    /// Score benchmark images with a multimodal scorer.
    Score {
        /// Directory holding one image per benchmark prompt id.
        #[arg(long = "images")]
        images: PathBuf,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        rubric: Option<PathBuf>,
        /// Scorer endpoint URL, or "mock:<reply>" for a dry run.
        #[arg(long)]
        scorer: String,
        #[arg(long, default_value_t = 4)]
        concurrency: usize,
        #[arg(long = "out")]
        out: Option<PathBuf>,
    },
}

struct MockScorer(String);

impl ScorerClient for MockScorer {
    fn score_image(&self, _image: &std::path::Path, _instruction: &str) -> Result<String, String> {
        Ok(self.0.clone())
    }
}

fn parse_quadruple(spec: &str) -> Result<AnalogyQuadruple> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 4 || parts.iter().any(|p| p.is_empty()) {
        bail!("quadruple must be four comma-separated words, got {spec:?}");
    }
    Ok(AnalogyQuadruple::new(parts[0], parts[1], parts[2], parts[3]))
}

fn run_generate(args: GenerateArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let body = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            toml::from_str::<GenerationConfig>(&body)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => GenerationConfig::default(),
    };

    if let Some(prompt) = args.prompt {
        config.prompt = prompt;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(steps) = args.steps {
        config.sampling_steps = steps;
    }
    if let Some(lambda) = args.lambda {
        config.optimizer.lambda = lambda;
    }
    if let Some(t_opt) = args.t_opt {
        config.optimizer.t_opt_fraction = t_opt;
    }
    if let Some(step_size) = args.step_size {
        config.optimizer.step_size = step_size;
    }
    if let Some(guidance) = args.guidance {
        config.guidance_scale = guidance;
    }
    if let Some(model) = args.model {
        config.model_ref = model;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    if let Some(label) = args.run_label {
        config.run_label = Some(label);
    }
    if let Some(mode) = args.supervision.as_deref() {
        config.optimizer.supervision_mode = match mode {
            "noun-phrase" => SupervisionMode::NounPhrase,
            "full-prompt" => SupervisionMode::FullPrompt,
            other => bail!("unknown supervision mode {other:?}"),
        };
    }
    if args.no_tome {
        config.enable_tome = false;
    }
    if args.no_ets {
        config.enable_ets = false;
    }
    if args.no_optimizer {
        config.enable_optimizer = false;
    }
    if args.update_ets {
        config.optimizer.update_ets = true;
    }
    if args.dump_attention {
        config.dump_attention = true;
    }
    if let Some(ablation) = args.ablation.as_deref() {
        let ablation = match ablation.to_ascii_lowercase().as_str() {
            "a" => Ablation::A,
            "b" => Ablation::B,
            "c" => Ablation::C,
            "d" => Ablation::D,
            "e" => Ablation::E,
            "f" => Ablation::F,
            "full" => Ablation::Full,
            other => bail!("unknown ablation {other:?}"),
        };
        config = config.with_ablation(ablation);
    }
    if config.prompt.trim().is_empty() {
        bail!("--prompt (or a config file with one) is required");
    }

    let record = generate(&config)?;
    println!("image: {}", record.image_paths[0].display());
    if let Some(manifest) = &record.attention_manifest {
        println!("attention manifest: {}", manifest.display());
    }
    if !record.loss_trace.is_empty() {
        println!(
            "optimized steps: {} (first total loss {:.4}, last {:.4})",
            record.loss_trace.len(),
            record.loss_trace.first().map(|s| s.total).unwrap_or(0.0),
            record.loss_trace.last().map(|s| s.total).unwrap_or(0.0),
        );
    }
    if record.optimizer_aborted {
        println!(
            "warning: optimization aborted on a non-finite loss; \
             image generated from the last finite embeddings"
        );
    }
    println!("total: {:.2}s", record.timings.total_secs);
    Ok(())
}

fn run_analyze(cmd: AnalyzeCommand) -> Result<()> {
    match cmd {
        AnalyzeCommand::Additivity {
            model,
            quadruples,
            out,
        } => {
            let (_, encoder) = resolve_model(&model)?;
            let quadruples = if quadruples.is_empty() {
                default_quadruples()
            } else {
                quadruples
                    .iter()
                    .map(|q| parse_quadruple(q))
                    .collect::<Result<Vec<_>>>()?
            };
            let report = additivity_report(encoder.as_ref(), &quadruples, Some(&out))?;
            let path = out.join("additivity.json");
            report.save(&path)?;
            for r in report.statistics["results"].as_array().into_iter().flatten() {
                let q = &r["quadruple"];
                println!(
                    "cosine(({} - {}), ({} - {})) = {}",
                    q["a"].as_str().unwrap_or("?"),
                    q["b"].as_str().unwrap_or("?"),
                    q["c"].as_str().unwrap_or("?"),
                    q["d"].as_str().unwrap_or("?"),
                    r["cosine"]
                );
            }
            println!("report: {}", path.display());
            Ok(())
        }
        AnalyzeCommand::Entropy {
            model,
            prompt,
            steps,
            seed,
            layers,
            out,
        } => {
            let (adapter, encoder) = resolve_model(&model)?;
            let layers: Vec<LayerId> = if layers.is_empty() {
                adapter
                    .layers()
                    .iter()
                    .take(3)
                    .map(|l| l.id.clone())
                    .collect()
            } else {
                layers.into_iter().map(LayerId::new).collect()
            };
            let (report, analysis) = entropy_position_analysis(
                adapter.as_ref(),
                encoder.as_ref(),
                &prompt,
                steps,
                seed,
                &layers,
                Some(&out),
            )?;
            for (pos, h) in &report.per_position {
                println!("position {pos}: mean entropy {h:.4}");
            }
            let path = out.join("entropy_by_position.json");
            analysis.save(&path)?;
            println!("report: {}", path.display());
            Ok(())
        }
        AnalyzeCommand::Coupling {
            model,
            prompt,
            token,
            images,
            seed,
            steps,
            detector,
            object,
            threshold,
            out,
        } => {
            let (adapter, encoder) = resolve_model(&model)?;
            let config = GenerationConfig {
                prompt,
                seed,
                sampling_steps: steps,
                output_dir: out.join("coupling-images"),
                model_ref: model,
                ..GenerationConfig::default()
            };
            let http_detector = detector.as_deref().map(HttpDetector::new).transpose()?;
            let object = object.unwrap_or_else(|| token.clone());
            let report = coupling_analysis(
                adapter.as_ref(),
                encoder.as_ref(),
                &config,
                &token,
                images,
                http_detector
                    .as_ref()
                    .map(|d| d as &dyn tome_core::eval::detector::DetectorClient),
                &object,
                threshold,
            )?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("coupling.json");
            report.save(&path)?;
            println!("report: {}", path.display());
            Ok(())
        }
    }
}

fn run_eval(cmd: EvalCommand) -> Result<()> {
    match cmd {
        EvalCommand::Benchmark {
            pairs,
            out,
            generate_with,
            seed,
            steps,
            image_dir,
        } => {
            let pairs = match pairs {
                Some(path) => load_pairs(&path)?,
                None => default_pairs(),
            };
            let prompts = build_benchmark(&pairs)?;
            for p in &prompts {
                println!("{}: {}", p.id, p.rendered);
            }
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&prompts)?)?;
                println!("wrote {}", path.display());
            }
            if let Some(model) = generate_with {
                for (i, p) in prompts.iter().enumerate() {
                    let config = GenerationConfig {
                        prompt: p.rendered.clone(),
                        seed: seed + i as u64,
                        sampling_steps: steps,
                        output_dir: image_dir.clone(),
                        run_label: Some(p.id.clone()),
                        model_ref: model.clone(),
                        ..GenerationConfig::default()
                    };
                    let record = generate(&config)?;
                    println!("{} -> {}", p.id, record.image_paths[0].display());
                }
            }
            Ok(())
        }
        EvalCommand::Score {
            images,
            pairs,
            rubric,
            scorer,
            concurrency,
            out,
        } => {
            let pairs = match pairs {
                Some(path) => load_pairs(&path)?,
                None => default_pairs(),
            };
            let prompts = build_benchmark(&pairs)?;
            let rubric = match rubric {
                Some(path) => load_rubric(&path)?,
                None => default_rubric(),
            };
            let mut jobs = Vec::new();
            for p in &prompts {
                // `eval benchmark` writes <image-dir>/<id>/image.png;
                // flat layouts use <id>.png
                let nested = images.join(&p.id).join("image.png");
                let flat = images.join(format!("{}.png", p.id));
                let image = if nested.exists() {
                    nested
                } else if flat.exists() {
                    flat
                } else {
                    continue;
                };
                jobs.push(ScoringJob {
                    prompt_id: p.id.clone(),
                    image,
                    instruction: build_rubric_prompt(p, &rubric)?,
                });
            }
            if jobs.is_empty() {
                bail!("no benchmark images found under {}", images.display());
            }
            let records = if let Some(reply) = scorer.strip_prefix("mock:") {
                score_images(
                    &jobs,
                    &MockScorer(reply.to_string()),
                    concurrency,
                    RetryPolicy::default(),
                )
            } else {
                let client = HttpScorer::new(&scorer, SCORER_TOKEN_ENV)?;
                score_images(&jobs, &client, concurrency, RetryPolicy::default())
            };
            let scored: Vec<f64> = records.iter().filter_map(|r| r.score).collect();
            println!(
                "scored {} / {} images, mean score {:.2}",
                scored.len(),
                records.len(),
                if scored.is_empty() {
                    0.0
                } else {
                    scored.iter().sum::<f64>() / scored.len() as f64
                }
            );
            for r in records.iter().filter(|r| r.score.is_none()) {
                println!(
                    "no score for {} ({})",
                    r.prompt_id,
                    r.error.as_deref().unwrap_or("unknown error")
                );
            }
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&records)?)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

fn run_timings(paths: &[PathBuf]) -> Result<()> {
    let records: Vec<RunRecord> = paths
        .iter()
        .map(|p| RunRecord::load(p).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let report = timing_report(&records)?;
    println!(
        "{:<12} {:>5} {:>9} {:>9} {:>9} {:>9}",
        "config", "runs", "parse", "sampling", "optimize", "total"
    );
    for row in &report.rows {
        println!(
            "{:<12} {:>5} {:>8.3}s {:>8.3}s {:>8.3}s {:>8.3}s",
            row.label,
            row.runs,
            row.mean.parse_secs,
            row.mean.sampling_secs,
            row.mean.optimize_secs,
            row.mean.total_secs
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Generate(args) => run_generate(*args),
        Command::Analyze(cmd) => run_analyze(cmd),
        Command::Eval(cmd) => run_eval(cmd),
        Command::Timings { records } => run_timings(&records),
    }
}
