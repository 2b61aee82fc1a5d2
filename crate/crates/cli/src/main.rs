//! `tagllm`: partition planning, concept acquisition, annotation runs,
//! and evaluation from one binary.
//!
//! Exit codes: 0 success, 1 fatal configuration or I/O error, 2 backend
//! exhaustion, 3 validation failure.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tagllm_core::backend::{
    BackendConfig, HttpBackend, ModelBackend, QueryKind, SimBackend, SimProfile,
};
use tagllm_core::concepts::{acquire_all, ConceptCache, ConceptCard};
use tagllm_core::error::{BackendError, Error as CoreError};
use tagllm_core::eval::{evaluate, rank_classes, ApConvention, RankDirection, ScoreMatrix};
use tagllm_core::partition::{
    default_group_count, parse_partition_response, partition_from_cooccurrence, partition_random,
    validate_partition, CooccurrenceMatrix, PartitionMode, PartitionPlan, PartitionStrategy,
};
use tagllm_core::pipeline::{
    annotate_dataset, cost_report_path, run_single_stage, AnnotationRecord, RunOptions,
    SingleStageMode,
};
use tagllm_core::prompt::{PromptStyle, PromptTemplates};
use tagllm_core::vocab::{load_manifest, CategoryVocabulary};

mod config;

use config::FileConfig;

#[derive(Parser)]
#[command(name = "tagllm", version, about = "Two-stage LLM annotation for image tagging")]
struct Cli {
    /// JSON config file; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a partition plan of the vocabulary.
    Partition(PartitionArgs),
    /// Acquire or import concept cards for every category.
    Concepts(ConceptsArgs),
    /// Annotate a dataset manifest.
    Annotate(AnnotateArgs),
    /// Score an annotation file against ground truth.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Randp,
    Coop,
    Discp,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Sim,
    Http,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StyleArg {
    Simple,
    Careful,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Tagllm,
    Bp,
    Mop,
    Open,
}

#[derive(Args)]
struct HttpArgs {
    /// Chat-completion endpoint base URL.
    #[arg(long)]
    endpoint: Option<String>,
    /// Model name sent with each request.
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long)]
    token_env: Option<String>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    backoff_ms: Option<u64>,
    #[arg(long)]
    timeout_ms: Option<u64>,
    #[arg(long)]
    max_tokens: Option<u32>,
}

impl HttpArgs {
    fn build(&self, cfg: &FileConfig) -> anyhow::Result<BackendConfig> {
        let endpoint = self
            .endpoint
            .clone()
            .or_else(|| cfg.endpoint.clone())
            .ok_or_else(|| anyhow!("http backend needs --endpoint"))?;
        let model = self
            .model
            .clone()
            .or_else(|| cfg.model.clone())
            .ok_or_else(|| anyhow!("http backend needs --model"))?;
        let mut backend = BackendConfig::new(endpoint, model);
        if let Some(v) = self.token_env.clone().or_else(|| cfg.token_env.clone()) {
            backend.token_env = v;
        }
        if let Some(v) = self.max_in_flight.or(cfg.max_in_flight) {
            backend.max_in_flight = v;
        }
        if let Some(v) = self.max_retries.or(cfg.max_retries) {
            backend.retry.max_retries = v;
        }
        if let Some(v) = self.backoff_ms.or(cfg.backoff_ms) {
            backend.retry.base_backoff_ms = v;
        }
        if let Some(v) = cfg.backoff_multiplier {
            backend.retry.multiplier = v;
        }
        if let Some(v) = self.timeout_ms.or(cfg.timeout_ms) {
            backend.timeout_ms = v;
        }
        if let Some(v) = self.max_tokens.or(cfg.max_tokens) {
            backend.max_tokens = v;
        }
        if let Some(v) = cfg.temperature {
            backend.temperature = v;
        }
        Ok(backend)
    }
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Group count; defaults to about ten categories per group.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Co-occurrence matrix JSON for coop/discp without a model backend.
    #[arg(long)]
    matrix: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[command(flatten)]
    http: HttpArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConceptsArgs {
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Curated cards JSONL; bypasses the backend entirely.
    #[arg(long)]
    from_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[command(flatten)]
    http: HttpArgs,
    /// Re-query categories already present in the output cache.
    #[arg(long)]
    refresh: bool,
    /// Use an identity card when acquisition fails for a category.
    #[arg(long)]
    identity_fallback: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnnotateArgs {
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Partition plan JSON; a seeded random plan is built when omitted.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    style: Option<StyleArg>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[command(flatten)]
    http: HttpArgs,
    /// Simulator profile JSON (defaults to a perfect oracle profile).
    #[arg(long)]
    sim_profile: Option<PathBuf>,
    #[arg(long)]
    sim_seed: Option<u64>,
    /// Concept-card cache JSONL; identity cards are used when omitted.
    #[arg(long)]
    concepts: Option<PathBuf>,
    /// Plain binary prompts in stage 2 instead of concept-card prompts.
    #[arg(long)]
    no_cad: bool,
    /// Prompt template override file.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Abort on the first backend error instead of degrading records.
    #[arg(long)]
    fail_fast: bool,
    /// Record per-query subjects, prompt hashes, replies, and outcomes.
    #[arg(long)]
    log_queries: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Ground-truth manifest; every record must carry labels.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Exclude classes with fewer ground-truth positives from macro
    /// averages and mAP.
    #[arg(long)]
    min_positives: Option<u64>,
    /// Add top-k and bottom-k per-class F1 rankings to the report.
    #[arg(long)]
    top_k: Option<usize>,
    /// Conventional average precision (counts the anchor point itself).
    #[arg(long)]
    compat_ap: bool,
    /// Also write the per-class table as CSV.
    #[arg(long)]
    per_class_csv: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

/// 1 = config/IO, 2 = backend, 3 = validation.
fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::Backend(_) => 2,
                CoreError::Eval(_) | CoreError::Pipeline(_) | CoreError::Partition(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<BackendError>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Partition(args) => cmd_partition(args, &cfg),
        Command::Concepts(args) => cmd_concepts(args, &cfg),
        Command::Annotate(args) => cmd_annotate(args, &cfg),
        Command::Eval(args) => cmd_eval(args, &cfg),
    }
}

fn required_path(
    flag: Option<PathBuf>,
    from_config: Option<&PathBuf>,
    name: &str,
) -> anyhow::Result<PathBuf> {
    flag.or_else(|| from_config.cloned())
        .ok_or_else(|| anyhow!("missing --{name}"))
}

fn load_vocab(path: &Path) -> anyhow::Result<Arc<CategoryVocabulary>> {
    Ok(Arc::new(CategoryVocabulary::load(path)?))
}

fn csv_quote(field: &str) -> String {
    if field.contains([',', '"', '\n']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn atomic_write(path: &Path, content: &str) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn cmd_partition(args: PartitionArgs, cfg: &FileConfig) -> anyhow::Result<()> {
    let vocab_path = required_path(args.vocab, cfg.vocab.as_ref(), "vocab")?;
    let out = required_path(args.out, cfg.out.as_ref(), "out")?;
    let vocab = load_vocab(&vocab_path)?;
    let q = vocab.len();
    let m = args.m.or(cfg.m).unwrap_or_else(|| default_group_count(q));
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let strategy = args
        .strategy
        .or_else(|| cfg.strategy_arg())
        .unwrap_or(StrategyArg::Randp);

    let plan = match strategy {
        StrategyArg::Randp => partition_random(q, m, seed)?,
        StrategyArg::Coop | StrategyArg::Discp => {
            let mode = if strategy == StrategyArg::Coop {
                PartitionMode::Co
            } else {
                PartitionMode::Disco
            };
            let matrix_path = args.matrix.clone().or_else(|| cfg.matrix.clone());
            if let Some(matrix_path) = matrix_path {
                let matrix = CooccurrenceMatrix::load(&matrix_path, &vocab)?;
                partition_from_cooccurrence(&matrix, m, mode)?
            } else {
                let backend = build_backend(
                    args.backend.or_else(|| cfg.backend_arg()),
                    &args.http,
                    cfg,
                    &vocab,
                    None,
                    None,
                )?;
                let names: Vec<&str> = vocab.names().iter().map(String::as_str).collect();
                let prompt =
                    PromptTemplates::default().render_partition_query(mode, q, m, &names)?;
                let reply = backend
                    .query(None, &prompt, &QueryKind::Partition { m })
                    .map_err(CoreError::from)?;
                let tag = if strategy == StrategyArg::Coop {
                    PartitionStrategy::CooP
                } else {
                    PartitionStrategy::DiscP
                };
                parse_partition_response(&reply.text, &vocab, m, tag)?
            }
        }
    };
    let report = validate_partition(&plan, q);
    if !report.is_valid() {
        bail!(CoreError::Partition(report.to_string()));
    }
    atomic_write(&out, &plan.to_json())?;
    println!(
        "wrote {} ({} groups over {} categories)",
        out.display(),
        plan.m(),
        q
    );
    Ok(())
}

fn cmd_concepts(args: ConceptsArgs, cfg: &FileConfig) -> anyhow::Result<()> {
    let vocab_path = required_path(args.vocab, cfg.vocab.as_ref(), "vocab")?;
    let out = required_path(args.out, cfg.out.as_ref(), "out")?;
    let vocab = load_vocab(&vocab_path)?;

    let mut cache = if out.exists() {
        ConceptCache::load(&out, &vocab)?
    } else {
        ConceptCache::new()
    };

    if let Some(from_file) = args.from_file.or_else(|| cfg.from_file.clone()) {
        let imported = ConceptCache::load(&from_file, &vocab)?;
        let mut filled = 0;
        for id in 0..vocab.len() {
            match imported.get(id) {
                Some(card) => cache.insert(card.clone(), &vocab)?,
                None => {
                    if !cache.contains(id) {
                        cache.insert(ConceptCard::identity(id, &vocab), &vocab)?;
                        filled += 1;
                    }
                }
            }
        }
        cache.save(&out, &vocab)?;
        println!(
            "imported {} cards into {} ({filled} identity cards filled in)",
            imported.len(),
            out.display()
        );
        return Ok(());
    }

    let backend = build_backend(
        args.backend.or_else(|| cfg.backend_arg()),
        &args.http,
        cfg,
        &vocab,
        None,
        None,
    )?;
    let templates = PromptTemplates::default();
    let stats = acquire_all(
        &vocab,
        backend.as_ref(),
        &templates,
        &mut cache,
        args.refresh,
        args.identity_fallback,
    )?;
    cache.save(&out, &vocab)?;
    println!(
        "acquired {} cards ({} cached, {} identity fallbacks) into {}",
        stats.acquired,
        stats.cached,
        stats.fallbacks,
        out.display()
    );
    Ok(())
}

fn build_backend(
    kind: Option<BackendArg>,
    http: &HttpArgs,
    cfg: &FileConfig,
    vocab: &Arc<CategoryVocabulary>,
    sim_profile: Option<&Path>,
    sim_seed: Option<u64>,
) -> anyhow::Result<Box<dyn ModelBackend>> {
    match kind.unwrap_or(BackendArg::Sim) {
        BackendArg::Http => {
            let config = http.build(cfg)?;
            Ok(Box::new(HttpBackend::new(config)?))
        }
        BackendArg::Sim => {
            let mut profile = match sim_profile {
                Some(path) => SimProfile::load(path, vocab.len())?,
                None => SimProfile::oracle(vocab.len()),
            };
            if let Some(seed) = sim_seed {
                profile.seed = seed;
            }
            Ok(Box::new(SimBackend::new(profile, Arc::clone(vocab))?))
        }
    }
}

fn cmd_annotate(args: AnnotateArgs, cfg: &FileConfig) -> anyhow::Result<()> {
    let vocab_path = required_path(args.vocab, cfg.vocab.as_ref(), "vocab")?;
    let manifest_path = required_path(args.manifest, cfg.manifest.as_ref(), "manifest")?;
    let out = required_path(args.out, cfg.out.as_ref(), "out")?;
    let vocab = load_vocab(&vocab_path)?;
    let manifest = load_manifest(&manifest_path, &vocab)?;
    let q = vocab.len();

    let mode = args.mode.or_else(|| cfg.mode_arg()).unwrap_or(ModeArg::Tagllm);
    let style = match args.style.or_else(|| cfg.style_arg()) {
        Some(StyleArg::Simple) => PromptStyle::Simple,
        _ => PromptStyle::CarefullyDesigned,
    };
    let templates = match args.templates.clone().or_else(|| cfg.templates.clone()) {
        Some(path) => PromptTemplates::with_overrides(&path)?,
        None => PromptTemplates::default(),
    };

    let plan = match args.plan.clone().or_else(|| cfg.plan.clone()) {
        Some(path) => {
            let plan = PartitionPlan::load(&path)?;
            let report = validate_partition(&plan, q);
            if !report.is_valid() {
                bail!(CoreError::Partition(format!("{}: {report}", path.display())));
            }
            Some(plan)
        }
        None => match mode {
            ModeArg::Tagllm => {
                let m = args.m.or(cfg.m).unwrap_or_else(|| default_group_count(q));
                let seed = args.seed.or(cfg.seed).unwrap_or(0);
                Some(partition_random(q, m, seed)?)
            }
            _ => None,
        },
    };

    let cards = match args.concepts.clone().or_else(|| cfg.concepts.clone()) {
        Some(path) => ConceptCache::load(&path, &vocab)?,
        None => ConceptCache::new(),
    };

    let sim_profile = args.sim_profile.clone().or_else(|| cfg.sim_profile.clone());
    let backend = build_backend(
        args.backend.or_else(|| cfg.backend_arg()),
        &args.http,
        cfg,
        &vocab,
        sim_profile.as_deref(),
        args.sim_seed.or(cfg.sim_seed),
    )?;

    let opts = RunOptions {
        vocab: &vocab,
        backend: backend.as_ref(),
        templates: &templates,
        style,
        parallelism: args.parallelism.or(cfg.parallelism).unwrap_or(1).max(1),
        fail_fast: args.fail_fast || cfg.fail_fast.unwrap_or(false),
        log_queries: args.log_queries || cfg.log_queries.unwrap_or(false),
        use_cad: !(args.no_cad || cfg.no_cad.unwrap_or(false)),
        output: Some(&out),
    };

    let (records, cost) = match mode {
        ModeArg::Tagllm => {
            let plan = plan.as_ref().expect("tagllm mode always has a plan");
            annotate_dataset(&manifest, plan, &cards, &opts)?
        }
        ModeArg::Bp => run_single_stage(&manifest, SingleStageMode::PureBp, None, &opts)?,
        ModeArg::Mop => {
            run_single_stage(&manifest, SingleStageMode::PureMop, plan.as_ref(), &opts)?
        }
        ModeArg::Open => run_single_stage(&manifest, SingleStageMode::OpenEnded, None, &opts)?,
    };
    let degraded = records.iter().filter(|r| r.degraded).count();
    println!(
        "annotated {} images ({} queries, {:.2}x below the per-class baseline, {} degraded) -> {}",
        records.len(),
        cost.total_queries,
        cost.reduction_factor,
        degraded,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs, cfg: &FileConfig) -> anyhow::Result<()> {
    let vocab_path = required_path(args.vocab, cfg.vocab.as_ref(), "vocab")?;
    let manifest_path = required_path(args.manifest, cfg.manifest.as_ref(), "manifest")?;
    let annotations_path = required_path(args.annotations, cfg.annotations.as_ref(), "annotations")?;
    let vocab = load_vocab(&vocab_path)?;
    let manifest = load_manifest(&manifest_path, &vocab)?;

    let text = std::fs::read_to_string(&annotations_path)
        .with_context(|| format!("reading {}", annotations_path.display()))?;
    let mut by_id: HashMap<String, AnnotationRecord> = HashMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let record = AnnotationRecord::from_json_line(line, &vocab)?;
        by_id.insert(record.image_id.clone(), record);
    }

    let mut predictions = Vec::with_capacity(manifest.len());
    let mut ground_truth = Vec::with_capacity(manifest.len());
    for image in &manifest {
        let truth = image.ground_truth.clone().ok_or_else(|| {
            CoreError::Eval(format!("manifest image {:?} has no labels", image.image_id))
        })?;
        let record = by_id.remove(&image.image_id).ok_or_else(|| {
            CoreError::Eval(format!("no annotation for image {:?}", image.image_id))
        })?;
        predictions.push(record.labels);
        ground_truth.push(truth);
    }
    if !by_id.is_empty() {
        eprintln!("warning: {} annotations not in the manifest were ignored", by_id.len());
    }

    let convention = if args.compat_ap || cfg.compat_ap.unwrap_or(false) {
        ApConvention::Inclusive
    } else {
        ApConvention::Exclusive
    };
    let min_positives = args.min_positives.or(cfg.min_positives).unwrap_or(1);
    let scores = ScoreMatrix::from_labels(&predictions)?;
    let mut report = evaluate(
        &predictions,
        &ground_truth,
        Some(&scores),
        min_positives,
        convention,
    )?;

    let cost_path = cost_report_path(&annotations_path);
    if cost_path.exists() {
        let cost_text = std::fs::read_to_string(&cost_path)
            .with_context(|| format!("reading {}", cost_path.display()))?;
        report.cost = Some(serde_json::from_str(&cost_text)?);
    }

    if let Some(csv_path) = args.per_class_csv.clone().or_else(|| cfg.per_class_csv.clone()) {
        let ap_by_class: HashMap<usize, f64> = report
            .ap_per_class
            .iter()
            .flatten()
            .map(|c| (c.category, c.ap))
            .collect();
        let mut csv = String::from("category,name,precision,recall,f1,positives,ap\n");
        for class in &report.per_class {
            let ap = ap_by_class
                .get(&class.category)
                .map(|ap| format!("{ap:.6}"))
                .unwrap_or_default();
            csv.push_str(&format!(
                "{},{},{:.4},{:.4},{:.4},{},{}\n",
                class.category,
                csv_quote(vocab.name(class.category)),
                class.precision,
                class.recall,
                class.f1,
                class.positives,
                ap
            ));
        }
        atomic_write(&csv_path, &csv)?;
    }

    let mut value = serde_json::to_value(&report)?;
    if let Some(k) = args.top_k.or(cfg.top_k) {
        let f1_values: Vec<(usize, f64)> =
            report.per_class.iter().map(|c| (c.category, c.f1)).collect();
        let named = |pairs: Vec<(usize, f64)>| -> Vec<serde_json::Value> {
            pairs
                .into_iter()
                .map(|(id, v)| {
                    serde_json::json!({"category": vocab.name(id), "f1": v})
                })
                .collect()
        };
        let object = value.as_object_mut().expect("report is an object");
        object.insert(
            "top_k".into(),
            named(rank_classes(&f1_values, k, RankDirection::Top)).into(),
        );
        object.insert(
            "bottom_k".into(),
            named(rank_classes(&f1_values, k, RankDirection::Bottom)).into(),
        );
    }
    let rendered = serde_json::to_string_pretty(&value)?;
    match args.out.or_else(|| cfg.out.clone()) {
        Some(out) => {
            atomic_write(&out, &rendered)?;
            println!(
                "OF1 {:.2} CF1 {:.2} mAP {:.4} -> {}",
                report.of1,
                report.cf1,
                report.map.unwrap_or(f64::NAN),
                out.display()
            );
        }
        None => println!("{rendered}"),
    }
    Ok(())
}
