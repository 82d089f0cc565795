//! `adee`: synthetic model generation, exit-layer profiling, policy
//! evaluation, and report rendering as one reproducible pipeline.
//!
//! Exit codes: 0 success, 1 runtime/data error, 2 usage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use adee_core::bench::report::{
    emit_eval_report, render_eval_csv, render_eval_markdown, render_exit_table_csv,
    render_exit_table_markdown, ReportFormat,
};
use adee_core::bench::synth::{dataset_to_jsonl, default_mapping, planted_dataset, planted_task};
use adee_core::bench::{
    evaluate, load_dataset, split_dataset, EvalReport, EvalResult, Policy, TaskSpec,
};
use adee_core::model::{
    build_planted_model, build_random_model, load_model, save_model, Distractor, LayerStack,
    ModelConfig, PlantSpec,
};
use adee_core::profiler::{profile_task, ProfileReport, SearchMode};

use config::{resolve_seed, FileConfig};

#[derive(Parser)]
#[command(name = "adee", version, about = "Early-exit inference laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model file (planted or random), optionally
    /// with a matching dataset and task file.
    GenModel(GenModelArgs),
    /// Find the optimal exit layer for a task and write a JSON report.
    Profile(ProfileArgs),
    /// Evaluate a policy against the full-inference baseline.
    Eval(EvalArgs),
    /// Render stored JSON reports as markdown or CSV tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenModelArgs {
    /// Number of transformer layers.
    #[arg(long)]
    layers: usize,
    /// Plant layer: the depth from which the planted answer becomes
    /// decodable. Omit for a plain random model.
    #[arg(long)]
    plant: Option<usize>,
    /// Number of planted classes (planted models only).
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Layer at which one planted key starts decoding wrongly, making
    /// full depth worse than the plant layer (planted models only).
    #[arg(long)]
    distract_layer: Option<usize>,
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    /// Embedding width (random models only; planted models derive it).
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    d_ff: usize,
    #[arg(long, default_value_t = 64)]
    max_seq: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output model path.
    #[arg(long)]
    out: PathBuf,
    /// Also write a matching JSONL dataset here (planted models only).
    #[arg(long)]
    dataset_out: Option<PathBuf>,
    /// Also write a matching task JSON here (planted models only).
    #[arg(long)]
    task_out: Option<PathBuf>,
    /// Examples per class in the generated dataset.
    #[arg(long, default_value_t = 12)]
    examples: usize,
    /// Confidence threshold written into the generated task file.
    #[arg(long, default_value_t = 0.0)]
    threshold: f32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Staged,
    Exhaustive,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Split seed (ADEE_SEED overrides).
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Optional JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    Full,
    Fixed,
    Dynamic,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    /// Exit layer for the fixed policy.
    #[arg(long)]
    exit_layer: Option<usize>,
    /// Profile report supplying the exit layer for the fixed policy.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Confidence threshold override for the dynamic policy.
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// md, csv, or json.
    #[arg(long)]
    format: Option<String>,
    /// Include wall-clock latency in the artifact. Off by default so
    /// artifacts are byte-reproducible.
    #[arg(long)]
    wall_clock: bool,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Stored JSON reports (profile or eval).
    #[arg(long, num_args = 0..)]
    input: Vec<PathBuf>,
    /// md or csv.
    #[arg(long, default_value = "md")]
    format: String,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Errors that indicate misuse of the CLI rather than bad data.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenModel(args) => cmd_gen_model(args),
        Command::Profile(args) => cmd_profile(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn init_jobs(jobs: Option<usize>) {
    if let Some(n) = jobs {
        // Ignore the error when a pool already exists (tests, repeat calls).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn write_or_stdout(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => {
            std::fs::write(p, content).with_context(|| format!("writing {}", p.display()))?
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn cmd_gen_model(args: GenModelArgs) -> Result<()> {
    if args.layers < 1 {
        return Err(usage("--layers must be at least 1"));
    }
    let model = match args.plant {
        Some(plant_layer) => {
            if plant_layer < 1 || plant_layer > args.layers {
                return Err(usage(format!(
                    "--plant {} must lie in 1..={}",
                    plant_layer, args.layers
                )));
            }
            if args.classes < 1 {
                return Err(usage("--classes must be at least 1"));
            }
            let mapping = default_mapping(args.classes, args.vocab);
            let mut spec = PlantSpec {
                vocab_size: args.vocab,
                max_seq: args.max_seq,
                ..PlantSpec::new(args.layers, plant_layer, mapping, args.seed)
            };
            if let Some(layer) = args.distract_layer {
                if layer <= plant_layer || layer > args.layers {
                    return Err(usage(format!(
                        "--distract-layer {} must lie in {}..={}",
                        layer,
                        plant_layer + 1,
                        args.layers
                    )));
                }
                let key = *spec.mapping.keys().next().expect("non-empty mapping");
                spec.distractor = Some(Distractor { layer, key });
            }
            let model = build_planted_model(&spec)?;
            if let Some(task_path) = &args.task_out {
                planted_task(&spec, args.threshold)
                    .save(task_path)
                    .with_context(|| format!("writing {}", task_path.display()))?;
            }
            if let Some(data_path) = &args.dataset_out {
                if args.examples < 1 {
                    return Err(usage("--examples must be at least 1"));
                }
                let examples = planted_dataset(&spec, args.examples, args.seed ^ 0x9e3779b9);
                std::fs::write(data_path, dataset_to_jsonl(&examples))
                    .with_context(|| format!("writing {}", data_path.display()))?;
            }
            model
        }
        None => {
            if args.dataset_out.is_some()
                || args.task_out.is_some()
                || args.distract_layer.is_some()
            {
                return Err(usage(
                    "--dataset-out/--task-out/--distract-layer require --plant",
                ));
            }
            let config = ModelConfig {
                n_layers: args.layers,
                d_model: args.d_model,
                n_heads: args.heads,
                d_ff: args.d_ff,
                vocab_size: args.vocab,
                max_seq: args.max_seq,
            };
            build_random_model(&config, args.seed)?
        }
    };
    save_model(&model, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!(
        "wrote {} ({} layers, vocab {})",
        args.out.display(),
        model.n_layers(),
        model.config().vocab_size
    );
    Ok(())
}

struct TaskInputs {
    model: LayerStack,
    task: TaskSpec,
    examples: Vec<adee_core::bench::LabeledExample>,
}

fn load_task_inputs(
    model: Option<&Path>,
    task: Option<&Path>,
    dataset: Option<&Path>,
    cfg: &FileConfig,
) -> Result<TaskInputs> {
    let model_path = model
        .map(Path::to_path_buf)
        .or_else(|| cfg.model.clone())
        .ok_or_else(|| usage("--model is required"))?;
    let task_path = task
        .map(Path::to_path_buf)
        .or_else(|| cfg.task.clone())
        .ok_or_else(|| usage("--task is required"))?;
    let dataset_path = dataset
        .map(Path::to_path_buf)
        .or_else(|| cfg.dataset.clone())
        .ok_or_else(|| usage("--dataset is required"))?;
    let model = load_model(&model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;
    let task = TaskSpec::load(&task_path)
        .with_context(|| format!("loading task {}", task_path.display()))?;
    let examples = load_dataset(&dataset_path, &task, model.config().vocab_size)
        .with_context(|| format!("loading dataset {}", dataset_path.display()))?;
    Ok(TaskInputs {
        model,
        task,
        examples,
    })
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    init_jobs(args.jobs.or(cfg.jobs));
    let seed = resolve_seed(args.seed, &cfg)?;
    let mode = match args.mode {
        Some(ModeArg::Staged) => SearchMode::Staged,
        Some(ModeArg::Exhaustive) => SearchMode::Exhaustive,
        None => match cfg.mode.as_deref() {
            Some("staged") | None => SearchMode::Staged,
            Some("exhaustive") => SearchMode::Exhaustive,
            Some(other) => return Err(usage(format!("unknown mode '{other}' in config"))),
        },
    };
    let inputs = load_task_inputs(
        args.model.as_deref(),
        args.task.as_deref(),
        args.dataset.as_deref(),
        &cfg,
    )?;
    let split = split_dataset(&inputs.examples, seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let labeled: Vec<_> = split
        .profiling
        .iter()
        .map(|e| e.to_labeled_input())
        .collect();
    let report = profile_task(&inputs.model, &labeled, &inputs.task.match_spec, mode)?;
    let out = args.out.or(cfg.output);
    write_or_stdout(out.as_deref(), &report.to_json())?;
    if let Some(p) = &out {
        eprintln!(
            "profiled task '{}': optimal layer {} -> {}",
            report.task_id,
            report
                .optimal_layer
                .map(|l| l.to_string())
                .unwrap_or_else(|| "none".into()),
            p.display()
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = FileConfig::load(args.config.as_deref())?;
    init_jobs(args.jobs.or(cfg.jobs));
    let seed = resolve_seed(args.seed, &cfg)?;
    let format: ReportFormat = args
        .format
        .as_deref()
        .or(cfg.format.as_deref())
        .unwrap_or("json")
        .parse()
        .map_err(usage)?;
    let policy_arg = match args.policy {
        Some(p) => p,
        None => match cfg.policy.as_deref() {
            Some("full") | None => PolicyArg::Full,
            Some("fixed") => PolicyArg::Fixed,
            Some("dynamic") => PolicyArg::Dynamic,
            Some(other) => return Err(usage(format!("unknown policy '{other}' in config"))),
        },
    };

    let mut inputs = load_task_inputs(
        args.model.as_deref(),
        args.task.as_deref(),
        args.dataset.as_deref(),
        &cfg,
    )?;
    let split = split_dataset(&inputs.examples, seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    if split.eval.is_empty() {
        bail!("the evaluation side of the split is empty; provide at least 9 examples per class");
    }

    let baseline = evaluate(&inputs.model, &split.eval, &inputs.task, Policy::Full)?;
    let early = match policy_arg {
        PolicyArg::Full => baseline.clone(),
        PolicyArg::Dynamic => {
            if let Some(tau) = args.threshold.or(cfg.threshold) {
                inputs.task.match_spec.confidence_threshold = tau;
            }
            evaluate(&inputs.model, &split.eval, &inputs.task, Policy::Dynamic)?
        }
        PolicyArg::Fixed => {
            let layer = match (args.exit_layer.or(cfg.exit_layer), &args.profile) {
                (Some(layer), _) => Some(layer),
                (None, Some(profile_path)) => {
                    let text = std::fs::read_to_string(profile_path)
                        .with_context(|| format!("reading {}", profile_path.display()))?;
                    let report = ProfileReport::from_json(&text)
                        .with_context(|| format!("parsing {}", profile_path.display()))?;
                    report.optimal_layer
                }
                (None, None) => {
                    return Err(usage(
                        "--policy fixed requires --exit-layer or --profile <report.json>",
                    ))
                }
            };
            match layer {
                Some(layer) => evaluate(
                    &inputs.model,
                    &split.eval,
                    &inputs.task,
                    Policy::Fixed(layer),
                )?,
                // The profiled task never produced a correct prediction at
                // any depth; every class renders as a dash.
                None => EvalResult::unavailable(
                    &inputs.task.match_spec.task_id,
                    inputs.model.n_layers(),
                    &inputs.task.match_spec.classes,
                ),
            }
        }
    };

    let mut report = EvalReport::new(baseline, early);
    if !args.wall_clock {
        report.strip_wall();
    }
    match args.out.or(cfg.output) {
        Some(path) => {
            emit_eval_report(&report, format, &path)?;
            eprintln!("wrote evaluation report -> {}", path.display());
        }
        None => {
            let content = match format {
                ReportFormat::Md => render_eval_markdown(&report),
                ReportFormat::Csv => render_eval_csv(&report),
                ReportFormat::Json => report.to_json(),
            };
            print!("{content}");
        }
    }
    Ok(())
}

enum StoredReport {
    Profile(Box<ProfileReport>),
    Eval(Box<EvalReport>),
}

fn load_stored_report(path: &Path) -> Result<StoredReport> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(p) = ProfileReport::from_json(&text) {
        return Ok(StoredReport::Profile(Box::new(p)));
    }
    if let Ok(e) = EvalReport::from_json(&text) {
        return Ok(StoredReport::Eval(Box::new(e)));
    }
    Err(anyhow!(
        "{} is neither a profile report nor an evaluation report",
        path.display()
    ))
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    if args.input.is_empty() {
        bail!("no results");
    }
    let format: ReportFormat = args.format.parse().map_err(usage)?;
    if format == ReportFormat::Json {
        return Err(usage(
            "report renders md or csv; the inputs are already json",
        ));
    }
    let mut profiles = Vec::new();
    let mut evals = Vec::new();
    for path in &args.input {
        match load_stored_report(path)? {
            StoredReport::Profile(p) => profiles.push(*p),
            StoredReport::Eval(e) => evals.push(*e),
        }
    }
    let mut sections = Vec::new();
    if !profiles.is_empty() {
        sections.push(match format {
            ReportFormat::Md => render_exit_table_markdown(&profiles)?,
            ReportFormat::Csv => render_exit_table_csv(&profiles)?,
            ReportFormat::Json => unreachable!(),
        });
    }
    for eval in &evals {
        sections.push(match format {
            ReportFormat::Md => render_eval_markdown(eval),
            ReportFormat::Csv => render_eval_csv(eval),
            ReportFormat::Json => unreachable!(),
        });
    }
    write_or_stdout(args.out.as_deref(), &sections.join("\n"))?;
    Ok(())
}
