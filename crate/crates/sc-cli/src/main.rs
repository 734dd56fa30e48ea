//! Command-line front end for the self-correction evaluation harness.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sc_core::analysis::{self, SweepAxis, SweepTable};
use sc_core::config::{build_run_config, ConfigError, FileConfig, Overrides};
use sc_core::extract;
use sc_core::pipeline::{self, PipelineError, RunConfig};
use sc_core::prompts::{Linter, Order, PromptClass};
use sc_core::theory::{
    decision_prob, decision_variance, lemma1_accuracy, AbilityModel, DecisionModel, Temperature,
};

#[derive(Parser)]
#[command(
    name = "sc-harness",
    about = "Runs three-stage verify-and-revise conversations against chat backends \
             and reports before/after accuracy",
    version
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Execute one run and print its summary.
    Run(RunArgs),
    /// Execute several runs varying one axis and emit sweep tables.
    Sweep(SweepArgs),
    /// Emit closed-form model curves as CSV, with no backend.
    Simulate(SimulateArgs),
    /// Classify prompt files as Biased, WeaklyBiased, or Fair.
    Lint(LintArgs),
    /// Re-summarize an existing record file.
    Report(ReportArgs),
    /// Run every extractor over a text file and print the results as JSON.
    ExtractDebug(ExtractDebugArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML configuration file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prompt set (1 = biased, 2 = weakly biased, 3 = fair).
    #[arg(long)]
    set: Option<u8>,
    /// Conversation case (1..4: with/without reasoning x decision order).
    #[arg(long)]
    case: Option<u8>,
    /// Stage-1 temperature.
    #[arg(long)]
    t1: Option<f64>,
    /// Stage-2 temperature.
    #[arg(long)]
    t2: Option<f64>,
    /// Stage-3 temperature.
    #[arg(long)]
    t3: Option<f64>,
    /// Sets all three stage temperatures at once.
    #[arg(long)]
    temp: Option<f64>,
    /// Replay stage-1 texts from a record file written with --save-transcripts.
    #[arg(long)]
    freeze_stage1: Option<PathBuf>,
    /// Run only the first N dataset questions.
    #[arg(long)]
    first_n: Option<usize>,
    /// Backend kind: "sim" or "http".
    #[arg(long)]
    backend: Option<String>,
    /// Simulator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum questions in flight.
    #[arg(long)]
    parallel: Option<usize>,
    /// Record output path (JSONL, resumable).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Store raw stage texts in each record.
    #[arg(long)]
    save_transcripts: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Temperature,
    Set,
    Case,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Which configuration field the sweep varies.
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated axis values, e.g. "0,0.5,1.0,1.5" or "1,3".
    #[arg(long)]
    values: String,
    /// Directory for sweep_summary.csv and sweep_counts.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CurveArg {
    /// Keep probability and decision variance against temperature.
    Variance,
    /// Expected accuracy under the hallucination model over an ability grid.
    Lemma1,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    curve: CurveArg,
    /// Keep confidence for the variance curve.
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    /// Largest temperature in the variance curve.
    #[arg(long, default_value_t = 2.0)]
    t_max: f64,
    /// Number of temperature samples.
    #[arg(long, default_value_t = 41)]
    steps: usize,
    /// Number of answer options for the lemma1 grid.
    #[arg(long, default_value_t = 5)]
    k: u32,
    /// Output CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LintArgs {
    /// Prompt text files to classify.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Directory holding an optional lexicon.toml override.
    #[arg(long)]
    lexicon_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Record file produced by `run`.
    records: PathBuf,
}

#[derive(Args)]
struct ExtractDebugArgs {
    /// Text file holding one model response.
    file: PathBuf,
}

enum AppError {
    Config(String),
    Runtime(String),
}

impl AppError {
    fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Config(m) | AppError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        AppError::Config(e.to_string())
    }
}

impl From<PipelineError> for AppError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_)
            | PipelineError::Dataset(_)
            | PipelineError::Prompt(_)
            | PipelineError::Backend(_)
            | PipelineError::FrozenGap(_)
            | PipelineError::CorruptRecords { .. }
            | PipelineError::ResumeMismatch(_) => AppError::Config(e.to_string()),
            PipelineError::Io { .. } | PipelineError::StageFailure { .. } => {
                AppError::Runtime(e.to_string())
            }
        }
    }
}

impl From<analysis::AnalysisError> for AppError {
    fn from(e: analysis::AnalysisError) -> Self {
        match e {
            analysis::AnalysisError::AxisMismatch(_) => AppError::Config(e.to_string()),
            _ => AppError::Runtime(e.to_string()),
        }
    }
}

fn io_runtime(path: &std::path::Path, e: std::io::Error) -> AppError {
    AppError::Runtime(format!("{}: {e}", path.display()))
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.verb {
        Verb::Run(args) => run_verb(args),
        Verb::Sweep(args) => sweep_verb(args),
        Verb::Simulate(args) => simulate_verb(args),
        Verb::Lint(args) => lint_verb(args),
        Verb::Report(args) => report_verb(args),
        Verb::ExtractDebug(args) => extract_debug_verb(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.exit_code());
        }
    }
}

fn effective_config(args: &ConfigArgs) -> Result<RunConfig, AppError> {
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let overrides = Overrides {
        set: args.set,
        case: args.case,
        t1: args.t1,
        t2: args.t2,
        t3: args.t3,
        temp: args.temp,
        freeze_stage1: args.freeze_stage1.clone(),
        first_n: args.first_n,
        backend: args.backend.clone(),
        seed: args.seed,
        parallel: args.parallel,
        out: args.out.clone(),
        save_transcripts: args.save_transcripts,
    };
    Ok(build_run_config(&file, &overrides)?)
}

fn echo_config(config: &RunConfig) -> Result<(), AppError> {
    let fingerprint = config
        .dataset
        .fingerprint()
        .map_err(|e| AppError::Config(e.to_string()))?;
    let backend = match &config.backend {
        sc_core::backend::BackendConfig::Http(p) => format!("http ({} at {})", p.model, p.endpoint),
        sc_core::backend::BackendConfig::Simulated(p) => format!("simulated (seed {})", p.seed),
    };
    println!("backend:  {backend}");
    println!("prompts:  {} case{}", config.set, config.case.number());
    println!(
        "temps:    t1={} t2={} t3={}",
        config.temps.t1, config.temps.t2, config.temps.t3
    );
    println!("dataset:  {fingerprint}");
    if let Some(frozen) = &config.frozen_stage1 {
        println!("frozen:   {}", frozen.display());
    }
    if let Some(out) = &config.output {
        println!("records:  {}", out.display());
    }
    Ok(())
}

fn print_summary(summary: &analysis::RunSummary) {
    let c = summary.counts;
    println!("n:          {}", summary.n);
    println!("errors:     {}", summary.error_count);
    println!("acc_before: {:.2}", summary.acc_before_round2());
    println!("acc_after:  {:.2}", summary.acc_after_round2());
    println!("delta_sc:   {:+.2}", summary.delta_sc_round2());
    println!(
        "counts:     C2C={} C2I={} I2C={} I2I-C={} I2I-NC={}",
        c.c2c, c.c2i, c.i2c, c.i2i_c, c.i2i_nc
    );
}

fn run_verb(args: RunArgs) -> Result<i32, AppError> {
    let config = effective_config(&args.config)?;
    echo_config(&config)?;
    let output = pipeline::run_all(&config)?;
    println!("calls:      {}", output.backend_calls);
    let summary = analysis::summarize(&output.records)?;
    print_summary(&summary);
    Ok(0)
}

fn sweep_verb(args: SweepArgs) -> Result<i32, AppError> {
    let base = effective_config(&args.config)?;
    if base.output.is_some() {
        return Err(AppError::Config(
            "sweeps keep per-point records in memory; drop the output path".to_string(),
        ));
    }
    let values: Vec<&str> = args
        .values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(AppError::Config("--values is empty".to_string()));
    }

    let mut configs = Vec::with_capacity(values.len());
    let axis = match args.axis {
        AxisArg::Temperature => SweepAxis::Temperature,
        AxisArg::Set => SweepAxis::PromptSet,
        AxisArg::Case => SweepAxis::Case,
    };
    for value in &values {
        let mut point = base.clone();
        match args.axis {
            AxisArg::Temperature => {
                let t: f64 = value
                    .parse()
                    .map_err(|_| AppError::Config(format!("bad temperature {value:?}")))?;
                point.temps = sc_core::backend::StageTemperatures::uniform(t);
            }
            AxisArg::Set => {
                let n: u8 = value
                    .parse()
                    .map_err(|_| AppError::Config(format!("bad set {value:?}")))?;
                point.set = sc_core::prompts::PromptSetId::from_number(n)
                    .ok_or_else(|| AppError::Config(format!("unknown prompt set {n}")))?;
            }
            AxisArg::Case => {
                let n: u8 = value
                    .parse()
                    .map_err(|_| AppError::Config(format!("bad case {value:?}")))?;
                point.case = sc_core::prompts::CaseConfig::from_number(n)
                    .ok_or_else(|| AppError::Config(format!("unknown case {n}")))?;
            }
        }
        configs.push(point);
    }

    let table: SweepTable = analysis::sweep(&configs, axis)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| io_runtime(&args.out_dir, e))?;
    let summary_path = args.out_dir.join("sweep_summary.csv");
    std::fs::write(&summary_path, table.summary_csv()?).map_err(|e| io_runtime(&summary_path, e))?;
    let counts_path = args.out_dir.join("sweep_counts.csv");
    std::fs::write(&counts_path, table.counts_csv()?).map_err(|e| io_runtime(&counts_path, e))?;
    print!("{}", table.text_table());
    println!("wrote {}", summary_path.display());
    println!("wrote {}", counts_path.display());
    Ok(0)
}

fn simulate_verb(args: SimulateArgs) -> Result<i32, AppError> {
    let csv = match args.curve {
        CurveArg::Variance => variance_curve(&args)?,
        CurveArg::Lemma1 => lemma1_curve(&args)?,
    };
    match &args.out {
        Some(path) => {
            std::fs::write(path, csv).map_err(|e| io_runtime(path, e))?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(0)
}

fn variance_curve(args: &SimulateArgs) -> Result<String, AppError> {
    if args.steps < 2 {
        return Err(AppError::Config("--steps must be at least 2".to_string()));
    }
    let model = DecisionModel::new(args.alpha).map_err(|e| AppError::Config(e.to_string()))?;
    let mut out = String::from("temperature,keep_prob,variance\n");
    for i in 0..args.steps {
        let t = args.t_max * i as f64 / (args.steps - 1) as f64;
        let temperature = Temperature::new(t).map_err(|e| AppError::Config(e.to_string()))?;
        let p = decision_prob(model, temperature);
        let v = decision_variance(model, temperature);
        out.push_str(&format!("{t:.6},{p:.6},{v:.6}\n"));
    }
    Ok(out)
}

fn lemma1_curve(args: &SimulateArgs) -> Result<String, AppError> {
    let mut out = String::from("lam,h,k,accuracy,degrades\n");
    for lam_pct in (5..=95).step_by(5) {
        let lam = lam_pct as f64 / 100.0;
        for h_pct in (0..=100).step_by(10) {
            let h = h_pct as f64 / 100.0;
            let ability =
                AbilityModel::new(lam, h, args.k).map_err(|e| AppError::Config(e.to_string()))?;
            let accuracy = lemma1_accuracy(ability);
            out.push_str(&format!(
                "{lam:.2},{h:.2},{},{accuracy:.6},{}\n",
                args.k,
                accuracy < lam
            ));
        }
    }
    Ok(out)
}

fn lint_verb(args: LintArgs) -> Result<i32, AppError> {
    let linter = match &args.lexicon_dir {
        Some(dir) => Linter::from_dir(dir).map_err(|e| AppError::Config(e.to_string()))?,
        None => Linter::builtin(),
    };
    let mut any_biased = false;
    for path in &args.files {
        let text = std::fs::read_to_string(path).map_err(|e| io_runtime(path, e))?;
        let report = linter.lint(&text);
        println!("{}: {:?}", path.display(), report.classification);
        for finding in &report.findings {
            println!(
                "  {:?} {:?} at byte {}",
                finding.rule, finding.phrase, finding.span.0
            );
        }
        if report.classification == PromptClass::Biased {
            any_biased = true;
        }
    }
    Ok(if any_biased { 1 } else { 0 })
}

fn report_verb(args: ReportArgs) -> Result<i32, AppError> {
    let records = pipeline::read_records(&args.records)?;
    let summary = analysis::summarize(&records)?;
    print_summary(&summary);
    Ok(0)
}

fn extract_debug_verb(args: ExtractDebugArgs) -> Result<i32, AppError> {
    let text = std::fs::read_to_string(&args.file).map_err(|e| io_runtime(&args.file, e))?;
    let value = serde_json::json!({
        "letter": extract::extract_letter(&text),
        "boxed": extract::extract_boxed(&text),
        "decision_first": extract::extract_decision(&text, Order::DecisionFirst),
        "rationale_first": extract::extract_decision(&text, Order::RationaleFirst),
    });
    println!("{}", serde_json::to_string_pretty(&value).expect("extraction results serialize"));
    Ok(0)
}
