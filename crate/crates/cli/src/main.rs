use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use symrefine::config::{fixture_config, Config, GatewayMode};
use symrefine::corpus::{load_dataset, load_mmlu, Dataset, FineTunePool, Split};
use symrefine::gateway::{save_transcript, Cassette, Gateway, Session};
use symrefine::orchestrator::{run_symptom, slug, Checkpoint, RunInputs, RunOutput};
use symrefine::prep::prep_all;
use symrefine::protocol::Templates;
use symrefine::report::{build_tables, load_reports, tables_csv};
use symrefine::sim::{generate_mmlu, generate_notes, mmlu_to_jsonl, FixtureSpec};
use symrefine::strategies::{FineTuneExecutor, RunMode};
use symrefine::vecstore::VectorStore;

#[derive(Parser)]
#[command(name = "symrefine", version, about = "Teacher-guided refinement of a student model for symptom extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed train notes and generate context-reasoning pairs.
    Prep(PrepArgs),
    /// Run the refinement loop for one or all symptoms.
    Run(RunArgs),
    /// Build plot-ready tables from a directory of run reports.
    Report(ReportArgs),
    /// Write a simulated corpus, MMLU-style pool and config.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct Recording {
    /// Record every backend exchange to this cassette.
    #[arg(long, value_name = "CASSETTE", conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Serve backend exchanges from this cassette.
    #[arg(long, value_name = "CASSETTE")]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    notes: Option<PathBuf>,
    /// Output store file.
    #[arg(long)]
    store: Option<PathBuf>,
    #[command(flatten)]
    recording: Recording,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, conflicts_with_all = ["all", "resume"], required_unless_present_any = ["all", "resume"])]
    symptom: Option<String>,
    #[arg(long, conflicts_with = "resume")]
    all: bool,
    /// rag, finetune or hybrid.
    #[arg(long, value_parser = parse_mode, required_unless_present = "resume")]
    mode: Option<RunMode>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint file.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
    #[arg(long)]
    notes: Option<PathBuf>,
    #[arg(long)]
    mmlu: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[command(flatten)]
    recording: Recording,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    train: usize,
    #[arg(long, default_value_t = 5)]
    test: usize,
    /// 15 train / 4 test notes for Urothelial Carcinoma.
    #[arg(long)]
    reference_shape: bool,
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    RunMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected rag, finetune or hybrid)"))
}

enum Failure {
    Usage(String),
    Io(String),
    Run(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Run(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Run(m) => m,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

/// Ignores a closed stdout, e.g. when piped into `head`.
fn stdout(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn existing(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let path = path.ok_or_else(|| Failure::Usage(format!("no {what} file given")))?;
    if !path.exists() {
        return Err(Failure::Usage(format!("{what} file not found: {}", path.display())));
    }
    Ok(path)
}

fn load_config(path: &Path) -> CliResult<Config> {
    if !path.exists() {
        return Err(Failure::Usage(format!("config file not found: {}", path.display())));
    }
    Config::load(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn load_templates(config: &Config) -> CliResult<Templates> {
    match &config.templates_dir {
        Some(dir) => Templates::load_dir(dir).map_err(|e| Failure::Usage(e.to_string())),
        None => Ok(Templates::default()),
    }
}

fn load_notes(config: &Config, notes: Option<PathBuf>) -> CliResult<Dataset> {
    let path = existing(notes.or_else(|| config.data.notes.clone()), "notes")?;
    load_dataset(&path, &config.catalog).map_err(|e| io_err(&path, e))
}

/// Cassette to write once the runs finish.
type PendingSave = (Arc<Cassette>, PathBuf);

/// Gateway plus the cassette to save afterwards, if recording.
fn gateway(config: &Config, dataset: &Dataset, recording: &Recording) -> CliResult<(Gateway, Option<PendingSave>)> {
    let (mode, save) = if let Some(path) = &recording.replay {
        if !path.exists() {
            return Err(Failure::Usage(format!("cassette not found: {}", path.display())));
        }
        let cassette = Cassette::load(path).map_err(|e| io_err(path, e))?;
        (GatewayMode::Replay(Arc::new(cassette)), None)
    } else if let Some(path) = &recording.record {
        let cassette = Arc::new(Cassette::new());
        (GatewayMode::Record(cassette.clone()), Some((cassette, path.clone())))
    } else {
        (GatewayMode::Live, None)
    };
    let gw = config
        .build_gateway(dataset.notes(), mode)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((gw, save))
}

fn save_cassette(save: Option<PendingSave>) -> CliResult<()> {
    if let Some((cassette, path)) = save {
        cassette.save(&path).map_err(|e| io_err(&path, e))?;
        eprintln!("recorded {} exchange(s) to {}", cassette.len(), path.display());
    }
    Ok(())
}

fn prep(args: PrepArgs) -> CliResult<()> {
    let config = load_config(&args.config)?;
    let dataset = load_notes(&config, args.notes)?;
    let store_path = args
        .store
        .or_else(|| config.data.store.clone())
        .ok_or_else(|| Failure::Usage("no store path given".into()))?;
    let templates = load_templates(&config)?;
    let embedder = config.build_embedder().map_err(|e| Failure::Usage(e.to_string()))?;
    let (gw, save) = gateway(&config, &dataset, &args.recording)?;
    let session = Session::new();
    let result = prep_all(
        &dataset,
        embedder.as_ref(),
        &gw,
        &session,
        &templates,
        &config.teacher_backend,
        config.prep_concurrency,
        Some(&store_path),
    );
    save_cassette(save)?;
    let (_, summary) = result.map_err(|e| Failure::Run(e.to_string()))?;
    stdout(&format!("{}\n", serde_json::to_string_pretty(&summary).expect("summary serializes")));
    Ok(())
}

struct RunPlan {
    symptom: String,
    mode: RunMode,
    resume: Option<Checkpoint>,
}

fn write_outputs(out: &Path, stem: &str, output: &RunOutput) -> CliResult<()> {
    write(&out.join(format!("{stem}.report.json")), &output.report.to_json())?;
    let transcript = out.join(format!("{stem}.transcript.jsonl"));
    save_transcript(&output.session.transcript, &transcript).map_err(|e| io_err(&transcript, e))?;
    let ledger = out.join(format!("{stem}.ledger.csv"));
    let file = fs::File::create(&ledger).map_err(|e| io_err(&ledger, e))?;
    output.session.ledger.write_csv(file).map_err(|e| io_err(&ledger, e))
}

fn run(args: RunArgs) -> CliResult<()> {
    let config = load_config(&args.config)?;
    let dataset = load_notes(&config, args.notes)?;
    let store_path = existing(args.store.or_else(|| config.data.store.clone()), "store")?;
    let store = VectorStore::load(&store_path).map_err(|e| io_err(&store_path, e))?;
    let mmlu = match args.mmlu.or_else(|| config.data.mmlu.clone()) {
        Some(path) => {
            let path = existing(Some(path), "mmlu")?;
            load_mmlu(&path).map_err(|e| io_err(&path, e))?
        }
        None => Vec::new(),
    };
    let pool = FineTunePool::new(mmlu, &store);
    let templates = load_templates(&config)?;
    let executor: Box<dyn FineTuneExecutor> = config.build_executor().map_err(|e| Failure::Usage(e.to_string()))?;
    let replaying = args.recording.replay.is_some();
    let (gw, save) = gateway(&config, &dataset, &args.recording)?;
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;

    let plans: Vec<RunPlan> = if let Some(path) = &args.resume {
        if !path.exists() {
            return Err(Failure::Usage(format!("checkpoint not found: {}", path.display())));
        }
        let cp = Checkpoint::load(path).map_err(|e| io_err(path, e))?;
        vec![RunPlan {
            symptom: cp.config.symptom.clone(),
            mode: cp.config.mode,
            resume: Some(cp),
        }]
    } else {
        let mode = args.mode.expect("clap requires --mode");
        let symptoms: Vec<String> = if args.all {
            config
                .catalog
                .names()
                .iter()
                .filter(|s| !dataset.select(s, Split::Train).is_empty())
                .cloned()
                .collect()
        } else {
            let s = args.symptom.clone().expect("clap requires --symptom");
            if !config.catalog.contains(&s) {
                return Err(Failure::Usage(format!("unknown symptom `{s}`")));
            }
            vec![s]
        };
        symptoms
            .into_iter()
            .map(|symptom| RunPlan {
                symptom,
                mode,
                resume: None,
            })
            .collect()
    };

    let sleeper: Arc<dyn Fn(Duration) + Send + Sync> = if replaying {
        Arc::new(|_| {})
    } else {
        Arc::new(std::thread::sleep)
    };
    let inputs = RunInputs {
        dataset: &dataset,
        store: &store,
        pool: &pool,
        executor: executor.as_ref(),
        executor_settings: config.executor_settings(),
        gateway: &gw,
        templates: &templates,
        sleeper,
    };
    let plans: Vec<Mutex<Option<RunPlan>>> = plans.into_iter().map(|p| Mutex::new(Some(p))).collect();
    let lines: Vec<Mutex<Option<String>>> = plans.iter().map(|_| Mutex::new(None)).collect();
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(plans.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(slot) = plans.get(i) else { break };
                let plan = slot.lock().expect("plan lock").take().expect("plan taken once");
                let stem = format!("{}.{}", slug(&plan.symptom), plan.mode);
                let checkpoint_path = args.out.join(format!("{stem}.checkpoint.json"));
                let run_config = config.run_config(&plan.symptom, plan.mode);
                let result = run_symptom(run_config, inputs.clone(), plan.resume, |cp| {
                    if let Err(e) = cp.save(&checkpoint_path) {
                        tracing::error!(path = %checkpoint_path.display(), "cannot write checkpoint: {e}");
                    }
                });
                let outcome = result
                    .map_err(|e| Failure::Run(e.to_string()))
                    .and_then(|output| write_outputs(&args.out, &stem, &output).map(|_| output));
                match outcome {
                    Ok(output) => {
                        let r = &output.report;
                        let line = format!(
                            "{}: train {:.3} -> {:.3}, test {:.3} -> {:.3}, ${} over {} round(s)\n",
                            stem,
                            r.baseline.accuracy,
                            r.best.train_score.accuracy,
                            r.test.initial.score.accuracy,
                            r.test.refined.score.accuracy,
                            r.cost.total.dollars,
                            r.rounds.len() - 1,
                        );
                        tracing::info!("{}", line.trim_end());
                        *lines[i].lock().expect("line lock") = Some(line);
                    }
                    Err(e) => {
                        eprintln!("{stem}: {}", e.message());
                        failures.lock().expect("failures lock").push(stem);
                    }
                }
            });
        }
    });
    for line in lines.into_iter().filter_map(|l| l.into_inner().expect("line lock")) {
        stdout(&line);
    }
    save_cassette(save)?;
    let failures = failures.into_inner().expect("failures lock");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Run(format!("{} run(s) failed: {}", failures.len(), failures.join(", "))))
    }
}

fn report(args: ReportArgs) -> CliResult<()> {
    let reports = load_reports(&args.runs).map_err(|e| Failure::Io(e.to_string()))?;
    let tables = build_tables(&reports);
    let text = match args.format {
        Format::Json => format!("{}\n", serde_json::to_string_pretty(&tables).expect("tables serialize")),
        Format::Csv => tables_csv(&tables),
    };
    match args.out {
        Some(path) => write(&path, &text),
        None => {
            stdout(&text);
            Ok(())
        }
    }
}

fn fixture(args: FixtureArgs) -> CliResult<()> {
    let spec = FixtureSpec {
        train_per_symptom: args.train,
        test_per_symptom: args.test,
        reference_shape: args.reference_shape,
        seed: args.seed,
        ..FixtureSpec::default()
    };
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let notes = generate_notes(&spec);
    let dataset = Dataset::from_notes(notes, &spec.catalog).expect("generated notes are valid");
    write(&args.out.join("notes.jsonl"), &dataset.to_jsonl())?;
    write(&args.out.join("mmlu.jsonl"), &mmlu_to_jsonl(&generate_mmlu(spec.mmlu_records, spec.seed)))?;
    let config = serde_json::to_string_pretty(&fixture_config()).expect("config serializes");
    write(&args.out.join("config.json"), &format!("{config}\n"))?;
    stdout(&format!("wrote {} notes to {}\n", dataset.len(), args.out.display()));
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("SYMREFINE_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prep(a) => prep(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::Fixture(a) => fixture(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
