use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use atgen_core::cases::{MinorPatch, Verdict};
use atgen_core::config::{AppConfig, ConfigError};
use atgen_core::eval::{case_book, compute_metrics, feedback_rate, feedback_records, render_percent, render_report, ReportFormat};
use atgen_core::gateway::{Backend, GatewayError};
use atgen_core::ledger::{read_events, Ledger, LedgerEvent, VerdictRecord};
use atgen_core::pipeline::{Pipeline, PipelineError};
use atgen_core::story::{load_local, parse_pr_description, StoryError};
use atgen_core::UserStory;
use atgen_server::{router, AppState};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atgen", version, about = "Generate acceptance tests and browser test scripts from user stories")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// live, replay or record
    #[arg(long, global = true)]
    backend: Option<Backend>,
    #[arg(long, global = true)]
    cassette: Option<PathBuf>,
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Run directory holding ledger.jsonl.
    #[arg(long, global = true)]
    ledger: Option<PathBuf>,
    /// Local story fixtures (one directory per issue key).
    #[arg(long, global = true)]
    stories_dir: Option<PathBuf>,
    /// Serve pages from fixture files instead of fetching them.
    #[arg(long, global = true)]
    pages_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate Gherkin scenarios from a user story.
    Scenarios {
        #[arg(long, required_unless_present = "story_dir")]
        title: Option<String>,
        #[arg(long, required_unless_present = "story_dir")]
        description: Option<String>,
        /// Directory with story.md instead of --title/--description.
        #[arg(long, conflicts_with_all = ["title", "description"])]
        story_dir: Option<PathBuf>,
        /// Print the full result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate a test script for an issue's scenarios and pages.
    Script {
        #[arg(long)]
        issue: String,
        #[arg(long = "page", required = true)]
        pages: Vec<String>,
        #[arg(long)]
        context: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Regenerate a script from the ledger with additional context.
    Regen {
        #[arg(long)]
        generation: String,
        #[arg(long)]
        context: String,
        #[arg(long)]
        json: bool,
    },
    /// Record a review verdict for a test case (`<root generation>#<n>`).
    Verdict {
        #[arg(long = "case")]
        case_id: String,
        /// pass, minor-error, lack-of-context or complex-error
        #[arg(long)]
        verdict: Verdict,
        #[arg(long, default_value = "")]
        detail: String,
        /// Script before and after a minor fix.
        #[arg(long, requires = "after")]
        before: Option<PathBuf>,
        #[arg(long, requires = "before")]
        after: Option<PathBuf>,
    },
    /// Print metrics for a run ledger.
    Report {
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// Also print the share of helpful feedback.
        #[arg(long)]
        feedback: bool,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
    /// Extract the issue key and page URLs from a pull-request description.
    PrInputs {
        /// Read from a file instead of stdin.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

enum Failure {
    Input(String),
    Gateway(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Input(_) => 1,
            Failure::Gateway(_) => 2,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let upstream = match &e {
            PipelineError::Gateway { source, .. } => !matches!(
                source,
                GatewayError::Config(_) | GatewayError::Cassette { .. } | GatewayError::CacheMiss { .. }
            ),
            PipelineError::UnparsableOutput { .. } | PipelineError::NoCodeBlock { .. } => true,
            PipelineError::Page { source, .. } => {
                !matches!(source, atgen_core::page::PageError::InvalidUrl { .. })
            }
            PipelineError::Story(StoryError::Tracker(_) | StoryError::Auth(_)) => true,
            _ => false,
        };
        let msg = match &e {
            PipelineError::UnparsableOutput { raw_response, .. } | PipelineError::NoCodeBlock { raw_response } => {
                format!("{e}\n--- model response ---\n{raw_response}")
            }
            _ => e.to_string(),
        };
        if upstream {
            Failure::Gateway(msg)
        } else {
            Failure::Input(msg)
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Input(e.to_string())
}

fn load_config(cli: &Cli) -> Result<AppConfig, Failure> {
    let mut config = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(b) = o.backend {
        config.model.backend = b;
    }
    if let Some(c) = &o.cassette {
        config.model.cassette = Some(c.clone());
    }
    if let Some(e) = &o.endpoint {
        config.model.endpoint = Some(e.clone());
    }
    if let Some(m) = &o.model {
        config.model.model_id = m.clone();
    }
    if let Some(l) = &o.ledger {
        config.ledger_dir = Some(l.clone());
    }
    if let Some(s) = &o.stories_dir {
        config.stories_dir = Some(s.clone());
        config.tracker = None;
    }
    if let Some(p) = &o.pages_dir {
        config.pages.fixtures_dir = Some(p.clone());
    }
    Ok(config)
}

fn ledger_dir(config: &AppConfig) -> Result<PathBuf, Failure> {
    config
        .ledger_dir
        .clone()
        .ok_or_else(|| Failure::Input("no ledger directory: pass --ledger or set ledger_dir".into()))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

async fn run(cli: Cli) -> Result<(), Failure> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Scenarios {
            title,
            description,
            story_dir,
            json,
        } => {
            let story = match story_dir {
                Some(dir) => load_local(&dir).map_err(input)?.story,
                None => UserStory::new(title.unwrap_or_default(), description.unwrap_or_default()),
            };
            let result = config.build_pipeline()?.generate_scenarios(&story).await?;
            if json {
                print_json(&result);
            } else {
                print!("{}", result.feature_text);
                for f in &result.lint.findings {
                    eprintln!("lint {:?} line {}: {} ({})", f.severity, f.line, f.message, f.code);
                }
                eprintln!("generation {}", result.generation_id);
            }
        }
        Command::Script {
            issue,
            pages,
            context,
            json,
        } => {
            let pipeline = config.build_pipeline()?;
            let bundle = pipeline.resolve_issue(&issue).await?;
            let result = pipeline.generate_script(&bundle, &pages, context.as_deref()).await?;
            report_script(&result, json);
        }
        Command::Regen {
            generation,
            context,
            json,
        } => {
            let dir = ledger_dir(&config)?;
            let previous = read_events(&dir)
                .map_err(input)?
                .into_iter()
                .find_map(|e| match e {
                    LedgerEvent::ScriptGeneration(s) if s.generation_id == generation => Some(s),
                    _ => None,
                })
                .ok_or_else(|| Failure::Input(format!("no script generation `{generation}` in {}", dir.display())))?;
            let pipeline: Pipeline = config.build_pipeline()?;
            let result = pipeline.regenerate_with_context(&previous, &context).await?;
            report_script(&result, json);
        }
        Command::Verdict {
            case_id,
            verdict,
            detail,
            before,
            after,
        } => {
            let ledger = Ledger::open(&ledger_dir(&config)?).map_err(input)?;
            let events = ledger.events().map_err(input)?;
            let cases = case_book(&events, 1).map_err(input)?;
            let case = cases
                .iter()
                .find(|c| c.case_id == case_id)
                .ok_or_else(|| Failure::Input(format!("unknown case `{case_id}`")))?;
            let next = case.state.clone().record_verdict(verdict, &detail).map_err(input)?;
            let patch = match (before, after) {
                (Some(b), Some(a)) => {
                    let read = |p: &PathBuf| std::fs::read_to_string(p).map_err(|e| Failure::Input(format!("{}: {e}", p.display())));
                    Some(MinorPatch::new(&detail, &read(&b)?, &read(&a)?).map_err(input)?)
                }
                _ => None,
            };
            ledger
                .append(&LedgerEvent::Verdict(VerdictRecord {
                    case_id: case_id.clone(),
                    verdict,
                    detail,
                    patch,
                    timestamp: chrono::Utc::now(),
                }))
                .map_err(input)?;
            println!("{case_id}: {}", next.state);
        }
        Command::Report { format, feedback } => {
            let events = read_events(&ledger_dir(&config)?).map_err(input)?;
            match compute_metrics(&events) {
                Ok(metrics) => print!("{}", render_report(&metrics, format)),
                // A feedback-only ledger has nothing else to report.
                Err(e) if !feedback => return Err(input(e)),
                Err(_) => {}
            }
            if feedback {
                let records = feedback_records(&events);
                let rate = feedback_rate(&records).map_err(input)?;
                println!("helpful feedback: {} ({} records)", render_percent(rate), records.len());
            }
        }
        Command::Serve { bind } => {
            let bind = bind.unwrap_or_else(|| config.service.bind.clone());
            let token = config
                .service
                .bearer_token_env
                .as_ref()
                .and_then(|var| std::env::var(var).ok());
            let dir = config.ledger_dir.clone().unwrap_or_else(|| PathBuf::from("runs/default"));
            let ledger = Arc::new(Ledger::open(&dir).map_err(input)?);
            let state = AppState::new(config.build_pipeline()?, ledger).with_bearer_token(token);
            let listener = tokio::net::TcpListener::bind(&bind)
                .await
                .map_err(|e| Failure::Input(format!("{bind}: {e}")))?;
            eprintln!("listening on {bind}, ledger {}", dir.display());
            axum::serve(listener, router(state))
                .await
                .map_err(|e| Failure::Gateway(e.to_string()))?;
        }
        Command::PrInputs { file } => {
            let text = match file {
                Some(path) => std::fs::read_to_string(&path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s).map_err(input)?;
                    s
                }
            };
            print_json(&parse_pr_description(&text).map_err(input)?);
        }
    }
    Ok(())
}

fn report_script(result: &atgen_core::ScriptResult, json: bool) {
    if json {
        print_json(result);
        return;
    }
    println!("{}", result.code.code.trim_end());
    for f in &result.structure.findings {
        eprintln!("structure line {}: {} ({})", f.line, f.message, f.code);
    }
    eprintln!(
        "generation {}: {} of {} scenarios mapped, comment coverage {}",
        result.generation_id,
        result.mapping.matched.len(),
        result.feature.scenarios.len(),
        render_percent(result.mapping.comment_coverage)
    );
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage mistakes are input errors; --help and --version are not errors.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let code = failure.exit_code();
            let (Failure::Input(msg) | Failure::Gateway(msg)) = failure;
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
