//! `absa-mvp`: run, score and inspect multi-view sentiment extraction.

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use absa_mvp::backend::RemoteConfig;
use absa_mvp::error::{EvalError, GrammarError};
use absa_mvp::eval;
use absa_mvp::grammar::{self, TupleSchema};
use absa_mvp::lexicon::PhraseLexicon;
use absa_mvp::multiview::Strategy;
use absa_mvp::prompt::PromptTemplate;
use absa_mvp::runner::{self, BackendSpec, RunConfig};
use absa_mvp::types::{CategorySet, Permutation, Task};
use absa_mvp::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_CONFIG: u8 = 2;
const EXIT_BACKEND: u8 = 3;
const EXIT_EVAL: u8 = 4;
const EXIT_REJECTED: u8 = 1;
const EXIT_CANCELLED: u8 = 130;

#[derive(Parser)]
#[command(name = "absa-mvp", version, about = "Multi-view prompting for aspect-based sentiment extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode a test set and write a run directory.
    Run(Box<RunArgs>),
    /// Score a run directory against gold labels.
    Eval {
        /// Run directory, or a single seed directory inside it.
        #[arg(long)]
        run: PathBuf,
        /// Gold instances, JSONL.
        #[arg(long)]
        gold: PathBuf,
        /// Print the full report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Show the boundary tokens and phrase spans of a sentence.
    Lexicon {
        sentence: String,
        #[arg(long)]
        json: bool,
    },
    /// Grammar utilities.
    Grammar {
        #[command(subcommand)]
        command: GrammarCommand,
    },
    /// Write the built-in prompt template to a directory for editing.
    Template { dir: PathBuf },
}

#[derive(Subcommand)]
enum GrammarCommand {
    /// Check an output string against the tuple grammar of a sentence.
    Check {
        output: String,
        #[arg(long)]
        sentence: String,
        /// Allowed category; repeat for several.
        #[arg(long = "category", required_unless_present = "categories")]
        category: Vec<String>,
        /// JSON file with the category list.
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long, default_value = "tasd")]
        task: Task,
        /// Element order, e.g. `ac-at-p`; the natural order by default.
        #[arg(long)]
        order: Option<String>,
        /// Print the grammar in GBNF form.
        #[arg(long)]
        gbnf: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Oracle,
    Remote,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    categories: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Views that vote under mvp.
    #[arg(long)]
    m: Option<usize>,
    /// Demonstrations per prompt.
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    eff_quantile: Option<f64>,
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Oracle configuration JSON.
    #[arg(long)]
    oracle_config: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible server.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    template_dir: Option<PathBuf>,
    #[arg(long = "output", short = 'o')]
    output: Option<PathBuf>,
    /// Pay every prompt prefix in full (the uncached comparison run).
    #[arg(long)]
    no_prefix_grouping: bool,
    #[arg(long)]
    max_context: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    max_in_flight: Option<usize>,
}

impl RunArgs {
    fn into_config(self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => {
                let missing = |what: &str| Error::Config(format!("--{what} is required without --config"));
                RunConfig::new(
                    self.task.ok_or_else(|| missing("task"))?,
                    self.test.clone().ok_or_else(|| missing("test"))?,
                    self.categories.clone().ok_or_else(|| missing("categories"))?,
                    self.output.clone().ok_or_else(|| missing("output"))?,
                )
            }
        };
        if let Some(v) = self.task {
            config.task = v;
        }
        if let Some(v) = self.dataset {
            config.dataset = v;
        }
        if let Some(v) = self.test {
            config.test = v;
        }
        if let Some(v) = self.train {
            config.train = Some(v);
        }
        if let Some(v) = self.categories {
            config.categories = v;
        }
        if let Some(v) = self.strategy {
            config.selection.strategy = v;
        }
        if let Some(v) = self.m {
            config.selection.m = Some(v);
        }
        if let Some(v) = self.k {
            config.k = v;
        }
        if let Some(v) = self.seeds {
            config.seeds = v;
        }
        if let Some(v) = self.eff_quantile {
            config.selection.eff_quantile = v;
        }
        match self.backend {
            Some(BackendKind::Oracle) => {
                config.backend = BackendSpec::Oracle {
                    config: self.oracle_config.clone(),
                }
            }
            Some(BackendKind::Remote) if !matches!(config.backend, BackendSpec::Remote(_)) => {
                config.backend = BackendSpec::Remote(RemoteConfig::default());
            }
            Some(BackendKind::Remote) | None => {}
        }
        match &mut config.backend {
            BackendSpec::Oracle { config: path } => {
                if let Some(p) = self.oracle_config {
                    *path = Some(p);
                }
                if self.endpoint.is_some() || self.model.is_some() {
                    return Err(Error::Config("--endpoint and --model need --backend remote".into()));
                }
            }
            BackendSpec::Remote(remote) => {
                if let Some(url) = self.endpoint {
                    remote.base_url = url;
                }
                if let Some(model) = self.model {
                    remote.model = model;
                }
            }
        }
        if let Some(v) = self.template_dir {
            config.template_dir = Some(v);
        }
        if let Some(v) = self.output {
            config.output_dir = v;
        }
        if self.no_prefix_grouping {
            config.prefix_grouping = false;
        }
        if let Some(v) = self.max_context {
            config.max_context = v;
        }
        if let Some(v) = self.max_tokens {
            config.max_tokens = v;
        }
        if let Some(v) = self.max_in_flight {
            config.max_in_flight = v;
        }
        Ok(config)
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Data(_)
        | Error::Lexicon(_)
        | Error::Prompt(_)
        | Error::Scheduler(_) => EXIT_CONFIG,
        Error::Grammar(_) | Error::View { .. } | Error::Backend(_) => EXIT_BACKEND,
        Error::Eval(_) => EXIT_EVAL,
        Error::Cancelled => EXIT_CANCELLED,
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let config = args.into_config()?;
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed)) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    let summary = runner::execute(&config, Some(cancel))?;
    for s in &summary.seeds {
        println!(
            "seed {}: {} predictions, prefill {} tokens (uncached {}), generated {}, {} escalated -> {}",
            s.seed,
            s.predictions,
            s.ledger.prefill_tokens_paid(),
            s.ledger.prefill_tokens_uncached,
            s.ledger.generated_tokens,
            s.escalated.len(),
            s.directory.display()
        );
    }
    if let Some(report) = &summary.report {
        print!("{}", report.to_table());
    }
    if summary.cancelled {
        return Err(Error::Cancelled);
    }
    Ok(())
}

fn cmd_eval(run: PathBuf, gold: PathBuf, json: bool) -> Result<(), Error> {
    let gold = runner::load_instances(&gold).map_err(EvalError::from)?;
    let report = eval::report(&run, &gold)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn cmd_lexicon(sentence: &str, json: bool) -> Result<(), Error> {
    let lexicon = PhraseLexicon::build(sentence)?;
    if json {
        let value = serde_json::json!({
            "tokens": lexicon.tokens().iter().map(|t| &t.text).collect::<Vec<_>>(),
            "spans": lexicon.index_spans().map(|(i, j, s)| serde_json::json!([i, j, s])).collect::<Vec<_>>(),
        });
        println!("{value}");
        return Ok(());
    }
    println!("tokens ({}):", lexicon.tokens().len());
    for (i, t) in lexicon.tokens().iter().enumerate() {
        println!("  {i:>3}  {:?}  chars {}..{}", t.text, t.start, t.end);
    }
    println!("spans ({}):", lexicon.span_count());
    for (i, j, s) in lexicon.index_spans() {
        println!("  {i:>3}..={j:<3} {s:?}");
    }
    Ok(())
}

struct CheckArgs {
    output: String,
    sentence: String,
    category: Vec<String>,
    categories: Option<PathBuf>,
    task: Task,
    order: Option<String>,
    gbnf: bool,
}

fn cmd_grammar_check(args: CheckArgs) -> Result<bool, Error> {
    let categories = match &args.categories {
        Some(p) => runner::load_categories(p)?,
        None => CategorySet::new(args.category)?,
    };
    let permutation = match &args.order {
        Some(id) => Permutation::parse(args.task, id)?,
        None => Permutation::identity(args.task),
    };
    let schema = TupleSchema::for_sentence(permutation, &args.sentence, categories)?;
    if args.gbnf {
        println!("{}", schema.to_gbnf());
    }
    let automaton = grammar::compile(&schema)?;
    match automaton.check(&args.output) {
        Ok(()) => {
            let tuples = grammar::parse_tuples(&args.output, &schema)?;
            println!("ok: {} tuple(s)", tuples.len());
            Ok(true)
        }
        Err(GrammarError::DeadTransition { offset, byte }) => {
            println!("rejected at offset {offset}: unexpected byte {:?}", char::from(byte));
            Ok(false)
        }
        Err(GrammarError::Incomplete { offset }) => {
            println!("rejected at offset {offset}: output ends before the tuple list is closed");
            Ok(false)
        }
        Err(e) => Err(e.into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(*args).map(|()| true),
        Command::Eval { run, gold, json } => cmd_eval(run, gold, json).map(|()| true),
        Command::Lexicon { sentence, json } => cmd_lexicon(&sentence, json).map(|()| true),
        Command::Grammar {
            command:
                GrammarCommand::Check {
                    output,
                    sentence,
                    category,
                    categories,
                    task,
                    order,
                    gbnf,
                },
        } => cmd_grammar_check(CheckArgs {
            output,
            sentence,
            category,
            categories,
            task,
            order,
            gbnf,
        }),
        Command::Template { dir } => PromptTemplate::default()
            .write_dir(&dir)
            .map(|()| true)
            .map_err(Error::from),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_REJECTED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
