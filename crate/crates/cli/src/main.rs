//! `medfuse` command line: forge corpora, check and query snapshots, run
//! the pipeline locally or against a service, and serve the HTTP API.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use medfuse_client::Client;
use medfuse_core::api::{LoadRequest, RunState};
use medfuse_core::cohort::{search, CohortSpec, IcdVersion};
use medfuse_core::forge::{forge_corpus, ForgeConfig};
use medfuse_core::ingest::{load_snapshot_with, write_rejects, LoadOptions};
use medfuse_core::modality::NoteTypeFilter;
use medfuse_core::pipeline::{run_pipeline, RunConfig, RunReport};
use medfuse_core::sectionize::{compile_lexicon, sectionize_table, write_sections_csv, HeaderLexicon};
use medfuse_core::{DatasetSnapshot, Error};
use medfuse_server::AppState;

#[derive(Debug, Parser)]
#[command(name = "medfuse", version, about = "Multimodal EHR integration engine")]
struct Cli {
    /// JSON config for the verb (ForgeConfig, CohortSpec or RunConfig).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root holding the CSV tables.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// Output directory or file, depending on the verb.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for the corpus forger.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base URL of a running service; `run` then executes remotely.
    #[arg(long, global = true)]
    server: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus and its ground-truth manifest to --out.
    Forge {
        #[arg(long)]
        subjects: Option<usize>,
    },
    /// Load and validate the tables under --root; rejects go to --out.
    LoadCheck {
        #[arg(long, default_value_t = 5.0)]
        max_reject_pct: f64,
    },
    /// Resolve a cohort; members are written as CSV to --out or stdout.
    Search {
        /// ICD code patterns such as `427*`, `I48*` or `99591`.
        #[arg(long, value_delimiter = ',')]
        codes: Vec<String>,
        /// Disease name substrings, matched case-insensitively.
        #[arg(long, value_delimiter = ',')]
        names: Vec<String>,
        #[arg(long, default_value = "both")]
        icd_version: String,
    },
    /// Split every note into sections; CSV to --out or stdout.
    Sectionize {
        #[arg(long, default_value = "both")]
        note_type: String,
        /// Header lexicon JSON; built-in headers when absent.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// Run the full pipeline from a RunConfig (--config).
    Run {
        /// Give up waiting on a remote run after this many seconds.
        #[arg(long, default_value_t = 3600)]
        wait_secs: u64,
    },
    /// Serve the HTTP API (bind address from MEDFUSE_ADDR or --addr).
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
}

type CliResult<T> = Result<T, String>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Forge { subjects } => forge(cli, *subjects),
        Command::LoadCheck { max_reject_pct } => load_check(cli, *max_reject_pct),
        Command::Search {
            codes,
            names,
            icd_version,
        } => search_cmd(cli, codes, names, icd_version),
        Command::Sectionize { note_type, lexicon } => sectionize_cmd(cli, note_type, lexicon.as_deref()),
        Command::Run { wait_secs } => run_cmd(cli, Duration::from_secs(*wait_secs)),
        Command::Serve { addr } => serve_cmd(cli, addr.as_deref()),
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn need<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value.as_deref().ok_or_else(|| format!("--{flag} is required"))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    println!("{text}");
    Ok(())
}

/// Writes to the --out file, or stdout when absent.
fn with_output<F>(out: &Option<PathBuf>, f: F) -> CliResult<()>
where
    F: FnOnce(&mut dyn Write) -> CliResult<()>,
{
    match out {
        Some(p) => {
            let mut file = File::create(p).map_err(|e| format!("{}: {e}", p.display()))?;
            f(&mut file)
        }
        None => f(&mut io::stdout().lock()),
    }
}

fn load(cli: &Cli, options: LoadOptions) -> CliResult<DatasetSnapshot> {
    let root = need(&cli.root, "root")?;
    load_snapshot_with(root, "mimic-iv", &options).map_err(err)
}

fn forge(cli: &Cli, subjects: Option<usize>) -> CliResult<()> {
    let out = need(&cli.out, "out")?;
    let mut config: ForgeConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => ForgeConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(n) = subjects {
        config.n_subjects = n;
    }
    let manifest = forge_corpus(&config, out).map_err(err)?;
    eprintln!(
        "forged {} subjects, {} admissions, {} events, {} notes into {}",
        manifest.subjects.len(),
        manifest.admissions.len(),
        manifest.events.len(),
        manifest.notes.len(),
        out.display()
    );
    Ok(())
}

fn load_check(cli: &Cli, max_reject_pct: f64) -> CliResult<()> {
    let snapshot = load(cli, LoadOptions { max_reject_pct })?;
    if let Some(out) = &cli.out {
        write_rejects(snapshot.rejects(), out).map_err(err)?;
    }
    print_json(&medfuse_core::api::SnapshotSummary::of(&snapshot))
}

fn search_cmd(cli: &Cli, codes: &[String], names: &[String], version: &str) -> CliResult<()> {
    let spec: CohortSpec = match (&cli.config, codes.is_empty(), names.is_empty()) {
        (Some(p), true, true) => read_json(p)?,
        (Some(_), _, _) => return Err("use either --config or --codes/--names".into()),
        (None, true, true) => CohortSpec::all_subjects(),
        (None, false, true) => CohortSpec::codes(IcdVersion::parse(version).map_err(err)?, codes.iter().cloned()),
        (None, true, false) => CohortSpec::names(IcdVersion::parse(version).map_err(err)?, names.iter().cloned()),
        (None, false, false) => return Err("use either --codes or --names, not both".into()),
    };
    spec.validate().map_err(err)?;
    let snapshot = load(cli, LoadOptions::default())?;
    let cohort = search(&snapshot, &spec).map_err(err)?;
    eprintln!(
        "{} admissions, {} subjects",
        cohort.len(),
        cohort.subjects().len()
    );
    with_output(&cli.out, |w| cohort.write_csv(w).map_err(|e| e.to_string()))
}

fn sectionize_cmd(cli: &Cli, note_type: &str, lexicon: Option<&Path>) -> CliResult<()> {
    let filter: NoteTypeFilter = note_type.parse().map_err(err)?;
    let lexicon = match lexicon {
        Some(p) => HeaderLexicon::from_json_file(p).map_err(err)?,
        None => HeaderLexicon::default(),
    };
    let matcher = compile_lexicon(&lexicon).map_err(err)?;
    let snapshot = load(cli, LoadOptions::default())?;
    let cohort = search(&snapshot, &CohortSpec::all_subjects()).map_err(err)?;
    let sections = sectionize_table(&snapshot, &cohort, filter, &matcher).map_err(err)?;
    eprintln!("{} sections", sections.len());
    with_output(&cli.out, |w| write_sections_csv(&sections, w).map_err(|e| e.to_string()))
}

fn run_config(cli: &Cli) -> CliResult<RunConfig> {
    let path = need(&cli.config, "config")?;
    let mut config: RunConfig = read_json(path)?;
    if let Some(root) = &cli.root {
        config.dataset_root = root.clone();
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    Ok(config)
}

fn run_cmd(cli: &Cli, wait: Duration) -> CliResult<()> {
    let config = run_config(cli)?;
    let report: RunReport = match &cli.server {
        None => run_pipeline(&config).map_err(err)?,
        Some(url) => runtime()?.block_on(async {
            let client = Client::new(url.clone());
            let id = client.start_run(&config).await.map_err(|e| e.to_string())?;
            eprintln!("started {id}");
            let status = client
                .wait_for_run(&id, Duration::from_millis(250), wait)
                .await
                .map_err(|e| e.to_string())?;
            match (status.state, status.report) {
                (RunState::Done, Some(report)) => Ok(report),
                _ => Err(status.error.unwrap_or_else(|| format!("run {id} failed"))),
            }
        })?,
    };
    for s in &report.stages {
        eprintln!("{:>10}  {:8.3}s", s.stage, s.seconds);
    }
    print_json(&report)
}

fn runtime() -> CliResult<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| e.to_string())
}

fn serve_cmd(cli: &Cli, addr: Option<&str>) -> CliResult<()> {
    let addr = match addr {
        Some(a) => a.parse().map_err(|e| format!("--addr {a}: {e}"))?,
        None => medfuse_server::addr_from_env()?,
    };
    let state = AppState::new();
    if let Some(root) = &cli.root {
        let summary = state.load(&LoadRequest::new(root)).map_err(err)?;
        eprintln!("loaded {} admissions from {}", summary.admissions, root.display());
    }
    eprintln!("listening on http://{addr}");
    runtime()?
        .block_on(medfuse_server::serve(addr, state))
        .map_err(|e| e.to_string())
}
