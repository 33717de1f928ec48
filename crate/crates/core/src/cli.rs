//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input, 2 runtime invariant breach.
//! Failures print a single `error: ...` line on stderr.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::engine::{self, EngineError, MatrixConfig, RunLogs, ScenarioConfig};
use crate::ingestion::{generate_synthetic, write_readings, SyntheticConfig};
use crate::metrics::{self, DonationReport, MatrixEntry, ParticipationStats};
use crate::donation::DonationAlgorithm;
use crate::quantity::Fraction;

#[derive(Debug, Parser)]
#[command(name = "donation-sim", version, about = "Energy community trading and donation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario and write its logs and report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a scenario matrix and write one directory per cell plus the comparison table.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic readings CSV.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Recompute and print the report of a finished run or matrix from its logs.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        let kind = match &e {
            EngineError::Invariant { .. } => "invariant",
            EngineError::Ingest(_) => "ingest",
            EngineError::Io { .. } => "io",
            EngineError::Config(_) | EngineError::ConfigFile { .. } => "config",
        };
        Failure {
            code: e.exit_code(),
            message: format!("{kind}: {e}"),
        }
    }
}

impl Failure {
    pub fn line(&self) -> String {
        format!("error: {}", self.message.replace(['\n', '\r'], " "))
    }
}

/// Parses `args`, runs the command, and returns the exit code.
pub fn main_with<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("{}", f.line());
            f.code
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    EngineError::Io {
        path: path.display().to_string(),
        source: e,
    }
    .into()
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<(), Failure> {
    stdout.write_all(text.as_bytes()).map_err(|e| io_failure(Path::new("<stdout>"), e))
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Command::Run {
            config,
            out,
            format,
            seed,
        } => {
            let mut c = ScenarioConfig::load(&config)?;
            if let Some(s) = seed {
                c.seed = s;
            }
            let run = engine::run(&c)?;
            run.write_to(&out)?;
            let text = match format {
                Format::Table => run.report_text(),
                Format::Json => json_line(&run.report_document()),
                Format::Csv => report_csv(&run.report, &run.participation),
            };
            emit(stdout, &text)?;
            Ok(0)
        }
        Command::Matrix {
            config,
            out,
            jobs,
            format,
            seed,
        } => {
            let mut cells = MatrixConfig::load(&config)?;
            if let Some(s) = seed {
                for c in &mut cells {
                    c.seed = s;
                }
            }
            let outcome = engine::run_matrix(cells, jobs)?;
            outcome.write_to(&out)?;
            let text = match format {
                Format::Table => outcome.table.to_text(),
                Format::Csv => outcome.table.to_csv(),
                Format::Json => json_line(&outcome.comparison_json()),
            };
            emit(stdout, &text)?;
            let failures: Vec<String> = outcome.failures().map(|(c, e)| format!("{}: {e}", c.id)).collect();
            if failures.is_empty() {
                Ok(0)
            } else {
                Err(Failure {
                    code: outcome.exit_code(),
                    message: format!("{} of {} cells failed; {}", failures.len(), outcome.cells.len(), failures.join("; ")),
                })
            }
        }
        Command::Synth { config, out, seed } => {
            let text = fs::read_to_string(&config).map_err(|e| io_failure(&config, e))?;
            let mut cfg: SyntheticConfig = serde_json::from_str(&text).map_err(|e| {
                Failure::from(EngineError::ConfigFile {
                    path: config.display().to_string(),
                    message: e.to_string(),
                })
            })?;
            if seed.is_some() {
                cfg.seed = seed;
            }
            let series = generate_synthetic(&cfg, 0).map_err(EngineError::from)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
            }
            let file = fs::File::create(&out).map_err(|e| io_failure(&out, e))?;
            write_readings(&series, std::io::BufWriter::new(file)).map_err(EngineError::from)?;
            emit(
                stdout,
                &format!(
                    "wrote {} readings ({} peers x {} hours) to {}\n",
                    series.peers().len() * series.len(),
                    series.peers().len(),
                    series.len(),
                    out.display()
                ),
            )?;
            Ok(0)
        }
        Command::Report { out, format } => {
            let index_path = out.join("matrix.json");
            let text = if index_path.exists() {
                matrix_report(&out, &index_path, format)?
            } else {
                let logs = RunLogs::load(&out)?;
                let (report, stats) = logs.reaggregate();
                match format {
                    Format::Table => metrics::report_text(&report, &stats),
                    Format::Csv => report_csv(&report, &stats),
                    Format::Json => json_line(&serde_json::json!({"report": report, "participation": stats})),
                }
            };
            emit(stdout, &text)?;
            Ok(0)
        }
    }
}

fn json_line<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(serde::Deserialize)]
struct IndexEntry {
    id: String,
    algorithm: DonationAlgorithm,
    balance_percentage: Fraction,
    status: String,
}

fn matrix_report(dir: &Path, index_path: &Path, format: Format) -> Result<String, Failure> {
    let text = fs::read_to_string(index_path).map_err(|e| io_failure(index_path, e))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&text).map_err(|e| {
        Failure::from(EngineError::ConfigFile {
            path: index_path.display().to_string(),
            message: e.to_string(),
        })
    })?;
    let mut reports = Vec::with_capacity(index.len());
    for entry in &index {
        let report = if entry.status == "ok" {
            Some(RunLogs::load(&dir.join(&entry.id))?.reaggregate().0)
        } else {
            None
        };
        reports.push(report);
    }
    let entries: Vec<MatrixEntry> = index
        .iter()
        .zip(&reports)
        .map(|(e, r)| MatrixEntry {
            algorithm: e.algorithm,
            percentage: e.balance_percentage,
            report: r.as_ref(),
        })
        .collect();
    let table = metrics::matrix_table(&entries);
    Ok(match format {
        Format::Table => table.to_text(),
        Format::Csv => table.to_csv(),
        Format::Json => json_line(&table),
    })
}

/// `metric,value` rows of the flattened report and participation figures.
pub fn report_csv(report: &DonationReport, stats: &ParticipationStats) -> String {
    fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, v) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    flatten(&key, v, out);
                }
            }
            serde_json::Value::Null => out.push((prefix.to_string(), String::new())),
            serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut rows = Vec::new();
    flatten("", &serde_json::to_value(report).expect("serializable"), &mut rows);
    flatten("participation", &serde_json::to_value(stats).expect("serializable"), &mut rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "value"]).expect("in-memory write");
    for (k, v) in rows {
        w.write_record([k, v]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
