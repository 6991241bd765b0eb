//! Scripted stand-in for a real checker. Verdicts are looked up by the
//! SHA-256 of the candidate source; `*` is the fallback entry.
//!
//! Script statuses: `success`, `failure`, `crash` (exit at once), `crash_once`
//! (exit the first time a source is seen, succeed afterwards; needs `--state`),
//! `hang` (never answer) and `malformed` (answer with invalid JSON).

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use proofsynth::check::WireError;
use proofsynth::embed::sha256_hex;
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(about = "Scripted checker speaking the JSON-lines protocol")]
struct Args {
    /// Line-delimited JSON verdict table.
    #[arg(long)]
    script: PathBuf,
    /// Remembers which `crash_once` sources already crashed.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Appends the hash of every checked source.
    #[arg(long)]
    call_log: Option<PathBuf>,
}

#[derive(Deserialize)]
struct Entry {
    source_hash: String,
    status: String,
    #[serde(default)]
    errors: Vec<WireError>,
    #[serde(default)]
    wall_ms: u64,
}

fn load_script(path: &PathBuf) -> io::Result<HashMap<String, Entry>> {
    let mut table = HashMap::new();
    for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: Entry = serde_json::from_str(line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", n + 1)))?;
        table.insert(e.source_hash.clone(), e);
    }
    Ok(table)
}

fn append(path: &Option<PathBuf>, line: &str) -> io::Result<()> {
    if let Some(p) = path {
        let mut f = OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn crashed_before(state: &Option<PathBuf>, hash: &str) -> bool {
    state
        .as_ref()
        .and_then(|p| fs::read_to_string(p).ok())
        .is_some_and(|s| s.lines().any(|l| l == hash))
}

fn main() -> ExitCode {
    let args = Args::parse();
    let script = match load_script(&args.script) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("stub-checker: {e}");
            return ExitCode::from(2);
        }
    };
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let Ok(msg) = serde_json::from_str::<serde_json::Value>(&line) else {
            eprintln!("stub-checker: unreadable request");
            continue;
        };
        let reply = match msg["op"].as_str() {
            Some("init") => json!({"status": "ready"}),
            Some("shutdown") => return ExitCode::SUCCESS,
            Some("check") => {
                let id = msg["id"].as_str().unwrap_or_default();
                let source = msg["source"].as_str().unwrap_or_default();
                let hash = sha256_hex(source.as_bytes());
                if let Err(e) = append(&args.call_log, &hash) {
                    eprintln!("stub-checker: call log: {e}");
                }
                let entry = script.get(&hash).or_else(|| script.get("*"));
                let Some(entry) = entry else {
                    let errors = [json!({"code": 1, "stage": "typecheck", "message": "no scripted verdict"})];
                    let reply = json!({"id": id, "status": "failure", "errors": errors, "wall_ms": 0});
                    let _ = writeln!(out, "{reply}").and_then(|_| out.flush());
                    continue;
                };
                match entry.status.as_str() {
                    "crash" => return ExitCode::from(101),
                    "crash_once" if !crashed_before(&args.state, &hash) => {
                        let _ = append(&args.state, &hash);
                        return ExitCode::from(101);
                    }
                    "crash_once" => json!({"id": id, "status": "success", "errors": [], "wall_ms": entry.wall_ms}),
                    "hang" => loop {
                        std::thread::park();
                    },
                    "malformed" => {
                        let _ = writeln!(out, "{{\"id\": ").and_then(|_| out.flush());
                        continue;
                    }
                    status => json!({
                        "id": id,
                        "status": status,
                        "errors": entry.errors.iter().map(|e| serde_json::to_value(e).unwrap()).collect::<Vec<_>>(),
                        "wall_ms": entry.wall_ms,
                    }),
                }
            }
            _ => json!({"status": "error", "message": "unknown op"}),
        };
        if writeln!(out, "{reply}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
    ExitCode::SUCCESS
}
