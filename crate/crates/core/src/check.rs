//! Candidate verification against an external checker process that speaks
//! line-delimited JSON over stdin/stdout.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::lang::{self, TokenKind};

pub const ESCAPE_HATCHES: [&str; 4] = ["admit", "assume", "magic", "tadmit"];
pub const TIMEOUT_CODE: i64 = -1;
pub const SCREENED_CODE: i64 = -2;
pub const UNAVAILABLE_CODE: i64 = -3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Parse,
    Resolve,
    Typecheck,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Range {
    pub start_line: u32,
    pub start_col: u32,
    pub end_line: u32,
    pub end_col: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckError {
    pub stage: Stage,
    pub code: i64,
    pub message: String,
    #[serde(default)]
    pub range: Range,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictStatus {
    Verified,
    Failed,
    Screened,
    CheckerUnavailable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckVerdict {
    pub example_id: String,
    pub sample_index: usize,
    pub status: VerdictStatus,
    pub errors: Vec<CheckError>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Syntax,
    IdentifierNotFound,
    Semantic,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 3] = [ErrorClass::Syntax, ErrorClass::IdentifierNotFound, ErrorClass::Semantic];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Syntax => "syntax",
            ErrorClass::IdentifierNotFound => "identifier_not_found",
            ErrorClass::Semantic => "semantic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScreenHit {
    pub token: String,
    pub line: u32,
    pub col: u32,
}

/// First identifier or keyword token that is an escape hatch, qualified
/// names included.
pub fn screen_escape_hatches(text: &str) -> Option<ScreenHit> {
    lang::tokenize(text)
        .into_iter()
        .find(|t| {
            matches!(t.kind, TokenKind::Identifier | TokenKind::Keyword)
                && ESCAPE_HATCHES.contains(&lang::short_name(&t.text))
        })
        .map(|t| ScreenHit { token: t.text, line: t.line as u32, col: t.col as u32 })
}

pub fn screened_verdict(example_id: &str, sample_index: usize, hit: &ScreenHit) -> CheckVerdict {
    let end_col = hit.col + hit.token.chars().count() as u32;
    CheckVerdict {
        example_id: example_id.to_string(),
        sample_index,
        status: VerdictStatus::Screened,
        errors: vec![CheckError {
            stage: Stage::Parse,
            code: SCREENED_CODE,
            message: format!("escape hatch `{}`", hit.token),
            range: Range { start_line: hit.line, start_col: hit.col, end_line: hit.line, end_col },
        }],
        wall_ms: 0,
    }
}

/// Parse errors dominate, then resolution errors, then everything else.
pub fn classify_error(errors: &[CheckError]) -> Option<ErrorClass> {
    if errors.is_empty() {
        return None;
    }
    if errors.iter().any(|e| e.stage == Stage::Parse) {
        return Some(ErrorClass::Syntax);
    }
    if errors.iter().any(|e| e.stage == Stage::Resolve || e.message.contains("Identifier not found")) {
        return Some(ErrorClass::IdentifierNotFound);
    }
    Some(ErrorClass::Semantic)
}

/// Faults that prevent a verdict from being produced at all.
#[derive(Debug, Error)]
pub enum CheckFault {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("checker unavailable: {0}")]
    Unavailable(String),
    #[error("cannot start checker: {0}")]
    Spawn(#[from] std::io::Error),
}

/// Error entry as sent by a checker; the stage may be left for the code table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireError {
    pub code: i64,
    #[serde(default)]
    pub stage: Option<Stage>,
    #[serde(default)]
    pub message: String,
    #[serde(default)]
    pub range: Range,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireVerdict {
    pub id: String,
    pub status: String,
    #[serde(default)]
    pub errors: Vec<WireError>,
    #[serde(default)]
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckerSettings {
    pub program: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub options: serde_json::Value,
    /// Stage for error codes the checker reports without one.
    #[serde(default)]
    pub code_stages: BTreeMap<i64, Stage>,
}

fn default_timeout_ms() -> u64 {
    120_000
}

impl CheckerSettings {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        CheckerSettings {
            program: program.into(),
            args,
            timeout_ms: default_timeout_ms(),
            options: serde_json::Value::Null,
            code_stages: BTreeMap::new(),
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Incident {
    pub example_id: String,
    pub sample_index: usize,
    pub kind: VerdictStatus,
    pub detail: String,
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Running {
    fn spawn(settings: &CheckerSettings) -> Result<Self, CheckFault> {
        let mut child = Command::new(&settings.program)
            .args(&settings.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Running { child, stdin, lines })
    }

    fn send(&mut self, msg: &serde_json::Value) -> bool {
        writeln!(self.stdin, "{msg}").and_then(|_| self.stdin.flush()).is_ok()
    }

    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

enum Reply {
    Line(String),
    Timeout,
    Gone,
}

/// Single-owner session with one checker process.
pub struct CheckerClient {
    settings: CheckerSettings,
    running: Option<Running>,
    session: Option<(String, String)>,
    ready: bool,
    next_id: u64,
    restarts: u32,
    incidents: Vec<Incident>,
}

impl CheckerClient {
    pub fn new(settings: CheckerSettings) -> Self {
        CheckerClient {
            settings,
            running: None,
            session: None,
            ready: false,
            next_id: 0,
            restarts: 0,
            incidents: Vec::new(),
        }
    }

    pub fn restarts(&self) -> u32 {
        self.restarts
    }

    pub fn incidents(&self) -> &[Incident] {
        &self.incidents
    }

    fn recv(&mut self) -> Reply {
        let timeout = self.settings.timeout();
        let Some(r) = self.running.as_mut() else { return Reply::Gone };
        match r.lines.recv_timeout(timeout) {
            Ok(line) => Reply::Line(line),
            Err(RecvTimeoutError::Timeout) => Reply::Timeout,
            Err(RecvTimeoutError::Disconnected) => Reply::Gone,
        }
    }

    fn stop(&mut self) {
        if let Some(r) = self.running.take() {
            r.kill();
        }
        self.ready = false;
    }

    /// Points the session at a definition; the process is (re)started lazily.
    pub fn init(&mut self, file: &str, defn_id: &str) -> Result<(), CheckFault> {
        let wanted = (file.to_string(), defn_id.to_string());
        if self.ready && self.session.as_ref() == Some(&wanted) {
            return Ok(());
        }
        self.session = Some(wanted);
        self.ready = false;
        self.handshake()
    }

    fn handshake(&mut self) -> Result<(), CheckFault> {
        let (file, defn_id) = self.session.clone().ok_or_else(|| CheckFault::Protocol("no session".into()))?;
        if self.running.is_none() {
            self.running = Some(Running::spawn(&self.settings)?);
        }
        let msg = json!({"op": "init", "file": file, "defn_id": defn_id, "options": self.settings.options});
        if !self.running.as_mut().unwrap().send(&msg) {
            self.stop();
            return Err(CheckFault::Unavailable("checker closed its input".into()));
        }
        match self.recv() {
            Reply::Line(line) => {
                let v: serde_json::Value = serde_json::from_str(&line)
                    .map_err(|e| CheckFault::Protocol(format!("bad init reply: {e}")))?;
                if v["status"] != "ready" {
                    self.stop();
                    return Err(CheckFault::Protocol(format!("init rejected: {line}")));
                }
                self.ready = true;
                Ok(())
            }
            Reply::Timeout => {
                self.stop();
                Err(CheckFault::Unavailable("init timed out".into()))
            }
            Reply::Gone => {
                self.stop();
                Err(CheckFault::Unavailable("checker exited during init".into()))
            }
        }
    }

    fn restart(&mut self) -> Result<(), CheckFault> {
        self.stop();
        self.restarts += 1;
        self.handshake()
    }

    fn verdict_from(&self, example_id: &str, sample_index: usize, w: WireVerdict) -> Result<CheckVerdict, CheckFault> {
        let status = match w.status.as_str() {
            "success" => VerdictStatus::Verified,
            "failure" => VerdictStatus::Failed,
            other => return Err(CheckFault::Protocol(format!("unknown status `{other}`"))),
        };
        let errors: Vec<CheckError> = w
            .errors
            .into_iter()
            .map(|e| CheckError {
                stage: e
                    .stage
                    .or_else(|| self.settings.code_stages.get(&e.code).copied())
                    .unwrap_or(Stage::Typecheck),
                code: e.code,
                message: e.message,
                range: e.range,
            })
            .collect();
        if status == VerdictStatus::Verified && !errors.is_empty() {
            return Err(CheckFault::Protocol("success reported with errors".into()));
        }
        if status == VerdictStatus::Failed && errors.is_empty() {
            return Err(CheckFault::Protocol("failure reported without errors".into()));
        }
        Ok(CheckVerdict { example_id: example_id.to_string(), sample_index, status, errors, wall_ms: w.wall_ms })
    }

    fn timeout_verdict(&self, example_id: &str, sample_index: usize) -> CheckVerdict {
        CheckVerdict {
            example_id: example_id.to_string(),
            sample_index,
            status: VerdictStatus::Failed,
            errors: vec![CheckError {
                stage: Stage::Typecheck,
                code: TIMEOUT_CODE,
                message: "timeout".into(),
                range: Range::default(),
            }],
            wall_ms: self.settings.timeout_ms,
        }
    }

    fn unavailable(&mut self, example_id: &str, sample_index: usize, detail: String) -> CheckVerdict {
        self.incidents.push(Incident {
            example_id: example_id.to_string(),
            sample_index,
            kind: VerdictStatus::CheckerUnavailable,
            detail: detail.clone(),
        });
        CheckVerdict {
            example_id: example_id.to_string(),
            sample_index,
            status: VerdictStatus::CheckerUnavailable,
            errors: vec![CheckError { stage: Stage::Typecheck, code: UNAVAILABLE_CODE, message: detail, range: Range::default() }],
            wall_ms: 0,
        }
    }

    /// Checks one candidate in the current session. A crash restarts the
    /// checker and re-sends the candidate once; a timeout restarts it and
    /// yields a failed verdict.
    pub fn check(&mut self, example_id: &str, sample_index: usize, source: &str) -> Result<CheckVerdict, CheckFault> {
        for attempt in 0..2 {
            if !self.ready {
                if let Err(e) = self.handshake() {
                    if attempt == 0 && matches!(e, CheckFault::Unavailable(_)) {
                        self.restarts += 1;
                        continue;
                    }
                    return match e {
                        CheckFault::Unavailable(m) => Ok(self.unavailable(example_id, sample_index, m)),
                        other => Err(other),
                    };
                }
            }
            self.next_id += 1;
            let id = format!("{example_id}#{sample_index}#{}", self.next_id);
            let sent = self
                .running
                .as_mut()
                .map(|r| r.send(&json!({"op": "check", "id": id, "source": source})))
                .unwrap_or(false);
            let reply = if sent { self.recv() } else { Reply::Gone };
            match reply {
                Reply::Line(line) => {
                    let parsed = serde_json::from_str::<WireVerdict>(&line)
                        .map_err(|e| CheckFault::Protocol(format!("malformed reply: {e}")))
                        .and_then(|w| {
                            if w.id == id {
                                self.verdict_from(example_id, sample_index, w)
                            } else {
                                Err(CheckFault::Protocol(format!("reply for `{}` while waiting for `{id}`", w.id)))
                            }
                        });
                    if parsed.is_err() {
                        self.stop();
                    }
                    return parsed;
                }
                Reply::Timeout => {
                    self.incidents.push(Incident {
                        example_id: example_id.to_string(),
                        sample_index,
                        kind: VerdictStatus::Failed,
                        detail: "timeout".into(),
                    });
                    let v = self.timeout_verdict(example_id, sample_index);
                    self.stop();
                    self.restarts += 1;
                    return Ok(v);
                }
                Reply::Gone => {
                    let detail = "checker exited mid-check".to_string();
                    if attempt == 1 {
                        self.stop();
                        return Ok(self.unavailable(example_id, sample_index, detail));
                    }
                    self.incidents.push(Incident {
                        example_id: example_id.to_string(),
                        sample_index,
                        kind: VerdictStatus::CheckerUnavailable,
                        detail,
                    });
                    if let Err(e) = self.restart() {
                        return match e {
                            CheckFault::Unavailable(m) => Ok(self.unavailable(example_id, sample_index, m)),
                            other => Err(other),
                        };
                    }
                }
            }
        }
        unreachable!("loop returns on the second attempt")
    }

    pub fn shutdown(&mut self) {
        if let Some(r) = self.running.as_mut() {
            r.send(&json!({"op": "shutdown"}));
        }
        self.stop();
    }
}

impl Drop for CheckerClient {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckJob {
    pub example_id: String,
    pub sample_index: usize,
    pub file: String,
    pub defn_id: String,
    pub source: String,
}

/// Screens a candidate, then checks it with `client` if it passes.
pub fn verify(client: &mut CheckerClient, job: &CheckJob) -> Result<CheckVerdict, CheckFault> {
    if let Some(hit) = screen_escape_hatches(&job.source) {
        return Ok(screened_verdict(&job.example_id, job.sample_index, &hit));
    }
    match client.init(&job.file, &job.defn_id) {
        Ok(()) => {}
        Err(CheckFault::Unavailable(m)) => {
            return Ok(client.unavailable(&job.example_id, job.sample_index, m));
        }
        Err(e) => return Err(e),
    }
    client.check(&job.example_id, job.sample_index, &job.source)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoolReport {
    pub verdicts: Vec<CheckVerdict>,
    pub incidents: Vec<Incident>,
    pub restarts: u32,
}

/// Fixed set of workers, one checker process each.
pub struct CheckerPool {
    settings: CheckerSettings,
    workers: usize,
}

impl CheckerPool {
    pub fn new(settings: CheckerSettings, workers: usize) -> Self {
        CheckerPool { settings, workers: workers.max(1) }
    }

    /// Verdicts in job order. Faults become `CheckerUnavailable` verdicts so
    /// every job gets exactly one verdict.
    pub fn run(&self, jobs: &[CheckJob]) -> PoolReport {
        let queue = Mutex::new((0..jobs.len()).collect::<VecDeque<usize>>());
        let results: Mutex<Vec<Option<CheckVerdict>>> = Mutex::new(vec![None; jobs.len()]);
        let incidents = Mutex::new(Vec::new());
        let restarts = Mutex::new(0);
        thread::scope(|s| {
            for _ in 0..self.workers.min(jobs.len().max(1)) {
                s.spawn(|| {
                    let mut client = CheckerClient::new(self.settings.clone());
                    loop {
                        let Some(i) = queue.lock().unwrap().pop_front() else { break };
                        let job = &jobs[i];
                        let verdict = match verify(&mut client, job) {
                            Ok(v) => v,
                            Err(e) => client.unavailable(&job.example_id, job.sample_index, e.to_string()),
                        };
                        results.lock().unwrap()[i] = Some(verdict);
                    }
                    incidents.lock().unwrap().extend(client.incidents().iter().cloned());
                    *restarts.lock().unwrap() += client.restarts();
                });
            }
        });
        let mut incidents = incidents.into_inner().unwrap();
        incidents.sort_by(|a, b| (&a.example_id, a.sample_index).cmp(&(&b.example_id, b.sample_index)));
        PoolReport {
            verdicts: results.into_inner().unwrap().into_iter().map(|v| v.expect("every job ran")).collect(),
            incidents,
            restarts: restarts.into_inner().unwrap(),
        }
    }
}
