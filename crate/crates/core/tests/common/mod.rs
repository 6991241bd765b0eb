#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use proofsynth::check::{CheckError, CheckVerdict, Range, Stage, VerdictStatus};
use proofsynth::embed::sha256_hex;
use proofsynth::generate::FinishReason;
use proofsynth::lang::ProblemClass;
use proofsynth::metrics::{ExampleOutcome, RunHeader, RunReport, SampleOutcome};
use serde_json::{json, Value};

/// (file, project, direct dependencies, split label)
pub const FILES: [(&str, &str, &[&str], &str); 8] = [
    ("Lib.Base", "Lib", &[], "train"),
    ("Lib.List", "Lib", &["Lib.Base"], "train"),
    ("Lib.Seq", "Lib", &["Lib.List"], "train"),
    ("Lib.Valid", "Lib", &["Lib.Base"], "valid"),
    ("App.Util", "App", &["Lib.List"], "train"),
    ("App.Main", "App", &["App.Util"], "intra_test"),
    ("App.Extra", "App", &["Lib.Base"], "intra_test"),
    ("Ext.Core", "Ext", &["Lib.Base"], "cross_test"),
];

pub const PER_FILE: usize = 4;

const TYPES: [&str; 6] = [
    "nat -> nat",
    "x:int -> y:int{y >= x}",
    "l:list int -> Lemma (length l >= 0)",
    "a:Type -> list a -> nat",
    "n:nat -> Tot (m:nat{m > n})",
    "unit -> Lemma (True)",
];

pub fn short(file: &str, j: usize) -> String {
    format!("{}_{j}", file.replace('.', "_").to_lowercase())
}

pub fn record_id(file: &str, j: usize) -> String {
    format!("{file}.{}", short(file, j))
}

pub fn fixture_records() -> Vec<Value> {
    let mut out = Vec::new();
    for (fi, (file, project, deps, split)) in FILES.iter().enumerate() {
        for j in 0..PER_FILE {
            let mut scope: Vec<String> =
                deps.iter().flat_map(|d| (0..PER_FILE).map(move |k| record_id(d, k))).collect();
            scope.extend((0..j).map(|k| record_id(file, k)));
            let (body, premises) = if j % 2 == 0 && !scope.is_empty() {
                let p = scope[(fi + j) % scope.len()].clone();
                let s = p.rsplit('.').next().unwrap().to_string();
                (format!("fun x -> {s} (x + {})", fi * 10 + j), vec![p])
            } else {
                (format!("fun x -> x + {}", fi * 10 + j), vec![])
            };
            let mut context = vec![format!("module {file}")];
            context.extend(deps.iter().map(|d| format!("open {d}")));
            context.push(format!("let {}_helper (x:nat) : nat = x + 1", short(file, j)));
            out.push(json!({
                "id": record_id(file, j),
                "project": project,
                "file": file,
                "goal_type": TYPES[(fi + j) % TYPES.len()],
                "prefix": format!("let {} : {} =", short(file, j), TYPES[(fi + j) % TYPES.len()]),
                "body": body,
                "file_context": context,
                "ideal_premises": premises,
                "in_scope": scope,
                "file_deps": deps,
                "split": split,
            }));
        }
    }
    out
}

pub fn evaluation_ids(records: &[Value]) -> Vec<String> {
    let mut ids: Vec<String> = records
        .iter()
        .filter(|r| matches!(r["split"].as_str(), Some("intra_test" | "cross_test")))
        .map(|r| r["id"].as_str().unwrap().to_string())
        .collect();
    ids.sort();
    ids
}

/// Planted generator behaviour keyed by example id: ground truth first,
/// ground truth at sample 7, always broken, or random filler.
pub fn planted(eval_ids: &[String]) -> BTreeMap<String, Value> {
    eval_ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mode = match i % 4 {
                0 => json!({"mode": "ground_truth_at", "index": 0}),
                1 => json!({"mode": "ground_truth_at", "index": 7}),
                2 => json!({"mode": "all_broken"}),
                _ => json!({"mode": "random"}),
            };
            (id.clone(), mode)
        })
        .collect()
}

fn toml_mode(v: &Value) -> String {
    match v["index"].as_u64() {
        Some(i) => format!("{{ mode = \"{}\", index = {i} }}", v["mode"].as_str().unwrap()),
        None => format!("{{ mode = \"{}\" }}", v["mode"].as_str().unwrap()),
    }
}

pub struct Fixture {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub records: Vec<Value>,
    pub eval_ids: Vec<String>,
    pub plan: BTreeMap<String, Value>,
}

/// Writes corpus, stub-checker script and a run configuration into `dir`.
/// The stub accepts exactly the ground-truth bodies. `extra` is appended to
/// the configuration verbatim.
pub fn write_fixture(dir: &Path, output_dir: &str, extra: &str) -> Fixture {
    let records = fixture_records();
    let corpus: String = records.iter().map(|r| format!("{r}\n")).collect();
    fs::write(dir.join("corpus.jsonl"), corpus).unwrap();
    let mut script: String = records
        .iter()
        .map(|r| {
            let h = sha256_hex(r["body"].as_str().unwrap().as_bytes());
            format!("{}\n", json!({"source_hash": h, "status": "success", "wall_ms": 5}))
        })
        .collect();
    script.push_str(
        &json!({"source_hash": "*", "status": "failure",
                "errors": [{"code": 19, "stage": "typecheck", "message": "Subtyping check failed"}]})
        .to_string(),
    );
    script.push('\n');
    fs::write(dir.join("stub.jsonl"), script).unwrap();
    let eval_ids = evaluation_ids(&records);
    let plan = planted(&eval_ids);
    let schedule: Vec<String> = plan.iter().map(|(id, m)| format!("\"{id}\" = {}", toml_mode(m))).collect();
    let config = format!(
        "run_id = \"fixture\"\nseed = 7\ncorpus = \"corpus.jsonl\"\noutput_dir = \"{output_dir}\"\n\
         [splits]\nfrom_labels = true\n\
         [retrieval]\nprovider = {{ kind = \"local_hashed\", dimension = 64 }}\n\
         [premises]\nmode = \"oracle\"\nmodel_path = \"premises.bin\"\nbase = {{ kind = \"local_hashed\", dimension = 64 }}\nhead_dimension = 16\n\
         [generation]\nk = 10\nmock = {{ seed = 1, mode = {{ mode = \"random\" }}, schedule = {{ {} }} }}\n\
         [checker]\nstub_script = \"stub.jsonl\"\ntimeout_ms = 20000\nworkers = 2\n{extra}",
        schedule.join(", ")
    );
    let path = dir.join(format!("{output_dir}.toml"));
    fs::write(&path, config).unwrap();
    Fixture { dir: dir.to_path_buf(), config: path, records, eval_ids, plan }
}

/// Planted verify@k: an example counts once its ground-truth sample index is
/// below k.
pub fn planted_verify(plan: &BTreeMap<String, Value>, k: u64) -> f64 {
    let solved = plan.values().filter(|m| m["index"].as_u64().is_some_and(|i| i < k)).count();
    100.0 * solved as f64 / plan.len() as f64
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_proofsynth")
}

pub fn sample(example_id: &str, index: usize, status: VerdictStatus, error: Option<(Stage, i64)>) -> SampleOutcome {
    SampleOutcome {
        sample_index: index,
        text: format!("candidate {index}"),
        finish_reason: FinishReason::Stop,
        verdict: CheckVerdict {
            example_id: example_id.to_string(),
            sample_index: index,
            status,
            errors: error
                .map(|(stage, code)| vec![CheckError { stage, code, message: "error".into(), range: Range::default() }])
                .unwrap_or_default(),
            wall_ms: 0,
        },
    }
}

/// One outcome whose `i`th sample is verified exactly when `verified[i]`.
pub fn outcome(id: &str, class: ProblemClass, verified: &[bool]) -> ExampleOutcome {
    ExampleOutcome {
        example_id: id.to_string(),
        class,
        ground_truth: "x".into(),
        samples: verified
            .iter()
            .enumerate()
            .map(|(i, &ok)| {
                if ok {
                    sample(id, i, VerdictStatus::Verified, None)
                } else {
                    sample(id, i, VerdictStatus::Failed, Some((Stage::Typecheck, 19)))
                }
            })
            .collect(),
    }
}

pub fn report(run_id: &str, outcomes: Vec<ExampleOutcome>) -> RunReport {
    let k = outcomes.iter().map(|o| o.samples.len()).max().unwrap_or(0);
    let header = RunHeader {
        run_id: run_id.to_string(),
        model_id: "mock".into(),
        prompt_format: Default::default(),
        ablations: Default::default(),
        retrieval_strategy: Default::default(),
        premise_mode: Default::default(),
        samples_per_example: k,
    };
    RunReport::new(header, outcomes).unwrap()
}

use proofsynth::corpus::DependenceGraph;

pub fn file_name(i: usize) -> String {
    format!("F{i:02}")
}

/// Graph on `n` files where `(a, b)` with `a > b` makes file `a` depend on
/// file `b`; file `i` belongs to project `P{projects[i]}`.
pub fn dag(n: usize, edges: &[(usize, usize)], projects: &[usize]) -> DependenceGraph {
    let mut g = DependenceGraph::new();
    for i in 0..n {
        g.add_file(&file_name(i), Some(&format!("P{}", projects[i % projects.len()]))).unwrap();
    }
    for &(a, b) in edges {
        if a < n && b < a {
            g.add_dependency(&file_name(a), &file_name(b));
        }
    }
    g
}

/// Files from which `target` is reachable along dependency edges, plus
/// `target` itself; computed by repeated relaxation over the edge list.
pub fn dependents_oracle(n: usize, edges: &[(usize, usize)], target: usize) -> std::collections::BTreeSet<String> {
    let mut reach = vec![false; n];
    reach[target] = true;
    loop {
        let mut changed = false;
        for &(a, b) in edges {
            if a < n && b < a && reach[b] && !reach[a] {
                reach[a] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (0..n).filter(|&i| reach[i]).map(file_name).collect()
}
