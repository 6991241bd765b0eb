//! Definition records, the file-level dependence graph, and split generation.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lang::{self, ProblemClass};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("dependence cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("record `{id}`: premise `{name}` is not in scope")]
    PremiseNotInScope { id: String, name: String },
    #[error("record `{id}`: premise `{name}` must occur in the body and not in the goal type")]
    PremiseMisplaced { id: String, name: String },
    #[error("record `{0}` has an empty goal type")]
    EmptyGoalType(String),
    #[error("file `{file}` is claimed by projects `{first}` and `{second}`")]
    InconsistentProject { file: String, first: String, second: String },
    #[error("file `{file}` carries conflicting split labels")]
    InconsistentSplit { file: String },
    #[error("unknown file `{0}`")]
    UnknownFile(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    IntraTest,
    CrossTest,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::IntraTest => "intra_test",
            Split::CrossTest => "cross_test",
        }
    }

    pub fn is_test(self) -> bool {
        matches!(self, Split::IntraTest | Split::CrossTest)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "intra_test" => Ok(Split::IntraTest),
            "cross_test" => Ok(Split::CrossTest),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One synthesis problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefinitionRecord {
    pub id: String,
    pub project: String,
    pub file: String,
    pub goal_type: String,
    /// Definition header up to and including `=`.
    pub prefix: String,
    /// Ground-truth value following the prefix; may be empty.
    pub body: String,
    pub file_context: Vec<String>,
    pub ideal_premises: Vec<String>,
    pub in_scope: Vec<String>,
    pub class: ProblemClass,
    pub autogenerated: bool,
    pub split: Option<Split>,
}

impl DefinitionRecord {
    /// Header and value together, as shown for related examples.
    pub fn definition_text(&self) -> String {
        match (self.prefix.is_empty(), self.body.is_empty()) {
            (true, _) => self.body.clone(),
            (false, true) => self.prefix.clone(),
            (false, false) => format!("{} {}", self.prefix, self.body),
        }
    }
}

/// Wire form of a record: one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordLine {
    id: String,
    project: String,
    file: String,
    goal_type: String,
    #[serde(default)]
    prefix: String,
    #[serde(default)]
    body: String,
    #[serde(default)]
    file_context: Vec<String>,
    #[serde(default)]
    ideal_premises: Vec<String>,
    #[serde(default)]
    in_scope: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class: Option<ProblemClass>,
    #[serde(default)]
    autogenerated: bool,
    #[serde(default)]
    file_deps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// File-level dependence DAG. Edges point from a file to the files it depends on.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependenceGraph {
    nodes: BTreeMap<String, Option<String>>,
    deps: BTreeMap<String, BTreeSet<String>>,
}

impl DependenceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `file`, recording its project when known.
    pub fn add_file(&mut self, file: &str, project: Option<&str>) -> Result<(), CorpusError> {
        let slot = self.nodes.entry(file.to_string()).or_insert(None);
        match (slot.as_deref(), project) {
            (Some(existing), Some(p)) if existing != p => {
                return Err(CorpusError::InconsistentProject {
                    file: file.to_string(),
                    first: existing.to_string(),
                    second: p.to_string(),
                })
            }
            (None, Some(p)) => *slot = Some(p.to_string()),
            _ => {}
        }
        self.deps.entry(file.to_string()).or_default();
        Ok(())
    }

    /// Records that `file` depends on `dep`. Both become nodes.
    pub fn add_dependency(&mut self, file: &str, dep: &str) {
        for f in [file, dep] {
            self.nodes.entry(f.to_string()).or_insert(None);
            self.deps.entry(f.to_string()).or_default();
        }
        // self-loops are kept so `check_acyclic` reports them
        self.deps.get_mut(file).unwrap().insert(dep.to_string());
    }

    pub fn contains(&self, file: &str) -> bool {
        self.nodes.contains_key(file)
    }

    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn project_of(&self, file: &str) -> Option<&str> {
        self.nodes.get(file).and_then(|p| p.as_deref())
    }

    pub fn deps_of(&self, file: &str) -> impl Iterator<Item = &str> {
        self.deps.get(file).into_iter().flatten().map(String::as_str)
    }

    pub fn edge_count(&self) -> usize {
        self.deps.values().map(BTreeSet::len).sum()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.deps.iter().flat_map(|(f, ds)| ds.iter().map(move |d| (f.as_str(), d.as_str())))
    }

    /// Returns the first cycle found, as a closed path.
    pub fn check_acyclic(&self) -> Result<(), CorpusError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Fresh,
            Active,
            Done,
        }
        let mut marks: HashMap<&str, Mark> = self.files().map(|f| (f, Mark::Fresh)).collect();
        for root in self.files() {
            if marks[root] != Mark::Fresh {
                continue;
            }
            // iterative DFS keeping the active path for cycle reporting
            let mut path: Vec<(&str, Vec<&str>)> = vec![(root, self.deps_of(root).collect())];
            marks.insert(root, Mark::Active);
            while let Some((node, pending)) = path.last_mut() {
                let node = *node;
                match pending.pop() {
                    Some(next) => match marks[next] {
                        Mark::Fresh => {
                            marks.insert(next, Mark::Active);
                            path.push((next, self.deps_of(next).collect()));
                        }
                        Mark::Active => {
                            let start = path.iter().position(|(n, _)| *n == next).unwrap();
                            let mut cycle: Vec<String> =
                                path[start..].iter().map(|(n, _)| n.to_string()).collect();
                            cycle.push(next.to_string());
                            return Err(CorpusError::CycleDetected(cycle));
                        }
                        Mark::Done => {}
                    },
                    None => {
                        marks.insert(node, Mark::Done);
                        path.pop();
                    }
                }
            }
        }
        Ok(())
    }

    /// Every file `file` depends on, directly or transitively (excluding itself).
    pub fn transitive_deps(&self, file: &str) -> Result<BTreeSet<String>, CorpusError> {
        if !self.contains(file) {
            return Err(CorpusError::UnknownFile(file.to_string()));
        }
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&str> = self.deps_of(file).collect();
        while let Some(f) = queue.pop_front() {
            if seen.insert(f.to_string()) {
                queue.extend(self.deps_of(f));
            }
        }
        seen.remove(file);
        Ok(seen)
    }

    /// Every file that transitively depends on `file`, plus `file` itself.
    pub fn dependents_closure(&self, file: &str) -> Result<BTreeSet<String>, CorpusError> {
        if !self.contains(file) {
            return Err(CorpusError::UnknownFile(file.to_string()));
        }
        let mut reverse: HashMap<&str, Vec<&str>> = HashMap::new();
        for (from, to) in self.edges() {
            reverse.entry(to).or_default().push(from);
        }
        let mut seen = BTreeSet::from([file.to_string()]);
        let mut queue = VecDeque::from([file]);
        while let Some(f) = queue.pop_front() {
            for &dependent in reverse.get(f).into_iter().flatten() {
                if seen.insert(dependent.to_string()) {
                    queue.push_back(dependent);
                }
            }
        }
        Ok(seen)
    }

    /// Longest dependence chain below each file; roots have depth 0.
    pub fn depths(&self) -> Result<BTreeMap<String, usize>, CorpusError> {
        self.check_acyclic()?;
        fn visit<'g>(
            g: &'g DependenceGraph,
            f: &'g str,
            memo: &mut HashMap<&'g str, usize>,
        ) -> usize {
            if let Some(&d) = memo.get(f) {
                return d;
            }
            let d = g.deps_of(f).map(|dep| visit(g, dep, memo) + 1).max().unwrap_or(0);
            memo.insert(f, d);
            d
        }
        let mut memo = HashMap::new();
        Ok(self.files().map(|f| (f.to_string(), visit(self, f, &mut memo))).collect())
    }
}

/// Records plus their dependence graph.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub records: Vec<DefinitionRecord>,
    pub graph: DependenceGraph,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Option<&DefinitionRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn by_id(&self) -> HashMap<&str, &DefinitionRecord> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    /// Whether any record carries an explicit split label.
    pub fn has_split_labels(&self) -> bool {
        self.records.iter().any(|r| r.split.is_some())
    }
}

pub(crate) fn name_occurs(ids: &BTreeSet<String>, qualified: &str) -> bool {
    ids.iter().any(|id| id == qualified || qualified.ends_with(&format!(".{id}")))
}

fn validate_record(rec: &DefinitionRecord) -> Result<(), CorpusError> {
    if rec.goal_type.trim().is_empty() {
        return Err(CorpusError::EmptyGoalType(rec.id.clone()));
    }
    let scope: BTreeSet<&str> = rec.in_scope.iter().map(String::as_str).collect();
    for name in &rec.ideal_premises {
        if !scope.contains(name.as_str()) {
            return Err(CorpusError::PremiseNotInScope { id: rec.id.clone(), name: name.clone() });
        }
    }
    if !rec.body.trim().is_empty() {
        let body_ids = lang::extract_identifiers(&rec.body);
        let type_ids = lang::extract_identifiers(&rec.goal_type);
        for name in &rec.ideal_premises {
            if !name_occurs(&body_ids, name) || name_occurs(&type_ids, name) {
                return Err(CorpusError::PremiseMisplaced {
                    id: rec.id.clone(),
                    name: name.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Parses line-delimited JSON records. Blank lines are ignored.
pub fn parse_corpus(reader: impl BufRead) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::default();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(&line)
            .map_err(|e| CorpusError::ParseError { line: lineno, message: e.to_string() })?;
        if !seen.insert(raw.id.clone()) {
            return Err(CorpusError::DuplicateId(raw.id));
        }
        corpus.graph.add_file(&raw.file, Some(&raw.project))?;
        for dep in &raw.file_deps {
            corpus.graph.add_dependency(&raw.file, dep);
        }
        let class = match raw.class {
            Some(c) => c,
            None if raw.autogenerated => ProblemClass::AutoGenerated,
            None => lang::classify_type(&raw.goal_type).map_err(|e| CorpusError::ParseError {
                line: lineno,
                message: format!("record `{}`: {e}", raw.id),
            })?,
        };
        let rec = DefinitionRecord {
            id: raw.id,
            project: raw.project,
            file: raw.file,
            goal_type: raw.goal_type,
            prefix: raw.prefix,
            body: raw.body,
            file_context: raw.file_context,
            ideal_premises: raw.ideal_premises,
            in_scope: raw.in_scope,
            class,
            autogenerated: raw.autogenerated,
            split: raw.split,
        };
        validate_record(&rec)?;
        corpus.records.push(rec);
    }
    corpus.graph.check_acyclic()?;
    Ok(corpus)
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    parse_corpus(BufReader::new(File::open(path)?))
}

/// Writes `corpus` in the same line format [`parse_corpus`] reads.
pub fn write_corpus(corpus: &Corpus, mut out: impl Write) -> Result<(), CorpusError> {
    for rec in &corpus.records {
        let line = RecordLine {
            id: rec.id.clone(),
            project: rec.project.clone(),
            file: rec.file.clone(),
            goal_type: rec.goal_type.clone(),
            prefix: rec.prefix.clone(),
            body: rec.body.clone(),
            file_context: rec.file_context.clone(),
            ideal_premises: rec.ideal_premises.clone(),
            in_scope: rec.in_scope.clone(),
            class: Some(rec.class),
            autogenerated: rec.autogenerated,
            file_deps: corpus.graph.deps_of(&rec.file).map(str::to_string).collect(),
            split: rec.split,
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_corpus(corpus, &mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub intra: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.80, valid: 0.05, intra: 0.15 }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<(), CorpusError> {
        let all = [self.train, self.valid, self.intra];
        if all.iter().any(|f| !f.is_finite() || *f <= 0.0) {
            return Err(CorpusError::InvalidFractions(format!("{self:?} must be positive")));
        }
        if all.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(CorpusError::InvalidFractions(format!("{self:?} sums above 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitViolation {
    /// A training file depends on a file outside the training split.
    Closure { file: String, dep: String, dep_split: Option<Split> },
    /// A file of a cross project sits outside the cross-project test split.
    CrossProjectLeak { file: String, project: String, split: Split },
    /// A cross-project test file belongs to a project not marked cross.
    NotCrossProject { file: String },
}

impl fmt::Display for SplitViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SplitViolation::Closure { file, dep, dep_split } => write!(
                f,
                "closure violation: train file `{file}` depends on `{dep}` ({})",
                dep_split.map_or("unassigned", Split::as_str)
            ),
            SplitViolation::CrossProjectLeak { file, project, split } => {
                write!(f, "file `{file}` of cross project `{project}` is in split `{split}`")
            }
            SplitViolation::NotCrossProject { file } => {
                write!(f, "cross-project test file `{file}` is not from a cross project")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub files: BTreeMap<String, Split>,
    pub cross_projects: BTreeSet<String>,
}

impl SplitAssignment {
    pub fn split_of(&self, file: &str) -> Option<Split> {
        self.files.get(file).copied()
    }

    pub fn files_in(&self, split: Split) -> impl Iterator<Item = &str> {
        self.files.iter().filter(move |(_, s)| **s == split).map(|(f, _)| f.as_str())
    }

    /// Labels taken from the records themselves. Files without labelled
    /// records are left unassigned.
    pub fn from_records(corpus: &Corpus) -> Result<Self, CorpusError> {
        let mut out = SplitAssignment::default();
        for rec in &corpus.records {
            let Some(split) = rec.split else { continue };
            match out.files.insert(rec.file.clone(), split) {
                Some(prev) if prev != split => {
                    return Err(CorpusError::InconsistentSplit { file: rec.file.clone() })
                }
                _ => {}
            }
            if split == Split::CrossTest {
                out.cross_projects.insert(rec.project.clone());
            }
        }
        Ok(out)
    }

    /// Checks closure and cross-project separation. Files absent from the
    /// assignment and without a known project are treated as external.
    pub fn violations(&self, graph: &DependenceGraph) -> Vec<SplitViolation> {
        let mut out = Vec::new();
        for (file, &split) in &self.files {
            if split == Split::Train {
                for dep in graph.deps_of(file) {
                    let dep_split = self.split_of(dep);
                    let external = dep_split.is_none() && graph.project_of(dep).is_none();
                    if dep_split != Some(Split::Train) && !external {
                        out.push(SplitViolation::Closure {
                            file: file.clone(),
                            dep: dep.to_string(),
                            dep_split,
                        });
                    }
                }
            }
            let project = graph.project_of(file);
            let is_cross = project.is_some_and(|p| self.cross_projects.contains(p));
            if is_cross && split != Split::CrossTest {
                out.push(SplitViolation::CrossProjectLeak {
                    file: file.clone(),
                    project: project.unwrap().to_string(),
                    split,
                });
            }
            if !is_cross && split == Split::CrossTest {
                out.push(SplitViolation::NotCrossProject { file: file.clone() });
            }
        }
        out
    }
}

/// Partitions files into training, validation and the two test splits.
///
/// Files of `cross_projects` go to the cross-project test split. The rest are
/// visited shallowest first (seeded shuffle within a depth), and each file is
/// added to training together with its not-yet-included dependencies when
/// the whole closed group still fits the training quota. Validation then
/// takes its quota from the remaining files in shuffled order; everything
/// else is intra-project test.
pub fn make_splits(
    graph: &DependenceGraph,
    cross_projects: &BTreeSet<String>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<SplitAssignment, CorpusError> {
    fractions.validate()?;
    let depths = graph.depths()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut assignment =
        SplitAssignment { files: BTreeMap::new(), cross_projects: cross_projects.clone() };
    let mut pool: Vec<&str> = Vec::new();
    for file in graph.files() {
        if graph.project_of(file).is_some_and(|p| cross_projects.contains(p)) {
            assignment.files.insert(file.to_string(), Split::CrossTest);
        } else {
            pool.push(file);
        }
    }
    pool.shuffle(&mut rng);
    let shuffled = pool.clone();
    pool.sort_by_key(|f| depths[*f]);

    let n = pool.len() as f64;
    let train_quota = (fractions.train * n).round() as usize;
    let valid_quota = (fractions.valid * n).round() as usize;

    let mut train: BTreeSet<&str> = BTreeSet::new();
    for &file in &pool {
        if train.len() >= train_quota {
            break;
        }
        if train.contains(file) {
            continue;
        }
        let mut group: BTreeSet<&str> = BTreeSet::from([file]);
        let mut stack = vec![file];
        let mut blocked = false;
        while let Some(f) = stack.pop() {
            for dep in graph.deps_of(f) {
                if assignment.files.get(dep) == Some(&Split::CrossTest) {
                    blocked = true;
                }
                if !train.contains(dep) && group.insert(dep) {
                    stack.push(dep);
                }
            }
        }
        if !blocked && train.len() + group.len() <= train_quota {
            train.extend(group);
        }
    }

    let mut valid_left = valid_quota;
    for file in shuffled {
        let split = if train.contains(file) {
            Split::Train
        } else if valid_left > 0 {
            valid_left -= 1;
            Split::Valid
        } else {
            Split::IntraTest
        };
        assignment.files.insert(file.to_string(), split);
    }
    Ok(assignment)
}

/// Train/test pairs whose bodies coincide after self-name normalisation.
pub fn clone_report(
    records: &[DefinitionRecord],
    splits: &SplitAssignment,
) -> Vec<(String, String)> {
    let mut groups: HashMap<Vec<String>, Vec<&DefinitionRecord>> = HashMap::new();
    for rec in records.iter().filter(|r| !r.body.trim().is_empty()) {
        groups.entry(lang::normalize_body(&rec.body, &rec.id)).or_default().push(rec);
    }
    let mut pairs = Vec::new();
    for members in groups.values() {
        for a in members {
            if splits.split_of(&a.file) != Some(Split::Train) {
                continue;
            }
            for b in members {
                if splits.split_of(&b.file).is_some_and(Split::is_test) {
                    pairs.push((a.id.clone(), b.id.clone()));
                }
            }
        }
    }
    pairs.sort();
    pairs
}
