//! Prompt assembly under per-component token budgets.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::DefinitionRecord;
use crate::lang::{self, Tokenizer};
use crate::retrieve::RetrievalHit;

const DEFAULT_TEMPLATE: &str = include_str!("../data/prompt_template.txt");
pub const TRUNCATION_MARKER: &str = "(* ... *)";
pub const DEFAULT_SEPARATOR: &str = "<|end_of_text|>";
const PRIORITY_HEADS: [&str; 4] = ["open", "module", "include", "friend"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("template is missing section [{0}]")]
    MissingSection(String),
    #[error("template section [{section}] must contain {{{placeholder}}}")]
    MissingPlaceholder { section: String, placeholder: &'static str },
    #[error("goal section [{0}] must end with {{prefix}}")]
    GoalNotTerminal(String),
    #[error("unknown template section [{0}]")]
    UnknownSection(String),
    #[error("unknown value `{0}`")]
    UnknownValue(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBudget {
    pub context_tokens: usize,
    pub related_tokens: usize,
    pub premise_tokens: usize,
    pub generation_tokens: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Small,
    Large,
}

impl Profile {
    pub fn budget(self) -> PromptBudget {
        match self {
            Profile::Small => PromptBudget {
                context_tokens: 500,
                related_tokens: 400,
                premise_tokens: 300,
                generation_tokens: 500,
            },
            Profile::Large => PromptBudget {
                context_tokens: 10_000,
                related_tokens: 3_000,
                premise_tokens: 2_000,
                generation_tokens: 1_000,
            },
        }
    }

    /// Model context window the profile is sized for.
    pub fn capacity(self) -> usize {
        match self {
            Profile::Small => 2_048,
            Profile::Large => 16_000,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Small => "small",
            Profile::Large => "large",
        }
    }
}

impl FromStr for Profile {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "small" => Ok(Profile::Small),
            "large" => Ok(Profile::Large),
            _ => Err(PromptError::UnknownValue(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFormat {
    #[default]
    NaturalLanguage,
    Tagged,
    Completion,
}

impl PromptFormat {
    pub const ALL: [PromptFormat; 3] =
        [PromptFormat::NaturalLanguage, PromptFormat::Tagged, PromptFormat::Completion];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptFormat::NaturalLanguage => "natural_language",
            PromptFormat::Tagged => "tagged",
            PromptFormat::Completion => "completion",
        }
    }
}

impl FromStr for PromptFormat {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptFormat::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| PromptError::UnknownValue(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Instructions,
    Context,
    Related,
    Premises,
    Goal,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Instructions,
        Component::Context,
        Component::Related,
        Component::Premises,
        Component::Goal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Instructions => "instructions",
            Component::Context => "context",
            Component::Related => "related",
            Component::Premises => "premises",
            Component::Goal => "goal",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoContext,
    NoRelated,
    NoPremises,
}

impl Ablation {
    pub fn removes(self) -> Component {
        match self {
            Ablation::NoContext => Component::Context,
            Ablation::NoRelated => Component::Related,
            Ablation::NoPremises => Component::Premises,
        }
    }
}

impl FromStr for Ablation {
    type Err = PromptError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "no_context" => Ok(Ablation::NoContext),
            "no_related" => Ok(Ablation::NoRelated),
            "no_premises" => Ok(Ablation::NoPremises),
            _ => Err(PromptError::UnknownValue(s.to_string())),
        }
    }
}

/// Section texts keyed by format and component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    sections: HashMap<(PromptFormat, Component), String>,
    pub separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

fn placeholder_for(c: Component) -> &'static [&'static str] {
    match c {
        Component::Instructions => &[],
        Component::Context => &["context"],
        Component::Related => &["related"],
        Component::Premises => &["premises"],
        Component::Goal => &["goal_type", "prefix"],
    }
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut sections = HashMap::new();
        let mut current: Option<((PromptFormat, Component), String)> = None;
        let mut finish = |cur: Option<((PromptFormat, Component), String)>| {
            if let Some((key, body)) = cur {
                sections.insert(key, body.trim_end_matches('\n').to_string());
            }
        };
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                let key = name
                    .split_once('.')
                    .and_then(|(f, c)| {
                        let f = f.parse::<PromptFormat>().ok()?;
                        let c = Component::ALL.into_iter().find(|x| x.as_str() == c)?;
                        Some((f, c))
                    })
                    .ok_or_else(|| PromptError::UnknownSection(name.to_string()))?;
                finish(current.take());
                current = Some((key, String::new()));
                continue;
            }
            if let Some((_, body)) = current.as_mut() {
                if !body.is_empty() || !trimmed.is_empty() {
                    body.push_str(line);
                    body.push('\n');
                }
            }
        }
        finish(current);
        for f in PromptFormat::ALL {
            for c in Component::ALL {
                let name = format!("{}.{}", f.as_str(), c.as_str());
                let body = sections.get(&(f, c)).ok_or_else(|| PromptError::MissingSection(name.clone()))?;
                for &p in placeholder_for(c) {
                    if !body.contains(&format!("{{{p}}}")) {
                        return Err(PromptError::MissingPlaceholder { section: name.clone(), placeholder: p });
                    }
                }
                if c == Component::Goal && !body.ends_with("{prefix}") {
                    return Err(PromptError::GoalNotTerminal(name));
                }
            }
        }
        Ok(PromptTemplate { sections, separator: DEFAULT_SEPARATOR.to_string() })
    }

    pub fn with_separator(mut self, separator: impl Into<String>) -> Self {
        self.separator = separator.into();
        self
    }

    fn render(&self, format: PromptFormat, c: Component, values: &[(&str, &str)]) -> String {
        render(&self.sections[&(format, c)], values)
    }
}

/// Single left-to-right substitution, so inserted text is never rescanned.
fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let hit = after.find('}').and_then(|end| {
            let key = &after[..end];
            values.iter().find(|(k, _)| *k == key).map(|(_, v)| (end, *v))
        });
        match hit {
            Some((end, v)) => {
                out.push_str(v);
                rest = &after[end + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPart {
    pub component: Component,
    /// Rendered text, including the component's description.
    pub text: String,
    /// Raw material inserted into the template.
    pub content: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub format: PromptFormat,
    pub parts: Vec<PromptPart>,
    pub ablations: BTreeSet<Ablation>,
    pub total_tokens: usize,
    pub text: String,
}

impl PromptBundle {
    pub fn part(&self, c: Component) -> Option<&PromptPart> {
        self.parts.iter().find(|p| p.component == c)
    }
}

fn is_priority(line: &str) -> bool {
    lang::tokenize(line)
        .into_iter()
        .find(|t| !t.kind.is_trivia())
        .is_some_and(|t| PRIORITY_HEADS.contains(&t.text.as_str()))
}

/// Indices of `items` admitted by a skip-and-continue scan in `order`.
fn greedy(costs: &[usize], order: impl IntoIterator<Item = usize>, budget: usize) -> Vec<usize> {
    let mut left = budget;
    let mut chosen = Vec::new();
    for i in order {
        if costs[i] <= left {
            left -= costs[i];
            chosen.push(i);
        }
    }
    chosen
}

/// Context lines that fit `budget` when joined by newlines. Module, open,
/// include and friend lines are scanned first, then the rest from the goal
/// backwards. Survivors keep their file order. If nothing fits, the nearest
/// element is cut at a token boundary and marked.
pub fn select_context(file_context: &[String], budget: usize, tokenizer: &dyn Tokenizer) -> Vec<String> {
    if budget == 0 || file_context.is_empty() {
        return Vec::new();
    }
    let costs: Vec<usize> = file_context.iter().map(|s| tokenizer.count(s)).collect();
    let (prio, rest): (Vec<usize>, Vec<usize>) =
        (0..file_context.len()).rev().partition(|&i| is_priority(&file_context[i]));
    let mut chosen = greedy(&costs, prio.into_iter().chain(rest), budget);
    loop {
        let mut sorted = chosen.clone();
        sorted.sort_unstable();
        let lines: Vec<String> = sorted.iter().map(|&i| file_context[i].clone()).collect();
        if lines.is_empty() || tokenizer.count(&lines.join("\n")) <= budget {
            if !lines.is_empty() {
                return lines;
            }
            break;
        }
        chosen.pop();
    }
    truncate_nearest(file_context, budget, tokenizer).into_iter().collect()
}

fn truncate_nearest(file_context: &[String], budget: usize, tokenizer: &dyn Tokenizer) -> Option<String> {
    let nearest = file_context.iter().rev().find(|s| !s.trim().is_empty())?;
    let marker_cost = tokenizer.count(TRUNCATION_MARKER);
    let room = budget.checked_sub(marker_cost).filter(|&r| r > 0)?;
    let cut = nearest[..tokenizer.prefix_within(nearest, room)].trim_end();
    if cut.is_empty() {
        return None;
    }
    let text = format!("{cut} {TRUNCATION_MARKER}");
    (tokenizer.count(&text) <= budget).then_some(text)
}

fn render_hit(hit: &RetrievalHit) -> String {
    format!("{}\n{}", hit.type_text, hit.body_text)
}

fn select_related(hits: &[RetrievalHit], budget: usize, tokenizer: &dyn Tokenizer) -> Vec<String> {
    let texts: Vec<String> = hits.iter().map(render_hit).collect();
    let costs: Vec<usize> = texts.iter().map(|t| tokenizer.count(t)).collect();
    let mut chosen = greedy(&costs, 0..texts.len(), budget);
    loop {
        let picked: Vec<String> = chosen.iter().map(|&i| texts[i].clone()).collect();
        if tokenizer.count(&picked.join("\n\n")) <= budget {
            return picked;
        }
        chosen.pop();
    }
}

/// Short names, first occurrence kept.
pub fn premise_names(premises: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    premises
        .iter()
        .map(|p| lang::short_name(p).to_string())
        .filter(|s| seen.insert(s.clone()))
        .collect()
}

fn select_premises(premises: &[String], budget: usize, tokenizer: &dyn Tokenizer) -> Vec<String> {
    let names = premise_names(premises);
    let sep_cost = tokenizer.count(", ");
    let costs: Vec<usize> = names.iter().map(|n| tokenizer.count(n) + sep_cost).collect();
    // the first name carries no separator, so grant one separator of slack
    let mut chosen = greedy(&costs, 0..names.len(), budget + sep_cost);
    loop {
        let picked: Vec<String> = chosen.iter().map(|&i| names[i].clone()).collect();
        if tokenizer.count(&picked.join(", ")) <= budget {
            return picked;
        }
        chosen.pop();
    }
}

/// Everything [`assemble`] needs besides the record and the retrieved material.
pub struct PromptSettings<'a> {
    pub budget: PromptBudget,
    pub format: PromptFormat,
    pub ablations: &'a BTreeSet<Ablation>,
    pub template: &'a PromptTemplate,
    pub tokenizer: &'a dyn Tokenizer,
}

impl PromptSettings<'_> {
    fn budget_of(&self, c: Component) -> Option<usize> {
        match c {
            Component::Context => Some(self.budget.context_tokens),
            Component::Related => Some(self.budget.related_tokens),
            Component::Premises => Some(self.budget.premise_tokens),
            Component::Instructions | Component::Goal => None,
        }
    }

    /// Renders a budgeted part, shrinking the content budget until the full
    /// part fits. Returns `None` when no content survives.
    fn budgeted_part(
        &self,
        c: Component,
        select: impl Fn(usize) -> Vec<String>,
        joiner: &str,
    ) -> Option<PromptPart> {
        let budget = self.budget_of(c)?;
        let key = placeholder_for(c)[0];
        let header = self.tokenizer.count(&self.template.render(self.format, c, &[(key, "")]));
        let mut content_budget = budget.checked_sub(header)?;
        loop {
            let items = select(content_budget);
            if items.is_empty() {
                return None;
            }
            let content = items.join(joiner);
            let text = self.template.render(self.format, c, &[(key, &content)]);
            let token_count = self.tokenizer.count(&text);
            if token_count <= budget {
                return Some(PromptPart { component: c, text, content, token_count });
            }
            content_budget = content_budget.checked_sub((token_count - budget).max(1))?;
        }
    }

    fn fixed_part(&self, c: Component, values: &[(&str, &str)], content: String) -> PromptPart {
        let text = self.template.render(self.format, c, values);
        PromptPart { component: c, token_count: self.tokenizer.count(&text), text, content }
    }
}

pub fn assemble(
    record: &DefinitionRecord,
    related: &[RetrievalHit],
    premises: &[String],
    settings: &PromptSettings<'_>,
) -> PromptBundle {
    let tok = settings.tokenizer;
    let enabled = |c: Component| !settings.ablations.iter().any(|a| a.removes() == c);
    let mut parts = vec![settings.fixed_part(Component::Instructions, &[], String::new())];
    if enabled(Component::Context) {
        parts.extend(settings.budgeted_part(
            Component::Context,
            |b| select_context(&record.file_context, b, tok),
            "\n",
        ));
    }
    if enabled(Component::Related) {
        parts.extend(settings.budgeted_part(Component::Related, |b| select_related(related, b, tok), "\n\n"));
    }
    if enabled(Component::Premises) {
        parts.extend(settings.budgeted_part(Component::Premises, |b| select_premises(premises, b, tok), ", "));
    }
    parts.push(settings.fixed_part(
        Component::Goal,
        &[("goal_type", &record.goal_type), ("prefix", &record.prefix)],
        record.goal_type.clone(),
    ));
    let joiner = match settings.format {
        PromptFormat::Completion => format!("\n{}\n", settings.template.separator),
        _ => "\n\n".to_string(),
    };
    let text = parts.iter().map(|p| p.text.as_str()).collect::<Vec<_>>().join(&joiner);
    PromptBundle {
        format: settings.format,
        total_tokens: tok.count(&text),
        parts,
        ablations: settings.ablations.clone(),
        text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{LexTokenizer, ProblemClass};

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn record() -> DefinitionRecord {
        DefinitionRecord {
            id: "M.double".into(),
            project: "p".into(),
            file: "M.fst".into(),
            goal_type: "x:nat -> nat".into(),
            prefix: "let double (x:nat) : nat =".into(),
            body: "add x x".into(),
            file_context: s(&["module M", "open FStar.List", "let add (a b:nat) : nat = a + b", "let zero = 0"]),
            ideal_premises: s(&["M.add"]),
            in_scope: s(&["M.add", "M.zero"]),
            class: ProblemClass::SimplyTyped,
            autogenerated: false,
            split: None,
        }
    }

    fn hit(id: &str, ty: &str, body: &str) -> RetrievalHit {
        RetrievalHit {
            record_id: id.into(),
            similarity: 0.5,
            type_text: ty.into(),
            body_text: body.into(),
            token_cost: LexTokenizer.count(ty) + LexTokenizer.count(body),
        }
    }

    #[test]
    fn bundled_template_parses_and_rejects_gaps() {
        let t = PromptTemplate::default();
        assert_eq!(t.separator, "<|end_of_text|>");
        let broken = DEFAULT_TEMPLATE.replace("[tagged.premises]", "[tagged.bogus]");
        assert!(matches!(PromptTemplate::parse(&broken), Err(PromptError::UnknownSection(_))));
        let missing = DEFAULT_TEMPLATE.replace("{related}\n</related>", "</related>");
        assert!(matches!(
            PromptTemplate::parse(&missing),
            Err(PromptError::MissingPlaceholder { .. })
        ));
    }

    #[test]
    fn render_does_not_rescan_inserted_text() {
        assert_eq!(render("a {x} {y} {z}", &[("x", "{y}"), ("y", "Y")]), "a {y} Y {z}");
    }

    #[test]
    fn context_selection_examples() {
        let tok = LexTokenizer;
        assert!(select_context(&s(&["a b", "c"]), 0, &tok).is_empty());
        assert_eq!(select_context(&s(&["a b c", "d e f", "g"]), 1, &tok), s(&["g"]));
        // open lines win over nearer ones
        let ctx = s(&["open A", "let x = 1", "let y = 2"]);
        assert_eq!(select_context(&ctx, 7, &tok), s(&["open A", "let y = 2"]));
    }

    #[test]
    fn oversized_nearest_element_is_truncated() {
        let tok = LexTokenizer;
        let ctx = s(&["let big = a b c d e f g h"]);
        let got = select_context(&ctx, 5, &tok);
        assert_eq!(got, s(&["let big = a (* ... *)"]));
        assert!(tok.count(&got[0]) <= 5);
    }

    #[test]
    fn context_matches_exhaustive_rank_oracle() {
        let tok = LexTokenizer;
        let ctx = s(&["let a = 1 + 2", "open B", "let c = f x y z", "let d = 0", "module Q", "let e = g"]);
        let costs: Vec<usize> = ctx.iter().map(|c| tok.count(c)).collect();
        let rank: Vec<usize> = vec![4, 1, 5, 3, 2, 0];
        for budget in 0..=25 {
            // every subset that the rank-order greedy would produce: the unique
            // subset in which each skipped element did not fit at its turn
            let n = ctx.len();
            let mut expected = None;
            for mask in 0u32..(1 << n) {
                let mut used = 0;
                let ok = rank.iter().all(|&i| {
                    let inside = mask >> i & 1 == 1;
                    let fits = used + costs[i] <= budget;
                    if inside && fits {
                        used += costs[i];
                    }
                    inside == fits
                });
                if ok {
                    expected = Some((0..n).filter(|i| mask >> i & 1 == 1).map(|i| ctx[i].clone()).collect::<Vec<_>>());
                }
            }
            let expected = expected.unwrap();
            let got = select_context(&ctx, budget, &tok);
            if expected.is_empty() {
                assert!(got.len() <= 1);
            } else {
                assert_eq!(got, expected, "budget {budget}");
            }
        }
    }

    fn settings<'a>(
        format: PromptFormat,
        ablations: &'a BTreeSet<Ablation>,
        template: &'a PromptTemplate,
    ) -> PromptSettings<'a> {
        PromptSettings { budget: Profile::Small.budget(), format, ablations, template, tokenizer: &LexTokenizer }
    }

    #[test]
    fn natural_language_layout() {
        let t = PromptTemplate::default();
        let none = BTreeSet::new();
        let hits = vec![hit("N.twice", "y:int -> int", "let twice y = y + y")];
        let b = assemble(&record(), &hits, &s(&["M.add", "M.add", "M.zero"]), &settings(PromptFormat::NaturalLanguage, &none, &t));
        let comps: Vec<Component> = b.parts.iter().map(|p| p.component).collect();
        assert_eq!(comps, Component::ALL.to_vec());
        assert!(b.part(Component::Context).unwrap().text.starts_with("Here is the context of the file:\nmodule M"));
        assert!(b.part(Component::Related).unwrap().text.contains("y:int -> int\nlet twice y = y + y"));
        assert_eq!(b.part(Component::Premises).unwrap().content, "add, zero");
        assert!(b.text.ends_with("Write a definition for the following type:\nx:nat -> nat\nlet double (x:nat) : nat ="));
        assert_eq!(b.total_tokens, LexTokenizer.count(&b.text));
        for p in &b.parts {
            assert_eq!(p.token_count, LexTokenizer.count(&p.text));
        }
    }

    #[test]
    fn tagged_and_completion_layouts() {
        let t = PromptTemplate::default();
        let none = BTreeSet::new();
        let tagged = assemble(&record(), &[], &s(&["M.add"]), &settings(PromptFormat::Tagged, &none, &t));
        assert!(tagged.part(Component::Context).unwrap().text.starts_with("<context>\n"));
        assert!(tagged.part(Component::Premises).unwrap().text.ends_with("</premises>"));
        assert!(tagged.text.ends_with("</goal>\nlet double (x:nat) : nat ="));

        let comp = assemble(&record(), &[], &[], &settings(PromptFormat::Completion, &none, &t));
        assert_eq!(comp.text.matches("<|end_of_text|>").count(), comp.parts.len() - 1);
        let custom = t.clone().with_separator("<SEP>");
        let comp = assemble(&record(), &[], &[], &settings(PromptFormat::Completion, &none, &custom));
        assert!(comp.text.contains("\n<SEP>\n"));
    }

    #[test]
    fn empty_related_and_premises_leave_three_parts() {
        let t = PromptTemplate::default();
        let none = BTreeSet::new();
        let b = assemble(&record(), &[], &[], &settings(PromptFormat::NaturalLanguage, &none, &t));
        let comps: Vec<Component> = b.parts.iter().map(|p| p.component).collect();
        assert_eq!(comps, vec![Component::Instructions, Component::Context, Component::Goal]);
    }

    #[test]
    fn ablations_remove_exactly_their_component() {
        let t = PromptTemplate::default();
        let hits = vec![hit("N.twice", "int -> int", "let twice y = y + y")];
        let premises = s(&["M.add"]);
        let none = BTreeSet::new();
        let full = assemble(&record(), &hits, &premises, &settings(PromptFormat::Tagged, &none, &t));
        for a in [Ablation::NoContext, Ablation::NoRelated, Ablation::NoPremises] {
            let set = BTreeSet::from([a]);
            let b = assemble(&record(), &hits, &premises, &settings(PromptFormat::Tagged, &set, &t));
            let expected: Vec<&PromptPart> = full.parts.iter().filter(|p| p.component != a.removes()).collect();
            assert_eq!(b.parts.iter().collect::<Vec<_>>(), expected);
            assert!(b.total_tokens < full.total_tokens);
        }
        let all = BTreeSet::from([Ablation::NoContext, Ablation::NoRelated, Ablation::NoPremises]);
        let b = assemble(&record(), &hits, &premises, &settings(PromptFormat::Tagged, &all, &t));
        let comps: Vec<Component> = b.parts.iter().map(|p| p.component).collect();
        assert_eq!(comps, vec![Component::Instructions, Component::Goal]);
    }

    #[test]
    fn small_profile_budgets_hold_on_large_inputs() {
        let t = PromptTemplate::default();
        let none = BTreeSet::new();
        let mut rec = record();
        rec.file_context = (0..400).map(|i| format!("let f{i} (x:nat) : nat = x + {i}")).collect();
        let hits: Vec<RetrievalHit> =
            (0..100).map(|i| hit(&format!("H.h{i}"), "nat -> nat -> nat", &format!("let h{i} a b = a * b + {i}"))).collect();
        let premises: Vec<String> = (0..500).map(|i| format!("Some.Module.premise_{i}")).collect();
        for format in PromptFormat::ALL {
            let b = assemble(&rec, &hits, &premises, &settings(format, &none, &t));
            assert!(b.part(Component::Context).unwrap().token_count <= 500);
            assert!(b.part(Component::Related).unwrap().token_count <= 400);
            assert!(b.part(Component::Premises).unwrap().token_count <= 300);
            assert!(b.part(Component::Context).unwrap().token_count > 400);
            // nearest lines survive
            assert!(b.part(Component::Context).unwrap().content.ends_with("x + 399"));
        }
    }
}
