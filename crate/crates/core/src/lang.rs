//! Lexing and light-weight type analysis for the ML-family surface syntax.
//!
//! The lexer is lossless: concatenating the text of every token, trivia
//! included, reproduces the input exactly. Everything downstream (token
//! budgets, edit distance, identifier overlap, clone detection, escape-hatch
//! screening) is built on [`tokenize`].

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const KEYWORD_TABLE: &str = include_str!("../data/keywords.txt");

/// Replacement text for self-references in [`normalize_body`].
pub const SELF_MARKER: &str = "⟨SELF⟩";

const EFFECT_HEADS: [&str; 5] = ["Tot", "Pure", "Lemma", "GTot", "Ghost"];

// Effects outside the pure fragment. Goals using them are treated as
// dependently typed.
const STATEFUL_EFFECTS: [&str; 21] = [
    "ST", "STATE", "Stack", "StackInline", "Inline", "Steel", "SteelT", "SteelGhost",
    "SteelGhostT", "SteelAtomic", "STT", "STGhost", "Dv", "Div", "ML", "EXT", "HST", "All",
    "Exn", "Ex", "Tac",
];

fn keywords() -> &'static HashSet<&'static str> {
    static KEYWORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    KEYWORDS.get_or_init(|| {
        KEYWORD_TABLE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

/// Whether `word` is in the checked-in keyword table.
pub fn is_keyword(word: &str) -> bool {
    keywords().contains(word)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Identifier,
    Keyword,
    Operator,
    Literal,
    Punctuation,
    Comment,
    Whitespace,
}

impl TokenKind {
    pub fn is_trivia(self) -> bool {
        matches!(self, TokenKind::Whitespace | TokenKind::Comment)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    /// 1-based line of the first character.
    pub line: usize,
    /// 1-based column (in characters) of the first character.
    pub col: usize,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '\''
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '\''
}

fn is_operator_char(c: char) -> bool {
    "!$%&*+-./:<=>?@^|~\\#`".contains(c)
}

fn is_punctuation(c: char) -> bool {
    "()[]{},;".contains(c)
}

struct Lexer<'a> {
    chars: Vec<(usize, char)>,
    src: &'a str,
    pos: usize,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { chars: src.char_indices().collect(), src, pos: 0, line: 1, col: 1 }
    }

    fn peek(&self, ahead: usize) -> Option<char> {
        self.chars.get(self.pos + ahead).map(|&(_, c)| c)
    }

    fn byte_at(&self, pos: usize) -> usize {
        self.chars.get(pos).map_or(self.src.len(), |&(b, _)| b)
    }

    fn char_literal_len(&self) -> Option<usize> {
        // 'x' or '\x' style escapes up to the closing quote.
        match (self.peek(1), self.peek(2)) {
            (Some('\\'), _) => {
                let mut i = 2;
                while let Some(c) = self.peek(i) {
                    if c == '\'' {
                        return (i > 2).then_some(i + 1);
                    }
                    if c == '\n' || i > 10 {
                        return None;
                    }
                    i += 1;
                }
                None
            }
            (Some(c), Some('\'')) if c != '\'' && c != '\n' => {
                let after = self.peek(3);
                if after.is_some_and(is_ident_continue) {
                    None
                } else {
                    Some(3)
                }
            }
            _ => None,
        }
    }

    fn scan_token(&self) -> (TokenKind, usize) {
        let c = self.peek(0).expect("scan past end");
        if c.is_whitespace() {
            let mut n = 1;
            while self.peek(n).is_some_and(char::is_whitespace) {
                n += 1;
            }
            return (TokenKind::Whitespace, n);
        }
        if c == '(' && self.peek(1) == Some('*') {
            let mut depth = 1;
            let mut n = 2;
            while let Some(c) = self.peek(n) {
                if c == '(' && self.peek(n + 1) == Some('*') {
                    depth += 1;
                    n += 2;
                } else if c == '*' && self.peek(n + 1) == Some(')') {
                    depth -= 1;
                    n += 2;
                    if depth == 0 {
                        break;
                    }
                } else {
                    n += 1;
                }
            }
            return (TokenKind::Comment, n);
        }
        if c == '/' && self.peek(1) == Some('/') {
            let mut n = 2;
            while self.peek(n).is_some_and(|c| c != '\n') {
                n += 1;
            }
            return (TokenKind::Comment, n);
        }
        if c == '"' {
            let mut n = 1;
            while let Some(c) = self.peek(n) {
                n += 1;
                match c {
                    '\\' if self.peek(n).is_some() => n += 1,
                    '"' => break,
                    _ => {}
                }
            }
            return (TokenKind::Literal, n);
        }
        if c == '\'' {
            if let Some(n) = self.char_literal_len() {
                return (TokenKind::Literal, n);
            }
        }
        if c.is_ascii_digit() {
            let mut n = 1;
            loop {
                match self.peek(n) {
                    Some(c) if c.is_ascii_alphanumeric() || c == '_' => n += 1,
                    Some('.') if self.peek(n + 1).is_some_and(|c| c.is_ascii_digit()) => n += 2,
                    _ => break,
                }
            }
            return (TokenKind::Literal, n);
        }
        if is_ident_start(c) {
            let mut n = 1;
            loop {
                match self.peek(n) {
                    Some(c) if is_ident_continue(c) => n += 1,
                    Some('.')
                        if self.peek(n + 1).is_some_and(|c| c.is_ascii_alphabetic() || c == '_') =>
                    {
                        n += 2
                    }
                    _ => break,
                }
            }
            let text = &self.src[self.byte_at(self.pos)..self.byte_at(self.pos + n)];
            let kind = if is_keyword(text) { TokenKind::Keyword } else { TokenKind::Identifier };
            return (kind, n);
        }
        if is_punctuation(c) {
            return (TokenKind::Punctuation, 1);
        }
        if is_operator_char(c) {
            let mut n = 1;
            while self.peek(n).is_some_and(is_operator_char) {
                if self.peek(n) == Some('/') && self.peek(n + 1) == Some('/') {
                    break;
                }
                n += 1;
            }
            return (TokenKind::Operator, n);
        }
        (TokenKind::Operator, 1)
    }
}

impl Iterator for Lexer<'_> {
    type Item = Token;

    fn next(&mut self) -> Option<Token> {
        if self.pos >= self.chars.len() {
            return None;
        }
        let (kind, len) = self.scan_token();
        let text = self.src[self.byte_at(self.pos)..self.byte_at(self.pos + len)].to_string();
        let token = Token { kind, text, line: self.line, col: self.col };
        for c in token.text.chars() {
            if c == '\n' {
                self.line += 1;
                self.col = 1;
            } else {
                self.col += 1;
            }
        }
        self.pos += len;
        Some(token)
    }
}

/// Split `source` into tokens, trivia included.
pub fn tokenize(source: &str) -> Vec<Token> {
    Lexer::new(source).collect()
}

/// Non-trivia token texts.
pub fn significant_tokens(source: &str) -> Vec<String> {
    Lexer::new(source).filter(|t| !t.kind.is_trivia()).map(|t| t.text).collect()
}

/// Distinct identifier texts; keywords, literals and operators are excluded.
pub fn extract_identifiers(source: &str) -> BTreeSet<String> {
    Lexer::new(source).filter(|t| t.kind == TokenKind::Identifier).map(|t| t.text).collect()
}

/// Final dotted component of a qualified name.
pub fn short_name(name: &str) -> &str {
    name.rsplit('.').next().unwrap_or(name)
}

/// Token texts with trivia dropped and self-references replaced by [`SELF_MARKER`].
pub fn normalize_body(body: &str, self_name: &str) -> Vec<String> {
    let short = short_name(self_name);
    Lexer::new(body)
        .filter(|t| !t.kind.is_trivia())
        .map(|t| {
            if t.kind == TokenKind::Identifier && (t.text == self_name || t.text == short) {
                SELF_MARKER.to_string()
            } else {
                t.text
            }
        })
        .collect()
}

/// Counts tokens for budgeting. Implementations must be monotone: a prefix
/// of a text never costs more than the text.
pub trait Tokenizer: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Longest byte prefix of `text` that costs at most `max_tokens`.
    fn prefix_within(&self, text: &str, max_tokens: usize) -> usize {
        let bounds: Vec<usize> =
            text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len())).collect();
        let (mut lo, mut hi) = (0, bounds.len() - 1);
        while lo < hi {
            let mid = (lo + hi).div_ceil(2);
            if self.count(&text[..bounds[mid]]) <= max_tokens {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        bounds[lo]
    }
}

/// Default tokenizer: number of non-whitespace lexer tokens.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexTokenizer;

impl Tokenizer for LexTokenizer {
    fn count(&self, text: &str) -> usize {
        Lexer::new(text).filter(|t| t.kind != TokenKind::Whitespace).count()
    }

    fn prefix_within(&self, text: &str, max_tokens: usize) -> usize {
        let mut used = 0;
        let mut end = 0;
        let mut offset = 0;
        for token in Lexer::new(text) {
            offset += token.text.len();
            if token.kind == TokenKind::Whitespace {
                continue;
            }
            if used == max_tokens {
                break;
            }
            used += 1;
            end = offset;
        }
        end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LangError {
    #[error("malformed type: {0}")]
    MalformedType(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binder {
    pub name: Option<String>,
    pub type_text: String,
}

/// A goal type split at its top-level arrows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeShape {
    pub binders: Vec<Binder>,
    pub result_text: String,
    pub effect_head: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemClass {
    SimplyTyped,
    DependentlyTyped,
    Proof,
    AutoGenerated,
}

impl ProblemClass {
    pub const ALL: [ProblemClass; 4] = [
        ProblemClass::SimplyTyped,
        ProblemClass::DependentlyTyped,
        ProblemClass::Proof,
        ProblemClass::AutoGenerated,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProblemClass::SimplyTyped => "simply_typed",
            ProblemClass::DependentlyTyped => "dependently_typed",
            ProblemClass::Proof => "proof",
            ProblemClass::AutoGenerated => "auto_generated",
        }
    }
}

impl fmt::Display for ProblemClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProblemClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simply_typed" | "simply" => Ok(ProblemClass::SimplyTyped),
            "dependently_typed" | "dependent" => Ok(ProblemClass::DependentlyTyped),
            "proof" => Ok(ProblemClass::Proof),
            "auto_generated" | "auto" => Ok(ProblemClass::AutoGenerated),
            other => Err(format!("unknown problem class `{other}`")),
        }
    }
}

/// Token with its byte offset into the analysed text.
struct Located {
    kind: TokenKind,
    text: String,
    start: usize,
    end: usize,
}

fn located(text: &str) -> Vec<Located> {
    let mut offset = 0;
    tokenize(text)
        .into_iter()
        .filter_map(|t| {
            let start = offset;
            offset += t.text.len();
            (!t.kind.is_trivia()).then_some(Located { kind: t.kind, text: t.text, start, end: offset })
        })
        .collect()
}

fn bracket_delta(tok: &Located) -> Option<(i32, char)> {
    if tok.kind != TokenKind::Punctuation {
        return None;
    }
    match tok.text.as_str() {
        "(" => Some((1, ')')),
        "[" => Some((1, ']')),
        "{" => Some((1, '}')),
        ")" | "]" | "}" => Some((-1, tok.text.chars().next().unwrap())),
        _ => None,
    }
}

/// Indices of tokens at bracket depth zero, or an error on imbalance.
fn top_level_mask(tokens: &[Located], whole: &str) -> Result<Vec<bool>, LangError> {
    let mut stack: Vec<char> = Vec::new();
    let mut mask = Vec::with_capacity(tokens.len());
    for tok in tokens {
        match bracket_delta(tok) {
            Some((1, close)) => {
                mask.push(stack.is_empty());
                stack.push(close);
            }
            Some((_, close)) => {
                if stack.pop() != Some(close) {
                    return Err(LangError::MalformedType(format!(
                        "unbalanced `{}` in `{whole}`",
                        tok.text
                    )));
                }
                mask.push(stack.is_empty());
            }
            None => mask.push(stack.is_empty()),
        }
    }
    if !stack.is_empty() {
        return Err(LangError::MalformedType(format!("unclosed bracket in `{whole}`")));
    }
    Ok(mask)
}

/// If the whole of `tokens` is one parenthesised group, the inner range.
fn strip_outer_parens(tokens: &[Located]) -> Option<&[Located]> {
    if tokens.len() < 2 || tokens[0].text != "(" || tokens[tokens.len() - 1].text != ")" {
        return None;
    }
    let mut depth = 0;
    for (i, tok) in tokens.iter().enumerate() {
        match bracket_delta(tok) {
            Some((1, _)) => depth += 1,
            Some((_, _)) => {
                depth -= 1;
                if depth == 0 && i != tokens.len() - 1 {
                    return None;
                }
            }
            None => {}
        }
    }
    Some(&tokens[1..tokens.len() - 1])
}

fn slice_text<'t>(text: &'t str, tokens: &[Located]) -> &'t str {
    match (tokens.first(), tokens.last()) {
        (Some(first), Some(last)) => &text[first.start..last.end],
        _ => "",
    }
}

/// Binder names before a top-level `:`; `None` when the segment is an
/// anonymous argument type.
fn binder_names(tokens: &[Located]) -> Option<(Vec<String>, usize)> {
    let mut i = 0;
    if tokens.first().is_some_and(|t| t.kind == TokenKind::Operator && (t.text == "#" || t.text == "$")) {
        i = 1;
    }
    let mut names = Vec::new();
    while let Some(tok) = tokens.get(i) {
        if tok.kind == TokenKind::Identifier || tok.text == "_" {
            names.push(tok.text.clone());
            i += 1;
        } else {
            break;
        }
    }
    let colon = tokens.get(i)?;
    (!names.is_empty() && colon.kind == TokenKind::Operator && colon.text == ":")
        .then_some((names, i + 1))
}

fn parse_binder(text: &str, tokens: &[Located]) -> Vec<Binder> {
    let inner = strip_outer_parens(tokens).filter(|inner| binder_names(inner).is_some());
    let group = inner.unwrap_or(tokens);
    match binder_names(group) {
        // Several names are only meaningful inside parentheses: `(l m:list 'a)`.
        Some((names, rest)) if names.len() == 1 || inner.is_some() => {
            let type_text = slice_text(text, &group[rest..]).to_string();
            names
                .into_iter()
                .map(|n| Binder { name: Some(n), type_text: type_text.clone() })
                .collect()
        }
        _ => vec![Binder { name: None, type_text: slice_text(text, tokens).to_string() }],
    }
}

/// Split `type_text` at its top-level arrows into binders and a result.
pub fn parse_type_shape(type_text: &str) -> Result<TypeShape, LangError> {
    let tokens = located(type_text);
    if tokens.is_empty() {
        return Err(LangError::MalformedType("empty type".into()));
    }
    let mask = top_level_mask(&tokens, type_text)?;
    let mut segments: Vec<&[Located]> = Vec::new();
    let mut start = 0;
    for (i, tok) in tokens.iter().enumerate() {
        if mask[i] && tok.kind == TokenKind::Operator && tok.text == "->" {
            segments.push(&tokens[start..i]);
            start = i + 1;
        }
    }
    segments.push(&tokens[start..]);
    if segments.iter().any(|s| s.is_empty()) {
        return Err(LangError::MalformedType(format!("dangling arrow in `{type_text}`")));
    }
    let (result, args) = segments.split_last().expect("at least one segment");
    let binders = args.iter().flat_map(|seg| parse_binder(type_text, seg)).collect();
    let effect_head = result
        .first()
        .filter(|t| t.kind == TokenKind::Identifier && EFFECT_HEADS.contains(&t.text.as_str()))
        .map(|t| t.text.clone());
    Ok(TypeShape { binders, result_text: slice_text(type_text, result).to_string(), effect_head })
}

/// Head identifier of the returned type, looking through the effect, parentheses
/// and a refinement binder.
fn result_core_head(shape: &TypeShape) -> Option<String> {
    let tokens = located(&shape.result_text);
    let mut i = 0;
    if shape.effect_head.is_some() {
        i = 1;
    }
    while tokens.get(i).is_some_and(|t| t.text == "(") {
        i += 1;
    }
    if let (Some(a), Some(b)) = (tokens.get(i), tokens.get(i + 1)) {
        if a.kind == TokenKind::Identifier && b.text == ":" {
            i += 2;
        }
    }
    tokens
        .get(i)
        .filter(|t| matches!(t.kind, TokenKind::Identifier | TokenKind::Keyword))
        .map(|t| t.text.clone())
}

fn is_universe(type_text: &str) -> bool {
    let toks = significant_tokens(type_text);
    let head = toks.first().map(String::as_str).unwrap_or("");
    head == "eqtype" || head == "Type" || head.starts_with("Type0") || head.starts_with("Type1")
}

fn mentions(text: &str, name: &str) -> bool {
    extract_identifiers(text)
        .iter()
        .any(|id| id == name || id.strip_prefix(name).is_some_and(|rest| rest.starts_with('.')))
}

/// Heuristic taxonomy of a goal type. Never yields [`ProblemClass::AutoGenerated`].
pub fn classify(shape: &TypeShape) -> ProblemClass {
    let head = result_core_head(shape);
    let has_ensures = shape
        .binders
        .iter()
        .map(|b| b.type_text.as_str())
        .chain(std::iter::once(shape.result_text.as_str()))
        .any(|t| significant_tokens(t).iter().any(|tok| tok == "ensures"));
    let is_proof = shape.effect_head.as_deref() == Some("Lemma")
        || matches!(head.as_deref(), Some("squash") | Some("prop"))
        || (head.as_deref() == Some("unit") && has_ensures);
    if is_proof {
        return ProblemClass::Proof;
    }

    let first = significant_tokens(&shape.result_text).into_iter().next();
    if first.is_some_and(|t| STATEFUL_EFFECTS.contains(&t.as_str())) {
        return ProblemClass::DependentlyTyped;
    }

    for (i, binder) in shape.binders.iter().enumerate() {
        let Some(name) = binder.name.as_deref() else { continue };
        if name.starts_with('\'') || name == "_" || is_universe(&binder.type_text) {
            continue;
        }
        let later = shape.binders[i + 1..].iter().map(|b| b.type_text.as_str());
        if later.chain(std::iter::once(shape.result_text.as_str())).any(|t| mentions(t, name)) {
            return ProblemClass::DependentlyTyped;
        }
    }
    ProblemClass::SimplyTyped
}

/// Convenience: parse then classify.
pub fn classify_type(type_text: &str) -> Result<ProblemClass, LangError> {
    parse_type_shape(type_text).map(|s| classify(&s))
}
