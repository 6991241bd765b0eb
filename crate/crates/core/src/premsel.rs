//! Premise selection with a trainable linear head over a base embedding.
//!
//! The head maps a base vector `x` to `W x`. Training minimises a squared
//! error on raw dot products; ranking uses cosine similarity.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{name_occurs, DefinitionRecord};
use crate::embed::{dot, EmbedError, EmbeddingProvider};
use crate::lang;

const MODEL_MAGIC: &[u8; 4] = b"PMS1";
const INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PremselError {
    #[error("goal `{0}` has fewer in-scope negatives than positives")]
    InsufficientNegatives(String),
    #[error("non-finite loss in epoch {0}")]
    NonFiniteLoss(usize),
    #[error("no text for premise `{0}`")]
    MissingText(String),
    #[error("goal `{0}` has no positive premises")]
    NoPositives(String),
    #[error("a trained premise model is required")]
    ModelRequired,
    #[error("invalid training parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: model expects {expected}, embedding has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PremiseTrainingExample {
    pub goal_id: String,
    pub goal_text: String,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingPairs {
    pub examples: Vec<PremiseTrainingExample>,
    /// Goals whose negatives had to be drawn with replacement, or that were
    /// dropped because no negative candidate existed at all.
    pub insufficient: Vec<String>,
}

/// Text embedded for a premise: `name : type` when the premise is itself a
/// record, otherwise the bare name.
pub fn premise_texts(records: &[DefinitionRecord]) -> BTreeMap<String, String> {
    let by_id: HashMap<&str, &DefinitionRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut out = BTreeMap::new();
    for rec in records {
        for name in rec.in_scope.iter().chain(&rec.ideal_premises) {
            out.entry(name.clone()).or_insert_with(|| match by_id.get(name.as_str()) {
                Some(p) => format!("{} : {}", p.id, p.goal_type),
                None => name.clone(),
            });
        }
    }
    out
}

/// One example per record with at least one ideal premise.
pub fn build_training_pairs<'a>(
    records: impl IntoIterator<Item = &'a DefinitionRecord>,
    seed: u64,
) -> TrainingPairs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TrainingPairs::default();
    for rec in records {
        if rec.ideal_premises.is_empty() {
            continue;
        }
        let mentioned: BTreeSet<String> = lang::extract_identifiers(&rec.body)
            .into_iter()
            .chain(lang::extract_identifiers(&rec.goal_type))
            .collect();
        let positives: BTreeSet<&str> = rec.ideal_premises.iter().map(String::as_str).collect();
        let mut seen = BTreeSet::new();
        let pool: Vec<&String> = rec
            .in_scope
            .iter()
            .filter(|n| !positives.contains(n.as_str()) && !name_occurs(&mentioned, n))
            .filter(|n| seen.insert(n.as_str()))
            .collect();
        let n = rec.ideal_premises.len();
        let negatives: Vec<String> = if pool.len() >= n {
            pool.choose_multiple(&mut rng, n).map(|s| s.to_string()).collect()
        } else {
            log::warn!("{}", PremselError::InsufficientNegatives(rec.id.clone()));
            out.insufficient.push(rec.id.clone());
            if pool.is_empty() {
                continue;
            }
            (0..n).map(|_| pool[rng.gen_range(0..pool.len())].to_string()).collect()
        };
        out.examples.push(PremiseTrainingExample {
            goal_id: rec.id.clone(),
            goal_text: rec.goal_type.clone(),
            positives: rec.ideal_premises.clone(),
            negatives,
        });
    }
    out
}

/// Linear head `k x d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PremiseModel {
    pub base_dimension: usize,
    pub head_dimension: usize,
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl PremiseModel {
    pub fn new(base_dimension: usize, head_dimension: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..base_dimension * head_dimension)
            .map(|_| rng.gen_range(-INIT_RANGE..=INIT_RANGE))
            .collect();
        PremiseModel { base_dimension, head_dimension, weights, seed }
    }

    pub fn head(&self, x: &[f64]) -> Vec<f64> {
        self.weights.chunks(self.base_dimension).map(|row| dot(row, x)).collect()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), PremselError> {
        if x.len() == self.base_dimension {
            Ok(())
        } else {
            Err(PremselError::DimensionMismatch { expected: self.base_dimension, actual: x.len() })
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PremselError> {
        let mut buf = Vec::with_capacity(28 + 8 * self.weights.len());
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&(self.base_dimension as u64).to_le_bytes());
        buf.extend_from_slice(&(self.head_dimension as u64).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        for w in &self.weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PremselError> {
        let bytes = fs::read(path)?;
        if bytes.len() < 28 || &bytes[..4] != MODEL_MAGIC {
            return Err(PremselError::MalformedModel("bad header".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap());
        let (d, k, seed) = (word(0) as usize, word(1) as usize, word(2));
        let body = &bytes[28..];
        if body.len() != d * k * 8 {
            return Err(PremselError::MalformedModel(format!(
                "expected {} weight bytes, found {}",
                d * k * 8,
                body.len()
            )));
        }
        let weights: Vec<f64> =
            body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(PremselError::MalformedModel("non-finite weight".into()));
        }
        Ok(PremiseModel { base_dimension: d, head_dimension: k, weights, seed })
    }
}

/// A training example with every text replaced by its base vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub goal: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// Caches base vectors by text.
pub struct BaseEncoder<'a> {
    provider: &'a dyn EmbeddingProvider,
    cache: HashMap<String, Vec<f64>>,
}

impl<'a> BaseEncoder<'a> {
    pub fn new(provider: &'a dyn EmbeddingProvider) -> Self {
        BaseEncoder { provider, cache: HashMap::new() }
    }

    pub fn vector(&mut self, text: &str) -> Result<Vec<f64>, PremselError> {
        if let Some(v) = self.cache.get(text) {
            return Ok(v.clone());
        }
        let v = self.provider.embed_text(text)?.values().to_vec();
        self.cache.insert(text.to_string(), v.clone());
        Ok(v)
    }

    fn named(&mut self, name: &str, texts: &BTreeMap<String, String>) -> Result<Vec<f64>, PremselError> {
        let text = texts.get(name).ok_or_else(|| PremselError::MissingText(name.to_string()))?;
        self.vector(text)
    }

    pub fn encode(
        &mut self,
        ex: &PremiseTrainingExample,
        texts: &BTreeMap<String, String>,
    ) -> Result<EncodedExample, PremselError> {
        Ok(EncodedExample {
            goal: self.vector(&ex.goal_text)?,
            positives: ex.positives.iter().map(|p| self.named(p, texts)).collect::<Result<_, _>>()?,
            negatives: ex.negatives.iter().map(|q| self.named(q, texts)).collect::<Result<_, _>>()?,
        })
    }
}

/// `1/(2n) * sum_i (u.w_i)^2 + (u.v_i - 1)^2` with `u`, `v_i`, `w_i` the head
/// outputs of the goal, positives and negatives.
pub fn loss_encoded(model: &PremiseModel, ex: &EncodedExample) -> f64 {
    let n = ex.positives.len().max(1) as f64;
    let u = model.head(&ex.goal);
    let neg: f64 = ex.negatives.iter().map(|q| dot(&u, &model.head(q)).powi(2)).sum();
    let pos: f64 = ex.positives.iter().map(|p| (dot(&u, &model.head(p)) - 1.0).powi(2)).sum();
    (neg + pos) / (2.0 * n)
}

/// Loss of one example, and its gradient with respect to the weights.
pub fn loss_and_gradient(model: &PremiseModel, ex: &EncodedExample) -> (f64, Vec<f64>) {
    let (d, k) = (model.base_dimension, model.head_dimension);
    let n = ex.positives.len().max(1) as f64;
    let u = model.head(&ex.goal);
    let mut grad = vec![0.0; k * d];
    let mut du = vec![0.0; k];
    let mut total = 0.0;
    let outer = |grad: &mut [f64], coef: f64, dir: &[f64], x: &[f64]| {
        for (r, row) in grad.chunks_mut(d).enumerate() {
            let c = coef * dir[r];
            if c != 0.0 {
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += c * xi;
                }
            }
        }
    };
    for p in &ex.positives {
        let v = model.head(p);
        let t = dot(&u, &v) - 1.0;
        total += t * t;
        for r in 0..k {
            du[r] += t * v[r] / n;
        }
        outer(&mut grad, t / n, &u, p);
    }
    for q in &ex.negatives {
        let w = model.head(q);
        let s = dot(&u, &w);
        total += s * s;
        for r in 0..k {
            du[r] += s * w[r] / n;
        }
        outer(&mut grad, s / n, &u, q);
    }
    outer(&mut grad, 1.0, &du, &ex.goal);
    (total / (2.0 * n), grad)
}

pub fn loss(
    model: &PremiseModel,
    ex: &PremiseTrainingExample,
    texts: &BTreeMap<String, String>,
    encoder: &mut BaseEncoder<'_>,
) -> Result<f64, PremselError> {
    let enc = encoder.encode(ex, texts)?;
    model.check_dim(&enc.goal)?;
    Ok(loss_encoded(model, &enc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainParams {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { epochs: 50, learning_rate: 0.5, batch_size: 16, seed: 0 }
    }
}

/// Minibatch gradient descent on the mean loss. Returns the mean loss of
/// each epoch, measured on each batch before its update.
pub fn train_encoded(
    model: &mut PremiseModel,
    data: &[EncodedExample],
    params: &TrainParams,
) -> Result<Vec<f64>, PremselError> {
    if params.epochs == 0 {
        return Err(PremselError::InvalidParameter("epochs must be at least 1".into()));
    }
    if !(params.learning_rate >= 0.0 && params.learning_rate.is_finite()) {
        return Err(PremselError::InvalidParameter("learning rate must be non-negative".into()));
    }
    for ex in data {
        model.check_dim(&ex.goal)?;
    }
    let batch = params.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let mut sum = vec![0.0; model.weights.len()];
            for &i in chunk {
                let (l, g) = loss_and_gradient(model, &data[i]);
                epoch_loss += l;
                for (s, gi) in sum.iter_mut().zip(g) {
                    *s += gi;
                }
            }
            let step = params.learning_rate / chunk.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(sum) {
                *w -= step * g;
            }
        }
        let mean = if data.is_empty() { 0.0 } else { epoch_loss / data.len() as f64 };
        if !mean.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(PremselError::NonFiniteLoss(epoch));
        }
        log::debug!("premise epoch {epoch}: {mean:.6}");
        trace.push(mean);
    }
    Ok(trace)
}

pub fn train(
    model: &mut PremiseModel,
    pairs: &[PremiseTrainingExample],
    texts: &BTreeMap<String, String>,
    encoder: &mut BaseEncoder<'_>,
    params: &TrainParams,
) -> Result<Vec<f64>, PremselError> {
    let data = pairs.iter().map(|ex| encoder.encode(ex, texts)).collect::<Result<Vec<_>, _>>()?;
    train_encoded(model, &data, params)
}

pub fn write_loss_csv(trace: &[f64], out: impl Write) -> Result<(), PremselError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "mean_loss"]).map_err(csv_io)?;
    for (i, l) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:.12}")]).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> PremselError {
    PremselError::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiseRanking {
    pub goal_id: String,
    pub ranked: Vec<(String, f64)>,
}

impl PremiseRanking {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(n, _)| n.as_str())
    }
}

fn cosine_or_zero(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Candidates ordered by cosine similarity of head outputs to the goal,
/// ties broken by ascending name. A zero head output scores 0.
pub fn rank_premises(
    model: &PremiseModel,
    encoder: &mut BaseEncoder<'_>,
    goal_id: &str,
    goal_text: &str,
    candidates: &[String],
    texts: &BTreeMap<String, String>,
) -> Result<PremiseRanking, PremselError> {
    let goal = encoder.vector(goal_text)?;
    model.check_dim(&goal)?;
    let u = model.head(&goal);
    let unique: BTreeSet<&String> = candidates.iter().collect();
    let mut ranked = Vec::with_capacity(unique.len());
    for name in unique {
        let v = model.head(&encoder.named(name, texts)?);
        ranked.push((name.clone(), cosine_or_zero(&u, &v)));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(PremiseRanking { goal_id: goal_id.to_string(), ranked })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub map: f64,
    pub ndcg: f64,
    pub goals: usize,
}

/// Average precision of one ranked list, normalised by the number of
/// positives.
pub fn average_precision(ranked: &[&str], positives: &BTreeSet<String>) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, name) in ranked.iter().enumerate() {
        if positives.contains(*name) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / positives.len() as f64
}

/// Binary-relevance NDCG; the ideal list places every positive first.
pub fn ndcg(ranked: &[&str], positives: &BTreeSet<String>) -> f64 {
    let gain = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked.iter().enumerate().filter(|(_, n)| positives.contains(**n)).map(|(i, _)| gain(i)).sum();
    let idcg: f64 = (0..positives.len()).map(gain).sum();
    dcg / idcg
}

pub fn evaluate_ranking(
    rankings: &[PremiseRanking],
    ground_truth: &BTreeMap<String, BTreeSet<String>>,
) -> Result<RankingMetrics, PremselError> {
    let mut map = 0.0;
    let mut nd = 0.0;
    for r in rankings {
        let positives = ground_truth
            .get(&r.goal_id)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| PremselError::NoPositives(r.goal_id.clone()))?;
        let names: Vec<&str> = r.names().collect();
        map += average_precision(&names, positives);
        nd += ndcg(&names, positives);
    }
    let n = rankings.len();
    if n == 0 {
        return Ok(RankingMetrics { map: 0.0, ndcg: 0.0, goals: 0 });
    }
    Ok(RankingMetrics { map: map / n as f64, ndcg: nd / n as f64, goals: n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PremiseMode {
    #[default]
    Model,
    Oracle,
    None,
}

impl PremiseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PremiseMode::Model => "model",
            PremiseMode::Oracle => "oracle",
            PremiseMode::None => "none",
        }
    }
}

/// A trained model together with what it needs to rank.
pub struct PremiseSelector<'a> {
    pub model: &'a PremiseModel,
    pub encoder: BaseEncoder<'a>,
    pub texts: &'a BTreeMap<String, String>,
    /// Number of ranked names handed to the prompt.
    pub top_k: usize,
}

/// Premise names for one record under the chosen mode.
pub fn premise_source(
    mode: PremiseMode,
    record: &DefinitionRecord,
    selector: Option<&mut PremiseSelector<'_>>,
) -> Result<Vec<String>, PremselError> {
    match mode {
        PremiseMode::None => Ok(Vec::new()),
        PremiseMode::Oracle => Ok(record.ideal_premises.clone()),
        PremiseMode::Model => {
            let sel = selector.ok_or(PremselError::ModelRequired)?;
            let ranking = rank_premises(
                sel.model,
                &mut sel.encoder,
                &record.id,
                &record.goal_type,
                &record.in_scope,
                sel.texts,
            )?;
            Ok(ranking.ranked.into_iter().take(sel.top_k).map(|(n, _)| n).collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{EmbeddingVector, LocalHashed};
    use crate::lang::ProblemClass;

    /// Maps each known text to a one-hot base vector.
    struct OneHot(Vec<String>);

    impl EmbeddingProvider for OneHot {
        fn id(&self) -> String {
            "one-hot".into()
        }
        fn dimension(&self) -> usize {
            self.0.len()
        }
        fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
            let i = self.0.iter().position(|t| t == text).ok_or(EmbedError::EmptyText)?;
            let mut v = vec![0.0; self.0.len()];
            v[i] = 1.0;
            Ok(EmbeddingVector::new(v))
        }
    }

    fn rec(id: &str, body: &str, premises: &[&str], scope: &[&str]) -> DefinitionRecord {
        DefinitionRecord {
            id: id.into(),
            project: "p".into(),
            file: "f".into(),
            goal_type: "nat -> nat".into(),
            prefix: format!("let {id} ="),
            body: body.into(),
            file_context: vec![],
            ideal_premises: premises.iter().map(|s| s.to_string()).collect(),
            in_scope: scope.iter().map(|s| s.to_string()).collect(),
            class: ProblemClass::SimplyTyped,
            autogenerated: false,
            split: None,
        }
    }

    fn model_with(d: usize, k: usize, weights: Vec<f64>) -> PremiseModel {
        PremiseModel { base_dimension: d, head_dimension: k, weights, seed: 0 }
    }

    fn identity(d: usize) -> PremiseModel {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        model_with(d, d, w)
    }

    #[test]
    fn pairs_skip_premise_free_records_and_respect_exclusions() {
        let records = vec![
            rec("a", "fun x -> x", &[], &["f", "g"]),
            rec("b", "fun x -> f (h x)", &["f"], &["f", "g", "h", "k"]),
        ];
        let pairs = build_training_pairs(&records, 7);
        assert_eq!(pairs.examples.len(), 1);
        let ex = &pairs.examples[0];
        assert_eq!(ex.positives, vec!["f"]);
        assert_eq!(ex.negatives.len(), 1);
        // h occurs in the body so only g or k remain
        assert!(ex.negatives[0] == "g" || ex.negatives[0] == "k");
        assert!(pairs.insufficient.is_empty());
        assert_eq!(build_training_pairs(&records, 7), pairs);
    }

    #[test]
    fn small_pool_samples_with_replacement() {
        let records = vec![rec("b", "f g", &["f", "g"], &["f", "g", "z"])];
        let pairs = build_training_pairs(&records, 1);
        assert_eq!(pairs.insufficient, vec!["b"]);
        assert_eq!(pairs.examples[0].negatives, vec!["z", "z"]);
    }

    #[test]
    fn loss_examples() {
        // u = e0, v = e1 scaled so u.v = 0.5, w likewise
        let m = model_with(3, 3, vec![1.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let ex = EncodedExample {
            goal: vec![1.0, 0.0, 0.0],
            positives: vec![vec![1.0, 0.0, 0.0]],
            negatives: vec![vec![0.5, 0.0, 0.0]],
        };
        // u = (1, .5, 0); W p = (1, .5, 0) so u.v = 1.25; W q = (.5, .25, 0) so u.w = 0.625
        let expected = (0.625f64.powi(2) + 0.25f64.powi(2)) / 2.0;
        assert!((loss_encoded(&m, &ex) - expected).abs() < 1e-12);

        let id = identity(2);
        let half = EncodedExample {
            goal: vec![1.0, 0.0],
            positives: vec![vec![0.5, 0.0]],
            negatives: vec![vec![0.5, 0.0]],
        };
        assert!((loss_encoded(&id, &half) - 0.25).abs() < 1e-15);
        let perfect = EncodedExample {
            goal: vec![1.0, 0.0],
            positives: vec![vec![1.0, 0.0]],
            negatives: vec![vec![0.0, 1.0]],
        };
        assert_eq!(loss_encoded(&id, &perfect), 0.0);
    }

    fn random_example(rng: &mut ChaCha8Rng, d: usize, n: usize) -> EncodedExample {
        let mut v = || (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        EncodedExample {
            goal: v(),
            positives: (0..n).map(|_| v()).collect(),
            negatives: (0..n).map(|_| v()).collect(),
        }
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, k, n) = (4, 3, 2);
        let model = PremiseModel::new(d, k, 11);
        let ex = random_example(&mut rng, d, n);
        // independent scalar evaluation with explicit index loops
        let w = |r: usize, c: usize| model.weights[r * d + c];
        let e = |x: &[f64]| -> Vec<f64> {
            (0..k).map(|r| (0..d).map(|c| w(r, c) * x[c]).sum()).collect()
        };
        let u = e(&ex.goal);
        let mut acc = 0.0;
        for i in 0..n {
            let (p, q) = (e(&ex.positives[i]), e(&ex.negatives[i]));
            let up: f64 = (0..k).map(|r| u[r] * p[r]).sum();
            let uq: f64 = (0..k).map(|r| u[r] * q[r]).sum();
            acc += uq * uq + (up - 1.0) * (up - 1.0);
        }
        let oracle = acc / (2.0 * n as f64);
        assert!((loss_encoded(&model, &ex) - oracle).abs() < 1e-12);
        assert!((loss_and_gradient(&model, &ex).0 - oracle).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d, k) = (5, 4);
        let mut model = PremiseModel::new(d, k, 2);
        for w in &mut model.weights {
            *w *= 10.0;
        }
        let ex = random_example(&mut rng, d, 3);
        let (_, grad) = loss_and_gradient(&model, &ex);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, g) in grad.iter().enumerate() {
            let mut plus = model.clone();
            plus.weights[i] += h;
            let mut minus = model.clone();
            minus.weights[i] -= h;
            let fd = (loss_encoded(&plus, &ex) - loss_encoded(&minus, &ex)) / (2.0 * h);
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    fn separable() -> (OneHot, Vec<PremiseTrainingExample>, BTreeMap<String, String>) {
        let names: Vec<String> = ["g1", "g2", "g3", "p1", "p2", "p3", "q1", "q2", "q3"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let texts = names.iter().map(|n| (n.clone(), n.clone())).collect();
        let pairs = (1..=3)
            .map(|i| PremiseTrainingExample {
                goal_id: format!("g{i}"),
                goal_text: format!("g{i}"),
                positives: vec![format!("p{i}")],
                negatives: vec![format!("q{i}")],
            })
            .collect();
        (OneHot(names), pairs, texts)
    }

    #[test]
    fn separable_data_trains_to_near_zero() {
        let (provider, pairs, texts) = separable();
        let mut enc = BaseEncoder::new(&provider);
        let mut model = PremiseModel::new(9, 8, 4);
        let params = TrainParams { epochs: 200, learning_rate: 0.5, batch_size: 2, seed: 9 };
        let trace = train(&mut model, &pairs, &texts, &mut enc, &params).unwrap();
        assert_eq!(trace.len(), 200);
        let last = *trace.last().unwrap();
        assert!(last < 0.01, "final loss {last}");

        let mut again = PremiseModel::new(9, 8, 4);
        let trace2 = train(&mut again, &pairs, &texts, &mut enc, &params).unwrap();
        assert_eq!(trace, trace2);
        assert_eq!(model, again);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let (provider, pairs, texts) = separable();
        let mut enc = BaseEncoder::new(&provider);
        let mut model = PremiseModel::new(9, 4, 1);
        let params = TrainParams { epochs: 5, learning_rate: 0.0, batch_size: 2, seed: 0 };
        let trace = train(&mut model, &pairs, &texts, &mut enc, &params).unwrap();
        assert!(trace.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));
    }

    #[test]
    fn divergence_is_reported() {
        let (provider, pairs, texts) = separable();
        let mut enc = BaseEncoder::new(&provider);
        let mut model = PremiseModel::new(9, 4, 1);
        for w in &mut model.weights {
            *w = 10.0;
        }
        let params = TrainParams { epochs: 50, learning_rate: 1e6, batch_size: 3, seed: 0 };
        let err = train(&mut model, &pairs, &texts, &mut enc, &params).unwrap_err();
        assert!(matches!(err, PremselError::NonFiniteLoss(_)));
    }

    #[test]
    fn ranking_examples() {
        let base = LocalHashed::new(64).unwrap();
        let mut enc = BaseEncoder::new(&base);
        let model = PremiseModel::new(64, 16, 3);
        let texts: BTreeMap<String, String> = [
            ("same", "list nat -> nat"),
            ("b", "bool -> bool"),
            ("c", "string"),
            ("d", "int -> int -> int"),
        ]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
        let names: Vec<String> = texts.keys().cloned().collect();
        let r = rank_premises(&model, &mut enc, "g", "list nat -> nat", &names, &texts).unwrap();
        assert_eq!(r.ranked[0].0, "same");
        assert!((r.ranked[0].1 - 1.0).abs() < 1e-12);

        // brute-force oracle: pairwise comparison count for each candidate
        let u = model.head(base.embed_text("list nat -> nat").unwrap().values());
        let score = |n: &str| cosine_or_zero(&u, &model.head(base.embed_text(&texts[n]).unwrap().values()));
        let mut oracle: Vec<(usize, String)> = names
            .iter()
            .map(|n| {
                let better = names
                    .iter()
                    .filter(|m| score(m) > score(n) || (score(m) == score(n) && *m < n))
                    .count();
                (better, n.clone())
            })
            .collect();
        oracle.sort();
        let expected: Vec<String> = oracle.into_iter().map(|(_, n)| n).collect();
        assert_eq!(r.names().collect::<Vec<_>>(), expected);

        let mut doubled = model.clone();
        for w in &mut doubled.weights {
            *w *= 2.0;
        }
        let r2 = rank_premises(&doubled, &mut enc, "g", "list nat -> nat", &names, &texts).unwrap();
        assert_eq!(r.names().collect::<Vec<_>>(), r2.names().collect::<Vec<_>>());

        let empty = rank_premises(&model, &mut enc, "g", "x", &[], &texts).unwrap();
        assert!(empty.ranked.is_empty());
        assert!(matches!(
            rank_premises(&model, &mut enc, "g", "x", &["zz".to_string()], &texts),
            Err(PremselError::MissingText(_))
        ));
    }

    fn ranking(goal: &str, names: &[&str]) -> PremiseRanking {
        PremiseRanking {
            goal_id: goal.into(),
            ranked: names.iter().enumerate().map(|(i, n)| (n.to_string(), -(i as f64))).collect(),
        }
    }

    fn truth(entries: &[(&str, &[&str])]) -> BTreeMap<String, BTreeSet<String>> {
        entries
            .iter()
            .map(|(g, ps)| (g.to_string(), ps.iter().map(|p| p.to_string()).collect()))
            .collect()
    }

    #[test]
    fn metric_examples() {
        let gt = truth(&[("g", &["a", "b"])]);
        let m = evaluate_ranking(&[ranking("g", &["a", "b", "c"])], &gt).unwrap();
        assert_eq!((m.map, m.ndcg), (1.0, 1.0));

        let gt = truth(&[("g", &["b"])]);
        let m = evaluate_ranking(&[ranking("g", &["a", "b"])], &gt).unwrap();
        assert!((m.map - 0.5).abs() < 1e-15);
        assert!((m.ndcg - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert!((m.ndcg - 0.6309).abs() < 1e-4);

        let gt = truth(&[("g", &[])]);
        assert!(matches!(
            evaluate_ranking(&[ranking("g", &["a"])], &gt),
            Err(PremselError::NoPositives(_))
        ));
    }

    #[test]
    fn premise_source_modes() {
        let r = rec("b", "f (g x)", &["g", "f"], &["f", "g", "h", "k"]);
        assert_eq!(premise_source(PremiseMode::Oracle, &r, None).unwrap(), vec!["g", "f"]);
        assert!(premise_source(PremiseMode::None, &r, None).unwrap().is_empty());
        assert!(matches!(
            premise_source(PremiseMode::Model, &r, None),
            Err(PremselError::ModelRequired)
        ));

        // constructed model: positives share the goal's direction, negatives are orthogonal
        let provider = OneHot(vec!["nat -> nat".into(), "f".into(), "g".into(), "h".into(), "k".into()]);
        let mut w = vec![0.0; 2 * 5];
        w[0] = 1.0; // goal -> axis 0
        w[1] = 1.0; // f -> axis 0
        w[2] = 1.0; // g -> axis 0
        w[5 + 3] = 1.0; // h -> axis 1
        w[5 + 4] = 1.0; // k -> axis 1
        let model = model_with(5, 2, w);
        let texts: BTreeMap<String, String> =
            ["f", "g", "h", "k"].iter().map(|n| (n.to_string(), n.to_string())).collect();
        let mut sel = PremiseSelector { model: &model, encoder: BaseEncoder::new(&provider), texts: &texts, top_k: 4 };
        let got = premise_source(PremiseMode::Model, &r, Some(&mut sel)).unwrap();
        assert_eq!(got, vec!["f", "g", "h", "k"]);
    }

    #[test]
    fn model_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = PremiseModel::new(6, 3, 42);
        m.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"PMS1");
        assert_eq!(bytes.len(), 4 + 24 + 6 * 3 * 8);
        assert_eq!(PremiseModel::load(&path).unwrap(), m);
        assert!(m.weights.iter().all(|w| w.abs() <= 0.05));
    }

    #[test]
    fn loss_csv_format() {
        let mut out = Vec::new();
        write_loss_csv(&[0.5, 0.25], &mut out).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "epoch,mean_loss\n1,0.500000000000\n2,0.250000000000\n");
    }
}
