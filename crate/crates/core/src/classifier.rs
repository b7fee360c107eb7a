//! Bag-of-words chunk features, a class-weighted logistic model and the
//! chunk → segment → transcript aggregation rules.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::Label;
use crate::gateway::{GatewayError, JsonClient};
use crate::hashing::mix64;

pub use crate::text::tokenize;

pub const DEFAULT_MAX_CHUNK_TOKENS: usize = 512;
pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("training data contains a single class")]
    SingleClassDataset,
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("no predictions to aggregate")]
    EmptyInput,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Consecutive spans of at most `max_chunk_tokens` covering `0..n_tokens`.
pub fn chunk(n_tokens: usize, max_chunk_tokens: usize) -> Result<Vec<Range<usize>>, ClassifierError> {
    if max_chunk_tokens == 0 {
        return Err(ClassifierError::InvalidConfig("max_chunk_tokens must be at least 1".into()));
    }
    Ok((0..n_tokens)
        .step_by(max_chunk_tokens)
        .map(|s| s..(s + max_chunk_tokens).min(n_tokens))
        .collect())
}

/// Sparse feature vector: `(index, count)` pairs sorted by index.
pub type Features = Vec<(usize, f64)>;

/// Token → dense feature index, in lexicographic token order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Keeps tokens occurring at least `min_frequency` times across `docs`.
    pub fn build<'a, I, D>(docs: I, min_frequency: usize) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a String>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in docs {
            for t in doc {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        Self::from_tokens(
            counts
                .into_iter()
                .filter(|(_, c)| *c >= min_frequency.max(1))
                .map(|(t, _)| t.to_string())
                .collect(),
        )
    }

    fn from_tokens(mut tokens: Vec<String>) -> Self {
        tokens.sort();
        tokens.dedup();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    /// Count vector of the in-vocabulary tokens; the rest are dropped.
    pub fn featurize<S: AsRef<str>>(&self, tokens: &[S]) -> Features {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        for t in tokens {
            if let Some(i) = self.get(t.as_ref()) {
                *counts.entry(i).or_default() += 1.0;
            }
        }
        counts.into_iter().collect()
    }
}

impl Serialize for Vocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.tokens.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let tokens = Vec::<String>::deserialize(d)?;
        if tokens.windows(2).any(|w| w[0] >= w[1]) {
            return Err(serde::de::Error::custom("vocab must be sorted and unique"));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub span: Range<usize>,
    pub features: Features,
}

/// Tokenises, chunks and featurises a text.
pub fn text_chunks(vocab: &Vocab, text: &str, max_chunk_tokens: usize) -> Result<Vec<Chunk>, ClassifierError> {
    let tokens = tokenize(text);
    Ok(chunk(tokens.len(), max_chunk_tokens)?
        .into_iter()
        .map(|span| Chunk {
            features: vocab.featurize(&tokens[span.clone()]),
            span,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Features,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    #[serde(default = "yes")]
    pub class_weighting: bool,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 8,
            epochs: 3,
            weight_decay: 0.0,
            class_weighting: true,
        }
    }
}

impl TrainConfig {
    pub const LEARNING_RATES: [f64; 2] = [1e-5, 2e-5];
    pub const BATCH_SIZES: [usize; 2] = [8, 16];
    pub const EPOCHS: [usize; 2] = [2, 3];
    pub const WEIGHT_DECAYS: [f64; 2] = [0.0, 0.01];

    /// All 16 grid points, learning rate varying slowest.
    pub fn grid() -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(16);
        for learning_rate in Self::LEARNING_RATES {
            for batch_size in Self::BATCH_SIZES {
                for epochs in Self::EPOCHS {
                    for weight_decay in Self::WEIGHT_DECAYS {
                        out.push(TrainConfig {
                            learning_rate,
                            batch_size,
                            epochs,
                            weight_decay,
                            class_weighting: true,
                        });
                    }
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ClassifierError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ClassifierError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(ClassifierError::InvalidConfig("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub chr: f64,
    pub hc: f64,
}

impl ClassWeights {
    /// `w_c = N / (2 N_c)`.
    pub fn balanced(n_chr: usize, n_hc: usize) -> Self {
        let n = (n_chr + n_hc) as f64;
        Self {
            chr: n / (2.0 * n_chr as f64),
            hc: n / (2.0 * n_hc as f64),
        }
    }

    pub fn of(&self, label: Label) -> f64 {
        match label {
            Label::Chr => self.chr,
            Label::Hc => self.hc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub vocab: Vocab,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub class_weights: ClassWeights,
    pub config: TrainConfig,
    pub seed: u64,
    /// Weighted training loss before the first epoch and after each epoch.
    #[serde(default)]
    pub loss_history: Vec<f64>,
}

impl LinearModel {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.weights.len() != self.vocab.len() {
            return Err(ClassifierError::InvalidModel(format!(
                "{} weights for a vocabulary of {}",
                self.weights.len(),
                self.vocab.len()
            )));
        }
        if !self.bias.is_finite() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(ClassifierError::InvalidModel("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Pre-sigmoid score `w·x + b`.
    pub fn margin(&self, x: &Features) -> f64 {
        self.bias + x.iter().map(|&(i, c)| self.weights[i] * c).sum::<f64>()
    }

    pub fn prob(&self, x: &Features) -> f64 {
        sigmoid(self.margin(x))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn target(label: Label) -> f64 {
    if label.is_chr() {
        1.0
    } else {
        0.0
    }
}

/// Mean class-weighted logistic loss plus `λ‖w‖²`.
pub fn weighted_loss(weights: &[f64], bias: f64, cw: ClassWeights, lambda: f64, data: &[Example]) -> f64 {
    let mut total = 0.0;
    for ex in data {
        let m = bias + ex.features.iter().map(|&(i, c)| weights[i] * c).sum::<f64>();
        // -[y log p + (1-y) log(1-p)] with p = sigmoid(m)
        let nll = if ex.label.is_chr() { softplus(-m) } else { softplus(m) };
        total += cw.of(ex.label) * nll;
    }
    total / data.len() as f64 + lambda * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Order key of an example within an epoch. It depends only on the example's
/// content, so duplicated examples stay adjacent.
fn shuffle_key(seed: u64, epoch: usize, ex: &Example) -> u64 {
    let mut h = mix64(seed ^ mix64(epoch as u64 + 1));
    for &(i, c) in &ex.features {
        h = mix64(h ^ i as u64);
        h = mix64(h ^ c.to_bits());
    }
    mix64(h ^ u64::from(ex.label.is_chr()))
}

fn content_cmp(a: &Example, b: &Example) -> std::cmp::Ordering {
    a.label.cmp(&b.label).then_with(|| {
        a.features
            .iter()
            .map(|&(i, c)| (i, c.to_bits()))
            .cmp(b.features.iter().map(|&(i, c)| (i, c.to_bits())))
    })
}

/// Mini-batch gradient descent from zero weights.
///
/// Each step follows the gradient of the batch-mean weighted loss plus the
/// L2 penalty. The example order of every epoch is a content-keyed shuffle
/// derived from `seed`.
pub fn train(vocab: Vocab, data: &[Example], config: TrainConfig, seed: u64) -> Result<LinearModel, ClassifierError> {
    config.validate()?;
    let n_chr = data.iter().filter(|e| e.label.is_chr()).count();
    let n_hc = data.len() - n_chr;
    if n_chr == 0 || n_hc == 0 {
        return Err(ClassifierError::SingleClassDataset);
    }
    let v = vocab.len();
    if let Some(bad) = data.iter().flat_map(|e| &e.features).find(|(i, _)| *i >= v) {
        return Err(ClassifierError::InvalidConfig(format!("feature index {} outside vocabulary", bad.0)));
    }
    let cw = if config.class_weighting {
        ClassWeights::balanced(n_chr, n_hc)
    } else {
        ClassWeights { chr: 1.0, hc: 1.0 }
    };
    let lambda = config.weight_decay;
    let mut w = vec![0.0; v];
    let mut b = 0.0;
    let mut history = vec![weighted_loss(&w, b, cw, lambda, data)];
    let mut grad = vec![0.0; v];
    for epoch in 0..config.epochs {
        let mut order: Vec<(u64, &Example)> = data.iter().map(|e| (shuffle_key(seed, epoch, e), e)).collect();
        order.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| content_cmp(a.1, b.1)));
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (_, ex) in batch {
                let m = b + ex.features.iter().map(|&(i, c)| w[i] * c).sum::<f64>();
                let r = cw.of(ex.label) * (sigmoid(m) - target(ex.label));
                gb += r;
                for &(i, c) in &ex.features {
                    grad[i] += r * c;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= config.learning_rate * (gi * scale + 2.0 * lambda * *wi);
            }
            b -= config.learning_rate * gb * scale;
        }
        let loss = weighted_loss(&w, b, cw, lambda, data);
        if !loss.is_finite() || !b.is_finite() || w.iter().any(|x| !x.is_finite()) {
            return Err(ClassifierError::NonFiniteLoss { epoch });
        }
        history.push(loss);
    }
    tracing::debug!(epochs = config.epochs, n = data.len(), vocab = v, "trained linear model");
    Ok(LinearModel {
        vocab,
        weights: w,
        bias: b,
        class_weights: cw,
        config,
        seed,
        loss_history: history,
    })
}

/// Builds a vocabulary from labelled documents and trains on their chunks.
pub fn train_on_texts(
    docs: &[(String, Label)],
    min_frequency: usize,
    max_chunk_tokens: usize,
    config: TrainConfig,
    seed: u64,
) -> Result<LinearModel, ClassifierError> {
    let tokenized: Vec<(Vec<String>, Label)> = docs.iter().map(|(t, l)| (tokenize(t), *l)).collect();
    let vocab = Vocab::build(tokenized.iter().map(|(t, _)| t), min_frequency);
    let mut data = Vec::new();
    for (tokens, label) in &tokenized {
        for span in chunk(tokens.len(), max_chunk_tokens)? {
            data.push(Example {
                features: vocab.featurize(&tokens[span]),
                label: *label,
            });
        }
    }
    train(vocab, &data, config, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Chunk,
    Segment,
    Transcript,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub level: Level,
    pub prob_chr: f64,
    pub label: Label,
}

impl Prediction {
    fn thresholded(level: Level, prob_chr: f64, threshold: f64) -> Self {
        Self {
            level,
            prob_chr,
            label: Label::from_chr(prob_chr >= threshold),
        }
    }
}

pub fn predict_chunk(model: &LinearModel, chunk: &Chunk, threshold: f64) -> Prediction {
    Prediction::thresholded(Level::Chunk, model.prob(&chunk.features), threshold)
}

/// Mean chunk probability, thresholded.
pub fn segment_from_probs(probs: &[f64], threshold: f64) -> Result<Prediction, ClassifierError> {
    if probs.is_empty() {
        return Err(ClassifierError::EmptyInput);
    }
    let mean = probs.iter().sum::<f64>() / probs.len() as f64;
    Ok(Prediction::thresholded(Level::Segment, mean, threshold))
}

pub fn predict_segment(model: &LinearModel, chunks: &[Chunk], threshold: f64) -> Result<Prediction, ClassifierError> {
    let probs: Vec<f64> = chunks.iter().map(|c| model.prob(&c.features)).collect();
    segment_from_probs(&probs, threshold)
}

/// Segment prediction for raw text. Text without tokens is one empty chunk.
pub fn predict_text(model: &LinearModel, text: &str, max_chunk_tokens: usize, threshold: f64) -> Result<Prediction, ClassifierError> {
    let mut chunks = text_chunks(&model.vocab, text, max_chunk_tokens)?;
    if chunks.is_empty() {
        chunks.push(Chunk {
            span: 0..0,
            features: Vec::new(),
        });
    }
    predict_segment(model, &chunks, threshold)
}

/// One vote per segment; ties go to CHR. `prob_chr` is the CHR vote share.
pub fn majority_vote(segments: &[Prediction]) -> Result<Prediction, ClassifierError> {
    if segments.is_empty() {
        return Err(ClassifierError::EmptyInput);
    }
    let chr = segments.iter().filter(|p| p.label.is_chr()).count();
    let hc = segments.len() - chr;
    Ok(Prediction {
        level: Level::Transcript,
        prob_chr: chr as f64 / segments.len() as f64,
        label: Label::from_chr(chr >= hc),
    })
}

/// Scores summaries on an external classifier: `{summaries}` → `{probs}`.
pub fn classify_remote(client: &JsonClient, summaries: &[String], threshold: f64) -> Result<Vec<Prediction>, ClassifierError> {
    let reply = client.call(&json!({ "summaries": summaries }))?;
    let probs = reply
        .get("probs")
        .and_then(Value::as_array)
        .ok_or_else(|| GatewayError::ProtocolError("reply lacks array field `probs`".into()))?;
    if probs.len() != summaries.len() {
        return Err(GatewayError::ProtocolError(format!("{} probs for {} summaries", probs.len(), summaries.len())).into());
    }
    probs
        .iter()
        .map(|p| match p.as_f64() {
            Some(p) if (0.0..=1.0).contains(&p) => Ok(Prediction::thresholded(Level::Segment, p, threshold)),
            _ => Err(GatewayError::ProtocolError(format!("invalid probability {p}")).into()),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ApiKey, GatewayConfig, JsonTransport};
    use proptest::prelude::*;
    use std::time::Duration;

    fn model(weights: Vec<f64>, bias: f64) -> LinearModel {
        let tokens = (0..weights.len()).map(|i| format!("t{i:02}")).collect();
        LinearModel {
            vocab: Vocab::from_tokens(tokens),
            weights,
            bias,
            class_weights: ClassWeights { chr: 1.0, hc: 1.0 },
            config: TrainConfig::default(),
            seed: 0,
            loss_history: Vec::new(),
        }
    }

    fn ex(features: Features, chr: bool) -> Example {
        Example {
            features,
            label: Label::from_chr(chr),
        }
    }

    fn toy() -> Vec<Example> {
        let mut d = Vec::new();
        for k in 1..=3 {
            d.push(ex(vec![(0, k as f64)], true));
            d.push(ex(vec![(1, k as f64)], false));
        }
        d.push(ex(vec![(0, 2.0), (1, 1.0)], true));
        d
    }

    fn toy_vocab() -> Vocab {
        Vocab::from_tokens(vec!["alpha".into(), "beta".into()])
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello, world!"), vec!["hello", "world"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn chunk_sizes() {
        let sizes: Vec<usize> = chunk(1030, 512).unwrap().iter().map(|r| r.len()).collect();
        assert_eq!(sizes, vec![512, 512, 6]);
        assert_eq!(chunk(512, 512).unwrap(), vec![0..512]);
        assert!(chunk(0, 512).unwrap().is_empty());
        assert!(matches!(chunk(3, 0), Err(ClassifierError::InvalidConfig(_))));
    }

    #[test]
    fn vocab_drops_rare_and_unknown() {
        let docs = [tokenize("a b b c c c")];
        let v = Vocab::build(docs.iter(), 2);
        assert_eq!(v.len(), 2);
        assert_eq!(v.get("b"), Some(0));
        assert_eq!(v.get("a"), None);
        assert_eq!(v.featurize(&tokenize("c a c zzz")), vec![(1, 2.0)]);
    }

    #[test]
    fn vocab_json_rejects_unsorted() {
        assert!(serde_json::from_str::<Vocab>(r#"["b","a"]"#).is_err());
        let v: Vocab = serde_json::from_str(r#"["a","b"]"#).unwrap();
        assert_eq!(v.get("b"), Some(1));
    }

    #[test]
    fn predict_chunk_examples() {
        let m = model(vec![0.0, 0.0], 0.0);
        let c = Chunk {
            span: 0..2,
            features: vec![(0, 1.0), (1, 1.0)],
        };
        assert_eq!(predict_chunk(&m, &c, 0.5).prob_chr, 0.5);
        let m = model(vec![2.0, -1.0], 0.0);
        let p = predict_chunk(&m, &c, 0.5);
        assert!((p.prob_chr - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((p.prob_chr - 0.7311).abs() < 1e-4);
        assert_eq!(p.label, Label::Chr);
    }

    #[test]
    fn segment_mean_and_tie() {
        let p = segment_from_probs(&[0.2, 0.8], 0.5).unwrap();
        assert_eq!(p.prob_chr, 0.5);
        assert_eq!(p.label, Label::Chr);
        assert!(matches!(segment_from_probs(&[], 0.5), Err(ClassifierError::EmptyInput)));
        let m = model(vec![0.3], -0.1);
        let c = Chunk {
            span: 0..1,
            features: vec![(0, 1.0)],
        };
        let s = predict_segment(&m, std::slice::from_ref(&c), 0.5).unwrap();
        assert_eq!(s.prob_chr, predict_chunk(&m, &c, 0.5).prob_chr);
    }

    fn votes(chr: usize, hc: usize) -> Vec<Prediction> {
        let mut v = vec![Prediction::thresholded(Level::Segment, 0.9, 0.5); chr];
        v.extend(vec![Prediction::thresholded(Level::Segment, 0.1, 0.5); hc]);
        v
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_vote(&votes(8, 7)).unwrap().label, Label::Chr);
        assert_eq!(majority_vote(&votes(7, 7)).unwrap().label, Label::Chr);
        assert_eq!(majority_vote(&votes(6, 7)).unwrap().label, Label::Hc);
        assert!((majority_vote(&votes(8, 7)).unwrap().prob_chr - 8.0 / 15.0).abs() < 1e-15);
        assert!(matches!(majority_vote(&[]), Err(ClassifierError::EmptyInput)));
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let data = toy();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            batch_size: 2,
            epochs: 20,
            ..TrainConfig::default()
        };
        let m = train(toy_vocab(), &data, cfg, 3).unwrap();
        for e in &data {
            assert_eq!(Label::from_chr(m.prob(&e.features) >= 0.5), e.label);
        }
    }

    #[test]
    fn single_class_rejected() {
        let data = vec![ex(vec![(0, 1.0)], true), ex(vec![(1, 1.0)], true)];
        assert!(matches!(
            train(toy_vocab(), &data, TrainConfig::default(), 1),
            Err(ClassifierError::SingleClassDataset)
        ));
    }

    #[test]
    fn non_finite_loss_detected() {
        let data = vec![ex(vec![(0, 1e300)], true), ex(vec![(1, 1e300)], false)];
        let cfg = TrainConfig {
            learning_rate: 1e10,
            batch_size: 1,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(train(toy_vocab(), &data, cfg, 1), Err(ClassifierError::NonFiniteLoss { .. })));
    }

    #[test]
    fn duplication_with_scaled_batch_is_identical() {
        let data = toy();
        for k in [2usize, 3] {
            let dup: Vec<Example> = data.iter().flat_map(|e| std::iter::repeat_n(e.clone(), k)).collect();
            for batch in [1usize, 2, 3] {
                let cfg = TrainConfig {
                    learning_rate: 0.1,
                    batch_size: batch,
                    epochs: 3,
                    weight_decay: 0.01,
                    class_weighting: true,
                };
                let a = train(toy_vocab(), &data, cfg, 11).unwrap();
                let b = train(toy_vocab(), &dup, TrainConfig { batch_size: batch * k, ..cfg }, 11).unwrap();
                for (x, y) in a.weights.iter().zip(&b.weights) {
                    assert!((x - y).abs() < 1e-9);
                }
                assert!((a.bias - b.bias).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn balanced_data_ignores_class_weighting() {
        let data: Vec<Example> = toy().into_iter().take(6).collect();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 2,
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train(toy_vocab(), &data, cfg, 5).unwrap();
        let b = train(toy_vocab(), &data, TrainConfig { class_weighting: false, ..cfg }, 5).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
    }

    #[test]
    fn same_seed_same_model() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let a = train(toy_vocab(), &toy(), cfg, 9).unwrap();
        let b = train(toy_vocab(), &toy(), cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_has_sixteen_points() {
        let g = TrainConfig::grid();
        assert_eq!(g.len(), 16);
        assert_eq!(g[0].learning_rate, 1e-5);
        assert_eq!(g[15].learning_rate, 2e-5);
        assert_eq!(g[15].batch_size, 16);
        assert_eq!(g[15].epochs, 3);
        assert_eq!(g[15].weight_decay, 0.01);
    }

    #[test]
    fn loss_non_increasing_with_grid_rates() {
        let data = toy();
        for cfg in TrainConfig::grid() {
            let m = train(toy_vocab(), &data, cfg, 4).unwrap();
            assert_eq!(m.loss_history.len(), cfg.epochs + 1);
            for w in m.loss_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-15, "{cfg:?}: {:?}", m.loss_history);
            }
        }
    }

    #[test]
    fn model_json_round_trip() {
        let m = train(toy_vocab(), &toy(), TrainConfig::default(), 2).unwrap();
        let back: LinearModel = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let v: Value = serde_json::from_str(&m.to_json()).unwrap();
        for key in ["vocab", "weights", "bias", "config", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    /// Serves `{summaries}` with the native model.
    struct NativeStub(LinearModel);

    impl JsonTransport for NativeStub {
        fn post_json(&self, _: &str, _: Option<&ApiKey>, body: &Value, _: Duration) -> Result<Value, GatewayError> {
            let probs: Vec<f64> = body["summaries"]
                .as_array()
                .unwrap()
                .iter()
                .map(|s| predict_text(&self.0, s.as_str().unwrap(), 512, 0.5).unwrap().prob_chr)
                .collect();
            Ok(json!({ "probs": probs }))
        }
    }

    struct Fixed(Value);

    impl JsonTransport for Fixed {
        fn post_json(&self, _: &str, _: Option<&ApiKey>, _: &Value, _: Duration) -> Result<Value, GatewayError> {
            Ok(self.0.clone())
        }
    }

    fn client(t: impl JsonTransport + 'static) -> JsonClient {
        JsonClient::with_transport(GatewayConfig::new("http://stub"), Box::new(t)).with_sleeper(|_| {})
    }

    #[test]
    fn remote_stub_matches_native() {
        let docs = vec![
            ("hears voices at night".to_string(), Label::Chr),
            ("sleeps well and enjoys work".to_string(), Label::Hc),
            ("voices whisper at work".to_string(), Label::Chr),
        ];
        let cfg = TrainConfig {
            learning_rate: 0.3,
            ..TrainConfig::default()
        };
        let m = train_on_texts(&docs, 1, 512, cfg, 1).unwrap();
        let summaries: Vec<String> = vec!["voices again".into(), "work was fine".into(), "nothing known here".into()];
        let native: Vec<Prediction> = summaries.iter().map(|s| predict_text(&m, s, 512, 0.5).unwrap()).collect();
        let remote = classify_remote(&client(NativeStub(m)), &summaries, 0.5).unwrap();
        assert_eq!(native, remote);
    }

    #[test]
    fn remote_constant_and_malformed() {
        let s = vec!["a".to_string(), "b".to_string()];
        let all = classify_remote(&client(Fixed(json!({"probs": [0.9, 0.9]}))), &s, 0.5).unwrap();
        assert!(all.iter().all(|p| p.label == Label::Chr));
        for bad in [json!({"p": [0.9]}), json!({"probs": [0.9]}), json!({"probs": [0.9, "x"]}), json!({"probs": [0.9, 1.5]})] {
            let err = classify_remote(&client(Fixed(bad)), &s, 0.5).unwrap_err();
            assert!(matches!(err, ClassifierError::Gateway(GatewayError::ProtocolError(_))));
        }
    }

    proptest! {
        #[test]
        fn chunks_partition(n in 0usize..3000, max in 1usize..700) {
            let spans = chunk(n, max).unwrap();
            let mut next = 0;
            for (i, s) in spans.iter().enumerate() {
                prop_assert_eq!(s.start, next);
                if i + 1 < spans.len() { prop_assert_eq!(s.len(), max); }
                prop_assert!(!s.is_empty() && s.len() <= max);
                next = s.end;
            }
            prop_assert_eq!(next, n);
        }

        #[test]
        fn tokenize_round_trip(s in "[ -~]{0,80}") {
            let t = tokenize(&s);
            prop_assert_eq!(tokenize(&t.join(" ")), t);
        }

        #[test]
        fn segment_prob_is_mean(probs in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let p = segment_from_probs(&probs, 0.5).unwrap();
            let mean = probs.iter().sum::<f64>() / probs.len() as f64;
            prop_assert!((p.prob_chr - mean).abs() < 1e-12);
        }

        #[test]
        fn vote_matches_count(v in prop::collection::vec(any::<bool>(), 1..40)) {
            let preds: Vec<Prediction> = v.iter().map(|&c| Prediction::thresholded(Level::Segment, if c { 0.7 } else { 0.3 }, 0.5)).collect();
            let chr = v.iter().filter(|&&c| c).count();
            prop_assert_eq!(majority_vote(&preds).unwrap().label, Label::from_chr(2 * chr >= v.len()));
        }

        #[test]
        fn raising_threshold_never_flips_hc(p in 0.0f64..=1.0, t1 in 0.0f64..=1.0, dt in 0.0f64..=1.0) {
            let low = Prediction::thresholded(Level::Segment, p, t1);
            let high = Prediction::thresholded(Level::Segment, p, t1 + dt);
            prop_assert!(!(low.label == Label::Hc && high.label == Label::Chr));
        }

        #[test]
        fn positive_weight_count_increases_prob(w in 0.01f64..5.0, c in 0.0f64..3.0, b in -3.0f64..3.0) {
            let m = model(vec![w], b);
            prop_assert!(m.prob(&vec![(0, c + 1.0)]) > m.prob(&vec![(0, c)]));
        }
    }
}
