//! Shapley attributions for token features and their word, sentence and
//! domain aggregates. Positive values push toward CHR.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{Features, LinearModel};
use crate::domain::DomainId;
use crate::text::{sentence_spans, tokenize};

/// Largest feature count accepted by exact enumeration.
pub const MAX_EXACT_FEATURES: usize = 20;
/// Largest feature count the automatic choice hands to exact enumeration.
pub const AUTO_EXACT_LIMIT: usize = 12;
pub const DEFAULT_PERMUTATIONS: usize = 2000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttributionError {
    #[error("{n} features exceed the exact enumeration limit of {max}")]
    TooManyFeatures { n: usize, max: usize },
    #[error("no summary token is in the model vocabulary")]
    EmptyVocabOverlap,
    #[error("no sentences to score")]
    NoSentences,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Coalitions are bit masks: bit `i` set means feature `i` is present.
fn check_exact(n: usize) -> Result<(), AttributionError> {
    if n > MAX_EXACT_FEATURES {
        return Err(AttributionError::TooManyFeatures {
            n,
            max: MAX_EXACT_FEATURES,
        });
    }
    Ok(())
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn shapley_exact(v: impl Fn(u32) -> f64, n: usize) -> Result<Vec<f64>, AttributionError> {
    check_exact(n)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let values: Vec<f64> = (0..1u32 << n).map(&v).collect();
    // weight of a coalition of size s not containing i: s!(n-s-1)!/n! = 1/(n C(n-1, s))
    let mut weight = vec![0.0; n];
    let mut binom = 1.0;
    for (s, w) in weight.iter_mut().enumerate() {
        *w = 1.0 / (n as f64 * binom);
        binom = binom * (n - 1 - s) as f64 / (s + 1) as f64;
    }
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1u32 << i;
        let mut acc = 0.0;
        for mask in 0..1u32 << n {
            if mask & bit == 0 {
                acc += weight[mask.count_ones() as usize] * (values[(mask | bit) as usize] - values[mask as usize]);
            }
        }
        *p = acc;
    }
    Ok(phi)
}

/// `phi_i = w_i (x_i - baseline_i)` for dense vectors.
pub fn shapley_linear(weights: &[f64], x: &[f64], baseline: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(w, (xi, bi))| w * (xi - bi))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledShapley {
    pub phi: Vec<f64>,
    /// Standard error of each mean; zero when all permutations were enumerated.
    pub se: Vec<f64>,
    pub n_perms: usize,
    pub enumerated: bool,
}

/// Whether `n!` equals `count` exactly.
fn is_factorial(n: usize, count: usize) -> bool {
    let mut f: usize = 1;
    for k in 2..=n {
        f = match f.checked_mul(k) {
            Some(x) if x <= count => x,
            _ => return false,
        };
    }
    f == count
}

fn next_permutation(p: &mut [usize]) -> bool {
    let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else {
        return false;
    };
    let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Adds the marginal contributions along `perm` to `row`.
fn walk(v: &impl Fn(u32) -> f64, perm: &[usize], empty: f64, row: &mut [f64]) {
    let mut mask = 0u32;
    let mut prev = empty;
    for &i in perm {
        mask |= 1 << i;
        let cur = v(mask);
        row[i] = cur - prev;
        prev = cur;
    }
}

/// Permutation-sampling Shapley estimate.
///
/// When `n_perms` equals `n!` every permutation is visited once instead and
/// the result is exact.
pub fn shapley_sampled(v: impl Fn(u32) -> f64, n: usize, n_perms: usize, seed: u64) -> Result<SampledShapley, AttributionError> {
    if n_perms == 0 {
        return Err(AttributionError::InvalidInput("n_perms must be at least 1".into()));
    }
    if n > 32 {
        return Err(AttributionError::TooManyFeatures { n, max: 32 });
    }
    let empty = v(0);
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut row = vec![0.0; n];
    let mut perm: Vec<usize> = (0..n).collect();
    let mut count = 0usize;
    let enumerated = is_factorial(n, n_perms);
    let mut record = |row: &[f64]| {
        for i in 0..n {
            sum[i] += row[i];
            sum_sq[i] += row[i] * row[i];
        }
    };
    if enumerated {
        loop {
            walk(&v, &perm, empty, &mut row);
            record(&row);
            count += 1;
            if !next_permutation(&mut perm) {
                break;
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n_perms {
            perm.shuffle(&mut rng);
            walk(&v, &perm, empty, &mut row);
            record(&row);
            count += 1;
        }
    }
    let m = count as f64;
    let phi: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let se = if enumerated || count < 2 {
        vec![0.0; n]
    } else {
        sum_sq
            .iter()
            .zip(&phi)
            .map(|(sq, mean)| ((sq - m * mean * mean).max(0.0) / (m - 1.0) / m).sqrt())
            .collect()
    };
    Ok(SampledShapley {
        phi,
        se,
        n_perms: count,
        enumerated,
    })
}

/// Attribution for an arbitrary value function: exact up to
/// [`AUTO_EXACT_LIMIT`] features, sampled beyond.
pub fn shapley_auto(v: impl Fn(u32) -> f64, n: usize, n_perms: usize, seed: u64) -> Result<(Vec<f64>, Method), AttributionError> {
    if n <= AUTO_EXACT_LIMIT {
        Ok((shapley_exact(v, n)?, Method::Exact))
    } else {
        Ok((shapley_sampled(v, n, n_perms, seed)?.phi, Method::Sampled { n_perms, seed }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Exact,
    Linear,
    Sampled { n_perms: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MethodChoice {
    /// Closed form for the native linear model.
    #[default]
    Auto,
    Exact,
    Linear,
    Sampled { n_perms: usize, seed: u64 },
}

impl std::str::FromStr for MethodChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Self::Auto),
            "exact" => Ok(Self::Exact),
            "linear" => Ok(Self::Linear),
            "sampled" => Ok(Self::Sampled {
                n_perms: DEFAULT_PERMUTATIONS,
                seed: 0,
            }),
            other => Err(format!("unknown attribution method {other:?}")),
        }
    }
}

/// Reference input that coalitions are measured against.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Baseline {
    /// All counts zero.
    #[default]
    Empty,
    /// Dense per-vocabulary counts, e.g. training means.
    Counts(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub segment: String,
    pub domain_id: Option<DomainId>,
    pub tokens: Vec<String>,
    pub phi: Vec<f64>,
    pub baseline_value: f64,
    pub full_value: f64,
    pub method: Method,
    /// Sampled path only: standard error of the type-level estimates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_se: Option<f64>,
}

impl AttributionMap {
    pub fn efficiency_gap(&self) -> f64 {
        self.phi.iter().sum::<f64>() - (self.full_value - self.baseline_value)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }

    /// Same attribution with every phi multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        let mut m = self.clone();
        m.phi.iter_mut().for_each(|p| *p *= c);
        m
    }
}

/// Token-level attribution of `tokens` under `model`.
///
/// Features are the distinct in-vocabulary token types. A coalition keeps
/// the actual counts of its members and the baseline counts of the others.
/// Each type's value is split equally over its occurrences; tokens outside
/// the vocabulary get zero.
pub fn attribute_tokens(
    model: &LinearModel,
    tokens: &[String],
    segment: impl Into<String>,
    domain_id: Option<DomainId>,
    choice: MethodChoice,
    baseline: &Baseline,
) -> Result<AttributionMap, AttributionError> {
    let x: Features = model.vocab.featurize(tokens);
    if x.is_empty() {
        return Err(AttributionError::EmptyVocabOverlap);
    }
    let base: Vec<f64> = match baseline {
        Baseline::Empty => vec![0.0; x.len()],
        Baseline::Counts(c) => {
            if c.len() != model.vocab.len() {
                return Err(AttributionError::InvalidInput(format!(
                    "baseline has {} entries for a vocabulary of {}",
                    c.len(),
                    model.vocab.len()
                )));
            }
            x.iter().map(|&(i, _)| c[i]).collect()
        }
    };
    let w: Vec<f64> = x.iter().map(|&(i, _)| model.weights[i]).collect();
    let counts: Vec<f64> = x.iter().map(|&(_, c)| c).collect();
    let n = x.len();
    let value = |mask: u32| {
        model.bias
            + (0..n)
                .map(|k| w[k] * if mask >> k & 1 == 1 { counts[k] } else { base[k] })
                .sum::<f64>()
    };
    let baseline_value = model.bias + w.iter().zip(&base).map(|(a, b)| a * b).sum::<f64>();
    let full_value = model.margin(&x);
    let mut max_se = None;
    let (type_phi, method) = match choice {
        MethodChoice::Auto | MethodChoice::Linear => (shapley_linear(&w, &counts, &base), Method::Linear),
        MethodChoice::Exact => (shapley_exact(value, n)?, Method::Exact),
        MethodChoice::Sampled { n_perms, seed } => {
            let s = shapley_sampled(value, n, n_perms, seed)?;
            max_se = Some(s.se.iter().copied().fold(0.0, f64::max));
            (s.phi, Method::Sampled { n_perms, seed })
        }
    };
    let mut phi = vec![0.0; tokens.len()];
    for (k, &(i, c)) in x.iter().enumerate() {
        let share = type_phi[k] / c;
        for (t, p) in tokens.iter().zip(phi.iter_mut()) {
            if model.vocab.get(t) == Some(i) {
                *p = share;
            }
        }
    }
    Ok(AttributionMap {
        segment: segment.into(),
        domain_id,
        tokens: tokens.to_vec(),
        phi,
        baseline_value,
        full_value,
        method,
        max_se,
    })
}

/// Per-type net phi across `maps`, ordered by `|net|` descending then word.
pub fn top_words_all<'a>(maps: impl IntoIterator<Item = &'a AttributionMap>, k: usize) -> Vec<(String, f64)> {
    let mut net: BTreeMap<&str, f64> = BTreeMap::new();
    for m in maps {
        for (t, p) in m.tokens.iter().zip(&m.phi) {
            *net.entry(t.as_str()).or_default() += p;
        }
    }
    let mut out: Vec<(String, f64)> = net.into_iter().map(|(w, p)| (w.to_string(), p)).collect();
    out.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then_with(|| a.0.cmp(&b.0)));
    out.truncate(k);
    out
}

pub fn top_words(map: &AttributionMap, k: usize) -> Vec<(String, f64)> {
    top_words_all([map], k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub index: usize,
    pub text: String,
    pub mean_phi: f64,
}

/// Sentences of `text` with the token range each one covers.
pub fn sentence_token_spans(text: &str) -> Vec<(String, Range<usize>)> {
    let mut next = 0;
    sentence_spans(text)
        .into_iter()
        .map(|r| {
            let s = &text[r];
            let n = tokenize(s).len();
            let span = next..next + n;
            next += n;
            (s.to_string(), span)
        })
        .collect()
}

/// Mean token phi per sentence. Sentences without tokens score zero.
pub fn sentence_scores(map: &AttributionMap, sentences: &[(String, Range<usize>)]) -> Result<Vec<SentenceScore>, AttributionError> {
    if sentences.is_empty() {
        return Err(AttributionError::NoSentences);
    }
    let mut next = 0;
    for (_, r) in sentences {
        if r.start != next {
            return Err(AttributionError::InvalidInput("sentence spans do not partition the tokens".into()));
        }
        next = r.end;
    }
    if next != map.tokens.len() {
        return Err(AttributionError::InvalidInput(format!(
            "sentence spans cover {next} of {} tokens",
            map.tokens.len()
        )));
    }
    Ok(sentences
        .iter()
        .enumerate()
        .map(|(index, (text, r))| SentenceScore {
            index,
            text: text.clone(),
            mean_phi: if r.is_empty() {
                0.0
            } else {
                map.phi[r.clone()].iter().sum::<f64>() / r.len() as f64
            },
        })
        .collect())
}

/// Highest mean phi; ties go to the earliest sentence.
pub fn select_anchor(scores: &[SentenceScore]) -> Result<&SentenceScore, AttributionError> {
    let mut best: Option<&SentenceScore> = None;
    for s in scores {
        if best.is_none_or(|b| s.mean_phi > b.mean_phi) {
            best = Some(s);
        }
    }
    best.ok_or(AttributionError::NoSentences)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainScore {
    pub domain_id: DomainId,
    pub mean_net: f64,
    pub n_tokens: usize,
}

/// Mean token phi per domain over all maps carrying that domain, in P order.
pub fn domain_scores(maps: &[AttributionMap]) -> Vec<DomainScore> {
    let mut acc: BTreeMap<DomainId, (f64, usize)> = BTreeMap::new();
    for m in maps {
        if let Some(d) = m.domain_id {
            let e = acc.entry(d).or_default();
            e.0 += m.phi.iter().sum::<f64>();
            e.1 += m.tokens.len();
        }
    }
    acc.into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(domain_id, (sum, n))| DomainScore {
            domain_id,
            mean_net: sum / n as f64,
            n_tokens: n,
        })
        .collect()
}

/// Domain ids ordered by mean net score, most CHR-leaning first.
pub fn domain_ranking(scores: &[DomainScore]) -> Vec<DomainId> {
    let mut s: Vec<&DomainScore> = scores.iter().collect();
    s.sort_by(|a, b| b.mean_net.total_cmp(&a.mean_net).then(a.domain_id.cmp(&b.domain_id)));
    s.into_iter().map(|d| d.domain_id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ClassWeights, TrainConfig, Vocab};
    use proptest::prelude::*;
    use rand::Rng;

    fn perm_oracle(v: &dyn Fn(u32) -> f64, n: usize) -> Vec<f64> {
        // average marginal contribution over every ordering
        let mut perm: Vec<usize> = (0..n).collect();
        let mut total = vec![0.0; n];
        let mut count = 0.0;
        loop {
            let mut mask = 0u32;
            for &i in &perm {
                let before = v(mask);
                mask |= 1 << i;
                total[i] += v(mask) - before;
            }
            count += 1.0;
            if !next_permutation(&mut perm) {
                break;
            }
        }
        total.iter().map(|t| t / count).collect()
    }

    fn random_game(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..1usize << n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn and_game() {
        let phi = shapley_exact(|m| if m == 0b11 { 1.0 } else { 0.0 }, 2).unwrap();
        assert!((phi[0] - 0.5).abs() < 1e-15 && (phi[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dummy_player() {
        let v = |m: u32| f64::from(m & 0b011) * 0.7 + if m & 1 == 1 { 2.0 } else { 0.0 };
        let phi = shapley_exact(v, 3).unwrap();
        assert_eq!(phi[2], 0.0);
    }

    #[test]
    fn exact_matches_permutation_average() {
        let g = random_game(6, 17);
        let v = |m: u32| g[m as usize];
        let exact = shapley_exact(v, 6).unwrap();
        let oracle = perm_oracle(&v, 6);
        for (a, b) in exact.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn auto_switches_to_sampling() {
        let g = random_game(5, 1);
        let (phi, m) = shapley_auto(|x| g[x as usize], 5, 100, 0).unwrap();
        assert_eq!(m, Method::Exact);
        assert_eq!(phi, shapley_exact(|x| g[x as usize], 5).unwrap());
        let (_, m) = shapley_auto(|x| f64::from(x.count_ones()), 13, 50, 0).unwrap();
        assert_eq!(m, Method::Sampled { n_perms: 50, seed: 0 });
    }

    #[test]
    fn too_many_features() {
        assert_eq!(
            shapley_exact(|_| 0.0, 21),
            Err(AttributionError::TooManyFeatures { n: 21, max: 20 })
        );
    }

    #[test]
    fn linear_scalar_case() {
        let phi = shapley_linear(&[2.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]);
        assert_eq!(phi, vec![2.0, -1.0]);
        assert_eq!(phi.iter().sum::<f64>(), 1.0);
        assert_eq!(shapley_linear(&[2.0, -1.0], &[3.0, 1.0], &[3.0, 1.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn sampled_enumeration_equals_exact() {
        let g = random_game(4, 3);
        let v = |m: u32| g[m as usize];
        let s = shapley_sampled(v, 4, 24, 0).unwrap();
        assert!(s.enumerated);
        let e = shapley_exact(v, 4).unwrap();
        for (a, b) in s.phi.iter().zip(&e) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(s.se.iter().all(|&x| x == 0.0));
        assert!(!shapley_sampled(v, 4, 25, 0).unwrap().enumerated);
    }

    #[test]
    fn sampled_is_repeatable_and_efficient() {
        let g = random_game(8, 5);
        let v = |m: u32| g[m as usize];
        let a = shapley_sampled(v, 8, 300, 12).unwrap();
        let b = shapley_sampled(v, 8, 300, 12).unwrap();
        assert_eq!(a, b);
        assert!(!a.enumerated);
        let total = g[255] - g[0];
        assert!((a.phi.iter().sum::<f64>() - total).abs() < 1e-9);
        assert!(shapley_sampled(v, 8, 0, 1).is_err());
    }

    fn model(tokens: &[&str], weights: Vec<f64>, bias: f64) -> LinearModel {
        let vocab: Vocab = serde_json::from_value(serde_json::json!(tokens)).unwrap();
        LinearModel {
            vocab,
            weights,
            bias,
            class_weights: ClassWeights { chr: 1.0, hc: 1.0 },
            config: TrainConfig::default(),
            seed: 0,
            loss_history: Vec::new(),
        }
    }

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn single_feature_summary() {
        let m = model(&["voices"], vec![1.5], 0.2);
        let a = attribute_tokens(&m, &toks("voices and more"), "s", None, MethodChoice::Auto, &Baseline::Empty).unwrap();
        assert_eq!(a.phi, vec![1.5, 0.0, 0.0]);
        assert_eq!(a.baseline_value, 0.2);
        assert_eq!(a.method, Method::Linear);
        assert!(a.efficiency_gap().abs() < 1e-12);
    }

    #[test]
    fn no_overlap() {
        let m = model(&["voices"], vec![1.5], 0.0);
        assert_eq!(
            attribute_tokens(&m, &toks("nothing here"), "s", None, MethodChoice::Auto, &Baseline::Empty),
            Err(AttributionError::EmptyVocabOverlap)
        );
    }

    #[test]
    fn occurrences_share_type_value() {
        let m = model(&["a", "b"], vec![0.6, -0.2], 0.0);
        let a = attribute_tokens(&m, &toks("a b a a"), "s", None, MethodChoice::Exact, &Baseline::Empty).unwrap();
        for (t, p) in a.tokens.iter().zip(&a.phi) {
            let want = if t == "a" { 0.6 } else { -0.2 };
            assert!((p - want).abs() < 1e-12);
        }
        assert!(a.efficiency_gap().abs() < 1e-12);
    }

    #[test]
    fn linear_and_exact_paths_agree_on_ten_types() {
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = model(&refs, (0..10).map(|_| rng.random_range(-2.0..2.0)).collect(), 0.3);
        let summary: Vec<String> = (0..25).map(|i| words[(i * 7) % 10].clone()).collect();
        let lin = attribute_tokens(&m, &summary, "s", None, MethodChoice::Linear, &Baseline::Empty).unwrap();
        let ex = attribute_tokens(&m, &summary, "s", None, MethodChoice::Exact, &Baseline::Empty).unwrap();
        for (a, b) in lin.phi.iter().zip(&ex.phi) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn linear_handles_more_types_than_mask_bits() {
        let words: Vec<String> = (0..40).map(|i| format!("w{i:02}")).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let m = model(&refs, (0..40).map(|i| f64::from(i) / 10.0 - 2.0).collect(), 0.1);
        let a = attribute_tokens(&m, &words, "s", None, MethodChoice::Auto, &Baseline::Empty).unwrap();
        assert!((a.baseline_value - 0.1).abs() < 1e-12);
        assert!(a.efficiency_gap().abs() < 1e-9);
    }

    #[test]
    fn count_baseline() {
        let m = model(&["a", "b"], vec![1.0, 2.0], 0.0);
        let a = attribute_tokens(&m, &toks("a a b"), "s", None, MethodChoice::Linear, &Baseline::Counts(vec![1.0, 0.5])).unwrap();
        // type a: 1*(2-1) split over 2 tokens; type b: 2*(1-0.5)
        assert_eq!(a.phi, vec![0.5, 0.5, 1.0]);
        assert!(a.efficiency_gap().abs() < 1e-12);
        assert!(attribute_tokens(&m, &toks("a"), "s", None, MethodChoice::Linear, &Baseline::Counts(vec![1.0])).is_err());
    }

    fn map(tokens: &[&str], phi: &[f64], domain: Option<u8>) -> AttributionMap {
        AttributionMap {
            segment: "s".into(),
            domain_id: domain.and_then(DomainId::new),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
            phi: phi.to_vec(),
            baseline_value: 0.0,
            full_value: phi.iter().sum(),
            method: Method::Linear,
            max_se: None,
        }
    }

    #[test]
    fn top_words_examples() {
        let m = map(&["x", "y", "x", "z"], &[0.1, -0.3, 0.1, 0.3], None);
        let top = top_words(&m, 10);
        assert_eq!(top.len(), 3);
        assert_eq!(top[0].0, "y");
        assert_eq!(top[1].0, "z");
        assert_eq!(top[2].0, "x");
        assert!((top[2].1 - 0.2).abs() < 1e-15);
        assert_eq!(top_words(&m, 1).len(), 1);
    }

    #[test]
    fn sentence_argmax() {
        let m = map(&["a", "b", "c", "d", "e"], &[0.2, 0.4, 0.1, 0.1, 0.1], None);
        let spans = vec![("A b.".to_string(), 0..2), ("C d e.".to_string(), 2..5)];
        let s = sentence_scores(&m, &spans).unwrap();
        assert!((s[0].mean_phi - 0.3).abs() < 1e-15);
        assert!((s[1].mean_phi - 0.1).abs() < 1e-15);
        assert_eq!(select_anchor(&s).unwrap().index, 0);
        let flat = map(&["a", "b"], &[0.5, 0.5], None);
        let s = sentence_scores(&flat, &[("A.".into(), 0..1), ("B.".into(), 1..2)]).unwrap();
        assert_eq!(select_anchor(&s).unwrap().index, 0);
        assert_eq!(sentence_scores(&flat, &[]), Err(AttributionError::NoSentences));
        assert!(sentence_scores(&flat, &[("A.".into(), 0..1)]).is_err());
        assert_eq!(select_anchor(&[]), Err(AttributionError::NoSentences));
    }

    #[test]
    fn sentence_spans_partition_tokens() {
        let text = "He sleeps badly. Voices call him, e.g. at night! Then quiet";
        let spans = sentence_token_spans(text);
        assert_eq!(spans.len(), 3);
        assert_eq!(spans.last().unwrap().1.end, tokenize(text).len());
    }

    #[test]
    fn domain_score_examples() {
        let s = domain_scores(&[map(&["a", "b"], &[1.0, -1.0], Some(4))]);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean_net, 0.0);
        let maps = vec![
            map(&["a", "b"], &[0.5, 0.1], Some(2)),
            map(&["c"], &[-0.4], Some(1)),
            map(&["d", "e", "f"], &[0.3, 0.0, 0.0], Some(2)),
            map(&["g"], &[9.0], None),
        ];
        let s = domain_scores(&maps);
        assert_eq!(s.iter().map(|d| d.domain_id.number()).collect::<Vec<_>>(), vec![1, 2]);
        assert!((s[0].mean_net + 0.4).abs() < 1e-15);
        assert!((s[1].mean_net - 0.9 / 5.0).abs() < 1e-15);
        assert_eq!(s[1].n_tokens, 5);
    }

    proptest! {
        #[test]
        fn efficiency_and_dummy(seed in any::<u64>(), n in 1usize..8) {
            let mut g = random_game(n, seed);
            // make the last feature a dummy
            let d = 1usize << (n - 1);
            for m in 0..g.len() { if m & d != 0 { g[m] = g[m & !d]; } }
            let phi = shapley_exact(|m| g[m as usize], n).unwrap();
            prop_assert!((phi.iter().sum::<f64>() - (g[g.len() - 1] - g[0])).abs() < 1e-9);
            prop_assert!(phi[n - 1].abs() < 1e-12);
        }

        #[test]
        fn linearity(seed in any::<u64>(), n in 1usize..7) {
            let a = random_game(n, seed);
            let b = random_game(n, seed ^ 0xabc);
            let pa = shapley_exact(|m| a[m as usize], n).unwrap();
            let pb = shapley_exact(|m| b[m as usize], n).unwrap();
            let pab = shapley_exact(|m| a[m as usize] + b[m as usize], n).unwrap();
            for i in 0..n { prop_assert!((pab[i] - pa[i] - pb[i]).abs() < 1e-9); }
        }

        #[test]
        fn symmetry(seed in any::<u64>(), n in 2usize..7) {
            let g = random_game(n, seed);
            // symmetrise features 0 and 1
            let swap = |m: usize| (m & !3) | ((m & 1) << 1) | ((m >> 1) & 1);
            let sym: Vec<f64> = (0..g.len()).map(|m| g[m] + g[swap(m)]).collect();
            let phi = shapley_exact(|m| sym[m as usize], n).unwrap();
            prop_assert!((phi[0] - phi[1]).abs() < 1e-9);
        }

        #[test]
        fn anchor_and_ranking_scale_invariant(phis in prop::collection::vec(-1.0f64..1.0, 6), c in 0.01f64..100.0) {
            let m = map(&["a", "b", "c", "d", "e", "f"], &phis, None);
            let spans = vec![("x".to_string(), 0..2), ("y".to_string(), 2..3), ("z".to_string(), 3..6)];
            let s1 = sentence_scores(&m, &spans).unwrap();
            let s2 = sentence_scores(&m.scaled(c), &spans).unwrap();
            prop_assert_eq!(select_anchor(&s1).unwrap().index, select_anchor(&s2).unwrap().index);
            let maps: Vec<AttributionMap> = (0..3).map(|k| map(&["a", "b"], &phis[2 * k..2 * k + 2], Some(k as u8 + 1))).collect();
            let scaled: Vec<AttributionMap> = maps.iter().map(|m| m.scaled(c)).collect();
            prop_assert_eq!(domain_ranking(&domain_scores(&maps)), domain_ranking(&domain_scores(&scaled)));
        }
    }
}
