//! Evaluation suite: Dice, accuracy, BLEU-1..4, a simplified corpus METEOR,
//! ROUGE-L, five-trial confidence ranges and paired t-tests.

use std::collections::{BTreeMap, HashMap};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty gold set")]
    EmptyGold,
    #[error("trial set must have exactly 5 values, got {0}")]
    WrongTrialCount(usize),
    #[error("degenerate: {0}")]
    Degenerate(&'static str),
}

/// Hypothesis with one or more references, pre-tokenized and lowercase.
#[derive(Debug, Clone)]
pub struct TextPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl TextPair {
    pub fn new(hypothesis: &str, references: &[&str]) -> Self {
        Self {
            hypothesis: tokenize(hypothesis),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

/// Exactly five per-trial aggregate scores.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrialSet(pub [f64; 5]);

impl TrialSet {
    pub fn from_slice(v: &[f64]) -> Result<Self, MetricError> {
        let arr: [f64; 5] = v.try_into().map_err(|_| MetricError::WrongTrialCount(v.len()))?;
        Ok(TrialSet(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeStat {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

impl RangeStat {
    /// Render in the table cell style "96.2(96.0,96.5)".
    pub fn cell(&self) -> String {
        format!("{:.1}({:.1},{:.1})", self.mean, self.low, self.high)
    }
}

/// Per-dataset metric values plus significance statistics.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub datasets: BTreeMap<String, BTreeMap<String, RangeStat>>,
    pub significance: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        for (dataset, metrics) in &self.datasets {
            out.push_str(dataset);
            out.push('\n');
            for (name, stat) in metrics {
                out.push_str(&format!("  {name}: {}\n", stat.cell()));
            }
        }
        for (cmp, p) in &self.significance {
            out.push_str(&format!("  p[{cmp}] = {p:.4}\n"));
        }
        out
    }
}

/// Metric tokenization: lowercase, punctuation split off into its own
/// tokens, whitespace split.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Dice overlap 2|P∩G| / (|P|+|G|) on binary masks; both empty → 1.0.
pub fn dice_score(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64, MetricError> {
    if pred.dim() != gt.dim() {
        return Err(MetricError::ShapeMismatch(pred.dim(), gt.dim()));
    }
    let mut inter = 0usize;
    let mut p_sum = 0usize;
    let mut g_sum = 0usize;
    for (p, g) in pred.iter().zip(gt.iter()) {
        let (p, g) = ((*p > 0) as usize, (*g > 0) as usize);
        inter += p & g;
        p_sum += p;
        g_sum += g;
    }
    if p_sum + g_sum == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_sum + g_sum) as f64)
}

fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Exact-match accuracy after lowercase + whitespace-collapse normalization.
pub fn accuracy(preds: &[String], labels: &[String]) -> Result<f64, MetricError> {
    if preds.len() != labels.len() {
        return Err(MetricError::LengthMismatch(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(MetricError::Degenerate("empty prediction list"));
    }
    let hits = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| normalize_answer(p) == normalize_answer(l))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped (modified) n-gram precision of the hypothesis against all
/// references, as (numerator, denominator).
fn modified_precision(pair: &TextPair, n: usize) -> (usize, usize) {
    let hyp_counts = ngram_counts(&pair.hypothesis, n);
    let ref_counts: Vec<_> = pair.references.iter().map(|r| ngram_counts(r, n)).collect();
    let denom: usize = hyp_counts.values().sum();
    let mut num = 0usize;
    for (gram, &count) in &hyp_counts {
        let max_ref = ref_counts
            .iter()
            .map(|rc| rc.get(gram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        num += count.min(max_ref);
    }
    (num, denom)
}

/// Brevity penalty with r = the reference length closest to the hypothesis
/// length (ties go to the shorter reference).
fn brevity_penalty(pair: &TextPair) -> f64 {
    let c = pair.hypothesis.len();
    let r = pair
        .references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&rl| (rl.abs_diff(c), rl))
        .unwrap_or(0);
    if c >= r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BleuSmoothing {
    /// A zero clipped precision zeroes the whole score.
    #[default]
    None,
    /// Add-one smoothing on each precision fraction.
    AddOne,
}

/// BLEU-n with uniform weights 1/n over orders 1..=n.
pub fn bleu(pair: &TextPair, n: usize) -> f64 {
    bleu_with(pair, n, BleuSmoothing::None)
}

pub fn bleu_with(pair: &TextPair, n: usize, smoothing: BleuSmoothing) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be in 1..=4");
    if pair.hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (num, denom) = modified_precision(pair, k);
        let p = match smoothing {
            BleuSmoothing::None => {
                if num == 0 || denom == 0 {
                    return 0.0;
                }
                num as f64 / denom as f64
            }
            BleuSmoothing::AddOne => (num + 1) as f64 / (denom + 1) as f64,
        };
        log_sum += p.ln();
    }
    brevity_penalty(pair) * (log_sum / n as f64).exp()
}

/// Unigram precision |matches| / |h tokens| with clipped token counts.
fn unigram_precision(gold: &[String], hyp: &[String]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let gold_counts = ngram_counts(gold, 1);
    let hyp_counts = ngram_counts(hyp, 1);
    let matches: usize = hyp_counts
        .iter()
        .map(|(g, &c)| c.min(gold_counts.get(g).copied().unwrap_or(0)))
        .sum();
    matches as f64 / hyp.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeteorMode {
    /// Mean over gold sentences of the best unigram precision against any
    /// hypothesis sentence.
    #[default]
    Corpus,
    /// Conventional METEOR: unigram F (recall-weighted) with a chunk
    /// fragmentation penalty. Not used by the acceptance suite.
    Standard,
}

/// Simplified corpus METEOR: (1/m)·Σ_g max_h Precision(g,h).
pub fn meteor_corpus(golds: &[Vec<String>], hyps: &[Vec<String>]) -> Result<f64, MetricError> {
    meteor_with(golds, hyps, MeteorMode::Corpus)
}

pub fn meteor_with(
    golds: &[Vec<String>],
    hyps: &[Vec<String>],
    mode: MeteorMode,
) -> Result<f64, MetricError> {
    if golds.is_empty() {
        return Err(MetricError::EmptyGold);
    }
    let score = match mode {
        MeteorMode::Corpus => {
            let sum: f64 = golds
                .iter()
                .map(|g| {
                    hyps.iter()
                        .map(|h| unigram_precision(g, h))
                        .fold(0.0, f64::max)
                })
                .sum();
            sum / golds.len() as f64
        }
        MeteorMode::Standard => {
            let sum: f64 = golds
                .iter()
                .map(|g| {
                    hyps.iter()
                        .map(|h| meteor_standard_sentence(g, h))
                        .fold(0.0, f64::max)
                })
                .sum();
            sum / golds.len() as f64
        }
    };
    Ok(score)
}

/// Single-sentence conventional METEOR: Fmean = 10PR/(R+9P), penalty
/// 0.5·(chunks/matches)^3 over contiguous matched runs.
fn meteor_standard_sentence(gold: &[String], hyp: &[String]) -> f64 {
    if gold.is_empty() || hyp.is_empty() {
        return 0.0;
    }
    // Greedy left-to-right exact alignment.
    let mut used = vec![false; gold.len()];
    let mut align: Vec<Option<usize>> = vec![None; hyp.len()];
    for (i, h) in hyp.iter().enumerate() {
        if let Some(j) = gold.iter().enumerate().position(|(j, g)| !used[j] && g == h) {
            used[j] = true;
            align[i] = Some(j);
        }
    }
    let matches = align.iter().flatten().count();
    if matches == 0 {
        return 0.0;
    }
    let p = matches as f64 / hyp.len() as f64;
    let r = matches as f64 / gold.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let mut chunks = 0usize;
    let mut prev: Option<usize> = None;
    for a in align.iter() {
        match (a, prev) {
            (Some(j), Some(pj)) if *j == pj + 1 => {}
            (Some(_), _) => chunks += 1,
            (None, _) => {}
        }
        prev = *a;
    }
    let penalty = 0.5 * (chunks as f64 / matches as f64).powi(3);
    fmean * (1.0 - penalty)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L (recall, precision, F). X = hypothesis, Y = reference. With
/// multiple references, returns the triple of the best-F reference.
pub fn rouge_l(pair: &TextPair, beta: f64) -> (f64, f64, f64) {
    if pair.hypothesis.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let mut best = (0.0, 0.0, 0.0);
    for reference in &pair.references {
        if reference.is_empty() {
            continue;
        }
        let lcs = lcs_len(&pair.hypothesis, reference) as f64;
        let r = lcs / reference.len() as f64;
        let p = lcs / pair.hypothesis.len() as f64;
        let f = if r + p == 0.0 {
            0.0
        } else {
            (1.0 + beta * beta) * r * p / (r + beta * beta * p)
        };
        if f >= best.2 {
            best = (r, p, f);
        }
    }
    best
}

pub const DEFAULT_ROUGE_BETA: f64 = 1.2;

/// Mean plus worst/best of the five trials.
pub fn trial_range(trials: &TrialSet) -> RangeStat {
    let v = &trials.0;
    let mean = v.iter().sum::<f64>() / 5.0;
    let low = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let high = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    RangeStat { mean, low, high }
}

/// Two-sided paired t-test on d = a − b, n−1 degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(MetricError::Degenerate("need at least 2 pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var == 0.0 {
        return Err(MetricError::Degenerate("zero-variance differences"));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .map_err(|_| MetricError::Degenerate("t distribution"))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok((t, p))
}

/// One model output ready for scoring: the mask, when any, already
/// loaded into memory.
#[derive(Debug, Clone)]
pub struct EvalPrediction {
    pub id: String,
    pub answer: String,
    pub mask: Option<Array2<u8>>,
}

/// Score one run's predictions against manifest samples, grouped by task.
/// Matching is by sample id; samples without a prediction are skipped.
/// Single-run report, so each range collapses to its mean.
pub fn evaluate_predictions(
    samples: &[&crate::datamodel::VqaSample],
    preds: &[EvalPrediction],
) -> Result<MetricReport, MetricError> {
    let by_id: HashMap<&str, &EvalPrediction> =
        preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut grouped: BTreeMap<String, Vec<(&crate::datamodel::VqaSample, &EvalPrediction)>> =
        BTreeMap::new();
    for s in samples {
        if let Some(p) = by_id.get(s.id.as_str()) {
            grouped.entry(s.task.to_string()).or_default().push((s, p));
        }
    }
    if grouped.is_empty() {
        return Err(MetricError::Degenerate("no predictions match the manifest"));
    }

    let mut report = MetricReport::default();
    for (task, pairs) in grouped {
        let mut metrics = BTreeMap::new();
        let point = |v: f64| RangeStat { mean: v, low: v, high: v };

        let answers: Vec<String> = pairs.iter().map(|(_, p)| p.answer.clone()).collect();
        let labels: Vec<String> = pairs.iter().map(|(s, _)| s.answer.clone()).collect();
        metrics.insert("accuracy".to_string(), point(accuracy(&answers, &labels)?));

        for n in 1..=4 {
            let mean: f64 = pairs
                .iter()
                .map(|(s, p)| bleu(&TextPair::new(&p.answer, &[s.answer.as_str()]), n))
                .sum::<f64>()
                / pairs.len() as f64;
            metrics.insert(format!("bleu_{n}"), point(mean));
        }
        let golds: Vec<Vec<String>> = labels.iter().map(|l| tokenize(l)).collect();
        let hyps: Vec<Vec<String>> = answers.iter().map(|a| tokenize(a)).collect();
        metrics.insert("meteor".to_string(), point(meteor_corpus(&golds, &hyps)?));
        let rouge_mean: f64 = pairs
            .iter()
            .map(|(s, p)| rouge_l(&TextPair::new(&p.answer, &[s.answer.as_str()]), DEFAULT_ROUGE_BETA).2)
            .sum::<f64>()
            / pairs.len() as f64;
        metrics.insert("rouge_l".to_string(), point(rouge_mean));

        let mask_pairs: Vec<_> = pairs
            .iter()
            .filter_map(|(s, p)| s.target_mask.as_ref().map(|gt| (gt, *p)))
            .collect();
        if !mask_pairs.is_empty() {
            let mut dice_sum = 0.0;
            for (gt, p) in &mask_pairs {
                let zeros;
                let pred_mask = match &p.mask {
                    Some(m) => m,
                    None => {
                        // a missing mask scores as an empty prediction
                        zeros = Array2::zeros(gt.dim());
                        &zeros
                    }
                };
                dice_sum += dice_score(pred_mask, gt)?;
            }
            metrics.insert(
                "dice".to_string(),
                point(dice_sum / mask_pairs.len() as f64),
            );
        }
        report.datasets.insert(task, metrics);
    }
    Ok(report)
}
