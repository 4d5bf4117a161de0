//! Majority-reference evaluation: macro precision/recall/F1, per-annotator
//! head accuracy, prediction variance, and full report assembly.
//!
//! The model-side "majority prediction" is the majority vote over head
//! argmaxes with the same lowest-index tie-break the annotation majority
//! uses; a single-head model degenerates to that head's argmax. Reference
//! ties are *included* under the tie-break label and surfaced as a count
//! rather than silently dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{majority_vote, AnnotationMatrix, DataError, Dataset};
use crate::loss::loss_ce;
use crate::mixture::{
    agree_disagree_split, fit_correction_weights, loss_histogram, EpochFit, FitOptions,
    HistogramRow, LossLedger, MixtureError, SplitReport,
};
use crate::model::{forward, ModelParams};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predicted ({predicted}) and reference ({reference}) lengths differ")]
    LengthMismatch { predicted: usize, reference: usize },
    #[error("no samples to score")]
    Empty,
    #[error("prediction variance needs binary labels (got {num_classes} classes)")]
    NotBinary { num_classes: usize },
    #[error("model has {model} heads but dataset has {dataset} annotators")]
    HeadMismatch { model: usize, dataset: usize },
    #[error("model expects {model}-dim features but dataset has {dataset}")]
    FeatureMismatch { model: usize, dataset: usize },
    #[error("model predicts {model} classes but dataset has {dataset}")]
    ClassMismatch { model: usize, dataset: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

// ============================================================================
// Precision / recall / F1
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrfAveraging {
    /// Unweighted mean over all classes.
    #[default]
    Macro,
    /// Report class 1's row as the headline triple (binary convention).
    PositiveClass,
}

impl std::str::FromStr for PrfAveraging {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "macro" => Ok(PrfAveraging::Macro),
            "positive_class" => Ok(PrfAveraging::PositiveClass),
            _ => Err(format!("unknown averaging {s:?} (expected macro or positive_class)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Reference samples of this class.
    pub support: usize,
    /// A denominator hit zero; the affected rate is defined as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrfSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub averaging: PrfAveraging,
    pub per_class: Vec<ClassMetrics>,
    pub zero_division: bool,
}

fn ratio(num: usize, den: usize, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision_recall_f1(
    predicted: &[usize],
    reference: &[usize],
    num_classes: usize,
    averaging: PrfAveraging,
) -> Result<PrfSummary, MetricsError> {
    if predicted.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            predicted: predicted.len(),
            reference: reference.len(),
        });
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fne = 0usize;
        for (&p, &r) in predicted.iter().zip(reference) {
            match (p == k, r == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fne += 1,
                (false, false) => {}
            }
        }
        let mut zero_division = false;
        let precision = ratio(tp, tp + fp, &mut zero_division);
        let recall = ratio(tp, tp + fne, &mut zero_division);
        let f1 = if precision + recall == 0.0 {
            zero_division = true;
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { class: k, precision, recall, f1, support: tp + fne, zero_division });
    }
    let (precision, recall, f1) = match averaging {
        PrfAveraging::Macro => {
            let m = num_classes as f64;
            (
                per_class.iter().map(|c| c.precision).sum::<f64>() / m,
                per_class.iter().map(|c| c.recall).sum::<f64>() / m,
                per_class.iter().map(|c| c.f1).sum::<f64>() / m,
            )
        }
        PrfAveraging::PositiveClass => {
            let c = &per_class[1.min(num_classes - 1)];
            (c.precision, c.recall, c.f1)
        }
    };
    let zero_division = per_class.iter().any(|c| c.zero_division);
    Ok(PrfSummary { precision, recall, f1, averaging, per_class, zero_division })
}

// ============================================================================
// Annotator accuracy and prediction variance
// ============================================================================

/// Accuracy of head `a`'s argmax on the samples annotator `a` labeled,
/// averaged (unweighted) over annotators with at least one annotation.
/// `head_votes` is N rows of A argmax labels.
pub fn annotator_accuracy(head_votes: &[Vec<usize>], annotations: &AnnotationMatrix) -> f64 {
    let mut correct = vec![0usize; annotations.num_annotators()];
    let mut total = vec![0usize; annotations.num_annotators()];
    for (sample, annotator, class) in annotations.iter() {
        total[annotator] += 1;
        correct[annotator] += (head_votes[sample][annotator] == class) as usize;
    }
    let mut sum = 0.0;
    let mut active = 0usize;
    for a in 0..annotations.num_annotators() {
        if total[a] > 0 {
            sum += correct[a] as f64 / total[a] as f64;
            active += 1;
        }
    }
    if active == 0 { 0.0 } else { sum / active as f64 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceScope {
    /// Every head votes on every sample.
    #[default]
    AllHeads,
    /// Only heads whose annotator labeled the sample vote.
    AnnotatedOnly,
}

impl std::str::FromStr for VarianceScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all_heads" => Ok(VarianceScope::AllHeads),
            "annotated_only" => Ok(VarianceScope::AnnotatedOnly),
            _ => Err(format!("unknown variance scope {s:?} (expected all_heads or annotated_only)")),
        }
    }
}

/// Mean over samples of the binary vote variance `n₁·n₀ / n²` of the heads'
/// argmax votes, ×100 for reporting. 0 when heads always agree; 25 when every
/// sample splits the heads evenly.
pub fn prediction_variance(
    head_votes: &[Vec<usize>],
    annotations: &AnnotationMatrix,
    scope: VarianceScope,
    num_classes: usize,
) -> Result<f64, MetricsError> {
    if num_classes != 2 {
        return Err(MetricsError::NotBinary { num_classes });
    }
    if head_votes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (sample, votes) in head_votes.iter().enumerate() {
        let chosen: Vec<usize> = match scope {
            VarianceScope::AllHeads => votes.clone(),
            VarianceScope::AnnotatedOnly => annotations
                .sample_row(sample)
                .iter()
                .map(|&(a, _)| votes[a])
                .collect(),
        };
        if chosen.is_empty() {
            continue; // unannotated sample under the restricted scope
        }
        sum += crate::data::annotation_variance(&chosen, 2)?;
        counted += 1;
    }
    if counted == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(100.0 * sum / counted as f64)
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

// ============================================================================
// Report assembly
// ============================================================================

pub const METRICS_FORMAT: &str = "crowdloss-metrics-v1";

/// Headline rates live in [0,1]; `prediction_variance` is already a
/// percentage (`None` unless binary). CSV serialization multiplies rates by
/// 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of samples whose majority prediction equals the reference.
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub annotator_accuracy: f64,
    pub prediction_variance: Option<f64>,
    pub num_samples: usize,
    pub num_annotators: usize,
    /// Reference-majority ties, included under the tie-break label.
    pub tie_count: usize,
    pub zero_division: bool,
}

fn push_pct(out: &mut String, key: &str, rate: f64) {
    out.push_str(&format!("{key},{}\n", 100.0 * rate));
}

impl MetricsReport {
    /// Two-column `metric,value` CSV; `_pct` keys are percentages.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("metric,value\n");
        push_pct(&mut out, "precision_pct", self.precision);
        push_pct(&mut out, "recall_pct", self.recall);
        push_pct(&mut out, "f1_pct", self.f1);
        push_pct(&mut out, "accuracy_pct", self.accuracy);
        push_pct(&mut out, "annotator_accuracy_pct", self.annotator_accuracy);
        if let Some(v) = self.prediction_variance {
            out.push_str(&format!("prediction_variance_pct,{v}\n"));
        }
        out.push_str(&format!("num_samples,{}\n", self.num_samples));
        out.push_str(&format!("num_annotators,{}\n", self.num_annotators));
        out.push_str(&format!("tie_count,{}\n", self.tie_count));
        out.push_str(&format!("zero_division,{}\n", self.zero_division as u8));
        for c in &self.per_class {
            push_pct(&mut out, &format!("class{}_precision_pct", c.class), c.precision);
            push_pct(&mut out, &format!("class{}_recall_pct", c.class), c.recall);
            push_pct(&mut out, &format!("class{}_f1_pct", c.class), c.f1);
            out.push_str(&format!("class{}_support,{}\n", c.class, c.support));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub averaging: PrfAveraging,
    pub variance_scope: VarianceScope,
    pub fit: FitOptions,
    /// Epoch stamped on the produced ledger.
    pub ledger_epoch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            averaging: PrfAveraging::Macro,
            variance_scope: VarianceScope::AllHeads,
            fit: FitOptions::default(),
            ledger_epoch: 0,
        }
    }
}

/// Everything one full evaluation pass produces: the metric report, the
/// plain per-cell cross-entropy ledger, the mixture fit over that ledger,
/// the agree/disagree split, the loss histogram (empty if every loss is
/// identical), and the raw per-head probability rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalArtifacts {
    pub report: MetricsReport,
    pub ledger: LossLedger,
    pub fit: EpochFit,
    pub split: SplitReport,
    pub histogram: Vec<HistogramRow>,
    /// `probs[sample][annotator]`: each head's class distribution.
    pub probs: Vec<Vec<Vec<f64>>>,
}

/// One deterministic evaluation pass of `params` over `dataset`.
pub fn evaluate_model(
    params: &ModelParams,
    dataset: &Dataset,
    options: &EvalOptions,
) -> Result<EvalArtifacts, MetricsError> {
    let dims = params.dims;
    if dims.annotators != dataset.num_annotators() {
        return Err(MetricsError::HeadMismatch {
            model: dims.annotators,
            dataset: dataset.num_annotators(),
        });
    }
    if dims.input != dataset.feature_dim() {
        return Err(MetricsError::FeatureMismatch { model: dims.input, dataset: dataset.feature_dim() });
    }
    if dims.classes != dataset.num_classes() {
        return Err(MetricsError::ClassMismatch { model: dims.classes, dataset: dataset.num_classes() });
    }
    let n = dataset.num_samples();
    if n == 0 {
        return Err(MetricsError::Empty);
    }

    let mut head_votes: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut predicted: Vec<usize> = Vec::with_capacity(n);
    let mut probs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n);
    let mut ledger = LossLedger::new(options.ledger_epoch);
    for s in 0..n {
        let trace = forward(params, &dataset.features.row(s).to_owned());
        let votes: Vec<usize> = trace.probs.iter().map(|p| argmax(p)).collect();
        predicted.push(majority_vote(&votes, dims.classes)?.class);
        for (a, class) in dataset.annotations.sample_row(s) {
            ledger
                .record(s, a, loss_ce(&trace.probs[a], class))
                .expect("fresh ledger accepts finite losses");
        }
        head_votes.push(votes);
        probs.push(trace.probs);
    }

    let majorities = dataset.majorities()?;
    let reference: Vec<usize> = majorities.iter().map(|m| m.class).collect();
    let tie_count = majorities.iter().filter(|m| m.tie).count();
    let prf = precision_recall_f1(&predicted, &reference, dims.classes, options.averaging)?;
    let hits = predicted.iter().zip(&reference).filter(|(p, r)| p == r).count();
    let accuracy = hits as f64 / n as f64;
    let acc = annotator_accuracy(&head_votes, &dataset.annotations);
    let variance = if dims.classes == 2 {
        Some(prediction_variance(&head_votes, &dataset.annotations, options.variance_scope, 2)?)
    } else {
        None
    };
    let report = MetricsReport {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        accuracy,
        per_class: prf.per_class,
        annotator_accuracy: acc,
        prediction_variance: variance,
        num_samples: n,
        num_annotators: dataset.num_annotators(),
        tie_count,
        zero_division: prf.zero_division,
    };

    let fit = fit_correction_weights(&ledger, n, &options.fit)?;
    let split = agree_disagree_split(&ledger, &fit.weights, &dataset.annotations, &majorities);
    let histogram =
        loss_histogram(&ledger, &dataset.annotations, &majorities).unwrap_or_default();
    Ok(EvalArtifacts { report, ledger, fit, split, histogram, probs })
}
