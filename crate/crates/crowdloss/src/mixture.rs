//! Two-component mixture over per-cell losses and the correction weights it
//! yields.
//!
//! A `(sample, annotator)` cell's cross-entropy is recorded once per epoch
//! in a [`LossLedger`]. Losses are min-max normalized into `[1e-4, 1−1e-4]`
//! and fit with a two-component mixture (Beta by default, Gaussian behind a
//! flag) by EM with method-of-moments M-steps. The posterior probability of
//! the high-loss component becomes the cell's correction weight `w`.
//!
//! Fits run per annotator by default — each annotator's loss distribution is
//! modeled on its own — or globally over per-sample mean losses, which
//! yields one shared `w` per sample. Annotators with fewer than
//! [`MIN_OBSERVATIONS`] cells, or with degenerate (all-equal) losses, fall
//! back to `w = 0` for the epoch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::data::{AnnotationMatrix, Majority};
use crate::loss::CorrectionWeights;

/// Normalized losses are clamped into `[NORM_FLOOR, 1 − NORM_FLOOR]`.
pub const NORM_FLOOR: f64 = 1e-4;
/// Minimum observations for a mixture fit; below this the fit falls back to
/// `w = 0`.
pub const MIN_OBSERVATIONS: usize = 50;
/// Fitted components closer than this in mean are flagged as weakly
/// separated. Method-of-moments EM on planted unimodal Beta(4,4) data
/// settles at a component-mean gap of 0.13-0.16 (the best-likelihood point
/// on the EM path), while genuinely bimodal loss data fits well above 0.5,
/// so 0.2 cleanly separates the two regimes.
pub const WEAK_SEPARATION_GAP: f64 = 0.2;

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("empty loss ledger")]
    EmptyLedger,
    #[error("degenerate ledger: all {count} losses equal {value}")]
    DegenerateLedger { value: f64, count: usize },
    #[error("{got} observations, mixture fit needs at least {need}")]
    TooFewObservations { got: usize, need: usize },
    #[error("cell ({sample}, {annotator}) already recorded this epoch")]
    DuplicateCell { sample: usize, annotator: usize },
    #[error("non-finite loss for cell ({sample}, {annotator})")]
    NonFiniteLoss { sample: usize, annotator: usize },
}

// ============================================================================
// Loss ledger
// ============================================================================

/// Per-epoch raw cross-entropy per annotated cell. Append-only; each cell is
/// written at most once per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLedger {
    epoch: usize,
    entries: BTreeMap<(usize, usize), f64>,
}

impl LossLedger {
    pub fn new(epoch: usize) -> Self {
        Self { epoch, entries: BTreeMap::new() }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn record(&mut self, sample: usize, annotator: usize, loss: f64) -> Result<(), MixtureError> {
        if !loss.is_finite() {
            return Err(MixtureError::NonFiniteLoss { sample, annotator });
        }
        if self.entries.insert((sample, annotator), loss).is_some() {
            return Err(MixtureError::DuplicateCell { sample, annotator });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Cells in key order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    /// `(sample, loss)` pairs for one annotator, ascending by sample.
    pub fn annotator_cells(&self, annotator: usize) -> Vec<(usize, f64)> {
        self.entries
            .iter()
            .filter(|(&(_, a), _)| a == annotator)
            .map(|(&(s, _), &v)| (s, v))
            .collect()
    }

    /// Distinct annotators present in the ledger, ascending.
    pub fn annotators(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.entries.keys().map(|&(_, a)| a).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Mean loss per sample, ascending by sample index.
    pub fn sample_means(&self) -> Vec<(usize, f64)> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (&(s, _), &v) in &self.entries {
            let e = sums.entry(s).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        sums.into_iter().map(|(s, (total, n))| (s, total / n as f64)).collect()
    }
}

// ============================================================================
// Normalization
// ============================================================================

/// Min-max normalization clamped into `[NORM_FLOOR, 1 − NORM_FLOOR]`. Output
/// order matches input order. All-equal inputs are an error: a mixture over
/// a point mass is undefined.
pub fn normalize_values(values: &[f64]) -> Result<Vec<f64>, MixtureError> {
    if values.is_empty() {
        return Err(MixtureError::EmptyLedger);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(MixtureError::DegenerateLedger { value: min, count: values.len() });
    }
    let span = max - min;
    Ok(values
        .iter()
        .map(|&v| ((v - min) / span).clamp(NORM_FLOOR, 1.0 - NORM_FLOOR))
        .collect())
}

/// Ledger-wide normalization, in ledger key order.
pub fn normalize_losses(ledger: &LossLedger) -> Result<Vec<f64>, MixtureError> {
    let values: Vec<f64> = ledger.iter().map(|(_, v)| v).collect();
    normalize_values(&values)
}

// ============================================================================
// Mixture parameters
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureFamily {
    Beta,
    Gaussian,
}

impl std::str::FromStr for MixtureFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "beta" => Ok(MixtureFamily::Beta),
            "gaussian" => Ok(MixtureFamily::Gaussian),
            _ => Err(format!("unknown mixture family {s:?} (expected beta or gaussian)")),
        }
    }
}

/// One mixture component. Beta components are parameterized by shapes,
/// Gaussian components by mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum Component {
    Beta { alpha: f64, beta: f64 },
    Gaussian { mean: f64, sd: f64 },
}

impl Component {
    pub fn mean(&self) -> f64 {
        match *self {
            Component::Beta { alpha, beta } => alpha / (alpha + beta),
            Component::Gaussian { mean, .. } => mean,
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let x = x.clamp(NORM_FLOOR, 1.0 - NORM_FLOOR);
        match *self {
            Component::Beta { alpha, beta } => {
                let ln_b = ln_gamma(alpha) + ln_gamma(beta) - ln_gamma(alpha + beta);
                (alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - ln_b
            }
            Component::Gaussian { mean, sd } => {
                let z = (x - mean) / sd;
                -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
        }
    }
}

/// A fitted two-component mixture. `component_low` has the smaller mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub component_low: Component,
    pub component_high: Component,
    /// Mixing weight of the high-loss component, in (0,1).
    pub mixing_pi: f64,
    pub iterations: usize,
    pub log_likelihood: f64,
    /// False when the fit hit `max_iter` while still improving.
    pub converged: bool,
    /// Component means closer than [`WEAK_SEPARATION_GAP`].
    pub weak_separation: bool,
    /// Accepted log-likelihood after each iteration; non-decreasing.
    pub ll_trail: Vec<f64>,
}

/// Posterior probability that `x` came from the high-loss component.
pub fn posterior_weight(mixture: &MixtureParams, x: f64) -> f64 {
    let lo = (1.0 - mixture.mixing_pi).ln() + mixture.component_low.ln_pdf(x);
    let hi = mixture.mixing_pi.ln() + mixture.component_high.ln_pdf(x);
    1.0 / (1.0 + (lo - hi).exp())
}

/// Posterior probability of the low-loss component; complements
/// [`posterior_weight`] exactly.
pub fn posterior_low(mixture: &MixtureParams, x: f64) -> f64 {
    1.0 - posterior_weight(mixture, x)
}

// ============================================================================
// EM fit
// ============================================================================

const SHAPE_MIN: f64 = 1e-3;
const SHAPE_MAX: f64 = 1e5;
const SD_MIN: f64 = 1e-3;
const PI_FLOOR: f64 = 1e-6;

fn weighted_moments(values: &[f64], weights: &[f64]) -> Option<(f64, f64)> {
    let total: f64 = weights.iter().sum();
    if total < 1e-12 {
        return None;
    }
    let mean = values.iter().zip(weights).map(|(&x, &u)| u * x).sum::<f64>() / total;
    let var =
        values.iter().zip(weights).map(|(&x, &u)| u * (x - mean) * (x - mean)).sum::<f64>()
            / total;
    Some((mean, var))
}

fn moment_component(family: MixtureFamily, mean: f64, var: f64) -> Component {
    match family {
        MixtureFamily::Beta => {
            let mean = mean.clamp(NORM_FLOOR, 1.0 - NORM_FLOOR);
            // keep variance below the Bernoulli bound so shapes stay positive
            let var = var.clamp(1e-10, mean * (1.0 - mean) * (1.0 - 1e-6));
            let t = mean * (1.0 - mean) / var - 1.0;
            Component::Beta {
                alpha: (mean * t).clamp(SHAPE_MIN, SHAPE_MAX),
                beta: ((1.0 - mean) * t).clamp(SHAPE_MIN, SHAPE_MAX),
            }
        }
        MixtureFamily::Gaussian => Component::Gaussian {
            mean,
            sd: var.max(0.0).sqrt().max(SD_MIN),
        },
    }
}

fn log_likelihood(values: &[f64], low: &Component, high: &Component, pi_high: f64) -> f64 {
    let ln_pl = (1.0 - pi_high).ln();
    let ln_ph = pi_high.ln();
    values
        .iter()
        .map(|&x| {
            let a = ln_pl + low.ln_pdf(x);
            let b = ln_ph + high.ln_pdf(x);
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        })
        .sum()
}

/// Fits a two-component mixture to normalized losses by EM.
///
/// Responsibilities are seeded by thresholding at the median. M-steps use
/// weighted method of moments, which is not an exact MLE ascent step, so the
/// loop keeps the best parameters seen and stops (reverting) if a step would
/// lower the log-likelihood — the reported trail is non-decreasing. Hitting
/// `max_iter` while still improving clears the `converged` flag.
pub fn fit_mixture_em(
    values: &[f64],
    family: MixtureFamily,
    max_iter: usize,
    tol: f64,
) -> Result<MixtureParams, MixtureError> {
    if values.len() < MIN_OBSERVATIONS {
        return Err(MixtureError::TooFewObservations {
            got: values.len(),
            need: MIN_OBSERVATIONS,
        });
    }
    let values: Vec<f64> =
        values.iter().map(|&v| v.clamp(NORM_FLOOR, 1.0 - NORM_FLOOR)).collect();
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Err(MixtureError::DegenerateLedger { value: min, count: values.len() });
    }

    // initial responsibilities of the high component: above-median → 1
    let mut sorted = values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let median = sorted[sorted.len() / 2];
    let mut resp: Vec<f64> = values.iter().map(|&v| if v > median { 1.0 } else { 0.0 }).collect();
    let high_count = resp.iter().filter(|&&r| r > 0.5).count();
    if high_count == 0 || high_count == values.len() {
        // ties collapsed one side; split by rank instead
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite"));
        for (rank, &i) in order.iter().enumerate() {
            resp[i] = if rank >= values.len() / 2 { 1.0 } else { 0.0 };
        }
    }

    let mut low = moment_component(family, 0.25, 0.02);
    let mut high = moment_component(family, 0.75, 0.02);
    let mut best: Option<(Component, Component, f64, f64)> = None;
    let mut trail: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=max_iter {
        iterations = iter;
        // M-step
        let resp_low: Vec<f64> = resp.iter().map(|&r| 1.0 - r).collect();
        if let Some((m, v)) = weighted_moments(&values, &resp_low) {
            low = moment_component(family, m, v);
        }
        if let Some((m, v)) = weighted_moments(&values, &resp) {
            high = moment_component(family, m, v);
        }
        let pi_high = (resp.iter().sum::<f64>() / values.len() as f64)
            .clamp(PI_FLOOR, 1.0 - PI_FLOOR);

        let ll = log_likelihood(&values, &low, &high, pi_high);
        if let Some((_, _, _, best_ll)) = best {
            if ll < best_ll - 1e-12 {
                // method-of-moments step overshot; keep the best fit
                converged = true;
                break;
            }
            if (ll - best_ll).abs() < tol * best_ll.abs().max(1.0) {
                best = Some((low, high, pi_high, ll));
                trail.push(ll);
                converged = true;
                break;
            }
        }
        best = Some((low, high, pi_high, ll));
        trail.push(ll);

        // E-step
        let ln_pl = (1.0 - pi_high).ln();
        let ln_ph = pi_high.ln();
        for (r, &x) in resp.iter_mut().zip(&values) {
            let a = ln_pl + low.ln_pdf(x);
            let b = ln_ph + high.ln_pdf(x);
            *r = 1.0 / (1.0 + (a - b).exp());
        }
    }

    let (mut low, mut high, mut pi_high, ll) = best.expect("at least one iteration");
    debug_assert!(trail.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    if low.mean() > high.mean() {
        std::mem::swap(&mut low, &mut high);
        pi_high = 1.0 - pi_high;
    }
    let weak_separation = (high.mean() - low.mean()).abs() < WEAK_SEPARATION_GAP;
    Ok(MixtureParams {
        component_low: low,
        component_high: high,
        mixing_pi: pi_high,
        iterations,
        log_likelihood: ll,
        converged,
        weak_separation,
        ll_trail: trail,
    })
}

// ============================================================================
// Epoch-level fit: correction weights
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureScope {
    /// One fit per annotator; weights keyed by cell.
    PerAnnotator,
    /// One fit over per-sample mean losses; one shared weight per sample.
    Global,
}

impl std::str::FromStr for MixtureScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per_annotator" => Ok(MixtureScope::PerAnnotator),
            "global" => Ok(MixtureScope::Global),
            _ => Err(format!("unknown mixture scope {s:?} (expected per_annotator or global)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub scope: MixtureScope,
    pub family: MixtureFamily,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            scope: MixtureScope::PerAnnotator,
            family: MixtureFamily::Beta,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackReason {
    TooFewObservations,
    DegenerateLosses,
}

/// Outcome of one mixture fit (per annotator, or the single global fit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    /// `None` for the global fit.
    pub annotator: Option<usize>,
    pub observations: usize,
    pub mixture: Option<MixtureParams>,
    /// Set when the fit fell back to `w = 0`.
    pub fallback: Option<FallbackReason>,
}

/// One epoch's fitted correction weights plus per-fit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochFit {
    pub epoch: usize,
    pub scope: MixtureScope,
    pub family: MixtureFamily,
    pub weights: CorrectionWeights,
    pub fits: Vec<FitOutcome>,
}

impl EpochFit {
    pub fn any_fitted(&self) -> bool {
        self.fits.iter().any(|f| f.mixture.is_some())
    }

    pub fn any_fallback(&self) -> bool {
        self.fits.iter().any(|f| f.fallback.is_some())
    }

    pub fn any_weak_separation(&self) -> bool {
        self.fits
            .iter()
            .any(|f| f.mixture.as_ref().is_some_and(|m| m.weak_separation))
    }
}

/// Fits the configured mixture(s) over a completed epoch's ledger and turns
/// posteriors into correction weights. Fit failures (too few observations,
/// degenerate losses) fall back to `w = 0` for the affected cells instead of
/// erroring.
pub fn fit_correction_weights(
    ledger: &LossLedger,
    num_samples: usize,
    options: &FitOptions,
) -> Result<EpochFit, MixtureError> {
    if ledger.is_empty() {
        return Err(MixtureError::EmptyLedger);
    }
    let mut fits = Vec::new();
    let weights = match options.scope {
        MixtureScope::PerAnnotator => {
            let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
            for annotator in ledger.annotators() {
                let cells = ledger.annotator_cells(annotator);
                let raw: Vec<f64> = cells.iter().map(|&(_, v)| v).collect();
                let fitted = normalize_values(&raw).and_then(|normalized| {
                    fit_mixture_em(&normalized, options.family, options.max_iter, options.tol)
                        .map(|m| (normalized, m))
                });
                match fitted {
                    Ok((normalized, mixture)) => {
                        for (&(sample, _), &x) in cells.iter().zip(&normalized) {
                            map.insert((sample, annotator), posterior_weight(&mixture, x));
                        }
                        fits.push(FitOutcome {
                            annotator: Some(annotator),
                            observations: cells.len(),
                            mixture: Some(mixture),
                            fallback: None,
                        });
                    }
                    Err(err) => {
                        for &(sample, _) in &cells {
                            map.insert((sample, annotator), 0.0);
                        }
                        fits.push(FitOutcome {
                            annotator: Some(annotator),
                            observations: cells.len(),
                            mixture: None,
                            fallback: Some(fallback_reason(err)),
                        });
                    }
                }
            }
            CorrectionWeights::PerCell(map)
        }
        MixtureScope::Global => {
            let means = ledger.sample_means();
            let raw: Vec<f64> = means.iter().map(|&(_, v)| v).collect();
            let fitted = normalize_values(&raw).and_then(|normalized| {
                fit_mixture_em(&normalized, options.family, options.max_iter, options.tol)
                    .map(|m| (normalized, m))
            });
            match fitted {
                Ok((normalized, mixture)) => {
                    let mut ws = vec![0.0; num_samples];
                    for (&(sample, _), &x) in means.iter().zip(&normalized) {
                        ws[sample] = posterior_weight(&mixture, x);
                    }
                    fits.push(FitOutcome {
                        annotator: None,
                        observations: means.len(),
                        mixture: Some(mixture),
                        fallback: None,
                    });
                    CorrectionWeights::PerSample(ws)
                }
                Err(err) => {
                    fits.push(FitOutcome {
                        annotator: None,
                        observations: means.len(),
                        mixture: None,
                        fallback: Some(fallback_reason(err)),
                    });
                    CorrectionWeights::PerSample(vec![0.0; num_samples])
                }
            }
        }
    };
    Ok(EpochFit { epoch: ledger.epoch(), scope: options.scope, family: options.family, weights, fits })
}

fn fallback_reason(err: MixtureError) -> FallbackReason {
    match err {
        MixtureError::TooFewObservations { .. } => FallbackReason::TooFewObservations,
        _ => FallbackReason::DegenerateLosses,
    }
}

// ============================================================================
// Agree/disagree split and histogram export
// ============================================================================

/// Cell-level split by correction weight: `w < 0.5` is "agree" (the model
/// trusts the annotation), `w ≥ 0.5` is "disagree".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub total_cells: usize,
    pub agree_count: usize,
    pub disagree_count: usize,
    pub agree_frac: f64,
    pub disagree_frac: f64,
    /// Within agree cells, fraction whose annotation equals the sample's
    /// majority label. `None` when the side is empty.
    pub agree_majority_frac: Option<f64>,
    pub disagree_majority_frac: Option<f64>,
}

pub fn agree_disagree_split(
    ledger: &LossLedger,
    weights: &CorrectionWeights,
    annotations: &AnnotationMatrix,
    majorities: &[Majority],
) -> SplitReport {
    let mut agree = 0usize;
    let mut disagree = 0usize;
    let mut agree_majority = 0usize;
    let mut disagree_majority = 0usize;
    for ((sample, annotator), _) in ledger.iter() {
        let w = weights.get(sample, annotator);
        let label = annotations.get(sample, annotator).expect("ledger cell is annotated");
        let conforms = label == majorities[sample].class;
        if w < 0.5 {
            agree += 1;
            agree_majority += conforms as usize;
        } else {
            disagree += 1;
            disagree_majority += conforms as usize;
        }
    }
    let total = agree + disagree;
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    SplitReport {
        total_cells: total,
        agree_count: agree,
        disagree_count: disagree,
        agree_frac: frac(agree, total),
        disagree_frac: frac(disagree, total),
        agree_majority_frac: (agree > 0).then(|| frac(agree_majority, agree)),
        disagree_majority_frac: (disagree > 0).then(|| frac(disagree_majority, disagree)),
    }
}

pub const HISTOGRAM_BINS: usize = 50;

/// One histogram bin for one annotator (or the all-annotator aggregate when
/// `annotator` is `None`), over normalized losses in `[0,1]`. Counts are
/// split by whether the cell's annotation matches the sample's majority
/// label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub annotator: Option<usize>,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub majority_count: usize,
    pub minority_count: usize,
}

/// Fixed-width 50-bin histograms of normalized losses: one set of rows per
/// annotator (normalized within the annotator, matching the per-annotator
/// fits) plus an aggregate normalized over the whole ledger. Annotators with
/// degenerate losses are skipped; a fully degenerate ledger is an error.
pub fn loss_histogram(
    ledger: &LossLedger,
    annotations: &AnnotationMatrix,
    majorities: &[Majority],
) -> Result<Vec<HistogramRow>, MixtureError> {
    if ledger.is_empty() {
        return Err(MixtureError::EmptyLedger);
    }
    let mut rows = Vec::new();
    let bin_of = |x: f64| ((x * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
    let mut emit = |annotator: Option<usize>, cells: &[(usize, usize)], normalized: &[f64]| {
        let mut majority = vec![0usize; HISTOGRAM_BINS];
        let mut minority = vec![0usize; HISTOGRAM_BINS];
        for (&(sample, a), &x) in cells.iter().zip(normalized) {
            let label = annotations.get(sample, a).expect("ledger cell is annotated");
            let bin = bin_of(x);
            if label == majorities[sample].class {
                majority[bin] += 1;
            } else {
                minority[bin] += 1;
            }
        }
        for bin in 0..HISTOGRAM_BINS {
            rows.push(HistogramRow {
                annotator,
                bin,
                lo: bin as f64 / HISTOGRAM_BINS as f64,
                hi: (bin + 1) as f64 / HISTOGRAM_BINS as f64,
                majority_count: majority[bin],
                minority_count: minority[bin],
            });
        }
    };

    for annotator in ledger.annotators() {
        let cells = ledger.annotator_cells(annotator);
        let raw: Vec<f64> = cells.iter().map(|&(_, v)| v).collect();
        if let Ok(normalized) = normalize_values(&raw) {
            let keys: Vec<(usize, usize)> = cells.iter().map(|&(s, _)| (s, annotator)).collect();
            emit(Some(annotator), &keys, &normalized);
        }
    }
    let keys: Vec<(usize, usize)> = ledger.iter().map(|(k, _)| k).collect();
    let raw: Vec<f64> = ledger.iter().map(|(_, v)| v).collect();
    let normalized = normalize_values(&raw)?;
    emit(None, &keys, &normalized);
    Ok(rows)
}
