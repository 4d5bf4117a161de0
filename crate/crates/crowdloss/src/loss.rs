//! Loss functions and regularizers.
//!
//! All probabilities are clamped to `[PROB_FLOOR, 1]` before any logarithm,
//! so every loss value is finite. Per-annotator losses over sparse labels
//! always aggregate over *present* annotators; absent annotators contribute
//! nothing (the `MtNorm::Total` variant divides by the full head count
//! instead, which down-weights sparsely annotated samples).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probabilities are clamped to at least this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("correction weight {w} outside [0,1]")]
    WeightOutOfRange { w: f64 },
    #[error("psi must be finite and >= 0 (got {psi})")]
    BadPsi { psi: f64 },
    #[error("coefficient {name} must be finite and >= 0 (got {value})")]
    BadCoefficient { name: &'static str, value: f64 },
    #[error("no present annotators")]
    NoPresentAnnotators,
    #[error("unknown mode {0:?} (expected baseline, baseline_lc, multitask, or multitask_lc)")]
    UnknownMode(String),
}

// ============================================================================
// Method arms and loss configuration
// ============================================================================

/// The four experimental arms. Baseline arms train a single head on the
/// majority label; multitask arms train one head per annotator. The `Lc`
/// variants blend each label with the network's own detached guess.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    BaselineLc,
    Multitask,
    MultitaskLc,
}

impl Mode {
    /// Whether this arm trains one head per annotator.
    pub fn is_multitask(self) -> bool {
        matches!(self, Mode::Multitask | Mode::MultitaskLc)
    }

    /// Whether this arm applies loss-based label correction.
    pub fn uses_correction(self) -> bool {
        matches!(self, Mode::BaselineLc | Mode::MultitaskLc)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::BaselineLc => "baseline_lc",
            Mode::Multitask => "multitask",
            Mode::MultitaskLc => "multitask_lc",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "baseline" | "ce_majority" => Ok(Mode::Baseline),
            "baseline_lc" | "ce_majority_lc" => Ok(Mode::BaselineLc),
            "multitask" | "mt" => Ok(Mode::Multitask),
            "multitask_lc" | "mt_lc" => Ok(Mode::MultitaskLc),
            _ => Err(LossError::UnknownMode(s.to_string())),
        }
    }
}

/// Where correction weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// A constant weight for every annotated cell.
    Fixed(f64),
    /// Posterior weights from the per-epoch mixture fit.
    Mixture,
}

/// How the multitask mean is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtNorm {
    /// Divide by the number of present annotators (default).
    Present,
    /// Divide by the total head count, down-weighting sparse samples.
    Total,
}

impl FromStr for MtNorm {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "present" => Ok(MtNorm::Present),
            "total" => Ok(MtNorm::Total),
            _ => Err(LossError::UnknownMode(s.to_string())),
        }
    }
}

/// Full loss configuration for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub mode: Mode,
    /// Scale on the guess term of the corrected loss.
    pub psi: f64,
    /// Scale on the entropy penalty; the penalty itself is active only
    /// during warm-up epochs.
    pub entropy_penalty_coeff: f64,
    pub class_balance_coeff: f64,
    pub weight_source: WeightSource,
    pub mt_norm: MtNorm,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            mode: Mode::MultitaskLc,
            psi: 0.5,
            entropy_penalty_coeff: 0.1,
            class_balance_coeff: 1.0,
            weight_source: WeightSource::Mixture,
            mt_norm: MtNorm::Present,
        }
    }
}

impl LossSpec {
    pub fn validate(&self) -> Result<(), LossError> {
        if !self.psi.is_finite() || self.psi < 0.0 {
            return Err(LossError::BadPsi { psi: self.psi });
        }
        let coeffs = [
            ("entropy_penalty_coeff", self.entropy_penalty_coeff),
            ("class_balance_coeff", self.class_balance_coeff),
        ];
        for (name, value) in coeffs {
            if !value.is_finite() || value < 0.0 {
                return Err(LossError::BadCoefficient { name, value });
            }
        }
        if let WeightSource::Fixed(w) = self.weight_source {
            check_weight(w)?;
        }
        Ok(())
    }
}

// ============================================================================
// Correction weights
// ============================================================================

/// Per-cell blend weights in `[0,1]`: 0 trusts the annotation, 1 trusts the
/// network's own guess.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CorrectionWeights {
    /// One weight for every cell (warm-up uses `Uniform(0.0)`).
    Uniform(f64),
    /// One weight per sample, shared by all of its annotators (global
    /// mixture scope).
    PerSample(Vec<f64>),
    /// One weight per annotated `(sample, annotator)` cell (per-annotator
    /// mixture scope). Missing cells fall back to 0.
    PerCell(BTreeMap<(usize, usize), f64>),
}

impl CorrectionWeights {
    pub fn get(&self, sample: usize, annotator: usize) -> f64 {
        match self {
            CorrectionWeights::Uniform(w) => *w,
            CorrectionWeights::PerSample(ws) => ws.get(sample).copied().unwrap_or(0.0),
            CorrectionWeights::PerCell(map) => {
                map.get(&(sample, annotator)).copied().unwrap_or(0.0)
            }
        }
    }

    /// Largest weight stored (0 for empty containers).
    pub fn max_weight(&self) -> f64 {
        match self {
            CorrectionWeights::Uniform(w) => *w,
            CorrectionWeights::PerSample(ws) => ws.iter().copied().fold(0.0, f64::max),
            CorrectionWeights::PerCell(map) => map.values().copied().fold(0.0, f64::max),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        match self {
            CorrectionWeights::Uniform(w) => check_weight(*w),
            CorrectionWeights::PerSample(ws) => ws.iter().try_for_each(|&w| check_weight(w)),
            CorrectionWeights::PerCell(map) => {
                map.values().try_for_each(|&w| check_weight(w))
            }
        }
    }
}

fn check_weight(w: f64) -> Result<(), LossError> {
    if (0.0..=1.0).contains(&w) {
        Ok(())
    } else {
        Err(LossError::WeightOutOfRange { w })
    }
}

// ============================================================================
// Core losses
// ============================================================================

fn ln_clamped(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0).ln()
}

/// `−Σ_m target_m · ln p_m`, with `p` clamped before the log. `target` may be
/// any distribution (one-hot labels or a detached guess).
pub fn cross_entropy(p: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), target.len());
    -p.iter().zip(target).map(|(&pm, &tm)| tm * ln_clamped(pm)).sum::<f64>()
}

/// One-hot vector for a class label.
pub fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; num_classes];
    y[class] = 1.0;
    y
}

/// Cross-entropy against a hard class label.
pub fn loss_ce(p: &[f64], class: usize) -> f64 {
    -ln_clamped(p[class])
}

/// Shannon entropy (natural log) of a clamped distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&pm| pm * ln_clamped(pm)).sum::<f64>()
}

/// Multitask loss: mean cross-entropy over present annotators.
///
/// `p_all[a]` is head `a`'s output row; `y_all[a]` is its class label or
/// `None` when annotator `a` did not label this sample.
pub fn loss_mt(
    p_all: &[Vec<f64>],
    y_all: &[Option<usize>],
    norm: MtNorm,
) -> Result<f64, LossError> {
    debug_assert_eq!(p_all.len(), y_all.len());
    let mut total = 0.0;
    let mut present = 0usize;
    for (p, y) in p_all.iter().zip(y_all) {
        if let Some(class) = y {
            total += loss_ce(p, *class);
            present += 1;
        }
    }
    if present == 0 {
        return Err(LossError::NoPresentAnnotators);
    }
    let denom = match norm {
        MtNorm::Present => present,
        MtNorm::Total => p_all.len(),
    };
    Ok(total / denom as f64)
}

/// Snapshots probability rows as constants for differentiation. Gradient
/// code must treat the returned rows as fixed targets, never as functions of
/// the parameters.
pub fn detach_guess(p_all: &[Vec<f64>]) -> Vec<Vec<f64>> {
    p_all.to_vec()
}

/// Single-head corrected loss:
/// `(1−w)·CE(p, y) + w·(−Σ_m z_m ln p_m)` with `z` detached.
pub fn loss_lc(p: &[f64], y_class: usize, z: &[f64], w: f64) -> Result<f64, LossError> {
    check_weight(w)?;
    Ok((1.0 - w) * loss_ce(p, y_class) + w * cross_entropy(p, z))
}

/// Multitask corrected loss with per-annotator weights already resolved:
/// mean over present annotators of `(1−w_a)·CE(p_a, y_a) + ψ·w_a·CE(p_a, z_a)`.
pub fn loss_mlc_terms(
    p_all: &[Vec<f64>],
    y_all: &[Option<usize>],
    z_all: &[Vec<f64>],
    w_all: &[f64],
    psi: f64,
    norm: MtNorm,
) -> Result<f64, LossError> {
    if !psi.is_finite() || psi < 0.0 {
        return Err(LossError::BadPsi { psi });
    }
    debug_assert_eq!(p_all.len(), y_all.len());
    debug_assert_eq!(p_all.len(), z_all.len());
    debug_assert_eq!(p_all.len(), w_all.len());
    let mut total = 0.0;
    let mut present = 0usize;
    for a in 0..p_all.len() {
        let Some(class) = y_all[a] else { continue };
        let w = w_all[a];
        check_weight(w)?;
        total += (1.0 - w) * loss_ce(&p_all[a], class)
            + psi * w * cross_entropy(&p_all[a], &z_all[a]);
        present += 1;
    }
    if present == 0 {
        return Err(LossError::NoPresentAnnotators);
    }
    let denom = match norm {
        MtNorm::Present => present,
        MtNorm::Total => p_all.len(),
    };
    Ok(total / denom as f64)
}

/// Multitask corrected loss with weights looked up from the weight store for
/// one sample.
pub fn loss_mlc(
    p_all: &[Vec<f64>],
    y_all: &[Option<usize>],
    z_all: &[Vec<f64>],
    weights: &CorrectionWeights,
    sample: usize,
    psi: f64,
    norm: MtNorm,
) -> Result<f64, LossError> {
    let w_all: Vec<f64> = (0..p_all.len()).map(|a| weights.get(sample, a)).collect();
    loss_mlc_terms(p_all, y_all, z_all, &w_all, psi, norm)
}

// ============================================================================
// Regularizers
// ============================================================================

/// Confidence penalty: `−mean_a H(p_a)` over the given rows (callers pass
/// present-annotator rows only). Adding this to the loss pushes entropy up.
pub fn entropy_penalty(rows: &[&[f64]]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    -rows.iter().map(|p| entropy(p)).sum::<f64>() / rows.len() as f64
}

/// Class-balance regularizer: mean over heads of `KL(uniform ‖ p̄)` where
/// `p̄` is that head's batch-mean output. Callers pass active heads only.
pub fn class_balance_reg(batch_mean_p: &[Vec<f64>]) -> f64 {
    if batch_mean_p.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for mean_p in batch_mean_p {
        let m = mean_p.len() as f64;
        let u = 1.0 / m;
        total += mean_p
            .iter()
            .map(|&pm| u * (u / pm.clamp(PROB_FLOOR, 1.0)).ln())
            .sum::<f64>();
    }
    total / batch_mean_p.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ce_one_hot_match_is_zero() {
        assert_eq!(loss_ce(&[0.0, 1.0], 1), 0.0);
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn ce_uniform_binary_is_ln2() {
        assert_abs_diff_eq!(loss_ce(&[0.5, 0.5], 0), 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn ce_hand_value() {
        let v = loss_ce(&[0.8, 0.2], 0);
        assert_abs_diff_eq!(v, -(0.8f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.2231, epsilon = 5e-5);
    }

    #[test]
    fn ce_clamps_zero_probability() {
        let v = loss_ce(&[0.0, 1.0], 0);
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, -(PROB_FLOOR.ln()), epsilon = 1e-9);
    }

    #[test]
    fn mt_single_annotator_reduces_to_ce() {
        let p = vec![vec![0.8, 0.2]];
        let y = vec![Some(0usize)];
        let mt = loss_mt(&p, &y, MtNorm::Present).expect("present");
        assert_eq!(mt, loss_ce(&p[0], 0));
    }

    #[test]
    fn mt_mean_and_masking() {
        let p = vec![vec![0.8, 0.2], vec![0.5, 0.5], vec![0.9, 0.1]];
        let y2 = vec![Some(0usize), Some(0), None];
        let got = loss_mt(&p, &y2, MtNorm::Present).expect("present");
        let want = (-(0.8f64.ln()) + 2f64.ln()) / 2.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 0.4581, epsilon = 5e-5);
        // absent annotator leaves the value unchanged
        let y3 = vec![Some(0usize), Some(0)];
        let p3 = &p[..2];
        assert_eq!(loss_mt(p3, &y3, MtNorm::Present).expect("present"), got);
    }

    #[test]
    fn mt_total_norm_divides_by_head_count() {
        let p = vec![vec![0.8, 0.2], vec![0.5, 0.5], vec![0.9, 0.1]];
        let y = vec![Some(0usize), Some(0), None];
        let got = loss_mt(&p, &y, MtNorm::Total).expect("present");
        let want = (-(0.8f64.ln()) + 2f64.ln()) / 3.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
    }

    #[test]
    fn mt_no_present_annotators_errors() {
        let p = vec![vec![0.5, 0.5]];
        let y = vec![None];
        assert!(matches!(
            loss_mt(&p, &y, MtNorm::Present),
            Err(LossError::NoPresentAnnotators)
        ));
    }

    #[test]
    fn detach_copies_rows() {
        let p = vec![vec![0.3, 0.7], vec![0.6, 0.4]];
        let z = detach_guess(&p);
        assert_eq!(p, z);
        for row in &z {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn lc_weight_zero_is_plain_ce() {
        let p = [0.8, 0.2];
        let z = [0.6, 0.4];
        let got = loss_lc(&p, 0, &z, 0.0).expect("valid w");
        assert_eq!(got, loss_ce(&p, 0));
    }

    #[test]
    fn lc_weight_one_self_guess_is_entropy() {
        let p = [0.8, 0.2];
        let got = loss_lc(&p, 0, &p, 1.0).expect("valid w");
        assert_abs_diff_eq!(got, entropy(&p), epsilon = 1e-15);
    }

    #[test]
    fn lc_blend_hand_value() {
        // 0.5·(−ln 0.8) + 0.5·H([0.8, 0.2])
        let h = -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln());
        assert_abs_diff_eq!(h, 0.5004, epsilon = 5e-5);
        let want = 0.5 * -(0.8f64.ln()) + 0.5 * h;
        let got = loss_lc(&[0.8, 0.2], 0, &[0.8, 0.2], 0.5).expect("valid w");
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 0.3617, epsilon = 1e-4);
    }

    #[test]
    fn lc_rejects_out_of_range_weight() {
        assert!(loss_lc(&[0.5, 0.5], 0, &[0.5, 0.5], 1.5).is_err());
        assert!(loss_lc(&[0.5, 0.5], 0, &[0.5, 0.5], -0.1).is_err());
    }

    fn three_head_fixture() -> (Vec<Vec<f64>>, Vec<Option<usize>>, Vec<Vec<f64>>) {
        let p = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.55, 0.45]];
        let y = vec![Some(0usize), Some(1), None];
        let z = vec![vec![0.7, 0.3], vec![0.4, 0.6], vec![0.5, 0.5]];
        (p, y, z)
    }

    #[test]
    fn mlc_zero_weights_equal_mt() {
        let (p, y, z) = three_head_fixture();
        let w = vec![0.0; 3];
        let got = loss_mlc_terms(&p, &y, &z, &w, 0.5, MtNorm::Present).expect("ok");
        let want = loss_mt(&p, &y, MtNorm::Present).expect("ok");
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
    }

    #[test]
    fn mlc_psi_zero_removes_guess_term() {
        let (p, y, z) = three_head_fixture();
        let w = vec![0.25, 0.75, 0.5];
        let got = loss_mlc_terms(&p, &y, &z, &w, 0.0, MtNorm::Present).expect("ok");
        let want = ((1.0 - 0.25) * loss_ce(&p[0], 0) + (1.0 - 0.75) * loss_ce(&p[1], 1)) / 2.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
    }

    #[test]
    fn mlc_full_weight_psi_one_is_mean_guess_term() {
        let (p, y, z) = three_head_fixture();
        let w = vec![1.0; 3];
        let got = loss_mlc_terms(&p, &y, &z, &w, 1.0, MtNorm::Present).expect("ok");
        let want = (cross_entropy(&p[0], &z[0]) + cross_entropy(&p[1], &z[1])) / 2.0;
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
    }

    #[test]
    fn mlc_single_head_psi_one_matches_lc() {
        let p = vec![vec![0.8, 0.2]];
        let y = vec![Some(0usize)];
        let z = vec![vec![0.6, 0.4]];
        for &w in &[0.0, 0.3, 0.7, 1.0] {
            let mlc =
                loss_mlc_terms(&p, &y, &z, &[w], 1.0, MtNorm::Present).expect("ok");
            let lc = loss_lc(&p[0], 0, &z[0], w).expect("ok");
            assert_abs_diff_eq!(mlc, lc, epsilon = 1e-12);
        }
    }

    #[test]
    fn mlc_affine_in_each_weight() {
        let (p, y, z) = three_head_fixture();
        let at = |w0: f64| {
            loss_mlc_terms(&p, &y, &z, &[w0, 0.4, 0.0], 0.7, MtNorm::Present).expect("ok")
        };
        let (l0, l1, l2) = (at(0.0), at(0.5), at(1.0));
        // midpoint of an affine function is the mean of the endpoints
        assert_abs_diff_eq!(l1, (l0 + l2) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn mlc_weight_lookup_matches_resolved_terms() {
        let (p, y, z) = three_head_fixture();
        let mut map = BTreeMap::new();
        map.insert((7, 0), 0.2);
        map.insert((7, 1), 0.9);
        let weights = CorrectionWeights::PerCell(map);
        let got = loss_mlc(&p, &y, &z, &weights, 7, 0.5, MtNorm::Present).expect("ok");
        let want =
            loss_mlc_terms(&p, &y, &z, &[0.2, 0.9, 0.0], 0.5, MtNorm::Present).expect("ok");
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
    }

    #[test]
    fn mlc_rejects_negative_psi() {
        let (p, y, z) = three_head_fixture();
        assert!(loss_mlc_terms(&p, &y, &z, &[0.0; 3], -0.1, MtNorm::Present).is_err());
    }

    #[test]
    fn entropy_penalty_values() {
        let uniform = [0.5, 0.5];
        let got = entropy_penalty(&[&uniform, &uniform]);
        assert_abs_diff_eq!(got, -(2f64.ln()), epsilon = 1e-12);
        let hot = [1.0, 0.0];
        assert_abs_diff_eq!(entropy_penalty(&[&hot]), 0.0, epsilon = 1e-12);
        assert_eq!(entropy_penalty(&[]), 0.0);
    }

    #[test]
    fn class_balance_zero_at_uniform() {
        let got = class_balance_reg(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert_abs_diff_eq!(got, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn class_balance_hand_value() {
        let got = class_balance_reg(&[vec![0.9, 0.1]]);
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert_abs_diff_eq!(got, want, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 0.5108, epsilon = 5e-5);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("baseline".parse::<Mode>().expect("ok"), Mode::Baseline);
        assert_eq!("baseline_lc".parse::<Mode>().expect("ok"), Mode::BaselineLc);
        assert_eq!("baseline+lc".parse::<Mode>().expect("ok"), Mode::BaselineLc);
        assert_eq!("ce_majority".parse::<Mode>().expect("ok"), Mode::Baseline);
        assert_eq!("multitask".parse::<Mode>().expect("ok"), Mode::Multitask);
        assert_eq!("mt".parse::<Mode>().expect("ok"), Mode::Multitask);
        assert_eq!("MT+LC".parse::<Mode>().expect("ok"), Mode::MultitaskLc);
        assert_eq!("multitask-lc".parse::<Mode>().expect("ok"), Mode::MultitaskLc);
        assert!("mystery".parse::<Mode>().is_err());
        for m in [Mode::Baseline, Mode::BaselineLc, Mode::Multitask, Mode::MultitaskLc] {
            assert_eq!(m.as_str().parse::<Mode>().expect("round trip"), m);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(LossSpec::default().validate().is_ok());
        let bad_psi = LossSpec { psi: -1.0, ..LossSpec::default() };
        assert!(bad_psi.validate().is_err());
        let bad_coeff =
            LossSpec { entropy_penalty_coeff: f64::NAN, ..LossSpec::default() };
        assert!(bad_coeff.validate().is_err());
        let bad_fixed =
            LossSpec { weight_source: WeightSource::Fixed(1.2), ..LossSpec::default() };
        assert!(bad_fixed.validate().is_err());
    }

    #[test]
    fn correction_weight_stores() {
        let u = CorrectionWeights::Uniform(0.3);
        assert_eq!(u.get(5, 2), 0.3);
        assert_eq!(u.max_weight(), 0.3);

        let per_sample = CorrectionWeights::PerSample(vec![0.1, 0.9]);
        assert_eq!(per_sample.get(1, 0), 0.9);
        assert_eq!(per_sample.get(1, 7), 0.9);
        assert_eq!(per_sample.get(99, 0), 0.0);
        assert_eq!(per_sample.max_weight(), 0.9);

        let mut map = BTreeMap::new();
        map.insert((0, 1), 0.6);
        let per_cell = CorrectionWeights::PerCell(map);
        assert_eq!(per_cell.get(0, 1), 0.6);
        assert_eq!(per_cell.get(0, 0), 0.0);
        assert!(per_cell.validate().is_ok());

        assert!(CorrectionWeights::Uniform(1.5).validate().is_err());
        assert!(CorrectionWeights::PerSample(vec![0.5, -0.2]).validate().is_err());
    }

    fn arb_simplex(m: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(1e-6f64..1.0, m).prop_map(|raw| {
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
    }

    proptest! {
        #[test]
        fn prop_losses_finite_and_nonneg(
            p in arb_simplex(3),
            z in arb_simplex(3),
            y in 0usize..3,
            w in 0.0f64..=1.0,
            psi in 0.0f64..4.0,
        ) {
            let ce = loss_ce(&p, y);
            prop_assert!(ce.is_finite() && ce >= 0.0);
            let lc = loss_lc(&p, y, &z, w).expect("valid w");
            prop_assert!(lc.is_finite() && lc >= 0.0);
            let mlc = loss_mlc_terms(
                &[p.clone()], &[Some(y)], &[z.clone()], &[w], psi, MtNorm::Present,
            ).expect("ok");
            prop_assert!(mlc.is_finite() && mlc >= 0.0);
        }

        #[test]
        fn prop_class_permutation_invariance(
            p in arb_simplex(3),
            z in arb_simplex(3),
            y in 0usize..3,
            w in 0.0f64..=1.0,
        ) {
            // rotate class indices by one
            let rot = |v: &[f64]| -> Vec<f64> { vec![v[2], v[0], v[1]] };
            let y_rot = (y + 1) % 3;
            let before = loss_lc(&p, y, &z, w).expect("ok");
            let after = loss_lc(&rot(&p), y_rot, &rot(&z), w).expect("ok");
            prop_assert!((before - after).abs() < 1e-12);
            let h_before = entropy(&p);
            let h_after = entropy(&rot(&p));
            prop_assert!((h_before - h_after).abs() < 1e-12);
        }

        #[test]
        fn prop_mlc_affine_collinearity(
            p in arb_simplex(2),
            z in arb_simplex(2),
            w_lo in 0.0f64..0.5,
            w_hi in 0.5f64..=1.0,
            psi in 0.0f64..3.0,
        ) {
            let at = |w: f64| loss_mlc_terms(
                &[p.clone()], &[Some(0)], &[z.clone()], &[w], psi, MtNorm::Present,
            ).expect("ok");
            let mid = (w_lo + w_hi) / 2.0;
            let lhs = at(mid);
            let rhs = (at(w_lo) + at(w_hi)) / 2.0;
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }
}
