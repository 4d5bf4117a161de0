//! Deterministic training loop: SGD with momentum and weight decay, a
//! warm-up phase (correction weights pinned to 0, entropy penalty on),
//! per-epoch mixture refits whose weights apply to the *next* epoch,
//! optional mixup, and the ψ-sweep driver.
//!
//! Epoch metric snapshots come from a full evaluation pass run after the
//! epoch's updates, so evaluating the saved checkpoint reproduces the final
//! history row exactly.

use std::time::Instant;

use rand::Rng;
use rand_distr::Distribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::loss::{CorrectionWeights, Mode, MtNorm};
use crate::metrics::{
    evaluate_model, EvalArtifacts, EvalOptions, MetricsError, MetricsReport, PrfAveraging,
    VarianceScope,
};
use crate::mixture::{FitOptions, MixtureFamily, MixtureScope};
use crate::model::{
    compute_gradients, init_model, Batch, BatchRow, LossPlan, MixPlan, ModelDims, ModelError,
    ModelParams,
};
use crate::rng::{self, tags};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize, history: TrainHistory },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

// ============================================================================
// Configuration
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixupMode {
    #[default]
    Off,
    /// Blend raw inputs (layer 0).
    Input,
    /// Blend a uniformly chosen hidden layer in {0..L} per batch.
    Manifold,
}

impl std::str::FromStr for MixupMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(MixupMode::Off),
            "input" => Ok(MixupMode::Input),
            "manifold" => Ok(MixupMode::Manifold),
            _ => Err(format!("unknown mixup mode {s:?} (expected off, input, or manifold)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrRamp {
    /// Constant learning rate throughout.
    #[default]
    Off,
    /// Scale by `epoch / warmup_epochs` during warm-up.
    Linear,
}

impl std::str::FromStr for LrRamp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "off" => Ok(LrRamp::Off),
            "linear" => Ok(LrRamp::Linear),
            _ => Err(format!("unknown lr ramp {s:?} (expected off or linear)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub psi: f64,
    pub mode: Mode,
    pub mixup: MixupMode,
    pub mixup_alpha: f64,
    pub mixture_scope: MixtureScope,
    pub mixture_family: MixtureFamily,
    pub mixture_max_iter: usize,
    pub mixture_tol: f64,
    pub mt_norm: MtNorm,
    pub entropy_penalty_coeff: f64,
    pub class_balance_coeff: f64,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub lr_ramp: LrRamp,
    pub averaging: PrfAveraging,
    pub variance_scope: VarianceScope,
    pub seed: u64,
    /// Seeds for sweep runs; empty means `[seed]`.
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            warmup_epochs: 2,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.01,
            batch_size: 64,
            psi: 0.5,
            mode: Mode::MultitaskLc,
            mixup: MixupMode::Off,
            mixup_alpha: 1.0,
            mixture_scope: MixtureScope::PerAnnotator,
            mixture_family: MixtureFamily::Beta,
            mixture_max_iter: 100,
            mixture_tol: 1e-6,
            mt_norm: MtNorm::Present,
            entropy_penalty_coeff: 0.1,
            class_balance_coeff: 1.0,
            hidden_dim: 32,
            encoder_layers: 2,
            lr_ramp: LrRamp::Off,
            averaging: PrfAveraging::Macro,
            variance_scope: VarianceScope::AllHeads,
            seed: 0,
            seeds: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive and finite", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative and finite", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.psi >= 0.0 && self.psi.is_finite()) {
            return bad(format!("psi {} must be non-negative and finite", self.psi));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return bad(format!("mixup_alpha {} must be positive and finite", self.mixup_alpha));
        }
        for (name, v) in [
            ("entropy_penalty_coeff", self.entropy_penalty_coeff),
            ("class_balance_coeff", self.class_balance_coeff),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} {v} must be non-negative and finite"));
            }
        }
        if self.hidden_dim == 0 || self.encoder_layers == 0 {
            return bad("hidden_dim and encoder_layers must be positive".into());
        }
        if self.mixture_max_iter == 0 {
            return bad("mixture_max_iter must be positive".into());
        }
        if !(self.mixture_tol >= 0.0 && self.mixture_tol.is_finite()) {
            return bad(format!("mixture_tol {} must be non-negative and finite", self.mixture_tol));
        }
        Ok(())
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            scope: self.mixture_scope,
            family: self.mixture_family,
            max_iter: self.mixture_max_iter,
            tol: self.mixture_tol,
        }
    }

    pub fn eval_options(&self, ledger_epoch: usize) -> EvalOptions {
        EvalOptions {
            averaging: self.averaging,
            variance_scope: self.variance_scope,
            fit: self.fit_options(),
            ledger_epoch,
        }
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() { vec![self.seed] } else { self.seeds.clone() }
    }
}

/// Learning rate for a 1-based epoch under the configured ramp.
pub fn effective_lr(config: &TrainConfig, epoch: usize) -> f64 {
    match config.lr_ramp {
        LrRamp::Off => config.learning_rate,
        LrRamp::Linear => {
            if config.warmup_epochs > 0 && epoch <= config.warmup_epochs {
                config.learning_rate * epoch as f64 / config.warmup_epochs as f64
            } else {
                config.learning_rate
            }
        }
    }
}

// ============================================================================
// SGD
// ============================================================================

/// Classic coupled momentum SGD: `v ← momentum·v + (grad + weight_decay·p)`,
/// `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    velocity: &mut ModelParams,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let layers = params
        .encoder
        .iter_mut()
        .chain(params.heads.iter_mut())
        .zip(grads.encoder.iter().chain(grads.heads.iter()))
        .zip(velocity.encoder.iter_mut().chain(velocity.heads.iter_mut()));
    for ((p, g), v) in layers {
        ndarray::Zip::from(&mut v.w).and(&g.w).and(&p.w).for_each(|v, &g, &p| {
            *v = momentum * *v + (g + weight_decay * p);
        });
        ndarray::Zip::from(&mut v.b).and(&g.b).and(&p.b).for_each(|v, &g, &p| {
            *v = momentum * *v + (g + weight_decay * p);
        });
        p.w.scaled_add(-lr, &v.w);
        p.b.scaled_add(-lr, &v.b);
    }
}

// ============================================================================
// History
// ============================================================================

/// Diagnostics of one post-epoch mixture refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDiagnostics {
    pub agree_frac: f64,
    pub disagree_frac: f64,
    /// Largest weight the new fit assigns.
    pub fitted_max_weight: f64,
    pub any_fitted: bool,
    pub any_fallback: bool,
    pub any_weak_separation: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean batch loss over the epoch's updates.
    pub mean_loss: f64,
    /// Full-pass snapshot taken after the epoch's updates.
    pub metrics: MetricsReport,
    /// Present from the end of warm-up onward.
    pub mixture: Option<MixtureDiagnostics>,
    /// Largest correction weight applied *during* this epoch (0 in warm-up).
    pub applied_max_weight: f64,
    /// Wall-clock seconds; ignored by equality.
    pub wall_clock_s: f64,
}

impl PartialEq for EpochRecord {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.mean_loss == other.mean_loss
            && self.metrics == other.metrics
            && self.mixture == other.mixture
            && self.applied_max_weight == other.applied_max_weight
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,loss,f1_majority,annotator_acc,pred_variance,\
agree_frac,accuracy,precision,recall,disagree_frac,applied_max_weight,fitted_max_weight,\
mixture_fallback,weak_separation";

fn push_opt(out: &mut String, value: Option<f64>) {
    out.push(',');
    if let Some(v) = value {
        out.push_str(&v.to_string());
    }
}

impl TrainHistory {
    /// Metric columns are percentages; `agree_frac`/`disagree_frac` and the
    /// weight columns stay in [0,1]. Mixture columns are empty before the
    /// first refit. Wall-clock time is deliberately not a column so that
    /// identical runs produce identical files.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(HISTORY_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let m = &r.metrics;
            out.push_str(&format!(
                "{},{},{},{}",
                r.epoch,
                r.mean_loss,
                100.0 * m.f1,
                100.0 * m.annotator_accuracy
            ));
            push_opt(&mut out, m.prediction_variance);
            push_opt(&mut out, r.mixture.as_ref().map(|d| d.agree_frac));
            out.push_str(&format!(
                ",{},{},{}",
                100.0 * m.accuracy,
                100.0 * m.precision,
                100.0 * m.recall
            ));
            push_opt(&mut out, r.mixture.as_ref().map(|d| d.disagree_frac));
            out.push_str(&format!(",{}", r.applied_max_weight));
            push_opt(&mut out, r.mixture.as_ref().map(|d| d.fitted_max_weight));
            push_opt(&mut out, r.mixture.as_ref().map(|d| (d.any_fallback as u8) as f64));
            push_opt(&mut out, r.mixture.as_ref().map(|d| (d.any_weak_separation as u8) as f64));
            out.push('\n');
        }
        out
    }
}

// ============================================================================
// Training loop
// ============================================================================

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: TrainHistory,
    /// The final epoch's full evaluation pass; re-evaluating the saved
    /// checkpoint reproduces `final_eval.report` exactly.
    pub final_eval: EvalArtifacts,
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let majority_view;
    let data = if config.mode.is_multitask() {
        dataset
    } else {
        majority_view = dataset.to_majority_view()?;
        &majority_view
    };
    let n = data.num_samples();
    if n == 0 {
        return Err(TrainError::Config("dataset has no samples".into()));
    }
    let num_annotators = data.num_annotators();
    let dims = ModelDims {
        input: data.feature_dim(),
        hidden: config.hidden_dim,
        classes: data.num_classes(),
        annotators: num_annotators,
        layers: config.encoder_layers,
    };
    let mut params = init_model(dims, config.seed);
    let mut velocity = ModelParams::zeros(dims);
    let zero_weights = CorrectionWeights::Uniform(0.0);
    let mut weights = zero_weights.clone();
    // detached self-guesses from a single evaluation round at the end of the
    // last pre-correction epoch, constant through the corrected phase; psi
    // scales how hard flagged cells are held to that state
    let mut guess_bank: Option<Vec<Vec<Vec<f64>>>> = None;
    let uses_correction = config.mode.uses_correction();

    let mut records: Vec<EpochRecord> = Vec::with_capacity(config.epochs);
    let mut final_eval: Option<EvalArtifacts> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let warm = epoch <= config.warmup_epochs;
        let applied: &CorrectionWeights =
            if warm || !uses_correction { &zero_weights } else { &weights };
        let applied_max_weight = applied.max_weight();
        let entropy_coeff = if warm { config.entropy_penalty_coeff } else { 0.0 };
        let lr = effective_lr(config, epoch);

        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut rng::stream(config.seed, &[tags::SHUFFLE, epoch as u64]), &mut order);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let rows: Vec<BatchRow> = chunk
                .iter()
                .map(|&s| {
                    let x = data.features.row(s).to_owned();
                    let guess = if applied_max_weight > 0.0 {
                        guess_bank.as_ref().map(|g| g[s].clone())
                    } else {
                        None
                    };
                    let labels =
                        (0..num_annotators).map(|a| data.annotations.get(s, a)).collect();
                    BatchRow { sample: s, x, labels, guess }
                })
                .collect();
            let mix = (config.mixup != MixupMode::Off).then(|| {
                let mut r = rng::stream(
                    config.seed,
                    &[tags::MIXUP, epoch as u64, batch_idx as u64],
                );
                let lambda = rand_distr::Beta::new(config.mixup_alpha, config.mixup_alpha)
                    .expect("validated alpha")
                    .sample(&mut r);
                let layer = match config.mixup {
                    MixupMode::Input => 0,
                    MixupMode::Manifold => r.random_range(0..=config.encoder_layers),
                    MixupMode::Off => unreachable!(),
                };
                let mut partner: Vec<usize> = (0..rows.len()).collect();
                rng::shuffle(&mut r, &mut partner);
                MixPlan { lambda, layer, partner }
            });
            let batch = Batch { rows, mix };
            let plan = LossPlan {
                weights: applied,
                psi: config.psi,
                mt_norm: config.mt_norm,
                entropy_coeff,
                class_balance_coeff: config.class_balance_coeff,
            };
            let (loss, grads) = compute_gradients(&params, &batch, &plan)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    batch: batch_idx,
                    history: TrainHistory { records },
                });
            }
            sgd_step(&mut params, &grads, &mut velocity, lr, config.momentum, config.weight_decay);
            loss_sum += loss;
            batches += 1;
        }

        // full-pass snapshot after this epoch's updates; post-warm-up
        // epochs feed their ledger to a refit whose weights apply from the
        // next epoch on (warm-up ledgers are skipped: the entropy penalty
        // keeps those losses artificially soft)
        let eval = evaluate_model(&params, data, &config.eval_options(epoch))?;
        let mixture = (epoch > config.warmup_epochs).then(|| {
            weights = eval.fit.weights.clone();
            if guess_bank.is_none() {
                guess_bank = Some(eval.probs.clone());
            }
            MixtureDiagnostics {
                agree_frac: eval.split.agree_frac,
                disagree_frac: eval.split.disagree_frac,
                fitted_max_weight: eval.fit.weights.max_weight(),
                any_fitted: eval.fit.any_fitted(),
                any_fallback: eval.fit.any_fallback(),
                any_weak_separation: eval.fit.any_weak_separation(),
            }
        });
        records.push(EpochRecord {
            epoch,
            mean_loss: loss_sum / batches as f64,
            metrics: eval.report.clone(),
            mixture,
            applied_max_weight,
            wall_clock_s: started.elapsed().as_secs_f64(),
        });
        final_eval = Some(eval);
    }

    Ok(TrainOutput {
        params,
        history: TrainHistory { records },
        final_eval: final_eval.expect("at least one epoch"),
    })
}

// ============================================================================
// ψ sweep
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub psi: f64,
    pub seed: u64,
    pub report: MetricsReport,
    pub agree_frac: f64,
    pub final_loss: f64,
}

/// Mean over seeds of the final-epoch metrics at one ψ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub psi: f64,
    pub num_seeds: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub annotator_accuracy: f64,
    pub prediction_variance: Option<f64>,
    pub agree_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SweepRow>,
}

pub const SWEEP_CSV_HEADER: &str =
    "psi,num_seeds,f1_majority,accuracy,precision,recall,annotator_acc,pred_variance,agree_frac";
pub const SWEEP_RUNS_CSV_HEADER: &str =
    "psi,seed,f1_majority,accuracy,precision,recall,annotator_acc,pred_variance,agree_frac,final_loss";

impl SweepReport {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                r.psi,
                r.num_seeds,
                100.0 * r.f1,
                100.0 * r.accuracy,
                100.0 * r.precision,
                100.0 * r.recall,
                100.0 * r.annotator_accuracy
            ));
            push_opt(&mut out, r.prediction_variance);
            out.push_str(&format!(",{}\n", r.agree_frac));
        }
        out
    }

    pub fn runs_to_csv_string(&self) -> String {
        let mut out = String::from(SWEEP_RUNS_CSV_HEADER);
        out.push('\n');
        for r in &self.runs {
            let m = &r.report;
            out.push_str(&format!(
                "{},{},{},{},{},{},{}",
                r.psi,
                r.seed,
                100.0 * m.f1,
                100.0 * m.accuracy,
                100.0 * m.precision,
                100.0 * m.recall,
                100.0 * m.annotator_accuracy
            ));
            push_opt(&mut out, m.prediction_variance);
            out.push_str(&format!(",{},{}\n", r.agree_frac, r.final_loss));
        }
        out
    }
}

/// Trains one model per (ψ, seed) pair and aggregates final-epoch metrics
/// per ψ. Runs execute in parallel (capped by `threads` when given) but
/// results are collected in input order, so the report is identical for any
/// thread count.
pub fn run_psi_sweep(
    config: &TrainConfig,
    dataset: &Dataset,
    psi_values: &[f64],
    threads: Option<usize>,
) -> Result<SweepReport, TrainError> {
    if psi_values.is_empty() {
        return Err(TrainError::Config("psi sweep needs at least one value".into()));
    }
    config.validate()?;
    let seeds = config.sweep_seeds();
    let jobs: Vec<(f64, u64)> = psi_values
        .iter()
        .flat_map(|&psi| seeds.iter().map(move |&seed| (psi, seed)))
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<SweepRun, TrainError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(psi, seed)| {
                let mut c = config.clone();
                c.psi = psi;
                c.seed = seed;
                c.seeds = Vec::new();
                let out = train(&c, dataset)?;
                let final_loss = out.history.records.last().expect("epochs ≥ 1").mean_loss;
                Ok(SweepRun {
                    psi,
                    seed,
                    report: out.final_eval.report,
                    agree_frac: out.final_eval.split.agree_frac,
                    final_loss,
                })
            })
            .collect()
    });
    let runs: Vec<SweepRun> = results.into_iter().collect::<Result<_, _>>()?;

    let per_seed = seeds.len();
    let rows = psi_values
        .iter()
        .enumerate()
        .map(|(i, &psi)| {
            let group = &runs[i * per_seed..(i + 1) * per_seed];
            let k = group.len() as f64;
            let mean = |f: &dyn Fn(&SweepRun) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / k;
            let variance = group
                .iter()
                .map(|r| r.report.prediction_variance)
                .collect::<Option<Vec<f64>>>()
                .map(|vs| vs.iter().sum::<f64>() / k);
            SweepRow {
                psi,
                num_seeds: group.len(),
                f1: mean(&|r| r.report.f1),
                accuracy: mean(&|r| r.report.accuracy),
                precision: mean(&|r| r.report.precision),
                recall: mean(&|r| r.report.recall),
                annotator_accuracy: mean(&|r| r.report.annotator_accuracy),
                prediction_variance: variance,
                agree_frac: mean(&|r| r.agree_frac),
            }
        })
        .collect();
    Ok(SweepReport { runs, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_dataset(seed: u64) -> Dataset {
        generate_synthetic(&SynthConfig {
            num_samples: 96,
            num_annotators: 4,
            feature_dim: 5,
            num_factions: 2,
            faction_boundary_angle: 0.5,
            per_annotator_flip_rate: 0.05,
            annotations_per_sample: 2,
            seed,
        })
        .expect("valid")
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            warmup_epochs: 1,
            batch_size: 32,
            hidden_dim: 8,
            encoder_layers: 1,
            ..TrainConfig::default()
        }
    }

    fn constant_params(dims: ModelDims, value: f64) -> ModelParams {
        ModelParams::from_flat(dims, &vec![value; ModelParams::zeros(dims).flatten().len()])
            .expect("sized")
    }

    #[test]
    fn sgd_matches_worked_example() {
        let dims = ModelDims { input: 2, hidden: 3, classes: 2, annotators: 2, layers: 1 };
        let mut p = constant_params(dims, 1.0);
        let g = constant_params(dims, 2.0);
        let mut v = ModelParams::zeros(dims);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.01);
        for x in p.flatten() {
            assert_abs_diff_eq!(x, 0.799, epsilon = 1e-15);
        }
        for x in v.flatten() {
            assert_abs_diff_eq!(x, 2.01, epsilon = 1e-15);
        }
    }

    #[test]
    fn sgd_two_steps_match_hand_recurrence() {
        let dims = ModelDims { input: 1, hidden: 1, classes: 2, annotators: 1, layers: 1 };
        let (lr, mom, wd, g) = (0.07, 0.85, 0.02, -1.3);
        let mut p = constant_params(dims, 0.4);
        let grads = constant_params(dims, g);
        let mut v = ModelParams::zeros(dims);
        // hand-unrolled scalar recurrence
        let p0 = 0.4;
        let v1 = g + wd * p0;
        let p1 = p0 - lr * v1;
        let v2 = mom * v1 + (g + wd * p1);
        let p2 = p1 - lr * v2;
        sgd_step(&mut p, &grads, &mut v, lr, mom, wd);
        for x in p.flatten() {
            assert_abs_diff_eq!(x, p1, epsilon = 1e-15);
        }
        sgd_step(&mut p, &grads, &mut v, lr, mom, wd);
        for (x, vx) in p.flatten().iter().zip(v.flatten()) {
            assert_abs_diff_eq!(*x, p2, epsilon = 1e-15);
            assert_abs_diff_eq!(vx, v2, epsilon = 1e-15);
        }
    }

    #[test]
    fn sgd_zero_grads_zero_decay_is_identity() {
        let dims = ModelDims { input: 2, hidden: 2, classes: 2, annotators: 1, layers: 1 };
        let mut p = init_model(dims, 3);
        let before = p.flatten();
        let mut v = ModelParams::zeros(dims);
        sgd_step(&mut p, &ModelParams::zeros(dims), &mut v, 0.1, 0.9, 0.0);
        assert_eq!(p.flatten(), before);
    }

    #[test]
    fn zero_lr_never_moves_params() {
        let dims = ModelDims { input: 2, hidden: 2, classes: 2, annotators: 1, layers: 1 };
        let mut p = init_model(dims, 3);
        let before = p.flatten();
        let mut v = ModelParams::zeros(dims);
        let g = constant_params(dims, 0.7);
        sgd_step(&mut p, &g, &mut v, 0.0, 0.9, 0.5);
        assert_eq!(p.flatten(), before);
        assert!(v.flatten().iter().any(|&x| x != 0.0)); // velocity still accumulates
    }

    #[test]
    fn lr_ramp_schedule() {
        let config = TrainConfig {
            learning_rate: 0.1,
            warmup_epochs: 2,
            lr_ramp: LrRamp::Linear,
            ..TrainConfig::default()
        };
        assert_abs_diff_eq!(effective_lr(&config, 1), 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(effective_lr(&config, 2), 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(effective_lr(&config, 3), 0.1, epsilon = 1e-15);
        let flat = TrainConfig { lr_ramp: LrRamp::Off, ..config };
        assert_eq!(effective_lr(&flat, 1), flat.learning_rate);
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for broken in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { warmup_epochs: 9, epochs: 3, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { momentum: 1.0, ..ok.clone() },
            TrainConfig { weight_decay: -0.1, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { psi: f64::NAN, ..ok.clone() },
            TrainConfig { mixup_alpha: 0.0, ..ok.clone() },
            TrainConfig { hidden_dim: 0, ..ok.clone() },
        ] {
            assert!(matches!(broken.validate(), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let dataset = tiny_dataset(1);
        let config = tiny_config();
        let a = train(&config, &dataset).expect("trains");
        let b = train(&config, &dataset).expect("trains");
        assert_eq!(a.params.flatten(), b.params.flatten());
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_eval, b.final_eval);
        let other = train(&TrainConfig { seed: 9, ..config }, &dataset).expect("trains");
        assert_ne!(a.params.flatten(), other.params.flatten());
    }

    #[test]
    fn history_tracks_schedule() {
        let dataset = tiny_dataset(2);
        let config = TrainConfig { epochs: 4, warmup_epochs: 2, ..tiny_config() };
        let out = train(&config, &dataset).expect("trains");
        assert_eq!(out.history.records.len(), 4);
        for r in &out.history.records {
            assert_eq!(r.epoch, out.history.records[r.epoch - 1].epoch);
            assert!(r.mean_loss.is_finite());
            if r.epoch <= 3 {
                // refits start after the first post-warm-up epoch, and their
                // weights only apply from the epoch after that
                assert_eq!(r.applied_max_weight, 0.0);
            }
            if r.epoch <= 2 {
                assert!(r.mixture.is_none());
            } else {
                assert!(r.mixture.is_some(), "epoch {} should have a refit", r.epoch);
            }
        }
        // final history row is exactly the final evaluation's report
        let last = out.history.records.last().expect("non-empty");
        assert_eq!(last.metrics, out.final_eval.report);

        let csv = out.history.to_csv_string();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(HISTORY_CSV_HEADER));
        assert_eq!(lines.count(), 4);
        // warm-up epoch 1 has empty mixture cells
        let first_row = csv.lines().nth(1).expect("row");
        let cells: Vec<&str> = first_row.split(',').collect();
        assert_eq!(cells[5], "", "agree_frac should be empty before the first refit");
    }

    #[test]
    fn checkpoint_eval_reproduces_final_row() {
        let dataset = tiny_dataset(3);
        let config = tiny_config();
        let out = train(&config, &dataset).expect("trains");
        let eval = evaluate_model(
            &out.params,
            &dataset,
            &config.eval_options(config.epochs),
        )
        .expect("evaluates");
        assert_eq!(eval.report, out.final_eval.report);
        assert_eq!(eval, out.final_eval);
    }

    #[test]
    fn baseline_equals_multitask_on_majority_view() {
        let dataset = tiny_dataset(4);
        let majority = dataset.to_majority_view().expect("view");
        let config = TrainConfig { mode: Mode::Baseline, ..tiny_config() };
        let a = train(&config, &dataset).expect("trains");
        let b = train(&TrainConfig { mode: Mode::Multitask, ..config }, &majority)
            .expect("trains");
        assert_eq!(a.params.flatten(), b.params.flatten());
        let losses_a: Vec<f64> = a.history.records.iter().map(|r| r.mean_loss).collect();
        let losses_b: Vec<f64> = b.history.records.iter().map(|r| r.mean_loss).collect();
        assert_eq!(losses_a, losses_b);
    }

    #[test]
    fn mixup_modes_run_deterministically() {
        let dataset = tiny_dataset(5);
        for mixup in [MixupMode::Input, MixupMode::Manifold] {
            let config = TrainConfig { mixup, mixup_alpha: 0.4, ..tiny_config() };
            let a = train(&config, &dataset).expect("trains");
            let b = train(&config, &dataset).expect("trains");
            assert_eq!(a.params.flatten(), b.params.flatten());
            assert!(a.history.records.iter().all(|r| r.mean_loss.is_finite()));
        }
    }

    #[test]
    fn divergence_reports_batch_and_keeps_history() {
        let mut dataset = tiny_dataset(6);
        dataset.features[[3, 0]] = f64::NAN;
        let config = tiny_config();
        match train(&config, &dataset) {
            Err(TrainError::Divergence { epoch, history, .. }) => {
                assert_eq!(epoch, 1);
                assert!(history.records.is_empty()); // no epoch completed
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn separable_smoke_reaches_high_accuracy() {
        let dataset = generate_synthetic(&SynthConfig {
            num_samples: 500,
            num_annotators: 8,
            feature_dim: 4,
            num_factions: 1,
            faction_boundary_angle: 0.0,
            per_annotator_flip_rate: 0.0,
            annotations_per_sample: 3,
            seed: 11,
        })
        .expect("valid");
        let out = train(&TrainConfig::default(), &dataset).expect("trains");
        let acc = out.final_eval.report.accuracy;
        assert!(acc >= 0.95, "majority accuracy {acc:.3} below 0.95");
    }

    #[test]
    fn degenerate_sweep_equals_direct_run() {
        let dataset = tiny_dataset(7);
        let config = tiny_config();
        let sweep = run_psi_sweep(&config, &dataset, &[0.5], None).expect("sweeps");
        assert_eq!(sweep.runs.len(), 1);
        assert_eq!(sweep.rows.len(), 1);
        let direct = train(&config, &dataset).expect("trains");
        assert_eq!(sweep.runs[0].report, direct.final_eval.report);
        assert_eq!(sweep.rows[0].f1, direct.final_eval.report.f1);
    }

    #[test]
    fn sweep_is_thread_count_invariant_and_aggregates() {
        let dataset = tiny_dataset(8);
        let config = TrainConfig { seeds: vec![1, 2], epochs: 2, ..tiny_config() };
        let psis = [0.0, 0.5];
        let one = run_psi_sweep(&config, &dataset, &psis, Some(1)).expect("sweeps");
        let four = run_psi_sweep(&config, &dataset, &psis, Some(4)).expect("sweeps");
        assert_eq!(one, four);
        assert_eq!(one.runs.len(), 4);
        assert_eq!(one.rows.len(), 2);
        for (i, row) in one.rows.iter().enumerate() {
            assert_eq!(row.num_seeds, 2);
            let group = &one.runs[i * 2..(i + 1) * 2];
            let mean_f1 = (group[0].report.f1 + group[1].report.f1) / 2.0;
            assert_abs_diff_eq!(row.f1, mean_f1, epsilon = 1e-12);
            assert!(group.iter().all(|r| r.psi == row.psi));
        }
        assert!(run_psi_sweep(&config, &dataset, &[], None).is_err());

        let csv = one.to_csv_string();
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(one.runs_to_csv_string().lines().count(), 5);
    }
}
