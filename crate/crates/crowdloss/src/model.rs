//! Shared-encoder multitask classifier with exact analytic gradients.
//!
//! The encoder is a stack of tanh layers (input D → hidden H, then H → H);
//! each annotator owns a softmax head (H → M). Gradients are hand-derived
//! and verified against central finite differences in the tests; the scalar
//! loss both paths share is built from the [`crate::loss`] primitives, so
//! the loss definitions stay in one place.
//!
//! Mixup support: a forward pass may blend two inputs at a chosen layer
//! (layer 0 mixes raw inputs, layer k mixes the k-th hidden activation).
//! The backward pass splits the gradient at the blend point between the two
//! branches in proportion to the mixing weight.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::{
    class_balance_reg, entropy_penalty, loss_mlc_terms, one_hot, CorrectionWeights, MtNorm,
    PROB_FLOOR,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("mixup lambda {lambda} outside [0,1]")]
    BadLambda { lambda: f64 },
    #[error("mixup layer {layer} exceeds encoder depth {depth}")]
    BadLayer { layer: usize, depth: usize },
    #[error("parameter vector has {got} values, dims require {want}")]
    FlatLenMismatch { want: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample {sample} needs a detached guess for nonzero correction weight")]
    MissingGuess { sample: usize },
    #[error("loss error: {0}")]
    Loss(#[from] crate::loss::LossError),
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
}

// ============================================================================
// Parameters
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub annotators: usize,
    /// Number of encoder layers (depth of the tanh stack).
    pub layers: usize,
}

impl ModelDims {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut fan_in = self.input;
        for _ in 0..self.layers {
            n += fan_in * self.hidden + self.hidden;
            fan_in = self.hidden;
        }
        n + self.annotators * (self.hidden * self.classes + self.classes)
    }
}

/// One affine layer; `w` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, input: usize) -> Self {
        Self { w: Array2::zeros((out, input)), b: Array1::zeros(out) }
    }

    fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        self.w.dot(x) + &self.b
    }
}

/// Encoder and head parameters. The same structure doubles as the gradient
/// container returned by [`compute_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub encoder: Vec<Dense>,
    pub heads: Vec<Dense>,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let mut encoder = Vec::with_capacity(dims.layers);
        let mut fan_in = dims.input;
        for _ in 0..dims.layers {
            encoder.push(Dense::zeros(dims.hidden, fan_in));
            fan_in = dims.hidden;
        }
        let heads =
            (0..dims.annotators).map(|_| Dense::zeros(dims.classes, dims.hidden)).collect();
        Self { dims, encoder, heads }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims)
    }

    /// Flat parameter vector: encoder layers (weights row-major, then bias)
    /// followed by heads in annotator order. This order is the checkpoint
    /// contract.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.param_count());
        for layer in self.encoder.iter().chain(&self.heads) {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self, ModelError> {
        if flat.len() != dims.param_count() {
            return Err(ModelError::FlatLenMismatch { want: dims.param_count(), got: flat.len() });
        }
        let mut params = Self::zeros(dims);
        let mut pos = 0;
        for layer in params.encoder.iter_mut().chain(&mut params.heads) {
            for v in layer.w.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
            for v in layer.b.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
        }
        Ok(params)
    }

    pub fn all_finite(&self) -> bool {
        self.encoder
            .iter()
            .chain(&self.heads)
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }
}

/// Uniform init on `±1/√fan_in`, biases zero. Deterministic in `(dims, seed)`.
pub fn init_model(dims: ModelDims, seed: u64) -> ModelParams {
    let mut r = rng::stream(seed, &[rng::tags::INIT]);
    let mut params = ModelParams::zeros(dims);
    for layer in params.encoder.iter_mut().chain(&mut params.heads) {
        let scale = 1.0 / (layer.w.ncols() as f64).sqrt();
        for v in layer.w.iter_mut() {
            *v = r.random_range(-scale..scale);
        }
    }
    params
}

// ============================================================================
// Forward passes
// ============================================================================

/// Activations retained for backprop. `trunk[0]` is the activation at the
/// mix layer (the raw input when nothing is mixed); `trunk.last()` is the
/// encoder output fed to every head.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub trunk: Vec<Array1<f64>>,
    pub mix: Option<MixTrace>,
    /// Per-head probability rows, each on the M-simplex.
    pub probs: Vec<Vec<f64>>,
}

/// Branch activations below the blend point: `acts_*[t]` is activation
/// `a[t]`, with `a[0]` the raw input, for `t ≤ layer`.
#[derive(Debug, Clone)]
pub struct MixTrace {
    pub lambda: f64,
    pub layer: usize,
    pub acts_i: Vec<Array1<f64>>,
    pub acts_j: Vec<Array1<f64>>,
}

fn softmax(logits: &Array1<f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn run_layers(params: &ModelParams, from_layer: usize, start: Array1<f64>) -> Vec<Array1<f64>> {
    let mut acts = vec![start];
    for layer in &params.encoder[from_layer..] {
        let next = layer.apply(acts.last().expect("non-empty")).mapv(f64::tanh);
        acts.push(next);
    }
    acts
}

fn head_probs(params: &ModelParams, encoded: &Array1<f64>) -> Vec<Vec<f64>> {
    params.heads.iter().map(|h| softmax(&h.apply(encoded))).collect()
}

pub fn forward(params: &ModelParams, x: &Array1<f64>) -> ForwardTrace {
    let trunk = run_layers(params, 0, x.clone());
    let probs = head_probs(params, trunk.last().expect("non-empty"));
    ForwardTrace { trunk, mix: None, probs }
}

/// Runs both inputs to `layer`, blends `λ·h_i + (1−λ)·h_j`, and continues
/// forward once. Layer 0 blends the raw inputs.
pub fn forward_mixup(
    params: &ModelParams,
    x_i: &Array1<f64>,
    x_j: &Array1<f64>,
    lambda: f64,
    layer: usize,
) -> Result<ForwardTrace, ModelError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ModelError::BadLambda { lambda });
    }
    if layer > params.dims.layers {
        return Err(ModelError::BadLayer { layer, depth: params.dims.layers });
    }
    let mut acts_i = vec![x_i.clone()];
    let mut acts_j = vec![x_j.clone()];
    for l in &params.encoder[..layer] {
        acts_i.push(l.apply(acts_i.last().expect("non-empty")).mapv(f64::tanh));
        acts_j.push(l.apply(acts_j.last().expect("non-empty")).mapv(f64::tanh));
    }
    let mixed = acts_i[layer].mapv(|v| v * lambda)
        + &acts_j[layer].mapv(|v| v * (1.0 - lambda));
    let trunk = run_layers(params, layer, mixed);
    let probs = head_probs(params, trunk.last().expect("non-empty"));
    Ok(ForwardTrace { trunk, mix: Some(MixTrace { lambda, layer, acts_i, acts_j }), probs })
}

// ============================================================================
// Batch loss and gradients
// ============================================================================

/// One training sample inside a batch.
#[derive(Debug, Clone)]
pub struct BatchRow {
    /// Dataset sample index; keys correction-weight lookups.
    pub sample: usize,
    pub x: Array1<f64>,
    /// Per-annotator class labels; `None` marks a missing annotation.
    pub labels: Vec<Option<usize>>,
    /// Detached per-head guess rows. Required whenever the resolved
    /// correction weight of a present cell is nonzero.
    pub guess: Option<Vec<Vec<f64>>>,
}

/// Mixing decision for one batch: a single `(λ, layer)` pair and a partner
/// permutation (`partner[b]` is the row blended with row `b`).
#[derive(Debug, Clone)]
pub struct MixPlan {
    pub lambda: f64,
    pub layer: usize,
    pub partner: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: Vec<BatchRow>,
    pub mix: Option<MixPlan>,
}

/// Loss configuration resolved for one batch.
#[derive(Debug, Clone)]
pub struct LossPlan<'a> {
    pub weights: &'a CorrectionWeights,
    pub psi: f64,
    pub mt_norm: MtNorm,
    /// Zero outside warm-up.
    pub entropy_coeff: f64,
    pub class_balance_coeff: f64,
}

/// Scalar total loss of a batch (no gradients). Shares its code path with
/// [`compute_gradients`], which makes it the finite-difference target.
pub fn batch_loss(
    params: &ModelParams,
    batch: &Batch,
    plan: &LossPlan,
) -> Result<f64, ModelError> {
    evaluate(params, batch, plan, false).map(|(loss, _)| loss)
}

/// Total batch loss and its exact gradient with respect to every parameter.
pub fn compute_gradients(
    params: &ModelParams,
    batch: &Batch,
    plan: &LossPlan,
) -> Result<(f64, ModelParams), ModelError> {
    let (loss, grads) = evaluate(params, batch, plan, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Targets of one mixup side: labels/guess/weights come from the side's own
/// row; `side_weight` is λ for the primary row and 1−λ for the partner.
struct Side<'a> {
    labels: &'a [Option<usize>],
    guess: Option<&'a [Vec<f64>]>,
    sample: usize,
    side_weight: f64,
}

fn resolve_weights(
    plan: &LossPlan,
    side: &Side,
    num_heads: usize,
) -> Result<Vec<f64>, ModelError> {
    let mut w_all = vec![0.0; num_heads];
    for (a, label) in side.labels.iter().enumerate() {
        if label.is_some() {
            let w = plan.weights.get(side.sample, a);
            if w != 0.0 && side.guess.is_none() {
                return Err(ModelError::MissingGuess { sample: side.sample });
            }
            w_all[a] = w;
        }
    }
    Ok(w_all)
}

fn uniform_rows(heads: usize, classes: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / classes as f64; classes]; heads]
}

fn evaluate(
    params: &ModelParams,
    batch: &Batch,
    plan: &LossPlan,
    want_grads: bool,
) -> Result<(f64, Option<ModelParams>), ModelError> {
    let b_len = batch.rows.len();
    if b_len == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let dims = params.dims;
    let inv_b = 1.0 / b_len as f64;

    let traces: Vec<ForwardTrace> = match &batch.mix {
        None => batch.rows.iter().map(|row| forward(params, &row.x)).collect(),
        Some(mix) => batch
            .rows
            .iter()
            .enumerate()
            .map(|(b, row)| {
                forward_mixup(params, &row.x, &batch.rows[mix.partner[b]].x, mix.lambda, mix.layer)
            })
            .collect::<Result<_, _>>()?,
    };

    // heads that saw at least one annotation anywhere in the batch
    let active: Vec<bool> = (0..dims.annotators)
        .map(|a| batch.rows.iter().any(|row| row.labels[a].is_some()))
        .collect();
    let active_count = active.iter().filter(|&&x| x).count();

    // per-head batch-mean probabilities for the class-balance term
    let mut head_means = vec![vec![0.0; dims.classes]; dims.annotators];
    for trace in &traces {
        for (a, p) in trace.probs.iter().enumerate() {
            for (m, &pm) in p.iter().enumerate() {
                head_means[a][m] += pm * inv_b;
            }
        }
    }
    let active_means: Vec<Vec<f64>> = (0..dims.annotators)
        .filter(|&a| active[a])
        .map(|a| head_means[a].clone())
        .collect();

    let mut total = 0.0;
    let mut grads = want_grads.then(|| params.zeros_like());
    // d(total)/d(logit) per row and head, filled as loss terms accumulate
    let mut deltas: Vec<Vec<Vec<f64>>> = if want_grads {
        vec![vec![vec![0.0; dims.classes]; dims.annotators]; b_len]
    } else {
        Vec::new()
    };

    let fallback_guess = uniform_rows(dims.annotators, dims.classes);
    for (b, row) in batch.rows.iter().enumerate() {
        let trace = &traces[b];
        let sides: Vec<Side> = match &batch.mix {
            None => vec![Side {
                labels: &row.labels,
                guess: row.guess.as_deref(),
                sample: row.sample,
                side_weight: 1.0,
            }],
            Some(mix) => {
                let partner = &batch.rows[mix.partner[b]];
                vec![
                    Side {
                        labels: &row.labels,
                        guess: row.guess.as_deref(),
                        sample: row.sample,
                        side_weight: mix.lambda,
                    },
                    Side {
                        labels: &partner.labels,
                        guess: partner.guess.as_deref(),
                        sample: partner.sample,
                        side_weight: 1.0 - mix.lambda,
                    },
                ]
            }
        };

        for side in &sides {
            let w_all = resolve_weights(plan, side, dims.annotators)?;
            let z_all = side.guess.unwrap_or(&fallback_guess);
            let data =
                loss_mlc_terms(&trace.probs, side.labels, z_all, &w_all, plan.psi, plan.mt_norm)?;
            let present_rows: Vec<&[f64]> = side
                .labels
                .iter()
                .enumerate()
                .filter(|(_, l)| l.is_some())
                .map(|(a, _)| trace.probs[a].as_slice())
                .collect();
            let present = present_rows.len();
            let pen = if plan.entropy_coeff != 0.0 {
                entropy_penalty(&present_rows)
            } else {
                0.0
            };
            total += side.side_weight * (data + plan.entropy_coeff * pen) * inv_b;

            if let Some(deltas) = deltas.get_mut(b) {
                let norm = match plan.mt_norm {
                    MtNorm::Present => 1.0 / present as f64,
                    MtNorm::Total => 1.0 / dims.annotators as f64,
                };
                let scale = side.side_weight * inv_b;
                for (a, label) in side.labels.iter().enumerate() {
                    let Some(class) = *label else { continue };
                    let p = &trace.probs[a];
                    let y = one_hot(class, dims.classes);
                    let z = &z_all[a];
                    let w = w_all[a];
                    let delta = &mut deltas[a];
                    for m in 0..dims.classes {
                        delta[m] += scale
                            * norm
                            * ((1.0 - w) * (p[m] - y[m]) + plan.psi * w * (p[m] - z[m]));
                    }
                    if plan.entropy_coeff != 0.0 {
                        // d(−H)/dlogit_k = p_k (ln p_k − Σ_m p_m ln p_m)
                        let f: f64 =
                            p.iter().map(|&pm| pm * pm.clamp(PROB_FLOOR, 1.0).ln()).sum();
                        let pen_scale = scale * plan.entropy_coeff / present as f64;
                        for m in 0..dims.classes {
                            delta[m] +=
                                pen_scale * p[m] * (p[m].clamp(PROB_FLOOR, 1.0).ln() - f);
                        }
                    }
                }
            }
        }
    }

    if plan.class_balance_coeff != 0.0 && active_count > 0 {
        total += plan.class_balance_coeff * class_balance_reg(&active_means);
        if want_grads {
            let cb_scale = plan.class_balance_coeff / (active_count as f64 * b_len as f64);
            let m_f = dims.classes as f64;
            for (b, trace) in traces.iter().enumerate() {
                for a in 0..dims.annotators {
                    if !active[a] {
                        continue;
                    }
                    let p = &trace.probs[a];
                    let mean = &head_means[a];
                    // d KL(u‖p̄)/dlogit_k through p̄ = batch mean
                    let dot: f64 = (0..dims.classes)
                        .map(|m| p[m] / (m_f * mean[m].clamp(PROB_FLOOR, 1.0)))
                        .sum();
                    let delta = &mut deltas[b][a];
                    for k in 0..dims.classes {
                        delta[k] += cb_scale
                            * (p[k] * dot - p[k] / (m_f * mean[k].clamp(PROB_FLOOR, 1.0)));
                    }
                }
            }
        }
    }

    if let Some(grads) = grads.as_mut() {
        for (b, trace) in traces.iter().enumerate() {
            backprop_row(params, trace, &deltas[b], grads);
        }
    }
    Ok((total, grads))
}

fn backprop_row(
    params: &ModelParams,
    trace: &ForwardTrace,
    deltas: &[Vec<f64>],
    grads: &mut ModelParams,
) {
    let encoded = trace.trunk.last().expect("non-empty trunk");
    let hidden = encoded.len();
    let mut dh = Array1::<f64>::zeros(hidden);
    for (a, delta) in deltas.iter().enumerate() {
        if delta.iter().all(|&d| d == 0.0) {
            continue;
        }
        let head = &params.heads[a];
        let ghead = &mut grads.heads[a];
        for (m, &dm) in delta.iter().enumerate() {
            if dm == 0.0 {
                continue;
            }
            ghead.w.row_mut(m).scaled_add(dm, encoded);
            ghead.b[m] += dm;
            dh.scaled_add(dm, &head.w.row(m));
        }
    }

    let mix_layer = trace.mix.as_ref().map_or(0, |m| m.layer);
    // trunk[t − mix_layer] holds activation a[t]
    for t in (mix_layer + 1..=params.dims.layers).rev() {
        let a_t = &trace.trunk[t - mix_layer];
        let a_prev = &trace.trunk[t - 1 - mix_layer];
        let dpre = &dh * &a_t.mapv(|v| 1.0 - v * v);
        let layer = &mut grads.encoder[t - 1];
        for (i, &di) in dpre.iter().enumerate() {
            if di != 0.0 {
                layer.w.row_mut(i).scaled_add(di, a_prev);
            }
        }
        layer.b += &dpre;
        dh = params.encoder[t - 1].w.t().dot(&dpre);
    }

    if let Some(mix) = &trace.mix {
        for (acts, weight) in
            [(&mix.acts_i, mix.lambda), (&mix.acts_j, 1.0 - mix.lambda)]
        {
            if weight == 0.0 {
                continue;
            }
            let mut bh = dh.mapv(|v| v * weight);
            for t in (1..=mix.layer).rev() {
                let a_t = &acts[t];
                let a_prev = &acts[t - 1];
                let dpre = &bh * &a_t.mapv(|v| 1.0 - v * v);
                let layer = &mut grads.encoder[t - 1];
                for (i, &di) in dpre.iter().enumerate() {
                    if di != 0.0 {
                        layer.w.row_mut(i).scaled_add(di, a_prev);
                    }
                }
                layer.b += &dpre;
                bh = params.encoder[t - 1].w.t().dot(&dpre);
            }
        }
    }
}

// ============================================================================
// Checkpoints
// ============================================================================

const CHECKPOINT_FORMAT: &str = "crowdloss-model-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    dims: ModelDims,
    params: Vec<f64>,
}

/// JSON checkpoint: a dims header plus the flat parameter vector in
/// [`ModelParams::flatten`] order. Values survive the round trip bit-exactly.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<std::path::Path>) -> Result<(), ModelError> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        dims: params.dims,
        params: params.flatten(),
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<ModelParams, ModelError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| ModelError::CheckpointFormat(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(ModelError::CheckpointFormat(format!(
            "unknown format {:?} (expected {CHECKPOINT_FORMAT:?})",
            file.format
        )));
    }
    ModelParams::from_flat(file.dims, &file.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    // ------------------------------------------------------------------
    // oracles
    // ------------------------------------------------------------------

    /// Central finite differences of `batch_loss` over the flat parameters.
    fn fd_gradient(params: &ModelParams, batch: &Batch, plan: &LossPlan) -> Vec<f64> {
        const STEP: f64 = 1e-5;
        let flat = params.flatten();
        let mut out = Vec::with_capacity(flat.len());
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            plus[i] += STEP;
            let mut minus = flat.clone();
            minus[i] -= STEP;
            let lp = batch_loss(&ModelParams::from_flat(params.dims, &plus).expect("len"), batch, plan)
                .expect("loss");
            let lm =
                batch_loss(&ModelParams::from_flat(params.dims, &minus).expect("len"), batch, plan)
                    .expect("loss");
            out.push((lp - lm) / (2.0 * STEP));
        }
        out
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
            .fold(0.0, f64::max)
    }

    fn check_gradients(params: &ModelParams, batch: &Batch, plan: &LossPlan) {
        let (_, grads) = compute_gradients(params, batch, plan).expect("gradients");
        let analytic = grads.flatten();
        let numeric = fd_gradient(params, batch, plan);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "max relative gradient error {err:.3e}");
    }

    // ------------------------------------------------------------------
    // fixtures
    // ------------------------------------------------------------------

    fn small_dims() -> ModelDims {
        ModelDims { input: 4, hidden: 8, classes: 2, annotators: 3, layers: 1 }
    }

    fn deep_dims() -> ModelDims {
        ModelDims { input: 3, hidden: 5, classes: 3, annotators: 2, layers: 2 }
    }

    fn random_input(dims: ModelDims, seed: u64) -> Array1<f64> {
        let mut r = rng::stream(seed, &[100]);
        Array1::from_iter((0..dims.input).map(|_| r.random_range(-1.5..1.5)))
    }

    fn random_simplex(m: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        let raw: Vec<f64> = (0..m).map(|_| r.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    /// Random batch with holes in the annotation pattern and per-cell guesses.
    fn random_batch(dims: ModelDims, seed: u64, rows: usize) -> Batch {
        let mut r = rng::stream(seed, &[101]);
        let batch_rows = (0..rows)
            .map(|b| {
                let x = Array1::from_iter((0..dims.input).map(|_| r.random_range(-1.5..1.5)));
                let mut labels: Vec<Option<usize>> = (0..dims.annotators)
                    .map(|_| {
                        (r.random_range(0.0..1.0) < 0.7)
                            .then(|| r.random_range(0..dims.classes))
                    })
                    .collect();
                if labels.iter().all(|l| l.is_none()) {
                    labels[0] = Some(r.random_range(0..dims.classes));
                }
                let guess: Vec<Vec<f64>> =
                    (0..dims.annotators).map(|_| random_simplex(dims.classes, &mut r)).collect();
                BatchRow { sample: b, x, labels, guess: Some(guess) }
            })
            .collect();
        Batch { rows: batch_rows, mix: None }
    }

    fn per_cell_weights(batch: &Batch, seed: u64) -> CorrectionWeights {
        let mut r = rng::stream(seed, &[102]);
        let mut map = BTreeMap::new();
        for row in &batch.rows {
            for (a, label) in row.labels.iter().enumerate() {
                if label.is_some() {
                    map.insert((row.sample, a), r.random_range(0.0..1.0));
                }
            }
        }
        CorrectionWeights::PerCell(map)
    }

    fn plan<'a>(weights: &'a CorrectionWeights) -> LossPlan<'a> {
        LossPlan {
            weights,
            psi: 0.7,
            mt_norm: MtNorm::Present,
            entropy_coeff: 0.0,
            class_balance_coeff: 0.0,
        }
    }

    // ------------------------------------------------------------------
    // construction and forward
    // ------------------------------------------------------------------

    #[test]
    fn param_count_example() {
        assert_eq!(small_dims().param_count(), 94);
        assert_eq!(init_model(small_dims(), 7).flatten().len(), 94);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_model(small_dims(), 42);
        let b = init_model(small_dims(), 42);
        assert_eq!(a, b);
        let c = init_model(small_dims(), 43);
        assert_ne!(a, c);
        for layer in a.encoder.iter().chain(&a.heads) {
            assert!(layer.b.iter().all(|&v| v == 0.0));
        }
        let scale = 1.0 / (small_dims().input as f64).sqrt();
        assert!(a.encoder[0].w.iter().all(|&v| v.abs() <= scale));
    }

    #[test]
    fn zero_params_give_uniform_heads() {
        let params = ModelParams::zeros(small_dims());
        let trace = forward(&params, &random_input(small_dims(), 1));
        for p in &trace.probs {
            for &pm in p {
                assert_abs_diff_eq!(pm, 0.5, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn probability_rows_normalized() {
        let params = init_model(deep_dims(), 5);
        let trace = forward(&params, &random_input(deep_dims(), 2));
        for p in &trace.probs {
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
        assert_eq!(trace.trunk.len(), deep_dims().layers + 1);
    }

    #[test]
    fn scalar_network_matches_closed_form() {
        // D=1, H=1, M=2, A=1, L=1 with hand-picked parameters
        let dims = ModelDims { input: 1, hidden: 1, classes: 2, annotators: 1, layers: 1 };
        let mut params = ModelParams::zeros(dims);
        params.encoder[0].w[[0, 0]] = 2.0;
        params.encoder[0].b[0] = 0.5;
        params.heads[0].w[[0, 0]] = 1.5;
        params.heads[0].w[[1, 0]] = -0.5;
        params.heads[0].b[0] = 0.1;
        params.heads[0].b[1] = -0.2;
        let x = Array1::from_vec(vec![0.3]);
        let trace = forward(&params, &x);

        let h = (2.0f64 * 0.3 + 0.5).tanh();
        let l0 = 1.5 * h + 0.1;
        let l1 = -0.5 * h - 0.2;
        let p0 = l0.exp() / (l0.exp() + l1.exp());
        assert_abs_diff_eq!(trace.probs[0][0], p0, epsilon = 1e-14);
        assert_abs_diff_eq!(trace.probs[0][1], 1.0 - p0, epsilon = 1e-14);
    }

    #[test]
    fn flatten_round_trip() {
        let params = init_model(deep_dims(), 11);
        let rebuilt = ModelParams::from_flat(deep_dims(), &params.flatten()).expect("len");
        assert_eq!(params, rebuilt);
        assert!(matches!(
            ModelParams::from_flat(deep_dims(), &[0.0; 3]),
            Err(ModelError::FlatLenMismatch { .. })
        ));
    }

    // ------------------------------------------------------------------
    // mixup forward
    // ------------------------------------------------------------------

    #[test]
    fn mixup_degenerate_lambdas() {
        let dims = deep_dims();
        let params = init_model(dims, 3);
        let x_i = random_input(dims, 10);
        let x_j = random_input(dims, 11);
        for layer in 0..=dims.layers {
            let at_one = forward_mixup(&params, &x_i, &x_j, 1.0, layer).expect("valid");
            assert_eq!(at_one.probs, forward(&params, &x_i).probs);
            let at_zero = forward_mixup(&params, &x_i, &x_j, 0.0, layer).expect("valid");
            assert_eq!(at_zero.probs, forward(&params, &x_j).probs);
        }
    }

    #[test]
    fn mixup_layer_zero_is_input_mixing() {
        let dims = deep_dims();
        let params = init_model(dims, 4);
        let x_i = random_input(dims, 20);
        let x_j = random_input(dims, 21);
        let mixed = forward_mixup(&params, &x_i, &x_j, 0.5, 0).expect("valid");
        let mean = (&x_i + &x_j) / 2.0;
        let direct = forward(&params, &mean);
        for (a, b) in mixed.probs.iter().zip(&direct.probs) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn mixup_rejects_bad_arguments() {
        let params = init_model(small_dims(), 1);
        let x = random_input(small_dims(), 1);
        assert!(matches!(
            forward_mixup(&params, &x, &x, 1.5, 0),
            Err(ModelError::BadLambda { .. })
        ));
        assert!(matches!(
            forward_mixup(&params, &x, &x, 0.5, 9),
            Err(ModelError::BadLayer { .. })
        ));
    }

    #[test]
    fn mixup_continuous_in_lambda() {
        let dims = deep_dims();
        let params = init_model(dims, 6);
        let x_i = random_input(dims, 30);
        let x_j = random_input(dims, 31);
        for layer in 0..=dims.layers {
            let base = forward_mixup(&params, &x_i, &x_j, 0.4, layer).expect("valid");
            let nudged = forward_mixup(&params, &x_i, &x_j, 0.4 + 1e-6, layer).expect("valid");
            for (a, b) in base.probs.iter().zip(&nudged.probs) {
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-4);
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // gradients against finite differences
    // ------------------------------------------------------------------

    #[test]
    fn gradcheck_plain_multitask() {
        let dims = small_dims();
        let params = init_model(dims, 17);
        let batch = random_batch(dims, 1, 5);
        let weights = CorrectionWeights::Uniform(0.0);
        check_gradients(&params, &batch, &plan(&weights));
    }

    #[test]
    fn gradcheck_corrected_loss() {
        let dims = small_dims();
        let params = init_model(dims, 18);
        let batch = random_batch(dims, 2, 5);
        let weights = per_cell_weights(&batch, 3);
        check_gradients(&params, &batch, &plan(&weights));
    }

    #[test]
    fn gradcheck_entropy_penalty() {
        let dims = small_dims();
        let params = init_model(dims, 19);
        let batch = random_batch(dims, 4, 4);
        let weights = per_cell_weights(&batch, 5);
        let mut plan = plan(&weights);
        plan.entropy_coeff = 0.3;
        check_gradients(&params, &batch, &plan);
    }

    #[test]
    fn gradcheck_class_balance() {
        let dims = small_dims();
        let params = init_model(dims, 20);
        let batch = random_batch(dims, 6, 4);
        let weights = per_cell_weights(&batch, 7);
        let mut plan = plan(&weights);
        plan.class_balance_coeff = 1.1;
        check_gradients(&params, &batch, &plan);
    }

    #[test]
    fn gradcheck_all_terms_deep_model() {
        let dims = deep_dims();
        let params = init_model(dims, 21);
        let batch = random_batch(dims, 8, 4);
        let weights = per_cell_weights(&batch, 9);
        let mut plan = plan(&weights);
        plan.entropy_coeff = 0.2;
        plan.class_balance_coeff = 0.9;
        plan.psi = 1.3;
        check_gradients(&params, &batch, &plan);
    }

    #[test]
    fn gradcheck_total_norm() {
        let dims = small_dims();
        let params = init_model(dims, 22);
        let batch = random_batch(dims, 10, 4);
        let weights = per_cell_weights(&batch, 11);
        let mut plan = plan(&weights);
        plan.mt_norm = MtNorm::Total;
        check_gradients(&params, &batch, &plan);
    }

    #[test]
    fn gradcheck_mixup_every_layer() {
        let dims = deep_dims();
        let params = init_model(dims, 23);
        for layer in 0..=dims.layers {
            let mut batch = random_batch(dims, 12 + layer as u64, 4);
            // a 4-cycle so partners differ from their rows
            batch.mix = Some(MixPlan { lambda: 0.37, layer, partner: vec![1, 2, 3, 0] });
            let weights = per_cell_weights(&batch, 13);
            let mut plan = plan(&weights);
            plan.entropy_coeff = 0.25;
            plan.class_balance_coeff = 0.8;
            check_gradients(&params, &batch, &plan);
        }
    }

    #[test]
    fn matching_prediction_has_near_zero_head_gradient() {
        // logits strongly favoring the labeled class → p ≈ y → head delta ≈ 0
        let dims = ModelDims { input: 2, hidden: 3, classes: 2, annotators: 1, layers: 1 };
        let mut params = init_model(dims, 30);
        params.heads[0].b[0] = 25.0;
        params.heads[0].b[1] = -25.0;
        let batch = Batch {
            rows: vec![BatchRow {
                sample: 0,
                x: Array1::from_vec(vec![0.1, -0.2]),
                labels: vec![Some(0)],
                guess: None,
            }],
            mix: None,
        };
        let weights = CorrectionWeights::Uniform(0.0);
        let (_, grads) = compute_gradients(&params, &batch, &plan(&weights)).expect("ok");
        for g in grads.heads[0].w.iter().chain(grads.heads[0].b.iter()) {
            assert!(g.abs() < 1e-9, "head gradient {g} not ≈ 0");
        }
    }

    #[test]
    fn absent_annotators_get_zero_gradient() {
        let dims = small_dims();
        let params = init_model(dims, 31);
        // only annotator 2 labels the sample
        let batch = Batch {
            rows: vec![BatchRow {
                sample: 0,
                x: random_input(dims, 40),
                labels: vec![None, None, Some(1)],
                guess: None,
            }],
            mix: None,
        };
        let weights = CorrectionWeights::Uniform(0.0);
        let mut plan = plan(&weights);
        plan.entropy_coeff = 0.3;
        let (_, grads) = compute_gradients(&params, &batch, &plan).expect("ok");
        for a in [0usize, 1] {
            assert!(grads.heads[a].w.iter().all(|&g| g == 0.0));
            assert!(grads.heads[a].b.iter().all(|&g| g == 0.0));
        }
        assert!(grads.heads[2].w.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn padding_an_absent_annotator_changes_nothing() {
        let dims2 = ModelDims { input: 3, hidden: 4, classes: 2, annotators: 2, layers: 1 };
        let dims3 = ModelDims { annotators: 3, ..dims2 };
        let base = init_model(dims2, 32);
        // extend with a third head; shared parameters identical
        let mut flat = base.flatten();
        let extra = init_model(dims3, 33).flatten();
        flat.extend_from_slice(&extra[extra.len() - (dims3.hidden * dims3.classes + dims3.classes)..]);
        let padded = ModelParams::from_flat(dims3, &flat).expect("len");

        let x = random_input(dims2, 50);
        let batch2 = Batch {
            rows: vec![BatchRow {
                sample: 0,
                x: x.clone(),
                labels: vec![Some(0), Some(1)],
                guess: None,
            }],
            mix: None,
        };
        let batch3 = Batch {
            rows: vec![BatchRow {
                sample: 0,
                x,
                labels: vec![Some(0), Some(1), None],
                guess: None,
            }],
            mix: None,
        };
        let weights = CorrectionWeights::Uniform(0.0);
        let mut plan = plan(&weights);
        plan.entropy_coeff = 0.4;
        let (l2, g2) = compute_gradients(&base, &batch2, &plan).expect("ok");
        let (l3, g3) = compute_gradients(&padded, &batch3, &plan).expect("ok");
        assert_eq!(l2, l3);
        for (a, b) in g2.encoder.iter().zip(&g3.encoder) {
            assert_eq!(a, b);
        }
        for a in 0..2 {
            assert_eq!(g2.heads[a], g3.heads[a]);
        }
        assert!(g3.heads[2].w.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn missing_guess_with_nonzero_weight_errors() {
        let dims = small_dims();
        let params = init_model(dims, 34);
        let batch = Batch {
            rows: vec![BatchRow {
                sample: 0,
                x: random_input(dims, 60),
                labels: vec![Some(0), None, None],
                guess: None,
            }],
            mix: None,
        };
        let weights = CorrectionWeights::Uniform(0.5);
        assert!(matches!(
            batch_loss(&params, &batch, &plan(&weights)),
            Err(ModelError::MissingGuess { sample: 0 })
        ));
    }

    #[test]
    fn batch_loss_matches_loss_suite_functions() {
        let dims = small_dims();
        let params = init_model(dims, 35);
        let batch = random_batch(dims, 14, 3);
        let weights = per_cell_weights(&batch, 15);
        let plan = plan(&weights);
        let got = batch_loss(&params, &batch, &plan).expect("ok");
        let mut want = 0.0;
        for row in &batch.rows {
            let trace = forward(&params, &row.x);
            let w_all: Vec<f64> =
                (0..dims.annotators).map(|a| weights.get(row.sample, a)).collect();
            want += loss_mlc_terms(
                &trace.probs,
                &row.labels,
                row.guess.as_ref().expect("guess"),
                &w_all,
                plan.psi,
                plan.mt_norm,
            )
            .expect("ok");
        }
        want /= batch.rows.len() as f64;
        assert_abs_diff_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn empty_batch_errors() {
        let params = init_model(small_dims(), 36);
        let weights = CorrectionWeights::Uniform(0.0);
        let batch = Batch { rows: vec![], mix: None };
        assert!(matches!(
            batch_loss(&params, &batch, &plan(&weights)),
            Err(ModelError::EmptyBatch)
        ));
    }

    // ------------------------------------------------------------------
    // checkpoints
    // ------------------------------------------------------------------

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params = init_model(deep_dims(), 44);
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.json");
        save_checkpoint(&params, &path).expect("save");
        let loaded = load_checkpoint(&path).expect("load");
        assert_eq!(params.dims, loaded.dims);
        let a = params.flatten();
        let b = loaded.flatten();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn checkpoint_rejects_bad_format() {
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("model.json");
        std::fs::write(&path, r#"{"format":"other","dims":{"input":1,"hidden":1,"classes":2,"annotators":1,"layers":1},"params":[]}"#)
            .expect("write");
        assert!(matches!(load_checkpoint(&path), Err(ModelError::CheckpointFormat(_))));
        std::fs::write(&path, "not json").expect("write");
        assert!(matches!(load_checkpoint(&path), Err(ModelError::CheckpointFormat(_))));
    }
}
