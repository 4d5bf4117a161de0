//! Synthetic annotator populations with planted ground truth, plus the
//! label-flip noise injector.
//!
//! Geometry: features are spherical Gaussian draws. A planted teacher
//! hyperplane (unit normal `u`) defines ground truth. Each faction `f`
//! labels by the teacher's normal rotated by `f·angle` inside the plane
//! spanned by `u` and an orthogonal direction `v`; annotator `a` belongs to
//! faction `a mod F`. Faction structure plants *systematic* disagreement;
//! independent per-annotation flips plant *random* variation on top. For
//! spherical data, two hyperplanes at angle `φ` disagree on a `φ/π`
//! fraction of points — the geometric oracle the tests check against.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AnnotationMatrix, DataError, Dataset};
use crate::rng::{self, tags};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{field} must be positive")]
    NonPositive { field: &'static str },
    #[error("num_factions ({factions}) exceeds num_annotators ({annotators})")]
    TooManyFactions { factions: usize, annotators: usize },
    #[error("annotations_per_sample ({aps}) exceeds num_annotators ({annotators})")]
    TooManyAnnotations { aps: usize, annotators: usize },
    #[error("per_annotator_flip_rate {rate} outside [0, 0.5)")]
    BadFlipRate { rate: f64 },
    #[error("faction_boundary_angle {angle} not finite")]
    BadAngle { angle: f64 },
    #[error("noise rate {rate} outside [0, 1]")]
    BadNoiseRate { rate: f64 },
    #[error("label flip needs binary labels (got {num_classes} classes)")]
    NotBinary { num_classes: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

// ============================================================================
// Generator
// ============================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_annotators: usize,
    pub feature_dim: usize,
    pub num_factions: usize,
    /// Rotation of faction `f`'s decision hyperplane from the teacher's, in
    /// radians, applied `f` times.
    pub faction_boundary_angle: f64,
    pub per_annotator_flip_rate: f64,
    pub annotations_per_sample: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            num_annotators: 8,
            feature_dim: 16,
            num_factions: 2,
            faction_boundary_angle: PI / 8.0,
            per_annotator_flip_rate: 0.05,
            annotations_per_sample: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (field, value) in [
            ("num_samples", self.num_samples),
            ("num_annotators", self.num_annotators),
            ("feature_dim", self.feature_dim),
            ("num_factions", self.num_factions),
            ("annotations_per_sample", self.annotations_per_sample),
        ] {
            if value == 0 {
                return Err(SynthError::NonPositive { field });
            }
        }
        if self.num_factions > self.num_annotators {
            return Err(SynthError::TooManyFactions {
                factions: self.num_factions,
                annotators: self.num_annotators,
            });
        }
        if self.annotations_per_sample > self.num_annotators {
            return Err(SynthError::TooManyAnnotations {
                aps: self.annotations_per_sample,
                annotators: self.num_annotators,
            });
        }
        if !(0.0..0.5).contains(&self.per_annotator_flip_rate) {
            return Err(SynthError::BadFlipRate { rate: self.per_annotator_flip_rate });
        }
        if !self.faction_boundary_angle.is_finite() {
            return Err(SynthError::BadAngle { angle: self.faction_boundary_angle });
        }
        Ok(())
    }
}

/// The planted hyperplane normals: the teacher `u` and one unit normal per
/// faction, all deterministic in `(seed, feature_dim)`. Exposed so tests can
/// brute-force expected labels for any generated point.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedGeometry {
    pub teacher: Array1<f64>,
    pub faction_normals: Vec<Array1<f64>>,
}

pub fn planted_geometry(config: &SynthConfig) -> PlantedGeometry {
    let d = config.feature_dim;
    let mut r = rng::stream(config.seed, &[tags::TEACHER]);
    let draw = |r: &mut rand_chacha::ChaCha8Rng| -> Array1<f64> {
        Array1::from_iter((0..d).map(|_| StandardNormal.sample(r)))
    };
    let normalize = |x: Array1<f64>| -> Option<Array1<f64>> {
        let norm = x.dot(&x).sqrt();
        (norm > 1e-9).then(|| x / norm)
    };
    let teacher = loop {
        if let Some(u) = normalize(draw(&mut r)) {
            break u;
        }
    };
    // one dimension has no orthogonal direction; rotations degenerate to ±u
    let ortho = if d == 1 {
        teacher.clone()
    } else {
        loop {
            let raw = draw(&mut r);
            let candidate = &raw - &(teacher.clone() * raw.dot(&teacher));
            if let Some(v) = normalize(candidate) {
                break v;
            }
        }
    };
    let faction_normals = (0..config.num_factions)
        .map(|f| {
            let phi = f as f64 * config.faction_boundary_angle;
            &teacher * phi.cos() + &ortho * phi.sin()
        })
        .collect();
    PlantedGeometry { teacher, faction_normals }
}

/// Class of a point under a hyperplane: 1 on the normal's side.
pub fn side_label(normal: &Array1<f64>, x: &ndarray::ArrayView1<f64>) -> usize {
    (normal.dot(x) >= 0.0) as usize
}

/// Deterministic synthetic dataset per the faction construction. Annotator
/// indices come out in first-appearance order, so the dataset round-trips
/// through JSONL unchanged.
pub fn generate_synthetic(config: &SynthConfig) -> Result<Dataset, SynthError> {
    config.validate()?;
    let n = config.num_samples;
    let d = config.feature_dim;
    let a_total = config.num_annotators;

    let mut feature_rng = rng::stream(config.seed, &[tags::FEATURES]);
    let mut features = Array2::zeros((n, d));
    for v in features.iter_mut() {
        *v = StandardNormal.sample(&mut feature_rng);
    }

    let geometry = planted_geometry(config);
    let ground_truth: Vec<usize> =
        (0..n).map(|s| side_label(&geometry.teacher, &features.row(s))).collect();

    let mut subset_rng = rng::stream(config.seed, &[tags::SUBSET]);
    let mut flip_rng = rng::stream(config.seed, &[tags::FLIP]);
    let mut entries = Vec::with_capacity(n * config.annotations_per_sample);
    for s in 0..n {
        let annotators =
            rng::sample_indices(&mut subset_rng, a_total, config.annotations_per_sample);
        for a in annotators {
            let faction = a % config.num_factions;
            let mut label = side_label(&geometry.faction_normals[faction], &features.row(s));
            if config.per_annotator_flip_rate > 0.0
                && flip_rng.random_range(0.0..1.0) < config.per_annotator_flip_rate
            {
                label = 1 - label;
            }
            entries.push((s, a, label));
        }
    }

    let matrix = AnnotationMatrix::from_entries(n, a_total, 2, entries)?;
    let sample_ids = (0..n).map(|s| format!("s{s:06}")).collect();
    let annotator_ids = (0..a_total).map(|a| format!("a{a:02}")).collect();
    let dataset =
        Dataset::new(features, matrix, sample_ids, annotator_ids, Some(ground_truth))?;
    Ok(dataset.canonicalize_annotators())
}

// ============================================================================
// Noise injection
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Flip every present annotation on `round(rate·N)` chosen samples.
    #[default]
    Sample,
    /// Flip `round(rate·cells)` individual annotations (ablation).
    Annotation,
}

impl std::str::FromStr for NoiseMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sample" => Ok(NoiseMode::Sample),
            "annotation" => Ok(NoiseMode::Annotation),
            _ => Err(format!("unknown noise mode {s:?} (expected sample or annotation)")),
        }
    }
}

/// Which cells a noise pass flipped; reapplying the same flips restores the
/// original dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub rate: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: NoiseMode,
    /// Flipped `(sample, annotator)` cells, ascending.
    pub flipped: Vec<(usize, usize)>,
}

impl NoiseRecord {
    /// Distinct samples touched by the flips.
    pub fn flipped_samples(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.flipped.iter().map(|&(s, _)| s).collect();
        out.dedup(); // flipped is sorted by construction
        out
    }
}

/// Sample-level label-flip noise: chooses exactly `round(rate·N)` samples
/// without replacement and flips every present annotation on them. Features,
/// ground truth, and the missingness pattern never change.
pub fn inject_noise(
    dataset: &Dataset,
    rate: f64,
    seed: u64,
) -> Result<(Dataset, NoiseRecord), SynthError> {
    inject_noise_with_mode(dataset, rate, seed, NoiseMode::Sample)
}

pub fn inject_noise_with_mode(
    dataset: &Dataset,
    rate: f64,
    seed: u64,
    mode: NoiseMode,
) -> Result<(Dataset, NoiseRecord), SynthError> {
    if dataset.num_classes() != 2 {
        return Err(SynthError::NotBinary { num_classes: dataset.num_classes() });
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(SynthError::BadNoiseRate { rate });
    }
    let mut r = rng::stream(seed, &[tags::NOISE]);
    let cells: Vec<(usize, usize)> = match mode {
        NoiseMode::Sample => {
            let n = dataset.num_samples();
            let k = (rate * n as f64).round() as usize;
            let chosen = rng::sample_indices(&mut r, n, k);
            chosen
                .iter()
                .flat_map(|&s| {
                    dataset.annotations.sample_row(s).into_iter().map(move |(a, _)| (s, a))
                })
                .collect()
        }
        NoiseMode::Annotation => {
            let all: Vec<(usize, usize)> =
                dataset.annotations.iter().map(|(s, a, _)| (s, a)).collect();
            let k = (rate * all.len() as f64).round() as usize;
            rng::sample_indices(&mut r, all.len(), k)
                .into_iter()
                .map(|i| all[i])
                .collect()
        }
    };

    let flip_set: std::collections::BTreeSet<(usize, usize)> = cells.iter().copied().collect();
    let entries = dataset.annotations.iter().map(|(s, a, c)| {
        let label = if flip_set.contains(&(s, a)) { 1 - c } else { c };
        (s, a, label)
    });
    let matrix = AnnotationMatrix::from_entries(
        dataset.num_samples(),
        dataset.num_annotators(),
        2,
        entries,
    )?;
    let noisy = Dataset {
        features: dataset.features.clone(),
        annotations: matrix,
        sample_ids: dataset.sample_ids.clone(),
        annotator_ids: dataset.annotator_ids.clone(),
        ground_truth: dataset.ground_truth.clone(),
    };
    let record = NoiseRecord { rate, seed, mode, flipped: cells };
    Ok((noisy, record))
}
