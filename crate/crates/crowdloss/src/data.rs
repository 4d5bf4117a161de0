//! Canonical data model for multi-annotator datasets.
//!
//! Annotations are stored sparsely: a `(sample, annotator)` key that is
//! absent means "not annotated", never "class 0". Datasets are immutable
//! after construction and safe to share across threads.
//!
//! The on-disk interchange format is JSONL, one sample per line:
//!
//! ```text
//! {"id": "<string>", "features": [<real>, ...],
//!  "annotations": {"<annotator_id>": <class index>, ...},
//!  "truth": <class index, optional>}
//! ```
//!
//! Annotator ids are mapped to dense indices `[0, A)` in order of first
//! appearance in the file. The number of classes is inferred as one plus the
//! largest class index seen (annotations and truth), with a floor of 2.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no annotations")]
    NoAnnotations,
    #[error("variance formula defined for binary labels (got {num_classes} classes)")]
    NotBinary { num_classes: usize },
    #[error("duplicate annotation for sample {sample}, annotator {annotator}")]
    DuplicateEntry { sample: usize, annotator: usize },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid dataset: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(violations: &[Violation]) -> String {
    let parts: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
    parts.join("; ")
}

/// A single invariant violation found by [`Dataset::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnannotatedSample { sample: usize, id: String },
    SampleIndexOutOfRange { sample: usize },
    AnnotatorIndexOutOfRange { sample: usize, annotator: usize },
    ClassOutOfRange { sample: usize, annotator: usize, class: usize },
    NonFiniteFeature { sample: usize, id: String, dim: usize },
    FeatureRowCountMismatch { features: usize, samples: usize },
    SampleIdCountMismatch { ids: usize, samples: usize },
    AnnotatorIdCountMismatch { ids: usize, annotators: usize },
    GroundTruthLengthMismatch { truth: usize, samples: usize },
    GroundTruthClassOutOfRange { sample: usize, class: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnannotatedSample { sample, id } => {
                write!(f, "sample {sample} ({id:?}) has no annotations")
            }
            Violation::SampleIndexOutOfRange { sample } => {
                write!(f, "annotation refers to sample index {sample} out of range")
            }
            Violation::AnnotatorIndexOutOfRange { sample, annotator } => {
                write!(f, "sample {sample}: annotator index {annotator} out of range")
            }
            Violation::ClassOutOfRange { sample, annotator, class } => {
                write!(f, "sample {sample}, annotator {annotator}: class {class} out of range")
            }
            Violation::NonFiniteFeature { sample, id, dim } => {
                write!(f, "sample {sample} ({id:?}): non-finite feature at dim {dim}")
            }
            Violation::FeatureRowCountMismatch { features, samples } => {
                write!(f, "feature rows ({features}) != sample count ({samples})")
            }
            Violation::SampleIdCountMismatch { ids, samples } => {
                write!(f, "sample ids ({ids}) != sample count ({samples})")
            }
            Violation::AnnotatorIdCountMismatch { ids, annotators } => {
                write!(f, "annotator ids ({ids}) != annotator count ({annotators})")
            }
            Violation::GroundTruthLengthMismatch { truth, samples } => {
                write!(f, "ground truth length ({truth}) != sample count ({samples})")
            }
            Violation::GroundTruthClassOutOfRange { sample, class } => {
                write!(f, "ground truth for sample {sample}: class {class} out of range")
            }
        }
    }
}

// ============================================================================
// Majority vote and annotation variance
// ============================================================================

/// Result of a majority vote over one sample's present annotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Majority {
    /// The modal class. Ties resolve to the lowest class index.
    pub class: usize,
    /// Modal count divided by the number of present annotations.
    pub vote_fraction: f64,
    /// True when two or more classes share the modal count.
    pub tie: bool,
}

/// Majority vote over present labels. Ties resolve to the lowest class index
/// with the tie flag set.
pub fn majority_vote(labels: &[usize], num_classes: usize) -> Result<Majority, DataError> {
    if labels.is_empty() {
        return Err(DataError::NoAnnotations);
    }
    let mut counts = vec![0usize; num_classes];
    for &c in labels {
        counts[c] += 1;
    }
    let best = *counts.iter().max().expect("non-empty counts");
    let class = counts.iter().position(|&c| c == best).expect("max exists");
    let tie = counts.iter().filter(|&&c| c == best).count() > 1;
    Ok(Majority {
        class,
        vote_fraction: best as f64 / labels.len() as f64,
        tie,
    })
}

/// Annotation variance for binary labels:
/// `count(1) * count(0) / total^2`, computed over present annotations only.
/// Maximal (0.25) at an even split, zero iff unanimous.
pub fn annotation_variance(labels: &[usize], num_classes: usize) -> Result<f64, DataError> {
    if num_classes != 2 {
        return Err(DataError::NotBinary { num_classes });
    }
    if labels.is_empty() {
        return Err(DataError::NoAnnotations);
    }
    let ones = labels.iter().filter(|&&c| c == 1).count();
    let zeros = labels.len() - ones;
    let total = labels.len() as f64;
    Ok(ones as f64 * zeros as f64 / (total * total))
}

// ============================================================================
// AnnotationMatrix
// ============================================================================

/// Sparse per-sample, per-annotator class labels with explicit missingness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMatrix {
    num_samples: usize,
    num_annotators: usize,
    num_classes: usize,
    entries: BTreeMap<(usize, usize), usize>,
}

impl AnnotationMatrix {
    /// Builds a matrix from `(sample, annotator, class)` triples. Rejects
    /// duplicate `(sample, annotator)` pairs; index-range and coverage
    /// invariants are checked by [`AnnotationMatrix::violations`].
    pub fn from_entries(
        num_samples: usize,
        num_annotators: usize,
        num_classes: usize,
        entries: impl IntoIterator<Item = (usize, usize, usize)>,
    ) -> Result<Self, DataError> {
        let mut map = BTreeMap::new();
        for (sample, annotator, class) in entries {
            if map.insert((sample, annotator), class).is_some() {
                return Err(DataError::DuplicateEntry { sample, annotator });
            }
        }
        Ok(Self {
            num_samples,
            num_annotators,
            num_classes,
            entries: map,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_annotators(&self) -> usize {
        self.num_annotators
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_annotations(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, sample: usize, annotator: usize) -> Option<usize> {
        self.entries.get(&(sample, annotator)).copied()
    }

    /// All `(annotator, class)` pairs for one sample, ascending by annotator.
    pub fn sample_row(&self, sample: usize) -> Vec<(usize, usize)> {
        self.entries
            .range((sample, 0)..=(sample, usize::MAX))
            .map(|(&(_, a), &c)| (a, c))
            .collect()
    }

    /// Iterates all `(sample, annotator, class)` triples in key order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.entries.iter().map(|(&(s, a), &c)| (s, a, c))
    }

    /// Majority vote for one sample's present annotations.
    pub fn majority(&self, sample: usize) -> Result<Majority, DataError> {
        let labels: Vec<usize> = self.sample_row(sample).iter().map(|&(_, c)| c).collect();
        majority_vote(&labels, self.num_classes)
    }

    /// Annotation variance for one sample (binary labels only).
    pub fn annotation_variance(&self, sample: usize) -> Result<f64, DataError> {
        let labels: Vec<usize> = self.sample_row(sample).iter().map(|&(_, c)| c).collect();
        annotation_variance(&labels, self.num_classes)
    }

    /// Number of annotations contributed by each annotator.
    pub fn annotations_per_annotator(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_annotators];
        for (&(_, a), _) in &self.entries {
            if a < self.num_annotators {
                counts[a] += 1;
            }
        }
        counts
    }

    fn violations(&self, sample_ids: &[String]) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut annotated = vec![false; self.num_samples];
        for (&(s, a), &c) in &self.entries {
            if s >= self.num_samples {
                out.push(Violation::SampleIndexOutOfRange { sample: s });
                continue;
            }
            annotated[s] = true;
            if a >= self.num_annotators {
                out.push(Violation::AnnotatorIndexOutOfRange { sample: s, annotator: a });
            }
            if c >= self.num_classes {
                out.push(Violation::ClassOutOfRange { sample: s, annotator: a, class: c });
            }
        }
        for (s, &has) in annotated.iter().enumerate() {
            if !has {
                let id = sample_ids.get(s).cloned().unwrap_or_default();
                out.push(Violation::UnannotatedSample { sample: s, id });
            }
        }
        out
    }
}

// ============================================================================
// Dataset
// ============================================================================

/// Feature vectors plus sparse annotations, with optional planted truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N x D input features.
    pub features: Array2<f64>,
    pub annotations: AnnotationMatrix,
    pub sample_ids: Vec<String>,
    /// External annotator id for each dense annotator index.
    pub annotator_ids: Vec<String>,
    /// Planted class per sample; present only for synthetic data.
    pub ground_truth: Option<Vec<usize>>,
}

impl Dataset {
    /// Builds and fully validates a dataset.
    pub fn new(
        features: Array2<f64>,
        annotations: AnnotationMatrix,
        sample_ids: Vec<String>,
        annotator_ids: Vec<String>,
        ground_truth: Option<Vec<usize>>,
    ) -> Result<Self, DataError> {
        let d = Self::from_parts(features, annotations, sample_ids, annotator_ids, ground_truth);
        let violations = d.validate();
        if violations.is_empty() {
            Ok(d)
        } else {
            Err(DataError::Invalid(violations))
        }
    }

    /// Builds a dataset without validation. Use [`Dataset::validate`] to
    /// collect violations afterward.
    pub fn from_parts(
        features: Array2<f64>,
        annotations: AnnotationMatrix,
        sample_ids: Vec<String>,
        annotator_ids: Vec<String>,
        ground_truth: Option<Vec<usize>>,
    ) -> Self {
        Self {
            features,
            annotations,
            sample_ids,
            annotator_ids,
            ground_truth,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.annotations.num_samples()
    }

    pub fn num_annotators(&self) -> usize {
        self.annotations.num_annotators()
    }

    pub fn num_classes(&self) -> usize {
        self.annotations.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Checks every invariant and returns all violations, not just the first.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = self.annotations.violations(&self.sample_ids);
        let n = self.num_samples();
        if self.features.nrows() != n {
            out.push(Violation::FeatureRowCountMismatch {
                features: self.features.nrows(),
                samples: n,
            });
        }
        if self.sample_ids.len() != n {
            out.push(Violation::SampleIdCountMismatch { ids: self.sample_ids.len(), samples: n });
        }
        if self.annotator_ids.len() != self.num_annotators() {
            out.push(Violation::AnnotatorIdCountMismatch {
                ids: self.annotator_ids.len(),
                annotators: self.num_annotators(),
            });
        }
        for (s, row) in self.features.rows().into_iter().enumerate() {
            if s >= n {
                break;
            }
            for (dim, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    let id = self.sample_ids.get(s).cloned().unwrap_or_default();
                    out.push(Violation::NonFiniteFeature { sample: s, id, dim });
                }
            }
        }
        if let Some(truth) = &self.ground_truth {
            if truth.len() != n {
                out.push(Violation::GroundTruthLengthMismatch { truth: truth.len(), samples: n });
            }
            for (s, &c) in truth.iter().enumerate() {
                if c >= self.num_classes() {
                    out.push(Violation::GroundTruthClassOutOfRange { sample: s, class: c });
                }
            }
        }
        out
    }

    /// Majority vote per sample. Requires a valid dataset (every sample
    /// carries at least one annotation).
    pub fn majorities(&self) -> Result<Vec<Majority>, DataError> {
        (0..self.num_samples()).map(|s| self.annotations.majority(s)).collect()
    }

    /// Collapses to a single virtual annotator labeled with each sample's
    /// majority class. Used by the baseline (single-head) training arms.
    pub fn to_majority_view(&self) -> Result<Dataset, DataError> {
        let majorities = self.majorities()?;
        let entries = majorities.iter().enumerate().map(|(s, m)| (s, 0, m.class));
        let annotations =
            AnnotationMatrix::from_entries(self.num_samples(), 1, self.num_classes(), entries)?;
        Ok(Dataset {
            features: self.features.clone(),
            annotations,
            sample_ids: self.sample_ids.clone(),
            annotator_ids: vec!["majority".to_string()],
            ground_truth: self.ground_truth.clone(),
        })
    }

    /// Renumbers annotators into first-appearance order (scanning samples in
    /// order, annotators within a sample in ascending dense order). A dataset
    /// in this canonical order survives a save/load round trip unchanged.
    pub fn canonicalize_annotators(&self) -> Dataset {
        let mut order: Vec<usize> = Vec::with_capacity(self.num_annotators());
        let mut seen = vec![false; self.num_annotators()];
        for s in 0..self.num_samples() {
            for (a, _) in self.annotations.sample_row(s) {
                if !seen[a] {
                    seen[a] = true;
                    order.push(a);
                }
            }
        }
        // annotators that never annotated anything keep relative order at the end
        for a in 0..self.num_annotators() {
            if !seen[a] {
                order.push(a);
            }
        }
        let mut remap = vec![0usize; self.num_annotators()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new;
        }
        let entries = self.annotations.iter().map(|(s, a, c)| (s, remap[a], c));
        let annotations = AnnotationMatrix::from_entries(
            self.num_samples(),
            self.num_annotators(),
            self.num_classes(),
            entries,
        )
        .expect("renumbering preserves uniqueness");
        let annotator_ids = order.iter().map(|&old| self.annotator_ids[old].clone()).collect();
        Dataset {
            features: self.features.clone(),
            annotations,
            sample_ids: self.sample_ids.clone(),
            annotator_ids,
            ground_truth: self.ground_truth.clone(),
        }
    }
}

// ============================================================================
// JSONL I/O
// ============================================================================

/// One parsed line. `annotations` keeps key order and rejects duplicates.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    id: String,
    features: Vec<f64>,
    annotations: AnnotationPairs,
    #[serde(default)]
    truth: Option<usize>,
}

struct AnnotationPairs(Vec<(String, usize)>);

impl<'de> Deserialize<'de> for AnnotationPairs {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PairsVisitor;
        impl<'de> Visitor<'de> for PairsVisitor {
            type Value = AnnotationPairs;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a map of annotator id to class index")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut pairs = Vec::new();
                while let Some((key, value)) = map.next_entry::<String, serde_json::Value>()? {
                    let class = value
                        .as_u64()
                        .ok_or_else(|| {
                            serde::de::Error::custom(format!(
                                "unknown class label {value} for annotator {key:?}"
                            ))
                        })?;
                    pairs.push((key, class as usize));
                }
                Ok(AnnotationPairs(pairs))
            }
        }
        deserializer.deserialize_map(PairsVisitor)
    }
}

/// Reads a JSONL dataset. Errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset, DataError> {
    let parse_err = |line: usize, message: String| DataError::Parse { line, message };

    let mut features: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut sample_ids = Vec::new();
    let mut annotator_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut annotator_ids: Vec<String> = Vec::new();
    let mut entries: Vec<(usize, usize, usize)> = Vec::new();
    let mut truths: Vec<Option<usize>> = Vec::new();
    let mut max_class = 1usize; // floor of two classes

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(&line)
            .map_err(|e| parse_err(lineno, e.to_string()))?;
        let sample = sample_ids.len();
        match dim {
            None => dim = Some(raw.features.len()),
            Some(d) if d != raw.features.len() => {
                return Err(parse_err(
                    lineno,
                    format!("feature dimensionality {} != {} from first line", raw.features.len(), d),
                ));
            }
            _ => {}
        }
        if raw.annotations.0.is_empty() {
            return Err(parse_err(lineno, format!("sample {:?} has no annotations", raw.id)));
        }
        let mut seen_this_line: Vec<usize> = Vec::new();
        for (annotator_id, class) in raw.annotations.0 {
            let a = *annotator_index.entry(annotator_id.clone()).or_insert_with(|| {
                annotator_ids.push(annotator_id.clone());
                annotator_ids.len() - 1
            });
            if seen_this_line.contains(&a) {
                return Err(parse_err(
                    lineno,
                    format!("duplicate annotator {annotator_id:?} on sample {:?}", raw.id),
                ));
            }
            seen_this_line.push(a);
            max_class = max_class.max(class);
            entries.push((sample, a, class));
        }
        if let Some(t) = raw.truth {
            max_class = max_class.max(t);
        }
        truths.push(raw.truth);
        features.extend_from_slice(&raw.features);
        sample_ids.push(raw.id);
    }

    if sample_ids.is_empty() {
        return Err(parse_err(0, "empty dataset".to_string()));
    }
    let ground_truth = if truths.iter().all(|t| t.is_none()) {
        None
    } else if truths.iter().all(|t| t.is_some()) {
        Some(truths.into_iter().map(|t| t.expect("checked")).collect())
    } else {
        let missing = truths.iter().position(|t| t.is_none()).expect("mixed truth") + 1;
        return Err(parse_err(missing, "truth present on some lines but not all".to_string()));
    };

    let n = sample_ids.len();
    let d = dim.expect("non-empty dataset has a dimension");
    let num_classes = max_class + 1;
    let matrix = AnnotationMatrix::from_entries(n, annotator_ids.len(), num_classes, entries)?;
    let features = Array2::from_shape_vec((n, d), features)
        .map_err(|e| parse_err(0, format!("feature shape: {e}")))?;
    let dataset = Dataset::from_parts(features, matrix, sample_ids, annotator_ids, ground_truth);
    let violations = dataset.validate();
    if violations.is_empty() {
        Ok(dataset)
    } else {
        Err(DataError::Invalid(violations))
    }
}

/// Loads a JSONL dataset from a path.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

/// Serializer that keeps annotations in dense-annotator order.
struct OrderedAnnotations<'a>(Vec<(&'a str, usize)>);

impl Serialize for OrderedAnnotations<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

#[derive(Serialize)]
struct RawSampleOut<'a> {
    id: &'a str,
    features: Vec<f64>,
    annotations: OrderedAnnotations<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<usize>,
}

/// Writes the JSONL form. Feature values round-trip exactly through JSON.
pub fn write_jsonl<W: Write>(mut writer: W, dataset: &Dataset) -> Result<(), DataError> {
    for s in 0..dataset.num_samples() {
        let annotations = OrderedAnnotations(
            dataset
                .annotations
                .sample_row(s)
                .into_iter()
                .map(|(a, c)| (dataset.annotator_ids[a].as_str(), c))
                .collect(),
        );
        let out = RawSampleOut {
            id: &dataset.sample_ids[s],
            features: dataset.features.row(s).to_vec(),
            annotations,
            truth: dataset.ground_truth.as_ref().map(|t| t[s]),
        };
        let line = serde_json::to_string(&out).expect("dataset line serializes");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// The JSONL text of a dataset.
pub fn to_jsonl_string(dataset: &Dataset) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, dataset).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("jsonl is utf-8")
}
