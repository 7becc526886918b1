//! Corpus assembly: lesion records, mining, patient-disjoint splits, label
//! statistics, rare-label filtering, and synthetic corpus generation.

mod synth;

pub use synth::{synth_generate, SynthOutput, SynthStats};

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{LabelId, LabelVector, Ontology};
use crate::textmine::{mine_sentence, Sentence};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("failed to read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {source}")]
    Jsonl {
        line: usize,
        source: serde_json::Error,
    },
    #[error("record {lesion_id:?}: {message}")]
    Record { lesion_id: String, message: String },
    #[error("patient split needs at least 2 distinct patients, found {found}")]
    TooFewPatients { found: usize },
    #[error("test fraction must be in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("no labels retained after filtering at min_count {min_count}")]
    NoLabelsRetained { min_count: usize },
    #[error("invalid synthetic config: {0}")]
    BadSynthConfig(String),
}

/// One lesion-sentence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub lesion_id: String,
    pub patient_id: String,
    pub sentence: String,
    /// (x0, y0, x1, y1) in mm within the patch frame.
    pub bbox_mm: [f64; 4],
    pub slice_mm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_ref: Option<String>,
    /// Complete expanded ground-truth label ids; synthetic corpora only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_labels: Option<Vec<LabelId>>,
}

impl LesionRecord {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let [x0, y0, x1, y1] = self.bbox_mm;
        if !(x0 < x1 && y0 < y1) {
            return Err(DatasetError::Record {
                lesion_id: self.lesion_id.clone(),
                message: format!("degenerate bbox [{x0}, {y0}, {x1}, {y1}]"),
            });
        }
        if self.patient_id.is_empty() {
            return Err(DatasetError::Record {
                lesion_id: self.lesion_id.clone(),
                message: "empty patient_id".into(),
            });
        }
        Ok(())
    }
}

/// Per-label positive/negative counts over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub n_pos: Vec<usize>,
    pub n_neg: Vec<usize>,
}

/// Mined output row: `{lesion_id, label_ids, label_names}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MinedRecord {
    pub lesion_id: String,
    pub label_ids: Vec<LabelId>,
    pub label_names: Vec<String>,
}

/// Reads a JSON-lines corpus, validating every record.
pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<LesionRecord>, DatasetError> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LesionRecord =
            serde_json::from_str(&line).map_err(|source| DatasetError::Jsonl {
                line: idx + 1,
                source,
            })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Writes records as JSON-lines, one record per line.
pub fn write_records(
    path: impl AsRef<Path>,
    records: &[LesionRecord],
) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|source| DatasetError::Jsonl {
            line: 0,
            source,
        })?;
        writeln!(f)?;
    }
    Ok(())
}

/// Pairs every record with its mined, expanded label vector. Records whose
/// sentences yield nothing are kept with a zero vector.
pub fn build_corpus(
    records: &[LesionRecord],
    ontology: &Ontology,
) -> Vec<(LesionRecord, LabelVector)> {
    records
        .par_iter()
        .map(|r| {
            let v = mine_sentence(&Sentence::new(r.sentence.clone()), ontology);
            (r.clone(), v)
        })
        .collect()
}

/// Index partition of a corpus into train and test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Patient-disjoint split. Patients are shuffled by seed and assigned to the
/// test side greedily until the test lesion count reaches
/// `test_fraction * n`; everyone else trains. No patient appears on both
/// sides, and both sides are non-empty.
pub fn patient_split<T>(
    items: &[T],
    patient_id: impl Fn(&T) -> &str,
    test_fraction: f64,
    seed: u64,
) -> Result<SplitIndices, DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::BadFraction(test_fraction));
    }

    // patients in first-appearance order, then shuffled
    let mut patient_order: Vec<&str> = Vec::new();
    let mut lesions_of: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, item) in items.iter().enumerate() {
        let pid = patient_id(item);
        lesions_of
            .entry(pid)
            .or_insert_with(|| {
                patient_order.push(pid);
                Vec::new()
            })
            .push(i);
    }
    if patient_order.len() < 2 {
        return Err(DatasetError::TooFewPatients {
            found: patient_order.len(),
        });
    }

    let mut rng = StdRng::seed_from_u64(seed);
    patient_order.shuffle(&mut rng);

    let target = test_fraction * items.len() as f64;
    let mut split = SplitIndices {
        train: Vec::new(),
        test: Vec::new(),
    };
    for (rank, pid) in patient_order.iter().enumerate() {
        let lesions = &lesions_of[pid];
        let last = rank + 1 == patient_order.len();
        let to_test = (split.test.len() as f64) < target && !(last && split.train.is_empty());
        if to_test {
            split.test.extend_from_slice(lesions);
        } else {
            split.train.extend_from_slice(lesions);
        }
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// View of a reduced label space after rare-label filtering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSubset {
    /// Retained ontology label ids, ascending.
    pub kept: Vec<LabelId>,
}

impl LabelSubset {
    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }

    /// Position of an ontology id in the reduced space.
    pub fn index_of(&self, id: LabelId) -> Option<usize> {
        self.kept.binary_search(&id).ok()
    }

    /// Projects a full K-vector down to the retained labels.
    pub fn project(&self, full: &LabelVector) -> LabelVector {
        self.kept.iter().map(|&id| full[id]).collect()
    }

    /// Maps reduced-space scores back to a full K-vector (zeros elsewhere).
    pub fn lift(&self, reduced: &[f64], k: usize) -> Vec<f64> {
        let mut full = vec![0.0; k];
        for (i, &id) in self.kept.iter().enumerate() {
            full[id] = reduced[i];
        }
        full
    }
}

/// Keeps labels whose positive count in the test set is strictly greater
/// than `min_count`.
pub fn filter_labels(
    test: &[(LesionRecord, LabelVector)],
    ontology: &Ontology,
    min_count: usize,
) -> Result<LabelSubset, DatasetError> {
    let k = ontology.num_labels();
    let mut counts = vec![0usize; k];
    for (_, v) in test {
        for (c, &on) in v.iter().enumerate() {
            if on {
                counts[c] += 1;
            }
        }
    }
    let kept: Vec<LabelId> = (0..k).filter(|&c| counts[c] > min_count).collect();
    if kept.is_empty() {
        return Err(DatasetError::NoLabelsRetained { min_count });
    }
    Ok(LabelSubset { kept })
}

/// Exact positive/negative counts per label over a training set.
pub fn label_stats(train: &[(LesionRecord, LabelVector)]) -> LabelStats {
    label_stats_from_vectors(train.iter().map(|(_, v)| v))
}

pub fn label_stats_from_vectors<'a>(
    vectors: impl IntoIterator<Item = &'a LabelVector>,
) -> LabelStats {
    let mut n_pos: Vec<usize> = Vec::new();
    let mut total = 0usize;
    for v in vectors {
        if n_pos.is_empty() {
            n_pos = vec![0; v.len()];
        }
        for (c, &on) in v.iter().enumerate() {
            if on {
                n_pos[c] += 1;
            }
        }
        total += 1;
    }
    let n_neg = n_pos.iter().map(|&p| total - p).collect();
    LabelStats { n_pos, n_neg }
}

/// Controls the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_labels: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Probability that a true leaf label is left out of the sentence.
    pub missing_rate: f64,
    /// Probability that one irrelevant label is mentioned.
    pub spurious_rate: f64,
    pub rng_seed: u64,
    /// Edge length of the rendered square patches, in pixels (1 mm each).
    #[serde(default = "default_patch_px")]
    pub patch_px: usize,
}

fn default_patch_px() -> usize {
    32
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_labels: 40,
            n_train: 5000,
            n_test: 1000,
            missing_rate: 0.3,
            spurious_rate: 0.05,
            rng_seed: 0,
            patch_px: default_patch_px(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(0.0..=1.0).contains(&self.missing_rate) {
            return Err(DatasetError::BadSynthConfig(format!(
                "missing_rate must be in [0, 1], got {}",
                self.missing_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.spurious_rate) {
            return Err(DatasetError::BadSynthConfig(format!(
                "spurious_rate must be in [0, 1], got {}",
                self.spurious_rate
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(DatasetError::BadSynthConfig(
                "n_train and n_test must be positive".into(),
            ));
        }
        if self.n_labels < synth::MIN_LABELS {
            return Err(DatasetError::BadSynthConfig(format!(
                "n_labels must be at least {}, got {}",
                synth::MIN_LABELS,
                self.n_labels
            )));
        }
        if self.patch_px < 16 {
            return Err(DatasetError::BadSynthConfig(format!(
                "patch_px must be at least 16, got {}",
                self.patch_px
            )));
        }
        Ok(())
    }
}
