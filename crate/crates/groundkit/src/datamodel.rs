//! Universal triplet/VQA data types and the volume-level dataset split.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The reserved segmentation token. Matched as an exact, case-sensitive
/// literal substring; it is a vocabulary item, not prose.
pub const SEG_TOKEN: &str = "[SEG]";

/// The textual marker for negative (healthy) samples. Compared
/// case-insensitively after whitespace normalization.
pub const NO_FINDINGS: &str = "No findings";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    CT,
    MRI,
    XRay,
    Pathology,
    Ultrasound,
    Fundus,
    Dermoscopy,
    Endoscope,
    OCT,
    PET,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::CT => "CT",
            Modality::MRI => "MRI",
            Modality::XRay => "X-ray",
            Modality::Pathology => "pathology",
            Modality::Ultrasound => "ultrasound",
            Modality::Fundus => "fundus",
            Modality::Dermoscopy => "dermoscopy",
            Modality::Endoscope => "endoscope",
            Modality::OCT => "OCT",
            Modality::PET => "PET",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ct" => Ok(Modality::CT),
            "mri" => Ok(Modality::MRI),
            "xray" | "x-ray" => Ok(Modality::XRay),
            "pathology" => Ok(Modality::Pathology),
            "ultrasound" => Ok(Modality::Ultrasound),
            "fundus" => Ok(Modality::Fundus),
            "dermoscopy" => Ok(Modality::Dermoscopy),
            "endoscope" => Ok(Modality::Endoscope),
            "oct" => Ok(Modality::OCT),
            "pet" => Ok(Modality::PET),
            other => Err(format!("unknown modality: {other}")),
        }
    }
}

/// A single 2D image with optional volumetric provenance.
#[derive(Debug, Clone)]
pub struct ImageSample {
    /// H×W pixel intensities. HU for raw CT, arbitrary for MRI
    /// post-normalization, [0,1] otherwise.
    pub pixels: Array2<f64>,
    pub modality: Modality,
    pub volume_id: Option<String>,
    pub slice_index: Option<usize>,
}

impl ImageSample {
    pub fn new(pixels: Array2<f64>, modality: Modality) -> Self {
        Self { pixels, modality, volume_id: None, slice_index: None }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }
}

/// Tight axis-aligned bounding box, inclusive on all four edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub row_min: usize,
    pub col_min: usize,
    pub row_max: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn contains_within(&self, h: usize, w: usize) -> bool {
        self.row_min <= self.row_max
            && self.col_min <= self.col_max
            && self.row_max < h
            && self.col_max < w
    }
}

/// Either a dense binary mask or a bounding box.
#[derive(Debug, Clone)]
pub enum Region {
    Mask(Array2<u8>),
    BBox(BBox),
}

/// A region paired with its biomedical class or finding text.
#[derive(Debug, Clone)]
pub struct RegionAnnotation {
    pub region: Region,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    Segmentation,
    DiseaseRecognition,
    RoiClassification,
    RegionReport,
    GroundedReport,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Segmentation,
        TaskKind::DiseaseRecognition,
        TaskKind::RoiClassification,
        TaskKind::RegionReport,
        TaskKind::GroundedReport,
    ];

    /// Whether training samples of this task carry a target mask.
    pub fn requires_mask(&self) -> bool {
        matches!(
            self,
            TaskKind::Segmentation | TaskKind::DiseaseRecognition | TaskKind::GroundedReport
        )
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "segmentation" | "seg" => Ok(TaskKind::Segmentation),
            "diseaserecognition" | "disease" => Ok(TaskKind::DiseaseRecognition),
            "roiclassification" | "roi" => Ok(TaskKind::RoiClassification),
            "regionreport" | "region" => Ok(TaskKind::RegionReport),
            "groundedreport" | "grounded" => Ok(TaskKind::GroundedReport),
            other => Err(format!("unknown task: {other}")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TaskKind::Segmentation => "segmentation",
            TaskKind::DiseaseRecognition => "disease_recognition",
            TaskKind::RoiClassification => "roi_classification",
            TaskKind::RegionReport => "region_report",
            TaskKind::GroundedReport => "grounded_report",
        };
        f.write_str(s)
    }
}

/// The universal training unit: image, question, answer, optional mask.
#[derive(Debug, Clone)]
pub struct VqaSample {
    pub id: String,
    pub image: ImageSample,
    pub question: String,
    pub answer: String,
    pub target_mask: Option<Array2<u8>>,
    pub task: TaskKind,
}

impl VqaSample {
    /// Key used for the volume-level split. 2D-native samples act as their
    /// own one-slice volume.
    pub fn volume_key(&self) -> &str {
        self.image.volume_id.as_deref().unwrap_or(&self.id)
    }
}

/// Generated answer plus zero-or-one predicted mask.
#[derive(Debug, Clone)]
pub struct GroundedOutput {
    pub answer: String,
    pub mask: Option<Array2<u8>>,
    pub mask_logits: Option<Array2<f64>>,
}

/// Collapse whitespace runs and trim; used for "No findings" detection and
/// accuracy normalization.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-insensitive "No findings" check after whitespace normalization.
pub fn is_no_findings(answer: &str) -> bool {
    normalize_text(answer).eq_ignore_ascii_case(NO_FINDINGS)
}

/// Whether the answer obliges a mask in the output: either it carries the
/// [SEG] token or it is the "No findings" negative (all-zero mask).
pub fn answer_expects_mask(answer: &str) -> bool {
    answer.contains(SEG_TOKEN) || is_no_findings(answer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Dataset with its volume-level split assignment.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub samples: Vec<VqaSample>,
    pub split: BTreeMap<String, Split>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn new(samples: Vec<VqaSample>, seed: u64) -> Self {
        Self { samples, split: BTreeMap::new(), seed }
    }

    pub fn samples_in(&self, split: Split) -> impl Iterator<Item = &VqaSample> {
        self.samples
            .iter()
            .filter(move |s| self.split.get(s.volume_key()) == Some(&split))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("unsplittable: need at least 2 distinct volumes, got {0}")]
    Unsplittable(usize),
}

/// One entry per violated `VqaSample` invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyQuestion,
    EmptyAnswer,
    SegTokenWithoutMask,
    MaskWithoutSegToken,
    MaskForbiddenForTask(TaskKind),
    MaskRequiredForTask(TaskKind),
    MaskShapeMismatch,
    MaskNotBinary,
    NonFinitePixels,
    EmptyImage,
    SliceIndexWithoutVolumeId,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::EmptyQuestion => write!(f, "question is empty"),
            Violation::EmptyAnswer => write!(f, "answer is empty"),
            Violation::SegTokenWithoutMask => {
                write!(f, "answer implies a mask but target_mask is absent")
            }
            Violation::MaskWithoutSegToken => {
                write!(f, "target_mask present but answer neither contains [SEG] nor is a negative")
            }
            Violation::MaskForbiddenForTask(t) => write!(f, "task {t} forbids a target mask"),
            Violation::MaskRequiredForTask(t) => write!(f, "task {t} requires a target mask"),
            Violation::MaskShapeMismatch => write!(f, "target_mask shape differs from image"),
            Violation::MaskNotBinary => write!(f, "target_mask contains values outside {{0,1}}"),
            Violation::NonFinitePixels => write!(f, "image contains non-finite pixels"),
            Violation::EmptyImage => write!(f, "image has a zero dimension"),
            Violation::SliceIndexWithoutVolumeId => {
                write!(f, "slice_index present without volume_id")
            }
        }
    }
}

/// Check all `VqaSample` invariants. Violations are data, not errors: an
/// empty list means the sample is well-formed.
pub fn validate_sample(sample: &VqaSample) -> Vec<Violation> {
    let mut violations = Vec::new();
    if normalize_text(&sample.question).is_empty() {
        violations.push(Violation::EmptyQuestion);
    }
    if normalize_text(&sample.answer).is_empty() {
        violations.push(Violation::EmptyAnswer);
    }
    let (h, w) = sample.image.shape();
    if h == 0 || w == 0 {
        violations.push(Violation::EmptyImage);
    }
    if !sample.image.pixels.iter().all(|v| v.is_finite()) {
        violations.push(Violation::NonFinitePixels);
    }
    if sample.image.slice_index.is_some() && sample.image.volume_id.is_none() {
        violations.push(Violation::SliceIndexWithoutVolumeId);
    }
    let expects = answer_expects_mask(&sample.answer);
    match (&sample.target_mask, expects) {
        (None, true) => violations.push(Violation::SegTokenWithoutMask),
        (Some(_), false) => violations.push(Violation::MaskWithoutSegToken),
        _ => {}
    }
    match (&sample.target_mask, sample.task.requires_mask()) {
        (Some(_), false) => violations.push(Violation::MaskForbiddenForTask(sample.task)),
        (None, true) => violations.push(Violation::MaskRequiredForTask(sample.task)),
        _ => {}
    }
    if let Some(mask) = &sample.target_mask {
        if mask.dim() != sample.image.pixels.dim() {
            violations.push(Violation::MaskShapeMismatch);
        }
        if !mask.iter().all(|&v| v <= 1) {
            violations.push(Violation::MaskNotBinary);
        }
    }
    violations
}

/// Assign whole volumes to train/test, 80/20. Deterministic for a given
/// seed and invariant to sample order: volume keys are sorted before the
/// seeded shuffle. Test size is floor(0.2·N) but at least one volume.
pub fn split_dataset(manifest: &DatasetManifest, seed: u64) -> Result<DatasetManifest, DataError> {
    let mut keys: Vec<String> = manifest
        .samples
        .iter()
        .map(|s| s.volume_key().to_string())
        .collect();
    keys.sort();
    keys.dedup();
    if keys.len() < 2 {
        return Err(DataError::Unsplittable(keys.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    keys.shuffle(&mut rng);
    let n_test = ((keys.len() as f64 * 0.2).floor() as usize).max(1);
    let mut split = BTreeMap::new();
    for (i, key) in keys.into_iter().enumerate() {
        let s = if i < n_test { Split::Test } else { Split::Train };
        split.insert(key, s);
    }
    Ok(DatasetManifest { samples: manifest.samples.clone(), split, seed })
}
