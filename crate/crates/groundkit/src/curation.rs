//! Preprocessing and VQA curation: CT windowing, MRI z-score, axial
//! slicing, mask→bbox degradation, bbox overlay, resizing, and the
//! task-templated VQA formatting.

use std::collections::HashMap;
use std::sync::OnceLock;

use ndarray::{Array2, Array3};
use serde::Deserialize;
use thiserror::Error;

use crate::datamodel::{
    is_no_findings, BBox, ImageSample, Modality, Region, RegionAnnotation, TaskKind, VqaSample,
    NO_FINDINGS,
};

#[derive(Debug, Error, PartialEq)]
pub enum CurationError {
    #[error("wrong modality: expected {expected:?}, got {got:?}")]
    WrongModality { expected: Modality, got: Modality },
    #[error("empty mask")]
    EmptyMask,
    #[error("bbox {0:?} out of bounds for {1}x{2} image")]
    BBoxOutOfBounds(BBox, usize, usize),
    #[error("annotation kind incompatible with task {0}")]
    IncompatibleAnnotation(TaskKind),
    #[error("invalid window: low {0} must be below high {1}")]
    InvalidWindow(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyRegion {
    Chest,
    Abdomen,
}

/// HU clipping window. Chest and abdomen carry the standard bounds; other
/// regions supply their own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtWindow {
    pub low: f64,
    pub high: f64,
    pub body_region: Option<BodyRegion>,
}

impl CtWindow {
    pub fn chest() -> Self {
        Self { low: -1000.0, high: 500.0, body_region: Some(BodyRegion::Chest) }
    }

    pub fn abdomen() -> Self {
        Self { low: -175.0, high: 250.0, body_region: Some(BodyRegion::Abdomen) }
    }

    pub fn custom(low: f64, high: f64) -> Result<Self, CurationError> {
        if low >= high {
            return Err(CurationError::InvalidWindow(low, high));
        }
        Ok(Self { low, high, body_region: None })
    }
}

/// 3D scan with axial axis first, plus optional voxel-aligned masks.
#[derive(Debug, Clone)]
pub struct Volume3D {
    pub id: String,
    /// D×H×W voxels.
    pub voxels: Array3<f64>,
    pub masks: Option<Array3<u8>>,
    pub modality: Modality,
}

impl Volume3D {
    pub fn new(id: impl Into<String>, voxels: Array3<f64>, modality: Modality) -> Self {
        Self { id: id.into(), voxels, masks: None, modality }
    }
}

/// Clamp voxels to the HU window, then rescale linearly to [0,1]. Masks
/// are untouched.
pub fn window_ct(volume: &Volume3D, window: &CtWindow) -> Result<Volume3D, CurationError> {
    if volume.modality != Modality::CT {
        return Err(CurationError::WrongModality { expected: Modality::CT, got: volume.modality });
    }
    let range = window.high - window.low;
    let voxels = volume
        .voxels
        .mapv(|v| (v.clamp(window.low, window.high) - window.low) / range);
    Ok(Volume3D { voxels, ..volume.clone() })
}

const ZSCORE_EPS: f64 = 1e-8;

/// Standardize the whole volume to zero mean, unit variance (population
/// std, floored at 1e-8 for constant volumes).
pub fn zscore_mri(volume: &Volume3D) -> Result<Volume3D, CurationError> {
    if volume.modality != Modality::MRI {
        return Err(CurationError::WrongModality { expected: Modality::MRI, got: volume.modality });
    }
    let n = volume.voxels.len() as f64;
    let mean = volume.voxels.sum() / n;
    let var = volume.voxels.mapv(|v| (v - mean).powi(2)).sum() / n;
    let std = var.sqrt().max(ZSCORE_EPS);
    let voxels = volume.voxels.mapv(|v| (v - mean) / std);
    Ok(Volume3D { voxels, ..volume.clone() })
}

/// Cut the volume along the axial axis into D (image, optional mask)
/// pairs, ascending slice index, provenance attached.
pub fn slice_axial(volume: &Volume3D) -> Vec<(ImageSample, Option<Array2<u8>>)> {
    let d = volume.voxels.dim().0;
    (0..d)
        .map(|i| {
            let pixels = volume.voxels.index_axis(ndarray::Axis(0), i).to_owned();
            let image = ImageSample {
                pixels,
                modality: volume.modality,
                volume_id: Some(volume.id.clone()),
                slice_index: Some(i),
            };
            let mask = volume
                .masks
                .as_ref()
                .map(|m| m.index_axis(ndarray::Axis(0), i).to_owned());
            (image, mask)
        })
        .collect()
}

/// Tightest axis-aligned box covering all 1-pixels.
pub fn mask_to_bbox(mask: &Array2<u8>) -> Result<BBox, CurationError> {
    let mut bounds: Option<BBox> = None;
    for ((r, c), &v) in mask.indexed_iter() {
        if v > 0 {
            bounds = Some(match bounds {
                None => BBox { row_min: r, col_min: c, row_max: r, col_max: c },
                Some(b) => BBox {
                    row_min: b.row_min.min(r),
                    col_min: b.col_min.min(c),
                    row_max: b.row_max.max(r),
                    col_max: b.col_max.max(c),
                },
            });
        }
    }
    bounds.ok_or(CurationError::EmptyMask)
}

/// Paint the box border band (width `thickness`, extending inward, clipped
/// at the box) at maximum intensity 1.0.
pub fn overlay_bbox(
    image: &ImageSample,
    bbox: &BBox,
    thickness: usize,
) -> Result<ImageSample, CurationError> {
    let (h, w) = image.shape();
    if !bbox.contains_within(h, w) {
        return Err(CurationError::BBoxOutOfBounds(*bbox, h, w));
    }
    let mut out = image.clone();
    let t = thickness;
    for r in bbox.row_min..=bbox.row_max {
        for c in bbox.col_min..=bbox.col_max {
            let on_band = r < bbox.row_min + t
                || r + t > bbox.row_max
                || c < bbox.col_min + t
                || c + t > bbox.col_max;
            if on_band {
                out.pixels[[r, c]] = 1.0;
            }
        }
    }
    Ok(out)
}

fn bilinear_resize(src: &Array2<f64>, h2: usize, w2: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sy = h as f64 / h2 as f64;
    let sx = w as f64 / w2 as f64;
    Array2::from_shape_fn((h2, w2), |(r, c)| {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        src[[y0, x0]] * (1.0 - dy) * (1.0 - dx)
            + src[[y0, x1]] * (1.0 - dy) * dx
            + src[[y1, x0]] * dy * (1.0 - dx)
            + src[[y1, x1]] * dy * dx
    })
}

fn nearest_resize(src: &Array2<u8>, h2: usize, w2: usize) -> Array2<u8> {
    let (h, w) = src.dim();
    let sy = h as f64 / h2 as f64;
    let sx = w as f64 / w2 as f64;
    Array2::from_shape_fn((h2, w2), |(r, c)| {
        let y = (((r as f64 + 0.5) * sy).floor() as usize).min(h - 1);
        let x = (((c as f64 + 0.5) * sx).floor() as usize).min(w - 1);
        src[[y, x]]
    })
}

/// Resize image (bilinear) and mask (nearest-neighbor, stays binary) to
/// the same target size.
pub fn resize_pair(
    image: &ImageSample,
    mask: Option<&Array2<u8>>,
    size: (usize, usize),
) -> (ImageSample, Option<Array2<u8>>) {
    let (h2, w2) = size;
    let pixels = bilinear_resize(&image.pixels, h2, w2);
    let out = ImageSample { pixels, ..image.clone() };
    let mask = mask.map(|m| nearest_resize(m, h2, w2));
    (out, mask)
}

#[derive(Debug, Deserialize)]
struct TaskTemplate {
    questions: Vec<String>,
    answer: String,
    #[serde(default)]
    negative_answer: Option<String>,
}

#[derive(Debug, Deserialize)]
struct TemplateFile {
    #[allow(dead_code)]
    version: u32,
    tasks: HashMap<String, TaskTemplate>,
}

fn templates() -> &'static TemplateFile {
    static TEMPLATES: OnceLock<TemplateFile> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        serde_json::from_str(include_str!("../templates/v1.json"))
            .expect("bundled template file is valid")
    })
}

fn fill(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

/// Format one (image, annotation) pair into the task's VQA sample using
/// template variant 0. See [`to_vqa_with_variant`].
pub fn to_vqa(
    image: &ImageSample,
    annotation: &RegionAnnotation,
    task: TaskKind,
) -> Result<VqaSample, CurationError> {
    to_vqa_with_variant(image, annotation, task, 0)
}

/// Format one (image, annotation) pair into the task's VQA sample.
///
/// Mask-carrying tasks take a mask annotation and answer with the [SEG]
/// token; box tasks take a bbox. ROI classification overlays the box onto
/// the image. A "No findings" label on disease recognition yields the
/// negative answer and an all-zero target mask.
pub fn to_vqa_with_variant(
    image: &ImageSample,
    annotation: &RegionAnnotation,
    task: TaskKind,
    variant: usize,
) -> Result<VqaSample, CurationError> {
    let tpl = &templates().tasks[&task.to_string()];
    let question_tpl = &tpl.questions[variant % tpl.questions.len()];
    let (h, w) = image.shape();
    let modality = image.modality.as_str().to_string();

    let id = match (&image.volume_id, image.slice_index) {
        (Some(v), Some(s)) => format!("{v}_s{s:03}_{task}"),
        (Some(v), None) => format!("{v}_{task}"),
        _ => format!("sample_{task}"),
    };

    let mut vars = vec![
        ("modality", modality),
        ("label", annotation.label.clone()),
    ];

    match (&annotation.region, task.requires_mask()) {
        (Region::Mask(mask), true) => {
            let negative =
                task == TaskKind::DiseaseRecognition && is_no_findings(&annotation.label);
            let answer = if negative {
                tpl.negative_answer.clone().unwrap_or_else(|| NO_FINDINGS.to_string())
            } else {
                fill(&tpl.answer, &vars)
            };
            let target_mask = if negative { Array2::zeros((h, w)) } else { mask.clone() };
            Ok(VqaSample {
                id,
                image: image.clone(),
                question: fill(question_tpl, &vars),
                answer,
                target_mask: Some(target_mask),
                task,
            })
        }
        (Region::BBox(bbox), false) => {
            if !bbox.contains_within(h, w) {
                return Err(CurationError::BBoxOutOfBounds(*bbox, h, w));
            }
            vars.extend([
                ("row_min", bbox.row_min.to_string()),
                ("row_max", bbox.row_max.to_string()),
                ("col_min", bbox.col_min.to_string()),
                ("col_max", bbox.col_max.to_string()),
            ]);
            let out_image = if task == TaskKind::RoiClassification {
                overlay_bbox(image, bbox, 2)?
            } else {
                image.clone()
            };
            Ok(VqaSample {
                id,
                image: out_image,
                question: fill(question_tpl, &vars),
                answer: fill(&tpl.answer, &vars),
                target_mask: None,
                task,
            })
        }
        _ => Err(CurationError::IncompatibleAnnotation(task)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::validate_sample;
    use ndarray::{array, Array3};

    fn ct_volume(values: &[f64]) -> Volume3D {
        let voxels = Array3::from_shape_vec((1, 1, values.len()), values.to_vec()).unwrap();
        Volume3D::new("v0", voxels, Modality::CT)
    }

    #[test]
    fn window_ct_chest_bounds() {
        let w = CtWindow::chest();
        assert_eq!((w.low, w.high), (-1000.0, 500.0));
        let a = CtWindow::abdomen();
        assert_eq!((a.low, a.high), (-175.0, 250.0));

        let v = ct_volume(&[700.0, -2000.0, -250.0]);
        let out = window_ct(&v, &w).unwrap();
        assert_eq!(out.voxels[[0, 0, 0]], 1.0);
        assert_eq!(out.voxels[[0, 0, 1]], 0.0);
        assert!((out.voxels[[0, 0, 2]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn window_ct_wrong_modality() {
        let mut v = ct_volume(&[0.0]);
        v.modality = Modality::MRI;
        assert!(matches!(
            window_ct(&v, &CtWindow::chest()),
            Err(CurationError::WrongModality { .. })
        ));
    }

    #[test]
    fn zscore_cases() {
        let mut v = ct_volume(&[5.0, 5.0, 5.0]);
        v.modality = Modality::MRI;
        let out = zscore_mri(&v).unwrap();
        assert!(out.voxels.iter().all(|&x| x == 0.0));

        let mut two = ct_volume(&[0.0, 2.0]);
        two.modality = Modality::MRI;
        let out = zscore_mri(&two).unwrap();
        assert!((out.voxels[[0, 0, 0]] + 1.0).abs() < 1e-12);
        assert!((out.voxels[[0, 0, 1]] - 1.0).abs() < 1e-12);

        // second application is (approximately) identity
        let twice = zscore_mri(&out).unwrap();
        for (a, b) in twice.voxels.iter().zip(out.voxels.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn slice_axial_roundtrip() {
        let voxels = Array3::from_shape_fn((4, 3, 5), |(d, h, w)| (d * 100 + h * 10 + w) as f64);
        let mut vol = Volume3D::new("vol9", voxels.clone(), Modality::CT);
        vol.masks = Some(Array3::from_elem((4, 3, 5), 1));
        let slices = slice_axial(&vol);
        assert_eq!(slices.len(), 4);
        for (i, (img, mask)) in slices.iter().enumerate() {
            assert_eq!(img.slice_index, Some(i));
            assert_eq!(img.volume_id.as_deref(), Some("vol9"));
            assert_eq!(img.pixels, voxels.index_axis(ndarray::Axis(0), i).to_owned());
            assert_eq!(mask.as_ref().unwrap().dim(), (3, 5));
        }
    }

    #[test]
    fn mask_to_bbox_cases() {
        let mut m = Array2::<u8>::zeros((8, 8));
        for r in 2..=4 {
            for c in 3..=5 {
                m[[r, c]] = 1;
            }
        }
        assert_eq!(
            mask_to_bbox(&m).unwrap(),
            BBox { row_min: 2, col_min: 3, row_max: 4, col_max: 5 }
        );

        let mut single = Array2::<u8>::zeros((4, 4));
        single[[0, 0]] = 1;
        assert_eq!(
            mask_to_bbox(&single).unwrap(),
            BBox { row_min: 0, col_min: 0, row_max: 0, col_max: 0 }
        );

        let ones = Array2::<u8>::ones((5, 7));
        assert_eq!(
            mask_to_bbox(&ones).unwrap(),
            BBox { row_min: 0, col_min: 0, row_max: 4, col_max: 6 }
        );

        assert_eq!(mask_to_bbox(&Array2::zeros((4, 4))), Err(CurationError::EmptyMask));
    }

    #[test]
    fn overlay_bbox_border_and_interior() {
        let img = ImageSample::new(Array2::zeros((16, 16)), Modality::CT);
        let bbox = BBox { row_min: 4, col_min: 4, row_max: 8, col_max: 8 };
        let out = overlay_bbox(&img, &bbox, 2).unwrap();
        assert_eq!(out.pixels[[4, 6]], 1.0);
        assert_eq!(out.pixels[[6, 4]], 1.0);
        assert_eq!(out.pixels[[6, 6]], 0.0);
        assert_eq!(out.pixels[[0, 0]], 0.0);

        // idempotence
        let again = overlay_bbox(&out, &bbox, 2).unwrap();
        assert_eq!(again.pixels, out.pixels);

        let oob = BBox { row_min: 0, col_min: 0, row_max: 20, col_max: 8 };
        assert!(overlay_bbox(&img, &oob, 2).is_err());
    }

    #[test]
    fn resize_identity_and_binary_preservation() {
        let img = ImageSample::new(
            Array2::from_shape_fn((6, 6), |(r, c)| (r * 6 + c) as f64 / 36.0),
            Modality::XRay,
        );
        let mask = array![[1u8, 0], [0, 1]];
        let (same, _) = resize_pair(&img, None, (6, 6));
        for (a, b) in same.pixels.iter().zip(img.pixels.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let (_, big_mask) = resize_pair(&img, Some(&mask), (7, 7));
        assert!(big_mask.unwrap().iter().all(|&v| v <= 1));

        let constant = ImageSample::new(Array2::from_elem((3, 3), 0.25), Modality::XRay);
        let (scaled, _) = resize_pair(&constant, None, (9, 5));
        assert!(scaled.pixels.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn to_vqa_disease_recognition_template() {
        let img = ImageSample::new(Array2::zeros((8, 8)), Modality::CT);
        let mut mask = Array2::<u8>::zeros((8, 8));
        mask[[3, 3]] = 1;
        let ann = RegionAnnotation { region: Region::Mask(mask), label: "Liver tumor".into() };
        let s = to_vqa(&img, &ann, TaskKind::DiseaseRecognition).unwrap();
        assert_eq!(
            s.question,
            "Can you identify any abnormality within this CT image? Please respond with segmentation masks."
        );
        assert_eq!(s.answer, "It is [SEG]. Liver tumor");
        assert!(validate_sample(&s).is_empty());
    }

    #[test]
    fn to_vqa_negative_sample() {
        let img = ImageSample::new(Array2::zeros((8, 8)), Modality::CT);
        let ann = RegionAnnotation {
            region: Region::Mask(Array2::zeros((8, 8))),
            label: "No findings".into(),
        };
        let s = to_vqa(&img, &ann, TaskKind::DiseaseRecognition).unwrap();
        assert_eq!(s.answer, "No findings");
        assert!(s.target_mask.as_ref().unwrap().iter().all(|&v| v == 0));
        assert!(validate_sample(&s).is_empty());
    }

    #[test]
    fn to_vqa_roi_overlay() {
        let img = ImageSample::new(Array2::zeros((16, 16)), Modality::MRI);
        let ann = RegionAnnotation {
            region: Region::BBox(BBox { row_min: 2, col_min: 2, row_max: 9, col_max: 9 }),
            label: "organ_a".into(),
        };
        let s = to_vqa(&img, &ann, TaskKind::RoiClassification).unwrap();
        assert_eq!(s.answer, "organ_a");
        assert!(!s.answer.contains("[SEG]"));
        assert!(s.target_mask.is_none());
        assert_eq!(s.image.pixels[[2, 5]], 1.0);
        assert!(validate_sample(&s).is_empty());
    }

    #[test]
    fn to_vqa_incompatible_annotation() {
        let img = ImageSample::new(Array2::zeros((8, 8)), Modality::CT);
        let ann = RegionAnnotation {
            region: Region::BBox(BBox { row_min: 0, col_min: 0, row_max: 3, col_max: 3 }),
            label: "x".into(),
        };
        assert!(matches!(
            to_vqa(&img, &ann, TaskKind::Segmentation),
            Err(CurationError::IncompatibleAnnotation(_))
        ));
    }

    #[test]
    fn window_monotone_property() {
        let w = CtWindow::chest();
        let v = ct_volume(&[-1500.0, -1000.0, -100.0, 0.0, 499.0, 500.0, 2000.0]);
        let out = window_ct(&v, &w).unwrap();
        let vals: Vec<f64> = out.voxels.iter().cloned().collect();
        assert!(vals.windows(2).all(|p| p[0] <= p[1]));
        assert!(vals.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
