//! Python bindings for groundkit: the grounded model, the text and
//! segmentation metrics, the composite loss, preprocessing, mask RLE,
//! synthetic dataset generation, and the selftest suite. Images and
//! masks cross the boundary as nested lists to keep the ABI simple.

use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use groundkit::curation::{self, CtWindow, Volume3D};
use groundkit::datamodel::{ImageSample, Modality, Split, TaskKind, VqaSample};
use groundkit::metrics;
use groundkit::model::{GroundedModel, ModelConfig, Vocabulary};
use groundkit::synthgen::gen_task_dataset_with;
use groundkit::training::{self, LossWeights, TrainConfig};
use groundkit::{io, selftest};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn task_from_str(task: &str) -> PyResult<TaskKind> {
    TaskKind::from_str(task).map_err(err)
}

fn grid_f64(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty rectangular grid"));
    }
    Ok(Array2::from_shape_fn((h, w), |(r, c)| rows[r][c]))
}

fn grid_u8(rows: Vec<Vec<u8>>) -> PyResult<Array2<u8>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("mask must be a non-empty rectangular grid"));
    }
    Ok(Array2::from_shape_fn((h, w), |(r, c)| rows[r][c]))
}

// Vec<u8> would surface in Python as bytes, so rows widen to u32 lists
fn mask_to_lists(mask: &Array2<u8>) -> Vec<Vec<u32>> {
    mask.rows()
        .into_iter()
        .map(|r| r.iter().map(|&v| v as u32).collect())
        .collect()
}

/// The grounded model: text answers plus [SEG]-triggered mask decoding.
#[pyclass]
struct Model {
    inner: GroundedModel,
}

#[pymethods]
impl Model {
    /// Train a small model on a synthetic dataset for the task and
    /// return it with the final training loss. Uses the 16x16 config.
    #[staticmethod]
    #[pyo3(signature = (task, volumes=6, epochs=2, seed=42))]
    fn train_toy(task: &str, volumes: usize, epochs: usize, seed: u64) -> PyResult<(Self, f64)> {
        let task = task_from_str(task)?;
        let manifest = gen_task_dataset_with(task, volumes, 2, (16, 16), seed).map_err(err)?;
        let corpus: Vec<String> = manifest
            .samples
            .iter()
            .flat_map(|s| [s.question.clone(), s.answer.clone()])
            .collect();
        let vocab = Vocabulary::from_corpus(corpus.iter().map(|s| s.as_str()));
        let mut model = GroundedModel::init(ModelConfig::tiny(), vocab, seed).map_err(err)?;
        let mut cfg = TrainConfig::toy(seed);
        cfg.epochs = epochs;
        let train_samples: Vec<VqaSample> =
            manifest.samples_in(Split::Train).cloned().collect();
        let report = training::train(&mut model, &train_samples, &cfg, None).map_err(err)?;
        Ok((Self { inner: model }, report.final_loss))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: GroundedModel::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Greedy decoding plus mask decoding when the answer carries [SEG].
    /// Returns a dict with "answer" and "mask" (nested list or None).
    fn answer<'py>(
        &self,
        py: Python<'py>,
        image: Vec<Vec<f64>>,
        question: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let pixels = grid_f64(image)?;
        let sample = ImageSample::new(pixels, Modality::CT);
        let out = self.inner.forward_grounded(&sample, question).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("answer", out.answer)?;
        d.set_item("mask", out.mask.as_ref().map(mask_to_lists))?;
        Ok(d)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        self.inner.config.image_size
    }
}

/// Dice overlap 2|P∩G| / (|P|+|G|) on binary masks; 1.0 when both empty.
#[pyfunction]
fn dice_score(pred: Vec<Vec<u8>>, gt: Vec<Vec<u8>>) -> PyResult<f64> {
    metrics::dice_score(&grid_u8(pred)?, &grid_u8(gt)?).map_err(err)
}

/// Exact-match accuracy after whitespace and case normalization.
#[pyfunction]
fn accuracy(preds: Vec<String>, labels: Vec<String>) -> PyResult<f64> {
    metrics::accuracy(&preds, &labels).map_err(err)
}

/// Smoothed BLEU-n of a hypothesis against reference strings.
#[pyfunction]
fn bleu(hypothesis: &str, references: Vec<String>, n: usize) -> f64 {
    let refs: Vec<&str> = references.iter().map(String::as_str).collect();
    metrics::bleu(&metrics::TextPair::new(hypothesis, &refs), n)
}

/// Corpus METEOR: mean over gold sentences of the best clipped unigram
/// precision across hypotheses.
#[pyfunction]
fn meteor(golds: Vec<String>, hyps: Vec<String>) -> PyResult<f64> {
    let g: Vec<Vec<String>> = golds.iter().map(|s| metrics::tokenize(s)).collect();
    let h: Vec<Vec<String>> = hyps.iter().map(|s| metrics::tokenize(s)).collect();
    metrics::meteor_corpus(&g, &h).map_err(err)
}

/// ROUGE-L (recall, precision, F) of a hypothesis against one reference.
#[pyfunction]
fn rouge_l(hypothesis: &str, reference: &str) -> (f64, f64, f64) {
    metrics::rouge_l(
        &metrics::TextPair::new(hypothesis, &[reference]),
        metrics::DEFAULT_ROUGE_BETA,
    )
}

/// Two-sided paired t-test; returns (t statistic, p value).
#[pyfunction]
fn paired_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64)> {
    metrics::paired_t_test(&a, &b).map_err(err)
}

/// Render five trial values as the table cell "mean(low,high)".
#[pyfunction]
fn trial_cell(trials: Vec<f64>) -> PyResult<String> {
    let t = metrics::TrialSet::from_slice(&trials).map_err(err)?;
    Ok(metrics::trial_range(&t).cell())
}

/// Composite loss L = L_text + 2 L_BCE + 0.5 L_dice, gated to L_text
/// for text-only tasks.
#[pyfunction]
#[pyo3(signature = (task, text, bce=None, dice=None))]
fn compose_loss(task: &str, text: f64, bce: Option<f64>, dice: Option<f64>) -> PyResult<f64> {
    let task = task_from_str(task)?;
    Ok(training::compose_loss(task, text, bce, dice, &LossWeights::default()).total)
}

/// HU bounds of the named CT window ("chest" or "abdomen").
#[pyfunction]
fn ct_window_bounds(region: &str) -> PyResult<(f64, f64)> {
    let w = match region.to_ascii_lowercase().as_str() {
        "chest" => CtWindow::chest(),
        "abdomen" => CtWindow::abdomen(),
        other => return Err(PyValueError::new_err(format!("unknown region: {other}"))),
    };
    Ok((w.low, w.high))
}

/// Clamp HU values to the named window and rescale to [0, 1].
#[pyfunction]
fn window_ct(values: Vec<f64>, region: &str) -> PyResult<Vec<f64>> {
    let (low, high) = ct_window_bounds(region)?;
    let n = values.len();
    let vol = Volume3D::new(
        "py",
        Array3::from_shape_vec((1, 1, n), values).map_err(err)?,
        Modality::CT,
    );
    let w = CtWindow::custom(low, high).map_err(err)?;
    let out = curation::window_ct(&vol, &w).map_err(err)?;
    Ok(out.voxels.iter().copied().collect())
}

/// Run-length encode a binary mask (row-major, starting with zeros).
#[pyfunction]
fn rle_encode(mask: Vec<Vec<u8>>) -> PyResult<Vec<usize>> {
    Ok(io::rle_encode(&grid_u8(mask)?))
}

/// Inverse of `rle_encode` for the given (height, width).
#[pyfunction]
fn rle_decode(runs: Vec<usize>, shape: (usize, usize)) -> PyResult<Vec<Vec<u32>>> {
    Ok(mask_to_lists(&io::rle_decode(&runs, shape).map_err(err)?))
}

/// Generate a synthetic VQA dataset; returns a list of sample dicts.
#[pyfunction]
#[pyo3(signature = (task, volumes, seed=42))]
fn synth_dataset<'py>(
    py: Python<'py>,
    task: &str,
    volumes: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let task = task_from_str(task)?;
    let manifest = gen_task_dataset_with(task, volumes, 4, (64, 64), seed).map_err(err)?;
    manifest
        .samples
        .iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("id", &s.id)?;
            d.set_item("question", &s.question)?;
            d.set_item("answer", &s.answer)?;
            d.set_item("task", s.task.to_string())?;
            d.set_item("has_mask", s.target_mask.is_some())?;
            let split = manifest.split.get(s.volume_key()).map(|sp| match sp {
                Split::Train => "train",
                Split::Test => "test",
            });
            d.set_item("split", split)?;
            Ok(d)
        })
        .collect()
}

/// Run the built-in verification suite; returns (all_passed, report).
#[pyfunction]
#[pyo3(signature = (seed=42))]
fn run_selftest(seed: u64) -> (bool, String) {
    let results = selftest::run(seed);
    (selftest::all_passed(&results), selftest::render(&results))
}

#[pymodule]
fn groundkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(dice_score, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(meteor, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(trial_cell, m)?)?;
    m.add_function(wrap_pyfunction!(compose_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ct_window_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(window_ct, m)?)?;
    m.add_function(wrap_pyfunction!(rle_encode, m)?)?;
    m.add_function(wrap_pyfunction!(rle_decode, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run_selftest, m)?)?;
    m.add("SEG_TOKEN", groundkit::SEG_TOKEN)?;
    Ok(())
}
