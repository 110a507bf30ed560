//! Composite loss (text + weighted BCE + weighted Dice), the task-gated
//! training loop with AdamW and a warmup-cosine schedule, and finite
//! difference gradient verification.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{TaskKind, VqaSample};
use crate::model::{vocab::PAD_ID, GroundedModel, ModelError, SequenceLayout, BOS_ID, EOS_ID};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("sample {0}: task requires a target mask but none is present")]
    MissingMask(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("no trainable samples")]
    NoSamples,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_bce: 2.0, lambda_dice: 0.5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda_bce <= 0.0 || self.lambda_dice <= 0.0 {
            return Err(TrainError::InvalidConfig("loss weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    WarmupCosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub schedule: ScheduleKind,
    /// Absolute warmup length; when absent, 3% of total steps.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_eps_dice")]
    pub eps_dice: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_eps_dice() -> f64 {
    1.0
}

fn default_weight_decay() -> f64 {
    0.01
}

impl TrainConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            batch_size: 8,
            epochs: 10,
            optimizer: OptimizerKind::AdamW,
            lr: 1e-3,
            schedule: ScheduleKind::WarmupCosine,
            warmup_steps: None,
            seed,
            weights: LossWeights::default(),
            eps_dice: 1.0,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig("lr must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// Mean negative log-likelihood over non-PAD target positions.
pub fn loss_text(t: &mut Tape, logits: Var, target_ids: &[usize]) -> Result<Var, TrainError> {
    let supervised: Vec<bool> = target_ids.iter().map(|&id| id != PAD_ID).collect();
    Ok(t.cross_entropy_mean(logits, target_ids, &supervised)?)
}

/// Per-pixel BCE with the probability clamp.
pub fn loss_bce(t: &mut Tape, probs: Var, labels: &Array2<u8>) -> Result<Var, TrainError> {
    Ok(t.bce_mean(probs, labels)?)
}

/// Soft Dice loss, ε default 1.0.
pub fn loss_dice(
    t: &mut Tape,
    probs: Var,
    labels: &Array2<u8>,
    eps: f64,
) -> Result<Var, TrainError> {
    Ok(t.dice_loss(probs, labels, eps)?)
}

/// Scalar component values of a composite loss.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub text: f64,
    pub bce: Option<f64>,
    pub dice: Option<f64>,
}

/// Combine already-computed components as L = L_text + λ_bce·L_BCE +
/// λ_dice·L_dice, or L = L_text for text-only tasks.
pub fn compose_loss(
    task: TaskKind,
    text: f64,
    bce: Option<f64>,
    dice: Option<f64>,
    weights: &LossWeights,
) -> LossBreakdown {
    if task.requires_mask() {
        let b = bce.unwrap_or(0.0);
        let d = dice.unwrap_or(0.0);
        LossBreakdown {
            total: text + weights.lambda_bce * b + weights.lambda_dice * d,
            text,
            bce: Some(b),
            dice: Some(d),
        }
    } else {
        LossBreakdown { total: text, text, bce: None, dice: None }
    }
}

/// A built loss tape for one sample with its root scalar and breakdown.
pub struct SampleLoss {
    pub tape: Tape,
    pub root: Var,
    pub breakdown: LossBreakdown,
}

/// Build the full forward tape and composite loss for one sample.
/// Mask-requiring tasks run the segmentation branch; for the others no
/// segmentation forward pass occurs at all.
pub fn sample_loss(
    model: &GroundedModel,
    sample: &VqaSample,
    weights: &LossWeights,
    eps_dice: f64,
) -> Result<SampleLoss, TrainError> {
    let q_ids = model.vocab.tokenize(&sample.question);
    let a_ids = model.vocab.tokenize(&sample.answer);
    // full target stream: question ++ BOS ++ answer ++ EOS; inputs drop EOS
    let mut full = q_ids.clone();
    full.push(BOS_ID);
    full.extend_from_slice(&a_ids);
    full.push(EOS_ID);
    let input = &full[..full.len() - 1];

    let mut t = Tape::new();
    let (hidden, logits) = model.lm_forward(&mut t, &sample.image, input)?;
    let n_vis = model.config.n_patches();
    let rows = n_vis + input.len();
    let mut targets = vec![0usize; rows];
    let mut supervised = vec![false; rows];
    for i in 0..input.len() {
        // position carrying full[i] predicts full[i+1]; supervise the
        // answer tokens and the closing EOS
        targets[n_vis + i] = full[i + 1];
        supervised[n_vis + i] = i >= q_ids.len();
    }
    let text = t.cross_entropy_mean(logits, &targets, &supervised)?;

    if !sample.task.requires_mask() {
        let text_val = t.scalar(text);
        return Ok(SampleLoss {
            tape: t,
            root: text,
            breakdown: LossBreakdown { total: text_val, text: text_val, bce: None, dice: None },
        });
    }

    let mask = sample
        .target_mask
        .as_ref()
        .ok_or_else(|| TrainError::MissingMask(sample.id.clone()))?;
    let layout = SequenceLayout {
        n_vision: n_vis,
        n_question: q_ids.len(),
        n_answer: a_ids.len(),
    };
    let lang = model.language_embeddings_on_tape(&mut t, hidden, input, layout);
    let mask_logits = model.decode_mask_on_tape(&mut t, &sample.image, lang)?;
    let probs = t.sigmoid(mask_logits);
    let bce = t.bce_mean(probs, mask)?;
    let dice = t.dice_loss(probs, mask, eps_dice)?;
    let wb = t.scale(bce, weights.lambda_bce);
    let wd = t.scale(dice, weights.lambda_dice);
    let partial = t.add(text, wb);
    let root = t.add(partial, wd);
    let breakdown = LossBreakdown {
        total: t.scalar(root),
        text: t.scalar(text),
        bce: Some(t.scalar(bce)),
        dice: Some(t.scalar(dice)),
    };
    Ok(SampleLoss { tape: t, root, breakdown })
}

/// Warmup-cosine learning rate at a 0-based step.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let decay_len = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step - warmup_steps) as f64 / decay_len as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// Decoupled-weight-decay adaptive-moment optimizer. Only parameters
/// that actually received a gradient are touched, which is what makes the
/// task-gating invariant exact: text-only batches never reference the
/// mask decoder, so its tensors keep their bytes.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: HashMap<String, Array2<f64>>,
    v: HashMap<String, Array2<f64>>,
    t: HashMap<String, u64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: HashMap::new(),
            v: HashMap::new(),
            t: HashMap::new(),
        }
    }

    pub fn step(
        &mut self,
        model: &mut GroundedModel,
        grads: &HashMap<String, Array2<f64>>,
        lr: f64,
    ) {
        let mut names: Vec<&String> = grads.keys().collect();
        names.sort();
        for name in names {
            if model.params.is_frozen(name) {
                continue;
            }
            let g = &grads[name];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            *m = &*m * self.beta1 + g * (1.0 - self.beta1);
            *v = &*v * self.beta2 + &g.mapv(|x| x * x) * (1.0 - self.beta2);
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let p = model.params.get_mut(name);
            for ((pi, mi), vi) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *pi -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *pi);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_text")]
    pub l_text: f64,
    #[serde(rename = "L_bce")]
    pub l_bce: Option<f64>,
    #[serde(rename = "L_dice")]
    pub l_dice: Option<f64>,
    pub task: String,
}

/// Mean gradients and mean breakdown over one task-pure batch.
pub fn batch_grads(
    model: &GroundedModel,
    batch: &[&VqaSample],
    weights: &LossWeights,
    eps_dice: f64,
) -> Result<(HashMap<String, Array2<f64>>, LossBreakdown), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut acc: HashMap<String, Array2<f64>> = HashMap::new();
    let mut total = 0.0;
    let mut text = 0.0;
    let mut bce = 0.0;
    let mut dice = 0.0;
    let mut has_seg = false;
    for sample in batch {
        let sl = sample_loss(model, sample, weights, eps_dice)?;
        total += sl.breakdown.total * scale;
        text += sl.breakdown.text * scale;
        if let (Some(b), Some(d)) = (sl.breakdown.bce, sl.breakdown.dice) {
            bce += b * scale;
            dice += d * scale;
            has_seg = true;
        }
        let grads = sl.tape.backward(sl.root).into_param_grads(&sl.tape);
        for (name, g) in grads {
            match acc.get_mut(&name) {
                Some(existing) => *existing += &(&g * scale),
                None => {
                    acc.insert(name, g * scale);
                }
            }
        }
    }
    let breakdown = LossBreakdown {
        total,
        text,
        bce: has_seg.then_some(bce),
        dice: has_seg.then_some(dice),
    };
    Ok((acc, breakdown))
}

/// One optimizer update on a task-pure batch at the given step's lr.
pub fn train_step(
    model: &mut GroundedModel,
    opt: &mut AdamW,
    batch: &[&VqaSample],
    weights: &LossWeights,
    eps_dice: f64,
    lr: f64,
) -> Result<LossBreakdown, TrainError> {
    let (grads, breakdown) = batch_grads(model, batch, weights, eps_dice)?;
    opt.step(model, &grads, lr);
    Ok(breakdown)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: f64,
    pub mean_epoch_loss: Vec<f64>,
}

/// Full training run: task-pure batches, pools shuffled per epoch,
/// batch order shuffled across tasks, one JSONL record per step.
pub fn train(
    model: &mut GroundedModel,
    samples: &[VqaSample],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let mut pools: BTreeMap<TaskKind, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        pools.entry(s.task).or_default().push(i);
    }
    let batches_per_epoch: usize = pools
        .values()
        .map(|p| p.len().div_ceil(config.batch_size))
        .sum();
    let total_steps = batches_per_epoch * config.epochs;
    let warmup = config
        .warmup_steps
        .unwrap_or_else(|| ((total_steps as f64) * 0.03).ceil() as usize);

    let mut opt = AdamW::new(config.weight_decay);
    let mut step = 0usize;
    let mut mean_epoch_loss = Vec::with_capacity(config.epochs);
    let mut final_loss = 0.0;
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
        let mut batches: Vec<(TaskKind, Vec<usize>)> = Vec::new();
        for (&task, pool) in &pools {
            let mut order = pool.clone();
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                batches.push((task, chunk.to_vec()));
            }
        }
        batches.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for (task, idx) in &batches {
            let batch: Vec<&VqaSample> = idx.iter().map(|&i| &samples[i]).collect();
            let lr = lr_at(step, total_steps, warmup, config.lr);
            let breakdown = train_step(
                model,
                &mut opt,
                &batch,
                &config.weights,
                config.eps_dice,
                lr,
            )?;
            if let Some(w) = log.as_deref_mut() {
                let rec = StepRecord {
                    step,
                    lr,
                    l: breakdown.total,
                    l_text: breakdown.text,
                    l_bce: breakdown.bce,
                    l_dice: breakdown.dice,
                    task: task.to_string(),
                };
                serde_json::to_writer(&mut *w, &rec).map_err(std::io::Error::other)?;
                writeln!(w)?;
            }
            epoch_loss += breakdown.total;
            final_loss = breakdown.total;
            step += 1;
        }
        mean_epoch_loss.push(epoch_loss / batches.len() as f64);
    }
    Ok(TrainReport { steps: step, final_loss, mean_epoch_loss })
}

/// Render a total-loss curve from the step log JSONL as a standalone SVG.
/// Presentational only; returns a minimal document when the log is empty.
pub fn loss_curve_svg(log_jsonl: &str) -> String {
    let points: Vec<(f64, f64)> = log_jsonl
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| {
            Some((v.get("step")?.as_f64()?, v.get("L")?.as_f64()?))
        })
        .collect();
    let (width, height, margin) = (640.0, 360.0, 40.0);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    );
    if points.len() >= 2 {
        let x_max = points.iter().map(|p| p.0).fold(f64::MIN, f64::max).max(1.0);
        let y_max = points.iter().map(|p| p.1).fold(f64::MIN, f64::max).max(1e-9);
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| {
                let px = margin + (width - 2.0 * margin) * x / x_max;
                let py = height - margin - (height - 2.0 * margin) * y / y_max;
                format!("{px:.2},{py:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{margin}\" y=\"20\" font-size=\"12\">loss over {} steps (max {y_max:.4})</text>\n",
            points.len()
        ));
    } else {
        svg.push_str("<text x=\"20\" y=\"20\" font-size=\"12\">no steps logged</text>\n");
    }
    svg.push_str("</svg>\n");
    svg
}

/// Central finite differences against backprop on up to `max_coords`
/// randomly chosen coordinates of the named parameters. Returns the max
/// relative error |g_fd − g_bp| / max(|g_fd|, |g_bp|, 1e-8).
pub fn gradcheck<F>(
    model: &mut GroundedModel,
    names: &[&str],
    h: f64,
    max_coords: usize,
    seed: u64,
    mut f: F,
) -> f64
where
    F: FnMut(&GroundedModel) -> (f64, HashMap<String, Array2<f64>>),
{
    let (_, grads) = f(model);
    let mut coords: Vec<(String, (usize, usize))> = Vec::new();
    for &name in names {
        let (r, c) = model.params.get(name).dim();
        for i in 0..r {
            for j in 0..c {
                coords.push((name.to_string(), (i, j)));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(max_coords);

    let mut max_rel = 0.0f64;
    for (name, (i, j)) in coords {
        let g_bp = grads.get(&name).map_or(0.0, |g| g[[i, j]]);
        let orig = model.params.get(&name)[[i, j]];
        model.params.get_mut(&name)[[i, j]] = orig + h;
        let (f_plus, _) = f(model);
        model.params.get_mut(&name)[[i, j]] = orig - h;
        let (f_minus, _) = f(model);
        model.params.get_mut(&name)[[i, j]] = orig;
        let g_fd = (f_plus - f_minus) / (2.0 * h);
        let rel = (g_fd - g_bp).abs() / g_fd.abs().max(g_bp.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

/// Convenience closure body for [`gradcheck`] over a single sample's
/// composite loss.
pub fn sample_loss_and_grads(
    model: &GroundedModel,
    sample: &VqaSample,
    weights: &LossWeights,
    eps_dice: f64,
) -> (f64, HashMap<String, Array2<f64>>) {
    let sl = sample_loss(model, sample, weights, eps_dice).expect("loss build");
    let val = sl.breakdown.total;
    let grads = sl.tape.backward(sl.root).into_param_grads(&sl.tape);
    (val, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ImageSample, Modality, TaskKind};
    use crate::model::{ModelConfig, Vocabulary};
    use ndarray::Array2;
    use rand::Rng;

    fn test_vocab() -> Vocabulary {
        Vocabulary::from_corpus([
            "It is . Liver tumor No findings organ what kind of in the box region shows segment this image please respond with segmentation masks",
        ])
    }

    fn tiny_model(seed: u64) -> GroundedModel {
        GroundedModel::init(ModelConfig::tiny(), test_vocab(), seed).unwrap()
    }

    fn image(seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSample::new(
            Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0)),
            Modality::CT,
        )
    }

    fn square_mask() -> Array2<u8> {
        Array2::from_shape_fn((16, 16), |(r, c)| {
            ((4..12).contains(&r) && (4..12).contains(&c)) as u8
        })
    }

    fn seg_sample(seed: u64) -> VqaSample {
        VqaSample {
            id: format!("seg{seed}"),
            image: image(seed),
            question: "please segment the organ in this image".into(),
            answer: "It is [SEG]. organ".into(),
            target_mask: Some(square_mask()),
            task: TaskKind::Segmentation,
        }
    }

    fn text_sample(seed: u64) -> VqaSample {
        VqaSample {
            id: format!("roi{seed}"),
            image: image(seed),
            question: "what kind of tumor shows in the box region".into(),
            answer: "Liver tumor".into(),
            target_mask: None,
            task: TaskKind::RoiClassification,
        }
    }

    #[test]
    fn loss_text_analytic_cases() {
        // uniform logits over |V| classes
        let mut t = Tape::new();
        let v = 7;
        let logits = t.constant(Array2::zeros((3, v)));
        let l = loss_text(&mut t, logits, &[5, 6, 2]).unwrap();
        assert!((t.scalar(l) - (v as f64).ln()).abs() < 1e-12);

        // one-hot-correct logits at magnitude 1e4
        let mut t = Tape::new();
        let mut m = Array2::zeros((2, v));
        m[[0, 3]] = 1e4;
        m[[1, 4]] = 1e4;
        let logits = t.constant(m);
        let l = loss_text(&mut t, logits, &[3, 4]).unwrap();
        assert!(t.scalar(l).abs() < 1e-3);

        // all positions PAD
        let mut t = Tape::new();
        let logits = t.constant(Array2::zeros((2, v)));
        assert!(loss_text(&mut t, logits, &[PAD_ID, PAD_ID]).is_err());
    }

    #[test]
    fn loss_bce_clamp_boundary() {
        let mut t = Tape::new();
        let labels = Array2::from_elem((4, 4), 1u8);
        let probs = t.constant(Array2::zeros((4, 4)));
        let l = loss_bce(&mut t, probs, &labels).unwrap();
        assert!((t.scalar(l) - (-(1e-7f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn compose_loss_reference_values() {
        let w = LossWeights::default();
        let b = compose_loss(TaskKind::Segmentation, 1.0, Some(0.3), Some(0.4), &w);
        assert!((b.total - 1.8).abs() < 1e-12);
        let b = compose_loss(TaskKind::RoiClassification, 0.7, None, None, &w);
        assert!((b.total - 0.7).abs() < 1e-12);
        assert!(b.bce.is_none() && b.dice.is_none());
        let b = compose_loss(TaskKind::GroundedReport, 0.0, Some(0.0), Some(0.0), &w);
        assert_eq!(b.total, 0.0);
    }

    #[test]
    fn sample_loss_gating_and_missing_mask() {
        let m = tiny_model(3);
        let text = sample_loss(&m, &text_sample(1), &LossWeights::default(), 1.0).unwrap();
        assert!(text.breakdown.bce.is_none());
        assert!(text.breakdown.dice.is_none());
        assert_eq!(text.breakdown.total, text.breakdown.text);
        // no segmentation parameters appear on the text tape at all
        assert!(text
            .tape
            .param_leaves()
            .all(|(name, _)| !name.starts_with("mask_dec.") && !name.starts_with("prompt.")));

        let seg = sample_loss(&m, &seg_sample(1), &LossWeights::default(), 1.0).unwrap();
        let b = seg.breakdown;
        let recomposed = b.text + 2.0 * b.bce.unwrap() + 0.5 * b.dice.unwrap();
        assert!((b.total - recomposed).abs() < 1e-12);

        let mut bad = seg_sample(2);
        bad.target_mask = None;
        assert!(matches!(
            sample_loss(&m, &bad, &LossWeights::default(), 1.0),
            Err(TrainError::MissingMask(_))
        ));
    }

    #[test]
    fn lambda_scaling_property() {
        let m = tiny_model(4);
        let s = seg_sample(3);
        let w1 = LossWeights::default();
        let c = 3.0;
        let wc = LossWeights { lambda_bce: c * w1.lambda_bce, lambda_dice: c * w1.lambda_dice };
        let b1 = sample_loss(&m, &s, &w1, 1.0).unwrap().breakdown;
        let bc = sample_loss(&m, &s, &wc, 1.0).unwrap().breakdown;
        let seg1 = b1.total - b1.text;
        let segc = bc.total - bc.text;
        assert!((segc - c * seg1).abs() < 1e-9);
    }

    #[test]
    fn lr_schedule_shape() {
        let total = 100;
        let warmup = 10;
        let base = 1e-3;
        assert!((lr_at(0, total, warmup, base) - base / 10.0).abs() < 1e-15);
        assert!((lr_at(9, total, warmup, base) - base).abs() < 1e-15);
        for s in 11..total {
            assert!(lr_at(s, total, warmup, base) < lr_at(s - 1, total, warmup, base));
        }
        assert!(lr_at(total - 1, total, warmup, base) >= 0.0);
        assert!(lr_at(total, total, warmup, base) >= 0.0);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut m = tiny_model(5);
        let before: Vec<(String, Array2<f64>)> = m
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect();
        let mut opt = AdamW::new(0.01);
        let s = seg_sample(4);
        let b = train_step(&mut m, &mut opt, &[&s], &LossWeights::default(), 1.0, 0.0).unwrap();
        assert!(b.total.is_finite());
        for (name, old) in before {
            assert_eq!(m.params.get(&name), &old, "{name}");
        }
    }

    #[test]
    fn frozen_tensors_bit_identical_after_steps() {
        let mut m = tiny_model(6);
        let frozen: Vec<(String, Array2<f64>)> = m
            .params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect();
        assert!(!frozen.is_empty());
        let mut opt = AdamW::new(0.01);
        let seg = seg_sample(5);
        let txt = text_sample(5);
        for _ in 0..3 {
            train_step(&mut m, &mut opt, &[&seg], &LossWeights::default(), 1.0, 1e-3).unwrap();
            train_step(&mut m, &mut opt, &[&txt], &LossWeights::default(), 1.0, 1e-3).unwrap();
        }
        for (name, old) in frozen {
            let now = m.params.get(&name);
            assert!(now.iter().zip(old.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
        }
    }

    #[test]
    fn text_batches_never_touch_mask_decoder() {
        let mut m = tiny_model(7);
        let before: Vec<(String, Array2<f64>)> = m
            .params
            .iter()
            .filter(|(n, _)| n.starts_with("mask_dec.") || n.starts_with("prompt."))
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect();
        let mut opt = AdamW::new(0.01);
        for seed in 0..5 {
            let s = text_sample(seed);
            train_step(&mut m, &mut opt, &[&s], &LossWeights::default(), 1.0, 1e-3).unwrap();
        }
        for (name, old) in before {
            let now = m.params.get(&name);
            assert!(now.iter().zip(old.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "{name}");
        }
    }

    #[test]
    fn single_sample_overfit_halves_seg_loss() {
        let mut m = tiny_model(8);
        let s = seg_sample(6);
        let mut opt = AdamW::new(0.0);
        let w = LossWeights::default();
        let first = train_step(&mut m, &mut opt, &[&s], &w, 1.0, 1e-3).unwrap();
        let seg_first = 2.0 * first.bce.unwrap() + 0.5 * first.dice.unwrap();
        let mut seg_last = seg_first;
        for _ in 1..200 {
            let b = train_step(&mut m, &mut opt, &[&s], &w, 1.0, 1e-3).unwrap();
            seg_last = 2.0 * b.bce.unwrap() + 0.5 * b.dice.unwrap();
        }
        assert!(
            seg_last <= 0.5 * seg_first,
            "L_seg {seg_first} -> {seg_last}"
        );
    }

    #[test]
    fn train_loop_runs_and_is_deterministic() {
        let samples: Vec<VqaSample> = (0..4)
            .map(seg_sample)
            .chain((0..4).map(text_sample))
            .collect();
        let mut cfg = TrainConfig::toy(42);
        cfg.epochs = 2;
        cfg.batch_size = 2;

        let mut m1 = tiny_model(9);
        let mut log = Vec::new();
        let r1 = train(&mut m1, &samples, &cfg, Some(&mut log)).unwrap();
        assert_eq!(r1.steps, 2 * 4);
        let lines: Vec<&str> = std::str::from_utf8(&log).unwrap().lines().collect();
        assert_eq!(lines.len(), r1.steps);
        let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["step", "lr", "L", "L_text", "task"] {
            assert!(rec.get(key).is_some(), "{key}");
        }

        let mut m2 = tiny_model(9);
        let r2 = train(&mut m2, &samples, &cfg, None).unwrap();
        assert_eq!(r1.final_loss, r2.final_loss);
        for (name, p) in m1.params.iter() {
            assert_eq!(&p.value, m2.params.get(name), "{name}");
        }
    }

    #[test]
    fn gradcheck_end_to_end_seg_row() {
        let mut m = tiny_model(10);
        let s = seg_sample(7);
        let w = LossWeights::default();
        // f64 arithmetic permits a smaller step than the f32 default,
        // pushing finite-difference truncation below the 1e-6 bound
        let err = gradcheck(&mut m, &["lm.embed", "mask_dec.out.w"], 1e-5, 24, 0, |model| {
            sample_loss_and_grads(model, &s, &w, 1.0)
        });
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn config_validation_and_serde() {
        let mut cfg = TrainConfig::toy(1);
        assert!(cfg.validate().is_ok());
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());

        let json = r#"{"batch_size":32,"epochs":3,"lr":4e-5,"seed":7}"#;
        let parsed: TrainConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.weights, LossWeights::default());
        assert_eq!(parsed.eps_dice, 1.0);
        assert_eq!(parsed.optimizer, OptimizerKind::AdamW);
    }
}
