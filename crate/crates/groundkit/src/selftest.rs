//! Built-in verification suite: metric oracles, loss analytics, gradient
//! checks, and mechanism invariants. The rendered report is free of
//! timestamps so identical seeds give byte-identical output.

use ndarray::{array, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::curation::CtWindow;
use crate::datamodel::{
    split_dataset, DatasetManifest, ImageSample, Modality, Split, TaskKind, VqaSample,
};
use crate::metrics::{
    accuracy, bleu, dice_score, meteor_corpus, paired_t_test, rouge_l, tokenize, trial_range,
    TextPair, TrialSet, DEFAULT_ROUGE_BETA,
};
use crate::model::{output_obeys_mask_contract, GroundedModel, ModelConfig, Vocabulary};
use crate::tensor::Tape;
use crate::training::{
    compose_loss, gradcheck, sample_loss_and_grads, train_step, AdamW, LossWeights,
};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

/// Render the fixed-format report: one line per check plus a summary.
pub fn render(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        let status = if r.passed { "ok  " } else { "FAIL" };
        out.push_str(&format!("{status} {}: {}\n", r.name, r.detail));
    }
    let passed = results.iter().filter(|r| r.passed).count();
    out.push_str(&format!("selftest: {passed}/{} checks passed\n", results.len()));
    out
}

/// Run the full suite. Deterministic given the seed.
pub fn run(seed: u64) -> Vec<CheckResult> {
    let mut results = vec![
        check_dice_oracles(),
        check_accuracy_oracle(),
        check_bleu_oracles(),
        check_meteor_oracle(),
        check_rouge_oracle(),
        check_trial_range_cell(),
        check_t_test_oracle(),
        check_loss_bce_analytic(),
        check_loss_dice_analytic(),
        check_loss_composition(seed),
        check_gradcheck_pixel_losses(seed),
        check_window_bounds(),
        check_split_ratio(seed),
    ];
    let model = tiny_model(seed);
    results.push(check_gradcheck_end_to_end(&model, seed));
    results.push(check_mask_biconditional(&model, seed));
    results.push(check_frozen_and_gating(seed));
    results
}

fn tiny_vocab() -> Vocabulary {
    Vocabulary::from_corpus([
        "It is . Liver tumor No findings organ_a lesion_a lesion_b what kind of in the this \
         image within can you identify any abnormality please respond with segmentation masks \
         segment describe region box shows",
    ])
}

fn tiny_model(seed: u64) -> GroundedModel {
    GroundedModel::init(ModelConfig::tiny(), tiny_vocab(), seed).expect("tiny model")
}

fn random_image(rng: &mut ChaCha8Rng, size: (usize, usize)) -> ImageSample {
    ImageSample::new(
        Array2::from_shape_fn(size, |_| rng.gen_range(0.0..1.0)),
        Modality::CT,
    )
}

fn check_dice_oracles() -> CheckResult {
    let a = array![[1u8, 1], [0, 0]];
    let b = array![[0u8, 0], [1, 1]];
    let half_p = array![[1u8, 1], [0, 0]];
    let half_g = array![[1u8, 0], [1, 0]];
    let z = Array2::<u8>::zeros((2, 2));
    let cases = [
        (dice_score(&a, &a), 1.0),
        (dice_score(&a, &b), 0.0),
        (dice_score(&half_p, &half_g), 0.5),
        (dice_score(&z, &z), 1.0),
    ];
    let passed = cases
        .iter()
        .all(|(got, want)| matches!(got, Ok(v) if (v - want).abs() < 1e-9));
    CheckResult::new("dice_oracles", passed, "identity/disjoint/half/empty".into())
}

fn check_accuracy_oracle() -> CheckResult {
    let p = vec!["Liver  Tumor".to_string(), "x".into(), "y".into(), "z".into()];
    let l = vec!["liver tumor".to_string(), "x".into(), "y".into(), "w".into()];
    let got = accuracy(&p, &l).unwrap_or(f64::NAN);
    CheckResult::new(
        "accuracy_oracle",
        (got - 0.75).abs() < 1e-9,
        format!("3/4 matches -> {got:.4}"),
    )
}

fn check_bleu_oracles() -> CheckResult {
    let perfect = TextPair::new("the liver shows a lesion", &["the liver shows a lesion"]);
    let bp_case = TextPair::new("the cat", &["the cat sat"]);
    let none = TextPair::new("alpha beta", &["gamma delta"]);
    let want_bp = (1.0f64 - 3.0 / 2.0).exp();
    let passed = (1..=4).all(|n| (bleu(&perfect, n) - 1.0).abs() < 1e-9)
        && (bleu(&bp_case, 1) - want_bp).abs() < 1e-9
        && (1..=4).all(|n| bleu(&none, n) == 0.0);
    CheckResult::new(
        "bleu_oracles",
        passed,
        format!("brevity case {:.9} vs {want_bp:.9}", bleu(&bp_case, 1)),
    )
}

fn check_meteor_oracle() -> CheckResult {
    let gold = vec![tokenize("a b")];
    let hyps = vec![tokenize("a x"), tokenize("y b c")];
    let got = meteor_corpus(&gold, &hyps).unwrap_or(f64::NAN);
    CheckResult::new(
        "meteor_oracle",
        (got - 0.5).abs() < 1e-9,
        format!("max clipped precision -> {got:.4}"),
    )
}

fn check_rouge_oracle() -> CheckResult {
    let pair = TextPair::new("a b c d", &["a c d"]);
    let (_, _, f) = rouge_l(&pair, DEFAULT_ROUGE_BETA);
    let want = 2.44 * 0.75 / (1.0 + 1.44 * 0.75);
    CheckResult::new(
        "rouge_oracle",
        (f - want).abs() < 1e-9,
        format!("F_lcs {f:.9} vs {want:.9}"),
    )
}

fn check_trial_range_cell() -> CheckResult {
    let r = trial_range(&TrialSet([96.0, 96.1, 96.2, 96.3, 96.5]));
    let cell = r.cell();
    CheckResult::new("trial_range_cell", cell == "96.2(96.0,96.5)", cell)
}

fn check_t_test_oracle() -> CheckResult {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [0.0, 2.0, 2.0, 4.0, 4.0];
    match paired_t_test(&a, &b) {
        Ok((t, p)) => CheckResult::new(
            "t_test_oracle",
            (t - 2.449489742783178).abs() < 1e-9 && (p - 0.07048399691021).abs() < 1e-6,
            format!("t={t:.9} p={p:.9}"),
        ),
        Err(e) => CheckResult::new("t_test_oracle", false, e.to_string()),
    }
}

fn check_loss_bce_analytic() -> CheckResult {
    let mut t = Tape::new();
    let probs = t.constant(Array2::from_elem((4, 4), 0.5));
    let labels = Array2::from_shape_fn((4, 4), |(r, c)| ((r + c) % 2) as u8);
    let l = t.bce_mean(probs, &labels).expect("bce");
    let got = t.scalar(l);
    CheckResult::new(
        "loss_bce_ln2",
        (got - std::f64::consts::LN_2).abs() < 1e-6,
        format!("uniform p=0.5 -> {got:.9}"),
    )
}

fn check_loss_dice_analytic() -> CheckResult {
    let ones = Array2::from_elem((10, 10), 1u8);
    let zeros = Array2::<u8>::zeros((10, 10));
    let mut t = Tape::new();
    let p_ones = t.constant(ones.mapv(|v| v as f64));
    let p_zero = t.constant(Array2::zeros((10, 10)));
    let perfect = t.dice_loss(p_ones, &ones, 1.0).expect("dice");
    let miss = t.dice_loss(p_zero, &ones, 1.0).expect("dice");
    let empty = t.dice_loss(p_zero, &zeros, 1.0).expect("dice");
    let passed = t.scalar(perfect).abs() < 1e-6
        && (t.scalar(miss) - (1.0 - 1.0 / 101.0)).abs() < 1e-6
        && t.scalar(empty).abs() < 1e-6;
    CheckResult::new(
        "loss_dice_analytic",
        passed,
        format!("perfect/miss/empty = {:.6}/{:.6}/{:.6}",
            t.scalar(perfect), t.scalar(miss), t.scalar(empty)),
    )
}

fn check_loss_composition(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let text = rng.gen_range(0.0..3.0);
        let b = rng.gen_range(0.0..1.0);
        let d = rng.gen_range(0.0..1.0);
        let got = compose_loss(TaskKind::Segmentation, text, Some(b), Some(d), &w).total;
        max_err = max_err.max((got - (text + 2.0 * b + 0.5 * d)).abs());
    }
    CheckResult::new(
        "loss_composition",
        max_err < 1e-9,
        format!("100 random triples, max err {max_err:.3e}"),
    )
}

/// Finite-difference check of the pixel losses through a sigmoid, with
/// the worst coordinate reported.
fn check_gradcheck_pixel_losses(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let z0 = Array2::from_shape_fn((8, 8), |_| rng.gen_range(-2.0..2.0));
    let labels = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0..2) as u8);
    let mut worst = (0.0f64, (0usize, 0usize), "bce");
    for kind in ["bce", "dice"] {
        let eval = |z: &Array2<f64>| -> (f64, Array2<f64>) {
            let mut t = Tape::new();
            let zv = t.param("z", z.clone());
            let probs = t.sigmoid(zv);
            let root = match kind {
                "bce" => t.bce_mean(probs, &labels).expect("bce"),
                _ => t.dice_loss(probs, &labels, 1.0).expect("dice"),
            };
            let val = t.scalar(root);
            let g = t.backward(root).into_param_grads(&t).remove("z").expect("grad");
            (val, g)
        };
        let (_, g_bp) = eval(&z0);
        let h = 1e-5;
        for i in 0..8 {
            for j in 0..8 {
                let mut zp = z0.clone();
                zp[[i, j]] += h;
                let mut zm = z0.clone();
                zm[[i, j]] -= h;
                let g_fd = (eval(&zp).0 - eval(&zm).0) / (2.0 * h);
                let rel = (g_fd - g_bp[[i, j]]).abs()
                    / g_fd.abs().max(g_bp[[i, j]].abs()).max(1e-8);
                if rel > worst.0 {
                    worst = (rel, (i, j), kind);
                }
            }
        }
    }
    CheckResult::new(
        "gradcheck_pixel_losses",
        worst.0 < 1e-6,
        format!("max rel err {:.3e} at {} ({},{})", worst.0, worst.2, worst.1 .0, worst.1 .1),
    )
}

fn check_gradcheck_end_to_end(model: &GroundedModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ab);
    let mask = Array2::from_shape_fn((16, 16), |(r, c)| {
        ((4..12).contains(&r) && (4..12).contains(&c)) as u8
    });
    let sample = VqaSample {
        id: "probe".into(),
        image: random_image(&mut rng, (16, 16)),
        question: "please segment the organ_a in this image".into(),
        answer: "It is [SEG]. organ_a".into(),
        target_mask: Some(mask),
        task: TaskKind::Segmentation,
    };
    let w = LossWeights::default();
    let mut m = model.clone();
    let err = gradcheck(&mut m, &["lm.embed"], 1e-5, 32, seed, |model| {
        sample_loss_and_grads(model, &sample, &w, 1.0)
    });
    CheckResult::new(
        "gradcheck_end_to_end",
        err < 1e-6,
        format!("[SEG] embedding row, max rel err {err:.3e}"),
    )
}

fn check_mask_biconditional(model: &GroundedModel, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1c0);
    let questions = [
        "can you identify any abnormality within this CT image",
        "please segment the organ_a in this image",
        "what kind of lesion shows in the box region",
    ];
    let mut violations = 0usize;
    let n = 100;
    for i in 0..n {
        let image = random_image(&mut rng, model.config.image_size);
        let q = questions[i % questions.len()];
        match model.forward_grounded(&image, q) {
            Ok(out) => {
                if !output_obeys_mask_contract(&out) {
                    violations += 1;
                }
            }
            Err(_) => violations += 1,
        }
    }
    CheckResult::new(
        "mask_biconditional",
        violations == 0,
        format!("{violations}/{n} violations"),
    )
}

fn check_frozen_and_gating(seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0f0);
    let mut model = tiny_model(seed);
    let frozen: Vec<(String, Array2<f64>)> = model
        .params
        .iter()
        .filter(|(_, p)| p.frozen)
        .map(|(n, p)| (n.clone(), p.value.clone()))
        .collect();
    let gated: Vec<(String, Array2<f64>)> = model
        .params
        .iter()
        .filter(|(n, _)| n.starts_with("mask_dec.") || n.starts_with("prompt."))
        .map(|(n, p)| (n.clone(), p.value.clone()))
        .collect();
    let mut opt = AdamW::new(0.01);
    let w = LossWeights::default();
    for i in 0..5 {
        let sample = VqaSample {
            id: format!("t{i}"),
            image: random_image(&mut rng, (16, 16)),
            question: "what kind of lesion shows in the box region".into(),
            answer: "Liver tumor".into(),
            target_mask: None,
            task: TaskKind::RoiClassification,
        };
        if train_step(&mut model, &mut opt, &[&sample], &w, 1.0, 1e-3).is_err() {
            return CheckResult::new("frozen_and_gating", false, "train step failed".into());
        }
    }
    let bit_identical = |saved: &[(String, Array2<f64>)]| {
        saved.iter().all(|(name, old)| {
            model
                .params
                .get(name)
                .iter()
                .zip(old.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    };
    let frozen_ok = bit_identical(&frozen);
    let gating_ok = bit_identical(&gated);
    CheckResult::new(
        "frozen_and_gating",
        frozen_ok && gating_ok,
        format!("frozen bit-identical: {frozen_ok}; mask decoder untouched by text batches: {gating_ok}"),
    )
}

fn check_window_bounds() -> CheckResult {
    let chest = CtWindow::chest();
    let abdomen = CtWindow::abdomen();
    let passed = (chest.low, chest.high) == (-1000.0, 500.0)
        && (abdomen.low, abdomen.high) == (-175.0, 250.0);
    CheckResult::new(
        "window_bounds",
        passed,
        format!(
            "chest ({},{}) abdomen ({},{})",
            chest.low, chest.high, abdomen.low, abdomen.high
        ),
    )
}

fn check_split_ratio(seed: u64) -> CheckResult {
    let samples: Vec<VqaSample> = (0..10)
        .map(|v| VqaSample {
            id: format!("v{v}_s0"),
            image: ImageSample {
                pixels: Array2::zeros((4, 4)),
                modality: Modality::CT,
                volume_id: Some(format!("v{v}")),
                slice_index: Some(0),
            },
            question: "q".into(),
            answer: "a".into(),
            target_mask: None,
            task: TaskKind::RoiClassification,
        })
        .collect();
    let manifest = DatasetManifest::new(samples, seed);
    match split_dataset(&manifest, seed) {
        Ok(m) => {
            let test = m.split.values().filter(|&&s| s == Split::Test).count();
            CheckResult::new(
                "split_80_20",
                test == 2 && m.split.len() == 10,
                format!("{}/{} volumes held out", test, m.split.len()),
            )
        }
        Err(e) => CheckResult::new("split_80_20", false, e.to_string()),
    }
}
