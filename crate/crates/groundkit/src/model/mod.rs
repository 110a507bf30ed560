//! The toy grounded interpreter: an MLLM vision encoder + autoregressive
//! LM, and a segmentation branch (own frozen vision encoder, prompt
//! encoder, mask decoder) prompted by the LM's language embeddings. The
//! [SEG] token in a generated answer triggers mask decoding.

pub mod vocab;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{answer_expects_mask, GroundedOutput, ImageSample, SEG_TOKEN};
use crate::io;
use crate::tensor::{Tape, Var};
pub use vocab::{Vocabulary, BOS_ID, EOS_ID, PAD_ID, SEG_ID, UNK_ID};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("image shape {0:?} does not match configured {1:?}")]
    ImageShapeMismatch((usize, usize), (usize, usize)),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("question must be non-empty")]
    EmptyQuestion,
    #[error("sequence length {0} exceeds budget {1}")]
    SequenceTooLong(usize, usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

/// What gets injected into the prompt encoder as language embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Final-layer LM hidden states at instruction + generated positions.
    #[default]
    HiddenStates,
    /// Raw embedding-table rows of those tokens.
    EmbeddingTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_vision: usize,
    pub n_layers_lm: usize,
    pub n_layers_mask_decoder: usize,
    pub max_answer_len: usize,
    /// Text position budget (question + BOS + answer).
    pub max_text_len: usize,
    pub mask_threshold: f64,
    pub adapter_rank: Option<usize>,
    /// Number of learnable prompt-encoder query vectors.
    pub prompt_queries: usize,
    pub injection: InjectionMode,
}

impl ModelConfig {
    /// Small default used by the desk-scale experiments: 64×64 images,
    /// patch 8, d_model 64.
    pub fn toy() -> Self {
        Self {
            image_size: (64, 64),
            patch_size: 8,
            d_model: 64,
            n_heads: 4,
            n_layers_vision: 1,
            n_layers_lm: 2,
            n_layers_mask_decoder: 1,
            max_answer_len: 16,
            max_text_len: 48,
            mask_threshold: 0.5,
            adapter_rank: Some(8),
            prompt_queries: 4,
            injection: InjectionMode::HiddenStates,
        }
    }

    /// 16×16 config for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: (16, 16),
            patch_size: 4,
            d_model: 32,
            n_heads: 2,
            n_layers_vision: 1,
            n_layers_lm: 1,
            n_layers_mask_decoder: 1,
            max_answer_len: 12,
            max_text_len: 32,
            mask_threshold: 0.5,
            adapter_rank: Some(4),
            prompt_queries: 2,
            injection: InjectionMode::HiddenStates,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "image size {h}x{w} not divisible by patch {}",
                self.patch_size
            )));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_threshold) || self.mask_threshold <= 0.0 {
            return Err(ModelError::InvalidConfig("mask_threshold must be in (0,1)".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size.0 / self.patch_size) * (self.image_size.1 / self.patch_size)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch_size, self.image_size.1 / self.patch_size)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Array2<f64>,
    pub frozen: bool,
}

/// Named parameter tensors; iteration order is the sorted name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, value: Array2<f64>, frozen: bool) {
        self.params.insert(name.to_string(), Param { value, frozen });
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.params[name].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        &mut self.params.get_mut(name).unwrap().value
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.params[name].frozen
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    fn leaf(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(name, self.params[name].value.clone())
    }
}

/// Low-rank update: effective weight = base + B·A, with B zero at
/// initialization so the adapter starts as the identity.
#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    /// rank×in
    pub a: Array2<f64>,
    /// out×rank
    pub b: Array2<f64>,
}

impl LowRankAdapter {
    pub fn zero_init(out: usize, input: usize, rank: usize, rng: &mut impl Rng) -> Self {
        let scale = (1.0 / input as f64).sqrt();
        Self {
            a: Array2::from_shape_fn((rank, input), |_| rng.gen_range(-scale..scale)),
            b: Array2::zeros((out, rank)),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.rank() * (self.a.ncols() + self.b.nrows())
    }
}

/// y = base·x + B·(A·x). `base` is out×in.
pub fn apply_adapter(
    base: &Array2<f64>,
    adapter: &LowRankAdapter,
    x: &Array1<f64>,
) -> Result<Array1<f64>, ModelError> {
    let (out, input) = base.dim();
    if x.len() != input || adapter.a.ncols() != input || adapter.b.nrows() != out
        || adapter.a.nrows() != adapter.b.ncols()
    {
        return Err(ModelError::ShapeMismatch(format!(
            "base {:?}, A {:?}, B {:?}, x {}",
            base.dim(),
            adapter.a.dim(),
            adapter.b.dim(),
            x.len()
        )));
    }
    Ok(base.dot(x) + adapter.b.dot(&adapter.a.dot(x)))
}

/// Per-vector provenance tag of a language-embedding sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Instruction,
    Generated,
}

/// Instruction-token embeddings followed by generated-token embeddings,
/// in original order.
#[derive(Debug, Clone)]
pub struct LanguageEmbeddings {
    pub vectors: Array2<f64>,
    pub provenance: Vec<Provenance>,
}

/// Positions of the text segments inside the full LM input sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceLayout {
    pub n_vision: usize,
    pub n_question: usize,
    /// answer tokens present as inputs (teacher forcing or generated)
    pub n_answer: usize,
}

impl SequenceLayout {
    pub fn seq_len(&self) -> usize {
        // vision ++ question ++ BOS ++ answer
        self.n_vision + self.n_question + 1 + self.n_answer
    }
}

#[derive(Clone)]
pub struct GroundedModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
}

const FROZEN_PREFIXES: [&str; 2] = ["mllm_vis.", "seg_vis."];

fn name_is_frozen(name: &str, adapter: bool) -> bool {
    if FROZEN_PREFIXES.iter().any(|p| name.starts_with(p)) {
        return true;
    }
    // With adapters active, adapted base projections stay frozen and only
    // the low-rank factors train.
    adapter
        && (name.ends_with(".wq") || name.ends_with(".wv"))
        && name.starts_with("lm.")
}

impl GroundedModel {
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        let d = config.d_model;
        let p2 = config.patch_size * config.patch_size;
        let n_patches = config.n_patches();
        let use_adapter = config.adapter_rank.is_some();

        let xavier = |store: &mut ParamStore, name: &str, rows: usize, cols: usize,
                          rng: &mut ChaCha8Rng| {
            let s = (6.0 / (rows + cols) as f64).sqrt();
            let w = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s));
            store.insert(name, w, name_is_frozen(name, use_adapter));
        };
        let zeros = |store: &mut ParamStore, name: &str, rows: usize, cols: usize, adapter: bool| {
            store.insert(name, Array2::zeros((rows, cols)), name_is_frozen(name, adapter));
        };
        let ln_init = |store: &mut ParamStore, prefix: &str, d: usize, adapter: bool| {
            store.insert(
                &format!("{prefix}.g"),
                Array2::ones((1, d)),
                name_is_frozen(prefix, adapter),
            );
            store.insert(
                &format!("{prefix}.b"),
                Array2::zeros((1, d)),
                name_is_frozen(prefix, adapter),
            );
        };

        let block = |store: &mut ParamStore,
                     prefix: &str,
                     d: usize,
                     lora_rank: Option<usize>,
                     rng: &mut ChaCha8Rng| {
            for w in ["wq", "wk", "wv", "wo"] {
                let name = format!("{prefix}.attn.{w}");
                let s = (6.0 / (2 * d) as f64).sqrt();
                let m = Array2::from_shape_fn((d, d), |_| rng.gen_range(-s..s));
                store.insert(&name, m, name_is_frozen(&name, lora_rank.is_some()));
            }
            if let Some(rank) = lora_rank {
                for w in ["wq", "wv"] {
                    let s = (1.0 / d as f64).sqrt();
                    let a = Array2::from_shape_fn((d, rank), |_| rng.gen_range(-s..s));
                    store.insert(&format!("{prefix}.attn.{w}.lora_a"), a, false);
                    store.insert(
                        &format!("{prefix}.attn.{w}.lora_b"),
                        Array2::zeros((rank, d)),
                        false,
                    );
                }
            }
            ln_init(store, &format!("{prefix}.ln1"), d, lora_rank.is_some());
            ln_init(store, &format!("{prefix}.ln2"), d, lora_rank.is_some());
            let hidden = 4 * d;
            let s1 = (6.0 / (d + hidden) as f64).sqrt();
            store.insert(
                &format!("{prefix}.mlp.w1"),
                Array2::from_shape_fn((d, hidden), |_| rng.gen_range(-s1..s1)),
                name_is_frozen(prefix, lora_rank.is_some()),
            );
            store.insert(
                &format!("{prefix}.mlp.b1"),
                Array2::zeros((1, hidden)),
                name_is_frozen(prefix, lora_rank.is_some()),
            );
            store.insert(
                &format!("{prefix}.mlp.w2"),
                Array2::from_shape_fn((hidden, d), |_| rng.gen_range(-s1..s1)),
                name_is_frozen(prefix, lora_rank.is_some()),
            );
            store.insert(
                &format!("{prefix}.mlp.b2"),
                Array2::zeros((1, d)),
                name_is_frozen(prefix, lora_rank.is_some()),
            );
        };

        // MLLM vision encoder (frozen). The patch embedding leans on the
        // identity so raw intensities survive into the token stream, the
        // desk-scale stand-in for a pretrained encoder's features.
        let mut mllm_embed = Array2::from_shape_fn((p2, d), |_| rng.gen_range(-0.02..0.02));
        for i in 0..p2.min(d) {
            mllm_embed[[i, i]] += 1.0;
        }
        params.insert("mllm_vis.patch_embed.w", mllm_embed, true);
        zeros(&mut params, "mllm_vis.patch_embed.b", 1, d, use_adapter);
        let s = 0.02;
        params.insert(
            "mllm_vis.pos",
            Array2::from_shape_fn((n_patches, d), |_| rng.gen_range(-s..s)),
            true,
        );
        for i in 0..config.n_layers_vision {
            block(&mut params, &format!("mllm_vis.l{i}"), d, None, &mut rng);
        }

        // Language model
        let v = vocab.len();
        params.insert(
            "lm.embed",
            Array2::from_shape_fn((v, d), |_| rng.gen_range(-s..s)),
            false,
        );
        params.insert(
            "lm.pos",
            Array2::from_shape_fn((n_patches + config.max_text_len, d), |_| {
                rng.gen_range(-s..s)
            }),
            false,
        );
        for i in 0..config.n_layers_lm {
            block(&mut params, &format!("lm.l{i}"), d, config.adapter_rank, &mut rng);
        }
        ln_init(&mut params, "lm.ln_f", d, use_adapter);
        xavier(&mut params, "lm.head", d, v, &mut rng);

        // Segmentation vision encoder (frozen): identity-leaning patch
        // embedding keeps per-pixel information trivially recoverable.
        let mut seg_embed = Array2::from_shape_fn((p2, d), |_| rng.gen_range(-0.02..0.02));
        for i in 0..p2.min(d) {
            seg_embed[[i, i]] += 1.0;
        }
        params.insert("seg_vis.patch_embed.w", seg_embed, true);
        params.insert("seg_vis.patch_embed.b", Array2::zeros((1, d)), true);
        params.insert(
            "seg_vis.pos",
            Array2::from_shape_fn((n_patches, d), |_| rng.gen_range(-s..s)),
            true,
        );

        // Prompt encoder (fine-tuned)
        params.insert(
            "prompt.queries",
            Array2::from_shape_fn((config.prompt_queries, d), |_| rng.gen_range(-s..s)),
            false,
        );
        block(&mut params, "prompt.blk", d, None, &mut rng);

        // Mask decoder (fine-tuned)
        for i in 0..config.n_layers_mask_decoder {
            block(&mut params, &format!("mask_dec.l{i}"), d, None, &mut rng);
        }
        xavier(&mut params, "mask_dec.out.w", d, p2, &mut rng);
        zeros(&mut params, "mask_dec.out.b", 1, p2, use_adapter);

        Ok(Self { config, vocab, params })
    }

    /// Non-overlapping patch extraction, row-major patch order, each patch
    /// flattened row-major.
    pub fn image_to_patches(&self, image: &ImageSample) -> Result<Array2<f64>, ModelError> {
        let (h, w) = image.shape();
        if (h, w) != self.config.image_size {
            return Err(ModelError::ImageShapeMismatch((h, w), self.config.image_size));
        }
        let p = self.config.patch_size;
        let (gh, gw) = self.config.grid();
        let mut out = Array2::zeros((gh * gw, p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    for px in 0..p {
                        out[[gy * gw + gx, py * p + px]] =
                            image.pixels[[gy * p + py, gx * p + px]];
                    }
                }
            }
        }
        Ok(out)
    }

    fn linear(&self, t: &mut Tape, x: Var, w_name: &str, b_name: Option<&str>) -> Var {
        let w = self.params.leaf(t, w_name);
        let y = t.matmul(x, w);
        match b_name {
            Some(b) => {
                let bias = self.params.leaf(t, b);
                t.add_row(y, bias)
            }
            None => y,
        }
    }

    /// Projection with optional low-rank adapter on top of a frozen base.
    fn adapted_linear(&self, t: &mut Tape, x: Var, w_name: &str, lora: bool) -> Var {
        let base = self.linear(t, x, w_name, None);
        if !lora || !self.params.params.contains_key(&format!("{w_name}.lora_a")) {
            return base;
        }
        let a = self.params.leaf(t, &format!("{w_name}.lora_a"));
        let b = self.params.leaf(t, &format!("{w_name}.lora_b"));
        let xa = t.matmul(x, a);
        let delta = t.matmul(xa, b);
        t.add(base, delta)
    }

    fn attention(
        &self,
        t: &mut Tape,
        prefix: &str,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Array2<f64>>,
        lora: bool,
    ) -> Var {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        let dh = d / heads;
        let q = self.adapted_linear(t, q_in, &format!("{prefix}.wq"), lora);
        let k = self.linear(t, kv_in, &format!("{prefix}.wk"), None);
        let v = self.adapted_linear(t, kv_in, &format!("{prefix}.wv"), lora);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = t.slice_cols(q, h * dh, dh);
            let kh = t.slice_cols(k, h * dh, dh);
            let vh = t.slice_cols(v, h * dh, dh);
            let kht = t.transpose(kh);
            let scores = t.matmul(qh, kht);
            let scaled = t.scale(scores, scale);
            let attn = t.softmax_masked(scaled, mask.cloned());
            ctx_heads.push(t.matmul(attn, vh));
        }
        let ctx = t.concat_cols(&ctx_heads);
        self.linear(t, ctx, &format!("{prefix}.wo"), None)
    }

    fn layer_norm(&self, t: &mut Tape, x: Var, prefix: &str) -> Var {
        let g = self.params.leaf(t, &format!("{prefix}.g"));
        let b = self.params.leaf(t, &format!("{prefix}.b"));
        t.layer_norm(x, g, b)
    }

    fn mlp(&self, t: &mut Tape, x: Var, prefix: &str) -> Var {
        let h = self.linear(t, x, &format!("{prefix}.w1"), Some(&format!("{prefix}.b1")));
        let h = t.gelu(h);
        self.linear(t, h, &format!("{prefix}.w2"), Some(&format!("{prefix}.b2")))
    }

    /// Pre-LN transformer block; cross-attention when `kv` differs from x.
    fn transformer_block(
        &self,
        t: &mut Tape,
        prefix: &str,
        x: Var,
        kv: Option<Var>,
        mask: Option<&Array2<f64>>,
        lora: bool,
    ) -> Var {
        let normed = self.layer_norm(t, x, &format!("{prefix}.ln1"));
        let kv_in = kv.unwrap_or(normed);
        let attn = self.attention(t, &format!("{prefix}.attn"), normed, kv_in, mask, lora);
        let x = t.add(x, attn);
        let normed = self.layer_norm(t, x, &format!("{prefix}.ln2"));
        let m = self.mlp(t, normed, &format!("{prefix}.mlp"));
        t.add(x, m)
    }

    /// MLLM vision tokens on the tape: one d_model token per patch.
    pub fn vision_tokens(&self, t: &mut Tape, image: &ImageSample) -> Result<Var, ModelError> {
        let patches = t.constant(self.image_to_patches(image)?);
        let x = self.linear(
            t,
            patches,
            "mllm_vis.patch_embed.w",
            Some("mllm_vis.patch_embed.b"),
        );
        let pos = self.params.leaf(t, "mllm_vis.pos");
        let mut x = t.add(x, pos);
        for i in 0..self.config.n_layers_vision {
            x = self.transformer_block(t, &format!("mllm_vis.l{i}"), x, None, None, false);
        }
        Ok(x)
    }

    /// Inference wrapper over [`Self::vision_tokens`].
    pub fn encode_image_mllm(&self, image: &ImageSample) -> Result<Array2<f64>, ModelError> {
        let mut t = Tape::new();
        let v = self.vision_tokens(&mut t, image)?;
        Ok(t.value(v).clone())
    }

    fn causal_mask(len: usize) -> Array2<f64> {
        Array2::from_shape_fn((len, len), |(r, c)| if c > r { -1e9 } else { 0.0 })
    }

    /// Full LM forward over [vision ++ text] with a causal mask. Returns
    /// (final hidden states, vocab logits), both over the whole sequence.
    pub fn lm_forward(
        &self,
        t: &mut Tape,
        image: &ImageSample,
        token_ids: &[usize],
    ) -> Result<(Var, Var), ModelError> {
        let n_patches = self.config.n_patches();
        if token_ids.len() > self.config.max_text_len {
            return Err(ModelError::SequenceTooLong(
                token_ids.len(),
                self.config.max_text_len,
            ));
        }
        let vis = self.vision_tokens(t, image)?;
        let embed = self.params.leaf(t, "lm.embed");
        let tok = t.gather(embed, token_ids);
        let x = t.concat_rows(&[vis, tok]);
        let seq = n_patches + token_ids.len();
        let pos_table = self.params.leaf(t, "lm.pos");
        let pos_ids: Vec<usize> = (0..seq).collect();
        let pos = t.gather(pos_table, &pos_ids);
        let mut x = t.add(x, pos);
        let mask = Self::causal_mask(seq);
        let lora = self.config.adapter_rank.is_some();
        for i in 0..self.config.n_layers_lm {
            x = self.transformer_block(t, &format!("lm.l{i}"), x, None, Some(&mask), lora);
        }
        let hidden = self.layer_norm(t, x, "lm.ln_f");
        let logits = self.linear(t, hidden, "lm.head", None);
        Ok((hidden, logits))
    }

    /// Greedy decoding: argmax per step, stop at EOS or max_answer_len.
    /// Returns generated ids without BOS/EOS.
    pub fn generate(&self, image: &ImageSample, question: &str) -> Result<Vec<usize>, ModelError> {
        if question.trim().is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        let q_ids = self.vocab.tokenize(question);
        let mut ids = q_ids;
        ids.push(BOS_ID);
        let mut generated = Vec::new();
        for _ in 0..self.config.max_answer_len {
            if ids.len() >= self.config.max_text_len {
                break;
            }
            let mut t = Tape::new();
            let (_, logits) = self.lm_forward(&mut t, image, &ids)?;
            let lv = t.value(logits);
            let last = lv.nrows() - 1;
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (j, &v) in lv.row(last).iter().enumerate() {
                if v > best_val {
                    best_val = v;
                    best = j;
                }
            }
            if best == EOS_ID {
                break;
            }
            generated.push(best);
            ids.push(best);
        }
        Ok(generated)
    }

    /// Language-embedding sequence from the embedding table, per the
    /// instruction/generated concatenation contract. The end-to-end path
    /// uses [`Self::language_embeddings_on_tape`] instead when the config
    /// selects hidden-state injection.
    pub fn build_language_embeddings(
        &self,
        instruction_ids: &[usize],
        generated_ids: &[usize],
    ) -> Result<LanguageEmbeddings, ModelError> {
        if instruction_ids.is_empty() {
            return Err(ModelError::EmptyQuestion);
        }
        let table = self.params.get("lm.embed");
        let total = instruction_ids.len() + generated_ids.len();
        let mut vectors = Array2::zeros((total, self.config.d_model));
        let mut provenance = Vec::with_capacity(total);
        for (row, &id) in instruction_ids.iter().chain(generated_ids).enumerate() {
            vectors.row_mut(row).assign(&table.row(id));
            provenance.push(if row < instruction_ids.len() {
                Provenance::Instruction
            } else {
                Provenance::Generated
            });
        }
        Ok(LanguageEmbeddings { vectors, provenance })
    }

    /// Slice the language embeddings for prompt injection out of an LM
    /// forward pass, honoring the configured injection mode.
    ///
    /// `layout` describes the sequence fed to [`Self::lm_forward`]:
    /// vision ++ question ++ BOS ++ answer.
    pub fn language_embeddings_on_tape(
        &self,
        t: &mut Tape,
        hidden: Var,
        token_ids: &[usize],
        layout: SequenceLayout,
    ) -> Var {
        match self.config.injection {
            InjectionMode::HiddenStates => {
                let q = t.slice_rows(hidden, layout.n_vision, layout.n_question);
                if layout.n_answer == 0 {
                    q
                } else {
                    let a = t.slice_rows(
                        hidden,
                        layout.n_vision + layout.n_question + 1,
                        layout.n_answer,
                    );
                    t.concat_rows(&[q, a])
                }
            }
            InjectionMode::EmbeddingTable => {
                let embed = self.params.leaf(t, "lm.embed");
                let mut ids: Vec<usize> = token_ids[..layout.n_question].to_vec();
                ids.extend_from_slice(
                    &token_ids[layout.n_question + 1..layout.n_question + 1 + layout.n_answer],
                );
                t.gather(embed, &ids)
            }
        }
    }

    /// Frozen segmentation-branch features, one token per patch.
    fn seg_features(&self, t: &mut Tape, image: &ImageSample) -> Result<Var, ModelError> {
        let patches = t.constant(self.image_to_patches(image)?);
        let x = self.linear(t, patches, "seg_vis.patch_embed.w", Some("seg_vis.patch_embed.b"));
        let pos = self.params.leaf(t, "seg_vis.pos");
        Ok(t.add(x, pos))
    }

    /// Prompt encoder: K learnable queries cross-attend to the language
    /// embeddings.
    fn encode_prompt(&self, t: &mut Tape, lang: Var) -> Var {
        let queries = self.params.leaf(t, "prompt.queries");
        self.transformer_block(t, "prompt.blk", queries, Some(lang), None, false)
    }

    /// Mask logits at image resolution, conditioned on the language
    /// embeddings through the prompt encoder.
    pub fn decode_mask_on_tape(
        &self,
        t: &mut Tape,
        image: &ImageSample,
        lang: Var,
    ) -> Result<Var, ModelError> {
        let prompts = self.encode_prompt(t, lang);
        let mut x = self.seg_features(t, image)?;
        for i in 0..self.config.n_layers_mask_decoder {
            x = self.transformer_block(t, &format!("mask_dec.l{i}"), x, Some(prompts), None, false);
        }
        let patch_logits = self.linear(t, x, "mask_dec.out.w", Some("mask_dec.out.b"));
        let (gh, gw) = self.config.grid();
        Ok(t.patches_to_image(patch_logits, gh, gw, self.config.patch_size))
    }

    /// Inference-path mask decoding from a materialized embedding
    /// sequence.
    pub fn decode_mask(
        &self,
        image: &ImageSample,
        lang: &LanguageEmbeddings,
    ) -> Result<Array2<f64>, ModelError> {
        let mut t = Tape::new();
        let lang_var = t.constant(lang.vectors.clone());
        let logits = self.decode_mask_on_tape(&mut t, image, lang_var)?;
        Ok(t.value(logits).clone())
    }

    /// End-to-end inference: generate the answer; decode a mask when the
    /// answer carries [SEG]; emit an all-zero mask for "No findings".
    pub fn forward_grounded(
        &self,
        image: &ImageSample,
        question: &str,
    ) -> Result<GroundedOutput, ModelError> {
        let generated = self.generate(image, question)?;
        let answer = self.vocab.detokenize(&generated);
        if answer.contains(SEG_TOKEN) {
            let q_ids = self.vocab.tokenize(question);
            let layout = SequenceLayout {
                n_vision: self.config.n_patches(),
                n_question: q_ids.len(),
                n_answer: generated.len(),
            };
            let mut ids = q_ids;
            ids.push(BOS_ID);
            ids.extend_from_slice(&generated);
            let mut t = Tape::new();
            let (hidden, _) = self.lm_forward(&mut t, image, &ids)?;
            let lang = self.language_embeddings_on_tape(&mut t, hidden, &ids, layout);
            let logits_var = self.decode_mask_on_tape(&mut t, image, lang)?;
            let sig = t.sigmoid(logits_var);
            let probs = t.value(sig);
            let mask = probs.mapv(|p| (p >= self.config.mask_threshold) as u8);
            let logits = t.value(logits_var).clone();
            Ok(GroundedOutput { answer, mask: Some(mask), mask_logits: Some(logits) })
        } else if crate::datamodel::is_no_findings(&answer) {
            let (h, w) = image.shape();
            Ok(GroundedOutput { answer, mask: Some(Array2::zeros((h, w))), mask_logits: None })
        } else {
            Ok(GroundedOutput { answer, mask: None, mask_logits: None })
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let config = serde_json::json!({
            "model": self.config,
            "vocab": self.vocab.tokens(),
        });
        let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .params
            .iter()
            .map(|(name, p)| {
                let (r, c) = p.value.dim();
                (name.clone(), vec![r, c], p.value.iter().map(|&v| v as f32).collect())
            })
            .collect();
        io::save_tensor_archive(path, config, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (config_json, tensors) = io::load_tensor_archive(path)?;
        let config: ModelConfig = serde_json::from_value(config_json["model"].clone())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let tokens: Vec<String> = serde_json::from_value(config_json["vocab"].clone())
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let vocab = Vocabulary::from_tokens(tokens);
        let use_adapter = config.adapter_rank.is_some();
        let mut params = ParamStore::default();
        for (name, shape, data) in tensors {
            if shape.len() != 2 {
                return Err(ModelError::Checkpoint(format!("tensor {name} is not 2D")));
            }
            let value = Array2::from_shape_vec(
                (shape[0], shape[1]),
                data.into_iter().map(|v| v as f64).collect(),
            )
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
            let frozen = name_is_frozen(&name, use_adapter);
            params.insert(&name, value, frozen);
        }
        Ok(Self { config, vocab, params })
    }

    /// Names of all frozen parameters (the two vision encoders and, with
    /// adapters active, the adapted base projections).
    pub fn frozen_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Expected mask presence for a generated answer (the [SEG]/mask
/// biconditional, including the "No findings" all-zero case).
pub fn output_obeys_mask_contract(out: &GroundedOutput) -> bool {
    let expects = answer_expects_mask(&out.answer);
    match (&out.mask, expects) {
        (Some(mask), true) => {
            !crate::datamodel::is_no_findings(&out.answer) || mask.iter().all(|&v| v == 0)
        }
        (None, false) => true,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn test_vocab() -> Vocabulary {
        Vocabulary::from_corpus([
            "It is . Liver tumor No findings organ a lesion b what in this image segment",
        ])
    }

    fn tiny_model() -> GroundedModel {
        GroundedModel::init(ModelConfig::tiny(), test_vocab(), 7).unwrap()
    }

    fn image_for(config: &ModelConfig, seed: u64) -> ImageSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageSample::new(
            Array2::from_shape_fn(config.image_size, |_| rng.gen_range(0.0..1.0)),
            crate::datamodel::Modality::CT,
        )
    }

    #[test]
    fn vision_token_count_and_determinism() {
        let m = tiny_model();
        let img = image_for(&m.config, 1);
        let tokens = m.encode_image_mllm(&img).unwrap();
        assert_eq!(tokens.dim(), (m.config.n_patches(), m.config.d_model));
        let again = m.encode_image_mllm(&img).unwrap();
        assert_eq!(tokens, again);

        // perturbing one pixel changes at least the token of its patch
        let mut img2 = img.clone();
        img2.pixels[[0, 0]] += 0.5;
        let perturbed = m.encode_image_mllm(&img2).unwrap();
        let delta: f64 = (&perturbed.row(0) - &tokens.row(0)).mapv(f64::abs).sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn vision_wrong_shape_errors() {
        let m = tiny_model();
        let img = ImageSample::new(Array2::zeros((8, 8)), crate::datamodel::Modality::CT);
        assert!(matches!(
            m.encode_image_mllm(&img),
            Err(ModelError::ImageShapeMismatch(..))
        ));
    }

    #[test]
    fn generate_is_deterministic_and_bounded() {
        let m = tiny_model();
        let img = image_for(&m.config, 2);
        let a = m.generate(&img, "what is in this image").unwrap();
        let b = m.generate(&img, "what is in this image").unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= m.config.max_answer_len);
        assert!(a.iter().all(|&id| id < m.vocab.len()));
        assert!(m.generate(&img, "  ").is_err());
    }

    #[test]
    fn build_language_embeddings_layout() {
        let m = tiny_model();
        let inst = [5, 6, 7, 8, 9];
        let gen = [10, 11, 12];
        let lang = m.build_language_embeddings(&inst, &gen).unwrap();
        assert_eq!(lang.vectors.nrows(), 8);
        assert_eq!(
            lang.provenance,
            vec![
                Provenance::Instruction,
                Provenance::Instruction,
                Provenance::Instruction,
                Provenance::Instruction,
                Provenance::Instruction,
                Provenance::Generated,
                Provenance::Generated,
                Provenance::Generated,
            ]
        );
        let empty_gen = m.build_language_embeddings(&inst, &[]).unwrap();
        assert_eq!(empty_gen.vectors.nrows(), 5);
        // reordering generated ids reorders the rows
        let swapped = m.build_language_embeddings(&inst, &[11, 10, 12]).unwrap();
        assert_eq!(swapped.vectors.row(5), lang.vectors.row(6));
        assert!(m.build_language_embeddings(&[], &gen).is_err());
    }

    #[test]
    fn decode_mask_shape_and_sensitivity() {
        let m = tiny_model();
        let img = image_for(&m.config, 3);
        let lang_a = m.build_language_embeddings(&[5, 6], &[SEG_ID]).unwrap();
        let logits_a = m.decode_mask(&img, &lang_a).unwrap();
        assert_eq!(logits_a.dim(), m.config.image_size);
        assert!(logits_a.iter().all(|v| v.is_finite()));

        let lang_b = m.build_language_embeddings(&[7, 8], &[SEG_ID, 9]).unwrap();
        let logits_b = m.decode_mask(&img, &lang_b).unwrap();
        let linf = logits_a
            .iter()
            .zip(logits_b.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(linf > 0.0);
    }

    #[test]
    fn forward_grounded_contract_holds() {
        let m = tiny_model();
        for seed in 0..5 {
            let img = image_for(&m.config, seed);
            let out = m.forward_grounded(&img, "what is in this image").unwrap();
            assert!(output_obeys_mask_contract(&out));
            if let Some(mask) = &out.mask {
                assert_eq!(mask.dim(), m.config.image_size);
            }
        }
    }

    #[test]
    fn adapter_zero_init_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let adapter = LowRankAdapter::zero_init(4, 6, 2, &mut rng);
        let x = Array1::from_shape_fn(6, |i| i as f64 * 0.3 - 1.0);
        let y = apply_adapter(&base, &adapter, &x).unwrap();
        let direct = base.dot(&x);
        for (a, b) in y.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(adapter.trainable_param_count(), 2 * (6 + 4));
    }

    #[test]
    fn adapter_full_rank_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        let delta = Array2::from_shape_fn((3, 3), |_| rng.gen_range(-1.0..1.0));
        // B = delta, A = I: effective = base + delta
        let adapter = LowRankAdapter { a: Array2::eye(3), b: delta.clone() };
        let x = Array1::from_vec(vec![0.5, -1.0, 2.0]);
        let y = apply_adapter(&base, &adapter, &x).unwrap();
        let expect = (&base + &delta).dot(&x);
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adapter_shape_mismatch_errors() {
        let base = Array2::zeros((4, 6));
        let adapter = LowRankAdapter { a: Array2::zeros((2, 5)), b: Array2::zeros((4, 2)) };
        assert!(apply_adapter(&base, &adapter, &Array1::zeros(6)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gkpt");
        let m = tiny_model();
        m.save(&path).unwrap();
        let back = GroundedModel::load(&path).unwrap();
        assert_eq!(back.vocab.len(), m.vocab.len());
        assert_eq!(back.params.iter().count(), m.params.iter().count());
        for (name, p) in m.params.iter() {
            let loaded = back.params.get(name);
            assert_eq!(back.params.is_frozen(name), p.frozen, "{name}");
            for (a, b) in loaded.iter().zip(p.value.iter()) {
                assert!((a - b).abs() < 1e-6, "{name}");
            }
        }
        // generation agrees through the f32 round trip
        let img = image_for(&m.config, 5);
        assert_eq!(
            m.generate(&img, "what is this").unwrap(),
            back.generate(&img, "what is this").unwrap()
        );
    }
}
