// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small decoder-only multimodal transformer with seeded weights.
//!
//! The input sequence is `N^2` visual tokens (given directly as `d`-dim
//! feature vectors) followed by text tokens. Each block is pre-norm:
//!
//! ```text
//! x += Attn(LN(x)) Wo          causal, H heads, scaled dot product
//! x += relu(LN(x) W1) W2       hidden width 4d
//! logits = LN(x_last) W_head
//! ```
//!
//! `LN` is a layer norm without affine parameters (`eps = 1e-5`). Positions
//! use a learned absolute embedding added to the input.
//!
//! # Weight stream
//!
//! All weights come from one SplitMix64 stream seeded with `ToyConfig::seed`:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! out = z ^ (z >> 31)
//! weight = (2 * (out >> 11) * 2^-53 - 1) * scale
//! ```
//!
//! Matrices are filled row-major in this order: token embedding `V x d`
//! (scale 1), position embedding `(N^2 + max_text_len) x d` (scale 0.5),
//! then per layer `Wq, Wk, Wv, Wo` (`d x d`, scale `1/sqrt(d)`), `W1`
//! (`d x 4d`, scale `1/sqrt(d)`), `W2` (`4d x d`, scale `1/sqrt(4d)`), and
//! finally `W_head` (`d x V`, scale `1/sqrt(d)`).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refine::{apply_knockout_in_place, mask_scores_in_place, MaskMode, RefinePlan, TokenLayout, TriageError};
use crate::tensor_io::{encode_dump, AttentionStack, DumpError, SourceKind};

/// Generic prompt used for the reference dump.
pub const REFERENCE_PROMPT: &str = "Write a general description of the image.";

/// Words with reserved ids `0..FIXED_WORDS.len()`; the reference prompt
/// tokenizes entirely into this range.
pub const FIXED_WORDS: [&str; 9] = ["write", "a", "general", "description", "of", "the", "image", ".", "?"];

pub const MIN_VOCAB: usize = 16;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("text is empty")]
    EmptyText,
    #[error("text has {len} tokens, max is {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocab of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("visual features are {rows}x{cols}, expected {exp_rows}x{exp_cols}")]
    VisualShape {
        rows: usize,
        cols: usize,
        exp_rows: usize,
        exp_cols: usize,
    },
    #[error("knockout layer {layer} out of range (model has {layers} layers)")]
    KnockoutLayer { layer: usize, layers: usize },
    #[error(transparent)]
    Knockout(#[from] TriageError),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// SplitMix64 stream; see the module docs for the exact float mapping.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-scale, scale)`.
    pub fn next_weight(&mut self, scale: f64) -> f64 {
        (2.0 * self.next_unit() - 1.0) * scale
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    fn random(rows: usize, cols: usize, scale: f64, rng: &mut SplitMix64) -> Self {
        let data = (0..rows * cols).map(|_| rng.next_weight(scale)).collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `self * rhs`.
    fn matmul(&self, rhs: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, rhs.rows);
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let acc = out.row_mut(r);
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, b) in acc.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub grid_n: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub max_text_len: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 2,
            model_dim: 16,
            grid_n: 4,
            vocab_size: 64,
            seed: 42,
            max_text_len: 32,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: String| Err(ToyError::InvalidConfig(m));
        if self.layers == 0 || self.heads == 0 || self.model_dim == 0 || self.grid_n == 0 || self.max_text_len == 0 {
            return bad(format!("all counts must be >= 1: {self:?}"));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.vocab_size < MIN_VOCAB {
            return bad(format!("vocab_size must be >= {MIN_VOCAB}, got {}", self.vocab_size));
        }
        Ok(())
    }

    pub fn visual_tokens(&self) -> usize {
        self.grid_n * self.grid_n
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn max_positions(&self) -> usize {
        self.visual_tokens() + self.max_text_len
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelState {
    pub config: ToyConfig,
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub head: Matrix,
}

pub fn init_model(config: &ToyConfig) -> Result<ToyModelState, ToyError> {
    config.validate()?;
    let d = config.model_dim;
    let mut rng = SplitMix64::new(config.seed);
    let token_embedding = Matrix::random(config.vocab_size, d, 1.0, &mut rng);
    let position_embedding = Matrix::random(config.max_positions(), d, 0.5, &mut rng);
    let s_d = 1.0 / (d as f64).sqrt();
    let s_4d = 1.0 / ((4 * d) as f64).sqrt();
    let layers = (0..config.layers)
        .map(|_| LayerWeights {
            wq: Matrix::random(d, d, s_d, &mut rng),
            wk: Matrix::random(d, d, s_d, &mut rng),
            wv: Matrix::random(d, d, s_d, &mut rng),
            wo: Matrix::random(d, d, s_d, &mut rng),
            w1: Matrix::random(d, 4 * d, s_d, &mut rng),
            w2: Matrix::random(4 * d, d, s_4d, &mut rng),
        })
        .collect();
    let head = Matrix::random(d, config.vocab_size, s_d, &mut rng);
    Ok(ToyModelState {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        head,
    })
}

/// Lowercases, splits on whitespace and peels `.`/`?`/`,` into their own
/// tokens. Words in [`FIXED_WORDS`] map to their index; everything else is
/// hashed (FNV-1a) into the remaining ids.
pub fn tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    assert!(vocab_size >= MIN_VOCAB);
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let trimmed = lower.trim_end_matches(['.', '?', ',']);
        if !trimmed.is_empty() {
            words.push(trimmed.to_string());
        }
        for ch in lower[trimmed.len()..].chars() {
            if ch != ',' {
                words.push(ch.to_string());
            }
        }
    }
    let free = (vocab_size - FIXED_WORDS.len()) as u64;
    words
        .iter()
        .map(|w| match FIXED_WORDS.iter().position(|f| f == w) {
            Some(i) => i as u32,
            None => (FIXED_WORDS.len() as u64 + fnv1a(w.as_bytes()) % free) as u32,
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn reference_tokens(vocab_size: usize) -> Vec<u32> {
    tokenize(REFERENCE_PROMPT, vocab_size)
}

/// Result of one prefill pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layout: TokenLayout,
    pub layers: usize,
    pub heads: usize,
    /// Logits at the last text position.
    pub logits: Vec<f64>,
    /// Attention of the last text token over all keys, `[layer, head, key]`.
    pub last_token_attention: Vec<f64>,
    /// L2 norm of the last position's residual stream after each layer.
    pub hidden_norms: Vec<f64>,
    /// Every attention row, `[layer, head, query, key]`, when requested.
    pub full_attention: Option<Vec<f64>>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.layout.len()
    }

    pub fn last_row(&self, layer: usize, head: usize) -> &[f64] {
        let s = self.seq_len();
        let start = (layer * self.heads + head) * s;
        &self.last_token_attention[start..start + s]
    }

    /// Attention row of `query`; requires a full capture.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> Option<&[f64]> {
        let s = self.seq_len();
        let full = self.full_attention.as_ref()?;
        let start = ((layer * self.heads + head) * s + query) * s;
        Some(&full[start..start + s])
    }

    /// The visual-key slice of the captured rows, not renormalized.
    pub fn visual_stack(&self, source_kind: SourceKind) -> AttentionStack {
        let visual = self.layout.visual_span.clone();
        let n = (visual.len() as f64).sqrt().round() as usize;
        let mut values = Vec::with_capacity(self.layers * self.heads * visual.len());
        for l in 0..self.layers {
            for h in 0..self.heads {
                values.extend(self.last_row(l, h)[visual.clone()].iter().map(|&v| v as f32));
            }
        }
        AttentionStack::new(self.layers, self.heads, n, values, source_kind)
            .expect("softmax rows are finite and non-negative")
    }
}

fn layer_norm(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

fn layer_norm_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&layer_norm(x.row(r)));
    }
    out
}

/// Softmax over finite entries; `-inf` entries get weight 0.
fn softmax_in_place(scores: &mut [f64]) {
    let max = scores
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = if s.is_finite() { (*s - max).exp() } else { 0.0 };
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Inputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardInput<'a> {
    /// `N^2 x d` visual features.
    pub visual: &'a Matrix,
    pub question: &'a [u32],
    /// Tokens appended after the question; empty for a plain prefill.
    pub generated: &'a [u32],
}

impl ToyModelState {
    fn check_input(&self, input: &ForwardInput<'_>) -> Result<TokenLayout, ToyError> {
        let cfg = &self.config;
        if input.question.is_empty() {
            return Err(ToyError::EmptyText);
        }
        let text_len = input.question.len() + input.generated.len();
        if text_len > cfg.max_text_len {
            return Err(ToyError::TextTooLong {
                len: text_len,
                max: cfg.max_text_len,
            });
        }
        if let Some(&id) = input
            .question
            .iter()
            .chain(input.generated)
            .find(|&&id| id as usize >= cfg.vocab_size)
        {
            return Err(ToyError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
        if input.visual.rows != cfg.visual_tokens() || input.visual.cols != cfg.model_dim {
            return Err(ToyError::VisualShape {
                rows: input.visual.rows,
                cols: input.visual.cols,
                exp_rows: cfg.visual_tokens(),
                exp_cols: cfg.model_dim,
            });
        }
        Ok(TokenLayout::new(
            cfg.visual_tokens(),
            input.question.len(),
            input.generated.len(),
        ))
    }

    /// Prefill over `[visual || question]`, optionally with knockout.
    pub fn forward(
        &self,
        visual: &Matrix,
        question: &[u32],
        knockout: Option<&RefinePlan>,
    ) -> Result<ForwardTrace, ToyError> {
        self.forward_with(
            &ForwardInput {
                visual,
                question,
                generated: &[],
            },
            knockout,
            false,
        )
    }

    pub fn forward_with(
        &self,
        input: &ForwardInput<'_>,
        knockout: Option<&RefinePlan>,
        capture_full: bool,
    ) -> Result<ForwardTrace, ToyError> {
        let layout = self.check_input(input)?;
        let cfg = &self.config;
        if let Some(plan) = knockout {
            if let Some(&layer) = plan.layers.iter().find(|&&l| l >= cfg.layers) {
                return Err(ToyError::KnockoutLayer {
                    layer,
                    layers: cfg.layers,
                });
            }
            if plan.mask.n() != cfg.grid_n {
                return Err(TriageError::LayoutMismatch(format!(
                    "mask grid {} vs model grid {}",
                    plan.mask.n(),
                    cfg.grid_n
                ))
                .into());
            }
        }
        let (d, heads, dh) = (cfg.model_dim, cfg.heads, cfg.head_dim());
        let seq = layout.len();
        let last = layout.last_text_index();

        let mut x = Matrix::zeros(seq, d);
        for t in 0..seq {
            let src = if t < layout.visual_span.end {
                input.visual.row(t)
            } else {
                let text_pos = t - layout.visual_span.end;
                let id = if text_pos < input.question.len() {
                    input.question[text_pos]
                } else {
                    input.generated[text_pos - input.question.len()]
                };
                self.token_embedding.row(id as usize)
            };
            for ((o, a), p) in x.row_mut(t).iter_mut().zip(src).zip(self.position_embedding.row(t)) {
                *o = a + p;
            }
        }

        let mut last_token_attention = Vec::with_capacity(cfg.layers * heads * seq);
        let mut full = capture_full.then(|| Vec::with_capacity(cfg.layers * heads * seq * seq));
        let mut hidden_norms = Vec::with_capacity(cfg.layers);
        let scale = 1.0 / (dh as f64).sqrt();

        for (l, w) in self.layers.iter().enumerate() {
            let h = layer_norm_rows(&x);
            let q = h.matmul(&w.wq);
            let k = h.matmul(&w.wk);
            let v = h.matmul(&w.wv);
            let plan = knockout.filter(|p| p.applies_at(l));
            let mut mixed = Matrix::zeros(seq, d);
            for hh in 0..heads {
                let cols = hh * dh..(hh + 1) * dh;
                for i in 0..seq {
                    let qi = &q.row(i)[cols.clone()];
                    let mut row: Vec<f64> = (0..seq)
                        .map(|j| {
                            if j > i {
                                f64::NEG_INFINITY
                            } else {
                                qi.iter().zip(&k.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * scale
                            }
                        })
                        .collect();
                    let targeted = plan.filter(|p| layout.in_scope(i, p.scope));
                    if let Some(p) = targeted.filter(|p| p.mask_mode == MaskMode::PreSoftmax) {
                        mask_scores_in_place(&mut row, &p.mask, &layout)?;
                    }
                    softmax_in_place(&mut row);
                    if let Some(p) = targeted.filter(|p| p.mask_mode == MaskMode::PostSoftmax) {
                        apply_knockout_in_place(&mut row, &p.mask, &layout)?;
                    }
                    let out = &mut mixed.row_mut(i)[cols.clone()];
                    for (j, &a) in row.iter().enumerate().take(i + 1) {
                        if a == 0.0 {
                            continue;
                        }
                        for (o, vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                            *o += a * vv;
                        }
                    }
                    if i == last {
                        last_token_attention.extend_from_slice(&row);
                    }
                    if let Some(f) = full.as_mut() {
                        f.extend_from_slice(&row);
                    }
                }
            }
            let attn = mixed.matmul(&w.wo);
            for (xo, a) in x.data.iter_mut().zip(&attn.data) {
                *xo += a;
            }
            let h2 = layer_norm_rows(&x);
            let mut hidden = h2.matmul(&w.w1);
            hidden.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let mlp = hidden.matmul(&w.w2);
            for (xo, m) in x.data.iter_mut().zip(&mlp.data) {
                *xo += m;
            }
            hidden_norms.push(x.row(last).iter().map(|v| v * v).sum::<f64>().sqrt());
        }

        let final_h = layer_norm(x.row(last));
        let logits = (0..cfg.vocab_size)
            .map(|c| final_h.iter().enumerate().map(|(r, hv)| hv * self.head.get(r, c)).sum())
            .collect();

        Ok(ForwardTrace {
            layout,
            layers: cfg.layers,
            heads,
            logits,
            last_token_attention,
            hidden_norms,
            full_attention: full,
        })
    }

    /// Runs the question and the reference prompt on the same visual input
    /// and returns their last-token visual attention stacks.
    pub fn export_dumps(
        &self,
        visual: &Matrix,
        question: &[u32],
        reference: &[u32],
    ) -> Result<ExportedDumps, ToyError> {
        if question.is_empty() || reference.is_empty() {
            return Err(ToyError::EmptyText);
        }
        let q = self.forward(visual, question, None)?;
        let r = self.forward(visual, reference, None)?;
        Ok(ExportedDumps {
            question: q.visual_stack(SourceKind::Question),
            reference: r.visual_stack(SourceKind::Reference),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportedDumps {
    pub question: AttentionStack,
    pub reference: AttentionStack,
}

impl ExportedDumps {
    /// `(q.vgat, ref.vgat)` bytes.
    pub fn encode(&self) -> (Vec<u8>, Vec<u8>) {
        (encode_dump(&self.question), encode_dump(&self.reference))
    }

    /// Writes `<id>.q.vgat` and `<id>.ref.vgat` into `dir`.
    pub fn write_to(&self, dir: &Path, sample_id: &str) -> Result<(), ToyError> {
        let paths = crate::tensor_io::SamplePaths::new(dir, sample_id);
        let (q, r) = self.encode();
        crate::report::write_atomic(&paths.question, &q)?;
        crate::report::write_atomic(&paths.reference, &r)?;
        Ok(())
    }
}
