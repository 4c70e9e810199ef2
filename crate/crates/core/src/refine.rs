// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention triage and attention knockout.
//!
//! Triage ranks every `(layer, head)` by its mean KL divergence to the
//! region masks of a calibration set, averages the reference-normalized maps
//! of the top `k` heads for a sample, drops cells at or below the `p`-th
//! percentile and binarizes the rest into a [`KnockoutMask`].
//!
//! Knockout multiplies the attention weights from question-token queries to
//! visual-token keys by that mask at the configured layers.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{check_shapes, head_map, normalize_by_reference, AnalysisError, AnalysisSample};
use crate::metrics::{kl_divergence, AttentionMap, MetricError, DEFAULT_EPS};
use crate::par::{try_map_ordered, ExecMode};
use crate::tensor_io::AttentionStack;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_P: f64 = 50.0;
pub const DEFAULT_KNOCKOUT_LAYER: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum TriageError {
    #[error("k={k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },
    #[error("percentile {0} outside (0, 100)")]
    PercentileOutOfRange(f64),
    #[error("knockout layer {layer} out of range (model has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("every cell was suppressed at p={p}")]
    AllSuppressed { p: f64 },
    #[error("knockout mask has no active cell")]
    EmptyMask,
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("malformed mask encoding: {0}")]
    MalformedMask(String),
    #[error("ranking is for (L,H)=({rl},{rh}) but stack has ({sl},{sh})")]
    RankingMismatch { rl: usize, rh: usize, sl: usize, sh: usize },
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl From<MetricError> for TriageError {
    fn from(e: MetricError) -> Self {
        TriageError::Analysis(AnalysisError::Degenerate(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedHead {
    pub layer: usize,
    pub head: usize,
    pub mean_kl: f64,
}

/// All `(layer, head)` cells sorted by ascending mean KL, ties in
/// `(layer, head)` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRanking {
    pub layers: usize,
    pub heads: usize,
    pub calibration_size: usize,
    pub entries: Vec<RankedHead>,
}

impl HeadRanking {
    pub fn top(&self, k: usize) -> &[RankedHead] {
        &self.entries[..k.min(self.entries.len())]
    }

    /// Checks sortedness, uniqueness and completeness.
    pub fn validate(&self) -> Result<(), String> {
        if self.entries.len() != self.layers * self.heads {
            return Err(format!(
                "ranking has {} entries, expected {}",
                self.entries.len(),
                self.layers * self.heads
            ));
        }
        let mut seen = vec![false; self.entries.len()];
        for e in &self.entries {
            if e.layer >= self.layers || e.head >= self.heads {
                return Err(format!("entry ({}, {}) out of range", e.layer, e.head));
            }
            let idx = e.layer * self.heads + e.head;
            if std::mem::replace(&mut seen[idx], true) {
                return Err(format!("duplicate entry ({}, {})", e.layer, e.head));
            }
        }
        if self.entries.windows(2).any(|w| w[0].mean_kl > w[1].mean_kl) {
            return Err("entries are not sorted by mean_kl".into());
        }
        Ok(())
    }
}

fn head_kls(s: &AnalysisSample, eps: f64, layers: usize, heads: usize) -> Result<Vec<f64>, TriageError> {
    let named = |e: AnalysisError| match e {
        AnalysisError::Degenerate(source) => AnalysisError::Metric {
            sample_id: s.sample_id.clone(),
            source,
        },
        other => other,
    };
    let mut out = Vec::with_capacity(layers * heads);
    for l in 0..layers {
        for h in 0..heads {
            let map = normalized_head(&s.question, &s.reference, l, h, eps).map_err(named)?;
            let kl = kl_divergence(&s.mask, &map, eps).map_err(|e| named(AnalysisError::Degenerate(e)))?;
            out.push(kl);
        }
    }
    Ok(out)
}

fn normalized_head(
    q: &AttentionStack,
    reference: &AttentionStack,
    layer: usize,
    head: usize,
    eps: f64,
) -> Result<AttentionMap, AnalysisError> {
    normalize_by_reference(
        &head_map(q, layer, head)?.map,
        &head_map(reference, layer, head)?.map,
        eps,
    )
}

pub fn rank_heads(calibration: &[AnalysisSample], eps: f64) -> Result<HeadRanking, TriageError> {
    rank_heads_with(calibration, eps, ExecMode::default())
}

/// Mean KL per head over the calibration set, pooled over all layers.
pub fn rank_heads_with(calibration: &[AnalysisSample], eps: f64, mode: ExecMode) -> Result<HeadRanking, TriageError> {
    let (layers, heads, _) = check_shapes(calibration)?;
    let per_sample = try_map_ordered(calibration, mode, |s| head_kls(s, eps, layers, heads))?;
    let mut sums = vec![0.0f64; layers * heads];
    for kls in &per_sample {
        for (acc, kl) in sums.iter_mut().zip(kls) {
            *acc += kl;
        }
    }
    let count = calibration.len() as f64;
    let mut entries: Vec<RankedHead> = sums
        .iter()
        .enumerate()
        .map(|(i, sum)| RankedHead {
            layer: i / heads,
            head: i % heads,
            mean_kl: sum / count,
        })
        .collect();
    // stable: equal KLs keep (layer, head) order
    entries.sort_by(|a, b| a.mean_kl.total_cmp(&b.mean_kl));
    Ok(HeadRanking {
        layers,
        heads,
        calibration_size: calibration.len(),
        entries,
    })
}

/// Mean of the reference-normalized maps of the `k` best-ranked heads.
pub fn aggregate_topk(
    ranking: &HeadRanking,
    q: &AttentionStack,
    reference: &AttentionStack,
    k: usize,
    eps: f64,
) -> Result<AttentionMap, TriageError> {
    let max = ranking.entries.len();
    if k == 0 || k > max {
        return Err(TriageError::KOutOfRange { k, max });
    }
    if (q.layers(), q.heads()) != (ranking.layers, ranking.heads) {
        return Err(TriageError::RankingMismatch {
            rl: ranking.layers,
            rh: ranking.heads,
            sl: q.layers(),
            sh: q.heads(),
        });
    }
    let n = q.grid_n();
    let mut acc = vec![0.0f64; n * n];
    for e in ranking.top(k) {
        let map = normalized_head(q, reference, e.layer, e.head, eps)?;
        for (a, v) in acc.iter_mut().zip(map.cells()) {
            *a += v;
        }
    }
    let inv = 1.0 / k as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(AttentionMap::new(n, acc)?)
}

/// Binary mask over visual tokens; 1 keeps attention, 0 knocks it out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KnockoutMaskRepr", into = "KnockoutMaskRepr")]
pub struct KnockoutMask {
    n: usize,
    cells: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct KnockoutMaskRepr {
    n: usize,
    cells: Vec<u8>,
    kept_fraction: f64,
}

impl From<KnockoutMask> for KnockoutMaskRepr {
    fn from(m: KnockoutMask) -> Self {
        KnockoutMaskRepr {
            n: m.n,
            kept_fraction: m.kept_fraction(),
            cells: m.cells.iter().map(|&c| c as u8).collect(),
        }
    }
}

impl TryFrom<KnockoutMaskRepr> for KnockoutMask {
    type Error = TriageError;

    fn try_from(r: KnockoutMaskRepr) -> Result<Self, Self::Error> {
        if r.cells.iter().any(|c| *c > 1) {
            return Err(TriageError::MalformedMask("cells must be 0 or 1".into()));
        }
        KnockoutMask::new(r.n, r.cells.iter().map(|&c| c == 1).collect())
    }
}

impl KnockoutMask {
    pub fn new(n: usize, cells: Vec<bool>) -> Result<Self, TriageError> {
        if n == 0 || cells.len() != n * n {
            return Err(TriageError::MalformedMask(format!(
                "expected {} cells for n={n}, got {}",
                n * n,
                cells.len()
            )));
        }
        if !cells.iter().any(|c| *c) {
            return Err(TriageError::EmptyMask);
        }
        Ok(Self { n, cells })
    }

    pub fn all_ones(n: usize) -> Self {
        Self {
            n,
            cells: vec![true; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn kept(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept() as f64 / self.cells.len() as f64
    }

    /// Run-length form `n:v*count,v*count,...` in row-major order, e.g.
    /// `2:0*2,1*2` for `[[0,0],[1,1]]`.
    pub fn to_rle(&self) -> String {
        let mut runs: Vec<(bool, usize)> = Vec::new();
        for &c in &self.cells {
            match runs.last_mut() {
                Some((v, count)) if *v == c => *count += 1,
                _ => runs.push((c, 1)),
            }
        }
        let body: Vec<String> = runs.iter().map(|(v, count)| format!("{}*{count}", *v as u8)).collect();
        format!("{}:{}", self.n, body.join(","))
    }

    pub fn from_rle(s: &str) -> Result<Self, TriageError> {
        let bad = |why: &str| TriageError::MalformedMask(format!("{why} in {s:?}"));
        let (n, body) = s.split_once(':').ok_or_else(|| bad("missing ':'"))?;
        let n: usize = n.trim().parse().map_err(|_| bad("bad grid size"))?;
        let mut cells = Vec::new();
        for run in body.split(',').filter(|r| !r.is_empty()) {
            let (v, count) = run.split_once('*').ok_or_else(|| bad("missing '*'"))?;
            let v = match v {
                "0" => false,
                "1" => true,
                _ => return Err(bad("run value must be 0 or 1")),
            };
            let count: usize = count.parse().map_err(|_| bad("bad run length"))?;
            if cells.len() + count > n * n {
                return Err(bad("runs exceed grid"));
            }
            cells.extend(std::iter::repeat_n(v, count));
        }
        Self::new(n, cells)
    }
}

impl fmt::Display for KnockoutMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rle())
    }
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p/100 * n)` of
/// the ascending sort.
pub fn nearest_rank_threshold(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p * n as f64) / 100.0).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Zeroes cells at or below the `p`-th percentile and sets the rest to 1.
pub fn suppress_and_binarize(agg: &AttentionMap, p: f64) -> Result<KnockoutMask, TriageError> {
    if !(p > 0.0 && p < 100.0) {
        return Err(TriageError::PercentileOutOfRange(p));
    }
    let t = nearest_rank_threshold(agg.cells(), p);
    let cells: Vec<bool> = agg.cells().iter().map(|&v| v > t).collect();
    match KnockoutMask::new(agg.n(), cells) {
        Err(TriageError::EmptyMask) => Err(TriageError::AllSuppressed { p }),
        other => other,
    }
}

/// Positions of one forward pass: `N^2` visual tokens, then the question,
/// then any generated tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub visual_span: Range<usize>,
    pub question_span: Range<usize>,
    pub generated_span: Range<usize>,
}

impl TokenLayout {
    pub fn new(visual: usize, question: usize, generated: usize) -> Self {
        Self {
            visual_span: 0..visual,
            question_span: visual..visual + question,
            generated_span: visual + question..visual + question + generated,
        }
    }

    pub fn text_span(&self) -> Range<usize> {
        self.question_span.start..self.generated_span.end
    }

    pub fn len(&self) -> usize {
        self.generated_span.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the last text token, where attention is captured.
    pub fn last_text_index(&self) -> usize {
        self.generated_span.end - 1
    }

    /// Whether a query row at `pos` is subject to knockout under `scope`.
    pub fn in_scope(&self, pos: usize, scope: KnockoutScope) -> bool {
        self.question_span.contains(&pos)
            || (scope == KnockoutScope::QuestionAndGenerated && self.generated_span.contains(&pos))
    }

    fn check_mask(&self, mask: &KnockoutMask, row_len: usize) -> Result<(), TriageError> {
        if self.visual_span.len() != mask.cells.len() {
            return Err(TriageError::LayoutMismatch(format!(
                "{} visual tokens but mask has {} cells",
                self.visual_span.len(),
                mask.cells.len()
            )));
        }
        if row_len < self.visual_span.end {
            return Err(TriageError::LayoutMismatch(format!(
                "row of length {row_len} does not cover the visual span {:?}",
                self.visual_span
            )));
        }
        Ok(())
    }
}

/// `alpha_hat = alpha * M` on the visual keys of one attention row. Other
/// keys pass through untouched and the row is not renormalized.
pub fn apply_knockout(attn_row: &[f64], mask: &KnockoutMask, layout: &TokenLayout) -> Result<Vec<f64>, TriageError> {
    let mut out = attn_row.to_vec();
    apply_knockout_in_place(&mut out, mask, layout)?;
    Ok(out)
}

pub fn apply_knockout_in_place(row: &mut [f64], mask: &KnockoutMask, layout: &TokenLayout) -> Result<(), TriageError> {
    layout.check_mask(mask, row.len())?;
    zero_masked(&mut row[layout.visual_span.clone()], &mask.cells);
    Ok(())
}

/// Row-level knockout for an arbitrary visual span and keep-vector.
pub fn knock_out_visual(row: &[f64], visual: Range<usize>, keep: &[bool]) -> Result<Vec<f64>, TriageError> {
    if visual.len() != keep.len() || visual.end > row.len() {
        return Err(TriageError::LayoutMismatch(format!(
            "visual span {visual:?} with {} keep flags on a row of length {}",
            keep.len(),
            row.len()
        )));
    }
    let mut out = row.to_vec();
    zero_masked(&mut out[visual], keep);
    Ok(out)
}

fn zero_masked(visual: &mut [f64], keep: &[bool]) {
    for (w, &k) in visual.iter_mut().zip(keep) {
        if !k {
            *w = 0.0;
        }
    }
}

/// Pre-softmax variant: masked visual scores become `-inf`.
pub fn mask_scores_in_place(scores: &mut [f64], mask: &KnockoutMask, layout: &TokenLayout) -> Result<(), TriageError> {
    layout.check_mask(mask, scores.len())?;
    for (s, &keep) in scores[layout.visual_span.clone()].iter_mut().zip(&mask.cells) {
        if !keep {
            *s = f64::NEG_INFINITY;
        }
    }
    Ok(())
}

/// Where the mask is applied relative to the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Multiply the softmax output; rows are left unnormalized.
    #[default]
    PostSoftmax,
    /// Set masked scores to `-inf`; softmax renormalizes.
    PreSoftmax,
}

/// Which query rows the knockout touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum KnockoutScope {
    #[default]
    QuestionOnly,
    QuestionAndGenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageConfig {
    pub k: usize,
    pub p: f64,
    pub knockout_layers: BTreeSet<usize>,
    pub eps: f64,
    #[serde(default)]
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub scope: KnockoutScope,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            p: DEFAULT_P,
            knockout_layers: BTreeSet::from([DEFAULT_KNOCKOUT_LAYER]),
            eps: DEFAULT_EPS,
            mask_mode: MaskMode::PostSoftmax,
            scope: KnockoutScope::QuestionOnly,
        }
    }
}

impl TriageConfig {
    /// Checks `k` and `p` against a model with `layers * heads` heads.
    pub fn validate_selection(&self, layers: usize, heads: usize) -> Result<(), TriageError> {
        let max = layers * heads;
        if self.k == 0 || self.k > max {
            return Err(TriageError::KOutOfRange { k: self.k, max });
        }
        if !(self.p > 0.0 && self.p < 100.0) {
            return Err(TriageError::PercentileOutOfRange(self.p));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(MetricError::InvalidParameter(format!("eps must be > 0, got {}", self.eps)).into());
        }
        Ok(())
    }

    pub fn validate(&self, layers: usize, heads: usize) -> Result<(), TriageError> {
        self.validate_selection(layers, heads)?;
        if let Some(&layer) = self.knockout_layers.iter().find(|&&l| l >= layers) {
            return Err(TriageError::LayerOutOfRange { layer, layers });
        }
        Ok(())
    }
}

/// Per-sample knockout: the mask and where to apply it. Applies to every
/// head of each listed layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinePlan {
    pub mask: KnockoutMask,
    pub layers: BTreeSet<usize>,
    pub mask_mode: MaskMode,
    pub scope: KnockoutScope,
}

impl RefinePlan {
    pub fn applies_at(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }
}

/// Triage for one sample: top-`k` aggregate, percentile cut, binarize.
pub fn build_refine_plan(
    ranking: &HeadRanking,
    cfg: &TriageConfig,
    q: &AttentionStack,
    reference: &AttentionStack,
) -> Result<RefinePlan, TriageError> {
    cfg.validate(ranking.layers, ranking.heads)?;
    let agg = aggregate_topk(ranking, q, reference, cfg.k, cfg.eps)?;
    let mask = suppress_and_binarize(&agg, cfg.p)?;
    Ok(RefinePlan {
        mask,
        layers: cfg.knockout_layers.clone(),
        mask_mode: cfg.mask_mode,
        scope: cfg.scope,
    })
}
