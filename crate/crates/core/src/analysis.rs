// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer and per-head grounding sweeps over a set of samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{score, AttentionMap, GroundingScores, MetricError, PatchMask};
use crate::par::{try_map_ordered, ExecMode};
use crate::tensor_io::AttentionStack;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("layer {layer} out of range (stack has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("head {head} out of range (stack has {heads} heads)")]
    HeadOutOfRange { head: usize, heads: usize },
    #[error("shape mismatch in sample {sample_id}: {detail}")]
    Shape { sample_id: String, detail: String },
    #[error("empty sample set")]
    EmptySet,
    #[error("sample {sample_id}: {source}")]
    Metric {
        sample_id: String,
        #[source]
        source: MetricError,
    },
    #[error(transparent)]
    Degenerate(#[from] MetricError),
}

/// Head-averaged attention map of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMap {
    pub layer_index: usize,
    pub map: AttentionMap,
}

/// Attention map of a single `(layer, head)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCell {
    pub layer_index: usize,
    pub head_index: usize,
    pub map: AttentionMap,
}

/// Averages the heads of `layer` and reshapes to the patch grid.
pub fn layer_average(stack: &AttentionStack, layer: usize) -> Result<LayerMap, AnalysisError> {
    let (layers, heads, n) = stack.dims();
    if layer >= layers {
        return Err(AnalysisError::LayerOutOfRange { layer, layers });
    }
    let mut cells = vec![0.0f64; n * n];
    for h in 0..heads {
        for (acc, v) in cells.iter_mut().zip(stack.head_row(layer, h)) {
            *acc += *v as f64;
        }
    }
    let inv = 1.0 / heads as f64;
    cells.iter_mut().for_each(|c| *c *= inv);
    Ok(LayerMap {
        layer_index: layer,
        map: AttentionMap::new(n, cells)?,
    })
}

pub fn head_map(stack: &AttentionStack, layer: usize, head: usize) -> Result<HeadCell, AnalysisError> {
    let (layers, heads, n) = stack.dims();
    if layer >= layers {
        return Err(AnalysisError::LayerOutOfRange { layer, layers });
    }
    if head >= heads {
        return Err(AnalysisError::HeadOutOfRange { head, heads });
    }
    Ok(HeadCell {
        layer_index: layer,
        head_index: head,
        map: AttentionMap::from_f32(n, stack.head_row(layer, head))?,
    })
}

/// How a question map is normalized against the generic-prompt map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefNormMode {
    /// `q_hat / (ref_hat + eps)`, renormalized.
    #[default]
    Ratio,
    /// `max(q_hat - ref_hat, 0)`, renormalized.
    Subtract,
}

/// Ratio normalization against a reference map; see
/// [`normalize_by_reference_with`].
pub fn normalize_by_reference(
    q: &AttentionMap,
    reference: &AttentionMap,
    eps: f64,
) -> Result<AttentionMap, AnalysisError> {
    normalize_by_reference_with(q, reference, eps, RefNormMode::Ratio)
}

/// Both maps are first brought to unit mass (a zero-mass reference counts as
/// all zeros), then combined cell-wise and rescaled to unit mass.
pub fn normalize_by_reference_with(
    q: &AttentionMap,
    reference: &AttentionMap,
    eps: f64,
    mode: RefNormMode,
) -> Result<AttentionMap, AnalysisError> {
    if q.n() != reference.n() {
        return Err(MetricError::ShapeMismatch(q.n(), reference.n()).into());
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(MetricError::InvalidParameter(format!("eps must be > 0, got {eps}")).into());
    }
    let q_hat = q.normalized()?;
    let ref_mass = reference.mass();
    let ref_hat: Vec<f64> = if ref_mass > 0.0 {
        reference.cells().iter().map(|v| v / ref_mass).collect()
    } else {
        vec![0.0; reference.cells().len()]
    };
    let combined: Vec<f64> = q_hat
        .cells()
        .iter()
        .zip(&ref_hat)
        .map(|(qv, rv)| match mode {
            RefNormMode::Ratio => qv / (rv + eps),
            RefNormMode::Subtract => (qv - rv).max(0.0),
        })
        .collect();
    Ok(AttentionMap::new(q.n(), combined)?.normalized()?)
}

/// One sample of paired question/reference dumps and its region mask.
#[derive(Debug, Clone)]
pub struct AnalysisSample {
    pub sample_id: String,
    pub question: AttentionStack,
    pub reference: AttentionStack,
    pub mask: PatchMask,
}

impl AnalysisSample {
    fn dims(&self) -> (usize, usize, usize) {
        self.question.dims()
    }

    /// The map scored for `(layer, head)`, or for the layer average when
    /// `head` is `None`.
    pub fn map_for(
        &self,
        layer: usize,
        head: Option<usize>,
        normalize: Option<(f64, RefNormMode)>,
    ) -> Result<AttentionMap, AnalysisError> {
        let pick = |stack: &AttentionStack| -> Result<AttentionMap, AnalysisError> {
            Ok(match head {
                Some(h) => head_map(stack, layer, h)?.map,
                None => layer_average(stack, layer)?.map,
            })
        };
        let q = pick(&self.question)?;
        match normalize {
            Some((eps, mode)) => normalize_by_reference_with(&q, &pick(&self.reference)?, eps, mode),
            None => Ok(q),
        }
    }
}

/// Checks that every sample shares the first sample's `(L, H, N)` and that
/// masks and reference dumps agree with it.
pub fn check_shapes(samples: &[AnalysisSample]) -> Result<(usize, usize, usize), AnalysisError> {
    let first = samples.first().ok_or(AnalysisError::EmptySet)?;
    let dims = first.dims();
    for s in samples {
        let shape_err = |detail: String| AnalysisError::Shape {
            sample_id: s.sample_id.clone(),
            detail,
        };
        if s.question.dims() != dims {
            return Err(shape_err(format!(
                "question dump (L,H,N)={:?}, expected {dims:?}",
                s.question.dims()
            )));
        }
        if s.reference.dims() != dims {
            return Err(shape_err(format!(
                "reference dump (L,H,N)={:?}, expected {dims:?}",
                s.reference.dims()
            )));
        }
        if s.mask.n() != dims.2 {
            return Err(shape_err(format!("mask n={}, expected {}", s.mask.n(), dims.2)));
        }
    }
    Ok(dims)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub eps: f64,
    pub normalize: bool,
    pub per_head: bool,
    #[serde(default)]
    pub ref_mode: RefNormMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            eps: crate::metrics::DEFAULT_EPS,
            normalize: true,
            per_head: false,
            ref_mode: RefNormMode::Ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: usize,
    pub scores: GroundingScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScores {
    pub layer: usize,
    pub head: usize,
    pub scores: GroundingScores,
}

/// Un-aggregated per-layer scores of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLayerScores {
    pub sample_id: String,
    pub per_layer: Vec<GroundingScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub per_layer: Vec<LayerScores>,
    pub per_head: Option<Vec<HeadScores>>,
    pub sample_count: usize,
    pub aggregation: Aggregation,
    pub per_sample: Vec<SampleLayerScores>,
}

struct SampleSweep {
    per_layer: Vec<GroundingScores>,
    per_head: Vec<GroundingScores>,
}

fn sweep_one(s: &AnalysisSample, cfg: &SweepConfig, layers: usize, heads: usize) -> Result<SampleSweep, AnalysisError> {
    let normalize = cfg.normalize.then_some((cfg.eps, cfg.ref_mode));
    let with_id = |e: AnalysisError| match e {
        AnalysisError::Degenerate(source) => AnalysisError::Metric {
            sample_id: s.sample_id.clone(),
            source,
        },
        other => other,
    };
    let score_map = |layer: usize, head: Option<usize>| -> Result<GroundingScores, AnalysisError> {
        let map = s.map_for(layer, head, normalize)?;
        Ok(score(&map, &s.mask, cfg.eps)?)
    };
    let per_layer = (0..layers)
        .map(|l| score_map(l, None))
        .collect::<Result<Vec<_>, _>>()
        .map_err(with_id)?;
    let per_head = if cfg.per_head {
        (0..layers * heads)
            .map(|i| score_map(i / heads, Some(i % heads)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(with_id)?
    } else {
        Vec::new()
    };
    Ok(SampleSweep { per_layer, per_head })
}

pub fn sweep(samples: &[AnalysisSample], cfg: &SweepConfig) -> Result<SweepResult, AnalysisError> {
    sweep_with(samples, cfg, ExecMode::default())
}

/// Scores every sample (possibly in parallel), then averages in sample order.
pub fn sweep_with(samples: &[AnalysisSample], cfg: &SweepConfig, mode: ExecMode) -> Result<SweepResult, AnalysisError> {
    let (layers, heads, _) = check_shapes(samples)?;
    let results = try_map_ordered(samples, mode, |s| sweep_one(s, cfg, layers, heads))?;

    let per_layer = (0..layers)
        .map(|l| LayerScores {
            layer: l,
            scores: GroundingScores::mean(results.iter().map(|r| &r.per_layer[l])).expect("non-empty sample set"),
        })
        .collect();
    let per_head = cfg.per_head.then(|| {
        (0..layers * heads)
            .map(|i| HeadScores {
                layer: i / heads,
                head: i % heads,
                scores: GroundingScores::mean(results.iter().map(|r| &r.per_head[i])).expect("non-empty sample set"),
            })
            .collect()
    });
    let per_sample = samples
        .iter()
        .zip(results)
        .map(|(s, r)| SampleLayerScores {
            sample_id: s.sample_id.clone(),
            per_layer: r.per_layer,
        })
        .collect();
    Ok(SweepResult {
        per_layer,
        per_head,
        sample_count: samples.len(),
        aggregation: Aggregation::Mean,
        per_sample,
    })
}

/// Layer with the lowest mean KL; ties go to the smaller index.
pub fn best_layer(result: &SweepResult) -> Option<usize> {
    best_layer_by_kl(result.per_layer.iter().map(|l| l.scores.kl))
}

pub fn best_layer_by_kl(kls: impl IntoIterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, kl) in kls.into_iter().enumerate() {
        match best {
            Some((_, b)) if kl.total_cmp(&b).is_ge() => {}
            _ => best = Some((i, kl)),
        }
    }
    best.map(|(i, _)| i)
}
