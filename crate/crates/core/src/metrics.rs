// SPDX-License-Identifier: MIT OR Apache-2.0

//! Grounding metrics between an attention map and a binary region mask on
//! the same `N x N` patch grid.
//!
//! All logarithms are natural, so the JS divergence is bounded by `ln 2`.
//! KL and JS smooth the attention map by adding `eps` to every cell before
//! normalization, which keeps both metrics finite when the map has no mass
//! inside the mask.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor_io::SampleMeta;

pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("degenerate mask: bbox {0:?} overlaps no patch")]
    DegenerateMask([f64; 4]),
    #[error("grid mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Binary region mask over the patch grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    n: usize,
    cells: Vec<bool>,
}

impl PatchMask {
    pub fn new(n: usize, cells: Vec<bool>) -> Result<Self, MetricError> {
        if n == 0 || cells.len() != n * n {
            return Err(MetricError::InvalidParameter(format!(
                "mask needs {} cells for n={n}, got {}",
                n * n,
                cells.len()
            )));
        }
        Ok(Self { n, cells })
    }

    pub fn from_bits(n: usize, bits: &[u8]) -> Result<Self, MetricError> {
        Self::new(n, bits.iter().map(|b| *b != 0).collect())
    }

    pub fn full(n: usize) -> Self {
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

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.n + col]
    }

    /// `||M||_1`.
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    /// `M / ||M||_1`; zero everywhere for an empty mask.
    pub fn normalized(&self) -> Vec<f64> {
        let count = self.count();
        if count == 0 {
            return vec![0.0; self.cells.len()];
        }
        let w = 1.0 / count as f64;
        self.cells.iter().map(|&c| if c { w } else { 0.0 }).collect()
    }
}

/// Non-negative attention mass over the patch grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    n: usize,
    cells: Vec<f64>,
}

impl AttentionMap {
    pub fn new(n: usize, cells: Vec<f64>) -> Result<Self, MetricError> {
        if n == 0 || cells.len() != n * n {
            return Err(MetricError::InvalidParameter(format!(
                "map needs {} cells for n={n}, got {}",
                n * n,
                cells.len()
            )));
        }
        if let Some(v) = cells.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(MetricError::InvalidParameter(format!(
                "map cell {v} is negative or non-finite"
            )));
        }
        Ok(Self { n, cells })
    }

    pub fn uniform(n: usize, value: f64) -> Self {
        Self::new(n, vec![value; n * n]).expect("valid uniform map")
    }

    pub fn from_f32(n: usize, cells: &[f32]) -> Result<Self, MetricError> {
        Self::new(n, cells.iter().map(|&v| v as f64).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.n + col]
    }

    /// `||A||_1`.
    pub fn mass(&self) -> f64 {
        self.cells.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.n, self.cells.iter().map(|v| v * factor).collect())
            .expect("positive rescale keeps the map valid")
    }

    /// Unit-mass copy; errors on zero mass.
    pub fn normalized(&self) -> Result<Self, MetricError> {
        let mass = self.mass();
        if mass <= 0.0 {
            return Err(MetricError::DegenerateInput("attention map has zero mass".into()));
        }
        Ok(Self {
            n: self.n,
            cells: self.cells.iter().map(|v| v / mass).collect(),
        })
    }
}

/// AR, KL and JS for one map/mask pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundingScores {
    pub ar: f64,
    pub kl: f64,
    pub js: f64,
    pub epsilon_used: f64,
}

impl GroundingScores {
    /// Arithmetic mean of a non-empty sequence, summed in iteration order.
    pub fn mean<'a>(scores: impl IntoIterator<Item = &'a GroundingScores>) -> Option<Self> {
        let mut acc = [0.0f64; 3];
        let mut count = 0usize;
        let mut eps = 0.0;
        for s in scores {
            acc[0] += s.ar;
            acc[1] += s.kl;
            acc[2] += s.js;
            eps = s.epsilon_used;
            count += 1;
        }
        (count > 0).then(|| {
            let c = count as f64;
            GroundingScores {
                ar: acc[0] / c,
                kl: acc[1] / c,
                js: acc[2] / c,
                epsilon_used: eps,
            }
        })
    }
}

/// Marks every patch whose pixel rectangle overlaps the bbox with positive
/// area. Patch `(i, j)` covers `[j*W/N, (j+1)*W/N) x [i*H/N, (i+1)*H/N)`.
pub fn rasterize_bbox(meta: &SampleMeta) -> Result<PatchMask, MetricError> {
    let n = meta.grid_n as usize;
    if n == 0 {
        return Err(MetricError::InvalidParameter("grid_n must be >= 1".into()));
    }
    let [x0, y0, x1, y1] = meta.bbox;
    let (w, h) = (meta.image_width as f64, meta.image_height as f64);
    let nf = n as f64;
    // Overlap along an axis: lo < (k+1)*S/N and hi > k*S/N, compared after
    // multiplying through by N so integer inputs stay exact.
    let overlaps = |k: usize, lo: f64, hi: f64, side: f64| {
        let k = k as f64;
        lo * nf < (k + 1.0) * side && hi * nf > k * side
    };
    let cols: Vec<bool> = (0..n).map(|j| overlaps(j, x0, x1, w)).collect();
    let rows: Vec<bool> = (0..n).map(|i| overlaps(i, y0, y1, h)).collect();
    let cells: Vec<bool> = (0..n * n).map(|idx| rows[idx / n] && cols[idx % n]).collect();
    if !cells.iter().any(|c| *c) {
        return Err(MetricError::DegenerateMask(meta.bbox));
    }
    PatchMask::new(n, cells)
}

fn check_pair(a: &AttentionMap, m: &PatchMask) -> Result<(), MetricError> {
    if a.n != m.n {
        return Err(MetricError::ShapeMismatch(a.n, m.n));
    }
    if a.mass() <= 0.0 {
        return Err(MetricError::DegenerateInput("attention map has zero mass".into()));
    }
    if m.count() == 0 {
        return Err(MetricError::DegenerateInput("mask has no active cell".into()));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<(), MetricError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(MetricError::InvalidParameter(format!("eps must be > 0, got {eps}")));
    }
    Ok(())
}

/// `sum(A * M) / ((||A||_1 / N^2) * ||M||_1)`.
pub fn attention_ratio(a: &AttentionMap, m: &PatchMask) -> Result<f64, MetricError> {
    check_pair(a, m)?;
    let inside: f64 = a.cells.iter().zip(&m.cells).filter(|(_, &on)| on).map(|(v, _)| v).sum();
    let mean = a.mass() / a.cells.len() as f64;
    Ok(inside / (mean * m.count() as f64))
}

/// `(A + eps) / ||A + eps||_1`.
pub fn smoothed_distribution(a: &AttentionMap, eps: f64) -> Vec<f64> {
    let total: f64 = a.cells.iter().map(|v| v + eps).sum();
    a.cells.iter().map(|v| (v + eps) / total).collect()
}

/// `D_KL(p || q)` over two distributions; terms with `p = 0` contribute 0.
pub fn kl_between(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi / qi).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Jensen-Shannon divergence between two distributions.
pub fn js_between(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let r = 0.5 * (pi + qi);
        if pi > 0.0 {
            total += 0.5 * pi * (pi / r).ln();
        }
        if qi > 0.0 {
            total += 0.5 * qi * (qi / r).ln();
        }
    }
    total.clamp(0.0, std::f64::consts::LN_2)
}

/// `D_KL(M_hat || A_hat)` with `A_hat` eps-smoothed.
pub fn kl_divergence(m: &PatchMask, a: &AttentionMap, eps: f64) -> Result<f64, MetricError> {
    check_eps(eps)?;
    check_pair(a, m)?;
    Ok(kl_between(&m.normalized(), &smoothed_distribution(a, eps)))
}

/// `D_JS(M_hat || A_hat)` with `A_hat` eps-smoothed.
pub fn js_divergence(m: &PatchMask, a: &AttentionMap, eps: f64) -> Result<f64, MetricError> {
    check_eps(eps)?;
    check_pair(a, m)?;
    Ok(js_between(&m.normalized(), &smoothed_distribution(a, eps)))
}

pub fn score(a: &AttentionMap, m: &PatchMask, eps: f64) -> Result<GroundingScores, MetricError> {
    Ok(GroundingScores {
        ar: attention_ratio(a, m)?,
        kl: kl_divergence(m, a, eps)?,
        js: js_divergence(m, a, eps)?,
        epsilon_used: eps,
    })
}
