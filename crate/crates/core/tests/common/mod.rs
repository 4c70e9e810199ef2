// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent oracles and fixture helpers shared by the integration tests.
//! The oracles work on plain nested loops over raw arrays and never call the
//! library's metric or aggregation code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vground::analysis::AnalysisSample;
use vground::dataset::{generate_fixture, FixtureSpec, Plant};
use vground::metrics::{AttentionMap, PatchMask};
use vground::tensor_io::{AttentionStack, SourceKind};
use vground::toy::{Matrix, ToyModelState};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random non-negative `n x n` grid with some exact zeros.
pub fn random_grid(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..n)
                .map(|_| {
                    if rng.random::<f64>() < 0.1 {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        })
        .collect()
}

/// Random binary grid with at least one set cell.
pub fn random_mask_grid(rng: &mut impl Rng, n: usize) -> Vec<Vec<bool>> {
    let mut g: Vec<Vec<bool>> = (0..n)
        .map(|_| (0..n).map(|_| rng.random::<f64>() < 0.3).collect())
        .collect();
    let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
    g[i][j] = true;
    g
}

pub fn to_map(grid: &[Vec<f64>]) -> AttentionMap {
    AttentionMap::new(grid.len(), grid.iter().flatten().copied().collect()).unwrap()
}

pub fn to_mask(grid: &[Vec<bool>]) -> PatchMask {
    PatchMask::new(grid.len(), grid.iter().flatten().copied().collect()).unwrap()
}

pub fn oracle_ar(a: &[Vec<f64>], m: &[Vec<bool>]) -> f64 {
    let n = a.len();
    let (mut inside, mut total, mut count) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            total += a[i][j];
            if m[i][j] {
                inside += a[i][j];
                count += 1.0;
            }
        }
    }
    inside / ((total / (n * n) as f64) * count)
}

fn oracle_dists(a: &[Vec<f64>], m: &[Vec<bool>], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    let mut m_hat = vec![0.0; n * n];
    let mut a_hat = vec![0.0; n * n];
    let mut count = 0.0;
    let mut a_total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if m[i][j] {
                count += 1.0;
            }
            a_total += a[i][j] + eps;
        }
    }
    for i in 0..n {
        for j in 0..n {
            m_hat[i * n + j] = if m[i][j] { 1.0 / count } else { 0.0 };
            a_hat[i * n + j] = (a[i][j] + eps) / a_total;
        }
    }
    (m_hat, a_hat)
}

pub fn oracle_kl(a: &[Vec<f64>], m: &[Vec<bool>], eps: f64) -> f64 {
    let (p, q) = oracle_dists(a, m, eps);
    let mut kl = 0.0;
    for k in 0..p.len() {
        if p[k] > 0.0 {
            kl += p[k] * (p[k].ln() - q[k].ln());
        }
    }
    kl
}

pub fn oracle_js(a: &[Vec<f64>], m: &[Vec<bool>], eps: f64) -> f64 {
    let (p, q) = oracle_dists(a, m, eps);
    let mut js = 0.0;
    for k in 0..p.len() {
        let r = (p[k] + q[k]) / 2.0;
        if p[k] > 0.0 {
            js += 0.5 * p[k] * (p[k].ln() - r.ln());
        }
        if q[k] > 0.0 {
            js += 0.5 * q[k] * (q[k].ln() - r.ln());
        }
    }
    js
}

/// Random stack whose rows are positive and sum to at most 1.
pub fn random_stack(rng: &mut impl Rng, l: usize, h: usize, n: usize, kind: SourceKind) -> AttentionStack {
    let p = n * n;
    let mut values = Vec::with_capacity(l * h * p);
    for _ in 0..l * h {
        let raw: Vec<f64> = (0..p).map(|_| rng.random::<f64>() + 1e-3).collect();
        let total: f64 = raw.iter().sum::<f64>() / rng.random_range(0.3..1.0);
        values.extend(raw.iter().map(|v| (v / total) as f32));
    }
    AttentionStack::new(l, h, n, values, kind).unwrap()
}

pub fn random_sample(rng: &mut impl Rng, id: &str, l: usize, h: usize, n: usize) -> AnalysisSample {
    AnalysisSample {
        sample_id: id.to_string(),
        question: random_stack(rng, l, h, n, SourceKind::Question),
        reference: random_stack(rng, l, h, n, SourceKind::Reference),
        mask: to_mask(&random_mask_grid(rng, n)),
    }
}

/// Head-average of one layer computed straight from the flat payload.
pub fn flat_layer_mean(stack: &AttentionStack, layer: usize) -> Vec<f64> {
    let (_, h, n) = stack.dims();
    let p = n * n;
    let v = stack.values();
    let mut out = vec![0.0; p];
    for head in 0..h {
        for k in 0..p {
            out[k] += v[(layer * h + head) * p + k] as f64;
        }
    }
    for o in &mut out {
        *o /= h as f64;
    }
    out
}

pub fn flat_head(stack: &AttentionStack, layer: usize, head: usize) -> Vec<f64> {
    let (_, h, n) = stack.dims();
    let p = n * n;
    stack.values()[(layer * h + head) * p..(layer * h + head + 1) * p]
        .iter()
        .map(|&v| v as f64)
        .collect()
}

/// Reference normalization on flat vectors: both to unit mass, ratio with
/// eps, then back to unit mass.
pub fn flat_ref_normalize(q: &[f64], r: &[f64], eps: f64) -> Vec<f64> {
    let qs: f64 = q.iter().sum();
    let rs: f64 = r.iter().sum();
    let mut out: Vec<f64> = (0..q.len()).map(|k| (q[k] / qs) / (r[k] / rs + eps)).collect();
    let s: f64 = out.iter().sum();
    for o in &mut out {
        *o /= s;
    }
    out
}

fn grid_of(flat: &[f64], n: usize) -> Vec<Vec<f64>> {
    flat.chunks(n).map(<[f64]>::to_vec).collect()
}

fn mask_grid(mask: &PatchMask) -> Vec<Vec<bool>> {
    mask.cells().chunks(mask.n()).map(<[bool]>::to_vec).collect()
}

/// Flat per-layer `(ar, kl, js)` means over the samples.
pub fn flat_sweep(samples: &[AnalysisSample], eps: f64, normalize: bool) -> Vec<[f64; 3]> {
    let (l, _, n) = samples[0].question.dims();
    (0..l)
        .map(|layer| {
            let mut acc = [0.0; 3];
            for s in samples {
                let mut a = flat_layer_mean(&s.question, layer);
                if normalize {
                    a = flat_ref_normalize(&a, &flat_layer_mean(&s.reference, layer), eps);
                }
                let (g, m) = (grid_of(&a, n), mask_grid(&s.mask));
                acc[0] += oracle_ar(&g, &m);
                acc[1] += oracle_kl(&g, &m, eps);
                acc[2] += oracle_js(&g, &m, eps);
            }
            acc.map(|v| v / samples.len() as f64)
        })
        .collect()
}

/// Per-head mean KL of reference-normalized head maps, as a flat `L*H` vector.
pub fn flat_head_kls(samples: &[AnalysisSample], eps: f64) -> Vec<f64> {
    let (l, h, n) = samples[0].question.dims();
    let mut out = vec![0.0; l * h];
    for s in samples {
        for layer in 0..l {
            for head in 0..h {
                let a = flat_ref_normalize(
                    &flat_head(&s.question, layer, head),
                    &flat_head(&s.reference, layer, head),
                    eps,
                );
                out[layer * h + head] += oracle_kl(&grid_of(&a, n), &mask_grid(&s.mask), eps);
            }
        }
    }
    out.iter().map(|v| v / samples.len() as f64).collect()
}

/// Calibration samples from the planted generator.
pub fn planted_samples(
    seed: u64,
    n_samples: usize,
    grid_n: usize,
    layers: usize,
    heads: usize,
    plant: Option<Plant>,
) -> Vec<AnalysisSample> {
    let spec = FixtureSpec::planted(seed, n_samples, grid_n, layers, heads, plant);
    generate_fixture(&spec)
        .unwrap()
        .into_iter()
        .map(|s| AnalysisSample {
            sample_id: s.meta.sample_id,
            question: s.question,
            reference: s.reference,
            mask: s.mask,
        })
        .collect()
}

/// Dense-math forward pass of the toy model. Builds every intermediate
/// tensor explicitly (per-head Q/K/V, a full causal score matrix) and
/// returns `(logits, last-token attention [layer][head][key])`.
pub fn dense_forward(model: &ToyModelState, visual: &Matrix, tokens: &[u32]) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let cfg = &model.config;
    let d = cfg.model_dim;
    let nh = cfg.heads;
    let dh = d / nh;
    let nv = visual.rows;
    let t = nv + tokens.len();

    let mut x = vec![vec![0.0f64; d]; t];
    for (pos, row) in x.iter_mut().enumerate() {
        for (c, cell) in row.iter_mut().enumerate() {
            let base = if pos < nv {
                visual.get(pos, c)
            } else {
                model.token_embedding.get(tokens[pos - nv] as usize, c)
            };
            *cell = base + model.position_embedding.get(pos, c);
        }
    }

    let ln = |v: &[f64]| -> Vec<f64> {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / v.len() as f64;
        v.iter().map(|a| (a - mean) / (var + 1e-5).sqrt()).collect()
    };
    let matvec = |v: &[f64], w: &Matrix| -> Vec<f64> {
        (0..w.cols)
            .map(|c| (0..w.rows).map(|r| v[r] * w.get(r, c)).sum())
            .collect()
    };

    let mut last_attn = Vec::new();
    for w in &model.layers {
        let h: Vec<Vec<f64>> = x.iter().map(|r| ln(r)).collect();
        let q: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &w.wq)).collect();
        let k: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &w.wk)).collect();
        let v: Vec<Vec<f64>> = h.iter().map(|r| matvec(r, &w.wv)).collect();
        let mut concat = vec![vec![0.0f64; d]; t];
        let mut layer_attn = Vec::new();
        for head in 0..nh {
            let off = head * dh;
            let mut probs = vec![vec![0.0f64; t]; t];
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..=i {
                    probs[i][j] = (scores[j] - mx).exp() / z;
                }
                for c in 0..dh {
                    concat[i][off + c] = (0..=i).map(|j| probs[i][j] * v[j][off + c]).sum();
                }
            }
            layer_attn.push(probs[t - 1].clone());
        }
        last_attn.push(layer_attn);
        for i in 0..t {
            let o = matvec(&concat[i], &w.wo);
            for c in 0..d {
                x[i][c] += o[c];
            }
            let hidden: Vec<f64> = matvec(&ln(&x[i]), &w.w1).into_iter().map(|a| a.max(0.0)).collect();
            let m = matvec(&hidden, &w.w2);
            for c in 0..d {
                x[i][c] += m[c];
            }
        }
    }
    let logits = matvec(&ln(&x[t - 1]), &model.head);
    (logits, last_attn)
}

/// Prints a PASS/FAIL line and returns whether it passed.
pub fn report(name: &str, ok: bool, detail: &str, elapsed: std::time::Duration) -> bool {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("{status} {name} ({:.2}s) {detail}", elapsed.as_secs_f64());
    ok
}
