// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use std::f64::consts::LN_2;

use proptest::prelude::*;
use rand::Rng;
use vground::metrics::{
    attention_ratio, js_divergence, kl_divergence, rasterize_bbox, score, AttentionMap, PatchMask, DEFAULT_EPS,
};
use vground::tensor_io::{QuestionKind, SampleMeta};

use common::*;

#[test]
fn matches_loop_oracle_on_6x6() {
    let mut r = rng(7);
    for _ in 0..100 {
        let a = random_grid(&mut r, 6);
        let m = random_mask_grid(&mut r, 6);
        if a.iter().flatten().sum::<f64>() == 0.0 {
            continue;
        }
        let s = score(&to_map(&a), &to_mask(&m), DEFAULT_EPS).unwrap();
        assert!((s.ar - oracle_ar(&a, &m)).abs() <= 1e-12);
        assert!((s.kl - oracle_kl(&a, &m, DEFAULT_EPS)).abs() <= 1e-12);
        assert!((s.js - oracle_js(&a, &m, DEFAULT_EPS)).abs() <= 1e-12);
    }
}

#[test]
fn uniform_attention_has_unit_ratio() {
    let mut r = rng(1);
    for _ in 0..200 {
        let n = r.random_range(1..=12);
        let m = to_mask(&random_mask_grid(&mut r, n));
        let a = AttentionMap::uniform(n, r.random_range(0.01..3.0));
        assert!((attention_ratio(&a, &m).unwrap() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn full_concentration_ratio() {
    let n = 5;
    let mut bits = vec![0u8; 25];
    bits[6] = 1;
    bits[7] = 1;
    bits[12] = 1;
    let m = PatchMask::from_bits(n, &bits).unwrap();
    let cells: Vec<f64> = bits.iter().map(|&b| b as f64 / 3.0).collect();
    let ar = attention_ratio(&AttentionMap::new(n, cells).unwrap(), &m).unwrap();
    assert!((ar - 25.0 / 3.0).abs() < 1e-12);
}

#[test]
fn closed_forms() {
    let delta_mask = PatchMask::from_bits(2, &[1, 0, 0, 0]).unwrap();
    let kl = kl_divergence(&delta_mask, &AttentionMap::uniform(2, 0.25), 1e-8).unwrap();
    assert!((kl - 4f64.ln()).abs() <= 1e-4);

    let mut other = vec![0.0; 4];
    other[3] = 1.0;
    let js = js_divergence(&delta_mask, &AttentionMap::new(2, other).unwrap(), 1e-8).unwrap();
    assert!((js - LN_2).abs() <= 1e-3);
}

#[test]
fn self_divergence_is_eps_bounded() {
    let mut r = rng(3);
    for _ in 0..100 {
        let n = r.random_range(2..=10);
        let m = to_mask(&random_mask_grid(&mut r, n));
        let a = AttentionMap::new(n, m.normalized()).unwrap();
        let eps = DEFAULT_EPS;
        let kl = kl_divergence(&m, &a, eps).unwrap();
        assert!((0.0..=(n * n) as f64 * eps).contains(&kl), "kl {kl}");
    }
}

#[test]
fn frozen_values() {
    // from tests/data/oracles.py
    let m = PatchMask::from_bits(2, &[1, 0, 0, 0]).unwrap();
    let s = score(&AttentionMap::uniform(2, 0.25), &m, 1e-8).unwrap();
    assert!((s.kl - 1.3862943611198906).abs() < 1e-12);
    assert!((s.js - 0.3803956658485779).abs() < 1e-12);
}

fn meta(n: u32, size: u32, bbox: [f64; 4]) -> SampleMeta {
    SampleMeta {
        sample_id: "s".into(),
        image_width: size,
        image_height: size,
        grid_n: n,
        bbox,
        question: "q".into(),
        question_kind: QuestionKind::Localization,
        modality: "CT".into(),
    }
}

fn grid_and_map() -> impl Strategy<Value = (usize, Vec<f64>, Vec<bool>)> {
    (1usize..8).prop_flat_map(|n| {
        (
            Just(n),
            prop::collection::vec(0.0f64..1.0, n * n),
            prop::collection::vec(any::<bool>(), n * n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn js_bounded_and_symmetric((n, cells, bits) in grid_and_map()) {
        prop_assume!(cells.iter().sum::<f64>() > 0.0 && bits.iter().any(|b| *b));
        let a = AttentionMap::new(n, cells).unwrap();
        let m = PatchMask::new(n, bits).unwrap();
        let js = js_divergence(&m, &a, DEFAULT_EPS).unwrap();
        prop_assert!((0.0..=LN_2).contains(&js));
        let p = m.normalized();
        let q = vground::metrics::smoothed_distribution(&a, DEFAULT_EPS);
        let fwd = vground::metrics::js_between(&p, &q);
        let back = vground::metrics::js_between(&q, &p);
        prop_assert!((fwd - back).abs() <= 1e-12);
        prop_assert!(kl_divergence(&m, &a, DEFAULT_EPS).unwrap() >= 0.0);
    }

    #[test]
    fn scale_invariance((n, cells, bits) in grid_and_map(), c in 0.1f64..10.0) {
        prop_assume!(cells.iter().sum::<f64>() > 0.0 && bits.iter().any(|b| *b));
        let a = AttentionMap::new(n, cells).unwrap();
        let m = PatchMask::new(n, bits).unwrap();
        let base = attention_ratio(&a, &m).unwrap();
        let scaled = attention_ratio(&a.scaled(c), &m).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-9 * base.max(1.0));
    }

    #[test]
    fn rasterize_is_monotone(
        n in 1u32..30,
        x0 in 0u32..300, y0 in 0u32..300, w in 1u32..36, h in 1u32..36, grow in 0u32..20,
    ) {
        let size = 336;
        let inner = [x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64];
        let outer = [
            x0.saturating_sub(grow) as f64,
            y0.saturating_sub(grow) as f64,
            (x0 + w + grow).min(size) as f64,
            (y0 + h + grow).min(size) as f64,
        ];
        let a = rasterize_bbox(&meta(n, size, inner)).unwrap();
        let b = rasterize_bbox(&meta(n, size, outer)).unwrap();
        for (ai, bi) in a.cells().iter().zip(b.cells()) {
            prop_assert!(!ai || *bi);
        }
    }
}
