// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report files: CSV/JSON encodings, run manifests, P6 heatmaps and atomic
//! file writes.

use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::SweepResult;
use crate::metrics::{AttentionMap, PatchMask};
use crate::refine::HeadRanking;

/// Writes `bytes` to a temp file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tool_version: String,
    pub wall_time_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, inputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs,
            outputs: Vec::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_ms: 0,
        }
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        write_atomic(&dir.join(RUN_MANIFEST), to_json_pretty(self).as_bytes())
    }
}

/// `layer,head,ar,kl,js,n_samples`; per-layer rows leave `head` empty and
/// come first, followed by per-head rows when present.
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("layer,head,ar,kl,js,n_samples\n");
    let n = result.sample_count;
    for l in &result.per_layer {
        let s = &l.scores;
        let _ = writeln!(out, "{},,{},{},{},{n}", l.layer, s.ar, s.kl, s.js);
    }
    for h in result.per_head.iter().flatten() {
        let s = &h.scores;
        let _ = writeln!(out, "{},{},{},{},{},{n}", h.layer, h.head, s.ar, s.kl, s.js);
    }
    out
}

/// `sample_id,layer,ar,kl,js` for every sample and layer.
pub fn per_sample_csv(result: &SweepResult) -> String {
    let mut out = String::from("sample_id,layer,ar,kl,js\n");
    for s in &result.per_sample {
        for (l, sc) in s.per_layer.iter().enumerate() {
            let _ = writeln!(out, "{},{l},{},{},{}", s.sample_id, sc.ar, sc.kl, sc.js);
        }
    }
    out
}

/// `rank,layer,head,mean_kl`.
pub fn ranking_csv(ranking: &HeadRanking) -> String {
    let mut out = String::from("rank,layer,head,mean_kl\n");
    for (i, e) in ranking.entries.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", i + 1, e.layer, e.head, e.mean_kl);
    }
    out
}

pub const HEATMAP_SCALE: usize = 16;
const RED: [u8; 3] = [255, 0, 0];

/// Renders a map as a binary P6 pixmap, each cell a `16 x 16` block.
///
/// Gray level is `round(255 * a / max(a))`. Mask cells get a 1-pixel red
/// line along every side that borders a non-mask cell or the image edge.
pub fn render_heatmap(map: &AttentionMap, mask: &PatchMask) -> Vec<u8> {
    assert_eq!(map.n(), mask.n(), "map and mask grids differ");
    let n = map.n();
    let scale = HEATMAP_SCALE;
    let side = n * scale;
    let max = map.cells().iter().copied().fold(0.0f64, f64::max);
    let outside =
        |i: isize, j: isize| i < 0 || j < 0 || i >= n as isize || j >= n as isize || !mask.get(i as usize, j as usize);
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    out.reserve(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let (i, j) = (y / scale, x / scale);
            let gray = if max > 0.0 {
                (255.0 * map.get(i, j) / max + 0.5).floor().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            let mut rgb = [gray; 3];
            if mask.get(i, j) {
                let (dy, dx) = (y % scale, x % scale);
                let (ii, jj) = (i as isize, j as isize);
                let edge = (dy == 0 && outside(ii - 1, jj))
                    || (dy == scale - 1 && outside(ii + 1, jj))
                    || (dx == 0 && outside(ii, jj - 1))
                    || (dx == scale - 1 && outside(ii, jj + 1));
                if edge {
                    rgb = RED;
                }
            }
            out.extend_from_slice(&rgb);
        }
    }
    out
}
