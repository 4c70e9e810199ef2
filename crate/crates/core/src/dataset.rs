// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic fixtures shaped like a grounded medical VQA set: images are
//! reduced to their geometry, each sample carries one region bbox and a
//! localization question, and attention dumps are either synthesized with
//! planted aligned heads or produced by the toy model.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{rasterize_bbox, MetricError, PatchMask};
use crate::report::write_atomic;
use crate::tensor_io::{
    encode_dump, AttentionStack, DatasetManifest, ManifestEntry, QuestionKind, SampleMeta, SamplePaths, SourceKind,
    Split, DATASET_MANIFEST,
};
use crate::toy::{init_model, reference_tokens, tokenize, Matrix, ToyConfig, ToyError};

/// Localization question set; `{label}` is the annotated object.
pub const LOCALIZATION_TEMPLATES: [&str; 10] = [
    "Is there a {label} in the image?",
    "Can you see a {label} in the image?",
    "Does the image contain a {label}?",
    "Is a {label} present in this image?",
    "Do you see a {label} in the picture?",
    "Is the {label} visible in the image?",
    "Is there any sign of a {label} in the image?",
    "Can a {label} be found in this image?",
    "Does this image show a {label}?",
    "Is a {label} shown in the picture?",
];

const LABELS: [&str; 8] = [
    "liver",
    "kidney",
    "spleen",
    "lung nodule",
    "polyp",
    "tumor",
    "optic disc",
    "lesion",
];
const MODALITIES: [&str; 5] = ["CT", "MRI", "X-Ray", "Endoscopy", "Fundus"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("mask has no active pixel")]
    EmptyMask,
    #[error("label is empty")]
    EmptyLabel,
    #[error("template index {0} out of range")]
    TemplateIndex(usize),
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// A question template with exactly one `{label}` slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuestionTemplate {
    pub text: &'static str,
    pub kind: QuestionKind,
}

impl QuestionTemplate {
    pub fn render(&self, label: &str) -> String {
        self.text.replace("{label}", label)
    }
}

pub fn localization_templates() -> impl Iterator<Item = QuestionTemplate> {
    LOCALIZATION_TEMPLATES.iter().map(|text| QuestionTemplate {
        text,
        kind: QuestionKind::Localization,
    })
}

/// Binary pixel mask, row-major `height x width`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: vec![false; (width * height) as usize],
        }
    }

    pub fn set(&mut self, x: u32, y: u32) {
        self.pixels[(y * self.width + x) as usize] = true;
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.pixels[(y * self.width + x) as usize]
    }
}

/// Tight box `(x_min, y_min, x_max, y_max)` around active pixels, max bounds
/// exclusive.
pub fn bbox_from_mask(mask: &PixelMask) -> Result<[u32; 4], DatasetError> {
    let mut bbox: Option<[u32; 4]> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            bbox = Some(match bbox {
                None => [x, y, x + 1, y + 1],
                Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
            });
        }
    }
    bbox.ok_or(DatasetError::EmptyMask)
}

pub fn localization_question(label: &str, template: usize) -> Result<String, DatasetError> {
    if label.is_empty() {
        return Err(DatasetError::EmptyLabel);
    }
    let text = LOCALIZATION_TEMPLATES
        .get(template)
        .ok_or(DatasetError::TemplateIndex(template))?;
    Ok(text.replace("{label}", label))
}

/// Draws a template uniformly and substitutes `label`.
pub fn sample_localization_question<R: Rng + ?Sized>(label: &str, rng: &mut R) -> Result<String, DatasetError> {
    let idx = rng.random_range(0..LOCALIZATION_TEMPLATES.len());
    localization_question(label, idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BboxMode {
    #[default]
    Random,
    Quadrant,
    Full,
}

/// Heads built to concentrate on the region mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub aligned_heads: Vec<(usize, usize)>,
    pub sharpness: f64,
}

/// Where the attention dumps of a fixture come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum AttentionSource {
    /// Softmax-shaped stacks: planted heads follow the mask, every other head
    /// is uniform plus noise, references are uniform.
    Planted {
        layers: usize,
        heads: usize,
        plant: Option<Plant>,
        noise: f64,
    },
    /// Dumps exported from the toy model.
    Toy { config: ToyConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_samples: usize,
    pub grid_n: usize,
    pub image_size: u32,
    pub bbox_mode: BboxMode,
    pub split: Split,
    pub source: AttentionSource,
}

impl FixtureSpec {
    pub fn planted(
        seed: u64,
        n_samples: usize,
        grid_n: usize,
        layers: usize,
        heads: usize,
        plant: Option<Plant>,
    ) -> Self {
        Self {
            seed,
            n_samples,
            grid_n,
            image_size: 336,
            bbox_mode: BboxMode::Random,
            split: Split::Calibration,
            source: AttentionSource::Planted {
                layers,
                heads,
                plant,
                noise: 0.01,
            },
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if self.n_samples == 0 || self.grid_n == 0 {
            return bad("n_samples and grid_n must be >= 1".into());
        }
        if (self.image_size as usize) < self.grid_n {
            return bad(format!(
                "image_size {} smaller than grid {}",
                self.image_size, self.grid_n
            ));
        }
        match &self.source {
            AttentionSource::Planted {
                layers,
                heads,
                plant,
                noise,
            } => {
                if *layers == 0 || *heads == 0 {
                    return bad("layers and heads must be >= 1".into());
                }
                if !(0.0..1.0).contains(noise) {
                    return bad(format!("noise {noise} outside [0, 1)"));
                }
                if let Some(p) = plant {
                    if !(p.sharpness > 0.0 && p.sharpness.is_finite()) {
                        return bad(format!("sharpness must be > 0, got {}", p.sharpness));
                    }
                    if let Some((l, h)) = p.aligned_heads.iter().find(|(l, h)| l >= layers || h >= heads) {
                        return bad(format!("planted head ({l}, {h}) outside {layers}x{heads}"));
                    }
                }
            }
            AttentionSource::Toy { config } => {
                config.validate()?;
                if config.grid_n != self.grid_n {
                    return bad(format!("toy grid {} vs fixture grid {}", config.grid_n, self.grid_n));
                }
            }
        }
        Ok(())
    }
}

/// One generated sample, before it is written out.
#[derive(Debug, Clone)]
pub struct FixtureSample {
    pub meta: SampleMeta,
    pub mask: PatchMask,
    pub question: AttentionStack,
    pub reference: AttentionStack,
}

fn random_bbox<R: Rng>(rng: &mut R, size: u32, mode: BboxMode) -> [f64; 4] {
    match mode {
        BboxMode::Full => [0.0, 0.0, size as f64, size as f64],
        BboxMode::Quadrant => {
            let half = size / 2;
            let q = rng.random_range(0..4u32);
            let (x0, y0) = ((q % 2) * half, (q / 2) * half);
            let (x1, y1) = (
                if q % 2 == 0 { half } else { size },
                if q / 2 == 0 { half } else { size },
            );
            [x0 as f64, y0 as f64, x1 as f64, y1 as f64]
        }
        BboxMode::Random => {
            // at most 60% of each side, so a box never covers the full grid
            let max_side = ((size as f64) * 0.6).max(1.0) as u32;
            let w = rng.random_range(1..=max_side);
            let h = rng.random_range(1..=max_side);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            [x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64]
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Planted head: `softmax(sharpness * M)` over the patches.
pub fn planted_row(mask: &PatchMask, sharpness: f64) -> Vec<f64> {
    let logits: Vec<f64> = mask.cells().iter().map(|&c| if c { sharpness } else { 0.0 }).collect();
    softmax(&logits)
}

/// Background head: `(1 + noise * u) / sum` with `u` uniform in `[-1, 1)`.
pub fn noisy_uniform_row<R: Rng>(patches: usize, noise: f64, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..patches)
        .map(|_| 1.0 + noise * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| v / sum).collect()
}

/// Visual features for the toy model: unit noise, with channel 0 shifted
/// by +2 inside the region and -2 outside.
pub fn synthesize_visual_features<R: Rng>(mask: &PatchMask, model_dim: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::zeros(mask.cells().len(), model_dim);
    for (t, &inside) in mask.cells().iter().enumerate() {
        for c in 0..model_dim {
            let mut v = 2.0 * rng.random::<f64>() - 1.0;
            if c == 0 {
                v += if inside { 2.0 } else { -2.0 };
            }
            m.set(t, c, v);
        }
    }
    m
}

/// Deterministic per-sample toy inputs derived from its meta.
pub fn toy_inputs(meta: &SampleMeta, mask: &PatchMask, config: &ToyConfig) -> (Matrix, Vec<u32>) {
    let seed = config.seed ^ fnv_hash(meta.sample_id.as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = synthesize_visual_features(mask, config.model_dim, &mut rng);
    (features, tokenize(&meta.question, config.vocab_size))
}

fn fnv_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn to_f32(rows: impl IntoIterator<Item = Vec<f64>>) -> Vec<f32> {
    rows.into_iter().flatten().map(|v| v as f32).collect()
}

/// Generates all samples of a fixture in memory.
pub fn generate_fixture(spec: &FixtureSpec) -> Result<Vec<FixtureSample>, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let toy = match &spec.source {
        AttentionSource::Toy { config } => Some(init_model(config)?),
        AttentionSource::Planted { .. } => None,
    };
    let n = spec.grid_n;
    let patches = n * n;
    let mut out = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let bbox = random_bbox(&mut rng, spec.image_size, spec.bbox_mode);
        let label = *LABELS.choose(&mut rng).expect("non-empty labels");
        let modality = *MODALITIES.choose(&mut rng).expect("non-empty modalities");
        let question = sample_localization_question(label, &mut rng)?;
        let prefix = match spec.split {
            Split::Calibration => "cal",
            Split::Analysis => "ana",
        };
        let meta = SampleMeta {
            sample_id: format!("{prefix}{i:04}"),
            image_width: spec.image_size,
            image_height: spec.image_size,
            grid_n: n as u32,
            bbox,
            question,
            question_kind: QuestionKind::Localization,
            modality: modality.to_string(),
        };
        let mask = rasterize_bbox(&meta)?;
        let (question, reference) = match (&spec.source, &toy) {
            (
                AttentionSource::Planted {
                    layers,
                    heads,
                    plant,
                    noise,
                },
                _,
            ) => {
                let mut rows = Vec::with_capacity(layers * heads);
                for l in 0..*layers {
                    for h in 0..*heads {
                        let planted = plant
                            .as_ref()
                            .filter(|p| p.aligned_heads.contains(&(l, h)))
                            .map(|p| p.sharpness);
                        rows.push(match planted {
                            Some(s) => planted_row(&mask, s),
                            None => noisy_uniform_row(patches, *noise, &mut rng),
                        });
                    }
                }
                let uniform = vec![1.0 / patches as f32; layers * heads * patches];
                (
                    AttentionStack::new(*layers, *heads, n, to_f32(rows), SourceKind::Question)
                        .expect("softmax rows are valid"),
                    AttentionStack::new(*layers, *heads, n, uniform, SourceKind::Reference)
                        .expect("uniform rows are valid"),
                )
            }
            (AttentionSource::Toy { config }, Some(model)) => {
                let (features, tokens) = toy_inputs(&meta, &mask, config);
                let dumps = model.export_dumps(&features, &tokens, &reference_tokens(config.vocab_size))?;
                (dumps.question, dumps.reference)
            }
            (AttentionSource::Toy { .. }, None) => unreachable!("toy model initialized above"),
        };
        out.push(FixtureSample {
            meta,
            mask,
            question,
            reference,
        });
    }
    Ok(out)
}

/// Writes a fixture into `dir`: one meta/q/ref triplet per sample plus
/// `manifest.json`. Output is byte-identical for identical specs.
pub fn synthesize_fixture(spec: &FixtureSpec, dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let samples = generate_fixture(spec)?;
    std::fs::create_dir_all(dir)?;
    let mut manifest = DatasetManifest::default();
    for s in &samples {
        let paths = SamplePaths::new(dir, &s.meta.sample_id);
        write_atomic(&paths.meta, s.meta.to_json().as_bytes())?;
        write_atomic(&paths.question, &encode_dump(&s.question))?;
        write_atomic(&paths.reference, &encode_dump(&s.reference))?;
        manifest.samples.push(ManifestEntry {
            sample_id: s.meta.sample_id.clone(),
            split: spec.split,
        });
    }
    write_atomic(&dir.join(DATASET_MANIFEST), manifest.to_json().as_bytes())?;
    Ok(manifest)
}
