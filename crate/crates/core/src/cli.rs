// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line surface: `synth`, `analyze`, `triage`, `knockout`, `render`.
//!
//! Exit codes: 0 on success, 1 for data or invariant errors, 2 for usage
//! errors. Failures print one line to stderr:
//!
//! ```text
//! vground: error kind=<data|usage> [sample=<id>] [file=<path>]: <message>
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{best_layer, sweep, AnalysisSample, RefNormMode, SweepConfig, SweepResult};
use crate::dataset::{synthesize_fixture, toy_inputs, AttentionSource, BboxMode, FixtureSpec, Plant};
use crate::metrics::{rasterize_bbox, score, DEFAULT_EPS};
use crate::par::{init_threads, try_map_ordered, ExecMode};
use crate::refine::{
    build_refine_plan, HeadRanking, KnockoutMask, KnockoutScope, MaskMode, TriageConfig, TriageError, DEFAULT_K,
    DEFAULT_P,
};
use crate::report::{
    per_sample_csv, ranking_csv, render_heatmap, sweep_csv, to_json_pretty, write_atomic, RunManifest,
};
use crate::tensor_io::{
    encode_dump, read_dump_file, read_meta_file, DatasetManifest, SampleMeta, SamplePaths, SourceKind, Split,
    DATASET_MANIFEST,
};
use crate::toy::{init_model, reference_tokens, ToyConfig};

pub const THREADS_ENV: &str = "VG_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "vground",
    version,
    about = "Attention grounding analysis and attention knockout"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate calibration and analysis fixtures.
    Synth(SynthArgs),
    /// Per-layer (and per-head) AR/KL/JS sweep over a data directory.
    Analyze(AnalyzeArgs),
    /// Rank heads on a calibration directory.
    Triage(TriageArgs),
    /// Run the toy model with and without attention knockout.
    Knockout(KnockoutArgs),
    /// Render one sample's attention map as a P6 heatmap.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub calib_samples: usize,
    #[arg(long, default_value_t = 5)]
    pub analysis_samples: usize,
    #[arg(long, default_value_t = 6)]
    pub grid: usize,
    #[arg(long, default_value_t = 18)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, value_enum, default_value_t = BboxMode::Random)]
    pub bbox_mode: BboxMode,
    /// Planted aligned heads as `layer:head` pairs, comma separated.
    #[arg(long, default_value = "")]
    pub plant: String,
    #[arg(long, default_value_t = 10.0)]
    pub sharpness: f64,
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = SynthSource::Planted)]
    pub source: SynthSource,
    /// Toy model width for `--source toy`.
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthSource {
    Planted,
    Toy,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Normalize question maps by the reference-prompt maps.
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_enum, default_value_t = RefMode::Ratio)]
    pub ref_mode: RefMode,
    /// Add per-(layer, head) rows.
    #[arg(long)]
    pub per_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RefMode {
    Ratio,
    Subtract,
}

impl From<RefMode> for RefNormMode {
    fn from(m: RefMode) -> Self {
        match m {
            RefMode::Ratio => RefNormMode::Ratio,
            RefMode::Subtract => RefNormMode::Subtract,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TriageArgs {
    #[arg(long)]
    pub calib_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_P)]
    pub p: f64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct KnockoutArgs {
    /// `ranking.json` written by `triage`.
    #[arg(long)]
    pub ranking: PathBuf,
    /// Analysis data directory.
    #[arg(long)]
    pub fixture: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
    /// Knockout layers, comma separated; an empty string disables knockout.
    #[arg(long, default_value = "16")]
    pub layers: String,
    #[arg(long, value_enum, default_value_t = MaskMode::PostSoftmax)]
    pub mask_mode: MaskMode,
    #[arg(long, value_enum, default_value_t = KnockoutScope::QuestionOnly)]
    pub scope: KnockoutScope,
    /// Toy model width; defaults to 8 per head.
    #[arg(long)]
    pub model_dim: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub vocab: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RenderArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub sample: String,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Layer to render; defaults to the sample's lowest-KL layer.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Usage,
}

/// A command failure with the context needed for the one-line report.
#[derive(Debug, Clone)]
pub struct CliError {
    pub kind: ErrorKind,
    pub sample: Option<String>,
    pub file: Option<PathBuf>,
    pub message: String,
}

impl CliError {
    pub fn data(message: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Data,
            sample: None,
            file: None,
            message: message.to_string(),
        }
    }

    pub fn usage(message: impl fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Usage,
            ..Self::data(message)
        }
    }

    fn sample(mut self, id: &str) -> Self {
        self.sample = Some(id.to_string());
        self
    }

    fn file(mut self, path: &Path) -> Self {
        self.file = Some(path.to_path_buf());
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Data => 1,
            ErrorKind::Usage => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ErrorKind::Data => "data",
            ErrorKind::Usage => "usage",
        };
        write!(f, "vground: error kind={kind}")?;
        if let Some(s) = &self.sample {
            write!(f, " sample={s}")?;
        }
        if let Some(p) = &self.file {
            write!(f, " file={}", p.display())?;
        }
        let msg = self.message.replace(['\n', '\r'], " ");
        write!(f, ": {msg}")
    }
}

type CmdResult<T = ()> = Result<T, CliError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::data(e).file(path)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                print!("{e}");
            } else {
                let _ = write!(stderr, "{e}");
            }
            return code;
        }
    };
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    init_threads(threads);
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "{e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: &Command) -> CmdResult {
    let start = Instant::now();
    let (out_dir, mut manifest) = match command {
        Command::Synth(a) => (&a.out_dir, cmd_synth(a)?),
        Command::Analyze(a) => (&a.out_dir, cmd_analyze(a)?),
        Command::Triage(a) => (&a.out_dir, cmd_triage(a)?),
        Command::Knockout(a) => (&a.out_dir, cmd_knockout(a)?),
        Command::Render(a) => (&a.out_dir, cmd_render(a)?),
    };
    manifest.wall_time_ms = start.elapsed().as_millis() as u64;
    manifest.write(out_dir).map_err(io_err(out_dir))
}

fn snapshot<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("args serialize")
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn create_out_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_out(dir: &Path, name: &str, bytes: &[u8], manifest: &mut RunManifest) -> CmdResult {
    let path = dir.join(name);
    write_atomic(&path, bytes).map_err(io_err(&path))?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

/// A sample loaded from a data directory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub meta: SampleMeta,
    pub sample: AnalysisSample,
}

/// Loads every sample listed in `dir/manifest.json`. With `split` set, any
/// sample tagged otherwise is rejected.
pub fn load_data_dir(dir: &Path, split: Option<Split>) -> CmdResult<Vec<LoadedSample>> {
    let manifest_path = dir.join(DATASET_MANIFEST);
    let manifest = DatasetManifest::read(dir).map_err(|e| CliError::data(e).file(&manifest_path))?;
    if manifest.samples.is_empty() {
        return Err(CliError::data("manifest lists no samples").file(&manifest_path));
    }
    if let (Some(want), Some(bad)) = (split, manifest.samples.iter().find(|e| Some(e.split) != split)) {
        return Err(CliError::data(format!(
            "sample is tagged {:?} but this command only accepts {want:?} data",
            bad.split
        ))
        .sample(&bad.sample_id)
        .file(&manifest_path));
    }
    try_map_ordered(&manifest.samples, ExecMode::default(), |entry| {
        load_sample(dir, &entry.sample_id)
    })
}

fn load_sample(dir: &Path, id: &str) -> CmdResult<LoadedSample> {
    let paths = SamplePaths::new(dir, id);
    let meta = read_meta_file(&paths.meta).map_err(|e| CliError::data(e).sample(id).file(&paths.meta))?;
    if meta.sample_id != id {
        return Err(CliError::data(format!("sidecar sample_id is {:?}", meta.sample_id))
            .sample(id)
            .file(&paths.meta));
    }
    let load = |path: &Path, kind: SourceKind| -> CmdResult<_> {
        let err = |m: String| CliError::data(m).sample(id).file(path);
        let stack = read_dump_file(path).map_err(|e| err(e.to_string()))?;
        meta.check_pairing(&stack).map_err(|e| err(e.to_string()))?;
        if stack.source_kind() != kind {
            return Err(err(format!(
                "expected a {kind:?} dump, found {:?}",
                stack.source_kind()
            )));
        }
        Ok(stack)
    };
    let question = load(&paths.question, SourceKind::Question)?;
    let reference = load(&paths.reference, SourceKind::Reference)?;
    let mask = rasterize_bbox(&meta).map_err(|e| CliError::data(e).sample(id).file(&paths.meta))?;
    Ok(LoadedSample {
        sample: AnalysisSample {
            sample_id: id.to_string(),
            question,
            reference,
            mask,
        },
        meta,
    })
}

fn analysis_error(e: crate::analysis::AnalysisError) -> CliError {
    use crate::analysis::AnalysisError as E;
    match &e {
        E::Shape { sample_id, .. } | E::Metric { sample_id, .. } => {
            let id = sample_id.clone();
            CliError::data(e).sample(&id)
        }
        _ => CliError::data(e),
    }
}

fn triage_error(e: TriageError) -> CliError {
    match e {
        TriageError::Analysis(a) => analysis_error(a),
        other => CliError::data(other),
    }
}

pub fn parse_plant(s: &str) -> CmdResult<Vec<(usize, usize)>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (l, h) = pair
                .split_once(':')
                .ok_or_else(|| CliError::usage(format!("bad --plant entry {pair:?}, expected layer:head")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::usage(format!("bad --plant entry {pair:?}")))
            };
            Ok((parse(l)?, parse(h)?))
        })
        .collect()
}

pub fn parse_layers(s: &str) -> CmdResult<BTreeSet<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|v| {
            v.parse::<usize>()
                .map_err(|_| CliError::usage(format!("bad --layers entry {v:?}")))
        })
        .collect()
}

fn cmd_synth(a: &SynthArgs) -> CmdResult<RunManifest> {
    let plant = parse_plant(&a.plant)?;
    let source = match a.source {
        SynthSource::Planted => AttentionSource::Planted {
            layers: a.layers,
            heads: a.heads,
            plant: (!plant.is_empty()).then(|| Plant {
                aligned_heads: plant.clone(),
                sharpness: a.sharpness,
            }),
            noise: a.noise,
        },
        SynthSource::Toy => {
            if !plant.is_empty() {
                return Err(CliError::usage("--plant only applies to --source planted"));
            }
            AttentionSource::Toy {
                config: ToyConfig {
                    layers: a.layers,
                    heads: a.heads,
                    model_dim: a.model_dim.unwrap_or(8 * a.heads),
                    grid_n: a.grid,
                    vocab_size: 64,
                    seed: a.model_seed,
                    max_text_len: 32,
                },
            }
        }
    };
    let specs = [
        (Split::Calibration, "calibration", a.calib_samples, a.seed),
        (Split::Analysis, "analysis", a.analysis_samples, a.seed.wrapping_add(1)),
    ];
    for (split, _, count, seed) in &specs {
        let spec = FixtureSpec {
            seed: *seed,
            n_samples: *count,
            grid_n: a.grid,
            image_size: 336,
            bbox_mode: a.bbox_mode,
            split: *split,
            source: source.clone(),
        };
        spec.validate().map_err(CliError::usage)?;
    }
    create_out_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new("synth", snapshot(a), Vec::new());
    for (split, name, count, seed) in specs {
        let dir = a.out_dir.join(name);
        let spec = FixtureSpec {
            seed,
            n_samples: count,
            grid_n: a.grid,
            image_size: 336,
            bbox_mode: a.bbox_mode,
            split,
            source: source.clone(),
        };
        synthesize_fixture(&spec, &dir).map_err(|e| CliError::data(e).file(&dir))?;
        manifest.outputs.push(format!("{name}/{DATASET_MANIFEST}"));
    }
    Ok(manifest)
}

/// `sweep.json` contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub best_layer: Option<usize>,
    pub log_base: String,
    pub result: SweepResult,
}

fn cmd_analyze(a: &AnalyzeArgs) -> CmdResult<RunManifest> {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(CliError::usage(format!("--eps must be > 0, got {}", a.eps)));
    }
    let samples = load_data_dir(&a.data_dir, None)?;
    let cfg = SweepConfig {
        eps: a.eps,
        normalize: a.normalize,
        per_head: a.per_head,
        ref_mode: a.ref_mode.into(),
    };
    let set: Vec<AnalysisSample> = samples.into_iter().map(|s| s.sample).collect();
    let result = sweep(&set, &cfg).map_err(analysis_error)?;
    create_out_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new(
        "analyze",
        snapshot(a),
        vec![display(&a.data_dir.join(DATASET_MANIFEST))],
    );
    let report = SweepReport {
        config: cfg,
        best_layer: best_layer(&result),
        log_base: "e".into(),
        result,
    };
    write_out(
        &a.out_dir,
        "sweep.csv",
        sweep_csv(&report.result).as_bytes(),
        &mut manifest,
    )?;
    write_out(
        &a.out_dir,
        "per_sample.csv",
        per_sample_csv(&report.result).as_bytes(),
        &mut manifest,
    )?;
    write_out(
        &a.out_dir,
        "sweep.json",
        to_json_pretty(&report).as_bytes(),
        &mut manifest,
    )?;
    Ok(manifest)
}

/// `ranking.json`: the ranking plus the selection settings used with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageArtifact {
    pub ranking: HeadRanking,
    pub config: TriageConfig,
}

fn cmd_triage(a: &TriageArgs) -> CmdResult<RunManifest> {
    let cfg = TriageConfig {
        k: a.k,
        p: a.p,
        eps: a.eps,
        ..TriageConfig::default()
    };
    if cfg.k == 0 {
        return Err(CliError::usage("--k must be >= 1"));
    }
    if !(cfg.p > 0.0 && cfg.p < 100.0) {
        return Err(CliError::usage(format!("--p must be in (0, 100), got {}", cfg.p)));
    }
    if !(cfg.eps > 0.0 && cfg.eps.is_finite()) {
        return Err(CliError::usage(format!("--eps must be > 0, got {}", cfg.eps)));
    }
    let samples = load_data_dir(&a.calib_dir, Some(Split::Calibration))?;
    let (layers, heads, _) = samples[0].sample.question.dims();
    cfg.validate_selection(layers, heads).map_err(CliError::usage)?;
    let set: Vec<AnalysisSample> = samples.into_iter().map(|s| s.sample).collect();
    let ranking = crate::refine::rank_heads(&set, cfg.eps).map_err(triage_error)?;

    create_out_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new(
        "triage",
        serde_json::json!({ "args": snapshot(a), "triage": snapshot(&cfg) }),
        vec![display(&a.calib_dir.join(DATASET_MANIFEST))],
    );
    let artifact = TriageArtifact { ranking, config: cfg };
    write_out(
        &a.out_dir,
        "ranking.json",
        to_json_pretty(&artifact).as_bytes(),
        &mut manifest,
    )?;
    write_out(
        &a.out_dir,
        "ranking.csv",
        ranking_csv(&artifact.ranking).as_bytes(),
        &mut manifest,
    )?;
    Ok(manifest)
}

/// Logits and diagnostics of one forward pass, as written to disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub sample_id: String,
    pub knockout: bool,
    pub logits: Vec<f64>,
    pub hidden_norms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRecord {
    pub sample_id: String,
    pub rle: String,
    pub mask: KnockoutMask,
}

fn cmd_knockout(a: &KnockoutArgs) -> CmdResult<RunManifest> {
    let layers = parse_layers(&a.layers)?;
    let text = std::fs::read_to_string(&a.ranking).map_err(io_err(&a.ranking))?;
    let artifact: TriageArtifact = serde_json::from_str(&text).map_err(|e| CliError::data(e).file(&a.ranking))?;
    artifact
        .ranking
        .validate()
        .map_err(|e| CliError::data(e).file(&a.ranking))?;
    let (model_layers, heads) = (artifact.ranking.layers, artifact.ranking.heads);
    let cfg = TriageConfig {
        knockout_layers: layers,
        mask_mode: a.mask_mode,
        scope: a.scope,
        ..artifact.config.clone()
    };
    cfg.validate(model_layers, heads).map_err(CliError::usage)?;

    let samples = load_data_dir(&a.fixture, Some(Split::Analysis))?;
    let grid_n = samples[0].sample.question.grid_n();
    let toy_cfg = ToyConfig {
        layers: model_layers,
        heads,
        model_dim: a.model_dim.unwrap_or(8 * heads),
        grid_n,
        vocab_size: a.vocab,
        seed: a.model_seed,
        max_text_len: 32,
    };
    toy_cfg.validate().map_err(CliError::usage)?;
    let model = init_model(&toy_cfg).map_err(CliError::usage)?;

    struct Outcome {
        id: String,
        mask: MaskRecord,
        baseline: TraceRecord,
        knocked: TraceRecord,
        dump: Vec<u8>,
    }
    let outcomes = try_map_ordered(&samples, ExecMode::default(), |s| -> CmdResult<Outcome> {
        let id = s.meta.sample_id.as_str();
        let fail = |e: &dyn fmt::Display| CliError::data(e).sample(id);
        if s.sample.question.grid_n() != grid_n {
            return Err(fail(&format!(
                "grid {} differs from {grid_n}",
                s.sample.question.grid_n()
            )));
        }
        let (features, tokens) = toy_inputs(&s.meta, &s.sample.mask, &toy_cfg);
        let dumps = model
            .export_dumps(&features, &tokens, &reference_tokens(toy_cfg.vocab_size))
            .map_err(|e| fail(&e))?;
        let plan =
            build_refine_plan(&artifact.ranking, &cfg, &dumps.question, &dumps.reference).map_err(|e| fail(&e))?;
        let base = model.forward(&features, &tokens, None).map_err(|e| fail(&e))?;
        let ko = model.forward(&features, &tokens, Some(&plan)).map_err(|e| fail(&e))?;
        let record = |t: &crate::toy::ForwardTrace, knockout| TraceRecord {
            sample_id: id.to_string(),
            knockout,
            logits: t.logits.clone(),
            hidden_norms: t.hidden_norms.clone(),
        };
        Ok(Outcome {
            id: id.to_string(),
            mask: MaskRecord {
                sample_id: id.to_string(),
                rle: plan.mask.to_rle(),
                mask: plan.mask.clone(),
            },
            baseline: record(&base, false),
            knocked: record(&ko, true),
            dump: encode_dump(&ko.visual_stack(SourceKind::Question)),
        })
    })?;

    create_out_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new(
        "knockout",
        serde_json::json!({
            "args": snapshot(a),
            "triage": snapshot(&cfg),
            "toy_model": snapshot(&toy_cfg),
        }),
        vec![display(&a.ranking), display(&a.fixture.join(DATASET_MANIFEST))],
    );
    let mut deltas = String::from("sample_id,l2_delta,max_abs_delta,argmax_baseline,argmax_knockout,kept_fraction\n");
    for o in &outcomes {
        let diff: Vec<f64> = o
            .baseline
            .logits
            .iter()
            .zip(&o.knocked.logits)
            .map(|(b, k)| k - b)
            .collect();
        let l2 = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let max_abs = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        deltas.push_str(&format!(
            "{},{l2},{max_abs},{},{},{}\n",
            o.id,
            argmax(&o.baseline.logits),
            argmax(&o.knocked.logits),
            o.mask.mask.kept_fraction()
        ));
        write_out(
            &a.out_dir,
            &format!("{}.baseline.json", o.id),
            to_json_pretty(&o.baseline).as_bytes(),
            &mut manifest,
        )?;
        write_out(
            &a.out_dir,
            &format!("{}.knockout.json", o.id),
            to_json_pretty(&o.knocked).as_bytes(),
            &mut manifest,
        )?;
        write_out(
            &a.out_dir,
            &format!("{}.mask.json", o.id),
            to_json_pretty(&o.mask).as_bytes(),
            &mut manifest,
        )?;
        write_out(&a.out_dir, &format!("{}.ko.vgat", o.id), &o.dump, &mut manifest)?;
    }
    write_out(&a.out_dir, "logit_deltas.csv", deltas.as_bytes(), &mut manifest)?;
    Ok(manifest)
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) },
        )
        .0
}

fn cmd_render(a: &RenderArgs) -> CmdResult<RunManifest> {
    if !(a.eps > 0.0 && a.eps.is_finite()) {
        return Err(CliError::usage(format!("--eps must be > 0, got {}", a.eps)));
    }
    let loaded = load_sample(&a.data_dir, &a.sample)?;
    let s = &loaded.sample;
    let layers = s.question.layers();
    let normalize = a.normalize.then_some((a.eps, RefNormMode::Ratio));
    let fail = |e: crate::analysis::AnalysisError| analysis_error(e).sample(&a.sample);
    let layer = match a.layer {
        Some(l) if l >= layers => {
            return Err(CliError::usage(format!(
                "--layer {l} out of range (dump has {layers} layers)"
            )))
        }
        Some(l) => l,
        None => {
            let mut kls = Vec::with_capacity(layers);
            for l in 0..layers {
                let map = s.map_for(l, None, normalize).map_err(fail)?;
                kls.push(
                    score(&map, &s.mask, a.eps)
                        .map_err(|e| CliError::data(e).sample(&a.sample))?
                        .kl,
                );
            }
            crate::analysis::best_layer_by_kl(kls).expect("at least one layer")
        }
    };
    let map = s.map_for(layer, None, normalize).map_err(fail)?;
    create_out_dir(&a.out_dir)?;
    let mut manifest = RunManifest::new(
        "render",
        serde_json::json!({ "args": snapshot(a), "layer": layer }),
        vec![display(&SamplePaths::new(&a.data_dir, &a.sample).meta)],
    );
    let name = format!("{}.layer{layer}.ppm", a.sample);
    write_out(&a.out_dir, &name, &render_heatmap(&map, &s.mask), &mut manifest)?;
    Ok(manifest)
}
