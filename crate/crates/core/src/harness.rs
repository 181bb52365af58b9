//! Run manifests and the runners behind the command-line tool: single
//! generation, grid sweeps, ablations, inversion checks and metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backends::{Backends, EdgeBackend};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::imaging::{contact_sheet, Image};
use crate::inversion::{ddpm_invert, max_abs_diff, replay_reconstruct, SourceRole};
use crate::pipeline::{ablate, generate_sketch, InterventionKind, Module, SketchResult};
use crate::schedule::SamplerSchedule;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;
pub const EXIT_INVERSION: i32 = 4;

/// Reconstruction error above which an inversion check fails.
pub const INVERSION_TOLERANCE: f64 = 1e-4;

/// Exit code for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::MissingFile(_) | Error::Config(_) => EXIT_INPUT,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_INPUT,
        _ => EXIT_PIPELINE,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePair {
    pub content: PathBuf,
    pub reference: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub pairs: Vec<ImagePair>,
    #[serde(default)]
    pub config: PipelineConfig,
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<Value>>,
    pub output_dir: PathBuf,
}

impl RunManifest {
    pub fn single(content: impl Into<PathBuf>, reference: impl Into<PathBuf>, config: PipelineConfig, output_dir: impl Into<PathBuf>) -> Self {
        RunManifest {
            pairs: vec![ImagePair {
                content: content.into(),
                reference: reference.into(),
            }],
            config,
            sweep: BTreeMap::new(),
            output_dir: output_dir.into(),
        }
    }

    /// Reads a TOML manifest. Relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: RunManifest = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for pair in &mut m.pairs {
            resolve(&mut pair.content);
            resolve(&mut pair.reference);
        }
        resolve(&mut m.output_dir);
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Config("manifest lists no image pairs".into()));
        }
        for pair in &self.pairs {
            for p in [&pair.content, &pair.reference] {
                if !p.exists() {
                    return Err(Error::MissingFile(p.clone()));
                }
            }
        }
        self.config.validate()?;
        self.sweep_cells()?;
        Ok(())
    }

    /// Cartesian product of the sweep, each parameter's values in ascending
    /// order, the last parameter varying fastest. Every cell is validated.
    pub fn sweep_cells(&self) -> Result<Vec<SweepCell>> {
        let mut cells = vec![SweepCell {
            name: String::new(),
            assignments: Vec::new(),
            config: self.config.clone(),
        }];
        for (param, values) in &self.sweep {
            if values.is_empty() {
                return Err(Error::Config(format!("sweep over {param:?} lists no values")));
            }
            let mut values = values.clone();
            values.sort_by(|a, b| match (a.as_f64(), b.as_f64()) {
                (Some(x), Some(y)) => x.total_cmp(&y),
                _ => a.to_string().cmp(&b.to_string()),
            });
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for v in &values {
                    let config = cell.config.with_field(param, v.clone())?;
                    let mut assignments = cell.assignments.clone();
                    assignments.push((param.clone(), v.clone()));
                    next.push(SweepCell {
                        name: cell_name(&assignments),
                        assignments,
                        config,
                    });
                }
            }
            cells = next;
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    /// Directory-safe label, e.g. `gamma-0.25`.
    pub name: String,
    pub assignments: Vec<(String, Value)>,
    pub config: PipelineConfig,
}

fn cell_name(assignments: &[(String, Value)]) -> String {
    assignments
        .iter()
        .map(|(k, v)| {
            let v = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            format!("{k}-{}", v.replace(['/', '\\', ' '], "_"))
        })
        .collect::<Vec<_>>()
        .join("_")
}

/// Files written for one generation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub image_path: PathBuf,
    pub result_path: PathBuf,
    pub mask_path: PathBuf,
    pub image_sha256: String,
}

fn pair_dir(manifest: &RunManifest, index: usize) -> PathBuf {
    if manifest.pairs.len() == 1 {
        manifest.output_dir.clone()
    } else {
        manifest.output_dir.join(format!("pair-{index}"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.png`, `<stem>.mask.pgm` and `<stem>.json` (or
/// `result.json` for the stem `sketch`) into `dir`.
pub fn write_result(dir: &Path, stem: &str, result: &SketchResult, pair: &ImagePair) -> Result<RunOutput> {
    create_dir(dir)?;
    let image_path = dir.join(format!("{stem}.png"));
    let mask_path = dir.join(if stem == "sketch" { "mask.pgm".to_string() } else { format!("{stem}.mask.pgm") });
    let result_path = dir.join(if stem == "sketch" { "result.json".to_string() } else { format!("{stem}.json") });
    let png = result.png_bytes()?;
    fs::write(&image_path, &png).map_err(|e| Error::io(&image_path, e))?;
    result.foreground_mask.write_pgm(&mask_path)?;
    let image_sha256 = result.image_hash()?;
    let counts: BTreeMap<String, usize> = [
        ("kv_injection", InterventionKind::KvInjection),
        ("query_blend", InterventionKind::QueryBlend),
        ("contrast", InterventionKind::Contrast),
        ("guidance", InterventionKind::Guidance),
        ("semantic", InterventionKind::Semantic),
    ]
    .into_iter()
    .map(|(n, k)| (n.to_string(), result.interventions.count(k)))
    .collect();
    let sidecar = json!({
        "config": result.config,
        "config_hash": result.trace_meta.config_hash,
        "seed": result.trace_meta.seed,
        "caption": result.trace_meta.caption,
        "content": pair.content,
        "reference": pair.reference,
        "image": file_name(&image_path),
        "image_sha256": image_sha256,
        "mask": file_name(&mask_path),
        "mask_foreground": result.foreground_mask.count(),
        "mask_positions": result.foreground_mask.len(),
        "interventions": counts,
        "stage_millis": result.trace_meta.stage_millis,
        "step_timings": result.trace_meta.step_timings,
        "warnings": result.warnings,
    });
    write_json(&result_path, &sidecar)?;
    Ok(RunOutput {
        image_path,
        result_path,
        mask_path,
        image_sha256,
    })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_pair(pair: &ImagePair) -> Result<(Image, Image)> {
    Ok((Image::load(&pair.content)?, Image::load(&pair.reference)?))
}

/// Generates every pair with the manifest's config.
pub fn run_single(manifest: &RunManifest, backends: &Backends) -> Result<Vec<(SketchResult, RunOutput)>> {
    manifest.validate()?;
    manifest
        .pairs
        .iter()
        .enumerate()
        .map(|(i, pair)| {
            let (content, reference) = load_pair(pair)?;
            let result = generate_sketch(&content, &reference, &manifest.config, backends)?;
            let out = write_result(&pair_dir(manifest, i), "sketch", &result, pair)?;
            Ok((result, out))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub cells: Vec<(SweepCell, RunOutput)>,
    pub contact_sheets: Vec<PathBuf>,
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

/// One generation per grid cell and pair, then a contact sheet per pair
/// ordered like [`RunManifest::sweep_cells`].
pub fn run_sweep(manifest: &RunManifest, backends: &Backends, jobs: usize) -> Result<SweepOutput> {
    manifest.validate()?;
    let cells = manifest.sweep_cells()?;
    if manifest.sweep.is_empty() {
        let outs = run_single(manifest, backends)?;
        return Ok(SweepOutput {
            cells: outs.into_iter().map(|(_, o)| (cells[0].clone(), o)).collect(),
            contact_sheets: Vec::new(),
        });
    }
    let cols = manifest.sweep.values().last().map_or(1, |v| v.len());
    let pool = thread_pool(jobs)?;
    let mut all = Vec::new();
    let mut sheets = Vec::new();
    for (i, pair) in manifest.pairs.iter().enumerate() {
        let (content, reference) = load_pair(pair)?;
        let dir = pair_dir(manifest, i);
        let results: Vec<Result<(SketchResult, RunOutput)>> = pool.install(|| {
            cells
                .par_iter()
                .map(|cell| {
                    let result = generate_sketch(&content, &reference, &cell.config, backends)?;
                    let out = write_result(&dir.join(format!("cell_{}", cell.name)), "sketch", &result, pair)?;
                    Ok((result, out))
                })
                .collect()
        });
        let mut tiles = Vec::with_capacity(cells.len());
        for (cell, r) in cells.iter().zip(results) {
            let (result, out) = r?;
            tiles.push(result.image);
            all.push((cell.clone(), out));
        }
        let sheet = contact_sheet(&tiles, cols, 2)?;
        let path = dir.join("contact_sheet.png");
        sheet.save_png(&path)?;
        sheets.push(path);
    }
    Ok(SweepOutput {
        cells: all,
        contact_sheets: sheets,
    })
}

/// The ablation variants: full config and one module removed at a time.
pub fn ablation_variants(config: &PipelineConfig) -> Vec<(&'static str, PipelineConfig)> {
    let without = |m: Module| ablate(config, &[m].into_iter().collect());
    vec![
        ("full", config.clone()),
        ("no-dam", without(Module::Dam)),
        ("no-spm", without(Module::Spm)),
        ("no-sdpe", without(Module::Sdpe)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDiff {
    pub a: String,
    pub b: String,
    pub mean_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub content: PathBuf,
    pub reference: PathBuf,
    pub outputs: BTreeMap<String, String>,
    pub diffs: Vec<PairwiseDiff>,
}

pub fn run_ablation(manifest: &RunManifest, backends: &Backends, jobs: usize) -> Result<Vec<AblationReport>> {
    manifest.validate()?;
    let variants = ablation_variants(&manifest.config);
    let pool = thread_pool(jobs)?;
    let mut reports = Vec::new();
    for (i, pair) in manifest.pairs.iter().enumerate() {
        let (content, reference) = load_pair(pair)?;
        let dir = pair_dir(manifest, i);
        let results: Vec<Result<(SketchResult, RunOutput)>> = pool.install(|| {
            variants
                .par_iter()
                .map(|(name, cfg)| {
                    let r = generate_sketch(&content, &reference, cfg, backends)?;
                    let out = write_result(&dir, name, &r, pair)?;
                    Ok((r, out))
                })
                .collect()
        });
        let mut images = Vec::new();
        let mut outputs = BTreeMap::new();
        for ((name, _), r) in variants.iter().zip(results) {
            let (result, out) = r?;
            outputs.insert(name.to_string(), file_name(&out.image_path));
            images.push((name.to_string(), result.image));
        }
        let mut diffs = Vec::new();
        for a in 0..images.len() {
            for b in a + 1..images.len() {
                diffs.push(PairwiseDiff {
                    a: images[a].0.clone(),
                    b: images[b].0.clone(),
                    mean_abs_diff: images[a].1.mean_abs_diff(&images[b].1)?,
                });
            }
        }
        let report = AblationReport {
            content: pair.content.clone(),
            reference: pair.reference.clone(),
            outputs,
            diffs,
        };
        write_json(&dir.join("report.json"), &report)?;
        reports.push(report);
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub total_steps: usize,
    pub seed: u64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub corrupted: bool,
}

impl InversionReport {
    pub fn passed(&self) -> bool {
        self.max_abs_error < self.tolerance
    }
}

/// Inverts `image`, replays the trace and reports the reconstruction error.
/// `corrupt` perturbs one stored noise map before replay.
pub fn verify_inversion(image: &Image, config: &PipelineConfig, backends: &Backends, corrupt: bool) -> Result<InversionReport> {
    let diffusion = backends.diffusion.as_ref();
    let schedule = SamplerSchedule::new(config.total_steps, 0)?;
    let z0 = diffusion.encode(image)?;
    let mut trace = ddpm_invert(&z0, &schedule, diffusion, "", config.seed, SourceRole::Content)?;
    if corrupt {
        let mid = trace.per_step_noise.len() / 2;
        trace.per_step_noise[mid].mapv_inplace(|u| u + 1.0);
    }
    let replay = replay_reconstruct(&trace, diffusion)?;
    Ok(InversionReport {
        total_steps: config.total_steps,
        seed: config.seed,
        max_abs_error: max_abs_diff(&replay, &z0),
        tolerance: INVERSION_TOLERANCE,
        corrupted: corrupt,
    })
}

/// A named output-quality score. Lower is better unless noted by the scorer.
pub trait Metric: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, output: &Image, content: &Image, reference: &Image) -> Result<f64>;
}

fn gray_at(img: &Image, w: usize, h: usize) -> Image {
    let g = img.to_gray();
    if g.width() == w && g.height() == h {
        g
    } else {
        g.resize(w, h)
    }
}

/// Mean absolute luminance difference to the content image.
pub struct ContentL1;

impl Metric for ContentL1 {
    fn name(&self) -> &str {
        "content_l1"
    }
    fn score(&self, output: &Image, content: &Image, _: &Image) -> Result<f64> {
        gray_at(output, content.width(), content.height()).mean_abs_diff(&gray_at(content, content.width(), content.height()))
    }
}

/// `1 − IoU` of the edge maps of output and content.
pub struct EdgeOverlap<E: EdgeBackend>(pub E);

impl<E: EdgeBackend> Metric for EdgeOverlap<E> {
    fn name(&self) -> &str {
        "edge_overlap"
    }
    fn score(&self, output: &Image, content: &Image, _: &Image) -> Result<f64> {
        let a = self.0.detect(&gray_at(output, content.width(), content.height()))?;
        let b = self.0.detect(&content.to_gray())?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&x, &y) in a.iter().zip(b.iter()) {
            let (x, y) = (x > 0.5, y > 0.5);
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
        Ok(if union == 0 { 0.0 } else { 1.0 - inter as f64 / union as f64 })
    }
}

pub const HIST_BINS: usize = 16;

fn luma_histogram(img: &Image) -> [f64; HIST_BINS] {
    let mut h = [0.0; HIST_BINS];
    let luma = img.luma();
    for &v in luma.iter() {
        let b = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        h[b] += 1.0;
    }
    let n = luma.len().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Half the L1 distance between luminance histograms of output and reference.
pub struct StyleHistogram;

impl Metric for StyleHistogram {
    fn name(&self) -> &str {
        "style_hist"
    }
    fn score(&self, output: &Image, _: &Image, reference: &Image) -> Result<f64> {
        let (a, b) = (luma_histogram(output), luma_histogram(reference));
        Ok(0.5 * a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>())
    }
}

pub fn default_metrics() -> Vec<Box<dyn Metric>> {
    vec![
        Box::new(ContentL1),
        Box::new(EdgeOverlap(crate::backends::toy::ToyEdges)),
        Box::new(StyleHistogram),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub content: PathBuf,
    pub reference: PathBuf,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_pair: Vec<PairScores>,
    pub aggregates: BTreeMap<String, f64>,
    /// `(1 + style) · (1 + content)` over the aggregates, when both are scored.
    pub combined: Option<f64>,
}

impl MetricReport {
    pub fn from_pairs(per_pair: Vec<PairScores>) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for p in &per_pair {
            for (k, v) in &p.scores {
                let e = sums.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        let aggregates: BTreeMap<String, f64> = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        let combined = match (aggregates.get("style_hist"), aggregates.get("content_l1")) {
            (Some(s), Some(c)) => Some((1.0 + s) * (1.0 + c)),
            _ => None,
        };
        MetricReport {
            per_pair,
            aggregates,
            combined,
        }
    }
}

pub fn score_pair(output: &Image, content: &Image, reference: &Image, metrics: &[Box<dyn Metric>]) -> Result<BTreeMap<String, f64>> {
    metrics
        .iter()
        .map(|m| Ok((m.name().to_string(), m.score(output, content, reference)?)))
        .collect()
}

/// Generates every pair and scores the outputs; writes `metrics.json`.
pub fn run_eval(manifest: &RunManifest, backends: &Backends, metrics: &[Box<dyn Metric>]) -> Result<MetricReport> {
    let outs = run_single(manifest, backends)?;
    let mut per_pair = Vec::new();
    for (pair, (result, _)) in manifest.pairs.iter().zip(outs) {
        let (content, reference) = load_pair(pair)?;
        per_pair.push(PairScores {
            content: pair.content.clone(),
            reference: pair.reference.clone(),
            scores: score_pair(&result.image, &content, &reference, metrics)?,
        });
    }
    let report = MetricReport::from_pairs(per_pair);
    create_dir(&manifest.output_dir)?;
    write_json(&manifest.output_dir.join("metrics.json"), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_cells_are_sorted_and_named() {
        let mut m = RunManifest::single("a", "b", PipelineConfig::default(), "out");
        m.sweep.insert("gamma".into(), vec![json!(0.6), json!(0.15), json!(0.25)]);
        let cells = m.sweep_cells().unwrap();
        let names: Vec<_> = cells.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["gamma-0.15", "gamma-0.25", "gamma-0.6"]);
        assert_eq!(cells[2].config.gamma, 0.6);
        m.sweep.insert("gamma".into(), vec![json!(1.5)]);
        assert!(matches!(m.sweep_cells(), Err(Error::Config(_))));
        m.sweep.clear();
        m.sweep.insert("nonsense".into(), vec![json!(1)]);
        assert!(matches!(m.sweep_cells(), Err(Error::Config(_))));
    }

    #[test]
    fn two_parameter_grid() {
        let mut m = RunManifest::single("a", "b", PipelineConfig::default(), "out");
        m.sweep.insert("zeta".into(), vec![json!(0.8), json!(3.5)]);
        m.sweep.insert("gamma".into(), vec![json!(0.15), json!(0.6)]);
        let names: Vec<_> = m.sweep_cells().unwrap().into_iter().map(|c| c.name).collect();
        assert_eq!(names, ["gamma-0.15_zeta-0.8", "gamma-0.15_zeta-3.5", "gamma-0.6_zeta-0.8", "gamma-0.6_zeta-3.5"]);
    }

    #[test]
    fn report_aggregates_are_means() {
        let pair = |a: f64, b: f64| PairScores {
            content: "c".into(),
            reference: "r".into(),
            scores: [("content_l1".to_string(), a), ("style_hist".to_string(), b)].into(),
        };
        let r = MetricReport::from_pairs(vec![pair(0.1, 0.3), pair(0.3, 0.5)]);
        assert!((r.aggregates["content_l1"] - 0.2).abs() < 1e-12);
        assert!((r.aggregates["style_hist"] - 0.4).abs() < 1e-12);
        assert!((r.combined.unwrap() - 1.4 * 1.2).abs() < 1e-12);
    }

    #[test]
    fn metric_identities() {
        let img = Image::from_fn(16, 16, 1, |x, y, _| ((x / 4 + y / 4) % 2) as f64);
        assert_eq!(ContentL1.score(&img, &img, &img).unwrap(), 0.0);
        assert_eq!(StyleHistogram.score(&img, &img, &img).unwrap(), 0.0);
        assert_eq!(EdgeOverlap(crate::backends::toy::ToyEdges).score(&img, &img, &img).unwrap(), 0.0);
        let flat = Image::from_fn(16, 16, 1, |_, _, _| 0.0);
        assert!((StyleHistogram.score(&flat, &img, &img).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::MissingFile("x".into())), EXIT_INPUT);
        let staged = Error::Stage {
            stage: "decode",
            source: Box::new(Error::Numeric { step: 3, what: "z".into() }),
        };
        assert_eq!(exit_code(&staged), EXIT_PIPELINE);
    }
}
