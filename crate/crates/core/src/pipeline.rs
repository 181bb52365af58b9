//! End-to-end sketch generation: contour extraction, triple inversion,
//! foreground segmentation and the guided denoising loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{attend, attention_weights, enhance_contrast, gate_kv_by_mask, mix_kv, AttentionFeatures};
use crate::backends::{contour_image, AttentionHook, AttentionKind, Backends, HookSite, Latent, LayerSpec};
use crate::config::PipelineConfig;
use crate::dam::{segment, DamParams, ForegroundMask, SegmentationState};
use crate::error::{Error, Result, StageExt};
use crate::imaging::Image;
use crate::inversion::{invert_and_cache, InversionTrace, SourceRole};
use crate::schedule::SamplerSchedule;
use crate::sdpe::{dual_pass_step, StepInputs};
use crate::spm::{apply_semantic_guidance, inject_contour_query, semantic_gradient};

/// Variance below which a reference is treated as blank.
pub const BLANK_VARIANCE: f64 = 1e-6;
/// Nominal resolution whose layers drive segmentation.
pub const DAM_RESOLUTION: u32 = 32;

/// The three images a generation works from.
#[derive(Debug, Clone)]
pub struct ImageBundle {
    pub content: Image,
    pub reference: Image,
    pub contour: Image,
    pub caption: String,
    /// Latent the denoising loop starts from: the content trace's latent at
    /// the first executed step.
    pub z_ske_t: Latent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionKind {
    KvInjection,
    QueryBlend,
    Contrast,
    Guidance,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub step: usize,
    pub kind: InterventionKind,
    /// Empty for step-level events.
    pub layer_id: String,
    pub nominal_resolution: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InterventionLog {
    pub events: Vec<Intervention>,
}

impl InterventionLog {
    fn push(&mut self, step: usize, kind: InterventionKind, layer: Option<&LayerSpec>) {
        self.events.push(Intervention {
            step,
            kind,
            layer_id: layer.map(|l| l.layer_id.clone()).unwrap_or_default(),
            nominal_resolution: layer.map(|l| l.nominal_resolution),
        });
    }

    pub fn count(&self, kind: InterventionKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Steps at which `kind` fired, optionally restricted to one nominal resolution.
    pub fn steps(&self, kind: InterventionKind, nominal: Option<u32>) -> BTreeSet<usize> {
        self.events
            .iter()
            .filter(|e| e.kind == kind && (nominal.is_none() || e.nominal_resolution == nominal))
            .map(|e| e.step)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: usize,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub config_hash: String,
    pub seed: u64,
    pub caption: String,
    pub stage_millis: BTreeMap<String, f64>,
    pub step_timings: Vec<StepTiming>,
}

#[derive(Debug, Clone)]
pub struct SketchResult {
    pub image: Image,
    pub config: PipelineConfig,
    pub trace_meta: TraceMeta,
    /// Mask at the segmentation layer's resolution.
    pub foreground_mask: ForegroundMask,
    pub segmentation: Option<SegmentationState>,
    pub final_latent: Latent,
    pub interventions: InterventionLog,
    pub warnings: Vec<String>,
}

impl SketchResult {
    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        self.image.to_png_bytes()
    }

    /// SHA-256 of the PNG encoding.
    pub fn image_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.png_bytes()?)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Module {
    Dam,
    Spm,
    Sdpe,
    Csa,
}

impl Module {
    pub const ALL: [Module; 4] = [Module::Dam, Module::Spm, Module::Sdpe, Module::Csa];
}

impl fmt::Display for Module {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Module::Dam => "DAM",
            Module::Spm => "SPM",
            Module::Sdpe => "SDPE",
            Module::Csa => "CSA",
        })
    }
}

impl FromStr for Module {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DAM" => Ok(Module::Dam),
            "SPM" => Ok(Module::Spm),
            "SDPE" => Ok(Module::Sdpe),
            "CSA" => Ok(Module::Csa),
            _ => Err(Error::Domain(format!("unknown module {s:?}; expected DAM, SPM, SDPE or CSA"))),
        }
    }
}

/// Copy of `config` with the given modules neutralized.
pub fn ablate(config: &PipelineConfig, disable: &BTreeSet<Module>) -> PipelineConfig {
    let mut c = config.clone();
    for m in disable {
        match m {
            Module::Dam => c.dam_enabled = false,
            Module::Spm => {
                c.gamma = 0.0;
                c.lambda_sem = 0.0;
            }
            Module::Sdpe => {
                c.zeta = 1.0;
                c.beta_sg = 0.0;
                c.beta_text = 0.0;
            }
            Module::Csa => c.csa_enabled = false,
        }
    }
    c
}

/// [`ablate`] with modules given by name.
pub fn ablate_by_name<S: AsRef<str>>(config: &PipelineConfig, names: &[S]) -> Result<PipelineConfig> {
    let set = names
        .iter()
        .map(|n| n.as_ref().parse())
        .collect::<Result<BTreeSet<Module>>>()?;
    Ok(ablate(config, &set))
}

/// Everything disabled: the loop then replays the content inversion.
pub fn neutralized(config: &PipelineConfig) -> PipelineConfig {
    let mut c = ablate(config, &Module::ALL.into_iter().collect());
    c.alpha = 0.0;
    c
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces the segmentation result.
    pub mask_override: Option<ForegroundMask>,
}

pub fn generate_sketch(content: &Image, reference: &Image, config: &PipelineConfig, backends: &Backends) -> Result<SketchResult> {
    generate_with(content, reference, config, backends, &RunOptions::default())
}

/// Traces and bundle produced before the denoising loop.
pub struct Prepared {
    pub bundle: ImageBundle,
    pub content: InversionTrace,
    pub reference: InversionTrace,
    pub contour: InversionTrace,
    pub schedule: SamplerSchedule,
}

/// Contour extraction, captioning and the three inversions.
pub fn prepare(content: &Image, reference: &Image, config: &PipelineConfig, backends: &Backends) -> Result<Prepared> {
    config.validate()?;
    let diffusion = backends.diffusion.as_ref();
    let caps = diffusion.capabilities();

    let contour = (|| {
        let mut edges = backends.edge.detect(content)?;
        if config.contour_mask {
            let mask = backends.mask.salient_mask(content)?;
            if mask.dim() != edges.dim() {
                return Err(Error::shape("saliency mask vs edge map", format!("{:?}", edges.dim()), format!("{:?}", mask.dim())));
            }
            ndarray::Zip::from(&mut edges).and(&mask).for_each(|e, &m| {
                if !m {
                    *e = 0.0
                }
            });
        }
        Ok(contour_image(&edges).named("contour"))
    })()
    .stage("contour")?;
    let caption = backends.caption.caption(content).stage("caption")?;

    let schedule = SamplerSchedule::new(config.total_steps, config.skip_steps)?;
    let z_cnt = diffusion.encode(content).stage("encode content")?;
    let z_ref = diffusion.encode(reference).stage("encode reference")?;
    let z_cont = diffusion.encode(&contour).stage("encode contour")?;
    let layers: Vec<String> = caps.self_layers().map(|l| l.layer_id.clone()).collect();

    let invert = |z: &Latent, prompt: &str, role| invert_and_cache(z, &schedule, diffusion, prompt, config.seed, role, &layers);
    let (cnt, (refr, cont)) = rayon::join(
        || invert(&z_cnt, &caption, SourceRole::Content),
        || {
            rayon::join(
                || invert(&z_ref, "", SourceRole::Reference),
                || invert(&z_cont, "", SourceRole::Contour),
            )
        },
    );
    let cnt = cnt.stage("content inversion")?;
    let refr = refr.stage("reference inversion")?;
    let cont = cont.stage("contour inversion")?;

    let z_ske_t = cnt.latent_at(schedule.latent_index(schedule.first_step())).clone();
    Ok(Prepared {
        bundle: ImageBundle {
            content: content.clone(),
            reference: reference.clone(),
            contour,
            caption,
            z_ske_t,
        },
        content: cnt,
        reference: refr,
        contour: cont,
        schedule,
    })
}

pub fn generate_with(
    content: &Image,
    reference: &Image,
    config: &PipelineConfig,
    backends: &Backends,
    options: &RunOptions,
) -> Result<SketchResult> {
    let mut stage_millis = BTreeMap::new();
    let clock = Instant::now();
    let prepared = prepare(content, reference, config, backends)?;
    stage_millis.insert("prepare".to_string(), ms(clock));

    let mut warnings = Vec::new();
    if reference.variance() < BLANK_VARIANCE {
        warnings.push("reference image is blank; its keys and values carry no texture signal".to_string());
        log::warn!("{}", warnings.last().unwrap());
    }

    let clock = Instant::now();
    let diffusion = backends.diffusion.as_ref();
    let caps = diffusion.capabilities();
    let dam_layer = caps.layer_at(AttentionKind::SelfAttention, DAM_RESOLUTION)?;
    let (segmentation, mask) = match (&options.mask_override, config.dam_enabled) {
        (Some(m), _) => (None, m.resample(dam_layer.resolution)),
        (None, false) => (None, ForegroundMask::full(dam_layer.resolution)),
        (None, true) => {
            let window = config
                .injection_window(DAM_RESOLUTION)
                .unwrap_or(config.guidance_window);
            let params = DamParams {
                k_clusters: config.k_clusters,
                seed: config.seed,
                delta: config.delta,
                tau: config.tau,
                nominal_resolution: DAM_RESOLUTION,
            };
            let (state, mask) = segment(&prepared.content, diffusion, &prepared.bundle.caption, window, params).stage("segmentation")?;
            (Some(state), mask)
        }
    };
    stage_millis.insert("segmentation".to_string(), ms(clock));

    let layer_masks: BTreeMap<String, ForegroundMask> = caps
        .self_layers()
        .map(|l| (l.layer_id.clone(), mask.resample(l.resolution)))
        .collect();

    let clock = Instant::now();
    let (final_latent, interventions, step_timings) =
        denoise(&prepared, config, backends, &layer_masks).stage("denoising")?;
    stage_millis.insert("denoising".to_string(), ms(clock));

    let decoded = diffusion.decode(&final_latent).stage("decode")?;
    let image = decoded.resize(content.width(), content.height()).quantized();

    Ok(SketchResult {
        image,
        config: config.clone(),
        trace_meta: TraceMeta {
            config_hash: config.hash(),
            seed: config.seed,
            caption: prepared.bundle.caption.clone(),
            stage_millis,
            step_timings,
        },
        foreground_mask: mask,
        segmentation,
        final_latent,
        interventions,
        warnings,
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn denoise(
    prepared: &Prepared,
    config: &PipelineConfig,
    backends: &Backends,
    layer_masks: &BTreeMap<String, ForegroundMask>,
) -> Result<(Latent, InterventionLog, Vec<StepTiming>)> {
    let diffusion = backends.diffusion.as_ref();
    let schedule = &prepared.schedule;
    let caption = prepared.bundle.caption.as_str();
    let mut log = InterventionLog::default();
    let mut timings = Vec::new();
    let mut z = prepared.bundle.z_ske_t.clone();

    for step in schedule.first_step()..=schedule.total_steps() {
        let clock = Instant::now();
        let t = schedule.latent_index(step);
        let inputs = StepInputs {
            step,
            schedule,
            noise: prepared.content.noise_for(t),
            caption,
            beta_sg: config.beta_sg,
            beta_text: config.beta_text,
            guidance_window: config.guidance_window,
        };
        let mut hook = StrokeHook {
            step,
            t,
            config,
            reference: &prepared.reference,
            contour: &prepared.contour,
            masks: layer_masks,
            active: None,
            log: &mut log,
        };
        let (mut next, prediction) = dual_pass_step(&z, &inputs, diffusion, &mut hook)?;
        if prediction.guided {
            log.push(step, InterventionKind::Guidance, None);
        }
        if config.lambda_sem > 0.0 && config.semantic_window.contains(step) {
            let probe_seed = config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ step as u64;
            let grad = semantic_gradient(&next, diffusion, backends.score.as_ref(), caption, probe_seed)?;
            next = apply_semantic_guidance(&next, &grad, config.lambda_sem, step, config.semantic_window)?;
            log.push(step, InterventionKind::Semantic, None);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step,
                what: "latent".into(),
            });
        }
        z = next;
        timings.push(StepTiming { step, millis: ms(clock) });
    }
    Ok((z, log, timings))
}

/// State carried from `on_features` to `on_output` for one layer.
struct ActiveLayer {
    layer_id: String,
    /// Blended query and the live content K/V, used to recompute background rows.
    background: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
}

/// Mounts stroke attention, contour-query blending and contrast enhancement
/// on the self-attention layers whose injection window covers the step.
struct StrokeHook<'a> {
    step: usize,
    t: usize,
    config: &'a PipelineConfig,
    reference: &'a InversionTrace,
    contour: &'a InversionTrace,
    masks: &'a BTreeMap<String, ForegroundMask>,
    active: Option<ActiveLayer>,
    log: &'a mut InterventionLog,
}

impl StrokeHook<'_> {
    fn in_window(&self, layer: &LayerSpec) -> bool {
        layer.kind == AttentionKind::SelfAttention
            && self
                .config
                .injection_window(layer.nominal_resolution)
                .is_some_and(|w| w.contains(self.step))
    }
}

impl AttentionHook for StrokeHook<'_> {
    fn requested_layers(&self) -> Vec<String> {
        self.masks.keys().cloned().collect()
    }

    fn on_features(&mut self, site: HookSite<'_>, f: &mut AttentionFeatures) -> Result<()> {
        self.active = None;
        if !self.in_window(site.layer) {
            return Ok(());
        }
        let layer = site.layer;
        let mask = self
            .masks
            .get(&layer.layer_id)
            .ok_or_else(|| Error::Capability(format!("no foreground mask for layer {:?}", layer.layer_id)))?;
        let mut background = None;
        if self.config.csa_enabled {
            let cached = self.reference.features(&layer.layer_id, self.t);
            let (k_ref, v_ref) = match cached.map(|c| (c.k.as_ref(), c.v.as_ref())) {
                Some((Some(k), Some(v))) => (k, v),
                _ => {
                    return Err(Error::Capability(format!(
                        "no cached reference K/V at layer {:?}, step {}",
                        layer.layer_id, self.step
                    )))
                }
            };
            let (k_mix, v_mix) = mix_kv(k_ref, v_ref, &f.k, &f.v, self.config.alpha)?;
            let (k_gated, v_gated) = gate_kv_by_mask(&k_mix, &v_mix, &f.k, &f.v, mask)?;
            let k_cnt = std::mem::replace(&mut f.k, k_gated);
            let v_cnt = std::mem::replace(&mut f.v, v_gated);
            if !mask.is_full() {
                background = Some((k_cnt, v_cnt));
            }
            self.log.push(self.step, InterventionKind::KvInjection, Some(layer));
        }
        if self.config.gamma > 0.0 {
            let window = self
                .config
                .injection_window(layer.nominal_resolution)
                .expect("checked by in_window");
            f.q = inject_contour_query(self.step, self.t, &layer.layer_id, self.contour, &f.q, self.config.gamma, window)?;
            self.log.push(self.step, InterventionKind::QueryBlend, Some(layer));
        }
        self.active = Some(ActiveLayer {
            layer_id: layer.layer_id.clone(),
            background: background.map(|(k, v)| (f.q.clone(), k, v)),
        });
        Ok(())
    }

    fn on_weights(&mut self, site: HookSite<'_>, weights: &mut Array2<f64>) -> Result<()> {
        let active = self.active.as_ref().is_some_and(|a| a.layer_id == site.layer.layer_id);
        if active && self.config.zeta != 1.0 {
            *weights = enhance_contrast(weights, self.config.zeta)?;
            self.log.push(self.step, InterventionKind::Contrast, Some(site.layer));
        }
        Ok(())
    }

    fn on_output(&mut self, site: HookSite<'_>, output: &mut Array2<f64>) -> Result<()> {
        let Some(active) = self.active.take() else {
            return Ok(());
        };
        if active.layer_id != site.layer.layer_id {
            return Ok(());
        }
        // Background queries attend to the content keys and values only.
        if let Some((q, k_cnt, v_cnt)) = active.background {
            let mask = &self.masks[&active.layer_id];
            let mut w = attention_weights(q.view(), k_cnt.view())?;
            if self.config.zeta != 1.0 {
                w = enhance_contrast(&w, self.config.zeta)?;
            }
            let phi = attend(w.view(), v_cnt.view())?;
            for p in 0..mask.len() {
                if !mask.get(p) {
                    output.row_mut(p).assign(&phi.row(p));
                }
            }
        }
        Ok(())
    }
}
