//! Adapter boundary between the pipeline and the models it drives.
//!
//! The pipeline only talks to the traits in this module. [`toy`] provides a
//! small deterministic implementation of every trait so the whole system runs
//! and tests without model weights; [`sd_adapter`] is the mount point for a
//! real latent-diffusion model.

use std::sync::Arc;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionFeatures;
use crate::error::{Error, Result};
use crate::imaging::Image;

pub mod fixtures;
pub mod sd_adapter;
pub mod toy;

/// Latent tensor `[C × H × W]`.
pub type Latent = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    #[serde(rename = "self")]
    SelfAttention,
    #[serde(rename = "cross")]
    CrossAttention,
}

/// One attention site inside the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_id: String,
    /// Side length of the query grid at this layer.
    pub resolution: usize,
    /// The latent-diffusion resolution this layer stands in for (32 or 64).
    /// Injection windows are keyed by this value.
    pub nominal_resolution: u32,
    pub kind: AttentionKind,
}

impl LayerSpec {
    pub fn positions(&self) -> usize {
        self.resolution * self.resolution
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    /// `(C, H, W)`.
    pub latent_shape: (usize, usize, usize),
    pub attention_layers: Vec<LayerSpec>,
    pub supports_differentiable_decode: bool,
    pub model_name: String,
    pub thread_safe: bool,
}

impl BackendCapabilities {
    pub fn layer(&self, layer_id: &str) -> Result<&LayerSpec> {
        self.attention_layers
            .iter()
            .find(|l| l.layer_id == layer_id)
            .ok_or_else(|| Error::Capability(format!("backend {} has no attention layer {layer_id:?}", self.model_name)))
    }

    /// Self-attention layers in declaration order.
    pub fn self_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.attention_layers
            .iter()
            .filter(|l| l.kind == AttentionKind::SelfAttention)
    }

    /// The layer of `kind` standing in for latent-diffusion resolution `nominal`.
    pub fn layer_at(&self, kind: AttentionKind, nominal: u32) -> Result<&LayerSpec> {
        self.attention_layers
            .iter()
            .find(|l| l.kind == kind && l.nominal_resolution == nominal)
            .ok_or_else(|| {
                Error::Capability(format!(
                    "backend {} has no {kind:?} layer at nominal resolution {nominal}",
                    self.model_name
                ))
            })
    }

    pub fn check_latent(&self, z: &Latent) -> Result<()> {
        if z.dim() != self.latent_shape {
            return Err(Error::shape(
                "latent (C, H, W)",
                format!("{:?}", self.latent_shape),
                format!("{:?}", z.dim()),
            ));
        }
        Ok(())
    }
}

/// Where a hook is being invoked.
#[derive(Debug, Clone, Copy)]
pub struct HookSite<'a> {
    pub layer: &'a LayerSpec,
    /// Training-scale timestep of the forward call.
    pub timestep: usize,
}

/// Read/replace access to the attention computation at every declared layer.
///
/// For each declared layer and each `predict_noise` call the backend invokes,
/// in order, `on_features` (Q/K/V before attention), `on_weights` (the
/// row-softmaxed map) and `on_output` (`φ = A·V`), each exactly once.
pub trait AttentionHook {
    /// Layers this hook intends to act on. Every entry must be declared by
    /// the backend.
    fn requested_layers(&self) -> Vec<String> {
        Vec::new()
    }

    fn on_features(&mut self, _site: HookSite<'_>, _features: &mut AttentionFeatures) -> Result<()> {
        Ok(())
    }

    fn on_weights(&mut self, _site: HookSite<'_>, _weights: &mut Array2<f64>) -> Result<()> {
        Ok(())
    }

    fn on_output(&mut self, _site: HookSite<'_>, _output: &mut Array2<f64>) -> Result<()> {
        Ok(())
    }
}

/// A hook that observes nothing and changes nothing.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoHook;

impl AttentionHook for NoHook {}

pub trait DiffusionBackend: Send + Sync {
    fn capabilities(&self) -> &BackendCapabilities;

    /// Image to latent.
    fn encode(&self, image: &Image) -> Result<Latent>;

    /// Latent to an RGB image at the backend's native pixel size.
    fn decode(&self, z: &Latent) -> Result<Image>;

    /// Conditioning tokens for `prompt`, in the order the cross-attention
    /// keys are laid out.
    fn tokenize(&self, prompt: &str) -> Vec<String>;

    /// Noise prediction `ε_θ(z_t, t, c)` with `hooks` mounted at every
    /// attention layer.
    fn predict_noise(&self, z: &Latent, timestep: usize, prompt: &str, hooks: &mut dyn AttentionHook) -> Result<Latent>;

    /// Rejects hooks that request undeclared layers.
    fn check_hooks(&self, hooks: &dyn AttentionHook) -> Result<()> {
        let caps = self.capabilities();
        for id in hooks.requested_layers() {
            caps.layer(&id)?;
        }
        Ok(())
    }
}

pub trait EdgeBackend: Send + Sync {
    /// Edge response in `[0, 1]` as `[height × width]` (1 on a contour).
    fn detect(&self, image: &Image) -> Result<Array2<f64>>;
}

/// Renders an edge response as dark strokes on a light ground.
pub fn contour_image(response: &Array2<f64>) -> Image {
    Image::from_luma(&response.mapv(|r| 1.0 - r.clamp(0.0, 1.0)))
}

pub trait CaptionBackend: Send + Sync {
    fn caption(&self, image: &Image) -> Result<String>;
}

pub trait ScoreBackend: Send + Sync {
    /// Image–text similarity; higher means better aligned.
    fn similarity(&self, image: &Image, text: &str) -> Result<f64>;
}

pub trait MaskBackend: Send + Sync {
    /// Binary saliency mask `[height × width]`.
    fn salient_mask(&self, image: &Image) -> Result<Array2<bool>>;
}

/// Everything one generation needs.
#[derive(Clone)]
pub struct Backends {
    pub diffusion: Arc<dyn DiffusionBackend>,
    pub edge: Arc<dyn EdgeBackend>,
    pub caption: Arc<dyn CaptionBackend>,
    pub score: Arc<dyn ScoreBackend>,
    pub mask: Arc<dyn MaskBackend>,
}

impl Backends {
    pub fn toy() -> Self {
        Backends {
            diffusion: Arc::new(toy::ToyDiffusion::default()),
            edge: Arc::new(toy::ToyEdges),
            caption: Arc::new(toy::ToyCaptioner),
            score: Arc::new(toy::ToyScorer::default()),
            mask: Arc::new(toy::ToyMasker::default()),
        }
    }

    /// Resolves the `backend` config key.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "sd-adapter" => sd_adapter::load_from_env(),
            other => Err(Error::Config(format!("unknown backend {other:?}; expected \"toy\" or \"sd-adapter\""))),
        }
    }
}

/// FNV-1a, used wherever a platform-stable string hash seeds an RNG.
pub(crate) fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercased alphanumeric words.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .map(|w| w.trim_matches('\'').to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}
