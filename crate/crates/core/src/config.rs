//! Generation parameters.
//!
//! Config files are TOML with flat keys named after the [`PipelineConfig`]
//! fields; every key is optional and falls back to the defaults below.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Inclusive range of 1-based denoising steps, written `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct StepWindow {
    pub start: usize,
    pub end: usize,
}

impl From<[usize; 2]> for StepWindow {
    fn from([start, end]: [usize; 2]) -> Self {
        StepWindow { start, end }
    }
}

impl From<StepWindow> for [usize; 2] {
    fn from(w: StepWindow) -> Self {
        [w.start, w.end]
    }
}

impl StepWindow {
    pub const fn new(start: usize, end: usize) -> Self {
        StepWindow { start, end }
    }

    pub fn contains(&self, step: usize) -> bool {
        self.start <= step && step <= self.end
    }

    pub fn steps(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    /// Intersection with `[1, total]`, if non-empty.
    pub fn clamp_to(&self, total: usize) -> Option<StepWindow> {
        let start = self.start.max(1);
        let end = self.end.min(total);
        (start <= end).then_some(StepWindow { start, end })
    }

    fn check(&self, name: &str, total: usize) -> Result<()> {
        if self.start < 1 || self.start > self.end || self.end > total {
            return Err(Error::Config(format!(
                "{name} [{}, {}] must satisfy 1 <= start <= end <= total_steps ({total})",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

mod window_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<u32, StepWindow>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let named: BTreeMap<String, StepWindow> = map.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        named.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<u32, StepWindow>, D::Error> {
        let named = BTreeMap::<String, StepWindow>::deserialize(d)?;
        named
            .into_iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|r| (r, v))
                    .map_err(|_| serde::de::Error::custom(format!("injection window key {k:?} is not a resolution")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Content weight in the key/value mix.
    pub alpha: f64,
    /// Contour query blend.
    pub gamma: f64,
    /// Attention contrast gain.
    pub zeta: f64,
    pub beta_sg: f64,
    pub beta_text: f64,
    pub lambda_sem: f64,
    pub delta: f64,
    /// Foreground relevance threshold.
    pub tau: f64,
    pub k_clusters: usize,
    pub total_steps: usize,
    pub skip_steps: usize,
    /// Nominal attention resolution → steps where features are injected.
    #[serde(with = "window_map")]
    pub injection_windows: BTreeMap<u32, StepWindow>,
    pub guidance_window: StepWindow,
    pub semantic_window: StepWindow,
    pub seed: u64,
    pub backend: String,
    /// Restrict contours to the salient region before inversion.
    pub contour_mask: bool,
    /// When false the foreground mask covers the whole grid.
    pub dam_enabled: bool,
    /// When false the stroke pass keeps its own keys and values.
    pub csa_enabled: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            alpha: 0.5,
            gamma: 0.25,
            zeta: 1.67,
            beta_sg: 5.0,
            beta_text: 0.1,
            lambda_sem: 0.1,
            delta: 1e-5,
            tau: 0.35,
            k_clusters: 5,
            total_steps: 100,
            skip_steps: 30,
            injection_windows: BTreeMap::from([(32, StepWindow::new(10, 70)), (64, StepWindow::new(10, 90))]),
            guidance_window: StepWindow::new(20, 100),
            semantic_window: StepWindow::new(20, 100),
            seed: 42,
            backend: "toy".into(),
            contour_mask: true,
            dam_enabled: true,
            csa_enabled: true,
        }
    }
}

impl PipelineConfig {
    /// The 50-step variant: every step count halved.
    pub fn fifty_step() -> Self {
        Self::default().with_total_steps(50)
    }

    /// Copy with `total_steps` set to `n` and the skip count and every step
    /// window rescaled proportionally.
    pub fn with_total_steps(&self, n: usize) -> Self {
        let old = self.total_steps.max(1);
        if n == old || n == 0 {
            return PipelineConfig {
                total_steps: n,
                ..self.clone()
            };
        }
        let scale = |w: StepWindow| {
            let start = (w.start * n).div_ceil(old).max(1);
            StepWindow::new(start, (w.end * n / old).max(start))
        };
        PipelineConfig {
            total_steps: n,
            skip_steps: (self.skip_steps * n / old).min(n - 1),
            injection_windows: self.injection_windows.iter().map(|(&r, &w)| (r, scale(w))).collect(),
            guidance_window: scale(self.guidance_window),
            semantic_window: scale(self.semantic_window),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 || self.total_steps > crate::schedule::TRAIN_TIMESTEPS {
            return bad(format!("total_steps must be in 1..=1000, got {}", self.total_steps));
        }
        if self.skip_steps >= self.total_steps {
            return bad(format!(
                "skip_steps ({}) must be below total_steps ({})",
                self.skip_steps, self.total_steps
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return bad(format!("zeta must be positive, got {}", self.zeta));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must be in (0, 1), got {}", self.tau));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.lambda_sem >= 0.0 && self.lambda_sem.is_finite()) {
            return bad(format!("lambda_sem must be non-negative, got {}", self.lambda_sem));
        }
        for (name, v) in [("alpha", self.alpha), ("beta_sg", self.beta_sg), ("beta_text", self.beta_text)] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        if self.k_clusters < 2 {
            return bad(format!("k_clusters must be at least 2, got {}", self.k_clusters));
        }
        for (res, w) in &self.injection_windows {
            w.check(&format!("injection window @{res}"), self.total_steps)?;
        }
        self.guidance_window.check("guidance_window", self.total_steps)?;
        self.semantic_window.check("semantic_window", self.total_steps)?;
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML config, a JSON config, or a `result.json` sidecar (whose
    /// `config` field is used).
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let mut value: serde_json::Value = serde_json::from_str(&text)?;
            if let Some(inner) = value.get_mut("config") {
                value = inner.take();
            }
            let cfg: PipelineConfig = serde_json::from_value(value)?;
            cfg.validate()?;
            Ok(cfg)
        } else {
            Self::from_toml_str(&text)
        }
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Returns a copy with field `name` set to `value`, validated.
    pub fn with_field(&self, name: &str, value: serde_json::Value) -> Result<Self> {
        let mut obj = serde_json::to_value(self)?;
        let map = obj.as_object_mut().expect("config is a JSON object");
        if !map.contains_key(name) {
            return Err(Error::Config(format!("unknown config field {name:?}")));
        }
        map.insert(name.to_string(), value);
        let cfg: PipelineConfig =
            serde_json::from_value(obj).map_err(|e| Error::Config(format!("invalid value for {name}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn injection_window(&self, nominal_resolution: u32) -> Option<StepWindow> {
        self.injection_windows.get(&nominal_resolution).copied()
    }
}
