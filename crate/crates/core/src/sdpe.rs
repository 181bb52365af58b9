//! Stroke-detail propagation: the three noise predictions per step and their
//! guided combination.

use ndarray::Zip;

use crate::backends::{AttentionHook, DiffusionBackend, Latent, NoHook};
use crate::config::StepWindow;
use crate::error::{Error, Result};
use crate::schedule::SamplerSchedule;

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePrediction {
    pub eps_self: Latent,
    pub eps_stroke: Latent,
    pub eps_text: Latent,
    pub eps_combined: Latent,
    /// Whether the cross-image passes ran at this step.
    pub guided: bool,
}

/// `ε = ε_self + β_sg(ε_stroke − ε_self) + β_text(ε_text − ε_self)`.
pub fn cfg_combine(
    eps_self: &Latent,
    eps_stroke: &Latent,
    eps_text: &Latent,
    beta_sg: f64,
    beta_text: f64,
) -> Result<Latent> {
    for (name, e) in [("eps_stroke", eps_stroke), ("eps_text", eps_text)] {
        if e.dim() != eps_self.dim() {
            return Err(Error::shape(
                format!("{name} vs eps_self"),
                format!("{:?}", eps_self.dim()),
                format!("{:?}", e.dim()),
            ));
        }
    }
    if !(beta_sg.is_finite() && beta_text.is_finite()) {
        return Err(Error::Domain("guidance scales must be finite".into()));
    }
    Ok(Zip::from(eps_self)
        .and(eps_stroke)
        .and(eps_text)
        .map_collect(|&s, &k, &t| s + beta_sg * (k - s) + beta_text * (t - s)))
}

/// Inputs of one denoising step that do not depend on the latent.
pub struct StepInputs<'a> {
    /// 1-based step index counted from `t = T`.
    pub step: usize,
    pub schedule: &'a SamplerSchedule,
    /// Noise map of this step from the content inversion.
    pub noise: &'a Latent,
    pub caption: &'a str,
    pub beta_sg: f64,
    pub beta_text: f64,
    pub guidance_window: StepWindow,
}

/// One denoising step. The vanilla pass (content caption, no hooks) gives
/// `ε_self`; inside the guidance window the cross-image pass runs with
/// `stroke_hook` mounted, unconditioned for `ε_stroke` and captioned for
/// `ε_text`, and the three are combined with [`cfg_combine`].
pub fn dual_pass_step(
    z: &Latent,
    inputs: &StepInputs<'_>,
    backend: &dyn DiffusionBackend,
    stroke_hook: &mut dyn AttentionHook,
) -> Result<(Latent, NoisePrediction)> {
    let t = inputs.schedule.latent_index(inputs.step);
    let timestep = inputs.schedule.timestep(t);
    let eps_self = backend.predict_noise(z, timestep, inputs.caption, &mut NoHook)?;
    let guided = inputs.guidance_window.contains(inputs.step) && (inputs.beta_sg != 0.0 || inputs.beta_text != 0.0);
    let prediction = if guided {
        let eps_stroke = backend.predict_noise(z, timestep, "", stroke_hook)?;
        let eps_text = backend.predict_noise(z, timestep, inputs.caption, stroke_hook)?;
        let eps_combined = cfg_combine(&eps_self, &eps_stroke, &eps_text, inputs.beta_sg, inputs.beta_text)?;
        NoisePrediction {
            eps_self,
            eps_stroke,
            eps_text,
            eps_combined,
            guided,
        }
    } else {
        NoisePrediction {
            eps_stroke: eps_self.clone(),
            eps_text: eps_self.clone(),
            eps_combined: eps_self.clone(),
            eps_self,
            guided,
        }
    };
    let next = inputs.schedule.step(z, &prediction.eps_combined, inputs.noise, t);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            step: inputs.step,
            what: "denoised latent".into(),
        });
    }
    Ok((next, prediction))
}
