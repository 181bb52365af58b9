//! Semantic preservation: contour-query injection and text-similarity
//! guidance of the evolving latent.

use ndarray::{Array2, Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::blend_query;
use crate::backends::{DiffusionBackend, Latent, ScoreBackend};
use crate::config::StepWindow;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::inversion::InversionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemanticGuidanceConfig {
    pub lambda_sem: f64,
    pub gamma: f64,
    pub guidance_window: StepWindow,
}

impl SemanticGuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sem.is_nan() || self.lambda_sem < 0.0 {
            return Err(Error::Domain(format!("lambda_sem must be non-negative, got {}", self.lambda_sem)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Domain(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// `λ · sim(image, prompt)`.
pub fn semantic_loss(image: &Image, prompt: &str, scorer: &dyn ScoreBackend, lambda_sem: f64) -> Result<f64> {
    if lambda_sem == 0.0 {
        return Ok(0.0);
    }
    let sim = scorer.similarity(image, prompt).map_err(|e| Error::Stage {
        stage: "semantic scorer",
        source: Box::new(e),
    })?;
    if !sim.is_finite() {
        return Err(Error::Backend(format!("scorer returned non-finite similarity {sim}")));
    }
    Ok(lambda_sem * sim)
}

/// `z + λ·grad` inside `window`, `z` unchanged outside it.
pub fn apply_semantic_guidance(
    z: &Latent,
    grad: &Latent,
    lambda_sem: f64,
    step: usize,
    window: StepWindow,
) -> Result<Latent> {
    if grad.dim() != z.dim() {
        return Err(Error::shape(
            "semantic gradient",
            format!("{:?}", z.dim()),
            format!("{:?}", grad.dim()),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            step,
            what: "semantic gradient".into(),
        });
    }
    if !window.contains(step) || lambda_sem == 0.0 {
        return Ok(z.clone());
    }
    Ok(Zip::from(z).and(grad).map_collect(|&a, &g| a + lambda_sem * g))
}

const PROBES: usize = 4;
const PROBE_STEP: f64 = 1e-2;

/// Two-point zeroth-order estimate of `∂ sim(decode(z), prompt) / ∂z`
/// averaged over a few fixed, seeded unit-RMS probe directions.
pub fn semantic_gradient(
    z: &Latent,
    backend: &dyn DiffusionBackend,
    scorer: &dyn ScoreBackend,
    prompt: &str,
    probe_seed: u64,
) -> Result<Latent> {
    let mut rng = ChaCha8Rng::seed_from_u64(probe_seed);
    let mut grad = Array3::<f64>::zeros(z.dim());
    for _ in 0..PROBES {
        let mut u = Array3::from_shape_simple_fn(z.dim(), || StandardNormal.sample(&mut rng));
        let rms = (u.iter().map(|v: &f64| v * v).sum::<f64>() / u.len() as f64).sqrt();
        u.mapv_inplace(|v| v / rms);
        let plus = z + &(&u * PROBE_STEP);
        let minus = z - &(&u * PROBE_STEP);
        let f_plus = scorer.similarity(&backend.decode(&plus)?, prompt)?;
        let f_minus = scorer.similarity(&backend.decode(&minus)?, prompt)?;
        let slope = (f_plus - f_minus) / (2.0 * PROBE_STEP);
        grad.scaled_add(slope / PROBES as f64, &u);
    }
    Ok(grad)
}

/// Blends the contour trace's cached query at `(layer, t)` into `current_q`
/// while `step` lies in `window`.
pub fn inject_contour_query(
    step: usize,
    t: usize,
    layer_id: &str,
    contour: &InversionTrace,
    current_q: &Array2<f64>,
    gamma: f64,
    window: StepWindow,
) -> Result<Array2<f64>> {
    if !window.contains(step) {
        return Ok(current_q.clone());
    }
    let q_cont = contour
        .features(layer_id, t)
        .and_then(|f| f.q.as_ref())
        .ok_or_else(|| Error::Capability(format!("no cached contour query at layer {layer_id:?}, t = {t}")))?;
    blend_query(q_cont, current_q, gamma)
}
