//! Edit-friendly DDPM inversion.
//!
//! Each intermediate latent is drawn independently from the forward marginal
//! of `z_0`; the noise map of every step is then solved from the sampler
//! update so that replaying the sampler from `z_T` with those maps lands on
//! the drawn latents, and finally on `z_0`. The same passes can record the
//! attention features the generation later injects.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionFeatures;
use crate::backends::{AttentionHook, DiffusionBackend, HookSite, Latent, NoHook};
use crate::error::{Error, Result};
use crate::schedule::SamplerSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceRole {
    Content,
    Reference,
    Contour,
}

impl SourceRole {
    /// Which of `(Q, K, V)` a trace of this role keeps.
    pub fn cached_kinds(self) -> (bool, bool, bool) {
        match self {
            SourceRole::Content | SourceRole::Contour => (true, false, false),
            SourceRole::Reference => (false, true, true),
        }
    }

    fn salt(self) -> u64 {
        match self {
            SourceRole::Content => 0x0063_6e74,
            SourceRole::Reference => 0x0072_6566,
            SourceRole::Contour => 0x636f_6e74,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CachedFeatures {
    pub q: Option<Array2<f64>>,
    pub k: Option<Array2<f64>>,
    pub v: Option<Array2<f64>>,
}

/// `(layer_id, latent index t)`.
pub type CacheKey = (String, usize);

#[derive(Debug, Clone)]
pub struct InversionTrace {
    /// `z_T, z_{T−1}, …, z_0`.
    pub latents: Vec<Latent>,
    /// Noise map consumed by each denoising step, in step order (`t = T` first).
    pub per_step_noise: Vec<Latent>,
    pub cached_features: BTreeMap<CacheKey, CachedFeatures>,
    pub source_role: SourceRole,
    pub schedule: SamplerSchedule,
    /// Text condition used for every noise prediction of this trace.
    pub prompt: String,
    pub seed: u64,
}

impl InversionTrace {
    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps()
    }

    /// Latent at index `t` (`t = T` is the noisiest).
    pub fn latent_at(&self, t: usize) -> &Latent {
        &self.latents[self.total_steps() - t]
    }

    /// Noise map of the `t → t−1` update.
    pub fn noise_for(&self, t: usize) -> &Latent {
        &self.per_step_noise[self.total_steps() - t]
    }

    pub fn z_t(&self) -> &Latent {
        &self.latents[0]
    }

    pub fn z_0(&self) -> &Latent {
        self.latents.last().expect("trace holds at least two latents")
    }

    pub fn features(&self, layer_id: &str, t: usize) -> Option<&CachedFeatures> {
        self.cached_features.get(&(layer_id.to_string(), t))
    }

    /// Number of cached `(Q, K, V)` tensors.
    pub fn cache_counts(&self) -> (usize, usize, usize) {
        self.cached_features.values().fold((0, 0, 0), |(q, k, v), f| {
            (
                q + f.q.is_some() as usize,
                k + f.k.is_some() as usize,
                v + f.v.is_some() as usize,
            )
        })
    }

    fn check_lengths(&self) -> Result<()> {
        let t = self.total_steps();
        if self.latents.len() != t + 1 {
            return Err(Error::shape("trace latents", t + 1, self.latents.len()));
        }
        if self.per_step_noise.len() != t {
            return Err(Error::shape("trace noise maps", t, self.per_step_noise.len()));
        }
        Ok(())
    }
}

/// Copies the role-relevant blocks at the requested layers.
struct FeatureRecorder {
    layers: Vec<String>,
    kinds: (bool, bool, bool),
    t: usize,
    out: BTreeMap<CacheKey, CachedFeatures>,
}

impl AttentionHook for FeatureRecorder {
    fn requested_layers(&self) -> Vec<String> {
        self.layers.clone()
    }

    fn on_features(&mut self, site: HookSite<'_>, f: &mut AttentionFeatures) -> Result<()> {
        if !self.layers.contains(&site.layer.layer_id) {
            return Ok(());
        }
        let (q, k, v) = self.kinds;
        let entry = CachedFeatures {
            q: q.then(|| f.q.clone()),
            k: k.then(|| f.k.clone()),
            v: v.then(|| f.v.clone()),
        };
        self.out.insert((site.layer.layer_id.clone(), self.t), entry);
        Ok(())
    }
}

fn check_finite(z: &Latent, step: usize, what: &str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric {
            step,
            what: what.to_string(),
        })
    }
}

/// Inverts `z_0` without caching attention features.
pub fn ddpm_invert(
    z_0: &Latent,
    schedule: &SamplerSchedule,
    backend: &dyn DiffusionBackend,
    prompt: &str,
    seed: u64,
    role: SourceRole,
) -> Result<InversionTrace> {
    invert_and_cache(z_0, schedule, backend, prompt, seed, role, &[])
}

/// Inverts `z_0` and, in the same denoiser passes, caches the features of
/// `role` at `layers`.
pub fn invert_and_cache(
    z_0: &Latent,
    schedule: &SamplerSchedule,
    backend: &dyn DiffusionBackend,
    prompt: &str,
    seed: u64,
    role: SourceRole,
    layers: &[String],
) -> Result<InversionTrace> {
    backend.capabilities().check_latent(z_0)?;
    for id in layers {
        backend.capabilities().layer(id)?;
    }
    check_finite(z_0, 0, "input latent z_0")?;
    let total = schedule.total_steps();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ role.salt());
    let shape = z_0.dim();

    // sampled[t] ~ q(z_t | z_0), sampled[0] = z_0
    let mut sampled = Vec::with_capacity(total + 1);
    sampled.push(z_0.clone());
    for t in 1..=total {
        let n = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
        sampled.push(schedule.forward_marginal(z_0, &n, t));
    }

    let mut recorder = FeatureRecorder {
        layers: layers.to_vec(),
        kinds: role.cached_kinds(),
        t: 0,
        out: BTreeMap::new(),
    };
    let mut latents = Vec::with_capacity(total + 1);
    let mut noise = Vec::with_capacity(total);
    let mut current = sampled[total].clone();
    for t in (1..=total).rev() {
        let step = total + 1 - t;
        recorder.t = t;
        let eps = if layers.is_empty() {
            backend.predict_noise(&current, schedule.timestep(t), prompt, &mut NoHook)?
        } else {
            backend.predict_noise(&current, schedule.timestep(t), prompt, &mut recorder)?
        };
        check_finite(&eps, step, "noise prediction")?;
        let u = schedule.solve_noise(&current, &eps, &sampled[t - 1], t);
        check_finite(&u, step, "solved noise map")?;
        // Continue from the replayed latent so replay follows the same chain.
        let next = schedule.step(&current, &eps, &u, t);
        latents.push(std::mem::replace(&mut current, next));
        noise.push(u);
    }
    latents.push(z_0.clone());

    Ok(InversionTrace {
        latents,
        per_step_noise: noise,
        cached_features: recorder.out,
        source_role: role,
        schedule: schedule.clone(),
        prompt: prompt.to_string(),
        seed,
    })
}

/// Re-runs the denoiser over the stored latents and caches the role's
/// features at `layers`. An empty layer list clears the cache.
pub fn cache_attention_features(
    mut trace: InversionTrace,
    backend: &dyn DiffusionBackend,
    layers: &[String],
) -> Result<InversionTrace> {
    trace.check_lengths()?;
    let mut recorder = FeatureRecorder {
        layers: layers.to_vec(),
        kinds: trace.source_role.cached_kinds(),
        t: 0,
        out: BTreeMap::new(),
    };
    backend.check_hooks(&recorder)?;
    if !layers.is_empty() {
        for t in (1..=trace.total_steps()).rev() {
            recorder.t = t;
            backend.predict_noise(trace.latent_at(t), trace.schedule.timestep(t), &trace.prompt, &mut recorder)?;
        }
    }
    trace.cached_features = recorder.out;
    Ok(trace)
}

/// Replays the sampler from `z_T` with the trace's noise maps.
pub fn replay_reconstruct(trace: &InversionTrace, backend: &dyn DiffusionBackend) -> Result<Latent> {
    trace.check_lengths()?;
    let caps = backend.capabilities();
    for z in &trace.latents {
        caps.check_latent(z)?;
    }
    for u in &trace.per_step_noise {
        caps.check_latent(u)?;
    }
    let total = trace.total_steps();
    let mut z = trace.z_t().clone();
    for t in (1..=total).rev() {
        let step = total + 1 - t;
        let eps = backend.predict_noise(&z, trace.schedule.timestep(t), &trace.prompt, &mut NoHook)?;
        z = trace.schedule.step(&z, &eps, trace.noise_for(t), t);
        check_finite(&z, step, "replayed latent")?;
    }
    Ok(z)
}

pub fn max_abs_diff(a: &Latent, b: &Latent) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceMeta {
    role: SourceRole,
    seed: u64,
    prompt: String,
    schedule: SamplerSchedule,
    latent_shape: (usize, usize, usize),
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    kind: String,
    layer: String,
    t: usize,
    rows: usize,
    cols: usize,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::shape(format!("{}", path.display()), expected * 4, bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

impl InversionTrace {
    /// Writes `meta.json` plus one little-endian f32 file per tensor, named
    /// `{kind}_{layer}_{t}.f32`. Latents use kind `latent` and noise maps kind
    /// `noise`, both with layer `z`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.check_lengths()?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let shape = self.z_0().dim();
        let latent_cols = shape.1 * shape.2;
        let mut tensors = Vec::new();
        let total = self.total_steps();
        for t in 0..=total {
            let name = format!("latent_z_{t}.f32");
            write_f32(&dir.join(name), self.latent_at(t).iter().copied())?;
            tensors.push(TensorEntry {
                kind: "latent".into(),
                layer: "z".into(),
                t,
                rows: shape.0,
                cols: latent_cols,
            });
        }
        for t in 1..=total {
            write_f32(&dir.join(format!("noise_z_{t}.f32")), self.noise_for(t).iter().copied())?;
            tensors.push(TensorEntry {
                kind: "noise".into(),
                layer: "z".into(),
                t,
                rows: shape.0,
                cols: latent_cols,
            });
        }
        for ((layer, t), f) in &self.cached_features {
            for (kind, m) in [("q", &f.q), ("k", &f.k), ("v", &f.v)] {
                if let Some(m) = m {
                    write_f32(&dir.join(format!("{kind}_{layer}_{t}.f32")), m.iter().copied())?;
                    tensors.push(TensorEntry {
                        kind: kind.into(),
                        layer: layer.clone(),
                        t: *t,
                        rows: m.nrows(),
                        cols: m.ncols(),
                    });
                }
            }
        }
        let meta = TraceMeta {
            role: self.source_role,
            seed: self.seed,
            prompt: self.prompt.clone(),
            schedule: self.schedule.clone(),
            latent_shape: shape,
            tensors,
        };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<InversionTrace> {
        let meta_path = dir.join("meta.json");
        if !meta_path.exists() {
            return Err(Error::MissingFile(meta_path));
        }
        let raw = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: TraceMeta = serde_json::from_slice(&raw)?;
        let total = meta.schedule.total_steps();
        let shape = meta.latent_shape;
        let n = shape.0 * shape.1 * shape.2;
        let mut latents = vec![None; total + 1];
        let mut noise = vec![None; total];
        let mut cached: BTreeMap<CacheKey, CachedFeatures> = BTreeMap::new();
        for e in &meta.tensors {
            let path = dir.join(format!("{}_{}_{}.f32", e.kind, e.layer, e.t));
            match e.kind.as_str() {
                "latent" | "noise" => {
                    let z = Array3::from_shape_vec(shape, read_f32(&path, n)?)
                        .map_err(|err| Error::shape("latent file", n, err))?;
                    if e.kind == "latent" && e.t <= total {
                        latents[total - e.t] = Some(z);
                    } else if e.kind == "noise" && (1..=total).contains(&e.t) {
                        noise[total - e.t] = Some(z);
                    }
                }
                "q" | "k" | "v" => {
                    let m = Array2::from_shape_vec((e.rows, e.cols), read_f32(&path, e.rows * e.cols)?)
                        .map_err(|err| Error::shape("feature file", e.rows * e.cols, err))?;
                    let slot = cached.entry((e.layer.clone(), e.t)).or_default();
                    match e.kind.as_str() {
                        "q" => slot.q = Some(m),
                        "k" => slot.k = Some(m),
                        _ => slot.v = Some(m),
                    }
                }
                other => return Err(Error::Config(format!("unknown tensor kind {other:?} in trace cache"))),
            }
        }
        let latents: Option<Vec<_>> = latents.into_iter().collect();
        let noise: Option<Vec<_>> = noise.into_iter().collect();
        let (Some(latents), Some(per_step_noise)) = (latents, noise) else {
            return Err(Error::Config(format!("trace cache {} is incomplete", dir.display())));
        };
        Ok(InversionTrace {
            latents,
            per_step_noise,
            cached_features: cached,
            source_role: meta.role,
            schedule: meta.schedule,
            prompt: meta.prompt,
            seed: meta.seed,
        })
    }
}
