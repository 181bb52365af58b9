//! Deterministic stand-ins for every backend.
//!
//! The toy denoiser is the Gaussian-prior optimal predictor `√(1−ᾱ_t)·z`
//! plus a residual read from the outputs of three pre-normalized attention
//! layers:
//!
//! | layer     | grid  | stands in for | kind  |
//! |-----------|-------|---------------|-------|
//! | `self16`  | 16×16 | 64×64         | self  |
//! | `self8`   | 8×8   | 32×32         | self  |
//! | `cross8`  | 8×8   | 32×32         | cross |
//!
//! All weights are drawn once from a seeded ChaCha stream, so outputs are a
//! pure function of `(weights_seed, inputs)`.

use ndarray::{s, Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    stable_hash, words, AttentionHook, AttentionKind, BackendCapabilities, CaptionBackend, DiffusionBackend,
    EdgeBackend, HookSite, LayerSpec, Latent, MaskBackend, ScoreBackend,
};
use crate::attention::{attend, attention_weights, AttentionFeatures};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::schedule::train_alphas_cumprod;

const CHANNELS: usize = 3;
const LATENT_SIDE: usize = 16;
const LOW_SIDE: usize = 8;
const MODEL_DIM: usize = 16;
const HEAD_DIM: usize = 8;
const PIXEL_SCALE: usize = 2;
const RESIDUAL_GAIN: f64 = 0.15;
/// Temperature on attention logits; random projections are otherwise too flat.
const LOGIT_GAIN: f64 = 2.5;

pub const DEFAULT_WEIGHTS_SEED: u64 = 0x5eed_5ce7c4;

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    })
}

/// Row-wise standardization without affine parameters.
fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.mean().unwrap_or(0.0);
        let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0);
        let inv = 1.0 / (var + 1e-6).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

struct AttentionBlock {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
}

impl AttentionBlock {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let s_in = LOGIT_GAIN.sqrt() / (MODEL_DIM as f64).sqrt();
        AttentionBlock {
            wq: gaussian_matrix(rng, MODEL_DIM, HEAD_DIM, s_in),
            wk: gaussian_matrix(rng, MODEL_DIM, HEAD_DIM, s_in),
            wv: gaussian_matrix(rng, MODEL_DIM, HEAD_DIM, 1.0 / (MODEL_DIM as f64).sqrt()),
            wo: gaussian_matrix(rng, HEAD_DIM, MODEL_DIM, 1.0 / (HEAD_DIM as f64).sqrt()),
        }
    }

    /// Runs the block with the hook mounted and returns the residual `φ·W_o`.
    fn forward(
        &self,
        layer: &LayerSpec,
        timestep: usize,
        queries_from: &Array2<f64>,
        keys_from: &Array2<f64>,
        hooks: &mut dyn AttentionHook,
    ) -> Result<Array2<f64>> {
        let site = HookSite { layer, timestep };
        let mut feats = AttentionFeatures {
            q: queries_from.dot(&self.wq),
            k: keys_from.dot(&self.wk),
            v: keys_from.dot(&self.wv),
            layer_id: layer.layer_id.clone(),
            resolution: layer.resolution,
            timestep,
        };
        let dims = (feats.q.dim(), feats.k.dim(), feats.v.dim());
        hooks.on_features(site, &mut feats)?;
        if (feats.q.dim(), feats.k.dim(), feats.v.dim()) != dims {
            return Err(Error::shape(
                format!("hooked features at {}", layer.layer_id),
                format!("{dims:?}"),
                format!("{:?}", (feats.q.dim(), feats.k.dim(), feats.v.dim())),
            ));
        }
        let mut weights = attention_weights(feats.q.view(), feats.k.view())?;
        let wdim = weights.dim();
        hooks.on_weights(site, &mut weights)?;
        if weights.dim() != wdim {
            return Err(Error::shape(
                format!("hooked attention map at {}", layer.layer_id),
                format!("{wdim:?}"),
                format!("{:?}", weights.dim()),
            ));
        }
        let mut phi = attend(weights.view(), feats.v.view())?;
        let pdim = phi.dim();
        hooks.on_output(site, &mut phi)?;
        if phi.dim() != pdim {
            return Err(Error::shape(
                format!("hooked attention output at {}", layer.layer_id),
                format!("{pdim:?}"),
                format!("{:?}", phi.dim()),
            ));
        }
        Ok(phi.dot(&self.wo))
    }
}

/// Two self-attention blocks and one cross-attention block with a linear head.
pub struct ToyDiffusion {
    caps: BackendCapabilities,
    weights_seed: u64,
    w_in: Array2<f64>,
    pos: Array2<f64>,
    w_time: Array2<f64>,
    hi: AttentionBlock,
    lo: AttentionBlock,
    cross: AttentionBlock,
    head: Array2<f64>,
}

impl Default for ToyDiffusion {
    fn default() -> Self {
        Self::new(DEFAULT_WEIGHTS_SEED)
    }
}

impl ToyDiffusion {
    pub fn new(weights_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
        let w_in = gaussian_matrix(&mut rng, CHANNELS, MODEL_DIM, 1.0);
        let pos_proj = gaussian_matrix(&mut rng, 4, MODEL_DIM, 0.5);
        let pos_feats = Array2::from_shape_fn((LATENT_SIDE * LATENT_SIDE, 4), |(p, j)| {
            let (y, x) = ((p / LATENT_SIDE) as f64, (p % LATENT_SIDE) as f64);
            let w = std::f64::consts::PI / LATENT_SIDE as f64;
            match j {
                0 => (x * w).sin(),
                1 => (x * w).cos(),
                2 => (y * w).sin(),
                _ => (y * w).cos(),
            }
        });
        let pos = pos_feats.dot(&pos_proj);
        let w_time = gaussian_matrix(&mut rng, MODEL_DIM, MODEL_DIM, 0.3 / (MODEL_DIM as f64).sqrt());
        let hi = AttentionBlock::new(&mut rng);
        let lo = AttentionBlock::new(&mut rng);
        let cross = AttentionBlock::new(&mut rng);
        let head = gaussian_matrix(&mut rng, MODEL_DIM, CHANNELS, RESIDUAL_GAIN / (MODEL_DIM as f64).sqrt());
        let layer = |id: &str, resolution, nominal, kind| LayerSpec {
            layer_id: id.into(),
            resolution,
            nominal_resolution: nominal,
            kind,
        };
        let caps = BackendCapabilities {
            latent_shape: (CHANNELS, LATENT_SIDE, LATENT_SIDE),
            attention_layers: vec![
                layer("self16", LATENT_SIDE, 64, AttentionKind::SelfAttention),
                layer("self8", LOW_SIDE, 32, AttentionKind::SelfAttention),
                layer("cross8", LOW_SIDE, 32, AttentionKind::CrossAttention),
            ],
            supports_differentiable_decode: false,
            model_name: format!("toy-denoiser-{weights_seed:x}"),
            thread_safe: true,
        };
        ToyDiffusion {
            caps,
            weights_seed,
            w_in,
            pos,
            w_time,
            hi,
            lo,
            cross,
            head,
        }
    }

    fn time_embedding(&self, timestep: usize) -> Array1<f64> {
        let half = MODEL_DIM / 2;
        let raw = Array1::from_shape_fn(MODEL_DIM, |j| {
            let freq = (-(10_000f64.ln()) * (j % half) as f64 / half as f64).exp();
            let arg = timestep as f64 * freq;
            if j < half {
                arg.sin()
            } else {
                arg.cos()
            }
        });
        raw.dot(&self.w_time)
    }

    /// Token embeddings `[n_tokens × D]`, seeded per token string.
    pub fn embed_tokens(&self, tokens: &[String]) -> Array2<f64> {
        let mut out = Array2::zeros((tokens.len(), MODEL_DIM));
        for (i, tok) in tokens.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(tok) ^ self.weights_seed);
            for j in 0..MODEL_DIM {
                let v: f64 = StandardNormal.sample(&mut rng);
                out[[i, j]] = v;
            }
        }
        out
    }

    fn tokens_of(z: &Latent) -> Array2<f64> {
        let (c, h, w) = z.dim();
        Array2::from_shape_fn((h * w, c), |(p, ch)| z[[ch, p / w, p % w]])
    }

    fn pool(x: &Array2<f64>) -> Array2<f64> {
        let f = LATENT_SIDE / LOW_SIDE;
        let mut out = Array2::zeros((LOW_SIDE * LOW_SIDE, x.ncols()));
        for p in 0..LATENT_SIDE * LATENT_SIDE {
            let (y, x_) = (p / LATENT_SIDE, p % LATENT_SIDE);
            let q = (y / f) * LOW_SIDE + x_ / f;
            let mut row = out.row_mut(q);
            row += &x.row(p);
        }
        out.mapv_inplace(|v| v / (f * f) as f64);
        out
    }

    fn upsample(x: &Array2<f64>) -> Array2<f64> {
        let f = LATENT_SIDE / LOW_SIDE;
        Array2::from_shape_fn((LATENT_SIDE * LATENT_SIDE, x.ncols()), |(p, j)| {
            let (y, x_) = (p / LATENT_SIDE, p % LATENT_SIDE);
            x[[(y / f) * LOW_SIDE + x_ / f, j]]
        })
    }
}

impl DiffusionBackend for ToyDiffusion {
    fn capabilities(&self) -> &BackendCapabilities {
        &self.caps
    }

    fn encode(&self, image: &Image) -> Result<Latent> {
        if image.is_empty() {
            return Err(Error::Domain("cannot encode an empty image".into()));
        }
        let small = image.to_rgb().resize(LATENT_SIDE, LATENT_SIDE);
        Ok(Array3::from_shape_fn((CHANNELS, LATENT_SIDE, LATENT_SIDE), |(c, y, x)| {
            2.0 * small.get(x, y, c) - 1.0
        }))
    }

    fn decode(&self, z: &Latent) -> Result<Image> {
        self.caps.check_latent(z)?;
        let small = Image::from_fn(LATENT_SIDE, LATENT_SIDE, CHANNELS, |x, y, c| {
            ((z[[c, y, x]] + 1.0) / 2.0).clamp(0.0, 1.0)
        });
        Ok(small.resize(LATENT_SIDE * PIXEL_SCALE, LATENT_SIDE * PIXEL_SCALE))
    }

    fn tokenize(&self, prompt: &str) -> Vec<String> {
        std::iter::once("<bos>".to_string()).chain(words(prompt)).collect()
    }

    fn predict_noise(&self, z: &Latent, timestep: usize, prompt: &str, hooks: &mut dyn AttentionHook) -> Result<Latent> {
        self.caps.check_latent(z)?;
        self.check_hooks(hooks)?;
        let alphas = train_alphas_cumprod();
        let t = timestep.min(alphas.len() - 1);
        let layers = &self.caps.attention_layers;

        let x = Self::tokens_of(z);
        let mut h0 = x.dot(&self.w_in) + &self.pos;
        h0 += &self.time_embedding(t);

        let n0 = layer_norm(&h0);
        let h1 = &h0 + &self.hi.forward(&layers[0], t, &n0, &n0, hooks)?;
        let g0 = Self::pool(&h1);
        let m0 = layer_norm(&g0);
        let g1 = &g0 + &self.lo.forward(&layers[1], t, &m0, &m0, hooks)?;
        let text = self.embed_tokens(&self.tokenize(prompt));
        let g2 = &g1 + &self.cross.forward(&layers[2], t, &layer_norm(&g1), &text, hooks)?;
        let h2 = &h1 + &Self::upsample(&(&g2 - &g0));

        let mut residual = (&h2 - &h0).dot(&self.head);
        for mut col in residual.columns_mut() {
            let mean = col.mean().unwrap_or(0.0);
            col -= mean;
        }
        let prior = (1.0 - alphas[t]).sqrt();
        let (c, hh, ww) = z.dim();
        let eps = Array3::from_shape_fn((c, hh, ww), |(ch, y, xx)| {
            prior * z[[ch, y, xx]] + residual[[y * ww + xx, ch]]
        });
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                step: timestep,
                what: "toy noise prediction".into(),
            });
        }
        Ok(eps)
    }
}

/// Forward-difference gradient magnitude thresholded at 0.2.
#[derive(Debug, Default, Clone, Copy)]
pub struct ToyEdges;

pub const EDGE_THRESHOLD: f64 = 0.2;

impl EdgeBackend for ToyEdges {
    fn detect(&self, image: &Image) -> Result<Array2<f64>> {
        if image.is_empty() {
            return Err(Error::Domain("cannot detect edges on an empty image".into()));
        }
        let l = image.luma();
        let (h, w) = l.dim();
        Ok(Array2::from_shape_fn((h, w), |(y, x)| {
            let gx = if x + 1 < w { l[[y, x + 1]] - l[[y, x]] } else { 0.0 };
            let gy = if y + 1 < h { l[[y + 1, x]] - l[[y, x]] } else { 0.0 };
            if (gx * gx + gy * gy).sqrt() > EDGE_THRESHOLD {
                1.0
            } else {
                0.0
            }
        }))
    }
}

/// Fixed caption table keyed by fixture name.
#[derive(Debug, Default, Clone, Copy)]
pub struct ToyCaptioner;

pub const FALLBACK_CAPTION: &str = "an object";

pub fn fixture_caption(name: &str) -> Option<&'static str> {
    match name {
        "dog" => Some("a sketch of a dog"),
        "cat" => Some("a sketch of a cat"),
        "house" => Some("a sketch of a house with a roof"),
        "face" => Some("a sketch of a face"),
        _ => None,
    }
}

impl CaptionBackend for ToyCaptioner {
    fn caption(&self, image: &Image) -> Result<String> {
        if image.is_empty() {
            return Err(Error::Backend("cannot caption an empty image".into()));
        }
        Ok(image
            .name
            .as_deref()
            .and_then(fixture_caption)
            .unwrap_or(FALLBACK_CAPTION)
            .to_string())
    }
}

/// Cosine between pooled image statistics and a seeded bag-of-words text
/// embedding.
#[derive(Debug, Clone, Copy)]
pub struct ToyScorer {
    pub seed: u64,
}

pub const SCORE_DIM: usize = 8;

impl Default for ToyScorer {
    fn default() -> Self {
        ToyScorer { seed: 0x0005_c04e }
    }
}

impl ToyScorer {
    /// Centered per-channel means and deviations, mean gradient magnitude
    /// and centered mean luma.
    pub fn embed_image(&self, image: &Image) -> [f64; SCORE_DIM] {
        let rgb = image.to_rgb();
        let n = (rgb.width() * rgb.height()) as f64;
        let mut out = [0.0; SCORE_DIM];
        for c in 0..3 {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for y in 0..rgb.height() {
                for x in 0..rgb.width() {
                    let v = rgb.get(x, y, c);
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / n;
            out[c] = mean - 0.5;
            out[3 + c] = (sq / n - mean * mean).max(0.0).sqrt();
        }
        let l = rgb.luma();
        let (h, w) = l.dim();
        let mut grad = 0.0;
        for y in 0..h {
            for x in 0..w {
                let gx = if x + 1 < w { l[[y, x + 1]] - l[[y, x]] } else { 0.0 };
                let gy = if y + 1 < h { l[[y + 1, x]] - l[[y, x]] } else { 0.0 };
                grad += (gx * gx + gy * gy).sqrt();
            }
        }
        out[6] = grad / n;
        out[7] = l.mean().unwrap_or(0.5) - 0.5;
        out
    }

    pub fn embed_text(&self, text: &str) -> [f64; SCORE_DIM] {
        let mut out = [0.0; SCORE_DIM];
        for w in words(text) {
            let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&w) ^ self.seed);
            for o in out.iter_mut() {
                let v: f64 = StandardNormal.sample(&mut rng);
                *o += v;
            }
        }
        out
    }
}

/// Cosine similarity, zero when either side vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl ScoreBackend for ToyScorer {
    fn similarity(&self, image: &Image, text: &str) -> Result<f64> {
        if image.is_empty() {
            return Err(Error::Backend("cannot score an empty image".into()));
        }
        Ok(cosine(&self.embed_image(image), &self.embed_text(text)))
    }
}

/// Threshold on 3×3 local luma variance.
#[derive(Debug, Clone, Copy)]
pub struct ToyMasker {
    pub threshold: f64,
}

impl Default for ToyMasker {
    fn default() -> Self {
        ToyMasker { threshold: 1e-3 }
    }
}

impl MaskBackend for ToyMasker {
    fn salient_mask(&self, image: &Image) -> Result<Array2<bool>> {
        if image.is_empty() {
            return Err(Error::Domain("cannot mask an empty image".into()));
        }
        let l = image.luma();
        let (h, w) = l.dim();
        Ok(Array2::from_shape_fn((h, w), |(y, x)| {
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let win = l.slice(s![y0..=y1, x0..=x1]);
            let mean = win.mean().unwrap_or(0.0);
            let var = win.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / win.len() as f64;
            var > self.threshold
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::NoHook;
    use ndarray::Array3;

    struct Counting {
        features: Vec<String>,
        weights: Vec<String>,
        outputs: Vec<String>,
    }

    impl AttentionHook for Counting {
        fn on_features(&mut self, site: HookSite<'_>, _f: &mut AttentionFeatures) -> Result<()> {
            self.features.push(site.layer.layer_id.clone());
            Ok(())
        }
        fn on_weights(&mut self, site: HookSite<'_>, _w: &mut Array2<f64>) -> Result<()> {
            self.weights.push(site.layer.layer_id.clone());
            Ok(())
        }
        fn on_output(&mut self, site: HookSite<'_>, _o: &mut Array2<f64>) -> Result<()> {
            self.outputs.push(site.layer.layer_id.clone());
            Ok(())
        }
    }

    struct SelfReplace;
    impl AttentionHook for SelfReplace {
        fn on_features(&mut self, _site: HookSite<'_>, f: &mut AttentionFeatures) -> Result<()> {
            let (k, v) = (f.k.clone(), f.v.clone());
            f.k = k;
            f.v = v;
            Ok(())
        }
    }

    struct Undeclared;
    impl AttentionHook for Undeclared {
        fn requested_layers(&self) -> Vec<String> {
            vec!["mid64".into()]
        }
    }

    fn latent(seed: u64) -> Latent {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 16, 16), |_| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn zero_latent_prediction_is_deterministic() {
        let a = ToyDiffusion::default();
        let b = ToyDiffusion::default();
        let z = Array3::zeros((3, 16, 16));
        let e1 = a.predict_noise(&z, 500, "", &mut NoHook).unwrap();
        let e2 = b.predict_noise(&z, 500, "", &mut NoHook).unwrap();
        assert_eq!(e1, e2);
        assert!(e1.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn every_hook_point_called_once_per_call() {
        let m = ToyDiffusion::default();
        let mut hook = Counting {
            features: vec![],
            weights: vec![],
            outputs: vec![],
        };
        m.predict_noise(&latent(1), 10, "a dog", &mut hook).unwrap();
        let ids = vec!["self16".to_string(), "self8".into(), "cross8".into()];
        assert_eq!(hook.features, ids);
        assert_eq!(hook.weights, ids);
        assert_eq!(hook.outputs, ids);
    }

    #[test]
    fn non_intervening_hooks_leave_output_unchanged() {
        let m = ToyDiffusion::default();
        let z = latent(2);
        let plain = m.predict_noise(&z, 300, "a dog", &mut NoHook).unwrap();
        let mut counting = Counting {
            features: vec![],
            weights: vec![],
            outputs: vec![],
        };
        assert_eq!(m.predict_noise(&z, 300, "a dog", &mut counting).unwrap(), plain);
        assert_eq!(m.predict_noise(&z, 300, "a dog", &mut SelfReplace).unwrap(), plain);
    }

    #[test]
    fn undeclared_layer_is_a_capability_error() {
        let m = ToyDiffusion::default();
        let err = m.predict_noise(&latent(3), 10, "", &mut Undeclared).unwrap_err();
        assert!(matches!(err, Error::Capability(_)));
    }

    #[test]
    fn wrong_latent_shape_rejected() {
        let m = ToyDiffusion::default();
        let z = Array3::zeros((3, 8, 8));
        assert!(matches!(m.predict_noise(&z, 10, "", &mut NoHook), Err(Error::Shape { .. })));
    }

    #[test]
    fn text_conditioning_changes_prediction() {
        let m = ToyDiffusion::default();
        let z = latent(4);
        let a = m.predict_noise(&z, 300, "", &mut NoHook).unwrap();
        let b = m.predict_noise(&z, 300, "a sketch of a dog", &mut NoHook).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn encode_decode_round_trip_at_native_size() {
        let m = ToyDiffusion::default();
        let img = Image::from_fn(32, 32, 3, |x, y, c| ((x / 2 + y / 2 + c) % 5) as f64 / 4.0);
        let back = m.decode(&m.encode(&img).unwrap()).unwrap();
        assert_eq!((back.width(), back.height(), back.channels()), (32, 32, 3));
    }

    #[test]
    fn edges_constant_step_checker() {
        let e = ToyEdges;
        let flat = Image::from_fn(8, 8, 1, |_, _, _| 0.4);
        assert!(e.detect(&flat).unwrap().iter().all(|&v| v == 0.0));

        let step = Image::from_fn(8, 6, 1, |x, _, _| if x >= 4 { 1.0 } else { 0.0 });
        let r = e.detect(&step).unwrap();
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(r[[y, x]], if x == 3 { 1.0 } else { 0.0 }, "({x},{y})");
            }
        }

        let checker = Image::from_fn(8, 8, 1, |x, y, _| ((x / 2 + y / 2) % 2) as f64);
        let r = e.detect(&checker).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let boundary = (x % 2 == 1 && x + 1 < 8) || (y % 2 == 1 && y + 1 < 8);
                assert_eq!(r[[y, x]] == 1.0, boundary, "({x},{y})");
            }
        }

        let empty = Image::new(0, 0, 1, vec![]).unwrap();
        assert!(e.detect(&empty).is_err());
    }

    #[test]
    fn captions_by_fixture() {
        let c = ToyCaptioner;
        let img = Image::from_fn(4, 4, 3, |_, _, _| 0.5);
        assert_eq!(c.caption(&img.clone().named("dog")).unwrap(), "a sketch of a dog");
        assert_eq!(c.caption(&img.clone().named("dog")).unwrap(), c.caption(&img.clone().named("dog")).unwrap());
        assert_eq!(c.caption(&img.named("zebra-unknown")).unwrap(), "an object");
    }

    #[test]
    fn scorer_matches_external_cosine() {
        let s = ToyScorer::default();
        let img = Image::from_fn(6, 6, 3, |x, y, c| ((x + y + c) % 3) as f64 / 2.0);
        let got = s.similarity(&img, "a sketch of a dog").unwrap();
        let a = s.embed_image(&img);
        let b = s.embed_text("a sketch of a dog");
        let dot: f64 = (0..SCORE_DIM).map(|i| a[i] * b[i]).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((got - dot / (na * nb)).abs() < 1e-9);
        assert_eq!(got, s.similarity(&img, "a sketch of a dog").unwrap());
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
    }

    #[test]
    fn masker_cases() {
        let m = ToyMasker::default();
        let flat = Image::from_fn(16, 16, 1, |_, _, _| 0.3);
        assert!(m.salient_mask(&flat).unwrap().iter().all(|&b| !b));

        let square = Image::from_fn(16, 16, 1, |x, y, _| {
            if (4..12).contains(&x) && (4..12).contains(&y) {
                ((x + y) % 2) as f64
            } else {
                0.5
            }
        });
        let mask = m.salient_mask(&square).unwrap();
        for y in 4..12 {
            for x in 4..12 {
                assert!(mask[[y, x]]);
            }
        }
        assert!(!mask[[0, 0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<f64> = (0..256).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let noise = Image::new(16, 16, 1, samples).unwrap();
        assert!(m.salient_mask(&noise).unwrap().iter().all(|&b| b));
    }
}
