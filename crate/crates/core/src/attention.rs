//! Attention mathematics shared by the backends and the injection hooks.
//!
//! Everything here is a pure function of its operands. Matrices are row-major
//! `Array2<f64>` with one row per query (or key) position.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::dam::ForegroundMask;
use crate::error::{Error, Result};

/// Projected query/key/value blocks at one layer, resolution and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFeatures {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub layer_id: String,
    /// Spatial side length of the query grid.
    pub resolution: usize,
    pub timestep: usize,
}

impl AttentionFeatures {
    pub fn new(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>) -> Result<Self> {
        let feats = AttentionFeatures {
            q,
            k,
            v,
            layer_id: String::new(),
            resolution: 0,
            timestep: 0,
        };
        feats.validate()?;
        Ok(feats)
    }

    /// Head dimension shared by queries and keys.
    pub fn d(&self) -> usize {
        self.q.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.ncols() != self.k.ncols() {
            return Err(Error::shape("head dimension d (Q vs K)", self.q.ncols(), self.k.ncols()));
        }
        if self.k.nrows() != self.v.nrows() {
            return Err(Error::shape("key count n_k (K vs V)", self.k.nrows(), self.v.nrows()));
        }
        if self.q.ncols() == 0 {
            return Err(Error::Domain("head dimension d must be positive".into()));
        }
        if self.k.nrows() == 0 {
            return Err(Error::Domain("at least one key is required".into()));
        }
        let finite = |m: &Array2<f64>| m.iter().all(|x| x.is_finite());
        if !(finite(&self.q) && finite(&self.k) && finite(&self.v)) {
            return Err(Error::Domain("attention features contain non-finite entries".into()));
        }
        Ok(())
    }
}

/// Row-normalized attention weights together with the attended outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    /// `[n_q × n_k]`, every row on the probability simplex.
    pub a: Array2<f64>,
    /// `[n_q × d_v]`.
    pub phi: Array2<f64>,
}

/// `softmax(Q·Kᵀ/√d)` row by row.
pub fn attention_weights(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape("head dimension d (Q vs K)", q.ncols(), k.ncols()));
    }
    if q.ncols() == 0 {
        return Err(Error::Domain("head dimension d must be positive".into()));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x * scale);
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    Ok(logits)
}

/// `φ = A·V`.
pub fn attend(weights: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<Array2<f64>> {
    if weights.ncols() != v.nrows() {
        return Err(Error::shape("key count n_k (A vs V)", weights.ncols(), v.nrows()));
    }
    Ok(weights.dot(&v))
}

pub fn scaled_attention(feat: &AttentionFeatures) -> Result<AttentionMap> {
    feat.validate()?;
    let a = attention_weights(feat.q.view(), feat.k.view())?;
    let phi = attend(a.view(), feat.v.view())?;
    Ok(AttentionMap { a, phi })
}

fn same_shape(axis: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(axis, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// `K_ske = K_ref + α·K_cnt`, `V_ske = V_ref + α·V_cnt`.
pub fn mix_kv(
    k_ref: &Array2<f64>,
    v_ref: &Array2<f64>,
    k_cnt: &Array2<f64>,
    v_cnt: &Array2<f64>,
    alpha: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    same_shape("keys (K_ref vs K_cnt)", k_ref, k_cnt)?;
    same_shape("values (V_ref vs V_cnt)", v_ref, v_cnt)?;
    if !alpha.is_finite() {
        return Err(Error::Domain(format!("alpha must be finite, got {alpha}")));
    }
    let k = Zip::from(k_ref).and(k_cnt).map_collect(|&r, &c| r + alpha * c);
    let v = Zip::from(v_ref).and(v_cnt).map_collect(|&r, &c| r + alpha * c);
    Ok((k, v))
}

/// Convex blend `γ·Q_cont + (1−γ)·Q_ske`.
pub fn blend_query(q_cont: &Array2<f64>, q_ske: &Array2<f64>, gamma: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    same_shape("queries (Q_cont vs Q_ske)", q_cont, q_ske)?;
    if gamma == 0.0 {
        return Ok(q_ske.clone());
    }
    if gamma == 1.0 {
        return Ok(q_cont.clone());
    }
    Ok(Zip::from(q_cont)
        .and(q_ske)
        .map_collect(|&c, &s| gamma * c + (1.0 - gamma) * s))
}

/// Sharpens each attention row around its mean: `(a − μ)·ζ + μ`, then clips
/// negatives and renormalizes the row back onto the simplex.
///
/// `μ` is the per-row mean over keys and `ζ` is a constant gain.
pub fn enhance_contrast(weights: &Array2<f64>, zeta: f64) -> Result<Array2<f64>> {
    if !(zeta > 0.0 && zeta.is_finite()) {
        return Err(Error::Domain(format!("zeta must be positive, got {zeta}")));
    }
    let mut out = weights.clone();
    if zeta == 1.0 {
        return Ok(out);
    }
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mu = row.mean().unwrap_or(0.0);
        row.mapv_inplace(|a| ((a - mu) * zeta + mu).max(0.0));
        let sum = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|a| a / sum);
        }
    }
    Ok(out)
}

/// Same as [`enhance_contrast`] but with `φ` recomputed from the sharpened
/// weights.
pub fn enhance_map(map: &AttentionMap, zeta: f64, v: &Array2<f64>) -> Result<AttentionMap> {
    let a = enhance_contrast(&map.a, zeta)?;
    let phi = attend(a.view(), v.view())?;
    Ok(AttentionMap { a, phi })
}

/// Row `p` of the gated keys/values comes from the mixed blocks when the
/// mask covers position `p`, and from the content blocks otherwise.
pub fn gate_kv_by_mask(
    k_ske: &Array2<f64>,
    v_ske: &Array2<f64>,
    k_cnt: &Array2<f64>,
    v_cnt: &Array2<f64>,
    mask: &ForegroundMask,
) -> Result<(Array2<f64>, Array2<f64>)> {
    same_shape("keys (K_ske vs K_cnt)", k_ske, k_cnt)?;
    same_shape("values (V_ske vs V_cnt)", v_ske, v_cnt)?;
    if mask.len() != k_ske.nrows() {
        return Err(Error::shape(
            "mask resolution vs key grid",
            format!("{} positions", k_ske.nrows()),
            format!("{}x{} = {} positions", mask.resolution(), mask.resolution(), mask.len()),
        ));
    }
    if k_ske.nrows() != v_ske.nrows() {
        return Err(Error::shape("key count n_k (K vs V)", k_ske.nrows(), v_ske.nrows()));
    }
    let mut k = k_cnt.clone();
    let mut v = v_cnt.clone();
    for p in 0..mask.len() {
        if mask.get(p) {
            k.row_mut(p).assign(&k_ske.row(p));
            v.row_mut(p).assign(&v_ske.row(p));
        }
    }
    Ok((k, v))
}
