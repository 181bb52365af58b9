//! Foreground selection from clustered self-attention and caption-noun
//! cross-attention.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::{AttentionHook, AttentionKind, DiffusionBackend, HookSite};
use crate::error::{Error, Result};
use crate::inversion::InversionTrace;
use crate::config::StepWindow;

/// Binary mask over a square grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForegroundMask {
    grid: Array2<bool>,
}

impl ForegroundMask {
    pub fn full(resolution: usize) -> Self {
        Self::from_fn(resolution, |_| true)
    }

    pub fn empty(resolution: usize) -> Self {
        Self::from_fn(resolution, |_| false)
    }

    /// `f` receives the row-major position `y·resolution + x`.
    pub fn from_fn(resolution: usize, f: impl Fn(usize) -> bool) -> Self {
        ForegroundMask {
            grid: Array2::from_shape_fn((resolution, resolution), |(y, x)| f(y * resolution + x)),
        }
    }

    pub fn from_grid(grid: Array2<bool>) -> Result<Self> {
        if grid.nrows() != grid.ncols() {
            return Err(Error::shape("mask grid", "square", format!("{:?}", grid.dim())));
        }
        Ok(ForegroundMask { grid })
    }

    pub fn resolution(&self) -> usize {
        self.grid.nrows()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.count() == self.len()
    }

    pub fn get(&self, p: usize) -> bool {
        let r = self.resolution();
        self.grid[[p / r, p % r]]
    }

    pub fn grid(&self) -> &Array2<bool> {
        &self.grid
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    /// `0/1` weights, row-major.
    pub fn weights(&self) -> Array2<f64> {
        self.grid.mapv(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn union(&self, other: &ForegroundMask) -> Result<ForegroundMask> {
        if self.resolution() != other.resolution() {
            return Err(Error::shape("mask resolution", self.resolution(), other.resolution()));
        }
        Ok(ForegroundMask {
            grid: ndarray::Zip::from(&self.grid)
                .and(&other.grid)
                .map_collect(|&a, &b| a || b),
        })
    }

    pub fn is_subset_of(&self, other: &ForegroundMask) -> bool {
        self.resolution() == other.resolution() && self.grid.iter().zip(other.grid.iter()).all(|(&a, &b)| !a || b)
    }

    /// Nearest-neighbour resample to another grid size.
    pub fn resample(&self, resolution: usize) -> ForegroundMask {
        let src = self.resolution();
        if src == resolution {
            return self.clone();
        }
        ForegroundMask {
            grid: Array2::from_shape_fn((resolution, resolution), |(y, x)| {
                let sy = ((y as f64 + 0.5) * src as f64 / resolution as f64).floor() as usize;
                let sx = ((x as f64 + 0.5) * src as f64 / resolution as f64).floor() as usize;
                self.grid[[sy.min(src - 1), sx.min(src - 1)]]
            }),
        }
    }

    /// Binary PGM (P5), one byte per cell, 0 or 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let r = self.resolution();
        let mut out = format!("P5\n{r} {r}\n255\n").into_bytes();
        out.extend(self.grid.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationState {
    /// Aggregated self-attention `[P × P]`.
    pub f_sa: Array2<f64>,
    pub cluster_masks: Vec<ForegroundMask>,
    /// Cross-attention map per noun over the `res × res` grid.
    pub noun_maps: BTreeMap<String, Array2<f64>>,
    /// `r(j, n)` keyed by `(cluster index, noun)`.
    pub relevance: BTreeMap<(usize, String), f64>,
}

impl SegmentationState {
    pub fn new(
        f_sa: Array2<f64>,
        cluster_masks: Vec<ForegroundMask>,
        noun_maps: BTreeMap<String, Array2<f64>>,
        delta: f64,
    ) -> Result<Self> {
        let mut relevance = BTreeMap::new();
        for (j, m) in cluster_masks.iter().enumerate() {
            for (noun, a) in &noun_maps {
                if a.iter().any(|&v| v < 0.0) {
                    return Err(Error::Domain(format!("cross-attention map for {noun:?} has negative entries")));
                }
                relevance.insert((j, noun.clone()), relevance_score(m, a, delta)?);
            }
        }
        Ok(SegmentationState {
            f_sa,
            cluster_masks,
            noun_maps,
            relevance,
        })
    }
}

/// Entrywise mean of same-shaped attention maps.
pub fn aggregate_self_attention(maps: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Domain("no self-attention maps to aggregate".into()))?;
    let mut acc = Array2::<f64>::zeros(first.dim());
    for m in maps {
        if m.dim() != first.dim() {
            return Err(Error::shape(
                "self-attention map",
                format!("{:?}", first.dim()),
                format!("{:?}", m.dim()),
            ));
        }
        acc += m;
    }
    acc.mapv_inplace(|v| v / maps.len() as f64);
    Ok(acc)
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: ndarray::ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.axis_iter(Axis(0)).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

const KMEANS_MAX_ITERS: usize = 100;

/// k-means (k-means++ seeding, Lloyd iterations) over the rows of `F_SA`.
/// Returns one mask per cluster; the masks partition the grid.
pub fn cluster_attention(f_sa: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<ForegroundMask>> {
    let p = f_sa.nrows();
    let res = (p as f64).sqrt().round() as usize;
    if res * res != p {
        return Err(Error::shape("F_SA rows", "a square pixel count", p));
    }
    if k < 2 {
        return Err(Error::Domain(format!("need at least 2 clusters, got {k}")));
    }
    if k > p {
        return Err(Error::Domain(format!("{k} clusters requested for {p} pixels")));
    }
    let assignment: Vec<usize> = if k == p {
        (0..p).collect()
    } else {
        kmeans(f_sa, k, seed)
    };
    Ok((0..k)
        .map(|j| ForegroundMask::from_fn(res, |pos| assignment[pos] == j))
        .collect())
}

fn kmeans(data: &Array2<f64>, k: usize, seed: u64) -> Vec<usize> {
    let (n, dim) = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::<f64>::zeros((k, dim));
    centers.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap_or(n - 1);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&data.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), centers.row(c)));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let (j, _) = nearest(data.row(i), &centers);
            if *slot != j {
                *slot = j;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            let mut row = sums.row_mut(a);
            row += &data.row(i);
            counts[a] += 1;
        }
        for (j, &count) in counts.iter().enumerate() {
            if count > 0 {
                let mut row = sums.row_mut(j);
                row /= count as f64;
                centers.row_mut(j).assign(&row);
            } else {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(data.row(a), centers.row(assignment[a]));
                        let db = sq_dist(data.row(b), centers.row(assignment[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap_or(0);
                centers.row_mut(j).assign(&data.row(far));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    assignment
}

/// `r = Σ M·A / (Σ M + δ)`.
pub fn relevance_score(mask: &ForegroundMask, noun_map: &Array2<f64>, delta: f64) -> Result<f64> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::Domain(format!("delta must be positive, got {delta}")));
    }
    if noun_map.dim() != mask.grid().dim() {
        return Err(Error::shape(
            "noun map vs cluster mask",
            format!("{:?}", mask.grid().dim()),
            format!("{:?}", noun_map.dim()),
        ));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&m, &a) in mask.grid().iter().zip(noun_map.iter()) {
        if m {
            num += a;
            den += 1.0;
        }
    }
    Ok(num / (den + delta))
}

/// Union of the clusters scoring strictly above `tau` for at least one noun.
/// Without nouns every cluster counts as foreground.
pub fn select_foreground(state: &SegmentationState, tau: f64) -> Result<ForegroundMask> {
    let first = state
        .cluster_masks
        .first()
        .ok_or_else(|| Error::Domain("segmentation has no clusters".into()))?;
    let res = first.resolution();
    if state.noun_maps.is_empty() {
        return Ok(ForegroundMask::full(res));
    }
    let mut out = ForegroundMask::empty(res);
    for (j, m) in state.cluster_masks.iter().enumerate() {
        let hit = state
            .noun_maps
            .keys()
            .any(|n| state.relevance.get(&(j, n.clone())).is_some_and(|&r| r > tau));
        if hit {
            out = out.union(m)?;
        }
    }
    Ok(out)
}

const CLOSED_CLASS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "no", "all", "both",
    "of", "on", "in", "at", "by", "for", "with", "without", "from", "to", "into", "onto", "over", "under",
    "above", "below", "near", "behind", "beside", "between", "through", "across", "against", "along", "around",
    "up", "down", "off", "out", "about", "and", "or", "but", "nor", "so", "yet", "as", "than", "while",
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "does", "do", "did",
    "it", "its", "he", "she", "they", "them", "his", "her", "their", "there", "here", "which", "who",
    "whom", "whose", "what", "where", "when", "very", "one", "two", "three", "four", "five",
];

/// Medium words captioners prepend ("a sketch of ...").
const MEDIUM_WORDS: &[&str] = &[
    "sketch", "sketches", "drawing", "drawings", "picture", "image", "photo", "photograph", "painting",
    "illustration", "rendering", "close-up", "view",
];

/// Caption nouns after dropping closed-class words, medium words and
/// numerals, in order of first appearance.
pub fn extract_nouns(caption: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in crate::backends::words(caption) {
        if CLOSED_CLASS.contains(&w.as_str()) || MEDIUM_WORDS.contains(&w.as_str()) || w.chars().all(|c| c.is_ascii_digit()) {
            continue;
        }
        if !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

/// Records self- and cross-attention weights at one grid resolution.
struct MapRecorder {
    self_layer: String,
    cross_layer: String,
    self_maps: Vec<Array2<f64>>,
    cross_maps: Vec<Array2<f64>>,
}

impl AttentionHook for MapRecorder {
    fn requested_layers(&self) -> Vec<String> {
        vec![self.self_layer.clone(), self.cross_layer.clone()]
    }

    fn on_weights(&mut self, site: HookSite<'_>, weights: &mut Array2<f64>) -> Result<()> {
        if site.layer.layer_id == self.self_layer {
            self.self_maps.push(weights.clone());
        } else if site.layer.layer_id == self.cross_layer {
            self.cross_maps.push(weights.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DamParams {
    pub k_clusters: usize,
    pub seed: u64,
    pub delta: f64,
    pub tau: f64,
    /// Latent-diffusion resolution whose layers are read (32).
    pub nominal_resolution: u32,
}

/// Runs the content trace through the denoiser over `window`, clusters the
/// averaged self-attention and scores clusters against caption nouns.
pub fn segment(
    trace: &InversionTrace,
    backend: &dyn DiffusionBackend,
    caption: &str,
    window: StepWindow,
    params: DamParams,
) -> Result<(SegmentationState, ForegroundMask)> {
    let caps = backend.capabilities();
    let self_layer = caps.layer_at(AttentionKind::SelfAttention, params.nominal_resolution)?.clone();
    let cross_layer = caps.layer_at(AttentionKind::CrossAttention, params.nominal_resolution)?.clone();
    let res = self_layer.resolution;
    let total = trace.total_steps();

    let mut recorder = MapRecorder {
        self_layer: self_layer.layer_id.clone(),
        cross_layer: cross_layer.layer_id.clone(),
        self_maps: Vec::new(),
        cross_maps: Vec::new(),
    };
    let steps: Vec<usize> = window.clamp_to(total).map(|w| w.steps().collect()).unwrap_or_default();
    let steps = if steps.is_empty() { (1..=total).collect() } else { steps };
    for step in steps {
        let t = trace.schedule.latent_index(step);
        backend.predict_noise(trace.latent_at(t), trace.schedule.timestep(t), caption, &mut recorder)?;
    }
    let f_sa = aggregate_self_attention(&recorder.self_maps)?;
    let cross = aggregate_self_attention(&recorder.cross_maps)?;

    let tokens = backend.tokenize(caption);
    let mut noun_maps = BTreeMap::new();
    for noun in extract_nouns(caption) {
        let Some(idx) = tokens.iter().position(|t| *t == noun) else {
            continue;
        };
        let col = cross.column(idx);
        let max = col.fold(0.0f64, |m, &v| m.max(v));
        let map = Array2::from_shape_fn((res, res), |(y, x)| {
            let v = col[y * res + x];
            if max > 0.0 {
                v / max
            } else {
                0.0
            }
        });
        noun_maps.insert(noun, map);
    }

    let k = params.k_clusters.min(res * res);
    let masks = cluster_attention(&f_sa, k, params.seed)?;
    let state = SegmentationState::new(f_sa, masks, noun_maps, params.delta)?;
    let mask = select_foreground(&state, params.tau)?;
    Ok((state, mask))
}
