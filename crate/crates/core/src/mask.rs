//! Sparse masks and the mask-level algorithms shared by server and clients:
//! mismatch metric, density re-calibration, sensitivity-driven
//! initialization, magnitude subsampling and nested sampling.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;

use crate::error::{FlashError, Result};
use crate::tensor::{Scalar, Tensor};

/// Binary mask of one weight tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl LayerMask {
    pub fn new(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(FlashError::Shape(format!(
                "mask shape {shape:?} needs {} entries, got {}",
                shape.iter().product::<usize>(),
                bits.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            bits,
        })
    }

    pub fn filled(shape: &[usize], live: bool) -> Self {
        Self {
            shape: shape.to_vec(),
            bits: vec![live; shape.iter().product()],
        }
    }

    /// Mask with exactly the positions in `live` set.
    pub fn from_indices(shape: &[usize], live: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::filled(shape, false);
        for i in live {
            m.bits[i] = true;
        }
        m
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub(crate) fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / self.len() as f64
    }

    pub fn live_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }
}

/// Per-layer binary masks, one per weight tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparseMask {
    layers: Vec<LayerMask>,
}

impl SparseMask {
    pub fn new(layers: Vec<LayerMask>) -> Self {
        Self { layers }
    }

    pub fn ones(shapes: &[Vec<usize>]) -> Self {
        Self::new(shapes.iter().map(|s| LayerMask::filled(s, true)).collect())
    }

    pub fn zeros(shapes: &[Vec<usize>]) -> Self {
        Self::new(shapes.iter().map(|s| LayerMask::filled(s, false)).collect())
    }

    pub fn layers(&self) -> &[LayerMask] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerMask] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn nnz(&self) -> usize {
        self.layers.iter().map(LayerMask::nnz).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerMask::len).sum()
    }

    pub fn density(&self) -> f64 {
        self.nnz() as f64 / self.total() as f64
    }

    pub fn layer_nnz(&self) -> Vec<usize> {
        self.layers.iter().map(LayerMask::nnz).collect()
    }

    pub fn layer_densities(&self) -> Vec<f64> {
        self.layers.iter().map(LayerMask::density).collect()
    }

    pub fn check_shapes(&self, shapes: &[Vec<usize>]) -> Result<()> {
        if self.layers.len() != shapes.len()
            || self.layers.iter().zip(shapes).any(|(m, s)| m.shape() != s.as_slice())
        {
            return Err(FlashError::Config(format!(
                "mask shapes {:?} do not match weight shapes {shapes:?}",
                self.layers.iter().map(|m| m.shape().to_vec()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    fn check_same_shape(&self, other: &SparseMask) -> Result<()> {
        let shapes: Vec<Vec<usize>> = other.layers.iter().map(|m| m.shape.clone()).collect();
        self.check_shapes(&shapes)
    }

    /// Every live position of `self` is live in `other`.
    pub fn is_subset_of(&self, other: &SparseMask) -> bool {
        self.check_same_shape(other).is_ok()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.bits.iter().zip(&b.bits).all(|(&x, &y)| !x || y))
    }
}

fn jaccard_counts(a: &LayerMask, b: &LayerMask) -> (usize, usize) {
    a.bits.iter().zip(&b.bits).fold((0, 0), |(i, u), (&x, &y)| {
        (i + (x && y) as usize, u + (x || y) as usize)
    })
}

fn jaccard_distance(inter: usize, union: usize) -> f64 {
    if union == 0 {
        0.0
    } else {
        1.0 - inter as f64 / union as f64
    }
}

/// Sparse mask mismatch: Jaccard distance between the live sets of two masks,
/// pooled over all layers. Zero when both masks are empty.
pub fn sparse_mask_mismatch(curr: &SparseMask, prev: &SparseMask) -> Result<f64> {
    curr.check_same_shape(prev)?;
    let (inter, union) = curr
        .layers
        .iter()
        .zip(&prev.layers)
        .map(|(a, b)| jaccard_counts(a, b))
        .fold((0, 0), |(i, u), (a, b)| (i + a, u + b));
    Ok(jaccard_distance(inter, union))
}

/// Mismatch restricted to weight layer `l`.
pub fn layer_sm(curr: &SparseMask, prev: &SparseMask, l: usize) -> Result<f64> {
    curr.check_same_shape(prev)?;
    let (a, b) = match (curr.layers.get(l), prev.layers.get(l)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(FlashError::Config(format!(
                "layer {l} out of range for {} layers",
                curr.layers.len()
            )))
        }
    };
    let (inter, union) = jaccard_counts(a, b);
    Ok(jaccard_distance(inter, union))
}

/// Mismatch of every layer.
pub fn layer_sms(curr: &SparseMask, prev: &SparseMask) -> Result<Vec<f64>> {
    (0..curr.num_layers()).map(|l| layer_sm(curr, prev, l)).collect()
}

/// Live count for a layer of `k` weights at density `d`: floor, at least one,
/// at most `k`. A relative guard of 1e-12 keeps values like 2.9999999999999996
/// from losing a whole weight to float rounding.
pub fn layer_count(d: f64, k: usize) -> usize {
    guarded_floor(d * k as f64).max(1).min(k)
}

pub(crate) fn guarded_floor(x: f64) -> usize {
    (x * (1.0 + 1e-12) + 1e-12).floor().max(0.0) as usize
}

/// Largest-remainder split of `total` proportionally to non-negative
/// `weights`; leftover units go to the largest fractional parts, lower index
/// first on ties. All-zero weights fall back to an even split.
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    if weights.is_empty() {
        return Vec::new();
    }
    let sum: f64 = weights.iter().sum();
    let raw: Vec<f64> = if sum > 0.0 && sum.is_finite() {
        weights.iter().map(|&w| w / sum * total as f64).collect()
    } else {
        vec![total as f64 / weights.len() as f64; weights.len()]
    };
    let mut out: Vec<usize> = raw.iter().map(|&r| r.floor() as usize).collect();
    let mut assigned: usize = out.iter().sum();
    // float noise can overshoot by a unit; take it back from the smallest fractions
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().rev() {
        if assigned <= total {
            break;
        }
        if out[j] > 0 {
            out[j] -= 1;
            assigned -= 1;
        }
    }
    for &j in order.iter().cycle().take(total - assigned) {
        out[j] += 1;
    }
    out
}

/// Re-calibrates averaged layer densities so the global live budget is
/// `d · K`: `d_c = d_hat · r_f` with `r_f = d·K / Σ d_hat·k`. Layers pushed
/// above density 1 are clamped to 1 and `r_f` is recomputed over the
/// remaining layers until nothing else needs clamping.
pub fn recalibrate_density(d_hat: &[f64], k: &[usize], d: f64) -> Result<Vec<f64>> {
    if d_hat.len() != k.len() || d_hat.is_empty() {
        return Err(FlashError::Config(format!(
            "{} layer densities for {} layer sizes",
            d_hat.len(),
            k.len()
        )));
    }
    if !(d > 0.0 && d <= 1.0) {
        return Err(FlashError::Config(format!("target density {d} outside (0, 1]")));
    }
    if d_hat.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(FlashError::Config(format!("layer densities {d_hat:?} outside [0, 1]")));
    }
    let total: usize = k.iter().sum();
    let budget = d * total as f64;
    if d_hat.iter().zip(k).map(|(&dh, &kl)| dh * kl as f64).sum::<f64>() <= 0.0 {
        return Err(FlashError::Infeasible("all layer densities are zero".into()));
    }
    let mut clamped = vec![false; k.len()];
    loop {
        let fixed: f64 = k
            .iter()
            .zip(&clamped)
            .filter(|(_, &c)| c)
            .map(|(&kl, _)| kl as f64)
            .sum();
        let free: f64 = d_hat
            .iter()
            .zip(k)
            .zip(&clamped)
            .filter(|(_, &c)| !c)
            .map(|((&dh, &kl), _)| dh * kl as f64)
            .sum();
        let remaining = budget - fixed;
        if free <= 0.0 {
            if remaining > 1e-9 * budget.max(1.0) {
                return Err(FlashError::Infeasible(format!(
                    "{remaining} weights left to place but no unclamped layer can take them"
                )));
            }
            return Ok(clamped.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect());
        }
        let r_f = remaining / free;
        let mut changed = false;
        for (l, c) in clamped.iter_mut().enumerate() {
            if !*c && d_hat[l] * r_f > 1.0 {
                *c = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(clamped
                .iter()
                .zip(d_hat)
                .map(|(&c, &dh)| if c { 1.0 } else { dh * r_f })
                .collect());
        }
    }
}

/// Random mask with `layer_count(d_c^l, k^l)` live positions per layer, chosen
/// uniformly.
pub fn init_sensitivity_mask<R: Rng + ?Sized>(d_c: &[f64], shapes: &[Vec<usize>], rng: &mut R) -> Result<SparseMask> {
    if d_c.len() != shapes.len() {
        return Err(FlashError::Config(format!(
            "{} densities for {} weight layers",
            d_c.len(),
            shapes.len()
        )));
    }
    if let Some(bad) = d_c.iter().find(|&&v| !(v > 0.0 && v <= 1.0)) {
        return Err(FlashError::Config(format!("layer density {bad} outside (0, 1]")));
    }
    let layers = d_c
        .iter()
        .zip(shapes)
        .map(|(&dl, shape)| {
            let k: usize = shape.iter().product();
            let n = layer_count(dl, k);
            LayerMask::from_indices(shape, index::sample(rng, k, n).into_iter())
        })
        .collect();
    Ok(SparseMask::new(layers))
}

/// Positions of a layer ordered by descending `|w|`; ties go to the larger
/// `support` value when given, then to the lower flat index.
pub fn magnitude_order<T: Scalar>(w: &[T], support: Option<&[f64]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| {
        let by_mag = w[b].abs().as_f64().total_cmp(&w[a].abs().as_f64());
        let by_support = support.map_or(Ordering::Equal, |s| s[b].total_cmp(&s[a]));
        by_mag.then(by_support).then(a.cmp(&b))
    });
    idx
}

/// Keeps the `layer_count(d_c^l, k^l)` largest-magnitude positions of each
/// layer (see [`magnitude_order`] for tie handling).
pub fn magnitude_subsample<T: Scalar>(
    weights: &[Tensor<T>],
    d_c: &[f64],
    support: Option<&[Vec<f64>]>,
) -> Result<SparseMask> {
    if d_c.len() != weights.len() || support.is_some_and(|s| s.len() != weights.len()) {
        return Err(FlashError::Config(format!(
            "{} densities for {} weight layers",
            d_c.len(),
            weights.len()
        )));
    }
    let layers = weights
        .iter()
        .enumerate()
        .map(|(l, w)| {
            let order = magnitude_order(w.data(), support.map(|s| s[l].as_slice()));
            let n = layer_count(d_c[l], w.len());
            LayerMask::from_indices(w.shape(), order[..n].iter().copied())
        })
        .collect();
    Ok(SparseMask::new(layers))
}

/// One top-magnitude mask per density in `d_set` (ascending). The server's
/// own layer densities `d_hat` are re-calibrated to each `d_i`, which scales
/// them by `d_i / D_s` (clamped at 1). Every mask takes a prefix of the same
/// per-layer ordering, so the masks are nested.
pub fn hetero_subsample<T: Scalar>(
    weights: &[Tensor<T>],
    d_set: &[f64],
    d_hat: &[f64],
    support: Option<&[Vec<f64>]>,
) -> Result<Vec<SparseMask>> {
    check_density_set(d_set)?;
    let k: Vec<usize> = weights.iter().map(Tensor::len).collect();
    let per_density: Vec<Vec<f64>> = d_set
        .iter()
        .map(|&di| recalibrate_density(d_hat, &k, di))
        .collect::<Result<_>>()?;
    let mut masks: Vec<Vec<LayerMask>> = vec![Vec::with_capacity(weights.len()); d_set.len()];
    for (l, w) in weights.iter().enumerate() {
        let order = magnitude_order(w.data(), support.map(|s| s[l].as_slice()));
        let mut prev = 0;
        for (i, d_c) in per_density.iter().enumerate() {
            // counts are monotone in d_i already; max() only guards rounding
            let n = layer_count(d_c[l], k[l]).max(prev);
            prev = n;
            masks[i].push(LayerMask::from_indices(w.shape(), order[..n].iter().copied()));
        }
    }
    Ok(masks.into_iter().map(SparseMask::new).collect())
}

pub fn check_density_set(d_set: &[f64]) -> Result<()> {
    if d_set.is_empty() {
        return Err(FlashError::Config("empty density set".into()));
    }
    if d_set.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
        return Err(FlashError::Config(format!("density set {d_set:?} has values outside (0, 1]")));
    }
    if d_set.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FlashError::Config(format!("density set {d_set:?} is not strictly ascending")));
    }
    Ok(())
}

/// Child mask drawn from a parent mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NestedSample {
    pub mask: SparseMask,
    /// Live positions requested by `d_c` that no layer of the parent could
    /// provide.
    pub shortfall: usize,
}

/// Samples a sub-mask of `parent` with `layer_count(d_c^l, k^l)` live
/// positions per layer, drawn uniformly from the parent's live set. A layer
/// asking for more than the parent holds is capped and the excess is moved to
/// later (then earlier) layers that still have parent positions to spare.
pub fn nested_mask_sample<R: Rng + ?Sized>(parent: &SparseMask, d_c: &[f64], rng: &mut R) -> Result<NestedSample> {
    if d_c.len() != parent.num_layers() {
        return Err(FlashError::Config(format!(
            "{} densities for {} mask layers",
            d_c.len(),
            parent.num_layers()
        )));
    }
    let avail = parent.layer_nnz();
    let mut target: Vec<usize> = d_c
        .iter()
        .zip(parent.layers())
        .map(|(&dl, m)| layer_count(dl, m.len()))
        .collect();
    let mut excess = 0;
    for (t, &a) in target.iter_mut().zip(&avail) {
        if *t > a {
            excess += *t - a;
            *t = a;
        }
    }
    for (t, &a) in target.iter_mut().zip(&avail) {
        if excess == 0 {
            break;
        }
        let take = (a - *t).min(excess);
        *t += take;
        excess -= take;
    }
    if excess > 0 {
        log::warn!("nested mask sample short by {excess} positions");
    }
    let layers = parent
        .layers()
        .iter()
        .zip(&target)
        .map(|(m, &n)| {
            let live = m.live_indices();
            let picked = index::sample(rng, live.len(), n).into_iter().map(|j| live[j]);
            LayerMask::from_indices(m.shape(), picked)
        })
        .collect();
    Ok(NestedSample {
        mask: SparseMask::new(layers),
        shortfall: excess,
    })
}
