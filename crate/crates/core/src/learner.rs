//! Client-side dynamic sparse learning: masked SGD epochs with magnitude
//! pruning and rank-proportional regrowth.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{FlashError, Result};
use crate::mask::{apportion, guarded_floor, init_sensitivity_mask, SparseMask};
use crate::model::{MaskedModel, ModelSpec, WeightGrad};
use crate::tensor::Scalar;

/// Per-layer live fractions and layer sizes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityProfile {
    pub densities: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SensitivityProfile {
    pub fn new(densities: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if densities.len() != counts.len() {
            return Err(FlashError::Shape(format!(
                "{} densities for {} layers",
                densities.len(),
                counts.len()
            )));
        }
        if let Some(d) = densities.iter().find(|d| !(0.0..=1.0).contains(*d)) {
            return Err(FlashError::Config(format!("layer density {d} outside [0, 1]")));
        }
        Ok(Self { densities, counts })
    }

    pub fn from_mask(mask: &SparseMask) -> Self {
        Self {
            densities: mask.layer_densities(),
            counts: mask.layers().iter().map(|m| m.len()).collect(),
        }
    }

    /// Overall live fraction `Σ d^l k^l / Σ k^l`.
    pub fn overall_density(&self) -> f64 {
        let total: usize = self.counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.densities
            .iter()
            .zip(&self.counts)
            .map(|(&d, &k)| d * k as f64)
            .sum::<f64>()
            / total as f64
    }
}

pub fn compute_sensitivity<T: Scalar>(model: &MaskedModel<T>) -> SensitivityProfile {
    SensitivityProfile::from_mask(model.mask())
}

/// Uniform-density random mask: every layer gets `layer_count(d, k^l)` live
/// positions.
pub fn init_random_mask<R: Rng + ?Sized>(spec: &ModelSpec, d: f64, rng: &mut R) -> Result<SparseMask> {
    if !(d > 0.0 && d <= 1.0) {
        return Err(FlashError::Config(format!("density {d} outside (0, 1]")));
    }
    let shapes = spec.weight_shapes();
    init_sensitivity_mask(&vec![d; shapes.len()], &shapes, rng)
}

/// Masks out the `⌊p_r · nnz_l⌋` smallest-magnitude live weights of every
/// layer (lowest index first on ties), never emptying a layer. Returns the
/// new mask and the per-layer pruned counts; weights are not touched.
pub fn prune_step<T: Scalar>(model: &MaskedModel<T>, p_r: f64) -> (SparseMask, Vec<usize>) {
    let mut mask = model.mask().clone();
    let mut pruned = Vec::with_capacity(mask.num_layers());
    for (m, w) in mask.layers_mut().iter_mut().zip(model.weights()) {
        let mut live = m.live_indices();
        let n = guarded_floor(p_r * live.len() as f64).min(live.len().saturating_sub(1));
        let w = w.data();
        live.sort_by(|&a, &b| w[a].abs().partial_cmp(&w[b].abs()).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        let bits = m.bits_mut();
        for &i in &live[..n] {
            bits[i] = false;
        }
        pruned.push(n);
    }
    (mask, pruned)
}

/// Share of the total live magnitude held by each layer; uniform when every
/// live weight is zero.
pub fn rank_layers<T: Scalar>(model: &MaskedModel<T>) -> Vec<f64> {
    let sums: Vec<f64> = model
        .weights()
        .iter()
        .zip(model.mask().layers())
        .map(|(w, m)| {
            w.data()
                .iter()
                .zip(m.bits())
                .filter(|(_, &live)| live)
                .map(|(v, _)| v.abs().as_f64())
                .sum()
        })
        .collect();
    let total: f64 = sums.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return vec![1.0 / sums.len() as f64; sums.len()];
    }
    sums.iter().map(|s| s / total).collect()
}

/// Within-layer choice of which masked positions to revive.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum RegrowthCriterion {
    /// Mean absolute gradient over the finished epoch.
    #[default]
    GradientMean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Regrowth {
    pub mask: SparseMask,
    pub grown: Vec<usize>,
    /// Budget that found no masked slot anywhere.
    pub shortfall: usize,
}

/// Per-layer regrowth counts: largest-remainder quotas of `budget` by
/// `scores`, capped at each layer's free slots. Overflow cascades to the
/// next layer in rank order (score descending, then index), with a second
/// sweep for whatever is still unplaced.
pub fn regrow_counts(scores: &[f64], free: &[usize], budget: usize) -> (Vec<usize>, usize) {
    let quotas = apportion(budget, scores);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut grown = vec![0; scores.len()];
    let mut carry = 0;
    for &l in &order {
        let want = quotas[l] + carry;
        grown[l] = want.min(free[l]);
        carry = want - grown[l];
    }
    for &l in &order {
        let take = carry.min(free[l] - grown[l]);
        grown[l] += take;
        carry -= take;
    }
    (grown, carry)
}

/// Revives `budget` masked positions. Layer counts come from
/// [`regrow_counts`]; inside a layer the masked positions with the largest
/// `grad_mags` win, lowest index first on ties.
pub fn regrow(mask: &SparseMask, grad_mags: &[Vec<f64>], scores: &[f64], budget: usize) -> Result<Regrowth> {
    let layers = mask.num_layers();
    if grad_mags.len() != layers || scores.len() != layers {
        return Err(FlashError::Shape(format!(
            "{} gradient layers and {} scores for {layers} mask layers",
            grad_mags.len(),
            scores.len()
        )));
    }
    if let Some((l, _)) = grad_mags.iter().zip(mask.layers()).enumerate().find(|(_, (g, m))| g.len() != m.len()) {
        return Err(FlashError::Shape(format!("gradient magnitudes of layer {l} have the wrong length")));
    }
    let free: Vec<usize> = mask.layers().iter().map(|m| m.len() - m.nnz()).collect();
    let (grown, shortfall) = regrow_counts(scores, &free, budget);
    if shortfall > 0 {
        log::warn!("regrow: {shortfall} of {budget} weights found no free slot");
    }
    let mut out = mask.clone();
    for ((m, g), &n) in out.layers_mut().iter_mut().zip(grad_mags).zip(&grown) {
        if n == 0 {
            continue;
        }
        let bits = m.bits_mut();
        let mut dead: Vec<usize> = (0..bits.len()).filter(|&i| !bits[i]).collect();
        dead.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));
        for &i in &dead[..n] {
            bits[i] = true;
        }
    }
    Ok(Regrowth {
        mask: out,
        grown,
        shortfall,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DnrConfig {
    pub lr: f64,
    pub prune_rate: f64,
    pub batch_size: usize,
    pub criterion: RegrowthCriterion,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
    pub pruned: usize,
    pub grown: usize,
    pub shortfall: usize,
}

/// One shuffled pass of masked SGD over `shard` (indices into `data`), then,
/// unless `freeze_mask` is set, prune + rank + regrow.
///
/// Weights that stay live keep their values, newly grown positions start at
/// zero, and a position pruned and regrown in the same step counts as never
/// having left.
pub fn dnr_epoch<T: Scalar, R: Rng + ?Sized>(
    model: &mut MaskedModel<T>,
    data: &Dataset,
    shard: &[usize],
    cfg: &DnrConfig,
    freeze_mask: bool,
    rng: &mut R,
) -> Result<EpochStats> {
    if shard.is_empty() {
        return Err(FlashError::EmptyData("client shard is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(FlashError::Config("batch size must be positive".into()));
    }
    if !(cfg.prune_rate > 0.0 && cfg.prune_rate < 1.0) {
        return Err(FlashError::Config(format!("prune rate {} outside (0, 1)", cfg.prune_rate)));
    }
    let mut order = shard.to_vec();
    order.shuffle(rng);
    let lr = T::from_f64(cfg.lr);
    let mode = if freeze_mask { WeightGrad::LiveOnly } else { WeightGrad::Dense };
    let mut grad_sum: Vec<Vec<f64>> = if freeze_mask {
        Vec::new()
    } else {
        model.weights().iter().map(|w| vec![0.0; w.len()]).collect()
    };
    let mut stats = EpochStats::default();
    let mut loss_sum = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let (batch, labels) = data.gather::<T>(chunk);
        let (loss, grads) = model.loss_and_backward_with(&batch, &labels, mode)?;
        loss_sum += loss.as_f64();
        stats.batches += 1;
        for (acc, g) in grad_sum.iter_mut().zip(&grads.weights) {
            for (a, &v) in acc.iter_mut().zip(g.data()) {
                *a += v.abs().as_f64();
            }
        }
        model.sgd_step(&grads, lr);
    }
    stats.mean_loss = loss_sum / stats.batches as f64;
    if freeze_mask {
        return Ok(stats);
    }
    let inv = 1.0 / stats.batches as f64;
    for v in grad_sum.iter_mut().flatten() {
        *v *= inv;
    }
    let match_criterion = |c: RegrowthCriterion| match c {
        RegrowthCriterion::GradientMean => &grad_sum,
    };
    let weights_before = model.weights().to_vec();
    let (pruned_mask, pruned) = prune_step(model, cfg.prune_rate);
    model.set_mask(pruned_mask)?;
    let scores = rank_layers(model);
    let budget: usize = pruned.iter().sum();
    let regrowth = regrow(model.mask(), match_criterion(cfg.criterion), &scores, budget)?;
    model.weights = weights_before;
    model.set_mask(regrowth.mask)?;
    stats.pruned = budget;
    stats.grown = regrowth.grown.iter().sum();
    stats.shortfall = regrowth.shortfall;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::mask::{sparse_mask_mismatch, LayerMask};
    use crate::rng::seeded_rng;
    use crate::tensor::Tensor;

    fn two_layer(w0: Vec<f64>, w1: Vec<f64>, m0: Vec<bool>, m1: Vec<bool>) -> MaskedModel<f64> {
        let spec = ModelSpec::mlp(w0.len(), &[1, w1.len()]).unwrap();
        let mask = SparseMask::new(vec![
            LayerMask::new(&[1, w0.len()], m0).unwrap(),
            LayerMask::new(&[w1.len(), 1], m1).unwrap(),
        ]);
        let ws = vec![
            Tensor::from_vec(&[1, w0.len()], w0).unwrap(),
            Tensor::from_vec(&[w1.len(), 1], w1).unwrap(),
        ];
        let bs = spec.bias_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        MaskedModel::from_parts(&spec, ws, bs, mask).unwrap()
    }

    #[test]
    fn random_mask_counts() {
        let spec = ModelSpec::mlp(100, &[10]).unwrap();
        let a = init_random_mask(&spec, 0.05, &mut seeded_rng(1)).unwrap();
        let b = init_random_mask(&spec, 0.05, &mut seeded_rng(2)).unwrap();
        assert_eq!(a.layer_nnz(), vec![50]);
        assert_eq!(b.layer_nnz(), a.layer_nnz());
        assert_ne!(a, b);
        let tiny = ModelSpec::mlp(4, &[2]).unwrap();
        assert_eq!(init_random_mask(&tiny, 0.01, &mut seeded_rng(1)).unwrap().nnz(), 1);
        assert!(init_random_mask(&spec, 1.0, &mut seeded_rng(1)).unwrap().density() == 1.0);
        assert!(init_random_mask(&spec, 0.0, &mut seeded_rng(1)).is_err());
    }

    #[test]
    fn prune_smallest_magnitude() {
        let m = two_layer(vec![0.9, -0.5, 0.1, 0.05], vec![1.0, 1.0], vec![true; 4], vec![true; 2]);
        let (mask, pruned) = prune_step(&m, 0.25);
        assert_eq!(pruned, vec![1, 0]);
        assert_eq!(mask.layers()[0].bits(), &[true, true, true, false]);
    }

    #[test]
    fn prune_ties_lowest_index_and_keeps_one() {
        let m = two_layer(vec![0.3; 8], vec![0.2], vec![true; 8], vec![true]);
        let (mask, pruned) = prune_step(&m, 0.25);
        assert_eq!(pruned, vec![2, 0]);
        assert_eq!(mask.layers()[0].live_indices(), vec![2, 3, 4, 5, 6, 7]);
        let (mask, pruned) = prune_step(&m, 0.99);
        assert_eq!(pruned, vec![7, 0]);
        assert_eq!(mask.layer_nnz(), vec![1, 1]);
    }

    #[test]
    fn ranking() {
        let m = two_layer(vec![1.0, 2.0], vec![-1.0], vec![true; 2], vec![true]);
        assert_eq!(rank_layers(&m), vec![0.75, 0.25]);
        let z = two_layer(vec![0.0, 0.0], vec![0.0], vec![true; 2], vec![true]);
        assert_eq!(rank_layers(&z), vec![0.5, 0.5]);
    }

    #[test]
    fn regrow_quotas_and_cascade() {
        assert_eq!(regrow_counts(&[0.75, 0.25], &[10, 10], 4), (vec![3, 1], 0));
        assert_eq!(regrow_counts(&[0.25, 0.75], &[10, 1], 4), (vec![3, 1], 0));
        // quota of 2 meets a single free slot: one grows there, one moves on
        assert_eq!(regrow_counts(&[0.5, 0.5], &[5, 1], 4).0, vec![3, 1]);
        assert_eq!(regrow_counts(&[0.1, 0.9], &[5, 1], 4).0, vec![3, 1]);
        assert_eq!(regrow_counts(&[0.5, 0.5], &[1, 1], 4), (vec![1, 1], 2));
        assert_eq!(regrow_counts(&[0.5, 0.5], &[3, 3], 0), (vec![0, 0], 0));
    }

    #[test]
    fn regrow_picks_largest_gradients() {
        let mask = SparseMask::new(vec![LayerMask::new(&[4], vec![true, false, false, false]).unwrap()]);
        let g = vec![vec![9.0, 1.0, 3.0, 3.0]];
        let r = regrow(&mask, &g, &[1.0], 2).unwrap();
        assert_eq!(r.mask.layers()[0].bits(), &[true, false, true, true]);
        let r = regrow(&mask, &g, &[1.0], 0).unwrap();
        assert_eq!(r.mask, mask);
        let r = regrow(&mask, &g, &[1.0], 5).unwrap();
        assert_eq!(r.shortfall, 2);
        assert_eq!(r.mask.nnz(), 4);
    }

    #[test]
    fn sensitivity_profile() {
        let mask = SparseMask::new(vec![LayerMask::from_indices(&[262], 0..131)]);
        let p = SensitivityProfile::from_mask(&mask);
        assert_eq!(p.densities, vec![0.5]);
        assert_eq!(p.overall_density(), 0.5);
        assert!(SensitivityProfile::new(vec![1.5], vec![3]).is_err());
    }

    fn toy() -> (ModelSpec, Dataset) {
        let data = synth(&mut seeded_rng(4));
        (ModelSpec::mlp(6, &[8, 3]).unwrap(), data)
    }

    fn synth(rng: &mut crate::rng::SimRng) -> Dataset {
        crate::data::synth_dataset(3, 20, 6, 4.0, Split::Train, rng).unwrap()
    }

    #[test]
    fn dnr_conserves_and_freezes() {
        let (spec, data) = toy();
        let mut rng = seeded_rng(9);
        let mask = init_random_mask(&spec, 0.5, &mut rng).unwrap();
        let mut model = MaskedModel::<f32>::init(&spec, mask, &mut rng).unwrap();
        let shard: Vec<usize> = (0..data.len()).collect();
        let cfg = DnrConfig {
            lr: 0.05,
            prune_rate: 0.25,
            batch_size: 8,
            criterion: RegrowthCriterion::GradientMean,
        };
        let before = model.mask().clone();
        let stats = dnr_epoch(&mut model, &data, &shard, &cfg, true, &mut rng).unwrap();
        assert_eq!(sparse_mask_mismatch(model.mask(), &before).unwrap(), 0.0);
        assert_eq!(stats.pruned, 0);
        let stats = dnr_epoch(&mut model, &data, &shard, &cfg, false, &mut rng).unwrap();
        assert_eq!(model.mask().nnz(), before.nnz());
        assert_eq!(stats.pruned, stats.grown);
        assert!(stats.pruned > 0);
        assert!(model.mask().layer_nnz().iter().all(|&n| n >= 1));
        let err = dnr_epoch(&mut model, &data, &[], &cfg, false, &mut rng);
        assert!(matches!(err, Err(FlashError::EmptyData(_))));
    }
}
