//! Server-side orchestration: warm-up, client rounds, aggregation and server
//! mask subsampling for the homogeneous and heterogeneous-density variants.

use rand::seq::index;
use rayon::prelude::*;
use serde::Serialize;

use crate::accounting::{masked_comm_bits, model_comm_bits, model_train_flops, stage1_overhead_bits};
use crate::config::{Aggregation, Algorithm, FederationConfig};
use crate::data::{lda_partition, Dataset, Partition};
use crate::error::{FlashError, Result};
use crate::learner::{dnr_epoch, init_random_mask, DnrConfig, RegrowthCriterion, SensitivityProfile};
use crate::mask::{
    apportion, hetero_subsample, init_sensitivity_mask, layer_sms, magnitude_subsample, nested_mask_sample,
    recalibrate_density, sparse_mask_mismatch, SparseMask,
};
use crate::model::{lr_at_round, MaskedModel, ModelSpec};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

/// Batch size used for test-set evaluation.
pub const EVAL_BATCH: usize = 512;

/// What a client sends back after local training.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate<T> {
    pub client: usize,
    pub weights: Vec<Tensor<T>>,
    pub biases: Vec<Tensor<T>>,
    pub mask: SparseMask,
    pub data_size: usize,
    /// Mean training loss over the local epochs (`None` for zero epochs).
    pub train_loss: Option<f64>,
}

/// Metrics of one server round. Bit and FLOP counters are cumulative and
/// include the warm-up stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_acc: Option<f64>,
    pub train_loss: Option<f64>,
    /// Mismatch between this round's and the previous round's server mask.
    pub sm_global: f64,
    pub sm_layers: Vec<f64>,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    pub cum_flops: f64,
    pub lr: f64,
    pub server_density: f64,
    pub participants: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Everything an observer may inspect after a round.
pub struct RoundView<'a, T> {
    pub record: &'a RoundRecord,
    /// `(client, group)` pairs trained this round, by ascending client id.
    pub assignments: &'a [(usize, usize)],
    /// Per-group masks the clients received this round.
    pub sent_masks: &'a [SparseMask],
    /// Per-group masks after the round's server update.
    pub masks: &'a [SparseMask],
    pub server: &'a MaskedModel<T>,
}

pub struct RunOutput<T> {
    pub records: Vec<RoundRecord>,
    pub model: MaskedModel<T>,
    pub masks: Vec<SparseMask>,
    pub sensitivity: Option<SensitivityProfile>,
    pub partition: Partition,
    /// Client ids of each density group, largest density last.
    pub groups: Vec<Vec<usize>>,
}

/// Model, training data and held-out data of one experiment.
#[derive(Clone, Copy)]
pub struct Experiment<'a> {
    pub spec: &'a ModelSpec,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

fn dnr_config(cfg: &FederationConfig, lr: f64) -> DnrConfig {
    DnrConfig {
        lr,
        prune_rate: cfg.prune_rate,
        batch_size: cfg.batch_size,
        criterion: RegrowthCriterion::GradientMean,
    }
}

/// Local training of one client: `epochs` DNR epochs starting from `server`.
pub fn client_execute<T: Scalar>(
    client: usize,
    server: &MaskedModel<T>,
    data: &Dataset,
    shard: &[usize],
    epochs: usize,
    freeze_mask: bool,
    dnr: &DnrConfig,
    rng: &mut crate::rng::SimRng,
) -> Result<ClientUpdate<T>> {
    if shard.is_empty() {
        return Err(FlashError::EmptyData(format!("client {client} has no data")));
    }
    let mut model = server.clone();
    let mut loss = 0.0;
    for _ in 0..epochs {
        loss += dnr_epoch(&mut model, data, shard, dnr, freeze_mask, rng)?.mean_loss;
    }
    if let Some(l) = model.weights().iter().position(|w| !w.is_finite()) {
        return Err(FlashError::Numerical {
            layer: l,
            detail: format!("client {client} produced non-finite weights"),
        });
    }
    let mask = model.mask().clone();
    let MaskedModel { weights, biases, .. } = model;
    Ok(ClientUpdate {
        client,
        weights,
        biases,
        mask,
        data_size: shard.len(),
        train_loss: (epochs > 0).then(|| loss / epochs as f64),
    })
}

fn check_updates<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<()> {
    let first = updates
        .first()
        .ok_or_else(|| FlashError::Config("aggregation needs at least one update".into()))?;
    for u in updates {
        if u.data_size == 0 {
            return Err(FlashError::EmptyData(format!("client {} reports no data", u.client)));
        }
        let same = u.weights.len() == first.weights.len()
            && u.biases.len() == first.biases.len()
            && u.weights.iter().zip(&first.weights).all(|(a, b)| a.shape() == b.shape())
            && u.biases.iter().zip(&first.biases).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(FlashError::Shape(format!("update of client {} has a different shape", u.client)));
        }
    }
    Ok(())
}

fn weighted_sum<T: Scalar>(tensors: &[&Tensor<T>], coef: impl Fn(usize, usize) -> f64) -> Tensor<T> {
    let n = tensors[0].len();
    let mut acc = vec![0.0f64; n];
    for (c, t) in tensors.iter().enumerate() {
        for (p, (a, &v)) in acc.iter_mut().zip(t.data()).enumerate() {
            let w = coef(c, p);
            if w != 0.0 {
                *a += w * v.as_f64();
            }
        }
    }
    Tensor::from_vec(tensors[0].shape(), acc.into_iter().map(T::from_f64).collect()).expect("shape preserved")
}

fn average<T: Scalar>(per_client: Vec<Vec<&Tensor<T>>>, coef: &[f64]) -> Vec<Tensor<T>> {
    let layers = per_client[0].len();
    (0..layers)
        .map(|l| {
            let col: Vec<&Tensor<T>> = per_client.iter().map(|c| c[l]).collect();
            weighted_sum(&col, |c, _| coef[c])
        })
        .collect()
}

/// Data-size weighted mean of weights and biases over every position.
pub fn fed_avg<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    check_updates(updates)?;
    let total: f64 = updates.iter().map(|u| u.data_size as f64).sum();
    let coef: Vec<f64> = updates.iter().map(|u| u.data_size as f64 / total).collect();
    let weights = average(updates.iter().map(|u| u.weights.iter().collect()).collect(), &coef);
    let biases = average(updates.iter().map(|u| u.biases.iter().collect()).collect(), &coef);
    Ok((weights, biases))
}

/// Per-position `Σ_c ds_c · mask_c(p)`.
pub fn mask_support<T: Scalar>(updates: &[ClientUpdate<T>]) -> Vec<Vec<f64>> {
    let mut support: Vec<Vec<f64>> = updates[0].mask.layers().iter().map(|m| vec![0.0; m.len()]).collect();
    for u in updates {
        for (s, m) in support.iter_mut().zip(u.mask.layers()) {
            for (v, &live) in s.iter_mut().zip(m.bits()) {
                if live {
                    *v += u.data_size as f64;
                }
            }
        }
    }
    support
}

/// Weighted fed averaging: each position is averaged over the clients where
/// it is live, weighted by data size; positions live nowhere become zero.
/// Biases use [`fed_avg`].
pub fn weighted_fed_avg<T: Scalar>(updates: &[ClientUpdate<T>]) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    check_updates(updates)?;
    let support = mask_support(updates);
    let weights = (0..support.len())
        .map(|l| {
            let col: Vec<&Tensor<T>> = updates.iter().map(|u| &u.weights[l]).collect();
            weighted_sum(&col, |c, p| {
                let u = &updates[c];
                if u.mask.layers()[l].bits()[p] && support[l][p] > 0.0 {
                    u.data_size as f64 / support[l][p]
                } else {
                    0.0
                }
            })
        })
        .collect();
    let total: f64 = updates.iter().map(|u| u.data_size as f64).sum();
    let coef: Vec<f64> = updates.iter().map(|u| u.data_size as f64 / total).collect();
    let biases = average(updates.iter().map(|u| u.biases.iter().collect()).collect(), &coef);
    Ok((weights, biases))
}

pub fn aggregate<T: Scalar>(
    updates: &[ClientUpdate<T>],
    how: Aggregation,
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    match how {
        Aggregation::FedAvg => fed_avg(updates),
        Aggregation::Wfa => weighted_fed_avg(updates),
    }
}

/// Classification accuracy of `model` on `data`, as a fraction.
pub fn evaluate<T: Scalar>(model: &MaskedModel<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(FlashError::EmptyData("evaluation set is empty".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let correct = idx
        .par_chunks(EVAL_BATCH)
        .map(|chunk| -> Result<usize> {
            let (batch, labels) = data.gather::<T>(chunk);
            let logits = model.forward(&batch)?;
            let k = model.spec().num_classes();
            Ok(logits
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(z, &y)| {
                    let best = (0..k).fold(0, |b, j| if z[j] > z[b] { j } else { b });
                    best == y
                })
                .count())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / data.len() as f64)
}

/// Warm-up outcome: averaged client sensitivities plus which clients ran.
#[derive(Clone, Debug, PartialEq)]
pub struct Warmup {
    pub profile: SensitivityProfile,
    pub clients: Vec<usize>,
}

/// Stage 1: `c_d` clients drawn from `candidates` each run `E_d` mask-learning
/// epochs from `init`; the result is the mean of their layer densities.
/// Clients without data or with a numerical failure are skipped.
pub fn stage1_sensitivity<T: Scalar>(
    cfg: &FederationConfig,
    data: &Dataset,
    partition: &Partition,
    candidates: &[usize],
    init: &MaskedModel<T>,
) -> Result<Warmup> {
    if candidates.is_empty() {
        return Err(FlashError::Config("no warm-up candidates".into()));
    }
    let n = cfg.warmup_clients.min(candidates.len());
    let mut rng = stream_rng(cfg.seed, Stream::Warmup, 0, 0);
    let mut chosen: Vec<usize> = index::sample(&mut rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    chosen.sort_unstable();
    let dnr = dnr_config(cfg, cfg.eta_init);
    let results: Vec<(usize, Result<ClientUpdate<T>>)> = chosen
        .par_iter()
        .map(|&c| {
            let mut rng = stream_rng(cfg.seed, Stream::Client, 0, c as u64);
            let r = client_execute(c, init, data, partition.client(c), cfg.warmup_epochs, false, &dnr, &mut rng);
            (c, r)
        })
        .collect();
    let mut profiles = Vec::new();
    let mut used = Vec::new();
    for (c, r) in results {
        match r {
            Ok(u) => {
                profiles.push(SensitivityProfile::from_mask(&u.mask));
                used.push(c);
            }
            Err(e) => log::warn!("warm-up client {c} skipped: {e}"),
        }
    }
    if profiles.is_empty() {
        return Err(FlashError::EmptyData("every warm-up client was skipped".into()));
    }
    let layers = profiles[0].densities.len();
    let densities = (0..layers)
        .map(|l| profiles.iter().map(|p| p.densities[l]).sum::<f64>() / profiles.len() as f64)
        .collect();
    Ok(Warmup {
        profile: SensitivityProfile::new(densities, profiles[0].counts.clone())?,
        clients: used,
    })
}

/// Splits client ids into density groups. Group sizes follow the fractions by
/// largest remainder; the largest density takes the lowest ids.
fn density_groups(clients: usize, fractions: &[f64]) -> Result<Vec<Vec<usize>>> {
    let top_first: Vec<f64> = fractions.iter().rev().copied().collect();
    let sizes = apportion(clients, &top_first);
    if sizes.contains(&0) {
        return Err(FlashError::Config(format!(
            "group fractions {fractions:?} leave a density group without clients"
        )));
    }
    let mut groups = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        groups.push((start..start + s).collect::<Vec<_>>());
        start += s;
    }
    groups.reverse();
    Ok(groups)
}

fn mean_densities<T: Scalar>(updates: &[ClientUpdate<T>]) -> Vec<f64> {
    let layers = updates[0].mask.num_layers();
    let mut d = vec![0.0; layers];
    for u in updates {
        for (acc, v) in d.iter_mut().zip(u.mask.layer_densities()) {
            *acc += v;
        }
    }
    d.iter().map(|v| v / updates.len() as f64).collect()
}

/// Homogeneous FLASH (NST, PDST, SPDST, JMWST).
pub fn run_flash<T: Scalar>(cfg: &FederationConfig, exp: Experiment<'_>) -> Result<RunOutput<T>> {
    if cfg.algorithm.is_hetero() {
        return Err(FlashError::Config(format!("{} is a heterogeneous algorithm", cfg.algorithm)));
    }
    run_with_observer(cfg, exp, |_: &RoundView<'_, T>| Ok(()))
}

/// Hetero-FLASH (hetero-SPDST, hetero-JMWST).
pub fn run_hetero_flash<T: Scalar>(cfg: &FederationConfig, exp: Experiment<'_>) -> Result<RunOutput<T>> {
    if !cfg.algorithm.is_hetero() {
        return Err(FlashError::Config(format!("{} is not a heterogeneous algorithm", cfg.algorithm)));
    }
    run_with_observer(cfg, exp, |_: &RoundView<'_, T>| Ok(()))
}

/// Runs any algorithm, calling `observer` after every round.
pub fn run_with_observer<T, F>(cfg: &FederationConfig, exp: Experiment<'_>, mut observer: F) -> Result<RunOutput<T>>
where
    T: Scalar,
    F: FnMut(&RoundView<'_, T>) -> Result<()>,
{
    cfg.validate()?;
    let spec = exp.spec;
    let train = exp.train;
    if train.sample_shape()[..] != spec.input_shape()[..] || exp.test.sample_shape() != train.sample_shape() {
        return Err(FlashError::Config(format!(
            "dataset samples {:?} do not fit model input {:?}",
            train.sample_shape(),
            spec.input_shape()
        )));
    }
    if train.num_classes() > spec.num_classes() {
        return Err(FlashError::Config("dataset has more classes than the model outputs".into()));
    }
    let algo = cfg.algorithm;
    let partition = lda_partition(
        train.labels(),
        train.num_classes(),
        cfg.clients,
        cfg.alpha,
        &mut stream_rng(cfg.seed, Stream::Partition, 0, 0),
    )?;
    let densities = cfg.densities();
    let m = densities.len();
    let groups = density_groups(cfg.clients, &cfg.resolved_group_fractions())?;
    let shapes = spec.weight_shapes();
    let k = spec.weight_counts();
    let total_k: usize = k.iter().sum();
    let geometry = spec.geometry();
    let bias_count: usize = spec.bias_shapes().iter().map(|s| s[0]).sum();

    let init_weights = |mask: SparseMask| MaskedModel::<T>::init(spec, mask, &mut stream_rng(cfg.seed, Stream::Init, 0, 0));
    let d_top = densities[m - 1];
    let init_mask = init_random_mask(spec, d_top, &mut stream_rng(cfg.seed, Stream::Mask, 0, 0))?;

    let mut cum_up = 0u64;
    let mut cum_down = 0u64;
    let mut cum_flops = 0.0f64;
    let mut sensitivity = None;
    let mut masks: Vec<SparseMask> = if algo.uses_warmup() {
        let init = init_weights(init_mask.clone())?;
        let warm = stage1_sensitivity(cfg, train, &partition, &groups[m - 1], &init)?;
        cum_up += stage1_overhead_bits(shapes.len(), warm.clients.len());
        let per_sample = model_train_flops(&geometry, &init_mask.layer_densities(), Algorithm::Jmwst).total();
        for &c in &warm.clients {
            cum_flops += per_sample * (partition.client(c).len() * cfg.warmup_epochs) as f64;
        }
        let d_c = recalibrate_density(&warm.profile.densities, &k, d_top)?;
        let top = init_sensitivity_mask(&d_c, &shapes, &mut stream_rng(cfg.seed, Stream::Mask, 1, 0))?;
        let mut chain = vec![top];
        for i in (0..m - 1).rev() {
            let parent = chain.last().expect("chain starts non-empty");
            let d_c = recalibrate_density(&parent.layer_densities(), &k, densities[i])?;
            let child = nested_mask_sample(parent, &d_c, &mut stream_rng(cfg.seed, Stream::Mask, 2, i as u64))?;
            chain.push(child.mask);
        }
        chain.reverse();
        log::info!("warm-up layer densities {:?}", warm.profile.densities);
        sensitivity = Some(warm.profile);
        chain
    } else {
        vec![init_mask]
    };
    log::info!(
        "initial mask layer densities {:?}",
        masks.iter().map(|mk| mk.layer_densities()).collect::<Vec<_>>()
    );
    // realized live budget of the homogeneous mask, kept through subsampling
    let d_eff = masks[0].nnz() as f64 / total_k as f64;
    let mut server = init_weights(masks[m - 1].clone())?;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut structure_changed = true;

    for t in 1..=cfg.rounds {
        let lr = lr_at_round(t - 1, cfg.rounds, cfg.eta_init, cfg.eta_end);
        let learn = match algo {
            Algorithm::Nst => true,
            Algorithm::Jmwst | Algorithm::HeteroJmwst => t % cfg.rint == 0,
            _ => false,
        };
        let mut assignments: Vec<(usize, usize)> = Vec::new();
        for (g, members) in groups.iter().enumerate() {
            let n = ((members.len() * cfg.clients_per_round) as f64 / cfg.clients as f64)
                .round()
                .clamp(1.0, members.len() as f64) as usize;
            let mut rng = stream_rng(cfg.seed, Stream::Sampling, t as u64, g as u64);
            assignments.extend(index::sample(&mut rng, members.len(), n).into_iter().map(|i| (members[i], g)));
        }
        assignments.sort_unstable();

        let sent: Vec<MaskedModel<T>> = masks
            .iter()
            .map(|mk| server.with_mask(mk.clone()))
            .collect::<Result<_>>()?;
        for &(c, g) in &assignments {
            cum_down += model_comm_bits(&sent[g], &cfg.comm, structure_changed);
            let per_sample = model_train_flops(&geometry, &masks[g].layer_densities(), algo).total();
            cum_flops += per_sample * (partition.client(c).len() * cfg.local_epochs) as f64;
        }

        let dnr = dnr_config(cfg, lr);
        let results: Vec<Result<ClientUpdate<T>>> = assignments
            .par_iter()
            .map(|&(c, g)| {
                let mut rng = stream_rng(cfg.seed, Stream::Client, t as u64, c as u64);
                client_execute(c, &sent[g], train, partition.client(c), cfg.local_epochs, !learn, &dnr, &mut rng)
            })
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut dropped = Vec::new();
        for (r, &(c, _)) in results.into_iter().zip(&assignments) {
            match r {
                Ok(u) => updates.push(u),
                Err(e) => {
                    log::warn!("round {t}: client {c} dropped: {e}");
                    dropped.push(c);
                }
            }
        }
        for u in &updates {
            cum_up += masked_comm_bits(&u.mask, bias_count, &cfg.comm, learn);
        }

        let prev_masks = masks.clone();
        if !updates.is_empty() {
            let (weights, biases) = aggregate(&updates, cfg.aggregation())?;
            if learn {
                let support = mask_support(&updates);
                masks = if m == 1 {
                    let d_c = recalibrate_density(&mean_densities(&updates), &k, d_eff)?;
                    vec![magnitude_subsample(&weights, &d_c, Some(&support))?]
                } else {
                    let union: Vec<f64> = support
                        .iter()
                        .map(|s| s.iter().filter(|&&v| v > 0.0).count() as f64 / s.len() as f64)
                        .collect();
                    hetero_subsample(&weights, &densities, &union, Some(&support))?
                };
            }
            server = MaskedModel::from_parts(spec, weights, biases, masks[m - 1].clone())?;
        }
        structure_changed = masks != prev_masks;

        let test_acc = if t % cfg.eval_every == 0 || t == cfg.rounds {
            Some(evaluate(&server, exp.test)?)
        } else {
            None
        };
        let losses: Vec<f64> = updates.iter().filter_map(|u| u.train_loss).collect();
        let record = RoundRecord {
            round: t,
            test_acc,
            train_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            sm_global: sparse_mask_mismatch(&masks[m - 1], &prev_masks[m - 1])?,
            sm_layers: layer_sms(&masks[m - 1], &prev_masks[m - 1])?,
            uplink_bits: cum_up,
            downlink_bits: cum_down,
            cum_flops,
            lr,
            server_density: server.mask().density(),
            participants: assignments.iter().map(|&(c, _)| c).collect(),
            dropped,
        };
        log::debug!(
            "round {t}: acc {:?} loss {:?} sm {:.4}",
            record.test_acc,
            record.train_loss,
            record.sm_global
        );
        observer(&RoundView {
            record: &record,
            assignments: &assignments,
            sent_masks: &prev_masks,
            masks: &masks,
            server: &server,
        })?;
        records.push(record);
    }
    Ok(RunOutput {
        records,
        model: server,
        masks,
        sensitivity,
        partition,
        groups,
    })
}
