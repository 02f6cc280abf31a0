//! End-to-end behaviour of the federation loop on small synthetic problems.

use flash_sim::data::{iid_partition, synth_dataset, Dataset, Split};
use flash_sim::federation::{
    client_execute, fed_avg, run_flash, run_hetero_flash, run_with_observer, stage1_sensitivity, weighted_fed_avg, ClientUpdate,
    Experiment, RoundView,
};
use flash_sim::learner::{init_random_mask, DnrConfig, RegrowthCriterion, SensitivityProfile};
use flash_sim::mask::{magnitude_subsample, recalibrate_density, LayerMask, SparseMask};
use flash_sim::model::{MaskedModel, ModelSpec};
use flash_sim::rng::{seeded_rng, stream_rng, Stream};
use flash_sim::tensor::Tensor;
use flash_sim::{Aggregation, Algorithm, FederationConfig};

struct Fixture {
    spec: ModelSpec,
    train: Dataset,
    test: Dataset,
}

impl Fixture {
    fn new() -> Self {
        Self {
            spec: ModelSpec::mlp(10, &[24, 4]).unwrap(),
            train: synth_dataset(4, 100, 10, 6.0, Split::Train, &mut seeded_rng(1)).unwrap(),
            test: synth_dataset(4, 30, 10, 6.0, Split::Test, &mut seeded_rng(2)).unwrap(),
        }
    }

    fn exp(&self) -> Experiment<'_> {
        Experiment { spec: &self.spec, train: &self.train, test: &self.test }
    }
}

fn small(algorithm: Algorithm) -> FederationConfig {
    FederationConfig {
        algorithm,
        rounds: 8,
        clients: 10,
        clients_per_round: 4,
        warmup_clients: 3,
        warmup_epochs: 2,
        density: 0.2,
        batch_size: 10,
        eval_every: 4,
        ..FederationConfig::default()
    }
}

fn dnr() -> DnrConfig {
    DnrConfig { lr: 0.05, prune_rate: 0.25, batch_size: 10, criterion: RegrowthCriterion::GradientMean }
}

fn server(fx: &Fixture, d: f64) -> MaskedModel<f32> {
    let mask = init_random_mask(&fx.spec, d, &mut seeded_rng(3)).unwrap();
    MaskedModel::init(&fx.spec, mask, &mut seeded_rng(4)).unwrap()
}

#[test]
fn client_execute_examples() {
    let fx = Fixture::new();
    let s = server(&fx, 0.3);
    let shard: Vec<usize> = (0..50).collect();
    let mut rng = seeded_rng(5);
    let idle = client_execute(0, &s, &fx.train, &shard, 0, false, &dnr(), &mut rng).unwrap();
    assert_eq!(idle.weights, s.weights());
    assert_eq!(&idle.mask, s.mask());
    assert_eq!(idle.data_size, 50);
    assert_eq!(idle.train_loss, None);

    let frozen = client_execute(0, &s, &fx.train, &shard, 2, true, &dnr(), &mut rng).unwrap();
    assert_eq!(&frozen.mask, s.mask());
    let learned = client_execute(0, &s, &fx.train, &shard, 2, false, &dnr(), &mut rng).unwrap();
    assert_ne!(&learned.mask, s.mask());
    assert_eq!(learned.mask.nnz(), s.mask().nnz());
    assert!(client_execute(0, &s, &fx.train, &[], 1, false, &dnr(), &mut rng).is_err());
}

#[test]
fn wfa_zero_where_no_client_is_live() {
    let live = |bits: Vec<bool>| SparseMask::new(vec![LayerMask::new(&[1, 3], bits).unwrap()]);
    let u = |w: Vec<f64>, m, ds| ClientUpdate {
        client: 0,
        weights: vec![Tensor::from_vec(&[1, 3], w).unwrap()],
        biases: vec![Tensor::from_vec(&[1], vec![0.0]).unwrap()],
        mask: m,
        data_size: ds,
        train_loss: None,
    };
    let ups = [u(vec![1.0, 0.0, 0.0], live(vec![true, false, false]), 2), u(vec![3.0, 0.0, 0.0], live(vec![true, false, false]), 6)];
    let (w, _) = weighted_fed_avg(&ups).unwrap();
    assert_eq!(w[0].data(), &[2.5, 0.0, 0.0]);
    let (f, _) = fed_avg(&ups).unwrap();
    assert_eq!(f[0].data(), &[2.5, 0.0, 0.0]);
}

#[test]
fn jmwst_union_exceeds_budget_then_subsamples_back() {
    let fx = Fixture::new();
    let s = server(&fx, 0.2);
    let part = iid_partition(fx.train.len(), 4, &mut seeded_rng(6)).unwrap();
    let updates: Vec<ClientUpdate<f32>> = (0..4)
        .map(|c| client_execute(c, &s, &fx.train, part.client(c), 1, false, &dnr(), &mut seeded_rng(10 + c as u64)).unwrap())
        .collect();
    let mut union = updates[0].mask.clone();
    for u in &updates[1..] {
        union = SparseMask::new(
            union
                .layers()
                .iter()
                .zip(u.mask.layers())
                .map(|(a, b)| LayerMask::new(a.shape(), a.bits().iter().zip(b.bits()).map(|(x, y)| *x || *y).collect()).unwrap())
                .collect(),
        );
    }
    assert!(union.density() > s.mask().density());
    let (w, _) = fed_avg(&updates).unwrap();
    let k = fx.spec.weight_counts();
    let mean: Vec<f64> = (0..k.len())
        .map(|l| updates.iter().map(|u| u.mask.layer_densities()[l]).sum::<f64>() / 4.0)
        .collect();
    let d_c = recalibrate_density(&mean, &k, 0.2).unwrap();
    let back = magnitude_subsample(&w, &d_c, None).unwrap();
    let total = fx.spec.total_weights() as f64;
    assert!((back.density() - 0.2).abs() <= k.len() as f64 / total);
}

#[test]
fn warmup_profile_is_mean_of_clients() {
    let fx = Fixture::new();
    let cfg = FederationConfig { warmup_clients: 1, ..small(Algorithm::Spdst) };
    let part = iid_partition(fx.train.len(), cfg.clients, &mut seeded_rng(7)).unwrap();
    let init = server(&fx, 0.2);
    let one = stage1_sensitivity(&cfg, &fx.train, &part, &[3], &init).unwrap();
    assert_eq!(one.clients, vec![3]);
    let dnr = DnrConfig { lr: cfg.eta_init, ..dnr() };
    let direct = client_execute(3, &init, &fx.train, part.client(3), cfg.warmup_epochs, false, &dnr, &mut stream_rng(cfg.seed, Stream::Client, 0, 3)).unwrap();
    assert_eq!(one.profile, SensitivityProfile::from_mask(&direct.mask));

    let cfg = FederationConfig { warmup_clients: 2, ..cfg };
    let two = stage1_sensitivity(&cfg, &fx.train, &part, &[1, 2], &init).unwrap();
    let each: Vec<SensitivityProfile> = [1usize, 2]
        .iter()
        .map(|&c| {
            let u = client_execute(c, &init, &fx.train, part.client(c), cfg.warmup_epochs, false, &dnr, &mut stream_rng(cfg.seed, Stream::Client, 0, c as u64)).unwrap();
            SensitivityProfile::from_mask(&u.mask)
        })
        .collect();
    for l in 0..each[0].densities.len() {
        let mean = 0.5 * (each[0].densities[l] + each[1].densities[l]);
        assert!((two.profile.densities[l] - mean).abs() < 1e-15);
    }
}

#[test]
fn frozen_mask_algorithms_hold_density_and_mask() {
    let fx = Fixture::new();
    for algorithm in [Algorithm::Pdst, Algorithm::Spdst] {
        let mut initial: Option<SparseMask> = None;
        let out = run_with_observer::<f32, _>(&small(algorithm), fx.exp(), |v: &RoundView<'_, f32>| {
            let first = initial.get_or_insert_with(|| v.server.mask().clone());
            assert_eq!(v.server.mask(), first);
            assert_eq!(v.record.sm_global, 0.0);
            Ok(())
        })
        .unwrap();
        let d0 = out.records[0].server_density;
        assert!(out.records.iter().all(|r| r.server_density == d0));
    }
}

#[test]
fn sampling_has_no_repeats_and_runs_are_deterministic() {
    let fx = Fixture::new();
    for algorithm in [Algorithm::Nst, Algorithm::Jmwst, Algorithm::HeteroJmwst] {
        let cfg = small(algorithm);
        let a = run_with_observer::<f32, _>(&cfg, fx.exp(), |_: &RoundView<'_, f32>| Ok(())).unwrap();
        let b = run_with_observer::<f32, _>(&cfg, fx.exp(), |_: &RoundView<'_, f32>| Ok(())).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.model, b.model);
        for r in &a.records {
            let mut p = r.participants.clone();
            p.dedup();
            assert_eq!(p.len(), r.participants.len());
            assert!(r.participants.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

#[test]
fn jmwst_learns_masks_only_on_interval_rounds() {
    let fx = Fixture::new();
    let cfg = FederationConfig { rint: 3, ..small(Algorithm::Jmwst) };
    let out = run_flash::<f32>(&cfg, fx.exp()).unwrap();
    for r in &out.records {
        if r.round % 3 != 0 {
            assert_eq!(r.sm_global, 0.0, "round {}", r.round);
        }
    }
    assert!(out.records.iter().any(|r| r.sm_global > 0.0));
    let total = fx.spec.total_weights() as f64;
    assert!(out.records.iter().all(|r| (r.server_density - 0.2).abs() <= 2.0 / total));
}

#[test]
fn single_density_hetero_matches_homogeneous() {
    let fx = Fixture::new();
    for (hetero, homo) in [(Algorithm::HeteroSpdst, Algorithm::Spdst), (Algorithm::HeteroJmwst, Algorithm::Jmwst)] {
        let base = FederationConfig { aggregation: Some(Aggregation::FedAvg), ..small(homo) };
        let h = FederationConfig { algorithm: hetero, density_set: vec![base.density], group_fractions: None, ..base.clone() };
        let a = run_flash::<f32>(&base, fx.exp()).unwrap();
        let b = run_hetero_flash::<f32>(&h, fx.exp()).unwrap();
        assert_eq!(a.records, b.records, "{hetero}");
        assert_eq!(a.model, b.model);
    }
}

#[test]
fn entry_points_reject_the_other_family() {
    let fx = Fixture::new();
    assert!(run_flash::<f32>(&small(Algorithm::HeteroSpdst), fx.exp()).is_err());
    assert!(run_hetero_flash::<f32>(&small(Algorithm::Spdst), fx.exp()).is_err());
}

#[test]
fn counters_are_cumulative_and_learning_rounds_cost_more() {
    let fx = Fixture::new();
    let spdst = run_flash::<f32>(&small(Algorithm::Spdst), fx.exp()).unwrap();
    let jmwst = run_flash::<f32>(&small(Algorithm::Jmwst), fx.exp()).unwrap();
    for out in [&spdst, &jmwst] {
        assert!(out.records.windows(2).all(|w| w[1].uplink_bits > w[0].uplink_bits
            && w[1].downlink_bits > w[0].downlink_bits
            && w[1].cum_flops > w[0].cum_flops));
    }
    let per_round = |o: &flash_sim::federation::RunOutput<f32>| o.records[7].uplink_bits - o.records[6].uplink_bits;
    assert!(per_round(&jmwst) > per_round(&spdst));
}
