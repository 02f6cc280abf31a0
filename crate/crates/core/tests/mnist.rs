//! Checks against the real MNIST files. They pass trivially (with a note on
//! stderr) when the files are absent; see `FLASH_SIM_MNIST_DIR`.

use std::path::PathBuf;

use flash_sim::data::{lda_partition, load_mnist_dir};
use flash_sim::federation::stage1_sensitivity;
use flash_sim::learner::init_random_mask;
use flash_sim::model::{MaskedModel, ModelSpec};
use flash_sim::rng::{stream_rng, Stream};
use flash_sim::FederationConfig;

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("FLASH_SIM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let found = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        .iter()
        .all(|f| dir.join(f).exists() || dir.join(format!("{f}.gz")).exists());
    if !found {
        eprintln!("MNIST not found under {}, skipping", dir.display());
    }
    found.then_some(dir)
}

#[test]
fn official_files_have_standard_shape() {
    let Some(dir) = mnist_dir() else { return };
    let (train, test) = load_mnist_dir(&dir).unwrap();
    assert_eq!(train.len(), 60_000);
    assert_eq!(test.len(), 10_000);
    assert_eq!(train.sample_shape(), [1, 28, 28]);
    assert_eq!(train.class_counts().iter().sum::<usize>(), 60_000);
    assert!(train.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            r[k] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Warm-up sensitivities from different client counts and epoch budgets
/// should rank the layers alike. Takes around twenty minutes on one core.
#[test]
#[ignore]
fn warmup_profiles_agree_across_budgets() {
    let Some(dir) = mnist_dir() else { return };
    let (train, _) = load_mnist_dir(&dir).unwrap();
    let spec = ModelSpec::mnist_net();
    let cfg = FederationConfig::default();
    let part = lda_partition(train.labels(), 10, cfg.clients, cfg.alpha, &mut stream_rng(cfg.seed, Stream::Partition, 0, 0)).unwrap();
    let mask = init_random_mask(&spec, cfg.density, &mut stream_rng(cfg.seed, Stream::Mask, 0, 0)).unwrap();
    let init = MaskedModel::<f32>::init(&spec, mask, &mut stream_rng(cfg.seed, Stream::Init, 0, 0)).unwrap();
    let everyone: Vec<usize> = (0..cfg.clients).collect();
    let mut profiles = Vec::new();
    for c_d in [10, 20] {
        for e_d in [10, 20, 40] {
            let run = FederationConfig { warmup_clients: c_d, warmup_epochs: e_d, ..cfg.clone() };
            let w = stage1_sensitivity(&run, &train, &part, &everyone, &init).unwrap();
            eprintln!("c_d={c_d} E_d={e_d}: {:?}", w.profile.densities);
            profiles.push(w.profile.densities);
        }
    }
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            let rho = spearman(&profiles[i], &profiles[j]);
            assert!(rho >= 0.8, "profiles {i} and {j}: rho {rho}");
        }
    }
}
