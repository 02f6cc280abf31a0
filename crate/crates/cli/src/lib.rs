//! Configuration parsing, experiment driver and metrics output for the
//! `flash-sim` binary.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Arg, ArgAction, Command};
use serde::Serialize;
use sha2::{Digest, Sha256};

use flash_sim::accounting::{CommMode, CommModel};
use flash_sim::data::{load_mnist_dir, synth_dataset, Dataset, Split, LDA_SCHEME};
use flash_sim::federation::{run_with_observer, Experiment, RoundRecord, RoundView};
use flash_sim::model::ModelSpec;
use flash_sim::rng::{stream_rng, Stream};
use flash_sim::{Aggregation, Algorithm, FederationConfig, FlashError};

pub const VERSION_TAG: &str = concat!("flash-sim ", env!("CARGO_PKG_VERSION"));

pub const ROUNDS_HEADER: &str = "round,test_acc,train_loss,sm_global,uplink_bits,downlink_bits,cum_flops";

#[derive(Debug)]
pub enum CliError {
    /// `--help` / `--version` or a malformed command line, rendered by clap.
    Clap(clap::Error),
    /// A bad key or value, naming the offending key.
    Usage(String),
    Run(FlashError),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Clap(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<FlashError> for CliError {
    fn from(e: FlashError) -> Self {
        CliError::Run(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum DatasetKind {
    Mnist,
    /// Gaussian blobs fed to a small MLP.
    Synth {
        classes: usize,
        per_class: usize,
        dim: usize,
        separation: f64,
    },
}

/// Fully resolved run settings.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub federation: FederationConfig,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub out: PathBuf,
}

/// `(key, help)` for every setting; each is both a `--key` flag and a
/// config-file key.
const KEYS: &[(&str, &str)] = &[
    ("dataset", "mnist or synth [mnist]"),
    ("data-dir", "directory holding the MNIST IDX files [data/mnist]"),
    ("algo", "nst, pdst, spdst, jmwst, hetero-spdst or hetero-jmwst [spdst]"),
    ("density", "target weight density d in (0, 1] [0.1]"),
    ("density-set", "comma-separated ascending densities for hetero runs [0.1,0.15,0.2]"),
    ("group-fractions", "comma-separated client share per density-set entry [0.3,0.3,0.4]"),
    ("rounds", "federated rounds T [400]"),
    ("clients", "total clients [100]"),
    ("clients-per-round", "clients sampled each round [10]"),
    ("alpha", "Dirichlet concentration of the client label split [1000]"),
    ("rint", "mask-update interval in rounds [1]"),
    ("prune-rate", "fraction of live weights pruned per mask update [0.25]"),
    ("local-epochs", "local epochs per round E [1]"),
    ("warmup-clients", "clients in the sensitivity warm-up [10]"),
    ("warmup-epochs", "epochs of the sensitivity warm-up [10]"),
    ("aggregation", "fedavg or wfa [wfa for hetero runs, fedavg otherwise]"),
    ("comm-mode", "dense, csr, bitmap or value-only [csr]"),
    ("seed", "master random seed [1]"),
    ("out", "output directory [runs/latest]"),
    ("batch-size", "local SGD batch size [32]"),
    ("eta-init", "initial learning rate [0.1]"),
    ("eta-end", "final learning rate [0.001]"),
    ("eval-every", "evaluate the server model every N rounds [1]"),
    ("synth-classes", "classes of the synthetic dataset [10]"),
    ("synth-per-class", "training samples per class of the synthetic dataset [100]"),
    ("synth-dim", "feature dimension of the synthetic dataset [20]"),
    ("synth-separation", "distance between synthetic class means [8]"),
];

fn command() -> Command {
    let mut cmd = Command::new("flash-sim")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Federated sparse-learning simulator")
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key=value file; command-line flags take precedence"),
        );
    for &(key, help) in KEYS {
        cmd = cmd.arg(Arg::new(key).long(key).value_name("VALUE").help(help).action(ArgAction::Set));
    }
    cmd
}

/// Reads a `key = value` file, ignoring blank lines and `#` comments.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got `{line}`", n + 1)))?;
        let k = k.trim().trim_start_matches("--");
        if k != "config" && !KEYS.iter().any(|&(key, _)| key == k) {
            return Err(CliError::Usage(format!("unknown config key `{k}`")));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Usage(format!("{key}: cannot parse `{v}`")))
}

fn list(key: &str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn named<T: std::str::FromStr<Err = FlashError>>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|e: FlashError| CliError::Usage(format!("{key}: {e}")))
}

fn apply(rc: &mut RunConfig, synth: &mut (usize, usize, usize, f64), key: &str, v: &str) -> Result<(), CliError> {
    let f = &mut rc.federation;
    match key {
        "dataset" => {
            rc.dataset = match v {
                "mnist" => DatasetKind::Mnist,
                "synth" => DatasetKind::Synth {
                    classes: 0,
                    per_class: 0,
                    dim: 0,
                    separation: 0.0,
                },
                _ => return Err(CliError::Usage(format!("dataset: expected mnist or synth, got `{v}`"))),
            }
        }
        "data-dir" => rc.data_dir = PathBuf::from(v),
        "out" => rc.out = PathBuf::from(v),
        "algo" => f.algorithm = named::<Algorithm>(key, v)?,
        "density" => f.density = num(key, v)?,
        "density-set" => f.density_set = list(key, v)?,
        "group-fractions" => f.group_fractions = Some(list(key, v)?),
        "rounds" => f.rounds = num(key, v)?,
        "clients" => f.clients = num(key, v)?,
        "clients-per-round" => f.clients_per_round = num(key, v)?,
        "alpha" => f.alpha = num(key, v)?,
        "rint" => f.rint = num(key, v)?,
        "prune-rate" => f.prune_rate = num(key, v)?,
        "local-epochs" => f.local_epochs = num(key, v)?,
        "warmup-clients" => f.warmup_clients = num(key, v)?,
        "warmup-epochs" => f.warmup_epochs = num(key, v)?,
        "aggregation" => f.aggregation = Some(named::<Aggregation>(key, v)?),
        "comm-mode" => f.comm = CommModel::new(named::<CommMode>(key, v)?),
        "seed" => f.seed = num(key, v)?,
        "batch-size" => f.batch_size = num(key, v)?,
        "eta-init" => f.eta_init = num(key, v)?,
        "eta-end" => f.eta_end = num(key, v)?,
        "eval-every" => f.eval_every = num(key, v)?,
        "synth-classes" => synth.0 = num(key, v)?,
        "synth-per-class" => synth.1 = num(key, v)?,
        "synth-dim" => synth.2 = num(key, v)?,
        "synth-separation" => synth.3 = num(key, v)?,
        _ => return Err(CliError::Usage(format!("unknown key `{key}`"))),
    }
    Ok(())
}

/// Resolves flags over config-file values over defaults, then validates.
pub fn parse_config<I, S>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let matches = command().try_get_matches_from(argv).map_err(CliError::Clap)?;
    let mut values = match matches.get_one::<String>("config") {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {path}: {e}")))?;
            parse_config_file(&text)?
        }
        None => BTreeMap::new(),
    };
    for &(key, _) in KEYS {
        if let Some(v) = matches.get_one::<String>(key) {
            values.insert(key.to_string(), v.clone());
        }
    }
    values.remove("config");
    let mut rc = RunConfig {
        federation: FederationConfig::default(),
        dataset: DatasetKind::Mnist,
        data_dir: PathBuf::from("data/mnist"),
        out: PathBuf::from("runs/latest"),
    };
    let mut synth = (10, 100, 20, 8.0);
    // dataset first so the synth sizes can fill in regardless of key order
    if let Some(v) = values.remove("dataset") {
        apply(&mut rc, &mut synth, "dataset", &v)?;
    }
    for (k, v) in &values {
        apply(&mut rc, &mut synth, k, v)?;
    }
    if let DatasetKind::Synth {
        classes,
        per_class,
        dim,
        separation,
    } = &mut rc.dataset
    {
        (*classes, *per_class, *dim, *separation) = synth;
        if *classes < 2 || *per_class == 0 || *dim == 0 || !(*separation > 0.0) {
            return Err(CliError::Usage(format!(
                "synth-classes/synth-per-class/synth-dim/synth-separation = {synth:?} out of range"
            )));
        }
    }
    rc.federation
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(rc)
}

/// Loads (or generates) the train and test sets and the matching model.
pub fn load_experiment(rc: &RunConfig) -> Result<(ModelSpec, Dataset, Dataset), FlashError> {
    match &rc.dataset {
        DatasetKind::Mnist => {
            let (train, test) = load_mnist_dir(&rc.data_dir)?;
            Ok((ModelSpec::mnist_net(), train, test))
        }
        &DatasetKind::Synth {
            classes,
            per_class,
            dim,
            separation,
        } => {
            let seed = rc.federation.seed;
            let train = synth_dataset(classes, per_class, dim, separation, Split::Train, &mut stream_rng(seed, Stream::Data, 0, 0))?;
            let test = synth_dataset(
                classes,
                (per_class / 5).max(1),
                dim,
                separation,
                Split::Test,
                &mut stream_rng(seed, Stream::Data, 0, 1),
            )?;
            Ok((ModelSpec::mlp(dim, &[64, classes])?, train, test))
        }
    }
}

/// SHA-256 over labels and pixel bit patterns of both splits.
pub fn dataset_checksum(train: &Dataset, test: &Dataset) -> String {
    let mut h = Sha256::new();
    for ds in [train, test] {
        for &y in ds.labels() {
            h.update((y as u32).to_le_bytes());
        }
        for &v in ds.images().data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub dataset_checksum: String,
    pub partition_scheme: String,
    pub version: String,
    pub start_unix: u64,
    pub end_unix: Option<u64>,
    pub rounds_completed: usize,
    pub final_test_acc: Option<f64>,
    pub total_uplink_bits: u64,
    pub total_downlink_bits: u64,
    pub total_flops: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FlashError + '_ {
    move |source| FlashError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Streams round metrics to `rounds.csv` and `sm_layers.csv`, flushing after
/// every row, and keeps `manifest.json` current.
pub struct MetricsWriter {
    dir: PathBuf,
    rounds: BufWriter<File>,
    layers: BufWriter<File>,
    manifest: RunManifest,
}

impl MetricsWriter {
    pub fn create(dir: &Path, manifest: RunManifest, num_layers: usize) -> Result<Self, FlashError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let open = |name: &str, header: String| -> Result<BufWriter<File>, FlashError> {
            let path = dir.join(name);
            let mut w = BufWriter::new(
                OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(&path)
                    .map_err(io_err(&path))?,
            );
            writeln!(w, "{header}").and_then(|_| w.flush()).map_err(io_err(&path))?;
            Ok(w)
        };
        let layer_cols: Vec<String> = (0..num_layers).map(|l| format!("sm_layer{l}")).collect();
        let mut out = Self {
            rounds: open("rounds.csv", ROUNDS_HEADER.to_string())?,
            layers: open("sm_layers.csv", format!("round,{}", layer_cols.join(",")))?,
            dir: dir.to_path_buf(),
            manifest,
        };
        out.write_manifest()?;
        Ok(out)
    }

    fn write_manifest(&mut self) -> Result<(), FlashError> {
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn record(&mut self, r: &RoundRecord) -> Result<(), FlashError> {
        let path = self.dir.join("rounds.csv");
        writeln!(
            self.rounds,
            "{},{},{},{},{},{},{}",
            r.round,
            opt(r.test_acc),
            opt(r.train_loss),
            r.sm_global,
            r.uplink_bits,
            r.downlink_bits,
            r.cum_flops
        )
        .and_then(|_| self.rounds.flush())
        .map_err(io_err(&path))?;
        let path = self.dir.join("sm_layers.csv");
        let cols: Vec<String> = r.sm_layers.iter().map(f64::to_string).collect();
        writeln!(self.layers, "{},{}", r.round, cols.join(","))
            .and_then(|_| self.layers.flush())
            .map_err(io_err(&path))?;
        let m = &mut self.manifest;
        m.rounds_completed = r.round;
        if r.test_acc.is_some() {
            m.final_test_acc = r.test_acc;
        }
        m.total_uplink_bits = r.uplink_bits;
        m.total_downlink_bits = r.downlink_bits;
        m.total_flops = r.cum_flops;
        Ok(())
    }

    pub fn finish(mut self) -> Result<RunManifest, FlashError> {
        self.manifest.end_unix = Some(unix_now());
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

/// Writes a finished record stream in one go.
pub fn emit_metrics(records: &[RoundRecord], out: &Path, manifest: RunManifest) -> Result<RunManifest, FlashError> {
    let layers = records.first().map_or(0, |r| r.sm_layers.len());
    let mut w = MetricsWriter::create(out, manifest, layers)?;
    for r in records {
        w.record(r)?;
    }
    w.finish()
}

/// Loads data, runs the experiment and streams metrics into `rc.out`.
pub fn execute(rc: &RunConfig) -> Result<RunManifest, FlashError> {
    let (spec, train, test) = load_experiment(rc)?;
    let manifest = RunManifest {
        config: rc.clone(),
        seed: rc.federation.seed,
        dataset_checksum: dataset_checksum(&train, &test),
        partition_scheme: LDA_SCHEME.to_string(),
        version: VERSION_TAG.to_string(),
        start_unix: unix_now(),
        end_unix: None,
        rounds_completed: 0,
        final_test_acc: None,
        total_uplink_bits: 0,
        total_downlink_bits: 0,
        total_flops: 0.0,
    };
    let mut writer = MetricsWriter::create(&rc.out, manifest, spec.num_weight_layers())?;
    let exp = Experiment {
        spec: &spec,
        train: &train,
        test: &test,
    };
    run_with_observer::<f32, _>(&rc.federation, exp, |view: &RoundView<'_, f32>| {
        let r = view.record;
        log::info!(
            "round {}/{}: acc {} loss {} sm {:.4}",
            r.round,
            rc.federation.rounds,
            r.test_acc.map_or("-".into(), |a| format!("{:.4}", a)),
            r.train_loss.map_or("-".into(), |l| format!("{:.4}", l)),
            r.sm_global
        );
        writer.record(r)
    })?;
    writer.finish()
}

/// Applies `FLASH_SIM_THREADS` (unset or 0 leaves the pool size automatic).
pub fn configure_threads() -> Result<(), CliError> {
    match std::env::var("FLASH_SIM_THREADS") {
        Ok(v) => {
            let n: usize = num("FLASH_SIM_THREADS", v.trim())?;
            if n > 0 {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| CliError::Usage(format!("FLASH_SIM_THREADS: {e}")))?;
            }
            Ok(())
        }
        Err(_) => Ok(()),
    }
}
