//! Federation settings.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::accounting::{CommMode, CommModel};
use crate::error::{FlashError, Result};
use crate::mask::check_density_set;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Algorithm {
    /// Naive sparse training: random masks, per-client mask learning every round.
    Nst,
    /// Random uniform mask, frozen.
    Pdst,
    /// Sensitivity-shaped mask from a warm-up stage, frozen.
    Spdst,
    /// Sensitivity-shaped initial mask, then joint mask and weight learning.
    Jmwst,
    HeteroSpdst,
    HeteroJmwst,
}

impl Algorithm {
    pub fn is_hetero(self) -> bool {
        matches!(self, Algorithm::HeteroSpdst | Algorithm::HeteroJmwst)
    }

    /// Whether the initial mask comes from the sensitivity warm-up.
    pub fn uses_warmup(self) -> bool {
        !matches!(self, Algorithm::Nst | Algorithm::Pdst)
    }

    /// Whether clients ever update their masks.
    pub fn learns_mask(self) -> bool {
        matches!(self, Algorithm::Nst | Algorithm::Jmwst | Algorithm::HeteroJmwst)
    }

    /// Whether weight gradients are charged densely in the FLOPs model.
    pub fn dense_weight_grad(self) -> bool {
        self.learns_mask()
    }

    pub fn default_aggregation(self) -> Aggregation {
        if self.is_hetero() {
            Aggregation::Wfa
        } else {
            Aggregation::FedAvg
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Nst => "nst",
            Algorithm::Pdst => "pdst",
            Algorithm::Spdst => "spdst",
            Algorithm::Jmwst => "jmwst",
            Algorithm::HeteroSpdst => "hetero-spdst",
            Algorithm::HeteroJmwst => "hetero-jmwst",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = FlashError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "nst" => Algorithm::Nst,
            "pdst" => Algorithm::Pdst,
            "spdst" => Algorithm::Spdst,
            "jmwst" => Algorithm::Jmwst,
            "hetero-spdst" => Algorithm::HeteroSpdst,
            "hetero-jmwst" => Algorithm::HeteroJmwst,
            _ => return Err(FlashError::Config(format!("unknown algorithm `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Aggregation {
    FedAvg,
    /// Per-position average over the clients where the position is live.
    Wfa,
}

impl FromStr for Aggregation {
    type Err = FlashError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Aggregation::FedAvg),
            "wfa" => Ok(Aggregation::Wfa),
            _ => Err(FlashError::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::FedAvg => "fedavg",
            Aggregation::Wfa => "wfa",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub clients: usize,
    pub clients_per_round: usize,
    pub warmup_clients: usize,
    pub warmup_epochs: usize,
    pub density: f64,
    /// Ascending client densities for the hetero algorithms.
    pub density_set: Vec<f64>,
    /// Share of clients per entry of `density_set`; `None` picks 40/30/30
    /// (largest density first) for three densities and an even split otherwise.
    pub group_fractions: Option<Vec<f64>>,
    pub prune_rate: f64,
    pub rint: usize,
    pub algorithm: Algorithm,
    /// `None` uses the algorithm's default (WFA for hetero, FedAvg otherwise).
    pub aggregation: Option<Aggregation>,
    pub eta_init: f64,
    pub eta_end: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub comm: CommModel,
    /// Evaluate the server model every this many rounds (and always on the last).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 400,
            local_epochs: 1,
            clients: 100,
            clients_per_round: 10,
            warmup_clients: 10,
            warmup_epochs: 10,
            density: 0.1,
            density_set: vec![0.1, 0.15, 0.2],
            group_fractions: None,
            prune_rate: 0.25,
            rint: 1,
            algorithm: Algorithm::Spdst,
            aggregation: None,
            eta_init: 0.1,
            eta_end: 0.001,
            batch_size: 32,
            alpha: 1000.0,
            comm: CommModel::new(CommMode::Csr),
            eval_every: 1,
            seed: 1,
        }
    }
}

fn range_err(key: &str, value: impl fmt::Display, expected: &str) -> FlashError {
    FlashError::Config(format!("{key} = {value} is out of range ({expected})"))
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(range_err("rounds", self.rounds, "≥ 1"));
        }
        if self.clients == 0 {
            return Err(range_err("clients", self.clients, "≥ 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return Err(range_err("clients-per-round", self.clients_per_round, "1..=clients"));
        }
        if self.warmup_clients == 0 || self.warmup_clients > self.clients {
            return Err(range_err("warmup-clients", self.warmup_clients, "1..=clients"));
        }
        if self.algorithm.uses_warmup() && self.warmup_epochs == 0 {
            return Err(range_err("warmup-epochs", self.warmup_epochs, "≥ 1"));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(range_err("density", self.density, "(0, 1]"));
        }
        if self.algorithm.is_hetero() {
            check_density_set(&self.density_set)?;
            let fr = self.resolved_group_fractions();
            if fr.len() != self.density_set.len() {
                return Err(FlashError::Config(format!(
                    "{} group fractions for {} densities",
                    fr.len(),
                    self.density_set.len()
                )));
            }
            if fr.iter().any(|&f| !(f > 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(FlashError::Config(format!(
                    "group fractions {fr:?} must be positive and sum to 1"
                )));
            }
            if self.clients < self.density_set.len() {
                return Err(range_err("clients", self.clients, "at least one per density group"));
            }
        }
        if !(self.prune_rate > 0.0 && self.prune_rate < 1.0) {
            return Err(range_err("prune-rate", self.prune_rate, "(0, 1)"));
        }
        if self.rint == 0 {
            return Err(range_err("rint", self.rint, "≥ 1"));
        }
        if !(self.eta_init > 0.0 && self.eta_init.is_finite()) {
            return Err(range_err("eta-init", self.eta_init, "> 0"));
        }
        if !(self.eta_end > 0.0 && self.eta_end.is_finite()) {
            return Err(range_err("eta-end", self.eta_end, "> 0"));
        }
        if self.batch_size == 0 {
            return Err(range_err("batch-size", self.batch_size, "≥ 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(range_err("alpha", self.alpha, "> 0"));
        }
        if self.eval_every == 0 {
            return Err(range_err("eval-every", self.eval_every, "≥ 1"));
        }
        self.comm.validate()
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation.unwrap_or(self.algorithm.default_aggregation())
    }

    /// Client densities in ascending order (a single entry for the
    /// homogeneous algorithms).
    pub fn densities(&self) -> Vec<f64> {
        if self.algorithm.is_hetero() {
            self.density_set.clone()
        } else {
            vec![self.density]
        }
    }

    pub fn resolved_group_fractions(&self) -> Vec<f64> {
        if !self.algorithm.is_hetero() {
            return vec![1.0];
        }
        if let Some(f) = &self.group_fractions {
            return f.clone();
        }
        match self.density_set.len() {
            3 => vec![0.3, 0.3, 0.4],
            n => vec![1.0 / n as f64; n],
        }
    }
}
