//! Communication bit counts and training FLOPs.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::config::Algorithm;
use crate::error::{FlashError, Result};
use crate::mask::SparseMask;
use crate::model::{LayerGeometry, MaskedModel};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum CommMode {
    /// Every position as a value.
    Dense,
    /// Values, column indices and row pointers over the tensor flattened to
    /// `(dim0, rest)`.
    Csr,
    /// Values plus a one-bit-per-position occupancy map.
    Bitmap,
    /// Values of live positions only; the receiver already knows the mask.
    ValueOnly,
}

impl FromStr for CommMode {
    type Err = FlashError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(CommMode::Dense),
            "csr" => Ok(CommMode::Csr),
            "bitmap" => Ok(CommMode::Bitmap),
            "value-only" | "value_only" => Ok(CommMode::ValueOnly),
            _ => Err(FlashError::Config(format!("unknown comm mode `{s}`"))),
        }
    }
}

impl fmt::Display for CommMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CommMode::Dense => "dense",
            CommMode::Csr => "csr",
            CommMode::Bitmap => "bitmap",
            CommMode::ValueOnly => "value-only",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CommModel {
    pub mode: CommMode,
    pub value_bits: u64,
    pub index_bits: u64,
    pub pointer_bits: u64,
}

impl CommModel {
    /// 32-bit values, indices and pointers.
    pub fn new(mode: CommMode) -> Self {
        Self {
            mode,
            value_bits: 32,
            index_bits: 32,
            pointer_bits: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("value_bits", self.value_bits),
            ("index_bits", self.index_bits),
            ("pointer_bits", self.pointer_bits),
        ] {
            if ![8, 16, 32, 64].contains(&b) {
                return Err(FlashError::Config(format!("{name} = {b}, expected 8, 16, 32 or 64")));
            }
        }
        Ok(())
    }
}

/// Bits needed to ship one weight tensor with `nnz` live entries out of `k`,
/// `rows` being its first dimension.
pub fn layer_comm_bits(nnz: usize, k: usize, rows: usize, comm: &CommModel) -> u64 {
    let (nnz, k, rows) = (nnz as u64, k as u64, rows as u64);
    match comm.mode {
        CommMode::Dense => k * comm.value_bits,
        CommMode::Csr => nnz * (comm.value_bits + comm.index_bits) + (rows + 1) * comm.pointer_bits,
        CommMode::Bitmap => nnz * comm.value_bits + k,
        CommMode::ValueOnly => nnz * comm.value_bits,
    }
}

/// Bits for a whole model: weights per `comm`, biases always dense. Without
/// `include_mask` the sparse modes send live values only.
pub fn model_comm_bits<T: Scalar>(model: &MaskedModel<T>, comm: &CommModel, include_mask: bool) -> u64 {
    let biases: usize = model.biases().iter().map(|b| b.len()).sum();
    masked_comm_bits(model.mask(), biases, comm, include_mask)
}

/// [`model_comm_bits`] from the mask and the bias count alone.
pub fn masked_comm_bits(mask: &SparseMask, biases: usize, comm: &CommModel, include_mask: bool) -> u64 {
    let weights: u64 = mask
        .layers()
        .iter()
        .map(|m| {
            let (nnz, k, rows) = (m.nnz(), m.len(), m.shape()[0]);
            if include_mask || comm.mode == CommMode::Dense {
                layer_comm_bits(nnz, k, rows, comm)
            } else {
                nnz as u64 * comm.value_bits
            }
        })
        .sum();
    weights + biases as u64 * comm.value_bits
}

/// Bits for the stage-1 sensitivity upload: `layers` densities from each of
/// `clients` warm-up clients at 32 bits.
pub fn stage1_overhead_bits(layers: usize, clients: usize) -> u64 {
    layers as u64 * clients as u64 * 32
}

/// Per-sample multiply-accumulate counts of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FlopsBreakdown {
    pub f_fwd: f64,
    pub f_back_in: f64,
    pub f_back_wt: f64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.f_fwd + self.f_back_in + self.f_back_wt
    }
}

impl std::ops::Add for FlopsBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            f_fwd: self.f_fwd + o.f_fwd,
            f_back_in: self.f_back_in + o.f_back_in,
            f_back_wt: self.f_back_wt + o.f_back_wt,
        }
    }
}

/// Training FLOPs of one layer at weight density `d`: forward and
/// input-gradient work scale with `d`; weight-gradient work scales with `d`
/// only when the algorithm never needs gradients at masked positions.
pub fn layer_train_flops(g: &LayerGeometry, d: f64, algo: Algorithm) -> FlopsBreakdown {
    let base = (g.in_channels * g.kernel_h * g.kernel_w * g.out_channels) as f64;
    let out_area = (g.out_h * g.out_w) as f64;
    let in_area = (g.in_h * g.in_w) as f64;
    let s_a = if algo.dense_weight_grad() { 1.0 } else { d };
    FlopsBreakdown {
        f_fwd: d * base * out_area,
        f_back_in: d * base * in_area,
        f_back_wt: s_a * base * in_area,
    }
}

/// Per-sample training FLOPs of a network with per-layer densities.
pub fn model_train_flops(geometry: &[LayerGeometry], densities: &[f64], algo: Algorithm) -> FlopsBreakdown {
    geometry
        .iter()
        .zip(densities)
        .map(|(g, &d)| layer_train_flops(g, d, algo))
        .fold(FlopsBreakdown::default(), |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    #[test]
    fn csr_example() {
        assert_eq!(layer_comm_bits(100, 1000, 10, &CommModel::new(CommMode::Csr)), 6752);
        assert_eq!(layer_comm_bits(100, 1000, 10, &CommModel::new(CommMode::Bitmap)), 4200);
        assert_eq!(layer_comm_bits(100, 1000, 10, &CommModel::new(CommMode::Dense)), 32000);
        assert_eq!(layer_comm_bits(100, 1000, 10, &CommModel::new(CommMode::ValueOnly)), 3200);
    }

    #[test]
    fn full_density_csr_exceeds_dense() {
        let csr = layer_comm_bits(50, 50, 5, &CommModel::new(CommMode::Csr));
        assert!(csr > layer_comm_bits(50, 50, 5, &CommModel::new(CommMode::Dense)));
    }

    #[test]
    fn conv1_flops() {
        let g = ModelSpec::mnist_net().geometry()[0];
        let f = layer_train_flops(&g, 1.0, Algorithm::Spdst);
        assert_eq!(f.f_fwd, 144_000.0);
        assert_eq!(f.f_back_in, 196_000.0);
        let j = layer_train_flops(&g, 0.1, Algorithm::Jmwst);
        let s = layer_train_flops(&g, 0.1, Algorithm::Spdst);
        assert!((j.f_back_wt / s.f_back_wt - 10.0).abs() < 1e-12);
    }

    #[test]
    fn overhead() {
        assert_eq!(stage1_overhead_bits(4, 10), 1280);
        assert_eq!(stage1_overhead_bits(4, 1), 128);
    }

    #[test]
    fn bit_widths_validated() {
        let mut c = CommModel::new(CommMode::Csr);
        c.index_bits = 12;
        assert!(c.validate().is_err());
        assert_eq!("value-only".parse::<CommMode>().unwrap(), CommMode::ValueOnly);
    }
}
