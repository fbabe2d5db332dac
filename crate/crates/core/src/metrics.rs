//! Parameter and FLOP accounting for dense and factored convolutions.
//!
//! FLOPs count a multiply-accumulate as two operations, and every stage of
//! a factored pipeline is charged at the output resolution.

use serde::{Deserialize, Serialize};

use crate::decomposition::KernelFactors;
use crate::error::{Error, Result};
use crate::tensor::{conv_output_size, ConvKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerCost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for LayerCost {
    type Output = LayerCost;
    fn add(self, rhs: LayerCost) -> LayerCost {
        LayerCost { params: self.params + rhs.params, flops: self.flops + rhs.flops }
    }
}

impl std::iter::Sum for LayerCost {
    fn sum<I: Iterator<Item = LayerCost>>(iter: I) -> LayerCost {
        iter.fold(LayerCost::default(), |a, b| a + b)
    }
}

fn positive(what: &str, vals: &[usize]) -> Result<()> {
    if vals.contains(&0) {
        return Err(Error::ShapeMismatch(format!("{what} must be positive, got {vals:?}")));
    }
    Ok(())
}

fn cost(params: usize, macs_per_pixel: usize, h_out: usize, w_out: usize) -> LayerCost {
    LayerCost { params: params as u64, flops: 2 * (macs_per_pixel as u64) * (h_out as u64) * (w_out as u64) }
}

/// Dense `(O, C, k1, k2)` convolution producing an `h_out x w_out` map.
pub fn dense_cost(o: usize, c: usize, k1: usize, k2: usize, h_out: usize, w_out: usize) -> Result<LayerCost> {
    positive("kernel dims", &[o, c, k1, k2])?;
    let p = o * c * k1 * k2;
    Ok(cost(p, p, h_out, w_out))
}

/// Four-stage CP pipeline of rank `r`.
pub fn cp_cost(o: usize, c: usize, k1: usize, k2: usize, r: usize, h_out: usize, w_out: usize) -> Result<LayerCost> {
    positive("kernel dims and rank", &[o, c, k1, k2, r])?;
    let p = r * (o + c + k1 + k2);
    Ok(cost(p, p, h_out, w_out))
}

/// Three-stage TT pipeline with bond ranks `(r1, r2)`.
#[allow(clippy::too_many_arguments)]
pub fn tt_cost(
    o: usize,
    c: usize,
    k1: usize,
    k2: usize,
    r1: usize,
    r2: usize,
    h_out: usize,
    w_out: usize,
) -> Result<LayerCost> {
    positive("kernel dims and ranks", &[o, c, k1, k2, r1, r2])?;
    let p = o * r1 + r1 * k1 * k2 * r2 + c * r2;
    Ok(cost(p, p, h_out, w_out))
}

/// Output spatial size of a kernel applied to an `h x w` input.
pub fn output_size(kernel_hw: (usize, usize), input_hw: (usize, usize), stride: usize, padding: usize) -> Result<(usize, usize)> {
    Ok((
        conv_output_size(input_hw.0, kernel_hw.0, stride, padding)?,
        conv_output_size(input_hw.1, kernel_hw.1, stride, padding)?,
    ))
}

pub fn kernel_cost(kernel: &ConvKernel, h_out: usize, w_out: usize) -> Result<LayerCost> {
    let [o, c, k1, k2]: [usize; 4] = kernel.tensor().dims().try_into().expect("4-way kernel");
    dense_cost(o, c, k1, k2, h_out, w_out)
}

pub fn factors_cost(f: &KernelFactors, h_out: usize, w_out: usize) -> Result<LayerCost> {
    let [o, c, k1, k2] = f.kernel_dims();
    match f {
        KernelFactors::Cp(cp) => cp_cost(o, c, k1, k2, cp.rank(), h_out, w_out),
        KernelFactors::Tt(tt) => {
            let (r1, r2) = tt.ranks();
            tt_cost(o, c, k1, k2, r1, r2, h_out, w_out)
        }
    }
}

/// `100 * (1 - decomposed / dense)`; zero when the dense total is zero.
pub fn reduction_pct(dense: u64, decomposed: u64) -> f64 {
    if dense == 0 {
        0.0
    } else {
        100.0 * (1.0 - decomposed as f64 / dense as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReduction {
    pub dense: LayerCost,
    pub decomposed: LayerCost,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
    /// The factored layer has at least as many parameters as the dense one.
    pub expands: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerReduction>,
    pub dense_total: LayerCost,
    pub decomposed_total: LayerCost,
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
}

pub fn model_report(dense: &[LayerCost], decomposed: &[LayerCost]) -> Result<CompressionReport> {
    if dense.len() != decomposed.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} dense layers but {} decomposed layers",
            dense.len(),
            decomposed.len()
        )));
    }
    let layers = dense
        .iter()
        .zip(decomposed)
        .map(|(&d, &f)| LayerReduction {
            dense: d,
            decomposed: f,
            params_reduction_pct: reduction_pct(d.params, f.params),
            flops_reduction_pct: reduction_pct(d.flops, f.flops),
            expands: f.params >= d.params,
        })
        .collect();
    let dense_total: LayerCost = dense.iter().copied().sum();
    let decomposed_total: LayerCost = decomposed.iter().copied().sum();
    Ok(CompressionReport {
        layers,
        dense_total,
        decomposed_total,
        params_reduction_pct: reduction_pct(dense_total.params, decomposed_total.params),
        flops_reduction_pct: reduction_pct(dense_total.flops, decomposed_total.flops),
    })
}
