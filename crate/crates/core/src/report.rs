//! JSON search reports.

use serde::{Deserialize, Serialize};

use crate::decomposition::DecompKind;
use crate::error::Result;
use crate::metrics::{cp_cost, dense_cost, model_report, output_size, tt_cost, CompressionReport};
use crate::search::SearchReport;
use crate::tensor::ConvKernel;

pub const REPORT_FORMAT: &str = "rankfit-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    /// `(O, C, k1, k2)`.
    pub shape: [usize; 4],
    pub selected_rank: usize,
}

/// Everything `rankfit search` records about a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub layers: Vec<LayerInfo>,
    /// `(C, H, W)` used for the FLOP counts, if given. Without it FLOPs are
    /// per output pixel.
    pub input_size: Option<[usize; 3]>,
    pub stride: usize,
    pub padding: usize,
    pub search: SearchReport,
    pub compression: CompressionReport,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("invalid report: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported report format {0:?}")]
    Format(String),
}

pub fn write_report(report: &RunReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn read_report(text: &str) -> std::result::Result<RunReport, ReportError> {
    let r: RunReport = serde_json::from_str(text)?;
    if r.format != REPORT_FORMAT {
        return Err(ReportError::Format(r.format));
    }
    Ok(r)
}

/// Output size of every layer: each one sees the same `H x W` input.
pub fn layer_output_sizes(
    kernels: &[ConvKernel],
    input_size: Option<[usize; 3]>,
    stride: usize,
    padding: usize,
) -> Result<Vec<(usize, usize)>> {
    kernels
        .iter()
        .map(|k| match input_size {
            Some([_, h, w]) => output_size(k.kernel_size(), (h, w), stride, padding),
            None => Ok((1, 1)),
        })
        .collect()
}

/// Dense vs factored cost at the given ranks, with TT bonds `(r, r)`.
pub fn compression_at_ranks(
    kernels: &[ConvKernel],
    kind: DecompKind,
    ranks: &[usize],
    outputs: &[(usize, usize)],
) -> Result<CompressionReport> {
    let mut dense = Vec::with_capacity(kernels.len());
    let mut factored = Vec::with_capacity(kernels.len());
    for ((k, &r), &(h, w)) in kernels.iter().zip(ranks).zip(outputs) {
        let [o, c, k1, k2]: [usize; 4] = k.tensor().dims().try_into().expect("4-way kernel");
        dense.push(dense_cost(o, c, k1, k2, h, w)?);
        factored.push(match kind {
            DecompKind::Cp => cp_cost(o, c, k1, k2, r, h, w)?,
            DecompKind::Tt => tt_cost(o, c, k1, k2, r, r, h, w)?,
        });
    }
    model_report(&dense, &factored)
}

pub fn build_report(
    layers: &[(String, ConvKernel)],
    search: SearchReport,
    input_size: Option<[usize; 3]>,
    stride: usize,
    padding: usize,
) -> Result<RunReport> {
    let kernels: Vec<ConvKernel> = layers.iter().map(|(_, k)| k.clone()).collect();
    let outputs = layer_output_sizes(&kernels, input_size, stride, padding)?;
    let compression = compression_at_ranks(&kernels, search.decomposition, &search.selected_ranks, &outputs)?;
    let layers = layers
        .iter()
        .zip(&search.selected_ranks)
        .map(|((name, k), &selected_rank)| LayerInfo {
            name: name.clone(),
            shape: k.tensor().dims().try_into().expect("4-way kernel"),
            selected_rank,
        })
        .collect();
    Ok(RunReport {
        format: REPORT_FORMAT.into(),
        layers,
        input_size,
        stride,
        padding,
        search,
        compression,
    })
}
