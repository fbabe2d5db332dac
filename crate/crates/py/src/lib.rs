//! Python bindings: archives, rank-set helpers, cost formulas, single-rank
//! fits and the rank search.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use rankfit_core::archive::{conv_layers, Archive, ArchiveError};
use rankfit_core::decomposition::{decompose_sgd, DecompKind, DecomposeConfig};
use rankfit_core::report::{build_report, write_report};
use rankfit_core::search::{self, SearchConfig, SearchSpace};
use rankfit_core::{metrics, DenseTensor, Error};

fn core_err(e: Error) -> PyErr {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn archive_err(e: ArchiveError) -> PyErr {
    match e {
        ArchiveError::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn kind(name: &str) -> PyResult<DecompKind> {
    name.parse().map_err(core_err)
}

type Entry = (String, Vec<usize>, Vec<f64>);

/// Reads an `.otar` file into `(name, shape, flat row-major values)` tuples.
#[pyfunction]
fn read_archive(path: &str) -> PyResult<Vec<Entry>> {
    let a = Archive::read_file(path).map_err(archive_err)?;
    Ok(a.into_tensors().into_iter().map(|(n, t)| (n, t.dims().to_vec(), t.into_data())).collect())
}

/// Writes `(name, shape, values)` tuples as an `.otar` file.
#[pyfunction]
fn write_archive(path: &str, entries: Vec<Entry>) -> PyResult<()> {
    let mut a = Archive::new();
    for (name, shape, data) in entries {
        a.push(name, DenseTensor::new(shape, data).map_err(core_err)?).map_err(archive_err)?;
    }
    a.write_file(path).map_err(archive_err)
}

#[pyfunction]
fn rss_function(lower: Vec<usize>, upper: Vec<usize>, step: usize) -> PyResult<Vec<Vec<usize>>> {
    let n = lower.len();
    Ok(search::rss_function(&lower, &upper, step, n).map_err(core_err)?.into_iter().map(|s| s.ranks).collect())
}

/// Returns `(lower, upper, new_step)`.
#[pyfunction]
fn refine_search_space(
    selected: Vec<usize>,
    step: usize,
    limits: Vec<(usize, usize)>,
) -> PyResult<(Vec<usize>, Vec<usize>, usize)> {
    let r = search::refine_search_space(&selected, step, &limits).map_err(core_err)?;
    Ok((r.lower, r.upper, r.step))
}

/// `(params, flops)` of a layer. `ranks` is empty for dense, `[r]` for CP
/// and `[r1, r2]` for TT.
#[pyfunction]
#[pyo3(signature = (kernel, ranks, output_hw=(1, 1)))]
fn layer_cost(kernel: [usize; 4], ranks: Vec<usize>, output_hw: (usize, usize)) -> PyResult<(u64, u64)> {
    let [o, c, k1, k2] = kernel;
    let (h, w) = output_hw;
    let cost = match ranks[..] {
        [] => metrics::dense_cost(o, c, k1, k2, h, w),
        [r] => metrics::cp_cost(o, c, k1, k2, r, h, w),
        [r1, r2] => metrics::tt_cost(o, c, k1, k2, r1, r2, h, w),
        _ => return Err(PyValueError::new_err("ranks must have 0, 1 or 2 entries")),
    }
    .map_err(core_err)?;
    Ok((cost.params, cost.flops))
}

/// Fits a single-rank decomposition of a `(O, C, k1, k2)` kernel and returns
/// `(relative_error, loss_trace)`.
#[pyfunction]
#[pyo3(signature = (shape, data, decomp, rank, iterations=1000, learning_rate=0.1, seed=0))]
fn decompose(
    shape: Vec<usize>,
    data: Vec<f64>,
    decomp: &str,
    rank: usize,
    iterations: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<(f64, Vec<f64>)> {
    let kind = kind(decomp)?;
    let kernel = rankfit_core::ConvKernel::new(DenseTensor::new(shape, data).map_err(core_err)?).map_err(core_err)?;
    let target = kind.target(&kernel);
    let cfg = DecomposeConfig { iterations, learning_rate, seed, ..Default::default() };
    let out = decompose_sgd(&target, &kind.rank_spec(rank, target.order()), &cfg).map_err(core_err)?;
    let norm = target.frobenius_norm();
    let err = if norm == 0.0 { out.final_loss.sqrt() } else { out.final_loss.sqrt() / norm };
    Ok((err, out.losses))
}

/// Runs the rank search on the conv layers of an `.otar` model and returns
/// the report as JSON text.
#[pyfunction]
#[pyo3(signature = (model, decomp, lower, upper, step, gamma=0.2, beta=0.6, iterations=1000, seed=0))]
#[allow(clippy::too_many_arguments)]
fn search_ranks(
    model: &str,
    decomp: &str,
    lower: usize,
    upper: usize,
    step: usize,
    gamma: f64,
    beta: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<String> {
    let kind = kind(decomp)?;
    let layers = conv_layers(&Archive::read_file(model).map_err(archive_err)?);
    let kernels: Vec<_> = layers.iter().map(|(_, k)| k.clone()).collect();
    let cfg = SearchConfig { gamma, beta, iterations_per_phase: iterations, seed, ..Default::default() };
    let space = SearchSpace::uniform(layers.len(), lower, upper, step);
    let report = search::run_search(&kernels, kind, &space, &cfg).map_err(core_err)?;
    Ok(write_report(&build_report(&layers, report, None, 1, 0).map_err(core_err)?))
}

#[pymodule]
fn rankfit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(read_archive, m)?)?;
    m.add_function(wrap_pyfunction!(write_archive, m)?)?;
    m.add_function(wrap_pyfunction!(rss_function, m)?)?;
    m.add_function(wrap_pyfunction!(refine_search_space, m)?)?;
    m.add_function(wrap_pyfunction!(layer_cost, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(search_ranks, m)?)?;
    Ok(())
}
