use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankfit_core::archive::{conv_layers, factors_from_archive, factors_to_archive, Archive, ArchiveError};
use rankfit_core::decomposition::{DecomposeConfig, KernelFactors};
use rankfit_core::metrics::{factors_cost, kernel_cost, model_report, output_size, CompressionReport};
use rankfit_core::report::{build_report, read_report, write_report, ReportError, RunReport};
use rankfit_core::search::{final_decompose, run_search, SearchConfig, SearchSpace};
use rankfit_core::{conv2d_dense, ConvKernel, DenseTensor, Error};
use serde::Serialize;

use crate::{DecomposeArgs, ReportArgs, SearchArgs, SearchOptions, SweepArgs, VerifyArgs};

pub const VERIFY_TOLERANCE: f64 = 1e-6;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Diverged { .. } | Error::NonFinite(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read_archive(path: &Path) -> Result<Archive> {
    Archive::read_file(path).map_err(|e| match e {
        ArchiveError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    archive.write_file(path).map_err(|e| match e {
        ArchiveError::NonFinite(_) => CliError::Numerical(e.to_string()),
        other => CliError::Io(format!("{}: {other}", path.display())),
    })
}

fn read_run_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    read_report(&text).map_err(|e: ReportError| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn model_layers(path: &Path) -> Result<Vec<(String, ConvKernel)>> {
    Ok(conv_layers(&read_archive(path)?))
}

fn broadcast(values: &[usize], n: usize, flag: &str) -> Result<Vec<usize>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values.to_vec()),
        len => Err(CliError::Usage(format!("--{flag} has {len} values for {n} layers"))),
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(f))
}

fn search_config(opts: &SearchOptions, gamma: f64, beta: f64) -> SearchConfig {
    SearchConfig {
        gamma,
        beta,
        lr_weights: opts.lr_w,
        lr_alpha: opts.lr_alpha,
        iterations_per_phase: opts.iters,
        cosine: !opts.no_cosine,
        momentum: opts.momentum,
        seed: opts.seed,
        init_scale: opts.init_scale,
    }
}

fn run_one(opts: &SearchOptions, layers: &[(String, ConvKernel)], gamma: f64, beta: f64) -> Result<RunReport> {
    let n = layers.len();
    let space = SearchSpace { lower: broadcast(&opts.lb, n, "lb")?, upper: broadcast(&opts.ub, n, "ub")?, step: opts.step };
    let cfg = search_config(opts, gamma, beta);
    let kernels: Vec<ConvKernel> = layers.iter().map(|(_, k)| k.clone()).collect();
    let search = with_threads(opts.threads, || run_search(&kernels, opts.decomp, &space, &cfg))??;
    let g = &opts.geometry;
    Ok(build_report(layers, search, g.input_size, g.stride, g.padding)?)
}

pub fn search(a: SearchArgs) -> Result<()> {
    let layers = model_layers(&a.opts.model)?;
    let report = run_one(&a.opts, &layers, a.gamma, a.beta)?;
    write_text(&a.out, &write_report(&report))
}

#[derive(Serialize)]
struct DecomposedLayer<'a> {
    name: &'a str,
    rank: usize,
    relative_error: f64,
}

#[derive(Serialize)]
struct DecomposeSummary<'a> {
    decomposition: String,
    layers: Vec<DecomposedLayer<'a>>,
}

pub fn decompose(a: DecomposeArgs) -> Result<()> {
    let layers = model_layers(&a.model)?;
    let report = read_run_report(&a.report)?;
    let mut ranks = Vec::with_capacity(layers.len());
    for (name, k) in &layers {
        let entry = report
            .layers
            .iter()
            .find(|l| &l.name == name)
            .ok_or_else(|| CliError::Usage(format!("report has no selected rank for layer {name:?}")))?;
        if entry.shape[..] != *k.tensor().dims() {
            return Err(CliError::Usage(format!(
                "layer {name:?} is {:?} in the model but {:?} in the report",
                k.tensor().dims(),
                entry.shape
            )));
        }
        ranks.push(entry.selected_rank);
    }
    let cfg = DecomposeConfig {
        learning_rate: a.lr,
        iterations: a.iters,
        momentum: a.momentum,
        seed: a.seed.unwrap_or(report.search.config.seed),
        init_scale: report.search.config.init_scale,
        cosine: !a.no_cosine,
    };
    let kind = report.search.decomposition;
    let kernels: Vec<ConvKernel> = layers.iter().map(|(_, k)| k.clone()).collect();
    let fitted = with_threads(a.threads, || final_decompose(&kernels, kind, &ranks, &cfg))??;
    let factors: Vec<KernelFactors> = fitted.iter().map(|f| f.factors.clone()).collect();
    write_archive(&a.out, &factors_to_archive(&factors))?;
    let summary = DecomposeSummary {
        decomposition: kind.to_string(),
        layers: layers
            .iter()
            .zip(&ranks)
            .zip(&fitted)
            .map(|(((name, _), &rank), f)| DecomposedLayer { name, rank, relative_error: f.relative_error })
            .collect(),
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn paired_layers(model: &Path, compressed: &Path) -> Result<Vec<(String, ConvKernel, KernelFactors)>> {
    let layers = model_layers(model)?;
    let factors = factors_from_archive(&read_archive(compressed)?)
        .map_err(|e| CliError::Io(format!("{}: {e}", compressed.display())))?;
    if layers.len() != factors.len() {
        return Err(CliError::Usage(format!(
            "model has {} conv layers but the compressed archive has {}",
            layers.len(),
            factors.len()
        )));
    }
    layers
        .into_iter()
        .zip(factors)
        .map(|((name, k), f)| {
            if f.kernel_dims()[..] != *k.tensor().dims() {
                return Err(CliError::Usage(format!(
                    "layer {name:?} is {:?} but its factors describe {:?}",
                    k.tensor().dims(),
                    f.kernel_dims()
                )));
            }
            Ok((name, k, f))
        })
        .collect()
}

#[derive(Serialize)]
struct ReportOutput<'a> {
    names: Vec<&'a str>,
    ranks: Vec<(usize, usize)>,
    #[serde(flatten)]
    compression: &'a CompressionReport,
}

pub fn report(a: ReportArgs) -> Result<()> {
    let pairs = paired_layers(&a.model, &a.compressed)?;
    let [_, h, w] = a.input_size;
    let mut dense = Vec::with_capacity(pairs.len());
    let mut fact = Vec::with_capacity(pairs.len());
    for (_, k, f) in &pairs {
        let (ho, wo) = output_size(k.kernel_size(), (h, w), a.stride, a.padding)?;
        dense.push(kernel_cost(k, ho, wo)?);
        fact.push(factors_cost(f, ho, wo)?);
    }
    let summary = model_report(&dense, &fact)?;
    let out = ReportOutput {
        names: pairs.iter().map(|(n, _, _)| n.as_str()).collect(),
        ranks: pairs.iter().map(|(_, _, f)| f.ranks()).collect(),
        compression: &summary,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
        return Ok(());
    }
    println!(
        "{:<24} {:>9} {:>12} {:>12} {:>9} {:>14} {:>14} {:>9}",
        "layer", "ranks", "params", "factored", "params%", "flops", "factored", "flops%"
    );
    for ((name, ranks), l) in out.names.iter().zip(&out.ranks).zip(&summary.layers) {
        println!(
            "{:<24} {:>9} {:>12} {:>12} {:>9.2} {:>14} {:>14} {:>9.2}{}",
            name,
            format!("{}x{}", ranks.0, ranks.1),
            l.dense.params,
            l.decomposed.params,
            l.params_reduction_pct,
            l.dense.flops,
            l.decomposed.flops,
            l.flops_reduction_pct,
            if l.expands { "  (expands)" } else { "" }
        );
    }
    println!(
        "{:<24} {:>9} {:>12} {:>12} {:>9.2} {:>14} {:>14} {:>9.2}",
        "total",
        "",
        summary.dense_total.params,
        summary.decomposed_total.params,
        summary.params_reduction_pct,
        summary.dense_total.flops,
        summary.decomposed_total.flops,
        summary.flops_reduction_pct
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    gamma: f64,
    beta: f64,
    total_rank: usize,
    params_reduction_pct: f64,
    flops_reduction_pct: f64,
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let layers = model_layers(&a.opts.model)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Io(format!("{}: {e}", a.out_dir.display())))?;
    let mut rows = Vec::new();
    for &gamma in &a.gamma_grid {
        for &beta in &a.beta_grid {
            let report = run_one(&a.opts, &layers, gamma, beta)?;
            write_text(&a.out_dir.join(format!("report_g{gamma}_b{beta}.json")), &write_report(&report))?;
            rows.push(SweepRow {
                gamma,
                beta,
                total_rank: report.search.selected_ranks.iter().sum(),
                params_reduction_pct: report.compression.params_reduction_pct,
                flops_reduction_pct: report.compression.flops_reduction_pct,
            });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let text = String::from_utf8(w.into_inner().map_err(|e| CliError::Io(e.to_string()))?).expect("utf-8 csv");
    write_text(&a.out_dir.join("sweep.csv"), &text)?;
    print!("{text}");
    Ok(())
}

/// `||a - b|| / ||b||`, or `||a - b||` when `b` is zero.
fn relative_deviation(a: &DenseTensor, b: &DenseTensor) -> f64 {
    let diff = a.sub(b).expect("same shape").frobenius_norm();
    let norm = b.frobenius_norm();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

#[derive(Serialize)]
struct VerifyLayer {
    name: String,
    factored_vs_reconstructed: f64,
    factored_vs_original: f64,
}

#[derive(Serialize)]
struct VerifySummary {
    trials: usize,
    tolerance: f64,
    layers: Vec<VerifyLayer>,
    max_factored_vs_reconstructed: f64,
    max_factored_vs_original: f64,
}

pub fn verify(a: VerifyArgs) -> Result<()> {
    let pairs = paired_layers(&a.model, &a.compressed)?;
    let [_, h, w] = a.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut layers = Vec::with_capacity(pairs.len());
    for (name, k, f) in &pairs {
        let recon = f.reconstruct_kernel();
        let c = k.in_channels();
        let (mut dev_recon, mut dev_orig) = (0.0f64, 0.0f64);
        for _ in 0..a.trials {
            let data = (0..c * h * w).map(|_| if a.zero_input { 0.0 } else { rng.gen_range(-1.0..1.0) }).collect();
            let x = DenseTensor::new(vec![c, h, w], data).expect("input shape");
            let y = f.forward(&x, a.stride, a.padding)?;
            dev_recon = dev_recon.max(relative_deviation(&y, &conv2d_dense(&recon, &x, a.stride, a.padding)?));
            dev_orig = dev_orig.max(relative_deviation(&y, &conv2d_dense(k, &x, a.stride, a.padding)?));
        }
        layers.push(VerifyLayer { name: name.clone(), factored_vs_reconstructed: dev_recon, factored_vs_original: dev_orig });
    }
    let summary = VerifySummary {
        trials: a.trials,
        tolerance: VERIFY_TOLERANCE,
        max_factored_vs_reconstructed: layers.iter().map(|l| l.factored_vs_reconstructed).fold(0.0, f64::max),
        max_factored_vs_original: layers.iter().map(|l| l.factored_vs_original).fold(0.0, f64::max),
        layers,
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    if summary.max_factored_vs_reconstructed > VERIFY_TOLERANCE {
        return Err(CliError::Numerical(format!(
            "factored forward deviates from the reconstructed kernel by {:e}",
            summary.max_factored_vs_reconstructed
        )));
    }
    Ok(())
}
