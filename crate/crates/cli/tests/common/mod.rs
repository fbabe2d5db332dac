#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankfit_core::archive::Archive;
use rankfit_core::decomposition::CpFactors;
use rankfit_core::DenseTensor;

pub fn rankfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rankfit")).args(args).output().expect("binary runs")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Values land on f32 so archives round-trip the tensor exactly.
fn f32_tensor(dims: Vec<usize>, data: Vec<f64>) -> DenseTensor {
    DenseTensor::new(dims, data.into_iter().map(|v| v as f32 as f64).collect()).unwrap()
}

pub fn random_kernel(dims: [usize; 4], seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    f32_tensor(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Exact CP rank-`rank` kernel scaled to `||W||^2 = O * C` (unit energy per filter tap row).
pub fn planted_kernel(dims: [usize; 4], rank: usize, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = dims.iter().map(|&d| (0..d * rank).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let t = CpFactors::new(dims.to_vec(), rank, factors).unwrap().reconstruct();
    let target = (dims[0] * dims[1]) as f64;
    let s = (target / t.frobenius_norm_sq()).sqrt();
    f32_tensor(dims.to_vec(), t.scale(s).into_data())
}

pub fn write_model(dir: &Path, file: &str, layers: Vec<(String, DenseTensor)>) -> PathBuf {
    let path = dir.join(file);
    Archive::from_tensors(layers).unwrap().write_file(&path).unwrap();
    path
}

/// The 19 conv kernels of a CIFAR ResNet-20 (no 1x1 shortcuts).
pub fn resnet20_shapes() -> Vec<(String, [usize; 4])> {
    let mut shapes = vec![("conv1".to_string(), [16, 3, 3, 3])];
    let mut c_in = 16;
    for (stage, width) in [16usize, 32, 64].into_iter().enumerate() {
        for block in 0..3 {
            shapes.push((format!("layer{}.{block}.conv1", stage + 1), [width, c_in, 3, 3]));
            shapes.push((format!("layer{}.{block}.conv2", stage + 1), [width, width, 3, 3]));
            c_in = width;
        }
    }
    shapes
}
