#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rankfit_core::decomposition::CpFactors;
use rankfit_core::{ConvKernel, DenseTensor};

pub fn random_tensor(dims: Vec<usize>, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    DenseTensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_cp(dims: &[usize], rank: usize, seed: u64) -> CpFactors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors = dims
        .iter()
        .map(|&d| (0..d * rank).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    CpFactors::new(dims.to_vec(), rank, factors).unwrap()
}

pub fn planted_kernel(dims: [usize; 4], rank: usize, seed: u64) -> ConvKernel {
    ConvKernel::new(random_cp(&dims, rank, seed).reconstruct()).unwrap()
}

pub fn rel_err(a: &DenseTensor, b: &DenseTensor) -> f64 {
    a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1e-300)
}

/// Entry of `[[V]]` by direct summation.
pub fn cp_entry(f: &CpFactors, idx: &[usize]) -> f64 {
    (0..f.rank())
        .map(|r| idx.iter().enumerate().map(|(n, &i)| f.factor(n)[i * f.rank() + r]).product::<f64>())
        .sum()
}
