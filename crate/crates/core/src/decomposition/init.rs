//! Seeded uniform initialization scaled to the target's energy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::DenseTensor;

use super::{CpFactors, Factors, RankSpec, TtFactors};

/// splitmix64 finalizer, used to derive independent streams per rank.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Half-width `a` of `U(-a, a)` such that the expected squared norm of the
/// reconstruction equals `||w||^2`: each entry is a sum over `paths`
/// products of `order` independent draws of variance `a^2 / 3`.
fn amplitude(w: &DenseTensor, paths: usize, order: usize, scale: f64) -> f64 {
    let energy = w.frobenius_norm_sq() / (paths as f64 * w.numel() as f64);
    scale * 3f64.sqrt() * energy.powf(1.0 / (2.0 * order as f64))
}

fn draw(rng: &mut ChaCha8Rng, n: usize, a: f64) -> Vec<f64> {
    if a == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

fn rank_salt(rank: &RankSpec) -> u64 {
    match rank {
        RankSpec::Cp(r) => *r as u64,
        RankSpec::Tt(rs) => rs.iter().fold(0x7474u64, |acc, &r| mix_seed(acc, r as u64)),
    }
}

pub fn uniform_cp(w: &DenseTensor, rank: usize, scale: f64, seed: u64) -> Result<CpFactors> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, rank_salt(&RankSpec::Cp(rank))));
    let a = amplitude(w, rank, w.order(), scale);
    let factors = w.dims().iter().map(|&d| draw(&mut rng, d * rank, a)).collect();
    CpFactors::new(w.dims().to_vec(), rank, factors)
}

pub fn uniform_tt(w: &DenseTensor, ranks: &[usize], scale: f64, seed: u64) -> Result<TtFactors> {
    let spec = RankSpec::Tt(ranks.to_vec());
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, rank_salt(&spec)));
    let paths = ranks.iter().product();
    let a = amplitude(w, paths, w.order(), scale);
    let shapes = TtFactors::zeros(w.dims().to_vec(), ranks.to_vec())?;
    let cores = shapes.cores().iter().map(|c| draw(&mut rng, c.len(), a)).collect();
    TtFactors::new(w.dims().to_vec(), ranks.to_vec(), cores)
}

/// Deterministic starting point for a fit of `w` at `rank`.
pub fn initial_factors(w: &DenseTensor, rank: &RankSpec, scale: f64, seed: u64) -> Result<Factors> {
    match rank {
        RankSpec::Cp(r) => uniform_cp(w, *r, scale, seed).map(Factors::Cp),
        RankSpec::Tt(rs) => uniform_tt(w, rs, scale, seed).map(Factors::Tt),
    }
}
