//! Noise-free data from the two-disc plant span exactly its restricted
//! behavior: rank mL + n and a vanishing subspace gap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softproj::behavior::{behavior_basis, build_data_matrix, gap_metric, Subspace};
use softproj::linalg::{numerical_rank, truncated_left_basis};
use softproj::plant::{case_study_plant, collect_excitation_data, NoiseConfig};

fn main() -> softproj::error::Result<()> {
    let plant = case_study_plant();
    let l = 14;
    let data = collect_excitation_data(&plant, 200, 1.0, &NoiseConfig::noiseless(&plant), &mut ChaCha8Rng::seed_from_u64(5))?;
    let h = build_data_matrix(&data.u, &data.y, l, 2, 12)?;
    let rank = numerical_rank(&h.h);
    println!("H is {}x{}, rank {rank} (mL + n = {})", h.h.nrows(), h.h.ncols(), plant.m() * l + plant.n());

    let exact = behavior_basis(&plant.a, &plant.b, &plant.c, l)?;
    let from_data = Subspace::new(truncated_left_basis(&h.h, rank))?;
    println!("gap to the true behavior: {:.2e}", gap_metric(&exact, &from_data)?);
    Ok(())
}
