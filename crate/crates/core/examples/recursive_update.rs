//! Feeds new trajectories into the projector one column at a time and
//! compares with a batch rebuild.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use softproj::recursive::RecursiveState;

fn main() -> softproj::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20;
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let h0 = DMatrix::from_fn(n, 40, |_, _| normal());
    let w = DMatrix::identity(n, n);

    let mut frozen = RecursiveState::init(&h0, &w, 1e-3)?.with_frozen_schedule(true);
    let mut live = RecursiveState::init(&h0, &w, 1e-3)?.with_rebase_every(Some(100));
    for t in 1..=250 {
        let col = DVector::from_fn(n, |_, _| normal());
        frozen.update(&col)?;
        live.update(&col)?;
        if t % 50 == 0 {
            println!(
                "t {t:3}  delta {:8.4}  drift frozen {:.1e}  live {:.1e}",
                live.delta_t,
                frozen.drift()?,
                live.drift()?
            );
        }
    }
    Ok(())
}
