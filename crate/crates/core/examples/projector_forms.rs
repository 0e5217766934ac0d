//! Builds the weighted soft projector three ways and shows how `delta`
//! filters the singular directions of a data matrix.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use softproj::linalg::rel_diff;
use softproj::soft_projection::{eigen_filter, soft_projector_covariance, soft_projector_direct, soft_projector_spectral};

fn main() -> softproj::error::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (rows, cols) = (12, 60);
    let h = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let w = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(rows, |i, _| 1.0 + i as f64));

    for delta in [1e-3, 1.0, 1e3] {
        let direct = soft_projector_direct(&h, &w, delta)?;
        let cov = soft_projector_covariance(&h, &w, delta)?;
        let spec = soft_projector_spectral(&h, &w, delta)?;
        println!(
            "delta {delta:>7.0e}  direct/covariance {:.2e}  direct/spectral {:.2e}",
            rel_diff(&direct.p, &cov.p),
            rel_diff(&direct.p, &spec)
        );
    }

    println!("\nfilter factors sigma^2 / (sigma^2 + delta) at delta = 50:");
    for (s, f) in eigen_filter(&h, 50.0)?.iter().take(6) {
        println!("  sigma {s:7.3}  factor {f:.4}");
    }
    Ok(())
}
