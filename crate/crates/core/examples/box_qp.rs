//! A small box-constrained QP solved by operator splitting.

use nalgebra::{dmatrix, dvector, DMatrix};
use softproj::qp::{solve, QpProblem};

fn main() -> softproj::error::Result<()> {
    // min 1/2 x'Px + q'x  s.t. -1 <= x_i <= 1, x_0 + x_1 <= 0.5
    let p = dmatrix![4.0, 1.0, 0.0; 1.0, 2.0, 0.5; 0.0, 0.5, 3.0];
    let q = dvector![-8.0, 3.0, -1.0];
    let mut a = DMatrix::zeros(4, 3);
    a.view_mut((0, 0), (3, 3)).fill_with_identity();
    a[(3, 0)] = 1.0;
    a[(3, 1)] = 1.0;
    let l = dvector![-1.0, -1.0, -1.0, f64::NEG_INFINITY];
    let u = dvector![1.0, 1.0, 1.0, 0.5];
    let sol = solve(&QpProblem::new(p, q, a, l, u)?);
    println!("status {:?} after {} iterations", sol.status, sol.iterations);
    println!("x = {:.6?}", sol.x.as_slice());
    println!("objective {:.6}", sol.objective);
    println!("multipliers {:.4?}", sol.y.as_slice());
    Ok(())
}
