//! Receding-horizon control while the ground spring softens mid-run: the
//! recursively updated projector against one frozen at the start.

use softproj::cli::{online_pair, ExperimentConfig};

fn main() -> softproj::error::Result<()> {
    let exp = ExperimentConfig::default();
    let oc = &exp.online;
    let pair = online_pair(&exp, 0)?;
    println!("ground spring 1 -> {} at step {}", oc.ground_spring_after, oc.change_at);
    println!("{:>5} {:>12} {:>12} {:>10}", "steps", "adaptive", "frozen", "delta_t");
    for k in (0..oc.t_sim).step_by(50) {
        let end = (k + 50).min(oc.t_sim);
        println!(
            "{:>5} {:>12.3} {:>12.3} {:>10.3}",
            format!("{k}-"),
            pair.adaptive.cost_between(k, end),
            pair.frozen.cost_between(k, end),
            pair.adaptive.rows[end - 1].delta_t
        );
    }
    let s = pair.summary;
    println!("second half: adaptive {:.3}, frozen {:.3}", s.adaptive_second_half, s.frozen_second_half);
    Ok(())
}
