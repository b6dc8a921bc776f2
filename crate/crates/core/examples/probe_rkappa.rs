use nalgebra::Vector2;
use stmpc_core::lpv::{PolytopeVertices, SchedulingBounds};
use stmpc_core::plant::PlantParams;
use stmpc_core::tracking::*;

fn main() {
    let p = PlantParams::default();
    let bounds = SchedulingBounds::from_state_box(&p, 20.0, 200.0, 20.0, 150.0).unwrap();
    let env = PolytopeVertices::new(&p, 3.0, bounds).unwrap();
    let cons = Constraints::from_params(&p);
    let target = steady_pair_for(97.0, Vector2::new(684.0, 25.0), &p, None).unwrap();
    let q = nalgebra::Matrix2::new(1.0, 0.0, 0.0, 10.0);
    for r_kappa in [1e4, 1e6, 1e7, 1e8, 1e9, 1e10, 1e11] {
        match synthesize_terminal(&env, &q, 100.0, r_kappa, &cons, &target, 500) {
            Ok(term) => {
                let (lo, hi) = term.x_f.bounding_box().unwrap();
                println!(
                    "r_kappa={r_kappa:.0e}: kappa=({:.3e},{:.3e})  X_f e1 [{:.2},{:.2}] e2 [{:.3},{:.3}] rows {}",
                    term.kappa[0], term.kappa[1], lo[0], hi[0], lo[1], hi[1], term.x_f.rows()
                );
            }
            Err(e) => println!("r_kappa={r_kappa:.0e}: FAILED: {e}"),
        }
    }
}
