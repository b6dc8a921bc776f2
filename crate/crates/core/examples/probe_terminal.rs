use nalgebra::Vector2;
use stmpc_core::lpv::{PolytopeVertices, SchedulingBounds};
use stmpc_core::plant::PlantParams;
use stmpc_core::qp::QpSolver;
use stmpc_core::tracking::*;

fn main() {
    let p = PlantParams::default();
    let bounds = SchedulingBounds::from_state_box(&p, 20.0, 200.0, 20.0, 150.0).unwrap();
    println!("envelope rho: [{:.3}, {:.3}] x [{:.3}, {:.3}]",
        bounds.rho1_min, bounds.rho1_max, bounds.rho2_min, bounds.rho2_max);
    let env = PolytopeVertices::new(&p, 3.0, bounds).unwrap();
    let cons = Constraints::from_params(&p);
    let target = steady_pair_for(97.0, Vector2::new(684.0, 25.0), &p, None).unwrap();
    println!("target: x_s = ({:.4}, {:.4}), u_s = {:.6e}", target.x_s[0], target.x_s[1], target.u_s);
    let q = nalgebra::Matrix2::new(1.0, 0.0, 0.0, 10.0);
    let term = synthesize_terminal(&env, &q, 100.0, 1.0e10, &cons, &target, 500).unwrap();
    println!("kappa = [{:.6e}, {:.6e}]", term.kappa[0], term.kappa[1]);
    println!("P = [[{:.4}, {:.4}],[{:.4}, {:.4}]]", term.p[(0,0)], term.p[(0,1)], term.p[(1,0)], term.p[(1,1)]);
    let (lo, hi) = term.x_f.bounding_box().unwrap();
    println!("X_f bbox: e1 in [{:.4}, {:.4}], e2 in [{:.4}, {:.4}] ({} rows)", lo[0], hi[0], lo[1], hi[1], term.x_f.rows());

    // Cold-start QP feasibility probe.
    let verts = PolytopeVertices::full(&p, 3.0).unwrap();
    let cfg = TrackingConfig::new(ControllerMode::Ampc);
    let preview = vec![Vector2::new(684.0, 25.0); cfg.n];
    let qp = build_tracking_qp(
        &Vector2::new(60.0, 50.0),
        &stmpc_core::lpv::MembershipWeights::uniform(),
        &verts, &target, &preview, &cfg, &term, &cons,
    ).unwrap();
    let mut solver = QpSolver::default();
    let sol = solver.solve(&qp.problem, None).unwrap();
    println!("cold-start QP status: {:?}, phase1 violation {:?}", sol.status, sol.phase1_violation);
}
