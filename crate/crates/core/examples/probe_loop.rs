use nalgebra::Vector2;
use stmpc_core::lpv::{PolytopeVertices, SchedulingBounds};
use stmpc_core::mhe::{MheConfig, MheEstimator};
use stmpc_core::plant::{integrate_step, Exogenous, PlantParams, PlantState};
use stmpc_core::qp::QpSolver;
use stmpc_core::tracking::*;

fn main() {
    let p = PlantParams::default();
    let bounds = SchedulingBounds::from_state_box(&p, 20.0, 200.0, 20.0, 150.0).unwrap();
    let env = PolytopeVertices::new(&p, 3.0, bounds).unwrap();
    let cons = Constraints::from_params(&p);
    let target = steady_pair_for(97.0, Vector2::new(684.0, 25.0), &p, None).unwrap();
    let q = nalgebra::Matrix2::new(1.0, 0.0, 0.0, 10.0);
    let term = synthesize_terminal(&env, &q, 100.0, 1.0e10, &cons, &target, 500).unwrap();
    let verts = PolytopeVertices::full(&p, 3.0).unwrap();
    let cfg = TrackingConfig::new(ControllerMode::Ampc);
    let mut ctl = TrackingController::new(cfg, verts.clone(), term, cons, p, QpSolver::default());
    let mut est = MheEstimator::new(MheConfig::default(), QpSolver::default());
    let w = Vector2::new(684.0, 25.0);
    let mut x = PlantState::new(60.0, 50.0);
    est.seed_state(Vector2::new(x.t_p, x.t_f));
    let preview = vec![w; 10];
    let mut infeasible = 0;
    for k in 0..400 {
        let mu = est.estimate(&verts).unwrap();
        let (u, diag) = ctl
            .control_step(&LoopState {
                x: Vector2::new(x.t_p, x.t_f),
                w_preview: &preview,
                mu,
                x2_ref: 97.0,
            })
            .unwrap();
        if !diag.feasible {
            infeasible += 1;
            if infeasible < 5 {
                println!("k={k}: INFEASIBLE  x=({:.3},{:.3}) mu={:?}", x.t_p, x.t_f, mu.mu);
            }
        }
        let e = Exogenous::new(w[0], w[1], u);
        x = integrate_step(&x, &e, &p, 3.0, 10).unwrap();
        est.push_transition(u, w, Vector2::new(x.t_p, x.t_f));
        if k % 50 == 0 || k == 399 {
            println!("k={k}: x=({:.4},{:.4}) u={:.6e} mu={:?} feas={}", x.t_p, x.t_f, u, mu.mu.map(|v| (v*1000.0).round()/1000.0), diag.feasible);
        }
    }
    println!("infeasible samples: {infeasible}; final x2 err = {:.4}", (x.t_f - 97.0).abs());
}
