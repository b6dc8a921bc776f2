//! Backward moving-horizon estimation of the membership weights.
//!
//! Over the last `N` measured transitions, find the constant membership vector
//! `mu` that best matches the vertex-blended model to the data, with a penalty
//! on the increment from the previous estimate. The model-matching errors are
//! affine in `mu`, so they are eliminated analytically and the problem reduces
//! to a 4-variable QP on the simplex.
//!
//! Identifiability note: the blended model depends on `mu` only through the two
//! effective scheduling values, so with a zero increment weight the matching
//! cost is flat along the direction `(1, -1, -1, 1)` of the simplex. Physically
//! meaningful weights are bilinear in the scheduling point and satisfy
//! `mu1*mu4 = mu2*mu3`; the estimator canonicalizes onto that manifold, which
//! picks the unique bilinear representative of the data-equivalent segment.

use crate::lpv::{blend_vertices, MembershipWeights, PolytopeVertices};
use crate::qp::{QpProblem, QpSolver, QpStatus};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, Vector2, Vector4};
use std::collections::VecDeque;

/// Measured data over the backward horizon: `N+1` states, `N` inputs, `N`
/// disturbance pairs, plus the previous membership estimate.
#[derive(Debug, Clone)]
pub struct BackwardWindow {
    pub x_hist: Vec<Vector2<f64>>,
    pub u_hist: Vec<f64>,
    pub w_hist: Vec<Vector2<f64>>,
    pub mu_prev: MembershipWeights,
}

impl BackwardWindow {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.x_hist.len() != n + 1 || self.u_hist.len() != n || self.w_hist.len() != n {
            return Err(Error::Window(format!(
                "window has {} states / {} inputs / {} disturbances, expected {}/{}/{}",
                self.x_hist.len(),
                self.u_hist.len(),
                self.w_hist.len(),
                n + 1,
                n,
                n
            )));
        }
        let finite = self
            .x_hist
            .iter()
            .all(|x| x[0].is_finite() && x[1].is_finite())
            && self.u_hist.iter().all(|u| u.is_finite())
            && self
                .w_hist
                .iter()
                .all(|w| w[0].is_finite() && w[1].is_finite());
        if !finite {
            return Err(Error::Window("window contains non-finite entries".into()));
        }
        self.mu_prev.validate(1e-9)
    }
}

/// Horizon and weights of the backward QP. Both weights default to identity.
#[derive(Debug, Clone, PartialEq)]
pub struct MheConfig {
    pub n: usize,
    pub q_e: Matrix2<f64>,
    pub q_nu: Matrix4<f64>,
}

impl Default for MheConfig {
    fn default() -> Self {
        MheConfig {
            n: 10,
            q_e: Matrix2::identity(),
            q_nu: Matrix4::identity(),
        }
    }
}

/// Per-transition regressor: column `j` is `A_j x(i) + B_j u(i)`, so the
/// model-matching error is `d_i - M_i mu` with `d_i = x(i+1) - B_w w(i)`.
fn regressors(
    win: &BackwardWindow,
    verts: &PolytopeVertices,
    n: usize,
) -> (Vec<nalgebra::Matrix2x4<f64>>, Vec<Vector2<f64>>) {
    let mut ms = Vec::with_capacity(n);
    let mut ds = Vec::with_capacity(n);
    for i in 0..n {
        let mut m = nalgebra::Matrix2x4::zeros();
        for j in 0..4 {
            let (aj, bj) = verts.vertex(j);
            let col = aj * win.x_hist[i] + bj * win.u_hist[i];
            m.set_column(j, &col);
        }
        ms.push(m);
        ds.push(win.x_hist[i + 1] - verts.b_w() * win.w_hist[i]);
    }
    (ms, ds)
}

/// Assemble the 4-variable backward QP.
///
/// Decision vector is `mu`; cost is the eliminated model-matching error plus
/// the increment penalty; constraints are the simplex conditions.
pub fn build_mhe_qp(
    win: &BackwardWindow,
    cfg: &MheConfig,
    verts: &PolytopeVertices,
) -> Result<QpProblem> {
    win.validate(cfg.n)?;
    let (ms, ds) = regressors(win, verts, cfg.n);

    let mut hess = Matrix4::zeros();
    let mut lin = Vector4::zeros();
    for i in 0..cfg.n {
        hess += ms[i].transpose() * cfg.q_e * ms[i];
        lin += ms[i].transpose() * cfg.q_e * ds[i];
    }
    hess += cfg.q_nu;
    let mu_prev = Vector4::from_row_slice(&win.mu_prev.mu);
    lin += cfg.q_nu * mu_prev;

    let q = DMatrix::from_fn(4, 4, |r, c| 2.0 * hess[(r, c)]);
    let c = DVector::from_fn(4, |i, _| -2.0 * lin[i]);

    // 0 <= mu_j <= 1 and sum mu_j = 1.
    let mut a_ineq = DMatrix::zeros(8, 4);
    let mut b_ineq = DVector::zeros(8);
    for j in 0..4 {
        a_ineq[(j, j)] = 1.0;
        b_ineq[j] = 1.0;
        a_ineq[(4 + j, j)] = -1.0;
        b_ineq[4 + j] = 0.0;
    }
    let a_eq = DMatrix::from_row_slice(1, 4, &[1.0, 1.0, 1.0, 1.0]);
    let b_eq = DVector::from_row_slice(&[1.0]);
    QpProblem::new(q, c, a_ineq, b_ineq, a_eq, b_eq)
}

/// Model-matching residual `sum_i e(i)' Q_e e(i)` at a given `mu`.
pub fn matching_residual(
    win: &BackwardWindow,
    cfg: &MheConfig,
    verts: &PolytopeVertices,
    mu: &MembershipWeights,
) -> Result<f64> {
    win.validate(cfg.n)?;
    let model = blend_vertices(mu, verts)?;
    let mut total = 0.0;
    for i in 0..cfg.n {
        let pred = model.a * win.x_hist[i] + model.b * win.u_hist[i] + verts.b_w() * win.w_hist[i];
        let e = win.x_hist[i + 1] - pred;
        total += (e.transpose() * cfg.q_e * e)[(0, 0)];
    }
    Ok(total)
}

/// Full backward objective: matching residual plus increment penalty.
pub fn mhe_objective(
    win: &BackwardWindow,
    cfg: &MheConfig,
    verts: &PolytopeVertices,
    mu: &MembershipWeights,
) -> Result<f64> {
    let nu = Vector4::from_row_slice(&mu.mu) - Vector4::from_row_slice(&win.mu_prev.mu);
    Ok(matching_residual(win, cfg, verts, mu)? + (nu.transpose() * cfg.q_nu * nu)[(0, 0)])
}

/// Shift onto the bilinear manifold `mu1*mu4 = mu2*mu3` along the matching-cost
/// flat direction, staying inside the box.
fn canonicalize_bilinear(mu: [f64; 4]) -> [f64; 4] {
    let t = mu[0] * mu[3] - mu[1] * mu[2];
    let t_min = (mu[0] - 1.0).max(-mu[1]).max(-mu[2]).max(mu[3] - 1.0);
    let t_max = mu[0].min(1.0 - mu[1]).min(1.0 - mu[2]).min(mu[3]);
    let t = t.clamp(t_min, t_max);
    [mu[0] - t, mu[1] + t, mu[2] + t, mu[3] - t]
}

/// Solve the backward QP and return a simplex-valid estimate together with the
/// achieved matching residual.
pub fn estimate_mu(
    win: &BackwardWindow,
    cfg: &MheConfig,
    verts: &PolytopeVertices,
    solver: &mut QpSolver,
) -> Result<(MembershipWeights, f64)> {
    let problem = build_mhe_qp(win, cfg, verts)?;
    let sol = solver.solve(&problem, None)?;
    match sol.status {
        QpStatus::Optimal => {}
        // The simplex is never empty, so anything but optimal is internal. A
        // max-iteration exit with a clean KKT certificate is still usable.
        QpStatus::MaxIter if sol.kkt_residual <= 1e-6 => {
            log::warn!(
                "backward QP hit the iteration cap; accepting point with KKT residual {:e}",
                sol.kkt_residual
            );
        }
        status => {
            return Err(Error::QpDefinition(format!(
                "backward QP terminated with status {status:?} (kkt residual {:e})",
                sol.kkt_residual
            )));
        }
    }
    let mut mu = [sol.x[0], sol.x[1], sol.x[2], sol.x[3]];
    // Clean solver dust, then renormalize the sum exactly.
    for m in &mut mu {
        *m = m.clamp(0.0, 1.0);
    }
    let sum: f64 = mu.iter().sum();
    if sum > 0.0 {
        for m in &mut mu {
            *m /= sum;
        }
    }
    if cfg.q_nu.abs().max() < 1e-14 {
        mu = canonicalize_bilinear(mu);
    }
    let weights = MembershipWeights { mu };
    weights.validate(1e-9)?;
    let residual = matching_residual(win, cfg, verts, &weights)?;
    Ok((weights, residual))
}

/// Stateful estimator for closed-loop use: maintains the measurement ring
/// buffer and the previous estimate. One estimator per loop; not shared.
#[derive(Debug, Clone)]
pub struct MheEstimator {
    cfg: MheConfig,
    x_hist: VecDeque<Vector2<f64>>,
    u_hist: VecDeque<f64>,
    w_hist: VecDeque<Vector2<f64>>,
    mu_prev: MembershipWeights,
    solver: QpSolver,
    last_residual: f64,
}

impl MheEstimator {
    pub fn new(cfg: MheConfig, solver: QpSolver) -> Self {
        MheEstimator {
            cfg,
            x_hist: VecDeque::new(),
            u_hist: VecDeque::new(),
            w_hist: VecDeque::new(),
            mu_prev: MembershipWeights::uniform(),
            solver,
            last_residual: 0.0,
        }
    }

    /// Record the initial measured state.
    pub fn seed_state(&mut self, x: Vector2<f64>) {
        self.x_hist.clear();
        self.u_hist.clear();
        self.w_hist.clear();
        self.x_hist.push_back(x);
    }

    /// Record one applied input, the disturbance it saw, and the resulting state.
    pub fn push_transition(&mut self, u: f64, w: Vector2<f64>, x_next: Vector2<f64>) {
        self.u_hist.push_back(u);
        self.w_hist.push_back(w);
        self.x_hist.push_back(x_next);
        while self.u_hist.len() > self.cfg.n {
            self.u_hist.pop_front();
            self.w_hist.pop_front();
            self.x_hist.pop_front();
        }
    }

    pub fn window_full(&self) -> bool {
        self.u_hist.len() >= self.cfg.n
    }

    pub fn mu(&self) -> MembershipWeights {
        self.mu_prev
    }

    pub fn last_residual(&self) -> f64 {
        self.last_residual
    }

    /// Current estimate: the backward QP once the window is full, the held
    /// previous value (uniform at startup) before that.
    pub fn estimate(&mut self, verts: &PolytopeVertices) -> Result<MembershipWeights> {
        if !self.window_full() {
            return Ok(self.mu_prev);
        }
        let win = BackwardWindow {
            x_hist: self.x_hist.iter().copied().collect(),
            u_hist: self.u_hist.iter().copied().collect(),
            w_hist: self.w_hist.iter().copied().collect(),
            mu_prev: self.mu_prev,
        };
        let (mu, residual) = estimate_mu(&win, &self.cfg, verts, &mut self.solver)?;
        self.mu_prev = mu;
        self.last_residual = residual;
        Ok(mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lpv::membership_from_rho;
    use crate::plant::PlantParams;
    use rand::{Rng, SeedableRng};

    fn setup() -> (PlantParams, PolytopeVertices) {
        let p = PlantParams::default();
        let verts = PolytopeVertices::full(&p, 3.0).unwrap();
        (p, verts)
    }

    /// Simulate the vertex-blended LTI model with a fixed `mu` and an exciting
    /// input, starting from (100, 80).
    fn blend_window(
        verts: &PolytopeVertices,
        mu: &MembershipWeights,
        n: usize,
        mu_prev: MembershipWeights,
    ) -> BackwardWindow {
        let model = blend_vertices(mu, verts).unwrap();
        let mut x = Vector2::new(100.0, 80.0);
        let mut xs = vec![x];
        let mut us = Vec::new();
        let mut ws = Vec::new();
        for i in 0..n {
            let u = 2.0e-4 * (1.0 + 0.8 * (1.7 * i as f64).sin());
            let w = Vector2::new(684.0 + 40.0 * (0.9 * i as f64).sin(), 25.0);
            x = model.a * x + model.b * u + verts.b_w() * w;
            xs.push(x);
            us.push(u);
            ws.push(w);
        }
        BackwardWindow {
            x_hist: xs,
            u_hist: us,
            w_hist: ws,
            mu_prev,
        }
    }

    fn zero_qnu() -> MheConfig {
        MheConfig {
            q_nu: Matrix4::zeros(),
            ..MheConfig::default()
        }
    }

    #[test]
    fn recovers_constant_mu_from_blend_data() {
        let (p, verts) = setup();
        let bounds = crate::lpv::SchedulingBounds::full(&p);
        let mut solver = QpSolver::default();
        // Corners, centroid, and random bilinear simplex points.
        let mut targets: Vec<MembershipWeights> = (0..4).map(MembershipWeights::unit).collect();
        targets.push(MembershipWeights::uniform());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let rho = crate::lpv::SchedulingPoint::new(
                rng.gen_range(bounds.rho1_min..=bounds.rho1_max),
                rng.gen_range(bounds.rho2_min..=bounds.rho2_max),
            );
            targets.push(membership_from_rho(&rho, &bounds).unwrap());
        }
        for target in targets {
            let win = blend_window(&verts, &target, 10, MembershipWeights::uniform());
            let (mu, residual) = estimate_mu(&win, &zero_qnu(), &verts, &mut solver).unwrap();
            for j in 0..4 {
                assert!(
                    (mu.mu[j] - target.mu[j]).abs() < 1e-6,
                    "target {:?} got {:?}",
                    target.mu,
                    mu.mu
                );
            }
            assert!(residual < 1e-12);
        }
    }

    #[test]
    fn corner_dynamics_drive_mu_to_unit_vector() {
        let (_, verts) = setup();
        let mut solver = QpSolver::default();
        let target = MembershipWeights::unit(0);
        let win = blend_window(&verts, &target, 10, MembershipWeights::uniform());
        let (mu, _) = estimate_mu(&win, &zero_qnu(), &verts, &mut solver).unwrap();
        for j in 0..4 {
            assert!((mu.mu[j] - target.mu[j]).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_information_window_returns_previous_estimate() {
        let (_, verts) = setup();
        let mut solver = QpSolver::default();
        let mu_prev = MembershipWeights {
            mu: [0.4, 0.3, 0.2, 0.1],
        };
        let win = BackwardWindow {
            x_hist: vec![Vector2::zeros(); 11],
            u_hist: vec![0.0; 10],
            w_hist: vec![Vector2::zeros(); 10],
            mu_prev,
        };
        let (mu, _) = estimate_mu(&win, &MheConfig::default(), &verts, &mut solver).unwrap();
        for j in 0..4 {
            assert!((mu.mu[j] - mu_prev.mu[j]).abs() < 1e-7, "got {:?}", mu.mu);
        }
    }

    #[test]
    fn returned_weights_satisfy_simplex() {
        let (_, verts) = setup();
        let mut solver = QpSolver::default();
        let target = MembershipWeights {
            mu: [0.7, 0.1, 0.15, 0.05],
        };
        let win = blend_window(&verts, &target, 10, MembershipWeights::uniform());
        let (mu, _) = estimate_mu(&win, &MheConfig::default(), &verts, &mut solver).unwrap();
        let sum: f64 = mu.mu.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for m in mu.mu {
            assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn estimate_dominates_candidate_points() {
        let (p, verts) = setup();
        let mut solver = QpSolver::default();
        // Truth-model data: simulate the nonlinear plant so the window is noisy
        // relative to any LTI blend.
        let mut x = crate::plant::PlantState::new(95.0, 78.0);
        let mut xs = vec![Vector2::new(x.t_p, x.t_f)];
        let mut us = Vec::new();
        let mut ws = Vec::new();
        for i in 0..10 {
            let u = 2.0e-4 * (1.0 + 0.5 * (0.8 * i as f64).cos());
            let w = Vector2::new(700.0, 25.0);
            let e = crate::plant::Exogenous::new(w[0], w[1], u);
            x = crate::plant::integrate_step(&x, &e, &p, 3.0, 10).unwrap();
            xs.push(Vector2::new(x.t_p, x.t_f));
            us.push(u);
            ws.push(w);
        }
        let win = BackwardWindow {
            x_hist: xs,
            u_hist: us,
            w_hist: ws,
            mu_prev: MembershipWeights::uniform(),
        };
        let cfg = MheConfig::default();
        let (mu, _) = estimate_mu(&win, &cfg, &verts, &mut solver).unwrap();

        let objective_at =
            |cand: &MembershipWeights| mhe_objective(&win, &cfg, &verts, cand).unwrap();
        let returned = objective_at(&mu);
        assert!(returned <= objective_at(&win.mu_prev) + 1e-9);
        for cand in (0..4)
            .map(MembershipWeights::unit)
            .chain([MembershipWeights::uniform()])
        {
            assert!(returned <= objective_at(&cand) + 1e-9);
        }
    }

    #[test]
    fn short_window_is_precondition_error() {
        let (_, verts) = setup();
        let win = BackwardWindow {
            x_hist: vec![Vector2::zeros(); 5],
            u_hist: vec![0.0; 4],
            w_hist: vec![Vector2::zeros(); 4],
            mu_prev: MembershipWeights::uniform(),
        };
        assert!(matches!(
            build_mhe_qp(&win, &MheConfig::default(), &verts),
            Err(Error::Window(_))
        ));
    }

    #[test]
    fn estimator_bootstrap_holds_uniform() {
        let (_, verts) = setup();
        let mut est = MheEstimator::new(MheConfig::default(), QpSolver::default());
        est.seed_state(Vector2::new(60.0, 50.0));
        for i in 0..5 {
            let mu = est.estimate(&verts).unwrap();
            assert_eq!(mu.mu, [0.25; 4], "bootstrap must hold uniform");
            est.push_transition(
                1e-4,
                Vector2::new(684.0, 25.0),
                Vector2::new(60.0 + i as f64, 50.0 + i as f64),
            );
        }
    }
}
