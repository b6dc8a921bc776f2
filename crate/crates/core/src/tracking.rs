//! Forward tracking MPC with artificial reference and terminal ingredients.
//!
//! The controller tracks a fluid-temperature setpoint by solving, each sample,
//! a QP over the input sequence plus an artificial steady pair `(x_a, u_a)`.
//! The artificial pair is constrained to be an equilibrium of the blended
//! prediction model, the stage cost pulls the trajectory to `x_a`, and offset
//! terms pull `(x_a, u_a)` toward the real target `(x_s, u_s)`; this enlarges
//! the feasible region and converges to the closest admissible equilibrium
//! when the setpoint is not reachable within the horizon.
//!
//! Offline, [`synthesize_terminal`] produces the terminal cost `P` (a common
//! Lyapunov certificate across the scheduling vertices), the terminal feedback
//! `kappa`, and the terminal set `X_f` (maximal constraint-admissible set,
//! invariant under every vertex closed loop, in coordinates relative to the
//! target).
//!
//! Two modes share all of this machinery: the adaptive mode consumes the
//! membership estimate from the backward QP, while the averaged-LTI baseline
//! pins the membership uniform and drops the terminal set rows.

use crate::lpv::{blend_vertices, LpvMatrices, MembershipWeights, PolytopeVertices};
use crate::plant::{state_derivative, Exogenous, PlantParams, PlantState};
use crate::polytope::{max_invariant_set, HPolytope};
use crate::qp::{QpProblem, QpSolver, QpStatus};
use crate::synthesis::{common_lyapunov, dlqr, spectral_radius2};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix2, RowVector2, Vector2};

/// Hard state and input boxes of the process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Constraints {
    pub x_lo: [f64; 2],
    pub x_hi: [f64; 2],
    pub u_min: f64,
    pub u_max: f64,
}

impl Constraints {
    /// Process limits: temperatures in `[0, ceiling]`, pump flow in `[0, 0.35]`.
    pub fn from_params(p: &PlantParams) -> Self {
        Constraints {
            x_lo: [0.0, 0.0],
            x_hi: [p.tp_max, p.tf_max],
            u_min: 0.0,
            u_max: 0.35,
        }
    }

    pub fn state_polytope(&self) -> HPolytope {
        HPolytope::from_box(&self.x_lo, &self.x_hi).expect("ordered box")
    }

    pub fn contains_state(&self, x: &Vector2<f64>, tol: f64) -> bool {
        x[0] >= self.x_lo[0] - tol
            && x[0] <= self.x_hi[0] + tol
            && x[1] >= self.x_lo[1] - tol
            && x[1] <= self.x_hi[1] + tol
    }

    pub fn contains_input(&self, u: f64, tol: f64) -> bool {
        u >= self.u_min - tol && u <= self.u_max + tol
    }
}

/// Controller operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerMode {
    /// Adaptive: membership from the backward QP, terminal set active.
    Ampc,
    /// Averaged-LTI baseline: uniform membership, no terminal set.
    Ltimpc,
}

/// Tuning of the forward QP.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingConfig {
    /// Forward horizon (samples).
    pub n: usize,
    /// Stage state weight.
    pub q: Matrix2<f64>,
    /// Stage input weight.
    pub r: f64,
    /// LQR input weight used only to shape the terminal feedback gain. The
    /// stage weight `r` makes the gain so aggressive that the terminal set
    /// collapses against the `u >= 0` boundary (the steady flow is a fraction
    /// of a percent of the pump range), so the gain is detuned separately; the
    /// Lyapunov certificate itself is still computed with `(q, r)`.
    pub r_kappa: f64,
    /// Weight on the artificial-input offset `(u_a - u_s)^2`.
    pub t_u: f64,
    pub mode: ControllerMode,
    /// Pin the membership uniform regardless of the estimate (adaptive mode
    /// only; always effective in the baseline mode).
    pub pin_uniform_mu: bool,
    /// Enforce the terminal set rows (adaptive mode only).
    pub use_terminal_set: bool,
    /// Penalize `(u(k) - u_s)^2` against the real steady input instead of the
    /// artificial one (the literal cost variant).
    pub penalize_real_target_input: bool,
}

impl TrackingConfig {
    pub fn new(mode: ControllerMode) -> Self {
        let ltimpc = mode == ControllerMode::Ltimpc;
        TrackingConfig {
            n: 10,
            q: Matrix2::new(1.0, 0.0, 0.0, 10.0),
            r: 100.0,
            r_kappa: 1.0e10,
            t_u: 100.0,
            mode,
            pin_uniform_mu: ltimpc,
            use_terminal_set: !ltimpc,
            penalize_real_target_input: false,
        }
    }

    fn effective_pin_uniform(&self) -> bool {
        self.pin_uniform_mu || self.mode == ControllerMode::Ltimpc
    }

    fn effective_terminal(&self) -> bool {
        self.use_terminal_set && self.mode == ControllerMode::Ampc
    }
}

/// Offline terminal ingredients: cost matrix, feedback gain, terminal set (in
/// coordinates relative to the target equilibrium).
#[derive(Debug, Clone)]
pub struct TerminalIngredients {
    pub p: Matrix2<f64>,
    pub kappa: RowVector2<f64>,
    pub x_f: HPolytope,
}

/// An admissible steady state: `x_s = A(f(x_s)) x_s + B(f(x_s)) u_s + B_w w_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetPair {
    pub x_s: Vector2<f64>,
    pub u_s: f64,
    pub w_s: Vector2<f64>,
}

/// Synthesize `(P, kappa, X_f)` for a set of scheduling vertices.
///
/// `kappa` is the infinite-horizon LQR gain of the vertex-averaged model,
/// verified Schur at every vertex. `P` solves the vertex Lyapunov
/// inequalities. `X_f` is the maximal set, inside the target-shifted state box
/// and the terminal-law input limits, that every vertex closed loop keeps
/// invariant.
pub fn synthesize_terminal(
    verts: &PolytopeVertices,
    q: &Matrix2<f64>,
    r: f64,
    r_kappa: f64,
    constraints: &Constraints,
    target: &TargetPair,
    iter_cap: usize,
) -> Result<TerminalIngredients> {
    let (a_mean, b_mean) = verts.mean_model();
    let (kappa, _) = dlqr(&a_mean, &b_mean, q, r_kappa)?;

    let mut a_cls = Vec::with_capacity(4);
    for j in 0..4 {
        let (aj, bj) = verts.vertex(j);
        let a_cl = aj + bj * kappa;
        let sr = spectral_radius2(&a_cl);
        if !(sr < 1.0) {
            return Err(Error::Synthesis(format!(
                "terminal gain is not Schur at vertex {j} (spectral radius {sr:.6}); \
                 retune Q/R or tighten the synthesis envelope"
            )));
        }
        a_cls.push(a_cl);
    }

    let s = q + kappa.transpose() * r * kappa;
    let p = common_lyapunov(
        &[a_cls[0], a_cls[1], a_cls[2], a_cls[3]],
        &s,
        1e-6 * crate::synthesis::max_eig_sym2(&s).max(1.0),
        5000,
    )?;

    // Admissible error set around the target: state box shifted by x_s plus the
    // terminal-law input window u_s + kappa e in [u_min, u_max].
    let mut h = DMatrix::zeros(6, 2);
    let mut b = DVector::zeros(6);
    h[(0, 0)] = 1.0;
    b[0] = constraints.x_hi[0] - target.x_s[0];
    h[(1, 0)] = -1.0;
    b[1] = target.x_s[0] - constraints.x_lo[0];
    h[(2, 1)] = 1.0;
    b[2] = constraints.x_hi[1] - target.x_s[1];
    h[(3, 1)] = -1.0;
    b[3] = target.x_s[1] - constraints.x_lo[1];
    h[(4, 0)] = kappa[0];
    h[(4, 1)] = kappa[1];
    b[4] = constraints.u_max - target.u_s;
    h[(5, 0)] = -kappa[0];
    h[(5, 1)] = -kappa[1];
    b[5] = target.u_s - constraints.u_min;
    let admissible = HPolytope::new(h, b)?;

    let a_dyn: Vec<DMatrix<f64>> = a_cls
        .iter()
        .map(|a| DMatrix::from_fn(2, 2, |r, c| a[(r, c)]))
        .collect();
    let x_f = max_invariant_set(&a_dyn, &admissible, iter_cap)?;

    Ok(TerminalIngredients { p, kappa, x_f })
}

/// Solve the steady-state pair `(x_s1, u_s)` for a fluid setpoint at a given
/// disturbance level, by damped Newton iteration on the continuous-time
/// balance equations (finite-difference Jacobian).
pub fn steady_pair_for(
    x2_ref: f64,
    w_s: Vector2<f64>,
    params: &PlantParams,
    guess: Option<(f64, f64)>,
) -> Result<TargetPair> {
    if !(0.0..=params.tf_max).contains(&x2_ref) {
        return Err(Error::InfeasibleTarget(format!(
            "fluid reference {x2_ref} outside [0, {}]",
            params.tf_max
        )));
    }
    let residual = |x1: f64, u: f64| -> Result<(f64, f64)> {
        state_derivative(
            &PlantState::new(x1, x2_ref),
            &Exogenous::new(w_s[0], w_s[1], u.max(0.0)),
            params,
        )
    };
    let (mut x1, mut u) = guess.unwrap_or((x2_ref + 15.0, 2.0e-4));
    let mut best = f64::INFINITY;
    for _ in 0..100 {
        let (f1, f2) = residual(x1, u)?;
        let norm = f1.abs().max(f2.abs());
        if norm < 1e-11 {
            let u_s = if u.abs() < 1e-12 { 0.0 } else { u };
            if u_s < -1e-9 {
                return Err(Error::InfeasibleTarget(format!(
                    "steady input is negative ({u_s:e}) at reference {x2_ref}"
                )));
            }
            let x_s = Vector2::new(x1, x2_ref);
            if x1 < -1e-9 || x1 > params.tp_max + 1e-9 {
                return Err(Error::InfeasibleTarget(format!(
                    "steady plate temperature {x1} outside limits"
                )));
            }
            return Ok(TargetPair {
                x_s,
                u_s: u_s.max(0.0),
                w_s,
            });
        }
        best = best.min(norm);

        // Finite-difference Jacobian.
        let hx = 1e-6 * (1.0 + x1.abs());
        let hu = 1e-9 + 1e-6 * u.abs();
        let (f1x, f2x) = residual(x1 + hx, u)?;
        let (f1u, f2u) = residual(x1, u + hu)?;
        let j11 = (f1x - f1) / hx;
        let j21 = (f2x - f2) / hx;
        let j12 = (f1u - f1) / hu;
        let j22 = (f2u - f2) / hu;
        let det = j11 * j22 - j12 * j21;
        let (dx1, du) = if det.abs() < 1e-18 {
            // The input column vanishes when the spatial gradient saturates at
            // zero (x2_ref = 0): pin u and do scalar Newton on x1.
            if j11.abs() < 1e-18 {
                return Err(Error::InfeasibleTarget(
                    "singular steady-state Jacobian".into(),
                ));
            }
            u = 0.0;
            (-f1 / j11, 0.0)
        } else {
            ((-(j22 * f1 - j12 * f2)) / det, (-(-j21 * f1 + j11 * f2)) / det)
        };

        // Damped update: halve until the residual does not grow.
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand_x1 = x1 + alpha * dx1;
            let cand_u = (u + alpha * du).max(0.0);
            if let Ok((g1, g2)) = residual(cand_x1, cand_u) {
                if g1.abs().max(g2.abs()) <= norm {
                    x1 = cand_x1;
                    u = cand_u;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            return Err(Error::InfeasibleTarget(format!(
                "steady-state Newton stalled at residual {best:e} for reference {x2_ref}"
            )));
        }
    }
    Err(Error::InfeasibleTarget(format!(
        "steady-state Newton did not converge within 100 iterations (residual {best:e})"
    )))
}

/// Assembled forward QP plus the prediction data needed to reconstruct state
/// trajectories from a decision vector.
#[derive(Debug, Clone)]
pub struct TrackingQp {
    pub problem: QpProblem,
    pub n: usize,
    /// Constant cost term dropped from the QP objective; add it back to get
    /// the true tracking cost.
    pub cost_offset: f64,
    /// `phi[k]`: state offset at step k (from x0 and the disturbance preview).
    pub phi: Vec<Vector2<f64>>,
    /// `gamma[k][i] = A^{k-1-i} B`, the influence of `u_i` on `x(k)`.
    pub gamma: Vec<Vec<Vector2<f64>>>,
}

impl TrackingQp {
    pub fn xa_index(&self) -> usize {
        self.n
    }

    pub fn ua_index(&self) -> usize {
        self.n + 2
    }

    /// True tracking cost at a decision vector (QP objective plus the
    /// constant term).
    pub fn true_cost(&self, z: &DVector<f64>) -> f64 {
        self.problem.objective(z) + self.cost_offset
    }

    /// Predicted state at step `k` for the input part of a decision vector.
    pub fn predicted_state(&self, k: usize, u: &[f64]) -> Vector2<f64> {
        let mut x = self.phi[k];
        for (i, g) in self.gamma[k].iter().enumerate() {
            x += g * u[i];
        }
        x
    }
}

/// Quadratic-term accumulator: adds `(L z + m)' W (L z + m)` into the QP cost
/// `1/2 z'Hz + g'z + offset`.
fn accumulate_quad(
    hess: &mut DMatrix<f64>,
    grad: &mut DVector<f64>,
    offset: &mut f64,
    l: &DMatrix<f64>,
    m: &DVector<f64>,
    w: &DMatrix<f64>,
) {
    let wl = w * l;
    *hess += 2.0 * l.transpose() * &wl;
    *grad += 2.0 * l.transpose() * (w * m);
    *offset += (m.transpose() * w * m)[(0, 0)];
}

/// Build the forward tracking QP.
///
/// Decision vector `[u(0..N-1), x_a, u_a]`; the state sequence is eliminated by
/// forward substitution through the model blended at `mu`, with the disturbance
/// preview entering additively. The artificial pair is constrained to be a
/// steady state of the blended model at the settling disturbance (the last
/// preview entry).
#[allow(clippy::too_many_arguments)]
pub fn build_tracking_qp(
    x0: &Vector2<f64>,
    mu: &MembershipWeights,
    verts: &PolytopeVertices,
    target: &TargetPair,
    w_preview: &[Vector2<f64>],
    cfg: &TrackingConfig,
    term: &TerminalIngredients,
    constraints: &Constraints,
) -> Result<TrackingQp> {
    let n = cfg.n;
    if n == 0 {
        return Err(Error::Config("forward horizon must be >= 1".into()));
    }
    if w_preview.len() != n {
        return Err(Error::Shape(format!(
            "disturbance preview has {} entries, expected {n}",
            w_preview.len()
        )));
    }
    let mu_eff = if cfg.effective_pin_uniform() {
        MembershipWeights::uniform()
    } else {
        *mu
    };
    let model: LpvMatrices = blend_vertices(&mu_eff, verts)?;
    let w_bar = w_preview[n - 1];

    // Prediction data: x(k) = phi_k + sum_i gamma[k][i] u_i.
    let mut phi = Vec::with_capacity(n + 1);
    let mut gamma: Vec<Vec<Vector2<f64>>> = Vec::with_capacity(n + 1);
    phi.push(*x0);
    gamma.push(Vec::new());
    for k in 0..n {
        let prev_phi = phi[k];
        let mut row: Vec<Vector2<f64>> = gamma[k].iter().map(|g| model.a * g).collect();
        row.push(model.b);
        phi.push(model.a * prev_phi + model.b_w * w_preview[k]);
        gamma.push(row);
    }

    let nz = n + 3;
    let mut hess = DMatrix::zeros(nz, nz);
    let mut grad = DVector::zeros(nz);
    let mut cost_offset = 0.0;

    // Selector for x(k) - x_a as an affine function of z.
    let state_minus_xa = |k: usize| -> (DMatrix<f64>, DVector<f64>) {
        let mut l = DMatrix::zeros(2, nz);
        for (i, g) in gamma[k].iter().enumerate() {
            l[(0, i)] = g[0];
            l[(1, i)] = g[1];
        }
        l[(0, n)] = -1.0;
        l[(1, n + 1)] = -1.0;
        let m = DVector::from_row_slice(&[phi[k][0], phi[k][1]]);
        (l, m)
    };

    let q_w = DMatrix::from_fn(2, 2, |r, c| cfg.q[(r, c)]);
    let p_w = DMatrix::from_fn(2, 2, |r, c| term.p[(r, c)]);
    for k in 1..n {
        let (l, m) = state_minus_xa(k);
        accumulate_quad(&mut hess, &mut grad, &mut cost_offset, &l, &m, &q_w);
    }
    {
        let (l, m) = state_minus_xa(n);
        accumulate_quad(&mut hess, &mut grad, &mut cost_offset, &l, &m, &p_w);
    }
    {
        // Offset (x_a - x_s) weighted by T_x = P.
        let mut l = DMatrix::zeros(2, nz);
        l[(0, n)] = 1.0;
        l[(1, n + 1)] = 1.0;
        let m = DVector::from_row_slice(&[-target.x_s[0], -target.x_s[1]]);
        accumulate_quad(&mut hess, &mut grad, &mut cost_offset, &l, &m, &p_w);
    }
    let r_w = DMatrix::from_element(1, 1, cfg.r);
    for k in 0..n {
        let mut l = DMatrix::zeros(1, nz);
        l[(0, k)] = 1.0;
        let m = if cfg.penalize_real_target_input {
            DVector::from_element(1, -target.u_s)
        } else {
            l[(0, n + 2)] = -1.0;
            DVector::zeros(1)
        };
        accumulate_quad(&mut hess, &mut grad, &mut cost_offset, &l, &m, &r_w);
    }
    {
        // Artificial-input offset (u_a - u_s).
        let mut l = DMatrix::zeros(1, nz);
        l[(0, n + 2)] = 1.0;
        let m = DVector::from_element(1, -target.u_s);
        accumulate_quad(
            &mut hess,
            &mut grad,
            &mut cost_offset,
            &l,
            &m,
            &DMatrix::from_element(1, 1, cfg.t_u),
        );
    }

    // Inequalities: states 1..N-1 in X, inputs in U, x_a in X, u_a in U, and
    // the terminal rows in adaptive mode.
    let x_poly = constraints.state_polytope();
    let terminal_on = cfg.effective_terminal();
    let m_states = 4 * n.saturating_sub(1);
    let m_inputs = 2 * n;
    let m_art = 6;
    let m_term = if terminal_on { term.x_f.rows() } else { 0 };
    let mi = m_states + m_inputs + m_art + m_term;
    let mut a_ineq = DMatrix::zeros(mi, nz);
    let mut b_ineq = DVector::zeros(mi);
    let mut row = 0;
    for k in 1..n {
        for j in 0..4 {
            let hj = x_poly.h_mat().row(j);
            for (i, g) in gamma[k].iter().enumerate() {
                a_ineq[(row, i)] = hj[0] * g[0] + hj[1] * g[1];
            }
            b_ineq[row] = x_poly.h_vec()[j] - (hj[0] * phi[k][0] + hj[1] * phi[k][1]);
            row += 1;
        }
    }
    for k in 0..n {
        a_ineq[(row, k)] = 1.0;
        b_ineq[row] = constraints.u_max;
        row += 1;
        a_ineq[(row, k)] = -1.0;
        b_ineq[row] = -constraints.u_min;
        row += 1;
    }
    for j in 0..4 {
        let hj = x_poly.h_mat().row(j);
        a_ineq[(row, n)] = hj[0];
        a_ineq[(row, n + 1)] = hj[1];
        b_ineq[row] = x_poly.h_vec()[j];
        row += 1;
    }
    a_ineq[(row, n + 2)] = 1.0;
    b_ineq[row] = constraints.u_max;
    row += 1;
    a_ineq[(row, n + 2)] = -1.0;
    b_ineq[row] = -constraints.u_min;
    row += 1;
    if terminal_on {
        for j in 0..term.x_f.rows() {
            let hj = term.x_f.h_mat().row(j);
            for (i, g) in gamma[n].iter().enumerate() {
                a_ineq[(row, i)] = hj[0] * g[0] + hj[1] * g[1];
            }
            a_ineq[(row, n)] = -hj[0];
            a_ineq[(row, n + 1)] = -hj[1];
            b_ineq[row] = term.x_f.h_vec()[j] - (hj[0] * phi[n][0] + hj[1] * phi[n][1]);
            row += 1;
        }
    }
    debug_assert_eq!(row, mi);

    // Equalities: (I - A) x_a - B u_a = B_w w_bar.
    let mut a_eq = DMatrix::zeros(2, nz);
    let eye_a = Matrix2::identity() - model.a;
    for r in 0..2 {
        a_eq[(r, n)] = eye_a[(r, 0)];
        a_eq[(r, n + 1)] = eye_a[(r, 1)];
        a_eq[(r, n + 2)] = -model.b[r];
    }
    let rhs = model.b_w * w_bar;
    let b_eq = DVector::from_row_slice(&[rhs[0], rhs[1]]);

    let problem = QpProblem::new(hess, grad, a_ineq, b_ineq, a_eq, b_eq)?;
    Ok(TrackingQp {
        problem,
        n,
        cost_offset,
        phi,
        gamma,
    })
}

/// Everything the controller needs at one sample.
#[derive(Debug, Clone)]
pub struct LoopState<'a> {
    pub x: Vector2<f64>,
    pub w_preview: &'a [Vector2<f64>],
    pub mu: MembershipWeights,
    pub x2_ref: f64,
}

/// Per-sample diagnostics of the forward QP.
#[derive(Debug, Clone)]
pub struct ControlDiagnostics {
    pub cost: f64,
    pub qp_iterations: usize,
    pub solve_ms: f64,
    pub feasible: bool,
    pub x_a: Vector2<f64>,
    pub u_a: f64,
    pub target: TargetPair,
}

/// Receding-horizon tracking controller (adaptive or averaged-LTI mode).
#[derive(Debug, Clone)]
pub struct TrackingController {
    pub cfg: TrackingConfig,
    verts: PolytopeVertices,
    term: TerminalIngredients,
    constraints: Constraints,
    params: PlantParams,
    solver: QpSolver,
    u_prev: f64,
    warm: Vec<usize>,
    target_cache: Option<(f64, TargetPair)>,
}

impl TrackingController {
    pub fn new(
        cfg: TrackingConfig,
        verts: PolytopeVertices,
        term: TerminalIngredients,
        constraints: Constraints,
        params: PlantParams,
        solver: QpSolver,
    ) -> Self {
        TrackingController {
            cfg,
            verts,
            term,
            constraints,
            params,
            solver,
            u_prev: 0.0,
            warm: Vec::new(),
            target_cache: None,
        }
    }

    pub fn terminal(&self) -> &TerminalIngredients {
        &self.term
    }

    /// Steady pair for the current reference and settling disturbance, with
    /// warm-started Newton across samples.
    fn target_for(&mut self, x2_ref: f64, w_bar: Vector2<f64>) -> Result<TargetPair> {
        if let Some((cached_ref, cached)) = &self.target_cache {
            if (cached_ref - x2_ref).abs() < 1e-12 && (cached.w_s - w_bar).amax() < 1e-12 {
                return Ok(*cached);
            }
        }
        let guess = self.target_cache.as_ref().map(|(_, t)| (t.x_s[0], t.u_s));
        let target = steady_pair_for(x2_ref, w_bar, &self.params, guess)?;
        // A steady pair outside the input limits is not an error: the
        // artificial reference settles at the closest admissible equilibrium,
        // with the input pinned at its bound.
        if !self.constraints.contains_input(target.u_s, 1e-9) {
            log::debug!(
                "steady input {:e} outside [{}, {}]; relying on the artificial reference",
                target.u_s,
                self.constraints.u_min,
                self.constraints.u_max
            );
        }
        self.target_cache = Some((x2_ref, target));
        Ok(target)
    }

    /// One receding-horizon step: solve the forward QP and apply the first
    /// move. Infeasibility holds the previous input and flags the sample.
    pub fn control_step(&mut self, state: &LoopState) -> Result<(f64, ControlDiagnostics)> {
        let started = std::time::Instant::now();
        let w_bar = *state
            .w_preview
            .last()
            .ok_or_else(|| Error::Shape("empty disturbance preview".into()))?;
        let target = self.target_for(state.x2_ref, w_bar)?;
        let qp = build_tracking_qp(
            &state.x,
            &state.mu,
            &self.verts,
            &target,
            state.w_preview,
            &self.cfg,
            &self.term,
            &self.constraints,
        )?;
        let warm: Vec<usize> = self.warm.clone();
        let sol = self.solver.solve(&qp.problem, Some(&warm))?;
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;

        if sol.status == QpStatus::Infeasible {
            return Ok((
                self.u_prev,
                ControlDiagnostics {
                    cost: f64::NAN,
                    qp_iterations: sol.iterations,
                    solve_ms,
                    feasible: false,
                    x_a: target.x_s,
                    u_a: target.u_s,
                    target,
                },
            ));
        }

        let u_raw = sol.x[0];
        assert!(
            self.constraints.contains_input(u_raw, 1e-6),
            "optimizer returned u = {u_raw} outside the input limits"
        );
        let u = u_raw.clamp(self.constraints.u_min, self.constraints.u_max);
        self.u_prev = u;
        self.warm = sol.active_set.clone();
        let diag = ControlDiagnostics {
            cost: qp.true_cost(&sol.x),
            qp_iterations: sol.iterations,
            solve_ms,
            feasible: sol.status == QpStatus::Optimal,
            x_a: Vector2::new(sol.x[qp.xa_index()], sol.x[qp.xa_index() + 1]),
            u_a: sol.x[qp.ua_index()],
            target,
        };
        Ok((u, diag))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lpv::{membership_from_rho, scheduling_map, SchedulingBounds};

    fn params() -> PlantParams {
        PlantParams::default()
    }

    /// Synthesis scheduling envelope used across the tests: the operating
    /// sub-box of P for temperatures between 20 °C and (200, 150) °C.
    fn envelope_verts(p: &PlantParams) -> PolytopeVertices {
        let bounds = SchedulingBounds::from_state_box(p, 20.0, 200.0, 20.0, 150.0).unwrap();
        PolytopeVertices::new(p, 3.0, bounds).unwrap()
    }

    fn nominal_target(p: &PlantParams) -> TargetPair {
        steady_pair_for(97.0, Vector2::new(684.0, 25.0), p, None).unwrap()
    }

    #[test]
    fn steady_pair_is_euler_fixed_point() {
        let p = params();
        let t = nominal_target(&p);
        let next = crate::plant::euler_discrete_model(
            &PlantState::new(t.x_s[0], t.x_s[1]),
            &Exogenous::new(t.w_s[0], t.w_s[1], t.u_s),
            &p,
            3.0,
        )
        .unwrap();
        assert!((next.t_p - t.x_s[0]).abs() < 1e-8);
        assert!((next.t_f - t.x_s[1]).abs() < 1e-8);
    }

    #[test]
    fn steady_plate_temperature_consistent_with_reported_value() {
        // At the nominal disturbance level the 97 °C fluid setpoint implies a
        // plate temperature of about 109.93 °C.
        let p = params();
        let t = nominal_target(&p);
        assert!(
            (t.x_s[0] - 109.93).abs() < 2.0,
            "x_s1 = {} not within 2 °C of 109.93",
            t.x_s[0]
        );
        assert!(t.u_s > 0.0 && t.u_s < 0.35);
    }

    #[test]
    fn steady_pair_zero_reference_zero_drive() {
        let p = params();
        let t = steady_pair_for(0.0, Vector2::zeros(), &p, None).unwrap();
        assert!(t.x_s[0].abs() < 1e-9);
        assert_eq!(t.x_s[1], 0.0);
        assert_eq!(t.u_s, 0.0);
    }

    #[test]
    fn terminal_synthesis_certificate() {
        let p = params();
        let verts = envelope_verts(&p);
        let q = Matrix2::new(1.0, 0.0, 0.0, 10.0);
        let target = nominal_target(&p);
        let cons = Constraints::from_params(&p);
        let term = synthesize_terminal(&verts, &q, 100.0, 1.0e4, &cons, &target, 500).unwrap();

        let s = q + term.kappa.transpose() * 100.0 * term.kappa;
        for j in 0..4 {
            let (aj, bj) = verts.vertex(j);
            let a_cl = aj + bj * term.kappa;
            assert!(spectral_radius2(&a_cl) < 1.0);
            let res = a_cl.transpose() * term.p * a_cl - term.p + s;
            assert!(
                crate::synthesis::max_eig_sym2(&res) <= 1e-8,
                "vertex {j} residual"
            );
        }
        assert!(!term.x_f.is_empty());
    }

    fn build_default(
        x0: Vector2<f64>,
        mu: &MembershipWeights,
        target: &TargetPair,
        w: Vector2<f64>,
        cfg: &TrackingConfig,
    ) -> (TrackingQp, PolytopeVertices, TerminalIngredients) {
        let p = params();
        let verts = PolytopeVertices::full(&p, 3.0).unwrap();
        let env = envelope_verts(&p);
        let cons = Constraints::from_params(&p);
        let term = synthesize_terminal(&env, &cfg.q, cfg.r, cfg.r_kappa, &cons, target, 500).unwrap();
        let preview = vec![w; cfg.n];
        let qp = build_tracking_qp(&x0, mu, &verts, target, &preview, cfg, &term, &cons).unwrap();
        (qp, verts, term)
    }

    #[test]
    fn at_target_with_exact_preview_holds_steady_input() {
        let p = params();
        let target = nominal_target(&p);
        let rho = scheduling_map(&PlantState::new(target.x_s[0], target.x_s[1]), &p).unwrap();
        let mu = membership_from_rho(&rho, &SchedulingBounds::full(&p)).unwrap();
        let cfg = TrackingConfig::new(ControllerMode::Ampc);
        let (qp, _, _) = build_default(target.x_s, &mu, &target, target.w_s, &cfg);
        let mut solver = QpSolver::default();
        let sol = solver.solve(&qp.problem, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(
            (sol.x[0] - target.u_s).abs() < 1e-6,
            "u0 = {} vs u_s = {}",
            sol.x[0],
            target.u_s
        );
        assert!(qp.true_cost(&sol.x).abs() < 1e-8);
    }

    #[test]
    fn predicted_states_satisfy_constraints_at_solution() {
        let p = params();
        let target = nominal_target(&p);
        let cfg = TrackingConfig::new(ControllerMode::Ampc);
        let x0 = Vector2::new(60.0, 50.0);
        let (qp, _, _) =
            build_default(x0, &MembershipWeights::uniform(), &target, target.w_s, &cfg);
        let mut solver = QpSolver::default();
        let sol = solver.solve(&qp.problem, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let u: Vec<f64> = (0..cfg.n).map(|k| sol.x[k]).collect();
        let cons = Constraints::from_params(&p);
        for k in 1..=cfg.n {
            let x = qp.predicted_state(k, &u);
            assert!(cons.contains_state(&x, 1e-6), "x({k}) = {x:?}");
        }
    }

    #[test]
    fn terminal_rows_match_direct_substitution() {
        // On a random decision vector, the assembled terminal rows must equal
        // H_f (x(N) - x_a) <= h_f evaluated directly.
        let p = params();
        let target = nominal_target(&p);
        let cfg = TrackingConfig::new(ControllerMode::Ampc);
        let x0 = Vector2::new(80.0, 70.0);
        let (qp, _, term) =
            build_default(x0, &MembershipWeights::uniform(), &target, target.w_s, &cfg);
        let nz = cfg.n + 3;
        let z = DVector::from_fn(nz, |i, _| 0.01 * (i as f64 + 1.0) * (-1.0f64).powi(i as i32));
        let u: Vec<f64> = (0..cfg.n).map(|k| z[k]).collect();
        let x_n = qp.predicted_state(cfg.n, &u);
        let x_a = Vector2::new(z[qp.xa_index()], z[qp.xa_index() + 1]);
        let direct = term.x_f.h_mat() * (x_n - x_a) - term.x_f.h_vec();
        let m_term = term.x_f.rows();
        let total = qp.problem.m_ineq();
        let assembled = qp.problem.a_ineq().rows(total - m_term, m_term) * &z
            - qp.problem.b_ineq().rows(total - m_term, m_term);
        for j in 0..m_term {
            assert!(
                (direct[j] - assembled[j]).abs() < 1e-9,
                "terminal row {j}: {} vs {}",
                direct[j],
                assembled[j]
            );
        }
    }

    #[test]
    fn saturating_demand_pins_input_at_limit() {
        // A 0.5 °C fluid setpoint under full sun needs a steady flow beyond the
        // pump limit, so the achievable equilibrium sits at u = 0.35 and the
        // applied input saturates there exactly.
        let p = params();
        let target = steady_pair_for(0.5, Vector2::new(684.0, 25.0), &p, None).unwrap();
        assert!(
            target.u_s > 0.35,
            "setpoint was meant to need u_s > 0.35, got {:e}",
            target.u_s
        );
        let cfg = TrackingConfig::new(ControllerMode::Ltimpc);
        let x0 = Vector2::new(200.0, 1.2);
        let rho = scheduling_map(&PlantState::new(x0[0], x0[1]), &p).unwrap();
        let mu = membership_from_rho(&rho, &SchedulingBounds::full(&p)).unwrap();
        let (qp, _, _) = build_default(x0, &mu, &target, target.w_s, &cfg);
        let mut solver = QpSolver::default();
        let sol = solver.solve(&qp.problem, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let u = sol.x[0].clamp(0.0, 0.35);
        assert_eq!(u, 0.35);
    }

    #[test]
    fn hand_kkt_oracle_n1_interior() {
        // N = 1 at an interior point: only the two steady-state equalities are
        // active, so the optimum solves a 6x6 KKT system. Solve that system
        // directly as an independent route and compare.
        let p = params();
        let target = nominal_target(&p);
        let mut cfg = TrackingConfig::new(ControllerMode::Ltimpc);
        cfg.n = 1;
        let x0 = target.x_s + Vector2::new(0.5, 0.4);
        let verts = PolytopeVertices::full(&p, 3.0).unwrap();
        let env = envelope_verts(&p);
        let cons = Constraints::from_params(&p);
        let term = synthesize_terminal(&env, &cfg.q, cfg.r, cfg.r_kappa, &cons, &target, 500).unwrap();
        let preview = vec![target.w_s; 1];
        let qp = build_tracking_qp(
            &x0,
            &MembershipWeights::uniform(),
            &verts,
            &target,
            &preview,
            &cfg,
            &term,
            &cons,
        )
        .unwrap();
        let mut solver = QpSolver::default();
        let sol = solver.solve(&qp.problem, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(
            sol.active_set.is_empty(),
            "expected an interior optimum, active set {:?}",
            sol.active_set
        );

        let nz = 4;
        let me = 2;
        let mut kkt = DMatrix::zeros(nz + me, nz + me);
        kkt.view_mut((0, 0), (nz, nz)).copy_from(qp.problem.q());
        kkt.view_mut((nz, 0), (me, nz)).copy_from(qp.problem.a_eq());
        kkt.view_mut((0, nz), (nz, me))
            .copy_from(&qp.problem.a_eq().transpose());
        let mut rhs = DVector::zeros(nz + me);
        for i in 0..nz {
            rhs[i] = -qp.problem.c()[i];
        }
        for r in 0..me {
            rhs[nz + r] = qp.problem.b_eq()[r];
        }
        let direct = kkt.full_piv_lu().solve(&rhs).unwrap();
        for i in 0..nz {
            assert!(
                (sol.x[i] - direct[i]).abs() < 1e-8,
                "z[{i}]: {} vs {}",
                sol.x[i],
                direct[i]
            );
        }
    }

    #[test]
    fn cost_decrease_under_frozen_conditions() {
        // With mu and w frozen between consecutive samples, the shifted
        // previous solution is a candidate for the new problem, so the new
        // optimum cannot cost more.
        let p = params();
        let target = nominal_target(&p);
        let cfg = TrackingConfig::new(ControllerMode::Ampc);
        let rho = scheduling_map(&PlantState::new(100.0, 85.0), &p).unwrap();
        let mu = membership_from_rho(&rho, &SchedulingBounds::full(&p)).unwrap();
        let x0 = Vector2::new(100.0, 85.0);
        let (qp0, verts, term) = build_default(x0, &mu, &target, target.w_s, &cfg);
        let mut solver = QpSolver::default();
        let sol0 = solver.solve(&qp0.problem, None).unwrap();
        assert_eq!(sol0.status, QpStatus::Optimal);

        // Advance one step under the same blended model.
        let model = blend_vertices(&mu, &verts).unwrap();
        let x1 = model.a * x0 + model.b * sol0.x[0] + model.b_w * target.w_s;
        let cons = Constraints::from_params(&p);
        let preview = vec![target.w_s; cfg.n];
        let qp1 =
            build_tracking_qp(&x1, &mu, &verts, &target, &preview, &cfg, &term, &cons).unwrap();
        let sol1 = solver.solve(&qp1.problem, None).unwrap();
        assert_eq!(sol1.status, QpStatus::Optimal);

        // Shifted candidate: drop u0, append the terminal law.
        let n = cfg.n;
        let x_a = Vector2::new(sol0.x[qp0.xa_index()], sol0.x[qp0.xa_index() + 1]);
        let u_a = sol0.x[qp0.ua_index()];
        let u_prev: Vec<f64> = (0..n).map(|k| sol0.x[k]).collect();
        let x_term = qp0.predicted_state(n, &u_prev);
        let u_tail = u_a + (term.kappa * (x_term - x_a))[0];
        let mut cand = DVector::zeros(n + 3);
        for k in 0..n - 1 {
            cand[k] = sol0.x[k + 1];
        }
        cand[n - 1] = u_tail;
        cand[n] = x_a[0];
        cand[n + 1] = x_a[1];
        cand[n + 2] = u_a;
        let candidate_cost = qp1.problem.objective(&cand);
        let new_cost = sol1.objective(&qp1.problem);
        assert!(
            new_cost <= candidate_cost + 1e-9,
            "new {new_cost} vs shifted candidate {candidate_cost}"
        );
    }

    #[test]
    fn controller_tracks_target_from_cold_start() {
        // Closed loop against the truth model: the adaptive controller pulls
        // the fluid temperature to the setpoint.
        let p = params();
        let cons = Constraints::from_params(&p);
        let verts = PolytopeVertices::full(&p, 3.0).unwrap();
        let env = envelope_verts(&p);
        let cfg = TrackingConfig::new(ControllerMode::Ampc);
        let target = nominal_target(&p);
        let term = synthesize_terminal(&env, &cfg.q, cfg.r, cfg.r_kappa, &cons, &target, 500).unwrap();
        let mut ctl =
            TrackingController::new(cfg, verts.clone(), term, cons, p, QpSolver::default());
        let mut est =
            crate::mhe::MheEstimator::new(crate::mhe::MheConfig::default(), QpSolver::default());
        let w = Vector2::new(684.0, 25.0);
        let mut x = PlantState::new(60.0, 50.0);
        est.seed_state(Vector2::new(x.t_p, x.t_f));
        let preview = vec![w; 10];
        for _ in 0..400 {
            let mu = est.estimate(&verts).unwrap();
            let (u, diag) = ctl
                .control_step(&LoopState {
                    x: Vector2::new(x.t_p, x.t_f),
                    w_preview: &preview,
                    mu,
                    x2_ref: 97.0,
                })
                .unwrap();
            assert!(diag.feasible);
            let e = Exogenous::new(w[0], w[1], u);
            x = crate::plant::integrate_step(&x, &e, &p, 3.0, 10).unwrap();
            est.push_transition(u, w, Vector2::new(x.t_p, x.t_f));
        }
        assert!(
            (x.t_f - 97.0).abs() < 0.5,
            "fluid temperature {} did not reach the setpoint band",
            x.t_f
        );
    }
}
