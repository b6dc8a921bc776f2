//! Dense convex quadratic programming.
//!
//! Solves `min 1/2 x'Qx + c'x  s.t.  A_ineq x <= b_ineq, A_eq x = b_eq` with a
//! primal active-set method. A phase-1 feasibility problem (an LP solved as a
//! lightly regularized QP) provides the starting point; phase 2 then walks the
//! active set. Problems here are small and dense and solved repeatedly with
//! similar structure, which is the regime where active-set methods shine and
//! where warm starts pay off.
//!
//! The solver is deterministic: identical inputs produce bitwise-identical
//! outputs.

use crate::textmat;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::io::{BufRead, Write};

/// Problem data for `min 1/2 x'Qx + c'x` with linear constraints.
///
/// `Q` is symmetrized as `(Q + Q')/2` at construction. Positive semidefiniteness
/// is checked on demand via [`QpProblem::min_eigenvalue`].
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    q: DMatrix<f64>,
    c: DVector<f64>,
    a_ineq: DMatrix<f64>,
    b_ineq: DVector<f64>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        q: DMatrix<f64>,
        c: DVector<f64>,
        a_ineq: DMatrix<f64>,
        b_ineq: DVector<f64>,
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
    ) -> Result<Self> {
        let n = c.len();
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::Shape(format!(
                "Q is {}x{}, expected {n}x{n}",
                q.nrows(),
                q.ncols()
            )));
        }
        if a_ineq.nrows() != b_ineq.len() || (a_ineq.nrows() > 0 && a_ineq.ncols() != n) {
            return Err(Error::Shape(format!(
                "A_ineq is {}x{} with b_ineq of length {}",
                a_ineq.nrows(),
                a_ineq.ncols(),
                b_ineq.len()
            )));
        }
        if a_eq.nrows() != b_eq.len() || (a_eq.nrows() > 0 && a_eq.ncols() != n) {
            return Err(Error::Shape(format!(
                "A_eq is {}x{} with b_eq of length {}",
                a_eq.nrows(),
                a_eq.ncols(),
                b_eq.len()
            )));
        }
        let q = (&q + q.transpose()) * 0.5;
        Ok(QpProblem {
            q,
            c,
            a_ineq,
            b_ineq,
            a_eq,
            b_eq,
        })
    }

    /// Unconstrained problem.
    pub fn unconstrained(q: DMatrix<f64>, c: DVector<f64>) -> Result<Self> {
        let n = c.len();
        Self::new(
            q,
            c,
            DMatrix::zeros(0, n),
            DVector::zeros(0),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
        )
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }
    pub fn m_ineq(&self) -> usize {
        self.a_ineq.nrows()
    }
    pub fn m_eq(&self) -> usize {
        self.a_eq.nrows()
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }
    pub fn a_ineq(&self) -> &DMatrix<f64> {
        &self.a_ineq
    }
    pub fn b_ineq(&self) -> &DVector<f64> {
        &self.b_ineq
    }
    pub fn a_eq(&self) -> &DMatrix<f64> {
        &self.a_eq
    }
    pub fn b_eq(&self) -> &DVector<f64> {
        &self.b_eq
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (x.transpose() * &self.q * x)[(0, 0)] + self.c.dot(x)
    }

    /// Smallest eigenvalue of the (symmetrized) cost matrix.
    pub fn min_eigenvalue(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        let eig = self.q.clone().symmetric_eigenvalues();
        eig.min()
    }

    /// Error if `Q` has an eigenvalue below `-1e-9`.
    pub fn check_psd(&self) -> Result<()> {
        let min = self.min_eigenvalue();
        if min < -1e-9 {
            return Err(Error::QpDefinition(format!(
                "cost matrix is not positive semidefinite (min eigenvalue {min:e})"
            )));
        }
        Ok(())
    }

    /// Write the problem in the plain-text matrix format (for repro reports).
    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "qpdump 1")?;
        textmat::write_matrix(w, "Q", &self.q)?;
        textmat::write_vector(w, "c", &self.c)?;
        textmat::write_matrix(w, "Aineq", &self.a_ineq)?;
        textmat::write_vector(w, "bineq", &self.b_ineq)?;
        textmat::write_matrix(w, "Aeq", &self.a_eq)?;
        textmat::write_vector(w, "beq", &self.b_eq)?;
        Ok(())
    }

    /// Read a problem written by [`QpProblem::dump`].
    pub fn load<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = textmat::Lines::new(r);
        let header = lines.next_line()?;
        if header.trim() != "qpdump 1" {
            return Err(Error::Parse(format!("unexpected qpdump header: {header}")));
        }
        let q = textmat::read_matrix(&mut lines, "Q")?;
        let c = textmat::read_vector(&mut lines, "c")?;
        let a_ineq = textmat::read_matrix(&mut lines, "Aineq")?;
        let b_ineq = textmat::read_vector(&mut lines, "bineq")?;
        let a_eq = textmat::read_matrix(&mut lines, "Aeq")?;
        let b_eq = textmat::read_vector(&mut lines, "beq")?;
        QpProblem::new(q, c, a_ineq, b_ineq, a_eq, b_eq)
    }
}

/// Termination status of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Primal/dual solution with a KKT certificate.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda_ineq: DVector<f64>,
    pub nu_eq: DVector<f64>,
    pub status: QpStatus,
    /// Max residual over the four KKT groups.
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Tikhonov jitter added to Q when a KKT factorization failed (0 when unused).
    pub jitter: f64,
    /// Phase-2 objective after each step; non-increasing for this method.
    pub objective_trace: Vec<f64>,
    /// Minimal peak constraint violation found by phase 1 (infeasibility evidence).
    pub phase1_violation: Option<f64>,
    /// Working set at termination (inequality indices); reusable as a warm start.
    pub active_set: Vec<usize>,
}

impl QpSolution {
    pub fn objective(&self, p: &QpProblem) -> f64 {
        p.objective(&self.x)
    }
}

/// Residuals of the four KKT condition groups, recomputed independently.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_ineq: f64,
    pub primal_eq: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn group_passes(&self, tol: f64) -> [bool; 4] {
        [
            self.stationarity <= tol,
            self.primal_ineq.max(self.primal_eq) <= tol,
            self.dual_feasibility <= tol,
            self.complementarity <= tol,
        ]
    }

    pub fn pass(&self, tol: f64) -> bool {
        self.group_passes(tol).iter().all(|&p| p)
    }

    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.primal_ineq)
            .max(self.primal_eq)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

/// Recompute all KKT residual groups for a candidate solution.
pub fn verify_kkt(p: &QpProblem, s: &QpSolution, _tol: f64) -> KktReport {
    let grad = &p.q * &s.x + &p.c;
    let mut stat = grad.clone();
    if p.m_ineq() > 0 {
        stat += p.a_ineq.transpose() * &s.lambda_ineq;
    }
    if p.m_eq() > 0 {
        stat += p.a_eq.transpose() * &s.nu_eq;
    }
    let stationarity = stat.amax();

    let mut primal_ineq = 0.0f64;
    let mut complementarity = 0.0f64;
    if p.m_ineq() > 0 {
        let slack = &p.a_ineq * &s.x - &p.b_ineq;
        for i in 0..p.m_ineq() {
            primal_ineq = primal_ineq.max(slack[i]);
            complementarity = complementarity.max((s.lambda_ineq[i] * slack[i]).abs());
        }
        primal_ineq = primal_ineq.max(0.0);
    }
    let primal_eq = if p.m_eq() > 0 {
        (&p.a_eq * &s.x - &p.b_eq).amax()
    } else {
        0.0
    };
    let dual_feasibility = if p.m_ineq() > 0 {
        (-s.lambda_ineq.min()).max(0.0)
    } else {
        0.0
    };
    KktReport {
        stationarity,
        primal_ineq,
        primal_eq,
        dual_feasibility,
        complementarity,
    }
}

/// Active-set solver with owned settings and workspace.
///
/// A single instance is not meant to be shared across threads; distinct
/// instances are independent.
#[derive(Debug, Clone)]
pub struct QpSolver {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpSolver {
    fn default() -> Self {
        QpSolver {
            tol: 1e-8,
            max_iter: 200,
        }
    }
}

const JITTER: f64 = 1e-10;

struct Phase2Out {
    x: DVector<f64>,
    working: Vec<usize>,
    multipliers: DVector<f64>,
    iterations: usize,
    jitter: f64,
    trace: Vec<f64>,
    hit_max_iter: bool,
}

impl QpSolver {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        QpSolver { tol, max_iter }
    }

    /// Solve the problem, optionally warm-starting from a previous active set.
    ///
    /// Warm starts only seed the initial working set; correctness never depends
    /// on them.
    pub fn solve(&mut self, p: &QpProblem, warm: Option<&[usize]>) -> Result<QpSolution> {
        let n = p.n();
        if n == 0 {
            return Err(Error::QpDefinition("empty decision vector".into()));
        }

        // Equality-consistent starting point (least squares).
        let mut x0 = DVector::zeros(n);
        if p.m_eq() > 0 {
            let svd = p.a_eq.clone().svd(true, true);
            x0 = svd
                .solve(&p.b_eq, 1e-12)
                .map_err(|e| Error::QpDefinition(format!("equality least-squares failed: {e}")))?;
            let res = (&p.a_eq * &x0 - &p.b_eq).amax();
            if res > self.tol * 10.0 * (1.0 + p.b_eq.amax()) {
                return Ok(self.infeasible_solution(p, res));
            }
        }

        // Phase 1 when the equality-consistent point violates the inequalities.
        let mut phase1_violation = None;
        if p.m_ineq() > 0 {
            let viol = max_violation(&p.a_ineq, &p.b_ineq, &x0);
            if viol > self.tol {
                let (x_feas, s_star) = self.phase1(p, &x0, viol)?;
                phase1_violation = Some(s_star);
                let feas_tol = 10.0 * self.tol * (1.0 + p.b_ineq.amax());
                if s_star > feas_tol {
                    return Ok(self.infeasible_solution(p, s_star));
                }
                x0 = x_feas;
            }
        }

        // Initial working set: warm-start indices that are active and independent.
        let mut w0: Vec<usize> = Vec::new();
        if let Some(warm) = warm {
            for &i in warm {
                if i >= p.m_ineq() {
                    continue;
                }
                let slack = p.b_ineq[i] - p.a_ineq.row(i).transpose().dot(&x0);
                if slack.abs() <= 1e-7 * (1.0 + p.b_ineq[i].abs()) && !w0.contains(&i) {
                    w0.push(i);
                }
            }
            w0 = independent_subset(p, &w0);
        }

        let out = self.phase2(p, x0, w0)?;

        // On a max-iteration exit the multiplier vector can be stale (it is only
        // refreshed on zero-step iterations); guard the indexing.
        let mut lambda_ineq = DVector::zeros(p.m_ineq());
        let nu_eq = DVector::from_fn(p.m_eq(), |i, _| {
            if i < out.multipliers.len() {
                out.multipliers[i]
            } else {
                0.0
            }
        });
        for (k, &i) in out.working.iter().enumerate() {
            let idx = p.m_eq() + k;
            if idx < out.multipliers.len() {
                lambda_ineq[i] = out.multipliers[idx];
            }
        }
        let mut sol = QpSolution {
            x: out.x,
            lambda_ineq,
            nu_eq,
            status: if out.hit_max_iter {
                QpStatus::MaxIter
            } else {
                QpStatus::Optimal
            },
            kkt_residual: 0.0,
            iterations: out.iterations,
            jitter: out.jitter,
            objective_trace: out.trace,
            phase1_violation,
            active_set: out.working,
        };
        sol.kkt_residual = verify_kkt(p, &sol, self.tol).max_residual();
        Ok(sol)
    }

    fn infeasible_solution(&self, p: &QpProblem, evidence: f64) -> QpSolution {
        QpSolution {
            x: DVector::zeros(p.n()),
            lambda_ineq: DVector::zeros(p.m_ineq()),
            nu_eq: DVector::zeros(p.m_eq()),
            status: QpStatus::Infeasible,
            kkt_residual: f64::INFINITY,
            iterations: 0,
            jitter: 0.0,
            objective_trace: Vec::new(),
            phase1_violation: Some(evidence),
            active_set: Vec::new(),
        }
    }

    /// Phase 1: minimize the peak violation `s` over `(x, s)`, as an LP with a
    /// small quadratic regularization. The linear cost drives `s` strictly
    /// negative whenever the feasible set has an interior, so the returned point
    /// is strictly feasible rather than boundary-biased.
    fn phase1(&self, p: &QpProblem, x_eq: &DVector<f64>, viol0: f64) -> Result<(DVector<f64>, f64)> {
        let n = p.n();
        let mi = p.m_ineq();
        let me = p.m_eq();
        let eps_x = 1e-10;
        let eps_s = 1e-6;

        let mut q_aux = DMatrix::zeros(n + 1, n + 1);
        for i in 0..n {
            q_aux[(i, i)] = eps_x;
        }
        q_aux[(n, n)] = eps_s;
        let mut c_aux = DVector::zeros(n + 1);
        c_aux[n] = 1.0;

        let mut a_ineq = DMatrix::zeros(mi, n + 1);
        a_ineq.view_mut((0, 0), (mi, n)).copy_from(&p.a_ineq);
        for i in 0..mi {
            a_ineq[(i, n)] = -1.0;
        }
        let mut a_eq = DMatrix::zeros(me, n + 1);
        if me > 0 {
            a_eq.view_mut((0, 0), (me, n)).copy_from(&p.a_eq);
        }
        let aux = QpProblem::new(q_aux, c_aux, a_ineq, p.b_ineq.clone(), a_eq, p.b_eq.clone())?;

        let mut y0 = DVector::zeros(n + 1);
        y0.rows_mut(0, n).copy_from(x_eq);
        y0[n] = viol0 + 1.0;

        let out = self.phase2(&aux, y0, Vec::new())?;
        let x = DVector::from_fn(n, |i, _| out.x[i]);
        let viol = max_violation(&p.a_ineq, &p.b_ineq, &x);
        Ok((x, viol))
    }

    /// Primal active-set iteration from a feasible point.
    fn phase2(&self, p: &QpProblem, x0: DVector<f64>, w0: Vec<usize>) -> Result<Phase2Out> {
        let n = p.n();
        let me = p.m_eq();
        let mut x = x0;
        let mut working = w0;
        let mut jitter_used = 0.0f64;
        // Cost matrix actually iterated on. When a singular KKT system reveals a
        // flat cost direction, a Tikhonov term is added once and kept for the
        // rest of the solve so the iteration has a genuine strictly convex
        // merit function instead of amplifying roundoff along the flat set.
        let mut q_eff = p.q.clone();
        let objective_eff =
            |q: &DMatrix<f64>, x: &DVector<f64>| 0.5 * (x.transpose() * q * x)[(0, 0)] + p.c.dot(x);
        let mut trace = vec![objective_eff(&q_eff, &x)];
        let mut iterations = 0usize;
        let mut multipliers = DVector::zeros(me);

        loop {
            if iterations >= self.max_iter {
                return Ok(Phase2Out {
                    x,
                    working,
                    multipliers,
                    iterations,
                    jitter: jitter_used,
                    trace,
                    hit_max_iter: true,
                });
            }
            iterations += 1;

            let build = |q_eff: &DMatrix<f64>, x: &DVector<f64>, working: &[usize]| {
                let grad = q_eff * x + &p.c;
                let mw = me + working.len();
                let mut kkt = DMatrix::zeros(n + mw, n + mw);
                kkt.view_mut((0, 0), (n, n)).copy_from(q_eff);
                for r in 0..me {
                    for c in 0..n {
                        let v = p.a_eq[(r, c)];
                        kkt[(n + r, c)] = v;
                        kkt[(c, n + r)] = v;
                    }
                }
                for (k, &i) in working.iter().enumerate() {
                    for c in 0..n {
                        let v = p.a_ineq[(i, c)];
                        kkt[(n + me + k, c)] = v;
                        kkt[(c, n + me + k)] = v;
                    }
                }
                let mut rhs = DVector::zeros(n + mw);
                for i in 0..n {
                    rhs[i] = -grad[i];
                }
                (kkt, rhs)
            };

            let (kkt, rhs) = build(&q_eff, &x, &working);
            let sol = match solve_linear(&kkt, &rhs) {
                Some(s) => s,
                None => {
                    if jitter_used == 0.0 {
                        jitter_used = JITTER;
                        for i in 0..n {
                            q_eff[(i, i)] += JITTER;
                        }
                        // Restart the merit trace on the jittered objective.
                        trace = vec![objective_eff(&q_eff, &x)];
                    }
                    // Jitter fixes flat cost directions; a still-singular
                    // system means (near-)dependent working-set rows. Shed the
                    // most recently added constraints until it factors.
                    loop {
                        let (kkt_j, rhs_j) = build(&q_eff, &x, &working);
                        if let Some(s) = solve_linear(&kkt_j, &rhs_j) {
                            break s;
                        }
                        if working.pop().is_none() {
                            return Err(Error::QpDefinition(
                                "KKT system singular even with jitter (dependent equality rows?)"
                                    .into(),
                            ));
                        }
                    }
                }
            };
            let step = DVector::from_fn(n, |i, _| sol[i]);

            // Stationarity: a negligible step, or a step whose predicted merit
            // decrease is below the roundoff floor of the gradient scale. The
            // second test matters for nearly-flat cost directions where the
            // computed step is noise-dominated and would otherwise wander.
            let grad = &q_eff * &x + &p.c;
            let predicted_decrease =
                -(grad.dot(&step) + 0.5 * (step.transpose() * &q_eff * &step)[(0, 0)]);
            let noise_floor = 1e-14 * (1.0 + grad.amax() * (1.0 + x.amax()));
            let stationary =
                step.amax() <= 1e-11 * (1.0 + x.amax()) || predicted_decrease <= noise_floor;

            if stationary {
                multipliers = DVector::from_fn(me + working.len(), |i, _| sol[n + i]);
                // Optimal iff all working-set inequality multipliers are
                // non-negative; otherwise drop the most negative one.
                let mut drop_idx = None;
                let mut most_negative = -self.tol;
                for k in 0..working.len() {
                    let lam = multipliers[me + k];
                    if lam < most_negative {
                        most_negative = lam;
                        drop_idx = Some(k);
                    }
                }
                match drop_idx {
                    None => {
                        return Ok(Phase2Out {
                            x,
                            working,
                            multipliers,
                            iterations,
                            jitter: jitter_used,
                            trace,
                            hit_max_iter: false,
                        });
                    }
                    Some(k) => {
                        working.remove(k);
                    }
                }
            } else {
                // Largest step along `step` before a new constraint blocks.
                let mut alpha = 1.0f64;
                let mut blocker = None;
                for i in 0..p.m_ineq() {
                    if working.contains(&i) {
                        continue;
                    }
                    let a_row = p.a_ineq.row(i);
                    let d = a_row.transpose().dot(&step);
                    if d > 1e-12 {
                        let slack = p.b_ineq[i] - a_row.transpose().dot(&x);
                        let a = (slack / d).max(0.0);
                        if a < alpha {
                            alpha = a;
                            blocker = Some(i);
                        }
                    }
                }
                if alpha > 0.0 {
                    x += alpha * &step;
                    trace.push(objective_eff(&q_eff, &x));
                }
                if let Some(i) = blocker {
                    working.push(i);
                }
            }
        }
    }
}

fn max_violation(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let slack = a * x - b;
    slack.max().max(0.0)
}

/// LU solve with an explicit residual check; `None` when (near-)singular.
fn solve_linear(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = m.clone().full_piv_lu();
    let sol = lu.solve(rhs)?;
    let res = (m * &sol - rhs).amax();
    if !res.is_finite() || res > 1e-7 * (1.0 + rhs.amax()) {
        return None;
    }
    Some(sol)
}

/// Greedily keep rows (equalities plus the listed inequalities) linearly independent.
fn independent_subset(p: &QpProblem, candidates: &[usize]) -> Vec<usize> {
    let n = p.n();
    let me = p.m_eq();
    let mut rows: Vec<DVector<f64>> = (0..me).map(|i| p.a_eq.row(i).transpose()).collect();
    let mut kept = Vec::new();
    for &i in candidates {
        let row = p.a_ineq.row(i).transpose();
        let mut mat = DMatrix::zeros(rows.len() + 1, n);
        for (k, r) in rows.iter().enumerate() {
            mat.row_mut(k).copy_from(&r.transpose());
        }
        mat.row_mut(rows.len()).copy_from(&row.transpose());
        if mat.rank(1e-10) == rows.len() + 1 {
            rows.push(row);
            kept.push(i);
        }
    }
    kept
}
