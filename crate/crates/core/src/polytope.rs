//! Halfspace polytope algebra and invariant-set computation.
//!
//! A polytope is stored as `{x : Hx <= h}`. Support functions are evaluated as
//! LPs solved through the dense QP solver with a vanishing quadratic
//! regularization (`Q = eps*I`), which keeps a single optimization code path in
//! the crate. On top of support evaluations the module builds Minkowski
//! differences, redundancy removal, maximal invariant sets for a family of
//! closed-loop maps, and an outer approximation of the minimal robust
//! positively invariant set.
//!
//! All routines are written for general dimension but only exercised for the
//! 2-D state and 1-D input sets of this plant (n <= 3).

use crate::qp::{QpProblem, QpSolver, QpStatus};
use crate::textmat;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::io::{BufRead, Write};

/// Regularization used when solving support-function LPs as QPs.
const SUPPORT_EPS: f64 = 1e-10;
/// A support point with a norm beyond this is treated as an unbounded direction.
const UNBOUNDED_NORM: f64 = 1e8;
/// Redundancy and inclusion tolerance for normalized rows.
const ROW_TOL: f64 = 1e-10;

/// Convex polytope in halfspace representation `{x : Hx <= h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope {
    h_mat: DMatrix<f64>,
    h_vec: DVector<f64>,
}

impl HPolytope {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() {
            return Err(Error::Shape(format!(
                "H has {} rows but h has {} entries",
                h_mat.nrows(),
                h_vec.len()
            )));
        }
        if h_mat.nrows() == 0 || h_mat.ncols() == 0 {
            return Err(Error::Shape(
                "polytope needs at least one row and one column".into(),
            ));
        }
        Ok(HPolytope { h_mat, h_vec })
    }

    /// Axis-aligned box `[lo_i, hi_i]` in each coordinate.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Shape("box bounds must have equal nonzero length".into()));
        }
        let n = lo.len();
        let mut h_mat = DMatrix::zeros(2 * n, n);
        let mut h_vec = DVector::zeros(2 * n);
        for i in 0..n {
            if lo[i] > hi[i] {
                return Err(Error::Domain(format!(
                    "box bound {i} has lo {} > hi {}",
                    lo[i], hi[i]
                )));
            }
            h_mat[(2 * i, i)] = 1.0;
            h_vec[2 * i] = hi[i];
            h_mat[(2 * i + 1, i)] = -1.0;
            h_vec[2 * i + 1] = -lo[i];
        }
        Ok(HPolytope { h_mat, h_vec })
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn rows(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn h_mat(&self) -> &DMatrix<f64> {
        &self.h_mat
    }

    pub fn h_vec(&self) -> &DVector<f64> {
        &self.h_vec
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        let slack = &self.h_mat * x - &self.h_vec;
        slack.max() <= tol
    }

    /// Stack the constraint rows of both sets.
    pub fn intersect(&self, other: &HPolytope) -> Result<HPolytope> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "cannot intersect {}-D with {}-D polytope",
                self.dim(),
                other.dim()
            )));
        }
        let m = self.rows() + other.rows();
        let mut h_mat = DMatrix::zeros(m, self.dim());
        let mut h_vec = DVector::zeros(m);
        h_mat
            .view_mut((0, 0), (self.rows(), self.dim()))
            .copy_from(&self.h_mat);
        h_mat
            .view_mut((self.rows(), 0), (other.rows(), self.dim()))
            .copy_from(&other.h_mat);
        h_vec.rows_mut(0, self.rows()).copy_from(&self.h_vec);
        h_vec
            .rows_mut(self.rows(), other.rows())
            .copy_from(&other.h_vec);
        HPolytope::new(h_mat, h_vec)
    }

    /// Dilation `{factor * x : x in P}` (for sets used around the origin).
    pub fn scale(&self, factor: f64) -> HPolytope {
        HPolytope {
            h_mat: self.h_mat.clone(),
            h_vec: &self.h_vec * factor,
        }
    }

    /// Translate the set by `t`.
    pub fn translate(&self, t: &DVector<f64>) -> HPolytope {
        HPolytope {
            h_mat: self.h_mat.clone(),
            h_vec: &self.h_vec + &self.h_mat * t,
        }
    }

    /// Support function `max_{x in P} d'x`, solved as a regularized LP.
    pub fn support(&self, d: &DVector<f64>) -> Result<f64> {
        if d.len() != self.dim() {
            return Err(Error::Shape(format!(
                "direction has dimension {}, polytope is {}-D",
                d.len(),
                self.dim()
            )));
        }
        let n = self.dim();
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            q[(i, i)] = SUPPORT_EPS;
        }
        let p = QpProblem::new(
            q,
            -d.clone(),
            self.h_mat.clone(),
            self.h_vec.clone(),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
        )?;
        let mut solver = QpSolver::new(1e-9, 500);
        let sol = solver.solve(&p, None)?;
        match sol.status {
            QpStatus::Infeasible => Err(Error::Polytope(format!(
                "support of empty set (phase-1 violation {:e})",
                sol.phase1_violation.unwrap_or(f64::NAN)
            ))),
            QpStatus::MaxIter => Err(Error::Polytope("support LP did not converge".into())),
            QpStatus::Optimal => {
                if sol.x.amax() > UNBOUNDED_NORM {
                    return Err(Error::Polytope(format!(
                        "unbounded in direction {:?}",
                        d.as_slice()
                    )));
                }
                Ok(d.dot(&sol.x))
            }
        }
    }

    /// Feasibility of the constraint system, via a phase-1 solve.
    pub fn is_empty(&self) -> bool {
        let n = self.dim();
        let mut q = DMatrix::zeros(n, n);
        for i in 0..n {
            q[(i, i)] = SUPPORT_EPS;
        }
        let p = match QpProblem::new(
            q,
            DVector::zeros(n),
            self.h_mat.clone(),
            self.h_vec.clone(),
            DMatrix::zeros(0, n),
            DVector::zeros(0),
        ) {
            Ok(p) => p,
            Err(_) => return true,
        };
        let mut solver = QpSolver::new(1e-9, 500);
        match solver.solve(&p, None) {
            Ok(sol) => sol.status == QpStatus::Infeasible,
            Err(_) => true,
        }
    }

    /// Axis-aligned bounding box via support evaluations.
    pub fn bounding_box(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let mut lo = vec![0.0; n];
        let mut hi = vec![0.0; n];
        for i in 0..n {
            let mut d = DVector::zeros(n);
            d[i] = 1.0;
            hi[i] = self.support(&d)?;
            d[i] = -1.0;
            lo[i] = -self.support(&d)?;
        }
        Ok((lo, hi))
    }

    /// `P ⊖ S`: shrink every offset of `P` by the support of `S` in that row
    /// direction. The result may be empty; check with [`HPolytope::is_empty`].
    pub fn minkowski_diff(&self, s: &HPolytope) -> Result<HPolytope> {
        if self.dim() != s.dim() {
            return Err(Error::Shape(format!(
                "Minkowski difference of {}-D and {}-D sets",
                self.dim(),
                s.dim()
            )));
        }
        let mut h_vec = self.h_vec.clone();
        for i in 0..self.rows() {
            let d = self.h_mat.row(i).transpose();
            h_vec[i] -= s.support(&d)?;
        }
        HPolytope::new(self.h_mat.clone(), h_vec)?.normalize()
    }

    /// `P ⊆ Q` within `tol`, tested with support functions against `Q`'s rows.
    pub fn subset_of(&self, other: &HPolytope, tol: f64) -> Result<bool> {
        for i in 0..other.rows() {
            let d = other.h_mat.row(i).transpose();
            let sup = self.support(&d)?;
            if sup > other.h_vec[i] + tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Scale rows to unit norm and drop redundant ones.
    ///
    /// A row is redundant when the remaining rows already confine the set to
    /// its halfspace; rows are examined in order with immediate removal, which
    /// keeps exactly one of a duplicated pair. Empty sets are returned
    /// unchanged (row-scaled only) and flagged through [`HPolytope::is_empty`],
    /// never as an error.
    pub fn normalize(&self) -> Result<HPolytope> {
        let n = self.dim();
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::with_capacity(self.rows());
        for i in 0..self.rows() {
            let r = self.h_mat.row(i).transpose();
            let norm = r.norm();
            if norm < 1e-14 {
                // A zero row with negative offset empties the set; a zero row
                // with non-negative offset is vacuous.
                if self.h_vec[i] < 0.0 {
                    rows.push((r, self.h_vec[i]));
                }
                continue;
            }
            rows.push((r / norm, self.h_vec[i] / norm));
        }
        if rows.is_empty() {
            return Err(Error::Polytope(
                "normalize produced an unconstrained set (all rows vacuous)".into(),
            ));
        }
        let build = |rows: &[(DVector<f64>, f64)]| -> HPolytope {
            let m = rows.len();
            let mut h_mat = DMatrix::zeros(m, n);
            let mut h_vec = DVector::zeros(m);
            for (k, (r, off)) in rows.iter().enumerate() {
                h_mat.row_mut(k).copy_from(&r.transpose());
                h_vec[k] = *off;
            }
            HPolytope { h_mat, h_vec }
        };
        if build(&rows).is_empty() {
            return Ok(build(&rows));
        }
        let mut k = 0;
        while k < rows.len() && rows.len() > 1 {
            let mut rest = rows.clone();
            let (dir, off) = rest.remove(k);
            let candidate = build(&rest);
            match candidate.support(&dir) {
                Ok(sup) if sup <= off + ROW_TOL => {
                    rows = rest;
                }
                _ => {
                    // Unbounded without it or active: the row is essential.
                    k += 1;
                }
            }
        }
        Ok(build(&rows))
    }

    /// Serialize in the shared plain-text matrix format.
    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "hpoly 1")?;
        textmat::write_matrix(w, "H", &self.h_mat)?;
        textmat::write_vector(w, "h", &self.h_vec)?;
        Ok(())
    }

    pub fn load<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = textmat::Lines::new(r);
        let header = lines.next_line()?;
        if header.trim() != "hpoly 1" {
            return Err(Error::Parse(format!("unexpected hpoly header: {header}")));
        }
        let h_mat = textmat::read_matrix(&mut lines, "H")?;
        let h_vec = textmat::read_vector(&mut lines, "h")?;
        HPolytope::new(h_mat, h_vec)
    }
}

/// Spectral radius via complex eigenvalues (general square matrices).
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

/// Maximal invariant set inside `x_set` for every map in `a_cl_list`.
///
/// Iterates `Ω_{k+1} = Ω_k ∩ {x : A x ∈ Ω_k for all A}` until the mutual
/// inclusion test detects a fixed point (tolerance 1e-9) or `iter_cap` is hit.
pub fn max_invariant_set(
    a_cl_list: &[DMatrix<f64>],
    x_set: &HPolytope,
    iter_cap: usize,
) -> Result<HPolytope> {
    if a_cl_list.is_empty() {
        return Err(Error::Synthesis("no closed-loop matrices supplied".into()));
    }
    for (j, a) in a_cl_list.iter().enumerate() {
        if a.nrows() != x_set.dim() || a.ncols() != x_set.dim() {
            return Err(Error::Shape(format!(
                "closed-loop matrix {j} is {}x{}, set is {}-D",
                a.nrows(),
                a.ncols(),
                x_set.dim()
            )));
        }
        let sr = spectral_radius(a);
        if !(sr < 1.0) {
            return Err(Error::Synthesis(format!(
                "closed-loop matrix {j} is not Schur (spectral radius {sr})"
            )));
        }
    }
    x_set.bounding_box().map_err(|_| {
        Error::Synthesis("constraint set must be bounded for invariant-set iteration".into())
    })?;
    if !x_set.contains(&DVector::zeros(x_set.dim()), 1e-9) {
        return Err(Error::Synthesis(
            "constraint set does not contain the (shifted) target point".into(),
        ));
    }

    let mut omega = x_set.normalize()?;
    for _ in 0..iter_cap {
        let mut next = omega.clone();
        for a in a_cl_list {
            let pre = HPolytope::new(&omega.h_mat * a, omega.h_vec.clone())?;
            next = next.intersect(&pre)?;
        }
        let next = next.normalize()?;
        if omega.subset_of(&next, 1e-9)? {
            return Ok(next);
        }
        omega = next;
    }
    Err(Error::Synthesis(format!(
        "maximal invariant set did not converge within {iter_cap} iterations"
    )))
}

/// Outer approximation of the minimal robust positively invariant set of
/// `x+ = A x + w`, `w in E`.
///
/// Finds the smallest `s` with contraction factor `alpha(s) <= eps` where
/// `A^s E ⊆ alpha E`, accumulates the support of the Minkowski sum
/// `E ⊕ AE ⊕ ... ⊕ A^{s-1}E` on a fixed grid of directions, and scales the
/// result by `1/(1-alpha)`.
pub fn mrpi_outer_approx(
    a_cl: &DMatrix<f64>,
    e_set: &HPolytope,
    eps: f64,
    directions: usize,
    s_max: usize,
) -> Result<HPolytope> {
    let n = e_set.dim();
    if n != 2 {
        return Err(Error::Polytope(
            "mRPI direction grid is only implemented for 2-D sets".into(),
        ));
    }
    if a_cl.nrows() != n || a_cl.ncols() != n {
        return Err(Error::Shape("closed-loop matrix dimension mismatch".into()));
    }
    let sr = spectral_radius(a_cl);
    if !(sr < 1.0) {
        return Err(Error::Synthesis(format!(
            "mRPI requires a Schur matrix (spectral radius {sr})"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("mRPI eps must be in (0,1), got {eps}")));
    }

    // Degenerate disturbance set: the mRPI collapses to the origin.
    let (lo, hi) = e_set.bounding_box()?;
    let span = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| (h - l).abs())
        .fold(0.0f64, f64::max);
    if span < 1e-12 {
        return HPolytope::from_box(&vec![0.0; n], &vec![0.0; n]);
    }
    let e_norm = e_set.normalize()?;
    for i in 0..e_norm.rows() {
        if e_norm.h_vec()[i] <= 1e-12 {
            return Err(Error::Polytope(
                "mRPI disturbance set must contain the origin in its interior".into(),
            ));
        }
    }

    // Contraction test: alpha(s) = max_i support_E((A^s)' H_i) / h_i.
    let alpha_of = |a_pow_t: &DMatrix<f64>| -> Result<f64> {
        let mut alpha = 0.0f64;
        for i in 0..e_norm.rows() {
            let d = a_pow_t * e_norm.h_mat().row(i).transpose();
            alpha = alpha.max(e_norm.support(&d)? / e_norm.h_vec()[i]);
        }
        Ok(alpha)
    };

    let a_t = a_cl.transpose();
    let mut a_pow_t = a_t.clone(); // (A^s)' for the current s
    let mut s = 1usize;
    let mut alpha = alpha_of(&a_pow_t)?;
    while alpha > eps {
        if s >= s_max {
            return Err(Error::Synthesis(format!(
                "mRPI approximation failed: alpha = {alpha} after s = {s} terms"
            )));
        }
        a_pow_t = &a_pow_t * &a_t;
        s += 1;
        alpha = alpha_of(&a_pow_t)?;
    }

    // Support of F_s = ⊕_{i=0}^{s-1} A^i E on the direction grid.
    let mut h_mat = DMatrix::zeros(directions, n);
    let mut h_vec = DVector::zeros(directions);
    for k in 0..directions {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / directions as f64;
        let d = DVector::from_row_slice(&[theta.cos(), theta.sin()]);
        let mut dir = d.clone();
        let mut total = 0.0;
        for _ in 0..s {
            total += e_norm.support(&dir)?;
            dir = &a_t * dir;
        }
        h_mat.row_mut(k).copy_from(&d.transpose());
        h_vec[k] = total / (1.0 - alpha);
    }
    HPolytope::new(h_mat, h_vec)?.normalize()
}
