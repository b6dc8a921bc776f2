//! Gain and certificate synthesis for the 2-state, single-input plant.
//!
//! Provides the discrete-time LQR gain, discrete Lyapunov solves, and a common
//! quadratic Lyapunov certificate across a family of closed-loop vertex
//! matrices (alternating projections onto the PSD cone and the affine Lyapunov
//! constraints, with a scaled single-vertex fallback).

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix2, RowVector2, Vector2};

/// Spectral radius of a 2x2 matrix, from the characteristic polynomial.
pub fn spectral_radius2(a: &Matrix2<f64>) -> f64 {
    let tr = a[(0, 0)] + a[(1, 1)];
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    let half = 0.5 * tr;
    let disc = half * half - det;
    if disc >= 0.0 {
        let r = disc.sqrt();
        (half + r).abs().max((half - r).abs())
    } else {
        det.sqrt()
    }
}

/// Largest eigenvalue of a symmetric 2x2 matrix.
pub fn max_eig_sym2(m: &Matrix2<f64>) -> f64 {
    let mean = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    mean + (diff * diff + off * off).sqrt()
}

fn min_eig_sym2(m: &Matrix2<f64>) -> f64 {
    let mean = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    mean - (diff * diff + off * off).sqrt()
}

/// Infinite-horizon discrete LQR for `x+ = A x + B u` with weights `(Q, r)`.
///
/// Returns `(kappa, P)` with the sign convention `u = kappa * x`, so the closed
/// loop is `A + B * kappa`.
pub fn dlqr(
    a: &Matrix2<f64>,
    b: &Vector2<f64>,
    q: &Matrix2<f64>,
    r: f64,
) -> Result<(RowVector2<f64>, Matrix2<f64>)> {
    if r <= 0.0 {
        return Err(Error::Synthesis(format!("LQR input weight must be > 0, got {r}")));
    }
    let mut p = *q;
    for _ in 0..200_000 {
        let btpb = (b.transpose() * p * b)[(0, 0)] + r;
        let btpa = b.transpose() * p * a;
        let gain = btpa / btpb;
        let p_next = q + a.transpose() * p * a - (a.transpose() * p * b) * gain;
        let p_next = 0.5 * (p_next + p_next.transpose());
        let delta = (p_next - p).abs().max();
        p = p_next;
        if delta <= 1e-13 * (1.0 + p.abs().max()) {
            let btpb = (b.transpose() * p * b)[(0, 0)] + r;
            let gain = b.transpose() * p * a / btpb;
            let kappa = -gain;
            let a_cl = a + b * kappa;
            if spectral_radius2(&a_cl) >= 1.0 {
                return Err(Error::Synthesis(
                    "LQR converged but the closed loop is not Schur".into(),
                ));
            }
            return Ok((kappa, p));
        }
    }
    Err(Error::Synthesis("Riccati iteration did not converge".into()))
}

/// Solve the discrete Lyapunov equation `A' P A - P + S = 0`.
pub fn dlyap(a: &Matrix2<f64>, s: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    // vec(A'PA) = (A' ⊗ A') vec(P) in column-major vectorization.
    let a_t = DMatrix::from_fn(2, 2, |r, c| a.transpose()[(r, c)]);
    let kron = a_t.kronecker(&a_t);
    let lhs = DMatrix::<f64>::identity(4, 4) - kron;
    let rhs = DVector::from_column_slice(&[s[(0, 0)], s[(1, 0)], s[(0, 1)], s[(1, 1)]]);
    let sol = lhs
        .full_piv_lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Synthesis("Lyapunov equation is singular (non-Schur A?)".into()))?;
    let p = Matrix2::new(sol[0], sol[2], sol[1], sol[3]);
    Ok(0.5 * (p + p.transpose()))
}

/// Residual of the vertex Lyapunov inequality: `A' P A - P + S`.
pub fn lyapunov_residual(a_cl: &Matrix2<f64>, p: &Matrix2<f64>, s: &Matrix2<f64>) -> Matrix2<f64> {
    a_cl.transpose() * p * a_cl - p + s
}

/// Clip a symmetric 2x2 matrix onto `{M : M >= floor * I}`.
fn psd_clip(m: &Matrix2<f64>, floor: f64) -> Matrix2<f64> {
    let sym = 0.5 * (m + m.transpose());
    let mean = 0.5 * (sym[(0, 0)] + sym[(1, 1)]);
    let diff = 0.5 * (sym[(0, 0)] - sym[(1, 1)]);
    let off = sym[(0, 1)];
    let radius = (diff * diff + off * off).sqrt();
    let l1 = mean + radius;
    let l2 = mean - radius;
    if l2 >= floor {
        return sym;
    }
    // Eigenvectors of [[a, b], [b, d]].
    let (v1, v2) = if radius < 1e-300 {
        (Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0))
    } else {
        let v1 = if off.abs() > 1e-300 {
            Vector2::new(off, l1 - sym[(0, 0)]).normalize()
        } else if diff >= 0.0 {
            Vector2::new(1.0, 0.0)
        } else {
            Vector2::new(0.0, 1.0)
        };
        (v1, Vector2::new(-v1[1], v1[0]))
    };
    let l1c = l1.max(floor);
    let l2c = l2.max(floor);
    l1c * v1 * v1.transpose() + l2c * v2 * v2.transpose()
}

/// Find `P > 0` with `A_j' P A_j - P + S <= -margin*I` for every vertex.
///
/// Alternating projections on the variables `(P, Y_1..Y_m)` between
/// the affine set `{Y_j = P - A_j' P A_j - S}` and the cone
/// `{P >= delta*I, Y_j >= margin*I}`. Falls back to scaling a single-vertex
/// Lyapunov solution when the projections stall.
pub fn common_lyapunov(
    a_cls: &[Matrix2<f64>],
    s: &Matrix2<f64>,
    margin: f64,
    max_iter: usize,
) -> Result<Matrix2<f64>> {
    if a_cls.is_empty() {
        return Err(Error::Synthesis("no closed-loop matrices supplied".into()));
    }
    for (j, a) in a_cls.iter().enumerate() {
        let sr = spectral_radius2(a);
        if !(sr < 1.0) {
            return Err(Error::Synthesis(format!(
                "vertex {j} closed loop is not Schur (spectral radius {sr})"
            )));
        }
    }

    // Identical vertices collapse to a single exact Lyapunov solve.
    let all_equal = a_cls
        .iter()
        .all(|a| (a - a_cls[0]).abs().max() < 1e-14);
    if all_equal {
        return dlyap(&a_cls[0], s);
    }

    let m = a_cls.len();
    let delta = 1e-6 * max_eig_sym2(s).max(1e-12);

    // Basis of symmetric 2x2 matrices for the least-squares affine projection.
    let basis = [
        Matrix2::new(1.0, 0.0, 0.0, 0.0),
        Matrix2::new(0.0, 1.0, 1.0, 0.0),
        Matrix2::new(0.0, 0.0, 0.0, 1.0),
    ];
    // Rows: P entries (4) then each Y_j's entries (4 per vertex). The affine
    // set is parameterized by p in R^3 through L(p) = (P(p), {P - A'PA - S}).
    let rows = 4 * (1 + m);
    let mut design = DMatrix::zeros(rows, 3);
    for (k, e) in basis.iter().enumerate() {
        design[(0, k)] = e[(0, 0)];
        design[(1, k)] = e[(1, 0)];
        design[(2, k)] = e[(0, 1)];
        design[(3, k)] = e[(1, 1)];
        for (j, a) in a_cls.iter().enumerate() {
            let l = e - a.transpose() * e * a;
            let base = 4 * (1 + j);
            design[(base, k)] = l[(0, 0)];
            design[(base + 1, k)] = l[(1, 0)];
            design[(base + 2, k)] = l[(0, 1)];
            design[(base + 3, k)] = l[(1, 1)];
        }
    }
    let normal = design.transpose() * &design;
    let normal_lu = normal.full_piv_lu();

    let mut p = dlyap(
        a_cls
            .iter()
            .max_by(|x, y| {
                spectral_radius2(x)
                    .partial_cmp(&spectral_radius2(y))
                    .unwrap()
            })
            .unwrap(),
        s,
    )
    .unwrap_or(*s);
    let mut ys: Vec<Matrix2<f64>> = a_cls
        .iter()
        .map(|a| p - a.transpose() * p * a - s)
        .collect();

    for _ in 0..max_iter {
        // Project onto the cone.
        let p_cone = psd_clip(&p, delta);
        let ys_cone: Vec<Matrix2<f64>> = ys.iter().map(|y| psd_clip(y, margin)).collect();

        // Project onto the affine set: least squares in the 3 coordinates of P.
        let mut target = DVector::zeros(rows);
        target[0] = p_cone[(0, 0)];
        target[1] = p_cone[(1, 0)];
        target[2] = p_cone[(0, 1)];
        target[3] = p_cone[(1, 1)];
        for (j, y) in ys_cone.iter().enumerate() {
            let shifted = y + s;
            let base = 4 * (1 + j);
            target[base] = shifted[(0, 0)];
            target[base + 1] = shifted[(1, 0)];
            target[base + 2] = shifted[(0, 1)];
            target[base + 3] = shifted[(1, 1)];
        }
        let rhs = design.transpose() * target;
        let coeffs = normal_lu
            .solve(&rhs)
            .ok_or_else(|| Error::Synthesis("affine projection is singular".into()))?;
        p = coeffs[0] * basis[0] + coeffs[1] * basis[1] + coeffs[2] * basis[2];
        ys = a_cls
            .iter()
            .map(|a| p - a.transpose() * p * a - s)
            .collect();

        // Feasibility check on the affine iterate.
        let worst = a_cls
            .iter()
            .map(|a| max_eig_sym2(&lyapunov_residual(a, &p, s)))
            .fold(f64::NEG_INFINITY, f64::max);
        if worst <= -0.5 * margin && min_eig_sym2(&p) >= 0.5 * delta {
            return Ok(p);
        }
    }

    // Fallback: scale a single-vertex Lyapunov solution until all vertex
    // inequalities hold (works when that P decreases along every vertex).
    for base in a_cls {
        if let Ok(p0) = dlyap(base, s) {
            let mut beta = 1.0;
            while beta <= 1e6 {
                let cand = beta * p0;
                let worst = a_cls
                    .iter()
                    .map(|a| max_eig_sym2(&lyapunov_residual(a, &cand, s)))
                    .fold(f64::NEG_INFINITY, f64::max);
                if worst <= -0.5 * margin {
                    return Ok(cand);
                }
                beta *= 1.05;
            }
        }
    }
    Err(Error::Synthesis(
        "no common Lyapunov certificate found (projections stalled, scaling cap exceeded)".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spectral_radius_real_and_complex() {
        let a = Matrix2::new(0.5, 0.0, 0.0, -0.8);
        assert!((spectral_radius2(&a) - 0.8).abs() < 1e-14);
        // Rotation scaled by 0.9: complex pair with modulus 0.9.
        let r = 0.9 * Matrix2::new(0.0, -1.0, 1.0, 0.0);
        assert!((spectral_radius2(&r) - 0.9).abs() < 1e-14);
    }

    #[test]
    fn dlyap_solves_exactly() {
        let a = Matrix2::new(0.8, 0.1, -0.05, 0.7);
        let s = Matrix2::new(1.0, 0.2, 0.2, 2.0);
        let p = dlyap(&a, &s).unwrap();
        let res = lyapunov_residual(&a, &p, &s);
        assert!(res.abs().max() < 1e-10, "residual {res}");
        // Cross-check against the truncated series sum_k (A')^k S A^k.
        let mut acc: Matrix2<f64> = Matrix2::zeros();
        let mut term = s;
        let mut a_pow: Matrix2<f64> = Matrix2::identity();
        for _ in 0..500 {
            acc += term;
            a_pow *= a;
            term = a_pow.transpose() * s * a_pow;
        }
        assert!((p - acc).abs().max() < 1e-8);
    }

    #[test]
    fn lqr_stabilizes_and_satisfies_riccati() {
        let a = Matrix2::new(1.01, 0.05, 0.0, 0.97);
        let b = Vector2::new(0.0, -0.5);
        let q = Matrix2::new(1.0, 0.0, 0.0, 10.0);
        let (kappa, p) = dlqr(&a, &b, &q, 100.0).unwrap();
        let a_cl = a + b * kappa;
        assert!(spectral_radius2(&a_cl) < 1.0);
        // Closed-loop Lyapunov identity of the Riccati solution.
        let res = a_cl.transpose() * p * a_cl - p + q + kappa.transpose() * 100.0 * kappa;
        assert!(res.abs().max() < 1e-8, "Riccati residual {res}");
    }

    #[test]
    fn common_lyapunov_identical_vertices_is_exact_dlyap() {
        let a = Matrix2::new(0.85, 0.05, 0.02, 0.9);
        let s = Matrix2::new(1.0, 0.0, 0.0, 1.0);
        let p = common_lyapunov(&[a, a, a, a], &s, 1e-6, 2000).unwrap();
        let exact = dlyap(&a, &s).unwrap();
        assert!((p - exact).abs().max() < 1e-10);
    }

    #[test]
    fn common_lyapunov_certificate_holds_on_all_vertices() {
        let verts = [
            Matrix2::new(0.9, 0.05, 0.01, 0.85),
            Matrix2::new(0.88, 0.02, 0.03, 0.9),
            Matrix2::new(0.92, 0.04, 0.02, 0.8),
            Matrix2::new(0.86, 0.06, 0.01, 0.88),
        ];
        let s = Matrix2::new(1.0, 0.0, 0.0, 2.0);
        let p = common_lyapunov(&verts, &s, 1e-6, 5000).unwrap();
        assert!(min_eig_sym2(&p) > 0.0);
        for a in &verts {
            let worst = max_eig_sym2(&lyapunov_residual(a, &p, &s));
            assert!(worst <= 1e-8, "vertex residual {worst}");
        }
    }

    #[test]
    fn common_lyapunov_rejects_non_schur_vertex() {
        let verts = [
            Matrix2::new(0.9, 0.0, 0.0, 0.9),
            Matrix2::new(1.0, 0.0, 0.0, 0.5),
        ];
        let s = Matrix2::identity();
        assert!(common_lyapunov(&verts, &s, 1e-6, 100).is_err());
    }
}
