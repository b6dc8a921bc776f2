//! Polytopic LPV embedding of the collector model.
//!
//! The nonlinear discrete-time model admits an exact linear-parameter-varying
//! representation `x(k+1) = A(rho) x(k) + B(rho) u(k) + B_w w(k)` where the
//! scheduling vector `rho = (rho1, rho2)` is an endogenous function of the state:
//! `rho1` aggregates the plate-to-fluid heat transfer, `rho2` the saturated
//! spatial diffusion of the fluid. Both are bounded, so `[A(rho), B(rho)]` lives
//! in a polytope spanned by four LTI vertex models, and any admissible model is a
//! convex combination of those vertices with bilinear membership weights.

use crate::plant::{PlantParams, PlantState};
use crate::{Error, Result};
use nalgebra::{Matrix2, Vector2};
use std::f64::consts::PI;

/// Tolerance for clamping numerical dust at the boundary of the scheduling set.
const BOUND_DUST: f64 = 1e-9;

/// The scheduling vector `(rho1, rho2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulingPoint {
    /// Fluid-side heat-transfer group.
    pub rho1: f64,
    /// Spatial-diffusion group (1/m^2).
    pub rho2: f64,
}

impl SchedulingPoint {
    pub fn new(rho1: f64, rho2: f64) -> Self {
        SchedulingPoint { rho1, rho2 }
    }
}

/// A closed box of admissible scheduling values.
///
/// [`SchedulingBounds::full`] is the set P implied by the state ceilings; the
/// controller synthesis may use a tighter operating sub-box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulingBounds {
    pub rho1_min: f64,
    pub rho1_max: f64,
    pub rho2_min: f64,
    pub rho2_max: f64,
}

impl SchedulingBounds {
    /// The full scheduling set P: `rho1 in [0, d_i*pi*hbar_i]`, `rho2 in [0, 1/A_i]`.
    pub fn full(p: &PlantParams) -> Self {
        SchedulingBounds {
            rho1_min: 0.0,
            rho1_max: p.d_i * PI * p.hbar_i,
            rho2_min: 0.0,
            rho2_max: 1.0 / p.a_i,
        }
    }

    /// Bounds induced by a temperature operating box, via the scheduling map.
    ///
    /// The scheduling map is monotone in each state, so the image of a state box
    /// is exactly the box of the corner images.
    pub fn from_state_box(p: &PlantParams, tp_lo: f64, tp_hi: f64, tf_lo: f64, tf_hi: f64) -> Result<Self> {
        if !(0.0 <= tp_lo && tp_lo < tp_hi && tp_hi <= p.tp_max)
            || !(0.0 <= tf_lo && tf_lo < tf_hi && tf_hi <= p.tf_max)
        {
            return Err(Error::Domain(format!(
                "state box [{tp_lo}, {tp_hi}] x [{tf_lo}, {tf_hi}] must be ordered and inside the ceilings"
            )));
        }
        let lo = scheduling_map(&PlantState::new(tp_lo, tf_lo), p)?;
        let hi = scheduling_map(&PlantState::new(tp_hi, tf_hi), p)?;
        Ok(SchedulingBounds {
            rho1_min: lo.rho1,
            rho1_max: hi.rho1,
            rho2_min: lo.rho2,
            rho2_max: hi.rho2,
        })
    }

    pub fn contains(&self, rho: &SchedulingPoint, tol: f64) -> bool {
        rho.rho1 >= self.rho1_min - tol
            && rho.rho1 <= self.rho1_max + tol
            && rho.rho2 >= self.rho2_min - tol
            && rho.rho2 <= self.rho2_max + tol
    }

    /// Clamp values within `BOUND_DUST` of a bound onto it; error if further out.
    pub fn admit(&self, rho: SchedulingPoint) -> Result<SchedulingPoint> {
        if !self.contains(&rho, BOUND_DUST) {
            return Err(Error::Scheduling(format!(
                "rho = ({}, {}) outside [{}, {}] x [{}, {}]",
                rho.rho1, rho.rho2, self.rho1_min, self.rho1_max, self.rho2_min, self.rho2_max
            )));
        }
        Ok(SchedulingPoint {
            rho1: rho.rho1.clamp(self.rho1_min, self.rho1_max),
            rho2: rho.rho2.clamp(self.rho2_min, self.rho2_max),
        })
    }

    pub fn centroid(&self) -> SchedulingPoint {
        SchedulingPoint {
            rho1: 0.5 * (self.rho1_min + self.rho1_max),
            rho2: 0.5 * (self.rho2_min + self.rho2_max),
        }
    }

    /// Corner `j` in the frozen vertex order:
    /// `(min,min), (min,max), (max,min), (max,max)`.
    pub fn corner(&self, j: usize) -> SchedulingPoint {
        match j {
            0 => SchedulingPoint::new(self.rho1_min, self.rho2_min),
            1 => SchedulingPoint::new(self.rho1_min, self.rho2_max),
            2 => SchedulingPoint::new(self.rho1_max, self.rho2_min),
            3 => SchedulingPoint::new(self.rho1_max, self.rho2_max),
            _ => panic!("corner index {j} out of range"),
        }
    }
}

/// The affine system matrices at a frozen scheduling value.
#[derive(Debug, Clone, PartialEq)]
pub struct LpvMatrices {
    pub a: Matrix2<f64>,
    pub b: Vector2<f64>,
    pub b_w: Matrix2<f64>,
}

/// The four LTI vertex models of the scheduling polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeVertices {
    bounds: SchedulingBounds,
    vertices: [(Matrix2<f64>, Vector2<f64>); 4],
    b_w: Matrix2<f64>,
}

impl PolytopeVertices {
    /// Vertex models at the four corners of `bounds`, in the frozen order
    /// `(rho1_min, rho2_min), (rho1_min, rho2_max), (rho1_max, rho2_min), (rho1_max, rho2_max)`.
    pub fn new(p: &PlantParams, ts: f64, bounds: SchedulingBounds) -> Result<Self> {
        let mut vertices = [(Matrix2::zeros(), Vector2::zeros()); 4];
        let mut b_w = Matrix2::zeros();
        for j in 0..4 {
            let m = eval_matrices_in(&bounds.corner(j), p, ts, &bounds)?;
            vertices[j] = (m.a, m.b);
            b_w = m.b_w;
        }
        Ok(PolytopeVertices {
            bounds,
            vertices,
            b_w,
        })
    }

    /// Vertices over the full scheduling set P.
    pub fn full(p: &PlantParams, ts: f64) -> Result<Self> {
        Self::new(p, ts, SchedulingBounds::full(p))
    }

    pub fn bounds(&self) -> &SchedulingBounds {
        &self.bounds
    }

    pub fn vertex(&self, j: usize) -> &(Matrix2<f64>, Vector2<f64>) {
        &self.vertices[j]
    }

    pub fn b_w(&self) -> &Matrix2<f64> {
        &self.b_w
    }

    /// Element-wise average of the four vertex models.
    pub fn mean_model(&self) -> (Matrix2<f64>, Vector2<f64>) {
        let mut a = Matrix2::zeros();
        let mut b = Vector2::zeros();
        for (aj, bj) in &self.vertices {
            a += aj;
            b += bj;
        }
        (a / 4.0, b / 4.0)
    }
}

/// Convex membership weights over the four vertices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MembershipWeights {
    pub mu: [f64; 4],
}

impl MembershipWeights {
    pub fn uniform() -> Self {
        MembershipWeights { mu: [0.25; 4] }
    }

    pub fn unit(j: usize) -> Self {
        let mut mu = [0.0; 4];
        mu[j] = 1.0;
        MembershipWeights { mu }
    }

    /// Check the simplex conditions `mu_j in [0,1]`, `sum mu_j = 1` within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let sum: f64 = self.mu.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Weights(format!("weights sum to {sum}, expected 1")));
        }
        for (j, m) in self.mu.iter().enumerate() {
            if !(-tol..=1.0 + tol).contains(m) {
                return Err(Error::Weights(format!("mu[{j}] = {m} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Endogenous scheduling map `rho = f(x)`.
///
/// Values within 1e-9 of a bound of P are clamped onto it (numerical dust from
/// the truth simulator); anything further out is a scheduling-domain error.
pub fn scheduling_map(x: &PlantState, p: &PlantParams) -> Result<SchedulingPoint> {
    if !x.is_finite() {
        return Err(Error::Domain("non-finite state in scheduling map".into()));
    }
    let den = 1.0 - (-1.0f64).exp();
    let rho1 = p.d_i * PI * p.hbar_i * (1.0 - (-x.t_p / p.tp_max).exp()) / den;
    let rho2 = (1.0 - (-x.t_f / p.tf_max).exp()) / (den * p.a_i);
    SchedulingBounds::full(p).admit(SchedulingPoint::new(rho1, rho2))
}

/// Evaluate the affine model matrices at a scheduling point inside P.
pub fn eval_matrices(rho: &SchedulingPoint, p: &PlantParams, ts: f64) -> Result<LpvMatrices> {
    eval_matrices_in(rho, p, ts, &SchedulingBounds::full(p))
}

fn eval_matrices_in(
    rho: &SchedulingPoint,
    p: &PlantParams,
    ts: f64,
    bounds: &SchedulingBounds,
) -> Result<LpvMatrices> {
    let rho = bounds.admit(*rho)?;
    let c_plate = p.plate_capacitance();
    let c_fluid = p.fluid_capacitance();
    let loss = p.d_e * PI * p.h0 / c_plate;
    let a = Matrix2::new(
        1.0 + ts * (-loss - rho.rho1 / c_plate),
        ts * (rho.rho1 / c_plate),
        ts * (rho.rho1 / c_fluid),
        1.0 + ts * (-rho.rho1 / c_fluid),
    );
    let b = Vector2::new(0.0, ts * (-rho.rho2));
    let b_w = Matrix2::new(ts * p.d_e * PI * p.nu / c_plate, ts * loss, 0.0, 0.0);
    Ok(LpvMatrices { a, b, b_w })
}

/// Bilinear membership weights of `rho` relative to the corners of `bounds`.
pub fn membership_from_rho(
    rho: &SchedulingPoint,
    bounds: &SchedulingBounds,
) -> Result<MembershipWeights> {
    let rho = bounds.admit(*rho)?;
    let d1 = bounds.rho1_max - bounds.rho1_min;
    let d2 = bounds.rho2_max - bounds.rho2_min;
    if d1 <= 0.0 || d2 <= 0.0 {
        return Err(Error::Scheduling(
            "degenerate scheduling box has no membership coordinates".into(),
        ));
    }
    let a_hi = (bounds.rho1_max - rho.rho1) / d1;
    let a_lo = (rho.rho1 - bounds.rho1_min) / d1;
    let b_hi = (bounds.rho2_max - rho.rho2) / d2;
    let b_lo = (rho.rho2 - bounds.rho2_min) / d2;
    Ok(MembershipWeights {
        mu: [a_hi * b_hi, a_hi * b_lo, a_lo * b_hi, a_lo * b_lo],
    })
}

/// Neumaier-compensated sum; keeps the 4-term vertex blends accurate to an ulp.
fn compensated_sum(terms: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            comp += (sum - s) + t;
        } else {
            comp += (t - s) + sum;
        }
        sum = s;
    }
    sum + comp
}

/// Convex blend of vertex models: `(sum mu_j A_j, sum mu_j B_j, B_w)`.
pub fn blend_vertices(
    mu: &MembershipWeights,
    verts: &PolytopeVertices,
) -> Result<LpvMatrices> {
    mu.validate(1e-9)?;
    let mut a = Matrix2::zeros();
    let mut b = Vector2::zeros();
    for r in 0..2 {
        for c in 0..2 {
            let terms: Vec<f64> = (0..4).map(|j| mu.mu[j] * verts.vertices[j].0[(r, c)]).collect();
            a[(r, c)] = compensated_sum(&terms);
        }
        let terms: Vec<f64> = (0..4).map(|j| mu.mu[j] * verts.vertices[j].1[r]).collect();
        b[r] = compensated_sum(&terms);
    }
    Ok(LpvMatrices {
        a,
        b,
        b_w: verts.b_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{euler_discrete_model, Exogenous};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn params() -> PlantParams {
        PlantParams::default()
    }

    #[test]
    fn scheduling_map_at_origin_is_zero() {
        let rho = scheduling_map(&PlantState::new(0.0, 0.0), &params()).unwrap();
        assert_eq!(rho.rho1, 0.0);
        assert_eq!(rho.rho2, 0.0);
    }

    #[test]
    fn scheduling_map_at_ceilings_hits_bounds() {
        let p = params();
        let rho = scheduling_map(&PlantState::new(600.0, 300.0), &p).unwrap();
        // d_i*pi*hbar_i = 100.531..., 1/A_i = 769.23...
        assert!((rho.rho1 - 100.5309649148733836308046).abs() < 1e-12 * 100.0);
        assert!((rho.rho2 - 769.2307692307692307692308).abs() < 1e-12 * 769.0);
    }

    #[test]
    fn scheduling_map_matches_transcription_oracle() {
        let rho = scheduling_map(&PlantState::new(300.0, 150.0), &params()).unwrap();
        assert!(((rho.rho1 - 62.57643718598919248015733) / 62.576).abs() < 1e-13);
        assert!(((rho.rho2 - 478.8148701552727420299235) / 478.81).abs() < 1e-13);
    }

    #[test]
    fn scheduling_map_rejects_far_out_of_p() {
        // Temperatures above the ceilings map outside P by more than dust.
        let r = scheduling_map(&PlantState::new(700.0, 100.0), &params());
        assert!(matches!(r, Err(Error::Scheduling(_))));
    }

    #[test]
    fn eval_matrices_at_zero_rho() {
        let m = eval_matrices(&SchedulingPoint::new(0.0, 0.0), &params(), 3.0).unwrap();
        assert!((m.a[(0, 0)] - 0.9960542197532664080138926).abs() < 1e-15);
        assert_eq!(m.a[(0, 1)], 0.0);
        assert_eq!(m.a[(1, 0)], 0.0);
        assert_eq!(m.a[(1, 1)], 1.0);
        assert_eq!(m.b[0], 0.0);
        assert_eq!(m.b[1], 0.0);
        assert!((m.b_w[(0, 0)] - 0.001311075163801025337202045).abs() < 1e-18);
        assert!((m.b_w[(0, 1)] - 0.003945780246733591986107387).abs() < 1e-18);
    }

    #[test]
    fn disturbance_matrix_is_rho_independent() {
        let p = params();
        let m0 = eval_matrices(&SchedulingPoint::new(0.0, 0.0), &p, 3.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let bounds = SchedulingBounds::full(&p);
        for _ in 0..50 {
            let rho = SchedulingPoint::new(
                rng.gen_range(bounds.rho1_min..=bounds.rho1_max),
                rng.gen_range(bounds.rho2_min..=bounds.rho2_max),
            );
            let m = eval_matrices(&rho, &p, 3.0).unwrap();
            assert_eq!(m.b_w, m0.b_w);
        }
    }

    #[test]
    fn eval_matrices_is_affine_in_rho() {
        let p = params();
        let bounds = SchedulingBounds::full(&p);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let ra = SchedulingPoint::new(
                rng.gen_range(bounds.rho1_min..=bounds.rho1_max),
                rng.gen_range(bounds.rho2_min..=bounds.rho2_max),
            );
            let rb = SchedulingPoint::new(
                rng.gen_range(bounds.rho1_min..=bounds.rho1_max),
                rng.gen_range(bounds.rho2_min..=bounds.rho2_max),
            );
            let mid = SchedulingPoint::new(0.5 * (ra.rho1 + rb.rho1), 0.5 * (ra.rho2 + rb.rho2));
            let ma = eval_matrices(&ra, &p, 3.0).unwrap();
            let mb = eval_matrices(&rb, &p, 3.0).unwrap();
            let mm = eval_matrices(&mid, &p, 3.0).unwrap();
            for r in 0..2 {
                for c in 0..2 {
                    let blend = 0.5 * ma.a[(r, c)] + 0.5 * mb.a[(r, c)];
                    assert!((blend - mm.a[(r, c)]).abs() < 1e-13);
                }
                let blend = 0.5 * ma.b[r] + 0.5 * mb.b[r];
                assert!((blend - mm.b[r]).abs() < 1e-13 * blend.abs().max(1.0));
            }
        }
    }

    #[test]
    fn membership_at_corner_and_centroid() {
        let p = params();
        let bounds = SchedulingBounds::full(&p);
        let mu = membership_from_rho(&bounds.corner(0), &bounds).unwrap();
        assert_eq!(mu.mu, [1.0, 0.0, 0.0, 0.0]);
        let mu = membership_from_rho(&bounds.centroid(), &bounds).unwrap();
        for m in mu.mu {
            assert!((m - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn vertices_match_eval_matrices_bit_for_bit() {
        let p = params();
        let verts = PolytopeVertices::full(&p, 3.0).unwrap();
        for j in 0..4 {
            let m = eval_matrices(&verts.bounds().corner(j), &p, 3.0).unwrap();
            assert_eq!(verts.vertex(j).0, m.a);
            assert_eq!(verts.vertex(j).1, m.b);
        }
    }

    #[test]
    fn blend_unit_weight_recovers_vertex_exactly() {
        let p = params();
        let verts = PolytopeVertices::full(&p, 3.0).unwrap();
        for j in 0..4 {
            let m = blend_vertices(&MembershipWeights::unit(j), &verts).unwrap();
            assert_eq!(m.a, verts.vertex(j).0);
            assert_eq!(m.b, verts.vertex(j).1);
        }
    }

    #[test]
    fn blend_uniform_is_vertex_mean() {
        let p = params();
        let verts = PolytopeVertices::full(&p, 3.0).unwrap();
        let m = blend_vertices(&MembershipWeights::uniform(), &verts).unwrap();
        let (a_mean, b_mean) = verts.mean_model();
        assert!((m.a - a_mean).amax() < 1e-13);
        assert!((m.b - b_mean).amax() < 1e-13);
    }

    #[test]
    fn blend_rejects_off_simplex_weights() {
        let p = params();
        let verts = PolytopeVertices::full(&p, 3.0).unwrap();
        let bad = MembershipWeights {
            mu: [0.5, 0.5, 0.1, 0.0],
        };
        assert!(matches!(
            blend_vertices(&bad, &verts),
            Err(Error::Weights(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn membership_is_simplex_and_reconstructs(t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let p = params();
            let bounds = SchedulingBounds::full(&p);
            let rho = SchedulingPoint::new(
                bounds.rho1_min + t1 * (bounds.rho1_max - bounds.rho1_min),
                bounds.rho2_min + t2 * (bounds.rho2_max - bounds.rho2_min),
            );
            let mu = membership_from_rho(&rho, &bounds).unwrap();
            let sum: f64 = mu.mu.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-14);
            for m in mu.mu {
                prop_assert!((-1e-15..=1.0 + 1e-15).contains(&m));
            }
            let verts = PolytopeVertices::full(&p, 3.0).unwrap();
            let blended = blend_vertices(&mu, &verts).unwrap();
            let direct = eval_matrices(&rho, &p, 3.0).unwrap();
            prop_assert!((blended.a - direct.a).amax() <= 1e-12);
            prop_assert!((blended.b - direct.b).amax() <= 1e-12);
        }
    }

    #[test]
    fn euler_model_equals_lpv_model_on_random_points() {
        // The linear-inclusion property: the Euler-discretized nonlinear model
        // coincides with the LPV model scheduled at f(x), for admissible points.
        let p = params();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        for _ in 0..1000 {
            let x = PlantState::new(rng.gen_range(0.0..600.0), rng.gen_range(0.0..300.0));
            let e = Exogenous::new(
                rng.gen_range(0.0..1200.0),
                rng.gen_range(0.0..45.0),
                rng.gen_range(0.0..0.35),
            );
            let truth = euler_discrete_model(&x, &e, &p, 3.0).unwrap();
            let rho = scheduling_map(&x, &p).unwrap();
            let m = eval_matrices(&rho, &p, 3.0).unwrap();
            let xv = Vector2::new(x.t_p, x.t_f);
            let wv = Vector2::new(e.irradiance, e.t_ext);
            let pred = m.a * xv + m.b * e.flow + m.b_w * wv;
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
            assert!(rel(truth.t_p, pred[0]) < 1e-10);
            assert!(rel(truth.t_f, pred[1]) < 1e-10);
        }
    }
}
