//! Nonlinear solar-collector truth model.
//!
//! Energy-balance dynamics of a flat solar-thermal collector: a metal plate heated
//! by irradiance exchanges heat with the working fluid, whose spatial temperature
//! gradient is approximated by a saturating nonlinearity. The plate-to-fluid heat
//! transfer coefficient grows with plate temperature and saturates at `hbar_i`.
//!
//! This module is the simulation ground truth. Controllers never see it directly;
//! they work with the LPV embedding in [`crate::lpv`]. The two are kept as separate
//! transcriptions on purpose so that their pointwise equivalence is a meaningful
//! cross-check rather than a tautology.

use crate::{Error, Result};
use std::f64::consts::PI;

/// Physical parameters of the collector.
///
/// Defaults are the identified CIESOL values; temperature ceilings are the hard
/// process limits for plate and fluid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantParams {
    /// Plate density (kg/m^3).
    pub xi_m: f64,
    /// Plate heat capacity (J/(kg °C)).
    pub c_m: f64,
    /// Fluid density (kg/m^3).
    pub xi_f: f64,
    /// Fluid heat capacity (J/(kg °C)).
    pub c_f: f64,
    /// External pipe surface (m^2).
    pub a_e: f64,
    /// Internal pipe surface (m^2).
    pub a_i: f64,
    /// Inner pipe diameter (m).
    pub d_i: f64,
    /// Outer pipe diameter (m).
    pub d_e: f64,
    /// Absorber heat-transfer coefficient.
    pub h0: f64,
    /// Maximal fluid heat-transfer coefficient.
    pub hbar_i: f64,
    /// Thermal loss coefficient.
    pub nu: f64,
    /// Plate temperature ceiling (°C).
    pub tp_max: f64,
    /// Fluid temperature ceiling (°C).
    pub tf_max: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            xi_m: 1100.0,
            c_m: 440.0,
            xi_f: 1000.0,
            c_f: 4018.0,
            a_e: 0.0038,
            a_i: 0.0013,
            d_i: 0.04,
            d_e: 0.07,
            h0: 11.0,
            hbar_i: 800.0,
            nu: 3.655,
            tp_max: 600.0,
            tf_max: 300.0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("xi_m", self.xi_m),
            ("c_m", self.c_m),
            ("xi_f", self.xi_f),
            ("c_f", self.c_f),
            ("a_e", self.a_e),
            ("a_i", self.a_i),
            ("d_i", self.d_i),
            ("d_e", self.d_e),
            ("h0", self.h0),
            ("hbar_i", self.hbar_i),
            ("nu", self.nu),
            ("tp_max", self.tp_max),
            ("tf_max", self.tf_max),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Domain(format!(
                    "plant parameter {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Thermal capacitance of the plate side, `xi_m * c_m * a_e`.
    pub fn plate_capacitance(&self) -> f64 {
        self.xi_m * self.c_m * self.a_e
    }

    /// Thermal capacitance of the fluid side, `xi_f * c_f * a_i`.
    pub fn fluid_capacitance(&self) -> f64 {
        self.xi_f * self.c_f * self.a_i
    }
}

/// Physical state: plate and fluid temperature in °C.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub t_p: f64,
    pub t_f: f64,
}

impl PlantState {
    pub fn new(t_p: f64, t_f: f64) -> Self {
        PlantState { t_p, t_f }
    }

    pub fn is_finite(&self) -> bool {
        self.t_p.is_finite() && self.t_f.is_finite()
    }

    /// True when the state lies outside `[0, tp_max] x [0, tf_max]`.
    ///
    /// The simulator only flags excursions; it never clamps. Constraint
    /// satisfaction is the controllers' job.
    pub fn violates_bounds(&self, p: &PlantParams) -> bool {
        self.t_p < 0.0 || self.t_p > p.tp_max || self.t_f < 0.0 || self.t_f > p.tf_max
    }
}

/// Exogenous signals: irradiance and ambient temperature are load disturbances,
/// the inlet flow is the control input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exogenous {
    /// Solar irradiance (W/m^2).
    pub irradiance: f64,
    /// External temperature (°C).
    pub t_ext: f64,
    /// Inlet fluid flow (m^3/s).
    pub flow: f64,
}

impl Exogenous {
    pub fn new(irradiance: f64, t_ext: f64, flow: f64) -> Self {
        Exogenous {
            irradiance,
            t_ext,
            flow,
        }
    }

    fn is_finite(&self) -> bool {
        self.irradiance.is_finite() && self.t_ext.is_finite() && self.flow.is_finite()
    }
}

/// Saturating plate-to-fluid heat transfer coefficient.
fn heat_transfer_coeff(t_p: f64, p: &PlantParams) -> f64 {
    p.hbar_i * (1.0 - (-t_p / p.tp_max).exp()) / (1.0 - (-1.0f64).exp())
}

/// Saturating approximation of the spatial fluid-temperature gradient.
fn spatial_gradient(t_f: f64, p: &PlantParams) -> f64 {
    (1.0 - (-t_f / p.tf_max).exp()) / (1.0 - (-1.0f64).exp())
}

/// Right-hand side of the energy balance, in °C/s for each state.
///
/// The plate equation balances absorbed irradiance against losses to ambient and
/// heat given to the fluid; the fluid equation balances advection (flow times the
/// saturated spatial gradient) against heat received from the plate. Each side is
/// divided by its thermal capacitance.
pub fn state_derivative(s: &PlantState, e: &Exogenous, p: &PlantParams) -> Result<(f64, f64)> {
    if !s.is_finite() || !e.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite inputs to state_derivative: state=({}, {}), exo=({}, {}, {})",
            s.t_p, s.t_f, e.irradiance, e.t_ext, e.flow
        )));
    }
    if e.flow < 0.0 {
        return Err(Error::Domain(format!(
            "inlet flow must be non-negative, got {}",
            e.flow
        )));
    }
    let h_i = heat_transfer_coeff(s.t_p, p);
    let plate_to_fluid = p.d_i * PI * h_i * (s.t_p - s.t_f);
    let d_tp = (p.d_e * PI * p.nu * e.irradiance - p.d_e * PI * p.h0 * (s.t_p - e.t_ext)
        - plate_to_fluid)
        / p.plate_capacitance();
    let d_tf = (-e.flow * p.xi_f * p.c_f * spatial_gradient(s.t_f, p) + plate_to_fluid)
        / p.fluid_capacitance();
    Ok((d_tp, d_tf))
}

/// Advance the state by `ts` seconds with fixed-step RK4 (`substeps` internal steps).
///
/// Exogenous inputs are held constant over the step (zero-order hold).
pub fn integrate_step(
    s: &PlantState,
    e: &Exogenous,
    p: &PlantParams,
    ts: f64,
    substeps: usize,
) -> Result<PlantState> {
    if !(ts > 0.0) {
        return Err(Error::Domain(format!("sampling period must be > 0, got {ts}")));
    }
    if substeps == 0 {
        return Err(Error::Domain("substeps must be >= 1".into()));
    }
    // Validate the caller's inputs up front so bad arguments stay domain errors;
    // anything non-finite past this point is an integration blow-up.
    state_derivative(s, e, p)?;
    let h = ts / substeps as f64;
    let blowup = |step: usize| {
        Error::Integration(format!(
            "non-finite state at substep {} of {} (h = {h} s)",
            step + 1,
            substeps
        ))
    };
    let stage = |x: &PlantState, step: usize| -> Result<(f64, f64)> {
        if !x.is_finite() {
            return Err(blowup(step));
        }
        let k = state_derivative(x, e, p).map_err(|_| blowup(step))?;
        if !k.0.is_finite() || !k.1.is_finite() {
            return Err(blowup(step));
        }
        Ok(k)
    };
    let mut x = *s;
    for step in 0..substeps {
        let k1 = stage(&x, step)?;
        let x2 = PlantState::new(x.t_p + 0.5 * h * k1.0, x.t_f + 0.5 * h * k1.1);
        let k2 = stage(&x2, step)?;
        let x3 = PlantState::new(x.t_p + 0.5 * h * k2.0, x.t_f + 0.5 * h * k2.1);
        let k3 = stage(&x3, step)?;
        let x4 = PlantState::new(x.t_p + h * k3.0, x.t_f + h * k3.1);
        let k4 = stage(&x4, step)?;
        x = PlantState::new(
            x.t_p + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
            x.t_f + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
        );
        if !x.is_finite() {
            return Err(blowup(step));
        }
    }
    Ok(x)
}

/// Single forward-Euler step of the nonlinear model.
///
/// This is the discrete-time prediction-model truth the LPV embedding must
/// reproduce exactly; it is not the simulator truth (that is [`integrate_step`]).
pub fn euler_discrete_model(
    s: &PlantState,
    e: &Exogenous,
    p: &PlantParams,
    ts: f64,
) -> Result<PlantState> {
    if !(ts > 0.0) {
        return Err(Error::Domain(format!("sampling period must be > 0, got {ts}")));
    }
    let (d_tp, d_tf) = state_derivative(s, e, p)?;
    let next = PlantState::new(s.t_p + ts * d_tp, s.t_f + ts * d_tf);
    if !next.is_finite() {
        return Err(Error::Integration(
            "non-finite state after Euler step".into(),
        ));
    }
    Ok(next)
}
