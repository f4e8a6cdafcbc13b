//! Three-level state preparation: eigenvalue-pair dynamics under switched
//! level couplings, the closed-form candidate cost, and its end-to-end
//! optimality verification.
//!
//! The system is a qutrit whose density matrix is continuously measured in
//! its own eigenbasis. In the near-pure band (target infidelity
//! Δ = λ₁ + λ₂ ≪ 1, with λ₀ ≥ λ₁ ≥ λ₂ the eigenvalues) the conditioned
//! eigenvalues close on themselves: measuring an observable X with matrix
//! elements taken in the current eigenbasis drives
//!
//! ```text
//! dλ₁ = −8[|X₁₀|²λ₁ − |X₂₁|² λ₁λ₂/(λ₁−λ₂)] dt + √8 (X₀₀−X₁₁) λ₁ dW,
//! dλ₂ = −8[|X₂₀|²λ₂ + |X₂₁|² λ₁λ₂/(λ₁−λ₂)] dt + √8 (X₀₀−X₂₂) λ₂ dW,
//! ```
//!
//! with one shared Wiener increment. The controls are the observables of a
//! fixed spectrum {a, 0, −a}; the two distinguished members couple the
//! target level to one of the error levels each ([`level_one_coupling`],
//! [`level_two_coupling`]), and alternating them infinitely fast yields the
//! deterministic balanced decay λ̇ᵢ = −4a²λᵢ ([`fast_switch_drift`]).
//!
//! The candidate optimal cost is a two-piece field on (λ₁, λ₂): while
//! λ₁e^{−8a²(T−t)} ≥ λ₂ the best strategy drives the strongest coupling and
//! pays C⁺ = λ₁e^{−8a²(T−t)} + λ₂; afterwards balanced switching pays
//! C⁻ = 2√(λ₁λ₂)e^{−4a²(T−t)}. The two pieces meet C¹-continuously on the
//! seam, where both equal 2λ₂. [`verify_qutrit`] assembles the field, the
//! orbit dynamics, and the switching protocol's nominal trajectory, then
//! runs both the classical verifier (valid on the smooth single-coupling
//! region, and expected to report the seam as inconclusive when the horizon
//! reaches it) and the viscosity-based verifier over the full horizon.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::control::{ControlRegion, ControlVector};
use crate::cost::CostField;
use crate::error::{Error, Result};
use crate::grid::StateGrid;
use crate::hjb::{
    verify_classic, Dynamics, VerificationReport, Verdict, VerifyClassicOptions,
};
use crate::optim::NelderMeadOptions;
use crate::qstate::{
    eig_sorted_hermitian, observable_from, params_for_unitary, CMatrix, Observable,
    UnitaryParams,
};
use crate::sde::NoiseStream;
use crate::viscosity::{
    verify_enhanced, EnhancedReport, FieldPiece, PiecewiseField, ViscosityOptions,
};

/// Below this eigenvalue separation the cross-coupling term λ₁λ₂/(λ₁−λ₂) is
/// treated as degenerate and the drift falls back to its balanced-switching
/// limit.
pub const DEGENERACY_EPS: f64 = 1e-8;

/// Largest total infidelity Δ = λ₁ + λ₂ for which the closed eigenvalue
/// dynamics are trusted.
pub const NEAR_PURE_MAX: f64 = 0.1;

// ---------------------------------------------------------------------------
// State and model data
// ---------------------------------------------------------------------------

/// The two trailing eigenvalues of the conditioned density matrix, in
/// descending order; the leading eigenvalue is λ₀ = 1 − λ₁ − λ₂.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenState {
    lambda1: f64,
    lambda2: f64,
}

impl EigenState {
    /// Validates the ordering λ₀ ≥ λ₁ ≥ λ₂ ≥ 0 (up to 1e-12 slack on the
    /// leading comparison, which involves a subtraction).
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        if !lambda1.is_finite() || !lambda2.is_finite() {
            return Err(Error::InvalidState(format!(
                "non-finite eigenvalues ({lambda1}, {lambda2})"
            )));
        }
        if lambda2 < 0.0 {
            return Err(Error::InvalidState(format!(
                "negative eigenvalue λ₂ = {lambda2}"
            )));
        }
        if lambda1 < lambda2 {
            return Err(Error::InvalidState(format!(
                "eigenvalues out of order: λ₁ = {lambda1} < λ₂ = {lambda2}"
            )));
        }
        if 1.0 - lambda1 - lambda2 + 1e-12 < lambda1 {
            return Err(Error::InvalidState(format!(
                "leading eigenvalue 1 − λ₁ − λ₂ = {} would not be the largest",
                1.0 - lambda1 - lambda2
            )));
        }
        Ok(Self { lambda1, lambda2 })
    }

    pub fn lambda0(&self) -> f64 {
        1.0 - self.lambda1 - self.lambda2
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    /// Total infidelity Δ = λ₁ + λ₂ with respect to the target level.
    pub fn infidelity(&self) -> f64 {
        self.lambda1 + self.lambda2
    }

    /// Whether the state sits in the band Δ ≤ [`NEAR_PURE_MAX`] where the
    /// closed eigenvalue dynamics are a controlled approximation.
    pub fn is_near_pure(&self) -> bool {
        self.infidelity() <= NEAR_PURE_MAX
    }
}

/// Fixed problem data: the observable scale `a` (spectrum {a, 0, −a}) and
/// the horizon `T`. The terminal cost is the infidelity Δ(T).
#[derive(Clone, Copy, Debug)]
pub struct QutritModel {
    pub a: f64,
    pub horizon: f64,
}

impl QutritModel {
    pub fn new(a: f64, horizon: f64) -> Result<Self> {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "observable scale must be positive, got {a}"
            )));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        Ok(Self { a, horizon })
    }

    /// The single-coupling decay factor E(t) = e^{−8a²(T−t)} accumulated
    /// between t and the horizon.
    pub fn decay(&self, t: f64) -> f64 {
        (-8.0 * self.a * self.a * (self.horizon - t)).exp()
    }

    /// η(t) = λ₁E(t)/λ₂. The single-coupling branch of the cost applies
    /// while η ≥ 1.
    pub fn eta(&self, lambda1: f64, lambda2: f64, t: f64) -> Result<f64> {
        if !(lambda2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "η needs λ₂ > 0, got {lambda2}"
            )));
        }
        Ok(lambda1 * self.decay(t) / lambda2)
    }

    /// ξ(t) = λ₁(1 − E(t))/(λ₁ − λ₂), the weight of the cross coupling in
    /// the single-coupling-branch Hamilton function. Algebraically η > 1 is
    /// equivalent to ξ < 1; [`QutritModel::branch_frame`] checks the pair.
    pub fn xi(&self, lambda1: f64, lambda2: f64, t: f64) -> Result<f64> {
        if lambda1 - lambda2 <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ξ needs λ₁ > λ₂, got ({lambda1}, {lambda2})"
            )));
        }
        Ok(lambda1 * (1.0 - self.decay(t)) / (lambda1 - lambda2))
    }

    /// Evaluates (η, ξ) and confirms the frame inequality η > 1 > ξ (or its
    /// mirror η < 1 < ξ) rather than assuming it: the two conditions are
    /// equivalent in exact arithmetic, and a violation signals numbers bad
    /// enough that the branch decision cannot be trusted.
    pub fn branch_frame(&self, lambda1: f64, lambda2: f64, t: f64) -> Result<(f64, f64)> {
        let eta = self.eta(lambda1, lambda2, t)?;
        let xi = self.xi(lambda1, lambda2, t)?;
        let slack = 1e-9;
        if (eta > 1.0 + slack && xi > 1.0 + slack) || (eta < 1.0 - slack && xi < 1.0 - slack)
        {
            return Err(Error::InvalidState(format!(
                "branch frame inconsistent: η = {eta}, ξ = {xi} on the same side of 1"
            )));
        }
        Ok((eta, xi))
    }

    /// Remaining time for which the single-coupling branch stays optimal
    /// from (λ₁, λ₂); see [`switching_time`].
    pub fn switching_time(&self, lambda1: f64, lambda2: f64) -> Result<f64> {
        switching_time(lambda1, lambda2, self.a)
    }
}

// ---------------------------------------------------------------------------
// The protocol observables
// ---------------------------------------------------------------------------

fn coupling_observable(a: f64, row: usize, col: usize) -> Observable {
    let mut m = CMatrix::zeros(3, 3);
    m[(row, col)] = Complex64::new(a, 0.0);
    m[(col, row)] = Complex64::new(a, 0.0);
    Observable::new(m).expect("real symmetric coupling matrix")
}

/// The observable coupling the target level to the first error level:
/// X₁₀ = X₀₁ = a, all other entries zero. Spectrum {a, 0, −a}.
pub fn level_one_coupling(a: f64) -> Observable {
    coupling_observable(a, 1, 0)
}

/// The observable coupling the target level to the second error level:
/// X₂₀ = X₀₂ = a, all other entries zero. Spectrum {a, 0, −a}.
pub fn level_two_coupling(a: f64) -> Observable {
    coupling_observable(a, 2, 0)
}

fn coupling_params(a: f64, x: &Observable) -> Result<UnitaryParams> {
    let eig = eig_sorted_hermitian(x.matrix());
    params_for_unitary(&eig.vectors, vec![a, 0.0, -a])
}

/// Angle-space parameters reproducing [`level_one_coupling`] through the
/// unitary-orbit map, for use as a policy over the orbit control region.
pub fn level_one_params(a: f64) -> Result<UnitaryParams> {
    coupling_params(a, &level_one_coupling(a))
}

/// Angle-space parameters reproducing [`level_two_coupling`].
pub fn level_two_params(a: f64) -> Result<UnitaryParams> {
    coupling_params(a, &level_two_coupling(a))
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// Closed eigenvalue-pair dynamics under continuous measurement of `x`,
/// whose matrix elements are taken in the instantaneous eigenbasis.
///
/// Returns (drift, diffusion); the diffusion pair multiplies one shared
/// Wiener increment. Within [`DEGENERACY_EPS`] of λ₁ = λ₂ the cross term
/// λ₁λ₂/(λ₁−λ₂) is singular and the drift is replaced by its
/// balanced-switching limit −4s²(λ₁, λ₂), with the scale s read off the
/// spectral radius of `x`.
pub fn eigen_dynamics(state: &EigenState, x: &Observable) -> Result<([f64; 2], [f64; 2])> {
    let m = x.matrix();
    if m.nrows() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "eigenvalue dynamics need a 3×3 observable, got {}×{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !state.is_near_pure() {
        return Err(Error::InvalidState(format!(
            "total infidelity {} exceeds the near-pure band {NEAR_PURE_MAX}",
            state.infidelity()
        )));
    }
    let (l1, l2) = (state.lambda1, state.lambda2);
    let x10 = m[(1, 0)].norm_sqr();
    let x20 = m[(2, 0)].norm_sqr();
    let x21 = m[(2, 1)].norm_sqr();
    let d01 = m[(0, 0)].re - m[(1, 1)].re;
    let d02 = m[(0, 0)].re - m[(2, 2)].re;
    let sqrt8 = 8.0_f64.sqrt();
    let diffusion = [sqrt8 * d01 * l1, sqrt8 * d02 * l2];
    let drift = if l1 - l2 < DEGENERACY_EPS {
        let radius = eig_sorted_hermitian(m)
            .values
            .iter()
            .fold(0.0_f64, |r, &v| r.max(v.abs()));
        [-4.0 * radius * radius * l1, -4.0 * radius * radius * l2]
    } else {
        let s12 = l1 * l2 / (l1 - l2);
        [
            -8.0 * (x10 * l1 - x21 * s12),
            -8.0 * (x20 * l2 + x21 * s12),
        ]
    };
    Ok((drift, diffusion))
}

/// Drift of the balanced rapid-alternation limit between the two level
/// couplings: λ̇ᵢ = −4a²λᵢ. Noise-free (both couplings have zero diagonal).
pub fn fast_switch_drift(state: &EigenState, a: f64) -> [f64; 2] {
    [
        -4.0 * a * a * state.lambda1,
        -4.0 * a * a * state.lambda2,
    ]
}

/// Eigenvalue-pair dynamics with the control ranging over the whole
/// observable orbit of spectrum {a, 0, −a}; state coordinates are (λ₁, λ₂).
pub struct CouplingOrbitDynamics {
    pub a: f64,
}

impl CouplingOrbitDynamics {
    fn observable(&self, v: &ControlVector) -> Result<Observable> {
        let params = v.obs_params.as_ref().ok_or_else(|| {
            Error::InvalidArgument(
                "orbit dynamics need observable parameters in the control".into(),
            )
        })?;
        observable_from(params)
    }
}

impl Dynamics for CouplingOrbitDynamics {
    fn dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], v: &ControlVector, _t: f64) -> Result<Vec<f64>> {
        let state = EigenState::new(x[0], x[1])?;
        let obs = self.observable(v)?;
        let (drift, _) = eigen_dynamics(&state, &obs)?;
        Ok(drift.to_vec())
    }

    fn diffusion(&self, x: &[f64], v: &ControlVector, _t: f64) -> Result<DMatrix<f64>> {
        let state = EigenState::new(x[0], x[1])?;
        let obs = self.observable(v)?;
        let (_, s) = eigen_dynamics(&state, &obs)?;
        Ok(DMatrix::from_column_slice(2, 1, &s))
    }
}

/// The control region matching [`CouplingOrbitDynamics`]: all observables
/// with spectrum {a, 0, −a}, parametrized by the orbit angles.
pub fn coupling_orbit_region(a: f64) -> ControlRegion {
    ControlRegion::observable_orbit(&[a, 0.0, -a])
}

/// The three-action restriction used by the dynamic-programming scenario.
/// Action codes (a single coefficient): 0 drives the balanced alternation
/// limit, 1 the level-one coupling, 2 the level-two coupling. All three are
/// noise-free in the eigenvalue pair — the two couplings have zero diagonal,
/// so their measurement back-action does not move the eigenvalues.
pub struct SwitchedCouplingDynamics {
    pub a: f64,
}

impl Dynamics for SwitchedCouplingDynamics {
    fn dim(&self) -> usize {
        2
    }

    fn noise_dim(&self) -> usize {
        0
    }

    fn drift(&self, x: &[f64], v: &ControlVector, _t: f64) -> Result<Vec<f64>> {
        let code = *v.mu.first().ok_or_else(|| {
            Error::InvalidArgument("switched dynamics need one action coefficient".into())
        })?;
        let state = EigenState::new(x[0], x[1])?;
        let a2 = self.a * self.a;
        let drift = match code.round() as i64 {
            0 => fast_switch_drift(&state, self.a),
            1 => [-8.0 * a2 * state.lambda1, 0.0],
            2 => [0.0, -8.0 * a2 * state.lambda2],
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown action code {code}; expected 0 (balanced), 1, or 2"
                )))
            }
        };
        Ok(drift.to_vec())
    }

    fn diffusion(&self, _x: &[f64], _v: &ControlVector, _t: f64) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(2, 0))
    }
}

/// The discrete action set for [`SwitchedCouplingDynamics`], in the order
/// (balanced, level-one, level-two) so that tie resolution toward the
/// smallest index prefers the balanced action where all three tie.
pub fn switched_coupling_actions() -> (Vec<ControlVector>, ControlRegion) {
    let actions: Vec<ControlVector> = (0..3)
        .map(|code| ControlVector::coefficients(vec![code as f64]))
        .collect();
    let region = ControlRegion::discrete_set(actions.clone())
        .expect("three fixed actions with identical layout");
    (actions, region)
}

// ---------------------------------------------------------------------------
// Closed-form costs
// ---------------------------------------------------------------------------

/// Expected infidelity-to-go when the strongest coupling is driven all the
/// way to the horizon: C⁺ = λ₁e^{−8a²(T−t)} + λ₂.
///
/// Valid (and checked) on the single-coupling branch λ₁E(t) ≥ λ₂; outside
/// it the piecewise field should be used instead.
pub fn cost_plus(model: &QutritModel, lambda1: f64, lambda2: f64, t: f64) -> Result<f64> {
    EigenState::new(lambda1, lambda2)?;
    check_time(model, t)?;
    let e = model.decay(t);
    if lambda1 * e < lambda2 * (1.0 - 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "({lambda1}, {lambda2}, {t}) lies past the switching seam; \
             the single-coupling cost does not apply there"
        )));
    }
    Ok(lambda1 * e + lambda2)
}

/// Expected infidelity-to-go under balanced switching:
/// C⁻ = 2√(λ₁λ₂)e^{−4a²(T−t)}.
///
/// Valid (and checked) on and past the seam, λ₁E(t) ≤ λ₂.
pub fn cost_minus(model: &QutritModel, lambda1: f64, lambda2: f64, t: f64) -> Result<f64> {
    EigenState::new(lambda1, lambda2)?;
    check_time(model, t)?;
    let e = model.decay(t);
    if lambda1 * e > lambda2 * (1.0 + 1e-9) {
        return Err(Error::InvalidArgument(format!(
            "({lambda1}, {lambda2}, {t}) lies before the switching seam; \
             the balanced cost does not apply there"
        )));
    }
    Ok(2.0 * (lambda1 * lambda2).sqrt() * (-4.0 * model.a * model.a * (model.horizon - t)).exp())
}

fn check_time(model: &QutritModel, t: f64) -> Result<()> {
    if !t.is_finite() || t < -1e-12 || t > model.horizon + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "time {t} outside [0, {}]",
            model.horizon
        )));
    }
    Ok(())
}

/// Time τ = ln(λ₁/λ₂)/(8a²) for the level-one coupling to pull λ₁ down to
/// λ₂; equivalently, the horizon margin T − t at which the cost switches
/// branch.
pub fn switching_time(lambda1: f64, lambda2: f64, a: f64) -> Result<f64> {
    if !(a > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "observable scale must be positive, got {a}"
        )));
    }
    if lambda2 <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "λ₂ = {lambda2}: the switching time is infinite — the \
             single-coupling branch stays optimal forever"
        )));
    }
    if lambda1 < lambda2 {
        return Err(Error::InvalidArgument(format!(
            "switching time needs λ₁ ≥ λ₂, got ({lambda1}, {lambda2})"
        )));
    }
    Ok((lambda1 / lambda2).ln() / (8.0 * a * a))
}

// ---------------------------------------------------------------------------
// Branch Hamilton functions
// ---------------------------------------------------------------------------

/// Both branch Hamilton functions for an observable `x` of spectrum
/// {a, 0, −a} (validated to 1e-8 relative):
///
/// G₁ = 8[λ₁E|X₁₀|² + λ₂|X₂₀|² + (1−E)·λ₁λ₂/(λ₁−λ₂)·|X₂₁|²], the
/// single-coupling-branch value, maximized at [`level_one_coupling`] with
/// maximum 8a²λ₁E; and
///
/// G₂ = [(X₁₁−X₂₂)² + 4(|X₁₀|² + |X₂₀|² + |X₂₁|²)]·C⁻, the balanced-branch
/// value, with orbit maximum 4a²C⁻ attained by both protocol couplings.
pub fn g_regime_objectives(
    model: &QutritModel,
    lambda1: f64,
    lambda2: f64,
    t: f64,
    x: &Observable,
) -> Result<(f64, f64)> {
    let m = x.matrix();
    if m.nrows() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "branch objectives need a 3×3 observable, got {}×{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let a = model.a;
    let values = eig_sorted_hermitian(m).values;
    let target = [a, 0.0, -a];
    let tol = 1e-8 * a.max(1.0);
    if values
        .iter()
        .zip(&target)
        .any(|(got, want)| (got - want).abs() > tol)
    {
        return Err(Error::InvalidArgument(format!(
            "observable spectrum {values:?} is not {{{a}, 0, {}}}",
            -a
        )));
    }
    if lambda1 - lambda2 <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "branch objectives need λ₁ > λ₂, got ({lambda1}, {lambda2})"
        )));
    }
    check_time(model, t)?;
    let e = model.decay(t);
    let x10 = m[(1, 0)].norm_sqr();
    let x20 = m[(2, 0)].norm_sqr();
    let x21 = m[(2, 1)].norm_sqr();
    let s12 = lambda1 * lambda2 / (lambda1 - lambda2);
    let g1 = 8.0 * (lambda1 * e * x10 + lambda2 * x20 + (1.0 - e) * s12 * x21);
    let cm = 2.0
        * (lambda1 * lambda2).sqrt()
        * (-4.0 * a * a * (model.horizon - t)).exp();
    let d12 = m[(1, 1)].re - m[(2, 2)].re;
    let g2 = (d12 * d12 + 4.0 * (x10 + x20 + x21)) * cm;
    Ok((g1, g2))
}

// ---------------------------------------------------------------------------
// The candidate cost field
// ---------------------------------------------------------------------------

fn seam_offset(model: &QutritModel) -> Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync> {
    let m = *model;
    Arc::new(move |x: &[f64], t: f64| {
        x[0].ln() - x[1].ln() - 8.0 * m.a * m.a * (m.horizon - t)
    })
}

fn plus_piece(model: &QutritModel) -> CostField {
    let m = *model;
    CostField::new(
        2,
        Arc::new(move |x: &[f64], t: f64| x[0] * m.decay(t) + x[1]),
    )
    .with_gradient(Arc::new(move |_x: &[f64], t: f64| vec![m.decay(t), 1.0]))
    .with_time_derivative(Arc::new(move |x: &[f64], t: f64| {
        8.0 * m.a * m.a * x[0] * m.decay(t)
    }))
    .with_hessian(Arc::new(move |_x: &[f64], _t: f64| DMatrix::zeros(2, 2)))
}

fn minus_piece(model: &QutritModel, coefficient: f64) -> CostField {
    let m = *model;
    let value = move |x: &[f64], t: f64| {
        coefficient
            * (x[0] * x[1]).sqrt()
            * (-4.0 * m.a * m.a * (m.horizon - t)).exp()
    };
    CostField::new(2, Arc::new(value))
        .with_gradient(Arc::new(move |x: &[f64], t: f64| {
            let v = value(x, t);
            vec![v / (2.0 * x[0]), v / (2.0 * x[1])]
        }))
        .with_time_derivative(Arc::new(move |x: &[f64], t: f64| {
            4.0 * m.a * m.a * value(x, t)
        }))
        .with_hessian(Arc::new(move |x: &[f64], t: f64| {
            let v = value(x, t);
            DMatrix::from_row_slice(
                2,
                2,
                &[
                    -v / (4.0 * x[0] * x[0]),
                    v / (4.0 * x[0] * x[1]),
                    v / (4.0 * x[0] * x[1]),
                    -v / (4.0 * x[1] * x[1]),
                ],
            )
        }))
}

/// The two-piece candidate cost on (λ₁, λ₂) ∈ (0, ·)², glued on the seam
/// λ₁E(t) = λ₂. `minus_coefficient` scales the balanced-branch prefactor;
/// the matched field uses 2, and any other value tears the seam — useful as
/// a negative control for the verifiers.
pub fn piecewise_cost_field(
    model: &QutritModel,
    minus_coefficient: f64,
) -> Result<PiecewiseField> {
    if !(minus_coefficient > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "balanced-branch coefficient must be positive, got {minus_coefficient}"
        )));
    }
    let sigma_plus = seam_offset(model);
    let sp = sigma_plus.clone();
    let sigma_minus: Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync> =
        Arc::new(move |x: &[f64], t: f64| -sp(x, t));
    PiecewiseField::new(
        2,
        vec![
            FieldPiece {
                name: "single-coupling".into(),
                region: sigma_plus,
                field: plus_piece(model),
            },
            FieldPiece {
                name: "balanced".into(),
                region: sigma_minus,
                field: minus_piece(model, minus_coefficient),
            },
        ],
    )
}

/// The same candidate cost as a single dispatching [`CostField`] for the
/// classical verifier: points on or before the seam (λ₁E ≥ λ₂) evaluate the
/// single-coupling piece, points past it the balanced piece. One-sided
/// derivatives at the seam come from the single-coupling side.
pub fn matched_cost_field(model: &QutritModel) -> CostField {
    let m = *model;
    let plus = plus_piece(model);
    let minus = minus_piece(model, 2.0);
    let on_plus = move |x: &[f64], t: f64| x[0] * m.decay(t) >= x[1];
    let (pv, mv) = (plus.clone(), minus.clone());
    let (pg, mg) = (plus.clone(), minus.clone());
    let (pt, mt) = (plus.clone(), minus.clone());
    let (ph, mh) = (plus, minus);
    CostField::new(
        2,
        Arc::new(move |x: &[f64], t: f64| {
            let f = if on_plus(x, t) { &pv } else { &mv };
            f.value(x, t).expect("closed-form piece evaluation")
        }),
    )
    .with_gradient(Arc::new(move |x: &[f64], t: f64| {
        let f = if on_plus(x, t) { &pg } else { &mg };
        crate::cost::query_cost_field(f, x, t)
            .expect("closed-form piece evaluation")
            .gradient
    }))
    .with_time_derivative(Arc::new(move |x: &[f64], t: f64| {
        let f = if on_plus(x, t) { &pt } else { &mt };
        crate::cost::query_cost_field(f, x, t)
            .expect("closed-form piece evaluation")
            .time_derivative
    }))
    .with_hessian(Arc::new(move |x: &[f64], t: f64| {
        let f = if on_plus(x, t) { &ph } else { &mh };
        crate::cost::query_cost_field(f, x, t)
            .expect("closed-form piece evaluation")
            .hessian
    }))
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Open-loop drive protocols for the eigenvalue-pair simulator.
#[derive(Clone, Debug)]
pub enum DriveProtocol {
    /// Hold the level-one coupling.
    LevelOne,
    /// Hold the level-two coupling.
    LevelTwo,
    /// The idealized balanced rapid-alternation limit.
    FastSwitch,
    /// Level-one coupling until the given time, balanced limit afterwards.
    SwitchAtTime(f64),
    /// Literal alternation between the two couplings with the given
    /// half-period; converges to [`DriveProtocol::FastSwitch`] as the
    /// half-period shrinks.
    Alternate { half_period: f64 },
    /// Hold a fixed observable of the eigenbasis; the only protocol whose
    /// eigenvalue pair feels measurement noise (it does so whenever the
    /// observable has unequal diagonal entries).
    Hold(Observable),
}

/// A simulated eigenvalue-pair trajectory on [0, T].
#[derive(Clone, Debug)]
pub struct EigenPath {
    pub times: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl EigenPath {
    pub fn final_state(&self) -> Result<EigenState> {
        EigenState::new(
            *self.lambda1.last().expect("nonempty path"),
            *self.lambda2.last().expect("nonempty path"),
        )
    }

    /// Terminal infidelity Δ(T) = λ₁(T) + λ₂(T): the path's cost.
    pub fn final_infidelity(&self) -> f64 {
        self.lambda1.last().unwrap() + self.lambda2.last().unwrap()
    }
}

/// Integrates the eigenvalue pair from `initial` over [0, T] under the
/// given protocol: classical fourth-order steps for the drift, plus an
/// Euler noise increment for [`DriveProtocol::Hold`] observables with
/// diagonal structure. Deterministic protocols accept `noise = None`;
/// a noisy drive without a stream is an error.
pub fn simulate_eigen(
    model: &QutritModel,
    protocol: &DriveProtocol,
    initial: &EigenState,
    dt: f64,
    mut noise: Option<&mut NoiseStream>,
) -> Result<EigenPath> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {dt}")));
    }
    if !initial.is_near_pure() {
        return Err(Error::InvalidState(format!(
            "initial infidelity {} exceeds the near-pure band",
            initial.infidelity()
        )));
    }
    let a = model.a;
    let a2 = a * a;
    let drift = |l1: f64, l2: f64, t: f64| -> Result<[f64; 2]> {
        match protocol {
            DriveProtocol::LevelOne => Ok([-8.0 * a2 * l1, 0.0]),
            DriveProtocol::LevelTwo => Ok([0.0, -8.0 * a2 * l2]),
            DriveProtocol::FastSwitch => Ok([-4.0 * a2 * l1, -4.0 * a2 * l2]),
            DriveProtocol::SwitchAtTime(s) => {
                if t < *s {
                    Ok([-8.0 * a2 * l1, 0.0])
                } else {
                    Ok([-4.0 * a2 * l1, -4.0 * a2 * l2])
                }
            }
            DriveProtocol::Alternate { half_period } => {
                if !(*half_period > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "alternation half-period must be positive, got {half_period}"
                    )));
                }
                if ((t / half_period).floor() as i64).rem_euclid(2) == 0 {
                    Ok([-8.0 * a2 * l1, 0.0])
                } else {
                    Ok([0.0, -8.0 * a2 * l2])
                }
            }
            DriveProtocol::Hold(x) => {
                let state = EigenState::new(l1.max(l2), l2.min(l1))?;
                let (d, _) = eigen_dynamics(&state, x)?;
                Ok(d)
            }
        }
    };

    let n_steps = (model.horizon / dt).ceil().max(1.0) as usize;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut lambda1 = Vec::with_capacity(n_steps + 1);
    let mut lambda2 = Vec::with_capacity(n_steps + 1);
    let (mut l1, mut l2) = (initial.lambda1, initial.lambda2);
    let mut t = 0.0;
    times.push(t);
    lambda1.push(l1);
    lambda2.push(l2);

    for step in 0..n_steps {
        let h = if step + 1 == n_steps { model.horizon - t } else { dt };
        let k1 = drift(l1, l2, t)?;
        let k2 = drift(l1 + 0.5 * h * k1[0], l2 + 0.5 * h * k1[1], t + 0.5 * h)?;
        let k3 = drift(l1 + 0.5 * h * k2[0], l2 + 0.5 * h * k2[1], t + 0.5 * h)?;
        let k4 = drift(l1 + h * k3[0], l2 + h * k3[1], t + h)?;
        l1 += h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
        l2 += h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);

        if let DriveProtocol::Hold(x) = protocol {
            let state = EigenState::new(
                lambda1[step].max(lambda2[step]),
                lambda2[step].min(lambda1[step]),
            )?;
            let (_, s) = eigen_dynamics(&state, x)?;
            if s[0].abs() + s[1].abs() > 1e-14 {
                let stream = noise.as_deref_mut().ok_or_else(|| {
                    Error::InvalidArgument(
                        "this drive produces measurement noise; provide a noise stream"
                            .into(),
                    )
                })?;
                let dw = stream.wiener_increment(h)?;
                l1 += s[0] * dw;
                l2 += s[1] * dw;
            }
        }

        // Noise can graze the physical boundary or swap the ordering;
        // project back onto the ordered simplex.
        l2 = l2.max(0.0);
        l1 = l1.max(0.0);
        if l1 < l2 {
            std::mem::swap(&mut l1, &mut l2);
        }
        if l1 + l2 > 0.5 {
            return Err(Error::InvalidState(format!(
                "trajectory left the modeling band at t = {t}: Δ = {}",
                l1 + l2
            )));
        }
        t = if step + 1 == n_steps { model.horizon } else { t + h };
        times.push(t);
        lambda1.push(l1);
        lambda2.push(l2);
    }

    Ok(EigenPath { times, lambda1, lambda2 })
}

// ---------------------------------------------------------------------------
// End-to-end verification
// ---------------------------------------------------------------------------

/// Scenario data for the end-to-end verification: initial eigenvalues,
/// observable scale, and horizon.
#[derive(Clone, Copy, Debug)]
pub struct QutritScenario {
    pub lambda1: f64,
    pub lambda2: f64,
    pub a: f64,
    pub horizon: f64,
}

/// Everything [`verify_qutrit`] establishes about a scenario.
#[derive(Debug)]
pub struct QutritVerification {
    pub model: QutritModel,
    /// Time for the level-one coupling to pull λ₁ down to λ₂ from the
    /// initial state.
    pub switching_time: f64,
    /// True when the horizon ends before the seam is reached, so the whole
    /// nominal trajectory stays on the smooth single-coupling branch.
    pub single_branch_only: bool,
    /// Value of the candidate field at the initial state.
    pub optimal_cost: f64,
    /// Whether both branches satisfy their single-coupling transport
    /// identities ∂C/∂t = 8a²λᵢ ∂C/∂λᵢ at sampled points (the quick
    /// first-derivative cross-check on the closed forms).
    pub transport_pair_holds: bool,
    /// Classical verification: seam-free slices of the single-coupling
    /// region, plus (when the horizon crosses the seam) one run straddling
    /// it, which is expected to surface smoothness witnesses there.
    pub classic: VerificationReport,
    /// Viscosity-based verification over the full horizon.
    pub enhanced: EnhancedReport,
}

/// Relative nudge keeping the phase-B nominal path strictly ordered:
/// after the switch the balanced flow preserves λ₁/λ₂, so the path is
/// started at λ₁ = λ₂(1 + this) instead of exactly on the diagonal, where
/// the cross-coupling term is singular.
const PATH_SEPARATION: f64 = 1e-3;

/// Verifies the switching protocol for a scenario at tolerance `tol`:
/// builds the candidate piecewise cost, checks the transport identities,
/// runs the classical verifier on the smooth single-coupling region (and
/// across the seam when the horizon reaches it), and runs the full
/// viscosity-based verification along the nominal switching trajectory.
pub fn verify_qutrit(scenario: &QutritScenario, tol: f64) -> Result<QutritVerification> {
    verify_qutrit_with_seam_coefficient(scenario, tol, 2.0)
}

/// Same verification with the balanced-branch prefactor overridden; any
/// value other than 2 tears the seam and should be rejected, which makes
/// this the negative control for the whole pipeline.
pub fn verify_qutrit_with_seam_coefficient(
    scenario: &QutritScenario,
    tol: f64,
    minus_coefficient: f64,
) -> Result<QutritVerification> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let initial = EigenState::new(scenario.lambda1, scenario.lambda2)?;
    if !initial.is_near_pure() {
        return Err(Error::InvalidState(format!(
            "scenario infidelity {} exceeds the near-pure band",
            initial.infidelity()
        )));
    }
    if !(scenario.lambda2 > 0.0) {
        return Err(Error::InvalidArgument(
            "verification needs λ₂ > 0 (λ₂ = 0 never switches branch)".into(),
        ));
    }
    let model = QutritModel::new(scenario.a, scenario.horizon)?;
    let tau0 = switching_time(scenario.lambda1, scenario.lambda2, scenario.a)?;
    let single_branch_only = model.horizon <= tau0;

    let path = nominal_switching_path(&model, &initial, tau0, 9);
    let field = piecewise_cost_field(&model, minus_coefficient)?;
    let optimal_cost =
        field.value(&[scenario.lambda1, scenario.lambda2], 0.0, 1e-12)?;

    // Spatial box around the nominal path, with margins small enough to
    // stay ordered and positive but larger than every probe reach.
    let l1_path_min = path.iter().map(|(_, x)| x[0]).fold(f64::INFINITY, f64::min);
    let l2_path_min = path.iter().map(|(_, x)| x[1]).fold(f64::INFINITY, f64::min);
    let l2_lo = l2_path_min * 0.9;
    let l2_hi = scenario.lambda2 * 1.1;
    let l1_hi = scenario.lambda1 * 1.1;
    let l1_lo = (l1_path_min * 0.9).max(l2_hi * 1.05);
    if l1_lo >= l1_hi {
        return Err(Error::InvalidArgument(format!(
            "scenario leaves no ordered box around the path: λ₁ ∈ [{l1_lo}, {l1_hi}]"
        )));
    }
    let lambda_box = [(l1_lo, l1_hi), (l2_lo, l2_hi)];

    let transport_pair_holds =
        transport_identities_hold(&model, &lambda_box, tol.max(1e-9));

    let policy_params = level_one_params(scenario.a)?;
    let policy = move |_x: &[f64], _t: f64| {
        Ok(ControlVector::constant_observable(policy_params.clone()))
    };
    let dynamics = CouplingOrbitDynamics { a: scenario.a };
    let region = coupling_orbit_region(scenario.a);
    let nm = NelderMeadOptions {
        restarts: 5,
        max_iters: 2000,
        ..NelderMeadOptions::default()
    };

    // Classical verification on seam-free slices of the single-coupling
    // region: at each sampled time, the λ-box is cut down so that the whole
    // slice (plus probe margin) satisfies λ₁E ≥ λ₂.
    let matched = matched_cost_field(&model);
    let classic_opts = VerifyClassicOptions {
        pde_tol: tol,
        gap_tol: tol,
        terminal_tol: tol.min(1e-8),
        smooth_h: 2e-4,
        nm: nm.clone(),
        ..VerifyClassicOptions::default()
    };
    let terminal = |x: &[f64]| x[0] + x[1];
    let mut classic_runs: Vec<VerificationReport> = Vec::new();
    let slice_times: Vec<f64> = (0..5)
        .map(|k| model.horizon * (0.05 + 0.9 * k as f64 / 4.0))
        .collect();
    for &t in &slice_times {
        if let Some(grid) = single_branch_slice(&model, &lambda_box, t, [5, 5]) {
            classic_runs.push(verify_classic(
                &matched,
                &dynamics,
                None,
                &terminal,
                &region,
                &policy,
                &grid,
                &[t, model.horizon],
                &classic_opts,
            )?);
        }
    }
    if !single_branch_only {
        // One run whose grid pins a node exactly on the seam, so the
        // classical smoothness probes must straddle the curvature jump.
        let (grid, t_star) = seam_pinned_grid(&model, &lambda_box)?;
        classic_runs.push(verify_classic(
            &matched,
            &dynamics,
            None,
            &terminal,
            &region,
            &policy,
            &grid,
            &[t_star, model.horizon],
            &classic_opts,
        )?);
    }
    let classic = merge_verification_reports(classic_runs);

    // Viscosity-based verification over the full horizon.
    let smooth_samples = branch_samples(&model, &lambda_box);
    let kink_samples = seam_samples(&model, &lambda_box);
    let horizon_samples: Vec<Vec<f64>> = [0.15, 0.5, 0.85]
        .iter()
        .flat_map(|&u| {
            [0.25, 0.75].iter().map(move |&w| {
                vec![
                    l1_lo + u * (l1_hi - l1_lo),
                    l2_lo + w * (l2_hi - l2_lo),
                ]
            })
        })
        .collect();
    let vis_opts = ViscosityOptions {
        tol,
        n_bumps: 8,
        n_window_samples: 5,
        seed: 11,
        nm,
        ..ViscosityOptions::default()
    };
    let enhanced = verify_enhanced(
        &field,
        &dynamics,
        None,
        &terminal,
        &region,
        &policy,
        &smooth_samples,
        &kink_samples,
        &path,
        model.horizon,
        &horizon_samples,
        &vis_opts,
    )?;

    Ok(QutritVerification {
        model,
        switching_time: tau0,
        single_branch_only,
        optimal_cost,
        transport_pair_holds,
        classic,
        enhanced,
    })
}

/// The nominal switching trajectory sampled at `n` equispaced times: the
/// level-one flow (λ₁e^{−8a²t}, λ₂) until the switch, then the balanced
/// flow with both eigenvalues decaying as e^{−4a²(t−τ)}. Past the switch
/// the exact path sits on the singular diagonal λ₁ = λ₂, so it is kept at
/// a relative separation of [`PATH_SEPARATION`].
pub fn nominal_switching_path(
    model: &QutritModel,
    initial: &EigenState,
    switch_time: f64,
    n: usize,
) -> Vec<(f64, Vec<f64>)> {
    let a2 = model.a * model.a;
    (0..n)
        .map(|i| {
            let t = model.horizon * i as f64 / (n - 1).max(1) as f64;
            let x = if t <= switch_time || model.horizon <= switch_time {
                vec![initial.lambda1() * (-8.0 * a2 * t).exp(), initial.lambda2()]
            } else {
                let base = initial.lambda2() * (-4.0 * a2 * (t - switch_time)).exp();
                vec![base * (1.0 + PATH_SEPARATION), base]
            };
            (t, x)
        })
        .collect()
}

/// λ-grid for one classical slice at time `t`: the part of `lambda_box`
/// where λ₁E(t) ≥ λ₂ holds with enough seam margin that every smoothness
/// probe stays on the single-coupling side. Returns None when the slice is
/// empty at that time.
pub fn single_branch_slice(
    model: &QutritModel,
    lambda_box: &[(f64, f64); 2],
    t: f64,
    points: [usize; 2],
) -> Option<StateGrid> {
    // Seam margin in log-ratio units: probes move ln λ₁, ln λ₂, and
    // 8a²(T−t) each by well under 0.04 for the smooth_h in use.
    let sigma_margin: f64 = 0.12;
    let (l1_lo, l1_hi) = lambda_box[0];
    let (l2_lo, l2_hi) = lambda_box[1];
    let needed = l2_hi / model.decay(t) * sigma_margin.exp();
    let lo = l1_lo.max(needed);
    if lo >= l1_hi * 0.999 {
        return None;
    }
    StateGrid::uniform(&[(lo, l1_hi), (l2_lo, l2_hi)], &[points[0], points[1]]).ok()
}

/// A λ-grid with one interior node placed exactly on the seam at the
/// returned time, so a classical run over it must probe across the
/// curvature jump.
fn seam_pinned_grid(
    model: &QutritModel,
    lambda_box: &[(f64, f64); 2],
) -> Result<(StateGrid, f64)> {
    let (l1_lo, l1_hi) = lambda_box[0];
    let (l2_lo, l2_hi) = lambda_box[1];
    let n = 5;
    let l2_axis: Vec<f64> = (0..n)
        .map(|i| l2_lo + (l2_hi - l2_lo) * i as f64 / (n - 1) as f64)
        .collect();
    let l2_star = l2_axis[n / 2];
    // Pick the slice time so that the seam partner of the middle λ₂ node
    // lies inside the λ₁ range: λ₁* = λ₂*/E(t*).
    let target = (l1_lo * l1_hi).sqrt();
    let ratio = (target / l2_star).max(1.05);
    let t_star = (model.horizon - ratio.ln() / (8.0 * model.a * model.a)).max(
        model.horizon * 0.05,
    );
    let l1_star = l2_star / model.decay(t_star);
    if l1_star <= l1_lo || l1_star >= l1_hi {
        return Err(Error::InvalidArgument(format!(
            "no seam crossing inside the λ₁ range: partner {l1_star} outside \
             [{l1_lo}, {l1_hi}]"
        )));
    }
    let mut l1_axis: Vec<f64> = (0..n)
        .map(|i| l1_lo + (l1_hi - l1_lo) * i as f64 / (n - 1) as f64)
        .collect();
    let nearest = (1..n - 1)
        .min_by(|&i, &j| {
            (l1_axis[i] - l1_star)
                .abs()
                .total_cmp(&(l1_axis[j] - l1_star).abs())
        })
        .expect("interior axis nodes");
    l1_axis[nearest] = l1_star;
    l1_axis.sort_by(f64::total_cmp);
    l1_axis.dedup();
    Ok((StateGrid::new(vec![l1_axis, l2_axis])?, t_star))
}

/// Smooth sample points for the viscosity verification: a few states per
/// branch, each placed at a time making it cleanly one-sided.
fn branch_samples(model: &QutritModel, lambda_box: &[(f64, f64); 2]) -> Vec<(Vec<f64>, f64)> {
    let (l1_lo, l1_hi) = lambda_box[0];
    let (l2_lo, l2_hi) = lambda_box[1];
    let a2 = model.a * model.a;
    let mut samples = Vec::new();
    for &(u, w) in &[(0.3, 0.3), (0.7, 0.5), (0.5, 0.8)] {
        let l1 = l1_lo + u * (l1_hi - l1_lo);
        let l2 = l2_lo + w * (l2_hi - l2_lo);
        let tau = (l1 / l2).ln() / (8.0 * a2);
        // Single-coupling side: T − t well below τ.
        let t_plus = model.horizon - 0.5 * tau.min(model.horizon);
        samples.push((vec![l1, l2], t_plus));
        // Balanced side: T − t well past τ, when the horizon allows it.
        let t_minus = model.horizon - 1.7 * tau;
        if t_minus > 1e-3 * model.horizon {
            samples.push((vec![l1, l2], t_minus));
        }
    }
    samples
}

/// Seam sample points (λ, T − τ(λ)) inside the box and horizon.
fn seam_samples(model: &QutritModel, lambda_box: &[(f64, f64); 2]) -> Vec<(Vec<f64>, f64)> {
    let (l1_lo, l1_hi) = lambda_box[0];
    let (l2_lo, l2_hi) = lambda_box[1];
    let a2 = model.a * model.a;
    let mut samples = Vec::new();
    for &(u, w) in &[(0.35, 0.4), (0.6, 0.6), (0.8, 0.25)] {
        let l1 = l1_lo + u * (l1_hi - l1_lo);
        let l2 = l2_lo + w * (l2_hi - l2_lo);
        let tau = (l1 / l2).ln() / (8.0 * a2);
        let t = model.horizon - tau;
        if t > 1e-3 * model.horizon && t < model.horizon {
            samples.push((vec![l1, l2], t));
        }
    }
    samples
}

/// Checks that each closed-form branch satisfies its single-coupling
/// transport identity ∂C/∂t = 8a²λᵢ ∂C/∂λᵢ on sampled points: the
/// single-coupling piece for the driven channel i = 1, the balanced piece
/// for both channels at once.
fn transport_identities_hold(
    model: &QutritModel,
    lambda_box: &[(f64, f64); 2],
    tol: f64,
) -> bool {
    let a2 = model.a * model.a;
    let plus = plus_piece(model);
    let minus = minus_piece(model, 2.0);
    let mut ok = true;
    for &(u, w, s) in &[(0.2, 0.3, 0.25), (0.5, 0.6, 0.6), (0.8, 0.4, 0.9)] {
        let x = vec![
            lambda_box[0].0 + u * (lambda_box[0].1 - lambda_box[0].0),
            lambda_box[1].0 + w * (lambda_box[1].1 - lambda_box[1].0),
        ];
        let t = s * model.horizon;
        for (piece, channels) in [(&plus, vec![0usize]), (&minus, vec![0, 1])] {
            let q = match crate::cost::query_cost_field(piece, &x, t) {
                Ok(q) => q,
                Err(_) => {
                    ok = false;
                    continue;
                }
            };
            let scale = q.time_derivative.abs().max(1.0);
            for &i in &channels {
                if (q.time_derivative - 8.0 * a2 * x[i] * q.gradient[i]).abs()
                    > tol * scale
                {
                    ok = false;
                }
            }
        }
    }
    ok
}

/// Folds several classical reports (e.g. per-slice runs over one region)
/// into one: verdicts combine pessimistically, maxima take the worst case,
/// and witness lists concatenate.
pub fn merge_verification_reports(
    reports: impl IntoIterator<Item = VerificationReport>,
) -> VerificationReport {
    let mut merged = VerificationReport {
        verdict: Verdict::Optimal,
        checked_points: 0,
        max_residual: 0.0,
        max_gap: 0.0,
        max_terminal_defect: 0.0,
        smoothness_failures: Vec::new(),
        residual_failures: Vec::new(),
        gap_failures: Vec::new(),
        terminal_failures: Vec::new(),
        notes: Vec::new(),
    };
    for r in reports {
        merged.checked_points += r.checked_points;
        merged.max_residual = merged.max_residual.max(r.max_residual);
        merged.max_gap = merged.max_gap.max(r.max_gap);
        merged.max_terminal_defect = merged.max_terminal_defect.max(r.max_terminal_defect);
        merged.smoothness_failures.extend(r.smoothness_failures);
        merged.residual_failures.extend(r.residual_failures);
        merged.gap_failures.extend(r.gap_failures);
        merged.terminal_failures.extend(r.terminal_failures);
        merged.notes.extend(r.notes);
        merged.verdict = match (merged.verdict, r.verdict) {
            (Verdict::NotOptimal, _) | (_, Verdict::NotOptimal) => Verdict::NotOptimal,
            (Verdict::Inconclusive, _) | (_, Verdict::Inconclusive) => {
                Verdict::Inconclusive
            }
            _ => Verdict::Optimal,
        };
    }
    merged
}
