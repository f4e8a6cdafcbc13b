//! Control vectors, admissible control regions, and control protocols.
//!
//! A control has two parts: real Hamiltonian coefficients `mu` (one per
//! control Hamiltonian of the model) and, optionally, the frame parameters
//! of the measured observable X = U D U†. Protocols map time (and, for
//! state feedback, a spectral summary of the current state) to a control.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::qstate::{self, EigenDecomposition, UnitaryParams};

/// Tolerance used for region membership checks.
const REGION_TOL: f64 = 1e-9;

/// A single control value: Hamiltonian coefficients plus observable frame.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ControlVector {
    /// Coefficients multiplying the model's control Hamiltonians.
    pub mu: Vec<f64>,
    /// Parameters of the measured observable, if the observable is a control.
    pub obs_params: Option<UnitaryParams>,
}

impl ControlVector {
    pub fn constant_observable(params: UnitaryParams) -> Self {
        Self {
            mu: Vec::new(),
            obs_params: Some(params),
        }
    }

    pub fn coefficients(mu: Vec<f64>) -> Self {
        Self {
            mu,
            obs_params: None,
        }
    }

    /// Flattens to [mu.., angles.., diag..] for optimizers and grids.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.mu.clone();
        if let Some(p) = &self.obs_params {
            flat.extend_from_slice(&p.angles);
            flat.extend_from_slice(&p.diag);
        }
        flat
    }

    /// Rebuilds a control from its flattened form, given the region that
    /// defines the component layout.
    pub fn from_flat(flat: &[f64], region: &ControlRegion) -> Result<Self> {
        let n_mu = region.mu_bounds.len();
        let n_ang = region.angle_bounds.len();
        let n_diag = region.diag_bounds.len();
        if flat.len() != n_mu + n_ang + n_diag {
            return Err(Error::DimensionMismatch(format!(
                "flat control has {} components, region expects {}",
                flat.len(),
                n_mu + n_ang + n_diag
            )));
        }
        let mu = flat[..n_mu].to_vec();
        let obs_params = if n_ang + n_diag > 0 {
            Some(UnitaryParams {
                angles: flat[n_mu..n_mu + n_ang].to_vec(),
                diag: flat[n_mu + n_ang..].to_vec(),
            })
        } else {
            None
        };
        Ok(Self { mu, obs_params })
    }
}

/// Componentwise box bounds plus an optional discrete restriction.
///
/// Components with equal lower and upper bound are frozen; optimizers only
/// vary the free components. When `discrete` is set, the admissible set is
/// exactly that finite list (the bounds still describe the layout).
#[derive(Clone, Debug, PartialEq)]
pub struct ControlRegion {
    pub mu_bounds: Vec<(f64, f64)>,
    pub angle_bounds: Vec<(f64, f64)>,
    pub diag_bounds: Vec<(f64, f64)>,
    pub discrete: Option<Vec<ControlVector>>,
}

impl ControlRegion {
    /// Region for an observable-only control: all angles free in [−π, π],
    /// diagonal frozen at `diag`.
    pub fn observable_orbit(diag: &[f64]) -> Self {
        let n = diag.len();
        Self {
            mu_bounds: Vec::new(),
            angle_bounds: vec![(-std::f64::consts::PI, std::f64::consts::PI);
                UnitaryParams::angle_len(n)],
            diag_bounds: diag.iter().map(|&d| (d, d)).collect(),
            discrete: None,
        }
    }

    /// Region for coefficient-only controls.
    pub fn coefficient_box(bounds: Vec<(f64, f64)>) -> Self {
        Self {
            mu_bounds: bounds,
            angle_bounds: Vec::new(),
            diag_bounds: Vec::new(),
            discrete: None,
        }
    }

    /// Discrete region: exactly the given controls are admissible.
    pub fn discrete_set(controls: Vec<ControlVector>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::InvalidArgument("empty discrete control set".into()));
        }
        let flats: Vec<Vec<f64>> = controls.iter().map(ControlVector::to_flat).collect();
        let dim = flats[0].len();
        if flats.iter().any(|f| f.len() != dim) {
            return Err(Error::DimensionMismatch(
                "discrete controls have inconsistent layouts".into(),
            ));
        }
        let n_mu = controls[0].mu.len();
        let (n_ang, n_diag) = match &controls[0].obs_params {
            Some(p) => (p.angles.len(), p.diag.len()),
            None => (0, 0),
        };
        let bound_of = |idx: usize| {
            let lo = flats.iter().map(|f| f[idx]).fold(f64::INFINITY, f64::min);
            let hi = flats.iter().map(|f| f[idx]).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        };
        Ok(Self {
            mu_bounds: (0..n_mu).map(bound_of).collect(),
            angle_bounds: (n_mu..n_mu + n_ang).map(bound_of).collect(),
            diag_bounds: (n_mu + n_ang..n_mu + n_ang + n_diag).map(bound_of).collect(),
            discrete: Some(controls),
        })
    }

    /// All bounds in flat component order.
    pub fn flat_bounds(&self) -> Vec<(f64, f64)> {
        self.mu_bounds
            .iter()
            .chain(&self.angle_bounds)
            .chain(&self.diag_bounds)
            .copied()
            .collect()
    }

    /// Indices of flat components with room to vary.
    pub fn free_components(&self) -> Vec<usize> {
        self.flat_bounds()
            .iter()
            .enumerate()
            .filter(|(_, (lo, hi))| hi > lo)
            .map(|(i, _)| i)
            .collect()
    }

    /// Membership test (componentwise within bounds; for discrete regions,
    /// within 1e-9 of some member in the flat metric).
    pub fn contains(&self, v: &ControlVector) -> bool {
        let flat = v.to_flat();
        let bounds = self.flat_bounds();
        if flat.len() != bounds.len() {
            return false;
        }
        if let Some(members) = &self.discrete {
            return members.iter().any(|m| {
                let mf = m.to_flat();
                mf.iter()
                    .zip(&flat)
                    .all(|(a, b)| (a - b).abs() <= REGION_TOL)
            });
        }
        flat.iter()
            .zip(&bounds)
            .all(|(x, (lo, hi))| *x >= lo - REGION_TOL && *x <= hi + REGION_TOL)
    }

    /// Componentwise clamp into the box bounds.
    pub fn clamp_flat(&self, flat: &mut [f64]) {
        for (x, (lo, hi)) in flat.iter_mut().zip(self.flat_bounds()) {
            *x = x.clamp(lo, hi);
        }
    }

    /// The control at the box midpoint.
    pub fn midpoint(&self) -> Result<ControlVector> {
        let flat: Vec<f64> = self
            .flat_bounds()
            .iter()
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect();
        ControlVector::from_flat(&flat, self)
    }
}

/// Validates a control region: finite bounds, lower ≤ upper componentwise,
/// and non-empty discrete sets.
pub fn validate_region(region: &ControlRegion) -> Result<()> {
    for (lo, hi) in region.flat_bounds() {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "control bounds must be finite, got ({lo}, {hi})"
            )));
        }
        if lo > hi {
            return Err(Error::InvalidArgument(format!(
                "control bound lower {lo} exceeds upper {hi}"
            )));
        }
    }
    if let Some(members) = &region.discrete {
        if members.is_empty() {
            return Err(Error::InvalidArgument("empty discrete control set".into()));
        }
    }
    Ok(())
}

/// One segment of a time-switching protocol; active on [from_t, next from_t).
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub from_t: f64,
    pub control: ControlVector,
}

/// Built-in and user-defined state-feedback rules.
///
/// Rules are pure functions of the spectral summary of the current state and
/// the time; they never see the raw density matrix.
#[derive(Clone)]
pub enum FeedbackRule {
    /// Measure the pairwise-coupling observable with spectrum (a, 0, −a)
    /// expressed in the descending eigenbasis of the current state: matrix
    /// elements X₁₀ = X₀₁ = a in that basis, all others zero.
    QutritEigenbasis { a: f64 },
    /// Arbitrary pure rule (summary, t) → control.
    Custom(Arc<dyn Fn(&EigenDecomposition, f64) -> ControlVector + Send + Sync>),
}

impl fmt::Debug for FeedbackRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeedbackRule::QutritEigenbasis { a } => {
                write!(f, "QutritEigenbasis {{ a: {a} }}")
            }
            FeedbackRule::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// A control protocol: constant, piecewise-constant in time, or state
/// feedback.
#[derive(Clone, Debug)]
pub enum ControlProtocol {
    Constant(ControlVector),
    /// Piecewise-constant, right-continuous: at a switch time the later
    /// segment's control applies.
    TimeSwitching(Vec<Segment>),
    StateFeedback(FeedbackRule),
}

impl ControlProtocol {
    pub fn is_feedback(&self) -> bool {
        matches!(self, ControlProtocol::StateFeedback(_))
    }
}

/// Evaluates a protocol at time `t`. Feedback protocols require the spectral
/// summary of the current state; the others ignore it.
pub fn evaluate_protocol(
    protocol: &ControlProtocol,
    state: Option<&EigenDecomposition>,
    t: f64,
) -> Result<ControlVector> {
    match protocol {
        ControlProtocol::Constant(v) => Ok(v.clone()),
        ControlProtocol::TimeSwitching(segments) => {
            if segments.is_empty() {
                return Err(Error::InvalidArgument("empty switching protocol".into()));
            }
            if segments.windows(2).any(|w| w[1].from_t <= w[0].from_t) {
                return Err(Error::InvalidArgument(
                    "switching segments must have strictly increasing start times".into(),
                ));
            }
            let active = segments
                .iter()
                .rev()
                .find(|s| t >= s.from_t)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "time {t} precedes the first switching segment at {}",
                        segments[0].from_t
                    ))
                })?;
            Ok(active.control.clone())
        }
        ControlProtocol::StateFeedback(rule) => {
            let summary = state.ok_or_else(|| {
                Error::InvalidArgument(
                    "state-feedback protocol evaluated without a state summary".into(),
                )
            })?;
            match rule {
                FeedbackRule::QutritEigenbasis { a } => qutrit_eigenbasis_control(summary, *a),
                FeedbackRule::Custom(f) => Ok(f(summary, t)),
            }
        }
    }
}

/// Frame parameters whose observable equals, in the given eigenbasis, the
/// coupling matrix with entries X₁₀ = X₀₁ = a (spectrum a, 0, −a).
fn qutrit_eigenbasis_control(summary: &EigenDecomposition, a: f64) -> Result<ControlVector> {
    if summary.vectors.nrows() != 3 {
        return Err(Error::DimensionMismatch(format!(
            "eigenbasis feedback rule needs a 3-level state, got dimension {}",
            summary.vectors.nrows()
        )));
    }
    // In its own eigenbasis the target observable is W diag(a,0,−a) W† with
    // W the fixed frame below; composing with the state's eigenvectors V
    // gives the lab-frame unitary U = V W.
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let w = crate::qstate::CMatrix::from_row_slice(
        3,
        3,
        &[
            num_complex::Complex64::new(s, 0.0),
            num_complex::Complex64::new(0.0, 0.0),
            num_complex::Complex64::new(s, 0.0),
            num_complex::Complex64::new(s, 0.0),
            num_complex::Complex64::new(0.0, 0.0),
            num_complex::Complex64::new(-s, 0.0),
            num_complex::Complex64::new(0.0, 0.0),
            num_complex::Complex64::new(1.0, 0.0),
            num_complex::Complex64::new(0.0, 0.0),
        ],
    );
    let u = &summary.vectors * w;
    let params = qstate::params_for_unitary(&u, vec![a, 0.0, -a])?;
    Ok(ControlVector::constant_observable(params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qstate::{eig_sorted, observable_from, DensityMatrix};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn obs_params(a: f64) -> UnitaryParams {
        UnitaryParams {
            angles: vec![0.0; 6],
            diag: vec![a, 0.0, -a],
        }
    }

    #[test]
    fn constant_protocol_returns_its_control() {
        let v = ControlVector::constant_observable(obs_params(0.2));
        let p = ControlProtocol::Constant(v.clone());
        assert_eq!(evaluate_protocol(&p, None, 0.3).unwrap(), v);
    }

    #[test]
    fn time_switching_is_right_continuous_at_the_switch() {
        let v0 = ControlVector::coefficients(vec![0.0]);
        let v1 = ControlVector::coefficients(vec![1.0]);
        let p = ControlProtocol::TimeSwitching(vec![
            Segment {
                from_t: 0.0,
                control: v0.clone(),
            },
            Segment {
                from_t: 1.0,
                control: v1.clone(),
            },
        ]);
        assert_eq!(evaluate_protocol(&p, None, 0.999).unwrap(), v0);
        assert_eq!(evaluate_protocol(&p, None, 1.0).unwrap(), v1);
        assert_eq!(evaluate_protocol(&p, None, 1.5).unwrap(), v1);
        assert!(evaluate_protocol(&p, None, -0.1).is_err());
    }

    #[test]
    fn feedback_without_state_summary_errors() {
        let p = ControlProtocol::StateFeedback(FeedbackRule::QutritEigenbasis { a: 0.25 });
        assert!(evaluate_protocol(&p, None, 0.0).is_err());
    }

    #[test]
    fn qutrit_rule_builds_the_coupling_observable_in_the_eigenbasis() {
        let a = 0.25;
        let p = ControlProtocol::StateFeedback(FeedbackRule::QutritEigenbasis { a });
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..10 {
            let rho = crate::qstate::random_density(&mut rng, 3);
            let summary = eig_sorted(&rho);
            let v = evaluate_protocol(&p, Some(&summary), 0.0).unwrap();
            let x = observable_from(v.obs_params.as_ref().unwrap()).unwrap();
            // In the state's eigenbasis the observable must be the 0↔1
            // coupling with amplitude a.
            let in_basis = summary.vectors.adjoint() * x.matrix() * &summary.vectors;
            for i in 0..3 {
                for j in 0..3 {
                    let want = if (i, j) == (0, 1) || (i, j) == (1, 0) {
                        a
                    } else {
                        0.0
                    };
                    assert_relative_eq!(in_basis[(i, j)].norm(), want, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn region_validation_and_membership() {
        let region = ControlRegion::observable_orbit(&[0.3, 0.0, -0.3]);
        validate_region(&region).unwrap();
        let inside = ControlVector::constant_observable(UnitaryParams {
            angles: vec![0.1; 6],
            diag: vec![0.3, 0.0, -0.3],
        });
        assert!(region.contains(&inside));
        let outside = ControlVector::constant_observable(UnitaryParams {
            angles: vec![4.0; 6],
            diag: vec![0.3, 0.0, -0.3],
        });
        assert!(!region.contains(&outside));

        let bad = ControlRegion::coefficient_box(vec![(1.0, 0.0)]);
        assert!(validate_region(&bad).is_err());
        let inf = ControlRegion::coefficient_box(vec![(0.0, f64::INFINITY)]);
        assert!(validate_region(&inf).is_err());
    }

    #[test]
    fn discrete_region_membership_is_by_member_distance() {
        let a = ControlVector::coefficients(vec![0.0]);
        let b = ControlVector::coefficients(vec![1.0]);
        let region = ControlRegion::discrete_set(vec![a.clone(), b.clone()]).unwrap();
        validate_region(&region).unwrap();
        assert!(region.contains(&a));
        assert!(region.contains(&b));
        assert!(!region.contains(&ControlVector::coefficients(vec![0.5])));
        assert!(ControlRegion::discrete_set(vec![]).is_err());
    }

    #[test]
    fn flat_roundtrip_preserves_controls() {
        let region = ControlRegion::observable_orbit(&[0.3, 0.0, -0.3]);
        let v = ControlVector::constant_observable(UnitaryParams {
            angles: vec![0.1, -0.2, 0.3, -0.4, 0.5, -0.6],
            diag: vec![0.3, 0.0, -0.3],
        });
        let flat = v.to_flat();
        let back = ControlVector::from_flat(&flat, &region).unwrap();
        assert_eq!(v, back);
    }

    #[test]
    fn feedback_rule_lies_in_the_orbit_region() {
        let a = 0.25;
        let region = ControlRegion::observable_orbit(&[a, 0.0, -a]);
        let p = ControlProtocol::StateFeedback(FeedbackRule::QutritEigenbasis { a });
        let rho = DensityMatrix::diagonal(&[0.9, 0.07, 0.03]).unwrap();
        let v = evaluate_protocol(&p, Some(&eig_sorted(&rho)), 0.0).unwrap();
        assert!(region.contains(&v));
    }
}
