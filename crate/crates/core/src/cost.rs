//! Cost functionals, Monte-Carlo estimators, and differentiable cost fields.
//!
//! A cost specification pairs a running cost L(state, control, t) with a
//! terminal cost M(state) on a fixed horizon. Costs along simulated paths
//! integrate L with the left-endpoint rule (matching the Euler chain) and
//! add M at the final state. Cost-to-go estimates fan out over seeded noise
//! streams, so they are reproducible and support common-random-number
//! (CRN) paired comparisons between protocols.
//!
//! A [`CostField`] is a candidate cost-to-go surface C(x, t) over real
//! coordinates, with closed-form derivatives when available and central
//! finite differences otherwise.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::control::{ControlProtocol, ControlVector};
use crate::error::{Error, Result};
use crate::qstate::DensityMatrix;
use crate::sde::{simulate_trajectory, NoiseStream, SmeModel, TrajectoryRecord};

/// Cost specification over an arbitrary state representation.
#[derive(Clone)]
pub struct CostSpec<S: ?Sized> {
    /// Running cost L(state, control, t).
    pub running: Arc<dyn Fn(&S, &ControlVector, f64) -> f64 + Send + Sync>,
    /// Terminal cost M(state).
    pub terminal: Arc<dyn Fn(&S) -> f64 + Send + Sync>,
    /// Horizon time T.
    pub horizon: f64,
}

/// Costs on density matrices (the usual case).
pub type QuantumCostSpec = CostSpec<DensityMatrix>;

/// Costs on real coordinate vectors (eigenvalue or grid dynamics).
pub type VectorCostSpec = CostSpec<[f64]>;

impl<S: ?Sized> CostSpec<S> {
    /// Purely terminal cost: L = 0.
    pub fn terminal_only(
        terminal: Arc<dyn Fn(&S) -> f64 + Send + Sync>,
        horizon: f64,
    ) -> Self {
        Self {
            running: Arc::new(|_, _, _| 0.0),
            terminal,
            horizon,
        }
    }
}

/// Integrates the running cost along a trajectory with the left-endpoint
/// rule and adds the terminal cost at the final state.
pub fn path_cost(spec: &QuantumCostSpec, record: &TrajectoryRecord) -> Result<f64> {
    record.validate()?;
    let mut total = 0.0;
    for i in 0..record.dr.len() {
        let dt = record.times[i + 1] - record.times[i];
        total += (spec.running)(&record.states[i], &record.controls[i], record.times[i]) * dt;
    }
    total += (spec.terminal)(record.states.last().unwrap());
    Ok(total)
}

/// Mean and standard error of a statistic evaluated over `n` independent
/// noise streams (base_seed, 0..n). Deterministic in `n` and `base_seed`
/// and independent of thread count. The standard error uses the sample
/// variance and is zero when n = 1.
pub fn mc_mean_stderr<F>(n: usize, base_seed: u64, f: F) -> Result<(f64, f64)>
where
    F: Fn(&mut NoiseStream) -> Result<f64> + Sync,
{
    if n == 0 {
        return Err(Error::InvalidArgument(
            "Monte-Carlo estimate needs at least one sample".into(),
        ));
    }
    let samples: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|stream| {
            let mut noise = NoiseStream::new(base_seed, stream);
            f(&mut noise)
        })
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&samples))
}

fn mean_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte-Carlo estimate of the cost-to-go from (rho0, t0) under a protocol:
/// simulates to the horizon of `spec` and averages the path cost.
#[allow(clippy::too_many_arguments)]
pub fn estimate_cost_to_go(
    model: &SmeModel,
    protocol: &ControlProtocol,
    spec: &QuantumCostSpec,
    rho0: &DensityMatrix,
    t0: f64,
    dt: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<(f64, f64)> {
    if !(spec.horizon > t0) {
        return Err(Error::InvalidArgument(format!(
            "horizon {} must exceed the start time {t0}",
            spec.horizon
        )));
    }
    mc_mean_stderr(n_paths, base_seed, |noise| {
        let record =
            simulate_trajectory(model, protocol, rho0, t0, spec.horizon, dt, noise)?;
        path_cost(spec, &record)
    })
}

/// CRN paired comparison of two protocols: runs both on the *same* noise
/// stream per sample and averages the cost difference (first minus second).
/// Shared randomness cancels most of the path-to-path variance, so the
/// returned standard error is usually far below that of independent runs.
#[allow(clippy::too_many_arguments)]
pub fn compare_protocols_crn(
    model: &SmeModel,
    protocol_a: &ControlProtocol,
    protocol_b: &ControlProtocol,
    spec: &QuantumCostSpec,
    rho0: &DensityMatrix,
    t0: f64,
    dt: f64,
    n_paths: usize,
    base_seed: u64,
) -> Result<(f64, f64)> {
    if !(spec.horizon > t0) {
        return Err(Error::InvalidArgument(format!(
            "horizon {} must exceed the start time {t0}",
            spec.horizon
        )));
    }
    mc_mean_stderr(n_paths, base_seed, |noise| {
        let mut noise_b = NoiseStream::new(noise.seed(), noise.stream());
        let ra = simulate_trajectory(model, protocol_a, rho0, t0, spec.horizon, dt, noise)?;
        let rb =
            simulate_trajectory(model, protocol_b, rho0, t0, spec.horizon, dt, &mut noise_b)?;
        Ok(path_cost(spec, &ra)? - path_cost(spec, &rb)?)
    })
}

type ValueFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
type GradientFn = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;
type ScalarFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
type HessianFn = Arc<dyn Fn(&[f64], f64) -> DMatrix<f64> + Send + Sync>;

/// A candidate cost-to-go surface C(x, t) with derivative access.
///
/// Spatial gradient, time derivative, and Hessian use supplied closed forms
/// when present and central finite differences otherwise (step scaled to
/// the coordinate magnitude).
#[derive(Clone)]
pub struct CostField {
    dim: usize,
    value: ValueFn,
    gradient: Option<GradientFn>,
    time_derivative: Option<ScalarFn>,
    hessian: Option<HessianFn>,
}

/// One-stop evaluation of a cost field at a point.
#[derive(Clone, Debug)]
pub struct CostQuery {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub time_derivative: f64,
    pub hessian: DMatrix<f64>,
}

impl CostField {
    pub fn new(dim: usize, value: ValueFn) -> Self {
        Self {
            dim,
            value,
            gradient: None,
            time_derivative: None,
            hessian: None,
        }
    }

    pub fn with_gradient(mut self, g: GradientFn) -> Self {
        self.gradient = Some(g);
        self
    }

    pub fn with_time_derivative(mut self, dt: ScalarFn) -> Self {
        self.time_derivative = Some(dt);
        self
    }

    pub fn with_hessian(mut self, h: HessianFn) -> Self {
        self.hessian = Some(h);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_closed_derivatives(&self) -> bool {
        self.gradient.is_some() && self.time_derivative.is_some() && self.hessian.is_some()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "cost field expects {} coordinates, got {}",
                self.dim,
                x.len()
            )));
        }
        Ok(())
    }

    pub fn value(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_dim(x)?;
        Ok((self.value)(x, t))
    }

    /// Finite-difference step for coordinate magnitude `s`.
    fn fd_step(s: f64) -> f64 {
        1e-4 * s.abs().max(1.0)
    }

    pub fn gradient(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        if let Some(g) = &self.gradient {
            return Ok(g(x, t));
        }
        let mut out = vec![0.0; self.dim];
        let mut xp = x.to_vec();
        for i in 0..self.dim {
            let h = Self::fd_step(x[i]);
            xp[i] = x[i] + h;
            let fp = (self.value)(&xp, t);
            xp[i] = x[i] - h;
            let fm = (self.value)(&xp, t);
            xp[i] = x[i];
            out[i] = (fp - fm) / (2.0 * h);
        }
        Ok(out)
    }

    pub fn time_derivative(&self, x: &[f64], t: f64) -> Result<f64> {
        self.check_dim(x)?;
        if let Some(dt) = &self.time_derivative {
            return Ok(dt(x, t));
        }
        let h = Self::fd_step(t);
        Ok(((self.value)(x, t + h) - (self.value)(x, t - h)) / (2.0 * h))
    }

    pub fn hessian(&self, x: &[f64], t: f64) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        if let Some(h) = &self.hessian {
            return Ok(h(x, t));
        }
        if self.gradient.is_some() {
            // Differentiate the closed-form gradient; symmetrize.
            let mut jac = DMatrix::zeros(self.dim, self.dim);
            let mut xp = x.to_vec();
            for j in 0..self.dim {
                let h = Self::fd_step(x[j]);
                xp[j] = x[j] + h;
                let gp = self.gradient(&xp, t)?;
                xp[j] = x[j] - h;
                let gm = self.gradient(&xp, t)?;
                xp[j] = x[j];
                for i in 0..self.dim {
                    jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
                }
            }
            return Ok(0.5 * (&jac + jac.transpose()));
        }
        // Second differences of the value.
        let f0 = (self.value)(x, t);
        let mut hess = DMatrix::zeros(self.dim, self.dim);
        let mut xp = x.to_vec();
        for i in 0..self.dim {
            let hi = Self::fd_step(x[i]);
            xp[i] = x[i] + hi;
            let fp = (self.value)(&xp, t);
            xp[i] = x[i] - hi;
            let fm = (self.value)(&xp, t);
            xp[i] = x[i];
            hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hi * hi);
            for j in (i + 1)..self.dim {
                let hj = Self::fd_step(x[j]);
                xp[i] = x[i] + hi;
                xp[j] = x[j] + hj;
                let fpp = (self.value)(&xp, t);
                xp[j] = x[j] - hj;
                let fpm = (self.value)(&xp, t);
                xp[i] = x[i] - hi;
                let fmm = (self.value)(&xp, t);
                xp[j] = x[j] + hj;
                let fmp = (self.value)(&xp, t);
                xp[i] = x[i];
                xp[j] = x[j];
                let v = (fpp - fpm - fmp + fmm) / (4.0 * hi * hj);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        Ok(hess)
    }
}

/// Evaluates value, gradient, time derivative, and Hessian in one call.
pub fn query_cost_field(field: &CostField, x: &[f64], t: f64) -> Result<CostQuery> {
    Ok(CostQuery {
        value: field.value(x, t)?,
        gradient: field.gradient(x, t)?,
        time_derivative: field.time_derivative(x, t)?,
        hessian: field.hessian(x, t)?,
    })
}
