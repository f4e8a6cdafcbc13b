//! Backward dynamic-programming solvers on dense state grids.
//!
//! Two solvers live here. [`solve_backward`] integrates the finite-horizon
//! dynamic-programming equation ∂C/∂t = max_v G(x, v, ∇C, ∂²C) backward
//! from the terminal cost, producing the optimal cost-to-go and the argmax
//! policy on a grid. [`solve_time_optimal`] iterates the stationary
//! first-passage equation max_v G_drift = 1 to a fixed point, producing the
//! minimum expected time to reach a target set.
//!
//! Both solvers use explicit time stepping with central/one-sided
//! differences and local Lax–Friedrichs dissipation on the advective part:
//! each axis receives numerical viscosity ½ α_i(x) h_i ∂²C/∂x_i², where
//! α_i(x) is the largest drift speed over the action set at that node.
//! This keeps the update monotone under the step bound
//! dt · Σ_i (α_i/h_i + D_ii/h_i²) ≤ safety, which the solvers enforce by
//! substepping; genuine diffusion adds the usual explicit h² constraint.
//! Accuracy is first order in h near kinks and edges (boundary stencils
//! fall back to one-sided differences and zero ghost curvature), so grids
//! should extend a few cells beyond the region of interest.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde_json::json;
use std::io::Write as _;

use crate::control::{ControlRegion, ControlVector};
use crate::error::{Error, Result};
use crate::grid::{StateGrid, TimeGrid};
use crate::hjb::{g_value, Dynamics, RunningCostFn, TerminalCostFn};

/// Options for the finite-horizon backward solver.
#[derive(Clone, Debug)]
pub struct DpOptions {
    /// Fraction of the monotonicity step bound actually used.
    pub cfl_safety: f64,
    /// Hard cap on internal substeps per macro step.
    pub max_substeps: usize,
    /// Two actions within this of the maximum count as a tie.
    pub tie_tol: f64,
    /// Lax–Friedrichs dissipation on the advective part (disable only for
    /// diffusion-dominated problems where the extra viscosity is unwanted).
    pub dissipation: bool,
}

impl Default for DpOptions {
    fn default() -> Self {
        Self {
            cfl_safety: 0.9,
            max_substeps: 20_000,
            tie_tol: 1e-10,
            dissipation: true,
        }
    }
}

/// Discretizes a control region into an action list: the members of a
/// discrete region, or a uniform lattice with `per_axis` points along every
/// free component of a continuous one.
pub fn action_lattice(region: &ControlRegion, per_axis: usize) -> Result<Vec<ControlVector>> {
    if let Some(members) = &region.discrete {
        return Ok(members.clone());
    }
    if per_axis < 2 {
        return Err(Error::InvalidArgument(
            "an action lattice needs at least 2 points per free axis".into(),
        ));
    }
    let bounds = region.flat_bounds();
    let free = region.free_components();
    let total: f64 = (per_axis as f64).powi(free.len() as i32);
    if total > 1e6 {
        return Err(Error::InvalidArgument(format!(
            "action lattice with {per_axis} points on {} free axes is too large",
            free.len()
        )));
    }
    let mut flat: Vec<f64> = bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect();
    let mut actions = Vec::new();
    let n_combo = per_axis.pow(free.len() as u32);
    for combo in 0..n_combo.max(1) {
        let mut c = combo;
        for &axis in &free {
            let i = c % per_axis;
            c /= per_axis;
            let (lo, hi) = bounds[axis];
            flat[axis] = lo + (hi - lo) * i as f64 / (per_axis - 1) as f64;
        }
        actions.push(ControlVector::from_flat(&flat, region)?);
    }
    Ok(actions)
}

/// Row-major strides matching [`StateGrid::flat_index`].
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Per-axis finite differences of a grid function at one node: value,
/// first derivative (central inside, one-sided at edges), and second
/// derivative (nonuniform 3-point inside, zero at edges, matching a linear
/// ghost extrapolation).
struct NodeStencil {
    grad: Vec<f64>,
    second: Vec<f64>,
    /// Local mean spacing per axis, for dissipation scaling.
    h_local: Vec<f64>,
}

fn node_stencil(
    values: &[f64],
    axes: &[Vec<f64>],
    strides: &[usize],
    multi: &[usize],
    flat: usize,
) -> NodeStencil {
    let d = axes.len();
    let mut grad = vec![0.0; d];
    let mut second = vec![0.0; d];
    let mut h_local = vec![0.0; d];
    for ax in 0..d {
        let coords = &axes[ax];
        let i = multi[ax];
        let n = coords.len();
        let c0 = values[flat];
        if i > 0 && i + 1 < n {
            let (cm, cp) = (values[flat - strides[ax]], values[flat + strides[ax]]);
            let hm = coords[i] - coords[i - 1];
            let hp = coords[i + 1] - coords[i];
            grad[ax] = (cp - cm) / (hm + hp);
            second[ax] =
                2.0 * (cm / (hm * (hm + hp)) - c0 / (hm * hp) + cp / (hp * (hm + hp)));
            h_local[ax] = 0.5 * (hm + hp);
        } else if i == 0 {
            let cp = values[flat + strides[ax]];
            let hp = coords[1] - coords[0];
            grad[ax] = (cp - c0) / hp;
            h_local[ax] = hp;
        } else {
            let cm = values[flat - strides[ax]];
            let hm = coords[n - 1] - coords[n - 2];
            grad[ax] = (c0 - cm) / hm;
            h_local[ax] = hm;
        }
    }
    NodeStencil {
        grad,
        second,
        h_local,
    }
}

/// Full spatial Hessian: diagonal from the per-axis second differences,
/// off-diagonal from central cross differences (zero when a boundary
/// blocks the cross stencil).
fn node_hessian(
    values: &[f64],
    axes: &[Vec<f64>],
    strides: &[usize],
    multi: &[usize],
    flat: usize,
    stencil: &NodeStencil,
) -> DMatrix<f64> {
    let d = axes.len();
    let mut h = DMatrix::zeros(d, d);
    for ax in 0..d {
        h[(ax, ax)] = stencil.second[ax];
    }
    for a in 0..d {
        for b in (a + 1)..d {
            let (ia, ib) = (multi[a], multi[b]);
            if ia == 0 || ia + 1 >= axes[a].len() || ib == 0 || ib + 1 >= axes[b].len() {
                continue;
            }
            let (sa, sb) = (strides[a], strides[b]);
            let da = axes[a][ia + 1] - axes[a][ia - 1];
            let db = axes[b][ib + 1] - axes[b][ib - 1];
            let cross = (values[flat + sa + sb] - values[flat + sa - sb]
                - values[flat - sa + sb]
                + values[flat - sa - sb])
                / (da * db);
            h[(a, b)] = cross;
            h[(b, a)] = cross;
        }
    }
    h
}

/// Bounds on drift speed per axis and diffusion magnitudes, sampled over
/// nodes, actions, and times, for the stability step bound.
struct SpeedBounds {
    alpha: Vec<f64>,
    diff_diag: Vec<f64>,
    diff_cross: f64,
    has_diffusion: bool,
}

fn estimate_speeds(
    dynamics: &dyn Dynamics,
    actions: &[ControlVector],
    grid: &StateGrid,
    times: &[f64],
) -> Result<SpeedBounds> {
    let d = grid.dim();
    let mut alpha = vec![0.0f64; d];
    let mut diff_diag = vec![0.0f64; d];
    let mut diff_cross = 0.0f64;
    let stride = (grid.len() / 4000).max(1);
    let shape = grid.shape();
    for flat in (0..grid.len()).step_by(stride) {
        let multi = grid.multi_index(flat)?;
        let x = grid.node(&multi)?;
        for &t in times {
            for v in actions {
                let a = dynamics.drift(&x, v, t)?;
                for (ai, m) in a.iter().zip(alpha.iter_mut()) {
                    *m = m.max(ai.abs());
                }
                let b = dynamics.diffusion(&x, v, t)?;
                if b.ncols() > 0 {
                    let dmat = &b * b.transpose();
                    for i in 0..d {
                        diff_diag[i] = diff_diag[i].max(dmat[(i, i)].abs());
                        for j in 0..d {
                            if i != j {
                                diff_cross = diff_cross.max(dmat[(i, j)].abs());
                            }
                        }
                    }
                }
            }
        }
        let _ = &shape;
    }
    let has_diffusion = diff_diag.iter().any(|v| *v > 0.0) || diff_cross > 0.0;
    Ok(SpeedBounds {
        alpha,
        diff_diag,
        diff_cross,
        has_diffusion,
    })
}

fn axis_min_spacings(grid: &StateGrid) -> Vec<f64> {
    grid.axes()
        .iter()
        .map(|coords| {
            coords
                .windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn stable_dt(bounds: &SpeedBounds, h_min: &[f64], safety: f64) -> f64 {
    let d = h_min.len();
    // Monotonicity of the explicit update: the center coefficient is
    // 1 − dt·Σᵢ(αᵢ/hᵢ + Dᵢᵢ/hᵢ²) − (cross terms); keep it nonnegative.
    let mut rate = 0.0;
    for i in 0..d {
        rate += bounds.alpha[i] / h_min[i];
        rate += bounds.diff_diag[i] / (h_min[i] * h_min[i]);
    }
    for i in 0..d {
        for j in 0..d {
            if i != j {
                rate += bounds.diff_cross / (h_min[i] * h_min[j]);
            }
        }
    }
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        safety / rate
    }
}

/// Cost-to-go values, argmax policies, and tie flags on a space–time grid.
#[derive(Clone, Debug)]
pub struct ValueField {
    grid: StateGrid,
    times: Vec<f64>,
    /// values[k][node] at times[k]; level `times.len()-1` is terminal.
    values: Vec<Vec<f64>>,
    /// policies[k][node]: index into `actions` used stepping from level
    /// k+1 down into level k.
    policies: Vec<Vec<u16>>,
    degenerate: Vec<Vec<bool>>,
    actions: Vec<ControlVector>,
}

impl ValueField {
    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn actions(&self) -> &[ControlVector] {
        &self.actions
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn policy_level(&self, k: usize) -> &[u16] {
        &self.policies[k]
    }

    pub fn degenerate_level(&self, k: usize) -> &[bool] {
        &self.degenerate[k]
    }

    /// Multilinear in space, linear in time.
    pub fn value_at(&self, x: &[f64], t: f64) -> Result<f64> {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.grid.interpolate(&self.values[0], x);
        }
        if t >= self.times[n - 1] {
            return self.grid.interpolate(&self.values[n - 1], x);
        }
        let k = match self
            .times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
        {
            Ok(k) => return self.grid.interpolate(&self.values[k], x),
            Err(k) => k,
        };
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = (t - t0) / (t1 - t0);
        let v0 = self.grid.interpolate(&self.values[k - 1], x)?;
        let v1 = self.grid.interpolate(&self.values[k], x)?;
        Ok(v0 + w * (v1 - v0))
    }

    /// Action of the nearest node at the nearest decision level.
    pub fn policy_at(&self, x: &[f64], t: f64) -> Result<ControlVector> {
        let n_dec = self.policies.len();
        let k = self
            .times
            .iter()
            .take(n_dec)
            .enumerate()
            .min_by(|a, b| {
                (a.1 - t).abs().partial_cmp(&(b.1 - t).abs()).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        let multi = self.grid.nearest(x)?;
        let flat = self.grid.flat_index(&multi)?;
        Ok(self.actions[self.policies[k][flat] as usize].clone())
    }

    /// Fraction of (level, node) decisions where the maximum was tied.
    pub fn degeneracy_fraction(&self) -> f64 {
        let total: usize = self.degenerate.iter().map(|l| l.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let ties: usize = self
            .degenerate
            .iter()
            .map(|l| l.iter().filter(|b| **b).count())
            .sum();
        ties as f64 / total as f64
    }

    /// Writes one time level as CSV: node coordinates, value, action
    /// index, tie flag.
    pub fn write_slice_csv(&self, k: usize, path: &std::path::Path) -> Result<()> {
        if k >= self.times.len() {
            return Err(Error::InvalidArgument(format!(
                "level {k} out of range (have {})",
                self.times.len()
            )));
        }
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.grid.dim();
        for i in 0..d {
            write!(out, "x{i},")?;
        }
        writeln!(out, "value,action,tied")?;
        let has_policy = k < self.policies.len();
        for flat in 0..self.grid.len() {
            let multi = self.grid.multi_index(flat)?;
            let x = self.grid.node(&multi)?;
            for xi in &x {
                write!(out, "{xi},")?;
            }
            let (a, tie) = if has_policy {
                (
                    self.policies[k][flat] as i64,
                    self.degenerate[k][flat] as u8,
                )
            } else {
                (-1, 0)
            };
            writeln!(out, "{},{a},{tie}", self.values[k][flat])?;
        }
        Ok(())
    }

    /// JSON summary of the solve: grid extents, times, action count,
    /// degeneracy fraction, value range.
    pub fn manifest(&self) -> serde_json::Value {
        let axes: Vec<serde_json::Value> = self
            .grid
            .axes()
            .iter()
            .map(|c| json!({"min": c[0], "max": c[c.len()-1], "points": c.len()}))
            .collect();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for level in &self.values {
            for v in level {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        json!({
            "axes": axes,
            "t0": self.times[0],
            "t1": self.times[self.times.len()-1],
            "time_levels": self.times.len(),
            "actions": self.actions.len(),
            "degeneracy_fraction": self.degeneracy_fraction(),
            "value_min": lo,
            "value_max": hi,
        })
    }
}

/// Explicit backward integration of ∂C/∂t = max_v G with terminal data
/// C(·, T) = M, over a discrete action set.
///
/// The macro time grid fixes the stored levels; internally each macro step
/// is split into enough substeps to satisfy the monotonicity bound. The
/// solver refuses (with [`Error::Unstable`]) if that would exceed
/// `max_substeps`, rather than integrate an unstable scheme.
pub fn solve_backward(
    dynamics: &dyn Dynamics,
    running: Option<&RunningCostFn>,
    terminal: &TerminalCostFn,
    actions: &[ControlVector],
    grid: &StateGrid,
    times: &TimeGrid,
    opts: &DpOptions,
) -> Result<ValueField> {
    if actions.is_empty() {
        return Err(Error::InvalidArgument("empty action set".into()));
    }
    if actions.len() > u16::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "{} actions exceed the policy storage limit",
            actions.len()
        )));
    }
    if grid.dim() != dynamics.dim() {
        return Err(Error::DimensionMismatch(format!(
            "grid dimension {} does not match dynamics dimension {}",
            grid.dim(),
            dynamics.dim()
        )));
    }
    let t_nodes = times.times();
    let n_levels = t_nodes.len();
    let shape = grid.shape();
    let strd = strides(&shape);
    let axes = grid.axes().to_vec();
    let h_min = axis_min_spacings(grid);
    let speed_times = [
        t_nodes[0],
        0.5 * (t_nodes[0] + t_nodes[n_levels - 1]),
        t_nodes[n_levels - 1],
    ];
    let bounds = estimate_speeds(dynamics, actions, grid, &speed_times)?;
    let dt_max = stable_dt(&bounds, &h_min, opts.cfl_safety);

    let mut terminal_level = vec![0.0f64; grid.len()];
    for (flat, slot) in terminal_level.iter_mut().enumerate() {
        let multi = grid.multi_index(flat)?;
        *slot = terminal(&grid.node(&multi)?);
    }

    let mut values = vec![Vec::new(); n_levels];
    let mut policies = vec![Vec::new(); n_levels - 1];
    let mut degenerate = vec![Vec::new(); n_levels - 1];
    values[n_levels - 1] = terminal_level;

    let zero_hess = DMatrix::zeros(grid.dim(), grid.dim());
    for k in (1..n_levels).rev() {
        let span = t_nodes[k] - t_nodes[k - 1];
        let m = if dt_max.is_finite() {
            (span / dt_max).ceil() as usize
        } else {
            1
        }
        .max(1);
        if m > opts.max_substeps {
            return Err(Error::Unstable(format!(
                "macro step {span:.3e} needs {m} substeps (cap {}); refine the time grid \
                 or coarsen the state grid",
                opts.max_substeps
            )));
        }
        let dt = span / m as f64;
        let mut cur = values[k].clone();
        let mut level_policy = vec![0u16; grid.len()];
        let mut level_tie = vec![false; grid.len()];
        for j in 0..m {
            let t_eval = t_nodes[k] - j as f64 * dt;
            let stepped: Result<Vec<(f64, u16, bool)>> = (0..grid.len())
                .into_par_iter()
                .map(|flat| {
                    let multi = grid.multi_index(flat)?;
                    let x = grid.node(&multi)?;
                    let st = node_stencil(&cur, &axes, &strd, &multi, flat);
                    let hess = if bounds.has_diffusion {
                        node_hessian(&cur, &axes, &strd, &multi, flat, &st)
                    } else {
                        zero_hess.clone()
                    };
                    let mut gs = Vec::with_capacity(actions.len());
                    let mut best = f64::NEG_INFINITY;
                    let mut alpha_local = vec![0.0f64; axes.len()];
                    for v in actions {
                        let drift = dynamics.drift(&x, v, t_eval)?;
                        for (al, dr) in alpha_local.iter_mut().zip(&drift) {
                            *al = al.max(dr.abs());
                        }
                        let g = g_value(dynamics, running, &x, v, t_eval, &st.grad, &hess)?;
                        gs.push(g);
                        best = best.max(g);
                    }
                    // Ties are resolved toward the smallest action index,
                    // so a deliberately listed averaged/default action wins
                    // on degenerate maxima.
                    let cut = best - opts.tie_tol * best.abs().max(1.0);
                    let best_a = gs.iter().position(|g| *g >= cut).unwrap() as u16;
                    let tied = gs
                        .iter()
                        .enumerate()
                        .filter(|(i, g)| *i != best_a as usize && **g >= cut)
                        .count()
                        > 0;
                    let mut new_v = cur[flat] - dt * best;
                    if opts.dissipation {
                        for ax in 0..axes.len() {
                            new_v += dt
                                * 0.5
                                * alpha_local[ax]
                                * st.h_local[ax]
                                * st.second[ax];
                        }
                    }
                    if !new_v.is_finite() {
                        return Err(Error::Unstable(format!(
                            "value became non-finite at node {flat} (t = {t_eval:.6})"
                        )));
                    }
                    Ok((new_v, best_a, tied))
                })
                .collect();
            let stepped = stepped?;
            for (flat, (v, a, tie)) in stepped.into_iter().enumerate() {
                cur[flat] = v;
                level_policy[flat] = a;
                level_tie[flat] = tie;
            }
        }
        values[k - 1] = cur;
        policies[k - 1] = level_policy;
        degenerate[k - 1] = level_tie;
    }

    Ok(ValueField {
        grid: grid.clone(),
        times: t_nodes,
        values,
        policies,
        degenerate,
        actions: actions.to_vec(),
    })
}

/// Options for the stationary first-passage solver.
#[derive(Clone, Debug)]
pub struct TimeOptimalOptions {
    pub cfl_safety: f64,
    pub max_iters: usize,
    /// Convergence: largest per-node update divided by the pseudo-time
    /// step must fall below this.
    pub residual_tol: f64,
    /// Values are clamped here; clamped nodes are flagged unreachable and
    /// excluded from the convergence measure.
    pub value_cap: f64,
    pub tie_tol: f64,
}

impl Default for TimeOptimalOptions {
    fn default() -> Self {
        Self {
            cfl_safety: 0.5,
            max_iters: 100_000,
            residual_tol: 1e-10,
            value_cap: 1e6,
            tie_tol: 1e-10,
        }
    }
}

/// Minimum-time-to-target values on a grid.
#[derive(Clone, Debug)]
pub struct StationaryField {
    grid: StateGrid,
    values: Vec<f64>,
    policies: Vec<u16>,
    in_target: Vec<bool>,
    unreachable: Vec<bool>,
    /// Last-sweep update divided by the pseudo-time step: the discrete
    /// stationarity defect per node.
    residuals: Vec<f64>,
    actions: Vec<ControlVector>,
    pub iterations: usize,
    pub converged: bool,
}

impl StationaryField {
    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn in_target(&self) -> &[bool] {
        &self.in_target
    }

    pub fn unreachable(&self) -> &[bool] {
        &self.unreachable
    }

    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn value_at(&self, x: &[f64]) -> Result<f64> {
        self.grid.interpolate(&self.values, x)
    }

    pub fn policy_at(&self, x: &[f64]) -> Result<ControlVector> {
        let multi = self.grid.nearest(x)?;
        let flat = self.grid.flat_index(&multi)?;
        Ok(self.actions[self.policies[flat] as usize].clone())
    }

    pub fn policy_index(&self, flat: usize) -> usize {
        self.policies[flat] as usize
    }

    /// Largest stationarity defect over reachable non-target nodes.
    pub fn max_interior_residual(&self) -> f64 {
        self.residuals
            .iter()
            .zip(self.in_target.iter().zip(&self.unreachable))
            .filter(|(_, (tgt, cap))| !**tgt && !**cap)
            .map(|(r, _)| r.abs())
            .fold(0.0, f64::max)
    }

    pub fn manifest(&self) -> serde_json::Value {
        let axes: Vec<serde_json::Value> = self
            .grid
            .axes()
            .iter()
            .map(|c| json!({"min": c[0], "max": c[c.len()-1], "points": c.len()}))
            .collect();
        json!({
            "axes": axes,
            "actions": self.actions.len(),
            "iterations": self.iterations,
            "converged": self.converged,
            "max_interior_residual": self.max_interior_residual(),
            "target_nodes": self.in_target.iter().filter(|b| **b).count(),
            "unreachable_nodes": self.unreachable.iter().filter(|b| **b).count(),
        })
    }
}

/// Value iteration for the stationary minimum-time equation
/// max_v [−A·∇V − ½ tr(Bᵀ(∂²V)B)] = 1 with V = 0 on the target set
/// {x : target(x) ≤ 0}.
///
/// The iteration marches V ← V + dt (1 − max_v G_drift) with local
/// Lax–Friedrichs dissipation until the largest update stalls below
/// `residual_tol · dt`. Nodes that climb to `value_cap` are flagged
/// unreachable. Returns [`Error::NoConvergence`] if `max_iters` sweeps do
/// not reach the tolerance.
pub fn solve_time_optimal(
    dynamics: &dyn Dynamics,
    target: &(dyn Fn(&[f64]) -> f64 + Sync),
    actions: &[ControlVector],
    grid: &StateGrid,
    opts: &TimeOptimalOptions,
) -> Result<StationaryField> {
    if actions.is_empty() {
        return Err(Error::InvalidArgument("empty action set".into()));
    }
    if grid.dim() != dynamics.dim() {
        return Err(Error::DimensionMismatch(format!(
            "grid dimension {} does not match dynamics dimension {}",
            grid.dim(),
            dynamics.dim()
        )));
    }
    let shape = grid.shape();
    let strd = strides(&shape);
    let axes = grid.axes().to_vec();
    let h_min = axis_min_spacings(grid);
    let bounds = estimate_speeds(dynamics, actions, grid, &[0.0])?;
    let dt = stable_dt(&bounds, &h_min, opts.cfl_safety);
    if !dt.is_finite() {
        return Err(Error::InvalidArgument(
            "dynamics have zero speed everywhere; the minimum-time problem is vacuous".into(),
        ));
    }

    let mut in_target = vec![false; grid.len()];
    for (flat, slot) in in_target.iter_mut().enumerate() {
        let multi = grid.multi_index(flat)?;
        *slot = target(&grid.node(&multi)?) <= 0.0;
    }
    if !in_target.iter().any(|b| *b) {
        return Err(Error::InvalidArgument(
            "no grid node lies in the target set".into(),
        ));
    }

    let mut values = vec![0.0f64; grid.len()];
    let mut policies = vec![0u16; grid.len()];
    let mut residuals = vec![0.0f64; grid.len()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        iterations += 1;
        let stepped: Result<Vec<(f64, u16, f64)>> = (0..grid.len())
            .into_par_iter()
            .map(|flat| {
                if in_target[flat] {
                    return Ok((0.0, 0u16, 0.0));
                }
                let multi = grid.multi_index(flat)?;
                let x = grid.node(&multi)?;
                let st = node_stencil(&values, &axes, &strd, &multi, flat);
                let hess = if bounds.has_diffusion {
                    node_hessian(&values, &axes, &strd, &multi, flat, &st)
                } else {
                    DMatrix::zeros(axes.len(), axes.len())
                };
                let mut best = f64::NEG_INFINITY;
                let mut best_a = 0u16;
                let mut alpha_local = vec![0.0f64; axes.len()];
                for (ai, v) in actions.iter().enumerate() {
                    let drift = dynamics.drift(&x, v, 0.0)?;
                    for (al, dr) in alpha_local.iter_mut().zip(&drift) {
                        *al = al.max(dr.abs());
                    }
                    let g = g_value(dynamics, None, &x, v, 0.0, &st.grad, &hess)?;
                    if g > best {
                        best = g;
                        best_a = ai as u16;
                    }
                }
                let mut update = dt * (1.0 - best);
                for ax in 0..axes.len() {
                    update += dt * 0.5 * alpha_local[ax] * st.h_local[ax] * st.second[ax];
                }
                let new_v = (values[flat] + update).clamp(0.0, opts.value_cap);
                if !new_v.is_finite() {
                    return Err(Error::Unstable(format!(
                        "minimum-time value became non-finite at node {flat}"
                    )));
                }
                Ok((new_v, best_a, (new_v - values[flat]) / dt))
            })
            .collect();
        let stepped = stepped?;
        let mut worst = 0.0f64;
        for (flat, (v, a, r)) in stepped.into_iter().enumerate() {
            values[flat] = v;
            policies[flat] = a;
            residuals[flat] = r;
            if v < opts.value_cap {
                worst = worst.max(r.abs());
            }
        }
        if worst <= opts.residual_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence(format!(
            "minimum-time iteration still moving after {} sweeps",
            opts.max_iters
        )));
    }

    let unreachable: Vec<bool> = values.iter().map(|v| *v >= opts.value_cap).collect();
    Ok(StationaryField {
        grid: grid.clone(),
        values,
        policies,
        in_target,
        unreachable,
        residuals,
        actions: actions.to_vec(),
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use approx::assert_relative_eq;

    /// Controlled drift with additive noise: dx = v dt + σ dW.
    struct DriftDiffusion {
        sigma: f64,
    }
    impl Dynamics for DriftDiffusion {
        fn dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            1
        }
        fn drift(&self, _x: &[f64], v: &ControlVector, _t: f64) -> Result<Vec<f64>> {
            Ok(vec![v.mu[0]])
        }
        fn diffusion(&self, _x: &[f64], _v: &ControlVector, _t: f64) -> Result<DMatrix<f64>> {
            Ok(DMatrix::from_element(1, 1, self.sigma))
        }
    }

    /// Uncontrolled pure diffusion: the cost-to-go of terminal x² is
    /// x² + σ²(T − t) exactly, and the interior stencils reproduce
    /// quadratics exactly, so only boundary effects remain.
    #[test]
    fn pure_diffusion_reproduces_the_heat_solution() {
        let dynamics = DriftDiffusion { sigma: 0.3 };
        let actions = vec![ControlVector::coefficients(vec![0.0])];
        let grid = StateGrid::uniform(&[(-2.0, 2.0)], &[161]).unwrap();
        let times = TimeGrid::new(0.0, 0.5, 25).unwrap();
        let terminal = |x: &[f64]| x[0] * x[0];
        let field = solve_backward(
            &dynamics,
            None,
            &terminal,
            &actions,
            &grid,
            &times,
            &DpOptions::default(),
        )
        .unwrap();
        let sigma2 = 0.09;
        for &x in &[-1.0, -0.4, 0.0, 0.55, 1.0] {
            for &t in &[0.0, 0.2, 0.48] {
                let exact = x * x + sigma2 * (0.5 - t);
                let got = field.value_at(&[x], t).unwrap();
                assert_relative_eq!(got, exact, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    /// Quadratic regulator: dx = v dt + σ dW, running cost x² + v²,
    /// terminal cost x²/2. The cost-to-go is s(t)x² + m(t) with
    /// s(t) = tanh(T − t + atanh(1/2)) and
    /// m(t) = σ² ln[cosh(T − t + c)/cosh c], c = atanh(1/2), and the
    /// optimal feedback is v = −s(t)x.
    #[test]
    fn backward_solve_matches_the_riccati_cost() {
        let dynamics = DriftDiffusion { sigma: 0.3 };
        let region = ControlRegion::coefficient_box(vec![(-2.0, 2.0)]);
        let actions = action_lattice(&region, 41).unwrap();
        let grid = StateGrid::uniform(&[(-2.0, 2.0)], &[161]).unwrap();
        let times = TimeGrid::new(0.0, 0.5, 50).unwrap();
        let running: &RunningCostFn =
            &|x: &[f64], v: &ControlVector, _t: f64| x[0] * x[0] + v.mu[0] * v.mu[0];
        let terminal = |x: &[f64]| 0.5 * x[0] * x[0];
        let field = solve_backward(
            &dynamics,
            Some(running),
            &terminal,
            &actions,
            &grid,
            &times,
            &DpOptions::default(),
        )
        .unwrap();
        let c = 0.5f64.atanh();
        let s = |t: f64| ((0.5 - t) + c).tanh();
        let m = |t: f64| 0.09 * (((0.5 - t) + c).cosh().ln() - c.cosh().ln());
        // Scale-relative comparison on the interior, away from the
        // one-sided boundary stencils.
        let scale = s(0.0) * 2.25 + m(0.0);
        let mut worst = 0.0f64;
        for &x in &[-1.5, -1.0, -0.3, 0.0, 0.4, 0.9, 1.5] {
            for &t in &[0.0, 0.1, 0.25, 0.4] {
                let exact = s(t) * x * x + m(t);
                let got = field.value_at(&[x], t).unwrap();
                worst = worst.max((got - exact).abs() / scale);
            }
        }
        assert!(worst < 0.02, "worst scale-relative error {worst}");
        // The recorded policy tracks v* = −s(t)x to within the lattice
        // spacing plus discretization error.
        let dv = 4.0 / 40.0;
        for &x in &[-1.0, 0.5, 1.2] {
            let v = field.policy_at(&[x], 0.0).unwrap().mu[0];
            assert!(
                (v - (-s(0.0) * x)).abs() <= dv,
                "policy {v} vs exact {}",
                -s(0.0) * x
            );
        }
    }

    /// Adding a constant to the terminal cost shifts the whole field by
    /// that constant: the scheme is exact on this family, so any
    /// discrepancy would expose a bookkeeping bug.
    #[test]
    fn terminal_shift_propagates_exactly() {
        let dynamics = DriftDiffusion { sigma: 0.2 };
        let region = ControlRegion::coefficient_box(vec![(-1.0, 1.0)]);
        let actions = action_lattice(&region, 5).unwrap();
        let grid = StateGrid::uniform(&[(-1.0, 1.0)], &[41]).unwrap();
        let times = TimeGrid::new(0.0, 0.2, 10).unwrap();
        let running: &RunningCostFn =
            &|x: &[f64], _v: &ControlVector, _t: f64| x[0] * x[0];
        let base = |x: &[f64]| x[0].abs();
        let shifted = |x: &[f64]| x[0].abs() + 0.1;
        let f0 = solve_backward(
            &dynamics,
            Some(running),
            &base,
            &actions,
            &grid,
            &times,
            &DpOptions::default(),
        )
        .unwrap();
        let f1 = solve_backward(
            &dynamics,
            Some(running),
            &shifted,
            &actions,
            &grid,
            &times,
            &DpOptions::default(),
        )
        .unwrap();
        for k in 0..f0.times().len() {
            for (a, b) in f0.level(k).iter().zip(f1.level(k)) {
                assert_relative_eq!(b - a, 0.1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn solver_refuses_an_unstable_configuration() {
        let dynamics = DriftDiffusion { sigma: 1.0 };
        let actions = vec![ControlVector::coefficients(vec![0.0])];
        let grid = StateGrid::uniform(&[(-1.0, 1.0)], &[401]).unwrap();
        let times = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let opts = DpOptions {
            max_substeps: 3,
            ..DpOptions::default()
        };
        let err = solve_backward(
            &dynamics,
            None,
            &|x: &[f64]| x[0],
            &actions,
            &grid,
            &times,
            &opts,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Unstable(_)), "got {err:?}");
    }

    /// Controlled decay toward a radius: dx = −u x dt with u ∈ [0, 1] and
    /// target x ≤ x_c. Full drive u = 1 is optimal and the minimum time
    /// from x is ln(x / x_c).
    struct RadialDecay;
    impl Dynamics for RadialDecay {
        fn dim(&self) -> usize {
            1
        }
        fn noise_dim(&self) -> usize {
            0
        }
        fn drift(&self, x: &[f64], v: &ControlVector, _t: f64) -> Result<Vec<f64>> {
            Ok(vec![-v.mu[0] * x[0]])
        }
        fn diffusion(&self, _x: &[f64], _v: &ControlVector, _t: f64) -> Result<DMatrix<f64>> {
            Ok(DMatrix::zeros(1, 0))
        }
    }

    #[test]
    fn minimum_time_matches_the_logarithmic_solution() {
        let region = ControlRegion::coefficient_box(vec![(0.0, 1.0)]);
        let actions = action_lattice(&region, 3).unwrap();
        let grid = StateGrid::uniform(&[(0.3, 2.0)], &[281]).unwrap();
        let x_c = 0.5;
        let target = |x: &[f64]| x[0] - x_c;
        let field = solve_time_optimal(
            &RadialDecay,
            &target,
            &actions,
            &grid,
            &TimeOptimalOptions::default(),
        )
        .unwrap();
        assert!(field.converged);
        assert!(field.max_interior_residual() <= 1e-8);
        let scale = (2.0f64 / x_c).ln();
        let mut worst = 0.0f64;
        for &x in &[0.6, 0.8, 1.0, 1.3, 1.7, 1.95] {
            let exact = (x / x_c).ln();
            let got = field.value_at(&[x]).unwrap();
            worst = worst.max((got - exact).abs() / scale);
        }
        assert!(worst < 0.02, "worst scale-relative error {worst}");
        // Full drive everywhere outside the target.
        for flat in 0..field.grid().len() {
            if field.in_target()[flat] || field.unreachable()[flat] {
                continue;
            }
            let a = field.policy_index(flat);
            assert_eq!(field.actions[a].mu[0], 1.0, "node {flat} not at full drive");
        }
    }

    #[test]
    fn degenerate_maxima_are_flagged() {
        // With zero running cost and a flat field region, every action
        // yields G = 0 on the core: ties must be recorded there.
        struct Transport;
        impl Dynamics for Transport {
            fn dim(&self) -> usize {
                1
            }
            fn noise_dim(&self) -> usize {
                0
            }
            fn drift(&self, _x: &[f64], v: &ControlVector, _t: f64) -> Result<Vec<f64>> {
                Ok(vec![v.mu[0]])
            }
            fn diffusion(
                &self,
                _x: &[f64],
                _v: &ControlVector,
                _t: f64,
            ) -> Result<DMatrix<f64>> {
                Ok(DMatrix::zeros(1, 0))
            }
        }
        let region = ControlRegion::coefficient_box(vec![(-1.0, 1.0)]);
        let actions = action_lattice(&region, 3).unwrap();
        let grid = StateGrid::uniform(&[(-2.0, 2.0)], &[201]).unwrap();
        let times = TimeGrid::new(0.0, 0.3, 15).unwrap();
        let terminal = |x: &[f64]| x[0].abs().max(1.0) - 1.0;
        let field = solve_backward(
            &Transport,
            None,
            &terminal,
            &actions,
            &grid,
            &times,
            &DpOptions::default(),
        )
        .unwrap();
        // Near the origin the terminal cost is flat and stays flat, so the
        // first backward step (last policy level) must record ties there.
        let level = field.times().len() - 2;
        let near_origin = field.grid().nearest(&[0.0]).unwrap();
        let flat = field.grid().flat_index(&near_origin).unwrap();
        assert!(field.degenerate_level(level)[flat]);
        assert!(field.degeneracy_fraction() > 0.0);
        // And the moving ramps are not tied.
        let ramp = field.grid().nearest(&[1.8]).unwrap();
        let rflat = field.grid().flat_index(&ramp).unwrap();
        assert!(!field.degenerate_level(level)[rflat]);
    }

    #[test]
    fn csv_slice_and_manifest_are_deterministic() {
        let dynamics = DriftDiffusion { sigma: 0.25 };
        let region = ControlRegion::coefficient_box(vec![(-1.0, 1.0)]);
        let actions = action_lattice(&region, 5).unwrap();
        let grid = StateGrid::uniform(&[(-1.0, 1.0)], &[21]).unwrap();
        let times = TimeGrid::new(0.0, 0.2, 5).unwrap();
        let running: &RunningCostFn =
            &|x: &[f64], v: &ControlVector, _t: f64| x[0] * x[0] + v.mu[0] * v.mu[0];
        let terminal = |x: &[f64]| 0.5 * x[0] * x[0];
        let solve = || {
            solve_backward(
                &dynamics,
                Some(running),
                &terminal,
                &actions,
                &grid,
                &times,
                &DpOptions::default(),
            )
            .unwrap()
        };
        let f0 = solve();
        let f1 = solve();
        let dir = std::env::temp_dir();
        let p0 = dir.join("dp_slice_run0.csv");
        let p1 = dir.join("dp_slice_run1.csv");
        f0.write_slice_csv(0, &p0).unwrap();
        f1.write_slice_csv(0, &p1).unwrap();
        let b0 = std::fs::read(&p0).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        assert_eq!(b0, b1);
        let text = String::from_utf8(b0).unwrap();
        assert!(text.starts_with("x0,value,action,tied"));
        assert_eq!(text.lines().count(), 1 + grid.len());
        assert_eq!(f0.manifest(), f1.manifest());
        assert_eq!(f0.manifest()["actions"], 5);
        std::fs::remove_file(p0).ok();
        std::fs::remove_file(p1).ok();
    }

    #[test]
    fn action_lattice_covers_boxes_and_discrete_sets() {
        let region = ControlRegion::coefficient_box(vec![(0.0, 1.0), (2.0, 2.0)]);
        let lattice = action_lattice(&region, 3).unwrap();
        // Second coordinate is frozen, so only the first is swept.
        assert_eq!(lattice.len(), 3);
        let mut firsts: Vec<f64> = lattice.iter().map(|v| v.mu[0]).collect();
        firsts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(firsts, vec![0.0, 0.5, 1.0]);
        assert!(lattice.iter().all(|v| v.mu[1] == 2.0));

        let discrete = ControlRegion::discrete_set(vec![
            ControlVector::coefficients(vec![0.1]),
            ControlVector::coefficients(vec![0.9]),
        ])
        .unwrap();
        let members = action_lattice(&discrete, 99).unwrap();
        assert_eq!(members.len(), 2);
        assert_eq!(members[0].mu[0], 0.1);
    }
}
