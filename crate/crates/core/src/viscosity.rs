//! Piecewise cost fields, parabolic semijets, and the relaxed verifier.
//!
//! Optimal cost-to-go surfaces are often only piecewise smooth: the pieces
//! meet along a kink locus where the Hessian (or even the gradient) jumps,
//! and the classic verification theorem does not apply there. The viscosity
//! framework replaces classical derivatives with one-sided test data. A
//! superjet (q, p, Q) at (x₀, t₀) bounds the function from above,
//!
//! f(x, t) ≤ f(x₀, t₀) + q·Δt + p·Δx + ½ Δxᵀ Q Δx + o(|Δt| + |Δx|²),
//!
//! and a subjet bounds it from below. A piecewise field is a viscosity
//! solution of the dynamic-programming equation when
//! q − max_v G(x, v, p, Q) is ≥ 0 on every superjet and ≤ 0 on every
//! subjet. Jet membership is decided here *exactly* from the one-sided
//! expansions of the active pieces: the first-order deficit must point
//! along the sector normal, and the Hessian deficit must be semidefinite
//! globally (at a first-order tie) or on the kink tangent plane.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControlRegion;
use crate::cost::CostField;
use crate::error::{Error, Result};
use crate::hjb::{
    g_value, hjb_residual, maximize_g, Dynamics, PointIssue, PolicyFn, RunningCostFn,
    TerminalCostFn, Verdict,
};
use crate::optim::NelderMeadOptions;

/// One smooth piece of a piecewise field: a region function σ (the piece is
/// active where σ ≥ 0, and σ = 0 is its boundary) and the smooth cost field
/// on that region. The field must evaluate on a neighborhood of the
/// region's closure, as closed-form formulas do.
#[derive(Clone)]
pub struct FieldPiece {
    pub name: String,
    pub region: std::sync::Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>,
    pub field: CostField,
}

/// A cost surface assembled from smooth pieces.
#[derive(Clone)]
pub struct PiecewiseField {
    dim: usize,
    pieces: Vec<FieldPiece>,
}

impl PiecewiseField {
    pub fn new(dim: usize, pieces: Vec<FieldPiece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidArgument(
                "piecewise field needs at least one piece".into(),
            ));
        }
        for p in &pieces {
            if p.field.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "piece '{}' has dimension {}, field has {dim}",
                    p.name,
                    p.field.dim()
                )));
            }
        }
        Ok(Self { dim, pieces })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pieces(&self) -> &[FieldPiece] {
        &self.pieces
    }

    /// Indices of pieces active at (x, t), i.e. with σ ≥ −tol.
    pub fn active_pieces(&self, x: &[f64], t: f64, tol: f64) -> Vec<usize> {
        self.pieces
            .iter()
            .enumerate()
            .filter(|(_, p)| (p.region)(x, t) >= -tol)
            .map(|(i, _)| i)
            .collect()
    }

    /// Index of the authoritative piece at (x, t): the active piece with
    /// the largest σ.
    pub fn piece_at(&self, x: &[f64], t: f64, tol: f64) -> Result<usize> {
        self.pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p.region)(x, t)))
            .filter(|(_, s)| *s >= -tol)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(i, _)| i)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "point ({x:?}, {t}) lies outside every piece of the field"
                ))
            })
    }

    /// Field value from the authoritative piece.
    pub fn value(&self, x: &[f64], t: f64, tol: f64) -> Result<f64> {
        let i = self.piece_at(x, t, tol)?;
        self.pieces[i].field.value(x, t)
    }

    /// Largest pairwise disagreement between active pieces at a point.
    /// A genuine (continuous) piecewise field has defect ~0 on its kink
    /// locus; a broken one does not.
    pub fn continuity_defect(&self, x: &[f64], t: f64, tol: f64) -> Result<f64> {
        let active = self.active_pieces(x, t, tol);
        let mut worst: f64 = 0.0;
        for (a, &i) in active.iter().enumerate() {
            for &j in &active[a + 1..] {
                let vi = self.pieces[i].field.value(x, t)?;
                let vj = self.pieces[j].field.value(x, t)?;
                worst = worst.max((vi - vj).abs());
            }
        }
        Ok(worst)
    }
}

/// One-sided expansion data of a piece at a point: value, first-order data,
/// Hessian, and the sector normal (∇σ, pointing into the piece; `None` when
/// the point is interior to the piece).
#[derive(Clone, Debug)]
pub struct PieceExpansion {
    pub piece: usize,
    pub name: String,
    pub sigma: f64,
    pub value: f64,
    pub time_slope: f64,
    pub gradient: Vec<f64>,
    pub hessian: DMatrix<f64>,
    /// Unit (time, space) normal of the sector, or None for a full sector.
    pub normal: Option<(f64, Vec<f64>)>,
}

/// Expansions of every active piece at (x, t). `boundary_tol` decides both
/// piece activity (σ ≥ −tol) and whether a piece counts as interior
/// (σ > tol).
pub fn one_sided_expansions(
    field: &PiecewiseField,
    x: &[f64],
    t: f64,
    boundary_tol: f64,
) -> Result<Vec<PieceExpansion>> {
    if x.len() != field.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point has {} coordinates, field has {}",
            x.len(),
            field.dim()
        )));
    }
    let mut out = Vec::new();
    for (i, piece) in field.pieces.iter().enumerate() {
        let sigma = (piece.region)(x, t);
        if sigma < -boundary_tol {
            continue;
        }
        let normal = if sigma > boundary_tol {
            None
        } else {
            // Gradient of σ in (t, x) by central differences.
            let h = 1e-6;
            let nt = ((piece.region)(x, t + h) - (piece.region)(x, t - h)) / (2.0 * h);
            let mut nx = vec![0.0; x.len()];
            let mut xp = x.to_vec();
            for (j, nxj) in nx.iter_mut().enumerate() {
                let hj = 1e-6 * x[j].abs().max(1.0);
                xp[j] = x[j] + hj;
                let sp = (piece.region)(&xp, t);
                xp[j] = x[j] - hj;
                let sm = (piece.region)(&xp, t);
                xp[j] = x[j];
                *nxj = (sp - sm) / (2.0 * hj);
            }
            let norm = (nt * nt + nx.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if norm < 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "piece '{}' has a vanishing region gradient at its boundary near \
                     ({x:?}, {t})",
                    piece.name
                )));
            }
            for v in nx.iter_mut() {
                *v /= norm;
            }
            Some((nt / norm, nx))
        };
        out.push(PieceExpansion {
            piece: i,
            name: piece.name.clone(),
            sigma,
            value: piece.field.value(x, t)?,
            time_slope: piece.field.time_derivative(x, t)?,
            gradient: piece.field.gradient(x, t)?,
            hessian: piece.field.hessian(x, t)?,
            normal,
        });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "point ({x:?}, {t}) lies outside every piece of the field"
        )));
    }
    Ok(out)
}

/// A parabolic test jet: time slope q, spatial gradient p, Hessian bound Q.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub q: f64,
    pub p: Vec<f64>,
    pub big_q: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JetKind {
    Super,
    Sub,
}

/// Numeric tolerances for exact jet membership.
#[derive(Clone, Debug)]
pub struct JetTols {
    /// Allowed residual in the first-order alignment r = ∓κn.
    pub first_order: f64,
    /// Allowed eigenvalue excess in the semidefinite tests.
    pub quadratic: f64,
    /// A κ below this counts as a first-order tie.
    pub tie: f64,
    /// Piece-activity threshold for σ.
    pub boundary: f64,
}

impl Default for JetTols {
    fn default() -> Self {
        Self {
            first_order: 1e-9,
            quadratic: 1e-7,
            tie: 1e-9,
            boundary: 1e-7,
        }
    }
}

fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    nalgebra::SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Symmetric matrix absolute value V|Λ|Vᵀ.
fn matrix_abs(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, lam) in eig.eigenvalues.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        out += lam.abs() * &v * v.transpose();
    }
    out
}

/// Largest eigenvalue of z restricted to the hyperplane n_x·ξ = 0
/// (−∞ when that subspace is trivial; the full-space value when n_x ≈ 0).
fn restricted_max_eig(z: &DMatrix<f64>, n_x: &[f64]) -> f64 {
    let d = z.nrows();
    let norm = n_x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return max_eigenvalue(z);
    }
    if d == 1 {
        return f64::NEG_INFINITY;
    }
    // Orthonormal basis of the hyperplane by Gram–Schmidt against n̂.
    let nh: Vec<f64> = n_x.iter().map(|v| v / norm).collect();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d - 1);
    for i in 0..d {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        let dot_n: f64 = v.iter().zip(&nh).map(|(a, b)| a * b).sum();
        for (vj, nj) in v.iter_mut().zip(&nh) {
            *vj -= dot_n * nj;
        }
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vj, bj) in v.iter_mut().zip(b) {
                *vj -= dot * bj;
            }
        }
        let len = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if len > 1e-8 {
            for vj in v.iter_mut() {
                *vj /= len;
            }
            basis.push(v);
            if basis.len() == d - 1 {
                break;
            }
        }
    }
    let vmat = DMatrix::from_fn(d, basis.len(), |i, j| basis[j][i]);
    max_eigenvalue(&(vmat.transpose() * z * &vmat))
}

/// Exact membership test for a candidate jet at (x, t).
///
/// For each active piece with expansion (q_pc, p_pc, H) and unit sector
/// normal n (zero for an interior piece), the first-order deficit
/// r = (q_pc − q, p_pc − p) must equal −κn (superjets) or +κn (subjets)
/// with κ ≥ 0, and the Hessian deficit Z = H − Q must satisfy Z ⪯ 0
/// (superjets; ⪰ 0 for subjets) on the whole space at a first-order tie,
/// or on the kink tangent plane when κ > 0. The jet belongs to the set
/// exactly when every active piece passes.
pub fn jet_member(
    field: &PiecewiseField,
    x: &[f64],
    t: f64,
    jet: &Jet,
    kind: JetKind,
    tols: &JetTols,
) -> Result<bool> {
    if jet.p.len() != field.dim()
        || jet.big_q.nrows() != field.dim()
        || jet.big_q.ncols() != field.dim()
    {
        return Err(Error::DimensionMismatch(format!(
            "jet has gradient length {} and Hessian {}x{} for field dimension {}",
            jet.p.len(),
            jet.big_q.nrows(),
            jet.big_q.ncols(),
            field.dim()
        )));
    }
    let expansions = one_sided_expansions(field, x, t, tols.boundary)?;
    let sign = match kind {
        JetKind::Super => 1.0,
        JetKind::Sub => -1.0,
    };
    for e in &expansions {
        let mut r = vec![e.time_slope - jet.q];
        for (pc, p) in e.gradient.iter().zip(&jet.p) {
            r.push(pc - p);
        }
        let scale = 1.0 + jet.p.iter().map(|v| v.abs()).fold(jet.q.abs(), f64::max);
        let z = &e.hessian - &jet.big_q;
        // Signed deficit: superjets need ẑ = z ⪯ 0, subjets need −z ⪯ 0.
        let z_signed = &z * sign;
        match &e.normal {
            None => {
                // Full sector: r must vanish and the deficit must be
                // semidefinite on the whole space.
                if r.iter().any(|v| v.abs() > tols.first_order * scale) {
                    return Ok(false);
                }
                if max_eigenvalue(&z_signed) > tols.quadratic {
                    return Ok(false);
                }
            }
            Some((nt, nx)) => {
                let mut n = vec![*nt];
                n.extend_from_slice(nx);
                // r = −sign·κ·n, κ ≥ 0.
                let kappa_raw = -sign * r.iter().zip(&n).map(|(a, b)| a * b).sum::<f64>();
                if kappa_raw < -tols.first_order * scale {
                    return Ok(false);
                }
                let kappa = kappa_raw.max(0.0);
                let misfit = r
                    .iter()
                    .zip(&n)
                    .map(|(a, b)| (a + sign * kappa * b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if misfit > tols.first_order * scale {
                    return Ok(false);
                }
                let eig = if kappa <= tols.tie * scale {
                    max_eigenvalue(&z_signed)
                } else {
                    restricted_max_eig(&z_signed, nx)
                };
                if eig > tols.quadratic {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

/// Options for sampled viscosity checks.
#[derive(Clone, Debug)]
pub struct ViscosityOptions {
    /// Tolerance on the jet inequalities and classical residuals.
    pub tol: f64,
    /// Continuity tolerance across pieces on the kink locus.
    pub continuity_tol: f64,
    /// Terminal-condition tolerance.
    pub terminal_tol: f64,
    pub jet_tols: JetTols,
    /// Random PSD bumps tried per base Hessian.
    pub n_bumps: usize,
    /// Samples across a first-order jet window (kinked gradients).
    pub n_window_samples: usize,
    pub bump_scale: f64,
    pub seed: u64,
    pub nm: NelderMeadOptions,
}

impl Default for ViscosityOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            continuity_tol: 1e-8,
            terminal_tol: 1e-8,
            jet_tols: JetTols::default(),
            n_bumps: 16,
            n_window_samples: 7,
            bump_scale: 0.5,
            seed: 0,
            nm: NelderMeadOptions::default(),
        }
    }
}

/// Result of checking the viscosity inequalities at one point.
#[derive(Clone, Debug)]
pub struct PointCheck {
    pub at_kink: bool,
    pub continuity_defect: f64,
    pub super_jets_checked: usize,
    pub sub_jets_checked: usize,
    /// min over sampled superjets of q − max G (None if no superjet found).
    pub min_super_f: Option<f64>,
    /// max over sampled subjets of q − max G (None if no subjet found).
    pub max_sub_f: Option<f64>,
    pub super_ok: bool,
    pub sub_ok: bool,
}

fn candidate_first_orders(
    expansions: &[PieceExpansion],
    n_window: usize,
) -> Vec<(f64, Vec<f64>)> {
    let mut out: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut push = |q: f64, p: Vec<f64>| {
        if !out
            .iter()
            .any(|(q0, p0)| (q0 - q).abs() < 1e-12 && p0.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-12))
        {
            out.push((q, p));
        }
    };
    for e in expansions {
        push(e.time_slope, e.gradient.clone());
    }
    // Line segments between differing piece data sample the first-order
    // windows that appear at gradient kinks.
    for i in 0..expansions.len() {
        for j in (i + 1)..expansions.len() {
            let (a, b) = (&expansions[i], &expansions[j]);
            let differs = (a.time_slope - b.time_slope).abs() > 1e-12
                || a.gradient
                    .iter()
                    .zip(&b.gradient)
                    .any(|(x, y)| (x - y).abs() > 1e-12);
            if !differs {
                continue;
            }
            for k in 1..n_window {
                let s = k as f64 / n_window as f64;
                let q = a.time_slope + s * (b.time_slope - a.time_slope);
                let p: Vec<f64> = a
                    .gradient
                    .iter()
                    .zip(&b.gradient)
                    .map(|(x, y)| x + s * (y - x))
                    .collect();
                push(q, p);
            }
        }
    }
    out
}

fn candidate_hessians(
    expansions: &[PieceExpansion],
    dim: usize,
    opts: &ViscosityOptions,
    kind: JetKind,
) -> Vec<DMatrix<f64>> {
    let mut out: Vec<DMatrix<f64>> = Vec::new();
    for e in expansions {
        out.push(e.hessian.clone());
    }
    // Pairwise dominating/dominated combinations: (A+B)/2 ± |A−B|/2 lies
    // above (below) both A and B in the semidefinite order.
    for i in 0..expansions.len() {
        for j in (i + 1)..expansions.len() {
            let a = &expansions[i].hessian;
            let b = &expansions[j].hessian;
            let avg = 0.5 * (a + b);
            let spread = 0.5 * matrix_abs(&(a - b));
            out.push(match kind {
                JetKind::Super => &avg + &spread,
                JetKind::Sub => &avg - &spread,
            });
        }
    }
    out.push(DMatrix::zeros(dim, dim));
    // Random semidefinite bumps in the monotone direction: superjets stay
    // superjets under Q → Q + wwᵀ, subjets under Q → Q − wwᵀ.
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let base: Vec<DMatrix<f64>> = out.clone();
    for q0 in &base {
        for _ in 0..opts.n_bumps {
            let w: Vec<f64> = (0..dim)
                .map(|_| opts.bump_scale * (rng.random::<f64>() - 0.5) * 2.0)
                .collect();
            let wv = DMatrix::from_fn(dim, 1, |i, _| w[i]);
            let bump = &wv * wv.transpose();
            out.push(match kind {
                JetKind::Super => q0 + bump,
                JetKind::Sub => q0 - bump,
            });
        }
    }
    out
}

/// Samples candidate jets at one point and checks the viscosity
/// inequalities q − max_v G ≥ −tol on superjets and ≤ tol on subjets.
///
/// Candidates mix each piece's one-sided data, window samples between
/// differing first-order data, semidefinite envelope Hessians, and random
/// monotone bumps; only candidates passing the exact membership test are
/// scored. An empty jet set passes vacuously (as at a gradient kink, where
/// one of the two sets is genuinely empty).
pub fn viscosity_point_check(
    field: &PiecewiseField,
    dynamics: &dyn Dynamics,
    running: Option<&RunningCostFn>,
    region: &ControlRegion,
    x: &[f64],
    t: f64,
    opts: &ViscosityOptions,
) -> Result<PointCheck> {
    let expansions = one_sided_expansions(field, x, t, opts.jet_tols.boundary)?;
    let at_kink = expansions.len() > 1 || expansions.iter().any(|e| e.normal.is_some());
    let continuity_defect = field.continuity_defect(x, t, opts.jet_tols.boundary)?;

    let mut check = PointCheck {
        at_kink,
        continuity_defect,
        super_jets_checked: 0,
        sub_jets_checked: 0,
        min_super_f: None,
        max_sub_f: None,
        super_ok: true,
        sub_ok: true,
    };

    let firsts = candidate_first_orders(&expansions, opts.n_window_samples);
    for kind in [JetKind::Super, JetKind::Sub] {
        let hessians = candidate_hessians(&expansions, field.dim(), opts, kind);
        for (q, p) in &firsts {
            for big_q in &hessians {
                let jet = Jet {
                    q: *q,
                    p: p.clone(),
                    big_q: big_q.clone(),
                };
                if !jet_member(field, x, t, &jet, kind, &opts.jet_tols)? {
                    continue;
                }
                let gmax =
                    maximize_g(dynamics, running, region, x, t, p, big_q, &opts.nm)?;
                let f = q - gmax.value;
                match kind {
                    JetKind::Super => {
                        check.super_jets_checked += 1;
                        check.min_super_f =
                            Some(check.min_super_f.map_or(f, |m: f64| m.min(f)));
                    }
                    JetKind::Sub => {
                        check.sub_jets_checked += 1;
                        check.max_sub_f =
                            Some(check.max_sub_f.map_or(f, |m: f64| m.max(f)));
                    }
                }
            }
        }
    }
    check.super_ok = check.min_super_f.is_none_or(|f| f >= -opts.tol);
    check.sub_ok = check.max_sub_f.is_none_or(|f| f <= opts.tol);
    Ok(check)
}

/// A jet certificate found along the nominal trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JetWitness {
    pub x: Vec<f64>,
    pub t: f64,
    pub q: f64,
    pub p: Vec<f64>,
    pub hessian_rows: Vec<Vec<f64>>,
    /// |q − G(x, protocol control, p, Q)|.
    pub equation_defect: f64,
}

/// Report of the relaxed (viscosity) verification.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnhancedReport {
    pub verdict: Verdict,
    pub smooth_points_checked: usize,
    pub kink_points_checked: usize,
    pub path_points_checked: usize,
    pub max_smooth_residual: f64,
    pub max_continuity_defect: f64,
    pub max_terminal_defect: f64,
    /// Worst margin of q − max G over sampled superjets (want ≥ −tol).
    pub min_super_margin: Option<f64>,
    /// Worst margin over sampled subjets (want ≤ tol).
    pub max_sub_margin: Option<f64>,
    pub max_path_gap: f64,
    /// True when every kink sample has matching first-order data across
    /// its pieces: the certificate search then has a canonical jet.
    pub first_derivatives_continuous: bool,
    pub certificates: Vec<JetWitness>,
    pub issues: Vec<PointIssue>,
    pub notes: Vec<String>,
}

/// Relaxed verification for piecewise-smooth candidate optima.
///
/// Three conditions are checked:
/// 1. the field solves the equation classically at the smooth samples,
///    satisfies the jet inequalities at the kink samples (where the pieces
///    must also agree in value), and matches the terminal cost;
/// 2. the protocol attains the maximum of G along the nominal trajectory;
/// 3. at trajectory points where the field is not smooth, some superjet
///    satisfies the equation exactly with the protocol's control
///    (a jet certificate).
///
/// Violations of 1 or 2 yield `NotOptimal`; a missing certificate alone
/// yields `Inconclusive`; otherwise `Optimal`.
#[allow(clippy::too_many_arguments)]
pub fn verify_enhanced(
    field: &PiecewiseField,
    dynamics: &dyn Dynamics,
    running: Option<&RunningCostFn>,
    terminal: &TerminalCostFn,
    region: &ControlRegion,
    policy: &PolicyFn,
    smooth_samples: &[(Vec<f64>, f64)],
    kink_samples: &[(Vec<f64>, f64)],
    nominal_path: &[(f64, Vec<f64>)],
    horizon: f64,
    horizon_samples: &[Vec<f64>],
    opts: &ViscosityOptions,
) -> Result<EnhancedReport> {
    let mut report = EnhancedReport {
        verdict: Verdict::Optimal,
        smooth_points_checked: 0,
        kink_points_checked: 0,
        path_points_checked: 0,
        max_smooth_residual: 0.0,
        max_continuity_defect: 0.0,
        max_terminal_defect: 0.0,
        min_super_margin: None,
        max_sub_margin: None,
        max_path_gap: 0.0,
        first_derivatives_continuous: true,
        certificates: Vec::new(),
        issues: Vec::new(),
        notes: Vec::new(),
    };
    let mut violated = false;
    let mut missing_certificate = false;
    let btol = opts.jet_tols.boundary;

    // Condition 1, smooth samples: classical residual of the authoritative
    // piece.
    for (x, t) in smooth_samples {
        report.smooth_points_checked += 1;
        let piece = field.piece_at(x, *t, btol)?;
        let info = hjb_residual(
            &field.pieces[piece].field,
            dynamics,
            running,
            region,
            x,
            *t,
            &opts.nm,
        )?;
        let scaled = info.residual.abs() / info.time_derivative.abs().max(1.0);
        report.max_smooth_residual = report.max_smooth_residual.max(scaled);
        if scaled > opts.tol {
            violated = true;
            report.issues.push(PointIssue {
                x: x.clone(),
                t: *t,
                axis: None,
                magnitude: scaled,
                detail: format!("equation residual {scaled:.3e} at a smooth sample"),
            });
        }
    }

    // Condition 1, kink samples: continuity plus the jet inequalities.
    for (x, t) in kink_samples {
        report.kink_points_checked += 1;
        let check = viscosity_point_check(field, dynamics, running, region, x, *t, opts)?;
        report.max_continuity_defect = report.max_continuity_defect.max(check.continuity_defect);
        if check.continuity_defect > opts.continuity_tol {
            violated = true;
            report.issues.push(PointIssue {
                x: x.clone(),
                t: *t,
                axis: None,
                magnitude: check.continuity_defect,
                detail: format!(
                    "pieces disagree by {:.3e} on the kink locus",
                    check.continuity_defect
                ),
            });
        }
        if let Some(f) = check.min_super_f {
            report.min_super_margin =
                Some(report.min_super_margin.map_or(f, |m: f64| m.min(f)));
        }
        if let Some(f) = check.max_sub_f {
            report.max_sub_margin = Some(report.max_sub_margin.map_or(f, |m: f64| m.max(f)));
        }
        if !check.super_ok || !check.sub_ok {
            violated = true;
            report.issues.push(PointIssue {
                x: x.clone(),
                t: *t,
                axis: None,
                magnitude: check
                    .min_super_f
                    .unwrap_or(0.0)
                    .abs()
                    .max(check.max_sub_f.unwrap_or(0.0).abs()),
                detail: "jet inequality violated at a kink sample".into(),
            });
        }
        // First-order continuity across the pieces at this sample.
        let expansions = one_sided_expansions(field, x, *t, btol)?;
        for i in 1..expansions.len() {
            let a = &expansions[0];
            let b = &expansions[i];
            let diff = (a.time_slope - b.time_slope).abs()
                + a.gradient
                    .iter()
                    .zip(&b.gradient)
                    .map(|(u, v)| (u - v).abs())
                    .sum::<f64>();
            if diff > 1e-7 {
                report.first_derivatives_continuous = false;
            }
        }
    }

    // Condition 1, terminal samples.
    for x in horizon_samples {
        let defect = (field.value(x, horizon, btol)? - terminal(x)).abs();
        report.max_terminal_defect = report.max_terminal_defect.max(defect);
        if defect > opts.terminal_tol {
            violated = true;
            report.issues.push(PointIssue {
                x: x.clone(),
                t: horizon,
                axis: None,
                magnitude: defect,
                detail: format!("terminal value misses the terminal cost by {defect:.3e}"),
            });
        }
    }

    // Conditions 2 and 3 along the nominal trajectory.
    for (t, x) in nominal_path {
        if *t >= horizon - 1e-12 {
            continue;
        }
        report.path_points_checked += 1;
        let expansions = one_sided_expansions(field, x, *t, btol)?;
        let smooth_here = expansions.len() == 1 && expansions[0].normal.is_none();
        let v_protocol = policy(x, *t)?;
        if !region.contains(&v_protocol) {
            violated = true;
            report.issues.push(PointIssue {
                x: x.clone(),
                t: *t,
                axis: None,
                magnitude: f64::INFINITY,
                detail: "protocol control leaves the admissible region on the path".into(),
            });
            continue;
        }

        // Condition 2: attainment with the authoritative piece's data.
        let authoritative = expansions
            .iter()
            .max_by(|a, b| a.sigma.partial_cmp(&b.sigma).unwrap())
            .unwrap();
        let gmax = maximize_g(
            dynamics,
            running,
            region,
            x,
            *t,
            &authoritative.gradient,
            &authoritative.hessian,
            &opts.nm,
        )?;
        let g_protocol = g_value(
            dynamics,
            running,
            x,
            &v_protocol,
            *t,
            &authoritative.gradient,
            &authoritative.hessian,
        )?;
        let gap = gmax.value - g_protocol;
        report.max_path_gap = report.max_path_gap.max(gap);
        if gap > opts.tol {
            violated = true;
            report.issues.push(PointIssue {
                x: x.clone(),
                t: *t,
                axis: None,
                magnitude: gap,
                detail: format!("protocol misses the maximum of G by {gap:.3e} on the path"),
            });
        }

        // Condition 3: a jet certificate where the field is not smooth.
        if !smooth_here {
            let firsts = candidate_first_orders(&expansions, opts.n_window_samples);
            let hessians = candidate_hessians(&expansions, field.dim(), opts, JetKind::Super);
            let mut found = false;
            'search: for (q, p) in &firsts {
                for big_q in &hessians {
                    let jet = Jet {
                        q: *q,
                        p: p.clone(),
                        big_q: big_q.clone(),
                    };
                    if !jet_member(field, x, *t, &jet, JetKind::Super, &opts.jet_tols)? {
                        continue;
                    }
                    let g_pc =
                        g_value(dynamics, running, x, &v_protocol, *t, p, big_q)?;
                    let defect = (q - g_pc).abs();
                    if defect <= opts.tol {
                        report.certificates.push(JetWitness {
                            x: x.clone(),
                            t: *t,
                            q: *q,
                            p: p.clone(),
                            hessian_rows: (0..big_q.nrows())
                                .map(|i| big_q.row(i).iter().copied().collect())
                                .collect(),
                            equation_defect: defect,
                        });
                        found = true;
                        break 'search;
                    }
                }
            }
            if !found {
                missing_certificate = true;
                report.issues.push(PointIssue {
                    x: x.clone(),
                    t: *t,
                    axis: None,
                    magnitude: f64::NAN,
                    detail: "no jet certificate found at a non-smooth path point".into(),
                });
            }
        }
    }

    report.verdict = if violated {
        Verdict::NotOptimal
    } else if missing_certificate {
        report
            .notes
            .push("no violation found, but a jet certificate is missing on the path".into());
        Verdict::Inconclusive
    } else {
        Verdict::Optimal
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlVector;
    use approx::assert_relative_eq;
    use std::sync::Arc;

    /// The textbook one-dimensional kink: ln y for y ≤ 1 glued to (y−1)²
    /// for y ≥ 1. Its jets at y = 1 have exact closed-form descriptions,
    /// which the membership test must reproduce.
    fn log_parabola_field() -> PiecewiseField {
        let log_piece = FieldPiece {
            name: "log".into(),
            region: Arc::new(|x: &[f64], _| 1.0 - x[0]),
            field: CostField::new(1, Arc::new(|x: &[f64], _| x[0].ln()))
                .with_gradient(Arc::new(|x: &[f64], _| vec![1.0 / x[0]]))
                .with_time_derivative(Arc::new(|_: &[f64], _| 0.0))
                .with_hessian(Arc::new(|x: &[f64], _| {
                    DMatrix::from_element(1, 1, -1.0 / (x[0] * x[0]))
                })),
        };
        let parab_piece = FieldPiece {
            name: "parabola".into(),
            region: Arc::new(|x: &[f64], _| x[0] - 1.0),
            field: CostField::new(1, Arc::new(|x: &[f64], _| (x[0] - 1.0) * (x[0] - 1.0)))
                .with_gradient(Arc::new(|x: &[f64], _| vec![2.0 * (x[0] - 1.0)]))
                .with_time_derivative(Arc::new(|_: &[f64], _| 0.0))
                .with_hessian(Arc::new(|_: &[f64], _| DMatrix::from_element(1, 1, 2.0))),
        };
        PiecewiseField::new(1, vec![log_piece, parab_piece]).unwrap()
    }

    fn jet1(q: f64, p: f64, big_q: f64) -> Jet {
        Jet {
            q,
            p: vec![p],
            big_q: DMatrix::from_element(1, 1, big_q),
        }
    }

    #[test]
    fn superjets_at_the_glued_kink_match_the_exact_window() {
        let field = log_parabola_field();
        let tols = JetTols::default();
        let is_super = |p: f64, q: f64| {
            jet_member(&field, &[1.0], 0.0, &jet1(0.0, p, q), JetKind::Super, &tols).unwrap()
        };
        // Interior of the gradient window: any Hessian bound works.
        assert!(is_super(0.5, -100.0));
        assert!(is_super(0.5, 100.0));
        assert!(is_super(0.25, 0.0));
        // Endpoint p = 0 activates the parabola's curvature: Q ≥ 2.
        assert!(is_super(0.0, 2.0));
        assert!(is_super(0.0, 5.0));
        assert!(!is_super(0.0, 1.9));
        // Endpoint p = 1 activates the log's curvature: Q ≥ −1.
        assert!(is_super(1.0, -1.0));
        assert!(is_super(1.0, 0.0));
        assert!(!is_super(1.0, -1.1));
        // Outside the window: not a superjet for any Q.
        assert!(!is_super(-0.05, 100.0));
        assert!(!is_super(1.05, 100.0));
    }

    #[test]
    fn subjets_at_the_glued_kink_are_empty() {
        let field = log_parabola_field();
        let tols = JetTols::default();
        for p in [-0.5, 0.0, 0.3, 0.5, 1.0, 1.5] {
            for q in [-5.0, 0.0, 5.0] {
                assert!(
                    !jet_member(&field, &[1.0], 0.0, &jet1(0.0, p, q), JetKind::Sub, &tols)
                        .unwrap(),
                    "claimed subjet at p={p}, Q={q}"
                );
            }
        }
    }

    #[test]
    fn jets_at_smooth_points_are_the_classical_ones() {
        let field = log_parabola_field();
        let tols = JetTols::default();
        // Deep in the log piece: derivative 1/2, curvature −1/4.
        let x = [0.5];
        let member = |q: f64, p: f64, big_q: f64, kind: JetKind| {
            jet_member(&field, &x, 0.0, &jet1(q, p, big_q), kind, &tols).unwrap()
        };
        assert!(member(0.0, 2.0, -4.0, JetKind::Super));
        assert!(member(0.0, 2.0, -3.0, JetKind::Super));
        assert!(!member(0.0, 2.0, -4.1, JetKind::Super));
        assert!(member(0.0, 2.0, -4.0, JetKind::Sub));
        assert!(member(0.0, 2.0, -5.0, JetKind::Sub));
        assert!(!member(0.0, 2.0, -3.9, JetKind::Sub));
        // Wrong gradient or time slope: in neither set.
        assert!(!member(0.0, 2.1, -4.0, JetKind::Super));
        assert!(!member(0.1, 2.0, -4.0, JetKind::Super));
        assert!(!member(-0.1, 2.0, -4.0, JetKind::Sub));
    }

    /// Deterministic transport toward the origin: dx = v dt, v ∈ [−1, 1],
    /// terminal cost |x|. Optimal cost-to-go max(|x| − (T−t), 0), built
    /// from three smooth pieces meeting on the moving loci |x| = T − t.
    /// This is a genuine viscosity solution whose gradient kinks, so it
    /// exercises the window machinery end to end.
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
        fn diffusion(&self, _x: &[f64], _v: &ControlVector, _t: f64) -> Result<DMatrix<f64>> {
            Ok(DMatrix::zeros(1, 0))
        }
    }

    fn transport_field(horizon: f64, right_offset: f64) -> PiecewiseField {
        let left = FieldPiece {
            name: "left-ramp".into(),
            region: Arc::new(move |x: &[f64], t: f64| -x[0] - (horizon - t)),
            field: CostField::new(
                1,
                Arc::new(move |x: &[f64], t: f64| -x[0] - (horizon - t)),
            )
            .with_gradient(Arc::new(|_: &[f64], _| vec![-1.0]))
            .with_time_derivative(Arc::new(|_: &[f64], _| 1.0))
            .with_hessian(Arc::new(|_: &[f64], _| DMatrix::zeros(1, 1))),
        };
        let middle = FieldPiece {
            name: "reachable-core".into(),
            region: Arc::new(move |x: &[f64], t: f64| (horizon - t) - x[0].abs()),
            field: CostField::new(1, Arc::new(|_: &[f64], _| 0.0))
                .with_gradient(Arc::new(|_: &[f64], _| vec![0.0]))
                .with_time_derivative(Arc::new(|_: &[f64], _| 0.0))
                .with_hessian(Arc::new(|_: &[f64], _| DMatrix::zeros(1, 1))),
        };
        let right = FieldPiece {
            name: "right-ramp".into(),
            region: Arc::new(move |x: &[f64], t: f64| x[0] - (horizon - t)),
            field: CostField::new(
                1,
                Arc::new(move |x: &[f64], t: f64| x[0] - (horizon - t) + right_offset),
            )
            .with_gradient(Arc::new(|_: &[f64], _| vec![1.0]))
            .with_time_derivative(Arc::new(|_: &[f64], _| 1.0))
            .with_hessian(Arc::new(|_: &[f64], _| DMatrix::zeros(1, 1))),
        };
        PiecewiseField::new(1, vec![left, middle, right]).unwrap()
    }

    #[test]
    fn transport_kink_has_empty_superjets_and_a_subjet_window() {
        let field = transport_field(1.0, 0.0);
        let tols = JetTols::default();
        // Kink at x = T − t with t = 0.4: x = 0.6. Subjet window
        // (q, p) = μ(1, 1), μ ∈ [0, 1].
        let x = [0.6];
        let t = 0.4;
        for mu in [0.0, 0.3, 0.7, 1.0] {
            let big_q = if mu == 0.0 || mu == 1.0 { -1.0 } else { 50.0 };
            assert!(
                jet_member(&field, &x, t, &jet1(mu, mu, big_q), JetKind::Sub, &tols).unwrap(),
                "subjet missing at mu={mu}"
            );
        }
        // Off the diagonal or outside [0, 1]: not subjets.
        assert!(!jet_member(&field, &x, t, &jet1(0.3, 0.5, -1.0), JetKind::Sub, &tols).unwrap());
        assert!(!jet_member(&field, &x, t, &jet1(1.2, 1.2, -1.0), JetKind::Sub, &tols).unwrap());
        // The convex kink admits no superjets at all.
        for mu in [0.0, 0.5, 1.0] {
            for q in [-10.0, 0.0, 10.0] {
                assert!(
                    !jet_member(&field, &x, t, &jet1(mu, mu, q), JetKind::Super, &tols)
                        .unwrap()
                );
            }
        }
    }

    #[test]
    fn point_check_confirms_the_transport_solution_at_its_kink() {
        let field = transport_field(1.0, 0.0);
        let region = ControlRegion::coefficient_box(vec![(-1.0, 1.0)]);
        let opts = ViscosityOptions::default();
        let check =
            viscosity_point_check(&field, &Transport, None, &region, &[0.6], 0.4, &opts)
                .unwrap();
        assert!(check.at_kink);
        assert!(check.continuity_defect < 1e-12);
        // Superjets are empty here; subjets all satisfy q − max G = 0.
        assert_eq!(check.super_jets_checked, 0);
        assert!(check.sub_jets_checked > 0);
        assert!(check.super_ok && check.sub_ok);
        assert_relative_eq!(check.max_sub_f.unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn point_check_matches_the_classical_residual_at_smooth_points() {
        let field = transport_field(1.0, 0.0);
        let region = ControlRegion::coefficient_box(vec![(-1.0, 1.0)]);
        let opts = ViscosityOptions::default();
        // Interior of the right ramp: C = x − (T−t), residual
        // ∂C/∂t − max |v·p| = 1 − 1 = 0 classically.
        let check =
            viscosity_point_check(&field, &Transport, None, &region, &[1.5], 0.2, &opts)
                .unwrap();
        assert!(!check.at_kink);
        assert!(check.super_ok && check.sub_ok);
        assert!(check.super_jets_checked > 0 && check.sub_jets_checked > 0);
        assert_relative_eq!(check.min_super_f.unwrap(), 0.0, epsilon = 1e-7);
        assert_relative_eq!(check.max_sub_f.unwrap(), 0.0, epsilon = 1e-7);
    }

    fn transport_setup(
        offset: f64,
    ) -> (
        PiecewiseField,
        ControlRegion,
        Vec<(Vec<f64>, f64)>,
        Vec<(Vec<f64>, f64)>,
        Vec<(f64, Vec<f64>)>,
        Vec<Vec<f64>>,
    ) {
        let horizon = 1.0;
        let field = transport_field(horizon, offset);
        let region = ControlRegion::coefficient_box(vec![(-1.0, 1.0)]);
        let smooth: Vec<(Vec<f64>, f64)> = vec![
            (vec![0.0], 0.3),
            (vec![0.2], 0.5),
            (vec![1.5], 0.2),
            (vec![-1.4], 0.4),
            (vec![0.05], 0.9),
        ];
        let kinks: Vec<(Vec<f64>, f64)> = [0.2, 0.5, 0.8]
            .iter()
            .flat_map(|&t| {
                vec![
                    (vec![horizon - t], t),
                    (vec![-(horizon - t)], t),
                ]
            })
            .collect();
        // Nominal path from x = 0.8: slide toward 0 at unit speed, then rest.
        let path: Vec<(f64, Vec<f64>)> = (0..=10)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, vec![(0.8 - t).max(0.0)])
            })
            .collect();
        let terminal_xs: Vec<Vec<f64>> = (-4..=4).map(|i| vec![i as f64 * 0.5]).collect();
        (field, region, smooth, kinks, path, terminal_xs)
    }

    #[test]
    fn enhanced_verifier_certifies_the_transport_optimum() {
        let (field, region, smooth, kinks, path, terminal_xs) = transport_setup(0.0);
        let policy = |x: &[f64], _: f64| {
            Ok(ControlVector::coefficients(vec![-x[0].signum()]))
        };
        let terminal = |x: &[f64]| x[0].abs();
        let report = verify_enhanced(
            &field,
            &Transport,
            None,
            &terminal,
            &region,
            &policy,
            &smooth,
            &kinks,
            &path,
            1.0,
            &terminal_xs,
            &ViscosityOptions::default(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::Optimal, "report: {report:?}");
        assert!(report.max_smooth_residual < 1e-9);
        assert!(report.max_continuity_defect < 1e-12);
        assert!(report.max_terminal_defect < 1e-12);
        assert!(report.max_path_gap < 1e-9);
        // The gradient jumps across the moving kink, so the shortcut flag
        // must be off.
        assert!(!report.first_derivatives_continuous);
    }

    #[test]
    fn enhanced_verifier_rejects_an_offset_piece() {
        // Shifting one ramp by a constant keeps every piece a classical
        // solution but tears the surface along the kink and misses the
        // terminal cost.
        let (field, region, smooth, kinks, path, terminal_xs) = transport_setup(0.05);
        let policy = |x: &[f64], _: f64| {
            Ok(ControlVector::coefficients(vec![-x[0].signum()]))
        };
        let terminal = |x: &[f64]| x[0].abs();
        let report = verify_enhanced(
            &field,
            &Transport,
            None,
            &terminal,
            &region,
            &policy,
            &smooth,
            &kinks,
            &path,
            1.0,
            &terminal_xs,
            &ViscosityOptions::default(),
        )
        .unwrap();
        assert_eq!(report.verdict, Verdict::NotOptimal);
        assert!(report.max_continuity_defect > 0.04);
        assert!(report.max_terminal_defect > 0.04);
        assert!(!report.issues.is_empty());
    }

    #[test]
    fn membership_is_monotone_in_the_hessian_direction() {
        let field = log_parabola_field();
        let tols = JetTols::default();
        // At a smooth point: enlarging Q keeps superjets, shrinking keeps
        // subjets.
        let x = [0.5];
        for bump in [0.5, 2.0, 10.0] {
            assert!(jet_member(
                &field,
                &x,
                0.0,
                &jet1(0.0, 2.0, -4.0 + bump),
                JetKind::Super,
                &tols
            )
            .unwrap());
            assert!(jet_member(
                &field,
                &x,
                0.0,
                &jet1(0.0, 2.0, -4.0 - bump),
                JetKind::Sub,
                &tols
            )
            .unwrap());
        }
    }

    #[test]
    fn piecewise_field_reports_pieces_and_defects() {
        let field = transport_field(1.0, 0.0);
        assert_eq!(field.active_pieces(&[0.0], 0.5, 1e-9), vec![1]);
        // On the right kink both the core and the ramp are active.
        assert_eq!(field.active_pieces(&[0.5], 0.5, 1e-9), vec![1, 2]);
        assert_eq!(
            field.pieces()[field.piece_at(&[2.0], 0.5, 1e-9).unwrap()].name,
            "right-ramp"
        );
        assert!(field.value(&[2.0], 0.5, 1e-9).unwrap() > 0.0);
        assert!(field
            .continuity_defect(&[0.5], 0.5, 1e-9)
            .unwrap()
            .abs()
            < 1e-12);
        let torn = transport_field(1.0, 0.1);
        assert!(torn.continuity_defect(&[0.5], 0.5, 1e-9).unwrap() > 0.09);
    }
}
