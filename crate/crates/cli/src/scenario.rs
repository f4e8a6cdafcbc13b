//! Scenario files: one TOML document per run, with nested blocks for the
//! model, protocol, cost, control region, grid, RNG, and output paths.
//!
//! Matrices are row-major nested arrays of `[re, im]` pairs. Every scenario
//! names its problem family in `kind`; blocks that a family does not use may
//! be omitted. Seeds must be written down — nothing is seeded from the
//! clock.

use std::fmt;
use std::path::Path;

use qfc::num_complex::Complex64;
use serde::Deserialize;

use qfc::control::{ControlProtocol, ControlRegion, ControlVector, Segment};
use qfc::qstate::{CMatrix, DensityMatrix, Observable};
use qfc::qutrit::{DriveProtocol, QutritModel, QutritScenario};
use qfc::sde::{Dissipation, SmeModel};

/// A CLI-level failure: either an input problem (exit 1) or a propagated
/// library error.
#[derive(Debug)]
pub struct CliError(pub String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CliError {}

impl From<qfc::Error> for CliError {
    fn from(e: qfc::Error) -> Self {
        CliError(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn fail<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError(msg.into()))
}

/// Row-major complex matrix literal: entries are `[re, im]`.
pub type MatrixSpec = Vec<Vec<[f64; 2]>>;

/// Problem family the scenario describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    /// Conditioned master equation on density matrices.
    Sme,
    /// Three-level feedback problem in eigenvalue coordinates.
    Qutrit,
    /// Scalar controlled decay dx = -u x dt.
    Drift1d,
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kind::Sme => f.write_str("sme"),
            Kind::Qutrit => f.write_str("qutrit"),
            Kind::Drift1d => f.write_str("drift1d"),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub kind: Kind,
    pub model: ModelBlock,
    pub protocol: Option<ProtocolBlock>,
    pub cost: Option<CostBlock>,
    pub region: Option<RegionBlock>,
    pub grid: Option<GridBlock>,
    pub rng: RngBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub dimension: usize,
    /// Measurement strength k > 0 (conditioned-master-equation family).
    pub k: Option<f64>,
    /// Measured observable when the protocol fixes no frame.
    pub x: Option<MatrixSpec>,
    /// Drift Hamiltonian H0.
    pub h: Option<MatrixSpec>,
    /// Control Hamiltonians H_i, coupled to the protocol coefficients mu_i.
    #[serde(default)]
    pub controls: Vec<MatrixSpec>,
    /// Dissipation rate gamma >= 0; requires `c`.
    pub gamma: Option<f64>,
    /// Dissipation channel operator.
    pub c: Option<MatrixSpec>,
    /// Initial state as a density matrix...
    pub rho0: Option<MatrixSpec>,
    /// ...or as a basis index for a pure initial state.
    pub rho0_pure: Option<usize>,
    /// Integration step.
    pub dt: Option<f64>,
    /// Coupling scale for the three-level family (observable spectrum a, 0, -a).
    pub a: Option<f64>,
    /// Initial ordered eigenvalues below the top one (three-level family).
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    /// Target threshold x_c for the scalar decay family.
    pub x_target: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolBlock {
    /// One of: constant, switching, qutrit-feedback (conditioned family);
    /// level-one, level-two, balanced, switch-at, switch-at-optimal,
    /// alternate, hold (three-level family).
    #[serde(rename = "type")]
    pub kind: String,
    /// Coefficients for `constant`.
    pub mu: Option<Vec<f64>>,
    /// Segments for `switching`.
    pub segments: Option<Vec<SegmentSpec>>,
    /// Coupling scale for `qutrit-feedback`.
    pub a: Option<f64>,
    /// Switch time for `switch-at`.
    pub t_switch: Option<f64>,
    /// Half-period for `alternate`.
    pub half_period: Option<f64>,
    /// Held observable for `hold`.
    pub observable: Option<MatrixSpec>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub from_t: f64,
    pub mu: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostBlock {
    /// Horizon T > 0.
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Running cost L: none | constant | expectation.
    #[serde(default = "default_running")]
    pub running: String,
    /// Weight multiplying the selected running cost.
    pub running_weight: Option<f64>,
    /// Observable for running = "expectation".
    pub running_observable: Option<MatrixSpec>,
    /// Terminal cost M: infidelity | expectation | none.
    #[serde(default = "default_terminal")]
    pub terminal: String,
    /// Observable for terminal = "expectation".
    pub terminal_observable: Option<MatrixSpec>,
}

fn default_running() -> String {
    "none".into()
}

fn default_terminal() -> String {
    "infidelity".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionBlock {
    /// Box bounds on the control coefficients, one [lo, hi] per component.
    pub mu_bounds: Option<Vec<[f64; 2]>>,
    /// Lattice resolution per free component when discretizing the region.
    pub actions_per_axis: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    /// State-space box, one [lo, hi] per axis.
    pub bounds: Vec<[f64; 2]>,
    /// Nodes per axis.
    pub points: Vec<usize>,
    /// Node placement: uniform | log.
    #[serde(default = "default_spacing")]
    pub spacing: String,
    /// Stored time levels for the backward solve.
    pub time_levels: Option<usize>,
    /// Tie tolerance forwarded to the backward solver.
    pub tie_tol: Option<f64>,
}

fn default_spacing() -> String {
    "uniform".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngBlock {
    /// Base seed; required so that every run is reproducible.
    pub seed: u64,
    /// Number of trajectories / sample paths.
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
}

fn default_n_traj() -> usize {
    1
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    /// Artifact directory; the --out flag takes precedence.
    pub dir: Option<String>,
}

/// Loads and structurally validates a scenario file. Parse errors keep the
/// TOML line/column anchor, prefixed with the file path.
pub fn load_scenario(path: &Path) -> CliResult<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    let scenario: Scenario = toml::from_str(&text)
        .map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    scenario.validate(path)?;
    Ok(scenario)
}

impl Scenario {
    fn validate(&self, path: &Path) -> CliResult<()> {
        let anchor = |block: &str, msg: String| -> CliError {
            CliError(format!("{}: [{block}]: {msg}", path.display()))
        };
        if self.model.dimension == 0 {
            return Err(anchor("model", "dimension must be positive".into()));
        }
        if let Some(cost) = &self.cost {
            if !(cost.horizon > 0.0) || !cost.horizon.is_finite() {
                return Err(anchor(
                    "cost",
                    format!("T must be positive and finite, got {}", cost.horizon),
                ));
            }
        }
        if let Some(grid) = &self.grid {
            if grid.bounds.len() != grid.points.len() {
                return Err(anchor(
                    "grid",
                    format!(
                        "{} bounds but {} point counts",
                        grid.bounds.len(),
                        grid.points.len()
                    ),
                ));
            }
            for (i, b) in grid.bounds.iter().enumerate() {
                if !(b[1] > b[0]) {
                    return Err(anchor(
                        "grid",
                        format!("axis {i} bounds [{}, {}] are not increasing", b[0], b[1]),
                    ));
                }
            }
            if grid.spacing != "uniform" && grid.spacing != "log" {
                return Err(anchor(
                    "grid",
                    format!("spacing must be \"uniform\" or \"log\", got \"{}\"", grid.spacing),
                ));
            }
            if grid.spacing == "log" && grid.bounds.iter().any(|b| b[0] <= 0.0) {
                return Err(anchor("grid", "log spacing needs positive bounds".into()));
            }
        }
        match self.kind {
            Kind::Sme => {
                if self.model.k.is_none() {
                    return Err(anchor("model", "the sme family needs k".into()));
                }
                if self.model.rho0.is_none() && self.model.rho0_pure.is_none() {
                    return Err(anchor(
                        "model",
                        "the sme family needs rho0 or rho0_pure".into(),
                    ));
                }
            }
            Kind::Qutrit => {
                if self.model.dimension != 3 {
                    return Err(anchor(
                        "model",
                        format!("the qutrit family is three-level, got dimension {}", self.model.dimension),
                    ));
                }
                for (name, v) in [
                    ("a", self.model.a),
                    ("lambda1", self.model.lambda1),
                    ("lambda2", self.model.lambda2),
                ] {
                    match v {
                        None => {
                            return Err(anchor(
                                "model",
                                format!("the qutrit family needs {name}"),
                            ))
                        }
                        Some(x) if !x.is_finite() => {
                            return Err(anchor("model", format!("{name} must be finite")))
                        }
                        _ => {}
                    }
                }
            }
            Kind::Drift1d => {
                if self.model.dimension != 1 {
                    return Err(anchor(
                        "model",
                        format!("the drift1d family is scalar, got dimension {}", self.model.dimension),
                    ));
                }
                if self.model.x_target.is_none() {
                    return Err(anchor("model", "the drift1d family needs x_target".into()));
                }
            }
        }
        Ok(())
    }

    /// The integration step, defaulting per family.
    pub fn dt(&self) -> f64 {
        self.model.dt.unwrap_or(1e-4)
    }

    /// Horizon from the cost block, or an input error naming the block.
    pub fn horizon(&self) -> CliResult<f64> {
        match &self.cost {
            Some(c) => Ok(c.horizon),
            None => fail("[cost]: this subcommand needs a cost block with T"),
        }
    }

    /// The three-level model parameters (kind = qutrit only).
    pub fn qutrit_scenario(&self) -> CliResult<QutritScenario> {
        Ok(QutritScenario {
            lambda1: self.model.lambda1.expect("validated"),
            lambda2: self.model.lambda2.expect("validated"),
            a: self.model.a.expect("validated"),
            horizon: self.horizon()?,
        })
    }

    pub fn qutrit_model(&self) -> CliResult<QutritModel> {
        let s = self.qutrit_scenario()?;
        Ok(QutritModel::new(s.a, s.horizon)?)
    }

    /// Builds the conditioned-master-equation model (kind = sme only).
    pub fn sme_model(&self) -> CliResult<SmeModel> {
        let dim = self.model.dimension;
        let mut model = SmeModel::new(self.model.k.expect("validated"));
        if let Some(h) = &self.model.h {
            model.hamiltonian = Some(observable_from_spec("model.h", h, dim)?);
        }
        for (i, hi) in self.model.controls.iter().enumerate() {
            model
                .control_hamiltonians
                .push(observable_from_spec(&format!("model.controls[{i}]"), hi, dim)?);
        }
        match (self.model.gamma, &self.model.c) {
            (Some(rate), Some(c)) => {
                model.dissipation = Some(Dissipation {
                    rate,
                    channel: cmatrix_from_spec("model.c", c, dim)?,
                });
            }
            (Some(_), None) => return fail("[model]: gamma given without a channel c"),
            (None, Some(_)) => return fail("[model]: channel c given without a rate gamma"),
            (None, None) => {}
        }
        if let Some(x) = &self.model.x {
            model.fixed_observable = Some(observable_from_spec("model.x", x, dim)?);
        }
        Ok(model)
    }

    /// Initial density matrix (kind = sme only).
    pub fn initial_state(&self) -> CliResult<DensityMatrix> {
        let dim = self.model.dimension;
        if let Some(rho) = &self.model.rho0 {
            let m = cmatrix_from_spec("model.rho0", rho, dim)?;
            return DensityMatrix::new(m)
                .map_err(|e| CliError(format!("[model]: rho0: {e}")));
        }
        let i = self.model.rho0_pure.expect("validated");
        if i >= dim {
            return fail(format!(
                "[model]: rho0_pure index {i} out of range for dimension {dim}"
            ));
        }
        let mut probs = vec![0.0; dim];
        probs[i] = 1.0;
        Ok(DensityMatrix::diagonal(&probs)?)
    }

    /// The measurement/actuation protocol for the conditioned family.
    pub fn sme_protocol(&self) -> CliResult<ControlProtocol> {
        let p = match &self.protocol {
            Some(p) => p,
            None => return fail("[protocol]: this subcommand needs a protocol block"),
        };
        let n_controls = self.model.controls.len();
        let coefficients = |mu: &Option<Vec<f64>>| -> CliResult<Vec<f64>> {
            let mu = mu.clone().unwrap_or_default();
            if mu.len() != n_controls {
                return fail(format!(
                    "[protocol]: {} coefficients for {} control Hamiltonians",
                    mu.len(),
                    n_controls
                ));
            }
            Ok(mu)
        };
        match p.kind.as_str() {
            "constant" => Ok(ControlProtocol::Constant(ControlVector::coefficients(
                coefficients(&p.mu)?,
            ))),
            "switching" => {
                let specs = p.segments.clone().unwrap_or_default();
                if specs.is_empty() {
                    return fail("[protocol]: switching needs at least one segment");
                }
                let mut segments = Vec::with_capacity(specs.len());
                for s in &specs {
                    if s.mu.len() != n_controls {
                        return fail(format!(
                            "[protocol]: segment at t = {} has {} coefficients for {} control Hamiltonians",
                            s.from_t,
                            s.mu.len(),
                            n_controls
                        ));
                    }
                    segments.push(Segment {
                        from_t: s.from_t,
                        control: ControlVector::coefficients(s.mu.clone()),
                    });
                }
                Ok(ControlProtocol::TimeSwitching(segments))
            }
            "qutrit-feedback" => {
                let a = p
                    .a
                    .ok_or_else(|| CliError("[protocol]: qutrit-feedback needs a".into()))?;
                Ok(ControlProtocol::StateFeedback(
                    qfc::control::FeedbackRule::QutritEigenbasis { a },
                ))
            }
            other => fail(format!(
                "[protocol]: type \"{other}\" is not a conditioned-family protocol \
                 (expected constant, switching, or qutrit-feedback)"
            )),
        }
    }

    /// The eigenvalue-pair drive for the three-level family.
    pub fn qutrit_protocol(&self) -> CliResult<DriveProtocol> {
        let p = match &self.protocol {
            Some(p) => p,
            None => return fail("[protocol]: this subcommand needs a protocol block"),
        };
        match p.kind.as_str() {
            "level-one" => Ok(DriveProtocol::LevelOne),
            "level-two" => Ok(DriveProtocol::LevelTwo),
            "balanced" => Ok(DriveProtocol::FastSwitch),
            "switch-at" => {
                let t = p
                    .t_switch
                    .ok_or_else(|| CliError("[protocol]: switch-at needs t_switch".into()))?;
                Ok(DriveProtocol::SwitchAtTime(t))
            }
            "switch-at-optimal" => {
                let s = self.qutrit_scenario()?;
                Ok(DriveProtocol::SwitchAtTime(qfc::qutrit::switching_time(
                    s.lambda1, s.lambda2, s.a,
                )?))
            }
            "alternate" => {
                let hp = p
                    .half_period
                    .ok_or_else(|| CliError("[protocol]: alternate needs half_period".into()))?;
                Ok(DriveProtocol::Alternate { half_period: hp })
            }
            "hold" => {
                let spec = p
                    .observable
                    .as_ref()
                    .ok_or_else(|| CliError("[protocol]: hold needs observable".into()))?;
                Ok(DriveProtocol::Hold(observable_from_spec(
                    "protocol.observable",
                    spec,
                    3,
                )?))
            }
            other => fail(format!(
                "[protocol]: type \"{other}\" is not a three-level drive \
                 (expected level-one, level-two, balanced, switch-at, switch-at-optimal, \
                 alternate, or hold)"
            )),
        }
    }

    /// Control region from the region block.
    pub fn control_region(&self) -> CliResult<ControlRegion> {
        let r = match &self.region {
            Some(r) => r,
            None => return fail("[region]: this subcommand needs a region block"),
        };
        match &r.mu_bounds {
            Some(bounds) => Ok(ControlRegion::coefficient_box(
                bounds.iter().map(|b| (b[0], b[1])).collect(),
            )),
            None => fail("[region]: needs mu_bounds"),
        }
    }

    /// Grid axes honoring the spacing selector and any --grid override.
    pub fn grid_axes(&self, points_override: Option<&[usize]>) -> CliResult<Vec<Vec<f64>>> {
        let g = match &self.grid {
            Some(g) => g,
            None => return fail("[grid]: this subcommand needs a grid block"),
        };
        let points: Vec<usize> = match points_override {
            Some(p) if p.len() == 1 && g.points.len() > 1 => vec![p[0]; g.points.len()],
            Some(p) => {
                if p.len() != g.points.len() {
                    return fail(format!(
                        "--grid gave {} axis sizes for a {}-axis grid",
                        p.len(),
                        g.points.len()
                    ));
                }
                p.to_vec()
            }
            None => g.points.clone(),
        };
        let mut axes = Vec::with_capacity(points.len());
        for (b, &n) in g.bounds.iter().zip(&points) {
            if n < 2 {
                return fail(format!("grid axes need at least 2 points, got {n}"));
            }
            let axis: Vec<f64> = if g.spacing == "log" {
                let (l0, l1) = (b[0].ln(), b[1].ln());
                (0..n)
                    .map(|i| (l0 + (l1 - l0) * i as f64 / (n - 1) as f64).exp())
                    .collect()
            } else {
                (0..n)
                    .map(|i| b[0] + (b[1] - b[0]) * i as f64 / (n - 1) as f64)
                    .collect()
            };
            axes.push(axis);
        }
        Ok(axes)
    }
}

/// Parses a matrix literal and checks its shape.
pub fn cmatrix_from_spec(name: &str, spec: &MatrixSpec, dim: usize) -> CliResult<CMatrix> {
    if spec.len() != dim || spec.iter().any(|row| row.len() != dim) {
        return fail(format!(
            "[{name}]: expected a {dim}x{dim} matrix of [re, im] pairs"
        ));
    }
    let mut m = CMatrix::zeros(dim, dim);
    for (i, row) in spec.iter().enumerate() {
        for (j, e) in row.iter().enumerate() {
            if !e[0].is_finite() || !e[1].is_finite() {
                return fail(format!("[{name}]: entry ({i}, {j}) is not finite"));
            }
            m[(i, j)] = Complex64::new(e[0], e[1]);
        }
    }
    Ok(m)
}

/// Parses a matrix literal into a (validated Hermitian) observable.
pub fn observable_from_spec(name: &str, spec: &MatrixSpec, dim: usize) -> CliResult<Observable> {
    let m = cmatrix_from_spec(name, spec, dim)?;
    Observable::new(m).map_err(|e| CliError(format!("[{name}]: {e}")))
}
