//! Subcommand implementations. Each returns an [`Outcome`] so `main` can map
//! verification verdicts onto the exit-code contract (0 success, 2 verdict
//! failure, 1 input error).

use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;

use qfc::cost::{mc_mean_stderr, CostSpec, QuantumCostSpec};
use qfc::dp::{solve_backward, solve_time_optimal, DpOptions, TimeOptimalOptions};
use qfc::grid::{StateGrid, TimeGrid};
use qfc::hjb::{Dynamics, Verdict, VerificationReport};
use qfc::qstate::{eig_sorted, expectation, DensityMatrix};
use qfc::qutrit::{
    switched_coupling_actions, verify_qutrit, DriveProtocol, QutritScenario,
    SwitchedCouplingDynamics,
};
use qfc::sde::{simulate_trajectory, write_trajectory_csv, NoiseStream};
use qfc::viscosity::EnhancedReport;
use qfc::Result as CoreResult;

use crate::report::{artifact_path, print_table, sig12, write_json};
use crate::scenario::{fail, CliError, CliResult, Kind, Scenario};

/// What a successfully executed subcommand reports back.
pub enum Outcome {
    Success,
    /// Verification produced a verdict other than optimal.
    VerdictFailure,
}

/// Flag values resolved against the scenario.
pub struct Flags {
    pub out: Option<PathBuf>,
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub grid: Option<Vec<usize>>,
}

impl Flags {
    pub fn out_dir(&self, scenario: &Scenario) -> PathBuf {
        self.out
            .clone()
            .or_else(|| scenario.output.dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn seed(&self, scenario: &Scenario) -> u64 {
        self.seed.unwrap_or(scenario.rng.seed)
    }

    pub fn tol(&self) -> f64 {
        self.tol.unwrap_or(1e-6)
    }
}

fn require_kind(scenario: &Scenario, expected: Kind, subcommand: &str) -> CliResult<()> {
    if scenario.kind != expected {
        return fail(format!(
            "`{subcommand}` needs a kind = \"{expected}\" scenario, got \"{}\"",
            scenario.kind
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn simulate(scenario: &Scenario, flags: &Flags) -> CliResult<Outcome> {
    let out_dir = flags.out_dir(scenario);
    let seed = flags.seed(scenario);
    let n_traj = scenario.rng.n_traj;
    match scenario.kind {
        Kind::Sme => simulate_sme(scenario, flags, &out_dir, seed, n_traj),
        Kind::Qutrit => simulate_qutrit(scenario, &out_dir, seed, n_traj),
        Kind::Drift1d => fail("`simulate` supports the sme and qutrit families"),
    }
}

fn simulate_sme(
    scenario: &Scenario,
    _flags: &Flags,
    out_dir: &Path,
    seed: u64,
    n_traj: usize,
) -> CliResult<Outcome> {
    let model = scenario.sme_model()?;
    let protocol = scenario.sme_protocol()?;
    let rho0 = scenario.initial_state()?;
    let horizon = scenario.horizon()?;
    let dt = scenario.dt();

    let mut rows = Vec::new();
    for j in 0..n_traj {
        let mut noise = NoiseStream::new(seed, j as u64);
        let record = simulate_trajectory(&model, &protocol, &rho0, 0.0, horizon, dt, &mut noise)?;
        let name = format!("trajectory_{j:03}.csv");
        let path = artifact_path(out_dir, &name)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(&path)?);
        write_trajectory_csv(&record, &mut file)
            .map_err(|e| CliError(format!("{}: {e}", path.display())))?;
        file.flush()?;
        let final_top = eig_sorted(record.states.last().expect("nonempty trajectory")).values[0];
        rows.push((name, format!("final top eigenvalue {}", sig12(final_top))));
    }
    print_table(
        &format!(
            "simulate: {n_traj} conditioned trajectories, T = {}, dt = {}, seed = {seed} -> {}",
            sig12(horizon),
            sig12(dt),
            out_dir.display()
        ),
        &rows,
    );
    Ok(Outcome::Success)
}

fn simulate_qutrit(
    scenario: &Scenario,
    out_dir: &Path,
    seed: u64,
    n_traj: usize,
) -> CliResult<Outcome> {
    let qs = scenario.qutrit_scenario()?;
    let model = scenario.qutrit_model()?;
    let protocol = scenario.qutrit_protocol()?;
    let initial = qfc::qutrit::EigenState::new(qs.lambda1, qs.lambda2)?;
    let dt = scenario.dt();
    let noisy = matches!(protocol, DriveProtocol::Hold(_));

    let mut rows = Vec::new();
    for j in 0..n_traj {
        let mut noise = NoiseStream::new(seed, j as u64);
        let stream = if noisy { Some(&mut noise) } else { None };
        let path_data = qfc::qutrit::simulate_eigen(&model, &protocol, &initial, dt, stream)?;
        let name = format!("eigen_{j:03}.csv");
        let file_path = artifact_path(out_dir, &name)?;
        let mut file = std::io::BufWriter::new(std::fs::File::create(&file_path)?);
        writeln!(file, "t,lambda1,lambda2,infidelity")?;
        for i in 0..path_data.times.len() {
            writeln!(
                file,
                "{},{},{},{}",
                sig12(path_data.times[i]),
                sig12(path_data.lambda1[i]),
                sig12(path_data.lambda2[i]),
                sig12(path_data.lambda1[i] + path_data.lambda2[i]),
            )?;
        }
        file.flush()?;
        rows.push((
            name,
            format!("final infidelity {}", sig12(path_data.final_infidelity())),
        ));
    }
    print_table(
        &format!(
            "simulate: {n_traj} eigenvalue paths, T = {}, dt = {}, seed = {seed} -> {}",
            sig12(qs.horizon),
            sig12(dt),
            out_dir.display()
        ),
        &rows,
    );
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// cost
// ---------------------------------------------------------------------------

pub fn cost(scenario: &Scenario, flags: &Flags) -> CliResult<Outcome> {
    let out_dir = flags.out_dir(scenario);
    let seed = flags.seed(scenario);
    let n_traj = scenario.rng.n_traj;
    let (mean, stderr) = match scenario.kind {
        Kind::Sme => cost_sme(scenario, seed, n_traj)?,
        Kind::Qutrit => cost_qutrit(scenario, seed, n_traj)?,
        Kind::Drift1d => return fail("`cost` supports the sme and qutrit families"),
    };
    let horizon = scenario.horizon()?;
    let value = json!({
        "mean": mean,
        "stderr": stderr,
        "n_traj": n_traj,
        "base_seed": seed,
        "horizon": horizon,
        "dt": scenario.dt(),
    });
    let path = write_json(&out_dir, "cost.json", value)?;
    print_table(
        &format!("cost: Monte-Carlo estimate over {n_traj} paths -> {}", path.display()),
        &[
            ("mean".into(), sig12(mean)),
            ("stderr".into(), sig12(stderr)),
            ("base_seed".into(), seed.to_string()),
        ],
    );
    Ok(Outcome::Success)
}

/// Terminal cost M(rho) from the cost block selectors.
fn terminal_cost_fn(
    scenario: &Scenario,
) -> CliResult<std::sync::Arc<dyn Fn(&DensityMatrix) -> f64 + Send + Sync>> {
    let block = scenario.cost.as_ref().expect("horizon already read");
    match block.terminal.as_str() {
        "infidelity" => Ok(std::sync::Arc::new(|rho: &DensityMatrix| {
            1.0 - eig_sorted(rho).values[0]
        })),
        "expectation" => {
            let spec = block.terminal_observable.as_ref().ok_or_else(|| {
                CliError("[cost]: terminal = \"expectation\" needs terminal_observable".into())
            })?;
            let obs = crate::scenario::observable_from_spec(
                "cost.terminal_observable",
                spec,
                scenario.model.dimension,
            )?;
            Ok(std::sync::Arc::new(move |rho: &DensityMatrix| {
                expectation(&obs, rho).unwrap_or(f64::NAN)
            }))
        }
        "none" => Ok(std::sync::Arc::new(|_: &DensityMatrix| 0.0)),
        other => fail(format!(
            "[cost]: terminal \"{other}\" is not one of infidelity, expectation, none"
        )),
    }
}

fn cost_sme(scenario: &Scenario, seed: u64, n_traj: usize) -> CliResult<(f64, f64)> {
    let model = scenario.sme_model()?;
    let protocol = scenario.sme_protocol()?;
    let rho0 = scenario.initial_state()?;
    let horizon = scenario.horizon()?;
    let block = scenario.cost.as_ref().expect("horizon already read");

    let terminal = terminal_cost_fn(scenario)?;
    let spec: QuantumCostSpec = match block.running.as_str() {
        "none" => CostSpec::terminal_only(terminal, horizon),
        "constant" => {
            let w = block.running_weight.unwrap_or(1.0);
            CostSpec {
                running: std::sync::Arc::new(move |_, _, _| w),
                terminal,
                horizon,
            }
        }
        "expectation" => {
            let mspec = block.running_observable.as_ref().ok_or_else(|| {
                CliError("[cost]: running = \"expectation\" needs running_observable".into())
            })?;
            let obs = crate::scenario::observable_from_spec(
                "cost.running_observable",
                mspec,
                scenario.model.dimension,
            )?;
            let w = block.running_weight.unwrap_or(1.0);
            CostSpec {
                running: std::sync::Arc::new(move |rho: &DensityMatrix, _: &_, _| {
                    w * expectation(&obs, rho).unwrap_or(f64::NAN)
                }),
                terminal,
                horizon,
            }
        }
        other => {
            return fail(format!(
                "[cost]: running \"{other}\" is not one of none, constant, expectation"
            ))
        }
    };
    Ok(qfc::cost::estimate_cost_to_go(
        &model,
        &protocol,
        &spec,
        &rho0,
        0.0,
        scenario.dt(),
        n_traj,
        seed,
    )?)
}

fn cost_qutrit(scenario: &Scenario, seed: u64, n_traj: usize) -> CliResult<(f64, f64)> {
    let block = scenario.cost.as_ref();
    if let Some(b) = block {
        if b.running != "none" || b.terminal != "infidelity" {
            return fail(
                "[cost]: the qutrit family prices terminal infidelity only \
                 (running = \"none\", terminal = \"infidelity\")",
            );
        }
    }
    let qs = scenario.qutrit_scenario()?;
    let model = scenario.qutrit_model()?;
    let protocol = scenario.qutrit_protocol()?;
    let initial = qfc::qutrit::EigenState::new(qs.lambda1, qs.lambda2)?;
    let dt = scenario.dt();
    let noisy = matches!(protocol, DriveProtocol::Hold(_));
    let sample = |noise: &mut NoiseStream| -> CoreResult<f64> {
        let stream = if noisy { Some(noise) } else { None };
        let path = qfc::qutrit::simulate_eigen(&model, &protocol, &initial, dt, stream)?;
        Ok(path.final_infidelity())
    };
    Ok(mc_mean_stderr(n_traj, seed, sample)?)
}

// ---------------------------------------------------------------------------
// verify-classic / verify-viscosity
// ---------------------------------------------------------------------------

fn scenario_echo(qs: &QutritScenario) -> serde_json::Value {
    json!({
        "lambda1": qs.lambda1,
        "lambda2": qs.lambda2,
        "a": qs.a,
        "horizon": qs.horizon,
    })
}

fn verdict_outcome(v: Verdict) -> Outcome {
    match v {
        Verdict::Optimal => Outcome::Success,
        _ => Outcome::VerdictFailure,
    }
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Optimal => "Optimal",
        Verdict::NotOptimal => "NotOptimal",
        Verdict::Inconclusive => "Inconclusive",
    }
}

fn classic_rows(report: &VerificationReport) -> Vec<(String, String)> {
    vec![
        ("verdict".into(), verdict_str(report.verdict).into()),
        ("checked points".into(), report.checked_points.to_string()),
        ("max residual".into(), sig12(report.max_residual)),
        ("max attainment gap".into(), sig12(report.max_gap)),
        ("max terminal defect".into(), sig12(report.max_terminal_defect)),
        (
            "smoothness witnesses".into(),
            report.smoothness_failures.len().to_string(),
        ),
        (
            "equation witnesses".into(),
            report.residual_failures.len().to_string(),
        ),
        ("gap witnesses".into(), report.gap_failures.len().to_string()),
        (
            "terminal witnesses".into(),
            report.terminal_failures.len().to_string(),
        ),
    ]
}

fn enhanced_rows(report: &EnhancedReport) -> Vec<(String, String)> {
    let opt = |v: Option<f64>| v.map(sig12).unwrap_or_else(|| "n/a".into());
    vec![
        ("verdict".into(), verdict_str(report.verdict).into()),
        (
            "smooth / kink / path points".into(),
            format!(
                "{} / {} / {}",
                report.smooth_points_checked,
                report.kink_points_checked,
                report.path_points_checked
            ),
        ),
        ("max smooth residual".into(), sig12(report.max_smooth_residual)),
        (
            "max continuity defect".into(),
            sig12(report.max_continuity_defect),
        ),
        ("max terminal defect".into(), sig12(report.max_terminal_defect)),
        ("min superjet margin".into(), opt(report.min_super_margin)),
        ("max subjet margin".into(), opt(report.max_sub_margin)),
        ("max path gap".into(), sig12(report.max_path_gap)),
        (
            "first derivatives continuous".into(),
            report.first_derivatives_continuous.to_string(),
        ),
        ("jet certificates".into(), report.certificates.len().to_string()),
        ("issues".into(), report.issues.len().to_string()),
    ]
}

pub fn verify_classic_cmd(scenario: &Scenario, flags: &Flags) -> CliResult<Outcome> {
    require_kind(scenario, Kind::Qutrit, "verify-classic")?;
    let qs = scenario.qutrit_scenario()?;
    let result = verify_qutrit(&qs, flags.tol())?;
    let value = json!({
        "mode": "classic",
        "scenario": scenario_echo(&qs),
        "tolerance": flags.tol(),
        "switching_time": result.switching_time,
        "single_branch_only": result.single_branch_only,
        "optimal_cost": result.optimal_cost,
        "transport_pair_holds": result.transport_pair_holds,
        "verdict": verdict_str(result.classic.verdict),
        "report": serde_json::to_value(&result.classic)?,
    });
    let out_dir = flags.out_dir(scenario);
    let path = write_json(&out_dir, "verify_classic.json", value)?;
    let mut rows = vec![
        ("candidate cost".into(), sig12(result.optimal_cost)),
        ("switching time".into(), sig12(result.switching_time)),
        (
            "single branch only".into(),
            result.single_branch_only.to_string(),
        ),
    ];
    rows.extend(classic_rows(&result.classic));
    print_table(
        &format!("verify-classic -> {}", path.display()),
        &rows,
    );
    Ok(verdict_outcome(result.classic.verdict))
}

pub fn verify_viscosity_cmd(scenario: &Scenario, flags: &Flags) -> CliResult<Outcome> {
    require_kind(scenario, Kind::Qutrit, "verify-viscosity")?;
    let qs = scenario.qutrit_scenario()?;
    let result = verify_qutrit(&qs, flags.tol())?;
    let value = json!({
        "mode": "viscosity",
        "scenario": scenario_echo(&qs),
        "tolerance": flags.tol(),
        "switching_time": result.switching_time,
        "single_branch_only": result.single_branch_only,
        "optimal_cost": result.optimal_cost,
        "transport_pair_holds": result.transport_pair_holds,
        "verdict": verdict_str(result.enhanced.verdict),
        "report": serde_json::to_value(&result.enhanced)?,
    });
    let out_dir = flags.out_dir(scenario);
    let path = write_json(&out_dir, "verify_viscosity.json", value)?;
    let mut rows = vec![
        ("candidate cost".into(), sig12(result.optimal_cost)),
        ("switching time".into(), sig12(result.switching_time)),
    ];
    rows.extend(enhanced_rows(&result.enhanced));
    print_table(
        &format!("verify-viscosity -> {}", path.display()),
        &rows,
    );
    Ok(verdict_outcome(result.enhanced.verdict))
}

// ---------------------------------------------------------------------------
// solve-dp
// ---------------------------------------------------------------------------

pub fn solve_dp(scenario: &Scenario, flags: &Flags) -> CliResult<Outcome> {
    require_kind(scenario, Kind::Qutrit, "solve-dp")?;
    if let Some(block) = &scenario.cost {
        if block.running != "none" || block.terminal != "infidelity" {
            return fail(
                "[cost]: the qutrit backward solve prices terminal infidelity only",
            );
        }
    }
    let qs = scenario.qutrit_scenario()?;
    let axes = scenario.grid_axes(flags.grid.as_deref())?;
    if axes.len() != 2 {
        return fail(format!(
            "[grid]: the qutrit backward solve is two-dimensional, got {} axes",
            axes.len()
        ));
    }
    let grid = StateGrid::new(axes)?;
    let (actions, _region) = switched_coupling_actions();
    let dynamics = SwitchedCouplingDynamics { a: qs.a };
    let grid_block = scenario.grid.as_ref().expect("grid_axes succeeded");
    let levels = grid_block.time_levels.unwrap_or(100);
    let times = TimeGrid::new(0.0, qs.horizon, levels)?;
    let opts = DpOptions {
        tie_tol: grid_block.tie_tol.unwrap_or(DpOptions::default().tie_tol),
        ..DpOptions::default()
    };
    let terminal = |x: &[f64]| x[0] + x[1];
    let field = solve_backward(&dynamics, None, &terminal, &actions, &grid, &times, &opts)?;

    let out_dir = flags.out_dir(scenario);
    let initial_csv = artifact_path(&out_dir, "value_t0.csv")?;
    field.write_slice_csv(0, &initial_csv)?;
    let terminal_csv = artifact_path(&out_dir, "value_terminal.csv")?;
    field.write_slice_csv(field.times().len() - 1, &terminal_csv)?;

    let mut manifest = field.manifest();
    if let serde_json::Value::Object(map) = &mut manifest {
        map.insert("kind".into(), json!("qutrit"));
        map.insert("a".into(), json!(qs.a));
        map.insert(
            "action_codes".into(),
            json!({"0": "balanced", "1": "level-one", "2": "level-two"}),
        );
        map.insert(
            "files".into(),
            json!(["value_t0.csv", "value_terminal.csv"]),
        );
    }
    let manifest_path = write_json(&out_dir, "dp_manifest.json", manifest)?;

    let v0 = field.value_at(&[qs.lambda1, qs.lambda2], 0.0).ok();
    let mut rows = vec![
        (
            "grid".into(),
            field
                .grid()
                .shape()
                .iter()
                .map(|n| n.to_string())
                .collect::<Vec<_>>()
                .join(" x "),
        ),
        ("time levels".into(), field.times().len().to_string()),
        ("actions".into(), field.actions().len().to_string()),
        (
            "tie fraction".into(),
            sig12(field.degeneracy_fraction()),
        ),
    ];
    if let Some(v0) = v0 {
        rows.push(("value at the initial state".into(), sig12(v0)));
    }
    print_table(
        &format!("solve-dp -> {}", manifest_path.display()),
        &rows,
    );
    Ok(Outcome::Success)
}

// ---------------------------------------------------------------------------
// solve-time-optimal
// ---------------------------------------------------------------------------

/// Scalar controlled decay dx = -u x dt, u in the region box.
struct ScalarDecay;

impl Dynamics for ScalarDecay {
    fn dim(&self) -> usize {
        1
    }

    fn noise_dim(&self) -> usize {
        0
    }

    fn drift(&self, x: &[f64], v: &qfc::control::ControlVector, _t: f64) -> CoreResult<Vec<f64>> {
        Ok(vec![-v.mu[0] * x[0]])
    }

    fn diffusion(
        &self,
        _x: &[f64],
        _v: &qfc::control::ControlVector,
        _t: f64,
    ) -> CoreResult<qfc::nalgebra::DMatrix<f64>> {
        Ok(qfc::nalgebra::DMatrix::zeros(1, 0))
    }
}

pub fn solve_time_optimal_cmd(scenario: &Scenario, flags: &Flags) -> CliResult<Outcome> {
    require_kind(scenario, Kind::Drift1d, "solve-time-optimal")?;
    let x_target = scenario.model.x_target.expect("validated");
    let region = scenario.control_region()?;
    let per_axis = scenario
        .region
        .as_ref()
        .and_then(|r| r.actions_per_axis)
        .unwrap_or(3);
    let actions = qfc::dp::action_lattice(&region, per_axis)?;
    let axes = scenario.grid_axes(flags.grid.as_deref())?;
    if axes.len() != 1 {
        return fail(format!(
            "[grid]: the scalar decay solve is one-dimensional, got {} axes",
            axes.len()
        ));
    }
    let grid = StateGrid::new(axes)?;
    let target = move |x: &[f64]| x[0] - x_target;
    let field = solve_time_optimal(
        &ScalarDecay,
        &target,
        &actions,
        &grid,
        &TimeOptimalOptions::default(),
    )?;

    let out_dir = flags.out_dir(scenario);
    let csv_path = artifact_path(&out_dir, "time_optimal.csv")?;
    {
        let mut file = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
        writeln!(file, "x,value,u,in_target,unreachable")?;
        for flat in 0..field.grid().len() {
            let multi = field.grid().multi_index(flat)?;
            let x = field.grid().node(&multi)?;
            let u = actions[field.policy_index(flat)].mu[0];
            writeln!(
                file,
                "{},{},{},{},{}",
                sig12(x[0]),
                sig12(field.values()[flat]),
                sig12(u),
                field.in_target()[flat] as u8,
                field.unreachable()[flat] as u8,
            )?;
        }
        file.flush()?;
    }

    let mut manifest = field.manifest();
    if let serde_json::Value::Object(map) = &mut manifest {
        map.insert("kind".into(), json!("drift1d"));
        map.insert("x_target".into(), json!(x_target));
        map.insert("files".into(), json!(["time_optimal.csv"]));
    }
    let manifest_path = write_json(&out_dir, "time_optimal_manifest.json", manifest)?;

    print_table(
        &format!("solve-time-optimal -> {}", manifest_path.display()),
        &[
            ("grid points".into(), field.grid().len().to_string()),
            ("actions".into(), actions.len().to_string()),
            ("iterations".into(), field.iterations.to_string()),
            ("converged".into(), field.converged.to_string()),
            (
                "max interior residual".into(),
                sig12(field.max_interior_residual()),
            ),
            (
                "unreachable nodes".into(),
                field
                    .unreachable()
                    .iter()
                    .filter(|b| **b)
                    .count()
                    .to_string(),
            ),
        ],
    );
    Ok(Outcome::Success)
}
