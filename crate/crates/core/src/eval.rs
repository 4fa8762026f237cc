//! Rollout benchmark of identified models against the plant that produced
//! their training data: zero-torque rollouts from fixed start states,
//! trajectory error, divergence and energy behaviour per cell.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::actuators::ActuatorKind;
use crate::data::Regime;
use crate::exec::Exec;
use crate::ident::{EnergyClass, FitResult, IdentError, Init, ModelKind};
use crate::sim::{compare, rollout, Comparison, Dynamics, Trajectory, ZeroTorque, RK4_DRIFT_BOUND};
use crate::systems::{PlantParams, System};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    pub q0: Vec<f64>,
    pub qd0: Vec<f64>,
}

impl Protocol {
    pub fn new(name: &str, q0: [f64; 2], qd0: [f64; 2]) -> Self {
        Self { name: name.into(), q0: q0.to_vec(), qd0: qd0.to_vec() }
    }

    /// Hanging down with a small pendulum velocity, and released from
    /// horizontal.
    pub fn defaults() -> Vec<Protocol> {
        vec![
            Protocol::new("rest", [0.0, 0.0], [0.0, 0.01]),
            Protocol::new("swing", [0.0, std::f64::consts::FRAC_PI_2], [0.0, 0.0]),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub duration: f64,
    pub protocols: Vec<Protocol>,
    /// State error that ends the prediction horizon.
    pub horizon_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { duration: 10.0, protocols: Protocol::defaults(), horizon_threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub kind: ModelKind,
    pub actuator: ActuatorKind,
    pub init: Init,
    pub system: System,
    pub regime: Regime,
    pub dataset_seed: u64,
    pub protocol: String,
    pub val_mse: f64,
    pub comparison: Comparison,
    pub diverged_at: Option<f64>,
    pub energy_class: EnergyClass,
    /// Largest rise of total energy above its running minimum, relative to
    /// the reference plant's upright energy.
    pub energy_rise: Option<f64>,
    pub gains_energy: bool,
}

impl EvalRow {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn verdict(&self) -> &'static str {
        match (self.diverged(), self.gains_energy) {
            (true, _) => "diverged",
            (false, true) => "gains energy",
            _ => "ok",
        }
    }
}

/// Physical energy scale of a plant (`m g l` of the pendulum).
pub fn energy_scale(plant: &PlantParams) -> f64 {
    plant.upright_energy().abs().max(f64::MIN_POSITIVE)
}

/// Model and reference rollouts of one cell.
pub struct CellRun {
    pub row: EvalRow,
    pub model: Trajectory,
    pub reference: Trajectory,
}

/// Zero-torque rollout of `fit` and of its reference plant from the
/// protocol's start state. Models without an energy of their own are scored
/// with the reference plant's energy of their states.
pub fn run_cell(fit: &FitResult, protocol: &Protocol, cfg: &EvalConfig) -> Result<CellRun, IdentError> {
    let plant = fit.dataset.reference_plant();
    let model = fit.model.compile()?;
    let dof = model.dof();
    let mut traj = rollout(&model, &mut ZeroTorque(dof), &protocol.q0, &protocol.qd0, cfg.duration);
    traj.fill_energy(&plant);
    let reference = rollout(&plant, &mut ZeroTorque(dof), &protocol.q0, &protocol.qd0, cfg.duration);
    let comparison = compare(&traj, &reference, cfg.horizon_threshold).expect("same step and dimension");
    let energy_rise = traj.max_energy_rise().map(|r| r / energy_scale(&plant));
    let row = EvalRow {
        label: fit.label.clone(),
        kind: fit.config.kind,
        actuator: fit.config.actuator,
        init: fit.config.init,
        system: fit.dataset.system,
        regime: fit.dataset.regime,
        dataset_seed: fit.dataset.seed,
        protocol: protocol.name.clone(),
        val_mse: fit.val_mse,
        comparison,
        diverged_at: traj.diverged_at.map(|k| k as f64 * traj.dt),
        energy_class: fit.model.energy_class(),
        gains_energy: energy_rise.is_some_and(|r| !(r <= RK4_DRIFT_BOUND)),
        energy_rise,
    };
    Ok(CellRun { row, model: traj, reference })
}

/// Every fit under every protocol, in input order.
pub fn evaluate(fits: &[FitResult], cfg: &EvalConfig, exec: Exec) -> Result<Vec<EvalRow>, IdentError> {
    let cells: Vec<(usize, usize)> =
        (0..fits.len()).flat_map(|f| (0..cfg.protocols.len()).map(move |p| (f, p))).collect();
    exec.map(&cells, |&(f, p)| run_cell(&fits[f], &cfg.protocols[p], cfg).map(|c| c.row)).into_iter().collect()
}

fn sci(x: f64) -> String {
    if x.is_finite() { format!("{x:.2e}") } else { format!("{x}") }
}

fn vec_sci(v: &[f64]) -> String {
    v.iter().map(|x| sci(*x)).collect::<Vec<_>>().join(" / ")
}

/// Aggregate table, one row per (model, dataset, protocol).
pub fn render_markdown(rows: &[EvalRow]) -> String {
    let mut out = String::from(
        "| model | system | data | protocol | val MSE | RMSE q | RMSE q̇ | horizon [s] | diverged [s] | energy class | energy rise | verdict |\n\
         |---|---|---|---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {}/{} | {} | {} | {} | {} | {} | {} | {:?} | {} | {} |",
            r.label,
            r.system,
            r.regime.name(),
            r.dataset_seed,
            r.protocol,
            sci(r.val_mse),
            vec_sci(&r.comparison.rmse_q),
            vec_sci(&r.comparison.rmse_qd),
            r.comparison.horizon.map_or("-".into(), |h| format!("{h:.2}")),
            r.diverged_at.map_or("-".into(), |t| format!("{t:.2}")),
            r.energy_class,
            r.energy_rise.map_or("-".into(), sci),
            r.verdict(),
        );
    }
    out
}
