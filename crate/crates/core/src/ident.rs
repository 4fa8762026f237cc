//! System identification: gradient fits through the articulated-body
//! dynamics (with or without known kinematics), linear least squares on the
//! inverse dynamics, and a black-box acceleration network.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuators::{ActuatorError, ActuatorKind, ActuatorModel, Mlp};
use crate::data::{Dataset, Regime, Sample};
use crate::dynamics::{forward_dynamics, rnea_inverse, total_energy};
use crate::exec::Exec;
use crate::lie::GeneralizedInertia;
use crate::model::{
    central_inertia, is_physical_inertia, principal_moments, rpy_from_rotation, KinematicTree, ModelError, RealizedLink,
    RealizedTree, TreeDoc, INERTIAL_PARAMS, PARAMS_PER_LINK,
};
use crate::scalar::{gradient, DiffScalar, ParamEntry, ParamSet, Real, Tape};
use crate::sim::Dynamics;
use crate::systems::{PlantParams, System};

pub const FIT_FORMAT: &str = "diffnea-fit";
pub const FIT_VERSION: u32 = 1;

/// Samples per tape. Fixed so the reduction order never depends on the
/// number of workers.
const CHUNK: usize = 16;

/// Relative tolerance on the plausibility checks of realized inertias.
const PLAUSIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IdentError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has {got} joints, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("{0}")]
    NumericAbort(Box<NumericAbort>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
}

/// Diagnostics of a training run stopped by a non-finite loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NumericAbort {
    pub restart: usize,
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub params: Vec<ParamEntry>,
}

impl std::fmt::Display for NumericAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "non-finite loss {} at restart {}, epoch {}, batch {}",
            self.loss, self.restart, self.epoch, self.batch
        )?;
        if let Some(p) = self.params.iter().find(|p| !p.value.is_finite()) {
            write!(f, " (first non-finite parameter: {})", p.name)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Kinematics and inertias learned.
    NoKinDiffnea,
    /// Inertias learned, kinematics known.
    Diffnea,
    /// Linear regression on the inverse dynamics.
    Nea,
    /// Black-box `q̈ = f(q, q̇, τ)`.
    Ffnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::NoKinDiffnea, ModelKind::Diffnea, ModelKind::Nea, ModelKind::Ffnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::NoKinDiffnea => "no_kin_diffnea",
            ModelKind::Diffnea => "diffnea",
            ModelKind::Nea => "nea",
            ModelKind::Ffnn => "ffnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    WithPrior,
    WithoutPrior,
}

impl Init {
    pub fn name(self) -> &'static str {
        match self {
            Init::WithPrior => "with_prior",
            Init::WithoutPrior => "without_prior",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "with_prior" | "prior" => Some(Init::WithPrior),
            "without_prior" | "random" => Some(Init::WithoutPrior),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    /// Step size reached at the last step (geometric decay); `None` keeps
    /// `lr` constant.
    pub lr_final: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, lr_final: None, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), IdentError> {
        let lr_ok = |x: f64| x > 0.0 && x.is_finite();
        if !lr_ok(self.lr) || self.lr_final.is_some_and(|l| !lr_ok(l)) {
            return Err(IdentError::Config(format!("step size must be positive, got {:?}", self)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(IdentError::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(IdentError::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    /// Step size at `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_final {
            Some(end) if total > 1 => self.lr * (end / self.lr).powf(step as f64 / (total - 1) as f64),
            _ => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub actuator: ActuatorKind,
    pub init: Init,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Defaults to 5 for no-Kin DiffNEA without prior, 1 otherwise.
    pub restarts: Option<usize>,
    /// Hidden layers of every network (actuator nets and the FF-NN model).
    pub hidden: Vec<usize>,
    pub angle_encoding: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Diffnea,
            actuator: ActuatorKind::None,
            init: Init::WithPrior,
            adam: AdamConfig::default(),
            batch_size: 256,
            epochs: 5000,
            seed: 0,
            validation_fraction: 0.1,
            restarts: None,
            hidden: vec![32, 32],
            angle_encoding: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), IdentError> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(IdentError::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(IdentError::Config(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        if self.restarts == Some(0) {
            return Err(IdentError::Config("restarts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn restart_count(&self) -> usize {
        self.restarts.unwrap_or(match (self.kind, self.init) {
            (ModelKind::NoKinDiffnea, Init::WithoutPrior) => 5,
            _ => 1,
        })
    }

    /// Short label of the (model, actuator, init) cell.
    pub fn label(&self) -> String {
        match self.kind {
            ModelKind::Nea | ModelKind::Ffnn => self.kind.name().to_string(),
            _ => format!("{}-{}-{}", self.kind.name(), self.actuator.name(), self.init.name()),
        }
    }
}

/// First and second moment estimates of ADAM.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected ADAM update of the learnable entries at step size `lr`.
/// Frozen entries are left untouched.
pub fn adam_step(params: &mut ParamSet, grads: &[f64], state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<(), IdentError> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(IdentError::Dimension { expected: n, got: grads.len().min(state.m.len()).min(state.v.len()) });
    }
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let mask = params.learnable_mask();
    let mut values = params.values();
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let (mh, vh) = (state.m[i] / c1, state.v[i] / c2);
        values[i] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    params.set_values(&values);
    Ok(())
}

/// Standardized black-box model `q̈ = f(q, q̇, τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccelNet {
    pub dof: usize,
    pub mlp: Mlp,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    pub output_mean: Vec<f64>,
    pub output_std: Vec<f64>,
}

impl AccelNet {
    /// Network with standardization statistics taken from `samples`.
    pub fn fit_scaling(dof: usize, hidden: &[usize], samples: &[Sample]) -> Self {
        let inputs: Vec<Vec<f64>> = samples.iter().map(|s| [&s.q[..], &s.qd, &s.tau].concat()).collect();
        let outputs: Vec<Vec<f64>> = samples.iter().map(|s| s.qdd.clone()).collect();
        let (input_mean, input_std) = moments(&inputs, 3 * dof);
        let (output_mean, output_std) = moments(&outputs, dof);
        Self { dof, mlp: Mlp::new(3 * dof, hidden, dof), input_mean, input_std, output_mean, output_std }
    }

    pub fn forward<T: Real>(&self, params: &[T], q: &[T], qd: &[T], tau: &[T]) -> Vec<T> {
        let x: Vec<T> = q
            .iter()
            .chain(qd)
            .chain(tau)
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(v, (m, s))| (*v - T::cst(*m)) * T::cst(1.0 / s))
            .collect();
        self.mlp
            .forward(params, &x)
            .into_iter()
            .zip(self.output_mean.iter().zip(&self.output_std))
            .map(|(y, (m, s))| y * T::cst(*s) + T::cst(*m))
            .collect()
    }
}

fn moments(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mean: Vec<f64> = (0..dim).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std = (0..dim)
        .map(|k| {
            let var = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 }
        })
        .collect();
    (mean, std)
}

/// Identified model, serializable and loadable for rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum LearnedModel {
    /// Virtual parameters of the tree followed by the actuator parameters.
    Rigid { tree: TreeDoc, actuator: ActuatorModel, params: ParamSet },
    /// Unconstrained 10-vectors `(m, m·p, J_xx, J_xy, J_xz, J_yy, J_yz, J_zz)`
    /// per link on the documented kinematics.
    Regressed { tree: TreeDoc, inertial: Vec<[f64; INERTIAL_PARAMS]> },
    Network { net: AccelNet, params: Vec<f64> },
}

impl LearnedModel {
    pub fn dof(&self) -> usize {
        match self {
            LearnedModel::Rigid { tree, .. } | LearnedModel::Regressed { tree, .. } => tree.links.len(),
            LearnedModel::Network { net, .. } => net.dof,
        }
    }

    /// Whether zero-torque rollouts are guaranteed not to gain energy.
    pub fn energy_class(&self) -> EnergyClass {
        match self {
            LearnedModel::Rigid { actuator, .. } if actuator.kind.is_energy_conserving() => EnergyClass::Conserving,
            LearnedModel::Rigid { actuator, .. } if actuator.kind.is_energy_bounded() => EnergyClass::Bounded,
            LearnedModel::Regressed { .. } => EnergyClass::Conserving,
            _ => EnergyClass::Unbounded,
        }
    }

    /// Realize the parameters once for fast repeated evaluation.
    pub fn compile(&self) -> Result<CompiledModel, IdentError> {
        Ok(match self {
            LearnedModel::Rigid { tree, actuator, params } => {
                let kt = KinematicTree::from_doc(tree)?;
                let values = params.values();
                let n = kt.dof() * PARAMS_PER_LINK;
                CompiledModel::Rigid { tree: kt.realize(&values)?, actuator: actuator.clone(), act_params: values[n..].to_vec() }
            }
            LearnedModel::Regressed { tree, inertial } => {
                let kt = KinematicTree::from_doc(tree)?;
                CompiledModel::Rigid {
                    tree: regressed_tree(&kt, inertial),
                    actuator: ActuatorModel::for_tree(ActuatorKind::None, &kt),
                    act_params: Vec::new(),
                }
            }
            LearnedModel::Network { net, params } => CompiledModel::Network { net: net.clone(), params: params.clone() },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyClass {
    Conserving,
    Bounded,
    Unbounded,
}

#[derive(Debug, Clone)]
pub enum CompiledModel {
    Rigid { tree: RealizedTree<f64>, actuator: ActuatorModel, act_params: Vec<f64> },
    Network { net: AccelNet, params: Vec<f64> },
}

impl Dynamics for CompiledModel {
    fn dof(&self) -> usize {
        match self {
            CompiledModel::Rigid { tree, .. } => tree.dof(),
            CompiledModel::Network { net, .. } => net.dof,
        }
    }

    fn accel(&self, q: &[f64], qd: &[f64], tau: &[f64]) -> Option<Vec<f64>> {
        match self {
            CompiledModel::Rigid { tree, actuator, act_params } => {
                let u = actuator.apply(act_params, tau, q, qd).ok()?;
                forward_dynamics(tree, q, qd, &u).ok()
            }
            CompiledModel::Network { net, params } => Some(net.forward(params, q, qd, tau)),
        }
    }

    fn energy(&self, q: &[f64], qd: &[f64]) -> Option<(f64, f64)> {
        match self {
            CompiledModel::Rigid { tree, .. } => total_energy(tree, q, qd).ok(),
            CompiledModel::Network { .. } => None,
        }
    }
}

fn regressed_tree(tree: &KinematicTree, inertial: &[[f64; INERTIAL_PARAMS]]) -> RealizedTree<f64> {
    let fixed = tree.nominal_fixed_transforms::<f64>();
    let links = tree
        .links
        .iter()
        .zip(fixed)
        .zip(inertial)
        .map(|((l, fixed), phi)| RealizedLink { fixed, joint: l.joint, inertia: GeneralizedInertia::from_vector(phi) })
        .collect();
    tree.realized_with(links)
}

/// Physical parameters of one link as identified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub name: String,
    pub mass: f64,
    pub com: [f64; 3],
    /// About the CoM, `[xx, xy, xz, yy, yz, zz]`.
    pub inertia: [f64; 6],
    pub principal: [f64; 3],
    pub kin_rpy: [f64; 3],
    pub kin_xyz: [f64; 3],
    pub mass_ok: bool,
    pub triangle_ok: bool,
}

impl LinkReport {
    pub fn is_plausible(&self) -> bool {
        self.mass_ok && self.triangle_ok
    }
}

fn link_reports(tree: &KinematicTree, realized: &RealizedTree<f64>) -> Vec<LinkReport> {
    tree.links
        .iter()
        .zip(&realized.links)
        .map(|(l, r)| {
            let rot = r.fixed.rotation.value();
            let (mass, com, inertia) = central_inertia(&r.inertia).unwrap_or((0.0, [0.0; 3], [0.0; 6]));
            let principal = principal_moments(&inertia);
            let scale = principal.iter().fold(0.0f64, |a, p| a.max(p.abs())).max(f64::MIN_POSITIVE);
            LinkReport {
                name: l.name.clone(),
                mass,
                com,
                inertia,
                principal,
                kin_rpy: rpy_from_rotation(&rot),
                kin_xyz: r.fixed.translation.value(),
                mass_ok: mass >= 0.0,
                triangle_ok: is_physical_inertia(principal, PLAUSIBILITY_TOL * scale),
            }
        })
        .collect()
}

/// Rank and conditioning of the inverse-dynamics regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub rows: usize,
    pub columns: usize,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// RMS of `Y θ − τ` over the training rows.
    pub torque_rms: f64,
    /// Same on the validation rows (0 without a validation split).
    pub val_torque_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub system: System,
    pub regime: Regime,
    pub seed: u64,
    pub plant_hash: String,
    pub n_samples: usize,
    /// Whether the labels include the plant's friction.
    pub friction: bool,
    pub plant: PlantParams,
}

impl DatasetRef {
    pub fn of(d: &Dataset) -> Self {
        Self {
            system: d.meta.system,
            regime: d.meta.regime,
            seed: d.meta.seed,
            plant_hash: d.meta.plant_hash.clone(),
            n_samples: d.len(),
            friction: d.meta.friction,
            plant: d.meta.plant,
        }
    }

    /// The plant that produced the labels.
    pub fn reference_plant(&self) -> PlantParams {
        if self.friction { self.plant } else { self.plant.frictionless() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub format: String,
    pub version: u32,
    pub label: String,
    pub config: TrainConfig,
    pub dataset: DatasetRef,
    pub model: LearnedModel,
    /// Empty for the black-box model.
    pub links: Vec<LinkReport>,
    /// Realized friction coefficients (`μ = θ²`) of coefficient actuators.
    pub actuator_coefficients: Vec<(String, f64)>,
    /// Mean training loss per epoch.
    pub train_curve: Vec<f64>,
    /// Validation MSE after each epoch (index 0 is the initial model).
    pub val_curve: Vec<f64>,
    pub best_epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Best validation MSE of each restart.
    pub restart_val_mse: Vec<f64>,
    pub regression: Option<RegressionReport>,
    pub warnings: Vec<String>,
    /// Seconds spent fitting. Not serialized, so results of identical runs
    /// are byte-identical.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

impl FitResult {
    /// Running minimum of the validation curve (the checkpointed loss).
    pub fn best_curve(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.val_curve
            .iter()
            .map(|v| {
                if *v < best {
                    best = *v;
                }
                best
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fit results serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn all_links_plausible(&self) -> bool {
        self.links.iter().all(LinkReport::is_plausible)
    }
}

/// Squared forward-dynamics error summed over a chunk, on one tape.
trait Objective: Sync {
    fn chunk_loss<'t>(&self, params: &[DiffScalar<'t>], chunk: &[&Sample]) -> Option<DiffScalar<'t>>;
    /// Summed squared error of the f64 model on `samples`.
    fn sse(&self, values: &[f64], samples: &[&Sample]) -> f64;
}

struct RigidObjective<'a> {
    tree: &'a KinematicTree,
    actuator: &'a ActuatorModel,
}

impl RigidObjective<'_> {
    fn split<'p, T>(&self, params: &'p [T]) -> (&'p [T], &'p [T]) {
        params.split_at(self.tree.dof() * PARAMS_PER_LINK)
    }
}

pub(crate) fn sample_error<T: Real>(tree: &RealizedTree<T>, actuator: &ActuatorModel, act: &[T], s: &Sample) -> Option<T> {
    let c = |v: &[f64]| v.iter().map(|x| T::cst(*x)).collect::<Vec<T>>();
    let (q, qd, tau) = (c(&s.q), c(&s.qd), c(&s.tau));
    let u = actuator.apply(act, &tau, &q, &qd).ok()?;
    let qdd = forward_dynamics(tree, &q, &qd, &u).ok()?;
    Some(qdd.into_iter().zip(&s.qdd).fold(T::zero(), |acc, (a, y)| acc + (a - T::cst(*y)).square()))
}

impl Objective for RigidObjective<'_> {
    fn chunk_loss<'t>(&self, params: &[DiffScalar<'t>], chunk: &[&Sample]) -> Option<DiffScalar<'t>> {
        let (tp, ap) = self.split(params);
        let tree = self.tree.realize(tp).ok()?;
        chunk.iter().try_fold(DiffScalar::constant(0.0), |acc, s| Some(acc + sample_error(&tree, self.actuator, ap, s)?))
    }

    fn sse(&self, values: &[f64], samples: &[&Sample]) -> f64 {
        let (tp, ap) = self.split(values);
        let Ok(tree) = self.tree.realize(tp) else { return f64::NAN };
        samples.iter().map(|s| sample_error(&tree, self.actuator, ap, s).unwrap_or(f64::NAN)).sum()
    }
}

struct NetObjective<'a> {
    net: &'a AccelNet,
}

fn net_error<T: Real>(net: &AccelNet, params: &[T], s: &Sample) -> T {
    let c = |v: &[f64]| v.iter().map(|x| T::cst(*x)).collect::<Vec<T>>();
    let y = net.forward(params, &c(&s.q), &c(&s.qd), &c(&s.tau));
    y.into_iter().zip(&s.qdd).fold(T::zero(), |acc, (a, t)| acc + (a - T::cst(*t)).square())
}

impl Objective for NetObjective<'_> {
    fn chunk_loss<'t>(&self, params: &[DiffScalar<'t>], chunk: &[&Sample]) -> Option<DiffScalar<'t>> {
        Some(chunk.iter().fold(DiffScalar::constant(0.0), |acc, s| acc + net_error(self.net, params, s)))
    }

    fn sse(&self, values: &[f64], samples: &[&Sample]) -> f64 {
        samples.iter().map(|s| net_error(self.net, values, s)).sum()
    }
}

/// Summed loss and gradient over `batch`, reduced in chunk order.
fn batch_loss_grad<O: Objective>(obj: &O, params: &ParamSet, batch: &[&Sample], exec: Exec) -> (f64, Vec<f64>) {
    let chunks: Vec<&[&Sample]> = batch.chunks(CHUNK).collect();
    let parts = exec.map(&chunks, |chunk| {
        let tape = Tape::new();
        let p = params.bind(&tape);
        match obj.chunk_loss(&p, chunk) {
            Some(loss) if loss.value().is_finite() => {
                let g = gradient(loss, &p).unwrap_or_else(|_| vec![0.0; p.len()]);
                (loss.value(), g)
            }
            Some(loss) => (loss.value(), vec![0.0; p.len()]),
            None => (f64::NAN, vec![0.0; p.len()]),
        }
    });
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    (loss, grad)
}

/// Summed squared forward-dynamics error of the rigid-body model and its
/// gradient with respect to `params` (tree parameters, then actuator).
pub fn rigid_batch_loss(
    tree: &KinematicTree,
    actuator: &ActuatorModel,
    params: &ParamSet,
    batch: &[Sample],
    exec: Exec,
) -> (f64, Vec<f64>) {
    let refs: Vec<&Sample> = batch.iter().collect();
    batch_loss_grad(&RigidObjective { tree, actuator }, params, &refs, exec)
}

/// Mean squared per-joint error of the f64 model.
fn mse<O: Objective>(obj: &O, values: &[f64], samples: &[&Sample], dof: usize, exec: Exec) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let chunks: Vec<&[&Sample]> = samples.chunks(CHUNK * 8).collect();
    let sse: f64 = exec.map(&chunks, |c| obj.sse(values, c)).into_iter().sum();
    sse / (samples.len() * dof) as f64
}

struct RunOutcome {
    params: ParamSet,
    train_curve: Vec<f64>,
    val_curve: Vec<f64>,
    best_epoch: usize,
    best_val: f64,
}

/// ADAM over shuffled mini-batches with best-validation checkpointing.
fn train_run<O: Objective>(
    obj: &O,
    mut params: ParamSet,
    train: &[&Sample],
    val: &[&Sample],
    dof: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    restart: usize,
    exec: Exec,
) -> Result<RunOutcome, IdentError> {
    let monitor = if val.is_empty() { train } else { val };
    let mut state = AdamState::new(params.len());
    let mut idx: Vec<usize> = (0..train.len()).collect();
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let initial = mse(obj, &params.values(), monitor, dof, exec);
    let mut best = (if initial.is_finite() { initial } else { f64::INFINITY }, params.values(), 0);
    let mut val_curve = vec![initial];
    let mut train_curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        idx.shuffle(rng);
        let mut epoch_loss = 0.0;
        for (b, batch_idx) in idx.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| train[i]).collect();
            let (loss, grad) = batch_loss_grad(obj, &params, &batch, exec);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(IdentError::NumericAbort(Box::new(NumericAbort {
                    restart,
                    epoch,
                    batch: b,
                    loss,
                    params: params.entries().to_vec(),
                })));
            }
            epoch_loss += loss;
            adam_step(&mut params, &grad, &mut state, &cfg.adam, cfg.adam.lr_at(step, total))?;
            step += 1;
        }
        train_curve.push(epoch_loss / (train.len() * dof) as f64);
        let v = mse(obj, &params.values(), monitor, dof, exec);
        val_curve.push(v);
        if v < best.0 {
            best = (v, params.values(), epoch);
        }
    }
    params.set_values(&best.1);
    Ok(RunOutcome { params, train_curve, val_curve, best_epoch: best.2, best_val: best.0 })
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

fn check_dataset(dataset: &Dataset, dof: usize) -> Result<(), IdentError> {
    if dataset.is_empty() {
        return Err(IdentError::Empty);
    }
    if dataset.dof() != dof {
        return Err(IdentError::Dimension { expected: dof, got: dataset.dof() });
    }
    Ok(())
}

/// Runs every restart, keeps the best validation loss. The first failure
/// aborts the fit.
fn best_of_restarts<O: Objective>(
    obj: &O,
    init: impl Fn(&mut ChaCha8Rng) -> ParamSet + Sync,
    train: &[&Sample],
    val: &[&Sample],
    dof: usize,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(RunOutcome, Vec<f64>), IdentError> {
    let runs = exec.map_range(cfg.restart_count(), |r| {
        let mut rng = restart_rng(cfg.seed, r);
        let params = init(&mut rng);
        train_run(obj, params, train, val, dof, cfg, &mut rng, r, exec)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>, _>>()?;
    let scores: Vec<f64> = runs.iter().map(|r| r.best_val).collect();
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| a.best_val.total_cmp(&b.best_val).then(i.cmp(j)))
        .map(|(_, r)| r)
        .expect("at least one restart");
    Ok((best, scores))
}

/// Gradient fit of the rigid-body model through the articulated-body
/// dynamics. `tree` supplies the structure and the prior; `cfg.kind` picks
/// which groups are learned (inertias only, or kinematics too).
pub fn fit_diffnea(tree: &KinematicTree, dataset: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<FitResult, IdentError> {
    cfg.validate()?;
    let start = Instant::now();
    let tree = match cfg.kind {
        ModelKind::Diffnea => tree.with_learn_flags(false, true),
        ModelKind::NoKinDiffnea => tree.with_learn_flags(true, true),
        k => return Err(IdentError::Config(format!("fit_diffnea cannot train `{}`", k.name()))),
    };
    let dof = tree.dof();
    check_dataset(dataset, dof)?;
    let mut actuator = ActuatorModel::for_tree(cfg.actuator, &tree);
    actuator.hidden = cfg.hidden.clone();
    actuator.angle_encoding = cfg.angle_encoding;
    let (prior, warnings) = tree.prior_params();

    let (train, val) = dataset.split(cfg.validation_fraction, cfg.seed);
    let (train_refs, val_refs): (Vec<&Sample>, Vec<&Sample>) = (train.iter().collect(), val.iter().collect());
    let obj = RigidObjective { tree: &tree, actuator: &actuator };
    let init = |rng: &mut ChaCha8Rng| {
        let mut ps = match cfg.init {
            Init::WithPrior => prior.clone(),
            Init::WithoutPrior => tree.random_params(rng),
        };
        ps.extend_prefixed("", &actuator.init_params(rng)).expect("actuator names are prefixed");
        ps
    };
    let (run, scores) = best_of_restarts(&obj, init, &train_refs, &val_refs, dof, cfg, exec)?;

    let values = run.params.values();
    let realized = tree.realize(&values)?;
    let act_values = &values[dof * PARAMS_PER_LINK..];
    let actuator_coefficients = if actuator.kind.coefficients().is_empty() {
        Vec::new()
    } else {
        run.params.entries()[dof * PARAMS_PER_LINK..]
            .iter()
            .map(|e| (e.name.replace("sqrt_", ""), e.value * e.value))
            .collect()
    };
    debug_assert_eq!(act_values.len(), actuator.n_params());
    let train_mse = mse(&obj, &values, &train_refs, dof, exec);
    Ok(FitResult {
        format: FIT_FORMAT.into(),
        version: FIT_VERSION,
        label: cfg.label(),
        config: cfg.clone(),
        dataset: DatasetRef::of(dataset),
        links: link_reports(&tree, &realized),
        model: LearnedModel::Rigid { tree: tree.to_doc(), actuator, params: run.params },
        actuator_coefficients,
        train_curve: run.train_curve,
        val_curve: run.val_curve,
        best_epoch: run.best_epoch,
        train_mse,
        val_mse: run.best_val,
        restart_val_mse: scores,
        regression: None,
        warnings,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Unit-basis realized trees: entry `j·10 + k` carries basis vector `e_k`
/// on link `j` and zero inertia elsewhere.
fn basis_trees(tree: &KinematicTree) -> Vec<RealizedTree<f64>> {
    let n = tree.dof();
    (0..n * INERTIAL_PARAMS)
        .map(|c| {
            let mut phis = vec![[0.0; INERTIAL_PARAMS]; n];
            phis[c / INERTIAL_PARAMS][c % INERTIAL_PARAMS] = 1.0;
            regressed_tree(tree, &phis)
        })
        .collect()
}

/// Regressor rows `Y(q, q̇, q̈)` (one per joint) of a sample: column `c` is
/// the inverse dynamics of the `c`-th basis tree.
pub fn regressor(tree: &KinematicTree, sample: &Sample) -> Result<Vec<Vec<f64>>, IdentError> {
    regressor_with(&basis_trees(tree), sample)
}

fn regressor_with(bases: &[RealizedTree<f64>], s: &Sample) -> Result<Vec<Vec<f64>>, IdentError> {
    let dof = s.q.len();
    let mut rows = vec![vec![0.0; bases.len()]; dof];
    for (c, b) in bases.iter().enumerate() {
        let (u, _) = rnea_inverse(b, &s.q, &s.qd, &s.qdd).map_err(|e| IdentError::Config(e.to_string()))?;
        for (row, v) in rows.iter_mut().zip(u) {
            row[c] = v;
        }
    }
    Ok(rows)
}

/// Inverse-dynamics torques of the 10-vector parameterization.
pub fn regressed_torque(tree: &KinematicTree, inertial: &[[f64; INERTIAL_PARAMS]], s: &Sample) -> Vec<f64> {
    let rt = regressed_tree(tree, inertial);
    rnea_inverse(&rt, &s.q, &s.qd, &s.qdd).map(|(u, _)| u).unwrap_or_else(|_| vec![f64::NAN; s.q.len()])
}

fn stack_regressor(bases: &[RealizedTree<f64>], samples: &[Sample], exec: Exec) -> Result<(DMatrix<f64>, DVector<f64>), IdentError> {
    let dof = samples.first().map_or(0, |s| s.q.len());
    let blocks = exec.map(samples, |s| regressor_with(bases, s));
    let cols = bases.len();
    let mut y = DMatrix::zeros(samples.len() * dof, cols);
    let mut tau = DVector::zeros(samples.len() * dof);
    for (i, (block, s)) in blocks.into_iter().zip(samples).enumerate() {
        for (j, row) in block?.into_iter().enumerate() {
            for (c, v) in row.into_iter().enumerate() {
                y[(i * dof + j, c)] = v;
            }
            tau[i * dof + j] = s.tau[j];
        }
    }
    Ok((y, tau))
}

fn rms(v: &DVector<f64>) -> f64 {
    if v.is_empty() { 0.0 } else { (v.norm_squared() / v.len() as f64).sqrt() }
}

/// Minimum-norm least-squares estimate of the 10 standard inertial
/// parameters per link from `τ = Y θ`, on the documented kinematics.
/// Directions below a relative singular-value cutoff are unidentifiable and
/// set to zero; the rank is reported.
pub fn fit_nea_linear(tree: &KinematicTree, dataset: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<FitResult, IdentError> {
    let start = Instant::now();
    let dof = tree.dof();
    check_dataset(dataset, dof)?;
    let (train, val) = dataset.split(cfg.validation_fraction, cfg.seed);
    let bases = basis_trees(tree);
    let (y, tau) = stack_regressor(&bases, &train, exec)?;
    let svd = y.clone().svd(true, true);
    let sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    let cutoff = sv.iter().fold(0.0f64, |a, s| a.max(*s)) * 1e-10;
    let rank = sv.iter().filter(|s| **s > cutoff).count();
    let theta = svd.solve(&tau, cutoff).map_err(|e| IdentError::Config(e.to_string()))?;
    let inertial: Vec<[f64; INERTIAL_PARAMS]> = theta
        .as_slice()
        .chunks(INERTIAL_PARAMS)
        .map(|c| c.try_into().expect("10 columns per link"))
        .collect();
    let torque_rms = rms(&(&y * &theta - &tau));
    let val_torque_rms = if val.is_empty() {
        0.0
    } else {
        let (yv, tv) = stack_regressor(&bases, &val, exec)?;
        rms(&(&yv * &theta - &tv))
    };

    let realized = regressed_tree(tree, &inertial);
    let links = link_reports(tree, &realized);
    let mut warnings: Vec<String> = links
        .iter()
        .filter(|l| !l.is_plausible())
        .map(|l| format!("link `{}`: physically implausible estimate (mass {:.4e}, principal {:?})", l.name, l.mass, l.principal))
        .collect();
    if rank < bases.len() {
        warnings.push(format!("regressor rank {rank} of {}; minimum-norm solution", bases.len()));
    }
    let model = LearnedModel::Regressed { tree: tree.to_doc(), inertial };
    let compiled = model.compile()?;
    let accel_mse = |set: &[Sample]| forward_mse(&compiled, set);
    Ok(FitResult {
        format: FIT_FORMAT.into(),
        version: FIT_VERSION,
        label: cfg.label(),
        config: TrainConfig { kind: ModelKind::Nea, actuator: ActuatorKind::None, ..cfg.clone() },
        dataset: DatasetRef::of(dataset),
        model,
        links,
        actuator_coefficients: Vec::new(),
        train_curve: Vec::new(),
        val_curve: Vec::new(),
        best_epoch: 0,
        train_mse: accel_mse(&train),
        val_mse: if val.is_empty() { f64::NAN } else { accel_mse(&val) },
        restart_val_mse: Vec::new(),
        regression: Some(RegressionReport {
            rows: y.nrows(),
            columns: y.ncols(),
            rank,
            singular_values: sv,
            torque_rms,
            val_torque_rms,
        }),
        warnings,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Mean squared forward-dynamics error of any model on `samples`.
pub fn forward_mse<D: Dynamics + ?Sized>(model: &D, samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let dof = samples[0].q.len();
    let sse: f64 = samples
        .iter()
        .map(|s| match model.accel(&s.q, &s.qd, &s.tau) {
            Some(a) => a.iter().zip(&s.qdd).map(|(a, y)| (a - y).powi(2)).sum(),
            None => f64::NAN,
        })
        .sum();
    sse / (samples.len() * dof) as f64
}

/// Black-box baseline `q̈ = f(q, q̇, τ)`, trained by ADAM on the squared loss.
pub fn fit_ffnn(dataset: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<FitResult, IdentError> {
    cfg.validate()?;
    let start = Instant::now();
    if dataset.is_empty() {
        return Err(IdentError::Empty);
    }
    let dof = dataset.dof();
    let (train, val) = dataset.split(cfg.validation_fraction, cfg.seed);
    let (train_refs, val_refs): (Vec<&Sample>, Vec<&Sample>) = (train.iter().collect(), val.iter().collect());
    let net = AccelNet::fit_scaling(dof, &cfg.hidden, &train);
    let obj = NetObjective { net: &net };
    let init = |rng: &mut ChaCha8Rng| {
        let mut ps = ParamSet::new();
        for (k, v) in net.mlp.init(rng).into_iter().enumerate() {
            ps.push(format!("net.w{k}"), v, true).expect("unique");
        }
        ps
    };
    let (run, scores) = best_of_restarts(&obj, init, &train_refs, &val_refs, dof, cfg, exec)?;
    let values = run.params.values();
    let train_mse = mse(&obj, &values, &train_refs, dof, exec);
    Ok(FitResult {
        format: FIT_FORMAT.into(),
        version: FIT_VERSION,
        label: cfg.label(),
        config: TrainConfig { kind: ModelKind::Ffnn, ..cfg.clone() },
        dataset: DatasetRef::of(dataset),
        model: LearnedModel::Network { net, params: values },
        links: Vec::new(),
        actuator_coefficients: Vec::new(),
        train_curve: run.train_curve,
        val_curve: run.val_curve,
        best_epoch: run.best_epoch,
        train_mse,
        val_mse: run.best_val,
        restart_val_mse: scores,
        regression: None,
        warnings: Vec::new(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Dispatch on `cfg.kind`. `tree` is the structure and prior of the rigid
/// models and is ignored by the black-box one.
pub fn fit(tree: &KinematicTree, dataset: &Dataset, cfg: &TrainConfig, exec: Exec) -> Result<FitResult, IdentError> {
    match cfg.kind {
        ModelKind::Diffnea | ModelKind::NoKinDiffnea => fit_diffnea(tree, dataset, cfg, exec),
        ModelKind::Nea => fit_nea_linear(tree, dataset, cfg, exec),
        ModelKind::Ffnn => fit_ffnn(dataset, cfg, exec),
    }
}

/// Tree with every documented mass, CoM and inertia scaled, as a deliberately
/// inexact prior. Kinematics are unchanged.
pub fn perturbed_prior(tree: &KinematicTree, mass: f64, com: f64, inertia: f64) -> KinematicTree {
    let mut t = tree.clone();
    for l in &mut t.links {
        l.inertial.mass *= mass;
        l.inertial.com = l.inertial.com.map(|c| c * com);
        l.inertial.inertia = l.inertial.inertia.map(|j| j * inertia);
    }
    t
}

/// Random physical parameters for a tree's inertial groups, for tests.
pub fn random_inertial<R: Rng>(rng: &mut R, n_links: usize) -> Vec<[f64; INERTIAL_PARAMS]> {
    (0..n_links).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect()
}
