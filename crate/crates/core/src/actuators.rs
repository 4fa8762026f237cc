//! Joint-independent actuator models mapping desired torque and joint state
//! to the generalized force fed into the rigid-body dynamics.
//!
//! Coefficients that must be non-negative are stored as virtual parameters
//! and squared on use. Network variants carry one small MLP per joint.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JointType, KinematicTree};
use crate::scalar::{ParamSet, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActuatorError {
    #[error("{0} actuators carry no dissipation guarantee")]
    Unsupported(ActuatorKind),
    #[error("expected {expected} actuator parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
}

/// Fully connected network, tanh on hidden layers, identity output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
}

impl Mlp {
    pub fn new(input: usize, hidden: &[usize], output: usize) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self { sizes }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Row-major weights then biases, layer by layer, all `U(±1/√fan_in)`.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for w in self.sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                out.push(rng.random_range(-bound..bound));
            }
        }
        out
    }

    pub fn forward<T: Real>(&self, params: &[T], input: &[T]) -> Vec<T> {
        debug_assert_eq!(params.len(), self.n_params());
        debug_assert_eq!(input.len(), self.input_dim());
        let mut x = input.to_vec();
        let mut offset = 0;
        let layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_in * n_out];
            let bias = &params[offset + n_in * n_out..offset + (n_in + 1) * n_out];
            offset += (n_in + 1) * n_out;
            x = (0..n_out)
                .map(|o| {
                    let mut acc = bias[o];
                    for (i, xi) in x.iter().enumerate() {
                        acc += weights[o * n_in + i] * *xi;
                    }
                    if l + 1 < layers {
                        acc.tanh()
                    } else {
                        acc
                    }
                })
                .collect();
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActuatorKind {
    None,
    Viscous,
    Stribeck,
    NnFriction,
    NnResidual,
    Ffnn,
}

impl ActuatorKind {
    pub const ALL: [ActuatorKind; 6] = [
        ActuatorKind::None,
        ActuatorKind::Viscous,
        ActuatorKind::Stribeck,
        ActuatorKind::NnFriction,
        ActuatorKind::NnResidual,
        ActuatorKind::Ffnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActuatorKind::None => "none",
            ActuatorKind::Viscous => "viscous",
            ActuatorKind::Stribeck => "stribeck",
            ActuatorKind::NnFriction => "nn_friction",
            ActuatorKind::NnResidual => "nn_residual",
            ActuatorKind::Ffnn => "ffnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    /// The unforced system can only lose energy.
    pub fn is_energy_bounded(self) -> bool {
        matches!(self, ActuatorKind::Viscous | ActuatorKind::Stribeck | ActuatorKind::NnFriction)
    }

    /// Leaves the rigid-body energy unchanged.
    pub fn is_energy_conserving(self) -> bool {
        self == ActuatorKind::None
    }

    pub fn coefficients(self) -> &'static [&'static str] {
        match self {
            ActuatorKind::Viscous => &["viscous"],
            ActuatorKind::Stribeck => &["coulomb", "stiction", "stribeck_decay", "viscous"],
            _ => &[],
        }
    }
}

impl fmt::Display for ActuatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Actuator attached to every joint of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorModel {
    pub kind: ActuatorKind,
    /// `true` for joints whose position is an angle.
    pub periodic: Vec<bool>,
    pub hidden: Vec<usize>,
    /// Feed `(sin q, cos q)` instead of raw `q` for periodic joints.
    #[serde(default)]
    pub angle_encoding: bool,
}

impl ActuatorModel {
    pub fn new(kind: ActuatorKind, periodic: Vec<bool>) -> Self {
        Self { kind, periodic, hidden: vec![32, 32], angle_encoding: false }
    }

    pub fn for_tree(kind: ActuatorKind, tree: &KinematicTree) -> Self {
        Self::new(kind, tree.links.iter().map(|l| l.joint == JointType::Revolute).collect())
    }

    pub fn dof(&self) -> usize {
        self.periodic.len()
    }

    /// Network of joint `j`, if the variant has one.
    pub fn mlp(&self, j: usize) -> Option<Mlp> {
        let state = if self.angle_encoding && self.periodic[j] { 3 } else { 2 };
        match self.kind {
            ActuatorKind::NnFriction | ActuatorKind::NnResidual => Some(Mlp::new(state, &self.hidden, 1)),
            ActuatorKind::Ffnn => Some(Mlp::new(state + 1, &self.hidden, 1)),
            _ => None,
        }
    }

    fn joint_params(&self, j: usize) -> usize {
        self.mlp(j).map_or(self.kind.coefficients().len(), |m| m.n_params())
    }

    fn joint_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        (0..self.dof())
            .map(|j| {
                let o = acc;
                acc += self.joint_params(j);
                o
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        (0..self.dof()).map(|j| self.joint_params(j)).sum()
    }

    /// Named, learnable initial parameters. Coefficients start at a small
    /// positive value, networks at the seeded default init.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> ParamSet {
        let mut ps = ParamSet::new();
        for j in 0..self.dof() {
            match self.mlp(j) {
                Some(m) => {
                    for (k, v) in m.init(rng).into_iter().enumerate() {
                        ps.push(format!("act.j{j}.w{k}"), v, true).expect("unique");
                    }
                }
                None => {
                    for c in self.kind.coefficients() {
                        ps.push(format!("act.j{j}.sqrt_{c}"), 0.1, true).expect("unique");
                    }
                }
            }
        }
        ps
    }

    /// Virtual parameters realizing the given per-joint viscous coefficients.
    pub fn viscous_params(&self, coefficients: &[f64]) -> ParamSet {
        assert_eq!(self.kind, ActuatorKind::Viscous);
        let mut ps = ParamSet::new();
        for (j, c) in coefficients.iter().enumerate() {
            ps.push(format!("act.j{j}.sqrt_viscous"), c.max(0.0).sqrt(), true).expect("unique");
        }
        ps
    }

    fn net_input<T: Real>(&self, j: usize, tau_d: Option<T>, q: T, qd: T) -> Vec<T> {
        let mut x = Vec::with_capacity(4);
        x.extend(tau_d);
        if self.angle_encoding && self.periodic[j] {
            x.push(q.sin());
            x.push(q.cos());
        } else {
            x.push(q);
        }
        x.push(qd);
        x
    }

    /// Applied generalized force per joint.
    pub fn apply<T: Real>(&self, params: &[T], tau_d: &[T], q: &[T], qd: &[T]) -> Result<Vec<T>, ActuatorError> {
        let expected = self.n_params();
        if params.len() != expected {
            return Err(ActuatorError::ParamCount { expected, got: params.len() });
        }
        let offsets = self.joint_offsets();
        let out = (0..self.dof())
            .map(|j| {
                let p = &params[offsets[j]..];
                let (td, qj, vj) = (tau_d[j], q[j], qd[j]);
                match self.kind {
                    ActuatorKind::None => td,
                    ActuatorKind::Viscous => td - p[0].square() * vj,
                    ActuatorKind::Stribeck => {
                        let (fs, fd, nu, mu) = (p[0].square(), p[1].square(), p[2].square(), p[3].square());
                        td - vj.sign() * (fs + fd * (-(nu * vj.square())).exp()) - mu * vj
                    }
                    ActuatorKind::NnFriction => {
                        let m = self.mlp(j).expect("network variant");
                        let y = m.forward(&p[..m.n_params()], &self.net_input(j, None, qj, vj));
                        let l1 = y.into_iter().fold(T::zero(), |acc, v| acc + v.abs());
                        td - vj.sign() * l1
                    }
                    ActuatorKind::NnResidual => {
                        let m = self.mlp(j).expect("network variant");
                        td - m.forward(&p[..m.n_params()], &self.net_input(j, None, qj, vj))[0]
                    }
                    ActuatorKind::Ffnn => {
                        let m = self.mlp(j).expect("network variant");
                        m.forward(&p[..m.n_params()], &self.net_input(j, Some(td), qj, vj))[0]
                    }
                }
            })
            .collect();
        Ok(out)
    }

    /// Distance of the state from the nearest point where the applied force
    /// is not differentiable (a velocity sign flip or a friction network
    /// output crossing zero). Infinite for smooth variants.
    pub fn kink_margin(&self, params: &[f64], q: &[f64], qd: &[f64]) -> Result<f64, ActuatorError> {
        let expected = self.n_params();
        if params.len() != expected {
            return Err(ActuatorError::ParamCount { expected, got: params.len() });
        }
        let offsets = self.joint_offsets();
        let mut margin = f64::INFINITY;
        for j in 0..self.dof() {
            match self.kind {
                ActuatorKind::Stribeck => margin = margin.min(qd[j].abs()),
                ActuatorKind::NnFriction => {
                    let m = self.mlp(j).expect("network variant");
                    let y = m.forward(&params[offsets[j]..offsets[j] + m.n_params()], &self.net_input(j, None, q[j], qd[j]));
                    margin = y.iter().fold(margin.min(qd[j].abs()), |acc, v| acc.min(v.abs()));
                }
                _ => {}
            }
        }
        Ok(margin)
    }

    /// Power `(τ − τ_d)·q̇` drawn by the actuator; independent of `τ_d` for
    /// the energy-bounded variants.
    pub fn dissipation_rate(&self, params: &[f64], q: &[f64], qd: &[f64]) -> Result<f64, ActuatorError> {
        match self.kind {
            ActuatorKind::NnResidual | ActuatorKind::Ffnn => Err(ActuatorError::Unsupported(self.kind)),
            _ => {
                let zero = vec![0.0; self.dof()];
                let tau = self.apply(params, &zero, q, qd)?;
                Ok(tau.iter().zip(qd).map(|(t, v)| t * v).sum())
            }
        }
    }
}
