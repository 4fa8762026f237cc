//! Ground-truth plants: closed-form equations of motion for the Cartpole and
//! the Furuta pendulum, derived from their Lagrangians and kept independent
//! of the spatial-algebra code, plus the matching kinematic trees and an
//! energy-based swing-up controller.
//!
//! Both plants have two joints, the first actuated. The pendulum angle is
//! zero hanging down and `π` upright.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{InertialDoc, KinDoc, KinematicTree, LinkDoc, TreeDoc};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SystemError {
    #[error("invalid plant parameter `{name}` = {value}")]
    InvalidParam { name: &'static str, value: f64 },
    #[error("mass matrix is singular (det = {0:e})")]
    Singular(f64),
    #[error("unknown system `{0}`")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Cartpole,
    Furuta,
}

impl System {
    pub const ALL: [System; 2] = [System::Cartpole, System::Furuta];

    pub fn name(self) -> &'static str {
        match self {
            System::Cartpole => "cartpole",
            System::Furuta => "furuta",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SystemError> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| SystemError::Unknown(s.to_string()))
    }

    pub fn default_params(self) -> PlantParams {
        match self {
            System::Cartpole => PlantParams::Cartpole(CartpoleParams::default()),
            System::Furuta => PlantParams::Furuta(FurutaParams::default()),
        }
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Uniform rod: inertia about the centre, axis along local x.
fn rod_inertia(mass: f64, length: f64, radius: f64) -> [f64; 6] {
    let axial = 0.5 * mass * radius * radius;
    let transverse = mass * (length * length / 12.0 + radius * radius / 4.0);
    [axial, 0.0, 0.0, transverse, 0.0, transverse]
}

fn positive(name: &'static str, value: f64) -> Result<(), SystemError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(SystemError::InvalidParam { name, value })
    }
}

fn non_negative(name: &'static str, value: f64) -> Result<(), SystemError> {
    if value >= 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(SystemError::InvalidParam { name, value })
    }
}

fn solve2(m: [[f64; 2]; 2], rhs: [f64; 2]) -> Result<[f64; 2], SystemError> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if !(det.abs() > 1e-300) {
        return Err(SystemError::Singular(det));
    }
    Ok([(m[1][1] * rhs[0] - m[0][1] * rhs[1]) / det, (m[0][0] * rhs[1] - m[1][0] * rhs[0]) / det])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub rod_radius: f64,
    /// Rail friction, N·s/m.
    pub rail_viscous: f64,
    /// Pole bearing friction, N·m·s.
    pub pole_viscous: f64,
    pub gravity: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.5,
            pole_mass: 0.12,
            pole_length: 0.6,
            rod_radius: 0.005,
            rail_viscous: 5.0,
            pole_viscous: 2e-4,
            gravity: 9.81,
        }
    }
}

impl CartpoleParams {
    fn com(&self) -> f64 {
        0.5 * self.pole_length
    }

    fn pole_inertia(&self) -> [f64; 6] {
        rod_inertia(self.pole_mass, self.pole_length, self.rod_radius)
    }

    /// `q = [x, θ]`, `u = [F, τ]`.
    pub fn accel(&self, q: [f64; 2], qd: [f64; 2], u: [f64; 2]) -> Result<[f64; 2], SystemError> {
        let (mc, mp, lc, g) = (self.cart_mass, self.pole_mass, self.com(), self.gravity);
        let ic = self.pole_inertia()[5];
        let (s, c) = q[1].sin_cos();
        let m = [[mc + mp, mp * lc * c], [mp * lc * c, ic + mp * lc * lc]];
        let rhs = [
            u[0] - self.rail_viscous * qd[0] + mp * lc * s * qd[1] * qd[1],
            u[1] - self.pole_viscous * qd[1] - mp * g * lc * s,
        ];
        solve2(m, rhs)
    }

    pub fn energy(&self, q: [f64; 2], qd: [f64; 2]) -> (f64, f64) {
        let (mc, mp, lc) = (self.cart_mass, self.pole_mass, self.com());
        let ic = self.pole_inertia()[5];
        let c = q[1].cos();
        let kinetic = 0.5 * (mc + mp) * qd[0] * qd[0] + mp * lc * c * qd[0] * qd[1] + 0.5 * (ic + mp * lc * lc) * qd[1] * qd[1];
        (kinetic, -mp * self.gravity * lc * c)
    }

    /// Pendulum energy with the cart held still; `m g l_c` when upright at rest.
    pub fn pendulum_energy(&self, q: [f64; 2], qd: [f64; 2]) -> f64 {
        let (mp, lc) = (self.pole_mass, self.com());
        0.5 * (self.pole_inertia()[5] + mp * lc * lc) * qd[1] * qd[1] - mp * self.gravity * lc * q[1].cos()
    }

    pub fn upright_energy(&self) -> f64 {
        self.pole_mass * self.gravity * self.com()
    }

    pub fn tree_doc(&self) -> TreeDoc {
        TreeDoc {
            name: "cartpole".into(),
            gravity: [0.0, 0.0, -self.gravity],
            links: vec![
                LinkDoc {
                    name: "cart".into(),
                    parent: None,
                    joint: "prismatic".into(),
                    kin: KinDoc { rpy: [0.0, PI / 2.0, 0.0], xyz: [0.0; 3] },
                    inertial: InertialDoc { mass: self.cart_mass, com: [0.0; 3], inertia: [1e-4, 0.0, 0.0, 1e-4, 0.0, 1e-4] },
                    learn_kin: true,
                    learn_inertial: true,
                    actuated: true,
                },
                LinkDoc {
                    name: "pole".into(),
                    parent: Some("cart".into()),
                    joint: "revolute".into(),
                    kin: KinDoc { rpy: [PI / 2.0, 0.0, 0.0], xyz: [0.0; 3] },
                    inertial: InertialDoc { mass: self.pole_mass, com: [self.com(), 0.0, 0.0], inertia: self.pole_inertia() },
                    learn_kin: true,
                    learn_inertial: true,
                    actuated: false,
                },
            ],
        }
    }

    fn validate(&self) -> Result<(), SystemError> {
        positive("cart_mass", self.cart_mass)?;
        positive("pole_mass", self.pole_mass)?;
        positive("pole_length", self.pole_length)?;
        non_negative("rod_radius", self.rod_radius)?;
        non_negative("rail_viscous", self.rail_viscous)?;
        non_negative("pole_viscous", self.pole_viscous)?;
        non_negative("gravity", self.gravity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FurutaParams {
    pub arm_mass: f64,
    pub arm_length: f64,
    pub pendulum_mass: f64,
    pub pendulum_length: f64,
    pub rod_radius: f64,
    pub arm_viscous: f64,
    pub pendulum_viscous: f64,
    pub gravity: f64,
}

impl Default for FurutaParams {
    fn default() -> Self {
        Self {
            arm_mass: 0.095,
            arm_length: 0.085,
            pendulum_mass: 0.024,
            pendulum_length: 0.129,
            rod_radius: 0.003,
            arm_viscous: 5e-5,
            pendulum_viscous: 5e-5,
            gravity: 9.81,
        }
    }
}

impl FurutaParams {
    fn arm_inertia(&self) -> [f64; 6] {
        rod_inertia(self.arm_mass, self.arm_length, self.rod_radius)
    }

    fn pendulum_inertia(&self) -> [f64; 6] {
        rod_inertia(self.pendulum_mass, self.pendulum_length, self.rod_radius)
    }

    /// Terms of the kinetic energy `½A α̇² + B cosβ α̇β̇ + ½C β̇²` and `dA/dβ`.
    fn kinetic_terms(&self, beta: f64) -> (f64, f64, f64, f64) {
        let (ma, la, mp, lr, lp) =
            (self.arm_mass, 0.5 * self.arm_length, self.pendulum_mass, self.arm_length, 0.5 * self.pendulum_length);
        let [pxx, _, _, pyy, _, pzz] = self.pendulum_inertia();
        let (s, c) = beta.sin_cos();
        let a = self.arm_inertia()[5] + ma * la * la + mp * (lr * lr + lp * lp * s * s) + pxx * c * c + pyy * s * s;
        let da = 2.0 * s * c * (mp * lp * lp - pxx + pyy);
        (a, mp * lr * lp, mp * lp * lp + pzz, da)
    }

    /// `q = [α, β]` (arm, pendulum).
    pub fn accel(&self, q: [f64; 2], qd: [f64; 2], u: [f64; 2]) -> Result<[f64; 2], SystemError> {
        let (a, b, c_, da) = self.kinetic_terms(q[1]);
        let (s, c) = q[1].sin_cos();
        let lp = 0.5 * self.pendulum_length;
        let m = [[a, b * c], [b * c, c_]];
        let rhs = [
            u[0] - self.arm_viscous * qd[0] - da * qd[0] * qd[1] + b * s * qd[1] * qd[1],
            u[1] - self.pendulum_viscous * qd[1] + 0.5 * da * qd[0] * qd[0] - self.pendulum_mass * self.gravity * lp * s,
        ];
        solve2(m, rhs)
    }

    pub fn energy(&self, q: [f64; 2], qd: [f64; 2]) -> (f64, f64) {
        let (a, b, c_, _) = self.kinetic_terms(q[1]);
        let kinetic = 0.5 * a * qd[0] * qd[0] + b * q[1].cos() * qd[0] * qd[1] + 0.5 * c_ * qd[1] * qd[1];
        (kinetic, -self.pendulum_mass * self.gravity * 0.5 * self.pendulum_length * q[1].cos())
    }

    pub fn pendulum_energy(&self, q: [f64; 2], qd: [f64; 2]) -> f64 {
        let (_, _, c_, _) = self.kinetic_terms(q[1]);
        0.5 * c_ * qd[1] * qd[1] - self.upright_energy() * q[1].cos()
    }

    pub fn upright_energy(&self) -> f64 {
        self.pendulum_mass * self.gravity * 0.5 * self.pendulum_length
    }

    pub fn tree_doc(&self) -> TreeDoc {
        TreeDoc {
            name: "furuta".into(),
            gravity: [0.0, 0.0, -self.gravity],
            links: vec![
                LinkDoc {
                    name: "arm".into(),
                    parent: None,
                    joint: "revolute".into(),
                    kin: KinDoc { rpy: [0.0; 3], xyz: [0.0; 3] },
                    inertial: InertialDoc { mass: self.arm_mass, com: [0.5 * self.arm_length, 0.0, 0.0], inertia: self.arm_inertia() },
                    learn_kin: true,
                    learn_inertial: true,
                    actuated: true,
                },
                LinkDoc {
                    name: "pendulum".into(),
                    parent: Some("arm".into()),
                    joint: "revolute".into(),
                    kin: KinDoc { rpy: [0.0, PI / 2.0, 0.0], xyz: [self.arm_length, 0.0, 0.0] },
                    inertial: InertialDoc {
                        mass: self.pendulum_mass,
                        com: [0.5 * self.pendulum_length, 0.0, 0.0],
                        inertia: self.pendulum_inertia(),
                    },
                    learn_kin: true,
                    learn_inertial: true,
                    actuated: false,
                },
            ],
        }
    }

    fn validate(&self) -> Result<(), SystemError> {
        positive("arm_mass", self.arm_mass)?;
        positive("arm_length", self.arm_length)?;
        positive("pendulum_mass", self.pendulum_mass)?;
        positive("pendulum_length", self.pendulum_length)?;
        non_negative("rod_radius", self.rod_radius)?;
        non_negative("arm_viscous", self.arm_viscous)?;
        non_negative("pendulum_viscous", self.pendulum_viscous)?;
        non_negative("gravity", self.gravity)
    }
}

/// Physical constants of either plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum PlantParams {
    Cartpole(CartpoleParams),
    Furuta(FurutaParams),
}

impl PlantParams {
    pub fn system(&self) -> System {
        match self {
            PlantParams::Cartpole(_) => System::Cartpole,
            PlantParams::Furuta(_) => System::Furuta,
        }
    }

    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn validate(&self) -> Result<(), SystemError> {
        match self {
            PlantParams::Cartpole(p) => p.validate(),
            PlantParams::Furuta(p) => p.validate(),
        }
    }

    pub fn accel(&self, q: [f64; 2], qd: [f64; 2], u: [f64; 2]) -> Result<[f64; 2], SystemError> {
        match self {
            PlantParams::Cartpole(p) => p.accel(q, qd, u),
            PlantParams::Furuta(p) => p.accel(q, qd, u),
        }
    }

    /// `(kinetic, potential)`, potential zero at the joint-plane height.
    pub fn energy(&self, q: [f64; 2], qd: [f64; 2]) -> (f64, f64) {
        match self {
            PlantParams::Cartpole(p) => p.energy(q, qd),
            PlantParams::Furuta(p) => p.energy(q, qd),
        }
    }

    pub fn pendulum_energy(&self, q: [f64; 2], qd: [f64; 2]) -> f64 {
        match self {
            PlantParams::Cartpole(p) => p.pendulum_energy(q, qd),
            PlantParams::Furuta(p) => p.pendulum_energy(q, qd),
        }
    }

    pub fn upright_energy(&self) -> f64 {
        match self {
            PlantParams::Cartpole(p) => p.upright_energy(),
            PlantParams::Furuta(p) => p.upright_energy(),
        }
    }

    pub fn viscous(&self) -> [f64; 2] {
        match self {
            PlantParams::Cartpole(p) => [p.rail_viscous, p.pole_viscous],
            PlantParams::Furuta(p) => [p.arm_viscous, p.pendulum_viscous],
        }
    }

    pub fn frictionless(&self) -> Self {
        match *self {
            PlantParams::Cartpole(p) => PlantParams::Cartpole(CartpoleParams { rail_viscous: 0.0, pole_viscous: 0.0, ..p }),
            PlantParams::Furuta(p) => PlantParams::Furuta(FurutaParams { arm_viscous: 0.0, pendulum_viscous: 0.0, ..p }),
        }
    }

    pub fn tree_doc(&self) -> TreeDoc {
        match self {
            PlantParams::Cartpole(p) => p.tree_doc(),
            PlantParams::Furuta(p) => p.tree_doc(),
        }
    }

    pub fn tree(&self) -> KinematicTree {
        KinematicTree::from_doc(&self.tree_doc()).expect("plant trees are well formed")
    }

    /// Default gains for [`SwingUp`]; energy scales differ by orders of magnitude.
    pub fn swingup_gains(&self) -> SwingUpGains {
        match self {
            PlantParams::Cartpole(_) => SwingUpGains::default(),
            PlantParams::Furuta(_) => SwingUpGains {
                energy_gain: 1e5,
                max_accel: 300.0,
                stiffness: 10.0,
                damping: 20.0,
                ..SwingUpGains::default()
            },
        }
    }
}

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y == -PI {
        PI
    } else {
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwingUpGains {
    pub energy_gain: f64,
    /// Saturation of the commanded actuated-joint acceleration.
    pub max_accel: f64,
    /// Pull of the actuated joint towards zero position and velocity.
    pub stiffness: f64,
    pub damping: f64,
    /// Upright region half-width, rad.
    pub upright_window: f64,
    /// Time the controller stays off after reaching the upright region, s.
    pub release_time: f64,
}

impl Default for SwingUpGains {
    fn default() -> Self {
        Self { energy_gain: 30.0, max_accel: 10.0, stiffness: 1.0, damping: 2.0, upright_window: 0.1, release_time: 1.0 }
    }
}

/// Energy-pumping controller that swings the pendulum up, releases it near
/// the top and lets it fall, then starts pumping again.
///
/// The energy law commands an acceleration of the actuated joint; the force
/// realizing it is read off the plant, which is affine in the input.
#[derive(Debug, Clone)]
pub struct SwingUp {
    pub plant: PlantParams,
    pub gains: SwingUpGains,
    released_until: f64,
}

impl SwingUp {
    pub fn new(plant: PlantParams, gains: SwingUpGains) -> Self {
        Self { plant, gains, released_until: f64::NEG_INFINITY }
    }

    /// Saturated `k_e (E − E_des) sign(q̇ cos q)` on the pendulum joint.
    pub fn energy_law(&self, q: [f64; 2], qd: [f64; 2]) -> f64 {
        let error = self.plant.pendulum_energy(q, qd) - self.plant.upright_energy();
        let dir = qd[1] * q[1].cos();
        let sign = if dir > 0.0 {
            1.0
        } else if dir < 0.0 {
            -1.0
        } else {
            0.0
        };
        (self.gains.energy_gain * error * sign).clamp(-self.gains.max_accel, self.gains.max_accel)
    }

    /// Commanded acceleration of the actuated joint.
    pub fn command(&self, q: [f64; 2], qd: [f64; 2]) -> f64 {
        let mut a = self.energy_law(q, qd);
        // kick the pendulum out of rest at the bottom
        if a == 0.0 && qd[1] == 0.0 && wrap_angle(q[1]).abs() < self.gains.upright_window {
            a = self.gains.max_accel;
        }
        a - self.gains.stiffness * q[0] - self.gains.damping * qd[0]
    }

    /// Force on the actuated joint at time `t`.
    pub fn control(&mut self, t: f64, q: [f64; 2], qd: [f64; 2]) -> f64 {
        if t < self.released_until {
            return 0.0;
        }
        if wrap_angle(q[1] - PI).abs() < self.gains.upright_window {
            self.released_until = t + self.gains.release_time;
            return 0.0;
        }
        let target = self.command(q, qd);
        match (self.plant.accel(q, qd, [0.0, 0.0]), self.plant.accel(q, qd, [1.0, 0.0])) {
            (Ok(free), Ok(unit)) => (target - free[0]) / (unit[0] - free[0]),
            _ => 0.0,
        }
    }

    pub fn is_released(&self, t: f64) -> bool {
        t < self.released_until
    }
}
