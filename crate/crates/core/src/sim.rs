//! Fixed-step RK4 rollouts, energy tracking, divergence detection and
//! trajectory comparison.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::systems::{PlantParams, SwingUp};

/// Rollout and sampling step, 250 Hz.
pub const DT: f64 = 1.0 / 250.0;
/// Any state component beyond this magnitude counts as divergence.
pub const DIVERGENCE_BOUND: f64 = 1e3;
/// Relative energy drift tolerated from RK4 over 10 s at `DT`.
pub const RK4_DRIFT_BOUND: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("trajectories have different time steps ({0} vs {1})")]
    DtMismatch(f64, f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("time step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Anything that yields joint accelerations.
pub trait Dynamics {
    fn dof(&self) -> usize;
    /// `None` when the model cannot produce an acceleration (e.g. singular).
    fn accel(&self, q: &[f64], qd: &[f64], tau: &[f64]) -> Option<Vec<f64>>;
    /// `(kinetic, potential)` if the model exposes an energy.
    fn energy(&self, _q: &[f64], _qd: &[f64]) -> Option<(f64, f64)> {
        None
    }
}

impl Dynamics for PlantParams {
    fn dof(&self) -> usize {
        2
    }

    fn accel(&self, q: &[f64], qd: &[f64], tau: &[f64]) -> Option<Vec<f64>> {
        PlantParams::accel(self, [q[0], q[1]], [qd[0], qd[1]], [tau[0], tau[1]]).ok().map(|a| a.to_vec())
    }

    fn energy(&self, q: &[f64], qd: &[f64]) -> Option<(f64, f64)> {
        Some(PlantParams::energy(self, [q[0], q[1]], [qd[0], qd[1]]))
    }
}

/// Source of the commanded torque at each step.
pub trait Policy {
    fn torque(&mut self, t: f64, q: &[f64], qd: &[f64]) -> Vec<f64>;
}

/// Unforced motion.
#[derive(Debug, Clone)]
pub struct ZeroTorque(pub usize);

impl Policy for ZeroTorque {
    fn torque(&mut self, _t: f64, _q: &[f64], _qd: &[f64]) -> Vec<f64> {
        vec![0.0; self.0]
    }
}

/// Prerecorded torques, held for one step each, zero afterwards.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub torques: Vec<Vec<f64>>,
    step: usize,
}

impl Schedule {
    pub fn new(torques: Vec<Vec<f64>>) -> Self {
        Self { torques, step: 0 }
    }
}

impl Policy for Schedule {
    fn torque(&mut self, _t: f64, q: &[f64], _qd: &[f64]) -> Vec<f64> {
        let u = self.torques.get(self.step).cloned().unwrap_or_else(|| vec![0.0; q.len()]);
        self.step += 1;
        u
    }
}

impl Policy for SwingUp {
    fn torque(&mut self, t: f64, q: &[f64], qd: &[f64]) -> Vec<f64> {
        vec![self.control(t, [q[0], q[1]], [qd[0], qd[1]]), 0.0]
    }
}

fn diverged(xs: &[f64]) -> bool {
    xs.iter().any(|x| !x.is_finite() || x.abs() > DIVERGENCE_BOUND)
}

/// One classical RK4 step on `(q, q̇)` with `τ` held constant. `None` if the
/// model fails at any stage.
pub fn rk4_step<D: Dynamics + ?Sized>(model: &D, q: &[f64], qd: &[f64], tau: &[f64], dt: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = q.len();
    let shift = |x: &[f64], k: &[f64], h: f64| -> Vec<f64> { x.iter().zip(k).map(|(a, b)| a + h * b).collect() };
    let k1v = qd.to_vec();
    let k1a = model.accel(q, qd, tau)?;
    let (q2, v2) = (shift(q, &k1v, dt / 2.0), shift(qd, &k1a, dt / 2.0));
    let k2a = model.accel(&q2, &v2, tau)?;
    let (q3, v3) = (shift(q, &v2, dt / 2.0), shift(qd, &k2a, dt / 2.0));
    let k3a = model.accel(&q3, &v3, tau)?;
    let (q4, v4) = (shift(q, &v3, dt), shift(qd, &k3a, dt));
    let k4a = model.accel(&q4, &v4, tau)?;
    let qn = (0..n).map(|i| q[i] + dt / 6.0 * (k1v[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i])).collect();
    let vn = (0..n).map(|i| qd[i] + dt / 6.0 * (k1a[i] + 2.0 * k2a[i] + 2.0 * k3a[i] + k4a[i])).collect();
    Some((qn, vn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub q: Vec<Vec<f64>>,
    pub qd: Vec<Vec<f64>>,
    /// Torque applied from each state to the next; the last entry is what
    /// the policy asked for at the final state.
    pub tau: Vec<Vec<f64>>,
    /// `(kinetic, potential)` per state, when the model exposes energy.
    pub energy: Option<Vec<(f64, f64)>>,
    /// Index of the first state that left the valid region.
    pub diverged_at: Option<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    pub fn total_energy(&self) -> Option<Vec<f64>> {
        self.energy.as_ref().map(|e| e.iter().map(|(k, v)| k + v).collect())
    }

    /// Largest `|E(t) − E(0)|` relative to `scale`.
    pub fn energy_drift(&self, scale: f64) -> Option<f64> {
        let e = self.total_energy()?;
        Some(e.iter().map(|x| (x - e[0]).abs()).fold(0.0, f64::max) / scale)
    }

    /// Largest rise of total energy above its running minimum.
    pub fn max_energy_rise(&self) -> Option<f64> {
        let e = self.total_energy()?;
        let mut low = f64::INFINITY;
        let mut rise: f64 = 0.0;
        for x in e {
            low = low.min(x);
            rise = rise.max(x - low);
        }
        Some(rise)
    }

    /// Fill in energies from `reference` when the rolled-out model has none
    /// of its own (black-box models).
    pub fn fill_energy<D: Dynamics + ?Sized>(&mut self, reference: &D) {
        if self.energy.is_none() {
            self.energy = self.q.iter().zip(&self.qd).map(|(q, qd)| reference.energy(q, qd)).collect();
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.q.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        for prefix in ["q", "qd", "tau"] {
            header.extend((0..n).map(|i| format!("{prefix}{i}")));
        }
        header.extend(["e_kin", "e_pot", "diverged"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = format!("{}", k as f64 * self.dt);
            for x in self.q[k].iter().chain(&self.qd[k]).chain(&self.tau[k]) {
                write!(row, ",{x}").expect("string write");
            }
            match self.energy.as_ref().map(|e| e[k]) {
                Some((a, b)) => write!(row, ",{a},{b}").expect("string write"),
                None => row.push_str(",,"),
            }
            let div = self.diverged_at.is_some_and(|d| k >= d);
            write!(row, ",{}", u8::from(div)).expect("string write");
            writeln!(w, "{row}")?;
        }
        Ok(())
    }

    /// Joint positions (top) and total energy (bottom) as a static plot.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h, pad) = (640.0, 420.0, 30.0);
        let panel = (h - 3.0 * pad) / 2.0;
        let mut series: Vec<(Vec<f64>, usize)> = Vec::new();
        let n = self.q.first().map_or(0, Vec::len);
        for i in 0..n {
            series.push((self.q.iter().map(|q| q[i]).collect(), 0));
        }
        if let Some(e) = self.total_energy() {
            series.push((e, 1));
        }
        const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n<text x=\"{pad}\" y=\"18\">{}</text>\n",
            xml_escape(title)
        );
        for p in 0..2 {
            let top = pad + p as f64 * (panel + pad);
            let members: Vec<&Vec<f64>> = series.iter().filter(|s| s.1 == p).map(|s| &s.0).collect();
            let finite = members.iter().flat_map(|s| s.iter()).filter(|x| x.is_finite());
            let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
            writeln!(
                out,
                "<rect x=\"{pad}\" y=\"{top}\" width=\"{}\" height=\"{panel}\" fill=\"none\" stroke=\"#999\"/>\n\
                 <text x=\"{}\" y=\"{}\">{}</text>",
                w - 2.0 * pad,
                pad + 4.0,
                top + 12.0,
                if p == 0 { "q" } else { "energy" }
            )
            .expect("string write");
            for (j, s) in members.iter().enumerate() {
                let steps = s.len().max(2) - 1;
                let pts: Vec<String> = s
                    .iter()
                    .enumerate()
                    .filter(|(_, y)| y.is_finite())
                    .map(|(k, y)| {
                        let x = pad + (w - 2.0 * pad) * k as f64 / steps as f64;
                        let yy = top + panel * (1.0 - (y - lo) / (hi - lo));
                        format!("{x:.1},{yy:.1}")
                    })
                    .collect();
                writeln!(
                    out,
                    "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>",
                    COLORS[j % COLORS.len()],
                    pts.join(" ")
                )
                .expect("string write");
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Integrate from `(q0, qd0)` for `duration` seconds at [`DT`], stopping at
/// the first divergent state.
pub fn rollout<D: Dynamics + ?Sized, P: Policy + ?Sized>(model: &D, policy: &mut P, q0: &[f64], qd0: &[f64], duration: f64) -> Trajectory {
    rollout_with_step(model, policy, q0, qd0, duration, DT)
}

pub fn rollout_with_step<D: Dynamics + ?Sized, P: Policy + ?Sized>(
    model: &D,
    policy: &mut P,
    q0: &[f64],
    qd0: &[f64],
    duration: f64,
    dt: f64,
) -> Trajectory {
    let steps = (duration / dt).round() as usize;
    let mut traj = Trajectory {
        dt,
        q: vec![q0.to_vec()],
        qd: vec![qd0.to_vec()],
        tau: Vec::with_capacity(steps + 1),
        energy: model.energy(q0, qd0).map(|e| vec![e]),
        diverged_at: None,
    };
    if diverged(q0) || diverged(qd0) {
        traj.diverged_at = Some(0);
    }
    let (mut q, mut qd) = (q0.to_vec(), qd0.to_vec());
    for k in 0..steps {
        if traj.diverged_at.is_some() {
            break;
        }
        let tau = policy.torque(k as f64 * dt, &q, &qd);
        let next = rk4_step(model, &q, &qd, &tau, dt);
        traj.tau.push(tau);
        let (qn, vn) = next.unwrap_or_else(|| (vec![f64::NAN; q.len()], vec![f64::NAN; q.len()]));
        if diverged(&qn) || diverged(&vn) {
            traj.diverged_at = Some(k + 1);
        }
        if let Some(e) = traj.energy.as_mut() {
            e.push(model.energy(&qn, &vn).unwrap_or((f64::NAN, f64::NAN)));
        }
        traj.q.push(qn.clone());
        traj.qd.push(vn.clone());
        (q, qd) = (qn, vn);
    }
    let last = traj.len() - 1;
    let tau = policy.torque(last as f64 * dt, &q, &qd);
    traj.tau.push(tau);
    traj
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rmse_q: Vec<f64>,
    pub rmse_qd: Vec<f64>,
    /// Time until some state component differs by more than the threshold.
    pub horizon: Option<f64>,
    pub final_energy_gap: Option<f64>,
}

pub fn compare(a: &Trajectory, b: &Trajectory, threshold: f64) -> Result<Comparison, SimError> {
    if (a.dt - b.dt).abs() > 1e-15 {
        return Err(SimError::DtMismatch(a.dt, b.dt));
    }
    let n = a.q.first().map_or(0, Vec::len);
    let m = b.q.first().map_or(0, Vec::len);
    if n != m {
        return Err(SimError::Dimension { expected: n, got: m });
    }
    let len = a.len().min(b.len());
    let mut sq = vec![0.0; n];
    let mut sqd = vec![0.0; n];
    let mut horizon = None;
    for k in 0..len {
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let (dq, dv) = (a.q[k][i] - b.q[k][i], a.qd[k][i] - b.qd[k][i]);
            sq[i] += dq * dq;
            sqd[i] += dv * dv;
            worst = worst.max(dq.abs()).max(dv.abs());
            if !dq.is_finite() || !dv.is_finite() {
                worst = f64::INFINITY;
            }
        }
        if horizon.is_none() && worst > threshold {
            horizon = Some(k as f64 * a.dt);
        }
    }
    let rms = |s: Vec<f64>| s.into_iter().map(|x| (x / len.max(1) as f64).sqrt()).collect();
    let final_energy_gap = match (a.total_energy(), b.total_energy()) {
        (Some(x), Some(y)) if len > 0 => Some(x[len - 1] - y[len - 1]),
        _ => None,
    };
    Ok(Comparison { rmse_q: rms(sq), rmse_qd: rms(sqd), horizon, final_energy_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::System;

    struct Accel(fn(&[f64], &[f64]) -> Vec<f64>);

    impl Dynamics for Accel {
        fn dof(&self) -> usize {
            1
        }
        fn accel(&self, q: &[f64], qd: &[f64], _tau: &[f64]) -> Option<Vec<f64>> {
            Some((self.0)(q, qd))
        }
    }

    #[test]
    fn free_particle_moves_linearly() {
        let m = Accel(|_, _| vec![0.0]);
        let (q, v) = rk4_step(&m, &[1.0], &[2.0], &[0.0], 0.1).unwrap();
        assert_eq!(q, vec![1.0 + 2.0 * 0.1]);
        assert_eq!(v, vec![2.0]);
    }

    fn oscillator_error(dt: f64) -> f64 {
        let m = Accel(|q, _| vec![-q[0]]);
        let period = 2.0 * std::f64::consts::PI;
        let t = rollout_with_step(&m, &mut ZeroTorque(1), &[1.0], &[0.0], period, dt);
        let steps = t.len() - 1;
        let end = steps as f64 * dt;
        ((t.q[steps][0] - end.cos()).powi(2) + (t.qd[steps][0] + end.sin()).powi(2)).sqrt()
    }

    #[test]
    fn oscillator_period_is_accurate() {
        assert!(oscillator_error(1e-3) < 1e-10);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let ratio = oscillator_error(0.02) / oscillator_error(0.01);
        assert!((ratio - 16.0).abs() < 1.0, "{ratio}");
    }

    #[test]
    fn energy_injecting_model_diverges() {
        let m = Accel(|_, qd| vec![qd[0]]);
        let t = rollout(&m, &mut ZeroTorque(1), &[0.0], &[1.0], 20.0);
        let at = t.diverged_at.expect("diverges");
        assert_eq!(t.len(), at + 1);
        assert!(t.q[at][0].abs() > DIVERGENCE_BOUND || t.qd[at][0].abs() > DIVERGENCE_BOUND);
    }

    #[test]
    fn plant_at_rest_stays_at_rest() {
        for sys in System::ALL {
            let p = sys.default_params();
            let t = rollout(&p, &mut ZeroTorque(2), &[0.0, 0.0], &[0.0, 0.0], 2.0);
            assert_eq!(t.len(), 501);
            assert!(t.q.iter().all(|q| q == &vec![0.0, 0.0]));
        }
    }

    #[test]
    fn frictionless_free_swing_conserves_energy() {
        for sys in System::ALL {
            let p = sys.default_params().frictionless();
            let t = rollout(&p, &mut ZeroTorque(2), &[0.0, 1.5], &[0.01, 0.0], 10.0);
            let e0 = t.total_energy().unwrap()[0];
            assert!(t.energy_drift(e0.abs()).unwrap() < RK4_DRIFT_BOUND);
        }
    }

    #[test]
    fn viscous_plant_never_gains_energy() {
        for sys in System::ALL {
            let p = sys.default_params();
            let t = rollout(&p, &mut ZeroTorque(2), &[0.0, 2.5], &[0.3, 0.0], 10.0);
            let e0 = t.total_energy().unwrap()[0];
            assert!(t.max_energy_rise().unwrap() < RK4_DRIFT_BOUND * e0.abs());
        }
    }

    #[test]
    fn schedule_replays_and_then_stops() {
        let mut s = Schedule::new(vec![vec![1.0, 0.0], vec![2.0, 0.0]]);
        assert_eq!(s.torque(0.0, &[0.0; 2], &[0.0; 2]), vec![1.0, 0.0]);
        assert_eq!(s.torque(0.0, &[0.0; 2], &[0.0; 2]), vec![2.0, 0.0]);
        assert_eq!(s.torque(0.0, &[0.0; 2], &[0.0; 2]), vec![0.0, 0.0]);
    }

    #[test]
    fn compare_examples() {
        let p = System::Cartpole.default_params();
        let a = rollout(&p, &mut ZeroTorque(2), &[0.0, 1.0], &[0.0, 0.0], 1.0);
        let c = compare(&a, &a, 1e-6).unwrap();
        assert!(c.rmse_q.iter().chain(&c.rmse_qd).all(|&x| x == 0.0));
        assert_eq!(c.horizon, None);
        assert_eq!(c.final_energy_gap, Some(0.0));

        let mut b = a.clone();
        for q in &mut b.q {
            q[1] += 0.25;
        }
        let c = compare(&a, &b, 0.1).unwrap();
        assert!((c.rmse_q[1] - 0.25).abs() < 1e-12 && c.rmse_q[0] == 0.0);
        assert_eq!(c.horizon, Some(0.0));

        b.dt = 0.01;
        assert!(matches!(compare(&a, &b, 0.1), Err(SimError::DtMismatch(..))));
    }

    #[test]
    fn csv_and_svg_exports() {
        let p = System::Furuta.default_params();
        let t = rollout(&p, &mut ZeroTorque(2), &[0.0, 1.0], &[0.0, 0.0], 0.1);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "t,q0,q1,qd0,qd1,tau0,tau1,e_kin,e_pot,diverged");
        assert_eq!(lines.len(), t.len() + 1);
        assert!(lines[1].ends_with(",0"));
        let svg = t.to_svg("furuta <free>");
        assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.contains("&lt;free&gt;"));
    }
}
