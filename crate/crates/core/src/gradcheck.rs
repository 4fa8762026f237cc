//! Finite-difference check of the tape gradient of the per-sample
//! forward-dynamics loss through the actuator and the articulated-body
//! dynamics, for every virtual parameter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actuators::{ActuatorKind, ActuatorModel};
use crate::data::{Ranges, Sample};
use crate::exec::Exec;
use crate::ident::sample_error;
use crate::model::{KinematicTree, PARAMS_PER_LINK};
use crate::scalar::{gradient, DiffScalar, ParamSet, Real, Tape};
use crate::systems::System;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub states: usize,
    pub seed: u64,
    pub tolerance: f64,
    /// Relative finite-difference step.
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { states: 100, seed: 0, tolerance: 1e-4, step: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub state: usize,
    pub param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub system: System,
    pub actuator: ActuatorKind,
    pub n_params: usize,
    pub n_states: usize,
    pub n_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub failures: usize,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// States closer than this to a nondifferentiable point of the actuator are
/// redrawn.
pub const KINK_MARGIN: f64 = 0.05;

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps gradients that vanish
/// up to round-off from producing meaningless ratios; it scales with the
/// loss because that sets the round-off of the differences.
pub fn relative_error(analytic: f64, numeric: f64, loss: f64) -> f64 {
    let floor = 1e-7 * (1.0 + loss.abs());
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn random_sample<R: Rng>(rng: &mut R, ranges: &Ranges) -> Sample {
    let draw = |rng: &mut R, r: &[[f64; 2]]| r.iter().map(|&[lo, hi]| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect::<Vec<_>>();
    let q = draw(rng, &ranges.q);
    let qd = draw(rng, &ranges.qd);
    let tau = draw(rng, &ranges.tau);
    let qdd = (0..q.len()).map(|_| rng.random_range(-10.0..10.0)).collect();
    Sample { q, qd, tau, qdd }
}

/// Every virtual parameter learnable, drawn at random; coefficients in
/// `[0.1, 1]`, networks at their seeded init.
fn random_params<R: Rng>(rng: &mut R, tree: &KinematicTree, actuator: &ActuatorModel) -> ParamSet {
    let mut ps = tree.random_params(rng);
    let mut act = actuator.init_params(rng);
    if actuator.mlp(0).is_none() {
        let values: Vec<f64> = (0..act.len()).map(|_| rng.random_range(0.1..1.0)).collect();
        act.set_values(&values);
    }
    ps.extend_prefixed("", &act).expect("actuator names are prefixed");
    ps
}

fn loss_f64(tree: &KinematicTree, actuator: &ActuatorModel, values: &[f64], s: &Sample) -> f64 {
    let n = tree.dof() * PARAMS_PER_LINK;
    match tree.realize(&values[..n]) {
        Ok(rt) => sample_error(&rt, actuator, &values[n..], s).unwrap_or(f64::NAN),
        Err(_) => f64::NAN,
    }
}

fn loss_grad(tree: &KinematicTree, actuator: &ActuatorModel, ps: &ParamSet, s: &Sample) -> Option<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let p: Vec<DiffScalar<'_>> = ps.bind_all(&tape);
    let n = tree.dof() * PARAMS_PER_LINK;
    let rt = tree.realize(&p[..n]).ok()?;
    let loss = sample_error(&rt, actuator, &p[n..], s)?;
    let g = gradient(loss, &p).ok()?;
    Some((loss.value(), g))
}

/// Fourth-order central difference of the loss along parameter `i`.
fn numeric_derivative(tree: &KinematicTree, actuator: &ActuatorModel, values: &[f64], i: usize, s: &Sample, step: f64) -> f64 {
    let h = step * (1.0 + values[i].abs());
    let mut v = values.to_vec();
    let mut at = |d: f64| {
        v[i] = values[i] + d;
        loss_f64(tree, actuator, &v, s)
    };
    let (p1, m1, p2, m2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

/// Gradient check of one (system, actuator) pair: each state has its own
/// random parameter vector, every parameter is differentiated.
pub fn check_case(system: System, kind: ActuatorKind, cfg: &GradcheckConfig, exec: Exec) -> CaseReport {
    let plant = system.default_params();
    let tree = plant.tree().with_learn_flags(true, true);
    let actuator = ActuatorModel::for_tree(kind, &tree);
    let ranges = Ranges::default_for(system);
    let per_state = exec.map_range(cfg.states, |k| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let n = tree.dof() * PARAMS_PER_LINK;
        let (ps, s) = loop {
            let ps = random_params(&mut rng, &tree, &actuator);
            let s = random_sample(&mut rng, &ranges);
            let margin = actuator.kink_margin(&ps.values()[n..], &s.q, &s.qd).expect("parameter count");
            if margin > KINK_MARGIN {
                break (ps, s);
            }
        };
        let values = ps.values();
        let Some((loss, grad)) = loss_grad(&tree, &actuator, &ps, &s) else {
            return (ps.len(), 1, f64::INFINITY, Some(Mismatch { state: k, param: "<loss>".into(), analytic: f64::NAN, numeric: f64::NAN, rel_err: f64::INFINITY }));
        };
        let mut worst: Option<Mismatch> = None;
        let mut failures = 0;
        for (i, g) in grad.iter().enumerate() {
            let fd = numeric_derivative(&tree, &actuator, &values, i, &s, cfg.step);
            let err = relative_error(*g, fd, loss);
            let err = if err.is_nan() { f64::INFINITY } else { err };
            if err >= cfg.tolerance {
                failures += 1;
            }
            if worst.as_ref().is_none_or(|w| err > w.rel_err) {
                worst = Some(Mismatch { state: k, param: ps.entries()[i].name.clone(), analytic: *g, numeric: fd, rel_err: err });
            }
        }
        let max = worst.as_ref().map_or(0.0, |w| w.rel_err);
        (grad.len(), failures, max, worst)
    });
    let mut report = CaseReport {
        system,
        actuator: kind,
        n_params: tree.dof() * PARAMS_PER_LINK + actuator.n_params(),
        n_states: cfg.states,
        n_checked: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: 0,
    };
    for (checked, failures, max, worst) in per_state {
        report.n_checked += checked;
        report.failures += failures;
        if max > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(max);
            if report.worst.as_ref().is_none_or(|w| max >= w.rel_err) {
                report.worst = worst;
            }
        }
    }
    report
}

/// Both benchmark systems under every actuator variant.
pub fn run_suite(cfg: &GradcheckConfig, exec: Exec) -> Vec<CaseReport> {
    let cases: Vec<(System, ActuatorKind)> = [System::Cartpole, System::Furuta]
        .into_iter()
        .flat_map(|s| ActuatorKind::ALL.into_iter().map(move |a| (s, a)))
        .collect();
    cases.into_iter().map(|(s, a)| check_case(s, a, cfg, exec)).collect()
}
