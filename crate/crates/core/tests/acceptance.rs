use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffnea::actuators::{ActuatorKind, ActuatorModel};
use diffnea::data::{generate_trajectory, generate_uniform, Dataset, Ranges, Sample, TrajectoryConfig};
use diffnea::dynamics::{forward_dynamics, mass_matrix, rnea_inverse};
use diffnea::eval::{energy_scale, run_cell, EvalConfig, Protocol};
use diffnea::exec::Exec;
use diffnea::gradcheck::{run_suite, GradcheckConfig};
use diffnea::ident::{
    fit, forward_mse, perturbed_prior, regressed_torque, AdamConfig, CompiledModel, EnergyClass, FitResult, Init,
    LearnedModel, ModelKind, TrainConfig,
};
use diffnea::model::{KinematicTree, RealizedTree};
use diffnea::sim::{rollout, Dynamics, ZeroTorque, DT, RK4_DRIFT_BOUND};
use diffnea::systems::{PlantParams, System};

/// One result line per criterion, written past the test harness capture so
/// passing criteria are listed too.
fn verdict(criterion: u32, pass: bool, detail: &str) {
    let line = format!("acceptance criterion {criterion}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

fn random_state(rng: &mut ChaCha8Rng) -> ([f64; 2], [f64; 2]) {
    (
        [rng.random_range(-3.0..3.0), rng.random_range(-3.2..3.2)],
        [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)],
    )
}

fn true_tree(plant: &PlantParams) -> RealizedTree<f64> {
    let tree = plant.tree();
    tree.realize(&tree.prior_params().0.values()).unwrap()
}

fn rigid(plant: &PlantParams, kind: ActuatorKind, act_params: Vec<f64>) -> CompiledModel {
    CompiledModel::Rigid { tree: true_tree(plant), actuator: ActuatorModel::for_tree(kind, &plant.tree()), act_params }
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let cfg = GradcheckConfig::default();
    let start = Instant::now();
    let reports = run_suite(&cfg, Exec::Parallel);
    let secs = start.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed()).map(|r| format!("{}/{}", r.system, r.actuator.name())).collect();
    let all_states = reports.iter().all(|r| r.n_states >= 100 && r.n_checked == r.n_states * r.n_params);
    let pass = failed.is_empty() && all_states && reports.len() == 12 && worst < 1e-4 && secs < 120.0;
    verdict(
        1,
        pass,
        &format!("{} cases, {} states each, worst rel err {worst:.2e}, failed {failed:?}, {secs:.1}s", reports.len(), cfg.states),
    );
    assert!(pass);
}

#[test]
fn criterion_2_articulated_body_matches_closed_form() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for sys in System::ALL {
        let plant = sys.default_params().frictionless();
        let tree = true_tree(&plant);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..1000 {
            let (q, qd) = random_state(&mut rng);
            let u = [rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)];
            let want = plant.accel(q, qd, u).unwrap();
            let got = forward_dynamics(&tree, &q, &qd, &u).unwrap();
            worst = worst.max(rel_err(got[0], want[0])).max(rel_err(got[1], want[1]));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst < 1e-8 && secs < 10.0;
    verdict(2, pass, &format!("2 x 1000 states, worst rel err {worst:.2e}, {secs:.2}s"));
    assert!(pass);
}

#[test]
fn criterion_3_forward_inverts_inverse_dynamics() {
    let mut worst: f64 = 0.0;
    for sys in System::ALL {
        let plant = sys.default_params();
        let tree = true_tree(&plant);
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..100 {
            let (q, qd) = random_state(&mut rng);
            let qdd = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
            let (tau, _) = rnea_inverse(&tree, &q, &qd, &qdd).unwrap();
            let back = forward_dynamics(&tree, &q, &qd, &tau).unwrap();
            let u = [rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)];
            let a = forward_dynamics(&tree, &q, &qd, &u).unwrap();
            let (u_back, _) = rnea_inverse(&tree, &q, &qd, &a).unwrap();
            for i in 0..2 {
                worst = worst.max(rel_err(back[i], qdd[i])).max(rel_err(u_back[i], u[i]));
            }
        }
    }
    let pass = worst < 1e-8;
    verdict(3, pass, &format!("2 x 100 states both directions, worst rel err {worst:.2e}"));
    assert!(pass);
}

#[test]
fn criterion_4_frictionless_rollouts_conserve_energy() {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for sys in System::ALL {
        let plant = sys.default_params().frictionless();
        let scale = energy_scale(&plant);
        let aba = rigid(&plant, ActuatorKind::None, vec![]);
        let mut starts: Vec<(Vec<f64>, Vec<f64>)> = Protocol::defaults().into_iter().map(|p| (p.q0, p.qd0)).collect();
        for _ in 0..3 {
            starts.push((vec![0.0, rng.random_range(-3.0..3.0)], vec![rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)]));
        }
        for (q0, qd0) in &starts {
            for model in [&plant as &dyn Dynamics, &aba] {
                let t = rollout(model, &mut ZeroTorque(2), q0, qd0, 10.0);
                assert_eq!(t.len(), 2501);
                assert!(!t.diverged());
                worst = worst.max(t.energy_drift(scale).unwrap());
            }
        }
    }
    let pass = worst < RK4_DRIFT_BOUND;
    verdict(4, pass, &format!("10 s at 250 Hz, closed form and articulated body, worst drift {worst:.2e} of m g l"));
    assert!(pass);
}

/// Virtual parameters of a bounded actuator: coefficients of either sign (they
/// are squared), networks with random weight scale.
fn random_actuator_params(rng: &mut ChaCha8Rng, model: &ActuatorModel, scale: f64) -> Vec<f64> {
    let s = scale * rng.random_range(0.1..1.0);
    (0..model.n_params()).map(|_| rng.random_range(-s..s)).collect()
}

#[test]
fn criterion_5_bounded_actuators_only_dissipate() {
    let kinds = [ActuatorKind::Viscous, ActuatorKind::Stribeck, ActuatorKind::NnFriction];
    let tree = System::Cartpole.default_params().tree();
    let mut violations = 0usize;
    let mut checked = 0usize;
    let mut max_rate = f64::NEG_INFINITY;
    for kind in kinds {
        let model = ActuatorModel::for_tree(kind, &tree);
        let results = Exec::Parallel.map_range(1000, |k| {
            let mut rng = ChaCha8Rng::seed_from_u64(103);
            rng.set_stream(k as u64);
            let params = random_actuator_params(&mut rng, &model, 3.0);
            let mut bad = 0usize;
            let mut top = f64::NEG_INFINITY;
            for _ in 0..1000 {
                let (q, qd) = random_state(&mut rng);
                let qd = [qd[0] * 2.0, qd[1] * 2.0];
                let td = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
                let tau = model.apply(&params, &td, &q, &qd).unwrap();
                let rate = (tau[0] - td[0]) * qd[0] + (tau[1] - td[1]) * qd[1];
                if !(rate <= 0.0) {
                    bad += 1;
                }
                top = top.max(rate);
            }
            (bad, top)
        });
        for (bad, top) in results {
            violations += bad;
            checked += 1000;
            max_rate = max_rate.max(top);
        }
    }

    // Zero-torque rollouts of the true rigid bodies with random bounded
    // actuators. Friction is sized so that one 250 Hz step changes a joint
    // velocity by little; stronger friction is not resolved by the fixed step.
    let mut worst_rise: f64 = 0.0;
    let mut rollouts = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for sys in System::ALL {
        let plant = sys.default_params().frictionless();
        let scale = energy_scale(&plant);
        let m = mass_matrix(&true_tree(&plant), &[0.0, 0.0]).unwrap();
        let friction_scale = 0.02 * m[0][0].min(m[1][1]) / DT;
        for kind in kinds {
            for _ in 0..10 {
                let act = ActuatorModel::for_tree(kind, &plant.tree());
                let params = random_actuator_params(&mut rng, &act, friction_scale);
                let model = rigid(&plant, kind, params);
                for p in Protocol::defaults() {
                    let t = rollout(&model, &mut ZeroTorque(2), &p.q0, &p.qd0, 10.0);
                    assert!(!t.diverged(), "{sys} {kind:?}");
                    worst_rise = worst_rise.max(t.max_energy_rise().unwrap() / scale);
                    rollouts += 1;
                }
            }
        }
    }
    let pass = violations == 0 && worst_rise <= RK4_DRIFT_BOUND;
    verdict(
        5,
        pass,
        &format!(
            "{checked} (parameterization, state) pairs, {violations} violations, max power {max_rate:.2e}; \
             {rollouts} rollouts, worst energy rise {worst_rise:.2e} of m g l"
        ),
    );
    assert!(pass);
}

fn uniform(system: System, n: usize, seed: u64) -> Dataset {
    let plant = system.default_params();
    generate_uniform(&plant, n, &Ranges::default_for(system), seed)
}

fn schedule(lr: f64, lr_final: f64) -> AdamConfig {
    AdamConfig { lr, lr_final: Some(lr_final), ..Default::default() }
}

fn timed_fit(tree: &KinematicTree, data: &Dataset, cfg: &TrainConfig) -> (FitResult, f64) {
    let start = Instant::now();
    let f = fit(tree, data, cfg, Exec::Parallel).unwrap();
    (f, start.elapsed().as_secs_f64())
}

#[test]
fn criterion_6_identification_recovers_the_plant() {
    let data = uniform(System::Cartpole, 10_000, 1);
    let test = uniform(System::Cartpole, 2_000, 2);
    let truth = System::Cartpole.default_params().tree();
    let prior = perturbed_prior(&truth, 1.3, 0.8, 1.5);

    let with_prior = TrainConfig { kind: ModelKind::Diffnea, init: Init::WithPrior, epochs: 20, adam: schedule(1e-2, 1e-4), ..Default::default() };
    let (a, ta) = timed_fit(&prior, &data, &with_prior);
    let without = TrainConfig { init: Init::WithoutPrior, epochs: 100, ..with_prior.clone() };
    let (b, tb) = timed_fit(&prior, &data, &without);
    let (nea, tn) = timed_fit(&truth, &data, &TrainConfig { kind: ModelKind::Nea, ..Default::default() });

    let LearnedModel::Regressed { inertial, .. } = &nea.model else { panic!("regression result") };
    let mut sq = 0.0;
    let mut count = 0;
    for s in &data.samples {
        for (u, t) in regressed_torque(&truth, inertial, s).iter().zip(&s.tau) {
            sq += (u - t).powi(2);
            count += 1;
        }
    }
    let rms = (sq / count as f64).sqrt();
    let test_a = forward_mse(&a.model.compile().unwrap(), &test.samples);
    let test_b = forward_mse(&b.model.compile().unwrap(), &test.samples);

    let pass = a.val_mse < 1e-6 && b.val_mse < 1e-6 && rms < 1e-8 && ta.max(tb).max(tn) < 600.0;
    verdict(
        6,
        pass,
        &format!(
            "with prior val MSE {:.2e} (held-out {test_a:.2e}, {ta:.0}s); without prior {:.2e} (held-out {test_b:.2e}, {tb:.0}s); \
             NEA torque RMS {rms:.2e} N m, rank {} ({tn:.1}s)",
            a.val_mse,
            b.val_mse,
            nea.regression.as_ref().map_or(0, |r| r.rank),
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_no_kin_is_comparable_to_white_box() {
    let mut lines = Vec::new();
    let mut pass = true;
    for sys in System::ALL {
        let data = uniform(sys, 10_000, 1);
        let tree = sys.default_params().tree();
        let base = TrainConfig {
            init: Init::WithoutPrior,
            epochs: 100,
            restarts: Some(5),
            adam: schedule(1e-2, 1e-4),
            ..Default::default()
        };
        let (white, _) = timed_fit(&tree, &data, &TrainConfig { kind: ModelKind::Diffnea, ..base.clone() });
        let (no_kin, t) = timed_fit(&tree, &data, &TrainConfig { kind: ModelKind::NoKinDiffnea, ..base });
        let ratio = no_kin.val_mse / white.val_mse;
        pass &= ratio <= 10.0;
        lines.push(format!(
            "{sys}: no-Kin {:.2e} vs DiffNEA {:.2e}, ratio {ratio:.1e}, no-Kin restarts {:?}, {t:.0}s",
            no_kin.val_mse,
            white.val_mse,
            no_kin.restart_val_mse.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>()
        ));
    }
    verdict(7, pass, &lines.join("; "));
    assert!(pass);
}

#[test]
fn criterion_8_energy_classes_order_rollouts() {
    let plant = System::Cartpole.default_params();
    let data = generate_trajectory(&plant, &TrajectoryConfig { episodes: 4, duration: 10.0, ..Default::default() }, 0, Exec::Parallel).unwrap();
    let tree = plant.tree();
    let adam = schedule(1e-2, 1e-4);
    let mut configs: Vec<TrainConfig> = [ActuatorKind::Viscous, ActuatorKind::Stribeck, ActuatorKind::NnFriction, ActuatorKind::NnResidual]
        .into_iter()
        .map(|actuator| TrainConfig { kind: ModelKind::Diffnea, actuator, epochs: 30, adam, ..Default::default() })
        .collect();
    configs.push(TrainConfig { kind: ModelKind::Ffnn, epochs: 30, adam, ..Default::default() });

    // documented start states plus states visited while recording
    let mut protocols = Protocol::defaults();
    for (i, s) in data.samples.iter().step_by(2500).enumerate() {
        protocols.push(Protocol { name: format!("data{i}"), q0: s.q.clone(), qd0: s.qd.clone() });
    }
    let cfg = EvalConfig { protocols: protocols.clone(), ..Default::default() };

    let mut unbounded_flagged = Vec::new();
    let mut bounded_flagged = Vec::new();
    let mut summary = Vec::new();
    for c in &configs {
        let f = fit(&tree, &data, c, Exec::Parallel).unwrap();
        let class = f.model.energy_class();
        let mut flagged = 0;
        let mut worst: f64 = 0.0;
        for p in &protocols {
            let row = run_cell(&f, p, &cfg).unwrap().row;
            worst = worst.max(row.energy_rise.unwrap_or(f64::INFINITY));
            if row.diverged() || row.gains_energy {
                flagged += 1;
            }
        }
        summary.push(format!("{} [{class:?}] val {:.1e}, {flagged}/{} flagged, rise {worst:.1e}", f.label, f.val_mse, protocols.len()));
        match class {
            EnergyClass::Unbounded if flagged > 0 => unbounded_flagged.push(f.label),
            EnergyClass::Bounded | EnergyClass::Conserving if flagged > 0 => bounded_flagged.push(f.label),
            _ => {}
        }
    }
    let pass = !unbounded_flagged.is_empty() && bounded_flagged.is_empty();
    verdict(8, pass, &summary.join("; "));
    assert!(pass);
}

fn bitwise_equal(a: &[Sample], b: &[Sample]) -> bool {
    let bits = |s: &Sample| s.q.iter().chain(&s.qd).chain(&s.tau).chain(&s.qdd).map(|x| x.to_bits()).collect::<Vec<_>>();
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| bits(x) == bits(y))
}

#[test]
fn criterion_9_determinism_and_round_trip() {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let plant = System::Furuta.default_params();
    let u1 = uniform(System::Furuta, 3000, 7);
    checks.push(("uniform bytes", u1.to_bytes() == uniform(System::Furuta, 3000, 7).to_bytes()));
    checks.push(("seed changes data", u1.to_bytes() != uniform(System::Furuta, 3000, 8).to_bytes()));
    let tc = TrajectoryConfig { episodes: 3, duration: 2.0, ..Default::default() };
    let t1 = generate_trajectory(&plant, &tc, 5, Exec::Parallel).unwrap();
    let t2 = generate_trajectory(&plant, &tc, 5, Exec::Sequential).unwrap();
    checks.push(("trajectory bytes, sequential vs parallel", t1.to_bytes() == t2.to_bytes()));

    let dir = tempfile::tempdir().unwrap();
    for (name, d) in [("uniform.jsonl", &u1), ("trajectory.jsonl.gz", &t1)] {
        let path = dir.path().join(name);
        d.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        checks.push(("load(save) samples bitwise", bitwise_equal(&back.samples, &d.samples) && back.meta == d.meta));
        checks.push(("save(load(save)) bytes", back.to_bytes() == d.to_bytes()));
    }

    let small = uniform(System::Cartpole, 400, 3);
    let tree = System::Cartpole.default_params().tree();
    for cfg in [
        TrainConfig { kind: ModelKind::NoKinDiffnea, init: Init::WithoutPrior, epochs: 3, restarts: Some(2), batch_size: 64, ..Default::default() },
        TrainConfig { kind: ModelKind::Diffnea, actuator: ActuatorKind::NnFriction, epochs: 2, batch_size: 64, seed: 4, ..Default::default() },
        TrainConfig { kind: ModelKind::Ffnn, epochs: 2, batch_size: 64, ..Default::default() },
        TrainConfig { kind: ModelKind::Nea, ..Default::default() },
    ] {
        let a = fit(&tree, &small, &cfg, Exec::Parallel).unwrap().to_json();
        let b = fit(&tree, &small, &cfg, Exec::Parallel).unwrap().to_json();
        let c = fit(&tree, &small, &cfg, Exec::Sequential).unwrap().to_json();
        checks.push(("fit bytes", a == b && a == c));
        checks.push(("fit round trip", FitResult::from_json(&a).unwrap().to_json() == a));
    }
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let pass = failed.is_empty();
    verdict(9, pass, &format!("{} checks, failed {failed:?}", checks.len()));
    assert!(pass);
}
