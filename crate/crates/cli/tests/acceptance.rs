//! Acceptance checks, one PASS/FAIL line per criterion.

use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use handkin::bench::{max_error, mean_error, run_suite, BenchRow, Method, Suite};
use handkin::body::ransac::rigid_alignment;
use handkin::geometry::{exp_twist, log_twist};
use handkin::joint::JointAxis;
use handkin::landmark::{
    check_lost, correct, predict, CorrectionOutcome, LandmarkFilterState, LandmarkObservation, LandmarkStatus,
};
use handkin::metrics::{tangent_at, tangent_error};
use handkin::pipeline::run_sequence;
use handkin::simulator::{generate, Scenario, ScenarioParams};
use handkin::{JointType, PipelineConfig};
use handkin_cli::{cmd_bench, cmd_estimate, cmd_simulate, BenchArgs, EstimateArgs, SimJoint, SimulateArgs};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-scale..scale), rng.random_range(-scale..scale), rng.random_range(-scale..scale))
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = random_vec(rng, 1.0);
        if v.norm() > 0.1 {
            return v.normalize();
        }
    }
}

fn spawn(rng: &mut ChaCha8Rng, cfg: &PipelineConfig) -> LandmarkFilterState {
    let id = rng.random_range(1..=20);
    let obs = LandmarkObservation { t: 0.0, id, pos: random_vec(rng, 1.0), vis: 1.0 };
    LandmarkFilterState::spawn(&obs, cfg).unwrap()
}

fn symmetric_psd(p: &Matrix6<f64>) -> bool {
    p == &p.transpose() && SymmetricEigen::new(*p).eigenvalues.min() >= -1e-12
}

fn filter_properties() -> Outcome {
    let cfg = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();

    for _ in 0..500 {
        let mut s = spawn(&mut rng, &cfg);
        for _ in 0..20 {
            let dt = rng.random_range(0.005..0.1);
            let before = s.p.trace();
            s = predict(&s, dt, &cfg).unwrap();
            if s.p.trace() <= before {
                failures.push("predict-only growth");
            }
            if !symmetric_psd(&s.p) {
                failures.push("symmetry/PSD after predict");
            }
            if rng.random_bool(0.7) {
                let pos = s.location() + random_vec(&mut rng, 0.3);
                s = correct(&s, &LandmarkObservation { t: 0.0, id: s.id, pos, vis: 1.0 }, &cfg).0;
                if !symmetric_psd(&s.p) {
                    failures.push("symmetry/PSD after correct");
                }
            }
        }

        let obs = LandmarkObservation { t: 0.0, id: s.id, pos: s.location(), vis: 1.0 };
        let (c, out) = correct(&s, &obs, &cfg);
        if out != CorrectionOutcome::Corrected || c.location() != s.location() || c.p.trace() >= s.p.trace() {
            failures.push("zero-innovation fixed point");
        }

        let dir = random_unit(&mut rng);
        let mut gated = false;
        for k in 0..200 {
            let pos = s.location() + dir * (k as f64 * 0.005);
            let accepted = correct(&s, &LandmarkObservation { t: 0.0, id: s.id, pos, vis: 1.0 }, &cfg).1
                == CorrectionOutcome::Corrected;
            if gated && accepted {
                failures.push("monotone gating");
            }
            gated |= !accepted;
        }
    }

    let threshold = cfg.landmark_unc_thresh;
    let mut s = spawn(&mut rng, &cfg);
    let mut below = Matrix6::zeros();
    below.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::from_diagonal_element(threshold / 3.0 - 1e-12));
    s.p = below;
    if threshold != 0.3 || check_lost(&s, &cfg).status != LandmarkStatus::Active {
        failures.push("loss trigger below threshold");
    }
    s.p[(0, 0)] = threshold;
    s.p[(1, 1)] = 0.0;
    s.p[(2, 2)] = 0.0;
    s.p[(3, 3)] = 100.0;
    if check_lost(&s, &cfg).status != LandmarkStatus::Lost {
        failures.push("loss trigger at threshold");
    }

    failures.dedup();
    outcome(failures.is_empty(), if failures.is_empty() { "all properties hold".into() } else { failures.join(", ") })
}

fn geometry_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut round_trip, mut alignment, mut tangent) = (0.0_f64, 0.0_f64, 0.0_f64);

    for _ in 0..2000 {
        let angle = rng.random_range(0.0..3.0);
        let twist = Vector6::from_iterator(random_vec(&mut rng, 1.0).iter().copied().chain((random_unit(&mut rng) * angle).iter().copied()));
        let t = exp_twist(&twist);
        let (back, _) = log_twist(&t);
        round_trip = round_trip.max((back - twist).amax());
        let again = exp_twist(&back);
        round_trip = round_trip.max((again.to_homogeneous() - t.to_homogeneous()).amax());
    }

    for _ in 0..200 {
        let t = exp_twist(&Vector6::from_iterator(random_vec(&mut rng, 1.0).iter().chain(random_vec(&mut rng, 1.5).iter()).copied()));
        let src: Vec<_> = (0..12).map(|_| random_vec(&mut rng, 0.2)).collect();
        let dst: Vec<_> = src.iter().map(|p| t.apply(p)).collect();
        let weights: Vec<f64> = (0..12).map(|_| rng.random_range(0.1..10.0)).collect();
        let fit = rigid_alignment(&src, &dst, &weights).expect("alignment");
        alignment = alignment.max((fit.to_homogeneous() - t.to_homogeneous()).amax());
    }

    let h = 1e-6;
    for i in 0..400 {
        let direction = random_unit(&mut rng);
        let axis = if i % 2 == 0 {
            JointAxis::Prismatic { direction }
        } else {
            JointAxis::Revolute { direction, point: random_vec(&mut rng, 0.5) }
        };
        let grasp = random_vec(&mut rng, 0.5) + direction.cross(&random_unit(&mut rng)) * 0.2;
        let q = rng.random_range(0.0..1.5);
        let fd = (axis.articulate(q + h, &grasp) - axis.articulate(q - h, &grasp)) / (2.0 * h);
        if fd.norm() < 1e-3 {
            continue;
        }
        let analytic = tangent_at(&axis, q, &grasp).expect("tangent");
        let fd = fd.normalize();
        tangent = tangent.max((analytic - fd).norm().min((analytic + fd).norm()));
    }

    let pass = round_trip <= 1e-9 && alignment <= 1e-8 && tangent <= 1e-5;
    outcome(pass, format!("exp/log {round_trip:.1e} (1e-9), alignment {alignment:.1e} (1e-8), tangent {tangent:.1e} (1e-5)"))
}

fn summary(rows: &[BenchRow], m: Method) -> (f64, f64) {
    (mean_error(rows, m).unwrap_or(f64::INFINITY), max_error(rows, m).unwrap_or(f64::INFINITY))
}

fn robustness() -> Outcome {
    let params = ScenarioParams { movers: 2, outlier_rate: 0.0, dropout_rate: 0.0, ..ScenarioParams::default() };
    let cfg = PipelineConfig::default();
    let mut details = Vec::new();
    let mut pass = true;
    for (joint, q_max, seed) in [(JointType::Revolute, std::f64::consts::FRAC_PI_2, 21), (JointType::Prismatic, 0.3, 22)] {
        let scenario = Scenario::synthetic(joint, q_max, &params, seed).unwrap();
        let twin = Scenario { independent_movers: Vec::new(), ..scenario.clone() };
        let movers: Vec<u8> = scenario.independent_movers.iter().map(|m| m.id).collect();

        let run = |s: &Scenario| {
            let g = generate(s).unwrap();
            let p = run_sequence(&g.records, &cfg).unwrap();
            let err = p.joint_model().map_or(f64::INFINITY, |m| tangent_error(m, &g.joint, 100).unwrap_or(f64::INFINITY));
            (p.ransac_outcome().map(|r| r.outliers.clone()).unwrap_or_default(), err)
        };
        let (flags, err) = run(&scenario);
        let (_, clean) = run(&twin);
        let ok = flags == movers && err - clean <= 2.0;
        pass &= ok;
        details.push(format!("{joint}: movers {movers:?} flagged {flags:?}, error {err:.2} vs clean {clean:.2}"));
    }
    outcome(pass, format!("sigma {} m class-scaled; {}", params.noise, details.join("; ")))
}

fn throughput(dir: &std::path::Path) -> Outcome {
    let input = dir.join("long.jsonl");
    let sim = SimulateArgs {
        joint: SimJoint::Revolute,
        q_max: None,
        noise: 0.002,
        outlier_rate: 0.05,
        dropout_rate: 0.05,
        movers: 0,
        duration: 30.0,
        rate: 30.0,
        seed: 7,
        output: input.clone(),
        gt_output: dir.join("long_gt.json"),
    };
    cmd_simulate(&sim).expect("simulate");
    let args = EstimateArgs {
        input: Some(input),
        config: None,
        output: dir.join("long_report.json"),
        ground_truth: None,
        live: false,
        timing: false,
    };
    let start = Instant::now();
    let code = cmd_estimate(&args, &mut Vec::new()).expect("estimate");
    let elapsed = start.elapsed();
    outcome(code == 0 && elapsed < Duration::from_secs(1), format!("900 frames in {:.3} s, exit {code}", elapsed.as_secs_f64()))
}

fn determinism(dir: &std::path::Path) -> Outcome {
    let run = |name: &str| {
        let path = dir.join(name);
        let args = BenchArgs { suite: "default".into(), config: None, output_csv: path.clone() };
        cmd_bench(&args, &mut Vec::new()).expect("bench");
        std::fs::read(path).unwrap()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    outcome(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

#[test]
fn acceptance() {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, Outcome)> = Vec::new();

    let timed = |limit: f64, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        let secs = start.elapsed().as_secs_f64();
        o.pass &= secs < limit;
        o.detail = format!("{}; {secs:.2} s (limit {limit} s)", o.detail);
        o
    };

    results.push((1, timed(10.0, &filter_properties)));
    results.push((2, timed(10.0, &geometry_oracles)));

    let start = Instant::now();
    let rows = run_suite(&Suite::default_noisy(), &PipelineConfig::default());
    let secs = start.elapsed().as_secs_f64();
    let (full_mean, full_max) = summary(&rows, Method::Full);
    let (ablated, _) = summary(&rows, Method::NoUncertainty);
    let (single, _) = summary(&rows, Method::SinglePoint);
    let (rigid, _) = summary(&rows, Method::RigidHand);
    results.push((
        3,
        outcome(
            full_mean <= 5.0 && full_max <= 10.0 && secs < 60.0,
            format!("mean {full_mean:.3} deg, max {full_max:.3} deg, {secs:.2} s"),
        ),
    ));
    let degradation = (ablated - full_mean) / full_mean * 100.0;
    results.push((
        4,
        outcome(ablated > full_mean, format!("ablated {ablated:.3} vs full {full_mean:.3} deg ({degradation:+.0}%, target +20%)")),
    ));
    results.push((
        5,
        outcome(
            full_mean < single && full_mean < rigid,
            format!("full {full_mean:.3}, single point {single:.3}, rigid hand {rigid:.3} deg"),
        ),
    ));
    results.push((6, robustness()));
    results.push((7, throughput(dir.path())));
    results.push((8, determinism(dir.path())));

    for (n, o) in &results {
        println!("criterion {n}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
