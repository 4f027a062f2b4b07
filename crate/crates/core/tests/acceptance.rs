//! End-to-end acceptance checks. Runs as a plain binary so that every
//! criterion prints its own pass/fail line; exits non-zero if any fails.

use std::cell::Cell;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{Matrix2, RowVector2, Vector2};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spoofshield_core::attack::{AttackKindName, AttackSchedule};
use spoofshield_core::detect::{
    finite_difference_check, CalibrationConfig, Detector, DetectorKind, DetectorModels, DetectorVerdict, ResidualSample,
};
use spoofshield_core::eval::{aggregate, CampaignSummary, RunSummary};
use spoofshield_core::fuse::{motion_model, supervise, ukf_predict, ukf_update, ControlInput, Mode, SupervisorConfig, TickRecord, UkfConfig};
use spoofshield_core::lane_map::{match_lateral, LaneMap, LaneRecord, MatchConfig, MatchError};
use spoofshield_core::pipeline::{
    calibrate, campaign_run, default_roads, run_campaign, run_scenario, build_detectors, CalibrationBlock, CampaignConfig,
    DetectorsBlock, EvalBlock, ExperimentConfig, ScenarioRef,
};
use spoofshield_core::runlog::write_log;
use spoofshield_core::sim::{sense_all, simulate, NoiseConfig, ScenarioConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

// ---------------------------------------------------------------- geometry

/// Random-walk polylines, one to three lanes.
fn random_map(rng: &mut ChaCha8Rng) -> (Vec<LaneRecord>, LaneMap) {
    let lanes: Vec<LaneRecord> = (0..rng.random_range(1..=3))
        .map(|li| {
            let mut p = [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)];
            let mut h: f64 = rng.random_range(-3.1..3.1);
            let mut points = vec![p];
            for _ in 0..rng.random_range(2..12) {
                h += rng.random_range(-0.7..0.7);
                let len = rng.random_range(1.0..25.0);
                p = [p[0] + len * h.cos(), p[1] + len * h.sin()];
                points.push(p);
            }
            LaneRecord { lane_id: format!("l{li}"), points }
        })
        .collect();
    let map = LaneMap::build(lanes.clone(), 1.0).unwrap();
    (lanes, map)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn lerp(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Distance from `q` to the polylines by sampling every segment at 2 cm,
/// then resampling at 10 um around the best coarse sample of every segment
/// that comes within one coarse step of the overall best. Returns the
/// distance and the closest sample.
fn dense_nearest(q: [f64; 2], lanes: &[LaneRecord]) -> (f64, [f64; 2]) {
    const COARSE: f64 = 0.02;
    const FINE: f64 = 1e-5;
    let mut per_segment = Vec::new();
    for lane in lanes {
        for w in lane.points.windows(2) {
            let len = dist(w[0], w[1]);
            let n = (len / COARSE).ceil() as usize;
            let (mut best, mut at) = (f64::INFINITY, 0.0);
            for i in 0..=n {
                let t = i as f64 / n as f64;
                let d = dist(q, lerp(w[0], w[1], t));
                if d < best {
                    best = d;
                    at = t;
                }
            }
            per_segment.push((best, at, w[0], w[1], len));
        }
    }
    let coarse_best = per_segment.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let mut best = (f64::INFINITY, [0.0, 0.0]);
    for &(d, at, a, b, len) in &per_segment {
        if d > coarse_best + COARSE {
            continue;
        }
        let span = COARSE / len;
        let (lo, hi) = ((at - span).max(0.0), (at + span).min(1.0));
        let n = ((hi - lo) * len / FINE).ceil() as usize;
        for i in 0..=n {
            let p = lerp(a, b, lo + (hi - lo) * i as f64 / n as f64);
            let d = dist(q, p);
            if d < best.0 {
                best = (d, p);
            }
        }
    }
    best
}

fn geometry_oracle() -> Outcome {
    let cfg = MatchConfig::default();
    let matcher_time = Cell::new(Duration::ZERO);
    let (checked, open_end, worst) = (Cell::new(0usize), Cell::new(0usize), Cell::new(0.0f64));
    let result = runner(100).run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lanes, map) = random_map(&mut rng);
        let queries: Vec<([f64; 2], f64)> = (0..100)
            .map(|_| {
                let lane = &lanes[rng.random_range(0..lanes.len())];
                let i = rng.random_range(0..lane.points.len() - 1);
                let base = lerp(lane.points[i], lane.points[i + 1], rng.random_range(0.0..1.0));
                let q = [base[0] + rng.random_range(-15.0..15.0), base[1] + rng.random_range(-15.0..15.0)];
                (q, rng.random_range(-3.1..3.1))
            })
            .collect();
        let start = Instant::now();
        let fixes: Vec<Result<f64, MatchError>> = queries
            .iter()
            .map(|&(q, h)| match match_lateral(q, h, &map, &cfg) {
                Ok(f) => Ok(f.d0),
                Err(MatchError::HeadingSingular { d0, .. }) => Ok(d0),
                Err(e) => Err(e),
            })
            .collect();
        matcher_time.set(matcher_time.get() + start.elapsed());
        let ends: Vec<[f64; 2]> = lanes.iter().flat_map(|l| [l.points[0], *l.points.last().unwrap()]).collect();
        for (&(q, _), fix) in queries.iter().zip(&fixes) {
            let (d, at) = dense_nearest(q, &lanes);
            if ends.iter().any(|&e| dist(e, at) < 1e-3) {
                // Open lane ends are not admissible feet; the matcher may
                // only report something farther away, or nothing.
                open_end.set(open_end.get() + 1);
                if let Ok(d0) = fix {
                    prop_assert!(*d0 >= d - 1e-3, "q {:?}: d0 {} below oracle {}", q, d0, d);
                }
                continue;
            }
            let d0 = fix.map_err(|e| TestCaseError::fail(format!("q {q:?}: {e}, oracle {d}")))?;
            worst.set(worst.get().max((d0 - d).abs()));
            checked.set(checked.get() + 1);
            prop_assert!((d0 - d).abs() <= 1e-3, "q {:?}: d0 {} oracle {}", q, d0, d);
        }
        Ok(())
    });
    let secs = matcher_time.get().as_secs_f64();
    let (checked, open_end, worst) = (checked.get(), open_end.get(), worst.get());
    let detail = format!(
        "{checked} interior + {open_end} open-end queries, max |d0 - oracle| {worst:.2e} m, matcher {secs:.3} s{}",
        result.as_ref().err().map(|e| format!("; {e}")).unwrap_or_default()
    );
    outcome(result.is_ok() && secs < 5.0, detail)
}

// --------------------------------------------------------------- unscented

fn spd(rng: &mut ChaCha8Rng, scale: f64) -> Matrix2<f64> {
    let a = Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0));
    (a * a.transpose() + Matrix2::identity() * 0.01) * scale
}

fn unscented_linear() -> Outcome {
    let cfg = UkfConfig::default();
    let worst = Cell::new(0.0f64);
    let result = runner(1000).run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Vector2::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
        let (sp, sq) = (rng.random_range(0.01..4.0), rng.random_range(0.001..1.0));
        let p = spd(&mut rng, sp);
        let q = spd(&mut rng, sq);
        let u = ControlInput { v: rng.random_range(0.0..30.0), omega: 0.0, heading: rng.random_range(-3.1..3.1), dt: 0.1 };
        let a = RowVector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let b = rng.random_range(-5.0..5.0);
        let r = rng.random_range(1e-3..1.0);
        let y = rng.random_range(-10.0..10.0);

        let pred = ukf_predict(&m, &p, &u, &q, &cfg);
        let (mean, cov) = ukf_update(&pred, y, r, &cfg, |x| Some((a * x)[(0, 0)] + b)).expect("linear h always evaluates");

        // Closed-form Kalman step; the motion model is a translation.
        let xp = m + Vector2::new(u.v * u.dt * u.heading.cos(), u.v * u.dt * u.heading.sin());
        let pp = p + q;
        let s = (a * pp * a.transpose())[(0, 0)] + r;
        let k = pp * a.transpose() / s;
        let xk = xp + k * (y - (a * xp)[(0, 0)] - b);
        let pk = pp - k * s * k.transpose();

        let err = (mean - xk).abs().max().max((cov - pk).abs().max()).max((pred.mean - motion_model(&m, &u)).abs().max());
        worst.set(worst.get().max(err));
        prop_assert!(err <= 1e-9, "seed {}: error {}", seed, err);
        Ok(())
    });
    outcome(result.is_ok(), format!("1000 instances, max entrywise error {:.2e}{}", worst.get(), result.err().map(|e| format!("; {e}")).unwrap_or_default()))
}

// -------------------------------------------------------------------- lstm

fn lstm_gradients() -> Outcome {
    let worst = Cell::new(0.0f64);
    let result = runner(20).run(&any::<u64>(), |seed| {
        let check = finite_difference_check(5, 4, 4, 1e-5, seed);
        worst.set(worst.get().max(check.max_rel_err));
        prop_assert!(check.max_rel_err <= 1e-4, "seed {}: {}", seed, check.max_rel_err);
        Ok(())
    });
    outcome(result.is_ok(), format!("W=5 H=4, 20 random models, max relative error {:.2e}", worst.get()))
}

// --------------------------------------------------------------- campaigns

fn experiment(noise: NoiseConfig) -> ExperimentConfig {
    let scenarios = default_roads()
        .into_iter()
        .enumerate()
        .map(|(i, road)| ScenarioRef::Inline(Box::new(ScenarioConfig { road, noise, ..ScenarioConfig::straight(120.0, 1000 + i as u64) })))
        .collect();
    ExperimentConfig {
        scenario: ScenarioRef::Inline(Box::new(ScenarioConfig { noise, ..ScenarioConfig::straight(80.0, 0) })),
        attack: AttackSchedule::default(),
        calibration: CalibrationBlock { scenarios, settings: CalibrationConfig::default() },
        detectors: DetectorsBlock::default(),
        fusion: SupervisorConfig::default(),
        eval: EvalBlock::default(),
        campaign: CampaignConfig { runs: 50, noise, compare_mitigation: true, ..CampaignConfig::default() },
    }
}

struct Campaign {
    runs: Vec<RunSummary>,
    summary: CampaignSummary,
    elapsed: Duration,
    /// Lateral and longitudinal error at the last attacked tick of each run.
    window_end: Vec<[f64; 2]>,
}

fn campaign(cfg: &ExperimentConfig, models: &DetectorModels, kind: AttackKindName) -> Campaign {
    let mut cfg = cfg.clone();
    cfg.campaign.kinds = vec![kind];
    let mut window_end = Vec::new();
    let start = Instant::now();
    let runs = run_campaign(&cfg, Some(models), |run| {
        if let Some(last) = run.output.mask.iter().rposition(|&m| m) {
            let est = run.output.records[last].belief.position();
            let truth = run.output.truth[last];
            let (ex, ey) = (est[0] - truth.x, est[1] - truth.y);
            let (c, s) = (truth.heading.cos(), truth.heading.sin());
            window_end.push([-s * ex + c * ey, c * ex + s * ey]);
        }
        Ok(())
    })
    .expect("campaign runs");
    let elapsed = start.elapsed();
    let summary = aggregate(&runs).expect("non-empty campaign");
    Campaign { runs, summary, elapsed, window_end }
}

fn f1_mean(c: &Campaign, k: DetectorKind) -> f64 {
    c.summary.attacks.values().next().unwrap().detectors[&k].f1.mean
}

fn delay_median(c: &Campaign, k: DetectorKind) -> Option<f64> {
    c.summary.attacks.values().next().unwrap().detectors[&k].delay.as_ref().map(|s| s.median)
}

fn missed(c: &Campaign, k: DetectorKind) -> usize {
    c.summary.attacks.values().next().unwrap().detectors[&k].missed
}

fn fmt_delay(d: Option<f64>) -> String {
    d.map_or("n/a".into(), |d| format!("{d:.2} s"))
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x * x, n + 1));
    (s / n.max(1) as f64).sqrt()
}

// -------------------------------------------------------------- isolation

/// Alarms on a fixed time interval whatever the residual says.
struct Scripted {
    on: (f64, f64),
}

impl Detector for Scripted {
    fn kind(&self) -> DetectorKind {
        DetectorKind::Lstm
    }

    fn step(&mut self, s: &ResidualSample) -> DetectorVerdict {
        let alarm = s.t >= self.on.0 && s.t < self.on.1;
        DetectorVerdict { t: s.t, alarm, score: Some(if alarm { 1.0 } else { 0.0 }), threshold: 0.5 }
    }

    fn reset(&mut self) {}
}

fn gps_isolation() -> Outcome {
    let c = CampaignConfig::default();
    let fusion = SupervisorConfig::default();
    let mut mitigated = 0;
    let mut fails = Vec::new();
    for seed in 0..20u64 {
        let (scenario, attack) = campaign_run(&c, seed as usize, AttackKindName::ConstantBias).unwrap();
        let sim = simulate(&scenario).unwrap();
        let (frames, _) = attack.apply(&sense_all(&sim, &scenario).frames).unwrap();
        let spec = attack.specs()[0];
        let run = |frames: &[_]| -> Vec<TickRecord> {
            supervise(frames, vec![Box::new(Scripted { on: (spec.t_start, spec.t_end) })], &sim.map, &fusion, &scenario.noise)
        };
        let base = run(&frames);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fuzzed = frames.clone();
        for (f, r) in fuzzed.iter_mut().zip(&base) {
            if r.mode == Mode::Mitigation {
                f.gps = if rng.random_bool(0.1) {
                    [f64::NAN, f64::INFINITY]
                } else {
                    [rng.random_range(-1e4..1e4), rng.random_range(-1e4..1e4)]
                };
            }
        }
        let other = run(&fuzzed);
        mitigated += base.iter().filter(|r| r.mode == Mode::Mitigation).count();
        let bits = |r: &TickRecord| {
            let b = &r.belief;
            [b.mean.x, b.mean.y, b.cov[(0, 0)], b.cov[(0, 1)], b.cov[(1, 0)], b.cov[(1, 1)]].map(f64::to_bits)
        };
        if let Some(i) = base.iter().zip(&other).position(|(a, b)| bits(a) != bits(b) || a.mode != b.mode) {
            fails.push(format!("seed {seed} tick {i}"));
        }
    }
    outcome(
        fails.is_empty() && mitigated > 0,
        format!("20 runs, {mitigated} mitigation ticks with randomized GPS; differing runs: {}", if fails.is_empty() { "none".into() } else { fails.join(", ") }),
    )
}

// ------------------------------------------------------------ determinism

fn log_bytes(scenario: &ScenarioConfig, attack: &AttackSchedule, models: &DetectorModels) -> Vec<u8> {
    let dets = build_detectors(&DetectorKind::ALL, Some(models)).unwrap();
    let out = run_scenario(scenario, attack, &SupervisorConfig::default(), dets).unwrap();
    let mut bytes = Vec::new();
    write_log(&out.rows(), &mut bytes).unwrap();
    bytes
}

fn determinism(models: &DetectorModels) -> Outcome {
    let mut cfg = experiment(NoiseConfig::CARLA_LIKE);
    cfg.detectors.lstm.epochs = 3;
    for s in &mut cfg.calibration.scenarios {
        if let ScenarioRef::Inline(sc) = s {
            sc.duration = 40.0;
        }
    }
    let a = calibrate(&cfg, Path::new(".")).unwrap().0;
    let b = calibrate(&cfg, Path::new(".")).unwrap().0;
    let models_equal = serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();

    let c = CampaignConfig::default();
    let mut differing = Vec::new();
    let mut checked = 0;
    for kind in [AttackKindName::ConstantBias, AttackKindName::Stealth, AttackKindName::None] {
        for run in [0, 1, 2] {
            let (scenario, attack) = campaign_run(&c, run, kind).unwrap();
            for m in [models, &a] {
                checked += 1;
                if log_bytes(&scenario, &attack, m) != log_bytes(&scenario, &attack, m) {
                    differing.push(format!("{kind:?}/{run}"));
                }
            }
        }
    }
    outcome(
        models_equal && differing.is_empty(),
        format!("models identical across recalibration: {models_equal}; {checked} logs rerun, differing: {}", differing.len()),
    )
}

// -------------------------------------------------------------------- main

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!("[{}] {id:02} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report(1, "geometry oracle", geometry_oracle());
    report(2, "unscented linear exactness", unscented_linear());
    report(3, "lstm gradient check", lstm_gradients());
    report(9, "gps isolation fuzz", gps_isolation());

    let carla = experiment(NoiseConfig::CARLA_LIKE);
    let start = Instant::now();
    let (models, _) = calibrate(&carla, Path::new(".")).expect("calibration");
    let calib_time = start.elapsed();

    let bias = campaign(&carla, &models, AttackKindName::ConstantBias);
    let stealth = campaign(&carla, &models, AttackKindName::Stealth);
    let clean = campaign(&carla, &models, AttackKindName::None);
    use DetectorKind::{Cusum, Iforest, Lstm};

    {
        let (f1, delay) = (f1_mean(&bias, Lstm), delay_median(&bias, Lstm));
        let secs = (calib_time + bias.elapsed).as_secs_f64();
        let pass = f1 >= 0.9 && delay.is_some_and(|d| d <= 0.2) && secs < 120.0;
        report(
            4,
            "detection, constant bias",
            outcome(pass, format!("lstm F1 {f1:.3}, median delay {}, missed {}, runtime {secs:.1} s (calibration {:.1} s)", fmt_delay(delay), missed(&bias, Lstm), calib_time.as_secs_f64())),
        );
    }
    {
        let f1 = f1_mean(&stealth, Lstm);
        let (dl, dc) = (delay_median(&stealth, Lstm), delay_median(&stealth, Cusum));
        let pass = f1 >= 0.85 && matches!((dl, dc), (Some(l), Some(c)) if l <= c);
        report(
            5,
            "detection, stealth",
            outcome(
                pass,
                format!(
                    "lstm F1 {f1:.3}, median delay lstm {} vs cusum {} (missed {} / {})",
                    fmt_delay(dl),
                    fmt_delay(dc),
                    missed(&stealth, Lstm),
                    missed(&stealth, Cusum)
                ),
            ),
        );
    }
    {
        let combined = |k: DetectorKind| {
            let v: Vec<f64> = bias.runs.iter().chain(&stealth.runs).map(|r| r.detection[&k].f1).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (l, i, c) = (combined(Lstm), combined(Iforest), combined(Cusum));
        report(6, "detector ordering", outcome(l + 0.02 >= i && i + 0.02 >= c, format!("mean F1 lstm {l:.3}, iforest {i:.3}, cusum {c:.3}")));
    }
    {
        let acc = bias.summary.attacks["constant_bias"].accuracy.as_ref().unwrap();
        let rmse = acc.rmse_xy.mean;
        let (lat, lon) = (rms(bias.window_end.iter().map(|e| e[0])), rms(bias.window_end.iter().map(|e| e[1])));
        report(
            8,
            "mitigation, noisy preset",
            outcome(rmse <= 0.5 && lat <= lon, format!("rmse_xy {rmse:.3} m (worst run {:.3}); window-end RMS lateral {lat:.3} m, longitudinal {lon:.3} m", acc.rmse_xy.max)),
        );
    }
    {
        let (alarm, ticks) = clean.runs.iter().fold([[0usize; 2]; 3], |mut acc, r| {
            for (i, k) in DetectorKind::ALL.iter().enumerate() {
                let c = r.detection[k].counts;
                acc[i][0] += c.fp + c.tp;
                acc[i][1] += c.fp + c.tn + c.tp + c.fn_;
            }
            acc
        })
        .iter()
        .fold((Vec::new(), 0), |(mut v, _), [a, t]| {
            v.push(*a as f64 / *t as f64);
            (v, *t)
        });
        let pass = alarm.iter().all(|&r| r <= 0.05);
        let detail = DetectorKind::ALL.iter().zip(&alarm).map(|(k, r)| format!("{} {:.2}%", k.name(), 100.0 * r)).collect::<Vec<_>>().join(", ");
        report(10, "false alarms", outcome(pass, format!("{detail} of {ticks} attack-free ticks")));
    }

    let ideal = experiment(NoiseConfig::IDEAL);
    let (ideal_models, _) = calibrate(&ideal, Path::new(".")).expect("calibration");
    {
        let c = campaign(&ideal, &ideal_models, AttackKindName::ConstantBias);
        let a = &c.summary.attacks["constant_bias"];
        let on = a.accuracy.as_ref().unwrap().rmse_xy.mean;
        let off = a.accuracy_unmitigated.as_ref().unwrap().rmse_xy.mean;
        report(7, "mitigation, ideal preset", outcome(on <= 0.1 && off >= 10.0 * on, format!("rmse_xy {on:.4} m mitigated vs {off:.3} m unmitigated ({:.0}x)", off / on)));
    }

    report(11, "determinism", determinism(&models));

    results.sort_by_key(|r| r.0);
    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{:02} {}", r.0, r.1)).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
