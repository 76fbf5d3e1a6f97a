//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! a summary naming any failures. Failures are reported, not fatal, so the
//! numbers stay visible in every test run.

use nalgebra::{Matrix3, Vector3};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use std::time::Instant;
use ttrally::anticipate::{
    build_region, calibration_residuals, conformal_quantile, coverage_table, ensemble_forecast, exchange_samples,
    extreme_hit_bias, physics_baseline_ensemble, width_vs_horizon, wilson_lower_bound, ExchangeSample, PhysicsParams,
};
use ttrally::ball::{drag_objective, fit_drag, select_bounce, BallTrack2D, ReconParams, StokesSegment, GRAVITY, K_MAX, K_MIN};
use ttrally::camera::{calibrate_from_keypoints, check_assumptions, ImagePoint};
use ttrally::control::{
    ballistic_landing, paired_difference_lower_bound, racket_reflect, return_target, run_experiment, solve_target_pose,
    step_robot, table_centre_pose, CentralChoice, Corpus, ExperimentConfig, RacketPose, SafeBox, Strategy,
    REFERENCE_NORMAL,
};
use ttrally::model::{Point, TableGeometry, Vec3};
use ttrally::pipeline::reconstruct_track;
use ttrally::rng::{self, Rng};
use ttrally::synth::{emit_synthetic_track, generate_corpus, CameraSampler, RallyParams, SyntheticRally, LEG_TOLERANCE_PX};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gauss(rng: &mut Rng, sigma: f64) -> f64 {
    Normal::new(0.0, sigma).unwrap().sample(rng)
}

fn calibration_points(table: &TableGeometry) -> Vec<Vec3> {
    table.surface_keypoints().iter().chain(table.ground_corners().iter()).copied().collect()
}

fn calibration_round_trip() -> Outcome {
    let table = TableGeometry::ittf();
    let sampler = CameraSampler::default();
    let world = calibration_points(&table);
    let (mut worst_clean, mut worst_noisy, mut worst_fit, mut slowest) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut valid = 0;
    for i in 0..100 {
        let mut rng = rng::stream(101, i);
        let cam = sampler.sample(&mut rng, &table);
        if check_assumptions(&cam, &table, LEG_TOLERANCE_PX).is_err() {
            continue;
        }
        valid += 1;
        let truth: Vec<ImagePoint> = world.iter().map(|p| cam.project(p).unwrap()).collect();
        let kp: [ImagePoint; 6] = std::array::from_fn(|j| truth[j]);
        let base = truth[6].v;
        for noisy in [false, true] {
            let sigma = if noisy { 1.0 } else { 0.0 };
            let jit = |q: ImagePoint, rng: &mut Rng| ImagePoint::new(q.u + gauss(rng, sigma), q.v + gauss(rng, sigma));
            let kp_obs = kp.map(|q| jit(q, &mut rng));
            let base_obs = base + gauss(&mut rng, sigma);
            let t0 = Instant::now();
            let cal = match calibrate_from_keypoints(&table, &kp_obs, base_obs) {
                Ok(c) => c,
                Err(e) => return outcome(false, format!("camera {i}: {e}")),
            };
            slowest = slowest.max(t0.elapsed().as_secs_f64());
            let se: f64 = world
                .iter()
                .zip(&truth)
                .map(|(p, q)| cal.camera.project(p).map_or(f64::INFINITY, |r| r.dist(q).powi(2)))
                .sum();
            let rms = (se / world.len() as f64).sqrt();
            if noisy {
                worst_noisy = worst_noisy.max(rms);
                worst_fit = worst_fit.max(cal.rms);
            } else {
                worst_clean = worst_clean.max(rms);
            }
        }
    }
    outcome(
        valid == 100 && worst_clean < 1e-3 && worst_noisy <= 2.0 && slowest < 1.0,
        format!(
            "{valid} cameras; worst RMS against true projections {worst_clean:.2e} px noiseless, {worst_noisy:.3} px at 1 px noise (worst fit residual {worst_fit:.3} px); slowest {:.1} ms",
            slowest * 1e3
        ),
    )
}

struct ReconStats {
    pooled: f64,
    median: f64,
    worst: f64,
    rejected: usize,
}

/// Pooled and per-rally 3D ball RMS over reconstructed frames, with the
/// pipeline's default quality gate.
fn reconstruction_rms(rallies: &[SyntheticRally], noise: f64) -> ReconStats {
    let table = TableGeometry::ittf();
    let sampler = CameraSampler::default();
    let params = ReconParams::for_fps(60.0);
    let (mut se, mut n, mut rejected) = (0.0, 0usize, 0);
    let mut per_rally = Vec::new();
    for r in rallies {
        let cam = sampler.sample(&mut rng::stream(202, r.point.id), &table);
        let track = emit_synthetic_track(r, &cam, &table, (sampler.width, sampler.height), noise, 7).unwrap();
        let Ok(rec) = reconstruct_track(&track, &table, &params) else {
            rejected += 1;
            continue;
        };
        let (mut s1, mut n1) = (0.0, 0usize);
        for f in &rec.point.frames {
            let Some(t) = r.frames.iter().find(|t| t.frame_index == f.frame_index) else { continue };
            s1 += (f.ball - t.ball).norm_squared();
            n1 += 1;
        }
        se += s1;
        n += n1;
        per_rally.push((s1 / n1.max(1) as f64).sqrt());
    }
    per_rally.sort_by(f64::total_cmp);
    ReconStats {
        pooled: (se / n.max(1) as f64).sqrt(),
        median: per_rally.get(per_rally.len() / 2).copied().unwrap_or(f64::NAN),
        worst: per_rally.last().copied().unwrap_or(f64::NAN),
        rejected,
    }
}

fn reconstruction_round_trip() -> Outcome {
    let table = TableGeometry::ittf();
    let rallies = generate_corpus(0, 40, 303, &RallyParams::default(), &table);
    let clean = reconstruction_rms(&rallies, 0.0);
    let noisy = reconstruction_rms(&rallies, 1.0);
    let cm = |x: f64| x * 100.0;
    outcome(
        clean.pooled < 0.02 && noisy.pooled <= 0.15 && clean.rejected < rallies.len() / 2 && noisy.rejected < rallies.len() / 2,
        format!(
            "40 rallies; pooled ball RMS {:.2} cm noiseless, {:.2} cm at 1 px (per-rally median {:.2} cm, worst {:.1} cm); rejected {} and {}",
            cm(clean.pooled),
            cm(noisy.pooled),
            cm(noisy.median),
            cm(noisy.worst),
            clean.rejected,
            noisy.rejected
        ),
    )
}

/// Least-squares parabola residual through the normal equations.
fn parabola_sse(samples: &[(f64, f64)]) -> Option<f64> {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for &(t, v) in samples {
        let row = Vector3::new(1.0, t, t * t);
        a += row * row.transpose();
        b += row * v;
    }
    let c = a.lu().solve(&b)?;
    Some(samples.iter().map(|&(t, v)| (c[0] + c[1] * t + c[2] * t * t - v).powi(2)).sum())
}

fn bounce_selection_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut rng = rng::stream(404, 0);
    for _ in 0..1000 {
        let h1 = rng.random_range(0..20usize);
        let len = rng.random_range(12..40usize);
        let h2 = h1 + len;
        let bounce = h1 + rng.random_range(3..len - 3);
        let (a1, a2) = (rng.random_range(0.2..1.2), rng.random_range(0.2..1.2));
        let top = rng.random_range(100.0..200.0);
        let samples: Vec<(usize, ImagePoint)> = (h1..=h2)
            .map(|f| {
                let x = f as f64;
                let b = bounce as f64;
                let v = if f <= bounce {
                    300.0 - a1 * (x - h1 as f64) * (b - x) * 0.5 - (300.0 - top) * (x - h1 as f64) / (b - h1 as f64)
                } else {
                    top + a2 * (x - b) * (x - b) * 0.3 - 2.0 * (x - b)
                };
                (f, ImagePoint::new(3.0 * x, v + gauss(&mut rng, 0.5)))
            })
            .collect();
        let track = BallTrack2D::new(samples.clone()).unwrap();
        let candidates: Vec<usize> = (h1 + 1..h2).collect();
        let got = select_bounce(&track, h1, h2, &candidates).map(|r| r.0).ok();
        let vs = |lo: usize, hi: usize| -> Vec<(f64, f64)> {
            samples
                .iter()
                .filter(|(f, _)| *f >= lo && *f <= hi)
                .map(|(f, q)| ((*f - h1) as f64, q.v))
                .collect()
        };
        let mut best: Option<(usize, f64)> = None;
        for c in h1 + 1..h2 {
            let (l, r) = (vs(h1, c), vs(c, h2));
            if l.len() < 3 || r.len() < 3 {
                continue;
            }
            let (Some(x), Some(y)) = (parabola_sse(&l), parabola_sse(&r)) else { continue };
            if best.is_none_or(|b| x + y < b.1) {
                best = Some((c, x + y));
            }
        }
        if got != best.map(|b| b.0) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 1000 random tracks"))
}

fn stokes_model() -> Outcome {
    let mut rng = rng::stream(505, 0);
    let mut rv = |r: f64| Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(0.5..1.5));
    let (mut endpoint, mut small_k) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (b0, bt) = (rv(2.0), rv(2.0));
        let t_end = 0.1 + 0.5 * (b0.x.abs() + bt.y.abs()) / 2.0;
        let k = 0.05 + (b0.y.abs() + bt.x.abs()) / 2.0;
        let seg = StokesSegment::new(b0, bt, t_end, k).unwrap();
        endpoint = endpoint.max((seg.eval(0.0) - b0).norm()).max((seg.eval(t_end) - bt).norm());
        let tiny = StokesSegment::new(b0, bt, t_end, 1e-7).unwrap();
        for i in 1..10 {
            let t = t_end * i as f64 / 10.0;
            let free = b0 + (bt - b0) * (t / t_end) + Vec3::new(0.0, 0.0, 0.5 * GRAVITY * t * (t_end - t));
            small_k = small_k.max((tiny.eval(t) - free).norm());
        }
    }
    // Planted drag recovered from noiseless and noisy projections.
    let table = TableGeometry::ittf();
    let sampler = CameraSampler::default();
    let (mut recovery, mut grid_gap) = (0.0f64, 0.0f64);
    for i in 0..20u64 {
        let mut rng = rng::stream(506, i);
        let cam = sampler.sample(&mut rng, &table);
        let b0 = Vec3::new(1.5, rng.random_range(-0.5..0.5), 1.0);
        let bt = Vec3::new(-0.8, rng.random_range(-0.6..0.6), table.height);
        let k = rng.random_range(0.05..0.5);
        let t_end = rng.random_range(0.2..0.35);
        let seg = StokesSegment::new(b0, bt, t_end, k).unwrap();
        let n = (t_end * 60.0) as usize;
        let times: Vec<f64> = (0..=n).map(|j| j as f64 / 60.0).collect();
        let clean: Vec<(f64, ImagePoint)> = times.iter().map(|&t| (t, cam.project(&seg.eval(t)).unwrap())).collect();
        recovery = recovery.max((fit_drag(&b0, &bt, t_end, &clean, &cam).k - k).abs());
        let noisy: Vec<(f64, ImagePoint)> = clean
            .iter()
            .map(|(t, q)| (*t, ImagePoint::new(q.u + gauss(&mut rng, 1.0), q.v + gauss(&mut rng, 1.0))))
            .collect();
        let fit = fit_drag(&b0, &bt, t_end, &noisy, &cam);
        let steps = ((K_MAX - K_MIN) / 1e-4).round() as usize;
        let grid = (0..=steps)
            .map(|j| K_MIN + j as f64 * 1e-4)
            .map(|kk| (kk, drag_objective(&b0, &bt, t_end, kk, &noisy, &cam)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        grid_gap = grid_gap.max((fit.k - grid.0).abs());
    }
    outcome(
        endpoint <= 1e-12 && small_k <= 1e-6 && recovery < 1e-3 && grid_gap <= 1e-4,
        format!(
            "endpoint {endpoint:.1e} m, small-k {small_k:.1e} m, planted k error {recovery:.1e}, grid-search gap {grid_gap:.1e}"
        ),
    )
}

fn conformal_quantile_oracle() -> Outcome {
    let mut rng = rng::stream(606, 0);
    let mut mismatches = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..400usize);
        let res: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0f64).powi(2)).collect();
        let pct = 5 * (1 + i % 10);
        let alpha = pct as f64 / 100.0;
        let mut sorted = res.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = ((n + 1) * (100 - pct)).div_ceil(100);
        let want = if rank > n { f64::INFINITY } else { sorted[rank - 1] };
        if conformal_quantile(&res, alpha).ok() != Some(want) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over 1000 residual sets"))
}

/// Shared anticipation fixture: samples at a 0.2 s lead split by point id.
struct Anticipation {
    table: TableGeometry,
    points: Vec<Point>,
    train: Vec<ExchangeSample>,
    cal: Vec<ExchangeSample>,
    test: Vec<ExchangeSample>,
    horizons: Vec<usize>,
}

const TRAIN_POINTS: u64 = 600;
const CAL_POINTS: u64 = 1500;

fn anticipation_fixture() -> Anticipation {
    let table = TableGeometry::ittf();
    let points: Vec<Point> = generate_corpus(0, 2400, 707, &RallyParams::default(), &table)
        .into_iter()
        .map(|r| r.point)
        .collect();
    let horizons: Vec<usize> = (1..=42).collect();
    let mut all: Vec<ExchangeSample> = Vec::new();
    for p in &points {
        all.extend(exchange_samples(p, &table, 12, 24, 42).unwrap());
    }
    let train = all.iter().filter(|s| s.point_id < TRAIN_POINTS).cloned().collect();
    let mut cal: Vec<ExchangeSample> = all
        .iter()
        .filter(|s| (TRAIN_POINTS..CAL_POINTS).contains(&s.point_id))
        .cloned()
        .collect();
    let mut test: Vec<ExchangeSample> = all.into_iter().filter(|s| s.point_id >= CAL_POINTS).collect();
    cal.truncate(2500);
    test.truncate(1000);
    Anticipation {
        table,
        points,
        train,
        cal,
        test,
        horizons,
    }
}

fn coverage_reproduction(fx: &Anticipation) -> Outcome {
    let t0 = Instant::now();
    if fx.cal.len() < 2500 || fx.test.len() < 1000 {
        return outcome(false, format!("only {} calibration and {} test exchanges", fx.cal.len(), fx.test.len()));
    }
    let members = physics_baseline_ensemble(0, 5, &PhysicsParams::default(), &fx.train, &fx.table).unwrap();
    let residuals = calibration_residuals(&members, &fx.cal, &fx.horizons).unwrap();
    let rows = coverage_table(&members, &residuals, &fx.test, &[0.10, 0.15, 0.20]).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &rows {
        let c = &r.coverage;
        let axis_ok = c.per_axis.iter().all(|&x| x >= 1.0 - r.alpha - 0.02);
        pass &= axis_ok && c.joint >= 1.0 - 3.0 * r.alpha;
        parts.push(format!(
            "a={:.2}: x {:.3} y {:.3} z {:.3} joint {:.3}",
            r.alpha, c.per_axis[0], c.per_axis[1], c.per_axis[2], c.joint
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(pass && secs < 120.0, format!("{} ({secs:.1} s)", parts.join("; ")))
}

fn width_trend_and_bias(fx: &Anticipation) -> (Outcome, Outcome) {
    let members = physics_baseline_ensemble(0, 5, &PhysicsParams::default(), &fx.train, &fx.table).unwrap();
    let calib = calibration_residuals(&members, &fx.cal, &fx.horizons).unwrap().calibrate(0.15).unwrap();
    let mut outputs = Vec::new();
    let mut cases = Vec::new();
    for s in &fx.test {
        let f = ensemble_forecast(&members, &s.context, &fx.horizons).unwrap();
        outputs.extend(fx.horizons.iter().copied().zip(f.iter().copied()));
        if let Some((h, y)) = s.crossing {
            if let Some(o) = fx.horizons.iter().position(|&x| x == h).map(|i| f[i]) {
                cases.push((build_region(&o, &calib, h).unwrap(), y));
            }
        }
    }
    let rows = width_vs_horizon(&calib, &outputs);
    let mean = |w: [f64; 3]| w.iter().sum::<f64>() / 3.0;
    let (first, last) = (rows.first().unwrap(), rows.last().unwrap());
    let widths = outcome(
        mean(last.mean_width) > mean(first.mean_width),
        format!(
            "mean width {:.3} m at horizon {} vs {:.3} m at horizon {}",
            mean(first.mean_width),
            first.horizon,
            mean(last.mean_width),
            last.horizon
        ),
    );
    let table = extreme_hit_bias(&cases, &fx.table, 0.75);
    let (correct, biased) = table.correct_of_biased();
    let lb = wilson_lower_bound(correct, biased, 1.645);
    let bias = outcome(
        biased > 0 && lb > 0.5,
        format!("{correct}/{biased} biased regions on the correct side, 95% lower bound {lb:.3}"),
    );
    (widths, bias)
}

fn split_points(fx: &Anticipation) -> (Vec<Point>, Vec<Point>, Vec<Point>) {
    let pick = |lo: u64, hi: u64| fx.points.iter().filter(|p| (lo..hi).contains(&p.id)).cloned().collect();
    (pick(0, TRAIN_POINTS), pick(TRAIN_POINTS, CAL_POINTS), pick(CAL_POINTS, 2400))
}

fn control_ordering(fx: &Anticipation) -> Outcome {
    let t0 = Instant::now();
    let (train, cal, test) = split_points(fx);
    let corpus = Corpus {
        train: &train,
        cal: &cal,
        test: &test,
    };
    let cfg = ExperimentConfig {
        episodes: 1000,
        ..ExperimentConfig::default()
    };
    let cells = run_experiment(&corpus, &cfg, &fx.table, &[]).unwrap();
    let get = |s: Strategy| cells.iter().find(|c| c.strategy == s).unwrap();
    let (b, a, o) = (get(Strategy::Baseline), get(Strategy::Anticipatory), get(Strategy::Oracle));
    let returned = |c: &ttrally::control::ExperimentCell| c.results.iter().map(|r| r.returned).collect::<Vec<_>>();
    let lb = paired_difference_lower_bound(&returned(a), &returned(b), 1.645);
    let (rb, ra, ro) = (b.summary.return_rate, a.summary.return_rate, o.summary.return_rate);
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        b.summary.episodes >= 500 && ro >= ra && ra >= rb && lb >= 0.03 && secs < 300.0,
        format!(
            "{} episodes; return rate baseline {rb:.3}, anticipatory {ra:.3}, oracle {ro:.3}; anticipatory minus baseline 95% lower bound {lb:.3} ({secs:.1} s)",
            b.summary.episodes
        ),
    )
}

fn ablation_grids(fx: &Anticipation) -> Outcome {
    let (train, cal, test) = split_points(fx);
    let corpus = Corpus {
        train: &train,
        cal: &cal,
        test: &test[..300],
    };
    let cfg = ExperimentConfig {
        lambdas: vec![0.0, 0.1, 0.5],
        t_hs: vec![0.1, 0.2, 0.4],
        centrals: vec![CentralChoice::TableCentre, CentralChoice::MeanHit],
        strategies: vec![Strategy::Anticipatory],
        ..ExperimentConfig::default()
    };
    let cells = run_experiment(&corpus, &cfg, &fx.table, &[]).unwrap();
    let complete = cells.len() == 18 && cells.iter().all(|c| c.summary.episodes > 0 && c.results.len() == c.summary.episodes);
    let best = |key: &dyn Fn(&ttrally::control::ExperimentCell) -> f64| {
        cells
            .iter()
            .max_by(|x, y| x.summary.return_rate.total_cmp(&y.summary.return_rate))
            .map(key)
            .unwrap()
    };
    outcome(
        complete,
        format!(
            "{} cells over lambda x T_h x central; best cell lambda {} T_h {}",
            cells.len(),
            best(&|c| c.lambda),
            best(&|c| c.t_h)
        ),
    )
}

fn physics_invariants() -> Outcome {
    let mut rng = rng::stream(1111, 0);
    let mut speed_gap = 0.0f64;
    for _ in 0..10_000 {
        let v = Vec3::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
        let n = Vec3::new(gauss(&mut rng, 1.0), gauss(&mut rng, 1.0), gauss(&mut rng, 1.0)).normalize();
        if let Ok(w) = racket_reflect(&v, &n) {
            speed_gap = speed_gap.max((w.norm() - v.norm()).abs() / v.norm().max(1.0));
        }
    }
    let table = TableGeometry::ittf();
    let b = SafeBox::default_for(&table);
    let mut pose = RacketPose::facing(table_centre_pose(&table), &REFERENCE_NORMAL);
    let (mut escaped, mut max_step) = (0, 0.0f64);
    for i in 0..10_000 {
        if i % 20 == 0 {
            let t = Vec3::new(rng.random_range(-4.0..1.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..3.0));
            let aim = Vec3::new(1.0, gauss(&mut rng, 0.5), gauss(&mut rng, 0.5));
            let target = RacketPose::facing(t, &aim);
            let next = step_robot(&pose, &target, 0.01, 2.0, 720f64.to_radians(), &b);
            escaped += usize::from(!b.contains(&next.position));
            max_step = max_step.max((next.position - pose.position).norm());
            pose = next;
        } else {
            let t = pose;
            let target = RacketPose::facing(t.position + Vec3::new(0.3, -0.4, 0.2), &REFERENCE_NORMAL);
            let next = step_robot(&pose, &target, 0.01, 2.0, 720f64.to_radians(), &b);
            escaped += usize::from(!b.contains(&next.position));
            max_step = max_step.max((next.position - pose.position).norm());
            pose = next;
        }
    }
    let target = return_target(&table);
    let mut worst_landing = 0.0f64;
    for (speed, height) in [(5.0, 0.15), (8.0, 0.25), (12.0, 0.35), (15.0, 0.2)] {
        let b_hit = Vec3::new(-table.half_length(), 0.0, table.height + height);
        let v = Vec3::new(-speed, 0.0, 0.0);
        let g = solve_target_pose(&v, &b_hit, &target, table.height).unwrap();
        let w = racket_reflect(&v, &g.pose.normal()).unwrap();
        let (land, _) = ballistic_landing(&b_hit, &w, table.height).unwrap();
        worst_landing = worst_landing.max((land.xy() - target.xy()).norm());
    }
    outcome(
        speed_gap <= 1e-12 && escaped == 0 && max_step <= 2.0 * 0.01 + 1e-12 && worst_landing < 0.05,
        format!(
            "speed change {speed_gap:.1e}; {escaped} box exits; largest step {max_step:.4} m; head-on landing error {:.2} cm",
            worst_landing * 100.0
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("[{}] {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "calibration round trip", calibration_round_trip());
    report(2, "ball reconstruction round trip", reconstruction_round_trip());
    report(3, "bounce selection vs brute force", bounce_selection_oracle());
    report(4, "Stokes drag model", stokes_model());
    report(5, "conformal quantile vs sort-and-index", conformal_quantile_oracle());
    let fx = anticipation_fixture();
    report(6, "coverage", coverage_reproduction(&fx));
    let (widths, bias) = width_trend_and_bias(&fx);
    report(7, "interval width grows with horizon", widths);
    report(8, "extreme-hit bias", bias);
    report(9, "control strategy ordering", control_ordering(&fx));
    report(10, "ablation grids", ablation_grids(&fx));
    report(11, "physics invariants", physics_invariants());
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed; failed {failed:?}",
        results.len() - failed.len(),
        results.len()
    );
}
