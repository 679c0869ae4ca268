//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use quadtrack_core::association::{hungarian_assign, MotionLabel};
use quadtrack_core::config::Config;
use quadtrack_core::eval::{evaluate, EvalConfig};
use quadtrack_core::factors::{world_motion, Factor, FactorKind, VarKey};
use quadtrack_core::metrics::{ate_rmse, e_axe, e_trans, iou_2d_metric, monte_carlo_3d_iou};
use quadtrack_core::optimizer::{FrameInsert, LmConfig, StateValue, WindowState};
use quadtrack_core::pipeline::{Pipeline, PipelineConfig};
use quadtrack_core::quadric::project_bbox;
use quadtrack_core::se3::{project, rot_x, rot_z, se3_exp, se3_log, so3_exp};
use quadtrack_core::simulator::{
    gen_dynamic_scene, gen_static_benchmark, DynamicSceneConfig, NoiseConfig, StaticArcConfig,
};
use quadtrack_core::sweep::{
    benchmark_refine_config, estimate_oqi, estimate_svd, run_sweep, Method, NoiseAxis, SweepConfig,
    SweepRow,
};
use quadtrack_core::{BBox, Intrinsics, Pose, QuadricParams, Twist};

type Outcome = Result<String, String>;
type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn static_trials() -> (StaticArcConfig, Vec<quadtrack_core::simulator::StaticTrial>) {
    let arc = StaticArcConfig::default();
    let seeds: Vec<u64> = (0..10).collect();
    let trials = gen_static_benchmark(&arc, &NoiseConfig::default(), &seeds, 10);
    (arc, trials)
}

fn c1_svd_exact() -> Outcome {
    let t0 = Instant::now();
    let (arc, trials) = static_trials();
    let (mut max_t, mut max_a, mut min_iou) = (0.0f64, 0.0f64, 1.0f64);
    for t in &trials {
        let q = estimate_svd(t, &arc).map_err(|e| format!("trial {:?}: {e}", t.tag))?;
        max_t = max_t.max(e_trans(&t.gt, &q));
        max_a = max_a.max(e_axe(&t.gt, &q));
        min_iou =
            min_iou.min(iou_2d_metric(&t.gt, &q, &t.cameras_gt, &arc.intrinsics).unwrap_or(0.0));
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        trials.len() == 100 && max_t < 1e-3 && max_a < 1e-3 && min_iou > 0.99 && secs < 5.0,
        format!("{} trials, max e_trans {max_t:.2e} m, max e_axe {max_a:.2e} m, min IoU {min_iou:.4}, {secs:.2} s", trials.len()),
    )
}

fn c2_oqi_zero_noise() -> Outcome {
    let t0 = Instant::now();
    let (arc, trials) = static_trials();
    let refine = benchmark_refine_config();
    let (mut max_t, mut min_iou) = (0.0f64, 1.0f64);
    for t in &trials {
        let q = estimate_oqi(t, &arc, &refine).map_err(|e| format!("trial {:?}: {e}", t.tag))?;
        max_t = max_t.max(e_trans(&t.gt, &q));
        min_iou =
            min_iou.min(iou_2d_metric(&t.gt, &q, &t.cameras_gt, &arc.intrinsics).unwrap_or(0.0));
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        min_iou > 0.95 && max_t < 0.05 && secs < 30.0,
        format!(
            "{} trials, min IoU {min_iou:.4}, max e_trans {max_t:.4} m, {secs:.2} s",
            trials.len()
        ),
    )
}

struct Sweeps {
    translation: Vec<SweepRow>,
    bbox: Vec<SweepRow>,
}

fn sweeps() -> Sweeps {
    let run =
        |axis, levels: Vec<f64>| run_sweep(&SweepConfig::new(axis, levels)).expect("sweep runs");
    Sweeps {
        translation: run(
            NoiseAxis::Translation,
            vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
        ),
        bbox: run(NoiseAxis::Bbox, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
    }
}

fn row(rows: &[SweepRow], m: Method, level: f64) -> &SweepRow {
    rows.iter()
        .find(|r| r.method == m && r.level == level)
        .expect("grid point present")
}

fn c3_ordering(s: &Sweeps) -> Outcome {
    let t_oqi = row(&s.translation, Method::Oqi, 15.0).success_rate;
    let t_svd = row(&s.translation, Method::SvdBaseline, 15.0).success_rate;
    let b_oqi = row(&s.bbox, Method::Oqi, 4.0).success_rate;
    let b_svd = row(&s.bbox, Method::SvdBaseline, 4.0).success_rate;
    check(
        t_oqi - t_svd >= 0.3 && b_svd < 0.5 && b_oqi > 0.8,
        format!("translation 15%: SR oqi {t_oqi:.2} vs svd {t_svd:.2}; bbox 4%: SR oqi {b_oqi:.2} vs svd {b_svd:.2}"),
    )
}

fn c4_envelope(s: &Sweeps) -> Outcome {
    let worst = |rows: &[SweepRow]| {
        rows.iter()
            .filter(|r| r.method == Method::Oqi)
            .fold((0.0f64, 0.0f64), |(a, t), r| {
                (a.max(r.e_axe_mean), t.max(r.e_trans_mean))
            })
    };
    let (ta, tt) = worst(&s.translation);
    let (ba, bt) = worst(&s.bbox);
    let finite = [ta, tt, ba, bt].iter().all(|v| v.is_finite());
    check(
        finite && ta.max(ba) <= 1.0 && tt.max(bt) <= 2.5,
        format!("worst OQI means: translation axis e_axe {ta:.3} m e_trans {tt:.3} m; bbox axis e_axe {ba:.3} m e_trans {bt:.3} m"),
    )
}

fn c5_monotone(s: &Sweeps) -> Outcome {
    let mut violations = Vec::new();
    let mut compared = 0;
    for (axis, rows) in [("translation", &s.translation), ("bbox", &s.bbox)] {
        for m in [Method::Oqi, Method::SvdBaseline] {
            let mut series: Vec<&SweepRow> = rows.iter().filter(|r| r.method == m).collect();
            series.sort_by(|a, b| a.level.total_cmp(&b.level));
            for (name, get) in [
                (
                    "e_trans",
                    (|r: &SweepRow| r.e_trans_mean) as fn(&SweepRow) -> f64,
                ),
                ("e_axe", |r| r.e_axe_mean),
            ] {
                for w in series.windows(2) {
                    let (a, b) = (get(w[0]), get(w[1]));
                    if !(a.is_finite() && b.is_finite()) {
                        continue;
                    }
                    compared += 1;
                    if b < 0.9 * a {
                        violations.push(format!(
                            "{axis}/{}/{name} {}→{}: {a:.3}→{b:.3}",
                            m.as_str(),
                            w[0].level,
                            w[1].level
                        ));
                    }
                }
            }
        }
    }
    check(
        violations.is_empty() && compared >= 20,
        if violations.is_empty() {
            format!("{compared} adjacent pairs non-decreasing within 10%")
        } else {
            violations.join("; ")
        },
    )
}

fn c6_dynamic_tracking() -> Outcome {
    let frames = gen_dynamic_scene(&DynamicSceneConfig::single(0));
    let t0 = Instant::now();
    let est = Pipeline::new(PipelineConfig::default())
        .run(&frames)
        .map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let (mut max_h, mut max_t, mut missing, mut not_dynamic) = (0.0f64, 0.0f64, 0, Vec::new());
    let mut prev: Option<(Pose, Pose)> = None;
    for (f, e) in frames.iter().zip(&est) {
        let gt = &f.gt_objects[0];
        let Some(tr) = e.tracks.first() else {
            missing += 1;
            prev = None;
            continue;
        };
        let center = tr
            .world_quadric()
            .map(|q| q.translation)
            .unwrap_or(tr.pose_wo.translation);
        max_t = max_t.max((center - gt.pose_wo.translation).norm());
        if let Some((pe, pg)) = prev {
            let h =
                world_motion(&pe, &tr.pose_wo).compose(&world_motion(&pg, &gt.pose_wo).inverse());
            max_h = max_h.max(se3_log(&h).map_err(|e| e.to_string())?.norm());
        }
        if f.frame >= 10 && tr.motion_label != MotionLabel::Dynamic {
            not_dynamic.push(f.frame);
        }
        prev = Some((tr.pose_wo, gt.pose_wo));
    }
    check(
        est.len() == 100 && missing == 0 && max_h < 1e-2 && max_t < 0.05 && not_dynamic.is_empty() && secs < 10.0,
        format!(
            "{} frames, max ‖log(Ĥ·H⁻¹)‖ {max_h:.2e}, max translation error {max_t:.4} m, frames without track {missing}, not Dynamic from frame 10: {not_dynamic:?}, {secs:.2} s",
            est.len()
        ),
    )
}

fn c7_mot() -> Outcome {
    let frames = gen_dynamic_scene(&DynamicSceneConfig::crossing(0));
    let est = Pipeline::new(PipelineConfig::default())
        .run(&frames)
        .map_err(|e| e.to_string())?;
    let m = evaluate(
        &est,
        &frames,
        &EvalConfig {
            mc_samples: 10_000,
            ..EvalConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let get = |k: &str| m.get(k).copied().flatten().unwrap_or(f64::NAN);
    let (mota, motp, ids) = (get("mot.mota"), get("mot.motp"), get("mot.id_switches"));
    check(
        mota == 1.0 && ids == 0.0 && motp >= 0.95,
        format!(
            "MOTA {mota:.4}, MOTP {motp:.4}, id switches {ids}, GT boxes {}",
            get("mot.gt_count")
        ),
    )
}

fn c8_localization() -> Outcome {
    let frames = gen_dynamic_scene(&DynamicSceneConfig::static_scene(0));
    let gt: Vec<Vector3<f64>> = frames
        .iter()
        .map(|f| f.camera.gt_pose_wc.expect("gt camera").translation)
        .collect();
    let mut ate = BTreeMap::new();
    for quad in [true, false] {
        let mut c = Config::default();
        c.set("pipeline.camera_mode=estimate").unwrap();
        c.set(&format!("pipeline.use_quadric_factors={quad}"))
            .unwrap();
        let est = Pipeline::new(PipelineConfig::from_config(&c).unwrap())
            .run(&frames)
            .map_err(|e| e.to_string())?;
        let e: Vec<Vector3<f64>> = est.iter().map(|r| r.camera_pose.translation).collect();
        ate.insert(quad, ate_rmse(&gt, &e).map_err(|e| e.to_string())?);
    }
    let (with_q, points) = (ate[&true], ate[&false]);
    check(
        frames.len() == 50 && with_q < 0.05 && with_q <= 1.1 * points,
        format!(
            "{} frames, ATE with quadrics {with_q:.4} m, points only {points:.4} m",
            frames.len()
        ),
    )
}

fn brute_force_min(cost: &DMatrix<f64>) -> f64 {
    let (n, m) = cost.shape();
    let (rows, cols, t) = if n <= m { (n, m, false) } else { (m, n, true) };
    let at = |r: usize, c: usize| if t { cost[(c, r)] } else { cost[(r, c)] };
    fn rec(
        r: usize,
        rows: usize,
        cols: usize,
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut f64,
        at: &dyn Fn(usize, usize) -> f64,
    ) {
        if r == rows {
            *best = best.min(acc);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                rec(r + 1, rows, cols, used, acc + at(r, c), best, at);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, rows, cols, &mut vec![false; cols], 0.0, &mut best, &at);
    best
}

/// Central-difference Jacobians of `f.raw` with respect to each key.
fn fd_jacobian_error(f: &Factor, w: &WindowState) -> f64 {
    let (_, analytic) = f.raw(w).expect("factor evaluates");
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (ki, key) in f.keys.iter().enumerate() {
        let v = w.values[key];
        let mut num = DMatrix::zeros(analytic[ki].nrows(), v.dim());
        for c in 0..v.dim() {
            let mut d = vec![0.0; v.dim()];
            let mut eval = |s: f64| {
                d[c] = s;
                let mut ws = w.clone();
                ws.values.insert(*key, v.retract(&d));
                f.raw(&ws).expect("perturbed factor evaluates").0
            };
            let col = (eval(h) - eval(-h)) / (2.0 * h);
            num.set_column(c, &col);
        }
        let denom = analytic[ki].norm().max(1e-9);
        worst = worst.max((&num - &analytic[ki]).norm() / denom);
    }
    worst
}

fn jacobian_check() -> Result<f64, String> {
    let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
    let cam = Pose::look_at(
        &Vector3::new(0.5, -9.0, 2.0),
        &Vector3::new(0.0, 0.0, 0.5),
        &Vector3::z(),
    );
    let obj = |i: f64| {
        Pose::new(
            rot_z(0.1 * i) * rot_x(0.02),
            Vector3::new(0.8 * i, 0.1 * i * i, 0.75),
        )
    };
    let quadric = QuadricParams::new(
        Vector3::new(2.0, 0.9, 0.75),
        Vector3::new(0.05, -0.02, 0.0),
        rot_z(0.03),
    );
    let mut w = WindowState::new(15);
    let values = [
        (VarKey::Camera(0), StateValue::Pose(cam)),
        (
            VarKey::Landmark(0),
            StateValue::Point(Vector3::new(0.3, 1.0, 1.2)),
        ),
        (
            VarKey::Object { track: 1, frame: 0 },
            StateValue::Pose(obj(0.0)),
        ),
        (
            VarKey::Object { track: 1, frame: 1 },
            StateValue::Pose(obj(1.0)),
        ),
        (
            VarKey::Object { track: 1, frame: 2 },
            StateValue::Pose(obj(2.3)),
        ),
        (
            VarKey::ObjectPoint {
                track: 1,
                feature: 0,
            },
            StateValue::Point(Vector3::new(0.4, -0.2, 0.3)),
        ),
        (VarKey::Quadric(1), StateValue::Quadric(quadric)),
    ];
    w.values.extend(values);
    let o = |f| VarKey::Object { track: 1, frame: f };
    let z = Vector2::new(300.0, 250.0);
    let mk = |kind, keys: Vec<VarKey>, n| Factor {
        kind,
        keys,
        sqrt_info: DVector::from_element(n, 1.0),
        robust: None,
    };
    let factors = vec![
        mk(
            FactorKind::StaticFeature {
                z,
                depth: Some(9.0),
                k,
            },
            vec![VarKey::Camera(0), VarKey::Landmark(0)],
            3,
        ),
        mk(
            FactorKind::DynamicFeature {
                z,
                depth: Some(9.0),
                k,
            },
            vec![
                VarKey::Camera(0),
                o(2),
                VarKey::ObjectPoint {
                    track: 1,
                    feature: 0,
                },
            ],
            3,
        ),
        mk(FactorKind::MotionModel, vec![o(0), o(1), o(2)], 6),
        mk(
            FactorKind::QuadricBox {
                bbox: BBox::new(200.0, 180.0, 420.0, 300.0),
                k,
            },
            vec![VarKey::Quadric(1), o(1), VarKey::Camera(0)],
            4,
        ),
        mk(
            FactorKind::PriorSize {
                prior: Vector3::new(1.8, 1.0, 0.7),
            },
            vec![VarKey::Quadric(1)],
            3,
        ),
        mk(FactorKind::Planar { height: 0.7 }, vec![o(2)], 3),
        mk(FactorKind::PosePrior { pose: obj(1.0) }, vec![o(1)], 6),
        mk(
            FactorKind::PoseBetween {
                measured: se3_exp(&Twist::new(
                    Vector3::new(0.7, 0.1, 0.0),
                    Vector3::new(0.0, 0.0, 0.05),
                )),
            },
            vec![o(0), o(1)],
            6,
        ),
    ];
    let mut worst = 0.0f64;
    for f in &factors {
        worst = worst.max(fd_jacobian_error(f, &w));
    }
    Ok(worst)
}

fn sampled_silhouette(q: &QuadricParams, cam: &Pose, k: &Intrinsics) -> BBox {
    let (mut x0, mut y0, mut x1, mut y1) = (
        f64::INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::NEG_INFINITY,
    );
    let n = 720;
    for i in 0..=n {
        let th = std::f64::consts::PI * i as f64 / n as f64;
        for j in 0..2 * n {
            let ph = std::f64::consts::PI * j as f64 / n as f64;
            let unit = Vector3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos());
            let pw = q.translation + q.rotation * q.axes.component_mul(&unit);
            let u = project(k, &cam.inverse().transform_point(&pw)).expect("in front");
            x0 = x0.min(u.x);
            y0 = y0.min(u.y);
            x1 = x1.max(u.x);
            y1 = y1.max(u.y);
        }
    }
    BBox::new(x0, y0, x1, y1)
}

fn c9_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut hung_bad = 0;
    for _ in 0..10_000 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let cost = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..10.0));
        let a = hungarian_assign(&cost, f64::INFINITY);
        let total: f64 = a.pairs.iter().map(|&(r, c)| cost[(r, c)]).sum();
        if a.pairs.len() != n.min(m) || (total - brute_force_min(&cost)).abs() > 1e-9 {
            hung_bad += 1;
        }
    }

    let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
    let mut bbox_err = 0.0f64;
    for i in 0..5 {
        let q = QuadricParams::new(
            Vector3::new(
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
                rng.random_range(0.5..2.5),
            ),
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..1.0),
            ),
            so3_exp(&Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )),
        );
        let cam = Pose::look_at(
            &Vector3::new(2.0 * i as f64 - 4.0, -12.0, 3.0),
            &Vector3::zeros(),
            &Vector3::z(),
        );
        let tangent = project_bbox(&q, &Pose::identity(), &cam, &k).map_err(|e| e.to_string())?;
        let sampled = sampled_silhouette(&q, &cam, &k);
        bbox_err = bbox_err.max((tangent.to_vector() - sampled.to_vector()).amax());
    }

    let jac = jacobian_check()?;

    let mut exp_log = 0.0f64;
    for _ in 0..1000 {
        let x = Twist::new(
            Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0)),
            Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) * rng.random_range(0.0..3.0)
                / 3f64.sqrt(),
        );
        let back = se3_log(&se3_exp(&x)).map_err(|e| e.to_string())?;
        exp_log = exp_log.max((back.to_vector() - x.to_vector()).amax());
    }

    let mc = monte_carlo_3d_iou(
        &QuadricParams::sphere(1.0, Vector3::zeros()),
        &QuadricParams::sphere(2.0, Vector3::zeros()),
        100_000,
        3,
    );
    let mc_ok = (mc.iou - 0.125).abs() <= 3.0 * mc.stderr;

    check(
        hung_bad == 0 && bbox_err < 0.5 && jac < 1e-4 && exp_log < 1e-9 && mc_ok,
        format!(
            "Hungarian mismatches {hung_bad}/10000, tangent vs sampled box {bbox_err:.3} px, Jacobian rel err {jac:.2e}, exp/log {exp_log:.2e}, nested-sphere IoU {:.4} ± {:.4}",
            mc.iou, mc.stderr
        ),
    )
}

fn feature(cam: u64, lm: u64, z: Vector2<f64>, depth: f64) -> Factor {
    Factor {
        kind: FactorKind::StaticFeature {
            z,
            depth: Some(depth),
            k: Intrinsics::new(500.0, 500.0, 320.0, 240.0),
        },
        keys: vec![VarKey::Camera(cam), VarKey::Landmark(lm)],
        sqrt_info: DVector::from_element(3, 1.0),
        robust: None,
    }
}

fn pose_prior(cam: u64, pose: Pose, sigma: f64) -> Factor {
    Factor {
        kind: FactorKind::PosePrior { pose },
        keys: vec![VarKey::Camera(cam)],
        sqrt_info: DVector::from_element(6, 1.0 / sigma),
        robust: None,
    }
}

/// Window whose oldest frame is connected to nothing else; marginalizing it
/// must leave the remaining estimate unchanged.
fn independence_delta() -> Result<f64, String> {
    let k = Intrinsics::new(500.0, 500.0, 320.0, 240.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cams: Vec<Pose> = (0..6)
        .map(|i| {
            Pose::look_at(
                &Vector3::new(i as f64 * 0.5, -8.0, 1.5),
                &Vector3::new(i as f64 * 0.5, 0.0, 0.5),
                &Vector3::z(),
            )
        })
        .collect();
    let points: Vec<Vector3<f64>> = (0..40)
        .map(|_| {
            Vector3::new(
                rng.random_range(-4.0..6.0),
                rng.random_range(-2.0..3.0),
                rng.random_range(-1.0..3.0),
            )
        })
        .collect();
    let build = |isolated: bool| -> Result<WindowState, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = WindowState::new(5);
        if isolated {
            let mut ins = FrameInsert {
                frame: 0,
                ..Default::default()
            };
            ins.states
                .push((VarKey::Camera(0), StateValue::Pose(Pose::identity())));
            for i in 0..10u64 {
                let p = Vector3::new(i as f64 * 0.2 - 1.0, 0.3, 6.0);
                ins.states
                    .push((VarKey::Landmark(1000 + i), StateValue::Point(p)));
                ins.factors
                    .push(feature(0, 1000 + i, project(&k, &p).unwrap(), 6.0));
            }
            ins.factors.push(pose_prior(0, Pose::identity(), 1e-3));
            w.add_frame(ins).map_err(|e| e.to_string())?;
        }
        for f in 1..5usize {
            let d = Twist::new(
                Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1)),
                Vector3::from_fn(|_, _| rng.random_range(-0.03..0.03)),
            );
            let mut ins = FrameInsert {
                frame: f as u64,
                ..Default::default()
            };
            ins.states.push((
                VarKey::Camera(f as u64),
                StateValue::Pose(cams[f].retract(&d)),
            ));
            for (i, p) in points.iter().enumerate() {
                let pc = cams[f].inverse().transform_point(p);
                if let Ok(z) = project(&k, &pc) {
                    let noisy = p + Vector3::from_fn(|_, _| rng.random_range(-0.1..0.1));
                    ins.states
                        .push((VarKey::Landmark(i as u64), StateValue::Point(noisy)));
                    ins.factors.push(feature(f as u64, i as u64, z, pc.z));
                }
            }
            if f == 1 {
                ins.factors.push(pose_prior(1, cams[1], 1e-3));
            }
            w.add_frame(ins).map_err(|e| e.to_string())?;
        }
        w.add_frame(FrameInsert {
            frame: 5,
            states: vec![(VarKey::Camera(5), StateValue::Pose(Pose::identity()))],
            factors: vec![pose_prior(5, Pose::identity(), 1.0)],
        })
        .map_err(|e| e.to_string())?;
        w.lm_solve(&LmConfig::default())
            .map_err(|e| e.to_string())?;
        Ok(w)
    };
    let (a, b) = (build(true)?, build(false)?);
    if a.values.len() != b.values.len() {
        return Err(format!(
            "state counts differ: {} vs {}",
            a.values.len(),
            b.values.len()
        ));
    }
    let mut worst = 0.0f64;
    for (key, va) in &a.values {
        let vb = b
            .values
            .get(key)
            .ok_or_else(|| format!("{key:?} missing"))?;
        worst = worst.max(va.local(vb).map_err(|e| e.to_string())?.amax());
    }
    Ok(worst)
}

fn c10_marginalization() -> Outcome {
    let delta = independence_delta()?;
    let frames = gen_dynamic_scene(&DynamicSceneConfig::single(0));
    let mut p = Pipeline::new(PipelineConfig::default());
    let (mut checked, mut bad, mut max_asym) = (0, Vec::new(), 0.0f64);
    for f in &frames {
        p.process(f).map_err(|e| e.to_string())?;
        if let Some(prior) = &p.window().prior {
            let info = &prior.information;
            let scale = info.diagonal().amax().max(1.0);
            max_asym = max_asym.max((info - info.transpose()).amax() / scale);
            if !prior.is_psd(1e-9 * scale) {
                bad.push(f.frame);
            }
            checked += 1;
        }
    }
    check(
        delta < 1e-8 && checked > 0 && bad.is_empty() && max_asym < 1e-9,
        format!("independent-frame state delta {delta:.2e}; prior PSD on {checked}/{} frames (failures {bad:?}), relative asymmetry {max_asym:.1e}", frames.len()),
    )
}

fn quadtrack(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_quadtrack"))
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "quadtrack {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn cli_outputs(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let p = |n: &str| dir.join(n).to_string_lossy().into_owned();
    let small = [
        "--set",
        "arc.n_seeds=1",
        "--set",
        "arc.trials_per_seed=3",
        "--set",
        "noise.bbox_pct=2",
    ];
    quadtrack(
        &[
            &[
                "simulate",
                "--scenario",
                "static-arc",
                "--seed",
                "4",
                "--out",
                &p("arc.jsonl"),
            ][..],
            &small[..],
        ]
        .concat(),
    )?;
    quadtrack(&[
        "simulate",
        "--scenario",
        "dynamic",
        "--seed",
        "2",
        "--set",
        "simulate.scene=crossing",
        "--set",
        "simulate.frames=25",
        "--out",
        &p("dyn.jsonl"),
    ])?;
    quadtrack(&[
        "run",
        "--in",
        &p("dyn.jsonl"),
        "--camera-mode",
        "given",
        "--out",
        &p("dyn_est.jsonl"),
    ])?;
    quadtrack(&[
        "run",
        "--in",
        &p("arc.jsonl"),
        "--camera-mode",
        "given",
        "--out",
        &p("arc_est.jsonl"),
    ])?;
    quadtrack(&[
        "eval",
        "--est",
        &p("dyn_est.jsonl"),
        "--gt",
        &p("dyn.jsonl"),
        "--set",
        "eval.mc_samples=20000",
        "--out",
        &p("dyn_metrics.json"),
    ])?;
    quadtrack(&[
        "eval",
        "--est",
        &p("arc_est.jsonl"),
        "--gt",
        &p("arc.jsonl"),
        "--set",
        "eval.mc_samples=20000",
        "--out",
        &p("arc_metrics.json"),
    ])?;
    quadtrack(&[
        "sweep",
        "--axis",
        "bbox",
        "--levels",
        "0,2,4",
        "--trials",
        "5",
        "--seeds",
        "0,1",
        "--out",
        &p("sweep.csv"),
    ])?;
    quadtrack(&["plot", "--in", &p("sweep.csv"), "--out", &p("sweep.svg")])?;
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        out.insert(name, std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

fn c11_determinism() -> Outcome {
    let root: PathBuf =
        std::env::temp_dir().join(format!("quadtrack-acceptance-{}", std::process::id()));
    let a = cli_outputs(&root.join("a"))?;
    let b = cli_outputs(&root.join("b"))?;
    let _ = std::fs::remove_dir_all(&root);
    let differing: Vec<&String> = a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let empty: Vec<&String> = a
        .iter()
        .filter(|(_, v)| v.is_empty())
        .map(|(k, _)| k)
        .collect();
    check(
        a.len() == 8 && differing.is_empty() && empty.is_empty(),
        format!(
            "{} output files compared, differing {differing:?}, empty {empty:?}",
            a.len()
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters come from the default harness protocol.
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let t0 = Instant::now();
    let sweeps = sweeps();
    let criteria: Vec<Criterion> = vec![
        (1, "zero-noise SVD exactness", Box::new(c1_svd_exact)),
        (2, "zero-noise OQI", Box::new(c2_oqi_zero_noise)),
        (
            3,
            "noise-robustness ordering",
            Box::new(|| c3_ordering(&sweeps)),
        ),
        (
            4,
            "error-magnitude envelope",
            Box::new(|| c4_envelope(&sweeps)),
        ),
        (5, "monotone degradation", Box::new(|| c5_monotone(&sweeps))),
        (6, "dynamic tracking", Box::new(c6_dynamic_tracking)),
        (7, "multi-object tracking", Box::new(c7_mot)),
        (8, "localization", Box::new(c8_localization)),
        (9, "oracle equivalences", Box::new(c9_oracles)),
        (10, "marginalization", Box::new(c10_marginalization)),
        (11, "CLI determinism", Box::new(c11_determinism)),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        match f() {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1} s",
        11 - failed,
        t0.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
