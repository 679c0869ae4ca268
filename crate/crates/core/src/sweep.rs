//! Static-arc initialization benchmark: the object-centric initializer and the
//! closed-form SVD baseline evaluated over noise sweeps.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::init::{
    centroid_of, init_sphere, refine_quadric, stereo_initial_radius, BoxObservation, InitPrior,
    RefineConfig, StereoObservation,
};
use crate::metrics::{e_axe, e_trans, iou_2d_metric, success_rate};
use crate::quadric::{svd_closed_form_init, QuadricParams};
use crate::se3::Pose;
use crate::simulator::{gen_static_trial, NoiseConfig, StaticArcConfig, StaticTrial};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Oqi,
    SvdBaseline,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Oqi => "oqi",
            Method::SvdBaseline => "svd_baseline",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "oqi" => Some(Method::Oqi),
            "svd_baseline" | "svd" => Some(Method::SvdBaseline),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseAxis {
    Translation,
    Rotation,
    Bbox,
}

impl NoiseAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseAxis::Translation => "translation",
            NoiseAxis::Rotation => "rotation",
            NoiseAxis::Bbox => "bbox",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "translation" => Some(NoiseAxis::Translation),
            "rotation" => Some(NoiseAxis::Rotation),
            "bbox" => Some(NoiseAxis::Bbox),
            _ => None,
        }
    }

    pub fn noise(&self, level: f64) -> NoiseConfig {
        let mut n = NoiseConfig::default();
        match self {
            NoiseAxis::Translation => n.pose_translation_pct = level,
            NoiseAxis::Rotation => n.rotation_pct = level,
            NoiseAxis::Bbox => n.bbox_pct = level,
        }
        n
    }
}

/// Merges the per-view surface points of a trial into world coordinates using
/// the (possibly noisy) camera poses, averaging repeated ids.
pub fn trial_world_points(trial: &StaticTrial) -> Vec<Vector3<f64>> {
    let mut acc: BTreeMap<u64, (Vector3<f64>, usize)> = BTreeMap::new();
    for (cam, pts) in trial.cameras.iter().zip(&trial.points) {
        for (id, p) in pts {
            let e = acc.entry(*id).or_insert((Vector3::zeros(), 0));
            e.0 += cam.transform_point(p);
            e.1 += 1;
        }
    }
    acc.values().map(|(s, n)| s / *n as f64).collect()
}

/// Sphere at the point centroid with the stereo radius, refined against the
/// trial's boxes.
pub fn estimate_oqi(
    trial: &StaticTrial,
    arc: &StaticArcConfig,
    refine: &RefineConfig,
) -> Result<QuadricParams> {
    let center = centroid_of(&trial_world_points(trial))?;
    let stereo: Vec<StereoObservation> = trial
        .cameras
        .iter()
        .zip(&trial.bboxes)
        .filter_map(|(c, b)| {
            let depth = c.inverse().transform_point(&center).z;
            (depth > 0.0).then_some(StereoObservation {
                depth,
                width: b.width(),
                height: b.height(),
            })
        })
        .collect();
    let radius = stereo_initial_radius(&stereo, &arc.intrinsics)?;
    if !(radius > 0.0) {
        return Err(Error::DegenerateProjection);
    }
    let prior = InitPrior::Radius(radius);
    let obs: Vec<BoxObservation> = trial
        .cameras
        .iter()
        .zip(&trial.bboxes)
        .map(|(c, b)| BoxObservation {
            bbox: *b,
            t_wc: *c,
            t_wo: Pose::identity(),
        })
        .collect();
    Ok(refine_quadric(
        &init_sphere(center, &prior),
        &obs,
        &arc.intrinsics,
        &prior,
        refine,
    )?
    .params)
}

pub fn estimate_svd(trial: &StaticTrial, arc: &StaticArcConfig) -> Result<QuadricParams> {
    let obs: Vec<_> = trial
        .bboxes
        .iter()
        .copied()
        .zip(trial.cameras.iter().copied())
        .collect();
    svd_closed_form_init(&obs, &arc.intrinsics)
}

/// Outcome of one method on one trial; error fields are `None` when
/// initialization failed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub method: Method,
    pub level: f64,
    pub seed: u64,
    pub trial: u64,
    pub estimate: Option<QuadricParams>,
    pub iou_2d: Option<f64>,
    pub e_trans: Option<f64>,
    pub e_axe: Option<f64>,
}

/// Runs `method` on `trial`; IoU₂D is measured in the ground-truth views.
pub fn evaluate_trial(
    method: Method,
    trial: &StaticTrial,
    level: f64,
    arc: &StaticArcConfig,
    refine: &RefineConfig,
) -> TrialOutcome {
    let est = match method {
        Method::Oqi => estimate_oqi(trial, arc, refine),
        Method::SvdBaseline => estimate_svd(trial, arc),
    }
    .ok();
    let iou =
        est.and_then(|q| iou_2d_metric(&trial.gt, &q, &trial.cameras_gt, &arc.intrinsics).ok());
    let ok = iou.is_some();
    TrialOutcome {
        method,
        level,
        seed: trial.tag.seed,
        trial: trial.tag.index,
        estimate: est,
        iou_2d: iou,
        e_trans: est.filter(|_| ok).map(|q| e_trans(&trial.gt, &q)),
        e_axe: est.filter(|_| ok).map(|q| e_axe(&trial.gt, &q)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub axis: NoiseAxis,
    pub levels: Vec<f64>,
    pub seeds: Vec<u64>,
    pub trials_per_seed: usize,
    pub methods: Vec<Method>,
    pub arc: StaticArcConfig,
    pub refine: RefineConfig,
}

impl SweepConfig {
    pub fn new(axis: NoiseAxis, levels: Vec<f64>) -> Self {
        Self {
            axis,
            levels,
            seeds: (0..10).collect(),
            trials_per_seed: 10,
            methods: vec![Method::Oqi, Method::SvdBaseline],
            arc: StaticArcConfig::default(),
            refine: benchmark_refine_config(),
        }
    }
}

/// Refinement settings of the static benchmark: the size-prior weight follows
/// the observed box-residual variance, with a 0.5 m prior axis deviation.
pub fn benchmark_refine_config() -> RefineConfig {
    RefineConfig {
        prior_axis_sigma_m: Some(0.5),
        ..RefineConfig::default()
    }
}

/// Aggregate over the trials of one (method, level) cell. Means and standard
/// deviations cover successful initializations only.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub method: Method,
    pub level: f64,
    pub trials: usize,
    pub failures: usize,
    pub success_rate: f64,
    pub e_trans_mean: f64,
    pub e_trans_std: f64,
    pub e_axe_mean: f64,
    pub e_axe_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
}

pub const SWEEP_COLUMNS: [&str; 11] = [
    "method",
    "level",
    "trials",
    "failures",
    "success_rate",
    "e_trans_mean",
    "e_trans_std",
    "e_axe_mean",
    "e_axe_std",
    "iou_mean",
    "iou_std",
];

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (
        m,
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt(),
    )
}

pub fn aggregate(method: Method, level: f64, outcomes: &[TrialOutcome]) -> SweepRow {
    let ious: Vec<Option<f64>> = outcomes.iter().map(|o| o.iou_2d).collect();
    let et: Vec<f64> = outcomes.iter().filter_map(|o| o.e_trans).collect();
    let ea: Vec<f64> = outcomes.iter().filter_map(|o| o.e_axe).collect();
    let iv: Vec<f64> = ious.iter().flatten().copied().collect();
    let (e_trans_mean, e_trans_std) = mean_std(&et);
    let (e_axe_mean, e_axe_std) = mean_std(&ea);
    let (iou_mean, iou_std) = mean_std(&iv);
    SweepRow {
        method,
        level,
        trials: outcomes.len(),
        failures: outcomes.len() - iv.len(),
        success_rate: success_rate(&ious),
        e_trans_mean,
        e_trans_std,
        e_axe_mean,
        e_axe_std,
        iou_mean,
        iou_std,
    }
}

/// All trial outcomes of a sweep, ordered by (method, level, seed, trial).
pub fn run_sweep_outcomes(cfg: &SweepConfig) -> Vec<TrialOutcome> {
    let cells: Vec<(usize, f64, u64, u64)> = cfg
        .methods
        .iter()
        .enumerate()
        .flat_map(|(mi, _)| {
            cfg.levels.iter().flat_map(move |&l| {
                cfg.seeds
                    .iter()
                    .flat_map(move |&s| (0..cfg.trials_per_seed as u64).map(move |t| (mi, l, s, t)))
            })
        })
        .collect();
    cells
        .par_iter()
        .map(|&(mi, level, seed, index)| {
            let trial = gen_static_trial(&cfg.arc, &cfg.axis.noise(level), seed, index);
            evaluate_trial(cfg.methods[mi], &trial, level, &cfg.arc, &cfg.refine)
        })
        .collect()
}

/// One row per (method, level), in configuration order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    if cfg.levels.is_empty()
        || cfg.seeds.is_empty()
        || cfg.methods.is_empty()
        || cfg.trials_per_seed == 0
    {
        return Err(Error::Config(
            "sweep needs at least one level, seed, method and trial".into(),
        ));
    }
    if cfg.levels.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Config("noise levels must be non-negative".into()));
    }
    let outcomes = run_sweep_outcomes(cfg);
    let per_cell = cfg.seeds.len() * cfg.trials_per_seed;
    Ok(outcomes
        .chunks(per_cell)
        .map(|c| aggregate(c[0].method, c[0].level, c))
        .collect())
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        let f = crate::io::fmt_f64;
        w.write_record([
            r.method.as_str().to_string(),
            f(r.level),
            r.trials.to_string(),
            r.failures.to_string(),
            f(r.success_rate),
            f(r.e_trans_mean),
            f(r.e_trans_std),
            f(r.e_axe_mean),
            f(r.e_axe_std),
            f(r.iou_mean),
            f(r.iou_std),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(SWEEP_COLUMNS) {
        return Err(Error::MalformedLine {
            line: 1,
            reason: "unexpected sweep header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let bad = |what: &str| Error::MalformedLine {
            line,
            reason: format!("bad {what}"),
        };
        let num = |j: usize| rec[j].parse::<f64>().map_err(|_| bad(SWEEP_COLUMNS[j]));
        let int = |j: usize| rec[j].parse::<usize>().map_err(|_| bad(SWEEP_COLUMNS[j]));
        rows.push(SweepRow {
            method: Method::parse(&rec[0]).ok_or_else(|| bad("method"))?,
            level: num(1)?,
            trials: int(2)?,
            failures: int(3)?,
            success_rate: num(4)?,
            e_trans_mean: num(5)?,
            e_trans_std: num(6)?,
            e_axe_mean: num(7)?,
            e_axe_std: num(8)?,
            iou_mean: num(9)?,
            iou_std: num(10)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(axis: NoiseAxis, levels: Vec<f64>) -> SweepConfig {
        let mut c = SweepConfig::new(axis, levels);
        c.seeds = vec![0, 1];
        c.trials_per_seed = 3;
        c
    }

    #[test]
    fn zero_noise_row_succeeds_for_both_methods() {
        let rows = run_sweep(&small(NoiseAxis::Bbox, vec![0.0])).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.success_rate, 1.0, "{r:?}");
            assert_eq!(r.failures, 0);
        }
    }

    #[test]
    fn row_bookkeeping_and_order() {
        let cfg = small(
            NoiseAxis::Translation,
            vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
        );
        let rows = run_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows[..6].iter().all(|r| r.method == Method::Oqi));
        assert!(rows.iter().all(|r| r.trials == 6));
        assert_eq!(rows[7].level, 10.0);
    }

    #[test]
    fn csv_round_trip_is_stable() {
        let rows = run_sweep(&small(NoiseAxis::Bbox, vec![0.0, 3.0])).unwrap();
        let mut a = Vec::new();
        write_sweep_csv(&rows, &mut a).unwrap();
        let back = read_sweep_csv(a.as_slice()).unwrap();
        let mut b = Vec::new();
        write_sweep_csv(&back, &mut b).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_sweep_csv(
            &run_sweep(&small(NoiseAxis::Bbox, vec![0.0, 3.0])).unwrap(),
            &mut c,
        )
        .unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(run_sweep(&small(NoiseAxis::Bbox, vec![])).is_err());
        assert!(run_sweep(&small(NoiseAxis::Bbox, vec![-10.0])).is_err());
        assert!(read_sweep_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
