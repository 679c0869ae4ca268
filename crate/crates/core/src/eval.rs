//! Scores an estimate file against the dataset it was computed from.
//!
//! Sequence datasets yield trajectory, tracking and object metrics.
//! Datasets split into static-arc trials are scored per trial from the last
//! estimate of each trial. The result is a flat, key-sorted map.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use crate::config::Config;
use crate::dataset::{EstimateRecord, FrameObservation, TrialTag};
use crate::error::{Error, Result};
use crate::factors::world_motion;
use crate::io::round9;
use crate::metrics::{
    ate_rmse, e_axe, e_trans, iou_2d_metric, monte_carlo_3d_iou, pair_quadrics, success_rate,
    MotAccumulator, PAIRING_GATE_M,
};
use crate::quadric::{project_bbox, BBox, QuadricParams};
use crate::se3::{se3_log, Pose};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub image_width: f64,
    pub image_height: f64,
    pub mc_samples: usize,
    pub mc_seed: u64,
}

impl EvalConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        Ok(Self {
            image_width: c.f64("camera.width")?,
            image_height: c.f64("camera.height")?,
            mc_samples: c.usize("eval.mc_samples")?,
            mc_seed: c.u64("eval.mc_seed")?,
        })
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self::from_config(&Config::default()).expect("default config is valid")
    }
}

/// Metric name to value. `None` marks a metric with nothing to average.
pub type Metrics = BTreeMap<String, Option<f64>>;

/// Renders metrics as one JSON object with sorted keys and 9-digit floats.
pub fn metrics_to_json(m: &Metrics) -> String {
    let obj: Map<String, Value> = m
        .iter()
        .map(|(k, v)| {
            let v = match v.filter(|x| x.is_finite()) {
                Some(x) if x.fract() == 0.0 && x.abs() < 1e15 => Value::from(x as i64),
                Some(x) => serde_json::Number::from_f64(round9(x))
                    .map(Value::Number)
                    .unwrap_or(Value::Null),
                None => Value::Null,
            };
            (k.clone(), v)
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&Value::Object(obj)).expect("metrics serialize");
    s.push('\n');
    s
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn max(v: &[f64]) -> Option<f64> {
    v.iter().copied().reduce(f64::max)
}

pub fn evaluate(
    est: &[EstimateRecord],
    gt: &[FrameObservation],
    cfg: &EvalConfig,
) -> Result<Metrics> {
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let by_frame: BTreeMap<u64, &EstimateRecord> = est.iter().map(|e| (e.frame, e)).collect();
    let joined: Vec<(&FrameObservation, &EstimateRecord)> = gt
        .iter()
        .filter_map(|f| by_frame.get(&f.frame).map(|e| (f, *e)))
        .collect();
    if joined.len() != gt.len() {
        return Err(Error::LengthMismatch(gt.len(), joined.len()));
    }
    if gt.iter().any(|f| f.trial.is_some()) {
        evaluate_trials(&joined, cfg)
    } else {
        evaluate_sequence(&joined, cfg)
    }
}

/// Ground-truth pose of a frame's camera, falling back to the supplied one.
fn gt_camera(f: &FrameObservation) -> Option<Pose> {
    f.camera.gt_pose_wc.or(f.camera.pose_wc)
}

fn track_center(t: &crate::dataset::TrackEstimate) -> QuadricParams {
    t.world_quadric()
        .unwrap_or_else(|| QuadricParams::sphere(1.0, t.pose_wo.translation))
}

fn evaluate_sequence(
    joined: &[(&FrameObservation, &EstimateRecord)],
    cfg: &EvalConfig,
) -> Result<Metrics> {
    let mut m = Metrics::new();
    m.insert("frames".into(), Some(joined.len() as f64));

    let cams: Option<Vec<Pose>> = joined.iter().map(|(f, _)| f.camera.gt_pose_wc).collect();
    let ate = match cams {
        Some(c) => {
            let g: Vec<_> = c.iter().map(|p| p.translation).collect();
            let e: Vec<_> = joined
                .iter()
                .map(|(_, e)| e.camera_pose.translation)
                .collect();
            Some(ate_rmse(&g, &e)?)
        }
        None => None,
    };
    m.insert("ate_rmse".into(), ate);

    let mut acc = MotAccumulator::new();
    let mut trans_err = Vec::new();
    let mut h_err = Vec::new();
    let mut prev: BTreeMap<(u64, u64), (Pose, Pose)> = BTreeMap::new();
    for (f, e) in joined {
        let gt_boxes: Vec<(u64, BBox)> = match gt_camera(f) {
            Some(cam) => f
                .gt_objects
                .iter()
                .filter(|g| f.detections.iter().any(|d| d.instance_gt == Some(g.id)))
                .filter_map(|g| {
                    let b =
                        project_bbox(&g.quadric(), &Pose::identity(), &cam, &f.camera.intrinsics)
                            .ok()?;
                    Some((g.id, b.clip(cfg.image_width, cfg.image_height)))
                })
                .collect(),
            None => Vec::new(),
        };
        let hyp: Vec<(u64, BBox)> = e
            .tracks
            .iter()
            .filter_map(|t| Some((t.id, t.bbox?)))
            .collect();
        acc.update(&gt_boxes, &hyp);

        let gq: Vec<QuadricParams> = f.gt_objects.iter().map(|g| g.quadric()).collect();
        let eq: Vec<QuadricParams> = e.tracks.iter().map(track_center).collect();
        let mut cur = BTreeMap::new();
        for (gi, ei) in pair_quadrics(&gq, &eq, PAIRING_GATE_M) {
            let (g, t) = (&f.gt_objects[gi], &e.tracks[ei]);
            trans_err.push(e_trans(&gq[gi], &eq[ei]));
            if let Some((pe, pg)) = prev.get(&(g.id, t.id)) {
                let he = world_motion(pe, &t.pose_wo);
                let hg = world_motion(pg, &g.pose_wo);
                h_err.push(se3_log(&he.compose(&hg.inverse()))?.norm());
            }
            cur.insert((g.id, t.id), (t.pose_wo, g.pose_wo));
        }
        prev = cur;
    }
    let has_gt = acc.gt_count > 0;
    m.insert(
        "mot.mota".into(),
        if has_gt { Some(acc.mota()?) } else { None },
    );
    m.insert("mot.motp".into(), acc.motp().ok());
    m.insert("mot.misses".into(), Some(acc.misses as f64));
    m.insert(
        "mot.false_positives".into(),
        Some(acc.false_positives as f64),
    );
    m.insert("mot.id_switches".into(), Some(acc.mismatches as f64));
    m.insert("mot.gt_count".into(), Some(acc.gt_count as f64));
    m.insert("object.translation_error_mean".into(), mean(&trans_err));
    m.insert("object.translation_error_max".into(), max(&trans_err));
    m.insert("object.motion_error_mean".into(), mean(&h_err));
    m.insert("object.motion_error_max".into(), max(&h_err));

    // Final-frame volume overlap of initialized quadrics.
    let (f, e) = joined.last().expect("non-empty");
    let gq: Vec<QuadricParams> = f.gt_objects.iter().map(|g| g.quadric()).collect();
    let eq: Vec<QuadricParams> = e.tracks.iter().filter_map(|t| t.world_quadric()).collect();
    let ious: Vec<f64> = pair_quadrics(&gq, &eq, PAIRING_GATE_M)
        .into_iter()
        .map(|(gi, ei)| monte_carlo_3d_iou(&gq[gi], &eq[ei], cfg.mc_samples, cfg.mc_seed).iou)
        .collect();
    m.insert("object.iou_3d_mean".into(), mean(&ious));
    Ok(m)
}

fn evaluate_trials(
    joined: &[(&FrameObservation, &EstimateRecord)],
    cfg: &EvalConfig,
) -> Result<Metrics> {
    let mut trials: BTreeMap<TrialTag, Vec<(&FrameObservation, &EstimateRecord)>> = BTreeMap::new();
    for &(f, e) in joined {
        let tag = f
            .trial
            .ok_or_else(|| Error::MissingInput(format!("frame {} has no trial tag", f.frame)))?;
        trials.entry(tag).or_default().push((f, e));
    }
    let (mut ious, mut et, mut ea, mut v3) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for frames in trials.values() {
        let (last_f, last_e) = frames.last().expect("non-empty trial");
        let views: Vec<Pose> = frames.iter().filter_map(|(f, _)| gt_camera(f)).collect();
        let k = last_f.camera.intrinsics;
        let gq: Vec<QuadricParams> = last_f.gt_objects.iter().map(|g| g.quadric()).collect();
        let eq: Vec<QuadricParams> = last_e
            .tracks
            .iter()
            .filter_map(|t| t.world_quadric())
            .collect();
        let pairs = pair_quadrics(&gq, &eq, PAIRING_GATE_M);
        for (gi, g) in gq.iter().enumerate() {
            let Some(&(_, ei)) = pairs.iter().find(|p| p.0 == gi) else {
                ious.push(None);
                continue;
            };
            let iou = iou_2d_metric(g, &eq[ei], &views, &k).ok();
            ious.push(iou);
            if iou.is_some_and(|x| x > 0.5) {
                et.push(e_trans(g, &eq[ei]));
                ea.push(e_axe(g, &eq[ei]));
                v3.push(monte_carlo_3d_iou(g, &eq[ei], cfg.mc_samples, cfg.mc_seed).iou);
            }
        }
    }
    let iv: Vec<f64> = ious.iter().flatten().copied().collect();
    let mut m = Metrics::new();
    m.insert("trials".into(), Some(trials.len() as f64));
    m.insert("static.objects".into(), Some(ious.len() as f64));
    m.insert("static.success_rate".into(), Some(success_rate(&ious)));
    m.insert("static.iou_2d_mean".into(), mean(&iv));
    m.insert("static.e_trans_mean".into(), mean(&et));
    m.insert("static.e_axe_mean".into(), mean(&ea));
    m.insert("static.iou_3d_mean".into(), mean(&v3));
    Ok(m)
}
