//! Multi-object data association and motion classification.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector2, Vector3};

use crate::init::InitPrior;
use crate::quadric::{bbox_iou, BBox, QuadricParams};
use crate::se3::{skew, Intrinsics, Pose, Twist};

type Vec7 = SVector<f64, 7>;
type Mat7 = SMatrix<f64, 7, 7>;

/// Constant-velocity box state `[cx, cy, area, aspect, v_cx, v_cy, v_area]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfBoxState {
    pub state: Vec7,
    pub covariance: Mat7,
}

const MIN_AREA: f64 = 1.0;

fn measurement(b: &BBox) -> SVector<f64, 4> {
    let w = b.width().max(1e-6);
    let h = b.height().max(1e-6);
    let c = b.center();
    SVector::<f64, 4>::new(c.x, c.y, w * h, w / h)
}

fn measurement_matrix() -> SMatrix<f64, 4, 7> {
    SMatrix::<f64, 4, 7>::from_fn(|r, c| if r == c { 1.0 } else { 0.0 })
}

impl KfBoxState {
    pub fn from_bbox(b: &BBox) -> Self {
        let z = measurement(b);
        let mut state = Vec7::zeros();
        state.fixed_rows_mut::<4>(0).copy_from(&z);
        let diag = Vec7::from([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4]);
        Self {
            state,
            covariance: Mat7::from_diagonal(&diag),
        }
    }

    pub fn cx(&self) -> f64 {
        self.state[0]
    }
    pub fn cy(&self) -> f64 {
        self.state[1]
    }
    pub fn area(&self) -> f64 {
        self.state[2]
    }
    pub fn aspect(&self) -> f64 {
        self.state[3]
    }
    pub fn velocity(&self) -> Vector3<f64> {
        Vector3::new(self.state[4], self.state[5], self.state[6])
    }

    pub fn bbox(&self) -> BBox {
        let area = self.area().max(MIN_AREA);
        let aspect = self.aspect().max(1e-6);
        let w = (area * aspect).sqrt();
        let h = area / w;
        BBox::new(
            self.cx() - w / 2.0,
            self.cy() - h / 2.0,
            self.cx() + w / 2.0,
            self.cy() + h / 2.0,
        )
    }
}

fn process_noise() -> Mat7 {
    Mat7::from_diagonal(&Vec7::from([1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4]))
}

fn measurement_noise() -> SMatrix<f64, 4, 4> {
    SMatrix::<f64, 4, 4>::from_diagonal(&SVector::<f64, 4>::new(1.0, 1.0, 10.0, 0.01))
}

/// Propagates one frame and returns the predicted box.
pub fn kf_predict(s: &KfBoxState) -> (KfBoxState, BBox) {
    let mut f = Mat7::identity();
    f[(0, 4)] = 1.0;
    f[(1, 5)] = 1.0;
    f[(2, 6)] = 1.0;
    let mut x = s.state;
    if x[2] + x[6] <= 0.0 {
        x[6] = 0.0;
    }
    let mut x = f * x;
    x[2] = x[2].max(MIN_AREA);
    let p = f * s.covariance * f.transpose() + process_noise();
    let next = KfBoxState {
        state: x,
        covariance: (p + p.transpose()) * 0.5,
    };
    (next, next.bbox())
}

/// Kalman correction with a box measurement (Joseph form).
pub fn kf_update(s: &KfBoxState, obs: &BBox) -> KfBoxState {
    let h = measurement_matrix();
    let z = measurement(obs);
    let y = z - h * s.state;
    let sm = h * s.covariance * h.transpose() + measurement_noise();
    let Some(s_inv) = sm.try_inverse() else {
        return *s;
    };
    let gain = s.covariance * h.transpose() * s_inv;
    let mut x = s.state + gain * y;
    x[2] = x[2].max(MIN_AREA);
    let ikh = Mat7::identity() - gain * h;
    let p = ikh * s.covariance * ikh.transpose() + gain * measurement_noise() * gain.transpose();
    KfBoxState {
        state: x,
        covariance: (p + p.transpose()) * 0.5,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignmentCostConfig {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    /// Matched pairs costing more than this are dropped.
    pub gate: f64,
}

impl Default for AssignmentCostConfig {
    fn default() -> Self {
        Self {
            theta1: 2.0,
            theta2: 1.0,
            theta3: 1.0,
            gate: 3.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionDetectorConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub scene_flow_thresh: f64,
    pub dynamic_ratio: f64,
    pub min_translation: f64,
    pub fvb_tolerance_px: f64,
    pub ema_alpha: f64,
    pub belief_low: f64,
    pub belief_high: f64,
    /// Frames used for the mean-translation vote.
    pub translation_window: usize,
}

impl Default for MotionDetectorConfig {
    fn default() -> Self {
        Self {
            d_min: 0.2,
            d_max: f64::INFINITY,
            scene_flow_thresh: 0.15,
            dynamic_ratio: 0.3,
            min_translation: 0.02,
            fvb_tolerance_px: 2.0,
            ema_alpha: 0.3,
            belief_low: 0.4,
            belief_high: 0.6,
            translation_window: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MotionLabel {
    Static,
    Dynamic,
    Unknown,
}

impl MotionLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            MotionLabel::Static => "static",
            MotionLabel::Dynamic => "dynamic",
            MotionLabel::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "static" => Some(MotionLabel::Static),
            "dynamic" => Some(MotionLabel::Dynamic),
            "unknown" => Some(MotionLabel::Unknown),
            _ => None,
        }
    }
}

/// Per-point motion evidence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointLabel {
    Static,
    Dynamic,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrack {
    pub id: u64,
    pub kf: KfBoxState,
    pub quadric: Option<QuadricParams>,
    pub pose_history: Vec<(u64, Pose)>,
    /// Per-frame twist of the world-frame motion `H`.
    pub velocity: Twist,
    /// Object-frame landmarks by feature id.
    pub landmarks: BTreeMap<u64, Vector3<f64>>,
    pub motion_label: MotionLabel,
    pub dynamic_belief: f64,
    pub frames_since_assoc: usize,
    pub last_bbox: BBox,
    /// Feature ids observed inside the last associated detection.
    pub features: BTreeSet<u64>,
    pub class: String,
    pub prior: Option<InitPrior>,
    /// Frames with an associated detection.
    pub hits: usize,
}

impl ObjectTrack {
    pub fn new(id: u64, bbox: BBox, class: &str) -> Self {
        Self {
            id,
            kf: KfBoxState::from_bbox(&bbox),
            quadric: None,
            pose_history: Vec::new(),
            velocity: Twist::zero(),
            landmarks: BTreeMap::new(),
            motion_label: MotionLabel::Unknown,
            dynamic_belief: 0.5,
            frames_since_assoc: 0,
            last_bbox: bbox,
            features: BTreeSet::new(),
            class: class.to_string(),
            prior: None,
            hits: 1,
        }
    }

    pub fn last_pose(&self) -> Option<&Pose> {
        self.pose_history.last().map(|(_, p)| p)
    }
}

/// `1 − |tracked ∩ current| / max(1, |current|)`.
pub fn semantic_inlier_distance(tracked: &BTreeSet<u64>, current: &BTreeSet<u64>) -> f64 {
    let common = tracked.intersection(current).count();
    1.0 - common as f64 / current.len().max(1) as f64
}

/// What association needs to know about a detection.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionCue {
    pub bbox: BBox,
    pub features: BTreeSet<u64>,
}

/// What association needs to know about a track in the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackCue {
    /// KF prediction.
    pub predicted: BBox,
    /// Quadric projection once initialized, else the last observed box.
    pub reference: BBox,
    pub features: BTreeSet<u64>,
}

/// Hybrid cost `θ₁ a_sem + θ₂ a_iou + θ₃ a_pred`, detections as rows.
pub fn build_cost_matrix(
    dets: &[DetectionCue],
    tracks: &[TrackCue],
    cfg: &AssignmentCostConfig,
) -> DMatrix<f64> {
    DMatrix::from_fn(dets.len(), tracks.len(), |i, j| {
        let d = &dets[i];
        let t = &tracks[j];
        let sem = semantic_inlier_distance(&t.features, &d.features);
        let iou = 1.0 - bbox_iou(&d.bbox, &t.reference);
        let pred = 1.0 - bbox_iou(&d.bbox, &t.predicted);
        cfg.theta1 * sem + cfg.theta2 * iou + cfg.theta3 * pred
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    /// (row, column) pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

/// Minimum-cost assignment for `rows ≤ cols`; returns the column of each row.
fn hungarian_rows(a: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = a.shape();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a[(i0 - 1, j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut cols = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    cols
}

/// Optimal matching of rows to columns; pairs costing more than `gate` are
/// reported unmatched.
pub fn hungarian_assign(cost: &DMatrix<f64>, gate: f64) -> Assignment {
    let (n, m) = cost.shape();
    let mut pairs = Vec::new();
    if n > 0 && m > 0 {
        if n <= m {
            for (i, j) in hungarian_rows(cost).into_iter().enumerate() {
                pairs.push((i, j));
            }
        } else {
            for (j, i) in hungarian_rows(&cost.transpose()).into_iter().enumerate() {
                pairs.push((i, j));
            }
        }
    }
    pairs.retain(|&(i, j)| cost[(i, j)] <= gate);
    pairs.sort_unstable();
    let rows: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
    let cols: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
    Assignment {
        unmatched_rows: (0..n).filter(|i| !rows.contains(i)).collect(),
        unmatched_cols: (0..m).filter(|j| !cols.contains(j)).collect(),
        pairs,
    }
}

/// Splits world points into those inside the inflated ellipsoid (foreground)
/// and the rest, returned as index lists.
pub fn gate_features_by_quadric(
    q: &QuadricParams,
    t_wo: &Pose,
    pts_world: &[Vector3<f64>],
    margin: f64,
) -> (Vec<usize>, Vec<usize>) {
    let world = q.transformed(t_wo);
    (0..pts_world.len()).partition(|&i| world.normalized_radius(&pts_world[i]) <= 1.0 + margin)
}

/// Flow-vector-bound test. `rel_rot`, `rel_t` map previous-camera coordinates
/// into current-camera coordinates.
pub fn fvb_check(
    u_prev: &Vector2<f64>,
    u_curr: &Vector2<f64>,
    k: &Intrinsics,
    rel_rot: &Matrix3<f64>,
    rel_t: &Vector3<f64>,
    cfg: &MotionDetectorConfig,
) -> PointLabel {
    if rel_t.norm() < cfg.min_translation {
        return PointLabel::Inconclusive;
    }
    let km = k.matrix();
    let base = km * rel_rot * k.inverse_matrix() * Vector3::new(u_prev.x, u_prev.y, 1.0);
    let dir = km * rel_t;
    // h(s) = base + s·dir, s = inverse depth of the point in the previous frame
    let s_lo = if cfg.d_max.is_finite() {
        1.0 / cfg.d_max
    } else {
        0.0
    };
    let s_hi = 1.0 / cfg.d_min;
    let eps = 1e-9;
    // restrict to h_z > 0
    let (mut lo, mut hi) = (s_lo, s_hi);
    let mut open_lo = false;
    let mut open_hi = false;
    if dir.z.abs() < 1e-15 {
        if base.z <= eps {
            return PointLabel::Dynamic;
        }
    } else {
        let root = -base.z / dir.z;
        if dir.z > 0.0 {
            if root > lo {
                lo = root;
                open_lo = true;
            }
        } else if root < hi {
            hi = root;
            open_hi = true;
        }
        if lo >= hi {
            return PointLabel::Dynamic;
        }
    }
    let pi = |s: f64| {
        let h = base + dir * s;
        Vector2::new(h.x / h.z, h.y / h.z)
    };
    let dist = match (open_lo, open_hi) {
        (false, false) => point_segment_distance(u_curr, &pi(lo), &pi(hi)),
        (true, _) => {
            let h = base + dir * lo;
            point_ray_distance(u_curr, &pi(hi), &Vector2::new(h.x, h.y))
        }
        (false, true) => {
            let h = base + dir * hi;
            point_ray_distance(u_curr, &pi(lo), &Vector2::new(h.x, h.y))
        }
    };
    if dist > cfg.fvb_tolerance_px {
        PointLabel::Dynamic
    } else {
        PointLabel::Static
    }
}

fn point_segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-24 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

fn point_ray_distance(p: &Vector2<f64>, origin: &Vector2<f64>, dir: &Vector2<f64>) -> f64 {
    let n = dir.norm();
    if n < 1e-15 {
        return (p - origin).norm();
    }
    let d = dir / n;
    let t = (p - origin).dot(&d).max(0.0);
    (p - (origin + d * t)).norm()
}

/// Scene-flow test on a point seen with depth in two frames, after applying
/// the compensating transform to the earlier position.
pub fn scene_flow_label(
    p_prev_w: &Vector3<f64>,
    p_curr_w: &Vector3<f64>,
    compensation: &Pose,
    cfg: &MotionDetectorConfig,
) -> PointLabel {
    let flow = p_curr_w - compensation.transform_point(p_prev_w);
    if flow.norm() > cfg.scene_flow_thresh {
        PointLabel::Dynamic
    } else {
        PointLabel::Static
    }
}

/// Mean per-frame translation of the last `window` pose steps.
pub fn mean_recent_translation(history: &[(u64, Pose)], window: usize) -> Option<f64> {
    if history.len() < 2 {
        return None;
    }
    let start = history.len().saturating_sub(window + 1);
    let recent = &history[start..];
    let steps: Vec<f64> = recent
        .windows(2)
        .map(|w| {
            let frames = (w[1].0 - w[0].0).max(1) as f64;
            (w[1].1.translation - w[0].1.translation).norm() / frames
        })
        .collect();
    Some(steps.iter().sum::<f64>() / steps.len() as f64)
}

/// Fuses this frame's evidence into the track's belief and label.
pub fn classify_object_motion(
    track: &mut ObjectTrack,
    labels: &[PointLabel],
    cfg: &MotionDetectorConfig,
) -> MotionLabel {
    let labeled: Vec<_> = labels
        .iter()
        .filter(|l| **l != PointLabel::Inconclusive)
        .collect();
    let ratio_vote = if labeled.is_empty() {
        None
    } else {
        let dynamic = labeled
            .iter()
            .filter(|l| ***l == PointLabel::Dynamic)
            .count();
        Some(dynamic as f64 / labeled.len() as f64 > cfg.dynamic_ratio)
    };
    let translation_vote = mean_recent_translation(&track.pose_history, cfg.translation_window)
        .map(|m| m > cfg.scene_flow_thresh);
    let vote = match (ratio_vote, translation_vote) {
        (None, None) => return track.motion_label,
        (a, b) => a.unwrap_or(false) || b.unwrap_or(false),
    };
    let target = if vote { 1.0 } else { 0.0 };
    track.dynamic_belief =
        ((1.0 - cfg.ema_alpha) * track.dynamic_belief + cfg.ema_alpha * target).clamp(0.0, 1.0);
    if track.dynamic_belief > cfg.belief_high {
        track.motion_label = MotionLabel::Dynamic;
    } else if track.dynamic_belief < cfg.belief_low {
        track.motion_label = MotionLabel::Static;
    }
    track.motion_label
}

/// Number of frames without association after which a track is dropped.
pub const MAX_TRACK_AGE: usize = 15;

/// New detection to spawn a track from.
#[derive(Debug, Clone, PartialEq)]
pub struct Spawn {
    pub bbox: BBox,
    pub class: String,
    pub features: BTreeSet<u64>,
}

/// Applies one frame of associations: `matched` lists (track index, detection
/// box, feature ids). Returns the ids of removed tracks.
pub fn track_lifecycle_step(
    tracks: &mut Vec<ObjectTrack>,
    matched: &[(usize, BBox, BTreeSet<u64>)],
    spawns: &[Spawn],
    next_id: &mut u64,
) -> Vec<u64> {
    let hit: BTreeSet<usize> = matched.iter().map(|m| m.0).collect();
    for (idx, bbox, feats) in matched {
        let t = &mut tracks[*idx];
        t.kf = kf_update(&t.kf, bbox);
        t.last_bbox = *bbox;
        t.features = feats.clone();
        t.frames_since_assoc = 0;
        t.hits += 1;
    }
    for (i, t) in tracks.iter_mut().enumerate() {
        if !hit.contains(&i) {
            t.frames_since_assoc += 1;
        }
    }
    let removed: Vec<u64> = tracks
        .iter()
        .filter(|t| t.frames_since_assoc >= MAX_TRACK_AGE)
        .map(|t| t.id)
        .collect();
    tracks.retain(|t| t.frames_since_assoc < MAX_TRACK_AGE);
    for s in spawns {
        let mut t = ObjectTrack::new(*next_id, s.bbox, &s.class);
        t.features = s.features.clone();
        tracks.push(t);
        *next_id += 1;
    }
    removed
}

/// True when tracking a feature forward then backward returns within `tol` px.
pub fn bidirectional_consistent(u_start: &Vector2<f64>, u_back: &Vector2<f64>, tol: f64) -> bool {
    (u_start - u_back).norm() <= tol
}

/// Indices of features passing the forward-backward check.
pub fn bidirectional_flow_filter(
    starts: &[Vector2<f64>],
    backs: &[Vector2<f64>],
    tol: f64,
) -> Vec<usize> {
    starts
        .iter()
        .zip(backs)
        .enumerate()
        .filter(|(_, (a, b))| bidirectional_consistent(a, b, tol))
        .map(|(i, _)| i)
        .collect()
}

/// Sampson distance in pixels of a correspondence under the relative motion
/// mapping previous-camera to current-camera coordinates.
pub fn sampson_distance(
    u_prev: &Vector2<f64>,
    u_curr: &Vector2<f64>,
    k: &Intrinsics,
    rel_rot: &Matrix3<f64>,
    rel_t: &Vector3<f64>,
) -> f64 {
    let kinv = k.inverse_matrix();
    let f = kinv.transpose() * skew(rel_t) * rel_rot * kinv;
    let x1 = Vector3::new(u_prev.x, u_prev.y, 1.0);
    let x2 = Vector3::new(u_curr.x, u_curr.y, 1.0);
    let fx1 = f * x1;
    let ftx2 = f.transpose() * x2;
    let num = x2.dot(&fx1);
    let den = fx1.x * fx1.x + fx1.y * fx1.y + ftx2.x * ftx2.x + ftx2.y * ftx2.y;
    if den < 1e-30 {
        return 0.0;
    }
    num.abs() / den.sqrt()
}

/// Sampson threshold for epipolar outlier rejection, px.
pub const SAMPSON_THRESHOLD_PX: f64 = 3.0;

pub fn is_epipolar_outlier(
    u_prev: &Vector2<f64>,
    u_curr: &Vector2<f64>,
    k: &Intrinsics,
    rel_rot: &Matrix3<f64>,
    rel_t: &Vector3<f64>,
) -> bool {
    sampson_distance(u_prev, u_curr, k, rel_rot, rel_t) > SAMPSON_THRESHOLD_PX
}
