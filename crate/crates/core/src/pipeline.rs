//! Frame-by-frame back-end: association, object and landmark initialization,
//! factor construction and sliding-window optimization.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DVector, Vector2, Vector3};

use crate::association::{
    build_cost_matrix, classify_object_motion, hungarian_assign, kf_predict, scene_flow_label,
    track_lifecycle_step, AssignmentCostConfig, DetectionCue, MotionDetectorConfig, MotionLabel,
    ObjectTrack, Spawn, TrackCue,
};
use crate::config::Config;
use crate::dataset::{EstimateRecord, FrameObservation, TrackEstimate, TrialTag};
use crate::error::{Error, Result};
use crate::factors::{world_motion, Factor, FactorKind, RobustConfig, RobustKernel, VarKey};
use crate::init::{
    centroid_of, init_sphere, refine_quadric, stereo_initial_radius, BoxObservation, InitPrior,
    RefineConfig, StereoObservation,
};
use crate::metrics::align_rigid;
use crate::optimizer::{FrameInsert, LmConfig, StateValue, WindowState};
use crate::quadric::{project_bbox, BBox};
use crate::se3::{back_project, se3_exp, se3_log, Intrinsics, Pose, Twist};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraMode {
    /// Camera poses come from the input and are anchored by a prior.
    Given,
    /// Camera poses are tracked against the landmark map.
    Estimate,
}

impl CameraMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CameraMode::Given => "given",
            CameraMode::Estimate => "estimate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "given" => Some(CameraMode::Given),
            "estimate" => Some(CameraMode::Estimate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub camera_mode: CameraMode,
    /// Image size in pixels; boxes touching the border are treated as truncated.
    pub image_width: f64,
    pub image_height: f64,
    /// Sliding-window length in frames.
    pub window: usize,
    pub lm: LmConfig,
    /// Couple quadrics to poses inside the window. When false, quadrics are
    /// still estimated, but from a separate fit that leaves poses untouched.
    pub use_quadric_factors: bool,
    pub separate_quadric_solve: bool,
    pub planar_prior: bool,
    pub sigma_feature_px: f64,
    /// Depth noise grows as `depth_k · z²`, floored at `depth_floor_m`.
    pub depth_k: f64,
    pub depth_floor_m: f64,
    pub sigma_bbox_px: f64,
    pub sigma_motion: f64,
    pub sigma_static_object: f64,
    pub sigma_planar: f64,
    pub sigma_given_pose: f64,
    pub robust: RobustConfig,
    pub init_min_frames: usize,
    pub init_min_points: usize,
    /// Smallest spread of viewing directions, in degrees, before a quadric
    /// is initialized.
    pub init_min_view_angle_deg: f64,
    pub refine: RefineConfig,
    pub association: AssignmentCostConfig,
    pub motion: MotionDetectorConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_config(&Config::default()).expect("defaults are valid")
    }
}

impl PipelineConfig {
    pub fn from_config(c: &Config) -> Result<Self> {
        let camera_mode = CameraMode::parse(c.str("pipeline.camera_mode")).ok_or_else(|| {
            Error::Config(format!(
                "unknown camera mode `{}`",
                c.str("pipeline.camera_mode")
            ))
        })?;
        let window = c.usize("optimizer.window")?;
        if window < 3 {
            return Err(Error::Config("optimizer.window must be at least 3".into()));
        }
        let axis_sigma = c.f64("init.prior_axis_sigma")?;
        let robust = RobustConfig {
            huber_delta: c.f64("robust.huber_delta")?,
            t_nu: c.f64("robust.t_nu")?,
        };
        let sigma_bbox_px = c.f64("sigma.bbox_px")?;
        Ok(Self {
            camera_mode,
            image_width: c.f64("camera.width")?,
            image_height: c.f64("camera.height")?,
            window,
            lm: LmConfig {
                max_iters: c.usize("optimizer.max_iters")?,
                lambda0: c.f64("optimizer.lambda0")?,
                schur_threshold: c.usize("optimizer.schur_threshold")?,
                ..LmConfig::default()
            },
            use_quadric_factors: c.bool("pipeline.use_quadric_factors")?,
            separate_quadric_solve: c.bool("pipeline.separate_quadric_solve")?,
            planar_prior: c.bool("pipeline.planar_prior")?,
            sigma_feature_px: c.f64("sigma.feature_px")?,
            depth_k: c.f64("sigma.depth_k")?,
            depth_floor_m: c.f64("sigma.depth_floor_m")?,
            sigma_bbox_px,
            sigma_motion: c.f64("sigma.motion")?,
            sigma_static_object: c.f64("sigma.static_object")?,
            sigma_planar: c.f64("sigma.planar")?,
            sigma_given_pose: c.f64("sigma.given_pose")?,
            robust,
            init_min_frames: c.usize("init.min_frames")?,
            init_min_points: c.usize("init.min_points")?,
            init_min_view_angle_deg: c.f64("init.min_view_angle")?,
            refine: RefineConfig {
                prior_size_weight: c.f64("init.prior_size_weight")?,
                huber_delta_px: robust.huber_delta * sigma_bbox_px,
                max_iters: c.usize("init.max_iters")?,
                prior_axis_sigma_m: (axis_sigma > 0.0).then_some(axis_sigma),
                ..RefineConfig::default()
            },
            association: AssignmentCostConfig {
                theta1: c.f64("association.theta1")?,
                theta2: c.f64("association.theta2")?,
                theta3: c.f64("association.theta3")?,
                gate: c.f64("association.gate")?,
            },
            motion: MotionDetectorConfig {
                d_min: c.f64("motion.d_min")?,
                scene_flow_thresh: c.f64("motion.scene_flow_thresh")?,
                dynamic_ratio: c.f64("motion.dynamic_ratio")?,
                min_translation: c.f64("motion.min_translation")?,
                fvb_tolerance_px: c.f64("motion.fvb_tolerance_px")?,
                ema_alpha: c.f64("motion.ema_alpha")?,
                belief_low: c.f64("motion.belief_low")?,
                belief_high: c.f64("motion.belief_high")?,
                translation_window: c.usize("motion.translation_window")?,
                ..MotionDetectorConfig::default()
            },
        })
    }

    fn quadrics_in_window(&self) -> bool {
        self.use_quadric_factors && !self.separate_quadric_solve
    }

    /// True when a box side lies on the image border, so the box does not
    /// bound the whole object.
    pub fn is_truncated(&self, b: &BBox) -> bool {
        const MARGIN_PX: f64 = 1.0;
        b.xmin <= MARGIN_PX
            || b.ymin <= MARGIN_PX
            || b.xmax >= self.image_width - MARGIN_PX
            || b.ymax >= self.image_height - MARGIN_PX
    }
}

/// Box seen for a track, with the frame it was seen in.
#[derive(Debug, Clone, Copy, PartialEq)]
struct BoxSighting {
    frame: u64,
    bbox: BBox,
    k: Intrinsics,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    window: WindowState,
    tracks: Vec<ObjectTrack>,
    next_id: u64,
    /// Background landmarks in the world frame.
    landmarks: BTreeMap<u64, Vector3<f64>>,
    cameras: BTreeMap<u64, Pose>,
    times: BTreeMap<u64, f64>,
    /// World positions of the previous frame's features, from depth.
    prev_world: BTreeMap<u64, Vector3<f64>>,
    sightings: BTreeMap<u64, Vec<BoxSighting>>,
    /// Tracks whose quadric already lives in the window.
    quadric_in_window: BTreeSet<u64>,
    /// Size-prior weight chosen by each track's initial fit.
    prior_weights: BTreeMap<u64, f64>,
    trial: Option<TrialTag>,
}

/// Track state needed to build this frame's factors.
struct TrackFrame {
    id: u64,
    detection: usize,
    pose: Option<Pose>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let window = WindowState::new(cfg.window);
        Self {
            cfg,
            window,
            tracks: Vec::new(),
            next_id: 0,
            landmarks: BTreeMap::new(),
            cameras: BTreeMap::new(),
            times: BTreeMap::new(),
            prev_world: BTreeMap::new(),
            sightings: BTreeMap::new(),
            quadric_in_window: BTreeSet::new(),
            prior_weights: BTreeMap::new(),
            trial: None,
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[ObjectTrack] {
        &self.tracks
    }

    pub fn window(&self) -> &WindowState {
        &self.window
    }

    /// Clears all state, keeping the configuration.
    pub fn reset(&mut self) {
        *self = Self::new(self.cfg.clone());
    }

    /// Runs a whole sequence, restarting whenever the trial tag changes.
    pub fn run(&mut self, frames: &[FrameObservation]) -> Result<Vec<EstimateRecord>> {
        let mut out = Vec::with_capacity(frames.len());
        for f in frames {
            if f.trial != self.trial {
                self.reset();
                self.trial = f.trial;
            }
            out.push(self.process(f)?);
        }
        Ok(out)
    }

    pub fn process(&mut self, obs: &FrameObservation) -> Result<EstimateRecord> {
        let frame = obs.frame;
        if let Some(&last) = self.window.frames.last() {
            if frame <= last {
                return Err(Error::NonMonotoneFrameId { last, got: frame });
            }
        }
        let k = obs.camera.intrinsics;
        let t_wc = self.camera_guess(obs)?;
        self.times.insert(frame, obs.time_s);

        let cam_points = camera_points(obs);
        let world: BTreeMap<u64, Vector3<f64>> = cam_points
            .iter()
            .map(|(id, p)| (*id, t_wc.transform_point(p)))
            .collect();

        let det_features: Vec<BTreeSet<u64>> = (0..obs.detections.len())
            .map(|d| {
                obs.features
                    .iter()
                    .filter(|f| f.instance == Some(d as u64))
                    .map(|f| f.id)
                    .collect()
            })
            .collect();
        let det_track = self.associate(obs, &t_wc, &det_features);

        let mut track_frames = Vec::new();
        for (d, id) in det_track.iter().enumerate() {
            let Some(id) = id else { continue };
            let tf = self.update_track_pose(*id, d, frame, &det_features[d], &world);
            track_frames.push(tf);
        }
        for tf in &track_frames {
            self.sightings.entry(tf.id).or_default().push(BoxSighting {
                frame,
                bbox: obs.detections[tf.detection].bbox,
                k,
            });
        }

        let insert = self.build_insert(obs, &t_wc, &world, &track_frames)?;
        self.window.add_frame(insert)?;
        match self.window.lm_solve(&self.cfg.lm) {
            Ok(r) => log::debug!(
                "frame {frame}: cost {:.4e} -> {:.4e} in {} iters",
                r.initial_cost,
                r.final_cost,
                r.iterations
            ),
            Err(Error::SingularSystem)
            | Err(Error::NoFactors)
            | Err(Error::DivergedOptimization) => {
                log::warn!("frame {frame}: optimization skipped")
            }
            Err(e) => return Err(e),
        }
        self.read_back();
        self.init_and_refine_quadrics(frame, &track_frames)?;
        self.update_velocities();

        // world points at the optimized camera, for next frame's scene flow
        let cam = self.cameras.get(&frame).copied().unwrap_or(t_wc);
        self.prev_world = cam_points
            .iter()
            .map(|(id, p)| (*id, cam.transform_point(p)))
            .collect();

        Ok(self.record(obs, &track_frames))
    }

    fn camera_guess(&self, obs: &FrameObservation) -> Result<Pose> {
        match self.cfg.camera_mode {
            CameraMode::Given => obs.camera.pose_wc.ok_or_else(|| {
                Error::MissingInput(format!("frame {} has no camera pose", obs.frame))
            }),
            CameraMode::Estimate => {
                if self.cameras.is_empty() {
                    return Ok(obs.camera.pose_wc.unwrap_or_else(Pose::identity));
                }
                let (mut dst, mut src) = (Vec::new(), Vec::new());
                for (id, p) in camera_points(obs) {
                    let background = obs
                        .features
                        .iter()
                        .any(|f| f.id == id && f.instance.is_none());
                    if let (true, Some(w)) = (background, self.landmarks.get(&id)) {
                        dst.push(*w);
                        src.push(p);
                    }
                }
                if dst.len() >= 3 {
                    return Ok(align_rigid(&dst, &src));
                }
                let mut recent = self.cameras.values().rev();
                let last = *recent.next().expect("non-empty");
                Ok(match recent.next() {
                    Some(prev) => last.compose(&prev.inverse().compose(&last)),
                    None => last,
                })
            }
        }
    }

    /// Matches detections to tracks and spawns new tracks. Returns the track
    /// id per detection.
    fn associate(
        &mut self,
        obs: &FrameObservation,
        t_wc: &Pose,
        det_features: &[BTreeSet<u64>],
    ) -> Vec<Option<u64>> {
        let k = obs.camera.intrinsics;
        let mut cues = Vec::with_capacity(self.tracks.len());
        for t in &mut self.tracks {
            let (state, predicted) = kf_predict(&t.kf);
            t.kf = state;
            let reference = match (&t.quadric, t.last_pose()) {
                (Some(q), Some(last)) => {
                    let pose = se3_exp(&t.velocity).compose(last);
                    project_bbox(q, &pose, t_wc, &k).unwrap_or(t.last_bbox)
                }
                _ => t.last_bbox,
            };
            cues.push(TrackCue {
                predicted,
                reference,
                features: t.features.clone(),
            });
        }
        let dets: Vec<DetectionCue> = obs
            .detections
            .iter()
            .zip(det_features)
            .map(|(d, f)| DetectionCue {
                bbox: d.bbox,
                features: f.clone(),
            })
            .collect();
        let assignment = if dets.is_empty() || cues.is_empty() {
            None
        } else {
            let cost = build_cost_matrix(&dets, &cues, &self.cfg.association);
            Some(hungarian_assign(&cost, self.cfg.association.gate))
        };
        let mut det_track = vec![None; dets.len()];
        let mut matched = Vec::new();
        let mut taken = BTreeSet::new();
        if let Some(a) = &assignment {
            for &(d, t) in &a.pairs {
                det_track[d] = Some(self.tracks[t].id);
                matched.push((t, dets[d].bbox, dets[d].features.clone()));
                taken.insert(d);
            }
        }
        let mut spawns = Vec::new();
        let mut id = self.next_id;
        for (d, det) in obs.detections.iter().enumerate() {
            if !taken.contains(&d) {
                det_track[d] = Some(id);
                id += 1;
                spawns.push(Spawn {
                    bbox: det.bbox,
                    class: det.class.clone(),
                    features: det_features[d].clone(),
                });
            }
        }
        let removed = track_lifecycle_step(&mut self.tracks, &matched, &spawns, &mut self.next_id);
        for id in removed {
            self.sightings.remove(&id);
        }
        det_track
    }

    fn track_mut(&mut self, id: u64) -> &mut ObjectTrack {
        self.tracks
            .iter_mut()
            .find(|t| t.id == id)
            .expect("track exists")
    }

    /// Estimates the object pose at `frame`, labels its motion and registers
    /// newly seen points.
    fn update_track_pose(
        &mut self,
        id: u64,
        detection: usize,
        frame: u64,
        feats: &BTreeSet<u64>,
        world: &BTreeMap<u64, Vector3<f64>>,
    ) -> TrackFrame {
        let motion = self.cfg.motion;
        let prev_world = &self.prev_world;
        let labels: Vec<_> = feats
            .iter()
            .filter_map(|f| {
                Some(scene_flow_label(
                    prev_world.get(f)?,
                    world.get(f)?,
                    &Pose::identity(),
                    &motion,
                ))
            })
            .collect();
        let t = self.track_mut(id);

        let (dst, src): (Vec<_>, Vec<_>) = feats
            .iter()
            .filter_map(|f| Some((*world.get(f)?, *t.landmarks.get(f)?)))
            .unzip();
        let pose = if dst.len() >= 3 {
            Some(align_rigid(&dst, &src))
        } else if let Some(last) = t.last_pose() {
            let gap = frame - t.pose_history.last().expect("has pose").0;
            Some(se3_exp(&t.velocity.scale(gap as f64)).compose(last))
        } else {
            let seen: Vec<Vector3<f64>> =
                feats.iter().filter_map(|f| world.get(f).copied()).collect();
            centroid_of(&seen).ok().map(Pose::from_translation)
        };
        if let Some(pose) = pose {
            t.pose_history.push((frame, pose));
            let inv = pose.inverse();
            for f in feats {
                if let (false, Some(w)) = (t.landmarks.contains_key(f), world.get(f)) {
                    t.landmarks.insert(*f, inv.transform_point(w));
                }
            }
        }
        classify_object_motion(t, &labels, &motion);
        TrackFrame {
            id,
            detection,
            pose,
        }
    }

    fn feature_sqrt_info(&self, depth: Option<f64>) -> DVector<f64> {
        let s = 1.0 / self.cfg.sigma_feature_px;
        match depth {
            Some(z) => DVector::from_vec(vec![
                s,
                s,
                1.0 / (self.cfg.depth_k * z * z).max(self.cfg.depth_floor_m),
            ]),
            None => DVector::from_vec(vec![s, s]),
        }
    }

    fn build_insert(
        &mut self,
        obs: &FrameObservation,
        t_wc: &Pose,
        world: &BTreeMap<u64, Vector3<f64>>,
        track_frames: &[TrackFrame],
    ) -> Result<FrameInsert> {
        let frame = obs.frame;
        let k = obs.camera.intrinsics;
        let cam_key = VarKey::Camera(frame);
        let leaving = if self.window.len() >= self.cfg.window {
            self.window.frames.first().copied()
        } else {
            None
        };
        let live = |key: &VarKey| leaving.is_none() || key.frame() != leaving;
        let t_kernel = Some(RobustKernel::TStudent {
            nu: self.cfg.robust.t_nu,
        });

        let mut states = vec![(cam_key, StateValue::Pose(*t_wc))];
        let mut factors = Vec::new();
        let anchor = match self.cfg.camera_mode {
            CameraMode::Given => Some(1.0 / self.cfg.sigma_given_pose),
            CameraMode::Estimate if self.cameras.is_empty() => Some(1e6),
            CameraMode::Estimate => None,
        };
        if let Some(w) = anchor {
            factors.push(Factor {
                kind: FactorKind::PosePrior { pose: *t_wc },
                keys: vec![cam_key],
                sqrt_info: DVector::from_element(6, w),
                robust: None,
            });
        }

        for f in obs.features.iter().filter(|f| f.instance.is_none()) {
            let key = VarKey::Landmark(f.id);
            let value = match (self.landmarks.get(&f.id), world.get(&f.id)) {
                (Some(p), _) => *p,
                (None, Some(p)) => {
                    self.landmarks.insert(f.id, *p);
                    *p
                }
                (None, None) => continue,
            };
            states.push((key, StateValue::Point(value)));
            factors.push(Factor {
                kind: FactorKind::StaticFeature {
                    z: Vector2::new(f.u, f.v),
                    depth: f.depth_m,
                    k,
                },
                keys: vec![cam_key, key],
                sqrt_info: self.feature_sqrt_info(f.depth_m),
                robust: t_kernel,
            });
        }

        for tf in track_frames {
            let Some(pose) = tf.pose else { continue };
            let obj_key = VarKey::Object {
                track: tf.id,
                frame,
            };
            states.push((obj_key, StateValue::Pose(pose)));
            let track = self
                .tracks
                .iter()
                .find(|t| t.id == tf.id)
                .expect("track exists");

            for f in obs
                .features
                .iter()
                .filter(|f| f.instance == Some(tf.detection as u64))
            {
                let Some(p) = track.landmarks.get(&f.id) else {
                    continue;
                };
                let key = VarKey::ObjectPoint {
                    track: tf.id,
                    feature: f.id,
                };
                states.push((key, StateValue::Point(*p)));
                factors.push(Factor {
                    kind: FactorKind::DynamicFeature {
                        z: Vector2::new(f.u, f.v),
                        depth: f.depth_m,
                        k,
                    },
                    keys: vec![cam_key, obj_key, key],
                    sqrt_info: self.feature_sqrt_info(f.depth_m),
                    robust: t_kernel,
                });
            }

            let hist = &track.pose_history;
            let n = hist.len();
            let prev_keys: Vec<VarKey> = hist[n.saturating_sub(3)..n - 1]
                .iter()
                .map(|(f, _)| VarKey::Object {
                    track: tf.id,
                    frame: *f,
                })
                .collect();
            let prev_live = prev_keys
                .iter()
                .all(|k| self.window.values.contains_key(k) && live(k));
            if track.motion_label == MotionLabel::Static {
                if let (Some(prev), true) = (prev_keys.last(), prev_live) {
                    factors.push(Factor {
                        kind: FactorKind::PoseBetween {
                            measured: Pose::identity(),
                        },
                        keys: vec![*prev, obj_key],
                        sqrt_info: DVector::from_element(6, 1.0 / self.cfg.sigma_static_object),
                        robust: None,
                    });
                }
            } else if n >= 3 && prev_live && hist[n - 1].0 - hist[n - 3].0 == 2 {
                factors.push(Factor {
                    kind: FactorKind::MotionModel,
                    keys: vec![prev_keys[0], prev_keys[1], obj_key],
                    sqrt_info: DVector::from_element(6, 1.0 / self.cfg.sigma_motion),
                    robust: None,
                });
            }

            if self.cfg.planar_prior {
                let height = hist[0].1.translation.z;
                factors.push(Factor {
                    kind: FactorKind::Planar { height },
                    keys: vec![obj_key],
                    sqrt_info: DVector::from_element(3, 1.0 / self.cfg.sigma_planar),
                    robust: None,
                });
            }

            let bbox = obs.detections[tf.detection].bbox;
            if self.cfg.quadrics_in_window()
                && self.quadric_in_window.contains(&tf.id)
                && !self.cfg.is_truncated(&bbox)
            {
                let q = track.quadric.expect("quadric in window");
                states.push((VarKey::Quadric(tf.id), StateValue::Quadric(q)));
                factors.push(self.box_factor(tf.id, bbox, obj_key, cam_key, k));
            }
        }
        Ok(FrameInsert {
            frame,
            states,
            factors,
        })
    }

    fn box_factor(
        &self,
        track: u64,
        bbox: BBox,
        obj_key: VarKey,
        cam_key: VarKey,
        k: Intrinsics,
    ) -> Factor {
        Factor {
            kind: FactorKind::QuadricBox { bbox, k },
            keys: vec![VarKey::Quadric(track), obj_key, cam_key],
            sqrt_info: DVector::from_element(4, 1.0 / self.cfg.sigma_bbox_px),
            robust: Some(RobustKernel::Huber {
                delta: self.cfg.robust.huber_delta,
            }),
        }
    }

    /// Copies optimized values into the caches.
    fn read_back(&mut self) {
        let values = &self.window.values;
        for (key, value) in values {
            match (key, value) {
                (VarKey::Camera(f), StateValue::Pose(p)) => {
                    self.cameras.insert(*f, *p);
                }
                (VarKey::Landmark(id), StateValue::Point(p)) => {
                    self.landmarks.insert(*id, *p);
                }
                _ => {}
            }
        }
        for t in &mut self.tracks {
            for (f, pose) in &mut t.pose_history {
                if let Some(StateValue::Pose(p)) = values.get(&VarKey::Object {
                    track: t.id,
                    frame: *f,
                }) {
                    *pose = *p;
                }
            }
            for (fid, p) in &mut t.landmarks {
                if let Some(StateValue::Point(v)) = values.get(&VarKey::ObjectPoint {
                    track: t.id,
                    feature: *fid,
                }) {
                    *p = *v;
                }
            }
            if let Some(StateValue::Quadric(q)) = values.get(&VarKey::Quadric(t.id)) {
                t.quadric = Some(*q);
            }
        }
    }

    fn box_observations(&self, track: &ObjectTrack) -> Vec<BoxObservation> {
        let poses: BTreeMap<u64, Pose> = track.pose_history.iter().copied().collect();
        self.sightings
            .get(&track.id)
            .into_iter()
            .flatten()
            .filter(|s| !self.cfg.is_truncated(&s.bbox))
            .filter_map(|s| {
                Some(BoxObservation {
                    bbox: s.bbox,
                    t_wc: *self.cameras.get(&s.frame)?,
                    t_wo: *poses.get(&s.frame)?,
                })
            })
            .collect()
    }

    /// Initializes quadrics for tracks with enough evidence; in separate mode
    /// also refits initialized quadrics from the recent boxes.
    fn init_and_refine_quadrics(&mut self, frame: u64, track_frames: &[TrackFrame]) -> Result<()> {
        for tf in track_frames {
            let Some(track) = self.tracks.iter().find(|t| t.id == tf.id) else {
                continue;
            };
            if track.quadric.is_some() && self.cfg.quadrics_in_window() {
                continue;
            }
            let obs = self.box_observations(track);
            if obs.len() < self.cfg.init_min_frames {
                continue;
            }
            let recent = &obs[obs.len().saturating_sub(self.cfg.window)..];
            let k = self.sightings[&tf.id].last().expect("sighted").k;
            let (init, prior) = match (track.quadric, track.prior) {
                (Some(q), Some(prior)) => (q, prior),
                _ => {
                    if track.landmarks.len() < self.cfg.init_min_points {
                        continue;
                    }
                    let pts: Vec<Vector3<f64>> = track.landmarks.values().copied().collect();
                    let center = centroid_of(&pts)?;
                    if view_spread_deg(&obs, &center) < self.cfg.init_min_view_angle_deg {
                        continue;
                    }
                    let stereo: Vec<StereoObservation> = recent
                        .iter()
                        .filter_map(|o| {
                            let c = o
                                .t_wc
                                .inverse()
                                .transform_point(&o.t_wo.transform_point(&center));
                            (c.z > 0.0).then(|| StereoObservation {
                                depth: c.z,
                                width: o.bbox.width(),
                                height: o.bbox.height(),
                            })
                        })
                        .collect();
                    let Ok(radius) = stereo_initial_radius(&stereo, &k) else {
                        continue;
                    };
                    let prior = InitPrior::Radius(radius);
                    (init_sphere(center, &prior), prior)
                }
            };
            let report = match refine_quadric(&init, recent, &k, &prior, &self.cfg.refine) {
                Ok(r) => r,
                Err(e) => {
                    log::warn!("track {}: quadric fit failed: {e}", tf.id);
                    continue;
                }
            };
            let id = tf.id;
            let t = self.track_mut(id);
            t.quadric = Some(report.params);
            t.prior = Some(prior);
            self.prior_weights.entry(id).or_insert(report.prior_weight);
            if self.cfg.quadrics_in_window() {
                self.attach_quadric(id, frame)?;
            }
        }
        Ok(())
    }

    /// Adds a freshly initialized quadric with its size prior and the box
    /// factors of every sighting still in the window, then re-solves.
    fn attach_quadric(&mut self, id: u64, frame: u64) -> Result<()> {
        let track = self
            .tracks
            .iter()
            .find(|t| t.id == id)
            .expect("track exists");
        let q = track.quadric.expect("initialized");
        let prior = track.prior.expect("initialized");
        let key = VarKey::Quadric(id);
        self.window.values.insert(key, StateValue::Quadric(q));
        let w = self.prior_weights[&id].sqrt() / self.cfg.sigma_bbox_px;
        let mut factors = vec![Factor {
            kind: FactorKind::PriorSize {
                prior: prior.axes(),
            },
            keys: vec![key],
            sqrt_info: DVector::from_element(3, w),
            robust: None,
        }];
        for s in &self.sightings[&id] {
            let obj = VarKey::Object {
                track: id,
                frame: s.frame,
            };
            let cam = VarKey::Camera(s.frame);
            let live =
                self.window.values.contains_key(&obj) && self.window.values.contains_key(&cam);
            if live && !self.cfg.is_truncated(&s.bbox) {
                factors.push(self.box_factor(id, s.bbox, obj, cam, s.k));
            }
        }
        self.window.factors.extend(factors);
        self.quadric_in_window.insert(id);
        match self.window.lm_solve(&self.cfg.lm) {
            Ok(_) | Err(Error::SingularSystem) | Err(Error::DivergedOptimization) => {}
            Err(e) => return Err(e),
        }
        log::debug!("frame {frame}: quadric attached for track {id}");
        self.read_back();
        Ok(())
    }

    fn update_velocities(&mut self) {
        for t in &mut self.tracks {
            let n = t.pose_history.len();
            if n < 2 {
                continue;
            }
            let (f0, p0) = t.pose_history[n - 2];
            let (f1, p1) = t.pose_history[n - 1];
            if let Ok(xi) = se3_log(&world_motion(&p0, &p1)) {
                t.velocity = xi.scale(1.0 / (f1 - f0) as f64);
            }
        }
    }

    fn record(&self, obs: &FrameObservation, track_frames: &[TrackFrame]) -> EstimateRecord {
        let camera_pose = self
            .cameras
            .get(&obs.frame)
            .copied()
            .unwrap_or_else(Pose::identity);
        let mut tracks = Vec::new();
        for tf in track_frames {
            let Some(t) = self.tracks.iter().find(|t| t.id == tf.id) else {
                continue;
            };
            let Some(&(frame, pose_wo)) = t.pose_history.last() else {
                continue;
            };
            if frame != obs.frame {
                continue;
            }
            tracks.push(TrackEstimate {
                id: t.id,
                pose_wo,
                velocity: self.velocity_per_second(t),
                motion_label: t.motion_label,
                quadric: t.quadric,
                bbox: Some(t.last_bbox),
            });
        }
        tracks.sort_by_key(|t| t.id);
        EstimateRecord {
            frame: obs.frame,
            camera_pose,
            tracks,
            trial: obs.trial,
        }
    }

    fn velocity_per_second(&self, t: &ObjectTrack) -> Twist {
        let n = t.pose_history.len();
        if n < 2 {
            return Twist::zero();
        }
        let (f0, f1) = (t.pose_history[n - 2].0, t.pose_history[n - 1].0);
        let frames = (f1 - f0) as f64;
        match (self.times.get(&f0), self.times.get(&f1)) {
            (Some(a), Some(b)) if b > a => t.velocity.scale(frames / (b - a)),
            _ => t.velocity,
        }
    }
}

/// Largest angle between two viewing directions of an object-frame point.
fn view_spread_deg(obs: &[BoxObservation], center: &Vector3<f64>) -> f64 {
    let dirs: Vec<Vector3<f64>> = obs
        .iter()
        .filter_map(|o| {
            (o.t_wo.inverse().transform_point(&o.t_wc.translation) - center).try_normalize(1e-12)
        })
        .collect();
    let mut best: f64 = 0.0;
    for (i, a) in dirs.iter().enumerate() {
        for b in &dirs[i + 1..] {
            best = best.max(a.dot(b).clamp(-1.0, 1.0).acos());
        }
    }
    best.to_degrees()
}

/// Camera-frame positions of the features that carry a usable depth.
fn camera_points(obs: &FrameObservation) -> BTreeMap<u64, Vector3<f64>> {
    obs.features
        .iter()
        .filter_map(|f| {
            let z = f.depth_m?;
            let p = back_project(&obs.camera.intrinsics, &Vector2::new(f.u, f.v), z).ok()?;
            Some((f.id, p))
        })
        .collect()
}
