//! Deterministic synthetic data: the static-arc initialization benchmark and
//! dynamic rigid-object scenes with feature tracks.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{Detection, FeatureObservation, FrameObservation, GtObject, TrialTag};
use crate::quadric::{project_bbox, BBox, QuadricParams};
use crate::se3::{project, rot_z, se3_exp, so3_exp, so3_log, Intrinsics, Pose, Twist};

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent random stream for one (seed, trial, frame, entity) cell.
pub fn stream(seed: u64, trial: u64, frame: u64, entity: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for v in [trial, frame, entity] {
        h = splitmix(h ^ v);
    }
    ChaCha8Rng::seed_from_u64(h)
}

mod entity {
    pub const ELLIPSOID: u64 = 1;
    pub const POSE_NOISE: u64 = 2;
    pub const BBOX_NOISE: u64 = 3;
    pub const SURFACE: u64 = 4;
    pub const FEATURE_NOISE: u64 = 5;
    pub const BACKGROUND: u64 = 6;
}

fn normal3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
        rng.sample(StandardNormal),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticArcConfig {
    pub n_cameras: usize,
    pub arc_degrees: f64,
    pub radius: f64,
    pub axis_min: f64,
    pub axis_max: f64,
    pub yaw_range_deg: f64,
    /// Camera height above the ellipsoid center.
    pub camera_height: f64,
    pub width: u32,
    pub height: u32,
    pub intrinsics: Intrinsics,
    /// Surface points sampled per ellipsoid; each view sees its visible half.
    pub n_surface_points: usize,
}

impl Default for StaticArcConfig {
    fn default() -> Self {
        Self {
            n_cameras: 5,
            arc_degrees: 18.0,
            radius: 12.0,
            axis_min: 0.75,
            axis_max: 2.25,
            yaw_range_deg: 5.0,
            camera_height: 2.0,
            width: 640,
            height: 480,
            intrinsics: Intrinsics::new(500.0, 500.0, 320.0, 240.0),
            n_surface_points: 200,
        }
    }
}

/// Noise levels in percent of the relative motion (poses) or of the image
/// width (box corners).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseConfig {
    pub pose_translation_pct: f64,
    pub rotation_pct: f64,
    pub bbox_pct: f64,
}

/// One static-arc trial: an ellipsoid seen from an arc of cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticTrial {
    pub tag: TrialTag,
    /// World-frame ground truth.
    pub gt: QuadricParams,
    pub cameras_gt: Vec<Pose>,
    /// Poses handed to the estimators.
    pub cameras: Vec<Pose>,
    pub bboxes_gt: Vec<BBox>,
    pub bboxes: Vec<BBox>,
    /// Visible surface points in each camera frame, with their ids.
    pub points: Vec<Vec<(u64, Vector3<f64>)>>,
}

/// Perturbs each relative motion of a pose chain and re-chains from the exact
/// first pose. Standard normals are drawn in a fixed order so that results at
/// different `pct` share their random numbers.
pub fn apply_pose_noise(
    poses: &[Pose],
    frac_translation: f64,
    frac_rotation: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Pose> {
    let mut out = Vec::with_capacity(poses.len());
    let Some(first) = poses.first() else {
        return out;
    };
    if frac_translation == 0.0 && frac_rotation == 0.0 {
        return poses.to_vec();
    }
    out.push(*first);
    for w in poses.windows(2) {
        let rel = w[0].inverse().compose(&w[1]);
        let dt = rel.translation.norm();
        let dtheta = so3_log(&rel.rotation)
            .map(|v| v.norm())
            .unwrap_or(std::f64::consts::PI);
        let nt = normal3(rng);
        let nr = normal3(rng);
        let sigma_t = frac_translation * dt / 3f64.sqrt();
        let sigma_r = frac_rotation * dtheta / 3f64.sqrt();
        let noisy = Pose::new(
            rel.rotation * so3_exp(&(nr * sigma_r)),
            rel.translation + nt * sigma_t,
        );
        let prev = *out.last().unwrap_or(first);
        out.push(prev.compose(&noisy));
    }
    out
}

/// Gaussian corner noise with σ = frac·image_width, re-sorted and clamped.
pub fn apply_bbox_noise(
    b: &BBox,
    frac: f64,
    image_width: f64,
    image_height: f64,
    rng: &mut ChaCha8Rng,
) -> BBox {
    let sigma = frac * image_width;
    let mut c = b.to_array();
    for v in &mut c {
        let n: f64 = rng.sample(StandardNormal);
        *v += n * sigma;
    }
    let (x0, x1) = (
        c[0].min(c[2]).clamp(0.0, image_width),
        c[0].max(c[2]).clamp(0.0, image_width),
    );
    let (y0, y1) = (
        c[1].min(c[3]).clamp(0.0, image_height),
        c[1].max(c[3]).clamp(0.0, image_height),
    );
    BBox::new(x0, y0, x1, y1)
}

/// Point on the ellipsoid surface along a random direction.
fn surface_point(axes: &Vector3<f64>, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let d = normal3(rng);
        let n = d.norm();
        if n > 1e-9 {
            return axes.component_mul(&(d / n));
        }
    }
}

fn outward_normal(q: &QuadricParams, p: &Vector3<f64>) -> Vector3<f64> {
    let local = q.rotation.transpose() * (p - q.translation);
    q.rotation * local.component_div(&q.axes.component_mul(&q.axes))
}

/// Cameras evenly spread over the arc, all looking at the origin.
pub fn arc_cameras(cfg: &StaticArcConfig) -> Vec<Pose> {
    let half = cfg.arc_degrees.to_radians() / 2.0;
    let n = cfg.n_cameras.max(2);
    (0..cfg.n_cameras)
        .map(|i| {
            let phi = -half + 2.0 * half * i as f64 / (n - 1) as f64;
            let eye = Vector3::new(
                cfg.radius * phi.sin(),
                -cfg.radius * phi.cos(),
                cfg.camera_height,
            );
            Pose::look_at(&eye, &Vector3::zeros(), &Vector3::z())
        })
        .collect()
}

/// Generates trial `index` of `seed`.
pub fn gen_static_trial(
    cfg: &StaticArcConfig,
    noise: &NoiseConfig,
    seed: u64,
    index: u64,
) -> StaticTrial {
    let mut rng = stream(seed, index, 0, entity::ELLIPSOID);
    let axes = Vector3::from_fn(|_, _| rng.random_range(cfg.axis_min..=cfg.axis_max));
    let yaw = rng
        .random_range(-cfg.yaw_range_deg..=cfg.yaw_range_deg)
        .to_radians();
    let gt = QuadricParams::new(axes, Vector3::zeros(), rot_z(yaw));
    let k = cfg.intrinsics;
    let cameras_gt = arc_cameras(cfg);
    let bboxes_gt: Vec<BBox> = cameras_gt
        .iter()
        .map(|c| {
            project_bbox(&gt, &Pose::identity(), c, &k).expect("arc cameras see the ellipsoid")
        })
        .collect();
    let mut rng = stream(seed, index, 0, entity::POSE_NOISE);
    let cameras = apply_pose_noise(
        &cameras_gt,
        noise.pose_translation_pct / 100.0,
        noise.rotation_pct / 100.0,
        &mut rng,
    );
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let bboxes = bboxes_gt
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut rng = stream(seed, index, i as u64, entity::BBOX_NOISE);
            apply_bbox_noise(b, noise.bbox_pct / 100.0, w, h, &mut rng)
        })
        .collect();
    let mut rng = stream(seed, index, 0, entity::SURFACE);
    let surface: Vec<Vector3<f64>> = (0..cfg.n_surface_points)
        .map(|_| gt.rotation * surface_point(&gt.axes, &mut rng) + gt.translation)
        .collect();
    let points = cameras_gt
        .iter()
        .map(|c| {
            surface
                .iter()
                .enumerate()
                .filter(|(_, p)| outward_normal(&gt, p).dot(&(c.translation - *p)) > 0.0)
                .map(|(i, p)| (i as u64, c.inverse().transform_point(p)))
                .collect()
        })
        .collect();
    StaticTrial {
        tag: TrialTag { seed, index },
        gt,
        cameras_gt,
        cameras,
        bboxes_gt,
        bboxes,
        points,
    }
}

/// `per_seed` ellipsoids for every seed, ordered by (seed, index).
pub fn gen_static_benchmark(
    cfg: &StaticArcConfig,
    noise: &NoiseConfig,
    seeds: &[u64],
    per_seed: usize,
) -> Vec<StaticTrial> {
    seeds
        .iter()
        .flat_map(|&s| (0..per_seed as u64).map(move |i| (s, i)))
        .map(|(s, i)| gen_static_trial(cfg, noise, s, i))
        .collect()
}

/// Frame records for a list of trials; one frame per camera, numbered globally.
pub fn static_trials_to_frames(
    cfg: &StaticArcConfig,
    trials: &[StaticTrial],
) -> Vec<FrameObservation> {
    let mut out = Vec::new();
    let mut frame = 0u64;
    for t in trials {
        let gt_obj = GtObject {
            id: 0,
            pose_wo: t.gt.pose(),
            axes_m: t.gt.axes,
            dynamic: false,
            extra: Default::default(),
        };
        for c in 0..t.cameras.len() {
            let mut f = FrameObservation::new(frame, c as f64, cfg.intrinsics);
            f.camera.pose_wc = Some(t.cameras[c]);
            f.camera.gt_pose_wc = Some(t.cameras_gt[c]);
            f.trial = Some(t.tag);
            f.detections.push(Detection {
                bbox: t.bboxes[c],
                score: 1.0,
                class: "car".into(),
                instance_gt: Some(0),
                extra: Default::default(),
            });
            for (id, p) in &t.points[c] {
                let Ok(u) = project(&cfg.intrinsics, p) else {
                    continue;
                };
                f.features.push(FeatureObservation {
                    id: *id,
                    u: u.x,
                    v: u.y,
                    depth_m: Some(p.z),
                    instance: Some(0),
                    extra: Default::default(),
                });
            }
            f.gt_objects.push(gt_obj.clone());
            out.push(f);
            frame += 1;
        }
    }
    out
}

/// A rigid object moving with a constant world-frame motion `H = exp(ξ·dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub id: u64,
    pub axes: Vector3<f64>,
    pub start: Pose,
    /// Twist per second.
    pub twist: Twist,
    pub n_features: usize,
    /// Frames `[start, end)` during which the object produces no observations.
    pub occluded: Option<(u64, u64)>,
    pub class: String,
}

impl ObjectSpec {
    pub fn pose_at(&self, frame: u64, dt: f64) -> Pose {
        se3_exp(&self.twist.scale(frame as f64 * dt)).compose(&self.start)
    }

    pub fn is_dynamic(&self) -> bool {
        self.twist.norm() > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicSceneConfig {
    pub n_frames: usize,
    pub dt: f64,
    pub width: u32,
    pub height: u32,
    pub intrinsics: Intrinsics,
    pub camera_start: Pose,
    /// Constant world-frame camera twist per second.
    pub camera_twist: Twist,
    pub objects: Vec<ObjectSpec>,
    pub n_background: usize,
    /// Axis-aligned region holding the static background points.
    pub background_min: Vector3<f64>,
    pub background_max: Vector3<f64>,
    pub feature_sigma_px: f64,
    /// Depth noise σ = k·z².
    pub depth_k: f64,
    pub bbox_sigma_px: f64,
    pub seed: u64,
}

fn forward_camera(eye: Vector3<f64>) -> Pose {
    Pose::look_at(&eye, &(eye + Vector3::y()), &Vector3::z())
}

fn car(id: u64, start: Pose, velocity: Vector3<f64>) -> ObjectSpec {
    ObjectSpec {
        id,
        axes: Vector3::new(2.0, 0.9, 0.75),
        start,
        twist: Twist::new(velocity, Vector3::zeros()),
        n_features: 60,
        occluded: None,
        class: "car".into(),
    }
}

impl DynamicSceneConfig {
    fn base(seed: u64) -> Self {
        Self {
            n_frames: 100,
            dt: 0.1,
            width: 640,
            height: 480,
            intrinsics: Intrinsics::new(500.0, 500.0, 320.0, 240.0),
            camera_start: forward_camera(Vector3::new(0.0, 0.0, 1.5)),
            camera_twist: Twist::zero(),
            objects: Vec::new(),
            n_background: 150,
            background_min: Vector3::new(-15.0, 25.0, 0.0),
            background_max: Vector3::new(15.0, 40.0, 8.0),
            feature_sigma_px: 0.0,
            depth_k: 0.0,
            bbox_sigma_px: 0.0,
            seed,
        }
    }

    /// One car driving alongside a camera that keeps pace with it.
    pub fn single(seed: u64) -> Self {
        let mut c = Self::base(seed);
        let v = Vector3::new(3.0, 0.0, 0.0);
        c.camera_twist = Twist::new(v, Vector3::zeros());
        c.objects.push(car(
            1,
            Pose::new(rot_z(0.3), Vector3::new(0.5, 12.0, 0.75)),
            v,
        ));
        c.background_min = Vector3::new(-15.0, 25.0, 0.0);
        c.background_max = Vector3::new(45.0, 40.0, 8.0);
        c.n_background = 300;
        c
    }

    /// Three cars crossing in front of a stationary camera.
    pub fn crossing(seed: u64) -> Self {
        let mut c = Self::base(seed);
        c.objects.push(car(
            1,
            Pose::from_translation(Vector3::new(-8.0, 14.0, 0.75)),
            Vector3::new(1.8, 0.0, 0.0),
        ));
        c.objects.push(car(
            2,
            Pose::from_translation(Vector3::new(8.0, 18.0, 0.75)),
            Vector3::new(-1.8, 0.0, 0.0),
        ));
        c.objects.push(car(
            3,
            Pose::new(rot_z(0.4), Vector3::new(-10.0, 24.0, 0.75)),
            Vector3::new(2.0, 0.3, 0.0),
        ));
        c
    }

    /// Parked cars and background, with the camera driving past.
    pub fn static_scene(seed: u64) -> Self {
        let mut c = Self::base(seed);
        c.n_frames = 50;
        c.camera_twist = Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.0, 0.02));
        c.objects.push(car(
            1,
            Pose::new(rot_z(0.2), Vector3::new(-1.5, 12.0, 0.75)),
            Vector3::zeros(),
        ));
        c.objects.push(car(
            2,
            Pose::new(rot_z(-0.1), Vector3::new(4.0, 15.0, 0.75)),
            Vector3::zeros(),
        ));
        c.background_min = Vector3::new(-20.0, 20.0, 0.0);
        c.background_max = Vector3::new(25.0, 35.0, 8.0);
        c.n_background = 200;
        c.feature_sigma_px = 1.0;
        c
    }

    pub fn camera_at(&self, frame: u64) -> Pose {
        se3_exp(&self.camera_twist.scale(frame as f64 * self.dt)).compose(&self.camera_start)
    }
}

/// Object-frame features in antipodal pairs, so their centroid is the
/// ellipsoid center.
pub fn object_features(spec: &ObjectSpec, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = stream(seed, spec.id, 0, entity::SURFACE);
    let mut out = Vec::with_capacity(spec.n_features);
    for _ in 0..spec.n_features / 2 {
        let p = surface_point(&spec.axes, &mut rng);
        out.push(p);
        out.push(-p);
    }
    out
}

/// Feature id of object point `i`; background points use their own index.
pub fn object_feature_id(object: u64, i: usize) -> u64 {
    1_000_000 * (object + 1) + i as u64
}

fn in_image(u: &Vector2<f64>, w: f64, h: f64) -> bool {
    u.x >= 0.0 && u.x < w && u.y >= 0.0 && u.y < h
}

pub fn gen_dynamic_scene(cfg: &DynamicSceneConfig) -> Vec<FrameObservation> {
    let k = cfg.intrinsics;
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let features: Vec<Vec<Vector3<f64>>> = cfg
        .objects
        .iter()
        .map(|o| object_features(o, cfg.seed))
        .collect();
    let mut rng = stream(cfg.seed, 0, 0, entity::BACKGROUND);
    let background: Vec<Vector3<f64>> = (0..cfg.n_background)
        .map(|_| {
            Vector3::from_fn(|i, _| rng.random_range(cfg.background_min[i]..=cfg.background_max[i]))
        })
        .collect();
    let unit = QuadricParams::new(Vector3::zeros(), Vector3::zeros(), Matrix3::identity());
    let mut out = Vec::with_capacity(cfg.n_frames);
    for f in 0..cfg.n_frames as u64 {
        let cam = cfg.camera_at(f);
        let cam_inv = cam.inverse();
        let mut obs = FrameObservation::new(f, f as f64 * cfg.dt, k);
        obs.camera.pose_wc = Some(cam);
        obs.camera.gt_pose_wc = Some(cam);
        let mut noise = stream(cfg.seed, 0, f, entity::FEATURE_NOISE);
        let emit = |obs: &mut FrameObservation,
                    id: u64,
                    x_w: &Vector3<f64>,
                    instance: Option<u64>,
                    noise: &mut ChaCha8Rng| {
            let pc = cam_inv.transform_point(x_w);
            let du: f64 = noise.sample(StandardNormal);
            let dv: f64 = noise.sample(StandardNormal);
            let dd: f64 = noise.sample(StandardNormal);
            let Ok(u) = project(&k, &pc) else { return };
            if pc.z < 0.2 || !in_image(&u, w, h) {
                return;
            }
            obs.features.push(FeatureObservation {
                id,
                u: u.x + du * cfg.feature_sigma_px,
                v: u.y + dv * cfg.feature_sigma_px,
                depth_m: Some(pc.z + dd * cfg.depth_k * pc.z * pc.z),
                instance,
                extra: Default::default(),
            });
        };
        for (i, p) in background.iter().enumerate() {
            emit(&mut obs, i as u64, p, None, &mut noise);
        }
        for (oi, spec) in cfg.objects.iter().enumerate() {
            let pose = spec.pose_at(f, cfg.dt);
            obs.gt_objects.push(GtObject {
                id: spec.id,
                pose_wo: pose,
                axes_m: spec.axes,
                dynamic: spec.is_dynamic(),
                extra: Default::default(),
            });
            if spec.occluded.is_some_and(|(a, b)| (a..b).contains(&f)) {
                continue;
            }
            let q = QuadricParams {
                axes: spec.axes,
                ..unit
            };
            let Ok(bbox) = project_bbox(&q, &pose, &cam, &k) else {
                continue;
            };
            let mut brng = stream(cfg.seed, spec.id, f, entity::BBOX_NOISE);
            let bbox = apply_bbox_noise(&bbox, cfg.bbox_sigma_px / w, w, h, &mut brng);
            if bbox.width() < 1.0 || bbox.height() < 1.0 {
                continue;
            }
            let det_index = obs.detections.len() as u64;
            obs.detections.push(Detection {
                bbox,
                score: 1.0,
                class: spec.class.clone(),
                instance_gt: Some(spec.id),
                extra: Default::default(),
            });
            for (i, f_o) in features[oi].iter().enumerate() {
                emit(
                    &mut obs,
                    object_feature_id(spec.id, i),
                    &pose.transform_point(f_o),
                    Some(det_index),
                    &mut noise,
                );
            }
        }
        out.push(obs);
    }
    out
}
