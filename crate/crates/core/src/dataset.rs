//! In-memory observation and estimate records.

use nalgebra::Vector3;
use serde_json::{Map, Value};

use crate::association::MotionLabel;
use crate::quadric::{BBox, QuadricParams};
use crate::se3::{Intrinsics, Pose, Twist};

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRecord {
    /// Camera pose fed to the estimator, when available.
    pub pose_wc: Option<Pose>,
    pub intrinsics: Intrinsics,
    /// Ground-truth pose, when the dataset carries one.
    pub gt_pose_wc: Option<Pose>,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureObservation {
    pub id: u64,
    pub u: f64,
    pub v: f64,
    pub depth_m: Option<f64>,
    /// Index of the detection whose mask contains the feature.
    pub instance: Option<u64>,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class: String,
    pub instance_gt: Option<u64>,
    pub extra: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub id: u64,
    pub pose_wo: Pose,
    pub axes_m: Vector3<f64>,
    pub dynamic: bool,
    pub extra: Map<String, Value>,
}

impl GtObject {
    /// World-frame ellipsoid.
    pub fn quadric(&self) -> QuadricParams {
        QuadricParams::new(self.axes_m, self.pose_wo.translation, self.pose_wo.rotation)
    }
}

/// Static-benchmark trial a frame belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TrialTag {
    pub seed: u64,
    pub index: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame: u64,
    pub time_s: f64,
    pub camera: CameraRecord,
    pub features: Vec<FeatureObservation>,
    pub detections: Vec<Detection>,
    pub gt_objects: Vec<GtObject>,
    pub trial: Option<TrialTag>,
    pub extra: Map<String, Value>,
}

impl FrameObservation {
    pub fn new(frame: u64, time_s: f64, intrinsics: Intrinsics) -> Self {
        Self {
            frame,
            time_s,
            camera: CameraRecord {
                pose_wc: None,
                intrinsics,
                gt_pose_wc: None,
                extra: Map::new(),
            },
            features: Vec::new(),
            detections: Vec::new(),
            gt_objects: Vec::new(),
            trial: None,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEstimate {
    pub id: u64,
    pub pose_wo: Pose,
    /// Twist of the world-frame motion H, per second.
    pub velocity: Twist,
    pub motion_label: MotionLabel,
    /// Object-frame ellipsoid.
    pub quadric: Option<QuadricParams>,
    /// Last associated detection box.
    pub bbox: Option<BBox>,
}

impl TrackEstimate {
    /// World-frame ellipsoid, when initialized.
    pub fn world_quadric(&self) -> Option<QuadricParams> {
        self.quadric.map(|q| q.transformed(&self.pose_wo))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRecord {
    pub frame: u64,
    pub camera_pose: Pose,
    pub tracks: Vec<TrackEstimate>,
    pub trial: Option<TrialTag>,
}
