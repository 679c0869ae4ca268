//! Line-delimited JSON datasets and estimate files.
//!
//! Every record is one JSON object per line. Keys are written in sorted
//! order, floats are rounded to 9 significant digits, and fields the reader
//! does not know are carried through unchanged.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde_json::{Map, Value};

use crate::association::MotionLabel;
use crate::dataset::{
    CameraRecord, Detection, EstimateRecord, FeatureObservation, FrameObservation, GtObject,
    TrackEstimate, TrialTag,
};
use crate::error::{Error, Result};
use crate::quadric::{BBox, QuadricParams};
use crate::se3::{Intrinsics, Pose, Twist};

/// Rounds to 9 significant digits.
pub fn round9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// Canonical text form of a float: 9 significant digits, shortest spelling.
pub fn fmt_f64(x: f64) -> String {
    let r = round9(x);
    if r == 0.0 {
        "0".to_string()
    } else {
        format!("{r}")
    }
}

fn num(x: f64) -> Value {
    Value::from(round9(x))
}

fn nums(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| num(*x)).collect())
}

struct Fields {
    map: Map<String, Value>,
    line: usize,
    context: &'static str,
}

impl Fields {
    fn new(v: Value, line: usize, context: &'static str) -> Result<Self> {
        match v {
            Value::Object(map) => Ok(Self { map, line, context }),
            _ => Err(Error::MalformedLine {
                line,
                reason: format!("{context} must be an object"),
            }),
        }
    }

    fn err(&self, reason: impl std::fmt::Display) -> Error {
        Error::MalformedLine {
            line: self.line,
            reason: format!("{}: {reason}", self.context),
        }
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key).filter(|v| !v.is_null())
    }

    fn req(&mut self, key: &str) -> Result<Value> {
        self.take(key)
            .ok_or_else(|| self.err(format!("missing `{key}`")))
    }

    fn as_f64(&self, key: &str, v: &Value) -> Result<f64> {
        v.as_f64()
            .ok_or_else(|| self.err(format!("`{key}` must be a number")))
    }

    fn as_u64(&self, key: &str, v: &Value) -> Result<u64> {
        v.as_u64()
            .ok_or_else(|| self.err(format!("`{key}` must be a non-negative integer")))
    }

    fn f64(&mut self, key: &str) -> Result<f64> {
        let v = self.req(key)?;
        self.as_f64(key, &v)
    }

    fn opt_f64(&mut self, key: &str) -> Result<Option<f64>> {
        self.take(key).map(|v| self.as_f64(key, &v)).transpose()
    }

    fn u64(&mut self, key: &str) -> Result<u64> {
        let v = self.req(key)?;
        self.as_u64(key, &v)
    }

    fn opt_u64(&mut self, key: &str) -> Result<Option<u64>> {
        self.take(key).map(|v| self.as_u64(key, &v)).transpose()
    }

    fn array(&self, key: &str, v: &Value, len: usize) -> Result<Vec<f64>> {
        let a = v
            .as_array()
            .ok_or_else(|| self.err(format!("`{key}` must be an array")))?;
        if a.len() != len {
            return Err(self.err(format!("`{key}` needs {len} numbers, got {}", a.len())));
        }
        a.iter().map(|x| self.as_f64(key, x)).collect()
    }

    fn vec(&mut self, key: &str, len: usize) -> Result<Vec<f64>> {
        let v = self.req(key)?;
        self.array(key, &v, len)
    }

    fn pose_of(&self, key: &str, v: &Value) -> Result<Pose> {
        let a = self.array(key, v, 7)?;
        Pose::from_wire(&a).map_err(|e| self.err(format!("`{key}`: {e}")))
    }

    fn pose(&mut self, key: &str) -> Result<Pose> {
        let v = self.req(key)?;
        self.pose_of(key, &v)
    }

    fn opt_pose(&mut self, key: &str) -> Result<Option<Pose>> {
        self.take(key).map(|v| self.pose_of(key, &v)).transpose()
    }

    fn bbox_of(&self, key: &str, v: &Value) -> Result<BBox> {
        let b = BBox::from_array(self.array(key, v, 4)?.try_into().expect("length checked"));
        if !b.is_valid() {
            return Err(self.err(format!("`{key}` is not a valid box (min > max)")));
        }
        Ok(b)
    }

    fn list(&mut self, key: &str) -> Result<Vec<Value>> {
        match self.take(key) {
            None => Ok(Vec::new()),
            Some(Value::Array(a)) => Ok(a),
            Some(_) => Err(self.err(format!("`{key}` must be an array"))),
        }
    }

    fn string(&mut self, key: &str) -> Result<String> {
        match self.req(key)? {
            Value::String(s) => Ok(s),
            _ => Err(self.err(format!("`{key}` must be a string"))),
        }
    }

    fn bool(&mut self, key: &str) -> Result<bool> {
        self.req(key)?
            .as_bool()
            .ok_or_else(|| self.err(format!("`{key}` must be a boolean")))
    }

    fn sub(&mut self, key: &str, context: &'static str) -> Result<Option<Fields>> {
        self.take(key)
            .map(|v| Fields::new(v, self.line, context))
            .transpose()
    }

    fn rest(self) -> Map<String, Value> {
        self.map
    }
}

fn trial_from(f: &mut Fields) -> Result<Option<TrialTag>> {
    let Some(mut t) = f.sub("trial", "trial")? else {
        return Ok(None);
    };
    Ok(Some(TrialTag {
        seed: t.u64("seed")?,
        index: t.u64("index")?,
    }))
}

fn trial_to(m: &mut Map<String, Value>, t: &Option<TrialTag>) {
    if let Some(t) = t {
        let mut o = Map::new();
        o.insert("seed".into(), t.seed.into());
        o.insert("index".into(), t.index.into());
        m.insert("trial".into(), Value::Object(o));
    }
}

pub fn frame_from_value(v: Value, line: usize) -> Result<FrameObservation> {
    let mut f = Fields::new(v, line, "frame")?;
    let frame = f.u64("frame")?;
    let time_s = f.f64("time_s")?;
    let mut c = f
        .sub("camera", "camera")?
        .ok_or_else(|| f.err("missing `camera`"))?;
    let k = c.vec("intrinsics", 4)?;
    let intrinsics = Intrinsics::new(k[0], k[1], k[2], k[3]);
    if !intrinsics.is_valid() {
        return Err(c.err("intrinsics need positive focal lengths"));
    }
    let camera = CameraRecord {
        pose_wc: c.opt_pose("pose_wc")?,
        intrinsics,
        gt_pose_wc: c.opt_pose("gt_pose_wc")?,
        extra: c.rest(),
    };
    let features = f
        .list("features")?
        .into_iter()
        .map(|v| {
            let mut g = Fields::new(v, line, "feature")?;
            let depth_m = g.opt_f64("depth_m")?;
            if depth_m.is_some_and(|d| !(d > 0.0)) {
                return Err(g.err("`depth_m` must be positive"));
            }
            Ok(FeatureObservation {
                id: g.u64("id")?,
                u: g.f64("u")?,
                v: g.f64("v")?,
                depth_m,
                instance: g.opt_u64("instance")?,
                extra: g.rest(),
            })
        })
        .collect::<Result<_>>()?;
    let detections = f
        .list("detections")?
        .into_iter()
        .map(|v| {
            let mut g = Fields::new(v, line, "detection")?;
            let b = g.req("bbox")?;
            Ok(Detection {
                bbox: g.bbox_of("bbox", &b)?,
                score: g.f64("score")?,
                class: g.string("class")?,
                instance_gt: g.opt_u64("instance_gt")?,
                extra: g.rest(),
            })
        })
        .collect::<Result<_>>()?;
    let gt_objects = f
        .list("gt_objects")?
        .into_iter()
        .map(|v| {
            let mut g = Fields::new(v, line, "gt object")?;
            let a = g.vec("axes_m", 3)?;
            if a.iter().any(|x| !(*x > 0.0)) {
                return Err(g.err("`axes_m` must be positive"));
            }
            Ok(GtObject {
                id: g.u64("id")?,
                pose_wo: g.pose("pose_wo")?,
                axes_m: Vector3::new(a[0], a[1], a[2]),
                dynamic: g.bool("dynamic")?,
                extra: g.rest(),
            })
        })
        .collect::<Result<_>>()?;
    let trial = trial_from(&mut f)?;
    Ok(FrameObservation {
        frame,
        time_s,
        camera,
        features,
        detections,
        gt_objects,
        trial,
        extra: f.rest(),
    })
}

pub fn frame_to_value(fr: &FrameObservation) -> Value {
    let mut cam = fr.camera.extra.clone();
    cam.insert("intrinsics".into(), nums(&fr.camera.intrinsics.to_array()));
    if let Some(p) = &fr.camera.pose_wc {
        cam.insert("pose_wc".into(), nums(&p.to_wire()));
    }
    if let Some(p) = &fr.camera.gt_pose_wc {
        cam.insert("gt_pose_wc".into(), nums(&p.to_wire()));
    }
    let features = fr
        .features
        .iter()
        .map(|ft| {
            let mut m = ft.extra.clone();
            m.insert("id".into(), ft.id.into());
            m.insert("u".into(), num(ft.u));
            m.insert("v".into(), num(ft.v));
            if let Some(d) = ft.depth_m {
                m.insert("depth_m".into(), num(d));
            }
            if let Some(i) = ft.instance {
                m.insert("instance".into(), i.into());
            }
            Value::Object(m)
        })
        .collect();
    let detections = fr
        .detections
        .iter()
        .map(|d| {
            let mut m = d.extra.clone();
            m.insert("bbox".into(), nums(&d.bbox.to_array()));
            m.insert("score".into(), num(d.score));
            m.insert("class".into(), d.class.clone().into());
            if let Some(i) = d.instance_gt {
                m.insert("instance_gt".into(), i.into());
            }
            Value::Object(m)
        })
        .collect();
    let gt = fr
        .gt_objects
        .iter()
        .map(|g| {
            let mut m = g.extra.clone();
            m.insert("id".into(), g.id.into());
            m.insert("pose_wo".into(), nums(&g.pose_wo.to_wire()));
            m.insert("axes_m".into(), nums(g.axes_m.as_slice()));
            m.insert("dynamic".into(), g.dynamic.into());
            Value::Object(m)
        })
        .collect();
    let mut m = fr.extra.clone();
    m.insert("frame".into(), fr.frame.into());
    m.insert("time_s".into(), num(fr.time_s));
    m.insert("camera".into(), Value::Object(cam));
    m.insert("features".into(), Value::Array(features));
    m.insert("detections".into(), Value::Array(detections));
    m.insert("gt_objects".into(), Value::Array(gt));
    trial_to(&mut m, &fr.trial);
    Value::Object(m)
}

pub fn estimate_from_value(v: Value, line: usize) -> Result<EstimateRecord> {
    let mut f = Fields::new(v, line, "estimate")?;
    let frame = f.u64("frame")?;
    let camera_pose = f.pose("camera_pose")?;
    let tracks = f
        .list("tracks")?
        .into_iter()
        .map(|v| {
            let mut g = Fields::new(v, line, "track")?;
            let vel = g.vec("velocity", 6)?;
            let label = g.string("motion_label")?;
            let motion_label = MotionLabel::parse(&label)
                .ok_or_else(|| g.err(format!("unknown motion label `{label}`")))?;
            let quadric = match g.sub("quadric", "quadric")? {
                None => None,
                Some(mut q) => {
                    let a = q.vec("axes", 3)?;
                    let p = q.pose("pose")?;
                    if a.iter().any(|x| !(*x > 0.0)) {
                        return Err(q.err("`axes` must be positive"));
                    }
                    Some(QuadricParams::new(
                        Vector3::new(a[0], a[1], a[2]),
                        p.translation,
                        p.rotation,
                    ))
                }
            };
            let bbox = g.take("bbox").map(|b| g.bbox_of("bbox", &b)).transpose()?;
            Ok(TrackEstimate {
                id: g.u64("id")?,
                pose_wo: g.pose("pose_wo")?,
                velocity: Twist::new(
                    Vector3::new(vel[0], vel[1], vel[2]),
                    Vector3::new(vel[3], vel[4], vel[5]),
                ),
                motion_label,
                quadric,
                bbox,
            })
        })
        .collect::<Result<_>>()?;
    let trial = trial_from(&mut f)?;
    Ok(EstimateRecord {
        frame,
        camera_pose,
        tracks,
        trial,
    })
}

pub fn estimate_to_value(e: &EstimateRecord) -> Value {
    let tracks = e
        .tracks
        .iter()
        .map(|t| {
            let mut m = Map::new();
            m.insert("id".into(), t.id.into());
            m.insert("pose_wo".into(), nums(&t.pose_wo.to_wire()));
            m.insert("velocity".into(), nums(t.velocity.to_vector().as_slice()));
            m.insert("motion_label".into(), t.motion_label.as_str().into());
            if let Some(q) = &t.quadric {
                let mut qm = Map::new();
                qm.insert("axes".into(), nums(q.axes.as_slice()));
                qm.insert("pose".into(), nums(&q.pose().to_wire()));
                m.insert("quadric".into(), Value::Object(qm));
            }
            if let Some(b) = &t.bbox {
                m.insert("bbox".into(), nums(&b.to_array()));
            }
            Value::Object(m)
        })
        .collect();
    let mut m = Map::new();
    m.insert("frame".into(), e.frame.into());
    m.insert("camera_pose".into(), nums(&e.camera_pose.to_wire()));
    m.insert("tracks".into(), Value::Array(tracks));
    trial_to(&mut m, &e.trial);
    Value::Object(m)
}

/// Streams records from line-delimited JSON, checking that frame ids
/// strictly increase. Blank lines are skipped.
pub struct JsonlReader<R, T> {
    lines: std::io::Lines<R>,
    line: usize,
    last_frame: Option<u64>,
    parse: fn(Value, usize) -> Result<T>,
    frame_of: fn(&T) -> u64,
}

impl<R: BufRead, T> Iterator for JsonlReader<R, T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Result<T>> {
        loop {
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(e.into())),
            };
            self.line += 1;
            if text.trim().is_empty() {
                continue;
            }
            let line = self.line;
            let rec = serde_json::from_str::<Value>(&text)
                .map_err(|e| Error::MalformedLine {
                    line,
                    reason: e.to_string(),
                })
                .and_then(|v| (self.parse)(v, line));
            return Some(rec.and_then(|r| {
                let id = (self.frame_of)(&r);
                if let Some(last) = self.last_frame {
                    if id <= last {
                        return Err(Error::NonMonotoneFrameId { last, got: id });
                    }
                }
                self.last_frame = Some(id);
                Ok(r)
            }));
        }
    }
}

pub fn dataset_reader<R: BufRead>(r: R) -> JsonlReader<R, FrameObservation> {
    JsonlReader {
        lines: r.lines(),
        line: 0,
        last_frame: None,
        parse: frame_from_value,
        frame_of: |f| f.frame,
    }
}

pub fn estimate_reader<R: BufRead>(r: R) -> JsonlReader<R, EstimateRecord> {
    JsonlReader {
        lines: r.lines(),
        line: 0,
        last_frame: None,
        parse: estimate_from_value,
        frame_of: |e| e.frame,
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))
}

pub fn read_dataset(path: &Path) -> Result<Vec<FrameObservation>> {
    dataset_reader(open(path)?).collect()
}

pub fn read_estimates(path: &Path) -> Result<Vec<EstimateRecord>> {
    estimate_reader(open(path)?).collect()
}

fn write_lines<W: Write>(mut w: W, values: impl Iterator<Item = Value>) -> Result<()> {
    for v in values {
        serde_json::to_writer(&mut w, &v).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset<W: Write>(w: W, frames: &[FrameObservation]) -> Result<()> {
    write_lines(w, frames.iter().map(frame_to_value))
}

pub fn write_estimates<W: Write>(w: W, records: &[EstimateRecord]) -> Result<()> {
    write_lines(w, records.iter().map(estimate_to_value))
}

pub fn write_dataset_file(path: &Path, frames: &[FrameObservation]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), frames)
}

pub fn write_estimates_file(path: &Path, records: &[EstimateRecord]) -> Result<()> {
    write_estimates(BufWriter::new(File::create(path)?), records)
}
