//! Residuals and Jacobians of the joint estimation problem.
//!
//! Pose Jacobians are taken with respect to right-multiplied increments
//! `T ← T · exp(δ)`, `δ = [ρ; φ]`. Quadric Jacobians use the 9-DoF local update
//! of [`QuadricParams::retract`].

use nalgebra::{
    DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, SMatrix, SVector, Vector2, Vector3,
    Vector4, Vector6,
};

use crate::error::{Error, Result};
use crate::quadric::{project_bbox, BBox, QuadricParams};
use crate::se3::{
    pose_between, project, project_jacobian, roll_pitch, se3_log, skew, Intrinsics, Pose, Twist,
};

/// Robust kernel applied to a whitened residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RobustKernel {
    Huber { delta: f64 },
    TStudent { nu: f64 },
}

/// Robust kernel configuration: Huber for box residuals, Student-t for feature
/// residuals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustConfig {
    pub huber_delta: f64,
    pub t_nu: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        // 2.447 is the 95% gate of a 2-dof chi distribution, in units of sigma
        Self {
            huber_delta: 2.447,
            t_nu: 5.0,
        }
    }
}

pub fn huber_weight(r_norm: f64, delta: f64) -> f64 {
    if r_norm <= delta {
        1.0
    } else {
        delta / r_norm
    }
}

/// Huber cost of a squared norm `s`.
pub fn huber_rho(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

impl RobustKernel {
    /// IRLS weight for a whitened residual norm, 1 at zero.
    pub fn weight(&self, r_norm: f64) -> f64 {
        match *self {
            RobustKernel::Huber { delta } => huber_weight(r_norm, delta),
            // (ν + d)/(ν + r²) rescaled so that w(0) = 1
            RobustKernel::TStudent { nu } => nu / (nu + r_norm * r_norm),
        }
    }

    /// Cost of a squared whitened norm; its derivative is `weight`.
    pub fn rho(&self, s: f64) -> f64 {
        match *self {
            RobustKernel::Huber { delta } => huber_rho(s, delta),
            RobustKernel::TStudent { nu } => nu * (s / nu).ln_1p(),
        }
    }
}

pub fn robust_weight(r_norm: f64, kernel: &RobustKernel) -> f64 {
    kernel.weight(r_norm)
}

/// Camera-frame point with its derivatives.
struct CameraPoint {
    p: Vector3<f64>,
    d_camera: Matrix3x6<f64>,
}

fn camera_point(t_wc: &Pose, x_w: &Vector3<f64>) -> CameraPoint {
    let p = t_wc.inverse().transform_point(x_w);
    let mut d_camera = Matrix3x6::zeros();
    d_camera
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(-Matrix3::identity()));
    d_camera.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&p));
    CameraPoint { p, d_camera }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaticReprojection {
    pub residual: Vector2<f64>,
    pub d_camera: Matrix2x6<f64>,
    pub d_point: Matrix2x3<f64>,
    /// Depth of the landmark in the camera, for optional depth residuals.
    pub depth: f64,
    pub depth_d_camera: SMatrix<f64, 1, 6>,
    pub depth_d_point: SMatrix<f64, 1, 3>,
}

/// `z - π(K, T_wc⁻¹ X_w)` with Jacobians for the camera and the landmark.
pub fn feature_reproj_static(
    z: &Vector2<f64>,
    t_wc: &Pose,
    x_w: &Vector3<f64>,
    k: &Intrinsics,
) -> Result<StaticReprojection> {
    let cp = camera_point(t_wc, x_w);
    let u = project(k, &cp.p)?;
    let jp = project_jacobian(k, &cp.p);
    let d_point_cam = t_wc.rotation.transpose();
    Ok(StaticReprojection {
        residual: z - u,
        d_camera: -(jp * cp.d_camera),
        d_point: -(jp * d_point_cam),
        depth: cp.p.z,
        depth_d_camera: cp.d_camera.fixed_rows::<1>(2).into_owned(),
        depth_d_point: d_point_cam.fixed_rows::<1>(2).into_owned(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicReprojection {
    pub residual: Vector2<f64>,
    pub d_camera: Matrix2x6<f64>,
    pub d_object: Matrix2x6<f64>,
    pub d_point: Matrix2x3<f64>,
    pub depth: f64,
    pub depth_d_camera: SMatrix<f64, 1, 6>,
    pub depth_d_object: SMatrix<f64, 1, 6>,
    pub depth_d_point: SMatrix<f64, 1, 3>,
}

/// `z - π(K, T_wc⁻¹ T_wo f_o)` for a point fixed in the object frame.
pub fn feature_reproj_dynamic(
    z: &Vector2<f64>,
    t_wc: &Pose,
    t_wo: &Pose,
    f_o: &Vector3<f64>,
    k: &Intrinsics,
) -> Result<DynamicReprojection> {
    let x_w = t_wo.transform_point(f_o);
    let cp = camera_point(t_wc, &x_w);
    let u = project(k, &cp.p)?;
    let jp = project_jacobian(k, &cp.p);
    let r_cw = t_wc.rotation.transpose();
    let mut dxw_dobj = Matrix3x6::zeros();
    dxw_dobj
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&t_wo.rotation);
    dxw_dobj
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-(t_wo.rotation * skew(f_o))));
    let dp_dobj = r_cw * dxw_dobj;
    let dp_dpoint = r_cw * t_wo.rotation;
    Ok(DynamicReprojection {
        residual: z - u,
        d_camera: -(jp * cp.d_camera),
        d_object: -(jp * dp_dobj),
        d_point: -(jp * dp_dpoint),
        depth: cp.p.z,
        depth_d_camera: cp.d_camera.fixed_rows::<1>(2).into_owned(),
        depth_d_object: dp_dobj.fixed_rows::<1>(2).into_owned(),
        depth_d_point: dp_dpoint.fixed_rows::<1>(2).into_owned(),
    })
}

/// Relative motion `H_k = T_k · T_{k-1}⁻¹` of an object between two frames.
pub fn world_motion(prev: &Pose, curr: &Pose) -> Pose {
    curr.compose(&prev.inverse())
}

fn motion_value(p0: &Pose, p1: &Pose, p2: &Pose) -> Result<Vector6<f64>> {
    let h1 = world_motion(p0, p1);
    let h2 = world_motion(p1, p2);
    Ok(se3_log(&h1.inverse().compose(&h2))?.to_vector())
}

/// Constant-velocity residual `log(H_{k-1}⁻¹ H_k)` over three consecutive
/// object poses, with central-difference Jacobians.
pub fn motion_model_residual(
    p0: &Pose,
    p1: &Pose,
    p2: &Pose,
) -> Result<(Vector6<f64>, [SMatrix<f64, 6, 6>; 3])> {
    let r = motion_value(p0, p1, p2)?;
    let mut jac = [SMatrix::<f64, 6, 6>::zeros(); 3];
    let poses = [*p0, *p1, *p2];
    for (slot, j) in jac.iter_mut().enumerate() {
        for c in 0..6 {
            let h = 1e-6;
            let mut d = Vector6::zeros();
            d[c] = h;
            let mut plus = poses;
            plus[slot] = poses[slot].retract(&Twist::from_vector(&d));
            let mut minus = poses;
            minus[slot] = poses[slot].retract(&Twist::from_vector(&(-d)));
            let rp = motion_value(&plus[0], &plus[1], &plus[2])?;
            let rm = motion_value(&minus[0], &minus[1], &minus[2])?;
            j.set_column(c, &((rp - rm) / (2.0 * h)));
        }
    }
    Ok((r, jac))
}

fn between_value(measured: &Pose, a: &Pose, b: &Pose) -> Result<Vector6<f64>> {
    Ok(se3_log(&measured.inverse().compose(&a.inverse().compose(b)))?.to_vector())
}

/// Relative-pose residual `log(measured⁻¹ · a⁻¹ · b)` with central-difference
/// Jacobians for both poses.
pub fn pose_between_residual(
    measured: &Pose,
    a: &Pose,
    b: &Pose,
) -> Result<(Vector6<f64>, SMatrix<f64, 6, 6>, SMatrix<f64, 6, 6>)> {
    let r = between_value(measured, a, b)?;
    let h = 1e-6;
    let mut ja = SMatrix::<f64, 6, 6>::zeros();
    let mut jb = SMatrix::<f64, 6, 6>::zeros();
    for c in 0..6 {
        let mut d = Vector6::zeros();
        d[c] = h;
        let (tp, tm) = (Twist::from_vector(&d), Twist::from_vector(&(-d)));
        let col = (between_value(measured, &a.retract(&tp), b)?
            - between_value(measured, &a.retract(&tm), b)?)
            / (2.0 * h);
        ja.set_column(c, &col);
        let col = (between_value(measured, a, &b.retract(&tp))?
            - between_value(measured, a, &b.retract(&tm))?)
            / (2.0 * h);
        jb.set_column(c, &col);
    }
    Ok((r, ja, jb))
}

/// Observed box minus the tangent box of the projected quadric.
pub fn quadric_bbox_value(
    b: &BBox,
    q: &QuadricParams,
    t_wo: &Pose,
    t_wc: &Pose,
    k: &Intrinsics,
) -> Result<Vector4<f64>> {
    Ok(b.to_vector() - project_bbox(q, t_wo, t_wc, k)?.to_vector())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadricBoxResidual {
    pub residual: Vector4<f64>,
    pub d_quadric: SMatrix<f64, 4, 9>,
    pub d_object: SMatrix<f64, 4, 6>,
    pub d_camera: SMatrix<f64, 4, 6>,
}

/// Box residual with central-difference Jacobians; `step` is the increment
/// used for every local coordinate.
pub fn quadric_bbox_residual_with_step(
    b: &BBox,
    q: &QuadricParams,
    t_wo: &Pose,
    t_wc: &Pose,
    k: &Intrinsics,
    step: f64,
) -> Result<QuadricBoxResidual> {
    let residual = quadric_bbox_value(b, q, t_wo, t_wc, k).map_err(degenerate)?;
    let mut d_quadric = SMatrix::<f64, 4, 9>::zeros();
    for c in 0..9 {
        let mut d = SVector::<f64, 9>::zeros();
        d[c] = step;
        let rp = quadric_bbox_value(b, &q.retract(&d), t_wo, t_wc, k).map_err(degenerate)?;
        d[c] = -step;
        let rm = quadric_bbox_value(b, &q.retract(&d), t_wo, t_wc, k).map_err(degenerate)?;
        d_quadric.set_column(c, &((rp - rm) / (2.0 * step)));
    }
    let pose_jac = |which: usize| -> Result<SMatrix<f64, 4, 6>> {
        let mut j = SMatrix::<f64, 4, 6>::zeros();
        for c in 0..6 {
            let mut d = Vector6::zeros();
            d[c] = step;
            let tp = Twist::from_vector(&d);
            let tm = Twist::from_vector(&(-d));
            let (rp, rm) = if which == 0 {
                (
                    quadric_bbox_value(b, q, &t_wo.retract(&tp), t_wc, k),
                    quadric_bbox_value(b, q, &t_wo.retract(&tm), t_wc, k),
                )
            } else {
                (
                    quadric_bbox_value(b, q, t_wo, &t_wc.retract(&tp), k),
                    quadric_bbox_value(b, q, t_wo, &t_wc.retract(&tm), k),
                )
            };
            j.set_column(
                c,
                &((rp.map_err(degenerate)? - rm.map_err(degenerate)?) / (2.0 * step)),
            );
        }
        Ok(j)
    };
    Ok(QuadricBoxResidual {
        residual,
        d_quadric,
        d_object: pose_jac(0)?,
        d_camera: pose_jac(1)?,
    })
}

fn degenerate(e: Error) -> Error {
    match e {
        Error::BehindCamera(_) | Error::NotAnEllipse => Error::DegenerateProjection,
        other => other,
    }
}

pub fn quadric_bbox_residual(
    b: &BBox,
    q: &QuadricParams,
    t_wo: &Pose,
    t_wc: &Pose,
    k: &Intrinsics,
) -> Result<QuadricBoxResidual> {
    quadric_bbox_residual_with_step(b, q, t_wo, t_wc, k, 1e-6)
}

/// `D - D̃` over semi-axes.
pub fn prior_size_residual(axes: &Vector3<f64>, prior: &Vector3<f64>) -> Vector3<f64> {
    axes - prior
}

/// Height offset, roll and pitch of an object pose relative to the ground
/// plane `z = h`.
pub fn planar_motion_residual(t_wo: &Pose, ref_plane_height: f64) -> Vector3<f64> {
    let (roll, pitch) = roll_pitch(&t_wo.rotation);
    Vector3::new(t_wo.translation.z - ref_plane_height, roll, pitch)
}

fn planar_jacobian(t_wo: &Pose, h: f64) -> SMatrix<f64, 3, 6> {
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    for c in 0..6 {
        let mut d = Vector6::zeros();
        d[c] = 1e-6;
        let rp = planar_motion_residual(&t_wo.retract(&Twist::from_vector(&d)), h);
        let rm = planar_motion_residual(&t_wo.retract(&Twist::from_vector(&(-d))), h);
        j.set_column(c, &((rp - rm) / 2e-6));
    }
    j
}

/// Identifier of an optimization state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKey {
    /// Camera pose `T_wc` at a frame.
    Camera(u64),
    /// Object pose `T_wo` of a track at a frame.
    Object { track: u64, frame: u64 },
    /// Static landmark in the world frame.
    Landmark(u64),
    /// Landmark fixed in an object's frame.
    ObjectPoint { track: u64, feature: u64 },
    /// Object-frame ellipsoid of a track.
    Quadric(u64),
}

impl VarKey {
    pub fn dim(&self) -> usize {
        match self {
            VarKey::Camera(_) | VarKey::Object { .. } => 6,
            VarKey::Landmark(_) | VarKey::ObjectPoint { .. } => 3,
            VarKey::Quadric(_) => 9,
        }
    }

    pub fn is_point(&self) -> bool {
        matches!(self, VarKey::Landmark(_) | VarKey::ObjectPoint { .. })
    }

    pub fn frame(&self) -> Option<u64> {
        match *self {
            VarKey::Camera(f) | VarKey::Object { frame: f, .. } => Some(f),
            _ => None,
        }
    }
}

/// Read access to state values.
pub trait StateView {
    fn pose(&self, key: &VarKey) -> Option<&Pose>;
    fn point(&self, key: &VarKey) -> Option<&Vector3<f64>>;
    fn quadric(&self, key: &VarKey) -> Option<&QuadricParams>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    /// keys: camera, landmark
    StaticFeature {
        z: Vector2<f64>,
        depth: Option<f64>,
        k: Intrinsics,
    },
    /// keys: camera, object, object point
    DynamicFeature {
        z: Vector2<f64>,
        depth: Option<f64>,
        k: Intrinsics,
    },
    /// keys: object poses at k-2, k-1, k
    MotionModel,
    /// keys: quadric, object, camera
    QuadricBox { bbox: BBox, k: Intrinsics },
    /// keys: quadric
    PriorSize { prior: Vector3<f64> },
    /// keys: object
    Planar { height: f64 },
    /// keys: one pose
    PosePrior { pose: Pose },
    /// keys: poses a, b; residual `log(measured⁻¹ · a⁻¹ · b)`
    PoseBetween { measured: Pose },
}

/// A residual block: kind and measurement, connected states, diagonal
/// square-root information and optional robust kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Factor {
    pub kind: FactorKind,
    pub keys: Vec<VarKey>,
    pub sqrt_info: DVector<f64>,
    pub robust: Option<RobustKernel>,
}

/// Whitened, robustified residual and Jacobians of one factor.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    pub jacobians: Vec<DMatrix<f64>>,
    pub cost: f64,
}

impl Factor {
    pub fn dim(&self) -> usize {
        self.sqrt_info.len()
    }

    /// Residual and Jacobians before whitening.
    pub fn raw(&self, s: &dyn StateView) -> Result<(DVector<f64>, Vec<DMatrix<f64>>)> {
        let missing = |k: &VarKey| Error::DanglingFactor(format!("{k:?}"));
        let pose = |i: usize| s.pose(&self.keys[i]).ok_or_else(|| missing(&self.keys[i]));
        let point = |i: usize| s.point(&self.keys[i]).ok_or_else(|| missing(&self.keys[i]));
        match &self.kind {
            FactorKind::StaticFeature { z, depth, k } => {
                let r = feature_reproj_static(z, pose(0)?, point(1)?, k)?;
                let mut res = DVector::from_column_slice(r.residual.as_slice());
                let mut jc = DMatrix::from_column_slice(2, 6, r.d_camera.as_slice());
                let mut jp = DMatrix::from_column_slice(2, 3, r.d_point.as_slice());
                if let Some(d) = depth {
                    res = res.push(d - r.depth);
                    jc = jc.insert_row(2, 0.0);
                    jc.row_mut(2).copy_from(&(-r.depth_d_camera));
                    jp = jp.insert_row(2, 0.0);
                    jp.row_mut(2).copy_from(&(-r.depth_d_point));
                }
                Ok((res, vec![jc, jp]))
            }
            FactorKind::DynamicFeature { z, depth, k } => {
                let r = feature_reproj_dynamic(z, pose(0)?, pose(1)?, point(2)?, k)?;
                let mut res = DVector::from_column_slice(r.residual.as_slice());
                let mut jc = DMatrix::from_column_slice(2, 6, r.d_camera.as_slice());
                let mut jo = DMatrix::from_column_slice(2, 6, r.d_object.as_slice());
                let mut jp = DMatrix::from_column_slice(2, 3, r.d_point.as_slice());
                if let Some(d) = depth {
                    res = res.push(d - r.depth);
                    jc = jc.insert_row(2, 0.0);
                    jc.row_mut(2).copy_from(&(-r.depth_d_camera));
                    jo = jo.insert_row(2, 0.0);
                    jo.row_mut(2).copy_from(&(-r.depth_d_object));
                    jp = jp.insert_row(2, 0.0);
                    jp.row_mut(2).copy_from(&(-r.depth_d_point));
                }
                Ok((res, vec![jc, jo, jp]))
            }
            FactorKind::MotionModel => {
                let (r, j) = motion_model_residual(pose(0)?, pose(1)?, pose(2)?)?;
                Ok((
                    DVector::from_column_slice(r.as_slice()),
                    j.iter()
                        .map(|m| DMatrix::from_column_slice(6, 6, m.as_slice()))
                        .collect(),
                ))
            }
            FactorKind::QuadricBox { bbox, k } => {
                let q = s
                    .quadric(&self.keys[0])
                    .ok_or_else(|| missing(&self.keys[0]))?;
                let r = quadric_bbox_residual(bbox, q, pose(1)?, pose(2)?, k)?;
                Ok((
                    DVector::from_column_slice(r.residual.as_slice()),
                    vec![
                        DMatrix::from_column_slice(4, 9, r.d_quadric.as_slice()),
                        DMatrix::from_column_slice(4, 6, r.d_object.as_slice()),
                        DMatrix::from_column_slice(4, 6, r.d_camera.as_slice()),
                    ],
                ))
            }
            FactorKind::PriorSize { prior } => {
                let q = s
                    .quadric(&self.keys[0])
                    .ok_or_else(|| missing(&self.keys[0]))?;
                let r = prior_size_residual(&q.axes, prior);
                let mut j = DMatrix::zeros(3, 9);
                for i in 0..3 {
                    j[(i, i)] = q.axes[i];
                }
                Ok((DVector::from_column_slice(r.as_slice()), vec![j]))
            }
            FactorKind::Planar { height } => {
                let p = pose(0)?;
                let r = planar_motion_residual(p, *height);
                let j = planar_jacobian(p, *height);
                Ok((
                    DVector::from_column_slice(r.as_slice()),
                    vec![DMatrix::from_column_slice(3, 6, j.as_slice())],
                ))
            }
            FactorKind::PosePrior { pose: target } => {
                // δ = log(target⁻¹ T); d δ / d(right increment) ≈ I near the target
                let r = pose_between(target, pose(0)?)?;
                Ok((
                    DVector::from_column_slice(r.to_vector().as_slice()),
                    vec![DMatrix::identity(6, 6)],
                ))
            }
            FactorKind::PoseBetween { measured } => {
                let (r, ja, jb) = pose_between_residual(measured, pose(0)?, pose(1)?)?;
                Ok((
                    DVector::from_column_slice(r.as_slice()),
                    vec![
                        DMatrix::from_column_slice(6, 6, ja.as_slice()),
                        DMatrix::from_column_slice(6, 6, jb.as_slice()),
                    ],
                ))
            }
        }
    }

    /// Whitened residual with IRLS weighting applied to residual and Jacobians.
    pub fn linearize(&self, s: &dyn StateView) -> Result<Linearization> {
        let (mut r, mut jac) = self.raw(s)?;
        r.component_mul_assign(&self.sqrt_info);
        for j in &mut jac {
            for (mut row, w) in j.row_iter_mut().zip(self.sqrt_info.iter()) {
                row *= *w;
            }
        }
        let sq = r.norm_squared();
        let (cost, w) = match &self.robust {
            Some(kernel) => (kernel.rho(sq), kernel.weight(sq.sqrt())),
            None => (sq, 1.0),
        };
        if w != 1.0 {
            let sw = w.sqrt();
            r *= sw;
            for j in &mut jac {
                *j *= sw;
            }
        }
        Ok(Linearization {
            residual: r,
            jacobians: jac,
            cost,
        })
    }

    /// Robust cost only.
    pub fn cost(&self, s: &dyn StateView) -> Result<f64> {
        let (r, _) = self.raw(s)?;
        let sq = r.component_mul(&self.sqrt_info).norm_squared();
        Ok(match &self.robust {
            Some(kernel) => kernel.rho(sq),
            None => sq,
        })
    }
}
