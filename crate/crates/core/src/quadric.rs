//! Dual-quadric algebra: ellipsoid parameterization, perspective projection to
//! dual conics, tangent bounding boxes, tangent-plane constraints and the
//! linear (SVD) closed-form initializer.
//!
//! Dual quadrics are kept normalized so that `Q[3][3] = -1`, dual conics so that
//! `C[2][2] = -1`.

use nalgebra::{DMatrix, Matrix3, Matrix3x4, Matrix4, SVector, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::se3::{so3_exp, so3_log, Intrinsics, Pose};

/// Ellipsoid with semi-axes, center and orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadricParams {
    pub axes: Vector3<f64>,
    pub translation: Vector3<f64>,
    pub rotation: Matrix3<f64>,
}

impl QuadricParams {
    pub fn new(axes: Vector3<f64>, translation: Vector3<f64>, rotation: Matrix3<f64>) -> Self {
        Self {
            axes,
            translation,
            rotation,
        }
    }

    pub fn sphere(radius: f64, center: Vector3<f64>) -> Self {
        Self {
            axes: Vector3::repeat(radius),
            translation: center,
            rotation: Matrix3::identity(),
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }

    pub fn is_valid(&self) -> bool {
        self.axes.iter().all(|a| *a > 0.0 && a.is_finite()) && self.pose().is_valid(1e-9)
    }

    /// The same ellipsoid expressed in the parent frame of `t`.
    pub fn transformed(&self, t: &Pose) -> QuadricParams {
        QuadricParams {
            axes: self.axes,
            translation: t.transform_point(&self.translation),
            rotation: t.rotation * self.rotation,
        }
    }

    /// Normalized radius `‖diag(1/a) Rᵀ (p - t)‖`; 1 on the surface.
    pub fn normalized_radius(&self, p: &Vector3<f64>) -> f64 {
        let local = self.rotation.transpose() * (p - self.translation);
        local.component_div(&self.axes).norm()
    }

    /// Local update over 9 degrees of freedom: log-axes additive, translation
    /// along the quadric's own axes, rotation right-multiplied.
    pub fn retract(&self, d: &SVector<f64, 9>) -> QuadricParams {
        QuadricParams {
            axes: Vector3::new(
                self.axes.x * d[0].exp(),
                self.axes.y * d[1].exp(),
                self.axes.z * d[2].exp(),
            ),
            translation: self.translation + self.rotation * Vector3::new(d[3], d[4], d[5]),
            rotation: self.rotation * so3_exp(&Vector3::new(d[6], d[7], d[8])),
        }
    }

    /// Inverse of [`retract`](Self::retract): the increment taking `self` to `other`.
    pub fn local(&self, other: &QuadricParams) -> Result<SVector<f64, 9>> {
        let la = other.axes.zip_map(&self.axes, |b, a| (b / a).ln());
        let t = self.rotation.transpose() * (other.translation - self.translation);
        let r = so3_log(&(self.rotation.transpose() * other.rotation))?;
        Ok(SVector::<f64, 9>::from_iterator(
            la.iter().chain(t.iter()).chain(r.iter()).copied(),
        ))
    }

    /// Semi-axes sorted ascending.
    pub fn sorted_axes(&self) -> Vector3<f64> {
        let mut a = [self.axes.x, self.axes.y, self.axes.z];
        a.sort_by(f64::total_cmp);
        Vector3::new(a[0], a[1], a[2])
    }
}

/// 4×4 symmetric dual quadric `Q*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuadric(pub Matrix4<f64>);

/// 3×3 symmetric dual conic `C*`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualConic(pub Matrix3<f64>);

impl DualConic {
    pub fn scaled(&self, s: f64) -> DualConic {
        DualConic(self.0 * s)
    }
}

/// Axis-aligned image box in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        Self {
            xmin,
            ymin,
            xmax,
            ymax,
        }
    }

    /// Builds a box from unordered corners.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            xmin: x0.min(x1),
            ymin: y0.min(y1),
            xmax: x0.max(x1),
            ymax: y0.max(y1),
        }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.xmin, self.ymin, self.xmax, self.ymax]
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.xmin, self.ymin, self.xmax, self.ymax)
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
            && self.xmin <= self.xmax
            && self.ymin <= self.ymax
    }

    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn contains(&self, u: &Vector2<f64>) -> bool {
        u.x >= self.xmin && u.x <= self.xmax && u.y >= self.ymin && u.y <= self.ymax
    }

    /// Intersection with the image `[0, width] × [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.xmin.clamp(0.0, width),
            self.ymin.clamp(0.0, height),
            self.xmax.clamp(0.0, width),
            self.ymax.clamp(0.0, height),
        )
    }
}

/// One row of the linear tangency system `A q = 0` over the ten independent
/// entries of a symmetric 4×4 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintRow(pub SVector<f64, 10>);

/// Index pairs of the upper triangle, row-major: the order used by
/// `ConstraintRow` and `vectorize_symmetric`.
const UPPER: [(usize, usize); 10] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (0, 3),
    (1, 1),
    (1, 2),
    (1, 3),
    (2, 2),
    (2, 3),
    (3, 3),
];

pub fn vectorize_symmetric(q: &Matrix4<f64>) -> SVector<f64, 10> {
    SVector::<f64, 10>::from_iterator(UPPER.iter().map(|&(i, j)| q[(i, j)]))
}

pub fn unvectorize_symmetric(v: &SVector<f64, 10>) -> Matrix4<f64> {
    let mut q = Matrix4::zeros();
    for (k, &(i, j)) in UPPER.iter().enumerate() {
        q[(i, j)] = v[k];
        q[(j, i)] = v[k];
    }
    q
}

pub fn params_to_dual_quadric(q: &QuadricParams) -> DualQuadric {
    let t = q.pose().to_matrix();
    let d = Matrix4::from_diagonal(&Vector4::new(
        q.axes.x * q.axes.x,
        q.axes.y * q.axes.y,
        q.axes.z * q.axes.z,
        -1.0,
    ));
    let m = t * d * t.transpose();
    DualQuadric(0.5 * (m + m.transpose()))
}

/// Recovers ellipsoid parameters; axes come back sorted ascending with the
/// rotation columns permuted to match.
pub fn dual_quadric_to_params(dq: &DualQuadric) -> Result<QuadricParams> {
    let q = dq.0;
    let w = q[(3, 3)];
    if !(w.abs() > 1e-300) || !q.iter().all(|x| x.is_finite()) {
        return Err(Error::NotAnEllipsoid);
    }
    let q = 0.5 * (q + q.transpose()) / (-w);
    let t = Vector3::new(-q[(0, 3)], -q[(1, 3)], -q[(2, 3)]);
    let block = q.fixed_view::<3, 3>(0, 0).into_owned() + t * t.transpose();
    let eig = nalgebra::SymmetricEigen::new(block);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // relative floor so the test is independent of metric scale
    let floor = 1e-12_f64.max(1e-14 * eig.eigenvalues.amax());
    if order.iter().any(|&i| !(eig.eigenvalues[i] > floor)) {
        return Err(Error::NotAnEllipsoid);
    }
    let axes = Vector3::new(
        eig.eigenvalues[order[0]].sqrt(),
        eig.eigenvalues[order[1]].sqrt(),
        eig.eigenvalues[order[2]].sqrt(),
    );
    let mut r = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    if r.determinant() < 0.0 {
        let c = -r.column(2).into_owned();
        r.set_column(2, &c);
    }
    Ok(QuadricParams {
        axes,
        translation: t,
        rotation: r,
    })
}

/// `K [I | 0] (T_wc)⁻¹`.
pub fn camera_matrix(k: &Intrinsics, t_wc: &Pose) -> Matrix3x4<f64> {
    let t_cw = t_wc.inverse();
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&t_cw.rotation);
    rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&t_cw.translation);
    k.matrix() * rt
}

/// Projects an ellipsoid given in the object frame `t_wo` into the camera
/// `t_wc`.
pub fn project_quadric(
    q: &QuadricParams,
    t_wo: &Pose,
    t_wc: &Pose,
    k: &Intrinsics,
) -> Result<DualConic> {
    let center_cam = t_wc
        .inverse()
        .transform_point(&t_wo.transform_point(&q.translation));
    if center_cam.z <= 1e-3 {
        return Err(Error::BehindCamera(center_cam.z));
    }
    let q_o = params_to_dual_quadric(q).0;
    let t = t_wo.to_matrix();
    let q_w = t * q_o * t.transpose();
    let p = camera_matrix(k, t_wc);
    let c = p * q_w * p.transpose();
    let c = 0.5 * (c + c.transpose());
    if !(c[(2, 2)] < 0.0) || !c.iter().all(|x| x.is_finite()) {
        return Err(Error::DegenerateProjection);
    }
    let c = DualConic(c / (-c[(2, 2)]));
    if tangent_discriminants(&c).is_none() {
        return Err(Error::DegenerateProjection);
    }
    Ok(c)
}

/// Discriminants of the vertical and horizontal tangency quadratics, after
/// normalizing by `C22²`. `None` if either is not positive.
fn tangent_discriminants(c: &DualConic) -> Option<(f64, f64)> {
    let m = c.0;
    let w = m[(2, 2)];
    if w == 0.0 || !w.is_finite() {
        return None;
    }
    let dx = (m[(0, 2)] / w).powi(2) - m[(0, 0)] / w;
    let dy = (m[(1, 2)] / w).powi(2) - m[(1, 1)] / w;
    (dx > 1e-12 && dy > 1e-12).then_some((dx, dy))
}

/// Axis-aligned box tangent to the ellipse described by `c`.
pub fn conic_to_bbox(c: &DualConic) -> Result<BBox> {
    let (dx, dy) = tangent_discriminants(c).ok_or(Error::NotAnEllipse)?;
    let m = c.0;
    let w = m[(2, 2)];
    let (cx, cy) = (m[(0, 2)] / w, m[(1, 2)] / w);
    let (sx, sy) = (dx.sqrt(), dy.sqrt());
    Ok(BBox::new(cx - sx, cy - sy, cx + sx, cy + sy))
}

pub fn conic_center(c: &DualConic) -> Result<Vector2<f64>> {
    let m = c.0;
    let w = m[(2, 2)];
    if w == 0.0 || !w.is_finite() {
        return Err(Error::DegenerateConic);
    }
    Ok(Vector2::new(m[(0, 2)] / w, m[(1, 2)] / w))
}

/// Back-projects the four box edges to planes through the camera center,
/// each scaled to a unit normal.
pub fn bbox_to_tangent_planes(b: &BBox, k: &Intrinsics, t_wc: &Pose) -> [Vector4<f64>; 4] {
    let p = camera_matrix(k, t_wc);
    let lines = [
        Vector3::new(1.0, 0.0, -b.xmin),
        Vector3::new(1.0, 0.0, -b.xmax),
        Vector3::new(0.0, 1.0, -b.ymin),
        Vector3::new(0.0, 1.0, -b.ymax),
    ];
    lines.map(|l| {
        let pi = p.transpose() * l;
        let n = pi.fixed_rows::<3>(0).norm();
        pi / n
    })
}

/// Coefficients of `πᵀ Q π` over the upper-triangular entries of `Q`.
pub fn plane_constraint_row(pi: &Vector4<f64>) -> ConstraintRow {
    ConstraintRow(SVector::<f64, 10>::from_iterator(UPPER.iter().map(
        |&(i, j)| {
            if i == j {
                pi[i] * pi[i]
            } else {
                2.0 * pi[i] * pi[j]
            }
        },
    )))
}

/// Linear closed-form ellipsoid from box observations: stack the tangency
/// rows of every view and take the right singular vector of the smallest
/// singular value.
pub fn svd_closed_form_init(obs: &[(BBox, Pose)], k: &Intrinsics) -> Result<QuadricParams> {
    if obs.len() < 3 {
        return Err(Error::InsufficientViews(obs.len()));
    }
    let rows: Vec<ConstraintRow> = obs
        .iter()
        .flat_map(|(b, t_wc)| bbox_to_tangent_planes(b, k, t_wc))
        .map(|pi| plane_constraint_row(&pi))
        .collect();
    let a = DMatrix::from_fn(rows.len(), 10, |r, c| rows[r].0[c]);
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::NotAnEllipsoid)?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(Error::NotAnEllipsoid)?;
    let v = SVector::<f64, 10>::from_iterator(v_t.row(imin).iter().copied());
    dual_quadric_to_params(&DualQuadric(unvectorize_symmetric(&v)))
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn bbox_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.xmax.min(b.xmax) - a.xmin.max(b.xmin)).max(0.0);
    let ih = (a.ymax.min(b.ymax) - a.ymin.max(b.ymin)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Tangent box of the projected ellipsoid.
pub fn project_bbox(q: &QuadricParams, t_wo: &Pose, t_wc: &Pose, k: &Intrinsics) -> Result<BBox> {
    conic_to_bbox(&project_quadric(q, t_wo, t_wc, k)?)
}
