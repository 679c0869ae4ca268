//! Object-centric quadric initialization: a coarse sphere placed at the
//! object's point centroid with a prior scale (from an oriented bounding box
//! or from stereo depth and box size), refined against the accumulated box
//! detections with a size prior keeping the shape bounded.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::factors::{huber_rho, huber_weight};
use crate::quadric::{project_bbox, BBox, QuadricParams};
use crate::se3::{Intrinsics, Pose};

/// Object points gathered in one frame.
#[derive(Debug, Clone, Default)]
pub struct ObjectPointSample {
    pub points: Vec<Vector3<f64>>,
    pub frame: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBBox {
    pub center: Vector3<f64>,
    /// Columns are the box axes, ordered by ascending half extent.
    pub axes_dirs: Matrix3<f64>,
    pub half_extents: Vector3<f64>,
    pub uncertainty: Vector3<f64>,
}

/// Prior scale of an object: isotropic radius or per-axis semi-axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitPrior {
    Radius(f64),
    Axes(Vector3<f64>),
}

impl InitPrior {
    pub fn axes(&self) -> Vector3<f64> {
        match self {
            InitPrior::Radius(r) => Vector3::repeat(*r),
            InitPrior::Axes(a) => *a,
        }
    }

    pub fn mean_radius(&self) -> f64 {
        self.axes().mean()
    }

    pub fn is_valid(&self) -> bool {
        self.axes().iter().all(|a| *a > 0.0 && a.is_finite())
    }
}

pub fn centroid(pts: &ObjectPointSample) -> Result<Vector3<f64>> {
    centroid_of(&pts.points)
}

pub fn centroid_of(points: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    if points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    Ok(points.iter().sum::<Vector3<f64>>() / points.len() as f64)
}

/// Depth of the object's point centroid and box size in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoObservation {
    pub depth: f64,
    pub width: f64,
    pub height: f64,
}

/// Initial radius `(1/4n) Σ d_k (w_k/fx + h_k/fy)`.
pub fn stereo_initial_radius(obs: &[StereoObservation], k: &Intrinsics) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let sum: f64 = obs
        .iter()
        .map(|o| o.depth * (o.width / k.fx + o.height / k.fy))
        .sum();
    Ok(sum / (4.0 * obs.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObbConfig {
    pub max_iters: usize,
    pub eps: f64,
    pub omega: f64,
    pub seed: u64,
}

impl Default for ObbConfig {
    fn default() -> Self {
        Self {
            max_iters: 64,
            eps: 0.05,
            omega: 0.1,
            seed: 0,
        }
    }
}

/// PCA box over `points`, axes sorted by ascending half extent.
fn fit_pca_box(points: &[Vector3<f64>]) -> Option<OrientedBBox> {
    let mean = centroid_of(points).ok()?;
    let cov = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum::<Matrix3<f64>>()
        / points.len() as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let max = eig.eigenvalues.amax();
    if !(max > 0.0) || eig.eigenvalues.min() <= 1e-12 * max {
        return None;
    }
    let dirs = eig.eigenvectors;
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        let s = dirs.transpose() * (p - mean);
        lo = lo.inf(&s);
        hi = hi.sup(&s);
    }
    let half = (hi - lo) * 0.5;
    let center = mean + dirs * ((hi + lo) * 0.5);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| half[a].total_cmp(&half[b]));
    let mut axes_dirs = Matrix3::from_columns(&order.map(|i| dirs.column(i).into_owned()));
    if axes_dirs.determinant() < 0.0 {
        let c = -axes_dirs.column(2).into_owned();
        axes_dirs.set_column(2, &c);
    }
    Some(OrientedBBox {
        center,
        axes_dirs,
        half_extents: Vector3::new(half[order[0]], half[order[1]], half[order[2]]),
        uncertainty: Vector3::zeros(),
    })
}

/// Distance from `p` to the surface of `obb`.
fn surface_distance(obb: &OrientedBBox, p: &Vector3<f64>) -> f64 {
    let s = obb.axes_dirs.transpose() * (p - obb.center);
    let excess = s.abs() - obb.half_extents;
    if excess.max() > 0.0 {
        excess.map(|e| e.max(0.0)).norm()
    } else {
        -excess.max()
    }
}

fn inliers(obb: &OrientedBBox, points: &[Vector3<f64>], eps: f64) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| surface_distance(obb, &points[i]) <= eps)
        .collect()
}

/// Refit on the consensus set until it stops growing.
fn local_refit(
    mut obb: OrientedBBox,
    points: &[Vector3<f64>],
    eps: f64,
) -> (OrientedBBox, Vec<usize>) {
    let mut set = inliers(&obb, points, eps);
    for _ in 0..10 {
        if set.len() < 8 {
            break;
        }
        let subset: Vec<_> = set.iter().map(|&i| points[i]).collect();
        let Some(refit) = fit_pca_box(&subset) else {
            break;
        };
        let next = inliers(&refit, points, eps);
        if next.len() < set.len() {
            break;
        }
        let done = next == set;
        obb = refit;
        set = next;
        if done {
            break;
        }
    }
    (obb, set)
}

/// RANSAC oriented-bounding-box fit. The returned half extents blend the mean
/// of the accepted candidates with their spread, `mean + ω·std`.
pub fn fit_obb_ransac(pts: &ObjectPointSample, cfg: &ObbConfig) -> Result<OrientedBBox> {
    let points = &pts.points;
    if points.len() < 8 {
        return Err(Error::TooFewPoints(points.len()));
    }
    if fit_pca_box(points).is_none() {
        return Err(Error::DegenerateCloud);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample_size = (points.len() / 10).max(8).min(points.len());
    let mut candidates: Vec<(OrientedBBox, usize)> = Vec::new();
    for _ in 0..cfg.max_iters.max(1) {
        let idx = sample(&mut rng, points.len(), sample_size);
        let subset: Vec<_> = idx.iter().map(|i| points[i]).collect();
        let Some(candidate) = fit_pca_box(&subset) else {
            continue;
        };
        let (candidate, set) = local_refit(candidate, points, cfg.eps);
        candidates.push((candidate, set.len()));
    }
    // accepted set: every candidate reaching the largest consensus
    let top = candidates
        .iter()
        .map(|c| c.1)
        .max()
        .ok_or(Error::DegenerateCloud)?;
    let accepted: Vec<Vector3<f64>> = candidates
        .iter()
        .filter(|c| c.1 == top)
        .map(|c| c.0.half_extents)
        .collect();
    let mut obb = candidates
        .into_iter()
        .find(|c| c.1 == top)
        .map(|c| c.0)
        .ok_or(Error::DegenerateCloud)?;
    let n = accepted.len() as f64;
    let mean = accepted.iter().sum::<Vector3<f64>>() / n;
    let var = accepted
        .iter()
        .map(|a| (a - mean).component_mul(&(a - mean)))
        .sum::<Vector3<f64>>()
        / n;
    let std = var.map(f64::sqrt);
    obb.half_extents = mean + std * cfg.omega;
    obb.uncertainty = std;
    Ok(obb)
}

/// Sphere of the prior's mean radius at `center`.
pub fn init_sphere(center: Vector3<f64>, prior: &InitPrior) -> QuadricParams {
    QuadricParams::sphere(prior.mean_radius(), center)
}

/// One box detection of an object, with the camera and object poses at the time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxObservation {
    pub bbox: BBox,
    pub t_wc: Pose,
    pub t_wo: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Weight of the squared size-prior error, in px² per m².
    pub prior_size_weight: f64,
    /// Huber threshold on the per-detection box error, px.
    pub huber_delta_px: f64,
    pub max_iters: usize,
    /// When set, the prior weight is re-estimated as `σ̂² / σ_a²` from the box
    /// residual variance σ̂² of the previous pass, with σ_a this value in m.
    pub prior_axis_sigma_m: Option<f64>,
    /// Passes used when the prior weight is re-estimated.
    pub passes: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            prior_size_weight: 10.0,
            huber_delta_px: 2.447 * 4.0,
            max_iters: 50,
            prior_axis_sigma_m: None,
            passes: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineReport {
    pub params: QuadricParams,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Size-prior weight in effect at the end, in px² per m².
    pub prior_weight: f64,
    /// Observations discarded because the initial projection was degenerate.
    pub dropped: usize,
}

struct RefineProblem<'a> {
    obs: Vec<&'a BoxObservation>,
    k: &'a Intrinsics,
    prior: Vector3<f64>,
    prior_weight: f64,
    cfg: &'a RefineConfig,
}

impl RefineProblem<'_> {
    fn raw_residuals(&self, q: &QuadricParams) -> Option<Vec<SVector<f64, 4>>> {
        self.obs
            .iter()
            .map(|o| {
                project_bbox(q, &o.t_wo, &o.t_wc, self.k)
                    .ok()
                    .map(|b| o.bbox.to_vector() - b.to_vector())
            })
            .collect()
    }

    fn prior_residual(&self, q: &QuadricParams) -> Vector3<f64> {
        (q.axes - self.prior) * self.prior_weight.sqrt()
    }

    fn cost(&self, q: &QuadricParams) -> f64 {
        let Some(res) = self.raw_residuals(q) else {
            return f64::INFINITY;
        };
        let delta = self.cfg.huber_delta_px;
        res.iter()
            .map(|r| huber_rho(r.norm_squared(), delta))
            .sum::<f64>()
            + self.prior_residual(q).norm_squared()
    }

    /// Gauss-Newton system with IRLS weights; Jacobians by central differences.
    fn normal_equations(&self, q: &QuadricParams) -> Option<(SMatrix<f64, 9, 9>, SVector<f64, 9>)> {
        let res = self.raw_residuals(q)?;
        let h = 1e-6;
        let mut plus = Vec::with_capacity(9);
        let mut minus = Vec::with_capacity(9);
        for j in 0..9 {
            let mut d = SVector::<f64, 9>::zeros();
            d[j] = h;
            plus.push(self.raw_residuals(&q.retract(&d))?);
            d[j] = -h;
            minus.push(self.raw_residuals(&q.retract(&d))?);
        }
        let mut hess = SMatrix::<f64, 9, 9>::zeros();
        let mut grad = SVector::<f64, 9>::zeros();
        for (i, r) in res.iter().enumerate() {
            let jac = SMatrix::<f64, 4, 9>::from_fn(|row, col| {
                (plus[col][i][row] - minus[col][i][row]) / (2.0 * h)
            });
            let w = huber_weight(r.norm(), self.cfg.huber_delta_px);
            hess += jac.transpose() * jac * w;
            grad += jac.transpose() * r * w;
        }
        // prior on the axes: d(a_i)/d(log a_i) = a_i
        let pr = self.prior_residual(q);
        let s = self.prior_weight.sqrt();
        for i in 0..3 {
            let j = s * q.axes[i];
            hess[(i, i)] += j * j;
            grad[i] += j * pr[i];
        }
        Some((hess, grad))
    }
}

/// Refines an ellipsoid against box detections and a size prior with
/// Levenberg-Marquardt over 9 degrees of freedom.
pub fn refine_quadric(
    init: &QuadricParams,
    obs: &[BoxObservation],
    k: &Intrinsics,
    prior: &InitPrior,
    cfg: &RefineConfig,
) -> Result<RefineReport> {
    if !init.is_valid() || !prior.is_valid() {
        return Err(Error::NotAnEllipsoid);
    }
    let usable: Vec<&BoxObservation> = obs
        .iter()
        .filter(|o| project_bbox(init, &o.t_wo, &o.t_wc, k).is_ok())
        .collect();
    let dropped = obs.len() - usable.len();
    if dropped > 0 {
        log::debug!("dropping {dropped} observations with degenerate projections");
    }
    let mut problem = RefineProblem {
        obs: usable,
        k,
        prior: prior.axes(),
        prior_weight: cfg.prior_size_weight,
        cfg,
    };
    let mut report = run_lm(&problem, init)?;
    report.dropped = dropped;
    let Some(sigma_a) = cfg.prior_axis_sigma_m else {
        return Ok(report);
    };
    for _ in 1..cfg.passes.max(1) {
        let Some(res) = problem.raw_residuals(&report.params) else {
            break;
        };
        if res.is_empty() {
            break;
        }
        let var = res.iter().map(|r| r.norm_squared()).sum::<f64>() / (4 * res.len()) as f64;
        problem.prior_weight = var.max(1e-12) / (sigma_a * sigma_a);
        let next = run_lm(&problem, &report.params)?;
        report = RefineReport {
            iterations: report.iterations + next.iterations,
            ..next
        };
    }
    // both costs under the final prior weight
    Ok(RefineReport {
        initial_cost: problem.cost(init),
        dropped,
        ..report
    })
}

fn run_lm(problem: &RefineProblem, init: &QuadricParams) -> Result<RefineReport> {
    let cfg = problem.cfg;
    let mut q = *init;
    let mut cost = problem.cost(&q);
    let initial_cost = cost;
    if !cost.is_finite() {
        return Err(Error::DivergedOptimization);
    }
    let mut lambda = 1e-3;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let Some((hess, grad)) = problem.normal_equations(&q) else {
            break;
        };
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = hess;
            for i in 0..9 {
                damped[(i, i)] += lambda * hess[(i, i)].max(1e-9);
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = -chol.solve(&grad);
            if step.norm() < 1e-12 {
                break;
            }
            let candidate = q.retract(&step);
            let c = problem.cost(&candidate);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                q = candidate;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-12;
                iterations += 1;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    if !cost.is_finite() {
        return Err(Error::DivergedOptimization);
    }
    Ok(RefineReport {
        params: q,
        initial_cost,
        final_cost: cost,
        iterations,
        prior_weight: problem.prior_weight,
        dropped: 0,
    })
}
