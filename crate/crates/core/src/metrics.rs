//! Evaluation metrics: projected-box IoU, ellipsoid errors, success rate,
//! CLEAR-MOT accuracy and precision, trajectory ATE and Monte-Carlo 3D IoU.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;

use crate::association::hungarian_assign;
use crate::error::{Error, Result};
use crate::quadric::{bbox_iou, project_bbox, BBox, QuadricParams};
use crate::se3::{Intrinsics, Pose};
use crate::simulator::stream;

/// Mean IoU between the projected boxes of `gt` and `est` over the views in
/// which both project to valid ellipses.
pub fn iou_2d_metric(
    gt: &QuadricParams,
    est: &QuadricParams,
    views: &[Pose],
    k: &Intrinsics,
) -> Result<f64> {
    let id = Pose::identity();
    let ious: Vec<f64> = views
        .iter()
        .filter_map(|c| {
            let a = project_bbox(gt, &id, c, k).ok()?;
            let b = project_bbox(est, &id, c, k).ok()?;
            Some(bbox_iou(&a, &b))
        })
        .collect();
    if ious.is_empty() {
        return Err(Error::NoValidView);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn e_trans(gt: &QuadricParams, est: &QuadricParams) -> f64 {
    (gt.translation - est.translation).norm()
}

/// Axis error with both axis triples sorted ascending.
pub fn e_axe(gt: &QuadricParams, est: &QuadricParams) -> f64 {
    (gt.sorted_axes() - est.sorted_axes()).norm()
}

/// Fraction of objects initialized with IoU₂D above 0.5. `None` marks a
/// failed initialization.
pub fn success_rate(ious: &[Option<f64>]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().filter(|v| v.is_some_and(|x| x > 0.5)).count() as f64 / ious.len() as f64
}

/// Pairs estimates with ground truth by centroid distance; pairs farther
/// apart than `gate` metres are left unmatched. Returns (gt, est) indices.
pub fn pair_quadrics(
    gt: &[QuadricParams],
    est: &[QuadricParams],
    gate: f64,
) -> Vec<(usize, usize)> {
    if gt.is_empty() || est.is_empty() {
        return Vec::new();
    }
    let cost = DMatrix::from_fn(gt.len(), est.len(), |i, j| e_trans(&gt[i], &est[j]));
    hungarian_assign(&cost, gate).pairs
}

pub const PAIRING_GATE_M: f64 = 4.0;

/// CLEAR-MOT counters over a sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MotAccumulator {
    pub misses: usize,
    pub false_positives: usize,
    pub mismatches: usize,
    pub gt_count: usize,
    pub matches: usize,
    /// Sum of matched box overlaps.
    pub overlap_sum: f64,
    pub frames: usize,
    current: BTreeMap<u64, u64>,
    last_match: BTreeMap<u64, u64>,
}

impl MotAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one frame of (id, box) ground truth and hypotheses. Matches need
    /// IoU > 0.5; correspondences from the previous frame are kept while still
    /// valid, the rest are matched by Hungarian assignment.
    pub fn update(&mut self, gt: &[(u64, BBox)], hyp: &[(u64, BBox)]) {
        self.frames += 1;
        self.gt_count += gt.len();
        let mut matched: Vec<(usize, usize)> = Vec::new();
        let mut gt_used = vec![false; gt.len()];
        let mut hyp_used = vec![false; hyp.len()];
        for (gi, (gid, gb)) in gt.iter().enumerate() {
            let Some(hid) = self.current.get(gid) else {
                continue;
            };
            if let Some(hi) = hyp.iter().position(|(h, _)| h == hid) {
                if !hyp_used[hi] && bbox_iou(gb, &hyp[hi].1) > 0.5 {
                    matched.push((gi, hi));
                    gt_used[gi] = true;
                    hyp_used[hi] = true;
                }
            }
        }
        let free_gt: Vec<usize> = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
        let free_hyp: Vec<usize> = (0..hyp.len()).filter(|&i| !hyp_used[i]).collect();
        if !free_gt.is_empty() && !free_hyp.is_empty() {
            let cost = DMatrix::from_fn(free_gt.len(), free_hyp.len(), |r, c| {
                let iou = bbox_iou(&gt[free_gt[r]].1, &hyp[free_hyp[c]].1);
                if iou > 0.5 {
                    1.0 - iou
                } else {
                    10.0
                }
            });
            for (r, c) in hungarian_assign(&cost, 1.0).pairs {
                let (gi, hi) = (free_gt[r], free_hyp[c]);
                if bbox_iou(&gt[gi].1, &hyp[hi].1) > 0.5 {
                    matched.push((gi, hi));
                }
            }
        }
        let mut current = BTreeMap::new();
        for &(gi, hi) in &matched {
            let (gid, hid) = (gt[gi].0, hyp[hi].0);
            if self.last_match.get(&gid).is_some_and(|prev| *prev != hid) {
                self.mismatches += 1;
            }
            self.last_match.insert(gid, hid);
            current.insert(gid, hid);
            self.overlap_sum += bbox_iou(&gt[gi].1, &hyp[hi].1);
        }
        self.current = current;
        self.matches += matched.len();
        self.misses += gt.len() - matched.len();
        self.false_positives += hyp.len() - matched.len();
    }

    pub fn mota(&self) -> Result<f64> {
        if self.gt_count == 0 {
            return Err(Error::EmptyGroundTruth);
        }
        Ok(1.0
            - (self.misses + self.false_positives + self.mismatches) as f64 / self.gt_count as f64)
    }

    /// Mean overlap of matched boxes.
    pub fn motp(&self) -> Result<f64> {
        if self.matches == 0 {
            return Err(Error::EmptyGroundTruth);
        }
        Ok(self.overlap_sum / self.matches as f64)
    }
}

/// Rotation and translation taking `src` onto `dst` in the least-squares sense.
pub fn align_rigid(dst: &[Vector3<f64>], src: &[Vector3<f64>]) -> Pose {
    let n = dst.len().min(src.len()).max(1) as f64;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let cov: Matrix3<f64> = dst
        .iter()
        .zip(src)
        .map(|(d, s)| (d - md) * (s - ms).transpose())
        .sum();
    let svd = cov.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Pose::from_translation(md - ms);
    };
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    Pose::new(r, md - r * ms)
}

/// RMSE of translation error after rigid alignment (no scale).
pub fn ate_rmse(gt: &[Vector3<f64>], est: &[Vector3<f64>]) -> Result<f64> {
    if gt.len() != est.len() {
        return Err(Error::LengthMismatch(gt.len(), est.len()));
    }
    if gt.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let t = align_rigid(gt, est);
    let sq: f64 = gt
        .iter()
        .zip(est)
        .map(|(g, e)| (g - t.transform_point(e)).norm_squared())
        .sum();
    Ok((sq / gt.len() as f64).sqrt())
}

/// Monte-Carlo volume IoU estimate with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McIou {
    pub iou: f64,
    pub stderr: f64,
}

fn aabb(q: &QuadricParams) -> (Vector3<f64>, Vector3<f64>) {
    let half = Vector3::from_fn(|i, _| {
        (0..3)
            .map(|j| (q.rotation[(i, j)] * q.axes[j]).powi(2))
            .sum::<f64>()
            .sqrt()
    });
    (q.translation - half, q.translation + half)
}

/// Samples the union of the two bounding boxes uniformly and counts points
/// inside both versus inside either.
pub fn monte_carlo_3d_iou(
    q1: &QuadricParams,
    q2: &QuadricParams,
    n_samples: usize,
    seed: u64,
) -> McIou {
    let (lo1, hi1) = aabb(q1);
    let (lo2, hi2) = aabb(q2);
    let disjoint = (0..3).any(|i| hi1[i] < lo2[i] || hi2[i] < lo1[i]);
    if disjoint {
        return McIou {
            iou: 0.0,
            stderr: 0.0,
        };
    }
    let lo = lo1.inf(&lo2);
    let hi = hi1.sup(&hi2);
    let mut rng = stream(seed, 0, 0, 0);
    let (mut both, mut either) = (0usize, 0usize);
    for _ in 0..n_samples {
        let p = Vector3::from_fn(|i, _| lo[i] + (hi[i] - lo[i]) * rng.random::<f64>());
        let a = q1.normalized_radius(&p) <= 1.0;
        let b = q2.normalized_radius(&p) <= 1.0;
        both += (a && b) as usize;
        either += (a || b) as usize;
    }
    if either == 0 {
        return McIou {
            iou: 0.0,
            stderr: 0.0,
        };
    }
    let p = both as f64 / either as f64;
    McIou {
        iou: p,
        stderr: (p * (1.0 - p) / either as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{rot_x, rot_z, so3_exp};

    fn k500() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0)
    }

    fn views() -> Vec<Pose> {
        crate::simulator::arc_cameras(&Default::default())
    }

    #[test]
    fn iou_2d_examples() {
        let q = QuadricParams::new(Vector3::new(2.0, 1.0, 0.8), Vector3::zeros(), rot_z(0.05));
        assert!((iou_2d_metric(&q, &q, &views(), &k500()).unwrap() - 1.0).abs() < 1e-12);
        let far = QuadricParams::sphere(0.5, Vector3::new(8.0, 0.0, 0.0));
        assert_eq!(iou_2d_metric(&q, &far, &views(), &k500()).unwrap(), 0.0);
        let behind = QuadricParams::sphere(0.5, Vector3::new(0.0, -30.0, 2.0));
        assert!(matches!(
            iou_2d_metric(&q, &behind, &views(), &k500()),
            Err(Error::NoValidView)
        ));
    }

    #[test]
    fn error_examples() {
        let a = QuadricParams::sphere(1.0, Vector3::zeros());
        let b = QuadricParams::sphere(1.0, Vector3::new(3.0, 4.0, 0.0));
        assert_eq!(e_trans(&a, &a), 0.0);
        assert!((e_trans(&a, &b) - 5.0).abs() < 1e-15);
        assert_eq!(e_trans(&a, &b), e_trans(&b, &a));
        let c = QuadricParams::new(
            Vector3::new(2.0, 1.0, 1.0),
            Vector3::zeros(),
            Matrix3::identity(),
        );
        assert_eq!(e_axe(&a, &a), 0.0);
        assert!((e_axe(&c, &a) - 1.0).abs() < 1e-15);
        // the same ellipsoid written with permuted axes
        let d = QuadricParams::new(
            Vector3::new(1.0, 1.0, 2.0),
            Vector3::zeros(),
            so3_exp(&Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0)),
        );
        assert!(e_axe(&c, &d) < 1e-15);
    }

    #[test]
    fn success_rate_examples() {
        assert_eq!(success_rate(&[Some(1.0); 4]), 1.0);
        assert_eq!(success_rate(&[None, Some(0.2)]), 0.0);
        assert_eq!(success_rate(&[None, Some(0.6), Some(0.5), Some(0.9)]), 0.5);
    }

    fn b(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0)
    }

    #[test]
    fn mota_examples() {
        let mut acc = MotAccumulator::new();
        for f in 0..5 {
            let gt: Vec<_> = (0..2).map(|i| (i, b(f as f64 + 50.0 * i as f64))).collect();
            let hyp: Vec<_> = gt.iter().map(|(i, bb)| (i + 10, *bb)).collect();
            acc.update(&gt, &hyp);
        }
        assert_eq!(acc.mota().unwrap(), 1.0);
        assert_eq!(acc.motp().unwrap(), 1.0);
        assert_eq!(acc.mismatches, 0);

        // one miss among 10 ground-truth boxes
        let mut acc = MotAccumulator::new();
        let gt: Vec<_> = (0..10).map(|i| (i, b(30.0 * i as f64))).collect();
        acc.update(&gt, &gt[1..]);
        assert!((acc.mota().unwrap() - 0.9).abs() < 1e-15);
        assert!(matches!(
            MotAccumulator::new().mota(),
            Err(Error::EmptyGroundTruth)
        ));
    }

    #[test]
    fn id_switch_counted_once() {
        let mut acc = MotAccumulator::new();
        acc.update(&[(0, b(0.0))], &[(5, b(0.0))]);
        acc.update(&[(0, b(1.0))], &[(6, b(1.0))]);
        acc.update(&[(0, b(2.0))], &[(6, b(2.0))]);
        assert_eq!(acc.mismatches, 1);
        assert!((acc.mota().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ate_examples() {
        let gt: Vec<_> = (0..20)
            .map(|i| Vector3::new(i as f64, (i as f64 * 0.3).sin(), 0.1 * i as f64))
            .collect();
        assert!(ate_rmse(&gt, &gt).unwrap() < 1e-12);
        let g = Pose::new(rot_x(0.4) * rot_z(1.0), Vector3::new(1.0, -2.0, 3.0));
        let moved: Vec<_> = gt.iter().map(|p| g.transform_point(p)).collect();
        assert!(ate_rmse(&gt, &moved).unwrap() < 1e-9);
        let offset: Vec<_> = gt.iter().map(|p| p + Vector3::new(1.0, 1.0, 1.0)).collect();
        assert!(ate_rmse(&gt, &offset).unwrap() < 1e-9);
        assert!(matches!(
            ate_rmse(&gt, &gt[1..]),
            Err(Error::LengthMismatch(20, 19))
        ));
    }

    #[test]
    fn ate_alternating_error() {
        // ±1 m across a straight line, in a sign pattern no rigid motion can absorb
        let gt: Vec<_> = (0..40).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let sign = [1.0, -1.0, -1.0, 1.0];
        let est: Vec<_> = gt
            .iter()
            .enumerate()
            .map(|(i, p)| p + Vector3::new(0.0, sign[i % 4], 0.0))
            .collect();
        assert!((ate_rmse(&gt, &est).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn monte_carlo_examples() {
        let a = QuadricParams::new(
            Vector3::new(2.0, 1.0, 0.5),
            Vector3::new(1.0, 2.0, 3.0),
            rot_z(0.3),
        );
        let same = monte_carlo_3d_iou(&a, &a, 100_000, 1);
        assert!((same.iou - 1.0).abs() <= 0.01);
        let far = QuadricParams::sphere(1.0, Vector3::new(10.0, 0.0, 0.0));
        assert_eq!(monte_carlo_3d_iou(&a, &far, 10_000, 1).iou, 0.0);
        let inner = QuadricParams::sphere(1.0, Vector3::zeros());
        let outer = QuadricParams::sphere(2.0, Vector3::zeros());
        let r = monte_carlo_3d_iou(&inner, &outer, 200_000, 9);
        assert!((r.iou - 0.125).abs() < 3.0 * r.stderr, "{r:?}");
        assert_eq!(
            monte_carlo_3d_iou(&inner, &outer, 10_000, 4),
            monte_carlo_3d_iou(&inner, &outer, 10_000, 4)
        );
    }

    #[test]
    fn pairing_respects_gate() {
        let gt = vec![
            QuadricParams::sphere(1.0, Vector3::zeros()),
            QuadricParams::sphere(1.0, Vector3::new(10.0, 0.0, 0.0)),
        ];
        let est = vec![
            QuadricParams::sphere(1.0, Vector3::new(10.5, 0.0, 0.0)),
            QuadricParams::sphere(1.0, Vector3::new(0.0, 5.0, 0.0)),
        ];
        assert_eq!(pair_quadrics(&gt, &est, PAIRING_GATE_M), vec![(1, 0)]);
    }
}
