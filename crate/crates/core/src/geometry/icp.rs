//! Point-to-point rigid ICP with Kabsch (SVD) rotation estimates.

use nalgebra::Matrix3;

use super::{PointCloud, RigidTransform};
use crate::error::{Error, Result};
use crate::spatial::KdTree;
use crate::Vec3;

/// Trace of one ICP run.
#[derive(Debug, Clone)]
pub struct IcpReport {
    pub transform: RigidTransform,
    /// Mean squared nearest-neighbour distance, starting with the identity.
    pub errors: Vec<f64>,
}

/// Least-squares rigid map sending `src[i]` onto `dst[i]`.
///
/// Fails with `DegenerateInput` when the cross-covariance has rank < 2
/// (coincident or collinear configurations).
pub fn kabsch(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    assert_eq!(src.len(), dst.len());
    if src.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = src.len() as f64;
    let src_mean = src.iter().sum::<Vec3>() / n;
    let dst_mean = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        cov += (p - src_mean) * (q - dst_mean).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateInput("SVD of cross-covariance failed".into())),
    };
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    if !(s[order[0]] > 0.0) || s[order[1]] <= 1e-12 * s[order[0]] {
        return Err(Error::DegenerateInput(
            "cross-covariance is rank-deficient; rotation is ill-defined".into(),
        ));
    }
    let mut v = v_t.transpose();
    if (v * u.transpose()).determinant() < 0.0 {
        // Reflection: flip the direction paired with the smallest singular value.
        let k = order[2];
        v.set_column(k, &(-v.column(k)));
    }
    let rotation = v * u.transpose();
    Ok(RigidTransform {
        rotation,
        translation: dst_mean - rotation * src_mean,
    })
}

fn matched_error(tree: &KdTree<'_>, moved: &[Vec3], matches: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (p, m) in moved.iter().zip(matches.iter_mut()) {
        let (j, d) = tree.nearest(p);
        *m = j;
        total += d;
    }
    total / moved.len() as f64
}

/// Rigidly aligns `source` onto `target`; see [`rigid_icp_with_history`].
pub fn rigid_icp(
    source: &PointCloud,
    target: &PointCloud,
    max_iters: usize,
    tol: f64,
) -> Result<RigidTransform> {
    rigid_icp_with_history(source, target, max_iters, tol).map(|r| r.transform)
}

/// Alternates nearest-neighbour matching and Kabsch fits from the identity.
/// Stops when the error improves by less than `tol` or after `max_iters`
/// fits. The recorded error sequence never increases: a fit that would raise
/// the error is discarded and the loop ends.
pub fn rigid_icp_with_history(
    source: &PointCloud,
    target: &PointCloud,
    max_iters: usize,
    tol: f64,
) -> Result<IcpReport> {
    if source.len() < 3 || target.len() < 3 {
        return Err(Error::DegenerateInput("ICP needs at least 3 points per cloud".into()));
    }
    let tree = KdTree::new(target.points());
    let src = source.points();
    let mut matches = vec![0usize; src.len()];
    let mut transform = RigidTransform::identity();
    let mut error = matched_error(&tree, src, &mut matches);
    let mut errors = vec![error];
    let mut paired = vec![Vec3::zeros(); src.len()];

    for _ in 0..max_iters {
        for (slot, &j) in paired.iter_mut().zip(&matches) {
            *slot = target.points()[j];
        }
        let candidate = kabsch(src, &paired)?;
        let moved: Vec<Vec3> = src.iter().map(|p| candidate.apply(p)).collect();
        let mut next_matches = vec![0usize; src.len()];
        let next = matched_error(&tree, &moved, &mut next_matches);
        if next > error {
            break;
        }
        let improvement = error - next;
        transform = candidate;
        error = next;
        matches = next_matches;
        errors.push(error);
        if improvement < tol {
            break;
        }
    }
    Ok(IcpReport { transform, errors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;

    fn spread_points() -> PointCloud {
        // Well separated relative to the test motions.
        PointCloud::new(vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(40.0, 3.0, -5.0),
            Vec3::new(-7.0, 35.0, 11.0),
            Vec3::new(13.0, -20.0, 42.0),
            Vec3::new(-30.0, -16.0, -24.0),
            Vec3::new(25.0, 28.0, 17.0),
        ])
        .unwrap()
    }

    #[test]
    fn identity_pair() {
        let c = spread_points();
        let t = rigid_icp(&c, &c, 20, 1e-12).unwrap();
        assert!((t.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(t.translation.amax() < 1e-12);
    }

    #[test]
    fn pure_translation_in_one_iteration() {
        let c = spread_points();
        let shift = Vec3::new(1.0, 2.0, 3.0);
        let target = c.map_points(|p| p + shift);
        let report = rigid_icp_with_history(&c, &target, 1, 0.0).unwrap();
        assert!((report.transform.translation - shift).amax() < 1e-12);
        assert!((report.transform.rotation - Matrix3::identity()).amax() < 1e-12);
        assert_eq!(report.errors.len(), 2);
        assert!(report.errors[1] < 1e-20);
    }

    #[test]
    fn recovers_ten_degree_rotation() {
        let c = spread_points();
        let rot = Rotation3::from_axis_angle(&Vec3::z_axis(), 10f64.to_radians()).into_inner();
        let target = c.map_points(|p| rot * p);
        let report = rigid_icp_with_history(&c, &target, 50, 1e-15).unwrap();
        assert!((report.transform.rotation - rot).amax() < 1e-6);
        assert!(report.transform.translation.amax() < 1e-6);
        assert!(report.transform.orthonormality_error() < 1e-9);
        for w in report.errors.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn reflection_is_corrected() {
        let c = spread_points();
        let mirrored: Vec<Vec3> = c.points().iter().map(|p| Vec3::new(p.x, p.y, -p.z)).collect();
        let t = kabsch(c.points(), &mirrored).unwrap();
        assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        assert!(t.orthonormality_error() < 1e-9);
    }

    #[test]
    fn collinear_is_degenerate() {
        let line = PointCloud::new((0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect()).unwrap();
        assert!(matches!(
            rigid_icp(&line, &line, 10, 1e-9),
            Err(Error::DegenerateInput(_))
        ));
    }
}
