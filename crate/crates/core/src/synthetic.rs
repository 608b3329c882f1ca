//! Deterministic synthetic shapes for tests, benches and the desk benchmark.

use crate::geometry::PointCloud;
use crate::Vec3;

/// `n` near-uniform points on a sphere (Fibonacci lattice).
pub fn fibonacci_sphere(n: usize, radius: f64) -> PointCloud {
    assert!(n >= 1);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let points = (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let theta = golden * i as f64;
            Vec3::new(r * theta.cos(), y, r * theta.sin()) * radius
        })
        .collect();
    PointCloud::new(points).expect("Fibonacci lattice points are distinct")
}

/// Scales every point by per-axis factors; point `i` of the result
/// corresponds to point `i` of the input.
pub fn scale_axes(cloud: &PointCloud, factors: Vec3) -> PointCloud {
    PointCloud::new(cloud.points().iter().map(|p| p.component_mul(&factors)).collect())
        .expect("non-zero axis scaling keeps points distinct")
}

/// Sphere to ellipsoid with axes scaled by `1.0 / 0.7 / 1.3`, with the
/// identity correspondence (`source[i] ↔ target[i]`).
pub fn sphere_to_ellipsoid(n: usize) -> (PointCloud, PointCloud) {
    let sphere = fibonacci_sphere(n, 1.0);
    let ellipsoid = scale_axes(&sphere, Vec3::new(1.0, 0.7, 1.3));
    (sphere, ellipsoid)
}

/// Identity correspondence `0..n`.
pub fn identity_correspondence(n: usize) -> Vec<usize> {
    (0..n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_lie_on_sphere() {
        let s = fibonacci_sphere(200, 2.0);
        assert_eq!(s.len(), 200);
        assert!(s.points().iter().all(|p| (p.norm() - 2.0).abs() < 1e-12));
        assert!(s.centroid().norm() < 0.05);
    }

    #[test]
    fn ellipsoid_axes() {
        let (s, e) = sphere_to_ellipsoid(100);
        for (p, q) in s.points().iter().zip(e.points()) {
            assert_eq!(q.y, p.y * 0.7);
        }
    }
}
