//! Fixtures shared by the criterion benches.

use lddmm_core::network::xavier_init;
use lddmm_core::synthetic::sphere_to_ellipsoid;
use lddmm_core::{NetParams, PointCloud};

/// Sphere source, ellipsoid target and Xavier parameters with `L` blocks of width `m`.
pub fn fixture(n: usize, num_blocks: usize, width: usize) -> (PointCloud, PointCloud, NetParams) {
    let (source, target) = sphere_to_ellipsoid(n);
    let params = xavier_init(num_blocks, width, Default::default(), 0).expect("valid sizes");
    (source, target, params)
}
