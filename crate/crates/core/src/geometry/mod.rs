//! Point clouds, rigid transforms, joint normalization and I/O.

mod icp;
mod io;

pub use icp::{kabsch, rigid_icp, rigid_icp_with_history, IcpReport};
pub use io::{load_pointcloud, save_pointcloud, Format, LoadOptions};

use std::collections::HashSet;

use nalgebra::Matrix3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Vec3;

/// An ordered set of distinct 3D points with optional triangles and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    labels: Option<Vec<i64>>,
}

impl PointCloud {
    /// Builds a validated cloud: non-empty, finite and pairwise distinct.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::DegenerateInput(format!("point {i} has a non-finite coordinate")));
        }
        if let Some((i, j)) = first_duplicate(&points) {
            return Err(Error::DegenerateInput(format!("points {i} and {j} coincide")));
        }
        Ok(PointCloud {
            points,
            faces: Vec::new(),
            labels: None,
        })
    }

    pub fn with_faces(mut self, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = self.points.len();
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&v| v >= n)) {
            return Err(Error::DegenerateInput(format!(
                "face {f:?} references a vertex >= {n}"
            )));
        }
        self.faces = faces;
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::DegenerateInput(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same faces and labels, new coordinates (one per existing point).
    pub(crate) fn with_points_unchecked(&self, points: Vec<Vec3>) -> Self {
        debug_assert_eq!(points.len(), self.points.len());
        PointCloud {
            points,
            faces: self.faces.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Applies `f` to every point, keeping faces and labels.
    pub fn map_points(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        self.with_points_unchecked(self.points.iter().map(f).collect())
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.points.iter().sum();
        sum / self.points.len() as f64
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(self.points.iter())
    }

    /// Coordinates as an `n x 3` row-major array.
    pub fn to_array(&self) -> Array2<f64> {
        points_to_array(&self.points)
    }
}

pub(crate) fn points_to_array(points: &[Vec3]) -> Array2<f64> {
    Array2::from_shape_fn((points.len(), 3), |(i, k)| points[i][k])
}

pub(crate) fn array_to_points(a: &Array2<f64>) -> Vec<Vec3> {
    a.rows()
        .into_iter()
        .map(|r| Vec3::new(r[0], r[1], r[2]))
        .collect()
}

pub(crate) fn bounding_box<'a>(points: impl Iterator<Item = &'a Vec3>) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

fn canonical_bits(p: &Vec3) -> [u64; 3] {
    // `+ 0.0` folds -0.0 onto 0.0.
    [(p.x + 0.0).to_bits(), (p.y + 0.0).to_bits(), (p.z + 0.0).to_bits()]
}

fn first_duplicate(points: &[Vec3]) -> Option<(usize, usize)> {
    let mut seen = std::collections::HashMap::with_capacity(points.len());
    for (j, p) in points.iter().enumerate() {
        if let Some(&i) = seen.get(&canonical_bits(p)) {
            return Some((i, j));
        }
        seen.insert(canonical_bits(p), j);
    }
    None
}

/// Removes repeated points, keeping first occurrences. Returns the kept
/// points and, for each input index, its index in the output.
pub(crate) fn dedup_points(points: &[Vec3]) -> (Vec<Vec3>, Vec<usize>) {
    let mut index = std::collections::HashMap::with_capacity(points.len());
    let mut kept = Vec::with_capacity(points.len());
    let mut remap = Vec::with_capacity(points.len());
    for p in points {
        let next = kept.len();
        let slot = *index.entry(canonical_bits(p)).or_insert(next);
        if slot == next {
            kept.push(*p);
        }
        remap.push(slot);
    }
    (kept, remap)
}

/// Rotation followed by translation: `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|p| self.apply(p))
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Largest deviation of `RᵀR` from the identity and of `det R` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        gram.amax().max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Shared similarity map `x -> (x - offset) * scale` applied to both clouds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub offset: Vec3,
    pub scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self::identity()
    }
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            offset: Vec3::zeros(),
            scale: 1.0,
        }
    }

    pub fn forward(&self, p: &Vec3) -> Vec3 {
        (p - self.offset) * self.scale
    }

    pub fn inverse(&self, p: &Vec3) -> Vec3 {
        p / self.scale + self.offset
    }

    pub fn forward_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|p| self.forward(p))
    }

    pub fn inverse_cloud(&self, cloud: &PointCloud) -> PointCloud {
        cloud.map_points(|p| self.inverse(p))
    }

    /// Converts a length measured in normalized units back to scene units.
    pub fn length_to_scene(&self, length: f64) -> f64 {
        length / self.scale
    }
}

/// Centres the union of both clouds at the origin and scales its bounding
/// box diagonal to 1.
pub fn normalize(
    source: &PointCloud,
    target: &PointCloud,
) -> Result<(PointCloud, PointCloud, Normalization)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let all = || source.points().iter().chain(target.points());
    let count = (source.len() + target.len()) as f64;
    let offset = all().sum::<Vec3>() / count;
    let (lo, hi) = bounding_box(all());
    let diagonal = (hi - lo).norm();
    if !(diagonal > 0.0) || !diagonal.is_finite() {
        return Err(Error::DegenerateInput(
            "all points coincide; cannot normalize".into(),
        ));
    }
    let record = Normalization {
        offset,
        scale: 1.0 / diagonal,
    };
    Ok((
        record.forward_cloud(source),
        record.forward_cloud(target),
        record,
    ))
}

/// Distinct-point validation used by loaders that may want deduplication.
pub(crate) fn has_duplicates(points: &[Vec3]) -> bool {
    let mut seen = HashSet::with_capacity(points.len());
    !points.iter().all(|p| seen.insert(canonical_bits(p)))
}
