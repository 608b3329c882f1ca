//! Exact nearest-neighbour search in three dimensions.
//!
//! The tree returns the same answer as an exhaustive scan, bit for bit:
//! distances are computed with the same expression and ties resolve to the
//! lowest point index.

use crate::Vec3;

const LEAF_SIZE: usize = 8;

/// Squared Euclidean distance, evaluated in a fixed order.
#[inline]
pub fn squared_distance(a: &Vec3, b: &Vec3) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dz = a.z - b.z;
    dx * dx + dy * dy + dz * dz
}

/// Nearest neighbour by exhaustive scan. Ties go to the lowest index.
pub fn nearest_brute_force(points: &[Vec3], query: &Vec3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = squared_distance(p, query);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static kd-tree over a borrowed point slice.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let axis = self.widest_axis(start, end);
        let points = self.points;
        let slice = &mut self.order[start..end];
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = points[slice[mid]][axis];
        // Placeholder, patched once the children exist.
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    fn widest_axis(&self, start: usize, end: usize) -> usize {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for k in 0..3 {
                lo[k] = lo[k].min(self.points[i][k]);
                hi[k] = hi[k].max(self.points[i][k]);
            }
        }
        (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0)
    }

    /// Index and squared distance of the nearest point. Panics on an empty tree.
    pub fn nearest(&self, query: &Vec3) -> (usize, f64) {
        assert!(!self.is_empty(), "nearest() on an empty kd-tree");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, query, &mut best);
        best
    }

    fn search(&self, node: usize, query: &Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = squared_distance(&self.points[i], query);
                    if d < best.1 || (d == best.1 && i < best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                // Left holds coordinates <= value, right holds >= value.
                let diff = query[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, query, best);
                // Ties must still be visited so the lowest index wins.
                if diff * diff <= best.1 {
                    self.search(far, query, best);
                }
            }
        }
    }
}
