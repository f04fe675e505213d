//! Median-split kd-tree for exact nearest-neighbor queries on 3D points.
//!
//! Queries return the same minimal squared distance, bit for bit, as a
//! brute-force scan using the same per-pair expression: pruning uses the
//! splitting-plane distance, which never exceeds the true point distance,
//! so no candidate that could lower the minimum is skipped.

/// Squared Euclidean distance with a fixed evaluation order.
///
/// Both the brute-force scan and the tree query go through this function so
/// the two backends agree bitwise.
#[inline]
pub fn dist_sq(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy) + dz * dz
}

struct Node {
    point: [f64; 3],
    index: u32,
    axis: u8,
    left: i32,
    right: i32,
}

pub struct KdTree3 {
    nodes: Vec<Node>,
    root: i32,
}

impl KdTree3 {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut items: Vec<([f64; 3], u32)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (*p, i as u32))
            .collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(&mut items, 0, &mut nodes);
        KdTree3 { nodes, root }
    }

    fn build_rec(items: &mut [([f64; 3], u32)], depth: usize, nodes: &mut Vec<Node>) -> i32 {
        if items.is_empty() {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = items.len() / 2;
        items.select_nth_unstable_by(mid, |a, b| a.0[axis as usize].total_cmp(&b.0[axis as usize]));
        let (point, index) = items[mid];
        let id = nodes.len() as i32;
        nodes.push(Node {
            point,
            index,
            axis,
            left: -1,
            right: -1,
        });
        let (lo, rest) = items.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = Self::build_rec(lo, depth + 1, nodes);
        let right = Self::build_rec(hi, depth + 1, nodes);
        nodes[id as usize].left = left;
        nodes[id as usize].right = right;
        id
    }

    /// Exact nearest neighbor: returns (squared distance, index into the
    /// original point slice).
    pub fn nearest_sq(&self, query: &[f64; 3]) -> (f64, u32) {
        debug_assert!(!self.nodes.is_empty());
        let mut best = (f64::INFINITY, u32::MAX);
        self.search(self.root, query, &mut best);
        best
    }

    /// Nearest neighbor with a search cap: exact whenever the true nearest
    /// squared distance is below `cap_sq`, otherwise returns
    /// `(cap_sq, u32::MAX)`. Far queries prune almost immediately, which
    /// makes this the right primitive under truncated losses where
    /// distances beyond the clamp are interchangeable.
    pub fn nearest_sq_within(&self, query: &[f64; 3], cap_sq: f64) -> (f64, u32) {
        debug_assert!(!self.nodes.is_empty());
        let mut best = (cap_sq, u32::MAX);
        self.search(self.root, query, &mut best);
        best
    }

    fn search(&self, node: i32, query: &[f64; 3], best: &mut (f64, u32)) {
        if node < 0 {
            return;
        }
        let n = &self.nodes[node as usize];
        let d2 = dist_sq(query, &n.point);
        if d2 < best.0 {
            *best = (d2, n.index);
        }
        let diff = query[n.axis as usize] - n.point[n.axis as usize];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, query, best);
        // Points on the far side are at least |diff| away along this axis.
        if diff * diff <= best.0 {
            self.search(far, query, best);
        }
    }
}
