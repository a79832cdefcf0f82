//! Exact nearest-neighbour queries over Gaussian centers.

use nalgebra::Vector3;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Static k-d tree. Nearest-neighbour results are exact and break distance
/// ties toward the smallest id, so they coincide with a brute-force scan.
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    ids: Vec<u64>,
    /// Permutation of point indices; leaves reference contiguous ranges.
    order: Vec<usize>,
    root: Node,
}

#[inline]
fn dist2(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let d = a - b;
    d.x * d.x + d.y * d.y + d.z * d.z
}

impl SpatialIndex {
    /// `ids` give the tie-break order; they must have the same length as `points`.
    pub fn build(points: &[Vector3<f64>], ids: &[u64]) -> Self {
        assert_eq!(points.len(), ids.len());
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(points, &mut order, 0);
        Self { points: points.to_vec(), ids: ids.to_vec(), order, root }
    }

    fn build_node(points: &[Vector3<f64>], order: &mut [usize], offset: usize) -> Node {
        if order.len() <= LEAF_SIZE {
            return Node::Leaf { start: offset, end: offset + order.len() };
        }
        let (lo, hi) = order.iter().fold(
            (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY)),
            |(lo, hi), &i| (lo.inf(&points[i]), hi.sup(&points[i])),
        );
        let axis = (hi - lo).imax();
        let mid = order.len() / 2;
        order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
        let value = points[order[mid]][axis];
        let (left, right) = order.split_at_mut(mid);
        Node::Split {
            axis,
            value,
            left: Box::new(Self::build_node(points, left, offset)),
            right: Box::new(Self::build_node(points, right, offset + mid)),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest indexed point to `query`, skipping index `exclude`.
    /// Returns `(index, squared distance)`.
    pub fn nearest(&self, query: &Vector3<f64>, exclude: Option<usize>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.search(&self.root, query, exclude, &mut best);
        best
    }

    fn better(&self, cand: usize, d2: f64, best: &Option<(usize, f64)>) -> bool {
        match *best {
            None => true,
            Some((b, bd)) => d2 < bd || (d2 == bd && self.ids[cand] < self.ids[b]),
        }
    }

    fn search(&self, node: &Node, q: &Vector3<f64>, exclude: Option<usize>, best: &mut Option<(usize, f64)>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let d2 = dist2(q, &self.points[i]);
                    if self.better(i, d2, best) {
                        *best = Some((i, d2));
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[*axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, exclude, best);
                // Equal distances must still be visited for the id tie-break.
                let visit_far = match *best {
                    None => true,
                    Some((_, bd)) => diff * diff <= bd,
                };
                if visit_far {
                    self.search(far, q, exclude, best);
                }
            }
        }
    }
}
