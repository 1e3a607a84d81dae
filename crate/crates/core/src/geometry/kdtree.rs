//! Static 3-d tree over a borrowed point slice.
//!
//! The tree is stored implicitly: `order` is a permutation of point indices
//! arranged so that the median of every sub-range is that node's splitting
//! point. Query results are always returned in a canonical order (ascending
//! distance, then ascending index) so callers never observe traversal order.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::Vec3;

pub struct KdTree<'a> {
    points: &'a [Vec3],
    order: Vec<usize>,
    axis: Vec<u8>,
}

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axis = vec![0u8; points.len()];
        build(points, &mut order, &mut axis, 0);
        KdTree {
            points,
            order,
            axis,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &'a [Vec3] {
        self.points
    }

    /// Indices of all points with `‖p − center‖ ≤ radius`, sorted by
    /// ascending distance then index.
    pub fn within_radius(&self, center: &Vec3, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.radius_rec(0, self.order.len(), center, radius * radius, &mut out);
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out.into_iter().map(|(i, d2)| (i, d2.sqrt())).collect()
    }

    /// The `k` nearest points (including any point coincident with `center`),
    /// sorted by ascending distance then index.
    pub fn nearest_k(&self, center: &Vec3, k: usize) -> Vec<(usize, f64)> {
        self.nearest_filtered(center, k, |_, _| true)
    }

    /// The `k` nearest points among those accepted by `keep(index, dist2)`.
    pub fn nearest_filtered<F>(&self, center: &Vec3, k: usize, keep: F) -> Vec<(usize, f64)>
    where
        F: Fn(usize, f64) -> bool,
    {
        if k == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.knn_rec(0, self.order.len(), center, k, &keep, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter()
            .map(|c| (c.index, c.dist2.sqrt()))
            .collect()
    }

    fn radius_rec(&self, lo: usize, hi: usize, c: &Vec3, r2: f64, out: &mut Vec<(usize, f64)>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d2 = (p - c).norm_squared();
        if d2 <= r2 {
            out.push((idx, d2));
        }
        let ax = self.axis[mid] as usize;
        let delta = c[ax] - p[ax];
        if delta <= 0.0 || delta * delta <= r2 {
            self.radius_rec(lo, mid, c, r2, out);
        }
        if delta >= 0.0 || delta * delta <= r2 {
            self.radius_rec(mid + 1, hi, c, r2, out);
        }
    }

    fn knn_rec<F>(
        &self,
        lo: usize,
        hi: usize,
        c: &Vec3,
        k: usize,
        keep: &F,
        heap: &mut BinaryHeap<Candidate>,
    ) where
        F: Fn(usize, f64) -> bool,
    {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d2 = (p - c).norm_squared();
        if keep(idx, d2) {
            let cand = Candidate { dist2: d2, index: idx };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        let ax = self.axis[mid] as usize;
        let delta = c[ax] - p[ax];
        let (near, far) = if delta <= 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_rec(near.0, near.1, c, k, keep, heap);
        let must_visit = heap.len() < k
            || heap
                .peek()
                .map(|w| delta * delta <= w.dist2)
                .unwrap_or(true);
        if must_visit {
            self.knn_rec(far.0, far.1, c, k, keep, heap);
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], axis: &mut [u8], offset: usize) {
    let n = order.len();
    if n == 0 {
        return;
    }
    // split on the axis of largest spread
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for d in 0..3 {
            lo[d] = lo[d].min(points[i][d]);
            hi[d] = hi[d].max(points[i][d]);
        }
    }
    let ax = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap_or(0);
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][ax].total_cmp(&points[b][ax]).then(a.cmp(&b))
    });
    axis[offset + mid] = ax as u8;
    let (left, rest) = order.split_at_mut(mid);
    build(points, left, axis, offset);
    build(points, &mut rest[1..], axis, offset + mid + 1);
}
