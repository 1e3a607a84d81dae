//! Point-cloud primitives: neighbour search, resolution, normals, ISS
//! keypoints, local reference frames and angular-constraint patches.

mod iss;
mod kdtree;
mod lrf;
mod patch;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use iss::{detect_iss_keypoints, IssParams};
pub use kdtree::KdTree;
pub use lrf::{compute_lrf, support_scatter, Lrf};
pub use patch::{extract_patch, Patch, PatchConfig, PatchExtractor};

pub type Vec3 = Vector3<f64>;

/// Unordered 3D point set with optional per-point unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub id: String,
    pub points: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<Vec3>) -> Self {
        PointCloud {
            id: id.into(),
            points,
            normals: None,
        }
    }

    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(Error::invalid(format!(
                "{} normals for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::invalid(format!("normal {i} is not unit length")));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.points.iter().sum();
        sum / self.points.len().max(1) as f64
    }

    /// Length of the axis-aligned bounding-box diagonal.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if self.points.is_empty() {
            0.0
        } else {
            (hi - lo).norm()
        }
    }

    pub fn kdtree(&self) -> KdTree<'_> {
        KdTree::new(&self.points)
    }

    /// Returns a copy with every point (and normal) moved by `x ↦ rot·x + t`.
    pub fn transformed(&self, rot: &Matrix3<f64>, t: &Vec3) -> PointCloud {
        PointCloud {
            id: self.id.clone(),
            points: self.points.iter().map(|p| rot * p + t).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| rot * n).collect()),
        }
    }

    /// Keeps the points at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            id: self.id.clone(),
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| indices.iter().map(|&i| ns[i]).collect()),
        }
    }
}

/// Mesh resolution: the mean distance from each point to its nearest
/// neighbour at non-zero distance.
pub fn compute_resolution(cloud: &PointCloud) -> Result<f64> {
    if cloud.len() < 2 {
        return Err(Error::invalid(format!(
            "resolution needs at least 2 points, cloud has {}",
            cloud.len()
        )));
    }
    let tree = cloud.kdtree();
    let mut total = 0.0;
    let mut counted = 0usize;
    for p in &cloud.points {
        let nn = tree.nearest_filtered(p, 1, |_, d2| d2 > 0.0);
        if let Some(&(_, d)) = nn.first() {
            total += d;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::invalid("all points coincide"));
    }
    Ok(total / counted as f64)
}

/// Indices kept by [`subsample`], ascending.
pub fn subsample_indices(len: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let keep = (fraction * len as f64).ceil() as usize;
    if keep < 2 {
        return Err(Error::invalid(format!(
            "subsampling {len} points at {fraction} leaves {keep}"
        )));
    }
    if keep >= len {
        return Ok((0..len).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, len, keep).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Uniform subsample without replacement to `⌈fraction·len⌉` points,
/// preserving the original relative order.
pub fn subsample(cloud: &PointCloud, fraction: f64, seed: u64) -> Result<PointCloud> {
    let keep = subsample_indices(cloud.len(), fraction, seed)?;
    Ok(cloud.select(&keep))
}

/// Eigen-decomposition of a symmetric 3×3 matrix with eigenvalues sorted in
/// descending order; columns of the returned matrix are the eigenvectors.
pub(crate) fn sorted_eigen(m: &Matrix3<f64>) -> (Vec3, Matrix3<f64>) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = Vec3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let vectors = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    (values, vectors)
}

/// Per-point normals from the `k`-nearest-neighbour scatter matrix (the
/// point itself counts as one of the `k`), oriented away from the centroid.
///
/// Normals perpendicular to the centroid direction fall back to making their
/// largest-magnitude component positive so flat inputs come out consistent.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    if k < 3 {
        return Err(Error::invalid(format!("k = {k}, need at least 3")));
    }
    if cloud.len() <= k {
        return Err(Error::invalid(format!(
            "cloud has {} points, need more than k = {k}",
            cloud.len()
        )));
    }
    let tree = cloud.kdtree();
    let centroid = cloud.centroid();
    let scale = cloud.bbox_diagonal().max(f64::MIN_POSITIVE);
    let mut normals = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.points.iter().enumerate() {
        let nbrs = tree.nearest_k(p, k);
        let mean: Vec3 = nbrs.iter().map(|&(j, _)| cloud.points[j]).sum::<Vec3>() / k as f64;
        let mut scatter = Matrix3::zeros();
        for &(j, _) in &nbrs {
            let d = cloud.points[j] - mean;
            scatter += d * d.transpose();
        }
        if scatter.trace() <= (1e-12 * scale).powi(2) {
            return Err(Error::degenerate(format!(
                "the {k} neighbours of point {i} coincide"
            )));
        }
        let (_, vecs) = sorted_eigen(&scatter);
        let mut n: Vec3 = vecs.column(2).normalize();
        let outward = n.dot(&(p - centroid));
        if outward.abs() > 1e-12 * scale {
            if outward < 0.0 {
                n = -n;
            }
        } else if n[n.iamax()] < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    Ok(PointCloud {
        id: cloud.id.clone(),
        points: cloud.points.clone(),
        normals: Some(normals),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid(n: usize) -> Vec<Vec3> {
        let mut pts = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    pts.push(Vec3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        pts
    }

    #[test]
    fn resolution_of_collinear_points() {
        let c = PointCloud::new(
            "line",
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)],
        );
        assert_eq!(compute_resolution(&c).unwrap(), 1.0);
    }

    #[test]
    fn resolution_of_unit_grid() {
        let c = PointCloud::new("grid", grid(3));
        assert_eq!(compute_resolution(&c).unwrap(), 1.0);
    }

    #[test]
    fn resolution_matches_all_pairs_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..100)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let mut oracle = 0.0;
        for (i, p) in pts.iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, q) in pts.iter().enumerate() {
                if i != j {
                    best = best.min((p - q).norm());
                }
            }
            oracle += best;
        }
        oracle /= pts.len() as f64;
        let got = compute_resolution(&PointCloud::new("r", pts)).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn resolution_rejects_single_point() {
        let c = PointCloud::new("one", vec![Vec3::zeros()]);
        assert!(matches!(compute_resolution(&c), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn subsample_identity_and_determinism() {
        let c = PointCloud::new("grid", grid(3));
        assert_eq!(subsample(&c, 1.0, 3).unwrap(), c);
        let a = subsample(&c, 0.5, 7).unwrap();
        let b = subsample(&c, 0.5, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 14);
    }

    #[test]
    fn subsample_is_subset_with_exact_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let c = PointCloud::new("r", pts);
        let s = subsample(&c, 0.25, 9).unwrap();
        assert_eq!(s.len(), 250);
        assert!(s.points.iter().all(|p| c.points.contains(p)));
        assert!(subsample(&c, 0.001, 9).is_err());
        assert!(subsample(&c, 0.0, 9).is_err());
    }

    #[test]
    fn planar_normals_are_consistent() {
        let mut pts = Vec::new();
        for x in 0..10 {
            for y in 0..10 {
                pts.push(Vec3::new(x as f64 * 0.1, y as f64 * 0.1, 0.0));
            }
        }
        let c = estimate_normals(&PointCloud::new("plane", pts), 8).unwrap();
        let normals = c.normals.unwrap();
        let first = normals[0];
        assert!((first.z.abs() - 1.0).abs() < 1e-9);
        for n in &normals {
            assert!((n - first).norm() < 1e-9);
        }
    }

    #[test]
    fn sphere_normals_point_outward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<Vec3> = (0..800)
            .map(|_| {
                let v = Vec3::new(
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                );
                v.normalize()
            })
            .collect();
        let c = estimate_normals(&PointCloud::new("sphere", pts), 10).unwrap();
        let normals = c.normals.as_ref().unwrap();
        let good = c
            .points
            .iter()
            .zip(normals)
            .filter(|(p, n)| n.dot(&p.normalize()) > 0.99)
            .count();
        assert!(good as f64 >= 0.95 * c.len() as f64, "{good}/{}", c.len());
    }

    #[test]
    fn duplicate_neighbourhood_is_degenerate() {
        let mut pts = vec![Vec3::new(1.0, 1.0, 1.0); 6];
        pts.extend(grid(2));
        let c = PointCloud::new("dup", pts);
        assert!(matches!(
            estimate_normals(&c, 4),
            Err(Error::DegenerateGeometry(_))
        ));
    }
}
