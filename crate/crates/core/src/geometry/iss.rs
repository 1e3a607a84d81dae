use nalgebra::Matrix3;

use super::{compute_resolution, sorted_eigen, PointCloud};
use crate::error::{Error, Result};

/// Intrinsic-shape-signature detector settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IssParams {
    pub salient_radius: f64,
    pub gamma_21: f64,
    pub gamma_32: f64,
    pub nms_radius: f64,
    pub min_neighbors: usize,
}

impl IssParams {
    /// Defaults scaled to a cloud's resolution: salient radius 6·mr,
    /// non-maximum suppression radius 4·mr, both ratio thresholds 0.975.
    pub fn for_resolution(mr: f64) -> Self {
        IssParams {
            salient_radius: 6.0 * mr,
            gamma_21: 0.975,
            gamma_32: 0.975,
            nms_radius: 4.0 * mr,
            min_neighbors: 5,
        }
    }

    pub fn for_cloud(cloud: &PointCloud) -> Result<Self> {
        Ok(Self::for_resolution(compute_resolution(cloud)?))
    }

    pub fn validate(&self) -> Result<()> {
        let ratios_ok = |g: f64| g > 0.0 && g < 1.0;
        if !(self.salient_radius > 0.0 && self.nms_radius > 0.0) {
            return Err(Error::invalid("ISS radii must be positive"));
        }
        if !ratios_ok(self.gamma_21) || !ratios_ok(self.gamma_32) {
            return Err(Error::invalid("ISS ratio thresholds must lie in (0, 1)"));
        }
        if self.min_neighbors < 5 {
            return Err(Error::invalid("ISS min_neighbors must be at least 5"));
        }
        Ok(())
    }
}

/// Returns ISS keypoint indices sorted by descending smallest eigenvalue
/// (ties by index).
///
/// A point is a candidate when its salient-radius scatter matrix has
/// `λ2/λ1 < γ21`, `λ3/λ2 < γ32` and a numerically non-zero `λ3`; candidates
/// survive non-maximum suppression on `λ3` within `nms_radius`.
pub fn detect_iss_keypoints(cloud: &PointCloud, params: &IssParams) -> Result<Vec<usize>> {
    params.validate()?;
    if cloud.len() < params.min_neighbors {
        return Ok(Vec::new());
    }
    let tree = cloud.kdtree();
    let mut saliency: Vec<Option<f64>> = vec![None; cloud.len()];
    for (i, p) in cloud.points.iter().enumerate() {
        let nbrs = tree.within_radius(p, params.salient_radius);
        // the point itself is in `nbrs`
        if nbrs.len() - 1 < params.min_neighbors {
            continue;
        }
        let mut scatter = Matrix3::zeros();
        for &(j, _) in &nbrs {
            let d = cloud.points[j] - p;
            scatter += d * d.transpose();
        }
        scatter /= nbrs.len() as f64;
        let (l, _) = sorted_eigen(&scatter);
        if !(l[0] > 0.0 && l[1] > 0.0) {
            continue;
        }
        if l[2] <= 1e-9 * l[0] {
            continue;
        }
        if l[1] / l[0] < params.gamma_21 && l[2] / l[1] < params.gamma_32 {
            saliency[i] = Some(l[2]);
        }
    }

    let mut keep = Vec::new();
    for (i, s) in saliency.iter().enumerate() {
        let Some(si) = *s else { continue };
        let is_max = tree
            .within_radius(&cloud.points[i], params.nms_radius)
            .into_iter()
            .all(|(j, _)| match saliency[j] {
                Some(sj) if j != i => si > sj || (si == sj && i < j),
                _ => true,
            });
        if is_max {
            keep.push((i, si));
        }
    }
    keep.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(keep.into_iter().map(|(i, _)| i).collect())
}
