use nalgebra::Matrix3;

use super::{sorted_eigen, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Local reference frame at a keypoint.
///
/// `axes` holds the frame axes as rows, so `axes * (q - origin)` expresses
/// `q` in local coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Lrf {
    pub origin: Vec3,
    pub axes: Matrix3<f64>,
    pub support_radius: f64,
    /// Eigenvalues of the weighted scatter matrix, descending.
    pub eigenvalues: Vec3,
}

impl Lrf {
    pub fn to_local(&self, q: &Vec3) -> Vec3 {
        self.axes * (q - self.origin)
    }

    pub fn x_axis(&self) -> Vec3 {
        self.axes.row(0).transpose()
    }

    pub fn y_axis(&self) -> Vec3 {
        self.axes.row(1).transpose()
    }

    pub fn z_axis(&self) -> Vec3 {
        self.axes.row(2).transpose()
    }
}

/// Support of a keypoint: every point with `0 < d ≤ radius`, as
/// `(index, distance)` sorted by ascending distance then index. Exact
/// duplicates of the keypoint are left out.
pub(crate) fn support_of(cloud: &PointCloud, keypoint: usize, radius: f64) -> Vec<(usize, f64)> {
    let p = cloud.points[keypoint];
    let mut out: Vec<(usize, f64)> = cloud
        .points
        .iter()
        .enumerate()
        .filter_map(|(i, q)| {
            let d = (q - p).norm();
            (d > 0.0 && d <= radius).then_some((i, d))
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

/// Distance-weighted scatter matrix about `origin` with weights `R − dᵢ`,
/// normalised by the weight sum. Returns `(M, Σw)`.
pub fn support_scatter(origin: &Vec3, support: &[Vec3], radius: f64) -> (Matrix3<f64>, f64) {
    let mut m = Matrix3::zeros();
    let mut wsum = 0.0;
    for q in support {
        let diff = q - origin;
        let d = diff.norm();
        let w = radius - d;
        wsum += w;
        m += w * diff * diff.transpose();
    }
    if wsum > 0.0 {
        m /= wsum;
    }
    (m, wsum)
}

/// Builds the local reference frame at `keypoint` from its support within
/// `radius`.
pub fn compute_lrf(cloud: &PointCloud, keypoint: usize, radius: f64) -> Result<Lrf> {
    if keypoint >= cloud.len() {
        return Err(Error::invalid(format!(
            "keypoint {keypoint} out of range for {} points",
            cloud.len()
        )));
    }
    let support = support_of(cloud, keypoint, radius);
    lrf_from_support(cloud, keypoint, radius, &support)
}

pub(crate) fn lrf_from_support(
    cloud: &PointCloud,
    keypoint: usize,
    radius: f64,
    support: &[(usize, f64)],
) -> Result<Lrf> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("support radius {radius} must be positive")));
    }
    if support.len() < 3 {
        return Err(Error::InsufficientSupport {
            found: support.len(),
            needed: 3,
        });
    }
    let origin = cloud.points[keypoint];
    let pts: Vec<Vec3> = support.iter().map(|&(i, _)| cloud.points[i]).collect();
    let (m, wsum) = support_scatter(&origin, &pts, radius);
    if !(wsum > 0.0) {
        return Err(Error::degenerate("every support point lies on the radius boundary"));
    }
    let (values, vectors) = sorted_eigen(&m);
    if !(values[0] > 0.0) || values[1] <= 1e-12 * values[0] {
        return Err(Error::degenerate(format!(
            "scatter matrix has rank < 2 at keypoint {keypoint}"
        )));
    }
    let diffs: Vec<Vec3> = pts.iter().map(|q| q - origin).collect();
    let x = disambiguate(vectors.column(0).normalize(), &diffs);
    let y = disambiguate(vectors.column(1).normalize(), &diffs);
    let z = x.cross(&y);
    Ok(Lrf {
        origin,
        axes: Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]),
        support_radius: radius,
        eigenvalues: values,
    })
}

/// Orients `axis` so that more support points project positively than
/// negatively. On a tie the point with the largest |projection| (first in
/// support order among equals) decides.
fn disambiguate(axis: Vec3, diffs: &[Vec3]) -> Vec3 {
    let mut pos = 0usize;
    let mut neg = 0usize;
    let mut decider = 0.0f64;
    for d in diffs {
        let proj = axis.dot(d);
        if proj > 0.0 {
            pos += 1;
        } else if proj < 0.0 {
            neg += 1;
        }
        if proj.abs() > decider.abs() {
            decider = proj;
        }
    }
    let flip = match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Equal => decider < 0.0,
    };
    if flip {
        -axis
    } else {
        axis
    }
}
