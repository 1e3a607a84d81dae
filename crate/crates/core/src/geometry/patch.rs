use super::lrf::{lrf_from_support, support_of};
use super::{KdTree, Lrf, PointCloud, Vec3};
use crate::error::{Error, Result};

/// Neighbourhood settings shared by every stage that cuts patches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchConfig {
    /// Support radius `R` in model units.
    pub radius: f64,
    /// Fixed number of points `N` fed to the encoder.
    pub n_points: usize,
    /// Minimum angle (radians) subtended at the keypoint by any two
    /// selected neighbours.
    pub theta_min: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig {
            radius: 0.1,
            n_points: 64,
            theta_min: 0.2,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::invalid(format!("radius {} must be positive", self.radius)));
        }
        if self.n_points < 8 {
            return Err(Error::invalid(format!("n_points {} < 8", self.n_points)));
        }
        if !(self.theta_min >= 0.0 && self.theta_min < std::f64::consts::FRAC_PI_2) {
            return Err(Error::invalid(format!(
                "theta_min {} outside [0, π/2)",
                self.theta_min
            )));
        }
        Ok(())
    }
}

/// Canonicalised neighbourhood of a keypoint: `n_points` points in the
/// keypoint's LRF, scaled by `1/R`. Entries at or beyond `valid_count` are
/// cyclic copies of the selected points.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub keypoint_index: usize,
    pub points: Vec<Vec3>,
    pub valid_count: usize,
    pub lrf: Lrf,
}

impl Patch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Extracts the angular-constraint patch at `keypoint`.
pub fn extract_patch(
    cloud: &PointCloud,
    keypoint: usize,
    radius: f64,
    n_points: usize,
    theta_min: f64,
) -> Result<Patch> {
    let cfg = PatchConfig {
        radius,
        n_points,
        theta_min,
    };
    cfg.validate()?;
    if keypoint >= cloud.len() {
        return Err(Error::invalid(format!("keypoint {keypoint} out of range")));
    }
    let support = support_of(cloud, keypoint, radius);
    patch_from_support(cloud, keypoint, &support, &cfg)
}

/// Cuts many patches from one cloud, sharing a k-d tree.
pub struct PatchExtractor<'a> {
    cloud: &'a PointCloud,
    tree: KdTree<'a>,
    cfg: PatchConfig,
}

impl<'a> PatchExtractor<'a> {
    pub fn new(cloud: &'a PointCloud, cfg: PatchConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(PatchExtractor {
            cloud,
            tree: cloud.kdtree(),
            cfg,
        })
    }

    pub fn config(&self) -> &PatchConfig {
        &self.cfg
    }

    pub fn support(&self, keypoint: usize) -> Vec<(usize, f64)> {
        let mut s = self
            .tree
            .within_radius(&self.cloud.points[keypoint], self.cfg.radius);
        s.retain(|&(_, d)| d > 0.0);
        s
    }

    pub fn lrf(&self, keypoint: usize) -> Result<Lrf> {
        self.check(keypoint)?;
        lrf_from_support(self.cloud, keypoint, self.cfg.radius, &self.support(keypoint))
    }

    pub fn extract(&self, keypoint: usize) -> Result<Patch> {
        self.check(keypoint)?;
        patch_from_support(self.cloud, keypoint, &self.support(keypoint), &self.cfg)
    }

    fn check(&self, keypoint: usize) -> Result<()> {
        if keypoint >= self.cloud.len() {
            return Err(Error::invalid(format!("keypoint {keypoint} out of range")));
        }
        Ok(())
    }
}

/// Angle at the origin between two non-zero vectors.
pub(crate) fn angle_between(u: &Vec3, v: &Vec3) -> f64 {
    u.cross(v).norm().atan2(u.dot(v))
}

fn patch_from_support(
    cloud: &PointCloud,
    keypoint: usize,
    support: &[(usize, f64)],
    cfg: &PatchConfig,
) -> Result<Patch> {
    let lrf = lrf_from_support(cloud, keypoint, cfg.radius, support)?;
    let origin = cloud.points[keypoint];

    let mut accepted: Vec<Vec3> = Vec::with_capacity(cfg.n_points);
    for &(i, _) in support {
        if accepted.len() == cfg.n_points {
            break;
        }
        let dir = cloud.points[i] - origin;
        let ok = cfg.theta_min == 0.0
            || accepted
                .iter()
                .all(|a| angle_between(a, &dir) >= cfg.theta_min);
        if ok {
            accepted.push(dir);
        }
    }
    let valid_count = accepted.len();
    debug_assert!(valid_count >= 1);

    let scale = 1.0 / cfg.radius;
    let local: Vec<Vec3> = accepted.iter().map(|d| lrf.axes * d * scale).collect();
    let points = (0..cfg.n_points).map(|j| local[j % valid_count]).collect();
    Ok(Patch {
        keypoint_index: keypoint,
        points,
        valid_count,
        lrf,
    })
}
