//! Handcrafted histogram descriptor used for negative mining and as the
//! comparison baseline, plus nearest-neighbour-distance-ratio matching.
//!
//! The descriptor is a hard-binned signature in the keypoint's local
//! reference frame: every support point votes once into the bin given by its
//! azimuth, elevation, radial shell and the cosine between its normal and the
//! keypoint normal. Azimuth bins are centred on the frame's x axis, where the
//! sign rule concentrates the support.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{Error, Result};
use crate::geometry::{PatchConfig, PatchExtractor, PointCloud, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistogramBins {
    pub azimuth: usize,
    pub elevation: usize,
    pub radial: usize,
    pub cosine: usize,
}

impl Default for HistogramBins {
    fn default() -> Self {
        HistogramBins {
            azimuth: 8,
            elevation: 2,
            radial: 2,
            cosine: 8,
        }
    }
}

impl HistogramBins {
    pub fn len(&self) -> usize {
        self.azimuth * self.elevation * self.radial * self.cosine
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat bin index of a support point given in local coordinates.
    pub fn bin_of(&self, local: &Vec3, dist: f64, radius: f64, cosine: f64) -> usize {
        let az = local.y.atan2(local.x);
        let az_width = 2.0 * PI / self.azimuth as f64;
        let mut t = az + 0.5 * az_width;
        if t < 0.0 {
            t += 2.0 * PI;
        }
        let a = ((t / az_width).floor() as usize) % self.azimuth;

        let z = if local.z.abs() <= 1e-12 * dist { 0.0 } else { local.z };
        let el = z.atan2(local.x.hypot(local.y));
        let e = bin_clamped((el + FRAC_PI_2) / PI, self.elevation);
        let r = bin_clamped(dist / radius, self.radial);
        let c = bin_clamped((cosine.clamp(-1.0, 1.0) + 1.0) / 2.0, self.cosine);
        ((a * self.elevation + e) * self.radial + r) * self.cosine + c
    }
}

/// `floor(t·n)` clamped to `[0, n)`; values on an edge land in the upper bin.
fn bin_clamped(t: f64, n: usize) -> usize {
    ((t * n as f64).floor().max(0.0) as usize).min(n - 1)
}

/// Unit-L2, non-negative histogram signature.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramDescriptor {
    pub values: Vec<f64>,
}

impl HistogramDescriptor {
    pub fn distance(&self, other: &HistogramDescriptor) -> f64 {
        euclidean(&self.values, &other.values)
    }
}

pub(crate) fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Computes histogram descriptors for many keypoints of one cloud.
pub struct HistogramExtractor<'a> {
    cloud: &'a PointCloud,
    normals: &'a [Vec3],
    patches: PatchExtractor<'a>,
    bins: HistogramBins,
}

impl<'a> HistogramExtractor<'a> {
    pub fn new(cloud: &'a PointCloud, radius: f64, bins: HistogramBins) -> Result<Self> {
        let normals = cloud
            .normals
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("cloud {} has no normals", cloud.id)))?;
        if bins.is_empty() {
            return Err(Error::invalid("histogram needs at least one bin per axis"));
        }
        let cfg = PatchConfig {
            radius,
            ..PatchConfig::default()
        };
        Ok(HistogramExtractor {
            cloud,
            normals,
            patches: PatchExtractor::new(cloud, cfg)?,
            bins,
        })
    }

    /// Raw per-bin vote counts (one vote per support point).
    pub fn counts(&self, keypoint: usize) -> Result<Vec<f64>> {
        let lrf = self.patches.lrf(keypoint)?;
        let support = self.patches.support(keypoint);
        if support.is_empty() {
            return Err(Error::InsufficientSupport { found: 0, needed: 1 });
        }
        let radius = self.patches.config().radius;
        let nk = self.normals[keypoint];
        let mut hist = vec![0.0; self.bins.len()];
        for (i, d) in support {
            let local = lrf.to_local(&self.cloud.points[i]);
            let cos = self.normals[i].dot(&nk);
            hist[self.bins.bin_of(&local, d, radius, cos)] += 1.0;
        }
        Ok(hist)
    }

    pub fn compute(&self, keypoint: usize) -> Result<HistogramDescriptor> {
        let mut values = self.counts(keypoint)?;
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(HistogramDescriptor { values })
    }
}

/// Histogram descriptor of a single keypoint.
pub fn compute_histogram_descriptor(
    cloud: &PointCloud,
    keypoint: usize,
    radius: f64,
    bins: HistogramBins,
) -> Result<HistogramDescriptor> {
    HistogramExtractor::new(cloud, radius, bins)?.compute(keypoint)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NndrMatch {
    pub query_index: usize,
    pub target_index: usize,
    pub ratio: f64,
}

/// For each query, the nearest target by Euclidean distance, reported when
/// `d_nearest / d_second ≤ max_ratio`. Distance ties resolve toward the
/// lower target index; two coincident nearest targets give ratio 1.
pub fn nndr_match<Q, T>(queries: &[Q], targets: &[T], max_ratio: f64) -> Result<Vec<NndrMatch>>
where
    Q: AsRef<[f64]>,
    T: AsRef<[f64]>,
{
    if targets.len() < 2 {
        return Err(Error::invalid(format!(
            "NNDR needs at least 2 targets, got {}",
            targets.len()
        )));
    }
    if !(max_ratio > 0.0 && max_ratio <= 1.0) {
        return Err(Error::invalid(format!("max_ratio {max_ratio} outside (0, 1]")));
    }
    let mut out = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let q = q.as_ref();
        // (distance, index) of best and second best
        let mut best = (f64::INFINITY, usize::MAX);
        let mut second = (f64::INFINITY, usize::MAX);
        for (ti, t) in targets.iter().enumerate() {
            let d = euclidean(q, t.as_ref());
            if d < best.0 {
                second = best;
                best = (d, ti);
            } else if d < second.0 {
                second = (d, ti);
            }
        }
        let ratio = if second.0 > 0.0 { best.0 / second.0 } else { 1.0 };
        if ratio <= max_ratio {
            out.push(NndrMatch {
                query_index: qi,
                target_index: best.1,
                ratio,
            });
        }
    }
    Ok(out)
}
