use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::{compute_lrf, PointCloud, Vec3};
use crate::mining::{Corpus, CorpusModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Box,
    Cylinder,
    Ellipsoid,
    Composite,
    /// Sphere with random radial bumps; has no symmetry.
    Blob,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Composite => "composite",
            ShapeKind::Blob => "blob",
        }
    }

    fn mirror_symmetric(self) -> bool {
        matches!(self, ShapeKind::Box | ShapeKind::Cylinder | ShapeKind::Ellipsoid)
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "box" => ShapeKind::Box,
            "cylinder" => ShapeKind::Cylinder,
            "ellipsoid" => ShapeKind::Ellipsoid,
            "composite" => ShapeKind::Composite,
            "blob" => ShapeKind::Blob,
            _ => return Err(Error::invalid(format!("unknown shape kind {s:?}"))),
        })
    }
}

/// What to generate: one archetype per entry of `kinds`, each instantiated
/// `instances` times.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kinds: Vec<ShapeKind>,
    pub instances: usize,
    pub points: usize,
    pub keypoints: usize,
    /// Standard deviation of the per-point Gaussian jitter, in shape units
    /// (shapes span roughly 2 units).
    pub noise: f64,
    /// When set, keypoints are kept only where the local reference frame at
    /// this support radius is repeatable across independently resampled,
    /// jittered copies of the archetype.
    pub stable_radius: Option<f64>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            kinds: vec![ShapeKind::Box, ShapeKind::Composite],
            instances: 2,
            points: 2000,
            keypoints: 40,
            noise: 0.0,
            stable_radius: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl RigidMotion {
    pub fn identity() -> Self {
        RigidMotion {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> RigidMotion {
        let rt = self.rotation.transpose();
        RigidMotion {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        let mut g = || -> f64 { StandardNormal.sample(rng) };
        let q = Quaternion::new(g(), g(), g(), g());
        let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
        let translation = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        RigidMotion { rotation, translation }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// Motion taking archetype coordinates to each model's coordinates.
    pub poses: Vec<RigidMotion>,
    pub archetype_of: Vec<usize>,
    /// Keypoint positions of every archetype in its own frame.
    pub archetype_keypoints: Vec<Vec<Vec3>>,
}

#[derive(Debug, Clone)]
enum Primitive {
    Cuboid(Vec3),
    Cylinder { r: f64, h: f64 },
    Ellipsoid(Vec3),
    Blob(Vec<(Vec3, f64, f64)>),
}

impl Primitive {
    fn area(&self) -> f64 {
        match self {
            Primitive::Cuboid(h) => 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z),
            Primitive::Cylinder { r, h } => 4.0 * PI * r * h + 2.0 * PI * r * r,
            // Thomsen's approximation.
            Primitive::Ellipsoid(a) => {
                let p = 1.6075;
                let s = ((a.x * a.y).powf(p) + (a.x * a.z).powf(p) + (a.y * a.z).powf(p)) / 3.0;
                4.0 * PI * s.powf(1.0 / p)
            }
            Primitive::Blob(_) => 4.0 * PI * 1.2,
        }
    }

    fn blob_radius(bumps: &[(Vec3, f64, f64)], u: &Vec3) -> f64 {
        1.0 + bumps
            .iter()
            .map(|(c, amp, w)| amp * ((u.dot(c) - 1.0) / w).exp())
            .sum::<f64>()
    }

    /// A surface point and its sub-part index.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, u32) {
        match self {
            Primitive::Cuboid(h) => {
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let axis = pick(rng, &areas);
                let mut p = Vec3::new(
                    rng.gen_range(-h.x..h.x),
                    rng.gen_range(-h.y..h.y),
                    rng.gen_range(-h.z..h.z),
                );
                p[axis] = if rng.gen_bool(0.5) { h[axis] } else { -h[axis] };
                (p, axis as u32)
            }
            Primitive::Cylinder { r, h } => {
                let th = rng.gen_range(0.0..2.0 * PI);
                if pick(rng, &[2.0 * h, *r]) == 0 {
                    (Vec3::new(r * th.cos(), r * th.sin(), rng.gen_range(-h..*h)), 0)
                } else {
                    let rr = r * rng.gen::<f64>().sqrt();
                    let z = if rng.gen_bool(0.5) { *h } else { -h };
                    (Vec3::new(rr * th.cos(), rr * th.sin(), z), 1)
                }
            }
            Primitive::Ellipsoid(a) => {
                let u = unit(rng);
                let p = u.component_mul(a);
                (p, u.iamax() as u32)
            }
            Primitive::Blob(bumps) => {
                let u = unit(rng);
                let part = bumps
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1 .0.dot(&u).total_cmp(&y.1 .0.dot(&u)))
                    .map_or(0, |b| b.0);
                (u * Self::blob_radius(bumps, &u), part as u32)
            }
        }
    }

    fn contains(&self, p: &Vec3) -> bool {
        let e = 1e-9;
        match self {
            Primitive::Cuboid(h) => (0..3).all(|i| p[i].abs() < h[i] - e),
            Primitive::Cylinder { r, h } => p.x * p.x + p.y * p.y < r * r - e && p.z.abs() < h - e,
            Primitive::Ellipsoid(a) => p.component_div(a).norm_squared() < 1.0 - e,
            Primitive::Blob(b) => {
                let n = p.norm();
                n < e || n < Self::blob_radius(b, &(p / n)) - e
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Archetype {
    parts: Vec<(Primitive, Vec3)>,
    kind: ShapeKind,
    label_base: u32,
}

impl Archetype {
    fn new(kind: ShapeKind, index: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut r = |lo: f64, hi: f64| rng.gen_range(lo..hi);
        let parts = match kind {
            ShapeKind::Box => vec![(Primitive::Cuboid(Vec3::new(r(0.5, 1.0), r(0.5, 1.0), r(0.5, 1.0))), Vec3::zeros())],
            ShapeKind::Cylinder => vec![(Primitive::Cylinder { r: r(0.4, 0.7), h: r(0.6, 1.0) }, Vec3::zeros())],
            ShapeKind::Ellipsoid => vec![(Primitive::Ellipsoid(Vec3::new(r(0.5, 1.0), r(0.5, 1.0), r(0.5, 1.0))), Vec3::zeros())],
            ShapeKind::Composite => {
                let body = Vec3::new(r(0.5, 0.8), r(0.4, 0.6), r(0.3, 0.5));
                let (cr, ch) = (r(0.15, 0.25), r(0.3, 0.5));
                let ell = Vec3::new(r(0.3, 0.5), r(0.2, 0.3), r(0.2, 0.3));
                vec![
                    (Primitive::Cuboid(body), Vec3::zeros()),
                    (
                        Primitive::Cylinder { r: cr, h: ch },
                        Vec3::new(-0.3 * body.x, 0.4 * body.y, body.z + ch * 0.8),
                    ),
                    (Primitive::Ellipsoid(ell), Vec3::new(body.x + 0.7 * ell.x, -0.2 * body.y, 0.0)),
                ]
            }
            ShapeKind::Blob => {
                let mut bumps = Vec::new();
                for _ in 0..8 {
                    let c = unit(rng);
                    let amp = rng.gen_range(-0.25..0.4);
                    let w = rng.gen_range(0.05..0.2);
                    bumps.push((c, amp, w));
                }
                vec![(Primitive::Blob(bumps), Vec3::zeros())]
            }
        };
        Archetype {
            parts,
            kind,
            label_base: (index as u32) * 64,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, u32) {
        let areas: Vec<f64> = self.parts.iter().map(|p| p.0.area()).collect();
        loop {
            let which = pick(rng, &areas);
            let (prim, off) = &self.parts[which];
            let (p, sub) = prim.sample(rng);
            let q = p + off;
            let hidden = self
                .parts
                .iter()
                .enumerate()
                .any(|(j, (o, oo))| j != which && o.contains(&(q - oo)));
            if !hidden {
                return (q, self.label_base + 4 * which as u32 + sub);
            }
        }
    }

    /// Keypoints in the archetype frame with their part labels and, for
    /// mirror-symmetric shapes, the orbit they belong to.
    fn keypoints(
        &self,
        k: usize,
        rng: &mut ChaCha8Rng,
        stable: &dyn Fn(&Vec3) -> bool,
    ) -> Vec<(Vec3, u32, Option<u32>)> {
        let min_sep = 0.15;
        let far_enough = |out: &[(Vec3, u32, Option<u32>)], p: &Vec3| {
            out.iter().all(|(q, _, _)| (q - p).norm() >= min_sep) && stable(p)
        };
        let mut out: Vec<(Vec3, u32, Option<u32>)> = Vec::with_capacity(k);
        let mut attempts = 0;
        if self.kind.mirror_symmetric() {
            let mut orbit = 0u32;
            while out.len() < k {
                let (p, label) = self.sample(rng);
                let base = p.abs();
                attempts += 1;
                if attempts < 20_000 && (base.min() < min_sep || !far_enough(&out, &base)) {
                    continue;
                }
                for s in 0..8 {
                    let m = Vec3::new(
                        if s & 1 == 0 { base.x } else { -base.x },
                        if s & 2 == 0 { base.y } else { -base.y },
                        if s & 4 == 0 { base.z } else { -base.z },
                    );
                    if out.len() < k {
                        out.push((m, label, Some(orbit)));
                    }
                }
                orbit += 1;
            }
        } else {
            while out.len() < k {
                let (p, label) = self.sample(rng);
                attempts += 1;
                if attempts < 20_000 && !far_enough(&out, &p) {
                    continue;
                }
                out.push((p, label, None));
            }
        }
        log::debug!("{} keypoints after {attempts} attempts", out.len());
        out
    }
}

fn pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut t = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if t < *w {
            return i;
        }
        t -= w;
    }
    weights.len() - 1
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn jitter(p: Vec3, sigma: f64, rng: &mut ChaCha8Rng) -> Vec3 {
    if sigma == 0.0 {
        return p;
    }
    p + Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ) * sigma
}

/// Whether the reference frame at `p` comes out the same (all axes within
/// about 18°) in every probe cloud.
fn repeatable_frame(probes: &[Vec<Vec3>], p: &Vec3, radius: f64) -> bool {
    let mut frames = Vec::with_capacity(probes.len());
    for probe in probes {
        let mut pts = probe.clone();
        pts.push(*p);
        let cloud = PointCloud::new("probe", pts);
        match compute_lrf(&cloud, cloud.len() - 1, radius) {
            Ok(l) => frames.push(l.axes),
            Err(_) => return false,
        }
    }
    frames.windows(2).all(|w| (0..3).all(|r| w[0].row(r).dot(&w[1].row(r)) > 0.95))
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x1_0000).wrapping_add(b));
    rng
}

/// Samples every archetype, instantiates it under random rigid motions with
/// jitter and builds exact correspondences between all instance pairs of
/// the same archetype.
pub fn generate_synthetic_corpus(spec: &SynthSpec) -> Result<SyntheticCorpus> {
    if spec.kinds.len() * spec.instances < 2 {
        return Err(Error::invalid("need at least 2 models"));
    }
    if spec.keypoints == 0 || spec.points < spec.keypoints {
        return Err(Error::invalid("need 1 ≤ keypoints ≤ points"));
    }
    if !(spec.noise >= 0.0) || !spec.noise.is_finite() {
        return Err(Error::invalid("noise must be finite and ≥ 0"));
    }
    let mut models = Vec::new();
    let mut poses = Vec::new();
    let mut archetype_of = Vec::new();
    let mut archetype_keypoints = Vec::new();
    let mut correspondences = Vec::new();
    for (ai, &kind) in spec.kinds.iter().enumerate() {
        let mut arng = stream(spec.seed, ai as u64, 0);
        let arch = Archetype::new(kind, ai, &mut arng);
        let probes: Vec<Vec<Vec3>> = match spec.stable_radius {
            Some(_) => (0..3)
                .map(|_| {
                    (0..spec.points)
                        .map(|_| jitter(arch.sample(&mut arng).0, spec.noise, &mut arng))
                        .collect()
                })
                .collect(),
            None => Vec::new(),
        };
        let stable = |p: &Vec3| match spec.stable_radius {
            Some(r) => repeatable_frame(&probes, p, r),
            None => true,
        };
        let kps = arch.keypoints(spec.keypoints, &mut arng, &stable);
        archetype_keypoints.push(kps.iter().map(|k| k.0).collect());
        let first = models.len();
        for inst in 0..spec.instances {
            let mut rng = stream(spec.seed, ai as u64, inst as u64 + 1);
            let mut pts: Vec<Vec3> = kps.iter().map(|k| k.0).collect();
            while pts.len() < spec.points {
                pts.push(arch.sample(&mut rng).0);
            }
            if spec.noise > 0.0 {
                for p in pts.iter_mut() {
                    *p = jitter(*p, spec.noise, &mut rng);
                }
            }
            let pose = RigidMotion::random(&mut rng);
            let mut order: Vec<usize> = (0..pts.len()).collect();
            order.shuffle(&mut rng);
            let mut slot = vec![0usize; pts.len()];
            for (new, &old) in order.iter().enumerate() {
                slot[old] = new;
            }
            let points: Vec<Vec3> = order.iter().map(|&o| pose.apply(&pts[o])).collect();
            let cloud = PointCloud::new(format!("{}{}_{}", kind.name(), ai, inst), points);
            models.push(CorpusModel {
                cloud,
                keypoints: (0..kps.len()).map(|k| slot[k]).collect(),
                part_labels: kps.iter().map(|k| k.1).collect(),
            });
            poses.push(pose);
            archetype_of.push(ai);
        }
        for i in 0..spec.instances {
            for j in i + 1..spec.instances {
                let (ma, mb) = (first + i, first + j);
                let mut set = CorrespondenceSet::new(ma, mb);
                for (k, kp) in kps.iter().enumerate() {
                    set.push(models[ma].keypoints[k], models[mb].keypoints[k], kp.2);
                }
                correspondences.push(set);
            }
        }
    }
    let corpus = Corpus {
        models,
        correspondences,
    };
    corpus.validate()?;
    Ok(SyntheticCorpus {
        corpus,
        poses,
        archetype_of,
        archetype_keypoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kinds: Vec<ShapeKind>, noise: f64) -> SynthSpec {
        SynthSpec {
            kinds,
            instances: 3,
            points: 600,
            keypoints: 24,
            noise,
            stable_radius: None,
            seed: 11,
        }
    }

    #[test]
    fn noiseless_correspondences_follow_the_poses() {
        let s = generate_synthetic_corpus(&spec(vec![ShapeKind::Box, ShapeKind::Composite, ShapeKind::Blob], 0.0)).unwrap();
        assert_eq!(s.corpus.models.len(), 9);
        assert_eq!(s.corpus.correspondences.len(), 9);
        for set in &s.corpus.correspondences {
            let (pa, pb) = (&s.poses[set.model_a], &s.poses[set.model_b]);
            let ca = &s.corpus.models[set.model_a].cloud;
            let cb = &s.corpus.models[set.model_b].cloud;
            for &(a, b) in &set.pairs {
                let mapped = pb.apply(&pa.inverse().apply(&ca.points[a]));
                assert!((mapped - cb.points[b]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_synthetic_corpus(&spec(vec![ShapeKind::Cylinder, ShapeKind::Ellipsoid], 0.01)).unwrap();
        let b = generate_synthetic_corpus(&spec(vec![ShapeKind::Cylinder, ShapeKind::Ellipsoid], 0.01)).unwrap();
        for (x, y) in a.corpus.models.iter().zip(&b.corpus.models) {
            assert_eq!(x.cloud.points, y.cloud.points);
            assert_eq!(x.keypoints, y.keypoints);
        }
        assert_eq!(a.corpus.correspondences, b.corpus.correspondences);
    }

    #[test]
    fn box_groups_are_mirror_images() {
        let s = generate_synthetic_corpus(&spec(vec![ShapeKind::Box], 0.0)).unwrap();
        let set = &s.corpus.correspondences[0];
        let inv = s.poses[set.model_b].inverse();
        let cloud = &s.corpus.models[set.model_b].cloud;
        let canon = |i: usize| inv.apply(&cloud.points[i]);
        let mut groups: std::collections::BTreeMap<u32, Vec<Vec3>> = Default::default();
        for (&kp, &g) in &set.sym_b {
            groups.entry(g).or_default().push(canon(kp));
        }
        assert!(groups.len() >= 3);
        for members in groups.values() {
            let base = members[0].abs();
            for m in members {
                assert!((m.abs() - base).norm() < 1e-9);
            }
            // Members are distinct reflections.
            for (i, a) in members.iter().enumerate() {
                for b in &members[i + 1..] {
                    assert!((a - b).norm() > 1e-6);
                }
            }
        }
        // Keypoints lie on the box surface.
        let Primitive::Cuboid(h) = Archetype::new(ShapeKind::Box, 0, &mut stream(11, 0, 0)).parts[0].0 else {
            panic!()
        };
        for p in &s.archetype_keypoints[0] {
            assert!((0..3).all(|i| p[i].abs() <= h[i] + 1e-12));
            assert!((0..3).any(|i| (p[i].abs() - h[i]).abs() < 1e-12));
        }
    }

    #[test]
    fn composite_points_avoid_interiors() {
        let mut rng = stream(3, 1, 0);
        let a = Archetype::new(ShapeKind::Composite, 1, &mut rng);
        for _ in 0..2000 {
            let (p, label) = a.sample(&mut rng);
            let part = ((label - 64) / 4) as usize;
            for (j, (prim, off)) in a.parts.iter().enumerate() {
                if j != part {
                    assert!(!prim.contains(&(p - off)));
                }
            }
        }
    }

    #[test]
    fn rejects_single_model() {
        let mut s = spec(vec![ShapeKind::Box], 0.0);
        s.instances = 1;
        assert!(generate_synthetic_corpus(&s).is_err());
    }
}
