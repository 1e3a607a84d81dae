//! Training-set construction: positive pairs from ground-truth
//! correspondences, soft negatives by baseline-descriptor distance, hard
//! negatives by ratio-test matches between distinct parts, and
//! multi-resolution augmentation of the corpus.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baseline::{euclidean, nndr_match, HistogramBins, HistogramExtractor};
use crate::error::{Error, Result};
use crate::evaluation::CorrespondenceSet;
use crate::geometry::{
    compute_resolution, estimate_normals, subsample_indices, Patch, PatchConfig, PatchExtractor,
    PointCloud,
};

/// One corpus entry. `part_labels[i]` is the part of `keypoints[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusModel {
    pub cloud: PointCloud,
    pub keypoints: Vec<usize>,
    pub part_labels: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub models: Vec<CorpusModel>,
    pub correspondences: Vec<CorrespondenceSet>,
}

/// A keypoint identified by model position and point index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeypointRef {
    pub model: usize,
    pub index: usize,
}

impl KeypointRef {
    pub fn new(model: usize, index: usize) -> Self {
        KeypointRef { model, index }
    }
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        for (mi, m) in self.models.iter().enumerate() {
            if m.keypoints.len() != m.part_labels.len() {
                return Err(Error::invalid(format!(
                    "model {}: {} keypoints but {} part labels",
                    m.cloud.id,
                    m.keypoints.len(),
                    m.part_labels.len()
                )));
            }
            if let Some(&bad) = m.keypoints.iter().find(|&&k| k >= m.cloud.len()) {
                return Err(Error::invalid(format!("model {mi}: keypoint {bad} out of range")));
            }
            let uniq: BTreeSet<_> = m.keypoints.iter().collect();
            if uniq.len() != m.keypoints.len() {
                return Err(Error::invalid(format!("model {mi}: repeated keypoint")));
            }
        }
        for set in &self.correspondences {
            let (Some(a), Some(b)) = (self.models.get(set.model_a), self.models.get(set.model_b)) else {
                return Err(Error::invalid("correspondence references a missing model"));
            };
            for &(ia, ib) in &set.pairs {
                if !a.keypoints.contains(&ia) || !b.keypoints.contains(&ib) {
                    return Err(Error::invalid(format!(
                        "correspondence ({ia}, {ib}) between models {} and {} is not between keypoints",
                        set.model_a, set.model_b
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn label_of(&self, k: KeypointRef) -> Option<u32> {
        let m = self.models.get(k.model)?;
        let pos = m.keypoints.iter().position(|&i| i == k.index)?;
        Some(m.part_labels[pos])
    }

    /// Unordered ground-truth pairs, each stored as `(min, max)`.
    pub fn ground_truth(&self) -> HashSet<(KeypointRef, KeypointRef)> {
        let mut out = HashSet::new();
        for s in &self.correspondences {
            for &(a, b) in &s.pairs {
                out.insert(ordered(KeypointRef::new(s.model_a, a), KeypointRef::new(s.model_b, b)));
            }
        }
        out
    }

    /// The models at `keep` (in that order) and the correspondence sets
    /// lying entirely inside them.
    pub fn subset(&self, keep: &[usize]) -> Corpus {
        let remap: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        Corpus {
            models: keep.iter().map(|&i| self.models[i].clone()).collect(),
            correspondences: self
                .correspondences
                .iter()
                .filter_map(|s| {
                    let (a, b) = (*remap.get(&s.model_a)?, *remap.get(&s.model_b)?);
                    Some(CorrespondenceSet {
                        model_a: a,
                        model_b: b,
                        ..s.clone()
                    })
                })
                .collect(),
        }
    }

    /// Splits models globally by a seeded hash of their id: a model lands
    /// in the first set when its hash falls below `train_fraction`.
    pub fn split(&self, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, m) in self.models.iter().enumerate() {
            let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            for b in m.cloud.id.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= h >> 33;
            h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
            h ^= h >> 33;
            if (h as f64 / u64::MAX as f64) < train_fraction {
                train.push(i);
            } else {
                test.push(i);
            }
        }
        (train, test)
    }
}

fn ordered(a: KeypointRef, b: KeypointRef) -> (KeypointRef, KeypointRef) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Positive,
    SoftNegative,
    HardNegative,
}

impl PairLabel {
    /// 1 for positives, 0 for negatives.
    pub fn y(self) -> f64 {
        match self {
            PairLabel::Positive => 1.0,
            _ => 0.0,
        }
    }

    /// Hardness of a negative; `None` for positives.
    pub fn gamma(self) -> Option<f64> {
        match self {
            PairLabel::Positive => None,
            PairLabel::SoftNegative => Some(0.0),
            PairLabel::HardNegative => Some(1.0),
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            PairLabel::Positive => 0,
            PairLabel::SoftNegative => 1,
            PairLabel::HardNegative => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => PairLabel::Positive,
            1 => PairLabel::SoftNegative,
            2 => PairLabel::HardNegative,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub a: KeypointRef,
    pub b: KeypointRef,
    pub patch_a: Patch,
    pub patch_b: Patch,
    pub label: PairLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriplet {
    pub anchor: Patch,
    pub positive: Patch,
    pub negative: Patch,
}

/// What the trainer consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainingSet {
    Pairs(Vec<TrainingPair>),
    Triplets(Vec<TrainingTriplet>),
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        match self {
            TrainingSet::Pairs(p) => p.len(),
            TrainingSet::Triplets(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Counts of (positives, soft negatives, hard negatives); triplets
    /// count as positives.
    pub fn counts(&self) -> (usize, usize, usize) {
        match self {
            TrainingSet::Pairs(p) => {
                let c = |l| p.iter().filter(|x| x.label == l).count();
                (c(PairLabel::Positive), c(PairLabel::SoftNegative), c(PairLabel::HardNegative))
            }
            TrainingSet::Triplets(t) => (t.len(), 0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    pub patch: PatchConfig,
    /// Minimum baseline-descriptor distance for a soft negative. Histograms
    /// are unit-norm, so distances lie in `[0, √2]`.
    pub soft_threshold: f64,
    pub nndr_ratio: f64,
    /// `None` balances positives:soft:hard as 2:1:1.
    pub soft_budget: Option<usize>,
    pub hard_budget: Option<usize>,
    /// Ordered model pairs sampled for cross-model hard negatives; `None`
    /// uses one per model.
    pub cross_model_pairs: Option<usize>,
    pub bins: HistogramBins,
    /// Neighbours used when a cloud carries no normals.
    pub normal_k: usize,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            patch: PatchConfig::default(),
            soft_threshold: 0.7,
            nndr_ratio: 0.8,
            soft_budget: None,
            hard_budget: None,
            cross_model_pairs: None,
            bins: HistogramBins::default(),
            normal_k: 10,
            seed: 0,
        }
    }
}

/// Patches and baseline descriptors of every keypoint in a corpus,
/// computed once and shared by the mining passes.
pub struct Miner<'c> {
    corpus: &'c Corpus,
    cfg: MiningConfig,
    patches: Vec<BTreeMap<usize, Patch>>,
    baseline: Vec<BTreeMap<usize, Vec<f64>>>,
    labels: Vec<BTreeMap<usize, u32>>,
    gt: HashSet<(KeypointRef, KeypointRef)>,
}

impl<'c> Miner<'c> {
    pub fn new(corpus: &'c Corpus, cfg: MiningConfig) -> Result<Self> {
        corpus.validate()?;
        cfg.patch.validate()?;
        if !(cfg.nndr_ratio > 0.0 && cfg.nndr_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!("NNDR ratio {} outside (0, 1]", cfg.nndr_ratio)));
        }
        let mut patches = Vec::with_capacity(corpus.models.len());
        let mut baseline = Vec::with_capacity(corpus.models.len());
        let mut failed = 0usize;
        for m in &corpus.models {
            let ex = PatchExtractor::new(&m.cloud, cfg.patch)?;
            let mut pm = BTreeMap::new();
            for &k in &m.keypoints {
                match ex.extract(k) {
                    Ok(p) => {
                        pm.insert(k, p);
                    }
                    Err(_) => failed += 1,
                }
            }
            patches.push(pm);
            let with_normals;
            let cloud = if m.cloud.normals.is_some() {
                &m.cloud
            } else {
                with_normals = estimate_normals(&m.cloud, cfg.normal_k)?;
                &with_normals
            };
            let hx = HistogramExtractor::new(cloud, cfg.patch.radius, cfg.bins)?;
            let mut bm = BTreeMap::new();
            for &k in &m.keypoints {
                if let Ok(d) = hx.compute(k) {
                    bm.insert(k, d.values);
                }
            }
            baseline.push(bm);
        }
        if failed > 0 {
            log::info!("{failed} keypoint patches could not be extracted and are skipped");
        }
        let labels = corpus
            .models
            .iter()
            .map(|m| m.keypoints.iter().copied().zip(m.part_labels.iter().copied()).collect())
            .collect();
        Ok(Miner {
            corpus,
            cfg,
            patches,
            baseline,
            labels,
            gt: corpus.ground_truth(),
        })
    }

    pub fn config(&self) -> &MiningConfig {
        &self.cfg
    }

    pub fn patch(&self, k: KeypointRef) -> Option<&Patch> {
        self.patches.get(k.model)?.get(&k.index)
    }

    pub fn baseline_descriptor(&self, k: KeypointRef) -> Option<&[f64]> {
        self.baseline.get(k.model)?.get(&k.index).map(|v| v.as_slice())
    }

    fn label(&self, k: KeypointRef) -> u32 {
        self.labels[k.model][&k.index]
    }

    fn pair(&self, a: KeypointRef, b: KeypointRef, label: PairLabel) -> Option<TrainingPair> {
        Some(TrainingPair {
            a,
            b,
            patch_a: self.patch(a)?.clone(),
            patch_b: self.patch(b)?.clone(),
            label,
        })
    }

    /// Keypoints with both a patch and a baseline descriptor, in canonical
    /// order.
    fn usable(&self) -> Vec<KeypointRef> {
        let mut out = Vec::new();
        for (mi, m) in self.corpus.models.iter().enumerate() {
            let mut ks = m.keypoints.clone();
            ks.sort_unstable();
            for k in ks {
                let r = KeypointRef::new(mi, k);
                if self.patch(r).is_some() && self.baseline_descriptor(r).is_some() {
                    out.push(r);
                }
            }
        }
        out
    }

    pub fn positives(&self) -> Result<Vec<TrainingPair>> {
        if self.corpus.correspondences.is_empty() {
            return Err(Error::EmptyDataset("corpus has no correspondences".into()));
        }
        let mut out = Vec::new();
        let mut skipped = 0usize;
        for s in &self.corpus.correspondences {
            for &(ia, ib) in &s.pairs {
                let (a, b) = (KeypointRef::new(s.model_a, ia), KeypointRef::new(s.model_b, ib));
                match self.pair(a, b, PairLabel::Positive) {
                    Some(p) => out.push(p),
                    None => skipped += 1,
                }
            }
        }
        if skipped > 0 {
            log::info!("{skipped} correspondences skipped for lack of a patch");
        }
        if out.is_empty() {
            return Err(Error::EmptyDataset("no correspondence yields two valid patches".into()));
        }
        Ok(out)
    }

    fn default_budget(&self, given: Option<usize>) -> usize {
        given.unwrap_or_else(|| {
            let n: usize = self.corpus.correspondences.iter().map(|s| s.pairs.len()).sum();
            (n / 2).max(1)
        })
    }

    /// Draws up to `budget` candidates with the seed and returns them in
    /// canonical order.
    fn select(&self, mut cands: Vec<(KeypointRef, KeypointRef)>, budget: usize, salt: u64) -> Vec<(KeypointRef, KeypointRef)> {
        cands.sort_unstable();
        cands.dedup();
        if cands.len() > budget {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ salt);
            let mut pick = index::sample(&mut rng, cands.len(), budget).into_vec();
            pick.sort_unstable();
            cands = pick.into_iter().map(|i| cands[i]).collect();
        }
        cands
    }

    pub fn soft_negatives(&self, budget: Option<usize>) -> Result<Vec<TrainingPair>> {
        let budget = self.default_budget(budget.or(self.cfg.soft_budget));
        if budget == 0 {
            return Ok(Vec::new());
        }
        let keys = self.usable();
        let mut cands = Vec::new();
        for (i, &a) in keys.iter().enumerate() {
            let da = self.baseline_descriptor(a).unwrap();
            let la = self.label(a);
            for &b in &keys[i + 1..] {
                if la == self.label(b) || self.gt.contains(&(a, b)) {
                    continue;
                }
                if euclidean(da, self.baseline_descriptor(b).unwrap()) > self.cfg.soft_threshold {
                    cands.push((a, b));
                }
            }
        }
        if cands.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no distinct-part pair is farther apart than {}",
                self.cfg.soft_threshold
            )));
        }
        Ok(self
            .select(cands, budget, 0x50f7)
            .into_iter()
            .filter_map(|(a, b)| self.pair(a, b, PairLabel::SoftNegative))
            .collect())
    }

    /// Ratio-test matches from each part of model `qa` to the keypoints of
    /// model `tb` lying on other parts, minus ground truth.
    fn nndr_candidates(&self, qa: usize, tb: usize, out: &mut Vec<(KeypointRef, KeypointRef)>) -> Result<()> {
        let keys_a: Vec<KeypointRef> = self.usable().into_iter().filter(|k| k.model == qa).collect();
        let keys_b: Vec<KeypointRef> = self.usable().into_iter().filter(|k| k.model == tb).collect();
        let parts: BTreeSet<u32> = keys_a.iter().map(|&k| self.label(k)).collect();
        for part in parts {
            let q: Vec<KeypointRef> = keys_a.iter().copied().filter(|&k| self.label(k) == part).collect();
            let t: Vec<KeypointRef> = keys_b.iter().copied().filter(|&k| self.label(k) != part).collect();
            if t.len() < 2 {
                continue;
            }
            let qd: Vec<&[f64]> = q.iter().map(|&k| self.baseline_descriptor(k).unwrap()).collect();
            let td: Vec<&[f64]> = t.iter().map(|&k| self.baseline_descriptor(k).unwrap()).collect();
            for m in nndr_match(&qd, &td, self.cfg.nndr_ratio)? {
                let pair = ordered(q[m.query_index], t[m.target_index]);
                if !self.gt.contains(&pair) {
                    out.push(pair);
                }
            }
        }
        Ok(())
    }

    /// The ordered model pairs searched for cross-model hard negatives.
    pub fn cross_model_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.corpus.models.len();
        let all: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (0..n).filter(move |&b| b != a).map(move |b| (a, b)))
            .collect();
        let want = self.cfg.cross_model_pairs.unwrap_or(n).min(all.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xc405);
        let mut pick = index::sample(&mut rng, all.len(), want).into_vec();
        pick.sort_unstable();
        pick.into_iter().map(|i| all[i]).collect()
    }

    pub fn hard_negatives(&self, budget: Option<usize>) -> Result<Vec<TrainingPair>> {
        let budget = self.default_budget(budget.or(self.cfg.hard_budget));
        if budget == 0 {
            return Ok(Vec::new());
        }
        let mut cands = Vec::new();
        for m in 0..self.corpus.models.len() {
            self.nndr_candidates(m, m, &mut cands)?;
        }
        for (a, b) in self.cross_model_pairs() {
            self.nndr_candidates(a, b, &mut cands)?;
        }
        if cands.is_empty() {
            return Err(Error::EmptyDataset("no ratio-test match between distinct parts".into()));
        }
        Ok(self
            .select(cands, budget, 0x4a2d)
            .into_iter()
            .filter_map(|(a, b)| self.pair(a, b, PairLabel::HardNegative))
            .collect())
    }

    /// One triplet per positive pair, with the negative drawn uniformly from
    /// keypoints on a different part that do not correspond to the anchor.
    pub fn triplets(&self) -> Result<Vec<TrainingTriplet>> {
        let positives = self.positives()?;
        let pool: Vec<KeypointRef> = self
            .corpus
            .models
            .iter()
            .enumerate()
            .flat_map(|(mi, m)| {
                let mut ks = m.keypoints.clone();
                ks.sort_unstable();
                ks.into_iter().map(move |k| KeypointRef::new(mi, k))
            })
            .filter(|&k| self.patch(k).is_some())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x7319);
        let mut out = Vec::with_capacity(positives.len());
        for p in positives {
            let la = self.label(p.a);
            let ok: Vec<KeypointRef> = pool
                .iter()
                .copied()
                .filter(|&n| self.label(n) != la && !self.gt.contains(&ordered(p.a, n)))
                .collect();
            let Some(&n) = ok.choose(&mut rng) else { continue };
            out.push(TrainingTriplet {
                anchor: p.patch_a,
                positive: p.patch_b,
                negative: self.patch(n).unwrap().clone(),
            });
        }
        if out.is_empty() {
            return Err(Error::EmptyDataset("no anchor has an admissible negative".into()));
        }
        Ok(out)
    }
}

pub fn build_positive_pairs(corpus: &Corpus, patch: &PatchConfig) -> Result<Vec<TrainingPair>> {
    let cfg = MiningConfig {
        patch: *patch,
        ..MiningConfig::default()
    };
    Miner::new(corpus, cfg)?.positives()
}

pub fn mine_soft_negatives(corpus: &Corpus, cfg: &MiningConfig) -> Result<Vec<TrainingPair>> {
    Miner::new(corpus, cfg.clone())?.soft_negatives(None)
}

pub fn mine_hard_negatives(corpus: &Corpus, cfg: &MiningConfig) -> Result<Vec<TrainingPair>> {
    Miner::new(corpus, cfg.clone())?.hard_negatives(None)
}

/// Positives followed by both negative sets. For losses without a hardness
/// term the two negative kinds are simply treated alike.
pub fn build_pair_set(corpus: &Corpus, cfg: &MiningConfig) -> Result<Vec<TrainingPair>> {
    let miner = Miner::new(corpus, cfg.clone())?;
    let mut out = miner.positives()?;
    let soft = match cfg.soft_budget {
        Some(0) => Vec::new(),
        _ => miner.soft_negatives(None)?,
    };
    let hard = match cfg.hard_budget {
        Some(0) => Vec::new(),
        _ => miner.hard_negatives(None)?,
    };
    out.extend(soft);
    out.extend(hard);
    Ok(out)
}

pub fn build_triplets(corpus: &Corpus, cfg: &MiningConfig) -> Result<Vec<TrainingTriplet>> {
    Miner::new(corpus, cfg.clone())?.triplets()
}

/// Checks that no negative pair is a ground-truth correspondence.
pub fn audit_labels(corpus: &Corpus, pairs: &[TrainingPair]) -> Result<()> {
    let gt = corpus.ground_truth();
    for p in pairs {
        if p.label != PairLabel::Positive && gt.contains(&ordered(p.a, p.b)) {
            return Err(Error::invalid(format!(
                "negative pair {:?}-{:?} is a ground-truth correspondence",
                p.a, p.b
            )));
        }
    }
    Ok(())
}

/// Appends, for every fraction, a subsampled copy of every model. Keypoints
/// move to their nearest retained point and are dropped when that point is
/// farther than twice the original cloud resolution or already taken.
pub fn augment_multiresolution(corpus: &Corpus, fractions: &[f64], seed: u64) -> Result<Corpus> {
    corpus.validate()?;
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f < 1.0)) {
        return Err(Error::invalid(format!("fraction {f} outside (0, 1)")));
    }
    let mut out = corpus.clone();
    let n = corpus.models.len();
    for (fi, &f) in fractions.iter().enumerate() {
        let base = out.models.len();
        // Per model: old keypoint index -> new keypoint index.
        let mut maps: Vec<BTreeMap<usize, usize>> = Vec::with_capacity(n);
        for (mi, m) in corpus.models.iter().enumerate() {
            let mr = compute_resolution(&m.cloud)?;
            let s = seed ^ ((fi as u64) << 32 | mi as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            let kept = subsample_indices(m.cloud.len(), f, s)?;
            let mut cloud = m.cloud.select(&kept);
            cloud.id = format!("{}@{}", m.cloud.id, f);
            let tree = cloud.kdtree();
            let mut map = BTreeMap::new();
            let mut used = BTreeSet::new();
            let mut keypoints = Vec::new();
            let mut labels = Vec::new();
            for (&k, &label) in m.keypoints.iter().zip(&m.part_labels) {
                let Some(&(j, d)) = tree.nearest_k(&m.cloud.points[k], 1).first() else { continue };
                if d > 2.0 * mr || !used.insert(j) {
                    continue;
                }
                map.insert(k, j);
                keypoints.push(j);
                labels.push(label);
            }
            out.models.push(CorpusModel {
                cloud,
                keypoints,
                part_labels: labels,
            });
            maps.push(map);
        }
        for s in &corpus.correspondences {
            let (ma, mb) = (&maps[s.model_a], &maps[s.model_b]);
            let mut set = CorrespondenceSet::new(base + s.model_a, base + s.model_b);
            for &(a, b) in &s.pairs {
                if let (Some(&na), Some(&nb)) = (ma.get(&a), mb.get(&b)) {
                    set.pairs.push((na, nb));
                    if let Some(&g) = s.sym_a.get(&a) {
                        set.sym_a.insert(na, g);
                    }
                    if let Some(&g) = s.sym_b.get(&b) {
                        set.sym_b.insert(nb, g);
                    }
                }
            }
            if !set.pairs.is_empty() {
                out.correspondences.push(set);
            }
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::{generate_synthetic_corpus, ShapeKind, SynthSpec};

    fn corpus() -> Corpus {
        generate_synthetic_corpus(&SynthSpec {
            kinds: vec![ShapeKind::Composite, ShapeKind::Blob],
            instances: 2,
            points: 900,
            keypoints: 16,
            noise: 0.0,
            stable_radius: None,
            seed: 5,
        })
        .unwrap()
        .corpus
    }

    fn cfg() -> MiningConfig {
        MiningConfig {
            patch: PatchConfig {
                radius: 0.4,
                n_points: 16,
                theta_min: 0.1,
            },
            soft_threshold: 0.3,
            seed: 9,
            ..MiningConfig::default()
        }
    }

    #[test]
    fn one_positive_per_correspondence() {
        let c = corpus();
        let p = build_positive_pairs(&c, &cfg().patch).unwrap();
        let n: usize = c.correspondences.iter().map(|s| s.pairs.len()).sum();
        assert_eq!(p.len(), n);
        assert!(p.iter().all(|x| x.label == PairLabel::Positive && x.label.gamma().is_none()));
    }

    #[test]
    fn self_correspondence_gives_identical_patches() {
        let mut c = corpus();
        let k = c.models[0].keypoints[0];
        c.correspondences = vec![CorrespondenceSet {
            pairs: vec![(k, k)],
            ..CorrespondenceSet::new(0, 0)
        }];
        let p = build_positive_pairs(&c, &cfg().patch).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].patch_a, p[0].patch_b);
    }

    #[test]
    fn sparse_endpoint_is_skipped() {
        let mut c = corpus();
        // A far-away isolated keypoint has no support.
        let m = &mut c.models[0];
        m.cloud.points.push(crate::geometry::Vec3::new(100.0, 0.0, 0.0));
        let lone = m.cloud.len() - 1;
        m.keypoints.push(lone);
        m.part_labels.push(999);
        let b = c.models[1].keypoints[0];
        c.correspondences[0].pairs.push((lone, b));
        let total: usize = c.correspondences.iter().map(|s| s.pairs.len()).sum();
        let p = build_positive_pairs(&c, &cfg().patch).unwrap();
        assert_eq!(p.len(), total - 1);
    }

    #[test]
    fn negatives_are_sound_and_deterministic() {
        let c = corpus();
        let miner = Miner::new(&c, cfg()).unwrap();
        let soft = miner.soft_negatives(Some(50)).unwrap();
        let hard = miner.hard_negatives(Some(50)).unwrap();
        assert!(!soft.is_empty() && !hard.is_empty());
        assert!(soft.len() <= 50 && hard.len() <= 50);
        audit_labels(&c, &soft).unwrap();
        audit_labels(&c, &hard).unwrap();
        for p in &soft {
            assert_ne!(c.label_of(p.a), c.label_of(p.b));
            let d = euclidean(miner.baseline_descriptor(p.a).unwrap(), miner.baseline_descriptor(p.b).unwrap());
            assert!(d > 0.3);
            assert_eq!(p.label.gamma(), Some(0.0));
        }
        assert!(hard.iter().all(|p| p.label.gamma() == Some(1.0)));
        let again = Miner::new(&c, cfg()).unwrap();
        assert_eq!(again.soft_negatives(Some(50)).unwrap(), soft);
        assert_eq!(again.hard_negatives(Some(50)).unwrap(), hard);
        let merged = build_pair_set(&c, &MiningConfig { soft_budget: Some(50), hard_budget: Some(50), ..cfg() }).unwrap();
        let pos = miner.positives().unwrap().len();
        assert_eq!(merged.len(), pos + soft.len() + hard.len());
    }

    #[test]
    fn huge_threshold_finds_nothing() {
        let c = corpus();
        let r = mine_soft_negatives(&c, &MiningConfig { soft_threshold: 2.0, ..cfg() });
        assert!(matches!(r, Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn hard_negatives_replay_the_ratio_test() {
        let c = corpus();
        let miner = Miner::new(&c, cfg()).unwrap();
        let got: BTreeSet<_> = miner.hard_negatives(Some(usize::MAX)).unwrap().iter().map(|p| (p.a, p.b)).collect();
        // Hand replay: same-model plus sampled cross-model pairs.
        let gt = c.ground_truth();
        let mut want = BTreeSet::new();
        let mut pairs: Vec<(usize, usize)> = (0..c.models.len()).map(|m| (m, m)).collect();
        pairs.extend(miner.cross_model_pairs());
        for (qa, tb) in pairs {
            let ka: Vec<usize> = c.models[qa].keypoints.clone();
            for &part in c.models[qa].part_labels.iter().collect::<BTreeSet<_>>() {
                let mut q: Vec<KeypointRef> = ka
                    .iter()
                    .zip(&c.models[qa].part_labels)
                    .filter(|(_, &l)| l == part)
                    .map(|(&k, _)| KeypointRef::new(qa, k))
                    .filter(|&k| miner.baseline_descriptor(k).is_some() && miner.patch(k).is_some())
                    .collect();
                q.sort();
                let mut t: Vec<KeypointRef> = c.models[tb]
                    .keypoints
                    .iter()
                    .zip(&c.models[tb].part_labels)
                    .filter(|(_, &l)| l != part)
                    .map(|(&k, _)| KeypointRef::new(tb, k))
                    .filter(|&k| miner.baseline_descriptor(k).is_some() && miner.patch(k).is_some())
                    .collect();
                t.sort();
                if t.len() < 2 {
                    continue;
                }
                for &a in &q {
                    let da = miner.baseline_descriptor(a).unwrap();
                    let mut ds: Vec<(f64, usize)> = t
                        .iter()
                        .enumerate()
                        .map(|(i, &b)| (euclidean(da, miner.baseline_descriptor(b).unwrap()), i))
                        .collect();
                    ds.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                    let ratio = if ds[1].0 == 0.0 { 1.0 } else { ds[0].0 / ds[1].0 };
                    if ratio <= 0.8 {
                        let p = ordered(a, t[ds[0].1]);
                        if !gt.contains(&p) {
                            want.insert(p);
                        }
                    }
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn ground_truth_matches_are_never_hard_negatives() {
        // Two copies of the same model: every keypoint's best match across
        // the copies is its own twin, which is ground truth.
        let c0 = corpus();
        let m = c0.models[0].clone();
        let mut c = Corpus {
            models: vec![m.clone(), m.clone()],
            correspondences: vec![CorrespondenceSet::new(0, 1)],
        };
        for &k in &m.keypoints {
            c.correspondences[0].pairs.push((k, k));
        }
        let miner = Miner::new(&c, MiningConfig { cross_model_pairs: Some(2), ..cfg() }).unwrap();
        if let Ok(h) = miner.hard_negatives(Some(usize::MAX)) {
            audit_labels(&c, &h).unwrap();
        }
    }

    #[test]
    fn triplets_have_foreign_negatives() {
        let c = corpus();
        let t = build_triplets(&c, &cfg()).unwrap();
        let n: usize = c.correspondences.iter().map(|s| s.pairs.len()).sum();
        assert_eq!(t.len(), n);
    }

    #[test]
    fn multiresolution_counts_and_distances() {
        let c = corpus();
        assert_eq!(augment_multiresolution(&c, &[], 1).unwrap(), c);
        let two = c.subset(&[0, 1]);
        let aug = augment_multiresolution(&two, &[0.5], 1).unwrap();
        assert_eq!(aug.models.len(), 4);
        for (mi, m) in two.models.iter().enumerate() {
            let mr = compute_resolution(&m.cloud).unwrap();
            let nm = &aug.models[2 + mi];
            assert!(nm.keypoints.len() <= m.keypoints.len());
            for &k in &nm.keypoints {
                let p = nm.cloud.points[k];
                let closest = m
                    .keypoints
                    .iter()
                    .map(|&o| (m.cloud.points[o] - p).norm())
                    .fold(f64::INFINITY, f64::min);
                assert!(closest <= 2.0 * mr);
            }
        }
        for s in &aug.correspondences[two.correspondences.len()..] {
            assert!(s.model_a >= 2 && s.model_b >= 2);
        }
        assert!(augment_multiresolution(&c, &[1.0], 1).is_err());
    }

    #[test]
    fn split_is_seeded_and_total() {
        let c = corpus();
        let (a, b) = c.split(0.5, 3);
        assert_eq!(a.len() + b.len(), c.models.len());
        assert_eq!(c.split(0.5, 3), (a, b));
        assert_eq!(c.split(1.0, 3).0.len(), c.models.len());
    }
}
