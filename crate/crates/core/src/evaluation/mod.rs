//! Matching metrics between pairs of shapes (precision, recall, CMC and
//! correspondence accuracy) in symmetric and non-symmetric modes, and the
//! synthetic corpus generator used to get exact ground truth.

mod metrics;
mod synth;

use std::collections::BTreeMap;

use crate::baseline::{euclidean, HistogramBins, HistogramExtractor};
use crate::error::{Error, Result};
use crate::geometry::{estimate_normals, PatchConfig, PatchExtractor, PointCloud};
use crate::mining::Corpus;
use crate::model::{encoder_forward, Descriptor, EncoderParams};

pub use metrics::{
    cmc_curve, correspondence_accuracy, decide_matches, evaluate, precision_recall, rank_matches,
    PrecisionRecall, ShapePairResult,
};
pub use synth::{generate_synthetic_corpus, RigidMotion, ShapeKind, SynthSpec, SyntheticCorpus};

/// Ground-truth keypoint correspondences from model `model_a` to `model_b`.
///
/// Indices are point indices into the respective clouds. A keypoint may
/// carry a symmetry-group id; in symmetric mode any member of the true
/// target's group counts as correct.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub model_a: usize,
    pub model_b: usize,
    pub pairs: Vec<(usize, usize)>,
    pub sym_a: BTreeMap<usize, u32>,
    pub sym_b: BTreeMap<usize, u32>,
}

impl CorrespondenceSet {
    pub fn new(model_a: usize, model_b: usize) -> Self {
        CorrespondenceSet {
            model_a,
            model_b,
            ..Default::default()
        }
    }

    /// Adds a pair; `group` tags both endpoints with the same symmetry group.
    pub fn push(&mut self, a: usize, b: usize, group: Option<u32>) {
        self.pairs.push((a, b));
        if let Some(g) = group {
            self.sym_a.insert(a, g);
            self.sym_b.insert(b, g);
        }
    }

    /// Whether `candidate` is an acceptable match for true target `truth`
    /// in model B.
    pub fn target_matches(&self, candidate: usize, truth: usize, mode: SymmetryMode) -> bool {
        if candidate == truth {
            return true;
        }
        mode == SymmetryMode::Symmetric
            && matches!(
                (self.sym_b.get(&candidate), self.sym_b.get(&truth)),
                (Some(x), Some(y)) if x == y
            )
    }

    /// The same correspondences seen from model B.
    pub fn reversed(&self) -> CorrespondenceSet {
        CorrespondenceSet {
            model_a: self.model_b,
            model_b: self.model_a,
            pairs: self.pairs.iter().map(|&(a, b)| (b, a)).collect(),
            sym_a: self.sym_b.clone(),
            sym_b: self.sym_a.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymmetryMode {
    Symmetric,
    NonSymmetric,
}

/// How a decided match set is produced for precision and recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MatchRule {
    MutualNearest,
    Nndr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    /// CMC cutoff; the curve has entries for ranks `1..=k`.
    pub k: usize,
    /// Correspondence error threshold, in units of the target model's
    /// bounding-box diagonal.
    pub tau: f64,
    pub match_rule: MatchRule,
    pub symmetry: SymmetryMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 100,
            tau: 0.25,
            match_rule: MatchRule::MutualNearest,
            symmetry: SymmetryMode::NonSymmetric,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || !(self.tau > 0.0) {
            return Err(Error::InvalidConfig("need k ≥ 1 and tau > 0".into()));
        }
        if let MatchRule::Nndr(r) = self.match_rule {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidConfig(format!("NNDR ratio {r} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub cmc: Vec<f64>,
    pub corr_accuracy: f64,
    /// Set when no match was decided and precision is reported as 0.
    pub no_matches: bool,
}

impl EvalReport {
    /// CMC value at rank `r` (1-based), clamped to the curve length.
    pub fn cmc_at(&self, r: usize) -> f64 {
        self.cmc[(r.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

/// Descriptors of the given keypoints, in order, as `(keypoint, descriptor)`.
/// Keypoints whose patch cannot be extracted are returned separately.
#[derive(Debug, Clone, Default)]
pub struct DescribedKeypoints {
    pub described: Vec<(usize, Descriptor)>,
    pub failed: Vec<usize>,
}

impl DescribedKeypoints {
    pub fn keypoints(&self) -> Vec<usize> {
        self.described.iter().map(|d| d.0).collect()
    }

    pub fn descriptors(&self) -> Vec<&[f64]> {
        self.described.iter().map(|d| d.1.as_slice()).collect()
    }
}

/// Runs the encoder on the patch of every keypoint.
///
/// Returns `EmptyDescriptorSet` only when keypoints were requested and every
/// extraction failed.
pub fn describe_keypoints(
    params: &EncoderParams,
    cloud: &PointCloud,
    keypoints: &[usize],
    patch: &PatchConfig,
) -> Result<DescribedKeypoints> {
    params.check_shapes()?;
    let mut out = DescribedKeypoints::default();
    if keypoints.is_empty() {
        return Ok(out);
    }
    let extractor = PatchExtractor::new(cloud, *patch)?;
    for &kp in keypoints {
        match extractor.extract(kp) {
            Ok(p) => {
                let (d, _) = encoder_forward(params, &p)?;
                out.described.push((kp, d));
            }
            Err(e) => {
                log::debug!("keypoint {kp} of {}: {e}", cloud.id);
                out.failed.push(kp);
            }
        }
    }
    if out.described.is_empty() {
        return Err(Error::EmptyDescriptorSet {
            failed: out.failed.len(),
        });
    }
    Ok(out)
}

/// Builds the per-pair ranking and decided-match structure from real-valued
/// descriptors of both shapes.
pub fn real_valued_pair(
    gt: &CorrespondenceSet,
    queries: &[(usize, Vec<f64>)],
    targets: &[(usize, Vec<f64>)],
    rule: MatchRule,
) -> Result<ShapePairResult> {
    let q: Vec<&[f64]> = queries.iter().map(|x| x.1.as_slice()).collect();
    let t: Vec<&[f64]> = targets.iter().map(|x| x.1.as_slice()).collect();
    if t.is_empty() {
        return Err(Error::invalid("no target descriptors"));
    }
    let rankings = rank_matches(&q, &t)?;
    let matches = decide_matches(&q, &t, rule)?;
    Ok(ShapePairResult {
        gt: gt.clone(),
        query_keypoints: queries.iter().map(|x| x.0).collect(),
        target_keypoints: targets.iter().map(|x| x.0).collect(),
        rankings,
        matches,
    })
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    euclidean(a, b)
}

/// Per-model descriptors: `out[m]` lists `(keypoint, descriptor)` for the
/// keypoints of model `m` that could be described.
pub type CorpusDescriptors = Vec<Vec<(usize, Vec<f64>)>>;

/// Learned descriptors for every keypoint of every model. Models where no
/// keypoint can be described get an empty list.
pub fn describe_corpus(params: &EncoderParams, corpus: &Corpus, patch: &PatchConfig) -> Result<CorpusDescriptors> {
    let mut out = Vec::with_capacity(corpus.models.len());
    for m in &corpus.models {
        match describe_keypoints(params, &m.cloud, &m.keypoints, patch) {
            Ok(d) => out.push(d.described.into_iter().map(|(k, d)| (k, d.0)).collect()),
            Err(Error::EmptyDescriptorSet { .. }) => out.push(Vec::new()),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Histogram baseline descriptors for every keypoint of every model;
/// normals are estimated from `normal_k` neighbours when absent.
pub fn baseline_corpus(
    corpus: &Corpus,
    radius: f64,
    bins: HistogramBins,
    normal_k: usize,
) -> Result<CorpusDescriptors> {
    let mut out = Vec::with_capacity(corpus.models.len());
    for m in &corpus.models {
        let est;
        let cloud = if m.cloud.normals.is_some() {
            &m.cloud
        } else {
            est = estimate_normals(&m.cloud, normal_k)?;
            &est
        };
        let hx = HistogramExtractor::new(cloud, radius, bins)?;
        out.push(
            m.keypoints
                .iter()
                .filter_map(|&k| hx.compute(k).ok().map(|d| (k, d.values)))
                .collect(),
        );
    }
    Ok(out)
}

/// Evaluates every correspondence set of `corpus`, building each shape
/// pair's rankings and matches with `pair`.
pub(crate) fn evaluate_sets<F>(corpus: &Corpus, cfg: &EvalConfig, mut pair: F) -> Result<EvalReport>
where
    F: FnMut(&CorrespondenceSet) -> Result<ShapePairResult>,
{
    cfg.validate()?;
    let mut results = Vec::new();
    let mut targets = Vec::new();
    for set in &corpus.correspondences {
        results.push(pair(set)?);
        targets.push(&corpus.models[set.model_b].cloud);
    }
    evaluate(&results, &targets, cfg)
}

/// Metrics of real-valued descriptors over all correspondence sets.
pub fn evaluate_corpus(corpus: &Corpus, descriptors: &CorpusDescriptors, cfg: &EvalConfig) -> Result<EvalReport> {
    if descriptors.len() != corpus.models.len() {
        return Err(Error::invalid("one descriptor list per model is required"));
    }
    evaluate_sets(corpus, cfg, |set| {
        real_valued_pair(set, &descriptors[set.model_a], &descriptors[set.model_b], cfg.match_rule)
    })
}
