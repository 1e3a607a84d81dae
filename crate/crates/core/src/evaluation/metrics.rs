use super::{dist, CorrespondenceSet, EvalConfig, EvalReport, MatchRule, SymmetryMode};
use crate::baseline::nndr_match;
use crate::error::{Error, Result};
use crate::geometry::PointCloud;

/// Everything the metrics need about one evaluated shape pair.
///
/// `rankings[q]` lists positions into `target_keypoints`, best first, for
/// the query at position `q` of `query_keypoints`. `matches` holds decided
/// `(query position, target position)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapePairResult {
    pub gt: CorrespondenceSet,
    pub query_keypoints: Vec<usize>,
    pub target_keypoints: Vec<usize>,
    pub rankings: Vec<Vec<usize>>,
    pub matches: Vec<(usize, usize)>,
}

impl ShapePairResult {
    fn query_pos(&self, kp: usize) -> Option<usize> {
        self.query_keypoints.iter().position(|&k| k == kp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub correct: usize,
    pub decided: usize,
    pub ground_truth: usize,
    pub no_matches: bool,
}

fn check_dims(q: &[&[f64]], t: &[&[f64]]) -> Result<()> {
    let d = t.first().or(q.first()).map(|x| x.len()).unwrap_or(0);
    if q.iter().chain(t).any(|x| x.len() != d) {
        return Err(Error::invalid("descriptor dimensions differ"));
    }
    Ok(())
}

/// Target positions sorted by descriptor distance for every query; ties go
/// to the lower target index.
pub fn rank_matches(queries: &[&[f64]], targets: &[&[f64]]) -> Result<Vec<Vec<usize>>> {
    check_dims(queries, targets)?;
    Ok(queries
        .iter()
        .map(|q| {
            let d: Vec<f64> = targets.iter().map(|t| dist(q, t)).collect();
            let mut idx: Vec<usize> = (0..targets.len()).collect();
            idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
            idx
        })
        .collect())
}

fn nearest(from: &[f64], pool: &[&[f64]]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in pool.iter().enumerate() {
        let d = dist(from, p);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|b| b.0)
}

/// Decided `(query, target)` matches under `rule`.
pub fn decide_matches(
    queries: &[&[f64]],
    targets: &[&[f64]],
    rule: MatchRule,
) -> Result<Vec<(usize, usize)>> {
    check_dims(queries, targets)?;
    match rule {
        MatchRule::MutualNearest => {
            let back: Vec<Option<usize>> = targets.iter().map(|t| nearest(t, queries)).collect();
            Ok(queries
                .iter()
                .enumerate()
                .filter_map(|(qi, q)| {
                    let t = nearest(q, targets)?;
                    (back[t] == Some(qi)).then_some((qi, t))
                })
                .collect())
        }
        MatchRule::Nndr(r) => Ok(nndr_match(queries, targets, r)?
            .into_iter()
            .map(|m| (m.query_index, m.target_index))
            .collect()),
    }
}

fn is_correct(res: &ShapePairResult, qpos: usize, tpos: usize, mode: SymmetryMode) -> bool {
    let a = res.query_keypoints[qpos];
    let cand = res.target_keypoints[tpos];
    res.gt
        .pairs
        .iter()
        .any(|&(ga, gb)| ga == a && res.gt.target_matches(cand, gb, mode))
}

/// Micro-averaged precision and recall over all shape pairs.
pub fn precision_recall(results: &[ShapePairResult], mode: SymmetryMode) -> Result<PrecisionRecall> {
    let ground_truth: usize = results.iter().map(|r| r.gt.pairs.len()).sum();
    if ground_truth == 0 {
        return Err(Error::invalid("empty ground truth"));
    }
    let mut correct = 0;
    let mut decided = 0;
    for r in results {
        for &(q, t) in &r.matches {
            decided += 1;
            if is_correct(r, q, t, mode) {
                correct += 1;
            }
        }
    }
    Ok(PrecisionRecall {
        precision: if decided == 0 { 0.0 } else { correct as f64 / decided as f64 },
        recall: correct as f64 / ground_truth as f64,
        correct,
        decided,
        ground_truth,
        no_matches: decided == 0,
    })
}

/// Fraction of ground-truth pairs whose true target appears within the top
/// `r` candidates, for `r = 1..=k`, averaged over shape pairs.
pub fn cmc_curve(results: &[ShapePairResult], k: usize, mode: SymmetryMode) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidConfig("CMC cutoff k must be ≥ 1".into()));
    }
    let mut curve = vec![0.0; k];
    let mut used = 0usize;
    for r in results {
        if r.gt.pairs.is_empty() {
            continue;
        }
        used += 1;
        let mut hits = vec![0usize; k];
        for &(a, b) in &r.gt.pairs {
            let Some(q) = r.query_pos(a) else { continue };
            let rank = r.rankings[q]
                .iter()
                .position(|&t| r.gt.target_matches(r.target_keypoints[t], b, mode));
            if let Some(p) = rank {
                for h in hits.iter_mut().skip(p) {
                    *h += 1;
                }
            }
        }
        let n = r.gt.pairs.len() as f64;
        for (c, h) in curve.iter_mut().zip(&hits) {
            *c += *h as f64 / n;
        }
    }
    if used == 0 {
        return Err(Error::invalid("empty ground truth"));
    }
    curve.iter_mut().for_each(|c| *c /= used as f64);
    Ok(curve)
}

/// Fraction of ground-truth pairs whose rank-1 target lies within `tau`
/// of the true target, with distances measured on the target model scaled
/// to a unit bounding-box diagonal. Averaged over shape pairs.
///
/// `target_clouds[i]` is the model B cloud of `results[i]`.
pub fn correspondence_accuracy(
    results: &[ShapePairResult],
    target_clouds: &[&PointCloud],
    tau: f64,
    mode: SymmetryMode,
) -> Result<f64> {
    if results.len() != target_clouds.len() {
        return Err(Error::invalid("one target cloud per shape pair is required"));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    for (r, cloud) in results.iter().zip(target_clouds) {
        if r.gt.pairs.is_empty() {
            continue;
        }
        let diag = cloud.bbox_diagonal();
        if !(diag > 0.0) {
            return Err(Error::degenerate("target cloud has zero extent"));
        }
        used += 1;
        let mut ok = 0usize;
        for &(a, b) in &r.gt.pairs {
            let Some(q) = r.query_pos(a) else { continue };
            let Some(&top) = r.rankings[q].first() else { continue };
            let cand = r.target_keypoints[top];
            let (Some(pc), Some(pb)) = (cloud.points.get(cand), cloud.points.get(b)) else {
                return Err(Error::invalid("keypoint index outside the target cloud"));
            };
            let err = if r.gt.target_matches(cand, b, mode) {
                0.0
            } else {
                (pc - pb).norm() / diag
            };
            if err <= tau {
                ok += 1;
            }
        }
        total += ok as f64 / r.gt.pairs.len() as f64;
    }
    if used == 0 {
        return Err(Error::invalid("empty ground truth"));
    }
    Ok(total / used as f64)
}

/// All metrics at once.
pub fn evaluate(
    results: &[ShapePairResult],
    target_clouds: &[&PointCloud],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let pr = precision_recall(results, cfg.symmetry)?;
    Ok(EvalReport {
        precision: pr.precision,
        recall: pr.recall,
        cmc: cmc_curve(results, cfg.k, cfg.symmetry)?,
        corr_accuracy: correspondence_accuracy(results, target_clouds, cfg.tau, cfg.symmetry)?,
        no_matches: pr.no_matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use proptest::prelude::*;

    fn gt(pairs: &[(usize, usize)]) -> CorrespondenceSet {
        let mut g = CorrespondenceSet::new(0, 1);
        for &(a, b) in pairs {
            g.push(a, b, None);
        }
        g
    }

    fn result(g: CorrespondenceSet, rankings: Vec<Vec<usize>>, matches: Vec<(usize, usize)>) -> ShapePairResult {
        let n = rankings.len();
        let m = rankings.first().map_or(0, |r| r.len());
        ShapePairResult {
            gt: g,
            query_keypoints: (0..n).collect(),
            target_keypoints: (0..m).collect(),
            rankings,
            matches,
        }
    }

    #[test]
    fn precision_recall_example() {
        // 10 ground-truth pairs, 8 decided matches of which 6 are correct.
        let g = gt(&(0..10).map(|i| (i, i)).collect::<Vec<_>>());
        let mut matches: Vec<(usize, usize)> = (0..6).map(|i| (i, i)).collect();
        matches.push((6, 7));
        matches.push((7, 6));
        let r = result(g, vec![(0..10).collect(); 10], matches);
        let pr = precision_recall(&[r], SymmetryMode::NonSymmetric).unwrap();
        assert!((pr.precision - 0.75).abs() < 1e-12);
        assert!((pr.recall - 0.6).abs() < 1e-12);
    }

    #[test]
    fn no_matches_reports_zero_precision() {
        let r = result(gt(&[(0, 0)]), vec![vec![0, 1], vec![1, 0]], vec![]);
        let pr = precision_recall(&[r], SymmetryMode::NonSymmetric).unwrap();
        assert_eq!(pr.precision, 0.0);
        assert!(pr.no_matches);
    }

    #[test]
    fn cmc_example() {
        // True targets ranked 1, 3 and 7 by three queries.
        let g = gt(&[(0, 0), (1, 0), (2, 0)]);
        let mut rk = Vec::new();
        for pos in [0usize, 2, 6] {
            let mut order: Vec<usize> = (1..8).collect();
            order.insert(pos, 0);
            rk.push(order);
        }
        let r = result(g, rk, vec![]);
        let c = cmc_curve(&[r], 10, SymmetryMode::NonSymmetric).unwrap();
        let third = 1.0 / 3.0;
        assert!((c[0] - third).abs() < 1e-12);
        assert!((c[2] - 2.0 * third).abs() < 1e-12);
        assert!((c[5] - 2.0 * third).abs() < 1e-12);
        assert!((c[6] - 1.0).abs() < 1e-12);
        assert!((c[9] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_mode_accepts_group_members() {
        let mut g = CorrespondenceSet::new(0, 1);
        g.push(0, 0, Some(7));
        g.sym_b.insert(1, 7);
        let r = result(g, vec![vec![1, 0, 2]], vec![(0, 1)]);
        let sym = precision_recall(&[r.clone()], SymmetryMode::Symmetric).unwrap();
        let non = precision_recall(&[r.clone()], SymmetryMode::NonSymmetric).unwrap();
        assert_eq!(sym.correct, 1);
        assert_eq!(non.correct, 0);
        let cs = cmc_curve(&[r.clone()], 3, SymmetryMode::Symmetric).unwrap();
        let cn = cmc_curve(&[r], 3, SymmetryMode::NonSymmetric).unwrap();
        assert_eq!(cs, vec![1.0, 1.0, 1.0]);
        assert_eq!(cn, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn correspondence_accuracy_uses_the_bbox_diagonal() {
        // Target cloud spans a unit-diagonal box along x.
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.2, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let cloud = PointCloud::new("t", pts);
        let g = gt(&[(0, 0), (1, 0)]);
        // Query 0 picks target 1 (error 0.2), query 1 picks target 2 (error 1.0).
        let r = result(g, vec![vec![1, 0, 2], vec![2, 0, 1]], vec![]);
        let acc = correspondence_accuracy(&[r], &[&cloud], 0.25, SymmetryMode::NonSymmetric).unwrap();
        assert!((acc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mutual_nearest_and_rankings() {
        let q: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![5.0]];
        let t: Vec<Vec<f64>> = vec![vec![0.9], vec![0.1], vec![10.0]];
        let qs: Vec<&[f64]> = q.iter().map(|v| v.as_slice()).collect();
        let ts: Vec<&[f64]> = t.iter().map(|v| v.as_slice()).collect();
        let m = decide_matches(&qs, &ts, MatchRule::MutualNearest).unwrap();
        assert_eq!(m, vec![(0, 1), (1, 0)]);
        let rk = rank_matches(&qs, &ts).unwrap();
        assert_eq!(rk[2], vec![0, 1, 2]);
        assert!(rank_matches(&qs, &[&[1.0, 2.0][..]]).is_err());
    }

    // Independent recount over randomly generated rankings.
    proptest! {
        #[test]
        fn cmc_matches_recount(
            perms in prop::collection::vec(Just((0..6usize).collect::<Vec<_>>()).prop_shuffle(), 1..6),
            k in 1usize..8,
        ) {
            let n = perms.len();
            let g = gt(&(0..n).map(|i| (i, i % 6)).collect::<Vec<_>>());
            let r = result(g, perms.clone(), vec![]);
            let c = cmc_curve(&[r], k, SymmetryMode::NonSymmetric).unwrap();
            prop_assert_eq!(c.len(), k);
            for rank in 1..=k {
                let mut hit = 0;
                for (i, p) in perms.iter().enumerate() {
                    if p.iter().take(rank).any(|&t| t == i % 6) {
                        hit += 1;
                    }
                }
                prop_assert!((c[rank - 1] - hit as f64 / n as f64).abs() < 1e-12);
            }
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn mutual_nearest_is_symmetric(
            q in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..8),
            t in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..8),
        ) {
            let qs: Vec<&[f64]> = q.iter().map(|v| v.as_slice()).collect();
            let ts: Vec<&[f64]> = t.iter().map(|v| v.as_slice()).collect();
            let fwd = decide_matches(&qs, &ts, MatchRule::MutualNearest).unwrap();
            let mut back: Vec<(usize, usize)> = decide_matches(&ts, &qs, MatchRule::MutualNearest)
                .unwrap()
                .into_iter()
                .map(|(a, b)| (b, a))
                .collect();
            back.sort();
            prop_assert_eq!(fwd, back);
        }
    }
}
