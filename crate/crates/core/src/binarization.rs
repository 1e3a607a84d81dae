//! Iterative quantization of real-valued descriptors into packed binary
//! codes, and Hamming-distance matching.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_sets, CorrespondenceSet, EvalConfig, EvalReport, MatchRule, ShapePairResult};
use crate::mining::Corpus;

pub const DEFAULT_BITS: usize = 128;
pub const DEFAULT_ITERATIONS: usize = 50;

/// Learned ITQ encoder: `code = sign((x - mean)·projection·rotation)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItqModel {
    pub mean: Vec<f64>,
    /// `D × B`, columns are principal directions in descending eigenvalue
    /// order.
    pub projection: DMatrix<f64>,
    /// `B × B` orthogonal.
    pub rotation: DMatrix<f64>,
    pub bits: usize,
}

impl ItqModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, b) = (self.mean.len(), self.bits);
        if b == 0 || b > d {
            return Err(Error::invalid(format!("bits {b} must be in 1..={d}")));
        }
        if self.projection.shape() != (d, b) || self.rotation.shape() != (b, b) {
            return Err(Error::invalid(format!(
                "projection {:?} / rotation {:?} do not fit D = {d}, B = {b}",
                self.projection.shape(),
                self.rotation.shape()
            )));
        }
        Ok(())
    }

    /// Largest entry of `|RᵀR − I|`.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.rotation)
    }

    pub fn encode(&self, descriptor: &[f64]) -> Result<BinaryCode> {
        itq_encode(self, descriptor)
    }
}

fn orthogonality_error(r: &DMatrix<f64>) -> f64 {
    let g = r.transpose() * r;
    let n = g.nrows();
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (g[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max)
}

/// `B` bits packed little-endian: bit `i` lives in byte `i / 8` at position
/// `i % 8`. Unused high bits of the last byte are zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    bits: usize,
    bytes: Vec<u8>,
}

impl BinaryCode {
    pub fn zeros(bits: usize) -> Self {
        BinaryCode {
            bits,
            bytes: vec![0; bits.div_ceil(8)],
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut c = BinaryCode::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            c.set(i, b);
        }
        c
    }

    /// Rebuilds a code from its packed bytes; stray high bits are rejected.
    pub fn from_bytes(bits: usize, bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != bits.div_ceil(8) {
            return Err(Error::invalid(format!("{} bytes cannot hold exactly {bits} bits", bytes.len())));
        }
        if bits % 8 != 0 && bytes[bytes.len() - 1] >> (bits % 8) != 0 {
            return Err(Error::invalid("padding bits set in the last byte"));
        }
        Ok(BinaryCode { bits, bytes })
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.bits, "bit {i} out of range");
        self.bytes[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn set(&mut self, i: usize, v: bool) {
        assert!(i < self.bits, "bit {i} out of range");
        let mask = 1u8 << (i % 8);
        if v {
            self.bytes[i / 8] |= mask;
        } else {
            self.bytes[i / 8] &= !mask;
        }
    }

    pub fn complement(&self) -> Self {
        let mut c = BinaryCode::zeros(self.bits);
        for i in 0..self.bits {
            c.set(i, !self.get(i));
        }
        c
    }

    pub fn hamming(&self, other: &BinaryCode) -> Result<u32> {
        if self.bits != other.bits {
            return Err(Error::invalid(format!("code lengths {} and {} differ", self.bits, other.bits)));
        }
        Ok(self.bytes.iter().zip(&other.bytes).map(|(a, b)| (a ^ b).count_ones()).sum())
    }
}

/// Fits an ITQ model with `iterations` alternating code/rotation updates.
pub fn itq_train(descriptors: &[Vec<f64>], bits: usize, iterations: usize, seed: u64) -> Result<ItqModel> {
    itq_train_traced(descriptors, bits, iterations, seed).map(|(m, _)| m)
}

/// Like [`itq_train`], also returning the quantization loss
/// `‖C − V·R‖²` after each rotation update.
pub fn itq_train_traced(
    descriptors: &[Vec<f64>],
    bits: usize,
    iterations: usize,
    seed: u64,
) -> Result<(ItqModel, Vec<f64>)> {
    let n = descriptors.len();
    if bits == 0 {
        return Err(Error::invalid("bits must be positive"));
    }
    if n <= bits {
        return Err(Error::invalid(format!("{n} descriptors, need more than {bits}")));
    }
    let d = descriptors[0].len();
    if descriptors.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("descriptor dimensions differ"));
    }
    if descriptors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite descriptor value"));
    }
    if bits > d {
        return Err(Error::invalid(format!("bits {bits} exceed descriptor dimension {d}")));
    }

    let mut mean = vec![0.0; d];
    for x in descriptors {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let xc = DMatrix::from_fn(n, d, |i, j| descriptors[i][j] - mean[j]);

    let cov = xc.transpose() * &xc / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = top * d as f64 * f64::EPSILON * 16.0;
    let positive = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();
    if positive < bits {
        return Err(Error::InsufficientRank { positive, bits });
    }
    let mut projection = DMatrix::zeros(d, bits);
    for (c, &i) in order.iter().take(bits).enumerate() {
        let mut col = eig.eigenvectors.column(i).into_owned();
        let lead = (0..d).fold(0, |best, j| if col[j].abs() > col[best].abs() { j } else { best });
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        projection.set_column(c, &col);
    }

    let v = &xc * &projection;
    let mut rotation = random_orthogonal(bits, seed);
    let mut losses = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let codes = (&v * &rotation).map(|x| if x > 0.0 { 1.0 } else { -1.0 });
        let svd = (v.transpose() * &codes).svd(true, true);
        let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        rotation = u * vt;
        losses.push((&codes - &v * &rotation).norm_squared());
    }
    let model = ItqModel {
        mean,
        projection,
        rotation,
        bits,
    };
    Ok((model, losses))
}

fn random_orthogonal(b: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(b, b, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..b {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Bit `i` is set when the `i`-th rotated coordinate is strictly positive.
pub fn itq_encode(model: &ItqModel, descriptor: &[f64]) -> Result<BinaryCode> {
    if descriptor.len() != model.dim() {
        return Err(Error::invalid(format!(
            "descriptor has dimension {}, model expects {}",
            descriptor.len(),
            model.dim()
        )));
    }
    let x = DMatrix::from_fn(1, model.dim(), |_, j| descriptor[j] - model.mean[j]);
    let y = x * &model.projection * &model.rotation;
    let mut code = BinaryCode::zeros(model.bits);
    for i in 0..model.bits {
        if y[(0, i)] > 0.0 {
            code.set(i, true);
        }
    }
    Ok(code)
}

/// Target indices by ascending Hamming distance, ties to the lower index.
pub fn hamming_rank(query: &BinaryCode, targets: &[BinaryCode]) -> Result<Vec<usize>> {
    let d = targets.iter().map(|t| query.hamming(t)).collect::<Result<Vec<_>>>()?;
    let mut idx: Vec<usize> = (0..targets.len()).collect();
    idx.sort_by_key(|&i| (d[i], i));
    Ok(idx)
}

/// Rankings and decided matches between two shapes' binary codes.
pub fn binary_pair(
    gt: &CorrespondenceSet,
    queries: &[(usize, BinaryCode)],
    targets: &[(usize, BinaryCode)],
    rule: MatchRule,
) -> Result<ShapePairResult> {
    if targets.is_empty() {
        return Err(Error::invalid("no target codes"));
    }
    let t: Vec<BinaryCode> = targets.iter().map(|x| x.1.clone()).collect();
    let dist: Vec<Vec<u32>> = queries
        .iter()
        .map(|q| t.iter().map(|c| q.1.hamming(c)).collect())
        .collect::<Result<_>>()?;
    let rankings = queries
        .iter()
        .map(|q| hamming_rank(&q.1, &t))
        .collect::<Result<Vec<_>>>()?;
    let matches = match rule {
        MatchRule::MutualNearest => {
            let back: Vec<usize> = (0..t.len())
                .map(|ti| (0..queries.len()).min_by_key(|&qi| (dist[qi][ti], qi)).unwrap_or(usize::MAX))
                .collect();
            rankings
                .iter()
                .enumerate()
                .filter(|(qi, r)| back[r[0]] == *qi)
                .map(|(qi, r)| (qi, r[0]))
                .collect()
        }
        MatchRule::Nndr(ratio) => {
            if t.len() < 2 {
                return Err(Error::invalid(format!("NNDR needs at least 2 targets, got {}", t.len())));
            }
            rankings
                .iter()
                .enumerate()
                .filter(|(qi, r)| {
                    let (d1, d2) = (dist[*qi][r[0]] as f64, dist[*qi][r[1]] as f64);
                    let q = if d2 > 0.0 { d1 / d2 } else { 1.0 };
                    q <= ratio
                })
                .map(|(qi, r)| (qi, r[0]))
                .collect()
        }
    };
    Ok(ShapePairResult {
        gt: gt.clone(),
        query_keypoints: queries.iter().map(|x| x.0).collect(),
        target_keypoints: targets.iter().map(|x| x.0).collect(),
        rankings,
        matches,
    })
}

/// Per-model codes, `(keypoint, code)` in keypoint order.
pub type CorpusCodes = Vec<Vec<(usize, BinaryCode)>>;

pub fn encode_corpus(model: &ItqModel, descriptors: &[Vec<(usize, Vec<f64>)>]) -> Result<CorpusCodes> {
    descriptors
        .iter()
        .map(|m| m.iter().map(|(k, d)| Ok((*k, itq_encode(model, d)?))).collect())
        .collect()
}

/// Metrics of binary codes over all correspondence sets, ranking by Hamming
/// distance.
pub fn evaluate_binary_corpus(corpus: &Corpus, codes: &CorpusCodes, cfg: &EvalConfig) -> Result<EvalReport> {
    if codes.len() != corpus.models.len() {
        return Err(Error::invalid("one code list per model is required"));
    }
    evaluate_sets(corpus, cfg, |set| {
        binary_pair(set, &codes[set.model_a], &codes[set.model_b], cfg.match_rule)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_data(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|j| rng.gen_range(-1.0..1.0) * (1.0 + j as f64 * 0.1)).collect())
            .collect()
    }

    #[test]
    fn scalar_case() {
        let data: Vec<Vec<f64>> = [-2.0, -0.5, 0.3, 1.0, 2.2].iter().map(|&v| vec![v]).collect();
        let m = itq_train(&data, 1, 10, 3).unwrap();
        assert!((m.rotation[(0, 0)].abs() - 1.0).abs() < 1e-12);
        let mean = m.mean[0];
        for x in [-3.0, -0.1, 0.05, 4.0] {
            let code = itq_encode(&m, &[x]).unwrap();
            let proj = (x - mean) * m.projection[(0, 0)] * m.rotation[(0, 0)];
            assert_eq!(code.get(0), proj > 0.0);
        }
        // two codes with the opposite data sign disagree
        assert_ne!(itq_encode(&m, &[mean - 1.0]).unwrap(), itq_encode(&m, &[mean + 1.0]).unwrap());
    }

    #[test]
    fn mean_maps_to_zero_code() {
        let data = random_data(40, 6, 1);
        let m = itq_train(&data, 4, 5, 0).unwrap();
        let c = itq_encode(&m, &m.mean).unwrap();
        assert_eq!(c, BinaryCode::zeros(4));
    }

    #[test]
    fn zero_iterations_keeps_initial_rotation() {
        let data = random_data(30, 5, 2);
        let a = itq_train(&data, 3, 0, 9).unwrap();
        let b = itq_train(&data, 3, 0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rotation, random_orthogonal(3, 9));
        assert!(a.orthogonality_error() < 1e-9);
        assert_eq!(itq_encode(&a, &data[0]).unwrap(), itq_encode(&b, &data[0]).unwrap());
    }

    #[test]
    fn hand_set_two_bit_model() {
        let m = ItqModel {
            mean: vec![1.0, -1.0],
            projection: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            rotation: DMatrix::identity(2, 2),
            bits: 2,
        };
        // (x - mean) = (2, -3) → projected (-3, 2)
        let c = itq_encode(&m, &[3.0, -4.0]).unwrap();
        assert!(!c.get(0) && c.get(1));
        let c = itq_encode(&m, &[0.0, 0.0]).unwrap();
        assert!(c.get(0) && !c.get(1));
        assert!(itq_encode(&m, &[1.0]).is_err());
    }

    #[test]
    fn loss_non_increasing_and_rotation_orthogonal() {
        for seed in 0..5 {
            let data = random_data(200, 16, seed);
            let (m, losses) = itq_train_traced(&data, 8, 50, seed).unwrap();
            assert_eq!(losses.len(), 50);
            for w in losses.windows(2) {
                assert!(w[1] <= w[0], "loss rose {} -> {}", w[0], w[1]);
            }
            assert!(m.orthogonality_error() < 1e-9);
        }
    }

    #[test]
    fn projection_sign_and_order() {
        let data = random_data(100, 6, 4);
        let m = itq_train(&data, 6, 0, 0).unwrap();
        for c in 0..6 {
            let col = m.projection.column(c);
            let lead = col.iter().cloned().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(lead > 0.0);
        }
        // variance along successive directions is non-increasing
        let var = |c: usize| {
            data.iter()
                .map(|x| {
                    let p: f64 = (0..6).map(|j| (x[j] - m.mean[j]) * m.projection[(j, c)]).sum();
                    p * p
                })
                .sum::<f64>()
        };
        for c in 1..6 {
            assert!(var(c) <= var(c - 1) + 1e-9);
        }
    }

    #[test]
    fn rank_and_count_errors() {
        let data = random_data(5, 8, 0);
        assert!(matches!(itq_train(&data, 5, 1, 0), Err(Error::InvalidInput(_))));
        // every point on a line: one positive eigenvalue
        let line: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        assert!(matches!(
            itq_train(&line, 2, 1, 0),
            Err(Error::InsufficientRank { positive: 1, bits: 2 })
        ));
    }

    #[test]
    fn hamming_rank_basics() {
        let a = BinaryCode::from_bools(&[true, false, true, true, false, false, true, false, true, true]);
        let b = a.complement();
        let mid = BinaryCode::from_bools(&[true; 10]);
        let r = hamming_rank(&a, &[b.clone(), mid, a.clone()]).unwrap();
        assert_eq!(r, vec![2, 1, 0]);
        assert_eq!(a.hamming(&b).unwrap(), 10);
        assert!(hamming_rank(&a, &[BinaryCode::zeros(9)]).is_err());
        assert!(BinaryCode::from_bytes(10, vec![0, 0b100]).is_err());
        assert_eq!(BinaryCode::from_bytes(10, a.bytes().to_vec()).unwrap(), a);
    }

    proptest! {
        #[test]
        fn hamming_rank_matches_popcount_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let codes: Vec<BinaryCode> = (0..20)
                .map(|_| BinaryCode::from_bools(&(0..20).map(|_| rng.gen_bool(0.5)).collect::<Vec<_>>()))
                .collect();
            for q in &codes {
                let oracle_d: Vec<usize> = codes
                    .iter()
                    .map(|t| (0..20).filter(|&i| q.get(i) != t.get(i)).count())
                    .collect();
                let mut oracle: Vec<usize> = (0..20).collect();
                oracle.sort_by(|&a, &b| oracle_d[a].cmp(&oracle_d[b]).then(a.cmp(&b)));
                prop_assert_eq!(hamming_rank(q, &codes).unwrap(), oracle);
            }
        }
    }
}
