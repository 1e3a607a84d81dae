//! Pair and triplet losses on descriptors.
//!
//! Every `max(0, ·)` uses the gradient of the active branch and zero when the
//! argument is exactly zero.

use super::{Descriptor, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Hinge,
    Contrastive,
    Triplet,
    Mmcl,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Hinge => "hinge",
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
            LossKind::Mmcl => "mmcl",
        }
    }

    pub fn uses_triplets(self) -> bool {
        self == LossKind::Triplet
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hinge" => Ok(LossKind::Hinge),
            "contrastive" => Ok(LossKind::Contrastive),
            "triplet" => Ok(LossKind::Triplet),
            "mmcl" => Ok(LossKind::Mmcl),
            other => Err(Error::InvalidConfig(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Single margin for hinge, contrastive and triplet.
    pub m: f64,
    /// Hard-negative margin.
    pub m1: f64,
    /// Soft-negative margin.
    pub m2: f64,
    /// Hinge bias.
    pub b: f64,
    /// Weight-decay coefficient.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Mmcl,
            m: 1.0,
            m1: 2.0,
            m2: 1.0,
            b: 0.0,
            lambda: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        LossConfig {
            kind,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0) {
            return Err(Error::InvalidConfig(format!("margin m = {} must be positive", self.m)));
        }
        if !(self.m2 > 0.0 && self.m1 >= self.m2) {
            return Err(Error::InvalidConfig(format!(
                "need m1 ≥ m2 > 0, got m1 = {}, m2 = {}",
                self.m1, self.m2
            )));
        }
        if !(self.lambda >= 0.0) || !self.b.is_finite() {
            return Err(Error::InvalidConfig("lambda must be ≥ 0 and b finite".into()));
        }
        Ok(())
    }
}

/// Loss value and its gradients with respect to both descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    pub grad_i: Vec<f64>,
    pub grad_j: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub value: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Turns `∂L/∂d²` into gradients on both descriptors.
fn pair_from_dd2(value: f64, dd2: f64, a: &[f64], b: &[f64]) -> PairLoss {
    let grad_i: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * dd2 * (x - y)).collect();
    let grad_j = grad_i.iter().map(|g| -g).collect();
    PairLoss {
        value,
        grad_i,
        grad_j,
    }
}

fn check_dims(a: &Descriptor, b: &Descriptor) {
    assert_eq!(a.dim(), b.dim(), "descriptor dimensions differ");
}

/// `max(0, b − y·(m − d²))` with `y ∈ {+1, −1}`.
pub fn hinge_loss(di: &Descriptor, dj: &Descriptor, y: f64, cfg: &LossConfig) -> PairLoss {
    check_dims(di, dj);
    let d2 = sq_dist(&di.0, &dj.0);
    let inner = cfg.b - y * (cfg.m - d2);
    let (value, dd2) = if inner > 0.0 { (inner, y) } else { (0.0, 0.0) };
    pair_from_dd2(value, dd2, &di.0, &dj.0)
}

/// `y·d² + (1 − y)·max(0, m² − d²)` with `y ∈ {1, 0}`.
pub fn contrastive_loss(di: &Descriptor, dj: &Descriptor, y: f64, cfg: &LossConfig) -> PairLoss {
    check_dims(di, dj);
    let d2 = sq_dist(&di.0, &dj.0);
    let gap = cfg.m * cfg.m - d2;
    let (neg, dneg) = if gap > 0.0 { (gap, -1.0) } else { (0.0, 0.0) };
    let value = y * d2 + (1.0 - y) * neg;
    let dd2 = y + (1.0 - y) * dneg;
    pair_from_dd2(value, dd2, &di.0, &dj.0)
}

/// Multi-margin contrastive loss:
/// `y·d² + (1 − y)·max(0, γ·(m1² − d²), (1 − γ)·(m2² − d²))`.
///
/// `gamma` is 1 for hard negatives and 0 for soft ones; it is ignored for
/// positive pairs.
pub fn mmcl_loss(
    di: &Descriptor,
    dj: &Descriptor,
    y: f64,
    gamma: f64,
    cfg: &LossConfig,
) -> PairLoss {
    check_dims(di, dj);
    let d2 = sq_dist(&di.0, &dj.0);
    let hard = gamma * (cfg.m1 * cfg.m1 - d2);
    let soft = (1.0 - gamma) * (cfg.m2 * cfg.m2 - d2);
    let (mut neg, mut dneg) = (0.0, 0.0);
    if hard > neg {
        neg = hard;
        dneg = -gamma;
    }
    if soft > neg {
        neg = soft;
        dneg = -(1.0 - gamma);
    }
    let value = y * d2 + (1.0 - y) * neg;
    let dd2 = y + (1.0 - y) * dneg;
    pair_from_dd2(value, dd2, &di.0, &dj.0)
}

/// Ratio-form triplet loss
/// `max(0, 1 − ‖a − n‖² / (‖a − p‖² + m))`.
pub fn triplet_loss(
    anchor: &Descriptor,
    positive: &Descriptor,
    negative: &Descriptor,
    cfg: &LossConfig,
) -> TripletLoss {
    check_dims(anchor, positive);
    check_dims(anchor, negative);
    let dn = sq_dist(&anchor.0, &negative.0);
    let dp = sq_dist(&anchor.0, &positive.0);
    let denom = dp + cfg.m;
    let inner = 1.0 - dn / denom;
    let dim = anchor.dim();
    if !(inner > 0.0) {
        return TripletLoss {
            value: 0.0,
            grad_anchor: vec![0.0; dim],
            grad_positive: vec![0.0; dim],
            grad_negative: vec![0.0; dim],
        };
    }
    let ddn = -1.0 / denom;
    let ddp = dn / (denom * denom);
    let mut grad_anchor = vec![0.0; dim];
    let mut grad_positive = vec![0.0; dim];
    let mut grad_negative = vec![0.0; dim];
    for k in 0..dim {
        let an = anchor.0[k] - negative.0[k];
        let ap = anchor.0[k] - positive.0[k];
        grad_anchor[k] = 2.0 * ddn * an + 2.0 * ddp * ap;
        grad_negative[k] = -2.0 * ddn * an;
        grad_positive[k] = -2.0 * ddp * ap;
    }
    TripletLoss {
        value: inner,
        grad_anchor,
        grad_positive,
        grad_negative,
    }
}

/// `base + λ·Σ‖W‖²` over weight matrices only.
pub fn regularized_loss(base: f64, params: &EncoderParams, lambda: f64) -> f64 {
    base + lambda * params.weight_sq_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderArch, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn desc(v: &[f64]) -> Descriptor {
        Descriptor(v.to_vec())
    }

    fn rand_desc(rng: &mut ChaCha8Rng, d: usize) -> Descriptor {
        Descriptor((0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
    }

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn hinge_examples() {
        let a = desc(&[0.5, -0.5]);
        assert_eq!(hinge_loss(&a, &a, 1.0, &cfg()).value, 0.0);
        assert_eq!(hinge_loss(&a, &a, -1.0, &cfg()).value, 1.0);
    }

    #[test]
    fn contrastive_examples() {
        let a = desc(&[0.0, 0.0]);
        assert_eq!(contrastive_loss(&a, &a, 1.0, &cfg()).value, 0.0);
        assert_eq!(contrastive_loss(&a, &a, 0.0, &cfg()).value, 1.0);
        let b = desc(&[1.0, 1.0]);
        let l = contrastive_loss(&a, &b, 0.0, &cfg());
        assert_eq!(l.value, 0.0);
        assert!(l.grad_i.iter().chain(&l.grad_j).all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_examples() {
        let a = desc(&[0.2, 0.3]);
        assert_eq!(triplet_loss(&a, &a, &a, &cfg()).value, 1.0);
        // ‖a − p‖² = 1, ‖a − n‖² = m + 1 + 10
        let p = desc(&[1.2, 0.3]);
        let n = desc(&[0.2, 0.3 + 12f64.sqrt()]);
        let l = triplet_loss(&a, &p, &n, &cfg());
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn mmcl_examples() {
        let z = desc(&[0.0, 0.0]);
        assert_eq!(mmcl_loss(&z, &z, 0.0, 1.0, &cfg()).value, 4.0);
        let h = desc(&[0.5, 0.5]);
        assert_eq!(mmcl_loss(&z, &h, 0.0, 0.0, &cfg()).value, 0.5);
        let t = desc(&[1.0, 2f64.sqrt()]);
        assert!((mmcl_loss(&z, &t, 1.0, 0.0, &cfg()).value - 3.0).abs() < 1e-15);
        assert_eq!(
            mmcl_loss(&z, &t, 1.0, 0.0, &cfg()).value,
            mmcl_loss(&z, &t, 1.0, 1.0, &cfg()).value
        );
    }

    #[test]
    fn regularization_examples() {
        let arch = EncoderArch::new(vec![3, 8], vec![8, 8], Variant::PatchSiamese).unwrap();
        let mut p = EncoderParams::zeros(&arch).unwrap();
        assert_eq!(regularized_loss(2.5, &p, 0.0), 2.5);
        p.point_layers[0].weight[0] = 1.0;
        p.point_layers[0].weight[1] = 2.0;
        p.point_layers[0].bias[0] = 100.0;
        assert!((regularized_loss(0.0, &p, 0.1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn regularization_matches_elementwise_sum() {
        let arch = EncoderArch::new(vec![3, 6, 5], vec![5, 9], Variant::PatchSiamese).unwrap();
        let mut p = EncoderParams::zeros(&arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let flat: Vec<f64> = (0..p.num_params()).map(|_| rng.gen::<f64>() - 0.5).collect();
        p.set_flat(&flat).unwrap();
        let mut naive = 0.0;
        for l in p.layers() {
            for r in 0..l.fan_in {
                for c in 0..l.fan_out {
                    naive += l.weight[r * l.fan_out + c].powi(2);
                }
            }
        }
        assert!((regularized_loss(1.0, &p, 0.3) - (1.0 + 0.3 * naive)).abs() < 1e-12);
    }

    fn fd_pair<F: Fn(&Descriptor, &Descriptor) -> PairLoss>(f: F, a: &Descriptor, b: &Descriptor) {
        let l = f(a, b);
        let eps = 1e-6;
        for k in 0..a.dim() {
            for (which, grad) in [(0, &l.grad_i), (1, &l.grad_j)] {
                let mut ap = a.clone();
                let mut bp = b.clone();
                let mut am = a.clone();
                let mut bm = b.clone();
                if which == 0 {
                    ap.0[k] += eps;
                    am.0[k] -= eps;
                } else {
                    bp.0[k] += eps;
                    bm.0[k] -= eps;
                }
                let num = (f(&ap, &bp).value - f(&am, &bm).value) / (2.0 * eps);
                assert!((num - grad[k]).abs() <= 1e-6 * num.abs().max(1.0), "{num} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn pair_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = LossConfig {
            b: 0.5,
            ..cfg()
        };
        for _ in 0..20 {
            let a = rand_desc(&mut rng, 6);
            let b = rand_desc(&mut rng, 6);
            for y in [1.0, -1.0] {
                fd_pair(|x, z| hinge_loss(x, z, y, &c), &a, &b);
            }
            for y in [1.0, 0.0] {
                fd_pair(|x, z| contrastive_loss(x, z, y, &c), &a, &b);
                for g in [0.0, 1.0] {
                    fd_pair(|x, z| mmcl_loss(x, z, y, g, &c), &a, &b);
                }
            }
        }
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = cfg();
        for _ in 0..20 {
            let t = [rand_desc(&mut rng, 5), rand_desc(&mut rng, 5), rand_desc(&mut rng, 5)];
            let l = triplet_loss(&t[0], &t[1], &t[2], &c);
            let grads = [&l.grad_anchor, &l.grad_positive, &l.grad_negative];
            let eps = 1e-6;
            for w in 0..3 {
                for k in 0..5 {
                    let mut plus = t.clone();
                    plus[w].0[k] += eps;
                    let mut minus = t.clone();
                    minus[w].0[k] -= eps;
                    let num = (triplet_loss(&plus[0], &plus[1], &plus[2], &c).value
                        - triplet_loss(&minus[0], &minus[1], &minus[2], &c).value)
                        / (2.0 * eps);
                    assert!((num - grads[w][k]).abs() <= 1e-6 * num.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn mmcl_hard_margin_dominates_soft() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = rand_desc(&mut rng, 4);
            let b = rand_desc(&mut rng, 4);
            let hard = mmcl_loss(&a, &b, 0.0, 1.0, &cfg()).value;
            let soft = mmcl_loss(&a, &b, 0.0, 0.0, &cfg()).value;
            assert!(hard >= soft);
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(LossConfig { m1: 0.5, ..cfg() }.validate().is_err());
        assert!(LossConfig { m: 0.0, ..cfg() }.validate().is_err());
        assert!(LossConfig { lambda: -1.0, ..cfg() }.validate().is_err());
        assert_eq!("mmcl".parse::<LossKind>().unwrap(), LossKind::Mmcl);
        assert!("l2".parse::<LossKind>().is_err());
    }
}
