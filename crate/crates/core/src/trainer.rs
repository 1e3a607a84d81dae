//! Mini-batch SGD with momentum over pairs or triplets. Both siamese
//! branches evaluate the same [`EncoderParams`], so gradients from the two
//! (or three) patches of an example accumulate into one set.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mining::{PairLabel, TrainingPair, TrainingSet, TrainingTriplet};
use crate::model::encoder::{accumulate_backward, forward_points};
use crate::model::{
    contrastive_loss, hinge_loss, mmcl_loss, triplet_loss, EncoderArch, EncoderParams, LossConfig,
    LossKind,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub arch: EncoderArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            arch: EncoderArch::default(),
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.arch.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based): halved every
    /// `⌈epochs/3⌉` epochs.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let every = self.epochs.div_ceil(3).max(1);
        self.learning_rate * 0.5f64.powi((epoch / every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean batch objective per epoch.
    pub epoch_losses: Vec<f64>,
    pub params: EncoderParams,
    pub seconds: f64,
}

/// Uniform weights in `±1/√fan_in`, zero biases.
pub fn init_params(arch: &EncoderArch, seed: u64) -> Result<EncoderParams> {
    let mut p = EncoderParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in p.layers_mut() {
        let s = 1.0 / (l.fan_in as f64).sqrt();
        for w in l.weight.iter_mut() {
            *w = rng.gen_range(-s..=s);
        }
    }
    Ok(p)
}

fn pair_value_and_grads(
    params: &EncoderParams,
    pair: &TrainingPair,
    cfg: &LossConfig,
    scale: f64,
    grads: &mut EncoderParams,
) -> Result<f64> {
    let (da, ca) = forward_points(params, &pair.patch_a.points)?;
    let (db, cb) = forward_points(params, &pair.patch_b.points)?;
    let l = match cfg.kind {
        LossKind::Hinge => {
            let y = if pair.label == PairLabel::Positive { 1.0 } else { -1.0 };
            hinge_loss(&da, &db, y, cfg)
        }
        LossKind::Contrastive => contrastive_loss(&da, &db, pair.label.y(), cfg),
        LossKind::Mmcl => mmcl_loss(&da, &db, pair.label.y(), pair.label.gamma().unwrap_or(0.0), cfg),
        LossKind::Triplet => return Err(Error::InvalidConfig("triplet loss needs triplets".into())),
    };
    if l.value != 0.0 || l.grad_i.iter().any(|&g| g != 0.0) {
        let gi: Vec<f64> = l.grad_i.iter().map(|g| g * scale).collect();
        let gj: Vec<f64> = l.grad_j.iter().map(|g| g * scale).collect();
        accumulate_backward(params, &pair.patch_a.points, &gi, &ca, grads)?;
        accumulate_backward(params, &pair.patch_b.points, &gj, &cb, grads)?;
    }
    Ok(l.value)
}

fn triplet_value_and_grads(
    params: &EncoderParams,
    t: &TrainingTriplet,
    cfg: &LossConfig,
    scale: f64,
    grads: &mut EncoderParams,
) -> Result<f64> {
    let (da, ca) = forward_points(params, &t.anchor.points)?;
    let (dp, cp) = forward_points(params, &t.positive.points)?;
    let (dn, cn) = forward_points(params, &t.negative.points)?;
    let l = triplet_loss(&da, &dp, &dn, cfg);
    if l.value != 0.0 {
        let s = |g: &[f64]| g.iter().map(|x| x * scale).collect::<Vec<_>>();
        accumulate_backward(params, &t.anchor.points, &s(&l.grad_anchor), &ca, grads)?;
        accumulate_backward(params, &t.positive.points, &s(&l.grad_positive), &cp, grads)?;
        accumulate_backward(params, &t.negative.points, &s(&l.grad_negative), &cn, grads)?;
    }
    Ok(l.value)
}

/// Batch objective (mean loss plus `λ‖W‖²`) and its gradient for the
/// examples at `batch`.
pub fn batch_objective(
    params: &EncoderParams,
    data: &TrainingSet,
    batch: &[usize],
    cfg: &LossConfig,
) -> Result<(f64, EncoderParams)> {
    let mut grads = params.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for &i in batch {
        total += match data {
            TrainingSet::Pairs(p) => pair_value_and_grads(params, &p[i], cfg, scale, &mut grads)?,
            TrainingSet::Triplets(t) => triplet_value_and_grads(params, &t[i], cfg, scale, &mut grads)?,
        };
    }
    for (g, p) in grads.layers_mut().zip(params.layers()) {
        for (gw, w) in g.weight.iter_mut().zip(&p.weight) {
            *gw += 2.0 * cfg.lambda * w;
        }
    }
    Ok((total * scale + cfg.lambda * params.weight_sq_norm(), grads))
}

/// Visiting order for one epoch. Each label class is shuffled on its own
/// and the classes are interleaved evenly, so every batch carries
/// positives, soft and hard negatives in the dataset's ratio.
fn epoch_order(data: &TrainingSet, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let classes: Vec<Vec<usize>> = match data {
        TrainingSet::Pairs(p) => [PairLabel::Positive, PairLabel::SoftNegative, PairLabel::HardNegative]
            .iter()
            .map(|&l| (0..p.len()).filter(|&i| p[i].label == l).collect())
            .collect(),
        TrainingSet::Triplets(t) => vec![(0..t.len()).collect()],
    };
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(data.len());
    for (c, mut members) in classes.into_iter().enumerate() {
        members.shuffle(rng);
        let n = members.len() as f64;
        for (k, i) in members.into_iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / n, c, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|k| k.2).collect()
}

fn check_kind(data: &TrainingSet, cfg: &TrainConfig) -> Result<()> {
    let triplets = matches!(data, TrainingSet::Triplets(_));
    if triplets != cfg.loss.kind.uses_triplets() {
        return Err(Error::InvalidConfig(format!(
            "{} loss cannot train on a {} dataset",
            cfg.loss.kind.name(),
            if triplets { "triplet" } else { "pair" }
        )));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    Ok(())
}

/// Trains from [`init_params`] with the configured seed.
pub fn train(data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_kind(data, cfg)?;
    train_from(init_params(&cfg.arch, cfg.seed)?, data, cfg)
}

/// Trains starting from the given parameters.
pub fn train_from(mut params: EncoderParams, data: &TrainingSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_kind(data, cfg)?;
    if params.arch != cfg.arch {
        return Err(Error::ArchMismatch("initial parameters do not match the configured architecture".into()));
    }
    params.check_shapes()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut velocity = params.zeros_like();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let order: Vec<usize> = if cfg.shuffle {
            epoch_order(data, &mut rng)
        } else {
            (0..data.len()).collect()
        };
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (value, grads) = match batch_objective(&params, data, batch, &cfg.loss) {
                Err(Error::InvalidParams(_)) => return Err(Error::Divergence { epoch, batch: bi }),
                r => r?,
            };
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            velocity.scale(cfg.momentum);
            velocity.add_scaled(&grads, 1.0);
            params.add_scaled(&velocity, -lr);
            if params.layers().any(|l| l.weight.iter().chain(&l.bias).any(|v| !v.is_finite())) {
                return Err(Error::Divergence { epoch, batch: bi });
            }
            sum += value;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::info!("epoch {epoch}: loss {mean:.6} (lr {lr:.2e})");
        epoch_losses.push(mean);
    }
    Ok(TrainReport {
        epoch_losses,
        params,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Lrf, Patch, Vec3};
    use crate::mining::KeypointRef;
    use crate::model::{encoder_forward, Variant};
    use nalgebra::Matrix3;

    fn arch() -> EncoderArch {
        EncoderArch::new(vec![3, 8, 16], vec![16, 12, 8], Variant::PatchSiamese).unwrap()
    }

    fn patch(rng: &mut ChaCha8Rng) -> Patch {
        let points: Vec<Vec3> = (0..12)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        Patch {
            keypoint_index: 0,
            points,
            valid_count: 12,
            lrf: Lrf {
                origin: Vec3::zeros(),
                axes: Matrix3::identity(),
                support_radius: 1.0,
                eigenvalues: Vec3::new(3.0, 2.0, 1.0),
            },
        }
    }

    fn pairs(n: usize, seed: u64) -> TrainingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = [PairLabel::Positive, PairLabel::SoftNegative, PairLabel::HardNegative, PairLabel::Positive];
        TrainingSet::Pairs(
            (0..n)
                .map(|i| TrainingPair {
                    a: KeypointRef::new(0, i),
                    b: KeypointRef::new(1, i),
                    patch_a: patch(&mut rng),
                    patch_b: patch(&mut rng),
                    label: labels[i % 4],
                })
                .collect(),
        )
    }

    fn cfg(kind: LossKind) -> TrainConfig {
        TrainConfig {
            loss: LossConfig::with_kind(kind),
            arch: arch(),
            epochs: 3,
            batch_size: 4,
            learning_rate: 1e-2,
            momentum: 0.9,
            seed: 4,
            shuffle: true,
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_params(&arch(), 1).unwrap();
        assert_eq!(a, init_params(&arch(), 1).unwrap());
        assert_ne!(a, init_params(&arch(), 2).unwrap());
        for l in a.layers() {
            let s = 1.0 / (l.fan_in as f64).sqrt();
            assert!(l.weight.iter().all(|w| w.abs() <= s));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let data = pairs(8, 1);
        let c = TrainConfig { learning_rate: 0.0, ..cfg(LossKind::Mmcl) };
        let r = train(&data, &c).unwrap();
        assert_eq!(r.params, init_params(&c.arch, c.seed).unwrap());
        assert_eq!(r.epoch_losses.len(), 3);
    }

    #[test]
    fn identical_positive_pair_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = patch(&mut rng);
        let data = TrainingSet::Pairs(vec![TrainingPair {
            a: KeypointRef::new(0, 0),
            b: KeypointRef::new(0, 0),
            patch_a: p.clone(),
            patch_b: p,
            label: PairLabel::Positive,
        }]);
        let mut c = cfg(LossKind::Contrastive);
        c.loss.lambda = 0.0;
        let r = train(&data, &c).unwrap();
        assert!(r.epoch_losses.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn one_step_matches_hand_sgd_with_fd_gradient() {
        let data = pairs(1, 7);
        let c = TrainConfig { epochs: 1, batch_size: 1, momentum: 0.9, learning_rate: 0.05, ..cfg(LossKind::Contrastive) };
        let init = init_params(&c.arch, c.seed).unwrap();
        let r = train(&data, &c).unwrap();
        // Finite-difference gradient of the batch objective.
        let flat = init.to_flat();
        let f = |v: &[f64]| {
            let mut p = init.clone();
            p.set_flat(v).unwrap();
            batch_objective(&p, &data, &[0], &c.loss).unwrap().0
        };
        let (_, g) = batch_objective(&init, &data, &[0], &c.loss).unwrap();
        let gflat = g.to_flat();
        let eps = 1e-6;
        for (i, &gi) in gflat.iter().enumerate() {
            let mut hi = flat.clone();
            let mut lo = flat.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let fd = (f(&hi) - f(&lo)) / (2.0 * eps);
            assert!((fd - gi).abs() <= 1e-5 * (1.0 + fd.abs()), "param {i}: {fd} vs {gi}");
        }
        let expect: Vec<f64> = flat.iter().zip(&gflat).map(|(p, g)| p - 0.05 * g).collect();
        for (a, b) in r.params.to_flat().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn branches_share_parameters() {
        let data = pairs(8, 2);
        let r = train(&data, &cfg(LossKind::Hinge)).unwrap();
        let TrainingSet::Pairs(p) = &data else { unreachable!() };
        let (d1, _) = encoder_forward(&r.params, &p[0].patch_a).unwrap();
        let (d2, _) = encoder_forward(&r.params, &p[0].patch_a).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn training_is_deterministic() {
        let data = pairs(12, 5);
        let a = train(&data, &cfg(LossKind::Mmcl)).unwrap();
        let b = train(&data, &cfg(LossKind::Mmcl)).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn dataset_kind_must_match_loss() {
        let data = pairs(4, 1);
        assert!(matches!(train(&data, &cfg(LossKind::Triplet)), Err(Error::InvalidConfig(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = TrainingSet::Triplets(vec![TrainingTriplet {
            anchor: patch(&mut rng),
            positive: patch(&mut rng),
            negative: patch(&mut rng),
        }]);
        assert!(matches!(train(&t, &cfg(LossKind::Mmcl)), Err(Error::InvalidConfig(_))));
        assert!(train(&t, &cfg(LossKind::Triplet)).is_ok());
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let data = pairs(8, 3);
        let c = TrainConfig { learning_rate: 1e200, epochs: 3, ..cfg(LossKind::Contrastive) };
        let r = train(&data, &c);
        assert!(matches!(r, Err(Error::Divergence { .. })), "{:?}", r.map(|r| r.epoch_losses));
    }

    #[test]
    fn first_step_descends_for_small_lr() {
        let data = pairs(8, 9);
        for kind in [LossKind::Hinge, LossKind::Contrastive, LossKind::Mmcl] {
            let c = cfg(kind);
            let p0 = init_params(&c.arch, 1).unwrap();
            let batch: Vec<usize> = (0..8).collect();
            let (f0, g) = batch_objective(&p0, &data, &batch, &c.loss).unwrap();
            let mut lr = 1.0;
            let mut ok = false;
            for _ in 0..40 {
                let mut p = p0.clone();
                p.add_scaled(&g, -lr);
                if batch_objective(&p, &data, &batch, &c.loss).unwrap().0 <= f0 {
                    ok = true;
                    break;
                }
                lr *= 0.5;
            }
            assert!(ok, "{kind:?}");
        }
    }

    #[test]
    fn batches_mix_classes_in_ratio() {
        let data = pairs(40, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let order = epoch_order(&data, &mut rng);
        let TrainingSet::Pairs(p) = &data else { unreachable!() };
        let mut sorted = order.clone();
        sorted.sort();
        assert_eq!(sorted, (0..40).collect::<Vec<_>>());
        for chunk in order.chunks(8) {
            let pos = chunk.iter().filter(|&&i| p[i].label == PairLabel::Positive).count();
            assert_eq!(pos, 4);
        }
    }

    #[test]
    fn step_decay_schedule() {
        let c = TrainConfig { epochs: 7, learning_rate: 1.0, ..cfg(LossKind::Mmcl) };
        let lrs: Vec<f64> = (0..7).map(|e| c.learning_rate_at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.25]);
    }
}
