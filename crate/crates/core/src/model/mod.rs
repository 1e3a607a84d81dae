//! Permutation-invariant patch encoder and the metric-learning losses.
//!
//! The encoder is a shared per-point MLP followed by a channel-wise max over
//! the patch and a small fully connected head. Everything runs in `f64`;
//! gradients are computed by hand and checked against finite differences in
//! the test suite.

pub(crate) mod encoder;
mod loss;

use crate::error::{Error, Result};

pub use encoder::{encoder_backward, encoder_forward, ForwardCache};
pub use loss::{
    contrastive_loss, hinge_loss, mmcl_loss, regularized_loss, triplet_loss, LossConfig,
    LossKind, PairLoss, TripletLoss,
};

/// Which network wiring the trainer instantiates. Both run the same
/// computation; the aggregated variant reads the head as the post-pooling
/// fully connected reduction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    PatchSiamese,
    Aggregated,
}

impl Variant {
    pub fn tag(self) -> u8 {
        match self {
            Variant::PatchSiamese => 0,
            Variant::Aggregated => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::PatchSiamese),
            1 => Some(Variant::Aggregated),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderArch {
    /// Per-point MLP widths, starting with the 3 input coordinates.
    pub point_mlp_dims: Vec<usize>,
    /// Head widths, starting with the pooled width and ending with `D`.
    pub head_dims: Vec<usize>,
    pub variant: Variant,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch {
            point_mlp_dims: vec![3, 32, 64, 128],
            head_dims: vec![128, 128, 128],
            variant: Variant::PatchSiamese,
        }
    }
}

impl EncoderArch {
    pub fn new(point_mlp_dims: Vec<usize>, head_dims: Vec<usize>, variant: Variant) -> Result<Self> {
        let arch = EncoderArch {
            point_mlp_dims,
            head_dims,
            variant,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn descriptor_dim(&self) -> usize {
        *self.head_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.point_mlp_dims;
        let h = &self.head_dims;
        if p.len() < 2 || p[0] != 3 {
            return Err(Error::ArchMismatch(format!(
                "point MLP dims {p:?} must start at 3 and have at least one layer"
            )));
        }
        if h.len() < 2 || h[0] != p[p.len() - 1] {
            return Err(Error::ArchMismatch(format!(
                "head dims {h:?} must start at the pooled width {}",
                p[p.len() - 1]
            )));
        }
        if p.iter().chain(h).any(|&d| d == 0) {
            return Err(Error::ArchMismatch("zero-width layer".into()));
        }
        if self.descriptor_dim() < 8 {
            return Err(Error::ArchMismatch(format!(
                "descriptor dimension {} < 8",
                self.descriptor_dim()
            )));
        }
        Ok(())
    }
}

/// Affine layer `y = x·W + b` with `W` stored row-major as
/// `fan_in × fan_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    /// `out = x·W + b` for one input row.
    #[inline]
    pub(crate) fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (k, &a) in x.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &self.weight[k * self.fan_out..(k + 1) * self.fan_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += a * w;
            }
        }
    }
}

/// All weights and biases of the encoder, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: EncoderArch,
    pub point_layers: Vec<Dense>,
    pub head_layers: Vec<Dense>,
}

impl EncoderParams {
    pub fn zeros(arch: &EncoderArch) -> Result<Self> {
        arch.validate()?;
        let mk = |dims: &[usize]| dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(EncoderParams {
            arch: arch.clone(),
            point_layers: mk(&arch.point_mlp_dims),
            head_layers: mk(&arch.head_dims),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |ls: &[Dense]| ls.iter().map(|l| Dense::zeros(l.fan_in, l.fan_out)).collect();
        EncoderParams {
            arch: self.arch.clone(),
            point_layers: z(&self.point_layers),
            head_layers: z(&self.head_layers),
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.point_layers.iter().chain(&self.head_layers)
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.point_layers.iter_mut().chain(self.head_layers.iter_mut())
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Every scalar in layer order (weights then bias per layer).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ArchMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut at = 0;
        for l in self.layers_mut() {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    /// Checks layer shapes against the architecture.
    pub fn check_shapes(&self) -> Result<()> {
        self.arch.validate()?;
        let ok = |ls: &[Dense], dims: &[usize]| {
            ls.len() + 1 == dims.len()
                && ls.iter().zip(dims.windows(2)).all(|(l, w)| {
                    l.fan_in == w[0]
                        && l.fan_out == w[1]
                        && l.weight.len() == w[0] * w[1]
                        && l.bias.len() == w[1]
                })
        };
        if !ok(&self.point_layers, &self.arch.point_mlp_dims)
            || !ok(&self.head_layers, &self.arch.head_dims)
        {
            return Err(Error::ArchMismatch(
                "layer shapes disagree with the architecture".into(),
            ));
        }
        Ok(())
    }

    /// Hash of every parameter bit pattern; also rejects non-finite values.
    pub(crate) fn fingerprint(&self) -> Result<u64> {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for l in self.layers() {
            for v in l.weight.iter().chain(&l.bias) {
                if !v.is_finite() {
                    return Err(Error::InvalidParams("non-finite parameter".into()));
                }
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        Ok(h)
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layers()
            .map(|l| l.weight.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// `self += scale · other`, layer by layer.
    pub fn add_scaled(&mut self, other: &EncoderParams, scale: f64) {
        for (a, b) in self.layers_mut().zip(other.layers()) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.layers_mut() {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|x| *x *= s);
        }
    }
}

/// D-dimensional output of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        crate::baseline::euclidean(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for Descriptor {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}
