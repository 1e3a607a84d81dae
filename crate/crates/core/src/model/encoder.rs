use super::{Dense, Descriptor, EncoderParams};
use crate::error::{Error, Result};
use crate::geometry::{Patch, Vec3};

/// Activations kept by [`encoder_forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    params_fp: u64,
    patch_fp: u64,
    n: usize,
    /// Input of every per-point layer, row-major `n × fan_in`; entry 0 is
    /// the raw coordinates.
    point_inputs: Vec<Vec<f64>>,
    /// For each pooled channel, the first point attaining the maximum.
    argmax: Vec<usize>,
    /// Input of every head layer; entry 0 is the pooled vector.
    head_inputs: Vec<Vec<f64>>,
}

fn patch_fingerprint(points: &[Vec3]) -> u64 {
    let mut h = 0x8422_2325_cbf2_9ce4u64;
    for p in points {
        for v in p.iter() {
            h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Encodes a patch into a descriptor.
pub fn encoder_forward(params: &EncoderParams, patch: &Patch) -> Result<(Descriptor, ForwardCache)> {
    forward_points(params, &patch.points)
}

pub(crate) fn forward_points(
    params: &EncoderParams,
    points: &[Vec3],
) -> Result<(Descriptor, ForwardCache)> {
    params.check_shapes()?;
    let params_fp = params.fingerprint()?;
    let n = points.len();
    if n == 0 {
        return Err(Error::ArchMismatch("empty patch".into()));
    }

    let mut x: Vec<f64> = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let mut point_inputs = Vec::with_capacity(params.point_layers.len());
    let last = params.point_layers.len() - 1;
    for (li, layer) in params.point_layers.iter().enumerate() {
        let mut y = vec![0.0; n * layer.fan_out];
        for (xr, yr) in x
            .chunks_exact(layer.fan_in)
            .zip(y.chunks_exact_mut(layer.fan_out))
        {
            layer.apply(xr, yr);
            if li != last {
                relu(yr);
            }
        }
        point_inputs.push(std::mem::replace(&mut x, y));
    }

    // channel-wise max over points; strict comparison keeps the first index
    let width = params.point_layers[last].fan_out;
    let mut pooled = x[..width].to_vec();
    let mut argmax = vec![0usize; width];
    for (r, row) in x.chunks_exact(width).enumerate().skip(1) {
        for c in 0..width {
            if row[c] > pooled[c] {
                pooled[c] = row[c];
                argmax[c] = r;
            }
        }
    }

    let mut h = pooled;
    let mut head_inputs = Vec::with_capacity(params.head_layers.len());
    let hlast = params.head_layers.len() - 1;
    for (li, layer) in params.head_layers.iter().enumerate() {
        let mut y = vec![0.0; layer.fan_out];
        layer.apply(&h, &mut y);
        if li != hlast {
            relu(&mut y);
        }
        head_inputs.push(std::mem::replace(&mut h, y));
    }

    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParams("encoder produced a non-finite descriptor".into()));
    }
    let cache = ForwardCache {
        params_fp,
        patch_fp: patch_fingerprint(points),
        n,
        point_inputs,
        argmax,
        head_inputs,
    };
    Ok((Descriptor(h), cache))
}

#[inline]
fn relu(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Gradient of `upstream · descriptor` with respect to every parameter.
///
/// Max-pooling routes each channel's gradient to the single point recorded
/// in the cache (the lowest index among ties).
pub fn encoder_backward(
    params: &EncoderParams,
    patch: &Patch,
    upstream: &[f64],
    cache: &ForwardCache,
) -> Result<EncoderParams> {
    let mut grads = params.zeros_like();
    accumulate_backward(params, &patch.points, upstream, cache, &mut grads)?;
    Ok(grads)
}

/// Adds the gradient of `upstream · descriptor` into `grads`.
pub(crate) fn accumulate_backward(
    params: &EncoderParams,
    points: &[Vec3],
    upstream: &[f64],
    cache: &ForwardCache,
    grads: &mut EncoderParams,
) -> Result<()> {
    if cache.params_fp != params.fingerprint()?
        || cache.patch_fp != patch_fingerprint(points)
        || cache.n != points.len()
    {
        return Err(Error::InvalidCache);
    }
    if upstream.len() != params.arch.descriptor_dim() {
        return Err(Error::ArchMismatch(format!(
            "upstream gradient has {} entries, descriptor has {}",
            upstream.len(),
            params.arch.descriptor_dim()
        )));
    }

    // head, last layer first; inputs of layers > 0 went through a ReLU
    let mut g = upstream.to_vec();
    for li in (0..params.head_layers.len()).rev() {
        let layer = &params.head_layers[li];
        let input = &cache.head_inputs[li];
        let gl = &mut grads.head_layers[li];
        outer_accumulate(input, &g, gl);
        let mut g_in = vec![0.0; layer.fan_in];
        back_through(layer, &g, &mut g_in);
        if li > 0 {
            mask_relu(input, &mut g_in);
        }
        g = g_in;
    }

    // un-pool into a sparse n × width gradient
    let n = cache.n;
    let plast = params.point_layers.len() - 1;
    let width = params.point_layers[plast].fan_out;
    let mut gp = vec![0.0; n * width];
    for (c, &r) in cache.argmax.iter().enumerate() {
        gp[r * width + c] += g[c];
    }
    let mut live: Vec<bool> = (0..n)
        .map(|r| gp[r * width..(r + 1) * width].iter().any(|&v| v != 0.0))
        .collect();

    for li in (0..params.point_layers.len()).rev() {
        let layer = &params.point_layers[li];
        let input = &cache.point_inputs[li];
        let gl = &mut grads.point_layers[li];
        let fin = layer.fan_in;
        let fout = layer.fan_out;
        let need_input_grad = li > 0;
        let mut g_in = if need_input_grad {
            vec![0.0; n * fin]
        } else {
            Vec::new()
        };
        for r in 0..n {
            if !live[r] {
                continue;
            }
            let grow = &gp[r * fout..(r + 1) * fout];
            let xrow = &input[r * fin..(r + 1) * fin];
            outer_accumulate(xrow, grow, gl);
            if need_input_grad {
                let gin = &mut g_in[r * fin..(r + 1) * fin];
                back_through(layer, grow, gin);
                mask_relu(xrow, gin);
            }
        }
        if need_input_grad {
            for r in 0..n {
                live[r] = live[r] && g_in[r * fin..(r + 1) * fin].iter().any(|&v| v != 0.0);
            }
            gp = g_in;
        }
    }
    Ok(())
}

/// `dW += xᵀ·g`, `db += g` for one row.
#[inline]
fn outer_accumulate(x: &[f64], g: &[f64], grad: &mut Dense) {
    let fout = grad.fan_out;
    for (b, gv) in grad.bias.iter_mut().zip(g) {
        *b += gv;
    }
    for (k, &a) in x.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let row = &mut grad.weight[k * fout..(k + 1) * fout];
        for (w, gv) in row.iter_mut().zip(g) {
            *w += a * gv;
        }
    }
}

/// `g_in = W·g` (gradient with respect to the layer input).
#[inline]
fn back_through(layer: &Dense, g: &[f64], g_in: &mut [f64]) {
    let fout = layer.fan_out;
    for (k, gi) in g_in.iter_mut().enumerate() {
        let row = &layer.weight[k * fout..(k + 1) * fout];
        *gi = row.iter().zip(g).map(|(w, gv)| w * gv).sum();
    }
}

/// Zeroes gradient entries whose post-ReLU activation was clamped.
#[inline]
fn mask_relu(activation: &[f64], g: &mut [f64]) {
    for (gv, &a) in g.iter_mut().zip(activation) {
        if a <= 0.0 {
            *gv = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderArch, Variant};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(arch: &EncoderArch, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = EncoderParams::zeros(arch).unwrap();
        let flat: Vec<f64> = (0..p.num_params()).map(|_| rng.gen::<f64>() - 0.5).collect();
        p.set_flat(&flat).unwrap();
        p
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vec3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
            .collect()
    }

    #[test]
    fn hand_computed_forward() {
        // point layer 3→4 then head 4→8
        let arch = EncoderArch::new(vec![3, 4], vec![4, 8], Variant::PatchSiamese).unwrap();
        let mut p = EncoderParams::zeros(&arch).unwrap();
        // W1 rows are inputs: x, y, z
        p.point_layers[0].weight = vec![
            1.0, 0.0, -1.0, 2.0, //
            0.0, 1.0, 1.0, 0.0, //
            0.5, 0.0, 0.0, -1.0,
        ];
        p.point_layers[0].bias = vec![0.0, 0.5, 0.0, 0.0];
        for k in 0..4 {
            p.head_layers[0].weight[k * 8 + k] = 1.0;
            p.head_layers[0].weight[k * 8 + 4 + k] = -2.0;
        }
        p.head_layers[0].bias = vec![0.1; 8];
        let pts = [Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.0, 2.0)];
        // point 0: [1+1.5, 2+0.5, -1+2, 2-3] = [2.5, 2.5, 1, -1]
        // point 1: [-1+1, 0+0.5, 1+0, -2-2] = [0, 0.5, 1, -4]
        // pooled: [2.5, 2.5, 1, -1]
        let (d, _) = forward_points(&p, &pts).unwrap();
        let want = [2.6, 2.6, 1.1, -0.9, -4.9, -4.9, -1.9, 2.1];
        for (a, b) in d.0.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", d.0);
        }
    }

    #[test]
    fn zero_params_give_zero_descriptor() {
        let arch = EncoderArch::new(vec![3, 8, 8], vec![8, 8, 8], Variant::PatchSiamese).unwrap();
        let p = EncoderParams::zeros(&arch).unwrap();
        let (d, _) = forward_points(&p, &random_points(16, 1)).unwrap();
        assert!(d.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_gives_identical_bits() {
        let arch = EncoderArch::new(vec![3, 16, 16], vec![16, 16, 8], Variant::PatchSiamese).unwrap();
        let p = random_params(&arch, 2);
        let pts = random_points(24, 3);
        let (base, _) = forward_points(&p, &pts).unwrap();
        let mut rev = pts.clone();
        rev.reverse();
        let (d, _) = forward_points(&p, &rev).unwrap();
        assert_eq!(base, d);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let arch = EncoderArch::new(vec![3, 8, 8], vec![8, 8, 8], Variant::PatchSiamese).unwrap();
        let p = random_params(&arch, 4);
        let pts = random_points(10, 5);
        let (_, cache) = forward_points(&p, &pts).unwrap();
        let mut g = p.zeros_like();
        accumulate_backward(&p, &pts, &[0.0; 8], &cache, &mut g).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_goes_to_first_duplicate() {
        // one point layer 3→8 (linear), head 8→8 identity
        let arch = EncoderArch::new(vec![3, 8], vec![8, 8], Variant::PatchSiamese).unwrap();
        let mut p = random_params(&arch, 6);
        for k in 0..8 {
            for j in 0..8 {
                p.head_layers[0].weight[k * 8 + j] = if k == j { 1.0 } else { 0.0 };
            }
        }
        let a = Vec3::new(0.3, -0.2, 0.1);
        let b = Vec3::new(-0.4, 0.25, 0.05);
        let pts = vec![a, b, a, b];
        let (_, cache) = forward_points(&p, &pts).unwrap();
        assert!(cache.argmax.iter().all(|&r| r < 2));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let arch = EncoderArch::new(vec![3, 8], vec![8, 8], Variant::PatchSiamese).unwrap();
        let mut p = random_params(&arch, 7);
        let pts = random_points(8, 8);
        let (_, cache) = forward_points(&p, &pts).unwrap();
        let mut g = p.zeros_like();
        let mut other = pts.clone();
        other[0].x += 1.0;
        assert!(matches!(
            accumulate_backward(&p, &other, &[1.0; 8], &cache, &mut g),
            Err(Error::InvalidCache)
        ));
        p.head_layers[0].bias[0] += 1.0;
        assert!(matches!(
            accumulate_backward(&p, &pts, &[1.0; 8], &cache, &mut g),
            Err(Error::InvalidCache)
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let arch = EncoderArch::new(vec![3, 8], vec![8, 8], Variant::PatchSiamese).unwrap();
        let mut p = random_params(&arch, 9);
        p.head_layers[0].bias.pop();
        assert!(matches!(
            forward_points(&p, &random_points(4, 1)),
            Err(Error::ArchMismatch(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = EncoderArch::new(vec![3, 6, 5], vec![5, 7, 8], Variant::PatchSiamese).unwrap();
        let p = random_params(&arch, 10);
        let pts = random_points(9, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let upstream: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() - 0.5).collect();
        let (_, cache) = forward_points(&p, &pts).unwrap();
        let mut g = p.zeros_like();
        accumulate_backward(&p, &pts, &upstream, &cache, &mut g).unwrap();
        let analytic = g.to_flat();

        let objective = |q: &EncoderParams| -> f64 {
            let (d, _) = forward_points(q, &pts).unwrap();
            d.0.iter().zip(&upstream).map(|(a, b)| a * b).sum()
        };
        let base = p.to_flat();
        let eps = 1e-6;
        let mut q = p.clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            q.set_flat(&plus).unwrap();
            let fp = objective(&q);
            let mut minus = base.clone();
            minus[i] -= eps;
            q.set_flat(&minus).unwrap();
            let fm = objective(&q);
            let numeric = (fp - fm) / (2.0 * eps);
            let scale = numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (numeric - analytic[i]).abs() / scale < 1e-5,
                "param {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
    }
}
