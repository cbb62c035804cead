//! Forward and backward kernels over raw tensors.
//!
//! Every kernel here is a pure function. The autodiff graph in
//! [`crate::autodiff`] records which kernel produced a node and replays the
//! matching `*_backward` during the reverse sweep.

use crate::error::{invalid, Error, Result};
use crate::scalar::{sigmoid as sigmoid_scalar, Real};
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Output spatial extent for a window op: `floor((size + 2·pad − k) / stride) + 1`.
pub fn window_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || k == 0 || k > padded {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Range of output positions whose tap at kernel offset `k_off` lands inside the input.
#[inline]
fn valid_range(in_size: usize, out_size: usize, k_off: usize, stride: usize, pad: usize) -> (usize, usize) {
    // need 0 <= o*stride + k_off - pad < in_size
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let limit = in_size + pad;
    let hi = if limit <= k_off {
        0
    } else {
        ((limit - k_off - 1) / stride + 1).min(out_size)
    };
    (lo.min(hi), hi)
}

fn conv_out_shape(input: Shape, weight: Shape, stride: usize, pad: usize) -> Result<Shape> {
    if input.c != weight.c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input,
            rhs: weight,
        });
    }
    if weight.h != weight.w || !(weight.h == 1 || weight.h == 3) {
        return Err(invalid(
            "conv2d",
            format!("only 1x1 and 3x3 kernels are supported, got weight {}", weight),
        ));
    }
    let oh = window_out(input.h, weight.h, stride, pad);
    let ow = window_out(input.w, weight.w, stride, pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape::new(input.n, weight.n, oh, ow)),
        _ => Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input,
            rhs: weight,
        }),
    }
}

/// Cross-correlation with optional per-output-channel bias.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let is = input.shape();
    let ws = weight.shape();
    let os = conv_out_shape(is, ws, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != ws.n {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: ws,
                rhs: b.shape(),
            });
        }
    }
    let (x, wt) = (input.data(), weight.data());
    let k = ws.h;
    let mut out = vec![T::zero(); os.numel()];
    let in_plane = is.plane();
    let out_plane = os.plane();
    for n in 0..is.n {
        for o in 0..os.c {
            let ob = (n * os.c + o) * out_plane;
            let dst = &mut out[ob..ob + out_plane];
            if let Some(b) = bias {
                dst.fill(b.data()[o]);
            }
            for c in 0..is.c {
                let src = &x[(n * is.c + c) * in_plane..][..in_plane];
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(is.h, os.h, ky, stride, pad);
                    for kx in 0..k {
                        let wv = wt[((o * ws.c + c) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox0, ox1) = valid_range(is.w, os.w, kx, stride, pad);
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let row = &src[iy * is.w..(iy + 1) * is.w];
                            let drow = &mut dst[oy * os.w..(oy + 1) * os.w];
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                let xs = &row[ix0..ix0 + (ox1 - ox0)];
                                for (d, &v) in drow[ox0..ox1].iter_mut().zip(xs) {
                                    *d += wv * v;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    drow[ox] += wv * row[ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(os, out)
}

pub struct ConvGrads<T> {
    pub input: Vec<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    out_shape: Shape,
    stride: usize,
    pad: usize,
) -> ConvGrads<T> {
    let is = input.shape();
    let ws = weight.shape();
    let os = out_shape;
    let k = ws.h;
    let (x, wt) = (input.data(), weight.data());
    let mut gin = vec![T::zero(); is.numel()];
    let mut gw = vec![T::zero(); ws.numel()];
    let mut gb = vec![T::zero(); os.c];
    let in_plane = is.plane();
    let out_plane = os.plane();
    for n in 0..is.n {
        for o in 0..os.c {
            let gsrc = &grad_out[(n * os.c + o) * out_plane..][..out_plane];
            gb[o] += gsrc.iter().copied().sum::<T>();
            for c in 0..is.c {
                let ib = (n * is.c + c) * in_plane;
                for ky in 0..k {
                    let (oy0, oy1) = valid_range(is.h, os.h, ky, stride, pad);
                    for kx in 0..k {
                        let wi = ((o * ws.c + c) * k + ky) * k + kx;
                        let wv = wt[wi];
                        let (ox0, ox1) = valid_range(is.w, os.w, kx, stride, pad);
                        let mut acc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            let grow = &gsrc[oy * os.w..(oy + 1) * os.w];
                            let rb = ib + iy * is.w;
                            if stride == 1 {
                                let ix0 = ox0 + kx - pad;
                                let len = ox1 - ox0;
                                let xs = &x[rb + ix0..rb + ix0 + len];
                                let gs = &grow[ox0..ox1];
                                for (&g, &v) in gs.iter().zip(xs) {
                                    acc += g * v;
                                }
                                for (d, &g) in gin[rb + ix0..rb + ix0 + len].iter_mut().zip(gs) {
                                    *d += wv * g;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let ix = ox * stride + kx - pad;
                                    let g = grow[ox];
                                    acc += g * x[rb + ix];
                                    gin[rb + ix] += wv * g;
                                }
                            }
                        }
                        gw[wi] += acc;
                    }
                }
            }
        }
    }
    ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    }
}

/// Max pooling with a −∞ border. Returns the pooled tensor and, per output
/// element, the flat input index of the first maximum in window scan order.
pub fn max_pool<T: Real>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let is = input.shape();
    if k == 0 || stride == 0 {
        return Err(invalid("max_pool", "kernel and stride must be >= 1"));
    }
    // a window made only of padding would have no winner
    if pad > (k - 1) / 2 {
        return Err(invalid(
            "max_pool",
            format!("padding {} too large for window {}", pad, k),
        ));
    }
    let (oh, ow) = match (window_out(is.h, k, stride, pad), window_out(is.w, k, stride, pad)) {
        (Some(oh), Some(ow)) => (oh, ow),
        _ => {
            return Err(invalid(
                "max_pool",
                format!("window {} larger than padded input {}", k, is),
            ))
        }
    };
    let os = Shape::new(is.n, is.c, oh, ow);
    let x = input.data();
    let mut out = Vec::with_capacity(os.numel());
    let mut arg = Vec::with_capacity(os.numel());
    for nc in 0..is.n * is.c {
        let base = nc * is.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = usize::MAX;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= is.h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= is.w as isize {
                            continue;
                        }
                        let i = base + iy as usize * is.w + ix as usize;
                        if best_i == usize::MAX || x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(os, out)?, arg))
}

pub fn max_pool_backward<T: Real>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut g = vec![T::zero(); input_len];
    for (&i, &go) in argmax.iter().zip(grad_out) {
        g[i] += go;
    }
    g
}

pub fn upsample_nearest<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor < 2 {
        return Err(invalid(
            "upsample_nearest",
            format!("factor must be >= 2, got {}", factor),
        ));
    }
    let s = input.shape();
    let os = Shape::new(s.n, s.c, s.h * factor, s.w * factor);
    Ok(Tensor::from_fn(os, |n, c, h, w| {
        input.at(n, c, h / factor, w / factor)
    }))
}

pub fn upsample_nearest_backward<T: Real>(in_shape: Shape, factor: usize, grad_out: &[T]) -> Vec<T> {
    let os = Shape::new(in_shape.n, in_shape.c, in_shape.h * factor, in_shape.w * factor);
    let mut g = vec![T::zero(); in_shape.numel()];
    for n in 0..os.n {
        for c in 0..os.c {
            for h in 0..os.h {
                for w in 0..os.w {
                    g[in_shape.index(n, c, h / factor, w / factor)] += grad_out[os.index(n, c, h, w)];
                }
            }
        }
    }
    g
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            lhs: sa,
            rhs: sb,
        });
    }
    let os = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * la..(n + 1) * la]);
        data.extend_from_slice(&b.data()[n * lb..(n + 1) * lb]);
    }
    Tensor::new(os, data)
}

/// Splits an upstream gradient of a channel concat back into its two parts.
pub fn concat_channels_backward<T: Real>(sa: Shape, sb: Shape, grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let (la, lb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut ga = Vec::with_capacity(sa.numel());
    let mut gb = Vec::with_capacity(sb.numel());
    for n in 0..sa.n {
        let base = n * (la + lb);
        ga.extend_from_slice(&grad_out[base..base + la]);
        gb.extend_from_slice(&grad_out[base + la..base + la + lb]);
    }
    (ga, gb)
}

pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let plane = s.plane();
    let inv = T::one() / T::from_usize_lossy(plane);
    let data = input
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Real>(in_shape: Shape, grad_out: &[T]) -> Vec<T> {
    let plane = in_shape.plane();
    let inv = T::one() / T::from_usize_lossy(plane);
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
        .collect()
}

/// Affine map of an n×c×1×1 input by an out×c×1×1 weight.
pub fn dense_fc<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (is, ws) = (input.shape(), weight.shape());
    if is.h != 1 || is.w != 1 || ws.h != 1 || ws.w != 1 || is.c != ws.c || bias.numel() != ws.n {
        return Err(Error::ShapeMismatch {
            op: "dense_fc",
            lhs: is,
            rhs: ws,
        });
    }
    let mut out = Vec::with_capacity(is.n * ws.n);
    for n in 0..is.n {
        let x = &input.data()[n * is.c..(n + 1) * is.c];
        for o in 0..ws.n {
            let w = &weight.data()[o * ws.c..(o + 1) * ws.c];
            let dot: T = x.iter().zip(w).map(|(&a, &b)| a * b).sum();
            out.push(dot + bias.data()[o]);
        }
    }
    Tensor::new(Shape::new(is.n, ws.n, 1, 1), out)
}

pub fn dense_fc_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (is, ws) = (input.shape(), weight.shape());
    let mut gi = vec![T::zero(); is.numel()];
    let mut gw = vec![T::zero(); ws.numel()];
    let mut gb = vec![T::zero(); ws.n];
    for n in 0..is.n {
        for o in 0..ws.n {
            let g = grad_out[n * ws.n + o];
            gb[o] += g;
            for c in 0..is.c {
                gi[n * is.c + c] += g * weight.data()[o * ws.c + c];
                gw[o * ws.c + c] += g * input.data()[n * is.c + c];
            }
        }
    }
    (gi, gw, gb)
}

pub fn leaky_relu<T: Real>(input: &Tensor<T>, slope: T) -> Tensor<T> {
    input.map(|x| if x >= T::zero() { x } else { slope * x })
}

pub fn leaky_relu_backward<T: Real>(input: &Tensor<T>, slope: T, grad_out: &[T]) -> Vec<T> {
    input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x >= T::zero() { g } else { slope * g })
        .collect()
}

pub fn sigmoid<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Real>(output: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    output
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| g * y * (T::one() - y))
        .collect()
}

/// Per-channel statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn check_bn<T: Real>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    let c = input.shape().c;
    if gamma.numel() != c || beta.numel() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: input.shape(),
            rhs: gamma.shape(),
        });
    }
    Ok(())
}

/// Training-mode batch norm: normalizes each channel over N·H·W with the biased variance.
pub fn batch_norm_train<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    check_bn(input, gamma, beta)?;
    let s = input.shape();
    let plane = s.plane();
    let m = T::from_usize_lossy(s.n * plane);
    let eps = T::lit(BN_EPS);
    let x = input.data();
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for n in 0..s.n {
            let b = s.index(n, c, 0, 0);
            acc += x[b..b + plane].iter().copied().sum::<T>();
        }
        mean[c] = acc / m;
        let mut acc = T::zero();
        for n in 0..s.n {
            let b = s.index(n, c, 0, 0);
            acc += x[b..b + plane]
                .iter()
                .map(|&v| (v - mean[c]) * (v - mean[c]))
                .sum::<T>();
        }
        var[c] = acc / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); s.numel()];
    let mut out = vec![T::zero(); s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            let b = s.index(n, c, 0, 0);
            let (g, bt) = (gamma.data()[c], beta.data()[c]);
            for i in b..b + plane {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }
    Ok((
        Tensor::new(s, out)?,
        BnSaved {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

pub fn batch_norm_train_backward<T: Real>(
    shape: Shape,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = shape.plane();
    let m = T::from_usize_lossy(shape.n * plane);
    let mut gx = vec![T::zero(); shape.numel()];
    let mut gg = vec![T::zero(); shape.c];
    let mut gb = vec![T::zero(); shape.c];
    for c in 0..shape.c {
        let (mut sum_dy, mut sum_dy_xhat) = (T::zero(), T::zero());
        for n in 0..shape.n {
            let b = shape.index(n, c, 0, 0);
            for i in b..b + plane {
                sum_dy += grad_out[i];
                sum_dy_xhat += grad_out[i] * saved.xhat[i];
            }
        }
        gb[c] = sum_dy;
        gg[c] = sum_dy_xhat;
        let k = gamma.data()[c] * saved.inv_std[c] / m;
        for n in 0..shape.n {
            let b = shape.index(n, c, 0, 0);
            for i in b..b + plane {
                gx[i] = k * (m * grad_out[i] - sum_dy - saved.xhat[i] * sum_dy_xhat);
            }
        }
    }
    (gx, gg, gb)
}

/// Inference-mode batch norm with frozen running statistics.
pub fn batch_norm_eval<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    var: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    check_bn(input, gamma, beta)?;
    let s = input.shape();
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let out = Tensor::from_fn(s, |n, c, h, w| {
        gamma.data()[c] * (input.at(n, c, h, w) - mean.data()[c]) * inv_std[c] + beta.data()[c]
    });
    Ok((out, inv_std))
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Six nested loops, straight from the definition of cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (is, ws) = (x.shape(), w.shape());
        let oh = (is.h + 2 * pad - ws.h) / stride + 1;
        let ow = (is.w + 2 * pad - ws.w) / stride + 1;
        let mut out = Tensor::zeros(Shape::new(is.n, ws.n, oh, ow));
        for n in 0..is.n {
            for o in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for c in 0..is.c {
                            for ky in 0..ws.h {
                                for kx in 0..ws.w {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < is.h && (ix as usize) < is.w {
                                        acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.set(n, o, oy, ox, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f64>::randn(Shape::new(2, 1, 5, 4), 1.0, &mut rng());
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let b = Tensor::vector(vec![0.0]);
        assert_eq!(conv2d(&x, &w, Some(&b), 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_zero_weight_gives_bias() {
        let x = Tensor::<f64>::randn(Shape::new(1, 3, 6, 6), 1.0, &mut rng());
        let w = Tensor::zeros(Shape::new(2, 3, 3, 3));
        let b = Tensor::vector(vec![0.25, -1.5]);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        for c in 0..2 {
            assert!(y.slice_channels(c, 1).unwrap().data().iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn conv_fixed_4x4_matches_naive() {
        let x = Tensor::<f64>::from_fn(Shape::new(1, 1, 4, 4), |_, _, h, w| (h * 4 + w) as f64 + 1.0);
        let k = [1.0, -2.0, 0.5, 0.0, 3.0, 1.0, -1.0, 2.0, 0.25];
        let w = Tensor::new(Shape::new(1, 1, 3, 3), k.to_vec()).unwrap();
        let b = Tensor::vector(vec![0.1]);
        let y = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        let oracle = naive_conv(&x, &w, &[0.1], 1, 1);
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        for (a, b) in y.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // top-left corner by hand: 3*1 + 1*2 + 2*5 + 0.25*6 + 0.1
        assert!((y.at(0, 0, 0, 0) - 16.6).abs() < 1e-12);
    }

    #[test]
    fn conv_random_strided_matches_naive() {
        let mut r = rng();
        for &(h, w, stride, pad, k) in &[(7, 5, 2, 1, 3), (8, 8, 1, 0, 3), (6, 9, 2, 0, 1), (5, 5, 3, 1, 3)] {
            let x = Tensor::<f64>::randn(Shape::new(2, 3, h, w), 1.0, &mut r);
            let wt = Tensor::<f64>::randn(Shape::new(4, 3, k, k), 1.0, &mut r);
            let b = vec![0.1, 0.2, 0.3, 0.4];
            let y = conv2d(&x, &wt, Some(&Tensor::vector(b.clone())), stride, pad).unwrap();
            let o = naive_conv(&x, &wt, &b, stride, pad);
            assert_eq!(y.shape(), o.shape());
            for (a, b) in y.data().iter().zip(o.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::zeros(Shape::new(2, 4, 3, 3));
        let err = conv2d(&x, &w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1x3x4x4]") && err.contains("[2x4x3x3]"), "{err}");
        let w7 = Tensor::zeros(Shape::new(2, 3, 7, 7));
        assert!(conv2d(&x, &w7, None, 1, 3).is_err());
    }

    #[test]
    fn max_pool_basics() {
        let c = Tensor::<f64>::full(Shape::new(1, 2, 5, 5), 3.5);
        let (y, _) = max_pool(&c, 3, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));

        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = max_pool(&x, 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        assert!(max_pool(&x, 3, 1, 0).is_err());
    }

    #[test]
    fn max_pool_matches_window_scan() {
        let x = Tensor::<f64>::randn(Shape::new(1, 1, 8, 8), 1.0, &mut rng());
        let (y, _) = max_pool(&x, 3, 1, 1).unwrap();
        for oy in 0..8usize {
            for ox in 0..8usize {
                let mut m = f64::NEG_INFINITY;
                for iy in oy.saturating_sub(1)..(oy + 2).min(8) {
                    for ix in ox.saturating_sub(1)..(ox + 2).min(8) {
                        m = m.max(x.at(0, 0, iy, ix));
                    }
                }
                assert_eq!(y.at(0, 0, oy, ox), m);
            }
        }
    }

    #[test]
    fn max_pool_tie_goes_to_first() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 2, 2), 1.0);
        let (_, arg) = max_pool(&x, 2, 2, 0).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn window_formula() {
        for h in 1..20 {
            for k in 1..6 {
                for s in 1..4 {
                    for p in 0..3 {
                        let expect = if k > h + 2 * p { None } else { Some((h + 2 * p - k) / s + 1) };
                        assert_eq!(window_out(h, k, s, p), expect);
                        if let (1 | 3, Some(e)) = (k, expect) {
                            let x = Tensor::<f64>::zeros(Shape::new(1, 1, h, h));
                            let w = Tensor::<f64>::zeros(Shape::new(1, 1, k, k));
                            let y = conv2d(&x, &w, None, s, p).unwrap();
                            assert_eq!(y.shape().h, e);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn upsample_replicates() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert!(upsample_nearest(&x, 0).is_err());
        let g = upsample_nearest_backward(x.shape(), 2, &[1.0; 16]);
        assert_eq!(g, vec![4.0; 4]);
    }

    #[test]
    fn concat_and_split() {
        let mut r = rng();
        let a = Tensor::<f64>::randn(Shape::new(2, 3, 4, 4), 1.0, &mut r);
        let b = Tensor::<f64>::randn(Shape::new(2, 5, 4, 4), 1.0, &mut r);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape().c, 8);
        assert_eq!(y.slice_channels(0, 3).unwrap(), a);
        assert_eq!(y.slice_channels(3, 5).unwrap(), b);
        let aa = concat_channels(&a, &a).unwrap();
        assert_eq!(aa.shape().c, 6);
        let c = Tensor::<f64>::zeros(Shape::new(2, 1, 2, 4));
        assert!(concat_channels(&a, &c).is_err());
    }

    #[test]
    fn gap_matches_mean() {
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 4), 1.0, &mut rng());
        let y = global_avg_pool(&x);
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for h in 0..4 {
                    for w in 0..4 {
                        s += x.at(n, c, h, w);
                    }
                }
                assert!((y.at(n, c, 0, 0) - s / 16.0).abs() < 1e-14);
            }
        }
        let z = global_avg_pool(&Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3)));
        assert!(z.data().iter().all(|&v| v == 0.0));
        let k = global_avg_pool(&Tensor::<f64>::full(Shape::new(1, 2, 3, 3), 0.7));
        assert!(k.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn dense_fc_cases() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 1, 1), 1.0, &mut r);
        let eye = Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, c, _, _| if o == c { 1.0 } else { 0.0 });
        let zb = Tensor::vector(vec![0.0; 3]);
        assert_eq!(dense_fc(&x, &eye, &zb).unwrap(), x);
        let zw = Tensor::zeros(Shape::new(2, 3, 1, 1));
        let b = Tensor::vector(vec![0.5, -2.0]);
        let y = dense_fc(&x, &zw, &b).unwrap();
        assert_eq!(y.data(), &[0.5, -2.0, 0.5, -2.0]);
        let w = Tensor::<f64>::randn(Shape::new(2, 3, 1, 1), 1.0, &mut r);
        let y = dense_fc(&x, &w, &b).unwrap();
        for n in 0..2 {
            for o in 0..2 {
                let dot: f64 = (0..3).map(|c| w.at(o, c, 0, 0) * x.at(n, c, 0, 0)).sum();
                assert!((y.at(n, o, 0, 0) - dot - b.data()[o]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::new(Shape::new(1, 1, 1, 3), vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.1).data(), &[-0.1, 0.0, 2.0]);
        assert_eq!(sigmoid(&x).data()[1], 0.5);
    }

    #[test]
    fn batch_norm_moments() {
        let x = Tensor::<f64>::randn(Shape::new(4, 3, 5, 5), 2.0, &mut rng()).map(|v| v + 1.0);
        let g = Tensor::vector(vec![1.0; 3]);
        let b = Tensor::vector(vec![0.0; 3]);
        let (y, saved) = batch_norm_train(&x, &g, &b).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| y.slice_channels(c, 1).unwrap().batch_item(n).into_data())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - saved.var[c] / (saved.var[c] + BN_EPS)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_on_standardized_input_is_identity() {
        // exact zero mean, unit variance per channel
        let pattern = [1.0f64, -1.0, 1.0, -1.0];
        let x = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, _, h, w| pattern[h * 2 + w]);
        let g = Tensor::vector(vec![1.0; 2]);
        let b = Tensor::vector(vec![0.0; 2]);
        let (y, _) = batch_norm_train(&x, &g, &b).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
