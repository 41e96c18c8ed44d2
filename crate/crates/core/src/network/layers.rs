//! Forward and backward kernels for the layers the network is built from.

use crate::tensor::{matmul, MatRef, Real, Tensor};

/// Patch matrix of one `(cin, h, w)` item: row `(ci·k + ky)·k + kx`, column `y·w + x`.
fn im2col<T: Real>(plane: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        let src = &plane[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = ((-dx).max(0) as usize).min(w);
                let x1 = ((w as isize - dx).min(w as isize).max(0) as usize).max(x0);
                for y in 0..h {
                    let out = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize || x0 == x1 {
                        out.fill(T::zero());
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(T::zero());
                    out[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                    out[x1..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`], accumulated into `plane`.
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, plane: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        let dst = &mut plane[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                let s0 = (x0 as isize + dx) as usize;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    dst_row
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                        .for_each(|(d, &v)| *d += v);
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. `weight` is `(cout, cin, k, k)` row-major.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    k: usize,
) -> Tensor<T> {
    let [n, cin, h, w] = x.shape();
    let hw = h * w;
    let ckk = cin * k * k;
    assert_eq!(
        weight.len(),
        cout * ckk,
        "conv weight does not match input channels"
    );
    let mut y = Tensor::zeros([n, cout, h, w]);
    let mut cols = if k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    for i in 0..n {
        let patches: &[T] = if k == 1 {
            x.item(i)
        } else {
            im2col(x.item(i), cin, h, w, k, &mut cols);
            &cols
        };
        let out = y.item_mut(i);
        matmul(
            MatRef::new(weight, cout, ckk),
            MatRef::new(patches, ckk, hw),
            out,
            false,
        );
        if let Some(b) = bias {
            for (co, &bv) in b.iter().enumerate() {
                out[co * hw..(co + 1) * hw]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    y
}

/// Accumulates weight (and bias) gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    cout: usize,
    k: usize,
    dy: &Tensor<T>,
    dweight: &mut [T],
    mut dbias: Option<&mut [T]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let [n, cin, h, w] = x.shape();
    let hw = h * w;
    let ckk = cin * k * k;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut cols = if k == 1 {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    let mut dcols = if k == 1 || !need_dx {
        Vec::new()
    } else {
        vec![T::zero(); ckk * hw]
    };
    for i in 0..n {
        let dyi = dy.item(i);
        if let Some(db) = dbias.as_deref_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dyi[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
            }
        }
        let patches: &[T] = if k == 1 {
            x.item(i)
        } else {
            im2col(x.item(i), cin, h, w, k, &mut cols);
            &cols
        };
        matmul(
            MatRef::new(dyi, cout, hw),
            MatRef::new(patches, ckk, hw).t(),
            dweight,
            true,
        );
        if let Some(dx) = dx.as_mut() {
            let w_t = MatRef::new(weight, cout, ckk).t();
            if k == 1 {
                matmul(w_t, MatRef::new(dyi, cout, hw), dx.item_mut(i), false);
            } else {
                matmul(w_t, MatRef::new(dyi, cout, hw), &mut dcols, false);
                col2im(&dcols, cin, h, w, k, dx.item_mut(i));
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

/// Saved quantities of a batch-statistics normalization pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Biased (population) batch variance.
    pub var: Vec<T>,
}

impl<T: Real> BatchNormCache<T> {
    /// Elements per channel that produced the statistics.
    pub fn count(&self) -> usize {
        self.xhat.n() * self.xhat.plane_len()
    }
}

pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, BatchNormCache<T>) {
    let [n, c, _, _] = x.shape();
    let count = T::from_usize(n * x.plane_len()).expect("count");
    let eps = T::from_f64_lossy(BN_EPS);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let m = (0..n)
            .map(|i| x.plane(i, ch).iter().copied().sum::<T>())
            .sum::<T>()
            / count;
        let v = (0..n)
            .map(|i| x.plane(i, ch).iter().map(|&v| (v - m) * (v - m)).sum::<T>())
            .sum::<T>()
            / count;
        mean[ch] = m;
        var[ch] = v;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut y = x.clone();
    for i in 0..n {
        for ch in 0..c {
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (xh, yv) in xhat.plane_mut(i, ch).iter_mut().zip(y.plane_mut(i, ch)) {
                *xh = (*xh - m) * s;
                *yv = *xh * g + b;
            }
        }
    }
    (
        y,
        BatchNormCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}

pub fn batchnorm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    let eps = T::from_f64_lossy(BN_EPS);
    let mut y = x.clone();
    for ch in 0..c {
        let scale = gamma[ch] / (running_var[ch] + eps).sqrt();
        let shift = beta[ch] - running_mean[ch] * scale;
        for i in 0..n {
            y.plane_mut(i, ch)
                .iter_mut()
                .for_each(|v| *v = *v * scale + shift);
        }
    }
    y
}

pub fn batchnorm_backward<T: Real>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    dy: &Tensor<T>,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Tensor<T> {
    let [n, c, _, _] = dy.shape();
    let count = T::from_usize(cache.count()).expect("count");
    let mut dx = Tensor::zeros(dy.shape());
    for ch in 0..c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            for (&d, &xh) in dy.plane(i, ch).iter().zip(cache.xhat.plane(i, ch)) {
                sum_dy += d;
                sum_dy_xhat += d * xh;
            }
        }
        dgamma[ch] += sum_dy_xhat;
        dbeta[ch] += sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / count;
        for i in 0..n {
            let xh = cache.xhat.plane(i, ch);
            let d = dy.plane(i, ch);
            for ((o, &dv), &xv) in dx.plane_mut(i, ch).iter_mut().zip(d).zip(xh) {
                *o = k * (count * dv - sum_dy - xv * sum_dy_xhat);
            }
        }
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Gradient through a ReLU whose *output* was `y`.
pub fn relu_backward_inplace<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    dy.data_mut().iter_mut().zip(y.data()).for_each(|(d, &v)| {
        if v <= T::zero() {
            *d = T::zero()
        }
    });
}

/// 2×2 max pooling; also returns the flat in-plane argmax of each window.
pub fn maxpool2<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = y.plane_mut(i, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (2 * oy) * w + 2 * ox;
                    for idx in [
                        (2 * oy) * w + 2 * ox + 1,
                        (2 * oy + 1) * w + 2 * ox,
                        (2 * oy + 1) * w + 2 * ox + 1,
                    ] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    dst[oy * ow + ox] = src[best];
                    argmax.push(best as u32);
                }
            }
        }
    }
    (y, argmax)
}

pub fn maxpool2_backward<T: Real>(
    dy: &Tensor<T>,
    argmax: &[u32],
    input_shape: [usize; 4],
) -> Tensor<T> {
    let [n, c, _, _] = input_shape;
    let mut dx = Tensor::zeros(input_shape);
    let op = dy.plane_len();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * op;
            let d = dy.plane(i, ch);
            let dst = dx.plane_mut(i, ch);
            for (j, &g) in d.iter().enumerate() {
                dst[argmax[base + j] as usize] += g;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = y.plane_mut(i, ch);
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let src = dy.plane(i, ch);
            let dst = dx.plane_mut(i, ch);
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dst[(yy / 2) * w + xx / 2] += src[yy * w2 + xx];
                }
            }
        }
    }
    dx
}

pub fn sigmoid_inplace<T: Real>(x: &mut Tensor<T>) {
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v = T::one() / (T::one() + (-*v).exp()));
}

/// Per-pixel softmax across channels.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = logits.shape();
    let p = logits.plane_len();
    let mut out = logits.clone();
    for i in 0..n {
        let item = out.item_mut(i);
        for px in 0..p {
            let max = (0..c)
                .map(|ch| item[ch * p + px])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (item[ch * p + px] - max).exp();
                item[ch * p + px] = e;
                sum += e;
            }
            for ch in 0..c {
                item[ch * p + px] /= sum;
            }
        }
    }
    out
}

/// Gradient w.r.t. logits given probabilities `probs` and `dprobs`.
pub fn softmax_channels_backward<T: Real>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let [n, c, _, _] = probs.shape();
    let p = probs.plane_len();
    let mut out = Tensor::zeros(probs.shape());
    for i in 0..n {
        let pr = probs.item(i);
        let dp = dprobs.item(i);
        let o = out.item_mut(i);
        for px in 0..p {
            let dot: T = (0..c).map(|ch| pr[ch * p + px] * dp[ch * p + px]).sum();
            for ch in 0..c {
                o[ch * p + px] = pr[ch * p + px] * (dp[ch * p + px] - dot);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(
            shape,
            (0..shape.iter().product())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
    }

    fn naive_conv(
        x: &Tensor<f64>,
        weight: &[f64],
        bias: &[f64],
        cout: usize,
        k: usize,
    ) -> Tensor<f64> {
        let [n, cin, h, w] = x.shape();
        let pad = (k / 2) as isize;
        let mut y = Tensor::zeros([n, cout, h, w]);
        for i in 0..n {
            for co in 0..cout {
                for yy in 0..h {
                    for xx in 0..w {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w
                                    {
                                        acc += weight[((co * cin + ci) * k + ky) * k + kx]
                                            * x.plane(i, ci)[sy as usize * w + sx as usize];
                                    }
                                }
                            }
                        }
                        y.plane_mut(i, co)[yy * w + xx] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 3] {
            let x = random_tensor([2, 3, 5, 4], &mut rng);
            let w: Vec<f64> = (0..4 * 3 * k * k)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv2d(&x, &w, Some(&b), 4, k);
            let slow = naive_conv(&x, &w, &b, 4, k);
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    /// <dy, conv(x)> is bilinear, so its gradients are exactly the adjoints.
    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (cout, k) = (2, 3);
        let x = random_tensor([2, 3, 4, 5], &mut rng);
        let w: Vec<f64> = (0..cout * 3 * k * k)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let dy = random_tensor([2, cout, 4, 5], &mut rng);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        let dx = conv2d_backward(&x, &w, cout, k, &dy, &mut dw, Some(&mut db), true).unwrap();
        let objective = |x: &Tensor<f64>, w: &[f64], b: &[f64]| -> f64 {
            conv2d(x, w, Some(b), cout, k)
                .data()
                .iter()
                .zip(dy.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let zero_b = vec![0.0; cout];
        let h = 1e-6;
        for idx in [0, 7, 17, 30] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&xp, &w, &zero_b) - objective(&xm, &w, &zero_b)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-7);
        }
        for idx in [0, 5, 20, 53] {
            let mut wp = w.clone();
            wp[idx] += h;
            let mut wm = w.clone();
            wm[idx] -= h;
            let fd = (objective(&x, &wp, &zero_b) - objective(&x, &wm, &zero_b)) / (2.0 * h);
            assert!((fd - dw[idx]).abs() < 1e-7);
        }
        let expected_db: Vec<f64> = (0..cout)
            .map(|co| (0..2).map(|i| dy.plane(i, co).iter().sum::<f64>()).sum())
            .collect();
        for (a, e) in db.iter().zip(expected_db) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor([3, 2, 2, 3], &mut rng);
        let gamma = vec![1.3, 0.7];
        let beta = vec![0.1, -0.2];
        let r = random_tensor([3, 2, 2, 3], &mut rng);
        let objective = |x: &Tensor<f64>, g: &[f64]| -> f64 {
            let (y, _) = batchnorm_train(x, g, &beta);
            y.data().iter().zip(r.data()).map(|(a, b)| a * b * a).sum()
        };
        let (y, cache) = batchnorm_train(&x, &gamma, &beta);
        let mut dy = y.clone();
        dy.data_mut()
            .iter_mut()
            .zip(r.data())
            .for_each(|(d, &rv)| *d = 2.0 * *d * rv);
        let mut dg = vec![0.0; 2];
        let mut db = vec![0.0; 2];
        let dx = batchnorm_backward(&cache, &gamma, &dy, &mut dg, &mut db);
        let h = 1e-6;
        for idx in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&xp, &gamma) - objective(&xm, &gamma)) / (2.0 * h);
            assert!(
                (fd - dx.data()[idx]).abs() < 1e-6,
                "{fd} vs {}",
                dx.data()[idx]
            );
        }
        let mut gp = gamma.clone();
        gp[1] += h;
        let mut gm = gamma.clone();
        gm[1] -= h;
        let fd = (objective(&x, &gp) - objective(&x, &gm)) / (2.0 * h);
        assert!((fd - dg[1]).abs() < 1e-6);
    }

    #[test]
    fn pooling_and_upsampling_route_gradients() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]);
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.data(), &[5.0, 9.0]);
        let dx = maxpool2_backward(
            &Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]),
            &arg,
            x.shape(),
        );
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);

        let up = upsample2(&y);
        assert_eq!(up.shape(), [1, 1, 2, 4]);
        assert_eq!(up.data(), &[5.0, 5.0, 9.0, 9.0, 5.0, 5.0, 9.0, 9.0]);
        let back = upsample2_backward(&Tensor::full([1, 1, 2, 4], 1.0));
        assert_eq!(back.data(), &[4.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = random_tensor([2, 3, 2, 2], &mut rng);
        let p = softmax_channels(&logits);
        for i in 0..2 {
            for px in 0..4 {
                let s: f64 = (0..3).map(|c| p.plane(i, c)[px]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
