//! Spatial attention fusion of the two modality streams.
//!
//! `concat(f_a, f_b) → 1×1 conv → ReLU → 1×1 conv → sigmoid` yields a single
//! weight map `w`; the gated blend `g = w⊙f_a + (1−w)⊙f_b` is concatenated with
//! both streams, so the block emits `3C` channels.

use crate::tensor::{Real, Tensor};

use super::layers::{
    conv2d, conv2d_backward, relu_backward_inplace, relu_inplace, sigmoid_inplace,
};

/// Borrowed weights of one attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'a, T> {
    /// `(hidden, 2C, 1, 1)`
    pub reduce_w: &'a [T],
    pub reduce_b: &'a [T],
    /// `(1, hidden, 1, 1)`
    pub gate_w: &'a [T],
    pub gate_b: &'a [T],
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<T> {
    /// `(n, 1, h, w)`, values in `[0, 1]`.
    pub weight_map: Tensor<T>,
    /// `(n, 3C, h, w)`: `f_a`, `f_b`, then the gated blend.
    pub fused: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    cat: Tensor<T>,
    hidden: Tensor<T>,
    weight_map: Tensor<T>,
    f_a: Tensor<T>,
    f_b: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGrads<T> {
    pub d_f_a: Tensor<T>,
    pub d_f_b: Tensor<T>,
    pub reduce_w: Vec<T>,
    pub reduce_b: Vec<T>,
    pub gate_w: Vec<T>,
    pub gate_b: Vec<T>,
}

pub fn spatial_attention<T: Real>(
    weights: &AttentionWeights<'_, T>,
    f_a: &Tensor<T>,
    f_b: &Tensor<T>,
) -> (AttentionOutput<T>, AttentionCache<T>) {
    assert_eq!(
        f_a.shape(),
        f_b.shape(),
        "attention inputs must share a shape"
    );
    let cat = Tensor::concat_channels(&[f_a, f_b]);
    let mut hidden = conv2d(
        &cat,
        weights.reduce_w,
        Some(weights.reduce_b),
        weights.hidden,
        1,
    );
    relu_inplace(&mut hidden);
    let mut weight_map = conv2d(&hidden, weights.gate_w, Some(weights.gate_b), 1, 1);
    sigmoid_inplace(&mut weight_map);

    let mut gated = Tensor::zeros(f_a.shape());
    for i in 0..f_a.n() {
        let wm = weight_map.plane(i, 0);
        for c in 0..f_a.c() {
            let (pa, pb) = (f_a.plane(i, c), f_b.plane(i, c));
            for (((g, &w), &a), &b) in gated.plane_mut(i, c).iter_mut().zip(wm).zip(pa).zip(pb) {
                *g = w * a + (T::one() - w) * b;
            }
        }
    }
    let fused = Tensor::concat_channels(&[f_a, f_b, &gated]);
    let cache = AttentionCache {
        cat,
        hidden,
        weight_map: weight_map.clone(),
        f_a: f_a.clone(),
        f_b: f_b.clone(),
    };
    (AttentionOutput { weight_map, fused }, cache)
}

pub fn spatial_attention_backward<T: Real>(
    weights: &AttentionWeights<'_, T>,
    cache: &AttentionCache<T>,
    d_fused: &Tensor<T>,
) -> AttentionGrads<T> {
    let c = cache.f_a.c();
    let mut parts = d_fused.split_channels(&[c, c, c]).into_iter();
    let (mut d_f_a, mut d_f_b, d_gated) = (
        parts.next().unwrap(),
        parts.next().unwrap(),
        parts.next().unwrap(),
    );

    let mut d_logit = Tensor::zeros(cache.weight_map.shape());
    for i in 0..d_gated.n() {
        let wm = cache.weight_map.plane(i, 0).to_vec();
        let mut dw = vec![T::zero(); wm.len()];
        for ch in 0..c {
            let dg = d_gated.plane(i, ch);
            let (pa, pb) = (cache.f_a.plane(i, ch), cache.f_b.plane(i, ch));
            for p in 0..wm.len() {
                dw[p] += dg[p] * (pa[p] - pb[p]);
            }
            for ((da, &g), &w) in d_f_a.plane_mut(i, ch).iter_mut().zip(dg).zip(&wm) {
                *da += w * g;
            }
            for ((db, &g), &w) in d_f_b.plane_mut(i, ch).iter_mut().zip(dg).zip(&wm) {
                *db += (T::one() - w) * g;
            }
        }
        for ((dl, &d), &w) in d_logit.plane_mut(i, 0).iter_mut().zip(&dw).zip(&wm) {
            *dl = d * w * (T::one() - w);
        }
    }

    let mut gate_w = vec![T::zero(); weights.gate_w.len()];
    let mut gate_b = vec![T::zero(); 1];
    let mut d_hidden = conv2d_backward(
        &cache.hidden,
        weights.gate_w,
        1,
        1,
        &d_logit,
        &mut gate_w,
        Some(&mut gate_b),
        true,
    )
    .expect("input gradient requested");
    relu_backward_inplace(&cache.hidden, &mut d_hidden);
    let mut reduce_w = vec![T::zero(); weights.reduce_w.len()];
    let mut reduce_b = vec![T::zero(); weights.hidden];
    let d_cat = conv2d_backward(
        &cache.cat,
        weights.reduce_w,
        weights.hidden,
        1,
        &d_hidden,
        &mut reduce_w,
        Some(&mut reduce_b),
        true,
    )
    .expect("input gradient requested");
    let mut cat_parts = d_cat.split_channels(&[c, c]).into_iter();
    d_f_a.add_assign(&cat_parts.next().unwrap());
    d_f_b.add_assign(&cat_parts.next().unwrap());
    AttentionGrads {
        d_f_a,
        d_f_b,
        reduce_w,
        reduce_b,
        gate_w,
        gate_b,
    }
}
