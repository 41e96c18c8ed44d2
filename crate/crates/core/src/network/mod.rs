//! Dual-stream encoder / skip-connected decoder shared by student and teacher.
//!
//! Each modality has its own encoder. At every scale the two streams meet in a
//! fusion block (spatial attention, or plain concatenation for the ablation);
//! the fused maps feed the decoder's skip connections and, at the deepest
//! scale, the decoder input. Student and teacher run exactly this code and
//! differ only in the [`ModelState`] they pass in.

pub mod attention;
pub mod layers;
pub mod state;

use ndarray::{Array2, Array3};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub use attention::{
    spatial_attention, spatial_attention_backward, AttentionCache, AttentionGrads, AttentionOutput,
    AttentionWeights,
};
pub use state::{Gradients, ModelState, ParamEntry, ParamKind};

use layers::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, conv2d, conv2d_backward, maxpool2,
    maxpool2_backward, relu_backward_inplace, relu_inplace, softmax_channels,
    softmax_channels_backward, upsample2, upsample2_backward, BatchNormCache,
};

/// Momentum of the normalization running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    SpatialAttention,
    /// Channel concatenation of the two streams, no gating.
    Concat,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::SpatialAttention => "attention",
            FusionMode::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attention" => Some(FusionMode::SpatialAttention),
            "concat" => Some(FusionMode::Concat),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    pub in_channels_per_modality: usize,
    /// Channels at the first scale; doubled at each down-sampling.
    pub base_width: usize,
    /// Number of down-samplings.
    pub depth: usize,
    pub n_classes: usize,
    pub fusion: FusionMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels_per_modality: 1,
            base_width: 8,
            depth: 3,
            n_classes: 2,
            fusion: FusionMode::SpatialAttention,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config("network.depth", "must be at least 2"));
        }
        if self.base_width < 4 {
            return Err(Error::config("network.base_width", "must be at least 4"));
        }
        if self.n_classes < 2 {
            return Err(Error::config("network.n_classes", "must be at least 2"));
        }
        if self.in_channels_per_modality != 1 {
            return Err(Error::config(
                "network.in_channels",
                "only single-channel modalities are supported",
            ));
        }
        Ok(())
    }

    pub fn check_input_shape(&self, height: usize, width: usize) -> Result<()> {
        let factor = 1usize << self.depth;
        if height == 0 || width == 0 || !height.is_multiple_of(factor) || !width.is_multiple_of(factor) {
            return Err(Error::ShapeMismatch(format!(
                "input {height}x{width} is not divisible by 2^depth = {factor}"
            )));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Channels emitted by the fusion block at `level`.
    pub fn fused_channels(&self, level: usize) -> usize {
        match self.fusion {
            FusionMode::SpatialAttention => 3 * self.channels(level),
            FusionMode::Concat => 2 * self.channels(level),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Zero-mean normal with variance `gain / fan_in`.
    Normal {
        fan_in: usize,
        gain: f64,
    },
    Const(f64),
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv_bn_relu(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvBnRelu {
        ConvBnRelu {
            weight: self.add(
                format!("{prefix}.conv.weight"),
                vec![cout, cin, 3, 3],
                Init::Normal {
                    fan_in: cin * 9,
                    gain: 2.0,
                },
            ),
            gamma: self.add(format!("{prefix}.bn.weight"), vec![cout], Init::Const(1.0)),
            beta: self.add(format!("{prefix}.bn.bias"), vec![cout], Init::Const(0.0)),
            running_mean: self.add(
                format!("{prefix}.bn.running_mean"),
                vec![cout],
                Init::Const(0.0),
            ),
            running_var: self.add(
                format!("{prefix}.bn.running_var"),
                vec![cout],
                Init::Const(1.0),
            ),
            cout,
        }
    }

    fn double_conv(&mut self, prefix: &str, cin: usize, cout: usize) -> DoubleConv {
        DoubleConv {
            first: self.conv_bn_relu(&format!("{prefix}.0"), cin, cout),
            second: self.conv_bn_relu(&format!("{prefix}.1"), cout, cout),
        }
    }

    fn conv1x1(&mut self, prefix: &str, cin: usize, cout: usize, gain: f64) -> Conv1x1 {
        Conv1x1 {
            weight: self.add(
                format!("{prefix}.weight"),
                vec![cout, cin, 1, 1],
                Init::Normal { fan_in: cin, gain },
            ),
            bias: self.add(format!("{prefix}.bias"), vec![cout], Init::Const(0.0)),
            cout,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    weight: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    cout: usize,
}

#[derive(Clone, Debug)]
struct CbrCache<T> {
    input: Tensor<T>,
    bn: BatchNormCache<T>,
    out: Tensor<T>,
}

impl ConvBnRelu {
    fn forward<T: Real>(
        &self,
        st: &ModelState<T>,
        x: Tensor<T>,
        record: bool,
    ) -> (Tensor<T>, Option<CbrCache<T>>) {
        let z = conv2d(&x, st.data(self.weight), None, self.cout, 3);
        if record {
            let (mut y, bn) = batchnorm_train(&z, st.data(self.gamma), st.data(self.beta));
            relu_inplace(&mut y);
            (
                y.clone(),
                Some(CbrCache {
                    input: x,
                    bn,
                    out: y,
                }),
            )
        } else {
            let mut y = batchnorm_eval(
                &z,
                st.data(self.gamma),
                st.data(self.beta),
                st.data(self.running_mean),
                st.data(self.running_var),
            );
            relu_inplace(&mut y);
            (y, None)
        }
    }

    fn backward<T: Real>(
        &self,
        st: &ModelState<T>,
        cache: &CbrCache<T>,
        mut dy: Tensor<T>,
        grads: &mut Gradients<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        relu_backward_inplace(&cache.out, &mut dy);
        let mut dgamma = vec![T::zero(); self.cout];
        let mut dbeta = vec![T::zero(); self.cout];
        let dz = batchnorm_backward(&cache.bn, st.data(self.gamma), &dy, &mut dgamma, &mut dbeta);
        grads.add(self.gamma, &dgamma);
        grads.add(self.beta, &dbeta);
        conv2d_backward(
            &cache.input,
            st.data(self.weight),
            self.cout,
            3,
            &dz,
            grads.get_mut(self.weight),
            None,
            need_dx,
        )
    }

    fn update_running<T: Real>(&self, st: &mut ModelState<T>, cache: &CbrCache<T>, momentum: T) {
        let count = cache.bn.count();
        let correction = if count > 1 {
            T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        let keep = T::one() - momentum;
        for (r, &m) in st
            .data_mut(self.running_mean)
            .iter_mut()
            .zip(&cache.bn.mean)
        {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in st.data_mut(self.running_var).iter_mut().zip(&cache.bn.var) {
            *r = keep * *r + momentum * v * correction;
        }
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    first: ConvBnRelu,
    second: ConvBnRelu,
}

#[derive(Clone, Debug)]
struct DoubleConvCache<T> {
    first: CbrCache<T>,
    second: CbrCache<T>,
}

impl DoubleConv {
    fn forward<T: Real>(
        &self,
        st: &ModelState<T>,
        x: Tensor<T>,
        record: bool,
    ) -> (Tensor<T>, Option<DoubleConvCache<T>>) {
        let (h, c1) = self.first.forward(st, x, record);
        let (y, c2) = self.second.forward(st, h, record);
        let cache = c1
            .zip(c2)
            .map(|(first, second)| DoubleConvCache { first, second });
        (y, cache)
    }

    fn backward<T: Real>(
        &self,
        st: &ModelState<T>,
        cache: &DoubleConvCache<T>,
        dy: Tensor<T>,
        grads: &mut Gradients<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let dh = self
            .second
            .backward(st, &cache.second, dy, grads, true)
            .expect("inner gradient");
        self.first.backward(st, &cache.first, dh, grads, need_dx)
    }

    fn update_running<T: Real>(
        &self,
        st: &mut ModelState<T>,
        cache: &DoubleConvCache<T>,
        momentum: T,
    ) {
        self.first.update_running(st, &cache.first, momentum);
        self.second.update_running(st, &cache.second, momentum);
    }
}

#[derive(Clone, Debug)]
struct Conv1x1 {
    weight: usize,
    bias: usize,
    cout: usize,
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    reduce: Conv1x1,
    gate: Conv1x1,
}

impl AttentionBlock {
    fn weights<'a, T: Real>(&self, st: &'a ModelState<T>) -> AttentionWeights<'a, T> {
        AttentionWeights {
            reduce_w: st.data(self.reduce.weight),
            reduce_b: st.data(self.reduce.bias),
            gate_w: st.data(self.gate.weight),
            gate_b: st.data(self.gate.bias),
            hidden: self.reduce.cout,
        }
    }
}

#[derive(Clone, Debug)]
enum Fusion {
    Attention(AttentionBlock),
    Concat,
}

#[derive(Clone, Debug)]
enum FusionCache<T> {
    Attention(AttentionCache<T>),
    Concat { channels: usize },
}

/// Which fusion code path produced a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionPath {
    Attention,
    Concat,
}

/// Everything the backward pass needs from a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    enc_a: Vec<DoubleConvCache<T>>,
    enc_b: Vec<DoubleConvCache<T>>,
    pool_a: Vec<(Vec<u32>, [usize; 4])>,
    pool_b: Vec<(Vec<u32>, [usize; 4])>,
    fusion: Vec<FusionCache<T>>,
    /// Decoder caches indexed by level (`0..depth`).
    up: Vec<Option<CbrCache<T>>>,
    dec: Vec<Option<DoubleConvCache<T>>>,
    head_input: Tensor<T>,
    probs: Tensor<T>,
    /// Fusion channel counts per level, as seen during the forward pass.
    pub fused_channels: Vec<usize>,
    /// Attention weight maps per level (empty for plain concatenation).
    pub weight_maps: Vec<Tensor<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn fusion_path(&self) -> FusionPath {
        match self.fusion.first() {
            Some(FusionCache::Attention(_)) => FusionPath::Attention,
            _ => FusionPath::Concat,
        }
    }
}

/// Architecture description: layer wiring plus the parameter layout it expects.
#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    specs: Vec<ParamSpec>,
    enc_a: Vec<DoubleConv>,
    enc_b: Vec<DoubleConv>,
    fusion: Vec<Fusion>,
    up: Vec<ConvBnRelu>,
    dec: Vec<DoubleConv>,
    head: Conv1x1,
}

impl Network {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut reg = Registry::default();
        let mut enc_a = Vec::new();
        let mut enc_b = Vec::new();
        let mut fusion = Vec::new();
        for level in 0..=config.depth {
            let cin = if level == 0 {
                config.in_channels_per_modality
            } else {
                config.channels(level - 1)
            };
            let c = config.channels(level);
            enc_a.push(reg.double_conv(&format!("enc_a.{level}"), cin, c));
            enc_b.push(reg.double_conv(&format!("enc_b.{level}"), cin, c));
            fusion.push(match config.fusion {
                FusionMode::SpatialAttention => Fusion::Attention(AttentionBlock {
                    reduce: reg.conv1x1(&format!("fuse.{level}.reduce"), 2 * c, c, 2.0),
                    gate: reg.conv1x1(&format!("fuse.{level}.gate"), c, 1, 1.0),
                }),
                FusionMode::Concat => Fusion::Concat,
            });
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for level in 0..config.depth {
            let cin = if level + 1 == config.depth {
                config.fused_channels(config.depth)
            } else {
                config.channels(level + 1)
            };
            let c = config.channels(level);
            up.push(reg.conv_bn_relu(&format!("up.{level}"), cin, c));
            dec.push(reg.double_conv(&format!("dec.{level}"), c + config.fused_channels(level), c));
        }
        let head = reg.conv1x1("head", config.channels(0), config.n_classes, 1.0);
        Ok(Self {
            config: config.clone(),
            specs: reg.specs,
            enc_a,
            enc_b,
            fusion,
            up,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Fresh parameters; a pure function of `(config, seed)`.
    pub fn init_state<T: Real>(&self, seed: u64) -> ModelState<T> {
        let entries = self
            .specs
            .iter()
            .map(|spec| {
                let len = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Const(v) => vec![T::from_f64_lossy(v); len],
                    Init::Normal { fan_in, gain } => {
                        let normal =
                            Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                        let mut rng =
                            rng::stream(seed, &["init".into(), spec.name.as_str().into()]);
                        (0..len)
                            .map(|_| T::from_f64_lossy(normal.sample(&mut rng)))
                            .collect()
                    }
                };
                ParamEntry {
                    name: spec.name.clone(),
                    shape: spec.shape.clone(),
                    data,
                }
            })
            .collect();
        ModelState::new(entries).expect("registry produces unique names")
    }

    /// Fails unless `state` has exactly this network's parameter layout.
    pub fn check_state<T: Real>(&self, state: &ModelState<T>) -> Result<()> {
        if state.len() != self.specs.len() {
            return Err(Error::StateMismatch(format!(
                "network expects {} parameters, state has {}",
                self.specs.len(),
                state.len()
            )));
        }
        for (spec, entry) in self.specs.iter().zip(state.entries()) {
            if spec.name != entry.name || spec.shape != entry.shape {
                return Err(Error::StateMismatch(format!(
                    "expected `{}` {:?}, found `{}` {:?}",
                    spec.name, spec.shape, entry.name, entry.shape
                )));
            }
        }
        Ok(())
    }

    fn check_inputs<T: Real>(&self, x_a: &Tensor<T>, x_b: &Tensor<T>) -> Result<()> {
        if x_a.shape() != x_b.shape() {
            return Err(Error::ShapeMismatch(format!(
                "modality a {:?} vs modality b {:?}",
                x_a.shape(),
                x_b.shape()
            )));
        }
        if x_a.c() != self.config.in_channels_per_modality {
            return Err(Error::ShapeMismatch(format!(
                "expected {} input channels, got {}",
                self.config.in_channels_per_modality,
                x_a.c()
            )));
        }
        self.config.check_input_shape(x_a.h(), x_a.w())
    }

    /// Evaluation-mode pass using the stored running statistics.
    pub fn predict<T: Real>(
        &self,
        state: &ModelState<T>,
        x_a: &Tensor<T>,
        x_b: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_inputs(x_a, x_b)?;
        let (probs, _) = self.run(state, x_a.clone(), x_b.clone(), false);
        if !probs.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(probs)
    }

    /// Training-mode pass (batch statistics) that records what backward needs.
    pub fn forward_train<T: Real>(
        &self,
        state: &ModelState<T>,
        x_a: &Tensor<T>,
        x_b: &Tensor<T>,
    ) -> Result<ForwardCache<T>> {
        self.check_inputs(x_a, x_b)?;
        let (_, cache) = self.run(state, x_a.clone(), x_b.clone(), true);
        let cache = cache.expect("recorded");
        if !cache.probs.is_finite() {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(cache)
    }

    fn run<T: Real>(
        &self,
        st: &ModelState<T>,
        x_a: Tensor<T>,
        x_b: Tensor<T>,
        record: bool,
    ) -> (Tensor<T>, Option<ForwardCache<T>>) {
        let depth = self.config.depth;
        let mut enc_a = Vec::new();
        let mut enc_b = Vec::new();
        let mut pool_a = Vec::new();
        let mut pool_b = Vec::new();
        let mut fusion_caches = Vec::new();
        let mut weight_maps = Vec::new();
        let mut fused_levels = Vec::with_capacity(depth + 1);

        let (mut a, mut b) = (x_a, x_b);
        for level in 0..=depth {
            if level > 0 {
                let (pa, ia) = maxpool2(&a);
                let (pb, ib) = maxpool2(&b);
                if record {
                    pool_a.push((ia, a.shape()));
                    pool_b.push((ib, b.shape()));
                }
                a = pa;
                b = pb;
            }
            let (fa, ca) = self.enc_a[level].forward(st, a, record);
            let (fb, cb) = self.enc_b[level].forward(st, b, record);
            enc_a.extend(ca);
            enc_b.extend(cb);
            let fused = match &self.fusion[level] {
                Fusion::Attention(block) => {
                    let (out, cache) = spatial_attention(&block.weights(st), &fa, &fb);
                    if record {
                        fusion_caches.push(FusionCache::Attention(cache));
                        weight_maps.push(out.weight_map);
                    }
                    out.fused
                }
                Fusion::Concat => {
                    if record {
                        fusion_caches.push(FusionCache::Concat { channels: fa.c() });
                    }
                    Tensor::concat_channels(&[&fa, &fb])
                }
            };
            fused_levels.push(fused);
            a = fa;
            b = fb;
        }
        let fused_channels: Vec<usize> = fused_levels.iter().map(|t| t.c()).collect();

        let mut up_caches: Vec<Option<CbrCache<T>>> = vec![None; depth];
        let mut dec_caches: Vec<Option<DoubleConvCache<T>>> = vec![None; depth];
        let mut x = fused_levels.pop().expect("deepest level");
        for level in (0..depth).rev() {
            let (u, cu) = self.up[level].forward(st, upsample2(&x), record);
            let skip = fused_levels.pop().expect("skip level");
            let (y, cd) =
                self.dec[level].forward(st, Tensor::concat_channels(&[&u, &skip]), record);
            up_caches[level] = cu;
            dec_caches[level] = cd;
            x = y;
        }
        let logits = conv2d(
            &x,
            st.data(self.head.weight),
            Some(st.data(self.head.bias)),
            self.head.cout,
            1,
        );
        let probs = softmax_channels(&logits);
        if !record {
            return (probs, None);
        }
        let cache = ForwardCache {
            enc_a,
            enc_b,
            pool_a,
            pool_b,
            fusion: fusion_caches,
            up: up_caches,
            dec: dec_caches,
            head_input: x,
            probs: probs.clone(),
            fused_channels,
            weight_maps,
        };
        (probs, Some(cache))
    }

    /// Parameter gradients of a scalar loss given `d loss / d probs`.
    pub fn backward<T: Real>(
        &self,
        state: &ModelState<T>,
        cache: &ForwardCache<T>,
        d_probs: &Tensor<T>,
    ) -> Gradients<T> {
        let depth = self.config.depth;
        let mut grads = Gradients::zeros_like(state);
        let d_logits = softmax_channels_backward(&cache.probs, d_probs);
        let mut dw = vec![T::zero(); state.data(self.head.weight).len()];
        let mut db = vec![T::zero(); self.head.cout];
        let mut dx = conv2d_backward(
            &cache.head_input,
            state.data(self.head.weight),
            self.head.cout,
            1,
            &d_logits,
            &mut dw,
            Some(&mut db),
            true,
        )
        .expect("input gradient");
        grads.add(self.head.weight, &dw);
        grads.add(self.head.bias, &db);

        let mut d_fused: Vec<Option<Tensor<T>>> = vec![None; depth + 1];
        for level in 0..depth {
            let dec_cache = cache.dec[level].as_ref().expect("decoder cache");
            let d_cat = self.dec[level]
                .backward(state, dec_cache, dx, &mut grads, true)
                .expect("input gradient");
            let c = self.config.channels(level);
            let mut parts = d_cat
                .split_channels(&[c, cache.fused_channels[level]])
                .into_iter();
            let d_up = parts.next().unwrap();
            accumulate(&mut d_fused[level], parts.next().unwrap());
            let up_cache = cache.up[level].as_ref().expect("up cache");
            let d_upsampled = self.up[level]
                .backward(state, up_cache, d_up, &mut grads, true)
                .expect("input gradient");
            dx = upsample2_backward(&d_upsampled);
        }
        accumulate(&mut d_fused[depth], dx);

        let mut carry_a: Option<Tensor<T>> = None;
        let mut carry_b: Option<Tensor<T>> = None;
        for level in (0..=depth).rev() {
            let d = d_fused[level].take().expect("fused gradient");
            let (mut d_fa, mut d_fb) = match (&self.fusion[level], &cache.fusion[level]) {
                (Fusion::Attention(block), FusionCache::Attention(ac)) => {
                    let g = spatial_attention_backward(&block.weights(state), ac, &d);
                    grads.add(block.reduce.weight, &g.reduce_w);
                    grads.add(block.reduce.bias, &g.reduce_b);
                    grads.add(block.gate.weight, &g.gate_w);
                    grads.add(block.gate.bias, &g.gate_b);
                    (g.d_f_a, g.d_f_b)
                }
                (Fusion::Concat, FusionCache::Concat { channels }) => {
                    let mut parts = d.split_channels(&[*channels, *channels]).into_iter();
                    (parts.next().unwrap(), parts.next().unwrap())
                }
                _ => unreachable!("cache recorded by this network"),
            };
            if let Some(c) = carry_a.take() {
                d_fa.add_assign(&c);
            }
            if let Some(c) = carry_b.take() {
                d_fb.add_assign(&c);
            }
            let need_dx = level > 0;
            let da =
                self.enc_a[level].backward(state, &cache.enc_a[level], d_fa, &mut grads, need_dx);
            let db =
                self.enc_b[level].backward(state, &cache.enc_b[level], d_fb, &mut grads, need_dx);
            if level > 0 {
                let (ia, sa) = &cache.pool_a[level - 1];
                let (ib, sb) = &cache.pool_b[level - 1];
                carry_a = Some(maxpool2_backward(&da.expect("input gradient"), ia, *sa));
                carry_b = Some(maxpool2_backward(&db.expect("input gradient"), ib, *sb));
            }
        }
        grads
    }

    /// Folds the batch statistics of a training pass into the running averages.
    pub fn update_running_stats<T: Real>(
        &self,
        state: &mut ModelState<T>,
        cache: &ForwardCache<T>,
        momentum: f64,
    ) {
        let m = T::from_f64_lossy(momentum);
        for (block, c) in self.enc_a.iter().zip(&cache.enc_a) {
            block.update_running(state, c, m);
        }
        for (block, c) in self.enc_b.iter().zip(&cache.enc_b) {
            block.update_running(state, c, m);
        }
        for (block, c) in self.up.iter().zip(&cache.up) {
            block.update_running(state, c.as_ref().expect("up cache"), m);
        }
        for (block, c) in self.dec.iter().zip(&cache.dec) {
            block.update_running(state, c.as_ref().expect("decoder cache"), m);
        }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, value: Tensor<T>) {
    match slot {
        Some(existing) => existing.add_assign(&value),
        None => *slot = Some(value),
    }
}

/// Fresh parameters for `config`; a pure function of `(config, seed)`.
pub fn init_state(config: &NetworkConfig, seed: u64) -> Result<ModelState<f32>> {
    Ok(Network::new(config)?.init_state(seed))
}

/// Per-pixel class probabilities of one image, shape `(n_classes, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap(pub Array3<f32>);

impl ProbabilityMap {
    pub fn from_tensor_item<T: Real>(t: &Tensor<T>, index: usize) -> Self {
        let [_, c, h, w] = t.shape();
        let values: Vec<f32> = t.item(index).iter().map(|v| v.as_f64() as f32).collect();
        ProbabilityMap(Array3::from_shape_vec((c, h, w), values).expect("tensor item shape"))
    }

    pub fn n_classes(&self) -> usize {
        self.0.dim().0
    }

    pub fn spatial_shape(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dim();
        (h, w)
    }

    /// Every pixel's class vector is nonnegative and sums to one within `tol`.
    pub fn is_normalized(&self, tol: f64) -> bool {
        let (k, h, w) = self.0.dim();
        (0..h).all(|r| {
            (0..w).all(|c| {
                let col: Vec<f64> = (0..k).map(|j| f64::from(self.0[(j, r, c)])).collect();
                col.iter().all(|&v| v >= 0.0) && (col.iter().sum::<f64>() - 1.0).abs() <= tol
            })
        })
    }
}

/// Stacks single images into a `(n, 1, h, w)` tensor.
pub fn images_to_tensor<T: Real>(images: &[&Array2<f32>]) -> Tensor<T> {
    let (h, w) = images.first().map_or((0, 0), |i| i.dim());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        assert_eq!(img.dim(), (h, w), "images in a batch must share a shape");
        data.extend(img.iter().map(|&v| T::from_f64_lossy(f64::from(v))));
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}

/// Evaluation-mode forward pass on a single image pair.
pub fn forward(
    state: &ModelState<f32>,
    config: &NetworkConfig,
    x_a: &Array2<f32>,
    x_b: &Array2<f32>,
) -> Result<ProbabilityMap> {
    if x_a.dim() != x_b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "modality a {:?} vs modality b {:?}",
            x_a.dim(),
            x_b.dim()
        )));
    }
    let net = Network::new(config)?;
    net.check_state(state)?;
    let probs = net.predict(state, &images_to_tensor(&[x_a]), &images_to_tensor(&[x_b]))?;
    Ok(ProbabilityMap::from_tensor_item(&probs, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            base_width: 4,
            depth: 2,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn output_is_normalized_and_shaped() {
        let config = NetworkConfig::default();
        let state = init_state(&config, 1).unwrap();
        let x_a = Array2::from_shape_fn((64, 64), |(r, c)| ((r * 7 + c * 3) % 11) as f32 / 11.0);
        let x_b = Array2::from_shape_fn((64, 64), |(r, c)| ((r + c) % 5) as f32 / 5.0);
        let p = forward(&state, &config, &x_a, &x_b).unwrap();
        assert_eq!(p.0.dim(), (2, 64, 64));
        assert!(p.is_normalized(1e-5));
        let again = forward(&state, &config, &x_a, &x_b).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn zeros_input_is_finite() {
        let config = small();
        let state = init_state(&config, 3).unwrap();
        let z = Array2::zeros((16, 16));
        let p = forward(&state, &config, &z, &z).unwrap();
        assert!(p.0.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_shapes() {
        let config = small();
        let state = init_state(&config, 3).unwrap();
        let a = Array2::zeros((16, 16));
        let b = Array2::zeros((16, 12));
        assert!(matches!(
            forward(&state, &config, &a, &b),
            Err(Error::ShapeMismatch(_))
        ));
        let odd = Array2::zeros((18, 18));
        assert!(matches!(
            forward(&state, &config, &odd, &odd),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = small();
        assert_eq!(
            init_state(&config, 5).unwrap(),
            init_state(&config, 5).unwrap()
        );
        let a = init_state(&config, 5).unwrap();
        let b = init_state(&config, 6).unwrap();
        assert!(a
            .entries()
            .iter()
            .zip(b.entries())
            .any(|(x, y)| x.data != y.data));
        assert!(a.all_finite());
    }

    #[test]
    fn fusion_concatenates_channels() {
        for fusion in [FusionMode::SpatialAttention, FusionMode::Concat] {
            let config = NetworkConfig { fusion, ..small() };
            let net = Network::new(&config).unwrap();
            let state = net.init_state::<f64>(0);
            let x = Tensor::full([2, 1, 8, 8], 0.3);
            let y = Tensor::from_vec(
                [2, 1, 8, 8],
                (0..128).map(|v| (v % 7) as f64 / 7.0).collect(),
            );
            let cache = net.forward_train(&state, &x, &y).unwrap();
            for level in 0..=config.depth {
                let per_stream = config.channels(level);
                let expected = match fusion {
                    FusionMode::SpatialAttention => per_stream * 3,
                    FusionMode::Concat => per_stream * 2,
                };
                assert_eq!(cache.fused_channels[level], expected);
            }
            let path = cache.fusion_path();
            assert_eq!(
                path == FusionPath::Attention,
                fusion == FusionMode::SpatialAttention
            );
            assert_eq!(cache.weight_maps.is_empty(), fusion == FusionMode::Concat);
        }
    }

    #[test]
    fn concat_variant_has_no_attention_parameters() {
        let net = Network::new(&NetworkConfig {
            fusion: FusionMode::Concat,
            ..small()
        })
        .unwrap();
        assert!(net
            .param_specs()
            .iter()
            .all(|s| !s.name.starts_with("fuse.")));
        let net = Network::new(&small()).unwrap();
        assert!(net
            .param_specs()
            .iter()
            .any(|s| s.name.starts_with("fuse.")));
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let config = small();
        let net = Network::new(&config).unwrap();
        let mut state = net.init_state::<f64>(0);
        let x = Tensor::full([1, 1, 8, 8], 0.5);
        let cache = net.forward_train(&state, &x, &x).unwrap();
        let before = state.clone();
        net.update_running_stats(&mut state, &cache, BN_MOMENTUM);
        let idx = state
            .entries()
            .iter()
            .position(|e| e.name == "enc_a.0.0.bn.running_mean")
            .unwrap();
        assert_ne!(state.entries()[idx].data, before.entries()[idx].data);
        // Trainable values are untouched.
        for (a, b) in state.entries().iter().zip(before.entries()) {
            if a.kind() == ParamKind::Trainable {
                assert_eq!(a.data, b.data);
            }
        }
    }
}
