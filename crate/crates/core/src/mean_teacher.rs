//! Self-ensembling training: a gradient-trained student, a teacher that is an
//! exponential moving average of the student, and a per-step objective that
//! combines the supervised loss with a selection-filtered consistency loss.

use crate::augment::{augment_copies, AugmentPolicy};
use crate::data::MultiModalSample;
use crate::error::{Error, Result};
use crate::losses::{
    consistency_loss_grad, lambda_schedule, supervised_batch, total_loss, LossWeights,
    SupervisedTerms,
};
use crate::network::{
    images_to_tensor, ForwardCache, Gradients, ModelState, Network, ParamKind, BN_MOMENTUM,
};
use crate::rng;
use crate::russ::{class_vector_of, q_schedule, select, ConsistencyRecord, SelectionMask};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct EmaConfig {
    pub decay: f64,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { decay: 0.99 }
    }
}

impl EmaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::config(
                "ema.decay",
                format!("must lie in [0, 1], got {}", self.decay),
            ));
        }
        Ok(())
    }
}

/// `teacher = decay * teacher + (1 - decay) * student`, elementwise over every
/// array including normalization statistics.
pub fn ema_update<T: Real>(
    teacher: &mut ModelState<T>,
    student: &ModelState<T>,
    decay: f64,
) -> Result<()> {
    teacher.check_same_structure(student)?;
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::config(
            "ema.decay",
            format!("must lie in [0, 1], got {decay}"),
        ));
    }
    if decay == 1.0 {
        return Ok(());
    }
    let keep = T::from_f64_lossy(decay);
    let take = T::from_f64_lossy(1.0 - decay);
    for (t, s) in teacher.entries_mut().iter_mut().zip(student.entries()) {
        if decay == 0.0 {
            t.data.copy_from_slice(&s.data);
        } else {
            t.data
                .iter_mut()
                .zip(&s.data)
                .for_each(|(tv, &sv)| *tv = keep * *tv + take * sv);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(
                "optim.learning_rate",
                "must be finite and > 0",
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "optim.weight_decay",
                "must be finite and >= 0",
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optim.beta", "betas must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("optim.eps", "must be > 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates, aligned with the student's entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(state: &ModelState<T>) -> Self {
        let zeros: Vec<Vec<T>> = state
            .entries()
            .iter()
            .map(|e| match e.kind() {
                ParamKind::Trainable => vec![T::zero(); e.data.len()],
                ParamKind::Buffer => Vec::new(),
            })
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn apply(&mut self, params: &mut ModelState<T>, grads: &Gradients<T>, config: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let (b1, b2) = (
            T::from_f64_lossy(config.beta1),
            T::from_f64_lossy(config.beta2),
        );
        let (one_b1, one_b2) = (
            T::from_f64_lossy(1.0 - config.beta1),
            T::from_f64_lossy(1.0 - config.beta2),
        );
        let wd = T::from_f64_lossy(config.weight_decay);
        let step_size = T::from_f64_lossy(config.learning_rate / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(config.eps);
        for (idx, entry) in params.entries_mut().iter_mut().enumerate() {
            if entry.kind() == ParamKind::Buffer {
                continue;
            }
            let g = grads.get(idx);
            let (m, v) = (&mut self.first[idx], &mut self.second[idx]);
            for (((p, &gv), mv), vv) in entry
                .data
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gv = gv + wd * *p;
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                *p -= step_size * *mv / ((*vv).sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

/// Everything that defines one optimization step besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub augment: AugmentPolicy,
    pub loss: LossWeights,
    pub ema: EmaConfig,
    pub optimizer: AdamConfig,
    pub total_epochs: usize,
    /// When false every unlabeled sample in the batch contributes to the
    /// consistency loss.
    pub use_russ: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            augment: AugmentPolicy::default(),
            loss: LossWeights::default(),
            ema: EmaConfig::default(),
            optimizer: AdamConfig::default(),
            total_epochs: 200,
            use_russ: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.loss.validate()?;
        self.ema.validate()?;
        self.optimizer.validate()?;
        if self.total_epochs == 0 {
            return Err(Error::config("train.total_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub student: ModelState<T>,
    pub teacher: ModelState<T>,
    pub optimizer: AdamState<T>,
    pub global_step: u64,
    /// Current 1-based epoch.
    pub epoch: usize,
    pub rng_seed: u64,
}

impl<T: Real> TrainState<T> {
    /// Student from `init_seed`; the teacher starts as an exact copy.
    pub fn new(network: &Network, init_seed: u64, rng_seed: u64) -> Self {
        let student = network.init_state::<T>(init_seed);
        Self {
            teacher: student.clone(),
            optimizer: AdamState::new(&student),
            student,
            global_step: 0,
            epoch: 1,
            rng_seed,
        }
    }
}

/// Which form of the consistency loss a step used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsistencyPath {
    /// No unlabeled samples in the step.
    Disabled,
    /// Every unlabeled sample in the batch.
    AllSamples,
    /// Only the top-`q` reliable samples.
    Selected,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub global_step: u64,
    pub epoch: usize,
    pub cross_entropy: f64,
    pub dice: f64,
    pub l_sup: f64,
    pub l_cons: f64,
    pub lambda: f64,
    pub total: f64,
    /// `None` when no unlabeled batch was given.
    pub q: Option<usize>,
    pub unlabeled_batch: usize,
    pub selected_ids: Vec<String>,
    pub mean_cons_student: f64,
    pub mean_cons_teacher: f64,
    pub path: ConsistencyPath,
}

/// Labeled images and their masks as network tensors.
pub struct LabeledBatch<T> {
    pub x_a: Tensor<T>,
    pub x_b: Tensor<T>,
    pub targets: Vec<Vec<u8>>,
}

impl<T: Real> LabeledBatch<T> {
    pub fn from_samples(samples: &[MultiModalSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("labeled batch is empty".into()));
        }
        let mut targets = Vec::with_capacity(samples.len());
        for s in samples {
            s.check_shapes()?;
            let mask = s.mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("labeled sample {} has no mask", s.sample_id))
            })?;
            targets.push(mask.iter().copied().collect());
        }
        let a: Vec<_> = samples.iter().map(|s| &s.modality_a).collect();
        let b: Vec<_> = samples.iter().map(|s| &s.modality_b).collect();
        Ok(Self {
            x_a: images_to_tensor(&a),
            x_b: images_to_tensor(&b),
            targets,
        })
    }
}

/// `M` augmented copies of each unlabeled sample, stacked sample-major.
pub struct UnlabeledCopies<T> {
    pub ids: Vec<String>,
    pub m: usize,
    pub x_a: Tensor<T>,
    pub x_b: Tensor<T>,
}

impl<T: Real> UnlabeledCopies<T> {
    pub fn from_samples(
        samples: &[MultiModalSample],
        policy: &AugmentPolicy,
        seed: u64,
    ) -> Result<Self> {
        let mut copies = Vec::with_capacity(samples.len() * policy.m_copies);
        for s in samples {
            s.check_shapes()?;
            if s.mask.is_some() {
                return Err(Error::InvalidArgument(format!(
                    "unlabeled sample {} carries a mask",
                    s.sample_id
                )));
            }
            copies.extend(augment_copies(s, policy, seed));
        }
        let a: Vec<_> = copies.iter().map(|s| &s.modality_a).collect();
        let b: Vec<_> = copies.iter().map(|s| &s.modality_b).collect();
        Ok(Self {
            ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
            m: policy.m_copies,
            x_a: images_to_tensor(&a),
            x_b: images_to_tensor(&b),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Loss values and student gradients of one step, before any update.
pub struct Objective<T> {
    pub supervised: SupervisedTerms,
    pub l_cons: f64,
    pub lambda: f64,
    pub total: f64,
    pub grads: Gradients<T>,
    pub records: Vec<ConsistencyRecord>,
    pub selection: Option<SelectionMask>,
    pub q: Option<usize>,
    pub path: ConsistencyPath,
    labeled_cache: ForwardCache<T>,
    unlabeled_cache: Option<ForwardCache<T>>,
}

/// Student mean over the `m` copies of every selected sample, and the same for the teacher.
fn copy_means<T: Real>(probs: &Tensor<T>, selected: &[usize], m: usize) -> Vec<Vec<T>> {
    let inv = T::one() / T::from_usize(m).unwrap();
    selected
        .iter()
        .map(|&i| {
            let mut mean = vec![T::zero(); probs.item(0).len()];
            for copy in 0..m {
                mean.iter_mut()
                    .zip(probs.item(i * m + copy))
                    .for_each(|(a, &b)| *a += b);
            }
            mean.iter_mut().for_each(|v| *v *= inv);
            mean
        })
        .collect()
}

/// Total loss `alpha_sup * l_sup + lambda * l_cons` and its gradient w.r.t.
/// the student, with the teacher evaluated in inference mode.
///
/// `epoch` is 1-based: it indexes the selection ramp directly and the
/// consistency-weight ramp as `epoch - 1`.
pub fn compute_objective<T: Real>(
    network: &Network,
    student: &ModelState<T>,
    teacher: &ModelState<T>,
    labeled: &LabeledBatch<T>,
    unlabeled: Option<&UnlabeledCopies<T>>,
    config: &TrainerConfig,
    epoch: usize,
) -> Result<Objective<T>> {
    let lambda = lambda_schedule(epoch.saturating_sub(1), &config.loss);
    let mut grads = Gradients::zeros_like(student);
    let mut records = Vec::new();
    let mut selection = None;
    let mut q = None;
    let mut l_cons = 0.0;
    let mut path = ConsistencyPath::Disabled;
    let mut unlabeled_cache = None;

    if let Some(u) = unlabeled.filter(|u| !u.is_empty()) {
        let b = u.len();
        let k = network.config().n_classes;
        let cache = network.forward_train(student, &u.x_a, &u.x_b)?;
        let teacher_probs = network.predict(teacher, &u.x_a, &u.x_b)?;
        let student_probs = cache.probs();

        let mut sel = if config.use_russ {
            for (i, id) in u.ids.iter().enumerate() {
                let per_copy = |p: &Tensor<T>| {
                    (0..u.m)
                        .map(|c| class_vector_of(p.item(i * u.m + c), k))
                        .collect::<Vec<_>>()
                };
                records.push(ConsistencyRecord::new(
                    id.clone(),
                    per_copy(student_probs),
                    per_copy(&teacher_probs),
                )?);
            }
            let q_now = q_schedule(
                epoch.min(config.total_epochs).max(1),
                config.total_epochs,
                b,
            )?;
            path = ConsistencyPath::Selected;
            select(&records, q_now)?
        } else {
            path = ConsistencyPath::AllSamples;
            SelectionMask::all(u.ids.clone())
        };
        sel.q_used = sel.selected.iter().filter(|&&s| s).count();
        q = Some(sel.q_used);

        let chosen = sel.selected_indices();
        let s_means = copy_means(student_probs, &chosen, u.m);
        let t_means = copy_means(&teacher_probs, &chosen, u.m);
        let (value, mean_grads) = consistency_loss_grad(&s_means, &t_means);
        l_cons = value;

        if lambda > 0.0 {
            let mut d_probs = Tensor::zeros(student_probs.shape());
            let factor = T::from_f64_lossy(lambda / u.m as f64);
            for (&i, g) in chosen.iter().zip(&mean_grads) {
                for copy in 0..u.m {
                    d_probs
                        .item_mut(i * u.m + copy)
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &gv)| *d = gv * factor);
                }
            }
            let g_u = network.backward(student, &cache, &d_probs);
            grads.add_scaled(&g_u, T::one());
            unlabeled_cache = Some(cache);
        }
        selection = Some(sel);
    }

    let labeled_cache = network.forward_train(student, &labeled.x_a, &labeled.x_b)?;
    let (supervised, mut d_sup) = supervised_batch(
        labeled_cache.probs(),
        &labeled.targets,
        config.loss.dice_smooth,
    )?;
    d_sup.scale(T::from_f64_lossy(config.loss.alpha_sup));
    let g_sup = network.backward(student, &labeled_cache, &d_sup);
    grads.add_scaled(&g_sup, T::one());

    let total = total_loss(
        supervised.total(),
        l_cons,
        epoch.saturating_sub(1),
        &config.loss,
    )?;
    Ok(Objective {
        supervised,
        l_cons,
        lambda,
        total,
        grads,
        records,
        selection,
        q,
        path,
        labeled_cache,
        unlabeled_cache,
    })
}

/// One optimization step: objective, student update, running statistics,
/// then the teacher's moving average of the updated student.
pub fn train_step<T: Real>(
    network: &Network,
    state: &mut TrainState<T>,
    labeled: &[MultiModalSample],
    unlabeled: &[MultiModalSample],
    config: &TrainerConfig,
) -> Result<StepStats> {
    let labeled_batch = LabeledBatch::from_samples(labeled)?;
    let aug_seed = rng::sub_seed(
        state.rng_seed,
        &["augment".into(), state.global_step.into()],
    );
    let copies = if unlabeled.is_empty() {
        None
    } else {
        Some(UnlabeledCopies::from_samples(
            unlabeled,
            &config.augment,
            aug_seed,
        )?)
    };
    let objective = compute_objective(
        network,
        &state.student,
        &state.teacher,
        &labeled_batch,
        copies.as_ref(),
        config,
        state.epoch,
    )?;
    if !objective.total.is_finite() || !objective.grads.all_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {}",
            state.global_step
        )));
    }

    state
        .optimizer
        .apply(&mut state.student, &objective.grads, &config.optimizer);
    // The teacher scores augmented copies with running statistics, so they
    // must track augmented batches too or the two models drift apart.
    if let Some(cache) = &objective.unlabeled_cache {
        network.update_running_stats(&mut state.student, cache, BN_MOMENTUM);
    }
    network.update_running_stats(&mut state.student, &objective.labeled_cache, BN_MOMENTUM);
    if !state.student.all_finite() {
        return Err(Error::NonFinite(format!(
            "student parameters after step {}",
            state.global_step
        )));
    }
    ema_update(&mut state.teacher, &state.student, config.ema.decay)?;
    state.global_step += 1;

    let mean = |f: fn(&ConsistencyRecord) -> f64| {
        if objective.records.is_empty() {
            0.0
        } else {
            objective.records.iter().map(f).sum::<f64>() / objective.records.len() as f64
        }
    };
    Ok(StepStats {
        global_step: state.global_step,
        epoch: state.epoch,
        cross_entropy: objective.supervised.cross_entropy,
        dice: objective.supervised.dice,
        l_sup: objective.supervised.total(),
        l_cons: objective.l_cons,
        lambda: objective.lambda,
        total: objective.total,
        q: objective.q,
        unlabeled_batch: unlabeled.len(),
        selected_ids: objective
            .selection
            .as_ref()
            .map(SelectionMask::selected_ids)
            .unwrap_or_default(),
        mean_cons_student: mean(|r| r.cons_student),
        mean_cons_teacher: mean(|r| r.cons_teacher),
        path: objective.path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkConfig, ParamEntry};

    fn constant_state(value: f64, names: usize) -> ModelState<f64> {
        ModelState::new(
            (0..names)
                .map(|i| ParamEntry {
                    name: format!("p{i}"),
                    shape: vec![2, 3],
                    data: vec![value; 6],
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ema_fixed_points() {
        let student = constant_state(1.0, 3);
        let mut teacher = constant_state(-0.0, 3);
        let original = teacher.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, original);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher, student);
    }

    #[test]
    fn ema_geometric_series() {
        let student = constant_state(1.0, 2);
        let mut teacher = constant_state(0.0, 2);
        for _ in 0..10 {
            ema_update(&mut teacher, &student, 0.99).unwrap();
        }
        let expected = 1.0 - 0.99f64.powi(10);
        assert!((expected - 0.09562).abs() < 1e-5);
        for e in teacher.entries() {
            assert!(e.data.iter().all(|v| (v - expected).abs() < 1e-12));
        }
    }

    #[test]
    fn ema_rejects_mismatched_states() {
        let mut teacher = constant_state(0.0, 2);
        assert!(ema_update(&mut teacher, &constant_state(0.0, 3), 0.5).is_err());
        assert!(ema_update(&mut teacher, &constant_state(0.0, 2), 1.5).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = constant_state(0.5, 1);
        let mut grads = Gradients::zeros_like(&params);
        grads.get_mut(0).iter_mut().for_each(|g| *g = 3.0);
        let mut opt = AdamState::new(&params);
        let config = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        opt.apply(&mut params, &grads, &config);
        for v in &params.entries()[0].data {
            assert!((v - (0.5 - 2e-4)).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_skips_buffers() {
        let net = Network::new(&NetworkConfig {
            base_width: 4,
            depth: 2,
            ..NetworkConfig::default()
        })
        .unwrap();
        let mut state = net.init_state::<f64>(1);
        let before = state.clone();
        let mut grads = Gradients::zeros_like(&state);
        for i in 0..state.len() {
            grads.get_mut(i).iter_mut().for_each(|g| *g = 1.0);
        }
        AdamState::new(&state).apply(&mut state, &grads, &AdamConfig::default());
        for (a, b) in state.entries().iter().zip(before.entries()) {
            assert_eq!(
                a.kind() == ParamKind::Buffer,
                a.data == b.data,
                "{}",
                a.name
            );
        }
    }
}
