//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semiseg::augment::AugmentPolicy;
use semiseg::data::MultiModalSample;
use semiseg::losses::LossWeights;
use semiseg::mean_teacher::{compute_objective, LabeledBatch, TrainerConfig, UnlabeledCopies};
use semiseg::network::{ModelState, Network, NetworkConfig};

/// Random two-modality sample whose mask marks a bright disc in modality A.
pub fn random_sample(id: &str, size: usize, seed: u64, labeled: bool) -> MultiModalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (
        rng.gen_range(2.0..size as f64 - 2.0),
        rng.gen_range(2.0..size as f64 - 2.0),
    );
    let r = size as f64 / 4.0;
    let mask = Array2::from_shape_fn((size, size), |(y, x)| {
        u8::from((y as f64 - c.0).powi(2) + (x as f64 - c.1).powi(2) <= r * r)
    });
    let a = Array2::from_shape_fn((size, size), |(y, x)| {
        0.5 * f32::from(mask[[y, x]]) + rng.gen_range(0.0..0.5f32)
    });
    let b = Array2::from_shape_fn((size, size), |_| rng.gen_range(0.0..1.0f32));
    MultiModalSample {
        sample_id: id.to_string(),
        modality_a: a,
        modality_b: b,
        mask: labeled.then_some(mask),
    }
}

pub struct GradFixture {
    pub network: Network,
    pub student: ModelState<f64>,
    pub teacher: ModelState<f64>,
    pub labeled: LabeledBatch<f64>,
    pub unlabeled: UnlabeledCopies<f64>,
    pub config: TrainerConfig,
    pub epoch: usize,
}

/// 8x8 inputs, base width 4, depth 2; consistency weight at its plateau and
/// top-q selection active (q = 2 of 4).
pub fn grad_fixture() -> GradFixture {
    let network = Network::new(&NetworkConfig {
        base_width: 4,
        depth: 2,
        ..NetworkConfig::default()
    })
    .unwrap();
    let labeled: Vec<_> = (0..2)
        .map(|i| random_sample(&format!("l{i}"), 8, 100 + i, true))
        .collect();
    let unlabeled: Vec<_> = (0..4)
        .map(|i| random_sample(&format!("u{i}"), 8, 200 + i, false))
        .collect();
    let config = TrainerConfig {
        augment: AugmentPolicy {
            m_copies: 2,
            ..AugmentPolicy::default()
        },
        loss: LossWeights {
            lambda_max: 1.0,
            rampup_epochs: 0,
            ..LossWeights::default()
        },
        total_epochs: 10,
        use_russ: true,
        ..TrainerConfig::default()
    };
    GradFixture {
        student: network.init_state(1),
        teacher: network.init_state(2),
        labeled: LabeledBatch::from_samples(&labeled).unwrap(),
        unlabeled: UnlabeledCopies::from_samples(&unlabeled, &config.augment, 5).unwrap(),
        network,
        config,
        epoch: 1,
    }
}

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_param: String,
    pub q: Option<usize>,
}

/// Central differences of the total loss against the analytic gradient on
/// every trainable parameter array, probing at most `per_array` evenly spaced
/// entries of each.
pub fn gradient_check(fx: &GradFixture, step: f64, per_array: usize) -> GradCheck {
    let objective = |student: &ModelState<f64>| {
        compute_objective(
            &fx.network,
            student,
            &fx.teacher,
            &fx.labeled,
            Some(&fx.unlabeled),
            &fx.config,
            fx.epoch,
        )
        .unwrap()
    };
    let base = objective(&fx.student);
    let mut perturbed = fx.student.clone();
    let mut out = GradCheck {
        checked: 0,
        worst_rel: 0.0,
        worst_param: String::new(),
        q: base.q,
    };
    for (idx, entry) in fx.student.entries().iter().enumerate() {
        let analytic = base.grads.get(idx);
        if analytic.is_empty() {
            continue;
        }
        let n = entry.data.len();
        let probes: Vec<usize> = if n <= per_array {
            (0..n).collect()
        } else {
            (0..per_array)
                .map(|i| i * n / per_array + (i * 7) % (n / per_array))
                .collect()
        };
        for j in probes {
            let orig = entry.data[j];
            perturbed.entries_mut()[idx].data[j] = orig + step;
            let plus = objective(&perturbed).total;
            perturbed.entries_mut()[idx].data[j] = orig - step;
            let minus = objective(&perturbed).total;
            perturbed.entries_mut()[idx].data[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            out.checked += 1;
            if rel > out.worst_rel {
                out.worst_rel = rel;
                out.worst_param = format!("{}[{j}] analytic {a:e} numeric {numeric:e}", entry.name);
            }
        }
    }
    out
}
