//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! Run alone with `cargo test -p semiseg-core --test acceptance`. Pass criterion
//! numbers as arguments (e.g. `-- 1 2 3`) to run a subset.

mod common;

use std::f64::consts::LN_2;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semiseg::config::TrainConfig;
use semiseg::harness::{
    cmd_generate, cmd_train, run_variants, Variant, CHECKPOINT_DIR, METRICS_FILE,
};
use semiseg::losses::{consistency_loss, supervised_loss, supervised_terms};
use semiseg::mean_teacher::ema_update;
use semiseg::metrics::{asd, dsc};
use semiseg::network::{ModelState, ParamEntry, ProbabilityMap};
use semiseg::russ::{consistency_score, q_schedule, select, ConsistencyRecord};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn constant_state(value: f64) -> ModelState<f64> {
    let entries = (0..4)
        .map(|i| ParamEntry {
            name: format!("layer{i}.weight"),
            shape: vec![3, 5],
            data: vec![value; 15],
        })
        .chain([ParamEntry {
            name: "layer0.bn.running_var".into(),
            shape: vec![5],
            data: vec![value; 5],
        }])
        .collect();
    ModelState::new(entries).unwrap()
}

fn ema_algebra() -> Outcome {
    let start = Instant::now();
    let student = constant_state(1.0);
    let mut worst: f64 = 0.0;
    for k in [1, 10, 100] {
        let mut teacher = constant_state(0.0);
        for _ in 0..k {
            ema_update(&mut teacher, &student, 0.99).map_err(|e| e.to_string())?;
        }
        let expected = 1.0 - 0.99f64.powi(k);
        for e in teacher.entries() {
            for v in &e.data {
                worst = worst.max((v - expected).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    let mut teacher = constant_state(0.25);
    let frozen = teacher.clone();
    ema_update(&mut teacher, &student, 1.0).map_err(|e| e.to_string())?;
    ensure(teacher == frozen, || "decay 1 changed the teacher".into())?;
    ema_update(&mut teacher, &student, 0.0).map_err(|e| e.to_string())?;
    ensure(teacher == student, || {
        "decay 0 did not copy the student".into()
    })?;
    within(start.elapsed(), 1.0)?;
    Ok(format!(
        "max |teacher - (1 - 0.99^k)| = {worst:.1e} for k in {{1, 10, 100}}"
    ))
}

fn naive_score(copies: &[Vec<f64>]) -> f64 {
    let m = copies.len() as f64;
    let mut total = 0.0;
    for j in 0..copies[0].len() {
        let mut mean = 0.0;
        for c in copies {
            mean += c[j];
        }
        mean /= m;
        let mut var = 0.0;
        for c in copies {
            var += (c[j] - mean) * (c[j] - mean);
        }
        total += (var / m).sqrt();
    }
    -total
}

fn random_copies(rng: &mut ChaCha8Rng, m: usize, k: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

fn russ_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for batch in 0..200 {
        let (b, m, k) = (
            rng.gen_range(1..=16),
            rng.gen_range(1..=7),
            rng.gen_range(1..=4),
        );
        let mut records = Vec::with_capacity(b);
        let mut oracle_scores = Vec::with_capacity(b);
        for i in 0..b {
            let s = random_copies(&mut rng, m, k);
            // Occasionally duplicate a sample's copies to exercise ties.
            let t = if rng.gen_bool(0.1) {
                s.clone()
            } else {
                random_copies(&mut rng, m, k)
            };
            for copies in [&s, &t] {
                worst = worst.max(
                    (consistency_score(copies).map_err(|e| e.to_string())? - naive_score(copies))
                        .abs(),
                );
            }
            oracle_scores.push(naive_score(&s) + naive_score(&t));
            records.push(
                ConsistencyRecord::new(format!("id{i:02}"), s, t).map_err(|e| e.to_string())?,
            );
        }
        let q = rng.gen_range(1..=b);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&x, &y| {
            records[y]
                .combined_score()
                .partial_cmp(&records[x].combined_score())
                .unwrap()
                .then_with(|| records[x].sample_id.cmp(&records[y].sample_id))
        });
        let mut expected = vec![false; b];
        order[..q].iter().for_each(|&i| expected[i] = true);
        let mask = select(&records, q).map_err(|e| e.to_string())?;
        ensure(mask.selected == expected, || {
            format!("batch {batch}: selection differs from the sorted oracle")
        })?;
        for (r, o) in records.iter().zip(&oracle_scores) {
            worst = worst.max((r.combined_score() - o).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("score deviation {worst:e}"))?;
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "200 batches, max score deviation {worst:.1e}, selections identical"
    ))
}

fn q_ramp() -> Outcome {
    let values = [
        q_schedule(1, 200, 10),
        q_schedule(100, 200, 10),
        q_schedule(200, 200, 10),
    ];
    let values: Vec<usize> = values
        .into_iter()
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure(values == [4, 8, 10], || {
        format!("q(1|100|200, 200, 10) = {values:?}")
    })?;
    let mut prev = 0;
    for epoch in 1..=200 {
        let q = q_schedule(epoch, 200, 10).map_err(|e| e.to_string())?;
        ensure(q >= prev, || format!("q decreased at epoch {epoch}"))?;
        prev = q;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let total = rng.gen_range(1..=500);
        let (epoch, b) = (rng.gen_range(1..=total), rng.gen_range(1..=64));
        let q = q_schedule(epoch, total, b).map_err(|e| e.to_string())?;
        ensure((1..=b).contains(&q), || {
            format!("q({epoch}, {total}, {b}) = {q}")
        })?;
    }
    Ok("q = 4, 8, 10; nondecreasing; within [1, b] on 1000 triples".into())
}

fn loss_correctness() -> Outcome {
    let start = Instant::now();
    let uniform = ProbabilityMap(Array3::from_elem((2, 6, 6), 0.5));
    let target = Array2::from_shape_fn((6, 6), |(y, x)| u8::from(y < 3 && x > 1));
    let ce = supervised_terms(&uniform, &target, 1e-5)
        .map_err(|e| e.to_string())?
        .cross_entropy;
    ensure((ce - LN_2).abs() <= 1e-9, || {
        format!("uniform CE {ce} vs ln 2")
    })?;
    let one_hot = ProbabilityMap(Array3::from_shape_fn((2, 6, 6), |(c, y, x)| {
        if usize::from(target[[y, x]]) == c {
            1.0
        } else {
            0.0
        }
    }));
    let perfect = supervised_loss(&one_hot, &target, 1e-5).map_err(|e| e.to_string())?;
    ensure(perfect <= 1e-4, || {
        format!("perfect prediction loss {perfect:e}")
    })?;
    let c = consistency_loss(
        std::slice::from_ref(&uniform),
        std::slice::from_ref(&uniform),
    )
    .map_err(|e| e.to_string())?;
    ensure(c == 0.0, || format!("consistency_loss(a, a) = {c}"))?;
    let fx = common::grad_fixture();
    let check = common::gradient_check(&fx, 1e-6, 12);
    ensure(check.worst_rel < 1e-3, || {
        format!("gradient check: {check:?}")
    })?;
    within(start.elapsed(), 60.0)?;
    Ok(format!(
        "CE(uniform) = ln 2, perfect loss {perfect:.1e}, gradient rel. err {:.1e} over {} entries",
        check.worst_rel, check.checked
    ))
}

fn brute_boundary(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if mask[[r, c]] == 0 {
                continue;
            }
            let outside = |dr: isize, dc: isize| {
                let (rr, cc) = (r as isize + dr, c as isize + dc);
                rr < 0
                    || cc < 0
                    || rr >= h as isize
                    || cc >= w as isize
                    || mask[[rr as usize, cc as usize]] == 0
            };
            if outside(-1, 0) || outside(1, 0) || outside(0, -1) || outside(0, 1) {
                out.push((r, c));
            }
        }
    }
    out
}

fn brute_asd(a: &Array2<u8>, b: &Array2<u8>, spacing: (f64, f64)) -> f64 {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| {
                        let dy = (r as f64 - r2 as f64) * spacing.0;
                        let dx = (c as f64 - c2 as f64) * spacing.1;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (directed(&ba, &bb) + directed(&bb, &ba))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<u8> {
    let density = rng.gen_range(0.05..0.6);
    let mut m = Array2::from_shape_fn((h, w), |_| u8::from(rng.gen_bool(density)));
    if m.iter().all(|&v| v == 0) {
        m[[h / 2, w / 2]] = 1;
    }
    m
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for pair in 0..100 {
        let (h, w) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (&x, &y) in a.iter().zip(b.iter()) {
            inter += f64::from(x & y);
            na += f64::from(x);
            nb += f64::from(y);
        }
        let expected = 2.0 * inter / (na + nb);
        let got = dsc(&a, &b).map_err(|e| e.to_string())?;
        ensure(got == expected, || {
            format!("pair {pair}: dsc {got} vs oracle {expected}")
        })?;
        let spacing = if pair % 2 == 0 {
            (1.0, 1.0)
        } else {
            (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0))
        };
        let got = asd(&a, &b, spacing).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_asd(&a, &b, spacing)).abs());
        ensure(
            dsc(&a, &a).unwrap() == 1.0 && asd(&a, &a, spacing).unwrap() == 0.0,
            || format!("pair {pair}: self-comparison"),
        )?;
    }
    ensure(worst <= 1e-9, || format!("asd deviation {worst:e}"))?;
    Ok(format!(
        "100 pairs: dsc exact, max asd deviation {worst:.1e}"
    ))
}

fn smoke_config(root: &Path) -> TrainConfig {
    let mut c = TrainConfig::parse(
        "data.image_height=16\ndata.image_width=16\ndata.n_samples=14\n\
         split.n_labeled=6\nsplit.n_unlabeled=5\nsplit.n_test=3\n\
         network.base_width=4\nnetwork.depth=2\naugment.m_copies=3\n\
         train.total_epochs=6\ntrain.labeled_batch=2\ntrain.unlabeled_batch=4\ntrain.checkpoint_every=0\nloss.rampup_epochs=3\n",
    )
    .unwrap();
    c.dataset_dir = root.join("data");
    c
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    Ok(text
        .lines()
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect())
}

/// Compares the named columns of two metrics logs, numerically to `tol`.
fn compare_columns(
    a: &[Vec<String>],
    b: &[Vec<String>],
    columns: &[&str],
    tol: f64,
) -> Result<usize, String> {
    ensure(a.len() == b.len(), || {
        format!("{} vs {} rows", a.len(), b.len())
    })?;
    ensure(a[0] == b[0], || "headers differ".into())?;
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| a[0].iter().position(|h| h == c).unwrap())
        .collect();
    let mut compared = 0;
    for (r, (ra, rb)) in a.iter().zip(b).enumerate().skip(1) {
        ensure(ra[0] == rb[0], || format!("row {r} kind differs"))?;
        for &i in &idx {
            let (x, y) = (&ra[i], &rb[i]);
            let same = match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(u), Ok(v)) => (u - v).abs() <= tol,
                _ => x == y,
            };
            ensure(same, || format!("row {r} column {}: {x} vs {y}", a[0][i]))?;
            compared += 1;
        }
    }
    Ok(compared)
}

fn decoupling() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut base = smoke_config(dir.path());
    cmd_generate(&base).map_err(|e| e.to_string())?;
    base.loss.lambda_max = 0.0;
    let mut with_unlabeled = base.clone();
    with_unlabeled.output_dir = dir.path().join("lambda0");
    let mut supervised = base.clone();
    supervised.use_unlabeled = false;
    supervised.output_dir = dir.path().join("supervised");
    for c in [&with_unlabeled, &supervised] {
        cmd_train(c, None).map_err(|e| e.to_string())?;
    }
    let a = read_rows(&with_unlabeled.output_dir.join(METRICS_FILE))?;
    let b = read_rows(&supervised.output_dir.join(METRICS_FILE))?;
    let n = compare_columns(
        &a,
        &b,
        &[
            "epoch",
            "step",
            "l_sup",
            "cross_entropy",
            "dice",
            "lambda",
            "total",
            "val_dsc",
        ],
        1e-6,
    )?;
    let ck = |c: &TrainConfig| {
        semiseg::checkpoint::Checkpoint::load(&c.output_dir.join(CHECKPOINT_DIR).join("final.ckpt"))
    };
    let (ca, cb) = (
        ck(&with_unlabeled).map_err(|e| e.to_string())?,
        ck(&supervised).map_err(|e| e.to_string())?,
    );
    ensure(
        ca.state.student == cb.state.student && ca.state.teacher == cb.state.teacher,
        || "final models differ".into(),
    )?;
    Ok(format!(
        "{n} logged loss entries equal, final student and teacher bit-identical"
    ))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut c = smoke_config(dir.path());
    cmd_generate(&c).map_err(|e| e.to_string())?;
    c.output_dir = dir.path().join("first");
    cmd_train(&c, None).map_err(|e| e.to_string())?;
    let first = read_rows(&c.output_dir.join(METRICS_FILE))?;
    c.output_dir = dir.path().join("second");
    cmd_train(&c, None).map_err(|e| e.to_string())?;
    let second = read_rows(&c.output_dir.join(METRICS_FILE))?;
    let columns: Vec<&str> = first[0].iter().map(String::as_str).collect();
    let n = compare_columns(&first, &second, &columns, 1e-6)?;
    Ok(format!("{n} metrics.tsv entries identical across two runs"))
}

fn semi_supervised_benefit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut c = TrainConfig::parse(
        "data.image_height=32\ndata.image_width=32\ntrain.total_epochs=60\nablation.n_seeds=5\ntrain.checkpoint_every=0\n",
    )
    .map_err(|e| e.to_string())?;
    c.dataset_dir = dir.path().join("data");
    c.output_dir = dir.path().join("runs");
    cmd_generate(&c).map_err(|e| e.to_string())?;
    let variants = [
        Variant::SupervisedOnly,
        Variant::All,
        Variant::WithoutRuss,
        Variant::WithoutAttention,
    ];
    let report = run_variants(&c, &variants).map_err(|e| e.to_string())?;
    let mean = |v: Variant| report.summary(v).map(|s| s.dsc.mean).unwrap_or(f64::NAN);
    let (sup, all, no_russ, no_sa) = (
        mean(Variant::SupervisedOnly),
        mean(Variant::All),
        mean(Variant::WithoutRuss),
        mean(Variant::WithoutAttention),
    );
    let summary = format!(
        "mean test DSC over 5 seeds at 32x32: All {all:.4}, w/o RUSS {no_russ:.4}, w/o SA {no_sa:.4}, supervised {sup:.4} (gain {:+.4})",
        all - sup
    );
    for r in &report.runs {
        println!(
            "    {} seed {}: dsc {:.4}",
            r.variant.label(),
            r.seed_index,
            r.dsc
        );
    }
    ensure(all - sup >= 0.02 && all >= no_russ && all >= no_sa, || {
        summary.clone()
    })?;
    Ok(summary)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("EMA algebra", ema_algebra),
        ("selection oracle equivalence", russ_oracle),
        ("q ramp", q_ramp),
        ("loss correctness", loss_correctness),
        ("metric oracles", metric_oracles),
        ("decoupling limit", decoupling),
        ("end-to-end reproducibility", reproducibility),
        ("semi-supervised benefit", semi_supervised_benefit),
    ];
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if !wanted.is_empty() && !wanted.contains(&number) {
            continue;
        }
        let start = Instant::now();
        let outcome =
            catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {number} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failures += 1;
                println!("criterion {number} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
