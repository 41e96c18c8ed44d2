//! Command implementations behind the `semiseg` binary: dataset generation,
//! training runs, checkpoint evaluation and the ablation sweep.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, ModelSection};
use crate::config::TrainConfig;
use crate::data::{
    generate_dataset, load_sample, load_unlabeled, make_splits, splits_path, MultiModalSample,
    SplitManifest,
};
use crate::error::{Error, Result};
use crate::mean_teacher::{train_step, StepStats, TrainState};
use crate::metrics::{binarize, evaluate_masks, EvalReport, MeanStd};
use crate::network::{images_to_tensor, ModelState, Network, ProbabilityMap};
use crate::rng;
use crate::russ::q_schedule;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.tsv";
pub const BEST_REPORT_FILE: &str = "report_best.tsv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const PLOT_FILE: &str = "ablation_plot.dat";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";

const METRICS_HEADER: &str =
    "kind\tepoch\tstep\tl_sup\tcross_entropy\tdice\tl_cons\tlambda\ttotal\tq\tn_selected\tval_dsc";
const EVAL_CHUNK: usize = 16;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

/// Writes the synthetic dataset and its split manifest under `config.dataset_dir`.
pub fn cmd_generate(config: &TrainConfig) -> Result<SplitManifest> {
    config.dataset.validate()?;
    let s = &config.split;
    if s.n_labeled + s.n_unlabeled + s.n_test > config.dataset.n_samples {
        return Err(Error::config(
            "split",
            format!(
                "{} + {} + {} samples requested but data.n_samples = {}",
                s.n_labeled, s.n_unlabeled, s.n_test, config.dataset.n_samples
            ),
        ));
    }
    generate_dataset(&config.dataset, &config.dataset_dir)?;
    let splits = make_splits(
        &config.dataset_dir,
        s.n_labeled,
        s.n_unlabeled,
        s.n_test,
        s.seed,
    )?;
    splits.write(&splits_path(&config.dataset_dir))?;
    log::info!(
        "wrote {} samples to {} ({} labeled / {} unlabeled / {} test)",
        config.dataset.n_samples,
        config.dataset_dir.display(),
        splits.labeled_ids.len(),
        splits.unlabeled_ids.len(),
        splits.test_ids.len()
    );
    Ok(splits)
}

/// Named subsets of a dataset's split manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Labeled,
    Unlabeled,
    Test,
}

impl SplitName {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "labeled" => Some(Self::Labeled),
            "unlabeled" => Some(Self::Unlabeled),
            "test" => Some(Self::Test),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Labeled => "labeled",
            Self::Unlabeled => "unlabeled",
            Self::Test => "test",
        }
    }

    pub fn ids(self, splits: &SplitManifest) -> &[String] {
        match self {
            Self::Labeled => &splits.labeled_ids,
            Self::Unlabeled => &splits.unlabeled_ids,
            Self::Test => &splits.test_ids,
        }
    }
}

fn load_all(root: &Path, ids: &[String]) -> Result<Vec<MultiModalSample>> {
    ids.iter().map(|id| load_sample(root, id)).collect()
}

/// Teacher-style inference on labeled samples, scored per sample.
pub fn evaluate_state(
    network: &Network,
    state: &ModelState<f32>,
    samples: &[MultiModalSample],
    note: &str,
) -> Result<EvalReport> {
    let mut evals = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let a: Vec<_> = chunk.iter().map(|s| &s.modality_a).collect();
        let b: Vec<_> = chunk.iter().map(|s| &s.modality_b).collect();
        let probs = network.predict(
            state,
            &images_to_tensor::<f32>(&a),
            &images_to_tensor::<f32>(&b),
        )?;
        if !probs.is_finite() {
            return Err(Error::NonFinite("network output during evaluation".into()));
        }
        for (i, s) in chunk.iter().enumerate() {
            let gt = s.mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "sample {} has no mask to score against",
                    s.sample_id
                ))
            })?;
            let pred = binarize(&ProbabilityMap::from_tensor_item(&probs, i));
            evals.push(evaluate_masks(&s.sample_id, &pred, gt, (1.0, 1.0))?);
        }
    }
    Ok(EvalReport {
        note: note.to_string(),
        samples: evals,
    })
}

/// Scores one model of a checkpoint on a split of the dataset at `dataset_dir`.
pub fn cmd_evaluate(
    checkpoint: &Path,
    dataset_dir: &Path,
    split: SplitName,
    section: ModelSection,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let network = Network::new(&ck.network)?;
    network.check_state(ck.model(section))?;
    let splits = SplitManifest::read(&splits_path(dataset_dir))?;
    let ids = split.ids(&splits);
    if ids.is_empty() {
        return Err(Error::config(
            "split",
            format!("split `{}` is empty", split.as_str()),
        ));
    }
    let samples = load_all(dataset_dir, ids)?;
    let note = format!(
        "{} model of {} (epoch {}) on the {} split",
        section.as_str(),
        checkpoint.display(),
        ck.state.epoch.saturating_sub(1),
        split.as_str()
    );
    let report = evaluate_state(&network, ck.model(section), &samples, &note)?;
    if let Some(path) = out {
        report.write(path)?;
    }
    Ok(report)
}

/// Cycles through the unlabeled pool, reshuffling on every pass.
struct UnlabeledStream<'a> {
    pool: &'a [MultiModalSample],
    seed: u64,
    orders: HashMap<u64, Vec<usize>>,
}

impl<'a> UnlabeledStream<'a> {
    fn new(pool: &'a [MultiModalSample], seed: u64) -> Self {
        Self {
            pool,
            seed,
            orders: HashMap::new(),
        }
    }

    /// The `count` samples starting at absolute position `start`.
    fn batch(&mut self, start: u64, count: usize) -> Vec<MultiModalSample> {
        if self.pool.is_empty() {
            return Vec::new();
        }
        let n = self.pool.len() as u64;
        (start..start + count.min(self.pool.len()) as u64)
            .map(|pos| {
                let pass = pos / n;
                let seed = self.seed;
                let order = self.orders.entry(pass).or_insert_with(|| {
                    let mut idx: Vec<usize> = (0..n as usize).collect();
                    idx.shuffle(&mut rng::stream(
                        seed,
                        &["unlabeled-order".into(), pass.into()],
                    ));
                    idx
                });
                self.pool[order[(pos % n) as usize]].clone()
            })
            .collect()
    }
}

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_report: EvalReport,
    pub best_report: EvalReport,
    pub best_epoch: Option<usize>,
    pub state: TrainState<f32>,
}

/// File name of the checkpoint written after `epoch` when it is a multiple of
/// `train.checkpoint_every`.
pub fn periodic_checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.9}"))
}

fn step_row(s: &StepStats) -> String {
    format!(
        "step\t{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{}\t{}\tNA\n",
        s.epoch,
        s.global_step,
        s.l_sup,
        s.cross_entropy,
        s.dice,
        s.l_cons,
        s.lambda,
        s.total,
        s.q.map_or_else(|| "NA".into(), |q| q.to_string()),
        s.selected_ids.len(),
    )
}

/// Keeps the header and the rows of epochs before `next_epoch`.
fn truncate_metrics(path: &Path, next_epoch: usize) -> Result<String> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0
            || line
                .split('\t')
                .nth(1)
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < next_epoch);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    Ok(kept)
}

/// Runs the full training loop described by `config`, writing every artifact
/// under `config.output_dir`. With `resume`, continues from that checkpoint.
pub fn cmd_train(config: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let root = &config.dataset_dir;
    let splits_file = splits_path(root);
    if !splits_file.exists() {
        return Err(Error::config(
            "data.dir",
            format!(
                "{} has no split manifest; run `generate` first",
                root.display()
            ),
        ));
    }
    let splits = SplitManifest::read(&splits_file)?;
    let n_val = config.split.n_validation;
    if splits.labeled_ids.len() <= n_val {
        return Err(Error::config(
            "split.n_validation",
            "must be smaller than the labeled split",
        ));
    }
    let validation = load_all(root, &splits.labeled_ids[..n_val])?;
    let labeled = load_all(root, &splits.labeled_ids[n_val..])?;
    let unlabeled: Vec<MultiModalSample> = if config.use_unlabeled {
        splits
            .unlabeled_ids
            .iter()
            .map(|id| load_unlabeled(root, id))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let test = load_all(root, &splits.test_ids)?;
    if let Some(s) = labeled.first() {
        let (h, w) = s.shape();
        config.network_config().check_input_shape(h, w)?;
    }

    let network_config = config.network_config();
    let network = Network::new(&network_config)?;
    let trainer = config.trainer_config();
    let out = &config.output_dir;
    let ck_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).map_err(io_err(&ck_dir))?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, config.to_text()).map_err(io_err(&resolved))?;

    let (mut state, mut best_dsc) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.network != network_config {
                return Err(Error::StateMismatch(format!(
                    "{} was trained with a different network configuration",
                    path.display()
                )));
            }
            network.check_state(&ck.state.student)?;
            log::info!(
                "resuming from {} at epoch {}",
                path.display(),
                ck.state.epoch
            );
            if ck_dir.join(BEST_CHECKPOINT).is_file() {
                (ck.state, ck.best_validation_dsc)
            } else {
                log::warn!(
                    "no best checkpoint in {}; best-model tracking restarts",
                    ck_dir.display()
                );
                (ck.state, f64::NAN)
            }
        }
        None => (
            TrainState::new(&network, config.init_seed, config.train_seed),
            f64::NAN,
        ),
    };
    let metrics_path = out.join(METRICS_FILE);
    let prefix = if resume.is_some() && metrics_path.exists() {
        truncate_metrics(&metrics_path, state.epoch)?
    } else {
        format!("{METRICS_HEADER}\n")
    };
    let mut metrics = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    metrics
        .write_all(prefix.as_bytes())
        .map_err(io_err(&metrics_path))?;

    let save = |state: &TrainState<f32>, best: f64, name: &str| -> Result<()> {
        Checkpoint {
            network: network_config.clone(),
            state: state.clone(),
            best_validation_dsc: best,
        }
        .save(&ck_dir.join(name))
    };
    let mut stream = UnlabeledStream::new(&unlabeled, config.train_seed);
    let first_epoch = state.epoch;

    for epoch in first_epoch..=config.total_epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        order.shuffle(&mut rng::stream(
            config.train_seed,
            &["labeled-order".into(), (epoch as u64).into()],
        ));
        let mut rows = String::new();
        for chunk in order.chunks(config.labeled_batch) {
            let batch: Vec<MultiModalSample> = chunk.iter().map(|&i| labeled[i].clone()).collect();
            let unl = stream.batch(
                state.global_step * config.unlabeled_batch as u64,
                config.unlabeled_batch,
            );
            match train_step(&network, &mut state, &batch, &unl, &trainer) {
                Ok(stats) => rows.push_str(&step_row(&stats)),
                Err(e @ Error::NonFinite(_)) => {
                    save(&state, best_dsc, DIAGNOSTIC_CHECKPOINT)?;
                    log::error!(
                        "aborting: {e}; diagnostic checkpoint written to {}",
                        ck_dir.join(DIAGNOSTIC_CHECKPOINT).display()
                    );
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }

        let val_dsc = if validation.is_empty() {
            None
        } else {
            Some(
                evaluate_state(&network, &state.teacher, &validation, "")?
                    .dsc()
                    .mean,
            )
        };
        let q = match (config.use_russ, unlabeled.is_empty()) {
            (_, true) => None,
            (true, false) => Some(q_schedule(
                epoch,
                config.total_epochs,
                config.unlabeled_batch.min(unlabeled.len()),
            )?),
            (false, false) => Some(config.unlabeled_batch.min(unlabeled.len())),
        };
        let lambda = crate::losses::lambda_schedule(epoch - 1, &config.loss);
        let _ = writeln!(
            rows,
            "epoch\t{epoch}\t{}\tNA\tNA\tNA\tNA\t{lambda:.9}\tNA\t{}\tNA\t{}",
            state.global_step,
            q.map_or_else(|| "NA".into(), |q| q.to_string()),
            fmt_opt(val_dsc)
        );
        metrics
            .write_all(rows.as_bytes())
            .map_err(io_err(&metrics_path))?;
        metrics.flush().map_err(io_err(&metrics_path))?;
        log::info!(
            "epoch {epoch}/{} val_dsc={}",
            config.total_epochs,
            fmt_opt(val_dsc)
        );

        let improved = match val_dsc {
            Some(v) => best_dsc.is_nan() || v > best_dsc,
            None => true,
        };
        let mut next = state.clone();
        next.epoch = epoch + 1;
        if improved {
            best_dsc = val_dsc.unwrap_or(f64::NAN);
            save(&next, best_dsc, BEST_CHECKPOINT)?;
        }
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            save(&next, best_dsc, &periodic_checkpoint_name(epoch))?;
        }
        save(&next, best_dsc, LAST_CHECKPOINT)?;
    }
    state.epoch = config.total_epochs + 1;
    save(&state, best_dsc, FINAL_CHECKPOINT)?;

    let best = Checkpoint::load(&ck_dir.join(BEST_CHECKPOINT))?;
    let best_epoch = best.state.epoch - 1;
    let final_note = format!(
        "teacher of the final checkpoint (epoch {}) on {} test samples; validation uses {} held-out labeled samples",
        config.total_epochs,
        test.len(),
        n_val
    );
    let best_note = format!(
        "teacher of the best-validation checkpoint (epoch {best_epoch}) on {} test samples",
        test.len()
    );
    let final_report = evaluate_state(&network, &state.teacher, &test, &final_note)?;
    let best_report = evaluate_state(&network, &best.state.teacher, &test, &best_note)?;
    final_report.write(&out.join(REPORT_FILE))?;
    best_report.write(&out.join(BEST_REPORT_FILE))?;
    Ok(TrainOutcome {
        run_dir: out.clone(),
        final_report,
        best_report,
        best_epoch: (n_val > 0).then_some(best_epoch),
        state,
    })
}

/// Training variants compared by the ablation sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    All,
    WithoutRuss,
    WithoutAttention,
    /// Labeled data only, no consistency term.
    SupervisedOnly,
}

impl Variant {
    pub const ABLATIONS: [Variant; 3] = [
        Variant::All,
        Variant::WithoutRuss,
        Variant::WithoutAttention,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::All => "All",
            Variant::WithoutRuss => "w/o RUSS",
            Variant::WithoutAttention => "w/o SA",
            Variant::SupervisedOnly => "supervised",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            Variant::All => "all",
            Variant::WithoutRuss => "no_russ",
            Variant::WithoutAttention => "no_sa",
            Variant::SupervisedOnly => "supervised",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [
            Variant::All,
            Variant::WithoutRuss,
            Variant::WithoutAttention,
            Variant::SupervisedOnly,
        ]
        .into_iter()
        .find(|v| v.label() == s)
    }

    pub fn apply(self, config: &mut TrainConfig) {
        let (russ, attention, unlabeled) = match self {
            Variant::All => (true, true, true),
            Variant::WithoutRuss => (false, true, true),
            Variant::WithoutAttention => (true, false, true),
            Variant::SupervisedOnly => (true, true, false),
        };
        config.use_russ = russ;
        config.use_spatial_attention = attention;
        config.use_unlabeled = unlabeled;
        if !unlabeled {
            config.loss.lambda_max = 0.0;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed_index: usize,
    pub dsc: f64,
    pub asd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub dsc: MeanStd,
    pub asd: MeanStd,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summaries: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn summary(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    /// One row per run, followed by `#`-prefixed mean and std rows per variant.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("# test-set scores of the final teacher, one row per (variant, seed)\nvariant\tseed\tdsc\tasd\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.9}\t{:.9}",
                r.variant.label(),
                r.seed_index,
                r.dsc,
                r.asd
            );
        }
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "# {}\tdsc={:.9}±{:.9}\tasd={:.9}±{:.9}",
                s.variant.label(),
                s.dsc.mean,
                s.dsc.std,
                s.asd.mean,
                s.asd.std
            );
        }
        out
    }

    /// `variant<TAB>metric<TAB>value` lines with round-trip exact values.
    pub fn to_plot_data(&self) -> String {
        let mut out = String::new();
        for s in &self.summaries {
            for (metric, v) in [
                ("dsc_mean", s.dsc.mean),
                ("dsc_std", s.dsc.std),
                ("asd_mean", s.asd.mean),
                ("asd_std", s.asd.std),
            ] {
                let _ = writeln!(out, "{}\t{metric}\t{v:?}", s.variant.label());
            }
        }
        out
    }

    /// Inverse of [`to_plot_data`](Self::to_plot_data).
    pub fn parse_plot_data(text: &str) -> Result<Vec<VariantSummary>> {
        let mut out: Vec<VariantSummary> = Vec::new();
        let nan = MeanStd {
            mean: f64::NAN,
            std: f64::NAN,
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let bad = || Error::InvalidArgument(format!("malformed plot-data line `{line}`"));
            let mut parts = line.split('\t');
            let (Some(label), Some(metric), Some(value), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(bad());
            };
            let variant = Variant::from_label(label).ok_or_else(bad)?;
            let value: f64 = value.parse().map_err(|_| bad())?;
            let idx = match out.iter().position(|s| s.variant == variant) {
                Some(i) => i,
                None => {
                    out.push(VariantSummary {
                        variant,
                        dsc: nan,
                        asd: nan,
                    });
                    out.len() - 1
                }
            };
            let entry = &mut out[idx];
            match metric {
                "dsc_mean" => entry.dsc.mean = value,
                "dsc_std" => entry.dsc.std = value,
                "asd_mean" => entry.asd.mean = value,
                "asd_std" => entry.asd.std = value,
                _ => return Err(bad()),
            }
        }
        Ok(out)
    }
}

/// Trains every variant for `config.ablation_seeds` seed repetitions. Run `r`
/// offsets both the init and training seeds by `r`; data and splits are shared.
pub fn run_variants(config: &TrainConfig, variants: &[Variant]) -> Result<AblationReport> {
    config.validate()?;
    let mut runs = Vec::new();
    for &variant in variants {
        for r in 0..config.ablation_seeds {
            let mut c = config.clone();
            variant.apply(&mut c);
            c.init_seed = config.init_seed + r as u64;
            c.train_seed = config.train_seed + r as u64;
            c.output_dir = config
                .output_dir
                .join(variant.slug())
                .join(format!("seed{r}"));
            log::info!("ablation: {} seed {r}", variant.label());
            let outcome = cmd_train(&c, None)?;
            runs.push(AblationRun {
                variant,
                seed_index: r,
                dsc: outcome.final_report.dsc().mean,
                asd: outcome.final_report.asd().mean,
            });
        }
    }
    let summaries = variants
        .iter()
        .map(|&variant| {
            let pick = |f: fn(&AblationRun) -> f64| -> Vec<f64> {
                runs.iter()
                    .filter(|r| r.variant == variant)
                    .map(f)
                    .collect()
            };
            let asd: Vec<f64> = pick(|r| r.asd)
                .into_iter()
                .filter(|v| v.is_finite())
                .collect();
            VariantSummary {
                variant,
                dsc: MeanStd::of(&pick(|r| r.dsc)),
                asd: MeanStd::of(&asd),
            }
        })
        .collect();
    Ok(AblationReport { runs, summaries })
}

/// The three-way component ablation, written to `report.tsv` and `ablation_plot.dat`.
pub fn cmd_ablate(config: &TrainConfig) -> Result<AblationReport> {
    let report = run_variants(config, &Variant::ABLATIONS)?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, config.to_text()).map_err(io_err(&path))?;
    let path = out.join(REPORT_FILE);
    fs::write(&path, report.to_tsv()).map_err(io_err(&path))?;
    let path = out.join(PLOT_FILE);
    fs::write(&path, report.to_plot_data()).map_err(io_err(&path))?;
    Ok(report)
}
