//! Training loop, cross-validation and the omega sweep.

mod adam;
mod checkpoint;
mod config;
mod folds;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{Precision, RunConfig};
pub use folds::{make_folds, FoldPlan};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_predictions, EvalReport, ImageMasks};
use crate::loss::{auto_balance_lambda, head_loss_var, total_loss_var};
use crate::models::{build, forward_on_tape, predict, Mode, ModelParams, ModelSpec, Task, TapeForward};
use crate::preprocess::{
    augment, enhance, resize_or_pad, standardize, AugmentationPolicy, EnhanceOrder, ImageRecord, PreprocessConfig,
};
use crate::tensor::{ActivationPattern, FlushDenormals, Real, Tape, Tensor, Var};

/// Stable 64-bit seed from a base seed and labelled parts.
pub fn derive_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A network-ready image: standardised `[3, S, S]` input and `[S, S]` masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub input: Tensor<f32>,
    pub masks: BTreeMap<Task, Tensor<f32>>,
}

fn require_masks(records: &[ImageRecord], tasks: &[Task]) -> Result<()> {
    let missing: Vec<String> = records
        .iter()
        .filter(|r| tasks.iter().any(|&t| r.mask(t).is_none()))
        .map(|r| r.id.clone())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingMasks(missing))
    }
}

fn to_sample(rec: &ImageRecord, tasks: &[Task]) -> Sample {
    let masks = tasks
        .iter()
        .filter_map(|&t| rec.mask(t).map(|m| (t, m.clone())))
        .collect();
    Sample {
        id: rec.id.clone(),
        input: standardize(&rec.rgb),
        masks,
    }
}

/// Turns records into samples, optionally augmenting per epoch. The
/// geometric step (and enhancement, for enhance-first) is done once.
struct SampleSource {
    cfg: PreprocessConfig,
    policy: Option<AugmentationPolicy>,
    tasks: Vec<Task>,
    base: Vec<ImageRecord>,
    fixed: Option<Vec<Sample>>,
}

impl SampleSource {
    fn new(records: &[ImageRecord], cfg: &PreprocessConfig, policy: Option<AugmentationPolicy>, tasks: &[Task]) -> Result<Self> {
        let mut base = Vec::with_capacity(records.len());
        for r in records {
            let r = match cfg.order {
                EnhanceOrder::ResizeFirst => resize_or_pad(r, cfg.input_size)?,
                EnhanceOrder::EnhanceFirst => {
                    let e = enhance_if(cfg, r.clone())?;
                    resize_or_pad(&e, cfg.input_size)?
                }
            };
            base.push(r);
        }
        let mut src = SampleSource {
            cfg: cfg.clone(),
            policy,
            tasks: tasks.to_vec(),
            base,
            fixed: None,
        };
        if src.policy.is_none() {
            let fixed = (0..src.base.len()).map(|i| src.finish(src.base[i].clone())).collect::<Result<_>>()?;
            src.fixed = Some(fixed);
        }
        Ok(src)
    }

    fn finish(&self, r: ImageRecord) -> Result<Sample> {
        let r = match self.cfg.order {
            EnhanceOrder::ResizeFirst => enhance_if(&self.cfg, r)?,
            EnhanceOrder::EnhanceFirst => r,
        };
        Ok(to_sample(&r, &self.tasks))
    }

    fn len(&self) -> usize {
        self.base.len()
    }

    fn get(&self, i: usize, epoch: usize) -> Result<Sample> {
        if let Some(f) = &self.fixed {
            return Ok(f[i].clone());
        }
        let policy = self.policy.as_ref().expect("augmenting source");
        let r = &self.base[i];
        let seed = derive_seed(policy.seed, &[b"augment", r.id.as_bytes(), &(epoch as u64).to_le_bytes()]);
        let aug = augment(r, policy, &mut ChaCha8Rng::seed_from_u64(seed))?;
        self.finish(aug)
    }
}

fn enhance_if(cfg: &PreprocessConfig, r: ImageRecord) -> Result<ImageRecord> {
    if !cfg.enhance {
        return Ok(r);
    }
    Ok(ImageRecord {
        rgb: enhance(&r.rgb, cfg.blur_kernel, cfg.blur_sigma)?,
        ..r
    })
}

/// Preprocesses records for inference or evaluation, without augmentation.
pub fn prepare_samples(records: &[ImageRecord], cfg: &PreprocessConfig, tasks: &[Task]) -> Result<Vec<Sample>> {
    let src = SampleSource::new(records, cfg, None, tasks)?;
    Ok(src.fixed.expect("no augmentation"))
}

/// Stacks samples into a `[B, 3, S, S]` input and `[B, S, S]` label tensors.
pub fn batch_tensors<T: Real>(samples: &[&Sample], tasks: &[Task]) -> Result<(Tensor<T>, BTreeMap<Task, Tensor<T>>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.input.shape());
    let data = samples
        .iter()
        .flat_map(|s| s.input.data().iter().map(|&v| T::from_f64(v as f64)))
        .collect();
    let x = Tensor::new(shape, data)?;
    let mut labels = BTreeMap::new();
    for &task in tasks {
        let mut data = Vec::new();
        for s in samples {
            let m = s
                .masks
                .get(&task)
                .ok_or_else(|| Error::MissingMasks(vec![s.id.clone()]))?;
            data.extend(m.data().iter().map(|&v| T::from_f64(v as f64)));
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.input.shape().get(1..).unwrap_or(&[]));
        labels.insert(task, Tensor::new(shape, data)?);
    }
    Ok((x, labels))
}

fn lambda_for(cfg: &RunConfig, task: Task, labels: &Tensor<impl Real>) -> Result<f64> {
    if cfg.auto_balance {
        let l = auto_balance_lambda(labels.data())?;
        return Ok(l.clamp(1e-3, 1.0 - 1e-3));
    }
    Ok(match task {
        Task::Od => cfg.lambda_od,
        Task::Ex => cfg.lambda_ex,
    })
}

/// Training objective over the head logits of one forward pass. For the
/// two-decoder network this is the omega-weighted sum of both task losses.
pub fn objective<T: Real>(
    tape: &mut Tape<T>,
    spec: &ModelSpec,
    cfg: &RunConfig,
    logits: &[Var],
    labels: &BTreeMap<Task, Tensor<T>>,
) -> Result<Var> {
    let heads = spec.heads();
    let mut losses = BTreeMap::new();
    for (head, &out) in heads.iter().zip(logits) {
        let y = labels
            .get(&head.task)
            .ok_or_else(|| Error::InvalidArgument(format!("no labels for {}", head.task)))?;
        let lambda = lambda_for(cfg, head.task, y)?;
        let l = head_loss_var(tape, out, y, lambda, cfg.background_weight, cfg.reduction)?;
        losses.insert(head.task, l);
    }
    if heads.len() == 1 {
        return Ok(losses[&heads[0].task]);
    }
    total_loss_var(tape, losses[&Task::Ex], losses[&Task::Od], cfg.omega)
}

#[allow(clippy::too_many_arguments)]
fn loss_on_tape<T: Real>(
    mut tape: Tape<T>,
    params: &mut ModelParams<T>,
    spec: &ModelSpec,
    cfg: &RunConfig,
    input: &Tensor<T>,
    labels: &BTreeMap<Task, Tensor<T>>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(Tape<T>, TapeForward, Var, f64)> {
    let x = tape.constant(input.clone());
    let fwd = forward_on_tape(&mut tape, params, spec, x, mode, dropout_seed)?;
    let loss = objective(&mut tape, spec, cfg, &fwd.logits, labels)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    Ok((tape, fwd, loss, value))
}

/// Loss value of one batch without the backward pass. With `frozen`, every
/// leaky ReLU and max pool takes the branch recorded there.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Real>(
    params: &mut ModelParams<T>,
    spec: &ModelSpec,
    cfg: &RunConfig,
    input: &Tensor<T>,
    labels: &BTreeMap<Task, Tensor<T>>,
    mode: Mode,
    dropout_seed: u64,
    frozen: Option<&ActivationPattern>,
) -> Result<f64> {
    let tape = frozen.map_or_else(Tape::new, |p| Tape::replaying(p.clone()));
    Ok(loss_on_tape(tape, params, spec, cfg, input, labels, mode, dropout_seed)?.3)
}

/// Branch choices of the forward pass behind [`loss_and_grads`] for the same
/// arguments.
pub fn activation_pattern<T: Real>(
    params: &mut ModelParams<T>,
    spec: &ModelSpec,
    cfg: &RunConfig,
    input: &Tensor<T>,
    labels: &BTreeMap<Task, Tensor<T>>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<ActivationPattern> {
    let (tape, ..) = loss_on_tape(Tape::recording(), params, spec, cfg, input, labels, mode, dropout_seed)?;
    Ok(tape.pattern().cloned().unwrap_or_default())
}

/// Loss value and parameter gradients for one batch. Train mode updates the
/// batch-norm running statistics in `params`.
pub fn loss_and_grads<T: Real>(
    params: &mut ModelParams<T>,
    spec: &ModelSpec,
    cfg: &RunConfig,
    input: &Tensor<T>,
    labels: &BTreeMap<Task, Tensor<T>>,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
    let (mut tape, fwd, loss, value) = loss_on_tape(Tape::new(), params, spec, cfg, input, labels, mode, dropout_seed)?;
    tape.backward(loss)?;
    let grads = fwd
        .params
        .iter()
        .filter_map(|(name, &v)| tape.grad(v).map(|g| (name.clone(), g)))
        .collect();
    Ok((value, grads))
}

/// Replaces the normalisation running statistics by the average batch
/// statistics over `samples`, computed with dropout disabled. Statistics
/// accumulated during training see dropout-scaled activations, which inflates
/// the variances used at inference.
pub fn recalibrate_norm<T: Real>(
    params: &mut ModelParams<T>,
    spec: &ModelSpec,
    samples: &[Sample],
    batch_size: usize,
) -> Result<()> {
    if !spec.normalization || samples.is_empty() {
        return Ok(());
    }
    let mut quiet = spec.clone();
    quiet.dropout_rate = 0.0;
    for (k, chunk) in samples.chunks(batch_size.max(1)).enumerate() {
        // Momentum k/(k+1) turns the running update into a plain mean.
        quiet.bn_momentum = k as f64 / (k as f64 + 1.0);
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = batch_tensors::<T>(&refs, &[])?;
        let mut tape = Tape::new();
        let x = tape.constant(x);
        forward_on_tape(&mut tape, params, &quiet, x, Mode::Train, 0)?;
    }
    Ok(())
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub od_f1: Option<f64>,
    pub ex_f1: Option<f64>,
}

pub fn write_trace_csv(path: &Path, trace: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome<T> {
    pub spec: ModelSpec,
    /// Parameters at the best held-out epoch, or the last epoch without a
    /// held-out set.
    pub best: ModelParams<T>,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
    pub last: ModelParams<T>,
    pub adam: AdamState<T>,
    pub trace: Vec<EpochStats>,
}

impl<T: Real> TrainOutcome<T> {
    pub fn best_checkpoint(&self, config: &RunConfig) -> Checkpoint<T> {
        Checkpoint::new(&self.spec, &config.preprocess(), self.best.clone(), None, config.seed, self.best_epoch)
    }

    pub fn last_checkpoint(&self, config: &RunConfig) -> Checkpoint<T> {
        Checkpoint::new(
            &self.spec,
            &config.preprocess(),
            self.last.clone(),
            Some(self.adam.clone()),
            config.seed,
            self.trace.len(),
        )
    }
}

/// Thresholded predictions for every sample and task of the model.
pub fn predict_samples<T: Real>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    samples: &[Sample],
    threshold: f64,
    fold: Option<usize>,
    keep_probs: bool,
) -> Result<Vec<ImageMasks>> {
    let mut out = Vec::new();
    for s in samples {
        let pred = predict(params, spec, &s.input, threshold)?;
        for tp in pred.tasks {
            let gt = s
                .masks
                .get(&tp.task)
                .ok_or_else(|| Error::MissingMasks(vec![s.id.clone()]))?;
            out.push(ImageMasks {
                id: s.id.clone(),
                fold,
                task: tp.task,
                pred: tp.mask,
                probs: keep_probs.then_some(tp.probs),
                gt: gt.clone(),
            });
        }
    }
    Ok(out)
}

pub fn evaluate_samples<T: Real>(
    params: &ModelParams<T>,
    spec: &ModelSpec,
    samples: &[Sample],
    cfg: &RunConfig,
    fold: Option<usize>,
    keep_probs: bool,
) -> Result<EvalReport> {
    let items = predict_samples(params, spec, samples, cfg.threshold, fold, keep_probs)?;
    evaluate_predictions(&items, cfg.sigma, cfg.pr_averaging)
}

/// Trains from scratch on `train`; when `heldout` is non-empty the returned
/// best parameters maximise the held-out mean task F1 (earliest on ties).
pub fn train_records<T: Real>(config: &RunConfig, train: &[ImageRecord], heldout: &[ImageRecord]) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let _ftz = FlushDenormals::enable();
    if train.is_empty() {
        return Err(Error::InvalidArgument("no training records".into()));
    }
    let spec = config.model_spec();
    let tasks = spec.tasks();
    require_masks(train, &tasks)?;
    require_masks(heldout, &tasks)?;
    let pre = config.preprocess();
    let policy = config.augment.then(|| config.augmentation_policy());
    let source = SampleSource::new(train, &pre, policy, &tasks)?;
    let held = prepare_samples(heldout, &pre, &tasks)?;
    let calibration = match config.recalibrate_norm {
        true => prepare_samples(train, &pre, &[])?,
        false => Vec::new(),
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[b"init"]));
    let mut params: ModelParams<T> = build(&spec, &mut init_rng)?;
    let mut adam = AdamState::default();
    let adam_cfg = config.adam();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams<T>)> = None;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        let shuffle_seed = derive_seed(config.seed, &[b"shuffle", &(epoch as u64).to_le_bytes()]);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples = chunk.iter().map(|&i| source.get(i, epoch)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let (x, labels) = batch_tensors::<T>(&refs, &tasks)?;
            let dropout_seed = derive_seed(
                config.seed,
                &[b"dropout", &(epoch as u64).to_le_bytes(), &(step as u64).to_le_bytes()],
            );
            let (loss, grads) = loss_and_grads(&mut params, &spec, config, &x, &labels, Mode::Train, dropout_seed)?;
            adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let mut stats = EpochStats {
            epoch,
            train_loss: loss_sum / source.len() as f64,
            od_f1: None,
            ex_f1: None,
        };
        if !held.is_empty() && (epoch % config.eval_every == 0 || epoch == config.epochs) {
            recalibrate_norm(&mut params, &spec, &calibration, config.batch_size)?;
            let report = evaluate_samples(&params, &spec, &held, config, None, false)?;
            stats.od_f1 = report.task_f1(Task::Od);
            stats.ex_f1 = report.task_f1(Task::Ex);
            let score = report.mean_task_f1();
            if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
                best = Some((score, epoch, params.clone()));
            }
        }
        log::info!(
            "epoch {epoch}/{} loss {:.4} od_f1 {:?} ex_f1 {:?}",
            config.epochs,
            stats.train_loss,
            stats.od_f1,
            stats.ex_f1
        );
        trace.push(stats);
    }
    recalibrate_norm(&mut params, &spec, &calibration, config.batch_size)?;

    let (best_score, best_epoch, best_params) = match best {
        Some((s, e, p)) => (Some(s), e, p),
        None => (None, config.epochs, params.clone()),
    };
    Ok(TrainOutcome {
        spec,
        best: best_params,
        best_epoch,
        best_score,
        last: params,
        adam,
        trace,
    })
}

fn split(plan: &FoldPlan, fold: usize, dataset: &[ImageRecord]) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>)> {
    if fold >= plan.fold_count {
        return Err(Error::InvalidArgument(format!("fold {fold} of {}", plan.fold_count)));
    }
    let mut train = Vec::new();
    let mut held = Vec::new();
    for r in dataset {
        match plan.fold_of(&r.id) {
            Some(f) if f == fold => held.push(r.clone()),
            Some(_) => train.push(r.clone()),
            None => return Err(Error::InvalidArgument(format!("record {} is not in the fold plan", r.id))),
        }
    }
    Ok((train, held))
}

/// Trains on every fold but `fold_index`, selecting on the held-out fold.
pub fn train<T: Real>(config: &RunConfig, plan: &FoldPlan, fold_index: usize, dataset: &[ImageRecord]) -> Result<TrainOutcome<T>> {
    let (train, held) = split(plan, fold_index, dataset)?;
    train_records(config, &train, &held)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub best_epoch: usize,
    pub trace: Vec<EpochStats>,
    /// Held-out evaluation of the selected parameters.
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub folds: Vec<FoldResult>,
    /// All held-out predictions evaluated together.
    pub pooled: EvalReport,
}

impl CvOutcome {
    /// Mean over folds of the held-out headline F1.
    pub fn mean_fold_f1(&self, task: Task) -> Option<f64> {
        let v: Vec<f64> = self.folds.iter().filter_map(|f| f.report.task_f1(task)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// k-fold cross-validation; `folds` restricts which folds are run.
pub fn cross_validate<T: Real>(
    config: &RunConfig,
    plan: &FoldPlan,
    dataset: &[ImageRecord],
    folds: Option<&[usize]>,
) -> Result<CvOutcome> {
    let all: Vec<usize> = (0..plan.fold_count).collect();
    let folds = folds.unwrap_or(&all);
    let mut results = Vec::new();
    let mut items = Vec::new();
    for &fold in folds {
        let (train, held) = split(plan, fold, dataset)?;
        let outcome = train_records::<T>(config, &train, &held)?;
        let samples = prepare_samples(&held, &config.preprocess(), &outcome.spec.tasks())?;
        let preds = predict_samples(&outcome.best, &outcome.spec, &samples, config.threshold, Some(fold), true)?;
        let report = evaluate_predictions(&preds, config.sigma, config.pr_averaging)?;
        items.extend(preds);
        results.push(FoldResult {
            fold,
            best_epoch: outcome.best_epoch,
            trace: outcome.trace,
            report,
        });
    }
    let pooled = evaluate_predictions(&items, config.sigma, config.pr_averaging)?;
    Ok(CvOutcome { folds: results, pooled })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub omega: f64,
    pub od_f1: f64,
    pub ex_f1: f64,
    pub mean_f1: f64,
}

/// Cross-validated task F1 of the two-decoder network for each omega.
pub fn sweep_omega<T: Real>(
    config: &RunConfig,
    plan: &FoldPlan,
    dataset: &[ImageRecord],
    grid: &[f64],
    folds: Option<&[usize]>,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || grid.iter().any(|w| !(0.0..=1.0).contains(w)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "omega grid must be strictly increasing within [0, 1], got {grid:?}"
        )));
    }
    let mut rows = Vec::new();
    for &omega in grid {
        let cfg = RunConfig { omega, ..config.clone() };
        let cv = cross_validate::<T>(&cfg, plan, dataset, folds)?;
        let od = cv.mean_fold_f1(Task::Od).unwrap_or(0.0);
        let ex = cv.mean_fold_f1(Task::Ex).unwrap_or(0.0);
        log::info!("omega {omega}: od_f1 {od:.4} ex_f1 {ex:.4}");
        rows.push(SweepRow {
            omega,
            od_f1: od,
            ex_f1: ex,
            mean_f1: (od + ex) / 2.0,
        });
    }
    Ok(rows)
}

/// Default omega grid: 0, 0.1, ..., 1.
pub fn default_omega_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
