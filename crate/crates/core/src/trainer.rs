//! Training loops, optimizers, memory accounting and the three-stage
//! early-bird pipeline.
//!
//! The pipeline runs:
//!
//! 1. search: train from the start weights, compute a magnitude mask after
//!    every epoch and feed it to the detector, stopping as soon as it fires;
//! 2. retrain: rewind to the start weights, apply the ticket and train the
//!    full epoch budget with masked weights frozen at zero;
//! 3. baseline: train the unpruned model from the same start weights for the
//!    same budget.
//!
//! Every stage shuffles with the run seed, so the retrain and baseline
//! stages see identical batch orders.

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PretrainSpec};
use crate::data::{self, Dataset, Split};
use crate::earlybird::{self, DetectorConfig, DetectorState, Outcome};
use crate::error::{Error, Result};
use crate::model::{checkpoint, ForwardOptions, Model, ModelConfig, Parameter};
use crate::pruning::{apply_mask, compute_mask, PruneMask, PruneScope};
use crate::rng::{self, Stream};
use crate::tensor::{Graph, Scalar};

/// Batch size used by [`evaluate`]; it does not affect results beyond rounding.
pub const EVAL_BATCH: usize = 256;

pub const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    VisionFullTrain,
    LanguageFinetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    #[serde(rename = "adamw")]
    AdamW {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adamw(lr: f64) -> Self {
        OptimizerConfig::AdamW {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::AdamW { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        // lr = 0 is allowed as a probe; negative or non-finite is not.
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {lr} must be finite and non-negative"
            )));
        }
        match *self {
            OptimizerConfig::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("momentum {momentum} outside [0, 1)")))
            }
            OptimizerConfig::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
                ..
            } if !((0.0..1.0).contains(&beta1)
                && (0.0..1.0).contains(&beta2)
                && eps > 0.0
                && weight_decay >= 0.0) =>
            {
                Err(Error::Config(
                    "adamw needs betas in [0, 1), eps > 0, weight_decay >= 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// What retraining starts from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rewind {
    /// The search stage's start weights.
    #[default]
    Start,
    /// A new random initialization, for comparison.
    Fresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Budget for the retrain and baseline stages.
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub p: f64,
    #[serde(default)]
    pub scope: PruneScope,
    /// Also bounds the search stage via `max_epochs`.
    pub detector: DetectorConfig,
    #[serde(default)]
    pub rewind: Rewind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("p = {} outside [0, 1]", self.p)));
        }
        self.optimizer.validate()?;
        self.detector.validate()
    }
}

/// Optimizer state: one slot pair per parameter, created lazily.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar = f32> {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update using each parameter's stored gradient. Parameters
    /// without a gradient are left alone.
    pub fn step(&mut self, params: &mut [Parameter<T>]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params
                .iter()
                .map(|p| vec![T::zero(); p.tensor.numel()])
                .collect();
            if matches!(self.config, OptimizerConfig::AdamW { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            if grad.len() != self.first[i].len() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("gradient of {} has wrong length", p.name),
                ));
            }
            let w = p.tensor.data_mut();
            match self.config {
                OptimizerConfig::Sgd { lr, momentum } => {
                    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
                    for ((w, g), v) in w.iter_mut().zip(&grad).zip(self.first[i].iter_mut()) {
                        *v = mu * *v + *g;
                        *w -= lr * *v;
                    }
                }
                OptimizerConfig::AdamW {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let decay = T::from_f64(1.0 - lr * weight_decay);
                    let c1 = T::from_f64(1.0 - beta1.powi(t));
                    let c2 = T::from_f64(1.0 - beta2.powi(t));
                    let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
                    let (lr, eps) = (T::from_f64(lr), T::from_f64(eps));
                    let one = T::one();
                    let slots = self.first[i].iter_mut().zip(self.second[i].iter_mut());
                    for ((w, &g), (m, v)) in w.iter_mut().zip(&grad).zip(slots) {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_distance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits` (row-major, one row per label) whose argmax is the label.
pub fn accuracy<T: Scalar>(logits: &[T], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    correct(logits, labels) as f64 / labels.len() as f64
}

fn correct<T: Scalar>(logits: &[T], labels: &[usize]) -> usize {
    let c = logits.len() / labels.len().max(1);
    logits
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Mean loss and accuracy over `indices`, without touching the model.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    indices: &[usize],
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::Domain("cannot evaluate on an empty dataset".into()));
    }
    let (mut loss, mut hits) = (0.0, 0usize);
    for chunk in indices.chunks(EVAL_BATCH) {
        let (batch, labels) = data.batch::<T>(chunk)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch)?;
        let l = g.cross_entropy(out.logits, &labels)?;
        loss += g.value(l)[0].as_f64() * chunk.len() as f64;
        hits += correct(g.value(out.logits), &labels);
    }
    let n = indices.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: hits as f64 / n,
    })
}

pub fn evaluate_split<T: Scalar>(
    model: &Model<T>,
    data: &Dataset,
    split: Split,
) -> Result<Evaluation> {
    evaluate(model, data, &data.indices(split))
}

/// One pass over the train split in the `(seed, epoch)` shuffled order.
///
/// Each batch runs forward, cross-entropy, backward and an optimizer step. If
/// the model carries an active mask, masked gradients are zeroed before the
/// step and masked weights re-zeroed after it. Non-finite values surface as
/// [`Error::Diverged`] tagged with `stage`.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    opt: &mut Optimizer<T>,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    stage: &str,
) -> Result<EpochMetrics> {
    let diverged = |detail: String| Error::Diverged {
        stage: stage.to_string(),
        epoch,
        detail,
    };
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Domain("train split is empty".into()));
    }
    let mut dropout = rng::stream_at(seed, Stream::Dropout, epoch as u32);
    let (mut loss_sum, mut hits) = (0.0, 0usize);
    for chunk in data::batches(&train, batch_size, seed, epoch) {
        let (batch, labels) = data.batch::<T>(&chunk)?;
        let mut g = Graph::new();
        let step = (|| {
            let out = model.forward_with(
                &mut g,
                &batch,
                ForwardOptions {
                    dropout_rng: Some(&mut dropout),
                    ..Default::default()
                },
            )?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            Ok::<_, Error>((out, loss))
        })();
        let (out, loss) = match step {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => {
                return Err(diverged(format!("non-finite value in {op}")))
            }
            Err(e) => return Err(e),
        };
        loss_sum += g.value(loss)[0].as_f64() * chunk.len() as f64;
        hits += correct(g.value(out.logits), &labels);
        let grads = match g.backward(loss) {
            Ok(gr) => gr,
            Err(Error::NonFinite { op }) => {
                return Err(diverged(format!("non-finite gradient in {op}")))
            }
            Err(e) => return Err(e),
        };
        for (p, v) in model.parameters_mut().iter_mut().zip(&out.params) {
            p.tensor.zero_grad();
            grads.accumulate_into(*v, &mut p.tensor)?;
        }
        model.mask_gradients();
        opt.step(model.parameters_mut())?;
        model.enforce_mask();
        if let Some(p) = model
            .parameters()
            .iter()
            .find(|p| p.tensor.data().iter().any(|v| !v.is_finite()))
        {
            return Err(diverged(format!("parameter {} became non-finite", p.name)));
        }
    }
    model.zero_grads();
    let n = train.len() as f64;
    let val = evaluate_split(model, data, Split::Val)?;
    Ok(EpochMetrics {
        epoch,
        train_loss: loss_sum / n,
        train_accuracy: hits as f64 / n,
        val_loss: val.loss,
        val_accuracy: val.accuracy,
        mask_distance: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub element_bytes: usize,
    pub total_parameters: usize,
    pub pruned_parameters: usize,
    /// Every parameter at full width.
    pub dense_bytes: usize,
    /// Unpruned parameters at full width.
    pub kept_payload_bytes: usize,
    /// One 4-byte index per kept element of each tensor that lost any element.
    pub index_overhead_bytes: usize,
    pub dense_mb: f64,
    pub pruned_mb: f64,
    /// `(kept_payload - dense) / dense * 100`; index overhead is not included.
    pub percent_change: f64,
}

/// `(pruned - dense) / dense * 100`.
pub fn percent_change(dense: f64, pruned: f64) -> f64 {
    (pruned - dense) / dense * 100.0
}

impl MemoryReport {
    /// From raw counts: `total` parameters overall and `(elements, pruned)`
    /// for every masked tensor.
    pub fn from_counts(total: usize, masked: &[(usize, usize)], element_bytes: usize) -> Self {
        let pruned: usize = masked.iter().map(|&(_, z)| z).sum();
        let index_elems: usize = masked
            .iter()
            .filter(|&&(_, z)| z > 0)
            .map(|&(n, z)| n - z)
            .sum();
        let dense_bytes = total * element_bytes;
        let kept_payload_bytes = (total - pruned) * element_bytes;
        MemoryReport {
            element_bytes,
            total_parameters: total,
            pruned_parameters: pruned,
            dense_bytes,
            kept_payload_bytes,
            index_overhead_bytes: 4 * index_elems,
            dense_mb: dense_bytes as f64 / BYTES_PER_MB,
            pruned_mb: kept_payload_bytes as f64 / BYTES_PER_MB,
            percent_change: if total == 0 {
                0.0
            } else {
                percent_change(dense_bytes as f64, kept_payload_bytes as f64)
            },
        }
    }
}

pub fn memory_report<T: Scalar>(model: &Model<T>, mask: &PruneMask) -> MemoryReport {
    let masked: Vec<(usize, usize)> = mask
        .entries()
        .iter()
        .map(|e| (e.keep.len(), e.pruned()))
        .collect();
    MemoryReport::from_counts(model.num_parameters(), &masked, T::DTYPE.width())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub stage: String,
    pub epoch: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistancePoint {
    pub epoch: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub epochs: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn to_csv(&self) -> String {
        earlybird::heatmap_csv(&self.epochs, &self.matrix)
    }
}

pub const HEATMAP_FILE: &str = "heatmap.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<Failure>,
    /// FNV-1a of the dataset, as 16 hex digits.
    pub dataset_checksum: String,
    pub start_checksum: f64,
    pub ticket_epoch: Option<usize>,
    /// False when the detector never fired and the final search mask was used.
    pub early: bool,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub baseline_epochs: usize,
    pub search: Vec<EpochMetrics>,
    pub retrain: Vec<EpochMetrics>,
    pub baseline: Vec<EpochMetrics>,
    pub distances: Vec<DistancePoint>,
    pub heatmap: Heatmap,
    pub heatmap_path: String,
    pub memory: Option<MemoryReport>,
    pub baseline_accuracy: Option<f64>,
    pub pruned_accuracy: Option<f64>,
    /// `pruned_accuracy - baseline_accuracy`.
    pub accuracy_delta: Option<f64>,
}

impl RunReport {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from(
            "stage,epoch,train_loss,train_accuracy,val_loss,val_accuracy,mask_distance\n",
        );
        for (stage, rows) in [
            ("search", &self.search),
            ("retrain", &self.retrain),
            ("baseline", &self.baseline),
        ] {
            for m in rows {
                let d = m.mask_distance.map(|d| d.to_string()).unwrap_or_default();
                s += &format!(
                    "{stage},{},{},{},{},{},{d}\n",
                    m.epoch, m.train_loss, m.train_accuracy, m.val_loss, m.val_accuracy
                );
            }
        }
        s
    }

    pub fn distances_csv(&self) -> String {
        let series: Vec<(usize, f64)> = self
            .distances
            .iter()
            .map(|d| (d.epoch, d.distance))
            .collect();
        earlybird::distances_csv(&series)
    }
}

/// Everything a pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: RunReport,
    /// Search-stage masks, one per epoch.
    pub masks: Vec<PruneMask>,
    pub start: Model,
    pub ticket: Option<PruneMask>,
    pub retrained: Option<Model>,
    pub baseline: Option<Model>,
}

/// Start weights for a run: a fresh init, or the pretrained model for
/// fine-tuning.
pub fn start_model(exp: &ExperimentConfig) -> Result<Model> {
    match (&exp.pretrained, exp.train.mode) {
        (None, _) | (_, TrainMode::VisionFullTrain) => Model::build(&exp.model, exp.train.seed),
        (Some(PretrainSpec::Checkpoint { path }), _) => {
            let (m, _) = checkpoint::load::<f32>(path)?;
            if m.config() != &exp.model {
                return Err(Error::Config(format!(
                    "checkpoint {} was built for a different model config",
                    path.display()
                )));
            }
            Ok(m)
        }
        (Some(spec @ PretrainSpec::Warmup { seed, epochs, .. }), _) => {
            let task = spec.warmup_task(&exp.data)?.expect("warm-up spec");
            let data = data::gen_text(&task)?;
            warm_up(&exp.model, &data, &exp.train, *seed, *epochs)
        }
    }
}

/// Classification warm-up standing in for pretraining.
pub fn warm_up(
    config: &ModelConfig,
    data: &Dataset,
    train: &TrainConfig,
    seed: u64,
    epochs: usize,
) -> Result<Model> {
    let mut model = Model::build_with_stream(config, seed, Stream::Warmup)?;
    let mut opt = Optimizer::new(train.optimizer);
    for epoch in 1..=epochs {
        train_epoch(
            &mut model,
            data,
            &mut opt,
            train.batch_size,
            seed,
            epoch,
            "warmup",
        )?;
    }
    Ok(model)
}

/// Loads data and start weights, then runs all three stages.
pub fn run_pipeline(exp: &ExperimentConfig) -> Result<PipelineOutput> {
    exp.validate()?;
    let data = exp.load_data()?;
    let start = start_model(exp)?;
    run_stages(exp, &data, start)
}

/// Runs search, retrain and baseline from `start`. Divergence does not
/// return an error: the output carries a report with `status = diverged`
/// and whatever the earlier stages produced.
pub fn run_stages(exp: &ExperimentConfig, data: &Dataset, start: Model) -> Result<PipelineOutput> {
    exp.train.validate()?;
    let mut out = PipelineOutput {
        report: RunReport {
            config: exp.clone(),
            status: RunStatus::Ok,
            failure: None,
            dataset_checksum: format!("{:016x}", data.checksum()),
            start_checksum: start.checksum(),
            ticket_epoch: None,
            early: false,
            search_epochs: 0,
            retrain_epochs: 0,
            baseline_epochs: 0,
            search: Vec::new(),
            retrain: Vec::new(),
            baseline: Vec::new(),
            distances: Vec::new(),
            heatmap: Heatmap {
                epochs: Vec::new(),
                matrix: Vec::new(),
            },
            heatmap_path: HEATMAP_FILE.to_string(),
            memory: None,
            baseline_accuracy: None,
            pruned_accuracy: None,
            accuracy_delta: None,
        },
        masks: Vec::new(),
        start,
        ticket: None,
        retrained: None,
        baseline: None,
    };
    match stages(exp, data, &mut out) {
        Ok(()) => {}
        Err(Error::Diverged {
            stage,
            epoch,
            detail,
        }) => {
            log::warn!(
                "run {} diverged in {stage} at epoch {epoch}: {detail}",
                exp.run_id
            );
            out.report.status = RunStatus::Diverged;
            out.report.failure = Some(Failure {
                stage,
                epoch,
                detail,
            });
        }
        Err(e) => return Err(e),
    }
    Ok(out)
}

fn stages(exp: &ExperimentConfig, data: &Dataset, out: &mut PipelineOutput) -> Result<()> {
    let tc = &exp.train;
    let train_stage = |model: &mut Model, name: &str, rows: &mut Vec<EpochMetrics>| -> Result<()> {
        let mut opt = Optimizer::new(tc.optimizer);
        for epoch in 1..=tc.epochs {
            rows.push(train_epoch(
                model,
                data,
                &mut opt,
                tc.batch_size,
                tc.seed,
                epoch,
                name,
            )?);
        }
        Ok(())
    };

    // Search.
    let mut model = out.start.clone();
    let mut opt = Optimizer::new(tc.optimizer);
    let mut detector = DetectorState::new(tc.detector)?;
    for epoch in 1..=tc.detector.max_epochs {
        let mut metrics = train_epoch(
            &mut model,
            data,
            &mut opt,
            tc.batch_size,
            tc.seed,
            epoch,
            "search",
        )?;
        let mask = compute_mask(&model, tc.p, tc.scope)?.with_epoch(epoch);
        let found = matches!(detector.observe(epoch, mask)?, Outcome::Found { .. });
        metrics.mask_distance =
            (epoch >= 2).then(|| *detector.distances().last().expect("distance"));
        log::info!(
            "{} search epoch {epoch}: val_acc {:.4} distance {:?}",
            exp.run_id,
            metrics.val_accuracy,
            metrics.mask_distance
        );
        out.report.search.push(metrics);
        out.report.search_epochs = epoch;
        if found {
            break;
        }
    }
    out.masks = detector.masks().to_vec();
    out.report.distances = detector
        .distance_series()
        .into_iter()
        .map(|(epoch, distance)| DistancePoint { epoch, distance })
        .collect();
    out.report.heatmap = Heatmap {
        epochs: out.masks.iter().map(PruneMask::epoch).collect(),
        matrix: detector.heatmap()?,
    };
    let ticket = match detector.outcome() {
        Outcome::Found {
            ticket_epoch,
            ticket,
        } => {
            out.report.ticket_epoch = Some(*ticket_epoch);
            out.report.early = true;
            ticket.clone()
        }
        Outcome::Searching => out.masks.last().expect("at least one search epoch").clone(),
    };
    out.ticket = Some(ticket.clone());

    // Retrain.
    let mut pruned = match tc.rewind {
        Rewind::Start => out.start.clone(),
        Rewind::Fresh => Model::build_with_stream(&exp.model, tc.seed, Stream::FreshInit)?,
    };
    apply_mask(&mut pruned, &ticket)?;
    out.report.memory = Some(memory_report(&pruned, &ticket));
    let mut rows = Vec::new();
    let res = train_stage(&mut pruned, "retrain", &mut rows);
    out.report.retrain_epochs = rows.len();
    out.report.retrain = rows;
    res?;
    out.report.pruned_accuracy = out.report.retrain.last().map(|m| m.val_accuracy);
    out.retrained = Some(pruned);

    // Baseline.
    let mut baseline = out.start.clone();
    let mut rows = Vec::new();
    let res = train_stage(&mut baseline, "baseline", &mut rows);
    out.report.baseline_epochs = rows.len();
    out.report.baseline = rows;
    res?;
    out.report.baseline_accuracy = out.report.baseline.last().map(|m| m.val_accuracy);
    out.baseline = Some(baseline);

    if let (Some(p), Some(b)) = (out.report.pruned_accuracy, out.report.baseline_accuracy) {
        out.report.accuracy_delta = Some(p - b);
    }
    Ok(())
}
