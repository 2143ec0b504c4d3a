//! Training with best-validation checkpointing, evaluation metrics and cross-grid sweeps.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{balanced_batches, records_in, JpegPolicy, ManifestRecord, PreprocPolicy, ShuffledBatches, Split};
use crate::error::{Error, Result};
use crate::imagecore::PatchSpec;
use crate::model::{ArchConfig, Head, MiniXception, Targets};
use crate::nn::{adam_step, AdamConfig};
use crate::persist::{write_atomic, EpochRecord, ModelCheckpoint, TrainingMeta};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub val_batches: usize,
    pub test_batches_cap: usize,
    pub batch_size: usize,
    /// Draw `batch_size / classes` records of every class per batch.
    pub balanced: bool,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop once validation accuracy reaches this value.
    pub target_val_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batches_per_epoch: 100,
            val_batches: 50,
            test_batches_cap: 2000,
            batch_size: 64,
            balanced: false,
            adam: AdamConfig::default(),
            seed: 0,
            target_val_accuracy: None,
        }
    }
}

impl TrainConfig {
    /// Ten records per class per batch.
    pub fn attribution(classes: usize) -> Self {
        Self {
            batch_size: 10 * classes,
            balanced: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches_per_epoch == 0 || self.val_batches == 0 || self.test_batches_cap == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(format!("training caps must be positive: {self:?}")));
        }
        self.adam.validate()
    }
}

/// Maps a record label to a target index under the checkpoint's class list.
///
/// Detection treats the first class as authentic and every other label as generated, so a
/// held-out generator family is scored without being known at training time.
pub fn target_index(head: Head, classes: &[String], label: &str) -> Result<usize> {
    match head {
        Head::Detection => Ok(usize::from(classes.first().is_none_or(|neg| neg != label))),
        Head::Attribution(_) => classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownClass(label.into())),
    }
}

/// Detection decides at probability 0.5; attribution takes the argmax, lowest index on ties.
pub fn decide(head: Head, probs: &[f64]) -> usize {
    match head {
        Head::Detection => usize::from(probs[0] >= 0.5),
        Head::Attribution(_) => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            best
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// Rows are ground truth, columns are predictions.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let c = classes.len();
        Self {
            classes,
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn from_pairs(classes: Vec<String>, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut m = Self::new(classes);
        for (truth, pred) in pairs {
            m.record(truth, pred)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        let c = self.classes.len();
        if truth >= c || pred >= c {
            return Err(Error::InvalidArgument(format!("class index out of range for {c} classes")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes.len()).map(|i| self.counts[i][i]).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// Row-normalized diagonal; `None` for classes absent from the evaluated set.
    pub fn recall(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    /// Mean recall over the classes present.
    pub fn equal_prior_accuracy(&self) -> f64 {
        let rates: Vec<f64> = self.recall().into_iter().flatten().collect();
        equal_prior_accuracy(&rates)
    }

    /// Row-normalized matrix for display.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n = row.iter().sum::<u64>().max(1) as f64;
                row.iter().map(|&v| v as f64 / n).collect()
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let width = self.classes.iter().map(String::len).max().unwrap_or(4).max(5);
        let mut out = format!("{:width$}", "");
        for c in &self.classes {
            let _ = write!(out, " {c:>width$}");
        }
        out.push('\n');
        for (name, row) in self.classes.iter().zip(self.normalized()) {
            let _ = write!(out, "{name:width$}");
            for v in row {
                let _ = write!(out, " {v:>width$.3}");
            }
            out.push('\n');
        }
        out
    }
}

/// Mean of per-class correct rates: accuracy when every class is equally likely.
pub fn equal_prior_accuracy(diagonal: &[f64]) -> f64 {
    if diagonal.is_empty() {
        return 0.0;
    }
    diagonal.iter().sum::<f64>() / diagonal.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub equal_prior_accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
    pub evaluated: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix, config_fingerprint: String) -> Self {
        Self {
            accuracy: confusion.accuracy(),
            equal_prior_accuracy: confusion.equal_prior_accuracy(),
            per_class_recall: confusion.recall(),
            evaluated: confusion.total() as usize,
            confusion,
            config_fingerprint,
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &serde_json::to_vec_pretty(self)?)
    }
}

/// Records scored per forward call during evaluation.
const EVAL_CHUNK: usize = 32;

/// Head probabilities for each record, in input order.
pub fn predict(
    model: &MiniXception<f32>,
    records: &[ManifestRecord],
    policy: &PreprocPolicy,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_CHUNK) {
        let feats = chunk
            .par_iter()
            .map(|r| policy.record_features(r, 0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = feats.iter().collect();
        let logits = model.forward(&refs)?;
        out.extend(model.probabilities(&logits));
    }
    Ok(out)
}

/// Scores at most `limit` records (in order) and tabulates the confusion matrix.
pub fn evaluate_model(
    model: &MiniXception<f32>,
    classes: &[String],
    records: &[ManifestRecord],
    policy: &PreprocPolicy,
    limit: usize,
) -> Result<EvalReport> {
    Ok(evaluate_with_loss(model, classes, records, policy, limit)?.0)
}

/// As [`evaluate_model`], also returning the mean cross-entropy of the true targets.
fn evaluate_with_loss(
    model: &MiniXception<f32>,
    classes: &[String],
    records: &[ManifestRecord],
    policy: &PreprocPolicy,
    limit: usize,
) -> Result<(EvalReport, f64)> {
    let head = model.config().head;
    let records = &records[..records.len().min(limit)];
    if records.is_empty() {
        return Err(Error::Empty("no records to evaluate".into()));
    }
    let truths = records
        .iter()
        .map(|r| target_index(head, classes, &r.label))
        .collect::<Result<Vec<_>>>()?;
    let probs = predict(model, records, policy)?;
    let loss = truths
        .iter()
        .zip(&probs)
        .map(|(&t, p)| {
            let p_true = match head {
                Head::Detection if t == 1 => p[0],
                Head::Detection => 1.0 - p[0],
                Head::Attribution(_) => p[t],
            };
            -p_true.max(1e-300).ln()
        })
        .sum::<f64>()
        / truths.len() as f64;
    let pairs = truths.into_iter().zip(probs.iter().map(|p| decide(head, p)));
    let confusion = ConfusionMatrix::from_pairs(classes.to_vec(), pairs)?;
    Ok((EvalReport::from_confusion(confusion, policy.fingerprint()), loss))
}

/// Evaluates a checkpoint on `min(records, test_batches_cap * batch_size)` records.
pub fn evaluate(
    ckpt: &ModelCheckpoint,
    records: &[ManifestRecord],
    policy: &PreprocPolicy,
    batch_size: usize,
    test_batches_cap: usize,
) -> Result<EvalReport> {
    let model = ckpt.to_model()?;
    evaluate_model(&model, &ckpt.classes, records, policy, batch_size.saturating_mul(test_batches_cap))
}

fn check_classes(head: Head, classes: &[String]) -> Result<()> {
    let expected = match head {
        Head::Detection => 2,
        Head::Attribution(c) => c,
    };
    if classes.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{head:?} head needs {expected} class names, got {classes:?}"
        )));
    }
    Ok(())
}

/// Trains on the `train` split, validates on the `val` split after every epoch and returns
/// the parameters with the highest validation accuracy along with the full history.
/// Equal accuracies go to the epoch with the lower validation loss.
pub fn train(
    mut model: MiniXception<f32>,
    classes: &[String],
    records: &[ManifestRecord],
    policy: &PreprocPolicy,
    cfg: &TrainConfig,
) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    policy.validate()?;
    let head = model.config().head;
    check_classes(head, classes)?;
    let train_set = records_in(records, Split::Train);
    let val_set = records_in(records, Split::Val);
    let mut meta = TrainingMeta {
        seed: cfg.seed,
        ..TrainingMeta::default()
    };
    if cfg.epochs == 0 {
        return ModelCheckpoint::from_model(&model, classes.to_vec(), policy.clone(), meta);
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training needs records in both the train and val splits".into()));
    }
    let targets = train_set
        .iter()
        .map(|r| target_index(head, classes, &r.label))
        .collect::<Result<Vec<_>>>()?;

    let batch_seed = derive_seed(cfg.seed, "batches");
    let mut batches: Box<dyn Iterator<Item = Vec<usize>>> = if cfg.balanced {
        let per_class = cfg.batch_size / classes.len();
        if per_class == 0 || per_class * classes.len() != cfg.batch_size {
            return Err(Error::InvalidArgument(format!(
                "balanced batch size {} is not a multiple of {} classes",
                cfg.batch_size,
                classes.len()
            )));
        }
        Box::new(balanced_batches(&train_set, per_class, batch_seed)?)
    } else {
        Box::new(ShuffledBatches::new(train_set.len(), cfg.batch_size, batch_seed)?)
    };

    let mut adam = cfg.adam;
    let mut best: Option<(f64, f64, Vec<_>)> = None;
    let val_limit = cfg.val_batches.saturating_mul(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for b in 0..cfg.batches_per_epoch {
            let idx = batches.next().expect("batch streams are endless");
            let feats = idx
                .par_iter()
                .map(|&i| policy.record_features(&train_set[i], epoch as u64))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<_> = feats.iter().collect();
            let out = match head {
                Head::Detection => {
                    let labels: Vec<bool> = idx.iter().map(|&i| targets[i] == 1).collect();
                    model.loss_and_grads(&refs, Targets::Binary(&labels))?
                }
                Head::Attribution(_) => {
                    let labels: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
                    model.loss_and_grads(&refs, Targets::Classes(&labels))?
                }
            };
            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss: out.loss,
                });
            }
            loss_sum += out.loss;
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate(&out.grads)?;
            adam_step(params, &mut adam)?;
        }
        let (report, val_loss) = evaluate_with_loss(&model, classes, &val_set, policy, val_limit)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / cfg.batches_per_epoch as f64,
            val_accuracy: report.accuracy,
            val_loss,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_acc {:.4} val_loss {:.5} ({:.1}s)",
            record.train_loss,
            record.val_accuracy,
            record.val_loss,
            started.elapsed().as_secs_f64()
        );
        meta.history.push(record);
        meta.epochs_run = epoch;
        let improved = best.as_ref().is_none_or(|(acc, loss, _)| {
            report.accuracy > *acc || (report.accuracy == *acc && val_loss < *loss)
        });
        if improved {
            let weights = model.params().params().iter().map(|p| p.weights.clone()).collect();
            best = Some((report.accuracy, val_loss, weights));
            meta.best_epoch = Some(epoch);
            meta.best_val_accuracy = Some(report.accuracy);
        }
        if cfg.target_val_accuracy.is_some_and(|t| report.accuracy >= t) {
            log::info!("validation target reached after epoch {epoch}");
            break;
        }
    }
    if let Some((_, _, weights)) = best {
        model.params_mut().load_weights(weights)?;
    }
    ModelCheckpoint::from_model(&model, classes.to_vec(), policy.clone(), meta)
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_acc\n");
    for r in history {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_accuracy);
    }
    out
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    write_atomic(path.as_ref(), history_csv(history).as_bytes())
}

/// The preprocessing dimension a sweep varies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "lowercase")]
pub enum SweepAxis {
    Patch(Vec<usize>),
    Jpeg(Vec<JpegPolicy>),
}

impl SweepAxis {
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Patch(v) => v.len(),
            SweepAxis::Jpeg(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Vec<String> {
        match self {
            SweepAxis::Patch(v) => v.iter().map(|s| s.to_string()).collect(),
            SweepAxis::Jpeg(v) => v.iter().map(|q| q.to_string()).collect(),
        }
    }

    fn apply(&self, base: &PreprocPolicy, i: usize) -> Result<PreprocPolicy> {
        let mut p = base.clone();
        match self {
            SweepAxis::Patch(v) => p.patch = Some(PatchSpec::tiled(v[i])?),
            SweepAxis::Jpeg(v) => p.jpeg = v[i].clone(),
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    /// `cells[train][test]`.
    pub cells: Vec<Vec<EvalReport>>,
    pub best_val_accuracy: Vec<Option<f64>>,
}

impl SweepResult {
    pub fn accuracy_matrix(&self) -> Vec<Vec<f64>> {
        self.cells
            .iter()
            .map(|row| row.iter().map(|r| r.accuracy).collect())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let labels = self.axis.labels();
        let mut out = String::from("train\\test");
        for l in &labels {
            let _ = write!(out, " {l:>8}");
        }
        out.push('\n');
        for (l, row) in labels.iter().zip(self.accuracy_matrix()) {
            let _ = write!(out, "{l:>10}");
            for v in row {
                let _ = write!(out, " {v:>8.4}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one model per axis value and evaluates each against every axis value on the
/// `test` split.
pub fn sweep_grid(
    axis: &SweepAxis,
    records: &[ManifestRecord],
    base_policy: &PreprocPolicy,
    arch: &ArchConfig,
    classes: &[String],
    cfg: &TrainConfig,
) -> Result<SweepResult> {
    if axis.is_empty() {
        return Err(Error::Empty("sweep axis has no values".into()));
    }
    let test_set = records_in(records, Split::Test);
    let mut cells = Vec::with_capacity(axis.len());
    let mut best = Vec::with_capacity(axis.len());
    for i in 0..axis.len() {
        let train_policy = axis.apply(base_policy, i)?;
        log::info!("sweep: training with {}", train_policy.describe());
        let model = MiniXception::build(arch.clone(), cfg.seed)?;
        let ckpt = train(model, classes, records, &train_policy, cfg)?;
        best.push(ckpt.meta.best_val_accuracy);
        let mut row = Vec::with_capacity(axis.len());
        for j in 0..axis.len() {
            let test_policy = axis.apply(base_policy, j)?;
            let report = evaluate(&ckpt, &test_set, &test_policy, cfg.batch_size, cfg.test_batches_cap)?;
            log::info!("sweep: train {} test {} -> {:.4}", axis.labels()[i], axis.labels()[j], report.accuracy);
            row.push(report);
        }
        cells.push(row);
    }
    Ok(SweepResult {
        axis: axis.clone(),
        cells,
        best_val_accuracy: best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictor_gives_identity() {
        let pairs = (0..60).map(|i| (i % 6, i % 6));
        let m = ConfusionMatrix::from_pairs(names(6), pairs).unwrap();
        let r = EvalReport::from_confusion(m, String::new());
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.equal_prior_accuracy, 1.0);
        for (i, row) in r.confusion.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 10 } else { 0 });
            }
        }
    }

    #[test]
    fn constant_predictor_hits_chance() {
        let pairs = (0..60).map(|i| (i % 6, 2));
        let m = ConfusionMatrix::from_pairs(names(6), pairs).unwrap();
        assert!((m.equal_prior_accuracy() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.row_sums(), vec![10; 6]);
        assert_eq!(m.total(), 60);
    }

    #[test]
    fn equal_prior_ignores_class_imbalance() {
        // 90 of class 0 all right, 10 of class 1 all wrong.
        let pairs = (0..90).map(|_| (0, 0)).chain((0..10).map(|_| (1, 0)));
        let m = ConfusionMatrix::from_pairs(names(2), pairs).unwrap();
        assert!((m.accuracy() - 0.9).abs() < 1e-15);
        assert!((m.equal_prior_accuracy() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn equal_prior_is_the_diagonal_mean() {
        let diag = [0.826, 0.933, 0.959, 0.981, 0.728, 0.659];
        assert_eq!(format!("{:.4}", equal_prior_accuracy(&diag)), "0.8477");
        assert_eq!(equal_prior_accuracy(&[]), 0.0);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(decide(Head::Attribution(3), &[0.4, 0.4, 0.2]), 0);
        assert_eq!(decide(Head::Attribution(3), &[0.2, 0.4, 0.4]), 1);
        assert_eq!(decide(Head::Detection, &[0.5]), 1);
        assert_eq!(decide(Head::Detection, &[0.4999]), 0);
    }

    #[test]
    fn label_mapping() {
        let cls = vec!["real".to_string(), "gan".to_string()];
        assert_eq!(target_index(Head::Detection, &cls, "real").unwrap(), 0);
        assert_eq!(target_index(Head::Detection, &cls, "spade").unwrap(), 1);
        assert_eq!(target_index(Head::Attribution(2), &cls, "gan").unwrap(), 1);
        assert!(matches!(target_index(Head::Attribution(2), &cls, "spade"), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn recall_skips_absent_classes() {
        let m = ConfusionMatrix::from_pairs(names(3), [(0, 0), (0, 1), (2, 2)]).unwrap();
        assert_eq!(m.recall(), vec![Some(0.5), None, Some(1.0)]);
        assert!((m.equal_prior_accuracy() - 0.75).abs() < 1e-15);
        assert!(m.to_text().contains("0.500"));
    }

    #[test]
    fn history_csv_format() {
        let h = vec![EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_accuracy: 0.75,
            val_loss: 0.5,
        }];
        assert_eq!(history_csv(&h), "epoch,train_loss,val_acc\n1,0.5,0.75\n");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            val_batches: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::attribution(6).batch_size, 60);
    }
}
