//! Mini-batch training with early stopping on validation accuracy.

use std::borrow::Cow;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, normalize_sample, Sample, UndersampleRule};
use crate::error::{Error, Result};
use crate::features::Class;
use crate::losses::{adaptive_weights, cross_entropy, softmax_probs, LossFn, LossKind, LossSpec};
use crate::nn::{self, AdamConfig, AdamState, AdamStep, Architecture, Checkpoint, LstmConfig, MlpConfig, Model, ModelKind};
use crate::par::{self, Parallelism};
use crate::rng::{self, Stream};
use crate::{FEATURE_DIM, NUM_CLASSES, WINDOW_LEN};

/// Run configuration. Serialized as a flat TOML key-value file; missing
/// keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub loss: LossKind,
    /// Weights for classes -1, 0, +1 (weighted loss).
    pub class_weights: [f64; NUM_CLASSES],
    pub focal_lambda: f64,
    /// Class counts for the sensitive loss; taken from the training split
    /// when absent.
    pub sensitive_counts: Option<[u64; NUM_CLASSES]>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub early_stop_patience: usize,
    pub early_stop_metric: StopMetric,
    pub max_epochs: usize,
    pub seed: u64,
    pub normalize: bool,
    pub undersample: bool,
    /// Drop this fraction of class 0 each epoch instead of balancing it to
    /// the mean minority count.
    pub undersample_drop_fraction: Option<f64>,
    pub fee: f64,
    pub horizon: usize,
    pub warmup: usize,
    pub mlp_hidden: Vec<usize>,
    pub negative_slope: f64,
    pub output_activation: bool,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Global-norm gradient clip for the LSTM.
    pub lstm_grad_clip: Option<f64>,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Mlp,
            loss: LossKind::Plain,
            class_weights: [8.0, 1.0, 8.0],
            focal_lambda: 2.0,
            sensitive_counts: None,
            batch_size: 512,
            learning_rate: 1e-4,
            early_stop_patience: 10,
            early_stop_metric: StopMetric::Accuracy,
            max_epochs: 100,
            seed: 0,
            normalize: false,
            undersample: false,
            undersample_drop_fraction: None,
            fee: 1e-4,
            horizon: crate::DEFAULT_HORIZON,
            warmup: crate::DEFAULT_HORIZON,
            mlp_hidden: vec![64, 64],
            negative_slope: 0.01,
            output_activation: true,
            lstm_hidden: 64,
            lstm_layers: 1,
            lstm_grad_clip: Some(5.0),
            parallelism: Parallelism::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::Config("early_stop_patience must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning_rate {}", self.learning_rate)));
        }
        if self.fee.is_nan() || self.fee < 0.0 {
            return Err(Error::Config(format!("fee must be >= 0, got {}", self.fee)));
        }
        if let Some(f) = self.undersample_drop_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("undersample_drop_fraction must be in [0, 1], got {f}")));
            }
        }
        self.loss_spec().validate()?;
        self.architecture().validate()
    }

    pub fn loss_spec(&self) -> LossSpec {
        match self.loss {
            LossKind::Plain => LossSpec::Plain,
            LossKind::Weighted => LossSpec::Weighted { class_weights: self.class_weights },
            LossKind::Sensitive => LossSpec::Sensitive { class_counts: self.sensitive_counts },
            LossKind::Focal => LossSpec::Focal { lambda: self.focal_lambda },
            LossKind::Adaptive => LossSpec::Adaptive { accuracies: [1.0 / NUM_CLASSES as f64; NUM_CLASSES] },
        }
    }

    pub fn undersample_rule(&self) -> UndersampleRule {
        match self.undersample_drop_fraction {
            Some(fraction) => UndersampleRule::DropFraction { fraction },
            None => UndersampleRule::BalanceToMinorityMean,
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.model {
            ModelKind::Mlp => {
                let mut structure = vec![WINDOW_LEN * FEATURE_DIM];
                structure.extend(&self.mlp_hidden);
                structure.push(NUM_CLASSES);
                Architecture::Mlp(MlpConfig {
                    structure,
                    negative_slope: self.negative_slope,
                    output_activation: self.output_activation,
                })
            }
            ModelKind::Lstm => Architecture::Lstm(LstmConfig {
                hidden: self.lstm_hidden,
                layers: self.lstm_layers,
                ..LstmConfig::standard()
            }),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

/// Validation score that early stopping tracks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// Overall accuracy.
    #[default]
    Accuracy,
    /// Mean per-class recall.
    BalancedAccuracy,
}

impl StopMetric {
    pub fn score(self, eval: &Evaluation) -> f64 {
        match self {
            StopMetric::Accuracy => eval.accuracy,
            StopMetric::BalancedAccuracy => eval.balanced_accuracy,
        }
    }
}

/// 3x3 counts, rows = true class, columns = predicted class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix(pub [[u64; NUM_CLASSES]; NUM_CLASSES]);

impl ConfusionMatrix {
    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.0[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.0[class].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..NUM_CLASSES).map(|c| self.0[c][c]).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// Recall per class; `None` for classes absent from the split.
    pub fn recall(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|c| {
            let n = self.row_total(c);
            (n > 0).then(|| self.0[c][c] as f64 / n as f64)
        })
    }

    /// Mean recall over the classes present.
    pub fn balanced_accuracy(&self) -> f64 {
        let present: Vec<f64> = self.recall().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

impl std::fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "true\\pred {:>8} {:>8} {:>8}", "-1", "0", "+1")?;
        for c in Class::ALL {
            let row = &self.0[c.index()];
            writeln!(f, "{:>9} {:>8} {:>8} {:>8}", c.to_string(), row[0], row[1], row[2])?;
        }
        Ok(())
    }
}

/// Prediction quality on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub samples: u64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub class_accuracy: [Option<f64>; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
    /// Mean cross-entropy of the model's probabilities.
    pub cross_entropy: f64,
}

impl Evaluation {
    pub fn from_confusion(confusion: ConfusionMatrix, cross_entropy: f64) -> Self {
        Evaluation {
            samples: confusion.total(),
            accuracy: confusion.accuracy(),
            balanced_accuracy: confusion.balanced_accuracy(),
            class_accuracy: confusion.recall(),
            confusion,
            cross_entropy,
        }
    }

    /// Mean recall of classes -1 and +1.
    pub fn minority_recall(&self) -> f64 {
        let r = self.class_accuracy;
        (r[0].unwrap_or(0.0) + r[2].unwrap_or(0.0)) / 2.0
    }
}

/// Argmax predictions of `model` over `samples`.
///
/// Windows are z-scored first when `normalize` is set.
pub fn validate(model: &Model, samples: &[Sample], normalize: bool, mode: Parallelism) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs = par::map_slice(mode, samples, |s| -> Result<(usize, usize, f64)> {
        let logits = if normalize {
            model.forward(&normalize_sample(s).window)?
        } else {
            model.forward(&s.window)?
        };
        let y = s.label.index();
        Ok((y, nn::argmax(&logits), cross_entropy(&softmax_probs(&logits), y)))
    });
    let mut cm = ConfusionMatrix::default();
    let mut ce = 0.0;
    for o in outputs {
        let (y, pred, l) = o?;
        cm.add(y, pred);
        ce += l;
    }
    Ok(Evaluation::from_confusion(cm, ce / samples.len() as f64))
}

/// Tracks the best validation accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None }
    }

    /// Records the accuracy of `epoch`. Only a strict improvement resets
    /// the patience counter.
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if accuracy <= best => {}
            _ => {
                self.best = Some((epoch, accuracy));
                return StopDecision::Improved;
            }
        }
        let (best_epoch, _) = self.best.expect("set above");
        if epoch - best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|b| b.0)
    }

    pub fn best_accuracy(&self) -> Option<f64> {
        self.best.map(|b| b.1)
    }
}

/// One line of the metrics file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_samples: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_balanced_accuracy: f64,
    pub val_class_accuracy: [Option<f64>; NUM_CLASSES],
    pub confusion: ConfusionMatrix,
    /// Class weights in effect during the epoch (weighted and adaptive).
    pub class_weights: Option<[f64; NUM_CLASSES]>,
    pub skipped_steps: usize,
    /// Not written to the metrics file.
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Equality ignores `wall_time`.
impl PartialEq for EpochReport {
    fn eq(&self, o: &Self) -> bool {
        self.epoch == o.epoch
            && self.train_loss.to_bits() == o.train_loss.to_bits()
            && self.train_samples == o.train_samples
            && self.val_loss.to_bits() == o.val_loss.to_bits()
            && self.val_accuracy == o.val_accuracy
            && self.val_balanced_accuracy == o.val_balanced_accuracy
            && self.val_class_accuracy == o.val_class_accuracy
            && self.confusion == o.confusion
            && self.class_weights == o.class_weights
            && self.skipped_steps == o.skipped_steps
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation accuracy.
    pub best: Checkpoint,
    pub reports: Vec<EpochReport>,
    pub stopped_early: bool,
    pub loss_spec: LossSpec,
}

impl TrainOutcome {
    pub fn best_report(&self) -> &EpochReport {
        &self.reports[self.best.epoch as usize]
    }
}

/// Trains on `train`, validating on `val` after every epoch.
pub fn train(config: &TrainConfig, train: &[Sample], val: &[Sample]) -> Result<TrainOutcome> {
    if val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let val_norm: Cow<[Sample]> = if config.normalize {
        Cow::Owned(par::map_slice(config.parallelism, val, normalize_sample))
    } else {
        Cow::Borrowed(val)
    };
    let mode = config.parallelism;
    train_with_validator(config, train, |model, _| validate(model, &val_norm, false, mode))
}

/// Like [`train`] with a caller-supplied validation step, called once per
/// epoch with the current model and the 0-based epoch index.
pub fn train_with_validator<F>(config: &TrainConfig, train: &[Sample], mut validator: F) -> Result<TrainOutcome>
where
    F: FnMut(&Model, usize) -> Result<Evaluation>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mode = config.parallelism;
    let train: Cow<[Sample]> = if config.normalize {
        Cow::Owned(par::map_slice(mode, train, normalize_sample))
    } else {
        Cow::Borrowed(train)
    };
    let labels: Vec<Class> = train.iter().map(|s| s.label).collect();
    let counts = dataset::class_counts(&labels).map(|c| c as u64);
    let loss_spec = config.loss_spec();
    let mut loss_fn = loss_spec.resolve(counts);

    let mut model = Model::new(config.architecture(), config.seed)?;
    let mut adam = AdamState::new(model.params.len(), AdamConfig::default());
    let clip = match model.kind() {
        ModelKind::Lstm => config.lstm_grad_clip,
        ModelKind::Mlp => None,
    };

    let mut stopper = EarlyStopping::new(config.early_stop_patience);
    let mut best = model.clone();
    let mut reports = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = if config.undersample {
            dataset::undersample_epoch(&labels, config.seed, epoch, config.undersample_rule())
        } else {
            (0..train.len()).collect()
        };
        order.shuffle(&mut rng::derived(config.seed, Stream::Shuffle, epoch as u64));

        let mut loss_sum = 0.0;
        let mut skipped = 0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| train[i].window.as_slice()).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i].index()).collect();
            let (loss, mut grad) = model.loss_and_grad(&inputs, &targets, &loss_fn, mode)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("loss {loss} with {loss_fn:?} over {} samples", batch.len()),
                });
            }
            loss_sum += loss * batch.len() as f64;
            if let Some(max_norm) = clip {
                nn::clip_global_norm(&mut grad, max_norm);
            }
            if adam.update(&mut model.params, &grad, config.learning_rate) == AdamStep::SkippedNonFinite {
                skipped += 1;
            }
        }

        let eval = validator(&model, epoch)?;
        let weights_used = match loss_fn {
            LossFn::Weighted(w) => Some(w),
            _ => None,
        };
        if config.loss == LossKind::Adaptive {
            // absent classes count as fully recalled
            let acc = eval.class_accuracy.map(|a| a.unwrap_or(1.0));
            loss_fn = LossFn::Weighted(adaptive_weights(&acc));
        }
        reports.push(EpochReport {
            epoch,
            train_loss: loss_sum / order.len().max(1) as f64,
            train_samples: order.len(),
            val_loss: eval.cross_entropy,
            val_accuracy: eval.accuracy,
            val_balanced_accuracy: eval.balanced_accuracy,
            val_class_accuracy: eval.class_accuracy,
            confusion: eval.confusion,
            class_weights: weights_used,
            skipped_steps: skipped,
            wall_time: started.elapsed(),
        });
        log::info!(
            "epoch {epoch}: train loss {:.5}, val acc {:.4}, balanced {:.4}",
            loss_sum / order.len().max(1) as f64,
            eval.accuracy,
            eval.balanced_accuracy
        );
        match stopper.observe(epoch, config.early_stop_metric.score(&eval)) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(TrainOutcome {
        best: Checkpoint {
            model: best,
            seed: config.seed,
            epoch: stopper.best_epoch().unwrap_or(0) as u32,
            normalize: config.normalize,
        },
        reports,
        stopped_early,
        loss_spec,
    })
}

/// Writes one JSON record per epoch.
pub fn write_metrics<W: Write>(mut w: W, reports: &[EpochReport]) -> Result<()> {
    for r in reports {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io("<metrics>", e))?;
    }
    Ok(())
}

pub fn write_metrics_file(path: impl AsRef<Path>, reports: &[EpochReport]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_metrics(&mut w, reports)?;
    w.flush().map_err(|e| Error::io(path, e))
}
