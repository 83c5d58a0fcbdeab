//! AdamW training of the square-distance loss, evaluation, and per-epoch
//! metrics rows.

use serde::{Deserialize, Serialize};

use crate::data::{batches, ProcessedDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{classify, loss, Mode, QcnnModel};
use crate::tape::{backward, Gradients};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Epochs between learning-rate halvings.
    pub halving_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Measure entanglement entropy every this many epochs; 0 disables.
    pub ee_period: usize,
    /// Trailing window (epochs) for the smoothed entropy trend.
    pub ee_window: usize,
    /// Leading fraction of epochs excluded from correlation statistics.
    pub warmup_fraction: f64,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 0.01,
            halving_period: 10,
            epochs: 90,
            batch_size: 50,
            seed: 0,
            ee_period: 1,
            ee_window: 2,
            warmup_fraction: 1.0 / 3.0,
            train_limit: None,
            test_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, path: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(path, msg))
            }
        };
        check(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "train.learning_rate", "must be a finite non-negative number")?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "train.weight_decay", "must be a finite non-negative number")?;
        check(self.halving_period >= 1, "train.halving_period", "must be at least 1")?;
        check(self.batch_size >= 1, "train.batch_size", "must be at least 1")?;
        check(self.ee_window >= 1, "train.ee_window", "must be at least 1")?;
        check((0.0..1.0).contains(&self.warmup_fraction), "train.warmup_fraction", "must lie in [0, 1)")?;
        check(self.train_limit != Some(0), "train.train_limit", "must be positive when set")?;
        check(self.test_limit != Some(0), "train.test_limit", "must be positive when set")?;
        Ok(())
    }
}

/// `lr₀ · 0.5^⌊epoch / period⌋` for 0-based `epoch`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.learning_rate * 0.5f64.powi((epoch / config.halving_period) as i32)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            step: 0,
            first_moment: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            second_moment: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }
}

/// One AdamW update: decoupled decay `θ ← θ(1 − lr·wd)` followed by the
/// bias-corrected Adam step.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "parameter {i}: {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = state.first_moment[i].as_mut_slice();
        let v = state.second_moment[i].as_mut_slice();
        for (k, (theta, &grad)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            *theta *= 1.0 - lr * weight_decay;
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * grad;
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * grad * grad;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub cost: f64,
    pub accuracy: f64,
}

/// One pass over seeded shuffled batches in train mode. `epoch` is 0-based
/// and selects both the shuffle stream and the learning rate.
pub fn train_epoch(
    model: &mut QcnnModel,
    data: &ProcessedDataset,
    state: &mut OptimizerState,
    config: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let lr = lr_schedule(epoch, config);
    let mut cost_sum = 0.0;
    let mut correct = 0usize;
    let mut seen = 0usize;
    for (b, idx) in batches(data.len(), config.batch_size, config.seed, epoch as u64)
        .iter()
        .enumerate()
    {
        let (x, labels) = data.gather(idx);
        let (tape, value, scores) = model.forward_recorded(&x, &labels, Mode::Train)?;
        if !value.is_finite() {
            return Err(non_finite(model, epoch, b));
        }
        let grads = backward(&tape, 1.0)?;
        if !grads.is_finite() {
            return Err(non_finite(model, epoch, b));
        }
        adamw_step(&mut model.params_mut(), &grads, state, lr, config.weight_decay)?;
        cost_sum += value * labels.len() as f64;
        correct += count_correct(&scores, &labels);
        seen += labels.len();
    }
    Ok(EpochStats {
        cost: cost_sum / seen.max(1) as f64,
        accuracy: correct as f64 / seen.max(1) as f64,
    })
}

fn non_finite(model: &QcnnModel, epoch: usize, batch: usize) -> Error {
    let norms = model
        .param_norms()
        .chunks(3)
        .enumerate()
        .map(|(l, n)| format!("L{l}[conv {:.3e}, scale {:.3e}, shift {:.3e}]", n[0], n[1], n[2]))
        .collect::<Vec<_>>()
        .join(" ");
    Error::NonFinite { epoch, batch, norms }
}

fn count_correct(scores: &Matrix, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|(b, &l)| classify(scores.row(*b)) == l)
        .count()
}

const EVAL_CHUNK: usize = 1000;

/// Eval-mode accuracy and mean cost over the whole dataset.
pub fn evaluate(model: &QcnnModel, data: &ProcessedDataset) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let mut cost_sum = 0.0;
    let mut correct = 0;
    let all: Vec<usize> = (0..data.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, labels) = data.gather(chunk);
        let scores = model.predict(&x)?;
        cost_sum += loss(&scores, &labels)? * labels.len() as f64;
        correct += count_correct(&scores, &labels);
    }
    Ok(EpochStats {
        cost: cost_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

/// Scores-only variant of [`evaluate`] used when the scores come from
/// elsewhere (e.g. a tensor contraction).
pub fn score_stats(scores: &Matrix, labels: &[usize]) -> Result<EpochStats> {
    Ok(EpochStats {
        cost: loss(scores, labels)?,
        accuracy: count_correct(scores, labels) as f64 / labels.len() as f64,
    })
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_cost: f64,
    pub test_cost: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Per-class entropies in nats; absent on epochs without a measurement.
    pub ee_per_class: Option<Vec<f64>>,
    pub ee_avg: Option<f64>,
}

impl MetricsRecord {
    pub fn csv_header(num_classes: usize) -> String {
        let mut cols: Vec<String> = ["epoch", "lr", "train_cost", "test_cost", "train_acc", "test_acc"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend((0..num_classes).map(|c| format!("ee_class_{c}")));
        cols.push("ee_avg".into());
        cols.join(",")
    }

    pub fn csv_row(&self, num_classes: usize) -> String {
        let mut cols = vec![
            self.epoch.to_string(),
            self.lr.to_string(),
            self.train_cost.to_string(),
            self.test_cost.to_string(),
            self.train_acc.to_string(),
            self.test_acc.to_string(),
        ];
        match &self.ee_per_class {
            Some(ee) => cols.extend(ee.iter().map(f64::to_string)),
            None => cols.extend(std::iter::repeat_n(String::new(), num_classes)),
        }
        cols.push(self.ee_avg.map(|v| v.to_string()).unwrap_or_default());
        cols.join(",")
    }

    /// Parses a row written by [`MetricsRecord::csv_row`] under `header`.
    pub fn from_csv(header: &str, row: &str) -> Result<Self> {
        let names: Vec<&str> = header.trim().split(',').collect();
        let values: Vec<&str> = row.trim().split(',').collect();
        if names.len() != values.len() {
            return Err(Error::Input(format!(
                "metrics row has {} fields, header has {}",
                values.len(),
                names.len()
            )));
        }
        let field = |name: &str| -> Result<&str> {
            names
                .iter()
                .position(|n| *n == name)
                .map(|i| values[i])
                .ok_or_else(|| Error::Input(format!("metrics column `{name}` missing")))
        };
        let num = |name: &str| -> Result<f64> {
            field(name)?
                .parse::<f64>()
                .map_err(|e| Error::Input(format!("metrics column `{name}`: {e}")))
        };
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Input(format!("metrics value `{s}`: {e}")))
            }
        };
        let ee: Vec<Option<f64>> = names
            .iter()
            .zip(&values)
            .filter(|(n, _)| n.starts_with("ee_class_"))
            .map(|(_, v)| opt(v))
            .collect::<Result<_>>()?;
        let ee_per_class = if !ee.is_empty() && ee.iter().all(Option::is_some) {
            Some(ee.into_iter().flatten().collect())
        } else {
            None
        };
        Ok(Self {
            epoch: num("epoch")? as usize,
            lr: num("lr")?,
            train_cost: num("train_cost")?,
            test_cost: num("test_cost")?,
            train_acc: num("train_acc")?,
            test_acc: num("test_acc")?,
            ee_per_class,
            ee_avg: opt(field("ee_avg")?)?,
        })
    }
}

/// Reads a metrics CSV produced by a training run.
pub fn read_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Input("empty metrics file".into()))?;
    lines.map(|row| MetricsRecord::from_csv(header, row)).collect()
}
