use std::time::Instant;

use super::{backward, cross_entropy, lr_at, sgd_step, LossConfig, Network, Regularizer, SgdConfig};
use crate::data::{self, Dataset, Sample};
use crate::diagnostics::{self, DEFAULT_TAU_DEG};
use crate::error::{Error, Result};
use crate::eval::{auroc, top1_accuracy, EpochRecord, MetricKind, RunReport};
use crate::ortho;
use crate::tensor::{Rng, Tensor};

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
const EVAL_CHUNK: usize = 64;

pub struct TrainOutcome {
    pub report: RunReport,
    /// The validation-selected network, at checkpoint (`f32`) precision.
    pub best: Network,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitEval {
    pub cross_entropy: f64,
    pub metric: f64,
}

/// Logits for every sample of a split, N×classes.
pub fn split_logits(net: &Network, samples: &[Sample]) -> Result<Tensor> {
    let mut out = Vec::with_capacity(samples.len() * net.num_classes());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let batch = data::stack(&refs);
        out.extend_from_slice(net.forward(&batch.images)?.data());
    }
    Tensor::new(vec![samples.len(), net.num_classes()], out)
}

/// Anomaly scores: softmax probability of class 1.
pub fn split_scores(net: &Network, samples: &[Sample]) -> Result<Vec<f64>> {
    if net.num_classes() != 2 {
        return Err(Error::Input(format!("anomaly scores need 2 classes, network has {}", net.num_classes())));
    }
    let logits = split_logits(net, samples)?;
    Ok(logits.rows().map(|z| 1.0 / (1.0 + (z[0] - z[1]).exp())).collect())
}

pub fn evaluate_split(net: &Network, samples: &[Sample], metric: MetricKind) -> Result<SplitEval> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let logits = split_logits(net, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let ce = cross_entropy(&logits, &labels)?;
    let metric = match metric {
        MetricKind::Auroc => {
            let scores = split_scores(net, samples)?;
            let positives: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            auroc(&scores, &positives)?
        }
        MetricKind::Accuracy => top1_accuracy(&logits, &labels)?,
    };
    Ok(SplitEval { cross_entropy: ce, metric })
}

fn regularizer_value(net: &Network, cfg: &LossConfig) -> f64 {
    match cfg.regularizer {
        Regularizer::None => 0.0,
        Regularizer::AlmostRight => ortho::almost_right_loss(&net.kernel_bank(), cfg.epsilon),
        Regularizer::HardOrtho => ortho::hard_ortho_loss(&net.kernel_bank(), cfg.epsilon),
    }
}

fn objective(ce: f64, reg: f64, cfg: &LossConfig) -> f64 {
    match cfg.regularizer {
        Regularizer::None => ce,
        _ => cfg.alpha * ce + (1.0 - cfg.alpha) * reg,
    }
}

/// Trains `net` with mini-batch SGD and returns the report together with
/// the epoch-best network by validation metric.
///
/// Epoch 0 of the report describes the initial weights. When `epochs > 0`
/// model selection considers epochs 1..=epochs only (earliest wins ties);
/// with `epochs == 0` the initial weights are the result. The selected
/// network is rounded to `f32` before the test metric is computed, so a
/// saved checkpoint reproduces it exactly.
pub fn train(net: Network, ds: &Dataset, loss: &LossConfig, sgd: &SgdConfig, rng: &mut Rng) -> Result<TrainOutcome> {
    loss.validate()?;
    sgd.validate()?;
    if ds.train.is_empty() || ds.val.is_empty() || ds.test.is_empty() {
        return Err(Error::Input("train, val and test splits must be non-empty".into()));
    }
    if net.input_shape() != ds.input_shape || net.num_classes() != ds.num_classes {
        return Err(Error::Dimension(format!(
            "network {:?}→{} does not fit dataset {:?}→{}",
            net.input_shape(),
            net.num_classes(),
            ds.input_shape,
            ds.num_classes
        )));
    }
    let started = Instant::now();
    let mut net = net;
    let geometry_init = diagnostics::summarize(&net.kernel_bank(), loss.epsilon, DEFAULT_TAU_DEG)?;

    let train0 = evaluate_split(&net, &ds.train, ds.metric)?;
    let val0 = evaluate_split(&net, &ds.val, ds.metric)?;
    let reg0 = regularizer_value(&net, loss);
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        lr: lr_at(0, sgd),
        train_loss: objective(train0.cross_entropy, reg0, loss),
        train_cross_entropy: train0.cross_entropy,
        train_regularizer: reg0,
        val_loss: val0.cross_entropy,
        val_metric: val0.metric,
    }];

    let mut best = net.rounded_to_f32();
    let mut best_epoch = 0;
    let mut best_val = val0.metric;
    let mut batch_rng = rng.derive("batches");
    let mut step = 0usize;
    for epoch in 1..=sgd.epochs {
        let lr = lr_at(epoch - 1, sgd);
        let (mut sum_total, mut sum_ce, mut sum_reg, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in data::batches(&ds.train, sgd.batch_size, &mut batch_rng)? {
            let (grads, parts) = match backward(&net, &batch.images, &batch.labels, loss) {
                Ok(r) => r,
                Err(Error::Numeric(_)) => return Err(Error::Divergence { epoch, step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !parts.total.is_finite() || parts.total > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { epoch, step, loss: parts.total });
            }
            sgd_step(&mut net, &grads, lr)?;
            let b = batch.labels.len();
            sum_total += parts.total * b as f64;
            sum_ce += parts.cross_entropy * b as f64;
            sum_reg += parts.regularizer * b as f64;
            seen += b;
            step += 1;
        }
        let val = evaluate_split(&net, &ds.val, ds.metric)?;
        if !val.cross_entropy.is_finite() {
            return Err(Error::Divergence { epoch, step, loss: val.cross_entropy });
        }
        let n = seen as f64;
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: sum_total / n,
            train_cross_entropy: sum_ce / n,
            train_regularizer: sum_reg / n,
            val_loss: val.cross_entropy,
            val_metric: val.metric,
        });
        if best_epoch == 0 || val.metric > best_val {
            best = net.rounded_to_f32();
            best_epoch = epoch;
            best_val = val.metric;
        }
    }

    let test = evaluate_split(&best, &ds.test, ds.metric)?;
    let geometry_best = diagnostics::summarize(&best.kernel_bank(), loss.epsilon, DEFAULT_TAU_DEG)?;
    let report = RunReport {
        seed: rng.seed(),
        config: serde_json::json!({ "loss": loss, "sgd": sgd }),
        metric: ds.metric,
        epochs,
        best_epoch,
        best_val_metric: best_val,
        test_metric: test.metric,
        geometry_init,
        geometry_best,
        init_scheme: "caller".into(),
        lsuv: None,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome { report, best })
}
