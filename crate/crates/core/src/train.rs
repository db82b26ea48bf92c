//! SGD-with-momentum training, BN statistic recomputation and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{Model, Param, ParamGroup};
use crate::data::{pad_to_square, random_hflip, resize_max_side, Dataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{metrics, ClassStats, ConfusionMatrix, Metrics, DEFAULT_THETA, DEFAULT_W_MAX};
use crate::tensor::{softmax_cross_entropy_weighted, BnMode, LabelMap, Shape, Tensor, VOID_LABEL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub new_param_lr_multiplier: f64,
    pub seed: u64,
    /// Weight classes rarer than `theta` in the loss.
    pub rareness: bool,
    pub theta: f64,
    pub w_max: f64,
    pub hflip: bool,
    /// Side of the square training canvas.
    pub canvas: usize,
    /// Evaluate on the validation split every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub recompute_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-3,
            momentum: 0.9,
            batch_size: 4,
            epochs: 25,
            decay_epochs: vec![15, 20],
            decay_factor: 0.1,
            new_param_lr_multiplier: 3.0,
            seed: 0,
            rareness: true,
            theta: DEFAULT_THETA,
            w_max: DEFAULT_W_MAX,
            hflip: true,
            canvas: 64,
            eval_every: 0,
            recompute_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!(
                "base_lr {} must be positive",
                self.base_lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.canvas == 0 {
            return Err(Error::config(
                "batch_size, epochs and canvas must be positive",
            ));
        }
        if let Some(d) = self
            .decay_epochs
            .iter()
            .find(|&&d| d == 0 || d > self.epochs)
        {
            return Err(Error::config(format!(
                "decay epoch {d} outside [1, {}]",
                self.epochs
            )));
        }
        if !(self.decay_factor > 0.0) || !(self.new_param_lr_multiplier > 0.0) {
            return Err(Error::config("learning-rate multipliers must be positive"));
        }
        Ok(())
    }
}

/// `base_lr * decay_factor^k` where `k` counts decay epochs `<= epoch`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    cfg.base_lr * cfg.decay_factor.powi(k as i32)
}

/// `v = momentum * v + g; p -= lr * multiplier(group) * v`. Every gradient is
/// checked before any parameter moves.
pub fn sgd_momentum_step(
    params: &mut [Param],
    lr: f64,
    momentum: f64,
    new_multiplier: f64,
) -> Result<()> {
    for p in params.iter() {
        if let Some(g) = p.value.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in parameter '{}' at element {i}",
                    g[i], p.name
                )));
            }
        }
    }
    for p in params.iter_mut() {
        let mult = match p.group {
            ParamGroup::Backbone => 1.0,
            ParamGroup::New => new_multiplier,
        };
        let Some(g) = p.value.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let step = lr * mult;
        let data = p.value.data_mut();
        for ((v, gi), x) in p.velocity.iter_mut().zip(&g).zip(data.iter_mut()) {
            *v = momentum * *v + gi;
            *x -= step * *v;
        }
    }
    Ok(())
}

/// Resizes and pads a sample onto the square training canvas.
pub fn prepare(sample: &Sample, canvas: usize) -> Result<Sample> {
    if sample.height() == canvas && sample.width() == canvas {
        return Ok(sample.clone());
    }
    pad_to_square(&resize_max_side(sample, canvas)?, canvas)
}

/// Stacks equally sized samples into one image batch.
pub fn stack(samples: &[&Sample]) -> Result<(Tensor, Vec<LabelMap>)> {
    let first = samples.first().ok_or_else(|| Error::data("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::dim("batch samples differ in size"));
        }
        data.extend_from_slice(s.image.data());
        labels.push(s.labels.clone());
    }
    Ok((
        Tensor::from_vec(Shape::new(samples.len(), 3, h, w), data)?,
        labels,
    ))
}

/// Per-pixel argmax over class logits; ties go to the lowest class id.
pub fn argmax_labels(logits: &Tensor) -> Vec<LabelMap> {
    let s = logits.shape();
    let plane = s.plane();
    (0..s.n)
        .map(|n| {
            let x = logits.sample(n);
            let data = (0..plane)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..s.c {
                        if x[c * plane + i] > x[best * plane + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap {
                height: s.h,
                width: s.w,
                data,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    pub metrics: Metrics,
}

/// Unary predictions over `data`, scored against its labels. Uses the model
/// in whatever BN mode it is in.
pub fn evaluate(
    model: &mut Model,
    data: &Dataset,
    batch_size: usize,
    canvas: usize,
) -> Result<EvalResult> {
    let mut cm = ConfusionMatrix::new(model.classes());
    let prepared = data
        .samples
        .iter()
        .map(|s| prepare(s, canvas))
        .collect::<Result<Vec<_>>>()?;
    for chunk in prepared.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, labels) = stack(&refs)?;
        let logits = model.predict(&x)?;
        if !logits.is_finite() {
            return Err(Error::Numeric("non-finite logits during evaluation".into()));
        }
        for (pred, truth) in argmax_labels(&logits).iter().zip(&labels) {
            cm.accumulate(pred, truth, VOID_LABEL)?;
        }
    }
    Ok(EvalResult {
        metrics: metrics(&cm)?,
        confusion: cm,
    })
}

/// Replaces every BN site's running statistics with the exact mean and
/// (biased) variance of its input over `data`, then switches to eval mode.
pub fn recompute_bn_stats(
    model: &mut Model,
    data: &Dataset,
    batch_size: usize,
    canvas: usize,
) -> Result<()> {
    model.set_mode(BnMode::Train);
    let sites = model.bn_states().len();
    let mut count = vec![0usize; sites];
    let mut mean: Vec<Vec<f64>> = model
        .bn_states()
        .iter()
        .map(|s| vec![0.0; s.running_mean.len()])
        .collect();
    let mut m2 = mean.clone();
    let prepared = data
        .samples
        .iter()
        .map(|s| prepare(s, canvas))
        .collect::<Result<Vec<_>>>()?;
    for chunk in prepared.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, _) = stack(&refs)?;
        model.forward(&x)?;
        for m in model.last_bn_moments().unwrap_or_default() {
            let (na, nb) = (count[m.state] as f64, m.count as f64);
            let n = na + nb;
            for c in 0..m.mean.len() {
                let delta = m.mean[c] - mean[m.state][c];
                mean[m.state][c] += delta * nb / n;
                m2[m.state][c] += m.var[c] * nb + delta * delta * na * nb / n;
            }
            count[m.state] += m.count;
        }
    }
    model.clear_tape();
    for (i, st) in model.bn_states_mut().iter_mut().enumerate() {
        if count[i] > 0 {
            st.running_mean = mean[i].clone();
            st.running_var = m2[i].iter().map(|v| v / count[i] as f64).collect();
        }
    }
    model.set_mode(BnMode::Eval);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: Option<ConfusionMatrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub weights: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,step,lr,loss\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.step, r.lr, r.loss));
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|r| r.loss)
    }
}

/// Loss weights for a training set under `cfg`.
pub fn loss_weights(cfg: &TrainConfig, data: &Dataset) -> Result<Vec<f64>> {
    if cfg.rareness {
        Ok(ClassStats::from_labels(
            data.labels(),
            data.classes,
            VOID_LABEL,
            cfg.theta,
            cfg.w_max,
        )?
        .weights)
    } else {
        Ok(vec![1.0; data.classes])
    }
}

/// One forward/backward/update on a batch; returns the loss.
pub fn train_step(
    model: &mut Model,
    x: &Tensor,
    labels: &[LabelMap],
    weights: &[f64],
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    model.zero_grads();
    let logits = model.forward(x)?;
    let out = softmax_cross_entropy_weighted(&logits, labels, weights, VOID_LABEL)?;
    if !out.loss.is_finite() {
        model.clear_tape();
        return Err(Error::Numeric(format!(
            "training loss diverged ({})",
            out.loss
        )));
    }
    model.backward(&out.grad)?;
    sgd_momentum_step(
        model.params_mut(),
        lr,
        cfg.momentum,
        cfg.new_param_lr_multiplier,
    )?;
    Ok(out.loss)
}

/// Runs the configured schedule. On divergence the model keeps the
/// parameters of the last successful step and the error is returned.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if train_set.classes != model.classes() {
        return Err(Error::config(format!(
            "dataset has {} classes, model predicts {}",
            train_set.classes,
            model.classes()
        )));
    }
    let weights = loss_weights(cfg, train_set)?;
    let prepared = train_set
        .samples
        .iter()
        .map(|s| prepare(s, cfg.canvas))
        .collect::<Result<Vec<_>>>()?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut flip_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    flip_rng.set_stream(2);

    let mut log = TrainLog {
        weights: weights.clone(),
        steps: Vec::new(),
        epochs: Vec::new(),
    };
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        model.set_mode(BnMode::Train);
        let lr = lr_schedule(cfg, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if cfg.hflip {
                        random_hflip(&prepared[i], &mut flip_rng)
                    } else {
                        prepared[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&Sample> = batch.iter().collect();
            let (x, labels) = stack(&refs)?;
            let loss = train_step(model, &x, &labels, &weights, lr, cfg)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, step {step}: {e}")))?;
            log.steps.push(StepRecord {
                epoch,
                step,
                lr,
                loss,
            });
            epoch_loss += loss;
            batches += 1;
            step += 1;
        }
        let val = match val_set {
            Some(v)
                if cfg.eval_every > 0
                    && (epoch + 1) % cfg.eval_every == 0
                    && epoch + 1 < cfg.epochs =>
            {
                model.set_mode(BnMode::Eval);
                let r = evaluate(model, v, cfg.batch_size, cfg.canvas)?;
                model.set_mode(BnMode::Train);
                Some(r.confusion)
            }
            _ => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: epoch_loss / batches as f64,
            val,
        });
    }
    if cfg.recompute_bn {
        recompute_bn_stats(model, train_set, cfg.batch_size, cfg.canvas)?;
    } else {
        model.set_mode(BnMode::Eval);
    }
    if let (Some(v), Some(last)) = (val_set, log.epochs.last_mut()) {
        last.val = Some(evaluate(model, v, cfg.batch_size, cfg.canvas)?.confusion);
    }
    Ok(log)
}
