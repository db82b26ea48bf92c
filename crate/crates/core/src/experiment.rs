//! Multi-run comparisons: architecture ablation and rareness weighting.

use serde::{Deserialize, Serialize};

use crate::arch::{instantiate, Variant};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::Metrics;
use crate::train::train;

/// Outcome of one training run on the validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub model: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub class_iou: Vec<Option<f64>>,
    pub final_loss: f64,
}

/// Trains `cfg` with `seed` driving both initialization and data order.
pub fn run_once(
    cfg: &RunConfig,
    seed: u64,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.arch.init_seed = seed;
    cfg.train.seed = seed;
    let spec = cfg.arch.network_spec()?;
    let mut model = instantiate(&spec, seed)?;
    let log = train(&mut model, train_set, Some(val_set), &cfg.train)?;
    let cm = log
        .epochs
        .last()
        .and_then(|e| e.val.clone())
        .expect("training with a validation set records final metrics");
    Ok(RunResult {
        model: spec.name.clone(),
        seed,
        metrics: crate::metrics::metrics(&cm)?,
        class_iou: cm.class_iou(),
        final_loss: log.final_loss().unwrap_or(f64::NAN),
    })
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub run: RunConfig,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mut run = RunConfig::default();
        run.train.rareness = false;
        AblationConfig {
            run,
            variants: vec![Variant::Fcn, Variant::Ifcn, Variant::IfcnA, Variant::IfcnB],
            seeds: vec![1, 2, 3],
        }
    }
}

/// Every variant under every seed, sharing one dataset.
pub fn run_ablation(
    cfg: &AblationConfig,
    mut progress: impl FnMut(&RunResult),
) -> Result<Vec<RunResult>> {
    cfg.run.validate()?;
    let (train_set, val_set) = cfg.run.data.load()?;
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        let mut run = cfg.run.clone();
        run.arch.variant = variant;
        for &seed in &cfg.seeds {
            let r = run_once(&run, seed, &train_set, &val_set)?;
            progress(&r);
            out.push(r);
        }
    }
    Ok(out)
}

/// Median validation mean IOU per model, in first-seen order.
pub fn median_iou_by_model(results: &[RunResult]) -> Vec<(String, f64)> {
    let mut names: Vec<String> = Vec::new();
    for r in results {
        if !names.contains(&r.model) {
            names.push(r.model.clone());
        }
    }
    names
        .into_iter()
        .map(|name| {
            let mut v: Vec<f64> = results
                .iter()
                .filter(|r| r.model == name)
                .map(|r| r.metrics.mean_iou)
                .collect();
            let m = median(&mut v);
            (name, m)
        })
        .collect()
}

/// `model,seed,pixel_acc,mean_acc,mean_iou` per run, then one `median` row per model.
pub fn ablation_csv(results: &[RunResult]) -> String {
    let mut s = String::from("model,seed,pixel_acc,mean_acc,mean_iou\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model, r.seed, r.metrics.pixel_acc, r.metrics.mean_acc, r.metrics.mean_iou
        ));
    }
    for (name, m) in median_iou_by_model(results) {
        s.push_str(&format!("{name},median,,,{m}\n"));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RarenessConfig {
    pub run: RunConfig,
    pub seeds: Vec<u64>,
}

impl Default for RarenessConfig {
    fn default() -> Self {
        let mut run = RunConfig::default();
        run.arch.variant = Variant::Fcn;
        run.arch.classes = 3;
        run.data.scene.classes = 3;
        run.data.scene.rare = Some(crate::data::RareClass {
            id: 2,
            target_freq: 0.005,
            size: 6,
        });
        run.train.theta = 0.01;
        run.train.base_lr = 0.01;
        RarenessConfig {
            run,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RarenessResult {
    pub weighted: bool,
    pub seed: u64,
    pub rare_iou: f64,
    pub weights: Vec<f64>,
    pub metrics: Metrics,
}

/// Trains with and without rareness weights and reports the rare class's IOU.
pub fn run_rareness(
    cfg: &RarenessConfig,
    mut progress: impl FnMut(&RarenessResult),
) -> Result<Vec<RarenessResult>> {
    cfg.run.validate()?;
    let rare = cfg
        .run
        .data
        .scene
        .rare
        .as_ref()
        .ok_or_else(|| crate::error::Error::config("rareness experiment needs a rare class"))?
        .id as usize;
    let (train_set, val_set) = cfg.run.data.load()?;
    let mut out = Vec::new();
    for weighted in [false, true] {
        let mut run = cfg.run.clone();
        run.train.rareness = weighted;
        for &seed in &cfg.seeds {
            let weights = crate::train::loss_weights(&run.train, &train_set)?;
            let r = run_once(&run, seed, &train_set, &val_set)?;
            let res = RarenessResult {
                weighted,
                seed,
                rare_iou: r.class_iou.get(rare).copied().flatten().unwrap_or(0.0),
                weights,
                metrics: r.metrics,
            };
            progress(&res);
            out.push(res);
        }
    }
    Ok(out)
}

/// Median rare-class IOU of the weighted runs minus that of the unweighted ones.
pub fn rareness_gain(results: &[RarenessResult]) -> f64 {
    let mut on: Vec<f64> = results
        .iter()
        .filter(|r| r.weighted)
        .map(|r| r.rare_iou)
        .collect();
    let mut off: Vec<f64> = results
        .iter()
        .filter(|r| !r.weighted)
        .map(|r| r.rare_iou)
        .collect();
    median(&mut on) - median(&mut off)
}

pub fn rareness_csv(results: &[RarenessResult]) -> String {
    let mut s = String::from("weighted,seed,rare_iou,mean_iou\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.weighted, r.seed, r.rare_iou, r.metrics.mean_iou
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
