//! Class statistics, rareness weights and segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

/// Default frequency below which a class counts as rare.
pub const DEFAULT_THETA: f64 = 0.01;
/// Default cap on rareness weights.
pub const DEFAULT_W_MAX: f64 = 10.0;

/// Fraction of non-void pixels per class.
pub fn class_frequencies<'a>(
    labels: impl IntoIterator<Item = &'a LabelMap>,
    classes: usize,
    void_index: u8,
) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; classes];
    for lm in labels {
        for (i, &l) in lm.data.iter().enumerate() {
            if l == void_index {
                continue;
            }
            let slot = counts.get_mut(l as usize).ok_or_else(|| {
                Error::data(format!(
                    "label {l} out of range [0, {classes}) at pixel (y={}, x={})",
                    i / lm.width,
                    i % lm.width
                ))
            })?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::data(
            "no labelled pixels to compute class frequencies from",
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// `w_c = 1` for `f_c >= theta`, otherwise `min(theta / f_c, w_max)`.
pub fn rareness_weights(freq: &[f64], theta: f64, w_max: f64) -> Vec<f64> {
    freq.iter()
        .map(|&f| {
            if f >= theta {
                1.0
            } else if f <= 0.0 {
                w_max
            } else {
                (theta / f).min(w_max)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub freq: Vec<f64>,
    pub theta: f64,
    pub rare: Vec<usize>,
    pub weights: Vec<f64>,
    pub w_max: f64,
}

impl ClassStats {
    pub fn new(freq: Vec<f64>, theta: f64, w_max: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::config(format!(
                "rareness threshold {theta} must lie in (0, 1)"
            )));
        }
        if !(w_max >= 1.0) {
            return Err(Error::config(format!(
                "weight cap {w_max} must be at least 1"
            )));
        }
        let rare = freq
            .iter()
            .enumerate()
            .filter(|(_, &f)| f < theta)
            .map(|(c, _)| c)
            .collect();
        let weights = rareness_weights(&freq, theta, w_max);
        Ok(ClassStats {
            freq,
            theta,
            rare,
            weights,
            w_max,
        })
    }

    pub fn from_labels<'a>(
        labels: impl IntoIterator<Item = &'a LabelMap>,
        classes: usize,
        void_index: u8,
        theta: f64,
        w_max: f64,
    ) -> Result<Self> {
        ClassStats::new(
            class_frequencies(labels, classes, void_index)?,
            theta,
            w_max,
        )
    }
}

/// `counts[i][j]`: pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::dim("confusion matrix rows must form a square"));
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.classes..(truth + 1) * self.classes]
    }

    /// Adds every non-void pixel of one (prediction, truth) pair.
    pub fn accumulate(
        &mut self,
        predicted: &LabelMap,
        truth: &LabelMap,
        void_index: u8,
    ) -> Result<()> {
        if (predicted.height, predicted.width) != (truth.height, truth.width) {
            return Err(Error::dim(format!(
                "prediction {}x{} does not match labels {}x{}",
                predicted.height, predicted.width, truth.height, truth.width
            )));
        }
        let c = self.classes;
        for (i, (&p, &t)) in predicted.data.iter().zip(&truth.data).enumerate() {
            if t == void_index {
                continue;
            }
            if t as usize >= c || p as usize >= c {
                return Err(Error::data(format!(
                    "label pair (truth {t}, predicted {p}) out of range [0, {c}) at pixel (y={}, x={})",
                    i / truth.width,
                    i % truth.width
                )));
            }
            self.counts[t as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim(format!(
                "cannot merge {}-class and {}-class confusion matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Intersection over union per class; `None` where the class is neither
    /// present nor predicted.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let t: u64 = self.row(i).iter().sum();
                let col: u64 = (0..self.classes).map(|j| self.get(j, i)).sum();
                let union = t + col - self.get(i, i);
                (union > 0).then(|| self.get(i, i) as f64 / union as f64)
            })
            .collect()
    }

    /// Recall per class; `None` where the class has no true pixels.
    pub fn class_accuracy(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let t: u64 = self.row(i).iter().sum();
                (t > 0).then(|| self.get(i, i) as f64 / t as f64)
            })
            .collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pixel_acc: f64,
    pub mean_acc: f64,
    pub mean_iou: f64,
}

fn mean_defined(values: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    defined.iter().sum::<f64>() / defined.len() as f64
}

/// Pixel accuracy, mean class accuracy and mean IOU. Class means skip classes
/// for which the ratio is undefined.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::data("confusion matrix is empty"));
    }
    let diag: u64 = (0..cm.classes()).map(|i| cm.get(i, i)).sum();
    Ok(Metrics {
        pixel_acc: diag as f64 / total as f64,
        mean_acc: mean_defined(&cm.class_accuracy()),
        mean_iou: mean_defined(&cm.class_iou()),
    })
}

pub fn metrics_csv_header(classes: usize) -> String {
    let mut s = String::from("epoch,split,pixel_acc,mean_acc,mean_iou");
    for c in 0..classes {
        s.push_str(&format!(",iou_{c}"));
    }
    s
}

/// One metrics CSV row; undefined per-class IOUs are left empty.
pub fn metrics_csv_row(epoch: usize, split: &str, cm: &ConfusionMatrix) -> Result<String> {
    let m = metrics(cm)?;
    let mut s = format!(
        "{epoch},{split},{},{},{}",
        m.pixel_acc, m.mean_acc, m.mean_iou
    );
    for iou in cm.class_iou() {
        s.push(',');
        if let Some(v) = iou {
            s.push_str(&v.to_string());
        }
    }
    Ok(s)
}
