use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Label};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::mome::MomeModel;

pub const DEFAULT_THRESHOLD: f64 = 0.2;
pub const TIF_REPETITIONS: usize = 3;

fn check_lengths(scores: &[f64], labels: &[Label]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their mean rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random anomaly outscores a random normal sample, ties
/// counted one half. Computed from the rank sum of the anomalies.
pub fn auc_roc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == Label::Anomalous).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::EmptyClass("anomalous"));
    }
    if n_neg == 0 {
        return Err(Error::EmptyClass("normal"));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == Label::Anomalous)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok(((rank_sum - p * (p + 1.0) / 2.0) / (p * n)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when the metric's denominator was zero and the value reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
}

fn ratio(num: usize, den: usize) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Predicts anomalous iff `score > threshold`.
///
/// # Panics
/// If `scores` and `labels` differ in length.
pub fn prf_at_threshold(scores: &[f64], labels: &[Label], threshold: f64) -> Prf {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == Label::Anomalous) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let (precision, precision_undefined) = ratio(tp, tp + fp);
    let (recall, recall_undefined) = ratio(tp, tp + fneg);
    let (f1, f1_undefined) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Prf {
        precision,
        recall,
        f1,
        precision_undefined,
        recall_undefined,
        f1_undefined,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        true_negatives: tn,
    }
}

/// Kendall tau-b. Returns 0 when either side is constant.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "paired samples required");
    let (mut concordant, mut discordant, mut ties_x, mut ties_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => ties_x += 1,
                (_, 0) => ties_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n_x = (concordant + discordant + ties_y) as f64;
    let n_y = (concordant + discordant + ties_x) as f64;
    if n_x == 0.0 || n_y == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / (n_x * n_y).sqrt()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Anything that scores a batch of standardized rows.
pub trait Scorer {
    fn score_rows(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl Scorer for DetectorModel {
    fn score_rows(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.score_batch(xs)
    }
}

impl Scorer for MomeModel {
    fn score_rows(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.predict_batch(xs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TifMeasurement {
    pub samples: usize,
    pub seconds: Vec<f64>,
    pub median_seconds: f64,
    pub variance: f64,
    /// Scores from the final timed pass.
    #[serde(skip)]
    pub scores: Vec<f64>,
}

/// Wall-clock time to score every row in one pass, repeated and reduced to
/// the median.
pub fn measure_tif(model: &impl Scorer, xs: &[Vec<f64>], repetitions: usize) -> Result<TifMeasurement> {
    let repetitions = repetitions.max(1);
    let mut seconds = Vec::with_capacity(repetitions);
    let mut scores = Vec::new();
    for _ in 0..repetitions {
        let start = Instant::now();
        scores = black_box(model.score_rows(black_box(xs))?);
        seconds.push(start.elapsed().as_secs_f64());
    }
    let mean = seconds.iter().sum::<f64>() / repetitions as f64;
    let variance = seconds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / repetitions as f64;
    Ok(TifMeasurement {
        samples: xs.len(),
        median_seconds: median(&seconds),
        seconds,
        variance,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    Single,
    Mome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub variant: ModelVariant,
    pub samples: usize,
    pub anomalous: usize,
    pub auc_roc: f64,
    pub threshold: f64,
    pub prf: Prf,
    pub total_inference_seconds: f64,
    pub tif_repetitions: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields serialize")
    }

    pub fn from_json(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Config(format!("bad report record: {e}")))
    }
}

/// Times and scores `data` (already in model space) and summarizes.
pub fn evaluate(
    model: &impl Scorer,
    variant: ModelVariant,
    dataset: &str,
    data: &Dataset,
    threshold: f64,
) -> Result<EvalReport> {
    let xs: Vec<Vec<f64>> = data.samples().iter().map(|s| s.features.clone()).collect();
    let labels = data.labels();
    let tif = measure_tif(model, &xs, TIF_REPETITIONS)?;
    Ok(EvalReport {
        dataset: dataset.to_string(),
        variant,
        samples: data.len(),
        anomalous: data.n_anomalous(),
        auc_roc: auc_roc(&tif.scores, &labels)?,
        threshold,
        prf: prf_at_threshold(&tif.scores, &labels, threshold),
        total_inference_seconds: tif.median_seconds,
        tif_repetitions: tif.seconds.len(),
    })
}
