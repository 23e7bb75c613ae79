//! Pixel-level segmentation metrics: confusion counts, SEN/SPE/F1/ACC and
//! rank-based ROC AUC.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{crop_to, Sample};
use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Column order of every report.
pub const COLUMNS: [&str; 5] = ["SEN", "SPE", "F1", "ACC", "AUC"];

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

fn check_binary(truth: &[f32]) -> Result<()> {
    match truth.iter().find(|&&t| t != 0.0 && t != 1.0) {
        Some(v) => Err(Error::InvalidValue(format!("ground truth must be 0 or 1, found {v}"))),
        None => Ok(()),
    }
}

/// Tallies pixels; a pixel is predicted positive iff `prob >= threshold`.
pub fn confusion(pred: &Tensor, truth: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("confusion", pred.shape(), truth.shape()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold must be in (0, 1), got {threshold}")));
    }
    check_binary(truth.data())?;
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p as f64 >= threshold, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// SEN/SPE/F1/ACC; `None` marks a metric whose denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub f1: Option<f64>,
    pub acc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn basic_metrics(c: &ConfusionCounts) -> BasicMetrics {
    BasicMetrics {
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
    }
}

/// Mann-Whitney AUC with tied scores contributing one half.
/// `None` when either class is absent.
pub fn auc(scores: &[f32], labels: &[bool]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidValue("auc scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // sum of 1-based average ranks of the positives
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: BasicMetrics,
    pub auc: Option<f64>,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn from_prediction(id: impl Into<String>, pred: &Tensor, truth: &Tensor, threshold: f64) -> Result<Self> {
        let counts = confusion(pred, truth, threshold)?;
        let labels: Vec<bool> = truth.data().iter().map(|&t| t == 1.0).collect();
        Ok(MetricsReport {
            id: id.into(),
            counts,
            metrics: basic_metrics(&counts),
            auc: auc(pred.data(), &labels)?,
            threshold,
        })
    }

    /// Values in report column order.
    pub fn row(&self) -> [Option<f64>; 5] {
        let m = &self.metrics;
        [m.sen, m.spe, m.f1, m.acc, self.auc]
    }
}

/// How per-image results are combined into the aggregate row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Counts summed before deriving metrics; AUC over all pooled pixels.
    #[default]
    Pooled,
    /// Mean of each defined per-image metric.
    MeanPerImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_image: Vec<MetricsReport>,
    pub aggregate: MetricsReport,
    pub aggregation: Aggregation,
}

/// Anything that maps an `H x W x 3` image to an `H x W x 1` probability map.
pub trait Segmenter {
    fn segment(&self, image: &Tensor) -> Result<Tensor>;
}

impl Segmenter for Network<f32> {
    fn segment(&self, image: &Tensor) -> Result<Tensor> {
        self.predict(image)
    }
}

/// Scores every sample after cropping prediction and truth back to the
/// original resolution.
pub fn evaluate(
    model: &impl Segmenter,
    samples: &[Sample],
    threshold: f64,
    aggregation: Aggregation,
) -> Result<Evaluation> {
    let predictions = samples
        .iter()
        .map(|s| crop_to(&model.segment(&s.image)?, s.original_size))
        .collect::<Result<Vec<_>>>()?;
    score_predictions(samples, &predictions, threshold, aggregation)
}

/// Scores probability maps already at each sample's original resolution,
/// paired with `samples` by position.
pub fn score_predictions(
    samples: &[Sample],
    predictions: &[Tensor],
    threshold: f64,
    aggregation: Aggregation,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    if samples.len() != predictions.len() {
        return Err(Error::Config(format!(
            "{} samples but {} predictions",
            samples.len(),
            predictions.len()
        )));
    }
    let mut per_image = Vec::with_capacity(samples.len());
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    for (s, prob) in samples.iter().zip(predictions) {
        let truth = s.original_mask()?;
        let report = MetricsReport::from_prediction(s.id.clone(), prob, &truth, threshold)?;
        if aggregation == Aggregation::Pooled {
            pooled_scores.extend_from_slice(prob.data());
            pooled_labels.extend(truth.data().iter().map(|&t| t == 1.0));
        }
        per_image.push(report);
    }
    let counts = per_image.iter().fold(ConfusionCounts::default(), |a, r| a + r.counts);
    let aggregate = match aggregation {
        Aggregation::Pooled => MetricsReport {
            id: "AGGREGATE".into(),
            counts,
            metrics: basic_metrics(&counts),
            auc: auc(&pooled_scores, &pooled_labels)?,
            threshold,
        },
        Aggregation::MeanPerImage => {
            let mean = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
                let vals: Vec<f64> = per_image.iter().filter_map(f).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            MetricsReport {
                id: "AGGREGATE".into(),
                counts,
                metrics: BasicMetrics {
                    sen: mean(&|r| r.metrics.sen),
                    spe: mean(&|r| r.metrics.spe),
                    f1: mean(&|r| r.metrics.f1),
                    acc: mean(&|r| r.metrics.acc),
                },
                auc: mean(&|r| r.auc),
                threshold,
            }
        }
    };
    Ok(Evaluation {
        per_image,
        aggregate,
        aggregation,
    })
}

fn fmt_metric(v: Option<f64>, decimals: usize) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.decimals$}"))
}

/// `image,sen,spe,f1,acc,auc` rows followed by an `AGGREGATE` row.
pub fn write_csv<W: Write>(eval: &Evaluation, mut w: W) -> Result<()> {
    writeln!(w, "image,sen,spe,f1,acc,auc")?;
    for r in eval.per_image.iter().chain(std::iter::once(&eval.aggregate)) {
        let cols: Vec<String> = r.row().iter().map(|&v| fmt_metric(v, 6)).collect();
        writeln!(w, "{},{}", r.id, cols.join(","))?;
    }
    Ok(())
}

/// Aligned plain-text table with columns SEN SPE F1 ACC AUC.
pub fn render_table(eval: &Evaluation) -> String {
    let width = eval
        .per_image
        .iter()
        .map(|r| r.id.len())
        .chain(std::iter::once("AGGREGATE".len()))
        .max()
        .unwrap_or(0);
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "Image");
    for c in COLUMNS {
        let _ = write!(out, "  {c:>6}");
    }
    out.push('\n');
    let rule = width + COLUMNS.len() * 8;
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for (i, r) in eval
        .per_image
        .iter()
        .chain(std::iter::once(&eval.aggregate))
        .enumerate()
    {
        if i == eval.per_image.len() {
            out.push_str(&"-".repeat(rule));
            out.push('\n');
        }
        let _ = write!(out, "{:<width$}", r.id);
        for v in r.row() {
            let _ = write!(out, "  {:>6}", fmt_metric(v, 4));
        }
        out.push('\n');
    }
    let _ = writeln!(
        out,
        "threshold {} | aggregate: {}",
        eval.aggregate.threshold,
        match eval.aggregation {
            Aggregation::Pooled => "pixel-pooled",
            Aggregation::MeanPerImage => "mean per image",
        }
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: Vec<f32>) -> Tensor {
        let n = data.len();
        Tensor::from_vec(&[n, 1, 1], data).unwrap()
    }

    #[test]
    fn arithmetic_example() {
        let c = ConfusionCounts {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5,
        };
        let m = basic_metrics(&c);
        assert_eq!(m.sen, Some(0.75));
        assert!((m.spe.unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.acc, Some(0.8));
        assert_eq!(m.f1, Some(0.75));
    }

    #[test]
    fn empty_positive_class_is_undefined() {
        let m = basic_metrics(&ConfusionCounts {
            tp: 0,
            fp: 2,
            fn_: 0,
            tn: 8,
        });
        assert_eq!(m.sen, None);
        assert_eq!(m.spe, Some(0.8));
    }

    #[test]
    fn tie_rule_counts_half_as_positive() {
        let c = confusion(&t(vec![0.5; 4]), &t(vec![1.0, 0.0, 1.0, 0.0]), 0.5).unwrap();
        assert_eq!((c.tn, c.fn_, c.tp, c.fp), (0, 0, 2, 2));
    }

    #[test]
    fn confusion_errors() {
        assert!(confusion(&t(vec![0.1, 0.2]), &t(vec![1.0]), 0.5).is_err());
        assert!(confusion(&t(vec![0.1]), &t(vec![0.5]), 0.5).is_err());
        assert!(confusion(&t(vec![0.1]), &t(vec![1.0]), 1.0).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), Some(1.0));
        assert_eq!(
            auc(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap(),
            Some(0.0)
        );
        assert_eq!(auc(&[0.3, 0.3], &[true, false]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.3, 0.4], &[true, true]).unwrap(), None);
    }

    struct Perfect<'a>(&'a [Sample]);

    impl Segmenter for Perfect<'_> {
        fn segment(&self, image: &Tensor) -> Result<Tensor> {
            let s = self.0.iter().find(|s| &s.image == image).unwrap();
            Ok(s.mask.clone())
        }
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let cfg = crate::synth::SynthConfig::new(2, 32, 32, 4);
        let ds = crate::synth::synth_vessels(&cfg).unwrap();
        let eval = evaluate(&Perfect(&ds.samples), &ds.samples, 0.5, Aggregation::Pooled).unwrap();
        assert_eq!(eval.aggregate.row(), [Some(1.0); 5]);
        let mut csv = Vec::new();
        write_csv(&eval, &mut csv).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("image,sen,spe,f1,acc,auc\n"));
        assert!(csv.ends_with("AGGREGATE,1.000000,1.000000,1.000000,1.000000,1.000000\n"));
        let table = render_table(&eval);
        assert!(table
            .lines()
            .next()
            .unwrap()
            .split_whitespace()
            .eq(["Image", "SEN", "SPE", "F1", "ACC", "AUC"]));
    }

    #[test]
    fn undefined_renders_na() {
        let eval = Evaluation {
            per_image: vec![],
            aggregate: MetricsReport {
                id: "AGGREGATE".into(),
                counts: ConfusionCounts {
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                    tn: 4,
                },
                metrics: basic_metrics(&ConfusionCounts {
                    tp: 0,
                    fp: 0,
                    fn_: 0,
                    tn: 4,
                }),
                auc: None,
                threshold: 0.5,
            },
            aggregation: Aggregation::Pooled,
        };
        let mut csv = Vec::new();
        write_csv(&eval, &mut csv).unwrap();
        assert!(String::from_utf8(csv)
            .unwrap()
            .contains("AGGREGATE,NA,1.000000,NA,1.000000,NA"));
    }
}
