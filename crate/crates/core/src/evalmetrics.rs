//! Pixel-level segmentation metrics and refinement gains.
//!
//! Ratios with a zero denominator are reported as `None` and printed as
//! [`UNDEFINED`], never as 0 or 1.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use crate::error::{Error, Result};
use crate::raster::{iou, LabelMap, ProbMap};

/// Marker written for metrics with a zero denominator.
pub const UNDEFINED: &str = "undefined";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )))
    }
}

fn dims(l: &LabelMap) -> (usize, usize) {
    (l.width(), l.height())
}

/// Counts over the pixels inside `mask` (all pixels when `None`).
pub fn confusion(pred: &LabelMap, gt: &LabelMap, mask: Option<&LabelMap>) -> Result<ConfusionCounts> {
    check_dims("confusion", dims(pred), dims(gt))?;
    if let Some(m) = mask {
        check_dims("confusion mask", dims(m), dims(gt))?;
    }
    let mut c = ConfusionCounts::default();
    for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
        if mask.is_some_and(|m| m.data()[i] == 0) {
            continue;
        }
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarMetrics {
    pub acc: Option<f64>,
    pub se: Option<f64>,
    pub sp: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy, sensitivity (vessel recall) and specificity (background recall).
pub fn scalar_metrics(c: &ConfusionCounts) -> ScalarMetrics {
    ScalarMetrics {
        acc: ratio(c.tp + c.tn, c.total()),
        se: ratio(c.tp, c.tp + c.fn_),
        sp: ratio(c.tn, c.tn + c.fp),
    }
}

/// Area under the ROC curve via the Mann-Whitney rank sum with average
/// ranks for ties.
pub fn auc_from_scores(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based: the tie block i..=j shares the mean rank
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_block = order[i..=j].iter().filter(|&&k| positive[k]).count();
        rank_sum_pos += avg_rank * pos_in_block as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// AUC of `scores` against `gt` inside `mask`.
pub fn auc(scores: &ProbMap, gt: &LabelMap, mask: Option<&LabelMap>) -> Result<f64> {
    check_dims("auc", (scores.width(), scores.height()), dims(gt))?;
    if let Some(m) = mask {
        check_dims("auc mask", dims(m), dims(gt))?;
    }
    let keep = |i: usize| mask.is_none_or(|m| m.data()[i] != 0);
    let (s, l): (Vec<f64>, Vec<bool>) = scores
        .data()
        .iter()
        .zip(gt.data())
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, (&s, &g))| (s as f64, g == 1))
        .unzip();
    auc_from_scores(&s, &l)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RefinementReport {
    pub iou_noisy: f64,
    pub iou_refined: f64,
    pub delta: f64,
}

/// IoU of the noisy and refined maps against the clean map and their difference.
pub fn refinement_report(clean: &LabelMap, noisy: &LabelMap, refined: &LabelMap) -> Result<RefinementReport> {
    let iou_noisy = iou(noisy, clean)?;
    let iou_refined = iou(refined, clean)?;
    Ok(RefinementReport {
        iou_noisy,
        iou_refined,
        delta: iou_refined - iou_noisy,
    })
}

pub fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => UNDEFINED.to_string(),
    }
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub counts: ConfusionCounts,
    pub auc: Option<f64>,
    pub refinement: Option<RefinementReport>,
}

pub const REPORT_HEADER: &str = "image_id\tacc\tse\tsp\tauc\tiou_noisy\tiou_refined\tdelta";

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Tab-separated report: one row per image, then a `mean` row whose
/// acc/se/sp come from the summed confusion counts and whose AUC and IoU
/// columns average the defined per-image values.
pub fn report_tsv(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{REPORT_HEADER}").expect("string write");
    let line = |out: &mut String, id: &str, m: ScalarMetrics, auc: Option<f64>, r: [Option<f64>; 3]| {
        writeln!(
            out,
            "{id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            fmt_metric(m.acc),
            fmt_metric(m.se),
            fmt_metric(m.sp),
            fmt_metric(auc),
            fmt_metric(r[0]),
            fmt_metric(r[1]),
            fmt_metric(r[2])
        )
        .expect("string write");
    };
    let mut total = ConfusionCounts::default();
    for row in rows {
        total += row.counts;
        let r = row.refinement;
        line(
            &mut out,
            &row.id,
            scalar_metrics(&row.counts),
            row.auc,
            [r.map(|r| r.iou_noisy), r.map(|r| r.iou_refined), r.map(|r| r.delta)],
        );
    }
    let refs = || rows.iter().filter_map(|r| r.refinement);
    line(
        &mut out,
        "mean",
        scalar_metrics(&total),
        mean(rows.iter().filter_map(|r| r.auc)),
        [
            mean(refs().map(|r| r.iou_noisy)),
            mean(refs().map(|r| r.iou_refined)),
            mean(refs().map(|r| r.delta)),
        ],
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(bits: &[u8]) -> LabelMap {
        LabelMap::new(bits.len(), 1, bits.to_vec()).unwrap()
    }

    #[test]
    fn confusion_cases() {
        let gt = row(&[1, 0, 1, 0]);
        let c = confusion(&gt, &gt, None).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let c = confusion(&row(&[0, 0, 0, 0]), &gt, None).unwrap();
        assert_eq!((c.tp, c.fn_), (0, 2));
        let c = confusion(&row(&[1, 1, 0, 0]), &gt, None).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let masked = confusion(&row(&[1, 1, 0, 0]), &gt, Some(&row(&[1, 1, 0, 0]))).unwrap();
        assert_eq!(masked, ConfusionCounts { tp: 1, fp: 1, tn: 0, fn_: 0 });
        assert!(confusion(&gt, &row(&[1]), None).is_err());
    }

    #[test]
    fn scalar_metric_cases() {
        let perfect = scalar_metrics(&ConfusionCounts { tp: 3, fp: 0, tn: 5, fn_: 0 });
        assert_eq!((perfect.acc, perfect.se, perfect.sp), (Some(1.0), Some(1.0), Some(1.0)));
        let background = scalar_metrics(&ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 3 });
        assert_eq!((background.se, background.sp), (Some(0.0), Some(1.0)));
        let even = scalar_metrics(&ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        assert_eq!((even.acc, even.se, even.sp), (Some(0.5), Some(0.5), Some(0.5)));
        let none = scalar_metrics(&ConfusionCounts { tp: 0, fp: 2, tn: 0, fn_: 0 });
        assert_eq!(none.se, None);
        assert_eq!(fmt_metric(none.se), UNDEFINED);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc_from_scores(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc_from_scores(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auc_from_scores(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
        let p = ProbMap::new(4, 1, vec![0.9, 0.1, 0.4, 0.3]).unwrap();
        assert_eq!(auc(&p, &row(&[1, 0, 1, 0]), None).unwrap(), 1.0);
    }

    #[test]
    fn refinement_cases() {
        let clean = row(&[1, 1, 1, 0, 0, 0]);
        let noisy = row(&[1, 0, 0, 1, 0, 0]);
        let r = refinement_report(&clean, &noisy, &clean).unwrap();
        assert_eq!(r.iou_refined, 1.0);
        assert_eq!(r.delta, 1.0 - r.iou_noisy);
        assert_eq!(refinement_report(&clean, &noisy, &noisy).unwrap().delta, 0.0);
        // refined differs from clean in one pixel, noisy in three: 2/3 vs 1/4
        let refined = row(&[1, 1, 0, 0, 0, 0]);
        let r = refinement_report(&clean, &noisy, &refined).unwrap();
        assert_eq!(r.iou_noisy, 0.25);
        assert!((r.iou_refined - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.delta - (2.0 / 3.0 - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn report_mean_row_uses_summed_counts() {
        let rows = vec![
            EvalRow {
                id: "a".into(),
                counts: ConfusionCounts { tp: 1, fp: 0, tn: 9, fn_: 0 },
                auc: Some(1.0),
                refinement: None,
            },
            EvalRow {
                id: "b".into(),
                counts: ConfusionCounts { tp: 0, fp: 0, tn: 90, fn_: 10 },
                auc: None,
                refinement: None,
            },
        ];
        let tsv = report_tsv(&rows);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        let mean: Vec<&str> = lines[3].split('\t').collect();
        assert_eq!(mean[0], "mean");
        assert_eq!(mean[1], format!("{:.6}", 100.0 / 110.0));
        assert_eq!(mean[2], format!("{:.6}", 1.0 / 11.0));
        assert_eq!(mean[4], "1.000000");
        assert_eq!(mean[5], UNDEFINED);
    }
}
