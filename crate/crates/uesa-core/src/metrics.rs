//! Confusion counts and the five segmentation metrics, with per-image and
//! aggregate (mean ± population standard deviation) reporting.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel-level 2x2 tally for one prediction/ground-truth pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn new(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        ConfusionCounts {
            true_pos,
            false_pos,
            false_neg,
            true_neg,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }
}

/// Threshold a probability map into a binary mask: 1 where the value
/// reaches `cutoff`.
pub fn binarize(prob: &Tensor, cutoff: f64) -> Result<Tensor> {
    if !prob.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("binarize expects values in [0,1]"));
    }
    let data: Vec<f64> = prob
        .data()
        .iter()
        .map(|&v| if v >= cutoff { 1.0 } else { 0.0 })
        .collect();
    Ok(Tensor::from_raw(prob.shape().to_vec(), data))
}

/// Elementwise confusion tally of two strictly binary masks.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::invalid(format!(
            "confusion shape mismatch: {:?} vs {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let binary = |t: &Tensor| t.data().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(pred) || !binary(gt) {
        return Err(Error::invalid("confusion expects strictly binary masks"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

// Zero-denominator convention: when a metric's denominator is empty its
// target set is empty too, so the metric is 1.0 (perfect agreement about
// nothing).
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Dice similarity coefficient.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.true_pos, 2 * c.true_pos + c.false_pos + c.false_neg)
}

/// Intersection over union.
pub fn iou(c: &ConfusionCounts) -> f64 {
    ratio(c.true_pos, c.true_pos + c.false_pos + c.false_neg)
}

/// Sensitivity (recall).
pub fn sen(c: &ConfusionCounts) -> f64 {
    ratio(c.true_pos, c.true_pos + c.false_neg)
}

/// Specificity.
pub fn spec(c: &ConfusionCounts) -> f64 {
    ratio(c.true_neg, c.true_neg + c.false_pos)
}

/// Accuracy.
pub fn acc(c: &ConfusionCounts) -> f64 {
    ratio(c.true_pos + c.true_neg, c.total())
}

/// One image's metric values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub dsc: f64,
    pub iou: f64,
    pub sen: f64,
    pub spec: f64,
    pub acc: f64,
}

impl MetricRow {
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        MetricRow {
            dsc: dsc(c),
            iou: iou(c),
            sen: sen(c),
            spec: spec(c),
            acc: acc(c),
        }
    }

    fn values(&self) -> [f64; 5] {
        [self.dsc, self.iou, self.sen, self.spec, self.acc]
    }

    fn from_values(v: [f64; 5]) -> Self {
        MetricRow {
            dsc: v[0],
            iou: v[1],
            sen: v[2],
            spec: v[3],
            acc: v[4],
        }
    }
}

/// Per-image rows plus their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<(String, MetricRow)>,
    pub mean: MetricRow,
    pub std: MetricRow,
}

/// Aggregate per-image rows into mean ± population standard deviation.
pub fn aggregate(rows: Vec<(String, MetricRow)>) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::invalid("aggregate needs at least one row"));
    }
    let n = rows.len() as f64;
    let mut mean = [0.0; 5];
    for (_, row) in &rows {
        for (m, v) in mean.iter_mut().zip(row.values()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = [0.0; 5];
    for (_, row) in &rows {
        for ((s, v), m) in var.iter_mut().zip(row.values()).zip(mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.map(|s| (s / n).sqrt());
    Ok(MetricReport {
        rows,
        mean: MetricRow::from_values(mean),
        std: MetricRow::from_values(std),
    })
}

/// Aggregate by pooling pixel counts over all images: the aggregate row is
/// the metric of the summed confusion counts and the spread is zero.
pub fn aggregate_pooled(
    rows: Vec<(String, MetricRow)>,
    pooled_counts: &ConfusionCounts,
) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::invalid("aggregate needs at least one row"));
    }
    Ok(MetricReport {
        rows,
        mean: MetricRow::from_counts(pooled_counts),
        std: MetricRow::from_values([0.0; 5]),
    })
}

impl MetricReport {
    /// CSV with header `image,dsc,iou,sen,spec,acc`, one row per image and a
    /// final `AGGREGATE` row of `mean±std` cells, all to four decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,dsc,iou,sen,spec,acc\n");
        for (id, row) in &self.rows {
            out.push_str(&format!(
                "{id},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                row.dsc, row.iou, row.sen, row.spec, row.acc
            ));
        }
        out.push_str(&format!(
            "AGGREGATE,{}\n",
            aggregate_cells(&self.mean, &self.std)
        ));
        out
    }
}

/// The `m±s` cell quintet used by every report table.
pub(crate) fn aggregate_cells(mean: &MetricRow, std: &MetricRow) -> String {
    format!(
        "{:.4}±{:.4},{:.4}±{:.4},{:.4}±{:.4},{:.4}±{:.4},{:.4}±{:.4}",
        mean.dsc, std.dsc, mean.iou, std.iou, mean.sen, std.sen, mean.spec, std.spec, mean.acc, std.acc
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binarize_endpoints_and_boundary() {
        let high = Tensor::full(&[2, 2], 0.9);
        assert!(binarize(&high, 0.5).unwrap().data().iter().all(|&v| v == 1.0));
        let low = Tensor::full(&[2, 2], 0.1);
        assert!(binarize(&low, 0.5).unwrap().data().iter().all(|&v| v == 0.0));
        let edge = Tensor::full(&[1], 0.5);
        assert_eq!(binarize(&edge, 0.5).unwrap().data(), &[1.0]);
        assert!(binarize(&Tensor::full(&[1], 1.5), 0.5).is_err());
    }

    #[test]
    fn confusion_perfect_prediction() {
        let gt = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!(c, ConfusionCounts::new(3, 0, 0, 3));
    }

    #[test]
    fn confusion_total_disagreement() {
        let gt = Tensor::new(vec![4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let pred = Tensor::new(vec![4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c.true_pos, 0);
        assert_eq!(c.true_neg, 0);
        assert_eq!(c.false_pos, 2);
        assert_eq!(c.false_neg, 2);
    }

    #[test]
    fn confusion_two_by_two_hand_tally() {
        let pred = Tensor::new(vec![2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let gt = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(c, ConfusionCounts::new(1, 1, 1, 1));
    }

    #[test]
    fn confusion_rejects_non_binary_input() {
        let soft = Tensor::full(&[2], 0.5);
        let hard = Tensor::ones(&[2]);
        assert!(confusion(&soft, &hard).is_err());
        assert!(confusion(&hard, &soft).is_err());
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let c = ConfusionCounts::new(5, 0, 0, 11);
        let row = MetricRow::from_counts(&c);
        for v in [row.dsc, row.iou, row.sen, row.spec, row.acc] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn hand_derived_counts_match_formulas() {
        let c = ConfusionCounts::new(3, 1, 2, 4);
        assert!((dsc(&c) - 6.0 / 9.0).abs() < 1e-12);
        assert!((iou(&c) - 0.5).abs() < 1e-12);
        assert!((sen(&c) - 0.6).abs() < 1e-12);
        assert!((spec(&c) - 0.8).abs() < 1e-12);
        assert!((acc(&c) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_masks_use_the_documented_convention() {
        let c = ConfusionCounts::new(0, 0, 0, 10);
        assert_eq!(dsc(&c), 1.0);
        assert_eq!(iou(&c), 1.0);
        assert_eq!(sen(&c), 1.0);
        assert_eq!(acc(&c), 1.0);
        // all-positive ground truth and prediction: no negatives anywhere
        let c = ConfusionCounts::new(10, 0, 0, 0);
        assert_eq!(spec(&c), 1.0);
    }

    #[test]
    fn dsc_is_monotone_transform_of_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let c = ConfusionCounts::new(
                rng.gen_range(0..100),
                rng.gen_range(0..100),
                rng.gen_range(0..100),
                rng.gen_range(0..100),
            );
            if c.true_pos + c.false_pos + c.false_neg == 0 {
                continue;
            }
            let i = iou(&c);
            let d = dsc(&c);
            assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
            assert!(d >= i);
        }
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let c = ConfusionCounts::new(
                rng.gen_range(0..50),
                rng.gen_range(0..50),
                rng.gen_range(0..50),
                rng.gen_range(0..50),
            );
            let row = MetricRow::from_counts(&c);
            for v in row.values() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn swapping_pred_and_gt_swaps_fp_and_fn() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a_data: Vec<f64> = (0..64).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let b_data: Vec<f64> = (0..64).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let a = Tensor::new(vec![8, 8], a_data).unwrap();
        let b = Tensor::new(vec![8, 8], b_data).unwrap();
        let ab = confusion(&a, &b).unwrap();
        let ba = confusion(&b, &a).unwrap();
        assert_eq!(ab.true_pos, ba.true_pos);
        assert_eq!(ab.true_neg, ba.true_neg);
        assert_eq!(ab.false_pos, ba.false_neg);
        assert_eq!(ab.false_neg, ba.false_pos);
        assert_eq!(dsc(&ab), dsc(&ba));
        assert_eq!(iou(&ab), iou(&ba));
        assert_eq!(acc(&ab), acc(&ba));
    }

    #[test]
    fn confusion_totals_equal_pixel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(1..64);
            let a: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
            let b: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
            let c = confusion(
                &Tensor::new(vec![n], a).unwrap(),
                &Tensor::new(vec![n], b).unwrap(),
            )
            .unwrap();
            assert_eq!(c.total(), n as u64);
        }
    }

    #[test]
    fn aggregate_single_row_has_zero_spread() {
        let row = MetricRow {
            dsc: 0.8,
            iou: 0.7,
            sen: 0.9,
            spec: 0.95,
            acc: 0.85,
        };
        let report = aggregate(vec![("a".into(), row)]).unwrap();
        assert_eq!(report.mean, row);
        assert_eq!(report.std.values(), [0.0; 5]);
    }

    #[test]
    fn aggregate_two_rows_population_sigma() {
        let mk = |v: f64| MetricRow {
            dsc: v,
            iou: v,
            sen: v,
            spec: v,
            acc: v,
        };
        let report = aggregate(vec![("a".into(), mk(0.5)), ("b".into(), mk(0.7))]).unwrap();
        for v in report.mean.values() {
            assert!((v - 0.6).abs() < 1e-12);
        }
        for v in report.std.values() {
            assert!((v - 0.1).abs() < 1e-12);
        }
        let csv = report.to_csv();
        assert!(csv.contains("AGGREGATE,0.6000±0.1000"));
    }

    #[test]
    fn aggregate_of_identical_rows_is_the_row() {
        let row = MetricRow {
            dsc: 0.42,
            iou: 0.42,
            sen: 0.42,
            spec: 0.42,
            acc: 0.42,
        };
        let report = aggregate(vec![("a".into(), row), ("b".into(), row), ("c".into(), row)]).unwrap();
        assert_eq!(report.mean, row);
        assert!(report.std.values().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn aggregate_rejects_empty_input() {
        assert!(aggregate(vec![]).is_err());
    }

    #[test]
    fn csv_shape_and_formatting() {
        let row = MetricRow {
            dsc: 1.0 / 3.0,
            iou: 0.25,
            sen: 0.5,
            spec: 0.75,
            acc: 0.9,
        };
        let report = aggregate(vec![("img_000".into(), row), ("img_001".into(), row)]).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 4); // header + 2 rows + aggregate
        assert_eq!(lines[0], "image,dsc,iou,sen,spec,acc");
        assert_eq!(lines[1], "img_000,0.3333,0.2500,0.5000,0.7500,0.9000");
        assert!(lines[3].starts_with("AGGREGATE,0.3333±0.0000"));
    }

    #[test]
    fn pooled_aggregate_uses_summed_counts() {
        let rows = vec![
            ("a".into(), MetricRow::from_counts(&ConfusionCounts::new(1, 0, 1, 2))),
            ("b".into(), MetricRow::from_counts(&ConfusionCounts::new(3, 1, 0, 0))),
        ];
        let mut pooled = ConfusionCounts::new(1, 0, 1, 2);
        pooled.merge(&ConfusionCounts::new(3, 1, 0, 0));
        let report = aggregate_pooled(rows, &pooled).unwrap();
        assert!((report.mean.iou - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(report.std.values(), [0.0; 5]);
    }
}
