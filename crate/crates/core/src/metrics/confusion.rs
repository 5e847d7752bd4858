//! Pixel-level binary segmentation metrics.

use crate::error::{Error, Result};

/// Number of steps in the threshold grid: thresholds are `i / THRESHOLD_STEPS`.
pub const THRESHOLD_STEPS: usize = 49;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Confusion {
    /// Counts with the `p >= threshold` positive rule.
    pub fn count(prob: &[f32], mask: &[u8], threshold: f32) -> Self {
        let mut c = Confusion::default();
        for (&p, &m) in prob.iter().zip(mask) {
            c.add(p >= threshold, m != 0);
        }
        c
    }

    #[inline]
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Zero when precision and recall are both zero.
    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn iou(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    /// Cohen's kappa; zero when chance agreement is 1.
    pub fn kappa(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        let po = (self.tp + self.tn) as f64 / n;
        let pred_pos = (self.tp + self.fp) as f64 / n;
        let act_pos = (self.tp + self.fn_) as f64 / n;
        let pe = pred_pos * act_pos + (1.0 - pred_pos) * (1.0 - act_pos);
        if pe >= 1.0 {
            0.0
        } else {
            (po - pe) / (1.0 - pe)
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub precision: f32,
    pub recall: f32,
    pub f1: f32,
    pub kappa: f32,
    /// `None` when the mask holds a single class.
    pub auc: Option<f32>,
    pub iou: f32,
    pub threshold: f32,
    pub best_threshold: f32,
    pub best_f1: f32,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// Threshold-dependent metrics. AUC and the best-threshold fields are left
/// for [`evaluate`] to fill.
pub fn confusion_metrics(prob: &[f32], mask: &[u8], threshold: f32) -> MetricsReport {
    report_from(Confusion::count(prob, mask, threshold), threshold)
}

fn report_from(c: Confusion, threshold: f32) -> MetricsReport {
    MetricsReport {
        precision: c.precision() as f32,
        recall: c.recall() as f32,
        f1: c.f1() as f32,
        kappa: c.kappa() as f32,
        auc: None,
        iou: c.iou() as f32,
        threshold,
        best_threshold: threshold,
        best_f1: c.f1() as f32,
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
    }
}

/// Everything at once: metrics at `threshold`, AUC when defined, and the
/// grid-optimal threshold.
pub fn evaluate(prob: &[f32], mask: &[u8], threshold: f32) -> MetricsReport {
    let mut r = confusion_metrics(prob, mask, threshold);
    r.auc = roc_auc(prob, mask).ok().map(|a| a as f32);
    let (t, f1) = best_threshold(prob, mask);
    r.best_threshold = t;
    r.best_f1 = f1 as f32;
    r
}

/// Area under the ROC curve as the normalised Mann–Whitney statistic, ties
/// counting one half.
pub fn roc_auc(prob: &[f32], mask: &[u8]) -> Result<f64> {
    let mut idx: Vec<usize> = (0..prob.len()).collect();
    idx.sort_by(|&a, &b| prob[a].total_cmp(&prob[b]));
    let n_pos = mask.iter().filter(|&&m| m != 0).count() as f64;
    let n_neg = prob.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(Error::invalid("roc_auc", "mask must contain both classes"));
    }
    // walk groups of equal score; each positive beats every negative strictly
    // below it and ties half of the negatives in its group
    let mut neg_below = 0.0;
    let mut u = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0.0, 0.0);
        while j < idx.len() && prob[idx[j]] == prob[idx[i]] {
            if mask[idx[j]] != 0 {
                gp += 1.0;
            } else {
                gn += 1.0;
            }
            j += 1;
        }
        u += gp * (neg_below + 0.5 * gn);
        neg_below += gn;
        i = j;
    }
    Ok(u / (n_pos * n_neg))
}

/// `i / 49` for `i = 0..=49`.
pub fn threshold_grid() -> impl Iterator<Item = f32> {
    (0..=THRESHOLD_STEPS).map(|i| (i as f64 / THRESHOLD_STEPS as f64) as f32)
}

/// F1-maximising grid threshold, ties resolved toward the lower threshold.
pub fn best_threshold(prob: &[f32], mask: &[u8]) -> (f32, f64) {
    let mut pos: Vec<f32> = Vec::new();
    let mut neg: Vec<f32> = Vec::new();
    for (&p, &m) in prob.iter().zip(mask) {
        if m != 0 {
            pos.push(p);
        } else {
            neg.push(p);
        }
    }
    pos.sort_by(f32::total_cmp);
    neg.sort_by(f32::total_cmp);
    let mut best = (0.0f32, -1.0f64);
    for t in threshold_grid() {
        let below_pos = pos.partition_point(|&p| p < t) as u64;
        let below_neg = neg.partition_point(|&p| p < t) as u64;
        let c = Confusion {
            tp: pos.len() as u64 - below_pos,
            fn_: below_pos,
            fp: neg.len() as u64 - below_neg,
            tn: below_neg,
        };
        let f1 = c.f1();
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case_3_1_1_5() -> (Vec<f32>, Vec<u8>) {
        let prob = vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mask = vec![1, 1, 1, 0, 1, 0, 0, 0, 0, 0];
        (prob, mask)
    }

    #[test]
    fn perfect_prediction() {
        let mask = vec![1u8, 0, 1, 1, 0, 0];
        let prob: Vec<f32> = mask.iter().map(|&m| m as f32).collect();
        let r = evaluate(&prob, &mask, 0.5);
        for v in [r.precision, r.recall, r.f1, r.iou, r.kappa, r.auc.unwrap()] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn small_confusion_matrix() {
        let (prob, mask) = case_3_1_1_5();
        let r = confusion_metrics(&prob, &mask, 0.5);
        assert_eq!((r.tp, r.fp, r.fn_, r.tn), (3, 1, 1, 5));
        assert_eq!(r.precision, 0.75);
        assert_eq!(r.recall, 0.75);
        assert_eq!(r.f1, 0.75);
        assert!((r.iou - 0.6).abs() < 1e-7);
        // po = 0.8, pe = 0.4·0.4 + 0.6·0.6 = 0.52
        assert!((r.kappa as f64 - 0.28 / 0.48).abs() < 1e-6);
    }

    #[test]
    fn all_negative_prediction() {
        let r = confusion_metrics(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.5);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn threshold_is_inclusive() {
        let r = confusion_metrics(&[0.5], &[1], 0.5);
        assert_eq!(r.tp, 1);
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.3, 0.4], &[1, 1]).is_err());
    }

    #[test]
    fn grid_contains_reported_thresholds() {
        let g: Vec<f32> = threshold_grid().collect();
        assert_eq!(g.len(), 50);
        assert!((g[28] - 0.5714).abs() < 5e-5);
        assert!((g[39] - 0.7959).abs() < 5e-5);
    }

    #[test]
    fn separable_instance_picks_lowest_optimum() {
        // negatives below 0.3, positives above 0.7: every grid step in
        // (0.3, 0.7] separates perfectly; the lowest is 15/49
        let prob = [0.1, 0.2, 0.3, 0.71, 0.8, 0.9];
        let mask = [0, 0, 0, 1, 1, 1];
        let (t, f1) = best_threshold(&prob, &mask);
        assert_eq!(f1, 1.0);
        assert_eq!(t, (15.0f64 / 49.0) as f32);
    }
}
