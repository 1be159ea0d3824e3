//! Disparity evaluation metrics: mean absolute error, RMS, >k px rates, and
//! the KITTI 2015 outlier rate (D1).
//!
//! A pixel is evaluable when the caller's mask says so (if given) and its
//! ground truth is nonzero; an empty evaluable set is an error, never a
//! silent zero.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Metrics over the valid pixels of one or more disparity maps.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// Mean absolute disparity error (end-point error), px.
    pub mae: f64,
    /// Root-mean-square disparity error, px.
    pub rms: f64,
    /// Percentage of valid pixels with error > k px, for k = 1..=5.
    pub rate_gt: [f64; 5],
    /// KITTI 2015 outlier percentage: error > 3 px and > 5% of ground truth.
    pub d1: f64,
    /// Number of valid pixels evaluated.
    pub valid_count: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "mae,rms,gt1,gt2,gt3,gt4,gt5,d1,n";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.mae,
            self.rms,
            self.rate_gt[0],
            self.rate_gt[1],
            self.rate_gt[2],
            self.rate_gt[3],
            self.rate_gt[4],
            self.d1,
            self.valid_count
        )
    }

    /// Flat `key=value` block, one metric per line.
    pub fn key_value_block(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("mae={:.6}\n", self.mae));
        s.push_str(&format!("rms={:.6}\n", self.rms));
        for (i, r) in self.rate_gt.iter().enumerate() {
            s.push_str(&format!("gt{}={:.6}\n", i + 1, r));
        }
        s.push_str(&format!("d1={:.6}\n", self.d1));
        s.push_str(&format!("n={}\n", self.valid_count));
        s
    }

    /// Unweighted mean over per-sample reports (valid counts are summed).
    pub fn mean_of(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::invalid("mean of zero metric reports"));
        }
        let n = reports.len() as f64;
        let mut rate_gt = [0.0; 5];
        for k in 0..5 {
            rate_gt[k] = reports.iter().map(|r| r.rate_gt[k]).sum::<f64>() / n;
        }
        Ok(MetricReport {
            mae: reports.iter().map(|r| r.mae).sum::<f64>() / n,
            rms: reports.iter().map(|r| r.rms).sum::<f64>() / n,
            rate_gt,
            d1: reports.iter().map(|r| r.d1).sum::<f64>() / n,
            valid_count: reports.iter().map(|r| r.valid_count).sum(),
        })
    }
}

fn check_shapes<E: Element>(
    pred: &Tensor<E>,
    gt: &Tensor<E>,
    mask: Option<&[bool]>,
) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("metrics pred vs gt", pred.shape(), gt.shape()));
    }
    if let Some(m) = mask {
        if m.len() != gt.numel() {
            return Err(Error::invalid(format!(
                "mask length {} vs {} pixels",
                m.len(),
                gt.numel()
            )));
        }
    }
    Ok(())
}

fn valid_at<E: Element>(gt: &Tensor<E>, mask: Option<&[bool]>, i: usize) -> bool {
    mask.map_or(true, |m| m[i]) && gt.data()[i] != E::zero()
}

/// Error-rate metrics over the valid pixels of `pred` against `gt`.
pub fn disparity_metrics<E: Element>(
    pred: &Tensor<E>,
    gt: &Tensor<E>,
    mask: Option<&[bool]>,
) -> Result<MetricReport> {
    check_shapes(pred, gt, mask)?;
    let mut n = 0usize;
    let mut sum_e = 0.0f64;
    let mut sum_e2 = 0.0f64;
    let mut over = [0usize; 5];
    let mut d1_outliers = 0usize;
    for i in 0..gt.numel() {
        if !valid_at(gt, mask, i) {
            continue;
        }
        n += 1;
        let g = gt.data()[i].as_f64();
        let e = (pred.data()[i].as_f64() - g).abs();
        sum_e += e;
        sum_e2 += e * e;
        for (k, slot) in over.iter_mut().enumerate() {
            if e > (k + 1) as f64 {
                *slot += 1;
            }
        }
        if e > 3.0 && e > 0.05 * g {
            d1_outliers += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    let nf = n as f64;
    let mut rate_gt = [0.0; 5];
    for k in 0..5 {
        rate_gt[k] = 100.0 * over[k] as f64 / nf;
    }
    Ok(MetricReport {
        mae: sum_e / nf,
        rms: (sum_e2 / nf).sqrt(),
        rate_gt,
        d1: 100.0 * d1_outliers as f64 / nf,
        valid_count: n,
    })
}

/// KITTI 2015 outlier percentage: a valid pixel is an outlier iff its error
/// exceeds 3 px and 5% of the true disparity.
pub fn d1_rate<E: Element>(pred: &Tensor<E>, gt: &Tensor<E>, mask: Option<&[bool]>) -> Result<f64> {
    check_shapes(pred, gt, mask)?;
    let mut n = 0usize;
    let mut outliers = 0usize;
    for i in 0..gt.numel() {
        if !valid_at(gt, mask, i) {
            continue;
        }
        n += 1;
        let g = gt.data()[i].as_f64();
        let e = (pred.data()[i].as_f64() - g).abs();
        if e > 3.0 && e > 0.05 * g {
            outliers += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(100.0 * outliers as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example_two_valid_pixels() {
        // gt [10, 0, 20], pred [12, 5, 26]: pixel 1 unlabeled; errors {2, 6}.
        let gt = Tensor::new(&[3], vec![10.0f64, 0.0, 20.0]).unwrap();
        let pred = Tensor::new(&[3], vec![12.0, 5.0, 26.0]).unwrap();
        let r = disparity_metrics(&pred, &gt, None).unwrap();
        assert_eq!(r.valid_count, 2);
        assert_eq!(r.rate_gt[2], 50.0);
        assert_eq!(r.mae, 4.0);
        assert!((r.rms - 20.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_all_zero() {
        let gt = Tensor::new(&[4], vec![3.0f64, 7.0, 1.0, 9.0]).unwrap();
        let r = disparity_metrics(&gt, &gt, None).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.rms, 0.0);
        assert_eq!(r.rate_gt, [0.0; 5]);
        assert_eq!(r.d1, 0.0);
    }

    #[test]
    fn d1_conjunction_examples() {
        // gt 100, pred 104: error 4 > 3 but 4 < 5 = 5% of 100 -> inlier.
        let gt = Tensor::new(&[1], vec![100.0f64]).unwrap();
        let pred = Tensor::new(&[1], vec![104.0]).unwrap();
        assert_eq!(d1_rate(&pred, &gt, None).unwrap(), 0.0);
        // gt 10, pred 14: error 4 > 3 and 4 > 0.5 -> outlier.
        let gt = Tensor::new(&[1], vec![10.0f64]).unwrap();
        let pred = Tensor::new(&[1], vec![14.0]).unwrap();
        assert_eq!(d1_rate(&pred, &gt, None).unwrap(), 100.0);
    }

    #[test]
    fn empty_valid_set_is_an_error() {
        let gt = Tensor::new(&[2], vec![0.0f64, 0.0]).unwrap();
        let pred = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            disparity_metrics(&pred, &gt, None),
            Err(Error::NoValidPixels)
        ));
        let gt = Tensor::new(&[1], vec![5.0f64]).unwrap();
        let pred = Tensor::new(&[1], vec![5.0]).unwrap();
        assert!(matches!(
            d1_rate(&pred, &gt, Some(&[false])),
            Err(Error::NoValidPixels)
        ));
    }

    #[test]
    fn mask_excludes_pixels_entirely() {
        let gt = Tensor::new(&[2], vec![10.0f64, 10.0]).unwrap();
        let pred = Tensor::new(&[2], vec![10.0, 99.0]).unwrap();
        let r = disparity_metrics(&pred, &gt, Some(&[true, false])).unwrap();
        assert_eq!(r.valid_count, 1);
        assert_eq!(r.mae, 0.0);
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let gt = Tensor::new(&[1], vec![5.0f64]).unwrap();
        let r = disparity_metrics(&gt, &gt, None).unwrap();
        let row = r.csv_row();
        assert_eq!(
            row.split(',').count(),
            MetricReport::CSV_HEADER.split(',').count()
        );
    }
}
