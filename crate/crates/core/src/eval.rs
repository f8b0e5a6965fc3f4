//! IoU and the R@m,IoU@n recall protocol.

use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{predict, SampleInputs};
use crate::params::ModelParams;

/// Temporal IoU of two closed intervals. Two point intervals give `0/0`,
/// which is defined as 0.
pub fn interval_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s <= e) {
            return Err(Error::Usage(format!("interval ({s}, {e}) has start after end")));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = a.1.max(b.1) - a.0.min(b.0);
    Ok(if union > 0.0 { inter / union } else { 0.0 })
}

/// Fraction of samples whose first `m` predictions include one with IoU
/// strictly above `n`.
pub fn recall_at(predictions: &[Vec<(f64, f64)>], truths: &[(f64, f64)], m: usize, n: f64) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::Evaluation(format!(
            "{} prediction lists for {} ground truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Evaluation("no samples to evaluate".into()));
    }
    let mut hits = 0usize;
    for (i, (preds, &truth)) in predictions.iter().zip(truths).enumerate() {
        if preds.is_empty() {
            return Err(Error::Evaluation(format!("sample {i} has no predictions")));
        }
        let mut hit = false;
        for &p in preds.iter().take(m) {
            if interval_iou(p, truth)? > n {
                hit = true;
                break;
            }
        }
        hits += hit as usize;
    }
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub m: usize,
    /// `(n, R@m,IoU@n)` in threshold order.
    pub recall: Vec<(f64, f64)>,
    pub samples: usize,
    pub mean_top1_iou: f64,
}

impl MetricReport {
    pub fn key(m: usize, n: f64) -> String {
        format!("r_at_{m}_iou_{n}")
    }

    pub fn get(&self, n: f64) -> Option<f64> {
        self.recall.iter().find(|r| r.0 == n).map(|r| r.1)
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for &(n, r) in &self.recall {
            map.insert(Self::key(self.m, n), Value::from(r));
        }
        map.insert("samples".into(), Value::from(self.samples));
        map.insert("mean_top1_iou".into(), Value::from(self.mean_top1_iou));
        Value::Object(map)
    }
}

/// Scores ranked refined predictions, in seconds, against ground truths.
pub fn report(predictions: &[Vec<(f64, f64)>], truths: &[(f64, f64)], m: usize, thresholds: &[f64]) -> Result<MetricReport> {
    let recall = thresholds
        .iter()
        .map(|&n| Ok((n, recall_at(predictions, truths, m, n)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (p, &t) in predictions.iter().zip(truths) {
        total += interval_iou(p[0], t)?;
    }
    Ok(MetricReport {
        m,
        recall,
        samples: truths.len(),
        mean_top1_iou: total / truths.len() as f64,
    })
}

/// Runs the model on every sample and reports recall at the configured
/// thresholds.
pub fn evaluate(params: &ModelParams, cfg: &RunConfig, samples: &[SampleInputs], m: usize) -> Result<MetricReport> {
    if m == 0 {
        return Err(Error::Usage("top-m must be at least 1".into()));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    for s in samples {
        let set = predict(params, cfg, s)?;
        predictions.push(set.localize(m).iter().map(|x| x.seconds).collect());
    }
    let truths: Vec<(f64, f64)> = samples.iter().map(|s| s.moment).collect();
    report(&predictions, &truths, m, &cfg.iou_thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_examples() {
        assert_eq!(interval_iou((1.0, 3.0), (1.0, 3.0)).unwrap(), 1.0);
        assert_eq!(interval_iou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!((interval_iou((2.0, 6.0), (4.0, 8.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(interval_iou((2.0, 2.0), (2.0, 2.0)).unwrap(), 0.0);
        assert!(matches!(interval_iou((3.0, 2.0), (0.0, 1.0)), Err(Error::Usage(_))));
    }

    #[test]
    fn recall_examples() {
        let truths = [(0.0, 10.0), (0.0, 10.0), (0.0, 10.0)];
        let preds = vec![vec![(0.0, 8.0)], vec![(0.0, 4.0)], vec![(0.0, 6.0)]];
        assert!((recall_at(&preds, &truths, 1, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let exact: Vec<_> = truths.iter().map(|&t| vec![t]).collect();
        assert_eq!(recall_at(&exact, &truths, 1, 0.99).unwrap(), 1.0);
        let far: Vec<_> = truths.iter().map(|_| vec![(20.0, 30.0)]).collect();
        assert_eq!(recall_at(&far, &truths, 1, 0.0).unwrap(), 0.0);
        // Strict inequality: IoU of exactly 0.5 does not count at n = 0.5.
        assert_eq!(recall_at(&[vec![(0.0, 5.0)]], &[(0.0, 10.0)], 1, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn empty_prediction_list_names_the_sample() {
        let err = recall_at(&[vec![(0.0, 1.0)], vec![]], &[(0.0, 1.0), (0.0, 1.0)], 1, 0.5).unwrap_err();
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn report_json_keys() {
        let r = report(&[vec![(0.0, 8.0)]], &[(0.0, 10.0)], 1, &[0.3, 0.5, 0.7]).unwrap();
        let j = r.to_json();
        assert_eq!(j["r_at_1_iou_0.3"], 1.0);
        assert_eq!(j["r_at_1_iou_0.5"], 1.0);
        assert_eq!(j["r_at_1_iou_0.7"], 1.0);
        assert_eq!(j["samples"], 1);
    }

    fn interval() -> impl Strategy<Value = (f64, f64)> {
        (0.0..50.0f64, 0.0..20.0f64).prop_map(|(s, l)| (s, s + l))
    }

    proptest! {
        #[test]
        fn iou_is_bounded_and_symmetric(a in interval(), b in interval()) {
            let x = interval_iou(a, b).unwrap();
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, interval_iou(b, a).unwrap());
        }

        #[test]
        fn recall_is_monotone_and_scale_invariant(
            cases in prop::collection::vec((prop::collection::vec(interval(), 1..5), interval()), 1..20),
            c in 0.1..10.0f64,
        ) {
            let preds: Vec<_> = cases.iter().map(|c| c.0.clone()).collect();
            let truths: Vec<_> = cases.iter().map(|c| c.1).collect();
            let mut last = f64::INFINITY;
            for n in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let r = recall_at(&preds, &truths, 1, n).unwrap();
                prop_assert!(r <= last);
                last = r;
                prop_assert!(recall_at(&preds, &truths, 3, n).unwrap() >= r);
            }
            let scale = |x: (f64, f64)| (x.0 * c, x.1 * c);
            let sp: Vec<Vec<_>> = preds.iter().map(|p| p.iter().map(|&x| scale(x)).collect()).collect();
            let st: Vec<_> = truths.iter().map(|&t| scale(t)).collect();
            for n in [0.3, 0.5, 0.7] {
                // Scaling can move an IoU across n by rounding only when it
                // sits within an ulp of n; such draws have measure zero here.
                prop_assert_eq!(recall_at(&preds, &truths, 1, n).unwrap(), recall_at(&sp, &st, 1, n).unwrap());
            }
        }
    }
}
