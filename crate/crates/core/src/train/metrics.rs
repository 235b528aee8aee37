use serde::{Deserialize, Serialize};

/// Confusion counts with label 1 as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[usize], actual: &[usize]) -> Self {
        let mut c = Confusion::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == 1, a == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `None` when there are no positives.
    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub confusion: Confusion,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub accuracy: f64,
    /// Seconds per single-sample forward pass; `None` unless benchmarked.
    pub latency_median: Option<f64>,
    pub latency_p95: Option<f64>,
}

impl MetricsReport {
    /// `confusion` must be non-empty.
    pub fn from_confusion(confusion: Confusion) -> Self {
        MetricsReport {
            confusion,
            precision: confusion.precision(),
            recall: confusion.recall(),
            accuracy: confusion.accuracy().unwrap_or(f64::NAN),
            latency_median: None,
            latency_p95: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_confusion() {
        let c = Confusion { tp: 3, fp: 1, tn: 4, fn_: 2 };
        assert_eq!(c.precision(), Some(0.75));
        assert_eq!(c.recall(), Some(0.6));
        assert_eq!(c.accuracy(), Some(0.7));
    }

    #[test]
    fn constant_negative_predictor() {
        let actual = [0, 1, 0, 1, 1, 0];
        let c = Confusion::from_predictions(&[0; 6], &actual);
        let r = MetricsReport::from_confusion(c);
        assert_eq!((r.precision, r.recall, r.accuracy), (None, Some(0.0), 0.5));
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["precision"].is_null());
        assert_eq!(json["fn"], 3);
    }
}
