//! Detection and significance statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, ChiSquared, ContinuousCDF};

use crate::error::{domain, LpsrError, Result};

fn undefined(msg: impl Into<String>) -> LpsrError {
    LpsrError::Undefined(msg.into())
}

/// Area under the ROC curve via the Mann-Whitney statistic. Higher scores
/// should indicate the positive class; tied scores share midranks, so each
/// tied positive/negative pair counts one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(domain("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(domain("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(undefined(format!("AUC needs both classes ({n_pos} positive, {n_neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * midrank;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// Metrics whose denominator is zero are `None` rather than 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub fpr: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn metrics(&self) -> ConfusionMetrics {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            _ => None,
        };
        ConfusionMetrics {
            precision,
            recall,
            f1,
            fpr: ratio(self.fp, self.fp + self.tn),
        }
    }
}

/// Per-problem agreement between methods `a` and `b`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchedPairs {
    pub both_correct: u64,
    pub a_only: u64,
    pub b_only: u64,
    pub both_wrong: u64,
}

impl MatchedPairs {
    pub fn from_outcomes(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut m = Self::default();
        for (a, b) in pairs {
            match (a, b) {
                (true, true) => m.both_correct += 1,
                (true, false) => m.a_only += 1,
                (false, true) => m.b_only += 1,
                (false, false) => m.both_wrong += 1,
            }
        }
        m
    }

    pub fn total(&self) -> u64 {
        self.both_correct + self.a_only + self.b_only + self.both_wrong
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemar {
    pub chi2: f64,
    pub p: f64,
    pub continuity_corrected: bool,
}

/// McNemar's test on the discordant counts `b` and `c`, with continuity
/// correction `(|b - c| - 1)^2 / (b + c)`. The formula is applied as written,
/// so `b == c` gives `1 / (b + c)` rather than zero.
pub fn mcnemar(b: u64, c: u64) -> Result<McNemar> {
    mcnemar_with(b, c, true)
}

pub fn mcnemar_with(b: u64, c: u64, continuity: bool) -> Result<McNemar> {
    if b + c == 0 {
        return Err(undefined("McNemar test with no discordant pairs"));
    }
    let diff = b.abs_diff(c) as f64;
    let num = if continuity { diff - 1.0 } else { diff };
    let chi2 = num * num / (b + c) as f64;
    let dist = ChiSquared::new(1.0).expect("valid dof");
    Ok(McNemar {
        chi2,
        p: dist.sf(chi2),
        continuity_corrected: continuity,
    })
}

/// p-values below 1e-16 print as `<1e-16`.
pub fn format_p(p: f64) -> String {
    if p < 1e-16 {
        "<1e-16".to_string()
    } else {
        format!("{p:.3e}")
    }
}

/// Exact binomial confidence interval from beta quantiles.
pub fn clopper_pearson(k: u64, n: u64, conf: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(domain(format!("invalid binomial counts k={k}, n={n}")));
    }
    if !(conf > 0.0 && conf < 1.0) {
        return Err(domain("confidence must be in (0, 1)"));
    }
    let a = (1.0 - conf) / 2.0;
    let (kf, nf) = (k as f64, n as f64);
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(kf, nf - kf + 1.0).expect("positive shape").inverse_cdf(a)
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new(kf + 1.0, nf - kf).expect("positive shape").inverse_cdf(1.0 - a)
    };
    Ok((lo, hi))
}

/// Percentile bootstrap interval for the mean of `outcomes`.
pub fn bootstrap_ci(outcomes: &[bool], resamples: usize, conf: f64, seed: u64) -> Result<(f64, f64)> {
    if outcomes.is_empty() {
        return Err(domain("bootstrap of an empty sample"));
    }
    if resamples == 0 || !(conf > 0.0 && conf < 1.0) {
        return Err(domain("bootstrap needs resamples > 0 and confidence in (0, 1)"));
    }
    let n = outcomes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| {
            let hits = (0..n).filter(|_| outcomes[rng.random_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    let a = (1.0 - conf) / 2.0;
    Ok((quantile(&means, a), quantile(&means, 1.0 - a)))
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}
