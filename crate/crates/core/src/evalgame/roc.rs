use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples with `score >= threshold` are called positive.
    pub threshold: f64,
}

/// ROC curve with one point per distinct threshold, plus the rank-statistic
/// AUC where tied positive/negative pairs count one half.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<(Vec<RocPoint>, f64)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::param("score", format!("{} is not finite", s.score)));
    }
    let pos = samples.iter().filter(|s| s.label).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut curve = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        let (tp0, fp0) = (tp, fp);
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid over a tie block: negatives beaten by earlier positives
        // plus half of the tied pairs.
        area += (fp - fp0) as f64 * (tp0 as f64 + 0.5 * (tp - tp0) as f64);
        curve.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        });
    }
    Ok((curve, area / (pos * neg) as f64))
}

/// Threshold that best equalizes false-positive and false-negative rates
/// between two score sets; ties are broken toward the lower total error.
pub fn calibrate_threshold(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::SingleClass);
    }
    let mut all: Vec<f64> = positives.iter().chain(negatives).copied().collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut cands = vec![all[0] - 1.0];
    cands.extend(all.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    cands.push(all[all.len() - 1] + 1.0);
    let rate =
        |v: &[f64], t: f64, above: bool| v.iter().filter(|&&s| (s >= t) == above).count() as f64 / v.len() as f64;
    let key = |t: f64| {
        let fpr = rate(negatives, t, true);
        let fnr = rate(positives, t, false);
        ((fpr - fnr).abs(), fpr + fnr)
    };
    Ok(cands
        .into_iter()
        .min_by(|&a, &b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
        })
        .expect("non-empty candidates"))
}

pub fn write_roc_csv(path: &std::path::Path, curve: &[RocPoint]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(score: f64, label: bool) -> ScoredSample {
        ScoredSample { score, label }
    }

    fn brute(samples: &[ScoredSample]) -> f64 {
        let mut acc = 0.0;
        let mut n = 0.0;
        for p in samples.iter().filter(|s| s.label) {
            for q in samples.iter().filter(|s| !s.label) {
                n += 1.0;
                acc += if p.score > q.score {
                    1.0
                } else if p.score == q.score {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / n
    }

    #[test]
    fn limit_cases() {
        let sep = [s(0.9, true), s(0.8, true), s(0.1, false)];
        assert_eq!(roc_auc(&sep).unwrap().1, 1.0);
        let eq = [s(0.5, true), s(0.5, false), s(0.5, false)];
        assert_eq!(roc_auc(&eq).unwrap().1, 0.5);
        assert!(matches!(roc_auc(&[s(0.1, true)]), Err(Error::SingleClass)));
        let (curve, _) = roc_auc(&sep).unwrap();
        assert_eq!(curve.first().map(|p| (p.fpr, p.tpr)), Some((0.0, 0.0)));
        assert_eq!(curve.last().map(|p| (p.fpr, p.tpr)), Some((1.0, 1.0)));
    }

    #[test]
    fn threshold_separates_clean_sets() {
        let t = calibrate_threshold(&[0.8, 0.9, 0.7], &[0.1, 0.2]).unwrap();
        assert!(t > 0.2 && t < 0.7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn auc_matches_pairwise_oracle(raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..30)) {
            let mut v: Vec<ScoredSample> = raw.iter().map(|&(q, l)| s(q as f64 / 5.0, l)).collect();
            v[0].label = true;
            v[1].label = false;
            let (curve, auc) = roc_auc(&v).unwrap();
            prop_assert!((auc - brute(&v)).abs() < 1e-12);
            for w in curve.windows(2) {
                prop_assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr);
            }
        }
    }
}
