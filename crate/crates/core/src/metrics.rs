//! Rank and linear correlation between predicted and target quality.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least two samples, got {0}")]
    TooFew(usize),
    #[error("non-finite sample")]
    NonFinite,
    #[error("zero variance")]
    ZeroVariance,
}

/// A prediction and its target on the same quality scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScorePair {
    pub predicted: f64,
    pub target: f64,
}

impl LabeledScorePair {
    pub fn unzip(pairs: &[Self]) -> (Vec<f64>, Vec<f64>) {
        pairs.iter().map(|p| (p.predicted, p.target)).unzip()
    }
}

fn check(xs: &[f64], ys: &[f64]) -> Result<(), MetricError> {
    if xs.len() != ys.len() {
        return Err(MetricError::Length(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(MetricError::TooFew(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(Ordering::Equal)
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j hold ranks i+1..=j+1
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_unchecked(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation on raw values.
pub fn plcc(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    check(xs, ys)?;
    pearson_unchecked(xs, ys)
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(xs: &[f64], ys: &[f64]) -> Result<f64, MetricError> {
    check(xs, ys)?;
    pearson_unchecked(&average_ranks(xs), &average_ranks(ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_average_over_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[3.0, 3.0, 3.0]), vec![2.0, 2.0, 2.0]);
        assert_eq!(average_ranks(&[0.5, -1.0]), vec![2.0, 1.0]);
    }

    #[test]
    fn srcc_examples() {
        let xs = [0.1, 0.4, 0.35, 2.0, 7.0];
        let inc: Vec<f64> = xs.iter().map(|v| v * v * v + 1.0).collect();
        assert!((srcc(&xs, &inc).unwrap() - 1.0).abs() < 1e-15);
        let dec: Vec<f64> = xs.iter().map(|v| -v).collect();
        assert!((srcc(&xs, &dec).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(srcc(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::ZeroVariance));
    }

    #[test]
    fn srcc_with_ties_matches_hand_computation() {
        // ranks [1, 2.5, 2.5, 4] vs [1, 3, 2, 4]; both centred on 2.5
        // numerator 1.5*1.5 + 0 + 0 + 1.5*1.5 = 4.5
        // sxx = 2.25+0+0+2.25 = 4.5, syy = 2.25+0.25+0.25+2.25 = 5
        let expected = 4.5 / (4.5f64.sqrt() * 5f64.sqrt());
        let got = srcc(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn plcc_examples() {
        let xs = [0.3, -1.0, 2.5, 4.0, 0.0];
        let affine: Vec<f64> = xs.iter().map(|v| 2.0 * v + 3.0).collect();
        assert!((plcc(&xs, &affine).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        assert!((plcc(&xs, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(plcc(&xs, &[1.0; 5]).is_err());
        assert!(plcc(&xs, &[1.0; 4]).is_err());
        assert!(plcc(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn plcc_affine_invariance(
            xs in proptest::collection::vec(-10.0f64..10.0, 3..30),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, v)| v.sin() + i as f64 * 0.1).collect();
            if let Ok(r) = plcc(&xs, &ys) {
                let t: Vec<f64> = ys.iter().map(|v| a * v + b).collect();
                prop_assert!((plcc(&xs, &t).unwrap() - r).abs() < 1e-9);
                let n: Vec<f64> = ys.iter().map(|v| -v).collect();
                prop_assert!((plcc(&xs, &n).unwrap() + r).abs() < 1e-12);
            }
        }

        #[test]
        fn srcc_monotone_invariance(xs in proptest::collection::vec(-3.0f64..3.0, 3..30)) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, v)| (v * 3.0 + i as f64).cos()).collect();
            if let Ok(r) = srcc(&xs, &ys) {
                let e: Vec<f64> = xs.iter().map(|v| v.exp()).collect();
                let c: Vec<f64> = xs.iter().map(|v| v * v * v).collect();
                let l: Vec<f64> = xs.iter().map(|v| 4.0 * v - 1.0).collect();
                prop_assert_eq!(srcc(&e, &ys).unwrap(), r);
                prop_assert_eq!(srcc(&c, &ys).unwrap(), r);
                prop_assert_eq!(srcc(&l, &ys).unwrap(), r);
            }
        }
    }
}
