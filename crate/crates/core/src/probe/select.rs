//! Univariate feature selection by class separation.
//!
//! Each feature is scored with Welch's two-sample t-statistic. Binary labels
//! compare class 1 against class 0; with more classes the score is the
//! largest one-vs-rest |t|. Zero-variance features are never selected.

use crate::features::SparseVec;

use super::ProbeError;

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sumsq: f64,
}

impl Moments {
    fn mean(&self) -> f64 {
        if self.n == 0.0 {
            0.0
        } else {
            self.sum / self.n
        }
    }

    fn sample_var(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        let m = self.mean();
        ((self.sumsq - self.n * m * m) / (self.n - 1.0)).max(0.0)
    }

    fn minus(&self, other: &Moments) -> Moments {
        Moments {
            n: self.n - other.n,
            sum: self.sum - other.sum,
            sumsq: self.sumsq - other.sumsq,
        }
    }
}

/// |Welch t| between groups `a` and `b`. Identical zero-variance groups with
/// different means separate perfectly and score `+inf`.
fn welch_t(a: &Moments, b: &Moments) -> f64 {
    if a.n == 0.0 || b.n == 0.0 {
        return 0.0;
    }
    let diff = (a.mean() - b.mean()).abs();
    let se = (a.sample_var() / a.n + b.sample_var() / b.n).sqrt();
    if se > 0.0 {
        diff / se
    } else if diff > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

pub(crate) fn check_labels(labels: &[usize], n_classes: usize) -> Result<(), ProbeError> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(ProbeError::BadLabel { label: bad, n_classes });
    }
    let mut seen = vec![false; n_classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if seen.iter().filter(|s| **s).count() < 2 {
        return Err(ProbeError::SingleClass);
    }
    Ok(())
}

/// Separation score per feature, `None` where the feature has zero variance.
pub fn separation_scores(
    features: &[SparseVec],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Option<f64>>, ProbeError> {
    if features.len() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            features: features.len(),
            labels: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(ProbeError::Empty);
    }
    check_labels(labels, n_classes)?;
    let dim = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != dim) {
        return Err(ProbeError::FeatureDimension {
            expected: dim,
            found: bad.len(),
        });
    }

    let mut counts = vec![0.0; n_classes];
    labels.iter().for_each(|&l| counts[l] += 1.0);
    // per class, per feature
    let mut moments = vec![vec![Moments::default(); dim]; n_classes];
    for (z, &label) in features.iter().zip(labels) {
        for (j, v) in z.iter() {
            if !v.is_finite() {
                return Err(ProbeError::NonFinite);
            }
            let m = &mut moments[label][j];
            m.sum += v;
            m.sumsq += v * v;
        }
    }
    for (c, class_moments) in moments.iter_mut().enumerate() {
        class_moments.iter_mut().for_each(|m| m.n = counts[c]);
    }

    let scores = (0..dim)
        .map(|j| {
            let total = moments.iter().fold(Moments::default(), |acc, cm| Moments {
                n: acc.n + cm[j].n,
                sum: acc.sum + cm[j].sum,
                sumsq: acc.sumsq + cm[j].sumsq,
            });
            if total.sample_var() <= 0.0 {
                return None;
            }
            let score = if n_classes == 2 {
                welch_t(&moments[1][j], &moments[0][j])
            } else {
                (0..n_classes)
                    .filter(|&c| counts[c] > 0.0)
                    .map(|c| welch_t(&moments[c][j], &total.minus(&moments[c][j])))
                    .fold(0.0, f64::max)
            };
            Some(score)
        })
        .collect();
    Ok(scores)
}

/// Top `n_select` features by separation score (ties to the lower index),
/// returned sorted ascending by index.
pub fn select_features(
    features: &[SparseVec],
    labels: &[usize],
    n_classes: usize,
    n_select: usize,
) -> Result<Vec<usize>, ProbeError> {
    if n_select == 0 {
        return Err(ProbeError::Config("n_select must be at least 1".into()));
    }
    let scores = separation_scores(features, labels, n_classes)?;
    let mut ranked: Vec<(usize, f64)> = scores
        .into_iter()
        .enumerate()
        .filter_map(|(j, s)| s.map(|s| (j, s)))
        .collect();
    if ranked.is_empty() {
        return Err(ProbeError::NoSeparatingFeature);
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut selected: Vec<usize> = ranked.into_iter().take(n_select).map(|(j, _)| j).collect();
    selected.sort_unstable();
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct two-pass Welch statistic on a dense column.
    fn brute_force_t(col: &[f64], labels: &[usize], pos: usize) -> f64 {
        let a: Vec<f64> = col.iter().zip(labels).filter(|(_, &l)| l == pos).map(|(v, _)| *v).collect();
        let b: Vec<f64> = col.iter().zip(labels).filter(|(_, &l)| l != pos).map(|(v, _)| *v).collect();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let var = |x: &[f64]| {
            let m = mean(x);
            if x.len() < 2 {
                0.0
            } else {
                x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
            }
        };
        let se = (var(&a) / a.len() as f64 + var(&b) / b.len() as f64).sqrt();
        let diff = (mean(&a) - mean(&b)).abs();
        if se == 0.0 {
            if diff > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        } else {
            diff / se
        }
    }

    fn noisy_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> (Vec<SparseVec>, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let feats = labels
            .iter()
            .map(|_| {
                let dense: Vec<f64> = (0..dim)
                    .map(|_| if rng.random_bool(0.4) { rng.random_range(0.0..2.0) } else { 0.0 })
                    .collect();
                SparseVec::from_dense(&dense)
            })
            .collect();
        (feats, labels)
    }

    #[test]
    fn perfect_split_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut feats, labels) = noisy_set(&mut rng, 60, 12, 2);
        for (z, &l) in feats.iter_mut().zip(&labels) {
            let mut dense = z.to_dense();
            dense[7] = if l == 1 { 1.0 } else { 0.0 };
            *z = SparseVec::from_dense(&dense);
        }
        let scores = separation_scores(&feats, &labels, 2).unwrap();
        let best = (0..12)
            .max_by(|&a, &b| scores[a].unwrap_or(-1.0).total_cmp(&scores[b].unwrap_or(-1.0)).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(best, 7);
        assert_eq!(select_features(&feats, &labels, 2, 1).unwrap(), vec![7]);
    }

    #[test]
    fn scores_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for classes in [2, 3] {
            let (feats, labels) = noisy_set(&mut rng, 45, 10, classes);
            let scores = separation_scores(&feats, &labels, classes).unwrap();
            for j in 0..10 {
                let col: Vec<f64> = feats.iter().map(|z| z.get(j)).collect();
                let want = if classes == 2 {
                    brute_force_t(&col, &labels, 1)
                } else {
                    (0..classes).map(|c| brute_force_t(&col, &labels, c)).fold(0.0, f64::max)
                };
                let got = scores[j].unwrap();
                assert!((got - want).abs() <= 1e-9 * want.max(1.0), "feature {j}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn constant_features_error() {
        let feats = vec![SparseVec::from_dense(&[1.0, 0.0]); 4];
        let labels = vec![0, 1, 0, 1];
        assert!(matches!(select_features(&feats, &labels, 2, 1), Err(ProbeError::NoSeparatingFeature)));
    }

    #[test]
    fn single_class_error() {
        let feats = vec![SparseVec::from_dense(&[1.0]), SparseVec::from_dense(&[2.0])];
        assert!(matches!(select_features(&feats, &[1, 1], 2, 1), Err(ProbeError::SingleClass)));
    }

    #[test]
    fn ties_break_to_lower_index() {
        let labels = vec![0, 0, 1, 1];
        let feats: Vec<SparseVec> = labels
            .iter()
            .map(|&l| SparseVec::from_dense(&[0.0, l as f64, l as f64, 0.5]))
            .collect();
        assert_eq!(select_features(&feats, &labels, 2, 1).unwrap(), vec![1]);
        assert_eq!(select_features(&feats, &labels, 2, 10).unwrap(), vec![1, 2]);
    }
}
