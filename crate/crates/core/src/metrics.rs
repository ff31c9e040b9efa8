//! Subset accuracies and the dispersion of per-class recalls.

use std::fmt;

use crate::error::{Error, Result};

/// Fraction of samples whose label is in `filter` that are predicted
/// correctly.
pub fn accuracy(preds: &[usize], labels: &[usize], filter: &[usize]) -> Result<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for (p, l) in preds.iter().zip(labels) {
        if filter.contains(l) {
            n += 1;
            ok += (p == l) as usize;
        }
    }
    if n == 0 {
        return Err(Error::EmptySubset);
    }
    Ok(ok as f64 / n as f64)
}

/// Recall of every class of `classes` that has at least one sample.
pub fn per_class_recalls(preds: &[usize], labels: &[usize], classes: &[usize]) -> Vec<f64> {
    classes
        .iter()
        .filter_map(|c| {
            let (mut n, mut ok) = (0usize, 0usize);
            for (p, l) in preds.iter().zip(labels) {
                if l == c {
                    n += 1;
                    ok += (p == l) as usize;
                }
            }
            (n > 0).then(|| ok as f64 / n as f64)
        })
        .collect()
}

/// Population standard deviation of per-class recalls.
pub fn dispersion(recalls: &[f64]) -> Result<f64> {
    if recalls.is_empty() {
        return Err(Error::EmptySubset);
    }
    let n = recalls.len() as f64;
    let mean = recalls.iter().sum::<f64>() / n;
    Ok((recalls.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubsetName {
    /// Pre-training classes.
    Pt,
    /// Classes of the first incremental task.
    Old,
    /// Classes of the current task.
    New,
    /// Every class learned so far.
    Seen,
    /// Every class of the scenario, reported after the last task.
    Final,
    /// Buffer samples (train) or the test samples of buffered classes (test).
    Buffer,
}

impl SubsetName {
    pub const ALL: [SubsetName; 6] = [
        SubsetName::Pt,
        SubsetName::Old,
        SubsetName::New,
        SubsetName::Seen,
        SubsetName::Final,
        SubsetName::Buffer,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SubsetName::Pt => "PT",
            SubsetName::Old => "old",
            SubsetName::New => "new",
            SubsetName::Seen => "seen",
            SubsetName::Final => "final",
            SubsetName::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

impl fmt::Display for SubsetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Test].into_iter().find(|n| n.as_str() == s)
    }
}

/// Accuracy and dispersion on one subset; both `None` when the subset is
/// undefined or empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub subset: SubsetName,
    pub split: Split,
    pub accuracy: Option<f64>,
    pub dispersion: Option<f64>,
    pub recalls: Vec<f64>,
}

impl MetricRow {
    pub fn absent(subset: SubsetName, split: Split) -> Self {
        MetricRow {
            subset,
            split,
            accuracy: None,
            dispersion: None,
            recalls: Vec::new(),
        }
    }

    /// Row over the samples whose label is in `classes`.
    pub fn compute(subset: SubsetName, split: Split, preds: &[usize], labels: &[usize], classes: &[usize]) -> Self {
        match accuracy(preds, labels, classes) {
            Ok(acc) => {
                let recalls = per_class_recalls(preds, labels, classes);
                MetricRow {
                    subset,
                    split,
                    accuracy: Some(acc),
                    dispersion: dispersion(&recalls).ok(),
                    recalls,
                }
            }
            Err(_) => Self::absent(subset, split),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0, 1, 1], &[0, 1, 1, 2], &[1]).unwrap(), 0.5);
        assert!(matches!(accuracy(&[0], &[0], &[5]), Err(Error::EmptySubset)));
    }

    #[test]
    fn dispersion_examples() {
        assert_eq!(dispersion(&[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(dispersion(&[0.3; 5]).unwrap(), 0.0);
        assert!(dispersion(&[]).is_err());
    }

    #[test]
    fn recalls_skip_missing_classes() {
        let r = per_class_recalls(&[0, 1, 1, 1], &[0, 0, 1, 1], &[0, 1, 7]);
        assert_eq!(r, vec![0.5, 1.0]);
    }
}
