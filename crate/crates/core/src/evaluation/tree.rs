//! Gini decision tree over binary features.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        label: u8,
    },
    Split {
        feature: usize,
        zero: Box<Node>,
        one: Box<Node>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    root: Node,
    max_depth: Option<usize>,
}

impl DecisionTree {
    /// Splits until a node is pure, its rows share one feature vector, or
    /// `max_depth` is reached. Equal-impurity splits go to the lowest
    /// feature index; majority ties go to the smallest label.
    pub fn fit(features: &[Vec<bool>], labels: &[u8], max_depth: Option<usize>) -> Self {
        assert_eq!(features.len(), labels.len(), "one label per feature row");
        let rows: Vec<usize> = (0..labels.len()).collect();
        Self {
            root: grow(features, labels, &rows, 0, max_depth),
            max_depth,
        }
    }

    pub fn predict(&self, code: &[bool]) -> u8 {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { label } => return *label,
                Node::Split { feature, zero, one } => {
                    node = if code.get(*feature).copied().unwrap_or(false) {
                        one
                    } else {
                        zero
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 0,
                Node::Split { zero, one, .. } => 1 + walk(zero).max(walk(one)),
            }
        }
        walk(&self.root)
    }

    pub fn accuracy(&self, features: &[Vec<bool>], labels: &[u8]) -> f64 {
        if labels.is_empty() {
            return f64::NAN;
        }
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &y)| self.predict(f) == y)
            .count();
        hits as f64 / labels.len() as f64
    }
}

pub fn majority(labels: impl IntoIterator<Item = u8>) -> u8 {
    let mut counts = [0usize; 256];
    for y in labels {
        counts[usize::from(y)] += 1;
    }
    let best = counts.iter().max().copied().unwrap_or(0);
    counts.iter().position(|&c| c == best).unwrap_or(0) as u8
}

fn gini(labels: &[u8], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::<u8, usize>::new();
    for &r in rows {
        *counts.entry(labels[r]).or_default() += 1;
    }
    let n = rows.len() as f64;
    1.0 - counts
        .values()
        .map(|&c| (c as f64 / n).powi(2))
        .sum::<f64>()
}

fn grow(
    features: &[Vec<bool>],
    labels: &[u8],
    rows: &[usize],
    depth: usize,
    max_depth: Option<usize>,
) -> Node {
    let leaf = || Node::Leaf {
        label: majority(rows.iter().map(|&r| labels[r])),
    };
    let pure = rows.windows(2).all(|w| labels[w[0]] == labels[w[1]]);
    if rows.is_empty() || pure || max_depth.is_some_and(|d| depth >= d) {
        return leaf();
    }
    let width = features[rows[0]].len();
    let mut best: Option<(f64, usize, Vec<usize>, Vec<usize>)> = None;
    for f in 0..width {
        let (one, zero): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| features[r][f]);
        if one.is_empty() || zero.is_empty() {
            continue;
        }
        let n = rows.len() as f64;
        let impurity =
            zero.len() as f64 / n * gini(labels, &zero) + one.len() as f64 / n * gini(labels, &one);
        if best.as_ref().map_or(true, |b| impurity < b.0 - 1e-15) {
            best = Some((impurity, f, zero, one));
        }
    }
    match best {
        None => leaf(),
        Some((_, feature, zero, one)) => Node::Split {
            feature,
            zero: Box::new(grow(features, labels, &zero, depth + 1, max_depth)),
            one: Box::new(grow(features, labels, &one, depth + 1, max_depth)),
        },
    }
}
