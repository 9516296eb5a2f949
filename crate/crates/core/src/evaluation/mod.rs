//! Task accuracy, concept completeness, missing-modality accuracy and
//! cross-modal retrieval label agreement.

mod tree;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{batches, BatchMode, Modality, PairedSample};
use crate::encoders::SharcsModel;
use crate::error::{invalid_arg, Result};
use crate::explain::{
    binarize, code_string, order_positions, substitute_missing, ConceptIndex, RepresentationSpace,
};
use crate::rng::StreamRng;
use crate::tensor::{euclidean, Matrix};

pub use tree::{majority, DecisionTree, Node};

pub const EVAL_BATCH: usize = 256;

/// Anything producing class logits for a list of samples.
pub trait Classifier {
    /// One row of logits per sample, in `samples` order.
    fn logits(&self, samples: &[PairedSample]) -> Result<Matrix>;
}

impl Classifier for SharcsModel {
    fn logits(&self, samples: &[PairedSample]) -> Result<Matrix> {
        let mut parts = Vec::new();
        for batch in batches::<StreamRng>(samples, EVAL_BATCH, None, BatchMode::Eval)? {
            parts.push(self.infer(&batch)?.logits);
        }
        Ok(
            Matrix::vstack(&parts.iter().collect::<Vec<_>>())
                .select_rows(&order_positions(samples)),
        )
    }
}

pub fn accuracy_from_logits(logits: &Matrix, labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return f64::NAN;
    }
    let hits = (0..logits.rows())
        .filter(|&r| logits.argmax_row(r) == usize::from(labels[r]))
        .count();
    hits as f64 / labels.len() as f64
}

/// Fraction of samples whose arg-max logit equals the global label.
pub fn accuracy<C: Classifier + ?Sized>(model: &C, samples: &[PairedSample]) -> Result<f64> {
    let logits = model.logits(samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.global_label).collect();
    Ok(accuracy_from_logits(&logits, &labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub code: String,
    pub size: usize,
    pub majority: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletenessReport {
    pub score: f64,
    pub n_clusters: usize,
    pub tree_depth: usize,
    pub clusters: Vec<ClusterSummary>,
}

/// A decision tree fit on the training codes against global labels, scored
/// on the binarised test concepts.
pub fn completeness(
    index: &ConceptIndex,
    test_joint: &Matrix,
    test_labels: &[u8],
) -> Result<CompletenessReport> {
    if test_joint.rows() != test_labels.len() {
        return Err(invalid_arg("one label per test concept row"));
    }
    if test_joint.cols() != index.joint.cols() {
        return Err(invalid_arg("test concepts differ in width from the index"));
    }
    let tree = DecisionTree::fit(&index.codes, &index.global_labels, None);
    let test_codes: Vec<Vec<bool>> = (0..test_joint.rows())
        .map(|r| binarize(test_joint.row(r)))
        .collect();
    let mut groups: BTreeMap<&[bool], Vec<u8>> = BTreeMap::new();
    for (code, &y) in index.codes.iter().zip(&index.global_labels) {
        groups.entry(code.as_slice()).or_default().push(y);
    }
    let clusters: Vec<ClusterSummary> = groups
        .into_iter()
        .map(|(code, ys)| ClusterSummary {
            code: code_string(code),
            size: ys.len(),
            majority: majority(ys),
        })
        .collect();
    Ok(CompletenessReport {
        score: tree.accuracy(&test_codes, test_labels),
        n_clusters: clusters.len(),
        tree_depth: tree.depth(),
        clusters,
    })
}

/// Completeness of `space` with the index built on `train`.
pub fn completeness_of<S: RepresentationSpace>(
    space: &S,
    index: &ConceptIndex,
    test: &[PairedSample],
) -> Result<CompletenessReport> {
    let parts = space.represent(test)?;
    let joint = Matrix::hstack(&parts.iter().collect::<Vec<_>>());
    let labels: Vec<u8> = test.iter().map(|s| s.global_label).collect();
    completeness(index, &joint, &labels)
}

/// Accuracy when `missing` is replaced by its nearest stored training
/// representation, searched from the other modality.
pub fn missing_modality_eval<S: RepresentationSpace>(
    space: &S,
    index: &ConceptIndex,
    test: &[PairedSample],
    missing: Modality,
) -> Result<f64> {
    let mut parts = space.represent(test)?;
    let present = missing.other();
    let mut substituted = parts[missing.index()].clone();
    for r in 0..test.len() {
        let sub = substitute_missing(index, parts[present.index()].row(r), missing)?;
        substituted.row_mut(r).copy_from_slice(&sub.vector);
    }
    parts[missing.index()] = substituted;
    let logits = space.predict_from(&parts)?;
    let labels: Vec<u8> = test.iter().map(|s| s.global_label).collect();
    Ok(accuracy_from_logits(&logits, &labels))
}

/// Fraction of test queries from `source` whose nearest `target` training
/// row carries the same local label as the query.
pub fn retrieval_label_match<S: RepresentationSpace>(
    space: &S,
    index: &ConceptIndex,
    test: &[PairedSample],
    source: Modality,
    target: Modality,
) -> Result<f64> {
    if source == target {
        return Err(invalid_arg("retrieval needs two distinct modalities"));
    }
    if test.is_empty() {
        return Ok(f64::NAN);
    }
    let parts = space.represent(test)?;
    let table = &index.per_modality[target.index()];
    let hits = test
        .iter()
        .enumerate()
        .filter(|(r, s)| {
            let query = parts[source.index()].row(*r);
            let best = (0..table.rows())
                .min_by(|&a, &b| {
                    euclidean(table.row(a), query)
                        .total_cmp(&euclidean(table.row(b), query))
                        .then(index.ids[a].cmp(&index.ids[b]))
                })
                .expect("non-empty index");
            index.local_labels[target.index()][best] == s.local_label(source)
        })
        .count();
    Ok(hits as f64 / test.len() as f64)
}

/// Metric selection for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSet {
    pub accuracy: bool,
    pub completeness: bool,
    pub missing: bool,
    pub retrieval: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet {
        accuracy: true,
        completeness: true,
        missing: true,
        retrieval: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    pub accuracy: Option<f64>,
    pub completeness: Option<CompletenessReport>,
    /// Accuracy with the graph modality substituted.
    pub missing_graph: Option<f64>,
    /// Accuracy with the tabular modality substituted.
    pub missing_tabular: Option<f64>,
    /// Mean of both retrieval directions.
    pub retrieval_match: Option<f64>,
    pub retrieval_graph_to_tabular: Option<f64>,
    pub retrieval_tabular_to_graph: Option<f64>,
}

pub const LEDGER_HEADER: &str = "model,seed,acc,compl,miss_m1,miss_m2,retr_match";

impl EvalReport {
    pub fn new(model: impl Into<String>, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            seed,
            config_hash: config_hash.into(),
            accuracy: None,
            completeness: None,
            missing_graph: None,
            missing_tabular: None,
            retrieval_match: None,
            retrieval_graph_to_tabular: None,
            retrieval_tabular_to_graph: None,
        }
    }

    pub fn ledger_row(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.model,
            self.seed,
            cell(self.accuracy),
            cell(self.completeness.as_ref().map(|c| c.score)),
            cell(self.missing_graph),
            cell(self.missing_tabular),
            cell(self.retrieval_match)
        )
    }

    /// Appends one row, writing the header first if the file is new.
    pub fn append_to_ledger(&self, path: &Path) -> Result<()> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        if fresh {
            writeln!(f, "{LEDGER_HEADER}")?;
        }
        writeln!(f, "{}", self.ledger_row())?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Runs the selected metrics for a model exposing both a classifier and a
/// representation space.
pub fn evaluate<S: Classifier + RepresentationSpace>(
    model: &S,
    index: &ConceptIndex,
    test: &[PairedSample],
    metrics: MetricSet,
    mut report: EvalReport,
) -> Result<EvalReport> {
    if metrics.accuracy {
        report.accuracy = Some(accuracy(model, test)?);
    }
    if metrics.completeness {
        report.completeness = Some(completeness_of(model, index, test)?);
    }
    if metrics.missing {
        report.missing_graph = Some(missing_modality_eval(model, index, test, Modality::Graph)?);
        report.missing_tabular = Some(missing_modality_eval(
            model,
            index,
            test,
            Modality::Tabular,
        )?);
    }
    if metrics.retrieval {
        let g2t = retrieval_label_match(model, index, test, Modality::Graph, Modality::Tabular)?;
        let t2g = retrieval_label_match(model, index, test, Modality::Tabular, Modality::Graph)?;
        report.retrieval_graph_to_tabular = Some(g2t);
        report.retrieval_tabular_to_graph = Some(t2g);
        report.retrieval_match = Some((g2t + t2g) / 2.0);
    }
    Ok(report)
}

/// Mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
