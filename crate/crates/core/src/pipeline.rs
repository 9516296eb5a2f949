//! End-to-end runs: build a model of any kind, train it, and evaluate it.

use crate::baselines::{train_baseline, BaselineModel};
use crate::checkpoint::{AnyModel, ModelKind};
use crate::config::ExperimentConfig;
use crate::datamodel::{generate_xor_and_xor, split, DatasetSplit, PairedSample};
use crate::encoders::SharcsModel;
use crate::error::{Result, SharcsError};
use crate::evaluation::{evaluate, EvalReport, MetricSet};
use crate::explain::{build_index, ConceptIndex};
use crate::training::{train, History, Regime};

/// Generates the configured dataset and splits it.
pub fn dataset_split(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let samples = generate_xor_and_xor(&cfg.dataset)?;
    split(&samples, cfg.split_ratio, cfg.dataset.seed)
}

/// Builds and trains a model of `kind` with `cfg.train.seed`.
pub fn train_kind(
    kind: ModelKind,
    cfg: &ExperimentConfig,
    data: &DatasetSplit,
) -> Result<(AnyModel, History)> {
    cfg.validate()?;
    match kind {
        ModelKind::Sharcs => {
            let mut model = SharcsModel::new(&cfg.model, cfg.train.seed)?;
            let history = train(
                &mut model,
                data,
                &cfg.train,
                &cfg.loss,
                cfg.local_supervision,
            )?;
            Ok((AnyModel::Sharcs(model), history))
        }
        ModelKind::Baseline { spec } => {
            if cfg.train.regime != Regime::EndToEnd {
                return Err(SharcsError::InvalidConfiguration(format!(
                    "{} trains end-to-end only",
                    spec.label()
                )));
            }
            let mut model = BaselineModel::new(spec, &cfg.model, &cfg.baselines, cfg.train.seed)?;
            let history = train_baseline(&mut model, data, &cfg.train, &cfg.baselines)?;
            Ok((AnyModel::Baseline(model), history))
        }
    }
}

/// The model's representation of every training sample.
pub fn index_of(model: &AnyModel, train: &[PairedSample]) -> Result<ConceptIndex> {
    build_index(model, train)
}

/// Runs `metrics` (restricted to those the model supports) on the test part.
pub fn evaluate_kind(
    model: &AnyModel,
    data: &DatasetSplit,
    metrics: MetricSet,
    cfg: &ExperimentConfig,
) -> Result<EvalReport> {
    let supported = model.applicable_metrics();
    let wanted = MetricSet {
        accuracy: metrics.accuracy,
        completeness: metrics.completeness && supported.completeness,
        missing: metrics.missing && supported.missing,
        retrieval: metrics.retrieval && supported.retrieval,
    };
    let report = EvalReport::new(model.kind().label(), cfg.train.seed, cfg.hash());
    let needs_index = wanted.completeness || wanted.missing || wanted.retrieval;
    let index = if needs_index {
        index_of(model, &data.train)?
    } else {
        ConceptIndex::from_parts(&[], Vec::new())?
    };
    evaluate(model, &index, &data.test, wanted, report)
}
