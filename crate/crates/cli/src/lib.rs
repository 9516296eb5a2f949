//! Command implementations behind the `sharcs` binary. Every command is a
//! plain function so `reproduce` can compose them without a shell.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use sharcs::baselines::{BaselineKind, BaselineSpec};
use sharcs::checkpoint::{load_checkpoint, save_checkpoint, AnyModel, ModelKind};
use sharcs::config::{fingerprint, ExperimentConfig};
use sharcs::datamodel::{
    load_dataset, save_dataset, split, DatasetParams, DatasetSplit, Modality, PairedSample,
};
use sharcs::evaluation::{mean_and_stderr, EvalReport, MetricSet};
use sharcs::explain::{
    cross_modal_retrieve, neighborhood, parse_code, prototype, substitute_missing,
    write_embedding_csv, ConceptIndex, Explanation, ExplanationKind, Hit, QueryRef,
    RepresentationSpace, Retrieval,
};
use sharcs::pipeline::{evaluate_kind, index_of, train_kind};
use sharcs::training::Regime;
use sharcs::SharcsError;

pub mod reproduce;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("checkpoint/dataset mismatch: {0}")]
    Mismatch(String),
    #[error("explanation: {0}")]
    Explain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Config(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Explain(_) => 5,
        }
    }

    pub fn from_code(code: i32, message: String) -> Self {
        match code {
            1 => CliError::Usage(message),
            2 => CliError::Io(message),
            3 => CliError::Config(message),
            4 => CliError::Mismatch(message),
            _ => CliError::Explain(message),
        }
    }
}

impl From<SharcsError> for CliError {
    fn from(e: SharcsError) -> Self {
        let msg = e.to_string();
        match e {
            SharcsError::InvalidArgument(_) => CliError::Usage(msg),
            SharcsError::Io(_) | SharcsError::Json(_) => CliError::Io(msg),
            SharcsError::InvalidConfiguration(_)
            | SharcsError::InvalidState(_)
            | SharcsError::Unsupported(_) => CliError::Config(msg),
            SharcsError::Mismatch(_) | SharcsError::Format(_) => CliError::Mismatch(msg),
            SharcsError::NoSuchConcept(_) => CliError::Explain(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Flags shared by every command, applied over the config file.
#[derive(Clone, Debug, Default)]
pub struct GlobalOptions {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Defaults, then the config file, then flags.
pub fn load_config(opts: &GlobalOptions) -> CliResult<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(path) => ExperimentConfig::from_json_file(path).map_err(|e| match e {
            SharcsError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
            other => CliError::Config(format!("{}: {other}", path.display())),
        })?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &opts.out {
        cfg.output_dir = out.display().to_string();
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GenerateSummary {
    pub samples: usize,
    pub positives: usize,
    pub path: PathBuf,
}

/// Writes the dataset described by `params` to `out_path`.
pub fn cmd_generate(params: &DatasetParams, out_path: &Path) -> CliResult<GenerateSummary> {
    let samples = sharcs::datamodel::generate_xor_and_xor(params)?;
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_dataset(out_path, params, &samples).map_err(|e| match e {
        SharcsError::Io(io) => CliError::Io(format!("{}: {io}", out_path.display())),
        other => other.into(),
    })?;
    Ok(GenerateSummary {
        samples: samples.len(),
        positives: samples.iter().filter(|s| s.global_label == 1).count(),
        path: out_path.to_path_buf(),
    })
}

fn read_dataset(path: &Path) -> CliResult<(DatasetParams, Vec<PairedSample>)> {
    load_dataset(path).map_err(|e| match e {
        SharcsError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

/// The split a config expects from a dataset file.
pub fn split_from_file(
    path: &Path,
    cfg: &ExperimentConfig,
) -> CliResult<(DatasetParams, DatasetSplit)> {
    let (params, samples) = read_dataset(path)?;
    let data = split(&samples, cfg.split_ratio, params.seed)?;
    Ok((params, data))
}

/// Parses a model name: `sharcs` or a baseline kind.
pub fn parse_model(name: &str, modality: Option<Modality>) -> CliResult<ModelKind> {
    if name == "sharcs" {
        if modality.is_some() {
            return Err(CliError::Usage("sharcs uses every modality".into()));
        }
        return Ok(ModelKind::Sharcs);
    }
    let kind: BaselineKind = name.parse()?;
    Ok(ModelKind::Baseline {
        spec: BaselineSpec::new(kind, modality)?,
    })
}

/// `<out>/<model>[-<regime>]-seed<seed>`; the regime appears only when it is
/// not end-to-end.
pub fn run_dir(cfg: &ExperimentConfig, kind: ModelKind) -> PathBuf {
    let regime = match cfg.train.regime {
        Regime::EndToEnd => "",
        Regime::Sequential => "-sequential",
        Regime::LocalPretrain => "-local_pretrain",
    };
    Path::new(&cfg.output_dir).join(format!("{}{regime}-seed{}", kind.label(), cfg.train.seed))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub final_accuracy: f64,
}

/// Trains `kind` on the dataset file; the dataset's own parameters replace
/// the configured ones so the checkpoint records what it was trained on.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    dataset: &Path,
    kind: ModelKind,
) -> CliResult<TrainSummary> {
    let mut cfg = cfg.clone();
    let (params, data) = split_from_file(dataset, &cfg)?;
    cfg.dataset = params;
    cfg.validate()?;
    let (model, history) = train_kind(kind, &cfg, &data)?;
    let dir = run_dir(&cfg, kind);
    create_dir(&dir)?;
    let checkpoint = dir.join("checkpoint.json");
    save_checkpoint(&checkpoint, &model, &cfg)?;
    let history_path = dir.join("history.csv");
    history.write_csv(&history_path)?;
    Ok(TrainSummary {
        checkpoint,
        history: history_path,
        final_accuracy: history.final_accuracy().unwrap_or(f64::NAN),
    })
}

/// Loads a checkpoint and the split it was trained on, failing when the
/// dataset is not the one recorded in the checkpoint.
pub fn load_pair(
    checkpoint: &Path,
    dataset: &Path,
) -> CliResult<(ExperimentConfig, AnyModel, DatasetSplit)> {
    let (manifest, model) = load_checkpoint(checkpoint).map_err(|e| match e {
        SharcsError::Io(io) => CliError::Io(format!("{}: {io}", checkpoint.display())),
        other => other.into(),
    })?;
    let cfg = manifest.config;
    let (params, data) = split_from_file(dataset, &cfg)?;
    let found = fingerprint(&(params, cfg.split_ratio));
    if found != manifest.dataset_fingerprint {
        return Err(CliError::Mismatch(format!(
            "checkpoint expects dataset {} but {} is {found}",
            manifest.dataset_fingerprint,
            dataset.display()
        )));
    }
    Ok((cfg, model, data))
}

pub fn parse_metrics(list: &str) -> CliResult<MetricSet> {
    let mut set = MetricSet {
        accuracy: false,
        completeness: false,
        missing: false,
        retrieval: false,
    };
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match item {
            "acc" | "accuracy" => set.accuracy = true,
            "compl" | "completeness" => set.completeness = true,
            "miss" | "missing" => set.missing = true,
            "retr" | "retrieval" => set.retrieval = true,
            "all" => set = MetricSet::ALL,
            other => return Err(CliError::Usage(format!("unknown metric `{other}`"))),
        }
    }
    Ok(set)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalSummary {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub ledger_path: PathBuf,
}

/// Evaluates a checkpoint; writes `report.json` next to it and appends a
/// row to `ledger`. Metrics the model cannot produce are left empty.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    metrics: MetricSet,
    ledger: &Path,
) -> CliResult<EvalSummary> {
    let (cfg, model, data) = load_pair(checkpoint, dataset)?;
    let report = evaluate_kind(&model, &data, metrics, &cfg)?;
    let report_path = checkpoint.with_file_name("report.json");
    write_file(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    if let Some(parent) = ledger.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.append_to_ledger(ledger)?;
    Ok(EvalSummary {
        report,
        report_path,
        ledger_path: ledger.to_path_buf(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExplainRequest {
    Prototype {
        code: String,
    },
    Neighborhood {
        query: usize,
        modality: Modality,
        radius: f64,
    },
    CrossModal {
        query: usize,
        source: Modality,
        retrieval: Retrieval,
    },
    Substitute {
        query: usize,
        missing: Modality,
    },
    Embedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainOutput {
    pub explanation: Option<Explanation>,
    pub json_path: Option<PathBuf>,
    pub csv_path: Option<PathBuf>,
}

fn query_vector(
    model: &AnyModel,
    samples: &[PairedSample],
    id: usize,
    modality: Modality,
) -> CliResult<Vec<f64>> {
    let sample = samples
        .iter()
        .find(|s| s.id == id)
        .ok_or_else(|| CliError::Usage(format!("no sample with id {id}")))?;
    let parts = model.represent(std::slice::from_ref(sample))?;
    let table = parts.get(modality.index()).ok_or_else(|| {
        CliError::Config(format!("model has no {} representation", modality.name()))
    })?;
    Ok(table.row(0).to_vec())
}

/// Runs one explanation procedure and writes its JSON (and, for
/// `Embedding`, the projection CSV) into `out_dir`.
pub fn cmd_explain(
    checkpoint: &Path,
    dataset: &Path,
    request: &ExplainRequest,
    out_dir: &Path,
) -> CliResult<ExplainOutput> {
    let (_, model, data) = load_pair(checkpoint, dataset)?;
    if !matches!(model, AnyModel::Sharcs(_)) && !model.applicable_metrics().missing {
        return Err(CliError::Config(format!(
            "{} has no shared representation to explain",
            model.kind().label()
        )));
    }
    let index: ConceptIndex = index_of(&model, &data.train)?;
    let all: Vec<PairedSample> = data.train.iter().chain(&data.test).cloned().collect();
    create_dir(out_dir)?;
    let explanation = match request {
        ExplainRequest::Prototype { code } => {
            let bits = parse_code(code)?;
            if bits.len() != index.joint.cols() {
                return Err(CliError::Usage(format!(
                    "code has {} digits, concepts have {}",
                    bits.len(),
                    index.joint.cols()
                )));
            }
            prototype(&index, &bits)?
        }
        ExplainRequest::Neighborhood {
            query,
            modality,
            radius,
        } => {
            let q = query_vector(&model, &all, *query, *modality)?;
            neighborhood(&index, &q, Some(*query), *modality, *radius)?
        }
        ExplainRequest::CrossModal {
            query,
            source,
            retrieval,
        } => {
            let q = query_vector(&model, &all, *query, *source)?;
            cross_modal_retrieve(
                &index,
                &q,
                Some(*query),
                *source,
                &[source.other()],
                *retrieval,
            )?
        }
        ExplainRequest::Substitute { query, missing } => {
            let present = missing.other();
            let q = query_vector(&model, &all, *query, present)?;
            let sub = substitute_missing(&index, &q, *missing)?;
            Explanation {
                kind: ExplanationKind::Substitution,
                query: QueryRef {
                    id: Some(*query),
                    modality: Some(present),
                },
                results: vec![Hit {
                    id: sub.id,
                    modality: *missing,
                    distance: sub.distance,
                }],
                params: serde_json::json!({ "missing": missing, "substitute": sub.vector }),
            }
        }
        ExplainRequest::Embedding => {
            let csv = out_dir.join("embedding.csv");
            write_embedding_csv(&index, &csv)?;
            return Ok(ExplainOutput {
                explanation: None,
                json_path: None,
                csv_path: Some(csv),
            });
        }
    };
    let name = match explanation.kind {
        ExplanationKind::Prototype => "prototype.json",
        ExplanationKind::Neighborhood => "neighborhood.json",
        ExplanationKind::CrossModal => "cross_modal.json",
        ExplanationKind::Substitution => "substitute.json",
    };
    let json = out_dir.join(name);
    explanation.write_json(&json)?;
    Ok(ExplainOutput {
        explanation: Some(explanation),
        json_path: Some(json),
        csv_path: None,
    })
}

/// Formats `mean ± stderr` in percent.
pub fn percent(values: &[f64]) -> String {
    if values.is_empty() {
        return "-".to_string();
    }
    let (m, s) = mean_and_stderr(values);
    format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * s)
}
