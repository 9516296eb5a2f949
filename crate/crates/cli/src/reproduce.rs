//! Runs SHARCS and every baseline over a list of seeds through the train
//! and eval commands, then tabulates and judges the results.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use sharcs::baselines::{BaselineKind, BaselineSpec};
use sharcs::checkpoint::ModelKind;
use sharcs::config::ExperimentConfig;
use sharcs::datamodel::Modality;
use sharcs::evaluation::{mean_and_stderr, EvalReport, MetricSet, LEDGER_HEADER};

use crate::{cmd_eval, cmd_generate, cmd_train, percent, run_dir, CliError, CliResult};

pub const MIN_SHARCS_MEAN_ACCURACY: f64 = 0.97;
pub const MIN_SHARCS_SEED_ACCURACY: f64 = 0.95;
pub const MIN_SHARCS_COMPLETENESS: f64 = 0.93;
pub const MIN_SEEDS_COMPLETENESS_ABOVE_CONCEPT: usize = 4;
pub const MIN_MISSING_GRAPH: f64 = 0.95;
pub const MIN_MISSING_TABULAR: f64 = 0.88;
pub const MAX_UNIMODAL_ACCURACY: f64 = 0.80;
pub const MIN_MULTIMODAL_ACCURACY: f64 = 0.97;
pub const RELATIVE_MISSING_GRAPH_BAND: (f64, f64) = (0.65, 0.92);
pub const MIN_RETRIEVAL_MATCH: f64 = 0.90;

/// Table rows in display order.
pub fn row_models() -> Vec<(&'static str, ModelKind)> {
    let baseline = |kind, modality| ModelKind::Baseline {
        spec: BaselineSpec::new(kind, modality).expect("valid baseline"),
    };
    vec![
        (
            "Mod1",
            baseline(BaselineKind::UnimodalPlain, Some(Modality::Graph)),
        ),
        (
            "Mod2",
            baseline(BaselineKind::UnimodalPlain, Some(Modality::Tabular)),
        ),
        (
            "CBM1",
            baseline(BaselineKind::UnimodalCbm, Some(Modality::Graph)),
        ),
        (
            "CBM2",
            baseline(BaselineKind::UnimodalCbm, Some(Modality::Tabular)),
        ),
        ("Simple", baseline(BaselineKind::SimpleMultimodal, None)),
        ("Concept", baseline(BaselineKind::ConceptMultimodal, None)),
        ("Relative", baseline(BaselineKind::Relative, None)),
        ("SHARCS", ModelKind::Sharcs),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CriterionOutcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ReproduceSummary {
    pub seeds: Vec<u64>,
    /// Reports keyed by table row, in seed order.
    pub reports: BTreeMap<String, Vec<EvalReport>>,
    pub table: String,
    pub criteria: Vec<CriterionOutcome>,
}

struct Job {
    row: &'static str,
    kind: ModelKind,
    seed: u64,
}

fn job_args(kind: ModelKind) -> Vec<String> {
    match kind {
        ModelKind::Sharcs => vec!["--model".into(), "sharcs".into()],
        ModelKind::Baseline { spec } => {
            let mut args = vec!["--model".into(), spec.kind.name().to_string()];
            if let Some(m) = spec.modality {
                args.push("--modality".into());
                args.push(m.name().to_string());
            }
            args
        }
    }
}

fn run_child(exe: &Path, args: &[String]) -> CliResult<()> {
    let output = Command::new(exe)
        .args(args)
        .output()
        .map_err(|e| CliError::Io(format!("{}: {e}", exe.display())))?;
    if output.status.success() {
        return Ok(());
    }
    let message = String::from_utf8_lossy(&output.stderr).trim().to_string();
    Err(CliError::from_code(
        output.status.code().unwrap_or(2),
        message,
    ))
}

fn run_job(
    cfg: &ExperimentConfig,
    job: &Job,
    dataset: &Path,
    ledger: &Path,
    worker_exe: Option<(&Path, &Path)>,
) -> CliResult<EvalReport> {
    let mut cfg = cfg.clone();
    cfg.train.seed = job.seed;
    let checkpoint = run_dir(&cfg, job.kind).join("checkpoint.json");
    match worker_exe {
        None => {
            cmd_train(&cfg, dataset, job.kind)?;
            Ok(cmd_eval(&checkpoint, dataset, MetricSet::ALL, ledger)?.report)
        }
        Some((exe, config_path)) => {
            let global = vec![
                "--config".to_string(),
                config_path.display().to_string(),
                "--seed".to_string(),
                job.seed.to_string(),
            ];
            let mut train = global.clone();
            train.extend([
                "train".to_string(),
                "--dataset".to_string(),
                dataset.display().to_string(),
            ]);
            train.extend(job_args(job.kind));
            run_child(exe, &train)?;
            let mut eval = global;
            eval.extend([
                "eval".to_string(),
                "--checkpoint".to_string(),
                checkpoint.display().to_string(),
                "--dataset".to_string(),
                dataset.display().to_string(),
                "--ledger".to_string(),
                ledger.display().to_string(),
            ]);
            run_child(exe, &eval)?;
            let bytes = std::fs::read(checkpoint.with_file_name("report.json"))?;
            Ok(serde_json::from_slice(&bytes)?)
        }
    }
}

/// Generates the dataset under the output directory, runs every row model
/// for every seed and judges the aggregate. With `workers > 1` each train
/// and eval step runs as a child process of `exe`.
pub fn cmd_reproduce(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    workers: usize,
    exe: &Path,
) -> CliResult<ReproduceSummary> {
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let dataset = out.join("dataset.json");
    cmd_generate(&cfg.dataset, &dataset)?;
    let ledger = out.join("ledger.csv");
    if std::fs::metadata(&ledger)
        .map(|m| m.len() == 0)
        .unwrap_or(true)
    {
        let mut f = std::fs::File::create(&ledger)?;
        writeln!(f, "{LEDGER_HEADER}")?;
    }
    let config_path = out.join("reproduce-config.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(cfg)?)?;

    let jobs: Vec<Job> = seeds
        .iter()
        .flat_map(|&seed| {
            row_models()
                .into_iter()
                .map(move |(row, kind)| Job { row, kind, seed })
        })
        .collect();
    let results: Mutex<Vec<Option<CliResult<EvalReport>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let worker_exe = (workers > 1).then_some((exe, config_path.as_path()));
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let failed = results
                    .lock()
                    .expect("results lock")
                    .iter()
                    .flatten()
                    .any(|r| r.is_err());
                if failed {
                    break;
                }
                let outcome = run_job(cfg, job, &dataset, &ledger, worker_exe);
                results.lock().expect("results lock")[i] = Some(outcome);
            });
        }
    });

    let mut outcomes = results.into_inner().expect("results lock");
    if let Some(pos) = outcomes.iter().position(|r| matches!(r, Some(Err(_)))) {
        if let Some(Err(e)) = outcomes.swap_remove(pos) {
            return Err(e);
        }
    }
    let mut reports: BTreeMap<String, Vec<EvalReport>> = BTreeMap::new();
    for (job, outcome) in jobs.iter().zip(outcomes) {
        let report = outcome.expect("every job ran")?;
        reports.entry(job.row.to_string()).or_default().push(report);
    }
    let table = format_table(&reports);
    let criteria = judge(&reports);
    Ok(ReproduceSummary {
        seeds: seeds.to_vec(),
        reports,
        table,
        criteria,
    })
}

fn column(reports: &[EvalReport], pick: impl Fn(&EvalReport) -> Option<f64>) -> Vec<f64> {
    reports.iter().filter_map(pick).collect()
}

fn completeness(r: &EvalReport) -> Option<f64> {
    r.completeness.as_ref().map(|c| c.score)
}

/// Mean ± standard error (in %) per row and metric.
pub fn format_table(reports: &BTreeMap<String, Vec<EvalReport>>) -> String {
    let mut lines = vec![format!(
        "{:<10} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "model", "accuracy", "completeness", "graph missing", "tab missing", "retrieval"
    )];
    for (row, _) in row_models() {
        let Some(rs) = reports.get(row) else { continue };
        lines.push(format!(
            "{:<10} {:>14} {:>14} {:>14} {:>14} {:>14}",
            row,
            percent(&column(rs, |r| r.accuracy)),
            percent(&column(rs, completeness)),
            percent(&column(rs, |r| r.missing_graph)),
            percent(&column(rs, |r| r.missing_tabular)),
            percent(&column(rs, |r| r.retrieval_match)),
        ));
    }
    lines.join("\n")
}

fn mean(values: &[f64]) -> f64 {
    mean_and_stderr(values).0
}

fn outcome(name: &str, pass: bool, detail: String) -> CriterionOutcome {
    CriterionOutcome {
        name: name.to_string(),
        pass,
        detail,
    }
}

/// Checks the aggregated rows against the target thresholds. Rows are
/// paired by position, i.e. by seed.
pub fn judge(reports: &BTreeMap<String, Vec<EvalReport>>) -> Vec<CriterionOutcome> {
    let empty = Vec::new();
    let rows = |name: &str| reports.get(name).unwrap_or(&empty);
    let sharcs = rows("SHARCS");
    let concept = rows("Concept");
    let mut out = Vec::new();

    let acc = column(sharcs, |r| r.accuracy);
    let worst = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    out.push(outcome(
        "accuracy",
        !acc.is_empty()
            && mean(&acc) >= MIN_SHARCS_MEAN_ACCURACY
            && worst >= MIN_SHARCS_SEED_ACCURACY,
        format!("mean {:.4}, worst seed {:.4}", mean(&acc), worst),
    ));

    let compl = column(sharcs, completeness);
    let concept_compl = column(concept, completeness);
    let above = compl
        .iter()
        .zip(&concept_compl)
        .filter(|(s, c)| s > c)
        .count();
    out.push(outcome(
        "completeness",
        !compl.is_empty()
            && mean(&compl) >= MIN_SHARCS_COMPLETENESS
            && above >= MIN_SEEDS_COMPLETENESS_ABOVE_CONCEPT.min(compl.len()),
        format!(
            "mean {:.4}, above concept in {above}/{} seeds",
            mean(&compl),
            compl.len()
        ),
    ));

    let miss_g = column(sharcs, |r| r.missing_graph);
    let miss_t = column(sharcs, |r| r.missing_tabular);
    let beats = |ours: &[f64], theirs: Vec<f64>| {
        ours.len() == theirs.len() && ours.iter().zip(&theirs).all(|(a, b)| a > b)
    };
    let beats_concept = beats(&miss_g, column(concept, |r| r.missing_graph))
        && beats(&miss_t, column(concept, |r| r.missing_tabular));
    out.push(outcome(
        "missing modality",
        !miss_g.is_empty()
            && mean(&miss_g) >= MIN_MISSING_GRAPH
            && mean(&miss_t) >= MIN_MISSING_TABULAR
            && beats_concept,
        format!(
            "graph missing {:.4}, tabular missing {:.4}, beats concept every seed: {beats_concept}",
            mean(&miss_g),
            mean(&miss_t)
        ),
    ));

    let unimodal = ["Mod1", "Mod2", "CBM1", "CBM2"].map(|r| mean(&column(rows(r), |x| x.accuracy)));
    let multimodal =
        ["Simple", "Concept", "Relative"].map(|r| mean(&column(rows(r), |x| x.accuracy)));
    let relative_missing = mean(&column(rows("Relative"), |r| r.missing_graph));
    let (lo, hi) = RELATIVE_MISSING_GRAPH_BAND;
    out.push(outcome(
        "baseline bands",
        unimodal.iter().all(|&a| a <= MAX_UNIMODAL_ACCURACY)
            && multimodal.iter().all(|&a| a >= MIN_MULTIMODAL_ACCURACY)
            && (lo..=hi).contains(&relative_missing),
        format!(
            "unimodal {:?}, multimodal {:?}, relative graph missing {relative_missing:.4}",
            unimodal.map(|a| (a * 1e4).round() / 1e4),
            multimodal.map(|a| (a * 1e4).round() / 1e4)
        ),
    ));

    let retr = column(sharcs, |r| r.retrieval_match);
    let retr_above = beats(&retr, column(concept, |r| r.retrieval_match));
    out.push(outcome(
        "retrieval",
        !retr.is_empty() && mean(&retr) >= MIN_RETRIEVAL_MATCH && retr_above,
        format!(
            "mean {:.4}, above concept every seed: {retr_above}",
            mean(&retr)
        ),
    ));
    out
}
