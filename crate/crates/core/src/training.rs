//! The shared-space objective and the three training regimes.

use std::io::Write;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{bce_with_logits_value, Tape, Var};
use crate::datamodel::{batches, one_hot, Batch, BatchMode, DatasetSplit, Modality, PairedSample};
use crate::encoders::{
    Activation, ForwardCtx, ForwardVars, Mlp2, SharcsModel, ENCODER_PREFIX, LOCAL_PREDICTOR_PREFIX,
    PREDICTOR_PREFIX, PROJECTOR_PREFIX,
};
use crate::error::{invalid_arg, Result, SharcsError};
use crate::evaluation::accuracy;
use crate::params::{Adam, ParamId, ParamStore};
use crate::rng::{self, StreamRng};
use crate::tensor::{euclidean, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    EndToEnd,
    Sequential,
    LocalPretrain,
}

impl std::str::FromStr for Regime {
    type Err = SharcsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "end_to_end" => Ok(Regime::EndToEnd),
            "sequential" => Ok(Regime::Sequential),
            "local_pretrain" => Ok(Regime::LocalPretrain),
            other => Err(invalid_arg(format!("unknown regime `{other}`"))),
        }
    }
}

/// Which of the drawn samples enter the distance term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceFilter {
    #[default]
    All,
    PositiveOnly,
}

impl DistanceFilter {
    fn keep(self, label: u8) -> bool {
        match self {
            DistanceFilter::All => true,
            DistanceFilter::PositiveOnly => label == 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    /// Local-loss weight per modality.
    pub betas: Vec<f64>,
    /// Modality pairs compared by the regulariser.
    pub pairs: Vec<(usize, usize)>,
    pub sample_fraction: f64,
    pub filter: DistanceFilter,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            betas: vec![0.0, 0.0],
            pairs: vec![(0, 1)],
            sample_fraction: 0.1,
            filter: DistanceFilter::All,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, modalities: usize) -> Result<()> {
        let bad = |m: &str| Err(SharcsError::InvalidConfiguration(m.to_string()));
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad("sample fraction must lie in (0, 1]");
        }
        if !(self.lambda >= 0.0) || self.betas.iter().any(|b| !(*b >= 0.0)) {
            return bad("loss weights must be non-negative");
        }
        if self.betas.len() != modalities {
            return bad("one local-loss weight per modality is required");
        }
        if self
            .pairs
            .iter()
            .any(|&(a, b)| a == b || a >= modalities || b >= modalities)
        {
            return bad("regulariser pairs must join two distinct existing modalities");
        }
        Ok(())
    }

    fn uses_local_terms(&self) -> bool {
        self.betas.iter().any(|&b| b > 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub regime: Regime,
    /// Epochs of the only (end-to-end) or first phase.
    pub epochs: usize,
    /// Epochs of the second phase for two-phase regimes.
    pub phase2_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Root seed for initialisation, shuffling, Gumbel noise and draws.
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            regime: Regime::EndToEnd,
            epochs: 150,
            phase2_epochs: 150,
            learning_rate: 0.001,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SharcsError::InvalidConfiguration(m.to_string()));
        if self.epochs == 0 || (self.regime != Regime::EndToEnd && self.phase2_epochs == 0) {
            return bad("phase epoch counts must be positive");
        }
        if self.batch_size < 2 {
            return bad("training batch size must be at least 2");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

/// Mean binary cross-entropy from logits against one-hot labels.
pub fn task_loss(logits: &Matrix, labels: &Matrix) -> Result<f64> {
    if logits.shape() != labels.shape() {
        return Err(invalid_arg(format!(
            "logits {:?} vs labels {:?}",
            logits.shape(),
            labels.shape()
        )));
    }
    Ok(bce_with_logits_value(logits, labels))
}

/// Mean Euclidean distance over (pair, sampled index). The flag is set
/// when nothing was sampled and the value defaulted to zero.
pub fn semantic_regularizer(
    shared: &[Matrix],
    pairs: &[(usize, usize)],
    sampled: &[usize],
) -> (f64, bool) {
    if sampled.is_empty() || pairs.is_empty() {
        return (0.0, true);
    }
    let total: f64 = pairs
        .iter()
        .flat_map(|&(i, q)| {
            sampled
                .iter()
                .map(move |&r| euclidean(shared[i].row(r), shared[q].row(r)))
        })
        .sum();
    (total / (pairs.len() * sampled.len()) as f64, false)
}

/// `⌈fraction · batch_len⌉` distinct indices, ascending, then filtered.
pub fn draw_distance_samples(
    labels: &[u8],
    fraction: f64,
    filter: DistanceFilter,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = labels.len();
    let count = ((fraction * n as f64).ceil() as usize).min(n);
    let mut picked = index::sample(rng, n, count).into_vec();
    picked.sort_unstable();
    picked.retain(|&i| filter.keep(labels[i]));
    picked
}

/// Loss terms of one step. Regulariser and local entries are reported
/// after weighting, so `total` is their plain sum with `task`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub regularizer: f64,
    pub local: Vec<f64>,
    pub total: f64,
    /// No samples survived the draw.
    pub empty_draw: bool,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.task + self.regularizer + self.local.iter().sum::<f64>()
    }
}

/// `T(y, ŷ) + λ·mean‖s_i − s_q‖ + Σ β_i T_i(y_i, ŷ_i)` on the tape.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    vars: &ForwardVars,
    batch: &Batch,
    loss: &LossConfig,
    sampled: &[usize],
) -> Result<(Var, LossBreakdown)> {
    let task = tape.bce_with_logits(vars.logits, batch.global_one_hot());
    let mut breakdown = LossBreakdown {
        task: tape.scalar(task),
        ..LossBreakdown::default()
    };
    let mut total = task;

    breakdown.empty_draw = sampled.is_empty();
    if loss.lambda > 0.0 && !sampled.is_empty() && !loss.pairs.is_empty() {
        let mut reg: Option<Var> = None;
        for &(i, q) in &loss.pairs {
            let d = tape.pair_distance_mean(vars.shared[i], vars.shared[q], sampled.to_vec());
            reg = Some(match reg {
                None => d,
                Some(acc) => tape.add(acc, d),
            });
        }
        let reg = tape.scale(
            reg.expect("non-empty pairs"),
            loss.lambda / loss.pairs.len() as f64,
        );
        breakdown.regularizer = tape.scalar(reg);
        total = tape.add(total, reg);
    }

    if loss.uses_local_terms() {
        let local_logits = vars.local_logits.as_ref().ok_or_else(|| {
            SharcsError::InvalidConfiguration("local loss weights need local predictors".into())
        })?;
        for (m, (&beta, &logits)) in Modality::ALL
            .iter()
            .zip(loss.betas.iter().zip(local_logits))
        {
            if beta == 0.0 {
                breakdown.local.push(0.0);
                continue;
            }
            let t = tape.bce_with_logits(logits, one_hot(batch.local_labels(*m), 2));
            let weighted = tape.scale(t, beta);
            breakdown.local.push(tape.scalar(weighted));
            total = tape.add(total, weighted);
        }
    }
    breakdown.total = tape.scalar(total);
    Ok((total, breakdown))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: usize,
    pub task_loss: f64,
    pub reg_loss: f64,
    pub local_losses: Vec<f64>,
    pub total_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch,task_loss,reg_loss,local_losses,test_accuracy")?;
        for r in &self.records {
            let local: Vec<String> = r.local_losses.iter().map(|v| v.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.task_loss,
                r.reg_loss,
                local.join(";"),
                r.test_accuracy
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_accuracy)
    }
}

/// Random streams owned by one training run.
pub struct TrainRngs {
    pub shuffle: StreamRng,
    pub gumbel: StreamRng,
    pub draw: StreamRng,
}

impl TrainRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            shuffle: rng::substream(seed, rng::SHUFFLE),
            gumbel: rng::substream(seed, rng::GUMBEL),
            draw: rng::substream(seed, rng::REGULARIZER),
        }
    }
}

/// Anything trainable by [`run_phase`].
pub trait Objective {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;

    /// Records the loss of one training batch on `tape` and commits any
    /// running statistics.
    fn step_loss(
        &mut self,
        tape: &mut Tape,
        batch: &Batch,
        rngs: &mut TrainRngs,
    ) -> Result<(Var, LossBreakdown)>;

    fn test_accuracy(&self, samples: &[PairedSample]) -> Result<f64>;
}

/// Runs `epochs` epochs over `train`, optimising only `trainable`.
#[allow(clippy::too_many_arguments)]
pub fn run_phase<O: Objective>(
    objective: &mut O,
    trainable: Vec<ParamId>,
    train: &[PairedSample],
    test: &[PairedSample],
    epochs: usize,
    plan: &TrainPlan,
    rngs: &mut TrainRngs,
    phase: usize,
    history: &mut History,
) -> Result<()> {
    let mut opt = Adam::new(objective.store(), trainable, plan.learning_rate);
    for _ in 0..epochs {
        let epoch_batches = batches(
            train,
            plan.batch_size,
            Some(&mut rngs.shuffle),
            BatchMode::Train,
        )?;
        let mut sums = LossBreakdown::default();
        for batch in &epoch_batches {
            let mut tape = Tape::new();
            let (loss, parts) = objective.step_loss(&mut tape, batch, rngs)?;
            let grads = tape.backward(loss);
            opt.step(objective.store_mut(), &grads);
            sums.task += parts.task;
            sums.regularizer += parts.regularizer;
            sums.total += parts.total;
            if sums.local.len() < parts.local.len() {
                sums.local.resize(parts.local.len(), 0.0);
            }
            for (s, l) in sums.local.iter_mut().zip(&parts.local) {
                *s += l;
            }
        }
        let n = epoch_batches.len().max(1) as f64;
        let test_accuracy = if test.is_empty() {
            f64::NAN
        } else {
            objective.test_accuracy(test)?
        };
        history.records.push(EpochRecord {
            epoch: history.records.len() + 1,
            phase,
            task_loss: sums.task / n,
            reg_loss: sums.regularizer / n,
            local_losses: sums.local.iter().map(|v| v / n).collect(),
            total_loss: sums.total / n,
            test_accuracy,
        });
    }
    Ok(())
}

enum SharcsPhase {
    /// Eq. 4 (plus weighted local terms) over the full forward pass.
    Joint,
    /// Local concepts concatenated into a temporary head.
    ConceptWarmup(Mlp2),
    /// Each local encoder with its own local head, on local labels.
    LocalWarmup,
}

struct SharcsObjective<'a> {
    model: &'a mut SharcsModel,
    loss: &'a LossConfig,
    phase: SharcsPhase,
}

impl Objective for SharcsObjective<'_> {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn step_loss(
        &mut self,
        tape: &mut Tape,
        batch: &Batch,
        rngs: &mut TrainRngs,
    ) -> Result<(Var, LossBreakdown)> {
        let mut ctx = ForwardCtx::train(&mut rngs.gumbel);
        match &self.phase {
            SharcsPhase::Joint => {
                let vars = self.model.forward_on_tape(tape, batch, &mut ctx)?;
                let sampled = draw_distance_samples(
                    &batch.global_labels,
                    self.loss.sample_fraction,
                    self.loss.filter,
                    &mut rngs.draw,
                );
                let out = total_loss_on_tape(tape, &vars, batch, self.loss, &sampled)?;
                self.model.commit(&vars.updates);
                Ok(out)
            }
            SharcsPhase::ConceptWarmup(head) => {
                let (local, moments) = self.model.local_concepts_on_tape(tape, batch, &mut ctx)?;
                let joined = tape.concat_cols(&local);
                let logits = head.forward(tape, &self.model.store, joined);
                let loss = tape.bce_with_logits(logits, batch.global_one_hot());
                for (enc, m) in self.model.encoders.iter_mut().zip(&moments) {
                    if let Some(m) = m {
                        enc.rescale.commit(m);
                    }
                }
                let task = tape.scalar(loss);
                Ok((
                    loss,
                    LossBreakdown {
                        task,
                        total: task,
                        ..LossBreakdown::default()
                    },
                ))
            }
            SharcsPhase::LocalWarmup => {
                let (local, moments) = self.model.local_concepts_on_tape(tape, batch, &mut ctx)?;
                let heads = self.model.local_predictors.as_ref().ok_or_else(|| {
                    SharcsError::InvalidConfiguration("local pre-training needs local heads".into())
                })?;
                let mut total: Option<Var> = None;
                let mut parts = Vec::new();
                for ((m, head), &c) in Modality::ALL.iter().zip(heads).zip(&local) {
                    let logits = head.forward(tape, &self.model.store, c);
                    let l = tape.bce_with_logits(logits, one_hot(batch.local_labels(*m), 2));
                    parts.push(tape.scalar(l));
                    total = Some(match total {
                        None => l,
                        Some(acc) => tape.add(acc, l),
                    });
                }
                for (enc, m) in self.model.encoders.iter_mut().zip(&moments) {
                    if let Some(m) = m {
                        enc.rescale.commit(m);
                    }
                }
                let total = total.expect("at least one modality");
                Ok((
                    total,
                    LossBreakdown {
                        total: tape.scalar(total),
                        local: parts,
                        ..LossBreakdown::default()
                    },
                ))
            }
        }
    }

    fn test_accuracy(&self, samples: &[PairedSample]) -> Result<f64> {
        match &self.phase {
            SharcsPhase::Joint => accuracy(self.model, samples),
            // The label predictor is not trained yet; report the warm-up head.
            SharcsPhase::ConceptWarmup(head) => warmup_accuracy(self.model, head, samples),
            SharcsPhase::LocalWarmup => Ok(f64::NAN),
        }
    }
}

fn warmup_accuracy(model: &SharcsModel, head: &Mlp2, samples: &[PairedSample]) -> Result<f64> {
    let mut correct = 0usize;
    for batch in batches::<StreamRng>(samples, 256, None, BatchMode::Eval)? {
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let (local, _) = model.local_concepts_on_tape(&mut tape, &batch, &mut ctx)?;
        let joined = tape.concat_cols(&local);
        let logits = head.forward(&mut tape, &model.store, joined);
        let logits = tape.value(logits);
        correct += (0..batch.len())
            .filter(|&r| logits.argmax_row(r) == usize::from(batch.global_labels[r]))
            .count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

const WARMUP_HEAD_PREFIX: &str = "f_warmup";

/// Trains `model` on `split` following `plan`.
pub fn train(
    model: &mut SharcsModel,
    split: &DatasetSplit,
    plan: &TrainPlan,
    loss: &LossConfig,
    local_supervision: bool,
) -> Result<History> {
    plan.validate()?;
    loss.validate(model.modality_count())?;
    if loss.uses_local_terms() && !local_supervision {
        return Err(SharcsError::InvalidConfiguration(
            "local loss weights need local labels".into(),
        ));
    }
    if loss.uses_local_terms() && model.local_predictors.is_none() {
        return Err(SharcsError::InvalidConfiguration(
            "local loss weights need local predictors".into(),
        ));
    }
    let mut rngs = TrainRngs::new(plan.seed);
    let mut history = History::default();
    let (train, test) = (&split.train, &split.test);

    match plan.regime {
        Regime::EndToEnd => {
            let trainable = model.store.ids().collect();
            let mut obj = SharcsObjective {
                model,
                loss,
                phase: SharcsPhase::Joint,
            };
            run_phase(
                &mut obj,
                trainable,
                train,
                test,
                plan.epochs,
                plan,
                &mut rngs,
                1,
                &mut history,
            )?;
        }
        Regime::Sequential => {
            let keep = model.store.len();
            let mut init = rng::substream(plan.seed, "warmup-head");
            let shape = (
                model.modality_count() * model.config.local_width,
                model.config.predictor_hidden,
                model.config.classes,
            );
            let head = Mlp2::new(
                &mut model.store,
                WARMUP_HEAD_PREFIX,
                shape,
                Activation::Relu,
                &mut init,
            );
            let mut trainable = model.param_group(&[ENCODER_PREFIX]);
            trainable.extend(head.params());
            let mut obj = SharcsObjective {
                model,
                loss,
                phase: SharcsPhase::ConceptWarmup(head),
            };
            run_phase(
                &mut obj,
                trainable,
                train,
                test,
                plan.epochs,
                plan,
                &mut rngs,
                1,
                &mut history,
            )?;
            model.store.truncate(keep);
            finish_two_phase(model, loss, train, test, plan, &mut rngs, &mut history)?;
        }
        Regime::LocalPretrain => {
            if !local_supervision {
                return Err(SharcsError::InvalidConfiguration(
                    "local pre-training needs local labels".into(),
                ));
            }
            if model.local_predictors.is_none() {
                return Err(SharcsError::InvalidConfiguration(
                    "local pre-training needs local predictors".into(),
                ));
            }
            let trainable = model.param_group(&[ENCODER_PREFIX, LOCAL_PREDICTOR_PREFIX]);
            let mut obj = SharcsObjective {
                model,
                loss,
                phase: SharcsPhase::LocalWarmup,
            };
            run_phase(
                &mut obj,
                trainable,
                train,
                test,
                plan.epochs,
                plan,
                &mut rngs,
                1,
                &mut history,
            )?;
            finish_two_phase(model, loss, train, test, plan, &mut rngs, &mut history)?;
        }
    }
    Ok(history)
}

fn finish_two_phase(
    model: &mut SharcsModel,
    loss: &LossConfig,
    train: &[PairedSample],
    test: &[PairedSample],
    plan: &TrainPlan,
    rngs: &mut TrainRngs,
    history: &mut History,
) -> Result<()> {
    model.local_frozen = true;
    let trainable = model.param_group(&[PROJECTOR_PREFIX, PREDICTOR_PREFIX]);
    let mut obj = SharcsObjective {
        model,
        loss,
        phase: SharcsPhase::Joint,
    };
    run_phase(
        &mut obj,
        trainable,
        train,
        test,
        plan.phase2_epochs,
        plan,
        rngs,
        2,
        history,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn bce_limits() {
        let labels = Matrix::from_rows(&[vec![1.0, 0.0]]);
        let agree = Matrix::from_rows(&[vec![40.0, -40.0]]);
        assert!(task_loss(&agree, &labels).unwrap() < 1e-15);
        let zero = Matrix::zeros(1, 2);
        assert!((task_loss(&zero, &labels).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(task_loss(&zero, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn bce_matches_naive_reference() {
        let logits = Matrix::from_rows(&[vec![0.3, -2.0], vec![4.5, 1.2], vec![-0.7, 0.0]]);
        let labels = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let naive: f64 = logits
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 6.0;
        assert!((task_loss(&logits, &labels).unwrap() - naive).abs() < 1e-9);
    }

    #[test]
    fn regularizer_cases() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
        let z = Matrix::zeros(2, 2);
        assert_eq!(
            semantic_regularizer(&[a.clone(), a.clone()], &[(0, 1)], &[0, 1]),
            (0.0, false)
        );
        assert_eq!(
            semantic_regularizer(&[a.clone(), z.clone()], &[(0, 1)], &[0]),
            (1.0, false)
        );
        assert_eq!(
            semantic_regularizer(&[a.clone(), z.clone()], &[(0, 1)], &[0, 1]),
            (2.0, false)
        );
        assert_eq!(semantic_regularizer(&[a, z], &[(0, 1)], &[]), (0.0, true));
    }

    #[test]
    fn draw_counts() {
        let labels = vec![0u8; 64];
        let mut rng = substream(1, "t");
        assert_eq!(
            draw_distance_samples(&labels, 0.1, DistanceFilter::All, &mut rng).len(),
            7
        );
        assert_eq!(
            draw_distance_samples(&labels, 1.0, DistanceFilter::All, &mut rng),
            (0..64).collect::<Vec<_>>()
        );
        let a = draw_distance_samples(&labels, 0.3, DistanceFilter::All, &mut substream(2, "t"));
        let b = draw_distance_samples(&labels, 0.3, DistanceFilter::All, &mut substream(2, "t"));
        assert_eq!(a, b);
        let mixed: Vec<u8> = (0..64).map(|i| (i % 2) as u8).collect();
        let pos = draw_distance_samples(&mixed, 1.0, DistanceFilter::PositiveOnly, &mut rng);
        assert_eq!(pos.len(), 32);
        assert!(pos.iter().all(|&i| mixed[i] == 1));
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate(2).is_ok());
        let bad = LossConfig {
            sample_fraction: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate(2).is_err());
        let bad = LossConfig {
            pairs: vec![(0, 0)],
            ..LossConfig::default()
        };
        assert!(bad.validate(2).is_err());
    }

    #[test]
    fn regime_parsing() {
        assert_eq!("end-to-end".parse::<Regime>().unwrap(), Regime::EndToEnd);
        assert_eq!(
            "local_pretrain".parse::<Regime>().unwrap(),
            Regime::LocalPretrain
        );
        assert!("joint".parse::<Regime>().is_err());
    }
}
