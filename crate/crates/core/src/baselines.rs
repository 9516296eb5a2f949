//! Comparison models built from the same local backbones: unimodal
//! (plain and concept bottleneck), simple and concept multimodal fusion,
//! and anchor-based relative representations.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::{BaselineParams, ModelConfig};
use crate::datamodel::{batches, Batch, BatchMode, DatasetSplit, Modality, PairedSample};
use crate::encoders::{Activation, ForwardCtx, LocalEncoder, Mlp2, Moments, ENCODER_PREFIX};
use crate::error::{invalid_arg, invalid_state, Result, SharcsError};
use crate::evaluation::{missing_modality_eval, Classifier, EVAL_BATCH};
use crate::explain::{order_positions, ConceptIndex, RepresentationSpace};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, StreamRng};
use crate::tensor::Matrix;
use crate::training::{run_phase, History, LossBreakdown, Objective, TrainPlan, TrainRngs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    UnimodalPlain,
    UnimodalCbm,
    SimpleMultimodal,
    ConceptMultimodal,
    Relative,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::UnimodalPlain,
        BaselineKind::UnimodalCbm,
        BaselineKind::SimpleMultimodal,
        BaselineKind::ConceptMultimodal,
        BaselineKind::Relative,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::UnimodalPlain => "unimodal_plain",
            BaselineKind::UnimodalCbm => "unimodal_cbm",
            BaselineKind::SimpleMultimodal => "simple_multimodal",
            BaselineKind::ConceptMultimodal => "concept_multimodal",
            BaselineKind::Relative => "relative",
        }
    }

    pub fn is_unimodal(self) -> bool {
        matches!(
            self,
            BaselineKind::UnimodalPlain | BaselineKind::UnimodalCbm
        )
    }

    /// Concept-bottleneck variants pass embeddings through rescale and
    /// sigmoid.
    fn uses_concepts(self) -> bool {
        matches!(
            self,
            BaselineKind::UnimodalCbm | BaselineKind::ConceptMultimodal
        )
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = SharcsError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| invalid_arg(format!("unknown baseline `{s}`")))
    }
}

/// A baseline kind plus, for unimodal kinds, its input modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub modality: Option<Modality>,
}

impl BaselineSpec {
    pub fn new(kind: BaselineKind, modality: Option<Modality>) -> Result<Self> {
        match (kind.is_unimodal(), modality) {
            (true, None) => Err(invalid_arg(format!("{} needs a modality", kind.name()))),
            (false, Some(_)) => Err(invalid_arg(format!("{} uses every modality", kind.name()))),
            _ => Ok(Self { kind, modality }),
        }
    }

    pub fn modalities(&self) -> Vec<Modality> {
        match self.modality {
            Some(m) => vec![m],
            None => Modality::ALL.to_vec(),
        }
    }

    /// Name used in reports and ledgers.
    pub fn label(&self) -> String {
        match self.modality {
            Some(m) => format!("{}_{}", self.kind.name(), m.name()),
            None => self.kind.name().to_string(),
        }
    }
}

/// Anchors and their frozen embeddings, one matrix per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub ids: Vec<usize>,
    pub embeddings: Vec<Matrix>,
}

pub const UNIMODAL_HEAD_PREFIX: &str = "f_uni";
pub const HEAD_PREFIX: &str = "f";

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub spec: BaselineSpec,
    pub config: ModelConfig,
    pub store: ParamStore,
    /// One encoder per input modality, in [`BaselineSpec::modalities`] order.
    pub encoders: Vec<LocalEncoder>,
    /// Unimodal heads used to pre-train the relative encoders.
    pub unimodal_heads: Vec<Mlp2>,
    pub head: Mlp2,
    pub anchors: Option<AnchorSet>,
    pub trained: bool,
}

impl BaselineModel {
    pub fn new(
        spec: BaselineSpec,
        config: &ModelConfig,
        params: &BaselineParams,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let spec = BaselineSpec::new(spec.kind, spec.modality)?;
        let mut rng = rng::substream(seed, rng::INIT);
        let mut store = ParamStore::default();
        let modalities = spec.modalities();
        let encoders: Vec<LocalEncoder> = modalities
            .iter()
            .map(|&m| LocalEncoder::new(&mut store, ENCODER_PREFIX, m, config, &mut rng))
            .collect();
        let k = config.local_width;
        let unimodal_heads = if spec.kind == BaselineKind::Relative {
            modalities
                .iter()
                .map(|m| {
                    Mlp2::new(
                        &mut store,
                        &format!("{UNIMODAL_HEAD_PREFIX}.{}", m.name()),
                        (k, config.predictor_hidden, config.classes),
                        Activation::Relu,
                        &mut rng,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let per_modality = if spec.kind == BaselineKind::Relative {
            params.anchor_count
        } else {
            k
        };
        let head = Mlp2::new(
            &mut store,
            HEAD_PREFIX,
            (
                modalities.len() * per_modality,
                config.predictor_hidden,
                config.classes,
            ),
            Activation::Relu,
            &mut rng,
        );
        Ok(Self {
            spec,
            config: config.clone(),
            store,
            encoders,
            unimodal_heads,
            head,
            anchors: None,
            trained: false,
        })
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.spec.modalities()
    }

    pub fn backbone_shapes(&self) -> Vec<(Modality, Vec<(usize, usize)>)> {
        self.encoders
            .iter()
            .map(|e| (e.modality, e.backbone.layer_shapes()))
            .collect()
    }

    fn param_group(&self, prefix: &str) -> Vec<ParamId> {
        self.store.with_prefixes(&[&format!("{prefix}.")])
    }

    /// Per-modality inputs to the head and any train-mode moments.
    fn features_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<(Vec<Var>, Vec<Option<Moments>>)> {
        let mut vars = Vec::new();
        let mut moments = Vec::new();
        for (slot, enc) in self.encoders.iter().enumerate() {
            if self.spec.kind.uses_concepts() {
                let (v, m) = enc.concepts(tape, &self.store, batch, ctx)?;
                vars.push(v);
                moments.push(m);
                continue;
            }
            let embedding = enc.pooled_embedding(tape, &self.store, batch);
            if self.spec.kind == BaselineKind::Relative {
                let anchors = self
                    .anchors
                    .as_ref()
                    .ok_or_else(|| invalid_state("relative baseline has no anchors yet"))?;
                let rel = relative_representation(tape.value(embedding), &anchors.embeddings[slot]);
                vars.push(tape.constant(rel));
            } else {
                vars.push(embedding);
            }
            moments.push(None);
        }
        Ok((vars, moments))
    }

    fn commit(&mut self, moments: &[Option<Moments>]) {
        for (enc, m) in self.encoders.iter_mut().zip(moments) {
            if let Some(m) = m {
                enc.rescale.commit(m);
            }
        }
    }

    fn head_logits(&self, tape: &mut Tape, features: &[Var]) -> Var {
        let joined = tape.concat_cols(features);
        self.head.forward(tape, &self.store, joined)
    }

    /// Eval-mode per-modality representations, rows in `samples` order.
    pub fn features(&self, samples: &[PairedSample]) -> Result<Vec<Matrix>> {
        if !self.trained {
            return Err(invalid_state("baseline is not trained"));
        }
        self.features_untrained(samples)
    }

    fn features_untrained(&self, samples: &[PairedSample]) -> Result<Vec<Matrix>> {
        let mut parts: Vec<Vec<Matrix>> = vec![Vec::new(); self.encoders.len()];
        for batch in batches::<StreamRng>(samples, EVAL_BATCH, None, BatchMode::Eval)? {
            let mut tape = Tape::new();
            let (vars, _) = self.features_on_tape(&mut tape, &batch, &mut ForwardCtx::eval())?;
            for (p, v) in parts.iter_mut().zip(vars) {
                p.push(tape.value(v).clone());
            }
        }
        let positions = order_positions(samples);
        Ok(parts
            .iter()
            .map(|p| Matrix::vstack(&p.iter().collect::<Vec<_>>()).select_rows(&positions))
            .collect())
    }

    /// Plain pooled embeddings (no concept bottleneck, no anchors).
    fn pooled_embeddings(&self, samples: &[PairedSample]) -> Result<Vec<Matrix>> {
        let mut parts: Vec<Vec<Matrix>> = vec![Vec::new(); self.encoders.len()];
        for batch in batches::<StreamRng>(samples, EVAL_BATCH, None, BatchMode::Eval)? {
            let mut tape = Tape::new();
            for (p, enc) in parts.iter_mut().zip(&self.encoders) {
                let v = enc.pooled_embedding(&mut tape, &self.store, &batch);
                p.push(tape.value(v).clone());
            }
        }
        let positions = order_positions(samples);
        Ok(parts
            .iter()
            .map(|p| Matrix::vstack(&p.iter().collect::<Vec<_>>()).select_rows(&positions))
            .collect())
    }

    fn choose_anchors(&mut self, train: &[PairedSample], count: usize, seed: u64) -> Result<()> {
        if count == 0 || count > train.len() {
            return Err(invalid_arg(format!(
                "cannot draw {count} anchors from {} training samples",
                train.len()
            )));
        }
        let mut rng = rng::substream(seed, rng::ANCHORS);
        let mut picked: Vec<PairedSample> = index::sample(&mut rng, train.len(), count)
            .into_iter()
            .map(|i| train[i].clone())
            .collect();
        picked.sort_by_key(|s| s.id);
        let embeddings = self.pooled_embeddings(&picked)?;
        self.anchors = Some(AnchorSet {
            ids: picked.iter().map(|s| s.id).collect(),
            embeddings,
        });
        Ok(())
    }
}

/// Cosine similarity of every embedding row to every anchor row. Zero
/// vectors have similarity 0 to everything.
pub fn relative_representation(embeddings: &Matrix, anchors: &Matrix) -> Matrix {
    let norms = |m: &Matrix| -> Vec<f64> {
        (0..m.rows())
            .map(|r| m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    };
    let (en, an) = (norms(embeddings), norms(anchors));
    let mut out = embeddings.matmul_t(anchors);
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            let denom = en[r] * an[c];
            let v = if denom == 0.0 {
                0.0
            } else {
                out.get(r, c) / denom
            };
            out.set(r, c, v);
        }
    }
    out
}

impl Classifier for BaselineModel {
    fn logits(&self, samples: &[PairedSample]) -> Result<Matrix> {
        let parts = self.features(samples)?;
        self.predict_from(&parts)
    }
}

impl RepresentationSpace for BaselineModel {
    fn represent(&self, samples: &[PairedSample]) -> Result<Vec<Matrix>> {
        self.features(samples)
    }

    fn predict_from(&self, per_modality: &[Matrix]) -> Result<Matrix> {
        if per_modality.len() != self.encoders.len() {
            return Err(invalid_arg(
                "one representation per input modality is required",
            ));
        }
        let mut tape = Tape::new();
        let vars: Vec<Var> = per_modality
            .iter()
            .map(|m| tape.constant(m.clone()))
            .collect();
        let logits = self.head_logits(&mut tape, &vars);
        Ok(tape.value(logits).clone())
    }

    fn is_ready(&self) -> bool {
        self.trained
    }
}

enum BaselinePhase {
    /// Head (and encoders, unless relative) on the global task.
    Main,
    /// Each relative encoder with its own unimodal head.
    RelativeWarmup,
}

struct BaselineObjective<'a> {
    model: &'a mut BaselineModel,
    phase: BaselinePhase,
}

impl Objective for BaselineObjective<'_> {
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
        let loss = match self.phase {
            BaselinePhase::Main => {
                let (features, moments) = self.model.features_on_tape(tape, batch, &mut ctx)?;
                let logits = self.model.head_logits(tape, &features);
                self.model.commit(&moments);
                tape.bce_with_logits(logits, batch.global_one_hot())
            }
            BaselinePhase::RelativeWarmup => {
                let mut total: Option<Var> = None;
                for (enc, head) in self.model.encoders.iter().zip(&self.model.unimodal_heads) {
                    let e = enc.pooled_embedding(tape, &self.model.store, batch);
                    let logits = head.forward(tape, &self.model.store, e);
                    let l = tape.bce_with_logits(logits, batch.global_one_hot());
                    total = Some(match total {
                        None => l,
                        Some(acc) => tape.add(acc, l),
                    });
                }
                total.expect("relative baseline has encoders")
            }
        };
        let value = tape.scalar(loss);
        Ok((
            loss,
            LossBreakdown {
                task: value,
                total: value,
                ..LossBreakdown::default()
            },
        ))
    }

    fn test_accuracy(&self, samples: &[PairedSample]) -> Result<f64> {
        match self.phase {
            BaselinePhase::Main => {
                let parts = self.model.features_untrained(samples)?;
                let logits = self.model.predict_from(&parts)?;
                let labels: Vec<u8> = samples.iter().map(|s| s.global_label).collect();
                Ok(crate::evaluation::accuracy_from_logits(&logits, &labels))
            }
            BaselinePhase::RelativeWarmup => Ok(f64::NAN),
        }
    }
}

/// Trains a baseline on `split`. Relative baselines train their encoders
/// for `plan.epochs`, then only the head for `relative_head_epochs`.
pub fn train_baseline(
    model: &mut BaselineModel,
    split: &DatasetSplit,
    plan: &TrainPlan,
    params: &BaselineParams,
) -> Result<History> {
    plan.validate()?;
    let mut rngs = TrainRngs::new(plan.seed);
    let mut history = History::default();
    let (train, test) = (&split.train, &split.test);
    if model.spec.kind == BaselineKind::Relative {
        let mut trainable = model.param_group(ENCODER_PREFIX);
        trainable.extend(model.param_group(UNIMODAL_HEAD_PREFIX));
        let mut obj = BaselineObjective {
            model,
            phase: BaselinePhase::RelativeWarmup,
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
        model.choose_anchors(train, params.anchor_count, plan.seed)?;
        let trainable = model.param_group(HEAD_PREFIX);
        let mut obj = BaselineObjective {
            model,
            phase: BaselinePhase::Main,
        };
        run_phase(
            &mut obj,
            trainable,
            train,
            test,
            params.relative_head_epochs,
            plan,
            &mut rngs,
            2,
            &mut history,
        )?;
    } else {
        let trainable = model.store.ids().collect();
        let mut obj = BaselineObjective {
            model,
            phase: BaselinePhase::Main,
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
    model.trained = true;
    Ok(history)
}

/// Concept index over the baseline's own representation space.
pub fn baseline_index(model: &BaselineModel, train: &[PairedSample]) -> Result<ConceptIndex> {
    ConceptIndex::from_parts(train, model.features(train)?)
}

/// Missing-modality accuracy in the baseline's own representation space.
pub fn baseline_missing_modality(
    model: &BaselineModel,
    index: &ConceptIndex,
    test: &[PairedSample],
    missing: Modality,
) -> Result<f64> {
    match model.spec.kind {
        BaselineKind::ConceptMultimodal | BaselineKind::Relative => {
            missing_modality_eval(model, index, test, missing)
        }
        other => Err(SharcsError::Unsupported(format!(
            "{} has no comparable per-modality representation",
            other.name()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![2.0, 2.0]]);
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0]]);
        let r = relative_representation(&e, &a);
        assert_eq!(r.row(0), &[1.0, 0.0]);
        assert_eq!(r.row(1), &[0.0, 0.0]);
        let h = 1.0 / 2f64.sqrt();
        assert!((r.get(2, 0) - h).abs() < 1e-12 && (r.get(2, 1) - h).abs() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        assert!(BaselineSpec::new(BaselineKind::UnimodalPlain, None).is_err());
        assert!(BaselineSpec::new(BaselineKind::SimpleMultimodal, Some(Modality::Graph)).is_err());
        let s = BaselineSpec::new(BaselineKind::UnimodalCbm, Some(Modality::Tabular)).unwrap();
        assert_eq!(s.label(), "unimodal_cbm_tabular");
        assert_eq!(
            "concept-multimodal".parse::<BaselineKind>().unwrap(),
            BaselineKind::ConceptMultimodal
        );
        assert!("clip".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn unsupported_missing_modality() {
        let spec = BaselineSpec::new(BaselineKind::SimpleMultimodal, None).unwrap();
        let m = BaselineModel::new(spec, &ModelConfig::default(), &BaselineParams::default(), 0)
            .unwrap();
        let idx =
            ConceptIndex::from_parts(&[], vec![Matrix::zeros(0, 7), Matrix::zeros(0, 7)]).unwrap();
        assert!(matches!(
            baseline_missing_modality(&m, &idx, &[], Modality::Graph),
            Err(SharcsError::Unsupported(_))
        ));
    }
}
