//! Local concept encoders, the shared-space projectors and the label
//! predictor.
//!
//! Modality 0 is the graph, modality 1 the tabular bit-string. Every
//! forward pass is a pure function of `&self`; train-mode batch moments are
//! returned in [`RescaleUpdates`] and committed by the caller.

mod layers;
mod rescale;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::datamodel::{Batch, Modality, TABULAR_WIDTH};
use crate::error::{invalid_arg, invalid_state, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, StreamRng};
use crate::tensor::Matrix;

pub use layers::{Activation, Dense, Gcn, Mlp2};
pub use rescale::{batch_rescale, column_moments, Mode, Moments, RescaleState};

/// How graph nodes are assigned to node concepts in train mode.
pub enum NodeAssignment<'a> {
    /// Straight-through Gumbel softmax with noise from this stream.
    Gumbel(&'a mut StreamRng),
    /// Noise-free softmax, no hard rounding. Used for gradient checks.
    Soft,
}

pub struct ForwardCtx<'a> {
    pub mode: Mode,
    pub assignment: NodeAssignment<'a>,
}

impl<'a> ForwardCtx<'a> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            assignment: NodeAssignment::Soft,
        }
    }

    pub fn train(gumbel: &'a mut StreamRng) -> Self {
        Self {
            mode: Mode::Train,
            assignment: NodeAssignment::Gumbel(gumbel),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Backbone {
    Dense(Mlp2),
    Graph(Gcn),
}

impl Backbone {
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            Backbone::Dense(m) => m.layer_shapes(),
            Backbone::Graph(g) => g.layer_shapes(),
        }
    }
}

/// Node-concept assignment for graph encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphConceptHead {
    pub width: usize,
    pub tau: f64,
}

impl GraphConceptHead {
    /// Per-node concept assignment followed by a per-graph occurrence count.
    pub fn counts(&self, tape: &mut Tape, nodes: Var, batch: &Batch, ctx: &mut ForwardCtx) -> Var {
        let assigned = match (ctx.mode, &mut ctx.assignment) {
            (Mode::Eval, _) => tape.categorical_relax(nodes, None, self.tau, true),
            (Mode::Train, NodeAssignment::Soft) => {
                tape.categorical_relax(nodes, None, self.tau, false)
            }
            (Mode::Train, NodeAssignment::Gumbel(rng)) => {
                let shape = tape.value(nodes).shape();
                let noise = gumbel_noise(shape.0, shape.1, rng);
                tape.categorical_relax(nodes, Some(&noise), self.tau, true)
            }
        };
        tape.segment_sum(assigned, batch.graphs.offsets.clone())
    }
}

pub fn gumbel_noise(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// `g_i = sigmoid ∘ rescale ∘ φ_i`, with the node-concept head in between
/// for graphs.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEncoder {
    pub modality: Modality,
    pub backbone: Backbone,
    pub head: Option<GraphConceptHead>,
    pub rescale: RescaleState,
}

impl LocalEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        modality: Modality,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let k = cfg.local_width;
        let name = format!("{prefix}.{}", modality.name());
        let (backbone, head) = match modality {
            Modality::Tabular => (
                Backbone::Dense(Mlp2::new(
                    store,
                    &name,
                    (TABULAR_WIDTH, cfg.tabular_hidden, k),
                    Activation::Relu,
                    rng,
                )),
                None,
            ),
            Modality::Graph => {
                let mut widths = vec![1];
                widths.extend(std::iter::repeat(cfg.graph_hidden).take(cfg.graph_layers - 1));
                widths.push(k);
                (
                    Backbone::Graph(Gcn::new(
                        store,
                        &name,
                        &widths,
                        Activation::LeakyRelu(cfg.leaky_slope),
                        rng,
                    )),
                    Some(GraphConceptHead {
                        width: k,
                        tau: cfg.tau,
                    }),
                )
            }
        };
        Self {
            modality,
            backbone,
            head,
            rescale: RescaleState::new(k, cfg.rescale_momentum, cfg.rescale_epsilon),
        }
    }

    pub fn width(&self) -> usize {
        self.rescale.width()
    }

    /// Raw backbone output: `b×k` for dense inputs, one row per node for
    /// graphs.
    pub fn backbone_output(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Var {
        match &self.backbone {
            Backbone::Dense(mlp) => {
                let x = tape.constant(batch.tabular.clone());
                mlp.forward(tape, store, x)
            }
            Backbone::Graph(gcn) => {
                let x = tape.constant(batch.graphs.features.clone());
                gcn.forward(tape, store, x, &batch.graphs.propagation)
            }
        }
    }

    /// Per-sample embedding without the concept bottleneck (graphs are
    /// sum-pooled over nodes).
    pub fn pooled_embedding(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Var {
        let out = self.backbone_output(tape, store, batch);
        match self.backbone {
            Backbone::Dense(_) => out,
            Backbone::Graph(_) => tape.segment_sum(out, batch.graphs.offsets.clone()),
        }
    }

    /// Pre-rescale concept scores: `φ(x)` or the node-concept counts `n_im`.
    pub fn pre_rescale(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Var {
        let out = self.backbone_output(tape, store, batch);
        match &self.head {
            None => out,
            Some(head) => head.counts(tape, out, batch, ctx),
        }
    }

    pub fn concepts(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<(Var, Option<Moments>)> {
        let pre = self.pre_rescale(tape, store, batch, ctx);
        let (scaled, moments) = self.rescale.apply(tape, pre, ctx.mode)?;
        Ok((tape.sigmoid(scaled), moments))
    }
}

/// Train-mode batch statistics from one forward pass.
#[derive(Clone, Debug, Default)]
pub struct RescaleUpdates {
    pub local: Vec<Option<Moments>>,
    pub shared: Option<Moments>,
}

/// Tape handles for every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub local: Vec<Var>,
    pub shared: Vec<Var>,
    pub logits: Var,
    pub local_logits: Option<Vec<Var>>,
    pub updates: RescaleUpdates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub local: Vec<Matrix>,
    pub shared: Vec<Matrix>,
    pub logits: Matrix,
    pub local_logits: Option<Vec<Matrix>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharcsModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: Vec<LocalEncoder>,
    pub projectors: Vec<Mlp2>,
    pub shared_rescale: RescaleState,
    pub predictor: Mlp2,
    pub local_predictors: Option<Vec<Mlp2>>,
    /// Local encoders run in eval mode and are excluded from training.
    pub local_frozen: bool,
}

pub const ENCODER_PREFIX: &str = "g";
pub const PROJECTOR_PREFIX: &str = "h";
pub const PREDICTOR_PREFIX: &str = "f";
pub const LOCAL_PREDICTOR_PREFIX: &str = "f_local";

impl SharcsModel {
    /// Parameters are drawn from the `init` substream of `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, rng::INIT);
        let mut store = ParamStore::default();
        let encoders: Vec<LocalEncoder> = Modality::ALL
            .iter()
            .map(|&m| LocalEncoder::new(&mut store, ENCODER_PREFIX, m, config, &mut rng))
            .collect();
        let projectors = Modality::ALL
            .iter()
            .map(|m| {
                Mlp2::new(
                    &mut store,
                    &format!("{PROJECTOR_PREFIX}.{}", m.name()),
                    (
                        config.local_width,
                        config.projector_hidden,
                        config.shared_width,
                    ),
                    Activation::Relu,
                    &mut rng,
                )
            })
            .collect();
        let predictor = Mlp2::new(
            &mut store,
            PREDICTOR_PREFIX,
            (
                Modality::ALL.len() * config.shared_width,
                config.predictor_hidden,
                config.classes,
            ),
            Activation::Relu,
            &mut rng,
        );
        let local_predictors = config.local_predictors.then(|| {
            Modality::ALL
                .iter()
                .map(|m| {
                    Mlp2::new(
                        &mut store,
                        &format!("{LOCAL_PREDICTOR_PREFIX}.{}", m.name()),
                        (
                            config.local_width,
                            config.local_predictor_hidden,
                            config.classes,
                        ),
                        Activation::Relu,
                        &mut rng,
                    )
                })
                .collect()
        });
        Ok(Self {
            config: config.clone(),
            store,
            encoders,
            projectors,
            shared_rescale: RescaleState::new(
                config.shared_width,
                config.rescale_momentum,
                config.rescale_epsilon,
            ),
            predictor,
            local_predictors,
            local_frozen: false,
        })
    }

    pub fn modality_count(&self) -> usize {
        self.encoders.len()
    }

    pub fn is_trained(&self) -> bool {
        self.encoders.iter().all(|e| e.rescale.trained) && self.shared_rescale.trained
    }

    /// Ids of all parameters whose name starts with one of `prefixes`
    /// followed by a dot.
    pub fn param_group(&self, prefixes: &[&str]) -> Vec<ParamId> {
        let dotted: Vec<String> = prefixes.iter().map(|p| format!("{p}.")).collect();
        let refs: Vec<&str> = dotted.iter().map(String::as_str).collect();
        self.store.with_prefixes(&refs)
    }

    pub fn local_concepts_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<(Vec<Var>, Vec<Option<Moments>>)> {
        let mut vars = Vec::new();
        let mut moments = Vec::new();
        for enc in &self.encoders {
            let (v, m) = if self.local_frozen {
                let mut frozen = ForwardCtx::eval();
                enc.concepts(tape, &self.store, batch, &mut frozen)?
            } else {
                enc.concepts(tape, &self.store, batch, ctx)?
            };
            vars.push(v);
            moments.push(m);
        }
        Ok((vars, moments))
    }

    /// Shared concepts from per-modality local concepts. Train-mode
    /// statistics are taken over the union of all modalities' rows.
    pub fn shared_on_tape(
        &self,
        tape: &mut Tape,
        local: &[Var],
        mode: Mode,
    ) -> Result<(Vec<Var>, Option<Moments>)> {
        if local.len() != self.projectors.len() {
            return Err(invalid_arg(format!(
                "expected {} modalities, got {}",
                self.projectors.len(),
                local.len()
            )));
        }
        let rows = tape.value(local[0]).rows();
        if local.iter().any(|&v| tape.value(v).rows() != rows) {
            return Err(invalid_arg("local concept batches differ in length"));
        }
        let projected: Vec<Var> = self
            .projectors
            .iter()
            .zip(local)
            .map(|(p, &c)| p.forward(tape, &self.store, c))
            .collect();
        let stacked = tape.concat_rows(&projected);
        let (scaled, moments) = self.shared_rescale.apply(tape, stacked, mode)?;
        let activated = tape.sigmoid(scaled);
        let shared = (0..projected.len())
            .map(|i| tape.slice_rows(activated, i * rows, rows))
            .collect();
        Ok((shared, moments))
    }

    pub fn predict_on_tape(&self, tape: &mut Tape, shared: &[Var]) -> Result<Var> {
        if shared.len() != self.modality_count() {
            return Err(invalid_arg("every modality's shared concepts are required"));
        }
        let joined = tape.concat_cols(shared);
        Ok(self.predictor.forward(tape, &self.store, joined))
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardVars> {
        let (local, local_moments) = self.local_concepts_on_tape(tape, batch, ctx)?;
        let (shared, shared_moments) = self.shared_on_tape(tape, &local, ctx.mode)?;
        let logits = self.predict_on_tape(tape, &shared)?;
        let local_logits = self.local_predictors.as_ref().map(|heads| {
            heads
                .iter()
                .zip(&local)
                .map(|(h, &c)| h.forward(tape, &self.store, c))
                .collect()
        });
        Ok(ForwardVars {
            local,
            shared,
            logits,
            local_logits,
            updates: RescaleUpdates {
                local: local_moments,
                shared: shared_moments,
            },
        })
    }

    pub fn commit(&mut self, updates: &RescaleUpdates) {
        for (enc, m) in self.encoders.iter_mut().zip(&updates.local) {
            if let Some(m) = m {
                enc.rescale.commit(m);
            }
        }
        if let Some(m) = &updates.shared {
            self.shared_rescale.commit(m);
        }
    }

    /// Forward pass with materialised intermediates. In train mode the
    /// running statistics are updated.
    pub fn forward(&mut self, batch: &Batch, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = self.forward_on_tape(&mut tape, batch, ctx)?;
        self.commit(&vars.updates);
        Ok(materialize(&tape, &vars))
    }

    /// Eval-mode forward pass; never mutates the model.
    pub fn infer(&self, batch: &Batch) -> Result<ForwardOutput> {
        if !self.is_trained() {
            return Err(invalid_state("model has no trained rescaling statistics"));
        }
        let mut tape = Tape::new();
        let vars = self.forward_on_tape(&mut tape, batch, &mut ForwardCtx::eval())?;
        Ok(materialize(&tape, &vars))
    }

    /// Label logits from already computed shared concepts (eval path used by
    /// missing-modality substitution).
    pub fn predict_from_shared(&self, shared: &[Matrix]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = shared.iter().map(|m| tape.constant(m.clone())).collect();
        let logits = self.predict_on_tape(&mut tape, &vars)?;
        Ok(tape.value(logits).clone())
    }

    /// Layer shapes of each modality's backbone.
    pub fn backbone_shapes(&self) -> Vec<Vec<(usize, usize)>> {
        self.encoders
            .iter()
            .map(|e| e.backbone.layer_shapes())
            .collect()
    }
}

fn materialize(tape: &Tape, vars: &ForwardVars) -> ForwardOutput {
    let grab = |v: &[Var]| v.iter().map(|&x| tape.value(x).clone()).collect::<Vec<_>>();
    ForwardOutput {
        local: grab(&vars.local),
        shared: grab(&vars.shared),
        logits: tape.value(vars.logits).clone(),
        local_logits: vars.local_logits.as_ref().map(|l| grab(l)),
    }
}

/// Standalone local-concept computation for one encoder.
pub fn local_concepts(
    encoder: &mut LocalEncoder,
    store: &ParamStore,
    batch: &Batch,
    ctx: &mut ForwardCtx,
) -> Result<Matrix> {
    let mut tape = Tape::new();
    let (v, m) = encoder.concepts(&mut tape, store, batch, ctx)?;
    if let Some(m) = m {
        encoder.rescale.commit(&m);
    }
    Ok(tape.value(v).clone())
}

#[cfg(test)]
mod tests;
