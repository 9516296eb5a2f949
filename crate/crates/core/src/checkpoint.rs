//! Checkpoints: a JSON manifest plus a binary file of named, shape-tagged
//! little-endian f64 blocks.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{AnchorSet, BaselineKind, BaselineModel, BaselineSpec};
use crate::config::ExperimentConfig;
use crate::datamodel::{Modality, PairedSample};
use crate::encoders::{RescaleState, SharcsModel};
use crate::error::{Result, SharcsError};
use crate::evaluation::{Classifier, MetricSet};
use crate::explain::RepresentationSpace;
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SHARCSCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ModelKind {
    Sharcs,
    Baseline { spec: BaselineSpec },
}

impl ModelKind {
    pub fn label(&self) -> String {
        match self {
            ModelKind::Sharcs => "sharcs".to_string(),
            ModelKind::Baseline { spec } => spec.label(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Sharcs(SharcsModel),
    Baseline(BaselineModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Sharcs(_) => ModelKind::Sharcs,
            AnyModel::Baseline(b) => ModelKind::Baseline { spec: b.spec },
        }
    }

    /// Metrics that are meaningful for this model: accuracy always,
    /// completeness for concept models, missing-modality substitution and
    /// retrieval for models with a per-modality comparable space.
    pub fn applicable_metrics(&self) -> MetricSet {
        let (completeness, cross) = match self {
            AnyModel::Sharcs(_) => (true, true),
            AnyModel::Baseline(b) => match b.spec.kind {
                BaselineKind::UnimodalPlain | BaselineKind::SimpleMultimodal => (false, false),
                BaselineKind::UnimodalCbm => (true, false),
                BaselineKind::ConceptMultimodal | BaselineKind::Relative => (true, true),
            },
        };
        MetricSet {
            accuracy: true,
            completeness,
            missing: cross,
            retrieval: cross,
        }
    }

    fn store(&self) -> &ParamStore {
        match self {
            AnyModel::Sharcs(m) => &m.store,
            AnyModel::Baseline(b) => &b.store,
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyModel::Sharcs(m) => &mut m.store,
            AnyModel::Baseline(b) => &mut b.store,
        }
    }

    /// Every rescaling state with a stable name.
    fn rescale_states(&self) -> Vec<(String, &RescaleState)> {
        match self {
            AnyModel::Sharcs(m) => {
                let mut out: Vec<(String, &RescaleState)> = m
                    .encoders
                    .iter()
                    .map(|e| (format!("local.{}", e.modality.name()), &e.rescale))
                    .collect();
                out.push(("shared".to_string(), &m.shared_rescale));
                out
            }
            AnyModel::Baseline(b) => b
                .encoders
                .iter()
                .map(|e| (format!("local.{}", e.modality.name()), &e.rescale))
                .collect(),
        }
    }

    fn rescale_states_mut(&mut self) -> Vec<(String, &mut RescaleState)> {
        match self {
            AnyModel::Sharcs(m) => {
                let mut out: Vec<(String, &mut RescaleState)> = m
                    .encoders
                    .iter_mut()
                    .map(|e| (format!("local.{}", e.modality.name()), &mut e.rescale))
                    .collect();
                out.push(("shared".to_string(), &mut m.shared_rescale));
                out
            }
            AnyModel::Baseline(b) => b
                .encoders
                .iter_mut()
                .map(|e| (format!("local.{}", e.modality.name()), &mut e.rescale))
                .collect(),
        }
    }
}

impl Classifier for AnyModel {
    fn logits(&self, samples: &[PairedSample]) -> Result<Matrix> {
        match self {
            AnyModel::Sharcs(m) => m.logits(samples),
            AnyModel::Baseline(b) => b.logits(samples),
        }
    }
}

impl RepresentationSpace for AnyModel {
    fn represent(&self, samples: &[PairedSample]) -> Result<Vec<Matrix>> {
        match self {
            AnyModel::Sharcs(m) => m.represent(samples),
            AnyModel::Baseline(b) => b.represent(samples),
        }
    }

    fn predict_from(&self, per_modality: &[Matrix]) -> Result<Matrix> {
        match self {
            AnyModel::Sharcs(m) => m.predict_from(per_modality),
            AnyModel::Baseline(b) => b.predict_from(per_modality),
        }
    }

    fn is_ready(&self) -> bool {
        match self {
            AnyModel::Sharcs(m) => m.is_ready(),
            AnyModel::Baseline(b) => b.is_ready(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaleEntry {
    pub name: String,
    pub width: usize,
    pub trained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub kind: ModelKind,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub modality_order: Vec<Modality>,
    pub params: Vec<ParamEntry>,
    pub rescale: Vec<RescaleEntry>,
    pub local_frozen: bool,
    pub trained: bool,
    pub anchor_ids: Option<Vec<usize>>,
}

/// Binary companion of a manifest path.
pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn blocks_of(model: &AnyModel) -> Vec<(String, Matrix)> {
    let mut blocks: Vec<(String, Matrix)> = model
        .store()
        .iter()
        .map(|(_, p)| (format!("param.{}", p.name), p.value.clone()))
        .collect();
    for (name, state) in model.rescale_states() {
        let w = state.width();
        blocks.push((
            format!("rescale.{name}.mean"),
            Matrix::from_vec(1, w, state.running_mean.clone()),
        ));
        blocks.push((
            format!("rescale.{name}.var"),
            Matrix::from_vec(1, w, state.running_var.clone()),
        ));
    }
    if let AnyModel::Baseline(BaselineModel {
        anchors: Some(a),
        encoders,
        ..
    }) = model
    {
        for (e, m) in encoders.iter().zip(&a.embeddings) {
            blocks.push((format!("anchors.{}", e.modality.name()), m.clone()));
        }
    }
    blocks
}

pub fn encode_blocks(blocks: &[(String, Matrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, m) in blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_blocks(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let bad = |m: &str| SharcsError::Format(format!("checkpoint blob: {m}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let slice = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(slice)
    };
    if take(8)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("four bytes"));
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(bad(&format!(
            "version {version}, expected {CHECKPOINT_FORMAT_VERSION}"
        )));
    }
    let count = u32_at(take(4)?) as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("name is not utf-8"))?;
        let rows = u32_at(take(4)?) as usize;
        let cols = u32_at(take(4)?) as usize;
        let data = take(rows * cols * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        blocks.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(blocks)
}

pub fn manifest_of(model: &AnyModel, config: &ExperimentConfig) -> CheckpointManifest {
    let (local_frozen, trained, anchor_ids) = match model {
        AnyModel::Sharcs(m) => (m.local_frozen, m.is_trained(), None),
        AnyModel::Baseline(b) => (false, b.trained, b.anchors.as_ref().map(|a| a.ids.clone())),
    };
    CheckpointManifest {
        version: CHECKPOINT_FORMAT_VERSION,
        kind: model.kind(),
        config: config.clone(),
        config_hash: config.hash(),
        dataset_fingerprint: config.dataset_fingerprint(),
        modality_order: Modality::ALL.to_vec(),
        params: model
            .store()
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape(),
            })
            .collect(),
        rescale: model
            .rescale_states()
            .into_iter()
            .map(|(name, s)| RescaleEntry {
                name,
                width: s.width(),
                trained: s.trained,
            })
            .collect(),
        local_frozen,
        trained,
        anchor_ids,
    }
}

pub fn save_checkpoint(
    manifest_path: &Path,
    model: &AnyModel,
    config: &ExperimentConfig,
) -> Result<()> {
    let manifest = manifest_of(model, config);
    std::fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    std::fs::write(blob_path(manifest_path), encode_blocks(&blocks_of(model)))?;
    Ok(())
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(CheckpointManifest, AnyModel)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
    if manifest.version != CHECKPOINT_FORMAT_VERSION {
        return Err(SharcsError::Format(format!(
            "checkpoint version {}, expected {CHECKPOINT_FORMAT_VERSION}",
            manifest.version
        )));
    }
    if manifest.modality_order != Modality::ALL {
        return Err(SharcsError::Format("unexpected modality order".into()));
    }
    let blocks = decode_blocks(&std::fs::read(blob_path(manifest_path))?)?;
    let cfg = &manifest.config;
    let mut model = match manifest.kind {
        ModelKind::Sharcs => AnyModel::Sharcs(SharcsModel::new(&cfg.model, cfg.train.seed)?),
        ModelKind::Baseline { spec } => AnyModel::Baseline(BaselineModel::new(
            spec,
            &cfg.model,
            &cfg.baselines,
            cfg.train.seed,
        )?),
    };
    let lookup = |name: &str| -> Result<&Matrix> {
        blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| SharcsError::Format(format!("checkpoint lacks block `{name}`")))
    };
    let expected: Vec<ParamEntry> = model
        .store()
        .iter()
        .map(|(_, p)| ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape(),
        })
        .collect();
    if expected != manifest.params {
        return Err(SharcsError::Mismatch(
            "checkpoint parameters do not match the configured architecture".into(),
        ));
    }
    let ids: Vec<_> = model.store().ids().collect();
    for id in ids {
        let name = format!("param.{}", model.store().name(id));
        let value = lookup(&name)?.clone();
        let slot = model.store_mut().value_mut(id);
        if value.shape() != slot.shape() {
            return Err(SharcsError::Mismatch(format!("shape of `{name}`")));
        }
        *slot = value;
    }
    let trained_flags: Vec<(String, bool)> = manifest
        .rescale
        .iter()
        .map(|r| (r.name.clone(), r.trained))
        .collect();
    for (name, state) in model.rescale_states_mut() {
        let mean = lookup(&format!("rescale.{name}.mean"))?;
        let var = lookup(&format!("rescale.{name}.var"))?;
        if mean.cols() != state.width() || var.cols() != state.width() {
            return Err(SharcsError::Mismatch(format!("width of rescale `{name}`")));
        }
        state.running_mean = mean.data().to_vec();
        state.running_var = var.data().to_vec();
        state.trained = trained_flags
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| *t)
            .ok_or_else(|| SharcsError::Format(format!("manifest lacks rescale `{name}`")))?;
    }
    match &mut model {
        AnyModel::Sharcs(m) => m.local_frozen = manifest.local_frozen,
        AnyModel::Baseline(b) => {
            b.trained = manifest.trained;
            if let Some(ids) = &manifest.anchor_ids {
                let embeddings = b
                    .encoders
                    .iter()
                    .map(|e| lookup(&format!("anchors.{}", e.modality.name())).cloned())
                    .collect::<Result<Vec<_>>>()?;
                b.anchors = Some(AnchorSet {
                    ids: ids.clone(),
                    embeddings,
                });
            }
        }
    }
    Ok((manifest, model))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip() {
        let blocks = vec![
            (
                "a".to_string(),
                Matrix::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3.0]]),
            ),
            ("b.c".to_string(), Matrix::zeros(0, 4)),
        ];
        let bytes = encode_blocks(&blocks);
        assert_eq!(decode_blocks(&bytes).unwrap(), blocks);
        assert!(decode_blocks(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 99;
        assert!(decode_blocks(&wrong).is_err());
    }

    #[test]
    fn untrained_model_round_trip() {
        let dir = std::env::temp_dir().join(format!("sharcs-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        let cfg = ExperimentConfig::default();
        let model = AnyModel::Sharcs(SharcsModel::new(&cfg.model, 3).unwrap());
        save_checkpoint(&path, &model, &cfg).unwrap();
        let (manifest, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.kind, ModelKind::Sharcs);
        assert_eq!(loaded, model);
    }
}
