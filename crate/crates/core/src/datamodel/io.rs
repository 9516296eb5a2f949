use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{family_to_bits, DatasetParams, PairedSample, TABULAR_WIDTH};
use crate::datamodel::graph::betweenness;
use crate::error::{Result, SharcsError};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    #[serde(flatten)]
    pub params: DatasetParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub samples: Vec<PairedSample>,
}

pub fn save_dataset(path: &Path, params: &DatasetParams, samples: &[PairedSample]) -> Result<()> {
    let file = DatasetFile {
        header: DatasetHeader {
            version: DATASET_FORMAT_VERSION,
            params: *params,
        },
        samples: samples.to_vec(),
    };
    fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

/// Loads and validates a dataset document.
pub fn load_dataset(path: &Path) -> Result<(DatasetParams, Vec<PairedSample>)> {
    let file: DatasetFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.header.version != DATASET_FORMAT_VERSION {
        return Err(SharcsError::Format(format!(
            "dataset version {} (expected {DATASET_FORMAT_VERSION})",
            file.header.version
        )));
    }
    if file.samples.len() != file.header.params.n_samples {
        return Err(SharcsError::Format(format!(
            "header announces {} samples, found {}",
            file.header.params.n_samples,
            file.samples.len()
        )));
    }
    for s in &file.samples {
        validate(s, &file.header.params)?;
    }
    Ok((file.header.params, file.samples))
}

fn validate(s: &PairedSample, params: &DatasetParams) -> Result<()> {
    let bad = |why: &str| SharcsError::Format(format!("sample {}: {why}", s.id));
    if s.tabular.bits.len() != TABULAR_WIDTH || s.tabular.bits.iter().any(|&b| b > 1) {
        return Err(bad("tabular bits must be 0/1"));
    }
    let g = &s.graph;
    if g.node_features.len() != g.node_count {
        return Err(bad("feature count differs from node count"));
    }
    if g.edges.iter().any(|&(a, b)| a >= b || b >= g.node_count) {
        return Err(bad("edges must be ordered pairs of distinct valid nodes"));
    }
    let recomputed = betweenness(g.node_count, &g.edges);
    if recomputed
        .iter()
        .zip(&g.node_features)
        .any(|(a, b)| (a - b).abs() > 1e-12)
    {
        return Err(bad("node features are not the graph's betweenness"));
    }
    let (a, b) = family_to_bits(g.family, params.bijection);
    if s.local_label_graph != a ^ b
        || s.local_label_tab != s.tabular.xor_label()
        || s.global_label != s.local_label_graph & s.local_label_tab
    {
        return Err(bad("labels inconsistent with inputs"));
    }
    Ok(())
}
