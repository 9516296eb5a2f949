//! Concept prototypes, neighbourhoods, cross-modal retrieval and
//! missing-modality substitution over a frozen index of training concepts.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{batches, Modality, PairedSample};
use crate::encoders::SharcsModel;
use crate::error::{invalid_arg, invalid_state, Result, SharcsError};
use crate::rng::StreamRng;
use crate::tensor::{euclidean, Matrix};

pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// A model that places every modality of a sample in a comparable vector
/// space and predicts from one vector per modality.
pub trait RepresentationSpace {
    /// One matrix per modality, rows in `samples` order, eval mode.
    fn represent(&self, samples: &[PairedSample]) -> Result<Vec<Matrix>>;

    fn predict_from(&self, per_modality: &[Matrix]) -> Result<Matrix>;

    fn is_ready(&self) -> bool;
}

impl RepresentationSpace for SharcsModel {
    fn represent(&self, samples: &[PairedSample]) -> Result<Vec<Matrix>> {
        let mut parts: Vec<Vec<Matrix>> = vec![Vec::new(); self.modality_count()];
        for batch in batches::<StreamRng>(samples, 256, None, crate::datamodel::BatchMode::Eval)? {
            let out = self.infer(&batch)?;
            for (p, s) in parts.iter_mut().zip(out.shared) {
                p.push(s);
            }
        }
        let positions = order_positions(samples);
        Ok(parts
            .iter()
            .map(|p| {
                let stacked = Matrix::vstack(&p.iter().collect::<Vec<_>>());
                stacked.select_rows(&positions)
            })
            .collect())
    }

    fn predict_from(&self, per_modality: &[Matrix]) -> Result<Matrix> {
        self.predict_from_shared(per_modality)
    }

    fn is_ready(&self) -> bool {
        self.is_trained()
    }
}

/// Unshuffled eval batches come back in id order; map each input position
/// to its row in that order.
pub(crate) fn order_positions(samples: &[PairedSample]) -> Vec<usize> {
    let mut by_id: Vec<usize> = (0..samples.len()).collect();
    by_id.sort_by_key(|&i| samples[i].id);
    let mut rank = vec![0; samples.len()];
    for (row, &i) in by_id.iter().enumerate() {
        rank[i] = row;
    }
    rank
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptIndex {
    pub ids: Vec<usize>,
    /// Training representations per modality (`s_ij`).
    pub per_modality: Vec<Matrix>,
    /// Row-wise concatenation over modalities (`z_j`).
    pub joint: Matrix,
    pub codes: Vec<Vec<bool>>,
    pub global_labels: Vec<u8>,
    pub local_labels: Vec<Vec<u8>>,
}

impl ConceptIndex {
    pub fn from_parts(samples: &[PairedSample], per_modality: Vec<Matrix>) -> Result<Self> {
        if per_modality.iter().any(|m| m.rows() != samples.len()) {
            return Err(invalid_arg("representation rows differ from sample count"));
        }
        let joint = Matrix::hstack(&per_modality.iter().collect::<Vec<_>>());
        let codes = (0..joint.rows()).map(|r| binarize(joint.row(r))).collect();
        Ok(Self {
            ids: samples.iter().map(|s| s.id).collect(),
            joint,
            codes,
            global_labels: samples.iter().map(|s| s.global_label).collect(),
            local_labels: Modality::ALL
                .iter()
                .take(per_modality.len())
                .map(|&m| samples.iter().map(|s| s.local_label(m)).collect())
                .collect(),
            per_modality,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row_of(&self, id: usize) -> Option<usize> {
        self.ids.iter().position(|&x| x == id)
    }
}

pub fn binarize(z: &[f64]) -> Vec<bool> {
    z.iter().map(|&v| v >= BINARIZE_THRESHOLD).collect()
}

pub fn code_string(code: &[bool]) -> String {
    code.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

pub fn parse_code(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(invalid_arg(format!("concept code digit `{other}`"))),
        })
        .collect()
}

pub fn build_index<S: RepresentationSpace>(
    model: &S,
    train: &[PairedSample],
) -> Result<ConceptIndex> {
    if !model.is_ready() {
        return Err(invalid_state("index needs a trained model"));
    }
    ConceptIndex::from_parts(train, model.represent(train)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationKind {
    Prototype,
    Neighborhood,
    CrossModal,
    Substitution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: usize,
    pub modality: Modality,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRef {
    pub id: Option<usize>,
    pub modality: Option<Modality>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub kind: ExplanationKind,
    pub query: QueryRef,
    pub results: Vec<Hit>,
    pub params: serde_json::Value,
}

impl Explanation {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then(a.id.cmp(&b.id))
        .then(a.modality.cmp(&b.modality))
}

/// Training sample nearest to the centroid of all samples whose binarised
/// joint code equals `code`.
pub fn prototype(index: &ConceptIndex, code: &[bool]) -> Result<Explanation> {
    // Summed in id order so the centroid does not depend on row order.
    let mut members: Vec<usize> = (0..index.len())
        .filter(|&r| index.codes[r] == code)
        .collect();
    members.sort_by_key(|&r| index.ids[r]);
    if members.is_empty() {
        return Err(SharcsError::NoSuchConcept(code_string(code)));
    }
    let width = index.joint.cols();
    let mut centroid = vec![0.0; width];
    for &r in &members {
        for (c, v) in centroid.iter_mut().zip(index.joint.row(r)) {
            *c += v;
        }
    }
    for c in &mut centroid {
        *c /= members.len() as f64;
    }
    let best = (0..index.len())
        .map(|r| Hit {
            id: index.ids[r],
            modality: Modality::Graph,
            distance: euclidean(index.joint.row(r), &centroid),
        })
        .min_by(hit_order)
        .expect("non-empty index");
    Ok(Explanation {
        kind: ExplanationKind::Prototype,
        query: QueryRef {
            id: None,
            modality: None,
        },
        results: vec![best],
        params: serde_json::json!({
            "code": code_string(code),
            "cluster_size": members.len(),
        }),
    })
}

/// Training rows of `modality` strictly within `radius` of `query`.
pub fn neighborhood(
    index: &ConceptIndex,
    query: &[f64],
    query_id: Option<usize>,
    modality: Modality,
    radius: f64,
) -> Result<Explanation> {
    if !(radius >= 0.0) {
        return Err(invalid_arg("radius must be non-negative"));
    }
    let mut results = scan(index, query, &[modality])?;
    results.retain(|h| h.distance < radius);
    Ok(Explanation {
        kind: ExplanationKind::Neighborhood,
        query: QueryRef {
            id: query_id,
            modality: Some(modality),
        },
        results,
        params: serde_json::json!({ "radius": radius }),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retrieval {
    Radius(f64),
    TopK(usize),
}

pub fn cross_modal_retrieve(
    index: &ConceptIndex,
    query: &[f64],
    query_id: Option<usize>,
    source: Modality,
    targets: &[Modality],
    retrieval: Retrieval,
) -> Result<Explanation> {
    if targets.is_empty() || targets.contains(&source) {
        return Err(invalid_arg(
            "targets must be non-empty and exclude the source",
        ));
    }
    let mut results = scan(index, query, targets)?;
    match retrieval {
        Retrieval::Radius(r) => {
            if !(r >= 0.0) {
                return Err(invalid_arg("radius must be non-negative"));
            }
            results.retain(|h| h.distance < r);
        }
        Retrieval::TopK(k) => results.truncate(k),
    }
    Ok(Explanation {
        kind: ExplanationKind::CrossModal,
        query: QueryRef {
            id: query_id,
            modality: Some(source),
        },
        results,
        params: serde_json::to_value(retrieval)?,
    })
}

/// Every training row of the given modalities, sorted by distance to
/// `query` (ties by id).
fn scan(index: &ConceptIndex, query: &[f64], modalities: &[Modality]) -> Result<Vec<Hit>> {
    let mut hits = Vec::with_capacity(index.len() * modalities.len());
    for &m in modalities {
        let table = index
            .per_modality
            .get(m.index())
            .ok_or_else(|| invalid_arg(format!("index has no {} rows", m.name())))?;
        if table.cols() != query.len() {
            return Err(invalid_arg(format!(
                "query width {} vs index width {}",
                query.len(),
                table.cols()
            )));
        }
        for r in 0..table.rows() {
            hits.push(Hit {
                id: index.ids[r],
                modality: m,
                distance: euclidean(table.row(r), query),
            });
        }
    }
    hits.sort_by(hit_order);
    Ok(hits)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Substitute {
    pub vector: Vec<f64>,
    pub id: usize,
    pub distance: f64,
}

/// Nearest stored `missing`-modality row to `present_query`.
pub fn substitute_missing(
    index: &ConceptIndex,
    present_query: &[f64],
    missing: Modality,
) -> Result<Substitute> {
    if index.is_empty() {
        return Err(invalid_state("empty concept index"));
    }
    let best = scan(index, present_query, &[missing])?
        .into_iter()
        .next()
        .expect("non-empty index");
    let row = index.row_of(best.id).expect("hit comes from the index");
    Ok(Substitute {
        vector: index.per_modality[missing.index()].row(row).to_vec(),
        id: best.id,
        distance: best.distance,
    })
}

/// First two principal components of the stacked per-modality rows.
pub fn pca_2d(rows: &Matrix) -> Matrix {
    let n = rows.rows().max(1) as f64;
    let d = rows.cols();
    let mean: Vec<f64> = rows.column_sums().iter().map(|s| s / n).collect();
    let mut centered = rows.clone();
    for r in 0..centered.rows() {
        for (v, m) in centered.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let mut cov = centered.t_matmul(&centered).scale(1.0 / n);
    let mut components = Vec::new();
    for _ in 0..2.min(d) {
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        // Deterministic start that is not orthogonal to typical directions.
        for (i, x) in v.iter_mut().enumerate() {
            *x += 1e-3 * i as f64;
        }
        let mut eig = 0.0;
        for _ in 0..500 {
            let w: Vec<f64> = (0..d)
                .map(|i| (0..d).map(|j| cov.get(i, j) * v[j]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-300 {
                break;
            }
            eig = norm;
            v = w.iter().map(|x| x / norm).collect();
        }
        for i in 0..d {
            for j in 0..d {
                cov.set(i, j, cov.get(i, j) - eig * v[i] * v[j]);
            }
        }
        components.push(v);
    }
    while components.len() < 2 {
        components.push(vec![0.0; d]);
    }
    let basis = Matrix::from_rows(&components).transpose();
    centered.matmul(&basis)
}

/// CSV of the 2-D projection of every stored concept vector.
pub fn write_embedding_csv(index: &ConceptIndex, path: &Path) -> Result<()> {
    let parts: Vec<&Matrix> = index.per_modality.iter().collect();
    let projected = pca_2d(&Matrix::vstack(&parts));
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "id,modality,pc1,pc2,label")?;
    let mut row = 0;
    for (m, table) in Modality::ALL.iter().zip(&index.per_modality) {
        for r in 0..table.rows() {
            writeln!(
                out,
                "{},{},{},{},{}",
                index.ids[r],
                m.name(),
                projected.get(row, 0),
                projected.get(row, 1),
                index.global_labels[r]
            )?;
            row += 1;
        }
    }
    out.flush()?;
    Ok(())
}
