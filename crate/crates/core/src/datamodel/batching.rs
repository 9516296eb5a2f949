use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;

use super::graph::batch_propagation;
use super::{Modality, PairedSample, TABULAR_WIDTH};
use crate::autodiff::SparseOp;
use crate::error::{invalid_arg, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Trailing singleton batches are dropped.
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct GraphBatch {
    /// One row per node, one column (betweenness).
    pub features: Matrix,
    pub propagation: Rc<SparseOp>,
    /// Node-row offsets per graph; `len = graphs + 1`.
    pub offsets: Rc<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub tabular: Matrix,
    pub graphs: GraphBatch,
    pub global_labels: Vec<u8>,
    pub local_labels_graph: Vec<u8>,
    pub local_labels_tab: Vec<u8>,
}

impl Batch {
    pub fn from_samples(samples: &[&PairedSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid_arg("batch must contain at least one sample"));
        }
        let mut tabular = Matrix::zeros(samples.len(), TABULAR_WIDTH);
        for (r, s) in samples.iter().enumerate() {
            for (c, &b) in s.tabular.bits.iter().enumerate() {
                tabular.set(r, c, f64::from(b));
            }
        }
        for s in samples {
            if s.graph.node_count == 0 {
                return Err(invalid_arg(format!("sample {} has an empty graph", s.id)));
            }
        }
        let (op, offsets) = batch_propagation(
            samples
                .iter()
                .map(|s| (s.graph.node_count, s.graph.edges.as_slice())),
        );
        let features: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.graph.node_features.iter().copied())
            .collect();
        Ok(Self {
            ids: samples.iter().map(|s| s.id).collect(),
            tabular,
            graphs: GraphBatch {
                features: Matrix::from_vec(features.len(), 1, features),
                propagation: Rc::new(op),
                offsets: Rc::new(offsets),
            },
            global_labels: samples.iter().map(|s| s.global_label).collect(),
            local_labels_graph: samples.iter().map(|s| s.local_label_graph).collect(),
            local_labels_tab: samples.iter().map(|s| s.local_label_tab).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn local_labels(&self, modality: Modality) -> &[u8] {
        match modality {
            Modality::Graph => &self.local_labels_graph,
            Modality::Tabular => &self.local_labels_tab,
        }
    }

    pub fn global_one_hot(&self) -> Matrix {
        one_hot(&self.global_labels, 2)
    }
}

pub fn one_hot(labels: &[u8], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, usize::from(l), 1.0);
    }
    m
}

/// Splits `samples` into batches. Without a shuffling rng samples come in
/// id order.
pub fn batches<R: Rng>(
    samples: &[PairedSample],
    batch_size: usize,
    shuffle: Option<&mut R>,
    mode: BatchMode,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(invalid_arg("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    match shuffle {
        Some(rng) => order.shuffle(rng),
        None => order.sort_by_key(|&i| samples[i].id),
    }
    order
        .chunks(batch_size)
        .filter(|chunk| mode == BatchMode::Eval || chunk.len() > 1)
        .map(|chunk| {
            let refs: Vec<&PairedSample> = chunk.iter().map(|&i| &samples[i]).collect();
            Batch::from_samples(&refs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_xor_and_xor, DatasetParams};
    use crate::rng::{substream, StreamRng};

    fn data(n: usize) -> Vec<PairedSample> {
        generate_xor_and_xor(&DatasetParams {
            n_samples: n,
            ..DatasetParams::default()
        })
        .unwrap()
    }

    #[test]
    fn eight_hundred_into_sixty_fours() {
        let d = data(800);
        let b = batches::<StreamRng>(&d, 64, None, BatchMode::Train).unwrap();
        assert_eq!(b.len(), 13);
        assert!(b[..12].iter().all(|x| x.len() == 64));
        assert_eq!(b[12].len(), 32);
    }

    #[test]
    fn trailing_singleton_dropped_in_training_only() {
        let d = data(65);
        let train = batches::<StreamRng>(&d, 64, None, BatchMode::Train).unwrap();
        assert_eq!(train.len(), 1);
        let eval = batches::<StreamRng>(&d, 64, None, BatchMode::Eval).unwrap();
        assert_eq!(eval.len(), 2);
    }

    #[test]
    fn unshuffled_is_id_order_and_shuffle_is_deterministic() {
        let mut d = data(50);
        d.reverse();
        let b = batches::<StreamRng>(&d, 16, None, BatchMode::Eval).unwrap();
        let ids: Vec<usize> = b.iter().flat_map(|x| x.ids.clone()).collect();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
        let s1 = batches(&d, 16, Some(&mut substream(1, "s")), BatchMode::Eval).unwrap();
        let s2 = batches(&d, 16, Some(&mut substream(1, "s")), BatchMode::Eval).unwrap();
        let i1: Vec<usize> = s1.iter().flat_map(|x| x.ids.clone()).collect();
        let i2: Vec<usize> = s2.iter().flat_map(|x| x.ids.clone()).collect();
        assert_eq!(i1, i2);
        assert_ne!(i1, ids);
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(batches::<StreamRng>(&data(4), 0, None, BatchMode::Eval).is_err());
    }

    #[test]
    fn graph_tensors_line_up() {
        let d = data(3);
        let refs: Vec<&PairedSample> = d.iter().collect();
        let b = Batch::from_samples(&refs).unwrap();
        assert_eq!(b.graphs.features.rows(), 30);
        assert_eq!(*b.graphs.offsets, vec![0, 10, 20, 30]);
        assert_eq!(b.tabular.shape(), (3, 6));
    }
}
