//! Paired tabular/graph samples, the XOR-AND-XOR generator, splitting and
//! batching.

mod batching;
pub mod graph;
mod io;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::rng;

pub use batching::{batches, one_hot, Batch, BatchMode, GraphBatch};
pub use graph::{betweenness, GraphFamily, FAMILY_NODE_COUNT};
pub use io::{load_dataset, save_dataset, DATASET_FORMAT_VERSION};

pub const TABULAR_WIDTH: usize = 6;

/// Which family → bit-pair assignment the generator uses. Both keep
/// {isolated, bridged} at XOR 0 and {C4, C6} at XOR 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bijection {
    #[default]
    Standard,
    Alternate,
}

pub fn family_to_bits(family: GraphFamily, bijection: Bijection) -> (u8, u8) {
    match (bijection, family) {
        (Bijection::Standard, GraphFamily::Isolated) => (0, 0),
        (Bijection::Standard, GraphFamily::C4) => (0, 1),
        (Bijection::Standard, GraphFamily::C6) => (1, 0),
        (Bijection::Standard, GraphFamily::C4C6Bridged) => (1, 1),
        (Bijection::Alternate, GraphFamily::Isolated) => (1, 1),
        (Bijection::Alternate, GraphFamily::C4) => (1, 0),
        (Bijection::Alternate, GraphFamily::C6) => (0, 1),
        (Bijection::Alternate, GraphFamily::C4C6Bridged) => (0, 0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularSample {
    pub bits: [u8; TABULAR_WIDTH],
}

impl TabularSample {
    pub fn xor_label(&self) -> u8 {
        self.bits[0] ^ self.bits[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSample {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub node_features: Vec<f64>,
    pub family: GraphFamily,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub id: usize,
    pub tabular: TabularSample,
    pub graph: GraphSample,
    pub local_label_tab: u8,
    pub local_label_graph: u8,
    pub global_label: u8,
}

impl PairedSample {
    pub fn local_label(&self, modality: Modality) -> u8 {
        match modality {
            Modality::Graph => self.local_label_graph,
            Modality::Tabular => self.local_label_tab,
        }
    }
}

/// Modality order is fixed: graph first, tabular second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Graph,
    Tabular,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Graph, Modality::Tabular];

    pub fn index(self) -> usize {
        match self {
            Modality::Graph => 0,
            Modality::Tabular => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Graph => Modality::Tabular,
            Modality::Tabular => Modality::Graph,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Graph => "graph",
            Modality::Tabular => "tabular",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = crate::error::SharcsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" | "m1" => Ok(Modality::Graph),
            "tabular" | "m2" => Ok(Modality::Tabular),
            other => Err(invalid_arg(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_samples: usize,
    pub seed: u64,
    pub random_edge_max: usize,
    pub bijection: Bijection,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            seed: 0,
            random_edge_max: 2,
            bijection: Bijection::Standard,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    pub seed: u64,
}

pub fn generate_xor_and_xor(params: &DatasetParams) -> Result<Vec<PairedSample>> {
    if params.n_samples == 0 {
        return Err(invalid_arg("n_samples must be positive"));
    }
    let mut rng = rng::substream(params.seed, rng::DATA);
    let samples = (0..params.n_samples)
        .map(|id| {
            let mut bits = [0u8; TABULAR_WIDTH];
            for b in &mut bits {
                *b = rng.gen_range(0..=1);
            }
            let tabular = TabularSample { bits };
            let family = GraphFamily::ALL[rng.gen_range(0..4)];
            let graph = build_graph(family, params.random_edge_max, &mut rng);
            let (g0, g1) = family_to_bits(family, params.bijection);
            let local_label_tab = tabular.xor_label();
            let local_label_graph = g0 ^ g1;
            PairedSample {
                id,
                tabular,
                graph,
                local_label_tab,
                local_label_graph,
                global_label: local_label_tab & local_label_graph,
            }
        })
        .collect();
    Ok(samples)
}

fn build_graph(family: GraphFamily, random_edge_max: usize, rng: &mut impl Rng) -> GraphSample {
    let n = FAMILY_NODE_COUNT;
    let mut edges = family.skeleton_edges();
    let extra = rng.gen_range(0..=random_edge_max);
    for _ in 0..extra {
        let candidates: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|e| edges.binary_search(e).is_err())
            .collect();
        let Some(&e) = candidates.choose(rng) else {
            break;
        };
        let pos = edges.binary_search(&e).unwrap_err();
        edges.insert(pos, e);
    }
    let node_features = betweenness(n, &edges);
    GraphSample {
        node_count: n,
        edges,
        node_features,
        family,
    }
}

/// Deterministic shuffled split; `round(ratio · n)` samples go to train.
pub fn split(samples: &[PairedSample], ratio: f64, seed: u64) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(invalid_arg(format!("split ratio {ratio} not in (0, 1)")));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::substream(seed, rng::SPLIT));
    let n_train = (ratio * samples.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: usize, seed: u64) -> DatasetParams {
        DatasetParams {
            n_samples: n,
            seed,
            ..DatasetParams::default()
        }
    }

    #[test]
    fn zero_samples_rejected() {
        assert!(generate_xor_and_xor(&params(0, 1)).is_err());
    }

    #[test]
    fn labels_follow_truth_table() {
        let data = generate_xor_and_xor(&params(400, 3)).unwrap();
        for s in &data {
            assert_eq!(s.local_label_tab, s.tabular.bits[0] ^ s.tabular.bits[1]);
            let (a, b) = family_to_bits(s.graph.family, Bijection::Standard);
            assert_eq!(s.local_label_graph, a ^ b);
            assert_eq!(s.global_label, s.local_label_tab & s.local_label_graph);
            if s.tabular.bits[0] == 0 && s.tabular.bits[1] == 0 {
                assert_eq!(s.global_label, 0);
            }
        }
    }

    #[test]
    fn bijections_agree_on_parity() {
        for f in GraphFamily::ALL {
            let (a, b) = family_to_bits(f, Bijection::Standard);
            let (c, d) = family_to_bits(f, Bijection::Alternate);
            assert_eq!(a ^ b, c ^ d);
        }
        assert_eq!(
            family_to_bits(GraphFamily::Isolated, Bijection::Standard),
            (0, 0)
        );
        assert_eq!(family_to_bits(GraphFamily::C4, Bijection::Standard), (0, 1));
        assert_eq!(
            family_to_bits(GraphFamily::C4C6Bridged, Bijection::Standard),
            (1, 1)
        );
    }

    #[test]
    fn graphs_are_simple_with_ten_nodes() {
        for s in generate_xor_and_xor(&params(200, 5)).unwrap() {
            let g = &s.graph;
            assert_eq!(g.node_count, 10);
            let mut e = g.edges.clone();
            e.dedup();
            assert_eq!(e.len(), g.edges.len());
            assert!(g.edges.iter().all(|&(a, b)| a < b && b < 10));
            let extra = g.edges.len() - g.family.skeleton_edges().len();
            assert!(extra <= 2);
            assert_eq!(g.node_features, betweenness(10, &g.edges));
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data = generate_xor_and_xor(&params(1000, 1)).unwrap();
        let a = split(&data, 0.8, 9).unwrap();
        assert_eq!((a.train.len(), a.test.len()), (800, 200));
        assert_eq!(a, split(&data, 0.8, 9).unwrap());
        let mut ids: Vec<usize> = a.train.iter().chain(&a.test).map(|s| s.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 1000);
        assert!(split(&data, 1.5, 9).is_err());
        assert!(split(&data, 0.0, 9).is_err());
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("graph".parse::<Modality>().unwrap(), Modality::Graph);
        assert_eq!("m2".parse::<Modality>().unwrap(), Modality::Tabular);
        assert!("audio".parse::<Modality>().is_err());
    }
}
