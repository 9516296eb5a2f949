//! Oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use sharcs::autodiff::Tape;
use sharcs::config::ModelConfig;
use sharcs::datamodel::{generate_xor_and_xor, Batch, DatasetParams, GraphFamily, PairedSample};
use sharcs::encoders::{ForwardCtx, Mode, NodeAssignment, SharcsModel};
use sharcs::tensor::Matrix;
use sharcs::training::{total_loss_on_tape, DistanceFilter, LossConfig};

pub const FD_STEP: f64 = 1e-5;
pub const MAX_RELATIVE_ERROR: f64 = 1e-4;

pub fn micro_batch() -> (Vec<PairedSample>, Batch) {
    let samples = generate_xor_and_xor(&DatasetParams {
        n_samples: 4,
        seed: 21,
        ..DatasetParams::default()
    })
    .unwrap();
    let refs: Vec<&PairedSample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs).unwrap();
    (samples, batch)
}

pub fn soft_ctx<'a>() -> ForwardCtx<'a> {
    ForwardCtx {
        mode: Mode::Train,
        assignment: NodeAssignment::Soft,
    }
}

pub fn loss_config() -> LossConfig {
    LossConfig {
        lambda: 0.1,
        betas: vec![0.3, 0.7],
        pairs: vec![(0, 1)],
        sample_fraction: 0.5,
        filter: DistanceFilter::All,
    }
}

pub fn model_with_heads(seed: u64) -> SharcsModel {
    let cfg = ModelConfig {
        local_predictors: true,
        ..ModelConfig::default()
    };
    SharcsModel::new(&cfg, seed).unwrap()
}

pub fn total_loss(model: &SharcsModel, batch: &Batch, loss: &LossConfig, sampled: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let vars = model
        .forward_on_tape(&mut tape, batch, &mut soft_ctx())
        .unwrap();
    let (total, _) = total_loss_on_tape(&mut tape, &vars, batch, loss, sampled).unwrap();
    tape.scalar(total)
}

pub fn norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest per-tensor relative error between backpropagated gradients of
/// the total loss and central differences, with the offending tensor.
pub fn worst_gradient_error() -> (f64, String) {
    let (_, batch) = micro_batch();
    let loss = loss_config();
    let sampled = [0, 2];
    let mut model = model_with_heads(5);

    let mut tape = Tape::new();
    let vars = model
        .forward_on_tape(&mut tape, &batch, &mut soft_ctx())
        .unwrap();
    let (total, breakdown) = total_loss_on_tape(&mut tape, &vars, &batch, &loss, &sampled).unwrap();
    assert!(breakdown.regularizer > 0.0 && breakdown.local.iter().all(|&l| l > 0.0));
    let grads = tape.backward(total);

    let ids: Vec<_> = model.store.ids().collect();
    let mut worst = (0.0f64, String::new());
    for id in ids {
        let analytic = grads.get(id).cloned().unwrap_or_else(|| {
            Matrix::zeros(model.store.value(id).rows(), model.store.value(id).cols())
        });
        let n = model.store.value(id).data().len();
        let mut numeric = vec![0.0; n];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let original = model.store.value(id).data()[k];
            model.store.value_mut(id).data_mut()[k] = original + FD_STEP;
            let up = total_loss(&model, &batch, &loss, &sampled);
            model.store.value_mut(id).data_mut()[k] = original - FD_STEP;
            let down = total_loss(&model, &batch, &loss, &sampled);
            model.store.value_mut(id).data_mut()[k] = original;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        let diff: Vec<f64> = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, b)| a - b)
            .collect();
        let scale = norm(analytic.data()).max(norm(&numeric));
        let relative = if scale < 1e-10 {
            norm(&diff)
        } else {
            norm(&diff) / scale
        };
        if relative > worst.0 {
            worst = (relative, model.store.name(id).to_string());
        }
    }
    worst
}

pub fn xor_table(a: u8, b: u8) -> u8 {
    match (a, b) {
        (0, 0) => 0,
        (0, 1) => 1,
        (1, 0) => 1,
        (1, 1) => 0,
        _ => unreachable!(),
    }
}

pub fn and_table(a: u8, b: u8) -> u8 {
    match (a, b) {
        (1, 1) => 1,
        _ => 0,
    }
}

/// Local graph label read off the family alone: the one-cycle families
/// carry XOR 1 under either bit assignment.
pub fn family_label(family: GraphFamily) -> u8 {
    match family {
        GraphFamily::Isolated => 0,
        GraphFamily::C4 => 1,
        GraphFamily::C6 => 1,
        GraphFamily::C4C6Bridged => 0,
    }
}

/// Counts every shortest s-t path through each node by enumerating them.
pub fn betweenness_oracle(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let inf = usize::MAX / 4;
    let mut dist = vec![vec![inf; n]; n];
    let mut adj = vec![vec![false; n]; n];
    for (i, row) in dist.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        dist[a][b] = 1;
        dist[b][a] = 1;
        adj[a][b] = true;
        adj[b][a] = true;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if dist[i][k] + dist[k][j] < dist[i][j] {
                    dist[i][j] = dist[i][k] + dist[k][j];
                }
            }
        }
    }
    fn walk(
        node: usize,
        target: usize,
        adj: &[Vec<bool>],
        dist: &[Vec<usize>],
        path: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if node == target {
            out.push(path.clone());
            return;
        }
        for next in 0..adj.len() {
            if adj[node][next] && dist[next][target] + 1 == dist[node][target] {
                path.push(next);
                walk(next, target, adj, dist, path, out);
                path.pop();
            }
        }
    }
    let mut score = vec![0.0; n];
    for s in 0..n {
        for t in s + 1..n {
            if dist[s][t] >= inf {
                continue;
            }
            let mut paths = Vec::new();
            walk(s, t, &adj, &dist, &mut vec![s], &mut paths);
            for (v, slot) in score.iter_mut().enumerate() {
                if v == s || v == t {
                    continue;
                }
                let through = paths.iter().filter(|p| p.contains(&v)).count();
                *slot += through as f64 / paths.len() as f64;
            }
        }
    }
    if n < 3 {
        return vec![0.0; n];
    }
    let pairs = ((n - 1) * (n - 2)) as f64 / 2.0;
    score.iter().map(|s| s / pairs).collect()
}

/// Checks every sample's labels and graph skeleton against the tables.
pub fn check_labels(samples: &[PairedSample]) -> Result<(), String> {
    for s in samples {
        let tab = xor_table(s.tabular.bits[0], s.tabular.bits[1]);
        let graph = family_label(s.graph.family);
        if s.local_label_tab != tab
            || s.local_label_graph != graph
            || s.global_label != and_table(tab, graph)
        {
            return Err(format!("labels of sample {}", s.id));
        }
        let skeleton = s.graph.family.skeleton_edges();
        if !skeleton.iter().all(|e| s.graph.edges.contains(e))
            || s.graph.edges.len() > skeleton.len() + 2
        {
            return Err(format!("edges of sample {}", s.id));
        }
    }
    Ok(())
}

pub fn default_samples() -> Vec<PairedSample> {
    generate_xor_and_xor(&DatasetParams::default()).unwrap()
}
