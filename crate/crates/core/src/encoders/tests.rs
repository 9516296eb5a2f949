use super::*;
use crate::datamodel::{generate_xor_and_xor, DatasetParams, PairedSample};
use crate::tensor::sigmoid;

fn samples(n: usize) -> Vec<PairedSample> {
    generate_xor_and_xor(&DatasetParams {
        n_samples: n,
        seed: 11,
        ..DatasetParams::default()
    })
    .unwrap()
}

fn batch_of(samples: &[PairedSample]) -> Batch {
    let refs: Vec<&PairedSample> = samples.iter().collect();
    Batch::from_samples(&refs).unwrap()
}

fn warmed_model() -> (SharcsModel, Batch) {
    let mut model = SharcsModel::new(&ModelConfig::default(), 4).unwrap();
    let data = samples(32);
    let batch = batch_of(&data);
    let mut rng = rng::substream(4, rng::GUMBEL);
    model
        .forward(&batch, &mut ForwardCtx::train(&mut rng))
        .unwrap();
    (model, batch)
}

#[test]
fn output_shapes_and_ranges() {
    let (model, batch) = warmed_model();
    let out = model.infer(&batch).unwrap();
    for m in &out.local {
        assert_eq!(m.shape(), (32, 7));
    }
    for m in &out.shared {
        assert_eq!(m.shape(), (32, 8));
    }
    assert_eq!(out.logits.shape(), (32, 2));
    for m in out.local.iter().chain(&out.shared) {
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn inference_requires_training_and_is_repeatable() {
    let fresh = SharcsModel::new(&ModelConfig::default(), 4).unwrap();
    let data = samples(8);
    assert!(fresh.infer(&batch_of(&data)).is_err());
    let (model, batch) = warmed_model();
    let before = model.clone();
    assert_eq!(model.infer(&batch).unwrap(), model.infer(&batch).unwrap());
    assert_eq!(model, before);
}

#[test]
fn shared_statistics_span_both_modalities() {
    let (mut model, batch) = warmed_model();
    // Collapse each projector to a constant: 0 for graph, 2 for tabular.
    for (p, level) in model.projectors.clone().iter().zip([0.0, 2.0]) {
        let w = model.store.value_mut(p.second.weight);
        *w = Matrix::zeros(w.rows(), w.cols());
        let b = model.store.value_mut(p.second.bias);
        *b = Matrix::filled(1, b.cols(), level);
    }
    let mut tape = Tape::new();
    let mut rng = rng::substream(1, rng::GUMBEL);
    let mut ctx = ForwardCtx::train(&mut rng);
    let vars = model.forward_on_tape(&mut tape, &batch, &mut ctx).unwrap();
    let scale = 1.0 / (1.0 + 1e-5f64).sqrt();
    let low = sigmoid(-scale);
    let high = sigmoid(scale);
    assert!(tape
        .value(vars.shared[0])
        .data()
        .iter()
        .all(|v| (v - low).abs() < 1e-12));
    assert!(tape
        .value(vars.shared[1])
        .data()
        .iter()
        .all(|v| (v - high).abs() < 1e-12));
    assert!((high - 0.7310585786).abs() < 1e-5);
}

#[test]
fn sigmoid_of_three_standard_deviations() {
    assert!((sigmoid(3.0) - 0.9526).abs() < 1e-4);
}

#[test]
fn node_concept_counts_sum_to_node_count() {
    let (model, batch) = warmed_model();
    let graph = &model.encoders[Modality::Graph.index()];
    let mut tape = Tape::new();
    let counts = graph.pre_rescale(&mut tape, &model.store, &batch, &mut ForwardCtx::eval());
    let counts = tape.value(counts);
    for r in 0..counts.rows() {
        assert_eq!(counts.row(r).iter().sum::<f64>(), 10.0);
        assert!(counts.row(r).iter().all(|v| v.fract() == 0.0));
    }
}

#[test]
fn relabelled_graph_has_identical_counts() {
    let (model, _) = warmed_model();
    let data = samples(2);
    let mut relabelled = data[0].clone();
    let perm: Vec<usize> = (0..10).rev().collect();
    let mut edges: Vec<(usize, usize)> = relabelled
        .graph
        .edges
        .iter()
        .map(|&(a, b)| {
            let (x, y) = (perm[a], perm[b]);
            (x.min(y), x.max(y))
        })
        .collect();
    edges.sort_unstable();
    relabelled.graph.edges = edges;
    let mut features = vec![0.0; 10];
    for (old, &new) in perm.iter().enumerate() {
        features[new] = relabelled.graph.node_features[old];
    }
    relabelled.graph.node_features = features;
    let graph = &model.encoders[Modality::Graph.index()];
    let counts = |s: &PairedSample| {
        let b = batch_of(std::slice::from_ref(s));
        let mut tape = Tape::new();
        let v = graph.pre_rescale(&mut tape, &model.store, &b, &mut ForwardCtx::eval());
        tape.value(v).clone()
    };
    let a = counts(&data[0]);
    let b = counts(&relabelled);
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| (x - y).abs() < 1e-9));
}

#[test]
fn predictor_reads_graph_then_tabular() {
    let (model, batch) = warmed_model();
    let out = model.infer(&batch).unwrap();
    let mut tape = Tape::new();
    let joined = tape.constant(Matrix::hstack(&[&out.shared[0], &out.shared[1]]));
    let manual = model.predictor.forward(&mut tape, &model.store, joined);
    assert_eq!(tape.value(manual), &out.logits);
    let swapped = model
        .predict_from_shared(&[out.shared[1].clone(), out.shared[0].clone()])
        .unwrap();
    assert_ne!(swapped, out.logits);
}

#[test]
fn eval_outputs_follow_batch_permutation() {
    let (model, _) = warmed_model();
    let data = samples(16);
    let forward = model.infer(&batch_of(&data)).unwrap();
    let reversed: Vec<PairedSample> = data.iter().rev().cloned().collect();
    let backward = model.infer(&batch_of(&reversed)).unwrap();
    for r in 0..16 {
        let s = 15 - r;
        for (a, b) in forward.shared.iter().zip(&backward.shared) {
            let diff = a
                .row(r)
                .iter()
                .zip(b.row(s))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12);
        }
    }
}

#[test]
fn train_mode_rescaling_is_permutation_equivariant() {
    let (model, _) = warmed_model();
    let data = samples(16);
    let reversed: Vec<PairedSample> = data.iter().rev().cloned().collect();
    let run = |s: &[PairedSample]| {
        let mut tape = Tape::new();
        let enc = &model.encoders[Modality::Tabular.index()];
        let mut rng = rng::substream(0, rng::GUMBEL);
        let (v, _) = enc
            .concepts(
                &mut tape,
                &model.store,
                &batch_of(s),
                &mut ForwardCtx::train(&mut rng),
            )
            .unwrap();
        tape.value(v).clone()
    };
    let a = run(&data);
    let b = run(&reversed);
    for r in 0..16 {
        let diff = a
            .row(r)
            .iter()
            .zip(b.row(15 - r))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}

#[test]
fn backbones_match_configured_widths() {
    let model = SharcsModel::new(&ModelConfig::default(), 0).unwrap();
    let shapes = model.backbone_shapes();
    assert_eq!(
        shapes[0],
        vec![(1, 30), (30, 30), (30, 30), (30, 30), (30, 7)]
    );
    assert_eq!(shapes[1], vec![(6, 30), (30, 7)]);
}
