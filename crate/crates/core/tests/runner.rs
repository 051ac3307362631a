use std::sync::Arc;

use hhgcn::autodiff::Tape;
use hhgcn::graphdata::{
    generate_classification_set, ClassificationSpec, DatasetSource, DatasetSpec, GraphKind, TreeSpec,
};
use hhgcn::model::{Activation, AggregationRoute, Architecture, Model, ModelConfig};
use hhgcn::optimizer::EuclideanRule;
use hhgcn::runner::metrics::{accuracy, argmax_rows, binary_f1, macro_f1, roc_auc};
use hhgcn::runner::*;
use ndarray::Array2;

fn tree(depth: usize, branching: usize, noise: f64, seed: u64) -> DatasetSpec {
    DatasetSpec {
        source: DatasetSource::Tree(TreeSpec::new(depth, branching, noise)),
        seed,
        split: [0.7, 0.1, 0.2],
    }
}

fn classification(kinds: Vec<GraphKind>, per_class: usize, seed: u64) -> DatasetSpec {
    let mut spec = ClassificationSpec::new(per_class, 30, 60);
    spec.kinds = kinds;
    DatasetSpec {
        source: DatasetSource::Classification(spec),
        seed,
        split: [0.6, 0.2, 0.2],
    }
}

fn adam(mut cfg: TrainConfig, lr: f64) -> TrainConfig {
    cfg.euclidean_rule = EuclideanRule::Adam;
    cfg.lr_euclidean = lr;
    cfg
}

#[test]
fn metric_reference_values() {
    assert_eq!(roc_auc(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.5);
    assert_eq!(roc_auc(&[0.9, 0.3], &[0.5, 0.1]).unwrap(), 0.75);
    assert!(roc_auc(&[], &[0.1]).is_err());
    assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0]).unwrap(), 0.75);
    // precision 1/2, recall 1/1
    assert!((binary_f1(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    // class 0: p=1 r=2/3 -> 0.8; class 1: p=1/2 r=1 -> 2/3
    let mf = macro_f1(&[0, 0, 1, 1], &[0, 0, 0, 1]).unwrap();
    assert!((mf - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
}

#[test]
fn uniform_logits_score_the_majority_rate() {
    let truth = vec![0, 0, 0, 1, 0, 1, 0, 0];
    let pred = argmax_rows(&Array2::zeros((truth.len(), 2)));
    assert_eq!(accuracy(&pred, &truth).unwrap(), 6.0 / 8.0);
}

#[test]
fn lp_loss_decreases_on_a_small_tree() {
    let mut cfg = TrainConfig::new(Task::Lp, tree(2, 2, 0.0, 1));
    cfg.dim = 3;
    cfg.epochs = 200;
    cfg.patience = 200;
    let r = train_lp(&cfg).unwrap();
    assert_eq!(r.epochs.len(), 200);
    let first = r.epochs[0].train_loss;
    let last = r.epochs.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn zero_learning_rates_freeze_everything() {
    let mut cfg = TrainConfig::new(Task::Nc, tree(3, 3, 0.05, 2));
    cfg.lr_riemannian = 0.0;
    cfg.lr_euclidean = 0.0;
    cfg.epochs = 5;
    let trained = run(&cfg, &mut |_| {}).unwrap();
    let r = &trained.result;
    assert!(r.epochs.iter().all(|e| e.val_metric == r.epochs[0].val_metric));
    assert!(r.epochs.iter().all(|e| e.train_metric == r.epochs[0].train_metric));
    assert_eq!(r.best_epoch, 0);
    let seeds_model = run(
        &TrainConfig {
            epochs: 1,
            ..cfg.clone()
        },
        &mut |_| {},
    )
    .unwrap()
    .model;
    for ((_, a), (_, b)) in trained.model.params.iter().zip(seeds_model.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn nc_without_regularizer_ignores_decoder_parameters() {
    // With lambda = 0 only the cross-entropy remains, which never reads r or t.
    let mut a = TrainConfig::new(Task::Nc, tree(3, 3, 0.05, 3));
    a.lambda_lp = 0.0;
    a.epochs = 20;
    let mut b = a.clone();
    b.r = 5.0;
    b.t = 0.3;
    let (ra, rb) = (train_nc(&a).unwrap(), train_nc(&b).unwrap());
    assert_eq!(ra.epochs, rb.epochs);
    a.lambda_lp = 1.0;
    assert_ne!(train_nc(&a).unwrap().epochs, ra.epochs);
}

#[test]
fn nc_fits_its_training_labels() {
    let cfg = adam(
        TrainConfig {
            epochs: 150,
            patience: 150,
            ..TrainConfig::new(Task::Nc, tree(4, 3, 0.05, 4))
        },
        0.03,
    );
    let r = train_nc(&cfg).unwrap();
    let best_train = r.epochs.iter().map(|e| e.train_metric).fold(0.0, f64::max);
    assert_eq!(best_train, 1.0);
    assert!(r.test.contains_key("accuracy") && r.test.contains_key("macro_f1"));
}

#[test]
fn early_stopping_keeps_the_best_epoch() {
    let mut cfg = TrainConfig::new(Task::Nc, tree(3, 3, 0.05, 5));
    cfg.epochs = 300;
    cfg.patience = 5;
    cfg.lr_euclidean = 0.0;
    cfg.lr_riemannian = 0.0;
    let r = train_nc(&cfg).unwrap();
    // a frozen model never improves on epoch 0
    assert_eq!(r.epochs.len(), 6);
    let cfg = adam(TrainConfig { patience: 10, ..cfg }, 0.03);
    let r = train_nc(&cfg).unwrap();
    let best = r.epochs.iter().map(|e| e.val_metric).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_val, best);
    assert_eq!(r.epochs[r.best_epoch].val_metric, best);
    assert!(r.epochs[..r.best_epoch].iter().all(|e| e.val_metric < best));
    assert!(r.epochs.len() == cfg.epochs || r.epochs.len() == r.best_epoch + cfg.patience + 1);
}

#[test]
fn single_class_graph_classification_is_perfect() {
    let mut cfg = TrainConfig::new(Task::Gc, classification(vec![GraphKind::ErdosRenyi], 10, 1));
    cfg.dim = 3;
    cfg.epochs = 3;
    let r = train_gc(&cfg).unwrap();
    assert_eq!(r.test_metric, 1.0);
}

#[test]
fn graph_classification_learns_a_small_set() {
    let mut cfg = adam(
        TrainConfig::new(Task::Gc, classification(GraphKind::ALL.to_vec(), 20, 2)),
        0.05,
    );
    cfg.dim = 5;
    cfg.epochs = 60;
    cfg.patience = 60;
    let r = train_gc(&cfg).unwrap();
    let best_train = r.epochs.iter().map(|e| e.train_metric).fold(0.0, f64::max);
    assert!(best_train >= 0.9, "train macro-F1 {best_train}");
}

#[test]
fn graph_logits_do_not_depend_on_batch_order() {
    let graphs = generate_classification_set(&ClassificationSpec::new(2, 10, 20), 3).unwrap();
    let cfg = ModelConfig {
        architecture: Architecture::Hyperbolic,
        feat_dim: 2,
        dim: 4,
        layers: 2,
        num_classes: 3,
        num_centroids: 6,
        activation: Activation::default(),
        aggregation: AggregationRoute::LorentzSum,
        reproject: true,
        r: 2.0,
        t: 1.0,
    };
    let model = Model::new(cfg, 9).unwrap();
    let logits = |order: &[usize]| {
        let mut offsets = vec![0];
        let mut edges = Vec::new();
        let mut feats = Vec::new();
        for &i in order {
            let g = &graphs[i];
            let base = *offsets.last().unwrap();
            edges.extend(g.edges().iter().map(|&(u, v)| (u + base, v + base)));
            feats.push(g.features.clone().unwrap());
            offsets.push(base + g.num_nodes());
        }
        let n = *offsets.last().unwrap();
        let union = hhgcn::graphdata::Graph::new(n, edges).unwrap();
        let views: Vec<_> = feats.iter().map(|f| f.view()).collect();
        let x = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
        let mut tape = Tape::new();
        let v = tape.load_params(&model.params);
        let xv = tape.constant(x);
        let emb = model.encode(&mut tape, &v, union.csr(), xv).unwrap().output();
        let out = model.graph_logits(&mut tape, &v, emb, Arc::new(offsets)).unwrap();
        tape.value(out).clone()
    };
    let forward: Vec<usize> = (0..graphs.len()).collect();
    let reversed: Vec<usize> = forward.iter().rev().copied().collect();
    let (a, b) = (logits(&forward), logits(&reversed));
    let k = graphs.len();
    for i in 0..k {
        let diff = (&a.row(i) - &b.row(k - 1 - i))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-12, "graph {i}: {diff:e}");
    }
}

#[test]
fn identical_configs_give_identical_results() {
    let mut cfg = TrainConfig::new(Task::Lp, tree(3, 3, 0.05, 6));
    cfg.epochs = 20;
    let (a, b) = (train_lp(&cfg).unwrap(), train_lp(&cfg).unwrap());
    assert_eq!(a.to_json(), b.to_json());
    cfg.seed = 1;
    assert_ne!(train_lp(&cfg).unwrap().to_json(), a.to_json());
}

#[test]
fn checkpoint_round_trip_reproduces_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    for task in [Task::Lp, Task::Nc] {
        let mut cfg = TrainConfig::new(task, tree(3, 3, 0.05, 7));
        cfg.epochs = 15;
        let trained = run(&cfg, &mut |_| {}).unwrap();
        let path = dir.path().join(format!("{task:?}"));
        save_checkpoint(&path, &trained.model, Some(&cfg)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.train.as_ref(), Some(&cfg));
        assert_eq!(ck.model.params, trained.model.params);
        assert_eq!(evaluate(&ck.model, &cfg).unwrap(), trained.result.test);
    }
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("checkpoint.json"), "{").unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn divergence_aborts_with_context() {
    let mut cfg = TrainConfig::new(Task::Lp, tree(3, 3, 0.05, 8));
    cfg.lr_riemannian = 0.0;
    cfg.lr_euclidean = 1e300;
    cfg.epochs = 10;
    match run(&cfg, &mut |_| {}) {
        Err(RunError::NonFinite {
            epoch, lr_euclidean, ..
        })
        | Err(RunError::Diverged {
            epoch, lr_euclidean, ..
        }) => {
            assert!(epoch > 0);
            assert_eq!(lr_euclidean, 1e300);
        }
        Err(e @ RunError::Manifold { .. }) => assert!(e.to_string().contains("epoch")),
        other => panic!("expected an abort, got {:?}", other.map(|t| t.result.test_metric)),
    }
}

#[test]
fn labels_outside_the_declared_range_are_rejected() {
    let mut cfg = TrainConfig::new(Task::Nc, tree(3, 3, 0.05, 9));
    cfg.num_classes = Some(1);
    assert!(matches!(run(&cfg, &mut |_| {}), Err(RunError::Label(_))));
    let mut cfg = TrainConfig::new(Task::Gc, classification(GraphKind::ALL.to_vec(), 3, 1));
    cfg.num_classes = Some(2);
    assert!(matches!(run(&cfg, &mut |_| {}), Err(RunError::Label(_))));
}

#[test]
fn invalid_configs_are_rejected() {
    let base = TrainConfig::new(Task::Lp, tree(3, 3, 0.05, 1));
    for bad in [
        TrainConfig { dim: 0, ..base.clone() },
        TrainConfig { t: 0.0, ..base.clone() },
        TrainConfig {
            lr_euclidean: -1.0,
            ..base.clone()
        },
        TrainConfig {
            node_split: [0.5, 0.5, 0.5],
            ..base.clone()
        },
    ] {
        assert!(matches!(run(&bad, &mut |_| {}), Err(RunError::Config(_))));
    }
    assert!(matches!(train_nc(&base), Err(RunError::Config(_))));
    let json = r#"{"task": "lp", "dataset": {"source": {"kind": "tree", "depth": 2, "branching": 2}}, "bogus": 1}"#;
    assert!(serde_json::from_str::<TrainConfig>(json).is_err());
}

#[test]
fn config_hash_tracks_content() {
    let a = TrainConfig::new(Task::Lp, tree(3, 3, 0.05, 1));
    let b = TrainConfig { seed: 2, ..a.clone() };
    assert_eq!(a.hash(), a.clone().hash());
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}
