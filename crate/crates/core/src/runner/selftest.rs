//! Fast seeded invariant suites behind `hhgcn selftest`.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::metrics::roc_auc;
use crate::autodiff::grad_check;
use crate::geometry::{
    einstein_midpoint, exp_origin, klein_to_lorentz, lorentz_distance, lorentz_midpoint, lorentz_to_klein,
    lorentz_to_poincare, poincare_to_lorentz, LorentzPoint,
};
use crate::graphdata::{generate_tree, make_lp_split, TreeSpec};
use crate::model::{lorentz_linear, Activation, AggregationRoute, Architecture, Model, ModelConfig};
use crate::optimizer::{orthogonal_init, orthonormality_error, riemannian_step, tangent_project};

#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub result: Result<(), String>,
}

type Check = std::result::Result<(), String>;
type Suite = (&'static str, fn(&mut ChaCha8Rng) -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_point(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> LorentzPoint {
    let z: Vec<f64> = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    exp_origin(&z)
}

fn manifold(rng: &mut ChaCha8Rng) -> Check {
    for _ in 0..200 {
        let x = random_point(rng, 4, 1.0);
        let y = random_point(rng, 4, 1.0);
        ensure(x.residual().abs() < 1e-9, || {
            format!("off-manifold point, residual {}", x.residual())
        })?;
        let dxy = lorentz_distance(&x, &y).map_err(|e| e.to_string())?;
        let dyx = lorentz_distance(&y, &x).map_err(|e| e.to_string())?;
        ensure(dxy == dyx, || format!("asymmetric distance {dxy} vs {dyx}"))?;
        let dxx = lorentz_distance(&x, &x).map_err(|e| e.to_string())?;
        ensure(dxx == 0.0, || format!("d(x, x) = {dxx}"))?;
        for back in [
            poincare_to_lorentz(&lorentz_to_poincare(&x)),
            klein_to_lorentz(&lorentz_to_klein(&x)),
        ] {
            let err = back
                .coords()
                .iter()
                .zip(x.coords())
                .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
                .fold(0.0, f64::max);
            ensure(err < 1e-12, || format!("model round trip error {err:e}"))?;
        }
    }
    Ok(())
}

fn isometry(rng: &mut ChaCha8Rng) -> Check {
    let w = orthogonal_init(5, 5, rng.random()).map_err(|e| e.to_string())?;
    let pts: Vec<_> = (0..20).map(|_| random_point(rng, 5, 1.0)).collect();
    let mapped: Vec<_> = pts
        .iter()
        .map(|p| lorentz_linear(p, &w))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for i in 0..pts.len() {
        for j in 0..i {
            let a = lorentz_distance(&pts[i], &pts[j]).unwrap();
            let b = lorentz_distance(&mapped[i], &mapped[j]).unwrap();
            ensure((a - b).abs() < 1e-9, || format!("distance changed from {a} to {b}"))?;
        }
    }
    Ok(())
}

fn midpoint(rng: &mut ChaCha8Rng) -> Check {
    for _ in 0..200 {
        let k = rng.random_range(1..=20);
        let pts: Vec<_> = (0..k).map(|_| random_point(rng, 3, 1.0)).collect();
        let klein: Vec<_> = pts.iter().map(lorentz_to_klein).collect();
        let a = klein_to_lorentz(&einstein_midpoint(&klein).map_err(|e| e.to_string())?);
        let b = lorentz_midpoint(&pts).map_err(|e| e.to_string())?;
        let err = a
            .coords()
            .iter()
            .zip(b.coords())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        ensure(err < 1e-10, || {
            format!("Klein and Lorentz-sum midpoints differ by {err:e}")
        })?;
    }
    Ok(())
}

fn stiefel(rng: &mut ChaCha8Rng) -> Check {
    let mut w = orthogonal_init(6, 6, rng.random()).map_err(|e| e.to_string())?;
    for _ in 0..1000 {
        let g = Array2::from_shape_simple_fn((6, 6), || rng.sample::<f64, _>(StandardNormal));
        let p = tangent_project(&w, &g).map_err(|e| e.to_string())?;
        let m = w.as_array().t().dot(&p);
        let skew = (&m + &m.t()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        ensure(skew < 1e-10, || format!("projection not tangent ({skew:e})"))?;
        w = riemannian_step(&w, &g, 0.05).map_err(|e| e.to_string())?;
    }
    let err = orthonormality_error(w.as_array());
    ensure(err < 1e-8, || format!("orthonormality drifted to {err:e}"))
}

fn gradients(_rng: &mut ChaCha8Rng) -> Check {
    let g = generate_tree(&TreeSpec::new(2, 2, 0.0), 3).map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        architecture: Architecture::Hyperbolic,
        feat_dim: g.feature_dim(),
        dim: 3,
        layers: 2,
        num_classes: 2,
        num_centroids: 3,
        activation: Activation::default(),
        aggregation: AggregationRoute::LorentzSum,
        reproject: true,
        r: 2.0,
        t: 1.0,
    };
    let model = Model::new(cfg, 11).map_err(|e| e.to_string())?;
    let x = g.features_or_ones();
    let csr = g.csr().clone();
    let pos = g.edges().to_vec();
    let neg = vec![(1, 2), (3, 6), (0, 5)];
    let labels = Arc::new(g.node_labels.clone().unwrap());
    let rows = Arc::new((0..g.num_nodes()).collect::<Vec<_>>());
    let report = grad_check(&model.params, 1e-5, |tape, vars| {
        let xv = tape.constant(x.clone());
        let emb = model.encode(tape, vars, &csr, xv)?.output();
        let lp = model.lp_loss(tape, emb, &pos, &neg)?;
        let logits = model.node_logits(tape, vars, emb)?;
        let ce = tape.softmax_cross_entropy(logits, labels.clone(), rows.clone())?;
        Ok::<_, crate::model::ModelError>(tape.add(lp, ce)?)
    })
    .map_err(|e| e.to_string())?;
    ensure(report.max_rel_error < 1e-4, || format!("{report:?}"))
}

fn metrics(_rng: &mut ChaCha8Rng) -> Check {
    let auc = |p: &[f64], n: &[f64]| roc_auc(p, n).map_err(|e| e.to_string());
    ensure(auc(&[0.9, 0.8], &[0.2, 0.1])? == 1.0, || "separable AUC".into())?;
    ensure(auc(&[0.5, 0.5], &[0.5, 0.5])? == 0.5, || "tied AUC".into())?;
    ensure(auc(&[0.9, 0.3], &[0.5, 0.1])? == 0.75, || "3-of-4 AUC".into())?;
    let o = LorentzPoint::origin(2);
    let p = exp_origin(&[2f64.sqrt(), 0.0]);
    let fd = crate::model::fermi_dirac(&o, &p, 2.0, 1.0).map_err(|e| e.to_string())?;
    ensure((fd - 0.5).abs() <= 1e-15, || {
        format!("Fermi-Dirac at d^2 = r gave {fd}")
    })
}

fn data(rng: &mut ChaCha8Rng) -> Check {
    let g = generate_tree(&TreeSpec::new(4, 3, 0.05), rng.random()).map_err(|e| e.to_string())?;
    ensure(g.num_nodes() == 121, || format!("tree has {} nodes", g.num_nodes()))?;
    let split = make_lp_split(&g, [0.85, 0.05, 0.10], rng.random()).map_err(|e| e.to_string())?;
    for &(u, v) in split.val_pos.iter().chain(&split.test_pos) {
        ensure(!split.train_graph.has_edge(u, v), || {
            format!("held-out edge ({u}, {v}) leaked")
        })?;
    }
    for &(u, v) in split.val_neg.iter().chain(&split.test_neg) {
        ensure(!g.has_edge(u, v), || format!("negative ({u}, {v}) is an edge"))?;
    }
    Ok(())
}

/// Runs every suite with a fixed seed.
pub fn run_selftest() -> Vec<SuiteOutcome> {
    let suites: [Suite; 7] = [
        ("manifold", manifold),
        ("isometry", isometry),
        ("midpoint", midpoint),
        ("stiefel", stiefel),
        ("gradients", gradients),
        ("metrics", metrics),
        ("data", data),
    ];
    suites
        .iter()
        .enumerate()
        .map(|(i, (name, suite))| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f_7e57 + i as u64);
            SuiteOutcome {
                name,
                result: suite(&mut rng),
            }
        })
        .collect()
}
