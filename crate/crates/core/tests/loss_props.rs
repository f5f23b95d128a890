use mrcl_core::corpus::Corpus;
use mrcl_core::encoders::{init_params, prepare_scene, ModelSpec, PreparedScene};
use mrcl_core::graph::GraphConfig;
use mrcl_core::scene::SceneGenConfig;
use mrcl_core::tensor::{Tape, Tensor};
use mrcl_core::training::{
    forward_losses, graph_loss, info_nce, loss_table_csv, sample_batch_paths, train, LossWeights, TrainConfig,
};
use mrcl_core::corpus::split_indices;
use proptest::prelude::*;

fn info_nce_value(sim: &[Vec<f64>], tau: f64, eps: f64) -> f64 {
    let mut t = Tape::<f64>::new();
    let s = t.constant(Tensor::from_rows(sim).unwrap()).unwrap();
    let l = info_nce(&mut t, s, tau, eps).unwrap();
    t.value(l).item().unwrap()
}

fn graph_loss_value(v: &[Vec<f64>], u: &[Vec<f64>], tau: f64, eps: f64) -> f64 {
    let mut t = Tape::<f64>::new();
    let a = t.constant(Tensor::from_rows(v).unwrap()).unwrap();
    let b = t.constant(Tensor::from_rows(u).unwrap()).unwrap();
    let l = graph_loss(&mut t, a, b, tau, eps).unwrap();
    t.value(l).item().unwrap()
}

/// Row-by-row softmax cross-entropy written out directly.
fn reference_info_nce(sim: &[Vec<f64>], tau: f64, eps: f64) -> f64 {
    let n = sim.len();
    let mut total = 0.0;
    for (i, row) in sim.iter().enumerate() {
        let z: Vec<f64> = row.iter().map(|s| s / tau).collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        for (j, zj) in z.iter().enumerate() {
            let target = if i == j { 1.0 - eps + eps / n as f64 } else { eps / n as f64 };
            total -= target * (zj.exp() / denom).ln();
        }
    }
    total / n as f64
}

#[test]
fn uniform_similarities_give_ln_n() {
    for n in [2usize, 4, 8] {
        for eps in [0.0, 0.3] {
            for level in [-0.4, 0.0, 0.9] {
                let sim = vec![vec![level; n]; n];
                let got = info_nce_value(&sim, 0.07, eps);
                assert!((got - (n as f64).ln()).abs() < 1e-6, "N={n} eps={eps}: {got}");
            }
        }
    }
    assert!((info_nce_value(&vec![vec![0.2; 4]; 4], 0.07, 0.3) - 1.386294).abs() < 1e-6);
}

#[test]
fn three_by_three_matches_reference() {
    let sim = vec![vec![0.31, -0.12, 0.77], vec![0.05, 0.64, -0.48], vec![-0.93, 0.22, 0.18]];
    let got = info_nce_value(&sim, 0.07, 0.3);
    let want = reference_info_nce(&sim, 0.07, 0.3);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn orthogonal_pair_hand_case() {
    let tau = 0.07;
    for eps in [0.0, 0.3] {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        // Each row: log(e^{1/τ} + 1) − (1 − ε/2)/τ, twice for both directions.
        let row = ((1.0f64 / tau).exp() + 1.0).ln() - (1.0 - eps / 2.0) / tau;
        let got = graph_loss_value(&e, &e, tau, eps);
        assert!((got - 2.0 * row).abs() < 1e-6, "eps={eps}: {got} vs {}", 2.0 * row);
    }
}

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), n)
}

/// Rows with norm in `[1, 2]`, so the ε in cosine denominators stays
/// negligible after scaling.
fn embeddings(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec((prop::collection::vec(-1.0f64..1.0, d), 1.0f64..2.0), n).prop_map(|rows| {
        rows.into_iter()
            .map(|(r, len)| {
                let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm < 1e-3 {
                    let mut e = vec![0.0; r.len()];
                    e[0] = len;
                    e
                } else {
                    r.iter().map(|x| x * len / norm).collect()
                }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_nce_matches_reference_and_is_nonnegative(sim in (1usize..6).prop_flat_map(|n| matrix(n, n)), eps in 0.0f64..0.9) {
        let got = info_nce_value(&sim, 0.2, eps);
        prop_assert!(got >= -1e-12);
        prop_assert!((got - reference_info_nce(&sim, 0.2, eps)).abs() < 1e-9);
    }

    #[test]
    fn graph_loss_symmetries(
        (v, u) in (2usize..6, 2usize..5).prop_flat_map(|(n, d)| (embeddings(n, d), embeddings(n, d))),
        perm_seed in any::<u64>(),
        c in 0.5f64..10.0,
    ) {
        let base = graph_loss_value(&v, &u, 0.07, 0.3);
        prop_assert!((base - graph_loss_value(&u, &v, 0.07, 0.3)).abs() < 1e-9);

        let mut order: Vec<usize> = (0..v.len()).collect();
        let mut s = perm_seed;
        for i in (1..order.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let pv: Vec<_> = order.iter().map(|&i| v[i].clone()).collect();
        let pu: Vec<_> = order.iter().map(|&i| u[i].clone()).collect();
        prop_assert!((base - graph_loss_value(&pv, &pu, 0.07, 0.3)).abs() < 1e-9);

        let sv: Vec<_> = v.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        let su: Vec<_> = u.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        prop_assert!((base - graph_loss_value(&sv, &su, 0.07, 0.3)).abs() < 1e-6);
    }
}

fn small_corpus(count: usize) -> (ModelSpec, Vec<PreparedScene>) {
    let scene_cfg = SceneGenConfig { objects_min: 3, objects_max: 5, ..SceneGenConfig::default() };
    let corpus = Corpus::generate(11, count, &scene_cfg).unwrap();
    let spec = ModelSpec {
        encoder: Default::default(),
        force: Default::default(),
        n_labels: scene_cfg.n_labels,
        n_attributes: scene_cfg.n_attributes,
    };
    let k_set = TrainConfig::default().k_set;
    let prepared = corpus
        .scenes
        .iter()
        .map(|s| prepare_scene(s, &spec, &GraphConfig::default(), &k_set).unwrap())
        .collect();
    (spec, prepared)
}

#[test]
fn total_is_weighted_sum_of_components() {
    let (spec, prepared) = small_corpus(4);
    let refs: Vec<&PreparedScene> = prepared.iter().collect();
    let params = init_params(&spec, 3).unwrap().cast::<f64>();
    let weights = [
        LossWeights::default(),
        LossWeights { node: 0.5, edge: 2.0, graph: 1.5, attr: 0.25, dir: 0.1, sfb: 3.0 },
        LossWeights { node: 0.0, edge: 0.0, graph: 1.0, attr: 0.0, dir: 0.0, sfb: 0.0 },
    ];
    for w in weights {
        let cfg = TrainConfig { weights: w, ..TrainConfig::default() };
        let paths = sample_batch_paths(&refs, &cfg, &[1, 2, 3, 4]).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let out = forward_losses(&mut tape, &bound, &spec, &cfg, &refs, &paths).unwrap();
        let total = tape.value(out.total).item().unwrap();
        let manual: f64 = out.values.iter().zip(w.as_array()).map(|(v, w)| v.unwrap() * w).sum();
        assert!((total - manual).abs() < 1e-6, "{total} vs {manual}");
        assert!((out.breakdown.total - manual).abs() < 1e-6);
        if w.node == 0.0 {
            assert!((total - out.breakdown.graph).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_epochs_keeps_initialization() {
    let (spec, prepared) = small_corpus(6);
    let split = split_indices(prepared.len(), 7, 0.2);
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let mut calls = Vec::new();
    let run = train(&spec, &cfg, &prepared, &split, |st| {
        calls.push(st.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, [0]);
    assert!(run.history.is_empty());
    assert_eq!(run.params, init_params(&spec, cfg.seed).unwrap());
    assert_eq!(loss_table_csv(&run.history).lines().count(), 1);
}

#[test]
fn training_is_deterministic_and_rows_reconstruct() {
    let (spec, prepared) = small_corpus(10);
    let split = split_indices(prepared.len(), 7, 0.2);
    let cfg = TrainConfig { epochs: 2, batch_size: 4, ..TrainConfig::default() };
    let a = train(&spec, &cfg, &prepared, &split, |_| Ok(())).unwrap();
    let b = train(&spec, &cfg, &prepared, &split, |_| Ok(())).unwrap();
    assert_eq!(loss_table_csv(&a.history), loss_table_csv(&b.history));
    assert_eq!(a.params, b.params);
    let w = cfg.weights.as_array();
    for rec in &a.history {
        for row in std::iter::once(rec.train).chain(rec.val) {
            let manual: f64 = row.components().iter().zip(w).map(|(c, w)| c * w).sum();
            assert!((row.total - manual).abs() < 1e-6);
        }
    }
}
