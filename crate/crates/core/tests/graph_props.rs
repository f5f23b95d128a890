use std::collections::BTreeSet;

use mrcl_core::force::ForceConfig;
use mrcl_core::graph::{build_graph, enumerate_paths, sample_from, sample_paths, GraphConfig, HopPath, SceneGraph};
use mrcl_core::scene::{generate_scene, Relation, SceneGenConfig};
use mrcl_core::Error;
use proptest::prelude::*;

/// Every `(k+1)`-tuple of nodes, kept when distinct and consecutive nodes are
/// adjacent, oriented so the first endpoint is the smaller one.
fn tuple_oracle(n: usize, edges: &BTreeSet<(usize, usize)>, k: usize) -> Vec<Vec<usize>> {
    let len = k + 1;
    let mut out = BTreeSet::new();
    let total = n.pow(len as u32);
    for code in 0..total {
        let mut seq = Vec::with_capacity(len);
        let mut c = code;
        for _ in 0..len {
            seq.push(c % n);
            c /= n;
        }
        let distinct: BTreeSet<_> = seq.iter().collect();
        if distinct.len() != len {
            continue;
        }
        if !seq.windows(2).all(|w| edges.contains(&(w[0].min(w[1]), w[0].max(w[1])))) {
            continue;
        }
        if seq[0] > seq[len - 1] {
            seq.reverse();
        }
        out.insert(seq);
    }
    out.into_iter().collect()
}

fn random_graph() -> impl Strategy<Value = (usize, BTreeSet<(usize, usize)>)> {
    (2usize..=7).prop_flat_map(|n| {
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        prop::collection::vec(any::<bool>(), pairs.len()).prop_map(move |keep| {
            let edges = pairs.iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| *p).collect();
            (n, edges)
        })
    })
}

fn complete(n: usize) -> SceneGraph {
    let e: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    SceneGraph::from_edge_list(n, &e)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn enumeration_matches_tuple_oracle((n, edges) in random_graph(), k in 2usize..=3) {
        let list: Vec<_> = edges.iter().copied().collect();
        let g = SceneGraph::from_edge_list(n, &list);
        let got: Vec<Vec<usize>> = enumerate_paths(&g, k).unwrap().into_iter().map(|p| p.nodes).collect();
        prop_assert_eq!(&got, &tuple_oracle(n, &edges, k));
        for p in &got {
            let h = HopPath { nodes: p.clone() };
            prop_assert!(h.is_simple());
            prop_assert_eq!(h.k(), k);
            prop_assert!(h.edges().all(|(i, j)| g.has_edge(i, j)));
        }
    }

    #[test]
    fn reversal_has_one_canonical_form(nodes in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle(), len in 3usize..=7) {
        let seq = nodes[..len].to_vec();
        let mut rev = seq.clone();
        rev.reverse();
        let a = HopPath::canonical(seq);
        prop_assert_eq!(&a, &HopPath::canonical(rev));
        prop_assert!(a.nodes[0] < a.nodes[len - 1]);
    }
}

#[test]
fn complete_graph_counts() {
    for n in 3..=7 {
        let g = complete(n);
        let two = enumerate_paths(&g, 2).unwrap();
        for a in 0..n {
            for b in a + 1..n {
                let c = two.iter().filter(|p| p.nodes[0] == a && p.nodes[2] == b).count();
                assert_eq!(c, n - 2, "K{n} endpoints ({a},{b})");
            }
        }
        // n!/(n-k-1)! ordered sequences, halved for reversal.
        let three = enumerate_paths(&g, 3).unwrap();
        if n >= 4 {
            assert_eq!(three.len(), n * (n - 1) * (n - 2) * (n - 3) / 2);
        }
        assert!(enumerate_paths(&g, n).unwrap().is_empty());
    }
    assert!(enumerate_paths(&SceneGraph::from_edge_list(3, &[(0, 1), (1, 2)]), 3).unwrap().is_empty());
    assert!(matches!(enumerate_paths(&complete(3), 1), Err(Error::Config(_))));
}

#[test]
fn k4_sampling_is_uniform() {
    let g = complete(4);
    let all = enumerate_paths(&g, 2).unwrap();
    assert_eq!(all.len(), 12);
    let draws = 10_000u64;
    let mut counts = vec![0u64; all.len()];
    for seed in 0..draws {
        let p = sample_paths(&g, 2, 1, seed).unwrap();
        counts[all.iter().position(|q| *q == p[0]).unwrap()] += 1;
    }
    let p = 1.0 / all.len() as f64;
    let expected = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for &c in &counts {
        assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    // 0.999 quantile of chi-square with 11 degrees of freedom.
    assert!(chi2 < 31.26, "chi2 {chi2}");
}

#[test]
fn sampling_budget_and_determinism() {
    let g = complete(5);
    let all = enumerate_paths(&g, 3).unwrap();
    assert_eq!(sample_paths(&g, 3, all.len() + 5, 1).unwrap(), all);
    let a = sample_paths(&g, 3, 4, 9).unwrap();
    assert_eq!(a, sample_paths(&g, 3, 4, 9).unwrap());
    assert_eq!(a.len(), 4);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert!(matches!(sample_from(Vec::new(), 2, 3, 0), Err(Error::NoPaths)));
    assert!(matches!(sample_from(all, 2, 0, 0), Err(Error::Config(_))));
}

#[test]
fn near_pruning_matches_oracle() {
    let cfg = SceneGenConfig { objects_min: 5, objects_max: 5, ..SceneGenConfig::default() };
    let graph_cfg = GraphConfig { near_prune: true, near_fraction: cfg.oracle.near_fraction, ..GraphConfig::default() };
    let force = ForceConfig::default();
    for s in 0..20 {
        let scene = generate_scene(s, &format!("s{s}"), &cfg).unwrap();
        assert_eq!(scene.objects.len(), 5);
        let g = build_graph(&scene, &force, &graph_cfg).unwrap();
        let near: BTreeSet<(usize, usize)> = scene
            .oracle_relations
            .iter()
            .filter(|t| t.relation == Relation::Near)
            .map(|t| (t.subject.min(t.object), t.subject.max(t.object)))
            .collect();
        assert_eq!(g.edges.keys().copied().collect::<BTreeSet<_>>(), near, "scene {s}");
        let full = build_graph(&scene, &force, &GraphConfig::default()).unwrap();
        assert_eq!(full.edge_count(), 10);
    }
}
