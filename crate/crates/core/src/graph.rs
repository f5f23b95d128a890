//! Scene graphs with force-banner edges, and k-hop simple paths over them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::force::{dominant_direction, symmetric_force_banner, ForceBanner, ForceConfig};
use crate::scene::Scene;
use crate::seed;

/// Hard cap on paths kept per `(scene, k)`.
pub const DEFAULT_PATH_CAP: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Keep only edges whose endpoints are `near` under the oracle rule.
    pub near_prune: bool,
    pub near_fraction: f64,
    pub path_cap: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            near_prune: false,
            near_fraction: 0.25,
            path_cap: DEFAULT_PATH_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub object_id: usize,
    pub label_id: usize,
    pub attribute_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub nodes: Vec<GraphNode>,
    /// Undirected edges keyed `(i, j)` with `i < j`.
    pub edges: BTreeMap<(usize, usize), ForceBanner>,
    adjacency: Vec<Vec<usize>>,
}

impl SceneGraph {
    fn from_parts(nodes: Vec<GraphNode>, edges: BTreeMap<(usize, usize), ForceBanner>) -> Self {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for &(i, j) in edges.keys() {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
        for a in &mut adjacency {
            a.sort_unstable();
        }
        Self {
            nodes,
            edges,
            adjacency,
        }
    }

    /// Bare topology with all-zero banners, for path-level work.
    pub fn from_edge_list(n: usize, edges: &[(usize, usize)]) -> Self {
        let nodes = (0..n)
            .map(|i| GraphNode {
                object_id: i,
                label_id: 0,
                attribute_id: 0,
            })
            .collect();
        let zero = ForceBanner {
            theta_bins: 2,
            levels: vec![0],
            values: vec![0.0; 2],
        };
        let map = edges
            .iter()
            .map(|&(i, j)| {
                assert!(i != j && i < n && j < n, "bad edge ({i},{j})");
                ((i.min(j), i.max(j)), zero.clone())
            })
            .collect();
        Self::from_parts(nodes, map)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains_key(&(i.min(j), i.max(j)))
    }

    pub fn banner(&self, i: usize, j: usize) -> Option<&ForceBanner> {
        self.edges.get(&(i.min(j), i.max(j)))
    }

    /// Edge position in key order, used to address per-edge tensors.
    pub fn edge_index(&self) -> BTreeMap<(usize, usize), usize> {
        self.edges.keys().enumerate().map(|(e, &k)| (k, e)).collect()
    }

    /// Nodes, then edges with their dominant direction bin.
    pub fn dump(&self) -> String {
        let mut out = String::from("# nodes\nobject_id\tlabel_id\tattribute_id\n");
        for n in &self.nodes {
            let _ = writeln!(out, "{}\t{}\t{}", n.object_id, n.label_id, n.attribute_id);
        }
        out.push_str("# edges\ni\tj\tdominant_bin\n");
        for (&(i, j), b) in &self.edges {
            let dir = dominant_direction(b)
                .map(|d| d.to_string())
                .unwrap_or_else(|_| "-".into());
            let _ = writeln!(out, "{i}\t{j}\t{dir}");
        }
        out
    }
}

/// Builds the (by default complete) scene graph with a symmetric force banner
/// on every edge.
pub fn build_graph(scene: &Scene, force: &ForceConfig, config: &GraphConfig) -> Result<SceneGraph> {
    build_graph_with(scene, config, |i, j| {
        symmetric_force_banner(&scene.objects[i].mask, &scene.objects[j].mask, force)
    })
}

/// [`build_graph`] with banners for pairs `(i, j)`, `i < j`, supplied by
/// `banner` (called only for edges that survive pruning).
pub fn build_graph_with(
    scene: &Scene,
    config: &GraphConfig,
    mut banner: impl FnMut(usize, usize) -> Result<ForceBanner>,
) -> Result<SceneGraph> {
    let nodes: Vec<GraphNode> = scene
        .objects
        .iter()
        .map(|o| GraphNode {
            object_id: o.object_id,
            label_id: o.label_id,
            attribute_id: o.attribute_id,
        })
        .collect();
    let limit = config.near_fraction * scene.diagonal();
    let mut edges = BTreeMap::new();
    for (i, a) in scene.objects.iter().enumerate() {
        for b in &scene.objects[i + 1..] {
            if config.near_prune {
                let dx = b.centroid.0 - a.centroid.0;
                let dy = b.centroid.1 - a.centroid.1;
                if (dx * dx + dy * dy).sqrt() >= limit {
                    continue;
                }
            }
            edges.insert((a.object_id, b.object_id), banner(a.object_id, b.object_id)?);
        }
    }
    Ok(SceneGraph::from_parts(nodes, edges))
}

/// A simple path of `k` edges in canonical orientation (smaller endpoint first).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HopPath {
    pub nodes: Vec<usize>,
}

impl HopPath {
    /// Canonicalizes a node sequence up to reversal.
    pub fn canonical(mut nodes: Vec<usize>) -> Self {
        if nodes.first() > nodes.last() {
            nodes.reverse();
        }
        Self { nodes }
    }

    pub fn k(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Undirected edge keys `(min, max)` along the path.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.nodes.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1])))
    }

    pub fn anchor(&self) -> usize {
        self.nodes[0]
    }

    pub fn signature(&self) -> String {
        self.nodes
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn is_simple(&self) -> bool {
        let mut seen = self.nodes.clone();
        seen.sort_unstable();
        seen.windows(2).all(|w| w[0] != w[1])
    }
}

fn extend(g: &SceneGraph, k: usize, path: &mut Vec<usize>, on_path: &mut [bool], out: &mut Vec<HopPath>) {
    let last = *path.last().unwrap();
    if path.len() == k + 1 {
        if path[0] < last {
            out.push(HopPath { nodes: path.clone() });
        }
        return;
    }
    for &next in g.neighbors(last) {
        if on_path[next] {
            continue;
        }
        on_path[next] = true;
        path.push(next);
        extend(g, k, path, on_path, out);
        path.pop();
        on_path[next] = false;
    }
}

/// All simple `k`-edge paths, each undirected path once, sorted
/// lexicographically. Larger sets are cut to [`DEFAULT_PATH_CAP`] by a fixed
/// deterministic sample.
pub fn enumerate_paths(g: &SceneGraph, k: usize) -> Result<Vec<HopPath>> {
    enumerate_paths_capped(g, k, DEFAULT_PATH_CAP)
}

pub fn enumerate_paths_capped(g: &SceneGraph, k: usize, cap: usize) -> Result<Vec<HopPath>> {
    if k < 2 {
        return Err(Error::Config(format!("hop count must be >= 2, got {k}")));
    }
    let n = g.node_count();
    let mut out = Vec::new();
    if k >= n {
        return Ok(out);
    }
    let mut on_path = vec![false; n];
    let mut path = Vec::with_capacity(k + 1);
    for start in 0..n {
        on_path[start] = true;
        path.push(start);
        extend(g, k, &mut path, &mut on_path, &mut out);
        path.pop();
        on_path[start] = false;
    }
    out.sort();
    if out.len() > cap {
        let mut rng = seed::stream_rng(0, "path-cap", &[n as u64, k as u64]);
        let mut keep = index::sample(&mut rng, out.len(), cap).into_vec();
        keep.sort_unstable();
        out = keep.into_iter().map(|i| out[i].clone()).collect();
    }
    Ok(out)
}

/// Uniform sample without replacement of `budget` paths (all of them when the
/// budget covers the set), returned in enumeration order.
pub fn sample_paths(g: &SceneGraph, k: usize, budget: usize, seed: u64) -> Result<Vec<HopPath>> {
    sample_from(enumerate_paths(g, k)?, k, budget, seed)
}

/// Sampling step of [`sample_paths`] over an already enumerated set.
pub fn sample_from(all: Vec<HopPath>, k: usize, budget: usize, seed: u64) -> Result<Vec<HopPath>> {
    if budget == 0 {
        return Err(Error::Config("path budget must be >= 1".into()));
    }
    if all.is_empty() {
        return Err(Error::NoPaths);
    }
    if budget >= all.len() {
        return Ok(all);
    }
    let mut rng = seed::stream_rng(seed, seed::SAMPLING, &[k as u64]);
    let mut keep = index::sample(&mut rng, all.len(), budget).into_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| all[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneGenConfig};

    fn complete(n: usize) -> SceneGraph {
        let mut e = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                e.push((i, j));
            }
        }
        SceneGraph::from_edge_list(n, &e)
    }

    #[test]
    fn triangle_two_hop() {
        let p = enumerate_paths(&complete(3), 2).unwrap();
        let seqs: Vec<_> = p.iter().map(|h| h.nodes.clone()).collect();
        assert_eq!(seqs, vec![vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2]]);
    }

    #[test]
    fn k4_fixed_endpoints() {
        let p = enumerate_paths(&complete(4), 2).unwrap();
        let between: Vec<_> = p
            .iter()
            .filter(|h| h.nodes[0] == 0 && h.nodes[2] == 3)
            .map(|h| h.nodes[1])
            .collect();
        assert_eq!(between, vec![1, 2]);
    }

    #[test]
    fn line_graph_has_no_three_hop() {
        let g = SceneGraph::from_edge_list(3, &[(0, 1), (1, 2)]);
        assert!(enumerate_paths(&g, 3).unwrap().is_empty());
        assert_eq!(enumerate_paths(&g, 2).unwrap().len(), 1);
        assert!(enumerate_paths(&g, 1).is_err());
    }

    #[test]
    fn reversal_is_canonical() {
        let a = HopPath::canonical(vec![3, 1, 0, 2]);
        let b = HopPath::canonical(vec![2, 0, 1, 3]);
        assert_eq!(a, b);
        assert_eq!(a.nodes, vec![2, 0, 1, 3]);
    }

    #[test]
    fn sampling() {
        let g = complete(5);
        let all = enumerate_paths(&g, 2).unwrap();
        assert_eq!(sample_paths(&g, 2, all.len() + 3, 1).unwrap(), all);
        let one = sample_paths(&g, 2, 1, 42).unwrap();
        assert_eq!(one, sample_paths(&g, 2, 1, 42).unwrap());
        assert_eq!(one.len(), 1);
        let empty = SceneGraph::from_edge_list(2, &[(0, 1)]);
        assert!(matches!(sample_paths(&empty, 2, 3, 0), Err(Error::NoPaths)));
    }

    #[test]
    fn build_graph_counts() {
        let cfg = SceneGenConfig {
            objects_min: 3,
            objects_max: 3,
            ..Default::default()
        };
        let s = generate_scene(7, "g3", &cfg).unwrap();
        let g = build_graph(&s, &ForceConfig::default(), &GraphConfig::default()).unwrap();
        assert_eq!((g.node_count(), g.edge_count()), (3, 3));
        for (&(i, j), b) in &g.edges {
            assert!(i < j);
            let again = symmetric_force_banner(&s.objects[j].mask, &s.objects[i].mask, &ForceConfig::default()).unwrap();
            assert_eq!(&again, b);
        }
        let one = SceneGenConfig {
            objects_min: 1,
            objects_max: 1,
            ..Default::default()
        };
        let s1 = generate_scene(7, "g1", &one).unwrap();
        let g1 = build_graph(&s1, &ForceConfig::default(), &GraphConfig::default()).unwrap();
        assert_eq!(g1.edge_count(), 0);
        assert!(g1.dump().contains("# edges"));
    }
}
