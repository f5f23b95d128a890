//! Object, edge, node and path encoders on the autodiff tape.
//!
//! * visual: mask crop → two 3×3 conv + 2×2 average-pool stages, concatenated
//!   with a label embedding and projected to `embed_dim`, then l2-normalized.
//!   This is also the initial node state of the graph encoder.
//! * edge: two-layer ReLU MLP over the flattened, rescaled force banner.
//! * message passing: `h' = ReLU(W₁h_i + Σ_j W₂h_j ⊙ f(F_ij))`, neighbours in
//!   ascending order.
//! * path: mean of path node states ‖ mean of path edge embeddings, linear
//!   projection, l2-normalized.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::force::{dominant_direction, ForceBanner, ForceConfig};
use crate::graph::{build_graph, enumerate_paths_capped, GraphConfig, HopPath, SceneGraph};
use crate::mask::BinaryMask;
use crate::scene::Scene;
use crate::seed;
use crate::tensor::{xavier_uniform, BoundParams, ParamStore, Real, Tape, Tensor, Var, PAD};

/// Denominator guard for every l2 normalization and cosine similarity.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub gnn_layers: usize,
    pub f_hidden: usize,
    pub projection_dim: usize,
    pub temperature: f64,
    pub conv_channels: [usize; 2],
    pub label_embed_dim: usize,
    /// Side of the square window cut around each object's bounding-box centre.
    pub crop_window: usize,
    /// Side of the resampled crop fed to the conv stack (multiple of 4).
    pub crop_size: usize,
    /// Banner inputs are scaled by `theta_bins · edge_length_scale^r`.
    pub edge_length_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            gnn_layers: 2,
            f_hidden: 128,
            projection_dim: 64,
            temperature: 0.07,
            conv_channels: [8, 8],
            label_embed_dim: 16,
            crop_window: 32,
            crop_size: 16,
            edge_length_scale: 16.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.embed_dim,
            self.f_hidden,
            self.projection_dim,
            self.conv_channels[0],
            self.conv_channels[1],
            self.label_embed_dim,
            self.crop_window,
            self.crop_size,
        ];
        if positive.contains(&0) || self.gnn_layers == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.crop_size % 4 != 0 {
            return Err(Error::Config(format!("crop_size {} must be a multiple of 4", self.crop_size)));
        }
        if !(self.edge_length_scale > 0.0) {
            return Err(Error::Config("edge_length_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Everything that fixes parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub encoder: EncoderConfig,
    pub force: ForceConfig,
    pub n_labels: usize,
    pub n_attributes: usize,
}

impl ModelSpec {
    pub fn edge_input_dim(&self) -> usize {
        self.force.descriptor_len()
    }

    fn conv_feature_dim(&self) -> usize {
        let s = self.encoder.crop_size / 4;
        s * s * self.encoder.conv_channels[1]
    }
}

/// `(name, shape, is_bias)` for every parameter, in creation order.
fn param_layout(spec: &ModelSpec) -> Vec<(String, [usize; 2], bool)> {
    let e = &spec.encoder;
    let (d, p) = (e.embed_dim, e.projection_dim);
    let [c1, c2] = e.conv_channels;
    let din = spec.edge_input_dim();
    let mut v = vec![
        ("visual.conv1.w".to_string(), [9, c1], false),
        ("visual.conv1.b".to_string(), [1, c1], true),
        ("visual.conv2.w".to_string(), [9 * c1, c2], false),
        ("visual.conv2.b".to_string(), [1, c2], true),
        ("visual.label_embed".to_string(), [spec.n_labels, e.label_embed_dim], false),
        ("visual.proj.w".to_string(), [spec.conv_feature_dim() + e.label_embed_dim, d], false),
        ("visual.proj.b".to_string(), [1, d], true),
        ("edge.w1".to_string(), [din, e.f_hidden], false),
        ("edge.b1".to_string(), [1, e.f_hidden], true),
        ("edge.w2".to_string(), [e.f_hidden, d], false),
        ("edge.b2".to_string(), [1, d], true),
    ];
    for l in 0..e.gnn_layers {
        v.push((format!("gnn.{l}.w1"), [d, d], false));
        v.push((format!("gnn.{l}.w2"), [d, d], false));
    }
    v.extend([
        ("path.w".to_string(), [2 * d, p], false),
        ("path.b".to_string(), [1, p], true),
        ("head.visual_proj.w".to_string(), [d, p], false),
        ("head.node_proj.w".to_string(), [d, p], false),
        ("head.pair_visual_proj.w".to_string(), [2 * d, p], false),
        ("head.edge_proj.w".to_string(), [d, p], false),
        ("head.attr.w".to_string(), [d, spec.n_attributes], false),
        ("head.attr.b".to_string(), [1, spec.n_attributes], true),
        ("head.dir.w".to_string(), [d, spec.force.theta_bins], false),
        ("head.dir.b".to_string(), [1, spec.force.theta_bins], true),
        ("head.sfb.w".to_string(), [d, din], false),
        ("head.sfb.b".to_string(), [1, din], true),
    ]);
    v
}

/// Xavier-uniform weights and zero biases, seeded from the `init` stream.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamStore<f32>> {
    spec.encoder.validate()?;
    spec.force.validate()?;
    let mut store = ParamStore::new();
    for (i, (name, shape, is_bias)) in param_layout(spec).into_iter().enumerate() {
        let t = if is_bias {
            Tensor::zeros(&shape)
        } else {
            let mut rng = seed::stream_rng(seed, seed::INIT, &[i as u64]);
            xavier_uniform(&mut rng, &shape, shape[0], shape[1])
        };
        store.insert(name, t);
    }
    Ok(store)
}

/// Checks that a parameter store matches the layout for `spec`.
pub fn check_params<T: Real>(spec: &ModelSpec, params: &ParamStore<T>) -> Result<()> {
    for (name, shape, _) in param_layout(spec) {
        match params.get(&name) {
            Some(t) if t.shape() == shape => {}
            Some(t) => {
                return Err(Error::Shape {
                    op: "checkpoint",
                    lhs: shape.to_vec(),
                    rhs: t.shape().to_vec(),
                })
            }
            None => return Err(Error::format("checkpoint", format!("missing tensor {name}"))),
        }
    }
    Ok(())
}

/// Crop of `window × window` pixels around the mask's bounding-box centre,
/// box-averaged down to `size × size`. Pixels outside the grid read as zero,
/// so the crop of a translated mask is identical.
pub fn mask_crop(mask: &BinaryMask, window: usize, size: usize) -> Result<Vec<f32>> {
    let (x0, y0, x1, y1) = mask.bbox().ok_or(Error::DegenerateMask)?;
    let cx = ((x0 + x1) / 2) as isize;
    let cy = ((y0 + y1) / 2) as isize;
    let ox = cx - (window / 2) as isize;
    let oy = cy - (window / 2) as isize;
    let mut out = vec![0.0f32; size * size];
    for v in 0..size {
        let (wy0, wy1) = (v * window / size, ((v + 1) * window / size).max(v * window / size + 1));
        for u in 0..size {
            let (wx0, wx1) = (u * window / size, ((u + 1) * window / size).max(u * window / size + 1));
            let mut hits = 0usize;
            for wy in wy0..wy1 {
                for wx in wx0..wx1 {
                    let (gx, gy) = (ox + wx as isize, oy + wy as isize);
                    if gx >= 0
                        && gy >= 0
                        && (gx as usize) < mask.width()
                        && (gy as usize) < mask.height()
                        && mask.get(gx as usize, gy as usize)
                    {
                        hits += 1;
                    }
                }
            }
            out[v * size + u] = hits as f32 / ((wy1 - wy0) * (wx1 - wx0)) as f32;
        }
    }
    Ok(out)
}

/// Flattened banner scaled per level by `theta_bins · length_scale^r`.
pub fn edge_input(banner: &ForceBanner, length_scale: f64) -> Vec<f32> {
    let nl = banner.levels.len();
    banner
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let r = banner.levels[i % nl];
            (v * banner.theta_bins as f64 * length_scale.powi(r as i32)) as f32
        })
        .collect()
}

/// Model-ready features of one scene.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub scene_id: String,
    pub n_objects: usize,
    /// `n_objects × crop_size²`, row-major per object.
    pub crops: Vec<f32>,
    pub labels: Vec<usize>,
    pub attributes: Vec<usize>,
    /// Undirected edges `(i, j)`, `i < j`, in key order.
    pub edges: Vec<(usize, usize)>,
    /// `edges.len() × edge_input_dim`.
    pub edge_inputs: Vec<f32>,
    /// Mean-over-edges raw banner, the descriptor-only retrieval baseline.
    pub mean_banner: Vec<f64>,
    pub dir_targets: Vec<usize>,
    /// All (capped) k-hop paths per k.
    pub paths: BTreeMap<usize, Vec<HopPath>>,
}

impl PreparedScene {
    pub fn edge_position(&self, i: usize, j: usize) -> Option<usize> {
        self.edges.binary_search(&(i.min(j), i.max(j))).ok()
    }
}

pub fn prepare_scene(
    scene: &Scene,
    spec: &ModelSpec,
    graph_config: &GraphConfig,
    k_set: &[usize],
) -> Result<PreparedScene> {
    let graph = build_graph(scene, &spec.force, graph_config)?;
    prepare_graph(scene, &graph, spec, graph_config, k_set)
}

pub fn prepare_graph(
    scene: &Scene,
    graph: &SceneGraph,
    spec: &ModelSpec,
    graph_config: &GraphConfig,
    k_set: &[usize],
) -> Result<PreparedScene> {
    let e = &spec.encoder;
    let mut crops = Vec::with_capacity(scene.objects.len() * e.crop_size * e.crop_size);
    for o in &scene.objects {
        crops.extend(mask_crop(&o.mask, e.crop_window, e.crop_size)?);
        if o.label_id >= spec.n_labels || o.attribute_id >= spec.n_attributes {
            return Err(Error::format(
                "scene",
                format!("{}: label/attribute outside model vocabulary", scene.scene_id),
            ));
        }
    }
    let mut edges = Vec::new();
    let mut edge_inputs = Vec::new();
    let mut dir_targets = Vec::new();
    let mut mean_banner = vec![0.0; spec.force.descriptor_len()];
    for (&key, banner) in &graph.edges {
        edges.push(key);
        edge_inputs.extend(edge_input(banner, e.edge_length_scale));
        dir_targets.push(dominant_direction(banner)?);
        for (m, v) in mean_banner.iter_mut().zip(&banner.values) {
            *m += v;
        }
    }
    if !edges.is_empty() {
        for m in &mut mean_banner {
            *m /= edges.len() as f64;
        }
    }
    let mut paths = BTreeMap::new();
    for &k in k_set {
        paths.insert(k, enumerate_paths_capped(graph, k, graph_config.path_cap)?);
    }
    Ok(PreparedScene {
        scene_id: scene.scene_id.clone(),
        n_objects: scene.objects.len(),
        crops,
        labels: scene.objects.iter().map(|o| o.label_id).collect(),
        attributes: scene.objects.iter().map(|o| o.attribute_id).collect(),
        edges,
        edge_inputs,
        mean_banner,
        dir_targets,
        paths,
    })
}

/// im2col indices for a 3×3, pad-1 convolution over `n` images of
/// `side × side × channels` stored as rows `(image, y, x)` with channel columns.
fn im2col_indices(n: usize, side: usize, channels: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * side * side * 9 * channels);
    for o in 0..n {
        for y in 0..side {
            for x in 0..side {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = x as isize + kx as isize - 1;
                        let inside = sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side;
                        for c in 0..channels {
                            idx.push(if inside {
                                ((o * side + sy as usize) * side + sx as usize) * channels + c
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Row targets for 2×2 average pooling of `(image, y, x)` rows.
fn pool_targets(n: usize, side: usize) -> Vec<usize> {
    let half = side / 2;
    let mut t = Vec::with_capacity(n * side * side);
    for o in 0..n {
        for y in 0..side {
            for x in 0..side {
                t.push((o * half + y / 2) * half + x / 2);
            }
        }
    }
    t
}

fn linear<T: Real>(tape: &mut Tape<T>, p: &BoundParams, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
    let y = tape.matmul(x, p.var(w)?)?;
    match b {
        Some(b) => tape.add_row(y, p.var(b)?),
        None => Ok(y),
    }
}

/// Visual embeddings `[n, embed_dim]`, unit rows (zero rows stay zero).
pub fn encode_visual<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    spec: &ModelSpec,
    crops: &[f32],
    labels: &[usize],
) -> Result<Var> {
    let e = &spec.encoder;
    let n = labels.len();
    let s = e.crop_size;
    let [c1, c2] = e.conv_channels;
    let x = tape.constant(Tensor::new(vec![n * s * s, 1], crops.iter().map(|&v| T::from_f64(v as f64)).collect())?)?;

    let cols1 = tape.gather_flat(x, &im2col_indices(n, s, 1), [n * s * s, 9])?;
    let h1 = linear(tape, p, cols1, "visual.conv1.w", Some("visual.conv1.b"))?;
    let h1 = tape.relu(h1)?;
    let pooled1 = tape.index_add_rows(h1, &pool_targets(n, s), n * (s / 2) * (s / 2))?;
    let pooled1 = tape.scale(pooled1, 0.25)?;

    let s2 = s / 2;
    let cols2 = tape.gather_flat(pooled1, &im2col_indices(n, s2, c1), [n * s2 * s2, 9 * c1])?;
    let h2 = linear(tape, p, cols2, "visual.conv2.w", Some("visual.conv2.b"))?;
    let h2 = tape.relu(h2)?;
    let pooled2 = tape.index_add_rows(h2, &pool_targets(n, s2), n * (s2 / 2) * (s2 / 2))?;
    let pooled2 = tape.scale(pooled2, 0.25)?;
    let conv_feat = tape.reshape(pooled2, [n, (s2 / 2) * (s2 / 2) * c2])?;

    let label_emb = tape.gather_rows(p.var("visual.label_embed")?, labels)?;
    let feat = tape.concat_cols(&[conv_feat, label_emb])?;
    let raw = linear(tape, p, feat, "visual.proj.w", Some("visual.proj.b"))?;
    tape.l2_normalize(raw, NORM_EPS)
}

/// Edge embeddings `f(F)`, `[E, embed_dim]`.
pub fn embed_edges<T: Real>(tape: &mut Tape<T>, p: &BoundParams, spec: &ModelSpec, inputs: &[f32]) -> Result<Var> {
    let din = spec.edge_input_dim();
    if inputs.len() % din != 0 {
        return Err(Error::Shape {
            op: "embed_edge",
            lhs: vec![inputs.len()],
            rhs: vec![din],
        });
    }
    let x = tape.constant(Tensor::new(
        vec![inputs.len() / din, din],
        inputs.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )?)?;
    let h = linear(tape, p, x, "edge.w1", Some("edge.b1"))?;
    let h = tape.relu(h)?;
    linear(tape, p, h, "edge.w2", Some("edge.b2"))
}

/// A directed message `j → i` carried by edge row `edge`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Message {
    pub target: usize,
    pub source: usize,
    pub edge: usize,
}

/// One force-gated message-passing layer over `h` (`[n, d]`).
pub fn message_passing_layer<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    layer: usize,
    h: Var,
    edge_emb: Var,
    messages: &[Message],
) -> Result<Var> {
    let n = tape.shape(h)[0];
    let self_term = tape.matmul(h, p.var(&format!("gnn.{layer}.w1"))?)?;
    let transformed = tape.matmul(h, p.var(&format!("gnn.{layer}.w2"))?)?;
    let src: Vec<usize> = messages.iter().map(|m| m.source).collect();
    let eidx: Vec<usize> = messages.iter().map(|m| m.edge).collect();
    let tgt: Vec<usize> = messages.iter().map(|m| m.target).collect();
    let from = tape.gather_rows(transformed, &src)?;
    let gate = tape.gather_rows(edge_emb, &eidx)?;
    let gated = tape.mul(from, gate)?;
    let agg = tape.index_add_rows(gated, &tgt, n)?;
    let pre = tape.add(self_term, agg)?;
    tape.relu(pre)
}

/// Path embeddings `[P, projection_dim]`, unit rows. Each path is given as
/// global node rows and global edge rows.
pub fn embed_paths<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    nodes: Var,
    edge_emb: Var,
    paths: &[(Vec<usize>, Vec<usize>)],
) -> Result<Var> {
    let d = tape.shape(nodes)[1];
    let np = paths.len();
    let mut node_rows = Vec::new();
    let mut node_tgt = Vec::new();
    let mut edge_rows = Vec::new();
    let mut edge_tgt = Vec::new();
    let mut node_scale = Vec::with_capacity(np * d);
    let mut edge_scale = Vec::with_capacity(np * d);
    for (pi, (ns, es)) in paths.iter().enumerate() {
        if es.is_empty() || ns.len() != es.len() + 1 {
            return Err(Error::format("path", format!("inconsistent path with {} nodes, {} edges", ns.len(), es.len())));
        }
        node_rows.extend_from_slice(ns);
        node_tgt.extend(std::iter::repeat(pi).take(ns.len()));
        edge_rows.extend_from_slice(es);
        edge_tgt.extend(std::iter::repeat(pi).take(es.len()));
        node_scale.extend(std::iter::repeat(T::from_f64(1.0 / ns.len() as f64)).take(d));
        edge_scale.extend(std::iter::repeat(T::from_f64(1.0 / es.len() as f64)).take(d));
    }
    let gn = tape.gather_rows(nodes, &node_rows)?;
    let sn = tape.index_add_rows(gn, &node_tgt, np)?;
    let ns = tape.constant(Tensor::new(vec![np, d], node_scale)?)?;
    let mean_nodes = tape.mul(sn, ns)?;
    let ge = tape.gather_rows(edge_emb, &edge_rows)?;
    let se = tape.index_add_rows(ge, &edge_tgt, np)?;
    let es = tape.constant(Tensor::new(vec![np, d], edge_scale)?)?;
    let mean_edges = tape.mul(se, es)?;
    let cat = tape.concat_cols(&[mean_nodes, mean_edges])?;
    let proj = linear(tape, p, cat, "path.w", Some("path.b"))?;
    tape.l2_normalize(proj, NORM_EPS)
}

/// A path sampled for a batch, tied to its scene.
#[derive(Debug, Clone)]
pub struct BatchPath {
    pub scene: usize,
    pub path: HopPath,
}

/// Tape handles for an encoded batch of scenes.
#[derive(Debug, Clone)]
pub struct BatchEncoding {
    /// Global row of each scene's object 0.
    pub node_offsets: Vec<usize>,
    /// Global row of each scene's first edge.
    pub edge_offsets: Vec<usize>,
    /// `h⁽⁰⁾`, `[N, d]`.
    pub visual: Var,
    /// `h⁽ᴸ⁾`, `[N, d]`.
    pub nodes: Var,
    /// `f(F)`, `[E, d]`.
    pub edges: Var,
    /// `u_p`, `[P, proj]`, present when paths were supplied.
    pub paths: Option<Var>,
    /// Global node row of each path's anchor endpoint.
    pub path_anchors: Vec<usize>,
    /// Global endpoint rows of every edge.
    pub edge_endpoints: Vec<(usize, usize)>,
    pub n_nodes: usize,
}

/// Runs the visual, edge, message-passing and path encoders over a batch.
pub fn encode_batch<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    spec: &ModelSpec,
    scenes: &[&PreparedScene],
    paths: &[BatchPath],
) -> Result<BatchEncoding> {
    let mut node_offsets = Vec::with_capacity(scenes.len());
    let mut edge_offsets = Vec::with_capacity(scenes.len());
    let mut crops = Vec::new();
    let mut labels = Vec::new();
    let mut edge_inputs = Vec::new();
    let mut edge_endpoints = Vec::new();
    let mut messages = Vec::new();
    let (mut n, mut e) = (0usize, 0usize);
    for s in scenes {
        node_offsets.push(n);
        edge_offsets.push(e);
        crops.extend_from_slice(&s.crops);
        labels.extend_from_slice(&s.labels);
        edge_inputs.extend_from_slice(&s.edge_inputs);
        for (k, &(i, j)) in s.edges.iter().enumerate() {
            edge_endpoints.push((n + i, n + j));
            messages.push(Message { target: n + i, source: n + j, edge: e + k });
            messages.push(Message { target: n + j, source: n + i, edge: e + k });
        }
        n += s.n_objects;
        e += s.edges.len();
    }
    messages.sort_unstable();

    let visual = encode_visual(tape, p, spec, &crops, &labels)?;
    let edges = embed_edges(tape, p, spec, &edge_inputs)?;
    let mut h = visual;
    for l in 0..spec.encoder.gnn_layers {
        h = message_passing_layer(tape, p, l, h, edges, &messages)?;
    }

    let mut path_anchors = Vec::with_capacity(paths.len());
    let mut specs = Vec::with_capacity(paths.len());
    for bp in paths {
        let s = scenes[bp.scene];
        let off = node_offsets[bp.scene];
        let mut erows = Vec::with_capacity(bp.path.k());
        for (i, j) in bp.path.edges() {
            let pos = s
                .edge_position(i, j)
                .ok_or_else(|| Error::format("path", format!("{}: edge ({i},{j}) missing", s.scene_id)))?;
            erows.push(edge_offsets[bp.scene] + pos);
        }
        if bp.path.nodes.iter().any(|&v| v >= s.n_objects) {
            return Err(Error::format("path", format!("{}: node out of range", s.scene_id)));
        }
        path_anchors.push(off + bp.path.anchor());
        specs.push((bp.path.nodes.iter().map(|&v| off + v).collect(), erows));
    }
    let path_var = if specs.is_empty() {
        None
    } else {
        Some(embed_paths(tape, p, h, edges, &specs)?)
    };
    Ok(BatchEncoding {
        node_offsets,
        edge_offsets,
        visual,
        nodes: h,
        edges,
        paths: path_var,
        path_anchors,
        edge_endpoints,
        n_nodes: n,
    })
}

fn frozen_rows(tape: &Tape<f32>, v: Var) -> Vec<Vec<f32>> {
    let t = tape.value(v);
    (0..t.shape()[0]).map(|r| t.row(r).to_vec()).collect()
}

/// Visual embedding of one object (inference with the image encoder alone).
pub fn encode_object_visual(
    scene: &Scene,
    object_id: usize,
    params: &ParamStore<f32>,
    spec: &ModelSpec,
) -> Result<Vec<f32>> {
    let o = scene
        .objects
        .get(object_id)
        .ok_or_else(|| Error::format("scene", format!("no object {object_id}")))?;
    let crop = mask_crop(&o.mask, spec.encoder.crop_window, spec.encoder.crop_size)?;
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape)?;
    let v = encode_visual(&mut tape, &p, spec, &crop, &[o.label_id])?;
    Ok(frozen_rows(&tape, v).remove(0))
}

/// `f(F)` for a single banner.
pub fn embed_edge(banner: &ForceBanner, params: &ParamStore<f32>, spec: &ModelSpec) -> Result<Vec<f32>> {
    if banner.values.len() != spec.edge_input_dim() {
        return Err(Error::Shape {
            op: "embed_edge",
            lhs: vec![banner.values.len()],
            rhs: vec![spec.edge_input_dim()],
        });
    }
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape)?;
    let v = embed_edges(&mut tape, &p, spec, &edge_input(banner, spec.encoder.edge_length_scale))?;
    Ok(frozen_rows(&tape, v).remove(0))
}

/// Frozen per-scene embeddings used for export and evaluation.
#[derive(Debug, Clone)]
pub struct SceneEmbeddings {
    pub visual: Vec<Vec<f32>>,
    pub nodes: Vec<Vec<f32>>,
    pub paths: Vec<(HopPath, Vec<f32>)>,
}

/// Encodes one scene with frozen parameters, embedding every prepared path.
pub fn embed_scene(params: &ParamStore<f32>, spec: &ModelSpec, scene: &PreparedScene) -> Result<SceneEmbeddings> {
    let mut tape = Tape::new();
    let p = params.bind_frozen(&mut tape)?;
    let paths: Vec<BatchPath> = scene
        .paths
        .values()
        .flatten()
        .map(|path| BatchPath { scene: 0, path: path.clone() })
        .collect();
    let enc = encode_batch(&mut tape, &p, spec, &[scene], &paths)?;
    let path_rows = enc.paths.map(|v| frozen_rows(&tape, v)).unwrap_or_default();
    Ok(SceneEmbeddings {
        visual: frozen_rows(&tape, enc.visual),
        nodes: frozen_rows(&tape, enc.nodes),
        paths: paths.into_iter().map(|bp| bp.path).zip(path_rows).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneGenConfig};

    fn spec() -> ModelSpec {
        ModelSpec {
            encoder: EncoderConfig {
                embed_dim: 8,
                f_hidden: 8,
                projection_dim: 6,
                ..EncoderConfig::default()
            },
            force: ForceConfig::new(8, &[0, 2]),
            n_labels: 3,
            n_attributes: 3,
        }
    }

    fn prepared(seed: u64) -> (Scene, PreparedScene) {
        let cfg = SceneGenConfig {
            objects_min: 4,
            objects_max: 4,
            ..SceneGenConfig::default()
        };
        let scene = generate_scene(seed, "t", &cfg).unwrap();
        let p = prepare_scene(&scene, &spec(), &GraphConfig::default(), &[2, 3]).unwrap();
        (scene, p)
    }

    #[test]
    fn init_is_seeded_and_matches_layout() {
        let s = spec();
        let a = init_params(&s, 3).unwrap();
        assert_eq!(a, init_params(&s, 3).unwrap());
        assert_ne!(a, init_params(&s, 4).unwrap());
        check_params(&s, &a).unwrap();
        assert!(a.get("visual.proj.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_is_translation_invariant() {
        let m = BinaryMask::from_pixels(64, 64, &[(10, 10), (11, 10), (12, 11), (10, 12)]).unwrap();
        let t = m.translated(17, 23).unwrap();
        assert_eq!(mask_crop(&m, 32, 16).unwrap(), mask_crop(&t, 32, 16).unwrap());
        let c = mask_crop(&m, 32, 16).unwrap();
        assert!((c.iter().sum::<f32>() * 4.0 - 4.0).abs() < 1e-6);
        assert!(matches!(mask_crop(&BinaryMask::empty(8, 8), 32, 16), Err(Error::DegenerateMask)));
    }

    #[test]
    fn batch_shapes_and_unit_rows() {
        let s = spec();
        let params = init_params(&s, 1).unwrap();
        let (_, p) = prepared(5);
        let paths: Vec<BatchPath> = p.paths[&3]
            .iter()
            .take(3)
            .map(|path| BatchPath { scene: 0, path: path.clone() })
            .collect();
        let mut tape = Tape::<f32>::new();
        let b = params.bind_frozen(&mut tape).unwrap();
        let enc = encode_batch(&mut tape, &b, &s, &[&p, &p], &paths).unwrap();
        assert_eq!(tape.shape(enc.visual), &[8, 8]);
        assert_eq!(tape.shape(enc.nodes), &[8, 8]);
        assert_eq!(tape.shape(enc.edges), &[12, 8]);
        let u = tape.value(enc.paths.unwrap());
        assert_eq!(u.shape(), &[3, 6]);
        for r in 0..3 {
            let n: f32 = u.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_parameters_give_zero_embeddings() {
        let s = spec();
        let mut params = init_params(&s, 1).unwrap();
        for t in params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let (_, p) = prepared(2);
        let e = embed_scene(&params, &s, &p).unwrap();
        assert!(e.nodes.iter().flatten().all(|&v| v == 0.0));
        assert!(e.paths.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn path_embedding_ignores_direction() {
        let s = spec();
        let params = init_params(&s, 9).unwrap();
        let (_, p) = prepared(4);
        let path = p.paths[&2][0].clone();
        let mut reversed = path.clone();
        reversed.nodes.reverse();
        let mut tape = Tape::<f64>::new();
        let b = params.cast::<f64>().bind_frozen(&mut tape).unwrap();
        let bp = |path: HopPath| BatchPath { scene: 0, path };
        let enc = encode_batch(&mut tape, &b, &s, &[&p], &[bp(path), bp(reversed)]).unwrap();
        let u = tape.value(enc.paths.unwrap());
        for (x, y) in u.row(0).iter().zip(u.row(1)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn message_passing_matches_dense_oracle() {
        let d = 3;
        let mut store = ParamStore::<f64>::new();
        let w1: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let w2: Vec<f64> = (0..9).map(|i| (i as f64 * 0.91).cos()).collect();
        store.insert("gnn.0.w1", Tensor::new(vec![d, d], w1.clone()).unwrap());
        store.insert("gnn.0.w2", Tensor::new(vec![d, d], w2.clone()).unwrap());
        let h: Vec<f64> = (0..9).map(|i| 0.3 * i as f64 - 1.0).collect();
        let f: Vec<f64> = (0..6).map(|i| 0.5 - 0.2 * i as f64).collect();
        // Path graph 0-1-2 with edges e0=(0,1), e1=(1,2).
        let msgs = [
            Message { target: 0, source: 1, edge: 0 },
            Message { target: 1, source: 0, edge: 0 },
            Message { target: 1, source: 2, edge: 1 },
            Message { target: 2, source: 1, edge: 1 },
        ];
        let mut tape = Tape::new();
        let b = store.bind_frozen(&mut tape).unwrap();
        let hv = tape.constant(Tensor::new(vec![3, d], h.clone()).unwrap()).unwrap();
        let fv = tape.constant(Tensor::new(vec![2, d], f.clone()).unwrap()).unwrap();
        let out = message_passing_layer(&mut tape, &b, 0, hv, fv, &msgs).unwrap();
        let got = tape.value(out).data().to_vec();

        let mv = |x: &[f64], w: &[f64], c: usize| (0..d).map(|m| x[m] * w[m * d + c]).sum::<f64>();
        for i in 0..3 {
            for c in 0..d {
                let mut acc = mv(&h[i * d..], &w1, c);
                for m in &msgs {
                    if m.target == i {
                        acc += mv(&h[m.source * d..], &w2, c) * f[m.edge * d + c];
                    }
                }
                assert!((got[i * d + c] - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_edge_helpers_agree_with_batch() {
        let s = spec();
        let params = init_params(&s, 2).unwrap();
        let (scene, p) = prepared(6);
        let e = embed_scene(&params, &s, &p).unwrap();
        let v = encode_object_visual(&scene, 1, &params, &s).unwrap();
        for (a, b) in v.iter().zip(&e.visual[1]) {
            assert!((a - b).abs() < 1e-6);
        }
        let g = build_graph(&scene, &s.force, &GraphConfig::default()).unwrap();
        let f = embed_edge(g.banner(0, 1).unwrap(), &params, &s).unwrap();
        assert_eq!(f.len(), 8);
    }
}
