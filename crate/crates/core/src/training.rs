//! Multi-level contrastive objective and the epoch loop.
//!
//! Six components are computed per batch of scenes:
//!
//! | component | definition |
//! |-----------|------------|
//! | node  | bidirectional InfoNCE, projected visual embedding ↔ projected final node state |
//! | edge  | bidirectional InfoNCE, projected endpoint visual pair ↔ projected edge embedding |
//! | graph | bidirectional InfoNCE, projected anchor visual embedding ↔ path embedding |
//! | attr  | smoothed cross-entropy, final node state → attribute id |
//! | dir   | smoothed cross-entropy, edge embedding → dominant direction bin |
//! | sfb   | mean squared error of a linear banner reconstruction from the edge embedding |
//!
//! `total = Σ w_c · L_c`, with weights rescaled by `Σ w / Σ_{present} w` when a
//! component has no targets in a batch.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::encoders::{encode_batch, init_params, BatchEncoding, BatchPath, ModelSpec, PreparedScene, NORM_EPS};
use crate::error::{Error, Result};
use crate::graph::sample_from;
use crate::seed;
use crate::tensor::{AdamWConfig, AdamWState, BoundParams, Gradients, ParamStore, Real, Tape, Tensor, Var};

pub const COMPONENTS: [&str; 6] = ["node", "edge", "graph", "attr", "dir", "sfb"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub node: f64,
    pub edge: f64,
    pub graph: f64,
    pub attr: f64,
    pub dir: f64,
    pub sfb: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            node: 1.0,
            edge: 1.0,
            graph: 1.0,
            attr: 1.0,
            dir: 1.0,
            sfb: 1.0,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 6] {
        [self.node, self.edge, self.graph, self.attr, self.dir, self.sfb]
    }

    /// Effective weights when only `present` components are available.
    pub fn renormalized(&self, present: [bool; 6]) -> Result<[f64; 6]> {
        let w = self.as_array();
        let all: f64 = w.iter().sum();
        let avail: f64 = w.iter().zip(present).filter(|(_, p)| *p).map(|(w, _)| w).sum();
        if !(avail > 0.0) {
            return Err(Error::Config("no weighted loss component has targets".into()));
        }
        let mut out = [0.0; 6];
        for c in 0..6 {
            if present[c] {
                out[c] = w[c] * all / avail;
            }
        }
        if present.iter().zip(w).any(|(p, w)| !p && w != 0.0) {
            let missing: Vec<&str> = (0..6).filter(|&c| !present[c] && w[c] != 0.0).map(|c| COMPONENTS[c]).collect();
            log::warn!("loss components without targets: {}; weights renormalized", missing.join(","));
        }
        Ok(out)
    }
}

/// Per-component losses and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub node: f64,
    pub edge: f64,
    pub graph: f64,
    pub attr: f64,
    pub dir: f64,
    pub sfb: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_components(c: [f64; 6], weights: [f64; 6]) -> Self {
        let total = c.iter().zip(weights).map(|(c, w)| c * w).sum();
        Self {
            node: c[0],
            edge: c[1],
            graph: c[2],
            attr: c[3],
            dir: c[4],
            sfb: c[5],
            total,
        }
    }

    pub fn components(&self) -> [f64; 6] {
        [self.node, self.edge, self.graph, self.attr, self.dir, self.sfb]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    pub lr: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub k_set: Vec<usize>,
    /// Paths sampled per (scene, k) each epoch.
    pub path_budget: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 3e-4,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            weight_decay: 0.01,
            label_smoothing: 0.3,
            k_set: vec![2, 3],
            path_budget: 4,
            weights: LossWeights::default(),
            seed: 7,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1e-5..=1e-3).contains(&self.lr) {
            return bad(format!("train.lr {} outside [1e-5, 1e-3]", self.lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("train.label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.batch_size == 0 || self.path_budget == 0 {
            return bad("train.batch_size and train.path_budget must be >= 1".into());
        }
        if self.k_set.is_empty() || self.k_set.iter().any(|&k| k < 2) {
            return bad(format!("train.k_set {:?} must be non-empty with k >= 2", self.k_set));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("train.val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if self.weights.as_array().iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad("train.weights must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Mean over rows of the cross-entropy between `softmax(logits)` and
/// `(1 − ε)·one_hot(target) + ε/C`.
pub fn soft_cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (n, c) = (shape[0], shape[1]);
    if n == 0 || c == 0 {
        return Err(Error::EmptyBatch);
    }
    if targets.len() != n || targets.iter().any(|&t| t >= c) {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let mut dist = vec![T::from_f64(eps / c as f64); n * c];
    for (r, &t) in targets.iter().enumerate() {
        dist[r * c + t] = T::from_f64(1.0 - eps + eps / c as f64);
    }
    let dist = tape.constant(Tensor::new(vec![n, c], dist)?)?;
    let lse = tape.logsumexp_rows(logits)?;
    let lse_mean = tape.mean(lse)?;
    let weighted = tape.mul(dist, logits)?;
    let weighted = tape.sum(weighted)?;
    let weighted = tape.scale(weighted, 1.0 / n as f64)?;
    tape.sub(lse_mean, weighted)
}

/// InfoNCE over a square similarity matrix whose diagonal holds the positives.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, sim: Var, tau: f64, eps: f64) -> Result<Var> {
    let shape = tape.shape(sim).to_vec();
    if shape[0] != shape[1] {
        return Err(Error::Shape {
            op: "info_nce",
            lhs: shape.clone(),
            rhs: shape,
        });
    }
    if shape[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    let logits = tape.scale(sim, 1.0 / tau)?;
    let diag: Vec<usize> = (0..shape[0]).collect();
    soft_cross_entropy(tape, logits, &diag, eps)
}

/// `info_nce(cos(V, U)) + info_nce(cos(U, V))` over row-aligned pairs.
pub fn graph_loss<T: Real>(tape: &mut Tape<T>, v: Var, u: Var, tau: f64, eps: f64) -> Result<Var> {
    if tape.shape(v)[0] < 2 {
        log::warn!("contrastive loss over fewer than 2 pairs has no negatives");
    }
    let vu = tape.cosine_similarity(v, u, NORM_EPS)?;
    let uv = tape.transpose(vu)?;
    let a = info_nce(tape, vu, tau, eps)?;
    let b = info_nce(tape, uv, tau, eps)?;
    tape.add(a, b)
}

/// Loss handles for one encoded batch.
#[derive(Debug, Clone)]
pub struct ComponentLosses {
    /// `None` for components without targets in the batch.
    pub vars: [Option<Var>; 6],
    pub values: [Option<f64>; 6],
    pub weights: [f64; 6],
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Targets gathered from the scenes of a batch, in encoding order.
fn batch_targets(scenes: &[&PreparedScene]) -> (Vec<usize>, Vec<usize>, Vec<f32>) {
    let attrs = scenes.iter().flat_map(|s| s.attributes.iter().copied()).collect();
    let dirs = scenes.iter().flat_map(|s| s.dir_targets.iter().copied()).collect();
    let banners = scenes.iter().flat_map(|s| s.edge_inputs.iter().copied()).collect();
    (attrs, dirs, banners)
}

fn head<T: Real>(tape: &mut Tape<T>, p: &BoundParams, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
    let y = tape.matmul(x, p.var(w)?)?;
    match b {
        Some(b) => tape.add_row(y, p.var(b)?),
        None => Ok(y),
    }
}

/// Computes all six components and the weighted total for an encoded batch.
pub fn component_losses<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    scenes: &[&PreparedScene],
    enc: &BatchEncoding,
) -> Result<ComponentLosses> {
    let tau = spec.encoder.temperature;
    let eps = cfg.label_smoothing;
    let (attrs, dirs, banners) = batch_targets(scenes);
    let n_edges = dirs.len();
    let mut vars: [Option<Var>; 6] = [None; 6];

    if enc.n_nodes > 0 {
        let v = head(tape, p, enc.visual, "head.visual_proj.w", None)?;
        let g = head(tape, p, enc.nodes, "head.node_proj.w", None)?;
        vars[0] = Some(graph_loss(tape, v, g, tau, eps)?);

        let logits = head(tape, p, enc.nodes, "head.attr.w", Some("head.attr.b"))?;
        vars[3] = Some(soft_cross_entropy(tape, logits, &attrs, eps)?);

        if let Some(u) = enc.paths {
            let anchors = tape.gather_rows(enc.visual, &enc.path_anchors)?;
            let va = head(tape, p, anchors, "head.visual_proj.w", None)?;
            vars[2] = Some(graph_loss(tape, va, u, tau, eps)?);
        }
    }
    if n_edges > 0 {
        let (left, right): (Vec<usize>, Vec<usize>) = enc.edge_endpoints.iter().copied().unzip();
        let hl = tape.gather_rows(enc.visual, &left)?;
        let hr = tape.gather_rows(enc.visual, &right)?;
        let pair = tape.concat_cols(&[hl, hr])?;
        let pv = head(tape, p, pair, "head.pair_visual_proj.w", None)?;
        let pe = head(tape, p, enc.edges, "head.edge_proj.w", None)?;
        vars[1] = Some(graph_loss(tape, pv, pe, tau, eps)?);

        let logits = head(tape, p, enc.edges, "head.dir.w", Some("head.dir.b"))?;
        vars[4] = Some(soft_cross_entropy(tape, logits, &dirs, eps)?);

        let recon = head(tape, p, enc.edges, "head.sfb.w", Some("head.sfb.b"))?;
        let din = spec.edge_input_dim();
        let target = tape.constant(Tensor::new(
            vec![n_edges, din],
            banners.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )?)?;
        let diff = tape.sub(recon, target)?;
        let sq = tape.mul(diff, diff)?;
        vars[5] = Some(tape.mean(sq)?);
    }

    let present = vars.map(|v| v.is_some());
    let weights = cfg.weights.renormalized(present)?;
    let mut values = [None; 6];
    let mut comps = [0.0; 6];
    let mut total: Option<Var> = None;
    for c in 0..6 {
        let Some(var) = vars[c] else { continue };
        let value = tape.value(var).item()?;
        if !value.is_finite() {
            return Err(Error::Diverged(COMPONENTS[c].to_string()));
        }
        values[c] = Some(value);
        comps[c] = value;
        if weights[c] != 0.0 {
            let term = tape.scale(var, weights[c])?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    let total = total.ok_or_else(|| Error::Config("no weighted loss component has targets".into()))?;
    Ok(ComponentLosses {
        vars,
        values,
        weights,
        total,
        breakdown: LossBreakdown::from_components(comps, weights),
    })
}

/// Encodes a batch and evaluates every loss component.
pub fn forward_losses<T: Real>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    scenes: &[&PreparedScene],
    paths: &[BatchPath],
) -> Result<ComponentLosses> {
    let enc = encode_batch(tape, p, spec, scenes, paths)?;
    component_losses(tape, p, spec, cfg, scenes, &enc)
}

fn derived_seed(seed: u64, parts: &[u64]) -> u64 {
    let s = seed::stream_seed(seed, seed::SAMPLING, parts);
    u64::from_le_bytes(s[..8].try_into().unwrap())
}

/// Paths for the scenes of a batch; scenes lacking k-hop paths are skipped
/// for that k.
pub fn sample_batch_paths(scenes: &[&PreparedScene], cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<BatchPath>> {
    let mut out = Vec::new();
    for (si, (s, &sd)) in scenes.iter().zip(seeds).enumerate() {
        for &k in &cfg.k_set {
            let all = s.paths.get(&k).cloned().unwrap_or_default();
            match sample_from(all, k, cfg.path_budget, sd) {
                Ok(ps) => out.extend(ps.into_iter().map(|path| BatchPath { scene: si, path })),
                Err(Error::NoPaths) => {}
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}

/// Running per-component means.
#[derive(Debug, Clone, Default)]
pub struct LossAccumulator {
    sums: [f64; 6],
    counts: [usize; 6],
}

impl LossAccumulator {
    pub fn add(&mut self, values: &[Option<f64>; 6]) {
        for c in 0..6 {
            if let Some(v) = values[c] {
                self.sums[c] += v;
                self.counts[c] += 1;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    /// Per-component means; the total is recomputed from them with the
    /// weights renormalized over components seen at least once.
    pub fn finish(&self, weights: &LossWeights) -> Result<LossBreakdown> {
        let present = self.counts.map(|c| c > 0);
        let w = weights.renormalized(present)?;
        let mut comps = [0.0; 6];
        for c in 0..6 {
            if self.counts[c] > 0 {
                comps[c] = self.sums[c] / self.counts[c] as f64;
            }
        }
        Ok(LossBreakdown::from_components(comps, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
}

/// CSV with `epoch`, then `train_<c>` and `val_<c>` for the six components
/// and `total`. Missing validation rows leave their cells empty.
pub fn loss_table_csv(history: &[EpochRecord]) -> String {
    let cols: Vec<&str> = COMPONENTS.iter().copied().chain(["total"]).collect();
    let mut out = String::from("epoch");
    for side in ["train", "val"] {
        for c in &cols {
            let _ = write!(out, ",{side}_{c}");
        }
    }
    out.push('\n');
    for r in history {
        let _ = write!(out, "{}", r.epoch);
        let row = |b: &LossBreakdown| {
            let mut v = b.components().to_vec();
            v.push(b.total);
            v
        };
        for v in row(&r.train) {
            let _ = write!(out, ",{v:.6}");
        }
        match &r.val {
            Some(b) => {
                for v in row(b) {
                    let _ = write!(out, ",{v:.6}");
                }
            }
            None => out.push_str(&",".repeat(cols.len())),
        }
        out.push('\n');
    }
    out
}

/// Parses a table written by [`loss_table_csv`].
pub fn parse_loss_table(text: &str) -> Result<Vec<EpochRecord>> {
    let bad = |d: String| Error::format("loss table", d);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    if header.split(',').count() != 15 {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 15 {
            return Err(bad(format!("row {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("cell {s:?}")));
        let block = |cs: &[&str]| -> Result<LossBreakdown> {
            let v: Vec<f64> = cs.iter().map(|c| num(c)).collect::<Result<_>>()?;
            Ok(LossBreakdown {
                node: v[0],
                edge: v[1],
                graph: v[2],
                attr: v[3],
                dir: v[4],
                sfb: v[5],
                total: v[6],
            })
        };
        let epoch = cells[0].parse().map_err(|_| bad(format!("epoch {:?}", cells[0])))?;
        let val = if cells[8..].iter().all(|c| c.is_empty()) {
            None
        } else {
            Some(block(&cells[8..])?)
        };
        out.push(EpochRecord {
            epoch,
            train: block(&cells[1..8])?,
            val,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ParamStore<f32>,
    pub optimizer: AdamWState,
    pub history: Vec<EpochRecord>,
}

/// Parameters, optimizer state and the record of the epoch just finished
/// (`None` for the initial state).
pub struct EpochState<'a> {
    pub epoch: usize,
    pub params: &'a ParamStore<f32>,
    pub optimizer: &'a AdamWState,
    pub record: Option<&'a EpochRecord>,
}

/// Mean losses over `scenes` with fixed path sampling and frozen parameters.
pub fn evaluate_losses(
    params: &ParamStore<f32>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    scenes: &[&PreparedScene],
    scene_keys: &[usize],
) -> Result<Option<LossBreakdown>> {
    let mut acc = LossAccumulator::default();
    for (chunk, keys) in scenes.chunks(cfg.batch_size).zip(scene_keys.chunks(cfg.batch_size)) {
        let seeds: Vec<u64> = keys.iter().map(|&k| derived_seed(cfg.seed, &[2, k as u64])).collect();
        let paths = sample_batch_paths(chunk, cfg, &seeds)?;
        let mut tape = Tape::<f32>::new();
        let p = params.bind_frozen(&mut tape)?;
        let losses = forward_losses(&mut tape, &p, spec, cfg, chunk, &paths)?;
        acc.add(&losses.values);
    }
    if acc.is_empty() {
        return Ok(None);
    }
    acc.finish(&cfg.weights).map(Some)
}

/// Trains from a fresh initialization seeded by `cfg.seed`. `on_epoch` runs
/// once before the first epoch and after every epoch.
pub fn train(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    scenes: &[PreparedScene],
    split: &Split,
    on_epoch: impl FnMut(EpochState<'_>) -> Result<()>,
) -> Result<TrainRun> {
    let params = init_params(spec, cfg.seed)?;
    train_from(spec, cfg, scenes, split, params, on_epoch)
}

pub fn train_from(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    scenes: &[PreparedScene],
    split: &Split,
    mut params: ParamStore<f32>,
    mut on_epoch: impl FnMut(EpochState<'_>) -> Result<()>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let adam = cfg.adamw();
    let mut opt = AdamWState::new(&params);
    let mut history = Vec::with_capacity(cfg.epochs);
    on_epoch(EpochState {
        epoch: 0,
        params: &params,
        optimizer: &opt,
        record: None,
    })?;
    if cfg.epochs > 0 && split.train.is_empty() {
        return Err(Error::InsufficientCorpus { have: 0, need: 1 });
    }
    let val_scenes: Vec<&PreparedScene> = split.val.iter().map(|&i| &scenes[i]).collect();

    for epoch in 1..=cfg.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut seed::stream_rng(cfg.seed, seed::SAMPLING, &[0, epoch as u64]));
        let mut acc = LossAccumulator::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedScene> = chunk.iter().map(|&i| &scenes[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derived_seed(cfg.seed, &[1, epoch as u64, i as u64]))
                .collect();
            let paths = sample_batch_paths(&batch, cfg, &seeds)?;
            let mut tape = Tape::<f32>::new();
            let bound = params.bind(&mut tape)?;
            let losses = forward_losses(&mut tape, &bound, spec, cfg, &batch, &paths)?;
            let grads = tape.backward(losses.total)?;
            let grads = Gradients::collect(&params, &bound, grads);
            crate::tensor::adamw_step(&mut params, &grads, &mut opt, &adam)?;
            acc.add(&losses.values);
        }
        let train = acc.finish(&cfg.weights)?;
        let val = evaluate_losses(&params, spec, cfg, &val_scenes, &split.val)?;
        log::info!(
            "epoch {epoch}: train total {:.6}{}",
            train.total,
            val.map(|v| format!(", val total {:.6}", v.total)).unwrap_or_default()
        );
        history.push(EpochRecord { epoch, train, val });
        on_epoch(EpochState {
            epoch,
            params: &params,
            optimizer: &opt,
            record: history.last(),
        })?;
    }
    Ok(TrainRun {
        params,
        optimizer: opt,
        history,
    })
}
