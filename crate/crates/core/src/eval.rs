//! Retrieval (NDCG@k), linear probing of pair embeddings and embedding export.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{embed_scene, ModelSpec, PreparedScene, SceneEmbeddings};
use crate::error::{Error, Result};
use crate::scene::{Relation, Scene};
use crate::seed;
use crate::tensor::ParamStore;

/// Fewest held-out scenes a retrieval evaluation accepts.
pub const MIN_CBGR_SCENES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_k: usize,
    pub probe_seeds: Vec<u64>,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub probe_l2: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            probe_seeds: vec![0, 1, 2, 3, 4],
            probe_epochs: 30,
            probe_lr: 0.01,
            probe_batch: 64,
            probe_l2: 1e-4,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.probe_epochs == 0 || self.probe_batch == 0 || self.probe_seeds.is_empty() {
            return Err(Error::Config("eval.top_k, probe_epochs, probe_batch and probe_seeds must be non-empty".into()));
        }
        if !(self.probe_lr > 0.0) || !(self.probe_l2 >= 0.0) {
            return Err(Error::Config("eval.probe_lr must be > 0 and probe_l2 >= 0".into()));
        }
        Ok(())
    }
}

/// Discounted cumulative gain of the first `k` gains, `Σ rel_i / log₂(i + 1)`.
pub fn dcg_at_k(gains: &[f64], k: usize) -> f64 {
    gains.iter().take(k).enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum()
}

/// `DCG(ranked) / DCG(ideal sorted descending)`; `0` when the ideal DCG is 0.
pub fn ndcg_at_k(ranked: &[f64], ideal: &[f64], k: usize) -> f64 {
    let mut ideal = ideal.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg_at_k(&ideal, k);
    if idcg <= 0.0 {
        return 0.0;
    }
    dcg_at_k(ranked, k) / idcg
}

/// `(subject label, relation, object label)` multiset of a scene's oracle.
pub fn relation_multiset(scene: &Scene) -> BTreeMap<(usize, usize, usize), usize> {
    let mut m = BTreeMap::new();
    for t in &scene.oracle_relations {
        let key = (
            scene.objects[t.subject].label_id,
            t.relation.id(),
            scene.objects[t.object].label_id,
        );
        *m.entry(key).or_insert(0) += 1;
    }
    m
}

/// Multiset Jaccard `Σ min / Σ max`; two empty multisets score 1.
pub fn multiset_jaccard<K: Ord>(a: &BTreeMap<K, usize>, b: &BTreeMap<K, usize>) -> f64 {
    let keys: BTreeSet<&K> = a.keys().chain(b.keys()).collect();
    let (mut inter, mut union) = (0usize, 0usize);
    for k in keys {
        let (x, y) = (a.get(k).copied().unwrap_or(0), b.get(k).copied().unwrap_or(0));
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Graded relevance from a Jaccard score: 3 at ≥ 0.8, 2 at ≥ 0.5, 1 at ≥ 0.2.
pub fn grade(jaccard: f64) -> u8 {
    match jaccard {
        j if j >= 0.8 => 3,
        j if j >= 0.5 => 2,
        j if j >= 0.2 => 1,
        _ => 0,
    }
}

pub fn relevance(a: &Scene, b: &Scene) -> u8 {
    grade(multiset_jaccard(&relation_multiset(a), &relation_multiset(b)))
}

/// Unit vector along `v`; the zero vector stays zero.
fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| x / n).collect()
}

const TIE_SCALE: f64 = 1e9;

/// Unit-norm scene embeddings keyed by unique scene id.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    entries: Vec<(String, Vec<f64>)>,
}

impl RetrievalIndex {
    pub fn new(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let dim = entries.first().map(|e| e.1.len());
        for (id, v) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::format("index", format!("duplicate scene id {id}")));
            }
            if Some(v.len()) != dim {
                return Err(Error::format("index", "mixed embedding dimensions"));
            }
        }
        Ok(Self {
            entries: entries.into_iter().map(|(id, v)| (id, normalized(&v))).collect(),
        })
    }

    pub fn entries(&self) -> &[(String, Vec<f64>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, scene_id: &str) -> Option<&[f64]> {
        self.entries.iter().find(|e| e.0 == scene_id).map(|e| e.1.as_slice())
    }

    /// Top `top_k` candidates by descending cosine similarity, excluding
    /// `exclude`. Scores equal to 9 decimals tie and order by ascending id,
    /// so rounding noise cannot reorder exact ties.
    pub fn retrieve(&self, query: &[f64], exclude: Option<&str>, top_k: usize) -> Result<Vec<(String, f64)>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let q = normalized(query);
        let mut scored: Vec<(&str, f64)> = self
            .entries
            .iter()
            .filter(|(id, _)| Some(id.as_str()) != exclude)
            .map(|(id, v)| (id.as_str(), v.iter().zip(&q).map(|(a, b)| a * b).sum()))
            .collect();
        let key = |s: f64| (s * TIE_SCALE).round() as i64;
        scored.sort_by(|a, b| key(b.1).cmp(&key(a.1)).then_with(|| a.0.cmp(b.0)));
        scored.truncate(top_k);
        Ok(scored.into_iter().map(|(id, s)| (id.to_string(), s)).collect())
    }
}

/// Graph-level embedding: l2-normalized mean of path embeddings, or of node
/// embeddings when the scene has no paths.
pub fn graph_embedding(e: &SceneEmbeddings) -> Vec<f64> {
    let rows: Vec<&Vec<f32>> = if e.paths.is_empty() {
        e.nodes.iter().collect()
    } else {
        e.paths.iter().map(|(_, v)| v).collect()
    };
    let dim = rows.first().map_or(0, |r| r.len());
    let mut m = vec![0.0f64; dim];
    for r in &rows {
        for (a, b) in m.iter_mut().zip(r.iter()) {
            *a += *b as f64;
        }
    }
    let n = rows.len().max(1) as f64;
    normalized(&m.into_iter().map(|v| v / n).collect::<Vec<_>>())
}

/// Frozen embeddings of every scene, computed in parallel with ordered output.
pub fn embed_all(params: &ParamStore<f32>, spec: &ModelSpec, scenes: &[&PreparedScene]) -> Result<Vec<SceneEmbeddings>> {
    scenes.par_iter().map(|s| embed_scene(params, spec, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryReport {
    pub scene_id: String,
    pub ndcg: f64,
    pub retrieved: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbgrReport {
    pub method: String,
    pub mean_ndcg: f64,
    pub queries: Vec<QueryReport>,
}

/// Every scene in `index` queries all others; gains come from the relevance
/// oracle over `scenes` (same order and ids as the index).
pub fn evaluate_index(method: &str, index: &RetrievalIndex, scenes: &[&Scene], top_k: usize) -> Result<CbgrReport> {
    if index.len() < MIN_CBGR_SCENES {
        return Err(Error::InsufficientCorpus {
            have: index.len(),
            need: MIN_CBGR_SCENES,
        });
    }
    let by_id: BTreeMap<&str, &Scene> = scenes.iter().map(|s| (s.scene_id.as_str(), *s)).collect();
    let multisets: BTreeMap<&str, _> = scenes.iter().map(|s| (s.scene_id.as_str(), relation_multiset(s))).collect();
    let queries: Vec<QueryReport> = index
        .entries()
        .par_iter()
        .map(|(qid, qv)| -> Result<QueryReport> {
            if !by_id.contains_key(qid.as_str()) {
                return Err(Error::format("index", format!("no scene for {qid}")));
            }
            let qm = &multisets[qid.as_str()];
            let gain = |id: &str| grade(multiset_jaccard(qm, &multisets[id])) as f64;
            let ranked = index.retrieve(qv, Some(qid), top_k)?;
            let gains: Vec<f64> = ranked.iter().map(|(id, _)| gain(id)).collect();
            let ideal: Vec<f64> = index
                .entries()
                .iter()
                .filter(|(id, _)| id != qid)
                .map(|(id, _)| gain(id))
                .collect();
            Ok(QueryReport {
                scene_id: qid.clone(),
                ndcg: ndcg_at_k(&gains, &ideal, top_k),
                retrieved: ranked.into_iter().map(|(id, _)| id).collect(),
            })
        })
        .collect::<Result<_>>()?;
    let mean_ndcg = queries.iter().map(|q| q.ndcg).sum::<f64>() / queries.len() as f64;
    Ok(CbgrReport {
        method: method.to_string(),
        mean_ndcg,
        queries,
    })
}

/// Index over learned graph embeddings.
pub fn learned_index(params: &ParamStore<f32>, spec: &ModelSpec, scenes: &[&PreparedScene]) -> Result<RetrievalIndex> {
    let emb = embed_all(params, spec, scenes)?;
    RetrievalIndex::new(
        scenes
            .iter()
            .zip(&emb)
            .map(|(s, e)| (s.scene_id.clone(), graph_embedding(e)))
            .collect(),
    )
}

/// Index over raw mean force banners.
pub fn mean_sfb_index(scenes: &[&PreparedScene]) -> Result<RetrievalIndex> {
    RetrievalIndex::new(scenes.iter().map(|s| (s.scene_id.clone(), s.mean_banner.clone())).collect())
}

/// Trained, untrained and raw-descriptor retrieval on the same scenes.
pub fn evaluate_cbgr(
    trained: &ParamStore<f32>,
    untrained: &ParamStore<f32>,
    spec: &ModelSpec,
    prepared: &[&PreparedScene],
    scenes: &[&Scene],
    top_k: usize,
) -> Result<Vec<CbgrReport>> {
    Ok(vec![
        evaluate_index("mrcl", &learned_index(trained, spec, prepared)?, scenes, top_k)?,
        evaluate_index("untrained", &learned_index(untrained, spec, prepared)?, scenes, top_k)?,
        evaluate_index("mean_sfb", &mean_sfb_index(prepared)?, scenes, top_k)?,
    ])
}

pub fn cbgr_summary(reports: &[CbgrReport]) -> String {
    let mut s = String::from("[cbgr]\n");
    for r in reports {
        let _ = writeln!(s, "{} = {:.6}", r.method, r.mean_ndcg);
    }
    s
}

/// Tab-separated per-query table: method, query, ndcg, retrieved ids.
pub fn cbgr_table(reports: &[CbgrReport]) -> String {
    let mut s = String::from("method\tquery\tndcg\tretrieved\n");
    for r in reports {
        for q in &r.queries {
            let _ = writeln!(s, "{}\t{}\t{:.6}\t{}", r.method, q.scene_id, q.ndcg, q.retrieved.join(","));
        }
    }
    s
}

/// Labelled feature rows for relation probing.
#[derive(Debug, Clone, Default)]
pub struct ProbeData {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ProbeData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Ordered pairs `(i, j)`, `i ≠ j`, with features `h_i ‖ h_j` and the
/// primary oracle relation of `i` with respect to `j` as label.
pub fn pair_probe_data(scene: &Scene, nodes: &[Vec<f32>]) -> ProbeData {
    let mut primary = BTreeMap::new();
    let mut sets: BTreeMap<(usize, usize), crate::scene::RelationSet> = BTreeMap::new();
    for t in &scene.oracle_relations {
        sets.entry((t.subject, t.object)).or_default().insert(t.relation);
    }
    for (k, set) in sets {
        if let Some(r) = set.primary() {
            primary.insert(k, r);
        }
    }
    let mut out = ProbeData::default();
    for ((i, j), r) in primary {
        let mut f: Vec<f64> = nodes[i].iter().map(|&v| v as f64).collect();
        f.extend(nodes[j].iter().map(|&v| v as f64));
        out.features.push(f);
        out.labels.push(r.id());
    }
    out
}

pub fn probe_data_for(scenes: &[&Scene], emb: &[SceneEmbeddings]) -> ProbeData {
    let mut all = ProbeData::default();
    for (s, e) in scenes.iter().zip(emb) {
        let d = pair_probe_data(s, &e.nodes);
        all.features.extend(d.features);
        all.labels.extend(d.labels);
    }
    all
}

/// Multinomial logistic regression trained by minibatch Adam on standardized
/// features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `classes × (dim + 1)`, bias last.
    weights: Vec<Vec<f64>>,
}

impl LinearProbe {
    pub fn fit(data: &ProbeData, n_classes: usize, cfg: &EvalConfig, probe_seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let dim = data.features[0].len();
        let n = data.len();
        let mut mean = vec![0.0; dim];
        for f in &data.features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v / n as f64;
            }
        }
        let mut std = vec![0.0; dim];
        for f in &data.features {
            for ((s, v), m) in std.iter_mut().zip(f).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
        let xs: Vec<Vec<f64>> = data
            .features
            .iter()
            .map(|f| {
                let mut x: Vec<f64> = f.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect();
                x.push(1.0);
                x
            })
            .collect();

        let mut rng = seed::stream_rng(probe_seed, seed::PROBE, &[]);
        let mut w: Vec<Vec<f64>> = (0..n_classes)
            .map(|_| (0..=dim).map(|_| rng.gen_range(-0.01..0.01)).collect())
            .collect();
        let (mut m, mut v) = (vec![vec![0.0; dim + 1]; n_classes], vec![vec![0.0; dim + 1]; n_classes]);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let mut step = 0i32;
        let mut order: Vec<usize> = (0..n).collect();
        for _ in 0..cfg.probe_epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.probe_batch) {
                let mut g = vec![vec![0.0; dim + 1]; n_classes];
                for &i in chunk {
                    let p = softmax(&logits(&w, &xs[i]));
                    for c in 0..n_classes {
                        let coef = p[c] - if c == data.labels[i] { 1.0 } else { 0.0 };
                        for (gk, xk) in g[c].iter_mut().zip(&xs[i]) {
                            *gk += coef * xk / chunk.len() as f64;
                        }
                    }
                }
                step += 1;
                let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
                for c in 0..n_classes {
                    for k in 0..=dim {
                        let gk = g[c][k] + if k < dim { cfg.probe_l2 * w[c][k] } else { 0.0 };
                        m[c][k] = b1 * m[c][k] + (1.0 - b1) * gk;
                        v[c][k] = b2 * v[c][k] + (1.0 - b2) * gk * gk;
                        w[c][k] -= cfg.probe_lr * (m[c][k] / c1) / ((v[c][k] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(Self { mean, std, weights: w })
    }

    /// Class indices by descending score, ties by ascending class.
    pub fn rank(&self, features: &[f64]) -> Vec<usize> {
        let mut x: Vec<f64> = features
            .iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect();
        x.push(1.0);
        let z = logits(&self.weights, &x);
        let mut idx: Vec<usize> = (0..z.len()).collect();
        idx.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(a.cmp(&b)));
        idx
    }
}

fn logits(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccuracy {
    pub relation: String,
    pub support: usize,
    pub top1: f64,
    pub top2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub method: String,
    pub seed: u64,
    pub top1: f64,
    pub top2: f64,
    pub per_class: Vec<ClassAccuracy>,
}

/// Fits on `train` and scores on `test`. Classes absent from `train` are
/// dropped from both sides with a warning.
pub fn run_probe(method: &str, train: &ProbeData, test: &ProbeData, cfg: &EvalConfig, probe_seed: u64) -> Result<ProbeReport> {
    let present: BTreeSet<usize> = train.labels.iter().copied().collect();
    for c in test.labels.iter().filter(|c| !present.contains(c)).collect::<BTreeSet<_>>() {
        log::warn!("relation {} absent from probe training split; excluded", relation_name(*c));
    }
    let test_idx: Vec<usize> = (0..test.len()).filter(|&i| present.contains(&test.labels[i])).collect();
    if test_idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let probe = LinearProbe::fit(train, Relation::ALL.len(), cfg, probe_seed)?;
    let mut per: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    let (mut h1, mut h2) = (0usize, 0usize);
    for &i in &test_idx {
        let r = probe.rank(&test.features[i]);
        let y = test.labels[i];
        let e = per.entry(y).or_default();
        e.0 += 1;
        if r[0] == y {
            h1 += 1;
            e.1 += 1;
        }
        if r[..2].contains(&y) {
            h2 += 1;
            e.2 += 1;
        }
    }
    let n = test_idx.len() as f64;
    Ok(ProbeReport {
        method: method.to_string(),
        seed: probe_seed,
        top1: h1 as f64 / n,
        top2: h2 as f64 / n,
        per_class: per
            .into_iter()
            .map(|(c, (s, a, b))| ClassAccuracy {
                relation: relation_name(c),
                support: s,
                top1: a as f64 / s as f64,
                top2: b as f64 / s as f64,
            })
            .collect(),
    })
}

fn relation_name(id: usize) -> String {
    Relation::from_id(id).map_or_else(|| format!("relation_{id}"), |r| r.name().to_string())
}

/// Accuracy of always predicting the most frequent training class.
pub fn majority_baseline(train: &ProbeData, test: &ProbeData) -> f64 {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in &train.labels {
        *counts.entry(l).or_default() += 1;
    }
    let Some(best) = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|e| *e.0) else {
        return 0.0;
    };
    if test.is_empty() {
        return 0.0;
    }
    test.labels.iter().filter(|&&l| l == best).count() as f64 / test.len() as f64
}

/// Probe reports for trained and untrained encoders over every probe seed,
/// plus the majority-class accuracy.
pub struct SrrResult {
    pub reports: Vec<ProbeReport>,
    pub majority: f64,
}

pub fn probe_srr(
    trained: &ParamStore<f32>,
    untrained: &ParamStore<f32>,
    spec: &ModelSpec,
    train: (&[&PreparedScene], &[&Scene]),
    test: (&[&PreparedScene], &[&Scene]),
    cfg: &EvalConfig,
) -> Result<SrrResult> {
    let mut reports = Vec::new();
    let mut majority = 0.0;
    for (method, params) in [("mrcl", trained), ("untrained", untrained)] {
        let tr = probe_data_for(train.1, &embed_all(params, spec, train.0)?);
        let te = probe_data_for(test.1, &embed_all(params, spec, test.0)?);
        majority = majority_baseline(&tr, &te);
        let rs: Vec<ProbeReport> = cfg
            .probe_seeds
            .par_iter()
            .map(|&s| run_probe(method, &tr, &te, cfg, s))
            .collect::<Result<_>>()?;
        reports.extend(rs);
    }
    Ok(SrrResult { reports, majority })
}

pub fn mean_top1(reports: &[ProbeReport], method: &str) -> f64 {
    let rs: Vec<f64> = reports.iter().filter(|r| r.method == method).map(|r| r.top1).collect();
    rs.iter().sum::<f64>() / rs.len().max(1) as f64
}

pub fn srr_table(result: &SrrResult) -> String {
    let mut s = String::from("method\tseed\trelation\tsupport\ttop1\ttop2\n");
    for r in &result.reports {
        let _ = writeln!(s, "{}\t{}\tall\t-\t{:.6}\t{:.6}", r.method, r.seed, r.top1, r.top2);
        for c in &r.per_class {
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{:.6}\t{:.6}", r.method, r.seed, c.relation, c.support, c.top1, c.top2);
        }
    }
    s
}

pub fn srr_summary(result: &SrrResult) -> String {
    let mut s = String::from("[srr]\n");
    for m in ["mrcl", "untrained"] {
        let _ = writeln!(s, "{m}_top1 = {:.6}", mean_top1(&result.reports, m));
    }
    let _ = writeln!(s, "majority = {:.6}", result.majority);
    for m in ["mrcl", "untrained"] {
        let mut per: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for r in result.reports.iter().filter(|r| r.method == m) {
            for c in &r.per_class {
                let e = per.entry(c.relation.as_str()).or_default();
                e.0 += c.top1;
                e.1 += 1;
            }
        }
        let _ = writeln!(s, "\n[srr.per_relation_top1.{m}]");
        for (rel, (sum, n)) in per {
            let _ = writeln!(s, "{rel} = {:.6}", sum / n as f64);
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportMode {
    Object,
    Path,
    Graph,
}

impl ExportMode {
    pub fn name(self) -> &'static str {
        match self {
            ExportMode::Object => "object",
            ExportMode::Path => "path",
            ExportMode::Graph => "graph",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(ExportMode::Object),
            "path" => Ok(ExportMode::Path),
            "graph" => Ok(ExportMode::Graph),
            _ => Err(Error::Config(format!("unknown export mode {s:?}"))),
        }
    }
}

/// Rows of an embedding table: `(scene_id, key, vector)` where `key` is the
/// object id, path signature or `graph`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub mode: ExportMode,
    pub dim: usize,
    pub rows: Vec<(String, String, Vec<f32>)>,
}

const EMB_MAGIC: &[u8; 8] = b"MRCLEMB1";

impl EmbeddingTable {
    /// Object mode exports the visual encoder output alone; path and graph
    /// modes use the graph encoder.
    pub fn build(mode: ExportMode, scenes: &[&PreparedScene], emb: &[SceneEmbeddings]) -> Self {
        let mut rows = Vec::new();
        for (s, e) in scenes.iter().zip(emb) {
            match mode {
                ExportMode::Object => {
                    for (i, v) in e.visual.iter().enumerate() {
                        rows.push((s.scene_id.clone(), i.to_string(), v.clone()));
                    }
                }
                ExportMode::Path => {
                    for (p, v) in &e.paths {
                        rows.push((s.scene_id.clone(), p.signature(), v.clone()));
                    }
                }
                ExportMode::Graph => {
                    let g = graph_embedding(e).into_iter().map(|v| v as f32).collect();
                    rows.push((s.scene_id.clone(), "graph".to_string(), g));
                }
            }
        }
        let dim = rows.first().map_or(0, |r| r.2.len());
        Self { mode, dim, rows }
    }

    /// `MRCLEMB1`, mode name length + bytes, `u32` dim, `u64` rows, then
    /// row-major little-endian `f32` vectors.
    pub fn encode_binary(&self) -> Vec<u8> {
        let mut out = EMB_MAGIC.to_vec();
        let name = self.mode.name().as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows.len() as u64).to_le_bytes());
        for (_, _, v) in &self.rows {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// `row`, `scene_id`, `key` per line after a header.
    pub fn encode_index(&self) -> String {
        let mut s = String::from("row\tscene_id\tkey\n");
        for (i, (sid, key, _)) in self.rows.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{sid}\t{key}");
        }
        s
    }

    pub fn decode(binary: &[u8], index: &str) -> Result<Self> {
        let bad = |d: &str| Error::format("embedding table", d.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = binary.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != EMB_MAGIC {
            return Err(bad("bad magic"));
        }
        let nlen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mode = ExportMode::parse(std::str::from_utf8(take(nlen)?).map_err(|_| bad("mode"))?)?;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let nrows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let keys: Vec<(String, String)> = index
            .lines()
            .skip(1)
            .filter(|l| !l.is_empty())
            .map(|l| {
                let c: Vec<&str> = l.split('\t').collect();
                match c[..] {
                    [_, sid, key] => Ok((sid.to_string(), key.to_string())),
                    _ => Err(bad("index line")),
                }
            })
            .collect::<Result<_>>()?;
        if keys.len() != nrows {
            return Err(bad("index and table row counts differ"));
        }
        let mut rows = Vec::with_capacity(nrows);
        for (sid, key) in keys {
            let raw = take(4 * dim)?;
            let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            rows.push((sid, key, v));
        }
        if pos != binary.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { mode, dim, rows })
    }

    /// Writes `<stem>.bin` and `<stem>.tsv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let bin = dir.join(format!("{stem}.bin"));
        let tsv = dir.join(format!("{stem}.tsv"));
        fs::write(&bin, self.encode_binary()).map_err(|e| Error::io(&bin, e))?;
        fs::write(&tsv, self.encode_index()).map_err(|e| Error::io(&tsv, e))
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        let bin = dir.join(format!("{stem}.bin"));
        let tsv = dir.join(format!("{stem}.tsv"));
        let b = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let t = fs::read_to_string(&tsv).map_err(|e| Error::io(&tsv, e))?;
        Self::decode(&b, &t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[3.0, 2.0, 1.0], &[3.0, 2.0, 1.0], 5), 1.0);
        assert_eq!(ndcg_at_k(&[0.0; 5], &[0.0; 5], 5), 0.0);
        let v = ndcg_at_k(&[3.0, 2.0, 3.0, 0.0, 1.0], &[3.0, 3.0, 2.0, 1.0, 0.0], 5);
        assert!((v - 0.9724).abs() < 1e-4);
    }

    #[test]
    fn grades_follow_thresholds() {
        assert_eq!(grade(1.0), 3);
        assert_eq!(grade(0.8), 3);
        assert_eq!(grade(0.79), 2);
        assert_eq!(grade(0.5), 2);
        assert_eq!(grade(0.2), 1);
        assert_eq!(grade(0.19), 0);
    }

    #[test]
    fn retrieval_ties_break_by_id() {
        let idx = RetrievalIndex::new(vec![
            ("b".into(), vec![1.0, 0.0]),
            ("a".into(), vec![2.0, 0.0]),
            ("c".into(), vec![0.0, 1.0]),
        ])
        .unwrap();
        let r = idx.retrieve(&[1.0, 0.0], None, 5).unwrap();
        let ids: Vec<&str> = r.iter().map(|x| x.0.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        let r = idx.retrieve(&[1.0, 0.0], Some("a"), 1).unwrap();
        assert_eq!(r[0].0, "b");
        assert!(RetrievalIndex::new(vec![]).unwrap().retrieve(&[1.0], None, 5).is_err());
    }

    #[test]
    fn probe_separates_one_hot_features() {
        let mut d = ProbeData::default();
        for i in 0..70 {
            let c = i % 7;
            let mut f = vec![0.0; 7];
            f[c] = 1.0;
            d.features.push(f);
            d.labels.push(c);
        }
        let r = run_probe("oracle", &d, &d, &EvalConfig::default(), 0).unwrap();
        assert_eq!(r.top1, 1.0);
        assert_eq!(majority_baseline(&d, &d), 10.0 / 70.0);
    }
}
