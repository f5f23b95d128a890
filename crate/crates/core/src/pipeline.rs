//! End-to-end commands over on-disk corpora and run directories.
//!
//! Output layout per command:
//!
//! * gen-data: `corpus.toml`, `scenes/<id>/{scene.toml,object_<i>.rle}`
//! * train: `model.ckpt`, `checkpoints/epoch_<nnn>.ckpt`, `losses.csv`, `run.toml`
//! * eval-cbgr: `cbgr.tsv`, `cbgr_summary.toml`, `run.toml`
//! * probe-srr: `srr.tsv`, `srr_summary.toml`, `run.toml`
//! * export: `embeddings_<mode>.{bin,tsv}`, `run.toml`

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{model_hash, RunConfig};
use crate::corpus::{write_atomic, Corpus, CorpusManifest, Split, CORPUS_MANIFEST};
use crate::encoders::{check_params, init_params, prepare_graph, ModelSpec, PreparedScene};
use crate::error::{Error, Result};
use crate::eval::{
    cbgr_summary, cbgr_table, embed_all, evaluate_cbgr, probe_srr, srr_summary, srr_table, CbgrReport, EmbeddingTable,
    ExportMode, SrrResult,
};
use crate::force::{banner_cache_path, read_banner_cache, symmetric_force_banner, write_banner_cache, CachedBanner, ForceBanner};
use crate::graph::build_graph_with;
use crate::manifest::{unix_now, RunManifest};
use crate::scene::{Scene, SceneGenConfig};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ParamStore};
use crate::training::{loss_table_csv, train, EpochRecord};

pub const MODEL_FILE: &str = "model.ckpt";
pub const LOSS_TABLE: &str = "losses.csv";

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Generates and writes a corpus. With `force`, a previous corpus in `out`
/// is replaced.
pub fn gen_data(out: &Path, seed: u64, count: usize, scene_config: &SceneGenConfig, force: bool) -> Result<CorpusManifest> {
    scene_config.validate()?;
    prepare_output(out, force)?;
    if force {
        let scenes = out.join("scenes");
        if scenes.exists() {
            fs::remove_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
        }
    }
    let corpus = Corpus::generate(seed, count, scene_config)?;
    log::info!("generated {count} scenes");
    corpus.write(out)
}

/// A loaded corpus with model-ready scenes and its train/validation split.
pub struct Workspace {
    pub corpus: Corpus,
    pub corpus_hash: String,
    pub spec: ModelSpec,
    pub prepared: Vec<PreparedScene>,
    pub split: Split,
}

impl Workspace {
    pub fn scenes(&self, idx: &[usize]) -> (Vec<&PreparedScene>, Vec<&Scene>) {
        (
            idx.iter().map(|&i| &self.prepared[i]).collect(),
            idx.iter().map(|&i| &self.corpus.scenes[i]).collect(),
        )
    }

    pub fn all(&self) -> (Vec<&PreparedScene>, Vec<&Scene>) {
        let idx: Vec<usize> = (0..self.prepared.len()).collect();
        self.scenes(&idx)
    }
}

/// Banners for every object pair of a scene, read from `cache_dir` when a
/// matching cache file exists and written there otherwise.
fn scene_banners(scene: &Scene, cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<BTreeMap<(usize, usize), ForceBanner>> {
    if let Some(dir) = cache_dir {
        let path = banner_cache_path(dir, &scene.scene_id, &cfg.force);
        if path.exists() {
            return Ok(read_banner_cache(&path, &cfg.force)?
                .into_iter()
                .map(|c| ((c.i as usize, c.j as usize), c.banner))
                .collect());
        }
    }
    let mut out = BTreeMap::new();
    let objs = &scene.objects;
    for i in 0..objs.len() {
        for j in i + 1..objs.len() {
            out.insert((i, j), symmetric_force_banner(&objs[i].mask, &objs[j].mask, &cfg.force)?);
        }
    }
    if let Some(dir) = cache_dir {
        let entries: Vec<CachedBanner> = out
            .iter()
            .map(|(&(i, j), b)| CachedBanner {
                i: i as u32,
                j: j as u32,
                banner: b.clone(),
            })
            .collect();
        write_banner_cache(&banner_cache_path(dir, &scene.scene_id, &cfg.force), &cfg.force, &entries)?;
    }
    Ok(out)
}

pub fn prepare_scenes(scenes: &[Scene], spec: &ModelSpec, cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<Vec<PreparedScene>> {
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    scenes
        .par_iter()
        .map(|s| {
            let banners = scene_banners(s, cfg, cache_dir)?;
            let graph = build_graph_with(s, &cfg.graph, |i, j| {
                banners
                    .get(&(i, j))
                    .cloned()
                    .ok_or_else(|| Error::format("banner cache", format!("{}: pair ({i},{j}) missing", s.scene_id)))
            })?;
            prepare_graph(s, &graph, spec, &cfg.graph, &cfg.train.k_set)
        })
        .collect()
}

pub fn load_workspace(corpus_dir: &Path, cfg: &RunConfig, cache_dir: Option<&Path>) -> Result<Workspace> {
    cfg.validate()?;
    let corpus = Corpus::load(corpus_dir)?;
    let corpus_hash = Corpus::read_manifest(corpus_dir)?.corpus_hash;
    let spec = cfg.model_spec(corpus.scene_config.n_labels, corpus.scene_config.n_attributes);
    let prepared = prepare_scenes(&corpus.scenes, &spec, cfg, cache_dir)?;
    let split = corpus.split(cfg.train.seed, cfg.train.val_fraction);
    Ok(Workspace {
        corpus,
        corpus_hash,
        spec,
        prepared,
        split,
    })
}

pub fn checkpoint_for(spec: &ModelSpec, params: &ParamStore<f32>, optimizer: Option<crate::tensor::AdamWState>) -> Checkpoint {
    Checkpoint {
        config_hash: model_hash(spec),
        params: params.clone(),
        optimizer,
    }
}

/// Reads a checkpoint and checks it against the model configuration.
pub fn load_model(path: &Path, spec: &ModelSpec) -> Result<ParamStore<f32>> {
    let ck = read_checkpoint(path)?;
    let expected = model_hash(spec);
    if ck.config_hash != expected {
        return Err(Error::format(
            "checkpoint",
            format!("model config hash {} does not match configuration {expected}", ck.config_hash),
        ));
    }
    check_params(spec, &ck.params)?;
    Ok(ck.params)
}

pub fn epoch_checkpoint(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:03}.ckpt"))
}

pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub history: Vec<EpochRecord>,
    pub manifest: RunManifest,
}

/// Trains on the workspace split, writing per-epoch checkpoints, the final
/// model and the loss table under `out`.
pub fn run_train(ws: &Workspace, cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let started = unix_now();
    let ckdir = out.join("checkpoints");
    fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    let mut outputs = vec![MODEL_FILE.to_string(), LOSS_TABLE.to_string()];
    let run = train(&ws.spec, &cfg.train, &ws.prepared, &ws.split, |st| {
        let path = epoch_checkpoint(out, st.epoch);
        write_checkpoint(&path, &checkpoint_for(&ws.spec, st.params, Some(st.optimizer.clone())))?;
        outputs.push(format!("checkpoints/epoch_{:03}.ckpt", st.epoch));
        Ok(())
    })?;
    write_checkpoint(&out.join(MODEL_FILE), &checkpoint_for(&ws.spec, &run.params, Some(run.optimizer.clone())))?;
    write_atomic(&out.join(LOSS_TABLE), loss_table_csv(&run.history).as_bytes())?;
    let mut manifest = RunManifest::new("train", cfg, &ws.corpus_hash, cfg.train.seed, started);
    manifest.outputs = outputs;
    let manifest = manifest.finish(out)?;
    Ok(TrainOutcome {
        params: run.params,
        history: run.history,
        manifest,
    })
}

/// Retrieval over the validation split for the trained model, the
/// initialization it was trained from and the raw mean-banner index.
pub fn run_eval_cbgr(ws: &Workspace, cfg: &RunConfig, params: &ParamStore<f32>, out: &Path) -> Result<Vec<CbgrReport>> {
    let started = unix_now();
    let untrained = init_params(&ws.spec, cfg.train.seed)?;
    let (prep, scenes) = ws.scenes(&ws.split.val);
    let reports = evaluate_cbgr(params, &untrained, &ws.spec, &prep, &scenes, cfg.eval.top_k)?;
    write_atomic(&out.join("cbgr.tsv"), cbgr_table(&reports).as_bytes())?;
    let summary = format!("top_k = {}\nqueries = {}\n\n{}", cfg.eval.top_k, prep.len(), cbgr_summary(&reports));
    write_atomic(&out.join("cbgr_summary.toml"), summary.as_bytes())?;
    let mut m = RunManifest::new("eval-cbgr", cfg, &ws.corpus_hash, cfg.train.seed, started);
    m.outputs = vec!["cbgr.tsv".into(), "cbgr_summary.toml".into()];
    m.finish(out)?;
    Ok(reports)
}

/// Linear probes fitted on training-split pairs and scored on validation pairs.
pub fn run_probe_srr(ws: &Workspace, cfg: &RunConfig, params: &ParamStore<f32>, out: &Path) -> Result<SrrResult> {
    let started = unix_now();
    let untrained = init_params(&ws.spec, cfg.train.seed)?;
    let (tp, ts) = ws.scenes(&ws.split.train);
    let (vp, vs) = ws.scenes(&ws.split.val);
    let result = probe_srr(params, &untrained, &ws.spec, (&tp, &ts), (&vp, &vs), &cfg.eval)?;
    write_atomic(&out.join("srr.tsv"), srr_table(&result).as_bytes())?;
    write_atomic(&out.join("srr_summary.toml"), srr_summary(&result).as_bytes())?;
    let mut m = RunManifest::new("probe-srr", cfg, &ws.corpus_hash, cfg.train.seed, started);
    m.outputs = vec!["srr.tsv".into(), "srr_summary.toml".into()];
    m.finish(out)?;
    Ok(result)
}

/// Embeddings of every corpus scene in the requested mode.
pub fn run_export(ws: &Workspace, cfg: &RunConfig, params: &ParamStore<f32>, mode: ExportMode, out: &Path) -> Result<EmbeddingTable> {
    let started = unix_now();
    let (prep, _) = ws.all();
    let emb = embed_all(params, &ws.spec, &prep)?;
    let table = EmbeddingTable::build(mode, &prep, &emb);
    let stem = format!("embeddings_{}", mode.name());
    table.write(out, &stem)?;
    let mut m = RunManifest::new("export", cfg, &ws.corpus_hash, cfg.train.seed, started);
    m.outputs = vec![format!("{stem}.bin"), format!("{stem}.tsv")];
    m.finish(out)?;
    Ok(table)
}

/// True when `dir` holds a corpus manifest.
pub fn is_corpus(dir: &Path) -> bool {
    dir.join(CORPUS_MANIFEST).is_file()
}
