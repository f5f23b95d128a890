//! Scene corpus on disk.
//!
//! ```text
//! <root>/corpus.toml                 corpus manifest (seed, count, config, hash)
//! <root>/scenes/<scene_id>/scene.toml  ids, labels, attributes, grid, oracle relations
//! <root>/scenes/<scene_id>/object_<i>.rle
//! ```
//!
//! An `.rle` file is `b"MRLE"`, then little-endian `u32` version (1), width,
//! height and run count, followed by that many `u32` run lengths over the
//! row-major grid. Runs alternate starting with unset pixels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::scene::{generate_scene, Relation, RelationTriple, Scene, SceneGenConfig, SceneObject};
use crate::seed;

const RLE_MAGIC: &[u8; 4] = b"MRLE";
const RLE_VERSION: u32 = 1;
pub const CORPUS_MANIFEST: &str = "corpus.toml";

pub fn encode_rle(mask: &BinaryMask) -> Vec<u8> {
    let runs = mask.to_runs();
    let mut out = Vec::with_capacity(20 + 4 * runs.len());
    out.extend_from_slice(RLE_MAGIC);
    for v in [
        RLE_VERSION,
        mask.width() as u32,
        mask.height() as u32,
        runs.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in runs {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out
}

pub fn decode_rle(bytes: &[u8]) -> Result<BinaryMask> {
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 + 4 * i..8 + 4 * i)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::format("rle", "truncated"))
    };
    if bytes.len() < 20 || &bytes[..4] != RLE_MAGIC {
        return Err(Error::format("rle", "bad magic"));
    }
    if word(0)? != RLE_VERSION {
        return Err(Error::format("rle", format!("unsupported version {}", word(0)?)));
    }
    let (w, h, n) = (word(1)? as usize, word(2)? as usize, word(3)? as usize);
    if bytes.len() != 20 + 4 * n {
        return Err(Error::format("rle", "length does not match run count"));
    }
    let runs: Vec<u32> = (0..n).map(|i| word(4 + i)).collect::<Result<_>>()?;
    BinaryMask::from_runs(w, h, &runs)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneManifest {
    scene_id: String,
    grid: [usize; 2],
    objects: Vec<ObjectRecord>,
    #[serde(default)]
    relations: Vec<RelationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectRecord {
    object_id: usize,
    label_id: usize,
    attribute_id: usize,
    mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationRecord {
    subject: usize,
    relation: Relation,
    object: usize,
}

/// Writes through a temporary sibling and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serialized scene files as `(file name, bytes)`, manifest first.
pub fn scene_files(scene: &Scene) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::with_capacity(scene.objects.len() + 1);
    let mut objects = Vec::new();
    for o in &scene.objects {
        let name = format!("object_{}.rle", o.object_id);
        files.push((name.clone(), encode_rle(&o.mask)));
        objects.push(ObjectRecord {
            object_id: o.object_id,
            label_id: o.label_id,
            attribute_id: o.attribute_id,
            mask: name,
        });
    }
    let manifest = SceneManifest {
        scene_id: scene.scene_id.clone(),
        grid: [scene.grid.0, scene.grid.1],
        objects,
        relations: scene
            .oracle_relations
            .iter()
            .map(|t| RelationRecord {
                subject: t.subject,
                relation: t.relation,
                object: t.object,
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format("scene manifest", e.to_string()))?;
    files.insert(0, ("scene.toml".to_string(), text.into_bytes()));
    Ok(files)
}

pub fn write_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in scene_files(scene)? {
        write_atomic(&dir.join(name), &bytes)?;
    }
    Ok(())
}

pub fn read_scene(dir: &Path) -> Result<Scene> {
    let path = dir.join("scene.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: SceneManifest =
        toml::from_str(&text).map_err(|e| Error::format("scene manifest", e.to_string()))?;
    let mut objects = Vec::with_capacity(manifest.objects.len());
    for rec in &manifest.objects {
        let mpath = dir.join(&rec.mask);
        let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mask = decode_rle(&bytes)?;
        if mask.grid() != (manifest.grid[0], manifest.grid[1]) {
            return Err(Error::format("scene", format!("{} grid mismatch", rec.mask)));
        }
        objects.push(SceneObject::new(rec.object_id, rec.label_id, rec.attribute_id, mask)?);
    }
    let n = objects.len();
    let oracle_relations: Vec<RelationTriple> = manifest
        .relations
        .iter()
        .map(|r| RelationTriple {
            subject: r.subject,
            relation: r.relation,
            object: r.object,
        })
        .collect();
    if oracle_relations.iter().any(|t| t.subject >= n || t.object >= n) {
        return Err(Error::format("scene", "relation references unknown object"));
    }
    // Validate ids and grids, but keep the stored relations verbatim.
    let mut scene = Scene::from_objects(manifest.scene_id, objects, &Default::default())?;
    scene.oracle_relations = oracle_relations;
    Ok(scene)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub seed: u64,
    pub count: usize,
    pub corpus_hash: String,
    pub scene_ids: Vec<String>,
    pub scene_config: SceneGenConfig,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub seed: u64,
    pub scene_config: SceneGenConfig,
    pub scenes: Vec<Scene>,
}

pub fn scene_id_for(index: usize) -> String {
    format!("s{index:05}")
}

impl Corpus {
    /// Generates `count` scenes in parallel; output order and bits do not
    /// depend on the worker count.
    pub fn generate(seed: u64, count: usize, scene_config: &SceneGenConfig) -> Result<Self> {
        scene_config.validate()?;
        let scenes = (0..count)
            .into_par_iter()
            .map(|i| generate_scene(seed, &scene_id_for(i), scene_config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            scene_config: scene_config.clone(),
            scenes,
        })
    }

    /// SHA-256 over every scene file in scene order.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for s in &self.scenes {
            h.update(s.scene_id.as_bytes());
            for (name, bytes) in scene_files(s)? {
                h.update(name.as_bytes());
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn write(&self, root: &Path) -> Result<CorpusManifest> {
        let scenes_dir = root.join("scenes");
        fs::create_dir_all(&scenes_dir).map_err(|e| Error::io(&scenes_dir, e))?;
        self.scenes
            .par_iter()
            .map(|s| write_scene(&scenes_dir.join(&s.scene_id), s))
            .collect::<Result<Vec<_>>>()?;
        let manifest = CorpusManifest {
            seed: self.seed,
            count: self.scenes.len(),
            corpus_hash: self.hash()?,
            scene_ids: self.scenes.iter().map(|s| s.scene_id.clone()).collect(),
            scene_config: self.scene_config.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format("corpus manifest", e.to_string()))?;
        write_atomic(&root.join(CORPUS_MANIFEST), text.as_bytes())?;
        Ok(manifest)
    }

    pub fn read_manifest(root: &Path) -> Result<CorpusManifest> {
        let path = root.join(CORPUS_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format("corpus manifest", e.to_string()))
    }

    /// Loads a corpus and checks its content hash against the manifest.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(root)?;
        let scenes = manifest
            .scene_ids
            .par_iter()
            .map(|id| read_scene(&root.join("scenes").join(id)))
            .collect::<Result<Vec<_>>>()?;
        let corpus = Self {
            seed: manifest.seed,
            scene_config: manifest.scene_config,
            scenes,
        };
        let hash = corpus.hash()?;
        if hash != manifest.corpus_hash {
            return Err(Error::format(
                "corpus",
                format!("hash mismatch: manifest {} vs content {hash}", manifest.corpus_hash),
            ));
        }
        Ok(corpus)
    }

    /// Deterministic train/validation split of scene indices.
    pub fn split(&self, seed: u64, val_fraction: f64) -> Split {
        split_indices(self.scenes.len(), seed, val_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn split_indices(n: usize, seed: u64, val_fraction: f64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream_rng(seed, seed::SPLIT, &[n as u64]));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Split { train, val }
}

pub fn scene_dir(root: &Path, scene_id: &str) -> PathBuf {
    root.join("scenes").join(scene_id)
}
