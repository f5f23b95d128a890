//! Deterministic synthetic scenes and the geometric relation oracle that
//! supplies ground truth for retrieval relevance and relation probing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{centroid, BinaryMask};
use crate::seed;

/// Minimum number of set pixels for an accepted object.
pub const MIN_OBJECT_PIXELS: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub grid_width: usize,
    pub grid_height: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub n_labels: usize,
    pub n_attributes: usize,
    /// Smallest and largest object extent in pixels; attributes partition this range.
    pub min_extent: usize,
    pub max_extent: usize,
    pub placement_retries: usize,
    /// Largest accepted overlap, as a fraction of the smaller object's area.
    pub max_overlap: f64,
    pub oracle: OracleRules,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            grid_width: 64,
            grid_height: 64,
            objects_min: 3,
            objects_max: 6,
            n_labels: 3,
            n_attributes: 3,
            min_extent: 4,
            max_extent: 16,
            placement_retries: 200,
            max_overlap: 0.3,
            oracle: OracleRules::default(),
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_width == 0 || self.grid_height == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if self.objects_min == 0 || self.objects_min > self.objects_max {
            return bad(format!(
                "object count range ({}, {}) is empty",
                self.objects_min, self.objects_max
            ));
        }
        if self.n_labels == 0 || self.n_attributes == 0 {
            return bad("label and attribute vocabularies must be non-empty".into());
        }
        if self.min_extent < 3 || self.min_extent > self.max_extent {
            return bad(format!(
                "extent range ({}, {}) invalid (minimum 3)",
                self.min_extent, self.max_extent
            ));
        }
        if self.max_extent > self.grid_width.min(self.grid_height) {
            return bad(format!(
                "max_extent {} exceeds grid {}x{}",
                self.max_extent, self.grid_width, self.grid_height
            ));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad(format!("max_overlap {} outside [0,1]", self.max_overlap));
        }
        self.oracle.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleRules {
    pub dominance_ratio: f64,
    /// `near` iff centroid distance < `near_fraction * grid_diagonal`.
    pub near_fraction: f64,
}

impl Default for OracleRules {
    fn default() -> Self {
        Self {
            dominance_ratio: 1.5,
            near_fraction: 0.25,
        }
    }
}

impl OracleRules {
    fn validate(&self) -> Result<()> {
        if !(self.dominance_ratio >= 1.0) || !(self.near_fraction > 0.0) {
            return Err(Error::Config(format!("invalid oracle rules {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
    Overlapping,
    Near,
    Far,
}

impl Relation {
    pub const ALL: [Relation; 7] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
        Relation::Overlapping,
        Relation::Near,
        Relation::Far,
    ];

    /// Order used to pick a single class for a pair when probing.
    const PRIMARY_PRIORITY: [Relation; 7] = [
        Relation::Overlapping,
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
        Relation::Near,
        Relation::Far,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Relation> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::LeftOf => "left_of",
            Relation::RightOf => "right_of",
            Relation::Above => "above",
            Relation::Below => "below",
            Relation::Overlapping => "overlapping",
            Relation::Near => "near",
            Relation::Far => "far",
        }
    }

    pub fn from_name(name: &str) -> Option<Relation> {
        Self::ALL.iter().copied().find(|r| r.name() == name)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RelationSet(u8);

impl RelationSet {
    pub fn insert(&mut self, r: Relation) {
        self.0 |= 1 << r.id();
    }

    pub fn contains(&self, r: Relation) -> bool {
        self.0 & (1 << r.id()) != 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Relation> + '_ {
        Relation::ALL.into_iter().filter(|r| self.contains(*r))
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    /// Highest-priority member: overlapping, then the axis relation, then near/far.
    pub fn primary(&self) -> Option<Relation> {
        Relation::PRIMARY_PRIORITY
            .into_iter()
            .find(|r| self.contains(*r))
    }
}

impl FromIterator<Relation> for RelationSet {
    fn from_iter<I: IntoIterator<Item = Relation>>(iter: I) -> Self {
        let mut s = RelationSet::default();
        for r in iter {
            s.insert(r);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

impl ShapeKind {
    /// Labels map onto shapes cyclically so the label is visible in the mask.
    pub fn for_label(label_id: usize) -> ShapeKind {
        match label_id % 3 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Disk,
            _ => ShapeKind::Triangle,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub object_id: usize,
    pub label_id: usize,
    pub attribute_id: usize,
    pub mask: BinaryMask,
    pub centroid: (f64, f64),
}

impl SceneObject {
    pub fn new(
        object_id: usize,
        label_id: usize,
        attribute_id: usize,
        mask: BinaryMask,
    ) -> Result<Self> {
        let centroid = centroid(&mask)?;
        Ok(Self {
            object_id,
            label_id,
            attribute_id,
            mask,
            centroid,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationTriple {
    pub subject: usize,
    pub relation: Relation,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub grid: (usize, usize),
    pub objects: Vec<SceneObject>,
    pub oracle_relations: Vec<RelationTriple>,
}

impl Scene {
    /// Assembles a scene from objects, validating ids and grids and filling
    /// in the oracle relations for every ordered pair.
    pub fn from_objects(
        scene_id: impl Into<String>,
        objects: Vec<SceneObject>,
        rules: &OracleRules,
    ) -> Result<Self> {
        let first = objects.first().ok_or(Error::DegenerateMask)?;
        let grid = first.mask.grid();
        for (i, o) in objects.iter().enumerate() {
            if o.object_id != i {
                return Err(Error::format(
                    "scene",
                    format!("object ids must be 0..n-1, found {} at {i}", o.object_id),
                ));
            }
            if o.mask.grid() != grid {
                return Err(Error::GridMismatch {
                    a: grid,
                    b: o.mask.grid(),
                });
            }
            if o.mask.is_empty() {
                return Err(Error::DegenerateMask);
            }
        }
        let oracle_relations = oracle_triples(&objects, rules);
        Ok(Self {
            scene_id: scene_id.into(),
            grid,
            objects,
            oracle_relations,
        })
    }

    pub fn diagonal(&self) -> f64 {
        grid_diagonal(self.grid)
    }
}

fn grid_diagonal((w, h): (usize, usize)) -> f64 {
    ((w * w + h * h) as f64).sqrt()
}

fn oracle_triples(objects: &[SceneObject], rules: &OracleRules) -> Vec<RelationTriple> {
    let mut out = Vec::new();
    for a in objects {
        for b in objects {
            if a.object_id == b.object_id {
                continue;
            }
            for relation in relation_oracle_with(a, b, rules).iter() {
                out.push(RelationTriple {
                    subject: a.object_id,
                    relation,
                    object: b.object_id,
                });
            }
        }
    }
    out
}

pub fn relation_oracle(a: &SceneObject, b: &SceneObject) -> RelationSet {
    relation_oracle_with(a, b, &OracleRules::default())
}

/// Relations of `a` with respect to `b`, viewer-centric, `y` growing downward.
pub fn relation_oracle_with(a: &SceneObject, b: &SceneObject, rules: &OracleRules) -> RelationSet {
    let mut set = RelationSet::default();
    let dx = b.centroid.0 - a.centroid.0;
    let dy = b.centroid.1 - a.centroid.1;
    if dx != 0.0 && dx.abs() >= rules.dominance_ratio * dy.abs() {
        set.insert(if dx > 0.0 {
            Relation::LeftOf
        } else {
            Relation::RightOf
        });
    }
    if dy != 0.0 && dy.abs() >= rules.dominance_ratio * dx.abs() {
        set.insert(if dy > 0.0 {
            Relation::Above
        } else {
            Relation::Below
        });
    }
    if a.mask.intersects(&b.mask) {
        set.insert(Relation::Overlapping);
    }
    let dist = (dx * dx + dy * dy).sqrt();
    if dist < rules.near_fraction * grid_diagonal(a.mask.grid()) {
        set.insert(Relation::Near);
    } else {
        set.insert(Relation::Far);
    }
    set
}

/// Rasterizes a shape inside the box `[x0, x0+w) x [y0, y0+h)` by testing pixel centres.
pub fn rasterize(
    kind: ShapeKind,
    grid: (usize, usize),
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
) -> BinaryMask {
    let mut m = BinaryMask::empty(grid.0, grid.1);
    let (fw, fh) = (w as f64, h as f64);
    for y in y0..(y0 + h).min(grid.1) {
        for x in x0..(x0 + w).min(grid.0) {
            let px = (x - x0) as f64 + 0.5;
            let py = (y - y0) as f64 + 0.5;
            let inside = match kind {
                ShapeKind::Rectangle => true,
                ShapeKind::Disk => {
                    let (cx, cy) = (fw / 2.0, fh / 2.0);
                    let nx = (px - cx) / (fw / 2.0);
                    let ny = (py - cy) / (fh / 2.0);
                    nx * nx + ny * ny <= 1.0
                }
                ShapeKind::Triangle => {
                    // apex at top centre, base along the bottom edge
                    let half = fw / 2.0 * (py / fh);
                    (px - fw / 2.0).abs() <= half
                }
            };
            if inside {
                m.set(x, y, true);
            }
        }
    }
    m
}

fn extent_band(config: &SceneGenConfig, attribute_id: usize) -> (usize, usize) {
    let span = config.max_extent - config.min_extent + 1;
    let n = config.n_attributes.min(span);
    let a = attribute_id % n;
    let lo = config.min_extent + a * span / n;
    let hi = config.min_extent + (a + 1) * span / n - 1;
    (lo, hi.max(lo))
}

/// Generates the scene for `(seed, scene_id)`. The same pair always yields the
/// same scene.
pub fn generate_scene(seed: u64, scene_id: &str, config: &SceneGenConfig) -> Result<Scene> {
    config.validate()?;
    let mut rng = seed::keyed_rng(seed, seed::DATAGEN, scene_id);
    let grid = (config.grid_width, config.grid_height);
    let n = rng.gen_range(config.objects_min..=config.objects_max);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for object_id in 0..n {
        let label_id = rng.gen_range(0..config.n_labels);
        let attribute_id = rng.gen_range(0..config.n_attributes);
        let kind = ShapeKind::for_label(label_id);
        let (lo, hi) = extent_band(config, attribute_id);
        let mut placed = None;
        for _ in 0..config.placement_retries {
            let major = rng.gen_range(lo..=hi);
            let minor = match kind {
                ShapeKind::Disk => major,
                _ => rng.gen_range((major / 2).max(3)..=major),
            };
            let (w, h) = if rng.gen_bool(0.5) {
                (major, minor)
            } else {
                (minor, major)
            };
            let x0 = rng.gen_range(0..=grid.0 - w);
            let y0 = rng.gen_range(0..=grid.1 - h);
            let mask = rasterize(kind, grid, x0, y0, w, h);
            let area = mask.count();
            if area < MIN_OBJECT_PIXELS {
                continue;
            }
            let crowded = objects.iter().any(|o| {
                let limit = config.max_overlap * area.min(o.mask.count()) as f64;
                mask.intersection_count(&o.mask) as f64 > limit
            });
            if crowded {
                continue;
            }
            placed = Some(mask);
            break;
        }
        let mask = placed.ok_or(Error::PlacementExhausted {
            object: object_id,
            attempts: config.placement_retries,
        })?;
        objects.push(SceneObject::new(object_id, label_id, attribute_id, mask)?);
    }
    Scene::from_objects(scene_id, objects, &config.oracle)
}
