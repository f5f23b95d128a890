//! Force histograms between two masks and the symmetric force banner.
//!
//! For every pair of set pixels `a ∈ A`, `b ∈ B` at distance `d > 0` the
//! directed histogram `F_AB` receives `1 / d^r` in the angle bin of the vector
//! `b - a`, for each force level `r`. The result is divided by `|A|·|B|`.
//! Pairs at distance zero (shared pixels) contribute nothing.
//!
//! Angles use the mathematical orientation (counter-clockwise, `y` up), so an
//! image-space offset `(dx, dy)` has angle `atan2(-dy, dx)`. Bin `k` is centred
//! on `k·2π/|Θ|` and spans half a bin width either side.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceConfig {
    pub theta_bins: usize,
    pub levels: Vec<u32>,
}

impl Default for ForceConfig {
    fn default() -> Self {
        Self {
            theta_bins: 64,
            levels: vec![0, 2],
        }
    }
}

impl ForceConfig {
    pub fn new(theta_bins: usize, levels: &[u32]) -> Self {
        Self {
            theta_bins,
            levels: levels.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_bins < 2 || self.theta_bins % 2 != 0 {
            return Err(Error::Config(format!(
                "theta_bins must be even and >= 2, got {}",
                self.theta_bins
            )));
        }
        let mut sorted = self.levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if self.levels.is_empty() || sorted.len() != self.levels.len() {
            return Err(Error::Config(format!(
                "force levels must be non-empty and unique, got {:?}",
                self.levels
            )));
        }
        Ok(())
    }

    pub fn descriptor_len(&self) -> usize {
        self.theta_bins * self.levels.len()
    }

    /// Short content hash used to key banner caches.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("theta_bins={};levels={:?}", self.theta_bins, self.levels));
        hex::encode(&h.finalize()[..8])
    }
}

/// Angle bin of the image-space offset `(dx, dy)`.
#[inline]
pub fn angle_bin(dx: i64, dy: i64, theta_bins: usize) -> usize {
    let theta = (-(dy as f64)).atan2(dx as f64);
    let t = theta / (2.0 * PI / theta_bins as f64);
    ((t + 0.5).floor() as i64).rem_euclid(theta_bins as i64) as usize
}

/// `1 / d^r` for squared distance `d2 > 0`.
#[inline]
pub fn level_weight(d2: i64, r: u32) -> f64 {
    if r == 0 {
        1.0
    } else {
        (d2 as f64).sqrt().powi(-(r as i32))
    }
}

/// Values laid out `theta`-major: index `bin * levels.len() + level_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceHistogram {
    pub theta_bins: usize,
    pub levels: Vec<u32>,
    pub values: Vec<f64>,
}

impl ForceHistogram {
    fn zeros(config: &ForceConfig) -> Self {
        Self {
            theta_bins: config.theta_bins,
            levels: config.levels.clone(),
            values: vec![0.0; config.descriptor_len()],
        }
    }

    #[inline]
    pub fn get(&self, bin: usize, level_index: usize) -> f64 {
        self.values[bin * self.levels.len() + level_index]
    }

    /// Sum over angle bins for one level.
    pub fn level_mass(&self, level_index: usize) -> f64 {
        (0..self.theta_bins).map(|b| self.get(b, level_index)).sum()
    }
}

/// Symmetric descriptor; same layout as [`ForceHistogram`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForceBanner {
    pub theta_bins: usize,
    pub levels: Vec<u32>,
    pub values: Vec<f64>,
}

impl ForceBanner {
    #[inline]
    pub fn get(&self, bin: usize, level_index: usize) -> f64 {
        self.values[bin * self.levels.len() + level_index]
    }

    pub fn config(&self) -> ForceConfig {
        ForceConfig::new(self.theta_bins, &self.levels)
    }

    /// Tab-separated `bin, r, value` dump.
    pub fn dump(&self) -> String {
        let mut out = format!("# theta_bins={} levels={:?}\nbin\tr\tvalue\n", self.theta_bins, self.levels);
        for bin in 0..self.theta_bins {
            for (li, r) in self.levels.iter().enumerate() {
                let _ = writeln!(out, "{bin}\t{r}\t{}", self.get(bin, li));
            }
        }
        out
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize)> {
    if a.grid() != b.grid() {
        return Err(Error::GridMismatch {
            a: a.grid(),
            b: b.grid(),
        });
    }
    let (na, nb) = (a.count(), b.count());
    if na == 0 || nb == 0 {
        return Err(Error::DegenerateMask);
    }
    Ok((na, nb))
}

fn zero_distance_guard(a: &BinaryMask, b: &BinaryMask, na: usize, nb: usize, config: &ForceConfig) -> Result<()> {
    if na == 1 && nb == 1 && a == b && config.levels.iter().any(|&r| r > 0) {
        return Err(Error::ZeroDistancePair);
    }
    Ok(())
}

/// Directed histogram `F_AB`.
///
/// Pixel pairs are first tallied per integer offset, then each occupied
/// offset contributes `count · 1/d^r` in a fixed ascending offset order, so
/// the result never depends on how the tally was produced.
pub fn force_histogram(a: &BinaryMask, b: &BinaryMask, config: &ForceConfig) -> Result<ForceHistogram> {
    config.validate()?;
    let (na, nb) = check_pair(a, b)?;
    zero_distance_guard(a, b, na, nb, config)?;

    let (w, h) = (a.width() as i64, a.height() as i64);
    let span_x = 2 * w - 1;
    let span_y = 2 * h - 1;
    // offset (dx, dy) lives at (dy + h - 1) * span_x + (dx + w - 1)
    let mut counts = vec![0u64; (span_x * span_y) as usize];
    let b_keys: Vec<usize> = b
        .pixels()
        .map(|(x, y)| (y as i64 * span_x + x as i64) as usize)
        .collect();
    for (ax, ay) in a.pixels() {
        let base = ((h - 1 - ay as i64) * span_x + (w - 1 - ax as i64)) as usize;
        for &k in &b_keys {
            counts[base + k] += 1;
        }
    }

    let mut hist = ForceHistogram::zeros(config);
    let nl = config.levels.len();
    for (idx, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let dx = idx as i64 % span_x - (w - 1);
        let dy = idx as i64 / span_x - (h - 1);
        let d2 = dx * dx + dy * dy;
        if d2 == 0 {
            continue;
        }
        let bin = angle_bin(dx, dy, config.theta_bins);
        for (li, &r) in config.levels.iter().enumerate() {
            hist.values[bin * nl + li] += c as f64 * level_weight(d2, r);
        }
    }
    let norm = (na * nb) as f64;
    for v in &mut hist.values {
        *v /= norm;
    }
    Ok(hist)
}

/// Literal double loop over all pixel pairs; the reference definition.
pub fn brute_force_histogram(a: &BinaryMask, b: &BinaryMask, config: &ForceConfig) -> Result<ForceHistogram> {
    config.validate()?;
    let (na, nb) = check_pair(a, b)?;
    zero_distance_guard(a, b, na, nb, config)?;
    let mut hist = ForceHistogram::zeros(config);
    let nl = config.levels.len();
    for (ax, ay) in a.pixels() {
        for (bx, by) in b.pixels() {
            let dx = bx as i64 - ax as i64;
            let dy = by as i64 - ay as i64;
            let d2 = dx * dx + dy * dy;
            if d2 == 0 {
                continue;
            }
            let bin = angle_bin(dx, dy, config.theta_bins);
            for (li, &r) in config.levels.iter().enumerate() {
                hist.values[bin * nl + li] += level_weight(d2, r);
            }
        }
    }
    let norm = (na * nb) as f64;
    for v in &mut hist.values {
        *v /= norm;
    }
    Ok(hist)
}

/// `(F_AB + F_BA) / 2`. Floating-point addition is commutative, so swapping
/// the arguments yields a bit-identical banner.
pub fn symmetric_force_banner(a: &BinaryMask, b: &BinaryMask, config: &ForceConfig) -> Result<ForceBanner> {
    let fab = force_histogram(a, b, config)?;
    let fba = force_histogram(b, a, config)?;
    Ok(ForceBanner {
        theta_bins: config.theta_bins,
        levels: config.levels.clone(),
        values: fab
            .values
            .iter()
            .zip(&fba.values)
            .map(|(x, y)| (x + y) / 2.0)
            .collect(),
    })
}

/// Angle bin holding the largest `r = 0` value (first level if `r = 0` is not
/// configured). Ties resolve to the lowest bin.
pub fn dominant_direction(banner: &ForceBanner) -> Result<usize> {
    let li = banner.levels.iter().position(|&r| r == 0).unwrap_or(0);
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for bin in 0..banner.theta_bins {
        let v = banner.get(bin, li);
        if !v.is_finite() {
            return Err(Error::NonFinite("dominant_direction"));
        }
        if v > best_val {
            best_val = v;
            best = bin;
        }
    }
    if best_val <= 0.0 {
        return Err(Error::UndefinedDirection);
    }
    Ok(best)
}

const CACHE_MAGIC: &[u8; 4] = b"MSFB";
const CACHE_VERSION: u32 = 1;

/// One cached banner for the object pair `(i, j)`, `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedBanner {
    pub i: u32,
    pub j: u32,
    pub banner: ForceBanner,
}

/// Cache file path for a scene under a config: `<dir>/<scene_id>.<config-hash>.sfb`.
pub fn banner_cache_path(dir: &Path, scene_id: &str, config: &ForceConfig) -> std::path::PathBuf {
    dir.join(format!("{scene_id}.{}.sfb", config.hash()))
}

/// Binary layout: `b"MSFB"`, then little-endian `u32` version, theta bins,
/// level count, the levels, pair count; then per pair `u32 i`, `u32 j` and
/// `theta_bins·levels` `f64` values.
pub fn encode_banner_cache(config: &ForceConfig, entries: &[CachedBanner]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.theta_bins as u32).to_le_bytes());
    out.extend_from_slice(&(config.levels.len() as u32).to_le_bytes());
    for r in &config.levels {
        out.extend_from_slice(&r.to_le_bytes());
    }
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&e.i.to_le_bytes());
        out.extend_from_slice(&e.j.to_le_bytes());
        for v in &e.banner.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("banner cache", "truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_banner_cache(bytes: &[u8]) -> Result<(ForceConfig, Vec<CachedBanner>)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err(Error::format("banner cache", "bad magic"));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::format("banner cache", format!("version {version}")));
    }
    let theta_bins = c.u32()? as usize;
    let nl = c.u32()? as usize;
    let levels = (0..nl).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    let config = ForceConfig { theta_bins, levels };
    let n = c.u32()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let i = c.u32()?;
        let j = c.u32()?;
        let values = (0..config.descriptor_len())
            .map(|_| c.f64())
            .collect::<Result<Vec<_>>>()?;
        entries.push(CachedBanner {
            i,
            j,
            banner: ForceBanner {
                theta_bins,
                levels: config.levels.clone(),
                values,
            },
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::format("banner cache", "trailing bytes"));
    }
    Ok((config, entries))
}

pub fn write_banner_cache(path: &Path, config: &ForceConfig, entries: &[CachedBanner]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_banner_cache(config, entries)).map_err(|e| Error::io(path, e))
}

pub fn read_banner_cache(path: &Path, expected: &ForceConfig) -> Result<Vec<CachedBanner>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, entries) = decode_banner_cache(&bytes)?;
    if &config != expected {
        return Err(Error::format("banner cache", "config mismatch"));
    }
    Ok(entries)
}
