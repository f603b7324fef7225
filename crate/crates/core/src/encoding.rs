//! Multi-resolution hash-grid encoding and the degenerate 2D/color encodings used for
//! ablations.
//!
//! Each level `l` is a virtual voxel grid with `N_l = floor(N_min * b^l)` cells per axis
//! over the domain box. A point is clamped into the box, its 8 surrounding vertices are
//! mapped to table slots (dense indexing when the level fits, spatial hash otherwise), and
//! the `F` features stored at those slots are trilinearly interpolated. Level outputs are
//! concatenated in level order.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-axis primes of the spatial hash.
const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

/// Half-width of the uniform initialization range of table entries.
pub const INIT_RANGE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    /// Maximum entries per level; must be a power of two.
    pub table_size: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    pub domain_min: [f64; 3],
    pub domain_max: [f64; 3],
}

impl Default for HashGridConfig {
    fn default() -> Self {
        let levels = 16;
        Self {
            levels,
            features_per_level: 2,
            table_size: 1 << 19,
            base_resolution: 16,
            growth_factor: Self::growth_for(16, 512, levels),
            domain_min: [-1.0; 3],
            domain_max: [1.0; 3],
        }
    }
}

impl HashGridConfig {
    /// Growth factor that takes `base` to `finest` cells per axis over `levels` levels.
    pub fn growth_for(base: usize, finest: usize, levels: usize) -> f64 {
        if levels <= 1 {
            return 2.0;
        }
        (finest as f64 / base as f64).powf(1.0 / (levels - 1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.levels == 0 || self.features_per_level == 0 {
            return bad("hash grid needs at least one level and one feature".into());
        }
        if !self.table_size.is_power_of_two() {
            return bad(format!("table size {} is not a power of two", self.table_size));
        }
        if !(self.growth_factor > 1.0) {
            return bad(format!("growth factor must exceed 1, got {}", self.growth_factor));
        }
        if self.base_resolution == 0 {
            return bad("base resolution must be positive".into());
        }
        if (0..3).any(|k| !(self.domain_min[k] < self.domain_max[k])) {
            return bad("domain_min must be below domain_max on every axis".into());
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        let r = self.base_resolution as f64 * self.growth_factor.powi(level as i32);
        // guard against b^l landing a hair under an integer
        (r + 1e-9).floor().max(1.0) as usize
    }

    /// Number of table slots allocated for `level`.
    pub fn level_entries(&self, level: usize) -> usize {
        let side = self.level_resolution(level) as u128 + 1;
        let dense = side * side * side;
        dense.min(self.table_size as u128) as usize
    }
}

/// Table slot of integer vertex `coords` on a level with `resolution` cells per axis.
///
/// Uses collision-free dense indexing when `(resolution + 1)^3 <= table_size`.
#[inline]
pub fn hash_vertex(resolution: usize, coords: [u32; 3], table_size: usize) -> usize {
    let side = resolution as u64 + 1;
    if side * side * side <= table_size as u64 {
        (coords[0] as u64 + side * (coords[1] as u64 + side * coords[2] as u64)) as usize
    } else {
        let h = coords[0].wrapping_mul(HASH_PRIMES[0])
            ^ coords[1].wrapping_mul(HASH_PRIMES[1])
            ^ coords[2].wrapping_mul(HASH_PRIMES[2]);
        (h as usize) & (table_size - 1)
    }
}

/// The 8 interpolation corners of a point on one level.
#[derive(Debug, Clone, Copy)]
struct LevelCorners {
    /// Flat parameter offset of each corner's feature vector.
    offsets: [usize; 8],
    weights: [f64; 8],
    frac: [f64; 3],
    /// d(frac)/dx per axis; zero on axes where the point was clamped.
    dfrac_dx: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashGridStack {
    config: HashGridConfig,
    level_offsets: Vec<usize>,
    params: Vec<f64>,
}

impl HashGridStack {
    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let f = config.features_per_level;
        let mut level_offsets = Vec::with_capacity(config.levels + 1);
        let mut total = 0;
        for l in 0..config.levels {
            level_offsets.push(total);
            total += config.level_entries(l) * f;
        }
        level_offsets.push(total);
        Ok(Self { config, level_offsets, params: vec![0.0; total] })
    }

    /// Table entries drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn init(config: HashGridConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut g = Self::zeros(config)?;
        for p in &mut g.params {
            *p = rng.random_range(-INIT_RANGE..=INIT_RANGE);
        }
        Ok(g)
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// All table entries, level after level, `F` scalars per slot.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Flat offset of the feature vector at `slot` of `level`.
    pub fn slot_offset(&self, level: usize, slot: usize) -> usize {
        self.level_offsets[level] + slot * self.config.features_per_level
    }

    fn corners(&self, level: usize, x: [f64; 3]) -> LevelCorners {
        let cfg = &self.config;
        let res = cfg.level_resolution(level);
        let entries = cfg.level_entries(level);
        let mut base = [0u32; 3];
        let mut frac = [0.0; 3];
        let mut dfrac_dx = [0.0; 3];
        for k in 0..3 {
            let extent = cfg.domain_max[k] - cfg.domain_min[k];
            let t = (x[k] - cfg.domain_min[k]) / extent;
            let inside = (0.0..=1.0).contains(&t);
            let s = t.clamp(0.0, 1.0) * res as f64;
            let b = (s.floor() as usize).min(res - 1);
            base[k] = b as u32;
            frac[k] = s - b as f64;
            if inside {
                dfrac_dx[k] = res as f64 / extent;
            }
        }
        let mut offsets = [0; 8];
        let mut weights = [0.0; 8];
        for (c, (off, w)) in offsets.iter_mut().zip(&mut weights).enumerate() {
            let mut v = base;
            let mut weight = 1.0;
            for k in 0..3 {
                if c >> k & 1 == 1 {
                    v[k] += 1;
                    weight *= frac[k];
                } else {
                    weight *= 1.0 - frac[k];
                }
            }
            *off = self.slot_offset(level, hash_vertex(res, v, entries));
            *w = weight;
        }
        LevelCorners { offsets, weights, frac, dfrac_dx }
    }

    /// Concatenated level features at world point `x` (length `L * F`).
    pub fn query(&self, x: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.query_into(x, &mut out);
        out
    }

    pub fn query_into(&self, x: [f64; 3], out: &mut [f64]) {
        let f = self.config.features_per_level;
        debug_assert_eq!(out.len(), self.output_dim());
        for (level, chunk) in out.chunks_exact_mut(f).enumerate() {
            let lc = self.corners(level, x);
            chunk.fill(0.0);
            for (off, w) in lc.offsets.iter().zip(&lc.weights) {
                for (o, p) in chunk.iter_mut().zip(&self.params[*off..*off + f]) {
                    *o += w * p;
                }
            }
        }
    }

    /// Calls `scatter(param_index, gradient)` for every touched table entry and returns
    /// the gradient with respect to `x`.
    pub fn backward_with(
        &self,
        x: [f64; 3],
        upstream: &[f64],
        mut scatter: impl FnMut(usize, f64),
    ) -> [f64; 3] {
        let f = self.config.features_per_level;
        debug_assert_eq!(upstream.len(), self.output_dim());
        let mut dx = [0.0; 3];
        for (level, up) in upstream.chunks_exact(f).enumerate() {
            let lc = self.corners(level, x);
            for c in 0..8 {
                let off = lc.offsets[c];
                let feat = &self.params[off..off + f];
                let w = lc.weights[c];
                // d(output)/d(weight) contracted with the upstream gradient
                let mut g_w = 0.0;
                for j in 0..f {
                    scatter(off + j, w * up[j]);
                    g_w += up[j] * feat[j];
                }
                for (k, dxk) in dx.iter_mut().enumerate() {
                    if lc.dfrac_dx[k] == 0.0 {
                        continue;
                    }
                    let mut dw = if c >> k & 1 == 1 { 1.0 } else { -1.0 };
                    for j in 0..3 {
                        if j != k {
                            dw *= if c >> j & 1 == 1 { lc.frac[j] } else { 1.0 - lc.frac[j] };
                        }
                    }
                    *dxk += g_w * dw * lc.dfrac_dx[k];
                }
            }
        }
        dx
    }

    /// Sparse table gradients (one entry per touched scalar, duplicates merged) and the
    /// position gradient.
    pub fn query_backward(&self, x: [f64; 3], upstream: &[f64]) -> GridGradient {
        let mut table: Vec<(usize, f64)> = Vec::with_capacity(8 * upstream.len());
        let position = self.backward_with(x, upstream, |i, g| table.push((i, g)));
        table.sort_by_key(|(i, _)| *i);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(table.len());
        for (i, g) in table {
            match merged.last_mut() {
                Some((j, acc)) if *j == i => *acc += g,
                _ => merged.push((i, g)),
            }
        }
        GridGradient { table: merged, position }
    }

    /// Interpolation weights of the 8 corners on each level (test and diagnostics helper).
    pub fn level_weights(&self, x: [f64; 3]) -> Vec<[f64; 8]> {
        (0..self.config.levels).map(|l| self.corners(l, x).weights).collect()
    }

    pub(crate) fn from_parts(config: HashGridConfig, params: Vec<f64>) -> Result<Self> {
        let mut g = Self::zeros(config)?;
        if params.len() != g.params.len() {
            return Err(Error::Checkpoint(format!(
                "grid block has {} values, config implies {}",
                params.len(),
                g.params.len()
            )));
        }
        g.params = params;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient {
    /// `(flat parameter index, gradient)`, sorted by index.
    pub table: Vec<(usize, f64)>,
    pub position: [f64; 3],
}

/// What the positional part of the MLP input is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    /// Hash-grid features of the back-projected world point.
    #[default]
    Xyz,
    Uv,
    Depth,
    UvDepth,
    Color,
}

impl EncodingKind {
    pub const ALL: [EncodingKind; 5] =
        [EncodingKind::Xyz, EncodingKind::Uv, EncodingKind::Depth, EncodingKind::UvDepth, EncodingKind::Color];

    pub fn as_str(self) -> &'static str {
        match self {
            EncodingKind::Xyz => "xyz",
            EncodingKind::Uv => "uv",
            EncodingKind::Depth => "depth",
            EncodingKind::UvDepth => "uv_depth",
            EncodingKind::Color => "color",
        }
    }

    /// Number of scalar quantities fed to the positional encoding.
    fn quantities(self) -> usize {
        match self {
            EncodingKind::Xyz => 3,
            EncodingKind::Uv => 2,
            EncodingKind::Depth => 1,
            EncodingKind::UvDepth => 3,
            EncodingKind::Color => 3,
        }
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EncodingKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown encoding kind '{s}' (expected xyz, uv, depth, uv_depth or color)")))
    }
}

/// Sine/cosine positional encoding of per-pixel quantities, padded to the grid width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationEncoding {
    pub kind: EncodingKind,
    /// Frequency bands per quantity; `None` picks `min(8, dim / (2 * quantities))`.
    pub pe_frequencies: Option<usize>,
    /// Depth values are mapped to `[0, 1]` over this range.
    pub depth_range: [f64; 2],
}

impl Default for AblationEncoding {
    fn default() -> Self {
        Self { kind: EncodingKind::Xyz, pe_frequencies: None, depth_range: [0.0, 10.0] }
    }
}

/// Inputs available to the degenerate encodings for one query location.
#[derive(Debug, Clone, Copy)]
pub struct PixelInputs {
    pub pixel: [f64; 2],
    pub image_size: [usize; 2],
    pub depth: f64,
    pub color: [f64; 3],
}

impl AblationEncoding {
    pub fn with_kind(kind: EncodingKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn frequencies(&self, dim: usize) -> usize {
        self.pe_frequencies
            .unwrap_or_else(|| (dim / (2 * self.kind.quantities())).min(8))
            .max(1)
    }

    /// Encoded features of exactly `dim` entries.
    pub fn encode(&self, inputs: &PixelInputs, dim: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; dim];
        self.encode_into(inputs, &mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, inputs: &PixelInputs, out: &mut [f64]) -> Result<()> {
        let u = (inputs.pixel[0] / inputs.image_size[0] as f64).clamp(0.0, 1.0);
        let v = (inputs.pixel[1] / inputs.image_size[1] as f64).clamp(0.0, 1.0);
        let [d0, d1] = self.depth_range;
        let d = ((inputs.depth - d0) / (d1 - d0)).clamp(0.0, 1.0);
        let c = inputs.color.map(|x| x.clamp(0.0, 1.0));
        let q: &[f64] = match self.kind {
            EncodingKind::Xyz => {
                return Err(Error::Config("xyz features come from the hash grid, not the ablation encoder".into()))
            }
            EncodingKind::Uv => &[u, v],
            EncodingKind::Depth => &[d],
            EncodingKind::UvDepth => &[u, v, d],
            EncodingKind::Color => &c,
        };
        positional_encoding(q, self.frequencies(out.len()), out);
        Ok(())
    }
}

/// Writes `sin(2^k pi q), cos(2^k pi q)` for each quantity `q` and band `k`, zero-padding
/// or truncating to `out.len()`.
pub fn positional_encoding(quantities: &[f64], frequencies: usize, out: &mut [f64]) {
    out.fill(0.0);
    let mut slots = out.iter_mut();
    'outer: for q in quantities {
        for k in 0..frequencies {
            let a = (1u64 << k) as f64 * std::f64::consts::PI * q;
            for val in [a.sin(), a.cos()] {
                match slots.next() {
                    Some(s) => *s = val,
                    None => break 'outer,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn small_config() -> HashGridConfig {
        HashGridConfig {
            levels: 4,
            features_per_level: 2,
            table_size: 1 << 10,
            base_resolution: 4,
            growth_factor: 2.0,
            domain_min: [-1.0, -2.0, 0.0],
            domain_max: [1.0, 2.0, 3.0],
        }
    }

    fn random_grid(cfg: HashGridConfig, seed: u64) -> HashGridStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = HashGridStack::zeros(cfg).unwrap();
        for p in g.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        g
    }

    fn vertex_world(cfg: &HashGridConfig, level: usize, v: [u32; 3]) -> [f64; 3] {
        let res = cfg.level_resolution(level) as f64;
        std::array::from_fn(|k| cfg.domain_min[k] + (cfg.domain_max[k] - cfg.domain_min[k]) * v[k] as f64 / res)
    }

    #[test]
    fn default_config_reaches_finest_resolution() {
        let c = HashGridConfig::default();
        assert_eq!(c.level_resolution(0), 16);
        assert_eq!(c.level_resolution(15), 512);
        assert_eq!(c.output_dim(), 32);
    }

    #[test]
    fn hash_is_deterministic_and_dense_branch_is_injective() {
        assert_eq!(hash_vertex(600, [3, 9, 27], 1 << 19), hash_vertex(600, [3, 9, 27], 1 << 19));
        // 16^3 vertices on a 15-cell level, table 2^19: dense indexing
        let mut seen = HashSet::new();
        for z in 0..16u32 {
            for y in 0..16u32 {
                for x in 0..16u32 {
                    let i = hash_vertex(15, [x, y, z], 1 << 19);
                    assert!(i < 1 << 19);
                    assert!(seen.insert(i));
                }
            }
        }
        assert_eq!(seen.len(), 4096);
    }

    #[test]
    fn hash_collision_rate_near_uniform() {
        // 1e5 distinct vertices of the finest default level into 2^19 slots. Under a
        // uniform hash the expected number of occupied slots is T(1 - (1 - 1/T)^n).
        let t = 1usize << 19;
        let n = 100_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut verts = HashSet::new();
        while verts.len() < n {
            verts.insert([rng.random_range(0..=512u32), rng.random_range(0..=512u32), rng.random_range(0..=512u32)]);
        }
        let occupied: HashSet<usize> = verts.iter().map(|v| hash_vertex(512, *v, t)).collect();
        let collisions = n - occupied.len();
        let expected_occupied = t as f64 * (1.0 - (1.0 - 1.0 / t as f64).powi(n as i32));
        let expected = n as f64 - expected_occupied;
        assert!((collisions as f64) < 2.0 * expected, "{collisions} vs {expected}");
        assert!((collisions as f64) > 0.5 * expected, "{collisions} vs {expected}");
    }

    #[test]
    fn vertex_query_returns_stored_entry() {
        let cfg = small_config();
        let g = random_grid(cfg.clone(), 1);
        let level = 2;
        let v = [3u32, 5, 7];
        let x = vertex_world(&cfg, level, v);
        let out = g.query(x);
        let res = cfg.level_resolution(level);
        let off = g.slot_offset(level, hash_vertex(res, v, cfg.level_entries(level)));
        for j in 0..2 {
            assert!((out[level * 2 + j] - g.params()[off + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_midpoint_averages_endpoints() {
        let cfg = small_config();
        let g = random_grid(cfg.clone(), 2);
        let level = 1;
        let res = cfg.level_resolution(level);
        let (a, b) = ([2u32, 3, 4], [3u32, 3, 4]);
        let (xa, xb) = (vertex_world(&cfg, level, a), vertex_world(&cfg, level, b));
        let mid: [f64; 3] = std::array::from_fn(|k| 0.5 * (xa[k] + xb[k]));
        let out = g.query(mid);
        let oa = g.slot_offset(level, hash_vertex(res, a, cfg.level_entries(level)));
        let ob = g.slot_offset(level, hash_vertex(res, b, cfg.level_entries(level)));
        for j in 0..2 {
            let want = 0.5 * (g.params()[oa + j] + g.params()[ob + j]);
            assert!((out[level * 2 + j] - want).abs() < 1e-12);
        }
    }

    /// Independent interpolation: materialize the 8 corner feature vectors from integer
    /// coordinates and blend them with explicitly written trilinear weights.
    fn dense_oracle(g: &HashGridStack, x: [f64; 3]) -> Vec<f64> {
        let cfg = g.config();
        let f = cfg.features_per_level;
        let mut out = Vec::new();
        for level in 0..cfg.levels {
            let res = cfg.level_resolution(level);
            let n = res as f64;
            let mut i0 = [0u32; 3];
            let mut t = [0.0; 3];
            for k in 0..3 {
                let s = ((x[k] - cfg.domain_min[k]) / (cfg.domain_max[k] - cfg.domain_min[k])).clamp(0.0, 1.0) * n;
                let i = (s.floor() as u32).min(res as u32 - 1);
                i0[k] = i;
                t[k] = s - i as f64;
            }
            let fetch = |dx: u32, dy: u32, dz: u32| -> Vec<f64> {
                let slot = hash_vertex(res, [i0[0] + dx, i0[1] + dy, i0[2] + dz], cfg.level_entries(level));
                let off = g.slot_offset(level, slot);
                g.params()[off..off + f].to_vec()
            };
            let (c000, c100, c010, c110) = (fetch(0, 0, 0), fetch(1, 0, 0), fetch(0, 1, 0), fetch(1, 1, 0));
            let (c001, c101, c011, c111) = (fetch(0, 0, 1), fetch(1, 0, 1), fetch(0, 1, 1), fetch(1, 1, 1));
            for j in 0..f {
                let c00 = c000[j] * (1.0 - t[0]) + c100[j] * t[0];
                let c10 = c010[j] * (1.0 - t[0]) + c110[j] * t[0];
                let c01 = c001[j] * (1.0 - t[0]) + c101[j] * t[0];
                let c11 = c011[j] * (1.0 - t[0]) + c111[j] * t[0];
                let c0 = c00 * (1.0 - t[1]) + c10 * t[1];
                let c1 = c01 * (1.0 - t[1]) + c11 * t[1];
                out.push(c0 * (1.0 - t[2]) + c1 * t[2]);
            }
        }
        out
    }

    #[test]
    fn random_queries_match_dense_oracle() {
        let mut cfg = small_config();
        cfg.table_size = 1 << 8; // force hashing on the finer levels
        let g = random_grid(cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let x = [rng.random_range(-1.2..1.2), rng.random_range(-2.2..2.2), rng.random_range(-0.2..3.2)];
            let got = g.query(x);
            let want = dense_oracle(&g, x);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
        (f(h) - f(-h)) / (2.0 * h)
    }

    #[test]
    fn table_gradient_matches_finite_differences() {
        let cfg = small_config();
        let g = random_grid(cfg, 5);
        let x = [0.123, -0.77, 1.91];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let up: Vec<f64> = (0..g.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |g: &HashGridStack| g.query(x).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let grad = g.query_backward(x, &up);
        assert_eq!(grad.table.len(), 8 * 4 * 2);
        for &(i, analytic) in &grad.table {
            let numeric = central_difference(
                |h| {
                    let mut gg = g.clone();
                    gg.params_mut()[i] += h;
                    loss(&gg)
                },
                1e-5,
            );
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
            assert!(rel < 1e-6, "param {i}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn position_gradient_matches_finite_differences() {
        let cfg = small_config();
        let g = random_grid(cfg, 8);
        let x = [0.031, 0.377, 1.2345];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let up: Vec<f64> = (0..g.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |x: [f64; 3]| g.query(x).iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let analytic = g.query_backward(x, &up).position;
        for k in 0..3 {
            let numeric = central_difference(
                |h| {
                    let mut xx = x;
                    xx[k] += h;
                    loss(xx)
                },
                1e-7,
            );
            let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(1e-12);
            assert!(rel < 1e-5, "axis {k}: {} vs {numeric}", analytic[k]);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let g = random_grid(small_config(), 10);
        let grad = g.query_backward([0.1, 0.2, 0.3], &vec![0.0; g.output_dim()]);
        assert!(grad.table.iter().all(|(_, v)| *v == 0.0));
        assert_eq!(grad.position, [0.0; 3]);
    }

    #[test]
    fn clamps_points_outside_domain() {
        let g = random_grid(small_config(), 12);
        assert_eq!(g.query([5.0, -9.0, 1.5]), g.query([1.0, -2.0, 1.5]));
        let grad = g.query_backward([5.0, -9.0, 1.5], &vec![1.0; g.output_dim()]);
        assert_eq!(grad.position[0], 0.0);
        assert_eq!(grad.position[1], 0.0);
    }

    #[test]
    fn init_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = HashGridStack::init(small_config(), &mut rng).unwrap();
        assert!(g.params().iter().all(|v| v.abs() <= INIT_RANGE));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = small_config();
        c.table_size = 1000;
        assert!(HashGridStack::zeros(c).is_err());
        let mut c = small_config();
        c.growth_factor = 1.0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.domain_max[2] = c.domain_min[2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn uv_depth_encoding_matches_hand_table() {
        let enc = AblationEncoding { kind: EncodingKind::UvDepth, pe_frequencies: Some(2), depth_range: [0.0, 2.0] };
        let inputs = PixelInputs { pixel: [32.0, 16.0], image_size: [64, 32], depth: 1.0, color: [0.0; 3] };
        let out = enc.encode(&inputs, 14).unwrap();
        // q = 0.5 for all three: sin(pi/2)=1, cos(pi/2)=0, sin(pi)=0, cos(pi)=-1
        let pi = std::f64::consts::PI;
        let row = [(0.5 * pi).sin(), (0.5 * pi).cos(), pi.sin(), pi.cos()];
        let mut want = Vec::new();
        for _ in 0..3 {
            want.extend_from_slice(&row);
        }
        want.extend_from_slice(&[0.0, 0.0]);
        assert_eq!(out, want);
        assert!((out[0] - 1.0).abs() < 1e-15 && (out[3] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn uv_encoding_ignores_depth_and_color() {
        let enc = AblationEncoding::with_kind(EncodingKind::Uv);
        let a = PixelInputs { pixel: [3.5, 7.5], image_size: [16, 16], depth: 1.0, color: [0.1, 0.2, 0.3] };
        let b = PixelInputs { depth: 4.0, color: [0.9, 0.5, 0.0], ..a };
        assert_eq!(enc.encode(&a, 32).unwrap(), enc.encode(&b, 32).unwrap());
    }

    #[test]
    fn encoding_kind_parses() {
        for k in EncodingKind::ALL {
            assert_eq!(k.as_str().parse::<EncodingKind>().unwrap(), k);
        }
        assert!(matches!("rgb".parse::<EncodingKind>(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn encodings_have_requested_length(dim in 1usize..80, kind_idx in 1usize..5, u in 0.0..64.0f64, d in 0.0..10.0f64) {
            let enc = AblationEncoding::with_kind(EncodingKind::ALL[kind_idx]);
            let inputs = PixelInputs { pixel: [u, 3.0], image_size: [64, 64], depth: d, color: [0.3, 0.6, 0.9] };
            prop_assert_eq!(enc.encode(&inputs, dim).unwrap().len(), dim);
        }

        #[test]
        fn weights_sum_to_one_per_level(x in -1.5..1.5f64, y in -2.5..2.5f64, z in -0.5..3.5f64) {
            let g = HashGridStack::zeros(small_config()).unwrap();
            for w in g.level_weights([x, y, z]) {
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(w.iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn query_is_lipschitz_within_a_voxel(seed in 0u64..50, x in -0.9..0.9f64, dx in -1e-4..1e-4f64) {
            // Lipschitz bound: per level and feature, |df/dx_k| <= 2 * max|entry| * res / extent_k.
            let cfg = small_config();
            let g = random_grid(cfg.clone(), seed);
            let a = [x, 0.3, 1.1];
            let b = [x + dx, 0.3, 1.1];
            let fa = g.query(a);
            let fb = g.query(b);
            let max_entry = g.params().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for l in 0..cfg.levels {
                let lip = 2.0 * max_entry * cfg.level_resolution(l) as f64 / 2.0;
                for j in 0..2 {
                    let i = l * 2 + j;
                    prop_assert!((fa[i] - fb[i]).abs() <= lip * dx.abs() + 1e-15);
                }
            }
        }
    }
}
