//! The appearance module: per-cell affine color transforms decoded from 3D features and a
//! per-view embedding, interpolated to pixels and applied to the rendered image.
//!
//! Feature layout fed to the MLP is `f_0 ++ f_1 ++ ... ++ f_{L-1} ++ embedding`, grid
//! levels first. Checkpoints depend on this order.
//!
//! Affine matrices are 3x4 row-major (`m[4 * r + c]`) and act on homogeneous column colors
//! `[r, g, b, 1]`. The MLP output is an offset from [`M_ID`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{AblationEncoding, EncodingKind, HashGridConfig, HashGridStack, PixelInputs};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap};
use crate::image::Image;
use crate::network::{Activation, Mlp, MlpCache};

pub type Affine = [f64; 12];

pub const M_ID: Affine = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Rows per MLP batch. Fixed so gradient reduction order does not depend on thread count.
const CHUNK_ROWS: usize = 64;

#[inline]
pub fn apply_affine(color: [f64; 3], m: &Affine) -> [f64; 3] {
    std::array::from_fn(|r| m[4 * r] * color[0] + m[4 * r + 1] * color[1] + m[4 * r + 2] * color[2] + m[4 * r + 3])
}

/// Mean absolute deviation from [`M_ID`] over all entries of all matrices.
pub fn identity_regularizer(matrices: &[Affine]) -> f64 {
    if matrices.is_empty() {
        return 0.0;
    }
    let s: f64 = matrices.iter().flat_map(|m| m.iter().zip(&M_ID).map(|(a, b)| (a - b).abs())).sum();
    s / (12 * matrices.len()) as f64
}

/// Subgradient of [`identity_regularizer`] (zero at the kink).
pub fn identity_regularizer_grad(matrices: &[Affine]) -> Vec<Affine> {
    let k = 1.0 / (12 * matrices.len()) as f64;
    matrices
        .iter()
        .map(|m| {
            std::array::from_fn(|i| {
                let d = m[i] - M_ID[i];
                if d > 0.0 {
                    k
                } else if d < 0.0 {
                    -k
                } else {
                    0.0
                }
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppearanceConfig {
    pub grid: HashGridConfig,
    pub encoding: AblationEncoding,
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            encoding: AblationEncoding::default(),
            embedding_dim: 32,
            hidden: vec![128, 64],
            activation: Activation::Relu,
        }
    }
}

impl AppearanceConfig {
    pub fn mlp_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.grid.output_dim() + self.embedding_dim];
        s.extend_from_slice(&self.hidden);
        s.push(12);
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let [d0, d1] = self.encoding.depth_range;
        if !(d1 > d0) {
            return Err(Error::Config("encoding depth range must be increasing".into()));
        }
        Ok(())
    }
}

/// What a query location knows about itself; only the part selected by the encoding kind
/// is used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPoint {
    pub world: [f64; 3],
    pub pixel: [f64; 2],
    pub image_size: [usize; 2],
    pub depth: f64,
    pub color: [f64; 3],
}

/// Borrowed renderer outputs for one view.
#[derive(Debug, Clone, Copy)]
pub struct FrameInputs<'a> {
    pub rendered: &'a Image,
    pub depth: &'a DepthMap,
    pub camera: &'a Camera,
}

impl FrameInputs<'_> {
    fn check(&self) -> Result<()> {
        let (w, h) = (self.rendered.width(), self.rendered.height());
        if self.depth.width() != w || self.depth.height() != h || self.camera.width != w || self.camera.height != h {
            return Err(Error::Dimension("rendered image, depth map and camera sizes disagree".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceModel {
    config: AppearanceConfig,
    grids: HashGridStack,
    mlp: Mlp,
    view_ids: Vec<usize>,
    embeddings: Vec<f64>,
}

/// Gradients for every trainable parameter touched by one frame.
#[derive(Debug, Clone, Default)]
pub struct ModelGrad {
    /// `(flat grid parameter index, gradient)` in deterministic order; may repeat indices.
    pub grid: Vec<(usize, f64)>,
    pub mlp: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl AppearanceModel {
    /// Fresh model: grids in `[-1e-4, 1e-4]`, Kaiming hidden layers, zero final layer and
    /// zero embeddings, so every decoded matrix is exactly [`M_ID`].
    pub fn new(config: AppearanceConfig, view_ids: &[usize], seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grids = HashGridStack::init(config.grid.clone(), &mut rng)?;
        let mlp = Mlp::init(&config.mlp_sizes(), config.activation, &mut rng)?;
        let mut ids = view_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != view_ids.len() {
            return Err(Error::Config("duplicate view ids".into()));
        }
        let embeddings = vec![0.0; view_ids.len() * config.embedding_dim];
        Ok(Self { config, grids, mlp, view_ids: view_ids.to_vec(), embeddings })
    }

    pub(crate) fn from_parts(
        config: AppearanceConfig,
        grids: HashGridStack,
        mlp: Mlp,
        view_ids: Vec<usize>,
        embeddings: Vec<f64>,
    ) -> Result<Self> {
        if mlp.sizes() != config.mlp_sizes().as_slice() || embeddings.len() != view_ids.len() * config.embedding_dim {
            return Err(Error::Checkpoint("parameter blocks disagree with the model config".into()));
        }
        Ok(Self { config, grids, mlp, view_ids, embeddings })
    }

    pub fn config(&self) -> &AppearanceConfig {
        &self.config
    }

    pub fn grids(&self) -> &HashGridStack {
        &self.grids
    }

    pub fn grids_mut(&mut self) -> &mut HashGridStack {
        &mut self.grids
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn view_ids(&self) -> &[usize] {
        &self.view_ids
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    /// Width of the positional part of the MLP input (`L * F`).
    pub fn positional_dim(&self) -> usize {
        self.config.grid.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.positional_dim() + self.embedding_dim()
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut [f64] {
        &mut self.embeddings
    }

    pub fn embedding_slot(&self, view_id: usize) -> Result<usize> {
        self.view_ids.iter().position(|v| *v == view_id).ok_or(Error::UnknownView(view_id))
    }

    pub fn embedding(&self, view_id: usize) -> Result<&[f64]> {
        let a = self.embedding_dim();
        let s = self.embedding_slot(view_id)?;
        Ok(&self.embeddings[s * a..(s + 1) * a])
    }

    fn positional_features(&self, q: &QueryPoint, out: &mut [f64]) -> Result<()> {
        match self.config.encoding.kind {
            EncodingKind::Xyz => {
                self.grids.query_into(q.world, out);
                Ok(())
            }
            _ => self.config.encoding.encode_into(
                &PixelInputs { pixel: q.pixel, image_size: q.image_size, depth: q.depth, color: q.color },
                out,
            ),
        }
    }

    /// Concatenated positional features and `embedding` (length `L * F + A`).
    pub fn assemble_features_with(&self, q: &QueryPoint, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.embedding_dim() {
            return Err(Error::Dimension(format!(
                "embedding has {} entries, model expects {}",
                embedding.len(),
                self.embedding_dim()
            )));
        }
        let mut out = vec![0.0; self.input_dim()];
        self.positional_features(q, &mut out[..self.positional_dim()])?;
        out[self.positional_dim()..].copy_from_slice(embedding);
        Ok(out)
    }

    pub fn assemble_features(&self, q: &QueryPoint, view_id: usize) -> Result<Vec<f64>> {
        self.assemble_features_with(q, self.embedding(view_id)?)
    }

    pub fn decode_matrix(&self, features: &[f64]) -> Result<Affine> {
        let (v, _) = self.mlp.forward(features)?;
        Ok(decode_offset(&v))
    }

    /// Matrix for a single pixel from its own depth; the unbatched reference path.
    pub fn query_pixel(&self, inputs: &FrameInputs, x: usize, y: usize, embedding: &[f64]) -> Result<Affine> {
        let Some(d) = inputs.depth.get(x, y) else { return Ok(M_ID) };
        let pixel = [x as f64 + 0.5, y as f64 + 0.5];
        let q = QueryPoint {
            world: inputs.camera.back_project(pixel, d)?,
            pixel,
            image_size: [inputs.rendered.width(), inputs.rendered.height()],
            depth: d,
            color: inputs.rendered.get(x, y),
        };
        self.decode_matrix(&self.assemble_features_with(&q, embedding)?)
    }

    /// Per-cell queries and decoded matrices for one view.
    pub fn forward_frame(&self, inputs: &FrameInputs, embedding: &[f64], cell_size: usize) -> Result<FrameForward> {
        inputs.check()?;
        if embedding.len() != self.embedding_dim() {
            return Err(Error::Dimension("embedding length".into()));
        }
        let layout = CellLayout::new(inputs.rendered.width(), inputs.rendered.height(), cell_size)?;
        let queries = cell_queries(&layout, inputs);
        let dim = self.input_dim();
        let pos = self.positional_dim();

        // per chunk: MLP inputs, outputs and cache
        type Chunk = (Vec<f64>, Vec<f64>, MlpCache);
        let chunks: Vec<Result<Chunk>> = queries
            .par_chunks(CHUNK_ROWS)
            .map(|chunk| {
                let mut feats = vec![0.0; chunk.len() * dim];
                for (row, (_, q)) in feats.chunks_exact_mut(dim).zip(chunk) {
                    self.positional_features(q, &mut row[..pos])?;
                    row[pos..].copy_from_slice(embedding);
                }
                let (v, cache) = self.mlp.forward_batch(&feats, chunk.len())?;
                Ok((feats, v, cache))
            })
            .collect();

        let mut matrices = vec![M_ID; layout.cell_count()];
        let mut caches = Vec::with_capacity(chunks.len());
        let mut k = 0;
        for c in chunks {
            let (_, v, cache) = c?;
            for out in v.chunks_exact(12) {
                matrices[queries[k].0] = decode_offset(out);
                k += 1;
            }
            caches.push(cache);
        }
        let geometry = {
            let mut g = vec![false; layout.cell_count()];
            for (cell, _) in &queries {
                g[*cell] = true;
            }
            g
        };
        Ok(FrameForward { field: TransformField { layout, matrices, geometry }, queries, caches })
    }

    pub fn build_transform_field(
        &self,
        inputs: &FrameInputs,
        view_id: usize,
        cell_size: usize,
    ) -> Result<TransformField> {
        Ok(self.forward_frame(inputs, self.embedding(view_id)?, cell_size)?.field)
    }

    /// Reverse pass of [`AppearanceModel::forward_frame`] followed by [`TransformField::apply`].
    ///
    /// `d_image` is the loss gradient with respect to the transformed image; `d_regularized`
    /// is the gradient with respect to each geometry cell's matrix in
    /// [`FrameForward::regularized_matrices`] order.
    pub fn backward_frame(
        &self,
        inputs: &FrameInputs,
        fwd: &FrameForward,
        d_image: &[f64],
        d_regularized: &[Affine],
    ) -> ModelGrad {
        let mut d_cells = fwd.field.backward(inputs.rendered, d_image);
        for ((cell, _), d) in fwd.queries.iter().zip(d_regularized) {
            for (a, b) in d_cells[*cell].iter_mut().zip(d) {
                *a += b;
            }
        }
        let dim = self.input_dim();
        let pos = self.positional_dim();
        let xyz = self.config.encoding.kind == EncodingKind::Xyz;

        // per chunk: MLP gradient, grid scatter list, embedding gradient
        type Part = (Vec<f64>, Vec<(usize, f64)>, Vec<f64>);
        let parts: Vec<Part> = fwd
            .queries
            .par_chunks(CHUNK_ROWS)
            .zip(fwd.caches.par_iter())
            .map(|(chunk, cache)| {
                let mut up = Vec::with_capacity(chunk.len() * 12);
                for (cell, _) in chunk {
                    up.extend_from_slice(&d_cells[*cell]);
                }
                let (gp, gx) = self.mlp.backward(cache, &up);
                let mut grid = Vec::new();
                let mut emb = vec![0.0; self.embedding_dim()];
                for ((_, q), row) in chunk.iter().zip(gx.chunks_exact(dim)) {
                    if xyz {
                        self.grids.backward_with(q.world, &row[..pos], |i, g| grid.push((i, g)));
                    }
                    for (e, g) in emb.iter_mut().zip(&row[pos..]) {
                        *e += g;
                    }
                }
                (gp, grid, emb)
            })
            .collect();

        let mut out = ModelGrad {
            grid: Vec::new(),
            mlp: vec![0.0; self.mlp.params().len()],
            embedding: vec![0.0; self.embedding_dim()],
        };
        for (gp, grid, emb) in parts {
            out.mlp.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
            out.grid.extend(grid);
            out.embedding.iter_mut().zip(&emb).for_each(|(a, b)| *a += b);
        }
        out
    }
}

#[inline]
fn decode_offset(v: &[f64]) -> Affine {
    std::array::from_fn(|i| v[i] + M_ID[i])
}

/// Geometry cells and their query points, in row-major cell order.
fn cell_queries(layout: &CellLayout, inputs: &FrameInputs) -> Vec<(usize, QueryPoint)> {
    let mut out = Vec::new();
    let image_size = [layout.width, layout.height];
    for cy in 0..layout.rows {
        for cx in 0..layout.cols {
            let (x0, x1) = layout.span(cx, layout.width);
            let (y0, y1) = layout.span(cy, layout.height);
            let mut depth_sum = 0.0;
            let mut color_sum = [0.0; 3];
            let mut n = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    if let Some(d) = inputs.depth.get(x, y) {
                        depth_sum += d;
                        let c = inputs.rendered.get(x, y);
                        for k in 0..3 {
                            color_sum[k] += c[k];
                        }
                        n += 1;
                    }
                }
            }
            if n == 0 {
                continue;
            }
            let depth = depth_sum / n as f64;
            let pixel = [layout.x_centers[cx], layout.y_centers[cy]];
            out.push((
                cy * layout.cols + cx,
                QueryPoint {
                    world: inputs.camera.back_project_unchecked(pixel, depth),
                    pixel,
                    image_size,
                    depth,
                    color: color_sum.map(|s| s / n as f64),
                },
            ));
        }
    }
    out
}

/// Partition of an image into `c x c` pixel cells (partial cells at the right and bottom
/// edges), with each cell's center in continuous pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLayout {
    pub width: usize,
    pub height: usize,
    pub cell_size: usize,
    pub cols: usize,
    pub rows: usize,
    pub x_centers: Vec<f64>,
    pub y_centers: Vec<f64>,
}

impl CellLayout {
    pub fn new(width: usize, height: usize, cell_size: usize) -> Result<Self> {
        if cell_size == 0 {
            return Err(Error::Config("cell size must be at least 1".into()));
        }
        let cols = width.div_ceil(cell_size);
        let rows = height.div_ceil(cell_size);
        let centers = |n: usize, extent: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    let a = i * cell_size;
                    let b = ((i + 1) * cell_size).min(extent);
                    0.5 * (a + b) as f64
                })
                .collect()
        };
        Ok(Self {
            width,
            height,
            cell_size,
            cols,
            rows,
            x_centers: centers(cols, width),
            y_centers: centers(rows, height),
        })
    }

    pub fn cell_count(&self) -> usize {
        self.cols * self.rows
    }

    /// Pixel range `[a, b)` of cell `i` along an axis of length `extent`.
    pub fn span(&self, i: usize, extent: usize) -> (usize, usize) {
        (i * self.cell_size, ((i + 1) * self.cell_size).min(extent))
    }

    /// `(lower cell, upper cell, weight of upper)` for a pixel-center coordinate, clamped
    /// to the outermost cell centers.
    fn axis_weights(centers: &[f64], p: f64, cell_size: usize) -> (usize, usize, f64) {
        let last = centers.len() - 1;
        if p <= centers[0] {
            return (0, 0, 0.0);
        }
        if p >= centers[last] {
            return (last, last, 0.0);
        }
        let mut i = (((p - 0.5 * cell_size as f64) / cell_size as f64).floor().max(0.0) as usize).min(last - 1);
        while centers[i + 1] <= p {
            i += 1;
        }
        while centers[i] > p {
            i -= 1;
        }
        (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
    }

    /// Up to four `(cell index, weight)` pairs for pixel `(x, y)`; zero weights are dropped.
    pub fn pixel_weights(&self, x: usize, y: usize) -> ([(usize, f64); 4], usize) {
        let (x0, x1, tx) = Self::axis_weights(&self.x_centers, x as f64 + 0.5, self.cell_size);
        let (y0, y1, ty) = Self::axis_weights(&self.y_centers, y as f64 + 0.5, self.cell_size);
        let cand = [
            (y0 * self.cols + x0, (1.0 - tx) * (1.0 - ty)),
            (y0 * self.cols + x1, tx * (1.0 - ty)),
            (y1 * self.cols + x0, (1.0 - tx) * ty),
            (y1 * self.cols + x1, tx * ty),
        ];
        let mut out = [(0, 0.0); 4];
        let mut n = 0;
        for c in cand {
            if c.1 != 0.0 {
                out[n] = c;
                n += 1;
            }
        }
        (out, n)
    }
}

/// One 3x4 matrix per cell, bilinearly interpolated between cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformField {
    pub layout: CellLayout,
    pub matrices: Vec<Affine>,
    /// Whether the cell had any valid depth (cells without geometry hold [`M_ID`]).
    pub geometry: Vec<bool>,
}

impl TransformField {
    pub fn identity(width: usize, height: usize, cell_size: usize) -> Result<Self> {
        let layout = CellLayout::new(width, height, cell_size)?;
        let n = layout.cell_count();
        Ok(Self { layout, matrices: vec![M_ID; n], geometry: vec![false; n] })
    }

    /// Interpolated matrix at pixel `(x, y)`. Offsets from [`M_ID`] are blended, so an
    /// identity field stays exactly the identity.
    pub fn pixel_matrix(&self, x: usize, y: usize) -> Affine {
        let (w, n) = self.layout.pixel_weights(x, y);
        if n == 1 {
            return self.matrices[w[0].0];
        }
        let mut d = [0.0; 12];
        for &(c, wt) in &w[..n] {
            for ((a, b), i) in d.iter_mut().zip(&self.matrices[c]).zip(&M_ID) {
                *a += wt * (b - i);
            }
        }
        std::array::from_fn(|e| M_ID[e] + d[e])
    }

    /// Transformed image (unclamped).
    pub fn apply(&self, rendered: &Image) -> Result<Image> {
        if rendered.width() != self.layout.width || rendered.height() != self.layout.height {
            return Err(Error::Dimension("transform field does not match image size".into()));
        }
        let w = rendered.width();
        let mut out = rendered.clone();
        out.data_mut().par_chunks_mut(3 * w).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let m = self.pixel_matrix(x, y);
                let c = apply_affine([row[3 * x], row[3 * x + 1], row[3 * x + 2]], &m);
                row[3 * x..3 * x + 3].copy_from_slice(&c);
            }
        });
        Ok(out)
    }

    /// Per-cell matrix gradients from a gradient on the transformed image.
    fn backward(&self, rendered: &Image, d_image: &[f64]) -> Vec<Affine> {
        let mut d = vec![[0.0; 12]; self.matrices.len()];
        for y in 0..rendered.height() {
            for x in 0..rendered.width() {
                let i = 3 * (y * rendered.width() + x);
                let g = &d_image[i..i + 3];
                if g == [0.0; 3] {
                    continue;
                }
                let c = rendered.get(x, y);
                let h = [c[0], c[1], c[2], 1.0];
                let (wts, n) = self.layout.pixel_weights(x, y);
                for &(cell, wt) in &wts[..n] {
                    if !self.geometry[cell] {
                        continue;
                    }
                    let dm = &mut d[cell];
                    for r in 0..3 {
                        for k in 0..4 {
                            dm[4 * r + k] += wt * g[r] * h[k];
                        }
                    }
                }
            }
        }
        d
    }

    /// Matrices of cells with geometry, in cell order; the set the regularizer sees.
    pub fn regularized_matrices(&self) -> Vec<Affine> {
        self.matrices.iter().zip(&self.geometry).filter(|(_, g)| **g).map(|(m, _)| *m).collect()
    }
}

/// Transformed image and the per-pixel interpolated matrices.
pub fn transform_image(rendered: &Image, field: &TransformField) -> Result<(Image, Vec<Affine>)> {
    let img = field.apply(rendered)?;
    let mut mats = Vec::with_capacity(rendered.len_pixels());
    for y in 0..rendered.height() {
        for x in 0..rendered.width() {
            mats.push(field.pixel_matrix(x, y));
        }
    }
    Ok((img, mats))
}

/// Output of [`AppearanceModel::forward_frame`], kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FrameForward {
    pub field: TransformField,
    queries: Vec<(usize, QueryPoint)>,
    caches: Vec<MlpCache>,
}

impl FrameForward {
    pub fn regularized_matrices(&self) -> Vec<Affine> {
        self.queries.iter().map(|(c, _)| self.field.matrices[*c]).collect()
    }

    /// Cell index of each entry of [`FrameForward::regularized_matrices`].
    pub fn query_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.queries.iter().map(|(c, _)| *c)
    }

    pub fn query_points(&self) -> impl Iterator<Item = &QueryPoint> {
        self.queries.iter().map(|(_, q)| q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;

    fn tiny_config() -> AppearanceConfig {
        AppearanceConfig {
            grid: HashGridConfig {
                levels: 4,
                features_per_level: 2,
                table_size: 1 << 12,
                base_resolution: 4,
                growth_factor: 2.0,
                domain_min: [-3.0, -3.0, 0.0],
                domain_max: [3.0, 3.0, 6.0],
            },
            embedding_dim: 4,
            ..Default::default()
        }
    }

    fn scramble(model: &mut AppearanceModel, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.grids_mut().params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        for p in model.mlp_mut().params_mut() {
            *p = scale * rng.random_range(-1.0..1.0);
        }
        for p in model.embeddings_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
    }

    fn frame(w: usize, h: usize) -> (Image, DepthMap, Camera) {
        let mut img = Image::new(w, h);
        let mut depth = DepthMap::invalid(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [x as f64 / w as f64, y as f64 / h as f64, 0.5]);
                depth.set(x, y, Some(2.0 + 0.03 * x as f64 + 0.02 * y as f64));
            }
        }
        let cam = Camera::new([w as f64, w as f64, 0.5 * w as f64, 0.5 * h as f64], w, h, Matrix3::identity(), Vector3::zeros()).unwrap();
        (img, depth, cam)
    }

    #[test]
    fn decode_of_zero_output_is_identity() {
        let model = AppearanceModel::new(tiny_config(), &[0], 1).unwrap();
        let q = QueryPoint { world: [0.1, 0.2, 2.0], pixel: [1.0, 1.0], image_size: [8, 8], depth: 2.0, color: [0.2; 3] };
        let f = model.assemble_features(&q, 0).unwrap();
        assert_eq!(model.decode_matrix(&f).unwrap(), M_ID);
        assert_eq!(decode_offset(&[0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.1]), [1.0, 0.0, 0.0, 0.1, 0.0, 1.0, 0.0, 0.1, 0.0, 0.0, 1.0, 0.1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = decode_offset(&v);
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(m[4 * r + c], v[4 * r + c] + if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn feature_concatenation_order() {
        let cfg = AppearanceConfig { embedding_dim: 32, grid: HashGridConfig { table_size: 1 << 10, ..Default::default() }, ..Default::default() };
        let mut model = AppearanceModel::new(cfg, &[3, 9], 4).unwrap();
        let q = QueryPoint { world: [0.3, -0.1, 0.4], pixel: [0.0; 2], image_size: [1, 1], depth: 1.0, color: [0.0; 3] };
        let f = model.assemble_features(&q, 9).unwrap();
        assert_eq!(f.len(), 64);
        let mut want = model.grids().query(q.world);
        want.extend_from_slice(model.embedding(9).unwrap());
        assert_eq!(f, want);
        model.grids_mut().params_mut().fill(0.0);
        let e: Vec<f64> = (0..32).map(|i| i as f64).collect();
        model.embeddings_mut()[32..].copy_from_slice(&e);
        let f = model.assemble_features(&q, 9).unwrap();
        assert!(f[..32].iter().all(|v| *v == 0.0));
        assert_eq!(&f[32..], e.as_slice());
        assert!(matches!(model.assemble_features(&q, 5), Err(Error::UnknownView(5))));
    }

    #[test]
    fn affine_application() {
        let c = [0.2, 0.4, 0.6];
        assert_eq!(apply_affine(c, &M_ID), c);
        let mut m = M_ID;
        m[3] = 0.1;
        m[7] = 0.1;
        m[11] = 0.1;
        let out = apply_affine(c, &m);
        for (a, b) in out.iter().zip([0.3, 0.5, 0.7]) {
            assert!((a - b).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m: Affine = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
        let h = [0.3, 0.9, 0.1, 1.0];
        let got = apply_affine([0.3, 0.9, 0.1], &m);
        for r in 0..3 {
            let mut s = 0.0;
            for k in 0..4 {
                s += m[r * 4 + k] * h[k];
            }
            assert!((got[r] - s).abs() < 1e-15);
        }
    }

    #[test]
    fn regularizer_values() {
        assert_eq!(identity_regularizer(&[M_ID, M_ID]), 0.0);
        let mut m = M_ID;
        m[6] += 0.12;
        assert!((identity_regularizer(&[m]) - 0.01).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ms: Vec<Affine> = (0..7).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
        let mut s = 0.0;
        for m in &ms {
            for i in 0..12 {
                s += (m[i] - M_ID[i]).abs();
            }
        }
        assert!((identity_regularizer(&ms) - s / 84.0).abs() < 1e-14);
    }

    #[test]
    fn cell_layout_and_mean_depth() {
        let (img, depth, cam) = frame(64, 64);
        let layout = CellLayout::new(64, 64, 8).unwrap();
        assert_eq!((layout.cols, layout.rows), (8, 8));
        assert_eq!((layout.x_centers[0], layout.y_centers[0]), (4.0, 4.0));
        let inputs = FrameInputs { rendered: &img, depth: &depth, camera: &cam };
        let qs = cell_queries(&layout, &inputs);
        assert_eq!(qs.len(), 64);
        // brute-force average of cell (2, 1)
        let mut s = 0.0;
        for y in 8..16 {
            for x in 16..24 {
                s += depth.get(x, y).unwrap();
            }
        }
        let q = qs.iter().find(|(c, _)| *c == 8 + 2).unwrap().1;
        assert!((q.depth - s / 64.0).abs() < 1e-12);
        assert_eq!(q.pixel, [20.0, 12.0]);
    }

    #[test]
    fn cells_without_geometry_hold_identity() {
        let (img, mut depth, cam) = frame(16, 16);
        for y in 0..8 {
            for x in 0..8 {
                depth.set(x, y, None);
            }
        }
        let mut model = AppearanceModel::new(tiny_config(), &[0], 1).unwrap();
        scramble(&mut model, 3, 0.3);
        let field = model.build_transform_field(&FrameInputs { rendered: &img, depth: &depth, camera: &cam }, 0, 8).unwrap();
        assert_eq!(field.matrices[0], M_ID);
        assert!(!field.geometry[0]);
        assert_eq!(field.regularized_matrices().len(), 3);
    }

    #[test]
    fn unit_cells_match_per_pixel_queries_bitwise() {
        let (img, depth, cam) = frame(12, 10);
        let mut model = AppearanceModel::new(tiny_config(), &[0], 1).unwrap();
        scramble(&mut model, 4, 0.2);
        let inputs = FrameInputs { rendered: &img, depth: &depth, camera: &cam };
        let field = model.build_transform_field(&inputs, 0, 1).unwrap();
        let emb = model.embedding(0).unwrap();
        let (out, mats) = transform_image(&img, &field).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                let m = model.query_pixel(&inputs, x, y, emb).unwrap();
                assert_eq!(mats[y * 12 + x], m);
                assert_eq!(out.get(x, y), apply_affine(img.get(x, y), &m));
            }
        }
    }

    #[test]
    fn identity_field_is_a_no_op() {
        let (img, _, _) = frame(20, 13);
        let field = TransformField::identity(20, 13, 8).unwrap();
        assert_eq!(field.apply(&img).unwrap(), img);
        assert!(TransformField::identity(21, 13, 8).unwrap().apply(&img).is_err());
    }

    #[test]
    fn bilinear_matches_four_corner_oracle() {
        let mut field = TransformField::identity(32, 32, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for m in &mut field.matrices {
            *m = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        }
        // cell centers sit at 4 + 8k in continuous pixel coordinates
        let (x, y) = (13usize, 22usize);
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (i0, j0) = (((px - 4.0) / 8.0).floor() as usize, ((py - 4.0) / 8.0).floor() as usize);
        let tx = (px - (4.0 + 8.0 * i0 as f64)) / 8.0;
        let ty = (py - (4.0 + 8.0 * j0 as f64)) / 8.0;
        let m = |i: usize, j: usize| field.matrices[j * 4 + i];
        let got = field.pixel_matrix(x, y);
        for e in 0..12 {
            let want = (1.0 - tx) * (1.0 - ty) * m(i0, j0)[e]
                + tx * (1.0 - ty) * m(i0 + 1, j0)[e]
                + (1.0 - tx) * ty * m(i0, j0 + 1)[e]
                + tx * ty * m(i0 + 1, j0 + 1)[e];
            assert!((got[e] - want).abs() < 1e-14);
        }
        // border pixels clamp to the outermost centers
        assert_eq!(field.pixel_matrix(0, 0), field.matrices[0]);
        assert_eq!(field.pixel_matrix(31, 31), field.matrices[15]);
    }

    #[test]
    fn uniform_plane_with_constant_grid_gives_equal_cells() {
        let w = 32;
        let img = Image::filled(w, w, [0.4; 3]);
        let depth = DepthMap::constant(w, w, 2.0);
        let cam = Camera::new([32.0, 32.0, 16.0, 16.0], w, w, Matrix3::identity(), Vector3::zeros()).unwrap();
        let mut model = AppearanceModel::new(tiny_config(), &[0], 1).unwrap();
        scramble(&mut model, 8, 0.3);
        model.grids_mut().params_mut().fill(0.25);
        let field = model.build_transform_field(&FrameInputs { rendered: &img, depth: &depth, camera: &cam }, 0, 8).unwrap();
        for m in &field.matrices {
            for (a, b) in m.iter().zip(&field.matrices[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_world_point_same_matrix_across_views() {
        let mut model = AppearanceModel::new(tiny_config(), &[0, 1], 1).unwrap();
        scramble(&mut model, 9, 0.3);
        let a = model.embedding(0).unwrap().to_vec();
        let model_emb = a.clone();
        let c1 = Camera::look_at([0.0, -3.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 60.0, 16, 16).unwrap();
        let c2 = Camera::look_at([2.0, -2.0, 1.5], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0], 60.0, 16, 16).unwrap();
        let world = [0.1, 0.0, 1.05];
        let q = |cam: &Camera| {
            let (px, d) = cam.project(world).unwrap();
            QueryPoint { world: cam.back_project(px, d).unwrap(), pixel: px, image_size: [16, 16], depth: d, color: [0.0; 3] }
        };
        let m1 = model.decode_matrix(&model.assemble_features_with(&q(&c1), &model_emb).unwrap()).unwrap();
        let m2 = model.decode_matrix(&model.assemble_features_with(&q(&c2), &model_emb).unwrap()).unwrap();
        for (x, y) in m1.iter().zip(&m2) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
