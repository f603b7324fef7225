//! Optimization of the appearance parameters over fixed renderer outputs, test-time
//! embedding fitting, and checkpoints.

mod adam;
mod checkpoint;

pub use adam::{AdamConfig, AdamState, SparseGradient};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceModel, FrameInputs, ModelGrad};
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthMap};
use crate::image::Image;
use crate::loss::{total_loss, LossConfig, LossGrad, LossTerms};

/// One view: renderer outputs plus the captured image it should be matched to.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameBundle {
    pub view_id: usize,
    pub rendered: Image,
    pub depth: DepthMap,
    pub camera: Camera,
    pub ground_truth: Option<Image>,
}

impl FrameBundle {
    pub fn inputs(&self) -> FrameInputs<'_> {
        FrameInputs { rendered: &self.rendered, depth: &self.depth, camera: &self.camera }
    }

    pub fn target(&self) -> Result<&Image> {
        self.ground_truth
            .as_ref()
            .ok_or_else(|| Error::Config(format!("view {} has no ground-truth image", self.view_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { iters: 300, lr: 1e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub lr_grids: f64,
    pub lr_mlp: f64,
    pub lr_embeddings: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    pub cell_size: usize,
    pub loss: LossConfig,
    /// Test-time embedding fitting on the left image half.
    pub fit: FitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let total_iters = 2000;
        let mut loss = LossConfig::default();
        loss.lambda2 = loss.lambda2.scaled_to(total_iters);
        Self {
            total_iters,
            lr_grids: 1e-2,
            lr_mlp: 1e-3,
            lr_embeddings: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            cell_size: 8,
            loss,
            fit: FitConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Changes the iteration budget and rescales the regularizer schedule with it.
    pub fn with_iters(mut self, total_iters: usize) -> Self {
        self.loss.lambda2 = self.loss.lambda2.scaled_to(total_iters);
        self.total_iters = total_iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::Config("total_iters must be at least 1".into()));
        }
        if ![self.lr_grids, self.lr_mlp, self.lr_embeddings, self.fit.lr].iter().all(|lr| *lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.cell_size == 0 {
            return Err(Error::Config("cell size must be at least 1".into()));
        }
        self.loss.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub l1: f64,
    pub dssim: f64,
    pub lid: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossRecord {
    fn new(iter: usize, t: &LossTerms) -> Self {
        Self { iter, l1: t.l1, dssim: t.dssim, lid: t.lid, lambda2: t.lambda2, total: t.total }
    }
}

pub const LOSS_CSV_HEADER: &str = "iter,l1,dssim,lid,lambda2,total";

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for r in log {
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.iter, r.l1, r.dssim, r.lid, r.lambda2, r.total
        ));
    }
    s
}

/// Loss terms and gradients for one frame. With `columns = Some(c)` the whole loss,
/// regularizer included, sees only pixels in `[0, c)` and the cells overlapping them.
pub fn frame_loss_and_grad(
    model: &AppearanceModel,
    frame: &FrameBundle,
    embedding: &[f64],
    cell_size: usize,
    iter: usize,
    loss: &LossConfig,
    columns: Option<usize>,
) -> Result<(LossTerms, ModelGrad)> {
    let inputs = frame.inputs();
    let target = frame.target()?;
    let fwd = model.forward_frame(&inputs, embedding, cell_size)?;
    let transformed = fwd.field.apply(&frame.rendered)?;
    let regs = fwd.regularized_matrices();
    let (terms, grad) = match columns {
        None => total_loss(&transformed, target, &regs, iter, loss)?,
        Some(c) => {
            let layout = &fwd.field.layout;
            let keep: Vec<bool> = fwd.query_cells().map(|cell| (cell % layout.cols) * layout.cell_size < c).collect();
            let kept: Vec<_> = regs.iter().zip(&keep).filter(|(_, k)| **k).map(|(m, _)| *m).collect();
            let (terms, g) = total_loss(&transformed.crop_columns(0, c), &target.crop_columns(0, c), &kept, iter, loss)?;
            let w = transformed.width();
            let mut image = vec![0.0; transformed.data().len()];
            for y in 0..transformed.height() {
                image[3 * y * w..3 * (y * w + c)].copy_from_slice(&g.image[3 * y * c..3 * (y + 1) * c]);
            }
            let mut kept_grads = g.matrices.into_iter();
            let matrices = keep.iter().map(|k| if *k { kept_grads.next().unwrap() } else { [0.0; 12] }).collect();
            (terms, LossGrad { image, matrices })
        }
    };
    let mg = model.backward_frame(&inputs, &fwd, &grad.image, &grad.matrices);
    Ok((terms, mg))
}

/// Drives optimization; holds the optimizer state and iteration counter.
pub struct Trainer {
    pub model: AppearanceModel,
    config: TrainConfig,
    iteration: usize,
    order: Vec<usize>,
    grid_state: AdamState,
    mlp_state: AdamState,
    emb_state: AdamState,
    grid_grad: SparseGradient,
    log: Vec<LossRecord>,
    initial_loss: Option<f64>,
    above_limit: usize,
}

impl Trainer {
    /// `start_iter` is nonzero when resuming from a checkpoint; optimizer moments restart.
    pub fn new(model: AppearanceModel, frames: &[FrameBundle], config: TrainConfig, start_iter: usize) -> Result<Self> {
        config.validate()?;
        if frames.is_empty() {
            return Err(Error::Config("training needs at least one frame".into()));
        }
        for f in frames {
            model.embedding_slot(f.view_id)?;
            f.target()?;
        }
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        let n_grid = model.grids().params().len();
        let n_mlp = model.mlp().params().len();
        let n_emb = model.embeddings().len();
        Ok(Self {
            model,
            config,
            iteration: start_iter,
            order,
            grid_state: AdamState::new(n_grid),
            mlp_state: AdamState::new(n_mlp),
            emb_state: AdamState::new(n_emb),
            grid_grad: SparseGradient::new(n_grid),
            log: Vec::new(),
            initial_loss: None,
            above_limit: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &[LossRecord] {
        &self.log
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Index into the frame list used at `iter`.
    pub fn frame_for(&self, iter: usize) -> usize {
        self.order[iter % self.order.len()]
    }

    pub fn step(&mut self, frames: &[FrameBundle]) -> Result<LossRecord> {
        let iter = self.iteration;
        let frame = &frames[self.frame_for(iter)];
        let slot = self.model.embedding_slot(frame.view_id)?;
        let a = self.model.embedding_dim();
        let emb = self.model.embeddings()[slot * a..(slot + 1) * a].to_vec();
        let (terms, grad) =
            frame_loss_and_grad(&self.model, frame, &emb, self.config.cell_size, iter, &self.config.loss, None)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite { group: "loss", iter });
        }

        self.grid_grad.clear();
        for &(i, g) in &grad.grid {
            self.grid_grad.add(i, g);
        }
        let mut emb_grad = SparseGradient::new(self.model.embeddings().len());
        for (k, g) in grad.embedding.iter().enumerate() {
            emb_grad.add(slot * a + k, *g);
        }
        let cfg = self.config.adam;
        self.grid_state
            .step_sparse(&cfg, self.model.grids_mut().params_mut(), &self.grid_grad, self.config.lr_grids, "grids")
            .map_err(|e| with_iter(e, iter))?;
        self.mlp_state
            .step_dense(&cfg, self.model.mlp_mut().params_mut(), &grad.mlp, self.config.lr_mlp, "mlp")
            .map_err(|e| with_iter(e, iter))?;
        self.emb_state
            .step_sparse(&cfg, self.model.embeddings_mut(), &emb_grad, self.config.lr_embeddings, "embeddings")
            .map_err(|e| with_iter(e, iter))?;

        let rec = LossRecord::new(iter, &terms);
        let initial = *self.initial_loss.get_or_insert(terms.total);
        if terms.total > 10.0 * initial {
            self.above_limit += 1;
            if self.above_limit >= 100 {
                return Err(Error::Diverged { iter, loss: terms.total, initial });
            }
        } else {
            self.above_limit = 0;
        }
        self.log.push(rec);
        self.iteration += 1;
        Ok(rec)
    }

    /// Runs until the configured `total_iters`.
    pub fn run(&mut self, frames: &[FrameBundle]) -> Result<()> {
        while self.iteration < self.config.total_iters {
            self.step(frames)?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (AppearanceModel, Vec<LossRecord>, usize) {
        (self.model, self.log, self.iteration)
    }
}

fn with_iter(e: Error, iter: usize) -> Error {
    match e {
        Error::NonFinite { group, .. } => Error::NonFinite { group, iter },
        e => e,
    }
}

/// Trains `model` on `frames` for `config.total_iters` iterations from scratch.
pub fn train(model: AppearanceModel, frames: &[FrameBundle], config: &TrainConfig) -> Result<(AppearanceModel, Vec<LossRecord>)> {
    let mut t = Trainer::new(model, frames, config.clone(), 0)?;
    t.run(frames)?;
    let (m, log, _) = t.into_parts();
    Ok((m, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedEmbedding {
    pub embedding: Vec<f64>,
    /// Left-half loss at each fitting step.
    pub losses: Vec<f64>,
}

/// Fits a fresh (zero) embedding for a held-out view on the left half of its image with
/// every other parameter frozen.
pub fn fit_test_embedding(model: &AppearanceModel, frame: &FrameBundle, config: &TrainConfig) -> Result<FittedEmbedding> {
    frame.target()?;
    let a = model.embedding_dim();
    let mut emb = vec![0.0; a];
    let mut state = AdamState::new(a);
    let half = frame.rendered.width() / 2;
    if half == 0 {
        return Err(Error::Dimension("image too narrow for a left/right split".into()));
    }
    // regularizer weight as at the end of training
    let iter = config.total_iters;
    let mut losses = Vec::with_capacity(config.fit.iters);
    for _ in 0..config.fit.iters {
        let (terms, grad) = frame_loss_and_grad(model, frame, &emb, config.cell_size, iter, &config.loss, Some(half))?;
        losses.push(terms.total);
        state.step_dense(&config.adam, &mut emb, &grad.embedding, config.fit.lr, "test embedding")?;
    }
    Ok(FittedEmbedding { embedding: emb, losses })
}
