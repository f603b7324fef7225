//! Held-out evaluation: fit the view's embedding on the left image half, score the right.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::metrics_with_correction;
use crate::train::{fit_test_embedding, FrameBundle, TrainConfig};
use crate::appearance::AppearanceModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view_id: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_cc: f64,
    pub ssim_cc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEval {
    pub metrics: ViewMetrics,
    /// Full-width output image; the raw render when no model is used.
    pub output: Image,
    /// Left-half loss per fitting step; empty without a model.
    pub fit_losses: Vec<f64>,
}

/// Evaluates one held-out view. With `model = None` the render is scored as-is and no
/// appearance parameter is read.
pub fn evaluate_view(model: Option<&AppearanceModel>, frame: &FrameBundle, config: &TrainConfig) -> Result<ViewEval> {
    let target = frame.target()?;
    let w = frame.rendered.width();
    let half = w / 2;
    if half == 0 || half == w {
        return Err(Error::Dimension("image too narrow for a left/right split".into()));
    }
    let (output, fit_losses) = match model {
        None => (frame.rendered.clone(), Vec::new()),
        Some(m) => {
            let fitted = fit_test_embedding(m, frame, config)?;
            let fwd = m.forward_frame(&frame.inputs(), &fitted.embedding, config.cell_size)?;
            (fwd.field.apply(&frame.rendered)?, fitted.losses)
        }
    };
    let (raw, cc) = metrics_with_correction(&output.crop_columns(half, w), &target.crop_columns(half, w))?;
    let metrics = ViewMetrics { view_id: frame.view_id, psnr: raw.psnr, ssim: raw.ssim, psnr_cc: cc.psnr, ssim_cc: cc.ssim };
    Ok(ViewEval { metrics, output, fit_losses })
}

/// Evaluates every frame in order.
pub fn evaluate(model: Option<&AppearanceModel>, frames: &[FrameBundle], config: &TrainConfig) -> Result<Vec<ViewEval>> {
    frames.iter().map(|f| evaluate_view(model, f, config)).collect()
}

pub fn mean_metrics(metrics: &[ViewMetrics]) -> Option<[f64; 4]> {
    if metrics.is_empty() {
        return None;
    }
    let n = metrics.len() as f64;
    let mut s = [0.0; 4];
    for m in metrics {
        s[0] += m.psnr;
        s[1] += m.ssim;
        s[2] += m.psnr_cc;
        s[3] += m.ssim_cc;
    }
    Some(s.map(|v| v / n))
}

pub const METRICS_CSV_HEADER: &str = "view_id,psnr,ssim,psnr_cc,ssim_cc";

pub fn metrics_csv(metrics: &[ViewMetrics]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for m in metrics {
        s.push_str(&format!("{},{:.4},{:.4},{:.4},{:.4}\n", m.view_id, m.psnr, m.ssim, m.psnr_cc, m.ssim_cc));
    }
    s
}
