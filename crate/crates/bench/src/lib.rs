//! Shared fixtures for the pipeline benchmarks.

use dam_core::appearance::AppearanceConfig;
use dam_core::synth::{generate_dataset, DatasetConfig, SceneSpec};
use dam_core::{AppearanceModel, FrameBundle};

/// One synthetic frame at `size`x`size` and a fresh model for its view.
pub fn fixture(size: usize) -> (AppearanceModel, FrameBundle) {
    let cfg = DatasetConfig { width: size, height: size, n_train: 1, n_test: 1, ..Default::default() };
    let ds = generate_dataset(&SceneSpec::default_scene(0), &cfg).expect("dataset");
    let frame = ds.train.into_iter().next().expect("frame");
    let mut acfg = AppearanceConfig::default();
    acfg.grid.domain_min = ds.domain[0];
    acfg.grid.domain_max = ds.domain[1];
    let model = AppearanceModel::new(acfg, &[frame.view_id], 0).expect("model");
    (model, frame)
}
