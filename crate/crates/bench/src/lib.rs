//! Fixtures shared by the kernel benchmarks.

use ndarray::Array4;
use rand::Rng;
use tubelet_core::dataset::ClipTensor;
use tubelet_core::mann::{MANNConfig, MannNet};
use tubelet_core::model::{InputGeometry, MaeModel, ModelConfig};
use tubelet_core::params::ParamStore;
use tubelet_core::rng::seeded;

/// Uniform-noise clip of shape `t×side×side×3`.
pub fn noise_clip(t: usize, side: usize, seed: u64) -> ClipTensor {
    let mut rng = seeded(seed);
    ClipTensor::new(
        Array4::from_shape_fn((t, side, side, 3), |_| rng.random::<f32>()),
        10.0,
    )
}

/// Compact model over `frames×side×side` windows with 8-pixel, 2-frame tubelets.
pub fn compact_model(frames: usize, side: usize, use_spt: bool) -> MaeModel {
    let input = InputGeometry {
        frames,
        height: side,
        width: side,
        channels: 3,
    };
    let cfg = ModelConfig::build(input, 8, 2, use_spt, 64, 2, 4, 64, 1, 4);
    MaeModel::new(cfg, 0).expect("valid compact config")
}

/// Default-sized memory network over `input_dim` embeddings.
pub fn mann(input_dim: usize) -> (ParamStore, MannNet) {
    let mut store = ParamStore::new();
    let net = MannNet::new(&mut store, MANNConfig::default(), input_dim, 0)
        .expect("valid default config");
    (store, net)
}
