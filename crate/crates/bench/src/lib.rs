//! Fixtures shared by the benchmarks.

use proxytta_core::{generate_dataset, init_heads, init_model, insert_adaptation_layer, ExperimentConfig};
use proxytta_core::{ModelParams, ProxyHeads, Sample};

/// The reference model with an adaptation layer and prepared heads, plus a
/// batch worth of reference scenes.
pub fn reference_fixture(batch: usize) -> (ModelParams, ProxyHeads, Vec<Sample>) {
    let cfg = ExperimentConfig::default();
    let model = insert_adaptation_layer(&init_model(&cfg.model, 0).unwrap()).unwrap();
    let mut heads = init_heads(cfg.model.fusion_width, &cfg.proxy, 0).unwrap();
    heads.mark_prepared();
    let samples = generate_dataset(0, batch, &cfg.data.scene).unwrap();
    (model, heads, samples)
}
