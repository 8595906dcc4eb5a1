#![allow(dead_code)]

use minivl::blocks::BlockConfig;
use minivl::config::RunConfig;
use minivl::model::ModelConfig;
use minivl::vision::BridgeConfig;

/// Narrow model with a small bridge; stages still follow the default plan.
pub fn tiny_config(d_model: usize) -> RunConfig {
    let mut block = BlockConfig::new(d_model, 4);
    block.d_mlp = 2 * d_model;
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.model = ModelConfig {
        n_blocks: 1,
        max_seq: 256,
        block,
        bridge: BridgeConfig {
            d_vis: 16,
            d_q: 16,
            d_mid: 16,
            n_query: 8,
            patch_size: 32,
            encoder_heads: 2,
            encoder_seed: 24301,
        },
    };
    cfg.train.batch_size = 2;
    cfg.ablation.widths = Vec::new();
    cfg
}

pub fn bits(data: &[f64]) -> Vec<u64> {
    data.iter().map(|v| v.to_bits()).collect()
}
