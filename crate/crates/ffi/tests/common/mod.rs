use std::path::{Path, PathBuf};

use clear_core::backbone::BackboneConfig;
use clear_core::par::{ParTrainConfig, TrainState};
use clear_core::retrieval::{save_heads, HeadsConfig, ProviderConfig, RetTrainConfig, RetrievalHeads};
use clear_core::schema::AttributeSchema;

/// Untrained tiny backbone and heads written to `dir`; returns both paths.
pub fn write_model(dir: &Path) -> (PathBuf, PathBuf) {
    let schema = AttributeSchema::synthetic_default();
    let hash = schema.hash();
    let cfg = BackboneConfig::tiny(schema.n_attr());
    let state = TrainState::new(&cfg, &ParTrainConfig::default(), 3).unwrap();
    let par = dir.join("par.ckpt");
    state.save(&par, &hash).unwrap();

    let train = RetTrainConfig {
        dim_vis: 16,
        provider: ProviderConfig::Hash { dim: 8, seed: 1 },
        ..Default::default()
    };
    let hcfg = HeadsConfig { feature_dim: cfg.feature_dim(), n_attr: schema.n_attr(), word_dim: 8, seed: 5, train };
    let heads = RetrievalHeads::new(hcfg.feature_dim, hcfg.n_attr, hcfg.word_dim, &hcfg.train, hcfg.seed).unwrap();
    let path = dir.join("heads.ckpt");
    let bb_hash = state.backbone.params().content_hash().unwrap();
    save_heads(&path, &heads, &hcfg, &bb_hash, &hash).unwrap();
    (par, path)
}

#[allow(dead_code)]
pub fn images(batch: usize, h: usize, w: usize) -> Vec<f32> {
    (0..batch * 3 * h * w).map(|i| ((i * 37 % 101) as f32 / 101.0) - 0.5).collect()
}
