//! The committed fixture backbone: a small model pretrained on documents
//! from the synthetic comment world.

use std::path::{Path, PathBuf};

use anyhow::Result;
use policyprobe_core::model::{FrozenModel, ModelConfig};
use policyprobe_core::pretrain::{pretrain_backbone, PretrainConfig, PretrainProgress, PretrainReport};
use policyprobe_core::synth::world_corpus;

use crate::checkpoint;

pub const WORLD_DOCS: usize = 30_000;
pub const WORLD_SEED: u64 = 20;
pub const PRETRAIN_SEED: u64 = 7;

pub fn pretrain_config() -> PretrainConfig {
    PretrainConfig {
        model: ModelConfig { n_layers: 3, n_heads: 4, d_model: 96, d_ff: 384, context_len: 512, vocab_size: 1024 },
        steps: 4000,
        batch_size: 8,
        lr: 3e-3,
        warmup: 200,
        min_lr_frac: 0.1,
        clip: 1.0,
        max_offset: 48,
        heldout_frac: 0.01,
        eval_every: 250,
        eval_docs: 64,
    }
}

/// Path of the committed backbone inside the source tree.
pub fn backbone_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join("backbone.bin")
}

pub fn load() -> Result<(FrozenModel, String)> {
    checkpoint::load_backbone(&backbone_path())
}

/// Rebuild the fixture from scratch.
pub fn pretrain(
    config: &PretrainConfig,
    docs: usize,
    progress: &mut dyn FnMut(&PretrainProgress),
) -> Result<(FrozenModel, PretrainReport)> {
    let corpus = world_corpus(docs, WORLD_SEED);
    Ok(pretrain_backbone(&corpus, config, PRETRAIN_SEED, progress)?)
}
