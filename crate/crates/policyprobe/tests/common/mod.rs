#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use policyprobe::config::ServiceSettings;
use policyprobe::service::{self, App, ServiceOptions};
use policyprobe::store::Store;
use policyprobe_core::model::{ModelConfig, Transformer};
use policyprobe_core::scorer::ScorerConfig;
use policyprobe_core::synth::{desk_prompt, world_corpus};
use policyprobe_core::tokenizer::{default_specials, Tokenizer};
use policyprobe_core::tuner::TuneConfig;
use policyprobe_core::FrozenModel;

/// An untrained backbone with a tokenizer from the comment world, big enough
/// to hold the desk prompt.
pub fn tiny_model() -> FrozenModel {
    let corpus = world_corpus(300, 1).join("\n");
    let tok = Tokenizer::train(&corpus, &default_specials(), 1024).unwrap();
    let cfg = ModelConfig { n_layers: 1, n_heads: 2, d_model: 16, d_ff: 32, context_len: 512, vocab_size: tok.vocab_size() };
    FrozenModel::freeze(Transformer::init(cfg, 5).unwrap(), tok).unwrap()
}

pub fn options(settings: ServiceSettings) -> ServiceOptions {
    ServiceOptions {
        settings,
        scorer: ScorerConfig { max_new_tokens: 16, include_hard_prompt: true },
        tune: TuneConfig { steps: 4, batch_size: 4, n_prefix: 2, learning_rate: 0.05, ..TuneConfig::default() },
        prompt_path: None,
        soft_prompt_path: None,
    }
}

pub struct Server {
    pub app: Arc<App>,
    pub base: String,
    pub client: reqwest::Client,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }
}

pub async fn start(model: Option<Arc<FrozenModel>>, store: &Path, options: ServiceOptions) -> Server {
    let model = model.map(|m| {
        let h = policyprobe::checkpoint::backbone_hash(&m).unwrap();
        (m, h)
    });
    let app = App::new(model, desk_prompt(), None, Store::open(store).unwrap(), options).unwrap();
    let (listener, addr) = service::bind("127.0.0.1:0").await.unwrap();
    let router = service::router(app.clone());
    tokio::spawn(async move { axum::serve(listener, router).await.unwrap() });
    Server { app, base: format!("http://{addr}"), client: reqwest::Client::new() }
}
