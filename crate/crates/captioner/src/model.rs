//! Model configuration and the full parameter registry. Every parameter lives
//! in one flat named store so checkpoints, the optimizer, and gradient checks
//! all address weights the same way.

use std::path::Path;

use backbone::{AffineNorm, EncoderStack, GruCell, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{FeatureDims, Scene};
use crate::vocab::Vocabulary;

/// How the group around a chosen anchor token is formed from the other tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphStrategy {
    /// Recurrent pass over tokens in confidence order, seeded by the anchor.
    Sequence,
    /// Each token scored against the anchor in isolation; embeddings unchanged.
    Independent,
    /// Self-attention over anchor plus tokens; scores from updated rows.
    Multiple,
}

impl GraphStrategy {
    pub fn name(self) -> &'static str {
        match self {
            GraphStrategy::Sequence => "sequence",
            GraphStrategy::Independent => "independent",
            GraphStrategy::Multiple => "multiple",
        }
    }

    pub fn parse(s: &str) -> Option<GraphStrategy> {
        match s {
            "sequence" => Some(GraphStrategy::Sequence),
            "independent" => Some(GraphStrategy::Independent),
            "multiple" => Some(GraphStrategy::Multiple),
            _ => None,
        }
    }
}

/// Loss used for anchor selection: binary targets over the score distribution,
/// or a categorical loss on the single true anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorLossKind {
    SoftmaxBce,
    CategoricalCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared hidden width.
    pub d: usize,
    pub heads: usize,
    /// Encoder depth for the fusion stage and the two captioners.
    pub fuse_layers: usize,
    pub vcap_layers: usize,
    pub tcap_layers: usize,
    /// Depth of the attention variant of the group builder.
    pub acg_layers: usize,
    /// Row capacities: visual regions, OCR tokens, caption words.
    pub n_objects: usize,
    pub m_tokens: usize,
    pub c_steps: usize,
    pub dims: FeatureDims,
    pub strategy: GraphStrategy,
    /// Membership threshold on the per-token group score.
    pub graph_threshold: f64,
    pub anchor_loss: AnchorLossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            fuse_layers: 1,
            vcap_layers: 1,
            tcap_layers: 1,
            acg_layers: 1,
            n_objects: 10,
            m_tokens: 8,
            c_steps: 30,
            dims: FeatureDims { d_app: 32, d_ft: 16, d_phoc: 16 },
            strategy: GraphStrategy::Sequence,
            graph_threshold: 0.5,
            anchor_loss: AnchorLossKind::SoftmaxBce,
        }
    }
}

impl ModelConfig {
    /// Smallest config that still exercises every code path; used by gradient
    /// checks where each forward pass must stay cheap.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 8,
            heads: 1,
            fuse_layers: 1,
            vcap_layers: 1,
            tcap_layers: 1,
            acg_layers: 1,
            n_objects: 3,
            m_tokens: 3,
            c_steps: 5,
            dims: FeatureDims { d_app: 6, d_ft: 4, d_phoc: 4 },
            strategy: GraphStrategy::Sequence,
            graph_threshold: 0.5,
            anchor_loss: AnchorLossKind::SoftmaxBce,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "hidden width {} must be a positive multiple of heads {}",
                self.d, self.heads
            )));
        }
        if self.n_objects == 0 || self.m_tokens == 0 || self.c_steps == 0 {
            return Err(ModelError::Config("row capacities must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.graph_threshold) {
            return Err(ModelError::Config(format!(
                "graph_threshold {} outside [0,1]",
                self.graph_threshold
            )));
        }
        if self.dims.d_app == 0 || self.dims.d_ft == 0 || self.dims.d_phoc == 0 {
            return Err(ModelError::Config("feature dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Decode-position count: caption words plus the end marker.
    pub fn max_steps(&self) -> usize {
        self.c_steps + 1
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("scene {scene_id} exceeds model capacity: {what}")]
    SceneTooLarge { scene_id: String, what: String },
    #[error("checkpoint mismatch: {0}")]
    CheckpointShape(String),
    #[error(transparent)]
    Backbone(#[from] backbone::BackboneError),
    #[error(transparent)]
    Data(#[from] crate::scene::DataError),
}

/// The full captioning model: config, vocabulary, and every parameter.
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub f1: AffineNorm,
    pub f2: AffineNorm,
    pub fuse: EncoderStack,
    pub vcap: EncoderStack,
    pub tcap: EncoderStack,
    pub acg_gru: Option<GruCell>,
    pub acg_attn: Option<EncoderStack>,
}

struct Layout {
    f1: AffineNorm,
    f2: AffineNorm,
    fuse: EncoderStack,
    vcap: EncoderStack,
    tcap: EncoderStack,
    acg_gru: Option<GruCell>,
    acg_attn: Option<EncoderStack>,
}

/// Register every parameter for `config` into `store` in a fixed order.
fn register(config: &ModelConfig, vocab_len: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Layout {
    let d = config.d;
    let f1 = AffineNorm::new("f1", config.dims.d_app + 4, d);
    f1.register(store, rng);
    let f2 = AffineNorm::new(
        "f2",
        config.dims.d_app + 4 + config.dims.d_ft + config.dims.d_phoc,
        d,
    );
    f2.register(store, rng);
    let fuse = EncoderStack::new("fuse", config.fuse_layers, d, config.heads);
    fuse.register(store, rng);

    store.insert_xavier("anchor.w", d, 1, rng);
    store.insert_zeros("anchor.b", 1, 1);

    let mut acg_gru = None;
    let mut acg_attn = None;
    match config.strategy {
        GraphStrategy::Sequence => {
            let gru = GruCell::new("acg.gru", d);
            gru.register(store, rng);
            acg_gru = Some(gru);
            store.insert_xavier("acg.f3.w", d, 1, rng);
            store.insert_zeros("acg.f3.b", 1, 1);
        }
        GraphStrategy::Independent => {
            store.insert_xavier("acg.ind.w", 2 * d, 1, rng);
            store.insert_zeros("acg.ind.b", 1, 1);
        }
        GraphStrategy::Multiple => {
            let attn = EncoderStack::new("acg.attn", config.acg_layers, d, config.heads);
            attn.register(store, rng);
            acg_attn = Some(attn);
            store.insert_xavier("acg.f3.w", d, 1, rng);
            store.insert_zeros("acg.f3.b", 1, 1);
        }
    }

    store.insert_xavier("wemb", vocab_len, d, rng);
    store.insert_xavier("vcap.pos", config.max_steps(), d, rng);
    store.insert_xavier("tcap.pos", config.max_steps(), d, rng);

    let vcap = EncoderStack::new("vcap", config.vcap_layers, d, config.heads);
    vcap.register(store, rng);
    let tcap = EncoderStack::new("tcap", config.tcap_layers, d, config.heads);
    tcap.register(store, rng);

    store.insert_xavier("f4.w", d, vocab_len, rng);
    store.insert_zeros("f4.b", 1, vocab_len);

    store.insert_xavier("fdp.wg", d, d, rng);
    store.insert_zeros("fdp.bg", 1, d);
    store.insert_xavier("fdp.wy", d, d, rng);
    store.insert_zeros("fdp.by", 1, d);

    Layout { f1, f2, fuse, vcap, tcap, acg_gru, acg_attn }
}

impl Model {
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = register(&config, vocab.len(), &mut store, &mut rng);
        Ok(Model {
            config,
            vocab,
            store,
            f1: layout.f1,
            f2: layout.f2,
            fuse: layout.fuse,
            vcap: layout.vcap,
            tcap: layout.tcap,
            acg_gru: layout.acg_gru,
            acg_attn: layout.acg_attn,
        })
    }

    /// Wrap an existing store (from a checkpoint). Every expected parameter
    /// must be present with the expected shape, and nothing extra.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, store: ParamStore) -> Result<Model, ModelError> {
        config.validate()?;
        let mut expect = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout = register(&config, vocab.len(), &mut expect, &mut rng);
        for (name, want) in expect.iter() {
            match store.get(name) {
                None => return Err(ModelError::CheckpointShape(format!("missing parameter {name}"))),
                Some(t) if (t.rows, t.cols) != (want.rows, want.cols) => {
                    return Err(ModelError::CheckpointShape(format!(
                        "parameter {name} has shape {}x{}, expected {}x{}",
                        t.rows, t.cols, want.rows, want.cols
                    )))
                }
                Some(_) => {}
            }
        }
        if store.len() != expect.len() {
            let extra: Vec<&str> =
                store.names().filter(|n| expect.get(n).is_none()).map(|s| s as &str).collect();
            return Err(ModelError::CheckpointShape(format!(
                "unexpected parameters: {}",
                extra.join(", ")
            )));
        }
        Ok(Model {
            config,
            vocab,
            store,
            f1: layout.f1,
            f2: layout.f2,
            fuse: layout.fuse,
            vcap: layout.vcap,
            tcap: layout.tcap,
            acg_gru: layout.acg_gru,
            acg_attn: layout.acg_attn,
        })
    }

    /// Check one scene against row capacities and feature dims.
    pub fn check_scene(&self, scene: &Scene) -> Result<(), ModelError> {
        let c = &self.config;
        if scene.objects.len() > c.n_objects {
            return Err(ModelError::SceneTooLarge {
                scene_id: scene.id.clone(),
                what: format!("{} objects > capacity {}", scene.objects.len(), c.n_objects),
            });
        }
        if scene.ocr.len() > c.m_tokens {
            return Err(ModelError::SceneTooLarge {
                scene_id: scene.id.clone(),
                what: format!("{} ocr tokens > capacity {}", scene.ocr.len(), c.m_tokens),
            });
        }
        let violations = crate::scene::validate_scene(scene, &c.dims);
        if !violations.is_empty() {
            return Err(ModelError::Data(crate::scene::DataError::Validation {
                scene_id: scene.id.clone(),
                violations,
            }));
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path, extra: serde_json::Value) -> Result<(), ModelError> {
        let ckpt = backbone::Checkpoint {
            version: backbone::CHECKPOINT_VERSION,
            params: self.store.clone(),
            extra: serde_json::json!({
                "model_config": self.config,
                "state": extra,
            }),
        };
        ckpt.save(path)?;
        Ok(())
    }

    /// Load a checkpoint written by `save_checkpoint`, returning the model and
    /// the optimizer/progress state blob.
    pub fn load_checkpoint(path: &Path, vocab: Vocabulary) -> Result<(Model, serde_json::Value), ModelError> {
        let ckpt = backbone::Checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_value(
            ckpt.extra.get("model_config").cloned().unwrap_or(serde_json::Value::Null),
        )
        .map_err(|e| ModelError::CheckpointShape(format!("bad model_config in checkpoint: {e}")))?;
        let state = ckpt.extra.get("state").cloned().unwrap_or(serde_json::Value::Null);
        let model = Model::from_parts(config, vocab, ckpt.params)?;
        Ok((model, state))
    }

    /// Constant zero tensor helper with the model width.
    pub fn zero_row(&self) -> Tensor {
        Tensor::zeros(1, self.config.d)
    }
}
