//! Model assembly: wires backbone, local region attention, relation
//! learning, and fusion together according to the ablation toggles, and
//! runs per-sample forward passes on a tape.
//!
//! Toggle dependencies: the attention gate feeds node extraction, so
//! `use_lrp` requires `use_arl`; fusion needs both logit sources, so
//! `use_ff` requires `use_arl`. The loss attaches to the final output of
//! whatever configuration is active.

use crate::arl::{build_topk_graph, Arl, ArlConfig, RelationGraph};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{fuse_fixed, predict_probs, AttentionFusion, FusionConfig, FusionVariant};
use crate::lrp::{Lrp, LrpConfig};
use crate::params::ParamStore;
use crate::tape::{Tape, Val};
use crate::tensor::{seeded_rng, Real, Tensor};

use serde::{Deserialize, Serialize};

/// Ablation toggles plus every architecture hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub use_circle_loss: bool,
    pub load_pretrained_backbone: bool,
    pub use_arl: bool,
    pub use_lrp: bool,
    pub use_ff: bool,
    pub ff_variant: FusionVariant,
    /// Fixed-fusion backbone weight.
    pub alpha: f64,
    /// LRP channel compression rate (r).
    pub compression: usize,
    /// LANet count (M).
    pub num_lanets: usize,
    /// Relation-graph neighbor count.
    pub k: usize,
    /// AU node feature dimension.
    pub node_dim: usize,
    /// Fusion token dimension.
    pub token_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub gnn_layers: usize,
    pub backbone: BackboneConfig,
    /// Checkpoint to read backbone weights from when
    /// `load_pretrained_backbone` is set.
    pub pretrained_backbone_path: Option<String>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            use_circle_loss: true,
            load_pretrained_backbone: false,
            use_arl: true,
            use_lrp: true,
            use_ff: true,
            ff_variant: FusionVariant::Attention,
            alpha: 0.5,
            compression: 8,
            num_lanets: 4,
            k: 3,
            node_dim: 32,
            token_dim: 32,
            heads: 2,
            encoder_layers: 2,
            gnn_layers: 1,
            backbone: BackboneConfig::default(),
            pretrained_backbone_path: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Baseline: backbone + logit head only, plain BCE.
    pub fn baseline() -> Self {
        ModelConfig {
            use_circle_loss: false,
            use_arl: false,
            use_lrp: false,
            use_ff: false,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_lrp && !self.use_arl {
            return Err(Error::Config(
                "use_lrp requires use_arl: the attention gate feeds node extraction".into(),
            ));
        }
        if self.use_ff && !self.use_arl {
            return Err(Error::Config(
                "use_ff requires use_arl: fusion needs both logit sources".into(),
            ));
        }
        self.backbone.validate()?;
        if self.use_lrp {
            let lrp = LrpConfig {
                num_lanets: self.num_lanets,
                compression: self.compression,
            };
            if lrp.num_lanets == 0 {
                return Err(Error::Config("num_lanets must be >= 1".into()));
            }
            if lrp.compression == 0 || self.backbone.feat_channels() % lrp.compression != 0 {
                return Err(Error::Config(format!(
                    "feat channels {} must be divisible by compression {}",
                    self.backbone.feat_channels(),
                    lrp.compression
                )));
            }
        }
        if self.use_arl {
            self.arl_config().validate()?;
        }
        if self.use_ff {
            self.fusion_config().validate()?;
        }
        if self.load_pretrained_backbone && self.pretrained_backbone_path.is_none() {
            return Err(Error::Config(
                "load_pretrained_backbone is set but pretrained_backbone_path is empty".into(),
            ));
        }
        Ok(())
    }

    fn lrp_config(&self) -> LrpConfig {
        LrpConfig {
            num_lanets: self.num_lanets,
            compression: self.compression,
        }
    }

    fn arl_config(&self) -> ArlConfig {
        ArlConfig {
            node_dim: self.node_dim,
            k: self.k,
            gnn_layers: self.gnn_layers,
        }
    }

    fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            variant: self.ff_variant,
            alpha: self.alpha,
            token_dim: self.token_dim,
            encoder_layers: self.encoder_layers,
            heads: self.heads,
        }
    }

    /// The six-row ablation ladder, from bare baseline to the full model.
    /// Each row adds one toggle on top of the previous one.
    pub fn ablation_ladder() -> Vec<(&'static str, ModelConfig)> {
        let mut rows = Vec::new();
        let mut cfg = ModelConfig::baseline();
        rows.push(("baseline", cfg.clone()));
        cfg.use_circle_loss = true;
        rows.push(("+circle-loss", cfg.clone()));
        cfg.load_pretrained_backbone = true;
        rows.push(("+pretrained-backbone", cfg.clone()));
        cfg.use_arl = true;
        rows.push(("+relation-learning", cfg.clone()));
        cfg.use_lrp = true;
        rows.push(("+local-attention", cfg.clone()));
        cfg.use_ff = true;
        cfg.ff_variant = FusionVariant::Attention;
        rows.push(("+feature-fusion", cfg.clone()));
        rows
    }
}

/// Handles into one sample's forward tape.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Final probabilities of the active configuration.
    pub probs: Val,
    /// Final (pre-sigmoid) logits the loss attaches to.
    pub logits: Val,
    pub backbone_logits: Val,
    pub au_logits: Option<Val>,
    pub fusion_weights: Option<Val>,
    pub attention_map: Option<Val>,
    pub graph: Option<RelationGraph>,
}

/// An assembled detector.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    backbone: Backbone,
    lrp: Option<Lrp>,
    arl: Option<Arl>,
    fusion: Option<AttentionFusion>,
}

impl<T: Real> Model<T> {
    /// Build a model with freshly initialized parameters, deterministic in
    /// `cfg.seed`.
    pub fn build(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(cfg.seed, 0);
        let backbone = Backbone::build(cfg.backbone.clone(), &mut store, &mut rng)?;
        let feat = cfg.backbone.feat_channels();
        let lrp = if cfg.use_lrp {
            Some(Lrp::build(&cfg.lrp_config(), feat, &mut store, &mut rng)?)
        } else {
            None
        };
        let arl = if cfg.use_arl {
            Some(Arl::build(&cfg.arl_config(), feat, &mut store, &mut rng)?)
        } else {
            None
        };
        let fusion = if cfg.use_ff && cfg.ff_variant == FusionVariant::Attention {
            Some(AttentionFusion::build(
                &cfg.fusion_config(),
                feat,
                cfg.node_dim,
                &mut store,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Model {
            cfg,
            store,
            backbone,
            lrp,
            arl,
            fusion,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Forward one image. Every branch demanded by the configuration runs;
    /// the final logits follow the active output head.
    pub fn forward(&self, tape: &mut Tape<T>, image: &Tensor<T>) -> Result<ForwardPass> {
        let image = tape.constant(image.clone());
        self.forward_val(tape, image)
    }

    /// Forward from a value already on the tape (so callers can read the
    /// input gradient after backward).
    pub fn forward_val(&self, tape: &mut Tape<T>, image: Val) -> Result<ForwardPass> {
        let (fm, pooled) = self.backbone.forward(tape, &self.store, image)?;
        let backbone_logits = self.backbone.logits(tape, &self.store, pooled)?;

        let mut au_logits = None;
        let mut fusion_weights = None;
        let mut attention_map = None;
        let mut graph_out = None;

        let final_logits = if let Some(arl) = &self.arl {
            let gated = if let Some(lrp) = &self.lrp {
                let att = lrp.attention(tape, &self.store, fm)?;
                attention_map = Some(att);
                Lrp::apply(tape, fm, att)?
            } else {
                fm
            };
            let nodes = arl.extract_nodes(tape, &self.store, gated)?;
            let graph = build_topk_graph(tape.value(nodes), self.cfg.k)?;
            let nodes_out = arl.message_pass(tape, &self.store, nodes, &graph)?;
            let logits = arl.au_logits(tape, &self.store, nodes_out)?;
            au_logits = Some(logits);
            graph_out = Some(graph);

            if self.cfg.use_ff {
                match self.cfg.ff_variant {
                    FusionVariant::Fixed => {
                        fuse_fixed(tape, backbone_logits, logits, self.cfg.alpha)?
                    }
                    FusionVariant::Attention => {
                        let fusion = self.fusion.as_ref().expect("built with attention fusion");
                        let (fused, weights) = fusion.forward(
                            tape,
                            &self.store,
                            pooled,
                            nodes_out,
                            backbone_logits,
                            logits,
                        )?;
                        fusion_weights = Some(weights);
                        fused
                    }
                }
            } else {
                logits
            }
        } else {
            backbone_logits
        };

        let probs = predict_probs(tape, final_logits)?;
        Ok(ForwardPass {
            probs,
            logits: final_logits,
            backbone_logits,
            au_logits,
            fusion_weights,
            attention_map,
            graph: graph_out,
        })
    }

    /// Forward without keeping the tape: probabilities plus optional
    /// fusion weights.
    pub fn predict(&self, image: &Tensor<T>) -> Result<(Vec<T>, Option<Vec<T>>)> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, image)?;
        let probs = tape.value(pass.probs).data().to_vec();
        let weights = pass
            .fusion_weights
            .map(|w| tape.value(w).data().to_vec());
        Ok((probs, weights))
    }
}
