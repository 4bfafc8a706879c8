//! Logit fusion: combine backbone logits with AU (graph) logits, either by
//! a fixed convex weight or through a learned weight token.
//!
//! The attention variant builds a 14-token sequence [weight token, backbone
//! token, 12 AU tokens], runs it through a small self-attention encoder,
//! and reads the per-AU fusion weights off the weight token. The weight
//! head starts at zero so fusion opens at the neutral 0.5/0.5 mix.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::Real;
use crate::NUM_AU;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sequence length: weight token + backbone token + one token per AU.
pub const TOKEN_COUNT: usize = 2 + NUM_AU;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionVariant {
    Fixed,
    Attention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub variant: FusionVariant,
    /// Backbone weight of the fixed variant, in [0,1].
    pub alpha: f64,
    pub token_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            variant: FusionVariant::Attention,
            alpha: 0.5,
            token_dim: 32,
            encoder_layers: 2,
            heads: 2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "fusion alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        if self.variant == FusionVariant::Attention {
            if self.token_dim == 0 || self.encoder_layers == 0 || self.heads == 0 {
                return Err(Error::Config(
                    "attention fusion dims/layers/heads must be > 0".into(),
                ));
            }
            if self.token_dim % self.heads != 0 {
                return Err(Error::Config(format!(
                    "heads ({}) must divide token_dim ({})",
                    self.heads, self.token_dim
                )));
            }
        }
        Ok(())
    }
}

/// alpha * backbone + (1 - alpha) * au, elementwise.
pub fn fuse_fixed<T: Real>(
    tape: &mut Tape<T>,
    backbone_logits: Val,
    au_logits: Val,
    alpha: f64,
) -> Result<Val> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "fusion alpha must be in [0,1], got {alpha}"
        )));
    }
    let b_term = tape.affine(backbone_logits, alpha, 0.0)?;
    let a_term = tape.affine(au_logits, 1.0 - alpha, 0.0)?;
    tape.add(b_term, a_term)
}

/// Probabilities from fused logits.
pub fn predict_probs<T: Real>(tape: &mut Tape<T>, fused: Val) -> Result<Val> {
    tape.sigmoid(fused)
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

/// Weight-token fusion head.
#[derive(Debug, Clone)]
pub struct AttentionFusion {
    cfg: FusionConfig,
    weight_token: ParamId,
    proj_backbone: (ParamId, ParamId),
    proj_au: (ParamId, ParamId),
    layers: Vec<EncoderLayer>,
    weight_head: (ParamId, ParamId),
}

impl AttentionFusion {
    pub fn build<T: Real>(
        cfg: &FusionConfig,
        feat_channels: usize,
        node_dim: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        // learned token, initialized like a class token
        let weight_token =
            store.register("fusion.weight_token", vec![d], Init::Normal { std: 0.02 }, rng)?;
        let proj_backbone = (
            store.register(
                "fusion.proj_backbone.weight",
                vec![d, feat_channels],
                Init::FanInUniform {
                    fan_in: feat_channels,
                },
                rng,
            )?,
            store.register("fusion.proj_backbone.bias", vec![d], Init::Zeros, rng)?,
        );
        let proj_au = (
            store.register(
                "fusion.proj_au.weight",
                vec![d, node_dim],
                Init::FanInUniform { fan_in: node_dim },
                rng,
            )?,
            store.register("fusion.proj_au.bias", vec![d], Init::Zeros, rng)?,
        );
        let mut layers = Vec::with_capacity(cfg.encoder_layers);
        for l in 0..cfg.encoder_layers {
            let proj = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize|
             -> Result<(ParamId, ParamId)> {
                Ok((
                    store.register(
                        &format!("fusion.enc{l}.{name}.weight"),
                        vec![rows, cols],
                        Init::FanInUniform { fan_in: rows },
                        rng,
                    )?,
                    store.register(
                        &format!("fusion.enc{l}.{name}.bias"),
                        vec![cols],
                        Init::Zeros,
                        rng,
                    )?,
                ))
            };
            let wq = proj(store, rng, "attn_q", d, d)?;
            let wk = proj(store, rng, "attn_k", d, d)?;
            let wv = proj(store, rng, "attn_v", d, d)?;
            let wo = proj(store, rng, "attn_out", d, d)?;
            let ln1 = (
                store.register(
                    &format!("fusion.enc{l}.ln1.gain"),
                    vec![d],
                    Init::Zeros,
                    rng,
                )?,
                store.register(
                    &format!("fusion.enc{l}.ln1.bias"),
                    vec![d],
                    Init::Zeros,
                    rng,
                )?,
            );
            let ff1 = proj(store, rng, "ff1", d, 2 * d)?;
            let ff2 = proj(store, rng, "ff2", 2 * d, d)?;
            let ln2 = (
                store.register(
                    &format!("fusion.enc{l}.ln2.gain"),
                    vec![d],
                    Init::Zeros,
                    rng,
                )?,
                store.register(
                    &format!("fusion.enc{l}.ln2.bias"),
                    vec![d],
                    Init::Zeros,
                    rng,
                )?,
            );
            layers.push(EncoderLayer {
                wq,
                wk,
                wv,
                wo,
                ln1,
                ff1,
                ff2,
                ln2,
            });
        }
        // layer-norm gains start at one
        for layer in &layers {
            for id in [layer.ln1.0, layer.ln2.0] {
                let mut ones = store.value(id).clone();
                ones.data_mut().iter_mut().for_each(|v| *v = T::one());
                store.set_value(id, ones)?;
            }
        }
        // the weight head starts at zero: sigmoid(0) = 0.5 on every AU,
        // so step 0 reproduces the fixed alpha = 0.5 fusion bitwise
        let weight_head = (
            store.register(
                "fusion.weight_head.weight",
                vec![NUM_AU, d],
                Init::Zeros,
                rng,
            )?,
            store.register("fusion.weight_head.bias", vec![NUM_AU], Init::Zeros, rng)?,
        );
        Ok(AttentionFusion {
            cfg: cfg.clone(),
            weight_token,
            proj_backbone,
            proj_au,
            layers,
            weight_head,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// One encoder layer: multi-head self-attention with residual + layer
    /// norm, then a position-wise feed-forward (hidden 2*d, relu) with
    /// residual + layer norm.
    fn encoder_layer<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        layer: &EncoderLayer,
        x: Val,
    ) -> Result<Val> {
        let d = self.cfg.token_dim;
        let dh = d / self.cfg.heads;
        let project = |tape: &mut Tape<T>, w: (ParamId, ParamId), input: Val| -> Result<Val> {
            let wv = tape.param(store, w.0);
            let bv = tape.param(store, w.1);
            let prod = tape.mat_mul(input, wv)?;
            tape.add_row_bcast(prod, bv)
        };
        let q = project(tape, layer.wq, x)?;
        let k = project(tape, layer.wk, x)?;
        let v = project(tape, layer.wv, x)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.col_slice(q, h * dh, dh)?;
            let kh = tape.col_slice(k, h * dh, dh)?;
            let vh = tape.col_slice(v, h * dh, dh)?;
            heads.push(tape.sdpa(qh, kh, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let attn_out = project(tape, layer.wo, merged)?;
        let res1 = tape.add(x, attn_out)?;
        let g1 = tape.param(store, layer.ln1.0);
        let b1 = tape.param(store, layer.ln1.1);
        let norm1 = tape.layer_norm_rows(res1, g1, b1)?;

        let hidden = project(tape, layer.ff1, norm1)?;
        let hidden = tape.relu(hidden)?;
        let ff_out = project(tape, layer.ff2, hidden)?;
        let res2 = tape.add(norm1, ff_out)?;
        let g2 = tape.param(store, layer.ln2.0);
        let b2 = tape.param(store, layer.ln2.1);
        tape.layer_norm_rows(res2, g2, b2)
    }

    /// Full fusion: build the token sequence, encode, read fusion weights
    /// from the weight token, and mix the two logit vectors.
    /// Returns (fused logits, per-AU weights).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pooled: Val,
        nodes_out: Val,
        backbone_logits: Val,
        au_logits: Val,
    ) -> Result<(Val, Val)> {
        let wt = tape.param(store, self.weight_token);
        let pb_w = tape.param(store, self.proj_backbone.0);
        let pb_b = tape.param(store, self.proj_backbone.1);
        let backbone_token = tape.linear(pb_w, pooled, pb_b)?;
        let pa_w = tape.param(store, self.proj_au.0);
        let pa_b = tape.param(store, self.proj_au.1);
        let mut tokens = vec![wt, backbone_token];
        for i in 0..NUM_AU {
            let node = tape.row(nodes_out, i)?;
            tokens.push(tape.linear(pa_w, node, pa_b)?);
        }
        debug_assert_eq!(tokens.len(), TOKEN_COUNT);
        let mut seq = tape.stack_rows(&tokens)?;
        for layer in &self.layers {
            seq = self.encoder_layer(tape, store, layer, seq)?;
        }
        let weight_out = tape.row(seq, 0)?;
        let wh_w = tape.param(store, self.weight_head.0);
        let wh_b = tape.param(store, self.weight_head.1);
        let weight_logits = tape.linear(wh_w, weight_out, wh_b)?;
        let weights = tape.sigmoid(weight_logits)?;
        let fused = mix(tape, weights, backbone_logits, au_logits)?;
        Ok((fused, weights))
    }
}

/// fused = w . backbone + (1 - w) . au.
fn mix<T: Real>(tape: &mut Tape<T>, weights: Val, backbone: Val, au: Val) -> Result<Val> {
    let b_term = tape.mul_elem(weights, backbone)?;
    let one_minus = tape.affine(weights, -1.0, 1.0)?;
    let a_term = tape.mul_elem(one_minus, au)?;
    tape.add(b_term, a_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rand_tensor, seeded_rng, Tensor};

    #[test]
    fn fixed_endpoints_are_exact() {
        let mut rng = seeded_rng(1, 0);
        let b = rand_tensor::<f64>(&mut rng, vec![12], 2.0);
        let a = rand_tensor::<f64>(&mut rng, vec![12], 2.0);
        let mut tape = Tape::new();
        let bv = tape.constant(b.clone());
        let av = tape.constant(a.clone());
        let all_b = fuse_fixed(&mut tape, bv, av, 1.0).unwrap();
        let all_a = fuse_fixed(&mut tape, bv, av, 0.0).unwrap();
        for i in 0..12 {
            assert_eq!(tape.value(all_b).data()[i].to_bits(), b.data()[i].to_bits());
            assert_eq!(tape.value(all_a).data()[i].to_bits(), a.data()[i].to_bits());
        }
    }

    #[test]
    fn fixed_half_hand_case() {
        let mut tape = Tape::new();
        let mut bd = vec![0.0f64; 12];
        let mut ad = vec![0.0f64; 12];
        bd[0] = 2.0;
        ad[1] = 2.0;
        let b = tape.constant(Tensor::from_vec(bd).unwrap());
        let a = tape.constant(Tensor::from_vec(ad).unwrap());
        let fused = fuse_fixed(&mut tape, b, a, 0.5).unwrap();
        assert_eq!(tape.value(fused).data()[0], 1.0);
        assert_eq!(tape.value(fused).data()[1], 1.0);
        assert_eq!(tape.value(fused).data()[2], 0.0);
    }

    #[test]
    fn fixed_rejects_alpha_outside_unit_interval() {
        let mut tape = Tape::<f64>::new();
        let b = tape.constant(Tensor::zeros(vec![12]));
        let a = tape.constant(Tensor::zeros(vec![12]));
        assert!(fuse_fixed(&mut tape, b, a, 1.5).is_err());
        assert!(fuse_fixed(&mut tape, b, a, -0.1).is_err());
    }

    #[test]
    fn fixed_is_linear_in_both_arguments() {
        let mut rng = seeded_rng(2, 0);
        let b = rand_tensor::<f64>(&mut rng, vec![12], 1.0);
        let a = rand_tensor::<f64>(&mut rng, vec![12], 1.0);
        let alpha = 0.3;
        let mut tape = Tape::new();
        let bv = tape.constant(b.clone());
        let av = tape.constant(a.clone());
        let fused = fuse_fixed(&mut tape, bv, av, alpha).unwrap();
        for i in 0..12 {
            let expect = alpha * b.data()[i] + (1.0 - alpha) * a.data()[i];
            assert!((tape.value(fused).data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_probs_analytic_values() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![0.0f64, 3f64.ln()]).unwrap());
        let probs = predict_probs(&mut tape, logits).unwrap();
        assert_eq!(tape.value(probs).data()[0], 0.5);
        assert!((tape.value(probs).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn predict_probs_is_monotone() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![-2.0f64, -1.0, 0.5, 2.5]).unwrap());
        let probs = predict_probs(&mut tape, logits).unwrap();
        let p = tape.value(probs).data();
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    fn build_fusion(seed: u64) -> (AttentionFusion, ParamStore<f64>) {
        let mut rng = seeded_rng(seed, 0);
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            token_dim: 16,
            heads: 2,
            ..FusionConfig::default()
        };
        let fusion = AttentionFusion::build(&cfg, 24, 8, &mut store, &mut rng).unwrap();
        (fusion, store)
    }

    #[test]
    fn attention_fusion_at_step_zero_equals_fixed_half_bitwise() {
        let (fusion, store) = build_fusion(3);
        let mut rng = seeded_rng(4, 0);
        let pooled = rand_tensor::<f64>(&mut rng, vec![24], 1.0);
        let nodes = rand_tensor::<f64>(&mut rng, vec![12, 8], 1.0);
        let b_logits = rand_tensor::<f64>(&mut rng, vec![12], 2.0);
        let a_logits = rand_tensor::<f64>(&mut rng, vec![12], 2.0);

        let mut tape = Tape::new();
        let pv = tape.constant(pooled);
        let nv = tape.constant(nodes);
        let bv = tape.constant(b_logits.clone());
        let av = tape.constant(a_logits.clone());
        let (fused, weights) = fusion.forward(&mut tape, &store, pv, nv, bv, av).unwrap();
        assert!(tape.value(weights).data().iter().all(|&w| w == 0.5));

        let mut tape2 = Tape::new();
        let bv2 = tape2.constant(b_logits);
        let av2 = tape2.constant(a_logits);
        let fixed = fuse_fixed(&mut tape2, bv2, av2, 0.5).unwrap();
        for (x, y) in tape
            .value(fused)
            .data()
            .iter()
            .zip(tape2.value(fixed).data())
        {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn fused_logits_stay_between_sources() {
        let (fusion, mut store) = build_fusion(5);
        // disturb the weight head so weights leave 0.5
        let id = store.lookup("fusion.weight_head.weight").unwrap();
        let mut rng = seeded_rng(6, 0);
        store
            .set_value(id, rand_tensor(&mut rng, vec![12, 16], 0.5))
            .unwrap();
        let pooled = rand_tensor::<f64>(&mut rng, vec![24], 1.0);
        let nodes = rand_tensor::<f64>(&mut rng, vec![12, 8], 1.0);
        let b_logits = rand_tensor::<f64>(&mut rng, vec![12], 2.0);
        let a_logits = rand_tensor::<f64>(&mut rng, vec![12], 2.0);
        let mut tape = Tape::new();
        let pv = tape.constant(pooled);
        let nv = tape.constant(nodes);
        let bv = tape.constant(b_logits.clone());
        let av = tape.constant(a_logits.clone());
        let (fused, weights) = fusion.forward(&mut tape, &store, pv, nv, bv, av).unwrap();
        for i in 0..12 {
            let w = tape.value(weights).data()[i];
            assert!(w > 0.0 && w < 1.0);
            let (lo, hi) = if b_logits.data()[i] <= a_logits.data()[i] {
                (b_logits.data()[i], a_logits.data()[i])
            } else {
                (a_logits.data()[i], b_logits.data()[i])
            };
            let f = tape.value(fused).data()[i];
            assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
        }
    }

    #[test]
    fn sequence_length_is_always_fourteen() {
        assert_eq!(TOKEN_COUNT, 14);
        let (fusion, store) = build_fusion(7);
        let mut rng = seeded_rng(8, 0);
        let mut tape = Tape::new();
        let pv = tape.constant(rand_tensor::<f64>(&mut rng, vec![24], 1.0));
        let nv = tape.constant(rand_tensor::<f64>(&mut rng, vec![12, 8], 1.0));
        let bv = tape.constant(rand_tensor::<f64>(&mut rng, vec![12], 1.0));
        let av = tape.constant(rand_tensor::<f64>(&mut rng, vec![12], 1.0));
        let (fused, weights) = fusion.forward(&mut tape, &store, pv, nv, bv, av).unwrap();
        assert_eq!(tape.value(fused).shape(), &[12]);
        assert_eq!(tape.value(weights).shape(), &[12]);
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = FusionConfig {
            token_dim: 30,
            heads: 4,
            ..FusionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
