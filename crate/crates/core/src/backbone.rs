//! Compact convolutional feature extractor.
//!
//! A stack of stride-2 3x3 conv + relu stages standing in for a large
//! pretrained backbone: the rest of the pipeline only relies on the
//! (channels, h, w) feature-map + pooled-vector contract. A linear head
//! maps the pooled vector to the 12 per-class logits.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::Real;
use crate::NUM_AU;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Architecture of the feature extractor. Inputs are square RGB images in
/// [0,1]; each stage halves the spatial size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Input height = width.
    pub input_hw: usize,
    /// Output channels per stage; the last entry is the feature dimension.
    pub stage_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_hw: 64,
            stage_channels: vec![16, 32, 48, 64],
        }
    }
}

impl BackboneConfig {
    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Feature-map channel count produced by the last stage.
    pub fn feat_channels(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    /// Output spatial size: input / 2^stages.
    pub fn out_hw(&self) -> usize {
        self.input_hw >> self.stages()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one stage".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("backbone stage channels must be > 0".into()));
        }
        let div = 1usize << self.stages();
        if self.input_hw % div != 0 {
            return Err(Error::Config(format!(
                "input size {} is not divisible by 2^{} stages",
                self.input_hw,
                self.stages()
            )));
        }
        if self.out_hw() < 4 {
            return Err(Error::Config(format!(
                "output spatial size {} is below the minimum of 4",
                self.out_hw()
            )));
        }
        Ok(())
    }
}

/// Conv stack plus the per-class logit head.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
}

impl Backbone {
    pub fn build<T: Real>(
        cfg: BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = 3usize;
        for (i, &out_ch) in cfg.stage_channels.iter().enumerate() {
            let w = store.register(
                &format!("backbone.stage{i}.weight"),
                vec![out_ch, in_ch, 3, 3],
                Init::FanInUniform {
                    fan_in: in_ch * 9,
                },
                rng,
            )?;
            let b = store.register(
                &format!("backbone.stage{i}.bias"),
                vec![out_ch],
                Init::Zeros,
                rng,
            )?;
            stages.push((w, b));
            in_ch = out_ch;
        }
        let head_w = store.register(
            "backbone.head.weight",
            vec![NUM_AU, cfg.feat_channels()],
            Init::FanInUniform {
                fan_in: cfg.feat_channels(),
            },
            rng,
        )?;
        let head_b = store.register("backbone.head.bias", vec![NUM_AU], Init::Zeros, rng)?;
        Ok(Backbone {
            cfg,
            stages,
            head: (head_w, head_b),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Run the conv stack: image (3,H,W) -> (feature map, pooled vector).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Val,
    ) -> Result<(Val, Val)> {
        let shape = tape.value(image).shape().to_vec();
        let want = vec![3, self.cfg.input_hw, self.cfg.input_hw];
        if shape != want {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: shape,
                rhs: want,
            });
        }
        let mut x = image;
        for &(w, b) in &self.stages {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let conv = tape.conv3x3(x, wv, bv, 2)?;
            x = tape.relu(conv)?;
        }
        let pooled = tape.gap(x)?;
        Ok((x, pooled))
    }

    /// Linear logit head on the pooled vector.
    pub fn logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        pooled: Val,
    ) -> Result<Val> {
        let w = tape.param(store, self.head.0);
        let b = tape.param(store, self.head.1);
        tape.linear(w, pooled, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{rand_tensor, seeded_rng, Tensor};

    fn build_f64(cfg: BackboneConfig, seed: u64) -> (Backbone, ParamStore<f64>) {
        let mut rng = seeded_rng(seed, 0);
        let mut store = ParamStore::new();
        let bb = Backbone::build(cfg, &mut store, &mut rng).unwrap();
        (bb, store)
    }

    #[test]
    fn default_shapes() {
        let (bb, store) = build_f64(BackboneConfig::default(), 1);
        let mut tape = Tape::new();
        let mut rng = seeded_rng(2, 0);
        let img = tape.constant(rand_tensor(&mut rng, vec![3, 64, 64], 0.5));
        let (fm, pooled) = bb.forward(&mut tape, &store, img).unwrap();
        assert_eq!(tape.value(fm).shape(), &[64, 4, 4]);
        assert_eq!(tape.value(pooled).shape(), &[64]);
        let logits = bb.logits(&mut tape, &store, pooled).unwrap();
        assert_eq!(tape.value(logits).shape(), &[12]);
    }

    #[test]
    fn zero_image_with_zero_biases_pools_to_zero() {
        let (bb, store) = build_f64(BackboneConfig::default(), 3);
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(vec![3, 64, 64]));
        let (_, pooled) = bb.forward(&mut tape, &store, img).unwrap();
        assert!(tape.value(pooled).data().iter().all(|&v| v == 0.0));
        let logits = bb.logits(&mut tape, &store, pooled).unwrap();
        assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_is_shape_error() {
        let (bb, store) = build_f64(BackboneConfig::default(), 4);
        let mut tape = Tape::new();
        let img = tape.constant(Tensor::zeros(vec![3, 32, 32]));
        assert!(matches!(
            bb.forward(&mut tape, &store, img),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pooled_equals_spatial_mean_of_feature_map() {
        let (bb, store) = build_f64(BackboneConfig::default(), 5);
        let mut tape = Tape::new();
        let mut rng = seeded_rng(6, 0);
        let img = tape.constant(rand_tensor(&mut rng, vec![3, 64, 64], 0.5));
        let (fm, pooled) = bb.forward(&mut tape, &store, img).unwrap();
        let fmv = tape.value(fm);
        let hw = 16.0;
        for c in 0..64 {
            let mean: f64 = fmv.data()[c * 16..(c + 1) * 16].iter().sum::<f64>() / hw;
            assert!((tape.value(pooled).data()[c] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn logits_match_independent_dot_product() {
        let (bb, store) = build_f64(BackboneConfig::default(), 7);
        let mut rng = seeded_rng(8, 0);
        let pooled_t = rand_tensor::<f64>(&mut rng, vec![64], 1.0);
        let mut tape = Tape::new();
        let pooled = tape.constant(pooled_t.clone());
        let logits = bb.logits(&mut tape, &store, pooled).unwrap();

        let w = store.value(store.lookup("backbone.head.weight").unwrap());
        let b = store.value(store.lookup("backbone.head.bias").unwrap());
        for i in 0..12 {
            let mut acc = b.data()[i];
            for j in 0..64 {
                acc += w.data()[i * 64 + j] * pooled_t.data()[j];
            }
            assert!((tape.value(logits).data()[i] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_output_below_minimum() {
        let cfg = BackboneConfig {
            input_hw: 16,
            stage_channels: vec![4, 8, 8],
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_is_bitwise_reproducible_for_seed() {
        let run = || {
            let (bb, store) = build_f64(BackboneConfig::default(), 11);
            let mut tape = Tape::new();
            let mut rng = seeded_rng(12, 0);
            let img = tape.constant(rand_tensor(&mut rng, vec![3, 64, 64], 0.5));
            let (fm, _) = bb.forward(&mut tape, &store, img).unwrap();
            tape.value(fm).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
