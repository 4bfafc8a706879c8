//! Local region perception: a bank of two-layer 1x1-conv attention units
//! whose score maps are max-reduced over the bank and squashed through a
//! sigmoid into a single-channel gate for the backbone feature map.

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Val};
use crate::tensor::Real;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LrpConfig {
    /// Number of attention units in the bank.
    pub num_lanets: usize,
    /// Channel compression rate of the first 1x1 conv.
    pub compression: usize,
}

impl Default for LrpConfig {
    fn default() -> Self {
        LrpConfig {
            num_lanets: 4,
            compression: 8,
        }
    }
}

/// One attention unit: conv1x1 (c -> c/r) + relu + conv1x1 (c/r -> 1).
#[derive(Debug, Clone)]
struct LaNet {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct Lrp {
    lanets: Vec<LaNet>,
}

impl Lrp {
    pub fn build<T: Real>(
        cfg: &LrpConfig,
        feat_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if cfg.num_lanets == 0 {
            return Err(Error::Config("lrp needs at least one lanet".into()));
        }
        if cfg.compression == 0 || feat_channels % cfg.compression != 0 {
            return Err(Error::Config(format!(
                "feature channels {} not divisible by compression rate {}",
                feat_channels, cfg.compression
            )));
        }
        let mid = feat_channels / cfg.compression;
        let mut lanets = Vec::with_capacity(cfg.num_lanets);
        for i in 0..cfg.num_lanets {
            let w1 = store.register(
                &format!("lrp.lanet{i}.conv1.weight"),
                vec![mid, feat_channels],
                Init::FanInUniform {
                    fan_in: feat_channels,
                },
                rng,
            )?;
            let b1 = store.register(
                &format!("lrp.lanet{i}.conv1.bias"),
                vec![mid],
                Init::Zeros,
                rng,
            )?;
            let w2 = store.register(
                &format!("lrp.lanet{i}.conv2.weight"),
                vec![1, mid],
                Init::FanInUniform { fan_in: mid },
                rng,
            )?;
            let b2 = store.register(
                &format!("lrp.lanet{i}.conv2.bias"),
                vec![1],
                Init::Zeros,
                rng,
            )?;
            lanets.push(LaNet {
                conv1: (w1, b1),
                conv2: (w2, b2),
            });
        }
        Ok(Lrp { lanets })
    }

    pub fn num_lanets(&self) -> usize {
        self.lanets.len()
    }

    /// Pre-sigmoid score map of one unit: (c,h,w) -> (1,h,w).
    pub fn lanet_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        unit: usize,
        fm: Val,
    ) -> Result<Val> {
        let lanet = &self.lanets[unit];
        let w1 = tape.param(store, lanet.conv1.0);
        let b1 = tape.param(store, lanet.conv1.1);
        let mid = tape.conv1x1(fm, w1, b1)?;
        let mid = tape.relu(mid)?;
        let w2 = tape.param(store, lanet.conv2.0);
        let b2 = tape.param(store, lanet.conv2.1);
        tape.conv1x1(mid, w2, b2)
    }

    /// Stack all score maps on the channel axis, take the channel max,
    /// and apply sigmoid: the attention map, each value in (0,1).
    pub fn attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fm: Val,
    ) -> Result<Val> {
        let shape = tape.value(fm).shape().to_vec();
        let (h, w) = (shape[1], shape[2]);
        let mut flat_maps = Vec::with_capacity(self.lanets.len());
        for i in 0..self.lanets.len() {
            let score = self.lanet_forward(tape, store, i, fm)?;
            flat_maps.push(tape.reshape(score, vec![h * w])?);
        }
        let stacked = tape.concat_vec(&flat_maps)?;
        let stacked = tape.reshape(stacked, vec![self.lanets.len(), h, w])?;
        let maxed = tape.channel_max(stacked)?;
        tape.sigmoid(maxed)
    }

    /// Gate the feature map with the attention map (broadcast over
    /// channels).
    pub fn apply<T: Real>(tape: &mut Tape<T>, fm: Val, attention: Val) -> Result<Val> {
        tape.mul_channel_bcast(fm, attention)
    }
}
